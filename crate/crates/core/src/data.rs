//! Partial annotations, scenario manifests, mini-batch samplers, the
//! synthetic shapes dataset and the on-disk dataset layout.
//!
//! Layout of a dataset root:
//!
//! ```text
//! images/<id>.png   8-bit RGB
//! masks/<id>.png    8-bit class ids (255 = ignore)
//! boxes/<id>.txt    one "class x1 y1 x2 y2" record per line
//! manifest.txt      sample ids with per-task label flags
//! ```

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{BBox, BoxSet, Image, SegMap, IGNORE_ID};
use crate::losses::Task;

pub const BATCH_SIZE: usize = 16;
pub const LABELED_QUOTA: usize = 8;

/// Segmentation classes of the shapes dataset: background plus one per shape.
pub const SHAPE_NAMES: [&str; 3] = ["circle", "square", "triangle"];
pub const SEG_CLASS_NAMES: [&str; 4] = ["background", "circle", "square", "triangle"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScenarioKind {
    A,
    B,
    C,
    D,
    E,
}

impl ScenarioKind {
    /// Whether the segmentation subset is drawn inside the detection subset.
    pub fn nested(self) -> bool {
        matches!(self, ScenarioKind::A | ScenarioKind::B | ScenarioKind::D)
    }
}

impl FromStr for ScenarioKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(Self::A),
            "b" => Ok(Self::B),
            "c" => Ok(Self::C),
            "d" => Ok(Self::D),
            "e" => Ok(Self::E),
            _ => Err(Error::InvalidScenario(format!("unknown scenario kind {s:?}"))),
        }
    }
}

impl fmt::Display for ScenarioKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let c = match self {
            Self::A => "a",
            Self::B => "b",
            Self::C => "c",
            Self::D => "d",
            Self::E => "e",
        };
        f.write_str(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScenarioMeta {
    pub kind: ScenarioKind,
    pub seg_size: usize,
    pub det_size: usize,
    pub seed: u64,
}

/// Which samples carry which labels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AnnotationManifest {
    pub ids: Vec<String>,
    pub has_seg: Vec<bool>,
    pub has_det: Vec<bool>,
    pub scenario: Option<ScenarioMeta>,
}

/// What counts as "labeled" for explicit sampling.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LabeledRule {
    #[default]
    AnyTask,
    AllTasks,
}

impl FromStr for LabeledRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "any" | "any_task" => Ok(Self::AnyTask),
            "all" | "all_tasks" => Ok(Self::AllTasks),
            _ => Err(Error::Config(format!("unknown labeled rule {s:?}"))),
        }
    }
}

pub fn sample_id(i: usize) -> String {
    format!("{i:06}")
}

impl AnnotationManifest {
    pub fn fully_labeled(ids: Vec<String>) -> Self {
        let n = ids.len();
        Self {
            ids,
            has_seg: vec![true; n],
            has_det: vec![true; n],
            scenario: None,
        }
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn has(&self, i: usize, task: Task) -> bool {
        match task {
            Task::Segmentation => self.has_seg[i],
            Task::Detection => self.has_det[i],
        }
    }

    pub fn is_labeled(&self, i: usize, rule: LabeledRule) -> bool {
        match rule {
            LabeledRule::AnyTask => self.has_seg[i] || self.has_det[i],
            LabeledRule::AllTasks => self.has_seg[i] && self.has_det[i],
        }
    }

    pub fn count(&self, task: Task) -> usize {
        (0..self.len()).filter(|&i| self.has(i, task)).count()
    }

    /// Samples labeled for both tasks.
    pub fn overlap(&self) -> usize {
        (0..self.len()).filter(|&i| self.has_seg[i] && self.has_det[i]).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::from("# densefix manifest v1\n");
        if let Some(m) = &self.scenario {
            s += &format!(
                "# kind={} n={} seg={} det={} seed={} overlap={}\n",
                m.kind,
                self.len(),
                m.seg_size,
                m.det_size,
                m.seed,
                self.overlap()
            );
        }
        s += "# id has_seg has_det\n";
        for i in 0..self.len() {
            s += &format!("{} {} {}\n", self.ids[i], self.has_seg[i] as u8, self.has_det[i] as u8);
        }
        s
    }

    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let bad = |line: usize, why: &str| Error::format(origin, format!("line {}: {why}", line + 1));
        let mut out = Self::fully_labeled(Vec::new());
        let mut meta: Option<(ScenarioKind, usize, usize, u64)> = None;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(comment) = line.strip_prefix('#') {
                if comment.contains('=') {
                    let mut kind = None;
                    let (mut seg, mut det, mut seed) = (0, 0, 0);
                    for kv in comment.split_whitespace() {
                        let Some((k, v)) = kv.split_once('=') else { continue };
                        let num = || v.parse::<u64>().map_err(|_| bad(ln, &format!("bad value for {k}")));
                        match k {
                            "kind" => kind = Some(v.parse::<ScenarioKind>().map_err(|e| bad(ln, &e.to_string()))?),
                            "seg" => seg = num()? as usize,
                            "det" => det = num()? as usize,
                            "seed" => seed = num()?,
                            _ => {}
                        }
                    }
                    if let Some(kind) = kind {
                        meta = Some((kind, seg, det, seed));
                    }
                }
                continue;
            }
            let fields: Vec<&str> = line.split_whitespace().collect();
            let flag = |s: &str| match s {
                "0" => Ok(false),
                "1" => Ok(true),
                _ => Err(bad(ln, &format!("flag must be 0 or 1, got {s:?}"))),
            };
            match fields[..] {
                [id, seg, det] => {
                    out.ids.push(id.to_string());
                    out.has_seg.push(flag(seg)?);
                    out.has_det.push(flag(det)?);
                }
                _ => return Err(bad(ln, "expected `id has_seg has_det`")),
            }
        }
        out.scenario = meta.map(|(kind, seg_size, det_size, seed)| ScenarioMeta {
            kind,
            seg_size,
            det_size,
            seed,
        });
        if let Some(m) = &out.scenario {
            if out.count(Task::Segmentation) != m.seg_size || out.count(Task::Detection) != m.det_size {
                return Err(Error::format(origin, "flag counts disagree with the scenario header"));
            }
        }
        Ok(out)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Draws which of `ids` are labeled for each task under scenario `kind`.
/// Deterministic in `seed`.
pub fn generate_scenario(
    ids: Vec<String>,
    kind: ScenarioKind,
    seg_size: usize,
    det_size: usize,
    seed: u64,
) -> Result<AnnotationManifest> {
    let n = ids.len();
    let fail = |why: String| Err(Error::InvalidScenario(why));
    if seg_size > n || det_size > n {
        return fail(format!("subset sizes {seg_size}/{det_size} exceed {n} samples"));
    }
    match kind {
        ScenarioKind::A if det_size != n => return fail(format!("kind a needs det = n = {n}, got {det_size}")),
        ScenarioKind::B | ScenarioKind::C if seg_size != det_size => {
            return fail(format!("kind {kind} needs seg = det, got {seg_size}/{det_size}"))
        }
        ScenarioKind::D | ScenarioKind::E if det_size < seg_size => {
            return fail(format!("kind {kind} needs det >= seg, got {det_size} < {seg_size}"))
        }
        _ => {}
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let det_idx: Vec<usize> = index::sample(&mut rng, n, det_size).into_vec();
    let seg_idx: Vec<usize> = if kind.nested() {
        index::sample(&mut rng, det_size, seg_size).into_iter().map(|j| det_idx[j]).collect()
    } else {
        index::sample(&mut rng, n, seg_size).into_vec()
    };
    let mut has_seg = vec![false; n];
    let mut has_det = vec![false; n];
    seg_idx.iter().for_each(|&i| has_seg[i] = true);
    det_idx.iter().for_each(|&i| has_det[i] = true);
    Ok(AnnotationManifest {
        ids,
        has_seg,
        has_det,
        scenario: Some(ScenarioMeta {
            kind,
            seg_size,
            det_size,
            seed,
        }),
    })
}

/// Permutation of `0..n` for one epoch of a named stream.
fn epoch_perm(n: usize, seed: u64, stream: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ epoch);
    let mut p: Vec<usize> = (0..n).collect();
    p.shuffle(&mut rng);
    p
}

/// Endless reshuffled-per-epoch stream over a pool of sample indices.
#[derive(Clone, Debug)]
struct CyclicStream {
    pool: Vec<usize>,
    seed: u64,
    stream: u64,
    epoch: u64,
    perm: Vec<usize>,
}

impl CyclicStream {
    fn new(pool: Vec<usize>, seed: u64, stream: u64) -> Self {
        Self {
            pool,
            seed,
            stream,
            epoch: u64::MAX,
            perm: Vec::new(),
        }
    }

    fn at(&mut self, k: u64) -> usize {
        let n = self.pool.len() as u64;
        let epoch = k / n;
        if epoch != self.epoch {
            self.perm = epoch_perm(self.pool.len(), self.seed, self.stream, epoch);
            self.epoch = epoch;
        }
        self.pool[self.perm[(k % n) as usize]]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SamplingMode {
    Implicit,
    #[default]
    Explicit,
}

impl FromStr for SamplingMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "implicit" => Ok(Self::Implicit),
            "explicit" => Ok(Self::Explicit),
            _ => Err(Error::Config(format!("unknown sampling mode {s:?}"))),
        }
    }
}

/// Mini-batch sampler. State is the number of batches drawn, so it can be
/// checkpointed as a single counter.
#[derive(Clone, Debug)]
pub struct BatchSampler {
    mode: SamplingMode,
    total: usize,
    quota: usize,
    labeled: CyclicStream,
    unlabeled: CyclicStream,
    position: u64,
    epoch_len: u64,
}

impl BatchSampler {
    /// Uniform sampling without replacement, reshuffled every epoch.
    pub fn implicit(n: usize, total: usize, seed: u64) -> Result<Self> {
        if n == 0 || total == 0 {
            return Err(Error::EmptyPartition("dataset"));
        }
        Ok(Self {
            mode: SamplingMode::Implicit,
            total,
            quota: 0,
            labeled: CyclicStream::new(Vec::new(), seed, 0),
            unlabeled: CyclicStream::new((0..n).collect(), seed, 1),
            position: 0,
            epoch_len: (n as u64).div_ceil(total as u64),
        })
    }

    /// `quota` labeled plus `total - quota` unlabeled samples per batch from two
    /// independent cyclic streams. Without unlabeled samples the second half is
    /// drawn from the whole dataset.
    pub fn explicit(manifest: &AnnotationManifest, rule: LabeledRule, total: usize, quota: usize, seed: u64) -> Result<Self> {
        if quota == 0 || quota >= total {
            return Err(Error::Config(format!("labeled quota {quota} must lie in 1..{total}")));
        }
        let (lab, unl): (Vec<usize>, Vec<usize>) = (0..manifest.len()).partition(|&i| manifest.is_labeled(i, rule));
        if lab.is_empty() {
            return Err(Error::EmptyPartition("labeled samples"));
        }
        let unl = if unl.is_empty() { (0..manifest.len()).collect() } else { unl };
        let epoch_len = (lab.len() as u64)
            .div_ceil(quota as u64)
            .max((unl.len() as u64).div_ceil((total - quota) as u64));
        Ok(Self {
            mode: SamplingMode::Explicit,
            total,
            quota,
            labeled: CyclicStream::new(lab, seed, 2),
            unlabeled: CyclicStream::new(unl, seed, 3),
            position: 0,
            epoch_len,
        })
    }

    pub fn mode(&self) -> SamplingMode {
        self.mode
    }

    pub fn position(&self) -> u64 {
        self.position
    }

    /// Jumps to the state after `position` batches.
    pub fn seek(&mut self, position: u64) {
        self.position = position;
    }

    /// Batches per epoch (a pass over the longer stream for explicit sampling).
    pub fn epoch_len(&self) -> u64 {
        self.epoch_len
    }

    pub fn next_batch(&mut self) -> Vec<usize> {
        let b = self.position;
        self.position += 1;
        match self.mode {
            SamplingMode::Implicit => {
                let t = self.total as u64;
                (0..t).map(|j| self.unlabeled.at(b * t + j)).collect()
            }
            SamplingMode::Explicit => {
                let (q, u) = (self.quota as u64, (self.total - self.quota) as u64);
                let mut out: Vec<usize> = (0..q).map(|j| self.labeled.at(b * q + j)).collect();
                out.extend((0..u).map(|j| self.unlabeled.at(b * u + j)));
                out
            }
        }
    }
}

impl Iterator for BatchSampler {
    type Item = Vec<usize>;

    fn next(&mut self) -> Option<Vec<usize>> {
        Some(self.next_batch())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum LossScope {
    #[default]
    UnlabeledOnly,
    AllSamples,
}

impl FromStr for LossScope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "unlabeled_only" | "unlabeled" => Ok(Self::UnlabeledOnly),
            "all_samples" | "all" => Ok(Self::AllSamples),
            _ => Err(Error::Config(format!("unknown loss scope {s:?}"))),
        }
    }
}

/// `(B^l_t, B^u_t)` as positions within `batch`.
pub fn loss_membership(manifest: &AnnotationManifest, batch: &[usize], task: Task, scope: LossScope) -> (Vec<usize>, Vec<usize>) {
    let (lab, unl): (Vec<usize>, Vec<usize>) = (0..batch.len()).partition(|&p| manifest.has(batch[p], task));
    match scope {
        LossScope::UnlabeledOnly => (lab, unl),
        LossScope::AllSamples => (lab, (0..batch.len()).collect()),
    }
}

/// One image with whatever labels the manifest grants it.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiTaskSample {
    pub id: String,
    pub image: Image,
    pub seg: Option<SegMap>,
    pub det: Option<BoxSet>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub root: PathBuf,
    pub manifest: AnnotationManifest,
    pub samples: Vec<MultiTaskSample>,
}

pub fn image_path(root: &Path, id: &str) -> PathBuf {
    root.join("images").join(format!("{id}.png"))
}

pub fn mask_path(root: &Path, id: &str) -> PathBuf {
    root.join("masks").join(format!("{id}.png"))
}

pub fn boxes_path(root: &Path, id: &str) -> PathBuf {
    root.join("boxes").join(format!("{id}.txt"))
}

pub fn read_rgb(path: &Path) -> Result<Image> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![0.0f32; 3 * w * h];
    for (i, px) in img.pixels().enumerate() {
        for c in 0..3 {
            data[c * w * h + i] = px.0[c] as f32 / 255.0;
        }
    }
    Image::from_planar(w, h, 3, data)
}

pub fn write_rgb(path: &Path, img: &Image) -> Result<()> {
    let (w, h) = (img.width(), img.height());
    let mut buf = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = std::array::from_fn(|c| (img.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8);
            buf.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn read_mask(path: &Path) -> Result<SegMap> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    SegMap::from_vec(w, h, img.into_raw())
}

pub fn write_mask(path: &Path, seg: &SegMap) -> Result<()> {
    let buf = image::GrayImage::from_raw(seg.width() as u32, seg.height() as u32, seg.classes().to_vec())
        .expect("buffer matches dimensions");
    buf.save(path).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

pub fn parse_boxes(text: &str, origin: &Path) -> Result<BoxSet> {
    let mut boxes = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = |why: String| Error::format(origin, format!("line {}: {why}", ln + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 5 {
            return Err(bad("expected `class x1 y1 x2 y2`".into()));
        }
        let class: u32 = f[0].parse().map_err(|_| bad(format!("bad class {:?}", f[0])))?;
        let mut c = [0.0; 4];
        for (v, s) in c.iter_mut().zip(&f[1..]) {
            *v = s.parse().map_err(|_| bad(format!("bad coordinate {s:?}")))?;
        }
        boxes.push(BBox::new(c[0], c[1], c[2], c[3], class, 1.0).map_err(|e| bad(e.to_string()))?);
    }
    BoxSet::new(boxes)
}

pub fn boxes_to_text(boxes: &BoxSet) -> String {
    boxes
        .iter()
        .map(|b| format!("{} {} {} {} {}\n", b.class_id, b.x1, b.y1, b.x2, b.y2))
        .collect()
}

impl Dataset {
    /// Loads every sample listed by `manifest` (or `root/manifest.txt`),
    /// reading only the labels the manifest grants.
    pub fn load(root: &Path, manifest: Option<&Path>) -> Result<Self> {
        let manifest = AnnotationManifest::load(&manifest.map_or_else(|| root.join("manifest.txt"), Path::to_path_buf))?;
        let samples = (0..manifest.len())
            .into_par_iter()
            .map(|i| {
                let id = &manifest.ids[i];
                let image = read_rgb(&image_path(root, id))?;
                let dims = (image.width(), image.height());
                let seg = if manifest.has_seg[i] {
                    let p = mask_path(root, id);
                    let m = read_mask(&p)?;
                    if (m.width(), m.height()) != dims {
                        return Err(Error::format(p, "mask size differs from image size"));
                    }
                    Some(m)
                } else {
                    None
                };
                let det = if manifest.has_det[i] {
                    let p = boxes_path(root, id);
                    let text = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
                    Some(parse_boxes(&text, &p)?)
                } else {
                    None
                };
                Ok(MultiTaskSample {
                    id: id.clone(),
                    image,
                    seg,
                    det,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
            samples,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }
}

/// Shape-count distribution for 1..=5 shapes per image.
const SHAPE_COUNT_WEIGHTS: [f64; 5] = [0.1, 0.15, 0.25, 0.25, 0.25];

#[derive(Clone, Copy, Debug, PartialEq)]
enum Shape {
    Circle { cx: f64, cy: f64, r: f64 },
    Square { x0: f64, y0: f64, side: f64 },
    Triangle { pts: [(f64, f64); 3] },
}

impl Shape {
    fn class(&self) -> u8 {
        match self {
            Shape::Circle { .. } => 1,
            Shape::Square { .. } => 2,
            Shape::Triangle { .. } => 3,
        }
    }

    /// Whether pixel `(x, y)` (center at `(x + 0.5, y + 0.5)` in edge coordinates) is covered.
    fn covers(&self, x: usize, y: usize) -> bool {
        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
        match *self {
            Shape::Circle { cx, cy, r } => (px - cx).powi(2) + (py - cy).powi(2) <= r * r,
            Shape::Square { x0, y0, side } => px >= x0 && px <= x0 + side && py >= y0 && py <= y0 + side,
            Shape::Triangle { pts } => {
                let edge = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (py - ay) - (by - ay) * (px - ax);
                let (d0, d1, d2) = (edge(pts[0], pts[1]), edge(pts[1], pts[2]), edge(pts[2], pts[0]));
                (d0 >= 0.0 && d1 >= 0.0 && d2 >= 0.0) || (d0 <= 0.0 && d1 <= 0.0 && d2 <= 0.0)
            }
        }
    }
}

/// Renders one synthetic image with its mask and tight boxes.
pub fn render_shapes_sample(side: usize, rng: &mut impl Rng) -> (Image, SegMap, BoxSet) {
    let n = side * side;
    let mut img = Image::filled(side, side, 3, 0.0);
    // background: a soft color gradient with pixel noise
    let base: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.25..0.75));
    let grad: [(f32, f32); 3] = std::array::from_fn(|_| (rng.random_range(-0.15..0.15), rng.random_range(-0.15..0.15)));
    for c in 0..3 {
        for y in 0..side {
            for x in 0..side {
                let (u, v) = (x as f32 / side as f32 - 0.5, y as f32 / side as f32 - 0.5);
                let noise: f32 = rng.random_range(-0.06..0.06);
                img.set(c, y, x, (base[c] + grad[c].0 * u + grad[c].1 * v + noise).clamp(0.0, 1.0));
            }
        }
    }

    let u: f64 = rng.random();
    let mut acc = 0.0;
    let count = SHAPE_COUNT_WEIGHTS
        .iter()
        .position(|w| {
            acc += w;
            u < acc
        })
        .unwrap_or(4)
        + 1;

    let mut mask = SegMap::filled(side, side, 0);
    let mut occupied = vec![false; n];
    let mut boxes = Vec::new();
    let s = side as f64;
    let (min_size, max_size) = (s * 0.14, s * 0.32);
    let mut placed = 0;
    for _attempt in 0..200 {
        if placed == count {
            break;
        }
        let size = rng.random_range(min_size..max_size);
        let x0 = rng.random_range(1.0..s - size - 1.0);
        let y0 = rng.random_range(1.0..s - size - 1.0);
        let shape = match rng.random_range(0..3) {
            0 => Shape::Circle {
                cx: x0 + size / 2.0,
                cy: y0 + size / 2.0,
                r: size / 2.0,
            },
            1 => Shape::Square { x0, y0, side: size },
            _ => {
                let apex = rng.random_range(x0..x0 + size);
                let pts = if rng.random_bool(0.5) {
                    [(apex, y0), (x0 + size, y0 + size), (x0, y0 + size)]
                } else {
                    [(apex, y0 + size), (x0, y0), (x0 + size, y0)]
                };
                Shape::Triangle { pts }
            }
        };
        let lo_x = x0.floor() as usize;
        let lo_y = y0.floor() as usize;
        let hi_x = ((x0 + size).ceil() as usize).min(side);
        let hi_y = ((y0 + size).ceil() as usize).min(side);
        let pixels: Vec<(usize, usize)> = (lo_y..hi_y)
            .flat_map(|y| (lo_x..hi_x).map(move |x| (x, y)))
            .filter(|&(x, y)| shape.covers(x, y))
            .collect();
        if pixels.len() < 12 {
            continue;
        }
        // keep a one-pixel gap between shapes
        let clash = pixels.iter().any(|&(x, y)| {
            let (xl, xh) = (x.saturating_sub(1), (x + 1).min(side - 1));
            let (yl, yh) = (y.saturating_sub(1), (y + 1).min(side - 1));
            (yl..=yh).any(|yy| (xl..=xh).any(|xx| occupied[yy * side + xx]))
        });
        if clash {
            continue;
        }
        let color: [f32; 3] = loop {
            let c: [f32; 3] = std::array::from_fn(|_| rng.random_range(0.0..1.0));
            let dist: f32 = c.iter().zip(&base).map(|(a, b)| (a - b).abs()).sum();
            if dist > 0.45 {
                break c;
            }
        };
        let (mut bx1, mut by1, mut bx2, mut by2) = (usize::MAX, usize::MAX, 0, 0);
        for &(x, y) in &pixels {
            occupied[y * side + x] = true;
            mask.set(x, y, shape.class());
            for (c, &v) in color.iter().enumerate() {
                let shade: f32 = rng.random_range(-0.03..0.03);
                img.set(c, y, x, (v + shade).clamp(0.0, 1.0));
            }
            bx1 = bx1.min(x);
            by1 = by1.min(y);
            bx2 = bx2.max(x + 1);
            by2 = by2.max(y + 1);
        }
        boxes.push(BBox {
            x1: bx1 as f64,
            y1: by1 as f64,
            x2: bx2 as f64,
            y2: by2 as f64,
            class_id: (shape.class() - 1) as u32,
            score: 1.0,
        });
        placed += 1;
    }
    (img, mask, BoxSet::new(boxes).expect("boxes from non-empty pixel sets"))
}

/// Writes `n` synthetic samples and a fully-labeled manifest under `out`.
pub fn gen_shapes_dataset(n: usize, side: usize, seed: u64, out: &Path) -> Result<AnnotationManifest> {
    if side < 32 {
        return Err(Error::InvalidArgument(format!("image side {side} must be at least 32")));
    }
    for d in ["images", "masks", "boxes"] {
        let p = out.join(d);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let ids: Vec<String> = (0..n).map(sample_id).collect();
    ids.par_iter().enumerate().try_for_each(|(i, id)| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        let (img, mask, boxes) = render_shapes_sample(side, &mut rng);
        write_rgb(&image_path(out, id), &img)?;
        write_mask(&mask_path(out, id), &mask)?;
        let p = boxes_path(out, id);
        fs::write(&p, boxes_to_text(&boxes)).map_err(|e| Error::io(&p, e))
    })?;
    let manifest = AnnotationManifest::fully_labeled(ids);
    manifest.save(&out.join("manifest.txt"))?;
    Ok(manifest)
}

/// Tight boxes recomputed from a mask, one per 8-connected shape, assuming
/// shapes never touch.
pub fn boxes_from_mask(mask: &SegMap) -> Vec<BBox> {
    let (w, h) = (mask.width(), mask.height());
    let mut seen = vec![false; w * h];
    let mut out = Vec::new();
    for start in 0..w * h {
        let class = mask.classes()[start];
        if class == 0 || class == IGNORE_ID || seen[start] {
            continue;
        }
        let mut stack = vec![start];
        seen[start] = true;
        let (mut x1, mut y1, mut x2, mut y2) = (w, h, 0, 0);
        while let Some(p) = stack.pop() {
            let (x, y) = (p % w, p / w);
            x1 = x1.min(x);
            y1 = y1.min(y);
            x2 = x2.max(x + 1);
            y2 = y2.max(y + 1);
            for (dx, dy) in [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)] {
                let (qx, qy) = (x as isize + dx, y as isize + dy);
                if qx < 0 || qy < 0 || qx >= w as isize || qy >= h as isize {
                    continue;
                }
                let q = qy as usize * w + qx as usize;
                if !seen[q] && mask.classes()[q] == class {
                    seen[q] = true;
                    stack.push(q);
                }
            }
        }
        out.push(BBox {
            x1: x1 as f64,
            y1: y1 as f64,
            x2: x2 as f64,
            y2: y2 as f64,
            class_id: class as u32 - 1,
            score: 1.0,
        });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(sample_id).collect()
    }

    #[test]
    fn scenario_a_labels_everything_for_detection() {
        let m = generate_scenario(ids(2975), ScenarioKind::A, 93, 2975, 1).unwrap();
        assert_eq!(m.count(Task::Detection), 2975);
        assert_eq!(m.count(Task::Segmentation), 93);
    }

    #[test]
    fn scenario_b_subsets_coincide() {
        let m = generate_scenario(ids(2975), ScenarioKind::B, 93, 93, 2).unwrap();
        assert_eq!(m.has_seg, m.has_det);
        assert_eq!(m.overlap(), 93);
    }

    #[test]
    fn scenario_d_nests_and_c_is_independent() {
        let d = generate_scenario(ids(500), ScenarioKind::D, 20, 100, 3).unwrap();
        assert!((0..500).all(|i| !d.has_seg[i] || d.has_det[i]));
        let c = generate_scenario(ids(2975), ScenarioKind::C, 93, 93, 4).unwrap();
        assert_eq!((c.count(Task::Segmentation), c.count(Task::Detection)), (93, 93));
        assert!(c.overlap() < 20);
    }

    #[test]
    fn scenario_constraints() {
        for (kind, seg, det) in [
            (ScenarioKind::A, 10, 50),
            (ScenarioKind::B, 10, 20),
            (ScenarioKind::C, 10, 20),
            (ScenarioKind::D, 30, 20),
            (ScenarioKind::E, 101, 101),
        ] {
            assert!(matches!(generate_scenario(ids(100), kind, seg, det, 0), Err(Error::InvalidScenario(_))), "{kind}");
        }
    }

    #[test]
    fn manifest_text_round_trip() {
        let m = generate_scenario(ids(40), ScenarioKind::E, 5, 12, 9).unwrap();
        let back = AnnotationManifest::parse(&m.to_text(), Path::new("m")).unwrap();
        assert_eq!(back, m);
        assert!(AnnotationManifest::parse("000000 1 2\n", Path::new("m")).is_err());
    }

    #[test]
    fn implicit_visits_every_sample_once_per_epoch() {
        let mut s = BatchSampler::implicit(64, 16, 5).unwrap();
        for _ in 0..3 {
            let mut seen: Vec<usize> = (0..4).flat_map(|_| s.next_batch()).collect();
            seen.sort_unstable();
            assert_eq!(seen, (0..64).collect::<Vec<_>>());
        }
    }

    #[test]
    fn explicit_batches_split_exactly() {
        let m = generate_scenario(ids(200), ScenarioKind::B, 3, 3, 1).unwrap();
        let mut s = BatchSampler::explicit(&m, LabeledRule::AnyTask, 16, 8, 0).unwrap();
        let mut counts = [0usize; 200];
        let batches = 30;
        for _ in 0..batches {
            let b = s.next_batch();
            assert_eq!(b.len(), 16);
            assert!(b[..8].iter().all(|&i| m.is_labeled(i, LabeledRule::AnyTask)));
            assert!(b[8..].iter().all(|&i| !m.is_labeled(i, LabeledRule::AnyTask)));
            b[..8].iter().for_each(|&i| counts[i] += 1);
        }
        let expect = (8 * batches) as f64 / 3.0;
        for i in (0..200).filter(|&i| m.has_seg[i]) {
            assert!((counts[i] as f64 - expect).abs() <= 1.0, "{} vs {expect}", counts[i]);
        }
    }

    #[test]
    fn explicit_fully_labeled_uses_all_samples() {
        let m = AnnotationManifest::fully_labeled(ids(20));
        let mut s = BatchSampler::explicit(&m, LabeledRule::AnyTask, 16, 8, 0).unwrap();
        assert_eq!(s.next_batch().len(), 16);
        let none = AnnotationManifest {
            has_seg: vec![false; 20],
            has_det: vec![false; 20],
            ..m
        };
        assert!(matches!(
            BatchSampler::explicit(&none, LabeledRule::AnyTask, 16, 8, 0),
            Err(Error::EmptyPartition(_))
        ));
    }

    #[test]
    fn sampler_seek_reproduces_stream() {
        let m = generate_scenario(ids(100), ScenarioKind::E, 5, 30, 1).unwrap();
        let mut a = BatchSampler::explicit(&m, LabeledRule::AnyTask, 16, 8, 3).unwrap();
        let first: Vec<Vec<usize>> = (0..20).map(|_| a.next_batch()).collect();
        let mut b = BatchSampler::explicit(&m, LabeledRule::AnyTask, 16, 8, 3).unwrap();
        b.seek(12);
        assert_eq!(b.next_batch(), first[12]);
    }

    #[test]
    fn membership_partitions() {
        let mut m = AnnotationManifest::fully_labeled(ids(16));
        (5..16).for_each(|i| m.has_seg[i] = false);
        let batch: Vec<usize> = (0..16).collect();
        let (l, u) = loss_membership(&m, &batch, Task::Segmentation, LossScope::UnlabeledOnly);
        assert_eq!((l.len(), u.len()), (5, 11));
        let (_, u) = loss_membership(&m, &batch, Task::Segmentation, LossScope::AllSamples);
        assert_eq!(u.len(), 16);
        let (l, u) = loss_membership(&m, &batch, Task::Detection, LossScope::UnlabeledOnly);
        assert_eq!((l.len(), u.len()), (16, 0));
    }

    #[test]
    fn rendered_boxes_match_masks() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let (img, mask, boxes) = render_shapes_sample(64, &mut rng);
            assert!(img.data().iter().all(|v| (0.0..=1.0).contains(v)));
            mask.validate(4).unwrap();
            let mut from_mask = boxes_from_mask(&mask);
            let mut stored = boxes.into_boxes();
            let key = |b: &BBox| (b.x1 as i64, b.y1 as i64, b.class_id);
            from_mask.sort_by_key(key);
            stored.sort_by_key(key);
            assert_eq!(from_mask, stored);
            assert!((1..=5).contains(&stored.len()));
        }
    }

    #[test]
    fn generator_is_deterministic_and_loadable() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        gen_shapes_dataset(3, 32, 7, a.path()).unwrap();
        gen_shapes_dataset(3, 32, 7, b.path()).unwrap();
        for id in ids(3) {
            for p in [image_path, mask_path, boxes_path] {
                assert_eq!(fs::read(p(a.path(), &id)).unwrap(), fs::read(p(b.path(), &id)).unwrap());
            }
        }
        let ds = Dataset::load(a.path(), None).unwrap();
        assert_eq!(ds.len(), 3);
        let s = &ds.samples[0];
        assert_eq!((s.image.width(), s.image.height()), (32, 32));
        assert_eq!(boxes_from_mask(s.seg.as_ref().unwrap()).len(), s.det.as_ref().unwrap().len());
        assert!(gen_shapes_dataset(1, 16, 0, a.path()).is_err());
    }

    #[test]
    fn manifest_controls_loaded_labels() {
        let dir = tempfile::tempdir().unwrap();
        let full = gen_shapes_dataset(4, 32, 1, dir.path()).unwrap();
        let m = generate_scenario(full.ids, ScenarioKind::D, 1, 2, 0).unwrap();
        let mp = dir.path().join("scenario.txt");
        m.save(&mp).unwrap();
        let ds = Dataset::load(dir.path(), Some(&mp)).unwrap();
        assert_eq!(ds.samples.iter().filter(|s| s.seg.is_some()).count(), 1);
        assert_eq!(ds.samples.iter().filter(|s| s.det.is_some()).count(), 2);
    }
}
