//! Training orchestration: configuration, the semi-supervised train step,
//! evaluation, checkpointed runs and metric reports.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{apply_record, normalize, relabel_transform, sample_strong, sample_weak, AugConfig, AugMode};
use crate::data::{loss_membership, BatchSampler, Dataset, LabeledRule, LossScope, SamplingMode, SEG_CLASS_NAMES, SHAPE_NAMES};
use crate::error::{Error, Result};
use crate::geometry::{warp_boxes, warp_segmap_to, AffineTransform2D, BoxSet, Image, ValidityMask, DEFAULT_MIN_BOX_AREA};
use crate::losses::{
    supervised_loss, total_loss, unsupervised_loss, DetLossConfig, FocalParams, LossReport, PseudoTargets, RampSchedule,
    SampleGrads, SampleLabels, SampleOutputs, Task, TaskTerms, TaskWeights,
};
use crate::metrics::{average_precision, coco_thresholds, geometric_mean, geometric_mean_select, miou, ApReport, ConfusionMatrix, MiouReport};
use crate::model::heads::decode_detections;
use crate::model::net::{forward, infer, merge_grads, split_outputs};
use crate::model::{Checkpoint, EmaTeacher, Graph, NetSpec, ParamStore, Sgd, SgdConfig, Tensor};
use crate::pseudolabel::{det_sigma, map_pseudo, seg_sigma};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Method {
    Supervised,
    FixmatchStar,
    DenseFixmatch,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Supervised => "supervised",
            Method::FixmatchStar => "fixmatch_star",
            Method::DenseFixmatch => "dense_fixmatch",
        }
    }

    pub fn aug_mode(self) -> AugMode {
        match self {
            Method::FixmatchStar => AugMode::InvariantOnly,
            _ => AugMode::Equivariant,
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "supervised" => Ok(Self::Supervised),
            "fixmatch_star" | "fixmatch*" => Ok(Self::FixmatchStar),
            "dense_fixmatch" => Ok(Self::DenseFixmatch),
            _ => Err(Error::Config(format!("unknown method {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum ApProtocol {
    /// Mean over IoU thresholds 0.50:0.05:0.95.
    #[default]
    Coco,
    /// IoU 0.5 only.
    Single,
}

impl ApProtocol {
    pub fn thresholds(self) -> Vec<f64> {
        match self {
            ApProtocol::Coco => coco_thresholds(),
            ApProtocol::Single => vec![0.5],
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_root: PathBuf,
    pub manifest: Option<PathBuf>,
    pub eval_root: Option<PathBuf>,
    pub eval_manifest: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub method: Method,
    pub sampling: SamplingMode,
    pub labeled_rule: LabeledRule,
    pub l_u_scope: LossScope,
    pub batch_size: usize,
    pub labeled_quota: usize,
    pub total_steps: u64,
    pub eval_every: u64,
    pub checkpoint_every: u64,
    pub log_every: u64,
    pub warmup_frac: f64,
    pub seed: u64,
    pub sgd: SgdConfig,
    pub ema_decay: f64,
    pub weights: TaskWeights,
    pub det_threshold: f64,
    pub nms_iou: f64,
    pub max_dets: usize,
    pub focal: FocalParams,
    pub pos_iou: f64,
    pub neg_iou: f64,
    pub aug: AugConfig,
    pub net: NetSpec,
    pub ap_protocol: ApProtocol,
    pub eval_student: bool,
    pub resume: bool,
    /// Keys set explicitly by the user (file or overrides).
    pub explicit: BTreeSet<String>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data_root: PathBuf::from("data"),
            manifest: None,
            eval_root: None,
            eval_manifest: None,
            out_dir: None,
            method: Method::DenseFixmatch,
            sampling: SamplingMode::Explicit,
            labeled_rule: LabeledRule::AnyTask,
            l_u_scope: LossScope::UnlabeledOnly,
            batch_size: 16,
            labeled_quota: 8,
            total_steps: 20_000,
            eval_every: 500,
            checkpoint_every: 500,
            log_every: 50,
            warmup_frac: 0.05,
            seed: 0,
            sgd: SgdConfig::default(),
            ema_decay: 0.99,
            weights: TaskWeights::default(),
            det_threshold: 0.5,
            nms_iou: 0.5,
            max_dets: 100,
            focal: FocalParams::default(),
            pos_iou: 0.5,
            neg_iou: 0.4,
            aug: AugConfig::default(),
            net: NetSpec::default(),
            ap_protocol: ApProtocol::Coco,
            eval_student: false,
            resume: false,
            explicit: BTreeSet::new(),
        }
    }
}

fn parse_num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| Error::Config(format!("{key}: cannot parse {v:?}")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("{key}: expected a boolean, got {v:?}"))),
    }
}

fn opt_path(v: &str) -> Option<PathBuf> {
    (!v.is_empty() && v != "none").then(|| PathBuf::from(v))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or_else(|| "none".into(), |p| p.display().to_string())
}

impl RunConfig {
    /// Sets one `key = value` entry.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let key = key.trim().replace('-', "_");
        let v = value.trim();
        let k = key.as_str();
        match k {
            "data_root" => self.data_root = PathBuf::from(v),
            "manifest" => self.manifest = opt_path(v),
            "eval_root" => self.eval_root = opt_path(v),
            "eval_manifest" => self.eval_manifest = opt_path(v),
            "out_dir" => self.out_dir = opt_path(v),
            "method" => self.method = v.parse()?,
            "sampling" => self.sampling = v.parse()?,
            "labeled_rule" => self.labeled_rule = v.parse()?,
            "l_u_scope" => self.l_u_scope = v.parse()?,
            "batch_size" => self.batch_size = parse_num(k, v)?,
            "labeled_quota" => self.labeled_quota = parse_num(k, v)?,
            "total_steps" => self.total_steps = parse_num(k, v)?,
            "eval_every" => self.eval_every = parse_num(k, v)?,
            "checkpoint_every" => self.checkpoint_every = parse_num(k, v)?,
            "log_every" => self.log_every = parse_num(k, v)?,
            "warmup_frac" => self.warmup_frac = parse_num(k, v)?,
            "seed" => self.seed = parse_num(k, v)?,
            "lr" | "lr0" => self.sgd.lr0 = parse_num(k, v)?,
            "momentum" => self.sgd.momentum = parse_num(k, v)?,
            "nesterov" => self.sgd.nesterov = parse_bool(k, v)?,
            "weight_decay" => self.sgd.weight_decay = parse_num(k, v)?,
            "poly_gamma" => self.sgd.poly_gamma = parse_num(k, v)?,
            "ema_decay" => self.ema_decay = parse_num(k, v)?,
            "gamma_seg" => self.weights.gamma[0] = parse_num(k, v)?,
            "gamma_det" => self.weights.gamma[1] = parse_num(k, v)?,
            "lambda_max_seg" => self.weights.lambda_max[0] = parse_num(k, v)?,
            "lambda_max_det" => self.weights.lambda_max[1] = parse_num(k, v)?,
            "lambda_max" => {
                let x: f64 = parse_num(k, v)?;
                self.weights.lambda_max = [x, x];
            }
            "det_threshold" => self.det_threshold = parse_num(k, v)?,
            "nms_iou" => self.nms_iou = parse_num(k, v)?,
            "max_dets" => self.max_dets = parse_num(k, v)?,
            "focal_gamma" => self.focal.gamma = parse_num(k, v)?,
            "focal_alpha" => self.focal.alpha = if v == "none" { None } else { Some(parse_num(k, v)?) },
            "pos_iou" => self.pos_iou = parse_num(k, v)?,
            "neg_iou" => self.neg_iou = parse_num(k, v)?,
            "resize_min" => self.aug.resize_scale_range.0 = parse_num(k, v)?,
            "resize_max" => self.aug.resize_scale_range.1 = parse_num(k, v)?,
            "hflip_prob" => self.aug.hflip_prob = parse_num(k, v)?,
            "randaug_n" => self.aug.randaug_n = parse_num(k, v)?,
            "cutout_min" => self.aug.cutout_area_frac.0 = parse_num(k, v)?,
            "cutout_max" => self.aug.cutout_area_frac.1 = parse_num(k, v)?,
            "input_size" => self.net.input_size = parse_num(k, v)?,
            "widths" => {
                let w: Vec<usize> = v.split(',').map(|s| parse_num(k, s.trim())).collect::<Result<_>>()?;
                self.net.widths = w.try_into().map_err(|_| Error::Config("widths: expected four values".into()))?;
            }
            "anchor_scale" => self.net.anchor_scale = parse_num(k, v)?,
            "det_prior" => self.net.det_prior = parse_num(k, v)?,
            "ap_protocol" => {
                self.ap_protocol = match v {
                    "coco" => ApProtocol::Coco,
                    "single" | "0.5" => ApProtocol::Single,
                    _ => return Err(Error::Config(format!("unknown ap protocol {v:?}"))),
                }
            }
            "eval_weights" => {
                self.eval_student = match v {
                    "teacher" => false,
                    "student" => true,
                    _ => return Err(Error::Config(format!("eval_weights must be teacher or student, got {v:?}"))),
                }
            }
            "resume" => self.resume = parse_bool(k, v)?,
            _ => return Err(Error::Config(format!("unknown key {key:?}"))),
        }
        self.explicit.insert(key);
        Ok(())
    }

    /// Parses a `key = value` file body; `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", i + 1)))?;
            cfg.set(k, v)?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[(String, String)]) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::parse(&text)?;
        for (k, v) in overrides {
            cfg.set(k, v)?;
        }
        cfg.finish()
    }

    /// Derives dependent settings and checks the method contracts.
    pub fn finish(mut self) -> Result<Self> {
        self.aug.mode = self.method.aug_mode();
        self.aug.crop_size = (self.net.input_size, self.net.input_size);
        if self.method == Method::Supervised {
            let unsup = ["l_u_scope", "lambda_max", "lambda_max_seg", "lambda_max_det"];
            if let Some(k) = unsup.iter().find(|k| self.explicit.contains(**k)) {
                return Err(Error::Config(format!("method supervised does not take {k}")));
            }
        }
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        self.aug.validate()?;
        let expected_mode = self.method.aug_mode();
        if self.aug.mode != expected_mode {
            return Err(Error::Config(format!("method {} requires augmentation mode {expected_mode:?}", self.method.name())));
        }
        if self.batch_size == 0 || (self.sampling == SamplingMode::Explicit && self.labeled_quota >= self.batch_size) {
            return Err(Error::Config("batch size must exceed the labeled quota".into()));
        }
        if self.eval_every == 0 || self.checkpoint_every == 0 || self.log_every == 0 {
            return Err(Error::Config("eval/checkpoint/log intervals must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.warmup_frac) {
            return Err(Error::Config(format!("warmup fraction {}", self.warmup_frac)));
        }
        if self.weights.gamma.iter().chain(&self.weights.lambda_max).any(|&w| !(w >= 0.0)) {
            return Err(Error::Config("task weights must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) || !(self.sgd.lr0 > 0.0) {
            return Err(Error::Config("ema decay must be in [0, 1] and lr positive".into()));
        }
        Ok(())
    }

    pub fn warmup_steps(&self) -> u64 {
        ((self.warmup_frac * self.total_steps as f64).round() as u64).max(1)
    }

    /// Every key with its current value, in the file format.
    pub fn to_text(&self) -> String {
        let w = &self.weights;
        let ws = self.net.widths.map(|x| x.to_string()).join(",");
        let entries: Vec<(&str, String)> = vec![
            ("data_root", self.data_root.display().to_string()),
            ("manifest", show_path(&self.manifest)),
            ("eval_root", show_path(&self.eval_root)),
            ("eval_manifest", show_path(&self.eval_manifest)),
            ("out_dir", show_path(&self.out_dir)),
            ("method", self.method.name().into()),
            ("sampling", match self.sampling { SamplingMode::Implicit => "implicit", SamplingMode::Explicit => "explicit" }.into()),
            ("labeled_rule", match self.labeled_rule { LabeledRule::AnyTask => "any", LabeledRule::AllTasks => "all" }.into()),
            ("l_u_scope", match self.l_u_scope { LossScope::UnlabeledOnly => "unlabeled_only", LossScope::AllSamples => "all_samples" }.into()),
            ("batch_size", self.batch_size.to_string()),
            ("labeled_quota", self.labeled_quota.to_string()),
            ("total_steps", self.total_steps.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("checkpoint_every", self.checkpoint_every.to_string()),
            ("log_every", self.log_every.to_string()),
            ("warmup_frac", self.warmup_frac.to_string()),
            ("seed", self.seed.to_string()),
            ("lr0", self.sgd.lr0.to_string()),
            ("momentum", self.sgd.momentum.to_string()),
            ("nesterov", self.sgd.nesterov.to_string()),
            ("weight_decay", self.sgd.weight_decay.to_string()),
            ("poly_gamma", self.sgd.poly_gamma.to_string()),
            ("ema_decay", self.ema_decay.to_string()),
            ("gamma_seg", w.gamma[0].to_string()),
            ("gamma_det", w.gamma[1].to_string()),
            ("lambda_max_seg", w.lambda_max[0].to_string()),
            ("lambda_max_det", w.lambda_max[1].to_string()),
            ("det_threshold", self.det_threshold.to_string()),
            ("nms_iou", self.nms_iou.to_string()),
            ("max_dets", self.max_dets.to_string()),
            ("focal_gamma", self.focal.gamma.to_string()),
            ("focal_alpha", self.focal.alpha.map_or_else(|| "none".into(), |a| a.to_string())),
            ("pos_iou", self.pos_iou.to_string()),
            ("neg_iou", self.neg_iou.to_string()),
            ("resize_min", self.aug.resize_scale_range.0.to_string()),
            ("resize_max", self.aug.resize_scale_range.1.to_string()),
            ("hflip_prob", self.aug.hflip_prob.to_string()),
            ("randaug_n", self.aug.randaug_n.to_string()),
            ("cutout_min", self.aug.cutout_area_frac.0.to_string()),
            ("cutout_max", self.aug.cutout_area_frac.1.to_string()),
            ("input_size", self.net.input_size.to_string()),
            ("widths", ws),
            ("anchor_scale", self.net.anchor_scale.to_string()),
            ("det_prior", self.net.det_prior.to_string()),
            ("ap_protocol", match self.ap_protocol { ApProtocol::Coco => "coco", ApProtocol::Single => "single" }.into()),
            ("eval_weights", if self.eval_student { "student" } else { "teacher" }.into()),
            ("resume", self.resume.to_string()),
        ];
        entries.into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn det_loss_config(&self) -> DetLossConfig {
        DetLossConfig {
            anchors: self.net.anchors(),
            focal: self.focal,
            pos_iou: self.pos_iou,
            neg_iou: self.neg_iou,
        }
    }

    pub fn sampler(&self, train: &Dataset) -> Result<BatchSampler> {
        match self.sampling {
            SamplingMode::Implicit => BatchSampler::implicit(train.len(), self.batch_size, self.seed),
            SamplingMode::Explicit => BatchSampler::explicit(&train.manifest, self.labeled_rule, self.batch_size, self.labeled_quota, self.seed),
        }
    }
}

/// One evaluation of the run's selected weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub step: u64,
    pub miou: f64,
    pub miou_std: f64,
    pub map: f64,
    pub gmean: f64,
    pub seg_iou: Vec<Option<f64>>,
    pub det_ap: Vec<Option<f64>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub seg: MiouReport,
    pub det: ApReport,
}

impl EvalResult {
    pub fn gmean(&self) -> f64 {
        geometric_mean(self.seg.mean, self.det.map)
    }

    pub fn record(&self, step: u64) -> EvalRecord {
        EvalRecord {
            step,
            miou: self.seg.mean,
            miou_std: self.seg.std,
            map: self.det.map,
            gmean: self.gmean(),
            seg_iou: self.seg.per_class.clone(),
            det_ap: self.det.per_class.clone(),
        }
    }
}

fn to_tensor(images: &[Image]) -> Result<Tensor<f32>> {
    let Some(first) = images.first() else {
        return Err(Error::InvalidArgument("empty image batch".into()));
    };
    let (w, h, c) = (first.width(), first.height(), first.channels());
    let mut data = Vec::with_capacity(images.len() * c * h * w);
    for img in images {
        if (img.width(), img.height(), img.channels()) != (w, h, c) {
            return Err(Error::shape(format!("{c}x{h}x{w}"), format!("{}x{}x{}", img.channels(), img.height(), img.width())));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::from_vec(&[images.len(), c, h, w], data)
}

const EVAL_CHUNK: usize = 32;

/// Plain forward passes over `data` with the given weights, no augmentation.
pub fn evaluate(spec: &NetSpec, params: &ParamStore<f32>, data: &Dataset, nms_iou: f64, max_dets: usize, ap: ApProtocol) -> Result<EvalResult> {
    let anchors = spec.anchors();
    let frame = (spec.input_size, spec.input_size);
    let mut cm = ConfusionMatrix::new(spec.seg_classes);
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for chunk in data.samples.chunks(EVAL_CHUNK) {
        let inputs: Vec<Image> = chunk
            .iter()
            .map(|s| normalize(&s.image, &ValidityMask::all_valid(s.image.width(), s.image.height())))
            .collect();
        let outs = infer(spec, params, to_tensor(&inputs)?)?;
        for (s, (seg, det)) in chunk.iter().zip(outs) {
            if let Some(gt) = &s.seg {
                cm.add(gt, &seg_sigma(&seg)?.classes)?;
            }
            if let Some(gt) = &s.det {
                dets.push(decode_detections(&det, &anchors, frame, nms_iou, max_dets)?);
                gts.push(gt.clone());
            }
        }
    }
    Ok(EvalResult {
        seg: miou(&cm)?,
        det: average_precision(&dets, &gts, spec.det_classes, &ap.thresholds())?,
    })
}

/// Everything that evolves during training.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub step: u64,
    pub student: ParamStore<f32>,
    pub teacher: EmaTeacher<f32>,
    pub optimizer: Sgd<f32>,
    pub history: Vec<EvalRecord>,
}

impl TrainState {
    pub fn init(cfg: &RunConfig) -> Result<Self> {
        let student = ParamStore::init(&cfg.net, cfg.seed)?;
        Ok(Self {
            step: 0,
            teacher: EmaTeacher::new(&student, cfg.ema_decay)?,
            optimizer: Sgd::new(cfg.sgd, &student),
            student,
            history: Vec::new(),
        })
    }

    pub fn to_checkpoint(&self, cfg: &RunConfig) -> Checkpoint {
        Checkpoint {
            step: self.step,
            student: self.student.clone(),
            teacher: self.teacher.clone(),
            optimizer: self.optimizer.clone(),
            meta: serde_json::json!({
                "config": cfg.to_text(),
                "history": self.history,
            }),
        }
    }

    pub fn from_checkpoint(ck: Checkpoint, spec: &NetSpec) -> Result<Self> {
        ck.student.check_spec(spec)?;
        let history = serde_json::from_value(ck.meta.get("history").cloned().unwrap_or_default())
            .map_err(|e| Error::Config(format!("checkpoint history: {e}")))?;
        Ok(Self {
            step: ck.step,
            student: ck.student,
            teacher: ck.teacher,
            optimizer: ck.optimizer,
            history,
        })
    }
}

/// Losses and diagnostics of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    pub loss: LossReport,
    pub lr: f64,
    /// Largest entry-wise deviation of any relabel transform from identity.
    pub relabel_max_dev: f64,
    pub pseudo_boxes: usize,
}

/// Views and targets of one batch slot.
struct SlotData {
    weak: Image,
    weak_mask: ValidityMask,
    seg: Option<crate::geometry::SegMap>,
    det: Option<BoxSet>,
    strong: Option<(Image, ValidityMask, AffineTransform2D)>,
}

/// Independent per-sample augmentation stream so adding or removing strong
/// draws never shifts weak draws.
fn aug_rng(seed: u64, step: u64, slot: usize, strong: bool) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_a11c_e000_0000);
    rng.set_stream((step << 20) | ((slot as u64) << 1) | strong as u64);
    rng
}

pub struct Trainer<'a> {
    pub cfg: &'a RunConfig,
    pub train: &'a Dataset,
    det_cfg: DetLossConfig,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: &'a RunConfig, train: &'a Dataset) -> Result<Self> {
        cfg.validate()?;
        if train.is_empty() {
            return Err(Error::EmptyPartition("training set"));
        }
        Ok(Self {
            cfg,
            train,
            det_cfg: cfg.det_loss_config(),
        })
    }

    /// One step of the objective on `batch` (dataset indices).
    pub fn train_step(&self, state: &mut TrainState, batch: &[usize]) -> Result<StepReport> {
        let step = state.step;
        self.step_inner(state, batch).map_err(|e| Error::Step { step, source: Box::new(e) })
    }

    fn step_inner(&self, state: &mut TrainState, batch: &[usize]) -> Result<StepReport> {
        let cfg = self.cfg;
        let step = state.step;
        let semi = cfg.method != Method::Supervised;
        let frame = cfg.aug.crop_size;
        let manifest = &self.train.manifest;

        let members: Vec<(Vec<usize>, Vec<usize>)> = Task::ALL
            .iter()
            .map(|&t| {
                let (l, u) = loss_membership(manifest, batch, t, cfg.l_u_scope);
                (l, if semi { u } else { Vec::new() })
            })
            .collect();
        let needs_weak: Vec<bool> = (0..batch.len()).map(|p| members.iter().any(|(l, _)| l.contains(&p))).collect();
        let needs_strong: Vec<bool> = (0..batch.len()).map(|p| members.iter().any(|(_, u)| u.contains(&p))).collect();

        let slots: Vec<SlotData> = batch
            .par_iter()
            .enumerate()
            .map(|(p, &i)| -> Result<SlotData> {
                let s = &self.train.samples[i];
                let size = (s.image.width(), s.image.height());
                let weak_rec = sample_weak(&mut aug_rng(cfg.seed, step, p, false), &cfg.aug, size);
                let (weak_img, weak_mask) = apply_record(&s.image, &weak_rec)?;
                let seg = s.seg.as_ref().map(|m| warp_segmap_to(m, &weak_rec.geometric, frame)).transpose()?;
                let det = s.det.as_ref().map(|b| warp_boxes(b, &weak_rec.geometric, frame, DEFAULT_MIN_BOX_AREA));
                let strong = if needs_strong[p] {
                    let rec = sample_strong(&mut aug_rng(cfg.seed, step, p, true), &cfg.aug).on_top_of(&weak_rec);
                    let (img, mask) = apply_record(&s.image, &rec)?;
                    let relabel = relabel_transform(&weak_rec, &rec)?;
                    Some((normalize(&img, &mask), mask, relabel))
                } else {
                    None
                };
                Ok(SlotData {
                    weak: normalize(&weak_img, &weak_mask),
                    weak_mask,
                    seg,
                    det,
                    strong,
                })
            })
            .collect::<Result<_>>()?;

        let mut relabel_max_dev: f64 = 0.0;
        for (_, _, t) in slots.iter().filter_map(|s| s.strong.as_ref()) {
            relabel_max_dev = relabel_max_dev.max(t.max_abs_diff(&AffineTransform2D::IDENTITY));
        }
        if cfg.method == Method::FixmatchStar && relabel_max_dev != 0.0 {
            return Err(Error::InvalidArgument(format!("invariant-only relabel transform deviates from identity by {relabel_max_dev:e}")));
        }

        // student graph: weak views of labeled slots, then strong views
        let weak_slots: Vec<usize> = (0..batch.len()).filter(|&p| needs_weak[p]).collect();
        let strong_slots: Vec<usize> = (0..batch.len()).filter(|&p| needs_strong[p]).collect();
        let mut inputs: Vec<Image> = weak_slots.iter().map(|&p| slots[p].weak.clone()).collect();
        inputs.extend(strong_slots.iter().map(|&p| slots[p].strong.as_ref().expect("strong view").0.clone()));

        // teacher pseudo-labels on the weak views of unlabeled slots
        let mut pseudo: Vec<PseudoTargets> = Vec::with_capacity(strong_slots.len());
        let mut pseudo_boxes = 0;
        if !strong_slots.is_empty() {
            let teacher_in: Vec<Image> = strong_slots.iter().map(|&p| slots[p].weak.clone()).collect();
            let outs = infer(&cfg.net, state.teacher.params(), to_tensor(&teacher_in)?)?;
            let anchors = &self.det_cfg.anchors;
            for (&p, (seg, det)) in strong_slots.iter().zip(outs) {
                let slot = &slots[p];
                let mut seg_pl = seg_sigma(&seg)?;
                seg_pl.mask_invalid(&slot.weak_mask);
                let boxes = decode_detections(&det, anchors, frame, cfg.nms_iou, cfg.max_dets)?;
                let det_pl = det_sigma(&boxes, cfg.det_threshold);
                let (_, strong_mask, relabel) = slot.strong.as_ref().expect("strong view");
                let (seg_m, det_m) = map_pseudo(&seg_pl, &det_pl, relabel, frame)?;
                pseudo_boxes += det_m.boxes.len();
                pseudo.push(PseudoTargets {
                    seg: seg_m,
                    det: det_m,
                    validity: strong_mask.clone(),
                });
            }
        }

        if inputs.is_empty() {
            // nothing in this batch contributes to the objective
            let loss = total_loss([TaskTerms::default(); 2], &cfg.weights, step, &RampSchedule { warmup_steps: cfg.warmup_steps() });
            let zero: Vec<Tensor<f32>> = state.student.tensors().iter().map(|t| Tensor::zeros(t.shape())).collect();
            let lr = self.apply_update(state, &zero)?;
            return Ok(StepReport { loss, lr, relabel_max_dev, pseudo_boxes });
        }

        let mut graph = Graph::new();
        let nodes = forward(&mut graph, &cfg.net, &state.student, to_tensor(&inputs)?)?;
        let outputs: Vec<SampleOutputs> = split_outputs(&graph, &nodes)?
            .into_iter()
            .map(|(seg, det)| SampleOutputs { seg, det })
            .collect();
        let nw = weak_slots.len();
        let (weak_out, strong_out) = outputs.split_at(nw);

        let weak_pos = |p: usize| weak_slots.iter().position(|&q| q == p).expect("weak slot");
        let strong_pos = |p: usize| strong_slots.iter().position(|&q| q == p).expect("strong slot");
        let labels: Vec<SampleLabels> = weak_slots
            .iter()
            .map(|&p| SampleLabels {
                seg: slots[p].seg.clone(),
                det: slots[p].det.clone(),
            })
            .collect();

        let ramp = RampSchedule { warmup_steps: cfg.warmup_steps() };
        let mut parts = [TaskTerms::default(); 2];
        let mut grads: Vec<SampleGrads> = outputs.iter().map(SampleGrads::zeros_like).collect();
        let mut terms = Vec::new();
        for t in Task::ALL {
            let (l, u) = &members[t.index()];
            let l_local: Vec<usize> = l.iter().map(|&p| weak_pos(p)).collect();
            let sup = supervised_loss(t, weak_out, &labels, &l_local, &self.det_cfg)?;
            let unsup = if semi {
                let u_local: Vec<usize> = u.iter().map(|&p| strong_pos(p)).collect();
                Some(unsupervised_loss(t, strong_out, &pseudo, &u_local, &self.det_cfg)?)
            } else {
                None
            };
            parts[t.index()] = TaskTerms {
                supervised: sup.value,
                unsupervised: unsup.as_ref().map_or(0.0, |u| u.value),
                labeled: sup.count,
                unlabeled: unsup.as_ref().map_or(0, |u| u.count),
            };
            terms.push((t, sup, unsup));
        }
        let loss = total_loss(parts, &cfg.weights, step, &ramp);
        if !loss.total.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        for (t, sup, unsup) in &terms {
            let coef_s = loss.supervised_coef(*t);
            for (g, s) in grads[..nw].iter_mut().zip(&sup.grads) {
                g.add_scaled(s, coef_s);
            }
            if let Some(u) = unsup {
                let coef_u = loss.unsupervised_coef(*t);
                for (g, s) in grads[nw..].iter_mut().zip(&u.grads) {
                    g.add_scaled(s, coef_u);
                }
            }
        }
        let views: Vec<(&[f64], &[f64], &[f64])> = grads
            .iter()
            .map(|g| (g.seg.as_slice(), g.det_cls.as_slice(), g.det_box.as_slice()))
            .collect();
        let seeds = merge_grads(&graph, &nodes, &views)?;
        let param_grads = graph.backward(seeds)?;
        let lr = self.apply_update(state, &param_grads)?;
        Ok(StepReport {
            loss,
            lr,
            relabel_max_dev,
            pseudo_boxes,
        })
    }

    /// Optimizer step followed by the teacher update.
    fn apply_update(&self, state: &mut TrainState, grads: &[Tensor<f32>]) -> Result<f64> {
        let before = state.student.version();
        let lr = state.optimizer.step(&mut state.student, grads, state.step, self.cfg.total_steps)?;
        assert_eq!(state.student.version(), before + 1, "optimizer must update the student exactly once");
        let teacher_before = state.teacher.version();
        state.teacher.update(&state.student)?;
        assert_eq!(state.teacher.synced_to(), state.student.version(), "teacher averages the updated student");
        assert_eq!(state.teacher.version(), teacher_before + 1);
        state.step += 1;
        Ok(lr)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunSummary {
    pub history: Vec<EvalRecord>,
    /// Index into `history` of the best geometric mean.
    pub best: usize,
    /// Largest relabel deviation from identity seen over the run.
    pub relabel_max_dev: f64,
    pub final_state: TrainState,
}

impl RunSummary {
    pub fn best_record(&self) -> &EvalRecord {
        &self.history[self.best]
    }
}

/// Per-step callback for progress reporting.
pub type StepHook<'a> = dyn FnMut(u64, &StepReport) + 'a;

pub fn load_datasets(cfg: &RunConfig) -> Result<(Dataset, Dataset)> {
    let train = Dataset::load(&cfg.data_root, cfg.manifest.as_deref())?;
    let eval_root = cfg
        .eval_root
        .as_ref()
        .ok_or_else(|| Error::Config("eval_root is required".into()))?;
    let eval = Dataset::load(eval_root, cfg.eval_manifest.as_deref())?;
    Ok((train, eval))
}

fn write_metrics(path: &Path, history: &[EvalRecord]) -> Result<()> {
    let mut text = String::new();
    for r in history {
        let line = serde_json::to_string(r).map_err(|e| Error::InvalidArgument(e.to_string()))?;
        text.push_str(&line);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_metrics(path: &Path) -> Result<Vec<EvalRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .enumerate()
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| Error::format(path, format!("record {}: {e}", i + 1))))
        .collect()
}

pub const CHECKPOINT_FILE: &str = "last.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LOG_FILE: &str = "train_log.jsonl";

/// Trains `cfg.total_steps` steps, evaluating every `eval_every` steps and at
/// the end, and returns the history with the best geometric-mean entry.
pub fn run(cfg: &RunConfig, train: &Dataset, eval: &Dataset, mut hook: Option<&mut StepHook<'_>>) -> Result<RunSummary> {
    cfg.validate()?;
    let trainer = Trainer::new(cfg, train)?;
    let out = cfg.out_dir.as_deref();
    if let Some(dir) = out {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let p = dir.join("config.txt");
        fs::write(&p, cfg.to_text()).map_err(|e| Error::io(&p, e))?;
    }
    let ckpt_path = out.map(|d| d.join(CHECKPOINT_FILE));
    let mut state = match &ckpt_path {
        Some(p) if cfg.resume && p.exists() => TrainState::from_checkpoint(Checkpoint::load(p)?, &cfg.net)?,
        _ => TrainState::init(cfg)?,
    };
    let mut sampler = cfg.sampler(train)?;
    sampler.seek(state.step);
    let mut log = match out {
        Some(dir) => {
            let p = dir.join(LOG_FILE);
            Some(
                fs::OpenOptions::new()
                    .create(true)
                    .append(true)
                    .open(&p)
                    .map_err(|e| Error::io(&p, e))?,
            )
        }
        None => None,
    };

    let eval_now = |state: &TrainState| -> Result<EvalRecord> {
        let params = if cfg.eval_student { &state.student } else { state.teacher.params() };
        Ok(evaluate(&cfg.net, params, eval, cfg.nms_iou, cfg.max_dets, cfg.ap_protocol)?.record(state.step))
    };
    let save = |state: &TrainState| -> Result<()> {
        if let (Some(dir), Some(p)) = (out, &ckpt_path) {
            write_metrics(&dir.join(METRICS_FILE), &state.history)?;
            state.to_checkpoint(cfg).save(p)?;
        }
        Ok(())
    };

    let mut relabel_max_dev: f64 = 0.0;
    while state.step < cfg.total_steps {
        if state.step % cfg.eval_every == 0 && state.history.last().is_none_or(|r| r.step != state.step) {
            let rec = eval_now(&state)?;
            state.history.push(rec);
            save(&state)?;
        }
        let batch = sampler.next_batch();
        let report = trainer.train_step(&mut state, &batch)?;
        relabel_max_dev = relabel_max_dev.max(report.relabel_max_dev);
        if let Some(f) = log.as_mut() {
            if state.step % cfg.log_every == 0 || state.step == cfg.total_steps {
                let l = &report.loss;
                let rec = serde_json::json!({
                    "step": state.step,
                    "total": l.total,
                    "lr": report.lr,
                    "seg_s": l.tasks[0].terms.supervised,
                    "seg_u": l.tasks[0].terms.unsupervised,
                    "det_s": l.tasks[1].terms.supervised,
                    "det_u": l.tasks[1].terms.unsupervised,
                    "lambda_seg": l.tasks[0].lambda,
                    "lambda_det": l.tasks[1].lambda,
                    "pseudo_boxes": report.pseudo_boxes,
                });
                writeln!(f, "{rec}").map_err(|e| Error::io(cfg.out_dir.clone().unwrap_or_default(), e))?;
            }
        }
        if let Some(h) = hook.as_mut() {
            h(state.step, &report);
        }
        if state.step % cfg.checkpoint_every == 0 && state.step % cfg.eval_every != 0 {
            save(&state)?;
        }
    }
    if state.history.last().is_none_or(|r| r.step != state.step) {
        let rec = eval_now(&state)?;
        state.history.push(rec);
    }
    save(&state)?;

    let triples: Vec<(u64, f64, f64)> = state.history.iter().map(|r| (r.step, r.miou, r.map)).collect();
    let best = geometric_mean_select(&triples).expect("history has at least one evaluation");
    Ok(RunSummary {
        history: state.history.clone(),
        best,
        relabel_max_dev,
        final_state: state,
    })
}

/// CSV with one row per evaluation: step, mIoU, mAP, gmean, then per-class columns.
pub fn report_csv(history: &[EvalRecord]) -> String {
    let mut s = String::from("step,miou,map,gmean");
    for n in SEG_CLASS_NAMES {
        write!(s, ",iou_{n}").unwrap();
    }
    for n in SHAPE_NAMES {
        write!(s, ",ap_{n}").unwrap();
    }
    s.push('\n');
    let cell = |v: &Option<f64>| v.map_or_else(String::new, |x| format!("{x:.6}"));
    for r in history {
        write!(s, "{},{:.6},{:.6},{:.6}", r.step, r.miou, r.map, r.gmean).unwrap();
        for i in 0..SEG_CLASS_NAMES.len() {
            write!(s, ",{}", r.seg_iou.get(i).map_or_else(String::new, cell)).unwrap();
        }
        for i in 0..SHAPE_NAMES.len() {
            write!(s, ",{}", r.det_ap.get(i).map_or_else(String::new, cell)).unwrap();
        }
        s.push('\n');
    }
    s
}

/// Per-class table of the best checkpoint in `history`.
pub fn report_table(history: &[EvalRecord]) -> Option<String> {
    let triples: Vec<(u64, f64, f64)> = history.iter().map(|r| (r.step, r.miou, r.map)).collect();
    let r = &history[geometric_mean_select(&triples)?];
    let seg = MiouReport {
        per_class: r.seg_iou.clone(),
        mean: r.miou,
        std: r.miou_std,
    };
    let det = ApReport {
        per_class: r.det_ap.clone(),
        per_threshold: Vec::new(),
        map: r.map,
    };
    Some(format!(
        "best step {}\n{}",
        r.step,
        crate::metrics::format_report(&seg, &SEG_CLASS_NAMES, &det, &SHAPE_NAMES)
    ))
}
