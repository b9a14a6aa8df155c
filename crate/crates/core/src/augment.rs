//! Weak and strong augmentation pipelines.
//!
//! The weak pipeline is purely geometric (rescale, optional horizontal flip,
//! crop). The strong pipeline is RandAugment with `n` ops per image plus a
//! cutout. In invariant-only mode the strong pool is photometric only and the
//! strong view reuses the weak geometry; in equivariant mode affine ops are
//! drawn as well and the relabel transform `A ∘ α⁻¹` carries teacher outputs
//! from the weak frame into the strong frame.

use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    compose, invert, warp_image_to, AffineTransform2D, Image, Interpolation, TransformParams,
    ValidityMask,
};

/// Channel statistics applied right before the model.
pub const CHANNEL_MEAN: [f32; 3] = [0.485, 0.456, 0.406];
pub const CHANNEL_STD: [f32; 3] = [0.229, 0.224, 0.225];

const RANGE_SLACK: f32 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum PhotometricKind {
    AutoContrast,
    Equalize,
    Invert,
    Solarize,
    Posterize,
    Saturation,
    Contrast,
    Brightness,
    Sharpness,
}

impl PhotometricKind {
    pub const ALL: [PhotometricKind; 9] = [
        Self::AutoContrast,
        Self::Equalize,
        Self::Invert,
        Self::Solarize,
        Self::Posterize,
        Self::Saturation,
        Self::Contrast,
        Self::Brightness,
        Self::Sharpness,
    ];

    /// Allowed magnitude range; `None` for parameter-free ops.
    pub fn range(self) -> Option<(f64, f64)> {
        match self {
            Self::AutoContrast | Self::Equalize | Self::Invert => None,
            Self::Solarize => Some((0.1, 1.0)),
            Self::Posterize => Some((4.0, 8.0)),
            Self::Saturation | Self::Contrast | Self::Brightness | Self::Sharpness => {
                Some((0.1, 1.9))
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PhotometricOp {
    pub kind: PhotometricKind,
    pub magnitude: f64,
}

impl PhotometricOp {
    pub fn new(kind: PhotometricKind, magnitude: f64) -> Result<Self> {
        if let Some((lo, hi)) = kind.range() {
            if !(lo..=hi).contains(&magnitude) {
                return Err(Error::InvalidArgument(format!(
                    "{kind:?} magnitude {magnitude} outside [{lo}, {hi}]"
                )));
            }
            if kind == PhotometricKind::Posterize && magnitude.fract() != 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "posterize bits must be integral, got {magnitude}"
                )));
            }
        }
        Ok(Self { kind, magnitude })
    }

    fn sample<R: Rng + ?Sized>(kind: PhotometricKind, rng: &mut R) -> Self {
        let magnitude = match kind.range() {
            None => 0.0,
            Some((lo, hi)) if kind == PhotometricKind::Posterize => {
                rng.random_range(lo as u32..=hi as u32) as f64
            }
            Some((lo, hi)) => rng.random_range(lo..=hi),
        };
        Self { kind, magnitude }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum GeometricKind {
    ShearX,
    ShearY,
    TranslateX,
    TranslateY,
    Rotate,
    HFlip,
}

impl GeometricKind {
    pub const ALL: [GeometricKind; 6] = [
        Self::ShearX,
        Self::ShearY,
        Self::TranslateX,
        Self::TranslateY,
        Self::Rotate,
        Self::HFlip,
    ];

    /// Degrees for shear/rotate, frame fraction for translate.
    pub fn range(self) -> Option<(f64, f64)> {
        match self {
            Self::ShearX | Self::ShearY => Some((-17.0, 17.0)),
            Self::TranslateX | Self::TranslateY => Some((-0.15, 0.15)),
            Self::Rotate => Some((-30.0, 30.0)),
            Self::HFlip => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GeometricOp {
    pub kind: GeometricKind,
    pub magnitude: f64,
}

impl GeometricOp {
    fn sample<R: Rng + ?Sized>(kind: GeometricKind, rng: &mut R) -> Self {
        let magnitude = kind.range().map_or(0.0, |(lo, hi)| rng.random_range(lo..=hi));
        Self { kind, magnitude }
    }

    pub fn params(&self) -> TransformParams {
        let m = self.magnitude;
        let mut p = TransformParams::default();
        match self.kind {
            GeometricKind::ShearX => p.shear_deg.0 = m,
            GeometricKind::ShearY => p.shear_deg.1 = m,
            GeometricKind::TranslateX => p.translate_frac.0 = m,
            GeometricKind::TranslateY => p.translate_frac.1 = m,
            GeometricKind::Rotate => p.rotate_deg = m,
            GeometricKind::HFlip => p.hflip = true,
        }
        p
    }

    pub fn transform(&self, frame: (usize, usize)) -> Result<AffineTransform2D> {
        AffineTransform2D::from_params(&self.params(), frame)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum AugMode {
    InvariantOnly,
    #[default]
    Equivariant,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AugSource {
    Weak,
    Strong,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Cutout {
    pub x: usize,
    pub y: usize,
    pub w: usize,
    pub h: usize,
}

/// Everything needed to replay one sampled augmentation.
#[derive(Clone, Debug, PartialEq)]
pub struct AugRecord {
    /// Maps source pixels into the output frame.
    pub geometric: AffineTransform2D,
    /// Strong-policy affine ops in the order they were drawn.
    pub geometric_ops: Vec<GeometricOp>,
    pub photometric: Vec<PhotometricOp>,
    pub cutout: Option<Cutout>,
    pub source: AugSource,
    /// Output frame `(W, H)`.
    pub frame: (usize, usize),
}

impl AugRecord {
    pub fn identity(frame: (usize, usize)) -> Self {
        Self {
            geometric: AffineTransform2D::IDENTITY,
            geometric_ops: Vec::new(),
            photometric: Vec::new(),
            cutout: None,
            source: AugSource::Weak,
            frame,
        }
    }

    /// Stacks a freshly sampled strong record on the weak view's geometry,
    /// so that `geometric` maps the source image into the strong frame.
    pub fn on_top_of(mut self, weak: &AugRecord) -> AugRecord {
        self.geometric = compose(&self.geometric, &weak.geometric);
        self
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AugConfig {
    pub resize_scale_range: (f64, f64),
    pub crop_size: (usize, usize),
    pub hflip_prob: f64,
    pub randaug_n: usize,
    pub cutout_area_frac: (f64, f64),
    pub mode: AugMode,
}

impl Default for AugConfig {
    fn default() -> Self {
        Self {
            resize_scale_range: (0.5, 2.0),
            crop_size: (64, 64),
            hflip_prob: 0.5,
            randaug_n: 2,
            cutout_area_frac: (0.10, 0.30),
            mode: AugMode::Equivariant,
        }
    }
}

impl AugConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.resize_scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::Config(format!("bad resize scale range ({lo}, {hi})")));
        }
        if self.crop_size.0 == 0 || self.crop_size.1 == 0 {
            return Err(Error::Config("crop size must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::Config(format!("hflip probability {}", self.hflip_prob)));
        }
        let (clo, chi) = self.cutout_area_frac;
        if !(0.0 <= clo && clo <= chi && chi <= 1.0) {
            return Err(Error::Config(format!("bad cutout area range ({clo}, {chi})")));
        }
        Ok(())
    }

    fn strong_pool_len(&self) -> usize {
        match self.mode {
            AugMode::InvariantOnly => PhotometricKind::ALL.len(),
            AugMode::Equivariant => PhotometricKind::ALL.len() + GeometricKind::ALL.len(),
        }
    }
}

/// Rescale by a uniform factor, optionally mirror, then crop `crop_size`.
///
/// When the rescaled image is smaller than the crop it is placed at a random
/// offset inside the crop and the remainder is padding.
pub fn sample_weak<R: Rng + ?Sized>(rng: &mut R, cfg: &AugConfig, img_size: (usize, usize)) -> AugRecord {
    let (w0, h0) = img_size;
    let (cw, ch) = cfg.crop_size;
    let (lo, hi) = cfg.resize_scale_range;
    let scale = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    let flip = rng.random_bool(cfg.hflip_prob);

    let ew = ((scale * w0 as f64).round() as usize).max(1);
    let eh = ((scale * h0 as f64).round() as usize).max(1);
    let mut offset = |extent: usize, crop: usize| -> i64 {
        let (a, b) = if extent >= crop {
            (0, (extent - crop) as i64)
        } else {
            (extent as i64 - crop as i64, 0)
        };
        rng.random_range(a..=b)
    };
    let ox = offset(ew, cw);
    let oy = offset(eh, ch);

    let (sx, sy) = (ew as f64 / w0 as f64, eh as f64 / h0 as f64);
    // Resampling keeps pixel areas aligned: center x maps to sx (x + 0.5) - 0.5.
    let resize = compose(
        &AffineTransform2D::translation(0.5 * (sx - 1.0), 0.5 * (sy - 1.0)),
        &AffineTransform2D::scaling(sx, sy),
    );
    let mut geometric = if flip {
        compose(&resize, &AffineTransform2D::hflip(w0))
    } else {
        resize
    };
    geometric = compose(&AffineTransform2D::translation(-ox as f64, -oy as f64), &geometric);

    AugRecord {
        geometric,
        geometric_ops: Vec::new(),
        photometric: Vec::new(),
        cutout: None,
        source: AugSource::Weak,
        frame: cfg.crop_size,
    }
}

/// RandAugment draw of `randaug_n` ops (with replacement) plus a cutout.
///
/// The returned geometric part only holds the strong affine ops, pivoted on
/// the crop frame; pair it with the weak record via [`AugRecord::on_top_of`].
pub fn sample_strong<R: Rng + ?Sized>(rng: &mut R, cfg: &AugConfig) -> AugRecord {
    let frame = cfg.crop_size;
    let pool = cfg.strong_pool_len();
    let mut geometric = AffineTransform2D::IDENTITY;
    let mut geometric_ops = Vec::new();
    let mut photometric = Vec::new();
    for _ in 0..cfg.randaug_n {
        let pick = rng.random_range(0..pool);
        if let Some(&kind) = PhotometricKind::ALL.get(pick) {
            photometric.push(PhotometricOp::sample(kind, rng));
        } else {
            let op = GeometricOp::sample(GeometricKind::ALL[pick - PhotometricKind::ALL.len()], rng);
            // Ranges keep every single op far from degenerate.
            let t = op.transform(frame).expect("strong affine op within range");
            geometric = compose(&t, &geometric);
            geometric_ops.push(op);
        }
    }

    let (lo, hi) = cfg.cutout_area_frac;
    let frac = if lo < hi { rng.random_range(lo..=hi) } else { lo };
    let side = (frac * (frame.0 * frame.1) as f64).sqrt().round() as usize;
    let side = side.clamp(1, frame.0.min(frame.1));
    let x = rng.random_range(0..=frame.0 - side);
    let y = rng.random_range(0..=frame.1 - side);

    AugRecord {
        geometric,
        geometric_ops,
        photometric,
        cutout: Some(Cutout { x, y, w: side, h: side }),
        source: AugSource::Strong,
        frame,
    }
}

fn check_unit_range(img: &Image) -> Result<()> {
    match img
        .data()
        .iter()
        .find(|v| !(**v >= -RANGE_SLACK && **v <= 1.0 + RANGE_SLACK))
    {
        Some(&value) => Err(Error::OutOfRangeInput { value }),
        None => Ok(()),
    }
}

fn luminance(img: &Image) -> Vec<f32> {
    if img.channels() < 3 {
        return img.plane(0).to_vec();
    }
    let (r, g, b) = (img.plane(0), img.plane(1), img.plane(2));
    r.iter()
        .zip(g)
        .zip(b)
        .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
        .collect()
}

/// `degenerate + factor * (img - degenerate)`, per plane.
fn blend_planes(img: &mut Image, factor: f32, degenerate: impl Fn(usize, usize) -> f32) {
    for c in 0..img.channels() {
        for (i, v) in img.plane_mut(c).iter_mut().enumerate() {
            let d = degenerate(c, i);
            *v = d + factor * (*v - d);
        }
    }
}

fn smooth(img: &Image) -> Image {
    // 3x3 smoothing kernel [[1,1,1],[1,5,1],[1,1,1]] / 13; border pixels are kept.
    let (w, h) = (img.width(), img.height());
    let mut out = img.clone();
    if w < 3 || h < 3 {
        return out;
    }
    for c in 0..img.channels() {
        for y in 1..h - 1 {
            for x in 1..w - 1 {
                let mut acc = 4.0 * img.get(c, y, x);
                for dy in 0..3 {
                    for dx in 0..3 {
                        acc += img.get(c, y + dy - 1, x + dx - 1);
                    }
                }
                out.set(c, y, x, acc / 13.0);
            }
        }
    }
    out
}

fn equalize_plane(plane: &mut [f32]) {
    let bin = |v: f32| ((v * 255.0).round() as i32).clamp(0, 255) as usize;
    let mut hist = [0usize; 256];
    for &v in plane.iter() {
        hist[bin(v)] += 1;
    }
    let Some(last) = hist.iter().rev().find(|&&c| c > 0).copied() else {
        return;
    };
    if hist.iter().filter(|&&c| c > 0).count() <= 1 {
        return;
    }
    let step = (plane.len() - last) / 255;
    if step == 0 {
        return;
    }
    let mut lut = [0f32; 256];
    let mut n = step / 2;
    for (entry, &count) in lut.iter_mut().zip(&hist) {
        *entry = (n / step).min(255) as f32 / 255.0;
        n += count;
    }
    for v in plane.iter_mut() {
        *v = lut[bin(*v)];
    }
}

/// Applies one photometric op to an image with values in `[0, 1]`.
pub fn apply_photometric(img: &Image, op: &PhotometricOp) -> Result<Image> {
    check_unit_range(img)?;
    let mut out = img.clone();
    let m = op.magnitude as f32;
    match op.kind {
        PhotometricKind::Invert => out.data_mut().iter_mut().for_each(|v| *v = 1.0 - *v),
        PhotometricKind::Solarize => out
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = if *v < m { *v } else { 1.0 - *v }),
        PhotometricKind::Posterize => {
            let levels = ((1u32 << op.magnitude.round() as u32) - 1) as f32;
            out.data_mut()
                .iter_mut()
                .for_each(|v| *v = (*v * levels).floor() / levels);
        }
        PhotometricKind::Brightness => blend_planes(&mut out, m, |_, _| 0.0),
        PhotometricKind::Contrast => {
            let lum = luminance(img);
            let mean = lum.iter().sum::<f32>() / lum.len().max(1) as f32;
            blend_planes(&mut out, m, |_, _| mean);
        }
        PhotometricKind::Saturation => {
            let lum = luminance(img);
            blend_planes(&mut out, m, |_, i| lum[i]);
        }
        PhotometricKind::Sharpness => {
            let blurred = smooth(img);
            let n = img.width() * img.height();
            blend_planes(&mut out, m, |c, i| blurred.data()[c * n + i]);
        }
        PhotometricKind::AutoContrast => {
            for c in 0..out.channels() {
                let plane = out.plane_mut(c);
                let lo = plane.iter().copied().fold(f32::INFINITY, f32::min);
                let hi = plane.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                if hi - lo > 1e-12 {
                    plane.iter_mut().for_each(|v| *v = (*v - lo) / (hi - lo));
                }
            }
        }
        PhotometricKind::Equalize => {
            for c in 0..out.channels() {
                equalize_plane(out.plane_mut(c));
            }
        }
    }
    out.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// Warp, then photometric ops in order, then cutout (filled with the
/// per-channel mean). The mask comes from the warp alone.
pub fn apply_record(img: &Image, rec: &AugRecord) -> Result<(Image, ValidityMask)> {
    let (mut out, mask) = warp_image_to(img, &rec.geometric, rec.frame, Interpolation::Bilinear, 0.0)?;
    for op in &rec.photometric {
        out = apply_photometric(&out, op)?;
    }
    if let Some(cut) = rec.cutout {
        let (w, h) = (out.width(), out.height());
        for c in 0..out.channels() {
            let plane = out.plane_mut(c);
            let mean = plane.iter().sum::<f32>() / plane.len().max(1) as f32;
            for y in cut.y..(cut.y + cut.h).min(h) {
                for x in cut.x..(cut.x + cut.w).min(w) {
                    plane[y * w + x] = mean;
                }
            }
        }
    }
    Ok((out, mask))
}

/// `A ∘ α⁻¹`: carries outputs from the weak frame into the strong frame.
pub fn relabel_transform(weak: &AugRecord, strong: &AugRecord) -> Result<AffineTransform2D> {
    if strong.geometric == weak.geometric {
        return Ok(AffineTransform2D::IDENTITY);
    }
    Ok(compose(&strong.geometric, &invert(&weak.geometric)?))
}

/// Channel normalization for the model input; out-of-frame pixels become 0.
pub fn normalize(img: &Image, mask: &ValidityMask) -> Image {
    let mut out = img.clone();
    for c in 0..out.channels() {
        let (mean, std) = (CHANNEL_MEAN[c % 3], CHANNEL_STD[c % 3]);
        for (v, &ok) in out.plane_mut(c).iter_mut().zip(mask.data()) {
            *v = if ok { (*v - mean) / std } else { 0.0 };
        }
    }
    out
}
