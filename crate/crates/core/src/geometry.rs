//! Invertible 2D affine transforms and their action on images, segmentation
//! maps and bounding boxes.
//!
//! Pixel `i` has continuous coordinate `i`, i.e. pixel centers sit on integers
//! and an image of width `W` covers `[-0.5, W - 0.5]`. Box coordinates are edge
//! coordinates instead: pixel `i` spans `[i, i + 1]`, so a box coordinate `u`
//! corresponds to the pixel-center coordinate `u - 0.5`. All warps use inverse
//! mapping: destination pixel `p` samples the source at `t^-1 p`.

use crate::error::{Error, Result};

/// Class id reserved for "no label" in segmentation maps.
pub const IGNORE_ID: u8 = 255;

/// Boxes whose clipped area falls below this many square pixels are dropped.
pub const DEFAULT_MIN_BOX_AREA: f64 = 4.0;

const MIN_ABS_DET: f64 = 1e-12;

/// A 2D affine transform in homogeneous pixel coordinates.
///
/// The matrix is row-major and maps source `(x, y, 1)` to destination. The
/// last row is always exactly `(0, 0, 1)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AffineTransform2D {
    m: [[f64; 3]; 3],
}

impl Default for AffineTransform2D {
    fn default() -> Self {
        Self::IDENTITY
    }
}

/// Parameters of a center-pivoted affine transform, as sampled by the
/// augmentation policies.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformParams {
    pub rotate_deg: f64,
    /// Translation as a fraction of the frame width/height.
    pub translate_frac: (f64, f64),
    pub shear_deg: (f64, f64),
    pub scale: f64,
    pub hflip: bool,
}

impl Default for TransformParams {
    fn default() -> Self {
        Self {
            rotate_deg: 0.0,
            translate_frac: (0.0, 0.0),
            shear_deg: (0.0, 0.0),
            scale: 1.0,
            hflip: false,
        }
    }
}

impl AffineTransform2D {
    pub const IDENTITY: Self = Self {
        m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
    };

    /// Builds a transform from a full homogeneous matrix, checking the
    /// affine last row and invertibility.
    pub fn from_matrix(m: [[f64; 3]; 3]) -> Result<Self> {
        if m[2] != [0.0, 0.0, 1.0] {
            return Err(Error::MalformedTransform(format!(
                "last row must be (0, 0, 1), got {:?}",
                m[2]
            )));
        }
        if m.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("transform matrix"));
        }
        let t = Self { m };
        if t.det().abs() < MIN_ABS_DET {
            return Err(Error::DegenerateTransform { det: t.det() });
        }
        Ok(t)
    }

    /// `x' = a x + b y + tx`, `y' = c x + d y + ty`.
    fn linear(a: f64, b: f64, c: f64, d: f64, tx: f64, ty: f64) -> Self {
        Self {
            m: [[a, b, tx], [c, d, ty], [0.0, 0.0, 1.0]],
        }
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Self::linear(1.0, 0.0, 0.0, 1.0, tx, ty)
    }

    /// Scaling about the coordinate origin.
    pub fn scaling(sx: f64, sy: f64) -> Self {
        Self::linear(sx, 0.0, 0.0, sy, 0.0, 0.0)
    }

    /// Rotation about the origin. With the y axis pointing down, positive
    /// angles turn clockwise on screen.
    pub fn rotation(deg: f64) -> Self {
        let (s, c) = deg.to_radians().sin_cos();
        Self::linear(c, -s, s, c, 0.0, 0.0)
    }

    /// Shear about the origin: `x' = x + tan(shx) y`, `y' = tan(shy) x + y`.
    pub fn shear(shx_deg: f64, shy_deg: f64) -> Self {
        Self::linear(
            1.0,
            shx_deg.to_radians().tan(),
            shy_deg.to_radians().tan(),
            1.0,
            0.0,
            0.0,
        )
    }

    pub fn rotation_about(deg: f64, cx: f64, cy: f64) -> Self {
        compose(
            &Self::translation(cx, cy),
            &compose(&Self::rotation(deg), &Self::translation(-cx, -cy)),
        )
    }

    /// Mirror of a frame of the given width: pixel `x` goes to `W - 1 - x`
    /// (box edge `u` goes to `W - u`).
    pub fn hflip(width: usize) -> Self {
        Self::linear(-1.0, 0.0, 0.0, 1.0, width as f64 - 1.0, 0.0)
    }

    /// Center-pivoted transform of a `frame = (W, H)`: flip, then scale,
    /// shear and rotate about `((W-1)/2, (H-1)/2)`, then translate by
    /// `translate_frac * (W, H)` pixels.
    pub fn from_params(p: &TransformParams, frame: (usize, usize)) -> Result<Self> {
        if !(p.scale > 0.0) || !p.scale.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "scale must be positive, got {}",
                p.scale
            )));
        }
        let (w, h) = (frame.0 as f64, frame.1 as f64);
        let (cx, cy) = ((w - 1.0) / 2.0, (h - 1.0) / 2.0);
        let flip = if p.hflip {
            Self::scaling(-1.0, 1.0)
        } else {
            Self::IDENTITY
        };
        let about_origin = [
            flip,
            Self::scaling(p.scale, p.scale),
            Self::shear(p.shear_deg.0, p.shear_deg.1),
            Self::rotation(p.rotate_deg),
        ]
        .iter()
        .fold(Self::IDENTITY, |acc, t| compose(t, &acc));
        let t = [
            Self::translation(-cx, -cy),
            about_origin,
            Self::translation(cx + p.translate_frac.0 * w, cy + p.translate_frac.1 * h),
        ]
        .iter()
        .fold(Self::IDENTITY, |acc, t| compose(t, &acc));
        let det = t.det();
        if det.abs() < MIN_ABS_DET || !det.is_finite() {
            return Err(Error::DegenerateTransform { det });
        }
        Ok(t)
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        self.m
    }

    /// Determinant of the upper-left 2x2 block.
    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    #[inline]
    pub fn apply(&self, x: f64, y: f64) -> (f64, f64) {
        let m = &self.m;
        (
            m[0][0] * x + m[0][1] * y + m[0][2],
            m[1][0] * x + m[1][1] * y + m[1][2],
        )
    }

    /// Largest absolute entry-wise difference to `other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.m
            .iter()
            .flatten()
            .zip(other.m.iter().flatten())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_identity(&self, tol: f64) -> bool {
        self.max_abs_diff(&Self::IDENTITY) <= tol
    }
}

/// `outer ∘ inner`: applies `inner` first.
pub fn compose(outer: &AffineTransform2D, inner: &AffineTransform2D) -> AffineTransform2D {
    let (a, b) = (&outer.m, &inner.m);
    let mut m = [[0.0; 3]; 3];
    for (i, row) in m.iter_mut().enumerate().take(2) {
        for (j, v) in row.iter_mut().enumerate() {
            *v = a[i][0] * b[0][j] + a[i][1] * b[1][j] + a[i][2] * b[2][j];
        }
    }
    m[2] = [0.0, 0.0, 1.0];
    AffineTransform2D { m }
}

pub fn invert(t: &AffineTransform2D) -> Result<AffineTransform2D> {
    let det = t.det();
    if det.abs() < MIN_ABS_DET || !det.is_finite() {
        return Err(Error::NonInvertible { det });
    }
    let m = &t.m;
    let (a, b, c, d) = (m[0][0], m[0][1], m[1][0], m[1][1]);
    let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
    let (tx, ty) = (m[0][2], m[1][2]);
    Ok(AffineTransform2D::linear(
        ia,
        ib,
        ic,
        id,
        -(ia * tx + ib * ty),
        -(ic * tx + id * ty),
    ))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Interpolation {
    Nearest,
    #[default]
    Bilinear,
}

/// Planar (channel-major) real-valued image.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn filled(width: usize, height: usize, channels: usize, value: f32) -> Self {
        Self {
            width,
            height,
            channels,
            data: vec![value; width * height * channels],
        }
    }

    pub fn from_planar(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::shape(
                format!("{channels}x{height}x{width}"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.width * self.height;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.width * self.height;
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Per-pixel flag: true where the pixel's preimage lies inside the source frame.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ValidityMask {
    width: usize,
    height: usize,
    data: Vec<bool>,
}

impl ValidityMask {
    pub fn all_valid(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![true; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != width * height {
            return Err(Error::shape(
                format!("{height}x{width}"),
                format!("{} flags", data.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> bool {
        self.data[y * self.width + x]
    }

    pub fn count_valid(&self) -> usize {
        self.data.iter().filter(|&&v| v).count()
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        if (self.width, self.height) != (other.width, other.height) {
            return Err(Error::shape(
                format!("{}x{}", self.height, self.width),
                format!("{}x{}", other.height, other.width),
            ));
        }
        Ok(Self {
            width: self.width,
            height: self.height,
            data: self.data.iter().zip(&other.data).map(|(a, b)| *a && *b).collect(),
        })
    }
}

/// Dense class-id map; `IGNORE_ID` marks unlabeled pixels.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SegMap {
    width: usize,
    height: usize,
    classes: Vec<u8>,
}

impl SegMap {
    pub fn filled(width: usize, height: usize, class: u8) -> Self {
        Self {
            width,
            height,
            classes: vec![class; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, classes: Vec<u8>) -> Result<Self> {
        if classes.len() != width * height {
            return Err(Error::shape(
                format!("{height}x{width}"),
                format!("{} ids", classes.len()),
            ));
        }
        Ok(Self {
            width,
            height,
            classes,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn classes(&self) -> &[u8] {
        &self.classes
    }

    pub fn classes_mut(&mut self) -> &mut [u8] {
        &mut self.classes
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.classes[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, class: u8) {
        self.classes[y * self.width + x] = class;
    }

    /// Checks every entry is below `num_classes` or `IGNORE_ID`.
    pub fn validate(&self, num_classes: usize) -> Result<()> {
        match self
            .classes
            .iter()
            .find(|&&c| c != IGNORE_ID && c as usize >= num_classes)
        {
            Some(&c) => Err(Error::BadClassId {
                id: c as u32,
                classes: num_classes,
            }),
            None => Ok(()),
        }
    }

    /// Marks every pixel where `mask` is false as ignored.
    pub fn mask_invalid(&mut self, mask: &ValidityMask) {
        for (c, &v) in self.classes.iter_mut().zip(mask.data()) {
            if !v {
                *c = IGNORE_ID;
            }
        }
    }
}

/// Axis-aligned box in edge coordinates, with class id and score.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub class_id: u32,
    pub score: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64, class_id: u32, score: f64) -> Result<Self> {
        if !(x1 < x2 && y1 < y2) || ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::DegenerateBox { x1, y1, x2, y2 });
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::BadScore(score));
        }
        Ok(Self {
            x1,
            y1,
            x2,
            y2,
            class_id,
            score,
        })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn intersection(&self, other: &Self) -> f64 {
        let iw = self.x2.min(other.x2) - self.x1.max(other.x1);
        let ih = self.y2.min(other.y2) - self.y1.max(other.y1);
        if iw <= 0.0 || ih <= 0.0 {
            0.0
        } else {
            iw * ih
        }
    }

    pub fn iou(&self, other: &Self) -> f64 {
        let inter = self.intersection(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn contains(&self, other: &Self) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    /// Axis-aligned hull of the four transformed corners, without clipping.
    pub fn transformed(&self, t: &AffineTransform2D) -> BBox {
        let corners = [
            (self.x1, self.y1),
            (self.x2, self.y1),
            (self.x1, self.y2),
            (self.x2, self.y2),
        ];
        let (mut x1, mut y1) = (f64::INFINITY, f64::INFINITY);
        let (mut x2, mut y2) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (u, v) in corners {
            let (x, y) = t.apply(u - 0.5, v - 0.5);
            x1 = x1.min(x + 0.5);
            y1 = y1.min(y + 0.5);
            x2 = x2.max(x + 0.5);
            y2 = y2.max(y + 0.5);
        }
        BBox {
            x1,
            y1,
            x2,
            y2,
            ..*self
        }
    }

    /// Clips to `[0, W] x [0, H]`; `None` if nothing remains.
    pub fn clipped(&self, frame: (usize, usize)) -> Option<BBox> {
        let (w, h) = (frame.0 as f64, frame.1 as f64);
        let b = BBox {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
            ..*self
        };
        (b.x1 < b.x2 && b.y1 < b.y2).then_some(b)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BoxSet {
    boxes: Vec<BBox>,
}

impl BoxSet {
    pub fn new(boxes: Vec<BBox>) -> Result<Self> {
        for b in &boxes {
            BBox::new(b.x1, b.y1, b.x2, b.y2, b.class_id, b.score)?;
        }
        Ok(Self { boxes })
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn boxes(&self) -> &[BBox] {
        &self.boxes
    }

    pub fn into_boxes(self) -> Vec<BBox> {
        self.boxes
    }

    pub fn len(&self) -> usize {
        self.boxes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn iter(&self) -> std::slice::Iter<'_, BBox> {
        self.boxes.iter()
    }
}

impl<'a> IntoIterator for &'a BoxSet {
    type Item = &'a BBox;
    type IntoIter = std::slice::Iter<'a, BBox>;

    fn into_iter(self) -> Self::IntoIter {
        self.boxes.iter()
    }
}

/// Preimage lookup shared by every warp. Yields, for each destination pixel
/// in row-major order, the source coordinates.
struct InverseMap {
    inv: AffineTransform2D,
}

impl InverseMap {
    fn new(t: &AffineTransform2D) -> Result<Self> {
        Ok(Self { inv: invert(t)? })
    }

    #[inline]
    fn source(&self, x: usize, y: usize) -> (f64, f64) {
        self.inv.apply(x as f64, y as f64)
    }
}

#[inline]
fn nearest_index(s: f64, len: usize) -> Option<usize> {
    let i = (s + 0.5).floor();
    (i >= 0.0 && i < len as f64).then_some(i as usize)
}

/// Warps into a frame the size of the input.
pub fn warp_image(
    img: &Image,
    t: &AffineTransform2D,
    interp: Interpolation,
    fill: f32,
) -> Result<(Image, ValidityMask)> {
    warp_image_to(img, t, (img.width, img.height), interp, fill)
}

/// Warps into an `out = (W, H)` frame. Destination pixels whose preimage
/// falls outside the source take `fill` and are flagged invalid.
pub fn warp_image_to(
    img: &Image,
    t: &AffineTransform2D,
    out: (usize, usize),
    interp: Interpolation,
    fill: f32,
) -> Result<(Image, ValidityMask)> {
    let map = InverseMap::new(t)?;
    let (ow, oh) = out;
    let (w, h, ch) = (img.width, img.height, img.channels);
    let mut dst = Image::filled(ow, oh, ch, fill);
    let mut valid = vec![false; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let (sx, sy) = map.source(x, y);
            let (Some(nx), Some(ny)) = (nearest_index(sx, w), nearest_index(sy, h)) else {
                continue;
            };
            valid[y * ow + x] = true;
            match interp {
                Interpolation::Nearest => {
                    for c in 0..ch {
                        dst.set(c, y, x, img.get(c, ny, nx));
                    }
                }
                Interpolation::Bilinear => {
                    let (fx0, fy0) = (sx.floor(), sy.floor());
                    let (ax, ay) = ((sx - fx0) as f32, (sy - fy0) as f32);
                    let clampi = |v: f64, n: usize| v.clamp(0.0, (n - 1) as f64) as usize;
                    let (x0, x1) = (clampi(fx0, w), clampi(fx0 + 1.0, w));
                    let (y0, y1) = (clampi(fy0, h), clampi(fy0 + 1.0, h));
                    for c in 0..ch {
                        let top = img.get(c, y0, x0) * (1.0 - ax) + img.get(c, y0, x1) * ax;
                        let bot = img.get(c, y1, x0) * (1.0 - ax) + img.get(c, y1, x1) * ax;
                        dst.set(c, y, x, top * (1.0 - ay) + bot * ay);
                    }
                }
            }
        }
    }
    Ok((dst, ValidityMask::from_vec(ow, oh, valid)?))
}

/// Nearest-neighbour inverse warp of any per-pixel grid.
pub fn warp_grid_nearest<T: Copy>(
    src: &[T],
    size: (usize, usize),
    t: &AffineTransform2D,
    out: (usize, usize),
    fill: T,
) -> Result<(Vec<T>, ValidityMask)> {
    let (w, h) = size;
    if src.len() != w * h {
        return Err(Error::shape(format!("{h}x{w}"), format!("{} cells", src.len())));
    }
    let map = InverseMap::new(t)?;
    let (ow, oh) = out;
    let mut dst = vec![fill; ow * oh];
    let mut valid = vec![false; ow * oh];
    for y in 0..oh {
        for x in 0..ow {
            let (sx, sy) = map.source(x, y);
            if let (Some(nx), Some(ny)) = (nearest_index(sx, w), nearest_index(sy, h)) {
                dst[y * ow + x] = src[ny * w + nx];
                valid[y * ow + x] = true;
            }
        }
    }
    Ok((dst, ValidityMask::from_vec(ow, oh, valid)?))
}

pub fn warp_segmap(seg: &SegMap, t: &AffineTransform2D) -> Result<SegMap> {
    warp_segmap_to(seg, t, (seg.width, seg.height))
}

/// Nearest-neighbour warp; out-of-frame pixels become `IGNORE_ID`.
pub fn warp_segmap_to(seg: &SegMap, t: &AffineTransform2D, out: (usize, usize)) -> Result<SegMap> {
    let (classes, _) = warp_grid_nearest(&seg.classes, (seg.width, seg.height), t, out, IGNORE_ID)?;
    SegMap::from_vec(out.0, out.1, classes)
}

/// Transforms every box, takes the axis-aligned hull, clips it to `frame`
/// and drops boxes whose clipped area is below `min_area_px`.
pub fn warp_boxes(
    bs: &BoxSet,
    t: &AffineTransform2D,
    frame: (usize, usize),
    min_area_px: f64,
) -> BoxSet {
    let boxes = bs
        .iter()
        .filter_map(|b| b.transformed(t).clipped(frame))
        .filter(|b| b.area() >= min_area_px)
        .collect();
    BoxSet { boxes }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_close(a: &AffineTransform2D, b: &AffineTransform2D, tol: f64) {
        assert!(a.max_abs_diff(b) <= tol, "{a:?} != {b:?}");
    }

    fn ramp(w: usize, h: usize) -> Image {
        let data = (0..w * h).map(|i| (i % w) as f32 + 10.0 * (i / w) as f32).collect();
        Image::from_planar(w, h, 1, data).unwrap()
    }

    #[test]
    fn compose_examples() {
        let t = AffineTransform2D::rotation_about(17.0, 3.0, 4.0);
        assert_eq!(compose(&AffineTransform2D::IDENTITY, &t), t);
        let sum = compose(
            &AffineTransform2D::translation(3.0, 0.0),
            &AffineTransform2D::translation(2.0, 0.0),
        );
        assert_eq!(sum, AffineTransform2D::translation(5.0, 0.0));
        let back = compose(
            &AffineTransform2D::rotation(30.0),
            &AffineTransform2D::rotation(-30.0),
        );
        assert_close(&back, &AffineTransform2D::IDENTITY, 1e-9);
    }

    #[test]
    fn compose_applies_inner_first() {
        let inner = AffineTransform2D::scaling(2.0, 2.0);
        let outer = AffineTransform2D::translation(1.0, 0.0);
        assert_eq!(compose(&outer, &inner).apply(3.0, 0.0), (7.0, 0.0));
    }

    #[test]
    fn invert_examples() {
        assert_eq!(
            invert(&AffineTransform2D::IDENTITY).unwrap(),
            AffineTransform2D::IDENTITY
        );
        assert_close(
            &invert(&AffineTransform2D::translation(5.0, -2.0)).unwrap(),
            &AffineTransform2D::translation(-5.0, 2.0),
            0.0,
        );
        assert_close(
            &invert(&AffineTransform2D::scaling(2.0, 2.0)).unwrap(),
            &AffineTransform2D::scaling(0.5, 0.5),
            0.0,
        );
        let t = AffineTransform2D::from_params(
            &TransformParams {
                rotate_deg: 21.0,
                translate_frac: (0.1, -0.05),
                shear_deg: (7.0, -3.0),
                scale: 1.3,
                hflip: true,
            },
            (40, 30),
        )
        .unwrap();
        assert_close(&compose(&invert(&t).unwrap(), &t), &AffineTransform2D::IDENTITY, 1e-9);
    }

    #[test]
    fn invert_rejects_singular() {
        let t = AffineTransform2D { m: [[1.0, 2.0, 0.0], [2.0, 4.0, 0.0], [0.0, 0.0, 1.0]] };
        assert!(matches!(invert(&t), Err(Error::NonInvertible { .. })));
    }

    #[test]
    fn from_matrix_checks_last_row() {
        let bad = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.1, 0.0, 1.0]];
        assert!(matches!(
            AffineTransform2D::from_matrix(bad),
            Err(Error::MalformedTransform(_))
        ));
        let singular = [[0.0, 0.0, 1.0], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0]];
        assert!(matches!(
            AffineTransform2D::from_matrix(singular),
            Err(Error::DegenerateTransform { .. })
        ));
    }

    #[test]
    fn from_params_neutral_is_identity() {
        let t = AffineTransform2D::from_params(&TransformParams::default(), (64, 48)).unwrap();
        assert_close(&t, &AffineTransform2D::IDENTITY, 1e-12);
    }

    #[test]
    fn from_params_hflip_reflects() {
        let p = TransformParams {
            hflip: true,
            ..Default::default()
        };
        let t = AffineTransform2D::from_params(&p, (10, 6)).unwrap();
        assert_close(&t, &AffineTransform2D::hflip(10), 1e-12);
        // Pixel centers: x -> W-1-x. Box edges: u -> W-u.
        assert_eq!(t.apply(0.0, 2.0), (9.0, 2.0));
        let b = BBox::new(1.0, 1.0, 4.0, 3.0, 0, 1.0).unwrap().transformed(&t);
        assert_eq!((b.x1, b.x2), (6.0, 9.0));
    }

    #[test]
    fn from_params_rotate_90_about_center() {
        let p = TransformParams {
            rotate_deg: 90.0,
            ..Default::default()
        };
        let t = AffineTransform2D::from_params(&p, (100, 100)).unwrap();
        let (x, y) = t.apply(0.0, 0.0);
        assert!((x - 99.0).abs() < 1e-9 && y.abs() < 1e-9, "({x}, {y})");
    }

    #[test]
    fn from_params_rejects_degenerate() {
        let p = TransformParams {
            shear_deg: (45.0, 45.0),
            ..Default::default()
        };
        assert!(matches!(
            AffineTransform2D::from_params(&p, (8, 8)),
            Err(Error::DegenerateTransform { .. })
        ));
        let p = TransformParams {
            scale: 0.0,
            ..Default::default()
        };
        assert!(AffineTransform2D::from_params(&p, (8, 8)).is_err());
    }

    #[test]
    fn warp_image_identity() {
        let img = ramp(8, 8);
        for interp in [Interpolation::Nearest, Interpolation::Bilinear] {
            let (out, mask) = warp_image(&img, &AffineTransform2D::IDENTITY, interp, -1.0).unwrap();
            assert_eq!(out, img);
            assert_eq!(mask.count_valid(), 64);
        }
    }

    #[test]
    fn warp_image_integer_translation() {
        let img = ramp(8, 8);
        let t = AffineTransform2D::translation(5.0, 0.0);
        let (out, mask) = warp_image(&img, &t, Interpolation::Bilinear, -1.0).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                if x < 5 {
                    assert_eq!(out.get(0, y, x), -1.0);
                    assert!(!mask.get(x, y));
                } else {
                    assert_eq!(out.get(0, y, x), img.get(0, y, x - 5));
                    assert!(mask.get(x, y));
                }
            }
        }
    }

    #[test]
    fn warp_image_hflip_involution() {
        let img = ramp(7, 5);
        let t = AffineTransform2D::hflip(7);
        let (once, _) = warp_image(&img, &t, Interpolation::Nearest, 0.0).unwrap();
        assert_eq!(once.get(0, 2, 0), img.get(0, 2, 6));
        let (twice, mask) = warp_image(&once, &t, Interpolation::Nearest, 0.0).unwrap();
        assert_eq!(twice, img);
        assert_eq!(mask.count_valid(), 35);
    }

    #[test]
    fn warp_image_bilinear_half_pixel() {
        let img = ramp(8, 1);
        let t = AffineTransform2D::translation(0.5, 0.0);
        let (out, _) = warp_image(&img, &t, Interpolation::Bilinear, 0.0).unwrap();
        assert!((out.get(0, 0, 3) - 2.5).abs() < 1e-6);
    }

    #[test]
    fn warp_segmap_examples() {
        let classes: Vec<u8> = (0..64).map(|i| ((i % 8) / 2) as u8).collect();
        let seg = SegMap::from_vec(8, 8, classes).unwrap();
        assert_eq!(warp_segmap(&seg, &AffineTransform2D::IDENTITY).unwrap(), seg);

        let shifted = warp_segmap(&seg, &AffineTransform2D::translation(5.0, 0.0)).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                let expect = if x < 5 { IGNORE_ID } else { seg.get(x - 5, y) };
                assert_eq!(shifted.get(x, y), expect);
            }
        }

        let flip = AffineTransform2D::hflip(8);
        let twice = warp_segmap(&warp_segmap(&seg, &flip).unwrap(), &flip).unwrap();
        assert_eq!(twice, seg);
    }

    #[test]
    fn segmap_validate() {
        let mut seg = SegMap::filled(2, 2, 1);
        seg.set(0, 0, IGNORE_ID);
        assert!(seg.validate(2).is_ok());
        seg.set(1, 1, 3);
        assert!(matches!(seg.validate(2), Err(Error::BadClassId { id: 3, .. })));
    }

    #[test]
    fn warp_boxes_hflip() {
        let bs = BoxSet::new(vec![BBox::new(2.0, 3.0, 7.0, 9.0, 1, 0.7).unwrap()]).unwrap();
        let out = warp_boxes(&bs, &AffineTransform2D::hflip(20), (20, 20), 4.0);
        let b = out.boxes()[0];
        assert_eq!((b.x1, b.y1, b.x2, b.y2), (13.0, 3.0, 18.0, 9.0));
        assert_eq!((b.class_id, b.score), (1, 0.7));
    }

    #[test]
    fn warp_boxes_drops_boxes_leaving_frame() {
        let bs = BoxSet::new(vec![BBox::new(2.0, 3.0, 7.0, 9.0, 0, 1.0).unwrap()]).unwrap();
        let out = warp_boxes(&bs, &AffineTransform2D::translation(100.0, 0.0), (20, 20), 4.0);
        assert!(out.is_empty());
        // a sliver left after clipping is dropped too
        let out = warp_boxes(&bs, &AffineTransform2D::translation(17.5, 0.0), (20, 20), 4.0);
        assert!(out.is_empty());
    }

    #[test]
    fn warp_boxes_rotation_hull() {
        let bs = BoxSet::new(vec![BBox::new(10.0, 10.0, 20.0, 20.0, 0, 1.0).unwrap()]).unwrap();
        // (15, 15) in edge coordinates is (14.5, 14.5) in pixel centers
        let t = AffineTransform2D::rotation_about(45.0, 14.5, 14.5);
        let b = warp_boxes(&bs, &t, (1000, 1000), 4.0).boxes()[0];
        let half = 5.0 * 2f64.sqrt();
        for (got, want) in [(b.x1, 15.0 - half), (b.y1, 15.0 - half), (b.x2, 15.0 + half), (b.y2, 15.0 + half)] {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
        assert!((b.x1 - 7.93).abs() < 0.005);
    }

    #[test]
    fn bbox_rejects_degenerate() {
        assert!(matches!(
            BBox::new(1.0, 1.0, 1.0, 2.0, 0, 0.5),
            Err(Error::DegenerateBox { .. })
        ));
        assert!(matches!(BBox::new(0.0, 0.0, 1.0, 1.0, 0, 1.5), Err(Error::BadScore(_))));
    }
}
