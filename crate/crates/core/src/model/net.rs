//! The multi-task network: a four-block convolutional backbone on which a
//! segmentation head and a single-scale anchor detection head sit.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::model::graph::{Graph, NodeId};
use crate::model::heads::{AnchorGrid, DetOutputs, SegLogits};
use crate::model::tensor::{Scalar, Tensor};

/// Total downsampling of the backbone.
pub const STRIDE: usize = 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetSpec {
    pub input_size: usize,
    pub widths: [usize; 4],
    pub seg_classes: usize,
    pub det_classes: usize,
    pub anchor_scale: f64,
    /// Initial detection score (sets the classifier bias).
    pub det_prior: f64,
}

impl Default for NetSpec {
    fn default() -> Self {
        Self {
            input_size: 64,
            widths: [16, 32, 64, 64],
            seg_classes: 4,
            det_classes: 3,
            anchor_scale: 2.0,
            det_prior: 0.01,
        }
    }
}

impl NetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.input_size == 0 || self.input_size % STRIDE != 0 {
            return Err(Error::Config(format!("input size {} must be a positive multiple of {STRIDE}", self.input_size)));
        }
        if self.widths.contains(&0) || self.seg_classes < 2 || self.det_classes == 0 {
            return Err(Error::Config("network widths and class counts must be positive".into()));
        }
        if !(self.anchor_scale > 0.0) || !(self.det_prior > 0.0 && self.det_prior < 1.0) {
            return Err(Error::Config("anchor scale must be positive and det prior in (0, 1)".into()));
        }
        Ok(())
    }

    pub fn grid(&self) -> usize {
        self.input_size / STRIDE
    }

    pub fn anchor_grid(&self) -> AnchorGrid {
        AnchorGrid {
            grid_w: self.grid(),
            grid_h: self.grid(),
            stride: STRIDE as f64,
            side: STRIDE as f64 * self.anchor_scale,
        }
    }

    pub fn anchors(&self) -> Vec<BBox> {
        self.anchor_grid().anchors()
    }

    /// Parameter names and shapes in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut c_in = 3;
        for (i, &w) in self.widths.iter().enumerate() {
            out.push((format!("block{}.weight", i + 1), vec![w, c_in, 3, 3]));
            out.push((format!("block{}.bias", i + 1), vec![w]));
            c_in = w;
        }
        for (name, k) in [("seg", self.seg_classes), ("det_cls", self.det_classes), ("det_box", 4)] {
            out.push((format!("{name}.weight"), vec![k, c_in, 1, 1]));
            out.push((format!("{name}.bias"), vec![k]));
        }
        out
    }
}

/// Named parameter tensors plus a version counter bumped on every update.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore<T> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    version: u64,
}

impl<T: Scalar> ParamStore<T> {
    /// Fan-in scaled uniform init; the detection classifier bias starts at
    /// `-ln((1 - prior) / prior)`.
    pub fn init(spec: &NetSpec, seed: u64) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut tensors = Vec::new();
        for (name, shape) in spec.layout() {
            let mut t = Tensor::zeros(&shape);
            if name.ends_with(".weight") {
                let fan_in: usize = shape[1..].iter().product();
                let bound = if name.starts_with("block") {
                    (6.0 / fan_in as f64).sqrt()
                } else {
                    (1.0 / fan_in as f64).sqrt()
                };
                for v in t.data_mut() {
                    *v = T::of(rng.random_range(-bound..bound));
                }
            } else if name == "det_cls.bias" {
                t.fill(T::of(-((1.0 - spec.det_prior) / spec.det_prior).ln()));
            }
            names.push(name);
            tensors.push(t);
        }
        Ok(Self {
            names,
            tensors,
            version: 0,
        })
    }

    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor<T>>, version: u64) -> Result<Self> {
        if names.len() != tensors.len() {
            return Err(Error::shape(format!("{} tensors", names.len()), format!("{} tensors", tensors.len())));
        }
        Ok(Self { names, tensors, version })
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor<T>] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.tensors[i])
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    /// Mutable access; counts as an update.
    pub fn tensors_mut(&mut self) -> &mut [Tensor<T>] {
        self.version += 1;
        &mut self.tensors
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
            version: self.version,
        }
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    pub fn check_same_layout<U: Scalar>(&self, other: &ParamStore<U>) -> Result<()> {
        if self.names != other.names || self.tensors.iter().zip(&other.tensors).any(|(a, b)| a.shape() != b.shape()) {
            return Err(Error::shape("identical parameter layout", "different layout"));
        }
        Ok(())
    }

    pub fn check_spec(&self, spec: &NetSpec) -> Result<()> {
        let layout = spec.layout();
        if layout.len() != self.names.len()
            || layout
                .iter()
                .zip(self.names.iter().zip(&self.tensors))
                .any(|((n, s), (name, t))| n != name || s.as_slice() != t.shape())
        {
            return Err(Error::shape("parameters matching the network spec", "different layout"));
        }
        Ok(())
    }
}

/// Shadow weights updated only by exponential averaging of a student.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaTeacher<T> {
    params: ParamStore<T>,
    decay: f64,
    /// Student version the shadow was last averaged against.
    synced_to: u64,
}

pub const DEFAULT_EMA_DECAY: f64 = 0.99;

impl<T: Scalar> EmaTeacher<T> {
    pub fn new(student: &ParamStore<T>, decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(Error::InvalidArgument(format!("EMA decay {decay} outside [0, 1]")));
        }
        Ok(Self {
            params: student.clone(),
            decay,
            synced_to: student.version(),
        })
    }

    pub fn from_parts(params: ParamStore<T>, decay: f64, synced_to: u64) -> Self {
        Self { params, decay, synced_to }
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn decay(&self) -> f64 {
        self.decay
    }

    pub fn synced_to(&self) -> u64 {
        self.synced_to
    }

    /// Number of averaging updates applied so far.
    pub fn version(&self) -> u64 {
        self.params.version()
    }

    /// `shadow <- decay * shadow + (1 - decay) * student`.
    pub fn update(&mut self, student: &ParamStore<T>) -> Result<()> {
        self.params.check_same_layout(student)?;
        let d = T::of(self.decay);
        let e = T::of(1.0 - self.decay);
        for (t, s) in self.params.tensors_mut().iter_mut().zip(student.tensors()) {
            for (a, &b) in t.data_mut().iter_mut().zip(s.data()) {
                *a = d * *a + e * b;
            }
        }
        self.synced_to = student.version();
        Ok(())
    }
}

/// Output node ids of one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub seg: NodeId,
    pub det_cls: NodeId,
    pub det_box: NodeId,
}

/// Records the network on `graph` for a normalized `N x 3 x S x S` batch.
/// Parameters are registered in storage order.
pub fn forward<T: Scalar>(graph: &mut Graph<T>, spec: &NetSpec, params: &ParamStore<T>, images: Tensor<T>) -> Result<ForwardNodes> {
    let s = spec.input_size;
    match *images.shape() {
        [_, 3, h, w] if h == s && w == s => {}
        ref other => return Err(Error::shape(format!("N x 3 x {s} x {s}"), format!("{other:?}"))),
    }
    params.check_spec(spec)?;
    let p: Vec<NodeId> = params.tensors().iter().map(|t| graph.param(t.clone())).collect();
    let mut h = graph.input(images);
    for block in 0..4 {
        h = graph.conv2d(h, p[2 * block], p[2 * block + 1])?;
        h = graph.relu(h);
        if block < 3 {
            h = graph.avg_pool2(h)?;
        }
    }
    let seg_low = graph.conv2d(h, p[8], p[9])?;
    let seg = graph.upsample_bilinear(seg_low, STRIDE)?;
    let det_cls = graph.conv2d(h, p[10], p[11])?;
    let det_box = graph.conv2d(h, p[12], p[13])?;
    Ok(ForwardNodes { seg, det_cls, det_box })
}

/// Splits batched head tensors into per-sample outputs in double precision.
pub fn split_outputs<T: Scalar>(graph: &Graph<T>, nodes: &ForwardNodes) -> Result<Vec<(SegLogits, DetOutputs)>> {
    let seg = graph.value(nodes.seg);
    let cls = graph.value(nodes.det_cls);
    let boxes = graph.value(nodes.det_box);
    let [n, k, h, w] = seg.shape().try_into().map_err(|_| Error::shape("4-d seg output", format!("{:?}", seg.shape())))?;
    let [_, kd, gh, gw] = cls.shape().try_into().map_err(|_| Error::shape("4-d det output", format!("{:?}", cls.shape())))?;
    let a = gh * gw;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let seg_i = seg.data()[i * k * h * w..(i + 1) * k * h * w].iter().map(|v| v.widen()).collect();
        let cls_i = &cls.data()[i * kd * a..(i + 1) * kd * a];
        let box_i = &boxes.data()[i * 4 * a..(i + 1) * 4 * a];
        let mut c = vec![0.0; a * kd];
        let mut d = vec![0.0; a * 4];
        for cell in 0..a {
            for j in 0..kd {
                c[cell * kd + j] = cls_i[j * a + cell].widen();
            }
            for j in 0..4 {
                d[cell * 4 + j] = box_i[j * a + cell].widen();
            }
        }
        out.push((SegLogits::new(k, w, h, seg_i)?, DetOutputs::new(kd, c, d)?));
    }
    Ok(out)
}

/// Inverse of [`split_outputs`] for gradients: per-sample `(seg, det_cls,
/// det_box)` gradients into seeds for the three head nodes.
pub fn merge_grads<T: Scalar>(
    graph: &Graph<T>,
    nodes: &ForwardNodes,
    grads: &[(&[f64], &[f64], &[f64])],
) -> Result<Vec<(NodeId, Tensor<T>)>> {
    let shapes = [nodes.seg, nodes.det_cls, nodes.det_box].map(|id| graph.value(id).shape().to_vec());
    let n = shapes[0][0];
    if grads.len() != n {
        return Err(Error::shape(format!("{n} samples"), format!("{} samples", grads.len())));
    }
    let mut seg = Vec::with_capacity(shapes[0].iter().product());
    let [kd, gh, gw] = [shapes[1][1], shapes[1][2], shapes[1][3]];
    let a = gh * gw;
    let mut cls = vec![T::zero(); n * kd * a];
    let mut boxes = vec![T::zero(); n * 4 * a];
    for (i, (gs, gc, gb)) in grads.iter().enumerate() {
        if gc.len() != a * kd || gb.len() != a * 4 {
            return Err(Error::shape(format!("{a} anchors"), format!("{} logits", gc.len())));
        }
        seg.extend(gs.iter().map(|&v| T::of(v)));
        for cell in 0..a {
            for j in 0..kd {
                cls[(i * kd + j) * a + cell] = T::of(gc[cell * kd + j]);
            }
            for j in 0..4 {
                boxes[(i * 4 + j) * a + cell] = T::of(gb[cell * 4 + j]);
            }
        }
    }
    Ok(vec![
        (nodes.seg, Tensor::from_vec(&shapes[0], seg)?),
        (nodes.det_cls, Tensor::from_vec(&shapes[1], cls)?),
        (nodes.det_box, Tensor::from_vec(&shapes[2], boxes)?),
    ])
}

/// Forward pass without gradient bookkeeping beyond the tape itself.
pub fn infer<T: Scalar>(spec: &NetSpec, params: &ParamStore<T>, images: Tensor<T>) -> Result<Vec<(SegLogits, DetOutputs)>> {
    let mut g = Graph::new();
    let nodes = forward(&mut g, spec, params, images)?;
    split_outputs(&g, &nodes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::heads::sigmoid;

    fn small() -> NetSpec {
        NetSpec {
            input_size: 16,
            widths: [4, 4, 6, 6],
            ..NetSpec::default()
        }
    }

    fn images(n: usize, s: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data = (0..n * 3 * s * s).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(&[n, 3, s, s], data).unwrap()
    }

    #[test]
    fn output_shapes() {
        let spec = NetSpec::default();
        let params = ParamStore::<f32>::init(&spec, 0).unwrap();
        let out = infer(&spec, &params, images(2, 64, 1).cast()).unwrap();
        assert_eq!(out.len(), 2);
        assert_eq!((out[0].0.num_classes(), out[0].0.width(), out[0].0.height()), (4, 64, 64));
        assert_eq!(out[0].1.num_anchors(), 64);
        assert_eq!(spec.anchors().len(), 64);
        assert!(infer(&spec, &params, images(1, 32, 1).cast()).is_err());
    }

    #[test]
    fn zeroed_heads_give_uniform_outputs() {
        let spec = small();
        let mut params = ParamStore::<f64>::init(&spec, 3).unwrap();
        let names = params.names().to_vec();
        for (name, t) in names.iter().zip(params.tensors_mut()) {
            if name.starts_with("seg") || name == "det_cls.weight" {
                t.fill(0.0);
            }
        }
        let out = infer(&spec, &params, images(1, 16, 2)).unwrap();
        assert!(out[0].0.data().iter().all(|&v| v == 0.0));
        for &c in out[0].1.cls() {
            assert!((sigmoid(c) - 0.01).abs() < 1e-12);
        }
    }

    #[test]
    fn batch_items_are_independent() {
        let spec = small();
        let params = ParamStore::<f64>::init(&spec, 4).unwrap();
        let one = infer(&spec, &params, images(1, 16, 5)).unwrap();
        let mut two = images(1, 16, 5).into_data();
        two.extend(images(1, 16, 6).into_data());
        let two = infer(&spec, &params, Tensor::from_vec(&[2, 3, 16, 16], two).unwrap()).unwrap();
        assert_eq!(two.len(), 2);
        assert_eq!(one[0], two[0]);
    }

    #[test]
    fn forward_is_deterministic() {
        let spec = NetSpec::default();
        let params = ParamStore::<f32>::init(&spec, 9).unwrap();
        let x = images(3, 64, 7).cast::<f32>();
        assert_eq!(infer(&spec, &params, x.clone()).unwrap(), infer(&spec, &params, x).unwrap());
    }

    #[test]
    fn ema_closed_form() {
        let spec = small();
        let mut student = ParamStore::<f64>::init(&spec, 1).unwrap();
        for t in student.tensors_mut() {
            t.fill(1.0);
        }
        let mut zero = student.clone();
        for t in zero.tensors_mut() {
            t.fill(0.0);
        }
        let mut teacher = EmaTeacher::new(&zero, 0.99).unwrap();
        for _ in 0..100 {
            teacher.update(&student).unwrap();
        }
        let expect = 1.0 - 0.99f64.powi(100);
        assert!((expect - 0.6340).abs() < 1e-4);
        for t in teacher.params().tensors() {
            assert!(t.data().iter().all(|v| (v - expect).abs() < 1e-9));
        }
        assert_eq!(teacher.version(), zero.version() + 100);

        let mut fixed = EmaTeacher::new(&student, 0.99).unwrap();
        fixed.update(&student).unwrap();
        assert_eq!(fixed.params().tensors(), student.tensors());

        let mut instant = EmaTeacher::new(&zero, 0.0).unwrap();
        instant.update(&student).unwrap();
        assert_eq!(instant.params().tensors(), student.tensors());

        let other = ParamStore::<f64>::init(&NetSpec::default(), 1).unwrap();
        assert!(matches!(teacher.update(&other), Err(Error::ShapeMismatch { .. })));
    }
}
