//! Tape-based reverse-mode differentiation over a small set of tensor ops.
//!
//! Image tensors are `N x C x H x W`. Batch items are processed in parallel;
//! parameter gradients are summed over items in index order so results do
//! not depend on the thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf,
    Conv { x: NodeId, w: NodeId, b: NodeId },
    Relu(NodeId),
    AvgPool2(NodeId),
    Upsample { x: NodeId, factor: usize },
    MatMul { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    MeanSquare(NodeId),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
}

/// One forward pass worth of recorded operations. `backward` consumes it.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: Vec<NodeId>,
    consumed: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(t: &Tensor<impl Scalar>) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(Error::shape("N x C x H x W", format!("{s:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: Vec::new(),
            consumed: false,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Registers a trainable leaf; `backward` returns gradients in registration order.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        let id = self.push(value, Op::Leaf);
        self.params.push(id);
        id
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    /// Same-padded stride-1 convolution with a square odd kernel `w: O x C x k x k`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let [n, c, h, wd] = dims4(self.value(x))?;
        let ws = self.value(w).shape().to_vec();
        let (o, k) = match ws[..] {
            [o, wc, k1, k2] if wc == c && k1 == k2 && k1 % 2 == 1 => (o, k1),
            _ => return Err(Error::shape(format!("O x {c} x k x k (odd k)"), format!("{ws:?}"))),
        };
        self.value(b).expect_shape(&[o])?;
        let (xv, wv, bv) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let hw = h * wd;
        let ckk = c * k * k;
        let mut out = vec![T::zero(); n * o * hw];
        out.par_chunks_mut(o * hw).enumerate().for_each(|(i, dst)| {
            let src = &xv[i * c * hw..(i + 1) * c * hw];
            let cols;
            let cols_ref = if k == 1 {
                src
            } else {
                cols = im2col(src, c, h, wd, k);
                &cols[..]
            };
            for (oc, row) in dst.chunks_mut(hw).enumerate() {
                row.fill(bv[oc]);
            }
            T::gemm(o, ckk, hw, T::one(), wv, false, cols_ref, false, T::one(), dst);
        });
        let value = Tensor::from_vec(&[n, o, h, wd], out)?;
        Ok(self.push(value, Op::Conv { x, w, b }))
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let data = v.data().iter().map(|&a| if a > T::zero() { a } else { T::zero() }).collect();
        let value = Tensor::from_vec(v.shape(), data).expect("same shape");
        self.push(value, Op::Relu(x))
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let [n, c, h, w] = dims4(self.value(x))?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::shape("even spatial size", format!("{h}x{w}")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let quarter = T::of(0.25);
        let mut out = vec![T::zero(); n * c * oh * ow];
        for (p, dst) in out.chunks_mut(oh * ow).enumerate() {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for y in 0..oh {
                for xx in 0..ow {
                    let i = 2 * y * w + 2 * xx;
                    dst[y * ow + xx] = (src[i] + src[i + 1] + src[i + w] + src[i + w + 1]) * quarter;
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::AvgPool2(x)))
    }

    /// Bilinear upsampling by an integer factor with half-pixel alignment.
    pub fn upsample_bilinear(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        let [n, c, h, w] = dims4(self.value(x))?;
        if factor == 0 {
            return Err(Error::InvalidArgument("upsampling factor must be positive".into()));
        }
        let (oh, ow) = (h * factor, w * factor);
        let ty = taps(h, oh);
        let tx = taps(w, ow);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for (p, dst) in out.chunks_mut(oh * ow).enumerate() {
            let src = &xv[p * h * w..(p + 1) * h * w];
            for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                let fy = T::of(fy);
                for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                    let fx = T::of(fx);
                    let top = src[y0 * w + x0] * (T::one() - fx) + src[y0 * w + x1] * fx;
                    let bot = src[y1 * w + x0] * (T::one() - fx) + src[y1 * w + x1] * fx;
                    dst[y * ow + xx] = top * (T::one() - fy) + bot * fy;
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        Ok(self.push(value, Op::Upsample { x, factor }))
    }

    /// Matrix product of two 2-D tensors.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        let (m, k, n) = match (sa, sb) {
            (&[m, k], &[k2, n]) if k == k2 => (m, k, n),
            _ => return Err(Error::shape(format!("{sa:?} x [{}, _]", sa.last().unwrap_or(&0)), format!("{sb:?}"))),
        };
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), self.value(a).data(), false, self.value(b).data(), false, T::zero(), &mut out);
        let value = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b }))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        vb.expect_shape(va.shape())?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x - y).collect();
        let value = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(value, Op::Sub { a, b }))
    }

    /// Mean of squared entries, as a scalar.
    pub fn mean_square(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let n = T::of(v.len().max(1) as f64);
        let s: T = v.data().iter().map(|&a| a * a).sum();
        self.push(Tensor::scalar(s / n), Op::MeanSquare(x))
    }

    pub fn backward_scalar(&mut self, loss: NodeId) -> Result<Vec<Tensor<T>>> {
        self.value(loss).expect_shape(&[])?;
        self.backward(vec![(loss, Tensor::scalar(T::one()))])
    }

    /// Propagates the given output gradients back to every registered
    /// parameter. Parameters the seeds do not reach get zero gradients.
    pub fn backward(&mut self, seeds: Vec<(NodeId, Tensor<T>)>) -> Result<Vec<Tensor<T>>> {
        if self.consumed {
            return Err(Error::GraphReuse);
        }
        self.consumed = true;
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut start = 0;
        for (id, g) in seeds {
            g.expect_shape(self.value(id).shape())?;
            accumulate(&mut grads[id.0], g);
            start = start.max(id.0);
        }
        for i in (0..=start.min(self.nodes.len().saturating_sub(1))).rev() {
            let Some(g) = grads[i].take() else { continue };
            let op = self.nodes[i].op;
            match op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Relu(x) => {
                    let out = self.nodes[i].value.data();
                    let data = g.data().iter().zip(out).map(|(&d, &y)| if y > T::zero() { d } else { T::zero() }).collect();
                    let dx = Tensor::from_vec(g.shape(), data)?;
                    accumulate(&mut grads[x.0], dx);
                }
                Op::AvgPool2(x) => {
                    let [n, c, h, w] = dims4(self.value(x))?;
                    let (oh, ow) = (h / 2, w / 2);
                    let quarter = T::of(0.25);
                    let mut dx = vec![T::zero(); n * c * h * w];
                    for (p, dst) in dx.chunks_mut(h * w).enumerate() {
                        let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                        for y in 0..h {
                            for xx in 0..w {
                                dst[y * w + xx] = src[(y / 2) * ow + xx / 2] * quarter;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::from_vec(&[n, c, h, w], dx)?);
                }
                Op::Upsample { x, factor } => {
                    let [n, c, h, w] = dims4(self.value(x))?;
                    let (oh, ow) = (h * factor, w * factor);
                    let ty = taps(h, oh);
                    let tx = taps(w, ow);
                    let mut dx = vec![T::zero(); n * c * h * w];
                    for (p, dst) in dx.chunks_mut(h * w).enumerate() {
                        let src = &g.data()[p * oh * ow..(p + 1) * oh * ow];
                        for (y, &(y0, y1, fy)) in ty.iter().enumerate() {
                            let fy = T::of(fy);
                            for (xx, &(x0, x1, fx)) in tx.iter().enumerate() {
                                let fx = T::of(fx);
                                let d = src[y * ow + xx];
                                let (top, bot) = (d * (T::one() - fy), d * fy);
                                dst[y0 * w + x0] = dst[y0 * w + x0] + top * (T::one() - fx);
                                dst[y0 * w + x1] = dst[y0 * w + x1] + top * fx;
                                dst[y1 * w + x0] = dst[y1 * w + x0] + bot * (T::one() - fx);
                                dst[y1 * w + x1] = dst[y1 * w + x1] + bot * fx;
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], Tensor::from_vec(&[n, c, h, w], dx)?);
                }
                Op::Conv { x, w, b } => {
                    let (dx, dw, db) = self.conv_backward(x, w, &g)?;
                    accumulate(&mut grads[x.0], dx);
                    accumulate(&mut grads[w.0], dw);
                    accumulate(&mut grads[b.0], db);
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (self.value(a).shape()[0], self.value(a).shape()[1]);
                    let n = self.value(b).shape()[1];
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, T::one(), g.data(), false, self.value(b).data(), true, T::zero(), &mut da);
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, T::one(), self.value(a).data(), true, g.data(), false, T::zero(), &mut db);
                    accumulate(&mut grads[a.0], Tensor::from_vec(&[m, k], da)?);
                    accumulate(&mut grads[b.0], Tensor::from_vec(&[k, n], db)?);
                }
                Op::Sub { a, b } => {
                    let neg = g.data().iter().map(|&v| -v).collect();
                    let neg = Tensor::from_vec(g.shape(), neg)?;
                    accumulate(&mut grads[a.0], g);
                    accumulate(&mut grads[b.0], neg);
                }
                Op::MeanSquare(x) => {
                    let v = self.value(x);
                    let scale = g.data()[0] * T::of(2.0 / v.len().max(1) as f64);
                    let data = v.data().iter().map(|&a| a * scale).collect();
                    accumulate(&mut grads[x.0], Tensor::from_vec(v.shape(), data)?);
                }
            }
        }
        Ok(self
            .params
            .iter()
            .map(|p| grads[p.0].take().unwrap_or_else(|| Tensor::zeros(self.value(*p).shape())))
            .collect())
    }

    fn conv_backward(&self, x: NodeId, w: NodeId, g: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
        let [n, c, h, wd] = dims4(self.value(x))?;
        let ws = self.value(w).shape().to_vec();
        let (o, k) = (ws[0], ws[2]);
        let (hw, ckk) = (h * wd, c * k * k);
        let (xv, wv, gv) = (self.value(x).data(), self.value(w).data(), g.data());
        let mut dx = vec![T::zero(); n * c * hw];
        let partials: Vec<(Vec<T>, Vec<T>)> = dx
            .par_chunks_mut(c * hw)
            .enumerate()
            .map(|(i, dxi)| {
                let src = &xv[i * c * hw..(i + 1) * c * hw];
                let gi = &gv[i * o * hw..(i + 1) * o * hw];
                let mut dw = vec![T::zero(); o * ckk];
                let db: Vec<T> = gi.chunks(hw).map(|row| row.iter().copied().sum()).collect();
                if k == 1 {
                    T::gemm(o, hw, c, T::one(), gi, false, src, true, T::zero(), &mut dw);
                    T::gemm(c, o, hw, T::one(), wv, true, gi, false, T::zero(), dxi);
                } else {
                    let cols = im2col(src, c, h, wd, k);
                    T::gemm(o, hw, ckk, T::one(), gi, false, &cols, true, T::zero(), &mut dw);
                    let mut dcols = vec![T::zero(); ckk * hw];
                    T::gemm(ckk, o, hw, T::one(), wv, true, gi, false, T::zero(), &mut dcols);
                    col2im(&dcols, c, h, wd, k, dxi);
                }
                (dw, db)
            })
            .collect();
        let mut dw = vec![T::zero(); o * ckk];
        let mut db = vec![T::zero(); o];
        for (pw, pb) in partials {
            dw.iter_mut().zip(pw).for_each(|(a, b)| *a = *a + b);
            db.iter_mut().zip(pb).for_each(|(a, b)| *a = *a + b);
        }
        Ok((
            Tensor::from_vec(&[n, c, h, wd], dx)?,
            Tensor::from_vec(&ws, dw)?,
            Tensor::from_vec(&[o], db)?,
        ))
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Tensor<T>>, g: Tensor<T>) {
    match slot {
        Some(acc) => acc.add_assign(&g),
        None => *slot = Some(g),
    }
}

/// Per output coordinate: the two source indices and the weight of the second.
fn taps(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    let scale = n_in as f64 / n_out as f64;
    (0..n_out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

/// `C x H x W` to `(C k k) x (H W)` patches with zero padding.
fn im2col<T: Scalar>(src: &[T], c: usize, h: usize, w: usize, k: usize) -> Vec<T> {
    let r = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![T::zero(); c * k * k * hw];
    for ch in 0..c {
        let plane = &src[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &mut cols[((ch * k + ky) * k + kx) * hw..][..hw];
                let (dy, dx) = (ky as isize - r, kx as isize - r);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for x in x_lo..x_hi {
                        row[y * w + x] = plane[sy as usize * w + (x as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im<T: Scalar>(cols: &[T], c: usize, h: usize, w: usize, k: usize, dst: &mut [T]) {
    let r = (k / 2) as isize;
    let hw = h * w;
    for ch in 0..c {
        let plane = &mut dst[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = &cols[((ch * k + ky) * k + kx) * hw..][..hw];
                let (dy, dx) = (ky as isize - r, kx as isize - r);
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x_lo = (-dx).max(0) as usize;
                    let x_hi = (w as isize - dx).min(w as isize).max(0) as usize;
                    for x in x_lo..x_hi {
                        let d = &mut plane[sy as usize * w + (x as isize + dx) as usize];
                        *d = *d + row[y * w + x];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn det_tensor(shape: &[usize], seed: u64) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|i| ((i as u64 * 2654435761 + seed * 97) % 1000) as f64 / 500.0 - 1.0).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut g = Graph::<f64>::new();
        let x = g.input(det_tensor(&[2, 2, 4, 5], 1));
        let w = g.param(det_tensor(&[3, 2, 3, 3], 2));
        let b = g.param(det_tensor(&[3], 3));
        let y = g.conv2d(x, w, b).unwrap();
        let (xv, wv, bv, yv) = (g.value(x).data(), g.value(w).data(), g.value(b).data(), g.value(y).data());
        for n in 0..2 {
            for o in 0..3 {
                for yy in 0..4 {
                    for xx in 0..5 {
                        let mut s = bv[o];
                        for c in 0..2 {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let (sy, sx) = (yy as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                                    if (0..4).contains(&sy) && (0..5).contains(&sx) {
                                        s += wv[((o * 2 + c) * 3 + ky) * 3 + kx] * xv[((n * 2 + c) * 4 + sy as usize) * 5 + sx as usize];
                                    }
                                }
                            }
                        }
                        assert!((yv[((n * 3 + o) * 4 + yy) * 5 + xx] - s).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn linear_squared_error_closed_form() {
        let (n, d) = (6, 3);
        let xs = det_tensor(&[n, d], 4);
        let ws = det_tensor(&[d, 1], 5);
        let ys = det_tensor(&[n, 1], 6);
        let mut g = Graph::<f64>::new();
        let x = g.input(xs.clone());
        let w = g.param(ws.clone());
        let y = g.input(ys.clone());
        let p = g.matmul(x, w).unwrap();
        let r = g.sub(p, y).unwrap();
        let l = g.mean_square(r);
        let grads = g.backward_scalar(l).unwrap();
        for j in 0..d {
            let mut expect = 0.0;
            for i in 0..n {
                let pred: f64 = (0..d).map(|k| xs.data()[i * d + k] * ws.data()[k]).sum();
                expect += 2.0 * xs.data()[i * d + j] * (pred - ys.data()[i]) / n as f64;
            }
            assert!((grads[0].data()[j] - expect).abs() < 1e-10);
        }
    }

    #[test]
    fn backward_twice_is_rejected() {
        let mut g = Graph::<f64>::new();
        let w = g.param(det_tensor(&[2, 2], 1));
        let l = g.mean_square(w);
        g.backward_scalar(l).unwrap();
        assert!(matches!(g.backward_scalar(l), Err(Error::GraphReuse)));
    }

    #[test]
    fn unreached_params_get_zero_gradients() {
        let mut g = Graph::<f64>::new();
        let w = g.param(det_tensor(&[2, 2], 1));
        let unused = g.param(det_tensor(&[3], 2));
        let l = g.mean_square(w);
        let zero_seed = g.backward(vec![(l, Tensor::scalar(0.0))]).unwrap();
        assert!(zero_seed.iter().all(|t| t.data().iter().all(|&v| v == 0.0)));
        assert_eq!(zero_seed[1].shape(), g.value(unused).shape());
    }

    fn fd_check(build: impl Fn(&mut Graph<f64>, &[Tensor<f64>]) -> NodeId, params: Vec<Tensor<f64>>) {
        let mut g = Graph::new();
        let ids: Vec<Tensor<f64>> = params.clone();
        let l = build(&mut g, &ids);
        let grads = g.backward_scalar(l).unwrap();
        let eval = |ps: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let l = build(&mut g, ps);
            g.value(l).data()[0]
        };
        for (pi, p) in params.iter().enumerate() {
            for j in 0..p.len() {
                let (mut plus, mut minus) = (params.clone(), params.clone());
                plus[pi].data_mut()[j] += 1e-5;
                minus[pi].data_mut()[j] -= 1e-5;
                let fd = (eval(&plus) - eval(&minus)) / 2e-5;
                let a = grads[pi].data()[j];
                assert!((fd - a).abs() <= 1e-6 + 1e-4 * fd.abs().max(a.abs()), "param {pi}[{j}]: {fd} vs {a}");
            }
        }
    }

    #[test]
    fn conv_pool_upsample_gradients() {
        let target = det_tensor(&[2, 2, 8, 8], 9);
        fd_check(
            |g, ps| {
                let x = g.param(ps[0].clone());
                let w1 = g.param(ps[1].clone());
                let b1 = g.param(ps[2].clone());
                let w2 = g.param(ps[3].clone());
                let b2 = g.param(ps[4].clone());
                let h = g.conv2d(x, w1, b1).unwrap();
                let h = g.relu(h);
                let h = g.avg_pool2(h).unwrap();
                let h = g.conv2d(h, w2, b2).unwrap();
                let h = g.upsample_bilinear(h, 2).unwrap();
                let t = g.input(target.clone());
                let r = g.sub(h, t).unwrap();
                g.mean_square(r)
            },
            vec![
                det_tensor(&[2, 3, 8, 8], 1),
                det_tensor(&[4, 3, 3, 3], 2),
                det_tensor(&[4], 3),
                det_tensor(&[2, 4, 1, 1], 4),
                det_tensor(&[2], 5),
            ],
        );
    }

    #[test]
    fn upsample_preserves_constants() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::from_vec(&[1, 1, 2, 2], vec![3.0; 4]).unwrap());
        let y = g.upsample_bilinear(x, 8).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 16, 16]);
        assert!(g.value(y).data().iter().all(|&v| (v - 3.0).abs() < 1e-12));
    }
}
