//! Reverse-mode differentiation over a fixed operator set.
//!
//! Operations append records to a [`Tape`] as they run; once the tape is
//! finalized, [`Tape::backward`] walks the records in reverse and returns
//! the gradient of a chosen output with respect to every node and every
//! registered parameter.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU8, Ordering};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};
use crate::compositor::{paste, paste_backward};
use crate::error::{Error, Result};
use crate::heatmap::{masked_mse, masked_mse_grad};
use crate::raster::Raster;
use crate::warp::{warp_backward_with, warp_patch_with, AugParams, RotationConvention};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

/// Handle of a trainable parameter in a [`super::ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Deliberate backward-pass corruption used to confirm that the gradient
/// checks can fail.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Fault {
    None = 0,
    /// Negates the input gradient of every ReLU.
    FlipRelu = 1,
    /// Negates the weight gradient of every convolution.
    FlipConvWeight = 2,
}

static FAULT: AtomicU8 = AtomicU8::new(Fault::None as u8);

#[doc(hidden)]
pub fn inject_fault(f: Fault) {
    FAULT.store(f as u8, Ordering::SeqCst);
}

fn fault_sign(f: Fault) -> f64 {
    if FAULT.load(Ordering::Relaxed) == f as u8 {
        -1.0
    } else {
        1.0
    }
}

/// One part to be warped and pasted inside a [`Tape::composite`] record.
#[derive(Clone, Debug)]
pub struct TapePlacement {
    /// Index of the `(r, tx, ty)` group in the generator output row.
    pub group: usize,
    /// Sampled scale (not differentiated).
    pub s: f64,
    /// RGBA patch, alpha maximum 1.
    pub patch: Arc<Raster>,
}

enum Op {
    Input,
    Param(ParamId),
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
    },
    Relu(NodeId),
    MaxPool2 {
        x: NodeId,
        argmax: Vec<u32>,
    },
    GlobalAvgPool(NodeId),
    Linear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    Tanh(NodeId),
    RangeMap {
        x: NodeId,
        half: Vec<f64>,
    },
    Composite {
        base: NodeId,
        gen: NodeId,
        placements: Vec<Vec<TapePlacement>>,
        /// per sample, per placement: (image before paste, warped RGBA)
        saved: Vec<Vec<(Raster, Raster)>>,
        conv: RotationConvention,
    },
    Mse {
        pred: NodeId,
        gt: Tensor,
        mask: Vec<bool>,
    },
    Sum(NodeId),
}

struct Record {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    records: Vec<Record>,
    finalized: bool,
}

/// Result of a backward pass.
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
    visited: usize,
}

impl Gradients {
    /// Gradient of a node, `None` if the output does not depend on it.
    pub fn node(&self, n: NodeId) -> Option<&Tensor> {
        self.nodes.get(n.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Tensor> {
        &self.params
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Tensor> {
        self.params
    }

    /// Number of records the reverse sweep processed.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

/// Output columns `[lo, hi)` whose tap `kx` lands inside a row of width `w`.
fn valid_cols(kx: usize, w: usize, stride: usize, wo: usize) -> (usize, usize) {
    let lo = usize::from(kx == 0);
    let hi = ((w + 1 - kx).div_ceil(stride)).min(wo);
    (lo, hi.max(lo))
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, stride: usize, ho: usize, wo: usize, col: &mut [f64]) {
    let p = ho * wo;
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 3 + ky) * 3 + kx) * p..][..p];
                let (lo, hi) = valid_cols(kx, w, stride, wo);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    let dst = &mut row[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * w..(iy as usize + 1) * w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    let first = lo * stride + kx - 1;
                    if stride == 1 {
                        dst[lo..hi].copy_from_slice(&src[first..first + hi - lo]);
                    } else {
                        for (d, s) in dst[lo..hi].iter_mut().zip(src[first..].iter().step_by(stride)) {
                            *d = *s;
                        }
                    }
                }
            }
        }
    }
}

fn col2im(col: &[f64], c: usize, h: usize, w: usize, stride: usize, ho: usize, wo: usize, dx: &mut [f64]) {
    let p = ho * wo;
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 3 + ky) * 3 + kx) * p..][..p];
                let (lo, hi) = valid_cols(kx, w, stride, wo);
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - 1;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                    let first = lo * stride + kx - 1;
                    for (s, d) in row[oy * wo + lo..oy * wo + hi].iter().zip(dst[first..].iter_mut().step_by(stride)) {
                        *d += *s;
                    }
                }
            }
        }
    }
}

/// Output size of a 3x3, padding-1 convolution.
pub fn conv_out(len: usize, stride: usize) -> usize {
    (len - 1) / stride + 1
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn is_finalized(&self) -> bool {
        self.finalized
    }

    /// Closes the tape to further recording.
    pub fn finalize(&mut self) {
        self.finalized = true;
    }

    pub fn value(&self, n: NodeId) -> &Tensor {
        &self.records[n.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<NodeId> {
        if self.finalized {
            return Err(Error::State("tape is finalized; no further records".into()));
        }
        self.records.push(Record { value, op });
        Ok(NodeId(self.records.len() - 1))
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor) -> Result<NodeId> {
        self.push(t, Op::Input)
    }

    /// A parameter leaf whose gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, t: Tensor) -> Result<NodeId> {
        self.push(t, Op::Param(id))
    }

    /// 3x3 convolution with zero padding 1. `x: [n, ci, h, w]`,
    /// `w: [co, ci, 3, 3]`, `b: [co]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize) -> Result<NodeId> {
        let (n, ci, h, wd) = self.value(x).dims4()?;
        let (co, wci, kh, kw) = self.value(w).dims4()?;
        if wci != ci || kh != 3 || kw != 3 || self.value(b).shape != [co] || stride == 0 {
            return Err(Error::Domain(format!(
                "conv2d shape mismatch: input {:?}, weight {:?}, bias {:?}, stride {stride}",
                self.value(x).shape,
                self.value(w).shape,
                self.value(b).shape
            )));
        }
        let (ho, wo) = (conv_out(h, stride), conv_out(wd, stride));
        let (k, p) = (ci * 9, ho * wo);
        let mut out = Tensor::zeros(&[n, co, ho, wo]);
        let mut col = vec![0.0; k * p];
        {
            let xv = &self.value(x).data;
            let wv = &self.value(w).data;
            let bv = &self.value(b).data;
            for s in 0..n {
                im2col(&xv[s * ci * h * wd..(s + 1) * ci * h * wd], ci, h, wd, stride, ho, wo, &mut col);
                let o = &mut out.data[s * co * p..(s + 1) * co * p];
                for (oc, row) in o.chunks_mut(p).enumerate() {
                    row.fill(bv[oc]);
                }
                gemm(co, k, p, wv, (k as isize, 1), &col, (p as isize, 1), 1.0, o);
            }
        }
        self.push(out, Op::Conv2d { x, w, b, stride })
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
        self.push(out, Op::Relu(x))
    }

    /// 2x2 max pooling with stride 2 (odd trailing rows/columns dropped).
    /// Ties go to the first element in row-major order.
    pub fn maxpool2(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (ho, wo) = (h / 2, w / 2);
        if ho == 0 || wo == 0 {
            return Err(Error::Domain(format!("cannot pool a {h}x{w} map")));
        }
        let xv = &self.value(x).data;
        let mut out = Tensor::zeros(&[n, c, ho, wo]);
        let mut argmax = vec![0u32; out.len()];
        for plane in 0..n * c {
            let src = &xv[plane * h * w..];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = 2 * oy * w + 2 * ox;
                    for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                        let i = (2 * oy + dy) * w + 2 * ox + dx;
                        if src[i] > src[best] {
                            best = i;
                        }
                    }
                    let o = (plane * ho + oy) * wo + ox;
                    out.data[o] = src[best];
                    argmax[o] = (plane * h * w + best) as u32;
                }
            }
        }
        self.push(out, Op::MaxPool2 { x, argmax })
    }

    /// `[n, c, h, w] -> [n, c]`
    pub fn global_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let hw = h * w;
        let xv = &self.value(x).data;
        let data = (0..n * c)
            .map(|i| xv[i * hw..(i + 1) * hw].iter().sum::<f64>() / hw as f64)
            .collect();
        let out = Tensor::from_vec(&[n, c], data)?;
        self.push(out, Op::GlobalAvgPool(x))
    }

    /// `y = x w^T + b` with `x: [n, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, fin) = self.value(x).dims2()?;
        let (fout, win) = self.value(w).dims2()?;
        if win != fin || self.value(b).shape != [fout] {
            return Err(Error::Domain(format!(
                "linear shape mismatch: input {:?}, weight {:?}, bias {:?}",
                self.value(x).shape,
                self.value(w).shape,
                self.value(b).shape
            )));
        }
        let mut out = Tensor::zeros(&[n, fout]);
        for row in out.data.chunks_mut(fout) {
            row.copy_from_slice(&self.value(b).data);
        }
        gemm(
            n,
            fin,
            fout,
            &self.value(x).data,
            (fin as isize, 1),
            &self.value(w).data,
            (1, fin as isize),
            1.0,
            &mut out.data,
        );
        self.push(out, Op::Linear { x, w, b })
    }

    pub fn tanh(&mut self, x: NodeId) -> Result<NodeId> {
        let mut out = self.value(x).clone();
        for v in &mut out.data {
            *v = v.tanh();
        }
        self.push(out, Op::Tanh(x))
    }

    /// Maps `[-1, 1]` onto `[lo[j], hi[j]]` along the last axis:
    /// `y = (lo + hi) / 2 + x (hi - lo) / 2`.
    pub fn range_map(&mut self, x: NodeId, lo: &[f64], hi: &[f64]) -> Result<NodeId> {
        let f = *self.value(x).shape.last().unwrap_or(&0);
        if lo.len() != f || hi.len() != f {
            return Err(Error::Domain(format!(
                "range_map bounds have {} entries for {f} features",
                lo.len()
            )));
        }
        let half: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| (h - l) * 0.5).collect();
        let mid: Vec<f64> = lo.iter().zip(hi).map(|(l, h)| (h + l) * 0.5).collect();
        let mut out = self.value(x).clone();
        for row in out.data.chunks_mut(f) {
            for j in 0..f {
                // clamp only absorbs rounding at saturation
                row[j] = (mid[j] + half[j] * row[j]).clamp(lo[j], hi[j]);
            }
        }
        self.push(out, Op::RangeMap { x, half })
    }

    /// Warps and pastes parts onto each image of `base: [n, 3, h, w]`, in
    /// placement order. Part `p` of sample `i` uses
    /// `(p.s, gen[i, 3g], gen[i, 3g + 1], gen[i, 3g + 2])` with `g = p.group`.
    pub fn composite(
        &mut self,
        base: NodeId,
        gen: NodeId,
        placements: Vec<Vec<TapePlacement>>,
        conv: RotationConvention,
    ) -> Result<NodeId> {
        let (n, c, h, w) = self.value(base).dims4()?;
        let (gn, gf) = self.value(gen).dims2()?;
        if c != 3 || gn != n || placements.len() != n {
            return Err(Error::Domain(format!(
                "composite expects [n,3,h,w] images and [n,3G] parameters for n samples; got {:?}, {:?}, {} placement lists",
                self.value(base).shape,
                self.value(gen).shape,
                placements.len()
            )));
        }
        let img_len = 3 * h * w;
        let mut out = Tensor::zeros(&[n, 3, h, w]);
        let mut saved = Vec::with_capacity(n);
        for (i, parts) in placements.iter().enumerate() {
            let g = &self.value(gen).data[i * gf..(i + 1) * gf];
            let mut img = Raster::from_vec(w, h, 3, self.value(base).data[i * img_len..(i + 1) * img_len].to_vec());
            let mut keep = Vec::with_capacity(parts.len());
            for p in parts {
                if 3 * p.group + 2 >= gf {
                    return Err(Error::Config(format!(
                        "placement group {} exceeds the {} generator groups",
                        p.group,
                        gf / 3
                    )));
                }
                let params = AugParams::new(p.s, g[3 * p.group], g[3 * p.group + 1], g[3 * p.group + 2]);
                let warped = warp_patch_with(&p.patch, &params, (w, h), conv)?;
                let next = paste(&img, &warped)?;
                keep.push((img, warped));
                img = next;
            }
            out.data[i * img_len..(i + 1) * img_len].copy_from_slice(&img.data);
            saved.push(keep);
        }
        self.push(
            out,
            Op::Composite {
                base,
                gen,
                placements,
                saved,
                conv,
            },
        )
    }

    /// Masked mean-squared error against a constant target; `mask` has one
    /// entry per `[h, w]` map of `pred: [n, k, h, w]` (length `n * k`).
    pub fn mse(&mut self, pred: NodeId, gt: Tensor, mask: Vec<bool>) -> Result<NodeId> {
        let pv = self.value(pred);
        let (n, k, h, w) = pv.dims4()?;
        if gt.shape != pv.shape || mask.len() != n * k {
            return Err(Error::Domain(format!(
                "mse shape mismatch: pred {:?}, target {:?}, mask {}",
                pv.shape,
                gt.shape,
                mask.len()
            )));
        }
        let (loss, _) = masked_mse(&pv.data, &gt.data, h * w, &mask);
        self.push(Tensor::scalar(loss), Op::Mse { pred, gt, mask })
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.value(x).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    /// Reverse sweep from `output` seeded with `seed` (same shape as the
    /// output's value).
    pub fn backward(&self, output: NodeId, seed: &Tensor) -> Result<Gradients> {
        if !self.finalized {
            return Err(Error::State("backward called on an unfinalized tape".into()));
        }
        if output.0 >= self.records.len() {
            return Err(Error::Domain("output node is not on this tape".into()));
        }
        if seed.shape != self.value(output).shape {
            return Err(Error::Domain(format!(
                "seed shape {:?} does not match output {:?}",
                seed.shape,
                self.value(output).shape
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.records.len()).map(|_| None).collect();
        grads[output.0] = Some(seed.clone());
        let mut params: BTreeMap<ParamId, Tensor> = BTreeMap::new();
        let mut visited = 0;

        fn accum(grads: &mut [Option<Tensor>], n: NodeId, g: Tensor) {
            match &mut grads[n.0] {
                Some(t) => t.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=output.0).rev() {
            visited += 1;
            let Some(g) = grads[idx].take() else { continue };
            let rec = &self.records[idx];
            match &rec.op {
                Op::Input => {}
                Op::Param(id) => match params.get_mut(id) {
                    Some(t) => t.add_assign(&g),
                    None => {
                        params.insert(*id, g.clone());
                    }
                },
                Op::Relu(x) => {
                    let sign = fault_sign(Fault::FlipRelu);
                    let mut dx = g.clone();
                    for (d, v) in dx.data.iter_mut().zip(&rec.value.data) {
                        *d = if *v > 0.0 { *d * sign } else { 0.0 };
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::Tanh(x) => {
                    let mut dx = g.clone();
                    for (d, y) in dx.data.iter_mut().zip(&rec.value.data) {
                        *d *= 1.0 - y * y;
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::RangeMap { x, half } => {
                    let f = half.len();
                    let mut dx = g.clone();
                    for row in dx.data.chunks_mut(f) {
                        for j in 0..f {
                            row[j] *= half[j];
                        }
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::Sum(x) => {
                    let xs = &self.value(*x).shape;
                    let mut dx = Tensor::zeros(xs);
                    dx.data.fill(g.item());
                    accum(&mut grads, *x, dx);
                }
                Op::Mse { pred, gt, mask } => {
                    let pv = self.value(*pred);
                    let (_, _, h, w) = pv.dims4()?;
                    let data = masked_mse_grad(&pv.data, &gt.data, h * w, mask, g.item());
                    accum(&mut grads, *pred, Tensor::from_vec(&pv.shape, data)?);
                }
                Op::GlobalAvgPool(x) => {
                    let xs = self.value(*x).shape.clone();
                    let hw = xs[2] * xs[3];
                    let mut dx = Tensor::zeros(&xs);
                    for (i, chunk) in dx.data.chunks_mut(hw).enumerate() {
                        chunk.fill(g.data[i] / hw as f64);
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut dx = self.value(*x).zeros_like();
                    for (o, &src) in argmax.iter().enumerate() {
                        dx.data[src as usize] += g.data[o];
                    }
                    accum(&mut grads, *x, dx);
                }
                Op::Linear { x, w, b } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, fin) = xv.dims2()?;
                    let fout = wv.shape[0];
                    let mut dw = wv.zeros_like();
                    // dw = g^T x
                    gemm(fout, n, fin, &g.data, (1, fout as isize), &xv.data, (fin as isize, 1), 0.0, &mut dw.data);
                    let mut db = Tensor::zeros(&[fout]);
                    for row in g.data.chunks(fout) {
                        for (d, v) in db.data.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    let mut dx = xv.zeros_like();
                    gemm(n, fout, fin, &g.data, (fout as isize, 1), &wv.data, (fin as isize, 1), 0.0, &mut dx.data);
                    accum(&mut grads, *w, dw);
                    accum(&mut grads, *b, db);
                    accum(&mut grads, *x, dx);
                }
                Op::Conv2d { x, w, b, stride } => {
                    let xv = self.value(*x);
                    let wv = self.value(*w);
                    let (n, ci, h, wd) = xv.dims4()?;
                    let co = wv.shape[0];
                    let (_, _, ho, wo) = rec.value.dims4()?;
                    let (k, p) = (ci * 9, ho * wo);
                    let mut dw = wv.zeros_like();
                    let mut db = Tensor::zeros(&[co]);
                    let mut dx = xv.zeros_like();
                    let mut col = vec![0.0; k * p];
                    let mut dcol = vec![0.0; k * p];
                    let in_len = ci * h * wd;
                    for s in 0..n {
                        let go = &g.data[s * co * p..(s + 1) * co * p];
                        for (oc, row) in go.chunks(p).enumerate() {
                            db.data[oc] += row.iter().sum::<f64>();
                        }
                        im2col(&xv.data[s * in_len..(s + 1) * in_len], ci, h, wd, *stride, ho, wo, &mut col);
                        // dw += go col^T
                        gemm(co, p, k, go, (p as isize, 1), &col, (1, p as isize), 1.0, &mut dw.data);
                        // dcol = w^T go
                        gemm(k, co, p, &wv.data, (1, k as isize), go, (p as isize, 1), 0.0, &mut dcol);
                        col2im(&dcol, ci, h, wd, *stride, ho, wo, &mut dx.data[s * in_len..(s + 1) * in_len]);
                    }
                    dw.scale(fault_sign(Fault::FlipConvWeight));
                    accum(&mut grads, *w, dw);
                    accum(&mut grads, *b, db);
                    accum(&mut grads, *x, dx);
                }
                Op::Composite {
                    base,
                    gen,
                    placements,
                    saved,
                    conv,
                } => {
                    let (n, _, h, w) = rec.value.dims4()?;
                    let gv = self.value(*gen);
                    let gf = gv.shape[1];
                    let img_len = 3 * h * w;
                    let mut dgen = gv.zeros_like();
                    let mut dbase = self.value(*base).zeros_like();
                    for i in 0..n {
                        let mut dimg = Raster::from_vec(w, h, 3, g.data[i * img_len..(i + 1) * img_len].to_vec());
                        let row = &gv.data[i * gf..(i + 1) * gf];
                        for (p, (prev, warped)) in placements[i].iter().zip(&saved[i]).rev() {
                            let (dprev, dwarped) = paste_backward(prev, warped, &dimg)?;
                            let params =
                                AugParams::new(p.s, row[3 * p.group], row[3 * p.group + 1], row[3 * p.group + 2]);
                            let wg = warp_backward_with(&p.patch, &params, &dwarped, *conv, false)?;
                            let d = &mut dgen.data[i * gf + 3 * p.group..i * gf + 3 * p.group + 3];
                            d[0] += wg.d_params[1];
                            d[1] += wg.d_params[2];
                            d[2] += wg.d_params[3];
                            dimg = dprev;
                        }
                        dbase.data[i * img_len..(i + 1) * img_len].copy_from_slice(&dimg.data);
                    }
                    accum(&mut grads, *gen, dgen);
                    accum(&mut grads, *base, dbase);
                }
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params,
            visited,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn unfinalized_backward_is_state_error() {
        let mut t = Tape::new();
        let x = t.input(Tensor::scalar(1.0)).unwrap();
        assert!(matches!(t.backward(x, &Tensor::scalar(1.0)), Err(Error::State(_))));
        t.finalize();
        assert!(matches!(t.input(Tensor::scalar(1.0)), Err(Error::State(_))));
        assert!(t.backward(x, &Tensor::scalar(1.0)).is_ok());
    }

    #[test]
    fn linear_gradient_is_outer_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut t = Tape::new();
        let xv = rand_tensor(&[1, 4], &mut rng);
        let x = t.input(xv.clone()).unwrap();
        let w = t.param(ParamId(0), rand_tensor(&[3, 4], &mut rng)).unwrap();
        let b = t.param(ParamId(1), rand_tensor(&[3], &mut rng)).unwrap();
        let y = t.linear(x, w, b).unwrap();
        t.finalize();
        let seed = rand_tensor(&[1, 3], &mut rng);
        let g = t.backward(y, &seed).unwrap();
        let dw = g.param(ParamId(0)).unwrap();
        for o in 0..3 {
            for i in 0..4 {
                assert!((dw.data[o * 4 + i] - seed.data[o] * xv.data[i]).abs() < 1e-15);
            }
        }
        assert_eq!(g.param(ParamId(1)).unwrap().data, seed.data);
    }

    #[test]
    fn unused_parameter_has_no_gradient() {
        let mut t = Tape::new();
        let a = t.param(ParamId(0), Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, -2.0, 3.0, -4.0]).unwrap()).unwrap();
        let _unused = t.param(ParamId(1), Tensor::scalar(5.0)).unwrap();
        let r = t.relu(a).unwrap();
        let s = t.sum(r).unwrap();
        t.finalize();
        let g = t.backward(s, &Tensor::scalar(1.0)).unwrap();
        assert!(g.param(ParamId(1)).is_none());
        assert_eq!(g.param(ParamId(0)).unwrap().data, vec![1.0, 0.0, 1.0, 0.0]);
        assert_eq!(g.visited(), t.len());
    }

    #[test]
    fn maxpool_ties_take_first() {
        let mut t = Tape::new();
        let x = t.input(Tensor::from_vec(&[1, 1, 2, 2], vec![3.0, 3.0, 3.0, 3.0]).unwrap()).unwrap();
        let m = t.maxpool2(x).unwrap();
        let s = t.sum(m).unwrap();
        t.finalize();
        let g = t.backward(s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(g.node(x).unwrap().data, vec![1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xv = rand_tensor(&[2, 2, 5, 4], &mut rng);
        let wv = rand_tensor(&[3, 2, 3, 3], &mut rng);
        let bv = rand_tensor(&[3], &mut rng);
        for stride in [1, 2] {
            let mut t = Tape::new();
            let x = t.input(xv.clone()).unwrap();
            let w = t.input(wv.clone()).unwrap();
            let b = t.input(bv.clone()).unwrap();
            let y = t.conv2d(x, w, b, stride).unwrap();
            let out = t.value(y);
            let (_, _, ho, wo) = out.dims4().unwrap();
            for n in 0..2 {
                for o in 0..3 {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let mut acc = bv.data[o];
                            for c in 0..2 {
                                for ky in 0..3 {
                                    for kx in 0..3 {
                                        let iy = (oy * stride + ky) as isize - 1;
                                        let ix = (ox * stride + kx) as isize - 1;
                                        if iy < 0 || ix < 0 || iy >= 5 || ix >= 4 {
                                            continue;
                                        }
                                        acc += wv.data[((o * 2 + c) * 3 + ky) * 3 + kx]
                                            * xv.data[((n * 2 + c) * 5 + iy as usize) * 4 + ix as usize];
                                    }
                                }
                            }
                            let got = out.data[((n * 3 + o) * ho + oy) * wo + ox];
                            assert!((got - acc).abs() < 1e-12);
                        }
                    }
                }
            }
        }
    }
}
