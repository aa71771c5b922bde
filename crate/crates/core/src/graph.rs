//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] borrows the parameter store immutably while a forward pass is
//! recorded. [`Graph::backward`] may be called several times on the same tape
//! with different scalar roots, which the trainer uses to split one forward
//! pass into several update groups.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{shape_mismatch, Error, Result};
use crate::losses;
use crate::params::{ParamId, ParamStore};
use crate::synthdomain::Label;
use crate::tensor::{gemm, Real, Tensor, Transpose};

pub const NORM_EPS: f64 = 1e-5;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    b: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    oh: usize,
    ow: usize,
    stride: usize,
    pad: usize,
}

impl ConvGeom {
    fn patches(&self) -> usize {
        self.oh * self.ow
    }
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }
    /// Output columns `[lo, hi)` whose input column for kernel offset `kj`
    /// lies inside the image.
    #[inline]
    fn valid_cols(&self, kj: usize) -> (usize, usize) {
        let lo = if self.pad > kj {
            (self.pad - kj).div_ceil(self.stride)
        } else {
            0
        };
        let hi = if self.w + self.pad > kj {
            ((self.w - 1 + self.pad - kj) / self.stride + 1).min(self.ow)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

enum Op<T> {
    Input,
    Param(ParamId),
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Option<Vec<T>>,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    LeakyRelu {
        x: Var,
        slope: T,
    },
    Tanh(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Affine {
        x: Var,
        scale: T,
    },
    ConcatChannels(Var, Var),
    ConcatBatch(Vec<Var>),
    SliceBatch {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    Upsample {
        x: Var,
        factor: usize,
    },
    GlobalAvgPool(Var),
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    L1 {
        a: Var,
        b: Var,
    },
    MeanLog(Var),
    MeanLogComplement(Var),
    CrossEntropy {
        logits: Var,
        onehot: Tensor<T>,
    },
    CueL1 {
        cue: Var,
        labels: Vec<Label>,
    },
    Triplet {
        emb: Var,
        labels: Vec<Label>,
        margin: T,
    },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients produced by one backward pass.
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: BTreeMap<ParamId, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn of(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|v| self.nodes[v.0].as_ref())
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params
            .iter()
            .filter_map(|(id, v)| self.nodes[v.0].as_ref().map(|t| (*id, t)))
    }
}

/// Pending running-statistic updates recorded by batch-norm layers in training mode.
pub type BufferUpdates<T> = Vec<(ParamId, Tensor<T>)>;

pub struct Graph<'s, T: Real> {
    store: &'s ParamStore<T>,
    nodes: Vec<Node<T>>,
    param_vars: BTreeMap<ParamId, Var>,
    training: bool,
    buffer_updates: BufferUpdates<T>,
    frozen: BTreeSet<ParamId>,
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

/// Unfold `x` into a `[c*k*k, b*oh*ow]` patch matrix.
fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let mut cols = Vec::with_capacity(g.rows() * g.b * g.patches());
    let zeros = |cols: &mut Vec<T>, n: usize| cols.extend(core::iter::repeat_n(T::ZERO, n));
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let (lo, hi) = g.valid_cols(kj);
                for bi in 0..g.b {
                    let plane = &x[(bi * g.c + ci) * g.h * g.w..(bi * g.c + ci + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize || lo == hi {
                            zeros(&mut cols, g.ow);
                            continue;
                        }
                        let src = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        zeros(&mut cols, lo);
                        let start = lo * g.stride + kj - g.pad;
                        if g.stride == 1 {
                            cols.extend_from_slice(&src[start..start + hi - lo]);
                        } else {
                            cols.extend(src[start..].iter().step_by(g.stride).take(hi - lo).copied());
                        }
                        zeros(&mut cols, g.ow - hi);
                    }
                }
            }
        }
    }
    cols
}

/// Fold a patch-matrix gradient back onto the input, accumulating into `dx`.
fn col2im<T: Real>(cols: &[T], g: &ConvGeom, dx: &mut [T]) {
    let p = g.patches();
    let ncol = g.b * p;
    for ci in 0..g.c {
        for ki in 0..g.k {
            for kj in 0..g.k {
                let r = (ci * g.k + ki) * g.k + kj;
                let row = &cols[r * ncol..(r + 1) * ncol];
                let (lo, hi) = g.valid_cols(kj);
                if lo == hi {
                    continue;
                }
                let start = lo * g.stride + kj - g.pad;
                for bi in 0..g.b {
                    let plane = &mut dx[(bi * g.c + ci) * g.h * g.w..(bi * g.c + ci + 1) * g.h * g.w];
                    for oy in 0..g.oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src = &row[bi * p + oy * g.ow + lo..bi * p + oy * g.ow + hi];
                        let dst = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                        if g.stride == 1 {
                            for (d, s) in dst[start..start + hi - lo].iter_mut().zip(src) {
                                *d += *s;
                            }
                        } else {
                            for (d, s) in dst[start..].iter_mut().step_by(g.stride).zip(src) {
                                *d += *s;
                            }
                        }
                    }
                }
            }
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

impl<'s, T: Real> Graph<'s, T> {
    /// New tape in training mode (batch norm uses batch statistics).
    pub fn new(store: &'s ParamStore<T>) -> Self {
        Self {
            store,
            nodes: Vec::new(),
            param_vars: BTreeMap::new(),
            training: true,
            buffer_updates: Vec::new(),
            frozen: BTreeSet::new(),
        }
    }

    /// New tape in evaluation mode (batch norm uses running statistics).
    pub fn eval(store: &'s ParamStore<T>) -> Self {
        let mut g = Self::new(store);
        g.training = false;
        g
    }

    pub fn is_training(&self) -> bool {
        self.training
    }

    pub fn store(&self) -> &'s ParamStore<T> {
        self.store
    }

    /// Running-statistic updates to apply to the store once the tape is dropped.
    pub fn take_buffer_updates(&mut self) -> BufferUpdates<T> {
        core::mem::take(&mut self.buffer_updates)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match (&self.nodes[v.0].value, &self.nodes[v.0].op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            (None, _) => unreachable!("non-parameter node without a value"),
        }
    }

    /// Constant leaf; never receives gradient.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, false)
    }

    /// Leaf that receives gradient (used to differentiate with respect to data).
    pub fn input_with_grad(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input, true)
    }

    /// Detached copy of an existing node's value.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.input(t)
    }

    /// Treat these parameters as constants on this tape. Must be called before
    /// the parameters are first used.
    pub fn freeze(&mut self, ids: impl IntoIterator<Item = ParamId>) {
        self.frozen.extend(ids);
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars.get(&id) {
            return *v;
        }
        let trainable = self.store.entry(id).trainable && !self.frozen.contains(&id);
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            requires_grad: trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let (bn, c, h, wd) = self.value(x).dims4()?;
        let (o, ci, kh, kw) = self.value(w).dims4()?;
        if ci != c || kh != kw {
            return Err(shape_mismatch("conv2d weight", &[o, c, kh, kh], self.value(w).shape()));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw || stride == 0 {
            return Err(Error::InvalidArgument(alloc::format!(
                "conv2d kernel {}x{} does not fit input {}x{} with padding {}",
                kh,
                kw,
                h,
                wd,
                pad
            )));
        }
        let geom = ConvGeom {
            b: bn,
            c,
            h,
            w: wd,
            o,
            k: kh,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (wd + 2 * pad - kw) / stride + 1,
            stride,
            pad,
        };
        let p = geom.patches();
        let ncol = bn * p;
        let cols = im2col(self.value(x).data(), &geom);
        let mut out_mat = vec![T::ZERO; o * ncol];
        gemm(
            o,
            geom.rows(),
            ncol,
            T::ONE,
            self.value(w).data(),
            Transpose::No,
            &cols,
            Transpose::No,
            T::ZERO,
            &mut out_mat,
        );
        let mut out = vec![T::ZERO; bn * o * p];
        let bias = b.map(|bv| self.value(bv).data().to_vec());
        for oc in 0..o {
            let bval = bias.as_ref().map_or(T::ZERO, |bb| bb[oc]);
            for bi in 0..bn {
                let src = &out_mat[oc * ncol + bi * p..oc * ncol + (bi + 1) * p];
                let dst = &mut out[(bi * o + oc) * p..(bi * o + oc + 1) * p];
                for (d, &s) in dst.iter_mut().zip(src) {
                    *d = s + bval;
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|bv| self.rg(bv));
        let value = Tensor::new(&[bn, o, geom.oh, geom.ow], out)?;
        Ok(self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols: if rg { Some(cols) } else { None },
            },
            rg,
        ))
    }

    fn channel_params(&self, gamma: Var, beta: Var, c: usize) -> Result<(Vec<T>, Vec<T>)> {
        let g = self.value(gamma).data().to_vec();
        let bt = self.value(beta).data().to_vec();
        if g.len() != c || bt.len() != c {
            return Err(shape_mismatch("normalization affine", &[c], self.value(gamma).shape()));
        }
        Ok((g, bt))
    }

    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let (g, bt) = self.channel_params(gamma, beta, c)?;
        let n = h * w;
        let xv = self.value(x).data();
        let mut xhat = vec![T::ZERO; xv.len()];
        let mut out = vec![T::ZERO; xv.len()];
        let mut inv_std = vec![T::ZERO; b * c];
        let nf = T::from_f64(n as f64);
        let eps = T::from_f64(NORM_EPS);
        for plane in 0..b * c {
            let ch = plane % c;
            let src = &xv[plane * n..(plane + 1) * n];
            let mean = src.iter().fold(T::ZERO, |a, &v| a + v) / nf;
            let var = src.iter().fold(T::ZERO, |a, &v| a + (v - mean) * (v - mean)) / nf;
            let is = T::ONE / (var + eps).sqrt();
            inv_std[plane] = is;
            for i in 0..n {
                let xh = (src[i] - mean) * is;
                xhat[plane * n + i] = xh;
                out[plane * n + i] = g[ch] * xh + bt[ch];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new(&[b, c, h, w], out)?;
        Ok(self.push(
            value,
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Batch normalisation. In training mode the batch statistics are used and
    /// running statistics updates are queued; in eval mode the running
    /// statistics stored under `running_mean` / `running_var` are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: ParamId,
        running_var: ParamId,
        momentum: f64,
    ) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let (g, bt) = self.channel_params(gamma, beta, c)?;
        let hw = h * w;
        let n = b * hw;
        let eps = T::from_f64(NORM_EPS);
        let xv = self.value(x).data();
        let mut mean = vec![T::ZERO; c];
        let mut var = vec![T::ZERO; c];
        let mut pending = Vec::new();
        if self.training {
            let nf = T::from_f64(n as f64);
            for ch in 0..c {
                let mut s = T::ZERO;
                for bi in 0..b {
                    s += xv[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]
                        .iter()
                        .fold(T::ZERO, |a, &v| a + v);
                }
                mean[ch] = s / nf;
                let mut q = T::ZERO;
                for bi in 0..b {
                    q += xv[(bi * c + ch) * hw..(bi * c + ch + 1) * hw]
                        .iter()
                        .fold(T::ZERO, |a, &v| a + (v - mean[ch]) * (v - mean[ch]));
                }
                var[ch] = q / nf;
            }
            let rm = self.store.get(running_mean);
            let rv = self.store.get(running_var);
            let mom = T::from_f64(momentum);
            let unbias = if n > 1 {
                T::from_f64(n as f64 / (n as f64 - 1.0))
            } else {
                T::ONE
            };
            let new_rm: Vec<T> = (0..c)
                .map(|ch| (T::ONE - mom) * rm.data()[ch] + mom * mean[ch])
                .collect();
            let new_rv: Vec<T> = (0..c)
                .map(|ch| (T::ONE - mom) * rv.data()[ch] + mom * var[ch] * unbias)
                .collect();
            pending.push((running_mean, Tensor::new(&[c], new_rm)?));
            pending.push((running_var, Tensor::new(&[c], new_rv)?));
        } else {
            mean.copy_from_slice(self.store.get(running_mean).data());
            var.copy_from_slice(self.store.get(running_var).data());
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let mut xhat = vec![T::ZERO; xv.len()];
        let mut out = vec![T::ZERO; xv.len()];
        for bi in 0..b {
            for ch in 0..c {
                let base = (bi * c + ch) * hw;
                for i in base..base + hw {
                    let xh = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        self.buffer_updates.extend(pending);
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let value = Tensor::new(&[b, c, h, w], out)?;
        let op = if self.training {
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            }
        } else {
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            }
        };
        Ok(self.push(value, op, rg))
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::from_f64(slope);
        let value = self.value(x).map(|v| if v > T::ZERO { v } else { v * s });
        let rg = self.rg(x);
        self.push(value, Op::LeakyRelu { x, slope: s }, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.tanh());
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    fn same_shape(&self, a: Var, b: Var, context: &'static str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(shape_mismatch(context, self.value(a).shape(), self.value(b).shape()));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut value = self.value(a).clone();
        value.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let bv = self.value(b).data();
        let mut value = self.value(a).clone();
        for (x, &y) in value.data_mut().iter_mut().zip(bv) {
            *x -= y;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, t) = (T::from_f64(scale), T::from_f64(shift));
        let value = self.value(x).map(|v| s * v + t);
        let rg = self.rg(x);
        self.push(value, Op::Affine { x, scale: s }, rg)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ba, ca, ha, wa) = self.value(a).dims4()?;
        let (bb, cb, hb, wb) = self.value(b).dims4()?;
        if ba != bb || ha != hb || wa != wb {
            return Err(shape_mismatch(
                "concat_channels",
                self.value(a).shape(),
                self.value(b).shape(),
            ));
        }
        let hw = ha * wa;
        let mut out = Vec::with_capacity(ba * (ca + cb) * hw);
        for bi in 0..ba {
            out.extend_from_slice(&self.value(a).data()[bi * ca * hw..(bi + 1) * ca * hw]);
            out.extend_from_slice(&self.value(b).data()[bi * cb * hw..(bi + 1) * cb * hw]);
        }
        let rg = self.rg(a) || self.rg(b);
        let value = Tensor::new(&[ba, ca + cb, ha, wa], out)?;
        Ok(self.push(value, Op::ConcatChannels(a, b), rg))
    }

    pub fn concat_batch(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&v| self.value(v)).collect();
        let value = Tensor::concat_batch(&tensors)?;
        let rg = parts.iter().any(|&v| self.rg(v));
        Ok(self.push(value, Op::ConcatBatch(parts.to_vec()), rg))
    }

    pub fn slice_batch(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice_batch(start, len)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SliceBatch { x, start }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.value(x).data();
        let mut out = vec![T::ZERO; b * c * oh * ow];
        for plane in 0..b * c {
            let src = &xv[plane * h * w..(plane + 1) * h * w];
            let dst = &mut out[plane * oh * ow..(plane + 1) * oh * ow];
            for oy in 0..oh {
                let srow = &src[(oy / factor) * w..(oy / factor + 1) * w];
                for ox in 0..ow {
                    dst[oy * ow + ox] = srow[ox / factor];
                }
            }
        }
        let rg = self.rg(x);
        let value = Tensor::new(&[b, c, oh, ow], out)?;
        Ok(self.push(value, Op::Upsample { x, factor }, rg))
    }

    /// `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = self.value(x).dims4()?;
        let n = T::from_f64((h * w) as f64);
        let out = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().fold(T::ZERO, |a, &v| a + v) / n)
            .collect();
        let rg = self.rg(x);
        let value = Tensor::new(&[b, c], out)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// `x [B, F] * w[O, F]^T + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (bn, f) = match *self.value(x).shape() {
            [bn, f] => (bn, f),
            _ => return Err(shape_mismatch("linear input", &[0, 0], self.value(x).shape())),
        };
        let o = match *self.value(w).shape() {
            [o, fw] if fw == f => o,
            _ => return Err(shape_mismatch("linear weight", &[0, f], self.value(w).shape())),
        };
        let mut out = vec![T::ZERO; bn * o];
        for row in out.chunks_mut(o) {
            row.copy_from_slice(self.value(b).data());
        }
        gemm(
            bn,
            f,
            o,
            T::ONE,
            self.value(x).data(),
            Transpose::No,
            self.value(w).data(),
            Transpose::Yes,
            T::ONE,
            &mut out,
        );
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let value = Tensor::new(&[bn, o], out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, rg))
    }

    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = losses::l1_reconstruction(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::scalar(v), Op::L1 { a, b }, rg))
    }

    pub fn mean_log(&mut self, p: Var) -> Result<Var> {
        let v = losses::mean_log(self.value(p).data())?;
        let rg = self.rg(p);
        Ok(self.push(Tensor::scalar(v), Op::MeanLog(p), rg))
    }

    pub fn mean_log_complement(&mut self, p: Var) -> Result<Var> {
        let v = losses::mean_log_complement(self.value(p).data())?;
        let rg = self.rg(p);
        Ok(self.push(Tensor::scalar(v), Op::MeanLogComplement(p), rg))
    }

    pub fn cross_entropy(&mut self, logits: Var, labels: &[Label]) -> Result<Var> {
        let onehot = losses::one_hot::<T>(labels);
        let v = losses::source_cls_loss(self.value(logits), &onehot)?;
        let rg = self.rg(logits);
        Ok(self.push(Tensor::scalar(v), Op::CrossEntropy { logits, onehot }, rg))
    }

    pub fn cue_l1(&mut self, cue: Var, labels: &[Label]) -> Result<Var> {
        let v = losses::spoof_cue_loss(self.value(cue), labels)?;
        let rg = self.rg(cue);
        Ok(self.push(
            Tensor::scalar(v),
            Op::CueL1 {
                cue,
                labels: labels.to_vec(),
            },
            rg,
        ))
    }

    pub fn triplet(&mut self, emb: Var, labels: &[Label], margin: f64) -> Result<Var> {
        let m = T::from_f64(margin);
        let v = losses::triplet_loss(self.value(emb), labels, m)?;
        let rg = self.rg(emb);
        Ok(self.push(
            Tensor::scalar(v),
            Op::Triplet {
                emb,
                labels: labels.to_vec(),
                margin: m,
            },
            rg,
        ))
    }

    /// `sum_i w_i * x_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc = T::ZERO;
        for &(v, w) in terms {
            if self.value(v).numel() != 1 {
                return Err(shape_mismatch("weighted_sum", &[], self.value(v).shape()));
            }
            acc += T::from_f64(w) * self.value(v).item();
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        let ts = terms.iter().map(|&(v, w)| (v, T::from_f64(w))).collect();
        Ok(self.push(Tensor::scalar(acc), Op::WeightedSum(ts), rg))
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v).item()
    }

    /// Gradients of the scalar `root` with respect to every node that requires them.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        if self.value(root).numel() != 1 {
            return Err(shape_mismatch("backward root", &[], self.value(root).shape()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.value(root).shape(), T::ONE));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backward_node(i, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        Ok(Gradients {
            nodes: grads,
            params: self.param_vars.clone(),
        })
    }

    fn backward_node(&self, i: usize, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = self.value(Var(i));
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let g = geom;
                let p = g.patches();
                let ncol = g.b * p;
                let mut dy_mat = vec![T::ZERO; g.o * ncol];
                for bi in 0..g.b {
                    for oc in 0..g.o {
                        dy_mat[oc * ncol + bi * p..oc * ncol + (bi + 1) * p]
                            .copy_from_slice(&dy.data()[(bi * g.o + oc) * p..(bi * g.o + oc + 1) * p]);
                    }
                }
                let cols = cols.as_ref().expect("conv cols kept when gradient is required");
                if self.rg(*w) {
                    let mut dw = vec![T::ZERO; g.o * g.rows()];
                    gemm(
                        g.o,
                        ncol,
                        g.rows(),
                        T::ONE,
                        &dy_mat,
                        Transpose::No,
                        cols,
                        Transpose::Yes,
                        T::ZERO,
                        &mut dw,
                    );
                    accumulate(grads, *w, Tensor::new(self.value(*w).shape(), dw)?);
                }
                if let Some(bv) = b {
                    if self.rg(*bv) {
                        let db = dy_mat
                            .chunks(ncol)
                            .map(|r| r.iter().fold(T::ZERO, |a, &v| a + v))
                            .collect();
                        accumulate(grads, *bv, Tensor::new(&[g.o], db)?);
                    }
                }
                if self.rg(*x) {
                    let mut dcols = vec![T::ZERO; g.rows() * ncol];
                    gemm(
                        g.rows(),
                        g.o,
                        ncol,
                        T::ONE,
                        self.value(*w).data(),
                        Transpose::Yes,
                        &dy_mat,
                        Transpose::No,
                        T::ZERO,
                        &mut dcols,
                    );
                    let mut dx = vec![T::ZERO; g.b * g.c * g.h * g.w];
                    col2im(&dcols, g, &mut dx);
                    accumulate(grads, *x, Tensor::new(&[g.b, g.c, g.h, g.w], dx)?);
                }
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (b, c, h, w) = out.dims4()?;
                let n = h * w;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                let mut dx = vec![T::ZERO; b * c * n];
                let nf = T::from_f64(n as f64);
                for plane in 0..b * c {
                    let ch = plane % c;
                    let r = plane * n..(plane + 1) * n;
                    let dyp = &dy.data()[r.clone()];
                    let xh = &xhat[r.clone()];
                    let mut s1 = T::ZERO;
                    let mut s2 = T::ZERO;
                    for k in 0..n {
                        dgamma[ch] += dyp[k] * xh[k];
                        dbeta[ch] += dyp[k];
                        let dxh = dyp[k] * gv[ch];
                        s1 += dxh;
                        s2 += dxh * xh[k];
                    }
                    let scale = inv_std[plane] / nf;
                    for k in 0..n {
                        let dxh = dyp[k] * gv[ch];
                        dx[plane * n + k] = scale * (nf * dxh - s1 - xh[k] * s2);
                    }
                }
                if self.rg(*x) {
                    accumulate(grads, *x, Tensor::new(&[b, c, h, w], dx)?);
                }
                if self.rg(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(&[c], dgamma)?);
                }
                if self.rg(*beta) {
                    accumulate(grads, *beta, Tensor::new(&[c], dbeta)?);
                }
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (b, c, h, w) = out.dims4()?;
                let hw = h * w;
                let nf = T::from_f64((b * hw) as f64);
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                let mut s1 = vec![T::ZERO; c];
                let mut s2 = vec![T::ZERO; c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for k in base..base + hw {
                            dgamma[ch] += dy.data()[k] * xhat[k];
                            dbeta[ch] += dy.data()[k];
                            let dxh = dy.data()[k] * gv[ch];
                            s1[ch] += dxh;
                            s2[ch] += dxh * xhat[k];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![T::ZERO; b * c * hw];
                    for bi in 0..b {
                        for ch in 0..c {
                            let base = (bi * c + ch) * hw;
                            let scale = inv_std[ch] / nf;
                            for k in base..base + hw {
                                let dxh = dy.data()[k] * gv[ch];
                                dx[k] = scale * (nf * dxh - s1[ch] - xhat[k] * s2[ch]);
                            }
                        }
                    }
                    accumulate(grads, *x, Tensor::new(&[b, c, h, w], dx)?);
                }
                if self.rg(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(&[c], dgamma)?);
                }
                if self.rg(*beta) {
                    accumulate(grads, *beta, Tensor::new(&[c], dbeta)?);
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (b, c, h, w) = out.dims4()?;
                let hw = h * w;
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![T::ZERO; c];
                let mut dbeta = vec![T::ZERO; c];
                let mut dx = vec![T::ZERO; b * c * hw];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * hw;
                        for k in base..base + hw {
                            dgamma[ch] += dy.data()[k] * xhat[k];
                            dbeta[ch] += dy.data()[k];
                            dx[k] = dy.data()[k] * gv[ch] * inv_std[ch];
                        }
                    }
                }
                if self.rg(*x) {
                    accumulate(grads, *x, Tensor::new(&[b, c, h, w], dx)?);
                }
                if self.rg(*gamma) {
                    accumulate(grads, *gamma, Tensor::new(&[c], dgamma)?);
                }
                if self.rg(*beta) {
                    accumulate(grads, *beta, Tensor::new(&[c], dbeta)?);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let data = dy
                    .data()
                    .iter()
                    .zip(xv)
                    .map(|(&d, &v)| if v > T::ZERO { d } else { d * *slope })
                    .collect();
                accumulate(grads, *x, Tensor::new(dy.shape(), data)?);
            }
            Op::Tanh(x) => {
                let data = dy
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&d, &y)| d * (T::ONE - y * y))
                    .collect();
                accumulate(grads, *x, Tensor::new(dy.shape(), data)?);
            }
            Op::Sigmoid(x) => {
                let data = dy
                    .data()
                    .iter()
                    .zip(out.data())
                    .map(|(&d, &y)| d * y * (T::ONE - y))
                    .collect();
                accumulate(grads, *x, Tensor::new(dy.shape(), data)?);
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, dy.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.rg(*b) {
                    accumulate(grads, *b, dy.map(|v| -v));
                }
            }
            Op::Affine { x, scale } => {
                let s = *scale;
                accumulate(grads, *x, dy.map(|v| v * s));
            }
            Op::ConcatChannels(a, b) => {
                let (bn, ca, h, w) = self.value(*a).dims4()?;
                let cb = self.value(*b).shape()[1];
                let hw = h * w;
                let mut da = Vec::with_capacity(bn * ca * hw);
                let mut db = Vec::with_capacity(bn * cb * hw);
                for bi in 0..bn {
                    let base = bi * (ca + cb) * hw;
                    da.extend_from_slice(&dy.data()[base..base + ca * hw]);
                    db.extend_from_slice(&dy.data()[base + ca * hw..base + (ca + cb) * hw]);
                }
                if self.rg(*a) {
                    accumulate(grads, *a, Tensor::new(self.value(*a).shape(), da)?);
                }
                if self.rg(*b) {
                    accumulate(grads, *b, Tensor::new(self.value(*b).shape(), db)?);
                }
            }
            Op::ConcatBatch(parts) => {
                let mut start = 0;
                for p in parts {
                    let len = self.value(*p).shape()[0];
                    if self.rg(*p) {
                        accumulate(grads, *p, dy.slice_batch(start, len)?);
                    }
                    start += len;
                }
            }
            Op::SliceBatch { x, start } => {
                let xs = self.value(*x);
                let mut dx = Tensor::zeros(xs.shape());
                let per = xs.item_len();
                dx.data_mut()[start * per..start * per + dy.numel()].copy_from_slice(dy.data());
                accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, dy.clone().reshape(self.value(*x).shape())?);
            }
            Op::Upsample { x, factor } => {
                let (b, c, h, w) = self.value(*x).dims4()?;
                let (oh, ow) = (h * factor, w * factor);
                let mut dx = vec![T::ZERO; b * c * h * w];
                for plane in 0..b * c {
                    let src = &dy.data()[plane * oh * ow..(plane + 1) * oh * ow];
                    let dst = &mut dx[plane * h * w..(plane + 1) * h * w];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            dst[(oy / factor) * w + ox / factor] += src[oy * ow + ox];
                        }
                    }
                }
                accumulate(grads, *x, Tensor::new(&[b, c, h, w], dx)?);
            }
            Op::GlobalAvgPool(x) => {
                let (b, c, h, w) = self.value(*x).dims4()?;
                let n = T::from_f64((h * w) as f64);
                let mut dx = Vec::with_capacity(b * c * h * w);
                for &d in dy.data() {
                    let v = d / n;
                    dx.extend(core::iter::repeat_n(v, h * w));
                }
                accumulate(grads, *x, Tensor::new(&[b, c, h, w], dx)?);
            }
            Op::Linear { x, w, b } => {
                let (bn, f) = (self.value(*x).shape()[0], self.value(*x).shape()[1]);
                let o = self.value(*w).shape()[0];
                if self.rg(*x) {
                    let mut dx = vec![T::ZERO; bn * f];
                    gemm(
                        bn,
                        o,
                        f,
                        T::ONE,
                        dy.data(),
                        Transpose::No,
                        self.value(*w).data(),
                        Transpose::No,
                        T::ZERO,
                        &mut dx,
                    );
                    accumulate(grads, *x, Tensor::new(&[bn, f], dx)?);
                }
                if self.rg(*w) {
                    let mut dw = vec![T::ZERO; o * f];
                    gemm(
                        o,
                        bn,
                        f,
                        T::ONE,
                        dy.data(),
                        Transpose::Yes,
                        self.value(*x).data(),
                        Transpose::No,
                        T::ZERO,
                        &mut dw,
                    );
                    accumulate(grads, *w, Tensor::new(&[o, f], dw)?);
                }
                if self.rg(*b) {
                    let mut db = vec![T::ZERO; o];
                    for row in dy.data().chunks(o) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *b, Tensor::new(&[o], db)?);
                }
            }
            Op::L1 { a, b } => {
                let s = dy.item();
                let ga = losses::l1_reconstruction_grad(self.value(*a), self.value(*b)).map(|v| v * s);
                if self.rg(*b) {
                    accumulate(grads, *b, ga.map(|v| -v));
                }
                if self.rg(*a) {
                    accumulate(grads, *a, ga);
                }
            }
            Op::MeanLog(p) => {
                let s = dy.item();
                let g = losses::mean_log_grad(self.value(*p).data())
                    .into_iter()
                    .map(|v| v * s)
                    .collect();
                accumulate(grads, *p, Tensor::new(self.value(*p).shape(), g)?);
            }
            Op::MeanLogComplement(p) => {
                let s = dy.item();
                let g = losses::mean_log_complement_grad(self.value(*p).data())
                    .into_iter()
                    .map(|v| v * s)
                    .collect();
                accumulate(grads, *p, Tensor::new(self.value(*p).shape(), g)?);
            }
            Op::CrossEntropy { logits, onehot } => {
                let s = dy.item();
                let g = losses::source_cls_grad(self.value(*logits), onehot).map(|v| v * s);
                accumulate(grads, *logits, g);
            }
            Op::CueL1 { cue, labels } => {
                let s = dy.item();
                let g = losses::spoof_cue_grad(self.value(*cue), labels).map(|v| v * s);
                accumulate(grads, *cue, g);
            }
            Op::Triplet {
                emb,
                labels,
                margin,
            } => {
                let s = dy.item();
                let g = losses::triplet_grad(self.value(*emb), labels, *margin).map(|v| v * s);
                accumulate(grads, *emb, g);
            }
            Op::WeightedSum(terms) => {
                let s = dy.item();
                for &(v, w) in terms {
                    if self.rg(v) {
                        accumulate(grads, v, Tensor::full(self.value(v).shape(), s * w));
                    }
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::string::ToString;

    /// Central finite differences of `f` against the tape gradient of every
    /// entry of one input.
    fn check_input_grad(
        store: &ParamStore<f64>,
        shape: &[usize],
        seed: u64,
        build: impl Fn(&mut Graph<'_, f64>, Var) -> Var,
    ) {
        let n: usize = shape.iter().product();
        let mut s = seed;
        let data: Vec<f64> = (0..n)
            .map(|_| {
                s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                ((s >> 11) as f64 / (1u64 << 53) as f64) * 2.0 - 1.0
            })
            .collect();
        let x = Tensor::new(shape, data.clone()).unwrap();
        let mut g = Graph::new(store);
        let xv = g.input_with_grad(x);
        let y = build(&mut g, xv);
        let grads = g.backward(y).unwrap();
        let analytic = grads.of(xv).unwrap().clone();
        let h = 1e-6;
        for i in 0..n {
            let eval = |delta: f64| {
                let mut d = data.clone();
                d[i] += delta;
                let mut g = Graph::new(store);
                let xv = g.input_with_grad(Tensor::new(shape, d).unwrap());
                let y = build(&mut g, xv);
                g.scalar(y)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + fd.abs().max(a.abs())),
                "entry {}: fd {} vs analytic {}",
                i,
                fd,
                a
            );
        }
    }

    /// Mean of `|y - t|` against targets of mixed sign far from `y`, so each
    /// output entry contributes a gradient of `+-1/n` (a plain sum would hide
    /// errors in normalisation layers, whose outputs sum to a constant).
    fn weighted_reduce(g: &mut Graph<'_, f64>, y: Var) -> Var {
        let shape = g.value(y).shape().to_vec();
        let n: usize = shape.iter().product();
        let t = Tensor::new(
            &shape,
            (0..n).map(|i| if (i * 7) % 5 < 2 { 10.0 } else { -10.0 }).collect(),
        )
        .unwrap();
        let tv = g.input(t);
        g.l1(y, tv).unwrap()
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let mut store = ParamStore::<f64>::new();
        let wid = store.add("w".to_string(), Tensor::new(&[2, 3, 3, 3], (0..54).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap(), true);
        let bid = store.add("b".to_string(), Tensor::new(&[2], vec![0.1, -0.2]).unwrap(), true);
        let build = |g: &mut Graph<'_, f64>, x: Var| {
            let w = g.param(wid);
            let b = g.param(bid);
            let y = g.conv2d(x, w, Some(b), 2, 1).unwrap();
            let y = g.tanh(y);
            weighted_reduce(g, y)
        };
        let shape = [2, 3, 5, 5];
        // input gradient
        let store_ref = &store;
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| (i as f64 * 0.13).cos()).collect();
        let mut g = Graph::new(store_ref);
        let xv = g.input_with_grad(Tensor::new(&shape, data.clone()).unwrap());
        let y = build(&mut g, xv);
        let grads = g.backward(y).unwrap();
        let h = 1e-6;
        for i in (0..n).step_by(7) {
            let eval = |delta: f64| {
                let mut d = data.clone();
                d[i] += delta;
                let mut g = Graph::new(store_ref);
                let xv = g.input(Tensor::new(&shape, d).unwrap());
                let y = build(&mut g, xv);
                g.scalar(y)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = grads.of(xv).unwrap().data()[i];
            assert!((fd - a).abs() < 1e-7, "x[{}]: {} vs {}", i, fd, a);
        }
        // weight gradient
        for (pid, len) in [(wid, 54usize), (bid, 2)] {
            let ga = grads.param(pid).unwrap().clone();
            for i in 0..len {
                let eval = |delta: f64| {
                    let mut st = store.clone();
                    st.get_mut(pid).data_mut()[i] += delta;
                    let mut g = Graph::new(&st);
                    let xv = g.input(Tensor::new(&shape, data.clone()).unwrap());
                    let y = build(&mut g, xv);
                    g.scalar(y)
                };
                let fd = (eval(h) - eval(-h)) / (2.0 * h);
                assert!((fd - ga.data()[i]).abs() < 1e-7, "param {:?}[{}]", pid, i);
            }
        }
    }

    #[test]
    fn instance_norm_gradient() {
        let mut store = ParamStore::<f64>::new();
        let gid = store.add("g".to_string(), Tensor::new(&[2], vec![1.3, 0.7]).unwrap(), true);
        let bid = store.add("b".to_string(), Tensor::new(&[2], vec![0.1, -0.4]).unwrap(), true);
        check_input_grad(&store, &[2, 2, 3, 3], 3, |g, x| {
            let gm = g.param(gid);
            let bt = g.param(bid);
            let y = g.instance_norm(x, gm, bt).unwrap();
            weighted_reduce(g, y)
        });
    }

    #[test]
    fn elementwise_and_structural_gradients() {
        check_input_grad(&ParamStore::new(), &[2, 2, 2, 2], 5, |g, x| {
            let a = g.leaky_relu(x, 0.2);
            let b = g.sigmoid(x);
            let c = g.concat_channels(a, b).unwrap();
            let u = g.upsample_nearest(c, 2).unwrap();
            let p = g.global_avg_pool(u).unwrap();
            let s = g.slice_batch(p, 1, 1).unwrap();
            let t = g.slice_batch(p, 0, 1).unwrap();
            let cat = g.concat_batch(&[s, t]).unwrap();
            let r = g.reshape(cat, &[8]).unwrap();
            weighted_reduce(g, r)
        });
    }

    #[test]
    fn linear_and_losses_gradients() {
        let mut store = ParamStore::<f64>::new();
        let wid = store.add("w".to_string(), Tensor::new(&[2, 3], vec![0.3, -0.2, 0.5, 0.1, 0.4, -0.6]).unwrap(), true);
        let bid = store.add("b".to_string(), Tensor::new(&[2], vec![0.05, -0.05]).unwrap(), true);
        let labels = [Label::Live, Label::Spoof, Label::Live, Label::Spoof];
        let build = |g: &mut Graph<'_, f64>, x: Var| {
            let w = g.param(wid);
            let b = g.param(bid);
            let y = g.linear(x, w, b).unwrap();
            let ce = g.cross_entropy(y, &labels).unwrap();
            let p = g.sigmoid(y);
            let ml = g.mean_log(p).unwrap();
            let mc = g.mean_log_complement(p).unwrap();
            let tr = g.triplet(x, &labels, 0.9).unwrap();
            g.weighted_sum(&[(ce, 1.0), (ml, 0.5), (mc, -0.25), (tr, 2.0)]).unwrap()
        };
        let shape = [4, 3];
        let data: Vec<f64> = (0..12).map(|i| (i as f64 * 0.71).sin()).collect();
        let mut g = Graph::new(&store);
        let xv = g.input_with_grad(Tensor::new(&shape, data.clone()).unwrap());
        let y = build(&mut g, xv);
        let grads = g.backward(y).unwrap();
        let h = 1e-6;
        for i in 0..12 {
            let eval = |delta: f64| {
                let mut d = data.clone();
                d[i] += delta;
                let mut g = Graph::new(&store);
                let xv = g.input(Tensor::new(&shape, d).unwrap());
                let y = build(&mut g, xv);
                g.scalar(y)
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = grads.of(xv).unwrap().data()[i];
            assert!((fd - a).abs() < 1e-7, "x[{}]: {} vs {}", i, fd, a);
        }
    }

    #[test]
    fn batch_norm_train_gradient_and_running_stats() {
        let mut store = ParamStore::<f64>::new();
        let gid = store.add("g".to_string(), Tensor::new(&[2], vec![1.1, 0.9]).unwrap(), true);
        let bid = store.add("b".to_string(), Tensor::new(&[2], vec![0.0, 0.2]).unwrap(), true);
        let rm = store.add("rm".to_string(), Tensor::zeros(&[2]), false);
        let rv = store.add("rv".to_string(), Tensor::full(&[2], 1.0), false);
        check_input_grad(&store, &[3, 2, 2, 2], 9, |g, x| {
            let gm = g.param(gid);
            let bt = g.param(bid);
            let y = g.batch_norm(x, gm, bt, rm, rv, 0.1).unwrap();
            weighted_reduce(g, y)
        });
        let mut g = Graph::new(&store);
        let x = g.input(Tensor::full(&[2, 2, 1, 1], 2.0));
        let gm = g.param(gid);
        let bt = g.param(bid);
        g.batch_norm(x, gm, bt, rm, rv, 0.1).unwrap();
        let ups = g.take_buffer_updates();
        assert_eq!(ups.len(), 2);
        assert!((ups[0].1.data()[0] - 0.2).abs() < 1e-12);
        assert!((ups[1].1.data()[0] - 0.9).abs() < 1e-12);
        // eval mode uses running stats and queues nothing
        let mut g = Graph::eval(&store);
        let x = g.input(Tensor::full(&[1, 2, 1, 1], 2.0));
        let gm = g.param(gid);
        let bt = g.param(bid);
        let y = g.batch_norm(x, gm, bt, rm, rv, 0.1).unwrap();
        assert!(g.take_buffer_updates().is_empty());
        let expect = 1.1 * 2.0 / libm::sqrt(1.0 + NORM_EPS);
        assert!((g.value(y).data()[0] - expect).abs() < 1e-12);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let store = ParamStore::<f64>::new();
        let mut g = Graph::new(&store);
        let x = g.input_with_grad(Tensor::zeros(&[2]));
        assert!(g.backward(x).is_err());
    }
}
