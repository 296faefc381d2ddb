//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in creation order, which is already a
//! topological order, so `backward` is a single reverse sweep. Scalar nodes
//! additionally carry an `f64` value so losses can be compared and
//! finite-differenced without `f32` round-off in the final accumulation.

use std::f32::consts::FRAC_1_SQRT_2;

use super::conv::{self, ConvGeom, Padding};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f32),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Atan(Var),
    Sigmoid(Var),
    Relu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Gather { src: Var, axis: usize, perm: Vec<usize> },
    Cat0(Vec<Var>),
    Narrow0 { src: Var, start: usize },
    Conv2d { input: Var, kernel: Var, geom: ConvGeom },
    ChannelBias(Var, Var),
    ChannelScale(Var, Var),
    SpatialMean(Var),
    MatMul(Var, Var),
}

struct Node {
    value: Tensor,
    exact: Option<f64>,
    op: Op,
    param: Option<ParamId>,
}

/// One differentiation recording. Single-threaded; build one per thread.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Drop the recording so the graph can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value with 64-bit accumulation where available.
    pub fn scalar(&self, v: Var) -> f64 {
        let n = &self.nodes[v.0];
        n.exact.unwrap_or_else(|| n.value.data()[0] as f64)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let exact = if value.len() == 1 {
            Some(self.exact_for(&op).unwrap_or(value.data()[0] as f64))
        } else {
            None
        };
        self.nodes.push(Node {
            value,
            exact,
            op,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// 64-bit value of a scalar result, derived from 64-bit parent values.
    fn exact_for(&self, op: &Op) -> Option<f64> {
        let s = |v: &Var| self.nodes[v.0].exact;
        match op {
            Op::Add(a, b) => Some(s(a)? + s(b)?),
            Op::Sub(a, b) => Some(s(a)? - s(b)?),
            Op::Mul(a, b) => Some(s(a)? * s(b)?),
            Op::AddScalar(_) => None,
            Op::MulScalar(a, k) => Some(s(a)? * *k as f64),
            Op::Exp(a) => Some(s(a)?.exp()),
            Op::Log(a) => Some(s(a)?.ln()),
            Op::Square(a) => Some(s(a)?.powi(2)),
            Op::Sum(a) => Some(self.nodes[a.0].value.sum()),
            Op::Mean(a) => Some(self.nodes[a.0].value.mean()),
            Op::Reshape(a) => s(a),
            _ => None,
        }
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.get(id).value.clone(), Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        self.value(a).check_same_shape(self.value(b), what)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v = self.value(a).mul(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn add_scalar(&mut self, a: Var, k: f32) -> Var {
        let v = self.value(a).map(|x| x + k);
        let exact = self.nodes[a.0].exact.map(|e| e + k as f64);
        let out = self.push(v, Op::AddScalar(a));
        if let Some(e) = exact {
            self.nodes[out.0].exact = Some(e);
        }
        out
    }

    /// Add an `f64` constant to a scalar without losing the low bits.
    pub fn add_scalar_f64(&mut self, a: Var, k: f64) -> Var {
        let out = self.add_scalar(a, k as f32);
        if let Some(e) = self.nodes[a.0].exact {
            self.nodes[out.0].exact = Some(e + k);
        }
        out
    }

    pub fn mul_scalar(&mut self, a: Var, k: f32) -> Var {
        let v = self.value(a).scale(k);
        self.push(v, Op::MulScalar(a, k))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.mul_scalar(a, -1.0)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f32::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f32::ln);
        self.push(v, Op::Log(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f32::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn atan(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f32::atan);
        self.push(v, Op::Atan(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let s = self.value(a).mean();
        self.push(Tensor::scalar(s as f32), Op::Mean(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// `out[.., i, ..] = a[.., perm[i], ..]` along `axis`.
    pub fn gather(&mut self, a: Var, axis: usize, perm: &[usize]) -> Result<Var> {
        let v = self.value(a).gather_axis(axis, perm)?;
        Ok(self.push(
            v,
            Op::Gather {
                src: a,
                axis,
                perm: perm.to_vec(),
            },
        ))
    }

    pub fn cat0(&mut self, parts: &[Var]) -> Result<Var> {
        let tensors: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let v = Tensor::cat0(&tensors)?;
        Ok(self.push(v, Op::Cat0(parts.to_vec())))
    }

    pub fn narrow0(&mut self, a: Var, start: usize, count: usize) -> Result<Var> {
        let v = self.value(a).narrow0(start, count)?;
        Ok(self.push(v, Op::Narrow0 { src: a, start }))
    }

    /// Cross-correlation of `[C_in, H, W]` with `[C_out, C_in, kh, kw]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, pad: Padding) -> Result<Var> {
        let geom = conv_geom(self.value(input), self.value(kernel), pad)?;
        let out = conv::forward(&geom, self.value(input).data(), self.value(kernel).data());
        let v = Tensor::new(&[geom.cout, geom.oh, geom.ow], out)?;
        Ok(self.push(v, Op::Conv2d { input, kernel, geom }))
    }

    /// Add `bias[c]` to every element of channel `c`.
    pub fn channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = channel_apply(self.value(x), self.value(bias), |a, b| a + b)?;
        Ok(self.push(v, Op::ChannelBias(x, bias)))
    }

    /// Multiply channel `c` by `scale[c]`.
    pub fn channel_scale(&mut self, x: Var, scale: Var) -> Result<Var> {
        let v = channel_apply(self.value(x), self.value(scale), |a, b| a * b)?;
        Ok(self.push(v, Op::ChannelScale(x, scale)))
    }

    /// Mean over all but the leading axis, giving a `[C]` vector.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let c = t.shape()[0];
        let plane = t.len() / c;
        let data = t
            .data()
            .chunks(plane)
            .map(|p| (p.iter().map(|&v| v as f64).sum::<f64>() / plane as f64) as f32)
            .collect();
        let v = Tensor::new(&[c], data).expect("nonzero channels");
        self.push(v, Op::SpatialMean(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let [m, k] = self.value(a).dims2()?;
        let [k2, n] = self.value(b).dims2()?;
        if k != k2 {
            return Err(Error::shape(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let v = Tensor::new(&[m, n], matmul(self.value(a).data(), self.value(b).data(), m, k, n))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    /// Orthonormal axial Haar synthesis, built from gather and arithmetic so
    /// it differentiates for free.
    pub fn haar_up(&mut self, approx: Var, detail: Var) -> Result<Var> {
        self.same_shape(approx, detail, "haar_up")?;
        let half = self.shape(approx)[0];
        let s = self.add(approx, detail)?;
        let d = self.sub(approx, detail)?;
        let even = self.mul_scalar(s, FRAC_1_SQRT_2);
        let odd = self.mul_scalar(d, FRAC_1_SQRT_2);
        let stacked = self.cat0(&[even, odd])?;
        let perm: Vec<usize> = (0..2 * half).map(|i| (i % 2) * half + i / 2).collect();
        self.gather(stacked, 0, &perm)
    }

    /// Propagate gradients from scalar `loss` into every parameter of `store`.
    /// Parameters that did not take part receive zeros.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore) -> Result<()> {
        if self.consumed {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got {:?}",
                self.shape(loss)
            )));
        }
        self.consumed = true;
        let grads = self.gradients(loss)?;
        store.zero_grads();
        for (node, grad) in self.nodes.iter().zip(grads) {
            if let (Some(id), Some(g)) = (node.param, grad) {
                store.get_mut(id).gradient.add_assign(&g)?;
            }
        }
        Ok(())
    }

    /// Gradient of `loss` with respect to an arbitrary recorded node.
    pub fn grad_of(&self, loss: Var, wrt: Var) -> Result<Tensor> {
        let mut grads = self.gradients(loss)?;
        Ok(grads[wrt.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(self.shape(wrt))))
    }

    fn gradients(&self, loss: Var) -> Result<Vec<Option<Tensor>>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |v: &Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, delta: Tensor| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot @ None => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.scale(-1.0))?;
            }
            Op::Mul(a, b) => {
                acc(*a, g.mul(val(b))?)?;
                acc(*b, g.mul(val(a))?)?;
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                let d = g.clone().reshape(val(a).shape())?;
                acc(*a, d)?;
            }
            Op::MulScalar(a, k) => acc(*a, g.scale(*k))?,
            Op::Exp(a) => acc(*a, g.mul(&node.value)?)?,
            Op::Log(a) => acc(*a, g.zip_map(val(a), |g, x| g / x)?)?,
            Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |g, y| g * (1.0 - y * y))?)?,
            Op::Atan(a) => acc(*a, g.zip_map(val(a), |g, x| g / (1.0 + x * x))?)?,
            Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |g, y| g * y * (1.0 - y))?)?,
            Op::Relu(a) => acc(*a, g.zip_map(val(a), |g, x| if x > 0.0 { g } else { 0.0 })?)?,
            Op::Square(a) => acc(*a, g.zip_map(val(a), |g, x| 2.0 * g * x)?)?,
            Op::Sum(a) => acc(*a, Tensor::full(val(a).shape(), g.item()))?,
            Op::Mean(a) => {
                let n = val(a).len() as f32;
                acc(*a, Tensor::full(val(a).shape(), g.item() / n))?
            }
            Op::Gather { src, axis, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                acc(*src, g.gather_axis(*axis, &inv)?)?;
            }
            Op::Cat0(parts) => {
                let mut start = 0;
                for p in parts {
                    let c = val(p).shape()[0];
                    acc(*p, g.narrow0(start, c)?)?;
                    start += c;
                }
            }
            Op::Narrow0 { src, start } => {
                let full = val(src);
                let plane = full.len() / full.shape()[0];
                let mut d = Tensor::zeros(full.shape());
                d.data_mut()[start * plane..start * plane + g.len()].copy_from_slice(g.data());
                acc(*src, d)?;
            }
            Op::Conv2d { input, kernel, geom } => {
                let gi = conv::backward_input(geom, g.data(), val(kernel).data());
                let gk = conv::backward_kernel(geom, g.data(), val(input).data());
                acc(*input, Tensor::new(val(input).shape(), gi)?)?;
                acc(*kernel, Tensor::new(val(kernel).shape(), gk)?)?;
            }
            Op::ChannelBias(x, b) => {
                acc(*x, g.clone())?;
                acc(*b, channel_sums(g, None))?;
            }
            Op::ChannelScale(x, s) => {
                acc(*x, channel_apply(g, val(s), |a, b| a * b)?)?;
                acc(*s, channel_sums(g, Some(val(x))))?;
            }
            Op::SpatialMean(x) => {
                let shape = val(x).shape();
                let c = shape[0];
                let plane = val(x).len() / c;
                let mut d = Tensor::zeros(shape);
                for (ch, chunk) in d.data_mut().chunks_mut(plane).enumerate() {
                    chunk.fill(g.data()[ch] / plane as f32);
                }
                acc(*x, d)?;
            }
            Op::MatMul(a, b) => {
                let [m, k] = val(a).dims2()?;
                let [_, n] = val(b).dims2()?;
                let bt = transpose(val(b).data(), k, n);
                let at = transpose(val(a).data(), m, k);
                acc(*a, Tensor::new(&[m, k], matmul(g.data(), &bt, m, n, k))?)?;
                acc(*b, Tensor::new(&[k, n], matmul(&at, g.data(), k, m, n))?)?;
            }
        }
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn conv_geom(input: &Tensor, kernel: &Tensor, pad: Padding) -> Result<ConvGeom> {
    let [cin, h, w] = input.dims3()?;
    let [cout, kcin, kh, kw] = match kernel.shape()[..] {
        [a, b, c, d] => [a, b, c, d],
        _ => {
            return Err(Error::shape(format!(
                "conv2d kernel must be [C_out, C_in, kh, kw], got {:?}",
                kernel.shape()
            )))
        }
    };
    if kcin != cin {
        return Err(Error::shape(format!(
            "conv2d input has {cin} channels but kernel expects {kcin}"
        )));
    }
    if kh % 2 == 0 || kw % 2 == 0 {
        return Err(Error::shape(format!("conv2d kernel {kh}x{kw} must be odd")));
    }
    ConvGeom::new(cin, h, w, cout, kh, kw, pad)
        .ok_or_else(|| Error::shape(format!("kernel {kh}x{kw} larger than input {h}x{w}")))
}

fn channel_apply(x: &Tensor, v: &Tensor, f: impl Fn(f32, f32) -> f32) -> Result<Tensor> {
    let c = x.shape()[0];
    if v.len() != c {
        return Err(Error::shape(format!(
            "per-channel vector of length {} for {c} channels",
            v.len()
        )));
    }
    let plane = x.len() / c;
    let mut out = x.clone();
    for (ch, chunk) in out.data_mut().chunks_mut(plane).enumerate() {
        let k = v.data()[ch];
        for e in chunk {
            *e = f(*e, k);
        }
    }
    Ok(out)
}

/// Per-channel sums of `g` (optionally weighted elementwise by `w`), shaped `[C]`.
fn channel_sums(g: &Tensor, w: Option<&Tensor>) -> Tensor {
    let c = g.shape()[0];
    let plane = g.len() / c;
    let data = (0..c)
        .map(|ch| {
            let gs = &g.data()[ch * plane..(ch + 1) * plane];
            match w {
                Some(w) => conv::dot_lanes(gs, &w.data()[ch * plane..(ch + 1) * plane]),
                None => gs.iter().map(|&v| v as f64).sum::<f64>() as f32,
            }
        })
        .collect();
    Tensor::new(&[c], data).expect("nonzero channels")
}

fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            for j in 0..n {
                out[i * n + j] += av * b[p * n + j];
            }
        }
    }
    out
}

fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
