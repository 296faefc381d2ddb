use rand::Rng;
use serde::{Deserialize, Serialize};

use super::layers::{
    AffineParams, ConditionalAffineLayer, ConditionalCouplingLayer, PermutationLayer,
};
use crate::error::{Error, Result};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

pub const DEFAULT_CLAMP: f32 = 1.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BlockType {
    #[default]
    Affine,
    Coupling,
}

#[derive(Debug, Clone)]
pub enum FlowLayer {
    Affine(ConditionalAffineLayer),
    Coupling(ConditionalCouplingLayer),
    Permutation(PermutationLayer),
}

/// Result of a forward pass: the latent and the accumulated log|det J|.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowOutput {
    pub z: Tensor,
    pub log_det: f64,
}

/// Forward pass recorded on a graph. The log-determinant is kept as the list
/// of per-layer log-scale maps so it can be summed in 64 bits.
#[derive(Debug, Clone)]
pub struct FlowTrace {
    pub z: Var,
    pub log_scales: Vec<Var>,
}

impl FlowTrace {
    pub fn log_det(&self, g: &Graph) -> f64 {
        self.log_scales.iter().map(|&s| g.value(s).sum()).sum()
    }
}

#[derive(Debug, Clone, Copy)]
enum Prepared {
    Affine(AffineParams),
    Coupling(Var),
    Permutation,
}

/// Per-layer conditioning evaluated once and shared by forward and inverse
/// passes under the same condition.
#[derive(Debug, Clone)]
pub struct PreparedStack {
    layers: Vec<Prepared>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StackSpec {
    pub channels: usize,
    pub cond_channels: usize,
    pub hidden: usize,
    pub blocks: usize,
    pub block_type: BlockType,
    pub clamp: f32,
    /// Lateral extent `(H, W)` the permutations are drawn for.
    pub lateral: (usize, usize),
}

#[derive(Debug, Clone)]
pub struct FlowStack {
    pub layers: Vec<FlowLayer>,
    pub channels: usize,
}

impl FlowStack {
    pub fn empty(channels: usize) -> Self {
        Self {
            layers: Vec::new(),
            channels,
        }
    }

    /// `blocks` repetitions of [random-axis permutation, conditional block].
    /// Coupling blocks need an even channel count; where the channel count is
    /// odd the block falls back to a conditional affine layer.
    pub fn build<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        spec: &StackSpec,
        rng: &mut R,
    ) -> Result<Self> {
        let StackSpec {
            channels,
            cond_channels,
            hidden,
            blocks,
            block_type,
            clamp,
            lateral,
        } = *spec;
        let mut layers = Vec::with_capacity(2 * blocks);
        for b in 0..blocks {
            let axis = rng.random_range(0..3usize);
            let len = [channels, lateral.0, lateral.1][axis];
            layers.push(FlowLayer::Permutation(PermutationLayer::random(axis, len, rng)));
            let lname = format!("{name}/layer{}", 2 * b + 1);
            let use_coupling = block_type == BlockType::Coupling && channels >= 2 && channels % 2 == 0;
            layers.push(if use_coupling {
                FlowLayer::Coupling(ConditionalCouplingLayer::new(
                    store, &lname, channels, cond_channels, hidden, clamp, rng,
                )?)
            } else {
                FlowLayer::Affine(ConditionalAffineLayer::new(
                    store, &lname, channels, cond_channels, hidden, clamp, rng,
                )?)
            });
        }
        Ok(Self { layers, channels })
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .flat_map(|l| match l {
                FlowLayer::Affine(a) => a.params(),
                FlowLayer::Coupling(c) => c.params(),
                FlowLayer::Permutation(_) => Vec::new(),
            })
            .collect()
    }

    pub fn prepare(&self, g: &mut Graph, store: &ParamStore, cond: Var) -> Result<PreparedStack> {
        let mut pending: Vec<(usize, &[usize])> = Vec::new();
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            out.push(match layer {
                FlowLayer::Affine(a) => Prepared::Affine(a.params_graph(g, store, cond, &pending)?),
                FlowLayer::Coupling(_) => {
                    let mut c = cond;
                    for (axis, perm) in &pending {
                        c = g.gather(c, *axis, perm)?;
                    }
                    Prepared::Coupling(c)
                }
                FlowLayer::Permutation(p) => {
                    if p.is_lateral() {
                        pending.push((p.axis, &p.permutation));
                    }
                    Prepared::Permutation
                }
            });
        }
        Ok(PreparedStack { layers: out })
    }

    pub fn forward_prepared(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prep: &PreparedStack,
        x: Var,
    ) -> Result<FlowTrace> {
        self.check_input(g, x)?;
        let mut cur = x;
        let mut log_scales = Vec::new();
        for (layer, p) in self.layers.iter().zip(&prep.layers) {
            cur = match (layer, p) {
                (FlowLayer::Affine(a), Prepared::Affine(params)) => {
                    log_scales.push(params.log_scale);
                    a.apply_forward(g, *params, cur)?
                }
                (FlowLayer::Coupling(c), Prepared::Coupling(cond)) => {
                    let (y, s) = c.forward_graph(g, store, cur, *cond)?;
                    log_scales.push(s);
                    y
                }
                (FlowLayer::Permutation(perm), Prepared::Permutation) => perm.forward_graph(g, cur)?,
                _ => unreachable!("prepared stack out of sync"),
            };
        }
        Ok(FlowTrace { z: cur, log_scales })
    }

    pub fn inverse_prepared(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        prep: &PreparedStack,
        z: Var,
    ) -> Result<Var> {
        self.check_input(g, z)?;
        let mut cur = z;
        for (layer, p) in self.layers.iter().zip(&prep.layers).rev() {
            cur = match (layer, p) {
                (FlowLayer::Affine(a), Prepared::Affine(params)) => a.apply_inverse(g, *params, cur)?,
                (FlowLayer::Coupling(c), Prepared::Coupling(cond)) => c.inverse_graph(g, store, cur, *cond)?,
                (FlowLayer::Permutation(perm), Prepared::Permutation) => perm.inverse_graph(g, cur)?,
                _ => unreachable!("prepared stack out of sync"),
            };
        }
        Ok(cur)
    }

    fn check_input(&self, g: &Graph, x: Var) -> Result<()> {
        let c = g.shape(x).first().copied().unwrap_or(0);
        if g.shape(x).len() != 3 || c != self.channels {
            return Err(Error::shape(format!(
                "flow expects [{}, H, W], got {:?}",
                self.channels,
                g.shape(x)
            )));
        }
        Ok(())
    }

    pub fn forward_graph(&self, g: &mut Graph, store: &ParamStore, x: Var, cond: Var) -> Result<FlowTrace> {
        let prep = self.prepare(g, store, cond)?;
        self.forward_prepared(g, store, &prep, x)
    }

    pub fn inverse_graph(&self, g: &mut Graph, store: &ParamStore, z: Var, cond: Var) -> Result<Var> {
        let prep = self.prepare(g, store, cond)?;
        self.inverse_prepared(g, store, &prep, z)
    }

    pub fn forward(&self, store: &ParamStore, x: &Tensor, cond: &Tensor) -> Result<FlowOutput> {
        let mut g = Graph::new();
        let (xv, cv) = (g.constant(x.clone()), g.constant(cond.clone()));
        let trace = self.forward_graph(&mut g, store, xv, cv)?;
        Ok(FlowOutput {
            z: g.value(trace.z).clone(),
            log_det: trace.log_det(&g),
        })
    }

    pub fn inverse(&self, store: &ParamStore, z: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let mut g = Graph::new();
        let (zv, cv) = (g.constant(z.clone()), g.constant(cond.clone()));
        let x = self.inverse_graph(&mut g, store, zv, cv)?;
        Ok(g.value(x).clone())
    }

    /// Non-trainable state (permutations) as named tensors for checkpoints.
    pub fn buffers(&self, name: &str) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for (k, layer) in self.layers.iter().enumerate() {
            if let FlowLayer::Permutation(p) = layer {
                let perm: Vec<f32> = p.permutation.iter().map(|&i| i as f32).collect();
                out.push((
                    format!("{name}/layer{k}/perm"),
                    Tensor::new(&[perm.len()], perm).expect("nonempty"),
                ));
                out.push((format!("{name}/layer{k}/axis"), Tensor::scalar(p.axis as f32)));
            }
        }
        out
    }

    pub fn load_buffers(&mut self, name: &str, get: impl Fn(&str) -> Result<Tensor>) -> Result<()> {
        for (k, layer) in self.layers.iter_mut().enumerate() {
            if let FlowLayer::Permutation(p) = layer {
                let perm = get(&format!("{name}/layer{k}/perm"))?;
                let axis = get(&format!("{name}/layer{k}/axis"))?;
                let perm: Vec<usize> = perm.data().iter().map(|&v| v as usize).collect();
                *p = PermutationLayer::new(axis.item() as usize, perm)?;
            }
        }
        Ok(())
    }
}

impl FlowLayer {
    fn single(&self) -> FlowStack {
        let channels = match self {
            FlowLayer::Affine(a) => a.channels,
            FlowLayer::Coupling(c) => c.channels,
            FlowLayer::Permutation(_) => 0,
        };
        FlowStack {
            layers: vec![self.clone()],
            channels,
        }
    }

    /// Forward through this layer alone, with the condition in the input's frame.
    pub fn forward(&self, store: &ParamStore, x: &Tensor, cond: &Tensor) -> Result<FlowOutput> {
        if let FlowLayer::Permutation(p) = self {
            return Ok(FlowOutput {
                z: p.forward(x)?,
                log_det: 0.0,
            });
        }
        self.single().forward(store, x, cond)
    }

    pub fn inverse(&self, store: &ParamStore, y: &Tensor, cond: &Tensor) -> Result<Tensor> {
        if let FlowLayer::Permutation(p) = self {
            return p.inverse(y);
        }
        self.single().inverse(store, y, cond)
    }
}

/// Per-dimension negative log-likelihood under a standard normal latent:
/// `(sum(z^2)/2 - log_det + rho*|theta|^2 + N/2 ln(2 pi)) / N`.
pub fn nll(out: &FlowOutput, theta_norm_sq: f64, rho: f64) -> f64 {
    let n = out.z.len() as f64;
    (0.5 * out.z.sum_sq() - out.log_det + rho * theta_norm_sq + 0.5 * n * (2.0 * std::f64::consts::PI).ln()) / n
}

/// Graph version of [`nll`] without the parameter penalty (weight decay is
/// applied by the optimizer).
pub fn nll_graph(g: &mut Graph, trace: &FlowTrace) -> Result<Var> {
    let n = g.value(trace.z).len();
    let sq = g.square(trace.z);
    let ssq = g.sum(sq);
    let mut total = g.mul_scalar(ssq, 0.5);
    for &s in &trace.log_scales {
        let ls = g.sum(s);
        total = g.sub(total, ls)?;
    }
    let per_dim = g.mul_scalar(total, 1.0 / n as f32);
    Ok(g.add_scalar_f64(per_dim, 0.5 * (2.0 * std::f64::consts::PI).ln()))
}
