use std::f32::consts::FRAC_2_PI;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::nn::{Init, TwoLayerConv};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};

/// Lateral permutations applied upstream of a layer, in application order.
/// Conditioning maps are routed through the same reorderings so every element
/// of `x` keeps meeting the condition computed at its own position.
pub(crate) type Alignment<'a> = [(usize, &'a [usize])];

fn align(g: &mut Graph, mut v: Var, pending: &Alignment<'_>) -> Result<Var> {
    for (axis, perm) in pending {
        v = g.gather(v, *axis, perm)?;
    }
    Ok(v)
}

/// `clamp * (2/pi) * atan(raw)`: a smooth bound on log-scales in (-clamp, clamp).
fn soft_clamp(g: &mut Graph, raw: Var, clamp: f32) -> Var {
    let a = g.atan(raw);
    g.mul_scalar(a, clamp * FRAC_2_PI)
}

fn check_finite(g: &Graph, v: Var, layer: &str, dir: &str) -> Result<()> {
    if g.value(v).all_finite() {
        Ok(())
    } else {
        Err(Error::non_finite(format!("{layer} {dir}")))
    }
}

/// Scale and translation computed from the condition alone and applied
/// elementwise: `y = x * exp(s) + t`.
#[derive(Debug, Clone)]
pub struct ConditionalAffineLayer {
    pub name: String,
    pub channels: usize,
    pub clamp: f32,
    pub condition_net: TwoLayerConv,
}

/// Scale and translation of one layer, already aligned with `x`.
#[derive(Debug, Clone, Copy)]
pub struct AffineParams {
    pub log_scale: Var,
    pub shift: Var,
}

impl ConditionalAffineLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cond_channels: usize,
        hidden: usize,
        clamp: f32,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            name: name.to_string(),
            channels,
            clamp,
            condition_net: TwoLayerConv::new(
                store,
                &format!("{name}/cond"),
                cond_channels,
                hidden,
                2 * channels,
                Init::Zero,
                rng,
            )?,
        })
    }

    pub(crate) fn params_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cond: Var,
        pending: &Alignment<'_>,
    ) -> Result<AffineParams> {
        let h = self.condition_net.forward(g, store, cond)?;
        let h = align(g, h, pending)?;
        let raw = g.narrow0(h, 0, self.channels)?;
        let shift = g.narrow0(h, self.channels, self.channels)?;
        Ok(AffineParams {
            log_scale: soft_clamp(g, raw, self.clamp),
            shift,
        })
    }

    pub(crate) fn apply_forward(&self, g: &mut Graph, p: AffineParams, x: Var) -> Result<Var> {
        let e = g.exp(p.log_scale);
        let scaled = g.mul(x, e)?;
        let y = g.add(scaled, p.shift)?;
        check_finite(g, y, &self.name, "forward")?;
        Ok(y)
    }

    pub(crate) fn apply_inverse(&self, g: &mut Graph, p: AffineParams, y: Var) -> Result<Var> {
        let centered = g.sub(y, p.shift)?;
        let neg = g.neg(p.log_scale);
        let e = g.exp(neg);
        let x = g.mul(centered, e)?;
        check_finite(g, x, &self.name, "inverse")?;
        Ok(x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.condition_net.params()
    }
}

/// Coupling: the first half of the channels passes through and, together
/// with the condition, parameterizes an affine map of the second half.
#[derive(Debug, Clone)]
pub struct ConditionalCouplingLayer {
    pub name: String,
    pub channels: usize,
    pub clamp: f32,
    pub subnet: TwoLayerConv,
}

impl ConditionalCouplingLayer {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        channels: usize,
        cond_channels: usize,
        hidden: usize,
        clamp: f32,
        rng: &mut R,
    ) -> Result<Self> {
        if channels < 2 || !channels.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "{name}: coupling needs an even channel count, got {channels}"
            )));
        }
        let half = channels / 2;
        Ok(Self {
            name: name.to_string(),
            channels,
            clamp,
            subnet: TwoLayerConv::new(
                store,
                &format!("{name}/subnet"),
                half + cond_channels,
                hidden,
                2 * half,
                Init::Zero,
                rng,
            )?,
        })
    }

    fn half(&self) -> usize {
        self.channels / 2
    }

    fn params_for(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        passthrough: Var,
        cond: Var,
    ) -> Result<AffineParams> {
        let input = g.cat0(&[passthrough, cond])?;
        let h = self.subnet.forward(g, store, input)?;
        let raw = g.narrow0(h, 0, self.half())?;
        let shift = g.narrow0(h, self.half(), self.half())?;
        Ok(AffineParams {
            log_scale: soft_clamp(g, raw, self.clamp),
            shift,
        })
    }

    /// Returns the output and the log-scales of the transformed half.
    pub(crate) fn forward_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: Var,
        cond: Var,
    ) -> Result<(Var, Var)> {
        let h = self.half();
        let xa = g.narrow0(x, 0, h)?;
        let xb = g.narrow0(x, h, h)?;
        let p = self.params_for(g, store, xa, cond)?;
        let e = g.exp(p.log_scale);
        let scaled = g.mul(xb, e)?;
        let yb = g.add(scaled, p.shift)?;
        let y = g.cat0(&[xa, yb])?;
        check_finite(g, y, &self.name, "forward")?;
        Ok((y, p.log_scale))
    }

    pub(crate) fn inverse_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        y: Var,
        cond: Var,
    ) -> Result<Var> {
        let h = self.half();
        let ya = g.narrow0(y, 0, h)?;
        let yb = g.narrow0(y, h, h)?;
        let p = self.params_for(g, store, ya, cond)?;
        let centered = g.sub(yb, p.shift)?;
        let neg = g.neg(p.log_scale);
        let e = g.exp(neg);
        let xb = g.mul(centered, e)?;
        let x = g.cat0(&[ya, xb])?;
        check_finite(g, x, &self.name, "inverse")?;
        Ok(x)
    }

    pub fn params(&self) -> Vec<ParamId> {
        self.subnet.params()
    }
}

/// Fixed reordering of one axis of `[C, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PermutationLayer {
    pub axis: usize,
    pub permutation: Vec<usize>,
    inverse: Vec<usize>,
}

impl PermutationLayer {
    pub fn new(axis: usize, permutation: Vec<usize>) -> Result<Self> {
        let n = permutation.len();
        let mut inverse = vec![usize::MAX; n];
        for (i, &p) in permutation.iter().enumerate() {
            if p >= n || inverse[p] != usize::MAX {
                return Err(Error::invalid(format!("not a permutation: {permutation:?}")));
            }
            inverse[p] = i;
        }
        if axis > 2 {
            return Err(Error::invalid(format!("permutation axis {axis} outside [C, H, W]")));
        }
        Ok(Self {
            axis,
            permutation,
            inverse,
        })
    }

    pub fn identity(axis: usize, len: usize) -> Self {
        Self::new(axis, (0..len).collect()).expect("identity is a permutation")
    }

    pub fn random<R: Rng + ?Sized>(axis: usize, len: usize, rng: &mut R) -> Self {
        let mut p: Vec<usize> = (0..len).collect();
        p.shuffle(rng);
        Self::new(axis, p).expect("shuffle is a permutation")
    }

    pub fn inverse_permutation(&self) -> &[usize] {
        &self.inverse
    }

    pub fn is_lateral(&self) -> bool {
        self.axis > 0
    }

    pub(crate) fn forward_graph(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.gather(x, self.axis, &self.permutation)
    }

    pub(crate) fn inverse_graph(&self, g: &mut Graph, y: Var) -> Result<Var> {
        g.gather(y, self.axis, &self.inverse)
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        x.gather_axis(self.axis, &self.permutation)
    }

    pub fn inverse(&self, y: &Tensor) -> Result<Tensor> {
        y.gather_axis(self.axis, &self.inverse)
    }
}
