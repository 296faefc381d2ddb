use rand::Rng;

use super::conv::Padding;
use super::graph::{Graph, Var};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    /// He-normal weights, zero bias.
    He,
    /// All zeros, so the layer starts as the zero map.
    Zero,
}

/// Same-padded convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Conv2dLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        cout: usize,
        kh: usize,
        kw: usize,
        init: Init,
        rng: &mut R,
    ) -> Result<Self> {
        let shape = [cout, cin, kh, kw];
        let weight = match init {
            Init::He => Tensor::randn(&shape, (2.0 / (cin * kh * kw) as f32).sqrt(), rng),
            Init::Zero => Tensor::zeros(&shape),
        };
        Ok(Self {
            weight: store.add(format!("{name}/w"), weight)?,
            bias: store.add(format!("{name}/b"), Tensor::zeros(&[cout]))?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let b = g.param(store, self.bias);
        let y = g.conv2d(x, w, Padding::Same)?;
        g.channel_bias(y, b)
    }

    pub fn params(&self) -> [ParamId; 2] {
        [self.weight, self.bias]
    }
}

/// conv -> relu -> conv, the basic two-layer block used throughout the model.
#[derive(Debug, Clone)]
pub struct TwoLayerConv {
    pub first: Conv2dLayer,
    pub second: Conv2dLayer,
}

impl TwoLayerConv {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        cin: usize,
        hidden: usize,
        cout: usize,
        last: Init,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(Self {
            first: Conv2dLayer::new(store, &format!("{name}/conv1"), cin, hidden, 3, 3, Init::He, rng)?,
            second: Conv2dLayer::new(store, &format!("{name}/conv2"), hidden, cout, 3, 3, last, rng)?,
        })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let h = self.first.forward(g, store, x)?;
        let h = g.relu(h);
        self.second.forward(g, store, h)
    }

    pub fn params(&self) -> Vec<ParamId> {
        let mut v = self.first.params().to_vec();
        v.extend(self.second.params());
        v
    }
}
