use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::conditions::{build_conditions, targets, ConditionSet, FeatureOptions, Features, Prior};
use super::config::CWFAConfig;
use crate::archive::Archive;
use crate::error::{Error, Result};
use crate::flow::{nll, FlowOutput, FlowStack, StackSpec};
use crate::haar::{haar_down_axial, haar_up_axial, HaarPair};
use crate::numerics::nn::{Conv2dLayer, Init, TwoLayerConv};
use crate::numerics::{Graph, ParamId, ParamStore, Tensor, Var};
use crate::optics::LensletLayout;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// One wavelet level: the condition network and the flow over detail
/// coefficients.
#[derive(Debug, Clone)]
pub struct LevelNet {
    pub omega: TwoLayerConv,
    pub flow: FlowStack,
}

impl LevelNet {
    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.omega.params();
        p.extend(self.flow.params());
        p
    }
}

/// Deterministic coarse-volume predictor: a convolutional path over the
/// views plus the coarse prior rescaled per channel by a learned gate.
#[derive(Debug, Clone)]
pub struct LRNet {
    pub view: TwoLayerConv,
    pub gate1: Conv2dLayer,
    pub gate2: Conv2dLayer,
}

impl LRNet {
    pub fn params(&self) -> Vec<ParamId> {
        let mut p = self.view.params();
        p.extend(self.gate1.params());
        p.extend(self.gate2.params());
        p
    }

    /// Returns the prediction and the gate vector.
    pub(crate) fn forward_graph(&self, g: &mut Graph, store: &ParamStore, views: Var, prior: Var) -> Result<(Var, Var)> {
        let a = self.view.forward(g, store, views)?;
        let c = g.shape(prior)[0];
        let m = g.spatial_mean(prior);
        let m = g.reshape(m, &[1, 1, c])?;
        let h = self.gate1.forward(g, store, m)?;
        let h = g.relu(h);
        let h = self.gate2.forward(g, store, h)?;
        let gate = g.sigmoid(h);
        let gate = g.reshape(gate, &[c])?;
        let gated = g.channel_scale(prior, gate)?;
        Ok((g.add(a, gated)?, gate))
    }
}

/// Per-level pieces of the training objective, recorded on a graph.
pub(crate) struct LevelLoss {
    pub total: Var,
    pub nll: Var,
    pub spatial: Var,
}

#[derive(Debug, Clone)]
pub struct CWFAModel {
    pub config: CWFAConfig,
    pub store: ParamStore,
    pub levels: Vec<LevelNet>,
    pub lr: LRNet,
    pub prior: Prior,
    pub layout: LensletLayout,
}

impl CWFAModel {
    pub fn new(config: CWFAConfig, layout: LensletLayout, prior: Prior) -> Result<Self> {
        config.validate()?;
        config.check_volume(prior.volume.shape())?;
        let [d, h, w] = prior.volume.dims3()?;
        let l = layout.len();
        if prior.views.shape() != [l, layout.crop_size.0, layout.crop_size.1] {
            return Err(Error::shape(format!(
                "prior views {:?} do not match {l} lenslets of {:?}",
                prior.views.shape(),
                layout.crop_size
            )));
        }
        let hidden = config.conv_channels;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let mut levels = Vec::with_capacity(config.levels);
        for i in 0..config.levels {
            let c = d >> (i + 1);
            let omega = TwoLayerConv::new(
                &mut store,
                &format!("level{i}/omega"),
                3 * c + l + 1,
                hidden,
                hidden,
                Init::He,
                &mut rng,
            )?;
            let spec = StackSpec {
                channels: c,
                cond_channels: hidden,
                hidden,
                blocks: config.blocks_per_level,
                block_type: config.block_type,
                clamp: config.clamp,
                lateral: (h, w),
            };
            let flow = FlowStack::build(&mut store, &format!("level{i}/flow"), &spec, &mut rng)?;
            levels.push(LevelNet { omega, flow });
        }
        let cn = d >> config.levels;
        let lr = LRNet {
            view: TwoLayerConv::new(&mut store, "lr/view", cn + 1 + l, hidden, cn, Init::Zero, &mut rng)?,
            gate1: Conv2dLayer::new(&mut store, "lr/gate/conv1", 1, 4, 1, 3, Init::He, &mut rng)?,
            gate2: Conv2dLayer::new(&mut store, "lr/gate/conv2", 4, 1, 1, 3, Init::He, &mut rng)?,
        };
        Ok(Self {
            config,
            store,
            levels,
            lr,
            prior,
            layout,
        })
    }

    pub fn volume_shape(&self) -> [usize; 3] {
        let s = self.prior.volume.shape();
        [s[0], s[1], s[2]]
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    pub(crate) fn feature_options(&self) -> FeatureOptions {
        FeatureOptions {
            box_size: self.config.ratio_box,
            ratio_floor: self.config.ratio_floor,
        }
    }

    pub fn conditions(&self, image: &Tensor) -> Result<ConditionSet> {
        build_conditions(image, &self.layout, &self.prior)
    }

    pub(crate) fn features(&self, c: &ConditionSet) -> Result<Features> {
        if c.prior.shape() != self.prior.volume.shape() {
            return Err(Error::shape(format!(
                "condition prior {:?} vs model volume {:?}",
                c.prior.shape(),
                self.prior.volume.shape()
            )));
        }
        c.features(self.config.levels, &self.feature_options())
    }

    fn check_level(&self, i: usize) -> Result<()> {
        if i >= self.levels.len() {
            return Err(Error::invalid(format!("level {i} out of range 0..{}", self.levels.len())));
        }
        Ok(())
    }

    pub(crate) fn omega_graph(&self, g: &mut Graph, store: &ParamStore, i: usize, feats: &Tensor) -> Result<Var> {
        let f = g.constant(feats.clone());
        self.levels[i].omega.forward(g, store, f)
    }

    /// Level-`i` objective for one sample: per-dimension NLL of its detail
    /// coefficients (relative to the ratio-modulated prior detail) plus `alpha` times the mean squared error of `V_i`
    /// rebuilt from the true `V_{i+1}` and the zero-latent detail.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn level_loss_graph(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        i: usize,
        feats: &Features,
        v_i: &Tensor,
        v_next: &Tensor,
        detail: &Tensor,
    ) -> Result<LevelLoss> {
        let cond = self.omega_graph(g, store, i, &feats.levels[i])?;
        let flow = &self.levels[i].flow;
        let prep = flow.prepare(g, store, cond)?;
        let x = g.constant(detail.sub(&feats.bases[i])?);
        let trace = flow.forward_prepared(g, store, &prep, x)?;
        let nll = crate::flow::nll_graph(g, &trace)?;
        let zero = g.constant(Tensor::zeros(detail.shape()));
        let residual = flow.inverse_prepared(g, store, &prep, zero)?;
        let base = g.constant(feats.bases[i].clone());
        let d_hat = g.add(residual, base)?;
        let approx = g.constant(v_next.clone());
        let rebuilt = g.haar_up(approx, d_hat)?;
        let target = g.constant(v_i.clone());
        let diff = g.sub(rebuilt, target)?;
        let sq = g.square(diff);
        let spatial = g.mean(sq);
        let weighted = g.mul_scalar(spatial, self.config.alpha as f32);
        let total = g.add(nll, weighted)?;
        Ok(LevelLoss { total, nll, spatial })
    }

    pub(crate) fn lr_graph(&self, g: &mut Graph, store: &ParamStore, feats: &Features) -> Result<(Var, Var)> {
        let views = g.constant(feats.lr_views.clone());
        let prior = g.constant(feats.lr_prior.clone());
        self.lr.forward_graph(g, store, views, prior)
    }

    /// Mean squared error of the low-resolution prediction.
    pub(crate) fn lr_loss_graph(&self, g: &mut Graph, store: &ParamStore, feats: &Features, v_n: &Tensor) -> Result<Var> {
        let (pred, _) = self.lr_graph(g, store, feats)?;
        let target = g.constant(v_n.clone());
        let diff = g.sub(pred, target)?;
        let sq = g.square(diff);
        Ok(g.mean(sq))
    }

    fn level_forward_with(&self, v_i: &Tensor, feats: &Features, i: usize) -> Result<(Tensor, FlowOutput)> {
        self.check_level(i)?;
        let HaarPair { approx, detail } = haar_down_axial(v_i)?;
        let mut g = Graph::new();
        let cond = self.omega_graph(&mut g, &self.store, i, &feats.levels[i])?;
        let x = g.constant(detail.sub(&feats.bases[i])?);
        let trace = self.levels[i].flow.forward_graph(&mut g, &self.store, x, cond)?;
        Ok((
            approx,
            FlowOutput {
                z: g.value(trace.z).clone(),
                log_det: trace.log_det(&g),
            },
        ))
    }

    /// Split `V_i` into `V_{i+1}` and its detail, and push the detail
    /// through level `i`'s flow.
    pub fn level_forward(&self, v_i: &Tensor, c: &ConditionSet, i: usize) -> Result<(Tensor, FlowOutput)> {
        self.level_forward_with(v_i, &self.features(c)?, i)
    }

    fn level_upsample_with<R: Rng + ?Sized>(
        &self,
        v_next: &Tensor,
        feats: &Features,
        i: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Tensor> {
        self.check_level(i)?;
        let z = if temperature > 0.0 {
            Tensor::randn(v_next.shape(), temperature as f32, rng)
        } else {
            Tensor::zeros(v_next.shape())
        };
        let detail = self.invert_level(&z, feats, i)?;
        haar_up_axial(&HaarPair {
            approx: v_next.clone(),
            detail,
        })
    }

    fn invert_level(&self, z: &Tensor, feats: &Features, i: usize) -> Result<Tensor> {
        let mut g = Graph::new();
        let cond = self.omega_graph(&mut g, &self.store, i, &feats.levels[i])?;
        let zv = g.constant(z.clone());
        let d = self.levels[i].flow.inverse_graph(&mut g, &self.store, zv, cond)?;
        g.value(d).add(&feats.bases[i])
    }

    /// Detail coefficients of level `i` generated from latent `z`.
    pub fn level_inverse(&self, z: &Tensor, c: &ConditionSet, i: usize) -> Result<Tensor> {
        self.check_level(i)?;
        self.invert_level(z, &self.features(c)?, i)
    }

    /// `V_i` from `V_{i+1}` with a latent drawn at `temperature` (exactly
    /// zero when the temperature is 0).
    pub fn level_upsample<R: Rng + ?Sized>(
        &self,
        v_next: &Tensor,
        c: &ConditionSet,
        i: usize,
        temperature: f64,
        rng: &mut R,
    ) -> Result<Tensor> {
        self.level_upsample_with(v_next, &self.features(c)?, i, temperature, rng)
    }

    /// Latents of every level (finest first) and the coarsest approximation.
    pub fn encode(&self, v0: &Tensor, c: &ConditionSet) -> Result<(Vec<Tensor>, Tensor)> {
        let feats = self.features(c)?;
        let mut v = v0.clone();
        let mut zs = Vec::with_capacity(self.levels.len());
        for i in 0..self.levels.len() {
            let (next, fo) = self.level_forward_with(&v, &feats, i)?;
            zs.push(fo.z);
            v = next;
        }
        Ok((zs, v))
    }

    /// Inverse of [`CWFAModel::encode`].
    pub fn decode(&self, zs: &[Tensor], coarse: &Tensor, c: &ConditionSet) -> Result<Tensor> {
        if zs.len() != self.levels.len() {
            return Err(Error::invalid(format!("{} latents for {} levels", zs.len(), self.levels.len())));
        }
        let feats = self.features(c)?;
        let mut v = coarse.clone();
        for i in (0..self.levels.len()).rev() {
            let detail = self.invert_level(&zs[i], &feats, i)?;
            v = haar_up_axial(&HaarPair { approx: v, detail })?;
        }
        Ok(v)
    }

    fn lr_with(&self, feats: &Features) -> Result<(Tensor, Tensor)> {
        let mut g = Graph::new();
        let (pred, gate) = self.lr_graph(&mut g, &self.store, feats)?;
        Ok((g.value(pred).clone(), g.value(gate).clone()))
    }

    pub fn lr_reconstruct(&self, c: &ConditionSet) -> Result<Tensor> {
        Ok(self.lr_with(&self.features(c)?)?.0)
    }

    /// Per-channel gate of the prior path.
    pub fn lr_gate(&self, c: &ConditionSet) -> Result<Tensor> {
        Ok(self.lr_with(&self.features(c)?)?.1)
    }

    /// Full-resolution volume: low-resolution prediction followed by one
    /// upsampling per level, coarse to fine.
    pub fn reconstruct_conditions(&self, c: &ConditionSet, temperature: f64, seed: u64) -> Result<Tensor> {
        let feats = self.features(c)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut v = self.lr_with(&feats)?.0;
        for i in (0..self.levels.len()).rev() {
            v = self.level_upsample_with(&v, &feats, i, temperature, &mut rng)?;
        }
        if self.config.project_to_prior {
            v = v.zip_map(&self.prior.volume, |x, p| if p > 1e-6 { x.max(0.0) } else { 0.0 })?;
        }
        v.ensure_finite("reconstruction")?;
        Ok(v)
    }

    pub fn reconstruct(&self, image: &Tensor, temperature: f64, seed: u64) -> Result<Tensor> {
        self.reconstruct_conditions(&self.conditions(image)?, temperature, seed)
    }

    /// Per-dimension NLL of each flow level (finest first), followed by the
    /// unit-variance Gaussian NLL of the low-resolution residual.
    pub fn total_loglik(&self, v0: &Tensor, c: &ConditionSet) -> Result<Vec<f64>> {
        if v0.shape() != self.prior.volume.shape() {
            return Err(Error::shape(format!(
                "volume {:?} vs model {:?}",
                v0.shape(),
                self.prior.volume.shape()
            )));
        }
        let feats = self.features(c)?;
        let mut out = Vec::with_capacity(self.levels.len() + 1);
        let mut v = v0.clone();
        for i in 0..self.levels.len() {
            let (next, fo) = self.level_forward_with(&v, &feats, i)?;
            out.push(nll(&fo, 0.0, 0.0));
            v = next;
        }
        let pred = self.lr_with(&feats)?.0;
        let r = v.sub(&pred)?;
        out.push(0.5 * r.sum_sq() / r.len() as f64 + HALF_LN_2PI);
        if out.iter().any(|x| !x.is_finite()) {
            return Err(Error::non_finite("total_loglik"));
        }
        Ok(out)
    }

    /// Level-`i` loss terms `(nll, spatial, nll + alpha * spatial)` for one sample.
    pub fn level_loss(&self, i: usize, v0: &Tensor, c: &ConditionSet) -> Result<(f64, f64, f64)> {
        self.check_level(i)?;
        let feats = self.features(c)?;
        let t = targets(v0, self.levels.len())?;
        let mut g = Graph::new();
        let l = self.level_loss_graph(
            &mut g,
            &self.store,
            i,
            &feats,
            &t.approx[i],
            &t.approx[i + 1],
            &t.details[i],
        )?;
        Ok((g.scalar(l.nll), g.scalar(l.spatial), g.scalar(l.total)))
    }

    /// Mean squared error of the low-resolution prediction for one sample.
    pub fn lr_loss(&self, v0: &Tensor, c: &ConditionSet) -> Result<f64> {
        let feats = self.features(c)?;
        let t = targets(v0, self.levels.len())?;
        let mut g = Graph::new();
        let l = self.lr_loss_graph(&mut g, &self.store, &feats, &t.approx[self.levels.len()])?;
        Ok(g.scalar(l))
    }

    /// Record the level-`i` objective against an arbitrary parameter store
    /// (used for gradient checks).
    pub fn level_objective(&self, g: &mut Graph, store: &ParamStore, i: usize, v0: &Tensor, c: &ConditionSet) -> Result<Var> {
        self.check_level(i)?;
        let feats = self.features(c)?;
        let t = targets(v0, self.levels.len())?;
        Ok(self
            .level_loss_graph(g, store, i, &feats, &t.approx[i], &t.approx[i + 1], &t.details[i])?
            .total)
    }

    /// Record the low-resolution objective against an arbitrary parameter store.
    pub fn lowres_objective(&self, g: &mut Graph, store: &ParamStore, v0: &Tensor, c: &ConditionSet) -> Result<Var> {
        let feats = self.features(c)?;
        let t = targets(v0, self.levels.len())?;
        self.lr_loss_graph(g, store, &feats, &t.approx[self.levels.len()])
    }

    pub fn to_archive(&self) -> Result<Archive> {
        let mut a = Archive::new();
        a.insert_json("config", &self.config)?;
        a.insert_json("layout", &self.layout)?;
        a.insert_tensor("prior/volume", self.prior.volume.clone())?;
        a.insert_tensor("prior/views", self.prior.views.clone())?;
        for p in self.store.iter() {
            a.insert_tensor(p.name.clone(), p.value.clone())?;
        }
        for (i, l) in self.levels.iter().enumerate() {
            for (name, t) in l.flow.buffers(&format!("level{i}/flow")) {
                a.insert_tensor(name, t)?;
            }
        }
        Ok(a)
    }

    pub fn from_archive(a: &Archive) -> Result<Self> {
        let config: CWFAConfig = a.json("config")?;
        let layout: LensletLayout = a.json("layout")?;
        let prior = Prior {
            volume: a.tensor("prior/volume")?.clone(),
            views: a.tensor("prior/views")?.clone(),
        };
        let mut m = Self::new(config, layout, prior)?;
        let ids: Vec<_> = m.store.ids().collect();
        for id in ids {
            let p = m.store.get_mut(id);
            let t = a.tensor(&p.name)?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format(format!(
                    "parameter `{}` has shape {:?}, checkpoint holds {:?}",
                    p.name,
                    p.value.shape(),
                    t.shape()
                )));
            }
            p.value = t.clone();
        }
        for (i, l) in m.levels.iter_mut().enumerate() {
            l.flow.load_buffers(&format!("level{i}/flow"), |n| a.tensor(n).cloned())?;
        }
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_archive()?.save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_archive(&Archive::load(path)?)
    }
}

pub fn save_model(model: &CWFAModel, path: impl AsRef<Path>) -> Result<()> {
    model.save(path)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<CWFAModel> {
    CWFAModel::load(path)
}
