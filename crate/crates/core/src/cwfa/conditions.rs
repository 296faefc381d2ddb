use crate::error::{Error, Result};
use crate::haar::{approx_at, haar_down_axial, pyramid};
use crate::numerics::Tensor;
use crate::optics::LensletLayout;

/// Structural prior for an immobilized specimen: the mean training volume
/// and the lenslet views of the mean training image.
#[derive(Debug, Clone, PartialEq)]
pub struct Prior {
    pub volume: Tensor,
    pub views: Tensor,
}

impl Prior {
    pub fn from_training(volumes: &[Tensor], images: &[Tensor], layout: &LensletLayout) -> Result<Self> {
        Ok(Self {
            volume: mean_of(volumes)?,
            views: layout.crop_views(&mean_of(images)?)?,
        })
    }
}

/// Elementwise arithmetic mean, accumulated in f64.
pub fn mean_of(ts: &[Tensor]) -> Result<Tensor> {
    let first = ts.first().ok_or_else(|| Error::invalid("mean of an empty set"))?;
    let mut acc = vec![0.0f64; first.len()];
    for t in ts {
        first.check_same_shape(t, "mean_of")?;
        for (a, &v) in acc.iter_mut().zip(t.data()) {
            *a += v as f64;
        }
    }
    let n = ts.len() as f64;
    Tensor::new(first.shape(), acc.into_iter().map(|a| (a / n) as f32).collect())
}

/// Everything the model is conditioned on for one sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ConditionSet {
    /// Lenslet crops of this sample's image, `[L, h, w]`.
    pub views: Tensor,
    pub prior: Tensor,
    /// Lenslet crops of the mean training image, `[L, h, w]`.
    pub prior_views: Tensor,
    /// Index of the lenslet closest to the optical axis.
    pub reference_view: usize,
}

pub fn build_conditions(image: &Tensor, layout: &LensletLayout, prior: &Prior) -> Result<ConditionSet> {
    if layout.is_empty() {
        return Err(Error::invalid("empty lenslet layout"));
    }
    let views = layout.crop_views(image)?;
    views.check_same_shape(&prior.views, "sample views vs prior views")?;
    let mid = layout.midpoint();
    let reference_view = (0..layout.len())
        .min_by(|&a, &b| {
            let da = (layout.centers[a][0] - mid[0]).hypot(layout.centers[a][1] - mid[1]);
            let db = (layout.centers[b][0] - mid[0]).hypot(layout.centers[b][1] - mid[1]);
            da.total_cmp(&db)
        })
        .expect("nonempty layout");
    Ok(ConditionSet {
        views,
        prior: prior.volume.clone(),
        prior_views: prior.views.clone(),
        reference_view,
    })
}

/// Options for turning a [`ConditionSet`] into network inputs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct FeatureOptions {
    pub box_size: usize,
    pub ratio_floor: f32,
}

/// Network inputs derived from a condition set; no trainable parts.
#[derive(Debug, Clone)]
pub(crate) struct Features {
    /// Per flow level `i`: `[3 C_i + L + 1, H, W]`.
    pub levels: Vec<Tensor>,
    /// Per flow level: the prior's detail modulated by the brightness ratio,
    /// which each flow models the residual from.
    pub bases: Vec<Tensor>,
    /// Input of the low-resolution view path: `[C_n + 1 + L, H, W]`.
    pub lr_views: Tensor,
    /// Coarsest prior approximation `[C_n, H, W]`, input of the gated path.
    pub lr_prior: Tensor,
}

fn box_sum(plane: &[f32], h: usize, w: usize, k: usize) -> Vec<f32> {
    let r = (k / 2) as isize;
    let mut rows = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dx in -r..=r {
                let xx = x as isize + dx;
                if xx >= 0 && xx < w as isize {
                    s += plane[y * w + xx as usize];
                }
            }
            rows[y * w + x] = s;
        }
    }
    let mut out = vec![0.0f32; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut s = 0.0;
            for dy in -r..=r {
                let yy = y as isize + dy;
                if yy >= 0 && yy < h as isize {
                    s += rows[yy as usize * w + x];
                }
            }
            out[y * w + x] = s;
        }
    }
    out
}

/// Average-pool `[L, h, w]` views down to the volume's lateral size.
fn fit_views(views: &Tensor, (h, w): (usize, usize)) -> Result<Tensor> {
    let [l, vh, vw] = views.dims3()?;
    if (vh, vw) == (h, w) {
        return Ok(views.clone());
    }
    if vh % h != 0 || vw % w != 0 || vh / h != vw / w {
        return Err(Error::shape(format!(
            "view crops {vh}x{vw} are not an integer multiple of the volume's {h}x{w}"
        )));
    }
    let f = vh / h;
    let mut out = vec![0.0f32; l * h * w];
    for c in 0..l {
        for y in 0..vh {
            for x in 0..vw {
                out[(c * h + y / f) * w + x / f] += views.data()[(c * vh + y) * vw + x] / (f * f) as f32;
            }
        }
    }
    Tensor::new(&[l, h, w], out)
}

impl ConditionSet {
    /// Brightness of this sample relative to the prior, from the reference
    /// view: `box(view) / (box(prior view) + floor * max box(prior view))`.
    pub(crate) fn ratio_map(&self, hw: (usize, usize), opts: &FeatureOptions) -> Result<Tensor> {
        let views = fit_views(&self.views, hw)?;
        let prior = fit_views(&self.prior_views, hw)?;
        let (h, w) = hw;
        let plane = |t: &Tensor| t.data()[self.reference_view * h * w..(self.reference_view + 1) * h * w].to_vec();
        let num = box_sum(&plane(&views), h, w, opts.box_size);
        let den = box_sum(&plane(&prior), h, w, opts.box_size);
        let floor = opts.ratio_floor * den.iter().cloned().fold(0.0f32, f32::max).max(1e-12);
        Tensor::new(&[1, h, w], num.iter().zip(&den).map(|(&n, &d)| n / (d + floor)).collect())
    }

    /// Views scaled so the prior's reference view peaks at one.
    fn normalized_views(&self, hw: (usize, usize)) -> Result<Tensor> {
        let views = fit_views(&self.views, hw)?;
        let prior = fit_views(&self.prior_views, hw)?;
        let (h, w) = hw;
        let peak = prior.data()[self.reference_view * h * w..(self.reference_view + 1) * h * w]
            .iter()
            .cloned()
            .fold(0.0f32, f32::max);
        Ok(if peak > 0.0 { views.scale(1.0 / peak) } else { views })
    }

    pub(crate) fn features(&self, levels: usize, opts: &FeatureOptions) -> Result<Features> {
        let [_, h, w] = self.prior.dims3()?;
        let ratio = self.ratio_map((h, w), opts)?;
        let views = self.normalized_views((h, w))?;
        let (details, coarse) = pyramid(&self.prior, levels)?;
        let mut level_feats = Vec::with_capacity(levels);
        let mut bases = Vec::with_capacity(levels);
        for (i, d) in details.iter().enumerate() {
            let approx = approx_at(&self.prior, i + 1)?;
            let modulated = broadcast_mul(d, &ratio)?;
            level_feats.push(Tensor::cat0(&[&approx, d, &modulated, &views, &ratio])?);
            bases.push(modulated);
        }
        let lr_mod = broadcast_mul(&coarse, &ratio)?;
        Ok(Features {
            levels: level_feats,
            bases,
            lr_views: Tensor::cat0(&[&lr_mod, &ratio, &views])?,
            lr_prior: coarse,
        })
    }
}

/// `[C, H, W] * [1, H, W]`.
fn broadcast_mul(x: &Tensor, plane: &Tensor) -> Result<Tensor> {
    let [c, h, w] = x.dims3()?;
    if plane.shape() != [1, h, w] {
        return Err(Error::shape("broadcast_mul plane shape"));
    }
    let p = plane.data();
    Tensor::new(
        &[c, h, w],
        x.data().chunks(h * w).flat_map(|ch| ch.iter().zip(p).map(|(a, b)| a * b)).collect(),
    )
}

/// Detail pyramid and coarse approximation of a volume.
pub(crate) struct Targets {
    /// `approx[i]` is `V_i`; `approx[0]` is the volume itself.
    pub approx: Vec<Tensor>,
    pub details: Vec<Tensor>,
}

pub(crate) fn targets(v: &Tensor, levels: usize) -> Result<Targets> {
    let mut approx = vec![v.clone()];
    let mut details = Vec::with_capacity(levels);
    for i in 0..levels {
        let p = haar_down_axial(&approx[i])?;
        approx.push(p.approx);
        details.push(p.detail);
    }
    Ok(Targets { approx, details })
}
