use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use serde::{Deserialize, Serialize};

use super::layout::{make_layout, LensletLayout};
use super::psf::{forward_project, synth_psf, PSFStack, PsfConfig};
use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Microscope geometry shared by every generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpticsConfig {
    pub lenslets: usize,
    pub sensor_size: (usize, usize),
    pub crop_size: (usize, usize),
    pub ring_radius: f64,
    pub psf: PsfConfig,
}

impl Default for OpticsConfig {
    fn default() -> Self {
        Self {
            lenslets: 9,
            sensor_size: (192, 192),
            crop_size: (64, 64),
            ring_radius: 56.0,
            psf: PsfConfig::default(),
        }
    }
}

impl OpticsConfig {
    pub fn build(&self, depths: usize) -> Result<(LensletLayout, PSFStack)> {
        let layout = make_layout(self.lenslets, self.sensor_size, self.crop_size, self.ring_radius)?;
        let psf = synth_psf(&layout, depths, &self.psf)?;
        Ok((layout, psf))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    /// Gaussian read noise, as a fraction of the clean image peak.
    pub gaussian_frac: f64,
    /// Photons per unit intensity for shot noise; `None` disables it.
    pub photon_scale: Option<f64>,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            gaussian_frac: 0.01,
            photon_scale: None,
        }
    }
}

impl NoiseConfig {
    /// Shot noise (if enabled), then Gaussian noise, then clamp at zero.
    pub fn apply<R: Rng + ?Sized>(&self, clean: &Tensor, rng: &mut R) -> Result<Tensor> {
        let peak = clean.max().max(0.0) as f64;
        let mut out = clean.clone();
        if let Some(scale) = self.photon_scale {
            if scale <= 0.0 {
                return Err(Error::invalid("photon_scale must be positive"));
            }
            for v in out.data_mut() {
                let lambda = (*v as f64 * scale).max(0.0);
                if lambda > 0.0 {
                    let p = Poisson::new(lambda).map_err(|e| Error::invalid(e.to_string()))?;
                    *v = (p.sample(rng) / scale) as f32;
                }
            }
        }
        let sigma = self.gaussian_frac * peak;
        if sigma > 0.0 {
            let n = Normal::new(0.0, sigma).map_err(|e| Error::invalid(e.to_string()))?;
            for v in out.data_mut() {
                *v += n.sample(rng) as f32;
            }
        }
        Ok(out.map(|v| v.max(0.0)))
    }
}

/// Sparse calcium-imaging phantom: Gaussian neurons at fixed positions whose
/// brightness follows spike-and-decay traces.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PhantomConfig {
    pub shape: [usize; 3],
    pub neurons: usize,
    pub neuron_sigma: f64,
    /// Spike probability per neuron per frame.
    pub spike_rate: f64,
    pub spike_amplitude: (f64, f64),
    pub baseline: (f64, f64),
    /// Exponential decay constant of the calcium response, in frames.
    pub decay_frames: f64,
    /// Constant intensity added inside a larger ellipsoid; 0 keeps volumes sparse.
    pub background: f64,
    /// Semi-axes of the ellipsoid holding neuron centers, as fractions of
    /// each dimension.
    pub extent: [f64; 3],
    pub min_separation: f64,
    pub noise: NoiseConfig,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            shape: [16, 64, 64],
            neurons: 20,
            neuron_sigma: 1.0,
            spike_rate: 0.1,
            spike_amplitude: (0.5, 1.0),
            baseline: (0.2, 0.6),
            decay_frames: 3.0,
            background: 0.0,
            extent: [0.3, 0.375, 0.375],
            min_separation: 8.0,
            noise: NoiseConfig::default(),
            seed: 0,
        }
    }
}

/// Static point sources at a given per-voxel density.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BeadConfig {
    pub shape: [usize; 3],
    pub density: f64,
    pub intensity: f64,
    pub noise: NoiseConfig,
    pub seed: u64,
}

/// Per-voxel densities standing in for a ten-fold dilution series.
pub const BEAD_DENSITY_PRESETS: [f64; 4] = [1e-2, 1e-3, 1e-4, 1e-5];

impl Default for BeadConfig {
    fn default() -> Self {
        Self {
            shape: [16, 64, 64],
            density: BEAD_DENSITY_PRESETS[1],
            intensity: 1.0,
            noise: NoiseConfig::default(),
            seed: 0,
        }
    }
}

impl BeadConfig {
    pub fn preset(index: usize) -> Result<Self> {
        let density = *BEAD_DENSITY_PRESETS
            .get(index)
            .ok_or_else(|| Error::invalid(format!("bead density preset {index} not in 0..4")))?;
        Ok(Self {
            density,
            ..Self::default()
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Phantom,
    Beads,
}

/// Where the `volumes` of a dataset came from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "source")]
pub enum VolumeSource {
    Generator,
    RichardsonLucy { iterations: usize },
    /// Output of a trained model sampled at `temperature`.
    Reconstruction { temperature: f64, seed: u64 },
}

/// Frames of (volume, sensor image) pairs plus everything needed to score
/// reconstructions against the generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub kind: DatasetKind,
    pub volumes: Vec<Tensor>,
    pub images: Vec<Tensor>,
    /// Source positions `(z, y, x)`: neuron centers or bead voxels.
    pub positions: Vec<[usize; 3]>,
    /// `traces[k][t]`: amplitude of source `k` in frame `t`.
    pub traces: Vec<Vec<f32>>,
    pub layout: LensletLayout,
    pub psf: PSFStack,
    pub volume_source: VolumeSource,
    pub seed: u64,
    /// Generator settings, kept verbatim for provenance.
    pub config: serde_json::Value,
}

impl SequenceDataset {
    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    pub fn volume_shape(&self) -> [usize; 3] {
        let s = self.volumes[0].shape();
        [s[0], s[1], s[2]]
    }

    /// Fraction of nonzero voxels across all frames.
    pub fn sparsity(&self) -> f64 {
        let nz: usize = self.volumes.iter().map(|v| v.data().iter().filter(|&&x| x != 0.0).count()).sum();
        let n: usize = self.volumes.iter().map(|v| v.len()).sum();
        nz as f64 / n as f64
    }

    pub fn subset(&self, frames: &[usize]) -> Self {
        Self {
            volumes: frames.iter().map(|&i| self.volumes[i].clone()).collect(),
            images: frames.iter().map(|&i| self.images[i].clone()).collect(),
            traces: self.traces.iter().map(|t| frames.iter().map(|&i| t[i]).collect()).collect(),
            ..self.clone()
        }
    }
}

/// Frames used for training: every `stride`-th frame starting at 0.
pub fn train_frames(n: usize, stride: usize) -> Vec<usize> {
    (0..n).step_by(stride.max(1)).collect()
}

/// The complement of [`train_frames`].
pub fn held_out_frames(n: usize, stride: usize) -> Vec<usize> {
    (0..n).filter(|i| i % stride.max(1) != 0).collect()
}

fn check_setup(shape: [usize; 3], psf: &PSFStack, layout: &LensletLayout, frames: usize) -> Result<()> {
    if frames == 0 {
        return Err(Error::invalid("frame count must be positive"));
    }
    if shape.contains(&0) {
        return Err(Error::invalid(format!("volume shape {shape:?} has a zero dimension")));
    }
    if shape[0] != psf.depths() {
        return Err(Error::shape(format!("volume depth {} vs PSF depths {}", shape[0], psf.depths())));
    }
    if layout.sensor_size != psf.sensor_size() {
        return Err(Error::shape("layout and PSF disagree on sensor size"));
    }
    Ok(())
}

fn place_neurons(cfg: &PhantomConfig, rng: &mut ChaCha8Rng) -> Result<Vec<[usize; 3]>> {
    let [d, h, w] = cfg.shape;
    let mid = [(d as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0];
    let semi = [cfg.extent[0] * d as f64, cfg.extent[1] * h as f64, cfg.extent[2] * w as f64];
    let mut out: Vec<[usize; 3]> = Vec::with_capacity(cfg.neurons);
    let mut attempts = 0;
    while out.len() < cfg.neurons {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::invalid(format!(
                "could not place {} neurons with separation {}",
                cfg.neurons, cfg.min_separation
            )));
        }
        let p = [rng.random_range(0..d), rng.random_range(0..h), rng.random_range(0..w)];
        let r2: f64 = (0..3).map(|a| ((p[a] as f64 - mid[a]) / semi[a].max(0.5)).powi(2)).sum();
        if r2 > 1.0 {
            continue;
        }
        let clear = out.iter().all(|q| {
            (p[1] as f64 - q[1] as f64).hypot(p[2] as f64 - q[2] as f64) >= cfg.min_separation
        });
        if clear {
            out.push(p);
        }
    }
    Ok(out)
}

fn calcium_traces(cfg: &PhantomConfig, frames: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    const BURN_IN: usize = 20;
    let decay = (-1.0 / cfg.decay_frames).exp();
    (0..cfg.neurons)
        .map(|_| {
            let base = rng.random_range(cfg.baseline.0..=cfg.baseline.1);
            let mut c = 0.0f64;
            let mut trace = Vec::with_capacity(frames);
            for t in 0..BURN_IN + frames {
                c *= decay;
                if rng.random::<f64>() < cfg.spike_rate {
                    c += rng.random_range(cfg.spike_amplitude.0..=cfg.spike_amplitude.1);
                }
                if t >= BURN_IN {
                    trace.push((base + c) as f32);
                }
            }
            trace
        })
        .collect()
}

fn render_neurons(cfg: &PhantomConfig, positions: &[[usize; 3]], amps: impl Fn(usize) -> f32) -> Tensor {
    let [d, h, w] = cfg.shape;
    let mut v = Tensor::zeros(&cfg.shape);
    let s = cfg.neuron_sigma;
    let r = (3.0 * s).floor() as isize;
    for (k, p) in positions.iter().enumerate() {
        let a = amps(k);
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let d2 = (dz * dz + dy * dy + dx * dx) as f64;
                    if d2 > 9.0 * s * s {
                        continue;
                    }
                    let (z, y, x) = (p[0] as isize + dz, p[1] as isize + dy, p[2] as isize + dx);
                    if z < 0 || y < 0 || x < 0 || z >= d as isize || y >= h as isize || x >= w as isize {
                        continue;
                    }
                    v.data_mut()[(z as usize * h + y as usize) * w + x as usize] +=
                        a * (-d2 / (2.0 * s * s)).exp() as f32;
                }
            }
        }
    }
    if cfg.background > 0.0 {
        let mid = [(d as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0];
        let semi = [
            (cfg.extent[0] + 0.1) * d as f64,
            (cfg.extent[1] + 0.1) * h as f64,
            (cfg.extent[2] + 0.1) * w as f64,
        ];
        for z in 0..d {
            for y in 0..h {
                for x in 0..w {
                    let q = [z as f64, y as f64, x as f64];
                    let r2: f64 = (0..3).map(|a| ((q[a] - mid[a]) / semi[a]).powi(2)).sum();
                    if r2 <= 1.0 {
                        v.data_mut()[(z * h + y) * w + x] += cfg.background as f32;
                    }
                }
            }
        }
    }
    v
}

/// Sparse neural-activity sequence and its noisy sensor images.
#[allow(clippy::needless_range_loop)]
pub fn gen_sequence(
    cfg: &PhantomConfig,
    psf: &PSFStack,
    layout: &LensletLayout,
    frames: usize,
) -> Result<SequenceDataset> {
    check_setup(cfg.shape, psf, layout, frames)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let positions = place_neurons(cfg, &mut rng)?;
    let traces = calcium_traces(cfg, frames, &mut rng);
    let mut volumes = Vec::with_capacity(frames);
    let mut images = Vec::with_capacity(frames);
    for t in 0..frames {
        let v = render_neurons(cfg, &positions, |k| traces[k][t]);
        images.push(cfg.noise.apply(&forward_project(&v, psf)?, &mut rng)?);
        volumes.push(v);
    }
    Ok(SequenceDataset {
        kind: DatasetKind::Phantom,
        volumes,
        images,
        positions,
        traces,
        layout: layout.clone(),
        psf: psf.clone(),
        volume_source: VolumeSource::Generator,
        seed: cfg.seed,
        config: serde_json::to_value(cfg)?,
    })
}

/// Static beads: each voxel independently holds a bead with probability
/// `density`. Frames differ only in sensor noise.
pub fn gen_beads(cfg: &BeadConfig, psf: &PSFStack, layout: &LensletLayout, frames: usize) -> Result<SequenceDataset> {
    check_setup(cfg.shape, psf, layout, frames)?;
    if !(0.0..=1.0).contains(&cfg.density) {
        return Err(Error::invalid(format!("bead density {} outside [0, 1]", cfg.density)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let [d, h, w] = cfg.shape;
    let mut v = Tensor::zeros(&cfg.shape);
    let mut positions = Vec::new();
    for z in 0..d {
        for y in 0..h {
            for x in 0..w {
                if rng.random::<f64>() < cfg.density {
                    v.data_mut()[(z * h + y) * w + x] = cfg.intensity as f32;
                    positions.push([z, y, x]);
                }
            }
        }
    }
    let clean = forward_project(&v, psf)?;
    let mut images = Vec::with_capacity(frames);
    for _ in 0..frames {
        images.push(cfg.noise.apply(&clean, &mut rng)?);
    }
    let traces = positions.iter().map(|_| vec![cfg.intensity as f32; frames]).collect();
    Ok(SequenceDataset {
        kind: DatasetKind::Beads,
        volumes: vec![v; frames],
        images,
        positions,
        traces,
        layout: layout.clone(),
        psf: psf.clone(),
        volume_source: VolumeSource::Generator,
        seed: cfg.seed,
        config: serde_json::to_value(cfg)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn setup(shape: [usize; 3]) -> (LensletLayout, PSFStack) {
        OpticsConfig::default().build(shape[0]).unwrap()
    }

    #[test]
    fn default_phantom_is_sparse_and_deterministic() {
        let cfg = PhantomConfig::default();
        let (layout, psf) = setup(cfg.shape);
        let a = gen_sequence(&cfg, &psf, &layout, 4).unwrap();
        let b = gen_sequence(&cfg, &psf, &layout, 4).unwrap();
        assert_eq!(a, b);
        assert!(a.sparsity() < 0.05, "{}", a.sparsity());
        assert!(a.sparsity() > 0.0);
        assert_eq!(a.positions.len(), 20);
        for p in &a.positions {
            for q in &a.positions {
                if p != q {
                    assert!((p[1] as f64 - q[1] as f64).hypot(p[2] as f64 - q[2] as f64) >= 8.0);
                }
            }
        }
    }

    #[test]
    fn no_spikes_means_constant_frames() {
        let cfg = PhantomConfig {
            spike_rate: 0.0,
            ..PhantomConfig::default()
        };
        let (layout, psf) = setup(cfg.shape);
        let d = gen_sequence(&cfg, &psf, &layout, 3).unwrap();
        assert_eq!(d.volumes[0], d.volumes[1]);
        assert_eq!(d.volumes[0], d.volumes[2]);
    }

    #[test]
    fn zero_frames_is_an_error() {
        let cfg = PhantomConfig::default();
        let (layout, psf) = setup(cfg.shape);
        assert!(gen_sequence(&cfg, &psf, &layout, 0).is_err());
    }

    #[test]
    fn background_fills_volume() {
        let cfg = PhantomConfig {
            background: 0.3,
            ..PhantomConfig::default()
        };
        let (layout, psf) = setup(cfg.shape);
        let d = gen_sequence(&cfg, &psf, &layout, 1).unwrap();
        assert!(d.sparsity() > 0.2);
    }

    #[test]
    fn zero_density_beads() {
        let cfg = BeadConfig {
            density: 0.0,
            ..BeadConfig::default()
        };
        let (layout, psf) = setup(cfg.shape);
        let d = gen_beads(&cfg, &psf, &layout, 2).unwrap();
        assert!(d.volumes.iter().all(|v| v.data().iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn bead_count_matches_density() {
        let (layout, psf) = setup([16, 64, 64]);
        for seed in 0..5 {
            let cfg = BeadConfig {
                density: 1e-3,
                seed,
                ..BeadConfig::default()
            };
            let d = gen_beads(&cfg, &psf, &layout, 1).unwrap();
            let expect = 1e-3 * (16 * 64 * 64) as f64;
            let n = d.positions.len() as f64;
            assert!((n - expect).abs() <= 3.0 * expect.sqrt(), "{n} vs {expect}");
        }
        assert!(BeadConfig::preset(4).is_err());
        assert_eq!(BeadConfig::preset(2).unwrap().density, 1e-4);
    }

    #[test]
    fn images_match_projection_up_to_noise() {
        let cfg = PhantomConfig {
            noise: NoiseConfig {
                gaussian_frac: 0.0,
                photon_scale: None,
            },
            ..PhantomConfig::default()
        };
        let (layout, psf) = setup(cfg.shape);
        let d = gen_sequence(&cfg, &psf, &layout, 2).unwrap();
        assert_eq!(d.images[1], forward_project(&d.volumes[1], &psf).unwrap());
    }

    #[test]
    fn shot_noise_is_unbiased() {
        let noise = NoiseConfig {
            gaussian_frac: 0.0,
            photon_scale: Some(100.0),
        };
        let clean = Tensor::full(&[64, 64], 2.0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let noisy = noise.apply(&clean, &mut rng).unwrap();
        assert!((noisy.mean() - 2.0).abs() < 0.01);
    }

    #[test]
    fn frame_split() {
        assert_eq!(train_frames(13, 6), vec![0, 6, 12]);
        assert_eq!(held_out_frames(8, 6), vec![1, 2, 3, 4, 5, 7]);
    }
}
