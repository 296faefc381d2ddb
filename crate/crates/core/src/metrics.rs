//! Reconstruction quality: PSNR, masked MAPE and per-neuron temporal
//! correlation, with a local-maxima neuron finder.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Reported in place of +inf when reconstruction and reference agree exactly.
pub const PSNR_CAP: f64 = 99.0;
pub const MASK_THRESHOLD: f32 = 1e-6;
pub const MAPE_EPS: f64 = 1e-6;

/// `10 log10(max(gt)^2 / MSE)`, capped at [`PSNR_CAP`].
pub fn psnr(gt: &Tensor, recon: &Tensor) -> Result<f64> {
    gt.check_same_shape(recon, "psnr")?;
    let mse = gt
        .data()
        .iter()
        .zip(recon.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum::<f64>()
        / gt.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    let peak = gt.max() as f64;
    if peak <= 0.0 {
        return Err(Error::invalid("psnr needs a reference with a positive maximum"));
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Mape {
    pub value: f64,
    /// Neither volume had a voxel above the mask threshold; `value` is 0.
    pub empty_mask: bool,
}

/// Mean of `|gt - recon| / max(|gt|, eps)` over voxels where either volume
/// is nonzero.
pub fn mape_masked(gt: &Tensor, recon: &Tensor) -> Result<Mape> {
    gt.check_same_shape(recon, "mape_masked")?;
    let (mut sum, mut n) = (0.0f64, 0usize);
    for (&g, &r) in gt.data().iter().zip(recon.data()) {
        if g.abs() > MASK_THRESHOLD || r.abs() > MASK_THRESHOLD {
            sum += (g as f64 - r as f64).abs() / (g.abs() as f64).max(MAPE_EPS);
            n += 1;
        }
    }
    Ok(if n == 0 {
        Mape {
            value: 0.0,
            empty_mask: true,
        }
    } else {
        Mape {
            value: sum / n as f64,
            empty_mask: false,
        }
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NeuronSet {
    /// `(z, y, x)` voxel positions, most active first.
    pub positions: Vec<[usize; 3]>,
    /// Temporal variance at each position, descending.
    pub variances: Vec<f64>,
    /// Fewer maxima than requested were found.
    pub truncated: bool,
}

fn check_sequence(volumes: &[Tensor]) -> Result<[usize; 3]> {
    let first = volumes.first().ok_or_else(|| Error::invalid("empty volume sequence"))?;
    let dims = first.dims3()?;
    for v in volumes {
        first.check_same_shape(v, "volume sequence")?;
    }
    Ok(dims)
}

/// Per-voxel temporal variance, then 3D local maxima (26-neighborhood),
/// greedy suppression within `2 * neuron_sigma`, top `k` by variance.
pub fn extract_neurons(volumes: &[Tensor], k: usize, neuron_sigma: f64) -> Result<NeuronSet> {
    let [d, h, w] = check_sequence(volumes)?;
    let t = volumes.len() as f64;
    let n = d * h * w;
    let mut mean = vec![0.0f64; n];
    for v in volumes {
        for (m, &x) in mean.iter_mut().zip(v.data()) {
            *m += x as f64 / t;
        }
    }
    let mut var = vec![0.0f64; n];
    for v in volumes {
        for ((s, &x), m) in var.iter_mut().zip(v.data()).zip(&mean) {
            *s += (x as f64 - m).powi(2) / t;
        }
    }
    let at = |z: isize, y: isize, x: isize| -> f64 {
        if z < 0 || y < 0 || x < 0 || z >= d as isize || y >= h as isize || x >= w as isize {
            f64::NEG_INFINITY
        } else {
            var[(z as usize * h + y as usize) * w + x as usize]
        }
    };
    // tiny relative floor so float noise on a constant sequence is not "activity"
    let floor = 1e-12 * var.iter().cloned().fold(0.0, f64::max).max(1e-30);
    let mut cands = Vec::new();
    for z in 0..d as isize {
        for y in 0..h as isize {
            for x in 0..w as isize {
                let v = at(z, y, x);
                if v <= floor {
                    continue;
                }
                let mut is_max = true;
                'nb: for dz in -1..=1 {
                    for dy in -1..=1 {
                        for dx in -1..=1 {
                            if (dz, dy, dx) != (0, 0, 0) && at(z + dz, y + dy, x + dx) > v {
                                is_max = false;
                                break 'nb;
                            }
                        }
                    }
                }
                if is_max {
                    cands.push((v, [z as usize, y as usize, x as usize]));
                }
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let radius = 2.0 * neuron_sigma;
    let mut positions: Vec<[usize; 3]> = Vec::new();
    let mut variances = Vec::new();
    for (v, p) in cands {
        if positions.len() == k {
            break;
        }
        let near = positions.iter().any(|q| {
            let d2: f64 = (0..3).map(|a| (p[a] as f64 - q[a] as f64).powi(2)).sum();
            d2.sqrt() <= radius
        });
        if !near {
            positions.push(p);
            variances.push(v);
        }
    }
    Ok(NeuronSet {
        truncated: positions.len() < k,
        positions,
        variances,
    })
}

/// Mean intensity over the voxel and its 6 face neighbors (those in bounds).
pub fn neuron_trace(volumes: &[Tensor], p: [usize; 3]) -> Result<Vec<f64>> {
    let [d, h, w] = check_sequence(volumes)?;
    const OFFS: [[isize; 3]; 7] = [[0, 0, 0], [-1, 0, 0], [1, 0, 0], [0, -1, 0], [0, 1, 0], [0, 0, -1], [0, 0, 1]];
    let idx: Vec<usize> = OFFS
        .iter()
        .filter_map(|o| {
            let q = [p[0] as isize + o[0], p[1] as isize + o[1], p[2] as isize + o[2]];
            (q[0] >= 0 && q[1] >= 0 && q[2] >= 0 && q[0] < d as isize && q[1] < h as isize && q[2] < w as isize)
                .then(|| (q[0] as usize * h + q[1] as usize) * w + q[2] as usize)
        })
        .collect();
    if idx.is_empty() {
        return Err(Error::invalid(format!("neuron position {p:?} outside volume")));
    }
    Ok(volumes
        .iter()
        .map(|v| idx.iter().map(|&i| v.data()[i] as f64).sum::<f64>() / idx.len() as f64)
        .collect())
}

/// Pearson correlation; `None` when either series has zero variance.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return None;
    }
    Some((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PccResult {
    pub per_neuron: Vec<f64>,
    pub mean: f64,
    /// Indices of neurons with a flat trace, whose PCC was set to 0.
    pub zero_variance: Vec<usize>,
}

pub fn pcc_traces(gt: &[Tensor], recon: &[Tensor], neurons: &NeuronSet) -> Result<PccResult> {
    if gt.len() != recon.len() {
        return Err(Error::invalid(format!("{} reference frames vs {} reconstructed", gt.len(), recon.len())));
    }
    let mut per_neuron = Vec::with_capacity(neurons.positions.len());
    let mut zero_variance = Vec::new();
    for (i, &p) in neurons.positions.iter().enumerate() {
        let a = neuron_trace(gt, p)?;
        let b = neuron_trace(recon, p)?;
        per_neuron.push(pearson(&a, &b).unwrap_or_else(|| {
            zero_variance.push(i);
            0.0
        }));
    }
    let mean = if per_neuron.is_empty() {
        0.0
    } else {
        per_neuron.iter().sum::<f64>() / per_neuron.len() as f64
    };
    Ok(PccResult {
        per_neuron,
        mean,
        zero_variance,
    })
}

/// Aggregate report over a sequence of frames.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub psnr: f64,
    pub mape: f64,
    pub pcc_mean: f64,
    pub pcc_per_neuron: Vec<f64>,
    pub psnr_per_frame: Vec<f64>,
    pub mape_per_frame: Vec<f64>,
    pub neurons: Vec<[usize; 3]>,
    pub flags: Vec<String>,
}

/// PSNR and MAPE averaged over frames; PCC over the `k` most active
/// neurons of the reference sequence.
pub fn evaluate(gt: &[Tensor], recon: &[Tensor], k: usize, neuron_sigma: f64) -> Result<MetricsReport> {
    if gt.len() != recon.len() {
        return Err(Error::invalid(format!("{} reference frames vs {} reconstructed", gt.len(), recon.len())));
    }
    let mut flags = Vec::new();
    let mut psnr_per_frame = Vec::with_capacity(gt.len());
    let mut mape_per_frame = Vec::with_capacity(gt.len());
    for (i, (g, r)) in gt.iter().zip(recon).enumerate() {
        psnr_per_frame.push(psnr(g, r)?);
        let m = mape_masked(g, r)?;
        if m.empty_mask {
            flags.push(format!("frame {i}: empty mask"));
        }
        mape_per_frame.push(m.value);
    }
    let neurons = extract_neurons(gt, k, neuron_sigma)?;
    if neurons.truncated {
        flags.push(format!("only {} of {k} neurons found", neurons.positions.len()));
    }
    let pcc = pcc_traces(gt, recon, &neurons)?;
    for &i in &pcc.zero_variance {
        flags.push(format!("neuron {i}: flat trace"));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    Ok(MetricsReport {
        psnr: mean(&psnr_per_frame),
        mape: mean(&mape_per_frame),
        pcc_mean: pcc.mean,
        pcc_per_neuron: pcc.per_neuron,
        psnr_per_frame,
        mape_per_frame,
        neurons: neurons.positions,
        flags,
    })
}
