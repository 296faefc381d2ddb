//! Orthonormal one-level Haar transform along the leading (depth) axis.
//!
//! Depth pairs `(2k, 2k+1)` map to `approx_k = (v0 + v1)/sqrt(2)` and
//! `detail_k = (v0 - v1)/sqrt(2)`. The transform is orthogonal, so its
//! log-Jacobian is exactly zero and squared norms are preserved. Lateral axes
//! are left alone.

use std::f32::consts::FRAC_1_SQRT_2;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct HaarPair {
    pub approx: Tensor,
    pub detail: Tensor,
}

/// Log-determinant contributed by one Haar step.
pub const HAAR_LOG_DET: f64 = 0.0;

pub fn haar_down_axial(v: &Tensor) -> Result<HaarPair> {
    let [d, h, w] = v.dims3()?;
    if d % 2 != 0 {
        return Err(Error::shape(format!("haar_down_axial needs even depth, got {d}")));
    }
    let plane = h * w;
    let half = d / 2;
    let mut approx = Vec::with_capacity(half * plane);
    let mut detail = Vec::with_capacity(half * plane);
    for k in 0..half {
        let even = &v.data()[2 * k * plane..(2 * k + 1) * plane];
        let odd = &v.data()[(2 * k + 1) * plane..(2 * k + 2) * plane];
        approx.extend(even.iter().zip(odd).map(|(a, b)| (a + b) * FRAC_1_SQRT_2));
        detail.extend(even.iter().zip(odd).map(|(a, b)| (a - b) * FRAC_1_SQRT_2));
    }
    Ok(HaarPair {
        approx: Tensor::new(&[half, h, w], approx)?,
        detail: Tensor::new(&[half, h, w], detail)?,
    })
}

pub fn haar_up_axial(pair: &HaarPair) -> Result<Tensor> {
    pair.approx.check_same_shape(&pair.detail, "haar_up_axial")?;
    let [half, h, w] = pair.approx.dims3()?;
    let plane = h * w;
    let mut out = Vec::with_capacity(2 * half * plane);
    for k in 0..half {
        let a = &pair.approx.data()[k * plane..(k + 1) * plane];
        let d = &pair.detail.data()[k * plane..(k + 1) * plane];
        out.extend(a.iter().zip(d).map(|(a, d)| (a + d) * FRAC_1_SQRT_2));
        out.extend(a.iter().zip(d).map(|(a, d)| (a - d) * FRAC_1_SQRT_2));
    }
    Tensor::new(&[2 * half, h, w], out)
}

/// Apply `levels` analysis steps and keep only the approximation.
pub fn approx_at(v: &Tensor, levels: usize) -> Result<Tensor> {
    let mut cur = v.clone();
    for _ in 0..levels {
        cur = haar_down_axial(&cur)?.approx;
    }
    Ok(cur)
}

/// Full pyramid: `details[i]` is the detail produced when going from level
/// `i` to `i + 1`; the returned tensor is the coarsest approximation.
pub fn pyramid(v: &Tensor, levels: usize) -> Result<(Vec<Tensor>, Tensor)> {
    let mut details = Vec::with_capacity(levels);
    let mut cur = v.clone();
    for _ in 0..levels {
        let HaarPair { approx, detail } = haar_down_axial(&cur)?;
        details.push(detail);
        cur = approx;
    }
    Ok((details, cur))
}
