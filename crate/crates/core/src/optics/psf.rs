use serde::{Deserialize, Serialize};

use super::layout::LensletLayout;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const DENOM_FLOOR: f32 = 1e-12;

/// One nonzero kernel weight: lateral displacement and value.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Tap {
    dy: isize,
    dx: isize,
    w: f32,
}

/// Per-depth sensor kernels. Kernel `z` is centered on its middle pixel and
/// describes where a unit point at depth `z` lands relative to its lateral
/// position, with the volume embedded at the center of the sensor.
#[derive(Debug, Clone, PartialEq)]
pub struct PSFStack {
    kernels: Tensor,
    sensor_size: (usize, usize),
    taps: Vec<Vec<Tap>>,
}

impl PSFStack {
    pub fn new(kernels: Tensor, sensor_size: (usize, usize)) -> Result<Self> {
        let [d, kh, kw] = kernels.dims3()?;
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(Error::shape(format!("PSF kernels must have odd size, got {kh}x{kw}")));
        }
        if kernels.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
            return Err(Error::invalid("PSF kernels must be finite and nonnegative"));
        }
        let (ry, rx) = ((kh / 2) as isize, (kw / 2) as isize);
        let taps = (0..d)
            .map(|z| {
                let k = &kernels.data()[z * kh * kw..(z + 1) * kh * kw];
                let mut t = Vec::new();
                for (i, &w) in k.iter().enumerate() {
                    if w != 0.0 {
                        t.push(Tap {
                            dy: (i / kw) as isize - ry,
                            dx: (i % kw) as isize - rx,
                            w,
                        });
                    }
                }
                t
            })
            .collect();
        Ok(Self {
            kernels,
            sensor_size,
            taps,
        })
    }

    pub fn kernels(&self) -> &Tensor {
        &self.kernels
    }

    pub fn depths(&self) -> usize {
        self.kernels.shape()[0]
    }

    pub fn sensor_size(&self) -> (usize, usize) {
        self.sensor_size
    }

    fn offset(&self, h: usize, w: usize) -> Result<(isize, isize)> {
        let (hs, ws) = self.sensor_size;
        if h > hs || w > ws {
            return Err(Error::shape(format!("volume {h}x{w} larger than sensor {hs}x{ws}")));
        }
        Ok((((hs - h) / 2) as isize, ((ws - w) / 2) as isize))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PsfConfig {
    /// Lateral spot displacement per depth step, in pixels, along each
    /// lenslet's direction from the optical axis.
    pub parallax_gain: f64,
    pub spot_sigma: f64,
}

impl Default for PsfConfig {
    fn default() -> Self {
        Self {
            parallax_gain: 0.5,
            spot_sigma: 1.0,
        }
    }
}

/// Depth kernels built from one Gaussian spot per lenslet. The spot of
/// lenslet `l` at depth `z` sits at `c_l - mid + gain * (z - z_mid) * u_l`
/// where `u_l` is the unit direction from the sensor midpoint to `c_l`
/// (zero for the central lenslet). Every depth kernel sums to one.
pub fn synth_psf(layout: &LensletLayout, depths: usize, cfg: &PsfConfig) -> Result<PSFStack> {
    if depths == 0 || cfg.spot_sigma <= 0.0 {
        return Err(Error::invalid("synth_psf needs depths > 0 and spot_sigma > 0"));
    }
    let mid = layout.midpoint();
    let z_mid = (depths as f64 - 1.0) / 2.0;
    let support = 3.0 * cfg.spot_sigma + 0.5;
    let mut reach = 0.0f64;
    let mut spots = vec![Vec::with_capacity(layout.len()); depths];
    for c in &layout.centers {
        let (oy, ox) = (c[0] - mid[0], c[1] - mid[1]);
        let norm = oy.hypot(ox);
        let (uy, ux) = if norm > 1e-9 { (oy / norm, ox / norm) } else { (0.0, 0.0) };
        for (z, s) in spots.iter_mut().enumerate() {
            let shift = cfg.parallax_gain * (z as f64 - z_mid);
            let p = [oy + shift * uy, ox + shift * ux];
            reach = reach.max(p[0].abs()).max(p[1].abs());
            s.push(p);
        }
    }
    let r = (reach + support).ceil() as usize + 1;
    let k = 2 * r + 1;
    let mut data = vec![0.0f32; depths * k * k];
    let two_s2 = 2.0 * cfg.spot_sigma * cfg.spot_sigma;
    for (z, centers) in spots.iter().enumerate() {
        let kern = &mut data[z * k * k..(z + 1) * k * k];
        for p in centers {
            let (cy, cx) = (p[0] + r as f64, p[1] + r as f64);
            let y0 = (cy - support).floor().max(0.0) as usize;
            let y1 = ((cy + support).ceil() as usize).min(k - 1);
            let x0 = (cx - support).floor().max(0.0) as usize;
            let x1 = ((cx + support).ceil() as usize).min(k - 1);
            let mut spot = Vec::new();
            let mut total = 0.0f64;
            for y in y0..=y1 {
                for x in x0..=x1 {
                    let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                    if d2 <= support * support {
                        let v = (-d2 / two_s2).exp();
                        spot.push((y * k + x, v));
                        total += v;
                    }
                }
            }
            for (i, v) in spot {
                kern[i] += (v / total / centers.len() as f64) as f32;
            }
        }
        let sum: f64 = kern.iter().map(|&v| v as f64).sum();
        for v in kern.iter_mut() {
            *v = (*v as f64 / sum) as f32;
        }
    }
    PSFStack::new(Tensor::new(&[depths, k, k], data)?, layout.sensor_size)
}

/// Rows and columns of the volume plane that a tap maps onto the sensor,
/// plus the sensor position of volume pixel (0, 0) under that tap.
struct Window {
    sy: isize,
    sx: isize,
    rows: std::ops::Range<usize>,
    cols: std::ops::Range<usize>,
}

impl PSFStack {
    fn window(&self, t: &Tap, h: usize, w: usize, (oy, ox): (isize, isize)) -> Option<Window> {
        let (hs, ws) = (self.sensor_size.0 as isize, self.sensor_size.1 as isize);
        let (sy, sx) = (oy + t.dy, ox + t.dx);
        let rows = (-sy).max(0)..(hs - sy).min(h as isize);
        let cols = (-sx).max(0)..(ws - sx).min(w as isize);
        if rows.is_empty() || cols.is_empty() {
            return None;
        }
        Some(Window {
            sy,
            sx,
            rows: rows.start as usize..rows.end as usize,
            cols: cols.start as usize..cols.end as usize,
        })
    }

    fn check_volume(&self, d: usize, h: usize, w: usize) -> Result<(isize, isize)> {
        if d != self.depths() {
            return Err(Error::shape(format!("volume has {d} depths, PSF has {}", self.depths())));
        }
        self.offset(h, w)
    }
}

/// `I = sum_z V_z * PSF_z` on the sensor, with the volume centered on it.
pub fn forward_project(v: &Tensor, psf: &PSFStack) -> Result<Tensor> {
    let [d, h, w] = v.dims3()?;
    let off = psf.check_volume(d, h, w)?;
    let (hs, ws) = psf.sensor_size;
    let mut img = vec![0.0f32; hs * ws];
    for z in 0..d {
        let plane = &v.data()[z * h * w..(z + 1) * h * w];
        if plane.iter().all(|&x| x == 0.0) {
            continue;
        }
        for t in &psf.taps[z] {
            let Some(win) = psf.window(t, h, w, off) else { continue };
            for y in win.rows.clone() {
                let src = &plane[y * w + win.cols.start..y * w + win.cols.end];
                let start = (win.sy + y as isize) as usize * ws + (win.sx + win.cols.start as isize) as usize;
                for (o, &s) in img[start..start + src.len()].iter_mut().zip(src) {
                    *o += t.w * s;
                }
            }
        }
    }
    Tensor::new(&[hs, ws], img)
}

/// Adjoint of [`forward_project`]: per-depth correlation of the image with
/// the depth kernel, read back onto a `[D, h, w]` volume grid.
pub fn back_project(image: &Tensor, psf: &PSFStack, (h, w): (usize, usize)) -> Result<Tensor> {
    let [hs, ws] = image.dims2()?;
    if (hs, ws) != psf.sensor_size {
        return Err(Error::shape(format!("image {hs}x{ws} does not match sensor {:?}", psf.sensor_size)));
    }
    let d = psf.depths();
    let off = psf.check_volume(d, h, w)?;
    let mut out = vec![0.0f32; d * h * w];
    for z in 0..d {
        let plane = &mut out[z * h * w..(z + 1) * h * w];
        for t in &psf.taps[z] {
            let Some(win) = psf.window(t, h, w, off) else { continue };
            for y in win.rows.clone() {
                let start = (win.sy + y as isize) as usize * ws + (win.sx + win.cols.start as isize) as usize;
                let src = &image.data()[start..start + win.cols.len()];
                let dst = &mut plane[y * w + win.cols.start..y * w + win.cols.end];
                for (o, &s) in dst.iter_mut().zip(src) {
                    *o += t.w * s;
                }
            }
        }
    }
    Tensor::new(&[d, h, w], out)
}

/// Poisson data term `sum(A V - I log A V)` used to monitor RL progress.
pub fn poisson_nll(image: &Tensor, v: &Tensor, psf: &PSFStack) -> Result<f64> {
    let est = forward_project(v, psf)?;
    Ok(est
        .data()
        .iter()
        .zip(image.data())
        .map(|(&e, &i)| {
            let e = (e as f64).max(DENOM_FLOOR as f64);
            e - i as f64 * e.ln()
        })
        .sum())
}

/// Multiplicative Richardson-Lucy updates `V <- V * A^T(I / A V) / A^T 1`
/// starting from `init` (uniform ones when absent).
pub fn richardson_lucy(
    image: &Tensor,
    psf: &PSFStack,
    volume_hw: (usize, usize),
    iterations: usize,
    init: Option<&Tensor>,
) -> Result<Tensor> {
    if image.data().iter().any(|&v| v < 0.0 || !v.is_finite()) {
        return Err(Error::invalid("richardson_lucy needs a finite nonnegative image"));
    }
    let shape = [psf.depths(), volume_hw.0, volume_hw.1];
    let mut v = match init {
        Some(t) => {
            if t.shape() != shape {
                return Err(Error::shape(format!("RL init {:?}, expected {shape:?}", t.shape())));
            }
            if t.data().iter().any(|&x| x <= 0.0) {
                return Err(Error::invalid("RL init must be strictly positive"));
            }
            t.clone()
        }
        None => Tensor::ones(&shape),
    };
    let norm = back_project(&Tensor::ones(&[psf.sensor_size.0, psf.sensor_size.1]), psf, volume_hw)?;
    for _ in 0..iterations {
        let est = forward_project(&v, psf)?;
        let ratio = image.zip_map(&est, |i, e| i / e.max(DENOM_FLOOR))?;
        let corr = back_project(&ratio, psf, volume_hw)?;
        for ((x, &c), &n) in v.data_mut().iter_mut().zip(corr.data()).zip(norm.data()) {
            *x *= c / n.max(DENOM_FLOOR);
        }
    }
    v.ensure_finite("richardson_lucy")?;
    Ok(v)
}
