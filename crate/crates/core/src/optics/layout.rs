use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Lenslet geometry on the sensor. Centers are `(row, col)` in sensor pixels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LensletLayout {
    pub centers: Vec<[f64; 2]>,
    pub crop_size: (usize, usize),
    pub sensor_size: (usize, usize),
}

impl LensletLayout {
    pub fn new(centers: Vec<[f64; 2]>, crop_size: (usize, usize), sensor_size: (usize, usize)) -> Result<Self> {
        if centers.is_empty() {
            return Err(Error::invalid("lenslet layout has no centers"));
        }
        for (i, a) in centers.iter().enumerate() {
            if !(0.0..sensor_size.0 as f64).contains(&a[0]) || !(0.0..sensor_size.1 as f64).contains(&a[1]) {
                return Err(Error::invalid(format!("lenslet center {a:?} is off the sensor")));
            }
            if centers[..i].iter().any(|b| (a[0] - b[0]).hypot(a[1] - b[1]) < 0.5) {
                return Err(Error::invalid(format!("duplicate lenslet center {a:?}")));
            }
        }
        Ok(Self {
            centers,
            crop_size,
            sensor_size,
        })
    }

    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn midpoint(&self) -> [f64; 2] {
        [self.sensor_size.0 as f64 / 2.0, self.sensor_size.1 as f64 / 2.0]
    }

    /// Top-left sensor pixel of the crop around lenslet `l` (may be negative).
    pub fn crop_origin(&self, l: usize) -> (isize, isize) {
        let c = self.centers[l];
        (
            c[0].round() as isize - (self.crop_size.0 / 2) as isize,
            c[1].round() as isize - (self.crop_size.1 / 2) as isize,
        )
    }

    /// One crop per lenslet stacked along the leading axis; pixels off the
    /// sensor read as zero.
    pub fn crop_views(&self, image: &Tensor) -> Result<Tensor> {
        let [hs, ws] = image.dims2()?;
        if (hs, ws) != self.sensor_size {
            return Err(Error::shape(format!(
                "image is {hs}x{ws}, layout expects {:?}",
                self.sensor_size
            )));
        }
        let (h, w) = self.crop_size;
        let mut out = vec![0.0f32; self.len() * h * w];
        for l in 0..self.len() {
            let (r0, c0) = self.crop_origin(l);
            for y in 0..h {
                let sy = r0 + y as isize;
                if sy < 0 || sy >= hs as isize {
                    continue;
                }
                for x in 0..w {
                    let sx = c0 + x as isize;
                    if sx >= 0 && sx < ws as isize {
                        out[(l * h + y) * w + x] = image.data()[sy as usize * ws + sx as usize];
                    }
                }
            }
        }
        Tensor::new(&[self.len(), h, w], out)
    }
}

/// One central lenslet plus `n - 1` evenly spaced on a ring of `ring_radius`
/// pixels around the sensor midpoint, starting at angle 0 (along +col).
pub fn make_layout(
    n: usize,
    sensor_size: (usize, usize),
    crop_size: (usize, usize),
    ring_radius: f64,
) -> Result<LensletLayout> {
    if n == 0 {
        return Err(Error::invalid("lenslet count must be positive"));
    }
    let mid = [sensor_size.0 as f64 / 2.0, sensor_size.1 as f64 / 2.0];
    let mut centers = vec![mid];
    let ring = n - 1;
    for k in 0..ring {
        let theta = 2.0 * std::f64::consts::PI * k as f64 / ring as f64;
        centers.push([mid[0] + ring_radius * theta.sin(), mid[1] + ring_radius * theta.cos()]);
    }
    LensletLayout::new(centers, crop_size, sensor_size)
}
