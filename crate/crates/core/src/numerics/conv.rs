//! Direct 2D cross-correlation kernels on `[C, H, W]` planes.
//!
//! The input is unfolded (im2col) so every inner loop runs over a whole
//! contiguous output plane, which the compiler vectorizes.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Same,
    Valid,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub ph: usize,
    pub pw: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, cout: usize, kh: usize, kw: usize, pad: Padding) -> Option<Self> {
        let (ph, pw, oh, ow) = match pad {
            Padding::Same => (kh / 2, kw / 2, h, w),
            Padding::Valid => {
                if kh > h || kw > w {
                    return None;
                }
                (0, 0, h - kh + 1, w - kw + 1)
            }
        };
        Some(Self {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            ph,
            pw,
            oh,
            ow,
        })
    }

    /// Output column range whose input column `ox + kx - pw` is in bounds.
    #[inline]
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let lo = self.pw.saturating_sub(kx);
        let hi = (self.w + self.pw).saturating_sub(kx).min(self.ow);
        (lo, hi.max(lo))
    }

    #[inline]
    fn row_range(&self, ky: usize) -> (usize, usize) {
        let lo = self.ph.saturating_sub(ky);
        let hi = (self.h + self.ph).saturating_sub(ky).min(self.oh);
        (lo, hi.max(lo))
    }
}

/// Unfold the input into a `[cin * kh * kw, oh * ow]` matrix whose row `r`
/// holds the input pixel seen by tap `r` at every output position (zero
/// where the tap falls in the padding).
fn im2col(g: &ConvGeom, input: &[f32]) -> Vec<f32> {
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);
    let mut cols = vec![0.0f32; g.cin * g.kh * g.kw * out_plane];
    for c in 0..g.cin {
        let src = &input[c * in_plane..(c + 1) * in_plane];
        for ky in 0..g.kh {
            let (y0, y1) = g.row_range(ky);
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let row = &mut cols[r * out_plane..(r + 1) * out_plane];
                let (x0, x1) = g.col_range(kx);
                for oy in y0..y1 {
                    let iy = oy + ky - g.ph;
                    let ix0 = x0 + kx - g.pw;
                    row[oy * g.ow + x0..oy * g.ow + x1].copy_from_slice(&src[iy * g.w + ix0..iy * g.w + ix0 + (x1 - x0)]);
                }
            }
        }
    }
    cols
}

/// Output channels handled together so each unfolded row is loaded once
/// per block.
const OUT_BLOCK: usize = 4;

pub(crate) fn forward(g: &ConvGeom, input: &[f32], kernel: &[f32]) -> Vec<f32> {
    let out_plane = g.oh * g.ow;
    let taps = g.cin * g.kh * g.kw;
    let cols = im2col(g, input);
    let mut out = vec![0.0f32; g.cout * out_plane];
    for (b, block) in out.chunks_mut(OUT_BLOCK * out_plane).enumerate() {
        let o0 = b * OUT_BLOCK;
        let mut dsts: Vec<&mut [f32]> = block.chunks_mut(out_plane).collect();
        for r in 0..taps {
            let col = &cols[r * out_plane..(r + 1) * out_plane];
            for (k, dst) in dsts.iter_mut().enumerate() {
                let wv = kernel[(o0 + k) * taps + r];
                if wv == 0.0 {
                    continue;
                }
                for (d, s) in dst.iter_mut().zip(col) {
                    *d += wv * s;
                }
            }
        }
    }
    out
}

pub(crate) fn backward_input(g: &ConvGeom, grad_out: &[f32], kernel: &[f32]) -> Vec<f32> {
    let (in_plane, out_plane) = (g.h * g.w, g.oh * g.ow);
    let taps = g.cin * g.kh * g.kw;
    // Gradient of the unfolded matrix, then fold it back onto the input.
    let mut gcols = vec![0.0f32; taps * out_plane];
    for o in 0..g.cout {
        let go = &grad_out[o * out_plane..(o + 1) * out_plane];
        for (r, row) in gcols.chunks_mut(out_plane).enumerate() {
            let wv = kernel[o * taps + r];
            if wv == 0.0 {
                continue;
            }
            for (d, s) in row.iter_mut().zip(go) {
                *d += wv * s;
            }
        }
    }
    let mut gin = vec![0.0f32; g.cin * in_plane];
    for c in 0..g.cin {
        let dst = &mut gin[c * in_plane..(c + 1) * in_plane];
        for ky in 0..g.kh {
            let (y0, y1) = g.row_range(ky);
            for kx in 0..g.kw {
                let r = (c * g.kh + ky) * g.kw + kx;
                let row = &gcols[r * out_plane..(r + 1) * out_plane];
                let (x0, x1) = g.col_range(kx);
                for oy in y0..y1 {
                    let iy = oy + ky - g.ph;
                    let ix0 = x0 + kx - g.pw;
                    let drow = &mut dst[iy * g.w + ix0..iy * g.w + ix0 + (x1 - x0)];
                    for (d, s) in drow.iter_mut().zip(&row[oy * g.ow + x0..oy * g.ow + x1]) {
                        *d += s;
                    }
                }
            }
        }
    }
    gin
}

pub(crate) fn backward_kernel(g: &ConvGeom, grad_out: &[f32], input: &[f32]) -> Vec<f32> {
    let out_plane = g.oh * g.ow;
    let taps = g.cin * g.kh * g.kw;
    let cols = im2col(g, input);
    let mut gk = vec![0.0f32; g.cout * taps];
    for o in 0..g.cout {
        let go = &grad_out[o * out_plane..(o + 1) * out_plane];
        for r in 0..taps {
            gk[o * taps + r] = dot_lanes(go, &cols[r * out_plane..(r + 1) * out_plane]);
        }
    }
    gk
}

/// Dot product with eight independent accumulators so it vectorizes.
#[inline]
pub(crate) fn dot_lanes(a: &[f32], b: &[f32]) -> f32 {
    let mut lanes = [0.0f32; 8];
    let chunks = a.len() / 8;
    for i in 0..chunks {
        let (ca, cb) = (&a[i * 8..i * 8 + 8], &b[i * 8..i * 8 + 8]);
        for l in 0..8 {
            lanes[l] += ca[l] * cb[l];
        }
    }
    let mut tail = 0.0f32;
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    lanes.iter().sum::<f32>() + tail
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Textbook six-loop reference.
    fn naive(g: &ConvGeom, input: &[f32], kernel: &[f32]) -> Vec<f32> {
        let mut out = vec![0.0; g.cout * g.oh * g.ow];
        for o in 0..g.cout {
            for oy in 0..g.oh {
                for ox in 0..g.ow {
                    let mut acc = 0.0;
                    for c in 0..g.cin {
                        for ky in 0..g.kh {
                            for kx in 0..g.kw {
                                let iy = oy as isize + ky as isize - g.ph as isize;
                                let ix = ox as isize + kx as isize - g.pw as isize;
                                if iy < 0 || ix < 0 || iy >= g.h as isize || ix >= g.w as isize {
                                    continue;
                                }
                                acc += kernel[((o * g.cin + c) * g.kh + ky) * g.kw + kx]
                                    * input[(c * g.h + iy as usize) * g.w + ix as usize];
                            }
                        }
                    }
                    out[(o * g.oh + oy) * g.ow + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_reference() {
        for pad in [Padding::Same, Padding::Valid] {
            let g = ConvGeom::new(3, 7, 9, 2, 3, 5, pad).unwrap();
            let input: Vec<f32> = (0..3 * 7 * 9).map(|i| ((i * 37) % 11) as f32 - 5.0).collect();
            let kernel: Vec<f32> = (0..2 * 3 * 3 * 5).map(|i| ((i * 13) % 7) as f32 - 3.0).collect();
            let fast = forward(&g, &input, &kernel);
            let slow = naive(&g, &input, &kernel);
            for (a, b) in fast.iter().zip(&slow) {
                assert!((a - b).abs() < 1e-3, "{a} vs {b}");
            }
        }
    }

    /// `<conv(x), y> = <x, backward_input(y)> = <k, backward_kernel(y, x)>`.
    #[test]
    fn backward_kernels_are_adjoint() {
        for pad in [Padding::Same, Padding::Valid] {
            let g = ConvGeom::new(3, 7, 9, 6, 3, 5, pad).unwrap();
            let x: Vec<f32> = (0..3 * 7 * 9).map(|i| ((i * 37) % 11) as f32 - 5.0).collect();
            let k: Vec<f32> = (0..6 * 3 * 3 * 5).map(|i| ((i * 13) % 7) as f32 - 3.0).collect();
            let y: Vec<f32> = (0..6 * g.oh * g.ow).map(|i| ((i * 29) % 5) as f32 - 2.0).collect();
            let dot = |a: &[f32], b: &[f32]| a.iter().zip(b).map(|(p, q)| (p * q) as f64).sum::<f64>();
            let lhs = dot(&naive(&g, &x, &k), &y);
            assert!((lhs - dot(&x, &backward_input(&g, &y, &k))).abs() < 1e-6 * lhs.abs().max(1.0));
            assert!((lhs - dot(&k, &backward_kernel(&g, &y, &x))).abs() < 1e-6 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn dot_lanes_handles_tails() {
        let a: Vec<f32> = (0..19).map(|i| i as f32).collect();
        let expect: f32 = a.iter().map(|v| v * v).sum();
        assert_eq!(dot_lanes(&a, &a), expect);
    }
}
