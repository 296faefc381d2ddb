use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Lenslet centers from the image of a point at the central depth.
///
/// Candidates are strict local maxima (no lower than any of the 8 neighbors
/// and above the smallest of them) brighter than 20% of the image maximum.
/// Greedy non-maximum suppression with radius `min(crop)/4` keeps the
/// brightest candidate in each neighborhood. Positions are refined to
/// sub-pixel precision with the 3x3 intensity centroid.
pub fn find_lenslet_centers(
    image: &Tensor,
    expected_n: usize,
    crop_size: (usize, usize),
) -> Result<Vec<[f64; 2]>> {
    let [h, w] = image.dims2()?;
    let px = |y: usize, x: usize| image.data()[y * w + x];
    let cut = 0.2 * image.max();
    let mut cands = Vec::new();
    for y in 1..h.saturating_sub(1) {
        for x in 1..w.saturating_sub(1) {
            let v = px(y, x);
            if v <= cut || v <= 0.0 {
                continue;
            }
            let mut lowest = f32::INFINITY;
            let mut is_max = true;
            for (dy, dx) in NEIGHBORS {
                let n = px((y as isize + dy) as usize, (x as isize + dx) as usize);
                is_max &= v >= n;
                lowest = lowest.min(n);
            }
            if is_max && v > lowest {
                cands.push((v, y, x));
            }
        }
    }
    cands.sort_by(|a, b| b.0.total_cmp(&a.0).then((a.1, a.2).cmp(&(b.1, b.2))));
    let radius = crop_size.0.min(crop_size.1) as f64 / 4.0;
    let mut kept: Vec<(usize, usize)> = Vec::new();
    for &(_, y, x) in &cands {
        let near = kept
            .iter()
            .any(|&(ky, kx)| (ky as f64 - y as f64).hypot(kx as f64 - x as f64) <= radius);
        if !near {
            kept.push((y, x));
        }
    }
    if kept.len() < expected_n {
        return Err(Error::TooFewCenters {
            found: kept.len(),
            expected: expected_n,
        });
    }
    Ok(kept
        .into_iter()
        .take(expected_n)
        .map(|(y, x)| {
            let (mut m, mut my, mut mx) = (0.0f64, 0.0, 0.0);
            for dy in -1isize..=1 {
                for dx in -1isize..=1 {
                    let v = px((y as isize + dy) as usize, (x as isize + dx) as usize).max(0.0) as f64;
                    m += v;
                    my += v * dy as f64;
                    mx += v * dx as f64;
                }
            }
            [y as f64 + my / m, x as f64 + mx / m]
        })
        .collect())
}

const NEIGHBORS: [(isize, isize); 8] = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)];
