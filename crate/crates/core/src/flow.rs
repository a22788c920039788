//! Block-matching optical flow, flow-to-kernel histograms and kernel match
//! scores.

use std::f64::consts::FRAC_PI_2;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::tensor::{l2_normalize, Kernel, Plane};

pub const DEFAULT_RADIUS: usize = 3;
pub const DEFAULT_PATCH: usize = 5;
pub const DEFAULT_SIGMA: f64 = 0.5;
/// Upper magnitude bounds of rings 0, 1 and 2; anything larger is ring 3.
pub const RING_THRESHOLDS: [f64; 3] = [0.5, 1.5, 2.5];

/// A kernel built from a flow histogram. Same layout as a motion kernel.
pub type FlowKernel = Kernel;

#[derive(Clone, Debug, PartialEq)]
pub struct FlowField {
    pub u: Plane,
    pub v: Plane,
}

impl FlowField {
    pub fn zeros(width: usize, height: usize) -> Self {
        FlowField {
            u: Plane::zeros(width, height),
            v: Plane::zeros(width, height),
        }
    }

    pub fn uniform(width: usize, height: usize, u: f64, v: f64) -> Self {
        FlowField {
            u: Plane::filled(width, height, u),
            v: Plane::filled(width, height, v),
        }
    }

    pub fn width(&self) -> usize {
        self.u.width()
    }

    pub fn height(&self) -> usize {
        self.u.height()
    }

    pub fn vectors(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.u.as_slice().iter().copied().zip(self.v.as_slice().iter().copied())
    }

    /// `x,y,u,v` rows.
    pub fn to_csv(&self) -> String {
        let mut s = format!("{}x,y,u,v\n", crate::report::CSV_SCHEMA);
        for y in 0..self.height() {
            for x in 0..self.width() {
                writeln!(s, "{x},{y},{},{}", self.u.get(x, y), self.v.get(x, y)).unwrap();
            }
        }
        s
    }
}

fn same_shape(a: &Plane, b: &Plane) -> Result<()> {
    if (a.width(), a.height()) != (b.width(), b.height()) {
        return Err(Error::ShapeMismatch {
            expected: (1, a.width(), a.height()),
            got: (1, b.width(), b.height()),
        });
    }
    Ok(())
}

/// Candidate displacements in tie-break order: smallest `dx²+dy²`, then
/// `(dy, dx)` lexicographically.
fn candidates(radius: usize) -> Vec<(i64, i64)> {
    let r = radius as i64;
    let mut c: Vec<(i64, i64)> = (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dx, dy))).collect();
    c.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dy, dx));
    c
}

/// Integer flow from `a` to `b` with the default 5×5 patch.
pub fn estimate_flow(a: &Plane, b: &Plane, radius: usize) -> Result<FlowField> {
    estimate_flow_with_patch(a, b, radius, DEFAULT_PATCH)
}

/// For every pixel, the displacement within `±radius` minimizing the SSD
/// between the patch around it in `a` and the displaced patch in `b`,
/// reading zeros outside the planes.
pub fn estimate_flow_with_patch(a: &Plane, b: &Plane, radius: usize, patch: usize) -> Result<FlowField> {
    same_shape(a, b)?;
    if radius == 0 {
        return Err(Error::OutOfRange("flow radius 0".into()));
    }
    if patch % 2 == 0 {
        return Err(Error::OutOfRange(format!("patch size {patch}")));
    }
    let (w, h) = (a.width() as i64, a.height() as i64);
    let p = (patch / 2) as i64;
    let read = |pl: &Plane, x: i64, y: i64| {
        if x < 0 || y < 0 || x >= w || y >= h {
            0.0
        } else {
            pl.get(x as usize, y as usize)
        }
    };
    let cands = candidates(radius);
    let rows: Vec<Vec<(i64, i64)>> = (0..h)
        .into_par_iter()
        .map(|y| {
            (0..w)
                .map(|x| {
                    let mut best = (f64::INFINITY, (0, 0));
                    for &(dx, dy) in &cands {
                        let mut ssd = 0.0;
                        for py in -p..=p {
                            for px in -p..=p {
                                let d = read(a, x + px, y + py) - read(b, x + dx + px, y + dy + py);
                                ssd += d * d;
                            }
                        }
                        if ssd < best.0 {
                            best = (ssd, (dx, dy));
                        }
                    }
                    best.1
                })
                .collect()
        })
        .collect();
    let mut f = FlowField::zeros(a.width(), a.height());
    for (y, row) in rows.iter().enumerate() {
        for (x, &(dx, dy)) in row.iter().enumerate() {
            f.u.set(x, y, dx as f64);
            f.v.set(x, y, dy as f64);
        }
    }
    Ok(f)
}

pub fn ring_of(magnitude: f64) -> usize {
    RING_THRESHOLDS.iter().take_while(|&&t| magnitude >= t).count()
}

/// Cells of ring `rho` ordered by angle `atan2(dy, dx)` from east.
pub fn ring_cells(rho: usize) -> Vec<(i64, i64)> {
    if rho == 0 {
        return vec![(0, 0)];
    }
    let r = rho as i64;
    // one quadrant [0°, 90°) rotated three times
    let quarter: Vec<(i64, i64)> = (0..=r).map(|dy| (r, dy)).chain((1..r).rev().map(|dx| (dx, r))).collect();
    let mut cells = Vec::with_capacity(8 * rho);
    let mut q = quarter;
    for _ in 0..4 {
        cells.extend_from_slice(&q);
        q = q.iter().map(|&(dx, dy)| (-dy, dx)).collect();
    }
    cells
}

/// Direction bin in `0..8·rho`. Vectors are first rotated into the
/// quadrant `[0°, 90°)` exactly, so a 90° rotation shifts the bin by `2·rho`
/// without rounding effects.
fn direction_bin(u: f64, v: f64, rho: usize) -> usize {
    let (mut x, mut y, mut quadrant) = (u, v, 0);
    while !(x > 0.0 && y >= 0.0) {
        (x, y) = (y, -x);
        quadrant += 1;
    }
    let per_quadrant = 2 * rho;
    let step = FRAC_PI_2 / per_quadrant as f64;
    let local = ((y.atan2(x) / step) + 0.5).floor() as usize;
    (quadrant * per_quadrant + local) % (8 * rho)
}

/// Kernel-shaped histogram of the flow vectors, before smoothing.
/// Only pixels with `mask[i]` set contribute when a mask is given.
pub fn flow_histogram(f: &FlowField, size: usize, mask: Option<&[bool]>) -> Result<Kernel> {
    let mut k = Kernel::zeros(size)?;
    let max_ring = size / 2;
    let rings: Vec<Vec<(i64, i64)>> = (0..=max_ring).map(ring_cells).collect();
    if let Some(m) = mask {
        if m.len() != f.u.as_slice().len() {
            return Err(Error::SizeMismatch(m.len(), f.u.as_slice().len()));
        }
    }
    for (i, (u, v)) in f.vectors().enumerate() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        if !(u.is_finite() && v.is_finite()) {
            return Err(Error::NonFinite("flow field"));
        }
        let m = (u * u + v * v).sqrt();
        let rho = ring_of(m).min(max_ring);
        let (dx, dy) = if rho == 0 {
            (0, 0)
        } else {
            rings[rho][direction_bin(u, v, rho)]
        };
        let weight = if m == 0.0 { 1.0 } else { m };
        k.set(dx, dy, k.at(dx, dy) + weight);
    }
    Ok(k)
}

/// Gaussian blur of a kernel-shaped histogram, truncated at its boundary.
pub fn smooth(k: &Kernel, sigma: f64) -> Kernel {
    if sigma <= 0.0 {
        return k.clone();
    }
    let r = k.radius() as i64;
    let mut out = Kernel::zeros(k.size()).expect("odd size");
    for oy in -r..=r {
        for ox in -r..=r {
            let mut acc = 0.0;
            for iy in -r..=r {
                for ix in -r..=r {
                    let d2 = ((ox - ix) * (ox - ix) + (oy - iy) * (oy - iy)) as f64;
                    acc += k.at(ix, iy) * (-d2 / (2.0 * sigma * sigma)).exp();
                }
            }
            out.set(ox, oy, acc);
        }
    }
    out
}

/// One flow kernel per size. A flow field without any motion gives the
/// center impulse directly, with no smoothing.
pub fn flow_to_kernels(f: &FlowField, sizes: &[usize], sigma: f64) -> Result<Vec<FlowKernel>> {
    flow_to_kernels_masked(f, None, sizes, sigma)?.ok_or(Error::Empty("flow field"))
}

/// As [`flow_to_kernels`] over the masked pixels; `None` when the mask
/// selects nothing.
pub fn flow_to_kernels_masked(
    f: &FlowField,
    mask: Option<&[bool]>,
    sizes: &[usize],
    sigma: f64,
) -> Result<Option<Vec<FlowKernel>>> {
    if !(sigma >= 0.0) {
        return Err(Error::OutOfRange(format!("sigma {sigma}")));
    }
    let mut out = Vec::with_capacity(sizes.len());
    for &n in sizes {
        let hist = flow_histogram(f, n, mask)?;
        if hist.norm() == 0.0 {
            return Ok(None);
        }
        let moving = hist.weights().iter().enumerate().any(|(i, &w)| w != 0.0 && hist.offset_of(i) != (0, 0));
        let k = if moving { l2_normalize(&smooth(&hist, sigma))? } else { Kernel::identity(n)? };
        out.push(k);
    }
    Ok(Some(out))
}

/// Inner product of two vectorized kernels.
pub fn kernel_match(k: &Kernel, kof: &FlowKernel) -> Result<f64> {
    if k.size() != kof.size() {
        return Err(Error::SizeMismatch(k.size(), kof.size()));
    }
    Ok(k.weights().iter().zip(kof.weights()).map(|(a, b)| a * b).sum())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MatchStats {
    pub median: f64,
    pub q25: f64,
    pub q75: f64,
    pub p10: f64,
    pub p90: f64,
}

/// Quantile of sorted data, interpolating linearly between order
/// statistics at position `q·(n-1)`.
pub fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + frac * (sorted[hi] - sorted[lo])
    }
}

pub fn match_statistics(scores: &[f64]) -> Result<MatchStats> {
    if scores.is_empty() {
        return Err(Error::Empty("scores"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores"));
    }
    let mut s = scores.to_vec();
    s.sort_by(f64::total_cmp);
    Ok(MatchStats {
        median: quantile_sorted(&s, 0.5),
        q25: quantile_sorted(&s, 0.25),
        q75: quantile_sorted(&s, 0.75),
        p10: quantile_sorted(&s, 0.1),
        p90: quantile_sorted(&s, 0.9),
    })
}

/// Pixels where any of the planes exceeds `tau` in magnitude.
pub fn support_mask(planes: &[&[f64]], tau: f64) -> Vec<bool> {
    let n = planes.first().map_or(0, |p| p.len());
    (0..n).map(|i| planes.iter().any(|p| p[i].abs() > tau)).collect()
}

/// Kernel weights as a CSV grid, one row per `dy`.
pub fn kernel_to_csv(k: &Kernel) -> String {
    let n = k.size();
    let mut s = String::new();
    for row in k.weights().chunks(n) {
        let cells: Vec<String> = row.iter().map(|v| v.to_string()).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}
