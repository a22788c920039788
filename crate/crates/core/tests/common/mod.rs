//! Brute-force oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;
use std::process::Command;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use residprop::synth::{SceneSpec, ShapeKind, ShapeSpec};
use residprop::{Kernel, Plane};

pub fn random_plane(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Plane {
    let data = (0..w * h).map(|_| rng.random_range(-1.0..1.0)).collect();
    Plane::from_vec(w, h, data).unwrap()
}

/// Mostly zero plane with a few random blocks, so matching sees flat
/// regions and exact ties.
pub fn sparse_plane(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Plane {
    let mut data = vec![0.0; w * h];
    for _ in 0..rng.random_range(1..4) {
        let (bw, bh) = (rng.random_range(1..4), rng.random_range(1..4));
        let (x0, y0) = (rng.random_range(0..w), rng.random_range(0..h));
        let v = rng.random_range(0.2..1.0);
        for y in y0..(y0 + bh).min(h) {
            for x in x0..(x0 + bw).min(w) {
                data[y * w + x] = v;
            }
        }
    }
    Plane::from_vec(w, h, data).unwrap()
}

pub fn random_kernel(rng: &mut ChaCha8Rng, n: usize) -> Kernel {
    Kernel::new(n, (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

fn at(p: &Plane, x: i64, y: i64) -> f64 {
    if x < 0 || y < 0 || x >= p.width() as i64 || y >= p.height() as i64 {
        0.0
    } else {
        p.get(x as usize, y as usize)
    }
}

/// `out(x, y) = sum k(dx, dy) * map(x - dx, y - dy)`, zeros outside.
pub fn conv_oracle(map: &Plane, k: &Kernel) -> Plane {
    let r = k.radius() as i64;
    Plane::from_fn(map.width(), map.height(), |x, y| {
        let mut acc = 0.0;
        for dy in -r..=r {
            for dx in -r..=r {
                acc += k.at(dx, dy) * at(map, x as i64 - dx, y as i64 - dy);
            }
        }
        acc
    })
}

/// Exhaustive block matching: per pixel, the displacement with the least
/// patch SSD, ties to the smaller `dx²+dy²`, then smaller `dy`, then `dx`.
pub fn flow_oracle(a: &Plane, b: &Plane, radius: usize, patch: usize) -> (Vec<f64>, Vec<f64>) {
    let (r, p) = (radius as i64, (patch / 2) as i64);
    let (mut u, mut v) = (Vec::new(), Vec::new());
    for y in 0..a.height() as i64 {
        for x in 0..a.width() as i64 {
            let mut best: Option<(f64, i64, i64, i64)> = None;
            for dy in -r..=r {
                for dx in -r..=r {
                    let mut ssd = 0.0;
                    for py in -p..=p {
                        for px in -p..=p {
                            let d = at(a, x + px, y + py) - at(b, x + px + dx, y + py + dy);
                            ssd += d * d;
                        }
                    }
                    let key = (ssd, dx * dx + dy * dy, dy, dx);
                    let better = match best {
                        None => true,
                        Some(b) => key.partial_cmp(&b).unwrap().is_lt(),
                    };
                    if better {
                        best = Some(key);
                    }
                }
            }
            let (_, _, dy, dx) = best.unwrap();
            u.push(dx as f64);
            v.push(dy as f64);
        }
    }
    (u, v)
}

fn angle(dx: f64, dy: f64) -> f64 {
    let a = dy.atan2(dx);
    if a < 0.0 {
        a + 2.0 * PI
    } else {
        a
    }
}

/// Histogram written from the definition: ring by magnitude, cell of that
/// ring nearest in angle, weight equal to the magnitude (1 for zero vectors).
pub fn histogram_oracle(u: &[f64], v: &[f64], mask: Option<&[bool]>, size: usize) -> Vec<f64> {
    let n = size as i64;
    let max_ring = n / 2;
    let mut h = vec![0.0; size * size];
    for i in 0..u.len() {
        if mask.is_some_and(|m| !m[i]) {
            continue;
        }
        let m = (u[i] * u[i] + v[i] * v[i]).sqrt();
        let ring = (if m < 0.5 {
            0
        } else if m < 1.5 {
            1
        } else if m < 2.5 {
            2
        } else {
            3
        })
        .min(max_ring);
        let (dx, dy) = if ring == 0 {
            (0, 0)
        } else {
            let mut cells: Vec<(i64, i64)> = (-ring..=ring)
                .flat_map(|dy| (-ring..=ring).map(move |dx| (dx, dy)))
                .filter(|&(dx, dy)| dx.abs().max(dy.abs()) == ring)
                .collect();
            cells.sort_by(|a, b| angle(a.0 as f64, a.1 as f64).total_cmp(&angle(b.0 as f64, b.1 as f64)));
            let bins = cells.len() as f64;
            let bin = (angle(u[i], v[i]) / (2.0 * PI / bins)).round() as usize % cells.len();
            cells[bin]
        };
        let idx = ((dy + max_ring) * n + dx + max_ring) as usize;
        h[idx] += if m == 0.0 { 1.0 } else { m };
    }
    h
}

/// Flow kernel from an oracle histogram: Gaussian blur, then unit norm; the
/// center impulse when only the center cell is populated.
pub fn flow_kernel_oracle(hist: &[f64], size: usize, sigma: f64) -> Option<Vec<f64>> {
    if hist.iter().all(|&w| w == 0.0) {
        return None;
    }
    let n = size as i64;
    let c = (size * size) / 2;
    if hist.iter().enumerate().all(|(i, &w)| i == c || w == 0.0) {
        let mut k = vec![0.0; size * size];
        k[c] = 1.0;
        return Some(k);
    }
    let mut out = vec![0.0; size * size];
    for o in 0..size * size {
        let (ox, oy) = ((o as i64) % n, (o as i64) / n);
        for i in 0..size * size {
            let (ix, iy) = ((i as i64) % n, (i as i64) / n);
            let d2 = ((ox - ix).pow(2) + (oy - iy).pow(2)) as f64;
            out[o] += hist[i] * (-d2 / (2.0 * sigma * sigma)).exp();
        }
    }
    let norm = out.iter().map(|w| w * w).sum::<f64>().sqrt();
    Some(out.iter().map(|w| w / norm).collect())
}

/// Quantile by linear interpolation between the order statistics around
/// rank `q·(n-1)`, sorting with a plain insertion sort.
pub fn quantile_oracle(values: &[f64], q: f64) -> f64 {
    let mut s: Vec<f64> = Vec::new();
    for &v in values {
        let pos = s.iter().position(|&x| x > v).unwrap_or(s.len());
        s.insert(pos, v);
    }
    let rank = q * (s.len() - 1) as f64;
    let below = rank.floor() as usize;
    if below + 1 >= s.len() {
        return s[below];
    }
    let t = rank - below as f64;
    (1.0 - t) * s[below] + t * s[below + 1]
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn shape(kind: ShapeKind, size: usize, intensity: f64, pos: [f64; 2], vel: [f64; 2]) -> ShapeSpec {
    ShapeSpec {
        kind,
        size,
        intensity,
        position: pos,
        velocity: vel,
        channels: None,
    }
}

/// One-channel scene of three shapes moving together with `vel`, placed
/// around the canvas center.
pub fn translating_scene(rng: &mut ChaCha8Rng, side: usize, vel: [f64; 2]) -> SceneSpec {
    let mid = side as f64 / 2.0;
    let mut jitter = || rng.random_range(-3i32..=3) as f64;
    SceneSpec {
        width: side,
        height: side,
        channels: 1,
        shapes: vec![
            shape(ShapeKind::Triangle, 6, 1.0, [mid - 6.0 + jitter(), mid - 5.0 + jitter()], vel),
            shape(ShapeKind::Rect, 3, 0.6, [mid + 2.0 + jitter(), mid - 4.0 + jitter()], vel),
            shape(ShapeKind::Blob, 5, 0.8, [mid - 1.0 + jitter(), mid + 2.0 + jitter()], vel),
        ],
        noise_sigma: 0.0,
        events: Vec::new(),
        seed: 0,
        bilinear: false,
    }
}

/// Every cell at Chebyshev distance `d` from the origin.
pub fn ring(d: i64) -> Vec<(i64, i64)> {
    (-d..=d)
        .flat_map(|dy| (-d..=d).map(move |dx| (dx, dy)))
        .filter(|&(dx, dy)| dx.abs().max(dy.abs()) == d)
        .collect()
}

pub struct CliOutput {
    pub code: i32,
    pub stdout: String,
    pub stderr: String,
}

pub fn cli(args: &[&str], threads: Option<&str>) -> CliOutput {
    let mut cmd = Command::new(option_env!("CARGO_BIN_EXE_residprop").expect("binary path"));
    cmd.args(args);
    match threads {
        Some(t) => cmd.env("RESIDPROP_THREADS", t),
        None => cmd.env_remove("RESIDPROP_THREADS"),
    };
    let out = cmd.output().expect("spawn residprop");
    CliOutput {
        code: out.status.code().unwrap_or(-1),
        stdout: String::from_utf8_lossy(&out.stdout).into_owned(),
        stderr: String::from_utf8_lossy(&out.stderr).into_owned(),
    }
}

/// Relative path to contents for every file under `dir`.
pub fn snapshot(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// Small two-class manifest used by the CLI tests.
pub const SMALL_MANIFEST: &str = r#"{
  "frames": 12,
  "seed": 3,
  "split": {"train_per_class": 3},
  "classes": [
    {"label": "right", "count": 4, "jitter": 1, "template": {"width": 16, "height": 12, "channels": 2,
      "noise_sigma": 0.01, "shapes": [
      {"kind": "triangle", "size": 4, "intensity": 1.0, "position": [3, 4], "velocity": [1, 0]},
      {"kind": "blob", "size": 4, "intensity": 0.7, "position": [5, 2], "velocity": [1, 0], "channels": [1]}]}},
    {"label": "down", "count": 4, "jitter": 1, "template": {"width": 16, "height": 12, "channels": 2,
      "noise_sigma": 0.01, "shapes": [
      {"kind": "rect", "size": 3, "intensity": 0.9, "position": [6, 1], "velocity": [0, 1]},
      {"kind": "blob", "size": 4, "intensity": 0.7, "position": [8, 2], "velocity": [0, 1], "channels": [1]}]}}
  ]
}"#;

pub const SMALL_CONFIG: &str = r#"{
  "fit": {"max_iters": 30},
  "modes": ["baseline", "rollout", "kf2"],
  "ratios": [0.4, 0.7, 1.0],
  "tune": {"rounds": 1, "steps_per_round": 5},
  "match": {"observed": 4, "horizon": 4, "size": 3},
  "report": {"svg": true}
}"#;
