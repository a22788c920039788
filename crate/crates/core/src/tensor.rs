//! Dense feature tensors, residual algebra and the per-channel 2D operators
//! shared by the rest of the crate.
//!
//! Layout is channel-major, then row-major within a channel: the value at
//! channel `c`, column `x`, row `y` lives at `c * W * H + y * W + x`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default near-zero threshold used by [`sparsity`].
pub const DEFAULT_SPARSITY_TAU: f64 = 0.01;

/// A single real-valued `W x H` plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Plane {
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn zeros(width: usize, height: usize) -> Self {
        Plane::filled(width, height, 0.0)
    }

    pub fn filled(width: usize, height: usize, value: f64) -> Self {
        Plane {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 || data.len() != width * height {
            return Err(Error::ShapeMismatch {
                expected: (1, width, height),
                got: (1, data.len(), 1),
            });
        }
        Ok(Plane {
            width,
            height,
            data,
        })
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        Plane {
            width,
            height,
            data,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: f64) {
        self.data[y * self.width + x] = v;
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }
}

/// Dense `C x W x H` feature map at one timestep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureTensor {
    channels: usize,
    width: usize,
    height: usize,
    data: Vec<f64>,
}

impl FeatureTensor {
    pub fn zeros(channels: usize, width: usize, height: usize) -> Self {
        FeatureTensor {
            channels,
            width,
            height,
            data: vec![0.0; channels * width * height],
        }
    }

    pub fn from_vec(channels: usize, width: usize, height: usize, data: Vec<f64>) -> Result<Self> {
        if channels == 0 || width == 0 || height == 0 {
            return Err(Error::ShapeMismatch {
                expected: (1, 1, 1),
                got: (channels, width, height),
            });
        }
        if data.len() != channels * width * height {
            return Err(Error::ShapeMismatch {
                expected: (channels, width, height),
                got: (data.len(), 1, 1),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("feature tensor values"));
        }
        Ok(FeatureTensor {
            channels,
            width,
            height,
            data,
        })
    }

    pub fn from_planes(planes: &[Plane]) -> Result<Self> {
        let first = planes.first().ok_or(Error::Empty("planes"))?;
        let (w, h) = (first.width, first.height);
        let mut data = Vec::with_capacity(planes.len() * w * h);
        for p in planes {
            if p.width != w || p.height != h {
                return Err(Error::ShapeMismatch {
                    expected: (planes.len(), w, h),
                    got: (planes.len(), p.width, p.height),
                });
            }
            data.extend_from_slice(&p.data);
        }
        FeatureTensor::from_vec(planes.len(), w, h, data)
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.channels, self.width, self.height)
    }

    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn plane(&self, c: usize) -> Plane {
        Plane {
            width: self.width,
            height: self.height,
            data: self.channel(c).to_vec(),
        }
    }

    pub fn get(&self, c: usize, x: usize, y: usize) -> f64 {
        self.data[c * self.plane_len() + y * self.width + x]
    }

    pub fn set(&mut self, c: usize, x: usize, y: usize, v: f64) {
        let n = self.plane_len();
        self.data[c * n + y * self.width + x] = v;
    }

    pub fn ensure_same_shape(&self, other: &FeatureTensor) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::ShapeMismatch {
                expected: self.shape(),
                got: other.shape(),
            });
        }
        Ok(())
    }

    pub fn add(&self, other: &FeatureTensor) -> Result<FeatureTensor> {
        self.zip_with(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &FeatureTensor) -> Result<FeatureTensor> {
        self.zip_with(other, |a, b| a - b)
    }

    pub fn zip_with(
        &self,
        other: &FeatureTensor,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<FeatureTensor> {
        self.ensure_same_shape(other)?;
        Ok(self.with_data(
            self.data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        ))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> FeatureTensor {
        self.with_data(self.data.iter().map(|&v| f(v)).collect())
    }

    /// Sum of squared differences against `other`.
    pub fn squared_distance(&self, other: &FeatureTensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum())
    }

    pub fn mse(&self, other: &FeatureTensor) -> Result<f64> {
        Ok(self.squared_distance(other)? / self.data.len() as f64)
    }

    pub fn max_abs_diff(&self, other: &FeatureTensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn with_data(&self, data: Vec<f64>) -> FeatureTensor {
        FeatureTensor {
            channels: self.channels,
            width: self.width,
            height: self.height,
            data,
        }
    }
}

/// Ordered frames sharing one `(C, W, H)` shape.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSequence {
    frames: Vec<FeatureTensor>,
}

impl FeatureSequence {
    pub fn new(frames: Vec<FeatureTensor>) -> Result<Self> {
        let first = frames.first().ok_or(Error::TooShort { needed: 1, got: 0 })?;
        for f in &frames[1..] {
            first.ensure_same_shape(f)?;
        }
        Ok(FeatureSequence { frames })
    }

    pub fn frames(&self) -> &[FeatureTensor] {
        &self.frames
    }

    pub fn into_frames(self) -> Vec<FeatureTensor> {
        self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        self.frames[0].shape()
    }

    pub fn prefix(&self, len: usize) -> Result<FeatureSequence> {
        if len == 0 || len > self.frames.len() {
            return Err(Error::OutOfRange(format!(
                "prefix length {len} of a {}-frame sequence",
                self.frames.len()
            )));
        }
        Ok(FeatureSequence {
            frames: self.frames[..len].to_vec(),
        })
    }
}

impl std::ops::Index<usize> for FeatureSequence {
    type Output = FeatureTensor;

    fn index(&self, i: usize) -> &FeatureTensor {
        &self.frames[i]
    }
}

/// Residuals `r_2..r_T` of a sequence, one fewer than its frames.
#[derive(Clone, Debug, PartialEq)]
pub struct ResidualSequence {
    residuals: Vec<FeatureTensor>,
}

impl ResidualSequence {
    pub fn residuals(&self) -> &[FeatureTensor] {
        &self.residuals
    }

    pub fn into_residuals(self) -> Vec<FeatureTensor> {
        self.residuals
    }

    pub fn len(&self) -> usize {
        self.residuals.len()
    }

    pub fn is_empty(&self) -> bool {
        self.residuals.is_empty()
    }
}

impl std::ops::Index<usize> for ResidualSequence {
    type Output = FeatureTensor;

    fn index(&self, i: usize) -> &FeatureTensor {
        &self.residuals[i]
    }
}

/// Pointwise temporal differences of consecutive frames.
pub fn compute_residuals(seq: &FeatureSequence) -> Result<ResidualSequence> {
    residuals_of(seq.frames())
}

pub fn residuals_of(frames: &[FeatureTensor]) -> Result<ResidualSequence> {
    if frames.len() < 2 {
        return Err(Error::TooShort {
            needed: 2,
            got: frames.len(),
        });
    }
    let residuals = frames
        .windows(2)
        .map(|w| w[1].sub(&w[0]))
        .collect::<Result<Vec<_>>>()?;
    Ok(ResidualSequence { residuals })
}

/// `d_t + r_{t+1}`.
pub fn reconstruct(feature: &FeatureTensor, residual: &FeatureTensor) -> Result<FeatureTensor> {
    feature.add(residual)
}

/// Square odd-sized 2D kernel. Cell `(dx, dy)` is addressed relative to the
/// center, `-r <= dx, dy <= r` with `r = (size - 1) / 2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    size: usize,
    weights: Vec<f64>,
}

impl Kernel {
    pub fn new(size: usize, weights: Vec<f64>) -> Result<Self> {
        if size % 2 == 0 {
            return Err(Error::BadKernel(format!("size {size} is not odd")));
        }
        if weights.len() != size * size {
            return Err(Error::BadKernel(format!(
                "{} weights for a {size}x{size} kernel",
                weights.len()
            )));
        }
        Ok(Kernel { size, weights })
    }

    pub fn zeros(size: usize) -> Result<Self> {
        Kernel::new(size, vec![0.0; size * size])
    }

    /// Unit impulse at centered offset `(dx, dy)`.
    pub fn impulse(size: usize, dx: i64, dy: i64) -> Result<Self> {
        let mut k = Kernel::zeros(size)?;
        let r = k.radius() as i64;
        if dx.abs() > r || dy.abs() > r {
            return Err(Error::OutOfRing { size, dx, dy });
        }
        k.set(dx, dy, 1.0);
        Ok(k)
    }

    pub fn identity(size: usize) -> Result<Self> {
        Kernel::impulse(size, 0, 0)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn radius(&self) -> usize {
        (self.size - 1) / 2
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut [f64] {
        &mut self.weights
    }

    fn index(&self, dx: i64, dy: i64) -> usize {
        let r = self.radius() as i64;
        ((dy + r) as usize) * self.size + (dx + r) as usize
    }

    pub fn at(&self, dx: i64, dy: i64) -> f64 {
        self.weights[self.index(dx, dy)]
    }

    pub fn set(&mut self, dx: i64, dy: i64, v: f64) {
        let i = self.index(dx, dy);
        self.weights[i] = v;
    }

    /// Centered offset of cell index `i` in row-major order.
    pub fn offset_of(&self, i: usize) -> (i64, i64) {
        let r = self.radius() as i64;
        ((i % self.size) as i64 - r, (i / self.size) as i64 - r)
    }

    pub fn norm(&self) -> f64 {
        self.weights.iter().map(|w| w * w).sum::<f64>().sqrt()
    }

    pub fn is_unit(&self, tol: f64) -> bool {
        (self.norm() - 1.0).abs() <= tol
    }

    /// Offset of the largest weight; the first cell in row-major order wins ties.
    pub fn argmax(&self) -> (i64, i64) {
        let mut best = 0;
        for (i, &w) in self.weights.iter().enumerate() {
            if w > self.weights[best] {
                best = i;
            }
        }
        self.offset_of(best)
    }

    /// Zero-pads this kernel to a larger odd size, keeping it centered.
    pub fn embed(&self, size: usize) -> Result<Kernel> {
        if size < self.size {
            return Err(Error::SizeMismatch(self.size, size));
        }
        let mut out = Kernel::zeros(size)?;
        for i in 0..self.weights.len() {
            let (dx, dy) = self.offset_of(i);
            out.set(dx, dy, self.weights[i]);
        }
        Ok(out)
    }
}

pub fn l2_normalize(k: &Kernel) -> Result<Kernel> {
    let n = k.norm();
    if n == 0.0 {
        return Err(Error::ZeroKernel);
    }
    if !n.is_finite() {
        return Err(Error::NonFinite("kernel norm"));
    }
    Ok(Kernel {
        size: k.size,
        weights: k.weights.iter().map(|w| w / n).collect(),
    })
}

pub(crate) fn check_kernel_fits(k: &Kernel, width: usize, height: usize) -> Result<()> {
    if k.size % 2 == 0 {
        return Err(Error::BadKernel(format!("size {} is not odd", k.size)));
    }
    let limit = (2 * width - 1).min(2 * height - 1);
    if k.size > limit {
        return Err(Error::BadKernel(format!(
            "{}x{} kernel exceeds a {width}x{height} plane",
            k.size, k.size
        )));
    }
    Ok(())
}

/// `out(x, y) = sum k(i, j) * src(x - i, y - j)` with zero padding; writes
/// into `out`, which must have the same length as `src`.
pub(crate) fn convolve_slice(src: &[f64], width: usize, height: usize, k: &Kernel, out: &mut [f64]) {
    out.iter_mut().for_each(|v| *v = 0.0);
    let (w, h) = (width as i64, height as i64);
    for (i, &wt) in k.weights.iter().enumerate() {
        if wt == 0.0 {
            continue;
        }
        let (dx, dy) = k.offset_of(i);
        let x0 = dx.max(0);
        let x1 = (w + dx).min(w);
        if x0 >= x1 {
            continue;
        }
        for y in dy.max(0)..(h + dy).min(h) {
            let sy = y - dy;
            let dst = &mut out[(y * w + x0) as usize..(y * w + x1) as usize];
            let s = &src[(sy * w + x0 - dx) as usize..(sy * w + x1 - dx) as usize];
            for (d, v) in dst.iter_mut().zip(s) {
                *d += wt * v;
            }
        }
    }
}

/// Cross-correlation used by kernel gradients:
/// `g(i, j) = sum_{x,y} err(x, y) * src(x - i, y - j)`, accumulated into `grad`.
pub(crate) fn correlate_into(
    src: &[f64],
    err: &[f64],
    width: usize,
    height: usize,
    grad: &mut Kernel,
) {
    let (w, h) = (width as i64, height as i64);
    for i in 0..grad.weights.len() {
        let (dx, dy) = grad.offset_of(i);
        let x0 = dx.max(0);
        let x1 = (w + dx).min(w);
        if x0 >= x1 {
            continue;
        }
        let mut acc = 0.0;
        for y in dy.max(0)..(h + dy).min(h) {
            let sy = y - dy;
            let e = &err[(y * w + x0) as usize..(y * w + x1) as usize];
            let s = &src[(sy * w + x0 - dx) as usize..(sy * w + x1 - dx) as usize];
            acc += e.iter().zip(s).map(|(a, b)| a * b).sum::<f64>();
        }
        grad.weights[i] += acc;
    }
}

/// Same-size zero-padded true convolution of one plane.
pub fn convolve_channel(map: &Plane, k: &Kernel) -> Result<Plane> {
    check_kernel_fits(k, map.width, map.height)?;
    let mut out = Plane::zeros(map.width, map.height);
    convolve_slice(&map.data, map.width, map.height, k, &mut out.data);
    Ok(out)
}

/// Forward differences along x into `out`; the last column is zero.
pub(crate) fn diff_x(src: &[f64], width: usize, out: &mut [f64]) {
    for (row, orow) in src.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        for x in 0..width - 1 {
            orow[x] = row[x + 1] - row[x];
        }
        orow[width - 1] = 0.0;
    }
}

/// Forward differences along y into `out`; the last row is zero.
pub(crate) fn diff_y(src: &[f64], width: usize, out: &mut [f64]) {
    let n = src.len();
    for i in 0..n - width {
        out[i] = src[i + width] - src[i];
    }
    out[n - width..].iter_mut().for_each(|v| *v = 0.0);
}

/// Adjoint of [`diff_x`], accumulated with weight `scale` into `out`.
pub(crate) fn diff_x_adjoint_acc(g: &[f64], width: usize, scale: f64, out: &mut [f64]) {
    for (grow, orow) in g.chunks_exact(width).zip(out.chunks_exact_mut(width)) {
        for x in 0..width - 1 {
            orow[x + 1] += scale * grow[x];
            orow[x] -= scale * grow[x];
        }
    }
}

/// Adjoint of [`diff_y`], accumulated with weight `scale` into `out`.
pub(crate) fn diff_y_adjoint_acc(g: &[f64], width: usize, scale: f64, out: &mut [f64]) {
    let n = g.len();
    for i in 0..n - width {
        out[i + width] += scale * g[i];
        out[i] -= scale * g[i];
    }
}

/// Forward-difference spatial gradients `(gx, gy)` of every channel.
pub fn spatial_gradients(t: &FeatureTensor) -> Result<(FeatureTensor, FeatureTensor)> {
    if t.width < 2 || t.height < 2 {
        return Err(Error::TooSmall {
            width: t.width,
            height: t.height,
        });
    }
    let mut gx = FeatureTensor::zeros(t.channels, t.width, t.height);
    let mut gy = gx.clone();
    for c in 0..t.channels {
        diff_x(t.channel(c), t.width, gx.channel_mut(c));
        diff_y(t.channel(c), t.width, gy.channel_mut(c));
    }
    Ok((gx, gy))
}

/// Fraction of entries with `|v| < tau`.
pub fn sparsity(t: &FeatureTensor, tau: f64) -> f64 {
    let near_zero = t.data.iter().filter(|v| v.abs() < tau).count();
    near_zero as f64 / t.data.len() as f64
}

/// Zero-filled integer translation of every channel by `(dx, dy)`.
pub fn translate(t: &FeatureTensor, dx: i64, dy: i64) -> FeatureTensor {
    let mut out = FeatureTensor::zeros(t.channels, t.width, t.height);
    let (w, h) = (t.width as i64, t.height as i64);
    for c in 0..t.channels {
        for y in 0..h {
            for x in 0..w {
                let (sx, sy) = (x - dx, y - dy);
                if sx >= 0 && sx < w && sy >= 0 && sy < h {
                    out.set(c, x as usize, y as usize, t.get(c, sx as usize, sy as usize));
                }
            }
        }
    }
    out
}
