//! Per-channel multi-scale motion kernels: inference from a window of
//! residual transitions and recursive residual propagation.
//!
//! The prediction for channel `c` is `(1/N) sum_n K_n (*) r_t|c`. Because
//! convolution is linear this equals a single convolution with the averaged
//! ("effective") kernel, which is how it is evaluated here.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{
    check_kernel_fits, convolve_slice, correlate_into, diff_x, diff_x_adjoint_acc, diff_y,
    diff_y_adjoint_acc, l2_normalize, residuals_of, FeatureSequence, FeatureTensor, Kernel,
};

pub const DEFAULT_KERNEL_SIZES: [usize; 3] = [3, 5, 7];

/// Weights of the four loss terms: residual L2, feature L2, residual GDL,
/// feature GDL.
pub type Lambdas = [f64; 4];

pub const DEFAULT_LAMBDAS: Lambdas = [1.0, 1.0, 5.0, 5.0];

/// One unit-norm kernel per `(channel, size)` pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MotionKernelSet {
    sizes: Vec<usize>,
    per_channel: Vec<Vec<Kernel>>,
}

impl MotionKernelSet {
    /// Center impulses for every channel and size.
    pub fn identity(channels: usize, sizes: &[usize]) -> Result<Self> {
        validate_sizes(sizes)?;
        let row = sizes
            .iter()
            .map(|&n| Kernel::identity(n))
            .collect::<Result<Vec<_>>>()?;
        Ok(MotionKernelSet {
            sizes: sizes.to_vec(),
            per_channel: vec![row; channels],
        })
    }

    /// Builds a set from explicit kernels; every kernel must be unit-norm.
    pub fn from_kernels(per_channel: Vec<Vec<Kernel>>) -> Result<Self> {
        let set = Self::from_raw(per_channel)?;
        if let Some(k) = set.iter().find(|k| !k.is_unit(1e-9)) {
            return Err(Error::BadKernel(format!(
                "kernel of size {} has norm {}",
                k.size(),
                k.norm()
            )));
        }
        Ok(set)
    }

    /// Like [`from_kernels`](Self::from_kernels) without the norm check, for
    /// evaluating the loss away from the unit sphere.
    pub fn from_raw(per_channel: Vec<Vec<Kernel>>) -> Result<Self> {
        let first = per_channel.first().ok_or(Error::Empty("kernel set"))?;
        let sizes: Vec<usize> = first.iter().map(Kernel::size).collect();
        validate_sizes(&sizes)?;
        for row in &per_channel {
            let row_sizes: Vec<usize> = row.iter().map(Kernel::size).collect();
            if row_sizes != sizes {
                return Err(Error::BadKernel(format!(
                    "channel kernel sizes {row_sizes:?} differ from {sizes:?}"
                )));
            }
        }
        Ok(MotionKernelSet { sizes, per_channel })
    }

    pub fn channels(&self) -> usize {
        self.per_channel.len()
    }

    pub fn sizes(&self) -> &[usize] {
        &self.sizes
    }

    pub fn kernels(&self, channel: usize) -> &[Kernel] {
        &self.per_channel[channel]
    }

    /// Kernel of the given size for a channel, if that size is in the set.
    pub fn kernel(&self, channel: usize, size: usize) -> Option<&Kernel> {
        self.per_channel[channel].iter().find(|k| k.size() == size)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Kernel> {
        self.per_channel.iter().flatten()
    }

    /// Average of the channel's kernels, zero-padded to the largest size.
    pub fn effective(&self, channel: usize) -> Kernel {
        effective_kernel(&self.per_channel[channel])
    }
}

fn validate_sizes(sizes: &[usize]) -> Result<()> {
    if sizes.is_empty() {
        return Err(Error::Config("at least one kernel size is required".into()));
    }
    for &n in sizes {
        if !DEFAULT_KERNEL_SIZES.contains(&n) {
            return Err(Error::Config(format!("kernel size {n} not in {{3, 5, 7}}")));
        }
    }
    let mut sorted = sizes.to_vec();
    sorted.dedup();
    if sorted.len() != sizes.len() || sizes.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config(format!(
            "kernel sizes {sizes:?} must be strictly increasing"
        )));
    }
    Ok(())
}

fn effective_kernel(kernels: &[Kernel]) -> Kernel {
    let size = kernels.iter().map(Kernel::size).max().unwrap_or(1);
    let mut eff = Kernel::zeros(size).expect("odd size");
    for k in kernels {
        let r = k.radius() as i64;
        for dy in -r..=r {
            for dx in -r..=r {
                eff.set(dx, dy, eff.at(dx, dy) + k.at(dx, dy));
            }
        }
    }
    let n = kernels.len() as f64;
    eff.weights_mut().iter_mut().for_each(|w| *w /= n);
    eff
}

/// Kernel fitting configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FitConfig {
    /// Number of most recent residual transitions used per fit.
    pub window: usize,
    pub lambdas: Lambdas,
    /// Initial step length along the normalized descent direction.
    pub step_size: f64,
    pub max_iters: usize,
    /// Relative loss decrease below which iteration stops.
    pub tolerance: f64,
    /// Carried for reproducibility records; the optimizer itself is
    /// deterministic and draws no random numbers.
    pub seed: u64,
    pub sizes: Vec<usize>,
    /// During rollout a channel whose propagated residual carries less than
    /// this fraction of the largest observed residual energy keeps center
    /// impulses instead of fitting what is left. Zero disables the check.
    pub quiet_ratio: f64,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            window: 3,
            lambdas: DEFAULT_LAMBDAS,
            step_size: 0.25,
            max_iters: 200,
            tolerance: 1e-12,
            seed: 0,
            sizes: DEFAULT_KERNEL_SIZES.to_vec(),
            quiet_ratio: 1e-3,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        if self.window < 1 {
            return Err(Error::Config("window must be >= 1".into()));
        }
        if self.lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(Error::Config("lambdas must be finite and nonnegative".into()));
        }
        if self.lambdas.iter().all(|&l| l == 0.0) {
            return Err(Error::Config("lambdas must not all be zero".into()));
        }
        if !(self.step_size.is_finite() && self.step_size > 0.0) {
            return Err(Error::Config("step_size must be positive".into()));
        }
        if !(self.tolerance.is_finite() && self.tolerance > 0.0) {
            return Err(Error::Config("tolerance must be positive".into()));
        }
        if !(self.quiet_ratio.is_finite() && (0.0..1.0).contains(&self.quiet_ratio)) {
            return Err(Error::Config("quiet_ratio must be in [0, 1)".into()));
        }
        validate_sizes(&self.sizes)
    }
}

/// One supervised residual step: `input` is propagated to predict `target`,
/// and `base + prediction` is compared with `truth`.
#[derive(Clone, Copy, Debug)]
pub struct Transition<'a> {
    pub input: &'a FeatureTensor,
    pub target: &'a FeatureTensor,
    pub base: &'a FeatureTensor,
    pub truth: &'a FeatureTensor,
}

impl Transition<'_> {
    fn check(&self) -> Result<()> {
        self.input.ensure_same_shape(self.target)?;
        self.input.ensure_same_shape(self.base)?;
        self.input.ensure_same_shape(self.truth)
    }
}

/// Loss value, its four unweighted terms and per-kernel gradients.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub value: f64,
    /// `[L2res, L2feat, GDLres, GDLfeat]`, each averaged over transitions.
    pub terms: [f64; 4],
    /// `grads[c][i]` is the gradient for `kernels(c)[i]`.
    pub grads: Vec<Vec<Kernel>>,
}

/// Scratch buffers for one channel's loss evaluation.
struct Scratch {
    pred: Vec<f64>,
    e_res: Vec<f64>,
    e_feat: Vec<f64>,
    d: Vec<f64>,
    back: Vec<f64>,
}

impl Scratch {
    fn new(n: usize) -> Self {
        Scratch {
            pred: vec![0.0; n],
            e_res: vec![0.0; n],
            e_feat: vec![0.0; n],
            d: vec![0.0; n],
            back: vec![0.0; n],
        }
    }
}

fn sum_sq(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum()
}

/// Loss for one channel as a function of its effective kernel; optionally
/// accumulates the effective-kernel gradient.
fn channel_loss(
    transitions: &[Transition<'_>],
    channel: usize,
    eff: &Kernel,
    lambdas: &Lambdas,
    scratch: &mut Scratch,
    mut grad: Option<&mut Kernel>,
) -> [f64; 4] {
    let mut terms = [0.0; 4];
    let count = transitions.len() as f64;
    for tr in transitions {
        let w = tr.input.width();
        let h = tr.input.height();
        let input = tr.input.channel(channel);
        let target = tr.target.channel(channel);
        let base = tr.base.channel(channel);
        let truth = tr.truth.channel(channel);
        convolve_slice(input, w, h, eff, &mut scratch.pred);
        for i in 0..scratch.pred.len() {
            scratch.e_res[i] = scratch.pred[i] - target[i];
            scratch.e_feat[i] = base[i] + scratch.pred[i] - truth[i];
        }
        terms[0] += sum_sq(&scratch.e_res);
        terms[1] += sum_sq(&scratch.e_feat);

        let want_grad = grad.is_some();
        if want_grad {
            for i in 0..scratch.back.len() {
                scratch.back[i] =
                    2.0 * lambdas[0] * scratch.e_res[i] + 2.0 * lambdas[1] * scratch.e_feat[i];
            }
        }
        for (term, err, lambda) in [
            (2, &scratch.e_res, lambdas[2]),
            (3, &scratch.e_feat, lambdas[3]),
        ] {
            diff_x(err, w, &mut scratch.d);
            terms[term] += sum_sq(&scratch.d);
            if want_grad {
                diff_x_adjoint_acc(&scratch.d, w, 2.0 * lambda, &mut scratch.back);
            }
            diff_y(err, w, &mut scratch.d);
            terms[term] += sum_sq(&scratch.d);
            if want_grad {
                diff_y_adjoint_acc(&scratch.d, w, 2.0 * lambda, &mut scratch.back);
            }
        }
        if let Some(g) = grad.as_deref_mut() {
            scratch.back.iter_mut().for_each(|v| *v /= count);
            correlate_into(input, &scratch.back, w, h, g);
        }
    }
    terms.iter_mut().for_each(|t| *t /= count);
    terms
}

/// Quadratic part of [`channel_loss`] along an effective-kernel direction:
/// the loss with all targets set to zero.
fn channel_quadratic(
    transitions: &[Transition<'_>],
    channel: usize,
    dir: &Kernel,
    lambdas: &Lambdas,
    scratch: &mut Scratch,
) -> f64 {
    let mut terms = [0.0; 4];
    for tr in transitions {
        let w = tr.input.width();
        convolve_slice(tr.input.channel(channel), w, tr.input.height(), dir, &mut scratch.pred);
        let sq = sum_sq(&scratch.pred);
        diff_x(&scratch.pred, w, &mut scratch.d);
        let mut gdl = sum_sq(&scratch.d);
        diff_y(&scratch.pred, w, &mut scratch.d);
        gdl += sum_sq(&scratch.d);
        terms[0] += sq;
        terms[1] += sq;
        terms[2] += gdl;
        terms[3] += gdl;
    }
    weighted(&terms, lambdas) / transitions.len() as f64
}

fn weighted(terms: &[f64; 4], lambdas: &Lambdas) -> f64 {
    terms.iter().zip(lambdas).map(|(t, l)| t * l).sum()
}

/// Spreads an effective-kernel gradient onto the individual kernels.
fn split_gradient(eff_grad: &Kernel, kernels: &[Kernel]) -> Vec<Kernel> {
    let n = kernels.len() as f64;
    kernels
        .iter()
        .map(|k| {
            let mut g = Kernel::zeros(k.size()).expect("odd size");
            let r = k.radius() as i64;
            for dy in -r..=r {
                for dx in -r..=r {
                    g.set(dx, dy, eff_grad.at(dx, dy) / n);
                }
            }
            g
        })
        .collect()
}

fn check_transitions(transitions: &[Transition<'_>], ks: Option<&MotionKernelSet>) -> Result<()> {
    let first = transitions.first().ok_or(Error::Empty("transitions"))?;
    for tr in transitions {
        tr.check()?;
        first.input.ensure_same_shape(tr.input)?;
    }
    if let Some(ks) = ks {
        if ks.channels() != first.input.channels() {
            return Err(Error::ShapeMismatch {
                expected: first.input.shape(),
                got: (ks.channels(), first.input.width(), first.input.height()),
            });
        }
        for k in ks.per_channel[0].iter() {
            check_kernel_fits(k, first.input.width(), first.input.height())?;
        }
    }
    Ok(())
}

/// Weighted objective and analytic kernel gradients over a set of transitions.
pub fn transition_loss(
    transitions: &[Transition<'_>],
    ks: &MotionKernelSet,
    lambdas: &Lambdas,
) -> Result<LossEval> {
    check_transitions(transitions, Some(ks))?;
    let plane = transitions[0].input.plane_len();
    let per_channel: Vec<([f64; 4], Vec<Kernel>)> = (0..ks.channels())
        .into_par_iter()
        .map(|c| {
            let eff = ks.effective(c);
            let mut g = Kernel::zeros(eff.size()).expect("odd size");
            let mut scratch = Scratch::new(plane);
            let terms = channel_loss(transitions, c, &eff, lambdas, &mut scratch, Some(&mut g));
            (terms, split_gradient(&g, ks.kernels(c)))
        })
        .collect();
    let mut terms = [0.0; 4];
    let mut grads = Vec::with_capacity(per_channel.len());
    for (t, g) in per_channel {
        for i in 0..4 {
            terms[i] += t[i];
        }
        grads.push(g);
    }
    let value = weighted(&terms, lambdas);
    if !value.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(LossEval {
        value,
        terms,
        grads,
    })
}

/// Builds transitions from a residual window, the residual that follows it
/// and the feature preceding that residual. Window entry `i` predicts entry
/// `i + 1`; the last entry predicts `target`.
fn window_features(
    window: &[FeatureTensor],
    target: &FeatureTensor,
    prev_feature: &FeatureTensor,
) -> Result<Vec<FeatureTensor>> {
    if window.is_empty() {
        return Err(Error::Empty("residual window"));
    }
    // features[j] precedes the residual predicted by window[j]
    let mut features = vec![prev_feature.clone()];
    for r in window[1..].iter().rev() {
        let prev = features.last().expect("nonempty").sub(r)?;
        features.push(prev);
    }
    features.reverse();
    let mut truths: Vec<FeatureTensor> = features[1..].to_vec();
    truths.push(prev_feature.add(target)?);
    features.extend(truths);
    Ok(features)
}

fn window_transitions<'a>(
    window: &'a [FeatureTensor],
    target: &'a FeatureTensor,
    features: &'a [FeatureTensor],
) -> Vec<Transition<'a>> {
    let m = window.len();
    (0..m)
        .map(|j| Transition {
            input: &window[j],
            target: if j + 1 < m { &window[j + 1] } else { target },
            base: &features[j],
            truth: &features[m + j],
        })
        .collect()
}

/// Loss of `ks` on a residual window followed by `target`, with
/// `prev_feature` the feature just before `target`.
pub fn loss_total(
    window: &[FeatureTensor],
    target: &FeatureTensor,
    prev_feature: &FeatureTensor,
    ks: &MotionKernelSet,
    lambdas: &Lambdas,
) -> Result<LossEval> {
    let features = window_features(window, target, prev_feature)?;
    transition_loss(&window_transitions(window, target, &features), ks, lambdas)
}

/// Fitted kernels plus the per-channel loss recorded at every accepted iterate.
#[derive(Clone, Debug)]
pub struct FitOutcome {
    pub kernels: MotionKernelSet,
    pub loss_trace: Vec<Vec<f64>>,
}

/// Fits kernels to a residual window; see [`fit_transitions`].
pub fn fit_kernels(
    window: &[FeatureTensor],
    target: &FeatureTensor,
    prev_feature: &FeatureTensor,
    cfg: &FitConfig,
) -> Result<MotionKernelSet> {
    let features = window_features(window, target, prev_feature)?;
    Ok(fit_transitions(&window_transitions(window, target, &features), cfg)?.kernels)
}

/// Minimizes the weighted loss over unit-norm kernels, channel by channel.
///
/// Starts from center impulses. Each iteration moves along a conjugate
/// descent direction, renormalizes every kernel, and accepts the iterate only
/// if the loss strictly decreases, halving the step otherwise.
pub fn fit_transitions(transitions: &[Transition<'_>], cfg: &FitConfig) -> Result<FitOutcome> {
    cfg.validate()?;
    check_transitions(transitions, None)?;
    let first = transitions[0].input;
    let max = *cfg.sizes.last().expect("validated");
    check_kernel_fits(&Kernel::zeros(max)?, first.width(), first.height())?;

    let results: Vec<Result<(Vec<Kernel>, Vec<f64>)>> = (0..first.channels())
        .into_par_iter()
        .map(|c| fit_channel(transitions, c, cfg))
        .collect();
    let mut per_channel = Vec::with_capacity(results.len());
    let mut loss_trace = Vec::with_capacity(results.len());
    for r in results {
        let (k, trace) = r?;
        per_channel.push(k);
        loss_trace.push(trace);
    }
    Ok(FitOutcome {
        kernels: MotionKernelSet {
            sizes: cfg.sizes.clone(),
            per_channel,
        },
        loss_trace,
    })
}

fn flat(kernels: &[Kernel]) -> Vec<f64> {
    kernels.iter().flat_map(|k| k.weights().iter().copied()).collect()
}

fn unflat(template: &[Kernel], v: &[f64]) -> Vec<Kernel> {
    let mut at = 0;
    template
        .iter()
        .map(|k| {
            let n = k.weights().len();
            let out = Kernel::new(k.size(), v[at..at + n].to_vec()).expect("same size");
            at += n;
            out
        })
        .collect()
}

/// Removes from `v` the component along each (unit) kernel.
fn tangent(kernels: &[Kernel], v: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(v.len());
    let mut at = 0;
    for k in kernels {
        let w = k.weights();
        let block = &v[at..at + w.len()];
        let along = dot(block, w);
        out.extend(block.iter().zip(w).map(|(b, k)| b - along * k));
        at += w.len();
    }
    out
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn fit_channel(
    transitions: &[Transition<'_>],
    c: usize,
    cfg: &FitConfig,
) -> Result<(Vec<Kernel>, Vec<f64>)> {
    let plane = transitions[0].input.plane_len();
    let mut scratch = Scratch::new(plane);
    let lambdas = &cfg.lambdas;

    let eval = |ks: &[Kernel], scratch: &mut Scratch, with_grad: bool| -> Result<(f64, Vec<f64>)> {
        let eff = effective_kernel(ks);
        let mut g = Kernel::zeros(eff.size()).expect("odd size");
        let terms = channel_loss(
            transitions,
            c,
            &eff,
            lambdas,
            scratch,
            if with_grad { Some(&mut g) } else { None },
        );
        let value = weighted(&terms, lambdas);
        let grad = if with_grad {
            flat(&split_gradient(&g, ks))
        } else {
            Vec::new()
        };
        if !value.is_finite() || grad.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("kernel fit"));
        }
        Ok((value, grad))
    };

    let mut kernels = cfg
        .sizes
        .iter()
        .map(|&n| Kernel::identity(n))
        .collect::<Result<Vec<_>>>()?;
    let (mut loss, raw) = eval(&kernels, &mut scratch, true)?;
    // work with the gradient projected onto the tangent space of each sphere
    let mut grad = tangent(&kernels, &raw);
    let mut trace = vec![loss];
    let mut direction: Vec<f64> = grad.iter().map(|g| -g).collect();
    for _ in 0..cfg.max_iters {
        if loss == 0.0 || grad.iter().all(|&g| g == 0.0) {
            break;
        }
        if dot(&grad, &direction) >= 0.0 {
            direction = grad.iter().map(|g| -g).collect();
        }
        let dnorm = dot(&direction, &direction).sqrt();
        let unit: Vec<f64> = direction.iter().map(|d| d / dnorm).collect();
        let params = flat(&kernels);

        // minimizer of the quadratic model along `unit`, before renormalizing
        let slope = dot(&grad, &unit);
        let curvature = channel_quadratic(
            transitions,
            c,
            &effective_kernel(&unflat(&kernels, &unit)),
            lambdas,
            &mut scratch,
        );
        let mut step = if curvature > 0.0 {
            (-slope / (2.0 * curvature)).min(1.0)
        } else {
            cfg.step_size
        };

        let mut accepted = None;
        while step > 1e-18 {
            let moved: Vec<f64> = params.iter().zip(&unit).map(|(p, u)| p + step * u).collect();
            let cand = unflat(&kernels, &moved)
                .iter()
                .map(l2_normalize)
                .collect::<Result<Vec<_>>>()?;
            let (l, _) = eval(&cand, &mut scratch, false)?;
            if l < loss {
                accepted = Some((cand, l));
                break;
            }
            step *= 0.5;
        }
        let Some((cand, new_loss)) = accepted else {
            break;
        };
        let rel = (loss - new_loss) / loss;
        kernels = cand;
        let (l, raw) = eval(&kernels, &mut scratch, true)?;
        debug_assert_eq!(l, new_loss);
        loss = l;
        let prev_grad = tangent(&kernels, &grad);
        grad = tangent(&kernels, &raw);
        trace.push(loss);
        if rel < cfg.tolerance {
            break;
        }
        // Polak-Ribiere+ with the previous quantities moved to the new tangent space
        let denom = dot(&prev_grad, &prev_grad);
        let beta = if denom > 0.0 {
            ((dot(&grad, &grad) - dot(&grad, &prev_grad)) / denom).max(0.0)
        } else {
            0.0
        };
        let moved_dir = tangent(&kernels, &direction);
        direction = grad
            .iter()
            .zip(&moved_dir)
            .map(|(g, d)| -g + beta * d)
            .collect();
    }
    Ok((kernels, trace))
}

/// `(1/N) sum_n K_n (*) r_t` per channel.
pub fn propagate_residual(residual: &FeatureTensor, ks: &MotionKernelSet) -> Result<FeatureTensor> {
    if ks.channels() != residual.channels() {
        return Err(Error::ShapeMismatch {
            expected: residual.shape(),
            got: (ks.channels(), residual.width(), residual.height()),
        });
    }
    let (w, h) = (residual.width(), residual.height());
    let mut out = FeatureTensor::zeros(residual.channels(), w, h);
    for c in 0..residual.channels() {
        let eff = ks.effective(c);
        check_kernel_fits(&eff, w, h)?;
        convolve_slice(residual.channel(c), w, h, &eff, out.channel_mut(c));
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("propagated residual"));
    }
    Ok(out)
}

/// Predicted residuals and features, with the kernels used at every step.
#[derive(Clone, Debug, Default)]
pub struct RolloutResult {
    pub residuals: Vec<FeatureTensor>,
    pub features: Vec<FeatureTensor>,
    pub kernels: Vec<MotionKernelSet>,
}

/// Minimum number of observed frames needed to start a rollout.
pub fn min_observed(cfg: &FitConfig) -> usize {
    (cfg.window + 1).max(3)
}

/// Running feature/residual history that supplies fit windows.
///
/// `residuals[j]` is `features[j + 1] - features[j]` for observed steps, the
/// propagated residual for predicted steps. `truths[j]` is what
/// `features[j]` is compared against in the feature loss terms.
pub(crate) struct History {
    pub features: Vec<FeatureTensor>,
    pub truths: Vec<FeatureTensor>,
    pub residuals: Vec<FeatureTensor>,
    /// Largest observed residual energy per channel.
    peak: Vec<f64>,
}

fn channel_energy(t: &FeatureTensor, c: usize) -> f64 {
    t.channel(c).iter().map(|v| v * v).sum()
}

impl History {
    pub fn from_observed(frames: &[FeatureTensor]) -> Result<Self> {
        let residuals = residuals_of(frames)?.into_residuals();
        let channels = frames[0].channels();
        let peak = (0..channels)
            .map(|c| residuals.iter().map(|r| channel_energy(r, c)).fold(0.0, f64::max))
            .collect();
        Ok(History {
            features: frames.to_vec(),
            truths: frames.to_vec(),
            residuals,
            peak,
        })
    }

    /// Up to `window` most recent transitions.
    pub fn transitions(&self, window: usize) -> Vec<Transition<'_>> {
        let n = self.residuals.len();
        let q = window.min(n - 1);
        (n - q..n)
            .map(|j| Transition {
                input: &self.residuals[j - 1],
                target: &self.residuals[j],
                base: &self.features[j],
                truth: &self.truths[j + 1],
            })
            .collect()
    }

    /// Fits kernels on the current window and propagates the last residual.
    pub fn predict(&self, cfg: &FitConfig) -> Result<(FeatureTensor, FeatureTensor, MotionKernelSet)> {
        let last = self.residuals.last().expect("nonempty");
        let quiet: Vec<bool> = (0..self.peak.len())
            .map(|c| channel_energy(last, c) < cfg.quiet_ratio * self.peak[c])
            .collect();
        let mut ks = if quiet.iter().all(|&q| q) {
            MotionKernelSet::identity(quiet.len(), &cfg.sizes)?
        } else {
            fit_transitions(&self.transitions(cfg.window), cfg)?.kernels
        };
        for (c, _) in quiet.iter().enumerate().filter(|(_, &q)| q) {
            ks.per_channel[c] = ks.per_channel[c]
                .iter()
                .map(|k| Kernel::identity(k.size()))
                .collect::<Result<_>>()?;
        }
        let r_hat = propagate_residual(last, &ks)?;
        let d_hat = self.features.last().expect("nonempty").add(&r_hat)?;
        if !d_hat.is_finite() {
            return Err(Error::NonFinite("predicted feature"));
        }
        Ok((r_hat, d_hat, ks))
    }
}

/// Fits, propagates and reconstructs `horizon` steps past the observed frames.
/// Once observations run out the fit window slides over predicted residuals.
pub fn rollout(observed: &FeatureSequence, horizon: usize, cfg: &FitConfig) -> Result<RolloutResult> {
    cfg.validate()?;
    let needed = min_observed(cfg);
    if observed.len() < needed {
        return Err(Error::TooShort {
            needed,
            got: observed.len(),
        });
    }
    let mut hist = History::from_observed(observed.frames())?;
    let mut out = RolloutResult::default();
    for _ in 0..horizon {
        let (r_hat, d_hat, ks) = hist.predict(cfg)?;
        hist.residuals.push(r_hat.clone());
        hist.features.push(d_hat.clone());
        hist.truths.push(d_hat.clone());
        out.residuals.push(r_hat);
        out.features.push(d_hat);
        out.kernels.push(ks);
    }
    Ok(out)
}

/// Impulse kernel of size `n` at centered offset `(dx, dy)`.
pub fn make_impulse_kernel(n: usize, dx: i64, dy: i64) -> Result<Kernel> {
    Kernel::impulse(n, dx, dy)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{translate, Plane};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn one_channel(p: Plane) -> FeatureTensor {
        FeatureTensor::from_planes(&[p]).unwrap()
    }

    /// Triangle plus a smaller square, intensities chosen to give texture.
    fn scene(w: usize, h: usize, ox: i64, oy: i64) -> FeatureTensor {
        one_channel(Plane::from_fn(w, h, |x, y| {
            let (x, y) = (x as i64 - ox, y as i64 - oy);
            let mut v = 0.0;
            if y >= 0 && y < 6 && x >= 0 && x <= y {
                v += 1.0;
            }
            if (7..10).contains(&x) && (1..4).contains(&y) {
                v += 0.5 + 0.1 * (x + y) as f64;
            }
            v
        }))
    }

    fn translating(w: usize, h: usize, start: (i64, i64), v: (i64, i64), t: usize) -> Vec<FeatureTensor> {
        (0..t)
            .map(|i| scene(w, h, start.0 + v.0 * i as i64, start.1 + v.1 * i as i64))
            .collect()
    }

    fn ks_of(kernels: Vec<Kernel>) -> MotionKernelSet {
        MotionKernelSet::from_kernels(vec![kernels]).unwrap()
    }

    #[test]
    fn impulse_kernel_examples() {
        assert_eq!(make_impulse_kernel(3, 0, 0).unwrap(), Kernel::identity(3).unwrap());
        let k = make_impulse_kernel(7, 3, -3).unwrap();
        assert_eq!(k.argmax(), (3, -3));
        assert!(matches!(make_impulse_kernel(5, 3, -3), Err(Error::OutOfRing { .. })));
        assert!(matches!(make_impulse_kernel(3, 2, 0), Err(Error::OutOfRing { .. })));
    }

    #[test]
    fn propagate_with_identities_is_exact() {
        let r = scene(12, 10, 2, 2);
        let ks = MotionKernelSet::identity(1, &DEFAULT_KERNEL_SIZES).unwrap();
        assert_eq!(propagate_residual(&r, &ks).unwrap(), r);
    }

    #[test]
    fn propagate_with_common_shift() {
        let r = scene(12, 10, 2, 2);
        let ks = ks_of(vec![
            Kernel::impulse(3, 1, 0).unwrap(),
            Kernel::impulse(5, 1, 0).unwrap(),
            Kernel::impulse(7, 1, 0).unwrap(),
        ]);
        assert_eq!(propagate_residual(&r, &ks).unwrap(), translate(&r, 1, 0));
    }

    #[test]
    fn propagate_averages_distinct_shifts() {
        let mut p = Plane::zeros(9, 9);
        p.set(2, 4, 1.0);
        let r = one_channel(p);
        let ks = ks_of(vec![
            Kernel::impulse(3, 1, 0).unwrap(),
            Kernel::impulse(5, 2, 0).unwrap(),
            Kernel::impulse(7, 3, 0).unwrap(),
        ]);
        let out = propagate_residual(&r, &ks).unwrap();
        // brute-force: each kernel moves the one-hot separately
        for y in 0..9 {
            for x in 0..9 {
                let expected = if y == 4 && (3..=5).contains(&x) { 1.0 / 3.0 } else { 0.0 };
                assert!((out.get(0, x, y) - expected).abs() < 1e-15, "({x},{y})");
            }
        }
        let two = FeatureTensor::zeros(2, 9, 9);
        assert!(matches!(propagate_residual(&two, &ks), Err(Error::ShapeMismatch { .. })));
    }

    #[test]
    fn zero_residuals_keep_center_impulses() {
        let z = FeatureTensor::zeros(2, 10, 10);
        let prev = FeatureTensor::zeros(2, 10, 10);
        let eval = loss_total(
            &[z.clone(), z.clone()],
            &z,
            &prev,
            &MotionKernelSet::identity(2, &DEFAULT_KERNEL_SIZES).unwrap(),
            &DEFAULT_LAMBDAS,
        )
        .unwrap();
        assert!(eval.grads.iter().flatten().all(|g| g.weights().iter().all(|&v| v == 0.0)));
        let ks = fit_kernels(&[z.clone(), z.clone()], &z, &prev, &FitConfig::default()).unwrap();
        assert_eq!(ks, MotionKernelSet::identity(2, &DEFAULT_KERNEL_SIZES).unwrap());
    }

    fn residual_window(frames: &[FeatureTensor]) -> (Vec<FeatureTensor>, FeatureTensor, FeatureTensor) {
        let r = residuals_of(frames).unwrap().into_residuals();
        let target = r.last().unwrap().clone();
        let window = r[..r.len() - 1].to_vec();
        let prev = frames[frames.len() - 2].clone();
        (window, target, prev)
    }

    #[test]
    fn masked_lambdas_give_single_terms() {
        let frames = translating(14, 12, (2, 2), (1, 0), 4);
        let (window, target, prev) = residual_window(&frames);
        let ks = ks_of(vec![
            Kernel::impulse(3, 0, 1).unwrap(),
            Kernel::impulse(5, 1, 1).unwrap(),
            Kernel::impulse(7, -1, 0).unwrap(),
        ]);
        let full = loss_total(&window, &target, &prev, &ks, &[1.0, 1.0, 5.0, 5.0]).unwrap();
        let only_res = loss_total(&window, &target, &prev, &ks, &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(only_res.value, full.terms[0]);
        let t = full.terms;
        let recomposed = t[0] + t[1] + 5.0 * t[2] + 5.0 * t[3];
        assert!((full.value - recomposed).abs() <= 1e-12 * full.value.max(1.0));
    }

    #[test]
    fn perfect_kernels_have_zero_residual_loss() {
        let frames = translating(16, 14, (2, 3), (1, 0), 5);
        let (window, target, prev) = residual_window(&frames);
        let ks = ks_of(vec![
            Kernel::impulse(3, 1, 0).unwrap(),
            Kernel::impulse(5, 1, 0).unwrap(),
            Kernel::impulse(7, 1, 0).unwrap(),
        ]);
        let e = loss_total(&window, &target, &prev, &ks, &DEFAULT_LAMBDAS).unwrap();
        assert_eq!(e.terms[0], 0.0);
        assert_eq!(e.terms[2], 0.0);
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..5 {
            let rand_t = |rng: &mut ChaCha8Rng| {
                FeatureTensor::from_vec(1, 8, 8, (0..64).map(|_| rng.random_range(-1.0..1.0)).collect())
                    .unwrap()
            };
            let window = vec![rand_t(&mut rng), rand_t(&mut rng)];
            let target = rand_t(&mut rng);
            let prev = rand_t(&mut rng);
            let kernels: Vec<Kernel> = [3, 5, 7]
                .iter()
                .map(|&n| {
                    let w = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
                    Kernel::new(n, w).unwrap()
                })
                .collect();
            let ks = MotionKernelSet { sizes: vec![3, 5, 7], per_channel: vec![kernels.clone()] };
            let e = loss_total(&window, &target, &prev, &ks, &DEFAULT_LAMBDAS).unwrap();
            let h = 1e-6;
            for (ki, k) in kernels.iter().enumerate() {
                for wi in 0..k.weights().len() {
                    let bump = |delta: f64| {
                        let mut kk = kernels.clone();
                        kk[ki].weights_mut()[wi] += delta;
                        let s = MotionKernelSet { sizes: vec![3, 5, 7], per_channel: vec![kk] };
                        loss_total(&window, &target, &prev, &s, &DEFAULT_LAMBDAS).unwrap().value
                    };
                    let fd = (bump(h) - bump(-h)) / (2.0 * h);
                    let an = e.grads[0][ki].weights()[wi];
                    let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
                    assert!(rel < 1e-4, "kernel {ki} weight {wi}: fd {fd} analytic {an}");
                }
            }
        }
    }

    #[test]
    fn fit_recovers_unit_translation() {
        let frames = translating(20, 16, (3, 4), (1, 0), 5);
        let (window, target, prev) = residual_window(&frames);
        let out = {
            let features = window_features(&window, &target, &prev).unwrap();
            fit_transitions(&window_transitions(&window, &target, &features), &FitConfig::default()).unwrap()
        };
        let ks = &out.kernels;
        assert_eq!(ks.kernel(0, 3).unwrap().argmax(), (1, 0));
        for k in ks.iter() {
            assert!(k.is_unit(1e-9));
        }
        for trace in &out.loss_trace {
            assert!(trace.windows(2).all(|w| w[1] <= w[0]));
        }
    }

    /// Loss of every single-impulse kernel set (all sizes at one offset) for
    /// the given translation; the oracle for the recovery examples.
    fn best_impulse_offset(frames: &[FeatureTensor], size: usize) -> ((i64, i64), f64) {
        let (window, target, prev) = residual_window(frames);
        let r = ((size - 1) / 2) as i64;
        let mut best = ((0, 0), f64::INFINITY);
        for dy in -r..=r {
            for dx in -r..=r {
                let ks = ks_of(vec![Kernel::impulse(size, dx, dy).unwrap()]);
                let l = loss_total(&window, &target, &prev, &ks, &DEFAULT_LAMBDAS).unwrap().value;
                if l < best.1 {
                    best = ((dx, dy), l);
                }
            }
        }
        best
    }

    #[test]
    fn exhaustive_search_confirms_unit_shift_and_large_shift_needs_seven() {
        let frames = translating(20, 16, (3, 4), (1, 0), 5);
        assert_eq!(best_impulse_offset(&frames, 3), ((1, 0), 0.0));

        let frames = translating(28, 16, (2, 4), (3, 0), 5);
        let (best7, loss7) = best_impulse_offset(&frames, 7);
        let (_, loss3) = best_impulse_offset(&frames, 3);
        assert_eq!(best7, (3, 0));
        assert!(loss3 > loss7);

        let (window, target, prev) = residual_window(&frames);
        let ks = fit_kernels(&window, &target, &prev, &FitConfig::default()).unwrap();
        let k7 = ks.kernel(0, 7).unwrap();
        assert_eq!(k7.argmax(), (3, 0));
    }

    #[test]
    fn fit_is_deterministic() {
        let frames = translating(18, 16, (3, 4), (1, 1), 5);
        let (window, target, prev) = residual_window(&frames);
        let a = fit_kernels(&window, &target, &prev, &FitConfig::default()).unwrap();
        let b = fit_kernels(&window, &target, &prev, &FitConfig::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rollout_contract() {
        let frames = translating(24, 16, (2, 4), (1, 0), 4);
        let seq = FeatureSequence::new(frames.clone()).unwrap();
        let cfg = FitConfig::default();
        let empty = rollout(&seq, 0, &cfg).unwrap();
        assert!(empty.features.is_empty() && empty.residuals.is_empty());
        let short = FeatureSequence::new(frames[..3].to_vec()).unwrap();
        assert!(matches!(rollout(&short, 2, &cfg), Err(Error::TooShort { .. })));
    }

    #[test]
    fn rollout_tracks_constant_velocity() {
        let all = translating(30, 16, (2, 4), (1, 0), 9);
        let seq = FeatureSequence::new(all[..4].to_vec()).unwrap();
        let res = rollout(&seq, 5, &FitConfig::default()).unwrap();
        assert_eq!(res.features.len(), 5);
        assert_eq!(res.residuals.len(), 5);
        assert_eq!(res.kernels.len(), 5);
        for (h, f) in res.features.iter().enumerate() {
            let truth = &all[4 + h];
            let mut worst: f64 = 0.0;
            for y in 3..13 {
                for x in 3..27 {
                    worst = worst.max((f.get(0, x, y) - truth.get(0, x, y)).abs());
                }
            }
            assert!(worst < 1e-3, "horizon {}: {worst}", h + 1);
        }
    }
}
