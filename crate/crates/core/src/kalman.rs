//! Learned-gain Kalman correction of propagated features.
//!
//! The gain map is `sigmoid(affine(stats))` over per-pixel statistics:
//! the pooled mean of the channel-mean `|x|`, the channel-mean `x` and the
//! channel-max `|x|`. KF2 takes these statistics of the error
//! `z_prev - dhat_prev`. KF takes them of `z_prev` and of `dhat_prev`
//! separately. The last parameter is a bias.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::motion::{min_observed, FitConfig, History, RolloutResult};
use crate::tensor::{diff_x, diff_x_adjoint_acc, diff_y, diff_y_adjoint_acc, FeatureSequence, FeatureTensor, Plane};

/// Pre-activations are clamped to this magnitude so gains stay inside (0, 1).
pub const PRE_CLAMP: f64 = 30.0;
pub const DEFAULT_POOL_WINDOW: usize = 3;
const STATS: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    KF,
    KF2,
}

impl Variant {
    pub fn param_count(self) -> usize {
        match self {
            Variant::KF => 2 * STATS + 1,
            Variant::KF2 => STATS + 1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GainModel {
    pub variant: Variant,
    pub params: Vec<f64>,
    #[serde(default = "default_window")]
    pub window: usize,
}

fn default_window() -> usize {
    DEFAULT_POOL_WINDOW
}

impl GainModel {
    /// All-zero parameters, i.e. a uniform 0.5 gain.
    pub fn zeros(variant: Variant) -> Self {
        GainModel {
            variant,
            params: vec![0.0; variant.param_count()],
            window: DEFAULT_POOL_WINDOW,
        }
    }

    pub fn new(variant: Variant, params: Vec<f64>, window: usize) -> Result<Self> {
        let m = GainModel { variant, params, window };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.params.len() != self.variant.param_count() {
            return Err(Error::Config(format!(
                "{:?} gain needs {} params, got {}",
                self.variant,
                self.variant.param_count(),
                self.params.len()
            )));
        }
        if self.params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite("gain params"));
        }
        if self.window == 0 || self.window % 2 == 0 {
            return Err(Error::Config(format!("pool window {} must be odd", self.window)));
        }
        Ok(())
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let m: GainModel = serde_json::from_str(s)?;
        m.validate()?;
        Ok(m)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("gain model serializes")
    }

    pub fn bias(&self) -> f64 {
        *self.params.last().expect("validated")
    }
}

/// Per-pixel statistics feeding the affine map, one plane per input.
fn stats_of(t: &FeatureTensor, window: usize) -> [Vec<f64>; STATS] {
    let (c, w, h) = t.shape();
    let n = w * h;
    let mut abs_mean = vec![0.0; n];
    let mut mean = vec![0.0; n];
    let mut max_abs = vec![0.0f64; n];
    for ch in 0..c {
        for (i, &v) in t.channel(ch).iter().enumerate() {
            abs_mean[i] += v.abs();
            mean[i] += v;
            max_abs[i] = max_abs[i].max(v.abs());
        }
    }
    for i in 0..n {
        abs_mean[i] /= c as f64;
        mean[i] /= c as f64;
    }
    [box_mean(&abs_mean, w, h, window), mean, max_abs]
}

/// Mean over the in-bounds part of a `window`-square neighborhood.
fn box_mean(src: &[f64], w: usize, h: usize, window: usize) -> Vec<f64> {
    let r = (window / 2) as i64;
    let mut out = vec![0.0; src.len()];
    for y in 0..h as i64 {
        for x in 0..w as i64 {
            let mut sum = 0.0;
            let mut count = 0usize;
            for yy in (y - r).max(0)..=(y + r).min(h as i64 - 1) {
                for xx in (x - r).max(0)..=(x + r).min(w as i64 - 1) {
                    sum += src[(yy * w as i64 + xx) as usize];
                    count += 1;
                }
            }
            out[(y * w as i64 + x) as usize] = sum / count as f64;
        }
    }
    out
}

fn gain_inputs(model: &GainModel, z_prev: &FeatureTensor, dhat_prev: &FeatureTensor) -> Result<Vec<Vec<f64>>> {
    z_prev.ensure_same_shape(dhat_prev)?;
    Ok(match model.variant {
        Variant::KF2 => stats_of(&z_prev.sub(dhat_prev)?, model.window).into_iter().collect(),
        Variant::KF => stats_of(z_prev, model.window)
            .into_iter()
            .chain(stats_of(dhat_prev, model.window))
            .collect(),
    })
}

fn pre_activation(params: &[f64], inputs: &[Vec<f64>], i: usize) -> f64 {
    let mut pre = *params.last().expect("bias");
    for (p, s) in params.iter().zip(inputs) {
        pre += p * s[i];
    }
    pre
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

fn gain_from_inputs(params: &[f64], inputs: &[Vec<f64>], w: usize, h: usize) -> Plane {
    let data = (0..w * h)
        .map(|i| sigmoid(pre_activation(params, inputs, i).clamp(-PRE_CLAMP, PRE_CLAMP)))
        .collect();
    Plane::from_vec(w, h, data).expect("finite gain")
}

/// Gain map `Γ` from the previous measurement and posterior.
pub fn gain(model: &GainModel, z_prev: &FeatureTensor, dhat_prev: &FeatureTensor) -> Result<Plane> {
    model.validate()?;
    let inputs = gain_inputs(model, z_prev, dhat_prev)?;
    Ok(gain_from_inputs(&model.params, &inputs, z_prev.width(), z_prev.height()))
}

/// `d+ = d- + Γ ⊙ (z - d-)`, the same `Γ` for every channel.
pub fn update(dhat_minus: &FeatureTensor, z: &FeatureTensor, gamma: &Plane) -> Result<FeatureTensor> {
    dhat_minus.ensure_same_shape(z)?;
    if (gamma.width(), gamma.height()) != (z.width(), z.height()) {
        return Err(Error::ShapeMismatch {
            expected: z.shape(),
            got: (z.channels(), gamma.width(), gamma.height()),
        });
    }
    let mut out = dhat_minus.clone();
    let g = gamma.as_slice();
    for c in 0..z.channels() {
        let zc = z.channel(c);
        for ((o, &zv), &gv) in out.channel_mut(c).iter_mut().zip(zc).zip(g) {
            *o += gv * (zv - *o);
        }
    }
    if !out.is_finite() {
        return Err(Error::NonFinite("posterior"));
    }
    Ok(out)
}

#[derive(Clone, Debug, Default)]
pub struct FilterTrace {
    /// Zero-based frame index of every update step.
    pub steps: Vec<usize>,
    pub gains: Vec<Plane>,
    pub mean_gain: Vec<f64>,
    /// `‖Γ ⊙ (z - d-)‖₂` per update step.
    pub update_norm: Vec<f64>,
}

/// One update step with everything the fine-tune objective needs.
#[derive(Clone, Debug)]
pub struct GainStep {
    pub z_prev: FeatureTensor,
    pub dhat_prev: FeatureTensor,
    pub prior: FeatureTensor,
    pub measurement: FeatureTensor,
    pub truth: FeatureTensor,
}

/// Number of observed frames for ratio `g` over `len` frames, `⌊g·len⌋`.
/// A relative slack absorbs products like `0.29 * 100 = 28.999…`.
pub fn observed_count(g: f64, len: usize) -> usize {
    let v = g * len as f64;
    (v + v.abs() * 1e-12).floor() as usize
}

/// Predicts every frame after the initial `min_observed` ones. Frames with
/// index below `⌊g·T⌋` are corrected against the measurement; later frames
/// are prediction only.
pub fn filtered_rollout(
    seq: &FeatureSequence,
    g: f64,
    cfg: &FitConfig,
    model: &GainModel,
) -> Result<(RolloutResult, FilterTrace)> {
    let (res, trace, _) = run_filter(seq, None, g, cfg, model)?;
    Ok((res, trace))
}

/// Like [`filtered_rollout`], also returning the update steps with `truth`
/// as the reference (the measurements themselves when `truth` is `None`).
pub fn run_filter(
    seq: &FeatureSequence,
    truth: Option<&FeatureSequence>,
    g: f64,
    cfg: &FitConfig,
    model: &GainModel,
) -> Result<(RolloutResult, FilterTrace, Vec<GainStep>)> {
    cfg.validate()?;
    model.validate()?;
    if !(g > 0.0 && g <= 1.0) {
        return Err(Error::OutOfRange(format!("observation ratio {g}")));
    }
    let truth = truth.unwrap_or(seq);
    if truth.len() != seq.len() {
        return Err(Error::Config(format!(
            "truth has {} frames, measurements {}",
            truth.len(),
            seq.len()
        )));
    }
    let t_len = seq.len();
    let init = min_observed(cfg);
    let k = observed_count(g, t_len);
    if k < init {
        return Err(Error::TooShort { needed: init, got: k });
    }
    let frames = seq.frames();
    let mut hist = History::from_observed(&frames[..init])?;
    let mut out = RolloutResult::default();
    let mut trace = FilterTrace::default();
    let mut steps = Vec::new();
    for t in init..t_len {
        let (r_hat, prior, ks) = hist.predict(cfg)?;
        let (post, resid) = if t < k {
            let z = &frames[t];
            let z_prev = &frames[t - 1];
            let dhat_prev = hist.features.last().expect("nonempty");
            let gamma = gain(model, z_prev, dhat_prev)?;
            let post = update(&prior, z, &gamma)?;
            let correction = post.sub(&prior)?;
            trace.steps.push(t);
            trace.mean_gain.push(gamma.mean());
            trace.update_norm.push(correction.as_slice().iter().map(|v| v * v).sum::<f64>().sqrt());
            trace.gains.push(gamma);
            steps.push(GainStep {
                z_prev: z_prev.clone(),
                dhat_prev: dhat_prev.clone(),
                prior: prior.clone(),
                measurement: z.clone(),
                truth: truth[t].clone(),
            });
            let resid = post.sub(dhat_prev)?;
            (post, resid)
        } else {
            (prior, r_hat)
        };
        hist.residuals.push(resid.clone());
        hist.features.push(post.clone());
        hist.truths.push(post.clone());
        out.residuals.push(resid);
        out.features.push(post);
        out.kernels.push(ks);
    }
    Ok((out, trace, steps))
}

/// `α·L2feat(d+) + β·GDLfeat(d+)` averaged over steps, with its gradient
/// in the gain parameters (steps are held fixed).
pub fn posterior_loss(model: &GainModel, steps: &[GainStep], alpha: f64, beta: f64) -> Result<(f64, Vec<f64>)> {
    model.validate()?;
    if steps.is_empty() {
        return Err(Error::Empty("gain steps"));
    }
    let per_step = steps
        .par_iter()
        .map(|s| step_loss(model, s, alpha, beta))
        .collect::<Result<Vec<_>>>()?;
    let n = steps.len() as f64;
    let mut value = 0.0;
    let mut grad = vec![0.0; model.params.len()];
    for (v, g) in per_step {
        value += v;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    value /= n;
    grad.iter_mut().for_each(|g| *g /= n);
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("posterior loss"));
    }
    Ok((value, grad))
}

fn step_loss(model: &GainModel, s: &GainStep, alpha: f64, beta: f64) -> Result<(f64, Vec<f64>)> {
    let (channels, w, h) = s.prior.shape();
    s.prior.ensure_same_shape(&s.measurement)?;
    s.prior.ensure_same_shape(&s.truth)?;
    let inputs = gain_inputs(model, &s.z_prev, &s.dhat_prev)?;
    let n = w * h;
    let pre: Vec<f64> = (0..n).map(|i| pre_activation(&model.params, &inputs, i)).collect();
    let gamma: Vec<f64> = pre.iter().map(|p| sigmoid(p.clamp(-PRE_CLAMP, PRE_CLAMP))).collect();

    let mut value = 0.0;
    let mut d_gamma = vec![0.0; n];
    let mut err = vec![0.0; n];
    let mut dx = vec![0.0; n];
    let mut dy = vec![0.0; n];
    let mut back = vec![0.0; n];
    for c in 0..channels {
        let (prior, z, truth) = (s.prior.channel(c), s.measurement.channel(c), s.truth.channel(c));
        for i in 0..n {
            err[i] = prior[i] + gamma[i] * (z[i] - prior[i]) - truth[i];
        }
        diff_x(&err, w, &mut dx);
        diff_y(&err, w, &mut dy);
        value += alpha * err.iter().map(|e| e * e).sum::<f64>();
        value += beta * (dx.iter().map(|e| e * e).sum::<f64>() + dy.iter().map(|e| e * e).sum::<f64>());
        for i in 0..n {
            back[i] = 2.0 * alpha * err[i];
        }
        diff_x_adjoint_acc(&dx, w, 2.0 * beta, &mut back);
        diff_y_adjoint_acc(&dy, w, 2.0 * beta, &mut back);
        for i in 0..n {
            d_gamma[i] += back[i] * (z[i] - prior[i]);
        }
    }
    let mut grad = vec![0.0; model.params.len()];
    let bias = grad.len() - 1;
    for i in 0..n {
        if pre[i].abs() > PRE_CLAMP {
            continue;
        }
        let d_pre = d_gamma[i] * gamma[i] * (1.0 - gamma[i]);
        for (j, s) in inputs.iter().enumerate() {
            grad[j] += d_pre * s[i];
        }
        grad[bias] += d_pre;
    }
    Ok((value, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TuneConfig {
    pub alpha: f64,
    pub beta: f64,
    /// Observation ratio used to collect update steps.
    pub ratio: f64,
    /// Descent phases, each followed by a rollout rerun that refits kernels.
    pub rounds: usize,
    /// Gain-parameter descent steps per round.
    pub steps_per_round: usize,
    pub learning_rate: f64,
}

impl Default for TuneConfig {
    fn default() -> Self {
        TuneConfig {
            alpha: 1.0,
            beta: 5.0,
            ratio: 1.0,
            rounds: 3,
            steps_per_round: 40,
            learning_rate: 0.1,
        }
    }
}

impl TuneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha >= 0.0 && self.beta >= 0.0) || self.alpha + self.beta == 0.0 {
            return Err(Error::Config("alpha and beta must be nonnegative, not both zero".into()));
        }
        if !(self.ratio > 0.0 && self.ratio <= 1.0) {
            return Err(Error::Config(format!("ratio {} outside (0, 1]", self.ratio)));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }
}

/// A training sequence: what the filter measures and what it is scored on.
#[derive(Clone, Debug)]
pub struct TuneSample {
    pub measured: FeatureSequence,
    pub truth: FeatureSequence,
}

#[derive(Clone, Debug)]
pub struct TuneOutcome {
    pub model: GainModel,
    /// Posterior loss of the starting parameters on their own rollouts.
    pub initial_loss: f64,
    /// Posterior loss of the returned parameters on their own rollouts.
    pub final_loss: f64,
    /// Re-evaluated loss after each round, starting with the initial one.
    pub round_losses: Vec<f64>,
}

fn collect_steps(samples: &[TuneSample], model: &GainModel, ratio: f64, fit: &FitConfig) -> Result<Vec<GainStep>> {
    let per = samples
        .iter()
        .map(|s| run_filter(&s.measured, Some(&s.truth), ratio, fit, model).map(|r| r.2))
        .collect::<Result<Vec<_>>>()?;
    Ok(per.into_iter().flatten().collect())
}

/// Fits gain parameters by alternating rollouts (which refit kernels under
/// the current gain) with gradient steps on fixed update-step data. The
/// best parameters by re-evaluated loss are returned, so the result never
/// scores worse than the starting model.
pub fn fine_tune(model: &GainModel, samples: &[TuneSample], tune: &TuneConfig, fit: &FitConfig) -> Result<TuneOutcome> {
    tune.validate()?;
    model.validate()?;
    if samples.is_empty() {
        return Err(Error::Empty("training sequences"));
    }
    let mut steps = collect_steps(samples, model, tune.ratio, fit)?;
    let (initial_loss, _) = posterior_loss(model, &steps, tune.alpha, tune.beta)?;
    let mut best = (model.clone(), initial_loss);
    let mut current = model.clone();
    let mut round_losses = vec![initial_loss];
    let mut lr = tune.learning_rate;
    for _ in 0..tune.rounds {
        let (mut loss, mut grad) = posterior_loss(&current, &steps, tune.alpha, tune.beta)?;
        for _ in 0..tune.steps_per_round {
            let gnorm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if gnorm == 0.0 {
                break;
            }
            let mut accepted = false;
            while lr > 1e-12 {
                let mut cand = current.clone();
                cand.params.iter_mut().zip(&grad).for_each(|(p, g)| *p -= lr * g / gnorm);
                let (l, g) = posterior_loss(&cand, &steps, tune.alpha, tune.beta)?;
                if l < loss {
                    current = cand;
                    loss = l;
                    grad = g;
                    lr *= 1.5;
                    accepted = true;
                    break;
                }
                lr *= 0.5;
            }
            if !accepted {
                break;
            }
        }
        steps = collect_steps(samples, &current, tune.ratio, fit)?;
        let (rerun, _) = posterior_loss(&current, &steps, tune.alpha, tune.beta)?;
        round_losses.push(rerun);
        if rerun < best.1 {
            best = (current.clone(), rerun);
        }
    }
    Ok(TuneOutcome {
        model: best.0,
        initial_loss,
        final_loss: best.1,
        round_losses,
    })
}
