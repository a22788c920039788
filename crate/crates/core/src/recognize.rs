//! Nearest-centroid recognition over pooled sequence descriptors, and the
//! early-recognition evaluation across observation ratios.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{estimate_flow_with_patch, flow_to_kernels_masked, kernel_match, support_mask};
use crate::kalman::{filtered_rollout, observed_count, GainModel, Variant};
use crate::motion::{min_observed, rollout, FitConfig};
use crate::tensor::{FeatureSequence, FeatureTensor};

pub const TEMPORAL_CHUNKS: usize = 5;
pub const DEFAULT_RATIOS: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];

/// Frame range of chunk `i` out of `TEMPORAL_CHUNKS` over `len` items;
/// never empty.
fn chunk(i: usize, len: usize) -> std::ops::Range<usize> {
    let a = (i * len / TEMPORAL_CHUNKS).min(len - 1);
    let b = ((i + 1) * len / TEMPORAL_CHUNKS).clamp(a + 1, len);
    a..b
}

/// Per chunk and channel: spatial mean of the features, then mean `|r|`
/// of the residuals (chunked over the residual sequence).
pub fn descriptor(seq: &FeatureSequence) -> Result<Vec<f64>> {
    if seq.len() < 2 {
        return Err(Error::TooShort { needed: 2, got: seq.len() });
    }
    let frames = seq.frames();
    let channels = seq.shape().0;
    let n_res = frames.len() - 1;
    let mut out = Vec::with_capacity(TEMPORAL_CHUNKS * channels * 2);
    for i in 0..TEMPORAL_CHUNKS {
        let fr = chunk(i, frames.len());
        let rr = chunk(i, n_res);
        for c in 0..channels {
            let mean: f64 = fr.clone().map(|t| channel_mean(&frames[t], c)).sum::<f64>() / fr.len() as f64;
            let act: f64 = rr
                .clone()
                .map(|t| {
                    let (a, b) = (frames[t].channel(c), frames[t + 1].channel(c));
                    a.iter().zip(b).map(|(x, y)| (y - x).abs()).sum::<f64>() / a.len() as f64
                })
                .sum::<f64>()
                / rr.len() as f64;
            out.push(mean);
            out.push(act);
        }
    }
    Ok(out)
}

fn channel_mean(t: &FeatureTensor, c: usize) -> f64 {
    let ch = t.channel(c);
    ch.iter().sum::<f64>() / ch.len() as f64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub centroids: Vec<Vec<f64>>,
}

impl ClassifierModel {
    pub fn num_classes(&self) -> usize {
        self.centroids.len()
    }

    pub fn dims(&self) -> usize {
        self.centroids.first().map_or(0, |c| c.len())
    }

    /// Nearest centroid to a descriptor; ties go to the lowest label.
    pub fn nearest(&self, d: &[f64]) -> usize {
        let mut best = (f64::INFINITY, 0);
        for (k, c) in self.centroids.iter().enumerate() {
            let dist: f64 = c.iter().zip(d).map(|(a, b)| (a - b) * (a - b)).sum();
            if dist < best.0 {
                best = (dist, k);
            }
        }
        best.1
    }
}

/// Mean descriptor per class over `(class, sequence)` pairs.
pub fn train_classifier(train: &[(usize, FeatureSequence)], num_classes: usize) -> Result<ClassifierModel> {
    let descs = train
        .par_iter()
        .map(|(_, s)| descriptor(s))
        .collect::<Result<Vec<_>>>()?;
    let dims = descs.first().map(|d| d.len()).ok_or(Error::EmptyClass(0))?;
    let mut sums = vec![vec![0.0; dims]; num_classes];
    let mut counts = vec![0usize; num_classes];
    for ((class, s), d) in train.iter().zip(&descs) {
        if *class >= num_classes {
            return Err(Error::OutOfRange(format!("class {class}")));
        }
        if d.len() != dims {
            return Err(Error::ShapeMismatch {
                expected: train[0].1.shape(),
                got: s.shape(),
            });
        }
        counts[*class] += 1;
        sums[*class].iter_mut().zip(d).for_each(|(a, b)| *a += b);
    }
    if let Some(empty) = counts.iter().position(|&n| n == 0) {
        return Err(Error::EmptyClass(empty));
    }
    for (s, n) in sums.iter_mut().zip(&counts) {
        s.iter_mut().for_each(|v| *v /= *n as f64);
    }
    Ok(ClassifierModel { centroids: sums })
}

pub fn classify(model: &ClassifierModel, seq: &FeatureSequence) -> Result<usize> {
    let d = descriptor(seq)?;
    if d.len() != model.dims() {
        return Err(Error::SizeMismatch(model.dims(), d.len()));
    }
    Ok(model.nearest(&d))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Baseline,
    Rollout,
    Kf,
    Kf2,
}

impl Mode {
    pub fn name(self) -> &'static str {
        match self {
            Mode::Baseline => "baseline",
            Mode::Rollout => "rollout",
            Mode::Kf => "kf",
            Mode::Kf2 => "kf2",
        }
    }

    pub fn parse(s: &str) -> Option<Mode> {
        [Mode::Baseline, Mode::Rollout, Mode::Kf, Mode::Kf2]
            .into_iter()
            .find(|m| m.name() == s)
    }
}

/// Gain models used by the filtered modes.
#[derive(Clone, Debug, PartialEq)]
pub struct Gains {
    pub kf: GainModel,
    pub kf2: GainModel,
}

impl Default for Gains {
    fn default() -> Self {
        Gains {
            kf: GainModel::zeros(Variant::KF),
            kf2: GainModel::zeros(Variant::KF2),
        }
    }
}

/// What a mode sees at ratio `g`: the observed frames, followed by predicted
/// frames up to the full length for every mode but the baseline. Also
/// returns the number of observed frames.
pub fn complete_sequence(
    seq: &FeatureSequence,
    g: f64,
    mode: Mode,
    fit: &FitConfig,
    gains: &Gains,
) -> Result<(FeatureSequence, usize)> {
    let t_len = seq.len();
    let k = observed_count(g, t_len).min(t_len);
    let needed = if mode == Mode::Baseline { 2 } else { min_observed(fit) };
    if k < needed {
        return Err(Error::TooShort { needed, got: k });
    }
    let observed = seq.frames()[..k].to_vec();
    let predicted = match mode {
        Mode::Baseline => return Ok((FeatureSequence::new(observed)?, k)),
        _ if k == t_len => Vec::new(),
        Mode::Rollout => rollout(&seq.prefix(k)?, t_len - k, fit)?.features,
        Mode::Kf | Mode::Kf2 => {
            let model = if mode == Mode::Kf { &gains.kf } else { &gains.kf2 };
            let (res, _) = filtered_rollout(seq, g, fit, model)?;
            let init = min_observed(fit);
            res.features[k - init..].to_vec()
        }
    };
    let mut frames = observed;
    frames.extend(predicted);
    Ok((FeatureSequence::new(frames)?, k))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AccuracyRow {
    pub mode: Mode,
    pub g: f64,
    pub correct: usize,
    pub total: usize,
    pub accuracy: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MseRow {
    pub mode: Mode,
    pub g: f64,
    pub class: usize,
    /// Mean over predicted frames and sequences of the per-element MSE.
    pub mse: f64,
    pub frames: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct EvalReport {
    pub accuracy: Vec<AccuracyRow>,
    pub mse: Vec<MseRow>,
}

/// Accuracy and per-class propagation MSE for every `(mode, g)`, over
/// labelled test sequences. Rows are ordered by mode, then ascending `g`.
pub fn evaluate(
    model: &ClassifierModel,
    test: &[(usize, FeatureSequence)],
    ratios: &[f64],
    modes: &[Mode],
    fit: &FitConfig,
    gains: &Gains,
) -> Result<EvalReport> {
    let mut ratios = ratios.to_vec();
    ratios.sort_by(f64::total_cmp);
    ratios.dedup();
    if ratios.iter().any(|&g| !(g > 0.0 && g <= 1.0)) {
        return Err(Error::OutOfRange("observation ratio".into()));
    }
    let mut report = EvalReport::default();
    for &mode in modes {
        for &g in &ratios {
            let per_seq = test
                .par_iter()
                .map(|(class, seq)| {
                    let (full, k) = complete_sequence(seq, g, mode, fit, gains)?;
                    let hit = classify(model, &full)? == *class;
                    let mut err = Vec::new();
                    if mode != Mode::Baseline {
                        for t in k..seq.len() {
                            err.push(full[t].mse(&seq[t])?);
                        }
                    }
                    Ok((*class, hit, err))
                })
                .collect::<Result<Vec<_>>>()?;
            let correct = per_seq.iter().filter(|r| r.1).count();
            report.accuracy.push(AccuracyRow {
                mode,
                g,
                correct,
                total: per_seq.len(),
                accuracy: if per_seq.is_empty() { 0.0 } else { correct as f64 / per_seq.len() as f64 },
            });
            if mode == Mode::Baseline {
                continue;
            }
            let classes = model.num_classes();
            let mut sums = vec![0.0; classes];
            let mut counts = vec![0usize; classes];
            for (class, _, err) in &per_seq {
                sums[*class] += err.iter().sum::<f64>();
                counts[*class] += err.len();
            }
            for class in (0..classes).filter(|&c| counts[c] > 0) {
                report.mse.push(MseRow {
                    mode,
                    g,
                    class,
                    mse: sums[class] / counts[class] as f64,
                    frames: counts[class],
                });
            }
        }
    }
    Ok(report)
}

pub fn early_accuracy_curve(
    model: &ClassifierModel,
    test: &[(usize, FeatureSequence)],
    ratios: &[f64],
    mode: Mode,
    fit: &FitConfig,
    gains: &Gains,
) -> Result<Vec<AccuracyRow>> {
    Ok(evaluate(model, test, ratios, &[mode], fit, gains)?.accuracy)
}

/// Mean propagation MSE per class at ratio `g`.
pub fn propagation_mse_by_class(
    data: &[(usize, FeatureSequence)],
    num_classes: usize,
    g: f64,
    mode: Mode,
    fit: &FitConfig,
    gains: &Gains,
) -> Result<Vec<f64>> {
    if mode == Mode::Baseline {
        return Err(Error::Config("baseline mode predicts nothing".into()));
    }
    let mut out = vec![0.0; num_classes];
    let per_seq = data
        .par_iter()
        .map(|(class, seq)| {
            let (full, k) = complete_sequence(seq, g, mode, fit, gains)?;
            let errs = (k..seq.len()).map(|t| full[t].mse(&seq[t])).collect::<Result<Vec<_>>>()?;
            Ok((*class, errs))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut counts = vec![0usize; num_classes];
    for (class, errs) in per_seq {
        if class >= num_classes {
            return Err(Error::OutOfRange(format!("class {class}")));
        }
        out[class] += errs.iter().sum::<f64>();
        counts[class] += errs.len();
    }
    for (o, n) in out.iter_mut().zip(counts) {
        if n > 0 {
            *o /= n as f64;
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowParams {
    pub radius: usize,
    pub patch: usize,
    pub sigma: f64,
    /// Ground-truth residual magnitude above which a pixel counts as moving.
    pub support_tau: f64,
}

impl Default for FlowParams {
    fn default() -> Self {
        FlowParams {
            radius: crate::flow::DEFAULT_RADIUS,
            patch: crate::flow::DEFAULT_PATCH,
            sigma: crate::flow::DEFAULT_SIGMA,
            support_tau: crate::tensor::DEFAULT_SPARSITY_TAU,
        }
    }
}

/// Match scores of one kernel size at one rollout horizon.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct HorizonMatches {
    pub horizon: usize,
    pub scores: Vec<f64>,
}

/// Rolls each sequence forward from its first `observed` frames and scores
/// the fitted kernels of `size` at every horizon against flow kernels of the
/// true motion into the predicted frame. Only pixels where the true residual
/// exceeds the support threshold enter the flow histogram; channels without
/// such pixels are skipped.
pub fn kernel_match_by_horizon(
    seqs: &[FeatureSequence],
    observed: usize,
    horizon: usize,
    size: usize,
    fit: &FitConfig,
    flow: &FlowParams,
) -> Result<Vec<HorizonMatches>> {
    if !fit.sizes.contains(&size) {
        return Err(Error::SizeMismatch(size, fit.sizes[0]));
    }
    let per_seq = seqs
        .par_iter()
        .map(|seq| {
            if seq.len() < observed + horizon {
                return Err(Error::TooShort {
                    needed: observed + horizon,
                    got: seq.len(),
                });
            }
            let res = rollout(&seq.prefix(observed)?, horizon, fit)?;
            let mut scores = vec![Vec::new(); horizon];
            for (h, ks) in res.kernels.iter().enumerate() {
                let t = observed + h;
                let (prev, next) = (&seq[t - 1], &seq[t]);
                for c in 0..seq.shape().0 {
                    let (a, b) = (prev.plane(c), next.plane(c));
                    let diff: Vec<f64> = a.as_slice().iter().zip(b.as_slice()).map(|(x, y)| y - x).collect();
                    let mask = support_mask(&[&diff], flow.support_tau);
                    let f = estimate_flow_with_patch(&a, &b, flow.radius, flow.patch)?;
                    let Some(kof) = flow_to_kernels_masked(&f, Some(&mask), &[size], flow.sigma)? else {
                        continue;
                    };
                    let k = ks.kernel(c, size).expect("size present");
                    scores[h].push(kernel_match(k, &kof[0])?);
                }
            }
            Ok(scores)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((0..horizon)
        .map(|h| HorizonMatches {
            horizon: h + 1,
            scores: per_seq.iter().flat_map(|s| s[h].iter().copied()).collect(),
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_sequence, SceneSpec, ShapeKind, ShapeSpec};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn moving(v: [f64; 2], start: [f64; 2], frames: usize) -> FeatureSequence {
        let spec = SceneSpec {
            width: 16,
            height: 12,
            channels: 1,
            shapes: vec![ShapeSpec {
                kind: ShapeKind::Triangle,
                size: 4,
                intensity: 1.0,
                position: start,
                velocity: v,
                channels: None,
            }],
            noise_sigma: 0.0,
            events: vec![],
            seed: 0,
            bilinear: false,
        };
        generate_sequence(&spec, frames).unwrap()
    }

    fn quick_fit() -> FitConfig {
        FitConfig {
            max_iters: 60,
            ..FitConfig::default()
        }
    }

    #[test]
    fn descriptor_layout() {
        let s = moving([1.0, 0.0], [2.0, 2.0], 7);
        let d = descriptor(&s).unwrap();
        assert_eq!(d.len(), TEMPORAL_CHUNKS * 2);
        // a shape fully inside the canvas keeps its mass
        assert!((d[0] - 10.0 / 192.0).abs() < 1e-15);
        assert!(d[1] > 0.0);
        let short = FeatureSequence::new(vec![s[0].clone()]).unwrap();
        assert!(matches!(descriptor(&short), Err(Error::TooShort { .. })));
        for len in 2..12 {
            for i in 0..TEMPORAL_CHUNKS {
                let r = chunk(i, len);
                assert!(!r.is_empty() && r.end <= len);
            }
        }
    }

    #[test]
    fn centroids_are_class_means() {
        let a = moving([1.0, 0.0], [2.0, 2.0], 6);
        let b = moving([0.0, 2.0], [5.0, 1.0], 6);
        let m = train_classifier(&[(0, a.clone()), (1, b.clone())], 2).unwrap();
        assert_eq!(m.centroids[0], descriptor(&a).unwrap());
        assert_eq!(m.centroids[1], descriptor(&b).unwrap());
        let dup = train_classifier(&[(0, a.clone()), (0, a.clone()), (1, b.clone()), (1, b.clone())], 2).unwrap();
        assert_eq!(dup, m);
        assert_eq!(classify(&m, &a).unwrap(), 0);
        assert_eq!(classify(&m, &b).unwrap(), 1);
        assert!(matches!(train_classifier(&[(0, a)], 2), Err(Error::EmptyClass(1))));
    }

    #[test]
    fn ties_go_to_lowest_label_and_scaling_keeps_choice() {
        let m = ClassifierModel {
            centroids: vec![vec![1.0, 0.0], vec![-1.0, 0.0], vec![0.0, 1.0]],
        };
        assert_eq!(m.nearest(&[0.0, 0.0]), 0);
        assert_eq!(m.nearest(&[0.0, -0.5]), 0);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..200 {
            let q: Vec<f64> = (0..2).map(|_| rng.random_range(-2.0..2.0)).collect();
            let s = rng.random_range(0.1..10.0);
            let scaled = ClassifierModel {
                centroids: m.centroids.iter().map(|c| c.iter().map(|v| v * s).collect()).collect(),
            };
            let sq: Vec<f64> = q.iter().map(|v| v * s).collect();
            assert_eq!(scaled.nearest(&sq), m.nearest(&q));
        }
    }

    #[test]
    fn random_centroids_are_at_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let trials = 400;
        let mut hits = 0;
        for _ in 0..trials {
            let m = ClassifierModel {
                centroids: (0..4).map(|_| (0..6).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
            };
            let truth = rng.random_range(0..4);
            let q: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
            hits += usize::from(m.nearest(&q) == truth);
        }
        let acc = hits as f64 / trials as f64;
        assert!((acc - 0.25).abs() <= 0.1, "{acc}");
    }

    #[test]
    fn full_observation_makes_modes_agree() {
        let data: Vec<(usize, FeatureSequence)> = vec![
            (0, moving([1.0, 0.0], [2.0, 2.0], 8)),
            (1, moving([0.0, 2.0], [6.0, 1.0], 8)),
        ];
        let m = train_classifier(&data, 2).unwrap();
        let modes = [Mode::Baseline, Mode::Rollout, Mode::Kf, Mode::Kf2];
        let rep = evaluate(&m, &data, &[1.0], &modes, &quick_fit(), &Gains::default()).unwrap();
        let accs: Vec<f64> = rep.accuracy.iter().map(|r| r.accuracy).collect();
        assert_eq!(accs, vec![1.0; 4]);
        assert!(rep.mse.iter().all(|r| r.mse == 0.0 && r.frames == 0));
        for mode in modes {
            let (full, k) = complete_sequence(&data[0].1, 1.0, mode, &quick_fit(), &Gains::default()).unwrap();
            assert_eq!((full, k), (data[0].1.clone(), 8));
        }
    }

    #[test]
    fn completion_lengths() {
        let s = moving([1.0, 0.0], [2.0, 2.0], 10);
        let fit = quick_fit();
        let (b, k) = complete_sequence(&s, 0.5, Mode::Baseline, &fit, &Gains::default()).unwrap();
        assert_eq!((b.len(), k), (5, 5));
        for mode in [Mode::Rollout, Mode::Kf2] {
            let (full, _) = complete_sequence(&s, 0.5, mode, &fit, &Gains::default()).unwrap();
            assert_eq!(full.len(), 10);
            assert_eq!(&full.frames()[..5], &s.frames()[..5]);
        }
        assert!(matches!(
            complete_sequence(&s, 0.3, Mode::Rollout, &fit, &Gains::default()),
            Err(Error::TooShort { .. })
        ));
    }

    #[test]
    fn static_class_has_zero_mse_and_fast_class_more_than_slow() {
        let fit = FitConfig {
            sizes: vec![3],
            ..quick_fit()
        };
        let data: Vec<(usize, FeatureSequence)> = vec![
            (0, moving([0.0, 0.0], [5.0, 4.0], 10)),
            (1, moving([1.0, 0.0], [1.0, 4.0], 10)),
            (2, moving([3.0, 0.0], [1.0, 4.0], 10)),
        ];
        let mse = propagation_mse_by_class(&data, 3, 0.4, Mode::Rollout, &fit, &Gains::default()).unwrap();
        assert_eq!(mse[0], 0.0);
        assert!(mse.iter().all(|&v| v >= 0.0));
        assert!(mse[2] > mse[1], "{mse:?}");
    }

    #[test]
    fn clean_translation_matches_flow_kernels() {
        let seqs = vec![moving([1.0, 0.0], [1.0, 3.0], 9), moving([0.0, -1.0], [6.0, 7.0], 9)];
        let rows = kernel_match_by_horizon(&seqs, 4, 3, 3, &quick_fit(), &FlowParams::default()).unwrap();
        assert_eq!(rows.len(), 3);
        for r in rows {
            assert_eq!(r.scores.len(), 2);
            assert!(r.scores.iter().all(|&s| s > 0.9), "{:?}", r.scores);
        }
    }
}
