//! Command-line front end. Exit codes: 0 success, 1 usage error, 2 runtime
//! error. `RESIDPROP_THREADS` caps the worker pool.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::flow::{estimate_flow_with_patch, flow_to_kernels, flow_to_kernels_masked, kernel_match, kernel_to_csv, support_mask};
use crate::kalman::{fine_tune, gain, filtered_rollout, GainModel, TuneSample, Variant};
use crate::motion::{min_observed, rollout};
use crate::recognize::{evaluate, kernel_match_by_horizon, train_classifier, Mode};
use crate::report::{self, GainRow};
use crate::synth::{generate_dataset, load_sequence, Dataset, DatasetManifest, Split};
use crate::tensor::FeatureSequence;

pub const THREADS_ENV: &str = "RESIDPROP_THREADS";

#[derive(Debug, Parser)]
#[command(name = "residprop", version, about = "Residual propagation with motion kernels and a learned-gain Kalman filter")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset from a manifest.
    Gen(GenArgs),
    /// Evaluate recognition over observation ratios and write reports.
    Run(RunArgs),
    /// Dump fitted kernels, flow kernels, match scores and the gain map at one step.
    Inspect(InspectArgs),
    /// Kernel-match statistics per rollout horizon.
    Match(MatchArgs),
    /// Block-matching flow between two frames and its flow kernels.
    Flow(FlowArgs),
}

#[derive(Debug, Args)]
struct GenArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Overrides the manifest's master seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Comma-separated: baseline, rollout, kf, kf2.
    #[arg(long, value_delimiter = ',')]
    modes: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    #[arg(long)]
    svg: bool,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Args)]
struct InspectArgs {
    #[arg(long)]
    sequence: PathBuf,
    /// Rollout horizon to inspect, starting at 1.
    #[arg(long)]
    step: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    config: Option<PathBuf>,
    /// Observed frames; defaults to the fewest the window allows.
    #[arg(long)]
    observed: Option<usize>,
    /// Gain model JSON; a zero KF2 model when absent.
    #[arg(long)]
    gain: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MatchArgs {
    #[arg(long, conflicts_with = "sequence")]
    dataset: Option<PathBuf>,
    #[arg(long, num_args = 1..)]
    sequence: Vec<PathBuf>,
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    observed: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    size: Option<usize>,
    /// CSV destination; stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct FlowArgs {
    #[arg(long)]
    sequence: PathBuf,
    /// Flow from this frame to the next.
    #[arg(long)]
    frame: usize,
    #[arg(long, default_value_t = 0)]
    channel: usize,
    #[arg(long, default_value_t = crate::flow::DEFAULT_RADIUS)]
    radius: usize,
    #[arg(long, default_value_t = crate::flow::DEFAULT_PATCH)]
    patch: usize,
    #[arg(long, default_value_t = crate::flow::DEFAULT_SIGMA)]
    sigma: f64,
    /// Output directory; the flow CSV goes to stdout when absent.
    #[arg(long)]
    out: Option<PathBuf>,
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let threads = match std::env::var(THREADS_ENV) {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n >= 1 => n,
            _ => {
                eprintln!("error: {THREADS_ENV} must be a positive integer, got {v:?}");
                return 1;
            }
        },
        Err(_) => 0,
    };
    let pool = match rayon::ThreadPoolBuilder::new().num_threads(threads).build() {
        Ok(p) => p,
        Err(e) => {
            eprintln!("error: {e}");
            return 2;
        }
    };
    match pool.install(|| dispatch(cli.command)) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn dispatch(cmd: Command) -> Result<()> {
    match cmd {
        Command::Gen(a) => cmd_gen(a),
        Command::Run(a) => cmd_run(a),
        Command::Inspect(a) => cmd_inspect(a),
        Command::Match(a) => cmd_match(a),
        Command::Flow(a) => cmd_flow(a),
    }
}

fn load_config(path: &Option<PathBuf>) -> Result<(RunConfig, PathBuf)> {
    match path {
        Some(p) => {
            let base = p.parent().map(Path::to_path_buf).unwrap_or_default();
            Ok((RunConfig::load(p)?, base))
        }
        None => Ok((RunConfig::default(), PathBuf::new())),
    }
}

fn cmd_gen(a: GenArgs) -> Result<()> {
    let mut m = DatasetManifest::load(&a.manifest)?;
    if let Some(s) = a.seed {
        m.seed = s;
    }
    let labels = generate_dataset(&m, &a.out)?;
    println!(
        "wrote {} sequences ({} classes) to {}",
        labels.sequences.len(),
        labels.classes.len(),
        a.out.display()
    );
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let (mut cfg, base) = load_config(&a.config)?;
    if let Some(d) = a.dataset {
        cfg.dataset = Some(d);
    } else if let Some(d) = &cfg.dataset {
        cfg.dataset = Some(base.join(d));
    }
    if let Some(o) = a.out {
        cfg.out = Some(o);
    } else if let Some(o) = &cfg.out {
        cfg.out = Some(base.join(o));
    }
    if let Some(ms) = a.modes {
        cfg.modes = ms
            .iter()
            .map(|s| Mode::parse(s.trim()).ok_or_else(|| Error::Config(format!("unknown mode {s:?}"))))
            .collect::<Result<_>>()?;
    }
    if let Some(r) = a.ratios {
        cfg.ratios = r;
    }
    if a.svg {
        cfg.report.svg = true;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let dataset = cfg.dataset.clone().ok_or_else(|| Error::Config("no dataset given".into()))?;
    let out = cfg.out.clone().ok_or_else(|| Error::Config("no output directory given".into()))?;

    let ds = Dataset::open(&dataset)?;
    let train = ds.load_split(Split::Train)?;
    let test = ds.load_split(Split::Test)?;
    if test.is_empty() {
        return Err(Error::Empty("test split"));
    }
    let model = train_classifier(&train, ds.num_classes())?;
    let mut gains = cfg.gains(&base)?;
    fs::create_dir_all(&out)?;
    if let Some(tune) = &cfg.tune {
        let samples: Vec<TuneSample> = train
            .iter()
            .map(|(_, s)| TuneSample {
                measured: s.clone(),
                truth: s.clone(),
            })
            .collect();
        for (mode, slot) in [(Mode::Kf, &mut gains.kf), (Mode::Kf2, &mut gains.kf2)] {
            if cfg.modes.contains(&mode) {
                let tuned = fine_tune(&*slot, &samples, tune, &cfg.fit)?;
                *slot = tuned.model;
                report::write_file(&out.join(format!("{}_model.json", mode.name())), &(slot.to_json() + "\n"))?;
            }
        }
    }

    let rep = evaluate(&model, &test, &cfg.ratios, &cfg.modes, &cfg.fit, &gains)?;
    report::write_file(&out.join("accuracy.csv"), &report::accuracy_csv(&rep.accuracy)?)?;
    report::write_file(&out.join("mse.csv"), &report::mse_csv(&rep.mse, &ds.labels.classes)?)?;
    if cfg.report.svg {
        report::write_file(&out.join("accuracy.svg"), &report::accuracy_svg(&rep.accuracy))?;
    }

    let names: Vec<String> = ds.entries(Split::Test).map(|e| e.file.clone()).collect();
    if cfg.report.gain_traces {
        let mut rows = Vec::new();
        for (mode, variant) in [(Mode::Kf, Variant::KF), (Mode::Kf2, Variant::KF2)] {
            if !cfg.modes.contains(&mode) {
                continue;
            }
            let gm = if variant == Variant::KF { &gains.kf } else { &gains.kf2 };
            for ((_, seq), name) in test.iter().zip(&names) {
                let (_, trace) = filtered_rollout(seq, cfg.trace_ratio, &cfg.fit, gm)?;
                for i in 0..trace.steps.len() {
                    rows.push(GainRow {
                        mode,
                        sequence: name.clone(),
                        step: trace.steps[i],
                        mean_gain: trace.mean_gain[i],
                        update_norm: trace.update_norm[i],
                    });
                }
            }
        }
        report::write_file(&out.join("gain_trace.csv"), &report::gain_csv(&rows)?)?;
    }

    if cfg.report.kernel_match {
        let seqs: Vec<FeatureSequence> = test.iter().map(|(_, s)| s.clone()).collect();
        let rows = match_report(&seqs, &cfg, None, None, None)?;
        report::write_file(&out.join("kernel_match.csv"), &report::match_csv(&rows)?)?;
        if cfg.report.svg {
            let series = vec![(
                "median".to_string(),
                rows.iter()
                    .map(|r| (r.horizon as f64 / rows.len().max(1) as f64, r.stats.median))
                    .collect(),
            )];
            report::write_file(
                &out.join("kernel_match.svg"),
                &report::line_chart_svg("kernel match by horizon", "median match", &series),
            )?;
        }
    }
    report::write_file(&out.join("run_config.json"), &(serde_json::to_string_pretty(&cfg)? + "\n"))?;

    for r in &rep.accuracy {
        println!("{:<8} g={:<4} accuracy={:.3}", r.mode.name(), r.g, r.accuracy);
    }
    Ok(())
}

fn match_report(
    seqs: &[FeatureSequence],
    cfg: &RunConfig,
    observed: Option<usize>,
    horizon: Option<usize>,
    size: Option<usize>,
) -> Result<Vec<report::MatchRow>> {
    let observed = observed.unwrap_or(cfg.matching.observed);
    let size = size.unwrap_or(cfg.matching.size);
    let shortest = seqs.iter().map(FeatureSequence::len).min().ok_or(Error::Empty("sequences"))?;
    if observed >= shortest {
        return Err(Error::OutOfRange(format!(
            "{observed} observed frames leave nothing to predict in {shortest}"
        )));
    }
    let horizon = horizon.unwrap_or(cfg.matching.horizon).min(shortest - observed);
    let matches = kernel_match_by_horizon(seqs, observed, horizon, size, &cfg.fit, &cfg.flow)?;
    report::match_rows(size, &matches)
}

fn cmd_match(a: MatchArgs) -> Result<()> {
    let (cfg, _) = load_config(&a.config)?;
    let seqs: Vec<FeatureSequence> = if let Some(d) = &a.dataset {
        let ds = Dataset::open(d)?;
        ds.labels.sequences.iter().map(|e| ds.load(e)).collect::<Result<_>>()?
    } else if !a.sequence.is_empty() {
        a.sequence.iter().map(|p| load_sequence(p)).collect::<Result<_>>()?
    } else {
        return Err(Error::Config("give --dataset or --sequence".into()));
    };
    let rows = match_report(&seqs, &cfg, a.observed, a.horizon, a.size)?;
    let text = report::match_csv(&rows)?;
    match a.out {
        Some(p) => report::write_file(&p, &text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_inspect(a: InspectArgs) -> Result<()> {
    let (cfg, base) = load_config(&a.config)?;
    let seq = load_sequence(&a.sequence)?;
    let observed = a.observed.unwrap_or_else(|| min_observed(&cfg.fit));
    if observed > seq.len() {
        return Err(Error::OutOfRange(format!("observed {observed} of {} frames", seq.len())));
    }
    let max_step = seq.len() - observed;
    if a.step == 0 || a.step > max_step {
        return Err(Error::OutOfRange(format!("step {} (valid 1..={max_step})", a.step)));
    }
    let gm = match &a.gain {
        Some(p) => GainModel::from_json(&fs::read_to_string(p)?)?,
        None => match &cfg.kf2_model {
            Some(p) => GainModel::from_json(&fs::read_to_string(base.join(p))?)?,
            None => GainModel::zeros(Variant::KF2),
        },
    };
    let res = rollout(&seq.prefix(observed)?, a.step, &cfg.fit)?;
    let t = observed + a.step - 1;
    let ks = &res.kernels[a.step - 1];
    let prev_pred = if a.step == 1 { &seq[t - 1] } else { &res.features[a.step - 2] };
    let gamma = gain(&gm, &seq[t - 1], prev_pred)?;

    fs::create_dir_all(&a.out)?;
    let mut scores = String::from(report::CSV_SCHEMA);
    scores.push_str("channel,size,match\n");
    for c in 0..seq.shape().0 {
        let (pa, pb) = (seq[t - 1].plane(c), seq[t].plane(c));
        let diff: Vec<f64> = pa.as_slice().iter().zip(pb.as_slice()).map(|(x, y)| y - x).collect();
        let mask = support_mask(&[&diff], cfg.flow.support_tau);
        let f = estimate_flow_with_patch(&pa, &pb, cfg.flow.radius, cfg.flow.patch)?;
        let kof = flow_to_kernels_masked(&f, Some(&mask), &cfg.fit.sizes, cfg.flow.sigma)?;
        for (i, &n) in cfg.fit.sizes.iter().enumerate() {
            let k = ks.kernel(c, n).expect("fitted size");
            report::write_file(&a.out.join(format!("fitted_c{c}_n{n}.csv")), &kernel_to_csv(k))?;
            match &kof {
                Some(kof) => {
                    report::write_file(&a.out.join(format!("flow_c{c}_n{n}.csv")), &kernel_to_csv(&kof[i]))?;
                    scores.push_str(&format!("{c},{n},{}\n", kernel_match(k, &kof[i])?));
                }
                None => scores.push_str(&format!("{c},{n},\n")),
            }
        }
    }
    report::write_file(&a.out.join("matches.csv"), &scores)?;
    report::write_file(&a.out.join("gain.csv"), &report::grid_csv(gamma.as_slice(), gamma.width()))?;
    println!("inspected frame {t} (step {}) into {}", a.step, a.out.display());
    Ok(())
}

fn cmd_flow(a: FlowArgs) -> Result<()> {
    let seq = load_sequence(&a.sequence)?;
    if a.frame + 1 >= seq.len() {
        return Err(Error::OutOfRange(format!("frame {} of {}", a.frame, seq.len())));
    }
    if a.channel >= seq.shape().0 {
        return Err(Error::OutOfRange(format!("channel {}", a.channel)));
    }
    let (pa, pb) = (seq[a.frame].plane(a.channel), seq[a.frame + 1].plane(a.channel));
    let f = estimate_flow_with_patch(&pa, &pb, a.radius, a.patch)?;
    match a.out {
        None => print!("{}", f.to_csv()),
        Some(dir) => {
            fs::create_dir_all(&dir)?;
            report::write_file(&dir.join("flow.csv"), &f.to_csv())?;
            let sizes = [3, 5, 7];
            for (k, n) in flow_to_kernels(&f, &sizes, a.sigma)?.iter().zip(sizes) {
                report::write_file(&dir.join(format!("flow_kernel_n{n}.csv")), &kernel_to_csv(k))?;
            }
        }
    }
    Ok(())
}
