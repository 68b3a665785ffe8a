use std::collections::BTreeSet;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::{json, Value};
use spi_core::calibration::extended_real;
use spi_core::io::{read_grouped_file, read_labeled_file, read_scores_file};
use spi_core::scores::default_jitter_delta;
use spi_core::simulation::{
    run_bound_sweep, run_coverage_experiment_with_workers, run_equivalence_check_with_workers, write_bound_rows,
    TrialConfig, DEFAULT_BETA,
};
use spi_core::{
    jitter, label_conditional_thresholds, select_beta, select_subsets, split_conformal_threshold, worst_case_bounds,
    LabeledScoreSet, ScoreVector, SpiCalibrator, SpiError, SyntheticSource,
};

/// Synthetic-powered conformal calibration.
#[derive(Parser, Debug)]
#[command(name = "spi", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Worst-case coverage bounds for (m, N, alpha, beta)
    Bounds(BoundsArgs),
    /// Prediction threshold from real and synthetic score files
    Calibrate(CalibrateArgs),
    /// Smallest beta on a grid whose lower bound reaches a target
    SelectBeta(SelectBetaArgs),
    /// Monte Carlo coverage experiment from a JSON config
    Simulate(SimulateArgs),
    /// Bound table over grids of m, alpha and beta, as CSV
    Sweep(SweepArgs),
    /// Pick the k synthetic groups nearest to the real scores
    Subset(SubsetArgs),
    /// Compare fast and transport-based membership on random instances
    Equivalence(EquivalenceArgs),
}

#[derive(Args, Debug)]
struct BoundsArgs {
    #[arg(long)]
    m: usize,
    #[arg(long = "N")]
    n: usize,
    #[arg(long)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct CalibrateArgs {
    /// Real calibration scores (`score`, or `label,score` with --label-conditional)
    #[arg(long)]
    real: PathBuf,
    /// Synthetic scores, same format as --real
    #[arg(long, required_unless_present = "only_real")]
    synth: Option<PathBuf>,
    #[arg(long)]
    alpha: f64,
    #[arg(long, default_value_t = DEFAULT_BETA)]
    beta: f64,
    /// Calibrate each label separately
    #[arg(long, conflicts_with = "only_real")]
    label_conditional: bool,
    /// Extra labels to calibrate even if absent from both files (comma separated)
    #[arg(long, value_delimiter = ',', requires = "label_conditional")]
    labels: Vec<String>,
    /// Split conformal on the real scores alone
    #[arg(long)]
    only_real: bool,
    /// Break ties with Uniform[-DELTA, DELTA] noise; DELTA defaults to 1e-9 of the score range
    #[arg(long, num_args = 0..=1, value_name = "DELTA")]
    jitter: Option<Option<f64>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Include the window table in the output
    #[arg(long)]
    windows: bool,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct SelectBetaArgs {
    #[arg(long)]
    m: usize,
    #[arg(long = "N")]
    n: usize,
    #[arg(long)]
    alpha: f64,
    #[arg(long)]
    target_lower: f64,
    #[arg(long, default_value_t = 0.01)]
    step: f64,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[arg(long)]
    config: PathBuf,
    /// Per-trial CSV; the JSON summary goes to stdout
    #[arg(long)]
    out: Option<PathBuf>,
    /// Worker threads; defaults to all cores
    #[arg(long)]
    workers: Option<usize>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',', required = true)]
    m: Vec<usize>,
    #[arg(long = "N")]
    n: usize,
    #[arg(long, value_delimiter = ',', required = true)]
    alpha: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0.4")]
    beta: Vec<f64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SubsetArgs {
    #[arg(long)]
    real: PathBuf,
    /// Synthetic scores as `group,score`
    #[arg(long)]
    groups: PathBuf,
    #[arg(long)]
    k: usize,
    /// Write the pooled scores of the selected groups as a `score` CSV
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    json: bool,
}

#[derive(Args, Debug)]
struct EquivalenceArgs {
    #[arg(long, default_value_t = 1000)]
    instances: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    json: bool,
}

fn exit_code(err: &SpiError) -> u8 {
    match err {
        SpiError::NoSolution(_) => 2,
        SpiError::Io(_) => 3,
        SpiError::Csv(e) if e.is_io_error() => 3,
        _ => 1,
    }
}

fn fmt6(v: f64) -> String {
    extended_real::format(v, Some(6))
}

fn emit(text: &str) -> Result<(), SpiError> {
    let mut out = io::stdout().lock();
    out.write_all(text.as_bytes())?;
    if !text.ends_with('\n') {
        out.write_all(b"\n")?;
    }
    Ok(())
}

fn pretty(v: &Value) -> Result<String, SpiError> {
    Ok(serde_json::to_string_pretty(v)?)
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), SpiError> {
    fs::write(path, bytes)
        .map_err(|e| SpiError::Io(io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn cmd_bounds(a: &BoundsArgs) -> Result<(), SpiError> {
    let b = worst_case_bounds(a.m, a.n, a.alpha, a.beta)?;
    if a.json {
        emit(&serde_json::to_string_pretty(&b)?)
    } else {
        emit(&format!("lower {} upper {}", fmt6(b.lower), fmt6(b.upper)))
    }
}

fn maybe_jitter(scores: ScoreVector, delta: Option<Option<f64>>, seed: u64, context: &str) -> Result<ScoreVector, SpiError> {
    match delta {
        None => Ok(scores),
        Some(_) if scores.is_empty() => Ok(scores),
        Some(d) => {
            let delta = d.unwrap_or_else(|| default_jitter_delta(&scores));
            log::debug!("jittering {context} scores with delta {delta:e}");
            jitter(&scores, delta, seed)
        }
    }
}

fn jitter_labeled(
    set: LabeledScoreSet,
    delta: Option<Option<f64>>,
    seed: u64,
    context: &str,
) -> Result<LabeledScoreSet, SpiError> {
    let scores = maybe_jitter(set.all_scores()?, delta, seed, context)?;
    LabeledScoreSet::new(set.entries.into_iter().zip(scores.values()).map(|((l, _), &s)| (l, s)).collect())
}

// separate streams for the real and synthetic perturbations
const SYNTH_STREAM: u64 = 0x5bd1_e995;

fn require_distinct(parts: &[&ScoreVector], jittered: bool) -> Result<(), SpiError> {
    if jittered {
        return Ok(());
    }
    let pooled = ScoreVector::new(parts.iter().flat_map(|s| s.values().iter().copied()).collect())?;
    pooled.ensure_distinct("real and synthetic calibration scores")
}

fn cmd_calibrate(a: &CalibrateArgs) -> Result<(), SpiError> {
    if a.label_conditional {
        return calibrate_labels(a);
    }
    let real = maybe_jitter(read_scores_file(&a.real)?, a.jitter, a.seed, "real")?;
    if a.only_real {
        require_distinct(&[&real], a.jitter.is_some())?;
        let t = split_conformal_threshold(&real, a.alpha)?;
        if a.json {
            return emit(&pretty(&json!({
                "method": "only-real",
                "m": real.len(),
                "alpha": a.alpha,
                "threshold": t,
                "trivial": t.is_trivial(),
            }))?);
        }
        return emit(&format!("threshold {}", fmt6(t.cutoff)));
    }
    let synth_path = a.synth.as_ref().expect("clap requires --synth");
    let synth = maybe_jitter(read_scores_file(synth_path)?, a.jitter, a.seed ^ SYNTH_STREAM, "synthetic")?;
    require_distinct(&[&real, &synth], a.jitter.is_some())?;
    let c = SpiCalibrator::new(real.len(), synth.len(), a.alpha, a.beta)?;
    let t = c.threshold(&real, &synth)?;
    let b = c.bounds();
    if a.json {
        let mut v = json!({
            "method": "spi",
            "threshold": t,
            "trivial": t.is_trivial(),
            "bounds": b,
            "quantile_index": c.quantile_index(),
            "rank_cuts": c.rank_cuts(),
        });
        if a.windows {
            v["windows"] = serde_json::to_value(c.table())?;
        }
        return emit(&pretty(&v)?);
    }
    let mut text = format!("threshold {}\nlower {} upper {}\n", fmt6(t.cutoff), fmt6(b.lower), fmt6(b.upper));
    if a.windows {
        text.push_str("rank lo_rank hi_rank\n");
        for (r, (lo, hi)) in c.table().rows.iter().enumerate() {
            text.push_str(&format!("{} {lo} {hi}\n", r + 1));
        }
    }
    emit(&text)
}

fn calibrate_labels(a: &CalibrateArgs) -> Result<(), SpiError> {
    let synth_path = a.synth.as_ref().expect("clap requires --synth");
    let real = jitter_labeled(read_labeled_file(&a.real)?, a.jitter, a.seed, "real")?;
    let synth = jitter_labeled(read_labeled_file(synth_path)?, a.jitter, a.seed ^ SYNTH_STREAM, "synthetic")?;
    require_distinct(&[&real.all_scores()?, &synth.all_scores()?], a.jitter.is_some())?;
    let mut universe: BTreeSet<String> = real.labels().union(&synth.labels()).cloned().collect();
    universe.extend(a.labels.iter().cloned());
    let per_label = label_conditional_thresholds(&real, &synth, &universe, a.alpha, a.beta)?;
    if a.json {
        return emit(&pretty(&json!({
            "method": "label-conditional",
            "alpha": a.alpha,
            "beta": a.beta,
            "labels": per_label,
        }))?);
    }
    let mut text = String::new();
    for (label, lt) in &per_label {
        let source = match lt.synthetic_source {
            SyntheticSource::SameLabel => "same label",
            SyntheticSource::WholeSet => "fallback: whole synthetic set",
        };
        text.push_str(&format!(
            "{label} threshold {} lower {} upper {} m {} N {} ({source})\n",
            fmt6(lt.threshold.cutoff),
            fmt6(lt.bounds.lower),
            fmt6(lt.bounds.upper),
            lt.real_count,
            lt.synthetic_count,
        ));
    }
    emit(&text)
}

fn cmd_select_beta(a: &SelectBetaArgs) -> Result<(), SpiError> {
    let s = select_beta(a.m, a.n, a.alpha, a.target_lower, a.step)?;
    if a.json {
        emit(&serde_json::to_string_pretty(&s)?)
    } else {
        emit(&format!("beta {} lower {} upper {}", fmt6(s.beta), fmt6(s.bounds.lower), fmt6(s.bounds.upper)))
    }
}

fn cmd_simulate(a: &SimulateArgs) -> Result<(), SpiError> {
    let text = fs::read_to_string(&a.config)
        .map_err(|e| SpiError::Io(io::Error::new(e.kind(), format!("{}: {e}", a.config.display()))))?;
    let config = TrialConfig::from_json(&text)?;
    let report = run_coverage_experiment_with_workers(&config, a.workers)?;
    if let Some(out) = &a.out {
        let mut buf = Vec::new();
        report.write_csv(&mut buf)?;
        write_file(out, &buf)?;
    }
    emit(&report.json_string()?)
}

fn cmd_sweep(a: &SweepArgs) -> Result<(), SpiError> {
    let rows = run_bound_sweep(&a.m, &a.beta, &a.alpha, a.n)?;
    let mut buf = Vec::new();
    write_bound_rows(&rows, &mut buf)?;
    match &a.out {
        Some(p) => write_file(p, &buf),
        None => emit(std::str::from_utf8(&buf).expect("CSV output is UTF-8")),
    }
}

fn cmd_subset(a: &SubsetArgs) -> Result<(), SpiError> {
    let real = read_scores_file(&a.real)?;
    let grouped = read_grouped_file(&a.groups)?;
    let chosen = select_subsets(&real, &grouped, a.k)?;
    if let Some(out) = &a.out {
        let ids: Vec<String> = chosen.iter().map(|g| g.group.clone()).collect();
        let mut text = String::from("score\n");
        for v in grouped.pooled(&ids)?.values() {
            text.push_str(&format!("{v}\n"));
        }
        write_file(out, text.as_bytes())?;
    }
    if a.json {
        return emit(&pretty(&json!({
            "k": a.k,
            "groups": grouped.len(),
            "group_size": grouped.group_size(),
            "selected": chosen,
        }))?);
    }
    let mut text = String::new();
    for g in &chosen {
        text.push_str(&format!("{} {}\n", g.group, fmt6(g.distance)));
    }
    emit(&text)
}

fn cmd_equivalence(a: &EquivalenceArgs) -> Result<(), SpiError> {
    let r = run_equivalence_check_with_workers(a.instances, a.seed, a.workers)?;
    if a.json {
        emit(&serde_json::to_string_pretty(&r)?)
    } else {
        emit(&format!(
            "{} disagreements ({} instances, {} candidates)",
            r.disagreements, r.instances, r.candidates
        ))
    }
}

fn run(cli: &Cli) -> Result<(), SpiError> {
    match &cli.command {
        Command::Bounds(a) => cmd_bounds(a),
        Command::Calibrate(a) => cmd_calibrate(a),
        Command::SelectBeta(a) => cmd_select_beta(a),
        Command::Simulate(a) => cmd_simulate(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Subset(a) => cmd_subset(a),
        Command::Equivalence(a) => cmd_equivalence(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            let code = exit_code(&err);
            if matches!(cli.command, Command::Simulate(_)) {
                let body = json!({ "error": err.kind(), "message": err.to_string(), "exit_code": code });
                eprintln!("{body}");
            } else {
                eprintln!("error: {err}");
            }
            ExitCode::from(code)
        }
    }
}
