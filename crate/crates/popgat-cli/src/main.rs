//! Command-line harness for the popgat pipeline.
//!
//! One experiment configuration (TOML over a `desk` or `paper-scale`
//! profile) drives every subcommand: cohort synthesis, preprocessing,
//! population-graph construction, nested cross-validation training,
//! report aggregation, inner-loop ensembling, attention export and the
//! cohort statistics tables.  `--seed` overrides both the experiment and
//! cohort seeds so one flag pins an entire reproduction.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration
//! error (configuration messages carry the offending field path).

use clap::{Args, Parser, Subcommand};
use popgat::config::{ExperimentConfig, Precision};
use popgat::error::Error;
use popgat::fusion::read_predictions_csv;
use popgat::metrics::{average_precision, mean_std};
use popgat::popgraph::{knn_graph, write_graph_csv};
use popgat::radiomics::{student_t_test, welch_t_test, GroupSummary, RadiomicsVector};
use popgat::rng::stream;
use popgat::synth::{generate, read_cohort, write_cohort, Cohort};
use popgat::tabular::METADATA_COLUMNS;
use popgat::trainer::{
    ensemble_average, make_fold_plan, run_plan, run_single, MetricsReport, PlanResult,
    PreparedCohort, RunMetrics, TrainTask, INNER_ROTATIONS, OUTER_FOLDS,
};
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

#[derive(Parser)]
#[command(
    name = "popgat",
    version,
    about = "Multimodal population-graph outcome prediction on synthetic chest-CT cohorts"
)]
struct Cli {
    /// Experiment configuration (TOML over a profile's defaults).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the experiment and cohort seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default depends on the subcommand).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Increase log verbosity (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct DataArg {
    /// Cohort directory written by `synth` (generated in memory when absent).
    #[arg(long)]
    data: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic cohort and write it to disk.
    Synth,
    /// Normalise volumes and extract ground-truth radiomics features.
    Preprocess(DataArg),
    /// Fit feature weights and build the cohort population graph.
    Graph(DataArg),
    /// Train and evaluate the configured architecture over all
    /// cross-validation runs.
    Train(DataArg),
    /// Aggregate per-run metrics from a training output directory.
    Eval {
        /// Root directory written by `train`.
        #[arg(long)]
        runs: PathBuf,
    },
    /// Average the four inner models of each outer fold and score the
    /// ensembles against their members.
    Ensemble {
        /// Root directory written by `train`.
        #[arg(long)]
        runs: PathBuf,
    },
    /// Train one fold and export its test-time attention matrices.
    Explain {
        #[command(flatten)]
        data: DataArg,
        /// Outer fold of the run to explain.
        #[arg(long, default_value_t = 0)]
        outer: usize,
        /// Inner rotation of the run to explain.
        #[arg(long, default_value_t = 0)]
        inner: usize,
    },
    /// Metadata and radiomics group-comparison tables (Welch and pooled
    /// two-sample t-tests per outcome).
    Stats(DataArg),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();

    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Config { path, reason }) => {
            if path.is_empty() {
                eprintln!("configuration error: {reason}");
            } else {
                eprintln!("configuration error at `{path}`: {reason}");
            }
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::desk(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
        cfg.synth.seed = seed;
    }
    Ok(cfg)
}

fn out_dir(cli: &Cli, default: &str) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| PathBuf::from(default))
}

/// Load the cohort from disk or synthesise it from the configuration.
fn obtain_cohort(cfg: &ExperimentConfig, data: &DataArg) -> Result<Cohort, Error> {
    match &data.data {
        Some(dir) => read_cohort(dir),
        None => generate(&cfg.synth),
    }
}

fn run(cli: &Cli) -> Result<(), Error> {
    let cfg = load_config(cli)?;
    match &cli.command {
        Command::Synth => cmd_synth(cli, &cfg),
        Command::Preprocess(data) => cmd_preprocess(cli, &cfg, data),
        Command::Graph(data) => cmd_graph(cli, &cfg, data),
        Command::Train(data) => cmd_train(cli, &cfg, data),
        Command::Eval { runs } => cmd_eval(cli, runs),
        Command::Ensemble { runs } => cmd_ensemble(cli, runs),
        Command::Explain { data, outer, inner } => cmd_explain(cli, &cfg, data, *outer, *inner),
        Command::Stats(data) => cmd_stats(cli, &cfg, data),
    }
}

fn cmd_synth(cli: &Cli, cfg: &ExperimentConfig) -> Result<(), Error> {
    let dir = out_dir(cli, "cohort");
    let cohort = generate(&cfg.synth)?;
    write_cohort(&dir, &cohort)?;
    let icu = cohort.patients.iter().filter(|p| p.record.outcomes.icu).count();
    let vent = cohort.patients.iter().filter(|p| p.record.outcomes.vent).count();
    let mort = cohort.patients.iter().filter(|p| p.record.outcomes.mort).count();
    println!(
        "wrote {} patients ({}x{}x{} voxels) to {}",
        cohort.patients.len(),
        cfg.synth.shape[0],
        cfg.synth.shape[1],
        cfg.synth.shape[2],
        dir.display()
    );
    println!("outcome prevalence: icu {icu}, vent {vent}, mort {mort}");
    Ok(())
}

fn cmd_preprocess(cli: &Cli, cfg: &ExperimentConfig, data: &DataArg) -> Result<(), Error> {
    let dir = out_dir(cli, "preprocessed");
    let cohort = obtain_cohort(cfg, data)?;
    let prepared = PreparedCohort::from_cohort(&cohort)?;
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let path = dir.join("radiomics.csv");
    let wrap = |e: csv::Error| Error::Csv {
        path: path.display().to_string(),
        source: e,
    };
    let mut wtr = csv::Writer::from_path(&path).map_err(wrap)?;
    #[derive(Serialize)]
    struct Row<'a> {
        id: &'a str,
        abs_healthy: f64,
        abs_ggo: f64,
        abs_other: f64,
        total_lung: f64,
        rel_healthy: f64,
        rel_ggo: f64,
        rel_other: f64,
        lung_fraction: f64,
    }
    let scan_vol = prepared.scan_volume_mm3();
    for p in &prepared.patients {
        let r = &p.gt_radiomics;
        wtr.serialize(Row {
            id: &p.id,
            abs_healthy: r.abs_healthy,
            abs_ggo: r.abs_ggo,
            abs_other: r.abs_other,
            total_lung: r.total_lung,
            rel_healthy: r.rel_healthy,
            rel_ggo: r.rel_ggo,
            rel_other: r.rel_other,
            lung_fraction: r.total_lung / scan_vol,
        })
        .map_err(wrap)?;
    }
    wtr.flush().map_err(|e| Error::io(path.display().to_string(), e))?;
    println!(
        "normalised {} volumes; radiomics features in {}",
        prepared.n(),
        path.display()
    );
    Ok(())
}

fn cmd_graph(cli: &Cli, cfg: &ExperimentConfig, data: &DataArg) -> Result<(), Error> {
    let dir = out_dir(cli, "graph");
    let cohort = obtain_cohort(cfg, data)?;
    let prepared = PreparedCohort::from_cohort(&cohort)?;
    // Whole-cohort graph: statistics may use every patient here because
    // nothing downstream of this command is evaluated on held-out data.
    let all: Vec<usize> = (0..prepared.n()).collect();
    let mut rng = stream(cfg.seed, "graph-cli");
    let stats = popgat::trainer::FittedStats::fit(&prepared, &all, cfg.task, &cfg.graph, &mut rng)?;
    let scan_vol = prepared.scan_volume_mm3();
    let rows: Vec<Vec<f64>> = prepared
        .patients
        .iter()
        .map(|p| {
            let mut row = stats.metadata_prep.transform(&p.metadata)?;
            row.extend(stats.radiomics_scaler.transform(&popgat::trainer::fusion_features(
                &p.gt_radiomics,
                scan_vol,
            ))?);
            Ok(row)
        })
        .collect::<Result<_, Error>>()?;
    let k = cfg.graph.k.min(prepared.n().saturating_sub(1)).max(1);
    let graph = knn_graph(&rows, &stats.weights, k, cfg.graph.p, cfg.graph.squared_kernel)?;
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let ids: Vec<String> = prepared.patients.iter().map(|p| p.id.clone()).collect();
    write_graph_csv(&dir.join("edges.csv"), &graph.edges, &ids)?;
    let weights_json = serde_json::json!({
        "method": cfg.graph.weight_method.name(),
        "features": node_feature_names(),
        "weights": stats.weights.weights,
        "mu": graph.mu,
        "k": graph.k,
    });
    std::fs::write(
        dir.join("weights.json"),
        serde_json::to_string_pretty(&weights_json).map_err(|e| Error::Json {
            context: "serialising feature weights".into(),
            source: e,
        })?,
    )
    .map_err(|e| Error::io(format!("writing {}", dir.join("weights.json").display()), e))?;
    println!(
        "graph over {} patients: k={}, mean pairwise distance {:.4}; edges in {}",
        graph.n,
        graph.k,
        graph.mu,
        dir.join("edges.csv").display()
    );
    Ok(())
}

fn node_feature_names() -> Vec<&'static str> {
    let mut names: Vec<&'static str> = METADATA_COLUMNS.to_vec();
    names.extend(["rel_healthy", "rel_ggo", "rel_other", "lung_fraction"]);
    names
}

fn cmd_train(cli: &Cli, cfg: &ExperimentConfig, data: &DataArg) -> Result<(), Error> {
    let root = out_dir(
        cli,
        &format!("runs/{}-{}", cfg.task.name(), cfg.architecture.name()),
    );
    let cohort = obtain_cohort(cfg, data)?;
    let prepared = PreparedCohort::from_cohort(&cohort)?;
    let result = dispatch_run_plan(&prepared, cfg, Some(root.as_path()), false)?;
    print_report(&result.report);
    println!("run artifacts in {}", root.display());
    Ok(())
}

/// Run the plan at the configured floating-point precision.
fn dispatch_run_plan(
    cohort: &PreparedCohort,
    cfg: &ExperimentConfig,
    out_root: Option<&Path>,
    collect_attention: bool,
) -> Result<PlanResult, Error> {
    match cfg.precision {
        Precision::F32 => run_plan::<f32>(cohort, cfg, out_root, collect_attention),
        Precision::F64 => run_plan::<f64>(cohort, cfg, out_root, collect_attention),
    }
}

fn print_report(report: &MetricsReport) {
    println!(
        "{} / {} over {} runs:",
        report.task, report.architecture, report.n_runs
    );
    println!("  AP   {:.4} ± {:.4}", report.ap.mean, report.ap.std);
    println!("  AUC  {:.4} ± {:.4}", report.auc.mean, report.auc.std);
    println!("  bACC {:.4} ± {:.4}", report.bacc.mean, report.bacc.std);
    println!("  F1   {:.4} ± {:.4}", report.f1.mean, report.f1.std);
    if let Some(d) = &report.dice_pathology {
        println!("  Dice (pathology) {:.4} ± {:.4}", d.mean, d.std);
    }
    if let Some(d) = &report.dice_healthy {
        println!("  Dice (healthy)   {:.4} ± {:.4}", d.mean, d.std);
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Error> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        context: path.display().to_string(),
        source: e,
    })
}

fn cmd_eval(cli: &Cli, runs: &Path) -> Result<(), Error> {
    let cfg = ExperimentConfig::load(&runs.join("config.toml"))?;
    let mut metrics = Vec::new();
    for outer in 0..OUTER_FOLDS {
        for inner in 0..INNER_ROTATIONS {
            let path = runs.join(format!("{outer}_{inner}")).join("metrics.json");
            if path.is_file() {
                metrics.push(read_json::<RunMetrics>(&path)?);
            }
        }
    }
    if metrics.is_empty() {
        return Err(Error::InvalidArgument {
            op: "eval",
            reason: format!("no run metrics found under {}", runs.display()),
        });
    }
    let report = MetricsReport::from_runs(cfg.task, cfg.architecture, metrics);
    print_report(&report);
    let out = out_dir(cli, runs.to_str().unwrap_or("."));
    std::fs::create_dir_all(&out)
        .map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let path = out.join("report.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&report).map_err(|e| Error::Json {
            context: "serialising report".into(),
            source: e,
        })?,
    )
    .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    println!("report written to {}", path.display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct EnsembleFold {
    outer: usize,
    label: String,
    members: usize,
    member_ap: Vec<f64>,
    mean_member_ap: f64,
    ensemble_ap: f64,
}

#[derive(Debug, Serialize)]
struct EnsembleReport {
    task: String,
    architecture: String,
    folds: Vec<EnsembleFold>,
    /// Fraction of folds where the ensemble does not fall below the mean
    /// of its members.
    win_rate: f64,
}

fn cmd_ensemble(cli: &Cli, runs: &Path) -> Result<(), Error> {
    let cfg = ExperimentConfig::load(&runs.join("config.toml"))?;
    let labels = cfg.task.label_names();
    if labels.is_empty() {
        return Err(Error::InvalidArgument {
            op: "ensemble",
            reason: "the trained task has no classification labels".into(),
        });
    }
    let mut folds = Vec::new();
    let mut wins = 0usize;
    let mut total = 0usize;
    for outer in 0..OUTER_FOLDS {
        for label in &labels {
            let mut members: Vec<Vec<f64>> = Vec::new();
            let mut targets: Vec<bool> = Vec::new();
            let mut ids: Vec<String> = Vec::new();
            for inner in 0..INNER_ROTATIONS {
                let path = runs
                    .join(format!("{outer}_{inner}"))
                    .join(format!("predictions_{label}.csv"));
                if !path.is_file() {
                    continue;
                }
                let rows = read_predictions_csv(&path)?;
                if members.is_empty() {
                    ids = rows.iter().map(|r| r.id.clone()).collect();
                    targets = rows.iter().map(|r| r.label != 0).collect();
                } else if rows.len() != ids.len()
                    || rows.iter().zip(&ids).any(|(r, id)| &r.id != id)
                {
                    return Err(Error::InvalidArgument {
                        op: "ensemble",
                        reason: format!(
                            "run {outer}_{inner} predicts a different test fold than its siblings"
                        ),
                    });
                }
                members.push(rows.iter().map(|r| r.probability).collect());
            }
            if members.is_empty() {
                continue;
            }
            let ensemble = ensemble_average(&members)?;
            let member_ap: Vec<f64> = members
                .iter()
                .map(|m| average_precision(m, &targets).unwrap_or(f64::NAN))
                .collect();
            let finite: Vec<f64> = member_ap.iter().copied().filter(|v| v.is_finite()).collect();
            let mean_member_ap = if finite.is_empty() {
                f64::NAN
            } else {
                mean_std(&finite).mean
            };
            let ensemble_ap = average_precision(&ensemble, &targets).unwrap_or(f64::NAN);
            if ensemble_ap.is_finite() && mean_member_ap.is_finite() {
                total += 1;
                if ensemble_ap >= mean_member_ap {
                    wins += 1;
                }
            }
            folds.push(EnsembleFold {
                outer,
                label: label.to_string(),
                members: members.len(),
                member_ap,
                mean_member_ap,
                ensemble_ap,
            });
        }
    }
    if folds.is_empty() {
        return Err(Error::InvalidArgument {
            op: "ensemble",
            reason: format!("no prediction files found under {}", runs.display()),
        });
    }
    let report = EnsembleReport {
        task: cfg.task.name().into(),
        architecture: cfg.architecture.name().into(),
        win_rate: if total == 0 {
            f64::NAN
        } else {
            wins as f64 / total as f64
        },
        folds,
    };
    for f in &report.folds {
        println!(
            "outer {} [{}]: ensemble AP {:.4} vs mean member AP {:.4} ({} members)",
            f.outer, f.label, f.ensemble_ap, f.mean_member_ap, f.members
        );
    }
    println!(
        "ensemble at or above member mean in {:.0}% of folds",
        100.0 * report.win_rate
    );
    let out = out_dir(cli, runs.to_str().unwrap_or("."));
    std::fs::create_dir_all(&out)
        .map_err(|e| Error::io(format!("creating {}", out.display()), e))?;
    let path = out.join("ensemble.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&report).map_err(|e| Error::Json {
            context: "serialising ensemble report".into(),
            source: e,
        })?,
    )
    .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    println!("ensemble report written to {}", path.display());
    Ok(())
}

fn cmd_explain(
    cli: &Cli,
    cfg: &ExperimentConfig,
    data: &DataArg,
    outer: usize,
    inner: usize,
) -> Result<(), Error> {
    if !cfg.architecture.uses_graph() {
        return Err(Error::InvalidArgument {
            op: "explain",
            reason: format!(
                "architecture '{}' has no attention to export",
                cfg.architecture.name()
            ),
        });
    }
    let dir = out_dir(cli, "explain");
    let cohort = obtain_cohort(cfg, data)?;
    let prepared = PreparedCohort::from_cohort(&cohort)?;
    let plan = make_fold_plan(&prepared.stratify_labels(cfg.task), cfg.seed)?;
    let fold = plan
        .runs
        .iter()
        .find(|f| f.outer == outer && f.inner == inner)
        .ok_or_else(|| Error::InvalidArgument {
            op: "explain",
            reason: format!(
                "no fold {outer}_{inner}; expected outer < {OUTER_FOLDS}, inner < {INNER_ROTATIONS}"
            ),
        })?;
    let result = match cfg.precision {
        Precision::F32 => run_single::<f32>(&prepared, cfg, fold, Some(dir.as_path()), true),
        Precision::F64 => run_single::<f64>(&prepared, cfg, fold, Some(dir.as_path()), true),
    }?;
    let mut worst: f64 = 0.0;
    let mut rows_checked = 0usize;
    for pa in &result.attention {
        for matrix in &pa.export.head_averaged {
            for row in &matrix.rows {
                let sum: f64 = row.neighbors.iter().map(|n| n.alpha).sum();
                worst = worst.max((sum - 1.0).abs());
                rows_checked += 1;
            }
        }
    }
    println!(
        "explained {} test patients of fold {outer}_{inner}; {} attention rows, max |row sum - 1| = {:.2e}",
        result.attention.len(),
        rows_checked,
        worst
    );
    println!("attention matrices in {}", dir.join("attention.json").display());
    Ok(())
}

#[derive(Debug, Serialize)]
struct StatsRow {
    feature: String,
    outcome: String,
    positive: GroupSummary,
    negative: GroupSummary,
    welch_t: f64,
    welch_df: f64,
    welch_p: f64,
    pooled_t: f64,
    pooled_df: f64,
    pooled_p: f64,
}

fn summarize(values: &[f64]) -> Option<GroupSummary> {
    GroupSummary::from_values(values).ok()
}

fn cmd_stats(cli: &Cli, cfg: &ExperimentConfig, data: &DataArg) -> Result<(), Error> {
    let dir = out_dir(cli, "stats");
    let cohort = obtain_cohort(cfg, data)?;
    let prepared = PreparedCohort::from_cohort(&cohort)?;
    let mut rows: Vec<StatsRow> = Vec::new();
    let radiomics_features: [(&str, fn(&RadiomicsVector) -> f64); 4] = [
        ("rel_healthy", |r| r.rel_healthy),
        ("rel_ggo", |r| r.rel_ggo),
        ("rel_other", |r| r.rel_other),
        ("total_lung", |r| r.total_lung),
    ];
    for task in [TrainTask::Icu, TrainTask::Vent, TrainTask::Mort] {
        let split = |f: &dyn Fn(usize) -> Option<f64>| -> (Vec<f64>, Vec<f64>) {
            let mut pos = Vec::new();
            let mut neg = Vec::new();
            for (i, p) in prepared.patients.iter().enumerate() {
                if let Some(v) = f(i) {
                    if task.stratify_label(&p.outcomes) != 0 {
                        pos.push(v);
                    } else {
                        neg.push(v);
                    }
                }
            }
            (pos, neg)
        };
        let mut push_row = |feature: &str, pos: &[f64], neg: &[f64]| -> Result<(), Error> {
            let (Some(a), Some(b)) = (summarize(pos), summarize(neg)) else {
                log::warn!("stats: skipping {feature}/{} (a group is too small)", task.name());
                return Ok(());
            };
            let welch = welch_t_test(&a, &b)?;
            let pooled = student_t_test(&a, &b)?;
            rows.push(StatsRow {
                feature: feature.to_string(),
                outcome: task.name().to_string(),
                positive: a,
                negative: b,
                welch_t: welch.t,
                welch_df: welch.df,
                welch_p: welch.p,
                pooled_t: pooled.t,
                pooled_df: pooled.df,
                pooled_p: pooled.p,
            });
            Ok(())
        };
        for (c, name) in METADATA_COLUMNS.iter().enumerate() {
            let (pos, neg) = split(&|i| prepared.patients[i].metadata[c]);
            push_row(name, &pos, &neg)?;
        }
        for (name, get) in radiomics_features {
            let (pos, neg) = split(&|i| Some(get(&prepared.patients[i].gt_radiomics)));
            push_row(name, &pos, &neg)?;
        }
    }
    println!(
        "{:<16} {:<6} {:>8} {:>8} {:>9} {:>9}",
        "feature", "task", "welch_t", "welch_p", "pooled_t", "pooled_p"
    );
    for r in &rows {
        println!(
            "{:<16} {:<6} {:>8.3} {:>8.4} {:>9.3} {:>9.4}",
            r.feature, r.outcome, r.welch_t, r.welch_p, r.pooled_t, r.pooled_p
        );
    }
    std::fs::create_dir_all(&dir)
        .map_err(|e| Error::io(format!("creating {}", dir.display()), e))?;
    let path = dir.join("stats.json");
    std::fs::write(
        &path,
        serde_json::to_string_pretty(&rows).map_err(|e| Error::Json {
            context: "serialising statistics".into(),
            source: e,
        })?,
    )
    .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    println!("statistics written to {}", path.display());
    Ok(())
}
