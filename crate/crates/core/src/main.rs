use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use cobs::covtest::{pair_test, StatKind};
use cobs::data::load_dataset;
use cobs::diagnostic::{homogeneity_diagnostic, ks_critical_1pct, ks_uniform, qq_points, write_qq_csv, DiagnosticParams};
use cobs::error::{Error, Result};
use cobs::eval::{self, hypothesis_rates, partition_rates, RateReport, StudySettings, SweepOptions};
use cobs::pipeline::{read_json, run_pipeline, select_from_stepdown, write_json, RunConfig, SelectionArtifact};
use cobs::quasiclique::{build_graph, rival_select, QuasiCliqueParams};
use cobs::simgen::{sample_dataset, write_simulation, MarginalFamily, SimSpec};
use cobs::stepdown::{stepdown, Engine, MultiplierSchedule, StepdownConfig, StepdownResult};

#[derive(Parser)]
#[command(name = "cobs", version, about = "Select partitions sharing one covariance matrix")]
struct Cli {
    /// Worker threads (default: all cores). Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Input {
    /// Samples x variables CSV with a header row.
    #[arg(long)]
    matrix: PathBuf,
    /// `sample_id,partition_id[,window]` CSV.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 5)]
    min_samples: usize,
}

#[derive(Args)]
struct Bootstrap {
    #[arg(long, default_value_t = 200)]
    trials: usize,
    #[arg(long, default_value = "normalized")]
    stat: StatKind,
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct Design {
    #[arg(long, default_value_t = 15)]
    r1: usize,
    #[arg(long, default_value_t = 5)]
    r2: usize,
    #[arg(long, default_value_t = 5)]
    r3: usize,
    #[arg(long, default_value_t = 15)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    d: usize,
    /// gaussian, bimodal, heavytail or empirical:<file>
    #[arg(long, default_value = "gaussian")]
    marginals: MarginalFamily,
}

impl Design {
    fn spec(&self, beta: f64, seed: u64) -> SimSpec {
        SimSpec {
            r1: self.r1,
            r2: self.r2,
            r3: self.r3,
            n: self.n,
            d: self.d,
            beta,
            marginals: self.marginals.clone(),
            seed,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum Schedule {
    Shared,
    Fresh,
}

#[derive(Clone, Copy, ValueEnum)]
enum SelectMethod {
    Cobs,
    Spectral,
    Localsearch,
    Densesplit,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic three-group dataset.
    Simulate {
        #[command(flatten)]
        design: Design,
        #[arg(long, default_value_t = 0.0)]
        beta: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "sim")]
        out_prefix: PathBuf,
    },
    /// Test equality of covariance between two partitions.
    TestPair {
        #[command(flatten)]
        input: Input,
        /// Partition index (order of first appearance in the manifest).
        #[arg(long)]
        a: usize,
        #[arg(long)]
        b: usize,
        #[command(flatten)]
        boot: Bootstrap,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Test all pairs with family-wise error control.
    Stepdown {
        #[command(flatten)]
        input: Input,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[command(flatten)]
        boot: Bootstrap,
        #[arg(long, default_value = "naive")]
        engine: Engine,
        #[arg(long, value_enum, default_value = "shared")]
        schedule: Schedule,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Select partitions from a stepdown result.
    Select {
        /// Stepdown result JSON.
        #[arg(long)]
        stepdown: PathBuf,
        #[arg(long, default_value_t = 0.95)]
        gamma: f64,
        #[arg(long, value_enum, default_value = "cobs")]
        method: SelectMethod,
        #[arg(long, value_delimiter = ',')]
        core: Vec<usize>,
        #[arg(long)]
        postprocess: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Random-bipartition homogeneity diagnostic.
    Diagnose {
        #[command(flatten)]
        input: Input,
        /// `all` or comma-separated partition indices.
        #[arg(long, default_value = "all")]
        partitions: String,
        #[arg(long, default_value_t = 250)]
        divisions: usize,
        #[command(flatten)]
        boot: Bootstrap,
        /// QQ CSV (`uniform,empirical`).
        #[arg(long, default_value = "qq.csv")]
        out: PathBuf,
    },
    /// Simulation studies.
    Evaluate {
        #[command(subcommand)]
        study: Study,
    },
    /// Full pipeline from a config file.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// `key=value` override of a config entry.
        #[arg(long = "set")]
        overrides: Vec<String>,
    },
}

#[derive(Subcommand)]
enum Study {
    /// Hypothesis (and partition) TPR/FPR over a β × α grid.
    Roc {
        #[command(flatten)]
        design: Design,
        #[arg(long, value_delimiter = ',', default_value = "0,0.3,0.6,1")]
        betas: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_value = "0.01,0.05,0.1,0.2,0.3,0.5,0.7,0.9")]
        alphas: Vec<f64>,
        #[arg(long, default_value_t = 10)]
        replicates: usize,
        #[command(flatten)]
        boot: Bootstrap,
        #[arg(long, default_value_t = 0.95)]
        gamma: f64,
        #[arg(long)]
        bonferroni: bool,
        #[arg(long)]
        selection: bool,
        #[arg(long, default_value = "roc.csv")]
        out: PathBuf,
    },
    /// Spectral error of the pooled covariance per selection method.
    Compare {
        #[command(flatten)]
        design: Design,
        #[arg(long, value_delimiter = ',', default_value = "0,1")]
        betas: Vec<f64>,
        #[arg(long, default_value_t = 0.1)]
        alpha: f64,
        #[arg(long, default_value_t = 10)]
        replicates: usize,
        #[command(flatten)]
        boot: Bootstrap,
        #[arg(long, default_value_t = 0.95)]
        gamma: f64,
        /// Monte Carlo size of the reference covariance.
        #[arg(long, default_value_t = 50_000)]
        mc_n: usize,
        #[arg(long, default_value = "compare.csv")]
        out: PathBuf,
    },
    /// TPR/FPR of one stepdown result (and optionally a selection) against the group layout.
    Rates {
        #[arg(long)]
        stepdown: PathBuf,
        #[arg(long)]
        selection: Option<PathBuf>,
        #[arg(long, default_value_t = 15)]
        r1: usize,
        #[arg(long, default_value_t = 5)]
        r2: usize,
        #[arg(long, default_value_t = 5)]
        r3: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Serialize)]
struct Rates {
    hypothesis: RateReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    partition: Option<RateReport>,
}

fn emit<T: Serialize>(out: Option<&Path>, value: &T) -> Result<()> {
    match out {
        Some(path) => write_json(path, value),
        None => {
            println!("{}", serde_json::to_string_pretty(value).expect("output serializes"));
            Ok(())
        }
    }
}

fn settings(boot: &Bootstrap, gamma: f64, mc_n: usize) -> StudySettings {
    StudySettings {
        trials: boot.trials,
        kind: boot.stat,
        epsilon: boot.epsilon,
        gamma,
        mc_n,
    }
}

fn parse_ids(text: &str) -> Result<Option<Vec<usize>>> {
    if text == "all" {
        return Ok(None);
    }
    text.split(',')
        .map(|t| t.trim().parse().map_err(|_| Error::Config(format!("bad partition index {t:?}"))))
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

fn execute(command: Command) -> Result<()> {
    match command {
        Command::Simulate { design, beta, seed, out_prefix } => {
            let (ds, truth) = sample_dataset(&design.spec(beta, seed))?;
            for path in write_simulation(&out_prefix, &ds, &truth)? {
                println!("{}", path.display());
            }
        }
        Command::TestPair { input, a, b, boot, out } => {
            let ds = load_dataset(&input.matrix, &input.manifest, input.min_samples)?;
            for p in [a, b] {
                if p >= ds.r() {
                    return Err(Error::Config(format!("partition index {p} outside 0..{}", ds.r())));
                }
            }
            let test = pair_test(ds.partition(a), ds.partition(b), boot.trials, boot.stat, boot.epsilon, boot.seed)?;
            emit(out.as_deref(), &test)?;
        }
        Command::Stepdown { input, alpha, boot, engine, schedule, out } => {
            let ds = load_dataset(&input.matrix, &input.manifest, input.min_samples)?;
            let cfg = StepdownConfig {
                alpha,
                trials: boot.trials,
                kind: boot.stat,
                epsilon: boot.epsilon,
                seed: boot.seed,
                engine,
                schedule: match schedule {
                    Schedule::Shared => MultiplierSchedule::Shared,
                    Schedule::Fresh => MultiplierSchedule::FreshPerStep,
                },
                ..Default::default()
            };
            emit(out.as_deref(), &stepdown(&ds, &cfg)?)?;
        }
        Command::Select { stepdown, gamma, method, core, postprocess, out } => {
            let result: StepdownResult = read_json(&stepdown)?;
            let params = QuasiCliqueParams {
                gamma,
                core: (!core.is_empty()).then_some(core),
                postprocess,
            };
            let rival = match method {
                SelectMethod::Cobs => None,
                SelectMethod::Spectral => Some("spectral"),
                SelectMethod::Localsearch => Some("localsearch"),
                SelectMethod::Densesplit => Some("densesplit"),
            };
            let selection = match rival {
                None => select_from_stepdown(&result, &params)?,
                Some(name) => {
                    let graph = build_graph(&result.accepted, result.r)?;
                    SelectionArtifact {
                        method: name.into(),
                        gamma,
                        core: None,
                        postprocess: false,
                        selected: rival_select(&graph, gamma, name.parse()?)?,
                        trace: None,
                    }
                }
            };
            emit(out.as_deref(), &selection)?;
        }
        Command::Diagnose { input, partitions, divisions, boot, out } => {
            let ds = load_dataset(&input.matrix, &input.manifest, input.min_samples)?;
            let selected = parse_ids(&partitions)?.unwrap_or_else(|| (0..ds.r()).collect());
            let params = DiagnosticParams {
                divisions,
                trials: boot.trials,
                kind: boot.stat,
                epsilon: boot.epsilon,
                seed: boot.seed,
            };
            let res = homogeneity_diagnostic(&ds, &selected, &params)?;
            write_qq_csv(&out, &qq_points(&res.pvalues))?;
            let ks = ks_uniform(&res.pvalues);
            println!(
                "mean p = {:.4}, KS = {:.4} (1% critical {:.4})",
                res.pvalues.iter().sum::<f64>() / res.pvalues.len() as f64,
                ks,
                ks_critical_1pct(res.pvalues.len())
            );
        }
        Command::Evaluate { study } => evaluate(study)?,
        Command::Run { config, overrides } => {
            let cfg = RunConfig::load(&config, &overrides)?;
            let report = run_pipeline(&cfg)?;
            println!("selected {:?} ({} of {})", report.selected, report.selected.len(), report.r);
        }
    }
    Ok(())
}

fn evaluate(study: Study) -> Result<()> {
    match study {
        Study::Roc { design, betas, alphas, replicates, boot, gamma, bonferroni, selection, out } => {
            let sweep = eval::roc_sweep(
                &design.spec(0.0, 0),
                &betas,
                &alphas,
                replicates,
                boot.seed,
                &settings(&boot, gamma, 0),
                SweepOptions { bonferroni, selection },
            )?;
            sweep.write_csv(&out)?;
            for c in sweep.cells() {
                println!(
                    "beta={} alpha={} {}: tpr={:.4} fpr={:.4}",
                    c.beta, c.alpha, c.procedure, c.hypothesis_tpr, c.hypothesis_fpr
                );
            }
        }
        Study::Compare { design, betas, alpha, replicates, boot, gamma, mc_n, out } => {
            let st = settings(&boot, gamma, mc_n);
            let results = betas
                .iter()
                .map(|&beta| eval::method_comparison(&design.spec(beta, 0), alpha, replicates, boot.seed, &st))
                .collect::<Result<Vec<_>>>()?;
            eval::write_comparison_csv(&out, &results)?;
            for res in &results {
                for m in &res.methods {
                    println!("beta={} {}: mean error {:.4}", res.spec.beta, m.method, m.mean);
                }
            }
        }
        Study::Rates { stepdown, selection, r1, r2, r3, out } => {
            let result: StepdownResult = read_json(&stepdown)?;
            if r1 + r2 + r3 != result.r {
                return Err(Error::Config(format!(
                    "group sizes {r1}+{r2}+{r3} do not match {} partitions",
                    result.r
                )));
            }
            let partition = match selection {
                Some(path) => {
                    let sel: SelectionArtifact = read_json(&path)?;
                    Some(partition_rates(&sel.selected, r1, r2, r3))
                }
                None => None,
            };
            let rates = Rates { hypothesis: hypothesis_rates(&result.accepted, r1, result.r)?, partition };
            emit(out.as_deref(), &rates)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: cannot start thread pool: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
