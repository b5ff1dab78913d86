use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use mmprompt::config::RunConfig;
use mmprompt::harness::grid::{self, Arm, SweepParam};
use mmprompt::harness::{checkpoint, compute_metrics, run_full, write_outputs, AccuracyMatrix};
use mmprompt::taskgen::export_jsonl;
use mmprompt::Error;

#[derive(Parser)]
#[command(name = "mmprompt", version, about = "Cross-modal prompt learning on synthetic continual VQA streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Config file with `[section]` headers and `key = value` lines.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set recovery.delta=0.1`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Comma-separated seeds; defaults to `run.seed`.
    #[arg(long, env = "MMPROMPT_SEED", value_delimiter = ',')]
    seeds: Vec<u64>,
    /// Worker threads for multi-run verbs.
    #[arg(long, default_value_t = default_jobs())]
    jobs: usize,
}

fn default_jobs() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

#[derive(Subcommand)]
enum Command {
    /// Train and evaluate one configuration (once per seed).
    Run {
        #[command(flatten)]
        common: Common,
        /// Also write prompt-side checkpoints after every task.
        #[arg(long)]
        checkpoints: bool,
    },
    /// Run several model variants over the seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_delimiter = ',', default_value = "isolated,cq,full")]
        arms: Vec<String>,
    },
    /// Vary one loss or masking coefficient.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// One of delta, alpha, beta.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<f64>,
    },
    /// Task-order study: the identity order plus `n - 1` permutations.
    Orders {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 5)]
        n: usize,
        #[arg(long, value_delimiter = ',', default_value = "full,isolated")]
        arms: Vec<String>,
    },
    /// Finite-difference check of every learnable gradient on a small model.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value_t = 1e-5)]
        epsilon: f64,
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Recompute metrics from a saved metrics.json or report.json.
    Metrics {
        input: PathBuf,
    },
    /// Write the generated stream as JSON lines.
    ExportStream {
        #[command(flatten)]
        common: Common,
    },
}

#[derive(Debug)]
enum Failure {
    Lib(Error),
    Check(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Lib(Error::from(e))
    }
}

type CliResult<T> = Result<T, Failure>;

fn load_config(c: &Common) -> CliResult<RunConfig> {
    let mut cfg = match &c.config {
        Some(p) => {
            let text = fs::read_to_string(p)
                .map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
            RunConfig::from_text(&text)?
        }
        None => RunConfig::default(),
    };
    cfg.apply_overrides(&c.overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

fn seeds(c: &Common, cfg: &RunConfig) -> Vec<u64> {
    if c.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        c.seeds.clone()
    }
}

fn parse_arms(names: &[String]) -> CliResult<Vec<Arm>> {
    Ok(names.iter().map(|s| s.parse()).collect::<Result<Vec<Arm>, Error>>()?)
}

fn write(dir: &Path, name: &str, body: &str) -> CliResult<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(name), body)?;
    println!("wrote {}", dir.join(name).display());
    Ok(())
}

fn cmd_run(c: &Common, save_checkpoints: bool) -> CliResult<()> {
    let base = load_config(c)?;
    let seeds = seeds(c, &base);
    let configs: Vec<RunConfig> = seeds
        .iter()
        .map(|&s| RunConfig { seed: s, ..base.clone() })
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(c.jobs.max(1))
        .build()
        .expect("thread pool");
    let outcomes: Vec<_> = pool.install(|| {
        use rayon::prelude::*;
        configs.par_iter().map(run_full).collect()
    });
    for (cfg, outcome) in configs.iter().zip(outcomes) {
        let outcome = outcome?;
        let dir = if seeds.len() == 1 {
            c.out.clone()
        } else {
            c.out.join(format!("seed_{}", cfg.seed))
        };
        let manifest = write_outputs(&outcome.report, &cfg.to_text(), &dir)?;
        if save_checkpoints {
            let ck = dir.join("checkpoints");
            fs::create_dir_all(&ck)?;
            let mut digests = BTreeMap::new();
            digests.insert("backbone.mmpk".to_string(), checkpoint::save(&outcome.backbone, &ck.join("backbone.mmpk"))?);
            for (j, s) in outcome.checkpoints.tasks.iter().enumerate() {
                let name = format!("prompts_task{}.mmpk", j + 1);
                digests.insert(name.clone(), checkpoint::save(s, &ck.join(&name))?);
            }
            for (j, subs) in outcome.checkpoints.subtasks.iter().enumerate() {
                for (s, st) in subs.iter().enumerate() {
                    let name = format!("prompts_task{}_sub{}.mmpk", j + 1, s + 1);
                    digests.insert(name.clone(), checkpoint::save(st, &ck.join(&name))?);
                }
            }
            let text = serde_json::to_string_pretty(&digests).map_err(|e| Error::Io(e.to_string()))?;
            fs::write(ck.join("digests.json"), text)?;
        }
        let m = &outcome.report.metrics;
        println!(
            "seed {}: A = {:.4}, F_inter = {}, F_intra = {}, frozen backbone intact = {} ({} files in {})",
            cfg.seed,
            m.avg_performance,
            fmt_opt(m.inter_forgetting),
            fmt_opt(m.intra_forgetting),
            outcome.report.frozen_intact,
            manifest.files.len(),
            dir.display()
        );
    }
    Ok(())
}

fn fmt_opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.4}"))
}

fn cmd_ablate(c: &Common, arms: &[String]) -> CliResult<()> {
    let base = load_config(c)?;
    let arms = parse_arms(arms)?;
    let rows = grid::ablate(&base, &arms, &seeds(c, &base), c.jobs)?;
    write(&c.out, "ablation.csv", &grid::rows_csv(&rows))?;
    let med = grid::medians(&rows);
    write(&c.out, "ablation_medians.csv", &grid::rows_csv(&med))?;
    print!("{}", grid::rows_csv(&med));
    Ok(())
}

fn cmd_sweep(c: &Common, param: &str, values: &[f64]) -> CliResult<()> {
    let base = load_config(c)?;
    let p: SweepParam = param.parse()?;
    let rows = grid::sweep(&base, p, values, &seeds(c, &base), c.jobs)?;
    write(&c.out, &format!("sweep_{param}.csv"), &grid::rows_csv(&rows))?;
    let med = grid::medians(&rows);
    write(&c.out, &format!("sweep_{param}_medians.csv"), &grid::rows_csv(&med))?;
    print!("{}", grid::rows_csv(&med));
    Ok(())
}

fn cmd_orders(c: &Common, n: usize, arms: &[String]) -> CliResult<()> {
    let base = load_config(c)?;
    let arms = parse_arms(arms)?;
    let study = grid::orders(&base, &arms, n, c.jobs)?;
    write(&c.out, "orders.csv", &study.to_csv())?;
    let mut s = String::from("arm,std_A\n");
    for (a, v) in &study.std {
        s.push_str(&format!("{a},{v}\n"));
    }
    write(&c.out, "orders_std.csv", &s)?;
    print!("{s}");
    Ok(())
}

fn cmd_gradcheck(c: &Common, epsilon: f64, tolerance: f64) -> CliResult<()> {
    let mut cfg = grid::gradcheck_config();
    if let Some(p) = &c.config {
        let text = fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?;
        cfg.apply_text(&text)?;
    }
    cfg.apply_overrides(&c.overrides)?;
    let r = grid::gradient_check(&cfg, epsilon, tolerance)?;
    println!("{}", serde_json::to_string_pretty(&r).map_err(|e| Error::Io(e.to_string()))?);
    if r.passed() {
        Ok(())
    } else {
        Err(Failure::Check(format!(
            "max relative error {:.3e} exceeds {tolerance:.1e}",
            r.max_rel_error
        )))
    }
}

fn cmd_metrics(input: &Path) -> CliResult<()> {
    let text = fs::read_to_string(input)?;
    let v: serde_json::Value = serde_json::from_str(&text).map_err(|e| Error::Io(e.to_string()))?;
    let bad = |what: &str| Error::Io(format!("{}: {what}", input.display()));
    let matrices: BTreeMap<String, AccuracyMatrix> =
        serde_json::from_value(v.get("matrices").cloned().ok_or_else(|| bad("no matrices field"))?)
            .map_err(|e| bad(&e.to_string()))?;
    let subtasks: Vec<AccuracyMatrix> = match v.get("subtask_matrices") {
        Some(s) => serde_json::from_value(s.clone()).map_err(|e| bad(&e.to_string()))?,
        None => Vec::new(),
    };
    let joint = matrices.get("joint").ok_or_else(|| bad("no joint matrix"))?;
    let m = compute_metrics(joint, matrices.get("v_only"), matrices.get("q_only"), Some(&subtasks))?;
    println!("{}", serde_json::to_string_pretty(&m).map_err(|e| Error::Io(e.to_string()))?);
    Ok(())
}

fn cmd_export(c: &Common) -> CliResult<()> {
    let cfg = load_config(c)?;
    fs::create_dir_all(&c.out)?;
    for s in seeds(c, &cfg) {
        let stream = mmprompt::harness::build_stream(&RunConfig { seed: s, ..cfg.clone() })?;
        let path = c.out.join(format!("stream_seed{s}.jsonl"));
        let n = export_jsonl(&stream, BufWriter::new(fs::File::create(&path)?))?;
        println!("wrote {n} samples to {}", path.display());
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Run { common, checkpoints } => cmd_run(common, *checkpoints),
        Command::Ablate { common, arms } => cmd_ablate(common, arms),
        Command::Sweep { common, param, values } => cmd_sweep(common, param, values),
        Command::Orders { common, n, arms } => cmd_orders(common, *n, arms),
        Command::Gradcheck {
            common,
            epsilon,
            tolerance,
        } => cmd_gradcheck(common, *epsilon, *tolerance),
        Command::Metrics { input } => cmd_metrics(input),
        Command::ExportStream { common } => cmd_export(common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Lib(e @ Error::Config(_))) => {
            eprintln!("config error: {e}");
            ExitCode::from(2)
        }
        Err(Failure::Lib(e @ Error::Numeric { .. })) => {
            eprintln!("numeric abort: {e}");
            ExitCode::from(3)
        }
        Err(Failure::Lib(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
        Err(Failure::Check(msg)) => {
            eprintln!("check failed: {msg}");
            ExitCode::from(1)
        }
    }
}
