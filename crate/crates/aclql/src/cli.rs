//! Subcommand binary wiring the pipeline: dataset generation, quality
//! annotation, behavior cloning, training, evaluation, tabular
//! verification, and plot-data export.
//!
//! Every RunConfig field has a mirror flag; precedence is flag over config
//! file over built-in default. Exit codes: 0 ok, 1 verification failure,
//! 2 usage or IO error.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::approximator::{actor_action_dim, Checkpoint};
use crate::config::{QualityMode, RunConfig};
use crate::dataset::{load_dataset, save_dataset};
use crate::envs::{env_spec, gen_point_mass, normalized_score, QualityTier, POINT_MASS_ENV};
use crate::error::{Error, Result};
use crate::exec::ExecMode;
use crate::quality::{annotate_dataset, load_annotations, save_annotations};
use crate::tabular::{verify_corpus, VerifyReport};
use crate::trainer::{
    evaluate_policy, flatten_unannotated, pretrain_bc, run_training, WeightMode,
};

#[derive(Parser, Debug)]
#[command(
    name = "aclql",
    version,
    about = "Offline RL lab: adaptive conservative Q-learning with tabular cross-checks"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Generate a scripted offline dataset as JSONL.
    GenData(GenDataArgs),
    /// Annotate a dataset with per-transition quality and gap targets.
    Quality(QualityArgs),
    /// Clone the dataset's behavior policy into a checkpoint.
    TrainBc(TrainBcArgs),
    /// Run alternating offline training, writing a run directory.
    Train(TrainArgs),
    /// Roll out a checkpoint's actor and print score JSON.
    Eval(EvalArgs),
    /// Check the conservatism identities on seeded random MDPs.
    VerifyTabular(VerifyTabularArgs),
    /// Flatten a run's metrics into long-format CSV for plotting.
    ExportPlot(ExportPlotArgs),
}

/// Mirrors of the RunConfig fields plus the config file path. Any flag set
/// here overrides the corresponding file value.
#[derive(Args, Debug, Clone, Default)]
struct ConfigFlags {
    /// JSON config file with RunConfig fields; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    gamma: Option<f64>,
    /// Mixing weight between normalized return and normalized reward.
    #[arg(long)]
    lambda: Option<f64>,
    /// Conservatism anchor alpha.
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr_critic: Option<f64>,
    #[arg(long)]
    lr_actor: Option<f64>,
    #[arg(long)]
    lr_weight: Option<f64>,
    #[arg(long)]
    polyak_rate: Option<f64>,
    #[arg(long)]
    bc_steps: Option<u64>,
    /// Training steps.
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    eval_every: Option<u64>,
    #[arg(long)]
    eval_episodes: Option<u64>,
    #[arg(long)]
    n_ood_samples: Option<usize>,
    #[arg(long)]
    bc_sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// "lambda-mix" or "nstep-sarsa(N)".
    #[arg(long)]
    quality_mode: Option<String>,
    /// Comma-separated hidden layer widths, e.g. 32,32.
    #[arg(long, value_delimiter = ',')]
    hidden: Option<Vec<usize>>,
}

impl ConfigFlags {
    fn effective(&self) -> Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        macro_rules! over {
            ($opt:expr, $field:expr) => {
                if let Some(v) = &$opt {
                    $field = v.clone();
                }
            };
        }
        over!(self.gamma, cfg.gamma);
        over!(self.lambda, cfg.lambda_quality);
        over!(self.alpha, cfg.alpha_cql_anchor);
        over!(self.batch_size, cfg.batch_size);
        over!(self.lr_critic, cfg.lr_critic);
        over!(self.lr_actor, cfg.lr_actor);
        over!(self.lr_weight, cfg.lr_weight);
        over!(self.polyak_rate, cfg.polyak_rate);
        over!(self.bc_steps, cfg.bc_steps);
        over!(self.steps, cfg.train_steps);
        over!(self.eval_every, cfg.eval_every);
        over!(self.eval_episodes, cfg.eval_episodes);
        over!(self.n_ood_samples, cfg.n_ood_samples);
        over!(self.bc_sigma, cfg.bc_sigma);
        over!(self.seed, cfg.seed);
        if let Some(s) = &self.quality_mode {
            cfg.quality_mode = s.parse()?;
        }
        over!(self.hidden, cfg.hidden);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Args, Debug)]
struct GenDataArgs {
    #[arg(long, default_value = POINT_MASS_ENV)]
    env: String,
    /// expert | medium | medium-replay | random.
    #[arg(long)]
    tier: String,
    #[arg(long)]
    episodes: usize,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(Args, Debug)]
struct QualityArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Score with a truncated n-step return instead of the full-episode one.
    #[arg(long, conflicts_with = "quality_mode")]
    nstep: Option<u32>,
    /// Run the annotation kernel sequentially.
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(Args, Debug)]
struct TrainBcArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    quality: PathBuf,
    /// Run directory for metrics, checkpoints, and the selection marker.
    #[arg(long)]
    out: PathBuf,
    /// learned | pinned | cql | unconstrained. The constant modes take the
    /// alpha anchor as their weight.
    #[arg(long, default_value = "learned")]
    mode: String,
    /// Run the evaluation and bulk-Q kernels sequentially.
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, default_value = POINT_MASS_ENV)]
    env: String,
    /// Roll episodes sequentially.
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(Args, Debug)]
struct VerifyTabularArgs {
    /// Number of seeded random MDP instances.
    #[arg(long, default_value_t = 100)]
    trials: usize,
    /// Also write the report JSON here.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Verify instances sequentially.
    #[arg(long)]
    sequential: bool,
    #[command(flatten)]
    cfg: ConfigFlags,
}

#[derive(Args, Debug)]
struct ExportPlotArgs {
    /// Run directory produced by `train`.
    #[arg(long)]
    run: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

fn exec_mode(sequential: bool) -> ExecMode {
    if sequential {
        ExecMode::Sequential
    } else {
        ExecMode::Parallel
    }
}

/// Parses argv and runs one subcommand to completion. Command output goes
/// to `stdout`; progress and errors go to stderr.
pub fn run<I, T>(argv: I, stdout: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // --help and --version land here and are not errors.
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.cmd, stdout) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Verification(_) => 1,
                _ => 2,
            }
        }
    }
}

fn dispatch(cmd: Cmd, stdout: &mut dyn Write) -> Result<i32> {
    match cmd {
        Cmd::GenData(a) => gen_data(a),
        Cmd::Quality(a) => quality(a),
        Cmd::TrainBc(a) => train_bc(a, stdout),
        Cmd::Train(a) => train(a, stdout),
        Cmd::Eval(a) => eval(a, stdout),
        Cmd::VerifyTabular(a) => verify_tabular(a, stdout),
        Cmd::ExportPlot(a) => export_plot(a),
    }
}

fn print_line(stdout: &mut dyn Write, value: &impl Serialize) -> Result<()> {
    let json = serde_json::to_string(value).expect("report serializes");
    writeln!(stdout, "{json}").map_err(|e| Error::io("<stdout>", e))?;
    Ok(())
}

fn gen_data(a: GenDataArgs) -> Result<i32> {
    if a.env != POINT_MASS_ENV {
        return Err(Error::Usage(format!(
            "dataset generation supports only {POINT_MASS_ENV}, got {}",
            a.env
        )));
    }
    if a.episodes == 0 {
        return Err(Error::Usage("need at least one episode".into()));
    }
    let tier: QualityTier = a.tier.parse()?;
    let cfg = a.cfg.effective()?;
    let mut data = gen_point_mass(tier, a.episodes, cfg.seed, cfg.gamma);
    data.header.config_hash = cfg.hash();
    save_dataset(&data, &a.out)?;
    eprintln!(
        "wrote {} episodes ({} transitions) to {}",
        data.episodes.len(),
        data.n_transitions(),
        a.out.display()
    );
    Ok(0)
}

fn quality(a: QualityArgs) -> Result<i32> {
    let mut cfg = a.cfg.effective()?;
    if let Some(n) = a.nstep {
        if n == 0 {
            return Err(Error::Usage("n-step count must be >= 1".into()));
        }
        cfg.quality_mode = QualityMode::NstepSarsa(n);
    }
    let data = load_dataset(&a.data)?;
    let mut ann = annotate_dataset(
        &data,
        cfg.lambda_quality,
        cfg.quality_mode,
        exec_mode(a.sequential),
    )?;
    ann.header.config_hash = cfg.hash();
    save_annotations(&ann, &a.out)?;
    eprintln!("annotated {} transitions to {}", ann.rows.len(), a.out.display());
    Ok(0)
}

#[derive(Serialize)]
struct BcSummary {
    steps: u64,
    bc_final_mse: f64,
}

fn train_bc(a: TrainBcArgs, stdout: &mut dyn Write) -> Result<i32> {
    let cfg = a.cfg.effective()?;
    let data = load_dataset(&a.data)?;
    let flat = flatten_unannotated(&data)?;
    let (behavior, bc_final_mse) = pretrain_bc(&flat, &cfg)?;
    let mut ck = Checkpoint::new(&cfg.hash(), cfg.bc_steps);
    ck.insert_net(&behavior);
    ck.save(&a.out)?;
    print_line(stdout, &BcSummary { steps: cfg.bc_steps, bc_final_mse })?;
    Ok(0)
}

#[derive(Serialize)]
struct TrainSummary {
    run_dir: String,
    selected_step: u64,
    bc_final_mse: f64,
    final_avg_q: f64,
    final_eval_mean: f64,
    final_eval_std: f64,
    normalized_score: f64,
}

fn train(a: TrainArgs, stdout: &mut dyn Write) -> Result<i32> {
    let cfg = a.cfg.effective()?;
    let mode = match a.mode.as_str() {
        "learned" => WeightMode::Learned,
        "pinned" => WeightMode::Pinned(cfg.alpha_cql_anchor),
        "cql" => WeightMode::CqlBaseline(cfg.alpha_cql_anchor),
        "unconstrained" => WeightMode::Unconstrained,
        other => {
            return Err(Error::Usage(format!(
                "unknown weight mode {other:?}; expected learned, pinned, cql, or unconstrained"
            )))
        }
    };
    let data = load_dataset(&a.data)?;
    let ann = load_annotations(&a.quality)?;
    let out = run_training(&data, &ann, &cfg, mode, &a.out, exec_mode(a.sequential))?;
    let anchors = env_spec(&data.header.env)?.anchors;
    print_line(
        stdout,
        &TrainSummary {
            run_dir: a.out.display().to_string(),
            selected_step: out.selected_step,
            bc_final_mse: out.bc_final_mse,
            final_avg_q: out.final_avg_q,
            final_eval_mean: out.final_eval_mean,
            final_eval_std: out.final_eval_std,
            normalized_score: normalized_score(out.final_eval_mean, &anchors)?,
        },
    )?;
    Ok(0)
}

#[derive(Serialize)]
struct EvalSummary {
    mean_return: f64,
    std_return: f64,
    normalized_score: f64,
}

fn eval(a: EvalArgs, stdout: &mut dyn Write) -> Result<i32> {
    let cfg = a.cfg.effective()?;
    let spec = env_spec(&a.env)?;
    let ck = Checkpoint::load(&a.checkpoint)?;
    let actor = ck.extract_net("actor")?;
    if actor.input_dim != spec.obs_dim || actor_action_dim(&actor) != spec.action_dim {
        return Err(Error::Dim(format!(
            "checkpoint actor is {}-obs {}-action, env {} needs {}-obs {}-action",
            actor.input_dim,
            actor_action_dim(&actor),
            a.env,
            spec.obs_dim,
            spec.action_dim
        )));
    }
    let (mean_return, std_return) =
        evaluate_policy(&actor, cfg.eval_episodes, exec_mode(a.sequential));
    print_line(
        stdout,
        &EvalSummary {
            mean_return,
            std_return,
            normalized_score: normalized_score(mean_return, &spec.anchors)?,
        },
    )?;
    Ok(0)
}

#[derive(Serialize)]
struct VerifyArtifact<'a> {
    version: u32,
    config_hash: &'a str,
    trials: usize,
    corpus_seed: u64,
    alpha: f64,
    report: &'a VerifyReport,
}

fn verify_tabular(a: VerifyTabularArgs, stdout: &mut dyn Write) -> Result<i32> {
    if a.trials == 0 {
        return Err(Error::Usage("need at least one trial".into()));
    }
    let cfg = a.cfg.effective()?;
    let report = verify_corpus(
        a.trials,
        cfg.seed,
        cfg.alpha_cql_anchor,
        exec_mode(a.sequential),
    );
    let hash = cfg.hash();
    let artifact = VerifyArtifact {
        version: 1,
        config_hash: &hash,
        trials: a.trials,
        corpus_seed: cfg.seed,
        alpha: cfg.alpha_cql_anchor,
        report: &report,
    };
    let json = serde_json::to_string(&artifact).expect("report serializes");
    writeln!(stdout, "{json}").map_err(|e| Error::io("<stdout>", e))?;
    if let Some(path) = &a.out {
        std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))?;
    }
    if report.violations.is_empty() {
        Ok(0)
    } else {
        for v in &report.violations {
            eprintln!("violation: {v}");
        }
        Ok(1)
    }
}

fn export_plot(a: ExportPlotArgs) -> Result<i32> {
    let meta_path = a.run.join("run.json");
    let meta_text =
        std::fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: serde_json::Value = serde_json::from_str(&meta_text).map_err(|e| Error::Parse {
        path: meta_path.clone(),
        line: e.line(),
        msg: e.to_string(),
    })?;
    let hash = meta
        .get("config_hash")
        .and_then(|v| v.as_str())
        .ok_or_else(|| Error::Schema(format!("{} has no config_hash", meta_path.display())))?;

    let metrics_path = a.run.join("metrics.csv");
    let text =
        std::fs::read_to_string(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?;
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Schema(format!("{} is empty", metrics_path.display())))?;
    let columns: Vec<&str> = header.split(',').collect();
    if columns.first() != Some(&"step") || columns.len() < 2 {
        return Err(Error::Schema(format!(
            "{} does not start with a step-keyed metrics header",
            metrics_path.display()
        )));
    }

    let mut out = String::new();
    out.push_str(&format!("# version=1 config_hash={hash}\n"));
    out.push_str("step,metric,value\n");
    for (lineno, line) in lines.enumerate() {
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != columns.len() {
            return Err(Error::Parse {
                path: metrics_path.clone(),
                line: lineno + 2,
                msg: format!("expected {} fields, got {}", columns.len(), fields.len()),
            });
        }
        // Values are copied as written so the export stays byte-stable.
        for (name, value) in columns[1..].iter().zip(&fields[1..]) {
            out.push_str(&format!("{},{name},{value}\n", fields[0]));
        }
    }
    std::fs::write(&a.out, out).map_err(|e| Error::io(&a.out, e))?;
    Ok(0)
}

/// Test hook: run with string args against a buffered stdout.
pub fn run_str(args: &[&str], stdout: &mut Vec<u8>) -> i32 {
    run(std::iter::once("aclql").chain(args.iter().copied()), stdout)
}
