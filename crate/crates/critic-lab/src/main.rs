//! Command-line front end: data generation, training, scoring, evaluation,
//! selection simulation, ablation grids, gradient checks, and the one-command
//! pinned reproduction.
//!
//! Exit codes: 0 success, 2 usage, 3 data, 4 numeric, 5 I/O.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use critic_lab::domain::{
    load_dataset, load_scores, save_dataset, save_scores, score_map, Dataset, ScoreMap,
    ScoreRecord,
};
use critic_lab::encoder::{EncoderConfig, EncoderParams};
use critic_lab::error::{DomainError, NumericError};
use critic_lab::losses::{LossKind, Temperature};
use critic_lab::metrics::{
    aggregate_report, ndcg_at_k, oracle_scores, EvalConfig, KSpec, MarginPredicate,
};
use critic_lab::pipeline::{self, AblationKind, ExperimentConfig};
use critic_lab::sim::{run_simulation, Critic, SelectionMode, SimConfig, SuccessRule};
use critic_lab::synthworld::{derive_seed, flip_labels, generate_dataset, Stage, WorldConfig};
use critic_lab::trainer::{two_stage, NegativeStrategy, TrainConfig, TrainState};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Parser)]
#[command(name = "critic-lab", version, about = "Ranking-critic laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset
    GenData(GenDataArgs),
    /// Train a critic checkpoint
    Train(TrainArgs),
    /// Score every candidate with a checkpoint or the level oracle
    Score(ScoreArgs),
    /// Evaluate a score file against a dataset
    Eval(EvalArgs),
    /// Run the best-of-N selection simulator
    Simulate(SimulateArgs),
    /// Label-noise ablation grid
    AblateNoise(AblateNoiseArgs),
    /// Negative-count ablation grid
    AblateNegdensity(AblateNegdensityArgs),
    /// Training-data-scale ablation grid
    AblateDatascale(AblateDatascaleArgs),
    /// Run the gradient and equivalence verification suites
    Gradcheck(GradcheckArgs),
    /// Reproduce the full pinned experiment and write all reports
    Repro(ReproArgs),
}

/// Flag-value errors detected after clap parsing; exit code 2.
#[derive(Debug, thiserror::Error)]
#[error("{0}")]
struct UsageError(String);

fn parse_flag<T>(s: &str, what: &str) -> Result<T, anyhow::Error>
where
    T: FromStr<Err = String>,
{
    T::from_str(s)
        .map_err(|e| UsageError(format!("invalid {what}: {e}")).into())
}

fn parse_f64_list(s: &str, what: &str) -> Result<Vec<f64>, anyhow::Error> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse::<f64>()
                .map_err(|_| UsageError(format!("invalid {what} entry {v:?}")).into())
        })
        .collect()
}

#[derive(Serialize)]
struct Manifest {
    command: String,
    args: Vec<String>,
    version: String,
}

fn manifest(command: &str) -> Manifest {
    Manifest {
        command: command.to_string(),
        args: std::env::args().skip(1).collect(),
        version: env!("CARGO_PKG_VERSION").to_string(),
    }
}

#[derive(Args)]
struct GenDataArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    pages: usize,
    /// Curriculum stage: 1 (dense easy negatives) or 2 (boundary-weighted)
    #[arg(long, default_value = "1")]
    stage: String,
    #[arg(long, default_value_t = 8)]
    latent_dim: usize,
    #[arg(long, default_value_t = 16)]
    feature_dim: usize,
    #[arg(long, default_value_t = 30)]
    candidates: usize,
    /// Observation noise sigma
    #[arg(long, default_value_t = 0.05)]
    noise: f64,
    /// Level proportions optimal,suboptimal,distractor,unrelated
    #[arg(long, default_value = "0.089,0.036,0.158,0.718")]
    mix: String,
    /// Band edges optimal_max,suboptimal_max,distractor_max in radians
    #[arg(long, default_value = "0.15,0.45,0.90")]
    angles: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long, default_value = "infonce")]
    loss: String,
    #[arg(long, default_value_t = 0.02)]
    tau: f64,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1)]
    epochs1: usize,
    #[arg(long, default_value_t = 2)]
    epochs2: usize,
    #[arg(long, default_value_t = 8)]
    negatives: usize,
    #[arg(long, default_value = "hard-band")]
    neg_strategy: String,
    #[arg(long, default_value_t = 0.0)]
    label_noise: f64,
    /// Global L2 gradient clip per instance
    #[arg(long, default_value_t = 0.5)]
    grad_clip: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    stage1_data: PathBuf,
    #[arg(long)]
    stage2_data: PathBuf,
    /// Optional holdout dataset for per-epoch metrics
    #[arg(long)]
    holdout: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    hidden_dim: usize,
    #[arg(long, default_value_t = 16)]
    embed_dim: usize,
    #[arg(long, default_value_t = 1)]
    hidden_layers: usize,
    #[arg(long)]
    out_checkpoint: PathBuf,
    #[arg(long)]
    log_csv: Option<PathBuf>,
}

#[derive(Args)]
struct ScoreArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, conflicts_with = "oracle")]
    checkpoint: Option<PathBuf>,
    /// Score by the true level ordinal instead of a checkpoint
    #[arg(long)]
    oracle: bool,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    scores: PathBuf,
    /// Rank cutoffs, comma separated; "all" for the full list
    #[arg(long, default_value = "8,16,all")]
    k: String,
    #[arg(long, default_value = "1,5")]
    recall_k: String,
    #[arg(long, default_value = "positive-group")]
    margin_predicate: String,
    /// Optional per-page CSV (page_id, ndcg_all)
    #[arg(long)]
    per_page_csv: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long, conflicts_with_all = ["oracle", "no_critic"])]
    checkpoint: Option<PathBuf>,
    #[arg(long, conflicts_with = "no_critic")]
    oracle: bool,
    /// Run without any critic (for policy-first and random modes)
    #[arg(long)]
    no_critic: bool,
    #[arg(long, default_value = "ranking")]
    mode: String,
    #[arg(long, default_value_t = 8)]
    n: usize,
    #[arg(long, default_value_t = 1.0)]
    policy_noise: f64,
    #[arg(long, default_value_t = 1.0)]
    softmax_temp: f64,
    #[arg(long, default_value_t = 0.95)]
    threshold: f64,
    #[arg(long, default_value_t = 8)]
    turns: usize,
    #[arg(long, default_value = "strict")]
    success_rule: String,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Optional per-page CSV of selections
    #[arg(long)]
    per_page_csv: Option<PathBuf>,
}

#[derive(Args)]
struct AblateBaseArgs {
    #[arg(long, default_value_t = 2000)]
    pages: usize,
    #[arg(long, default_value_t = 200)]
    holdout_pages: usize,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// CSV output path; stdout when omitted
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateNoiseArgs {
    #[command(flatten)]
    base: AblateBaseArgs,
    #[arg(long, default_value = "0,0.2")]
    rates: String,
}

#[derive(Args)]
struct AblateNegdensityArgs {
    #[command(flatten)]
    base: AblateBaseArgs,
    #[arg(long, default_value = "2,8,16")]
    k: String,
}

#[derive(Args)]
struct AblateDatascaleArgs {
    #[command(flatten)]
    base: AblateBaseArgs,
    #[arg(long, default_value = "0.25,1.0")]
    fractions: String,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 1000)]
    cases: usize,
    #[arg(long, default_value_t = 20)]
    pages: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct ReproArgs {
    #[arg(long)]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 7)]
    seed: u64,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code_for(&e))
        }
    }
}

fn exit_code_for(e: &anyhow::Error) -> u8 {
    if e.downcast_ref::<UsageError>().is_some() {
        return 2;
    }
    if let Some(d) = e.downcast_ref::<DomainError>() {
        return match d {
            DomainError::Io { .. } => 5,
            _ => 3,
        };
    }
    if e.downcast_ref::<NumericError>().is_some() {
        return 4;
    }
    if e.downcast_ref::<std::io::Error>().is_some() {
        return 5;
    }
    1
}

fn dispatch(command: Command) -> Result<(), anyhow::Error> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Score(a) => score(a),
        Command::Eval(a) => eval(a),
        Command::Simulate(a) => simulate(a),
        Command::AblateNoise(a) => {
            let mut cfg = ablate_config(&a.base);
            cfg.noise_rates = parse_f64_list(&a.rates, "--rates")?;
            emit_ablation(&cfg, AblationKind::Noise, &a.base.out)
        }
        Command::AblateNegdensity(a) => {
            let mut cfg = ablate_config(&a.base);
            cfg.k_values = a
                .k
                .split(',')
                .map(|v| {
                    v.trim()
                        .parse::<usize>()
                        .map_err(|_| UsageError(format!("invalid --k entry {v:?}")).into())
                })
                .collect::<Result<Vec<usize>, anyhow::Error>>()?;
            emit_ablation(&cfg, AblationKind::NegDensity, &a.base.out)
        }
        Command::AblateDatascale(a) => {
            let mut cfg = ablate_config(&a.base);
            cfg.data_fractions = parse_f64_list(&a.fractions, "--fractions")?;
            emit_ablation(&cfg, AblationKind::DataScale, &a.base.out)
        }
        Command::Gradcheck(a) => gradcheck(a),
        Command::Repro(a) => repro(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<(), anyhow::Error> {
    let stage: Stage = parse_flag(&a.stage, "--stage")?;
    let mix = parse_f64_list(&a.mix, "--mix")?;
    let angles = parse_f64_list(&a.angles, "--angles")?;
    if mix.len() != 4 {
        return Err(UsageError("--mix needs exactly 4 proportions".into()).into());
    }
    if angles.len() != 3 {
        return Err(UsageError("--angles needs exactly 3 band edges".into()).into());
    }
    let config = WorldConfig {
        latent_dim: a.latent_dim,
        feature_dim: a.feature_dim,
        optimal_max: angles[0],
        suboptimal_max: angles[1],
        distractor_max: angles[2],
        observation_noise: a.noise,
        level_mix: [mix[0], mix[1], mix[2], mix[3]],
        candidates_per_page: a.candidates,
        seed: a.seed,
    };
    let dataset = generate_dataset(&config, a.pages, stage)?;
    save_dataset(&dataset, &a.out)?;
    println!(
        "wrote {} pages ({} candidates) to {}",
        dataset.pages.len(),
        dataset.candidate_count(),
        a.out.display()
    );
    Ok(())
}

fn load_training_data(path: &Path) -> Result<Dataset, anyhow::Error> {
    let ds = load_dataset(path)?;
    for page in &ds.pages {
        page.validate_for_training()?;
    }
    Ok(ds)
}

fn train(a: TrainArgs) -> Result<(), anyhow::Error> {
    let loss_kind: LossKind = parse_flag(&a.loss, "--loss")?;
    let negative_strategy: NegativeStrategy = parse_flag(&a.neg_strategy, "--neg-strategy")?;
    let ds1 = load_training_data(&a.stage1_data)?;
    let ds2 = load_training_data(&a.stage2_data)?;
    let holdout = a.holdout.as_deref().map(load_dataset).transpose()?;
    let input_dim = ds1
        .pages
        .first()
        .map(|p| p.feature_dim())
        .ok_or_else(|| DomainError::Invariant {
            page_id: "-".into(),
            rule: "training dataset is empty".into(),
        })?;

    let cfg = TrainConfig {
        loss_kind,
        tau: Temperature::new(a.tau)?,
        learning_rate: a.lr,
        epochs_stage1: a.epochs1,
        epochs_stage2: a.epochs2,
        negatives_per_instance: a.negatives,
        negative_strategy,
        label_noise: a.label_noise,
        grad_clip: a.grad_clip,
        seed: a.seed,
        encoder: EncoderConfig {
            input_dim,
            hidden_dim: a.hidden_dim,
            embed_dim: a.embed_dim,
            hidden_layers: a.hidden_layers,
        },
        ..TrainConfig::default()
    };

    let noisy = |ds: &Dataset, stream: u64| -> Result<Dataset, anyhow::Error> {
        if a.label_noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(a.seed, stream));
            Ok(flip_labels(ds, a.label_noise, &mut rng)?)
        } else {
            Ok(ds.clone())
        }
    };
    let d1 = noisy(&ds1, 0x4e01)?;
    let d2 = noisy(&ds2, 0x4e02)?;

    let mut state = TrainState::new(cfg)?;
    let log = two_stage(&mut state, &d1, &d2, holdout.as_ref())?;
    state.params.save(&a.out_checkpoint)?;

    if let Some(path) = &a.log_csv {
        let mut csv = String::from("stage,epoch,mean_loss,instances,holdout_margin,holdout_ndcg_all\n");
        for r in &log.epochs {
            csv.push_str(&format!(
                "{},{},{:.6},{},{},{}\n",
                r.stage,
                r.epoch,
                r.mean_loss,
                r.instances,
                r.holdout_margin.map_or(String::new(), |v| format!("{v:.6}")),
                r.holdout_ndcg_all.map_or(String::new(), |v| format!("{v:.6}")),
            ));
        }
        std::fs::write(path, csv).map_err(|e| DomainError::io(path, e))?;
    }

    let doc = serde_json::json!({
        "manifest": manifest("train"),
        "checkpoint": a.out_checkpoint.display().to_string(),
        "log": log,
    });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

fn score(a: ScoreArgs) -> Result<(), anyhow::Error> {
    let dataset = load_dataset(&a.data)?;
    let map: ScoreMap = if a.oracle {
        oracle_scores(&dataset)
    } else {
        let path = a.checkpoint.as_deref().ok_or_else(|| {
            UsageError("either --checkpoint or --oracle is required".into())
        })?;
        let params = EncoderParams::load(path)?;
        let mut map = ScoreMap::new();
        for page in &dataset.pages {
            map.insert(page.page_id.clone(), params.score_page(page)?);
        }
        map
    };
    let mut records = Vec::with_capacity(dataset.candidate_count());
    for page in &dataset.pages {
        for c in &page.candidates {
            records.push(ScoreRecord {
                page_id: page.page_id.clone(),
                action_id: c.action_id.clone(),
                score: map[&page.page_id][&c.action_id],
            });
        }
    }
    save_scores(&records, &a.out)?;
    println!("wrote {} score records to {}", records.len(), a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), anyhow::Error> {
    let dataset = load_dataset(&a.data)?;
    let records = load_scores(&a.scores)?;
    let scores = score_map(&dataset, &records)?;

    let k_list = a
        .k
        .split(',')
        .map(|v| parse_flag::<KSpec>(v.trim(), "--k"))
        .collect::<Result<Vec<_>, _>>()?;
    let recall_k_list = a
        .recall_k
        .split(',')
        .map(|v| {
            v.trim()
                .parse::<usize>()
                .map_err(|_| UsageError(format!("invalid --recall-k entry {v:?}")).into())
        })
        .collect::<Result<Vec<usize>, anyhow::Error>>()?;
    let margin_predicate: MarginPredicate = parse_flag(&a.margin_predicate, "--margin-predicate")?;

    let config = EvalConfig {
        k_list,
        recall_k_list,
        margin_predicate,
    };
    let report = aggregate_report(&dataset, &scores, &config)?;

    if let Some(path) = &a.per_page_csv {
        let mut csv = String::from("page_id,ndcg_all\n");
        for page in &dataset.pages {
            let v = ndcg_at_k(page, &scores[&page.page_id], KSpec::All)?;
            csv.push_str(&format!(
                "{},{}\n",
                page.page_id,
                v.map_or(String::new(), |v| format!("{v:.6}"))
            ));
        }
        std::fs::write(path, csv).map_err(|e| DomainError::io(path, e))?;
    }

    let doc = serde_json::json!({
        "manifest": manifest("eval"),
        "report": report,
    });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

fn simulate(a: SimulateArgs) -> Result<(), anyhow::Error> {
    let dataset = load_dataset(&a.data)?;
    let selection: SelectionMode = parse_flag(&a.mode, "--mode")?;
    let success_rule: SuccessRule = parse_flag(&a.success_rule, "--success-rule")?;
    let config = SimConfig {
        n_rollouts: a.n,
        selection,
        policy_noise: a.policy_noise,
        softmax_temp: a.softmax_temp,
        rejection_threshold: a.threshold,
        max_rejection_turns: a.turns,
        success_rule,
        seed: a.seed,
    };

    let params = a.checkpoint.as_deref().map(EncoderParams::load).transpose()?;
    let critic = match (&params, a.oracle, a.no_critic) {
        (Some(p), false, false) => Critic::Trained(p),
        (None, true, false) => Critic::Oracle,
        (None, false, true) => Critic::None,
        _ => {
            return Err(UsageError(
                "exactly one of --checkpoint, --oracle, --no-critic is required".into(),
            )
            .into())
        }
    };
    let run = run_simulation(&dataset, critic, &config)?;

    if let Some(path) = &a.per_page_csv {
        let mut csv = String::from("page_id,selected_action,selected_level,success,fallback\n");
        for p in &run.per_page {
            csv.push_str(&format!(
                "{},{},{},{},{}\n",
                p.page_id, p.selected_action, p.selected_level, p.success, p.fallback
            ));
        }
        std::fs::write(path, csv).map_err(|e| DomainError::io(path, e))?;
    }

    let doc = serde_json::json!({
        "manifest": manifest("simulate"),
        "report": run.report,
    });
    println!("{}", serde_json::to_string_pretty(&doc)?);
    Ok(())
}

fn ablate_config(base: &AblateBaseArgs) -> ExperimentConfig {
    ExperimentConfig {
        train_pages: base.pages,
        holdout_pages: base.holdout_pages,
        seed: base.seed,
        ..ExperimentConfig::default()
    }
}

fn emit_ablation(
    cfg: &ExperimentConfig,
    kind: AblationKind,
    out: &Option<PathBuf>,
) -> Result<(), anyhow::Error> {
    let csv = pipeline::run_ablation(cfg, kind)?;
    match out {
        Some(path) => {
            std::fs::write(path, &csv).map_err(|e| DomainError::io(path, e))?;
            println!("wrote ablation table to {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn gradcheck(a: GradcheckArgs) -> Result<(), anyhow::Error> {
    use critic_lab::checks;
    let mut cases = checks::infonce_gradient_checks(a.cases, derive_seed(a.seed, 1));
    cases.extend(checks::bce_gradient_checks(a.cases, derive_seed(a.seed, 2)));
    cases.push(checks::listwise_equivalence_check(a.cases, derive_seed(a.seed, 3)));
    cases.push(checks::metric_bruteforce_check(derive_seed(a.seed, 5)));
    cases.extend(checks::end_to_end_fd_checks(a.pages, derive_seed(a.seed, 4)));

    let mut failed = 0usize;
    for c in &cases {
        println!(
            "{} {} worst {:.3e} (tol {:.0e}, {} cases)",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.worst,
            c.tolerance,
            c.cases
        );
        if !c.passed {
            failed += 1;
        }
    }
    if failed > 0 {
        return Err(NumericError::InvalidConfig(format!("{failed} check(s) failed")).into());
    }
    Ok(())
}

fn repro(a: ReproArgs) -> Result<(), anyhow::Error> {
    let cfg = ExperimentConfig {
        seed: a.seed,
        ..ExperimentConfig::default()
    };
    let outcome = pipeline::repro(&cfg, &a.out_dir)?;
    for c in &outcome.criteria {
        println!("{}", c.line());
    }
    println!("reports written to {}", a.out_dir.display());
    Ok(())
}
