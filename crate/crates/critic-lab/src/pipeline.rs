//! Pinned end-to-end experiment: dataset generation, training runs under
//! every configuration the ablation grids need, holdout evaluation, selection
//! simulation, the verification suites, and the criteria scoreboard. All
//! serialized artifacts are byte-stable across identical runs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::checks::{self, CheckCase};
use crate::domain::{Dataset, ScoreMap};
use crate::encoder::EncoderParams;
use crate::error::DomainError;
use crate::losses::LossKind;
use crate::metrics::{aggregate_report, EvalConfig, EvalReport};
use crate::sim::{run_simulation, Critic, SelectionMode, SimConfig, SimReport};
use crate::synthworld::{derive_seed, flip_labels, generate_dataset, Stage, WorldConfig};
use crate::trainer::{two_stage, TrainConfig, TrainLog, TrainState};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub world: WorldConfig,
    pub train_pages: usize,
    pub holdout_pages: usize,
    pub train: TrainConfig,
    pub sim: SimConfig,
    pub noise_rates: Vec<f64>,
    pub k_values: Vec<usize>,
    pub data_fractions: Vec<f64>,
    pub check_cases: usize,
    pub check_pages: usize,
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            world: WorldConfig::default(),
            train_pages: 2000,
            holdout_pages: 200,
            train: TrainConfig::default(),
            sim: SimConfig::default(),
            noise_rates: vec![0.0, 0.2],
            k_values: vec![2, 16],
            data_fractions: vec![0.25, 1.0],
            check_cases: 1000,
            check_pages: 20,
            seed: 7,
        }
    }
}

/// One training configuration within the experiment grid.
#[derive(Debug, Clone)]
struct RunSpec {
    label: String,
    loss: LossKind,
    label_noise: f64,
    negatives: usize,
    epochs: (usize, usize),
    data_fraction: f64,
}

impl RunSpec {
    fn base(label: &str, loss: LossKind, cfg: &ExperimentConfig) -> RunSpec {
        RunSpec {
            label: label.to_string(),
            loss,
            label_noise: 0.0,
            negatives: cfg.train.negatives_per_instance,
            epochs: (cfg.train.epochs_stage1, cfg.train.epochs_stage2),
            data_fraction: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunOutcome {
    pub label: String,
    pub loss: LossKind,
    pub label_noise: f64,
    pub negatives: usize,
    pub epochs: (usize, usize),
    pub data_fraction: f64,
    pub eval: EvalReport,
    /// Mean holdout cosine score per level name.
    pub level_means: BTreeMap<String, f64>,
    /// Strict success rate of argmax selection with this run's critic.
    pub ranking_success_rate: f64,
    pub log: TrainLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriterionResult {
    pub id: usize,
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CriterionResult {
    pub fn line(&self) -> String {
        format!(
            "criterion {:02} {} {}: {}",
            self.id,
            if self.passed { "PASS" } else { "FAIL" },
            self.name,
            self.detail
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReproOutcome {
    pub version: String,
    pub config: ExperimentConfig,
    pub runs: BTreeMap<String, RunOutcome>,
    pub sims: BTreeMap<String, SimReport>,
    pub checks: Vec<CheckCase>,
    pub criteria: Vec<CriterionResult>,
    /// Baseline critics, reusable via `score --checkpoint` / `simulate`.
    pub checkpoints: BTreeMap<String, EncoderParams>,
}

fn subset(ds: &Dataset, fraction: f64) -> Dataset {
    if fraction >= 1.0 {
        return ds.clone();
    }
    let n = ((ds.pages.len() as f64 * fraction).ceil() as usize).max(1);
    Dataset::new(ds.pages[..n].to_vec(), ds.meta.clone())
}

fn level_means(holdout: &Dataset, scores: &ScoreMap) -> BTreeMap<String, f64> {
    let mut sums: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for page in &holdout.pages {
        let ps = &scores[&page.page_id];
        for c in &page.candidates {
            let e = sums.entry(c.level.name()).or_insert((0.0, 0));
            e.0 += ps[&c.action_id];
            e.1 += 1;
        }
    }
    sums.into_iter()
        .map(|(k, (s, n))| (k.to_string(), s / n as f64))
        .collect()
}

struct PinnedData {
    ds1: Dataset,
    ds2: Dataset,
    holdout: Dataset,
}

fn generate_data(cfg: &ExperimentConfig) -> Result<PinnedData, anyhow::Error> {
    let world = |stream: u64| WorldConfig {
        seed: derive_seed(cfg.seed, stream),
        ..cfg.world
    };
    Ok(PinnedData {
        ds1: generate_dataset(&world(1), cfg.train_pages, Stage::One)?,
        ds2: generate_dataset(&world(2), cfg.train_pages, Stage::Two)?,
        holdout: generate_dataset(&world(3), cfg.holdout_pages, Stage::One)?,
    })
}

fn execute_run(
    cfg: &ExperimentConfig,
    data: &PinnedData,
    spec: &RunSpec,
) -> Result<(RunOutcome, crate::encoder::EncoderParams), anyhow::Error> {
    let train = TrainConfig {
        loss_kind: spec.loss,
        label_noise: spec.label_noise,
        negatives_per_instance: spec.negatives,
        epochs_stage1: spec.epochs.0,
        epochs_stage2: spec.epochs.1,
        seed: derive_seed(cfg.seed, 4),
        ..cfg.train
    };
    let prep = |ds: &Dataset, stream: u64| -> Result<Dataset, anyhow::Error> {
        let ds = subset(ds, spec.data_fraction);
        if spec.label_noise > 0.0 {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, stream));
            Ok(flip_labels(&ds, spec.label_noise, &mut rng)?)
        } else {
            Ok(ds)
        }
    };
    let d1 = prep(&data.ds1, 6)?;
    let d2 = prep(&data.ds2, 7)?;

    let mut state = TrainState::new(train)?;
    let log = two_stage(&mut state, &d1, &d2, Some(&data.holdout))?;

    let mut scores = ScoreMap::new();
    for page in &data.holdout.pages {
        scores.insert(page.page_id.clone(), state.params.score_page(page)?);
    }
    let eval = aggregate_report(&data.holdout, &scores, &EvalConfig::default())?;
    let means = level_means(&data.holdout, &scores);
    let sim = run_simulation(
        &data.holdout,
        Critic::Trained(&state.params),
        &SimConfig {
            selection: SelectionMode::Ranking,
            seed: derive_seed(cfg.seed, 5),
            ..cfg.sim
        },
    )?;

    Ok((
        RunOutcome {
            label: spec.label.clone(),
            loss: spec.loss,
            label_noise: spec.label_noise,
            negatives: spec.negatives,
            epochs: spec.epochs,
            data_fraction: spec.data_fraction,
            eval,
            level_means: means,
            ranking_success_rate: sim.report.success_rate,
            log,
        },
        state.params,
    ))
}

fn grid(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let mut specs = vec![
        RunSpec::base("infonce", LossKind::InfoNce, cfg),
        RunSpec::base("bce", LossKind::Bce, cfg),
    ];
    for &rate in &cfg.noise_rates {
        if rate == 0.0 {
            continue; // the baselines cover the clean setting
        }
        for loss in [LossKind::InfoNce, LossKind::Bce] {
            specs.push(RunSpec {
                label: format!("{loss}-noise{rate}"),
                label_noise: rate,
                ..RunSpec::base("", loss, cfg)
            });
        }
    }
    for &k in &cfg.k_values {
        for loss in [LossKind::InfoNce, LossKind::Bce] {
            specs.push(RunSpec {
                label: format!("{loss}-k{k}"),
                negatives: k,
                ..RunSpec::base("", loss, cfg)
            });
        }
    }
    for &fraction in &cfg.data_fractions {
        if fraction >= 1.0 {
            continue;
        }
        for loss in [LossKind::InfoNce, LossKind::Bce] {
            specs.push(RunSpec {
                label: format!("{loss}-data{fraction}"),
                data_fraction: fraction,
                ..RunSpec::base("", loss, cfg)
            });
        }
    }
    specs.push(RunSpec {
        label: "infonce-stage1-only".into(),
        epochs: (cfg.train.epochs_stage1, 0),
        ..RunSpec::base("", LossKind::InfoNce, cfg)
    });
    specs.push(RunSpec {
        label: "infonce-stage2-only".into(),
        epochs: (0, cfg.train.epochs_stage2),
        ..RunSpec::base("", LossKind::InfoNce, cfg)
    });
    specs
}

pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ReproOutcome, anyhow::Error> {
    let data = generate_data(cfg)?;

    let mut runs = BTreeMap::new();
    let mut infonce_params = None;
    let mut bce_params = None;
    for spec in grid(cfg) {
        let (outcome, params) = execute_run(cfg, &data, &spec)?;
        match spec.label.as_str() {
            "infonce" => infonce_params = Some(params),
            "bce" => bce_params = Some(params),
            _ => {}
        }
        runs.insert(spec.label.clone(), outcome);
    }
    let infonce_params = infonce_params.expect("baseline run present");
    let bce_params = bce_params.expect("baseline run present");

    let sim_seeded = |selection: SelectionMode| SimConfig {
        selection,
        seed: derive_seed(cfg.seed, 5),
        ..cfg.sim
    };
    let mut sims = BTreeMap::new();
    sims.insert(
        "policy-first".to_string(),
        run_simulation(&data.holdout, Critic::None, &sim_seeded(SelectionMode::PolicyFirst))?.report,
    );
    sims.insert(
        "random".to_string(),
        run_simulation(&data.holdout, Critic::None, &sim_seeded(SelectionMode::Random))?.report,
    );
    sims.insert(
        "oracle-ranking".to_string(),
        run_simulation(&data.holdout, Critic::Oracle, &sim_seeded(SelectionMode::Ranking))?.report,
    );
    sims.insert(
        "infonce-ranking".to_string(),
        run_simulation(
            &data.holdout,
            Critic::Trained(&infonce_params),
            &sim_seeded(SelectionMode::Ranking),
        )?
        .report,
    );
    sims.insert(
        "bce-ranking".to_string(),
        run_simulation(
            &data.holdout,
            Critic::Trained(&bce_params),
            &sim_seeded(SelectionMode::Ranking),
        )?
        .report,
    );
    sims.insert(
        "bce-rejection".to_string(),
        run_simulation(
            &data.holdout,
            Critic::Trained(&bce_params),
            &sim_seeded(SelectionMode::Rejection),
        )?
        .report,
    );

    let mut checks = checks::infonce_gradient_checks(cfg.check_cases, derive_seed(cfg.seed, 11));
    checks.extend(checks::bce_gradient_checks(cfg.check_cases, derive_seed(cfg.seed, 12)));
    checks.push(checks::listwise_equivalence_check(cfg.check_cases, derive_seed(cfg.seed, 13)));
    checks.push(checks::metric_bruteforce_check(derive_seed(cfg.seed, 14)));
    checks.extend(checks::end_to_end_fd_checks(cfg.check_pages, derive_seed(cfg.seed, 15)));

    let mut checkpoints = BTreeMap::new();
    checkpoints.insert("infonce".to_string(), infonce_params);
    checkpoints.insert("bce".to_string(), bce_params);

    let mut outcome = ReproOutcome {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: cfg.clone(),
        runs,
        sims,
        checks,
        criteria: Vec::new(),
        checkpoints,
    };
    outcome.criteria = evaluate_criteria(&outcome);
    Ok(outcome)
}

fn checks_pass(checks: &[CheckCase], prefix: &str) -> (bool, String) {
    let group: Vec<&CheckCase> = checks.iter().filter(|c| c.name.starts_with(prefix)).collect();
    let passed = !group.is_empty() && group.iter().all(|c| c.passed);
    let detail = group
        .iter()
        .map(|c| format!("{} worst {:.3e} (tol {:.0e})", c.name, c.worst, c.tolerance))
        .collect::<Vec<_>>()
        .join("; ");
    (passed, detail)
}

pub fn evaluate_criteria(o: &ReproOutcome) -> Vec<CriterionResult> {
    let mut out = Vec::new();
    let mut push = |id: usize, name: &str, passed: bool, detail: String| {
        out.push(CriterionResult {
            id,
            name: name.to_string(),
            passed,
            detail,
        });
    };

    let (p1, d1) = checks_pass(&o.checks, "infonce-");
    push(1, "contrastive gradient identity", p1, d1);
    let (p2, d2) = checks_pass(&o.checks, "bce-");
    push(2, "binary gradient locality", p2, d2);
    let (p3, d3) = checks_pass(&o.checks, "listwise-");
    push(3, "listwise equals contrastive", p3, d3);
    let (p4, d4) = checks_pass(&o.checks, "metric-bruteforce");
    push(4, "metric brute-force equivalence", p4, d4);
    let (p5, d5) = checks_pass(&o.checks, "end-to-end-fd-");
    push(5, "end-to-end gradient check", p5, d5);

    let inf = &o.runs["infonce"];
    let bce = &o.runs["bce"];
    {
        let m = &inf.level_means;
        let mono = m["optimal"] > m["suboptimal"]
            && m["suboptimal"] > m["distractor"]
            && m["distractor"] > m["unrelated"];
        let inf_ppa = inf.eval.ppa.get("sub-dis").copied().unwrap_or(f64::NAN);
        let bce_ppa = bce.eval.ppa.get("sub-dis").copied().unwrap_or(f64::NAN);
        let inf_ndcg = inf.eval.ndcg_at.get("all").copied().unwrap_or(f64::NAN);
        let bce_ndcg = bce.eval.ndcg_at.get("all").copied().unwrap_or(f64::NAN);
        let passed = mono && inf_ppa >= 0.65 && bce_ppa <= inf_ppa - 0.05 && bce_ndcg <= inf_ndcg - 0.03;
        push(
            6,
            "hierarchy recovery",
            passed,
            format!(
                "means opt {:.4} > sub {:.4} > dis {:.4} > unr {:.4} ({}); ppa_sub-dis infonce {:.4} vs bce {:.4}; ndcg@all infonce {:.4} vs bce {:.4}",
                m["optimal"], m["suboptimal"], m["distractor"], m["unrelated"],
                if mono { "monotone" } else { "NOT monotone" },
                inf_ppa, bce_ppa, inf_ndcg, bce_ndcg
            ),
        );
    }
    {
        let rate = o.config.noise_rates.iter().copied().find(|r| *r > 0.0).unwrap_or(0.2);
        let margin = |label: &str| o.runs[label].eval.margin.unwrap_or(f64::NAN);
        let inf_ret = margin(&format!("infonce-noise{rate}")) / margin("infonce");
        let bce_ret = margin(&format!("bce-noise{rate}")) / margin("bce");
        push(
            7,
            "label-noise margin retention",
            inf_ret > bce_ret,
            format!("at flip rate {rate}: infonce retains {inf_ret:.4}, bce retains {bce_ret:.4}"),
        );
    }
    {
        let (lo, hi) = (o.config.k_values[0], o.config.k_values[o.config.k_values.len() - 1]);
        let margin = |label: String| o.runs[&label].eval.margin.unwrap_or(f64::NAN);
        let inf_lo = margin(format!("infonce-k{lo}"));
        let inf_hi = margin(format!("infonce-k{hi}"));
        let bce_lo = margin(format!("bce-k{lo}"));
        let bce_hi = margin(format!("bce-k{hi}"));
        let passed = inf_hi >= inf_lo - 0.02 && bce_hi < bce_lo;
        push(
            8,
            "negative-density margins",
            passed,
            format!(
                "infonce margin k{lo} {inf_lo:.4} -> k{hi} {inf_hi:.4}; bce margin k{lo} {bce_lo:.4} -> k{hi} {bce_hi:.4}"
            ),
        );
    }
    {
        let inf_sr = o.sims["infonce-ranking"].success_rate;
        let pf_sr = o.sims["policy-first"].success_rate;
        let rej = &o.sims["bce-rejection"];
        let passed = inf_sr >= pf_sr + 0.10 && rej.success_rate < inf_sr && rej.fallback_count > 0;
        push(
            9,
            "selection gain over policy",
            passed,
            format!(
                "ranking SR {:.4} vs policy-first {:.4}; bce rejection SR {:.4} with {} fallbacks",
                inf_sr, pf_sr, rej.success_rate, rej.fallback_count
            ),
        );
    }
    {
        let full_margin = inf.eval.margin.unwrap_or(f64::NAN);
        let s2_margin = o.runs["infonce-stage2-only"].eval.margin.unwrap_or(f64::NAN);
        let full_ppa = inf.eval.ppa.get("sub-dis").copied().unwrap_or(f64::NAN);
        let s1_ppa = o.runs["infonce-stage1-only"]
            .eval
            .ppa
            .get("sub-dis")
            .copied()
            .unwrap_or(f64::NAN);
        let passed = full_margin > s2_margin && full_ppa > s1_ppa;
        push(
            10,
            "curriculum ablation",
            passed,
            format!(
                "margin full {full_margin:.4} vs stage2-only {s2_margin:.4}; ppa_sub-dis full {full_ppa:.4} vs stage1-only {s1_ppa:.4}"
            ),
        );
    }
    out
}

fn csv_row(run: &RunOutcome, setting: &str) -> String {
    format!(
        "{},{},{:.6},{:.6},{:.6},{:.6}\n",
        run.loss,
        setting,
        run.eval.margin.unwrap_or(f64::NAN),
        run.eval.ndcg_at.get("all").copied().unwrap_or(f64::NAN),
        run.eval.ppa.get("sub-dis").copied().unwrap_or(f64::NAN),
        run.ranking_success_rate,
    )
}

const CSV_HEADER: &str = "loss,setting,margin,ndcg_all,ppa_sub_dis,success_rate\n";

fn write_text(path: &Path, text: &str) -> Result<(), DomainError> {
    std::fs::write(path, text).map_err(|e| DomainError::io(path, e))
}

/// Writes the deterministic report set: the full outcome document, the
/// one-line-per-criterion scoreboard, and the three ablation tables.
pub fn write_reports(outcome: &ReproOutcome, out_dir: &Path) -> Result<(), DomainError> {
    std::fs::create_dir_all(out_dir).map_err(|e| DomainError::io(out_dir, e))?;

    let mut report = serde_json::to_string_pretty(outcome).expect("report serialization");
    report.push('\n');
    write_text(&out_dir.join("report.json"), &report)?;

    for (label, params) in &outcome.checkpoints {
        params.save(&out_dir.join(format!("{label}.model.json")))?;
    }

    let mut lines = String::new();
    for c in &outcome.criteria {
        lines.push_str(&c.line());
        lines.push('\n');
    }
    write_text(&out_dir.join("criteria.txt"), &lines)?;

    let cfg = &outcome.config;
    let mut noise = CSV_HEADER.to_string();
    for loss in ["infonce", "bce"] {
        for &rate in &cfg.noise_rates {
            let label = if rate == 0.0 {
                loss.to_string()
            } else {
                format!("{loss}-noise{rate}")
            };
            noise.push_str(&csv_row(&outcome.runs[&label], &format!("{rate}")));
        }
    }
    write_text(&out_dir.join("ablate_noise.csv"), &noise)?;

    let mut dens = CSV_HEADER.to_string();
    for loss in ["infonce", "bce"] {
        let mut ks = cfg.k_values.clone();
        ks.push(cfg.train.negatives_per_instance);
        ks.sort_unstable();
        ks.dedup();
        for k in ks {
            let label = if k == cfg.train.negatives_per_instance {
                loss.to_string()
            } else {
                format!("{loss}-k{k}")
            };
            dens.push_str(&csv_row(&outcome.runs[&label], &format!("{k}")));
        }
    }
    write_text(&out_dir.join("ablate_negdensity.csv"), &dens)?;

    let mut scale = CSV_HEADER.to_string();
    for loss in ["infonce", "bce"] {
        for &fraction in &cfg.data_fractions {
            let label = if fraction >= 1.0 {
                loss.to_string()
            } else {
                format!("{loss}-data{fraction}")
            };
            scale.push_str(&csv_row(&outcome.runs[&label], &format!("{fraction}")));
        }
    }
    write_text(&out_dir.join("ablate_datascale.csv"), &scale)?;

    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationKind {
    Noise,
    NegDensity,
    DataScale,
}

/// Runs one ablation grid (both losses, shared base seed) and returns the
/// CSV table.
pub fn run_ablation(cfg: &ExperimentConfig, kind: AblationKind) -> Result<String, anyhow::Error> {
    let data = generate_data(cfg)?;
    let mut csv = CSV_HEADER.to_string();
    for loss in [LossKind::InfoNce, LossKind::Bce] {
        let specs: Vec<(String, RunSpec)> = match kind {
            AblationKind::Noise => cfg
                .noise_rates
                .iter()
                .map(|&rate| {
                    (
                        format!("{rate}"),
                        RunSpec {
                            label: format!("{loss}-noise{rate}"),
                            label_noise: rate,
                            ..RunSpec::base("", loss, cfg)
                        },
                    )
                })
                .collect(),
            AblationKind::NegDensity => cfg
                .k_values
                .iter()
                .map(|&k| {
                    (
                        format!("{k}"),
                        RunSpec {
                            label: format!("{loss}-k{k}"),
                            negatives: k,
                            ..RunSpec::base("", loss, cfg)
                        },
                    )
                })
                .collect(),
            AblationKind::DataScale => cfg
                .data_fractions
                .iter()
                .map(|&fraction| {
                    (
                        format!("{fraction}"),
                        RunSpec {
                            label: format!("{loss}-data{fraction}"),
                            data_fraction: fraction,
                            ..RunSpec::base("", loss, cfg)
                        },
                    )
                })
                .collect(),
        };
        for (setting, spec) in specs {
            let (outcome, _) = execute_run(cfg, &data, &spec)?;
            csv.push_str(&csv_row(&outcome, &setting));
        }
    }
    Ok(csv)
}

/// One-command reproduction: runs the pinned experiment and writes every
/// report into `out_dir`.
pub fn repro(cfg: &ExperimentConfig, out_dir: &Path) -> Result<ReproOutcome, anyhow::Error> {
    let outcome = run_experiment(cfg)?;
    write_reports(&outcome, out_dir)?;
    Ok(outcome)
}
