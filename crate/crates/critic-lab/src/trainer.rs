//! Two-stage curriculum training loop: per-instance negative sampling,
//! grouped loss over the instance's scores, analytic backprop through the
//! shared encoder, and adaptive-moment updates. Serial and bitwise
//! deterministic given (seed, config, data).

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{Dataset, FunctionalLevel, Page, ScoreMap};
use crate::encoder::{dot, init_params, EncoderConfig, EncoderParams, ParamGrads};
use crate::error::NumericError;
use crate::losses::{group_instance_loss, LossKind, Temperature};
use crate::metrics::{decision_margin, ndcg_at_k, KSpec, MarginPredicate};
use crate::synthworld::{derive_seed, Stage};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NegativeStrategy {
    Uniform,
    /// Draws weighted toward boundary-adjacent levels
    /// (distractor : suboptimal-band : unrelated = 4 : 2 : 1).
    HardBand,
}

impl std::str::FromStr for NegativeStrategy {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "uniform" => Ok(NegativeStrategy::Uniform),
            "hard-band" | "hard_band" => Ok(NegativeStrategy::HardBand),
            other => Err(format!("unknown negative strategy {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss_kind: LossKind,
    pub tau: Temperature,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub negatives_per_instance: usize,
    pub negative_strategy: NegativeStrategy,
    /// Label flip rate; applied to the training data by the pipeline before
    /// training starts, echoed here for provenance.
    pub label_noise: f64,
    /// Global L2 clip on each instance's gradient; infinity disables. Caps
    /// the sharp-temperature contrastive spikes that otherwise let single
    /// mislabeled pages dominate the adaptive optimizer state.
    pub grad_clip: f64,
    pub hinge_margin: f64,
    pub seed: u64,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss_kind: LossKind::InfoNce,
            tau: Temperature::DEFAULT,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            epochs_stage1: 1,
            epochs_stage2: 2,
            negatives_per_instance: 8,
            negative_strategy: NegativeStrategy::HardBand,
            label_noise: 0.0,
            grad_clip: 0.5,
            hinge_margin: 1.0,
            seed: 0,
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), NumericError> {
        let bad = |m: &str| Err(NumericError::InvalidConfig(m.to_string()));
        if !(self.learning_rate > 0.0) {
            return bad("learning_rate must be > 0");
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("decay rates must lie in [0, 1)");
        }
        if !(self.epsilon > 0.0) {
            return bad("epsilon must be > 0");
        }
        if self.negatives_per_instance == 0 {
            return bad("negatives_per_instance must be >= 1");
        }
        if !(0.0..=1.0).contains(&self.label_noise) {
            return bad("label_noise must lie in [0, 1]");
        }
        if !(self.grad_clip > 0.0) {
            return bad("grad_clip must be > 0");
        }
        self.encoder.validate()
    }
}

/// Adam first/second moment state, parameter-shaped.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: ParamGrads,
    v: ParamGrads,
    t: u64,
}

impl AdamState {
    pub fn new(params: &EncoderParams) -> AdamState {
        AdamState {
            m: ParamGrads::zeros_like(params),
            v: ParamGrads::zeros_like(params),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut EncoderParams, grads: &ParamGrads, cfg: &TrainConfig) {
        self.t += 1;
        let bc1 = 1.0 - cfg.beta1.powi(self.t as i32);
        let bc2 = 1.0 - cfg.beta2.powi(self.t as i32);
        for (li, layer) in params.layers.iter_mut().enumerate() {
            let (gw, gb) = (&grads.layers[li].0, &grads.layers[li].1);
            let (mw, mb) = {
                let m = &mut self.m.layers[li];
                (&mut m.0, &mut m.1)
            };
            let (vw, vb) = {
                let v = &mut self.v.layers[li];
                (&mut v.0, &mut v.1)
            };
            let update = |p: &mut f64, g: f64, m: &mut f64, v: &mut f64| {
                *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
                *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
                let m_hat = *m / bc1;
                let v_hat = *v / bc2;
                *p -= cfg.learning_rate * m_hat / (v_hat.sqrt() + cfg.epsilon);
            };
            for i in 0..layer.w.len() {
                update(&mut layer.w[i], gw[i], &mut mw[i], &mut vw[i]);
            }
            for i in 0..layer.b.len() {
                update(&mut layer.b[i], gb[i], &mut mb[i], &mut vb[i]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub mean_loss: f64,
    pub instances: usize,
    pub holdout_margin: Option<f64>,
    pub holdout_ndcg_all: Option<f64>,
    /// Console-only timing; excluded from serialized reports so identical
    /// runs stay byte-identical.
    #[serde(skip)]
    pub wall_secs: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

/// Mutable training state: encoder parameters, optimizer moments, and the
/// seeded shuffling/sampling stream.
pub struct TrainState {
    pub params: EncoderParams,
    pub adam: AdamState,
    pub cfg: TrainConfig,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(cfg: TrainConfig) -> Result<TrainState, NumericError> {
        cfg.validate()?;
        let params = init_params(cfg.encoder, derive_seed(cfg.seed, 0x1717))?;
        Ok(TrainState {
            adam: AdamState::new(&params),
            rng: ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 0x7272)),
            params,
            cfg,
        })
    }
}

/// Indices of sampled negatives (train_label == false). Uniform draws K
/// distinct candidates; hard-band draws without replacement with weights
/// 4:2:1 for distractor : suboptimal-band : unrelated. When the pool has at
/// most K entries the entire pool is returned.
pub fn sample_negatives(
    page: &Page,
    k: usize,
    strategy: NegativeStrategy,
    rng: &mut impl Rng,
) -> Result<Vec<usize>, NumericError> {
    let pool: Vec<usize> = page
        .candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| !c.train_label)
        .map(|(i, _)| i)
        .collect();
    if pool.is_empty() {
        return Err(NumericError::InvalidConfig(format!(
            "page {:?} has no negative candidates",
            page.page_id
        )));
    }
    if pool.len() <= k {
        return Ok(pool);
    }
    let weight = |idx: usize| -> f64 {
        match strategy {
            NegativeStrategy::Uniform => 1.0,
            NegativeStrategy::HardBand => match page.candidates[idx].level {
                FunctionalLevel::SemanticDistractor => 4.0,
                // non-GT candidates in the task-advancing bands
                FunctionalLevel::Suboptimal | FunctionalLevel::Optimal => 2.0,
                FunctionalLevel::UnrelatedError => 1.0,
            },
        }
    };
    // weighted sampling without replacement via exponential race keys
    let mut keyed: Vec<(f64, usize)> = pool
        .into_iter()
        .map(|idx| {
            let u: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
            ((-u.ln()) / weight(idx), idx)
        })
        .collect();
    keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut chosen: Vec<usize> = keyed.into_iter().take(k).map(|(_, i)| i).collect();
    chosen.sort_unstable();
    Ok(chosen)
}

/// Loss and parameter gradient for one (page, positive, negatives) instance.
pub fn train_instance(
    params: &EncoderParams,
    page: &Page,
    positives: &[usize],
    negatives: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, ParamGrads), NumericError> {
    let (intent, intent_trace) = params.encode(&page.instruction_features)?;
    let encode_all = |indices: &[usize]| -> Result<_, NumericError> {
        let mut embs = Vec::with_capacity(indices.len());
        let mut traces = Vec::with_capacity(indices.len());
        for &idx in indices {
            let (e, t) = params.encode(&page.candidates[idx].features)?;
            embs.push(e);
            traces.push(t);
        }
        Ok((embs, traces))
    };
    let (pos_embs, pos_traces) = encode_all(positives)?;
    let (neg_embs, neg_traces) = encode_all(negatives)?;

    let s_pos: Vec<f64> = pos_embs.iter().map(|e| dot(&intent, e)).collect();
    let s_negs: Vec<f64> = neg_embs.iter().map(|e| dot(&intent, e)).collect();
    let result = group_instance_loss(cfg.loss_kind, &s_pos, &s_negs, cfg.tau, cfg.hinge_margin)?;

    let mut grads = ParamGrads::zeros_like(params);
    let embed_dim = params.config.embed_dim;

    // dL/d(intent embedding) couples every candidate
    let mut d_intent = vec![0.0; embed_dim];
    let coupled = result
        .grad_pos
        .iter()
        .zip(&pos_embs)
        .chain(result.grad_negs.iter().zip(&neg_embs));
    for (g, emb) in coupled {
        for (d, e) in d_intent.iter_mut().zip(emb) {
            *d += g * e;
        }
    }
    params.backward(&intent_trace, &d_intent, &mut grads)?;

    let traces = result
        .grad_pos
        .iter()
        .zip(&pos_traces)
        .chain(result.grad_negs.iter().zip(&neg_traces));
    for (g, trace) in traces {
        let d_cand: Vec<f64> = intent.iter().map(|u| g * u).collect();
        params.backward(trace, &d_cand, &mut grads)?;
    }
    Ok((result.loss, grads))
}

fn holdout_metrics(params: &EncoderParams, holdout: &Dataset) -> (Option<f64>, Option<f64>) {
    let mut scores = ScoreMap::new();
    for page in &holdout.pages {
        match params.score_page(page) {
            Ok(s) => {
                scores.insert(page.page_id.clone(), s);
            }
            Err(_) => return (None, None),
        }
    }
    let margin = decision_margin(holdout, &scores, MarginPredicate::PositiveGroup)
        .ok()
        .flatten();
    let mut sum = 0.0;
    let mut n = 0usize;
    for page in &holdout.pages {
        if let Ok(Some(v)) = ndcg_at_k(page, &scores[&page.page_id], KSpec::All) {
            sum += v;
            n += 1;
        }
    }
    let ndcg = (n > 0).then(|| sum / n as f64);
    (margin, ndcg)
}

/// Runs `epochs` passes over the dataset: pages in seeded shuffled order,
/// one instance per positive per page, one optimizer step per instance.
pub fn train_stage(
    state: &mut TrainState,
    dataset: &Dataset,
    stage: Stage,
    epochs: usize,
    holdout: Option<&Dataset>,
) -> Result<TrainLog, NumericError> {
    let mut log = TrainLog::default();
    let cfg = state.cfg;
    for epoch in 0..epochs {
        let started = std::time::Instant::now();
        let mut order: Vec<usize> = (0..dataset.pages.len()).collect();
        order.shuffle(&mut state.rng);
        let mut loss_sum = 0.0;
        let mut instances = 0usize;
        for &pi in &order {
            let page = &dataset.pages[pi];
            let positives: Vec<usize> = page
                .candidates
                .iter()
                .enumerate()
                .filter(|(_, c)| c.train_label)
                .map(|(i, _)| i)
                .collect();
            if positives.is_empty() {
                // noise can flip every label off; nothing anchors the page
                continue;
            }
            let negatives = match sample_negatives(
                page,
                cfg.negatives_per_instance,
                cfg.negative_strategy,
                &mut state.rng,
            ) {
                Ok(n) => n,
                // pages where noise flipped every label positive yield no
                // negative pool; skip the instance
                Err(_) => continue,
            };
            let (loss, mut grads) = train_instance(&state.params, page, &positives, &negatives, &cfg)?;
            let norm = grads.l2_norm();
            if norm > cfg.grad_clip {
                grads.scale(cfg.grad_clip / norm);
            }
            state.adam.step(&mut state.params, &grads, &cfg);
            loss_sum += loss;
            instances += 1;
        }
        let (holdout_margin, holdout_ndcg_all) = match holdout {
            Some(h) => holdout_metrics(&state.params, h),
            None => (None, None),
        };
        log.epochs.push(EpochRecord {
            stage: stage.name().to_string(),
            epoch: epoch + 1,
            mean_loss: if instances > 0 {
                loss_sum / instances as f64
            } else {
                0.0
            },
            instances,
            holdout_margin,
            holdout_ndcg_all,
            wall_secs: started.elapsed().as_secs_f64(),
        });
    }
    Ok(log)
}

/// Stage-1 then stage-2 training with the configured epoch counts.
pub fn two_stage(
    state: &mut TrainState,
    ds_stage1: &Dataset,
    ds_stage2: &Dataset,
    holdout: Option<&Dataset>,
) -> Result<TrainLog, NumericError> {
    let e1 = state.cfg.epochs_stage1;
    let e2 = state.cfg.epochs_stage2;
    let mut log = train_stage(state, ds_stage1, Stage::One, e1, holdout)?;
    // The stage switch changes the data distribution; moment estimates
    // accumulated on stage 1 would damp and misdirect the first stage-2
    // updates, so the optimizer restarts while the parameters carry over.
    state.adam = AdamState::new(&state.params);
    let log2 = train_stage(state, ds_stage2, Stage::Two, e2, holdout)?;
    log.epochs.extend(log2.epochs);
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses::instance_loss;
    use crate::synthworld::{generate_dataset, WorldConfig};

    fn tiny_world(seed: u64) -> WorldConfig {
        WorldConfig {
            latent_dim: 4,
            feature_dim: 6,
            candidates_per_page: 12,
            seed,
            ..WorldConfig::default()
        }
    }

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            encoder: EncoderConfig {
                input_dim: 6,
                hidden_dim: 8,
                embed_dim: 4,
                hidden_layers: 1,
            },
            negatives_per_instance: 4,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn zero_epochs_leaves_params_unchanged() {
        let ds = generate_dataset(&tiny_world(1), 10, Stage::One).unwrap();
        let mut state = TrainState::new(tiny_cfg()).unwrap();
        let before = state.params.clone();
        train_stage(&mut state, &ds, Stage::One, 0, None).unwrap();
        assert_eq!(before, state.params);
    }

    #[test]
    fn adam_zero_gradient_is_identity() {
        let cfg = tiny_cfg();
        let mut params = init_params(cfg.encoder, 3).unwrap();
        let before = params.clone();
        let mut adam = AdamState::new(&params);
        let zeros = ParamGrads::zeros_like(&params);
        adam.step(&mut params, &zeros, &cfg);
        assert_eq!(before, params);
    }

    #[test]
    fn training_is_bitwise_deterministic() {
        let ds1 = generate_dataset(&tiny_world(2), 30, Stage::One).unwrap();
        let ds2 = generate_dataset(&tiny_world(3), 30, Stage::Two).unwrap();
        let run = || {
            let mut state = TrainState::new(tiny_cfg()).unwrap();
            two_stage(&mut state, &ds1, &ds2, None).unwrap();
            state.params
        };
        let a = run();
        let b = run();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn two_stage_equals_composed_stages() {
        let ds1 = generate_dataset(&tiny_world(4), 20, Stage::One).unwrap();
        let ds2 = generate_dataset(&tiny_world(5), 20, Stage::Two).unwrap();
        let mut composed = TrainState::new(tiny_cfg()).unwrap();
        let cfg = composed.cfg;
        train_stage(&mut composed, &ds1, Stage::One, cfg.epochs_stage1, None).unwrap();
        composed.adam = AdamState::new(&composed.params);
        train_stage(&mut composed, &ds2, Stage::Two, cfg.epochs_stage2, None).unwrap();

        let mut joint = TrainState::new(tiny_cfg()).unwrap();
        two_stage(&mut joint, &ds1, &ds2, None).unwrap();
        assert_eq!(composed.params, joint.params);
    }

    #[test]
    fn sample_negatives_saturation_and_distinctness() {
        let ds = generate_dataset(&tiny_world(6), 1, Stage::One).unwrap();
        let page = &ds.pages[0];
        let pool = page.candidates.iter().filter(|c| !c.train_label).count();
        let mut rng = ChaCha8Rng::seed_from_u64(1);

        let all = sample_negatives(page, 100, NegativeStrategy::Uniform, &mut rng).unwrap();
        assert_eq!(all.len(), pool);

        let k = 8.min(pool - 1);
        let some = sample_negatives(page, k, NegativeStrategy::Uniform, &mut rng).unwrap();
        assert_eq!(some.len(), k);
        let unique: std::collections::BTreeSet<_> = some.iter().collect();
        assert_eq!(unique.len(), k);
        assert!(some.iter().all(|&i| !page.candidates[i].train_label));
    }

    #[test]
    fn zero_negative_pool_is_error() {
        let mut ds = generate_dataset(&tiny_world(6), 1, Stage::One).unwrap();
        for c in &mut ds.pages[0].candidates {
            c.train_label = true;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(sample_negatives(&ds.pages[0], 4, NegativeStrategy::Uniform, &mut rng).is_err());
    }

    #[test]
    fn hard_band_overweights_distractors() {
        // stage-1 pages are unrelated-dominated; hard-band sampling should
        // pull the distractor fraction above its pool fraction
        let ds = generate_dataset(&tiny_world(7), 20, Stage::One).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut pool_dis = 0usize;
        let mut pool_all = 0usize;
        let mut drawn_dis = 0usize;
        let mut drawn_all = 0usize;
        for page in &ds.pages {
            for c in page.candidates.iter().filter(|c| !c.train_label) {
                pool_all += 1;
                if c.level == FunctionalLevel::SemanticDistractor {
                    pool_dis += 1;
                }
            }
            for _ in 0..500 {
                let drawn =
                    sample_negatives(page, 4, NegativeStrategy::HardBand, &mut rng).unwrap();
                for &i in &drawn {
                    drawn_all += 1;
                    if page.candidates[i].level == FunctionalLevel::SemanticDistractor {
                        drawn_dis += 1;
                    }
                }
            }
        }
        let pool_frac = pool_dis as f64 / pool_all as f64;
        let drawn_frac = drawn_dis as f64 / drawn_all as f64;
        assert!(
            drawn_frac > pool_frac + 0.05,
            "drawn {drawn_frac:.3} vs pool {pool_frac:.3}"
        );
    }

    #[test]
    fn infonce_zero_negatives_zero_gradient() {
        let ds = generate_dataset(&tiny_world(8), 1, Stage::One).unwrap();
        let page = &ds.pages[0];
        let pos = page.candidates.iter().position(|c| c.train_label).unwrap();
        let cfg = tiny_cfg();
        let params = init_params(cfg.encoder, 1).unwrap();
        let (loss, grads) = train_instance(&params, page, &[pos], &[], &cfg).unwrap();
        assert_eq!(loss, 0.0);
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn bce_score_gradient_ignores_other_candidates() {
        // dL/ds_k must not move when another candidate's features change
        let mut ds = generate_dataset(&tiny_world(9), 1, Stage::One).unwrap();
        let cfg = TrainConfig {
            loss_kind: LossKind::Bce,
            ..tiny_cfg()
        };
        let params = init_params(cfg.encoder, 2).unwrap();
        let page = ds.pages[0].clone();
        let pos = page.candidates.iter().position(|c| c.train_label).unwrap();
        let negatives: Vec<usize> = (0..page.candidates.len()).filter(|&i| i != pos).collect();

        let score_grads = |page: &Page| {
            let (intent, _) = params.encode(&page.instruction_features).unwrap();
            let s_pos = dot(&intent, &params.encode(&page.candidates[pos].features).unwrap().0);
            let s_negs: Vec<f64> = negatives
                .iter()
                .map(|&i| dot(&intent, &params.encode(&page.candidates[i].features).unwrap().0))
                .collect();
            instance_loss(cfg.loss_kind, s_pos, &s_negs, cfg.tau, cfg.hinge_margin).unwrap()
        };
        let base = score_grads(&page);
        // perturb the last negative's features; gradient on the first
        // negative must be bit-identical
        let last = *negatives.last().unwrap();
        for f in &mut ds.pages[0].candidates[last].features {
            *f += 0.37;
        }
        let perturbed = score_grads(&ds.pages[0]);
        assert_eq!(base.grad_negs[0].to_bits(), perturbed.grad_negs[0].to_bits());
        assert_eq!(base.grad_pos.to_bits(), perturbed.grad_pos.to_bits());
    }

    #[test]
    fn holdout_margin_goes_positive_on_small_run() {
        let world = tiny_world(10);
        let ds1 = generate_dataset(&world, 200, Stage::One).unwrap();
        let ds2 = generate_dataset(
            &WorldConfig { seed: 11, ..world },
            200,
            Stage::Two,
        )
        .unwrap();
        let holdout = generate_dataset(&WorldConfig { seed: 12, ..world }, 40, Stage::One).unwrap();
        let mut state = TrainState::new(tiny_cfg()).unwrap();
        let log = two_stage(&mut state, &ds1, &ds2, Some(&holdout)).unwrap();
        let last = log.epochs.last().unwrap();
        assert!(last.holdout_margin.unwrap() > 0.0, "{last:?}");
    }
}
