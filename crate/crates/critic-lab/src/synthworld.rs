//! Seeded generator of a hierarchical affordance world. A latent intent
//! direction lives on the unit sphere; candidate actions are placed at
//! controlled angular distances and mapped through a fixed mixing transform,
//! so the functional level of every candidate is known by construction.

use std::f64::consts::FRAC_PI_2;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{classify_level, Candidate, Dataset, FunctionalLevel, Page};
use crate::error::NumericError;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub latent_dim: usize,
    pub feature_dim: usize,
    /// Angular band edges in radians; level = band containing the candidate's
    /// angle to the intent direction.
    pub optimal_max: f64,
    pub suboptimal_max: f64,
    pub distractor_max: f64,
    pub observation_noise: f64,
    /// Proportions for (Optimal, Suboptimal, Distractor, Unrelated).
    pub level_mix: [f64; 4],
    pub candidates_per_page: usize,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            latent_dim: 8,
            feature_dim: 16,
            optimal_max: 0.15,
            suboptimal_max: 0.45,
            distractor_max: 0.90,
            observation_noise: 0.05,
            // benchmark label distribution: 8.9 / 3.6 / 15.8 / 71.8 %
            level_mix: [0.089, 0.036, 0.158, 0.718],
            candidates_per_page: 30,
            seed: 0,
        }
    }
}

impl WorldConfig {
    pub fn validate(&self) -> Result<(), NumericError> {
        let bad = |m: &str| Err(NumericError::InvalidConfig(m.to_string()));
        if self.latent_dim < 2 {
            return bad("latent_dim must be >= 2");
        }
        if self.feature_dim < self.latent_dim {
            return bad("feature_dim must be >= latent_dim");
        }
        if !(0.0 < self.optimal_max
            && self.optimal_max < self.suboptimal_max
            && self.suboptimal_max < self.distractor_max
            && self.distractor_max < FRAC_PI_2)
        {
            return bad("angle bands must satisfy 0 < optimal < suboptimal < distractor < pi/2");
        }
        if !(self.observation_noise >= 0.0) {
            return bad("observation_noise must be >= 0");
        }
        if self.level_mix.iter().any(|p| *p < 0.0) {
            return bad("level_mix proportions must be nonnegative");
        }
        // Published proportions are rounded and may miss 1.0 by a hair; they
        // are treated as weights, so only require the total to be near 1.
        if (self.level_mix.iter().sum::<f64>() - 1.0).abs() > 0.01 {
            return bad("level_mix must sum to approximately 1");
        }
        if self.candidates_per_page == 0 {
            return bad("candidates_per_page must be >= 1");
        }
        Ok(())
    }

    /// Level implied by the candidate's angle to the intent direction.
    pub fn level_for_angle(&self, angle: f64) -> FunctionalLevel {
        classify_level(
            angle <= self.suboptimal_max,
            angle <= self.optimal_max,
            angle <= self.distractor_max,
        )
    }

    fn angle_band(&self, level: FunctionalLevel) -> (f64, f64) {
        match level {
            FunctionalLevel::Optimal => (0.0, self.optimal_max),
            FunctionalLevel::Suboptimal => (self.optimal_max, self.suboptimal_max),
            FunctionalLevel::SemanticDistractor => (self.suboptimal_max, self.distractor_max),
            FunctionalLevel::UnrelatedError => (self.distractor_max, FRAC_PI_2),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stage {
    One,
    Two,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::One => "1",
            Stage::Two => "2",
        }
    }

    /// Stage Two re-weights the negative mass toward the distractor band
    /// (negatives 60% distractor / 30% suboptimal-band / 10% unrelated),
    /// emulating plausible-but-wrong rollout failures.
    pub fn mix(self, config: &WorldConfig) -> [f64; 4] {
        match self {
            Stage::One => config.level_mix,
            Stage::Two => {
                let opt = config.level_mix[0];
                let neg = 1.0 - opt;
                [opt, 0.3 * neg, 0.6 * neg, 0.1 * neg]
            }
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "1" | "one" => Ok(Stage::One),
            "2" | "two" => Ok(Stage::Two),
            other => Err(format!("unknown stage {other:?} (expected 1 or 2)")),
        }
    }
}

/// Fixed full-rank mixing matrix (feature_dim x latent_dim), optionally
/// followed by an elementwise tanh.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixingTransform {
    pub feature_dim: usize,
    pub latent_dim: usize,
    pub matrix: Vec<f64>,
    pub nonlinear: bool,
}

impl MixingTransform {
    pub fn generate(config: &WorldConfig) -> MixingTransform {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, u64::MAX));
        loop {
            let scale = 1.0 / (config.latent_dim as f64).sqrt();
            let matrix: Vec<f64> = (0..config.feature_dim * config.latent_dim)
                .map(|_| gauss(&mut rng) * scale)
                .collect();
            let t = MixingTransform {
                feature_dim: config.feature_dim,
                latent_dim: config.latent_dim,
                matrix,
                nonlinear: false,
            };
            // Gaussian matrices are full column rank almost surely; the check
            // guards against a pathological draw.
            if t.full_column_rank() {
                return t;
            }
        }
    }

    pub fn identity(dim: usize) -> MixingTransform {
        let mut matrix = vec![0.0; dim * dim];
        for i in 0..dim {
            matrix[i * dim + i] = 1.0;
        }
        MixingTransform {
            feature_dim: dim,
            latent_dim: dim,
            matrix,
            nonlinear: false,
        }
    }

    pub fn apply(&self, latent: &[f64]) -> Vec<f64> {
        debug_assert_eq!(latent.len(), self.latent_dim);
        (0..self.feature_dim)
            .map(|r| {
                let row = &self.matrix[r * self.latent_dim..(r + 1) * self.latent_dim];
                let v: f64 = row.iter().zip(latent).map(|(m, z)| m * z).sum();
                if self.nonlinear {
                    v.tanh()
                } else {
                    v
                }
            })
            .collect()
    }

    fn full_column_rank(&self) -> bool {
        // rank via Gaussian elimination on a copy
        let (rows, cols) = (self.feature_dim, self.latent_dim);
        let mut m = self.matrix.clone();
        let mut rank = 0;
        for col in 0..cols {
            let pivot = (rank..rows).max_by(|&a, &b| {
                m[a * cols + col]
                    .abs()
                    .total_cmp(&m[b * cols + col].abs())
            });
            let Some(p) = pivot else { break };
            if m[p * cols + col].abs() < 1e-10 {
                continue;
            }
            for c in 0..cols {
                m.swap(rank * cols + c, p * cols + c);
            }
            for r in (rank + 1)..rows {
                let f = m[r * cols + col] / m[rank * cols + col];
                for c in col..cols {
                    m[r * cols + c] -= f * m[rank * cols + c];
                }
            }
            rank += 1;
        }
        rank == cols
    }
}

/// Standard normal via Box-Muller.
pub fn gauss(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Uniform draw from the unit sphere (normalized isotropic Gaussian).
pub fn sample_unit_vector(dim: usize, rng: &mut impl Rng) -> Result<Vec<f64>, NumericError> {
    if dim < 2 {
        return Err(NumericError::InvalidConfig(
            "sphere sampling needs dim >= 2".into(),
        ));
    }
    loop {
        let v: Vec<f64> = (0..dim).map(|_| gauss(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return Ok(v.iter().map(|x| x / norm).collect());
        }
    }
}

/// Unit vector at exactly angle `theta` from `base`, with the in-plane
/// direction chosen uniformly in the orthogonal complement.
pub fn rotate_from(
    base: &[f64],
    theta: f64,
    rng: &mut impl Rng,
) -> Result<Vec<f64>, NumericError> {
    if !(0.0..=std::f64::consts::PI).contains(&theta) {
        return Err(NumericError::InvalidConfig(format!(
            "rotation angle {theta} out of [0, pi]"
        )));
    }
    if theta == 0.0 {
        return Ok(base.to_vec());
    }
    let dim = base.len();
    let ortho = loop {
        let v = sample_unit_vector(dim, rng)?;
        let proj: f64 = v.iter().zip(base).map(|(a, b)| a * b).sum();
        let w: Vec<f64> = v.iter().zip(base).map(|(a, b)| a - proj * b).collect();
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-9 {
            break w.iter().map(|x| x / norm).collect::<Vec<f64>>();
        }
    };
    let (sin, cos) = theta.sin_cos();
    Ok(base
        .iter()
        .zip(&ortho)
        .map(|(b, w)| cos * b + sin * w)
        .collect())
}

fn noisy_map(
    transform: &MixingTransform,
    latent: &[f64],
    sigma: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    transform
        .apply(latent)
        .into_iter()
        .map(|v| v + sigma * gauss(rng))
        .collect()
}

fn sample_level(mix: &[f64; 4], rng: &mut impl Rng) -> FunctionalLevel {
    let total: f64 = mix.iter().sum();
    let u: f64 = rng.gen::<f64>() * total;
    let mut acc = 0.0;
    for (i, level) in FunctionalLevel::ALL_DESC.iter().enumerate() {
        acc += mix[i];
        if u < acc {
            return *level;
        }
    }
    FunctionalLevel::UnrelatedError
}

/// One synthetic page: a latent intent, candidates at level-banded angles,
/// exactly one ground-truth Optimal flagged as the training positive.
pub fn generate_page(
    config: &WorldConfig,
    transform: &MixingTransform,
    mix: &[f64; 4],
    page_id: &str,
    rng: &mut impl Rng,
) -> Result<Page, NumericError> {
    config.validate()?;
    let n = config.candidates_per_page;
    let intent = sample_unit_vector(config.latent_dim, rng)?;

    let mut levels: Vec<FunctionalLevel> = (0..n).map(|_| sample_level(mix, rng)).collect();
    if !levels.contains(&FunctionalLevel::Optimal) {
        let idx = rng.gen_range(0..n);
        levels[idx] = FunctionalLevel::Optimal;
    }
    let optimal_idxs: Vec<usize> = levels
        .iter()
        .enumerate()
        .filter(|(_, l)| **l == FunctionalLevel::Optimal)
        .map(|(i, _)| i)
        .collect();
    let gt_idx = optimal_idxs[rng.gen_range(0..optimal_idxs.len())];

    let sigma = config.observation_noise;
    let mut candidates = Vec::with_capacity(n);
    for (i, &level) in levels.iter().enumerate() {
        let (lo, hi) = config.angle_band(level);
        // bands are (lo, hi] except the optimal band, which is [0, hi];
        // sampled angles then decode back to the generating level exactly
        let angle = if level == FunctionalLevel::Optimal {
            rng.gen_range(0.0..hi)
        } else {
            hi - rng.gen_range(0.0..(hi - lo))
        };
        let latent = rotate_from(&intent, angle, rng)?;
        debug_assert_eq!(config.level_for_angle(angle), level);
        candidates.push(Candidate {
            action_id: format!("a{i:03}"),
            features: noisy_map(transform, &latent, sigma, rng),
            level,
            is_ground_truth: i == gt_idx,
            train_label: i == gt_idx,
        });
    }
    let instruction_features = noisy_map(transform, &intent, sigma, rng);
    Ok(Page {
        page_id: page_id.to_string(),
        instruction_features,
        candidates,
    })
}

/// Deterministic dataset generation with per-page derived sub-seeds.
pub fn generate_dataset(
    config: &WorldConfig,
    n_pages: usize,
    stage: Stage,
) -> Result<Dataset, NumericError> {
    config.validate()?;
    let transform = MixingTransform::generate(config);
    let mix = stage.mix(config);
    let mut pages = Vec::with_capacity(n_pages);
    for i in 0..n_pages {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(config.seed, i as u64));
        pages.push(generate_page(
            config,
            &transform,
            &mix,
            &format!("page{i:05}"),
            &mut rng,
        )?);
    }
    let meta = serde_json::json!({
        "world": config,
        "stage": stage.name(),
        "pages": n_pages,
    });
    Ok(Dataset::new(pages, meta))
}

/// Inverts each candidate's train_label independently with probability p.
/// Levels are untouched so evaluation stays clean.
pub fn flip_labels(dataset: &Dataset, p: f64, rng: &mut impl Rng) -> Result<Dataset, NumericError> {
    if !(0.0..=1.0).contains(&p) {
        return Err(NumericError::InvalidConfig(format!(
            "flip rate {p} out of [0, 1]"
        )));
    }
    let mut out = dataset.clone();
    for page in &mut out.pages {
        for c in &mut page.candidates {
            if rng.gen::<f64>() < p {
                c.train_label = !c.train_label;
            }
        }
    }
    Ok(out)
}

/// Stable sub-seed derivation (splitmix64 over seed and stream index).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed
        .wrapping_mul(0x9e37_79b9_7f4a_7c15)
        .wrapping_add(index.wrapping_mul(0xbf58_476d_1ce4_e5b9))
        .wrapping_add(0x94d0_49bb_1331_11eb);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}
