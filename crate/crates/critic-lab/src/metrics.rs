//! Ranking evaluation suite: NDCG with exponential gain, pairwise preference
//! accuracy over adjacent tiers, decision margin, and Recall@K.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::domain::{Candidate, Dataset, FunctionalLevel, Page, ScoreMap};
use crate::error::DomainError;

/// Rank cutoff: a finite K or the whole candidate list.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KSpec {
    At(usize),
    All,
}

impl KSpec {
    pub fn label(&self) -> String {
        match self {
            KSpec::At(k) => k.to_string(),
            KSpec::All => "all".to_string(),
        }
    }

    pub fn cutoff(&self, n: usize) -> usize {
        match self {
            KSpec::At(k) => (*k).min(n),
            KSpec::All => n,
        }
    }
}

impl std::str::FromStr for KSpec {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(KSpec::All);
        }
        let k: usize = s.parse().map_err(|_| format!("invalid K: {s:?}"))?;
        if k == 0 {
            return Err("K must be >= 1".into());
        }
        Ok(KSpec::At(k))
    }
}

/// Which candidates count as "correct" for the decision margin.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MarginPredicate {
    /// Task-advancing levels: Optimal and Suboptimal.
    #[default]
    PositiveGroup,
    /// The labeled-correct candidate only; matches the training positives.
    GroundTruth,
}

impl MarginPredicate {
    pub fn holds(&self, c: &Candidate) -> bool {
        match self {
            MarginPredicate::PositiveGroup => c.level >= FunctionalLevel::Suboptimal,
            MarginPredicate::GroundTruth => c.is_ground_truth,
        }
    }
}

impl std::str::FromStr for MarginPredicate {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "positive-group" => Ok(MarginPredicate::PositiveGroup),
            "ground-truth" => Ok(MarginPredicate::GroundTruth),
            other => Err(format!("unknown margin predicate {other:?}")),
        }
    }
}

pub const ADJACENT_PAIRS: [(&str, FunctionalLevel, FunctionalLevel); 3] = [
    ("opt-sub", FunctionalLevel::Optimal, FunctionalLevel::Suboptimal),
    (
        "sub-dis",
        FunctionalLevel::Suboptimal,
        FunctionalLevel::SemanticDistractor,
    ),
    (
        "dis-unr",
        FunctionalLevel::SemanticDistractor,
        FunctionalLevel::UnrelatedError,
    ),
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// NDCG keyed by cutoff label ("8", "16", "all"), macro-averaged over
    /// non-skipped pages.
    pub ndcg_at: BTreeMap<String, f64>,
    /// Micro-averaged PPA per adjacent tier pair; absent when a pair has no
    /// comparisons anywhere in the dataset.
    pub ppa: BTreeMap<String, f64>,
    pub margin: Option<f64>,
    pub recall_at: BTreeMap<String, f64>,
    pub pages_evaluated: usize,
    pub pages_skipped: usize,
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    pub k_list: Vec<KSpec>,
    pub recall_k_list: Vec<usize>,
    pub margin_predicate: MarginPredicate,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            k_list: vec![KSpec::At(8), KSpec::At(16), KSpec::All],
            recall_k_list: vec![1, 5],
            margin_predicate: MarginPredicate::PositiveGroup,
        }
    }
}

/// Discounted cumulative gain over levels in rank order:
/// sum over ranks r=1..n of (2^l - 1) / log2(r + 1).
pub fn dcg(levels_in_rank_order: &[FunctionalLevel]) -> f64 {
    levels_in_rank_order
        .iter()
        .enumerate()
        .map(|(i, l)| l.gain() / ((i + 2) as f64).log2())
        .sum()
}

fn page_scores<'a>(
    page: &Page,
    scores: &'a ScoreMap,
) -> Result<&'a BTreeMap<String, f64>, DomainError> {
    scores
        .get(&page.page_id)
        .ok_or_else(|| DomainError::MissingScore {
            page_id: page.page_id.clone(),
            action_id: "*".into(),
        })
}

/// Candidates sorted by descending score, ties broken by ascending action_id.
pub fn rank_candidates<'a>(
    page: &'a Page,
    scores: &BTreeMap<String, f64>,
) -> Result<Vec<&'a Candidate>, DomainError> {
    let mut ranked: Vec<(&Candidate, f64)> = Vec::with_capacity(page.candidates.len());
    for c in &page.candidates {
        let s = scores
            .get(&c.action_id)
            .ok_or_else(|| DomainError::MissingScore {
                page_id: page.page_id.clone(),
                action_id: c.action_id.clone(),
            })?;
        ranked.push((c, *s));
    }
    ranked.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then_with(|| a.0.action_id.cmp(&b.0.action_id))
    });
    Ok(ranked.into_iter().map(|(c, _)| c).collect())
}

/// NDCG at a cutoff; `None` means the page was skipped (zero ideal gain).
pub fn ndcg_at_k(
    page: &Page,
    scores: &BTreeMap<String, f64>,
    k: KSpec,
) -> Result<Option<f64>, DomainError> {
    let ranked = rank_candidates(page, scores)?;
    let cut = k.cutoff(ranked.len());
    let actual: Vec<FunctionalLevel> = ranked[..cut].iter().map(|c| c.level).collect();
    let mut ideal_levels: Vec<FunctionalLevel> = page.candidates.iter().map(|c| c.level).collect();
    ideal_levels.sort_by(|a, b| b.cmp(a));
    ideal_levels.truncate(cut);
    let ideal = dcg(&ideal_levels);
    if ideal == 0.0 {
        return Ok(None);
    }
    Ok(Some(dcg(&actual) / ideal))
}

/// Mean over all (u, v) pairs of 1[s_u > s_v] + 0.5 * 1[s_u = s_v].
/// `None` when either side is empty.
pub fn ppa_pair(scores_u: &[f64], scores_v: &[f64]) -> Option<f64> {
    if scores_u.is_empty() || scores_v.is_empty() {
        return None;
    }
    let mut credit = 0.0;
    for &u in scores_u {
        for &v in scores_v {
            if u > v {
                credit += 1.0;
            } else if u == v {
                credit += 0.5;
            }
        }
    }
    Some(credit / (scores_u.len() * scores_v.len()) as f64)
}

/// Micro-averaged PPA over all same-page (upper, lower) pairs across the
/// dataset. Pages lacking either tier contribute no pairs.
pub fn ppa_adjacent(
    dataset: &Dataset,
    scores: &ScoreMap,
    upper: FunctionalLevel,
    lower: FunctionalLevel,
) -> Result<Option<f64>, DomainError> {
    assert_eq!(
        upper.ordinal(),
        lower.ordinal() + 1,
        "tiers must be adjacent"
    );
    let mut credit = 0.0;
    let mut pairs = 0usize;
    for page in &dataset.pages {
        let ps = page_scores(page, scores)?;
        let get = |c: &Candidate| -> Result<f64, DomainError> {
            ps.get(&c.action_id)
                .copied()
                .ok_or_else(|| DomainError::MissingScore {
                    page_id: page.page_id.clone(),
                    action_id: c.action_id.clone(),
                })
        };
        let uppers: Vec<f64> = page
            .candidates_at(upper)
            .map(get)
            .collect::<Result<_, _>>()?;
        let lowers: Vec<f64> = page
            .candidates_at(lower)
            .map(get)
            .collect::<Result<_, _>>()?;
        for &u in &uppers {
            for &v in &lowers {
                if u > v {
                    credit += 1.0;
                } else if u == v {
                    credit += 0.5;
                }
                pairs += 1;
            }
        }
    }
    if pairs == 0 {
        return Ok(None);
    }
    Ok(Some(credit / pairs as f64))
}

/// Mean score over candidates satisfying the predicate minus mean over the
/// rest, pooled dataset-wide. `None` when either pool is empty.
pub fn decision_margin(
    dataset: &Dataset,
    scores: &ScoreMap,
    predicate: MarginPredicate,
) -> Result<Option<f64>, DomainError> {
    let mut correct = (0.0, 0usize);
    let mut incorrect = (0.0, 0usize);
    for page in &dataset.pages {
        let ps = page_scores(page, scores)?;
        for c in &page.candidates {
            let s = ps
                .get(&c.action_id)
                .ok_or_else(|| DomainError::MissingScore {
                    page_id: page.page_id.clone(),
                    action_id: c.action_id.clone(),
                })?;
            let pool = if predicate.holds(c) {
                &mut correct
            } else {
                &mut incorrect
            };
            pool.0 += s;
            pool.1 += 1;
        }
    }
    if correct.1 == 0 || incorrect.1 == 0 {
        return Ok(None);
    }
    Ok(Some(
        correct.0 / correct.1 as f64 - incorrect.0 / incorrect.1 as f64,
    ))
}

/// Fraction of Optimal-bearing pages where some Optimal candidate ranks in
/// the top k. `None` when no page has an Optimal candidate.
pub fn recall_at_k(
    dataset: &Dataset,
    scores: &ScoreMap,
    k: usize,
) -> Result<Option<f64>, DomainError> {
    assert!(k >= 1, "k must be >= 1");
    let mut eligible = 0usize;
    let mut hits = 0usize;
    for page in &dataset.pages {
        if !page
            .candidates
            .iter()
            .any(|c| c.level == FunctionalLevel::Optimal)
        {
            continue;
        }
        eligible += 1;
        let ranked = rank_candidates(page, page_scores(page, scores)?)?;
        if ranked
            .iter()
            .take(k)
            .any(|c| c.level == FunctionalLevel::Optimal)
        {
            hits += 1;
        }
    }
    if eligible == 0 {
        return Ok(None);
    }
    Ok(Some(hits as f64 / eligible as f64))
}

pub fn aggregate_report(
    dataset: &Dataset,
    scores: &ScoreMap,
    config: &EvalConfig,
) -> Result<EvalReport, DomainError> {
    let mut ndcg_at = BTreeMap::new();
    let mut pages_evaluated = 0;
    let mut pages_skipped = 0;
    for (i, k) in config.k_list.iter().enumerate() {
        let mut sum = 0.0;
        let mut n = 0usize;
        let mut skipped = 0usize;
        for page in &dataset.pages {
            match ndcg_at_k(page, page_scores(page, scores)?, *k)? {
                Some(v) => {
                    sum += v;
                    n += 1;
                }
                None => skipped += 1,
            }
        }
        if n > 0 {
            ndcg_at.insert(k.label(), sum / n as f64);
        }
        // Skip status is per page, not per cutoff: a page with zero ideal
        // gain is skipped at every K.
        if i == 0 {
            pages_evaluated = n;
            pages_skipped = skipped;
        }
    }

    let mut ppa = BTreeMap::new();
    for (name, upper, lower) in ADJACENT_PAIRS {
        if let Some(v) = ppa_adjacent(dataset, scores, upper, lower)? {
            ppa.insert(name.to_string(), v);
        }
    }

    let margin = decision_margin(dataset, scores, config.margin_predicate)?;

    let mut recall_at = BTreeMap::new();
    for &k in &config.recall_k_list {
        if let Some(v) = recall_at_k(dataset, scores, k)? {
            recall_at.insert(k.to_string(), v);
        }
    }

    Ok(EvalReport {
        ndcg_at,
        ppa,
        margin,
        recall_at,
        pages_evaluated,
        pages_skipped,
    })
}

/// Scores equal to the level ordinal: the perfect-ranking reference scorer.
pub fn oracle_scores(dataset: &Dataset) -> ScoreMap {
    scored_by(dataset, |c| c.level.ordinal() as f64)
}

pub fn scored_by(dataset: &Dataset, mut f: impl FnMut(&Candidate) -> f64) -> ScoreMap {
    dataset
        .pages
        .iter()
        .map(|p| {
            (
                p.page_id.clone(),
                p.candidates
                    .iter()
                    .map(|c| (c.action_id.clone(), f(c)))
                    .collect(),
            )
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Candidate, Page};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn page_with(levels: &[FunctionalLevel]) -> Page {
        Page {
            page_id: "p".into(),
            instruction_features: vec![0.0],
            candidates: levels
                .iter()
                .enumerate()
                .map(|(i, &l)| Candidate {
                    action_id: format!("a{i:02}"),
                    features: vec![0.0],
                    level: l,
                    is_ground_truth: false,
                    train_label: false,
                })
                .collect(),
        }
    }

    fn scores_for(page: &Page, vals: &[f64]) -> BTreeMap<String, f64> {
        page.candidates
            .iter()
            .zip(vals)
            .map(|(c, &v)| (c.action_id.clone(), v))
            .collect()
    }

    use FunctionalLevel::{Optimal as O, SemanticDistractor as D, Suboptimal as S, UnrelatedError as U};

    #[test]
    fn dcg_examples() {
        assert_eq!(dcg(&[O]), 7.0);
        assert_eq!(dcg(&[U, U]), 0.0);
        let expected = 3.0 + 7.0 / 3f64.log2();
        assert!((dcg(&[S, O]) - expected).abs() < 1e-12);
        assert!((expected - 7.4165).abs() < 5e-4);
    }

    #[test]
    fn ndcg_derived_example() {
        // levels [D, O, U, S] scored [0.9, 0.7, 0.5, 0.3]
        let page = page_with(&[D, O, U, S]);
        let scores = scores_for(&page, &[0.9, 0.7, 0.5, 0.3]);
        let got = ndcg_at_k(&page, &scores, KSpec::All).unwrap().unwrap();
        let dcg_val = 1.0 + 7.0 / 3f64.log2() + 0.0 + 3.0 / 5f64.log2();
        let idcg = 7.0 + 3.0 / 3f64.log2() + 1.0 / 2.0;
        assert!((got - dcg_val / idcg).abs() < 1e-12);
        assert!((got - 0.7142).abs() < 5e-4);
    }

    #[test]
    fn ndcg_perfect_ranking_is_one() {
        let page = page_with(&[O, S, D, U]);
        let scores = scores_for(&page, &[4.0, 3.0, 2.0, 1.0]);
        for k in [KSpec::At(1), KSpec::At(2), KSpec::All] {
            assert_eq!(ndcg_at_k(&page, &scores, k).unwrap(), Some(1.0));
        }
    }

    #[test]
    fn ndcg_all_unrelated_skipped() {
        let page = page_with(&[U, U, U]);
        let scores = scores_for(&page, &[0.3, 0.2, 0.1]);
        assert_eq!(ndcg_at_k(&page, &scores, KSpec::All).unwrap(), None);
    }

    #[test]
    fn ndcg_missing_score_errors() {
        let page = page_with(&[O, U]);
        let mut scores = scores_for(&page, &[1.0, 0.0]);
        scores.remove("a01");
        assert!(ndcg_at_k(&page, &scores, KSpec::All).is_err());
    }

    #[test]
    fn ndcg_argsort_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..50 {
            let n = rng.gen_range(2..12);
            let levels: Vec<FunctionalLevel> = (0..n)
                .map(|_| FunctionalLevel::from_ordinal(rng.gen_range(0..4)).unwrap())
                .collect();
            let page = page_with(&levels);
            let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let base = scores_for(&page, &vals);
            // strictly increasing transform
            let mapped: Vec<f64> = vals.iter().map(|v| (3.0 * v).exp() + 0.5 * v).collect();
            let transformed = scores_for(&page, &mapped);
            for k in [KSpec::At(3), KSpec::All] {
                let a = ndcg_at_k(&page, &base, k).unwrap();
                let b = ndcg_at_k(&page, &transformed, k).unwrap();
                match (a, b) {
                    (Some(x), Some(y)) => assert!((x - y).abs() < 1e-12),
                    (x, y) => assert_eq!(x, y),
                }
            }
        }
    }

    #[test]
    fn ppa_pair_examples() {
        assert_eq!(ppa_pair(&[0.9, 0.5], &[0.7, 0.5]), Some(0.625));
        assert_eq!(ppa_pair(&[0.3, 0.3], &[0.3]), Some(0.5));
        assert_eq!(ppa_pair(&[2.0, 3.0], &[1.0, 0.5]), Some(1.0));
        assert_eq!(ppa_pair(&[], &[1.0]), None);
    }

    #[test]
    fn ppa_pair_symmetry_sums_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let nu = rng.gen_range(1..6);
            let nv = rng.gen_range(1..6);
            // discrete values to exercise ties
            let u: Vec<f64> = (0..nu).map(|_| rng.gen_range(0..4) as f64 * 0.25).collect();
            let v: Vec<f64> = (0..nv).map(|_| rng.gen_range(0..4) as f64 * 0.25).collect();
            let a = ppa_pair(&u, &v).unwrap();
            let b = ppa_pair(&v, &u).unwrap();
            assert!((a + b - 1.0).abs() < 1e-12);
        }
    }

    fn toy_dataset() -> Dataset {
        let mut p0 = page_with(&[O, S, S, D, U]);
        p0.page_id = "p0".into();
        let mut p1 = page_with(&[S, D, D, U, U, O]);
        p1.page_id = "p1".into();
        Dataset::new(vec![p0, p1], serde_json::Value::Null)
    }

    #[test]
    fn ppa_adjacent_matches_brute_force() {
        let ds = toy_dataset();
        let vals0 = [0.9, 0.8, 0.4, 0.6, 0.1];
        let vals1 = [0.7, 0.7, 0.3, 0.2, 0.8, 0.95];
        let mut scores = ScoreMap::new();
        scores.insert("p0".into(), scores_for(&ds.pages[0], &vals0));
        scores.insert("p1".into(), scores_for(&ds.pages[1], &vals1));

        // brute force over all same-page (sub, dis) pairs
        let mut credit = 0.0;
        let mut n = 0.0;
        for (page, vals) in [(&ds.pages[0], &vals0[..]), (&ds.pages[1], &vals1[..])] {
            for (i, ci) in page.candidates.iter().enumerate() {
                for (j, cj) in page.candidates.iter().enumerate() {
                    if ci.level == S && cj.level == D {
                        n += 1.0;
                        if vals[i] > vals[j] {
                            credit += 1.0;
                        } else if vals[i] == vals[j] {
                            credit += 0.5;
                        }
                    }
                }
            }
        }
        let got = ppa_adjacent(&ds, &scores, S, D).unwrap().unwrap();
        assert!((got - credit / n).abs() < 1e-12);
    }

    #[test]
    fn ppa_adjacent_constant_scorer_is_half() {
        let ds = toy_dataset();
        let scores = scored_by(&ds, |_| 0.42);
        for (_, u, l) in ADJACENT_PAIRS {
            assert_eq!(ppa_adjacent(&ds, &scores, u, l).unwrap(), Some(0.5));
        }
    }

    #[test]
    fn margin_examples() {
        let ds = toy_dataset();
        // p0 has O,S,S positive; assign correct {2,4,3}, incorrect shifted
        let oracle = oracle_scores(&ds);
        let m = decision_margin(&ds, &oracle, MarginPredicate::PositiveGroup)
            .unwrap()
            .unwrap();
        // correct pool scores: {3,2,2,2,3} mean 2.4; incorrect {1,0,1,1,0,0} mean 0.5
        assert!((m - 1.9).abs() < 1e-12);

        let constant = scored_by(&ds, |_| 1.0);
        assert_eq!(
            decision_margin(&ds, &constant, MarginPredicate::PositiveGroup).unwrap(),
            Some(0.0)
        );

        // translation equivariance and positive scaling
        let shifted = scored_by(&ds, |c| c.level.ordinal() as f64 + 5.5);
        let m2 = decision_margin(&ds, &shifted, MarginPredicate::PositiveGroup)
            .unwrap()
            .unwrap();
        assert!((m2 - m).abs() < 1e-12);
        let scaled = scored_by(&ds, |c| 3.0 * c.level.ordinal() as f64);
        let m3 = decision_margin(&ds, &scaled, MarginPredicate::PositiveGroup)
            .unwrap()
            .unwrap();
        assert!((m3 - 3.0 * m).abs() < 1e-12);
    }

    #[test]
    fn margin_simple_pools() {
        // correct {2,4}, incorrect {1,3} -> 1.0
        let mut page = page_with(&[O, O, U, U]);
        page.page_id = "p".into();
        let scores_vals = [2.0, 4.0, 1.0, 3.0];
        let mut scores = ScoreMap::new();
        scores.insert("p".into(), scores_for(&page, &scores_vals));
        let ds = Dataset::new(vec![page], serde_json::Value::Null);
        let m = decision_margin(&ds, &scores, MarginPredicate::PositiveGroup)
            .unwrap()
            .unwrap();
        assert!((m - 1.0).abs() < 1e-12);
    }

    #[test]
    fn recall_examples_and_monotonicity() {
        let ds = toy_dataset();
        let oracle = oracle_scores(&ds);
        assert_eq!(recall_at_k(&ds, &oracle, 1).unwrap(), Some(1.0));

        let anti = scored_by(&ds, |c| -(c.level.ordinal() as f64));
        assert_eq!(recall_at_k(&ds, &anti, 1).unwrap(), Some(0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let random = scored_by(&ds, |_| rng.gen_range(-1.0..1.0));
        let mut prev = 0.0;
        for k in 1..=6 {
            let r = recall_at_k(&ds, &random, k).unwrap().unwrap();
            assert!(r >= prev);
            prev = r;
        }
        assert_eq!(prev, 1.0);
    }

    #[test]
    fn aggregate_oracle_and_anti_oracle() {
        let ds = toy_dataset();
        let cfg = EvalConfig::default();
        let report = aggregate_report(&ds, &oracle_scores(&ds), &cfg).unwrap();
        assert_eq!(report.ndcg_at["all"], 1.0);
        for v in report.ppa.values() {
            assert_eq!(*v, 1.0);
        }
        assert_eq!(report.pages_evaluated + report.pages_skipped, ds.pages.len());

        let anti = scored_by(&ds, |c| -(c.level.ordinal() as f64));
        let report = aggregate_report(&ds, &anti, &cfg).unwrap();
        for v in report.ppa.values() {
            assert_eq!(*v, 0.0);
        }
    }
}
