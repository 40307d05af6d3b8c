//! Analytic-gradient verification suites: closed-form identities, central
//! finite differences, loss equivalences, and end-to-end parameter gradient
//! checks through the full encoder pipeline. Shared by the `gradcheck`
//! command and the acceptance tests.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Page;
use crate::encoder::{dot, init_params, EncoderConfig, EncoderParams};
use crate::losses::{bce, infonce, instance_loss, LossKind, Temperature};
use crate::synthworld::{derive_seed, generate_page, MixingTransform, WorldConfig};
use crate::trainer::{train_instance, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckCase {
    pub name: String,
    /// Worst-case error over all sampled cases, in the same units as the
    /// tolerance.
    pub worst: f64,
    pub tolerance: f64,
    pub cases: usize,
    pub passed: bool,
}

impl CheckCase {
    fn new(name: &str, worst: f64, tolerance: f64, cases: usize) -> CheckCase {
        CheckCase {
            name: name.to_string(),
            worst,
            tolerance,
            cases,
            passed: worst <= tolerance,
        }
    }
}

/// Central finite difference with step h.
fn central_diff(mut f: impl FnMut(f64) -> f64, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Normalized finite-difference discrepancy. The floor absorbs FD roundoff,
/// which scales with the loss magnitude over the step size: differences below
/// `floor_scale * max(1, |loss|)` are below what central differences can
/// resolve in binary64 and count as agreement.
fn fd_error(analytic: f64, fd: f64, loss: f64, floor_scale: f64) -> f64 {
    let diff = (analytic - fd).abs();
    let floor = floor_scale * loss.abs().max(1.0);
    if diff <= floor {
        return 0.0;
    }
    diff / analytic.abs().max(fd.abs())
}

const FD_STEP: f64 = 1e-6;

/// Random (s+, negatives, tau) triples matching the verification protocol:
/// up to 32 negatives, tau in [0.01, 1], cosine-range scores.
fn sample_triple(rng: &mut impl Rng) -> (f64, Vec<f64>, Temperature) {
    let n = rng.gen_range(1..=32);
    let s_pos = rng.gen_range(-1.0..1.0);
    let negs: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let tau = Temperature::new(rng.gen_range(0.01..=1.0)).unwrap();
    (s_pos, negs, tau)
}

/// Contrastive gradient suite: the analytic gradient against an independently
/// computed softmax closed form, against central finite differences, and the
/// zero-sum identity.
pub fn infonce_gradient_checks(cases: usize, seed: u64) -> Vec<CheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_closed = 0.0f64;
    let mut worst_fd = 0.0f64;
    let mut worst_sum = 0.0f64;
    for _ in 0..cases {
        let (s_pos, negs, tau) = sample_triple(&mut rng);
        let t = tau.value();
        let r = infonce(s_pos, &negs, tau).unwrap();

        // closed form via pairwise exponent differences, no shared max
        let softmax_at = |s_k: f64| -> f64 {
            let mut z = ((s_pos - s_k) / t).exp();
            for &s in &negs {
                z += ((s - s_k) / t).exp();
            }
            1.0 / z
        };
        for (k, &s_k) in negs.iter().enumerate() {
            let expected = softmax_at(s_k) / t;
            let got = r.grad_negs[k];
            worst_closed = worst_closed.max((got - expected).abs() / expected.abs().max(1.0));
        }
        let expected_pos = -(1.0 - softmax_at(s_pos)) / t;
        worst_closed =
            worst_closed.max((r.grad_pos - expected_pos).abs() / expected_pos.abs().max(1.0));

        // central finite differences on every score
        let fd_pos = central_diff(
            |x| infonce(x, &negs, tau).unwrap().loss,
            s_pos,
            FD_STEP,
        );
        worst_fd = worst_fd.max(fd_error(r.grad_pos, fd_pos, r.loss, 1e-8));
        for k in 0..negs.len() {
            let fd = central_diff(
                |x| {
                    let mut moved = negs.clone();
                    moved[k] = x;
                    infonce(s_pos, &moved, tau).unwrap().loss
                },
                negs[k],
                FD_STEP,
            );
            worst_fd = worst_fd.max(fd_error(r.grad_negs[k], fd, r.loss, 1e-8));
        }

        let total = r.grad_pos + r.grad_negs.iter().sum::<f64>();
        worst_sum = worst_sum.max(total.abs());
    }
    vec![
        CheckCase::new("infonce-closed-form", worst_closed, 1e-12, cases),
        CheckCase::new("infonce-finite-diff", worst_fd, 1e-6, cases),
        CheckCase::new("infonce-zero-sum", worst_sum, 1e-12, cases),
    ]
}

/// Binary cross-entropy suite: gradient equals sigma(s) - y, and the score
/// gradient of one candidate is bit-identical under feature perturbation of
/// every other candidate.
pub fn bce_gradient_checks(cases: usize, seed: u64) -> Vec<CheckCase> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst_closed = 0.0f64;
    let mut worst_fd = 0.0f64;
    for _ in 0..cases {
        let s = rng.gen_range(-6.0..6.0);
        let label = rng.gen::<bool>();
        let r = bce(s, label);
        let grad = if label { r.grad_pos } else { r.grad_negs[0] };
        // independent sigmoid evaluation
        let sigma = 1.0 / (1.0 + (-s).exp());
        let y = if label { 1.0 } else { 0.0 };
        worst_closed = worst_closed.max((grad - (sigma - y)).abs());

        let fd = central_diff(
            |x| {
                let r = bce(x, label);
                r.loss
            },
            s,
            FD_STEP,
        );
        worst_fd = worst_fd.max(fd_error(grad, fd, r.loss, 1e-8));
    }

    // exact independence through the full scoring pipeline
    let mut worst_indep = 0.0f64;
    let config = EncoderConfig {
        input_dim: 6,
        hidden_dim: 8,
        embed_dim: 4,
        hidden_layers: 1,
    };
    let tau = Temperature::DEFAULT;
    for trial in 0..20u64 {
        let params = init_params(config, derive_seed(seed, 100 + trial)).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 200 + trial));
        let page = toy_page(&mut rng, 6, 6);
        let pos = page.candidates.iter().position(|c| c.train_label).unwrap();
        let negs: Vec<usize> = (0..page.candidates.len()).filter(|&i| i != pos).collect();
        let grads_of = |page: &Page| {
            let (intent, _) = params.encode(&page.instruction_features).unwrap();
            let s_pos = dot(&intent, &params.encode(&page.candidates[pos].features).unwrap().0);
            let s_negs: Vec<f64> = negs
                .iter()
                .map(|&i| dot(&intent, &params.encode(&page.candidates[i].features).unwrap().0))
                .collect();
            instance_loss(LossKind::Bce, s_pos, &s_negs, tau, 1.0).unwrap()
        };
        let base = grads_of(&page);
        let mut perturbed_page = page.clone();
        let last = *negs.last().unwrap();
        for f in &mut perturbed_page.candidates[last].features {
            *f += 0.41;
        }
        let perturbed = grads_of(&perturbed_page);
        let d_pos = (base.grad_pos.to_bits() != perturbed.grad_pos.to_bits()) as u8 as f64;
        worst_indep = worst_indep.max(d_pos);
        for k in 0..negs.len() - 1 {
            let d = (base.grad_negs[k].to_bits() != perturbed.grad_negs[k].to_bits()) as u8 as f64;
            worst_indep = worst_indep.max(d);
        }
    }

    vec![
        CheckCase::new("bce-closed-form", worst_closed, 1e-12, cases),
        CheckCase::new("bce-finite-diff", worst_fd, 1e-6, cases),
        CheckCase::new("bce-independence", worst_indep, 0.0, 20),
    ]
}

/// Listwise cross-entropy over temperature-scaled scores against the
/// contrastive loss: identical loss and gradients.
pub fn listwise_equivalence_check(cases: usize, seed: u64) -> CheckCase {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let (s_pos, negs, tau) = sample_triple(&mut rng);
        let a = infonce(s_pos, &negs, tau).unwrap();
        let b = instance_loss(LossKind::Listwise, s_pos, &negs, tau, 1.0).unwrap();
        worst = worst.max((a.loss - b.loss).abs());
        worst = worst.max((a.grad_pos - b.grad_pos).abs());
        for (x, y) in a.grad_negs.iter().zip(&b.grad_negs) {
            worst = worst.max((x - y).abs());
        }
    }
    CheckCase::new("listwise-infonce-equivalence", worst, 1e-9, cases)
}

fn toy_page(rng: &mut impl Rng, feature_dim: usize, candidates: usize) -> Page {
    let world = WorldConfig {
        latent_dim: 4,
        feature_dim,
        candidates_per_page: candidates,
        seed: rng.gen(),
        ..WorldConfig::default()
    };
    let transform = MixingTransform::generate(&world);
    generate_page(&world, &transform, &world.level_mix, "toy", rng).unwrap()
}

fn instance_loss_of(
    params: &EncoderParams,
    page: &Page,
    pos: usize,
    negs: &[usize],
    cfg: &TrainConfig,
) -> f64 {
    let (intent, _) = params.encode(&page.instruction_features).unwrap();
    let s_pos = dot(&intent, &params.encode(&page.candidates[pos].features).unwrap().0);
    let s_negs: Vec<f64> = negs
        .iter()
        .map(|&i| dot(&intent, &params.encode(&page.candidates[i].features).unwrap().0))
        .collect();
    instance_loss(cfg.loss_kind, s_pos, &s_negs, cfg.tau, cfg.hinge_margin)
        .unwrap()
        .loss
}

/// True when some (positive, negative) score pair sits close enough to the
/// hinge kink that a finite-difference step could cross it.
fn near_hinge_kink(params: &EncoderParams, page: &Page, pos: usize, negs: &[usize], m: f64) -> bool {
    let (intent, _) = params.encode(&page.instruction_features).unwrap();
    let s_pos = dot(&intent, &params.encode(&page.candidates[pos].features).unwrap().0);
    negs.iter().any(|&i| {
        let s = dot(&intent, &params.encode(&page.candidates[i].features).unwrap().0);
        (m - s_pos + s).abs() < 1e-4
    })
}

/// End-to-end parameter gradient check: features through the encoder,
/// normalization, cosine scoring, and each loss, against central finite
/// differences over every weight and bias.
pub fn end_to_end_fd_checks(pages_per_loss: usize, seed: u64) -> Vec<CheckCase> {
    let encoder = EncoderConfig {
        input_dim: 6,
        hidden_dim: 8,
        embed_dim: 4,
        hidden_layers: 1,
    };
    let mut out = Vec::new();
    for kind in LossKind::ALL {
        let cfg = TrainConfig {
            loss_kind: kind,
            encoder,
            ..TrainConfig::default()
        };
        let mut worst = 0.0f64;
        let mut done = 0usize;
        let mut attempt = 0u64;
        while done < pages_per_loss {
            attempt += 1;
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, (kind as u64) << 32 | attempt));
            let params = init_params(encoder, rng.gen()).unwrap();
            let page = toy_page(&mut rng, 6, 5);
            let pos = page.candidates.iter().position(|c| c.train_label).unwrap();
            let negs: Vec<usize> = (0..page.candidates.len()).filter(|&i| i != pos).collect();
            if kind == LossKind::Pairwise
                && near_hinge_kink(&params, &page, pos, &negs, cfg.hinge_margin)
            {
                continue;
            }
            let (loss, grads) = train_instance(&params, &page, &[pos], &negs, &cfg).unwrap();
            for li in 0..params.layers.len() {
                let n_w = params.layers[li].w.len();
                let n_b = params.layers[li].b.len();
                for j in 0..n_w + n_b {
                    let analytic = if j < n_w {
                        grads.layers[li].0[j]
                    } else {
                        grads.layers[li].1[j - n_w]
                    };
                    let mut moved = params.clone();
                    let slot = |p: &mut EncoderParams, v: f64| {
                        if j < n_w {
                            p.layers[li].w[j] = v;
                        } else {
                            p.layers[li].b[j - n_w] = v;
                        }
                    };
                    let base = if j < n_w {
                        params.layers[li].w[j]
                    } else {
                        params.layers[li].b[j - n_w]
                    };
                    slot(&mut moved, base + FD_STEP);
                    let up = instance_loss_of(&moved, &page, pos, &negs, &cfg);
                    slot(&mut moved, base - FD_STEP);
                    let down = instance_loss_of(&moved, &page, pos, &negs, &cfg);
                    let fd = (up - down) / (2.0 * FD_STEP);
                    worst = worst.max(fd_error(analytic, fd, loss, 1e-7));
                }
            }
            done += 1;
        }
        out.push(CheckCase::new(
            &format!("end-to-end-fd-{kind}"),
            worst,
            1e-5,
            pages_per_loss,
        ));
    }
    out
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    fn heap(k: usize, arr: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k == 1 {
            out.push(arr.clone());
            return;
        }
        for i in 0..k {
            heap(k - 1, arr, out);
            if k % 2 == 0 {
                arr.swap(i, k - 1);
            } else {
                arr.swap(0, k - 1);
            }
        }
    }
    let mut arr: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    heap(n, &mut arr, &mut out);
    out
}

fn levels_page(levels: &[crate::domain::FunctionalLevel]) -> Page {
    Page {
        page_id: "bf".into(),
        instruction_features: vec![0.0],
        candidates: levels
            .iter()
            .enumerate()
            .map(|(i, &l)| crate::domain::Candidate {
                action_id: format!("a{i:02}"),
                features: vec![0.0],
                level: l,
                is_ground_truth: false,
                train_label: false,
            })
            .collect(),
    }
}

/// Ranking-metric brute force: on every page with at most 6 candidates, over
/// exhaustive score permutations, NDCG must equal a reference that finds the
/// ideal ordering by exhaustive search, and the tier-pair preference
/// accuracies must equal explicit pair enumeration. Exact equality.
pub fn metric_bruteforce_check(seed: u64) -> CheckCase {
    use crate::domain::{Dataset, FunctionalLevel};
    use crate::metrics::{dcg, ndcg_at_k, ppa_adjacent, ppa_pair, KSpec, ADJACENT_PAIRS};
    use std::collections::BTreeMap;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    let mut cases = 0usize;
    let mut mismatch = |bad: bool| {
        if bad {
            worst = 1.0;
        }
    };

    for n in 1..=6usize {
        let level_vecs: Vec<Vec<FunctionalLevel>> = if n <= 3 {
            // exhaustive over 4^n assignments
            (0..4usize.pow(n as u32))
                .map(|mut code| {
                    (0..n)
                        .map(|_| {
                            let l = FunctionalLevel::from_ordinal((code % 4) as u8).unwrap();
                            code /= 4;
                            l
                        })
                        .collect()
                })
                .collect()
        } else {
            (0..40)
                .map(|_| {
                    (0..n)
                        .map(|_| FunctionalLevel::from_ordinal(rng.gen_range(0..4)).unwrap())
                        .collect()
                })
                .collect()
        };
        let perms = permutations(n);
        for levels in &level_vecs {
            let page = levels_page(levels);
            for k in [KSpec::At(2), KSpec::All] {
                let cut = k.cutoff(n);
                // reference ideal DCG: exhaustive max over orderings
                let ideal = perms
                    .iter()
                    .map(|p| {
                        let ordered: Vec<FunctionalLevel> =
                            p.iter().take(cut).map(|&i| levels[i]).collect();
                        dcg(&ordered)
                    })
                    .fold(f64::NEG_INFINITY, f64::max);
                for perm in &perms {
                    // perm lists candidate indices in rank order
                    let mut scores = BTreeMap::new();
                    for (rank, &idx) in perm.iter().enumerate() {
                        scores.insert(format!("a{idx:02}"), (n - rank) as f64);
                    }
                    let got = ndcg_at_k(&page, &scores, k).unwrap();
                    let ordered: Vec<FunctionalLevel> =
                        perm.iter().take(cut).map(|&i| levels[i]).collect();
                    let expected = if ideal == 0.0 {
                        None
                    } else {
                        Some(dcg(&ordered) / ideal)
                    };
                    mismatch(got != expected);
                    // perfect ranking by level must reach exactly 1.0
                    let by_level = perm
                        .windows(2)
                        .all(|w| levels[w[0]] >= levels[w[1]]);
                    if by_level && expected.is_some() {
                        mismatch(got != Some(1.0));
                    }
                    cases += 1;
                }
            }

            // preference accuracy against explicit pair enumeration, one
            // random score assignment per level vector
            let vals: Vec<f64> = (0..n).map(|_| rng.gen_range(0..5) as f64 * 0.5).collect();
            let mut scores = BTreeMap::new();
            for (i, &v) in vals.iter().enumerate() {
                scores.insert(format!("a{i:02}"), v);
            }
            let mut map = crate::domain::ScoreMap::new();
            map.insert("bf".into(), scores);
            let ds = Dataset::new(vec![page.clone()], serde_json::Value::Null);
            for (_, upper, lower) in ADJACENT_PAIRS {
                let got = ppa_adjacent(&ds, &map, upper, lower).unwrap();
                let us: Vec<f64> = (0..n).filter(|&i| levels[i] == upper).map(|i| vals[i]).collect();
                let vs: Vec<f64> = (0..n).filter(|&i| levels[i] == lower).map(|i| vals[i]).collect();
                let expected = ppa_pair(&us, &vs);
                mismatch(got != expected);
                cases += 1;
            }
            // constant scorer: every defined pair accuracy is exactly 0.5
            let constant = crate::metrics::scored_by(&ds, |_| 0.25);
            for (_, upper, lower) in ADJACENT_PAIRS {
                if let Some(v) = ppa_adjacent(&ds, &constant, upper, lower).unwrap() {
                    mismatch(v != 0.5);
                }
            }
        }
    }
    CheckCase::new("metric-bruteforce", worst, 0.0, cases)
}

/// The full verification suite at its standard sizes.
pub fn run_all(seed: u64) -> Vec<CheckCase> {
    let mut cases = infonce_gradient_checks(1000, derive_seed(seed, 1));
    cases.extend(bce_gradient_checks(1000, derive_seed(seed, 2)));
    cases.push(listwise_equivalence_check(1000, derive_seed(seed, 3)));
    cases.push(metric_bruteforce_check(derive_seed(seed, 5)));
    cases.extend(end_to_end_fd_checks(20, derive_seed(seed, 4)));
    cases
}
