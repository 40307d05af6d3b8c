//! Interchangeable training objectives over candidate scores. Each returns
//! the loss value together with analytic gradients with respect to every
//! score, so the trainer can chain them through the encoder.

use serde::{Deserialize, Serialize};

use crate::error::NumericError;

/// Strictly positive contrastive temperature.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Temperature(f64);

impl Temperature {
    /// Default from the reference training configuration.
    pub const DEFAULT: Temperature = Temperature(0.02);

    pub fn new(tau: f64) -> Result<Temperature, NumericError> {
        if !(tau > 0.0) || !tau.is_finite() {
            return Err(NumericError::NonPositiveTemperature(tau));
        }
        Ok(Temperature(tau))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub loss: f64,
    /// dL/ds+ where applicable.
    pub grad_pos: f64,
    /// dL/ds_k- per negative, in input order.
    pub grad_negs: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    InfoNce,
    Bce,
    Pairwise,
    Listwise,
}

impl LossKind {
    pub const ALL: [LossKind; 4] = [
        LossKind::InfoNce,
        LossKind::Bce,
        LossKind::Pairwise,
        LossKind::Listwise,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::InfoNce => "infonce",
            LossKind::Bce => "bce",
            LossKind::Pairwise => "pairwise",
            LossKind::Listwise => "listwise",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "infonce" => Ok(LossKind::InfoNce),
            "bce" => Ok(LossKind::Bce),
            "pairwise" => Ok(LossKind::Pairwise),
            "listwise" => Ok(LossKind::Listwise),
            other => Err(format!("unknown loss kind {other:?}")),
        }
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(x)) without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Contrastive loss -log softmax(s+/tau) against the negatives, stabilized
/// by max-subtraction. With no negatives the loss is identically zero.
///
/// Gradients: dL/ds_k- = P(k)/tau where P is the softmax over all scaled
/// scores, and dL/ds+ = -(1 - P(pos))/tau; components sum to zero.
pub fn infonce(s_pos: f64, s_negs: &[f64], tau: Temperature) -> Result<LossResult, NumericError> {
    if !s_pos.is_finite() || !s_negs.iter().all(|s| s.is_finite()) {
        return Err(NumericError::NonFiniteInput("infonce scores".into()));
    }
    if s_negs.is_empty() {
        return Ok(LossResult {
            loss: 0.0,
            grad_pos: 0.0,
            grad_negs: Vec::new(),
        });
    }
    let t = tau.value();
    let l_pos = s_pos / t;
    let logits_neg: Vec<f64> = s_negs.iter().map(|s| s / t).collect();
    let max = logits_neg.iter().fold(l_pos, |m, &l| m.max(l));
    let e_pos = (l_pos - max).exp();
    let e_negs: Vec<f64> = logits_neg.iter().map(|l| (l - max).exp()).collect();
    let z = e_pos + e_negs.iter().sum::<f64>();
    let p_pos = e_pos / z;
    // -log p_pos, written to stay accurate when p_pos ~ 1
    let loss = z.ln() - (l_pos - max);
    let grad_pos = -(1.0 - p_pos) / t;
    let grad_negs = e_negs.iter().map(|e| (e / z) / t).collect();
    Ok(LossResult {
        loss,
        grad_pos,
        grad_negs,
    })
}

/// Binary cross-entropy on a single score. Gradient sigma(s) - y depends
/// only on the sample's own score.
pub fn bce(score: f64, label: bool) -> LossResult {
    let (loss, grad) = if label {
        (softplus(-score), sigmoid(score) - 1.0)
    } else {
        (softplus(score), sigmoid(score))
    };
    LossResult {
        loss,
        grad_pos: if label { grad } else { 0.0 },
        grad_negs: if label { Vec::new() } else { vec![grad] },
    }
}

/// Hinge max(0, m - s+ + s-) on one positive-negative pair. At the kink the
/// zero subgradient is chosen.
pub fn pairwise_hinge(s_pos: f64, s_neg: f64, margin: f64) -> Result<LossResult, NumericError> {
    if !(margin > 0.0) {
        return Err(NumericError::NonPositiveMargin(margin));
    }
    let v = margin - s_pos + s_neg;
    if v > 0.0 {
        Ok(LossResult {
            loss: v,
            grad_pos: -1.0,
            grad_negs: vec![1.0],
        })
    } else {
        Ok(LossResult {
            loss: 0.0,
            grad_pos: 0.0,
            grad_negs: vec![0.0],
        })
    }
}

/// Cross-entropy of softmax(scores) against a one-hot target. Gradients are
/// softmax(scores) - target. With a single positive this coincides with the
/// contrastive loss on temperature-scaled scores.
pub fn listwise(scores: &[f64], target: &[bool]) -> Result<LossResult, NumericError> {
    if scores.len() != target.len() || target.iter().filter(|&&t| t).count() != 1 {
        return Err(NumericError::NotOneHot);
    }
    if !scores.iter().all(|s| s.is_finite()) {
        return Err(NumericError::NonFiniteInput("listwise scores".into()));
    }
    let hot = target.iter().position(|&t| t).unwrap();
    let max = scores.iter().fold(f64::NEG_INFINITY, |m, &s| m.max(s));
    let exps: Vec<f64> = scores.iter().map(|s| (s - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    let loss = z.ln() - (scores[hot] - max);
    let grads: Vec<f64> = exps
        .iter()
        .enumerate()
        .map(|(i, e)| e / z - if i == hot { 1.0 } else { 0.0 })
        .collect();
    let grad_negs = grads
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != hot)
        .map(|(_, g)| *g)
        .collect();
    Ok(LossResult {
        loss,
        grad_pos: grads[hot],
        grad_negs,
    })
}

/// Grouped loss over one training instance's scores ({positive} plus
/// negatives), as consumed by the trainer:
/// - infonce / listwise: single grouped term over temperature-scaled scores;
/// - bce: mean of the per-candidate binary terms, so the magnitude stays
///   comparable across negative counts;
/// - pairwise: mean hinge over (positive, negative_k) pairs.
pub fn instance_loss(
    kind: LossKind,
    s_pos: f64,
    s_negs: &[f64],
    tau: Temperature,
    hinge_margin: f64,
) -> Result<LossResult, NumericError> {
    match kind {
        LossKind::InfoNce => infonce(s_pos, s_negs, tau),
        LossKind::Listwise => {
            if s_negs.is_empty() {
                return Ok(LossResult {
                    loss: 0.0,
                    grad_pos: 0.0,
                    grad_negs: Vec::new(),
                });
            }
            let t = tau.value();
            let mut scaled = Vec::with_capacity(1 + s_negs.len());
            scaled.push(s_pos / t);
            scaled.extend(s_negs.iter().map(|s| s / t));
            let mut target = vec![false; scaled.len()];
            target[0] = true;
            let r = listwise(&scaled, &target)?;
            // chain rule through the 1/tau scaling
            Ok(LossResult {
                loss: r.loss,
                grad_pos: r.grad_pos / t,
                grad_negs: r.grad_negs.iter().map(|g| g / t).collect(),
            })
        }
        LossKind::Bce => {
            let n = (1 + s_negs.len()) as f64;
            let pos = bce(s_pos, true);
            let mut loss = pos.loss;
            let grad_pos = pos.grad_pos / n;
            let mut grad_negs = Vec::with_capacity(s_negs.len());
            for &s in s_negs {
                let r = bce(s, false);
                loss += r.loss;
                grad_negs.push(r.grad_negs[0] / n);
            }
            Ok(LossResult {
                loss: loss / n,
                grad_pos,
                grad_negs,
            })
        }
        LossKind::Pairwise => {
            if s_negs.is_empty() {
                return Ok(LossResult {
                    loss: 0.0,
                    grad_pos: 0.0,
                    grad_negs: Vec::new(),
                });
            }
            let n = s_negs.len() as f64;
            let mut loss = 0.0;
            let mut grad_pos = 0.0;
            let mut grad_negs = Vec::with_capacity(s_negs.len());
            for &s in s_negs {
                let r = pairwise_hinge(s_pos, s, hinge_margin)?;
                loss += r.loss;
                grad_pos += r.grad_pos;
                grad_negs.push(r.grad_negs[0] / n);
            }
            Ok(LossResult {
                loss: loss / n,
                grad_pos: grad_pos / n,
                grad_negs,
            })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupLossResult {
    pub loss: f64,
    /// dL/ds for each positive, in input order.
    pub grad_pos: Vec<f64>,
    /// dL/ds for each negative, in input order.
    pub grad_negs: Vec<f64>,
}

/// Instance loss over one page's labeled positives and sampled negatives.
/// Pages normally carry a single positive, where this reduces exactly to
/// `instance_loss`; label corruption can mark several candidates positive.
///
/// - infonce: -log(sum_P e^{s/tau} / sum_all e^{s/tau}). The gradient on each
///   positive is weighted by its share of the positive mass, so an anchor the
///   model already discounts receives almost none of the update.
/// - listwise: softmax CE against a target uniform over the positives.
/// - bce: mean per-candidate binary terms, every label absolute.
/// - pairwise: mean hinge over all (positive, negative) pairs.
pub fn group_instance_loss(
    kind: LossKind,
    s_pos: &[f64],
    s_negs: &[f64],
    tau: Temperature,
    hinge_margin: f64,
) -> Result<GroupLossResult, NumericError> {
    if s_pos.is_empty() {
        return Err(NumericError::InvalidConfig(
            "group instance needs at least one positive".into(),
        ));
    }
    if s_pos.len() == 1 {
        let r = instance_loss(kind, s_pos[0], s_negs, tau, hinge_margin)?;
        return Ok(GroupLossResult {
            loss: r.loss,
            grad_pos: vec![r.grad_pos],
            grad_negs: r.grad_negs,
        });
    }
    if !s_pos.iter().chain(s_negs).all(|s| s.is_finite()) {
        return Err(NumericError::NonFiniteInput("group instance scores".into()));
    }
    match kind {
        LossKind::InfoNce | LossKind::Listwise => {
            if s_negs.is_empty() {
                return Ok(GroupLossResult {
                    loss: 0.0,
                    grad_pos: vec![0.0; s_pos.len()],
                    grad_negs: Vec::new(),
                });
            }
            let t = tau.value();
            let lp: Vec<f64> = s_pos.iter().map(|s| s / t).collect();
            let ln: Vec<f64> = s_negs.iter().map(|s| s / t).collect();
            let max = lp.iter().chain(&ln).fold(f64::NEG_INFINITY, |m, &l| m.max(l));
            let ep: Vec<f64> = lp.iter().map(|l| (l - max).exp()).collect();
            let en: Vec<f64> = ln.iter().map(|l| (l - max).exp()).collect();
            let zp: f64 = ep.iter().sum();
            let z: f64 = zp + en.iter().sum::<f64>();
            let (loss, grad_pos) = match kind {
                LossKind::InfoNce => {
                    // q_i - p_i: softmax over everything minus softmax over
                    // the positives
                    let loss = z.ln() - zp.ln();
                    let g = ep.iter().map(|e| (e / z - e / zp) / t).collect();
                    (loss, g)
                }
                _ => {
                    // uniform target over the positives
                    let k = s_pos.len() as f64;
                    let loss = z.ln() - ep.iter().map(|e| e.ln()).sum::<f64>() / k;
                    let g = ep.iter().map(|e| (e / z - 1.0 / k) / t).collect();
                    (loss, g)
                }
            };
            let grad_negs = en.iter().map(|e| (e / z) / t).collect();
            Ok(GroupLossResult {
                loss,
                grad_pos,
                grad_negs,
            })
        }
        LossKind::Bce => {
            let n = (s_pos.len() + s_negs.len()) as f64;
            let mut loss = 0.0;
            let grad_pos = s_pos
                .iter()
                .map(|&s| {
                    let r = bce(s, true);
                    loss += r.loss;
                    r.grad_pos / n
                })
                .collect();
            let grad_negs = s_negs
                .iter()
                .map(|&s| {
                    let r = bce(s, false);
                    loss += r.loss;
                    r.grad_negs[0] / n
                })
                .collect();
            Ok(GroupLossResult {
                loss: loss / n,
                grad_pos,
                grad_negs,
            })
        }
        LossKind::Pairwise => {
            if s_negs.is_empty() {
                return Ok(GroupLossResult {
                    loss: 0.0,
                    grad_pos: vec![0.0; s_pos.len()],
                    grad_negs: Vec::new(),
                });
            }
            let n = (s_pos.len() * s_negs.len()) as f64;
            let mut loss = 0.0;
            let mut grad_pos = vec![0.0; s_pos.len()];
            let mut grad_negs = vec![0.0; s_negs.len()];
            for (i, &sp) in s_pos.iter().enumerate() {
                for (j, &sn) in s_negs.iter().enumerate() {
                    let r = pairwise_hinge(sp, sn, hinge_margin)?;
                    loss += r.loss;
                    grad_pos[i] += r.grad_pos / n;
                    grad_negs[j] += r.grad_negs[0] / n;
                }
            }
            Ok(GroupLossResult {
                loss: loss / n,
                grad_pos,
                grad_negs,
            })
        }
    }
}
