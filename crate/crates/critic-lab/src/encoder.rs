//! Siamese shared-weight feedforward encoder producing unit-norm embeddings,
//! cosine scoring, and the analytic backward pass used by the trainer.
//!
//! Layout: `hidden_layers` tanh layers followed by a linear projection to
//! `embed_dim`, then L2 normalization. All arithmetic is f64.

use std::collections::BTreeMap;
use std::path::Path;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::Page;
use crate::error::{DomainError, NumericError};

pub const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub embed_dim: usize,
    pub hidden_layers: usize,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<(), NumericError> {
        if self.input_dim == 0 || self.hidden_dim == 0 || self.embed_dim == 0 {
            return Err(NumericError::InvalidConfig("all dims must be >= 1".into()));
        }
        if self.hidden_layers == 0 {
            return Err(NumericError::InvalidConfig("hidden_layers must be >= 1".into()));
        }
        Ok(())
    }
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            input_dim: 16,
            hidden_dim: 32,
            embed_dim: 16,
            hidden_layers: 1,
        }
    }
}

/// Dense layer, row-major weights: `w[o * in_dim + i]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl LinearLayer {
    fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        for o in 0..self.out_dim {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let z: f64 = row.iter().zip(x).map(|(w, x)| w * x).sum();
            out.push(z + self.b[o]);
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub config: EncoderConfig,
    pub seed: u64,
    pub layers: Vec<LinearLayer>,
}

/// Cached activations from one forward pass, consumed by `backward`.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// Input followed by each layer's post-activation output (pre-norm last).
    activations: Vec<Vec<f64>>,
    pre_norm: Vec<f64>,
    norm: f64,
    pub embedding: Vec<f64>,
}

/// Parameter-shaped gradient accumulator.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGrads {
    pub layers: Vec<(Vec<f64>, Vec<f64>)>,
}

impl ParamGrads {
    pub fn zeros_like(params: &EncoderParams) -> ParamGrads {
        ParamGrads {
            layers: params
                .layers
                .iter()
                .map(|l| (vec![0.0; l.w.len()], vec![0.0; l.b.len()]))
                .collect(),
        }
    }

    pub fn add(&mut self, other: &ParamGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            for (x, y) in a.0.iter_mut().zip(&b.0) {
                *x += y;
            }
            for (x, y) in a.1.iter_mut().zip(&b.1) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for (w, b) in &mut self.layers {
            for x in w.iter_mut() {
                *x *= factor;
            }
            for x in b.iter_mut() {
                *x *= factor;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
            .fold(0.0, |m, v| m.max(v.abs()))
    }

    pub fn l2_norm(&self) -> f64 {
        self.layers
            .iter()
            .flat_map(|(w, b)| w.iter().chain(b.iter()))
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Glorot-uniform weights, zero biases; deterministic given seed.
pub fn init_params(config: EncoderConfig, seed: u64) -> Result<EncoderParams, NumericError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dims = vec![config.input_dim];
    for _ in 0..config.hidden_layers {
        dims.push(config.hidden_dim);
    }
    dims.push(config.embed_dim);
    let layers = dims
        .windows(2)
        .map(|d| {
            let (in_dim, out_dim) = (d[0], d[1]);
            let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
            LinearLayer {
                in_dim,
                out_dim,
                w: (0..in_dim * out_dim)
                    .map(|_| rng.gen_range(-bound..bound))
                    .collect(),
                b: vec![0.0; out_dim],
            }
        })
        .collect();
    Ok(EncoderParams {
        config,
        seed,
        layers,
    })
}

impl EncoderParams {
    /// Maps a feature vector to a unit-norm embedding, caching activations.
    pub fn encode(&self, features: &[f64]) -> Result<(Vec<f64>, ForwardTrace), NumericError> {
        if features.len() != self.config.input_dim {
            return Err(NumericError::DimMismatch {
                expected: self.config.input_dim,
                got: features.len(),
            });
        }
        if !features.iter().all(|v| v.is_finite()) {
            return Err(NumericError::NonFiniteInput("encoder features".into()));
        }
        let n_layers = self.layers.len();
        let mut activations: Vec<Vec<f64>> = Vec::with_capacity(n_layers + 1);
        activations.push(features.to_vec());
        let mut buf = Vec::new();
        for (li, layer) in self.layers.iter().enumerate() {
            layer.apply(activations.last().unwrap(), &mut buf);
            let act = if li + 1 < n_layers {
                buf.iter().map(|z| z.tanh()).collect()
            } else {
                buf.clone()
            };
            activations.push(act);
        }
        let pre_norm = activations.last().unwrap().clone();
        let norm = pre_norm.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm < NORM_FLOOR {
            return Err(NumericError::DegenerateEmbedding(norm));
        }
        let embedding: Vec<f64> = pre_norm.iter().map(|v| v / norm).collect();
        let trace = ForwardTrace {
            activations,
            pre_norm,
            norm,
            embedding: embedding.clone(),
        };
        Ok((embedding, trace))
    }

    /// Cosine of the two unit embeddings; symmetric in its arguments.
    pub fn score(&self, intent: &[f64], action: &[f64]) -> Result<f64, NumericError> {
        let (vi, _) = self.encode(intent)?;
        let (va, _) = self.encode(action)?;
        Ok(dot(&vi, &va))
    }

    /// Scores every candidate on a page, computing the intent embedding once.
    pub fn score_page(&self, page: &Page) -> Result<BTreeMap<String, f64>, NumericError> {
        let (vi, _) = self.encode(&page.instruction_features)?;
        let mut out = BTreeMap::new();
        for c in &page.candidates {
            let (va, _) = self.encode(&c.features)?;
            out.insert(c.action_id.clone(), dot(&vi, &va));
        }
        Ok(out)
    }

    /// Backpropagates `upstream` (dL/d normalized embedding) through the
    /// normalization Jacobian (I - y_hat y_hat^T)/||y|| and every layer,
    /// accumulating into `grads`.
    pub fn backward(
        &self,
        trace: &ForwardTrace,
        upstream: &[f64],
        grads: &mut ParamGrads,
    ) -> Result<(), NumericError> {
        if upstream.len() != self.config.embed_dim
            || trace.activations.len() != self.layers.len() + 1
        {
            return Err(NumericError::InvalidConfig(
                "trace/params/upstream shape mismatch".into(),
            ));
        }
        let yhat = &trace.embedding;
        let proj = dot(upstream, yhat);
        // gradient on the pre-normalization output
        let mut delta: Vec<f64> = upstream
            .iter()
            .zip(yhat)
            .map(|(g, y)| (g - proj * y) / trace.norm)
            .collect();
        debug_assert_eq!(trace.pre_norm.len(), delta.len());

        let n_layers = self.layers.len();
        for li in (0..n_layers).rev() {
            let layer = &self.layers[li];
            // tanh derivative for hidden layers; output layer is linear
            if li + 1 < n_layers {
                let act = &trace.activations[li + 1];
                for (d, a) in delta.iter_mut().zip(act) {
                    *d *= 1.0 - a * a;
                }
            }
            let input = &trace.activations[li];
            let (gw, gb) = &mut grads.layers[li];
            for o in 0..layer.out_dim {
                let d = delta[o];
                gb[o] += d;
                let row = &mut gw[o * layer.in_dim..(o + 1) * layer.in_dim];
                for (g, x) in row.iter_mut().zip(input) {
                    *g += d * x;
                }
            }
            if li > 0 {
                let mut prev = vec![0.0; layer.in_dim];
                for o in 0..layer.out_dim {
                    let d = delta[o];
                    let row = &layer.w[o * layer.in_dim..(o + 1) * layer.in_dim];
                    for (p, w) in prev.iter_mut().zip(row) {
                        *p += d * w;
                    }
                }
                delta = prev;
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<(), DomainError> {
        let text = serde_json::to_string_pretty(self).expect("checkpoint serialization");
        std::fs::write(path, text).map_err(|e| DomainError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<EncoderParams, DomainError> {
        let text = std::fs::read_to_string(path).map_err(|e| DomainError::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| DomainError::Parse {
            path: path.display().to_string(),
            line: 0,
            message: e.to_string(),
        })
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{Candidate, FunctionalLevel};

    fn small_config() -> EncoderConfig {
        EncoderConfig {
            input_dim: 4,
            hidden_dim: 8,
            embed_dim: 3,
            hidden_layers: 1,
        }
    }

    #[test]
    fn init_deterministic_and_shapes() {
        let a = init_params(small_config(), 9).unwrap();
        let b = init_params(small_config(), 9).unwrap();
        assert_eq!(a, b);
        let c = init_params(small_config(), 10).unwrap();
        assert_ne!(a, c);
        assert_eq!(a.layers.len(), 2);
        assert_eq!((a.layers[0].out_dim, a.layers[0].in_dim), (8, 4));
        assert_eq!((a.layers[1].out_dim, a.layers[1].in_dim), (3, 8));
    }

    #[test]
    fn encode_unit_norm_and_pure() {
        let params = init_params(small_config(), 1).unwrap();
        let x = [0.3, -1.2, 0.7, 2.0];
        let (e1, _) = params.encode(&x).unwrap();
        let (e2, _) = params.encode(&x).unwrap();
        assert_eq!(e1, e2);
        let norm: f64 = e1.iter().map(|v| v * v).sum::<f64>().sqrt();
        assert!((norm - 1.0).abs() < 1e-9);
    }

    #[test]
    fn encode_rejects_bad_input() {
        let params = init_params(small_config(), 1).unwrap();
        assert!(matches!(
            params.encode(&[1.0, 2.0]).unwrap_err(),
            NumericError::DimMismatch { .. }
        ));
        assert!(matches!(
            params.encode(&[1.0, f64::NAN, 0.0, 0.0]).unwrap_err(),
            NumericError::NonFiniteInput(_)
        ));
    }

    #[test]
    fn degenerate_embedding_is_error() {
        let mut params = init_params(small_config(), 1).unwrap();
        // zero out the output layer: pre-norm embedding becomes exactly zero
        let last = params.layers.last_mut().unwrap();
        last.w.iter_mut().for_each(|w| *w = 0.0);
        let err = params.encode(&[1.0, 1.0, 1.0, 1.0]).unwrap_err();
        assert!(matches!(err, NumericError::DegenerateEmbedding(_)));
    }

    #[test]
    fn score_symmetric_and_bounded() {
        let params = init_params(small_config(), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..50 {
            let a: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..4).map(|_| rng.gen_range(-2.0..2.0)).collect();
            let s1 = params.score(&a, &b).unwrap();
            let s2 = params.score(&b, &a).unwrap();
            assert_eq!(s1, s2);
            assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&s1));
            // compositional oracle: dot of the two encode outputs
            let (va, _) = params.encode(&a).unwrap();
            let (vb, _) = params.encode(&b).unwrap();
            assert_eq!(s1, dot(&va, &vb));
        }
        let same = [0.1, 0.2, 0.3, 0.4];
        assert!((params.score(&same, &same).unwrap() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn score_page_matches_per_pair_scoring() {
        let params = init_params(small_config(), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let candidates: Vec<Candidate> = (0..30)
            .map(|i| Candidate {
                action_id: format!("a{i:02}"),
                features: (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                level: FunctionalLevel::UnrelatedError,
                is_ground_truth: false,
                train_label: false,
            })
            .collect();
        let page = Page {
            page_id: "p".into(),
            instruction_features: vec![0.5, -0.5, 1.0, 0.0],
            candidates,
        };
        let scores = params.score_page(&page).unwrap();
        assert_eq!(scores.len(), 30);
        for c in &page.candidates {
            let naive = params.score(&page.instruction_features, &c.features).unwrap();
            assert_eq!(scores[&c.action_id], naive);
        }
    }

    #[test]
    fn backward_zero_upstream_gives_zero() {
        let params = init_params(small_config(), 5).unwrap();
        let (_, trace) = params.encode(&[1.0, 0.5, -0.5, 0.2]).unwrap();
        let mut grads = ParamGrads::zeros_like(&params);
        params.backward(&trace, &[0.0, 0.0, 0.0], &mut grads).unwrap();
        assert_eq!(grads.max_abs(), 0.0);
    }

    #[test]
    fn backward_accumulates_additively() {
        let params = init_params(small_config(), 5).unwrap();
        let (_, t1) = params.encode(&[1.0, 0.5, -0.5, 0.2]).unwrap();
        let (_, t2) = params.encode(&[-0.3, 0.9, 0.1, -1.1]).unwrap();
        let u1 = [0.4, -0.2, 0.7];
        let u2 = [-0.1, 0.3, 0.5];

        let mut combined = ParamGrads::zeros_like(&params);
        params.backward(&t1, &u1, &mut combined).unwrap();
        params.backward(&t2, &u2, &mut combined).unwrap();

        let mut g1 = ParamGrads::zeros_like(&params);
        params.backward(&t1, &u1, &mut g1).unwrap();
        let mut g2 = ParamGrads::zeros_like(&params);
        params.backward(&t2, &u2, &mut g2).unwrap();
        g1.add(&g2);
        for (a, b) in combined.layers.iter().zip(&g1.layers) {
            for (x, y) in a.0.iter().zip(&b.0) {
                assert!((x - y).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn checkpoint_round_trip_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.json");
        let params = init_params(small_config(), 77).unwrap();
        params.save(&path).unwrap();
        let loaded = EncoderParams::load(&path).unwrap();
        assert_eq!(params, loaded);
        let x = [0.25, -0.75, 1.5, 0.125];
        let y = [1.0, 0.0, -1.0, 0.5];
        assert_eq!(
            params.score(&x, &y).unwrap().to_bits(),
            loaded.score(&x, &y).unwrap().to_bits()
        );
    }
}
