//! Synthetic differentiable stand-in for a pruned vision-language model.
//!
//! Each layer owns `N_v` visual tokens with an importance score and a value
//! vector over `C` classes. The reference logits sum, over layers, the
//! softmax(score)-weighted token values; the pruned logits weight every term
//! by the token's mask. The distillation loss is
//! `KL(softmax(pruned) || softmax(reference))`.
//!
//! Values are built so that high-score tokens carry a coherent per-layer class
//! direction scaled by a per-layer importance, while low-score tokens carry
//! mostly noise. Layers therefore differ in how much pruning them hurts.

use serde::{Deserialize, Serialize};

use crate::cost_model::RetentionProfile;
use crate::error::{invalid, Error, Result};
use crate::relaxation::{
    build_masks, soft_threshold, soft_threshold_grad, ste_backward, MaskTriple, RelaxationConfig,
    TokenScores,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyModelSpec {
    pub seed: u64,
    pub num_layers: usize,
    pub n_visual: usize,
    pub num_classes: usize,
    /// Width of the score distribution around 0.5, in `[0, 1]`.
    pub score_spread: f64,
}

impl ToyModelSpec {
    pub fn new(seed: u64, num_layers: usize, n_visual: usize, num_classes: usize) -> Self {
        Self {
            seed,
            num_layers,
            n_visual,
            num_classes,
            score_spread: 1.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers == 0 {
            return Err(invalid("num_layers", "must be >= 1"));
        }
        if self.n_visual == 0 {
            return Err(invalid("n_visual", "must be >= 1"));
        }
        if self.num_classes < 2 {
            return Err(invalid("num_classes", "must be >= 2"));
        }
        if !(0.0..=1.0).contains(&self.score_spread) {
            return Err(invalid(
                "score_spread",
                format!("must lie in [0, 1], got {}", self.score_spread),
            ));
        }
        Ok(())
    }
}

/// Forward-pass mask semantics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// Hard masks forward, sigmoid surrogate backward.
    HardSte,
    /// Sigmoid masks in both directions.
    Soft,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitPair {
    pub reference: Vec<f64>,
    pub pruned: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerData {
    pub scores: TokenScores,
    /// `values[j][c]` for sorted token `j`.
    pub values: Vec<Vec<f64>>,
    #[serde(skip)]
    attention: Vec<f64>,
}

impl LayerData {
    fn new(scores: TokenScores, values: Vec<Vec<f64>>) -> Self {
        let attention = softmax(scores.as_slice());
        Self {
            scores,
            values,
            attention,
        }
    }

    /// Softmax-normalized scores of this layer.
    pub fn attention(&self) -> &[f64] {
        &self.attention
    }
}

/// An immutable generated instance.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyInstance {
    spec: ToyModelSpec,
    layers: Vec<LayerData>,
    reference: Vec<f64>,
}

/// Serialized form of an instance (`seed`, dimensions, scores and values).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceFixture {
    pub seed: u64,
    pub num_layers: usize,
    pub n_visual: usize,
    pub num_classes: usize,
    pub score_spread: f64,
    pub layers: Vec<FixtureLayer>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureLayer {
    pub scores: Vec<f64>,
    pub values: Vec<Vec<f64>>,
}

const STREAM_SCORE: u64 = 0;
const STREAM_IMPORTANCE: u64 = 1;
const STREAM_DIRECTION: u64 = 2;
const STREAM_NOISE: u64 = 3;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Counter-based uniform draw in the open interval (0, 1).
pub fn counter_uniform(seed: u64, stream: u64, layer: u64, index: u64) -> f64 {
    let h = splitmix(splitmix(splitmix(splitmix(seed) ^ stream) ^ layer) ^ index);
    ((h >> 11) as f64 + 0.5) / (1u64 << 53) as f64
}

impl ToyInstance {
    pub fn generate(spec: ToyModelSpec) -> Result<Self> {
        spec.validate()?;
        let c = spec.num_classes;
        let mut layers = Vec::with_capacity(spec.num_layers);
        for layer in 0..spec.num_layers as u64 {
            let raw: Vec<f64> = (0..spec.n_visual as u64)
                .map(|t| {
                    let u = counter_uniform(spec.seed, STREAM_SCORE, layer, t);
                    0.5 + spec.score_spread * (u - 0.5)
                })
                .collect();
            let scores = TokenScores::new(raw)?;
            let importance = counter_uniform(spec.seed, STREAM_IMPORTANCE, layer, 0);
            let direction: Vec<f64> = (0..c as u64)
                .map(|k| 2.0 * counter_uniform(spec.seed, STREAM_DIRECTION, layer, k) - 1.0)
                .collect();
            let values = scores
                .as_slice()
                .iter()
                .enumerate()
                .map(|(j, &s)| {
                    (0..c)
                        .map(|k| {
                            let noise = 2.0
                                * counter_uniform(spec.seed, STREAM_NOISE, layer, (j * c + k) as u64)
                                - 1.0;
                            s * importance * direction[k] + (1.0 - s) * noise
                        })
                        .collect()
                })
                .collect();
            layers.push(LayerData::new(scores, values));
        }
        Ok(Self::assemble(spec, layers))
    }

    fn assemble(spec: ToyModelSpec, layers: Vec<LayerData>) -> Self {
        let mut reference = vec![0.0; spec.num_classes];
        for layer in &layers {
            accumulate(&mut reference, layer, |_| 1.0);
        }
        Self {
            spec,
            layers,
            reference,
        }
    }

    pub fn spec(&self) -> &ToyModelSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[LayerData] {
        &self.layers
    }

    pub fn num_layers(&self) -> usize {
        self.spec.num_layers
    }

    pub fn n_visual(&self) -> usize {
        self.spec.n_visual
    }

    pub fn reference_logits(&self) -> &[f64] {
        &self.reference
    }

    /// Soft threshold and masks of every layer for `profile`.
    pub fn layer_masks(
        &self,
        profile: &RetentionProfile,
        config: &RelaxationConfig,
    ) -> Result<Vec<(f64, MaskTriple)>> {
        self.check_profile(profile)?;
        let nv = self.spec.n_visual as f64;
        self.layers
            .iter()
            .zip(profile.ratios())
            .map(|(layer, &r)| {
                let tau = soft_threshold(&layer.scores, r * nv, config)?;
                Ok((tau, build_masks(&layer.scores, tau, config)))
            })
            .collect()
    }

    pub fn forward(
        &self,
        profile: &RetentionProfile,
        config: &RelaxationConfig,
        mode: MaskMode,
    ) -> Result<LogitPair> {
        let masks = self.layer_masks(profile, config)?;
        Ok(self.forward_with_masks(&masks, mode))
    }

    fn forward_with_masks(&self, masks: &[(f64, MaskTriple)], mode: MaskMode) -> LogitPair {
        let mut pruned = vec![0.0; self.spec.num_classes];
        for (layer, (_, m)) in self.layers.iter().zip(masks) {
            let weights = match mode {
                MaskMode::HardSte => &m.ste,
                MaskMode::Soft => &m.soft,
            };
            accumulate(&mut pruned, layer, |j| weights[j]);
        }
        LogitPair {
            reference: self.reference.clone(),
            pruned,
        }
    }

    /// Keeps exactly the top `counts[i]` tokens of each layer.
    pub fn forward_counts(&self, counts: &[usize]) -> Result<LogitPair> {
        if counts.len() != self.spec.num_layers {
            return Err(Error::LengthMismatch {
                expected: self.spec.num_layers,
                actual: counts.len(),
            });
        }
        let mut pruned = vec![0.0; self.spec.num_classes];
        for (layer, &k) in self.layers.iter().zip(counts) {
            accumulate(&mut pruned, layer, |j| if j < k { 1.0 } else { 0.0 });
        }
        Ok(LogitPair {
            reference: self.reference.clone(),
            pruned,
        })
    }

    /// Loss and `dL/dr_i` through the straight-through / relaxation chain.
    pub fn loss_grad_wrt_profile(
        &self,
        profile: &RetentionProfile,
        config: &RelaxationConfig,
        mode: MaskMode,
    ) -> Result<(f64, Vec<f64>)> {
        let masks = self.layer_masks(profile, config)?;
        let pair = self.forward_with_masks(&masks, mode);
        let loss = distill_loss(&pair);
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("distillation loss {loss}")));
        }
        let dlogits = distill_loss_grad(&pair);
        let nv = self.spec.n_visual;
        let mut grad = Vec::with_capacity(self.spec.num_layers);
        for ((layer, (_, m)), &r) in self.layers.iter().zip(&masks).zip(profile.ratios()) {
            let upstream = mask_upstream(layer, &dlogits);
            let d_tau = ste_backward(&upstream, m, config)?;
            let tau_r = soft_threshold_grad(&layer.scores, r * nv as f64, config, nv)?;
            grad.push(d_tau * tau_r);
        }
        Ok((loss, grad))
    }

    pub fn to_fixture(&self) -> InstanceFixture {
        InstanceFixture {
            seed: self.spec.seed,
            num_layers: self.spec.num_layers,
            n_visual: self.spec.n_visual,
            num_classes: self.spec.num_classes,
            score_spread: self.spec.score_spread,
            layers: self
                .layers
                .iter()
                .map(|l| FixtureLayer {
                    scores: l.scores.as_slice().to_vec(),
                    values: l.values.clone(),
                })
                .collect(),
        }
    }

    pub fn from_fixture(fixture: &InstanceFixture) -> Result<Self> {
        let spec = ToyModelSpec {
            seed: fixture.seed,
            num_layers: fixture.num_layers,
            n_visual: fixture.n_visual,
            num_classes: fixture.num_classes,
            score_spread: fixture.score_spread,
        };
        spec.validate()?;
        if fixture.layers.len() != spec.num_layers {
            return Err(Error::LengthMismatch {
                expected: spec.num_layers,
                actual: fixture.layers.len(),
            });
        }
        let mut layers = Vec::with_capacity(spec.num_layers);
        for l in &fixture.layers {
            if l.scores.len() != spec.n_visual || l.values.len() != spec.n_visual {
                return Err(Error::Format("fixture layer has wrong token count".into()));
            }
            if l.values.iter().any(|v| v.len() != spec.num_classes) {
                return Err(Error::Format("fixture value vector has wrong class count".into()));
            }
            if l.scores.windows(2).any(|w| w[0] < w[1]) {
                return Err(Error::Format("fixture scores are not sorted descending".into()));
            }
            layers.push(LayerData::new(TokenScores::new(l.scores.clone())?, l.values.clone()));
        }
        Ok(Self::assemble(spec, layers))
    }

    fn check_profile(&self, profile: &RetentionProfile) -> Result<()> {
        if profile.len() != self.spec.num_layers {
            return Err(Error::LengthMismatch {
                expected: self.spec.num_layers,
                actual: profile.len(),
            });
        }
        Ok(())
    }
}

fn accumulate(out: &mut [f64], layer: &LayerData, mask: impl Fn(usize) -> f64) {
    for (j, (a, v)) in layer.attention.iter().zip(&layer.values).enumerate() {
        let w = mask(j) * a;
        for (o, x) in out.iter_mut().zip(v) {
            *o += w * x;
        }
    }
}

/// `dL/dm_j = a_j <dL/dl_hat, v_j>` for one layer.
pub fn mask_upstream(layer: &LayerData, dlogits: &[f64]) -> Vec<f64> {
    layer
        .attention
        .iter()
        .zip(&layer.values)
        .map(|(a, v)| a * v.iter().zip(dlogits).map(|(x, g)| x * g).sum::<f64>())
        .collect()
}

pub fn softmax(x: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(x);
    x.iter().map(|v| (v - lse).exp()).collect()
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `KL(softmax(pruned) || softmax(reference))`.
pub fn distill_loss(pair: &LogitPair) -> f64 {
    let lp = log_sum_exp(&pair.pruned);
    let lr = log_sum_exp(&pair.reference);
    let kl: f64 = pair
        .pruned
        .iter()
        .zip(&pair.reference)
        .map(|(&a, &b)| {
            let log_p_hat = a - lp;
            let log_p = b - lr;
            log_p_hat.exp() * (log_p_hat - log_p)
        })
        .sum();
    kl.max(0.0)
}

/// Gradient of [`distill_loss`] with respect to the pruned logits:
/// `p_hat_c ((log p_hat_c - log p_c) - KL)`.
pub fn distill_loss_grad(pair: &LogitPair) -> Vec<f64> {
    let lp = log_sum_exp(&pair.pruned);
    let lr = log_sum_exp(&pair.reference);
    let terms: Vec<(f64, f64)> = pair
        .pruned
        .iter()
        .zip(&pair.reference)
        .map(|(&a, &b)| {
            let log_p_hat = a - lp;
            ((log_p_hat).exp(), log_p_hat - (b - lr))
        })
        .collect();
    let kl: f64 = terms.iter().map(|(p, g)| p * g).sum();
    terms.iter().map(|(p, g)| p * (g - kl)).collect()
}
