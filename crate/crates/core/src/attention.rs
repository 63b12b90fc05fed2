//! Channel-weight generation: center crop, global average pool, two fully
//! connected layers with a ReLU between them, sigmoid, plus a scalar bias.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result, WeightStoreError};
use crate::features::WeightStore;
use crate::imaging::{crop_center, Tensor3};

/// Attention MLP parameters. `w1` is `hidden × channels`, `w2` is
/// `channels × hidden`, both row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionParams {
    pub channels: usize,
    pub hidden: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub beta: f64,
}

/// Hidden width for `channels` inputs: `max(channels / 2, 4)`.
pub fn hidden_width(channels: usize) -> usize {
    (channels / 2).max(4)
}

/// Initial sigmoid bias: with a near-zero MLP every weight starts near 1.
pub const INITIAL_BETA: f64 = 0.5;

impl AttentionParams {
    /// All weights and biases zero.
    pub fn zeros(channels: usize, beta: f64) -> Self {
        let hidden = hidden_width(channels);
        Self {
            channels,
            hidden,
            w1: vec![0.0; hidden * channels],
            b1: vec![0.0; hidden],
            w2: vec![0.0; channels * hidden],
            b2: vec![0.0; channels],
            beta,
        }
    }

    /// Small Gaussian weights (std `0.01`), zero biases, `beta = 0.5`, so the
    /// layer starts near the identity weighting while gradients still flow.
    pub fn init(channels: usize, seed: u64) -> Self {
        let mut p = Self::zeros(channels, INITIAL_BETA);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 0.01).expect("valid std");
        p.w1.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        p.w2.iter_mut().for_each(|v| *v = normal.sample(&mut rng));
        p
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len() + 1
    }

    /// Parameters in the order `w1, b1, w2, b2, beta`.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        v.extend_from_slice(&self.w1);
        v.extend_from_slice(&self.b1);
        v.extend_from_slice(&self.w2);
        v.extend_from_slice(&self.b2);
        v.push(self.beta);
        v
    }

    pub fn assign(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "attention parameter count");
        let mut rest = flat;
        for dst in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            let (head, tail) = rest.split_at(dst.len());
            dst.copy_from_slice(head);
            rest = tail;
        }
        self.beta = rest[0];
    }

    pub fn to_store(&self, prefix: &str, store: &mut WeightStore) -> Result<()> {
        let (c, h) = (self.channels, self.hidden);
        store.insert_f64(format!("{prefix}.w1"), vec![h, c], &self.w1)?;
        store.insert_f64(format!("{prefix}.b1"), vec![h], &self.b1)?;
        store.insert_f64(format!("{prefix}.w2"), vec![c, h], &self.w2)?;
        store.insert_f64(format!("{prefix}.b2"), vec![c], &self.b2)?;
        store.insert_f64(format!("{prefix}.beta"), vec![1], &[self.beta])?;
        Ok(())
    }

    pub fn from_store(store: &WeightStore, prefix: &str, channels: usize) -> Result<Self, WeightStoreError> {
        let h = hidden_width(channels);
        Ok(Self {
            channels,
            hidden: h,
            w1: store.get_f64(&format!("{prefix}.w1"), &[h, channels])?,
            b1: store.get_f64(&format!("{prefix}.b1"), &[h])?,
            w2: store.get_f64(&format!("{prefix}.w2"), &[channels, h])?,
            b2: store.get_f64(&format!("{prefix}.b2"), &[channels])?,
            beta: store.get_f64(&format!("{prefix}.beta"), &[1])?[0],
        })
    }
}

/// Per-channel template weights.
#[derive(Debug, Clone, PartialEq)]
pub struct ChannelWeights(pub Vec<f64>);

impl ChannelWeights {
    pub fn ones(channels: usize) -> Self {
        Self(vec![1.0; channels])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    /// `(1 - eta)·self + eta·other`.
    pub fn blend(&self, other: &ChannelWeights, eta: f64) -> Self {
        Self(
            self.0
                .iter()
                .zip(&other.0)
                .map(|(a, b)| (1.0 - eta) * a + eta * b)
                .collect(),
        )
    }
}

/// Per-channel means of the centered `ceil(H/2) × ceil(W/2)` window.
pub fn pooled_features(feat: &Tensor3) -> Result<Vec<f64>> {
    let crop = crop_center(feat, feat.height().div_ceil(2), feat.width().div_ceil(2))?;
    Ok(crop.channel_means())
}

/// Intermediate values of one MLP evaluation, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct AttentionTrace {
    pub pooled: Vec<f64>,
    pub hidden_pre: Vec<f64>,
    pub hidden: Vec<f64>,
    pub sigmoid: Vec<f64>,
}

fn check_channels(params: &AttentionParams, c: usize) -> Result<()> {
    if params.channels != c {
        return Err(Error::Shape(format!(
            "attention built for {} channels, feature has {c}",
            params.channels
        )));
    }
    Ok(())
}

/// Evaluates the MLP on an already pooled vector.
pub fn weights_from_pooled(pooled: &[f64], params: &AttentionParams) -> Result<(ChannelWeights, AttentionTrace)> {
    check_channels(params, pooled.len())?;
    let (c, h) = (params.channels, params.hidden);
    let hidden_pre: Vec<f64> = (0..h)
        .map(|j| params.b1[j] + (0..c).map(|i| params.w1[j * c + i] * pooled[i]).sum::<f64>())
        .collect();
    let hidden: Vec<f64> = hidden_pre.iter().map(|v| v.max(0.0)).collect();
    let sigmoid: Vec<f64> = (0..c)
        .map(|i| {
            let o = params.b2[i] + (0..h).map(|j| params.w2[i * h + j] * hidden[j]).sum::<f64>();
            sigmoid(o)
        })
        .collect();
    let weights = ChannelWeights(sigmoid.iter().map(|s| s + params.beta).collect());
    Ok((
        weights,
        AttentionTrace {
            pooled: pooled.to_vec(),
            hidden_pre,
            hidden,
            sigmoid,
        },
    ))
}

/// Gradient of a loss with respect to every attention parameter, given its
/// gradient with respect to the produced channel weights. Returned in the
/// layout of [`AttentionParams`].
pub fn attention_backward(trace: &AttentionTrace, params: &AttentionParams, grad_weights: &[f64]) -> AttentionParams {
    let (c, h) = (params.channels, params.hidden);
    let mut g = AttentionParams::zeros(c, 0.0);
    g.beta = grad_weights.iter().sum();
    let d_out: Vec<f64> = grad_weights
        .iter()
        .zip(&trace.sigmoid)
        .map(|(gw, s)| gw * s * (1.0 - s))
        .collect();
    let mut d_hidden = vec![0.0; h];
    for i in 0..c {
        g.b2[i] = d_out[i];
        for j in 0..h {
            g.w2[i * h + j] = d_out[i] * trace.hidden[j];
            d_hidden[j] += params.w2[i * h + j] * d_out[i];
        }
    }
    for j in 0..h {
        let d_pre = if trace.hidden_pre[j] > 0.0 { d_hidden[j] } else { 0.0 };
        g.b1[j] = d_pre;
        for i in 0..c {
            g.w1[j * c + i] = d_pre * trace.pooled[i];
        }
    }
    g
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Channel weights for a target-region feature volume.
pub fn channel_weights(feat: &Tensor3, params: &AttentionParams) -> Result<ChannelWeights> {
    check_channels(params, feat.channels())?;
    weights_from_pooled(&pooled_features(feat)?, params).map(|(w, _)| w)
}

/// Channel-wise broadcast multiply.
pub fn apply_channel_weights(template: &Tensor3, weights: &ChannelWeights) -> Result<Tensor3> {
    let c = template.channels();
    if weights.len() != c {
        return Err(Error::Shape(format!(
            "{} channel weights for a {c}-channel template",
            weights.len()
        )));
    }
    let mut out = template.clone();
    for px in out.data_mut().chunks_exact_mut(c) {
        for (v, w) in px.iter_mut().zip(&weights.0) {
            *v *= w;
        }
    }
    Ok(out)
}
