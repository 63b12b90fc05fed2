//! Desk-scale training of the fusion and attention parameters.
//!
//! Feature extractors stay frozen, so each sample pair is reduced once to its
//! per-channel correlation planes and pooled attention inputs. Branch response
//! `d` is then `Σ_k a_{d,k} · r_{d,k}`, linear in the channel weights, and the
//! whole objective is cheap to evaluate and differentiate.

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::attention::{attention_backward, pooled_features, weights_from_pooled, AttentionParams};
use crate::error::{Error, Result};
use crate::fusion::{fuse_backward, fuse_responses, FusionParams, ResponseMap};
use crate::imaging::{extract_search_region, BoundingBox, Tensor3};
use crate::spectral::{center_index, channel_correlations, CfConfig, Plane};
use crate::tracker::{solve_template, Extractor, TrackerModels};
use crate::{PATCH_SIDE, RESPONSE_SIDE};

/// ±1 plane: +1 where the cell center lies within `radius` of the map center.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    plane: Plane,
    radius: f64,
}

impl LabelMap {
    pub fn plane(&self) -> &Plane {
        &self.plane
    }

    pub fn radius(&self) -> f64 {
        self.radius
    }

    pub fn positives(&self) -> usize {
        self.plane.data().iter().filter(|v| **v > 0.0).count()
    }
}

pub fn make_label_map(size: usize, radius: f64) -> Result<LabelMap> {
    if size % 2 == 0 {
        return Err(Error::Argument(format!("label map size must be odd, got {size}")));
    }
    if !(radius >= 0.0) {
        return Err(Error::Argument(format!("label radius must be >= 0, got {radius}")));
    }
    let c = center_index(size) as f64;
    let plane = Plane::from_fn(size, size, |r, col| {
        let d = ((r as f64 - c).powi(2) + (col as f64 - c).powi(2)).sqrt();
        if d <= radius {
            1.0
        } else {
            -1.0
        }
    });
    Ok(LabelMap { plane, radius })
}

/// `log(1 + exp(-x))` without overflow.
#[inline]
fn softplus_neg(x: f64) -> f64 {
    (-x).max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Per-cell weights: uniform `1/N`, or with balancing `1/(2·n_pos)` and
/// `1/(2·n_neg)` so both classes carry half the mass. A map with only one
/// class falls back to uniform.
fn cell_weights(label: &LabelMap, balance: bool) -> Vec<f64> {
    let n = label.plane.data().len();
    let pos = label.positives();
    let neg = n - pos;
    if !balance || pos == 0 || neg == 0 {
        return vec![1.0 / n as f64; n];
    }
    let (wp, wn) = (0.5 / pos as f64, 0.5 / neg as f64);
    label
        .plane
        .data()
        .iter()
        .map(|l| if *l > 0.0 { wp } else { wn })
        .collect()
}

/// Weighted mean of `log(1 + exp(-L·v))` and its gradient with respect to `v`.
pub fn logistic_loss(response: &ResponseMap, label: &LabelMap, balance: bool) -> Result<(f64, Plane)> {
    if response.dims() != label.plane.dims() {
        return Err(Error::Shape(format!(
            "response {:?} vs label {:?}",
            response.dims(),
            label.plane.dims()
        )));
    }
    let weights = cell_weights(label, balance);
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(weights.len());
    for ((v, l), w) in response.data().iter().zip(label.plane.data()).zip(&weights) {
        let m = l * v;
        loss += w * softplus_neg(m);
        grad.push(-l * crate::attention::sigmoid(-m) * w);
    }
    let (h, wd) = response.dims();
    Ok((loss, Plane::new(h, wd, grad)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr0: f64,
    /// Multiplicative decay per epoch up to `decay_epochs`, flat afterwards.
    pub decay: f64,
    pub decay_epochs: usize,
    pub batch_size: usize,
    pub momentum: f64,
    pub positive_radius: f64,
    pub balance: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 100,
            lr0: 0.01,
            decay: 0.9,
            decay_epochs: 50,
            batch_size: 8,
            momentum: 0.9,
            positive_radius: 2.0,
            balance: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr0 >= 0.0 && self.lr0.is_finite()) {
            return Err(Error::Config(format!("lr0 must be non-negative, got {}", self.lr0)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay must lie in (0, 1], got {}", self.decay)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        Ok(())
    }
}

/// `lr0 · decay^(min(e, decay_epochs) - 1)` for 1-based epoch `e`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch == 0 || epoch > cfg.epochs {
        return Err(Error::Argument(format!(
            "epoch {epoch} outside 1..={}",
            cfg.epochs
        )));
    }
    let e = epoch.min(cfg.decay_epochs.max(1));
    Ok(cfg.lr0 * cfg.decay.powi(e as i32 - 1))
}

/// Target patch, search patch and label of one training example.
#[derive(Debug, Clone)]
pub struct SamplePair {
    pub target: Tensor3,
    pub search: Tensor3,
    pub label: LabelMap,
}

/// A pair reduced to what the trainable parameters see.
#[derive(Debug, Clone)]
pub struct PreparedSample {
    /// `[branch][channel]` correlation of the cropped filter channel with the
    /// search feature channel.
    pub channel_responses: Vec<Vec<Plane>>,
    /// `[branch]` pooled attention input from the target features.
    pub pooled: Vec<Vec<f64>>,
    pub label: LabelMap,
}

/// The trainable parameter set.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionModel {
    pub fusion: FusionParams,
    pub attention: Vec<AttentionParams>,
}

impl FusionModel {
    pub fn from_models(models: &TrackerModels) -> Self {
        Self {
            fusion: models.fusion.clone(),
            attention: models.branches.iter().map(|b| b.attention.clone()).collect(),
        }
    }

    pub fn num_params(&self) -> usize {
        self.fusion.num_params() + self.attention.iter().map(|a| a.num_params()).sum::<usize>()
    }

    /// Fusion parameters first, then each branch's attention parameters.
    pub fn flatten(&self) -> Vec<f64> {
        let mut v = self.fusion.flatten();
        for a in &self.attention {
            v.extend(a.flatten());
        }
        v
    }

    pub fn assign(&mut self, flat: &[f64]) {
        assert_eq!(flat.len(), self.num_params(), "model parameter count");
        let (head, mut rest) = flat.split_at(self.fusion.num_params());
        self.fusion.assign(head);
        for a in &mut self.attention {
            let (h, t) = rest.split_at(a.num_params());
            a.assign(h);
            rest = t;
        }
    }

    /// Offsets into [`Self::flatten`] of named parameters, for reporting.
    pub fn layout(&self) -> ParamLayout {
        let kernel_taps = self.fusion.kernels.iter().map(|k| k.data().len()).collect::<Vec<_>>();
        let taps: usize = kernel_taps.iter().sum();
        let mut attention = Vec::new();
        let mut off = self.fusion.num_params();
        for a in &self.attention {
            attention.push(off);
            off += a.num_params();
        }
        ParamLayout {
            kernel_starts: kernel_taps
                .iter()
                .scan(0, |acc, n| {
                    let s = *acc;
                    *acc += n;
                    Some(s)
                })
                .collect(),
            scale: taps,
            bias: taps + 1,
            attention,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ParamLayout {
    pub kernel_starts: Vec<usize>,
    pub scale: usize,
    pub bias: usize,
    /// Offset of each branch's first attention parameter (`w1[0]`).
    pub attention: Vec<usize>,
}

fn check_sample(sample: &PreparedSample, model: &FusionModel) -> Result<()> {
    if sample.channel_responses.len() != model.attention.len() || sample.pooled.len() != model.attention.len() {
        return Err(Error::Shape(format!(
            "sample has {} branches, model has {}",
            sample.channel_responses.len(),
            model.attention.len()
        )));
    }
    Ok(())
}

/// Fused response of one prepared sample.
pub fn sample_response(sample: &PreparedSample, model: &FusionModel) -> Result<ResponseMap> {
    check_sample(sample, model)?;
    let maps = branch_maps(sample, model)?.into_iter().map(|(g, _, _)| g).collect::<Vec<_>>();
    fuse_responses(&maps, &model.fusion)
}

type BranchEval = (Plane, crate::attention::ChannelWeights, crate::attention::AttentionTrace);

fn branch_maps(sample: &PreparedSample, model: &FusionModel) -> Result<Vec<BranchEval>> {
    sample
        .channel_responses
        .iter()
        .zip(&sample.pooled)
        .zip(&model.attention)
        .map(|((responses, pooled), att)| {
            if responses.len() != att.channels {
                return Err(Error::Shape(format!(
                    "{} channel responses for {} attention channels",
                    responses.len(),
                    att.channels
                )));
            }
            let (weights, trace) = weights_from_pooled(pooled, att)?;
            let (h, w) = responses[0].dims();
            let mut g = Plane::zeros(h, w);
            for (r, a) in responses.iter().zip(weights.as_slice()) {
                for (acc, v) in g.data_mut().iter_mut().zip(r.data()) {
                    *acc += a * v;
                }
            }
            Ok((g, weights, trace))
        })
        .collect()
}

/// Loss of one sample and its gradient in [`FusionModel::flatten`] layout.
pub fn sample_loss_and_grad(sample: &PreparedSample, model: &FusionModel, balance: bool) -> Result<(f64, Vec<f64>)> {
    check_sample(sample, model)?;
    let evals = branch_maps(sample, model)?;
    let maps: Vec<Plane> = evals.iter().map(|(g, _, _)| g.clone()).collect();
    let fused = fuse_responses(&maps, &model.fusion)?;
    let (loss, d_fused) = logistic_loss(&fused, &sample.label, balance)?;
    let (d_fusion, d_maps) = fuse_backward(&maps, &model.fusion, &d_fused)?;

    let mut grad = d_fusion.flatten();
    for (((_, _, trace), att), (responses, dg)) in evals
        .iter()
        .zip(&model.attention)
        .zip(sample.channel_responses.iter().zip(&d_maps))
    {
        let d_weights: Vec<f64> = responses
            .iter()
            .map(|r| r.data().iter().zip(dg.data()).map(|(a, b)| a * b).sum())
            .collect();
        grad.extend(attention_backward(trace, att, &d_weights).flatten());
    }
    Ok((loss, grad))
}

/// Mean over samples of per-sample loss, with the matching mean gradient.
pub fn batch_loss_and_grad(samples: &[&PreparedSample], model: &FusionModel, balance: bool) -> Result<(f64, Vec<f64>)> {
    if samples.is_empty() {
        return Err(Error::Argument("empty batch".into()));
    }
    let mut total = 0.0;
    let mut grad = vec![0.0; model.num_params()];
    for s in samples {
        let (l, g) = sample_loss_and_grad(s, model, balance)?;
        total += l;
        grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
    }
    let n = samples.len() as f64;
    grad.iter_mut().for_each(|g| *g /= n);
    Ok((total / n, grad))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub mean_loss: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: FusionModel,
    pub trace: Vec<EpochRecord>,
}

impl TrainOutcome {
    /// `epoch,lr,mean_loss` rows with a header.
    pub fn trace_csv(&self) -> String {
        let mut s = String::from("epoch,lr,mean_loss\n");
        for r in &self.trace {
            s.push_str(&format!("{},{},{}\n", r.epoch, r.lr, r.mean_loss));
        }
        s
    }
}

/// Minibatch SGD with momentum over prepared samples. Each epoch visits every
/// sample once in a seeded random order; the trace holds the mean batch loss.
pub fn train_prepared(samples: &[PreparedSample], cfg: &TrainConfig, init: FusionModel) -> Result<TrainOutcome> {
    cfg.validate()?;
    if samples.is_empty() {
        return Err(Error::Argument("training set is empty".into()));
    }
    let mut model = init;
    let mut params = model.flatten();
    let mut velocity = vec![0.0; params.len()];
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut trace = Vec::with_capacity(cfg.epochs);

    for epoch in 1..=cfg.epochs {
        let lr = lr_schedule(epoch, cfg)?;
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PreparedSample> = chunk.iter().map(|i| &samples[*i]).collect();
            let (loss, grad) = batch_loss_and_grad(&batch, &model, cfg.balance)?;
            epoch_loss += loss;
            batches += 1;
            for ((p, v), g) in params.iter_mut().zip(&mut velocity).zip(&grad) {
                *v = cfg.momentum * *v - lr * g;
                *p += *v;
            }
            model.assign(&params);
        }
        trace.push(EpochRecord {
            epoch,
            lr,
            mean_loss: epoch_loss / batches as f64,
        });
    }
    Ok(TrainOutcome { model, trace })
}

/// Reduces a pair to per-channel correlation planes under frozen extractors.
pub fn prepare_pair(pair: &SamplePair, extractors: &[Arc<Extractor>], cf: &CfConfig) -> Result<PreparedSample> {
    let mut channel_responses = Vec::with_capacity(extractors.len());
    let mut pooled = Vec::with_capacity(extractors.len());
    for ex in extractors {
        let target_feat = ex.extract(&pair.target)?;
        let template = solve_template(&target_feat, cf)?;
        let search_feat = ex.extract(&pair.search)?;
        let responses = channel_correlations(&template, &search_feat)?;
        if responses[0].dims() != pair.label.plane.dims() {
            return Err(Error::Shape(format!(
                "{} response {:?} does not match label {:?}",
                ex.kind().name(),
                responses[0].dims(),
                pair.label.plane.dims()
            )));
        }
        channel_responses.push(responses);
        pooled.push(pooled_features(&target_feat)?);
    }
    Ok(PreparedSample {
        channel_responses,
        pooled,
        label: pair.label.clone(),
    })
}

/// Trains fusion kernels, scale, bias and every branch's attention layer on
/// `pairs`, starting from the parameters in `models`.
pub fn train_fusion(pairs: &[SamplePair], cfg: &TrainConfig, models: &TrackerModels, cf: &CfConfig) -> Result<TrainOutcome> {
    if pairs.is_empty() {
        return Err(Error::Argument("no training pairs".into()));
    }
    models.validate()?;
    let extractors: Vec<Arc<Extractor>> = models.branches.iter().map(|b| b.extractor.clone()).collect();
    let samples = prepare_all(pairs, &extractors, cf)?;
    train_prepared(&samples, cfg, FusionModel::from_models(models))
}

pub fn prepare_all(pairs: &[SamplePair], extractors: &[Arc<Extractor>], cf: &CfConfig) -> Result<Vec<PreparedSample>> {
    use rayon::prelude::*;
    pairs.par_iter().map(|p| prepare_pair(p, extractors, cf)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetShape {
    Square,
    Ellipse,
}

/// Synthetic sequence kinematics and appearance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MotionSpec {
    pub frame_width: usize,
    pub frame_height: usize,
    pub start: (f64, f64),
    pub size: (f64, f64),
    /// Pixels per frame.
    pub velocity: (f64, f64),
    /// Multiplicative size change per frame.
    pub scale_drift: f64,
    /// Standard deviation of per-frame Gaussian pixel noise.
    pub noise_sigma: f64,
    pub background: f64,
    pub shape: TargetShape,
    /// Texture cells per target side.
    pub texture_cells: usize,
}

impl Default for MotionSpec {
    fn default() -> Self {
        Self {
            frame_width: 320,
            frame_height: 240,
            start: (60.0, 120.0),
            size: (40.0, 40.0),
            velocity: (2.0, 0.0),
            scale_drift: 1.0,
            noise_sigma: 4.0,
            background: 110.0,
            shape: TargetShape::Square,
            texture_cells: 6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSequence {
    pub frames: Vec<Tensor3>,
    pub boxes: Vec<BoundingBox>,
}

/// Deterministic RGB sequence of a textured target moving over a noisy
/// background, with exact groundtruth boxes.
pub fn synth_sequence(seed: u64, frames: usize, motion: &MotionSpec) -> Result<SyntheticSequence> {
    if frames < 2 {
        return Err(Error::Argument(format!("need at least 2 frames, got {frames}")));
    }
    if motion.frame_width == 0 || motion.frame_height == 0 || motion.texture_cells == 0 {
        return Err(Error::Argument("empty frame or texture".into()));
    }
    if !(motion.scale_drift > 0.0) {
        return Err(Error::Argument("scale drift must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cells = motion.texture_cells;
    let texture: Vec<[f64; 3]> = (0..cells * cells)
        .map(|_| {
            [
                rng.random_range(0.0..255.0),
                rng.random_range(0.0..255.0),
                rng.random_range(0.0..255.0),
            ]
        })
        .collect();
    let noise = Normal::new(0.0, motion.noise_sigma.max(0.0)).map_err(|e| Error::Argument(e.to_string()))?;

    let mut out_frames = Vec::with_capacity(frames);
    let mut boxes = Vec::with_capacity(frames);
    for t in 0..frames {
        let ft = t as f64;
        let s = motion.scale_drift.powi(t as i32);
        let bbox = BoundingBox::new(
            motion.start.0 + ft * motion.velocity.0,
            motion.start.1 + ft * motion.velocity.1,
            motion.size.0 * s,
            motion.size.1 * s,
        )?;
        let mut frame_rng = ChaCha8Rng::seed_from_u64(seed ^ (0x9e37_79b9_7f4a_7c15u64.wrapping_mul(t as u64 + 1)));
        let (left, top) = (bbox.left(), bbox.top());
        let frame = Tensor3::from_fn(motion.frame_height, motion.frame_width, 3, |r, c, k| {
            let u = (c as f64 + 0.5 - left) / bbox.w;
            let v = (r as f64 + 0.5 - top) / bbox.h;
            let inside = match motion.shape {
                TargetShape::Square => (0.0..1.0).contains(&u) && (0.0..1.0).contains(&v),
                TargetShape::Ellipse => (u - 0.5).powi(2) + (v - 0.5).powi(2) < 0.25,
            };
            let base = if inside {
                let tc = ((u * cells as f64) as usize).min(cells - 1);
                let tr = ((v * cells as f64) as usize).min(cells - 1);
                texture[tr * cells + tc][k]
            } else {
                motion.background
            };
            let n = if motion.noise_sigma > 0.0 {
                noise.sample(&mut frame_rng)
            } else {
                0.0
            };
            (base + n).clamp(0.0, 255.0)
        });
        out_frames.push(frame);
        boxes.push(bbox);
    }
    Ok(SyntheticSequence {
        frames: out_frames,
        boxes,
    })
}

/// `count` training pairs drawn from synthetic sequences with varied motion.
/// Both patches are centered on the groundtruth, so the label is centered.
pub fn synthetic_pairs(seed: u64, count: usize, radius: f64) -> Result<Vec<SamplePair>> {
    if count == 0 {
        return Err(Error::Argument("no pairs requested".into()));
    }
    const FRAMES: usize = 12;
    const PAIRS_PER_SEQUENCE: usize = 10;
    let label = make_label_map(RESPONSE_SIDE, radius)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut pairs = Vec::with_capacity(count);
    while pairs.len() < count {
        let motion = MotionSpec {
            frame_width: 200,
            frame_height: 200,
            start: (rng.random_range(70.0..90.0), rng.random_range(70.0..130.0)),
            size: (rng.random_range(28.0..44.0), rng.random_range(28.0..44.0)),
            velocity: (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
            scale_drift: rng.random_range(0.99..1.01),
            noise_sigma: rng.random_range(2.0..8.0),
            background: rng.random_range(60.0..180.0),
            shape: if rng.random_bool(0.5) {
                TargetShape::Square
            } else {
                TargetShape::Ellipse
            },
            texture_cells: rng.random_range(4..8),
        };
        let seq = synth_sequence(rng.random(), FRAMES, &motion)?;
        for _ in 0..PAIRS_PER_SEQUENCE {
            if pairs.len() == count {
                break;
            }
            let i = rng.random_range(0..FRAMES);
            let j = rng.random_range(0..FRAMES);
            let (target, _) = extract_search_region(&seq.frames[i], &seq.boxes[i], 1.0, PATCH_SIDE)?;
            let (search, _) = extract_search_region(&seq.frames[j], &seq.boxes[j], 1.0, PATCH_SIDE)?;
            pairs.push(SamplePair {
                target,
                search,
                label: label.clone(),
            });
        }
    }
    Ok(pairs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_map_cases() {
        let l = make_label_map(33, 2.0).unwrap();
        assert_eq!(l.plane().get(16, 16), 1.0);
        assert_eq!(l.plane().get(0, 0), -1.0);
        assert_eq!(l.plane().get(16, 18), 1.0);
        assert_eq!(l.plane().get(18, 18), -1.0);
        assert_eq!(l.positives(), 13);
        assert_eq!(make_label_map(33, 0.0).unwrap().positives(), 1);
        let half_diag = 16.0 * 2f64.sqrt();
        assert_eq!(make_label_map(33, half_diag).unwrap().positives(), 33 * 33);
        assert!(make_label_map(32, 1.0).is_err());
    }

    #[test]
    fn zero_response_loss_is_ln2() {
        for (r, bal) in [(0.0, true), (2.0, true), (2.0, false), (30.0, true)] {
            let l = make_label_map(33, r).unwrap();
            let (loss, _) = logistic_loss(&Plane::zeros(33, 33), &l, bal).unwrap();
            assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
        }
    }

    #[test]
    fn perfect_separation_limit() {
        let l = make_label_map(33, 2.0).unwrap();
        let v = l.plane().map(|x| x * 1e3);
        let (loss, _) = logistic_loss(&v, &l, true).unwrap();
        assert!(loss < 1e-12);
        let (big, _) = logistic_loss(&l.plane().map(|x| -x * 1e3), &l, true).unwrap();
        assert!(big.is_finite() && big > 900.0);
    }

    #[test]
    fn balanced_zero_response_gradient_is_symmetric() {
        let l = make_label_map(33, 2.0).unwrap();
        let (_, g) = logistic_loss(&Plane::zeros(33, 33), &l, true).unwrap();
        let (mut pos, mut neg) = (0.0, 0.0);
        for (gv, lv) in g.data().iter().zip(l.plane().data()) {
            if *lv > 0.0 {
                pos += gv;
            } else {
                neg += gv;
            }
        }
        assert!((pos + neg).abs() < 1e-14);
        assert!((pos + 0.25).abs() < 1e-12);
    }

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_schedule(1, &cfg).unwrap(), 0.01);
        assert!((lr_schedule(2, &cfg).unwrap() - 0.009).abs() < 1e-15);
        let plateau = 0.01 * 0.9f64.powi(49);
        assert!((lr_schedule(50, &cfg).unwrap() - plateau).abs() < 1e-18);
        assert_eq!(lr_schedule(73, &cfg).unwrap(), lr_schedule(50, &cfg).unwrap());
        assert!(matches!(lr_schedule(0, &cfg), Err(Error::Argument(_))));
        assert!(matches!(lr_schedule(101, &cfg), Err(Error::Argument(_))));
    }

    #[test]
    fn empty_training_set() {
        let m = FusionModel {
            fusion: FusionParams::uniform(1),
            attention: vec![AttentionParams::zeros(4, 0.5)],
        };
        assert!(matches!(
            train_prepared(&[], &TrainConfig::default(), m),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn synthetic_kinematics() {
        let still = MotionSpec {
            velocity: (0.0, 0.0),
            ..Default::default()
        };
        let s = synth_sequence(3, 5, &still).unwrap();
        assert!(s.boxes.windows(2).all(|w| w[0] == w[1]));

        let s = synth_sequence(3, 6, &MotionSpec::default()).unwrap();
        for w in s.boxes.windows(2) {
            assert_eq!(w[1].cx - w[0].cx, 2.0);
            assert_eq!(w[1].cy - w[0].cy, 0.0);
        }
        let again = synth_sequence(3, 6, &MotionSpec::default()).unwrap();
        for (a, b) in s.frames.iter().zip(&again.frames) {
            assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        assert!(synth_sequence(3, 1, &MotionSpec::default()).is_err());
    }
}
