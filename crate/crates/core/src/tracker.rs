//! Online tracking: template initialization, three-scale localization and
//! exponential template update.

use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attention::{apply_channel_weights, channel_weights, AttentionParams, ChannelWeights};
use crate::error::{Error, Result, WeightStoreError};
use crate::features::{fhog_extract, ConvNet, HogConfig, WeightStore};
use crate::fusion::{branch_response, fuse_responses, FusionParams, ResponseMap};
use crate::imaging::{crop_center, extract_search_region, BoundingBox, PatchMapping, Tensor3};
use crate::spectral::{cf_solve, origin_peaked_label, CfConfig, Plane};
use crate::{PATCH_SIDE, RESPONSE_SIDE};

/// Cells by which a branch's search features exceed its template.
pub const TEMPLATE_MARGIN: usize = RESPONSE_SIDE - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FeatureKind {
    Hog,
    Cnn,
}

impl FeatureKind {
    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Hog => "hog",
            FeatureKind::Cnn => "cnn",
        }
    }
}

/// A feature extractor bound to its configuration.
#[derive(Debug, Clone)]
pub enum Extractor {
    Hog(HogConfig),
    /// Patch pixels are mapped to `v / 255 - 0.5` before the network; grayscale
    /// patches are replicated across the input channels.
    Cnn(Arc<ConvNet>),
}

impl Extractor {
    pub fn kind(&self) -> FeatureKind {
        match self {
            Extractor::Hog(_) => FeatureKind::Hog,
            Extractor::Cnn(_) => FeatureKind::Cnn,
        }
    }

    /// Image pixels (of the resampled patch) per feature cell.
    pub fn grid_stride(&self) -> usize {
        match self {
            Extractor::Hog(cfg) => cfg.cell_size,
            Extractor::Cnn(net) => net.total_stride(),
        }
    }

    pub fn channels(&self) -> usize {
        match self {
            Extractor::Hog(_) => crate::features::FHOG_CHANNELS,
            Extractor::Cnn(net) => net.output_channels(),
        }
    }

    pub fn extract(&self, patch: &Tensor3) -> Result<Tensor3> {
        match self {
            Extractor::Hog(cfg) => fhog_extract(patch, cfg),
            Extractor::Cnn(net) => {
                let want = net.input_channels();
                let input = if patch.channels() == want {
                    patch.map(|v| v / 255.0 - 0.5)
                } else if patch.channels() == 1 {
                    Tensor3::from_fn(patch.height(), patch.width(), want, |r, c, _| {
                        patch.get(r, c, 0) / 255.0 - 0.5
                    })
                } else {
                    return Err(Error::Shape(format!(
                        "network expects {want} channels, patch has {}",
                        patch.channels()
                    )));
                };
                net.forward(&input)
            }
        }
    }
}

/// One feature branch of the model: extractor plus its attention layer.
#[derive(Debug, Clone)]
pub struct BranchSpec {
    pub extractor: Arc<Extractor>,
    pub attention: AttentionParams,
}

/// Everything learned or loaded ahead of tracking.
#[derive(Debug, Clone)]
pub struct TrackerModels {
    pub branches: Vec<BranchSpec>,
    pub fusion: FusionParams,
}

impl TrackerModels {
    pub fn new(branches: Vec<BranchSpec>, fusion: FusionParams) -> Result<Self> {
        let m = Self { branches, fusion };
        m.validate()?;
        Ok(m)
    }

    /// CNN and HOG branches (in that order) with fresh attention layers and
    /// uniform fusion.
    pub fn standard(net: ConvNet, hog: HogConfig, seed: u64) -> Result<Self> {
        let cnn = Extractor::Cnn(Arc::new(net));
        let hog = Extractor::Hog(hog);
        let branches = vec![
            BranchSpec {
                attention: AttentionParams::init(cnn.channels(), seed),
                extractor: Arc::new(cnn),
            },
            BranchSpec {
                attention: AttentionParams::init(hog.channels(), seed.wrapping_add(1)),
                extractor: Arc::new(hog),
            },
        ];
        Self::new(branches, FusionParams::uniform(2))
    }

    pub fn validate(&self) -> Result<()> {
        if self.branches.is_empty() {
            return Err(Error::Config("model has no branches".into()));
        }
        if self.fusion.kernels.len() != self.branches.len() {
            return Err(Error::Config(format!(
                "{} fusion kernels for {} branches",
                self.fusion.kernels.len(),
                self.branches.len()
            )));
        }
        let stride = self.branches[0].extractor.grid_stride();
        for b in &self.branches {
            if b.extractor.grid_stride() != stride {
                return Err(Error::Config(format!(
                    "branch grid strides differ ({} vs {stride}); fused maps would not align",
                    b.extractor.grid_stride()
                )));
            }
            if b.attention.channels != b.extractor.channels() {
                return Err(Error::Config(format!(
                    "{} attention has {} channels, extractor gives {}",
                    b.extractor.kind().name(),
                    b.attention.channels,
                    b.extractor.channels()
                )));
            }
        }
        Ok(())
    }

    /// Attention (`attention.<kind>.*`) and fusion (`fusion.*`) parameters.
    pub fn trained_parameters(&self) -> Result<WeightStore> {
        let mut store = WeightStore::new();
        for b in &self.branches {
            b.attention
                .to_store(&format!("attention.{}", b.extractor.kind().name()), &mut store)?;
        }
        self.fusion.to_store(&mut store)?;
        Ok(store)
    }

    /// Replaces attention and fusion parameters with those found in `store`.
    pub fn load_trained_parameters(&mut self, store: &WeightStore) -> Result<(), WeightStoreError> {
        for b in &mut self.branches {
            let prefix = format!("attention.{}", b.extractor.kind().name());
            b.attention = AttentionParams::from_store(store, &prefix, b.extractor.channels())?;
        }
        self.fusion = FusionParams::from_store(store, self.branches.len())?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackerConfig {
    /// Template learning rate of the CNN branch.
    pub eta_c: f64,
    /// Template learning rate of the HOG branch.
    pub eta_h: f64,
    /// Search-region scale factors, ascending with 1.0 in the middle.
    pub scale_factors: [f64; 3],
    /// Fraction of the winning scale change applied to the box size.
    pub scale_blend: f64,
    pub cf: CfConfig,
    /// Multiply the fused response by a centered Hann window before the argmax.
    pub window_enabled: bool,
    /// Factor applied to off-center scale peaks before comparison; 1.0 disables it.
    pub scale_penalty: f64,
}

impl Default for TrackerConfig {
    fn default() -> Self {
        Self {
            eta_c: 0.01,
            eta_h: 0.01,
            scale_factors: [0.97, 1.0, 1.03],
            scale_blend: 0.6,
            cf: CfConfig::default(),
            window_enabled: false,
            scale_penalty: 1.0,
        }
    }
}

impl TrackerConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, eta) in [("eta_c", self.eta_c), ("eta_h", self.eta_h)] {
            if !(0.0..=1.0).contains(&eta) {
                return Err(Error::Config(format!("{name} must lie in [0, 1], got {eta}")));
            }
        }
        let s = self.scale_factors;
        if !(s[0] > 0.0 && s[0] <= s[1] && s[1] <= s[2]) || s[1] != 1.0 {
            return Err(Error::Config(format!(
                "scale factors must be positive, ascending, with 1.0 in the middle: {s:?}"
            )));
        }
        if !(0.0..=1.0).contains(&self.scale_blend) {
            return Err(Error::Config(format!(
                "scale blend must lie in [0, 1], got {}",
                self.scale_blend
            )));
        }
        if !(self.scale_penalty > 0.0 && self.scale_penalty <= 1.0) {
            return Err(Error::Config(format!(
                "scale penalty must lie in (0, 1], got {}",
                self.scale_penalty
            )));
        }
        self.cf.validate()
    }

    pub fn eta_for(&self, kind: FeatureKind) -> f64 {
        match kind {
            FeatureKind::Cnn => self.eta_c,
            FeatureKind::Hog => self.eta_h,
        }
    }
}

/// Per-branch tracking state.
#[derive(Debug, Clone)]
pub struct BranchModel {
    pub kind: FeatureKind,
    pub extractor: Arc<Extractor>,
    /// Cropped correlation filter, before channel weighting.
    pub template: Tensor3,
    pub weights: ChannelWeights,
    pub grid_stride: usize,
    pub template_crop: (usize, usize),
}

impl BranchModel {
    pub fn weighted_template(&self) -> Result<Tensor3> {
        apply_channel_weights(&self.template, &self.weights)
    }
}

#[derive(Debug, Clone)]
pub struct TrackerState {
    pub branches: Vec<BranchModel>,
    pub bbox: BoundingBox,
    pub fusion: FusionParams,
    pub attention: Vec<AttentionParams>,
    pub config: TrackerConfig,
    pub frames_seen: usize,
}

/// Filter solved on one target region, cropped, with its channel weights.
#[derive(Debug, Clone)]
pub struct TargetTemplate {
    pub template: Tensor3,
    pub weights: ChannelWeights,
}

/// Solves the correlation filter on full-size target features and crops its
/// center so the branch response is 33×33.
pub fn solve_template(feat: &Tensor3, cf: &CfConfig) -> Result<Tensor3> {
    let (h, w) = (feat.height(), feat.width());
    if h <= TEMPLATE_MARGIN || w <= TEMPLATE_MARGIN {
        return Err(Error::Config(format!(
            "{h}x{w} features are too small for a {RESPONSE_SIDE}x{RESPONSE_SIDE} response"
        )));
    }
    let y = origin_peaked_label(h, w, cf);
    let filter = cf_solve(feat, &y, cf)?;
    crop_center(&filter, h - TEMPLATE_MARGIN, w - TEMPLATE_MARGIN)
}

/// Templates for the target region around `bbox` in `frame`.
pub fn target_templates(
    frame: &Tensor3,
    bbox: &BoundingBox,
    branches: &[(Arc<Extractor>, AttentionParams)],
    cf: &CfConfig,
) -> Result<Vec<TargetTemplate>> {
    let (patch, _) = extract_search_region(frame, bbox, 1.0, PATCH_SIDE)?;
    branches
        .iter()
        .map(|(ex, att)| {
            let feat = ex.extract(&patch)?;
            Ok(TargetTemplate {
                template: solve_template(&feat, cf)?,
                weights: channel_weights(&feat, att)?,
            })
        })
        .collect()
}

pub fn tracker_init(
    frame: &Tensor3,
    bbox: BoundingBox,
    cfg: &TrackerConfig,
    models: &TrackerModels,
) -> Result<TrackerState> {
    bbox.validate()?;
    cfg.validate()?;
    models.validate()?;
    let pairs: Vec<_> = models
        .branches
        .iter()
        .map(|b| (b.extractor.clone(), b.attention.clone()))
        .collect();
    let templates = target_templates(frame, &bbox, &pairs, &cfg.cf)?;
    let branches = models
        .branches
        .iter()
        .zip(templates)
        .map(|(b, t)| BranchModel {
            kind: b.extractor.kind(),
            extractor: b.extractor.clone(),
            template_crop: (t.template.height(), t.template.width()),
            template: t.template,
            weights: t.weights,
            grid_stride: b.extractor.grid_stride(),
        })
        .collect();
    Ok(TrackerState {
        branches,
        bbox,
        fusion: models.fusion.clone(),
        attention: models.branches.iter().map(|b| b.attention.clone()).collect(),
        config: cfg.clone(),
        frames_seen: 1,
    })
}

/// Fused response and peak for one search scale.
#[derive(Debug, Clone)]
pub struct ScaleResponse {
    pub scale: f64,
    pub mapping: PatchMapping,
    pub fused: ResponseMap,
    pub peak: (usize, usize, f64),
}

/// Fused response of already extracted search features.
pub fn fused_response(
    state: &TrackerState,
    search_feats: &[Tensor3],
) -> Result<ResponseMap> {
    if search_feats.len() != state.branches.len() {
        return Err(Error::Shape(format!(
            "{} feature volumes for {} branches",
            search_feats.len(),
            state.branches.len()
        )));
    }
    let maps = state
        .branches
        .iter()
        .zip(search_feats)
        .map(|(b, f)| branch_response(&b.weighted_template()?, f))
        .collect::<Result<Vec<_>>>()?;
    let fused = fuse_responses(&maps, &state.fusion)?;
    Ok(if state.config.window_enabled {
        apply_hann(&fused)
    } else {
        fused
    })
}

fn apply_hann(map: &Plane) -> Plane {
    let (h, w) = map.dims();
    let hann = |i: usize, n: usize| {
        if n == 1 {
            1.0
        } else {
            0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos()
        }
    };
    Plane::from_fn(h, w, |r, c| map.get(r, c) * hann(r, h) * hann(c, w))
}

/// Argmax displacement from the map center, in cells `(rows, cols)`.
pub fn peak_displacement(map: &Plane) -> (isize, isize) {
    let (r, c, _) = map.argmax();
    (
        r as isize - (map.height() / 2) as isize,
        c as isize - (map.width() / 2) as isize,
    )
}

pub fn evaluate_scale(state: &TrackerState, frame: &Tensor3, scale: f64) -> Result<ScaleResponse> {
    let (patch, mapping) = extract_search_region(frame, &state.bbox, scale, PATCH_SIDE)?;
    let feats = state
        .branches
        .iter()
        .map(|b| b.extractor.extract(&patch))
        .collect::<Result<Vec<_>>>()?;
    let fused = fused_response(state, &feats)?;
    let peak = fused.argmax();
    Ok(ScaleResponse {
        scale,
        mapping,
        fused,
        peak,
    })
}

/// Localizes the target in `frame`, then updates the templates from the new
/// target region.
pub fn tracker_step(state: TrackerState, frame: &Tensor3) -> Result<(TrackerState, BoundingBox)> {
    if state.branches.is_empty() {
        return Err(Error::State("tracker has not been initialized".into()));
    }
    let scales = state.config.scale_factors;
    let responses = scales
        .par_iter()
        .map(|s| evaluate_scale(&state, frame, *s))
        .collect::<Result<Vec<_>>>()?;

    // First maximum in ascending scale order wins ties.
    let penalty = state.config.scale_penalty;
    let score = |r: &ScaleResponse| {
        if r.scale == 1.0 {
            r.peak.2
        } else {
            r.peak.2 * penalty
        }
    };
    let mut best = &responses[0];
    for r in &responses[1..] {
        if score(r) > score(best) {
            best = r;
        }
    }

    let (dr, dc) = peak_displacement(&best.fused);
    let stride = state.branches[0].grid_stride as f64;
    let (dx, dy) = best
        .mapping
        .displacement_to_image(dc as f64 * stride, dr as f64 * stride);
    let gamma = state.config.scale_blend;
    let size_factor = 1.0 - gamma + gamma * best.scale;
    let bbox = BoundingBox::new(
        state.bbox.cx + dx,
        state.bbox.cy + dy,
        state.bbox.w * size_factor,
        state.bbox.h * size_factor,
    )?;

    let mut next = state;
    next.bbox = bbox;
    let pairs: Vec<_> = next
        .branches
        .iter()
        .zip(&next.attention)
        .map(|(b, a)| (b.extractor.clone(), a.clone()))
        .collect();
    let fresh = target_templates(frame, &bbox, &pairs, &next.config.cf)?;
    for (b, t) in next.branches.iter_mut().zip(&fresh) {
        let eta = next.config.eta_for(b.kind);
        b.weights = b.weights.blend(&t.weights, eta);
    }
    let new_templates: Vec<Tensor3> = fresh.into_iter().map(|t| t.template).collect();
    let (eta_c, eta_h) = (next.config.eta_c, next.config.eta_h);
    let mut next = update_templates(next, &new_templates, eta_c, eta_h)?;
    next.frames_seen += 1;
    Ok((next, bbox))
}

/// `Temp_new = (1 - η)·Temp_prev + η·Temp_fresh`, with `eta_c` for CNN
/// branches and `eta_h` for HOG branches.
pub fn update_templates(
    mut state: TrackerState,
    new_templates: &[Tensor3],
    eta_c: f64,
    eta_h: f64,
) -> Result<TrackerState> {
    if new_templates.len() != state.branches.len() {
        return Err(Error::Shape(format!(
            "{} templates for {} branches",
            new_templates.len(),
            state.branches.len()
        )));
    }
    for (b, t) in state.branches.iter().zip(new_templates) {
        if !b.template.same_shape(t) {
            return Err(Error::Shape(format!(
                "{} template {:?} cannot take update {:?}",
                b.kind.name(),
                b.template.shape(),
                t.shape()
            )));
        }
    }
    for (b, t) in state.branches.iter_mut().zip(new_templates) {
        let eta = match b.kind {
            FeatureKind::Cnn => eta_c,
            FeatureKind::Hog => eta_h,
        };
        for (old, new) in b.template.data_mut().iter_mut().zip(t.data()) {
            *old = (1.0 - eta) * *old + eta * new;
        }
    }
    Ok(state)
}

/// Owns an optional state so stepping before initialization is an error.
#[derive(Debug, Clone)]
pub struct Tracker {
    config: TrackerConfig,
    models: TrackerModels,
    state: Option<TrackerState>,
}

impl Tracker {
    pub fn new(config: TrackerConfig, models: TrackerModels) -> Result<Self> {
        config.validate()?;
        models.validate()?;
        Ok(Self {
            config,
            models,
            state: None,
        })
    }

    pub fn init(&mut self, frame: &Tensor3, bbox: BoundingBox) -> Result<()> {
        self.state = Some(tracker_init(frame, bbox, &self.config, &self.models)?);
        Ok(())
    }

    pub fn step(&mut self, frame: &Tensor3) -> Result<BoundingBox> {
        let state = self
            .state
            .take()
            .ok_or_else(|| Error::State("tracker has not been initialized".into()))?;
        let (next, bbox) = tracker_step(state, frame)?;
        self.state = Some(next);
        Ok(bbox)
    }

    pub fn state(&self) -> Option<&TrackerState> {
        self.state.as_ref()
    }

    pub fn config(&self) -> &TrackerConfig {
        &self.config
    }

    pub fn models(&self) -> &TrackerModels {
        &self.models
    }
}
