//! One-pass evaluation over OTB-layout sequences: ingestion, overlap and
//! center-error metrics, success and precision curves, reports.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IngestError, Result};
use crate::imaging::{load_image, BoundingBox};
use crate::tracker::{Tracker, TrackerConfig, TrackerModels};

pub const SUCCESS_STEPS: usize = 20;
pub const MAX_PRECISION_PX: usize = 50;
pub const PRECISION_HEADLINE_PX: usize = 20;

/// Intersection over union of two axis-aligned boxes.
pub fn overlap_ratio(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.left() + a.w).min(b.left() + b.w) - a.left().max(b.left());
    let ih = (a.top() + a.h).min(b.top() + b.h) - a.top().max(b.top());
    if iw <= 0.0 || ih <= 0.0 {
        return 0.0;
    }
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

pub fn center_location_error(a: &BoundingBox, b: &BoundingBox) -> f64 {
    (a.cx - b.cx).hypot(a.cy - b.cy)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessCurve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
    pub auc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrecisionCurve {
    pub thresholds: Vec<f64>,
    pub values: Vec<f64>,
    /// Value at the 20 px threshold.
    pub headline: f64,
}

impl PrecisionCurve {
    /// Value at an integer pixel threshold.
    pub fn at(&self, px: usize) -> Option<f64> {
        self.values.get(px).copied()
    }
}

fn check_lengths(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::Argument(format!(
            "{} predictions for {} groundtruth boxes",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::Argument("empty box stream".into()));
    }
    Ok(())
}

fn success_thresholds() -> Vec<f64> {
    (0..=SUCCESS_STEPS).map(|i| i as f64 / SUCCESS_STEPS as f64).collect()
}

fn precision_thresholds() -> Vec<f64> {
    (0..=MAX_PRECISION_PX).map(|t| t as f64).collect()
}

fn success_from_values(values: Vec<f64>) -> SuccessCurve {
    let auc = values.iter().sum::<f64>() / values.len() as f64;
    SuccessCurve {
        thresholds: success_thresholds(),
        values,
        auc,
    }
}

fn precision_from_values(values: Vec<f64>) -> PrecisionCurve {
    PrecisionCurve {
        thresholds: precision_thresholds(),
        headline: values[PRECISION_HEADLINE_PX],
        values,
    }
}

/// Fraction of frames with IoU `>=` each of the thresholds `0, 0.05, ..., 1`.
pub fn success_curve(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<SuccessCurve> {
    check_lengths(pred, gt)?;
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| overlap_ratio(p, g)).collect();
    let n = ious.len() as f64;
    let values = success_thresholds()
        .iter()
        .map(|t| ious.iter().filter(|v| **v >= *t).count() as f64 / n)
        .collect();
    Ok(success_from_values(values))
}

/// Fraction of frames with center error `<=` each integer threshold `0..=50` px.
pub fn precision_curve(pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<PrecisionCurve> {
    check_lengths(pred, gt)?;
    let errs: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| center_location_error(p, g))
        .collect();
    let n = errs.len() as f64;
    let values = precision_thresholds()
        .iter()
        .map(|t| errs.iter().filter(|e| **e <= *t).count() as f64 / n)
        .collect();
    Ok(precision_from_values(values))
}

/// An OTB-layout sequence: `img/` with numbered frames and
/// `groundtruth_rect.txt` holding one top-left `x,y,w,h` box per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequence {
    pub name: String,
    pub frames: Vec<PathBuf>,
    pub boxes: Vec<BoundingBox>,
}

const FRAME_EXTENSIONS: [&str; 3] = ["jpg", "jpeg", "png"];

fn frame_key(path: &Path) -> (u64, String) {
    let stem = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    let digits: String = stem.chars().filter(char::is_ascii_digit).collect();
    (digits.parse().unwrap_or(u64::MAX), stem)
}

/// Parses groundtruth text. Fields may be separated by commas, tabs or spaces;
/// blank lines are skipped.
pub fn parse_groundtruth(text: &str, path: &Path) -> Result<Vec<BoundingBox>, IngestError> {
    let mut boxes = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let unparsable = || IngestError::UnparsableLine {
            path: path.to_path_buf(),
            line: i + 1,
            text: line.to_string(),
        };
        let fields: Vec<f64> = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|f| !f.is_empty())
            .map(|f| f.parse::<f64>().map_err(|_| unparsable()))
            .collect::<Result<_, _>>()?;
        if fields.len() != 4 {
            return Err(unparsable());
        }
        let b = BoundingBox::from_top_left(fields[0], fields[1], fields[2], fields[3]).map_err(|_| {
            IngestError::InvalidBox {
                path: path.to_path_buf(),
                line: i + 1,
            }
        })?;
        boxes.push(b);
    }
    Ok(boxes)
}

pub fn load_sequence(dir: &Path) -> Result<Sequence, IngestError> {
    if !dir.is_dir() {
        return Err(IngestError::Missing(dir.to_path_buf()));
    }
    let img_dir = dir.join("img");
    if !img_dir.is_dir() {
        return Err(IngestError::Missing(img_dir));
    }
    let gt_path = dir.join("groundtruth_rect.txt");
    if !gt_path.is_file() {
        return Err(IngestError::Missing(gt_path));
    }
    let io = |p: &Path| {
        let p = p.to_path_buf();
        move |source| IngestError::Io { path: p, source }
    };
    let mut frames: Vec<PathBuf> = fs::read_dir(&img_dir)
        .map_err(io(&img_dir))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .map(|e| FRAME_EXTENSIONS.contains(&e.to_string_lossy().to_ascii_lowercase().as_str()))
                .unwrap_or(false)
        })
        .collect();
    frames.sort_by_key(|p| frame_key(p));
    if frames.is_empty() {
        return Err(IngestError::Missing(img_dir.join("<frames>")));
    }
    let text = fs::read_to_string(&gt_path).map_err(io(&gt_path))?;
    let boxes = parse_groundtruth(&text, &gt_path)?;
    if boxes.len() != frames.len() {
        return Err(IngestError::CountMismatch {
            frames: frames.len(),
            boxes: boxes.len(),
        });
    }
    let name = dir
        .file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string());
    Ok(Sequence { name, frames, boxes })
}

/// Sorted subdirectories of `dataset`, each treated as one sequence.
pub fn discover_sequences(dataset: &Path) -> Result<Vec<PathBuf>, IngestError> {
    if !dataset.is_dir() {
        return Err(IngestError::Missing(dataset.to_path_buf()));
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(dataset)
        .map_err(|source| IngestError::Io {
            path: dataset.to_path_buf(),
            source,
        })?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    Ok(dirs)
}

/// Produces one box per frame, the first being the initialization box.
pub trait SequenceTracker: Sync {
    fn track(&self, seq: &Sequence) -> Result<Vec<BoundingBox>>;
}

/// The fusion tracker, initialized from the first groundtruth box.
#[derive(Debug, Clone)]
pub struct FusionTracker {
    pub config: TrackerConfig,
    pub models: TrackerModels,
}

impl SequenceTracker for FusionTracker {
    fn track(&self, seq: &Sequence) -> Result<Vec<BoundingBox>> {
        let mut tracker = Tracker::new(self.config.clone(), self.models.clone())?;
        let mut out = Vec::with_capacity(seq.frames.len());
        for (i, path) in seq.frames.iter().enumerate() {
            let frame = load_image(path)?;
            if i == 0 {
                tracker.init(&frame, seq.boxes[0])?;
                out.push(seq.boxes[0]);
            } else {
                out.push(tracker.step(&frame)?);
            }
        }
        Ok(out)
    }
}

/// Returns the groundtruth itself.
#[derive(Debug, Clone, Copy, Default)]
pub struct EchoTracker;

impl SequenceTracker for EchoTracker {
    fn track(&self, seq: &Sequence) -> Result<Vec<BoundingBox>> {
        Ok(seq.boxes.clone())
    }
}

/// Returns the groundtruth translated by a fixed pixel offset.
#[derive(Debug, Clone, Copy)]
pub struct OffsetTracker {
    pub dx: f64,
    pub dy: f64,
}

impl SequenceTracker for OffsetTracker {
    fn track(&self, seq: &Sequence) -> Result<Vec<BoundingBox>> {
        Ok(seq
            .boxes
            .iter()
            .map(|b| BoundingBox {
                cx: b.cx + self.dx,
                cy: b.cy + self.dy,
                ..*b
            })
            .collect())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Aggregation {
    /// Unweighted mean of per-sequence curves.
    #[default]
    PerSequence,
    /// Mean weighted by each sequence's frame count.
    PerFrame,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceResult {
    pub name: String,
    pub frames: usize,
    pub success: SuccessCurve,
    pub precision: PrecisionCurve,
    pub mean_iou: f64,
    pub predictions: Vec<BoundingBox>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FailedSequence {
    pub path: PathBuf,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub sequences: usize,
    pub frames: usize,
    pub success: SuccessCurve,
    pub precision: PrecisionCurve,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkReport {
    pub aggregation: Aggregation,
    pub sequences: Vec<SequenceResult>,
    pub failed: Vec<FailedSequence>,
    /// `None` when every sequence failed.
    pub aggregate: Option<AggregateResult>,
}

pub fn evaluate_sequence(name: &str, pred: &[BoundingBox], gt: &[BoundingBox]) -> Result<SequenceResult> {
    let success = success_curve(pred, gt)?;
    let precision = precision_curve(pred, gt)?;
    let mean_iou = pred.iter().zip(gt).map(|(p, g)| overlap_ratio(p, g)).sum::<f64>() / gt.len() as f64;
    Ok(SequenceResult {
        name: name.to_string(),
        frames: gt.len(),
        success,
        precision,
        mean_iou,
        predictions: pred.to_vec(),
    })
}

/// Combines per-sequence curves; `None` for an empty slice.
pub fn aggregate(results: &[SequenceResult], mode: Aggregation) -> Option<AggregateResult> {
    if results.is_empty() {
        return None;
    }
    let weights: Vec<f64> = results
        .iter()
        .map(|r| match mode {
            Aggregation::PerSequence => 1.0,
            Aggregation::PerFrame => r.frames as f64,
        })
        .collect();
    let total: f64 = weights.iter().sum();
    let mean = |pick: &dyn Fn(&SequenceResult) -> &[f64]| -> Vec<f64> {
        let len = pick(&results[0]).len();
        (0..len)
            .map(|i| {
                results
                    .iter()
                    .zip(&weights)
                    .map(|(r, w)| w * pick(r)[i])
                    .sum::<f64>()
                    / total
            })
            .collect()
    };
    Some(AggregateResult {
        sequences: results.len(),
        frames: results.iter().map(|r| r.frames).sum(),
        success: success_from_values(mean(&|r| &r.success.values)),
        precision: precision_from_values(mean(&|r| &r.precision.values)),
    })
}

/// Runs `tracker` over every sequence directory. Sequences that fail to load
/// or track are listed in the report instead of aborting the batch.
pub fn run_benchmark(dirs: &[PathBuf], tracker: &dyn SequenceTracker, mode: Aggregation) -> Result<BenchmarkReport> {
    if dirs.is_empty() {
        return Err(Error::Argument("no sequences to evaluate".into()));
    }
    let outcomes: Vec<std::result::Result<SequenceResult, FailedSequence>> = dirs
        .par_iter()
        .map(|dir| {
            let run = || -> Result<SequenceResult> {
                let seq = load_sequence(dir)?;
                let pred = tracker.track(&seq)?;
                evaluate_sequence(&seq.name, &pred, &seq.boxes)
            };
            run().map_err(|e| FailedSequence {
                path: dir.clone(),
                error: e.to_string(),
            })
        })
        .collect();
    let mut sequences = Vec::new();
    let mut failed = Vec::new();
    for o in outcomes {
        match o {
            Ok(r) => sequences.push(r),
            Err(f) => failed.push(f),
        }
    }
    Ok(BenchmarkReport {
        aggregation: mode,
        aggregate: aggregate(&sequences, mode),
        sequences,
        failed,
    })
}

fn curve_table(thresholds: &[f64], columns: &[(&str, &[f64])]) -> String {
    let mut s = String::from("threshold");
    for (name, _) in columns {
        s.push(',');
        s.push_str(name);
    }
    s.push('\n');
    for (i, t) in thresholds.iter().enumerate() {
        let _ = write!(s, "{t}");
        for (_, v) in columns {
            let _ = write!(s, ",{}", v[i]);
        }
        s.push('\n');
    }
    s
}

impl BenchmarkReport {
    pub fn success_csv(&self) -> String {
        let mut cols: Vec<(&str, &[f64])> = self
            .sequences
            .iter()
            .map(|r| (r.name.as_str(), r.success.values.as_slice()))
            .collect();
        if let Some(a) = &self.aggregate {
            cols.push(("aggregate", &a.success.values));
        }
        curve_table(&success_thresholds(), &cols)
    }

    pub fn precision_csv(&self) -> String {
        let mut cols: Vec<(&str, &[f64])> = self
            .sequences
            .iter()
            .map(|r| (r.name.as_str(), r.precision.values.as_slice()))
            .collect();
        if let Some(a) = &self.aggregate {
            cols.push(("aggregate", &a.precision.values));
        }
        curve_table(&precision_thresholds(), &cols)
    }

    /// Writes `report.json`, `success.csv`, `precision.csv` and, when asked,
    /// `success.svg` and `precision.svg` into `out`.
    pub fn write(&self, out: &Path, plots: bool) -> Result<()> {
        fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
        let json = serde_json::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))? + "\n";
        let mut files = vec![
            ("report.json", json),
            ("success.csv", self.success_csv()),
            ("precision.csv", self.precision_csv()),
        ];
        if plots {
            if let Some(a) = &self.aggregate {
                files.push((
                    "success.svg",
                    svg_plot(
                        &format!("Success (AUC {:.3})", a.success.auc),
                        "overlap threshold",
                        &a.success.thresholds,
                        &a.success.values,
                    ),
                ));
                files.push((
                    "precision.svg",
                    svg_plot(
                        &format!("Precision (@20px {:.3})", a.precision.headline),
                        "location error threshold (px)",
                        &a.precision.thresholds,
                        &a.precision.values,
                    ),
                ));
            }
        }
        for (name, body) in files {
            let p = out.join(name);
            fs::write(&p, body).map_err(|e| Error::io(&p, e))?;
        }
        Ok(())
    }
}

/// Minimal line plot with values in `[0, 1]`.
pub fn svg_plot(title: &str, x_label: &str, xs: &[f64], ys: &[f64]) -> String {
    const W: f64 = 480.0;
    const H: f64 = 360.0;
    const M: f64 = 48.0;
    let x_max = xs.last().copied().unwrap_or(1.0).max(f64::MIN_POSITIVE);
    let px = |x: f64| M + (W - 2.0 * M) * x / x_max;
    let py = |y: f64| H - M - (H - 2.0 * M) * y;
    let points: Vec<String> = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| format!("{:.2},{:.2}", px(*x), py(*y)))
        .collect();
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{M},{m} V{b} H{r}" fill="none" stroke="black"/>"#,
        m = M,
        b = H - M,
        r = W - M
    );
    for tick in 0..=4 {
        let y = tick as f64 / 4.0;
        let _ = writeln!(
            s,
            r#"<text x="{x}" y="{y:.2}" text-anchor="end">{v}</text>"#,
            x = M - 6.0,
            y = py(y) + 4.0,
            v = y
        );
    }
    let _ = writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke="steelblue" stroke-width="2"/>"#,
        points.join(" ")
    );
    let _ = writeln!(s, r#"<text x="{}" y="24" text-anchor="middle">{}</text>"#, W / 2.0, escape(title));
    let _ = writeln!(
        s,
        r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#,
        W / 2.0,
        H - 12.0,
        escape(x_label)
    );
    s.push_str("</svg>\n");
    s
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}
