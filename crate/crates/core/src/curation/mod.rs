//! Coarse-to-fine curation of generated face images.
//!
//! Stages read externally produced scores from record metadata:
//!
//! | stage    | meta key(s)                     | rule                                   |
//! |----------|---------------------------------|----------------------------------------|
//! | `prompt` | `prompt_face_score`             | keep if score >= threshold             |
//! | `detect` | `det_conf`                      | keep if confidence >= threshold        |
//! | `style`  | image pixels                    | drop if edges > t_edge or var < t_var  |
//! | `word`   | `style`                         | drop if an exclusion word occurs       |
//! | `manual` | `review` (`"keep"` / `"drop"`)  | undecided records are held back        |
//! | `crop`   | `face_box` or `face_boxes`      | square crop resized to `crop_size`     |
//!
//! Records a stage cannot judge (missing score, undecodable image, pending
//! review) are reported in a separate missing bucket rather than dropped.

pub mod canny;
pub mod image;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use self::canny::{canny_edge_metric, color_variance, CannyParams, EdgeMetric, VarianceMode};
use self::image::Image;
use crate::datasets::{Manifest, SampleRecord};
use crate::par::Execution;
use crate::{Error, Result};

pub const META_PROMPT_SCORE: &str = "prompt_face_score";
pub const META_DET_CONF: &str = "det_conf";
pub const META_FACE_BOX: &str = "face_box";
pub const META_FACE_BOXES: &str = "face_boxes";
pub const META_STYLE: &str = "style";
pub const META_REVIEW: &str = "review";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct StageConfig {
    pub prompt_threshold: f64,
    pub detect_threshold: f64,
    pub edge_threshold: f64,
    pub color_threshold: f64,
    pub exclusion_words: Vec<String>,
    pub crop_size: usize,
    pub min_face_px: f64,
    pub edge_metric: EdgeMetric,
    pub variance_mode: VarianceMode,
    pub canny: CannyParams,
}

impl Default for StageConfig {
    fn default() -> Self {
        StageConfig {
            prompt_threshold: 0.5,
            detect_threshold: 0.5,
            edge_threshold: 100.0,
            color_threshold: 200.0,
            exclusion_words: vec!["anime".to_string()],
            crop_size: 256,
            min_face_px: 64.0,
            edge_metric: EdgeMetric::Components,
            variance_mode: VarianceMode::PerChannel,
            canny: CannyParams::default(),
        }
    }
}

impl StageConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [
            self.prompt_threshold,
            self.detect_threshold,
            self.edge_threshold,
            self.color_threshold,
            self.min_face_px,
        ];
        if finite.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::domain("thresholds must be finite and non-negative"));
        }
        if self.crop_size == 0 {
            return Err(Error::domain("crop size must be > 0"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Prompt,
    Detect,
    Style,
    Word,
    Manual,
    Crop,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Prompt => "prompt",
            Stage::Detect => "detect",
            Stage::Style => "style",
            Stage::Word => "word",
            Stage::Manual => "manual",
            Stage::Crop => "crop",
        }
    }

    /// Stage order used for the general-purpose prompt-image corpus.
    pub const DIFFUSIONDB_FLOW: [Stage; 5] = [Stage::Prompt, Stage::Detect, Stage::Style, Stage::Manual, Stage::Crop];
    /// Stage order for corpora that carry style prompts.
    pub const JOURNEYDB_FLOW: [Stage; 5] = [Stage::Prompt, Stage::Detect, Stage::Word, Stage::Manual, Stage::Crop];
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "prompt" => Ok(Stage::Prompt),
            "detect" => Ok(Stage::Detect),
            "style" => Ok(Stage::Style),
            "word" => Ok(Stage::Word),
            "manual" => Ok(Stage::Manual),
            "crop" => Ok(Stage::Crop),
            other => Err(Error::domain(format!("unknown stage '{other}'"))),
        }
    }
}

/// Parses a comma- or arrow-separated stage list; an empty string is an empty list.
pub fn parse_stages(list: &str) -> Result<Vec<Stage>> {
    list.split([',', '>'])
        .map(|s| s.trim().trim_end_matches('-'))
        .filter(|s| !s.is_empty())
        .map(Stage::from_str)
        .collect()
}

/// One stage's bookkeeping. `input == retained + dropped + missing`, and
/// `output` is the number of records handed to the next stage (larger than
/// `retained` only when the crop stage expands multi-face images).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRow {
    pub stage: String,
    pub input: usize,
    pub retained: usize,
    pub dropped: usize,
    pub missing: usize,
    pub output: usize,
    /// Retained records the stage could not evaluate (e.g. grayscale input to the style filter).
    pub bypassed: usize,
    pub missing_ids: Vec<String>,
}

impl StageRow {
    fn new(stage: Stage, input: usize) -> Self {
        StageRow {
            stage: stage.as_str().to_string(),
            input,
            retained: 0,
            dropped: 0,
            missing: 0,
            output: 0,
            bypassed: 0,
            missing_ids: Vec::new(),
        }
    }

    pub fn is_conserved(&self) -> bool {
        self.input == self.retained + self.dropped + self.missing
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurationReport {
    pub stages: Vec<StageRow>,
}

impl CurationReport {
    /// Per-stage conservation and stage-to-stage chaining.
    pub fn is_consistent(&self) -> bool {
        self.stages.iter().all(StageRow::is_conserved)
            && self.stages.windows(2).all(|w| w[1].input == w[0].output)
    }
}

impl fmt::Display for CurationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<8} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "stage", "input", "retained", "dropped", "missing", "output"
        )?;
        for r in &self.stages {
            writeln!(
                f,
                "{:<8} {:>9} {:>9} {:>9} {:>9} {:>9}",
                r.stage, r.input, r.retained, r.dropped, r.missing, r.output
            )?;
        }
        Ok(())
    }
}

/// What a single stage produced.
#[derive(Debug, Clone, PartialEq)]
pub struct StageOutput {
    pub retained: Manifest,
    pub row: StageRow,
}

enum Verdict {
    Keep(SampleRecord),
    Drop,
    Missing,
    Bypass(SampleRecord),
}

fn assemble(stage: Stage, manifest: &Manifest, verdicts: Vec<Verdict>) -> StageOutput {
    let mut row = StageRow::new(stage, manifest.len());
    let mut kept = Vec::new();
    for (rec, v) in manifest.records.iter().zip(verdicts) {
        match v {
            Verdict::Keep(r) => {
                row.retained += 1;
                kept.push(r);
            }
            Verdict::Bypass(r) => {
                row.retained += 1;
                row.bypassed += 1;
                kept.push(r);
            }
            Verdict::Drop => row.dropped += 1,
            Verdict::Missing => {
                row.missing += 1;
                row.missing_ids.push(rec.id.clone());
            }
        }
    }
    row.output = kept.len();
    StageOutput {
        retained: manifest.with_records(kept),
        row,
    }
}

fn score_filter(manifest: &Manifest, stage: Stage, key: &str, threshold: f64) -> StageOutput {
    let verdicts = manifest
        .records
        .iter()
        .map(|r| match r.meta_f64(key) {
            Some(s) if s >= threshold => Verdict::Keep(r.clone()),
            Some(_) => Verdict::Drop,
            None => Verdict::Missing,
        })
        .collect();
    assemble(stage, manifest, verdicts)
}

/// Keeps records whose prompt face score is at least `threshold`.
pub fn prompt_filter(manifest: &Manifest, threshold: f64) -> StageOutput {
    score_filter(manifest, Stage::Prompt, META_PROMPT_SCORE, threshold)
}

/// Keeps records whose face-detector confidence is at least `threshold`.
pub fn detection_filter(manifest: &Manifest, threshold: f64) -> StageOutput {
    score_filter(manifest, Stage::Detect, META_DET_CONF, threshold)
}

/// Drops records whose style text contains any exclusion word
/// (case-insensitive substring). Records without style text pass.
pub fn word_filter(manifest: &Manifest, exclusion_words: &[String]) -> StageOutput {
    let words: Vec<String> = exclusion_words
        .iter()
        .map(|w| w.to_lowercase())
        .filter(|w| !w.is_empty())
        .collect();
    let verdicts = manifest
        .records
        .iter()
        .map(|r| {
            let style = r.meta_str(META_STYLE).unwrap_or("").to_lowercase();
            if words.iter().any(|w| style.contains(w.as_str())) {
                Verdict::Drop
            } else {
                Verdict::Keep(r.clone())
            }
        })
        .collect();
    assemble(Stage::Word, manifest, verdicts)
}

/// Applies reviewer decisions already present in `meta.review`; undecided
/// records are held back in the missing bucket.
pub fn manual_filter(manifest: &Manifest) -> StageOutput {
    let verdicts = manifest
        .records
        .iter()
        .map(|r| match r.meta_str(META_REVIEW) {
            Some("keep") => Verdict::Keep(r.clone()),
            Some("drop") => Verdict::Drop,
            _ => Verdict::Missing,
        })
        .collect();
    assemble(Stage::Manual, manifest, verdicts)
}

/// Source of decoded images and sink for crops.
pub trait ImageStore: Sync {
    fn load(&self, record: &SampleRecord) -> Result<Image>;
    /// Persists a crop and returns the path recorded in the output manifest.
    fn store(&self, id: &str, image: &Image) -> Result<String>;
}

/// PNG files under a root directory; crops are written to `crop_dir`.
#[derive(Debug, Clone)]
pub struct FsImageStore {
    pub root: PathBuf,
    pub crop_dir: Option<PathBuf>,
}

impl FsImageStore {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        FsImageStore {
            root: root.into(),
            crop_dir: None,
        }
    }

    pub fn with_crop_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.crop_dir = Some(dir.into());
        self
    }
}

fn file_stem_for(id: &str) -> String {
    id.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

impl ImageStore for FsImageStore {
    fn load(&self, record: &SampleRecord) -> Result<Image> {
        Image::load_png(self.root.join(&record.path))
    }

    fn store(&self, id: &str, image: &Image) -> Result<String> {
        let dir = self
            .crop_dir
            .as_deref()
            .ok_or_else(|| Error::domain("crop stage needs an output directory"))?;
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let name = format!("{}.png", file_stem_for(id));
        image.save_png(dir.join(&name))?;
        Ok(relative_or_absolute(&self.root, &dir.join(name)))
    }
}

fn relative_or_absolute(root: &Path, path: &Path) -> String {
    path.strip_prefix(root).unwrap_or(path).to_string_lossy().into_owned()
}

/// In-memory images keyed by record path.
#[derive(Debug, Default)]
pub struct MemoryImageStore {
    images: Mutex<HashMap<String, Image>>,
}

impl MemoryImageStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&self, path: impl Into<String>, image: Image) {
        self.images.lock().expect("store lock").insert(path.into(), image);
    }

    pub fn get(&self, path: &str) -> Option<Image> {
        self.images.lock().expect("store lock").get(path).cloned()
    }
}

impl ImageStore for MemoryImageStore {
    fn load(&self, record: &SampleRecord) -> Result<Image> {
        self.get(&record.path)
            .ok_or_else(|| Error::Image(format!("no image at '{}'", record.path)))
    }

    fn store(&self, id: &str, image: &Image) -> Result<String> {
        let path = format!("crops/{}.png", file_stem_for(id));
        self.insert(path.clone(), image.clone());
        Ok(path)
    }
}

/// Edge and colour measurements for one image.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StyleMetrics {
    pub edge: f64,
    /// `None` for single-channel images.
    pub color_variance: Option<f64>,
}

pub fn style_metrics(image: &Image, config: &StageConfig) -> Result<StyleMetrics> {
    let edge = canny_edge_metric(image, config.canny, config.edge_metric)?;
    let color_variance = if image.channels() == 3 {
        Some(color_variance(image, config.variance_mode)?)
    } else {
        None
    };
    Ok(StyleMetrics { edge, color_variance })
}

/// True when the metrics mark the image as unrealistic (line art, narrow palette).
pub fn style_rejects(metrics: &StyleMetrics, config: &StageConfig) -> bool {
    metrics.edge > config.edge_threshold || metrics.color_variance.is_some_and(|v| v < config.color_threshold)
}

/// Drops images with too many edges or too little colour variance. The
/// computed metrics are written into `meta.edge_metric` and
/// `meta.color_variance`. Undecodable images go to the missing bucket;
/// grayscale images bypass the filter and are counted as such.
pub fn style_filter(manifest: &Manifest, config: &StageConfig, images: &dyn ImageStore, exec: Execution) -> StageOutput {
    let verdicts = exec.map(&manifest.records, |r| {
        let Ok(img) = images.load(r) else {
            return Verdict::Missing;
        };
        let Ok(metrics) = style_metrics(&img, config) else {
            return Verdict::Missing;
        };
        let mut out = r.clone();
        out.meta.insert("edge_metric".into(), Value::from(metrics.edge));
        match metrics.color_variance {
            None => Verdict::Bypass(out),
            Some(v) => {
                out.meta.insert("color_variance".into(), Value::from(v));
                if style_rejects(&metrics, config) {
                    Verdict::Drop
                } else {
                    Verdict::Keep(out)
                }
            }
        }
    });
    assemble(Stage::Style, manifest, verdicts)
}

/// Face box `(x, y, w, h)` in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl FaceBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        FaceBox { x, y, w, h }
    }

    fn from_value(v: &Value) -> Option<FaceBox> {
        let a = v.as_array()?;
        if a.len() != 4 {
            return None;
        }
        let n: Vec<f64> = a.iter().map(Value::as_f64).collect::<Option<_>>()?;
        Some(FaceBox::new(n[0], n[1], n[2], n[3]))
    }

    fn to_value(self) -> Value {
        serde_json::json!([self.x, self.y, self.w, self.h])
    }
}

/// Square crop around a face, resized to `crop_size`. Returns `None` when
/// the face is smaller than `min_face_px` on its longer side.
pub fn crop_face(image: &Image, face: FaceBox, crop_size: usize, min_face_px: f64) -> Result<Option<Image>> {
    if !(face.w > 0.0 && face.h > 0.0) {
        return Err(Error::domain(format!("degenerate face box {face:?}")));
    }
    if crop_size == 0 {
        return Err(Error::domain("crop size must be > 0"));
    }
    let side = face.w.max(face.h);
    if side < min_face_px {
        return Ok(None);
    }
    let (iw, ih) = (image.width(), image.height());
    let side_px = (side.round() as usize).clamp(1, iw.min(ih));
    let cx = face.x + face.w / 2.0;
    let cy = face.y + face.h / 2.0;
    let place = |center: f64, extent: usize| {
        let start = (center - side_px as f64 / 2.0).round();
        start.clamp(0.0, (extent - side_px) as f64) as usize
    };
    let x0 = place(cx, iw);
    let y0 = place(cy, ih);
    let square = image.crop(x0, y0, side_px, side_px)?;
    square.resize_bilinear(crop_size, crop_size).map(Some)
}

/// Crops every face box of every record. Multi-face records expand into one
/// output per accepted face (ids suffixed `#f<k>`); records whose faces are
/// all too small are dropped; records without boxes or images are missing.
pub fn crop_stage(manifest: &Manifest, config: &StageConfig, images: &dyn ImageStore, exec: Execution) -> Result<StageOutput> {
    enum Outcome {
        Kept(Vec<SampleRecord>),
        Dropped,
        Missing,
    }
    let outcomes = exec.try_map(&manifest.records, |r| -> Result<Outcome> {
        let boxes: Vec<FaceBox> = match (r.meta.get(META_FACE_BOXES), r.meta.get(META_FACE_BOX)) {
            (Some(Value::Array(list)), _) => list.iter().filter_map(FaceBox::from_value).collect(),
            (_, Some(v)) => FaceBox::from_value(v).into_iter().collect(),
            _ => Vec::new(),
        };
        if boxes.is_empty() {
            return Ok(Outcome::Missing);
        }
        let Ok(img) = images.load(r) else {
            return Ok(Outcome::Missing);
        };
        let multi = boxes.len() > 1;
        let mut out = Vec::new();
        for (k, b) in boxes.into_iter().enumerate() {
            let Some(crop) = crop_face(&img, b, config.crop_size, config.min_face_px)? else {
                continue;
            };
            let mut rec = r.clone();
            if multi {
                rec.id = format!("{}#f{k}", r.id);
            }
            rec.path = images.store(&rec.id, &crop)?;
            rec.meta.remove(META_FACE_BOXES);
            rec.meta.insert(META_FACE_BOX.into(), b.to_value());
            rec.meta.insert("crop_of".into(), Value::from(r.path.clone()));
            out.push(rec);
        }
        Ok(if out.is_empty() { Outcome::Dropped } else { Outcome::Kept(out) })
    })?;
    let mut row = StageRow::new(Stage::Crop, manifest.len());
    let mut kept = Vec::new();
    for (r, o) in manifest.records.iter().zip(outcomes) {
        match o {
            Outcome::Kept(recs) => {
                row.retained += 1;
                kept.extend(recs);
            }
            Outcome::Dropped => row.dropped += 1,
            Outcome::Missing => {
                row.missing += 1;
                row.missing_ids.push(r.id.clone());
            }
        }
    }
    row.output = kept.len();
    let retained = Manifest::new(kept)?;
    Ok(StageOutput {
        retained: manifest.with_records(retained.records),
        row,
    })
}

/// Everything the pipeline needs besides the manifest and config.
pub struct PipelineContext<'a> {
    pub images: &'a dyn ImageStore,
    pub exec: Execution,
}

/// Runs `stages` in order. The report's rows chain: each stage's input is
/// the previous stage's output.
pub fn run_pipeline(
    manifest: &Manifest,
    config: &StageConfig,
    stages: &[Stage],
    ctx: &PipelineContext<'_>,
) -> Result<(Manifest, CurationReport)> {
    config.validate()?;
    let mut current = manifest.clone();
    let mut report = CurationReport::default();
    for &stage in stages {
        let out = match stage {
            Stage::Prompt => prompt_filter(&current, config.prompt_threshold),
            Stage::Detect => detection_filter(&current, config.detect_threshold),
            Stage::Style => style_filter(&current, config, ctx.images, ctx.exec),
            Stage::Word => word_filter(&current, &config.exclusion_words),
            Stage::Manual => manual_filter(&current),
            Stage::Crop => crop_stage(&current, config, ctx.images, ctx.exec)?,
        };
        report.stages.push(out.row);
        current = out.retained;
    }
    Ok((current, report))
}

/// Counts from merging a score sidecar.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SidecarMerge {
    pub matched: usize,
    pub unmatched: usize,
}

/// Merges a score sidecar (one JSON object per line, keyed by `id`) into
/// record metadata. Top-level keys and the entries of a nested `meta`
/// object are both merged; sidecar values win.
pub fn merge_sidecar(manifest: &mut Manifest, text: &str) -> Result<SidecarMerge> {
    let index: HashMap<String, usize> = manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.clone(), i))
        .collect();
    let mut stats = SidecarMerge::default();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let obj: BTreeMap<String, Value> = serde_json::from_str(line).map_err(|e| Error::Parse {
            line: n + 1,
            message: e.to_string(),
        })?;
        let id = obj.get("id").and_then(Value::as_str).ok_or_else(|| Error::Parse {
            line: n + 1,
            message: "sidecar line has no string id".into(),
        })?;
        let Some(&i) = index.get(id) else {
            stats.unmatched += 1;
            continue;
        };
        let meta = &mut manifest.records[i].meta;
        for (k, v) in &obj {
            match (k.as_str(), v) {
                ("id", _) => {}
                ("meta", Value::Object(inner)) => {
                    meta.extend(inner.iter().map(|(k, v)| (k.clone(), v.clone())));
                }
                _ => {
                    meta.insert(k.clone(), v.clone());
                }
            }
        }
        stats.matched += 1;
    }
    Ok(stats)
}
