//! Multi-source manifests: line-delimited records, merging, stratified
//! splitting and synthetic Gaussian mixtures.
//!
//! A manifest file holds one JSON object per line:
//!
//! ```text
//! {"id":"a1","path":"img/a1.png","label":"fake","source":"sd","split":"train","meta":{"det_conf":0.93}}
//! ```
//!
//! Keys other than the known ones are kept and written back on save.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::boosting::TrainSet;
use crate::curation::image::Image;
use crate::tensor::{Example, Tensor};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Real,
    Fake,
}

impl Label {
    /// Class index: real = 0, fake = 1.
    pub fn class(self) -> usize {
        match self {
            Label::Real => 0,
            Label::Fake => 1,
        }
    }

    pub fn from_class(class: usize) -> Result<Self> {
        match class {
            0 => Ok(Label::Real),
            1 => Ok(Label::Fake),
            other => Err(Error::domain(format!("class {other} is not 0 or 1"))),
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Label::Real => "real",
            Label::Fake => "fake",
        })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Val,
    #[default]
    Unassigned,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Val => "val",
            Split::Unassigned => "unassigned",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "val" => Ok(Split::Val),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(Error::domain(format!("unknown split '{other}'"))),
        }
    }
}

/// One labelled sample and the metadata collected for it along the pipeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub id: String,
    pub path: String,
    pub label: Label,
    pub source: String,
    #[serde(default)]
    pub split: Split,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub meta: BTreeMap<String, Value>,
    /// Unrecognised top-level keys, preserved verbatim.
    #[serde(flatten)]
    pub extra: BTreeMap<String, Value>,
}

impl SampleRecord {
    pub fn new(id: impl Into<String>, path: impl Into<String>, label: Label, source: impl Into<String>) -> Self {
        SampleRecord {
            id: id.into(),
            path: path.into(),
            label,
            source: source.into(),
            split: Split::Unassigned,
            features: None,
            meta: BTreeMap::new(),
            extra: BTreeMap::new(),
        }
    }

    pub fn meta_f64(&self, key: &str) -> Option<f64> {
        self.meta.get(key).and_then(Value::as_f64)
    }

    pub fn meta_str(&self, key: &str) -> Option<&str> {
        self.meta.get(key).and_then(Value::as_str)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Manifest {
    pub records: Vec<SampleRecord>,
    /// Source id to description.
    pub sources: BTreeMap<String, String>,
}

impl Manifest {
    /// Builds a manifest, registering every record's source and checking id
    /// uniqueness.
    pub fn new(records: Vec<SampleRecord>) -> Result<Self> {
        check_unique(records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i + 1)), "record")?;
        let mut sources = BTreeMap::new();
        for r in &records {
            sources.entry(r.source.clone()).or_insert_with(String::new);
        }
        Ok(Manifest { records, sources })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Registry description for a source, added if missing.
    pub fn describe_source(&mut self, source: &str, description: impl Into<String>) {
        self.sources.insert(source.to_string(), description.into());
    }

    pub fn get(&self, id: &str) -> Option<&SampleRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Keeps records matching `keep`, carrying over the registry entries still in use.
    pub fn filtered<F: Fn(&SampleRecord) -> bool>(&self, keep: F) -> Manifest {
        self.with_records(self.records.iter().filter(|r| keep(r)).cloned().collect())
    }

    /// New manifest over `records`, inheriting source descriptions.
    pub(crate) fn with_records(&self, records: Vec<SampleRecord>) -> Manifest {
        let mut sources = BTreeMap::new();
        for r in &records {
            let desc = self.sources.get(&r.source).cloned().unwrap_or_default();
            sources.entry(r.source.clone()).or_insert(desc);
        }
        Manifest { records, sources }
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        let mut lines = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            let line_no = idx + 1;
            if line.trim().is_empty() {
                continue;
            }
            let record: SampleRecord = serde_json::from_str(line).map_err(|e| Error::Parse {
                line: line_no,
                message: e.to_string(),
            })?;
            records.push(record);
            lines.push(line_no);
        }
        check_unique(records.iter().zip(&lines).map(|(r, &l)| (r.id.as_str(), l)), "line")?;
        Manifest::new(records)
    }

    /// Canonical text form: one record per line, known keys first, then
    /// `features`, `meta` and preserved keys in sorted order.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r).expect("record serializes"));
            out.push('\n');
        }
        out
    }
}

fn check_unique<'a>(ids: impl Iterator<Item = (&'a str, usize)>, unit: &str) -> Result<()> {
    let mut seen: HashMap<&str, usize> = HashMap::new();
    let mut offenders = Vec::new();
    for (id, pos) in ids {
        if let Some(first) = seen.get(id) {
            offenders.push(format!("'{id}' at {unit}s {first} and {pos}"));
        } else {
            seen.insert(id, pos);
        }
    }
    if offenders.is_empty() {
        Ok(())
    } else {
        Err(Error::Validation(format!("duplicate id {}", offenders.join("; "))))
    }
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Manifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Manifest::parse(&text)
}

pub fn save_manifest(manifest: &Manifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, manifest.to_jsonl()).map_err(|e| Error::io(path, e))
}

/// Concatenates manifests and shuffles the result. Ids are prefixed with
/// `"{source}/"` (unless they already carry that prefix) so sources with
/// overlapping local ids can coexist.
pub fn merge_sources(manifests: &[Manifest], seed: u64) -> Result<Manifest> {
    let mut records = Vec::new();
    let mut sources = BTreeMap::new();
    for m in manifests {
        for (k, v) in &m.sources {
            let entry = sources.entry(k.clone()).or_insert_with(String::new);
            if entry.is_empty() {
                *entry = v.clone();
            }
        }
        for r in &m.records {
            let mut r = r.clone();
            let prefix = format!("{}/", r.source);
            if !r.id.starts_with(&prefix) {
                r.id = format!("{prefix}{}", r.id);
            }
            records.push(r);
        }
    }
    check_unique(records.iter().enumerate().map(|(i, r)| (r.id.as_str(), i + 1)), "merged position")?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    records.shuffle(&mut rng);
    Ok(Manifest { records, sources })
}

/// `(train, test, val)` fractions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatios {
    pub train: f64,
    pub test: f64,
    pub val: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios {
            train: 0.90,
            test: 0.05,
            val: 0.05,
        }
    }
}

/// Floor count for a fraction of `n`, tolerant of representation error in
/// the ratio (0.05 * 1000 must give 50).
fn floor_share(n: usize, ratio: f64) -> usize {
    ((n as f64) * ratio + 1e-9).floor() as usize
}

/// Test/val counts for a stratum of `n` records: floors of the test and val
/// shares, with the remainder going to train.
pub fn stratum_counts(n: usize, ratios: SplitRatios) -> (usize, usize, usize) {
    let test = floor_share(n, ratios.test);
    let val = floor_share(n, ratios.val).min(n - test);
    (n - test - val, test, val)
}

/// Assigns splits per `(source, label)` stratum.
pub fn split_records(manifest: &Manifest, ratios: SplitRatios, seed: u64) -> Result<Manifest> {
    let sum = ratios.train + ratios.test + ratios.val;
    if (sum - 1.0).abs() > 1e-9 || [ratios.train, ratios.test, ratios.val].iter().any(|r| r.is_nan() || *r < 0.0) {
        return Err(Error::domain(format!("split ratios must be >= 0 and sum to 1, got {sum}")));
    }
    let mut strata: BTreeMap<(&str, Label), Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        strata.entry((r.source.as_str(), r.label)).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assigned = vec![Split::Unassigned; manifest.len()];
    for indices in strata.values_mut() {
        indices.shuffle(&mut rng);
        let (_, test, val) = stratum_counts(indices.len(), ratios);
        for (k, &i) in indices.iter().enumerate() {
            assigned[i] = if k < test {
                Split::Test
            } else if k < test + val {
                Split::Val
            } else {
                Split::Train
            };
        }
    }
    let mut out = manifest.clone();
    for (r, s) in out.records.iter_mut().zip(assigned) {
        r.split = s;
    }
    Ok(out)
}

/// One synthetic source: two isotropic unit-variance Gaussians with means
/// `-separation * e1` (real) and `+separation * e1` (fake).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SourceMixture {
    pub name: String,
    pub count: usize,
    pub dim: usize,
    pub separation: f64,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureSpec {
    pub sources: Vec<SourceMixture>,
}

impl MixtureSpec {
    /// Easy source (separation 3.0) plus hard source (separation 0.5),
    /// 1000 two-dimensional samples each.
    pub fn canonical(seed: u64) -> Self {
        let base = seed.wrapping_mul(2);
        MixtureSpec {
            sources: vec![
                SourceMixture {
                    name: "easy".into(),
                    count: 1000,
                    dim: 2,
                    separation: 3.0,
                    seed: base,
                },
                SourceMixture {
                    name: "hard".into(),
                    count: 1000,
                    dim: 2,
                    separation: 0.5,
                    seed: base.wrapping_add(1),
                },
            ],
        }
    }
}

pub fn make_mixture(spec: &MixtureSpec) -> Result<Manifest> {
    let mut records = Vec::new();
    let mut descriptions = Vec::new();
    for src in &spec.sources {
        if src.count == 0 || src.dim == 0 || !src.separation.is_finite() {
            return Err(Error::domain(format!(
                "source '{}' needs count > 0, dim >= 1 and finite separation",
                src.name
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(src.seed);
        let n_real = src.count / 2;
        for i in 0..src.count {
            let label = if i < n_real { Label::Real } else { Label::Fake };
            let sign = if label == Label::Fake { 1.0 } else { -1.0 };
            let mut x: Vec<f64> = (0..src.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            x[0] += sign * src.separation;
            let mut r = SampleRecord::new(format!("{}-{i:05}", src.name), "synthetic", label, &src.name);
            r.features = Some(x);
            records.push(r);
        }
        descriptions.push((
            src.name.clone(),
            format!("gaussian mixture, separation {} sigma, dim {}", src.separation, src.dim),
        ));
    }
    let mut m = Manifest::new(records)?;
    for (name, desc) in descriptions {
        m.describe_source(&name, desc);
    }
    Ok(m)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct StratumCounts {
    pub total: usize,
    pub by_split: BTreeMap<Split, usize>,
}

/// Record counts per `(source, label)`, with a per-split breakdown.
pub fn per_source_stats(manifest: &Manifest) -> BTreeMap<(String, Label), StratumCounts> {
    let mut table: BTreeMap<(String, Label), StratumCounts> = BTreeMap::new();
    for r in &manifest.records {
        let e = table.entry((r.source.clone(), r.label)).or_default();
        e.total += 1;
        *e.by_split.entry(r.split).or_default() += 1;
    }
    table
}

/// Input vector for a record: inline features, or the decoded image at
/// `image_root/path` flattened row-major and scaled to `[0, 1]`.
pub fn record_features(record: &SampleRecord, image_root: Option<&Path>) -> Result<Vec<f64>> {
    if let Some(f) = &record.features {
        return Ok(f.clone());
    }
    let root = image_root.ok_or_else(|| {
        Error::domain(format!("record '{}' has no inline features and no image root was given", record.id))
    })?;
    let img = Image::load_png(root.join(&record.path))?;
    Ok(img.pixels().iter().map(|&p| p as f64 / 255.0).collect())
}

/// Converts records into a [`TrainSet`]; source indices follow sorted source ids.
pub fn to_train_set<'a>(
    records: impl IntoIterator<Item = &'a SampleRecord>,
    image_root: Option<&Path>,
) -> Result<TrainSet> {
    let records: Vec<&SampleRecord> = records.into_iter().collect();
    let mut names: Vec<String> = records.iter().map(|r| r.source.clone()).collect();
    names.sort();
    names.dedup();
    let index: HashMap<&str, usize> = names.iter().enumerate().map(|(i, n)| (n.as_str(), i)).collect();
    let mut examples = Vec::with_capacity(records.len());
    let mut sources = Vec::with_capacity(records.len());
    let mut dim = None;
    for r in &records {
        let x = record_features(r, image_root)?;
        match dim {
            None => dim = Some(x.len()),
            Some(d) if d != x.len() => {
                return Err(Error::shape(format!(
                    "record '{}' has {} features, expected {d}",
                    r.id,
                    x.len()
                )))
            }
            _ => {}
        }
        examples.push(Example::new(Tensor::vector(x)?, r.label.class()));
        sources.push(index[r.source.as_str()]);
    }
    TrainSet::new(examples, sources, names)
}
