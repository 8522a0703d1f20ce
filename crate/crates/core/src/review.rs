//! Manual review: an append-only decision log over a manifest.
//!
//! Readers take a cheap snapshot (`Arc` clone under a briefly held read
//! lock); writers are serialised by one appender mutex, which also fixes
//! the log order that last-write-wins is resolved by.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex, RwLock};

use chrono::{DateTime, Utc};
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::curation::META_REVIEW;
use crate::datasets::{Manifest, SampleRecord};
use crate::{Error, Result};

pub const META_ANNOTATOR: &str = "review_annotator";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Keep,
    Drop,
}

impl Verdict {
    pub fn as_str(self) -> &'static str {
        match self {
            Verdict::Keep => "keep",
            Verdict::Drop => "drop",
        }
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Verdict {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "keep" => Ok(Verdict::Keep),
            "drop" => Ok(Verdict::Drop),
            other => Err(Error::domain(format!("verdict must be 'keep' or 'drop', got '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReviewDecision {
    pub record_id: String,
    pub verdict: Verdict,
    pub annotator: String,
    pub timestamp: DateTime<Utc>,
}

/// Parses a decision log. A final line without a trailing newline that does
/// not parse is treated as a torn write and ignored.
pub fn parse_log(text: &str) -> Result<Vec<ReviewDecision>> {
    let mut out = Vec::new();
    let torn_tail = !text.is_empty() && !text.ends_with('\n');
    let lines: Vec<&str> = text.lines().collect();
    for (i, line) in lines.iter().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(line) {
            Ok(d) => out.push(d),
            Err(_) if torn_tail && i + 1 == lines.len() => break,
            Err(e) => {
                return Err(Error::Parse {
                    line: i + 1,
                    message: e.to_string(),
                })
            }
        }
    }
    Ok(out)
}

pub fn load_log(path: impl AsRef<Path>) -> Result<Vec<ReviewDecision>> {
    let path = path.as_ref();
    match fs::read_to_string(path) {
        Ok(text) => parse_log(&text),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(Vec::new()),
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Applies `log` to `manifest` in order, writing `meta.review` and the
/// annotator. Later entries win. Unknown ids are an error.
pub fn replay(log: &[ReviewDecision], manifest: &Manifest) -> Result<Manifest> {
    let mut out = manifest.clone();
    let index: BTreeMap<&str, usize> = manifest
        .records
        .iter()
        .enumerate()
        .map(|(i, r)| (r.id.as_str(), i))
        .collect();
    for d in log {
        let &i = index
            .get(d.record_id.as_str())
            .ok_or_else(|| Error::Validation(format!("decision for unknown record '{}'", d.record_id)))?;
        let meta = &mut out.records[i].meta;
        meta.insert(META_REVIEW.into(), Value::from(d.verdict.as_str()));
        meta.insert(META_ANNOTATOR.into(), Value::from(d.annotator.clone()));
    }
    Ok(out)
}

fn existing_verdict(r: &SampleRecord) -> Option<Verdict> {
    r.meta_str(META_REVIEW).and_then(|s| s.parse().ok())
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Progress {
    pub total: usize,
    pub decided: usize,
    pub kept: usize,
    pub dropped: usize,
}

#[derive(Debug, Clone, Default)]
struct Snapshot {
    /// Latest verdict per record index; entries from the manifest are seeded in.
    verdicts: BTreeMap<usize, (Verdict, Option<String>)>,
    progress: Progress,
}

impl Snapshot {
    fn set(&mut self, index: usize, verdict: Verdict, annotator: Option<String>) {
        if let Some((old, _)) = self.verdicts.insert(index, (verdict, annotator)) {
            match old {
                Verdict::Keep => self.progress.kept -= 1,
                Verdict::Drop => self.progress.dropped -= 1,
            }
        } else {
            self.progress.decided += 1;
        }
        match verdict {
            Verdict::Keep => self.progress.kept += 1,
            Verdict::Drop => self.progress.dropped += 1,
        }
    }
}

struct Appender {
    file: Option<File>,
    log: Vec<ReviewDecision>,
}

/// A live review over one manifest.
pub struct ReviewSession {
    manifest: Arc<Manifest>,
    index: BTreeMap<String, usize>,
    snapshot: RwLock<Arc<Snapshot>>,
    appender: Mutex<Appender>,
    log_path: Option<PathBuf>,
}

impl fmt::Debug for ReviewSession {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ReviewSession")
            .field("records", &self.manifest.len())
            .field("log_path", &self.log_path)
            .field("progress", &self.progress())
            .finish()
    }
}

impl ReviewSession {
    /// Session without persistence.
    pub fn in_memory(manifest: Manifest) -> Result<Self> {
        Self::build(manifest, None, Vec::new())
    }

    /// Opens (or creates) the decision log at `log_path`, replaying any
    /// decisions already in it.
    pub fn open(manifest: Manifest, log_path: impl Into<PathBuf>) -> Result<Self> {
        let path = log_path.into();
        let existing = load_log(&path)?;
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut session = Self::build(manifest, Some(path), existing)?;
        session.appender.get_mut().expect("fresh mutex").file = Some(file);
        Ok(session)
    }

    fn build(manifest: Manifest, log_path: Option<PathBuf>, log: Vec<ReviewDecision>) -> Result<Self> {
        let index: BTreeMap<String, usize> = manifest
            .records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect();
        let mut snap = Snapshot {
            progress: Progress {
                total: manifest.len(),
                ..Progress::default()
            },
            ..Snapshot::default()
        };
        for (i, r) in manifest.records.iter().enumerate() {
            if let Some(v) = existing_verdict(r) {
                snap.set(i, v, r.meta_str(META_ANNOTATOR).map(String::from));
            }
        }
        for d in &log {
            let &i = index
                .get(&d.record_id)
                .ok_or_else(|| Error::Validation(format!("log has decision for unknown record '{}'", d.record_id)))?;
            snap.set(i, d.verdict, Some(d.annotator.clone()));
        }
        Ok(ReviewSession {
            manifest: Arc::new(manifest),
            index,
            snapshot: RwLock::new(Arc::new(snap)),
            appender: Mutex::new(Appender { file: None, log }),
            log_path,
        })
    }

    fn current(&self) -> Arc<Snapshot> {
        Arc::clone(&self.snapshot.read().expect("snapshot lock"))
    }

    pub fn manifest(&self) -> &Manifest {
        &self.manifest
    }

    pub fn log_path(&self) -> Option<&Path> {
        self.log_path.as_deref()
    }

    pub fn record(&self, id: &str) -> Option<&SampleRecord> {
        self.index.get(id).map(|&i| &self.manifest.records[i])
    }

    /// Undecided records in manifest order, at most `limit`.
    pub fn pending(&self, limit: usize) -> Vec<SampleRecord> {
        let snap = self.current();
        self.manifest
            .records
            .iter()
            .enumerate()
            .filter(|(i, _)| !snap.verdicts.contains_key(i))
            .take(limit)
            .map(|(_, r)| r.clone())
            .collect()
    }

    pub fn progress(&self) -> Progress {
        self.current().progress
    }

    pub fn verdict(&self, id: &str) -> Option<Verdict> {
        let &i = self.index.get(id)?;
        self.current().verdicts.get(&i).map(|(v, _)| *v)
    }

    /// Records a decision now.
    pub fn decide(&self, id: &str, verdict: Verdict, annotator: &str) -> Result<Progress> {
        self.decide_at(id, verdict, annotator, Utc::now())
    }

    /// Appends the decision to the log, then publishes the new state.
    pub fn decide_at(&self, id: &str, verdict: Verdict, annotator: &str, timestamp: DateTime<Utc>) -> Result<Progress> {
        let &i = self
            .index
            .get(id)
            .ok_or_else(|| Error::Validation(format!("unknown record '{id}'")))?;
        let decision = ReviewDecision {
            record_id: id.to_string(),
            verdict,
            annotator: annotator.to_string(),
            timestamp,
        };
        let mut app = self.appender.lock().expect("appender lock");
        if let Some(file) = app.file.as_mut() {
            let mut line = serde_json::to_string(&decision).expect("decision serializes");
            line.push('\n');
            let path = self.log_path.as_deref().unwrap_or(Path::new("decision log"));
            file.write_all(line.as_bytes()).map_err(|e| Error::io(path, e))?;
            file.flush().map_err(|e| Error::io(path, e))?;
        }
        app.log.push(decision);
        let mut next = (*self.current()).clone();
        next.set(i, verdict, Some(annotator.to_string()));
        let progress = next.progress;
        *self.snapshot.write().expect("snapshot lock") = Arc::new(next);
        Ok(progress)
    }

    /// Decisions made in this session (including any replayed at open), in log order.
    pub fn log(&self) -> Vec<ReviewDecision> {
        self.appender.lock().expect("appender lock").log.clone()
    }

    /// The manifest with every decision applied.
    pub fn reviewed_manifest(&self) -> Manifest {
        let snap = self.current();
        let mut out = (*self.manifest).clone();
        for (&i, (v, who)) in &snap.verdicts {
            let meta = &mut out.records[i].meta;
            meta.insert(META_REVIEW.into(), Value::from(v.as_str()));
            if let Some(who) = who {
                meta.insert(META_ANNOTATOR.into(), Value::from(who.clone()));
            }
        }
        out
    }

    /// Flushes the log to stable storage.
    pub fn sync(&self) -> Result<()> {
        let app = self.appender.lock().expect("appender lock");
        if let (Some(file), Some(path)) = (app.file.as_ref(), self.log_path.as_deref()) {
            file.sync_all().map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datasets::Label;
    use chrono::TimeZone;

    fn manifest(n: usize) -> Manifest {
        Manifest::new(
            (0..n)
                .map(|i| SampleRecord::new(format!("r{i}"), format!("img/r{i}.png"), Label::Fake, "S"))
                .collect(),
        )
        .unwrap()
    }

    fn at(s: i64) -> DateTime<Utc> {
        Utc.timestamp_opt(1_700_000_000 + s, 0).unwrap()
    }

    #[test]
    fn pending_and_progress_follow_decisions() {
        let s = ReviewSession::in_memory(manifest(3)).unwrap();
        assert_eq!(s.pending(10).len(), 3);
        let p = s.decide_at("r1", Verdict::Keep, "ann", at(0)).unwrap();
        assert_eq!(p, Progress { total: 3, decided: 1, kept: 1, dropped: 0 });
        let ids: Vec<_> = s.pending(10).into_iter().map(|r| r.id).collect();
        assert_eq!(ids, vec!["r0", "r2"]);
        assert_eq!(s.pending(1).len(), 1);
        // overwrite: still one decided
        let p = s.decide_at("r1", Verdict::Drop, "ann", at(1)).unwrap();
        assert_eq!(p, Progress { total: 3, decided: 1, kept: 0, dropped: 1 });
        assert!(matches!(s.decide("zz", Verdict::Keep, "ann"), Err(Error::Validation(_))));
    }

    #[test]
    fn replay_reproduces_state_and_is_idempotent() {
        let m = manifest(4);
        let s = ReviewSession::in_memory(m.clone()).unwrap();
        s.decide_at("r0", Verdict::Keep, "a", at(0)).unwrap();
        s.decide_at("r2", Verdict::Drop, "b", at(1)).unwrap();
        s.decide_at("r0", Verdict::Drop, "a", at(2)).unwrap();
        let log = s.log();
        let once = replay(&log, &m).unwrap();
        assert_eq!(once, s.reviewed_manifest());
        assert_eq!(replay(&log, &once).unwrap(), once);
        assert_eq!(once.get("r0").unwrap().meta_str(META_REVIEW), Some("drop"));
    }

    #[test]
    fn log_file_resumes_session() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("decisions.jsonl");
        {
            let s = ReviewSession::open(manifest(3), &path).unwrap();
            s.decide_at("r0", Verdict::Keep, "a", at(0)).unwrap();
            s.decide_at("r1", Verdict::Drop, "a", at(1)).unwrap();
            s.sync().unwrap();
        }
        let log = load_log(&path).unwrap();
        assert_eq!(log.len(), 2);
        let resumed = ReviewSession::open(manifest(3), &path).unwrap();
        assert_eq!(resumed.progress().decided, 2);
        assert_eq!(resumed.pending(10).len(), 1);
        assert_eq!(resumed.reviewed_manifest(), replay(&log, &manifest(3)).unwrap());
    }

    #[test]
    fn torn_tail_ignored_but_corruption_reported() {
        let good = serde_json::to_string(&ReviewDecision {
            record_id: "r0".into(),
            verdict: Verdict::Keep,
            annotator: "a".into(),
            timestamp: at(0),
        })
        .unwrap();
        assert_eq!(parse_log(&format!("{good}\n{{\"record_id\":\"r1\",\"ver")).unwrap().len(), 1);
        assert!(matches!(parse_log(&format!("garbage\n{good}\n")), Err(Error::Parse { line: 1, .. })));
    }

    #[test]
    fn manifest_verdicts_count_as_decided() {
        let mut m = manifest(2);
        m.records[0].meta.insert(META_REVIEW.into(), Value::from("keep"));
        let s = ReviewSession::in_memory(m).unwrap();
        assert_eq!(s.progress(), Progress { total: 2, decided: 1, kept: 1, dropped: 0 });
        assert_eq!(s.pending(5).len(), 1);
    }

    #[test]
    fn verdict_parsing() {
        assert_eq!("keep".parse::<Verdict>().unwrap(), Verdict::Keep);
        assert!("KEEP".parse::<Verdict>().is_err());
    }
}
