use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use mdb_core::curation::image::Image;
use mdb_core::curation::CurationReport;
use mdb_core::datasets::{load_manifest, save_manifest, Label, Manifest, SampleRecord};
use mdb_core::experiment::ReportRow;
use mdb_core::spectra::Spectrum;
use serde_json::{json, Value};
use tempfile::TempDir;

fn mdb(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mdb")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const PROMPT: [f64; 10] = [0.9, 0.1, 0.5, 0.7, 0.49, 0.8, 0.2, 0.95, 0.3, 0.6];
const DET: [f64; 10] = [0.9, 0.9, 0.2, 0.5, 0.9, 0.7, 0.9, 0.1, 0.9, 0.55];

/// Ten records without scores plus a sidecar carrying them.
fn curate_fixture(dir: &Path) {
    let records = (0..10)
        .map(|i| SampleRecord::new(format!("r{i}"), format!("r{i}.png"), Label::Fake, "gen"))
        .collect();
    save_manifest(&Manifest::new(records).unwrap(), dir.join("in.jsonl")).unwrap();
    let sidecar: String = (0..10)
        .map(|i| json!({"id": format!("r{i}"), "prompt_face_score": PROMPT[i], "det_conf": DET[i]}).to_string() + "\n")
        .collect();
    fs::write(dir.join("scores.jsonl"), sidecar).unwrap();
}

#[test]
fn curate_reproduces_two_stage_counts() {
    let dir = TempDir::new().unwrap();
    curate_fixture(dir.path());
    let (input, out, report, scores) = (
        dir.path().join("in.jsonl"),
        dir.path().join("out.jsonl"),
        dir.path().join("report.json"),
        dir.path().join("scores.jsonl"),
    );
    let o = mdb(&["curate", "--manifest", p(&input), "--out", p(&out), "--report", p(&report), "--scores", p(&scores), "--stages", "prompt,detect"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r: CurationReport = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    let counts: Vec<_> = r.stages.iter().map(|s| (s.input, s.retained, s.dropped)).collect();
    assert_eq!(counts, vec![(10, 6, 4), (6, 4, 2)]);
    assert!(r.is_consistent());
    let ids: Vec<_> = load_manifest(&out).unwrap().records.into_iter().map(|r| r.id).collect();
    assert_eq!(ids, ["r0", "r3", "r5", "r9"]);
    assert!(stdout(&o).contains("prompt"));
}

#[test]
fn curate_empty_stage_list_copies_manifest() {
    let dir = TempDir::new().unwrap();
    curate_fixture(dir.path());
    let (input, out, report) = (dir.path().join("in.jsonl"), dir.path().join("out.jsonl"), dir.path().join("r.json"));
    let o = mdb(&["curate", "--manifest", p(&input), "--out", p(&out), "--report", p(&report), "--stages", ""]);
    assert!(o.status.success());
    assert_eq!(load_manifest(&out).unwrap(), load_manifest(&input).unwrap());
    let r: CurationReport = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(r.stages.is_empty());
}

#[test]
fn usage_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    curate_fixture(dir.path());
    let (input, out) = (dir.path().join("in.jsonl"), dir.path().join("out.jsonl"));
    let o = mdb(&["curate", "--manifest", p(&input), "--out", p(&out), "--prompt-threshold", "-0.5"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("prompt-threshold"));
    assert!(!out.exists());
    assert_eq!(mdb(&["curate", "--manifest", p(&input), "--out", p(&out), "--stages", "prompt,blur"]).status.code(), Some(2));
    assert_eq!(mdb(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(mdb(&["train", "--train", p(&input), "--test", p(&input), "--strategy", "boost"]).status.code(), Some(2));
    assert_eq!(mdb(&["--help"]).status.code(), Some(0));
}

#[test]
fn runtime_errors_exit_one() {
    let dir = TempDir::new().unwrap();
    let missing = dir.path().join("nope.jsonl");
    let o = mdb(&["curate", "--manifest", p(&missing), "--out", p(&dir.path().join("o.jsonl"))]);
    assert_eq!(o.status.code(), Some(1));
    fs::write(dir.path().join("bad.jsonl"), "{\"id\": \"a\"}\nnot json\n").unwrap();
    let o = mdb(&["eval", "--scores", p(&dir.path().join("bad.jsonl"))]);
    assert_eq!(o.status.code(), Some(1));
}

fn mixture(dir: &Path, seed: &str) -> String {
    let path = dir.join(format!("mix{seed}.jsonl"));
    assert!(mdb(&["--seed", seed, "mixture", "--out", p(&path), "--split"]).status.success());
    p(&path).to_string()
}

fn report_rows(dir: &Path) -> Vec<ReportRow> {
    let v: Value = serde_json::from_str(&fs::read_to_string(dir.join("report.json")).unwrap()).unwrap();
    serde_json::from_value(v["rows"].clone()).unwrap()
}

#[test]
fn train_is_deterministic_and_reports_both_strategies() {
    let dir = TempDir::new().unwrap();
    let mix = mixture(dir.path(), "0");
    let test = format!("mix={mix}");
    let run = |out: &str| {
        let out = dir.path().join(out);
        let o = mdb(&["--seed", "0", "train", "--train", &mix, "--test", &test, "--strategy", "vanilla,mdb", "--out-dir", p(&out)]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        (stdout(&o), out)
    };
    let (a, out_a) = run("a");
    let (b, out_b) = run("b");
    assert_eq!(a, b);
    assert_eq!(fs::read(out_a.join("report.json")).unwrap(), fs::read(out_b.join("report.json")).unwrap());
    assert_eq!(fs::read(out_a.join("mdb-C5.jsonl")).unwrap(), fs::read(out_b.join("mdb-C5.jsonl")).unwrap());
    let rows = report_rows(&out_a);
    let pooled: Vec<_> = rows.iter().filter(|r| r.dataset == "mix").map(|r| r.strategy.as_str()).collect();
    assert_eq!(pooled, ["vanilla", "mdb"]);
    assert!(rows.iter().all(|r| r.within_bounds() && r.eer.is_some() && r.auc.is_some()));
}

#[test]
fn cross_domain_row_names_held_out_source() {
    let dir = TempDir::new().unwrap();
    let mix = mixture(dir.path(), "3");
    let out = dir.path().join("out");
    let o = mdb(&[
        "--seed", "3", "train", "--train", &mix, "--test", &format!("mix={mix}"), "--train-sources", "easy", "--test-sources", "hard",
        "--epochs", "2", "--out-dir", p(&out),
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = report_rows(&out);
    assert_eq!(rows.len(), 1);
    assert_eq!(rows[0].dataset, "mix/hard");
    assert_eq!(rows[0].n, 50);
}

#[test]
fn sweep_emits_six_rows_and_config_file_applies() {
    let dir = TempDir::new().unwrap();
    let mix = mixture(dir.path(), "1");
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, "epochs = 1\nbatch-size = 64\ntest-sources = \"hard\"\n").unwrap();
    let out = dir.path().join("out");
    let o = mdb(&["--config", p(&cfg), "train", "--train", &mix, "--test", &format!("mix={mix}"), "--sweep-c", "--out-dir", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let rows = report_rows(&out);
    let cs: Vec<f64> = rows.iter().map(|r| r.cap_c).collect();
    assert_eq!(cs, [1.0, 3.0, 5.0, 7.0, 9.0, 10.0]);
    assert!(rows.iter().all(|r| r.within_bounds()));
    let log = fs::read_to_string(out.join("mdb-C7.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 1);
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "epochs = \"many\"\n").unwrap();
    assert_eq!(mdb(&["--config", p(&bad), "train", "--train", &mix, "--test", &mix]).status.code(), Some(2));
}

#[test]
fn eval_reads_csv_and_manifest_labels() {
    let dir = TempDir::new().unwrap();
    let csv = dir.path().join("s.csv");
    fs::write(&csv, "id,score,label\na,0.1,0\nb,0.4,0\nc,0.35,1\nd,0.8,1\n").unwrap();
    let o = mdb(&["eval", "--scores", p(&csv), "--json"]);
    assert!(o.status.success());
    let v: Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["auc"], 0.75);
    assert_eq!(v["acc"], 0.75);

    let records = ["a", "b", "c", "d"]
        .iter()
        .zip([Label::Real, Label::Real, Label::Fake, Label::Fake])
        .map(|(id, l)| SampleRecord::new(*id, format!("{id}.png"), l, "s"))
        .collect();
    let labels = dir.path().join("labels.jsonl");
    save_manifest(&Manifest::new(records).unwrap(), &labels).unwrap();
    let jsonl = dir.path().join("s.jsonl");
    fs::write(&jsonl, "{\"id\":\"a\",\"score\":0.1}\n{\"id\":\"b\",\"score\":0.4}\n{\"id\":\"c\",\"score\":0.35}\n{\"id\":\"d\",\"score\":0.8}\n").unwrap();
    let o = mdb(&["eval", "--scores", p(&jsonl), "--labels", p(&labels)]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("auc=0.75"), "{}", stdout(&o));
    let unknown = dir.path().join("u.csv");
    fs::write(&unknown, "z,0.5\n").unwrap();
    assert_eq!(mdb(&["eval", "--scores", p(&unknown), "--labels", p(&labels)]).status.code(), Some(1));
}

#[test]
fn spectra_writes_one_artifact_per_group() {
    let dir = TempDir::new().unwrap();
    let mut records = Vec::new();
    for (i, (label, source)) in [(Label::Real, "cam"), (Label::Real, "cam"), (Label::Fake, "gen")].into_iter().enumerate() {
        let img = Image::from_fn(24, 20, 3, |x, y, c| ((x * 7 + y * 3 + c + i * 11) % 256) as u8).unwrap();
        img.save_png(dir.path().join(format!("{i}.png"))).unwrap();
        records.push(SampleRecord::new(format!("{i}"), format!("{i}.png"), label, source));
    }
    let manifest = dir.path().join("m.jsonl");
    save_manifest(&Manifest::new(records).unwrap(), &manifest).unwrap();
    let out = dir.path().join("spectra");
    let o = mdb(&["spectra", "--manifest", p(&manifest), "--out", p(&out)]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for stem in ["cam-real", "gen-fake"] {
        let s = Spectrum::parse_grid_text(&fs::read_to_string(out.join(format!("{stem}.grid"))).unwrap()).unwrap();
        assert_eq!(s.n, 20);
        assert!(out.join(format!("{stem}.pgm")).exists());
    }
    assert_eq!(mdb(&["spectra", "--manifest", p(&manifest), "--out", p(&out), "--group-by", "color"]).status.code(), Some(2));
}
