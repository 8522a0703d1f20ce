use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use mdb_core::boosting::{StrategyConfig, StrategyKind, TrainOptions};
use mdb_core::curation::canny::{EdgeMetric, VarianceMode};
use mdb_core::curation::image::Image;
use mdb_core::curation::{merge_sidecar, parse_stages, run_pipeline, FsImageStore, PipelineContext, StageConfig};
use mdb_core::datasets::{
    load_manifest, make_mixture, merge_sources, save_manifest, split_records, Manifest, MixtureSpec, SplitRatios,
};
use mdb_core::experiment::{
    format_rows, run_strategies, run_sweep, strategies_for, ExperimentConfig, ExperimentData, ReportRow, RunResult,
    TestSet,
};
use mdb_core::metrics::{evaluate, ScoredSet, DEFAULT_THRESHOLD};
use mdb_core::par::Execution;
use mdb_core::review::ReviewSession;
use mdb_core::spectra::{average_spectrum, Plane, DEFAULT_SIGMA};
use mdb_core::tensor::Activation;
use serde_json::Value;

use crate::cli::{Cli, Command, CurateArgs, EvalArgs, MixtureArgs, ServeArgs, SpectraArgs, TrainArgs};
use crate::server::{serve, AppState};
use crate::settings::Settings;
use crate::CliError;

/// Shared by every subcommand.
pub struct Context {
    pub seed: u64,
    pub settings: Settings,
    pub exec: Execution,
}

pub fn dispatch(cli: Cli) -> Result<(), CliError> {
    let settings = Settings::load(cli.config.as_deref())?;
    let seed = settings.resolve(cli.seed, "seed", 0u64)?;
    let sequential = cli.sequential || settings.resolve(None, "sequential", false)?;
    let ctx = Context {
        seed,
        settings,
        exec: if sequential { Execution::Sequential } else { Execution::default() },
    };
    match cli.command {
        Command::Curate(a) => curate(&ctx, a),
        Command::Train(a) => train(&ctx, a),
        Command::Eval(a) => eval(&ctx, a),
        Command::Spectra(a) => spectra(&ctx, a),
        Command::ServeReview(a) => serve_review(&ctx, a),
        Command::Mixture(a) => mixture(&ctx, a),
    }
}

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn parse_named<T: FromStr>(value: &str, what: &str) -> Result<T, CliError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e| usage(format!("bad {what} '{value}': {e}")))
}

fn non_negative(name: &str, v: f64) -> Result<f64, CliError> {
    if !(v.is_finite() && v >= 0.0) {
        return Err(usage(format!("--{name} must be a finite non-negative number, got {v}")));
    }
    Ok(v)
}

fn comma_list(s: &str) -> Vec<String> {
    s.split(',').map(str::trim).filter(|t| !t.is_empty()).map(String::from).collect()
}

fn parent_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

pub fn stage_config(s: &Settings, a: &CurateArgs) -> Result<StageConfig, CliError> {
    let d = StageConfig::default();
    let edge_metric = match s.resolve_opt(a.edge_metric.clone(), "edge-metric")?.as_deref() {
        None | Some("components") => EdgeMetric::Components,
        Some("pixel-fraction") => EdgeMetric::PixelFraction,
        Some(other) => return Err(usage(format!("unknown edge metric '{other}'"))),
    };
    let variance_mode = match s.resolve_opt(a.variance_mode.clone(), "variance-mode")?.as_deref() {
        None | Some("per-channel") => VarianceMode::PerChannel,
        Some("pooled") => VarianceMode::Pooled,
        Some(other) => return Err(usage(format!("unknown variance mode '{other}'"))),
    };
    let words = s.resolve_opt(a.exclude_words.clone(), "exclude-words")?;
    let crop_size = s.resolve(a.crop_size, "crop-size", d.crop_size)?;
    if crop_size == 0 {
        return Err(usage("--crop-size must be > 0"));
    }
    Ok(StageConfig {
        prompt_threshold: non_negative("prompt-threshold", s.resolve(a.prompt_threshold, "prompt-threshold", d.prompt_threshold)?)?,
        detect_threshold: non_negative("detect-threshold", s.resolve(a.detect_threshold, "detect-threshold", d.detect_threshold)?)?,
        edge_threshold: non_negative("edge-threshold", s.resolve(a.edge_threshold, "edge-threshold", d.edge_threshold)?)?,
        color_threshold: non_negative("color-threshold", s.resolve(a.color_threshold, "color-threshold", d.color_threshold)?)?,
        exclusion_words: words.map_or(d.exclusion_words, |w| comma_list(&w)),
        crop_size,
        min_face_px: non_negative("min-face-px", s.resolve(a.min_face_px, "min-face-px", d.min_face_px)?)?,
        edge_metric,
        variance_mode,
        canny: d.canny,
    })
}

pub const DEFAULT_STAGES: &str = "prompt,detect,style,manual,crop";

fn curate(ctx: &Context, a: CurateArgs) -> Result<(), CliError> {
    let config = stage_config(&ctx.settings, &a)?;
    let stage_list = ctx.settings.resolve(a.stages.clone(), "stages", DEFAULT_STAGES.to_string())?;
    let stages = parse_stages(&stage_list).map_err(|e| usage(e.to_string()))?;
    let mut manifest = load_manifest(&a.manifest)?;
    for sidecar in &a.scores {
        let text = fs::read_to_string(sidecar).map_err(|e| CliError::Runtime(format!("{}: {e}", sidecar.display())))?;
        let merged = merge_sidecar(&mut manifest, &text)
            .map_err(|e| CliError::Runtime(format!("{}: {e}", sidecar.display())))?;
        if merged.unmatched > 0 {
            eprintln!("{}: {} sidecar rows matched no record", sidecar.display(), merged.unmatched);
        }
    }
    let image_root = ctx
        .settings
        .resolve_opt(a.image_root.clone(), "image-root")?
        .unwrap_or_else(|| parent_dir(&a.manifest));
    let crop_dir = a.crop_dir.clone().unwrap_or_else(|| parent_dir(&a.out).join("crops"));
    let store = FsImageStore::new(&image_root).with_crop_dir(crop_dir);
    let pctx = PipelineContext {
        images: &store,
        exec: ctx.exec,
    };
    let (out, report) = run_pipeline(&manifest, &config, &stages, &pctx)?;
    save_manifest(&out, &a.out)?;
    print!("{report}");
    for row in &report.stages {
        if !row.missing_ids.is_empty() {
            let shown: Vec<&str> = row.missing_ids.iter().take(5).map(String::as_str).collect();
            let more = row.missing_ids.len().saturating_sub(shown.len());
            let tail = if more > 0 { format!(" (+{more} more)") } else { String::new() };
            eprintln!("{}: missing {}{tail}", row.stage, shown.join(", "));
        }
    }
    if let Some(path) = &a.report {
        let json = serde_json::to_string_pretty(&report).expect("report serializes");
        write_file(path, json + "\n")?;
    }
    Ok(())
}

fn parse_strategies(list: &str) -> Result<Vec<StrategyKind>, CliError> {
    if list.trim() == "all" {
        return Ok(StrategyKind::ALL.to_vec());
    }
    let kinds: Vec<StrategyKind> = comma_list(list)
        .iter()
        .map(|s| s.parse().map_err(|e: mdb_core::Error| usage(e.to_string())))
        .collect::<Result<_, _>>()?;
    if kinds.is_empty() {
        return Err(usage("no strategy given"));
    }
    Ok(kinds)
}

fn parse_floats(list: &str, what: &str) -> Result<Vec<f64>, CliError> {
    comma_list(list).iter().map(|v| parse_named(v, what)).collect()
}

/// Resolves flags and config into an experiment config plus strategy list.
pub fn experiment_config(ctx: &Context, a: &TrainArgs) -> Result<(ExperimentConfig, Vec<StrategyKind>), CliError> {
    let s = &ctx.settings;
    let base = ExperimentConfig::default();
    let mut strategy = StrategyConfig::new(StrategyKind::Mdb);
    strategy.cap_c = s.resolve(a.cap_c, "cap-c", strategy.cap_c)?;
    strategy.momentum_m = s.resolve(a.momentum, "momentum", strategy.momentum_m)?;
    strategy.kd_temperature = s.resolve(a.kd_temperature, "kd-temperature", strategy.kd_temperature)?;
    strategy.kd_beta = s.resolve(a.kd_beta, "kd-beta", strategy.kd_beta)?;
    strategy.weight_decay = s.resolve(a.weight_decay, "weight-decay", strategy.weight_decay)?;
    strategy.validate().map_err(|e| usage(e.to_string()))?;

    let d = TrainOptions::default();
    let options = TrainOptions {
        epochs: s.resolve(a.epochs, "epochs", d.epochs)?,
        batch_size: s.resolve(a.batch_size, "batch-size", d.batch_size)?,
        seed: ctx.seed,
        lr: s.resolve(a.lr, "lr", d.lr)?,
        beta1: s.resolve(a.beta1, "beta1", d.beta1)?,
        beta2: s.resolve(a.beta2, "beta2", d.beta2)?,
    };
    if options.epochs == 0 || options.batch_size == 0 {
        return Err(usage("--epochs and --batch-size must be >= 1"));
    }
    if !(options.lr > 0.0 && options.lr.is_finite()) {
        return Err(usage("--lr must be > 0"));
    }
    let hidden = s.resolve_opt(a.hidden.clone(), "hidden")?;
    let hidden_dims = match hidden {
        None => base.hidden_dims.clone(),
        Some(h) => comma_list(&h)
            .iter()
            .map(|v| parse_named(v, "hidden width"))
            .collect::<Result<_, _>>()?,
    };
    let activation = match s.resolve_opt(a.activation.clone(), "activation")? {
        None => base.activation,
        Some(v) => v.parse::<Activation>().map_err(|e| usage(e.to_string()))?,
    };
    let threshold = s.resolve(a.threshold, "threshold", DEFAULT_THRESHOLD)?;
    if !(0.0..=1.0).contains(&threshold) {
        return Err(usage("--threshold must lie in [0, 1]"));
    }
    let sweep = match s.resolve_opt(a.sweep_c.clone(), "sweep-c")? {
        None => Vec::new(),
        Some(list) => {
            let values = parse_floats(&list, "scale factor")?;
            if values.is_empty() || values.iter().any(|c| !(*c >= 1.0 && c.is_finite())) {
                return Err(usage("--sweep-c values must be >= 1"));
            }
            values
        }
    };
    let kinds = parse_strategies(&s.resolve(a.strategy.clone(), "strategy", "mdb".to_string())?)?;
    let config = ExperimentConfig {
        strategy,
        options,
        hidden_dims,
        activation,
        train_sources: s.resolve_opt(a.train_sources.clone(), "train-sources")?.map_or_else(Vec::new, |v| comma_list(&v)),
        test_sources: s.resolve_opt(a.test_sources.clone(), "test-sources")?.map_or_else(Vec::new, |v| comma_list(&v)),
        per_source: true,
        threshold,
        sweep,
    };
    Ok((config, kinds))
}

fn load_test_sets(specs: &[String]) -> Result<Vec<TestSet>, CliError> {
    specs
        .iter()
        .map(|spec| {
            let (name, path) = match spec.split_once('=') {
                Some((n, p)) if !n.is_empty() => (n.to_string(), PathBuf::from(p)),
                _ => {
                    let p = PathBuf::from(spec);
                    let stem = p.file_stem().map_or_else(|| spec.clone(), |s| s.to_string_lossy().into_owned());
                    (stem, p)
                }
            };
            Ok(TestSet::new(name, load_manifest(&path)?))
        })
        .collect()
}

fn load_train(paths: &[PathBuf], seed: u64) -> Result<Manifest, CliError> {
    let manifests: Vec<Manifest> = paths.iter().map(load_manifest).collect::<Result<_, _>>()?;
    if manifests.len() == 1 {
        return Ok(manifests.into_iter().next().expect("one manifest"));
    }
    Ok(merge_sources(&manifests, seed)?)
}

fn run_label(r: &RunResult) -> String {
    format!("{}-C{}", r.strategy.kind, r.strategy.cap_c)
}

fn train(ctx: &Context, a: TrainArgs) -> Result<(), CliError> {
    let (config, kinds) = experiment_config(ctx, &a)?;
    let train = load_train(&a.train, ctx.seed)?;
    let tests = load_test_sets(&a.test)?;
    let image_root = ctx.settings.resolve_opt(a.image_root.clone(), "image-root")?;
    let data = ExperimentData {
        train: &train,
        tests: &tests,
        image_root: image_root.as_deref(),
    };
    let results = if config.sweep.is_empty() {
        run_strategies(&config, &strategies_for(&config.strategy, &kinds), &data, ctx.exec)?
    } else {
        run_sweep(&config, &data, ctx.exec)?
    };
    print!("{}", format_rows(&results));
    if let Some(dir) = &a.out_dir {
        for r in &results {
            write_file(&dir.join(format!("{}.jsonl", run_label(r))), r.log.to_jsonl())?;
        }
        let rows: Vec<&ReportRow> = results.iter().flat_map(|r| &r.rows).collect();
        let report = serde_json::json!({ "config": config, "rows": rows });
        write_file(&dir.join("report.json"), serde_json::to_string_pretty(&report).expect("report serializes") + "\n")?;
    }
    Ok(())
}

/// `(id, score, label)` rows from JSONL or delimited text.
pub fn parse_scores(text: &str) -> Result<Vec<(String, f64, Option<usize>)>, CliError> {
    let bad = |line: usize, msg: String| CliError::Runtime(format!("scores line {line}: {msg}"));
    let parse_label = |v: &str| -> Option<usize> {
        match v.trim() {
            "1" | "fake" => Some(1),
            "0" | "real" => Some(0),
            _ => None,
        }
    };
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        if line.starts_with('{') {
            let v: Value = serde_json::from_str(line).map_err(|e| bad(i + 1, e.to_string()))?;
            let id = v.get("id").and_then(Value::as_str).ok_or_else(|| bad(i + 1, "missing id".into()))?;
            let score = v.get("score").and_then(Value::as_f64).ok_or_else(|| bad(i + 1, "missing score".into()))?;
            let label = match v.get("label") {
                None | Some(Value::Null) => None,
                Some(Value::Number(n)) => n.as_u64().and_then(|n| parse_label(&n.to_string())),
                Some(Value::String(s)) => parse_label(s),
                Some(_) => None,
            };
            if v.get("label").is_some_and(|l| !l.is_null()) && label.is_none() {
                return Err(bad(i + 1, "label must be 0/1 or real/fake".into()));
            }
            rows.push((id.to_string(), score, label));
            continue;
        }
        let fields: Vec<&str> = line.split([',', '\t']).map(str::trim).collect();
        if fields.len() < 2 {
            return Err(bad(i + 1, "expected id,score[,label]".into()));
        }
        let Ok(score) = fields[1].parse::<f64>() else {
            if i == 0 {
                continue; // header
            }
            return Err(bad(i + 1, format!("bad score '{}'", fields[1])));
        };
        let label = match fields.get(2) {
            None => None,
            Some(l) => Some(parse_label(l).ok_or_else(|| bad(i + 1, format!("bad label '{l}'")))?),
        };
        rows.push((fields[0].to_string(), score, label));
    }
    Ok(rows)
}

fn eval(ctx: &Context, a: EvalArgs) -> Result<(), CliError> {
    let threshold = ctx.settings.resolve(a.threshold, "threshold", DEFAULT_THRESHOLD)?;
    if !threshold.is_finite() {
        return Err(usage("--threshold must be finite"));
    }
    let text = fs::read_to_string(&a.scores).map_err(|e| CliError::Runtime(format!("{}: {e}", a.scores.display())))?;
    let rows = parse_scores(&text)?;
    let labels: Option<HashMap<String, usize>> = match &a.labels {
        None => None,
        Some(path) => Some(
            load_manifest(path)?
                .records
                .into_iter()
                .map(|r| (r.id, r.label.class()))
                .collect(),
        ),
    };
    let mut scores = Vec::with_capacity(rows.len());
    let mut classes = Vec::with_capacity(rows.len());
    for (id, score, label) in rows {
        let label = match (&labels, label) {
            (Some(map), _) => map.get(&id).copied(),
            (None, l) => l,
        }
        .ok_or_else(|| CliError::Runtime(format!("no label for '{id}'")))?;
        scores.push(score);
        classes.push(label);
    }
    let set = ScoredSet::new(scores, classes)?;
    let report = evaluate(&set, threshold);
    if a.json {
        println!("{}", serde_json::to_string_pretty(&report).expect("report serializes"));
    } else {
        println!("{}", report.line());
    }
    Ok(())
}

fn group_key(mode: &str, source: &str, label: &str) -> String {
    match mode {
        "source" => source.to_string(),
        "label" => label.to_string(),
        "all" => "all".to_string(),
        _ => format!("{source}-{label}"),
    }
}

fn spectra(ctx: &Context, a: SpectraArgs) -> Result<(), CliError> {
    let mode = ctx.settings.resolve(a.group_by.clone(), "group-by", "source-label".to_string())?;
    if !["source-label", "source", "label", "all"].contains(&mode.as_str()) {
        return Err(usage(format!("unknown grouping '{mode}'")));
    }
    let sigma = ctx.settings.resolve(a.sigma, "sigma", DEFAULT_SIGMA)?;
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(usage("--sigma must be > 0"));
    }
    let manifest = load_manifest(&a.manifest)?;
    let root = ctx
        .settings
        .resolve_opt(a.image_root.clone(), "image-root")?
        .unwrap_or_else(|| parent_dir(&a.manifest));
    let mut groups: BTreeMap<String, Vec<&mdb_core::datasets::SampleRecord>> = BTreeMap::new();
    for r in &manifest.records {
        let label = if r.label.class() == 1 { "fake" } else { "real" };
        groups.entry(group_key(&mode, &r.source, label)).or_default().push(r);
    }
    println!("{:<24} {:>6} {:>6}", "group", "images", "size");
    for (name, records) in groups {
        let planes: Vec<Plane> = ctx.exec.try_map(&records, |r| {
            Image::load_png(root.join(&r.path)).map(|img| Plane::from_image(&img))
        })?;
        let spectrum = average_spectrum(&planes, sigma, ctx.exec)?;
        let stem: String = name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' { c } else { '_' }).collect();
        spectrum.save(&a.out, &stem)?;
        println!("{:<24} {:>6} {:>6}", name, planes.len(), spectrum.n);
    }
    Ok(())
}

fn mixture(ctx: &Context, a: MixtureArgs) -> Result<(), CliError> {
    let mut m = make_mixture(&MixtureSpec::canonical(ctx.seed))?;
    if a.split {
        m = split_records(&m, SplitRatios::default(), ctx.seed)?;
    }
    save_manifest(&m, &a.out)?;
    println!("wrote {} records to {}", m.len(), a.out.display());
    Ok(())
}

fn serve_review(ctx: &Context, a: ServeArgs) -> Result<(), CliError> {
    let s = &ctx.settings;
    let manifest = load_manifest(&a.manifest)?;
    let image_root = s.resolve_opt(a.image_root.clone(), "image-root")?.unwrap_or_else(|| parent_dir(&a.manifest));
    let log = s.resolve_opt(a.log.clone(), "log")?.unwrap_or_else(|| {
        let mut p = a.manifest.clone().into_os_string();
        p.push(".decisions.jsonl");
        PathBuf::from(p)
    });
    let host = s.resolve(a.host.clone(), "host", "127.0.0.1".to_string())?;
    let port = s.resolve(a.port, "port", 8080u16)?;
    let ui = s.resolve_opt(a.ui.clone(), "ui")?;
    let session = ReviewSession::open(manifest, &log)?;
    let state = Arc::new(AppState::new(session, image_root, ui));
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::Runtime(e.to_string()))?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::bind((host.as_str(), port))
            .await
            .map_err(|e| CliError::Runtime(format!("cannot bind {host}:{port}: {e}")))?;
        let addr = listener.local_addr().map_err(|e| CliError::Runtime(e.to_string()))?;
        println!("review service on http://{addr} (log: {})", log.display());
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
        };
        serve(listener, state, shutdown).await.map_err(|e| CliError::Runtime(e.to_string()))
    })
}
