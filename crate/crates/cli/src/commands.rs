use std::fs;
use std::io::Write;
use std::path::Path;

use noisenet_core::active::{predict_event, TriagePolicy};
use noisenet_core::event::duration_seconds;
use noisenet_core::ingest::{load_dataset, parse_event, save_dataset, Dataset, LevelStream};
use noisenet_core::nn::gradcheck::{check_all, GradcheckOptions};
use noisenet_core::nn::{load_checkpoint, save_checkpoint, NetworkConfig};
use noisenet_core::preprocess::fit_duration_stats;
use noisenet_core::synth::{generate_synthetic_dataset, generate_variant_events};
use noisenet_core::training::{accuracy_histogram, histogram_csv, kfold_cv, train as train_network, CvReport, TrainConfig};
use serde::Serialize;
use serde_json::json;

use crate::{
    ClassifyArgs, CvArgs, DetectArgs, Failure, GradcheckArgs, HistogramArgs, IngestArgs, ServeArgs, SynthArgs,
    TrainArgs, TrainOverrides,
};

type CmdResult = Result<(), Failure>;

fn log_resolved(command: &str, resolved: &impl Serialize) {
    let text = serde_json::to_string(resolved).expect("config serializes");
    tracing::info!(command, "resolved config: {text}");
}

fn require_file(path: &Path) -> CmdResult {
    if path.is_file() {
        Ok(())
    } else {
        Err(Failure::Data(format!("{}: no such file", path.display())))
    }
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T, Failure> {
    require_file(path)?;
    let text = fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write_file(path: &Path, contents: &[u8]) -> CmdResult {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))
}

fn load(path: &Path) -> Result<Dataset, Failure> {
    require_file(path)?;
    load_dataset(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn print_json(value: &impl Serialize) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", serde_json::to_string(value).expect("output serializes"));
}

fn resolve_train(o: &TrainOverrides) -> Result<TrainConfig, Failure> {
    let mut config: TrainConfig = match &o.config {
        Some(p) => read_json(p)?,
        None => TrainConfig::default(),
    };
    if let Some(s) = o.seed {
        config.seed = s;
    }
    if let Some(s) = o.steps {
        config.steps = s;
    }
    if let Some(b) = o.batch_size {
        config.batch_size = b;
    }
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    Ok(config)
}

pub fn ingest(a: IngestArgs) -> CmdResult {
    log_resolved("ingest", &a);
    let ds = load(&a.path)?;
    let durations = fit_duration_stats(ds.events()).ok();
    if let Some(out) = &a.out {
        save_dataset(out, &ds)?;
    }
    let lengths: Vec<usize> = ds.events().iter().map(duration_seconds).collect();
    print_json(&json!({
        "events": ds.len(),
        "classes": ds.class_counts(),
        "unlabeled": ds.len() - ds.class_counts().values().sum::<usize>(),
        "min_duration_s": lengths.iter().min(),
        "max_duration_s": lengths.iter().max(),
        "duration_stats": durations,
    }));
    Ok(())
}

pub fn synth(a: SynthArgs) -> CmdResult {
    log_resolved("synth", &a);
    let ds = match a.variant {
        Some(n) => Dataset::new(generate_variant_events(n, a.seed, a.difficulty)?)?,
        None => generate_synthetic_dataset(a.n_per_class, a.seed, a.difficulty)?,
    };
    save_dataset(&a.out, &ds)?;
    print_json(&json!({ "events": ds.len(), "classes": ds.class_counts(), "out": a.out }));
    Ok(())
}

pub fn train(a: TrainArgs) -> CmdResult {
    let config = resolve_train(&a.train)?;
    log_resolved("train", &json!({ "args": &a, "train": &config }));
    let data = load(&a.data)?;
    let val = a.val.as_deref().map(load).transpose()?;
    let mut out = train_network(data.events(), val.as_ref().map(Dataset::events), &config)?;
    out.network.set_version(&a.model_version);
    save_checkpoint(&out.network, Some(&out.adam), &a.out)?;
    print_json(&json!({
        "checkpoint": a.out,
        "train_events": data.len(),
        "steps": config.steps,
        "final": out.history.last(),
    }));
    Ok(())
}

pub fn cv(a: CvArgs) -> CmdResult {
    let config = resolve_train(&a.train)?;
    let workers = a
        .workers
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()));
    if workers == 0 {
        return Err(Failure::Usage("--workers must be >= 1".into()));
    }
    let histogram = a.histogram.clone().unwrap_or_else(|| a.report.with_extension("csv"));
    log_resolved(
        "cv",
        &json!({ "args": &a, "train": &config, "workers": workers, "histogram": &histogram }),
    );
    accuracy_histogram(&[], a.bin_width).map_err(|e| Failure::Usage(e.to_string()))?;
    let data = load(&a.data)?;
    let report = kfold_cv(&data, a.k, a.seeds, &config, workers)?;
    let bins = accuracy_histogram(&report.accuracies(), a.bin_width)?;
    write_file(&a.report, &serde_json::to_vec_pretty(&report).expect("report serializes"))?;
    write_file(&histogram, histogram_csv(&bins).as_bytes())?;
    print_json(&json!({
        "runs": report.runs.len(),
        "median_accuracy": report.median_accuracy,
        "std_accuracy": report.std_accuracy,
        "report": a.report,
        "histogram": histogram,
    }));
    Ok(())
}

pub fn classify(a: ClassifyArgs) -> CmdResult {
    log_resolved("classify", &a);
    let policy = TriagePolicy {
        entropy_threshold: a.threshold,
        ..TriagePolicy::default()
    };
    policy.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    require_file(&a.model)?;
    let (net, _) = load_checkpoint(&a.model)?;
    require_file(&a.event)?;
    let text = fs::read_to_string(&a.event).map_err(|e| Failure::Data(format!("{}: {e}", a.event.display())))?;
    let records: Vec<(usize, &str)> = if serde_json::from_str::<serde_json::Value>(&text).is_ok() {
        vec![(1, text.trim())]
    } else {
        text.lines()
            .enumerate()
            .filter(|(_, l)| !l.trim().is_empty())
            .map(|(i, l)| (i + 1, l))
            .collect()
    };
    for (line, record) in records {
        let event = parse_event(record, line).map_err(|e| Failure::Data(format!("{}: {e}", a.event.display())))?;
        let prediction = predict_event(&net, &event, &policy)?;
        print_json(&json!({
            "event_id": event.event_id,
            "predicted_class": prediction.predicted_class(),
            "prediction": prediction,
        }));
    }
    Ok(())
}

pub fn gradcheck(a: GradcheckArgs) -> CmdResult {
    let config: NetworkConfig = match &a.config {
        Some(p) => read_json(p)?,
        None => NetworkConfig::default(),
    };
    let opts = GradcheckOptions {
        step: a.step,
        max_coords: a.max_coords,
        tolerance: a.tolerance,
        seed: a.seed,
    };
    log_resolved("gradcheck", &json!({ "network": &config, "options": opts }));
    config.validate().map_err(|e| Failure::Usage(e.to_string()))?;
    let report = check_all(&config, &opts)?;
    for l in &report.layers {
        print_json(&json!({
            "layer": l.layer,
            "checked": l.checked,
            "skipped": l.skipped,
            "max_rel_error": l.max_rel_error,
            "tolerance": l.tolerance,
            "passed": l.passed(),
        }));
    }
    if report.passed() {
        Ok(())
    } else {
        let names: Vec<&str> = report.failures().map(|l| l.layer.as_str()).collect();
        Err(Failure::Runtime(format!("gradient check failed for {}", names.join(", "))))
    }
}

pub fn histogram(a: HistogramArgs) -> CmdResult {
    log_resolved("histogram", &a);
    let report: CvReport = read_json(&a.report)?;
    let bins = accuracy_histogram(&report.accuracies(), a.bin_width)?;
    write_file(&a.out, histogram_csv(&bins).as_bytes())?;
    print_json(&json!({ "bins": bins.len(), "runs": report.runs.len(), "out": a.out }));
    Ok(())
}

fn read_stream(path: &Path) -> Result<LevelStream, Failure> {
    require_file(path)?;
    let text = fs::read_to_string(path).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))?;
    let bad = |line: usize, m: String| Failure::Data(format!("{}:{line}: {m}", path.display()));
    let mut samples = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let (ts, level) = line
            .split_once(',')
            .ok_or_else(|| bad(i + 1, "expected `timestamp,level`".into()))?;
        let ts = ts.trim();
        let parsed = ts.parse::<chrono::DateTime<chrono::Utc>>();
        if i == 0 && parsed.is_err() {
            continue;
        }
        let ts = parsed.map_err(|e| bad(i + 1, format!("timestamp `{ts}`: {e}")))?;
        let level: f64 = level
            .trim()
            .parse()
            .map_err(|_| bad(i + 1, format!("level `{}` is not a number", level.trim())))?;
        samples.push((ts, level));
    }
    LevelStream::new(samples).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

pub fn detect(a: DetectArgs) -> CmdResult {
    log_resolved("detect", &a);
    let stream = read_stream(&a.stream)?;
    for (start, end) in noisenet_core::ingest::detect_events(&stream) {
        let s = stream.samples();
        let peak = s[start..=end].iter().map(|x| x.1).fold(f64::NEG_INFINITY, f64::max);
        print_json(&json!({
            "start_index": start,
            "end_index": end,
            "start_time": s[start].0,
            "end_time": s[end].0,
            "duration_seconds": end - start + 1,
            "peak_dba": peak,
        }));
    }
    Ok(())
}

pub fn serve(a: ServeArgs) -> CmdResult {
    let config = noisenet_service::ServiceConfig::load(a.config.as_deref())?;
    log_resolved("serve", &config);
    let runtime = tokio::runtime::Runtime::new().map_err(|e| Failure::Runtime(e.to_string()))?;
    runtime.block_on(async {
        let server = noisenet_service::Server::bind(config).await?;
        let addr = server.local_addr()?;
        print_json(&json!({ "listening": format!("http://{addr}") }));
        server.run().await
    })?;
    Ok(())
}
