//! The four pipeline commands behind the thin argument layer in `main`.
//!
//! Functional outputs (variant models, record JSON-lines, reports, CSVs)
//! are byte-stable across reruns with the same config and seed. Everything
//! timing-derived carries `timing` in its filename so determinism checks
//! can exclude it.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use deltadiff_core::analysis::{
    self, anova, compare_labels, diff_report, DiffReport, MatrixCell, TimingComparison,
    VariantPackage, Verdict, RBO_P,
};
use deltadiff_core::exec::{
    self, env_threads, generate_desk_corpus, load_corpus, Backend, Corpus, ExecError,
    ExecutionRecord, RunConfig, TimingBlock,
};
use deltadiff_core::ir::{desk, load_model, save_model, ModelGraph};
use deltadiff_core::variant::{
    self, enumerate_variants, ExperimentConfig, FailedVariant, VariantError, VariantSpec,
};

use crate::{CliError, CommonArgs};

/// Noise calibration used by the demo walkthrough.
const DEMO_SIGMA: f32 = 3.75e-4;
const DEMO_CLAMP: f32 = 0.011;
const DEMO_SEED: u64 = 17;

/// On-disk index of one generated experiment.
#[derive(Serialize, Deserialize)]
struct VariantsManifest {
    variants: Vec<VariantSpec>,
    failures: Vec<FailedVariant>,
}

fn map_variant_err(e: VariantError) -> CliError {
    match e {
        VariantError::Config { .. } => CliError::Config(e.to_string()),
        _ => CliError::Internal(e.to_string()),
    }
}

fn map_exec_err(e: ExecError) -> CliError {
    match e {
        ExecError::Corpus { .. } | ExecError::ZeroStd => CliError::Io(e.to_string()),
        _ => CliError::Internal(e.to_string()),
    }
}

fn map_analysis_err(e: analysis::AnalysisError) -> CliError {
    match e {
        analysis::AnalysisError::CorpusMismatch { .. } | analysis::AnalysisError::Io(_) => {
            CliError::Io(e.to_string())
        }
        _ => CliError::Internal(e.to_string()),
    }
}

fn io_err(context: &str, e: std::io::Error) -> CliError {
    CliError::Io(format!("{context}: {e}"))
}

/// Loads and validates the experiment config, applying CLI overrides.
fn load_config(args: &CommonArgs) -> Result<ExperimentConfig, CliError> {
    let path = args
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required for this command".into()))?;
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
    let mut config: ExperimentConfig = toml::from_str(&text)
        .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
    if let Some(seed) = args.seed {
        config.seed = seed;
    }
    if let Some(out) = &args.out {
        config.out = Some(out.display().to_string());
    }
    config.validate().map_err(map_variant_err)?;
    Ok(config)
}

fn out_dir(config: &ExperimentConfig) -> PathBuf {
    PathBuf::from(config.out.as_deref().unwrap_or("out"))
}

fn resolve_corpus(config: &ExperimentConfig) -> Result<Corpus, CliError> {
    match &config.corpus {
        Some(c) => load_corpus(Path::new(&c.path)).map_err(map_exec_err),
        None => Ok(generate_desk_corpus()),
    }
}

fn run_config(config: &ExperimentConfig) -> RunConfig {
    RunConfig {
        k: config.k,
        repeats: config.repeats,
        warmup: config.warmup,
        threads: env_threads(),
        ..RunConfig::default()
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Internal(format!("serialize {}: {e}", path.display())))?;
    fs::write(path, text + "\n").map_err(|e| io_err("write", e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            CliError::Missing(format!("{} not found; run the previous stage first", path.display()))
        } else {
            io_err("read", e)
        }
    })?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Internal(format!("malformed {}: {e}", path.display())))
}

fn variant_model_path(out: &Path, id: &str) -> PathBuf {
    out.join("variants").join(format!("{id}.json"))
}

/// `deltadiff generate`: materialize the variant matrix onto disk.
pub(crate) fn generate(args: &CommonArgs) -> Result<(), CliError> {
    let config = load_config(args)?;
    let out = out_dir(&config);
    let set = enumerate_variants(&config).map_err(map_variant_err)?;

    fs::create_dir_all(out.join("variants")).map_err(|e| io_err("create variants dir", e))?;
    for v in &set.variants {
        save_model(&v.graph, &variant_model_path(&out, &v.spec.id))
            .map_err(|e| CliError::Io(format!("save {}: {e}", v.spec.id)))?;
    }
    let manifest = VariantsManifest {
        variants: set.variants.iter().map(|v| v.spec.clone()).collect(),
        failures: set.failures.clone(),
    };
    write_json(&out.join("variants.json"), &manifest)?;

    println!(
        "generated {} variants ({} failed conversions) under {}",
        manifest.variants.len(),
        manifest.failures.len(),
        out.display()
    );
    for f in &manifest.failures {
        println!("  FAILED {}: {}", f.spec.id, f.error);
    }
    Ok(())
}

/// `deltadiff run`: execute every generated variant over the corpus.
pub(crate) fn run(args: &CommonArgs) -> Result<(), CliError> {
    let config = load_config(args)?;
    let out = out_dir(&config);
    let manifest: VariantsManifest = read_json(&out.join("variants.json"))?;
    let corpus = resolve_corpus(&config)?;
    let cfg = run_config(&config);

    fs::create_dir_all(out.join("records")).map_err(|e| io_err("create records dir", e))?;
    fs::create_dir_all(out.join("timings")).map_err(|e| io_err("create timings dir", e))?;
    for spec in &manifest.variants {
        let model_path = variant_model_path(&out, &spec.id);
        if !model_path.exists() {
            return Err(CliError::Missing(format!(
                "variant model {} not found; rerun generate",
                model_path.display()
            )));
        }
        let graph = load_model(&model_path)
            .map_err(|e| CliError::Internal(format!("load {}: {e}", spec.id)))?;
        let record = if args.debug {
            exec::run_debug(&spec.id, &graph, &corpus, spec.backend, &cfg)
        } else {
            exec::run_inference(&spec.id, &graph, &corpus, spec.backend, &cfg)
        }
        .map_err(map_exec_err)?;
        // Flush each variant's results as soon as they exist so an
        // interrupted run keeps everything completed so far.
        exec::record::write_jsonl(
            &out.join("records").join(format!("{}.jsonl", spec.id)),
            &record.images,
        )
        .map_err(map_exec_err)?;
        write_json(
            &out.join("timings").join(format!("{}.timing.json", spec.id)),
            &record.timing,
        )?;
        println!("ran {}: {} images x {} repeats", spec.id, record.images.len(), cfg.repeats);
    }
    Ok(())
}

/// One loaded variant ready for pairwise analysis.
struct LoadedVariant {
    spec: VariantSpec,
    graph: ModelGraph,
    record: ExecutionRecord,
}

fn load_variant(out: &Path, spec: &VariantSpec) -> Result<LoadedVariant, CliError> {
    let graph = {
        let path = variant_model_path(out, &spec.id);
        if !path.exists() {
            return Err(CliError::Missing(format!("{} not found", path.display())));
        }
        load_model(&path).map_err(|e| CliError::Internal(format!("load {}: {e}", spec.id)))?
    };
    let records_path = out.join("records").join(format!("{}.jsonl", spec.id));
    if !records_path.exists() {
        return Err(CliError::Missing(format!(
            "{} not found; run the experiment first",
            records_path.display()
        )));
    }
    let images = exec::record::read_jsonl(&records_path).map_err(map_exec_err)?;
    let timing: TimingBlock =
        read_json(&out.join("timings").join(format!("{}.timing.json", spec.id)))?;
    Ok(LoadedVariant {
        spec: spec.clone(),
        graph,
        record: ExecutionRecord {
            variant_id: spec.id.clone(),
            images,
            timing,
        },
    })
}

fn pooled_ns(t: &TimingBlock) -> Vec<f64> {
    t.samples.values().flatten().map(|&ns| ns as f64).collect()
}

/// Per-pair ANOVA outcome for `timing_anova.json`. Degenerate timing data
/// (for example all-identical samples from a coarse clock) is reported, not
/// fatal.
#[derive(Serialize)]
struct AnovaEntry {
    baseline: String,
    variant: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    result: Option<TimingComparison>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

/// `deltadiff analyze`: pairwise reports against the baseline variant plus
/// the full dissimilarity matrix.
pub(crate) fn analyze(args: &CommonArgs) -> Result<(), CliError> {
    let config = load_config(args)?;
    let out = out_dir(&config);
    let manifest: VariantsManifest = read_json(&out.join("variants.json"))?;
    if manifest.variants.is_empty() {
        return Err(CliError::Missing(
            "no successful variants to analyze; every combination failed".into(),
        ));
    }
    let corpus = resolve_corpus(&config)?;
    let loaded: Vec<LoadedVariant> = manifest
        .variants
        .iter()
        .map(|spec| load_variant(&out, spec))
        .collect::<Result<_, _>>()?;

    let analysis_dir = out.join("analysis");
    fs::create_dir_all(analysis_dir.join("pairs")).map_err(|e| io_err("create analysis dir", e))?;

    // The first enumerated variant is the comparison baseline.
    let base = &loaded[0];
    let base_pkg = VariantPackage {
        graph: &base.graph,
        record: &base.record,
    };
    let mut reports: Vec<DiffReport> = Vec::new();
    let mut anova_entries: Vec<AnovaEntry> = Vec::new();
    for v in &loaded {
        let pkg = VariantPackage {
            graph: &v.graph,
            record: &v.record,
        };
        let report =
            diff_report(&base_pkg, &pkg, &corpus.labels, RBO_P).map_err(map_analysis_err)?;

        let pair_dir = analysis_dir.join("pairs").join(&v.spec.id);
        fs::create_dir_all(&pair_dir).map_err(|e| io_err("create pair dir", e))?;
        analysis::write_labels_csv(
            &pair_dir.join("labels_diff.csv"),
            &base.record,
            &v.record,
            RBO_P,
        )
        .map_err(map_analysis_err)?;
        if !report.per_layer.is_empty() {
            analysis::write_layer_csv(&pair_dir.join("layer_diff.csv"), &report.per_layer)
                .map_err(map_analysis_err)?;
        }

        anova_entries.push(
            match anova(&[pooled_ns(&base.record.timing), pooled_ns(&v.record.timing)]) {
                Ok(result) => AnovaEntry {
                    baseline: base.spec.id.clone(),
                    variant: v.spec.id.clone(),
                    result: Some(result),
                    error: None,
                },
                Err(e) => AnovaEntry {
                    baseline: base.spec.id.clone(),
                    variant: v.spec.id.clone(),
                    result: None,
                    error: Some(e.to_string()),
                },
            },
        );
        println!(
            "{} vs {}: dissimilarity {:.2}%, verdict {}",
            base.spec.id, v.spec.id, report.dissimilarity_pct, report.verdict
        );
        reports.push(report);
    }
    analysis::write_reports_json(&analysis_dir.join("reports.json"), &reports)
        .map_err(map_analysis_err)?;
    write_json(&analysis_dir.join("timing_anova.json"), &anova_entries)?;

    write_matrix(&analysis_dir.join("matrix.csv"), &loaded, &manifest.failures)?;
    println!(
        "wrote {} reports and matrix.csv under {}",
        reports.len(),
        analysis_dir.display()
    );
    Ok(())
}

/// Square dissimilarity matrix over every enumerated combination, FAILED
/// cells included.
fn write_matrix(
    path: &Path,
    loaded: &[LoadedVariant],
    failures: &[FailedVariant],
) -> Result<(), CliError> {
    let mut ids: Vec<String> = loaded.iter().map(|v| v.spec.id.clone()).collect();
    ids.extend(failures.iter().map(|f| f.spec.id.clone()));
    let n_ok = loaded.len();
    let mut cells: Vec<Vec<MatrixCell>> = Vec::with_capacity(ids.len());
    for i in 0..ids.len() {
        let mut row = Vec::with_capacity(ids.len());
        for j in 0..ids.len() {
            if i >= n_ok || j >= n_ok {
                row.push(MatrixCell::Failed);
            } else {
                let pct = compare_labels(&loaded[i].record, &loaded[j].record)
                    .map_err(map_analysis_err)?;
                row.push(MatrixCell::Pct(pct));
            }
        }
        cells.push(row);
    }
    analysis::write_matrix_csv(path, &ids, &cells).map_err(map_analysis_err)
}

/// `deltadiff demo`: the fault-injection narrative on tinynet-A, end to
/// end. Exits nonzero only if the repair fails to converge.
pub(crate) fn demo(args: &CommonArgs) -> Result<(), CliError> {
    let seed = args.seed.unwrap_or(DEMO_SEED);
    let out = args
        .out
        .clone()
        .unwrap_or_else(|| PathBuf::from("out/demo"));
    fs::create_dir_all(out.join("timings")).map_err(|e| io_err("create demo dir", e))?;

    let corpus = generate_desk_corpus();
    let model = desk::tinynet_a();
    let cfg = RunConfig {
        repeats: 3,
        threads: env_threads(),
        ..RunConfig::default()
    };

    println!("deltadiff demo: weight-fault narrative on tinynet-A (noise seed {seed})");
    println!(
        "[1] corpus ready: {} images; running the clean source model",
        corpus.len()
    );
    let clean_id = "tinynet-A-source";
    let clean_rec =
        exec::run_debug(clean_id, &model, &corpus, Backend::Reference, &cfg).map_err(map_exec_err)?;

    let noisy = variant::inject_noise(&model, DEMO_SIGMA, DEMO_CLAMP, seed);
    let pd = analysis::parameter_diff(&model, &noisy).map_err(map_analysis_err)?;
    println!(
        "[2] injected conversion fault: sigma {DEMO_SIGMA:.2e}, clamp {DEMO_CLAMP:.2e} \
         -> mean |dw| {:.3e}, max |dw| {:.3e}, {} elements perturbed",
        pd.mean, pd.max, pd.differing
    );
    let noisy_id = format!("tinynet-A-noisy-n{seed}");
    let noisy_rec =
        exec::run_debug(&noisy_id, &noisy, &corpus, Backend::Reference, &cfg).map_err(map_exec_err)?;

    let report = diff_report(
        &VariantPackage { graph: &model, record: &clean_rec },
        &VariantPackage { graph: &noisy, record: &noisy_rec },
        &corpus.labels,
        RBO_P,
    )
    .map_err(map_analysis_err)?;
    let flipped: Vec<&str> = clean_rec
        .images
        .iter()
        .zip(&noisy_rec.images)
        .filter(|(a, b)| a.top1_index != b.top1_index)
        .map(|(a, _)| a.image_id.as_str())
        .collect();
    println!(
        "[3] clean vs noisy: dissimilarity {:.2}% ({} of {} images flipped{}{}), mean RBO@5 {:.4}",
        report.dissimilarity_pct,
        flipped.len(),
        corpus.len(),
        if flipped.is_empty() { "" } else { ": " },
        flipped.join(", "),
        report.mean_rbo
    );
    let mut layer_story = String::new();
    if let (Some(first), Some(last)) = (report.per_layer.first(), report.per_layer.last()) {
        write!(
            layer_story,
            "; layer mean |d| grows {:.3e} -> {:.3e}",
            first.mean, last.mean
        )
        .expect("string write");
    }
    println!(
        "[4] localization: verdict {}, onset layer {}{}",
        report.verdict,
        report
            .onset_layer
            .map(|l| l.to_string())
            .unwrap_or_else(|| "-".into()),
        layer_story
    );

    let repaired = variant::repair_parameters(&noisy, &model)
        .map_err(|e| CliError::Internal(format!("repair failed: {e}")))?;
    let repaired_id = "tinynet-A-repaired";
    let repaired_rec = exec::run_debug(repaired_id, &repaired, &corpus, Backend::Reference, &cfg)
        .map_err(map_exec_err)?;
    let repaired_report = diff_report(
        &VariantPackage { graph: &model, record: &clean_rec },
        &VariantPackage { graph: &repaired, record: &repaired_rec },
        &corpus.labels,
        RBO_P,
    )
    .map_err(map_analysis_err)?;
    println!(
        "[5] repaired parameters from the source: dissimilarity {:.2}%, verdict {}",
        repaired_report.dissimilarity_pct, repaired_report.verdict
    );

    let converged = repaired_report.verdict == Verdict::NoDivergence
        && repaired_report.dissimilarity_pct == 0.0;

    analysis::write_labels_csv(
        &out.join("labels_diff.csv"),
        &clean_rec,
        &noisy_rec,
        RBO_P,
    )
    .map_err(map_analysis_err)?;
    analysis::write_layer_csv(&out.join("layer_diff.csv"), &report.per_layer)
        .map_err(map_analysis_err)?;
    let records = [&clean_rec, &noisy_rec, &repaired_rec];
    let ids: Vec<String> = records.iter().map(|r| r.variant_id.clone()).collect();
    let mut cells = Vec::new();
    for a in &records {
        let mut row = Vec::new();
        for b in &records {
            row.push(MatrixCell::Pct(
                compare_labels(a, b).map_err(map_analysis_err)?,
            ));
        }
        cells.push(row);
    }
    analysis::write_matrix_csv(&out.join("matrix.csv"), &ids, &cells)
        .map_err(map_analysis_err)?;
    analysis::write_reports_json(&out.join("reports.json"), &[report, repaired_report])
        .map_err(map_analysis_err)?;
    for r in records {
        write_json(
            &out.join("timings").join(format!("{}.timing.json", r.variant_id)),
            &r.timing,
        )?;
    }
    println!("[6] artifacts written to {}", out.display());

    if converged {
        println!("demo result: divergence introduced, localized, and fully repaired");
        Ok(())
    } else {
        Err(CliError::Internal(
            "repair did not converge to a clean comparison".into(),
        ))
    }
}
