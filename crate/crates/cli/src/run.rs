//! The five commands. Each writes its artifacts under `config.out` and
//! returns a report whose serialized form depends only on the config and
//! the input checkpoint.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write as _};
use std::path::{Path, PathBuf};

use fineprune::checkpoint::{load_checkpoint, save_checkpoint, Archive};
use fineprune::debias::{build_debias_batches, debias_step, DebiasExample, Snapshot};
use fineprune::encoder::{generate_corpus, pretrain, EncoderModel, NoGate, Tokenizer, WeightGate};
use fineprune::eval::{
    default_association_tests, default_stereo_items, evaluate, load_association_tests, load_stereo_items, tradeoff_report,
    EvalReport, EvalSuite, ProbeTask, TradeoffPoint, TRADEOFF_HEADER,
};
use fineprune::optim::Adam;
use fineprune::pruning::{attach_scores, fineprune_step, HeadMap, PruneOptimizer, ScoreSet, ThresholdSchedule};
use fineprune::rng::{rng, Stream};
use fineprune::{Error, Result};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{RunConfig, SCHEMA_VERSION};
use crate::report;

pub const MODEL_FILE: &str = "model.ckpt";
pub const SCORES_FILE: &str = "scores.ckpt";
pub const MANIFEST_FILE: &str = "sweep_manifest.jsonl";

/// How the debias regularizer is aggregated; echoed in reports.
pub const REGULARIZER: &str = "all-layers-all-tokens";

pub const NO_FREEZE_WARNING: &str =
    "weights were allowed to change (no-freeze regime): the result is not a subnetwork of the original model";

/// Receives one-line progress messages.
pub type Log<'a> = &'a dyn Fn(&str);

pub fn quiet(_: &str) {}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

fn corpus(config: &RunConfig) -> Result<Vec<String>> {
    generate_corpus(&config.corpus, &mut rng(config.seed, Stream::Corpus))
}

/// Evaluation inputs: defaults derived from the corpus unless files are configured.
pub fn eval_suite(config: &RunConfig) -> Result<EvalSuite> {
    let e = &config.eval;
    let association_tests = match &e.association_tests_file {
        Some(path) => load_association_tests(path)?,
        None => default_association_tests(&config.corpus),
    };
    let stereo_items = match &e.stereo_items_file {
        Some(path) => load_stereo_items(path)?,
        None => default_stereo_items(&config.corpus),
    };
    let probe = ProbeTask::topics(
        &config.corpus,
        e.probe_train,
        e.probe_test,
        &mut rng(config.seed, Stream::Probe),
    )?;
    Ok(EvalSuite {
        association_tests,
        stereo_items,
        probe,
        probe_config: e.probe,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainSummary {
    pub schema_version: u32,
    pub seed: u64,
    pub corpus_sentences: usize,
    pub corpus_sha256: String,
    pub vocab_size: usize,
    pub num_params: usize,
    pub initial_loss: f64,
    pub epoch_losses: Vec<f64>,
    pub weights_checksum: String,
}

/// Generates the corpus, pretrains a fresh encoder and saves it to
/// `out/model.ckpt` with `pretrain_report.json` and `corpus_manifest.json`.
pub fn cmd_pretrain(config: &RunConfig, log: Log) -> Result<PretrainSummary> {
    config.validate()?;
    create_dir(&config.out)?;
    let sentences = corpus(config)?;
    let tokenizer = Tokenizer::from_words(config.corpus.vocabulary());
    let ids: Vec<Vec<usize>> = sentences.iter().map(|s| tokenizer.encode(s)).collect::<Result<_>>()?;
    let encoder = config.encoder.with_vocab(tokenizer.vocab_size());
    let mut model = EncoderModel::init(&encoder, &mut rng(config.seed, Stream::Init))?;
    log(&format!(
        "pretraining {} parameters on {} sentences for {} epochs",
        model.num_params(),
        sentences.len(),
        config.pretrain.epochs
    ));
    let result = pretrain(&mut model, &ids, &config.pretrain, &mut rng(config.seed, Stream::Masking))?;
    save_checkpoint(&model, &tokenizer, &config.out.join(MODEL_FILE))?;

    let mut hasher = Sha256::new();
    for s in &sentences {
        hasher.update(s.as_bytes());
        hasher.update(b"\n");
    }
    let summary = PretrainSummary {
        schema_version: SCHEMA_VERSION,
        seed: config.seed,
        corpus_sentences: sentences.len(),
        corpus_sha256: format!("{:x}", hasher.finalize()),
        vocab_size: tokenizer.vocab_size(),
        num_params: model.num_params(),
        initial_loss: result.initial_loss,
        epoch_losses: result.epoch_losses,
        weights_checksum: model.weights_checksum(),
    };
    let manifest = serde_json::json!({
        "seed": config.seed,
        "sentences": summary.corpus_sentences,
        "sha256": summary.corpus_sha256,
        "bias_strength": config.corpus.bias_strength,
        "vocabulary": tokenizer.words(),
    });
    write(&config.out.join("corpus_manifest.json"), to_json(&manifest))?;
    write(&config.out.join("pretrain_report.json"), to_json(&summary))?;
    write(&config.out.join("config.toml"), config.to_toml())?;
    Ok(summary)
}

fn debias_batches(config: &RunConfig, tokenizer: &Tokenizer) -> Result<Vec<Vec<DebiasExample>>> {
    let spec = config.debias_spec()?;
    let sentences = corpus(config)?;
    let take = config.debias.max_sentences.min(sentences.len());
    build_debias_batches(
        &sentences[..take],
        &spec,
        tokenizer,
        config.debias.batch_size,
        &mut rng(config.seed, Stream::Shuffle),
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinepruneReport {
    pub schema_version: u32,
    pub geometry: String,
    /// Block extent in weight rows × columns.
    pub block: [usize; 2],
    pub mode: String,
    pub reg_weight: f64,
    pub regularizer: String,
    pub frozen_weights: bool,
    pub epochs: usize,
    pub steps: usize,
    pub tau_final: f64,
    /// Mean loss per epoch.
    pub loss_curve: Vec<f64>,
    pub layer_densities: Vec<f64>,
    pub mean_density: f64,
    pub pruned_heads: HeadMap,
    pub weights_checksum_before: String,
    pub weights_checksum_after: String,
    pub original: EvalReport,
    pub pruned: EvalReport,
    pub warnings: Vec<String>,
}

impl FinepruneReport {
    pub fn tradeoff_point(&self, run_id: &str) -> TradeoffPoint {
        point(run_id, &self.pruned, self.mean_density)
    }
}

fn point(run_id: &str, report: &EvalReport, mean_density: f64) -> TradeoffPoint {
    let mut seat_effects = [f64::NAN; 3];
    for (slot, (_, d)) in seat_effects.iter_mut().zip(&report.seat) {
        *slot = *d;
    }
    TradeoffPoint {
        run_id: run_id.to_owned(),
        probe_accuracy: report.probe_accuracy,
        stereotype_score: report.stereotype_score,
        seat_effects,
        mean_density,
    }
}

fn densities(scores: &ScoreSet, tau: f64, num_layers: usize) -> Vec<f64> {
    (0..num_layers).map(|l| scores.layer_density(tau, l)).collect()
}

fn write_pruning_csv(out: &Path, densities: &[f64], heads: &HeadMap) -> Result<()> {
    write(&out.join("densities.csv"), report::densities_csv(densities))?;
    write(&out.join("heatmap.csv"), report::heatmap_csv(heads))
}

/// Fine-prunes the checkpoint on the debias objective and evaluates the
/// masked model. Writes scores, the report and plot-ready CSV files.
pub fn cmd_fineprune(config: &RunConfig, checkpoint: &Path, log: Log) -> Result<FinepruneReport> {
    config.validate()?;
    create_dir(&config.out)?;
    let (mut model, tokenizer) = load_checkpoint(checkpoint)?;
    let spec = config.debias_spec()?;
    let batches = debias_batches(config, &tokenizer)?;
    let suite = eval_suite(config)?;
    let geometry = config.geometry(&model.config)?;
    let p = &config.pruning;
    let mut scores = attach_scores(&model.config, geometry, p.score_init, None, p.freeze_weights)?;

    let original = evaluate(&model, &NoGate, &tokenizer, &suite)?;
    let checksum_before = model.weights_checksum();
    let snapshot = Snapshot::new(&model);
    let mut optimizer = PruneOptimizer::new(&scores, &model, p.score_lr, p.weight_lr);
    let steps = p.epochs * batches.len();
    let schedule = ThresholdSchedule::new(p.tau_final, steps)?;
    log(&format!(
        "fine-pruning {} ({} scores), mode {}, {} epochs of {} batches",
        geometry.label(),
        scores.num_scores(),
        spec.mode().label(),
        p.epochs,
        batches.len()
    ));
    let mut loss_curve = Vec::with_capacity(p.epochs);
    let mut step = 0;
    for epoch in 0..p.epochs {
        let mut total = 0.0;
        for batch in &batches {
            total += fineprune_step(&mut model, &mut scores, &snapshot, batch, &spec, &mut optimizer, &schedule, step)?;
            step += 1;
        }
        let mean = total / batches.len() as f64;
        loss_curve.push(mean);
        if (epoch + 1) % 10 == 0 || epoch + 1 == p.epochs {
            log(&format!(
                "epoch {:>4}  loss {mean:.5}  density {:.3}",
                epoch + 1,
                scores.overall_density(schedule.tau_at(step))
            ));
        }
    }
    let model = model.with_requires_grad(false);

    let tau = schedule.tau_final;
    let layer_densities = densities(&scores, tau, model.config.num_layers);
    let pruned_heads = scores.count_pruned_heads(tau, &model.config)?;
    let mut pruned = evaluate(&model, &scores.gate(tau), &tokenizer, &suite)?;
    pruned.layer_densities = Some(layer_densities.clone());
    pruned.pruned_heads = Some(pruned_heads.clone());

    let mut warnings = Vec::new();
    if let Some(w) = scores.degenerate(tau) {
        warnings.push(format!("did not converge: {w}"));
    }
    if !p.freeze_weights {
        warnings.push(NO_FREEZE_WARNING.to_owned());
        save_checkpoint(&model, &tokenizer, &config.out.join("fineprune_model.ckpt"))?;
    }
    let report = FinepruneReport {
        schema_version: SCHEMA_VERSION,
        geometry: geometry.label(),
        block: [geometry.block_rows, geometry.block_cols],
        mode: spec.mode().label(),
        reg_weight: spec.reg_weight,
        regularizer: REGULARIZER.into(),
        frozen_weights: p.freeze_weights,
        epochs: p.epochs,
        steps,
        tau_final: tau,
        loss_curve,
        mean_density: scores.overall_density(tau),
        layer_densities,
        pruned_heads,
        weights_checksum_before: checksum_before,
        weights_checksum_after: model.weights_checksum(),
        original,
        pruned,
        warnings,
    };
    scores.to_archive().save(&config.out.join(SCORES_FILE))?;
    write(&config.out.join("fineprune_report.json"), to_json(&report))?;
    write(&config.out.join("loss.csv"), report::loss_csv(&report.loss_curve))?;
    write_pruning_csv(&config.out, &report.layer_densities, &report.pruned_heads)?;
    write(&config.out.join("config.toml"), config.to_toml())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DebiasOnlyReport {
    pub schema_version: u32,
    pub mode: String,
    pub reg_weight: f64,
    pub regularizer: String,
    pub epochs: usize,
    pub steps: usize,
    pub lr: f64,
    pub loss_curve: Vec<f64>,
    pub weights_checksum_before: String,
    pub weights_checksum_after: String,
    pub original: EvalReport,
    pub debiased: EvalReport,
}

/// Fine-tunes all weights on the debias objective, without pruning, and
/// saves `debiased.ckpt`.
pub fn cmd_debias_only(config: &RunConfig, checkpoint: &Path, log: Log) -> Result<DebiasOnlyReport> {
    config.validate()?;
    create_dir(&config.out)?;
    let (mut model, tokenizer) = load_checkpoint(checkpoint)?;
    let spec = config.debias_spec()?;
    let batches = debias_batches(config, &tokenizer)?;
    let suite = eval_suite(config)?;
    let original = evaluate(&model, &NoGate, &tokenizer, &suite)?;
    let checksum_before = model.weights_checksum();
    let snapshot = Snapshot::new(&model);
    let d = &config.debias;
    let mut optimizer = {
        let params: Vec<_> = model.named_params().into_iter().map(|(_, t)| t).collect();
        Adam::for_params(d.lr, &params)
    };
    log(&format!(
        "debiasing weights, mode {}, {} epochs of {} batches",
        spec.mode().label(),
        d.epochs,
        batches.len()
    ));
    let mut loss_curve = Vec::with_capacity(d.epochs);
    let mut step = 0;
    for epoch in 0..d.epochs {
        let mut total = 0.0;
        for batch in &batches {
            total += debias_step(&mut model, &snapshot, batch, &spec, &mut optimizer, step)?;
            step += 1;
        }
        loss_curve.push(total / batches.len() as f64);
        log(&format!("epoch {:>4}  loss {:.5}", epoch + 1, loss_curve[epoch]));
    }
    let model = model.with_requires_grad(false);
    let debiased = evaluate(&model, &NoGate, &tokenizer, &suite)?;
    save_checkpoint(&model, &tokenizer, &config.out.join("debiased.ckpt"))?;
    let report = DebiasOnlyReport {
        schema_version: SCHEMA_VERSION,
        mode: spec.mode().label(),
        reg_weight: spec.reg_weight,
        regularizer: REGULARIZER.into(),
        epochs: d.epochs,
        steps: step,
        lr: d.lr,
        loss_curve,
        weights_checksum_before: checksum_before,
        weights_checksum_after: model.weights_checksum(),
        original,
        debiased,
    };
    write(&config.out.join("debias_report.json"), to_json(&report))?;
    write(&config.out.join("config.toml"), config.to_toml())?;
    Ok(report)
}

pub fn load_scores(path: &Path, model: &EncoderModel) -> Result<ScoreSet> {
    let scores = ScoreSet::from_archive(&Archive::load(path)?)?;
    scores.check_compatible(&model.config)?;
    Ok(scores)
}

/// Evaluates a checkpoint, masked by `scores` at `pruning.tau_final` when
/// given. Writes `eval_report.json`, plus `densities.csv`, `heatmap.csv`
/// and `tradeoff.csv` when `emit_csv` is set.
pub fn cmd_evaluate(config: &RunConfig, checkpoint: &Path, scores: Option<&Path>, emit_csv: bool) -> Result<EvalReport> {
    config.validate()?;
    create_dir(&config.out)?;
    let (model, tokenizer) = load_checkpoint(checkpoint)?;
    let suite = eval_suite(config)?;
    let tau = config.pruning.tau_final;
    let num_layers = model.config.num_layers;
    let score_set = scores.map(|p| load_scores(p, &model)).transpose()?;
    let gate: Box<dyn WeightGate + '_> = match &score_set {
        Some(s) => Box::new(s.gate(tau)),
        None => Box::new(NoGate),
    };
    let mut report = evaluate(&model, gate.as_ref(), &tokenizer, &suite)?;
    let (layer_densities, heads) = match &score_set {
        Some(s) => (densities(s, tau, num_layers), s.count_pruned_heads(tau, &model.config)?),
        None => (
            vec![1.0; num_layers],
            HeadMap {
                count: 0,
                pruned: vec![vec![false; model.config.num_heads]; num_layers],
            },
        ),
    };
    let mean_density = score_set.as_ref().map_or(1.0, |s| s.overall_density(tau));
    if score_set.is_some() {
        report.layer_densities = Some(layer_densities.clone());
        report.pruned_heads = Some(heads.clone());
    }
    write(&config.out.join("eval_report.json"), to_json(&report))?;
    if emit_csv {
        write_pruning_csv(&config.out, &layer_densities, &heads)?;
        let row = point("evaluated", &report, mean_density).csv_row();
        write(&config.out.join("tradeoff.csv"), format!("{TRADEOFF_HEADER}\n{row}\n"))?;
    }
    Ok(report)
}

/// One completed sweep run, as stored in the manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run_id: String,
    pub geometry: String,
    pub mode: String,
    pub pruned_heads: usize,
    pub warnings: Vec<String>,
    pub point: TradeoffPoint,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub schema_version: u32,
    /// The unpruned model.
    pub baseline: TradeoffPoint,
    pub rows: Vec<SweepRow>,
    /// Between probe accuracy and `|SS − 50|` over the rows.
    pub spearman: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub report: SweepReport,
    /// Runs found complete in the manifest and not re-run.
    pub skipped: Vec<String>,
}

pub fn run_id(geometry: &str, mode: &str) -> String {
    format!("{geometry}_{mode}")
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

fn with_manifest<T>(path: &Path, f: impl FnOnce(&mut File, Vec<SweepRow>) -> Result<T>) -> Result<T> {
    let mut file = OpenOptions::new()
        .read(true)
        .append(true)
        .create(true)
        .open(path)
        .map_err(|e| Error::io(path, e))?;
    file.lock().map_err(|e| Error::io(path, e))?;
    let mut rows = Vec::new();
    for (n, line) in BufReader::new(&file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let row: SweepRow = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{} line {}: {e}", path.display(), n + 1)))?;
        rows.push(row);
    }
    let result = f(&mut file, rows);
    file.unlock().map_err(|e| Error::io(path, e))?;
    result
}

/// Runs every geometry × mode pair of `sweep`, skipping runs already in
/// the manifest, and writes `tradeoff.csv` and `sweep_report.json`.
///
/// Without `checkpoint` the sweep uses `out/model.ckpt`, pretraining it
/// first when it does not exist.
pub fn cmd_sweep(config: &RunConfig, checkpoint: Option<&Path>, log: Log) -> Result<SweepOutcome> {
    config.validate()?;
    create_dir(&config.out)?;
    let checkpoint: PathBuf = match checkpoint {
        Some(p) => p.to_owned(),
        None => {
            let path = config.out.join(MODEL_FILE);
            if !path.exists() {
                cmd_pretrain(config, log)?;
            }
            path
        }
    };
    let manifest = config.out.join(MANIFEST_FILE);
    let mut skipped = Vec::new();
    for geometry in &config.sweep.geometries {
        for mode in &config.sweep.modes {
            let id = run_id(geometry, mode);
            if with_manifest(&manifest, |_, rows| Ok(rows.iter().any(|r| r.run_id == id)))? {
                log(&format!("{id}: already complete"));
                skipped.push(id);
                continue;
            }
            log(&format!("{id}: running"));
            let mut run = config.clone();
            run.pruning.geometry = geometry.clone();
            run.debias.mode = mode.clone();
            run.out = config.out.join("runs").join(&id);
            let report = cmd_fineprune(&run, &checkpoint, log)?;
            let row = SweepRow {
                run_id: id.clone(),
                geometry: geometry.clone(),
                mode: mode.clone(),
                pruned_heads: report.pruned_heads.count,
                warnings: report.warnings.clone(),
                point: report.tradeoff_point(&id),
            };
            with_manifest(&manifest, |file, rows| {
                if !rows.iter().any(|r| r.run_id == id) {
                    let mut line = serde_json::to_string(&row).expect("row serializes");
                    line.push('\n');
                    file.write_all(line.as_bytes()).map_err(|e| Error::io(&manifest, e))?;
                }
                Ok(())
            })?;
        }
    }

    let done = with_manifest(&manifest, |_, rows| Ok(rows))?;
    let mut rows = Vec::new();
    for geometry in &config.sweep.geometries {
        for mode in &config.sweep.modes {
            let id = run_id(geometry, mode);
            let row = done
                .iter()
                .find(|r| r.run_id == id)
                .ok_or_else(|| Error::Data(format!("run {id} missing from the manifest")))?;
            rows.push(row.clone());
        }
    }
    let (model, tokenizer) = load_checkpoint(&checkpoint)?;
    let baseline = point("original", &evaluate(&model, &NoGate, &tokenizer, &eval_suite(config)?)?, 1.0);
    let points: Vec<TradeoffPoint> = rows.iter().map(|r| r.point.clone()).collect();
    let spearman = if points.len() >= 3 {
        let tradeoff = tradeoff_report(&points)?;
        write(&config.out.join("tradeoff.csv"), &tradeoff.csv)?;
        tradeoff.spearman
    } else {
        let mut csv = format!("{TRADEOFF_HEADER}\n");
        for p in &points {
            csv.push_str(&p.csv_row());
            csv.push('\n');
        }
        write(&config.out.join("tradeoff.csv"), csv)?;
        None
    };
    let report = SweepReport {
        schema_version: SCHEMA_VERSION,
        baseline,
        rows,
        spearman,
    };
    write(&config.out.join("sweep_report.json"), to_json(&report))?;
    Ok(SweepOutcome { report, skipped })
}
