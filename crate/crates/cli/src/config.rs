//! Run configuration: one TOML document holding every knob of a run.

use std::path::{Path, PathBuf};

use fineprune::debias::{load_word_list, AttributePooling, AttributeSource, DebiasMode, DebiasSpec};
use fineprune::encoder::{CorpusSpec, EncoderConfig, PretrainConfig};
use fineprune::eval::ProbeConfig;
use fineprune::pruning::BlockGeometry;
use fineprune::{Error, Result};
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub seed: u64,
    /// Directory receiving checkpoints and reports.
    pub out: PathBuf,
    pub encoder: EncoderSection,
    pub corpus: CorpusSpec,
    pub pretrain: PretrainConfig,
    pub pruning: PruningSection,
    pub debias: DebiasSection,
    pub eval: EvalSection,
    pub sweep: SweepSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 42,
            out: PathBuf::from("runs/default"),
            encoder: EncoderSection::default(),
            corpus: CorpusSpec::default(),
            pretrain: PretrainConfig::default(),
            pruning: PruningSection::default(),
            debias: DebiasSection::default(),
            eval: EvalSection::default(),
            sweep: SweepSection::default(),
        }
    }
}

/// Encoder shape; the vocabulary size follows from the corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderSection {
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden_size: usize,
    pub ffn_size: usize,
    pub max_seq_len: usize,
    pub layer_norm_eps: f64,
}

impl Default for EncoderSection {
    fn default() -> Self {
        let d = EncoderConfig::default();
        Self {
            num_layers: d.num_layers,
            num_heads: d.num_heads,
            hidden_size: d.hidden_size,
            ffn_size: d.ffn_size,
            max_seq_len: d.max_seq_len,
            layer_norm_eps: d.layer_norm_eps,
        }
    }
}

impl EncoderSection {
    pub fn with_vocab(&self, vocab_size: usize) -> EncoderConfig {
        EncoderConfig {
            num_layers: self.num_layers,
            num_heads: self.num_heads,
            hidden_size: self.hidden_size,
            ffn_size: self.ffn_size,
            vocab_size,
            max_seq_len: self.max_seq_len,
            layer_norm_eps: self.layer_norm_eps,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruningSection {
    /// `square-<B>` or `value-head`.
    pub geometry: String,
    pub tau_final: f64,
    pub score_init: f64,
    pub score_lr: f64,
    pub epochs: usize,
    pub freeze_weights: bool,
    /// Only used when the weights are not frozen.
    pub weight_lr: f64,
}

impl Default for PruningSection {
    fn default() -> Self {
        Self {
            geometry: "value-head".into(),
            tau_final: 0.1,
            score_init: 0.0,
            score_lr: 0.01,
            epochs: 100,
            freeze_weights: true,
            weight_lr: 1e-4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DebiasSection {
    /// `<all|last|intermediate|custom:i,j>-<token|sentence>`.
    pub mode: String,
    pub reg_weight: f64,
    /// Sentences per batch.
    pub batch_size: usize,
    /// Leading corpus sentences used as debiasing data.
    pub max_sentences: usize,
    /// Epochs of plain debias fine-tuning.
    pub epochs: usize,
    pub lr: f64,
    pub attribute_source: AttributeSource,
    pub attribute_pooling: AttributePooling,
    /// Word-list files replacing the corpus lists.
    pub attributes_a_file: Option<PathBuf>,
    pub attributes_b_file: Option<PathBuf>,
    pub targets_file: Option<PathBuf>,
}

impl Default for DebiasSection {
    fn default() -> Self {
        Self {
            mode: "all-token".into(),
            reg_weight: 1.0,
            batch_size: 32,
            max_sentences: 200,
            epochs: 5,
            lr: 1e-4,
            attribute_source: AttributeSource::Original,
            attribute_pooling: AttributePooling::PerOccurrence,
            attributes_a_file: None,
            attributes_b_file: None,
            targets_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub probe_train: usize,
    pub probe_test: usize,
    pub probe: ProbeConfig,
    pub association_tests_file: Option<PathBuf>,
    pub stereo_items_file: Option<PathBuf>,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            probe_train: 400,
            probe_test: 400,
            probe: ProbeConfig::default(),
            association_tests_file: None,
            stereo_items_file: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepSection {
    pub geometries: Vec<String>,
    pub modes: Vec<String>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            geometries: ["square-4", "square-8", "square-16", "value-head"].map(String::from).to_vec(),
            modes: ["all-token", "all-sentence", "last-token", "last-sentence"].map(String::from).to_vec(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self = toml::from_str(text).map_err(|e| Error::config("config", e.message().to_owned()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != SCHEMA_VERSION {
            return Err(Error::config(
                "schema_version",
                format!("unsupported version {}, expected {SCHEMA_VERSION}", self.schema_version),
            ));
        }
        self.encoder.with_vocab(1).validate()?;
        self.corpus.validate()?;
        self.pretrain.validate()?;
        self.geometry(&self.encoder.with_vocab(1))?;
        let p = &self.pruning;
        if !(p.tau_final > 0.0 && p.tau_final < 1.0) {
            return Err(Error::config("pruning.tau_final", "must lie in (0, 1)"));
        }
        if !p.score_init.is_finite() {
            return Err(Error::config("pruning.score_init", "must be finite"));
        }
        if !(p.score_lr > 0.0) {
            return Err(Error::config("pruning.score_lr", "must be positive"));
        }
        if !(p.weight_lr > 0.0) {
            return Err(Error::config("pruning.weight_lr", "must be positive"));
        }
        if p.epochs == 0 {
            return Err(Error::config("pruning.epochs", "must be at least 1"));
        }
        let d = &self.debias;
        DebiasMode::parse(&d.mode)?;
        if !(d.reg_weight >= 0.0 && d.reg_weight.is_finite()) {
            return Err(Error::config("debias.reg_weight", "must be finite and non-negative"));
        }
        for (field, value) in [
            ("debias.batch_size", d.batch_size),
            ("debias.max_sentences", d.max_sentences),
            ("debias.epochs", d.epochs),
        ] {
            if value == 0 {
                return Err(Error::config(field, "must be at least 1"));
            }
        }
        if !(d.lr > 0.0) {
            return Err(Error::config("debias.lr", "must be positive"));
        }
        for (field, value) in [("eval.probe_train", self.eval.probe_train), ("eval.probe_test", self.eval.probe_test)] {
            if value < 2 {
                return Err(Error::config(field, "needs at least 2 sentences"));
            }
        }
        if self.eval.probe.iterations == 0 {
            return Err(Error::config("eval.probe.iterations", "must be at least 1"));
        }
        if self.sweep.geometries.is_empty() {
            return Err(Error::config("sweep.geometries", "must not be empty"));
        }
        if self.sweep.modes.is_empty() {
            return Err(Error::config("sweep.modes", "must not be empty"));
        }
        for g in &self.sweep.geometries {
            BlockGeometry::parse(g, &self.encoder.with_vocab(1)).map_err(|e| retarget(e, "sweep.geometries"))?;
        }
        for m in &self.sweep.modes {
            DebiasMode::parse(m).map_err(|e| retarget(e, "sweep.modes"))?;
        }
        Ok(())
    }

    pub fn geometry(&self, encoder: &EncoderConfig) -> Result<BlockGeometry> {
        BlockGeometry::parse(&self.pruning.geometry, encoder)
    }

    /// Debiasing inputs: corpus word lists unless files are configured.
    pub fn debias_spec(&self) -> Result<DebiasSpec> {
        let d = &self.debias;
        let mut spec = DebiasSpec::from_corpus(&self.corpus).with_mode(&DebiasMode::parse(&d.mode)?);
        spec.reg_weight = d.reg_weight;
        spec.attribute_source = d.attribute_source;
        spec.attribute_pooling = d.attribute_pooling;
        if let Some(path) = &d.attributes_a_file {
            spec.attributes_a = load_word_list(path)?;
        }
        if let Some(path) = &d.attributes_b_file {
            spec.attributes_b = load_word_list(path)?;
        }
        if let Some(path) = &d.targets_file {
            spec.targets = load_word_list(path)?;
        }
        spec.validate()?;
        Ok(spec)
    }
}

fn retarget(err: Error, field: &str) -> Error {
    match err {
        Error::Config { message, .. } => Error::config(field, message),
        other => other,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let config = RunConfig::default();
        config.validate().unwrap();
        assert_eq!(RunConfig::from_toml(&config.to_toml()).unwrap(), config);
    }

    #[test]
    fn partial_documents_fill_defaults() {
        let config = RunConfig::from_toml("seed = 7\n[pruning]\ngeometry = \"square-8\"\n").unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.pruning.geometry, "square-8");
        assert_eq!(config.pruning.epochs, 100);
        assert_eq!(config.debias.epochs, 5);
    }

    fn field_of(text: &str) -> String {
        match RunConfig::from_toml(text) {
            Err(Error::Config { field, .. }) => field,
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn errors_name_the_field() {
        assert_eq!(field_of("schema_version = 9"), "schema_version");
        assert_eq!(field_of("[pruning]\ntau_final = 1.5"), "pruning.tau_final");
        assert_eq!(field_of("[pruning]\ngeometry = \"square-0\""), "pruning.geometry");
        assert_eq!(field_of("[debias]\nmode = \"first-token\""), "debias.mode");
        assert_eq!(field_of("[encoder]\nnum_heads = 5"), "encoder.num_heads");
        assert_eq!(field_of("[corpus]\nbias_strength = 0.2"), "corpus.bias_strength");
        assert_eq!(field_of("[sweep]\nmodes = [\"all\"]"), "sweep.modes");
        assert_eq!(field_of("[eval]\nprobe_train = 1"), "eval.probe_train");
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let err = RunConfig::from_toml("[pruning]\nblock = 4").unwrap_err();
        assert!(err.to_string().contains("block"), "{err}");
    }

    #[test]
    fn word_list_files_override_corpus_lists() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("targets.txt");
        std::fs::write(&path, "# jobs\ndoctor\nnurse\n").unwrap();
        let mut config = RunConfig::default();
        config.debias.targets_file = Some(path);
        assert_eq!(config.debias_spec().unwrap().targets, vec!["doctor", "nurse"]);

        config.debias.targets_file = Some(dir.path().join("missing.txt"));
        assert!(matches!(config.debias_spec(), Err(Error::Io { .. })));
    }
}
