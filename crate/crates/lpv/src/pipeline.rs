//! Stage-oriented pipeline over one declarative config: corpus generation,
//! autoencoder and codebook training, index extraction, the three predictor
//! stages, decoding, evaluation and paired ablations.
//!
//! Every stage writes its artifacts under one workspace root and a JSON
//! report whose hash covers everything except wall time. All randomness
//! derives from the single global seed through named substreams, so a rerun
//! with the same config reproduces every artifact bit for bit.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::RngExt;
use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use crate::checkpoint::{load_model, save_model, Checkpoint};
use crate::corpus::{
    generate_corpus, load_corpus_dir, write_corpus_dir, write_jsonl, LabelRecord, Quality, Split,
    SyntheticSpec, SyntheticSpecParams, Utterance,
};
use crate::encoder::{extract_lpv, train_encoder, EncoderConfig, LpvSequence, ProsodyAutoencoder};
use crate::metrics::{
    duration_kl, pitch_dtw_distance, DurationTable, PitchContour, PitchCost,
};
use crate::nn::Mat;
use crate::predictor::{
    align_pairs, ar_eval_loss, audio_pretrain, finetune, text_pretrain, GenerateMode,
    PredictorConfig, PredictorModel, StageTag,
};
use crate::rng::{derive_seed, substream};
use crate::vq::{matching_purity, usage_stats, Codebook, VqConfig};
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Config

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PathsSection {
    /// Root directory for corpus/, checkpoints/, lpv/ and reports/.
    pub workspace: PathBuf,
}

impl Default for PathsSection {
    fn default() -> Self {
        PathsSection {
            workspace: PathBuf::from("runs/desk"),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSection {
    pub params: SyntheticSpecParams,
    /// High-quality training utterances.
    pub n_high: usize,
    /// Low-quality training utterances.
    pub n_low: usize,
    /// Text-only training utterances.
    pub n_text: usize,
    /// High-quality held-out utterances.
    pub n_test: usize,
}

impl Default for CorpusSection {
    fn default() -> Self {
        CorpusSection {
            params: SyntheticSpecParams {
                vocab_size: 24,
                n_clusters: 8,
                n_bands: 32,
                n_low_bands: 8,
                noise_sigma: 0.3,
                words_min: 2,
                words_max: 6,
                ..Default::default()
            },
            n_high: 80,
            n_low: 120,
            n_text: 200,
            n_test: 40,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct StagesSection {
    /// Masked text pretraining before audio pretraining.
    pub text_pretrain: bool,
    /// Low-quality audio pretraining before fine-tuning.
    pub audio_pretrain: bool,
}

impl Default for StagesSection {
    fn default() -> Self {
        StagesSection {
            text_pretrain: true,
            audio_pretrain: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq, Default)]
#[serde(default, deny_unknown_fields)]
pub struct MetricsSection {
    pub pitch_cost: PitchCost,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct AblateSection {
    /// Paired runs per arm.
    pub seeds: usize,
    /// Codebook size used by the codebook_size arm.
    pub small_k: usize,
}

impl Default for AblateSection {
    fn default() -> Self {
        AblateSection { seeds: 5, small_k: 4 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    /// Global seed; every stage seed is derived from it by name.
    pub seed: u64,
    pub paths: PathsSection,
    pub corpus: CorpusSection,
    pub encoder: EncoderConfig,
    pub vq: VqConfig,
    pub predictor: PredictorConfig,
    pub stages: StagesSection,
    pub metrics: MetricsSection,
    pub ablate: AblateSection,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let corpus = CorpusSection::default();
        let mut cfg = PipelineConfig {
            seed: 0,
            paths: PathsSection::default(),
            corpus: corpus.clone(),
            encoder: EncoderConfig {
                n_low_bands: corpus.params.n_low_bands,
                hidden: 16,
                frame_layers: 1,
                word_layers: 1,
                kernel: 3,
                warmup_steps: 1500,
                commitment_beta: 0.25,
                lr: 3e-3,
                batch_size: 8,
                total_steps: 4000,
                seed: 0,
            },
            vq: VqConfig {
                k: 16,
                ..Default::default()
            },
            predictor: PredictorConfig {
                vocab_size: corpus.params.vocab_size,
                k: 16,
                context_layers: 2,
                ar_layers: 2,
                hidden: 64,
                heads: 4,
                max_len: 16,
                mask_prob: 0.15,
                lr: 1e-3,
                batch_size: 16,
                text_steps: 300,
                audio_steps: 300,
                finetune_steps: 300,
                seed: 0,
            },
            stages: StagesSection::default(),
            metrics: MetricsSection::default(),
            ablate: AblateSection::default(),
        };
        cfg.normalize();
        cfg
    }
}

impl PipelineConfig {
    /// Rewrites every per-stage seed as a named derivation of the global
    /// seed. Seed fields inside sections are therefore not independently
    /// configurable.
    pub fn normalize(&mut self) {
        self.corpus.params.seed = derive_seed(self.seed, "stage/corpus");
        self.encoder.seed = derive_seed(self.seed, "stage/encoder");
        self.predictor.seed = derive_seed(self.seed, "stage/predictor");
    }

    pub fn validate(&self) -> Result<()> {
        SyntheticSpec::from_params(&self.corpus.params)?;
        self.encoder.validate()?;
        self.vq.validate()?;
        self.predictor.validate()?;
        if self.vq.k != self.predictor.k {
            return Err(Error::Config(format!(
                "codebook size mismatch: vq.k {} but predictor.k {}",
                self.vq.k, self.predictor.k
            )));
        }
        if self.predictor.vocab_size != self.corpus.params.vocab_size {
            return Err(Error::Config(format!(
                "vocabulary mismatch: corpus {} but predictor {}",
                self.corpus.params.vocab_size, self.predictor.vocab_size
            )));
        }
        if self.predictor.max_len < self.corpus.params.words_max {
            return Err(Error::Config(format!(
                "predictor.max_len {} below corpus words_max {}",
                self.predictor.max_len, self.corpus.params.words_max
            )));
        }
        if self.encoder.n_low_bands > self.corpus.params.n_bands {
            return Err(Error::Config(format!(
                "encoder.n_low_bands {} exceeds corpus n_bands {}",
                self.encoder.n_low_bands, self.corpus.params.n_bands
            )));
        }
        if self.corpus.n_high == 0 || self.corpus.n_test == 0 {
            return Err(Error::Config(
                "corpus.n_high and corpus.n_test must be positive".into(),
            ));
        }
        if self.ablate.seeds == 0 {
            return Err(Error::Config("ablate.seeds must be positive".into()));
        }
        Ok(())
    }

    /// Hash of the normalized config; embedded in every artifact. The
    /// workspace path is excluded so moving a run does not orphan it.
    pub fn config_hash(&self) -> String {
        let mut hashed = self.clone();
        hashed.paths = PathsSection::default();
        let bytes = serde_json::to_vec(&hashed).expect("config serializes");
        sha256_hex(&bytes)
    }

    pub fn spec(&self) -> Result<SyntheticSpec> {
        SyntheticSpec::from_params(&self.corpus.params)
    }

    pub fn workspace(&self) -> Workspace {
        Workspace {
            root: self.paths.workspace.clone(),
        }
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Parse a TOML config file, apply `key.path=value` overrides, then
/// normalize and validate.
pub fn load_config(path: &Path, overrides: &[String]) -> Result<PipelineConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
    parse_config(&text, overrides)
}

/// Parse by patching the default config: file keys override defaults,
/// `--set` overrides override both, and anything left unset keeps its
/// default at every nesting level.
pub fn parse_config(text: &str, overrides: &[String]) -> Result<PipelineConfig> {
    let user: toml::Value = toml::from_str(text)
        .map_err(|e| Error::Config(format!("config parse error: {e}")))?;
    let mut value = toml::Value::try_from(PipelineConfig::default())
        .map_err(|e| Error::Config(format!("default config serialization: {e}")))?;
    deep_merge(&mut value, user);
    for ov in overrides {
        apply_override(&mut value, ov)?;
    }
    let mut cfg: PipelineConfig = value
        .try_into()
        .map_err(|e| Error::Config(format!("config field error: {e}")))?;
    cfg.normalize();
    cfg.validate()?;
    Ok(cfg)
}

fn deep_merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => deep_merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Apply one `dotted.path=value` override onto the parsed TOML tree.
fn apply_override(root: &mut toml::Value, spec: &str) -> Result<()> {
    let Some((key, raw)) = spec.split_once('=') else {
        return Err(Error::Config(format!(
            "override {spec:?} must look like key.path=value"
        )));
    };
    let parsed = parse_scalar(raw.trim());
    let mut node = root;
    let parts: Vec<&str> = key.trim().split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("override key {key:?} is malformed")));
    }
    for part in &parts[..parts.len() - 1] {
        let table = node
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override key {key:?} crosses a non-table")))?;
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(Default::default()));
    }
    let table = node
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("override key {key:?} crosses a non-table")))?;
    table.insert(parts[parts.len() - 1].to_string(), parsed);
    Ok(())
}

/// Interpret an override value as a TOML scalar, falling back to a string.
fn parse_scalar(raw: &str) -> toml::Value {
    #[derive(Deserialize)]
    struct Probe {
        v: toml::Value,
    }
    match toml::from_str::<Probe>(&format!("v = {raw}")) {
        Ok(p) => p.v,
        Err(_) => toml::Value::String(raw.to_string()),
    }
}

// ---------------------------------------------------------------------------
// Workspace layout and provenance

/// The fixed directory layout under one run root.
#[derive(Clone, Debug)]
pub struct Workspace {
    pub root: PathBuf,
}

/// Which corpus a stage reads or writes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CorpusSet {
    High,
    Low,
    Text,
    Test,
}

impl CorpusSet {
    pub const ALL: [CorpusSet; 4] = [
        CorpusSet::High,
        CorpusSet::Low,
        CorpusSet::Text,
        CorpusSet::Test,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            CorpusSet::High => "high",
            CorpusSet::Low => "low",
            CorpusSet::Text => "text",
            CorpusSet::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Result<CorpusSet> {
        match s {
            "high" => Ok(CorpusSet::High),
            "low" => Ok(CorpusSet::Low),
            "text" => Ok(CorpusSet::Text),
            "test" => Ok(CorpusSet::Test),
            other => Err(Error::Config(format!(
                "unknown corpus set {other:?}; expected high, low, text or test"
            ))),
        }
    }

    fn quality(&self) -> Quality {
        match self {
            CorpusSet::High | CorpusSet::Test => Quality::High,
            CorpusSet::Low => Quality::Low,
            CorpusSet::Text => Quality::TextOnly,
        }
    }

    fn split(&self) -> Split {
        match self {
            CorpusSet::Test => Split::Test,
            _ => Split::Train,
        }
    }

    fn id_prefix(&self) -> &'static str {
        match self {
            CorpusSet::High => "hq",
            CorpusSet::Low => "lq",
            CorpusSet::Text => "tx",
            CorpusSet::Test => "ts",
        }
    }

    fn count(&self, cfg: &PipelineConfig) -> usize {
        match self {
            CorpusSet::High => cfg.corpus.n_high,
            CorpusSet::Low => cfg.corpus.n_low,
            CorpusSet::Text => cfg.corpus.n_text,
            CorpusSet::Test => cfg.corpus.n_test,
        }
    }
}

impl Workspace {
    pub fn corpus_dir(&self, set: CorpusSet) -> PathBuf {
        self.root.join("corpus").join(set.name())
    }

    pub fn checkpoints(&self) -> PathBuf {
        self.root.join("checkpoints")
    }

    pub fn encoder_ckpt(&self) -> PathBuf {
        self.checkpoints().join("encoder.lpvm")
    }

    pub fn codebook_path(&self) -> PathBuf {
        self.checkpoints().join("codebook.bin")
    }

    pub fn predictor_ckpt(&self, stage: StageTag) -> PathBuf {
        self.checkpoints()
            .join(format!("predictor_{}.lpvm", stage.as_str()))
    }

    pub fn lpv_path(&self, name: &str) -> PathBuf {
        self.root.join("lpv").join(format!("{name}.jsonl"))
    }

    pub fn report_path(&self, stage: &str) -> PathBuf {
        self.root.join("reports").join(format!("{stage}.json"))
    }

    /// Path as recorded in report payloads: relative to the workspace
    /// root, so moving a run does not change its report hashes. Paths
    /// outside the workspace are recorded as given.
    pub fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.root)
            .unwrap_or(path)
            .display()
            .to_string()
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
struct Provenance {
    stage: String,
    config_hash: String,
    seed: u64,
}

fn provenance_path(artifact: &Path) -> PathBuf {
    if artifact.extension().is_some() {
        artifact.with_extension("meta.json")
    } else {
        artifact.join("provenance.json")
    }
}

fn write_provenance(artifact: &Path, stage: &str, cfg: &PipelineConfig) -> Result<()> {
    let p = Provenance {
        stage: stage.to_string(),
        config_hash: cfg.config_hash(),
        seed: cfg.seed,
    };
    let path = provenance_path(artifact);
    fs::write(&path, serde_json::to_vec_pretty(&p)?)?;
    Ok(())
}

fn check_provenance(artifact: &Path, cfg: &PipelineConfig) -> Result<()> {
    let path = provenance_path(artifact);
    let bytes = fs::read(&path).map_err(|_| {
        Error::Config(format!(
            "artifact {} has no provenance sidecar; refusing to mix artifacts of unknown origin",
            artifact.display()
        ))
    })?;
    let p: Provenance = serde_json::from_slice(&bytes)?;
    if p.config_hash != cfg.config_hash() {
        return Err(Error::Config(format!(
            "artifact {} was produced under config hash {} but the current config hashes to {}",
            artifact.display(),
            p.config_hash,
            cfg.config_hash()
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Reports

/// One stage's machine-readable result. `report_hash` covers everything
/// except wall time, so identical reruns hash identically.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct RunReport {
    pub stage: String,
    pub seed: u64,
    pub config_hash: String,
    pub payload: serde_json::Value,
    pub report_hash: String,
    pub wall_ms: u64,
}

impl RunReport {
    pub fn new(
        stage: &str,
        cfg: &PipelineConfig,
        payload: serde_json::Value,
        started: Instant,
    ) -> Self {
        let config_hash = cfg.config_hash();
        let hashed = json!({
            "stage": stage,
            "seed": cfg.seed,
            "config_hash": config_hash,
            "payload": payload,
        });
        let report_hash = sha256_hex(&serde_json::to_vec(&hashed).expect("report serializes"));
        RunReport {
            stage: stage.to_string(),
            seed: cfg.seed,
            config_hash,
            payload,
            report_hash,
            wall_ms: started.elapsed().as_millis() as u64,
        }
    }
}

fn write_report(ws: &Workspace, report: &RunReport) -> Result<()> {
    fs::create_dir_all(ws.root.join("reports"))?;
    let path = ws.report_path(&report.stage);
    fs::write(&path, serde_json::to_vec_pretty(report)?)?;
    log::info!(
        "stage {} done in {} ms, report {}",
        report.stage,
        report.wall_ms,
        path.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// Shared loading helpers

fn require_corpus(
    cfg: &PipelineConfig,
    set: CorpusSet,
) -> Result<(Vec<Utterance>, Vec<LabelRecord>)> {
    let dir = cfg.workspace().corpus_dir(set);
    if !dir.join("manifest.jsonl").exists() {
        return Err(Error::StageOrder(format!(
            "corpus set {:?} not found at {}; run gen-corpus first",
            set.name(),
            dir.display()
        )));
    }
    check_provenance(&dir, cfg)?;
    let (utts, labels, _) = load_corpus_dir(&dir)?;
    Ok((utts, labels))
}

fn require_encoder(cfg: &PipelineConfig) -> Result<(ProsodyAutoencoder, Codebook)> {
    let ws = cfg.workspace();
    let ckpt_path = ws.encoder_ckpt();
    if !ckpt_path.exists() {
        return Err(Error::StageOrder(format!(
            "no encoder checkpoint at {}; run train-encoder first",
            ckpt_path.display()
        )));
    }
    let ckpt = load_model(&ckpt_path)?;
    if ckpt.config_hash != cfg.config_hash() {
        return Err(Error::Config(format!(
            "encoder checkpoint config hash {} does not match current config {}",
            ckpt.config_hash,
            cfg.config_hash()
        )));
    }
    let model = ProsodyAutoencoder::from_params(cfg.encoder.clone(), ckpt.params)?;
    let codebook = Codebook::load(&ws.codebook_path())?;
    Ok((model, codebook))
}

fn require_lpv(cfg: &PipelineConfig, name: &str) -> Result<Vec<LpvSequence>> {
    let path = cfg.workspace().lpv_path(name);
    if !path.exists() {
        return Err(Error::StageOrder(format!(
            "no extracted index file at {}; run extract-lpv first",
            path.display()
        )));
    }
    check_provenance(&path, cfg)?;
    crate::corpus::read_jsonl(&path)
}

fn require_predictor(cfg: &PipelineConfig, stage: StageTag) -> Result<(PredictorModel, Checkpoint)> {
    let path = cfg.workspace().predictor_ckpt(stage);
    if !path.exists() {
        return Err(Error::StageOrder(format!(
            "no {} checkpoint at {}; run the earlier stages first",
            stage.as_str(),
            path.display()
        )));
    }
    let ckpt = load_model(&path)?;
    if ckpt.config_hash != cfg.config_hash() {
        return Err(Error::Config(format!(
            "predictor checkpoint config hash {} does not match current config {}",
            ckpt.config_hash,
            cfg.config_hash()
        )));
    }
    if !ckpt.stages.iter().any(|s| s == stage.as_str()) {
        return Err(Error::StageOrder(format!(
            "checkpoint {} has stages {:?} but {} is required",
            path.display(),
            ckpt.stages,
            stage.as_str()
        )));
    }
    let model = PredictorModel::from_params(cfg.predictor.clone(), ckpt.params.clone())?;
    Ok((model, ckpt))
}

fn save_predictor(
    cfg: &PipelineConfig,
    model: &PredictorModel,
    stages: &[String],
    extra: BTreeMap<String, serde_json::Value>,
) -> Result<PathBuf> {
    let ws = cfg.workspace();
    fs::create_dir_all(ws.checkpoints())?;
    let tag = StageTag::parse(stages.last().expect("at least one stage"))?;
    let path = ws.predictor_ckpt(tag);
    save_model(&path, &model.params, &cfg.config_hash(), stages, &extra)?;
    Ok(path)
}

/// Decimate a loss curve for report embedding: every `stride`-th point
/// plus the last.
fn decimate<T: Clone>(points: &[T], max_points: usize) -> Vec<T> {
    if points.len() <= max_points {
        return points.to_vec();
    }
    let stride = points.len().div_ceil(max_points);
    let mut out: Vec<T> = points.iter().step_by(stride).cloned().collect();
    if let Some(last) = points.last() {
        out.push(last.clone());
    }
    out
}

// ---------------------------------------------------------------------------
// Stage commands

/// Generate one corpus set into the workspace.
pub fn cmd_gen_corpus(
    cfg: &PipelineConfig,
    set: CorpusSet,
    n_override: Option<usize>,
    out_override: Option<&Path>,
) -> Result<RunReport> {
    let started = Instant::now();
    let spec = cfg.spec()?;
    let n = n_override.unwrap_or_else(|| set.count(cfg));
    let (utts, labels) = generate_corpus(&spec, n, set.quality(), set.split(), set.id_prefix())?;
    let ws = cfg.workspace();
    let dir = out_override
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ws.corpus_dir(set));
    fs::create_dir_all(&dir)?;
    let manifest = write_corpus_dir(
        &dir,
        &utts,
        &labels,
        spec.vocab_size,
        spec.n_bands,
    )?;
    write_provenance(&dir, "gen_corpus", cfg)?;
    let total_frames: usize = utts.iter().map(|u| u.n_frames()).sum();
    let total_words: usize = utts.iter().map(|u| u.words.len()).sum();
    let payload = json!({
        "set": set.name(),
        "dir": ws.rel(&dir),
        "n_utts": manifest.utterances.len(),
        "total_words": total_words,
        "total_frames": total_frames,
    });
    let report = RunReport::new(&format!("gen_corpus_{}", set.name()), cfg, payload, started);
    write_report(&ws, &report)?;
    Ok(report)
}

/// Train the prosody autoencoder and codebook on the high-quality corpus.
pub fn cmd_train_encoder(cfg: &PipelineConfig) -> Result<RunReport> {
    let started = Instant::now();
    let (utts, _) = require_corpus(cfg, CorpusSet::High)?;
    let (model, codebook, train_report) = train_encoder(&cfg.encoder, &cfg.vq, &utts)?;
    let ws = cfg.workspace();
    fs::create_dir_all(ws.checkpoints())?;
    save_model(
        &ws.encoder_ckpt(),
        &model.params,
        &cfg.config_hash(),
        &["encoder".to_string()],
        &BTreeMap::new(),
    )?;
    codebook.save(&ws.codebook_path())?;
    write_provenance(&ws.codebook_path(), "train_encoder", cfg)?;
    let payload = json!({
        "final_recon_mse": train_report.final_recon_mse,
        "perplexity": train_report.usage.perplexity,
        "active_codes": train_report.usage.active_codes,
        "reseeded_codes": train_report.reseeded_codes,
        "loss_curve": decimate(&train_report.loss_curve, 80),
    });
    let report = RunReport::new("train_encoder", cfg, payload, started);
    write_report(&ws, &report)?;
    Ok(report)
}

/// Contingency table of code index against ground-truth cluster label.
pub fn code_cluster_contingency(
    seqs: &[LpvSequence],
    labels: &[LabelRecord],
    k: usize,
    n_clusters: usize,
) -> Result<Mat> {
    let mut by_id: BTreeMap<&str, &LpvSequence> = BTreeMap::new();
    for s in seqs {
        by_id.insert(s.utt_id.as_str(), s);
    }
    let mut counts = Mat::zeros(k, n_clusters);
    for l in labels {
        let Some(seq) = by_id.get(l.utt_id.as_str()) else {
            continue;
        };
        if l.word_index >= seq.indices.len() || l.cluster >= n_clusters {
            return Err(Error::Validation(format!(
                "label for {} word {} out of range",
                l.utt_id, l.word_index
            )));
        }
        let code = seq.indices[l.word_index];
        counts.set(code, l.cluster, counts.get(code, l.cluster) + 1.0);
    }
    Ok(counts)
}

/// Quantize a corpus set to per-word code indices.
pub fn cmd_extract_lpv(cfg: &PipelineConfig, set: CorpusSet) -> Result<RunReport> {
    let started = Instant::now();
    if set == CorpusSet::Text {
        return Err(Error::Validation(
            "the text corpus has no audio to extract codes from".into(),
        ));
    }
    let (model, codebook) = require_encoder(cfg)?;
    let (utts, labels) = require_corpus(cfg, set)?;
    let (seqs, usage) = extract_lpv(&model, &codebook, &utts)?;
    let ws = cfg.workspace();
    fs::create_dir_all(ws.root.join("lpv"))?;
    let path = ws.lpv_path(set.name());
    write_jsonl(&seqs, &path)?;
    write_provenance(&path, "extract_lpv", cfg)?;
    let mut payload = json!({
        "set": set.name(),
        "file": ws.rel(&path),
        "n_sequences": seqs.len(),
        "perplexity": usage.perplexity,
        "active_codes": usage.active_codes,
        "histogram": usage.histogram,
    });
    if !labels.is_empty() {
        let cont =
            code_cluster_contingency(&seqs, &labels, codebook.k(), cfg.corpus.params.n_clusters)?;
        payload["purity"] = json!(matching_purity(&cont));
    }
    let report = RunReport::new(&format!("extract_lpv_{}", set.name()), cfg, payload, started);
    write_report(&ws, &report)?;
    Ok(report)
}

fn corpus_texts(utts: &[Utterance]) -> Vec<Vec<u32>> {
    utts.iter().map(|u| u.words.clone()).collect()
}

/// Masked text pretraining over the text-only corpus.
pub fn cmd_pretrain_text(cfg: &PipelineConfig) -> Result<RunReport> {
    let started = Instant::now();
    if !cfg.stages.text_pretrain {
        return Err(Error::Config(
            "stages.text_pretrain is disabled in this config".into(),
        ));
    }
    let (utts, _) = require_corpus(cfg, CorpusSet::Text)?;
    let texts = corpus_texts(&utts);
    let mut rng = substream(cfg.predictor.seed, "predictor/init");
    let mut model = PredictorModel::new(cfg.predictor.clone(), &mut rng)?;
    let stage = text_pretrain(&mut model, &texts, cfg.predictor.text_steps)?;
    let stages = vec![StageTag::TextPretrain.as_str().to_string()];
    let path = save_predictor(cfg, &model, &stages, BTreeMap::new())?;
    let payload = json!({
        "checkpoint": cfg.workspace().rel(&path),
        "final_loss": stage.final_loss,
        "loss_curve": decimate(&stage.loss_curve, 80),
        "n_texts": texts.len(),
    });
    let report = RunReport::new("pretrain_text", cfg, payload, started);
    write_report(&cfg.workspace(), &report)?;
    Ok(report)
}

/// Starting point for audio pretraining: the text-pretrained model when the
/// text stage is enabled, otherwise a fresh initialization.
fn audio_start(cfg: &PipelineConfig) -> Result<(PredictorModel, Vec<String>)> {
    if cfg.stages.text_pretrain {
        let (model, ckpt) = require_predictor(cfg, StageTag::TextPretrain)?;
        Ok((model, ckpt.stages))
    } else {
        let mut rng = substream(cfg.predictor.seed, "predictor/init");
        Ok((PredictorModel::new(cfg.predictor.clone(), &mut rng)?, vec![]))
    }
}

/// Decoder pretraining on the low-quality corpus.
pub fn cmd_pretrain_audio(cfg: &PipelineConfig) -> Result<RunReport> {
    let started = Instant::now();
    if !cfg.stages.audio_pretrain {
        return Err(Error::Config(
            "stages.audio_pretrain is disabled in this config".into(),
        ));
    }
    let (utts, _) = require_corpus(cfg, CorpusSet::Low)?;
    let seqs = require_lpv(cfg, CorpusSet::Low.name())?;
    let pairs = align_pairs(&utts, &seqs)?;
    let (mut model, mut stages) = audio_start(cfg)?;
    let stage = audio_pretrain(&mut model, &pairs, cfg.predictor.audio_steps)?;
    stages.push(StageTag::AudioPretrain.as_str().to_string());
    let path = save_predictor(cfg, &model, &stages, BTreeMap::new())?;
    let payload = json!({
        "checkpoint": cfg.workspace().rel(&path),
        "final_loss": stage.final_loss,
        "loss_curve": decimate(&stage.loss_curve, 80),
        "n_pairs": pairs.len(),
        "stages": stages,
    });
    let report = RunReport::new("pretrain_audio", cfg, payload, started);
    write_report(&cfg.workspace(), &report)?;
    Ok(report)
}

/// Starting point for fine-tuning, honoring the enabled stages.
fn finetune_start(cfg: &PipelineConfig) -> Result<(PredictorModel, Vec<String>)> {
    if cfg.stages.audio_pretrain {
        let (model, ckpt) = require_predictor(cfg, StageTag::AudioPretrain)?;
        Ok((model, ckpt.stages))
    } else {
        audio_start(cfg)
    }
}

/// Held-out pairs from the test corpus, when both artifacts exist.
fn heldout_pairs(cfg: &PipelineConfig) -> Result<Option<Vec<crate::predictor::PredictorPair>>> {
    let ws = cfg.workspace();
    if !ws.lpv_path(CorpusSet::Test.name()).exists()
        || !ws.corpus_dir(CorpusSet::Test).join("manifest.jsonl").exists()
    {
        return Ok(None);
    }
    let (utts, _) = require_corpus(cfg, CorpusSet::Test)?;
    let seqs = require_lpv(cfg, CorpusSet::Test.name())?;
    Ok(Some(align_pairs(&utts, &seqs)?))
}

/// Final decoder training on the high-quality corpus.
pub fn cmd_finetune(cfg: &PipelineConfig) -> Result<RunReport> {
    let started = Instant::now();
    let (utts, _) = require_corpus(cfg, CorpusSet::High)?;
    let seqs = require_lpv(cfg, CorpusSet::High.name())?;
    let pairs = align_pairs(&utts, &seqs)?;
    let (mut model, mut stages) = finetune_start(cfg)?;
    let stage = finetune(&mut model, &pairs, cfg.predictor.finetune_steps)?;
    stages.push(StageTag::Finetune.as_str().to_string());
    let mut payload = json!({
        "final_loss": stage.final_loss,
        "loss_curve": decimate(&stage.loss_curve, 80),
        "n_pairs": pairs.len(),
        "stages": stages,
    });
    if let Some(held) = heldout_pairs(cfg)? {
        payload["heldout_ce"] = json!(ar_eval_loss(&model, &held)?);
        payload["n_heldout"] = json!(held.len());
    }
    let path = save_predictor(cfg, &model, &stages, BTreeMap::new())?;
    payload["checkpoint"] = json!(cfg.workspace().rel(&path));
    let report = RunReport::new("finetune", cfg, payload, started);
    write_report(&cfg.workspace(), &report)?;
    Ok(report)
}

/// How predict chooses an index per word.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum PredictMode {
    Greedy,
    Sample { temperature: f64 },
    /// Uniform-random indices; the reference baseline, no model involved.
    Uniform,
}

impl PredictMode {
    pub fn name(&self) -> &'static str {
        match self {
            PredictMode::Greedy => "greedy",
            PredictMode::Sample { .. } => "sample",
            PredictMode::Uniform => "uniform",
        }
    }

    pub fn parse(s: &str, temperature: f64) -> Result<PredictMode> {
        match s {
            "greedy" => Ok(PredictMode::Greedy),
            "sample" => Ok(PredictMode::Sample { temperature }),
            "uniform" => Ok(PredictMode::Uniform),
            other => Err(Error::Config(format!(
                "unknown predict mode {other:?}; expected greedy, sample or uniform"
            ))),
        }
    }
}

/// Predict an index sequence for every utterance of a corpus set.
pub fn cmd_predict(
    cfg: &PipelineConfig,
    set: CorpusSet,
    mode: PredictMode,
    out_name: Option<&str>,
) -> Result<RunReport> {
    let started = Instant::now();
    let (utts, _) = require_corpus(cfg, set)?;
    let model = match mode {
        PredictMode::Uniform => None,
        _ => Some(require_predictor(cfg, StageTag::Finetune)?.0),
    };
    let mut seqs = Vec::with_capacity(utts.len());
    for u in &utts {
        let indices = match (&model, mode) {
            (_, PredictMode::Uniform) => {
                let mut rng =
                    substream(cfg.predictor.seed, &format!("predict/uniform/{}", u.id));
                (0..u.words.len())
                    .map(|_| rng.random_range(0..cfg.predictor.k))
                    .collect()
            }
            (Some(m), PredictMode::Greedy) => {
                let mut rng = substream(cfg.predictor.seed, &format!("predict/greedy/{}", u.id));
                m.generate(&u.words, GenerateMode::Greedy, &mut rng)?
            }
            (Some(m), PredictMode::Sample { temperature }) => {
                let mut rng = substream(cfg.predictor.seed, &format!("predict/sample/{}", u.id));
                m.generate(&u.words, GenerateMode::Sample { temperature }, &mut rng)?
            }
            (None, _) => unreachable!("model loaded for non-uniform modes"),
        };
        seqs.push(LpvSequence {
            utt_id: u.id.clone(),
            indices,
        });
    }
    let ws = cfg.workspace();
    fs::create_dir_all(ws.root.join("lpv"))?;
    let default_name = match mode {
        PredictMode::Uniform => "uniform".to_string(),
        _ => "predicted".to_string(),
    };
    let name = out_name.map(str::to_string).unwrap_or(default_name);
    let path = ws.lpv_path(&name);
    write_jsonl(&seqs, &path)?;
    write_provenance(&path, "predict", cfg)?;
    let all: Vec<usize> = seqs.iter().flat_map(|s| s.indices.iter().copied()).collect();
    let usage = usage_stats(&all, cfg.predictor.k)?;
    let payload = json!({
        "set": set.name(),
        "mode": mode.name(),
        "file": ws.rel(&path),
        "n_sequences": seqs.len(),
        "perplexity": usage.perplexity,
        "active_codes": usage.active_codes,
    });
    let report = RunReport::new(&format!("predict_{}", mode.name()), cfg, payload, started);
    write_report(&ws, &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Evaluation

/// Majority-vote map from code index to generator cluster, learned on the
/// high-quality training extraction. Codes never seen map to cluster 0.
pub struct ClusterMap {
    pub map: Vec<usize>,
    pub contingency: Mat,
}

pub fn code_cluster_map(
    seqs: &[LpvSequence],
    labels: &[LabelRecord],
    k: usize,
    n_clusters: usize,
) -> Result<ClusterMap> {
    let cont = code_cluster_contingency(seqs, labels, k, n_clusters)?;
    let mut map = Vec::with_capacity(k);
    for code in 0..k {
        let row = cont.row(code);
        let mut best = 0;
        for (c, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = c;
            }
        }
        map.push(best);
    }
    Ok(ClusterMap {
        map,
        contingency: cont,
    })
}

/// One side of an evaluation: real recorded prosody, or code sequences
/// decoded through the cluster map onto generator prototypes.
#[derive(Clone, Debug)]
pub enum SystemSpec {
    Corpus(CorpusSet),
    Lpv { name: String, words_from: CorpusSet },
}

impl SystemSpec {
    /// Syntax: `corpus:<set>` or `lpv:<name>:<set>`; `<set>` is the corpus
    /// the word identities and ground truth come from.
    pub fn parse(s: &str) -> Result<SystemSpec> {
        if let Some(rest) = s.strip_prefix("corpus:") {
            return Ok(SystemSpec::Corpus(CorpusSet::parse(rest)?));
        }
        if let Some(rest) = s.strip_prefix("lpv:") {
            let Some((name, set)) = rest.split_once(':') else {
                return Err(Error::Config(format!(
                    "lpv system spec {s:?} must look like lpv:<name>:<corpus-set>"
                )));
            };
            return Ok(SystemSpec::Lpv {
                name: name.to_string(),
                words_from: CorpusSet::parse(set)?,
            });
        }
        Err(Error::Config(format!(
            "system spec {s:?} must start with corpus: or lpv:"
        )))
    }

    fn describe(&self) -> String {
        match self {
            SystemSpec::Corpus(set) => format!("corpus:{}", set.name()),
            SystemSpec::Lpv { name, words_from } => {
                format!("lpv:{name}:{}", words_from.name())
            }
        }
    }
}

/// Prosody of one utterance as the metrics see it.
struct ProsodyView {
    contour: PitchContour,
    /// (word token, frames) per word.
    durations: Vec<(u32, u32)>,
}

/// Prototype prosody for an utterance given a cluster choice per word:
/// per-cluster mean duration and noiseless pitch line, voiced on interior
/// frames, mirroring the corpus generator without its noise terms.
fn prototype_view(spec: &SyntheticSpec, words: &[u32], clusters: &[usize]) -> Result<ProsodyView> {
    if words.len() != clusters.len() {
        return Err(Error::Validation(format!(
            "{} words but {} cluster choices",
            words.len(),
            clusters.len()
        )));
    }
    let mut pitch = Vec::new();
    let mut voiced = Vec::new();
    let mut durations = Vec::with_capacity(words.len());
    for (&w, &c) in words.iter().zip(clusters.iter()) {
        if c >= spec.n_clusters {
            return Err(Error::Validation(format!("cluster {c} out of range")));
        }
        let d = spec.duration_mean.row(w as usize)[c].round().max(2.0) as usize;
        durations.push((w, d as u32));
        for f in 0..d {
            pitch.push(spec.pitch_base[c] + spec.pitch_slope[c] * f as f64);
            voiced.push(f != 0 && f != d - 1);
        }
    }
    Ok(ProsodyView {
        contour: PitchContour::new(pitch, voiced)?,
        durations,
    })
}

/// Load one system's prosody per utterance id.
fn load_system(cfg: &PipelineConfig, spec: &SystemSpec, force: bool) -> Result<BTreeMap<String, ProsodyView>> {
    let ws = cfg.workspace();
    match spec {
        SystemSpec::Corpus(set) => {
            let (utts, _) = require_corpus(cfg, *set)?;
            let mut out = BTreeMap::new();
            for u in &utts {
                let Some(audio) = &u.audio else { continue };
                let contour = PitchContour::new(audio.pitch.clone(), audio.voiced.clone())?;
                let durations = u
                    .words
                    .iter()
                    .zip(audio.boundaries.iter())
                    .map(|(&w, &(s, e))| (w, (e - s) as u32))
                    .collect();
                out.insert(u.id.clone(), ProsodyView { contour, durations });
            }
            Ok(out)
        }
        SystemSpec::Lpv { name, words_from } => {
            let path = ws.lpv_path(name);
            if !path.exists() {
                return Err(Error::StageOrder(format!(
                    "no index file at {}; run extract-lpv or predict first",
                    path.display()
                )));
            }
            if let Err(e) = check_provenance(&path, cfg) {
                if force {
                    log::warn!("ignoring provenance mismatch for {}: {e}", path.display());
                } else {
                    return Err(e);
                }
            }
            let seqs: Vec<LpvSequence> = crate::corpus::read_jsonl(&path)?;
            let (utts, _) = require_corpus(cfg, *words_from)?;
            let gen_spec = cfg.spec()?;

            // Decode codes to clusters with the map learned on the training
            // extraction.
            let train_seqs = require_lpv(cfg, CorpusSet::High.name())?;
            let (_, train_labels) = require_corpus(cfg, CorpusSet::High)?;
            let cmap = code_cluster_map(
                &train_seqs,
                &train_labels,
                cfg.predictor.k,
                cfg.corpus.params.n_clusters,
            )?;

            let mut words_by_id: BTreeMap<&str, &Utterance> = BTreeMap::new();
            for u in &utts {
                words_by_id.insert(u.id.as_str(), u);
            }
            let mut out = BTreeMap::new();
            for s in &seqs {
                let Some(u) = words_by_id.get(s.utt_id.as_str()) else {
                    continue;
                };
                if s.indices.len() != u.words.len() {
                    return Err(Error::Validation(format!(
                        "utterance {}: {} indices but {} words",
                        s.utt_id,
                        s.indices.len(),
                        u.words.len()
                    )));
                }
                for &i in &s.indices {
                    if i >= cmap.map.len() {
                        return Err(Error::Validation(format!(
                            "index {i} out of codebook range in {}",
                            s.utt_id
                        )));
                    }
                }
                let clusters: Vec<usize> = s.indices.iter().map(|&i| cmap.map[i]).collect();
                out.insert(
                    s.utt_id.clone(),
                    prototype_view(&gen_spec, &u.words, &clusters)?,
                );
            }
            Ok(out)
        }
    }
}

/// Compare two prosody systems: mean DTW pitch distance over common
/// utterances, and the dictionary-averaged duration divergence.
pub fn cmd_evaluate(
    cfg: &PipelineConfig,
    sys1: &SystemSpec,
    sys2: &SystemSpec,
    force: bool,
    report_name: &str,
) -> Result<RunReport> {
    let started = Instant::now();
    let a = load_system(cfg, sys1, force)?;
    let b = load_system(cfg, sys2, force)?;
    let common: Vec<&String> = a.keys().filter(|k| b.contains_key(*k)).collect();
    if common.is_empty() {
        return Err(Error::Validation(
            "the two systems share no utterance ids".into(),
        ));
    }
    let mut per_utt = BTreeMap::new();
    let mut table = DurationTable::new();
    for id in &common {
        let va = &a[*id];
        let vb = &b[*id];
        let d = pitch_dtw_distance(&va.contour, &vb.contour, cfg.metrics.pitch_cost)?;
        per_utt.insert((*id).clone(), d);
        for &(w, frames) in &va.durations {
            table.push(&format!("w{w}"), 1, frames)?;
        }
        for &(w, frames) in &vb.durations {
            table.push(&format!("w{w}"), 2, frames)?;
        }
    }
    let d_pit_mean = per_utt.values().sum::<f64>() / per_utt.len() as f64;
    let kl_dur = duration_kl(&table)?;
    let payload = json!({
        "system1": sys1.describe(),
        "system2": sys2.describe(),
        "n_utts": common.len(),
        "d_pit_mean": d_pit_mean,
        "d_pit_per_utt": per_utt,
        "kl_dur": kl_dur,
        "s_w": table.dictionary_size(),
    });
    let report = RunReport::new(report_name, cfg, payload, started);
    write_report(&cfg.workspace(), &report)?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// Composite commands

/// Full pipeline: corpora, encoder, extractions, predictor stages, greedy
/// and uniform decoding, and both evaluations against ground truth.
pub fn cmd_run_all(cfg: &PipelineConfig) -> Result<RunReport> {
    let started = Instant::now();
    for set in CorpusSet::ALL {
        cmd_gen_corpus(cfg, set, None, None)?;
    }
    cmd_train_encoder(cfg)?;
    cmd_extract_lpv(cfg, CorpusSet::High)?;
    cmd_extract_lpv(cfg, CorpusSet::Low)?;
    cmd_extract_lpv(cfg, CorpusSet::Test)?;
    if cfg.stages.text_pretrain {
        cmd_pretrain_text(cfg)?;
    }
    if cfg.stages.audio_pretrain {
        cmd_pretrain_audio(cfg)?;
    }
    let fin = cmd_finetune(cfg)?;
    cmd_predict(cfg, CorpusSet::Test, PredictMode::Greedy, None)?;
    cmd_predict(cfg, CorpusSet::Test, PredictMode::Uniform, None)?;
    let truth = SystemSpec::Corpus(CorpusSet::Test);
    let model_eval = cmd_evaluate(
        cfg,
        &SystemSpec::Lpv {
            name: "predicted".into(),
            words_from: CorpusSet::Test,
        },
        &truth,
        false,
        "evaluate_model",
    )?;
    let uniform_eval = cmd_evaluate(
        cfg,
        &SystemSpec::Lpv {
            name: "uniform".into(),
            words_from: CorpusSet::Test,
        },
        &truth,
        false,
        "evaluate_uniform",
    )?;
    let payload = json!({
        "finetune_loss": fin.payload["final_loss"],
        "heldout_ce": fin.payload.get("heldout_ce"),
        "model": {
            "d_pit": model_eval.payload["d_pit_mean"],
            "kl_dur": model_eval.payload["kl_dur"],
        },
        "uniform": {
            "d_pit": uniform_eval.payload["d_pit_mean"],
            "kl_dur": uniform_eval.payload["kl_dur"],
        },
    });
    let report = RunReport::new("run_all", cfg, payload, started);
    write_report(&cfg.workspace(), &report)?;
    Ok(report)
}

/// Which single factor an ablation arm flips.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblateToggle {
    KmeansInit,
    TextPt,
    AudioPt,
    CodebookSize,
}

impl AblateToggle {
    pub fn name(&self) -> &'static str {
        match self {
            AblateToggle::KmeansInit => "kmeans_init",
            AblateToggle::TextPt => "text_pt",
            AblateToggle::AudioPt => "audio_pt",
            AblateToggle::CodebookSize => "codebook_size",
        }
    }

    pub fn parse(s: &str) -> Result<AblateToggle> {
        match s {
            "kmeans_init" => Ok(AblateToggle::KmeansInit),
            "text_pt" => Ok(AblateToggle::TextPt),
            "audio_pt" => Ok(AblateToggle::AudioPt),
            "codebook_size" => Ok(AblateToggle::CodebookSize),
            other => Err(Error::Config(format!(
                "unknown ablation toggle {other:?}; expected kmeans_init, text_pt, audio_pt or codebook_size"
            ))),
        }
    }

    fn apply(&self, cfg: &mut PipelineConfig) {
        match self {
            AblateToggle::KmeansInit => cfg.vq.kmeans_init = false,
            AblateToggle::TextPt => cfg.stages.text_pretrain = false,
            AblateToggle::AudioPt => cfg.stages.audio_pretrain = false,
            AblateToggle::CodebookSize => {
                cfg.vq.k = cfg.ablate.small_k;
                cfg.predictor.k = cfg.ablate.small_k;
            }
        }
    }
}

/// Dot-paths whose values differ between two configs, ignoring the
/// workspace path (arms always run in separate directories).
pub fn config_diff(a: &PipelineConfig, b: &PipelineConfig) -> Vec<String> {
    fn walk(prefix: &str, a: &serde_json::Value, b: &serde_json::Value, out: &mut Vec<String>) {
        match (a, b) {
            (serde_json::Value::Object(ma), serde_json::Value::Object(mb)) => {
                for key in ma.keys().chain(mb.keys().filter(|k| !ma.contains_key(*k))) {
                    let pa = ma.get(key).cloned().unwrap_or(serde_json::Value::Null);
                    let pb = mb.get(key).cloned().unwrap_or(serde_json::Value::Null);
                    let path = if prefix.is_empty() {
                        key.clone()
                    } else {
                        format!("{prefix}.{key}")
                    };
                    walk(&path, &pa, &pb, out);
                }
            }
            _ => {
                if a != b {
                    out.push(prefix.to_string());
                }
            }
        }
    }
    let va = serde_json::to_value(a).expect("config serializes");
    let vb = serde_json::to_value(b).expect("config serializes");
    let mut out = Vec::new();
    walk("", &va, &vb, &mut out);
    out.retain(|k| !k.starts_with("paths."));
    out
}

/// Metrics one ablation run produces.
#[derive(Clone, Debug, Serialize)]
pub struct ArmMetrics {
    pub perplexity: Option<f64>,
    pub purity: Option<f64>,
    pub heldout_ce: Option<f64>,
}

/// Codebook-level run: corpus, encoder training, train-set extraction.
fn run_codebook_arm(cfg: &PipelineConfig) -> Result<ArmMetrics> {
    cmd_gen_corpus(cfg, CorpusSet::High, None, None)?;
    cmd_train_encoder(cfg)?;
    let extract = cmd_extract_lpv(cfg, CorpusSet::High)?;
    Ok(ArmMetrics {
        perplexity: extract.payload["perplexity"].as_f64(),
        purity: extract.payload["purity"].as_f64(),
        heldout_ce: None,
    })
}

/// Predictor-level run: everything through fine-tuning, reporting the
/// held-out cross-entropy.
fn run_predictor_arm(cfg: &PipelineConfig) -> Result<ArmMetrics> {
    for set in CorpusSet::ALL {
        cmd_gen_corpus(cfg, set, None, None)?;
    }
    cmd_train_encoder(cfg)?;
    let extract = cmd_extract_lpv(cfg, CorpusSet::High)?;
    cmd_extract_lpv(cfg, CorpusSet::Low)?;
    cmd_extract_lpv(cfg, CorpusSet::Test)?;
    if cfg.stages.text_pretrain {
        cmd_pretrain_text(cfg)?;
    }
    if cfg.stages.audio_pretrain {
        cmd_pretrain_audio(cfg)?;
    }
    let fin = cmd_finetune(cfg)?;
    Ok(ArmMetrics {
        perplexity: extract.payload["perplexity"].as_f64(),
        purity: extract.payload["purity"].as_f64(),
        heldout_ce: fin.payload.get("heldout_ce").and_then(|v| v.as_f64()),
    })
}

fn mean_of(values: &[Option<f64>]) -> Option<f64> {
    let xs: Vec<f64> = values.iter().filter_map(|v| *v).collect();
    if xs.len() == values.len() && !xs.is_empty() {
        Some(xs.iter().sum::<f64>() / xs.len() as f64)
    } else {
        None
    }
}

/// Paired ablation over `ablate.seeds` seeds: for each seed, run the
/// baseline config and the config with one factor flipped, in separate
/// workspace subdirectories, and report both sides.
pub fn cmd_ablate(cfg: &PipelineConfig, toggle: AblateToggle) -> Result<RunReport> {
    let started = Instant::now();
    let ws = cfg.workspace();
    let mut rows = Vec::new();
    let mut base_metrics = Vec::new();
    let mut var_metrics = Vec::new();
    let mut diff_keys = Vec::new();
    for i in 0..cfg.ablate.seeds {
        let seed = cfg.seed.wrapping_add(i as u64);
        let arm_root = ws.root.join("ablate").join(toggle.name()).join(format!("s{i}"));

        let mut base = cfg.clone();
        base.seed = seed;
        base.paths.workspace = arm_root.join("base");
        base.normalize();

        let mut variant = cfg.clone();
        variant.seed = seed;
        variant.paths.workspace = arm_root.join("variant");
        toggle.apply(&mut variant);
        variant.normalize();

        diff_keys = config_diff(&base, &variant);
        log::info!("ablate {} seed {seed}: arm differs in {diff_keys:?}", toggle.name());

        let (bm, vm) = match toggle {
            AblateToggle::KmeansInit => {
                (run_codebook_arm(&base)?, run_codebook_arm(&variant)?)
            }
            _ => (run_predictor_arm(&base)?, run_predictor_arm(&variant)?),
        };
        rows.push(json!({
            "seed": seed,
            "baseline": bm,
            "variant": vm,
        }));
        base_metrics.push(bm);
        var_metrics.push(vm);
    }
    let summary = |side: &[ArmMetrics]| {
        json!({
            "perplexity": mean_of(&side.iter().map(|m| m.perplexity).collect::<Vec<_>>()),
            "purity": mean_of(&side.iter().map(|m| m.purity).collect::<Vec<_>>()),
            "heldout_ce": mean_of(&side.iter().map(|m| m.heldout_ce).collect::<Vec<_>>()),
        })
    };
    let payload = json!({
        "toggle": toggle.name(),
        "seeds": cfg.ablate.seeds,
        "config_diff": diff_keys,
        "rows": rows,
        "baseline_mean": summary(&base_metrics),
        "variant_mean": summary(&var_metrics),
    });
    let report = RunReport::new(&format!("ablate_{}", toggle.name()), cfg, payload, started);
    write_report(&ws, &report)?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_config(root: &Path) -> PipelineConfig {
        let mut cfg = PipelineConfig::default();
        cfg.paths.workspace = root.to_path_buf();
        cfg.corpus.params.vocab_size = 12;
        cfg.corpus.params.n_clusters = 4;
        cfg.corpus.params.n_bands = 16;
        cfg.corpus.params.n_low_bands = 8;
        cfg.corpus.n_high = 12;
        cfg.corpus.n_low = 12;
        cfg.corpus.n_text = 20;
        cfg.corpus.n_test = 8;
        cfg.encoder.total_steps = 60;
        cfg.encoder.warmup_steps = 20;
        cfg.vq.k = 8;
        cfg.predictor.vocab_size = 12;
        cfg.predictor.k = 8;
        cfg.predictor.context_layers = 1;
        cfg.predictor.ar_layers = 1;
        cfg.predictor.hidden = 16;
        cfg.predictor.heads = 2;
        cfg.predictor.text_steps = 10;
        cfg.predictor.audio_steps = 10;
        cfg.predictor.finetune_steps = 10;
        cfg.normalize();
        cfg.validate().unwrap();
        cfg
    }

    #[test]
    fn default_config_is_valid_and_hash_is_stable() {
        let cfg = PipelineConfig::default();
        cfg.validate().unwrap();
        assert_eq!(cfg.config_hash(), cfg.clone().config_hash());
        let mut other = cfg.clone();
        other.seed = 1;
        other.normalize();
        assert_ne!(cfg.config_hash(), other.config_hash());
    }

    #[test]
    fn overrides_set_nested_fields_and_reject_junk() {
        let cfg = parse_config(
            "",
            &[
                "seed=9".into(),
                "vq.k=32".into(),
                "predictor.k=32".into(),
                "stages.text_pretrain=false".into(),
            ],
        )
        .unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.vq.k, 32);
        assert!(!cfg.stages.text_pretrain);

        assert!(parse_config("", &["vq.k".into()]).is_err());
        assert!(parse_config("", &["vq.nonsense=1".into()]).is_err());
        let err = parse_config("", &["vq.k=31".into()]).unwrap_err();
        assert_eq!(err.exit_code(), 2, "k mismatch is a config error");
    }

    #[test]
    fn normalize_overrides_sub_seeds() {
        let cfg = parse_config("", &["encoder.seed=12345".into()]).unwrap();
        assert_eq!(cfg.encoder.seed, derive_seed(0, "stage/encoder"));
    }

    #[test]
    fn stage_order_errors_have_exit_code_3() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = test_config(dir.path());
        let err = cmd_train_encoder(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let err = cmd_extract_lpv(&cfg, CorpusSet::High).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let err = cmd_finetune(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        let err = cmd_predict(&cfg, CorpusSet::Test, PredictMode::Greedy, None).unwrap_err();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn finetune_requires_declared_audio_stage() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = test_config(dir.path());
        for set in CorpusSet::ALL {
            cmd_gen_corpus(&cfg, set, None, None).unwrap();
        }
        cmd_train_encoder(&cfg).unwrap();
        cmd_extract_lpv(&cfg, CorpusSet::High).unwrap();
        cmd_extract_lpv(&cfg, CorpusSet::Low).unwrap();
        // Text and audio stages skipped: finetune must refuse while the
        // config still declares them.
        let err = cmd_finetune(&cfg).unwrap_err();
        assert_eq!(err.exit_code(), 3, "expected stage-order violation");
    }

    #[test]
    fn config_hash_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = test_config(dir.path());
        cmd_gen_corpus(&cfg, CorpusSet::High, None, None).unwrap();
        let mut other = cfg.clone();
        other.seed += 1;
        other.normalize();
        let err = cmd_train_encoder(&other).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn pipeline_runs_end_to_end_and_reruns_reproduce_hashes() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = test_config(dir.path());
        let r1 = cmd_run_all(&cfg).unwrap();
        assert!(r1.payload["model"]["d_pit"].is_number());
        assert!(r1.payload["uniform"]["kl_dur"].is_number());

        let dir2 = tempfile::tempdir().unwrap();
        let mut cfg2 = cfg.clone();
        cfg2.paths.workspace = dir2.path().to_path_buf();
        let r2 = cmd_run_all(&cfg2).unwrap();
        // Same config except workspace path: every numeric outcome and
        // stage payload must agree.
        assert_eq!(r1.payload["model"], r2.payload["model"]);
        assert_eq!(r1.payload["uniform"], r2.payload["uniform"]);

        // Identical artifacts, bit for bit.
        for name in ["high", "low", "predicted", "uniform"] {
            let a = fs::read(cfg.workspace().lpv_path(name)).unwrap();
            let b = fs::read(cfg2.workspace().lpv_path(name)).unwrap();
            assert_eq!(a, b, "lpv artifact {name} differs between reruns");
        }
        let a = fs::read(cfg.workspace().encoder_ckpt()).unwrap();
        let b = fs::read(cfg2.workspace().encoder_ckpt()).unwrap();
        assert_eq!(a, b, "encoder checkpoint differs between reruns");
    }

    #[test]
    fn config_diff_reports_only_toggled_keys() {
        let cfg = PipelineConfig::default();
        let mut variant = cfg.clone();
        AblateToggle::TextPt.apply(&mut variant);
        assert_eq!(config_diff(&cfg, &variant), vec!["stages.text_pretrain"]);

        let mut variant = cfg.clone();
        AblateToggle::CodebookSize.apply(&mut variant);
        assert_eq!(config_diff(&cfg, &variant), vec!["predictor.k", "vq.k"]);
    }

    #[test]
    fn prototype_view_matches_generator_means() {
        let cfg = test_config(Path::new("unused"));
        let spec = cfg.spec().unwrap();
        let view = prototype_view(&spec, &[0, 1], &[2, 0]).unwrap();
        let d0 = spec.duration_mean.row(0)[2].round().max(2.0) as u32;
        let d1 = spec.duration_mean.row(1)[0].round().max(2.0) as u32;
        assert_eq!(view.durations, vec![(0, d0), (1, d1)]);
        assert_eq!(view.contour.values().len(), (d0 + d1) as usize);
        // First frame of each word is unvoiced.
        assert!(!view.contour.voiced()[0]);
        assert!(!view.contour.voiced()[d0 as usize]);
        assert_eq!(view.contour.values()[1], spec.pitch_base[2] + spec.pitch_slope[2]);
    }
}
