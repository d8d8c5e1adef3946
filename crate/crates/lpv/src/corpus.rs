//! Data model, file formats and a synthetic prosody corpus generator.
//!
//! The generator produces word-segmented utterances whose per-word
//! acoustic style is drawn from a small set of hidden prosody clusters.
//! The hidden cluster of every word is kept in a sidecar file so that
//! downstream quantization quality can be scored against ground truth.
//!
//! On disk a corpus directory holds:
//! - `manifest.jsonl`: one header line, then one record per utterance
//! - `features/<id>.lpvf`: binary frame-by-band feature matrices
//! - `utterances.jsonl`: word ids, boundaries, pitch and voicing
//! - `labels.jsonl`: hidden cluster per (utterance, word)

use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write as _};
use std::path::{Path, PathBuf};

use rand::RngExt;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Mat;
use crate::rng::{randn, substream};

pub const FEATURE_MAGIC: &[u8; 4] = b"LPVF";
pub const FEATURE_VERSION: u32 = 1;
pub const MANIFEST_VERSION: u32 = 1;

/// Recording condition of an utterance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Quality {
    High,
    Low,
    TextOnly,
}

/// Dataset partition.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Valid,
    Test,
}

/// Acoustic side of an utterance; absent for text-only data.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioData {
    /// Half-open frame intervals, one per word, contiguous from 0.
    pub boundaries: Vec<(usize, usize)>,
    /// Frames by bands.
    pub features: Mat,
    /// Per-frame pitch in Hz.
    pub pitch: Vec<f64>,
    /// Per-frame voicing mask.
    pub voiced: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utterance {
    pub id: String,
    /// Word-token ids in [0, vocab_size).
    pub words: Vec<u32>,
    pub audio: Option<AudioData>,
    pub quality: Quality,
    pub split: Split,
}

impl Utterance {
    /// Checks the structural invariants tying words, boundaries and frames
    /// together.
    pub fn validate(&self) -> Result<()> {
        match (&self.audio, self.quality) {
            (None, Quality::TextOnly) => return Ok(()),
            (None, q) => {
                return Err(Error::Validation(format!(
                    "utterance {} has quality {q:?} but no audio",
                    self.id
                )))
            }
            (Some(_), Quality::TextOnly) => {
                return Err(Error::Validation(format!(
                    "text-only utterance {} carries audio",
                    self.id
                )))
            }
            (Some(_), _) => {}
        }
        let audio = self.audio.as_ref().unwrap();
        let f = audio.features.rows();
        if audio.boundaries.len() != self.words.len() {
            return Err(Error::Validation(format!(
                "utterance {}: {} words but {} boundaries",
                self.id,
                self.words.len(),
                audio.boundaries.len()
            )));
        }
        if audio.pitch.len() != f || audio.voiced.len() != f {
            return Err(Error::Validation(format!(
                "utterance {}: pitch/voicing length does not match {f} frames",
                self.id
            )));
        }
        let mut cursor = 0usize;
        for (w, &(s, e)) in audio.boundaries.iter().enumerate() {
            if s != cursor || e <= s {
                return Err(Error::Validation(format!(
                    "utterance {}: boundary {w} is ({s},{e}), expected non-empty interval starting at {cursor}",
                    self.id
                )));
            }
            cursor = e;
        }
        if cursor != f {
            return Err(Error::Validation(format!(
                "utterance {}: boundaries cover {cursor} frames of {f}",
                self.id
            )));
        }
        if !audio.features.is_finite() {
            return Err(Error::Validation(format!(
                "utterance {}: non-finite feature value",
                self.id
            )));
        }
        Ok(())
    }

    /// Word durations in frames.
    pub fn word_durations(&self) -> Option<Vec<u32>> {
        self.audio
            .as_ref()
            .map(|a| a.boundaries.iter().map(|&(s, e)| (e - s) as u32).collect())
    }

    pub fn n_frames(&self) -> usize {
        self.audio.as_ref().map_or(0, |a| a.features.rows())
    }
}

/// Mean of the first `n_low` bands over each word's frames.
///
/// This is the ground-truth analog of the encoder's pooling step, used by
/// recovery tests and examples.
pub fn pooled_low_band(utt: &Utterance, n_low: usize) -> Option<Mat> {
    let audio = utt.audio.as_ref()?;
    let mut out = Mat::zeros(utt.words.len(), n_low);
    for (w, &(s, e)) in audio.boundaries.iter().enumerate() {
        for b in 0..n_low {
            let mut acc = 0.0;
            for t in s..e {
                acc += audio.features.get(t, b);
            }
            out.set(w, b, acc / (e - s) as f64);
        }
    }
    Some(out)
}

/// Scalar knobs from which the full synthetic corpus tables are derived.
///
/// Keeping only scalars here lets the whole generator configuration live
/// in a plain config file; [`SyntheticSpec::from_params`] expands them
/// into the per-word and per-cluster tables deterministically.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpecParams {
    pub vocab_size: usize,
    pub n_clusters: usize,
    pub n_bands: usize,
    pub n_low_bands: usize,
    pub noise_sigma: f64,
    /// Noise level of the bands above `n_low_bands`; they carry no signal.
    pub filler_sigma: f64,
    /// Probability mass on a word's dominant prosody cluster.
    pub style_peak: f64,
    /// Probability mass on a word's most likely successor.
    pub bigram_peak: f64,
    /// Scale of the cluster mean vectors before separation is enforced.
    pub mean_scale: f64,
    pub duration_sigma: f64,
    pub pitch_noise_sigma: f64,
    pub words_min: usize,
    pub words_max: usize,
    /// Low quality: fraction of frames replaced by uniform noise.
    pub corrupt_frac: f64,
    /// Low quality: multiplier on `noise_sigma`.
    pub low_noise_mult: f64,
    /// Amplitude of the uniform corruption noise.
    pub corrupt_amp: f64,
    pub seed: u64,
}

impl Default for SyntheticSpecParams {
    fn default() -> Self {
        Self {
            vocab_size: 40,
            n_clusters: 8,
            n_bands: 80,
            n_low_bands: 20,
            noise_sigma: 0.5,
            filler_sigma: 1.0,
            style_peak: 0.85,
            bigram_peak: 0.7,
            mean_scale: 3.0,
            duration_sigma: 1.0,
            pitch_noise_sigma: 2.0,
            words_min: 3,
            words_max: 8,
            corrupt_frac: 0.05,
            low_noise_mult: 2.0,
            corrupt_amp: 4.0,
            seed: 17,
        }
    }
}

/// Fully expanded generator specification.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub n_clusters: usize,
    /// Cluster centers in the low band, values snapped to f32 so pooled
    /// features survive the on-disk f32 round trip bit-exactly.
    pub cluster_means: Mat,
    pub noise_sigma: f64,
    /// Per-word distribution over prosody clusters, row-stochastic.
    pub word_style_table: Mat,
    /// Per (word, cluster) mean frame count.
    pub duration_mean: Mat,
    pub duration_sigma: f64,
    /// Per-cluster pitch intercept (Hz) and per-frame slope.
    pub pitch_base: Vec<f64>,
    pub pitch_slope: Vec<f64>,
    pub pitch_noise_sigma: f64,
    /// Word bigram transition matrix, row-stochastic.
    pub bigram: Mat,
    pub n_bands: usize,
    pub n_low_bands: usize,
    pub filler_sigma: f64,
    pub words_min: usize,
    pub words_max: usize,
    pub corrupt_frac: f64,
    pub low_noise_mult: f64,
    pub corrupt_amp: f64,
    pub seed: u64,
}

fn snap_f32(x: f64) -> f64 {
    x as f32 as f64
}

fn peaked_row(n: usize, peak_at: usize, peak: f64) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    let rest = (1.0 - peak) / (n - 1) as f64;
    (0..n).map(|j| if j == peak_at { peak } else { rest }).collect()
}

impl SyntheticSpec {
    /// Expands scalar parameters into the full table set. All derived
    /// tables are functions of `params.seed` alone.
    pub fn from_params(params: &SyntheticSpecParams) -> Result<Self> {
        let p = params;
        if p.vocab_size == 0 || p.n_clusters == 0 {
            return Err(Error::Validation(
                "vocab_size and n_clusters must be positive".into(),
            ));
        }
        if p.n_low_bands == 0 || p.n_low_bands > p.n_bands {
            return Err(Error::Validation(format!(
                "n_low_bands {} must be in 1..={}",
                p.n_low_bands, p.n_bands
            )));
        }
        if !(0.0..=1.0).contains(&p.style_peak) || !(0.0..=1.0).contains(&p.bigram_peak) {
            return Err(Error::Validation(
                "style_peak and bigram_peak must lie in [0, 1]".into(),
            ));
        }
        if p.words_min < 1 || p.words_min > p.words_max {
            return Err(Error::Validation(format!(
                "words_min..words_max range {}..{} is invalid",
                p.words_min, p.words_max
            )));
        }

        let mut rng = substream(p.seed, "corpus/cluster_means");
        let mut cluster_means = Mat::randn(p.n_clusters, p.n_low_bands, p.mean_scale, &mut rng);
        // Push centers apart until the closest pair is 6 noise sigmas away,
        // then snap to the f32 grid the feature files use.
        let needed = 6.0 * p.noise_sigma;
        for _ in 0..64 {
            let dmin = min_pairwise_distance(&cluster_means);
            if p.n_clusters == 1 || dmin >= needed {
                break;
            }
            let scale = if dmin > 0.0 { needed / dmin * 1.1 } else { 2.0 };
            cluster_means = cluster_means.map(|x| x * scale);
        }
        let cluster_means = cluster_means.map(snap_f32);

        let word_style_table = Mat::from_fn(p.vocab_size, p.n_clusters, |w, c| {
            peaked_row(p.n_clusters, w % p.n_clusters, p.style_peak)[c]
        });
        let bigram = Mat::from_fn(p.vocab_size, p.vocab_size, |w, v| {
            peaked_row(p.vocab_size, (w * 7 + 3) % p.vocab_size, p.bigram_peak)[v]
        });
        let duration_mean = Mat::from_fn(p.vocab_size, p.n_clusters, |w, c| {
            4.0 + ((w * 3 + c * 5) % 9) as f64
        });
        let pitch_base = (0..p.n_clusters).map(|c| 110.0 + 18.0 * c as f64).collect();
        let pitch_slope = (0..p.n_clusters)
            .map(|c| ((c % 5) as f64 - 2.0) * 0.5)
            .collect();

        let spec = Self {
            vocab_size: p.vocab_size,
            n_clusters: p.n_clusters,
            cluster_means,
            noise_sigma: p.noise_sigma,
            word_style_table,
            duration_mean,
            duration_sigma: p.duration_sigma,
            pitch_base,
            pitch_slope,
            pitch_noise_sigma: p.pitch_noise_sigma,
            bigram,
            n_bands: p.n_bands,
            n_low_bands: p.n_low_bands,
            filler_sigma: p.filler_sigma,
            words_min: p.words_min,
            words_max: p.words_max,
            corrupt_frac: p.corrupt_frac,
            low_noise_mult: p.low_noise_mult,
            corrupt_amp: p.corrupt_amp,
            seed: p.seed,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.noise_sigma < 0.0 || self.pitch_noise_sigma < 0.0 || self.duration_sigma < 0.0 {
            return Err(Error::Validation("noise levels must be non-negative".into()));
        }
        if !(0.0..=1.0).contains(&self.corrupt_frac) {
            return Err(Error::Validation(format!(
                "corrupt_frac {} must lie in [0, 1]",
                self.corrupt_frac
            )));
        }
        if self.cluster_means.rows() != self.n_clusters
            || self.cluster_means.cols() != self.n_low_bands
        {
            return Err(Error::Validation("cluster_means shape mismatch".into()));
        }
        if self.word_style_table.rows() != self.vocab_size
            || self.word_style_table.cols() != self.n_clusters
        {
            return Err(Error::Validation("word_style_table shape mismatch".into()));
        }
        check_row_stochastic(&self.word_style_table, "word_style_table")?;
        check_row_stochastic(&self.bigram, "bigram")?;
        if self.pitch_base.len() != self.n_clusters || self.pitch_slope.len() != self.n_clusters {
            return Err(Error::Validation("pitch table length mismatch".into()));
        }
        if self.n_clusters > 1 {
            let dmin = min_pairwise_distance(&self.cluster_means);
            if dmin < 6.0 * self.noise_sigma {
                return Err(Error::Validation(format!(
                    "closest cluster means are {dmin:.3} apart, need {:.3} for separability",
                    6.0 * self.noise_sigma
                )));
            }
        }
        Ok(())
    }
}

fn min_pairwise_distance(m: &Mat) -> f64 {
    let mut dmin = f64::INFINITY;
    for i in 0..m.rows() {
        for j in (i + 1)..m.rows() {
            dmin = dmin.min(Mat::sq_dist_rows(m.row(i), m.row(j)).sqrt());
        }
    }
    dmin
}

fn check_row_stochastic(m: &Mat, name: &str) -> Result<()> {
    for i in 0..m.rows() {
        let s: f64 = m.row(i).iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Validation(format!(
                "{name} row {i} sums to {s}, expected 1"
            )));
        }
        if m.row(i).iter().any(|&p| p < 0.0) {
            return Err(Error::Validation(format!(
                "{name} row {i} has a negative probability"
            )));
        }
    }
    Ok(())
}

/// Hidden per-word cluster assignment, kept beside the corpus for oracle
/// scoring.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct LabelRecord {
    pub utt_id: String,
    pub word_index: usize,
    pub cluster: usize,
}

fn sample_categorical(rng: &mut impl RngExt, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut cum = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        cum += p;
        if u < cum {
            return i;
        }
    }
    probs.len() - 1
}

/// Generates `n_utts` utterances of the given quality and split.
///
/// Each utterance is drawn from its own named substream of `spec.seed`,
/// so output depends only on (spec, quality, id_prefix, index), never on
/// n_utts or call order. Returns the utterances and the sidecar labels
/// (empty for text-only corpora).
pub fn generate_corpus(
    spec: &SyntheticSpec,
    n_utts: usize,
    quality: Quality,
    split: Split,
    id_prefix: &str,
) -> Result<(Vec<Utterance>, Vec<LabelRecord>)> {
    if n_utts == 0 {
        return Err(Error::Validation("n_utts must be at least 1".into()));
    }
    spec.validate()?;
    let mut utts = Vec::with_capacity(n_utts);
    let mut labels = Vec::new();
    for u in 0..n_utts {
        let id = format!("{id_prefix}{u:05}");
        let mut rng = substream(spec.seed, &format!("corpus/utt/{id}"));

        let n_words = rng.random_range(spec.words_min..=spec.words_max);
        let mut words = Vec::with_capacity(n_words);
        let first = rng.random_range(0..spec.vocab_size as u32);
        words.push(first);
        for _ in 1..n_words {
            let prev = *words.last().unwrap() as usize;
            words.push(sample_categorical(&mut rng, spec.bigram.row(prev)) as u32);
        }

        if quality == Quality::TextOnly {
            utts.push(Utterance {
                id,
                words,
                audio: None,
                quality,
                split,
            });
            continue;
        }

        let sigma = match quality {
            Quality::Low => spec.noise_sigma * spec.low_noise_mult,
            _ => spec.noise_sigma,
        };
        let mut boundaries = Vec::with_capacity(n_words);
        let mut rows: Vec<Vec<f64>> = Vec::new();
        let mut pitch = Vec::new();
        let mut voiced = Vec::new();
        for (w_idx, &w) in words.iter().enumerate() {
            let c = sample_categorical(&mut rng, spec.word_style_table.row(w as usize));
            labels.push(LabelRecord {
                utt_id: id.clone(),
                word_index: w_idx,
                cluster: c,
            });
            let mean = spec.duration_mean.get(w as usize, c);
            let d = (mean + spec.duration_sigma * randn(&mut rng)).round().max(2.0) as usize;
            let start = rows.len();
            for f in 0..d {
                let mut row = Vec::with_capacity(spec.n_bands);
                for b in 0..spec.n_bands {
                    let v = if b < spec.n_low_bands {
                        spec.cluster_means.get(c, b) + sigma * randn(&mut rng)
                    } else {
                        spec.filler_sigma * randn(&mut rng)
                    };
                    row.push(snap_f32(v));
                }
                rows.push(row);
                pitch.push(
                    spec.pitch_base[c]
                        + spec.pitch_slope[c] * f as f64
                        + spec.pitch_noise_sigma * randn(&mut rng),
                );
                voiced.push(f != 0 && f != d - 1);
            }
            boundaries.push((start, rows.len()));
        }

        if quality == Quality::Low && spec.corrupt_frac > 0.0 {
            for row in rows.iter_mut() {
                if rng.random::<f64>() < spec.corrupt_frac {
                    for v in row.iter_mut() {
                        *v = snap_f32(rng.random_range(-spec.corrupt_amp..spec.corrupt_amp));
                    }
                }
            }
        }

        let n_frames = rows.len();
        let features = Mat::from_vec(
            n_frames,
            spec.n_bands,
            rows.into_iter().flatten().collect(),
        );
        let utt = Utterance {
            id,
            words,
            audio: Some(AudioData {
                boundaries,
                features,
                pitch,
                voiced,
            }),
            quality,
            split,
        };
        utt.validate()?;
        utts.push(utt);
    }
    Ok((utts, labels))
}

/// Writes a feature matrix: magic, version, n_frames, n_bands, then f32
/// little-endian values row-major.
pub fn write_features(features: &Mat, path: &Path) -> Result<()> {
    features.ensure_finite("features")?;
    let mut buf = Vec::with_capacity(16 + features.rows() * features.cols() * 4);
    buf.extend_from_slice(FEATURE_MAGIC);
    buf.extend_from_slice(&FEATURE_VERSION.to_le_bytes());
    buf.extend_from_slice(&(features.rows() as u32).to_le_bytes());
    buf.extend_from_slice(&(features.cols() as u32).to_le_bytes());
    for &v in features.data() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, buf)?;
    Ok(())
}

fn format_err(path: &Path, offset: usize, message: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        message: message.into(),
    }
}

/// Reads a feature matrix written by [`write_features`].
pub fn read_features(path: &Path) -> Result<Mat> {
    let buf = fs::read(path)?;
    read_features_buf(&buf, path)
}

fn read_features_buf(buf: &[u8], path: &Path) -> Result<Mat> {
    if buf.len() < 16 {
        return Err(format_err(
            path,
            buf.len(),
            format!("header truncated, {} of 16 bytes present", buf.len()),
        ));
    }
    if &buf[0..4] != FEATURE_MAGIC {
        return Err(format_err(path, 0, "bad magic, expected \"LPVF\""));
    }
    let word = |at: usize| u32::from_le_bytes(buf[at..at + 4].try_into().unwrap());
    let version = word(4);
    if version != FEATURE_VERSION {
        return Err(format_err(
            path,
            4,
            format!("unsupported version {version}, expected {FEATURE_VERSION}"),
        ));
    }
    let n_frames = word(8) as usize;
    let n_bands = word(12) as usize;
    let expected = 16 + n_frames * n_bands * 4;
    if buf.len() != expected {
        return Err(format_err(
            path,
            buf.len().min(expected),
            format!("payload is {} bytes, header implies {}", buf.len(), expected),
        ));
    }
    let mut data = Vec::with_capacity(n_frames * n_bands);
    for k in 0..n_frames * n_bands {
        let at = 16 + k * 4;
        data.push(f32::from_le_bytes(buf[at..at + 4].try_into().unwrap()) as f64);
    }
    Ok(Mat::from_vec(n_frames, n_bands, data))
}

/// Reads only the (n_frames, n_bands) header of a feature file.
pub fn read_feature_header(path: &Path) -> Result<(usize, usize)> {
    let mut file = File::open(path)?;
    let mut header = [0u8; 16];
    std::io::Read::read_exact(&mut file, &mut header)
        .map_err(|_| format_err(path, 0, "header truncated"))?;
    if &header[0..4] != FEATURE_MAGIC {
        return Err(format_err(path, 0, "bad magic, expected \"LPVF\""));
    }
    let n_frames = u32::from_le_bytes(header[8..12].try_into().unwrap()) as usize;
    let n_bands = u32::from_le_bytes(header[12..16].try_into().unwrap()) as usize;
    Ok((n_frames, n_bands))
}

/// One manifest row.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestEntry {
    pub id: String,
    /// Relative to the manifest's directory; empty for text-only rows.
    pub feature_file: String,
    pub n_frames: u32,
    pub n_words: u32,
    pub quality: Quality,
    pub split: Split,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
struct ManifestHeader {
    version: u32,
    vocab_size: usize,
    n_bands: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusManifest {
    pub version: u32,
    pub vocab_size: usize,
    pub n_bands: usize,
    pub utterances: Vec<ManifestEntry>,
}

/// Loads a JSONL manifest. The first line may be a header object; every
/// other line is one utterance record. Referenced feature files must
/// exist (relative to the manifest) and agree with the recorded shape.
pub fn load_manifest(path: &Path) -> Result<CorpusManifest> {
    let base = path.parent().unwrap_or(Path::new("."));
    let file = BufReader::new(File::open(path)?);
    let mut manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        vocab_size: 0,
        n_bands: 0,
        utterances: Vec::new(),
    };
    for (idx, line) in file.lines().enumerate() {
        let line_no = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let value: serde_json::Value = serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: line_no,
            message: format!("invalid json: {e}"),
        })?;
        if idx == 0 && value.get("version").is_some() {
            let header: ManifestHeader =
                serde_json::from_value(value).map_err(|e| Error::Manifest {
                    line: line_no,
                    message: format!("bad header: {e}"),
                })?;
            manifest.version = header.version;
            manifest.vocab_size = header.vocab_size;
            manifest.n_bands = header.n_bands;
            continue;
        }
        let entry: ManifestEntry = serde_json::from_value(value).map_err(|e| Error::Manifest {
            line: line_no,
            message: format!("bad record: {e}"),
        })?;
        if entry.quality != Quality::TextOnly {
            let fpath = base.join(&entry.feature_file);
            if !fpath.is_file() {
                return Err(Error::Manifest {
                    line: line_no,
                    message: format!("feature file {fpath:?} does not exist"),
                });
            }
            let (frames, bands) = read_feature_header(&fpath)?;
            if frames != entry.n_frames as usize {
                return Err(Error::Manifest {
                    line: line_no,
                    message: format!(
                        "feature file has {frames} frames, manifest says {}",
                        entry.n_frames
                    ),
                });
            }
            if manifest.n_bands != 0 && bands != manifest.n_bands {
                return Err(Error::Manifest {
                    line: line_no,
                    message: format!(
                        "feature file has {bands} bands, manifest says {}",
                        manifest.n_bands
                    ),
                });
            }
        }
        manifest.utterances.push(entry);
    }
    Ok(manifest)
}

pub fn write_manifest(manifest: &CorpusManifest, path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    let header = ManifestHeader {
        version: manifest.version,
        vocab_size: manifest.vocab_size,
        n_bands: manifest.n_bands,
    };
    serde_json::to_writer(&mut out, &header)?;
    out.write_all(b"\n")?;
    for entry in &manifest.utterances {
        serde_json::to_writer(&mut out, entry)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// JSONL row mirroring [`Utterance`] minus the feature matrix.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct UtteranceRecord {
    pub id: String,
    pub words: Vec<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub boundaries: Option<Vec<(usize, usize)>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub pitch: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub voiced: Option<Vec<bool>>,
}

/// Writes one JSON value per line.
pub fn write_jsonl<T: Serialize>(rows: &[T], path: &Path) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    for row in rows {
        serde_json::to_writer(&mut out, row)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a JSONL file, reporting the failing line on parse errors.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let file = BufReader::new(File::open(path)?);
    let mut rows = Vec::new();
    for (idx, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        rows.push(serde_json::from_str(&line).map_err(|e| Error::Manifest {
            line: idx + 1,
            message: format!("{}: {e}", path.display()),
        })?);
    }
    Ok(rows)
}

/// Writes a full corpus directory: features, manifest, utterance records
/// and (when non-empty) sidecar labels.
pub fn write_corpus_dir(
    dir: &Path,
    utts: &[Utterance],
    labels: &[LabelRecord],
    vocab_size: usize,
    n_bands: usize,
) -> Result<CorpusManifest> {
    fs::create_dir_all(dir.join("features"))?;
    let mut entries = Vec::with_capacity(utts.len());
    let mut records = Vec::with_capacity(utts.len());
    for utt in utts {
        utt.validate()?;
        let feature_file = match &utt.audio {
            Some(audio) => {
                let rel = format!("features/{}.lpvf", utt.id);
                write_features(&audio.features, &dir.join(&rel))?;
                rel
            }
            None => String::new(),
        };
        entries.push(ManifestEntry {
            id: utt.id.clone(),
            feature_file,
            n_frames: utt.n_frames() as u32,
            n_words: utt.words.len() as u32,
            quality: utt.quality,
            split: utt.split,
        });
        records.push(UtteranceRecord {
            id: utt.id.clone(),
            words: utt.words.clone(),
            boundaries: utt.audio.as_ref().map(|a| a.boundaries.clone()),
            pitch: utt.audio.as_ref().map(|a| a.pitch.clone()),
            voiced: utt.audio.as_ref().map(|a| a.voiced.clone()),
        });
    }
    let manifest = CorpusManifest {
        version: MANIFEST_VERSION,
        vocab_size,
        n_bands,
        utterances: entries,
    };
    write_manifest(&manifest, &dir.join("manifest.jsonl"))?;
    write_jsonl(&records, &dir.join("utterances.jsonl"))?;
    if !labels.is_empty() {
        write_jsonl(labels, &dir.join("labels.jsonl"))?;
    }
    Ok(manifest)
}

/// Loads a corpus directory written by [`write_corpus_dir`], features
/// included. Labels are optional on disk and returned empty if absent.
pub fn load_corpus_dir(dir: &Path) -> Result<(Vec<Utterance>, Vec<LabelRecord>, CorpusManifest)> {
    let manifest = load_manifest(&dir.join("manifest.jsonl"))?;
    let records: Vec<UtteranceRecord> = read_jsonl(&dir.join("utterances.jsonl"))?;
    let by_id: BTreeMap<&str, &UtteranceRecord> =
        records.iter().map(|r| (r.id.as_str(), r)).collect();
    let mut utts = Vec::with_capacity(manifest.utterances.len());
    for entry in &manifest.utterances {
        let rec = by_id.get(entry.id.as_str()).ok_or_else(|| Error::Validation(format!(
            "utterance {} is in the manifest but not in utterances.jsonl",
            entry.id
        )))?;
        let audio = if entry.quality == Quality::TextOnly {
            None
        } else {
            let features = read_features(&dir.join(&entry.feature_file))?;
            Some(AudioData {
                boundaries: rec.boundaries.clone().ok_or_else(|| {
                    Error::Validation(format!("utterance {} is missing boundaries", entry.id))
                })?,
                features,
                pitch: rec.pitch.clone().unwrap_or_default(),
                voiced: rec.voiced.clone().unwrap_or_default(),
            })
        };
        let utt = Utterance {
            id: entry.id.clone(),
            words: rec.words.clone(),
            audio,
            quality: entry.quality,
            split: entry.split,
        };
        utt.validate()?;
        utts.push(utt);
    }
    let labels_path = dir.join("labels.jsonl");
    let labels = if labels_path.is_file() {
        read_jsonl(&labels_path)?
    } else {
        Vec::new()
    };
    Ok((utts, labels, manifest))
}

/// Resolves the corpus subdirectory for a quality tier.
pub fn quality_dir(root: &Path, quality: Quality) -> PathBuf {
    let name = match quality {
        Quality::High => "high",
        Quality::Low => "low",
        Quality::TextOnly => "text",
    };
    root.join(name)
}
