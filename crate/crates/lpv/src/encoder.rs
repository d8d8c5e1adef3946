//! The word-level prosody autoencoder.
//!
//! Frames of the low mel band pass through a convolutional frame stack,
//! get averaged into one vector per word, pass a convolutional word
//! stack, and (after the warm-up period) are snapped to the nearest
//! codebook vector. A broadcast-and-project decoder reconstructs the low
//! band so the whole path trains on plain mean squared error.
//!
//! Warm-up schedule: for the first `warmup_steps` steps the quantizer is
//! neither read nor written; pooled word vectors are reservoir-sampled
//! instead. At exactly `warmup_steps` the codebook is initialized from
//! k-means over that sample and quantization switches on. Gradients skip
//! the quantizer via the straight-through estimator; the codebook itself
//! learns by EMA updates, not gradients.

use rand::RngExt;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::nn::{Adam, Id, Mat, ParamIds, ParamSet, Tape};
use crate::rng::substream;
use crate::vq::{usage_stats, Codebook, UsageStats, VqConfig};

/// Architecture and schedule of the autoencoder.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Number of leading mel bands fed to the encoder.
    pub n_low_bands: usize,
    /// Channel width of both conv stacks and the code dimension.
    pub hidden: usize,
    pub frame_layers: usize,
    pub word_layers: usize,
    /// Conv kernel width, odd.
    pub kernel: usize,
    /// Steps before the quantizer is introduced.
    pub warmup_steps: usize,
    /// Weight of the commitment term pulling encoder outputs toward
    /// their codes.
    pub commitment_beta: f64,
    pub lr: f64,
    pub batch_size: usize,
    pub total_steps: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            n_low_bands: 20,
            hidden: 32,
            frame_layers: 2,
            word_layers: 2,
            kernel: 5,
            warmup_steps: 2000,
            commitment_beta: 0.25,
            lr: 1e-3,
            batch_size: 8,
            total_steps: 4000,
            seed: 1,
        }
    }
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_low_bands == 0 || self.hidden == 0 {
            return Err(Error::Config(
                "n_low_bands and hidden must be positive".into(),
            ));
        }
        if self.frame_layers == 0 || self.word_layers == 0 {
            return Err(Error::Config("conv stacks need at least one layer".into()));
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "kernel {} must be odd and positive",
                self.kernel
            )));
        }
        if self.warmup_steps >= self.total_steps {
            return Err(Error::Config(format!(
                "warmup_steps {} must be below total_steps {}",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if self.lr <= 0.0 || self.commitment_beta < 0.0 {
            return Err(Error::Config(
                "lr must be positive and commitment_beta non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Keeps the leading `n_low` columns of a feature matrix.
pub fn extract_low_band(features: &Mat, n_low: usize) -> Result<Mat> {
    if features.cols() < n_low {
        return Err(Error::Validation(format!(
            "features have {} bands, low-band extraction needs {n_low}",
            features.cols()
        )));
    }
    Ok(Mat::from_fn(features.rows(), n_low, |i, j| features.get(i, j)))
}

/// Quantizer treatment during a forward pass.
pub enum VqMode<'a> {
    /// Warm-up: the codebook is not consulted at all.
    Warmup,
    /// Nearest-neighbor quantization with straight-through gradients.
    Quantized(&'a Codebook),
    /// The differentiable surrogate the straight-through gradients belong
    /// to: assignments and the substitution offset are pinned at a base
    /// point instead of being recomputed, so finite differences of this
    /// loss match the backward pass.
    Frozen {
        codebook: &'a Codebook,
        indices: &'a [Vec<usize>],
        /// Word vectors at the base point, one matrix per batch item.
        base: &'a [Mat],
    },
}

/// One utterance prepared for the encoder.
#[derive(Debug, Clone)]
pub struct EncoderItem {
    pub id: String,
    /// Frames by n_low_bands.
    pub low: Mat,
    pub boundaries: Vec<(usize, usize)>,
}

impl EncoderItem {
    pub fn from_utterance(utt: &Utterance, n_low: usize) -> Result<Option<Self>> {
        let Some(audio) = &utt.audio else {
            return Ok(None);
        };
        Ok(Some(Self {
            id: utt.id.clone(),
            low: extract_low_band(&audio.features, n_low)?,
            boundaries: audio.boundaries.clone(),
        }))
    }
}

/// Values produced by one forward pass over a batch.
pub struct BatchForward {
    /// Batch-mean total loss node.
    pub loss: Id,
    /// Batch-mean reconstruction MSE (value).
    pub recon_mse: f64,
    /// Batch-mean commitment term (value, zero during warm-up).
    pub commitment: f64,
    /// Post-net word vectors per utterance.
    pub word_vectors: Vec<Mat>,
    /// Chosen code per word per utterance; empty during warm-up.
    pub indices: Vec<Vec<usize>>,
}

#[derive(Debug, Clone)]
pub struct ProsodyAutoencoder {
    pub config: EncoderConfig,
    pub params: ParamSet,
}

fn conv_names(prefix: &str, layer: usize, kernel: usize) -> (Vec<String>, String, String, String) {
    let taps = (0..kernel)
        .map(|t| format!("{prefix}{layer}.w{t}"))
        .collect();
    (
        taps,
        format!("{prefix}{layer}.b"),
        format!("{prefix}{layer}.ln_g"),
        format!("{prefix}{layer}.ln_b"),
    )
}

impl ProsodyAutoencoder {
    pub fn new(config: EncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        config.validate()?;
        let mut params = ParamSet::new();
        let h = config.hidden;
        let mut stack = |prefix: &str, layers: usize, in_dim: usize| {
            let mut dim = in_dim;
            for l in 0..layers {
                let std = 1.0 / ((config.kernel * dim) as f64).sqrt();
                let (taps, b, g, bia) = conv_names(prefix, l, config.kernel);
                for t in taps {
                    params.insert(&t, Mat::randn(dim, h, std, rng));
                }
                params.insert(&b, Mat::zeros(1, h));
                params.insert(&g, Mat::filled(1, h, 1.0));
                params.insert(&bia, Mat::zeros(1, h));
                dim = h;
            }
        };
        stack("frame", config.frame_layers, config.n_low_bands);
        stack("word", config.word_layers, h);
        params.insert(
            "dec.w",
            Mat::randn(h, config.n_low_bands, 1.0 / (h as f64).sqrt(), rng),
        );
        params.insert("dec.b", Mat::zeros(1, config.n_low_bands));
        Ok(Self { config, params })
    }

    /// Rebuilds a model around parameters loaded from a checkpoint.
    pub fn from_params(config: EncoderConfig, params: ParamSet) -> Result<Self> {
        config.validate()?;
        let mut rng = substream(0, "encoder/shape-probe");
        let probe = Self::new(config.clone(), &mut rng)?;
        for (name, m) in probe.params.iter() {
            let got = params.try_get(name)?;
            if got.shape() != m.shape() {
                return Err(Error::Validation(format!(
                    "parameter {name} has shape {:?}, expected {:?}",
                    got.shape(),
                    m.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    fn conv_block(
        &self,
        tape: &mut Tape,
        ids: &ParamIds,
        prefix: &str,
        layer: usize,
        x: Id,
    ) -> Id {
        let kernel = self.config.kernel;
        let half = (kernel / 2) as isize;
        let (taps, b, g, bias) = conv_names(prefix, layer, kernel);
        let mut acc: Option<Id> = None;
        for (t, tap) in taps.iter().enumerate() {
            let shifted = tape.shift_rows(x, t as isize - half);
            let term = tape.matmul(shifted, ids.id(tap));
            acc = Some(match acc {
                Some(a) => tape.add(a, term),
                None => term,
            });
        }
        let pre = tape.add_row_broadcast(acc.unwrap(), ids.id(&b));
        let act = tape.relu(pre);
        tape.layer_norm(act, ids.id(&g), ids.id(&bias))
    }

    /// Encoder half: low band to post-net word vectors, on an existing
    /// tape.
    fn words_node(
        &self,
        tape: &mut Tape,
        ids: &ParamIds,
        low: Id,
        boundaries: &[(usize, usize)],
    ) -> Id {
        let mut h = low;
        for l in 0..self.config.frame_layers {
            h = self.conv_block(tape, ids, "frame", l, h);
        }
        let mut z = tape.segment_mean(h, boundaries);
        for l in 0..self.config.word_layers {
            z = self.conv_block(tape, ids, "word", l, z);
        }
        z
    }

    /// Builds the batch loss graph. Returns per-utterance word vectors
    /// and (outside warm-up) code assignments alongside the loss node.
    pub fn build_loss(
        &self,
        tape: &mut Tape,
        ids: &ParamIds,
        batch: &[&EncoderItem],
        mode: &VqMode,
    ) -> Result<BatchForward> {
        if batch.is_empty() {
            return Err(Error::Validation("empty encoder batch".into()));
        }
        let beta = self.config.commitment_beta;
        let mut per_utt_losses = Vec::with_capacity(batch.len());
        let mut recon_total = 0.0;
        let mut commit_total = 0.0;
        let mut word_vectors = Vec::with_capacity(batch.len());
        let mut indices = Vec::with_capacity(batch.len());

        for (bi, item) in batch.iter().enumerate() {
            if item.low.cols() != self.config.n_low_bands {
                return Err(Error::Validation(format!(
                    "utterance {} has {} low bands, config says {}",
                    item.id,
                    item.low.cols(),
                    self.config.n_low_bands
                )));
            }
            let n_frames = item.low.rows();
            let x = tape.constant(item.low.clone());
            let z = self.words_node(tape, ids, x, &item.boundaries);
            let z_val = tape.value(z).clone();
            word_vectors.push(z_val.clone());

            let (lpv, commit) = match mode {
                VqMode::Warmup => {
                    indices.push(Vec::new());
                    (z, None)
                }
                VqMode::Quantized(_) | VqMode::Frozen { .. } => {
                    // `anchor` is the point the substitution offset is
                    // measured from: the live word vectors when quantizing,
                    // the pinned base point in the frozen surrogate.
                    let (q_mat, idx, anchor) = match mode {
                        VqMode::Quantized(cb) => {
                            let q = cb.quantize(&z_val)?;
                            (q.quantized, q.indices, z_val.clone())
                        }
                        VqMode::Frozen {
                            codebook,
                            indices: pinned,
                            base,
                        } => {
                            let idx = pinned.get(bi).ok_or_else(|| {
                                Error::Validation("missing pinned indices for batch item".into())
                            })?;
                            let anchor = base.get(bi).ok_or_else(|| {
                                Error::Validation("missing base word vectors for batch item".into())
                            })?;
                            let mut q = Mat::zeros(z_val.rows(), codebook.d());
                            for (r, &c) in idx.iter().enumerate() {
                                q.row_mut(r).copy_from_slice(codebook.codes().row(c));
                            }
                            (q, idx.clone(), anchor.clone())
                        }
                        VqMode::Warmup => unreachable!(),
                    };
                    indices.push(idx);
                    // Straight-through: value jumps to the code, gradient
                    // passes to z untouched.
                    let mut delta = q_mat.clone();
                    delta.add_scaled(&anchor, -1.0);
                    let delta = tape.constant(delta);
                    let lpv = tape.add(z, delta);
                    let target = tape.constant(q_mat);
                    let commit = tape.mean_sq(z, target);
                    (lpv, Some(commit))
                }
            };

            let spread = tape.segment_broadcast(lpv, &item.boundaries, n_frames);
            let projected = tape.matmul(spread, ids.id("dec.w"));
            let recon = tape.add_row_broadcast(projected, ids.id("dec.b"));
            let recon_loss = tape.mean_sq(recon, x);
            recon_total += tape.value(recon_loss).scalar();

            let utt_loss = match commit {
                Some(c) => {
                    commit_total += tape.value(c).scalar();
                    let scaled = tape.scale(c, beta);
                    tape.add(recon_loss, scaled)
                }
                None => recon_loss,
            };
            per_utt_losses.push(utt_loss);
        }

        let mut sum = per_utt_losses[0];
        for &l in &per_utt_losses[1..] {
            sum = tape.add(sum, l);
        }
        let loss = tape.scale(sum, 1.0 / batch.len() as f64);
        Ok(BatchForward {
            loss,
            recon_mse: recon_total / batch.len() as f64,
            commitment: commit_total / batch.len() as f64,
            word_vectors,
            indices,
        })
    }

    /// Post-net word vectors for one utterance, no gradients.
    pub fn encode_words(&self, low: &Mat, boundaries: &[(usize, usize)]) -> Result<Mat> {
        let mut tape = Tape::new();
        let mut const_ids = ParamSet::new();
        for (name, m) in self.params.iter() {
            const_ids.insert(name, m.clone());
        }
        let ids = const_ids.attach_constant(&mut tape);
        let x = tape.constant(low.clone());
        let z = self.words_node(&mut tape, &ids, x, boundaries);
        Ok(tape.value(z).clone())
    }
}

/// Training phase at a given step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    Warmup,
    Quantized,
}

/// Uniform reservoir sample of word vectors seen during warm-up.
struct Reservoir {
    cap: usize,
    seen: usize,
    rows: Vec<Vec<f64>>,
}

impl Reservoir {
    fn new(cap: usize) -> Self {
        Self {
            cap,
            seen: 0,
            rows: Vec::new(),
        }
    }

    fn push(&mut self, row: &[f64], rng: &mut ChaCha8Rng) {
        self.seen += 1;
        if self.rows.len() < self.cap {
            self.rows.push(row.to_vec());
        } else {
            let j = rng.random_range(0..self.seen);
            if j < self.cap {
                self.rows[j] = row.to_vec();
            }
        }
    }

    fn as_mat(&self) -> Mat {
        let cols = self.rows.first().map_or(0, |r| r.len());
        Mat::from_fn(self.rows.len(), cols, |i, j| self.rows[i][j])
    }
}

/// One row of the training log.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct LossPoint {
    pub step: usize,
    pub recon_mse: f64,
    pub commitment: f64,
}

/// Result of a single training step.
#[derive(Debug, Clone)]
pub struct EncoderStep {
    pub step: usize,
    pub phase: Phase,
    pub recon_mse: f64,
    pub commitment: f64,
}

/// Summary returned by a full training run.
#[derive(Debug, Clone, Serialize)]
pub struct EncoderTrainReport {
    pub loss_curve: Vec<LossPoint>,
    pub final_recon_mse: f64,
    pub usage: UsageStats,
    pub reseeded_codes: usize,
}

pub struct EncoderTrainer {
    pub model: ProsodyAutoencoder,
    pub codebook: Codebook,
    vq_cfg: VqConfig,
    items: Vec<EncoderItem>,
    adam: Adam,
    reservoir: Reservoir,
    batch_rng: ChaCha8Rng,
    reservoir_rng: ChaCha8Rng,
    reseed_rng: ChaCha8Rng,
    step: usize,
    reseeded: usize,
}

impl EncoderTrainer {
    pub fn new(cfg: &EncoderConfig, vq_cfg: &VqConfig, utts: &[Utterance]) -> Result<Self> {
        cfg.validate()?;
        vq_cfg.validate()?;
        let mut items = Vec::new();
        for utt in utts {
            if let Some(item) = EncoderItem::from_utterance(utt, cfg.n_low_bands)? {
                items.push(item);
            }
        }
        if items.is_empty() {
            return Err(Error::Validation(
                "encoder training needs at least one audio utterance".into(),
            ));
        }
        let mut init_rng = substream(cfg.seed, "encoder/init");
        let model = ProsodyAutoencoder::new(cfg.clone(), &mut init_rng)?;
        let mut codebook = Codebook::new(vq_cfg.k, cfg.hidden, vq_cfg.gamma, vq_cfg.eps)?;
        if !vq_cfg.kmeans_init {
            // Ablation arm: random codebook, quantizer active from step 0.
            let mut rng = substream(cfg.seed, "encoder/codebook-random");
            codebook.init_random(1.0, &mut rng)?;
        }
        let adam = Adam::new(cfg.lr, &model.params);
        let reservoir = Reservoir::new(vq_cfg.buffer_factor * vq_cfg.k);
        Ok(Self {
            adam,
            reservoir,
            batch_rng: substream(cfg.seed, "encoder/batch"),
            reservoir_rng: substream(cfg.seed, "encoder/reservoir"),
            reseed_rng: substream(cfg.seed, "encoder/reseed"),
            model,
            codebook,
            vq_cfg: vq_cfg.clone(),
            items,
            step: 0,
            reseeded: 0,
        })
    }

    pub fn step_index(&self) -> usize {
        self.step
    }

    /// Phase the NEXT call to [`EncoderTrainer::step`] will run in.
    pub fn phase(&self) -> Phase {
        if self.vq_cfg.kmeans_init && self.step < self.model.config.warmup_steps {
            Phase::Warmup
        } else {
            Phase::Quantized
        }
    }

    pub fn reseeded_codes(&self) -> usize {
        self.reseeded
    }

    /// Runs one optimization step over a random batch.
    pub fn step(&mut self) -> Result<EncoderStep> {
        let cfg = &self.model.config;
        let step = self.step;

        // The schedule flip: k-means over the warm-up sample, then the
        // quantizer joins the graph.
        if self.vq_cfg.kmeans_init
            && step == cfg.warmup_steps
            && !self.codebook.is_initialized()
        {
            let points = self.reservoir.as_mat();
            if points.rows() < self.vq_cfg.k {
                return Err(Error::Validation(format!(
                    "warm-up collected {} word vectors but the codebook needs {}; \
                     lengthen warmup_steps or shrink k",
                    points.rows(),
                    self.vq_cfg.k
                )));
            }
            self.codebook
                .init_from_kmeans(&points, self.vq_cfg.kmeans_iters, cfg.seed)?;
        }
        let phase = self.phase();

        let batch_ids: Vec<usize> = (0..cfg.batch_size.min(self.items.len()))
            .map(|_| self.batch_rng.random_range(0..self.items.len()))
            .collect();
        let batch: Vec<&EncoderItem> = batch_ids.iter().map(|&i| &self.items[i]).collect();

        let mut tape = Tape::new();
        let ids = self.model.params.attach(&mut tape);
        let fwd = match phase {
            Phase::Warmup => self.model.build_loss(&mut tape, &ids, &batch, &VqMode::Warmup)?,
            Phase::Quantized => {
                let mode = VqMode::Quantized(&self.codebook);
                self.model.build_loss(&mut tape, &ids, &batch, &mode)?
            }
        };
        let loss_val = tape.value(fwd.loss).scalar();
        if !loss_val.is_finite() {
            return Err(Error::Numeric {
                step,
                batch: batch.iter().map(|b| b.id.as_str()).collect::<Vec<_>>().join(","),
                message: format!("loss is {loss_val}"),
            });
        }
        let grads = tape.backward(fwd.loss);
        let grad_list = self.model.params.collect_grads(&ids, &grads);
        self.adam.step(&mut self.model.params, &grad_list);
        if !self.model.params.all_finite() {
            return Err(Error::Numeric {
                step,
                batch: batch.iter().map(|b| b.id.as_str()).collect::<Vec<_>>().join(","),
                message: "non-finite parameter after update".into(),
            });
        }

        match phase {
            Phase::Warmup => {
                for z in &fwd.word_vectors {
                    for r in 0..z.rows() {
                        self.reservoir.push(z.row(r), &mut self.reservoir_rng);
                    }
                }
            }
            Phase::Quantized => {
                let total_rows: usize = fwd.word_vectors.iter().map(|z| z.rows()).sum();
                let d = self.model.config.hidden;
                let mut all_z = Mat::zeros(total_rows, d);
                let mut all_idx = Vec::with_capacity(total_rows);
                let mut at = 0;
                for (z, idx) in fwd.word_vectors.iter().zip(&fwd.indices) {
                    for r in 0..z.rows() {
                        all_z.row_mut(at).copy_from_slice(z.row(r));
                        at += 1;
                    }
                    all_idx.extend_from_slice(idx);
                }
                self.codebook.ema_update(&all_z, &all_idx)?;
                if self.vq_cfg.reseed_dead && step % 100 == 99 {
                    self.reseeded += self.codebook.reseed_dead_codes(
                        &all_z,
                        1e-3,
                        &mut self.reseed_rng,
                    );
                }
            }
        }

        self.step += 1;
        Ok(EncoderStep {
            step,
            phase,
            recon_mse: fwd.recon_mse,
            commitment: fwd.commitment,
        })
    }

    /// Mean per-utterance reconstruction MSE over the training items with
    /// the quantizer engaged (assignments recomputed, no gradients).
    pub fn eval_recon_mse(&self) -> Result<f64> {
        let mut total = 0.0;
        for item in &self.items {
            let mut tape = Tape::new();
            let ids = self.model.params.attach(&mut tape);
            let mode = VqMode::Quantized(&self.codebook);
            let fwd = self.model.build_loss(&mut tape, &ids, &[item], &mode)?;
            total += fwd.recon_mse;
        }
        Ok(total / self.items.len() as f64)
    }

    /// Trains to `total_steps`, logging roughly 200 loss points.
    pub fn run(&mut self) -> Result<EncoderTrainReport> {
        let total = self.model.config.total_steps;
        let log_every = (total / 200).max(1);
        let mut loss_curve = Vec::new();
        while self.step < total {
            let info = self.step()?;
            if info.step % log_every == 0 || info.step + 1 == total {
                loss_curve.push(LossPoint {
                    step: info.step,
                    recon_mse: info.recon_mse,
                    commitment: info.commitment,
                });
            }
        }
        let final_recon_mse = self.eval_recon_mse()?;
        let mut all_indices = Vec::new();
        for item in &self.items {
            let z = self.model.encode_words(&item.low, &item.boundaries)?;
            all_indices.extend(self.codebook.quantize(&z)?.indices);
        }
        Ok(EncoderTrainReport {
            loss_curve,
            final_recon_mse,
            usage: usage_stats(&all_indices, self.codebook.k())?,
            reseeded_codes: self.reseeded,
        })
    }
}

/// Trains an autoencoder and codebook on the audio utterances of a
/// corpus.
pub fn train_encoder(
    cfg: &EncoderConfig,
    vq_cfg: &VqConfig,
    utts: &[Utterance],
) -> Result<(ProsodyAutoencoder, Codebook, EncoderTrainReport)> {
    let mut trainer = EncoderTrainer::new(cfg, vq_cfg, utts)?;
    let report = trainer.run()?;
    Ok((trainer.model, trainer.codebook, report))
}

/// Per-utterance code assignment.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct LpvSequence {
    pub utt_id: String,
    /// One codebook index per word.
    pub indices: Vec<usize>,
}

/// Quantizes every audio utterance to its code sequence.
pub fn extract_lpv(
    model: &ProsodyAutoencoder,
    codebook: &Codebook,
    utts: &[Utterance],
) -> Result<(Vec<LpvSequence>, UsageStats)> {
    let mut sequences = Vec::new();
    let mut all = Vec::new();
    for utt in utts {
        let Some(item) = EncoderItem::from_utterance(utt, model.config.n_low_bands)? else {
            continue;
        };
        let z = model.encode_words(&item.low, &item.boundaries)?;
        let q = codebook.quantize(&z)?;
        all.extend_from_slice(&q.indices);
        sequences.push(LpvSequence {
            utt_id: item.id,
            indices: q.indices,
        });
    }
    if sequences.is_empty() {
        return Err(Error::Validation(
            "no audio utterances to extract codes from".into(),
        ));
    }
    let stats = usage_stats(&all, codebook.k())?;
    Ok((sequences, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, Quality, Split, SyntheticSpec, SyntheticSpecParams};

    fn tiny_cfg() -> EncoderConfig {
        EncoderConfig {
            n_low_bands: 6,
            hidden: 8,
            frame_layers: 1,
            word_layers: 1,
            kernel: 3,
            warmup_steps: 4,
            commitment_beta: 0.25,
            lr: 1e-3,
            batch_size: 2,
            total_steps: 10,
            seed: 3,
        }
    }

    fn tiny_vq() -> VqConfig {
        VqConfig {
            k: 4,
            buffer_factor: 10,
            ..Default::default()
        }
    }

    fn tiny_corpus(noise: f64, seed: u64) -> Vec<Utterance> {
        let params = SyntheticSpecParams {
            vocab_size: 8,
            n_clusters: 4,
            n_bands: 12,
            n_low_bands: 6,
            noise_sigma: noise,
            words_min: 2,
            words_max: 4,
            seed,
            ..Default::default()
        };
        let spec = SyntheticSpec::from_params(&params).unwrap();
        generate_corpus(&spec, 12, Quality::High, Split::Train, "e").unwrap().0
    }

    #[test]
    fn low_band_extraction_is_a_column_slice() {
        let m = Mat::from_fn(1, 80, |_, j| j as f64);
        let low = extract_low_band(&m, 20).unwrap();
        assert_eq!(low.shape(), (1, 20));
        for j in 0..20 {
            assert_eq!(low.get(0, j), j as f64);
        }

        let id_case = Mat::from_fn(3, 5, |i, j| (i * 5 + j) as f64);
        assert_eq!(extract_low_band(&id_case, 5).unwrap(), id_case);

        let mut rng = substream(7, "test/lowband");
        let wide = Mat::randn(7, 80, 1.0, &mut rng);
        let low = extract_low_band(&wide, 20).unwrap();
        for i in 0..7 {
            for j in 0..20 {
                assert_eq!(low.get(i, j), wide.get(i, j));
            }
        }

        assert!(extract_low_band(&Mat::zeros(2, 4), 6).is_err());
    }

    #[test]
    fn word_pooling_averages_within_boundaries() {
        let mut tape = Tape::new();
        // One word over constant frames keeps the constant.
        let c = tape.constant(Mat::filled(4, 3, 2.5));
        let pooled = tape.segment_mean(c, &[(0, 4)]);
        assert_eq!(tape.value(pooled), &Mat::filled(1, 3, 2.5));

        let x = tape.constant(Mat::from_vec(2, 2, vec![1.0, 1.0, 3.0, 3.0]));
        let pooled = tape.segment_mean(x, &[(0, 2)]);
        assert_eq!(tape.value(pooled), &Mat::from_vec(1, 2, vec![2.0, 2.0]));

        // Independent mean with a different summation order.
        let mut rng = substream(1, "test/pool");
        let m = Mat::randn(9, 4, 1.0, &mut rng);
        let segs = [(0usize, 3usize), (3, 4), (4, 9)];
        let node = tape.constant(m.clone());
        let pooled = tape.segment_mean(node, &segs);
        for (w, &(s, e)) in segs.iter().enumerate() {
            for j in 0..4 {
                let mut acc = 0.0;
                for i in (s..e).rev() {
                    acc += m.get(i, j);
                }
                let want = acc / (e - s) as f64;
                assert!((tape.value(pooled).get(w, j) - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn warmup_forward_never_touches_the_codebook() {
        let cfg = tiny_cfg();
        let mut rng = substream(0, "test/warmup");
        let model = ProsodyAutoencoder::new(cfg, &mut rng).unwrap();
        let utts = tiny_corpus(0.3, 21);
        let item = EncoderItem::from_utterance(&utts[0], 6).unwrap().unwrap();

        let mut tape = Tape::new();
        let ids = model.params.attach(&mut tape);
        let fwd = model
            .build_loss(&mut tape, &ids, &[&item], &VqMode::Warmup)
            .unwrap();
        assert!(fwd.indices.iter().all(|v| v.is_empty()));
        assert_eq!(fwd.commitment, 0.0);
        assert!(tape.value(fwd.loss).scalar().is_finite());
    }

    #[test]
    fn commitment_is_zero_when_output_equals_a_code() {
        let cfg = tiny_cfg();
        let mut rng = substream(0, "test/commit");
        let model = ProsodyAutoencoder::new(cfg.clone(), &mut rng).unwrap();
        let utts = tiny_corpus(0.3, 22);
        let item = EncoderItem::from_utterance(&utts[0], 6).unwrap().unwrap();

        // Codebook whose codes are exactly the model's word vectors.
        let z = model.encode_words(&item.low, &item.boundaries).unwrap();
        let mut cb = Codebook::new(z.rows(), cfg.hidden, 0.99, 1e-5).unwrap();
        cb.init_from_kmeans(&z, 50, 0).unwrap();

        let mut tape = Tape::new();
        let ids = model.params.attach(&mut tape);
        let mode = VqMode::Quantized(&cb);
        let fwd = model.build_loss(&mut tape, &ids, &[&item], &mode).unwrap();
        assert!(fwd.commitment < 1e-20, "commitment {}", fwd.commitment);
    }

    #[test]
    fn phase_flips_exactly_at_warmup_steps() {
        let cfg = tiny_cfg();
        let utts = tiny_corpus(0.3, 23);
        let mut tr = EncoderTrainer::new(&cfg, &tiny_vq(), &utts).unwrap();
        for _ in 0..cfg.warmup_steps {
            assert_eq!(tr.phase(), Phase::Warmup);
            assert!(!tr.codebook.is_initialized());
            tr.step().unwrap();
        }
        assert!(!tr.codebook.is_initialized());
        let info = tr.step().unwrap();
        assert_eq!(info.step, cfg.warmup_steps);
        assert_eq!(info.phase, Phase::Quantized);
        assert!(tr.codebook.is_initialized());
    }

    #[test]
    fn random_init_arm_quantizes_from_step_zero() {
        let cfg = tiny_cfg();
        let vq = VqConfig {
            kmeans_init: false,
            ..tiny_vq()
        };
        let utts = tiny_corpus(0.3, 24);
        let mut tr = EncoderTrainer::new(&cfg, &vq, &utts).unwrap();
        assert!(tr.codebook.is_initialized());
        let info = tr.step().unwrap();
        assert_eq!(info.phase, Phase::Quantized);
    }

    #[test]
    fn training_is_deterministic() {
        let cfg = EncoderConfig {
            total_steps: 12,
            ..tiny_cfg()
        };
        let utts = tiny_corpus(0.3, 25);
        let run = || {
            let mut tr = EncoderTrainer::new(&cfg, &tiny_vq(), &utts).unwrap();
            let mut curve = Vec::new();
            for _ in 0..cfg.total_steps {
                let s = tr.step().unwrap();
                curve.push((s.recon_mse, s.commitment));
            }
            (curve, tr.model.params, tr.codebook)
        };
        let (c1, p1, cb1) = run();
        let (c2, p2, cb2) = run();
        assert_eq!(c1, c2);
        assert_eq!(cb1, cb2);
        for ((n1, m1), (n2, m2)) in p1.iter().zip(p2.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(m1, m2);
        }
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let cfg = tiny_cfg();
        // Two short hand-built items; any input data exercises every op.
        let mut data_rng = substream(0, "test/encgrad-data");
        let items = vec![
            EncoderItem {
                id: "g0".into(),
                low: Mat::randn(8, 6, 1.0, &mut data_rng),
                boundaries: vec![(0, 3), (3, 8)],
            },
            EncoderItem {
                id: "g1".into(),
                low: Mat::randn(10, 6, 1.0, &mut data_rng),
                boundaries: vec![(0, 4), (4, 7), (7, 10)],
            },
        ];
        let refs: Vec<&EncoderItem> = items.iter().collect();

        // The loss is piecewise smooth: relu kinks make finite differences
        // lie when a kink falls inside the stencil. Scan init seeds for a
        // base point whose kink margin dwarfs the step size.
        let h = 1e-4;
        let mut chosen = None;
        for seed in 0..200 {
            let mut rng = substream(seed, "test/encgrad");
            let model = ProsodyAutoencoder::new(cfg.clone(), &mut rng).unwrap();
            let mut tape = Tape::new();
            let ids = model.params.attach(&mut tape);
            let fwd = model
                .build_loss(&mut tape, &ids, &refs, &VqMode::Warmup)
                .unwrap();
            let _ = fwd;
            if tape.relu_input_margin() > 100.0 * h {
                chosen = Some(model);
                break;
            }
        }
        let mut model = chosen.expect("no init seed with a safe kink margin");

        let mut cb = Codebook::new(2, cfg.hidden, 0.99, 1e-5).unwrap();
        let mut all_z = model.encode_words(&items[0].low, &items[0].boundaries).unwrap();
        all_z.append_rows(&model.encode_words(&items[1].low, &items[1].boundaries).unwrap());
        cb.init_from_kmeans(&all_z, 20, 1).unwrap();
        // Pin assignments and the base word vectors so the surrogate loss
        // stays smooth under perturbation.
        let base: Vec<Mat> = items
            .iter()
            .map(|it| model.encode_words(&it.low, &it.boundaries).unwrap())
            .collect();
        let pinned: Vec<Vec<usize>> = base
            .iter()
            .map(|z| cb.quantize(z).unwrap().indices)
            .collect();

        let loss_of = |params: &ParamSet| -> f64 {
            let probe = ProsodyAutoencoder {
                config: cfg.clone(),
                params: params.clone(),
            };
            let mut tape = Tape::new();
            let ids = probe.params.attach(&mut tape);
            let mode = VqMode::Frozen {
                codebook: &cb,
                indices: &pinned,
                base: &base,
            };
            let fwd = probe.build_loss(&mut tape, &ids, &refs, &mode).unwrap();
            tape.value(fwd.loss).scalar()
        };

        let mut tape = Tape::new();
        let ids = model.params.attach(&mut tape);
        let mode = VqMode::Frozen {
            codebook: &cb,
            indices: &pinned,
            base: &base,
        };
        let fwd = model.build_loss(&mut tape, &ids, &refs, &mode).unwrap();
        let grads = tape.backward(fwd.loss);
        let analytic = model.params.collect_grads(&ids, &grads);

        let flat_len = model.params.flat_len();
        // Spot-check a deterministic stride across all parameters.
        let stride = (flat_len / 60).max(1);
        let mut checked = 0;
        for i in (0..flat_len).step_by(stride) {
            let orig = model.params.get_flat(i);
            model.params.set_flat(i, orig + h);
            let up = loss_of(&model.params);
            model.params.set_flat(i, orig - h);
            let down = loss_of(&model.params);
            model.params.set_flat(i, orig);
            let numeric = (up - down) / (2.0 * h);

            let mut at = i;
            let mut a = 0.0;
            for g in &analytic {
                if at < g.numel() {
                    a = g.data()[at];
                    break;
                }
                at -= g.numel();
            }
            let rel = (a - numeric).abs() / (a.abs() + 1e-8);
            assert!(
                rel < 1e-4,
                "param {} ({}): analytic {a}, numeric {numeric}, rel {rel}",
                i,
                model.params.flat_name(i)
            );
            checked += 1;
        }
        assert!(checked >= 40);
    }

    #[test]
    fn nan_input_aborts_with_step_and_batch() {
        let cfg = tiny_cfg();
        let mut utts = tiny_corpus(0.3, 27);
        if let Some(audio) = &mut utts[0].audio {
            audio.features.set(0, 0, f64::NAN);
        }
        // Force the poisoned utterance into every batch.
        let poisoned = vec![utts[0].clone(), utts[0].clone()];
        let mut tr = EncoderTrainer::new(&cfg, &tiny_vq(), &poisoned).unwrap();
        let err = (0..4).find_map(|_| tr.step().err()).expect("poisoned batch must abort");
        match err {
            Error::Numeric { step, batch, .. } => {
                assert!(batch.contains("e00000"), "batch {batch}");
                assert!(step < 4);
            }
            other => panic!("expected numeric abort, got {other:?}"),
        }
    }

    #[test]
    fn extract_lpv_is_deterministic_and_word_aligned() {
        let cfg = EncoderConfig {
            total_steps: 30,
            warmup_steps: 10,
            ..tiny_cfg()
        };
        let utts = tiny_corpus(0.3, 28);
        let (model, cb, _) = train_encoder(&cfg, &tiny_vq(), &utts).unwrap();
        let (seqs1, stats) = extract_lpv(&model, &cb, &utts).unwrap();
        let (seqs2, _) = extract_lpv(&model, &cb, &utts).unwrap();
        assert_eq!(seqs1, seqs2);
        assert_eq!(seqs1.len(), utts.len());
        for (seq, utt) in seqs1.iter().zip(&utts) {
            assert_eq!(seq.indices.len(), utt.words.len());
        }
        assert!(stats.active_codes >= 1);
    }
}
