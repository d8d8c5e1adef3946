//! Training the prosody autoencoder end to end on a small synthetic
//! corpus: warm-up without the quantizer, the k-means hand-off, EMA
//! codebook updates, and finally code extraction scored against the
//! hidden cluster labels.
//!
//! Run with: cargo run --example encoder_training

use std::collections::HashMap;

use lpv::corpus::{generate_corpus, Quality, Split, SyntheticSpec, SyntheticSpecParams};
use lpv::encoder::{extract_lpv, EncoderConfig, EncoderTrainer, Phase};
use lpv::vq::{matching_purity, VqConfig};
use lpv::Mat;

fn main() -> lpv::Result<()> {
    let spec = SyntheticSpec::from_params(&SyntheticSpecParams {
        vocab_size: 12,
        n_clusters: 4,
        n_bands: 16,
        n_low_bands: 8,
        noise_sigma: 0.2,
        words_min: 2,
        words_max: 5,
        seed: 5,
        ..Default::default()
    })?;
    let (utts, labels) = generate_corpus(&spec, 40, Quality::High, Split::Train, "demo")?;
    println!("corpus: {} utterances, 4 hidden prosody clusters", utts.len());

    let cfg = EncoderConfig {
        n_low_bands: 8,
        hidden: 16,
        frame_layers: 1,
        word_layers: 1,
        kernel: 3,
        warmup_steps: 300,
        commitment_beta: 0.25,
        lr: 3e-3,
        batch_size: 8,
        total_steps: 900,
        seed: 7,
    };
    let vq = VqConfig { k: 8, ..Default::default() };

    let mut trainer = EncoderTrainer::new(&cfg, &vq, &utts)?;
    let mut last_phase = Phase::Warmup;
    while trainer.step_index() < cfg.total_steps {
        let info = trainer.step()?;
        if info.phase != last_phase {
            println!(
                "step {:>4}: quantizer joins the graph (codebook seeded by k-means over the warm-up sample)",
                info.step
            );
            last_phase = info.phase;
        }
        if info.step % 150 == 0 {
            println!(
                "step {:>4}: recon MSE {:.4}, commitment {:.4} [{:?}]",
                info.step, info.recon_mse, info.commitment, info.phase
            );
        }
    }
    let final_mse = trainer.eval_recon_mse()?;
    println!("final reconstruction MSE over the corpus: {final_mse:.4}");

    // Quantize every word and score codes against the hidden clusters.
    let (sequences, usage) = extract_lpv(&trainer.model, &trainer.codebook, &utts)?;
    println!(
        "\nextraction: {} sequences, active codes {} of {}, usage perplexity {:.2}",
        sequences.len(),
        usage.active_codes,
        trainer.codebook.k(),
        usage.perplexity
    );
    for s in sequences.iter().take(3) {
        println!("  {} -> {:?}", s.utt_id, s.indices);
    }

    let by_utt: HashMap<&str, usize> = sequences
        .iter()
        .enumerate()
        .map(|(i, s)| (s.utt_id.as_str(), i))
        .collect();
    let mut table = Mat::zeros(trainer.codebook.k(), 4);
    for l in &labels {
        let code = sequences[by_utt[l.utt_id.as_str()]].indices[l.word_index];
        table.set(code, l.cluster, table.get(code, l.cluster) + 1.0);
    }
    let purity = matching_purity(&table);
    println!("bijective code-to-cluster matching purity: {purity:.3}");
    Ok(())
}
