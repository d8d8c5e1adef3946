// Training-quality checks for the prosody autoencoder: on a noiseless
// corpus the low band is exactly representable by one vector per hidden
// cluster, so reconstruction must reach the noise floor and the codebook
// must separate the clusters.

use lpv::corpus::{generate_corpus, LabelRecord, Quality, Split, SyntheticSpec, SyntheticSpecParams};
use lpv::encoder::{extract_lpv, train_encoder, EncoderConfig, LpvSequence};
use lpv::nn::Mat;
use lpv::vq::{matching_purity, VqConfig};

fn zero_noise_params(seed: u64) -> SyntheticSpecParams {
    SyntheticSpecParams {
        vocab_size: 12,
        n_clusters: 4,
        n_bands: 16,
        n_low_bands: 8,
        noise_sigma: 0.0,
        words_min: 2,
        words_max: 5,
        seed,
        ..Default::default()
    }
}

fn encoder_cfg() -> EncoderConfig {
    EncoderConfig {
        n_low_bands: 8,
        hidden: 16,
        frame_layers: 1,
        word_layers: 1,
        kernel: 3,
        warmup_steps: 1500,
        commitment_beta: 0.25,
        lr: 3e-3,
        batch_size: 8,
        total_steps: 4000,
        seed: 7,
    }
}

/// Code-by-cluster contingency table from extracted sequences and the
/// sidecar word labels.
fn contingency(
    sequences: &[LpvSequence],
    labels: &[LabelRecord],
    k: usize,
    n_clusters: usize,
) -> Mat {
    let mut table = Mat::zeros(k, n_clusters);
    let mut by_utt: std::collections::HashMap<&str, &LpvSequence> = std::collections::HashMap::new();
    for s in sequences {
        by_utt.insert(s.utt_id.as_str(), s);
    }
    for l in labels {
        let seq = by_utt[l.utt_id.as_str()];
        let code = seq.indices[l.word_index];
        table.set(code, l.cluster, table.get(code, l.cluster) + 1.0);
    }
    table
}

#[test]
fn zero_noise_training_recovers_clusters() {
    let spec = SyntheticSpec::from_params(&zero_noise_params(3)).unwrap();
    let (utts, labels) = generate_corpus(&spec, 80, Quality::High, Split::Train, "zn").unwrap();

    let cfg = encoder_cfg();
    let vq = VqConfig {
        k: 8,
        ..Default::default()
    };
    let (model, codebook, report) = train_encoder(&cfg, &vq, &utts).unwrap();

    assert!(
        report.final_recon_mse < 1e-3,
        "reconstruction MSE {} above the noiseless floor",
        report.final_recon_mse
    );

    let (sequences, usage) = extract_lpv(&model, &codebook, &utts).unwrap();
    assert!(
        usage.active_codes >= 4,
        "only {} active codes for 4 hidden clusters",
        usage.active_codes
    );
    let purity = matching_purity(&contingency(&sequences, &labels, 8, 4));
    assert!(purity >= 0.95, "cluster purity {purity} below 0.95");
}

#[test]
fn training_loss_decreases() {
    let params = SyntheticSpecParams {
        noise_sigma: 0.3,
        ..zero_noise_params(9)
    };
    let spec = SyntheticSpec::from_params(&params).unwrap();
    let (utts, _) = generate_corpus(&spec, 40, Quality::High, Split::Train, "ld").unwrap();

    let cfg = EncoderConfig {
        total_steps: 400,
        warmup_steps: 100,
        ..encoder_cfg()
    };
    let vq = VqConfig {
        k: 8,
        ..Default::default()
    };
    let (_, _, report) = train_encoder(&cfg, &vq, &utts).unwrap();

    let curve = &report.loss_curve;
    let head: f64 = curve[..10].iter().map(|p| p.recon_mse).sum::<f64>() / 10.0;
    let tail: f64 = curve[curve.len() - 10..]
        .iter()
        .map(|p| p.recon_mse)
        .sum::<f64>()
        / 10.0;
    assert!(
        tail < head * 0.5,
        "reconstruction did not improve: first-10 mean {head}, last-10 mean {tail}"
    );
}
