//! Generate a small synthetic prosody corpus and look inside it.
//!
//! Every utterance carries word tokens, per-frame spectral features, a
//! pitch contour with a voicing mask, and word boundaries. Sidecar labels
//! record which hidden prosody cluster produced each word, which is what
//! recovery checks score against.
//!
//! Run with: cargo run --example corpus_tour

use lpv::corpus::{
    generate_corpus, load_corpus_dir, pooled_low_band, write_corpus_dir, Quality, Split,
    SyntheticSpec, SyntheticSpecParams,
};

fn main() -> lpv::Result<()> {
    let params = SyntheticSpecParams {
        vocab_size: 12,
        n_clusters: 4,
        n_bands: 16,
        n_low_bands: 8,
        noise_sigma: 0.2,
        words_min: 3,
        words_max: 6,
        seed: 42,
        ..Default::default()
    };
    let spec = SyntheticSpec::from_params(&params)?;
    let (utts, labels) = generate_corpus(&spec, 6, Quality::High, Split::Train, "demo")?;

    println!(
        "generated {} utterances, {} labeled words",
        utts.len(),
        labels.len()
    );

    let u = &utts[0];
    let audio = u.audio.as_ref().expect("high quality carries audio");
    println!("\n{}: words {:?}", u.id, u.words);
    println!("  frames {} x {} bands", audio.features.rows(), audio.features.cols());
    println!("  boundaries {:?}", audio.boundaries);
    println!("  durations {:?}", u.word_durations().unwrap());
    let voiced = audio.voiced.iter().filter(|&&v| v).count();
    println!("  voiced {voiced} of {} frames", audio.pitch.len());
    let first: Vec<String> = audio.pitch[..6].iter().map(|p| format!("{p:.1}")).collect();
    println!("  pitch head [{}] Hz", first.join(", "));

    // The generator's cluster choice per word is what the codebook is
    // supposed to rediscover.
    let mine: Vec<usize> = labels
        .iter()
        .filter(|l| l.utt_id == u.id)
        .map(|l| l.cluster)
        .collect();
    println!("  hidden clusters {mine:?}");

    // Word-mean low band: the ground-truth analog of the encoder pooling.
    let pooled = pooled_low_band(u, params.n_low_bands).unwrap();
    println!(
        "  pooled low band {} words x {} bands, first word head [{:.2}, {:.2}, {:.2}]",
        pooled.rows(),
        pooled.cols(),
        pooled.get(0, 0),
        pooled.get(0, 1),
        pooled.get(0, 2)
    );

    // Feature files, manifest and labels round-trip through a directory.
    let dir = std::env::temp_dir().join("lpv_corpus_tour");
    std::fs::create_dir_all(&dir)?;
    write_corpus_dir(&dir, &utts, &labels, params.vocab_size, params.n_bands)?;
    let (back, back_labels, manifest) = load_corpus_dir(&dir)?;
    assert_eq!(back.len(), utts.len());
    assert_eq!(back_labels.len(), labels.len());
    assert_eq!(back[0].audio.as_ref().unwrap().features, audio.features);
    println!(
        "\nround trip via {} ok: {} manifest entries",
        dir.display(),
        manifest.utterances.len()
    );
    Ok(())
}
