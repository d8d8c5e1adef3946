//! The EMA codebook on its own: k-means seeding, moving-average updates,
//! usage statistics, and rescuing starved codes.
//!
//! Run with: cargo run --example codebook_basics

use lpv::rng::substream;
use lpv::vq::{kmeans, usage_stats, Codebook};
use lpv::Mat;

/// Four well-separated Gaussian blobs in 2-D, 50 points each.
fn blobs() -> Mat {
    let mut rng = substream(7, "example/blobs");
    let centers = [(4.0, 4.0), (-4.0, 4.0), (-4.0, -4.0), (4.0, -4.0)];
    let mut points = Mat::zeros(200, 2);
    for (b, &(cx, cy)) in centers.iter().enumerate() {
        let noise = Mat::randn(50, 2, 0.4, &mut rng);
        for i in 0..50 {
            points.set(b * 50 + i, 0, cx + noise.get(i, 0));
            points.set(b * 50 + i, 1, cy + noise.get(i, 1));
        }
    }
    points
}

fn main() -> lpv::Result<()> {
    let points = blobs();

    // Plain k-means first: deterministic under a fixed seed.
    let km = kmeans(&points, 4, 50, 0)?;
    println!("k-means inertia {:.2}", km.inertia);
    for c in 0..4 {
        println!(
            "  centroid {c}: ({:+.2}, {:+.2})",
            km.centroids.get(c, 0),
            km.centroids.get(c, 1)
        );
    }

    // A codebook seeded the same way quantizes to the same partition.
    let mut cb = Codebook::new(4, 2, 0.99, 1e-5)?;
    cb.init_from_kmeans(&points, 50, 0)?;
    let q = cb.quantize(&points)?;
    let stats = usage_stats(&q.indices, 4)?;
    println!(
        "\nseeded codebook: histogram {:?}, perplexity {:.2} (4 = uniform)",
        stats.histogram, stats.perplexity
    );

    // EMA updates pull codes toward the points they serve.
    for _ in 0..100 {
        let q = cb.quantize(&points)?;
        cb.ema_update(&points, &q.indices)?;
    }
    println!("after 100 EMA rounds, code 0 at ({:+.2}, {:+.2})", cb.codes().get(0, 0), cb.codes().get(0, 1));

    // A random init can park codes where nothing lives; counts expose
    // that, and reseeding moves the starved codes onto data.
    let mut bad = Codebook::new(8, 2, 0.9, 1e-5)?;
    let mut rng = substream(1, "example/bad-init");
    bad.init_random(0.1, &mut rng)?;
    for _ in 0..50 {
        let q = bad.quantize(&points)?;
        bad.ema_update(&points, &q.indices)?;
    }
    let before = usage_stats(&bad.quantize(&points)?.indices, 8)?;
    let moved = bad.reseed_dead_codes(&points, 0.1, &mut rng);
    for _ in 0..50 {
        let q = bad.quantize(&points)?;
        bad.ema_update(&points, &q.indices)?;
    }
    let after = usage_stats(&bad.quantize(&points)?.indices, 8)?;
    println!(
        "\nrandom init near origin: active {} of 8, perplexity {:.2}",
        before.active_codes, before.perplexity
    );
    println!(
        "reseeded {moved} starved codes: active {} of 8, perplexity {:.2}",
        after.active_codes, after.perplexity
    );

    // Codebooks persist with their EMA state (stored as f32, so compare
    // by behaviour, not bits).
    let path = std::env::temp_dir().join("lpv_codebook_demo.bin");
    cb.save(&path)?;
    let loaded = Codebook::load(&path)?;
    assert_eq!(loaded.quantize(&points)?.indices, cb.quantize(&points)?.indices);
    println!("\nsave/load round trip ok at {}", path.display());
    Ok(())
}
