//! EMA-based vector quantization: codebook, k-means initialization, usage
//! monitoring, and cluster-recovery scoring.
//!
//! The codebook is trained by exponential moving averages of assignment
//! counts and vector sums rather than by gradients. Nearest-neighbor
//! search is an exhaustive scan; ties go to the lowest index so every
//! result is reproducible.

use std::fs;
use std::path::Path;

use rand::RngExt;

use crate::error::{Error, Result};
use crate::nn::Mat;
use crate::rng::substream;

pub const CODEBOOK_MAGIC: &[u8; 4] = b"LPVQ";
pub const CODEBOOK_VERSION: u32 = 1;

/// Quantizer configuration as it appears in the config file.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct VqConfig {
    /// Codebook size.
    pub k: usize,
    /// EMA decay.
    pub gamma: f64,
    /// Laplace smoothing constant.
    pub eps: f64,
    /// Warm-up then k-means initialization when true; random codebook
    /// active from step 0 when false (the ablating arm).
    pub kmeans_init: bool,
    pub kmeans_iters: usize,
    /// Warm-up reservoir capacity as a multiple of k.
    pub buffer_factor: usize,
    /// Periodically relocate starved codes onto batch vectors. Off by
    /// default; warm-up plus k-means is the supported remedy.
    pub reseed_dead: bool,
}

impl Default for VqConfig {
    fn default() -> Self {
        Self {
            k: 128,
            gamma: 0.99,
            eps: 1e-5,
            kmeans_init: true,
            kmeans_iters: 50,
            buffer_factor: 10,
            reseed_dead: false,
        }
    }
}

impl VqConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::Config("codebook size k must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gamma {} must lie in [0, 1]",
                self.gamma
            )));
        }
        if self.eps <= 0.0 {
            return Err(Error::Config(format!("eps {} must be positive", self.eps)));
        }
        if self.kmeans_iters == 0 || self.buffer_factor == 0 {
            return Err(Error::Config(
                "kmeans_iters and buffer_factor must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Lloyd's algorithm output.
#[derive(Debug, Clone)]
pub struct KmeansResult {
    pub centroids: Mat,
    pub assignments: Vec<usize>,
    /// Sum of squared distances from each point to its centroid.
    pub inertia: f64,
}

fn nearest_row(m: &Mat, point: &[f64]) -> (usize, f64) {
    let mut best = (0usize, f64::INFINITY);
    for i in 0..m.rows() {
        let d = Mat::sq_dist_rows(m.row(i), point);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

/// K-means with k-means++ seeding, deterministic in `seed`.
///
/// Empty clusters are re-seeded to the point currently farthest from its
/// own centroid. Stops when assignments stop changing or after
/// `max_iters` rounds.
pub fn kmeans(points: &Mat, k: usize, max_iters: usize, seed: u64) -> Result<KmeansResult> {
    let n = points.rows();
    if k == 0 {
        return Err(Error::Validation("kmeans needs k >= 1".into()));
    }
    if n < k {
        return Err(Error::Validation(format!(
            "kmeans needs at least k={k} points, got {n}"
        )));
    }
    points.ensure_finite("kmeans input")?;
    let d = points.cols();
    let mut rng = substream(seed, "vq/kmeans");

    // k-means++ seeding: start uniform, then weight by squared distance to
    // the nearest seed so far. All-zero weights (duplicate data) fall back
    // to a uniform draw.
    let mut centroids = Mat::zeros(k, d);
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(points.row(first));
    let mut dist2: Vec<f64> = (0..n)
        .map(|i| Mat::sq_dist_rows(points.row(i), centroids.row(0)))
        .collect();
    for c in 1..k {
        let total: f64 = dist2.iter().sum();
        let pick = if total > 0.0 {
            let mut u: f64 = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in dist2.iter().enumerate() {
                u -= w;
                if u <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(points.row(pick));
        for i in 0..n {
            let d2 = Mat::sq_dist_rows(points.row(i), centroids.row(c));
            if d2 < dist2[i] {
                dist2[i] = d2;
            }
        }
    }

    let mut assignments = vec![usize::MAX; n];
    for _ in 0..max_iters {
        let mut changed = false;
        for i in 0..n {
            let (j, _) = nearest_row(&centroids, points.row(i));
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }

        let mut counts = vec![0usize; k];
        let mut sums = Mat::zeros(k, d);
        for (i, &a) in assignments.iter().enumerate() {
            counts[a] += 1;
            for j in 0..d {
                sums.set(a, j, sums.get(a, j) + points.get(i, j));
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                for j in 0..d {
                    centroids.set(c, j, sums.get(c, j) / counts[c] as f64);
                }
            } else {
                // Re-seed a dead centroid at the worst-served point.
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = Mat::sq_dist_rows(points.row(a), centroids.row(assignments[a]));
                        let db = Mat::sq_dist_rows(points.row(b), centroids.row(assignments[b]));
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                centroids.row_mut(c).copy_from_slice(points.row(far));
            }
        }
    }

    let mut inertia = 0.0;
    for i in 0..n {
        let (j, d2) = nearest_row(&centroids, points.row(i));
        assignments[i] = j;
        inertia += d2;
    }
    Ok(KmeansResult {
        centroids,
        assignments,
        inertia,
    })
}

/// Result of quantizing a batch of vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizeResult {
    pub indices: Vec<usize>,
    /// Row n is the selected code vector for input row n.
    pub quantized: Mat,
    /// Squared distance from each input to its chosen code.
    pub sq_dist: Vec<f64>,
}

/// Usage profile of the codebook over a batch of assignments.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct UsageStats {
    pub histogram: Vec<usize>,
    /// exp of the assignment entropy; K when uniform, 1 when collapsed.
    pub perplexity: f64,
    pub active_codes: usize,
}

/// Histogram, perplexity and active-code count of `indices` over `k` codes.
pub fn usage_stats(indices: &[usize], k: usize) -> Result<UsageStats> {
    let mut histogram = vec![0usize; k];
    for &i in indices {
        if i >= k {
            return Err(Error::Validation(format!(
                "index {i} out of range for {k} codes"
            )));
        }
        histogram[i] += 1;
    }
    let total: usize = histogram.iter().sum();
    // Entropy in bits, H = log2(total) - sum(c log2 c)/total, then 2^H.
    // Base 2 keeps uniform power-of-two histograms exact (log2 and exp2
    // are exact on powers of two).
    let perplexity = if total == 0 {
        1.0
    } else {
        let total_f = total as f64;
        let mut s = 0.0;
        for &c in &histogram {
            if c > 0 {
                s += c as f64 * (c as f64).log2();
            }
        }
        (total_f.log2() - s / total_f).exp2()
    };
    Ok(UsageStats {
        active_codes: histogram.iter().filter(|&&c| c > 0).count(),
        histogram,
        perplexity,
    })
}

/// EMA vector-quantization codebook.
#[derive(Debug, Clone, PartialEq)]
pub struct Codebook {
    k: usize,
    d: usize,
    /// Code vectors, row per code.
    e: Mat,
    /// EMA of per-code assignment counts.
    ema_count: Vec<f64>,
    /// EMA of per-code assigned-vector sums.
    ema_sum: Mat,
    gamma: f64,
    eps: f64,
    initialized: bool,
}

impl Codebook {
    pub fn new(k: usize, d: usize, gamma: f64, eps: f64) -> Result<Self> {
        if k == 0 || d == 0 {
            return Err(Error::Validation("codebook needs k >= 1 and d >= 1".into()));
        }
        if !(0.0..=1.0).contains(&gamma) {
            return Err(Error::Validation(format!(
                "EMA decay gamma {gamma} must lie in [0, 1]"
            )));
        }
        if eps <= 0.0 {
            return Err(Error::Validation(format!(
                "smoothing eps {eps} must be positive"
            )));
        }
        Ok(Self {
            k,
            d,
            e: Mat::zeros(k, d),
            ema_count: vec![0.0; k],
            ema_sum: Mat::zeros(k, d),
            gamma,
            eps,
            initialized: false,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    pub fn eps(&self) -> f64 {
        self.eps
    }

    pub fn is_initialized(&self) -> bool {
        self.initialized
    }

    pub fn codes(&self) -> &Mat {
        &self.e
    }

    pub fn ema_count(&self) -> &[f64] {
        &self.ema_count
    }

    /// Seeds the codebook from k-means over `points`: code vectors from
    /// the centroids, EMA statistics from the cluster sizes and sums so
    /// that e = ema_sum/ema_count holds from the first update on.
    pub fn init_from_kmeans(&mut self, points: &Mat, max_iters: usize, seed: u64) -> Result<()> {
        if self.initialized {
            return Err(Error::Validation("codebook is already initialized".into()));
        }
        if points.cols() != self.d {
            return Err(Error::Validation(format!(
                "points have dimension {}, codebook expects {}",
                points.cols(),
                self.d
            )));
        }
        let km = kmeans(points, self.k, max_iters, seed)?;
        self.e = km.centroids;
        self.ema_count = vec![0.0; self.k];
        self.ema_sum = Mat::zeros(self.k, self.d);
        for (i, &a) in km.assignments.iter().enumerate() {
            self.ema_count[a] += 1.0;
            for j in 0..self.d {
                self.ema_sum.set(a, j, self.ema_sum.get(a, j) + points.get(i, j));
            }
        }
        // Dead centroids (possible when data has fewer distinct points
        // than codes) get unit mass at their own position.
        for c in 0..self.k {
            if self.ema_count[c] == 0.0 {
                self.ema_count[c] = 1.0;
                for j in 0..self.d {
                    self.ema_sum.set(c, j, self.e.get(c, j));
                }
            }
        }
        self.initialized = true;
        Ok(())
    }

    /// Random-Gaussian initialization, the ablation alternative to
    /// [`Codebook::init_from_kmeans`]. EMA statistics get unit mass per
    /// code so e = ema_sum/ema_count holds here too.
    pub fn init_random(&mut self, std: f64, rng: &mut impl RngExt) -> Result<()> {
        if self.initialized {
            return Err(Error::Validation("codebook is already initialized".into()));
        }
        self.e = Mat::randn(self.k, self.d, std, rng);
        self.ema_count = vec![1.0; self.k];
        self.ema_sum = self.e.clone();
        self.initialized = true;
        Ok(())
    }

    /// Nearest code per row by squared Euclidean distance, exhaustive
    /// scan, ties to the lowest index.
    pub fn quantize(&self, z: &Mat) -> Result<QuantizeResult> {
        if !self.initialized {
            return Err(Error::Validation(
                "cannot quantize with an uninitialized codebook".into(),
            ));
        }
        if z.cols() != self.d {
            return Err(Error::Validation(format!(
                "input dimension {} does not match codebook dimension {}",
                z.cols(),
                self.d
            )));
        }
        let n = z.rows();
        let mut indices = Vec::with_capacity(n);
        let mut sq_dist = Vec::with_capacity(n);
        let mut quantized = Mat::zeros(n, self.d);
        for i in 0..n {
            let (j, d2) = nearest_row(&self.e, z.row(i));
            indices.push(j);
            sq_dist.push(d2);
            quantized.row_mut(i).copy_from_slice(self.e.row(j));
        }
        Ok(QuantizeResult {
            indices,
            quantized,
            sq_dist,
        })
    }

    /// One EMA step over a batch: counts and sums decay toward the batch
    /// statistics, then code vectors are re-derived with Laplace
    /// smoothing over the total count.
    pub fn ema_update(&mut self, z: &Mat, indices: &[usize]) -> Result<()> {
        if !self.initialized {
            return Err(Error::Validation(
                "cannot update an uninitialized codebook".into(),
            ));
        }
        if indices.len() != z.rows() {
            return Err(Error::Validation(format!(
                "{} indices for {} rows",
                indices.len(),
                z.rows()
            )));
        }
        let mut n_batch = vec![0.0f64; self.k];
        let mut sum_batch = Mat::zeros(self.k, self.d);
        for (i, &a) in indices.iter().enumerate() {
            if a >= self.k {
                return Err(Error::Validation(format!(
                    "index {a} out of range for {} codes",
                    self.k
                )));
            }
            n_batch[a] += 1.0;
            for j in 0..self.d {
                sum_batch.set(a, j, sum_batch.get(a, j) + z.get(i, j));
            }
        }
        let g = self.gamma;
        for c in 0..self.k {
            self.ema_count[c] = g * self.ema_count[c] + (1.0 - g) * n_batch[c];
            for j in 0..self.d {
                let s = g * self.ema_sum.get(c, j) + (1.0 - g) * sum_batch.get(c, j);
                self.ema_sum.set(c, j, s);
            }
        }
        let total: f64 = self.ema_count.iter().sum();
        if total > 0.0 {
            let k = self.k as f64;
            for c in 0..self.k {
                let denom = (self.ema_count[c] + self.eps) / (total + k * self.eps) * total;
                for j in 0..self.d {
                    self.e.set(c, j, self.ema_sum.get(c, j) / denom);
                }
            }
        }
        self.e.ensure_finite("codebook")?;
        Ok(())
    }

    /// Moves codes whose EMA count fell below `threshold` onto random
    /// rows of `z`, with unit mass. Returns how many codes moved.
    pub fn reseed_dead_codes(
        &mut self,
        z: &Mat,
        threshold: f64,
        rng: &mut impl RngExt,
    ) -> usize {
        if !self.initialized || z.rows() == 0 {
            return 0;
        }
        let mut moved = 0;
        for c in 0..self.k {
            if self.ema_count[c] < threshold {
                let r = rng.random_range(0..z.rows());
                self.e.row_mut(c).copy_from_slice(z.row(r));
                self.ema_sum.row_mut(c).copy_from_slice(z.row(r));
                self.ema_count[c] = 1.0;
                moved += 1;
            }
        }
        moved
    }

    /// Writes the codebook: magic, version, K, D, gamma, eps, then e,
    /// ema_count and ema_sum as little-endian f32.
    pub fn save(&self, path: &Path) -> Result<()> {
        if !self.initialized {
            return Err(Error::Validation(
                "refusing to save an uninitialized codebook".into(),
            ));
        }
        let mut buf = Vec::with_capacity(20 + 4 * (2 * self.k * self.d + self.k));
        buf.extend_from_slice(CODEBOOK_MAGIC);
        buf.extend_from_slice(&CODEBOOK_VERSION.to_le_bytes());
        buf.extend_from_slice(&(self.k as u32).to_le_bytes());
        buf.extend_from_slice(&(self.d as u32).to_le_bytes());
        buf.extend_from_slice(&(self.gamma as f32).to_le_bytes());
        buf.extend_from_slice(&(self.eps as f32).to_le_bytes());
        for &v in self.e.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &v in &self.ema_count {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        for &v in self.ema_sum.data() {
            buf.extend_from_slice(&(v as f32).to_le_bytes());
        }
        fs::write(path, buf)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path)?;
        let err = |offset: usize, message: String| Error::Format {
            path: path.to_path_buf(),
            offset: offset as u64,
            message,
        };
        if buf.len() < 24 {
            return Err(err(buf.len(), "header truncated".into()));
        }
        if &buf[0..4] != CODEBOOK_MAGIC {
            return Err(err(0, "bad magic, expected \"LPVQ\"".into()));
        }
        let u32_at = |at: usize| u32::from_le_bytes(buf[at..at + 4].try_into().unwrap());
        let f32_at = |at: usize| f32::from_le_bytes(buf[at..at + 4].try_into().unwrap());
        let version = u32_at(4);
        if version != CODEBOOK_VERSION {
            return Err(err(4, format!("unsupported version {version}")));
        }
        let k = u32_at(8) as usize;
        let d = u32_at(12) as usize;
        let gamma = f32_at(16) as f64;
        let eps = f32_at(20) as f64;
        let expected = 24 + 4 * (2 * k * d + k);
        if buf.len() != expected {
            return Err(err(
                buf.len().min(expected),
                format!("file is {} bytes, header implies {expected}", buf.len()),
            ));
        }
        let mut at = 24;
        let mut block = |len: usize| -> Vec<f64> {
            let out = (0..len)
                .map(|i| f32_at(at + 4 * i) as f64)
                .collect::<Vec<_>>();
            at += 4 * len;
            out
        };
        let e = Mat::from_vec(k, d, block(k * d));
        let ema_count = block(k);
        let ema_sum = Mat::from_vec(k, d, block(k * d));
        let mut cb = Codebook::new(k, d, gamma, eps)?;
        cb.e = e;
        cb.ema_count = ema_count;
        cb.ema_sum = ema_sum;
        cb.initialized = true;
        Ok(cb)
    }
}

/// Maximum-weight bijective matching between the rows and columns of a
/// non-negative weight matrix (Hungarian algorithm on the negated
/// weights). Returns the matched weight and the (row, col) pairs; when
/// the matrix is not square, only min(rows, cols) pairs are produced.
pub fn best_bijective_matching(weights: &Mat) -> (f64, Vec<(usize, usize)>) {
    let n = weights.rows().max(weights.cols());
    if n == 0 {
        return (0.0, Vec::new());
    }
    // Pad to square with zero weight; minimize cost = -weight.
    let cost = |i: usize, j: usize| -> f64 {
        if i < weights.rows() && j < weights.cols() {
            -weights.get(i, j)
        } else {
            0.0
        }
    };

    // Potentials-based shortest augmenting path formulation, rows 1-based.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut match_col = vec![0usize; n + 1];
    for i in 1..=n {
        match_col[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = match_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[match_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if match_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            match_col[j0] = match_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut pairs = Vec::new();
    let mut total = 0.0;
    for j in 1..=n {
        let i = match_col[j];
        if i >= 1 && i - 1 < weights.rows() && j - 1 < weights.cols() {
            let w = weights.get(i - 1, j - 1);
            // Padded rows/cols matched for zero weight are not real pairs.
            total += w;
            pairs.push((i - 1, j - 1));
        }
    }
    pairs.sort();
    (total, pairs)
}

/// Fraction of mass captured by the best bijective code-to-cluster
/// matching of a contingency table (rows: codes, cols: true clusters).
pub fn matching_purity(contingency: &Mat) -> f64 {
    let total: f64 = contingency.data().iter().sum();
    if total == 0.0 {
        return 0.0;
    }
    let (matched, _) = best_bijective_matching(contingency);
    matched / total
}
