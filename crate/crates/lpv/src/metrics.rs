//! Objective prosody metrics: pitch alignment distance and duration
//! distribution divergence.
//!
//! Pitch is compared by aligning the voiced frames of two contours with
//! dynamic time warping and averaging the local costs over the alignment
//! path. Durations are compared per word: each system's integer frame
//! durations are smoothed with a Gaussian kernel density estimate and the
//! KL divergence between the two smoothed densities is averaged over the
//! shared dictionary.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SQRT_2PI: f64 = 2.5066282746310002;
/// Densities are floored at this value before taking logs.
const DENSITY_FLOOR: f64 = 1e-12;
/// Evaluation grids use this many uniformly spaced points.
pub const GRID_POINTS: usize = 512;
/// Bandwidths below half a frame are clamped up; integer durations can
/// collapse to zero spread otherwise.
const BANDWIDTH_FLOOR: f64 = 0.5;

/// A pitch track in Hz with a per-frame voicing mask.
#[derive(Debug, Clone, PartialEq)]
pub struct PitchContour {
    values: Vec<f64>,
    voiced: Vec<bool>,
}

impl PitchContour {
    pub fn new(values: Vec<f64>, voiced: Vec<bool>) -> Result<Self> {
        if values.len() != voiced.len() {
            return Err(Error::Validation(format!(
                "pitch contour has {} values but {} voicing flags",
                values.len(),
                voiced.len()
            )));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "pitch contour contains non-finite value {v}"
            )));
        }
        Ok(Self { values, voiced })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn voiced(&self) -> &[bool] {
        &self.voiced
    }

    /// Values at voiced frames, in order.
    pub fn voiced_values(&self) -> Vec<f64> {
        self.values
            .iter()
            .zip(&self.voiced)
            .filter(|(_, &v)| v)
            .map(|(&x, _)| x)
            .collect()
    }
}

/// Local cost used when aligning two pitch contours.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PitchCost {
    /// |x - y| on raw Hz values.
    #[default]
    Hz,
    /// |ln x - ln y|; requires strictly positive pitch.
    LogHz,
}

/// Outcome of a DTW alignment.
#[derive(Debug, Clone, PartialEq)]
pub struct DtwResult {
    /// Sum of local costs over the nodes of the best path.
    pub distance: f64,
    /// Node sequence from (0,0) to (n-1,m-1).
    pub path: Vec<(usize, usize)>,
    /// Number of nodes on the path.
    pub path_length: usize,
}

/// Aligns `a` against `b` with local cost |x - y| and step set
/// {(1,0),(0,1),(1,1)} over the full grid.
///
/// Backtracking ties are broken preferring (1,1), then (1,0), then (0,1)
/// so the reported path is deterministic. Both inputs must be non-empty.
pub fn dtw(a: &[f64], b: &[f64]) -> Result<DtwResult> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Validation("dtw requires non-empty sequences".into()));
    }
    let (n, m) = (a.len(), b.len());
    let cost = |i: usize, j: usize| (a[i] - b[j]).abs();

    // acc[i*m + j] = minimal cumulative cost of any path ending at (i, j).
    let mut acc = vec![0.0f64; n * m];
    acc[0] = cost(0, 0);
    for j in 1..m {
        acc[j] = acc[j - 1] + cost(0, j);
    }
    for i in 1..n {
        acc[i * m] = acc[(i - 1) * m] + cost(i, 0);
        for j in 1..m {
            let best = acc[(i - 1) * m + j - 1]
                .min(acc[(i - 1) * m + j])
                .min(acc[i * m + j - 1]);
            acc[i * m + j] = best + cost(i, j);
        }
    }

    let mut path = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n - 1, m - 1);
    path.push((i, j));
    while i > 0 || j > 0 {
        (i, j) = if i == 0 {
            (0, j - 1)
        } else if j == 0 {
            (i - 1, 0)
        } else {
            let diag = acc[(i - 1) * m + j - 1];
            let up = acc[(i - 1) * m + j];
            let left = acc[i * m + j - 1];
            let best = diag.min(up).min(left);
            if diag == best {
                (i - 1, j - 1)
            } else if up == best {
                (i - 1, j)
            } else {
                (i, j - 1)
            }
        };
        path.push((i, j));
    }
    path.reverse();

    Ok(DtwResult {
        distance: acc[n * m - 1],
        path_length: path.len(),
        path,
    })
}

/// Path-length-normalized DTW distance between the voiced parts of two
/// contours.
///
/// Unvoiced frames are dropped before alignment; a contour with no voiced
/// frame is rejected rather than silently scored.
pub fn pitch_dtw_distance(p1: &PitchContour, p2: &PitchContour, cost: PitchCost) -> Result<f64> {
    let mut v1 = p1.voiced_values();
    let mut v2 = p2.voiced_values();
    if v1.is_empty() || v2.is_empty() {
        return Err(Error::Validation(
            "pitch distance requires at least one voiced frame per contour".into(),
        ));
    }
    if cost == PitchCost::LogHz {
        for x in v1.iter_mut().chain(v2.iter_mut()) {
            if *x <= 0.0 {
                return Err(Error::Validation(format!(
                    "log-Hz cost requires positive pitch, got {x}"
                )));
            }
            *x = x.ln();
        }
    }
    let r = dtw(&v1, &v2)?;
    Ok(r.distance / r.path_length as f64)
}

/// A Gaussian kernel density estimate evaluated on a uniform grid.
///
/// The original samples are retained so the density can be re-evaluated
/// exactly on any other grid (the divergence below needs a shared one).
#[derive(Debug, Clone, PartialEq)]
pub struct DensityEstimate {
    grid: Vec<f64>,
    density: Vec<f64>,
    bandwidth: f64,
    samples: Vec<f64>,
}

impl DensityEstimate {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Normalized so the trapezoidal integral over `grid` is 1.
    pub fn density(&self) -> &[f64] {
        &self.density
    }

    pub fn bandwidth(&self) -> f64 {
        self.bandwidth
    }

    /// Raw kernel mixture at `x` (integrates to 1 over the real line, not
    /// over the stored grid).
    pub fn eval_raw(&self, x: f64) -> f64 {
        let h = self.bandwidth;
        let scale = 1.0 / (self.samples.len() as f64 * h * SQRT_2PI);
        let sum: f64 = self
            .samples
            .iter()
            .map(|&s| {
                let z = (x - s) / h;
                (-0.5 * z * z).exp()
            })
            .sum();
        scale * sum
    }
}

fn trapezoid(grid: &[f64], values: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 1..grid.len() {
        acc += 0.5 * (values[k] + values[k - 1]) * (grid[k] - grid[k - 1]);
    }
    acc
}

/// Interpolated quantile (linear between order statistics) of sorted data.
fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Silverman's bandwidth 0.9 * min(sd, IQR/1.34) * n^(-1/5), clamped to at
/// least half a frame.
fn silverman_bandwidth(samples: &[f64]) -> f64 {
    let n = samples.len();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let sd = if n >= 2 {
        let var = samples.iter().map(|&x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        var.sqrt()
    } else {
        0.0
    };
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = sd.min(iqr / 1.34);
    let h = 0.9 * spread * (n as f64).powf(-0.2);
    h.max(BANDWIDTH_FLOOR)
}

/// Gaussian KDE of `samples` on a 512-point grid spanning the data plus
/// four bandwidths on each side, renormalized to integrate to 1.
pub fn kde(samples: &[f64]) -> Result<DensityEstimate> {
    if samples.is_empty() {
        return Err(Error::Validation("kde requires at least one sample".into()));
    }
    if let Some(s) = samples.iter().find(|s| !s.is_finite()) {
        return Err(Error::Validation(format!("kde sample is not finite: {s}")));
    }
    let h = silverman_bandwidth(samples);
    let lo = samples.iter().cloned().fold(f64::INFINITY, f64::min) - 4.0 * h;
    let hi = samples.iter().cloned().fold(f64::NEG_INFINITY, f64::max) + 4.0 * h;

    let mut est = DensityEstimate {
        grid: uniform_grid(lo, hi, GRID_POINTS),
        density: Vec::with_capacity(GRID_POINTS),
        bandwidth: h,
        samples: samples.to_vec(),
    };
    est.density = est.grid.iter().map(|&x| est.eval_raw(x)).collect();
    let z = trapezoid(&est.grid, &est.density);
    for d in &mut est.density {
        *d /= z;
    }
    debug_assert!((trapezoid(&est.grid, &est.density) - 1.0).abs() <= 1e-6);
    Ok(est)
}

fn uniform_grid(lo: f64, hi: f64, points: usize) -> Vec<f64> {
    let step = (hi - lo) / (points - 1) as f64;
    (0..points).map(|k| lo + k as f64 * step).collect()
}

/// KL(p || q) by trapezoid on a shared grid spanning both estimates.
///
/// Both densities are re-evaluated from their samples on the common grid,
/// renormalized there, and floored at 1e-12 before the log. The result is
/// clamped to be non-negative (quadrature can dip a hair below zero).
pub fn kl_divergence(p: &DensityEstimate, q: &DensityEstimate) -> Result<f64> {
    kl_divergence_on_grid(p, q, GRID_POINTS)
}

/// Same as [`kl_divergence`] with an explicit grid resolution; useful for
/// checking quadrature convergence.
pub fn kl_divergence_on_grid(p: &DensityEstimate, q: &DensityEstimate, points: usize) -> Result<f64> {
    if p.bandwidth <= 0.0 || q.bandwidth <= 0.0 {
        return Err(Error::Validation(
            "kl divergence requires positive bandwidths".into(),
        ));
    }
    if points < 2 {
        return Err(Error::Validation(
            "kl divergence grid needs at least two points".into(),
        ));
    }
    let lo = p.grid[0].min(q.grid[0]);
    let hi = p.grid[p.grid.len() - 1].max(q.grid[q.grid.len() - 1]);
    let grid = uniform_grid(lo, hi, points);

    let renorm = |e: &DensityEstimate| -> Vec<f64> {
        let mut d: Vec<f64> = grid.iter().map(|&x| e.eval_raw(x)).collect();
        let z = trapezoid(&grid, &d);
        for v in &mut d {
            *v = (*v / z).max(DENSITY_FLOOR);
        }
        d
    };
    let pd = renorm(p);
    let qd = renorm(q);

    let integrand: Vec<f64> = pd
        .iter()
        .zip(&qd)
        .map(|(&pv, &qv)| pv * (pv / qv).ln())
        .collect();
    Ok(trapezoid(&grid, &integrand).max(0.0))
}

/// Per-word duration samples from two systems.
///
/// Only words with samples from both systems belong to the dictionary the
/// divergence is averaged over.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DurationTable {
    entries: BTreeMap<String, (Vec<f64>, Vec<f64>)>,
}

impl DurationTable {
    pub fn new() -> Self {
        Self::default()
    }

    /// Records one word duration. `system` is 1 or 2; durations are whole
    /// frames and must be >= 1.
    pub fn push(&mut self, word: &str, system: u8, duration: u32) -> Result<()> {
        if duration < 1 {
            return Err(Error::Validation(format!(
                "duration for {word:?} must be at least one frame"
            )));
        }
        let entry = self.entries.entry(word.to_string()).or_default();
        match system {
            1 => entry.0.push(duration as f64),
            2 => entry.1.push(duration as f64),
            other => {
                return Err(Error::Validation(format!(
                    "system must be 1 or 2, got {other}"
                )))
            }
        }
        Ok(())
    }

    /// Words with samples from both systems, sorted.
    pub fn common_words(&self) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, (a, b))| !a.is_empty() && !b.is_empty())
            .map(|(w, _)| w.as_str())
            .collect()
    }

    /// Dictionary size after dropping one-sided words.
    pub fn dictionary_size(&self) -> usize {
        self.common_words().len()
    }

    pub fn samples(&self, word: &str) -> Option<(&[f64], &[f64])> {
        self.entries
            .get(word)
            .map(|(a, b)| (a.as_slice(), b.as_slice()))
    }
}

/// Mean per-word KL divergence between KDE-smoothed duration distributions
/// of the two systems, over words present in both.
pub fn duration_kl(table: &DurationTable) -> Result<f64> {
    let words = table.common_words();
    if words.is_empty() {
        return Err(Error::Validation(
            "duration divergence requires at least one word present in both systems".into(),
        ));
    }
    let mut total = 0.0;
    for w in &words {
        let (s1, s2) = table.samples(w).unwrap();
        total += kl_divergence(&kde(s1)?, &kde(s2)?)?;
    }
    Ok(total / words.len() as f64)
}

/// One utterance's pitch track, as serialized for evaluation inputs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct PitchRecord {
    pub utt_id: String,
    pub pitch: Vec<f64>,
    pub voiced: Vec<bool>,
}

/// One word duration observation, as serialized for evaluation inputs.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DurationRecord {
    pub utt_id: String,
    pub word: String,
    pub duration: u32,
    pub system: u8,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn contour(values: &[f64]) -> PitchContour {
        PitchContour::new(values.to_vec(), vec![true; values.len()]).unwrap()
    }

    #[test]
    fn dtw_identical_sequences_cost_zero_on_diagonal() {
        let a = [3.0, 1.0, 4.0, 1.0, 5.0];
        let r = dtw(&a, &a).unwrap();
        assert_eq!(r.distance, 0.0);
        assert_eq!(r.path_length, a.len());
        let diag: Vec<(usize, usize)> = (0..a.len()).map(|i| (i, i)).collect();
        assert_eq!(r.path, diag);
    }

    #[test]
    fn dtw_offset_pair_takes_diagonal() {
        let r = dtw(&[0.0, 0.0], &[1.0, 1.0]).unwrap();
        assert_eq!(r.distance, 2.0);
        assert_eq!(r.path_length, 2);
        assert_eq!(r.path, vec![(0, 0), (1, 1)]);
    }

    #[test]
    fn dtw_path_costs_sum_to_distance() {
        let a = [0.0, 2.0, 1.0, 2.0];
        let b = [1.0, 2.0, 0.0];
        let r = dtw(&a, &b).unwrap();
        let sum: f64 = r.path.iter().map(|&(i, j)| (a[i] - b[j]).abs()).sum();
        assert_eq!(sum, r.distance);
        assert_eq!(r.path.first(), Some(&(0, 0)));
        assert_eq!(r.path.last(), Some(&(3, 2)));
    }

    #[test]
    fn dtw_rejects_empty_input() {
        assert!(dtw(&[], &[1.0]).is_err());
        assert!(dtw(&[1.0], &[]).is_err());
    }

    #[test]
    fn pitch_distance_hand_case() {
        let d = pitch_dtw_distance(
            &contour(&[100.0, 100.0]),
            &contour(&[110.0, 110.0]),
            PitchCost::Hz,
        )
        .unwrap();
        assert_eq!(d, 10.0);
    }

    #[test]
    fn pitch_distance_ignores_unvoiced_frames() {
        let base = contour(&[100.0, 120.0, 140.0]);
        let padded = PitchContour::new(
            vec![100.0, 55.0, 120.0, 55.0, 140.0],
            vec![true, false, true, false, true],
        )
        .unwrap();
        let other = contour(&[105.0, 118.0, 150.0]);
        let d1 = pitch_dtw_distance(&base, &other, PitchCost::Hz).unwrap();
        let d2 = pitch_dtw_distance(&padded, &other, PitchCost::Hz).unwrap();
        assert_eq!(d1, d2);
    }

    #[test]
    fn pitch_distance_rejects_fully_unvoiced() {
        let silent = PitchContour::new(vec![0.0, 0.0], vec![false, false]).unwrap();
        let voiced = contour(&[100.0]);
        assert!(pitch_dtw_distance(&silent, &voiced, PitchCost::Hz).is_err());
    }

    #[test]
    fn log_cost_is_scale_invariant() {
        let a = contour(&[100.0, 200.0]);
        let b = contour(&[150.0, 300.0]);
        let a2 = contour(&[200.0, 400.0]);
        let b2 = contour(&[300.0, 600.0]);
        let d1 = pitch_dtw_distance(&a, &b, PitchCost::LogHz).unwrap();
        let d2 = pitch_dtw_distance(&a2, &b2, PitchCost::LogHz).unwrap();
        assert!((d1 - d2).abs() < 1e-12);
    }

    #[test]
    fn kde_singleton_uses_floored_bandwidth_and_peaks_at_sample() {
        let e = kde(&[10.0]).unwrap();
        assert_eq!(e.bandwidth(), 0.5);
        assert_eq!(e.grid().len(), GRID_POINTS);
        assert_eq!(e.grid()[0], 10.0 - 2.0);
        let peak = e
            .density()
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        assert!((e.grid()[peak] - 10.0).abs() < 1e-2);
    }

    #[test]
    fn kde_integrates_to_one() {
        let samples = [3.0, 3.0, 4.0, 7.0, 7.0, 7.0, 9.0, 12.0];
        let e = kde(&samples).unwrap();
        assert!((trapezoid(e.grid(), e.density()) - 1.0).abs() <= 1e-6);
    }

    #[test]
    fn kde_symmetric_samples_give_symmetric_density() {
        let e = kde(&[-2.0, -1.0, 1.0, 2.0]).unwrap();
        let d = e.density();
        let n = d.len();
        for k in 0..n {
            assert!((d[k] - d[n - 1 - k]).abs() < 1e-9);
        }
    }

    #[test]
    fn kl_of_density_with_itself_is_zero() {
        let e = kde(&[4.0, 5.0, 5.0, 6.0]).unwrap();
        assert_eq!(kl_divergence(&e, &e).unwrap(), 0.0);
    }

    #[test]
    fn kl_matches_closed_form_for_shifted_singletons() {
        // Both singleton KDEs are N(mu, h^2) with h clamped to 0.5, so
        // KL = (mu1 - mu2)^2 / (2 h^2) exactly.
        let p = kde(&[0.0]).unwrap();
        let q = kde(&[1.0]).unwrap();
        let got = kl_divergence(&p, &q).unwrap();
        let want = 1.0 / (2.0 * 0.5 * 0.5);
        assert!(
            (got - want).abs() / want < 1e-3,
            "got {got}, closed form {want}"
        );
    }

    #[test]
    fn kl_quadrature_is_converged_at_default_resolution() {
        let p = kde(&[4.0, 4.0, 5.0, 6.0, 8.0]).unwrap();
        let q = kde(&[5.0, 6.0, 6.0, 7.0, 9.0]).unwrap();
        let coarse = kl_divergence_on_grid(&p, &q, GRID_POINTS).unwrap();
        let fine = kl_divergence_on_grid(&p, &q, 8192).unwrap();
        assert!(
            (coarse - fine).abs() / fine.max(1e-12) < 1e-4,
            "coarse {coarse}, fine {fine}"
        );
    }

    #[test]
    fn duration_kl_is_mean_of_per_word_terms() {
        let mut t = DurationTable::new();
        for d in [4, 4, 5] {
            t.push("a", 1, d).unwrap();
        }
        for d in [6, 7, 7] {
            t.push("a", 2, d).unwrap();
        }
        for d in [3, 3] {
            t.push("b", 1, d).unwrap();
        }
        for d in [3, 4] {
            t.push("b", 2, d).unwrap();
        }
        let k1 = kl_divergence(
            &kde(&[4.0, 4.0, 5.0]).unwrap(),
            &kde(&[6.0, 7.0, 7.0]).unwrap(),
        )
        .unwrap();
        let k2 = kl_divergence(&kde(&[3.0, 3.0]).unwrap(), &kde(&[3.0, 4.0]).unwrap()).unwrap();
        let got = duration_kl(&t).unwrap();
        assert!((got - (k1 + k2) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn duration_kl_skips_one_sided_words_and_rejects_empty_dictionary() {
        let mut t = DurationTable::new();
        t.push("only_sys1", 1, 5).unwrap();
        assert!(duration_kl(&t).is_err());
        t.push("shared", 1, 5).unwrap();
        t.push("shared", 2, 5).unwrap();
        assert_eq!(t.dictionary_size(), 1);
        assert_eq!(duration_kl(&t).unwrap(), 0.0);
    }

    #[test]
    fn identical_duration_tables_diverge_zero() {
        let mut t = DurationTable::new();
        for (w, d) in [("x", 3), ("x", 4), ("y", 6)] {
            t.push(w, 1, d).unwrap();
            t.push(w, 2, d).unwrap();
        }
        assert_eq!(duration_kl(&t).unwrap(), 0.0);
    }

    #[test]
    fn duration_table_rejects_bad_rows() {
        let mut t = DurationTable::new();
        assert!(t.push("w", 3, 4).is_err());
        assert!(t.push("w", 1, 0).is_err());
    }
}
