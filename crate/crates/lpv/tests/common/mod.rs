//! Helpers shared by integration tests.

#![allow(dead_code)]

/// Minimal alignment cost by exhaustive path enumeration, no memoization.
///
/// Walks every monotone path from (0,0) to (n-1,m-1) with steps
/// {(1,0),(0,1),(1,1)} and returns the cheapest node-cost sum. Integer
/// costs keep the comparison against the DP exact.
pub fn dtw_enumeration_oracle(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len();
    let m = b.len();
    let mut c = vec![0i64; n * m];
    for i in 0..n {
        for j in 0..m {
            c[i * m + j] = (a[i] - b[j]).abs().round() as i64;
        }
    }
    fn walk(c: &[i64], n: usize, m: usize, i: usize, j: usize) -> i64 {
        let here = c[i * m + j];
        if i + 1 == n && j + 1 == m {
            return here;
        }
        let mut best = i64::MAX;
        if i + 1 < n && j + 1 < m {
            best = best.min(walk(c, n, m, i + 1, j + 1));
        }
        if i + 1 < n {
            best = best.min(walk(c, n, m, i + 1, j));
        }
        if j + 1 < m {
            best = best.min(walk(c, n, m, i, j + 1));
        }
        here + best
    }
    walk(&c, n, m, 0, 0) as f64
}

/// All sequences of the given length over the values {0, 1, 2}.
pub fn ternary_sequences(len: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![]];
    for _ in 0..len {
        let mut next = Vec::with_capacity(out.len() * 3);
        for seq in &out {
            for v in 0..3 {
                let mut s = seq.clone();
                s.push(v as f64);
                next.push(s);
            }
        }
        out = next;
    }
    out
}

/// Code-by-cluster contingency table from extracted sequences and the
/// sidecar word labels.
pub fn code_cluster_table(
    sequences: &[lpv::encoder::LpvSequence],
    labels: &[lpv::corpus::LabelRecord],
    k: usize,
    n_clusters: usize,
) -> lpv::Mat {
    let mut table = lpv::Mat::zeros(k, n_clusters);
    let mut by_utt: std::collections::HashMap<&str, &lpv::encoder::LpvSequence> =
        std::collections::HashMap::new();
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
