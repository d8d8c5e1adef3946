//! Minimal numeric kit: matrices, a reverse-mode tape, parameters and Adam.

pub mod adam;
pub mod params;
pub mod tape;
pub mod tensor;

pub use adam::Adam;
pub use params::{ParamIds, ParamSet};
pub use tape::{Gradients, Id, Tape};
pub use tensor::Mat;

#[cfg(test)]
mod grad_tests {
    //! Per-op gradient checks against central finite differences. The model
    //! level checks live in the integration suites; these pin down each tape
    //! op in isolation.

    use super::*;
    use crate::rng::substream;

    /// Build a scalar loss from a ParamSet; returns the loss value.
    fn loss_of(params: &ParamSet, build: &dyn Fn(&mut Tape, &ParamIds) -> Id) -> f64 {
        let mut tape = Tape::new();
        let ids = params.attach(&mut tape);
        let loss = build(&mut tape, &ids);
        tape.value(loss).scalar()
    }

    fn check(params: &ParamSet, build: &dyn Fn(&mut Tape, &ParamIds) -> Id) {
        let mut tape = Tape::new();
        let ids = params.attach(&mut tape);
        let loss = build(&mut tape, &ids);
        let grads = tape.backward(loss);
        let analytic = params.collect_grads(&ids, &grads);

        let flat: Vec<f64> = analytic.iter().flat_map(|m| m.data().to_vec()).collect();
        let h = 1e-5;
        let mut p = params.clone();
        for i in 0..p.flat_len() {
            let orig = p.get_flat(i);
            p.set_flat(i, orig + h);
            let up = loss_of(&p, build);
            p.set_flat(i, orig - h);
            let down = loss_of(&p, build);
            p.set_flat(i, orig);
            let numeric = (up - down) / (2.0 * h);
            let rel = (flat[i] - numeric).abs() / (flat[i].abs() + 1e-8);
            assert!(
                rel < 1e-5,
                "param {} flat {i}: analytic {} vs numeric {numeric}",
                p.flat_name(i),
                flat[i]
            );
        }
    }

    fn random_params(specs: &[(&str, usize, usize)], seed: u64) -> ParamSet {
        let mut rng = substream(seed, "grad-test");
        let mut ps = ParamSet::new();
        for &(name, r, c) in specs {
            ps.insert(name, Mat::randn(r, c, 0.7, &mut rng));
        }
        ps
    }

    #[test]
    fn matmul_chain_grads() {
        let ps = random_params(&[("a", 3, 4), ("b", 4, 2), ("bias", 1, 2)], 1);
        check(&ps, &|t, ids| {
            let y = t.matmul(ids.id("a"), ids.id("b"));
            let y = t.add_row_broadcast(y, ids.id("bias"));
            let target = t.constant(Mat::filled(3, 2, 0.3));
            t.mean_sq(y, target)
        });
    }

    #[test]
    fn matmul_nt_grads() {
        let ps = random_params(&[("a", 3, 4), ("b", 5, 4)], 2);
        check(&ps, &|t, ids| {
            let y = t.matmul_nt(ids.id("a"), ids.id("b"));
            let target = t.constant(Mat::zeros(3, 5));
            t.mean_sq(y, target)
        });
    }

    #[test]
    fn layer_norm_grads() {
        let ps = random_params(&[("x", 4, 6), ("g", 1, 6), ("b", 1, 6)], 3);
        check(&ps, &|t, ids| {
            let y = t.layer_norm(ids.id("x"), ids.id("g"), ids.id("b"));
            let target = t.constant(Mat::filled(4, 6, 0.1));
            t.mean_sq(y, target)
        });
    }

    #[test]
    fn softmax_attention_grads() {
        let ps = random_params(&[("q", 3, 4), ("k", 3, 4), ("v", 3, 4)], 4);
        check(&ps, &|t, ids| {
            let s = t.matmul_nt(ids.id("q"), ids.id("k"));
            let s = t.scale(s, 0.5);
            let a = t.softmax_rows(s);
            let o = t.matmul(a, ids.id("v"));
            let target = t.constant(Mat::zeros(3, 4));
            t.mean_sq(o, target)
        });
    }

    #[test]
    fn segment_and_shift_grads() {
        let ps = random_params(&[("x", 6, 3)], 5);
        let segs = vec![(0usize, 2usize), (2, 5), (5, 6)];
        let segs2 = segs.clone();
        check(&ps, &move |t, ids| {
            let s = t.shift_rows(ids.id("x"), 1);
            let m = t.segment_mean(s, &segs2);
            let b = t.segment_broadcast(m, &segs2, 6);
            let target = t.constant(Mat::filled(6, 3, -0.2));
            t.mean_sq(b, target)
        });
    }

    #[test]
    fn gather_softmax_ce_grads() {
        let ps = random_params(&[("table", 5, 4), ("w", 4, 3)], 6);
        check(&ps, &|t, ids| {
            let e = t.gather_rows(ids.id("table"), &[0, 2, 2, 4]);
            let logits = t.matmul(e, ids.id("w"));
            let ce = t.cross_entropy_sum(logits, &[(0, 1), (2, 0), (3, 2)]);
            t.scale(ce, 1.0 / 3.0)
        });
    }

    #[test]
    fn gelu_grads() {
        let ps = random_params(&[("x", 4, 5), ("w", 5, 2)], 9);
        check(&ps, &|t, ids| {
            let h = t.matmul(ids.id("x"), ids.id("w"));
            let h = t.gelu(h);
            let target = t.constant(Mat::filled(4, 2, 0.2));
            t.mean_sq(h, target)
        });
    }

    #[test]
    fn slice_concat_relu_grads() {
        let ps = random_params(&[("x", 3, 6)], 7);
        check(&ps, &|t, ids| {
            let a = t.slice_cols(ids.id("x"), 0, 3);
            let b = t.slice_cols(ids.id("x"), 3, 3);
            let r = t.relu(b);
            let c = t.concat_cols(&[a, r]);
            let target = t.constant(Mat::filled(3, 6, 0.05));
            t.mean_sq(c, target)
        });
    }

    #[test]
    fn cross_entropy_value_matches_uniform_at_zero_logits() {
        let mut tape = Tape::new();
        let logits = tape.constant(Mat::zeros(4, 7));
        let ce = tape.cross_entropy_sum(logits, &[(0, 0), (1, 3), (2, 6), (3, 2)]);
        let per_row = tape.value(ce).scalar() / 4.0;
        assert!((per_row - (7.0f64).ln()).abs() < 1e-12);
    }
}
