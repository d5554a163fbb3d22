//! Property tests for the tape primitives: every op's reverse-mode gradient
//! must match central finite differences over random shapes and seeds, and
//! softmax rows must sum to one.

use std::sync::Arc;

use proptest::prelude::*;
use rand::Rng;
use resact_core::autodiff::{grad_check, AttnMask, ParamGroup, ParamSet, Tape, Tensor, ValId};
use resact_core::rng::substream;

const REL_TOL: f64 = 1e-4;

fn random_params(rng: &mut impl Rng, shapes: &[(usize, usize)]) -> ParamSet {
    let mut ps = ParamSet::new();
    for (i, &(r, c)) in shapes.iter().enumerate() {
        let data: Vec<f64> = (0..r * c).map(|_| rng.gen_range(-1.5..1.5)).collect();
        ps.register(
            format!("p{i}"),
            Tensor::new(vec![r, c], data).unwrap().with_grad(),
            ParamGroup::Head,
            true,
        );
    }
    ps
}

/// Run grad_check on `loss(tape, param ids)` for a fresh random ParamSet.
fn check_op(
    seed: u64,
    shapes: &[(usize, usize)],
    op: impl Fn(&mut Tape, &[ValId]) -> ValId + Sync,
) {
    let mut rng = substream(seed, "op-prop");
    let ps = random_params(&mut rng, shapes);
    let report = grad_check(&ps, 1e-5, |ps: &ParamSet| {
        let mut tape = Tape::new();
        let bind = ps.bind(&mut tape);
        let out = op(&mut tape, &bind.ids);
        // Weight the output elements unevenly so gradients are not uniform.
        let (r, c) = tape.dims(out);
        let w = tape.constant(r, c, (0..r * c).map(|i| 0.3 + 0.1 * i as f64).collect());
        let weighted = tape.mul_elem(out, w);
        let loss = tape.mean_all(weighted);
        (tape, loss, bind)
    })
    .unwrap();
    assert!(
        report.max_rel_err <= REL_TOL,
        "seed {seed}: rel err {} at {}[{}]",
        report.max_rel_err,
        report.worst_param,
        report.worst_index
    );
}

#[test]
fn grad_matmul_family() {
    for seed in 0..6 {
        let mut rng = substream(seed, "dims");
        let (m, k, n) = (
            rng.gen_range(1..5usize),
            rng.gen_range(1..5usize),
            rng.gen_range(1..5usize),
        );
        check_op(seed, &[(m, k), (k, n)], |t, ids| t.matmul(ids[0], ids[1]));
        check_op(seed + 50, &[(m, k), (n, k)], |t, ids| {
            t.matmul_tb(ids[0], ids[1])
        });
    }
}

#[test]
fn grad_elementwise_family() {
    for seed in 0..6 {
        let mut rng = substream(seed, "dims-el");
        let (r, c) = (rng.gen_range(1..6usize), rng.gen_range(1..6usize));
        check_op(seed, &[(r, c), (r, c)], |t, ids| t.add(ids[0], ids[1]));
        check_op(seed + 10, &[(r, c), (r, c)], |t, ids| t.sub(ids[0], ids[1]));
        check_op(seed + 20, &[(r, c), (r, c)], |t, ids| {
            t.mul_elem(ids[0], ids[1])
        });
        check_op(seed + 30, &[(r, c)], |t, ids| t.scale(ids[0], -1.7));
        check_op(seed + 40, &[(r, c), (1, c)], |t, ids| {
            t.add_row(ids[0], ids[1])
        });
        check_op(seed + 50, &[(r, c)], |t, ids| t.sigmoid(ids[0]));
        check_op(seed + 60, &[(r, c)], |t, ids| t.gelu(ids[0]));
        check_op(seed + 70, &[(r, c)], |t, ids| {
            // keep away from the clamp knees where the derivative jumps
            let s = t.sigmoid(ids[0]);
            t.clamp(s, 1e-12, 1.0 - 1e-12)
        });
        check_op(seed + 80, &[(r, c)], |t, ids| {
            let s = t.sigmoid(ids[0]); // strictly positive input for ln
            t.ln(s)
        });
    }
}

#[test]
fn grad_shape_family() {
    for seed in 0..6 {
        let mut rng = substream(seed, "dims-sh");
        let (r, c) = (rng.gen_range(2..5usize), rng.gen_range(2..5usize));
        let times = rng.gen_range(1..4usize);
        check_op(seed, &[(r, c)], move |t, ids| t.tile_rows(ids[0], times));
        check_op(seed + 10, &[(r, c)], move |t, ids| {
            t.repeat_each_row(ids[0], times)
        });
        check_op(seed + 20, &[(r, c)], move |t, ids| {
            t.slice_rows(ids[0], 1, r - 1)
        });
        check_op(seed + 30, &[(r, c)], move |t, ids| {
            t.slice_cols(ids[0], 1, c - 1)
        });
        check_op(seed + 40, &[(r, c), (r, c)], |t, ids| {
            t.concat_rows(&[ids[0], ids[1]])
        });
        check_op(seed + 50, &[(r, c), (r, c)], |t, ids| {
            t.concat_cols(&[ids[0], ids[1]])
        });
        check_op(seed + 60, &[(r, c)], |t, ids| t.mean_rows(ids[0]));
    }
}

#[test]
fn grad_reductions_and_norms() {
    for seed in 0..6 {
        let mut rng = substream(seed, "dims-rn");
        let (r, c) = (rng.gen_range(1..6usize), rng.gen_range(2..8usize));
        check_op(seed, &[(r, c)], |t, ids| {
            let s = t.sum_all(ids[0]);
            // reduce to matrix form for the weighting step
            t.scale(s, 0.5)
        });
        check_op(seed + 10, &[(r, c)], |t, ids| t.mean_all(ids[0]));
        check_op(seed + 20, &[(r, c), (1, c), (1, c)], |t, ids| {
            t.layer_norm(ids[0], ids[1], ids[2])
        });
        check_op(seed + 30, &[(r, c)], |t, ids| t.softmax_rows(ids[0], None));
    }
}

#[test]
fn grad_masked_softmax_and_embedding() {
    for seed in 0..4 {
        let mut rng = substream(seed, "dims-me");
        let n = rng.gen_range(2..6usize);
        // Random mask that always allows the diagonal.
        let mut allow = vec![false; n * n];
        for i in 0..n {
            for j in 0..n {
                allow[i * n + j] = i == j || rng.gen_bool(0.6);
            }
        }
        let mask = Arc::new(AttnMask { n, allow });
        check_op(seed, &[(n, n)], move |t, ids| {
            t.softmax_rows(ids[0], Some(mask.clone()))
        });

        let vocab = rng.gen_range(3..8usize);
        let d = rng.gen_range(1..5usize);
        let indices: Arc<Vec<usize>> =
            Arc::new((0..6).map(|_| rng.gen_range(0..vocab)).collect());
        check_op(seed + 10, &[(vocab, d)], move |t, ids| {
            t.embed_rows(ids[0], indices.clone())
        });
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn softmax_rows_always_sum_to_one(
        rows in 1usize..6,
        cols in 1usize..8,
        seed in 0u64..1000,
    ) {
        let mut rng = substream(seed, "softmax-sum");
        let data: Vec<f64> = (0..rows * cols).map(|_| rng.gen_range(-30.0..30.0)).collect();
        let mut tape = Tape::new();
        let a = tape.constant(rows, cols, data);
        let s = tape.softmax_rows(a, None);
        for row in tape.value(s).chunks(cols) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn random_composite_graph_grad_checks(seed in 0u64..24) {
        let mut rng = substream(seed, "composite");
        let n = rng.gen_range(2..5usize);
        let d = rng.gen_range(2..5usize) * 2;
        let ps = random_params(&mut rng, &[(n, d), (d, d), (1, d), (1, d)]);
        let report = grad_check(&ps, 1e-5, |ps: &ParamSet| {
            let mut tape = Tape::new();
            let bind = ps.bind(&mut tape);
            let x = bind.ids[0];
            let w = bind.ids[1];
            let g = bind.ids[2];
            let b = bind.ids[3];
            let xn = tape.layer_norm(x, g, b);
            let h = tape.matmul_tb(xn, w);
            let a = tape.softmax_rows(h, None);
            let y = tape.matmul(a, w);
            let z = tape.gelu(y);
            let r = tape.add(z, x);
            let loss = tape.mean_all(r);
            (tape, loss, bind)
        }).unwrap();
        prop_assert!(report.max_rel_err <= REL_TOL, "rel err {}", report.max_rel_err);
    }
}
