use crate::autodiff::{Tape, ValId};
use crate::data::{Activity, LabelVector, NUM_CLASSES};
use crate::error::{CoreError, Result};

/// Probabilities are clamped this far from 0 and 1 before the logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// Weighted binary cross-entropy, averaged over batch and classes:
/// `-(w_plus * y * log(p) + (1 - y) * log(1 - p))`.
pub fn wbce_loss(
    y_hat: &[[f64; NUM_CLASSES]],
    y: &[[f64; NUM_CLASSES]],
    w_plus: &[f64; NUM_CLASSES],
) -> Result<f64> {
    if y_hat.len() != y.len() || y_hat.is_empty() {
        return Err(CoreError::Dimension(format!(
            "prediction batch {} vs target batch {}",
            y_hat.len(),
            y.len()
        )));
    }
    let mut total = 0.0;
    for (p_row, y_row) in y_hat.iter().zip(y) {
        for c in 0..NUM_CLASSES {
            let p = p_row[c].clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            total -= w_plus[c] * y_row[c] * p.ln() + (1.0 - y_row[c]) * (1.0 - p).ln();
        }
    }
    Ok(total / (y_hat.len() * NUM_CLASSES) as f64)
}

/// Tape version of the same loss over a `[batch x 4]` probability node.
pub fn wbce_loss_on_tape(
    tape: &mut Tape,
    probs: ValId,
    targets: &[[f64; NUM_CLASSES]],
    w_plus: &[f64; NUM_CLASSES],
) -> ValId {
    let (b, c) = tape.dims(probs);
    assert_eq!(c, NUM_CLASSES);
    assert_eq!(b, targets.len());
    let mut wy = Vec::with_capacity(b * c);
    let mut one_minus_y = Vec::with_capacity(b * c);
    for row in targets {
        for (cls, &y) in row.iter().enumerate() {
            wy.push(w_plus[cls] * y);
            one_minus_y.push(1.0 - y);
        }
    }
    let wy = tape.constant(b, c, wy);
    let omy = tape.constant(b, c, one_minus_y);
    let ones = tape.constant(b, c, vec![1.0; b * c]);

    let p = tape.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP);
    let omp = tape.sub(ones, p);
    let lp = tape.ln(p);
    let lq = tape.ln(omp);
    let pos = tape.mul_elem(wy, lp);
    let neg = tape.mul_elem(omy, lq);
    let sum = tape.add(pos, neg);
    let mean = tape.mean_all(sum);
    tape.scale(mean, -1.0)
}

/// Positive-class weights from training labels:
/// `negatives / positives` per class, clamped to `[1, 20]`. A class with no
/// positive example cannot be weighted and is a configuration error.
pub fn compute_pos_weights(labels: &[LabelVector]) -> Result<[f64; NUM_CLASSES]> {
    let mut pos = [0usize; NUM_CLASSES];
    for y in labels {
        for (c, flag) in y.flags().iter().enumerate() {
            if *flag {
                pos[c] += 1;
            }
        }
    }
    let mut w = [1.0; NUM_CLASSES];
    for c in 0..NUM_CLASSES {
        if pos[c] == 0 {
            return Err(CoreError::Config(format!(
                "class {:?} has no positive examples in the training set",
                Activity::ALL[c].name()
            )));
        }
        let neg = labels.len() - pos[c];
        w[c] = (neg as f64 / pos[c] as f64).clamp(1.0, 20.0);
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{grad_check, ParamGroup, ParamSet, Tensor};

    #[test]
    fn perfect_prediction_has_near_zero_loss() {
        let loss = wbce_loss(
            &[[1.0 - 1e-13, 1e-13, 1e-13, 1.0 - 1e-13]],
            &[[1.0, 0.0, 0.0, 1.0]],
            &[1.0; 4],
        )
        .unwrap();
        assert!(loss >= 0.0 && loss < 1e-10, "loss {loss}");
    }

    #[test]
    fn half_probability_fixtures() {
        // y = 0, p = 0.5: element loss is -ln(0.5) regardless of w_plus.
        let l = wbce_loss(&[[0.5, 0.5, 0.5, 0.5]], &[[0.0; 4]], &[3.0, 1.0, 7.0, 2.0]).unwrap();
        assert!((l - 0.5f64.ln().abs()).abs() < 1e-12);
        // y = 1, p = 0.5, w_plus = 3: element loss is 3 * 0.6931.
        let l = wbce_loss(&[[0.5; 4]], &[[1.0; 4]], &[3.0; 4]).unwrap();
        assert!((l - 3.0 * 0.693_147_180_559_945_3).abs() < 1e-12);
    }

    #[test]
    fn unit_weights_reduce_to_plain_bce() {
        // Independent plain BCE as the oracle.
        let probs = [[0.9, 0.2, 0.7, 0.4], [0.1, 0.8, 0.6, 0.5]];
        let ys = [[1.0, 0.0, 1.0, 0.0], [0.0, 1.0, 0.0, 1.0]];
        let mut oracle = 0.0;
        for (p_row, y_row) in probs.iter().zip(&ys) {
            for (p, y) in p_row.iter().zip(y_row) {
                oracle -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
            }
        }
        oracle /= 8.0;
        let got = wbce_loss(&probs, &ys, &[1.0; 4]).unwrap();
        assert!((got - oracle).abs() < 1e-14);
    }

    #[test]
    fn loss_is_nonnegative_on_random_inputs() {
        use rand::Rng;
        let mut rng = crate::rng::substream(3, "loss-range");
        for _ in 0..500 {
            let p = [(); 4].map(|_| rng.gen_range(0.001..0.999));
            let y = [(); 4].map(|_| f64::from(rng.gen_bool(0.5)));
            let w = [(); 4].map(|_| rng.gen_range(1.0..20.0));
            assert!(wbce_loss(&[p], &[y], &w).unwrap() >= 0.0);
        }
    }

    #[test]
    fn gradient_wrt_logits_matches_finite_differences() {
        let mut ps = ParamSet::new();
        ps.register(
            "logits",
            Tensor::new(vec![2, 4], vec![0.3, -0.7, 1.2, 0.0, -2.0, 0.4, 0.9, -0.1])
                .unwrap()
                .with_grad(),
            ParamGroup::Head,
            false,
        );
        let targets = [[1.0, 0.0, 0.0, 1.0], [0.0, 1.0, 1.0, 0.0]];
        let w_plus = [2.0, 1.0, 4.0, 1.5];
        let report = grad_check(&ps, 1e-5, |ps: &ParamSet| {
            let mut tape = Tape::new();
            let bind = ps.bind(&mut tape);
            let probs = tape.sigmoid(bind.id(0));
            let loss = wbce_loss_on_tape(&mut tape, probs, &targets, &w_plus);
            (tape, loss, bind)
        })
        .unwrap();
        assert!(report.max_rel_err <= 1e-6, "rel err {}", report.max_rel_err);
    }

    #[test]
    fn pos_weights_ratio_and_clamp() {
        let mk = |flags: [bool; 4]| LabelVector::new(flags).unwrap();
        // class 0: 50/50 -> 1.0 ; class 1: 10/90 -> 9.0 ; class 3 always on
        let mut labels = Vec::new();
        for i in 0..100 {
            labels.push(mk([i < 50, i < 10, i < 5, true]));
        }
        // baby_on_table has zero negatives: ratio 0 clamps up to 1.
        let w = compute_pos_weights(&labels).unwrap();
        assert_eq!(w[0], 1.0);
        assert_eq!(w[1], 9.0);
        assert_eq!(w[2], 19.0);
        assert_eq!(w[3], 1.0);
    }

    #[test]
    fn extreme_imbalance_clamps_to_twenty() {
        let mut labels = vec![LabelVector::new([true, true, true, true]).unwrap()];
        for _ in 0..999 {
            labels.push(LabelVector::new([false, false, false, true]).unwrap());
        }
        let w = compute_pos_weights(&labels).unwrap();
        assert_eq!(w[0], 20.0);
    }

    #[test]
    fn zero_positives_is_a_configuration_error() {
        let labels = vec![LabelVector::new([true, false, false, true]).unwrap()];
        let err = compute_pos_weights(&labels).unwrap_err();
        assert!(err.to_string().contains("stimulation"), "{err}");
    }
}
