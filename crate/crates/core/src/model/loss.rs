//! Masked multi-class Dice loss:
//! L = 1 - (1/K) sum_k 2 * sum(pred_k * gt_k) / (sum(pred_k + gt_k) + eps),
//! with masked-out cells excluded from every sum. The total training loss
//! is the plain sum of per-scale Dice losses.

use crate::error::Result;
use crate::numerics::{Scalar, Tape, TensorId};

pub const DICE_EPS: f64 = 1e-5;

/// probs [K, z, x] on the tape; gt [K, z, x] and mask [z, x] as constants.
pub fn dice_loss<T: Scalar>(
    tape: &mut Tape<T>,
    probs: TensorId,
    gt: TensorId,
    mask: TensorId,
) -> Result<TensorId> {
    let k = tape.shape(probs)[0];
    let mut acc: Option<TensorId> = None;
    for class in 0..k {
        let p = tape.index0(probs, class)?;
        let g = tape.index0(gt, class)?;
        let pm = tape.mul(p, mask)?;
        let gm = tape.mul(g, mask)?;
        let prod = tape.mul(pm, gm)?;
        let inter = tape.sum(prod)?;
        let psum = tape.sum(pm)?;
        let gsum = tape.sum(gm)?;
        let denom = tape.add(psum, gsum)?;
        let denom = tape.add_scalar(denom, T::from_f64(DICE_EPS))?;
        let two_inter = tape.scale(inter, T::from_f64(2.0))?;
        let dice = tape.div(two_inter, denom)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, dice)?,
            None => dice,
        });
    }
    let mean = tape.scale(acc.expect("at least one class"), T::from_f64(1.0 / k as f64))?;
    let neg = tape.scale(mean, T::from_f64(-1.0))?;
    tape.add_scalar(neg, T::ONE)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tensor;

    fn run(probs: &[f64], gt: &[f64], mask: &[f64], k: usize, n: usize) -> f64 {
        let mut tape = Tape::new();
        let p = tape.leaf(&Tensor::from_f64(vec![k, 1, n], probs).unwrap());
        let g = tape.constant(Tensor::from_f64(vec![k, 1, n], gt).unwrap());
        let m = tape.constant(Tensor::from_f64(vec![1, n], mask).unwrap());
        let l = dice_loss(&mut tape, p, g, m).unwrap();
        tape.value(l).item().unwrap()
    }

    #[test]
    fn perfect_prediction_scores_zero() {
        let y = [1.0, 0.0, 1.0, 1.0];
        let l = run(&y, &y, &[1.0; 4], 1, 4);
        assert!(l.abs() < 1e-5, "{l}");
    }

    #[test]
    fn disjoint_prediction_scores_one() {
        let y = [1.0, 1.0, 0.0, 0.0];
        let inv = [0.0, 0.0, 1.0, 1.0];
        let l = run(&inv, &y, &[1.0; 4], 1, 4);
        assert!((l - 1.0).abs() < 1e-5, "{l}");
    }

    #[test]
    fn uniform_half_prediction_hand_value() {
        // K=1, y = [1,1,0,0], p = 0.5 everywhere: L = 1 - 2*1.0/4.0 = 0.5
        let y = [1.0, 1.0, 0.0, 0.0];
        let p = [0.5; 4];
        let l = run(&p, &y, &[1.0; 4], 1, 4);
        assert!((l - 0.5).abs() < 1e-5, "{l}");
    }

    #[test]
    fn masked_cells_are_excluded_from_both_sums() {
        // wrong predictions behind the mask must not move the loss
        let y = [1.0, 0.0, 1.0, 0.0];
        let good = [1.0, 0.0, 1.0, 0.0];
        let bad_outside = [1.0, 0.0, 0.0, 1.0];
        let mask = [1.0, 1.0, 0.0, 0.0];
        let l1 = run(&good, &y, &mask, 1, 4);
        let l2 = run(&bad_outside, &y, &mask, 1, 4);
        assert!((l1 - l2).abs() < 1e-12);
    }

    #[test]
    fn mean_over_classes() {
        // class 0 perfect, class 1 disjoint -> L = 1 - (1 + 0)/2 = 0.5
        let probs = [1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 1.0];
        let gt = [1.0, 0.0, 0.0, 1.0, 1.0, 1.0, 0.0, 0.0];
        let l = run(&probs, &gt, &[1.0; 4], 2, 4);
        assert!((l - 0.5).abs() < 1e-4, "{l}");
    }
}
