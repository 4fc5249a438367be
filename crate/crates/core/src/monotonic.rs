//! Monotonic attention with infinite lookback.
//!
//! A decoder slot scans memory entries in order, stopping at entry j with
//! probability p[i,j]; training uses the expected alignment alpha computed
//! by a left-to-right recurrence instead of sampled stops. The lookback
//! distribution beta then spreads each stop's mass softly over the entries
//! at or before it. An exhaustive stop/advance path enumeration serves as
//! the ground-truth oracle for the recurrence on small instances.

use crate::attention::{scaled_dot_energy, AttentionParams};
use crate::error::{Error, Result};
use crate::numerics::{LookbackNumerator, Scalar, Tape, Tensor, TensorId};

/// Energies are clamped before the sigmoid and the resulting probabilities
/// are kept strictly inside (EPS_P, 1-EPS_P); the alignment recurrence
/// divides by p, so the quotient stays bounded.
pub const ENERGY_CLAMP: f64 = 15.0;
pub const EPS_P: f64 = 1e-6;

/// Selection probabilities p[i,j] = sigmoid(energy(y_i, h_j)) for queries
/// y [r, C] against memory h [H, C]; energies use the same scaled-dot form
/// as soft attention.
pub fn selection_probs<T: Scalar>(
    tape: &mut Tape<T>,
    y: TensorId,
    h: TensorId,
    params: &AttentionParams,
) -> Result<TensorId> {
    let q = tape.linear(y, params.w_q, None)?;
    let k = tape.linear(h, params.w_k, None)?;
    let e = scaled_dot_energy(tape, q, k)?;
    probs_from_energies(tape, e)
}

/// Clamped sigmoid of already-computed energies.
pub fn probs_from_energies<T: Scalar>(tape: &mut Tape<T>, e: TensorId) -> Result<TensorId> {
    let e = tape.clamp(e, T::from_f64(-ENERGY_CLAMP), T::from_f64(ENERGY_CLAMP))?;
    let p = tape.sigmoid(e)?;
    tape.clamp(p, T::from_f64(EPS_P), T::from_f64(1.0 - EPS_P))
}

/// Expected monotonic alignment for one (r, H) instance:
/// alpha[i,j] = p[i,j] * ((1-p[i,j-1]) * alpha[i,j-1]/p[i,j-1] + alpha[i-1,j])
/// with the row-0 predecessor concentrated on the first entry.
pub fn monotonic_alpha<T: Scalar>(tape: &mut Tape<T>, p: TensorId) -> Result<TensorId> {
    let s = tape.shape(p).to_vec();
    if s.len() != 2 {
        return Err(Error::domain("monotonic_alpha", format!("expected [r,H], got {:?}", s)));
    }
    let p3 = tape.reshape(p, vec![1, s[0], s[1]])?;
    let a3 = tape.monotonic_alpha(p3)?;
    tape.reshape(a3, s)
}

/// Lookback distribution for one (r, H) instance; `e` are the soft energies
/// for the same query/memory pair.
pub fn mail_beta<T: Scalar>(
    tape: &mut Tape<T>,
    alpha: TensorId,
    e: TensorId,
    variant: LookbackNumerator,
) -> Result<TensorId> {
    let s = tape.shape(alpha).to_vec();
    if s.len() != 2 {
        return Err(Error::domain("mail_beta", format!("expected [r,H], got {:?}", s)));
    }
    let a3 = tape.reshape(alpha, vec![1, s[0], s[1]])?;
    let e3 = tape.reshape(e, vec![1, s[0], s[1]])?;
    let b3 = tape.mail_beta(a3, e3, variant)?;
    tape.reshape(b3, s)
}

/// Context per ray slot: the beta-weighted combination of projected memory,
/// c_i = sum_j beta[i,j] V(h_j).
pub fn mail_context<T: Scalar>(
    tape: &mut Tape<T>,
    beta: TensorId,
    h: TensorId,
    params: &AttentionParams,
) -> Result<TensorId> {
    let v = tape.linear(h, params.w_v, None)?;
    tape.matmul(beta, v)
}

/// Reverse entry order along the height axis; converts lookback-below into
/// lookback-above when applied to column features before encoding.
pub fn flip_direction<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    height_axis: usize,
) -> Result<TensorId> {
    tape.flip(x, height_axis)
}

/// One monotonic attention head over batched scores [B, r, H] and values
/// [B, H, dh]: p from clamped sigmoid of the scores, alpha by the
/// recurrence, beta by infinite lookback over the same scores, context by
/// the beta-weighted value sum.
pub fn monotonic_head_context<T: Scalar>(
    tape: &mut Tape<T>,
    scores: TensorId,
    values: TensorId,
    numerator: LookbackNumerator,
) -> Result<TensorId> {
    let p = probs_from_energies(tape, scores)?;
    let alpha = tape.monotonic_alpha(p)?;
    let beta = tape.mail_beta(alpha, scores, numerator)?;
    tape.batmul(beta, values)
}

/// Exhaustive stop/advance enumeration: the marginal probability that memory
/// entry j is selected for ray slot i, over all monotonic paths. Mass that
/// advances past the last entry is dropped (and never revisited by later
/// slots). Exact but exponential; limited to H <= 8, r <= 6.
pub fn alpha_bruteforce_oracle(p: &Tensor<f64>) -> Result<Tensor<f64>> {
    let s = p.shape();
    if s.len() != 2 {
        return Err(Error::domain("alpha_bruteforce_oracle", format!("expected [r,H], got {:?}", s)));
    }
    let (r, h) = (s[0], s[1]);
    if h > 8 || r > 6 {
        return Err(Error::SizeLimit { h, r });
    }
    let mut alpha = Tensor::<f64>::zeros(vec![r, h]);
    // walk every stop sequence t_0 <= t_1 <= ... recursively
    fn recurse(
        p: &Tensor<f64>,
        alpha: &mut Tensor<f64>,
        row: usize,
        start: usize,
        prob: f64,
        r: usize,
        h: usize,
    ) {
        let mut advance = prob;
        for j in start..h {
            let stop = advance * p.at(&[row, j]);
            alpha.data_mut()[row * h + j] += stop;
            if row + 1 < r {
                recurse(p, alpha, row + 1, j, stop, r, h);
            }
            advance *= 1.0 - p.at(&[row, j]);
        }
        // any remaining mass has run off the end of the memory
    }
    recurse(p, &mut alpha, 0, 0, 1.0, r, h);
    Ok(alpha)
}

/// Plain-value alpha recurrence (no tape), for tests and the oracle suite.
pub fn alpha_recurrence_values(p: &Tensor<f64>) -> Tensor<f64> {
    let (r, h) = (p.shape()[0], p.shape()[1]);
    let mut alpha = Tensor::<f64>::zeros(vec![r, h]);
    for i in 0..r {
        for j in 0..h {
            let pij = p.at(&[i, j]);
            let carry = if j > 0 {
                let pp = p.at(&[i, j - 1]);
                (1.0 - pp) * alpha.at(&[i, j - 1]) / pp
            } else {
                0.0
            };
            let above = if i > 0 {
                alpha.at(&[i - 1, j])
            } else if j == 0 {
                1.0
            } else {
                0.0
            };
            alpha.set(&[i, j], pij * (carry + above));
        }
    }
    alpha
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn t64(shape: &[usize], vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape.to_vec(), vals).unwrap()
    }

    #[test]
    fn zero_energies_give_half_probabilities() {
        let mut tape = Tape::new();
        let e = tape.leaf(&Tensor::<f64>::zeros(vec![2, 3]));
        let p = probs_from_energies(&mut tape, e).unwrap();
        assert!(tape.value(p).data().iter().all(|&v| (v - 0.5).abs() < 1e-12));
    }

    #[test]
    fn ln3_energy_gives_three_quarters() {
        let mut tape = Tape::new();
        let e = tape.leaf(&t64(&[1, 1], &[3.0f64.ln()]));
        let p = probs_from_energies(&mut tape, e).unwrap();
        assert!((tape.value(p).data()[0] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn probabilities_are_clamped_strictly_inside_unit_interval() {
        let mut tape = Tape::new();
        let e = tape.leaf(&t64(&[1, 2], &[1e6, -1e6]));
        let p = probs_from_energies(&mut tape, e).unwrap();
        let d = tape.value(p).data();
        assert!(d[0] <= 1.0 - EPS_P && d[0] > 0.5);
        assert!(d[1] >= EPS_P && d[1] < 0.5);
    }

    #[test]
    fn certain_selection_stops_at_first_entry_every_row() {
        let p = Tensor::<f64>::filled(vec![3, 4], 1.0);
        let alpha = alpha_recurrence_values(&p);
        for i in 0..3 {
            assert_eq!(alpha.at(&[i, 0]), 1.0);
            for j in 1..4 {
                assert_eq!(alpha.at(&[i, j]), 0.0);
            }
        }
        let oracle = alpha_bruteforce_oracle(&p).unwrap();
        assert_eq!(oracle.data(), alpha.data());
    }

    #[test]
    fn half_probabilities_first_row_hand_values() {
        // p = 0.5 everywhere, H = 2: stop at 1 with 0.5, at 2 with 0.25,
        // 0.25 of the mass advances past the end.
        let p = Tensor::<f64>::filled(vec![1, 2], 0.5);
        let alpha = alpha_recurrence_values(&p);
        assert!((alpha.at(&[0, 0]) - 0.5).abs() < 1e-12);
        assert!((alpha.at(&[0, 1]) - 0.25).abs() < 1e-12);
        let oracle = alpha_bruteforce_oracle(&p).unwrap();
        for (a, b) in alpha.data().iter().zip(oracle.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn recurrence_matches_path_enumeration_on_random_instances() {
        let mut rng = ChaCha12Rng::seed_from_u64(17);
        for _ in 0..25 {
            let r = rng.gen_range(1..=4usize);
            let h = rng.gen_range(1..=6usize);
            let p = Tensor::new(
                vec![r, h],
                (0..r * h).map(|_| rng.gen_range(0.1..0.9)).collect(),
            )
            .unwrap();
            let rec = alpha_recurrence_values(&p);
            let oracle = alpha_bruteforce_oracle(&p).unwrap();
            for (a, b) in rec.data().iter().zip(oracle.data()) {
                assert!((a - b).abs() <= 1e-9);
            }
            // row mass never exceeds one
            for i in 0..r {
                let mass: f64 = (0..h).map(|j| oracle.at(&[i, j])).sum();
                assert!(mass <= 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn tape_alpha_agrees_with_plain_recurrence() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let p = Tensor::new(vec![3, 5], (0..15).map(|_| rng.gen_range(0.1..0.9)).collect()).unwrap();
        let mut tape = Tape::new();
        let pid = tape.leaf(&p);
        let a = monotonic_alpha(&mut tape, pid).unwrap();
        let plain = alpha_recurrence_values(&p);
        for (x, y) in tape.value(a).data().iter().zip(plain.data()) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn oracle_rejects_oversized_instances() {
        let p = Tensor::<f64>::filled(vec![7, 4], 0.5);
        assert!(matches!(
            alpha_bruteforce_oracle(&p),
            Err(Error::SizeLimit { .. })
        ));
        let p = Tensor::<f64>::filled(vec![2, 9], 0.5);
        assert!(alpha_bruteforce_oracle(&p).is_err());
    }

    #[test]
    fn lookback_from_first_entry_is_a_delta() {
        // alpha concentrated on j=0 forces beta to the same delta
        let mut tape = Tape::new();
        let alpha = tape.leaf(&t64(&[1, 3], &[1.0, 0.0, 0.0]));
        let e = tape.leaf(&t64(&[1, 3], &[0.3, -1.0, 2.0]));
        let beta = mail_beta(&mut tape, alpha, e, LookbackNumerator::SlotJ).unwrap();
        let d = tape.value(beta).data();
        assert!((d[0] - 1.0).abs() < 1e-12);
        assert!(d[1].abs() < 1e-12 && d[2].abs() < 1e-12);
    }

    #[test]
    fn equal_energies_spread_uniformly_up_to_the_stop() {
        // alpha delta at t (0-based index 2) with equal energies: beta is
        // uniform 1/3 on the first three entries, zero beyond
        let mut tape = Tape::new();
        let alpha = tape.leaf(&t64(&[1, 4], &[0.0, 0.0, 1.0, 0.0]));
        let e = tape.leaf(&Tensor::<f64>::zeros(vec![1, 4]));
        let beta = mail_beta(&mut tape, alpha, e, LookbackNumerator::SlotJ).unwrap();
        let d = tape.value(beta).data();
        for j in 0..3 {
            assert!((d[j] - 1.0 / 3.0).abs() < 1e-12);
        }
        assert!(d[3].abs() < 1e-12);
    }

    #[test]
    fn beta_mass_equals_alpha_mass_slot_variant() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        for _ in 0..20 {
            let r = rng.gen_range(1..=4usize);
            let h = rng.gen_range(1..=6usize);
            let p = Tensor::new(vec![r, h], (0..r * h).map(|_| rng.gen_range(0.1..0.9)).collect()).unwrap();
            let e = Tensor::new(vec![r, h], (0..r * h).map(|_| rng.gen_range(-2.0..2.0)).collect()).unwrap();
            let mut tape = Tape::new();
            let pid = tape.leaf(&p);
            let eid = tape.leaf(&e);
            let a = monotonic_alpha(&mut tape, pid).unwrap();
            let b = mail_beta(&mut tape, a, eid, LookbackNumerator::SlotJ).unwrap();
            for i in 0..r {
                let am: f64 = tape.value(a).data()[i * h..(i + 1) * h].iter().sum();
                let bm: f64 = tape.value(b).data()[i * h..(i + 1) * h].iter().sum();
                assert!((am - bm).abs() <= 1e-9, "row {i}: {am} vs {bm}");
            }
        }
    }

    #[test]
    fn beta_support_never_extends_past_the_stop_mass() {
        // alpha zero at and beyond k implies beta zero at k and beyond
        let mut tape = Tape::new();
        let alpha = tape.leaf(&t64(&[1, 4], &[0.3, 0.5, 0.0, 0.0]));
        let e = tape.leaf(&t64(&[1, 4], &[0.1, 0.2, 0.3, 0.4]));
        let beta = mail_beta(&mut tape, alpha, e, LookbackNumerator::SlotJ).unwrap();
        let d = tape.value(beta).data();
        assert!(d[0] > 0.0 && d[1] > 0.0);
        assert!(d[2].abs() < 1e-12 && d[3].abs() < 1e-12);
    }

    #[test]
    fn mail_context_with_one_hot_beta_selects_projected_value() {
        let mut rng = ChaCha12Rng::seed_from_u64(37);
        let h = Tensor::new(vec![3, 2], (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let wv = Tensor::new(vec![2, 2], (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut tape = Tape::new();
        let hid = tape.leaf(&h);
        let wvid = tape.constant(wv.clone());
        let params = AttentionParams::new(&tape, wvid, wvid, wvid, 1).unwrap();
        let beta = tape.leaf(&t64(&[2, 3], &[0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
        let ctx = mail_context(&mut tape, beta, hid, &params).unwrap();
        // slot 0 selects entry 1, slot 1 selects entry 2
        for (slot, entry) in [(0usize, 1usize), (1, 2)] {
            for j in 0..2 {
                let mut expect = 0.0;
                for p in 0..2 {
                    expect += h.at(&[entry, p]) * wv.at(&[p, j]);
                }
                assert!((tape.value(ctx).data()[slot * 2 + j] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn uniform_beta_averages_projected_values() {
        let h = t64(&[2, 2], &[1.0, 3.0, 5.0, 7.0]);
        let eye = t64(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let mut tape = Tape::new();
        let hid = tape.leaf(&h);
        let wvid = tape.constant(eye);
        let params = AttentionParams::new(&tape, wvid, wvid, wvid, 1).unwrap();
        let beta = tape.leaf(&t64(&[1, 2], &[0.5, 0.5]));
        let ctx = mail_context(&mut tape, beta, hid, &params).unwrap();
        assert_eq!(tape.value(ctx).data(), &[3.0, 5.0]);
    }

    #[test]
    fn flip_roundtrip_and_single_entry() {
        let mut tape = Tape::new();
        let x = tape.leaf(&t64(&[3, 2], &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0]));
        let f1 = flip_direction(&mut tape, x, 0).unwrap();
        let f2 = flip_direction(&mut tape, f1, 0).unwrap();
        assert_eq!(tape.value(f2).data(), tape.value(x).data());
        let single = tape.leaf(&t64(&[1, 2], &[1.0, 2.0]));
        let fs = flip_direction(&mut tape, single, 0).unwrap();
        assert_eq!(tape.value(fs).data(), &[1.0, 2.0]);
    }

    #[test]
    fn expected_stop_index_is_nondecreasing_for_row_constant_probs() {
        // on the oracle's exact alignments, with row-constant p, the
        // (renormalized) expected stop index grows with the slot index
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        for _ in 0..10 {
            let r = 4;
            let h = 6;
            let pv: f64 = rng.gen_range(0.2..0.8);
            let p = Tensor::<f64>::filled(vec![r, h], pv);
            let oracle = alpha_bruteforce_oracle(&p).unwrap();
            let mut prev = 0.0;
            for i in 0..r {
                let mass: f64 = (0..h).map(|j| oracle.at(&[i, j])).sum();
                let mean: f64 =
                    (0..h).map(|j| j as f64 * oracle.at(&[i, j])).sum::<f64>() / mass;
                assert!(mean >= prev - 1e-12, "slot {i}: {mean} < {prev}");
                prev = mean;
            }
        }
    }
}
