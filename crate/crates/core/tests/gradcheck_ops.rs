//! Finite-difference audits of every differentiable operation class.
//!
//! Each case builds a scalar objective from random inputs in [-1, 1] at
//! 64-bit precision, runs the reverse pass, and compares every input
//! gradient against central differences with h = 1e-5.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use raymap_core::numerics::{finite_diff_grad, max_rel_error, BlendTable, LookbackNumerator, Tape, TensorId};
use raymap_core::{Result, Tensor};

const H_STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-3;

fn rand_tensor(rng: &mut ChaCha12Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Check d(build)/d(input_i) against finite differences for every input.
fn check_grads(
    inputs: &[Tensor<f64>],
    build: impl Fn(&mut Tape<f64>, &[TensorId]) -> Result<TensorId>,
) {
    let mut tape = Tape::new();
    let ids: Vec<TensorId> = inputs
        .iter()
        .map(|t| {
            let mut t = t.clone();
            t.requires_grad = true;
            tape.leaf(&t)
        })
        .collect();
    let out = build(&mut tape, &ids).expect("forward");
    tape.backward(out).expect("backward");

    for (i, x) in inputs.iter().enumerate() {
        let analytic = tape.grad(ids[i]).expect("grad populated").to_vec();
        let numeric = finite_diff_grad(
            |probe| {
                let mut t2 = Tape::new();
                let ids2: Vec<TensorId> = inputs
                    .iter()
                    .enumerate()
                    .map(|(j, t)| t2.leaf(if j == i { probe } else { t }))
                    .collect();
                let o = build(&mut t2, &ids2)?;
                t2.value(o).item()
            },
            x,
            H_STEP,
        )
        .expect("finite differences");
        let err = max_rel_error(&analytic, numeric.data(), FLOOR);
        assert!(
            err <= TOL,
            "input {} gradient mismatch: max rel err {:.3e}",
            i,
            err
        );
    }
}

/// Mildly nonlinear scalar readout so gradient errors cannot cancel.
fn readout(tape: &mut Tape<f64>, x: TensorId) -> Result<TensorId> {
    let sq = tape.mul(x, x)?;
    let s = tape.sum(sq)?;
    let lin = tape.sum(x)?;
    let lin = tape.scale(lin, 0.25)?;
    tape.add(s, lin)
}

#[test]
fn grad_linear() {
    let mut rng = ChaCha12Rng::seed_from_u64(1);
    let x = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[4, 5], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[5], -1.0, 1.0);
    check_grads(&[x, w, b], |t, ids| {
        let y = t.linear(ids[0], ids[1], Some(ids[2]))?;
        readout(t, y)
    });
}

#[test]
fn grad_batmul_both_orientations() {
    let mut rng = ChaCha12Rng::seed_from_u64(2);
    let a = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[2, 4, 3], -1.0, 1.0);
    check_grads(&[a.clone(), b.clone()], |t, ids| {
        let y = t.batmul(ids[0], ids[1])?;
        readout(t, y)
    });
    let bt = rand_tensor(&mut rng, &[2, 5, 4], -1.0, 1.0);
    check_grads(&[a, bt], |t, ids| {
        let y = t.batmul_nt(ids[0], ids[1])?;
        readout(t, y)
    });
}

#[test]
fn grad_softmax_all_axes() {
    let mut rng = ChaCha12Rng::seed_from_u64(3);
    let x = rand_tensor(&mut rng, &[3, 4, 2], -1.0, 1.0);
    for axis in 0..3 {
        check_grads(&[x.clone()], |t, ids| {
            let y = t.softmax(ids[0], axis)?;
            readout(t, y)
        });
    }
}

#[test]
fn grad_pointwise_unary() {
    let mut rng = ChaCha12Rng::seed_from_u64(4);
    let x = rand_tensor(&mut rng, &[2, 6], -1.0, 1.0);
    check_grads(&[x.clone()], |t, ids| {
        let y = t.sigmoid(ids[0])?;
        readout(t, y)
    });
    check_grads(&[x.clone()], |t, ids| {
        let y = t.exp(ids[0])?;
        readout(t, y)
    });
    // keep relu inputs away from the kink
    let xr = x.map(|v| if v.abs() < 0.05 { v + 0.1 } else { v });
    check_grads(&[xr], |t, ids| {
        let y = t.relu(ids[0])?;
        readout(t, y)
    });
    check_grads(&[x], |t, ids| {
        let y = t.clamp(ids[0], -0.9, 0.9)?;
        readout(t, y)
    });
}

#[test]
fn grad_binary_with_broadcast() {
    let mut rng = ChaCha12Rng::seed_from_u64(5);
    let a = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[3, 4], -1.0, 1.0);
    let suffix = rand_tensor(&mut rng, &[4], -1.0, 1.0);
    let scalar = rand_tensor(&mut rng, &[1], 0.5, 1.5);
    for op in 0..3 {
        check_grads(&[a.clone(), b.clone()], move |t, ids| {
            let y = match op {
                0 => t.add(ids[0], ids[1])?,
                1 => t.sub(ids[0], ids[1])?,
                _ => t.mul(ids[0], ids[1])?,
            };
            readout(t, y)
        });
    }
    // div with denominator bounded away from zero
    let denom = rand_tensor(&mut rng, &[3, 4], 0.5, 1.5);
    check_grads(&[a.clone(), denom], |t, ids| {
        let y = t.div(ids[0], ids[1])?;
        readout(t, y)
    });
    check_grads(&[a.clone(), suffix], |t, ids| {
        let y = t.mul(ids[0], ids[1])?;
        readout(t, y)
    });
    check_grads(&[a, scalar], |t, ids| {
        let y = t.div(ids[0], ids[1])?;
        readout(t, y)
    });
}

#[test]
fn grad_scale_add_scalar() {
    let mut rng = ChaCha12Rng::seed_from_u64(6);
    let x = rand_tensor(&mut rng, &[5], -1.0, 1.0);
    check_grads(&[x], |t, ids| {
        let y = t.scale(ids[0], -1.75)?;
        let y = t.add_scalar(y, 0.5)?;
        readout(t, y)
    });
}

#[test]
fn grad_shape_ops() {
    let mut rng = ChaCha12Rng::seed_from_u64(7);
    let x = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    check_grads(&[x.clone()], |t, ids| {
        let y = t.reshape(ids[0], vec![6, 4])?;
        let y = t.permute(y, &[1, 0])?;
        let y = t.index0(y, 2)?;
        readout(t, y)
    });
    check_grads(&[x.clone()], |t, ids| {
        let y = t.repeat0(ids[0], 3)?;
        readout(t, y)
    });
    check_grads(&[x.clone(), x.clone()], |t, ids| {
        let y = t.concat(&[ids[0], ids[1]], 1)?;
        readout(t, y)
    });
    check_grads(&[x], |t, ids| {
        let y = t.flip(ids[0], 1)?;
        readout(t, y)
    });
}

#[test]
fn grad_conv2d_and_upsample() {
    let mut rng = ChaCha12Rng::seed_from_u64(8);
    let x = rand_tensor(&mut rng, &[2, 6, 6], -1.0, 1.0);
    let w = rand_tensor(&mut rng, &[3, 2, 3, 3], -1.0, 1.0);
    let b = rand_tensor(&mut rng, &[3], -1.0, 1.0);
    // stride 1 with padding
    check_grads(&[x.clone(), w.clone(), b.clone()], |t, ids| {
        let y = t.conv2d(ids[0], ids[1], Some(ids[2]), 1, 1)?;
        readout(t, y)
    });
    // stride 2
    check_grads(&[x.clone(), w, b], |t, ids| {
        let y = t.conv2d(ids[0], ids[1], Some(ids[2]), 2, 1)?;
        readout(t, y)
    });
    check_grads(&[x], |t, ids| {
        let y = t.upsample2(ids[0])?;
        readout(t, y)
    });
}

#[test]
fn grad_layer_norm() {
    let mut rng = ChaCha12Rng::seed_from_u64(9);
    let x = rand_tensor(&mut rng, &[4, 6], -1.0, 1.0);
    let gamma = rand_tensor(&mut rng, &[6], 0.5, 1.5);
    let beta = rand_tensor(&mut rng, &[6], -0.5, 0.5);
    check_grads(&[x, gamma, beta], |t, ids| {
        let y = t.layer_norm(ids[0], ids[1], ids[2])?;
        readout(t, y)
    });
}

#[test]
fn grad_monotonic_alpha() {
    let mut rng = ChaCha12Rng::seed_from_u64(10);
    // selection probabilities strictly inside (0,1)
    let p = rand_tensor(&mut rng, &[2, 3, 5], 0.1, 0.9);
    check_grads(&[p], |t, ids| {
        let a = t.monotonic_alpha(ids[0])?;
        readout(t, a)
    });
}

#[test]
fn grad_mail_beta_both_variants() {
    let mut rng = ChaCha12Rng::seed_from_u64(11);
    let e_sel = rand_tensor(&mut rng, &[2, 3, 5], -1.0, 1.0);
    let e_soft = rand_tensor(&mut rng, &[2, 3, 5], -1.0, 1.0);
    for variant in [LookbackNumerator::SlotJ, LookbackNumerator::StopK] {
        check_grads(&[e_sel.clone(), e_soft.clone()], move |t, ids| {
            let p = t.sigmoid(ids[0])?;
            let a = t.monotonic_alpha(p)?;
            let beta = t.mail_beta(a, ids[1], variant)?;
            readout(t, beta)
        });
    }
}

#[test]
fn grad_gather_blend() {
    let mut rng = ChaCha12Rng::seed_from_u64(12);
    let x = rand_tensor(&mut rng, &[2, 3, 4], -1.0, 1.0);
    let mut taps = Vec::new();
    for cell in 0..6 {
        let i0 = (cell * 2) % 12;
        let i1 = (cell * 3 + 1) % 12;
        taps.push([
            (i0 as u32, 0.4),
            (i1 as u32, 0.35),
            (((i0 + 5) % 12) as u32, 0.25),
            (0u32, 0.0),
        ]);
    }
    let table = Arc::new(BlendTable {
        taps,
        plane: 12,
        out_shape: (2, 3),
    });
    check_grads(&[x], move |t, ids| {
        let y = t.gather_blend(ids[0], table.clone())?;
        readout(t, y)
    });
}
