//! Training loop: per-sample forward/backward on fresh tapes, multi-scale
//! Dice loss, batched adaptive-moment updates with a deterministic
//! fixed-order gradient reduction.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::attention::Fwd;
use crate::config::TrainParams;
use crate::error::{Error, Result};
use crate::model::loss::dice_loss;
use crate::model::{any_pool2, Geometry, Model};
use crate::numerics::{Scalar, Tape, Tensor};
use crate::params::AdamState;
use crate::synthdata::Sample;

/// Ground truth and masks resolved to the model's output scales.
struct Prepared<T: Scalar> {
    gt: Vec<Tensor<T>>,
    masks: Vec<Tensor<T>>,
}

fn prepare<T: Scalar>(model: &Model<T>, geom: &Geometry<T>, sample: &Sample<T>) -> Prepared<T> {
    let k = model.cfg.classes;
    let gt_full = sample.gt.clone();
    let (z, x) = (model.cfg.bev_z, model.cfg.bev_x);
    // class-wise 2x2 any-pooling to the half-resolution scale
    let mut gt_half = Tensor::<T>::zeros(vec![k, z / 2, x / 2]);
    for c in 0..k {
        for iz in 0..z / 2 {
            for ix in 0..x / 2 {
                let mut v = T::ZERO;
                for dz in 0..2 {
                    for dx in 0..2 {
                        v = v.max_val(gt_full.at(&[c, 2 * iz + dz, 2 * ix + dx]));
                    }
                }
                gt_half.set(&[c, iz, ix], v);
            }
        }
    }
    let mask_full = Tensor::new(
        vec![z, x],
        geom.fov_mask
            .data()
            .iter()
            .zip(sample.visibility.data())
            .map(|(&f, &v)| f * v)
            .collect(),
    )
    .expect("mask shape");
    let mask_half = any_pool2(&mask_full);
    Prepared {
        gt: vec![gt_full, gt_half],
        masks: vec![mask_full, mask_half],
    }
}

/// Forward + multi-scale Dice loss + backward for one sample; returns the
/// loss value and this sample's gradients in parameter-store order.
fn sample_step<T: Scalar>(
    model: &Model<T>,
    geom: &Geometry<T>,
    sample: &Sample<T>,
    prep: &Prepared<T>,
    scale: f64,
) -> Result<(f64, Vec<Option<Vec<T>>>)> {
    let mut tape = Tape::new();
    let bind = model.store.bind(&mut tape);
    let mut f = Fwd::new(&mut tape, &bind);
    let out = model.forward_on_tape(&mut f, geom, &sample.frames)?;
    let mut total = None;
    for (u, &probs) in out.probs.iter().enumerate() {
        let gt = tape.constant(prep.gt[u].clone());
        let mask = tape.constant(prep.masks[u].clone());
        let l = dice_loss(&mut tape, probs, gt, mask)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, l)?,
            None => l,
        });
    }
    let total = total.expect("at least one scale");
    let loss_value = tape.value(total).item()?.to_f64();
    let scaled = tape.scale(total, T::from_f64(scale))?;
    tape.backward(scaled)?;
    let grads = model
        .store
        .ids()
        .map(|p| tape.grad(bind.id(p)).map(|g| g.to_vec()))
        .collect();
    Ok((loss_value, grads))
}

/// Train in place; returns per-epoch mean losses. `on_epoch` observes
/// (epoch index, mean loss) as epochs finish.
pub fn train<T: Scalar>(
    model: &mut Model<T>,
    samples: &[Sample<T>],
    params: &TrainParams,
    threads: usize,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Config("training requires at least one sample".into()));
    }
    // synthetic datasets share one camera; build geometry per distinct
    // intrinsics, in sample order
    let mut geoms: Vec<(crate::geometry::CameraIntrinsics, Geometry<T>)> = Vec::new();
    let mut geom_of = Vec::with_capacity(samples.len());
    for s in samples {
        let idx = match geoms.iter().position(|(c, _)| *c == s.cam) {
            Some(i) => i,
            None => {
                geoms.push((s.cam, model.build_geometry(&s.cam)?));
                geoms.len() - 1
            }
        };
        geom_of.push(idx);
    }
    let prepared: Vec<Prepared<T>> = samples
        .iter()
        .enumerate()
        .map(|(i, s)| prepare(model, &geoms[geom_of[i]].1, s))
        .collect();

    let mut adam = AdamState::new(&model.store, params.lr);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut shuffle_rng = ChaCha12Rng::seed_from_u64(params.seed ^ 0x5EED_0F_5A17);
    let pool = if threads > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?,
        )
    } else {
        None
    };
    let mut epoch_losses = Vec::with_capacity(params.epochs);
    for epoch in 0..params.epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(params.batch_size.max(1)) {
            let scale = 1.0 / batch.len() as f64;
            let step_one = |&i: &usize| {
                sample_step(model, &geoms[geom_of[i]].1, &samples[i], &prepared[i], scale)
            };
            let results: Vec<(f64, Vec<Option<Vec<T>>>)> = match &pool {
                Some(p) => p.install(|| {
                    use rayon::prelude::*;
                    batch.par_iter().map(step_one).collect::<Result<Vec<_>>>()
                })?,
                None => batch.iter().map(step_one).collect::<Result<Vec<_>>>()?,
            };
            // fixed-order reduction keeps updates identical across thread
            // counts
            for (loss, grads) in results {
                epoch_loss += loss;
                for (slot, grad) in model.store.ids().zip(grads) {
                    if let Some(g) = grad {
                        model.store.tensor_mut(slot).accumulate_grad(&g);
                    }
                }
            }
            adam.apply(&mut model.store);
        }
        let mean_loss = epoch_loss / samples.len() as f64;
        if !mean_loss.is_finite() {
            return Err(Error::NanLoss { epoch });
        }
        on_epoch(epoch, mean_loss);
        epoch_losses.push(mean_loss);
    }
    Ok(epoch_losses)
}

/// Render `loss.csv`: one row per epoch.
pub fn loss_csv(losses: &[f64]) -> String {
    let mut out = String::from("epoch,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, l));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::synthdata::{generate_sample, GenSpec};

    fn tiny_setup() -> (Model<f64>, Vec<Sample<f64>>, TrainParams) {
        let cfg = ModelConfig {
            image_height: 16,
            image_width: 16,
            channels: 8,
            heads: 2,
            radial_bins: 4,
            classes: 3,
            bev_z: 8,
            bev_x: 8,
            cell_size: 0.5,
            r_min: 0.5,
            r_max: 4.0,
            band_split: 2.0,
            ..ModelConfig::default()
        };
        let spec = GenSpec {
            image_height: 16,
            image_width: 16,
            fx: 8.0,
            fy: 8.0,
            cx: 8.0,
            cy: 8.0,
            bev_z: 8,
            bev_x: 8,
            r_min: 0.5,
            r_max: 4.0,
            z_min: 1.0,
            z_max: 2.5,
            cars_min: 0,
            cars_max: 1,
            peds_min: 0,
            peds_max: 1,
            car_width: (0.8, 1.2),
            car_depth: (0.8, 1.4),
            ..GenSpec::default()
        };
        let samples: Vec<Sample<f64>> = (0..4)
            .map(|i| generate_sample(1, i, &spec).unwrap())
            .collect();
        let model = Model::new(cfg, 0).unwrap();
        let params = TrainParams { lr: 1e-3, epochs: 3, batch_size: 2, seed: 5 };
        (model, samples, params)
    }

    #[test]
    fn loss_decreases_on_a_tiny_problem() {
        let (mut model, samples, params) = tiny_setup();
        let losses = train(&mut model, &samples, &params, 1, |_, _| {}).unwrap();
        assert_eq!(losses.len(), 3);
        assert!(losses[2] < losses[0], "{losses:?}");
    }

    #[test]
    fn training_is_deterministic_across_thread_counts() {
        let (mut m1, samples, params) = tiny_setup();
        let (mut m2, _, _) = tiny_setup();
        let l1 = train(&mut m1, &samples, &params, 1, |_, _| {}).unwrap();
        let l2 = train(&mut m2, &samples, &params, 2, |_, _| {}).unwrap();
        assert_eq!(l1, l2);
        for ((_, t1), (_, t2)) in m1.store.iter().zip(m2.store.iter()) {
            assert_eq!(t1.data(), t2.data());
        }
    }

    #[test]
    fn every_parameter_receives_gradient() {
        let (model, samples, _) = tiny_setup();
        let geom = model.build_geometry(&samples[0].cam).unwrap();
        let prep = prepare(&model, &geom, &samples[0]);
        let (_, grads) = sample_step(&model, &geom, &samples[0], &prep, 1.0).unwrap();
        for (p, g) in model.store.ids().zip(&grads) {
            let g = g.as_ref().unwrap_or_else(|| panic!("no grad for {}", model.store.name(p)));
            assert!(
                g.iter().any(|v| *v != 0.0),
                "all-zero grad for {}",
                model.store.name(p)
            );
        }
    }

    #[test]
    fn multi_scale_loss_is_additive() {
        // the recorded total equals the sum of independently computed
        // per-scale losses
        let (model, samples, _) = tiny_setup();
        let geom = model.build_geometry(&samples[0].cam).unwrap();
        let prep = prepare(&model, &geom, &samples[0]);
        let mut tape = Tape::new();
        let bind = model.store.bind_frozen(&mut tape);
        let mut f = Fwd::new(&mut tape, &bind);
        let out = model.forward_on_tape(&mut f, &geom, &samples[0].frames).unwrap();
        let mut parts = Vec::new();
        for (u, &probs) in out.probs.iter().enumerate() {
            let gt = tape.constant(prep.gt[u].clone());
            let mask = tape.constant(prep.masks[u].clone());
            let l = dice_loss(&mut tape, probs, gt, mask).unwrap();
            parts.push(tape.value(l).item().unwrap());
        }
        let total = {
            let a = tape.constant(Tensor::scalar(parts[0]));
            let b = tape.constant(Tensor::scalar(parts[1]));
            let s = tape.add(a, b).unwrap();
            tape.value(s).item().unwrap()
        };
        assert_eq!(total, parts[0] + parts[1]);
        let (loss, _) = sample_step(&model, &geom, &samples[0], &prep, 1.0).unwrap();
        assert!((loss - total).abs() < 1e-12);
    }
}
