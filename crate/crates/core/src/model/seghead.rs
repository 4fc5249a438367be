//! Convolutional encoder-decoder segmentation head. The 2D convolutions
//! stitch together adjacent polar rays after resampling; occupancy logits
//! come out at full and half BEV resolution.

use rand_chacha::ChaCha12Rng;

use crate::attention::Fwd;
use crate::error::Result;
use crate::numerics::{Scalar, TensorId};
use crate::params::{ParamId, ParamStore};

pub struct SegHead {
    conv_in_w: ParamId,
    conv_in_b: ParamId,
    down_w: ParamId,
    down_b: ParamId,
    mid_w: ParamId,
    mid_b: ParamId,
    up_w: ParamId,
    up_b: ParamId,
    logits_full_w: ParamId,
    logits_full_b: ParamId,
    logits_half_w: ParamId,
    logits_half_b: ParamId,
}

impl SegHead {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        channels: usize,
        classes: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        let mid = channels / 2;
        let conv = |store: &mut ParamStore<T>, name: &str, co: usize, ci: usize, k: usize, rng: &mut ChaCha12Rng| {
            (
                store.add_uniform(format!("seg.{name}.w"), vec![co, ci, k, k], ci * k * k, rng),
                store.add_zeros(format!("seg.{name}.b"), vec![co]),
            )
        };
        let (conv_in_w, conv_in_b) = conv(store, "in", mid, channels, 3, rng);
        let (down_w, down_b) = conv(store, "down", mid, mid, 3, rng);
        let (mid_w, mid_b) = conv(store, "mid", mid, mid, 3, rng);
        let (up_w, up_b) = conv(store, "up", mid, mid, 3, rng);
        let (logits_full_w, logits_full_b) = conv(store, "logits_full", classes, mid, 1, rng);
        let (logits_half_w, logits_half_b) = conv(store, "logits_half", classes, mid, 1, rng);
        SegHead {
            conv_in_w,
            conv_in_b,
            down_w,
            down_b,
            mid_w,
            mid_b,
            up_w,
            up_b,
            logits_full_w,
            logits_full_b,
            logits_half_w,
            logits_half_b,
        }
    }

    /// bev [C, Z, X] -> [logits [K, Z, X], logits [K, Z/2, X/2]].
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, bev: TensorId) -> Result<Vec<TensorId>> {
        let c1 = f.tape.conv2d(bev, f.p(self.conv_in_w), Some(f.p(self.conv_in_b)), 1, 1)?;
        let c1 = f.tape.relu(c1)?;
        let d = f.tape.conv2d(c1, f.p(self.down_w), Some(f.p(self.down_b)), 2, 1)?;
        let d = f.tape.relu(d)?;
        let m = f.tape.conv2d(d, f.p(self.mid_w), Some(f.p(self.mid_b)), 1, 1)?;
        let m = f.tape.relu(m)?;
        let logits_half = f.tape.conv2d(m, f.p(self.logits_half_w), Some(f.p(self.logits_half_b)), 1, 0)?;
        let u = f.tape.upsample2(m)?;
        let u = f.tape.add(u, c1)?;
        let u = f.tape.conv2d(u, f.p(self.up_w), Some(f.p(self.up_b)), 1, 1)?;
        let u = f.tape.relu(u)?;
        let logits_full = f.tape.conv2d(u, f.p(self.logits_full_w), Some(f.p(self.logits_full_b)), 1, 0)?;
        Ok(vec![logits_full, logits_half])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};
    use rand::SeedableRng;

    #[test]
    fn emits_full_and_half_resolution_logits() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let head = SegHead::new(&mut store, 8, 3, &mut rng);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let mut f = Fwd::new(&mut tape, &bind);
        let bev = f.tape.leaf(&Tensor::zeros(vec![8, 16, 16]));
        let outs = head.forward(&mut f, bev).unwrap();
        assert_eq!(tape.shape(outs[0]), &[3, 16, 16]);
        assert_eq!(tape.shape(outs[1]), &[3, 8, 8]);
    }

    #[test]
    fn constant_input_gives_spatially_constant_interior_logits() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let head = SegHead::new(&mut store, 8, 2, &mut rng);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let mut f = Fwd::new(&mut tape, &bind);
        let bev = f.tape.leaf(&Tensor::filled(vec![8, 16, 16], 0.7));
        let outs = head.forward(&mut f, bev).unwrap();
        let full = tape.value(outs[0]);
        // border effects reach 5 cells through the down/up path
        for k in 0..2 {
            let center = full.at(&[k, 8, 8]);
            for z in 5..11 {
                for x in 5..11 {
                    assert!((full.at(&[k, z, x]) - center).abs() < 1e-9);
                }
            }
        }
    }
}
