//! Small strided convolutional stack with lateral connections, producing
//! one feature map per scale (strides 4 and 8) at a shared channel width.

use rand_chacha::ChaCha12Rng;

use crate::attention::Fwd;
use crate::error::Result;
use crate::numerics::{Scalar, TensorId};
use crate::params::{ParamId, ParamStore};

struct ConvParams {
    w: ParamId,
    b: ParamId,
}

impl ConvParams {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_out: usize,
        c_in: usize,
        k: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        ConvParams {
            w: store.add_uniform(
                format!("{name}.w"),
                vec![c_out, c_in, k, k],
                c_in * k * k,
                rng,
            ),
            b: store.add_zeros(format!("{name}.b"), vec![c_out]),
        }
    }

    fn forward<T: Scalar>(
        &self,
        f: &mut Fwd<T>,
        x: TensorId,
        stride: usize,
        pad: usize,
    ) -> Result<TensorId> {
        f.tape.conv2d(x, f.p(self.w), Some(f.p(self.b)), stride, pad)
    }
}

pub struct Frontend {
    stem1: ConvParams,
    stem2: ConvParams,
    down8: ConvParams,
    lat4: ConvParams,
    lat8: ConvParams,
    smooth4: ConvParams,
}

impl Frontend {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, channels: usize, rng: &mut ChaCha12Rng) -> Self {
        let mid = channels / 2;
        Frontend {
            stem1: ConvParams::new(store, "frontend.stem1", mid, 3, 3, rng),
            stem2: ConvParams::new(store, "frontend.stem2", channels, mid, 3, rng),
            down8: ConvParams::new(store, "frontend.down8", channels, channels, 3, rng),
            lat4: ConvParams::new(store, "frontend.lat4", channels, channels, 1, rng),
            lat8: ConvParams::new(store, "frontend.lat8", channels, channels, 1, rng),
            smooth4: ConvParams::new(store, "frontend.smooth4", channels, channels, 3, rng),
        }
    }

    /// image [3, H, W] -> [features at stride 4, features at stride 8].
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, image: TensorId) -> Result<Vec<TensorId>> {
        let s1 = self.stem1.forward(f, image, 2, 1)?;
        let s1 = f.tape.relu(s1)?;
        let s2 = self.stem2.forward(f, s1, 2, 1)?;
        let feat4 = f.tape.relu(s2)?;
        let d8 = self.down8.forward(f, feat4, 2, 1)?;
        let feat8 = f.tape.relu(d8)?;
        // feature-pyramid fusion: top goes through a lateral 1x1, the finer
        // level adds the upsampled top before smoothing
        let p8 = self.lat8.forward(f, feat8, 1, 0)?;
        let l4 = self.lat4.forward(f, feat4, 1, 0)?;
        let up = f.tape.upsample2(p8)?;
        let sum = f.tape.add(l4, up)?;
        let p4 = self.smooth4.forward(f, sum, 1, 1)?;
        Ok(vec![p4, p8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{Tape, Tensor};
    use rand::{Rng, SeedableRng};

    #[test]
    fn stride_arithmetic() {
        let mut rng = ChaCha12Rng::seed_from_u64(0);
        let mut store = ParamStore::<f64>::new();
        let fe = Frontend::new(&mut store, 8, &mut rng);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let mut f = Fwd::new(&mut tape, &bind);
        let img = f.tape.leaf(&Tensor::zeros(vec![3, 64, 64]));
        let feats = fe.forward(&mut f, img).unwrap();
        assert_eq!(tape.shape(feats[0]), &[8, 16, 16]);
        assert_eq!(tape.shape(feats[1]), &[8, 8, 8]);
    }

    #[test]
    fn translation_by_one_stride_unit_shifts_features() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let fe = Frontend::new(&mut store, 8, &mut rng);
        // random image, then the same image shifted right by one stride-8
        // unit so both pyramid levels shift by whole cells
        let mut img = Tensor::<f64>::zeros(vec![3, 32, 32]);
        for v in img.data_mut() {
            *v = rng.gen_range(0.0..1.0);
        }
        let mut shifted = Tensor::<f64>::zeros(vec![3, 32, 32]);
        for c in 0..3 {
            for y in 0..32 {
                for x in 8..32 {
                    shifted.set(&[c, y, x], img.at(&[c, y, x - 8]));
                }
            }
        }
        let run = |input: &Tensor<f64>| {
            let mut tape = Tape::new();
            let bind = store.bind(&mut tape);
            let mut f = Fwd::new(&mut tape, &bind);
            let id = f.tape.leaf(input);
            let feats = fe.forward(&mut f, id).unwrap();
            (tape.value(feats[0]).clone(), tape.value(feats[1]).clone())
        };
        let (base4, base8) = run(&img);
        let (moved4, moved8) = run(&shifted);
        // interior cells shift by 2 at stride 4 and by 1 at stride 8
        let mut worst = 0.0f64;
        for c in 0..8 {
            for y in 2..6 {
                for x in 4..7 {
                    worst = worst.max((moved4.at(&[c, y, x]) - base4.at(&[c, y, x - 2])).abs());
                }
            }
            for y in 1..3 {
                for x in 2..3 {
                    worst = worst.max((moved8.at(&[c, y, x]) - base8.at(&[c, y, x - 1])).abs());
                }
            }
        }
        assert!(worst < 1e-9, "interior shift mismatch {worst}");
    }
}
