//! Axial attention components: optional long-range horizontal context on
//! image-plane features, and the temporal dynamics module that fuses a
//! sequence of BEV feature maps.

use rand_chacha::ChaCha12Rng;

use crate::attention::{sinusoid_encoding, CrossAttnKind, Fwd, LayerNormParams, MhaParams};
use crate::error::Result;
use crate::numerics::{Scalar, Tensor, TensorId};
use crate::params::ParamStore;

/// Self-attention along each feature row, giving scanline pixels long-range
/// horizontal context before the column-wise translation.
pub struct RowAttention {
    ln: LayerNormParams,
    attn: MhaParams,
    width: usize,
    channels: usize,
}

impl RowAttention {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        heads: usize,
        width: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        RowAttention {
            ln: LayerNormParams::new(store, &format!("{prefix}.ln"), channels),
            attn: MhaParams::new(store, &format!("{prefix}.attn"), channels, heads, rng),
            width,
            channels,
        }
    }

    /// features [C, h, w] -> same shape.
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: TensorId) -> Result<TensorId> {
        let s = f.tape.shape(x).to_vec();
        let (c, w) = (s[0], s[2]);
        debug_assert_eq!(c, self.channels);
        debug_assert_eq!(w, self.width);
        let rows = f.tape.permute(x, &[1, 2, 0])?; // [h, w, C]
        let z = self.ln.forward(f, rows)?;
        let pe = sinusoid_encoding::<T>(w, c)?;
        let pe_id = f.tape.constant(pe);
        let z = f.tape.add(z, pe_id)?;
        let attn = self.attn.forward(f, z, z, CrossAttnKind::Soft)?;
        let out = f.tape.add(rows, attn)?;
        f.tape.permute(out, &[2, 0, 1])
    }
}

/// Axial attention over time, then the BEV depth axis, then the lateral
/// axis, with residuals. Returns features for the final timestep; attention
/// along z/x of the final frame only touches that frame's entries, so the
/// last-frame slice is computed directly.
pub struct Dynamics {
    ln_t: LayerNormParams,
    attn_t: MhaParams,
    ln_z: LayerNormParams,
    attn_z: MhaParams,
    ln_x: LayerNormParams,
    attn_x: MhaParams,
    channels: usize,
}

impl Dynamics {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        channels: usize,
        heads: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        Dynamics {
            ln_t: LayerNormParams::new(store, "dyn.t.ln", channels),
            attn_t: MhaParams::new(store, "dyn.t.attn", channels, heads, rng),
            ln_z: LayerNormParams::new(store, "dyn.z.ln", channels),
            attn_z: MhaParams::new(store, "dyn.z.attn", channels, heads, rng),
            ln_x: LayerNormParams::new(store, "dyn.x.ln", channels),
            attn_x: MhaParams::new(store, "dyn.x.attn", channels, heads, rng),
            channels,
        }
    }

    /// frames: per-timestep BEV features [C, Z, X], oldest first.
    /// Output: fused features for the final timestep, same shape.
    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, frames: &[TensorId]) -> Result<TensorId> {
        let last = *frames.last().expect("dynamics needs at least one frame");
        if frames.len() == 1 {
            return Ok(last);
        }
        let t_len = frames.len();
        let s = f.tape.shape(last).to_vec();
        let (c, z, x) = (s[0], s[1], s[2]);
        debug_assert_eq!(c, self.channels);

        // [Z*X, T, C] sequence per BEV position
        let mut slices = Vec::with_capacity(t_len);
        for &fr in frames {
            let p = f.tape.permute(fr, &[1, 2, 0])?; // [Z, X, C]
            slices.push(f.tape.reshape(p, vec![z * x, 1, c])?);
        }
        let seq = f.tape.concat(&slices, 1)?;
        let zn = self.ln_t.forward(f, seq)?;
        let pe_t = sinusoid_encoding::<T>(t_len, c)?;
        let pe_t = f.tape.constant(pe_t);
        let zn = f.tape.add(zn, pe_t)?;
        // query only the final timestep; earlier outputs are unused
        let q = last_step_query(f, zn, z * x, t_len, c)?;
        let attn = self.attn_t.forward(f, q, zn, CrossAttnKind::Soft)?; // [Z*X, 1, C]
        let last_rows = {
            let p = f.tape.permute(last, &[1, 2, 0])?;
            f.tape.reshape(p, vec![z * x, 1, c])?
        };
        let fused = f.tape.add(last_rows, attn)?;

        // depth axis: X sequences of length Z
        let g = f.tape.reshape(fused, vec![z, x, c])?;
        let along_z = f.tape.permute(g, &[1, 0, 2])?; // [X, Z, C]
        let zn = self.ln_z.forward(f, along_z)?;
        let pe_z = sinusoid_encoding::<T>(z, c)?;
        let pe_z = f.tape.constant(pe_z);
        let zn = f.tape.add(zn, pe_z)?;
        let attn = self.attn_z.forward(f, zn, zn, CrossAttnKind::Soft)?;
        let along_z = f.tape.add(along_z, attn)?;

        // lateral axis: Z sequences of length X
        let along_x = f.tape.permute(along_z, &[1, 0, 2])?; // [Z, X, C]
        let zn = self.ln_x.forward(f, along_x)?;
        let pe_x = sinusoid_encoding::<T>(x, c)?;
        let pe_x = f.tape.constant(pe_x);
        let zn = f.tape.add(zn, pe_x)?;
        let attn = self.attn_x.forward(f, zn, zn, CrossAttnKind::Soft)?;
        let out = f.tape.add(along_x, attn)?;

        f.tape.permute(out, &[2, 0, 1]) // [C, Z, X]
    }
}

fn last_step_query<T: Scalar>(
    f: &mut Fwd<T>,
    seq: TensorId,
    batch: usize,
    t_len: usize,
    c: usize,
) -> Result<TensorId> {
    let p = f.tape.permute(seq, &[1, 0, 2])?; // [T, Z*X, C]
    let lastq = f.tape.index0(p, t_len - 1)?; // [Z*X, C]
    f.tape.reshape(lastq, vec![batch, 1, c])
}

/// Build the constant [T, C] tensor accepted by tests probing the module's
/// temporal encoding (shared shape with `sinusoid_encoding`).
pub fn temporal_encoding<T: Scalar>(t_len: usize, channels: usize) -> Result<Tensor<T>> {
    sinusoid_encoding(t_len, channels)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Tape;
    use rand::{Rng, SeedableRng};

    fn rand_t(rng: &mut ChaCha12Rng, shape: &[usize]) -> Tensor<f64> {
        let n: usize = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn row_attention_keeps_shape_and_single_column_is_projection() {
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let mut store = ParamStore::<f64>::new();
        let ra = RowAttention::new(&mut store, "hctx0", 8, 2, 1, &mut rng);
        let x = rand_t(&mut rng, &[8, 3, 1]);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let mut f = Fwd::new(&mut tape, &bind);
        let id = f.tape.leaf(&x);
        let out = ra.forward(&mut f, id).unwrap();
        assert_eq!(tape.shape(out), &[8, 3, 1]);
        // width-1 rows: softmax over one entry is 1, so the update is the
        // value/output projection of the (normalized, position-encoded) row
        // plus the residual -- verify the attention actually ran by checking
        // the output differs from the input
        assert!(tape
            .value(out)
            .data()
            .iter()
            .zip(x.data())
            .any(|(a, b)| (a - b).abs() > 1e-9));
    }

    #[test]
    fn dynamics_single_frame_is_bit_exact_passthrough() {
        let mut rng = ChaCha12Rng::seed_from_u64(2);
        let mut store = ParamStore::<f64>::new();
        let dyn_mod = Dynamics::new(&mut store, 8, 2, &mut rng);
        let x = rand_t(&mut rng, &[8, 4, 4]);
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let mut f = Fwd::new(&mut tape, &bind);
        let id = f.tape.leaf(&x);
        let out = dyn_mod.forward(&mut f, &[id]).unwrap();
        assert_eq!(tape.value(out).data(), x.data());
    }

    #[test]
    fn dynamics_fuses_multiple_frames_into_last_frame_shape() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let mut store = ParamStore::<f64>::new();
        let dyn_mod = Dynamics::new(&mut store, 8, 2, &mut rng);
        let frames: Vec<Tensor<f64>> = (0..3).map(|_| rand_t(&mut rng, &[8, 4, 4])).collect();
        let mut tape = Tape::new();
        let bind = store.bind(&mut tape);
        let mut f = Fwd::new(&mut tape, &bind);
        let ids: Vec<TensorId> = frames.iter().map(|t| f.tape.leaf(t)).collect();
        let out = dyn_mod.forward(&mut f, &ids).unwrap();
        assert_eq!(tape.shape(out), &[8, 4, 4]);
        // earlier frames influence the output
        let mut tape2 = Tape::new();
        let bind2 = store.bind(&mut tape2);
        let mut f2 = Fwd::new(&mut tape2, &bind2);
        let mut altered = frames.clone();
        altered[0].data_mut()[0] += 1.0;
        let ids2: Vec<TensorId> = altered.iter().map(|t| f2.tape.leaf(t)).collect();
        let out2 = dyn_mod.forward(&mut f2, &ids2).unwrap();
        assert!(tape2
            .value(out2)
            .data()
            .iter()
            .zip(tape.value(out).data())
            .any(|(a, b)| (a - b).abs() > 1e-12));
    }
}
