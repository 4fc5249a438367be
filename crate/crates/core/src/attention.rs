//! Inter-plane and polar-ray attention, plus the 1D transformer layers that
//! are shared across every image column ("convolutional in x"): the same
//! parameter set processes each column-to-ray translation, batched over
//! columns.

use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::monotonic;
use crate::numerics::{LookbackNumerator, Scalar, Tape, Tensor, TensorId};
use crate::params::{Binding, ParamId, ParamStore};

/// Cross-attention flavour inside a decoder layer. The up/down lookback
/// distinction is realized by flipping column features before encoding, so
/// a single monotonic kind suffices here.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CrossAttnKind {
    Soft,
    Monotonic(LookbackNumerator),
}

/// Q/K/V projections bound on a tape for the functional attention ops.
/// All three share input width C and output width D.
pub struct AttentionParams {
    pub w_q: TensorId,
    pub w_k: TensorId,
    pub w_v: TensorId,
    pub head_count: usize,
}

impl AttentionParams {
    pub fn new<T: Scalar>(
        tape: &Tape<T>,
        w_q: TensorId,
        w_k: TensorId,
        w_v: TensorId,
        head_count: usize,
    ) -> Result<Self> {
        let (sq, sk, sv) = (tape.shape(w_q), tape.shape(w_k), tape.shape(w_v));
        if sq != sk || sq != sv || sq.len() != 2 {
            return Err(Error::DimMismatch {
                op: "attention_params",
                lhs: sq.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        if sq[1] % head_count != 0 {
            return Err(Error::contract(
                "attention_params",
                format!("projection width {} not divisible by {} heads", sq[1], head_count),
            ));
        }
        Ok(AttentionParams { w_q, w_k, w_v, head_count })
    }
}

/// Fixed 1D sinusoid positional encodings:
/// PE[p, 2i] = sin(p / 10000^(2i/C)), PE[p, 2i+1] = cos(p / 10000^(2i/C)).
pub fn sinusoid_encoding<T: Scalar>(length: usize, width: usize) -> Result<Tensor<T>> {
    if width % 2 != 0 {
        return Err(Error::contract(
            "sinusoid_encoding",
            format!("width must be even, got {}", width),
        ));
    }
    let mut data = Vec::with_capacity(length * width);
    for p in 0..length {
        fill_sinusoid(p as f64, width, &mut data);
    }
    Tensor::new(vec![length, width], data)
}

/// Sinusoid row for a continuous position (used for polar-angle encodings).
pub fn sinusoid_at<T: Scalar>(position: f64, width: usize) -> Result<Vec<T>> {
    if width % 2 != 0 {
        return Err(Error::contract(
            "sinusoid_encoding",
            format!("width must be even, got {}", width),
        ));
    }
    let mut data = Vec::with_capacity(width);
    fill_sinusoid(position, width, &mut data);
    Ok(data)
}

fn fill_sinusoid<T: Scalar>(p: f64, width: usize, out: &mut Vec<T>) {
    for i in 0..width / 2 {
        let freq = 10000f64.powf(2.0 * i as f64 / width as f64);
        out.push(T::from_f64((p / freq).sin()));
        out.push(T::from_f64((p / freq).cos()));
    }
}

/// Unnormalized alignment scores e[i,j] = <Q_i, K_j> / sqrt(D)
/// for already-projected queries [r, D] and keys [H, D].
pub fn scaled_dot_energy<T: Scalar>(
    tape: &mut Tape<T>,
    q: TensorId,
    k: TensorId,
) -> Result<TensorId> {
    let (sq, sk) = (tape.shape(q).to_vec(), tape.shape(k).to_vec());
    if sq.len() != 2 || sk.len() != 2 || sq[1] != sk[1] {
        return Err(Error::DimMismatch { op: "scaled_dot_energy", lhs: sq, rhs: sk });
    }
    if sq[1] == 0 {
        return Err(Error::domain("scaled_dot_energy", "zero projection width"));
    }
    let raw = tape.matmul_nt(q, k)?;
    tape.scale(raw, T::from_f64(1.0 / (sq[1] as f64).sqrt()))
}

/// Soft inter-plane attention: positional queries y [r, C] against a column
/// memory h [H, C]. Returns per-slot contexts [r, D] and the alignment
/// distribution [r, H] (rows sum to 1).
pub fn soft_attention<T: Scalar>(
    tape: &mut Tape<T>,
    y: TensorId,
    h: TensorId,
    params: &AttentionParams,
) -> Result<(TensorId, TensorId)> {
    let hs = tape.shape(h).to_vec();
    if hs.len() != 2 || hs[0] == 0 {
        return Err(Error::domain("soft_attention", format!("memory shape {:?}", hs)));
    }
    let q = tape.linear(y, params.w_q, None)?;
    let k = tape.linear(h, params.w_k, None)?;
    let v = tape.linear(h, params.w_v, None)?;
    let e = scaled_dot_energy(tape, q, k)?;
    let align = tape.softmax(e, 1)?;
    let ctx = tape.matmul(align, v)?;
    Ok((ctx, align))
}

/// Self-attention across the polar ray: every output slot attends over all
/// r contexts with its own projection set.
pub fn polar_self_attention<T: Scalar>(
    tape: &mut Tape<T>,
    c: TensorId,
    params: &AttentionParams,
) -> Result<TensorId> {
    let (ctx, _) = soft_attention(tape, c, c, params)?;
    Ok(ctx)
}

// ---- layer building blocks -------------------------------------------------

/// Per-step forward context: the tape plus the parameter binding.
pub struct Fwd<'a, T: Scalar> {
    pub tape: &'a mut Tape<T>,
    pub bind: &'a Binding,
}

impl<'a, T: Scalar> Fwd<'a, T> {
    pub fn new(tape: &'a mut Tape<T>, bind: &'a Binding) -> Self {
        Fwd { tape, bind }
    }

    pub fn p(&self, id: ParamId) -> TensorId {
        self.bind.id(id)
    }
}

pub struct LayerNormParams {
    gamma: ParamId,
    beta: ParamId,
}

impl LayerNormParams {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, prefix: &str, width: usize) -> Self {
        LayerNormParams {
            gamma: store.add_ones(format!("{prefix}.g"), vec![width]),
            beta: store.add_zeros(format!("{prefix}.b"), vec![width]),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: TensorId) -> Result<TensorId> {
        f.tape.layer_norm(x, f.p(self.gamma), f.p(self.beta))
    }
}

/// Multi-head attention parameters: shared Q/K/V projections plus an output
/// projection back to the model width.
pub struct MhaParams {
    w_q: ParamId,
    w_k: ParamId,
    w_v: ParamId,
    w_o: ParamId,
    b_o: ParamId,
    pub heads: usize,
    width: usize,
}

impl MhaParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        heads: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        assert!(width % heads == 0, "width {} not divisible by heads {}", width, heads);
        MhaParams {
            w_q: store.add_uniform(format!("{prefix}.wq"), vec![width, width], width, rng),
            w_k: store.add_uniform(format!("{prefix}.wk"), vec![width, width], width, rng),
            w_v: store.add_uniform(format!("{prefix}.wv"), vec![width, width], width, rng),
            w_o: store.add_uniform(format!("{prefix}.wo"), vec![width, width], width, rng),
            b_o: store.add_zeros(format!("{prefix}.bo"), vec![width]),
            heads,
            width,
        }
    }

    /// Batched attention: q_in [B, Lq, C], kv_in [B, Lk, C] -> [B, Lq, C].
    /// Monotonic kinds replace each head's soft cross-attention with the
    /// expected-alignment lookback distribution.
    pub fn forward<T: Scalar>(
        &self,
        f: &mut Fwd<T>,
        q_in: TensorId,
        kv_in: TensorId,
        kind: CrossAttnKind,
    ) -> Result<TensorId> {
        let (b, lq) = {
            let s = f.tape.shape(q_in);
            (s[0], s[1])
        };
        let q = f.tape.linear(q_in, f.p(self.w_q), None)?;
        let k = f.tape.linear(kv_in, f.p(self.w_k), None)?;
        let v = f.tape.linear(kv_in, f.p(self.w_v), None)?;
        let qh = split_heads(f.tape, q, self.heads)?;
        let kh = split_heads(f.tape, k, self.heads)?;
        let vh = split_heads(f.tape, v, self.heads)?;
        let dh = self.width / self.heads;
        let raw = f.tape.batmul_nt(qh, kh)?;
        let scores = f.tape.scale(raw, T::from_f64(1.0 / (dh as f64).sqrt()))?;
        let ctx = match kind {
            CrossAttnKind::Soft => {
                let align = f.tape.softmax(scores, 2)?;
                f.tape.batmul(align, vh)?
            }
            CrossAttnKind::Monotonic(numerator) => {
                monotonic::monotonic_head_context(f.tape, scores, vh, numerator)?
            }
        };
        let merged = merge_heads(f.tape, ctx, b, lq, self.heads)?;
        f.tape.linear(merged, f.p(self.w_o), Some(f.p(self.b_o)))
    }
}

fn split_heads<T: Scalar>(tape: &mut Tape<T>, x: TensorId, heads: usize) -> Result<TensorId> {
    let s = tape.shape(x).to_vec();
    let (b, l, d) = (s[0], s[1], s[2]);
    let r = tape.reshape(x, vec![b, l, heads, d / heads])?;
    let p = tape.permute(r, &[0, 2, 1, 3])?;
    tape.reshape(p, vec![b * heads, l, d / heads])
}

fn merge_heads<T: Scalar>(
    tape: &mut Tape<T>,
    x: TensorId,
    b: usize,
    l: usize,
    heads: usize,
) -> Result<TensorId> {
    let s = tape.shape(x).to_vec();
    let dh = s[2];
    let r = tape.reshape(x, vec![b, heads, l, dh])?;
    let p = tape.permute(r, &[0, 2, 1, 3])?;
    tape.reshape(p, vec![b, l, heads * dh])
}

pub struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

impl FeedForward {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        hidden: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        FeedForward {
            w1: store.add_uniform(format!("{prefix}.w1"), vec![width, hidden], width, rng),
            b1: store.add_zeros(format!("{prefix}.b1"), vec![hidden]),
            w2: store.add_uniform(format!("{prefix}.w2"), vec![hidden, width], hidden, rng),
            b2: store.add_zeros(format!("{prefix}.b2"), vec![width]),
        }
    }

    pub fn forward<T: Scalar>(&self, f: &mut Fwd<T>, x: TensorId) -> Result<TensorId> {
        let h = f.tape.linear(x, f.p(self.w1), Some(f.p(self.b1)))?;
        let h = f.tape.relu(h)?;
        f.tape.linear(h, f.p(self.w2), Some(f.p(self.b2)))
    }
}

/// Pre-norm transformer encoder layer over a batch of column sequences
/// [B, H, C]. Positional encodings, when given, are added to the input of
/// the attention sublayer.
pub struct EncoderLayer {
    ln1: LayerNormParams,
    attn: MhaParams,
    ln2: LayerNormParams,
    ff: FeedForward,
}

impl EncoderLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        heads: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        EncoderLayer {
            ln1: LayerNormParams::new(store, &format!("{prefix}.ln1"), width),
            attn: MhaParams::new(store, &format!("{prefix}.attn"), width, heads, rng),
            ln2: LayerNormParams::new(store, &format!("{prefix}.ln2"), width),
            ff: FeedForward::new(store, &format!("{prefix}.ff"), width, 4 * width, rng),
        }
    }

    pub fn forward<T: Scalar>(
        &self,
        f: &mut Fwd<T>,
        x: TensorId,
        pos: Option<TensorId>,
    ) -> Result<TensorId> {
        let z = self.ln1.forward(f, x)?;
        let z = match pos {
            Some(pe) => f.tape.add(z, pe)?,
            None => z,
        };
        let attn = self.attn.forward(f, z, z, CrossAttnKind::Soft)?;
        let x = f.tape.add(x, attn)?;
        let z2 = self.ln2.forward(f, x)?;
        let ff = self.ff.forward(f, z2)?;
        f.tape.add(x, ff)
    }
}

/// Pre-norm transformer decoder layer: query self-attention across the ray,
/// cross-attention over the column memory (soft or monotonic), feed-forward.
pub struct DecoderLayer {
    ln1: LayerNormParams,
    self_attn: MhaParams,
    ln2: LayerNormParams,
    cross_attn: MhaParams,
    ln3: LayerNormParams,
    ff: FeedForward,
}

impl DecoderLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        prefix: &str,
        width: usize,
        heads: usize,
        rng: &mut ChaCha12Rng,
    ) -> Self {
        DecoderLayer {
            ln1: LayerNormParams::new(store, &format!("{prefix}.ln1"), width),
            self_attn: MhaParams::new(store, &format!("{prefix}.self"), width, heads, rng),
            ln2: LayerNormParams::new(store, &format!("{prefix}.ln2"), width),
            cross_attn: MhaParams::new(store, &format!("{prefix}.cross"), width, heads, rng),
            ln3: LayerNormParams::new(store, &format!("{prefix}.ln3"), width),
            ff: FeedForward::new(store, &format!("{prefix}.ff"), width, 4 * width, rng),
        }
    }

    /// queries [B, r, C], memory [B, H, C] -> [B, r, C].
    pub fn forward<T: Scalar>(
        &self,
        f: &mut Fwd<T>,
        queries: TensorId,
        memory: TensorId,
        kind: CrossAttnKind,
    ) -> Result<TensorId> {
        let z = self.ln1.forward(f, queries)?;
        let sa = self.self_attn.forward(f, z, z, CrossAttnKind::Soft)?;
        let x = f.tape.add(queries, sa)?;
        let z2 = self.ln2.forward(f, x)?;
        let ca = self.cross_attn.forward(f, z2, memory, kind)?;
        let x = f.tape.add(x, ca)?;
        let z3 = self.ln3.forward(f, x)?;
        let ff = self.ff.forward(f, z3)?;
        f.tape.add(x, ff)
    }
}
