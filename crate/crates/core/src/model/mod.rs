//! The end-to-end network: frontend features, per-column scanline-to-ray
//! translation at two scales, optional horizontal/temporal axial context,
//! polar-to-BEV assembly, and the segmentation head.

pub mod axial;
pub mod frontend;
pub mod loss;
pub mod seghead;

use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::attention::{sinusoid_at, sinusoid_encoding, CrossAttnKind, DecoderLayer, EncoderLayer, Fwd, LayerNormParams};
use crate::config::{AttentionMode, ModelConfig, SCALE_STRIDES};
use crate::error::{Error, Result};
use crate::geometry::{build_polar_grid, BevGrid, CameraIntrinsics, PolarGrid, ResampleTable};
use crate::numerics::{Scalar, Tape, Tensor, TensorId};
use crate::params::{ParamId, ParamStore};

use axial::{Dynamics, RowAttention};
use frontend::Frontend;
use seghead::SegHead;

/// Multiplier applied to the ray angle before sinusoid encoding, spreading
/// the narrow angular range over distinguishable positions.
pub const ANGLE_ENCODING_SCALE: f64 = 8.0;

/// Decoder depth per scale; the encoder uses a single layer.
const DECODER_LAYERS: usize = 2;

pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub store: ParamStore<T>,
    frontend: Frontend,
    hctx: Vec<RowAttention>,
    encoders: Vec<EncoderLayer>,
    enc_norm: Vec<LayerNormParams>,
    queries: Vec<ParamId>,
    decoders: Vec<Vec<DecoderLayer>>,
    dec_norm: Vec<LayerNormParams>,
    dynamics: Option<Dynamics>,
    seghead: SegHead,
}

/// Camera-dependent precomputation shared across samples: polar grids,
/// resampling tables, and positional/angle encodings per scale.
pub struct Geometry<T: Scalar> {
    pub scales: Vec<ScaleGeometry<T>>,
    /// Union of the per-band FOV masks, full resolution [Z, X].
    pub fov_mask: Tensor<T>,
    /// 2x2 any-pooled mask at the half-resolution output scale.
    pub fov_mask_half: Tensor<T>,
}

pub struct ScaleGeometry<T: Scalar> {
    pub pgrid: PolarGrid,
    pub table: ResampleTable,
    /// Constant added to the encoder attention input: [h, C], or [w, h, C]
    /// when image-plane angle encodings are active.
    pub enc_pos: Tensor<T>,
    /// Constant added to the positional queries: [r, C], or [w, r, C] when
    /// BEV-plane angle encodings are active.
    pub query_pos: Tensor<T>,
}

/// Forward results recorded on a tape (training route).
pub struct TapeForward {
    /// Per output scale: [K, Z, X] then [K, Z/2, X/2].
    pub logits: Vec<TensorId>,
    pub probs: Vec<TensorId>,
}

/// Forward results as plain tensors (evaluation route).
pub struct ModelOutput<T: Scalar> {
    pub logits: Vec<Tensor<T>>,
    pub probs: Vec<Tensor<T>>,
    /// FOV masks matching the output scales.
    pub masks: Vec<Tensor<T>>,
}

impl<T: Scalar> Model<T> {
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let c = cfg.channels;
        let frontend = Frontend::new(&mut store, c, &mut rng);
        let mut hctx = Vec::new();
        if cfg.horizontal_context {
            for (u, _) in SCALE_STRIDES.iter().enumerate() {
                let (_, w) = cfg.feature_size(u);
                hctx.push(RowAttention::new(
                    &mut store,
                    &format!("hctx{u}"),
                    c,
                    cfg.heads,
                    w,
                    &mut rng,
                ));
            }
        }
        let mut encoders = Vec::new();
        let mut enc_norm = Vec::new();
        let mut queries = Vec::new();
        let mut decoders = Vec::new();
        let mut dec_norm = Vec::new();
        for (u, _) in SCALE_STRIDES.iter().enumerate() {
            encoders.push(EncoderLayer::new(&mut store, &format!("enc{u}.0"), c, cfg.heads, &mut rng));
            enc_norm.push(LayerNormParams::new(&mut store, &format!("enc{u}.norm"), c));
            queries.push(store.add_uniform(format!("dec{u}.q"), vec![cfg.radial_bins, c], c, &mut rng));
            let mut layers = Vec::new();
            for l in 0..DECODER_LAYERS {
                layers.push(DecoderLayer::new(&mut store, &format!("dec{u}.{l}"), c, cfg.heads, &mut rng));
            }
            decoders.push(layers);
            dec_norm.push(LayerNormParams::new(&mut store, &format!("dec{u}.norm"), c));
        }
        let dynamics = if cfg.temporal > 1 {
            Some(Dynamics::new(&mut store, c, cfg.heads, &mut rng))
        } else {
            None
        };
        let seghead = SegHead::new(&mut store, c, cfg.classes, &mut rng);
        Ok(Model {
            cfg,
            store,
            frontend,
            hctx,
            encoders,
            enc_norm,
            queries,
            decoders,
            dec_norm,
            dynamics,
            seghead,
        })
    }

    pub fn bev_grid(&self) -> BevGrid {
        BevGrid {
            z_cells: self.cfg.bev_z,
            x_cells: self.cfg.bev_x,
            cell_size: self.cfg.cell_size,
        }
    }

    /// Build the camera-dependent tables and encodings. Each scale's rays
    /// cover a disjoint radial band; cells claimed by an earlier (finer)
    /// scale are excluded from later tables so the per-band BEV maps sum
    /// without overlap.
    pub fn build_geometry(&self, cam: &CameraIntrinsics) -> Result<Geometry<T>> {
        let bgrid = self.bev_grid();
        let mut scales = Vec::new();
        let mut claimed = vec![false; bgrid.z_cells * bgrid.x_cells];
        for (u, &stride) in SCALE_STRIDES.iter().enumerate() {
            let (h, w) = self.cfg.feature_size(u);
            let (band_lo, band_hi) = self.cfg.radial_band(u);
            let pgrid = build_polar_grid(w, &cam.scaled(stride), self.cfg.radial_bins, band_lo, band_hi)?;
            let mut table = crate::geometry::build_resample_table(&pgrid, &bgrid);
            exclude_claimed(&mut table, &mut claimed);
            let enc_pos = self.encoder_positions(&pgrid, h, w)?;
            let query_pos = self.query_positions(&pgrid, w)?;
            scales.push(ScaleGeometry { pgrid, table, enc_pos, query_pos });
        }
        let fov: Vec<T> = claimed.iter().map(|&m| if m { T::ONE } else { T::ZERO }).collect();
        let fov_mask = Tensor::new(vec![bgrid.z_cells, bgrid.x_cells], fov)?;
        let fov_mask_half = any_pool2(&fov_mask);
        Ok(Geometry { scales, fov_mask, fov_mask_half })
    }

    fn encoder_positions(&self, pgrid: &PolarGrid, h: usize, w: usize) -> Result<Tensor<T>> {
        let c = self.cfg.channels;
        let rows = sinusoid_encoding::<T>(h, c)?;
        if !self.cfg.polar_encoding.image_plane() {
            return Ok(rows);
        }
        let mut data = Vec::with_capacity(w * h * c);
        for u in 0..w {
            let ang = sinusoid_at::<T>(pgrid.angles[u] * ANGLE_ENCODING_SCALE, c)?;
            for y in 0..h {
                for ch in 0..c {
                    data.push(rows.at(&[y, ch]) + ang[ch]);
                }
            }
        }
        Tensor::new(vec![w, h, c], data)
    }

    fn query_positions(&self, pgrid: &PolarGrid, w: usize) -> Result<Tensor<T>> {
        let c = self.cfg.channels;
        let r = self.cfg.radial_bins;
        let slots = sinusoid_encoding::<T>(r, c)?;
        if !self.cfg.polar_encoding.bev_plane() {
            return Ok(slots);
        }
        let mut data = Vec::with_capacity(w * r * c);
        for u in 0..w {
            let ang = sinusoid_at::<T>(pgrid.angles[u] * ANGLE_ENCODING_SCALE, c)?;
            for i in 0..r {
                for ch in 0..c {
                    data.push(slots.at(&[i, ch]) + ang[ch]);
                }
            }
        }
        Tensor::new(vec![w, r, c], data)
    }

    /// Translate per-scale image-plane features into BEV. Returns the fused
    /// BEV features [C, Z, X] plus each scale's polar map [C, w_u, r_u]
    /// (before resampling; the column-permutation checks probe these).
    pub fn translate_features(
        &self,
        f: &mut Fwd<T>,
        feats: &[TensorId],
        geom: &Geometry<T>,
    ) -> Result<(TensorId, Vec<TensorId>)> {
        if feats.len() != SCALE_STRIDES.len() {
            return Err(Error::contract(
                "translate_features",
                format!("expected {} feature scales, got {}", SCALE_STRIDES.len(), feats.len()),
            ));
        }
        let cross = match self.cfg.attention_mode {
            AttentionMode::Soft => CrossAttnKind::Soft,
            AttentionMode::MonoDown | AttentionMode::MonoUp => {
                CrossAttnKind::Monotonic(self.cfg.mail_numerator)
            }
        };
        let mut bev: Option<TensorId> = None;
        let mut polar_maps = Vec::new();
        for (u, &feat) in feats.iter().enumerate() {
            let sg = &geom.scales[u];
            let x = if self.cfg.horizontal_context {
                self.hctx[u].forward(f, feat)?
            } else {
                feat
            };
            let w = f.tape.shape(x)[2];
            // one sequence per column, bottom of the image last
            let cols = f.tape.permute(x, &[2, 1, 0])?; // [w, h, C]
            // looking up: flip each column so the monotonic scan walks from
            // the top of the image and lookback covers what lies above
            let cols = if self.cfg.attention_mode == AttentionMode::MonoUp {
                f.tape.flip(cols, 1)?
            } else {
                cols
            };
            let pe = f.tape.constant(sg.enc_pos.clone());
            let mem = self.encoders[u].forward(f, cols, Some(pe))?;
            let mem = self.enc_norm[u].forward(f, mem)?;
            let emb = f.tape.repeat0(f.bind.id(self.queries[u]), w)?;
            let qpos = f.tape.constant(sg.query_pos.clone());
            let mut y = f.tape.add(emb, qpos)?;
            for layer in &self.decoders[u] {
                y = layer.forward(f, y, mem, cross)?;
            }
            let y = self.dec_norm[u].forward(f, y)?;
            let polar = f.tape.permute(y, &[2, 0, 1])?; // [C, w, r]
            polar_maps.push(polar);
            let bev_u = f.tape.gather_blend(polar, sg.table.blend.clone())?;
            bev = Some(match bev {
                Some(b) => f.tape.add(b, bev_u)?,
                None => bev_u,
            });
        }
        Ok((bev.expect("at least one scale"), polar_maps))
    }

    /// Full pipeline over `temporal` frames (oldest first); the prediction
    /// is for the final frame.
    pub fn forward_on_tape(
        &self,
        f: &mut Fwd<T>,
        geom: &Geometry<T>,
        frames: &[Tensor<T>],
    ) -> Result<TapeForward> {
        if frames.len() != self.cfg.temporal {
            return Err(Error::contract(
                "forward",
                format!("expected {} frames, got {}", self.cfg.temporal, frames.len()),
            ));
        }
        let mut bevs = Vec::new();
        for frame in frames {
            let expect = [3, self.cfg.image_height, self.cfg.image_width];
            if frame.shape() != expect {
                return Err(Error::DimMismatch {
                    op: "forward",
                    lhs: frame.shape().to_vec(),
                    rhs: expect.to_vec(),
                });
            }
            // center pixel values around zero
            let img = f.tape.constant(frame.map(|v| v - T::from_f64(0.5)));
            let feats = self.frontend.forward(f, img)?;
            let (bev, _) = self.translate_features(f, &feats, geom)?;
            bevs.push(bev);
        }
        let fused = match &self.dynamics {
            Some(d) => d.forward(f, &bevs)?,
            None => *bevs.last().unwrap(),
        };
        let logits = self.seghead.forward(f, fused)?;
        let mut probs = Vec::new();
        for &l in &logits {
            probs.push(f.tape.sigmoid(l)?);
        }
        Ok(TapeForward { logits, probs })
    }

    /// Evaluation route: fresh tape, parameters bound without gradient
    /// tracking, plain tensors out.
    pub fn forward(&self, geom: &Geometry<T>, frames: &[Tensor<T>]) -> Result<ModelOutput<T>> {
        let mut tape = Tape::new();
        let bind = self.store.bind_frozen(&mut tape);
        let mut f = Fwd::new(&mut tape, &bind);
        let out = self.forward_on_tape(&mut f, geom, frames)?;
        Ok(ModelOutput {
            logits: out.logits.iter().map(|&id| tape.value(id).clone()).collect(),
            probs: out.probs.iter().map(|&id| tape.value(id).clone()).collect(),
            masks: vec![geom.fov_mask.clone(), geom.fov_mask_half.clone()],
        })
    }
}

fn exclude_claimed(table: &mut ResampleTable, claimed: &mut [bool]) {
    let blend = std::sync::Arc::get_mut(&mut table.blend).expect("table not yet shared");
    for (cell, taken) in claimed.iter_mut().enumerate() {
        if table.in_fov[cell] {
            if *taken {
                table.in_fov[cell] = false;
                blend.taps[cell] = [(0, 0.0); 4];
            } else {
                *taken = true;
            }
        }
    }
}

/// 2x2 max-pool of a [Z, X] mask.
pub fn any_pool2<T: Scalar>(mask: &Tensor<T>) -> Tensor<T> {
    let (z, x) = (mask.shape()[0], mask.shape()[1]);
    let (hz, hx) = (z / 2, x / 2);
    let mut out = Tensor::zeros(vec![hz, hx]);
    for iz in 0..hz {
        for ix in 0..hx {
            let mut v = T::ZERO;
            for dz in 0..2 {
                for dx in 0..2 {
                    v = v.max_val(mask.at(&[2 * iz + dz, 2 * ix + dx]));
                }
            }
            out.set(&[iz, ix], v);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::PolarEncoding;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            image_height: 16,
            image_width: 16,
            channels: 8,
            heads: 2,
            radial_bins: 4,
            classes: 2,
            bev_z: 8,
            bev_x: 8,
            cell_size: 0.5,
            r_min: 0.5,
            r_max: 4.0,
            band_split: 2.0,
            ..ModelConfig::default()
        }
    }

    fn tiny_cam() -> CameraIntrinsics {
        CameraIntrinsics::new(8.0, 8.0, 8.0, 8.0).unwrap()
    }

    fn rand_frame(seed: u64, h: usize, w: usize) -> Tensor<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        Tensor::new(vec![3, h, w], (0..3 * h * w).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap()
    }

    #[test]
    fn output_shapes_and_probability_range() {
        let model = Model::<f64>::new(tiny_cfg(), 0).unwrap();
        let geom = model.build_geometry(&tiny_cam()).unwrap();
        let frame = rand_frame(1, 16, 16);
        let out = model.forward(&geom, &[frame]).unwrap();
        assert_eq!(out.logits[0].shape(), &[2, 8, 8]);
        assert_eq!(out.logits[1].shape(), &[2, 4, 4]);
        assert!(out.probs[0].data().iter().all(|&p| p > 0.0 && p < 1.0));
    }

    #[test]
    fn same_seed_same_input_bit_identical() {
        let m1 = Model::<f64>::new(tiny_cfg(), 7).unwrap();
        let m2 = Model::<f64>::new(tiny_cfg(), 7).unwrap();
        let geom1 = m1.build_geometry(&tiny_cam()).unwrap();
        let geom2 = m2.build_geometry(&tiny_cam()).unwrap();
        let frame = rand_frame(2, 16, 16);
        let o1 = m1.forward(&geom1, &[frame.clone()]).unwrap();
        let o2 = m2.forward(&geom2, &[frame]).unwrap();
        assert_eq!(o1.logits[0].data(), o2.logits[0].data());
        assert_eq!(o1.logits[1].data(), o2.logits[1].data());
    }

    #[test]
    fn different_seeds_differ() {
        let m1 = Model::<f64>::new(tiny_cfg(), 1).unwrap();
        let m2 = Model::<f64>::new(tiny_cfg(), 2).unwrap();
        let geom = m1.build_geometry(&tiny_cam()).unwrap();
        let geom2 = m2.build_geometry(&tiny_cam()).unwrap();
        let frame = rand_frame(3, 16, 16);
        let o1 = m1.forward(&geom, &[frame.clone()]).unwrap();
        let o2 = m2.forward(&geom2, &[frame]).unwrap();
        assert_ne!(o1.logits[0].data(), o2.logits[0].data());
    }

    #[test]
    fn bev_output_shape_independent_of_image_aspect() {
        let mut cfg = tiny_cfg();
        cfg.image_width = 24;
        let model = Model::<f64>::new(cfg, 0).unwrap();
        let cam = CameraIntrinsics::new(8.0, 8.0, 12.0, 8.0).unwrap();
        let geom = model.build_geometry(&cam).unwrap();
        let frame = rand_frame(4, 16, 24);
        let out = model.forward(&geom, &[frame]).unwrap();
        assert_eq!(out.logits[0].shape(), &[2, 8, 8]);
    }

    #[test]
    fn column_reversal_reverses_rays_in_polar_space() {
        // polar-agnostic config: reversing the column order of the input
        // features must exactly reverse the ray order of each polar map
        let mut cfg = tiny_cfg();
        cfg.polar_encoding = PolarEncoding::Agnostic;
        let model = Model::<f64>::new(cfg, 5).unwrap();
        let geom = model.build_geometry(&tiny_cam()).unwrap();
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        let feats: Vec<Tensor<f64>> = [(8usize, 4usize, 4usize), (8, 2, 2)]
            .iter()
            .map(|&(c, h, w)| {
                Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
            })
            .collect();
        let run = |inputs: &[Tensor<f64>]| {
            let mut tape = Tape::new();
            let bind = model.store.bind_frozen(&mut tape);
            let mut f = Fwd::new(&mut tape, &bind);
            let ids: Vec<TensorId> = inputs.iter().map(|t| f.tape.leaf(t)).collect();
            let (_, polar) = model.translate_features(&mut f, &ids, &geom).unwrap();
            polar.iter().map(|&p| tape.value(p).clone()).collect::<Vec<_>>()
        };
        let base = run(&feats);
        let reversed: Vec<Tensor<f64>> = feats
            .iter()
            .map(|t| {
                let (c, h, w) = (t.shape()[0], t.shape()[1], t.shape()[2]);
                let mut out = Tensor::<f64>::zeros(vec![c, h, w]);
                for ci in 0..c {
                    for y in 0..h {
                        for x in 0..w {
                            out.set(&[ci, y, x], t.at(&[ci, y, w - 1 - x]));
                        }
                    }
                }
                out
            })
            .collect();
        let flipped = run(&reversed);
        for (u, (b, fl)) in base.iter().zip(&flipped).enumerate() {
            let (c, w, r) = (b.shape()[0], b.shape()[1], b.shape()[2]);
            for ci in 0..c {
                for col in 0..w {
                    for k in 0..r {
                        assert_eq!(
                            fl.at(&[ci, col, k]),
                            b.at(&[ci, w - 1 - col, k]),
                            "scale {u} channel {ci} col {col} bin {k}"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn temporal_model_runs_and_uses_history() {
        let mut cfg = tiny_cfg();
        cfg.temporal = 3;
        let model = Model::<f64>::new(cfg, 0).unwrap();
        let geom = model.build_geometry(&tiny_cam()).unwrap();
        let frames: Vec<Tensor<f64>> = (0..3).map(|i| rand_frame(10 + i, 16, 16)).collect();
        let out = model.forward(&geom, &frames).unwrap();
        assert_eq!(out.logits[0].shape(), &[2, 8, 8]);
        let mut altered = frames.clone();
        altered[0] = rand_frame(99, 16, 16);
        let out2 = model.forward(&geom, &altered).unwrap();
        assert_ne!(out.logits[0].data(), out2.logits[0].data());
    }
}
