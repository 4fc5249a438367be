//! Camera-grounded correspondence between image columns and polar rays,
//! and resampling of polar feature maps into the rectilinear BEV grid.
//!
//! Conventions: the camera sits at the bottom-center of the BEV grid with z
//! extending forward and x to the right; BEV row 0 is the far edge. Column
//! u's ray direction comes straight from the pinhole model.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::{BlendTable, Scalar, Tape, Tensor, TensorId};

/// Pinhole intrinsics (the 3x3 matrix with zero skew).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if fx <= 0.0 || fy <= 0.0 {
            return Err(Error::domain("intrinsics", format!("focal lengths must be positive, got fx={fx}, fy={fy}")));
        }
        Ok(CameraIntrinsics { fx, fy, cx, cy })
    }

    /// Intrinsics at a feature resolution downscaled by `stride`.
    pub fn scaled(&self, stride: usize) -> CameraIntrinsics {
        let s = stride as f64;
        CameraIntrinsics {
            fx: self.fx / s,
            fy: self.fy / s,
            cx: self.cx / s,
            cy: self.cy / s,
        }
    }

    /// Parse the row-major 3x3 matrix: nine whitespace-separated decimals.
    pub fn parse(text: &str, path: &str) -> Result<Self> {
        let vals: Vec<f64> = text
            .split_whitespace()
            .map(|t| t.parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::Format { path: path.into(), msg: format!("bad number: {e}") })?;
        if vals.len() != 9 {
            return Err(Error::Format {
                path: path.into(),
                msg: format!("expected 9 numbers, got {}", vals.len()),
            });
        }
        CameraIntrinsics::new(vals[0], vals[4], vals[2], vals[5])
    }

    pub fn to_matrix_string(&self) -> String {
        format!("{} 0 {}\n0 {} {}\n0 0 1\n", self.fx, self.cx, self.fy, self.cy)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        CameraIntrinsics::parse(&text, &path.display().to_string())
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_matrix_string())?;
        Ok(())
    }
}

/// Ray angle of image column `u` (pixel centers at u + 0.5); zero at the
/// principal column, increasing to the right.
pub fn column_to_angle(u: usize, cam: &CameraIntrinsics) -> f64 {
    ((u as f64 + 0.5 - cam.cx) / cam.fx).atan()
}

/// One ray per image column: W angles from the (feature-resolution)
/// intrinsics plus uniform radial bins over [r_min, r_max].
#[derive(Debug, Clone)]
pub struct PolarGrid {
    pub angles: Vec<f64>,
    pub num_radial: usize,
    pub r_min: f64,
    pub r_max: f64,
}

impl PolarGrid {
    pub fn num_angles(&self) -> usize {
        self.angles.len()
    }

    pub fn radial_step(&self) -> f64 {
        (self.r_max - self.r_min) / self.num_radial as f64
    }

    pub fn radial_center(&self, k: usize) -> f64 {
        self.r_min + (k as f64 + 0.5) * self.radial_step()
    }
}

pub fn build_polar_grid(
    width: usize,
    cam: &CameraIntrinsics,
    num_radial: usize,
    r_min: f64,
    r_max: f64,
) -> Result<PolarGrid> {
    if r_max <= r_min {
        return Err(Error::domain("build_polar_grid", format!("r_max {r_max} <= r_min {r_min}")));
    }
    if width == 0 || num_radial == 0 {
        return Err(Error::domain("build_polar_grid", "empty grid"));
    }
    let angles: Vec<f64> = (0..width).map(|u| column_to_angle(u, cam)).collect();
    Ok(PolarGrid { angles, num_radial, r_min, r_max })
}

/// Rectilinear BEV grid: Z cells forward, X cells across, camera at the
/// bottom-center of the grid.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BevGrid {
    pub z_cells: usize,
    pub x_cells: usize,
    pub cell_size: f64,
}

impl BevGrid {
    /// World coordinates of cell (iz, ix)'s center; row 0 is the far edge.
    pub fn cell_center(&self, iz: usize, ix: usize) -> (f64, f64) {
        let z = (self.z_cells - iz) as f64 * self.cell_size - 0.5 * self.cell_size;
        let x = (ix as f64 + 0.5 - self.x_cells as f64 / 2.0) * self.cell_size;
        (x, z)
    }

    pub fn forward_range(&self) -> f64 {
        self.z_cells as f64 * self.cell_size
    }

    pub fn lateral_range(&self) -> f64 {
        self.x_cells as f64 * self.cell_size
    }
}

/// Precomputed bilinear sampling of a [W, r] polar plane at every BEV cell
/// center, plus the field-of-view mask.
pub struct ResampleTable {
    pub blend: Arc<BlendTable>,
    /// Row-major [Z, X]: true where the cell's angle lies within the column
    /// span and its range within [r_min, r_max].
    pub in_fov: Vec<bool>,
    pub z_cells: usize,
    pub x_cells: usize,
}

impl ResampleTable {
    pub fn mask_tensor<T: Scalar>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.z_cells, self.x_cells],
            self.in_fov.iter().map(|&m| if m { T::ONE } else { T::ZERO }).collect(),
        )
        .expect("mask shape")
    }
}

pub fn build_resample_table(pgrid: &PolarGrid, bgrid: &BevGrid) -> ResampleTable {
    let w = pgrid.num_angles();
    let r = pgrid.num_radial;
    let step = pgrid.radial_step();
    let mut taps = Vec::with_capacity(bgrid.z_cells * bgrid.x_cells);
    let mut in_fov = Vec::with_capacity(bgrid.z_cells * bgrid.x_cells);
    for iz in 0..bgrid.z_cells {
        for ix in 0..bgrid.x_cells {
            let (x, z) = bgrid.cell_center(iz, ix);
            let theta = (x / z).atan();
            let rho = (x * x + z * z).sqrt();
            let inside = theta >= pgrid.angles[0]
                && theta <= pgrid.angles[w - 1]
                && rho >= pgrid.r_min
                && rho <= pgrid.r_max;
            if !inside {
                taps.push([(0u32, 0.0); 4]);
                in_fov.push(false);
                continue;
            }
            // fractional column index by inverse interpolation over the
            // monotone angle array (columns are not uniform in theta)
            let a = if w == 1 {
                0.0
            } else {
                let mut lo = 0usize;
                let mut hi = w - 1;
                while hi - lo > 1 {
                    let mid = (lo + hi) / 2;
                    if pgrid.angles[mid] <= theta {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                lo as f64 + (theta - pgrid.angles[lo]) / (pgrid.angles[hi] - pgrid.angles[lo])
            };
            // fractional radial bin, clamped so boundary ranges take the
            // nearest bin center
            let b = ((rho - pgrid.r_min) / step - 0.5).clamp(0.0, (r - 1) as f64);
            let u0 = (a.floor() as usize).min(w - 1);
            let u1 = (u0 + 1).min(w - 1);
            let fu = a - u0 as f64;
            let k0 = (b.floor() as usize).min(r - 1);
            let k1 = (k0 + 1).min(r - 1);
            let fk = b - k0 as f64;
            taps.push([
                ((u0 * r + k0) as u32, (1.0 - fu) * (1.0 - fk)),
                ((u0 * r + k1) as u32, (1.0 - fu) * fk),
                ((u1 * r + k0) as u32, fu * (1.0 - fk)),
                ((u1 * r + k1) as u32, fu * fk),
            ]);
            in_fov.push(true);
        }
    }
    ResampleTable {
        blend: Arc::new(BlendTable {
            taps,
            plane: w * r,
            out_shape: (bgrid.z_cells, bgrid.x_cells),
        }),
        in_fov,
        z_cells: bgrid.z_cells,
        x_cells: bgrid.x_cells,
    }
}

/// Resample a polar map [C, W, r] into the BEV grid: each cell center maps
/// to (theta, rho) and samples the plane bilinearly; cells outside the field
/// of view are zero with mask 0. Pure-value route.
pub fn polar_to_cartesian<T: Scalar>(
    polar: &Tensor<T>,
    pgrid: &PolarGrid,
    bgrid: &BevGrid,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let table = build_resample_table(pgrid, bgrid);
    let out = apply_resample(polar, &table)?;
    let mask = table.mask_tensor();
    Ok((out, mask))
}

/// Table application without a tape (evaluation paths and oracles).
pub fn apply_resample<T: Scalar>(polar: &Tensor<T>, table: &ResampleTable) -> Result<Tensor<T>> {
    let s = polar.shape();
    if s.len() != 3 || s[1] * s[2] != table.blend.plane {
        return Err(Error::domain(
            "polar_to_cartesian",
            format!("polar map {:?} does not match table plane {}", s, table.blend.plane),
        ));
    }
    let c = s[0];
    let (rows, cols) = table.blend.out_shape;
    let mut out = vec![T::ZERO; c * rows * cols];
    let xd = polar.data();
    for ci in 0..c {
        let plane = &xd[ci * table.blend.plane..(ci + 1) * table.blend.plane];
        let obase = ci * rows * cols;
        for (cell, taps) in table.blend.taps.iter().enumerate() {
            let mut acc = T::ZERO;
            for &(idx, wgt) in taps {
                acc += T::from_f64(wgt) * plane[idx as usize];
            }
            out[obase + cell] = acc;
        }
    }
    Tensor::new(vec![c, rows, cols], out)
}

/// Differentiable route: record the resample on the tape.
pub fn resample_on_tape<T: Scalar>(
    tape: &mut Tape<T>,
    polar: TensorId,
    table: &ResampleTable,
) -> Result<TensorId> {
    tape.gather_blend(polar, table.blend.clone())
}
