//! Deterministic synthetic pinhole-world generator. Scenes are a ground
//! plane plus axis-aligned boxes (cars, pedestrians) rendered column by
//! column with painter's ordering, rasterized into per-class BEV occupancy
//! with a ray-cast visibility mask.

use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use crate::config::parse_kv;
use crate::error::{Error, Result};
use crate::geometry::{build_polar_grid, column_to_angle, BevGrid, CameraIntrinsics, PolarGrid};
use crate::image_io;
use crate::numerics::{Scalar, Tensor};

/// Class indices within the occupancy tensor.
pub const CLASS_GROUND: usize = 0;
pub const CLASS_CAR: usize = 1;
pub const CLASS_PEDESTRIAN: usize = 2;
pub const NUM_CLASSES: usize = 3;

/// Fixed rendering palette (RGB in [0,1]); the model consumes these colors
/// as pixel features, so they are part of the data contract.
pub const COLOR_SKY: [f64; 3] = [0.70, 0.85, 1.00];
pub const COLOR_GROUND: [f64; 3] = [0.45, 0.45, 0.45];
pub const COLOR_CAR: [f64; 3] = [0.15, 0.25, 0.90];
pub const COLOR_PEDESTRIAN: [f64; 3] = [0.90, 0.15, 0.10];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ObjectClass {
    Car,
    Pedestrian,
}

impl ObjectClass {
    pub fn index(self) -> usize {
        match self {
            ObjectClass::Car => CLASS_CAR,
            ObjectClass::Pedestrian => CLASS_PEDESTRIAN,
        }
    }

    fn color(self) -> [f64; 3] {
        match self {
            ObjectClass::Car => COLOR_CAR,
            ObjectClass::Pedestrian => COLOR_PEDESTRIAN,
        }
    }
}

/// Axis-aligned box on the ground plane. `x`/`z` are the minimum corner of
/// the footprint at the final (prediction) frame; `velocity` is the
/// displacement per frame for temporal sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneObject {
    pub class: ObjectClass,
    pub x: f64,
    pub z: f64,
    pub w: f64,
    pub d: f64,
    pub height: f64,
    pub velocity: (f64, f64),
}

impl SceneObject {
    /// Footprint corners at `steps_back` frames before the final frame.
    fn footprint_at(&self, steps_back: usize) -> (f64, f64, f64, f64) {
        let k = steps_back as f64;
        let x0 = self.x - self.velocity.0 * k;
        let z0 = self.z - self.velocity.1 * k;
        (x0, x0 + self.w, z0, z0 + self.d)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub objects: Vec<SceneObject>,
    pub cam_height: f64,
}

/// One training record: `frames` are the rendered images oldest first (the
/// final frame is the prediction target), `gt` the per-class occupancy at
/// the final frame, `visibility` the unoccluded in-FOV cells.
pub struct Sample<T: Scalar> {
    pub frames: Vec<Tensor<T>>,
    pub cam: CameraIntrinsics,
    pub gt: Tensor<T>,
    pub visibility: Tensor<T>,
}

impl<T: Scalar> Sample<T> {
    pub fn image(&self) -> &Tensor<T> {
        self.frames.last().expect("at least one frame")
    }
}

/// Generation parameters: camera, grids, and the object-count/size ranges.
#[derive(Debug, Clone, PartialEq)]
pub struct GenSpec {
    pub image_height: usize,
    pub image_width: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub cam_height: f64,
    pub bev_z: usize,
    pub bev_x: usize,
    pub cell_size: f64,
    pub r_min: f64,
    pub r_max: f64,
    pub temporal: usize,
    pub cars_min: usize,
    pub cars_max: usize,
    pub peds_min: usize,
    pub peds_max: usize,
    pub z_min: f64,
    pub z_max: f64,
    pub car_width: (f64, f64),
    pub car_depth: (f64, f64),
    pub car_height: f64,
    pub ped_size: f64,
    pub ped_height: f64,
    pub speed_max: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            image_height: 64,
            image_width: 64,
            fx: 32.0,
            fy: 32.0,
            cx: 32.0,
            cy: 32.0,
            cam_height: 1.5,
            bev_z: 32,
            bev_x: 32,
            cell_size: 0.5,
            r_min: 1.0,
            r_max: 16.0,
            temporal: 1,
            cars_min: 1,
            cars_max: 2,
            peds_min: 1,
            peds_max: 2,
            z_min: 2.5,
            z_max: 12.0,
            car_width: (1.6, 2.4),
            car_depth: (3.2, 4.4),
            car_height: 1.5,
            ped_size: 0.5,
            ped_height: 1.8,
            speed_max: 0.4,
        }
    }
}

impl GenSpec {
    pub fn camera(&self) -> Result<CameraIntrinsics> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy)
    }

    pub fn bev_grid(&self) -> BevGrid {
        BevGrid { z_cells: self.bev_z, x_cells: self.bev_x, cell_size: self.cell_size }
    }

    /// Full-resolution polar grid, used for the FOV mask and visibility.
    pub fn polar_grid(&self) -> Result<PolarGrid> {
        let cam = self.camera()?;
        build_polar_grid(self.image_width, &cam, 1, self.r_min, self.r_max)
    }

    pub fn parse(text: &str) -> Result<GenSpec> {
        let mut spec = GenSpec::default();
        for (key, value) in parse_kv(text)? {
            spec.apply(&key, &value)?;
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn load(path: &Path) -> Result<GenSpec> {
        GenSpec::parse(&std::fs::read_to_string(path)?)
    }

    fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let int = |v: &str| -> Result<usize> {
            v.parse().map_err(|_| Error::Config(format!("{key}: '{v}' is not an integer")))
        };
        let num = |v: &str| -> Result<f64> {
            v.parse().map_err(|_| Error::Config(format!("{key}: '{v}' is not a number")))
        };
        match key {
            "image.height" => self.image_height = int(value)?,
            "image.width" => self.image_width = int(value)?,
            "camera.fx" => self.fx = num(value)?,
            "camera.fy" => self.fy = num(value)?,
            "camera.cx" => self.cx = num(value)?,
            "camera.cy" => self.cy = num(value)?,
            "camera.height" => self.cam_height = num(value)?,
            "bev.z_cells" => self.bev_z = int(value)?,
            "bev.x_cells" => self.bev_x = int(value)?,
            "bev.cell_size" => self.cell_size = num(value)?,
            "bev.r_min" => self.r_min = num(value)?,
            "bev.r_max" => self.r_max = num(value)?,
            "temporal" => self.temporal = int(value)?,
            "scene.cars_min" => self.cars_min = int(value)?,
            "scene.cars_max" => self.cars_max = int(value)?,
            "scene.peds_min" => self.peds_min = int(value)?,
            "scene.peds_max" => self.peds_max = int(value)?,
            "scene.z_min" => self.z_min = num(value)?,
            "scene.z_max" => self.z_max = num(value)?,
            "scene.car_width_min" => self.car_width.0 = num(value)?,
            "scene.car_width_max" => self.car_width.1 = num(value)?,
            "scene.car_depth_min" => self.car_depth.0 = num(value)?,
            "scene.car_depth_max" => self.car_depth.1 = num(value)?,
            "scene.car_height" => self.car_height = num(value)?,
            "scene.ped_size" => self.ped_size = num(value)?,
            "scene.ped_height" => self.ped_height = num(value)?,
            "scene.speed_max" => self.speed_max = num(value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.cars_min > self.cars_max || self.peds_min > self.peds_max {
            return Err(Error::Config("scene.*_min must not exceed *_max".into()));
        }
        if self.z_min <= self.r_min || self.z_max >= self.r_max {
            return Err(Error::Config(format!(
                "scene.z range [{}, {}] must lie inside [{}, {}]",
                self.z_min, self.z_max, self.r_min, self.r_max
            )));
        }
        if self.temporal == 0 {
            return Err(Error::Config("temporal must be at least 1".into()));
        }
        self.camera()?;
        Ok(())
    }

    pub fn canonical(&self) -> String {
        let mut out = String::new();
        let mut kv = |k: &str, v: String| {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        };
        kv("bev.cell_size", format!("{}", self.cell_size));
        kv("bev.r_max", format!("{}", self.r_max));
        kv("bev.r_min", format!("{}", self.r_min));
        kv("bev.x_cells", self.bev_x.to_string());
        kv("bev.z_cells", self.bev_z.to_string());
        kv("camera.cx", format!("{}", self.cx));
        kv("camera.cy", format!("{}", self.cy));
        kv("camera.fx", format!("{}", self.fx));
        kv("camera.fy", format!("{}", self.fy));
        kv("camera.height", format!("{}", self.cam_height));
        kv("image.height", self.image_height.to_string());
        kv("image.width", self.image_width.to_string());
        kv("scene.car_depth_max", format!("{}", self.car_depth.1));
        kv("scene.car_depth_min", format!("{}", self.car_depth.0));
        kv("scene.car_height", format!("{}", self.car_height));
        kv("scene.car_width_max", format!("{}", self.car_width.1));
        kv("scene.car_width_min", format!("{}", self.car_width.0));
        kv("scene.cars_max", self.cars_max.to_string());
        kv("scene.cars_min", self.cars_min.to_string());
        kv("scene.ped_height", format!("{}", self.ped_height));
        kv("scene.ped_size", format!("{}", self.ped_size));
        kv("scene.peds_max", self.peds_max.to_string());
        kv("scene.peds_min", self.peds_min.to_string());
        kv("scene.speed_max", format!("{}", self.speed_max));
        kv("scene.z_max", format!("{}", self.z_max));
        kv("scene.z_min", format!("{}", self.z_min));
        kv("temporal", self.temporal.to_string());
        out
    }
}

const PLACEMENT_RETRIES: usize = 200;
const VELOCITY_RETRIES: usize = 50;
/// Clearance kept between footprints when placing objects.
const PLACEMENT_GAP: f64 = 0.3;

/// Deterministic scene synthesis: object counts from the configured ranges,
/// rejection-sampled non-overlapping footprints inside the camera wedge.
pub fn generate_scene(seed: u64, index: u64, spec: &GenSpec) -> Result<Scene> {
    let mut rng = sample_rng(seed, index);
    let n_cars = rng.gen_range(spec.cars_min..=spec.cars_max);
    let n_peds = rng.gen_range(spec.peds_min..=spec.peds_max);
    let mut objects: Vec<SceneObject> = Vec::new();
    let half_x = spec.bev_x as f64 * spec.cell_size / 2.0;
    let edge_angle = column_to_angle(spec.image_width - 1, &spec.camera()?);
    let edge_tan = edge_angle.tan();
    for i in 0..n_cars + n_peds {
        let class = if i < n_cars { ObjectClass::Car } else { ObjectClass::Pedestrian };
        let (w, d, height) = match class {
            ObjectClass::Car => (
                rng.gen_range(spec.car_width.0..=spec.car_width.1),
                rng.gen_range(spec.car_depth.0..=spec.car_depth.1),
                spec.car_height,
            ),
            ObjectClass::Pedestrian => (spec.ped_size, spec.ped_size, spec.ped_height),
        };
        let mut placed = false;
        for _ in 0..PLACEMENT_RETRIES {
            let z0 = rng.gen_range(spec.z_min..spec.z_max);
            if z0 + d > spec.r_max {
                continue;
            }
            // keep the footprint inside both the grid and the camera wedge
            let lat = (half_x - w).min(z0 * edge_tan - w);
            if lat <= 0.0 {
                continue;
            }
            let x0 = rng.gen_range(-lat..lat - w.min(lat));
            let candidate = SceneObject { class, x: x0, z: z0, w, d, height, velocity: (0.0, 0.0) };
            if objects.iter().all(|o| disjoint(o, &candidate, PLACEMENT_GAP)) {
                objects.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "could not place object {} of {} after {} attempts",
                i + 1,
                n_cars + n_peds,
                PLACEMENT_RETRIES
            )));
        }
    }
    // constant per-frame velocities for temporal sequences; every past
    // frame must stay in bounds and collision-free
    if spec.temporal > 1 {
        for idx in 0..objects.len() {
            let mut chosen = (0.0, 0.0);
            for _ in 0..VELOCITY_RETRIES {
                let v = (
                    rng.gen_range(-spec.speed_max..=spec.speed_max),
                    rng.gen_range(-spec.speed_max..=spec.speed_max),
                );
                objects[idx].velocity = v;
                if frames_feasible(&objects, spec, half_x) {
                    chosen = v;
                    break;
                }
            }
            objects[idx].velocity = chosen;
        }
    }
    Ok(Scene { objects, cam_height: spec.cam_height })
}

fn sample_rng(seed: u64, index: u64) -> ChaCha12Rng {
    ChaCha12Rng::seed_from_u64(seed ^ index.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

fn disjoint(a: &SceneObject, b: &SceneObject, gap: f64) -> bool {
    let (ax0, ax1, az0, az1) = a.footprint_at(0);
    let (bx0, bx1, bz0, bz1) = b.footprint_at(0);
    ax1 + gap <= bx0 || bx1 + gap <= ax0 || az1 + gap <= bz0 || bz1 + gap <= az0
}

fn frames_feasible(objects: &[SceneObject], spec: &GenSpec, half_x: f64) -> bool {
    for back in 1..spec.temporal {
        for (i, o) in objects.iter().enumerate() {
            let (x0, x1, z0, z1) = o.footprint_at(back);
            if x0 < -half_x || x1 > half_x || z0 < spec.r_min || z1 > spec.r_max {
                return false;
            }
            for other in &objects[i + 1..] {
                let (bx0, bx1, bz0, bz1) = other.footprint_at(back);
                let sep = x1 <= bx0 || bx1 <= x0 || z1 <= bz0 || bz1 <= z0;
                if !sep {
                    return false;
                }
            }
        }
    }
    true
}

/// Interval of ray lengths (rho along the ray at angle theta) where the ray
/// crosses the footprint, or None.
fn ray_box_interval(theta: f64, x0: f64, x1: f64, z0: f64, z1: f64) -> Option<(f64, f64)> {
    let (dx, dz) = (theta.sin(), theta.cos());
    // dz > 0 always (angles strictly inside +-pi/2)
    let (mut t_lo, mut t_hi) = (z0 / dz, z1 / dz);
    if t_hi < t_lo {
        std::mem::swap(&mut t_lo, &mut t_hi);
    }
    if dx.abs() < 1e-12 {
        if x0 > 0.0 || x1 < 0.0 {
            return None;
        }
    } else {
        let (mut u_lo, mut u_hi) = (x0 / dx, x1 / dx);
        if u_hi < u_lo {
            std::mem::swap(&mut u_lo, &mut u_hi);
        }
        t_lo = t_lo.max(u_lo);
        t_hi = t_hi.min(u_hi);
    }
    if t_hi >= t_lo && t_hi > 0.0 {
        Some((t_lo.max(0.0), t_hi))
    } else {
        None
    }
}

/// Per-column ray cast at `steps_back` frames before the final one:
/// (object index, entry, exit) sorted far-to-near for painter's ordering.
fn column_hits(scene: &Scene, theta: f64, steps_back: usize) -> Vec<(usize, f64, f64)> {
    let mut hits = Vec::new();
    for (i, o) in scene.objects.iter().enumerate() {
        let (x0, x1, z0, z1) = o.footprint_at(steps_back);
        if let Some((t_in, t_out)) = ray_box_interval(theta, x0, x1, z0, z1) {
            hits.push((i, t_in, t_out));
        }
    }
    hits.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap());
    hits
}

/// Render the scene into a [3, H, W] image by casting one ray per column:
/// sky above the horizon, ground below, then objects painted back-to-front
/// over their projected vertical spans.
pub fn render_columns<T: Scalar>(
    scene: &Scene,
    cam: &CameraIntrinsics,
    height: usize,
    width: usize,
    steps_back: usize,
) -> Tensor<T> {
    let mut img = Tensor::<T>::zeros(vec![3, height, width]);
    let paint = |img: &mut Tensor<T>, u: usize, v0: usize, v1: usize, color: [f64; 3]| {
        for v in v0..v1.min(height) {
            for c in 0..3 {
                img.set(&[c, v, u], T::from_f64(color[c]));
            }
        }
    };
    for u in 0..width {
        let theta = column_to_angle(u, cam);
        // sky, then ground below the horizon row (pixel centers below cy)
        paint(&mut img, u, 0, height, COLOR_SKY);
        let horizon = (cam.cy - 0.5).ceil().max(0.0) as usize;
        paint(&mut img, u, horizon, height, COLOR_GROUND);
        for (idx, t_in, t_out) in column_hits(scene, theta, steps_back) {
            let o = &scene.objects[idx];
            let cos = theta.cos();
            let (z_in, z_out) = (t_in * cos, t_out * cos);
            if z_in <= 0.0 {
                continue;
            }
            // lowest visible point: base of the near face; highest: the top
            // edge of the near face for tall objects, far face otherwise
            let v_bottom = cam.cy + cam.fy * scene.cam_height / z_in;
            let z_top = if o.height >= scene.cam_height { z_in } else { z_out };
            let v_top = cam.cy - cam.fy * (o.height - scene.cam_height) / z_top;
            let v0 = (v_top - 0.5).ceil().max(0.0) as usize;
            let v1 = (v_bottom - 0.5).floor() as i64 + 1;
            paint(&mut img, u, v0, v1.max(0) as usize, o.class.color());
        }
    }
    img
}

/// Rasterize ground truth and visibility at the final frame. A cell is
/// labeled with a class when its center lies inside a footprint of that
/// class (the ground class covers every in-FOV cell); it is invisible when
/// some object's footprint interval ends strictly before the cell along its
/// ray.
pub fn rasterize_gt<T: Scalar>(
    scene: &Scene,
    bgrid: &BevGrid,
    pgrid: &PolarGrid,
) -> (Tensor<T>, Tensor<T>) {
    let (zc, xc) = (bgrid.z_cells, bgrid.x_cells);
    let mut gt = Tensor::<T>::zeros(vec![NUM_CLASSES, zc, xc]);
    let mut vis = Tensor::<T>::zeros(vec![zc, xc]);
    let w = pgrid.num_angles();
    for iz in 0..zc {
        for ix in 0..xc {
            let (x, z) = bgrid.cell_center(iz, ix);
            let theta = (x / z).atan();
            let rho = (x * x + z * z).sqrt();
            let in_fov = theta >= pgrid.angles[0]
                && theta <= pgrid.angles[w - 1]
                && rho >= pgrid.r_min
                && rho <= pgrid.r_max;
            if !in_fov {
                continue;
            }
            gt.set(&[CLASS_GROUND, iz, ix], T::ONE);
            let mut occluded = false;
            for o in &scene.objects {
                let (x0, x1, z0, z1) = o.footprint_at(0);
                if x >= x0 && x < x1 && z >= z0 && z < z1 {
                    gt.set(&[o.class.index(), iz, ix], T::ONE);
                }
                if let Some((_, t_out)) = ray_box_interval(theta, x0, x1, z0, z1) {
                    if t_out < rho - 1e-9 {
                        occluded = true;
                    }
                }
            }
            if !occluded {
                vis.set(&[iz, ix], T::ONE);
            }
        }
    }
    (gt, vis)
}

/// Generate the full sample for `(seed, index)`: T rendered frames plus
/// ground truth and visibility for the final frame.
pub fn generate_sample<T: Scalar>(seed: u64, index: u64, spec: &GenSpec) -> Result<Sample<T>> {
    let scene = generate_scene(seed, index, spec)?;
    let cam = spec.camera()?;
    let mut frames = Vec::with_capacity(spec.temporal);
    for t in 0..spec.temporal {
        let back = spec.temporal - 1 - t;
        frames.push(render_columns(&scene, &cam, spec.image_height, spec.image_width, back));
    }
    let pgrid = spec.polar_grid()?;
    let (gt, visibility) = rasterize_gt(&scene, &spec.bev_grid(), &pgrid);
    Ok(Sample { frames, cam, gt, visibility })
}

// ---- dataset directory layout ----------------------------------------------

pub fn sample_dir_name(index: u64) -> String {
    format!("sample_{index:06}")
}

/// Write one sample directory: image.tnsr (+ image.ppm for inspection),
/// intrinsics.txt, gt.tnsr, vis.pgm, and frame_%d.tnsr for temporal sets.
pub fn write_sample<T: Scalar>(dir: &Path, sample: &Sample<T>) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    sample.image().save(&dir.join("image.tnsr"))?;
    image_io::write_ppm(&dir.join("image.ppm"), sample.image())?;
    sample.cam.save(&dir.join("intrinsics.txt"))?;
    sample.gt.save(&dir.join("gt.tnsr"))?;
    image_io::write_pgm(&dir.join("vis.pgm"), &sample.visibility)?;
    if sample.frames.len() > 1 {
        for (t, frame) in sample.frames.iter().enumerate() {
            frame.save(&dir.join(format!("frame_{t}.tnsr")))?;
        }
    }
    Ok(())
}

/// Read a sample directory back; `temporal` selects how many frames to
/// expect. Falls back to image.ppm when image.tnsr is absent.
pub fn read_sample<T: Scalar>(dir: &Path, temporal: usize) -> Result<Sample<T>> {
    let image = {
        let tnsr = dir.join("image.tnsr");
        if tnsr.exists() {
            Tensor::load(&tnsr)?
        } else {
            image_io::read_ppm(&dir.join("image.ppm"))?
        }
    };
    let cam = CameraIntrinsics::load(&dir.join("intrinsics.txt"))?;
    let gt = Tensor::load(&dir.join("gt.tnsr"))?;
    let visibility = image_io::read_pgm(&dir.join("vis.pgm"))?;
    let frames = if temporal > 1 {
        let mut frames = Vec::with_capacity(temporal);
        for t in 0..temporal {
            frames.push(Tensor::load(&dir.join(format!("frame_{t}.tnsr")))?);
        }
        frames
    } else {
        vec![image]
    };
    Ok(Sample { frames, cam, gt, visibility })
}

/// Generate `count` samples under `out`, with a manifest recording the spec
/// and the sample ids. Sample generation is pure in (seed, index).
pub fn generate_dataset<T: Scalar>(
    out: &Path,
    spec: &GenSpec,
    count: u64,
    seed: u64,
    threads: usize,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out)?;
    let indices: Vec<u64> = (0..count).collect();
    let write_one = |&index: &u64| -> Result<PathBuf> {
        let sample = generate_sample::<T>(seed, index, spec)?;
        let dir = out.join(sample_dir_name(index));
        write_sample(&dir, &sample)?;
        Ok(dir)
    };
    let dirs: Vec<PathBuf> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Generation(e.to_string()))?;
        pool.install(|| {
            use rayon::prelude::*;
            indices.par_iter().map(write_one).collect::<Result<Vec<_>>>()
        })?
    } else {
        indices.iter().map(write_one).collect::<Result<Vec<_>>>()?
    };
    let mut manifest = String::new();
    manifest.push_str(&format!("count = {count}\nseed = {seed}\n"));
    manifest.push_str(&spec.canonical());
    manifest.push_str("samples:\n");
    for index in &indices {
        manifest.push_str(&sample_dir_name(*index));
        manifest.push('\n');
    }
    std::fs::write(out.join("manifest.txt"), manifest)?;
    Ok(dirs)
}

/// Sample directories listed by the dataset manifest.
pub fn list_dataset(dir: &Path) -> Result<Vec<PathBuf>> {
    let manifest = std::fs::read_to_string(dir.join("manifest.txt")).map_err(|e| Error::Format {
        path: dir.join("manifest.txt").display().to_string(),
        msg: format!("missing or unreadable manifest: {e}"),
    })?;
    let mut dirs = Vec::new();
    let mut in_list = false;
    for line in manifest.lines() {
        if in_list {
            let name = line.trim();
            if !name.is_empty() {
                dirs.push(dir.join(name));
            }
        } else if line.trim() == "samples:" {
            in_list = true;
        }
    }
    if dirs.is_empty() {
        return Err(Error::Format {
            path: dir.join("manifest.txt").display().to_string(),
            msg: "no samples listed".into(),
        });
    }
    Ok(dirs)
}

/// The generation spec echoed in a dataset manifest.
pub fn dataset_spec(dir: &Path) -> Result<GenSpec> {
    let manifest = std::fs::read_to_string(dir.join("manifest.txt"))?;
    let head: String = manifest
        .lines()
        .take_while(|l| l.trim() != "samples:")
        .filter(|l| !l.starts_with("count =") && !l.starts_with("seed ="))
        .collect::<Vec<_>>()
        .join("\n");
    GenSpec::parse(&head)
}
