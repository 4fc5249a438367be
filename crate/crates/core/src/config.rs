//! Line-oriented `key = value` configuration with `#` comments. Unknown
//! keys are errors; the canonical echo embedded in checkpoints is the
//! sorted key=value rendering of every field.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::numerics::LookbackNumerator;

/// Attention mode of the decoder cross-attention. Mono modes constrain the
/// alignment monotonically in column height; `MonoUp` flips each column
/// before encoding so the lookback covers what lies above a point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum AttentionMode {
    #[default]
    Soft,
    MonoDown,
    MonoUp,
}

impl AttentionMode {
    pub fn as_str(self) -> &'static str {
        match self {
            AttentionMode::Soft => "soft",
            AttentionMode::MonoDown => "mono_down",
            AttentionMode::MonoUp => "mono_up",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "soft" => Ok(AttentionMode::Soft),
            "mono_down" => Ok(AttentionMode::MonoDown),
            "mono_up" => Ok(AttentionMode::MonoUp),
            other => Err(Error::Config(format!(
                "attention.mode must be soft|mono_down|mono_up, got '{other}'"
            ))),
        }
    }
}

/// Where polar-angle encodings are injected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PolarEncoding {
    Agnostic,
    ImagePlane,
    BevPlane,
    #[default]
    Both,
}

impl PolarEncoding {
    pub fn as_str(self) -> &'static str {
        match self {
            PolarEncoding::Agnostic => "agnostic",
            PolarEncoding::ImagePlane => "image_plane",
            PolarEncoding::BevPlane => "bev_plane",
            PolarEncoding::Both => "both",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "agnostic" => Ok(PolarEncoding::Agnostic),
            "image_plane" => Ok(PolarEncoding::ImagePlane),
            "bev_plane" => Ok(PolarEncoding::BevPlane),
            "both" => Ok(PolarEncoding::Both),
            other => Err(Error::Config(format!(
                "model.polar_encoding must be agnostic|image_plane|bev_plane|both, got '{other}'"
            ))),
        }
    }

    pub fn image_plane(self) -> bool {
        matches!(self, PolarEncoding::ImagePlane | PolarEncoding::Both)
    }

    pub fn bev_plane(self) -> bool {
        matches!(self, PolarEncoding::BevPlane | PolarEncoding::Both)
    }
}

fn numerator_str(n: LookbackNumerator) -> &'static str {
    match n {
        LookbackNumerator::SlotJ => "slot_j",
        LookbackNumerator::StopK => "stop_k",
    }
}

fn parse_numerator(s: &str) -> Result<LookbackNumerator> {
    match s {
        "slot_j" => Ok(LookbackNumerator::SlotJ),
        "stop_k" => Ok(LookbackNumerator::StopK),
        other => Err(Error::Config(format!(
            "attention.mail_numerator must be slot_j|stop_k, got '{other}'"
        ))),
    }
}

/// Frontend strides; one encoder/decoder pair per entry. The finer scale's
/// polar rays cover the far radial band, the coarser the near band.
pub const SCALE_STRIDES: [usize; 2] = [4, 8];

/// Architecture and grid configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub image_height: usize,
    pub image_width: usize,
    pub channels: usize,
    pub heads: usize,
    /// Radial bins decoded per scale.
    pub radial_bins: usize,
    pub classes: usize,
    pub attention_mode: AttentionMode,
    pub mail_numerator: LookbackNumerator,
    pub polar_encoding: PolarEncoding,
    pub horizontal_context: bool,
    /// Frames per sample; 1 disables the dynamics module.
    pub temporal: usize,
    pub bev_z: usize,
    pub bev_x: usize,
    pub cell_size: f64,
    pub r_min: f64,
    pub r_max: f64,
    /// Metric boundary between the near band (coarse scale) and far band
    /// (fine scale).
    pub band_split: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            image_height: 64,
            image_width: 64,
            channels: 32,
            heads: 4,
            radial_bins: 16,
            classes: 3,
            attention_mode: AttentionMode::Soft,
            mail_numerator: LookbackNumerator::SlotJ,
            polar_encoding: PolarEncoding::Both,
            horizontal_context: false,
            temporal: 1,
            bev_z: 32,
            bev_x: 32,
            cell_size: 0.5,
            r_min: 1.0,
            r_max: 16.0,
            band_split: 8.5,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let stride = *SCALE_STRIDES.last().unwrap();
        if self.image_height % stride != 0 || self.image_width % stride != 0 {
            return Err(Error::Config(format!(
                "image {}x{} must be divisible by the total stride {}",
                self.image_height, self.image_width, stride
            )));
        }
        if self.channels % 2 != 0 {
            return Err(Error::Config("model.channels must be even for sinusoid encodings".into()));
        }
        if self.channels % self.heads != 0 {
            return Err(Error::Config(format!(
                "model.channels {} must be divisible by model.heads {}",
                self.channels, self.heads
            )));
        }
        if self.channels < 4 {
            return Err(Error::Config("model.channels must be at least 4".into()));
        }
        if self.temporal == 0 {
            return Err(Error::Config("model.temporal must be at least 1".into()));
        }
        if self.classes == 0 || self.radial_bins == 0 {
            return Err(Error::Config("model.classes and model.radial_bins must be positive".into()));
        }
        if self.bev_z % 2 != 0 || self.bev_x % 2 != 0 {
            return Err(Error::Config("bev grid extents must be even (half-scale output)".into()));
        }
        if self.r_max <= self.r_min {
            return Err(Error::Config(format!("bev.r_max {} <= bev.r_min {}", self.r_max, self.r_min)));
        }
        if self.band_split <= self.r_min || self.band_split >= self.r_max {
            return Err(Error::Config(format!(
                "bev.band_split {} must lie strictly between {} and {}",
                self.band_split, self.r_min, self.r_max
            )));
        }
        Ok(())
    }

    pub fn feature_size(&self, scale: usize) -> (usize, usize) {
        let s = SCALE_STRIDES[scale];
        (self.image_height / s, self.image_width / s)
    }

    /// Radial band [lo, hi) covered by a scale's rays; the fine scale takes
    /// the far band.
    pub fn radial_band(&self, scale: usize) -> (f64, f64) {
        match scale {
            0 => (self.band_split, self.r_max),
            _ => (self.r_min, self.band_split),
        }
    }
}

/// Optimization parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainParams {
    pub lr: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainParams {
    fn default() -> Self {
        TrainParams {
            lr: 1e-3,
            epochs: 60,
            batch_size: 8,
            seed: 0,
        }
    }
}

/// Full run configuration: model, grids, optimizer.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainParams,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        cfg.apply_pairs(parse_kv(text)?)?;
        cfg.model.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &std::path::Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        RunConfig::parse(&text)
    }

    fn apply_pairs(&mut self, pairs: Vec<(String, String)>) -> Result<()> {
        for (key, value) in pairs {
            self.apply(&key, &value)?;
        }
        Ok(())
    }

    pub fn apply(&mut self, key: &str, value: &str) -> Result<()> {
        let m = &mut self.model;
        let t = &mut self.train;
        match key {
            "model.image_height" => m.image_height = parse_num(key, value)?,
            "model.image_width" => m.image_width = parse_num(key, value)?,
            "model.channels" => m.channels = parse_num(key, value)?,
            "model.heads" => m.heads = parse_num(key, value)?,
            "model.radial_bins" => m.radial_bins = parse_num(key, value)?,
            "model.classes" => m.classes = parse_num(key, value)?,
            "model.polar_encoding" => m.polar_encoding = PolarEncoding::parse(value)?,
            "model.horizontal_context" => m.horizontal_context = parse_bool(key, value)?,
            "model.temporal" => m.temporal = parse_num(key, value)?,
            "attention.mode" => m.attention_mode = AttentionMode::parse(value)?,
            "attention.mail_numerator" => m.mail_numerator = parse_numerator(value)?,
            "bev.z_cells" => m.bev_z = parse_num(key, value)?,
            "bev.x_cells" => m.bev_x = parse_num(key, value)?,
            "bev.cell_size" => m.cell_size = parse_float(key, value)?,
            "bev.r_min" => m.r_min = parse_float(key, value)?,
            "bev.r_max" => m.r_max = parse_float(key, value)?,
            "bev.band_split" => m.band_split = parse_float(key, value)?,
            "train.lr" => t.lr = parse_float(key, value)?,
            "train.epochs" => t.epochs = parse_num(key, value)?,
            "train.batch_size" => t.batch_size = parse_num(key, value)?,
            "train.seed" => t.seed = parse_num(key, value)?,
            other => return Err(Error::Config(format!("unknown key '{other}'"))),
        }
        Ok(())
    }

    /// Canonical sorted key=value rendering; parsing it reproduces the
    /// config exactly.
    pub fn canonical(&self) -> String {
        let m = &self.model;
        let t = &self.train;
        let mut map = BTreeMap::new();
        map.insert("model.image_height", m.image_height.to_string());
        map.insert("model.image_width", m.image_width.to_string());
        map.insert("model.channels", m.channels.to_string());
        map.insert("model.heads", m.heads.to_string());
        map.insert("model.radial_bins", m.radial_bins.to_string());
        map.insert("model.classes", m.classes.to_string());
        map.insert("model.polar_encoding", m.polar_encoding.as_str().to_string());
        map.insert("model.horizontal_context", m.horizontal_context.to_string());
        map.insert("model.temporal", m.temporal.to_string());
        map.insert("attention.mode", m.attention_mode.as_str().to_string());
        map.insert("attention.mail_numerator", numerator_str(m.mail_numerator).to_string());
        map.insert("bev.z_cells", m.bev_z.to_string());
        map.insert("bev.x_cells", m.bev_x.to_string());
        map.insert("bev.cell_size", fmt_float(m.cell_size));
        map.insert("bev.r_min", fmt_float(m.r_min));
        map.insert("bev.r_max", fmt_float(m.r_max));
        map.insert("bev.band_split", fmt_float(m.band_split));
        map.insert("train.lr", fmt_float(t.lr));
        map.insert("train.epochs", t.epochs.to_string());
        map.insert("train.batch_size", t.batch_size.to_string());
        map.insert("train.seed", t.seed.to_string());
        let mut out = String::new();
        for (k, v) in map {
            out.push_str(k);
            out.push_str(" = ");
            out.push_str(&v);
            out.push('\n');
        }
        out
    }
}

fn fmt_float(v: f64) -> String {
    // shortest representation that round-trips
    let s = format!("{v}");
    debug_assert_eq!(s.parse::<f64>().unwrap(), v);
    s
}

/// Split a config text into (key, value) pairs.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut pairs = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {}: expected 'key = value', got '{raw}'", lineno + 1))
        })?;
        pairs.push((key.trim().to_string(), value.trim().to_string()));
    }
    Ok(pairs)
}

fn parse_num<N: std::str::FromStr>(key: &str, value: &str) -> Result<N> {
    value
        .parse::<N>()
        .map_err(|_| Error::Config(format!("{key}: '{value}' is not a valid integer")))
}

fn parse_float(key: &str, value: &str) -> Result<f64> {
    value
        .parse::<f64>()
        .map_err(|_| Error::Config(format!("{key}: '{value}' is not a valid number")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!("{key}: '{value}' is not a boolean"))),
    }
}
