//! Intersection-over-union evaluation on masked occupancy grids.

use crate::error::{Error, Result};
use crate::model::{Geometry, Model, ModelOutput};
use crate::numerics::{Scalar, Tensor};
use crate::synthdata::Sample;

/// IoU of two binary grids restricted to masked-in cells; an empty masked
/// union counts as a perfect 1 (logged by callers when it matters).
pub fn iou<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, mask: &Tensor<T>) -> Result<f64> {
    if pred.shape() != gt.shape() || pred.shape() != mask.shape() {
        return Err(Error::DimMismatch {
            op: "iou",
            lhs: pred.shape().to_vec(),
            rhs: gt.shape().to_vec(),
        });
    }
    let mut inter = 0u64;
    let mut union = 0u64;
    for ((&p, &g), &m) in pred.data().iter().zip(gt.data()).zip(mask.data()) {
        if m.to_f64() == 0.0 {
            continue;
        }
        let (p, g) = (p.to_f64() != 0.0, g.to_f64() != 0.0);
        inter += (p && g) as u64;
        union += (p || g) as u64;
    }
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

/// Evaluation results: per-class IoU plus their arithmetic mean, and the
/// training loss trace when produced by a training run.
#[derive(Debug, Clone)]
pub struct Metrics {
    pub per_class: Vec<(String, f64)>,
    pub mean: f64,
    pub loss_trace: Vec<f64>,
}

impl Metrics {
    pub fn csv(&self) -> String {
        let mut out = String::from("class,iou\n");
        for (name, v) in &self.per_class {
            out.push_str(&format!("{name},{v}\n"));
        }
        out.push_str(&format!("mean,{}\n", self.mean));
        out
    }

    pub fn parse_csv(text: &str) -> Result<Metrics> {
        let mut per_class = Vec::new();
        let mut mean = None;
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != "class,iou" {
                    return Err(Error::Format {
                        path: "metrics.csv".into(),
                        msg: format!("bad header '{line}'"),
                    });
                }
                continue;
            }
            let (name, v) = line.split_once(',').ok_or_else(|| Error::Format {
                path: "metrics.csv".into(),
                msg: format!("bad row '{line}'"),
            })?;
            let value: f64 = v.parse().map_err(|_| Error::Format {
                path: "metrics.csv".into(),
                msg: format!("bad value '{v}'"),
            })?;
            if name == "mean" {
                mean = Some(value);
            } else {
                per_class.push((name.to_string(), value));
            }
        }
        Ok(Metrics {
            per_class,
            mean: mean.ok_or_else(|| Error::Format {
                path: "metrics.csv".into(),
                msg: "missing mean row".into(),
            })?,
            loss_trace: Vec::new(),
        })
    }
}

pub fn class_name(k: usize, total: usize) -> String {
    if total == crate::synthdata::NUM_CLASSES {
        match k {
            0 => "ground".into(),
            1 => "car".into(),
            2 => "pedestrian".into(),
            _ => format!("class{k}"),
        }
    } else {
        format!("class{k}")
    }
}

/// Threshold for binarizing predicted probabilities.
pub const PROB_THRESHOLD: f64 = 0.5;

/// Aggregate masked IoU of a model over a sample set, accumulating
/// intersection and union counts across samples at the full output scale.
/// The cell mask is the model FOV intersected with per-sample visibility.
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    samples: &[Sample<T>],
    threads: usize,
) -> Result<Metrics> {
    let k = model.cfg.classes;
    let eval_one = |sample: &Sample<T>| -> Result<(Vec<u64>, Vec<u64>)> {
        let geom = model.build_geometry(&sample.cam)?;
        let out = model.forward(&geom, &sample.frames)?;
        Ok(count_one(model, &geom, &out, sample))
    };
    let counts: Vec<(Vec<u64>, Vec<u64>)> = if threads > 1 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .map_err(|e| Error::Config(e.to_string()))?;
        pool.install(|| {
            use rayon::prelude::*;
            samples.par_iter().map(eval_one).collect::<Result<Vec<_>>>()
        })?
    } else {
        samples.iter().map(eval_one).collect::<Result<Vec<_>>>()?
    };
    let mut inter = vec![0u64; k];
    let mut union = vec![0u64; k];
    for (ci, cu) in counts {
        for c in 0..k {
            inter[c] += ci[c];
            union[c] += cu[c];
        }
    }
    let mut per_class = Vec::new();
    let mut sum = 0.0;
    for c in 0..k {
        let v = if union[c] == 0 { 1.0 } else { inter[c] as f64 / union[c] as f64 };
        sum += v;
        per_class.push((class_name(c, k), v));
    }
    Ok(Metrics {
        mean: sum / k as f64,
        per_class,
        loss_trace: Vec::new(),
    })
}

fn count_one<T: Scalar>(
    model: &Model<T>,
    geom: &Geometry<T>,
    out: &ModelOutput<T>,
    sample: &Sample<T>,
) -> (Vec<u64>, Vec<u64>) {
    let k = model.cfg.classes;
    let (z, x) = (model.cfg.bev_z, model.cfg.bev_x);
    let probs = &out.probs[0];
    let mut inter = vec![0u64; k];
    let mut union = vec![0u64; k];
    for iz in 0..z {
        for ix in 0..x {
            let masked = geom.fov_mask.at(&[iz, ix]).to_f64() != 0.0
                && sample.visibility.at(&[iz, ix]).to_f64() != 0.0;
            if !masked {
                continue;
            }
            for c in 0..k {
                let p = probs.at(&[c, iz, ix]).to_f64() > PROB_THRESHOLD;
                let g = sample.gt.at(&[c, iz, ix]).to_f64() != 0.0;
                inter[c] += (p && g) as u64;
                union[c] += (p || g) as u64;
            }
        }
    }
    (inter, union)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(vals: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(vec![2, 4], vals).unwrap()
    }

    #[test]
    fn identical_sets_score_one() {
        let a = t(&[1., 0., 1., 0., 1., 1., 0., 0.]);
        let m = t(&[1.; 8]);
        assert_eq!(iou(&a, &a, &m).unwrap(), 1.0);
    }

    #[test]
    fn disjoint_sets_score_zero() {
        let a = t(&[1., 1., 0., 0., 0., 0., 0., 0.]);
        let b = t(&[0., 0., 1., 1., 0., 0., 0., 0.]);
        let m = t(&[1.; 8]);
        assert_eq!(iou(&a, &b, &m).unwrap(), 0.0);
    }

    #[test]
    fn hand_counted_overlap() {
        // |pred| = 4, |gt| = 4, overlap 2 -> 2/6
        let a = t(&[1., 1., 1., 1., 0., 0., 0., 0.]);
        let b = t(&[1., 1., 0., 0., 1., 1., 0., 0.]);
        let m = t(&[1.; 8]);
        assert!((iou(&a, &b, &m).unwrap() - 2.0 / 6.0).abs() < 1e-12);
    }

    #[test]
    fn empty_masked_union_counts_as_one() {
        let a = t(&[1., 1., 0., 0., 0., 0., 0., 0.]);
        let b = t(&[1., 0., 1., 0., 0., 0., 0., 0.]);
        let m = t(&[0., 0., 0., 0., 1., 1., 1., 1.]);
        assert_eq!(iou(&a, &b, &m).unwrap(), 1.0);
    }

    #[test]
    fn mask_restricts_the_counts() {
        let a = t(&[1., 1., 0., 0., 1., 0., 0., 0.]);
        let b = t(&[1., 0., 0., 0., 0., 1., 0., 0.]);
        let m = t(&[1., 1., 1., 1., 0., 0., 0., 0.]);
        // masked-in: pred {0,1}, gt {0} -> inter 1, union 2
        assert_eq!(iou(&a, &b, &m).unwrap(), 0.5);
    }

    #[test]
    fn metrics_csv_roundtrip() {
        let m = Metrics {
            per_class: vec![("ground".into(), 0.9), ("car".into(), 0.5)],
            mean: 0.7,
            loss_trace: vec![],
        };
        let parsed = Metrics::parse_csv(&m.csv()).unwrap();
        assert_eq!(parsed.per_class, m.per_class);
        assert_eq!(parsed.mean, 0.7);
    }
}
