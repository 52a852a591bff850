//! One-pass evaluation metrics: success (overlap precision) curves,
//! center-distance precision, normalized precision, and report assembly.
//!
//! Conventions match the common benchmark toolkits: success counts frames
//! with IoU strictly above each of 101 uniform thresholds on [0,1], distance
//! metrics count frames at or below the threshold, and every curve's AUC is
//! the mean of its samples.

use crate::dataset::read_boxes;
use crate::error::{Error, Result};
use crate::geometry::{center_distance, iou, ImageBox};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

pub const SUCCESS_SAMPLES: usize = 101;
/// Pixel thresholds 0..=50 for the precision curve.
pub const PRECISION_SAMPLES: usize = 51;
/// The headline precision number is read at this pixel threshold.
pub const PRECISION_PX: f64 = 20.0;
/// Normalized-distance thresholds 0..=0.5 for normalized precision.
pub const NORM_PRECISION_SAMPLES: usize = 51;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

fn check_lengths(pred: &[ImageBox], gt: &[ImageBox]) -> Result<()> {
    if pred.len() != gt.len() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions vs {} ground-truth boxes",
            pred.len(),
            gt.len()
        )));
    }
    if gt.is_empty() {
        return Err(Error::InvalidArgument("empty sequence".into()));
    }
    Ok(())
}

fn fraction_passing(values: &[f64], pass: impl Fn(f64) -> bool) -> f64 {
    let n = values.iter().filter(|&&v| pass(v)).count();
    n as f64 / values.len() as f64
}

/// Success curve: OP_T over 101 uniform thresholds, IoU strictly above T.
pub fn success_curve(pred: &[ImageBox], gt: &[ImageBox]) -> Result<(Vec<f64>, f64)> {
    check_lengths(pred, gt)?;
    let ious: Vec<f64> = pred.iter().zip(gt).map(|(p, g)| iou(p, g)).collect();
    let curve: Vec<f64> = (0..SUCCESS_SAMPLES)
        .map(|k| {
            let t = k as f64 / (SUCCESS_SAMPLES - 1) as f64;
            fraction_passing(&ious, |v| v > t)
        })
        .collect();
    let auc = curve.iter().sum::<f64>() / curve.len() as f64;
    Ok((curve, auc))
}

/// Fraction of frames whose center distance, in image pixels, is at most
/// `d_px`.
pub fn precision(pred: &[ImageBox], gt: &[ImageBox], d_px: f64) -> Result<f64> {
    check_lengths(pred, gt)?;
    let dists: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| center_distance(p, g))
        .collect();
    Ok(fraction_passing(&dists, |v| v <= d_px))
}

fn precision_curve(pred: &[ImageBox], gt: &[ImageBox]) -> Result<Vec<f64>> {
    check_lengths(pred, gt)?;
    let dists: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| center_distance(p, g))
        .collect();
    Ok((0..PRECISION_SAMPLES)
        .map(|k| fraction_passing(&dists, |v| v <= k as f64))
        .collect())
}

/// Center distance with each axis divided by the ground-truth size on that
/// axis, so the unit is target extents instead of pixels.
pub fn normalized_distance(pred: &ImageBox, gt: &ImageBox) -> f64 {
    let (px, py) = pred.center();
    let (gx, gy) = gt.center();
    let dx = (px - gx) / gt.w;
    let dy = (py - gy) / gt.h;
    (dx * dx + dy * dy).sqrt()
}

/// Normalized precision curve over thresholds D in [0, 0.5] and its AUC.
pub fn norm_precision(pred: &[ImageBox], gt: &[ImageBox]) -> Result<(Vec<f64>, f64)> {
    check_lengths(pred, gt)?;
    let dists: Vec<f64> = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| normalized_distance(p, g))
        .collect();
    let curve: Vec<f64> = (0..NORM_PRECISION_SAMPLES)
        .map(|k| {
            let d = 0.5 * k as f64 / (NORM_PRECISION_SAMPLES - 1) as f64;
            fraction_passing(&dists, |v| v <= d)
        })
        .collect();
    let auc = curve.iter().sum::<f64>() / curve.len() as f64;
    Ok((curve, auc))
}

/// Metrics for one sequence, or means over sequences in the aggregate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SequenceMetrics {
    pub success_auc: f64,
    pub precision_20px: f64,
    pub norm_precision_auc: f64,
    pub op_curve: Vec<f64>,
    pub precision_curve: Vec<f64>,
    pub npr_curve: Vec<f64>,
}

pub fn evaluate_sequence(pred: &[ImageBox], gt: &[ImageBox]) -> Result<SequenceMetrics> {
    let (op_curve, success_auc) = success_curve(pred, gt)?;
    let precision_curve = precision_curve(pred, gt)?;
    let precision_20px = precision(pred, gt, PRECISION_PX)?;
    let (npr_curve, norm_precision_auc) = norm_precision(pred, gt)?;
    Ok(SequenceMetrics {
        success_auc,
        precision_20px,
        norm_precision_auc,
        op_curve,
        precision_curve,
        npr_curve,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub sequences: BTreeMap<String, SequenceMetrics>,
    /// Per-field mean over all sequences.
    pub aggregate: SequenceMetrics,
}

fn mean_metrics(all: &[&SequenceMetrics]) -> SequenceMetrics {
    let n = all.len() as f64;
    let mean_of = |f: fn(&SequenceMetrics) -> f64| all.iter().map(|m| f(m)).sum::<f64>() / n;
    let mean_curve = |f: fn(&SequenceMetrics) -> &Vec<f64>| -> Vec<f64> {
        let len = f(all[0]).len();
        (0..len)
            .map(|i| all.iter().map(|m| f(m)[i]).sum::<f64>() / n)
            .collect()
    };
    SequenceMetrics {
        success_auc: mean_of(|m| m.success_auc),
        precision_20px: mean_of(|m| m.precision_20px),
        norm_precision_auc: mean_of(|m| m.norm_precision_auc),
        op_curve: mean_curve(|m| &m.op_curve),
        precision_curve: mean_curve(|m| &m.precision_curve),
        npr_curve: mean_curve(|m| &m.npr_curve),
    }
}

/// Sequence names under a dataset root: subdirectories holding a
/// `groundtruth.txt`, sorted.
pub fn sequence_names(dataset_dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dataset_dir)?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| p.is_dir() && p.join("groundtruth.txt").is_file())
        .filter_map(|p| p.file_name().and_then(|n| n.to_str()).map(String::from))
        .collect();
    names.sort();
    if names.is_empty() {
        return Err(Error::Dataset(format!(
            "no sequences under {}",
            dataset_dir.display()
        )));
    }
    Ok(names)
}

/// Evaluates `<results_dir>/<name>.txt` against each dataset sequence's
/// ground truth and aggregates the per-sequence numbers.
pub fn run_eval(dataset_dir: &Path, results_dir: &Path) -> Result<MetricReport> {
    let mut sequences = BTreeMap::new();
    for name in sequence_names(dataset_dir)? {
        let gt = read_boxes(dataset_dir.join(&name).join("groundtruth.txt"))?;
        let result_file = results_dir.join(format!("{name}.txt"));
        if !result_file.is_file() {
            return Err(Error::Dataset(format!(
                "missing results for sequence `{name}`: {}",
                result_file.display()
            )));
        }
        let pred = read_boxes(&result_file)?;
        let metrics = evaluate_sequence(&pred, &gt)
            .map_err(|e| Error::Dataset(format!("sequence `{name}`: {e}")))?;
        sequences.insert(name, metrics);
    }
    let all: Vec<&SequenceMetrics> = sequences.values().collect();
    let aggregate = mean_metrics(&all);
    Ok(MetricReport {
        schema_version: REPORT_SCHEMA_VERSION,
        sequences,
        aggregate,
    })
}

impl MetricReport {
    pub fn write_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(std::io::BufWriter::new(f), self)
            .map_err(|e| Error::Dataset(format!("report serialization: {e}")))?;
        Ok(())
    }

    /// One row per sequence plus a `mean` row with the scalar metrics.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "sequence,success_auc,precision_20px,norm_precision_auc")?;
        let row = |f: &mut dyn Write, name: &str, m: &SequenceMetrics| {
            writeln!(
                f,
                "{name},{},{},{}",
                m.success_auc, m.precision_20px, m.norm_precision_auc
            )
        };
        for (name, m) in &self.sequences {
            row(&mut f, name, m)?;
        }
        row(&mut f, "mean", &self.aggregate)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Box2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_boxes(rng: &mut ChaCha12Rng, n: usize) -> Vec<ImageBox> {
        (0..n)
            .map(|_| {
                Box2::new(
                    rng.gen_range(0.0..80.0),
                    rng.gen_range(0.0..80.0),
                    rng.gen_range(5.0..40.0),
                    rng.gen_range(5.0..40.0),
                )
            })
            .collect()
    }

    #[test]
    fn perfect_predictions_hit_the_convention_ceilings() {
        let gt = vec![Box2::new(10.0, 20.0, 30.0, 40.0); 7];
        let (curve, auc) = success_curve(&gt, &gt).unwrap();
        // IoU is exactly 1, which does not exceed the final threshold T=1
        assert_eq!(curve[100], 0.0);
        assert!((auc - 100.0 / 101.0).abs() < 1e-12);
        assert_eq!(precision(&gt, &gt, PRECISION_PX).unwrap(), 1.0);
        let (_, npr) = norm_precision(&gt, &gt).unwrap();
        assert_eq!(npr, 1.0);
    }

    #[test]
    fn constant_half_iou_gives_half_auc() {
        // 3x1 boxes shifted by 1: intersection 2, union 4, IoU exactly 0.5
        let gt = vec![Box2::new(0.0, 0.0, 3.0, 1.0); 11];
        let pred = vec![Box2::new(1.0, 0.0, 3.0, 1.0); 11];
        for (p, g) in pred.iter().zip(&gt) {
            assert!((iou(p, g) - 0.5).abs() < 1e-12);
        }
        let (_, auc) = success_curve(&pred, &gt).unwrap();
        assert!(
            (auc - 0.5).abs() <= 1.0 / 202.0 + 1e-12,
            "AUC {auc} strays from 0.5 beyond sampling quantization"
        );
    }

    #[test]
    fn curves_match_brute_force_counting_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(50);
        for _ in 0..50 {
            let n = rng.gen_range(3..40);
            let pred = random_boxes(&mut rng, n);
            let gt = random_boxes(&mut rng, n);

            let (curve, auc) = success_curve(&pred, &gt).unwrap();
            for (k, &op) in curve.iter().enumerate() {
                let t = k as f64 / 100.0;
                let count = pred
                    .iter()
                    .zip(&gt)
                    .filter(|(p, g)| iou(p, g) > t)
                    .count();
                assert_eq!(op, count as f64 / n as f64, "threshold {t}");
            }
            assert_eq!(auc, curve.iter().sum::<f64>() / 101.0);

            let p20 = precision(&pred, &gt, 20.0).unwrap();
            let count = pred
                .iter()
                .zip(&gt)
                .filter(|(p, g)| center_distance(p, g) <= 20.0)
                .count();
            assert_eq!(p20, count as f64 / n as f64);

            let (npr_curve, _) = norm_precision(&pred, &gt).unwrap();
            for (k, &v) in npr_curve.iter().enumerate() {
                let d = 0.5 * k as f64 / 50.0;
                let count = pred
                    .iter()
                    .zip(&gt)
                    .filter(|(p, g)| normalized_distance(p, g) <= d)
                    .count();
                assert_eq!(v, count as f64 / n as f64, "threshold {d}");
            }
        }
    }

    #[test]
    fn normalized_offset_matches_hand_count() {
        // shift by 0.3 target widths on one axis: distance 0.3 for every
        // frame, so thresholds 0.30..=0.50 pass and 21 of 51 samples are 1
        let gt = vec![Box2::new(40.0, 40.0, 20.0, 10.0); 5];
        let pred: Vec<ImageBox> = gt.iter().map(|b| Box2::new(b.x + 6.0, b.y, b.w, b.h)).collect();
        let (curve, auc) = norm_precision(&pred, &gt).unwrap();
        assert_eq!(curve.iter().filter(|&&v| v == 1.0).count(), 21);
        assert!((auc - 21.0 / 51.0).abs() < 1e-12);

        // 6px pixel offset sits inside the 20px precision radius
        assert_eq!(precision(&pred, &gt, 20.0).unwrap(), 1.0);
        let far: Vec<ImageBox> = gt.iter().map(|b| Box2::new(b.x + 500.0, b.y, b.w, b.h)).collect();
        assert_eq!(precision(&far, &gt, 20.0).unwrap(), 0.0);
        let (_, npr_far) = norm_precision(&far, &gt).unwrap();
        assert_eq!(npr_far, 0.0);
    }

    #[test]
    fn mismatched_or_empty_inputs_are_rejected() {
        let a = vec![Box2::new(0.0, 0.0, 5.0, 5.0); 3];
        let b = vec![Box2::new(0.0, 0.0, 5.0, 5.0); 4];
        assert!(success_curve(&a, &b).is_err());
        assert!(precision(&a, &b, 20.0).is_err());
        assert!(norm_precision(&[], &[]).is_err());
    }

    #[test]
    fn run_eval_round_trips_and_names_missing_sequences() {
        use crate::dataset::{write_boxes, write_sequence_dir};
        use crate::synth::{SequenceSpec, SyntheticSequence};

        let root = tempfile::tempdir().unwrap();
        let data = root.path().join("data");
        let results = root.path().join("results");
        std::fs::create_dir_all(&results).unwrap();
        for (i, name) in ["seq-a", "seq-b"].iter().enumerate() {
            let spec = SequenceSpec {
                seed: 70 + i as u64,
                length: 5,
                ..SequenceSpec::default()
            };
            let seq = SyntheticSequence::generate(&spec).unwrap();
            write_sequence_dir(&data, name, &seq).unwrap();
            // results = the ground truth that landed on disk
            let gt = read_boxes(data.join(name).join("groundtruth.txt")).unwrap();
            write_boxes(results.join(format!("{name}.txt")), &gt).unwrap();
        }

        let report = run_eval(&data, &results).unwrap();
        assert_eq!(report.sequences.len(), 2);
        assert!((report.aggregate.success_auc - 100.0 / 101.0).abs() < 1e-12);
        assert_eq!(report.aggregate.precision_20px, 1.0);
        assert_eq!(report.aggregate.norm_precision_auc, 1.0);
        let mean_by_hand = report
            .sequences
            .values()
            .map(|m| m.success_auc)
            .sum::<f64>()
            / 2.0;
        assert_eq!(report.aggregate.success_auc, mean_by_hand);
        assert_eq!(
            report.aggregate.precision_20px,
            report.aggregate.precision_curve[20]
        );

        let json = root.path().join("report.json");
        let csv = root.path().join("report.csv");
        report.write_json(&json).unwrap();
        report.write_csv(&csv).unwrap();
        let back: MetricReport =
            serde_json::from_reader(std::fs::File::open(&json).unwrap()).unwrap();
        assert_eq!(back, report);
        let csv_text = std::fs::read_to_string(&csv).unwrap();
        assert_eq!(csv_text.lines().count(), 4);
        assert!(csv_text.lines().last().unwrap().starts_with("mean,"));

        std::fs::remove_file(results.join("seq-b.txt")).unwrap();
        let err = run_eval(&data, &results).unwrap_err().to_string();
        assert!(err.contains("seq-b"), "error must name the sequence: {err}");
    }
}
