//! Top-1 accuracy at IoU > 0.5 and the ablation table harness.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::data::{preprocess_image, Sample, Vocab};
use crate::error::{Error, Result};
use crate::losses::EPS;
use crate::model::{BoundingBox, StudentModel};
use crate::scalar::Real;

pub const IOU_THRESHOLD: f64 = 0.5;

/// Plain-number IoU of two center-format boxes; 0 when the union is empty.
pub fn iou(a: &BoundingBox<f64>, b: &BoundingBox<f64>) -> f64 {
    let [ax1, ay1, ax2, ay2] = a.corners();
    let [bx1, by1, bx2, by2] = b.corners();
    let iw = (ax2.min(bx2) - ax1.max(bx1)).max(0.0);
    let ih = (ay2.min(by2) - ay1.max(by1)).max(0.0);
    let inter = iw * ih;
    let union = a.w.max(0.0) * a.h.max(0.0) + b.w.max(0.0) * b.h.max(0.0) - inter;
    if union <= EPS {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalRecord {
    pub sample_id: u64,
    pub iou: f64,
    pub correct: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub n_samples: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    pub mean_iou: f64,
    pub records: Vec<EvalRecord>,
}

impl EvalReport {
    pub fn from_records(records: Vec<EvalRecord>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Config("evaluation split is empty".into()));
        }
        let n = records.len();
        let n_correct = records.iter().filter(|r| r.correct).count();
        let iou_sum: f64 = records.iter().map(|r| r.iou).sum();
        Ok(Self {
            n_samples: n,
            n_correct,
            accuracy: n_correct as f64 / n as f64,
            mean_iou: iou_sum / n as f64,
            records,
        })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = format!(
            "# n_samples={} n_correct={} accuracy={:.6} mean_iou={:.6}\nsample_id\tiou\tcorrect\n",
            self.n_samples, self.n_correct, self.accuracy, self.mean_iou
        );
        for r in &self.records {
            let _ = writeln!(out, "{}\t{:.6}\t{}", r.sample_id, r.iou, u8::from(r.correct));
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Scores `predict` on every sample.
pub fn evaluate_with<'a, I, F>(samples: I, mut predict: F) -> Result<EvalReport>
where
    I: IntoIterator<Item = &'a Sample>,
    F: FnMut(&Sample) -> Result<BoundingBox<f64>>,
{
    let mut records = Vec::new();
    for s in samples {
        let pred = predict(s)?;
        let v = iou(&pred, &s.gt_box);
        records.push(EvalRecord {
            sample_id: s.id,
            iou: v,
            correct: v > IOU_THRESHOLD,
        });
    }
    EvalReport::from_records(records)
}

/// Runs the student alone in inference mode.
pub fn evaluate<'a, T: Real, I>(model: &StudentModel<T>, vocab: &Vocab, samples: I) -> Result<EvalReport>
where
    I: IntoIterator<Item = &'a Sample>,
{
    let size = model.config().image_size;
    let max_tokens = model.config().max_tokens;
    evaluate_with(samples, |s| {
        let (img, lb) = preprocess_image(&s.image, size)?;
        let ids = vocab.tokenize(&s.expression, max_tokens);
        let pred = model.predict(&img.cast::<T>(), &ids)?.cast::<f64>();
        Ok(lb.unmap_box(&pred))
    })
}

/// A box at the image center with the mean ground-truth size of `train`.
pub fn center_box_baseline<'a, I>(train: I) -> Result<BoundingBox<f64>>
where
    I: IntoIterator<Item = &'a Sample>,
{
    let (mut w, mut h, mut n) = (0.0, 0.0, 0usize);
    for s in train {
        w += s.gt_box.w;
        h += s.gt_box.h;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Config("baseline needs at least one training sample".into()));
    }
    Ok(BoundingBox::new(0.5, 0.5, w / n as f64, h / n as f64))
}

#[derive(Clone, Debug)]
pub struct SeedRun {
    pub seed: u64,
    pub outcome: std::result::Result<EvalReport, String>,
}

#[derive(Clone, Debug)]
pub struct AblationCell {
    pub label: String,
    pub runs: Vec<SeedRun>,
}

impl AblationCell {
    fn accuracies(&self) -> Vec<f64> {
        self.runs
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok().map(|e| e.accuracy))
            .collect()
    }

    pub fn failed(&self) -> bool {
        self.runs.iter().any(|r| r.outcome.is_err())
    }

    /// Mean accuracy and half the min-max spread over successful seeds.
    pub fn summary(&self) -> Option<(f64, f64)> {
        let acc = self.accuracies();
        if acc.is_empty() {
            return None;
        }
        let mean = acc.iter().sum::<f64>() / acc.len() as f64;
        let lo = acc.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = acc.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        Some((mean, (hi - lo) / 2.0))
    }

    pub fn mean_iou(&self) -> Option<f64> {
        let v: Vec<f64> = self
            .runs
            .iter()
            .filter_map(|r| r.outcome.as_ref().ok().map(|e| e.mean_iou))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    pub fn n_samples(&self) -> Option<usize> {
        self.runs
            .iter()
            .find_map(|r| r.outcome.as_ref().ok().map(|e| e.n_samples))
    }
}

#[derive(Clone, Debug)]
pub struct AblationGrid {
    pub cells: Vec<AblationCell>,
}

impl AblationGrid {
    pub fn cell(&self, label: &str) -> Option<&AblationCell> {
        self.cells.iter().find(|c| c.label == label)
    }

    /// Aligned text table, one row per cell, accuracy in percent.
    pub fn table(&self) -> String {
        let rows: Vec<[String; 5]> = self
            .cells
            .iter()
            .map(|c| {
                let (acc, iou) = match (c.summary(), c.mean_iou()) {
                    (Some((m, r)), Some(i)) => (format!("{:.2} ± {:.2}", 100.0 * m, 100.0 * r), format!("{i:.4}")),
                    _ => ("-".into(), "-".into()),
                };
                let failures = c.runs.iter().filter(|r| r.outcome.is_err()).count();
                let status = if failures == 0 {
                    "ok".to_string()
                } else {
                    format!("failed {failures}/{}", c.runs.len())
                };
                [c.label.clone(), acc, iou, c.runs.len().to_string(), status]
            })
            .collect();
        let header = ["config", "acc@0.5 (%)", "mean_iou", "seeds", "status"];
        let mut widths: Vec<usize> = header.iter().map(|h| h.chars().count()).collect();
        for r in &rows {
            for (w, cell) in widths.iter_mut().zip(r) {
                *w = (*w).max(cell.chars().count());
            }
        }
        let mut out = String::new();
        let mut line = |cells: Vec<&str>| {
            let padded: Vec<String> = cells
                .iter()
                .zip(&widths)
                .map(|(c, &w)| format!("{c}{}", " ".repeat(w - c.chars().count())))
                .collect();
            out.push_str(padded.join("  ").trim_end());
            out.push('\n');
        };
        line(header.to_vec());
        for r in &rows {
            line(r.iter().map(String::as_str).collect());
        }
        out
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from("config\tseed\taccuracy\tmean_iou\tn_samples\tstatus\n");
        for c in &self.cells {
            for r in &c.runs {
                match &r.outcome {
                    Ok(e) => {
                        let _ = writeln!(
                            out,
                            "{}\t{}\t{:.6}\t{:.6}\t{}\tok",
                            c.label, r.seed, e.accuracy, e.mean_iou, e.n_samples
                        );
                    }
                    Err(msg) => {
                        let msg = msg.replace(['\t', '\n'], " ");
                        let _ = writeln!(out, "{}\t{}\t-\t-\t-\tfailed: {msg}", c.label, r.seed);
                    }
                }
            }
        }
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv()).map_err(|e| Error::io(path, e))
    }
}

/// Trains and evaluates each `(label, config)` cell once per seed. A failing
/// run is recorded and the grid carries on.
pub fn run_ablation<C, F>(cells: &[(String, C)], seeds: &[u64], mut train_fn: F) -> Result<AblationGrid>
where
    F: FnMut(&str, &C, u64) -> Result<EvalReport>,
{
    if seeds.is_empty() {
        return Err(Error::Parameter("an ablation needs at least one seed".into()));
    }
    let mut out = Vec::with_capacity(cells.len());
    for (label, cfg) in cells {
        let runs = seeds
            .iter()
            .map(|&seed| SeedRun {
                seed,
                outcome: train_fn(label, cfg, seed).map_err(|e| e.to_string()),
            })
            .collect();
        out.push(AblationCell { label: label.clone(), runs });
    }
    Ok(AblationGrid { cells: out })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corner(x1: f64, y1: f64, x2: f64, y2: f64) -> BoundingBox<f64> {
        BoundingBox::from_corners(x1, y1, x2, y2)
    }

    #[test]
    fn iou_examples() {
        let a = BoundingBox::new(0.4, 0.5, 0.2, 0.3);
        assert_eq!(iou(&a, &a), 1.0);
        let s = 1.0 / 1.5;
        let v = iou(&corner(0.0, 0.0, s, s), &corner(0.5 * s, 0.0, 1.5 * s, s));
        assert!((v - 1.0 / 3.0).abs() < 1e-12, "{v}");
        assert_eq!(iou(&corner(0.0, 0.0, 0.2, 0.2), &corner(0.5, 0.5, 0.9, 0.9)), 0.0);
        let z = BoundingBox::new(0.5, 0.5, 0.0, 0.0);
        assert_eq!(iou(&z, &z), 0.0);
    }

    fn report(ious: &[f64]) -> EvalReport {
        EvalReport::from_records(
            ious.iter()
                .enumerate()
                .map(|(i, &v)| EvalRecord {
                    sample_id: i as u64,
                    iou: v,
                    correct: v > IOU_THRESHOLD,
                })
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn threshold_is_strict() {
        let r = report(&[0.5, 0.5000001, 0.9, 0.1]);
        assert_eq!(r.n_correct, 2);
        assert_eq!(r.accuracy, 0.5);
        assert!(matches!(EvalReport::from_records(vec![]), Err(Error::Config(_))));
    }

    #[test]
    fn ablation_records_failures_and_continues() {
        let cells = vec![("a".to_string(), 0.9), ("b".to_string(), -1.0), ("c".to_string(), 0.2)];
        let grid = run_ablation(&cells, &[1, 2], |_, &v, seed| {
            if v < 0.0 {
                Err(Error::Data("boom".into()))
            } else {
                Ok(report(&[v + seed as f64 * 0.0]))
            }
        })
        .unwrap();
        assert_eq!(grid.cells.len(), 3);
        assert!(grid.cell("b").unwrap().failed());
        assert_eq!(grid.cell("a").unwrap().summary(), Some((1.0, 0.0)));
        let table = grid.table();
        assert_eq!(table.lines().count(), 4);
        assert!(table.contains("failed 2/2"));
        assert_eq!(grid.to_tsv().lines().count(), 7);
        assert!(run_ablation(&cells, &[], |_, _, _| Ok(report(&[1.0]))).is_err());
    }
}
