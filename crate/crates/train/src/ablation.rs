//! Named ablation grids over the training configuration.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use epmvg_core::data::{Dataset, Split, Vocab};
use epmvg_core::eval::{evaluate, run_ablation, AblationGrid};
use epmvg_core::losses::{DistillKind, DistillMode, Modality};
use epmvg_core::model::ModelConfig;
use epmvg_core::{Error, Result};

use crate::config::TrainConfig;
use crate::teacher::TeacherModel;
use crate::trainer::{train, TrainLog};

pub const LAMBDA_SWEEP: [f64; 5] = [0.0, 0.5, 1.0, 1.5, 2.0];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GridKind {
    /// Distillation loss × modality, plus a run without distillation.
    Distill,
    /// Frozen against unfrozen teacher.
    Freeze,
    /// GIoU weight sweep.
    Lambda,
}

impl GridKind {
    pub const ALL: [GridKind; 3] = [GridKind::Distill, GridKind::Freeze, GridKind::Lambda];

    pub fn name(self) -> &'static str {
        match self {
            GridKind::Distill => "distill",
            GridKind::Freeze => "freeze",
            GridKind::Lambda => "lambda",
        }
    }

    /// `(label, config)` per cell, derived from `base`.
    pub fn cells(self, base: &TrainConfig) -> Vec<(String, TrainConfig)> {
        let with = |f: &dyn Fn(&mut TrainConfig)| {
            let mut c = base.clone();
            f(&mut c);
            c
        };
        match self {
            GridKind::Distill => {
                let mut out = vec![("w/o distill".to_string(), with(&|c| c.distill = DistillMode::NONE))];
                for kind in [DistillKind::Cosine, DistillKind::L1] {
                    for modality in [Modality::Both, Modality::ImageOnly, Modality::TextOnly] {
                        out.push((
                            format!("{kind} {modality}"),
                            with(&|c| c.distill = DistillMode { modality, kind }),
                        ));
                    }
                }
                out
            }
            GridKind::Freeze => [("frozen", true), ("unfrozen", false)]
                .into_iter()
                .map(|(label, frozen)| {
                    (
                        label.to_string(),
                        with(&|c| {
                            if c.distill.is_none() {
                                c.distill = DistillMode::default();
                            }
                            c.teacher_frozen = frozen;
                        }),
                    )
                })
                .collect(),
            GridKind::Lambda => LAMBDA_SWEEP
                .iter()
                .map(|&l| (format!("lambda={l}"), with(&|c| c.weights.lambda = l)))
                .collect(),
        }
    }
}

impl fmt::Display for GridKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for GridKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "distill" => GridKind::Distill,
            "freeze" => GridKind::Freeze,
            "lambda" => GridKind::Lambda,
            _ => return Err(Error::Config(format!("unknown ablation grid `{s}`"))),
        })
    }
}

/// Training log of one (cell, seed) run.
#[derive(Clone, Debug)]
pub struct CellLog {
    pub label: String,
    pub seed: u64,
    pub config: TrainConfig,
    pub log: TrainLog,
}

pub struct AblationResult {
    pub kind: GridKind,
    pub grid: AblationGrid,
    pub logs: Vec<CellLog>,
}

impl AblationResult {
    pub fn logs_for<'a>(&'a self, label: &'a str) -> impl Iterator<Item = &'a CellLog> + 'a {
        self.logs.iter().filter(move |l| l.label == label)
    }

    /// Table text headed by the grid name.
    pub fn render(&self) -> String {
        format!("# {}\n{}", self.kind, self.grid.table())
    }
}

/// Trains every cell of `kind` once per seed and evaluates the best
/// checkpoint on the validation split. Each run uses the seed for model
/// initialization, dropout and shuffling; the dataset and teacher are shared.
pub fn run_grid(
    kind: GridKind,
    dataset: &Dataset,
    model: &ModelConfig,
    base: &TrainConfig,
    teacher: Option<&TeacherModel<f64>>,
    seeds: &[u64],
) -> Result<AblationResult> {
    let cells = kind.cells(base);
    let val = dataset.split(Split::Val);
    let mut logs = Vec::new();
    let grid = run_ablation(&cells, seeds, |label, cfg, seed| {
        let cfg = TrainConfig { seed, ..cfg.clone() };
        let t = if cfg.distill.is_none() { None } else { teacher.cloned() };
        let outcome = train(dataset, model.clone(), cfg.clone(), t, None)?;
        logs.push(CellLog {
            label: label.to_string(),
            seed,
            config: cfg,
            log: outcome.log,
        });
        evaluate(&outcome.best_model, &Vocab::standard(), val.iter().copied())
    })?;
    Ok(AblationResult { kind, grid, logs })
}

/// Writes `ablation.tsv` (all grids, one block each) and returns the tables
/// as printed.
pub fn save_results(results: &[AblationResult], dir: &Path) -> Result<String> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut tsv = String::new();
    let mut text = String::new();
    for r in results {
        tsv.push_str(&format!("# {}\n", r.kind));
        tsv.push_str(&r.grid.to_tsv());
        text.push_str(&r.render());
        text.push('\n');
    }
    let path = dir.join("ablation.tsv");
    fs::write(&path, tsv).map_err(|e| Error::io(&path, e))?;
    Ok(text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_shapes() {
        let base = TrainConfig::default();
        let d = GridKind::Distill.cells(&base);
        assert_eq!(d.len(), 7);
        assert!(d[0].1.distill.is_none());
        assert_eq!(d[3].0, "cosine text_only");
        assert_eq!(d[4].1.distill.kind, DistillKind::L1);

        let f = GridKind::Freeze.cells(&base);
        assert_eq!(f.iter().map(|c| c.1.teacher_frozen).collect::<Vec<_>>(), [true, false]);

        let l = GridKind::Lambda.cells(&base);
        let lambdas: Vec<f64> = l.iter().map(|c| c.1.weights.lambda).collect();
        assert_eq!(lambdas, LAMBDA_SWEEP);
        assert_eq!("lambda".parse::<GridKind>().unwrap(), GridKind::Lambda);
        assert!("gamma".parse::<GridKind>().is_err());
    }
}
