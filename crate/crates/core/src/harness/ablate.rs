use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::TrainConfig;
use super::dataset::Sample;
use super::eval::{evaluate_with, DEFAULT_TAUS};
use super::synth::{synth_generate_with, SynthConfig};
use super::train::Trainer;
use crate::error::{Error, Result};
use crate::lcdn::DenoisingConfig;
use crate::metrics::MetricReport;

/// A synthetic split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSpec {
    pub seed: u64,
    pub count: usize,
    #[serde(default)]
    pub synth: SynthConfig,
}

/// Overrides applied to the base configuration for one cell.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationCell {
    pub name: String,
    #[serde(default)]
    pub lcdn_enabled: Option<bool>,
    #[serde(default)]
    pub dn: Option<DenoisingConfig>,
    /// `"S1-S5"` or `"S2-S5"`.
    #[serde(default)]
    pub levels: Option<String>,
    #[serde(default)]
    pub train_size: Option<usize>,
    #[serde(default)]
    pub test_size: Option<usize>,
    #[serde(default)]
    pub max_steps: Option<usize>,
    #[serde(default)]
    pub seed: Option<u64>,
}

/// A set of training runs that differ from `base` only by their cell overrides.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationMatrix {
    pub base: TrainConfig,
    pub train: SplitSpec,
    pub test: SplitSpec,
    pub cells: Vec<AblationCell>,
    #[serde(default = "default_taus")]
    pub taus: Vec<f64>,
}

fn default_taus() -> Vec<f64> {
    DEFAULT_TAUS.to_vec()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellResult {
    pub name: String,
    pub config: TrainConfig,
    pub test_size: usize,
    pub final_loss: f64,
    pub report: MetricReport,
}

impl AblationMatrix {
    pub fn from_json(text: &str) -> Result<Self> {
        let m: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        if m.cells.is_empty() {
            return Err(Error::config("ablation matrix has no cells"));
        }
        for c in &m.cells {
            m.cell_config(c)?;
        }
        Ok(m)
    }

    /// The training configuration of `cell`.
    pub fn cell_config(&self, cell: &AblationCell) -> Result<TrainConfig> {
        let mut cfg = self.base.clone();
        if let Some(v) = cell.lcdn_enabled {
            cfg.lcdn_enabled = v;
        }
        if let Some(dn) = &cell.dn {
            cfg.dn = dn.clone();
        }
        if let Some(l) = &cell.levels {
            cfg.set_levels(l)?;
        }
        if let Some(s) = cell.train_size {
            cfg.image_size = s;
        }
        if let Some(s) = cell.max_steps {
            cfg.max_steps = Some(s);
        }
        if let Some(s) = cell.seed {
            cfg.seed = s;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn split(spec: &SplitSpec, size: usize) -> Result<Vec<Sample>> {
    Ok(synth_generate_with(spec.seed, spec.count, size, &spec.synth)?
        .into_iter()
        .map(Sample::from)
        .collect())
}

/// Trains and evaluates every cell, writing `<name>.json` per cell and `summary.json` to `out`.
pub fn run_ablation(matrix: &AblationMatrix, out: &Path, mut progress: impl FnMut(&str, usize, f64)) -> Result<Vec<CellResult>> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut results = Vec::with_capacity(matrix.cells.len());
    for cell in &matrix.cells {
        let cfg = matrix.cell_config(cell)?;
        let test_size = cell.test_size.unwrap_or(cfg.image_size);
        let train = split(&matrix.train, cfg.image_size)?;
        let test = split(&matrix.test, test_size)?;
        let mut t = Trainer::new(cfg.clone())?;
        let steps = t.planned_steps(train.len());
        let log = t.run(&train, steps, |e| progress(&cell.name, e.step, e.loss))?;
        let report = evaluate_with(&t.model, &t.store, &test, &matrix.taus)?;
        let r = CellResult {
            name: cell.name.clone(),
            config: cfg,
            test_size,
            final_loss: log.last().map_or(f64::NAN, |e| e.loss),
            report,
        };
        let path = out.join(format!("{}.json", sanitize(&cell.name)));
        std::fs::write(&path, serde_json::to_string_pretty(&r.report)?).map_err(|e| Error::io(&path, e))?;
        results.push(r);
    }
    let path = out.join("summary.json");
    std::fs::write(&path, serde_json::to_string_pretty(&results)?).map_err(|e| Error::io(&path, e))?;
    Ok(results)
}

fn sanitize(name: &str) -> String {
    name.chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}
