//! Pipeline configuration: one TOML document with a section per stage,
//! command-line overrides by dotted path.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::bed::{OptConfig, PceConfig};
use crate::ebm::{EbmTrainConfig, EdHyper};
use crate::eval::{self, ExperimentConfig, Method};
use crate::inr::{InrArch, InrTrainConfig};
use crate::posterior::SgldConfig;
use crate::simulate::dataset::DatasetSpec;
use crate::simulate::Problem;
use crate::surrogate::SurrogateConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub size: usize,
    /// Random evaluation points per sample (BVP, LV).
    pub n_points: usize,
    /// Solver grid: BVP nodes, Darcy nodes per side.
    pub grid_n: usize,
    pub alpha: f64,
    pub paths_per_x0: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub methods: Vec<Method>,
    pub runs: usize,
    pub sensors: usize,
    pub per_step: usize,
    pub initial: Vec<f64>,
    pub pce: PceConfig,
    pub opt: OptConfig,
    pub design_sgld: SgldConfig,
    pub infer_sgld: SgldConfig,
    pub posterior_samples: usize,
    /// Largest sensor count of the contraction curve; 0 skips it.
    pub contraction_sensors: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub problem: Problem,
    pub seed: u64,
    pub data: DataConfig,
    pub surrogate: SurrogateConfig,
    pub experiment: ExperimentSection,
}

fn siren(in_dim: usize, latent_dim: usize, width: usize, depth: usize) -> InrArch {
    InrArch { in_dim, latent_dim, width, depth, hyper_width: width, omega0: 30.0 }
}

impl PipelineConfig {
    /// Desk-scale defaults for one problem.
    pub fn desk(problem: Problem, seed: u64) -> Self {
        let exp = ExperimentConfig::desk(problem);
        let (data, kappa_arch, u_arch, hyper, epochs) = match problem {
            Problem::Bvp => (
                DataConfig { size: 1000, n_points: 30, grid_n: 201, alpha: 0.0, paths_per_x0: 1 },
                None,
                siren(1, 11, 64, 3),
                EdHyper { t: 1.0, m: 4, w: 1.0, epochs: 300 },
                300,
            ),
            Problem::Darcy => (
                DataConfig { size: 500, n_points: 0, grid_n: 16, alpha: 0.05, paths_per_x0: 1 },
                Some(siren(2, 32, 64, 3)),
                siren(2, 16, 64, 3),
                EdHyper { t: 0.5, m: 16, w: 1.0, epochs: 300 },
                40,
            ),
            Problem::Lv => (
                DataConfig { size: 1000, n_points: 30, grid_n: 101, alpha: 0.0, paths_per_x0: 10 },
                Some(siren(1, 11, 64, 3)),
                siren(1, 11, 64, 3),
                EdHyper { t: 1.0, m: 4, w: 1.0, epochs: 300 },
                150,
            ),
        };
        Self {
            problem,
            seed,
            data,
            surrogate: SurrogateConfig {
                kappa_arch,
                u_arch,
                inr: InrTrainConfig { epochs, ..InrTrainConfig::default() },
                ebm_width: 64,
                ebm: EbmTrainConfig::new(hyper),
            },
            experiment: ExperimentSection {
                methods: vec![Method::Adaptive, Method::Batch, Method::Qmc],
                runs: exp.runs,
                sensors: exp.sensors,
                per_step: exp.per_step,
                initial: exp.initial,
                pce: exp.pce,
                opt: exp.opt,
                design_sgld: exp.design_sgld,
                infer_sgld: exp.infer_sgld,
                posterior_samples: exp.posterior_samples,
                contraction_sensors: 0,
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let value: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::config(span_path(text, &e), e.message()))?;
        Self::from_table(value)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::MissingArtifact {
            path: path.display().to_string(),
            detail: format!("cannot read config: {e}"),
        })?;
        Self::from_toml(&text)
    }

    fn from_table(table: toml::Table) -> Result<Self> {
        let cfg: Self = serde_path_to_error(table)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// Applies `a.b.c=value` overrides; `value` is read as a TOML literal,
    /// or as a string when it does not parse as one.
    pub fn with_overrides(&self, overrides: &[String]) -> Result<Self> {
        let mut table = toml::Table::try_from(self).expect("config serialises");
        for o in overrides {
            let (path, raw) = o.split_once('=').ok_or_else(|| Error::config(o.as_str(), "override must look like a.b.c=value"))?;
            let path = path.trim();
            let value = parse_literal(raw.trim());
            set_path(&mut table, path, value)?;
        }
        Self::from_table(table)
    }

    /// Checks cross-field constraints, reporting the offending field path.
    pub fn validate(&self) -> Result<()> {
        let e = &self.experiment;
        if self.data.size < 2 {
            return Err(Error::config("data.size", "need at least two training pairs"));
        }
        match self.problem {
            Problem::Bvp if self.data.grid_n < 50 => return Err(Error::config("data.grid_n", "BVP grid needs at least 50 nodes")),
            Problem::Darcy if self.data.grid_n < 4 => return Err(Error::config("data.grid_n", "Darcy grid needs at least 4 nodes per side")),
            Problem::Bvp | Problem::Lv if self.data.n_points == 0 => {
                return Err(Error::config("data.n_points", "must be positive"))
            }
            _ => {}
        }
        let dx = eval::domain_of(self.problem).dim();
        let s = &self.surrogate;
        if s.u_arch.in_dim != dx {
            return Err(Error::config("surrogate.u_arch.in_dim", format!("must be {dx} for {}", self.problem)));
        }
        match (self.problem, &s.kappa_arch) {
            (Problem::Bvp, Some(_)) => return Err(Error::config("surrogate.kappa_arch", "the BVP parameter is a vector; omit this")),
            (Problem::Darcy | Problem::Lv, None) => return Err(Error::config("surrogate.kappa_arch", "required for function parameters")),
            (_, Some(a)) if a.in_dim != dx => return Err(Error::config("surrogate.kappa_arch.in_dim", format!("must be {dx}"))),
            _ => {}
        }
        for (name, a) in [("surrogate.u_arch", Some(&s.u_arch)), ("surrogate.kappa_arch", s.kappa_arch.as_ref())] {
            if let Some(a) = a {
                if a.width == 0 || a.depth == 0 || a.latent_dim == 0 || a.hyper_width == 0 || !(a.omega0 > 0.0) {
                    return Err(Error::config(name, "widths, depth and latent dim must be positive, omega0 > 0"));
                }
            }
        }
        if s.inr.batch == 0 || !(s.inr.outer_lr > 0.0) || !(s.inr.inner_lr > 0.0) {
            return Err(Error::config("surrogate.inr", "batch and learning rates must be positive"));
        }
        s.ebm.hyper.validate().map_err(|err| Error::config("surrogate.ebm.hyper", err.to_string()))?;
        if s.ebm_width == 0 || s.ebm.batch == 0 {
            return Err(Error::config("surrogate.ebm", "width and batch must be positive"));
        }
        if e.methods.is_empty() {
            return Err(Error::config("experiment.methods", "list at least one method"));
        }
        e.pce.validate().map_err(|err| Error::config("experiment.pce", err.to_string()))?;
        e.design_sgld.validate().map_err(|err| Error::config("experiment.design_sgld", err.to_string()))?;
        e.infer_sgld.validate().map_err(|err| Error::config("experiment.infer_sgld", err.to_string()))?;
        if e.opt.restarts == 0 {
            return Err(Error::config("experiment.opt.restarts", "must be positive"));
        }
        let exp = self.experiment_config(1);
        exp.validate().map_err(|err| match err {
            Error::Config { .. } => err,
            other => Error::config("experiment", other.to_string()),
        })?;
        if e.contraction_sensors > 0 && e.contraction_sensors < e.initial.len() / dx {
            return Err(Error::config("experiment.contraction_sensors", "must cover the initial observations"));
        }
        Ok(())
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            problem: self.problem,
            size: self.data.size,
            n_points: self.data.n_points,
            grid_n: self.data.grid_n,
            alpha: self.data.alpha,
            paths_per_x0: self.data.paths_per_x0,
        }
    }

    pub fn experiment_config(&self, jobs: usize) -> ExperimentConfig {
        let e = &self.experiment;
        ExperimentConfig {
            problem: self.problem,
            runs: e.runs,
            sensors: e.sensors,
            per_step: e.per_step,
            initial: e.initial.clone(),
            grid_n: match self.problem {
                Problem::Lv => 101,
                _ => self.data.grid_n,
            },
            alpha: self.data.alpha,
            pce: e.pce.clone(),
            opt: e.opt.clone(),
            design_sgld: e.design_sgld.clone(),
            infer_sgld: e.infer_sgld.clone(),
            posterior_samples: e.posterior_samples,
            jobs,
        }
    }
}

/// Deserialises while keeping track of the failing field.
fn serde_path_to_error(table: toml::Table) -> Result<PipelineConfig> {
    let text = toml::to_string(&table).expect("table serialises");
    toml::from_str(&text).map_err(|e: toml::de::Error| Error::config(span_path(&text, &e), e.message()))
}

/// Dotted path of the key enclosing the error span, best effort.
fn span_path(text: &str, e: &toml::de::Error) -> String {
    let Some(span) = e.span() else { return "<document>".into() };
    let mut section = String::new();
    let mut key = String::new();
    let mut offset = 0;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if offset > span.start {
            break;
        }
        if trimmed.starts_with('[') {
            section = trimmed.trim_matches(|c| c == '[' || c == ']').to_string();
            key.clear();
        } else if let Some((k, _)) = trimmed.split_once('=') {
            key = k.trim().to_string();
        }
        offset += line.len();
    }
    match (section.is_empty(), key.is_empty()) {
        (true, true) => "<document>".into(),
        (true, false) => key,
        (false, true) => section,
        (false, false) => format!("{section}.{key}"),
    }
}

fn parse_literal(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn set_path(table: &mut toml::Table, path: &str, value: toml::Value) -> Result<()> {
    let mut keys = path.split('.').peekable();
    let mut cur = table;
    while let Some(k) = keys.next() {
        if keys.peek().is_none() {
            if !cur.contains_key(k) && !optional_key(path) {
                return Err(Error::config(path, "no such field"));
            }
            cur.insert(k.to_string(), value);
            return Ok(());
        }
        if !matches!(cur.get(k), Some(toml::Value::Table(_))) {
            if !optional_key(path) {
                return Err(Error::config(path, "no such section"));
            }
            cur.insert(k.to_string(), toml::Value::Table(toml::Table::new()));
        }
        cur = cur.get_mut(k).and_then(toml::Value::as_table_mut).expect("checked above");
    }
    Err(Error::config(path, "empty override path"))
}

/// Fields that may be absent from the serialised form.
fn optional_key(path: &str) -> bool {
    path.starts_with("surrogate.kappa_arch")
}
