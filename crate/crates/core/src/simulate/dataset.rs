//! Dataset records and line-delimited JSON persistence.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{bvp, darcy, lv, FunctionSample, Problem};
use crate::parallel::par_map;
use crate::rng;
use crate::{Error, Result};

/// Parameter side of one training pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Params {
    Bvp { a: f64, b: f64, x_a: f64, x_b: f64 },
    /// Conductivity at the record's points.
    Darcy { kappa: Vec<f64>, alpha: f64 },
    /// Prey population at the record's points.
    Lv { x0: [f64; 2], prey: Vec<f64> },
}

/// One `(parameter, solution)` pair. `points`/`values` hold the solution (`u`
/// for the PDEs, the predator path for the population model).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Record {
    pub kind: Problem,
    pub params: Params,
    pub points: Vec<Vec<f64>>,
    pub values: Vec<f64>,
    pub seed: u64,
}

impl Record {
    fn from_sample(kind: Problem, params: Params, s: &FunctionSample, seed: u64) -> Self {
        let points = s.points.chunks_exact(s.dim).map(<[f64]>::to_vec).collect();
        Self { kind, params, points, values: s.values.clone(), seed }
    }

    fn flat_points(&self) -> (usize, Vec<f64>) {
        let dim = self.points.first().map_or(1, Vec::len);
        (dim, self.points.concat())
    }

    pub fn solution(&self) -> Result<FunctionSample> {
        let (dim, pts) = self.flat_points();
        FunctionSample::new(dim, pts, self.values.clone())
    }

    /// Parameter as a function sample (Darcy, LV) or `None` for vector
    /// parameters.
    pub fn parameter_sample(&self) -> Result<Option<FunctionSample>> {
        let (dim, pts) = self.flat_points();
        match &self.params {
            Params::Bvp { .. } => Ok(None),
            Params::Darcy { kappa, .. } => FunctionSample::new(dim, pts, kappa.clone()).map(Some),
            Params::Lv { prey, .. } => FunctionSample::new(dim, pts, prey.clone()).map(Some),
        }
    }

    /// `(a, b)` for the boundary value problem.
    pub fn parameter_vector(&self) -> Option<Vec<f64>> {
        match &self.params {
            Params::Bvp { a, b, .. } => Some(vec![*a, *b]),
            _ => None,
        }
    }
}

/// What to generate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub problem: Problem,
    pub size: usize,
    /// Random evaluation points per sample (BVP, LV).
    pub n_points: usize,
    /// Solver grid (BVP nodes; Darcy nodes per side).
    pub grid_n: usize,
    pub alpha: f64,
    /// Paths simulated per LV initial condition.
    pub paths_per_x0: usize,
}

/// Sample `i` of a dataset; a pure function of `(spec, seed, i)`.
pub fn generate_record(spec: &DatasetSpec, seed: u64, i: usize) -> Result<Record> {
    match spec.problem {
        Problem::Bvp => {
            let (p, s) = bvp::sample_bvp_pair(i, spec.n_points, spec.grid_n, seed)?;
            let params = Params::Bvp { a: p.a, b: p.b, x_a: p.x_a, x_b: p.x_b };
            Ok(Record::from_sample(Problem::Bvp, params, &s, seed))
        }
        Problem::Darcy => {
            let inst = darcy::sample_instance(i, spec.grid_n, spec.alpha, seed);
            let sol = darcy::solve_darcy(&inst)
                .map_err(|e| Error::numerical("darcy dataset", format!("sample {i}: {e}")))?;
            let params = Params::Darcy { kappa: inst.kappa.clone(), alpha: spec.alpha };
            Ok(Record::from_sample(Problem::Darcy, params, &sol.to_sample(), inst.seed))
        }
        Problem::Lv => {
            let per = spec.paths_per_x0.max(1);
            let x0 = lv::sample_x0(&mut rng::stream(rng::derive(seed, "lv-x0"), (i / per) as u64));
            let path_seed = rng::derive(seed, &format!("lv-path-{i}"));
            let (prey, pred) = lv::simulate_lv(&lv::LvParams::new(x0, path_seed), spec.n_points)?;
            let params = Params::Lv { x0, prey: prey.values.clone() };
            Ok(Record::from_sample(Problem::Lv, params, &pred, path_seed))
        }
    }
}

pub fn generate(spec: &DatasetSpec, seed: u64, jobs: usize) -> Result<Vec<Record>> {
    par_map(spec.size, jobs, |i| generate_record(spec, seed, i)).into_iter().collect()
}

pub fn write_jsonl(path: &Path, records: &[Record]) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Record>> {
    let file = std::fs::File::open(path).map_err(|e| Error::MissingArtifact {
        path: path.display().to_string(),
        detail: e.to_string(),
    })?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(problem: Problem) -> DatasetSpec {
        DatasetSpec { problem, size: 4, n_points: 30, grid_n: 8, alpha: 0.05, paths_per_x0: 2 }
    }

    #[test]
    fn roundtrip_through_jsonl() {
        let dir = tempfile::tempdir().unwrap();
        for p in [Problem::Bvp, Problem::Darcy, Problem::Lv] {
            let mut s = spec(p);
            if p == Problem::Bvp {
                s.grid_n = 101;
            }
            let recs = generate(&s, 5, 1).unwrap();
            let path = dir.path().join("d.jsonl");
            write_jsonl(&path, &recs).unwrap();
            let back = read_jsonl(&path).unwrap();
            assert_eq!(recs, back);
            assert_eq!(back[0].kind, p);
        }
    }

    #[test]
    fn parallel_generation_matches_serial() {
        let mut s = spec(Problem::Bvp);
        s.grid_n = 101;
        assert_eq!(generate(&s, 2, 1).unwrap(), generate(&s, 2, 3).unwrap());
    }

    #[test]
    fn lv_paths_share_initial_conditions() {
        let recs = generate(&spec(Problem::Lv), 1, 1).unwrap();
        let x0 = |r: &Record| match r.params {
            Params::Lv { x0, .. } => x0,
            _ => unreachable!(),
        };
        assert_eq!(x0(&recs[0]), x0(&recs[1]));
        assert_ne!(x0(&recs[1]), x0(&recs[2]));
        assert_ne!(recs[0].values, recs[1].values);
    }
}
