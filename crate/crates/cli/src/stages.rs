//! Pipeline stages. Each reads its inputs from the run directory, writes its
//! outputs and a manifest, and is skipped while its manifest is fresh.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use couplings::config::PipelineConfig;
use couplings::eval::{self, Method, Placement};
use couplings::inr::InrCheckpoint;
use couplings::posterior::write_samples_csv;
use couplings::rng;
use couplings::simulate::dataset::{generate as generate_records, read_jsonl, write_jsonl};
use couplings::surrogate::{self, KappaData, KappaRepr, SurrogateCheckpoint};
use couplings::{Error, Result};
use serde::Serialize;

use crate::manifest::{self, hash_value};

pub const DATASET: &str = "dataset.jsonl";
pub const INR_U: &str = "inr_u.json";
pub const INR_KAPPA: &str = "inr_kappa.json";
pub const CODES: &str = "codes.json";
pub const SURROGATE: &str = "surrogate.json";

pub struct Ctx {
    pub cfg: PipelineConfig,
    pub jobs: usize,
    pub force: bool,
    pub root: PathBuf,
}

/// What a stage call did.
#[derive(Debug, PartialEq, Eq)]
pub enum Outcome {
    Ran,
    Cached,
}

fn short(hash: String) -> String {
    hash[..12].to_string()
}

impl Ctx {
    /// `<root>/<problem>-<hash of everything the surrogate depends on>`.
    pub fn run_dir(&self) -> PathBuf {
        let c = &self.cfg;
        let key = hash_value(&(c.problem, c.seed, &c.data, &c.surrogate));
        self.root.join(format!("{}-{}", c.problem, short(key)))
    }

    /// Experiment outputs, keyed additionally by the experiment section.
    pub fn eval_dir(&self) -> PathBuf {
        self.run_dir().join(format!("eval-{}", short(hash_value(&self.cfg.experiment))))
    }

    fn has_kappa_inr(&self) -> bool {
        self.cfg.surrogate.kappa_arch.is_some()
    }

    fn inr_outputs(&self) -> Vec<&'static str> {
        if self.has_kappa_inr() {
            vec![INR_U, INR_KAPPA]
        } else {
            vec![INR_U]
        }
    }

    fn surrogate_seed(&self) -> u64 {
        rng::derive(self.cfg.seed, "surrogate")
    }

    fn experiment_seed(&self) -> u64 {
        rng::derive(self.cfg.seed, "experiment")
    }
}

/// Fails with the stage to run when an input is missing.
fn require(dir: &Path, files: &[&str], stage: &str) -> Result<()> {
    for f in files {
        let p = dir.join(f);
        if !p.exists() {
            return Err(Error::MissingArtifact { path: p.display().to_string(), detail: format!("run `couplings {stage}` first") });
        }
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string(value)?)?;
    Ok(())
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

/// Runs `body` unless the manifest of `stage` in `dir` is fresh.
fn stage(
    ctx: &Ctx,
    dir: &Path,
    name: &str,
    config_hash: String,
    seed: u64,
    inputs: &[&str],
    body: impl FnOnce() -> Result<Vec<String>>,
) -> Result<Outcome> {
    fs::create_dir_all(dir)?;
    if !ctx.force && manifest::is_fresh(dir, name, &config_hash, inputs) {
        log::info!("{name}: cached in {}", dir.display());
        return Ok(Outcome::Cached);
    }
    log::info!("{name}: running in {}", dir.display());
    let start = Instant::now();
    let outputs = body()?;
    let outputs: Vec<&str> = outputs.iter().map(String::as_str).collect();
    manifest::write(dir, name, &config_hash, seed, inputs, &outputs, start.elapsed().as_secs_f64())?;
    Ok(Outcome::Ran)
}

pub fn generate(ctx: &Ctx) -> Result<Outcome> {
    let dir = ctx.run_dir();
    let c = &ctx.cfg;
    let spec = c.dataset_spec();
    stage(ctx, &dir, "generate", hash_value(&spec), c.seed, &[], || {
        let records = generate_records(&spec, c.seed, ctx.jobs)?;
        write_jsonl(&dir.join(DATASET), &records)?;
        Ok(vec![DATASET.into()])
    })
}

pub fn train_inr(ctx: &Ctx) -> Result<Outcome> {
    let dir = ctx.run_dir();
    require(&dir, &[DATASET], "generate")?;
    let s = &ctx.cfg.surrogate;
    let hash = hash_value(&(&s.kappa_arch, &s.u_arch, &s.inr));
    let seed = ctx.surrogate_seed();
    stage(ctx, &dir, "train-inr", hash, seed, &[DATASET], || {
        let records = read_jsonl(&dir.join(DATASET))?;
        let (kappa, u) = surrogate::training_pairs(&records)?;
        let domain = eval::domain_of(ctx.cfg.problem);
        let mut out = vec![INR_U.to_string()];
        match (&s.kappa_arch, &kappa) {
            (Some(arch), KappaData::Functions(f)) => {
                let inr = surrogate::fit_inr(arch.clone(), domain.clone(), f, &s.inr, rng::derive(seed, "kappa-inr"))?;
                write_json(&dir.join(INR_KAPPA), &InrCheckpoint::new(&inr, None))?;
                out.push(INR_KAPPA.into());
            }
            (None, KappaData::Vectors(_)) => {}
            _ => return Err(Error::config("surrogate.kappa_arch", "must be given exactly when the parameter is a function")),
        }
        let inr = surrogate::fit_inr(s.u_arch.clone(), domain, &u, &s.inr, rng::derive(seed, "u-inr"))?;
        write_json(&dir.join(INR_U), &InrCheckpoint::new(&inr, None))?;
        Ok(out)
    })
}

fn load_decoders(ctx: &Ctx, dir: &Path, kappa: &KappaData) -> Result<(KappaRepr, couplings::inr::Inr)> {
    let u = read_json::<InrCheckpoint>(&dir.join(INR_U))?.into_inr()?.0;
    let k = match kappa {
        KappaData::Vectors(v) => KappaRepr::Params { dim: v.first().map_or(0, Vec::len) },
        KappaData::Functions(_) if ctx.has_kappa_inr() => {
            KappaRepr::Inr(Box::new(read_json::<InrCheckpoint>(&dir.join(INR_KAPPA))?.into_inr()?.0))
        }
        KappaData::Functions(_) => return Err(Error::config("surrogate.kappa_arch", "required for function parameters")),
    };
    Ok((k, u))
}

pub fn encode(ctx: &Ctx) -> Result<Outcome> {
    let dir = ctx.run_dir();
    let mut inputs = vec![DATASET];
    inputs.extend(ctx.inr_outputs());
    require(&dir, &[DATASET], "generate")?;
    require(&dir, &inputs, "train-inr")?;
    let s = &ctx.cfg.surrogate;
    let hash = hash_value(&(s.inr.inner_steps, s.inr.inner_lr));
    stage(ctx, &dir, "encode", hash, ctx.surrogate_seed(), &inputs, || {
        let records = read_jsonl(&dir.join(DATASET))?;
        let (kappa, u) = surrogate::training_pairs(&records)?;
        let (k, inr) = load_decoders(ctx, &dir, &kappa)?;
        let raw = surrogate::encode_pairs(&k, &kappa, &inr, &u, &s.inr)?;
        write_json(&dir.join(CODES), &raw)?;
        Ok(vec![CODES.into()])
    })
}

pub fn train_ebm(ctx: &Ctx) -> Result<Outcome> {
    let dir = ctx.run_dir();
    let mut inputs = vec![DATASET, CODES];
    inputs.extend(ctx.inr_outputs());
    require(&dir, &[DATASET], "generate")?;
    require(&dir, &ctx.inr_outputs(), "train-inr")?;
    require(&dir, &[CODES], "encode")?;
    let s = &ctx.cfg.surrogate;
    let hash = hash_value(&(s.ebm_width, &s.ebm));
    let seed = ctx.surrogate_seed();
    stage(ctx, &dir, "train-ebm", hash, seed, &inputs, || {
        let records = read_jsonl(&dir.join(DATASET))?;
        let (kappa, _) = surrogate::training_pairs(&records)?;
        let (k, inr) = load_decoders(ctx, &dir, &kappa)?;
        let raw: Vec<Vec<f64>> = read_json(&dir.join(CODES))?;
        let fitted = surrogate::fit_energy(k, inr, &raw, s.ebm_width, &s.ebm, rng::derive(seed, "ebm"))?;
        write_json(&dir.join(SURROGATE), &SurrogateCheckpoint::new(&fitted))?;
        Ok(vec![SURROGATE.into()])
    })
}

fn load_surrogate(ctx: &Ctx) -> Result<surrogate::Surrogate> {
    let dir = ctx.run_dir();
    require(&dir, &[SURROGATE], "train-ebm")?;
    read_json::<SurrogateCheckpoint>(&dir.join(SURROGATE))?.into_surrogate()
}

fn place_file(method: Method, run: usize) -> String {
    format!("place-{method}-{run}.json")
}

/// Surrogate path as seen from the experiment directory.
fn surrogate_input() -> String {
    format!("../{SURROGATE}")
}

pub fn place(ctx: &Ctx, method: Method, run: usize) -> Result<Outcome> {
    let surrogate = load_surrogate(ctx)?;
    let dir = ctx.eval_dir();
    let cfg = ctx.cfg.experiment_config(ctx.jobs);
    if run >= cfg.runs {
        return Err(Error::config("experiment.runs", format!("run {run} is out of range for {} runs", cfg.runs)));
    }
    let input = surrogate_input();
    let name = format!("place-{method}-{run}");
    let seed = ctx.experiment_seed();
    stage(ctx, &dir, &name, hash_value(&(&cfg.runs, method, run)), seed, &[&input], || {
        let start = Instant::now();
        let (_, placement) = eval::place_run(&surrogate, &cfg, method, seed, run)?;
        let json = place_file(method, run);
        let csv = format!("placements-{method}-{run}.csv");
        write_json(&dir.join(&json), &placement)?;
        let rounds: Vec<_> = placement.rounds.iter().enumerate().collect();
        eval::write_placements_csv(&dir.join(&csv), &rounds, cfg.domain().dim(), start.elapsed().as_secs_f64())?;
        Ok(vec![json, csv])
    })
}

pub fn infer(ctx: &Ctx, method: Method, run: usize) -> Result<Outcome> {
    let surrogate = load_surrogate(ctx)?;
    let dir = ctx.eval_dir();
    let placed = place_file(method, run);
    require(&dir, &[&placed], &format!("place --method {method} --run {run}"))?;
    let cfg = ctx.cfg.experiment_config(ctx.jobs);
    let input = surrogate_input();
    let name = format!("infer-{method}-{run}");
    let seed = ctx.experiment_seed();
    stage(ctx, &dir, &name, hash_value(&(method, run)), seed, &[&input, &placed], || {
        let placement: Placement = read_json(&dir.join(&placed))?;
        let samples = eval::infer_run(&surrogate, &cfg, &placement.history, seed, run)?;
        let gt = eval::sample_ground_truth(&cfg, seed, run)?;
        let metrics = eval::score(&surrogate, &gt, cfg.problem, &samples)?;
        let post = format!("posterior-{method}-{run}.csv");
        let met = format!("metrics-{method}-{run}.json");
        write_samples_csv(&dir.join(&post), &samples)?;
        fs::write(dir.join(&met), serde_json::to_string_pretty(&metrics)?)?;
        Ok(vec![post, met])
    })
}

pub fn evaluate(ctx: &Ctx) -> Result<Outcome> {
    let surrogate = load_surrogate(ctx)?;
    let dir = ctx.eval_dir();
    let cfg = ctx.cfg.experiment_config(ctx.jobs);
    let methods = ctx.cfg.experiment.methods.clone();
    let curve_sensors = ctx.cfg.experiment.contraction_sensors;
    let input = surrogate_input();
    let seed = ctx.experiment_seed();
    stage(ctx, &dir, "evaluate", hash_value(&ctx.cfg.experiment), seed, &[&input], || {
        let mut reports = Vec::new();
        for m in &methods {
            let rep = eval::run_experiment(&surrogate, &cfg, *m, seed)?;
            for (r, e) in &rep.failures {
                log::warn!("{m} run {r} failed: {e}");
            }
            reports.push(rep);
        }
        eval::write_report_csv(&dir.join("report.csv"), &reports)?;
        eval::write_runs_csv(&dir.join("runs.csv"), &reports)?;
        let mut out = vec!["report.csv".to_string(), "runs.csv".to_string()];
        if curve_sensors > 0 {
            let curve = eval::contraction_curve(&surrogate, &cfg, curve_sensors, seed)?;
            eval::write_curve_csv(&dir.join("curve.csv"), &curve)?;
            out.push("curve.csv".into());
        }
        Ok(out)
    })
}

/// Every stage in order; completed stages are reused.
pub fn pipeline(ctx: &Ctx) -> Result<Vec<(&'static str, Outcome)>> {
    Ok(vec![
        ("generate", generate(ctx)?),
        ("train-inr", train_inr(ctx)?),
        ("encode", encode(ctx)?),
        ("train-ebm", train_ebm(ctx)?),
        ("evaluate", evaluate(ctx)?),
    ])
}
