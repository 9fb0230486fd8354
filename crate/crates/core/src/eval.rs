//! Error metrics and the comparison of adaptive, batch and quasi-Monte Carlo
//! sensor layouts on freshly simulated ground truths.

use std::io::Write;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::bed::{adaptive_loop, adaptive_step, step_seed, BatchResult, History, OptConfig, PceConfig, SurrogateModel, Truth};
use crate::parallel::par_map;
use crate::posterior::{posterior_mean_function, posterior_pool, SgldConfig};
use crate::rng;
use crate::simulate::{bvp, darcy, halton_sequence, lv, Domain, FunctionSample, Interpolant, Problem};
use crate::surrogate::{Channel, KappaRepr, Surrogate};
use crate::{Error, Result};

/// Conductivity values are floored here before taking logarithms.
pub const LOG_KAPPA_FLOOR: f64 = 1e-3;

/// `sum (estimate - truth)^2 / sum truth^2` over shared points.
pub fn relative_l2(estimate: &FunctionSample, truth: &FunctionSample) -> Result<f64> {
    if estimate.dim != truth.dim || estimate.points != truth.points {
        return Err(Error::Invalid("relative L2 needs identical evaluation points".into()));
    }
    relative_l2_values(&estimate.values, &truth.values)
}

pub fn relative_l2_values(estimate: &[f64], truth: &[f64]) -> Result<f64> {
    if estimate.len() != truth.len() {
        return Err(Error::Dimension(format!("{} estimates for {} truth values", estimate.len(), truth.len())));
    }
    let den: f64 = truth.iter().map(|v| v * v).sum();
    if !(den > 0.0) {
        return Err(Error::Invalid("relative L2 against a zero-norm truth".into()));
    }
    Ok(estimate.iter().zip(truth).map(|(e, t)| (e - t).powi(2)).sum::<f64>() / den)
}

/// Squared error of the sample mean in each coordinate.
pub fn mse_params(samples: &[Vec<f64>], truth: &[f64]) -> Result<Vec<f64>> {
    if samples.is_empty() {
        return Err(Error::Invalid("no samples".into()));
    }
    if samples.iter().any(|s| s.len() != truth.len()) {
        return Err(Error::Dimension(format!("samples must have length {}", truth.len())));
    }
    let n = samples.len() as f64;
    Ok((0..truth.len()).map(|k| (samples.iter().map(|s| s[k]).sum::<f64>() / n - truth[k]).powi(2)).collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Adaptive,
    Batch,
    Qmc,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Adaptive => "adaptive",
            Method::Batch => "batch",
            Method::Qmc => "qmc",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adaptive" => Ok(Method::Adaptive),
            "batch" => Ok(Method::Batch),
            "qmc" => Ok(Method::Qmc),
            other => Err(Error::config("method", format!("unknown method `{other}`"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub problem: Problem,
    pub runs: usize,
    /// Sensors placed by the method, after the initial observations.
    pub sensors: usize,
    /// Sensors per adaptive round.
    pub per_step: usize,
    /// Flat coordinates observed before any method acts.
    pub initial: Vec<f64>,
    /// Ground-truth solver grid (BVP nodes, Darcy nodes per side).
    pub grid_n: usize,
    /// Darcy noise amplitude.
    pub alpha: f64,
    /// Utility estimator; `pce.sigma` is also the observation noise.
    pub pce: PceConfig,
    pub opt: OptConfig,
    /// Sampler for the codes the utility is estimated from.
    pub design_sgld: SgldConfig,
    /// Sampler for the final posterior.
    pub infer_sgld: SgldConfig,
    /// Pooled posterior samples averaged for the posterior mean.
    pub posterior_samples: usize,
    pub jobs: usize,
}

impl ExperimentConfig {
    /// Desk-scale defaults.
    pub fn desk(problem: Problem) -> Self {
        let design_sgld = SgldConfig { steps: 400, chains: 50, eps0: 5e-2, ..SgldConfig::default() };
        let infer_sgld = SgldConfig { steps: 400, chains: 50, eps0: 5e-2, ..SgldConfig::default() };
        match problem {
            Problem::Bvp => Self {
                problem,
                runs: 20,
                sensors: 2,
                per_step: 1,
                initial: Vec::new(),
                grid_n: 201,
                alpha: 0.0,
                pce: PceConfig { n: 50, l: 50, sigma: 0.1 },
                opt: OptConfig { lr: 5e-2, iterations: 60, restarts: 4 },
                design_sgld,
                infer_sgld,
                posterior_samples: 500,
                jobs: 1,
            },
            Problem::Darcy => Self {
                problem,
                runs: 5,
                sensors: 10,
                per_step: 1,
                initial: corner_points(5),
                grid_n: 16,
                alpha: 0.05,
                pce: PceConfig { n: 50, l: 50, sigma: 5e-4 },
                opt: OptConfig { lr: 5e-2, iterations: 40, restarts: 4 },
                design_sgld,
                infer_sgld,
                posterior_samples: 500,
                jobs: 1,
            },
            Problem::Lv => Self {
                problem,
                runs: 10,
                sensors: 5,
                per_step: 1,
                initial: vec![0.01, 0.02],
                grid_n: 101,
                alpha: 0.0,
                pce: PceConfig { n: 50, l: 50, sigma: 0.2 },
                opt: OptConfig { lr: 5e-2, iterations: 60, restarts: 4 },
                design_sgld,
                infer_sgld,
                posterior_samples: 500,
                jobs: 1,
            },
        }
    }

    pub fn domain(&self) -> Domain {
        domain_of(self.problem)
    }

    /// Channels every sensor reads.
    pub fn channels(&self) -> Vec<Channel> {
        channels_of(self.problem)
    }

    pub fn validate(&self) -> Result<()> {
        self.pce.validate()?;
        self.design_sgld.validate()?;
        self.infer_sgld.validate()?;
        if self.runs == 0 {
            return Err(Error::config("experiment.runs", "must be positive"));
        }
        if self.per_step == 0 || self.sensors % self.per_step != 0 {
            return Err(Error::config("experiment.per_step", "must be positive and divide the sensor count"));
        }
        if self.posterior_samples == 0 {
            return Err(Error::config("experiment.posterior_samples", "must be positive"));
        }
        let domain = self.domain();
        if self.initial.len() % domain.dim() != 0 || domain.check_points(&self.initial).is_err() {
            return Err(Error::config("experiment.initial", "initial points must lie in the domain"));
        }
        Ok(())
    }
}

pub fn domain_of(problem: Problem) -> Domain {
    match problem {
        Problem::Bvp => Domain::interval(bvp::LO, bvp::HI),
        Problem::Darcy => Domain::unit_square(),
        Problem::Lv => Domain::interval(0.0, lv::T_END),
    }
}

/// The BVP and Darcy experiments read the solution only; the population
/// model reads prey (the parameter side) and predator at each time.
pub fn channels_of(problem: Problem) -> Vec<Channel> {
    match problem {
        Problem::Bvp | Problem::Darcy => vec![Channel::U],
        Problem::Lv => vec![Channel::Kappa, Channel::U],
    }
}

/// `count` uninformative points clustered in the corner at the origin of the
/// unit square, where the zero boundary pins the solution.
pub fn corner_points(count: usize) -> Vec<f64> {
    (0..count).flat_map(|i| [0.02 + 0.02 * (i % 3) as f64, 0.02 + 0.02 * (i / 3) as f64]).collect()
}

/// Parameter side of a ground truth.
#[derive(Clone, Debug, PartialEq)]
pub enum ParamTruth {
    Vector(Vec<f64>),
    Field(Interpolant),
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroundTruth {
    pub u: Interpolant,
    pub param: ParamTruth,
    /// Observation oracle over the experiment's channels.
    pub truth: Truth,
}

/// Ground truth of run `run`; the same for every method.
pub fn sample_ground_truth(cfg: &ExperimentConfig, seed: u64, run: usize) -> Result<GroundTruth> {
    let tseed = rng::derive(seed, "truth");
    match cfg.problem {
        Problem::Bvp => {
            let mut r = rng::stream(tseed, run as u64);
            let p = bvp::BvpParams::sample(&mut r, tseed);
            let sol = bvp::solve_bvp(&p, cfg.grid_n)?;
            let u = Interpolant::Line { lo: bvp::LO, hi: bvp::HI, values: sol.values };
            Ok(GroundTruth { truth: Truth { channels: vec![(Channel::U, u.clone())] }, u, param: ParamTruth::Vector(vec![p.a, p.b]) })
        }
        Problem::Darcy => {
            let inst = darcy::sample_instance(run, cfg.grid_n, cfg.alpha, tseed);
            let sol = darcy::solve_darcy(&inst)?;
            let u = Interpolant::Square { n: cfg.grid_n, values: sol.u };
            let kappa = Interpolant::Square { n: cfg.grid_n, values: inst.kappa };
            Ok(GroundTruth { truth: Truth { channels: vec![(Channel::U, u.clone())] }, u, param: ParamTruth::Field(kappa) })
        }
        Problem::Lv => {
            let x0 = lv::sample_x0(&mut rng::stream(tseed, run as u64));
            let params = lv::LvParams::new(x0, rng::derive(tseed, &format!("path-{run}")));
            let path = lv::simulate_path(&params, true, &mut rng::stream(params.seed, 0));
            let prey = Interpolant::Line { lo: 0.0, hi: params.t_end, values: path.prey };
            let u = Interpolant::Line { lo: 0.0, hi: params.t_end, values: path.predator };
            let truth = Truth { channels: vec![(Channel::Kappa, prey.clone()), (Channel::U, u.clone())] };
            Ok(GroundTruth { u, param: ParamTruth::Field(prey), truth })
        }
    }
}

/// Errors of one posterior against one ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub u_rel_l2: f64,
    /// Parameter field error (log conductivity for Darcy, prey for the
    /// population model); absent for vector parameters.
    pub param_rel_l2: Option<f64>,
    pub mse_a: Option<f64>,
    pub mse_b: Option<f64>,
}

/// Posterior-mean errors of the standardised joint codes `samples`.
pub fn score(surrogate: &Surrogate, gt: &GroundTruth, problem: Problem, samples: &[Vec<f64>]) -> Result<Metrics> {
    let nodes = gt.u.node_points();
    let u_hat = posterior_mean_function(surrogate, Channel::U, samples, &nodes)?;
    let u_rel_l2 = relative_l2_values(&u_hat.values, gt.u.nodes())?;
    let mut m = Metrics { u_rel_l2, param_rel_l2: None, mse_a: None, mse_b: None };
    match (&gt.param, &surrogate.kappa) {
        (ParamTruth::Vector(p), KappaRepr::Params { .. }) => {
            let raw: Vec<Vec<f64>> = samples.iter().map(|z| surrogate.raw_code(z, Channel::Kappa)).collect();
            let mse = mse_params(&raw, p)?;
            m.mse_a = mse.first().copied();
            m.mse_b = mse.get(1).copied();
        }
        (ParamTruth::Field(f), KappaRepr::Inr(_)) => {
            let hat = posterior_mean_function(surrogate, Channel::Kappa, samples, &f.node_points())?;
            m.param_rel_l2 = Some(if problem == Problem::Darcy {
                let log = |v: &[f64]| v.iter().map(|k| k.max(LOG_KAPPA_FLOOR).ln()).collect::<Vec<_>>();
                relative_l2_values(&log(&hat.values), &log(f.nodes()))?
            } else {
                relative_l2_values(&hat.values, f.nodes())?
            });
        }
        _ => return Err(Error::Invalid("surrogate parameter side does not match the problem".into())),
    }
    Ok(m)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub run: usize,
    pub method: Method,
    pub u_rel_l2: f64,
    pub param_rel_l2: Option<f64>,
    pub mse_a: Option<f64>,
    pub mse_b: Option<f64>,
    /// Observations used for inference, initial ones included.
    pub sensors: usize,
    /// Design optimisations run for this run (shared ones excluded).
    pub optimizer_calls: usize,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub metric: String,
    pub mean: f64,
    pub std: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub problem: Problem,
    pub method: Method,
    pub runs: Vec<RunRecord>,
    pub aggregates: Vec<Aggregate>,
    /// Design optimisations in total, shared ones included.
    pub optimizer_calls: usize,
    /// Runs that failed, with their error; the report is partial if any.
    pub failures: Vec<(usize, String)>,
}

impl ExperimentReport {
    pub fn is_partial(&self) -> bool {
        !self.failures.is_empty()
    }

    pub fn aggregate(&self, metric: &str) -> Option<&Aggregate> {
        self.aggregates.iter().find(|a| a.metric == metric)
    }
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    (mean, (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
}

fn aggregates(runs: &[RunRecord]) -> Vec<Aggregate> {
    let columns: [(&str, fn(&RunRecord) -> Option<f64>); 4] = [
        ("u_rel_l2", |r| Some(r.u_rel_l2)),
        ("param_rel_l2", |r| r.param_rel_l2),
        ("mse_a", |r| r.mse_a),
        ("mse_b", |r| r.mse_b),
    ];
    columns
        .iter()
        .filter_map(|(name, get)| {
            let v: Vec<f64> = runs.iter().filter_map(get).collect();
            (!v.is_empty()).then(|| {
                let (mean, std) = mean_std(&v);
                Aggregate { metric: name.to_string(), mean, std, count: v.len() }
            })
        })
        .collect()
}

fn run_seed(seed: u64, run: usize) -> u64 {
    rng::derive(seed, &format!("run-{run}"))
}

/// Placement computed once and reused by every run: the batch design, or the
/// first adaptive round, when nothing is observed beforehand.
fn shared_placement(model: &SurrogateModel, cfg: &ExperimentConfig, method: Method, seed: u64) -> Result<Option<BatchResult>> {
    if !cfg.initial.is_empty() || cfg.sensors == 0 {
        return Ok(None);
    }
    let empty = History::new(cfg.channels());
    let (sensors, tag) = match method {
        Method::Qmc => return Ok(None),
        Method::Batch => (cfg.sensors, "batch"),
        Method::Adaptive => (cfg.per_step, "adaptive-first"),
    };
    adaptive_step(model, &empty, sensors, &cfg.pce, &cfg.opt, &cfg.design_sgld, rng::derive(seed, tag)).map(Some)
}

/// History after the initial observations of one run. The noise stream is
/// shared by all methods.
fn initial_history(cfg: &ExperimentConfig, gt: &GroundTruth, noise: &mut rng::Rng) -> Result<History> {
    let mut h = History::new(cfg.channels());
    let dx = cfg.domain().dim();
    for p in cfg.initial.chunks_exact(dx) {
        let y = gt.truth.observe(p, cfg.pce.sigma, noise)?;
        h.push(p.to_vec(), y);
    }
    Ok(h)
}

/// Observations of one run and how they were chosen.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Placement {
    /// Initial observations followed by the method's placements.
    pub history: History,
    /// One entry per placement round; the utility is NaN for Halton points.
    pub rounds: Vec<BatchResult>,
    /// Design optimisations run for this run (shared ones excluded).
    pub optimizer_calls: usize,
}

fn unscored(xi: Vec<f64>) -> BatchResult {
    BatchResult { xi, utility: f64::NAN, improved: false, restart: 0, failed_restarts: 0 }
}

fn place(
    model: &SurrogateModel,
    cfg: &ExperimentConfig,
    method: Method,
    gt: &GroundTruth,
    shared: Option<&BatchResult>,
    seed: u64,
    run: usize,
) -> Result<Placement> {
    let rs = run_seed(seed, run);
    let mut noise = rng::stream(rng::derive(rs, "noise"), 0);
    let mut history = initial_history(cfg, gt, &mut noise)?;
    if cfg.sensors == 0 {
        return Ok(Placement { history, rounds: Vec::new(), optimizer_calls: 0 });
    }
    let mut noise = rng::stream(rng::derive(rs, "method-noise"), 0);
    match method {
        Method::Qmc => {
            let xi = halton_sequence(cfg.sensors, &cfg.domain());
            let y = gt.truth.observe(&xi, cfg.pce.sigma, &mut noise)?;
            history.push(xi.clone(), y);
            Ok(Placement { history, rounds: vec![unscored(xi)], optimizer_calls: 0 })
        }
        Method::Batch => {
            let (placed, calls) = match shared {
                Some(p) => (p.clone(), 0),
                None => (adaptive_step(model, &history, cfg.sensors, &cfg.pce, &cfg.opt, &cfg.design_sgld, rng::derive(rs, "batch"))?, 1),
            };
            let y = gt.truth.observe(&placed.xi, cfg.pce.sigma, &mut noise)?;
            history.push(placed.xi.clone(), y);
            Ok(Placement { history, rounds: vec![placed], optimizer_calls: calls })
        }
        Method::Adaptive => {
            let steps = cfg.sensors / cfg.per_step;
            let run = adaptive_loop(
                &gt.truth,
                model,
                history,
                steps,
                cfg.per_step,
                &cfg.pce,
                &cfg.opt,
                &cfg.design_sgld,
                0,
                shared,
                rng::derive(rs, "adaptive"),
            )?;
            Ok(Placement { history: run.history, rounds: run.placements, optimizer_calls: steps - usize::from(shared.is_some()) })
        }
    }
}

/// Ground truth and placement of run `run` alone, identical to what
/// [`run_experiment`] computes for it.
pub fn place_run(surrogate: &Surrogate, cfg: &ExperimentConfig, method: Method, seed: u64, run: usize) -> Result<(GroundTruth, Placement)> {
    cfg.validate()?;
    let model = SurrogateModel::new(surrogate, cfg.channels())?;
    let shared = shared_placement(&model, cfg, method, seed)?;
    let gt = sample_ground_truth(cfg, seed, run)?;
    let placement = place(&model, cfg, method, &gt, shared.as_ref(), seed, run)?;
    Ok((gt, placement))
}

/// Posterior codes of run `run` given its observations, identical to what
/// [`run_experiment`] draws for it.
pub fn infer_run(surrogate: &Surrogate, cfg: &ExperimentConfig, history: &History, seed: u64, run: usize) -> Result<Vec<Vec<f64>>> {
    infer(surrogate, cfg, history, rng::derive(run_seed(seed, run), "infer"))
}

fn infer(surrogate: &Surrogate, cfg: &ExperimentConfig, history: &History, seed: u64) -> Result<Vec<Vec<f64>>> {
    let obs = history.observation_sets(cfg.pce.sigma)?;
    posterior_pool(surrogate, &obs, cfg.posterior_samples, &cfg.infer_sgld, seed)
}

/// Runs `cfg.runs` independent experiments of one method. Run `r` draws its
/// ground truth and noise from streams of `(seed, r)`, so runs can be
/// computed in any order and in parallel.
pub fn run_experiment(surrogate: &Surrogate, cfg: &ExperimentConfig, method: Method, seed: u64) -> Result<ExperimentReport> {
    cfg.validate()?;
    let model = SurrogateModel::new(surrogate, cfg.channels())?;
    let shared = shared_placement(&model, cfg, method, seed)?;
    let shared_calls = usize::from(shared.is_some());
    let results = par_map(cfg.runs, cfg.jobs, |r| -> Result<RunRecord> {
        let start = Instant::now();
        let gt = sample_ground_truth(cfg, seed, r)?;
        let Placement { history, optimizer_calls: calls, .. } = place(&model, cfg, method, &gt, shared.as_ref(), seed, r)?;
        let samples = infer_run(surrogate, cfg, &history, seed, r)?;
        let m = score(surrogate, &gt, cfg.problem, &samples)?;
        log::info!("{method} run {r}: u_rel_l2 {:.3e} in {:.1}s", m.u_rel_l2, start.elapsed().as_secs_f64());
        Ok(RunRecord {
            run: r,
            method,
            u_rel_l2: m.u_rel_l2,
            param_rel_l2: m.param_rel_l2,
            mse_a: m.mse_a,
            mse_b: m.mse_b,
            sensors: history.sensors(cfg.domain().dim()),
            optimizer_calls: calls,
            wall_time_s: start.elapsed().as_secs_f64(),
        })
    });
    let mut runs = Vec::new();
    let mut failures = Vec::new();
    for (r, res) in results.into_iter().enumerate() {
        match res {
            Ok(rec) => runs.push(rec),
            Err(e) => failures.push((r, e.to_string())),
        }
    }
    if runs.is_empty() {
        return Err(Error::numerical("experiment", format!("every run failed; first: {}", failures[0].1)));
    }
    let optimizer_calls = shared_calls + runs.iter().map(|r| r.optimizer_calls).sum::<usize>();
    Ok(ExperimentReport { problem: cfg.problem, method, aggregates: aggregates(&runs), runs, optimizer_calls, failures })
}

/// One point of a contraction curve.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CurveRow {
    pub method: Method,
    pub sensors: usize,
    pub mean: f64,
    pub std: f64,
    pub runs: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionCurve {
    pub rows: Vec<CurveRow>,
    /// `errors[m][r][k]`: solution error of method `m` (adaptive, qmc) in
    /// run `r` after `k` observations.
    pub errors: Vec<Vec<Vec<f64>>>,
}

impl ContractionCurve {
    pub fn per_run(&self, method: Method) -> &[Vec<f64>] {
        &self.errors[usize::from(method != Method::Adaptive)]
    }
}

/// Solution error after every sensor count `0..=max_sensors`, with the
/// initial observations of `cfg` counted first (shared by both methods), then
/// one adaptive placement or one Halton point per sensor. Count 0 is the
/// prior.
pub fn contraction_curve(surrogate: &Surrogate, cfg: &ExperimentConfig, max_sensors: usize, seed: u64) -> Result<ContractionCurve> {
    let dx = cfg.domain().dim();
    let n_init = cfg.initial.len() / dx;
    if max_sensors < n_init {
        return Err(Error::config("max_sensors", format!("must cover the {n_init} initial observations")));
    }
    let cfg = ExperimentConfig { sensors: max_sensors - n_init, per_step: 1, ..cfg.clone() };
    cfg.validate()?;
    let model = SurrogateModel::new(surrogate, cfg.channels())?;
    let shared = shared_placement(&model, &cfg, Method::Adaptive, seed)?;
    let per_run = par_map(cfg.runs, cfg.jobs, |r| -> Result<[Vec<f64>; 2]> {
        let gt = sample_ground_truth(&cfg, seed, r)?;
        let rs = run_seed(seed, r);
        let mut out = [Vec::new(), Vec::new()];
        for (m, method) in [Method::Adaptive, Method::Qmc].into_iter().enumerate() {
            let start = Instant::now();
            let history = place(&model, &cfg, method, &gt, shared.as_ref(), seed, r)?.history;
            log::info!("contraction run {r}: {method} placed in {:.1}s", start.elapsed().as_secs_f64());
            // Prefix of the first k observations.
            let flat: Vec<(Vec<f64>, Vec<f64>)> = history
                .steps
                .iter()
                .flat_map(|(xi, y)| {
                    let c = history.channels.len();
                    xi.chunks_exact(dx).zip(y.chunks_exact(c)).map(|(p, v)| (p.to_vec(), v.to_vec())).collect::<Vec<_>>()
                })
                .collect();
            for k in 0..=max_sensors {
                let mut h = History::new(history.channels.clone());
                for (p, v) in &flat[..k] {
                    h.push(p.clone(), v.clone());
                }
                let samples = infer(surrogate, &cfg, &h, rng::derive(rs, &format!("infer-{k}")))?;
                out[m].push(score(surrogate, &gt, cfg.problem, &samples)?.u_rel_l2);
            }
            log::info!("contraction run {r}: {method} errors {:.3e} -> {:.3e} in {:.1}s", out[m][0], out[m][max_sensors], start.elapsed().as_secs_f64());
        }
        Ok(out)
    });
    let mut errors = vec![Vec::new(), Vec::new()];
    for res in per_run {
        let [a, q] = res?;
        errors[0].push(a);
        errors[1].push(q);
    }
    let mut rows = Vec::new();
    for (m, method) in [Method::Adaptive, Method::Qmc].into_iter().enumerate() {
        for k in 0..=max_sensors {
            let v: Vec<f64> = errors[m].iter().map(|e| e[k]).collect();
            let (mean, std) = mean_std(&v);
            rows.push(CurveRow { method, sensors: k, mean, std, runs: v.len() });
        }
    }
    Ok(ContractionCurve { rows, errors })
}

/// Every run of one or more reports, one row each.
pub fn write_runs_csv(path: &Path, reports: &[ExperimentReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for rep in reports {
        for r in &rep.runs {
            w.serialize(r)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct ReportRow<'a> {
    problem: Problem,
    method: Method,
    metric: &'a str,
    mean: f64,
    std: f64,
    runs: usize,
    failed_runs: usize,
}

/// Aggregates of one or more reports.
pub fn write_report_csv(path: &Path, reports: &[ExperimentReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for rep in reports {
        for a in &rep.aggregates {
            w.serialize(ReportRow {
                problem: rep.problem,
                method: rep.method,
                metric: &a.metric,
                mean: a.mean,
                std: a.std,
                runs: a.count,
                failed_runs: rep.failures.len(),
            })?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn write_curve_csv(path: &Path, curve: &ContractionCurve) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in &curve.rows {
        w.serialize(row)?;
    }
    w.flush()?;
    Ok(())
}

/// Placement report: one row per placed sensor.
pub fn write_placements_csv(path: &Path, steps: &[(usize, &BatchResult)], in_dim: usize, wall_time_s: f64) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    let coords: Vec<String> = (0..in_dim).map(|k| format!("x{k}")).collect();
    writeln!(f, "step,sensor,{},utility,wall_time_s", coords.join(","))?;
    for (step, res) in steps {
        for (s, p) in res.xi.chunks_exact(in_dim).enumerate() {
            let xs: Vec<String> = p.iter().map(|v| format!("{v:.17e}")).collect();
            writeln!(f, "{step},{s},{},{:.17e},{wall_time_s:.3}", xs.join(","), res.utility)?;
        }
    }
    f.flush()?;
    Ok(())
}

/// Step seed exposed for callers reproducing one adaptive round.
pub fn adaptive_round_seed(seed: u64, run: usize, t: usize) -> u64 {
    step_seed(rng::derive(run_seed(seed, run), "adaptive"), t)
}
