use std::sync::Arc;

use couplings::ebm::{self, ed_loss, Ebm, EbmArch, EdHyper};
use couplings::inr::{self, encode, encode_dataset, standardize_codes, CodeStats, Inr, InrArch, InrTrainConfig};
use couplings::posterior::{self, posterior_logdensity, ObservationSet, PointDensity, SgldConfig};
use couplings::rng;
use couplings::simulate::{Domain, FunctionSample};
use couplings::surrogate::{Channel, KappaRepr, Surrogate};
use gradcore::{central_difference, finite_diff_check};
use gradcore::Tensor;
use proptest::prelude::*;
use rand::Rng as _;

const STEP: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs() / (x.abs() + STEP)).fold(0.0, f64::max)
}

fn small_inr(seed: u64) -> Inr {
    let arch = InrArch { in_dim: 2, latent_dim: 4, width: 16, depth: 3, hyper_width: 12, omega0: 30.0 };
    let mut inr = Inr::init(arch, Domain::unit_square(), seed).unwrap();
    inr.value_shift = 0.3;
    inr.value_scale = 2.0;
    inr
}

#[test]
fn inr_gradients_match_central_differences() {
    let mut r = rng::stream(1, 0);
    for i in 0..100 {
        let inr = small_inr(i);
        let z: Vec<f64> = (0..4).map(|_| 0.1 * rng::normal(&mut r)).collect();
        let x: Vec<f64> = (0..2).map(|_| r.random_range(0.0..1.0)).collect();
        let (_, gx, gz) = inr.value_and_grads(&z, &x).unwrap();
        let fx = central_difference(|xx| inr.decode(&z, xx).unwrap()[0], &x, STEP);
        let fz = central_difference(|zz| inr.decode(zz, &x).unwrap()[0], &z, STEP);
        assert!(rel(&gx, &fx) < TOL, "point {i}: dx {gx:?} vs {fx:?}");
        assert!(rel(&gz, &fz) < TOL, "point {i}: dz {gz:?} vs {fz:?}");
    }
}

#[test]
fn inr_is_lipschitz_in_x_near_each_point() {
    let inr = small_inr(3);
    let z = vec![0.05, -0.02, 0.1, 0.0];
    let mut r = rng::stream(2, 0);
    for _ in 0..50 {
        let x = [r.random_range(0.1..0.9), r.random_range(0.1..0.9)];
        let (_, g, _) = inr.value_and_grads(&z, &x).unwrap();
        let c = 2.0 * g.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-9;
        let delta = 5e-4;
        let y = [x[0] + delta * 0.6, x[1] + delta * 0.8];
        let d = (inr.decode(&z, &y).unwrap()[0] - inr.decode(&z, &x).unwrap()[0]).abs();
        assert!(d <= c * delta, "{d} > {}", c * delta);
    }
}

fn constant_samples(count: usize, value: f64) -> Vec<FunctionSample> {
    (0..count)
        .map(|i| {
            let xs: Vec<f64> = (0..10).map(|k| -1.0 + 2.0 * ((k * 7 + i) % 10) as f64 / 9.0).collect();
            FunctionSample::new(1, xs, vec![value; 10]).unwrap()
        })
        .collect()
}

fn tiny_arch() -> InrArch {
    InrArch { in_dim: 1, latent_dim: 3, width: 16, depth: 2, hyper_width: 8, omega0: 30.0 }
}

#[test]
fn one_epoch_on_a_constant_function_reduces_the_loss() {
    let data = constant_samples(64, 1.7);
    let cfg = InrTrainConfig { epochs: 1, outer_lr: 1e-3, ..InrTrainConfig::default() };
    let (trained, _) = inr::train_inr(tiny_arch(), Domain::interval(-1.0, 1.0), &data, &cfg, 4).unwrap();
    let mut before = Inr::init(tiny_arch(), Domain::interval(-1.0, 1.0), 4).unwrap();
    before.value_shift = trained.value_shift;
    before.value_scale = trained.value_scale;
    let l0 = inr::reconstruction_loss(&before, &data, 3, 1e-2).unwrap();
    let l1 = inr::reconstruction_loss(&trained, &data, 3, 1e-2).unwrap();
    assert!(l1 < l0, "{l1} >= {l0}");
}

#[test]
fn training_is_deterministic() {
    let data = constant_samples(20, -0.4);
    let cfg = InrTrainConfig { epochs: 2, ..InrTrainConfig::default() };
    let a = inr::train_inr(tiny_arch(), Domain::interval(-1.0, 1.0), &data, &cfg, 8).unwrap();
    let b = inr::train_inr(tiny_arch(), Domain::interval(-1.0, 1.0), &data, &cfg, 8).unwrap();
    assert_eq!(a, b);
}

#[test]
fn encoding_is_pure_and_batched_like_single() {
    let inr = Inr::init(tiny_arch(), Domain::interval(-1.0, 1.0), 5).unwrap();
    let data: Vec<FunctionSample> = (0..70)
        .map(|i| FunctionSample::new(1, vec![-0.5, 0.0, 0.5], vec![i as f64 * 0.01, 0.2, -0.3]).unwrap())
        .collect();
    let a = encode_dataset(&inr, &data, 3, 1e-2).unwrap();
    assert_eq!(a, encode_dataset(&inr, &data, 3, 1e-2).unwrap());
    for (s, z) in data.iter().zip(&a).step_by(9) {
        let single = encode(&inr, s, 3, 1e-2).unwrap();
        assert!(single.iter().zip(z).all(|(p, q)| (p - q).abs() < 1e-12));
    }
    assert!(encode_dataset(&inr, &[], 3, 1e-2).unwrap().is_empty());
}

#[test]
fn standardized_codes_have_zero_mean_unit_std() {
    let mut r = rng::stream(6, 0);
    let codes: Vec<Vec<f64>> = (0..200).map(|_| (0..5).map(|k| 3.0 * k as f64 + (k + 1) as f64 * rng::normal(&mut r)).collect()).collect();
    let (std, _) = standardize_codes(&codes).unwrap();
    let again = CodeStats::fit(&std).unwrap();
    assert!(again.mean.iter().all(|m| m.abs() < 1e-10));
    assert!(again.std.iter().all(|s| (s - 1.0).abs() < 1e-10));
    let (_, single) = standardize_codes(&vec![vec![1.0, 2.0]; 4]).unwrap();
    assert!(single.degenerate.iter().all(|d| *d));
}

fn small_ebm(seed: u64) -> Ebm {
    jittered_ebm(EbmArch { kappa_dim: 2, u_dim: 3, width: 8 }, seed)
}

fn jittered_ebm(arch: EbmArch, seed: u64) -> Ebm {
    let mut e = Ebm::init(arch, seed);
    // Non-zero biases so that every unit is exercised.
    let mut r = rng::stream(seed, 9);
    for p in e.params.iter_mut().filter(|p| p.shape().len() == 1) {
        for v in Arc::make_mut(p).data_mut() {
            *v = 0.3 * rng::normal(&mut r);
        }
    }
    e
}

#[test]
fn energy_gradient_matches_central_differences() {
    let mut r = rng::stream(7, 0);
    for i in 0..100 {
        let e = small_ebm(i);
        let z = rng::normals(&mut r, 5);
        let (_, g) = e.energy_and_grad(&z).unwrap();
        let fd = central_difference(|zz| e.energy(zz).unwrap(), &z, STEP);
        assert!(rel(&g, &fd) < TOL, "point {i}: {g:?} vs {fd:?}");
    }
}

#[test]
fn ed_loss_parameter_gradient_matches_central_differences() {
    let hyper = EdHyper { t: 1.0, m: 4, w: 1.0, epochs: 1 };
    let mut r = rng::stream(8, 0);
    let (mut checked, mut redrawn) = (0, 0);
    let mut i = 0;
    while checked < 100 {
        i += 1;
        let e = jittered_ebm(EbmArch { kappa_dim: 1, u_dim: 1, width: 4 }, i);
        let z = rng::normals(&mut r, 2 * 3);
        let (mut tape, inputs) = ebm::ed_loss_tape(&e, &z, &hyper, i).unwrap();
        // The relu units make the loss piecewise smooth only.
        if !gradcore::is_smooth_at(&mut tape, &inputs, STEP).unwrap() {
            redrawn += 1;
            continue;
        }
        let worst = finite_diff_check(&mut tape, &inputs, STEP).unwrap();
        assert!(worst < TOL, "point {i}: {worst}");
        checked += 1;
    }
    assert!(redrawn <= 10, "{redrawn} points sat on a kink");
}

#[test]
fn constant_energy_gives_log_w_over_m_plus_one() {
    let mut e = small_ebm(1);
    for p in e.params.iter_mut() {
        let s = p.shape().to_vec();
        *p = Arc::new(Tensor::full(&s, 0.0));
    }
    let z = rng::normals(&mut rng::stream(3, 0), 5 * 10);
    for (m, w) in [(4, 1.0), (16, 1.0), (3, 0.5)] {
        let hyper = EdHyper { t: 0.5, m, w, epochs: 1 };
        assert_eq!(ed_loss(&e, &z, &hyper, 2).unwrap(), (w / m as f64 + 1.0).ln());
    }
    let hyper = EdHyper { t: 1.0, m: 4, w: 1.0, epochs: 1 };
    assert!((ed_loss(&e, &z, &hyper, 0).unwrap() - 0.223144).abs() < 1e-6);
}

#[test]
fn ed_loss_is_shift_invariant_bit_for_bit() {
    let hyper = EdHyper { t: 1.0, m: 4, w: 1.0, epochs: 1 };
    let e = small_ebm(2);
    let z = rng::normals(&mut rng::stream(4, 0), 5 * 16);
    let base = ed_loss(&e, &z, &hyper, 11).unwrap();
    for c in [1.0, -123.5, 1e6] {
        let mut shifted = e.clone();
        Arc::make_mut(&mut shifted.params[25]).data_mut()[0] += c;
        assert!((shifted.energy(&z[..5]).unwrap() - e.energy(&z[..5]).unwrap() - c).abs() < 1e-6 * c.abs().max(1.0));
        assert_eq!(ed_loss(&shifted, &z, &hyper, 11).unwrap().to_bits(), base.to_bits());
    }
}

#[test]
fn ed_loss_is_permutation_invariant() {
    let hyper = EdHyper { t: 1.0, m: 4, w: 1.0, epochs: 1 };
    let e = small_ebm(5);
    let z = rng::normals(&mut rng::stream(5, 0), 5 * 8);
    let zp = ebm::perturb(&z, 5, &hyper, &mut rng::stream(1, 1));
    // Reverse the data together with their perturbation blocks.
    let rev: Vec<f64> = z.chunks_exact(5).rev().flatten().copied().collect();
    let rev_p: Vec<f64> = zp.chunks_exact(5 * 4).rev().flatten().copied().collect();
    let loss = |z: &[f64], zp: &[f64]| {
        let (mut tape, mut inputs) = ebm::ed_loss_tape(&e, z, &hyper, 0).unwrap();
        let n = inputs.len();
        inputs[n - 1] = Tensor::matrix(zp.len() / 5, 5, zp.to_vec());
        tape.forward(inputs).unwrap().item()
    };
    assert!((loss(&z, &zp) - loss(&rev, &rev_p)).abs() < 1e-12);
}

#[test]
fn trained_energy_beats_the_constant_baseline() {
    let hyper = EdHyper { t: 1.0, m: 4, w: 1.0, epochs: 60 };
    let mut r = rng::stream(12, 0);
    let codes: Vec<Vec<f64>> = (0..512).map(|_| rng::normals(&mut r, 2)).collect();
    let cfg = ebm::EbmTrainConfig { batch: 128, ..ebm::EbmTrainConfig::new(hyper) };
    let (model, log) = ebm::train_ebm(EbmArch { kappa_dim: 1, u_dim: 1, width: 16 }, &codes, &cfg, 3).unwrap();
    let flat: Vec<f64> = codes.iter().flatten().copied().collect();
    let final_loss = ed_loss(&model, &flat, &hyper, 99).unwrap();
    assert!(final_loss < 1.25f64.ln(), "{final_loss}");
    assert!(log.last().unwrap() < &1.25f64.ln());
    let again = ebm::train_ebm(EbmArch { kappa_dim: 1, u_dim: 1, width: 16 }, &codes, &EbmTrainConfig2::from(&cfg), 3).unwrap();
    assert_eq!(again.0, model);
}

struct EbmTrainConfig2;
impl EbmTrainConfig2 {
    fn from(c: &ebm::EbmTrainConfig) -> ebm::EbmTrainConfig {
        c.clone()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn ed_loss_never_below_log_w_over_m(seed in 0u64..1_000_000, m in 1usize..20, w in 0.01f64..5.0, t in 0.01f64..3.0) {
        let hyper = EdHyper { t, m, w, epochs: 1 };
        let e = Ebm::init(EbmArch { kappa_dim: 1, u_dim: 2, width: 4 }, seed);
        let z = rng::normals(&mut rng::stream(seed, 1), 3 * 4);
        let loss = ed_loss(&e, &z, &hyper, seed).unwrap();
        prop_assert!(loss >= (w / m as f64).ln());
    }
}

fn gaussian_target() -> PointDensity<impl FnMut(&[f64]) -> couplings::Result<(f64, Vec<f64>)>> {
    PointDensity { dim: 2, f: |z: &[f64]| Ok((-0.5 * z.iter().map(|v| v * v).sum::<f64>(), z.iter().map(|v| -v).collect())) }
}

fn moments(s: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = s.len() as f64;
    let d = s[0].len();
    let mean: Vec<f64> = (0..d).map(|k| s.iter().map(|x| x[k]).sum::<f64>() / n).collect();
    let var = (0..d).map(|k| s.iter().map(|x| (x[k] - mean[k]).powi(2)).sum::<f64>() / n).collect();
    (mean, var)
}

/// Many short independent chains, one post-burn-in iterate each.
fn calibration_config() -> SgldConfig {
    SgldConfig { steps: 100, chains: 10_000, eps0: 2.0, burn_in: 0.99, ..SgldConfig::default() }
}

#[test]
fn sgld_reproduces_a_standard_gaussian() {
    let cfg = calibration_config();
    let mut r = rng::stream(13, 0);
    // Start away from the target so that burn-in matters.
    let init: Vec<Vec<f64>> = (0..cfg.chains).map(|_| rng::normals(&mut r, 2).iter().map(|v| 2.0 * v + 1.0).collect()).collect();
    let out = posterior::sgld(&mut gaussian_target(), &init, &cfg, 14).unwrap();
    let pooled = out.pooled();
    assert_eq!(pooled.len(), 10_000);
    let (mean, var) = moments(&pooled);
    assert!(mean.iter().all(|m| m.abs() < 0.05), "{mean:?}");
    assert!(var.iter().all(|v| (v - 1.0).abs() < 0.1), "{var:?}");
}

#[test]
fn sgld_reproduces_a_gaussian_mixture() {
    // 0.5 N(-1, 0.5^2) + 0.5 N(1, 0.5^2) per coordinate, independent coordinates.
    let mut target = PointDensity {
        dim: 2,
        f: |z: &[f64]| {
            let mut lp = 0.0;
            let mut g = Vec::with_capacity(2);
            for &x in z {
                let a = -0.5 * ((x + 1.0) / 0.5).powi(2);
                let b = -0.5 * ((x - 1.0) / 0.5).powi(2);
                let m = a.max(b);
                let (wa, wb) = ((a - m).exp(), (b - m).exp());
                lp += m + (wa + wb).ln();
                g.push((wa * (-(x + 1.0) / 0.25) + wb * (-(x - 1.0) / 0.25)) / (wa + wb));
            }
            Ok((lp, g))
        },
    };
    let cfg = SgldConfig { steps: 200, eps0: 1.0, ..calibration_config() };
    let s = posterior::sample_independent(&mut target, 10_000, &cfg, 15).unwrap();
    let (mean, var) = moments(&s);
    assert!(mean.iter().all(|m| m.abs() < 0.05), "{mean:?}");
    assert!(var.iter().all(|v| (v / 1.25 - 1.0).abs() < 0.1), "{var:?}");
}

fn tiny_surrogate(seed: u64) -> Surrogate {
    let arch = InrArch { in_dim: 1, latent_dim: 3, width: 12, depth: 2, hyper_width: 8, omega0: 30.0 };
    let mut u = Inr::init(arch, Domain::interval(-1.0, 1.0), seed).unwrap();
    u.value_scale = 1.5;
    let ebm = small_ebm(seed);
    let stats = CodeStats { mean: vec![0.1, -0.2, 0.0, 0.05, 0.0], std: vec![1.5, 0.5, 0.02, 0.03, 0.01], degenerate: vec![false; 5] };
    Surrogate::new(KappaRepr::Params { dim: 2 }, u, ebm, stats).unwrap()
}

#[test]
fn posterior_without_observations_is_the_prior() {
    let s = tiny_surrogate(1);
    let z = rng::normals(&mut rng::stream(16, 0), 5);
    let (lp, g) = posterior_logdensity(&s, &[], &z).unwrap();
    let (e, ge) = s.ebm.energy_and_grad(&z).unwrap();
    assert!((lp + e).abs() < 1e-12);
    assert!(g.iter().zip(&ge).all(|(a, b)| (a + b).abs() < 1e-12));
}

#[test]
fn exact_observation_contributes_the_gaussian_peak() {
    let s = tiny_surrogate(2);
    let z = rng::normals(&mut rng::stream(17, 0), 5);
    let raw = s.raw_code(&z, Channel::U);
    let y = s.u.decode(&raw, &[0.3]).unwrap()[0];
    let obs = [ObservationSet::new(Channel::U, vec![0.3], vec![y], 0.2).unwrap()];
    let (with, _) = posterior_logdensity(&s, &obs, &z).unwrap();
    let (without, _) = posterior_logdensity(&s, &[], &z).unwrap();
    let peak = -0.5 * (2.0 * std::f64::consts::PI * 0.04).ln();
    assert!((with - without - peak).abs() < 1e-12, "{}", with - without);
    assert!((peak - 0.690486).abs() < 2e-5);
    // A duplicated observation adds the same term again.
    let twice = [ObservationSet::new(Channel::U, vec![0.3, 0.3], vec![y, y], 0.2).unwrap()];
    let (dup, _) = posterior_logdensity(&s, &twice, &z).unwrap();
    assert!((dup - with - (with - without)).abs() < 1e-10);
}

#[test]
fn posterior_gradient_matches_central_differences() {
    let mut r = rng::stream(18, 0);
    for i in 0..100 {
        let s = tiny_surrogate(i);
        let xs: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        let ys: Vec<f64> = (0..3).map(|_| rng::normal(&mut r)).collect();
        let obs = [ObservationSet::new(Channel::U, xs, ys, 0.3).unwrap()];
        let z = rng::normals(&mut r, 5);
        let (_, g) = posterior_logdensity(&s, &obs, &z).unwrap();
        let fd = central_difference(|zz| posterior_logdensity(&s, &obs, zz).unwrap().0, &z, STEP);
        assert!(rel(&g, &fd) < TOL, "point {i}: {g:?} vs {fd:?}");
    }
}

#[test]
fn likelihood_gradient_scales_as_inverse_variance() {
    let s = tiny_surrogate(3);
    let z = rng::normals(&mut rng::stream(19, 0), 5);
    let (_, prior) = posterior_logdensity(&s, &[], &z).unwrap();
    let lik_norm = |sigma: f64| {
        let obs = [ObservationSet::new(Channel::U, vec![-0.4, 0.1, 0.7], vec![1.0, -0.5, 0.3], sigma).unwrap()];
        let (_, g) = posterior_logdensity(&s, &obs, &z).unwrap();
        g.iter().zip(&prior).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt()
    };
    let ratio = lik_norm(0.5) / lik_norm(5.0);
    assert!((ratio / 100.0 - 1.0).abs() < 0.2, "{ratio}");
}

#[test]
fn observations_outside_the_domain_are_rejected() {
    let s = tiny_surrogate(4);
    let obs = [ObservationSet::new(Channel::U, vec![1.5], vec![0.0], 0.1).unwrap()];
    assert!(matches!(posterior_logdensity(&s, &obs, &[0.0; 5]), Err(couplings::Error::OutsideDomain { .. })));
}

#[test]
fn posterior_mean_function_identities() {
    let s = tiny_surrogate(5);
    let mut r = rng::stream(20, 0);
    let samples: Vec<Vec<f64>> = (0..6).map(|_| rng::normals(&mut r, 5)).collect();
    let q = [-0.9, -0.1, 0.4, 0.95];
    let one = posterior::posterior_mean_function(&s, Channel::U, &samples[..1], &q).unwrap();
    assert_eq!(one.values, s.u.decode(&s.raw_code(&samples[0], Channel::U), &q).unwrap());
    let mean = posterior::posterior_mean_function(&s, Channel::U, &samples, &q).unwrap();
    let doubled: Vec<Vec<f64>> = samples.iter().chain(&samples).cloned().collect();
    let mean2 = posterior::posterior_mean_function(&s, Channel::U, &doubled, &q).unwrap();
    assert!(mean.values.iter().zip(&mean2.values).all(|(a, b)| (a - b).abs() < 1e-12));
    // Mean of decodes equals average computed point by point.
    for (k, x) in q.iter().enumerate() {
        let avg = samples.iter().map(|z| s.u.decode(&s.raw_code(z, Channel::U), &[*x]).unwrap()[0]).sum::<f64>() / 6.0;
        assert!((avg - mean.values[k]).abs() < 1e-12);
    }
}

#[test]
fn prior_sampling_is_reproducible_and_zero_step_is_static() {
    let e = small_ebm(6);
    let cfg = SgldConfig { steps: 20, eps0: 0.01, ..SgldConfig::default() };
    let a = ebm::sample_prior(&e, 5, &cfg, 1).unwrap();
    assert_eq!(a, ebm::sample_prior(&e, 5, &cfg, 1).unwrap());
    let still = SgldConfig { eps0: 0.0, ..cfg };
    let b = ebm::sample_prior(&e, 5, &still, 1).unwrap();
    let c = ebm::sample_prior(&e, 5, &SgldConfig { steps: 3, ..still }, 1).unwrap();
    assert_eq!(b, c);
}

