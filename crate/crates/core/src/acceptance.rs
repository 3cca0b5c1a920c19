//! Acceptance suite: one pass/fail line per criterion with pinned thresholds.

use std::fmt;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::conductivity::Identity;
use crate::energy_search::{constrained_infimum, find_energy_function, upper_sweep};
use crate::error::{ForgeError, Result};
use crate::mesh::{build_box_mesh, BoxDomain};
use crate::pipeline::{certificate_for, factor_and_frequency, prepare, run_counterexample, ForgeConfig, ForgeReport, Prepared};
use crate::spectral::dirichlet_eigenpairs;

pub const RESOLUTIONS: [usize; 3] = [8, 12, 16];
pub const MAIN_RESOLUTION: usize = 12;
pub const SPECTRAL_SLOPE: f64 = 2.0;
pub const SPECTRAL_SLOPE_TOL: f64 = 0.3;
pub const SPECTRAL_RUNTIME_SECS: f64 = 120.0;
pub const BRACKET_REL: f64 = 0.05;
pub const ENERGY_SAMPLES: usize = 20;
pub const ENERGY_REL_TOL: f64 = 1e-8;
pub const CONSTRAINT_TOL: f64 = 1e-12;
pub const ZERO_MEAN_REL: f64 = 1e-10;
pub const RESIDUAL_REL: f64 = 1e-12;
pub const FREQUENCY_AMPLITUDES: [f64; 4] = [0.2, 0.1, 0.05, 0.025];
pub const FREQUENCY_SLOPE_MIN: f64 = 0.9;
pub const DET_TOL: f64 = 1e-4;
pub const DET_SLOPE_MIN: f64 = 1.7;
pub const INVERSE_TOL: f64 = 1e-8;
pub const CONTROL_FLOOR_FACTOR: f64 = 10.0;
pub const NEGATIVE_FLOOR_FACTOR: f64 = 50.0;
pub const PAIR_CONTROL_MAX: f64 = 0.1;
pub const MAIN_RUNTIME_SECS: f64 = 900.0;
pub const CERTIFICATE_MARGIN: f64 = 10.0;
pub const CERTIFICATE_AMPLITUDES: [f64; 3] = [0.2, 0.1, 0.05];
pub const GAP_SLOPE: f64 = 2.0;
pub const GAP_SLOPE_TOL: f64 = 0.1;
pub const PREDICTION_RANGE: (f64, f64) = (0.9, 1.1);
pub const PREDICTION_AMPLITUDE: f64 = 0.05;
pub const LAMBDA0: f64 = 20.0;
/// Criteria that fail at their stated thresholds for the default
/// construction: the frequency shift is still pre-asymptotic over the
/// amplitude schedule (monotone, slope ~0.7).
pub const KNOWN_UNATTAINABLE: [u8; 1] = [5];
pub const AMPLITUDE: f64 = 0.1;

#[derive(Clone, Debug)]
pub struct CriterionResult {
    pub id: u8,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CriterionResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let tag = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "[{tag}] criterion {:>2} {}: {}", self.id, self.name, self.detail)
    }
}

/// A decided criterion or the description of the error that stopped it.
type Outcome = std::result::Result<(bool, String), String>;

fn describe(e: &ForgeError) -> String {
    format!("error (exit {}): {e}", e.exit_code())
}

fn result(id: u8, name: &'static str, outcome: Outcome) -> CriterionResult {
    match outcome {
        Ok((passed, detail)) => CriterionResult { id, name, passed, detail },
        Err(detail) => CriterionResult { id, name, passed: false, detail },
    }
}

fn decided(r: Result<(bool, String)>) -> Outcome {
    r.map_err(|e| describe(&e))
}

/// Least-squares slope of log y against log x.
pub fn loglog_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

fn sci(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| format!("{x:.3e}")).collect();
    format!("[{}]", parts.join(", "))
}

/// Borrows a shared run, describing its error.
fn shared<T>(r: &Result<T>) -> std::result::Result<&T, String> {
    r.as_ref().map_err(describe)
}

fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

pub fn base_config(lambda0: f64, resolution: usize) -> ForgeConfig {
    ForgeConfig { lambda0, resolution, eps: vec![AMPLITUDE], ..ForgeConfig::default() }
}

/// Pipeline runs shared between criteria.
struct Runs {
    main: Result<(ForgeReport, f64)>,
    coarse: Result<ForgeReport>,
    fine: Result<ForgeReport>,
    prep: Result<Prepared>,
    case2_main: Result<(ForgeReport, f64)>,
    case2_prep: Result<Prepared>,
}

fn timed_run(cfg: &ForgeConfig) -> Result<(ForgeReport, f64)> {
    let t = Instant::now();
    let r = run_counterexample(cfg)?;
    Ok((r, t.elapsed().as_secs_f64()))
}

fn light(cfg: ForgeConfig) -> ForgeConfig {
    ForgeConfig { controls: false, ..cfg }
}

fn spectral_sanity() -> Result<(bool, String)> {
    let exact = 3.0 * std::f64::consts::PI.powi(2);
    let mut hs = Vec::new();
    let mut l1 = Vec::new();
    let mut slowest: f64 = 0.0;
    for r in RESOLUTIONS {
        let mesh = build_box_mesh(r, BoxDomain::unit())?;
        let t = Instant::now();
        let s = dirichlet_eigenpairs(&Identity, &mesh, 2)?;
        slowest = slowest.max(t.elapsed().as_secs_f64());
        hs.push(mesh.h());
        l1.push(s.eigenvalues[0]);
    }
    let errs: Vec<f64> = l1.iter().map(|l| l - exact).collect();
    let upper = errs.iter().all(|e| *e > 0.0);
    let slope = loglog_slope(&hs, &errs);
    let passed = upper && strictly_decreasing(&l1) && (slope - SPECTRAL_SLOPE).abs() <= SPECTRAL_SLOPE_TOL && slowest <= SPECTRAL_RUNTIME_SECS;
    Ok((passed, format!("lambda1 {l1:.6?}, limit {exact:.6}, slope {slope:.3}, slowest {slowest:.2}s")))
}

fn bracket(fine: &ForgeReport) -> (bool, String) {
    let ev = &fine.spectrum.eigenvalues;
    let m = fine.energy.m_fem;
    let slack = (m - ev[1]).max(0.0);
    let target = 6.0 * std::f64::consts::PI.powi(2);
    let rel = (m - target).abs() / target;
    let passed = ev[0] < m && slack <= BRACKET_REL * ev[1] && rel <= BRACKET_REL;
    (
        passed,
        format!(
            "resolution {}: lambda1 {:.4} < m {m:.4} <= lambda2 {:.4} + slack {slack:.3e}; |m - 6pi^2|/6pi^2 = {rel:.4}; dictionary m {:.4}",
            fine.mesh.resolution, ev[0], ev[1], fine.energy.m_dictionary
        ),
    )
}

fn energy_targeting(prep: &Prepared, seed: u64) -> Result<(bool, String)> {
    let (m, u0) = constrained_infimum(&prep.dict)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_energy, mut worst_mean, mut worst_norm): (f64, f64, f64) = (0.0, 0.0, 0.0);
    for _ in 0..ENERGY_SAMPLES {
        let tau = rng.gen_range(m..10.0 * m);
        let sweep = upper_sweep(&prep.dict, &prep.mesh, &prep.spectrum, &prep.space.mass, tau)?;
        let t = find_energy_function(&u0, &sweep.v, tau, ENERGY_REL_TOL)?;
        worst_energy = worst_energy.max((t.w.energy() - tau).abs() / tau);
        worst_mean = worst_mean.max(t.w.integral().abs());
        worst_norm = worst_norm.max((t.w.norm_squared().sqrt() - 1.0).abs());
    }
    let passed = worst_energy <= ENERGY_REL_TOL && worst_mean <= CONSTRAINT_TOL && worst_norm <= CONSTRAINT_TOL;
    Ok((
        passed,
        format!("{ENERGY_SAMPLES} targets in (m, 10m), m = {m:.3}: max rel energy error {worst_energy:.2e}, max |int u| {worst_mean:.2e}, max |norm - 1| {worst_norm:.2e}"),
    ))
}

fn construction_identities(r: &ForgeReport) -> (bool, String) {
    let c = &r.construction;
    let rel_mean = c.f_integral.abs() / c.f_l1;
    let lambda = c.frequency.lambda.abs();
    let passed = rel_mean <= ZERO_MEAN_REL && c.residual_max <= RESIDUAL_REL * lambda && c.zero_outside_support;
    (
        passed,
        format!(
            "|int f|/|f|_1 = {rel_mean:.2e}, max residual {:.2e} (bound {:.2e}), zero outside support: {}",
            c.residual_max,
            RESIDUAL_REL * lambda,
            c.zero_outside_support
        ),
    )
}

fn frequency_asymptotics(prep: &Prepared) -> Result<(bool, String)> {
    let mut shifts = Vec::new();
    for a in FREQUENCY_AMPLITUDES {
        let (_, plan) = factor_and_frequency(prep, a)?;
        shifts.push((plan.lambda - plan.lambda0).abs());
    }
    let slope = loglog_slope(&FREQUENCY_AMPLITUDES, &shifts);
    let passed = slope >= FREQUENCY_SLOPE_MIN && strictly_decreasing(&shifts);
    Ok((passed, format!("|lambda_eps - lambda0| {}, slope {slope:.3}", sci(&shifts))))
}

/// Coarse and fine runs of a refinement study, when one is checked.
type Refinement<'a> = Option<(Option<&'a ForgeReport>, Option<&'a ForgeReport>)>;

fn moser_step(main: &ForgeReport, refinement: Refinement<'_>) -> (bool, String) {
    let m = &main.moser;
    let mut passed = m.det_max_deviation <= DET_TOL && m.collar_identity && m.inverse_max_error <= INVERSE_TOL;
    let mut detail = format!(
        "resolution {}: max |det - (1+f)| {:.3e}, collar fixed: {}, max inverse error {:.2e}",
        main.mesh.resolution, m.det_max_deviation, m.collar_identity, m.inverse_max_error
    );
    match refinement {
        None => {}
        Some((Some(c), Some(f))) => {
            let hs = [c.mesh.h, main.mesh.h, f.mesh.h];
            let dev = [c.moser.det_max_deviation, m.det_max_deviation, f.moser.det_max_deviation];
            let slope = loglog_slope(&hs, &dev);
            passed &= strictly_decreasing(&dev) && slope >= DET_SLOPE_MIN;
            detail += &format!("; deviations {} over h, slope {slope:.2}", sci(&dev));
        }
        _ => {
            passed = false;
            detail += "; refinement runs failed";
        }
    }
    (passed, detail)
}

fn gauge_controls(r: &ForgeReport) -> (bool, String) {
    let Some(c) = &r.dn.controls else {
        return (false, "controls were not run".into());
    };
    let floor = r.dn.floor.floor;
    let a = c.zero_frequency <= CONTROL_FLOOR_FACTOR * c.floor_zero.floor;
    let b = c.unimodular <= CONTROL_FLOOR_FACTOR * floor;
    let n = c.non_unimodular >= NEGATIVE_FLOOR_FACTOR * floor;
    (
        a && b && n,
        format!(
            "(a) {:.2e} vs floor {:.2e}; (b) {:.2e} vs floor {floor:.2e}; (c) {:.2e} = {:.1e} x floor",
            c.zero_frequency,
            c.floor_zero.floor,
            c.unimodular,
            c.non_unimodular,
            c.non_unimodular / floor
        ),
    )
}

fn pair_verdict(main: &ForgeReport, seconds: f64, refinement: Refinement<'_>) -> (bool, String) {
    let ratio = main.dn.pair_smooth / main.dn.control_smooth;
    let mut passed = ratio <= PAIR_CONTROL_MAX && seconds <= MAIN_RUNTIME_SECS;
    let mut detail = format!(
        "resolution {}: pair {:.3e}, control {:.3e}, ratio {ratio:.4}, runtime {seconds:.1}s",
        main.mesh.resolution, main.dn.pair_smooth, main.dn.control_smooth
    );
    match refinement {
        None => {}
        Some((Some(c), Some(f))) => {
            let pairs = [c.dn.pair_smooth, main.dn.pair_smooth, f.dn.pair_smooth];
            passed &= strictly_decreasing(&pairs);
            detail += &format!("; pair over resolutions {RESOLUTIONS:?}: {}", sci(&pairs));
        }
        _ => {
            passed = false;
            detail += "; refinement runs failed";
        }
    }
    (passed, detail)
}

fn certificate(prep: &Prepared, main: &ForgeReport) -> Result<(bool, String)> {
    let cert = &main.certificate;
    let margin = cert.gap.abs() / cert.error_bound;
    let base = main.invariants.invariant_beta;
    let mut gaps = Vec::new();
    let mut ratio = f64::NAN;
    for a in CERTIFICATE_AMPLITUDES {
        let (c, plan) = factor_and_frequency(prep, a)?;
        let cert = certificate_for(prep, &c, &plan, base, 0.0)?;
        gaps.push(cert.gap.abs());
        if a == PREDICTION_AMPLITUDE {
            ratio = cert.ratio;
        }
    }
    let slope = loglog_slope(&CERTIFICATE_AMPLITUDES, &gaps);
    let passed = margin >= CERTIFICATE_MARGIN
        && (slope - GAP_SLOPE).abs() <= GAP_SLOPE_TOL
        && (PREDICTION_RANGE.0..=PREDICTION_RANGE.1).contains(&ratio)
        && main.mesh.resolution >= MAIN_RESOLUTION;
    Ok((
        passed,
        format!(
            "|dI| {:.3e} = {margin:.2e} x bound; |dI| over eps {}, slope {slope:.3}; dI/dpred at {PREDICTION_AMPLITUDE} = {ratio:.4}",
            cert.gap.abs(),
            sci(&gaps)
        ),
    ))
}

/// Runs every criterion, reporting each line as soon as it is decided.
pub fn run_acceptance<F: FnMut(&CriterionResult)>(mut report: F) -> Vec<CriterionResult> {
    let mut out = Vec::new();
    let mut push = |r: CriterionResult, out: &mut Vec<CriterionResult>| {
        report(&r);
        out.push(r);
    };
    push(result(1, "spectral sanity", decided(spectral_sanity())), &mut out);

    let runs = Runs {
        main: timed_run(&base_config(LAMBDA0, MAIN_RESOLUTION)),
        coarse: run_counterexample(&light(base_config(LAMBDA0, RESOLUTIONS[0]))),
        fine: run_counterexample(&light(base_config(LAMBDA0, RESOLUTIONS[2]))),
        prep: prepare(&base_config(LAMBDA0, MAIN_RESOLUTION)),
        case2_main: timed_run(&base_config(-LAMBDA0, MAIN_RESOLUTION)),
        case2_prep: prepare(&base_config(-LAMBDA0, MAIN_RESOLUTION)),
    };

    push(result(2, "constrained numerical range bracket", shared(&runs.fine).map(bracket)), &mut out);
    push(result(3, "energy targeting", shared(&runs.prep).and_then(|p| decided(energy_targeting(p, 7)))), &mut out);

    let criteria_4_to_9 = |main: &Result<(ForgeReport, f64)>, prep: &Result<Prepared>, refine: bool| -> Vec<(u8, &'static str, Outcome)> {
        let refinement = refine.then(|| (runs.coarse.as_ref().ok(), runs.fine.as_ref().ok()));
        let m = || shared(main);
        vec![
            (4, "construction identities", m().map(|(r, _)| construction_identities(r))),
            (5, "frequency asymptotics", shared(prep).and_then(|p| decided(frequency_asymptotics(p)))),
            (6, "moser step", m().map(|(r, _)| moser_step(r, refinement))),
            (7, "gauge invariance controls", m().map(|(r, _)| gauge_controls(r))),
            (8, "equal DN maps and non-isometry at desk scale", m().map(|(r, t)| pair_verdict(r, *t, refinement))),
            (
                9,
                "non-isometry certificate",
                m().and_then(|(r, _)| shared(prep).and_then(|p| decided(certificate(p, r)))),
            ),
        ]
    };

    for (id, name, outcome) in criteria_4_to_9(&runs.main, &runs.prep, true) {
        push(result(id, name, outcome), &mut out);
    }

    let case2 = criteria_4_to_9(&runs.case2_main, &runs.case2_prep, false);
    let failed: Vec<String> = case2
        .iter()
        .filter_map(|(id, _, o)| match o {
            Ok((true, _)) => None,
            Ok((false, d)) => Some(format!("{id}: {d}")),
            Err(e) => Some(format!("{id}: {e}")),
        })
        .collect();
    let detail = match &runs.case2_main {
        Ok((r, _)) => format!(
            "lambda0 {}, alpha {}, pair/control {:.4}, max |det - (1+f)| {:.2e}, dI/dpred {:.4}",
            -LAMBDA0, r.energy.alpha, r.dn.pair_to_control, r.moser.det_max_deviation, r.certificate.ratio
        ),
        Err(e) => describe(e),
    };
    let passed = failed.is_empty();
    let detail = if passed { format!("criteria 4-9 pass; {detail}") } else { format!("failing {}; {detail}", failed.join(" | ")) };
    push(CriterionResult { id: 10, name: "case 2 (negative frequency)", passed, detail }, &mut out);

    push(result(11, "determinism", decided(determinism())), &mut out);
    out
}

fn determinism() -> Result<(bool, String)> {
    let cfg = base_config(LAMBDA0, RESOLUTIONS[0]);
    let a = run_counterexample(&cfg)?.to_json()?;
    let b = run_counterexample(&cfg)?.to_json()?;
    Ok((a == b, format!("two resolution-{} reports, {} bytes, identical: {}", RESOLUTIONS[0], a.len(), a == b)))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn loglog_slope_recovers_power() {
        let x = [0.5, 0.25, 0.125];
        let y: Vec<f64> = x.iter().map(|v: &f64| 3.0 * v.powf(2.0)).collect();
        assert!((loglog_slope(&x, &y) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn lines_carry_status() {
        let r = CriterionResult { id: 3, name: "x", passed: false, detail: "d".into() };
        assert_eq!(r.to_string(), "[FAIL] criterion  3 x: d");
    }
}
