//! End-to-end construction: configuration, staged pipeline, report,
//! convergence series and families of pairs.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::certify::{second_order_certificate, volume_invariant, CertificateGrids, IsometryCertificate, Verdict};
use crate::conductivity::{Conductivity, GammaSpec};
use crate::conformal::{build_f, compute_frequency, rescale_conductivity, ConformalFactor, FrequencyPlan, SourceFlux, ZeroMeanField};
use crate::dictionary::{BumpDictionary, BumpExpansion, DictionaryConfig};
use crate::dn::{calibrate_floor, dn_distance, DnMatrix, DnMode, Floor, SmoothBoundaryBasis};
use crate::energy_search::{
    choose_alpha, constrained_infimum, fem_constrained_infimum, find_energy_function, upper_sweep, AlphaChoice, SweepSource,
};
use crate::error::{ForgeError, Result};
use crate::fem::{assemble_stiffness, FemSpace, QuadratureSpec, SolverKind};
use crate::geometry::{Aabb, Vec3};
use crate::mesh::{build_box_mesh, BoxDomain, Mesh};
use crate::moser::{det_check, split_moser_flow, worst_sample, SplitFlow, write_det_csv, CurlField, DetSample, FlowDiffeomorphism, GradientField};
use crate::pushforward::{c0_distance, conformal_scale, transported_matrices, PushforwardConductivity, TransportMode};
use crate::quadrature::GridRule;
use crate::spectral::{certify_gap, dirichlet_eigenpairs, eigenpairs_from_matrices, SpectrumReport};

/// Numerical tolerances of the pipeline gates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Tolerances {
    /// Krylov tolerance used to calibrate the DN floor.
    pub solver: f64,
    /// Max |det DΨ − (1 + f)| at the sample points.
    pub det: f64,
    /// Max |Ψ⁻¹(Ψ(x)) − x|.
    pub inv: f64,
    /// Relative distance of a frequency to the discrete spectrum.
    pub gap: f64,
    /// Relative energy-targeting tolerance.
    pub energy: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Tolerances { solver: 1e-10, det: 1e-4, inv: 1e-8, gap: 1e-6, energy: 1e-10 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ForgeConfig {
    pub domain: BoxDomain,
    pub resolution: usize,
    /// Resolutions of a convergence study.
    pub resolutions: Vec<usize>,
    pub gamma: GammaSpec,
    pub lambda0: f64,
    /// Overrides the automatic exponent choice.
    pub alpha: Option<f64>,
    /// Amplitude schedule ε‖u‖∞ (the first entry drives a single run).
    pub eps: Vec<f64>,
    pub collar_layers: usize,
    pub dictionary: DictionaryConfig,
    pub tolerances: Tolerances,
    /// Dirichlet eigenpairs computed for the spectral gates.
    pub spectrum_count: usize,
    pub flow_steps: usize,
    /// Spline cells per mesh spacing in the divergence construction.
    pub spline_cells_per_h: f64,
    pub det_samples: usize,
    pub inverse_samples: usize,
    pub residual_samples: usize,
    pub smooth_modes: usize,
    /// Sub-element refinement level of the quadrature on the support of u.
    pub quadrature_level: u32,
    pub transport: TransportMode,
    /// Gauge-invariance control experiments.
    pub controls: bool,
    /// Direct assembly of Ψ*β in the physical variable as a cross-check.
    pub direct_crosscheck: bool,
    /// Wall-clock timings in the report (breaks byte-identical output).
    pub record_timings: bool,
    /// Writes mesh, stiffness and DN dumps next to the report.
    pub dump: bool,
    pub output_dir: Option<PathBuf>,
    pub seed: u64,
}

impl Default for ForgeConfig {
    fn default() -> Self {
        ForgeConfig {
            domain: BoxDomain::unit(),
            resolution: 12,
            resolutions: vec![8, 12, 16],
            gamma: GammaSpec::Identity,
            lambda0: 20.0,
            alpha: None,
            eps: vec![0.1],
            collar_layers: 1,
            dictionary: DictionaryConfig::default(),
            tolerances: Tolerances::default(),
            spectrum_count: 8,
            flow_steps: 64,
            spline_cells_per_h: 8.0,
            det_samples: 500,
            inverse_samples: 1000,
            residual_samples: 1000,
            smooth_modes: 30,
            quadrature_level: 1,
            transport: TransportMode::Liouville,
            controls: true,
            direct_crosscheck: false,
            record_timings: false,
            dump: false,
            output_dir: None,
            seed: 2024,
        }
    }
}

impl ForgeConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ForgeConfig = serde_json::from_str(text).map_err(|e| ForgeError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| ForgeError::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ForgeError::Config(m));
        BoxDomain::new(self.domain.min, self.domain.max).map_err(|e| ForgeError::Config(e.to_string()))?;
        if self.lambda0 == 0.0 || !self.lambda0.is_finite() {
            return bad(format!("lambda0 must be nonzero and finite, got {}", self.lambda0));
        }
        if self.resolution < 6 {
            return bad(format!("resolution {} is below the pipeline minimum 6", self.resolution));
        }
        if self.eps.is_empty() {
            return bad("eps schedule is empty".into());
        }
        if self.eps.iter().any(|e| !e.is_finite() || *e < 0.0 || *e > 0.5) {
            return bad(format!("eps entries must lie in [0, 1/2], got {:?}", self.eps));
        }
        if self.eps.windows(2).any(|w| w[1] >= w[0]) {
            return bad(format!("eps schedule must be strictly decreasing, got {:?}", self.eps));
        }
        if let Some(a) = self.alpha {
            if !a.is_finite() || a == 0.0 || a <= -0.5 || (self.lambda0 < 0.0) != (a < 0.0) {
                return bad(format!("alpha {a} is incompatible with lambda0 {}", self.lambda0));
            }
        }
        if self.spectrum_count < 2 || self.flow_steps == 0 || self.smooth_modes == 0 || self.collar_layers == 0 {
            return bad("spectrum_count >= 2, flow_steps, smooth_modes and collar_layers >= 1 are required".into());
        }
        if !(self.spline_cells_per_h > 0.0) {
            return bad("spline_cells_per_h must be positive".into());
        }
        let t = &self.tolerances;
        if [t.solver, t.det, t.inv, t.gap, t.energy].iter().any(|v| !(*v > 0.0)) {
            return bad("tolerances must be positive".into());
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MeshReport {
    pub resolution: usize,
    pub h: f64,
    pub vertices: usize,
    pub tets: usize,
    pub boundary_nodes: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SpectrumSummary {
    pub eigenvalues: Vec<f64>,
    pub residuals: Vec<f64>,
    pub frequency: f64,
    pub gap: f64,
}

impl SpectrumSummary {
    fn new(s: &SpectrumReport, lambda: f64) -> Self {
        SpectrumSummary { eigenvalues: s.eigenvalues.clone(), residuals: s.residuals.clone(), frequency: lambda, gap: s.gap(lambda) }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnergyReport {
    pub dictionary_size: usize,
    pub bump_radius: f64,
    pub m_dictionary: f64,
    pub m_fem: f64,
    pub alpha: f64,
    pub tau: f64,
    pub sweep_source: SweepSource,
    pub sweep_index: usize,
    pub sweep_energy: f64,
    pub fit_residual: f64,
    pub energy: f64,
    pub energy_relative_error: f64,
    pub path_parameter: f64,
    pub integral_u: f64,
    pub norm_u: f64,
    pub sup_u: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConstructionReport {
    pub amplitude: f64,
    pub eps: f64,
    pub frequency: FrequencyPlan,
    pub f_integral: f64,
    pub f_integral_direct: f64,
    pub f_l1: f64,
    pub f_sup: f64,
    pub min_one_plus_f: f64,
    pub residual_max: f64,
    pub zero_outside_support: bool,
    pub conformal_spectrum: SpectrumSummary,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MoserReport {
    pub steps: usize,
    pub spline_spacing: f64,
    pub spline_coefficients: usize,
    pub spline_raw_integral: f64,
    pub region: Aabb,
    /// Max spline error on the remainder g.
    pub spline_max_error: f64,
    pub det_max_deviation: f64,
    pub det_max_deviation_effective: f64,
    pub det_worst_point: [f64; 3],
    pub inverse_max_error: f64,
    pub collar_identity: bool,
    pub max_displacement: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ControlReport {
    pub floor_zero: Floor,
    /// λ = 0, non-unimodular flow.
    pub zero_frequency: f64,
    /// λ = λ₀, unimodular flow.
    pub unimodular: f64,
    /// λ = λ₀, non-unimodular flow.
    pub non_unimodular: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DnReport {
    pub frequency: f64,
    pub modes: usize,
    pub pair_smooth: f64,
    pub pair_full: f64,
    pub control_smooth: f64,
    pub control_full: f64,
    pub pair_to_control: f64,
    pub floor: Floor,
    pub symmetry_defect: f64,
    pub controls: Option<ControlReport>,
    pub direct_crosscheck: Option<f64>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct InvariantReport {
    pub invariant_beta: f64,
    pub c0_pushforward: f64,
    pub c0_conformal: f64,
    pub pointwise_identity_defect: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForgeReport {
    pub version: String,
    pub config: ForgeConfig,
    pub mesh: MeshReport,
    pub spectrum: SpectrumSummary,
    pub energy: EnergyReport,
    pub construction: ConstructionReport,
    pub moser: MoserReport,
    pub dn: DnReport,
    pub invariants: InvariantReport,
    pub certificate: IsometryCertificate,
    pub dn_equal: bool,
    pub non_isometric: bool,
    pub verdict: String,
    pub timings: Option<BTreeMap<String, f64>>,
}

impl ForgeReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Lower bound on 1 + f for the Moser interpolation to stay well posed.
pub const MIN_DENSITY: f64 = 0.1;

/// Required ratio of pair distance to control distance.
pub const PAIR_CONTROL_RATIO: f64 = 0.1;

struct Clock {
    on: bool,
    start: Instant,
    marks: BTreeMap<String, f64>,
}

impl Clock {
    fn new(on: bool) -> Self {
        Clock { on, start: Instant::now(), marks: BTreeMap::new() }
    }

    fn mark(&mut self, name: &str) {
        if self.on {
            let t = self.start.elapsed().as_secs_f64();
            self.marks.insert(name.to_string(), t);
            self.start = Instant::now();
        }
    }

    fn finish(self) -> Option<BTreeMap<String, f64>> {
        self.on.then_some(self.marks)
    }
}

/// Mesh, spectrum and energy-search stages shared by every amplitude.
pub struct Prepared {
    pub config: ForgeConfig,
    pub mesh: Arc<Mesh>,
    pub gamma: Conductivity,
    pub space: FemSpace,
    pub spectrum: SpectrumReport,
    pub dict: Arc<BumpDictionary>,
    pub choice: AlphaChoice,
    pub u: BumpExpansion,
    pub sup_u: f64,
    pub energy: EnergyReport,
    pub quad: QuadratureSpec,
    pub basis: SmoothBoundaryBasis,
}

fn gate_gap(lambda: f64, spectrum: &SpectrumReport, tol: f64) -> Result<()> {
    if !certify_gap(lambda, spectrum, tol * lambda.abs().max(1.0))? {
        return Err(ForgeError::Resonance { lambda, gap: spectrum.gap(lambda) });
    }
    Ok(())
}

pub fn prepare(config: &ForgeConfig) -> Result<Prepared> {
    config.validate()?;
    let mesh = Arc::new(build_box_mesh(config.resolution, config.domain)?);
    mesh.collar_interior_nodes(config.collar_layers)?;
    let gamma = config.gamma.build(config.domain)?;
    let spectrum = dirichlet_eigenpairs(gamma.as_ref(), &mesh, config.spectrum_count)?;
    gate_gap(config.lambda0, &spectrum, config.tolerances.gap)?;

    let dict = Arc::new(BumpDictionary::build(&config.domain, &config.dictionary, gamma.as_ref())?);
    let collar = config.collar_layers as f64 * mesh.h();
    if !contains_box(&config.domain.shrunk(collar), &dict.support) {
        return Err(ForgeError::Config("dictionary support reaches the mesh collar".into()));
    }
    let (m_dict, u0) = constrained_infimum(&dict)?;
    let space = FemSpace::new(&mesh);
    let k_plain = assemble_stiffness(&mesh, &space.pattern, gamma.as_ref(), &QuadratureSpec::default())?;
    let (m_fem, _) = fem_constrained_infimum(&mesh, &k_plain, &space.mass)?;
    let choice = match config.alpha {
        Some(alpha) => {
            let tau = (2.0 * alpha + 1.0) * config.lambda0 / alpha;
            if !(tau > m_dict) {
                return Err(ForgeError::Config(format!("alpha {alpha} gives energy target {tau} below m = {m_dict}")));
            }
            AlphaChoice { alpha, tau }
        }
        None => choose_alpha(config.lambda0, m_dict, 3)?,
    };
    let sweep = upper_sweep(&dict, &mesh, &spectrum, &space.mass, choice.tau)?;
    let target = find_energy_function(&u0, &sweep.v, choice.tau, config.tolerances.energy)?;
    let u = target.w;
    let sup_u = u.sup_norm();
    let energy = EnergyReport {
        dictionary_size: dict.len(),
        bump_radius: dict.radius,
        m_dictionary: m_dict,
        m_fem,
        alpha: choice.alpha,
        tau: choice.tau,
        sweep_source: sweep.source,
        sweep_index: sweep.index,
        sweep_energy: sweep.energy,
        fit_residual: sweep.fit_residual,
        energy: target.energy,
        energy_relative_error: (target.energy - choice.tau).abs() / choice.tau,
        path_parameter: target.t,
        integral_u: u.integral(),
        norm_u: u.norm_squared().sqrt(),
        sup_u,
    };
    let quad = QuadratureSpec::refined(config.quadrature_level, Some(dict.support));
    let basis = SmoothBoundaryBasis::new(&mesh, config.smooth_modes)?;
    Ok(Prepared {
        config: config.clone(),
        mesh,
        gamma,
        space,
        spectrum,
        dict,
        choice,
        u,
        sup_u,
        energy,
        quad,
        basis,
    })
}

fn contains_box(outer: &Aabb, inner: &Aabb) -> bool {
    (0..3).all(|k| outer.min[k] <= inner.min[k] && inner.max[k] <= outer.max[k])
}

fn sample_box(rng: &mut ChaCha8Rng, b: &Aabb, n: usize) -> Vec<Vec3> {
    (0..n).map(|_| Vec3::from_fn(|k, _| rng.gen_range(b.min[k]..b.max[k]))).collect()
}

/// Conformal factor, frequency, source, flow and the two conductivities for
/// one amplitude.
pub struct Construction {
    pub c: ConformalFactor,
    pub plan: FrequencyPlan,
    pub f: ZeroMeanField,
    pub field: Arc<SplitFlow>,
    pub flow: Arc<FlowDiffeomorphism>,
    pub beta: Conductivity,
    pub gamma1: Arc<PushforwardConductivity>,
    pub gamma2: Conductivity,
    pub det_samples: Vec<DetSample>,
    pub report: ConstructionReport,
    pub moser: MoserReport,
}

pub fn construct(prep: &Prepared, amplitude: f64) -> Result<Construction> {
    let cfg = &prep.config;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    if amplitude == 0.0 {
        return Err(ForgeError::Construction("degenerate construction: zero amplitude gives c ≡ 1".into()));
    }
    let (c, plan) = factor_and_frequency(prep, amplitude)?;
    let eps = c.eps;
    let grid = &prep.dict.fine_grid;
    let f = build_f(&c, prep.gamma.clone(), plan.lambda, grid)?;
    if f.min_one_plus < MIN_DENSITY {
        return Err(ForgeError::Construction(format!(
            "1 + f reaches {:.4} < {MIN_DENSITY}; decrease the amplitude",
            f.min_one_plus
        )));
    }
    let support = f.support();
    let residual_max = sample_box(&mut rng, &support, cfg.residual_samples)
        .iter()
        .map(|x| f.residual(x).abs())
        .fold(0.0, f64::max);
    let domain = cfg.domain.aabb();
    let zero_outside = sample_box(&mut rng, &domain, 4 * cfg.residual_samples)
        .iter()
        .filter(|x| !support.contains(x))
        .all(|x| f.value(x) == 0.0);

    // Gap gate for λ_{ε,α} against the spectrum of c²γ.
    let c2g = conformal_scale(prep.gamma.clone(), c.clone());
    let k_c2g = assemble_stiffness(&prep.mesh, &prep.space.pattern, c2g.as_ref(), &prep.quad)?;
    let conf_spec = eigenpairs_from_matrices(&prep.mesh, &k_c2g, &prep.space.mass, cfg.spectrum_count)?;
    gate_gap(plan.lambda, &conf_spec, cfg.tolerances.gap)?;

    let spacing = prep.mesh.h() / cfg.spline_cells_per_h;
    let flux = Arc::new(SourceFlux::new(&f)?);
    let (field, flow) = split_moser_flow(flux.clone(), spacing, cfg.flow_steps)?;
    let spline = field.spline.clone();
    // The flow keeps half the dictionary collar fixed.
    let collar = 0.5 * cfg.dictionary.collar;
    if !contains_box(&cfg.domain.shrunk(collar), &spline.region) {
        return Err(ForgeError::Construction("divergence construction reaches the boundary collar".into()));
    }
    let flow = Arc::new(flow);
    let pts = sample_box(&mut rng, &spline.region, cfg.det_samples);
    let samples = det_check(&flow, &pts, |x| 1.0 + f.value(x));
    let effective = det_check(&flow, &pts, |x| 1.0 + field.source(x));
    let spline_err = pts.iter().map(|x| (spline.eval(x).f - flux.remainder(x)).abs()).fold(0.0, f64::max);
    let worst = worst_sample(&samples).ok_or_else(|| ForgeError::InvalidInput("no det samples".into()))?;
    let inverse_max = sample_box(&mut rng, &spline.region, cfg.inverse_samples)
        .iter()
        .map(|x| flow.inverse(&flow.forward(x)).map(|b| (b - x).amax()))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .fold(0.0, f64::max);
    let collar_identity = (0..prep.mesh.num_vertices())
        .map(|v| prep.mesh.vertices[v])
        .filter(|x| cfg.domain.face_distance(x) <= collar)
        .all(|x| flow.forward(&x) == x);
    let max_displacement = pts.iter().map(|x| (flow.forward(x) - x).norm()).fold(0.0, f64::max);
    let moser = MoserReport {
        steps: cfg.flow_steps,
        spline_spacing: spacing,
        spline_coefficients: spline.num_coefficients(),
        spline_raw_integral: spline.raw_integral,
        region: spline.region,
        spline_max_error: spline_err,
        det_max_deviation: worst.deviation,
        det_max_deviation_effective: effective.iter().map(|s| s.deviation).fold(0.0, f64::max),
        det_worst_point: worst.x,
        inverse_max_error: inverse_max,
        collar_identity,
        max_displacement,
    };
    if worst.deviation > cfg.tolerances.det {
        return Err(ForgeError::MoserDet { at: worst.x, deviation: worst.deviation });
    }
    if inverse_max > cfg.tolerances.inv {
        return Err(ForgeError::NonConvergence {
            what: "inverse flow check".into(),
            iterations: cfg.inverse_samples,
            last: inverse_max,
            history: vec![],
        });
    }

    let beta = rescale_conductivity(prep.gamma.clone(), &plan);
    let gamma1 = Arc::new(PushforwardConductivity::new(beta.clone(), flow.clone())?);
    let gamma2 = conformal_scale(beta.clone(), c.clone());
    let report = ConstructionReport {
        amplitude,
        eps,
        frequency: plan,
        f_integral: f.integral,
        f_integral_direct: f.integral_direct,
        f_l1: f.l1,
        f_sup: f.sup,
        min_one_plus_f: f.min_one_plus,
        residual_max,
        zero_outside_support: zero_outside,
        conformal_spectrum: SpectrumSummary::new(&conf_spec, plan.lambda),
    };
    Ok(Construction { c, plan, f, field, flow, beta, gamma1, gamma2, det_samples: samples, report, moser })
}

/// DN matrices of the pair and the control at λ₀.
pub struct Comparison {
    pub beta: DnMatrix,
    pub gamma1: DnMatrix,
    pub gamma2: DnMatrix,
    pub report: DnReport,
}

pub fn compare(prep: &Prepared, con: &Construction) -> Result<Comparison> {
    let cfg = &prep.config;
    let mesh = &prep.mesh;
    let pattern = &prep.space.pattern;
    let lambda0 = cfg.lambda0;
    let k_beta = assemble_stiffness(mesh, pattern, con.beta.as_ref(), &prep.quad)?;
    let k_c2b = assemble_stiffness(mesh, pattern, con.gamma2.as_ref(), &prep.quad)?;
    let field = con.field.clone();
    let (k1, m1) = transported_matrices(mesh, pattern, &con.gamma1, &prep.quad, cfg.transport, |x| 1.0 + field.source(x))?;
    let dn_beta = DnMatrix::from_matrices(mesh, &k_beta, &prep.space.mass, lambda0, SolverKind::Direct, "beta")?;
    let dn1 = DnMatrix::from_matrices(mesh, &k1, &m1, lambda0, SolverKind::Direct, "pushforward")?;
    let dn2 = DnMatrix::from_matrices(mesh, &k_c2b, &prep.space.mass, lambda0, SolverKind::Direct, "conformal")?;
    let basis = Some(&prep.basis);
    let pair_smooth = dn_distance(&dn2, &dn1, DnMode::Smooth, basis)?;
    let control_smooth = dn_distance(&dn2, &dn_beta, DnMode::Smooth, basis)?;
    let floor = calibrate_floor(mesh, &k_beta, &prep.space.mass, lambda0, &prep.basis, cfg.tolerances.solver, Some(&dn_beta))?;
    let controls = if cfg.controls { Some(gauge_controls(prep, &con.beta, &k_beta, &dn_beta)?) } else { None };
    let direct_crosscheck = if cfg.direct_crosscheck {
        let k_direct = assemble_stiffness(mesh, pattern, con.gamma1.as_ref(), &QuadratureSpec::default())?;
        let direct = DnMatrix::from_matrices(mesh, &k_direct, &prep.space.mass, lambda0, SolverKind::Direct, "pushforward-direct")?;
        Some(dn_distance(&dn1, &direct, DnMode::Smooth, basis)?)
    } else {
        None
    };
    let report = DnReport {
        frequency: lambda0,
        modes: prep.basis.len(),
        pair_smooth,
        pair_full: dn_distance(&dn2, &dn1, DnMode::Full, None)?,
        control_smooth,
        control_full: dn_distance(&dn2, &dn_beta, DnMode::Full, None)?,
        pair_to_control: pair_smooth / control_smooth,
        floor,
        symmetry_defect: [&dn_beta, &dn1, &dn2].iter().map(|d| d.symmetry_defect()).fold(0.0, f64::max),
        controls,
        direct_crosscheck,
    };
    Ok(Comparison { beta: dn_beta, gamma1: dn1, gamma2: dn2, report })
}

/// Fixture flows inside the dictionary support for the gauge controls.
pub fn control_flows(support: &Aabb) -> (CurlField, GradientField) {
    let center = Vec3::from_fn(|k, _| 0.5 * (support.min[k] + support.max[k]));
    let radius = 0.5 * (0..3).map(|k| support.extent(k)).fold(f64::INFINITY, f64::min);
    let curl = CurlField { center, radius, amplitude: 0.02 * radius, axis: Vec3::new(0.36, 0.48, 0.8) };
    let grad = GradientField { center, radius, amplitude: 0.02 * radius * radius };
    (curl, grad)
}

fn gauge_controls(prep: &Prepared, beta: &Conductivity, k_beta: &crate::sparse::SparseSymMatrix, dn_beta: &DnMatrix) -> Result<ControlReport> {
    let cfg = &prep.config;
    let mesh = &prep.mesh;
    let pattern = &prep.space.pattern;
    let basis = Some(&prep.basis);
    let quad = QuadratureSpec::default();
    let (curl, grad) = control_flows(&prep.dict.support);
    let steps = cfg.flow_steps.min(32);
    let one = |_: &Vec3| 1.0;
    let grad_push = PushforwardConductivity::new(beta.clone(), Arc::new(FlowDiffeomorphism::new(Arc::new(grad), steps)))?;
    let curl_push = PushforwardConductivity::new(beta.clone(), Arc::new(FlowDiffeomorphism::new(Arc::new(curl), steps)))?;

    let dn_beta0 = DnMatrix::from_matrices(mesh, k_beta, &prep.space.mass, 0.0, SolverKind::Direct, "beta-zero")?;
    let floor_zero = calibrate_floor(mesh, k_beta, &prep.space.mass, 0.0, &prep.basis, cfg.tolerances.solver, Some(&dn_beta0))?;
    let (kg, mg) = transported_matrices(mesh, pattern, &grad_push, &quad, TransportMode::Integrated, one)?;
    let (kc, mc) = transported_matrices(mesh, pattern, &curl_push, &quad, TransportMode::Integrated, one)?;
    // The reference stiffness uses the same quadrature as the controls.
    let k_ref = assemble_stiffness(mesh, pattern, beta.as_ref(), &quad)?;
    let dn_ref0 = DnMatrix::from_matrices(mesh, &k_ref, &prep.space.mass, 0.0, SolverKind::Direct, "beta-zero")?;
    let dn_ref = DnMatrix::from_matrices(mesh, &k_ref, &prep.space.mass, cfg.lambda0, SolverKind::Direct, "beta")?;
    let zero = DnMatrix::from_matrices(mesh, &kg, &mg, 0.0, SolverKind::Direct, "gradient-flow-zero")?;
    let uni = DnMatrix::from_matrices(mesh, &kc, &mc, cfg.lambda0, SolverKind::Direct, "curl-flow")?;
    let non = DnMatrix::from_matrices(mesh, &kg, &mg, cfg.lambda0, SolverKind::Direct, "gradient-flow")?;
    let _ = dn_beta;
    Ok(ControlReport {
        floor_zero,
        zero_frequency: dn_distance(&dn_ref0, &zero, DnMode::Smooth, basis)?,
        unimodular: dn_distance(&dn_ref, &uni, DnMode::Smooth, basis)?,
        non_unimodular: dn_distance(&dn_ref, &non, DnMode::Smooth, basis)?,
    })
}

/// Invariants, C⁰ closeness and the certificate.
pub fn certify_pair(prep: &Prepared, con: &Construction) -> Result<(InvariantReport, IsometryCertificate)> {
    let invariant_beta = volume_invariant(con.beta.as_ref(), &prep.mesh);
    // det(Ψ*β)(Ψx)·det DΨ(x) = det β(x) at the det samples.
    let mut defect: f64 = 0.0;
    for s in &con.det_samples {
        let x = Vec3::from(s.x);
        let (_, g) = con.gamma1.at_preimage(&x)?;
        let j = con.flow.forward_jacobian(&x).1.determinant();
        let d = con.beta.evaluate(&x).determinant();
        defect = defect.max((g.determinant() * j - d).abs() / d.abs());
    }
    let domain = &prep.config.domain;
    let inv = InvariantReport {
        invariant_beta,
        c0_pushforward: c0_distance(con.gamma1.as_ref(), con.beta.as_ref(), domain),
        c0_conformal: c0_distance(con.gamma2.as_ref(), con.beta.as_ref(), domain),
        pointwise_identity_defect: defect,
    };
    let tol = defect * invariant_beta.abs();
    let cert = certificate_for(prep, &con.c, &con.plan, invariant_beta, tol)?;
    Ok((inv, cert))
}

/// Certificate for a given factor, with the error grid at twice the
/// dictionary fine spacing.
pub fn certificate_for(
    prep: &Prepared,
    c: &ConformalFactor,
    plan: &FrequencyPlan,
    base_invariant: f64,
    pushforward_tol: f64,
) -> Result<IsometryCertificate> {
    let coarse = GridRule::with_spacing(prep.dict.support, prep.dict.fine_grid.step(0) * 2.0);
    let grids = CertificateGrids { fine: &prep.dict.fine_grid, coarse: &coarse };
    second_order_certificate(prep.gamma.as_ref(), c, plan.scale, &grids, base_invariant, pushforward_tol)
}

/// Conformal factor and frequency for an amplitude without building the flow.
pub fn factor_and_frequency(prep: &Prepared, amplitude: f64) -> Result<(ConformalFactor, FrequencyPlan)> {
    let c = ConformalFactor::with_sup(prep.u.clone(), amplitude / prep.sup_u, prep.choice.alpha, prep.sup_u)?;
    let plan = compute_frequency(&c, prep.gamma.as_ref(), prep.config.lambda0, &prep.dict.fine_grid)?;
    Ok((c, plan))
}

fn verdict_text(dn_equal: bool, non_isometric: bool) -> String {
    let a = if dn_equal { "DN-equal within floor" } else { "DN maps differ" };
    let b = if non_isometric { "non-isometric" } else { "isometry not excluded" };
    format!("{a}, {b}")
}

/// The full pipeline at `config.resolution` and the first amplitude.
pub fn run_counterexample(config: &ForgeConfig) -> Result<ForgeReport> {
    let mut clock = Clock::new(config.record_timings);
    let prep = prepare(config)?;
    clock.mark("prepare");
    let con = construct(&prep, config.eps[0])?;
    clock.mark("construct");
    let cmp = compare(&prep, &con)?;
    clock.mark("compare");
    let (invariants, certificate) = certify_pair(&prep, &con)?;
    clock.mark("certify");
    let dn_equal = cmp.report.pair_smooth <= PAIR_CONTROL_RATIO * cmp.report.control_smooth;
    let non_isometric = certificate.verdict == Verdict::NonIsometric;
    let report = ForgeReport {
        version: env!("CARGO_PKG_VERSION").to_string(),
        config: config.clone(),
        mesh: MeshReport {
            resolution: prep.mesh.resolution,
            h: prep.mesh.h(),
            vertices: prep.mesh.num_vertices(),
            tets: prep.mesh.num_tets(),
            boundary_nodes: prep.basis.boundary.len(),
        },
        spectrum: SpectrumSummary::new(&prep.spectrum, config.lambda0),
        energy: prep.energy.clone(),
        construction: con.report.clone(),
        moser: con.moser.clone(),
        dn: cmp.report.clone(),
        invariants,
        certificate,
        dn_equal,
        non_isometric,
        verdict: verdict_text(dn_equal, non_isometric),
        timings: None,
    };
    if let Some(dir) = &config.output_dir {
        write_outputs(dir, &prep, &con, &cmp)?;
    }
    let mut report = report;
    report.timings = clock.finish();
    if let Some(dir) = &config.output_dir {
        std::fs::write(dir.join("report.json"), report.to_json()?)?;
    }
    Ok(report)
}

fn write_outputs(dir: &Path, prep: &Prepared, con: &Construction, cmp: &Comparison) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    write_det_csv(&con.det_samples, std::fs::File::create(dir.join("moser_diagnostics.csv"))?)?;
    if prep.config.dump {
        std::fs::write(dir.join("mesh.json"), prep.mesh.to_json()?)?;
        let k = assemble_stiffness(&prep.mesh, &prep.space.pattern, con.gamma2.as_ref(), &prep.quad)?;
        std::fs::write(dir.join("stiffness_conformal.mtx"), k.to_coordinate_text())?;
        cmp.beta.dump(&dir.join("dn_beta"))?;
        cmp.gamma1.dump(&dir.join("dn_pushforward"))?;
        cmp.gamma2.dump(&dir.join("dn_conformal"))?;
    }
    Ok(())
}

/// One row of a convergence study.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvergenceRow {
    pub resolution: usize,
    pub h: f64,
    pub lambda1: f64,
    pub pair_distance: f64,
    pub control_distance: f64,
    pub floor: f64,
    pub det_max_deviation: f64,
    pub status: String,
}

pub fn convergence_study(config: &ForgeConfig, resolutions: &[usize]) -> Result<Vec<ConvergenceRow>> {
    if resolutions.len() < 3 {
        return Err(ForgeError::Config(format!("a convergence study needs at least 3 resolutions, got {}", resolutions.len())));
    }
    let mut rows = Vec::new();
    for &r in resolutions {
        let cfg = ForgeConfig { resolution: r, controls: false, direct_crosscheck: false, output_dir: None, ..config.clone() };
        let h = config.domain.extent(0) / r as f64;
        let row = match run_counterexample(&cfg) {
            Ok(rep) => ConvergenceRow {
                resolution: r,
                h,
                lambda1: rep.spectrum.eigenvalues[0],
                pair_distance: rep.dn.pair_smooth,
                control_distance: rep.dn.control_smooth,
                floor: rep.dn.floor.floor,
                det_max_deviation: rep.moser.det_max_deviation,
                status: "ok".into(),
            },
            Err(e) => ConvergenceRow {
                resolution: r,
                h,
                lambda1: f64::NAN,
                pair_distance: f64::NAN,
                control_distance: f64::NAN,
                floor: f64::NAN,
                det_max_deviation: f64::NAN,
                status: format!("error {}: {e}", e.exit_code()),
            },
        };
        rows.push(row);
    }
    Ok(rows)
}

pub fn write_csv<T: Serialize, W: std::io::Write>(rows: &[T], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

/// One member of a family of pairs.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct FamilyRow {
    pub index: usize,
    pub amplitude: f64,
    pub eps: f64,
    pub lambda_eps: f64,
    pub scale: f64,
    pub pair_distance: f64,
    pub control_distance: f64,
    pub invariant_gap: f64,
    pub verdict: String,
}

/// `n` distinct pairs with amplitudes ε·(n − i)/n for the first scheduled ε.
pub fn family(config: &ForgeConfig, n: usize) -> Result<Vec<FamilyRow>> {
    if n == 0 {
        return Err(ForgeError::Config("family size must be positive".into()));
    }
    let cfg = ForgeConfig { controls: false, direct_crosscheck: false, ..config.clone() };
    let prep = prepare(&cfg)?;
    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let amplitude = cfg.eps[0] * (n - i) as f64 / n as f64;
        let con = construct(&prep, amplitude)?;
        let cmp = compare(&prep, &con)?;
        let (_, cert) = certify_pair(&prep, &con)?;
        let dn_equal = cmp.report.pair_smooth <= PAIR_CONTROL_RATIO * cmp.report.control_smooth;
        rows.push(FamilyRow {
            index: i,
            amplitude,
            eps: con.c.eps,
            lambda_eps: con.plan.lambda,
            scale: con.plan.scale,
            pair_distance: cmp.report.pair_smooth,
            control_distance: cmp.report.control_smooth,
            invariant_gap: cert.gap,
            verdict: verdict_text(dn_equal, cert.verdict == Verdict::NonIsometric),
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_round_trips_and_validates() {
        let cfg = ForgeConfig::default();
        let text = serde_json::to_string(&cfg).unwrap();
        assert_eq!(ForgeConfig::from_json(&text).unwrap(), cfg);
        assert_eq!(ForgeConfig::from_json("{}").unwrap(), cfg);
        let bad = [
            r#"{"lambda0": 0.0}"#,
            r#"{"resolution": 4}"#,
            r#"{"eps": [0.1, 0.2]}"#,
            r#"{"eps": [-0.1]}"#,
            r#"{"alpha": -0.25}"#,
            r#"{"unknown": 1}"#,
            r#"{"domain": {"min": [0,0,0], "max": [1,0,1]}}"#,
        ];
        for b in bad {
            let err = ForgeConfig::from_json(b).unwrap_err();
            assert_eq!(err.exit_code(), 2, "{b}");
        }
    }

    #[test]
    fn resonant_frequency_is_rejected() {
        let mesh = build_box_mesh(6, BoxDomain::unit()).unwrap();
        let s = dirichlet_eigenpairs(&crate::conductivity::Identity, &mesh, 2).unwrap();
        let cfg = ForgeConfig { resolution: 6, lambda0: s.eigenvalues[0], ..ForgeConfig::default() };
        let err = prepare(&cfg).err().unwrap();
        assert_eq!(err.exit_code(), 3);
    }

    #[test]
    fn csv_rows_have_header() {
        let rows = vec![FamilyRow {
            index: 0,
            amplitude: 0.1,
            eps: 0.02,
            lambda_eps: 19.0,
            scale: 1.05,
            pair_distance: 1e-4,
            control_distance: 1e-2,
            invariant_gap: -1e-5,
            verdict: "x".into(),
        }];
        let mut buf = Vec::new();
        write_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("index,amplitude,eps,lambda_eps,scale,pair_distance,control_distance,invariant_gap,verdict\n"));
    }
}
