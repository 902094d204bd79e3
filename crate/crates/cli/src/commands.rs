//! The four CLI drivers: simulate, gradcheck, identify, factor-stats.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use heterodyn::forward::{SimState, Simulator, StepOutput};
use heterodyn::material::MaterialField;
use heterodyn::oracle::fd_gradient;
use nalgebra::Matrix3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::{CliError, Result};
use crate::inverse::{identify, IdentifyResult, InverseProblem};
use crate::rollout::{backpropagate, run_frames, FrameAdjoint};
use crate::scene::Scene;

/// Maximum relative gradient error accepted by `gradcheck`.
pub const GRADCHECK_THRESHOLD: f64 = 2e-3;
/// Denominator floor of the relative error.
pub const GRADCHECK_FLOOR: f64 = 1e-4;

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let file = File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    w.write_all(b"\n").map_err(|e| CliError::io(path, e))?;
    w.flush().map_err(|e| CliError::io(path, e))
}

#[derive(Debug, Serialize)]
struct TrajectoryRecord<'a> {
    frame: usize,
    time: f64,
    q: &'a [f64],
    v: &'a [f64],
    iterations: usize,
    converged: bool,
    contact_count: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub time: f64,
    pub iterations: usize,
    pub converged: bool,
    pub step_residual: f64,
    pub rhs_residual: f64,
    pub contact_count: usize,
    pub max_penetration: f64,
    pub max_fb_normal: f64,
    pub max_cone_violation: f64,
    pub aa_guard_trips: usize,
}

impl FrameMetrics {
    fn new(frame: usize, o: &StepOutput) -> Self {
        let d = o.cache.contact.as_ref().map(|c| c.diagnostics).unwrap_or_default();
        Self {
            frame,
            time: o.state.time,
            iterations: o.iterations,
            converged: o.converged,
            step_residual: o.step_residual,
            rhs_residual: o.rhs_residual,
            contact_count: o.contact_count,
            max_penetration: d.max_penetration.max(0.0),
            max_fb_normal: d.max_fb_normal,
            max_cone_violation: d.max_cone_violation,
            aa_guard_trips: o.aa_guard_trips,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateSummary {
    pub scene: String,
    pub frames: usize,
    pub dofs: usize,
    pub aa_window: usize,
    pub iterations: Vec<usize>,
    pub converged: Vec<bool>,
    pub all_converged: bool,
    pub factorizations: usize,
    pub max_penetration: f64,
    pub max_fb_normal: f64,
    pub max_cone_violation: f64,
    /// Young's modulus of each region.
    pub region_young: Vec<f64>,
    /// Green-strain norm per region, volume-averaged and then averaged over frames.
    pub region_strain: Vec<f64>,
    /// Strain of the softest region over that of the stiffest; absent with one region.
    pub soft_stiff_strain_ratio: Option<f64>,
}

/// Volume-weighted mean `‖½(FᵀF − I)‖_F` per region.
pub fn region_strain(scene: &Scene, q: &[f64]) -> Vec<f64> {
    let mesh = &scene.model.mesh;
    let mut num = vec![0.0; scene.n_regions];
    let mut den = vec![0.0; scene.n_regions];
    for (e, &r) in scene.regions.iter().enumerate() {
        let f = mesh.deformation_gradient(e, q);
        let strain = 0.5 * (f.transpose() * f - Matrix3::identity());
        num[r] += mesh.rest_volume[e] * strain.norm();
        den[r] += mesh.rest_volume[e];
    }
    num.iter().zip(&den).map(|(n, d)| n / d).collect()
}

/// Runs the scene, streaming the trajectory and per-frame metrics into `out_dir`.
pub fn simulate(scene: &Scene, out_dir: &Path) -> Result<SimulateSummary> {
    create_dir(out_dir)?;
    let sim = scene.simulator()?;
    let traj_path = out_dir.join("trajectory.jsonl");
    let file = File::create(&traj_path).map_err(|e| CliError::io(&traj_path, e))?;
    let mut traj = BufWriter::new(file);
    let mut metrics = csv::Writer::from_path(out_dir.join("metrics.csv"))?;
    let mut state = scene.initial_state();
    let mut strain_sum = vec![0.0; scene.n_regions];
    let mut summary = SimulateSummary {
        scene: scene.name.clone(),
        frames: scene.frames,
        dofs: scene.model.mesh.n_dofs(),
        aa_window: sim.aa_window(),
        iterations: Vec::new(),
        converged: Vec::new(),
        all_converged: true,
        factorizations: 0,
        max_penetration: 0.0,
        max_fb_normal: 0.0,
        max_cone_violation: 0.0,
        region_young: scene.region_young(),
        region_strain: Vec::new(),
        soft_stiff_strain_ratio: None,
    };
    for frame in 1..=scene.frames {
        let out = sim.step(&state).map_err(|source| CliError::Solver { frame, source })?;
        let m = FrameMetrics::new(frame, &out);
        let record = TrajectoryRecord {
            frame,
            time: out.state.time,
            q: &out.state.q,
            v: &out.state.v,
            iterations: out.iterations,
            converged: out.converged,
            contact_count: out.contact_count,
        };
        serde_json::to_writer(&mut traj, &record)?;
        traj.write_all(b"\n").map_err(|e| CliError::io(&traj_path, e))?;
        metrics.serialize(&m)?;
        summary.iterations.push(m.iterations);
        summary.converged.push(m.converged);
        summary.all_converged &= m.converged;
        summary.max_penetration = summary.max_penetration.max(m.max_penetration);
        summary.max_fb_normal = summary.max_fb_normal.max(m.max_fb_normal);
        summary.max_cone_violation = summary.max_cone_violation.max(m.max_cone_violation);
        for (s, x) in strain_sum.iter_mut().zip(region_strain(scene, &out.state.q)) {
            *s += x;
        }
        state = out.state;
    }
    traj.flush().map_err(|e| CliError::io(&traj_path, e))?;
    metrics.flush().map_err(|e| CliError::io(out_dir.join("metrics.csv"), e))?;
    summary.factorizations = sim.factorizations();
    summary.region_strain = strain_sum.iter().map(|s| s / scene.frames as f64).collect();
    if scene.n_regions > 1 {
        let young = &summary.region_young;
        let argmin = (0..young.len()).min_by(|&a, &b| young[a].total_cmp(&young[b])).unwrap_or(0);
        let argmax = (0..young.len()).max_by(|&a, &b| young[a].total_cmp(&young[b])).unwrap_or(0);
        summary.soft_stiff_strain_ratio = Some(summary.region_strain[argmin] / summary.region_strain[argmax]);
    }
    write_json(&out_dir.join("summary.json"), &summary)?;
    Ok(summary)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GradVariable {
    /// Initial velocity, one entry per free DoF.
    V0,
    /// Initial position, one entry per free DoF.
    Q0,
    /// `ln E` per element.
    E,
    /// Constant external force, one entry per free DoF.
    FExt,
}

impl GradVariable {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s.trim() {
            "v0" => Self::V0,
            "q0" => Self::Q0,
            "E" | "young" => Self::E,
            "f_ext" => Self::FExt,
            _ => return None,
        })
    }

    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        let mut out = Vec::new();
        let mut errors = Vec::new();
        for name in s.split(',').filter(|n| !n.trim().is_empty()) {
            match Self::parse(name) {
                Some(v) if !out.contains(&v) => out.push(v),
                Some(_) => {}
                None => errors.push(format!("vars: unknown variable {name:?}; expected v0, q0, E or f_ext")),
            }
        }
        if out.is_empty() && errors.is_empty() {
            errors.push("vars: no variables given".into());
        }
        if errors.is_empty() {
            Ok(out)
        } else {
            Err(CliError::Validation(errors))
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct GradEntry {
    pub index: usize,
    pub analytic: f64,
    pub fd: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct VariableReport {
    pub variable: GradVariable,
    pub entries: Vec<GradEntry>,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub scene: String,
    pub frames: usize,
    pub dofs: usize,
    pub means_frozen: bool,
    pub variables: Vec<VariableReport>,
    pub per_frame: Vec<FrameAdjoint>,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub passed: bool,
}

/// Relative error with the absolute floor applied to the reference magnitude.
pub fn relative_error(analytic: f64, fd: f64) -> f64 {
    (analytic - fd).abs() / fd.abs().max(GRADCHECK_FLOOR)
}

/// Solver settings for finite differencing: fixed points resolved to rounding.
pub fn tightened(scene: &Scene) -> Scene {
    let mut s = scene.clone();
    s.config.eps_rel = s.config.eps_rel.min(1e-13);
    s.config.eps_abs = s.config.eps_abs.min(1e-15);
    s.config.max_iters = s.config.max_iters.max(20_000);
    // plain PD iterates vary smoothly with the parameters; mixed ones add noise to the differences
    s.config.aa_window = Some(0);
    s
}

struct LinearLoss {
    wq: Vec<Vec<f64>>,
    wv: Vec<Vec<f64>>,
}

impl LinearLoss {
    fn new(frames: usize, n: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut draw = || (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<f64>>();
        let wq = (0..frames).map(|_| draw()).collect();
        let wv = (0..frames).map(|_| draw().into_iter().map(|x| 0.01 * x).collect()).collect();
        Self { wq, wv }
    }

    fn value(&self, outputs: &[StepOutput]) -> f64 {
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        outputs
            .iter()
            .enumerate()
            .map(|(t, o)| dot(&self.wq[t], &o.state.q) + dot(&self.wv[t], &o.state.v))
            .sum()
    }
}

fn rollout_loss(sim: &Simulator, state: &SimState, frames: usize, loss: &LinearLoss) -> f64 {
    run_frames(sim, state, frames).map_or(f64::NAN, |o| loss.value(&o))
}

/// Compares the chained adjoint gradient with central differences on every entry of `vars`.
pub fn gradcheck(scene: &Scene, vars: &[GradVariable]) -> Result<GradcheckReport> {
    let mut scene = tightened(scene);
    let mut means_frozen = scene.model.material.frozen_means().is_some();
    if vars.contains(&GradVariable::E) && !means_frozen {
        let m = &scene.model.material;
        let field = MaterialField::with_frozen_means(&scene.model.mesh, m.young.clone(), &m.params(), (m.mean_mu, m.mean_lam))?;
        scene.model.material = field;
        means_frozen = true;
    }
    let sim = scene.simulator()?;
    let state = scene.initial_state();
    let n = scene.model.mesh.n_dofs();
    let loss = LinearLoss::new(scene.frames, n, 7);
    let outputs = run_frames(&sim, &state, scene.frames)?;
    let chain = backpropagate(&sim, &outputs, &loss.wq, &loss.wv, &Default::default())?;
    let free_dofs: Vec<usize> = (0..n).filter(|&i| !sim.system().is_fixed(i / 3)).collect();
    let mut reports = Vec::new();
    for &var in vars {
        let (analytic, params, floors, fd): (Vec<f64>, Vec<f64>, f64, Vec<f64>);
        match var {
            GradVariable::V0 | GradVariable::Q0 => {
                let is_v = var == GradVariable::V0;
                let src = if is_v { &chain.dl_dv0 } else { &chain.dl_dq0 };
                analytic = free_dofs.iter().map(|&i| src[i]).collect();
                let base = if is_v { &state.v } else { &state.q };
                params = free_dofs.iter().map(|&i| base[i]).collect();
                floors = 1e-6;
                let f = |p: &[f64]| {
                    let mut s = state.clone();
                    let target = if is_v { &mut s.v } else { &mut s.q };
                    for (k, &i) in free_dofs.iter().enumerate() {
                        target[i] = p[k];
                    }
                    rollout_loss(&sim, &s, scene.frames, &loss)
                };
                fd = fd_gradient(&f, &params, &[floors]);
            }
            GradVariable::E => {
                let young = &scene.model.material.young;
                analytic = chain.dl_de.iter().zip(young).map(|(g, e)| g * e).collect();
                params = young.iter().map(|e| e.ln()).collect();
                floors = 1e-6;
                let f = |p: &[f64]| {
                    let young: Vec<f64> = p.iter().map(|l| l.exp()).collect();
                    let mut model = scene.model.clone();
                    match model.material.with_young(&model.mesh, young) {
                        Ok(m) => model.material = m,
                        Err(_) => return f64::NAN,
                    }
                    match Simulator::new(model, scene.config.clone()) {
                        Ok(s) => rollout_loss(&s, &state, scene.frames, &loss),
                        Err(_) => f64::NAN,
                    }
                };
                fd = fd_gradient(&f, &params, &[floors]);
            }
            GradVariable::FExt => {
                analytic = free_dofs.iter().map(|&i| chain.dl_df_ext[i]).collect();
                params = free_dofs.iter().map(|&i| scene.model.f_ext[i]).collect();
                let scale = params.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
                floors = 1e-6 * scale.max(1e-3);
                let f = |p: &[f64]| {
                    let mut s = sim.clone();
                    for (k, &i) in free_dofs.iter().enumerate() {
                        s.model.f_ext[i] = p[k];
                    }
                    rollout_loss(&s, &state, scene.frames, &loss)
                };
                fd = fd_gradient(&f, &params, &[floors]);
            }
        }
        let index_of = |k: usize| if var == GradVariable::E { k } else { free_dofs[k] };
        let entries: Vec<GradEntry> = analytic
            .iter()
            .zip(&fd)
            .enumerate()
            .map(|(k, (&a, &f))| GradEntry {
                index: index_of(k),
                analytic: a,
                fd: f,
                rel_error: if f.is_finite() { relative_error(a, f) } else { f64::INFINITY },
            })
            .collect();
        let max_rel_error = entries.iter().fold(0.0, |m: f64, e| m.max(e.rel_error));
        reports.push(VariableReport {
            variable: var,
            entries,
            max_rel_error,
        });
    }
    let max_rel_error = reports.iter().fold(0.0, |m: f64, r| m.max(r.max_rel_error));
    Ok(GradcheckReport {
        scene: scene.name.clone(),
        frames: scene.frames,
        dofs: n,
        means_frozen,
        variables: reports,
        per_frame: chain.frames,
        max_rel_error,
        threshold: GRADCHECK_THRESHOLD,
        passed: max_rel_error <= GRADCHECK_THRESHOLD,
    })
}

/// Runs `gradcheck` and writes the report; fails when the threshold is exceeded.
pub fn gradcheck_to_file(scene: &Scene, vars: &[GradVariable], out: &Path) -> Result<GradcheckReport> {
    let report = gradcheck(scene, vars)?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write_json(out, &report)?;
    if !report.passed {
        return Err(CliError::GradcheckFailed {
            max_error: report.max_rel_error,
            threshold: GRADCHECK_THRESHOLD,
        });
    }
    Ok(report)
}

/// Runs the identification and writes `result.json` and `loss.csv`, even when the optimizer stalls.
pub fn identify_to_dir(problem: &InverseProblem, out_dir: &Path) -> Result<IdentifyResult> {
    let result = identify(problem)?;
    create_dir(out_dir)?;
    write_json(&out_dir.join("result.json"), &result)?;
    let mut w = csv::Writer::from_path(out_dir.join("loss.csv"))?;
    for (i, e) in result.history.iter().enumerate() {
        w.serialize((i + 1, e.loss, e.best_loss, e.grad_norm))?;
    }
    w.flush().map_err(|e| CliError::io(out_dir.join("loss.csv"), e))?;
    if result.stalled() {
        return Err(CliError::OptimizerStalled {
            evaluations: result.evaluations,
            best_loss: result.loss,
        });
    }
    Ok(result)
}

#[derive(Debug, Clone, Serialize)]
pub struct FactorStats {
    /// Dimension of the factored (free-vertex) operator.
    pub n_v: usize,
    pub nnz_a: usize,
    pub nnz_l: usize,
    pub nnz_s: usize,
    /// `nnz(S) / n_v²`.
    pub ratio: f64,
    pub ordering: &'static str,
    pub factor_seconds: f64,
}

pub fn factor_stats(scene: &Scene) -> Result<FactorStats> {
    let sim = scene.simulator()?;
    let system = sim.system();
    let f = &system.factor;
    Ok(FactorStats {
        n_v: f.dim(),
        nnz_a: system.a.nnz(),
        nnz_l: f.nnz_l,
        nnz_s: f.s_factor.nnz(),
        ratio: f.nnz_ratio,
        ordering: f.ordering.name(),
        factor_seconds: f.factor_seconds,
    })
}
