//! Multi-frame rollouts and adjoint chaining across frames.

use heterodyn::backward::{accumulate_parameters, backward_step, AdjointSeed, BackwardConfig, GradientBundle};
use heterodyn::forward::{SimState, Simulator, StepOutput};
use serde::Serialize;

use crate::error::{CliError, Result};

/// Runs `frames` steps; solver errors carry the 1-based frame index.
pub fn run_frames(sim: &Simulator, state: &SimState, frames: usize) -> Result<Vec<StepOutput>> {
    let mut out: Vec<StepOutput> = Vec::with_capacity(frames);
    let mut s = state.clone();
    for frame in 1..=frames {
        let o = sim.step(&s).map_err(|source| CliError::Solver { frame, source })?;
        s = o.state.clone();
        out.push(o);
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FrameAdjoint {
    pub frame: usize,
    pub tau: f64,
    pub rho: f64,
    pub adjoint_iterations: usize,
    pub fast_path: bool,
}

#[derive(Debug, Clone)]
pub struct ChainedGradient {
    pub dl_dq0: Vec<f64>,
    pub dl_dv0: Vec<f64>,
    /// Summed over frames.
    pub dl_de: Vec<f64>,
    /// Summed over frames; the force is constant in time.
    pub dl_df_ext: Vec<f64>,
    pub frames: Vec<FrameAdjoint>,
}

/// Back-propagates per-frame loss sensitivities through a rollout.
/// `dl_dq[t]` and `dl_dv[t]` are `∂L/∂q` and `∂L/∂v` of the state after frame `t + 1`;
/// `dl_dv` may be empty when the loss ignores velocities.
pub fn backpropagate(
    sim: &Simulator,
    outputs: &[StepOutput],
    dl_dq: &[Vec<f64>],
    dl_dv: &[Vec<f64>],
    config: &BackwardConfig,
) -> Result<ChainedGradient> {
    let n = sim.model.mesh.n_dofs();
    let mut seed = AdjointSeed::zeros(n);
    let mut acc: Option<GradientBundle> = None;
    let mut frames = Vec::with_capacity(outputs.len());
    for t in (0..outputs.len()).rev() {
        for (s, d) in seed.dl_dq_next.iter_mut().zip(&dl_dq[t]) {
            *s += d;
        }
        if let Some(dv) = dl_dv.get(t) {
            for (s, d) in seed.dl_dv_next.iter_mut().zip(dv) {
                *s += d;
            }
        }
        let bundle = backward_step(sim, &outputs[t].cache, &seed, config).map_err(|source| CliError::Solver { frame: t + 1, source })?;
        frames.push(FrameAdjoint {
            frame: t + 1,
            tau: bundle.tau_used,
            rho: bundle.tr_ratio,
            adjoint_iterations: bundle.adjoint_iterations,
            fast_path: bundle.fast_path,
        });
        seed = bundle.as_seed();
        match acc.as_mut() {
            Some(a) => accumulate_parameters(a, &bundle),
            None => acc = Some(bundle),
        }
    }
    frames.reverse();
    let acc = acc.ok_or_else(|| CliError::Validation(vec!["frames: must be at least 1".into()]))?;
    let mut dl_dq0 = seed.dl_dq_next;
    let mut dl_dv0 = seed.dl_dv_next;
    for &v in &sim.system().fixed_vertices {
        dl_dq0[3 * v..3 * v + 3].fill(0.0);
        dl_dv0[3 * v..3 * v + 3].fill(0.0);
    }
    Ok(ChainedGradient {
        dl_dq0,
        dl_dv0,
        dl_de: acc.dl_de,
        dl_df_ext: acc.dl_df_ext,
        frames,
    })
}
