//! Inverse problems: design variables, losses, and the L-BFGS identification driver.

use heterodyn::backward::BackwardConfig;
use heterodyn::forward::{Simulator, StepOutput};
use nalgebra::Vector3;
use serde::Serialize;
use serde_json::Value;

use crate::error::{CliError, Result};
use crate::lbfgs::{minimize, Evaluation, LbfgsConfig, Termination};
use crate::rollout::{backpropagate, run_frames};
use crate::scene::{center_of_mass, euler_rotation_derivatives, initial_state, parse_json, scene_from_value, Ctx, InitialCondition, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum DesignVariable {
    /// `ln E` per region.
    Young,
    Position,
    /// XYZ Euler angles.
    Orientation,
    Velocity,
    /// Uniform body acceleration `a`, applied as `m_v a` on every vertex for the whole rollout.
    Force,
}

impl DesignVariable {
    pub fn parse(s: &str) -> Option<Self> {
        Some(match s {
            "young" | "E" => Self::Young,
            "position" => Self::Position,
            "orientation" => Self::Orientation,
            "velocity" | "v0" => Self::Velocity,
            "force" | "f_ext" => Self::Force,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Young => "young",
            Self::Position => "position",
            Self::Orientation => "orientation",
            Self::Velocity => "velocity",
            Self::Force => "force",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Loss {
    TargetCenterOfMass { target: Vector3<f64>, frame: usize },
    TrajectoryMatch { reference: Vec<Vec<f64>> },
    FinalPose { reference: Vec<f64> },
}

impl Loss {
    /// Raw loss and `∂L/∂q` per frame.
    pub fn evaluate(&self, scene: &Scene, outputs: &[StepOutput]) -> (f64, Vec<Vec<f64>>) {
        let n = scene.model.mesh.n_dofs();
        let mut grads = vec![vec![0.0; n]; outputs.len()];
        let mut value = 0.0;
        let mut add_match = |t: usize, reference: &[f64], grads: &mut Vec<Vec<f64>>| {
            for (i, (q, r)) in outputs[t].state.q.iter().zip(reference).enumerate() {
                let d = q - r;
                value += 0.5 * d * d;
                grads[t][i] += d;
            }
        };
        match self {
            Self::TrajectoryMatch { reference } => {
                for t in 0..outputs.len() {
                    add_match(t, &reference[t], &mut grads);
                }
            }
            Self::FinalPose { reference } => add_match(outputs.len() - 1, reference, &mut grads),
            Self::TargetCenterOfMass { target, frame } => {
                let mesh = &scene.model.mesh;
                let t = frame - 1;
                let d = center_of_mass(mesh, &outputs[t].state.q) - target;
                value = 0.5 * d.norm_squared();
                let total: f64 = (0..mesh.n_vertices()).map(|v| mesh.vertex_mass(v)).sum();
                for v in 0..mesh.n_vertices() {
                    let w = mesh.vertex_mass(v) / total;
                    for k in 0..3 {
                        grads[t][3 * v + k] = w * d[k];
                    }
                }
            }
        }
        (value, grads)
    }
}

/// Parameter values a design vector maps to.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DesignValues {
    pub young: Vec<f64>,
    pub position: [f64; 3],
    pub orientation: [f64; 3],
    pub velocity: [f64; 3],
    pub force: [f64; 3],
}

impl DesignValues {
    pub fn from_scene(scene: &Scene) -> Self {
        let i = &scene.initial;
        Self {
            young: scene.region_young(),
            position: i.translation.into(),
            orientation: i.euler.into(),
            velocity: i.velocity.into(),
            force: [0.0; 3],
        }
    }

    fn pack(&self, vars: &[DesignVariable]) -> Vec<f64> {
        let mut x = Vec::new();
        for v in vars {
            match v {
                DesignVariable::Young => x.extend(self.young.iter().map(|e| e.ln())),
                DesignVariable::Position => x.extend(self.position),
                DesignVariable::Orientation => x.extend(self.orientation),
                DesignVariable::Velocity => x.extend(self.velocity),
                DesignVariable::Force => x.extend(self.force),
            }
        }
        x
    }

    fn unpack(&self, vars: &[DesignVariable], x: &[f64]) -> Self {
        let mut out = self.clone();
        let mut k = 0;
        let take3 = |k: &mut usize| {
            let v = [x[*k], x[*k + 1], x[*k + 2]];
            *k += 3;
            v
        };
        for v in vars {
            match v {
                DesignVariable::Young => {
                    let n = out.young.len();
                    out.young = x[k..k + n].iter().map(|l| l.exp()).collect();
                    k += n;
                }
                DesignVariable::Position => out.position = take3(&mut k),
                DesignVariable::Orientation => out.orientation = take3(&mut k),
                DesignVariable::Velocity => out.velocity = take3(&mut k),
                DesignVariable::Force => out.force = take3(&mut k),
            }
        }
        out
    }

    fn initial(&self, base: &InitialCondition) -> InitialCondition {
        InitialCondition {
            translation: self.position.into(),
            euler: self.orientation.into(),
            velocity: self.velocity.into(),
            ..base.clone()
        }
    }
}

/// Rolls a scene out under given design values, refactoring only when the moduli change.
pub struct Evaluator {
    pub scene: Scene,
    pub sim: Simulator,
    pub backward: BackwardConfig,
    /// Times the simulator's material was replaced, counting the initial assignment.
    pub material_updates: usize,
    base_f_ext: Vec<f64>,
}

impl Evaluator {
    pub fn new(scene: Scene, values: &DesignValues) -> Result<Self> {
        let young = scene.young_from_regions(&values.young);
        let mut model = scene.model.clone();
        model.material = model.material.with_young(&model.mesh, young)?;
        let sim = Simulator::new(model, scene.config.clone())?;
        let backward = BackwardConfig {
            eps_tr: scene.eps_tr,
            ..Default::default()
        };
        Ok(Self {
            base_f_ext: scene.model.f_ext.clone(),
            scene,
            sim,
            backward,
            material_updates: 1,
        })
    }

    /// Loads `values` into the simulator and runs every frame.
    pub fn rollout(&mut self, values: &DesignValues) -> Result<Vec<StepOutput>> {
        let young = self.scene.young_from_regions(&values.young);
        if young != self.sim.model.material.young {
            let field = self.sim.model.material.with_young(&self.sim.model.mesh, young)?;
            self.sim.set_material(field)?;
            self.material_updates += 1;
        }
        let mesh = &self.sim.model.mesh;
        let mut f_ext = self.base_f_ext.clone();
        for v in 0..mesh.n_vertices() {
            for k in 0..3 {
                f_ext[3 * v + k] += mesh.vertex_mass(v) * values.force[k];
            }
        }
        self.sim.model.f_ext = f_ext;
        let state = initial_state(&self.sim.model, &values.initial(&self.scene.initial));
        run_frames(&self.sim, &state, self.scene.frames)
    }

    /// Raw loss and its gradient with respect to the packed design vector.
    pub fn loss_and_gradient(&mut self, vars: &[DesignVariable], values: &DesignValues, loss: &Loss) -> Result<(f64, Vec<f64>)> {
        let outputs = self.rollout(values)?;
        let (value, dl_dq) = loss.evaluate(&self.scene, &outputs);
        let chain = backpropagate(&self.sim, &outputs, &dl_dq, &[], &self.backward)?;
        let model = &self.sim.model;
        let mesh = &model.mesh;
        let fixed = |v: usize| self.sim.system().is_fixed(v);
        let c = center_of_mass(mesh, &mesh.rest_q());
        let omega = self.scene.initial.angular_velocity;
        let mut grad = Vec::new();
        for var in vars {
            match var {
                DesignVariable::Young => {
                    let mut g = vec![0.0; self.scene.n_regions];
                    for (e, &reg) in self.scene.regions.iter().enumerate() {
                        g[reg] += chain.dl_de[e] * model.material.young[e];
                    }
                    grad.extend(g);
                }
                DesignVariable::Position | DesignVariable::Velocity => {
                    let src = if *var == DesignVariable::Position {
                        &chain.dl_dq0
                    } else {
                        &chain.dl_dv0
                    };
                    let mut g = [0.0; 3];
                    for v in (0..mesh.n_vertices()).filter(|&v| !fixed(v)) {
                        for k in 0..3 {
                            g[k] += src[3 * v + k];
                        }
                    }
                    grad.extend(g);
                }
                DesignVariable::Orientation => {
                    let dr = euler_rotation_derivatives(&values.orientation.into());
                    let mut g = [0.0; 3];
                    for v in (0..mesh.n_vertices()).filter(|&v| !fixed(v)) {
                        let x = mesh.rest_positions[v] - c;
                        let gq = Vector3::new(chain.dl_dq0[3 * v], chain.dl_dq0[3 * v + 1], chain.dl_dq0[3 * v + 2]);
                        let gv = Vector3::new(chain.dl_dv0[3 * v], chain.dl_dv0[3 * v + 1], chain.dl_dv0[3 * v + 2]);
                        for (i, d) in dr.iter().enumerate() {
                            let dx = d * x;
                            g[i] += gq.dot(&dx) + gv.dot(&omega.cross(&dx));
                        }
                    }
                    grad.extend(g);
                }
                DesignVariable::Force => {
                    let mut g = [0.0; 3];
                    for v in 0..mesh.n_vertices() {
                        for k in 0..3 {
                            g[k] += mesh.vertex_mass(v) * chain.dl_df_ext[3 * v + k];
                        }
                    }
                    grad.extend(g);
                }
            }
        }
        Ok((value, grad))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LossSpec {
    TargetCenterOfMass { target: Vector3<f64>, frame: Option<usize> },
    TrajectoryMatch,
    FinalPose,
}

#[derive(Debug, Clone)]
pub struct InverseProblem {
    pub scene: Scene,
    pub variables: Vec<DesignVariable>,
    pub loss: LossSpec,
    /// Values used to synthesize the reference; `None` keeps the scene's own.
    pub hidden: DesignValues,
    pub initial_guess: DesignValues,
    pub optimizer: LbfgsConfig,
    /// Divide the loss by its value at the initial guess.
    pub normalize: bool,
}

fn read_values(ctx: &mut Ctx, v: Option<&Value>, path: &str, base: &DesignValues) -> DesignValues {
    let mut out = base.clone();
    let Some(v) = v else {
        return out;
    };
    let Some(obj) = ctx.object(v, path) else {
        return out;
    };
    ctx.check_keys(obj, path, &["young", "position", "orientation", "velocity", "force"]);
    if let Some(y) = obj.get("young") {
        let p = format!("{path}.young");
        let ys = match y {
            Value::Number(_) => ctx.number(y, &p).map(|x| vec![x; base.young.len()]),
            _ => ctx.numbers(y, &p),
        };
        match ys {
            Some(ys) if ys.len() == base.young.len() && ys.iter().all(|&x| x > 0.0) => out.young = ys,
            Some(_) => ctx.fail(&p, format!("expected {} positive values", base.young.len())),
            None => {}
        }
    }
    for (key, slot) in [
        ("position", &mut out.position),
        ("orientation", &mut out.orientation),
        ("velocity", &mut out.velocity),
        ("force", &mut out.force),
    ] {
        if let Some(x) = obj.get(key).and_then(|x| ctx.vec3(x, &format!("{path}.{key}"))) {
            *slot = x.into();
        }
    }
    out
}

pub fn parse_problem(text: &str) -> Result<InverseProblem> {
    problem_from_value(&parse_json(text)?)
}

pub fn problem_from_value(value: &Value) -> Result<InverseProblem> {
    let mut ctx = Ctx::default();
    let Some(obj) = ctx.object(value, "problem") else {
        return Err(CliError::Validation(ctx.errors));
    };
    ctx.check_keys(
        obj,
        "",
        &["scene", "variables", "loss", "hidden", "initial_guess", "optimizer", "normalize"],
    );
    let scene_value = obj.get("scene").cloned();
    let scene = match scene_value {
        None => {
            ctx.fail("scene", "missing required field");
            None
        }
        Some(v) => match scene_from_value(&v) {
            Ok(s) => Some(s),
            Err(CliError::Validation(errs)) => {
                ctx.errors.extend(errs.into_iter().map(|e| format!("scene.{e}")));
                None
            }
            Err(e) => return Err(e),
        },
    };
    let mut variables = Vec::new();
    match obj.get("variables").and_then(|v| v.as_array()) {
        None => ctx.fail("variables", "expected a non-empty array of names"),
        Some(arr) => {
            for (i, v) in arr.iter().enumerate() {
                match v.as_str().and_then(DesignVariable::parse) {
                    Some(d) if !variables.contains(&d) => variables.push(d),
                    Some(_) => ctx.fail(&format!("variables[{i}]"), "duplicate variable"),
                    None => ctx.fail(
                        &format!("variables[{i}]"),
                        "expected one of young, position, orientation, velocity, force",
                    ),
                }
            }
            if arr.is_empty() {
                ctx.fail("variables", "expected a non-empty array of names");
            }
        }
    }
    let loss = match obj.get("loss") {
        None => {
            ctx.fail("loss", "missing required field");
            None
        }
        Some(l) => ctx.object(l, "loss").and_then(|l| {
            ctx.check_keys(l, "loss", &["type", "target", "frame"]);
            match l.get("type").and_then(|t| t.as_str()) {
                Some("trajectory_match") => Some(LossSpec::TrajectoryMatch),
                Some("final_pose") => Some(LossSpec::FinalPose),
                Some("target_center_of_mass") => {
                    let target = ctx.required(l, "loss", "target").and_then(|t| ctx.vec3(t, "loss.target"));
                    let frame = l.get("frame").and_then(|f| ctx.index(f, "loss.frame"));
                    target.map(|target| LossSpec::TargetCenterOfMass { target, frame })
                }
                _ => {
                    ctx.fail("loss.type", "expected trajectory_match, final_pose or target_center_of_mass");
                    None
                }
            }
        }),
    };
    let mut optimizer = LbfgsConfig::default();
    let mut normalize = true;
    if let Some(o) = obj.get("optimizer").and_then(|o| ctx.object(o, "optimizer")) {
        ctx.check_keys(o, "optimizer", &["memory", "max_evals", "grad_tol", "loss_tol"]);
        optimizer.memory = ctx.opt_index(o, "optimizer", "memory", optimizer.memory).max(1);
        optimizer.max_evals = ctx.opt_index(o, "optimizer", "max_evals", optimizer.max_evals).max(1);
        optimizer.grad_tol = ctx.opt_number(o, "optimizer", "grad_tol", optimizer.grad_tol);
        optimizer.loss_tol = ctx.opt_number(o, "optimizer", "loss_tol", optimizer.loss_tol);
    }
    if let Some(n) = obj.get("normalize") {
        normalize = n.as_bool().unwrap_or_else(|| {
            ctx.fail("normalize", "expected a boolean");
            true
        });
    }
    let (hidden, initial_guess) = match &scene {
        Some(s) => {
            let base = DesignValues::from_scene(s);
            let hidden = read_values(&mut ctx, obj.get("hidden"), "hidden", &base);
            let guess = read_values(&mut ctx, obj.get("initial_guess"), "initial_guess", &base);
            (hidden, guess)
        }
        None => return Err(CliError::Validation(ctx.errors)),
    };
    let scene = scene.unwrap();
    if let Some(LossSpec::TargetCenterOfMass { frame: Some(f), .. }) = &loss {
        if *f == 0 || *f > scene.frames {
            ctx.fail("loss.frame", format!("must be in 1..={}", scene.frames));
        }
    }
    if !ctx.errors.is_empty() {
        return Err(CliError::Validation(ctx.errors));
    }
    Ok(InverseProblem {
        scene,
        variables,
        loss: loss.unwrap(),
        hidden,
        initial_guess,
        optimizer,
        normalize,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct IdentifyResult {
    pub variables: Vec<DesignVariable>,
    pub recovered: DesignValues,
    pub hidden: DesignValues,
    pub initial_guess: DesignValues,
    pub loss: f64,
    pub loss_scale: f64,
    pub evaluations: usize,
    pub iterations: usize,
    pub termination: Termination,
    pub history: Vec<Evaluation>,
    pub factorizations: usize,
    pub material_updates: usize,
    /// The reference was produced by this simulator from `hidden`.
    pub inverse_crime: bool,
    pub final_center_of_mass: [f64; 3],
    pub target_distance: Option<f64>,
    pub launch_distance: Option<f64>,
}

impl IdentifyResult {
    pub fn stalled(&self) -> bool {
        !self.termination.converged()
    }
}

/// Synthesizes the reference (when needed) and runs L-BFGS from the initial guess.
pub fn identify(problem: &InverseProblem) -> Result<IdentifyResult> {
    let scene = &problem.scene;
    let frames = scene.frames;
    let (loss, inverse_crime) = match &problem.loss {
        LossSpec::TargetCenterOfMass { target, frame } => (
            Loss::TargetCenterOfMass {
                target: *target,
                frame: frame.unwrap_or(frames),
            },
            false,
        ),
        spec => {
            let mut reference_eval = Evaluator::new(scene.clone(), &problem.hidden)?;
            let outputs = reference_eval.rollout(&problem.hidden)?;
            let traj: Vec<Vec<f64>> = outputs.into_iter().map(|o| o.state.q).collect();
            let loss = if *spec == LossSpec::FinalPose {
                Loss::FinalPose {
                    reference: traj.last().cloned().unwrap_or_default(),
                }
            } else {
                Loss::TrajectoryMatch { reference: traj }
            };
            (loss, true)
        }
    };
    let vars = &problem.variables;
    let mut eval = Evaluator::new(scene.clone(), &problem.initial_guess)?;
    let x0 = problem.initial_guess.pack(vars);
    let mut scale: Option<f64> = None;
    let normalize = problem.normalize;
    let guess = problem.initial_guess.clone();
    let mut objective = |x: &[f64]| -> Result<(f64, Vec<f64>)> {
        let values = guess.unpack(vars, x);
        let (f, g) = eval.loss_and_gradient(vars, &values, &loss)?;
        let s = *scale.get_or_insert(if normalize && f > 0.0 { f } else { 1.0 });
        Ok((f / s, g.iter().map(|x| x / s).collect()))
    };
    let result = minimize(&mut objective, &x0, &problem.optimizer)?;
    let recovered = guess.unpack(vars, &result.x);
    // leave the simulator on the recovered values for the reported end state
    let outputs = eval.rollout(&recovered)?;
    let com = center_of_mass(&scene.model.mesh, &outputs.last().expect("frames ≥ 1").state.q);
    let (target_distance, launch_distance) = match &loss {
        Loss::TargetCenterOfMass { target, .. } => {
            let start = center_of_mass(&scene.model.mesh, &initial_state(&eval.sim.model, &guess.initial(&scene.initial)).q);
            (Some((com - target).norm()), Some((target - start).norm()))
        }
        _ => (None, None),
    };
    Ok(IdentifyResult {
        variables: vars.clone(),
        recovered,
        hidden: problem.hidden.clone(),
        initial_guess: problem.initial_guess.clone(),
        loss: result.loss,
        loss_scale: scale.unwrap_or(1.0),
        evaluations: result.history.len(),
        iterations: result.iterations,
        termination: result.termination,
        history: result.history,
        factorizations: eval.sim.factorizations(),
        material_updates: eval.material_updates,
        inverse_crime,
        final_center_of_mass: com.into(),
        target_distance,
        launch_distance,
    })
}
