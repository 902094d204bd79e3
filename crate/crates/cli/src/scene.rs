//! Scene files: JSON parsing, validation and resolution into a solver model.
//!
//! A scene is either written out explicitly or names a built-in generator
//! (`{"generator": "ball-drop", "params": {...}}`). Generator output goes
//! through the same validation as hand-written scenes; any other top-level
//! key next to `generator` overrides the generated value, with `solver`,
//! `material` and `initial` merged key by key.

use std::fmt::Display;
use std::path::Path;

use heterodyn::contact::Obstacle;
use heterodyn::forward::{Model, SimState, Simulator, SolverConfig};
use heterodyn::material::{EnergyKind, MaterialField, MaterialParams};
use heterodyn::mesh::{build_tet_mesh, ingest_hex_grid, TetMesh};
use nalgebra::{Matrix3, Rotation3, Vector3};
use serde_json::{Map, Value};

use crate::error::{CliError, Result};
use crate::generators;

/// Rigid placement and velocity applied to the rest shape at `t = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialCondition {
    pub translation: Vector3<f64>,
    /// XYZ Euler angles (roll, pitch, yaw) about the rest center of mass.
    pub euler: Vector3<f64>,
    pub velocity: Vector3<f64>,
    pub angular_velocity: Vector3<f64>,
    pub vertex_velocities: Option<Vec<Vector3<f64>>>,
}

impl Default for InitialCondition {
    fn default() -> Self {
        Self {
            translation: Vector3::zeros(),
            euler: Vector3::zeros(),
            velocity: Vector3::zeros(),
            angular_velocity: Vector3::zeros(),
            vertex_velocities: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub name: String,
    pub model: Model,
    pub config: SolverConfig,
    pub eps_tr: f64,
    pub frames: usize,
    /// Region index of each element.
    pub regions: Vec<usize>,
    pub n_regions: usize,
    pub initial: InitialCondition,
    /// Resolved scene JSON (generators expanded), kept for output metadata.
    pub source: Value,
}

impl Scene {
    pub fn simulator(&self) -> Result<Simulator> {
        Ok(Simulator::new(self.model.clone(), self.config.clone())?)
    }

    pub fn initial_state(&self) -> SimState {
        initial_state(&self.model, &self.initial)
    }

    /// Mass-weighted center of the rest shape.
    pub fn rest_center(&self) -> Vector3<f64> {
        center_of_mass(&self.model.mesh, &self.model.mesh.rest_q())
    }

    /// Expands one value per region into one value per element.
    pub fn young_from_regions(&self, values: &[f64]) -> Vec<f64> {
        self.regions.iter().map(|&r| values[r]).collect()
    }

    /// Young's modulus of the first element of each region.
    pub fn region_young(&self) -> Vec<f64> {
        let mut out = vec![f64::NAN; self.n_regions];
        for (e, &r) in self.regions.iter().enumerate().rev() {
            out[r] = self.model.material.young[e];
        }
        out
    }

    /// Element indices grouped by region.
    pub fn region_elements(&self) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.n_regions];
        for (e, &r) in self.regions.iter().enumerate() {
            out[r].push(e);
        }
        out
    }
}

pub fn center_of_mass(mesh: &TetMesh, q: &[f64]) -> Vector3<f64> {
    let mut c = Vector3::zeros();
    let mut m = 0.0;
    for v in 0..mesh.n_vertices() {
        let mv = mesh.vertex_mass(v);
        c += mv * Vector3::new(q[3 * v], q[3 * v + 1], q[3 * v + 2]);
        m += mv;
    }
    c / m
}

pub fn euler_rotation(euler: &Vector3<f64>) -> Matrix3<f64> {
    Rotation3::from_euler_angles(euler.x, euler.y, euler.z).into_inner()
}

/// `∂R/∂θ_i` for `R = R_z(γ) R_y(β) R_x(α)`.
pub fn euler_rotation_derivatives(euler: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let rx = Rotation3::from_axis_angle(&Vector3::x_axis(), euler.x).into_inner();
    let ry = Rotation3::from_axis_angle(&Vector3::y_axis(), euler.y).into_inner();
    let rz = Rotation3::from_axis_angle(&Vector3::z_axis(), euler.z).into_inner();
    let ex = Vector3::<f64>::x().cross_matrix();
    let ey = Vector3::<f64>::y().cross_matrix();
    let ez = Vector3::<f64>::z().cross_matrix();
    [rz * ry * rx * ex, rz * ey * ry * rx, ez * rz * ry * rx]
}

/// Places the rest shape by `init`; Dirichlet vertices stay at their targets with zero velocity.
pub fn initial_state(model: &Model, init: &InitialCondition) -> SimState {
    let mesh = &model.mesh;
    let c = center_of_mass(mesh, &mesh.rest_q());
    let r = euler_rotation(&init.euler);
    let n = mesh.n_vertices();
    let mut q = vec![0.0; 3 * n];
    let mut v = vec![0.0; 3 * n];
    for i in 0..n {
        let arm = r * (mesh.rest_positions[i] - c);
        let x = c + arm + init.translation;
        let mut vel = init.velocity + init.angular_velocity.cross(&arm);
        if let Some(vv) = &init.vertex_velocities {
            vel += vv[i];
        }
        q[3 * i..3 * i + 3].copy_from_slice(x.as_slice());
        v[3 * i..3 * i + 3].copy_from_slice(vel.as_slice());
    }
    model.enforce_dirichlet(&mut q);
    model.enforce_dirichlet_velocity(&mut v);
    SimState { q, v, time: 0.0 }
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_scene(&text)
}

pub fn parse_json(text: &str) -> Result<Value> {
    serde_json::from_str(text).map_err(|e| {
        let full = e.to_string();
        let message = full.split(" at line ").next().unwrap_or(&full).to_string();
        CliError::Parse {
            line: e.line(),
            column: e.column(),
            message,
        }
    })
}

pub fn parse_scene(text: &str) -> Result<Scene> {
    scene_from_value(&parse_json(text)?)
}

/// Resolves a scene value, expanding a generator reference first.
pub fn scene_from_value(value: &Value) -> Result<Scene> {
    let resolved = expand(value)?;
    resolve(&resolved)
}

/// Expands `{"generator": ...}` into an explicit scene value; other values pass through.
pub fn expand(value: &Value) -> Result<Value> {
    let Some(obj) = value.as_object() else {
        return Err(CliError::Validation(vec!["scene: expected a JSON object".into()]));
    };
    let Some(gen) = obj.get("generator") else {
        return Ok(value.clone());
    };
    let mut ctx = Ctx::default();
    let name = match gen.as_str() {
        Some(s) => s.to_string(),
        None => {
            ctx.fail("generator", "expected a string");
            return Err(CliError::Validation(ctx.errors));
        }
    };
    let empty = Map::new();
    let params = match obj.get("params") {
        None => &empty,
        Some(p) => match p.as_object() {
            Some(m) => m,
            None => {
                ctx.fail("params", "expected an object");
                return Err(CliError::Validation(ctx.errors));
            }
        },
    };
    let mut out = generators::generate(&name, params)?;
    let target = out.as_object_mut().expect("generators emit objects");
    for (k, v) in obj {
        if k == "generator" || k == "params" {
            continue;
        }
        match (target.get_mut(k), v) {
            (Some(Value::Object(dst)), Value::Object(src)) if matches!(k.as_str(), "solver" | "material" | "initial") => {
                for (kk, vv) in src {
                    dst.insert(kk.clone(), vv.clone());
                }
            }
            _ => {
                target.insert(k.clone(), v.clone());
            }
        }
    }
    Ok(out)
}

#[derive(Default)]
pub(crate) struct Ctx {
    pub(crate) errors: Vec<String>,
}

fn join(path: &str, key: &str) -> String {
    if path.is_empty() {
        key.to_string()
    } else {
        format!("{path}.{key}")
    }
}

impl Ctx {
    pub(crate) fn fail(&mut self, path: &str, msg: impl Display) {
        self.errors.push(format!("{path}: {msg}"));
    }

    pub(crate) fn object<'v>(&mut self, v: &'v Value, path: &str) -> Option<&'v Map<String, Value>> {
        let o = v.as_object();
        if o.is_none() {
            self.fail(path, "expected an object");
        }
        o
    }

    pub(crate) fn check_keys(&mut self, obj: &Map<String, Value>, path: &str, allowed: &[&str]) {
        for k in obj.keys() {
            if !allowed.contains(&k.as_str()) {
                self.fail(&join(path, k), "unknown field");
            }
        }
    }

    pub(crate) fn number(&mut self, v: &Value, path: &str) -> Option<f64> {
        match v.as_f64() {
            Some(x) if x.is_finite() => Some(x),
            _ => {
                self.fail(path, "expected a finite number");
                None
            }
        }
    }

    pub(crate) fn required<'v>(&mut self, obj: &'v Map<String, Value>, path: &str, key: &str) -> Option<&'v Value> {
        let v = obj.get(key);
        if v.is_none() {
            self.fail(&join(path, key), "missing required field");
        }
        v
    }

    pub(crate) fn opt_number(&mut self, obj: &Map<String, Value>, path: &str, key: &str, default: f64) -> f64 {
        match obj.get(key) {
            None => default,
            Some(v) => self.number(v, &join(path, key)).unwrap_or(default),
        }
    }

    pub(crate) fn index(&mut self, v: &Value, path: &str) -> Option<usize> {
        let i = v.as_u64().map(|x| x as usize);
        if i.is_none() {
            self.fail(path, "expected a non-negative integer");
        }
        i
    }

    pub(crate) fn opt_index(&mut self, obj: &Map<String, Value>, path: &str, key: &str, default: usize) -> usize {
        match obj.get(key) {
            None => default,
            Some(v) => self.index(v, &join(path, key)).unwrap_or(default),
        }
    }

    pub(crate) fn opt_bool(&mut self, obj: &Map<String, Value>, path: &str, key: &str, default: bool) -> bool {
        match obj.get(key) {
            None => default,
            Some(v) => v.as_bool().unwrap_or_else(|| {
                self.fail(&join(path, key), "expected a boolean");
                default
            }),
        }
    }

    pub(crate) fn vec3(&mut self, v: &Value, path: &str) -> Option<Vector3<f64>> {
        let xs = self.numbers(v, path)?;
        if xs.len() != 3 {
            self.fail(path, format!("expected 3 components, got {}", xs.len()));
            return None;
        }
        Some(Vector3::new(xs[0], xs[1], xs[2]))
    }

    pub(crate) fn opt_vec3(&mut self, obj: &Map<String, Value>, path: &str, key: &str, default: Vector3<f64>) -> Vector3<f64> {
        match obj.get(key) {
            None => default,
            Some(v) => self.vec3(v, &join(path, key)).unwrap_or(default),
        }
    }

    pub(crate) fn numbers(&mut self, v: &Value, path: &str) -> Option<Vec<f64>> {
        let Some(arr) = v.as_array() else {
            self.fail(path, "expected an array of numbers");
            return None;
        };
        let mut out = Vec::with_capacity(arr.len());
        let mut ok = true;
        for (i, x) in arr.iter().enumerate() {
            match self.number(x, &format!("{path}[{i}]")) {
                Some(x) => out.push(x),
                None => ok = false,
            }
        }
        ok.then_some(out)
    }

    pub(crate) fn vec3_list(&mut self, v: &Value, path: &str) -> Option<Vec<Vector3<f64>>> {
        let Some(arr) = v.as_array() else {
            self.fail(path, "expected an array of 3-vectors");
            return None;
        };
        let mut out = Vec::with_capacity(arr.len());
        let mut ok = true;
        for (i, x) in arr.iter().enumerate() {
            match self.vec3(x, &format!("{path}[{i}]")) {
                Some(p) => out.push(p),
                None => ok = false,
            }
        }
        ok.then_some(out)
    }
}

const TOP_KEYS: &[&str] = &[
    "name",
    "mesh",
    "density",
    "material",
    "dirichlet",
    "obstacles",
    "gravity",
    "f_ext",
    "initial",
    "solver",
    "frames",
];

struct MeshSpec {
    positions: Vec<Vector3<f64>>,
    elements: Vec<[usize; 4]>,
}

fn read_mesh(ctx: &mut Ctx, v: &Value) -> Option<MeshSpec> {
    let obj = ctx.object(v, "mesh")?;
    ctx.check_keys(obj, "mesh", &["vertices", "elements", "grid"]);
    if let Some(g) = obj.get("grid") {
        let g = ctx.object(g, "mesh.grid")?;
        ctx.check_keys(g, "mesh.grid", &["dims", "spacing", "origin"]);
        let dims = ctx.required(g, "mesh.grid", "dims").and_then(|d| {
            let xs = ctx.numbers(d, "mesh.grid.dims")?;
            if xs.len() != 3 || xs.iter().any(|&x| x < 1.0 || x.fract() != 0.0) {
                ctx.fail("mesh.grid.dims", "expected three positive integers");
                return None;
            }
            Some([xs[0] as usize, xs[1] as usize, xs[2] as usize])
        });
        let spacing = ctx
            .required(g, "mesh.grid", "spacing")
            .and_then(|s| ctx.number(s, "mesh.grid.spacing"));
        if let Some(s) = spacing {
            if s <= 0.0 {
                ctx.fail("mesh.grid.spacing", "must be positive");
            }
        }
        let origin = ctx.opt_vec3(g, "mesh.grid", "origin", Vector3::zeros());
        let (dims, spacing) = (dims?, spacing.filter(|&s| s > 0.0)?);
        let grid = match ingest_hex_grid(dims, spacing, 1.0) {
            Ok(m) => m,
            Err(e) => {
                ctx.fail("mesh.grid", e);
                return None;
            }
        };
        return Some(MeshSpec {
            positions: grid.rest_positions.iter().map(|p| p + origin).collect(),
            elements: grid.elements,
        });
    }
    let positions = ctx
        .required(obj, "mesh", "vertices")
        .and_then(|v| ctx.vec3_list(v, "mesh.vertices"));
    let elements = ctx.required(obj, "mesh", "elements").and_then(|v| {
        let arr = v.as_array().or_else(|| {
            ctx.fail("mesh.elements", "expected an array of 4-index arrays");
            None
        })?;
        let mut out = Vec::with_capacity(arr.len());
        for (i, e) in arr.iter().enumerate() {
            let path = format!("mesh.elements[{i}]");
            match e.as_array().filter(|a| a.len() == 4) {
                Some(ids) => {
                    let ids: Vec<usize> = ids.iter().filter_map(|x| ctx.index(x, &path)).collect();
                    if ids.len() == 4 {
                        out.push([ids[0], ids[1], ids[2], ids[3]]);
                    }
                }
                None => ctx.fail(&path, "expected 4 vertex indices"),
            }
        }
        (out.len() == arr.len()).then_some(out)
    });
    let (positions, elements) = (positions?, elements?);
    if elements.is_empty() {
        ctx.fail("mesh.elements", "mesh has no elements");
    }
    for (i, tet) in elements.iter().enumerate() {
        if let Some(&bad) = tet.iter().find(|&&v| v >= positions.len()) {
            ctx.fail(
                &format!("mesh.elements[{i}]"),
                format!("vertex {bad} out of range ({} vertices)", positions.len()),
            );
        }
    }
    Some(MeshSpec { positions, elements })
}

struct MaterialSpec {
    params: MaterialParams,
    young: Vec<f64>,
    regions: Vec<usize>,
    n_regions: usize,
    freeze_means: bool,
}

fn read_material(ctx: &mut Ctx, v: &Value, n_elements: Option<usize>) -> Option<MaterialSpec> {
    let obj = ctx.object(v, "material")?;
    ctx.check_keys(
        obj,
        "material",
        &[
            "energy",
            "young",
            "poisson",
            "regions",
            "log_barrier",
            "alpha",
            "beta0",
            "freeze_means",
        ],
    );
    let energy_kind = match obj.get("energy").map(|e| e.as_str()) {
        None => Some(EnergyKind::NeoHookean),
        Some(Some("neo-hookean")) => Some(EnergyKind::NeoHookean),
        Some(Some("corotated")) => Some(EnergyKind::Corotated),
        Some(_) => {
            ctx.fail("material.energy", "expected \"neo-hookean\" or \"corotated\"");
            None
        }
    };
    let poisson = ctx
        .required(obj, "material", "poisson")
        .and_then(|p| ctx.number(p, "material.poisson"));
    if let Some(p) = poisson {
        if !(0.0..0.5).contains(&p) {
            ctx.fail("material.poisson", format!("{p} outside [0, 0.5)"));
        }
    }
    let alpha = ctx.opt_number(obj, "material", "alpha", 0.0);
    let beta0 = ctx.opt_number(obj, "material", "beta0", 0.0);
    if alpha < 0.0 {
        ctx.fail("material.alpha", "must be non-negative");
    }
    if beta0 < 0.0 {
        ctx.fail("material.beta0", "must be non-negative");
    }
    let log_volume_barrier = ctx.opt_bool(obj, "material", "log_barrier", false);
    let freeze_means = ctx.opt_bool(obj, "material", "freeze_means", false);

    let regions: Option<Vec<usize>> = match obj.get("regions") {
        None => n_elements.map(|n| vec![0; n]),
        Some(r) => {
            let ids = r.as_array().map(|a| {
                a.iter()
                    .enumerate()
                    .filter_map(|(i, x)| ctx.index(x, &format!("material.regions[{i}]")))
                    .collect::<Vec<_>>()
            });
            match (ids, n_elements) {
                (None, _) => {
                    ctx.fail("material.regions", "expected an array of region indices");
                    None
                }
                (Some(ids), Some(n)) if ids.len() != n => {
                    ctx.fail("material.regions", format!("expected {n} entries, got {}", ids.len()));
                    None
                }
                (Some(ids), _) => Some(ids),
            }
        }
    };
    let n_regions = regions.as_ref().map_or(1, |r| r.iter().max().map_or(1, |m| m + 1));
    let has_regions = obj.contains_key("regions");
    let young = ctx.required(obj, "material", "young").and_then(|y| {
        let values = match y {
            Value::Number(_) => vec![ctx.number(y, "material.young")?],
            _ => ctx.numbers(y, "material.young")?,
        };
        for (i, &x) in values.iter().enumerate() {
            if x <= 0.0 {
                ctx.fail(&format!("material.young[{i}]"), format!("{x} must be positive"));
            }
        }
        let regions = regions.as_ref()?;
        match values.len() {
            1 => Some(vec![values[0]; regions.len()]),
            k if has_regions && k == n_regions => Some(regions.iter().map(|&r| values[r]).collect()),
            k if !has_regions && k == regions.len() => Some(values),
            k => {
                let expected = if has_regions { n_regions } else { regions.len() };
                ctx.fail("material.young", format!("expected 1 or {expected} values, got {k}"));
                None
            }
        }
    });
    Some(MaterialSpec {
        params: MaterialParams {
            energy_kind: energy_kind?,
            log_volume_barrier,
            poisson: poisson?,
            alpha,
            beta0,
        },
        young: young?,
        regions: regions?,
        n_regions,
        freeze_means,
    })
}

fn read_solver(ctx: &mut Ctx, v: Option<&Value>) -> (SolverConfig, f64) {
    let mut config = SolverConfig::default();
    let mut eps_tr = 0.1;
    let Some(v) = v else {
        return (config, eps_tr);
    };
    let Some(obj) = ctx.object(v, "solver") else {
        return (config, eps_tr);
    };
    ctx.check_keys(
        obj,
        "solver",
        &[
            "h",
            "max_iters",
            "eps_rel",
            "eps_abs",
            "eps_tr",
            "aa_window",
            "contact_max_iters",
            "contact_margin",
        ],
    );
    config.h = ctx.opt_number(obj, "solver", "h", config.h);
    if config.h <= 0.0 {
        ctx.fail("solver.h", format!("time step must be positive, got {}", config.h));
    }
    config.max_iters = ctx.opt_index(obj, "solver", "max_iters", config.max_iters);
    if config.max_iters == 0 {
        ctx.fail("solver.max_iters", "must be at least 1");
    }
    config.eps_rel = ctx.opt_number(obj, "solver", "eps_rel", config.eps_rel);
    config.eps_abs = ctx.opt_number(obj, "solver", "eps_abs", config.eps_abs);
    if config.eps_rel < 0.0 || config.eps_abs < 0.0 {
        ctx.fail("solver", "tolerances must be non-negative");
    }
    eps_tr = ctx.opt_number(obj, "solver", "eps_tr", eps_tr);
    if eps_tr < 0.0 {
        ctx.fail("solver.eps_tr", "must be non-negative");
    }
    config.aa_window = match obj.get("aa_window") {
        None | Some(Value::Null) => None,
        Some(w) => ctx.index(w, "solver.aa_window"),
    };
    config.contact_max_iters = ctx.opt_index(obj, "solver", "contact_max_iters", config.contact_max_iters);
    config.contact_margin = ctx.opt_number(obj, "solver", "contact_margin", config.contact_margin);
    (config, eps_tr)
}

fn read_obstacles(ctx: &mut Ctx, v: Option<&Value>) -> Vec<Obstacle> {
    let Some(v) = v else {
        return Vec::new();
    };
    let Some(arr) = v.as_array() else {
        ctx.fail("obstacles", "expected an array");
        return Vec::new();
    };
    let mut out = Vec::new();
    for (i, o) in arr.iter().enumerate() {
        let path = format!("obstacles[{i}]");
        let Some(obj) = ctx.object(o, &path) else { continue };
        let friction = ctx.opt_number(obj, &path, "friction", 0.0);
        let built = match obj.get("type").and_then(|t| t.as_str()) {
            Some("half_space") => {
                ctx.check_keys(obj, &path, &["type", "normal", "offset", "friction"]);
                let normal = ctx.required(obj, &path, "normal").and_then(|n| ctx.vec3(n, &join(&path, "normal")));
                let offset = ctx.opt_number(obj, &path, "offset", 0.0);
                normal.map(|n| Obstacle::half_space(n, offset, friction))
            }
            Some("sphere") => {
                ctx.check_keys(obj, &path, &["type", "center", "radius", "friction"]);
                let center = ctx.required(obj, &path, "center").and_then(|c| ctx.vec3(c, &join(&path, "center")));
                let radius = ctx
                    .required(obj, &path, "radius")
                    .and_then(|r| ctx.number(r, &join(&path, "radius")));
                center.zip(radius).map(|(c, r)| Obstacle::sphere(c, r, friction))
            }
            _ => {
                ctx.fail(&join(&path, "type"), "expected \"half_space\" or \"sphere\"");
                None
            }
        };
        match built {
            Some(Ok(o)) => out.push(o),
            Some(Err(e)) => ctx.fail(&path, e),
            None => {}
        }
    }
    out
}

fn read_dirichlet(ctx: &mut Ctx, v: Option<&Value>, positions: Option<&[Vector3<f64>]>) -> Vec<(usize, Vector3<f64>)> {
    let Some(v) = v else {
        return Vec::new();
    };
    let Some(arr) = v.as_array() else {
        ctx.fail("dirichlet", "expected an array");
        return Vec::new();
    };
    let mut out = Vec::new();
    for (i, d) in arr.iter().enumerate() {
        let path = format!("dirichlet[{i}]");
        let Some(obj) = ctx.object(d, &path) else { continue };
        ctx.check_keys(obj, &path, &["vertex", "position"]);
        let Some(vi) = ctx
            .required(obj, &path, "vertex")
            .and_then(|x| ctx.index(x, &join(&path, "vertex")))
        else {
            continue;
        };
        let Some(positions) = positions else { continue };
        if vi >= positions.len() {
            ctx.fail(&join(&path, "vertex"), format!("{vi} out of range ({} vertices)", positions.len()));
            continue;
        }
        let x = ctx.opt_vec3(obj, &path, "position", positions[vi]);
        out.push((vi, x));
    }
    out
}

fn read_initial(ctx: &mut Ctx, v: Option<&Value>, n_vertices: Option<usize>) -> InitialCondition {
    let mut init = InitialCondition::default();
    let Some(v) = v else {
        return init;
    };
    let Some(obj) = ctx.object(v, "initial") else {
        return init;
    };
    ctx.check_keys(
        obj,
        "initial",
        &["translation", "euler", "velocity", "angular_velocity", "vertex_velocities"],
    );
    init.translation = ctx.opt_vec3(obj, "initial", "translation", init.translation);
    init.euler = ctx.opt_vec3(obj, "initial", "euler", init.euler);
    init.velocity = ctx.opt_vec3(obj, "initial", "velocity", init.velocity);
    init.angular_velocity = ctx.opt_vec3(obj, "initial", "angular_velocity", init.angular_velocity);
    if let Some(vv) = obj.get("vertex_velocities") {
        if let Some(list) = ctx.vec3_list(vv, "initial.vertex_velocities") {
            match n_vertices {
                Some(n) if list.len() != n => ctx.fail("initial.vertex_velocities", format!("expected {n} entries, got {}", list.len())),
                _ => init.vertex_velocities = Some(list),
            }
        }
    }
    init
}

fn read_f_ext(ctx: &mut Ctx, v: Option<&Value>, n_vertices: Option<usize>) -> Option<Vec<Vector3<f64>>> {
    let v = v?;
    let n = n_vertices?;
    if let Some(obj) = v.as_object() {
        ctx.check_keys(obj, "f_ext", &["uniform"]);
        let f = ctx.required(obj, "f_ext", "uniform").and_then(|u| ctx.vec3(u, "f_ext.uniform"))?;
        return Some(vec![f; n]);
    }
    let list = ctx.vec3_list(v, "f_ext")?;
    if list.len() != n {
        ctx.fail("f_ext", format!("expected {n} per-vertex forces, got {}", list.len()));
        return None;
    }
    Some(list)
}

/// Validates an explicit scene value, reporting every violation found.
pub fn resolve(value: &Value) -> Result<Scene> {
    let mut ctx = Ctx::default();
    let Some(obj) = ctx.object(value, "scene") else {
        return Err(CliError::Validation(ctx.errors));
    };
    ctx.check_keys(obj, "", TOP_KEYS);
    let name = obj.get("name").and_then(|n| n.as_str()).unwrap_or("scene").to_string();
    let mesh = ctx.required(obj, "", "mesh").and_then(|m| read_mesh(&mut ctx, m));
    let n_vertices = mesh.as_ref().map(|m| m.positions.len());
    let n_elements = mesh.as_ref().map(|m| m.elements.len());
    let density = ctx.opt_number(obj, "", "density", 1000.0);
    if density <= 0.0 {
        ctx.fail("density", "must be positive");
    }
    let material = ctx
        .required(obj, "", "material")
        .and_then(|m| read_material(&mut ctx, m, n_elements));
    let frames = ctx.required(obj, "", "frames").and_then(|f| ctx.index(f, "frames"));
    if frames == Some(0) {
        ctx.fail("frames", "must be at least 1");
    }
    let (config, eps_tr) = read_solver(&mut ctx, obj.get("solver"));
    let gravity = ctx.opt_vec3(obj, "", "gravity", Vector3::zeros());
    let dirichlet = read_dirichlet(&mut ctx, obj.get("dirichlet"), mesh.as_ref().map(|m| m.positions.as_slice()));
    let obstacles = read_obstacles(&mut ctx, obj.get("obstacles"));
    let f_ext = read_f_ext(&mut ctx, obj.get("f_ext"), n_vertices);
    let initial = read_initial(&mut ctx, obj.get("initial"), n_vertices);
    if !ctx.errors.is_empty() {
        return Err(CliError::Validation(ctx.errors));
    }
    let (mesh, material, frames) = (mesh.unwrap(), material.unwrap(), frames.unwrap());

    let mesh = build_tet_mesh(mesh.positions, mesh.elements, density).map_err(|e| CliError::Validation(vec![format!("mesh: {e}")]))?;
    let invalid = |e: heterodyn::Error| CliError::Validation(vec![format!("material: {e}")]);
    let mut field = MaterialField::new(&mesh, material.young.clone(), &material.params).map_err(invalid)?;
    if material.freeze_means {
        field =
            MaterialField::with_frozen_means(&mesh, material.young, &material.params, (field.mean_mu, field.mean_lam)).map_err(invalid)?;
    }
    let mut model = Model::new(mesh, field);
    model.add_gravity(gravity);
    if let Some(f) = f_ext {
        for (i, fv) in f.iter().enumerate() {
            for k in 0..3 {
                model.f_ext[3 * i + k] += fv[k];
            }
        }
    }
    model.dirichlet = dirichlet;
    model.obstacles = obstacles;
    Ok(Scene {
        name,
        model,
        config,
        eps_tr,
        frames,
        regions: material.regions,
        n_regions: material.n_regions,
        initial,
        source: value.clone(),
    })
}
