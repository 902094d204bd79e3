//! Built-in desk-scale scenes, emitted as explicit scene JSON.

use heterodyn::mesh::ingest_hex_grid;
use nalgebra::{Matrix3, Vector3};
use serde_json::{json, Map, Value};

use crate::error::{CliError, Result};
use crate::scene::Ctx;

pub const GENERATORS: &[&str] = &["two-tet", "cantilever3", "twist-bar", "ball-drop", "slab-on-sphere", "resting-box"];

pub fn generate(name: &str, params: &Map<String, Value>) -> Result<Value> {
    let mut ctx = Ctx::default();
    let out = match name {
        "two-tet" => two_tet(&mut ctx, params),
        "cantilever3" => cantilever(&mut ctx, params, "cantilever3", 0.0, true, 20),
        "twist-bar" => cantilever(&mut ctx, params, "twist-bar", 4.0, false, 30),
        "ball-drop" => ball_drop(&mut ctx, params),
        "slab-on-sphere" => slab_on_sphere(&mut ctx, params),
        "resting-box" => resting_box(&mut ctx, params),
        _ => {
            ctx.fail(
                "generator",
                format!("unknown generator {name:?}; expected one of {}", GENERATORS.join(", ")),
            );
            Value::Null
        }
    };
    if ctx.errors.is_empty() {
        Ok(out)
    } else {
        Err(CliError::Validation(ctx.errors))
    }
}

const P: &str = "params";

fn energy(ctx: &mut Ctx, params: &Map<String, Value>, default: &str) -> String {
    match params.get("energy") {
        None => default.to_string(),
        Some(v) => match v.as_str() {
            Some(s @ ("neo-hookean" | "corotated")) => s.to_string(),
            _ => {
                ctx.fail("params.energy", "expected \"neo-hookean\" or \"corotated\"");
                default.to_string()
            }
        },
    }
}

fn gravity(on: bool) -> Value {
    if on {
        json!([0.0, -9.81, 0.0])
    } else {
        json!([0.0, 0.0, 0.0])
    }
}

fn points(ps: &[Vector3<f64>]) -> Value {
    Value::Array(ps.iter().map(|p| json!([p.x, p.y, p.z])).collect())
}

fn two_tet(ctx: &mut Ctx, params: &Map<String, Value>) -> Value {
    ctx.check_keys(params, P, &["energy", "hetero", "young", "contact", "friction", "frames", "scale"]);
    let energy = energy(ctx, params, "neo-hookean");
    let hetero = ctx.opt_bool(params, P, "hetero", false);
    let young = ctx.opt_number(params, P, "young", 3e5);
    let contact = ctx.opt_bool(params, P, "contact", false);
    let friction = ctx.opt_number(params, P, "friction", 0.6);
    let frames = ctx.opt_index(params, P, "frames", 3);
    let s = ctx.opt_number(params, P, "scale", 0.1);
    let vertices = [
        Vector3::zeros(),
        Vector3::x() * s,
        Vector3::y() * s,
        Vector3::z() * s,
        Vector3::new(s, s, s),
    ];
    let young = if hetero {
        json!([young / 3.0, young * 10.0 / 3.0])
    } else {
        json!(young)
    };
    let mut scene = json!({
        "name": "two-tet",
        "mesh": { "vertices": points(&vertices), "elements": [[0, 1, 2, 3], [1, 2, 3, 4]] },
        "density": 1000.0,
        "material": { "energy": energy, "young": young, "poisson": 0.4 },
        "gravity": gravity(true),
        "solver": { "h": 0.01 },
        "frames": frames,
    });
    if contact {
        scene["obstacles"] = json!([{ "type": "half_space", "normal": [0.0, 1.0, 0.0], "offset": 0.0, "friction": friction }]);
        scene["initial"] = json!({ "velocity": [0.05, 0.0, 0.0] });
    } else {
        scene["dirichlet"] = json!([{ "vertex": 0 }]);
        scene["initial"] = json!({
            "vertex_velocities": [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.3, 0.0]]
        });
    }
    scene
}

/// Three-segment bar clamped at `x = 0` with a stiff middle third.
fn cantilever(ctx: &mut Ctx, params: &Map<String, Value>, name: &str, twist: f64, grav: bool, frames: usize) -> Value {
    ctx.check_keys(
        params,
        P,
        &[
            "contrast", "energy", "young", "poisson", "cells", "length", "gravity", "twist", "frames",
        ],
    );
    let contrast = ctx.opt_number(params, P, "contrast", 10.0);
    let energy = energy(ctx, params, "neo-hookean");
    let young = ctx.opt_number(params, P, "young", 3e5);
    let poisson = ctx.opt_number(params, P, "poisson", 0.4);
    let cells = match params.get("cells") {
        None => [9, 3, 3],
        Some(v) => match ctx.numbers(v, "params.cells") {
            Some(c) if c.len() == 3 && c.iter().all(|&x| x >= 1.0 && x.fract() == 0.0) => [c[0] as usize, c[1] as usize, c[2] as usize],
            _ => {
                ctx.fail("params.cells", "expected three positive integers");
                [9, 3, 3]
            }
        },
    };
    let length = ctx.opt_number(params, P, "length", 0.3);
    let grav = ctx.opt_bool(params, P, "gravity", grav);
    let twist = ctx.opt_number(params, P, "twist", twist);
    let frames = ctx.opt_index(params, P, "frames", frames);
    if contrast <= 0.0 || length <= 0.0 {
        ctx.fail(P, "contrast and length must be positive");
        return Value::Null;
    }
    let spacing = length / cells[0] as f64;
    let grid = match ingest_hex_grid(cells, spacing, 1.0) {
        Ok(g) => g,
        Err(e) => {
            ctx.fail("params.cells", e);
            return Value::Null;
        }
    };
    let regions: Vec<usize> = (0..grid.n_elements())
        .map(|e| ((3.0 * grid.element_centroid(e).x / length) as usize).min(2))
        .collect();
    let dirichlet: Vec<Value> = (0..grid.n_vertices())
        .filter(|&v| grid.rest_positions[v].x == 0.0)
        .map(|v| json!({ "vertex": v }))
        .collect();
    let axis = Vector3::new(0.0, cells[1] as f64 * spacing / 2.0, cells[2] as f64 * spacing / 2.0);
    let mut scene = json!({
        "name": name,
        "mesh": { "grid": { "dims": cells, "spacing": spacing } },
        "density": 1000.0,
        "material": {
            "energy": energy,
            "young": [young, young * contrast, young],
            "regions": regions,
            "poisson": poisson,
        },
        "dirichlet": dirichlet,
        "gravity": gravity(grav),
        "solver": { "h": 0.01 },
        "frames": frames,
    });
    if twist != 0.0 {
        // angular velocity about the bar axis growing linearly from the clamp
        let vv: Vec<Vector3<f64>> = grid
            .rest_positions
            .iter()
            .map(|p| {
                let w = Vector3::x() * (twist * p.x / length);
                w.cross(&(p - axis))
            })
            .collect();
        scene["initial"] = json!({ "vertex_velocities": points(&vv) });
    }
    scene
}

const KUHN: [[usize; 3]; 6] = [[0, 1, 2], [0, 2, 1], [1, 0, 2], [1, 2, 0], [2, 0, 1], [2, 1, 0]];

/// Kuhn-split voxel mesh over the cells for which `keep(i, j, k)` holds.
/// Only vertices used by kept cells are emitted.
pub fn voxel_mesh(
    dims: [usize; 3],
    spacing: f64,
    origin: Vector3<f64>,
    keep: impl Fn(usize, usize, usize) -> bool,
) -> (Vec<Vector3<f64>>, Vec<[usize; 4]>) {
    let [nx, ny, nz] = dims;
    let grid_index = |i: usize, j: usize, k: usize| i + (nx + 1) * (j + (ny + 1) * k);
    let mut remap = vec![usize::MAX; (nx + 1) * (ny + 1) * (nz + 1)];
    let mut positions = Vec::new();
    let mut elements = Vec::new();
    for k in 0..nz {
        for j in 0..ny {
            for i in 0..nx {
                if !keep(i, j, k) {
                    continue;
                }
                let mirror = [i % 2, j % 2, k % 2];
                let mut corner = |bits: [usize; 3]| {
                    let (a, b, c) = (i + (bits[0] ^ mirror[0]), j + (bits[1] ^ mirror[1]), k + (bits[2] ^ mirror[2]));
                    let g = grid_index(a, b, c);
                    if remap[g] == usize::MAX {
                        remap[g] = positions.len();
                        positions.push(origin + Vector3::new(a as f64, b as f64, c as f64) * spacing);
                    }
                    remap[g]
                };
                for perm in KUHN {
                    let mut bits = [0usize; 3];
                    let mut tet = [corner(bits); 4];
                    for (step, &axis) in perm.iter().enumerate() {
                        bits[axis] = 1;
                        tet[step + 1] = corner(bits);
                    }
                    elements.push(tet);
                }
            }
        }
    }
    for tet in &mut elements {
        let x0 = positions[tet[0]];
        let det = Matrix3::from_columns(&[positions[tet[1]] - x0, positions[tet[2]] - x0, positions[tet[3]] - x0]).determinant();
        if det < 0.0 {
            tet.swap(2, 3);
        }
    }
    (positions, elements)
}

/// Voxelized ball dropped onto a frictional floor, optionally split into three regions along x.
fn ball_drop(ctx: &mut Ctx, params: &Map<String, Value>) -> Value {
    ctx.check_keys(
        params,
        P,
        &[
            "radius",
            "cells",
            "height",
            "speed",
            "tangential_speed",
            "young",
            "regions",
            "contrast",
            "energy",
            "poisson",
            "friction",
            "frames",
            "h",
        ],
    );
    let radius = ctx.opt_number(params, P, "radius", 0.05);
    let cells = ctx.opt_index(params, P, "cells", 5).max(2);
    let height = ctx.opt_number(params, P, "height", 0.005);
    let speed = ctx.opt_number(params, P, "speed", 1.0);
    let tangential = ctx.opt_number(params, P, "tangential_speed", 0.0);
    let young = ctx.opt_number(params, P, "young", 1e6);
    let n_regions = ctx.opt_index(params, P, "regions", 1);
    let contrast = match params.get("contrast") {
        None => vec![1.0, 5.0, 10.0],
        Some(v) => ctx.numbers(v, "params.contrast").unwrap_or_default(),
    };
    let energy = energy(ctx, params, "corotated");
    let poisson = ctx.opt_number(params, P, "poisson", 0.3);
    let friction = ctx.opt_number(params, P, "friction", 0.3);
    let frames = ctx.opt_index(params, P, "frames", 50);
    let h = ctx.opt_number(params, P, "h", 0.01);
    if n_regions != 1 && n_regions != 3 {
        ctx.fail("params.regions", "expected 1 or 3");
    }
    if n_regions == 3 && contrast.len() != 3 {
        ctx.fail("params.contrast", "expected 3 factors");
    }
    if radius <= 0.0 {
        ctx.fail("params.radius", "must be positive");
    }
    if !ctx.errors.is_empty() {
        return Value::Null;
    }
    let spacing = 2.0 * radius / cells as f64;
    let origin = Vector3::new(-radius, height, -radius);
    let center = |i: usize| (i as f64 + 0.5) * spacing - radius;
    let (positions, elements) = voxel_mesh([cells; 3], spacing, origin, |i, j, k| {
        let (x, y, z) = (center(i), center(j), center(k));
        (x * x + y * y + z * z).sqrt() <= radius
    });
    let centroid = |tet: &[usize; 4]| tet.iter().map(|&v| positions[v]).sum::<Vector3<f64>>() / 4.0;
    let (young, regions) = if n_regions == 3 {
        let regions: Vec<usize> = elements
            .iter()
            .map(|t| (((centroid(t).x + radius) / (2.0 * radius / 3.0)) as usize).min(2))
            .collect();
        (json!(contrast.iter().map(|c| young * c).collect::<Vec<_>>()), Some(regions))
    } else {
        (json!(young), None)
    };
    let mut material = json!({ "energy": energy, "young": young, "poisson": poisson });
    if let Some(r) = regions {
        material["regions"] = json!(r);
    }
    json!({
        "name": "ball-drop",
        "mesh": { "vertices": points(&positions), "elements": elements },
        "density": 1000.0,
        "material": material,
        "obstacles": [{ "type": "half_space", "normal": [0.0, 1.0, 0.0], "offset": 0.0, "friction": friction }],
        "gravity": gravity(true),
        "initial": { "velocity": [tangential, -speed, 0.0] },
        "solver": { "h": h },
        "frames": frames,
    })
}

/// Thin sheet falling onto a fixed sphere.
fn slab_on_sphere(ctx: &mut Ctx, params: &Map<String, Value>) -> Value {
    ctx.check_keys(
        params,
        P,
        &["cells", "size", "thickness", "young", "energy", "friction", "radius", "frames"],
    );
    let cells = ctx.opt_index(params, P, "cells", 8).max(1);
    let size = ctx.opt_number(params, P, "size", 0.2);
    let thickness = ctx.opt_number(params, P, "thickness", 0.025);
    let young = ctx.opt_number(params, P, "young", 5e4);
    let energy = energy(ctx, params, "neo-hookean");
    let friction = ctx.opt_number(params, P, "friction", 0.3);
    let radius = ctx.opt_number(params, P, "radius", 0.05);
    let frames = ctx.opt_index(params, P, "frames", 40);
    let spacing = size / cells as f64;
    let layers = ((thickness / spacing).round() as usize).max(1);
    json!({
        "name": "slab-on-sphere",
        "mesh": { "grid": { "dims": [cells, layers, cells], "spacing": spacing, "origin": [-size / 2.0, radius + 0.002, -size / 2.0] } },
        "density": 1000.0,
        "material": { "energy": energy, "young": young, "poisson": 0.4 },
        "obstacles": [{ "type": "sphere", "center": [0.0, 0.0, 0.0], "radius": radius, "friction": friction }],
        "gravity": gravity(true),
        "solver": { "h": 0.01 },
        "frames": frames,
    })
}

/// Cube resting on a frictional floor under gravity.
fn resting_box(ctx: &mut Ctx, params: &Map<String, Value>) -> Value {
    ctx.check_keys(params, P, &["cells", "size", "young", "energy", "friction", "frames", "velocity"]);
    let cells = ctx.opt_index(params, P, "cells", 3).max(1);
    let size = ctx.opt_number(params, P, "size", 0.1);
    let young = ctx.opt_number(params, P, "young", 1e5);
    let energy = energy(ctx, params, "neo-hookean");
    let friction = ctx.opt_number(params, P, "friction", 0.5);
    let frames = ctx.opt_index(params, P, "frames", 30);
    let velocity = ctx.opt_vec3(params, P, "velocity", Vector3::zeros());
    json!({
        "name": "resting-box",
        "mesh": { "grid": { "dims": [cells, cells, cells], "spacing": size / cells as f64, "origin": [-size / 2.0, 0.0, -size / 2.0] } },
        "density": 1000.0,
        "material": { "energy": energy, "young": young, "poisson": 0.4 },
        "obstacles": [{ "type": "half_space", "normal": [0.0, 1.0, 0.0], "offset": 0.0, "friction": friction }],
        "gravity": gravity(true),
        "initial": { "velocity": [velocity.x, velocity.y, velocity.z] },
        "solver": { "h": 0.01 },
        "frames": frames,
    })
}
