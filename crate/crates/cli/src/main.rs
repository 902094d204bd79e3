use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use heterodyn_cli::commands::{factor_stats, gradcheck_to_file, identify_to_dir, simulate, GradVariable};
use heterodyn_cli::inverse::{parse_problem, DesignVariable};
use heterodyn_cli::scene::load_scene;
use heterodyn_cli::{CliError, Result};

#[derive(Parser)]
#[command(name = "heterodyn", version, about = "Differentiable projective dynamics for heterogeneous solids")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scene and write trajectory.jsonl, metrics.csv and summary.json.
    Simulate {
        scene: PathBuf,
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
    },
    /// Compare adjoint gradients against central finite differences.
    Gradcheck {
        scene: PathBuf,
        /// Comma-separated subset of v0, q0, E, f_ext.
        #[arg(long, default_value = "v0")]
        vars: String,
        #[arg(short, long, default_value = "report.json")]
        out: PathBuf,
    },
    /// Recover design variables from a synthetic reference or target.
    Identify {
        problem: PathBuf,
        #[arg(short, long, default_value = "out")]
        out: PathBuf,
    },
    /// Print factorization statistics of the scene's system matrix.
    FactorStats { scene: PathBuf },
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate { scene, out } => {
            let scene = load_scene(&scene)?;
            let s = simulate(&scene, &out)?;
            println!(
                "{}: {} frames, {} converged, {} factorization(s), max penetration {:.3e} m",
                s.scene,
                s.frames,
                s.converged.iter().filter(|&&c| c).count(),
                s.factorizations,
                s.max_penetration
            );
            if let Some(r) = s.soft_stiff_strain_ratio {
                println!("soft/stiff strain ratio {r:.3}");
            }
        }
        Command::Gradcheck { scene, vars, out } => {
            let scene = load_scene(&scene)?;
            let vars = GradVariable::parse_list(&vars)?;
            let r = gradcheck_to_file(&scene, &vars, &out)?;
            for v in &r.variables {
                println!(
                    "{:?}: {} entries, max relative error {:.3e}",
                    v.variable,
                    v.entries.len(),
                    v.max_rel_error
                );
            }
        }
        Command::Identify { problem, out } => {
            let text = std::fs::read_to_string(&problem).map_err(|e| CliError::io(&problem, e))?;
            let problem = parse_problem(&text)?;
            let r = identify_to_dir(&problem, &out)?;
            println!("{:?} after {} evaluations, loss {:.3e}", r.termination, r.evaluations, r.loss);
            let v = &r.recovered;
            for var in &r.variables {
                let value = match var {
                    DesignVariable::Young => format!("{:?}", v.young),
                    DesignVariable::Position => format!("{:?}", v.position),
                    DesignVariable::Orientation => format!("{:?}", v.orientation),
                    DesignVariable::Velocity => format!("{:?}", v.velocity),
                    DesignVariable::Force => format!("{:?}", v.force),
                };
                println!("  {} = {value}", var.name());
            }
        }
        Command::FactorStats { scene } => {
            let scene = load_scene(&scene)?;
            let s = factor_stats(&scene)?;
            println!("{}", serde_json::to_string_pretty(&s)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
