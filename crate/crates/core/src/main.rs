//! Command line for certifying, simulating, and inspecting linear loops
//! closed through set-valued step nonlinearities.
//!
//! Exit codes are the machine contract: 0 for success or a passing check,
//! 2 for a negative determination (not certified, check failed, no common
//! quadratic), 64 for usage errors, 65 for malformed data files, 1 for
//! internal failures. Stdout is informational.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Parser, Subcommand, ValueEnum};
use nalgebra::DVector;

use stepcert::certify::{
    certify_ges, check_common_quadratic, CertifyOptions, CertifyOutcome, QuadOutcome,
};
use stepcert::lmi::LmiData;
use stepcert::lyapunov::{GridBounds, LyapunovEvaluator};
use stepcert::model::{ternary_components, SystemConfig, SystemData};
use stepcert::sdp::{encode, verify, Certificate};
use stepcert::sdpa::export_sdpa;
use stepcert::sim::{attach_lyapunov, simulate, SelectionPolicy};

const EXIT_FAIL: u8 = 2;
const EXIT_USAGE: u8 = 64;
const EXIT_DATA: u8 = 65;

#[derive(Parser)]
#[command(
    name = "stepcert",
    version,
    about = "Exponential stability certificates for step-nonlinear feedback loops"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Search for a stability certificate and verify it
    Certify {
        /// System description (JSON)
        config: PathBuf,
        /// Floor under the certified rates
        #[arg(long)]
        eps: Option<f64>,
        /// Write the certificate here on success
        #[arg(long)]
        out: Option<PathBuf>,
        /// Export the feasibility program in sparse SDPA format
        #[arg(long)]
        sdpa: Option<PathBuf>,
    },
    /// Run the closed loop and write the trajectory as CSV
    Simulate {
        /// System description (JSON)
        config: PathBuf,
        /// Initial state, comma separated
        #[arg(long, allow_hyphen_values = true)]
        x0: String,
        /// Number of steps
        #[arg(long)]
        steps: usize,
        /// How selections resolve on the switching surfaces
        #[arg(long, value_enum, default_value_t = PolicyArg::Det)]
        policy: PolicyArg,
        /// Seed for the random policy
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Certificate whose Lyapunov values annotate the run
        #[arg(long)]
        cert: Option<PathBuf>,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample the certified Lyapunov function on a grid
    Levelset {
        /// System description (JSON)
        config: PathBuf,
        /// Certificate (JSON)
        #[arg(long)]
        cert: PathBuf,
        /// Rectangle x1min,x1max,x2min,x2max
        #[arg(long = "box", allow_hyphen_values = true)]
        bounds: String,
        /// Grid resolution NX,NY
        #[arg(long)]
        res: String,
        /// Output CSV path
        #[arg(long)]
        out: PathBuf,
    },
    /// Re-verify a certificate against a system
    Check {
        /// System description (JSON)
        config: PathBuf,
        /// Certificate (JSON)
        #[arg(long)]
        cert: PathBuf,
        /// Verification tolerance
        #[arg(long, default_value_t = 1e-7)]
        tol: f64,
    },
    /// Test whether one quadratic function certifies both the open-loop
    /// and the closed-loop linear map
    Quadcheck {
        /// System description (JSON)
        config: PathBuf,
    },
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum PolicyArg {
    /// Strict single-valued step
    Det,
    /// Uniform draw on free components
    Rand,
    /// Successor-norm maximizing selection
    Worst,
}

enum CliError {
    Usage(String),
    Data(String),
    Internal(stepcert::Error),
}

impl From<stepcert::Error> for CliError {
    fn from(e: stepcert::Error) -> Self {
        CliError::Internal(e)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let ok = matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion);
            let _ = e.print();
            return if ok {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(EXIT_USAGE)
            };
        }
    };
    match run(cli) {
        Ok(code) => code,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Err(CliError::Data(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_DATA)
        }
        Err(CliError::Internal(e)) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

fn run(cli: Cli) -> Result<ExitCode, CliError> {
    match cli.cmd {
        Cmd::Certify {
            config,
            eps,
            out,
            sdpa,
        } => cmd_certify(&config, eps, out.as_deref(), sdpa.as_deref()),
        Cmd::Simulate {
            config,
            x0,
            steps,
            policy,
            seed,
            cert,
            out,
        } => cmd_simulate(&config, &x0, steps, policy, seed, cert.as_deref(), &out),
        Cmd::Levelset {
            config,
            cert,
            bounds,
            res,
            out,
        } => cmd_levelset(&config, &cert, &bounds, &res, &out),
        Cmd::Check { config, cert, tol } => cmd_check(&config, &cert, tol),
        Cmd::Quadcheck { config } => cmd_quadcheck(&config),
    }
}

fn load_system(path: &std::path::Path) -> Result<(SystemData, CertifyOptions), CliError> {
    let cfg = SystemConfig::from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let sys = cfg
        .to_system()
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut opts = CertifyOptions::default();
    if let Some(solver) = &cfg.solver {
        opts = opts.with_config(solver);
    }
    Ok((sys, opts))
}

fn load_certificate(path: &std::path::Path) -> Result<Certificate, CliError> {
    Certificate::from_path(path)
        .map_err(|e| CliError::Data(format!("{}: {e}", path.display())))
}

fn parse_floats(flag: &str, text: &str, want: usize) -> Result<Vec<f64>, CliError> {
    let vals: Result<Vec<f64>, _> = text.split(',').map(|t| t.trim().parse()).collect();
    let vals: Vec<f64> =
        vals.map_err(|e| CliError::Usage(format!("--{flag} {text:?}: {e}")))?;
    if vals.len() != want {
        return Err(CliError::Usage(format!(
            "--{flag} needs {want} comma-separated values, got {}",
            vals.len()
        )));
    }
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Usage(format!("--{flag} has a non-finite value")));
    }
    Ok(vals)
}

fn cmd_certify(
    config: &std::path::Path,
    eps: Option<f64>,
    out: Option<&std::path::Path>,
    sdpa: Option<&std::path::Path>,
) -> Result<ExitCode, CliError> {
    let (sys, mut opts) = load_system(config)?;
    if let Some(e) = eps {
        if !e.is_finite() || e <= 0.0 {
            return Err(CliError::Usage(format!("--eps must be positive, got {e}")));
        }
        opts.eps = e;
    }

    if let Some(path) = sdpa {
        let lmi = LmiData::build(&sys)?;
        let prob = encode(&sys, &lmi, opts.eps)?;
        export_sdpa(&prob, path)?;
        println!("wrote feasibility program to {}", path.display());
    }

    match certify_ges(&sys, &opts)? {
        CertifyOutcome::Certified(cert) => {
            println!("certified: yes");
            println!(
                "rates: c1 = {:e}, c2 = {:e}, c3 = {:e}",
                cert.c[0], cert.c[1], cert.c[2]
            );
            println!(
                "residuals: {:e}, {:e}, {:e}",
                cert.residuals[0], cert.residuals[1], cert.residuals[2]
            );
            if let Some(path) = out {
                cert.write_path(path)?;
                println!("wrote certificate to {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        CertifyOutcome::NotCertified { diagnostic } => {
            println!("certified: no");
            println!("{diagnostic}");
            Ok(ExitCode::from(EXIT_FAIL))
        }
    }
}

fn cmd_simulate(
    config: &std::path::Path,
    x0_text: &str,
    steps: usize,
    policy: PolicyArg,
    seed: u64,
    cert: Option<&std::path::Path>,
    out: &std::path::Path,
) -> Result<ExitCode, CliError> {
    let (sys, _) = load_system(config)?;
    let x0 = DVector::from_vec(parse_floats("x0", x0_text, sys.n_p())?);
    let policy = match policy {
        PolicyArg::Det => SelectionPolicy::Deterministic,
        PolicyArg::Rand => SelectionPolicy::UniformRandom { seed },
        PolicyArg::Worst => SelectionPolicy::WorstCase,
    };
    let mut traj = simulate(&sys, &x0, steps, &policy)?;
    if let Some(path) = cert {
        let cert = load_certificate(path)?;
        let ev = LyapunovEvaluator::new(&sys, &cert.p_matrix()?)?;
        attach_lyapunov(&mut traj, &ev)?;
    }
    let file = File::create(out).map_err(stepcert::Error::from)?;
    let mut w = BufWriter::new(file);
    traj.write_csv(&mut w).map_err(stepcert::Error::from)?;
    w.flush().map_err(stepcert::Error::from)?;
    println!(
        "wrote {} states to {}",
        traj.states.len(),
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_levelset(
    config: &std::path::Path,
    cert: &std::path::Path,
    bounds_text: &str,
    res_text: &str,
    out: &std::path::Path,
) -> Result<ExitCode, CliError> {
    let (sys, _) = load_system(config)?;
    let cert = load_certificate(cert)?;
    let b = parse_floats("box", bounds_text, 4)?;
    if b[0] > b[1] || b[2] > b[3] {
        return Err(CliError::Usage(
            "--box needs x1min <= x1max and x2min <= x2max".into(),
        ));
    }
    let res: Result<Vec<usize>, _> = res_text.split(',').map(|t| t.trim().parse()).collect();
    let res = res.map_err(|e| CliError::Usage(format!("--res {res_text:?}: {e}")))?;
    if res.len() != 2 || res.contains(&0) {
        return Err(CliError::Usage(
            "--res needs two positive integers NX,NY".into(),
        ));
    }
    let ev = LyapunovEvaluator::new(&sys, &cert.p_matrix()?)?;
    let grid = ev.level_grid(
        &GridBounds {
            x1_min: b[0],
            x1_max: b[1],
            x2_min: b[2],
            x2_max: b[3],
        },
        (res[0], res[1]),
    )?;
    let file = File::create(out).map_err(stepcert::Error::from)?;
    let mut w = BufWriter::new(file);
    grid.write_csv(&mut w).map_err(stepcert::Error::from)?;
    w.flush().map_err(stepcert::Error::from)?;
    println!(
        "wrote {}x{} grid to {}",
        grid.nx,
        grid.ny,
        out.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn cmd_check(
    config: &std::path::Path,
    cert_path: &std::path::Path,
    tol: f64,
) -> Result<ExitCode, CliError> {
    let (sys, opts) = load_system(config)?;
    let cert = load_certificate(cert_path)?;
    let lmi = match opts.rank_tol {
        Some(t) => LmiData::build_with_rank_tol(&sys, t)?,
        None => LmiData::build(&sys)?,
    };
    // A certificate that does not even fit the system is a failed check,
    // not a tool failure.
    let report = match verify(&cert, &sys, &lmi, tol) {
        Ok(r) => r,
        Err(
            e @ (stepcert::Error::DimensionMismatch(_)
            | stepcert::Error::NotSymmetric { .. }
            | stepcert::Error::NonFinite(_)),
        ) => {
            println!("FAIL: {e}");
            return Ok(ExitCode::from(EXIT_FAIL));
        }
        Err(e) => return Err(e.into()),
    };
    println!(
        "max eigenvalues: {:e}, {:e}, {:e}",
        report.lmi_max_eig[0], report.lmi_max_eig[1], report.lmi_max_eig[2]
    );
    println!(
        "multiplier minima: {:e}, {:e}, {:e}",
        report.m_min_entry[0], report.m_min_entry[1], report.m_min_entry[2]
    );
    println!(
        "rate margins: {:e}, {:e}, {:e}",
        report.c_margins[0], report.c_margins[1], report.c_margins[2]
    );
    if report.pass {
        println!("PASS");
        Ok(ExitCode::SUCCESS)
    } else {
        println!("FAIL");
        Ok(ExitCode::from(EXIT_FAIL))
    }
}

fn cmd_quadcheck(config: &std::path::Path) -> Result<ExitCode, CliError> {
    let (sys, _) = load_system(config)?;
    // For the two-channel opposite-sign embedding the effective engaged
    // gain is the underlying single input pair; otherwise all steps on.
    let acl = match ternary_components(&sys) {
        Some((b_col, k_row)) => {
            println!("embedded single-input loop detected");
            &sys.a + b_col * k_row
        }
        None => &sys.a + &sys.b * &sys.delta * &sys.k,
    };
    match check_common_quadratic(&sys.a, &acl)? {
        QuadOutcome::Feasible(q) => {
            println!("common quadratic: yes");
            let n = q.nrows();
            for r in 0..n {
                let row: Vec<String> = (0..n).map(|c| format!("{:+.6e}", q[(r, c)])).collect();
                println!("  [{}]", row.join(", "));
            }
            Ok(ExitCode::SUCCESS)
        }
        QuadOutcome::Infeasible { diagnostic } => {
            println!("common quadratic: no");
            println!("{diagnostic}");
            Ok(ExitCode::from(EXIT_FAIL))
        }
    }
}
