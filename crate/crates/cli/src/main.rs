use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::{json, Value};

use dota::harness::{self, ExperimentConfig, Method};
use dota::io::{self, AnyBundle, AnyMatrix, Bundle};
use dota::mpo::preset_factors;
use dota::{dota_init, qdota_init, DenseTensor, DotaError, Exec, MpoShape, Scalar};

/// Decompose weight matrices into MPO core bundles, rebuild them, and run the
/// synthetic initialization ablation.
#[derive(Parser)]
#[command(name = "dota", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose matrix files into core bundles.
    Decompose(DecomposeArgs),
    /// Rebuild the full matrix stored in a bundle.
    Reconstruct(ReconstructArgs),
    /// Run the ablation described by a JSON config and write CSV logs.
    Train(TrainArgs),
    /// Write a seeded Gaussian matrix file.
    Random(RandomArgs),
}

#[derive(Args)]
struct DecomposeArgs {
    /// Input matrix file; repeat to decompose several in parallel.
    #[arg(long, required = true)]
    input: Vec<PathBuf>,
    /// Comma-separated input factors, e.g. 4,4,8,8,4. Defaults to the preset
    /// for the row count.
    #[arg(long, value_delimiter = ',')]
    shape_in: Option<Vec<usize>>,
    /// Comma-separated output factors. Defaults to the preset for the column
    /// count.
    #[arg(long, value_delimiter = ',')]
    shape_out: Option<Vec<usize>>,
    /// Bond-rank threshold R.
    #[arg(long, default_value_t = 16, value_parser = clap::value_parser!(u64).range(1..))]
    rank: u64,
    /// Store the residual as NF4 codes plus block scales.
    #[arg(long)]
    quantize_residual: bool,
    #[arg(long, default_value_t = 64, value_parser = clap::value_parser!(u64).range(1..))]
    block_size: u64,
    /// Output bundle path, one per --input, in the same order.
    #[arg(long, required = true)]
    out: Vec<PathBuf>,
}

#[derive(Args)]
struct ReconstructArgs {
    #[arg(long)]
    bundle: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    config: PathBuf,
    /// Directory receiving runs/*.csv, summary.csv and rank_sweep.csv.
    #[arg(long, default_value = "dota-runs")]
    out_dir: PathBuf,
    /// Run the (seed, method) grid on one thread.
    #[arg(long)]
    sequential: bool,
}

#[derive(Clone, Copy, ValueEnum)]
enum DtypeArg {
    F32,
    F64,
}

#[derive(Args)]
struct RandomArgs {
    #[arg(long)]
    rows: usize,
    #[arg(long)]
    cols: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1.0)]
    std: f64,
    #[arg(long, value_enum, default_value = "f32")]
    dtype: DtypeArg,
    #[arg(long)]
    out: PathBuf,
}

/// A failure carrying its exit code: 1 for runtime errors, 2 for usage.
struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn usage(message: impl Into<String>) -> Self {
        Self { code: 2, message: message.into() }
    }
}

impl From<DotaError> for Failure {
    fn from(e: DotaError) -> Self {
        let code = match e {
            DotaError::Config(_) | DotaError::Parameter(_) => 2,
            _ => 1,
        };
        Self { code, message: e.to_string() }
    }
}

type CmdResult = Result<Value, Failure>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Decompose(a) => decompose(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Train(a) => train(a),
        Command::Random(a) => random(a),
    };
    match result {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn resolve_shape(args: &DecomposeArgs, rows: usize, cols: usize) -> Result<MpoShape, Failure> {
    let pick = |given: &Option<Vec<usize>>, dim: usize, flag: &str| {
        given.clone().or_else(|| preset_factors(dim).map(<[usize]>::to_vec)).ok_or_else(|| {
            Failure::usage(format!("no preset factorization for dimension {dim}; pass {flag}"))
        })
    };
    let fin = pick(&args.shape_in, rows, "--shape-in")?;
    let fout = pick(&args.shape_out, cols, "--shape-out")?;
    let shape = MpoShape::new(fin, fout).map_err(|e| Failure::usage(e.to_string()))?;
    if (shape.rows(), shape.cols()) != (rows, cols) {
        return Err(Failure::usage(format!(
            "factors multiply to {}x{} but the matrix is {rows}x{cols}",
            shape.rows(),
            shape.cols()
        )));
    }
    Ok(shape)
}

fn decompose_one<T: Scalar>(w: &DenseTensor<T>, shape: &MpoShape, args: &DecomposeArgs, out: &Path) -> CmdResult {
    let rank = Some(args.rank as usize);
    let adapter = if args.quantize_residual {
        qdota_init(w, shape, rank, args.block_size as usize)?
    } else {
        dota_init(w, shape, rank)?
    };
    let w64 = w.cast::<f64>();
    let tensor = adapter.tensor_weight()?.cast::<f64>();
    let norm = w64.frobenius_norm();
    let err = w64.sub(&tensor)?.frobenius_norm();
    let rel = if norm > 0.0 { err / norm } else { err };
    io::write_bundle(out, &Bundle::from_adapter(&adapter))?;
    Ok(json!({
        "output": out,
        "rows": shape.rows(),
        "cols": shape.cols(),
        "dtype": T::DTYPE,
        "in_factors": shape.in_factors(),
        "out_factors": shape.out_factors(),
        "ranks": adapter.cores().ranks(),
        "rho": adapter.trainable_params(),
        "frozen": adapter.frozen_params(),
        "relative_error": rel,
        "residual_quantized": args.quantize_residual,
    }))
}

fn decompose(args: DecomposeArgs) -> CmdResult {
    if args.input.len() != args.out.len() {
        return Err(Failure::usage(format!(
            "{} --input files but {} --out paths",
            args.input.len(),
            args.out.len()
        )));
    }
    let jobs: Vec<(&PathBuf, &PathBuf)> = args.input.iter().zip(&args.out).collect();
    let results = Exec::default().map(jobs, |(input, out)| -> CmdResult {
        let m = io::read_matrix(input).map_err(|e| Failure {
            code: 1,
            message: format!("{}: {e}", input.display()),
        })?;
        let (rows, cols) = m.dims();
        let shape = resolve_shape(&args, rows, cols)?;
        let mut summary = match &m {
            AnyMatrix::F32(w) => decompose_one(w, &shape, &args, out),
            AnyMatrix::F64(w) => decompose_one(w, &shape, &args, out),
        }
        .map_err(|f| Failure {
            message: format!("{}: {}", input.display(), f.message),
            ..f
        })?;
        summary["input"] = json!(input);
        eprintln!("decomposed {} -> {}", input.display(), out.display());
        Ok(summary)
    });
    let summaries = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    Ok(if summaries.len() == 1 {
        summaries.into_iter().next().unwrap()
    } else {
        Value::Array(summaries)
    })
}

fn reconstruct(args: ReconstructArgs) -> CmdResult {
    let bundle = io::read_bundle(&args.bundle)
        .map_err(|e| Failure { code: 1, message: format!("{}: {e}", args.bundle.display()) })?;
    let quantized = match &bundle {
        AnyBundle::F32(b) => b.header().residual_quantized,
        AnyBundle::F64(b) => b.header().residual_quantized,
    };
    let m = bundle.reconstruct()?;
    match &m {
        AnyMatrix::F32(w) => io::write_matrix(&args.out, w)?,
        AnyMatrix::F64(w) => io::write_matrix(&args.out, w)?,
    }
    let (rows, cols) = m.dims();
    Ok(json!({
        "output": args.out,
        "rows": rows,
        "cols": cols,
        "dtype": m.dtype(),
        "residual_quantized": quantized,
    }))
}

fn train(args: TrainArgs) -> CmdResult {
    let text = fs::read_to_string(&args.config)
        .map_err(|e| Failure { code: 1, message: format!("{}: {e}", args.config.display()) })?;
    let config = ExperimentConfig::from_json(&text)?;
    let exec = if args.sequential { Exec::Sequential } else { Exec::default() };
    eprintln!(
        "training {} method(s) x {} seed(s), {} steps",
        config.methods.len(),
        config.seeds.len(),
        config.steps
    );
    let ablation = harness::ablate_with(&config, exec)?;
    let sweep = if config.rank_sweep.is_empty() {
        None
    } else {
        Some(harness::rank_sweep(&config, &config.rank_sweep, exec)?)
    };
    let written = harness::write_outputs(&ablation, sweep.as_deref(), &args.out_dir)?;
    for log in ablation.logs.iter().filter(|l| l.diverged_at.is_some()) {
        eprintln!("warning: {} seed {} diverged at step {}", log.method, log.seed, log.diverged_at.unwrap());
    }
    let finals: serde_json::Map<String, Value> = config
        .methods
        .iter()
        .map(|&m: &Method| {
            let last = ablation.summary.iter().rfind(|r| r.method == m);
            (m.to_string(), json!(last.map(|r| r.mean_eval_loss)))
        })
        .collect();
    Ok(json!({
        "out_dir": args.out_dir,
        "runs": ablation.logs.len(),
        "files": written.len(),
        "mean_final_eval_loss": finals,
    }))
}

fn random(args: RandomArgs) -> CmdResult {
    if args.rows == 0 || args.cols == 0 || !(args.std.is_finite() && args.std >= 0.0) {
        return Err(Failure::usage("rows and cols must be positive and std finite and >= 0"));
    }
    let m = harness::seeded_matrix(args.rows, args.cols, args.std, args.seed);
    match args.dtype {
        DtypeArg::F32 => io::write_matrix(&args.out, &m.cast::<f32>())?,
        DtypeArg::F64 => io::write_matrix(&args.out, &m)?,
    }
    Ok(json!({ "output": args.out, "rows": args.rows, "cols": args.cols, "seed": args.seed }))
}
