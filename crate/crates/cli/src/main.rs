//! Command-line driver: dataset generation, defect computation, LLL
//! reduction, unimodular factorization, policy training and evaluation.
//!
//! Exit codes: 0 success, 1 usage error, 2 data error, 3 verification
//! failure. All randomness is controlled by --seed (or the LATRED_SEED
//! environment variable), so identical invocations produce byte-identical
//! output files. Long-running commands emit JSON progress records on stderr.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use latred::harness::{
    evaluate, generate_basis, train, worst_p_analysis, DatasetSpec, TrainConfig,
};
use latred::io::{
    checkpoint_from_params, dataset_header_for, load_checkpoint, params_from_checkpoint,
    read_dataset, save_checkpoint, write_curve_csv_file, write_dataset_file, write_report_file,
    FactorizationJson, IntMatrixJson, MatrixJson, ReportJson,
};
use latred::lattice::{log_defect, orthogonality_defect, Basis};
use latred::lll::{is_siegel_reduced, lll_reduce, LLLParams};
use latred::policy::{MoveFill, PolicyConfig};
use latred::unimodular::{factor, verify_factorization};
use latred::Error as CoreError;

const SEED_ENV: &str = "LATRED_SEED";

#[derive(Parser)]
#[command(name = "latred", version, about = "Lattice reduction workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a JSON-lines dataset of random invertible bases
    Gen(GenArgs),
    /// Compute orthogonality defects for a dataset
    Defect(DefectArgs),
    /// LLL-reduce every basis in a dataset, with unimodular certificates
    Lll(LllArgs),
    /// Factor a det +1 integer matrix into extended Gauss moves
    Factor(FactorArgs),
    /// Train the equivariant reduction policy
    Train(TrainArgs),
    /// Evaluate a trained policy against LLL and the no-reduction baseline
    Eval(EvalArgs),
}

#[derive(Args)]
struct GenArgs {
    /// Lattice dimension (n >= 2)
    #[arg(long)]
    dim: usize,
    /// Number of matrices
    #[arg(long)]
    count: usize,
    /// RNG seed (falls back to LATRED_SEED, then 0)
    #[arg(long)]
    seed: Option<u64>,
    /// Output dataset path
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DefectArgs {
    /// Input dataset path
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Output JSON-lines path (stdout when omitted)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct LllArgs {
    /// Input dataset path
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Output JSON-lines path
    #[arg(long)]
    out: PathBuf,
    /// Lovász constant in (1/4, 1]
    #[arg(long, default_value_t = 0.75)]
    lovasz_delta: f64,
}

#[derive(Args)]
struct FactorArgs {
    /// Integer matrix JSON file ({"n", "rows": [["1", ...], ...]})
    #[arg(long, value_name = "FILE")]
    input: PathBuf,
    /// Output factorization path
    #[arg(long)]
    out: PathBuf,
    /// Re-verify the exact move product against the input
    #[arg(long)]
    verify: bool,
}

#[derive(Args)]
struct TrainArgs {
    /// Lattice dimension (n >= 2)
    #[arg(long)]
    dim: usize,
    /// Training epochs
    #[arg(long, default_value_t = 200)]
    epochs: usize,
    /// Moves per rollout (defaults to the dimension)
    #[arg(long)]
    k: Option<usize>,
    /// RNG seed (falls back to LATRED_SEED, then 0)
    #[arg(long)]
    seed: Option<u64>,
    /// Fresh training bases per epoch
    #[arg(long, default_value_t = 1000)]
    train_per_epoch: usize,
    /// Frozen test-set size
    #[arg(long, default_value_t = 4000)]
    test_count: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    /// Minibatch size per optimizer step
    #[arg(long, default_value_t = 50)]
    minibatch: usize,
    /// Gumbel-Softmax temperature
    #[arg(long, default_value_t = 1.0)]
    temperature: f64,
    /// Move population: row-col or single-entry
    #[arg(long, default_value = "row-col")]
    move_fill: String,
    /// Message-passing layers
    #[arg(long, default_value_t = 3)]
    layers: usize,
    /// Hidden width
    #[arg(long, default_value_t = 32)]
    hidden: usize,
    /// Test-set evaluation cadence in epochs (0 = only at the end)
    #[arg(long, default_value_t = 50)]
    eval_every: usize,
    /// Checkpoint output path
    #[arg(long)]
    out_model: PathBuf,
    /// Training-curve CSV output path
    #[arg(long)]
    out_curve: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    /// Checkpoint path
    #[arg(long, value_name = "FILE")]
    model: PathBuf,
    /// Test dataset path
    #[arg(long, value_name = "FILE")]
    test: PathBuf,
    /// Moves per rollout (defaults to the dataset dimension)
    #[arg(long)]
    k: Option<usize>,
    /// Worst-subset fraction
    #[arg(long, default_value_t = 0.2)]
    p: f64,
    /// RNG seed for policy sampling (falls back to LATRED_SEED, then 0)
    #[arg(long)]
    seed: Option<u64>,
    /// Report output path
    #[arg(long)]
    out_report: PathBuf,
}

enum CliError {
    Usage(String),
    Data(String),
    Verification(String),
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Verification(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Data(m) | CliError::Verification(m) => m,
        }
    }
}

impl From<CoreError> for CliError {
    fn from(e: CoreError) -> Self {
        match e {
            CoreError::InvalidParameter(_) => CliError::Usage(e.to_string()),
            other => CliError::Data(other.to_string()),
        }
    }
}

fn resolve_seed(flag: Option<u64>) -> Result<u64, CliError> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v
            .parse()
            .map_err(|_| CliError::Usage(format!("{SEED_ENV} must be an unsigned integer, got {v:?}"))),
        Err(_) => Ok(0),
    }
}

fn progress(record: serde_json::Value) {
    eprintln!("{record}");
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Gen(args) => cmd_gen(args),
        Command::Defect(args) => cmd_defect(args),
        Command::Lll(args) => cmd_lll(args),
        Command::Factor(args) => cmd_factor(args),
        Command::Train(args) => cmd_train(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            ExitCode::from(e.code())
        }
    }
}

fn cmd_gen(args: GenArgs) -> Result<(), CliError> {
    if args.dim < 2 {
        return Err(CliError::Usage(format!("--dim must be at least 2, got {}", args.dim)));
    }
    let seed = resolve_seed(args.seed)?;
    let bases: Vec<Basis> =
        (0..args.count).map(|i| generate_basis(args.dim, seed, i as u64)).collect();
    let spec = DatasetSpec { n: args.dim, train_per_epoch: 0, test_count: 0, seed };
    let header = dataset_header_for(&spec, args.count);
    write_dataset_file(&args.out, &header, &bases)?;
    progress(serde_json::json!({
        "event": "generated", "dim": args.dim, "count": args.count,
        "seed": seed, "out": args.out
    }));
    Ok(())
}

fn cmd_defect(args: DefectArgs) -> Result<(), CliError> {
    let (header, bases) = read_dataset(&args.input)?;
    let mut lines = Vec::with_capacity(bases.len() + 1);
    lines.push(serde_json::to_string(&serde_json::json!({
        "n": header.n, "count": bases.len()
    }))
    .expect("json"));
    for (idx, b) in bases.iter().enumerate() {
        lines.push(
            serde_json::to_string(&serde_json::json!({
                "index": idx,
                "defect": orthogonality_defect(b),
                "log_defect": log_defect(b),
            }))
            .expect("json"),
        );
    }
    let text = lines.join("\n") + "\n";
    match &args.out {
        Some(path) => std::fs::write(path, text).map_err(|e| CliError::Data(e.to_string()))?,
        None => print!("{text}"),
    }
    Ok(())
}

fn cmd_lll(args: LllArgs) -> Result<(), CliError> {
    let params = LLLParams::with_delta(args.lovasz_delta)?;
    let (header, bases) = read_dataset(&args.input)?;
    let mut out = String::new();
    out.push_str(
        &serde_json::to_string(&serde_json::json!({
            "n": header.n, "count": bases.len(), "lovasz_delta": args.lovasz_delta
        }))
        .expect("json"),
    );
    out.push('\n');
    for (idx, basis) in bases.iter().enumerate() {
        let reduced = lll_reduce(basis, &params)?;
        let report = is_siegel_reduced(&reduced.basis, &params)?;
        let record = serde_json::json!({
            "index": idx,
            "basis": MatrixJson::from_mat(reduced.basis.mat()),
            "transform": IntMatrixJson::from_intmat(reduced.transform.mat()),
            "defect_before": orthogonality_defect(basis),
            "defect_after": orthogonality_defect(&reduced.basis),
            "siegel_reduced": report.reduced,
            "violations": report.violations,
            "swaps": reduced.swaps,
            "size_reductions": reduced.size_reductions,
        });
        out.push_str(&serde_json::to_string(&record).expect("json"));
        out.push('\n');
    }
    std::fs::write(&args.out, out).map_err(|e| CliError::Data(e.to_string()))?;
    progress(serde_json::json!({
        "event": "reduced", "count": bases.len(), "out": args.out
    }));
    Ok(())
}

fn cmd_factor(args: FactorArgs) -> Result<(), CliError> {
    let text = std::fs::read_to_string(&args.input).map_err(|e| CliError::Data(e.to_string()))?;
    let mj: IntMatrixJson = serde_json::from_str(&text)
        .map_err(|e| CliError::Data(format!("bad integer matrix file: {e}")))?;
    let q = mj.to_unimodular()?;
    if q.det() == -1 {
        return Err(CliError::Data(
            "determinant is -1: factor covers SL_n only; negate one column first \
             (the factor_with_sign helper wraps Q*diag(1,...,1,-1) and reports the flip)"
                .into(),
        ));
    }
    let f = factor(&q)?;
    if args.verify && !verify_factorization(&f) {
        return Err(CliError::Verification(
            "factorization product does not reproduce the input matrix".into(),
        ));
    }
    let fj = FactorizationJson::from_factorization(&f);
    let body = serde_json::to_string_pretty(&fj).expect("json");
    std::fs::write(&args.out, body + "\n").map_err(|e| CliError::Data(e.to_string()))?;
    progress(serde_json::json!({
        "event": "factored",
        "n": q.n(),
        "moves": f.moves.len(),
        "induction_moves": f.induction_moves,
        "base_moves": f.base_moves,
        "verified": args.verify,
    }));
    Ok(())
}

fn parse_move_fill(s: &str) -> Result<MoveFill, CliError> {
    match s {
        "row-col" => Ok(MoveFill::RowCol),
        "single-entry" => Ok(MoveFill::SingleEntry),
        other => Err(CliError::Usage(format!(
            "--move-fill must be row-col or single-entry, got {other:?}"
        ))),
    }
}

fn cmd_train(args: TrainArgs) -> Result<(), CliError> {
    if args.dim < 2 {
        return Err(CliError::Usage(format!("--dim must be at least 2, got {}", args.dim)));
    }
    let seed = resolve_seed(args.seed)?;
    let spec = DatasetSpec {
        n: args.dim,
        train_per_epoch: args.train_per_epoch,
        test_count: args.test_count,
        seed,
    };
    let mut cfg = TrainConfig::new(seed);
    cfg.epochs = args.epochs;
    cfg.k = args.k;
    cfg.learning_rate = args.lr;
    cfg.minibatch = args.minibatch;
    cfg.eval_every = args.eval_every;
    cfg.policy = PolicyConfig {
        layers: args.layers,
        hidden: args.hidden,
        move_fill: parse_move_fill(&args.move_fill)?,
        gumbel_temperature: args.temperature,
    };
    let outcome = train(&spec, &cfg, &mut |p| {
        progress(serde_json::json!({
            "event": "epoch",
            "epoch": p.epoch,
            "epochs": p.epochs,
            "train_loss": p.train_loss,
            "test_mean": p.test_mean,
            "test_std": p.test_std,
        }));
    })?;
    let ck = checkpoint_from_params(&outcome.params, args.dim, seed);
    save_checkpoint(&args.out_model, &ck)?;
    write_curve_csv_file(&args.out_curve, &outcome.curve)?;
    progress(serde_json::json!({
        "event": "trained",
        "epochs": args.epochs,
        "k": args.k.unwrap_or(args.dim),
        "model": args.out_model,
        "curve": args.out_curve,
    }));
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<(), CliError> {
    let seed = resolve_seed(args.seed)?;
    let ck = load_checkpoint(&args.model)?;
    let params = params_from_checkpoint(&ck)?;
    let (header, bases) = read_dataset(&args.test)?;
    let k = args.k.unwrap_or(header.n);
    let mut report = evaluate(&params, &bases, k, seed)?;
    report.worst_p = worst_p_analysis(&report, args.p)?;
    progress(serde_json::json!({
        "event": "evaluated",
        "count": report.count,
        "k": k,
        "policy_mean": report.policy.mean,
        "lll_mean": report.lll.mean,
        "baseline_mean": report.baseline.mean,
        "policy_secs": report.timings.policy_secs,
        "lll_secs": report.timings.lll_secs,
    }));
    write_report_file(&args.out_report, &ReportJson::from_report(&report))?;
    Ok(())
}

