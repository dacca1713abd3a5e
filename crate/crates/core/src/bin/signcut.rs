//! Command-line front end. Results go to stdout as `key=value` lines,
//! diagnostics to stderr. Exit codes: 0 ok, 2 I/O or format error,
//! 3 invalid configuration.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use signcut::decompose::{expand, rgb_scalars_decompose};
use signcut::io::{
    read_ppm, read_raw, read_scd, read_scd_prefix, scd_coeff_bits, write_ppm, write_raw,
    write_scd, CoeffBits, DType,
};
use signcut::metrics::{
    compression_rate, emit_curve, quantize_half, relative_error, width_for_compression,
    write_curve_csv, CurvePoint, HalfFormat, StorageModel,
};
use signcut::search::{brute_force_cut, DEFAULT_SEED};
use signcut::{decompose, CutDecomposition, DecomposeConfig, DenseTensor, Error, Method, SearchConfig};

#[derive(Parser)]
#[command(name = "signcut", version, about = "Signed cut decompositions of matrices and tensors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Decompose a DTEN tensor or PPM image into an SCD file.
    Decompose(DecomposeArgs),
    /// Expand an SCD file back into a DTEN tensor or PPM image.
    Reconstruct(ReconstructArgs),
    /// Error curve of every prefix of an SCD file against its source, as CSV.
    Curve(CurveArgs),
    /// Largest width that fits a compression rate.
    Width(WidthArgs),
    /// Round a tensor to a 16-bit float format.
    Quantize(QuantizeArgs),
    /// Exact cut norm of a small tensor by enumeration.
    Oracle(OracleArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum MethodArg {
    Greedy,
    Lstsq,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ChannelMode {
    /// Sign vectors on every axis.
    Signs,
    /// Signs on the two spatial axes, one real coefficient per channel.
    Scalars,
}

#[derive(Clone, Copy, ValueEnum)]
enum DTypeArg {
    F32,
    F64,
    U8,
}

#[derive(Clone, Copy, ValueEnum)]
enum FormatArg {
    Bf16,
    F16,
}

#[derive(Args)]
struct Storage {
    /// Bits per stored coefficient (32 or 64).
    #[arg(long, default_value_t = 32)]
    coeff_bits: u32,
    /// Bits per source entry used for compression rates [default: 8 for PPM input, else 16].
    #[arg(long)]
    source_bits: Option<u32>,
}

#[derive(Args)]
#[command(group = clap::ArgGroup::new("size").required(true).args(["width", "rate"]))]
struct DecomposeArgs {
    input: PathBuf,
    output: PathBuf,
    #[arg(long)]
    width: Option<usize>,
    /// Target compression rate in (0, 1].
    #[arg(long)]
    rate: Option<f64>,
    #[arg(long, value_enum, default_value = "greedy")]
    method: MethodArg,
    #[arg(long, value_parser = parse_seed, default_value_t = DEFAULT_SEED)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    restarts: usize,
    #[arg(long, default_value_t = 32)]
    flush_width: usize,
    #[arg(long, value_enum, default_value = "signs")]
    channel_mode: ChannelMode,
    #[command(flatten)]
    storage: Storage,
    /// Write the error curve as CSV.
    #[arg(long)]
    curve: Option<PathBuf>,
    /// Resolve the width and stop without decomposing.
    #[arg(long)]
    dry_run: bool,
}

#[derive(Args)]
struct ReconstructArgs {
    input: PathBuf,
    /// `.ppm` writes an image, anything else a DTEN tensor.
    output: PathBuf,
    /// Keep only the first this many terms.
    #[arg(long)]
    truncate: Option<usize>,
    #[arg(long, value_enum, default_value = "f64")]
    dtype: DTypeArg,
}

#[derive(Args)]
struct CurveArgs {
    /// Source tensor (DTEN or PPM).
    source: PathBuf,
    scd: PathBuf,
    output: PathBuf,
    #[arg(long)]
    source_bits: Option<u32>,
}

#[derive(Args)]
struct WidthArgs {
    /// Shape as `MxN` (any order, e.g. `4x5x6`).
    #[arg(long, value_parser = parse_shape)]
    shape: Shape,
    #[arg(long)]
    rate: f64,
    #[arg(long, default_value_t = 32)]
    coeff_bits: u32,
    #[arg(long, default_value_t = 16)]
    source_bits: u32,
    /// Axis carrying per-channel coefficients.
    #[arg(long)]
    channel_axis: Option<usize>,
}

#[derive(Args)]
struct QuantizeArgs {
    input: PathBuf,
    output: PathBuf,
    #[arg(long, value_enum)]
    format: FormatArg,
}

#[derive(Args)]
struct OracleArgs {
    input: PathBuf,
}

fn parse_seed(s: &str) -> Result<u64, String> {
    match s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")) {
        Some(hex) => u64::from_str_radix(&hex.replace('_', ""), 16),
        None => s.replace('_', "").parse(),
    }
    .map_err(|e| e.to_string())
}

#[derive(Clone)]
struct Shape(Vec<usize>);

fn parse_shape(s: &str) -> Result<Shape, String> {
    s.split(['x', 'X', ','])
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("{p:?}: {e}")))
        .collect::<Result<_, _>>()
        .map(Shape)
}

struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Io(_) | Error::Format(_) | Error::Csv(_) => 2,
            _ => 3,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn config(message: impl Into<String>) -> Failure {
    Failure {
        code: 3,
        message: message.into(),
    }
}

fn read_file(path: &Path) -> Result<Vec<u8>, Failure> {
    fs::read(path).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Failure> {
    fs::write(path, bytes).map_err(|e| Failure {
        code: 2,
        message: format!("{}: {e}", path.display()),
    })
}

fn is_ppm(path: &Path) -> bool {
    path.extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"))
}

/// Loads a tensor, telling the formats apart by their magic bytes.
/// Returns the tensor and whether it came from a PPM.
fn load_tensor(path: &Path) -> Result<(DenseTensor, bool), Failure> {
    let bytes = read_file(path)?;
    if bytes.starts_with(b"P6") {
        Ok((read_ppm(&bytes)?, true))
    } else {
        Ok((read_raw(&bytes)?.0, false))
    }
}

fn rel_err(a: &DenseTensor, approx: &DenseTensor) -> Result<f64, Failure> {
    if a.norm() == 0.0 {
        return Ok(if approx.norm() == 0.0 { 0.0 } else { f64::INFINITY });
    }
    Ok(relative_error(a, approx, None)?)
}

fn storage_model(
    shape: &[usize],
    channel_axis: Option<usize>,
    coeff_bits: u32,
    source_bits: u32,
) -> StorageModel {
    let model = StorageModel::new(shape.to_vec(), coeff_bits, source_bits);
    match channel_axis {
        Some(c) => model.with_channel_axis(c),
        None => model,
    }
}

fn cmd_decompose(args: DecomposeArgs) -> Result<(), Failure> {
    let coeff_bits = CoeffBits::from_bits(args.storage.coeff_bits)?;
    if let Some(r) = args.rate {
        if !(r > 0.0 && r <= 1.0) {
            return Err(config(format!("rate must lie in (0, 1], got {r}")));
        }
    }
    let (a, ppm) = load_tensor(&args.input)?;
    let source_bits = args.storage.source_bits.unwrap_or(if ppm { 8 } else { 16 });
    let channel_axis = match args.channel_mode {
        ChannelMode::Signs => None,
        ChannelMode::Scalars => {
            if a.order() != 3 {
                return Err(config(format!(
                    "scalar channel mode needs an order-3 tensor, got shape {:?}",
                    a.shape()
                )));
            }
            Some(2)
        }
    };
    let model = storage_model(a.shape(), channel_axis, coeff_bits.bits(), source_bits);
    let width = match (args.width, args.rate) {
        (Some(w), _) => w,
        (None, Some(r)) => width_for_compression(&model, r)?,
        (None, None) => unreachable!("clap requires one of width/rate"),
    };
    let rate = compression_rate(width, &model);
    if args.dry_run {
        println!("width={width} rate={rate}");
        return Ok(());
    }

    let cfg = DecomposeConfig {
        width,
        flush_width: args.flush_width,
        method: match args.method {
            MethodArg::Greedy => Method::Greedy,
            MethodArg::Lstsq => Method::LeastSquares,
        },
        search: SearchConfig::with_seed(args.seed).restarts(args.restarts),
        record_curve: args.curve.is_some(),
        ..DecomposeConfig::default()
    };
    eprintln!("decomposing {:?} at width {width}", a.shape());
    let (d, report) = match channel_axis {
        Some(_) => rgb_scalars_decompose(&a, &cfg)?,
        None => decompose(&a, &cfg)?,
    };
    let bytes = write_scd(&d, coeff_bits);
    write_file(&args.output, &bytes)?;
    if let Some(path) = &args.curve {
        let mut out = Vec::new();
        write_curve_csv(&emit_curve(&report, &model), &mut out)?;
        write_file(path, &out)?;
    }
    // error of what was written, after any coefficient rounding
    let stored = read_scd(&bytes)?;
    let err = rel_err(&a, &expand(&stored))?;
    println!("width={} rate={rate} rel_err={err}", stored.width());
    Ok(())
}

fn cmd_reconstruct(args: ReconstructArgs) -> Result<(), Failure> {
    let bytes = read_file(&args.input)?;
    let d = match args.truncate {
        Some(w) => read_scd_prefix(&bytes, w)?,
        None => read_scd(&bytes)?,
    };
    let t = expand(&d);
    let out = if is_ppm(&args.output) {
        write_ppm(&t)?
    } else {
        let dtype = match args.dtype {
            DTypeArg::F32 => DType::F32,
            DTypeArg::F64 => DType::F64,
            DTypeArg::U8 => DType::U8,
        };
        write_raw(&t, dtype)
    };
    write_file(&args.output, &out)?;
    println!("width={}", d.width());
    Ok(())
}

/// Relative error of every prefix `0..=width`, building the expansion one
/// term at a time.
fn prefix_errors(a: &DenseTensor, d: &CutDecomposition) -> Result<Vec<f64>, Failure> {
    let mut acc = CutDecomposition::new(d.shape().to_vec(), d.channel_axis())?;
    let mut approx = expand(&acc);
    let mut errs = vec![rel_err(a, &approx)?];
    for j in 0..d.width() {
        acc = CutDecomposition::new(d.shape().to_vec(), d.channel_axis())?;
        acc.push_term(d.term_signs(j), d.term_coefficients(j))?;
        let term = expand(&acc);
        for (x, y) in approx.data_mut().iter_mut().zip(term.data()) {
            *x += y;
        }
        errs.push(rel_err(a, &approx)?);
    }
    Ok(errs)
}

fn cmd_curve(args: CurveArgs) -> Result<(), Failure> {
    let (a, ppm) = load_tensor(&args.source)?;
    let bytes = read_file(&args.scd)?;
    let d = read_scd(&bytes)?;
    if d.shape() != a.shape() {
        return Err(Error::ShapeMismatch(a.shape().to_vec(), d.shape().to_vec()).into());
    }
    let source_bits = args.source_bits.unwrap_or(if ppm { 8 } else { 16 });
    let model = storage_model(
        a.shape(),
        d.channel_axis(),
        scd_coeff_bits(&bytes)?.bits(),
        source_bits,
    );
    let points: Vec<CurvePoint> = prefix_errors(&a, &d)?
        .into_iter()
        .enumerate()
        .map(|(k, r_k)| CurvePoint {
            k,
            p_k: compression_rate(k, &model),
            r_k,
        })
        .collect();
    let mut out = Vec::new();
    write_curve_csv(&points, &mut out)?;
    write_file(&args.output, &out)?;
    println!("points={}", points.len());
    Ok(())
}

fn cmd_width(args: WidthArgs) -> Result<(), Failure> {
    if let Some(c) = args.channel_axis {
        if c >= args.shape.0.len() {
            return Err(config(format!("channel axis {c} out of range")));
        }
    }
    let model = storage_model(&args.shape.0, args.channel_axis, args.coeff_bits, args.source_bits);
    println!("{}", width_for_compression(&model, args.rate)?);
    Ok(())
}

fn cmd_quantize(args: QuantizeArgs) -> Result<(), Failure> {
    let (a, _) = load_tensor(&args.input)?;
    let format = match args.format {
        FormatArg::Bf16 => HalfFormat::Bf16,
        FormatArg::F16 => HalfFormat::F16,
    };
    let q = quantize_half(&a, format);
    write_file(&args.output, &write_raw(&q.tensor, DType::F64))?;
    println!("rel_err={} saturated={}", rel_err(&a, &q.tensor)?, q.saturated);
    Ok(())
}

fn cmd_oracle(args: OracleArgs) -> Result<(), Failure> {
    let (a, _) = load_tensor(&args.input)?;
    println!("value={}", brute_force_cut(&a)?.value);
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp
                | clap::error::ErrorKind::DisplayVersion
                | clap::error::ErrorKind::DisplayHelpOnMissingArgumentOrSubcommand => {
                    ExitCode::SUCCESS
                }
                _ => ExitCode::from(3),
            };
        }
    };
    let result = match cli.command {
        Command::Decompose(a) => cmd_decompose(a),
        Command::Reconstruct(a) => cmd_reconstruct(a),
        Command::Curve(a) => cmd_curve(a),
        Command::Width(a) => cmd_width(a),
        Command::Quantize(a) => cmd_quantize(a),
        Command::Oracle(a) => cmd_oracle(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
