//! The `dgpnet` command line: argument parsing, key=value config files and
//! the subcommands.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::degrade::{bicubic_baseline_psnr, make_pairs, read_image, write_image, Level, PairSpec, SynthKind};
use crate::error::{Error, Result};
use crate::fsio::write_atomic;
use crate::network::{count_flops, count_params, fuse_network, vconv_param_formula, DgpNetParams};
use crate::tensor::{Scalar, Tensor};
use crate::train::{
    evaluate, load_checkpoint, save_checkpoint, train, Checkpoint, DType, Dataset, LogRecord, StoredNet,
    TrainConfig,
};
use crate::verify;

pub const EXIT_OK: i32 = 0;
pub const EXIT_CHECK: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

pub const THREADS_ENV: &str = "DGPNET_THREADS";

#[derive(Parser, Debug)]
#[command(name = "dgpnet", version, about = "Directional gradient convolution super-resolution")]
pub struct Cli {
    /// key=value config file; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub dtype: Option<DTypeArg>,
    /// Worker threads (default: $DGPNET_THREADS, then all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum DTypeArg {
    F32,
    F64,
}

impl From<DTypeArg> for DType {
    fn from(d: DTypeArg) -> Self {
        match d {
            DTypeArg::F32 => DType::F32,
            DTypeArg::F64 => DType::F64,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Branched,
    Fused,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Run the invariant suite, optionally also on a checkpoint.
    Verify(VerifyArgs),
    /// Collapse a branched checkpoint into single kernels.
    Fuse(FuseArgs),
    /// Train on synthetic degraded pairs.
    Train(TrainArgs),
    /// Super-resolve one image.
    Infer(InferArgs),
    /// PSNR of a checkpoint against the bicubic baseline per level.
    Eval(EvalArgs),
    /// Time branched and fused forwards.
    Bench(BenchArgs),
}

#[derive(Args, Debug)]
pub struct VerifyArgs {
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct FuseArgs {
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Loss curve CSV.
    #[arg(long)]
    pub log: Option<PathBuf>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long = "in")]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "fused")]
    pub mode: Mode,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// A single level (I..V); all levels when omitted.
    #[arg(long)]
    pub level: Option<String>,
    #[arg(long, default_value_t = 8)]
    pub pairs: usize,
    /// Side of the low-resolution evaluation images.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct BenchArgs {
    /// Checkpoint to time; a random network from the config otherwise.
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Input size as HxW (low resolution).
    #[arg(long, default_value = "64x64")]
    pub size: String,
    #[arg(long, default_value_t = 5)]
    pub reps: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

const KEYS: &[&str] = &[
    "channels",
    "n_block",
    "scale",
    "in_channels",
    "lr",
    "batch",
    "iterations",
    "patch",
    "level",
    "log_every",
    "val_pairs",
    "val_size",
    "seed",
    "dtype",
    "threads",
    "out",
    "log",
];

/// Parse `key = value` lines. Blank lines and `#` comments are ignored;
/// unknown and repeated keys are errors.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected key=value", n + 1)))?;
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(Error::Config(format!("unknown config key {k:?}")));
        }
        if out.insert(k.to_string(), v.to_string()).is_some() {
            return Err(Error::Config(format!("duplicate config key {k:?}")));
        }
    }
    Ok(out)
}

/// Settings after merging defaults, the config file and flags.
#[derive(Clone, Debug, PartialEq)]
pub struct CliConfig {
    pub train: TrainConfig,
    pub threads: Option<usize>,
    pub out: Option<PathBuf>,
    pub log: Option<PathBuf>,
}

fn parse_value<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value {v:?} for {key}")))
}

impl CliConfig {
    pub fn from_map(map: &BTreeMap<String, String>) -> Result<Self> {
        let mut c = Self {
            train: TrainConfig::micro(),
            threads: None,
            out: None,
            log: None,
        };
        for (k, v) in map {
            let t = &mut c.train;
            match k.as_str() {
                "channels" => t.net.channels = parse_value(k, v)?,
                "n_block" => t.net.n_block = parse_value(k, v)?,
                "scale" => t.net.scale = parse_value(k, v)?,
                "in_channels" => t.net.in_channels = parse_value(k, v)?,
                "lr" => t.lr = parse_value(k, v)?,
                "batch" => t.batch = parse_value(k, v)?,
                "iterations" => t.iterations = parse_value(k, v)?,
                "patch" => t.patch = parse_value(k, v)?,
                "level" => t.level = v.parse()?,
                "log_every" => t.log_every = parse_value(k, v)?,
                "val_pairs" => t.val_pairs = parse_value(k, v)?,
                "val_size" => t.val_size = parse_value(k, v)?,
                "seed" => t.seed = parse_value(k, v)?,
                "dtype" => t.dtype = v.parse()?,
                "threads" => c.threads = Some(parse_value(k, v)?),
                "out" => c.out = Some(PathBuf::from(v)),
                "log" => c.log = Some(PathBuf::from(v)),
                _ => return Err(Error::Config(format!("unknown config key {k:?}"))),
            }
        }
        Ok(c)
    }

    fn resolve(cli: &Cli) -> Result<Self> {
        let mut c = match &cli.config {
            Some(p) => {
                let bytes = crate::fsio::read_file(p)?;
                let text = String::from_utf8(bytes)
                    .map_err(|_| Error::Config(format!("{} is not UTF-8", p.display())))?;
                Self::from_map(&parse_config(&text)?)?
            }
            None => Self::from_map(&BTreeMap::new())?,
        };
        if let Some(s) = cli.seed {
            c.train.seed = s;
        }
        if let Some(d) = cli.dtype {
            c.train.dtype = d.into();
        }
        if cli.threads.is_some() {
            c.threads = cli.threads;
        }
        if c.threads.is_none() {
            if let Ok(v) = std::env::var(THREADS_ENV) {
                c.threads = Some(parse_value(THREADS_ENV, &v)?);
            }
        }
        if c.threads == Some(0) {
            return Err(Error::Config("threads must be positive".into()));
        }
        Ok(c)
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::NonFinite { .. } => EXIT_CHECK,
        _ => EXIT_USAGE,
    }
}

/// Parse `args` (including the program name) and run the command. Reports
/// go to `out`, diagnostics to `err`; the return value is the exit code.
pub fn run<I, S>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            if e.use_stderr() {
                let _ = write!(err, "{e}");
                return EXIT_USAGE;
            }
            let _ = write!(out, "{e}");
            return EXIT_OK;
        }
    };
    let result = CliConfig::resolve(&cli).and_then(|cfg| {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = cfg.threads {
            builder = builder.num_threads(n);
        }
        let pool = builder
            .build()
            .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
        let mut buf = Vec::new();
        let code = pool.install(|| dispatch(&cli.command, &cfg, &mut buf));
        out.write_all(&buf).map_err(io_err)?;
        code
    });
    match result {
        Ok(code) => code,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}

fn dispatch(cmd: &Command, cfg: &CliConfig, out: &mut dyn Write) -> Result<i32> {
    match cmd {
        Command::Verify(a) => cmd_verify(a, cfg, out),
        Command::Fuse(a) => cmd_fuse(a, cfg, out),
        Command::Train(a) => cmd_train(a, cfg, out),
        Command::Infer(a) => cmd_infer(a, cfg, out),
        Command::Eval(a) => cmd_eval(a, cfg, out),
        Command::Bench(a) => cmd_bench(a, cfg, out),
    }
}

fn io_err(e: std::io::Error) -> Error {
    Error::io("<output>", e)
}

fn emit(out: &mut dyn Write, text: &str, path: Option<&Path>) -> Result<()> {
    match path {
        Some(p) => write_atomic(p, text.as_bytes()),
        None => out.write_all(text.as_bytes()).map_err(io_err),
    }
}

fn cmd_verify(a: &VerifyArgs, cfg: &CliConfig, out: &mut dyn Write) -> Result<i32> {
    let seed = cfg.train.seed;
    let dtype = cfg.train.dtype;
    let mut checks = Vec::new();
    if let Some(p) = &a.ckpt {
        let ck = load_checkpoint(p)?;
        match &ck.net {
            StoredNet::Branched(net) => checks.push(match dtype {
                DType::F32 => verify::network_fusion(net, 3, 16, seed)?,
                DType::F64 => verify::network_fusion(&net.cast::<f64>(), 3, 16, seed)?,
            }),
            StoredNet::Fused(f) => {
                let worst = count_params(f).abs_diff(vconv_param_formula(&f.config)) as f64;
                checks.push(verify::Check {
                    name: "checkpoint_param_parity".into(),
                    worst,
                    tol: 0.0,
                    passed: worst == 0.0,
                });
            }
        }
    }
    checks.extend(verify::run_suite(seed, dtype)?);
    for c in &checks {
        writeln!(out, "{c}").map_err(io_err)?;
    }
    Ok(if checks.iter().all(|c| c.passed) {
        EXIT_OK
    } else {
        EXIT_CHECK
    })
}

/// Branched vs fused outputs on `inputs` random images.
pub fn spot_check<T: Scalar>(net: &DgpNetParams<T>, inputs: usize, seed: u64) -> Result<f64> {
    let fused = fuse_network(net)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..inputs {
        let x = Tensor::from_fn([1, net.config.in_channels, 16, 16], |_| {
            T::from_f64(rng.random_range(0.0..1.0))
        });
        worst = worst.max(net.forward(&x)?.max_abs_diff(&fused.forward(&x)?)?);
    }
    Ok(worst)
}

pub const FUSE_SPOT_TOL: f64 = 1e-4;

fn cmd_fuse(a: &FuseArgs, cfg: &CliConfig, out: &mut dyn Write) -> Result<i32> {
    let ck = load_checkpoint(&a.input)?;
    let net = ck.net.branched()?;
    let worst = spot_check(net, 3, cfg.train.seed)?;
    let fused = fuse_network(net)?;
    let twin = vconv_param_formula(&net.config);
    writeln!(
        out,
        "spot_check_max_abs,{worst:.3e}\nparams,{}\nvconv_params,{twin}",
        count_params(&fused)
    )
    .map_err(io_err)?;
    if !(worst <= FUSE_SPOT_TOL) || count_params(&fused) != twin {
        return Ok(EXIT_CHECK);
    }
    let mut res = Checkpoint::new(StoredNet::Fused(fused));
    res.meta = ck.meta.clone();
    save_checkpoint(&a.out, &res)?;
    Ok(EXIT_OK)
}

pub fn log_csv(log: &[LogRecord]) -> String {
    let mut s = String::from("iteration,l1,val_psnr,bicubic_psnr\n");
    for r in log {
        s.push_str(&format!(
            "{},{:.6},{:.4},{:.4}\n",
            r.iteration, r.l1, r.val_psnr, r.bicubic_psnr
        ));
    }
    s
}

fn cmd_train(a: &TrainArgs, cfg: &CliConfig, out: &mut dyn Write) -> Result<i32> {
    let mut tc = cfg.train.clone();
    if let Some(n) = a.iterations {
        tc.iterations = n;
    }
    let ckpt_path = a
        .out
        .clone()
        .or_else(|| cfg.out.clone())
        .ok_or_else(|| Error::Config("train needs --out or out= in the config".into()))?;
    let resume = a.resume.as_deref().map(load_checkpoint).transpose()?;
    let data = Dataset::for_config(&tc)?;
    let outcome = train(&tc, &data, resume.as_ref())?;
    save_checkpoint(&ckpt_path, &outcome.checkpoint)?;
    let csv = log_csv(&outcome.log);
    match a.log.clone().or_else(|| cfg.log.clone()) {
        Some(p) => write_atomic(&p, csv.as_bytes())?,
        None => out.write_all(csv.as_bytes()).map_err(io_err)?,
    }
    Ok(EXIT_OK)
}

fn forward_mode<T: Scalar>(ck: &Checkpoint, mode: Mode, x: &Tensor<T>) -> Result<Tensor<T>> {
    match (&ck.net, mode) {
        (StoredNet::Branched(n), Mode::Branched) => n.cast::<T>().forward(x),
        (StoredNet::Branched(n), Mode::Fused) => fuse_network(&n.cast::<T>())?.forward(x),
        (StoredNet::Fused(f), Mode::Fused) => f.cast::<T>().forward(x),
        (StoredNet::Fused(_), Mode::Branched) => Err(Error::InvalidArgument(
            "branched mode needs a branched checkpoint".into(),
        )),
    }
}

/// Run a checkpoint on one image in the given precision.
pub fn infer(ck: &Checkpoint, mode: Mode, dtype: DType, img: &Tensor<f32>) -> Result<Tensor<f32>> {
    match dtype {
        DType::F32 => forward_mode(ck, mode, img),
        DType::F64 => Ok(forward_mode(ck, mode, &img.cast::<f64>())?.cast()),
    }
}

fn cmd_infer(a: &InferArgs, cfg: &CliConfig, out: &mut dyn Write) -> Result<i32> {
    let ck = load_checkpoint(&a.ckpt)?;
    let img = read_image::<f32>(&a.input)?;
    let sr = infer(&ck, a.mode, cfg.train.dtype, &img)?;
    write_image(&a.out, &sr)?;
    writeln!(out, "{}x{} -> {}x{}", img.height(), img.width(), sr.height(), sr.width()).map_err(io_err)?;
    Ok(EXIT_OK)
}

fn cmd_eval(a: &EvalArgs, cfg: &CliConfig, out: &mut dyn Write) -> Result<i32> {
    let ck = load_checkpoint(&a.ckpt)?;
    let net_cfg = ck.net.config();
    let levels = match &a.level {
        Some(l) => vec![l.parse::<Level>()?],
        None => Level::ALL.to_vec(),
    };
    let mut csv = String::from("level,model_psnr,bicubic_psnr\n");
    for level in levels {
        let spec = PairSpec {
            kind: SynthKind::Mixed,
            channels: net_cfg.in_channels,
            hr_size: a.size * net_cfg.scale,
            count: a.pairs,
            level,
            scale: net_cfg.scale,
            seed: cfg.train.seed,
        };
        let set = make_pairs::<f32>(&spec)?;
        let model = evaluate(&|x: &Tensor<f32>| forward_mode(&ck, Mode::Fused, x), &set)?;
        let bicubic = bicubic_baseline_psnr(&set)?;
        csv.push_str(&format!("{level},{model:.4},{bicubic:.4}\n"));
    }
    emit(out, &csv, a.out.as_deref())?;
    Ok(EXIT_OK)
}

pub fn parse_size(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::InvalidArgument(format!("size must look like HxW, got {s:?}"));
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    Ok((h.trim().parse().map_err(|_| bad())?, w.trim().parse().map_err(|_| bad())?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct BenchReport {
    pub params: [usize; 2],
    pub conv_flops: [u64; 2],
    pub total_flops: [u64; 2],
    /// Median seconds per forward, branched then fused.
    pub median: [f64; 2],
}

impl BenchReport {
    pub fn csv(&self) -> String {
        let mut s = String::from("mode,params,conv_flops,total_flops,median_ms\n");
        for (i, mode) in ["branched", "fused"].iter().enumerate() {
            s.push_str(&format!(
                "{mode},{},{},{},{:.3}\n",
                self.params[i],
                self.conv_flops[i],
                self.total_flops[i],
                self.median[i] * 1e3
            ));
        }
        s
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_reps(reps: usize, mut f: impl FnMut() -> Result<()>) -> Result<f64> {
    f()?;
    let mut t = Vec::with_capacity(reps);
    for _ in 0..reps {
        let start = Instant::now();
        f()?;
        t.push(start.elapsed().as_secs_f64());
    }
    Ok(median(t))
}

/// Median forward time of `net` and its fused form after one warmup run.
pub fn bench(net: &DgpNetParams<f32>, h: usize, w: usize, reps: usize, seed: u64) -> Result<BenchReport> {
    if reps == 0 {
        return Err(Error::InvalidArgument("reps must be positive".into()));
    }
    let fused = fuse_network(net)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor::from_fn([1, net.config.in_channels, h, w], |_| rng.random_range(0.0f32..1.0));
    let tb = time_reps(reps, || net.forward(&x).map(drop))?;
    let tf = time_reps(reps, || fused.forward(&x).map(drop))?;
    let cb = count_flops(net, h, w);
    let cf = count_flops(&fused, h, w);
    Ok(BenchReport {
        params: [count_params(net), count_params(&fused)],
        conv_flops: [cb.conv_flops, cf.conv_flops],
        total_flops: [cb.total_flops, cf.total_flops],
        median: [tb, tf],
    })
}

fn cmd_bench(a: &BenchArgs, cfg: &CliConfig, out: &mut dyn Write) -> Result<i32> {
    let (h, w) = parse_size(&a.size)?;
    let net = match &a.ckpt {
        Some(p) => load_checkpoint(p)?.net.branched()?.clone(),
        None => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed);
            DgpNetParams::init(cfg.train.net, &mut rng)?
        }
    };
    let r = bench(&net, h, w, a.reps, cfg.train.seed)?;
    emit(out, &r.csv(), a.out.as_deref())?;
    Ok(if r.params[1] == vconv_param_formula(&net.config) {
        EXIT_OK
    } else {
        EXIT_CHECK
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parsing() {
        let m = parse_config("# c\nchannels = 8\n\nlevel=III # trailing\n").unwrap();
        let c = CliConfig::from_map(&m).unwrap();
        assert_eq!(c.train.net.channels, 8);
        assert_eq!(c.train.level, Level::III);
        assert_eq!(c.train.batch, 4);
    }

    #[test]
    fn unknown_key_is_named() {
        let e = parse_config("chanels=8").unwrap_err();
        assert!(e.to_string().contains("chanels"), "{e}");
        assert!(parse_config("seed=1\nseed=2").is_err());
        assert!(parse_config("seed").is_err());
        let m = parse_config("batch=four").unwrap();
        assert!(CliConfig::from_map(&m).unwrap_err().to_string().contains("batch"));
    }

    #[test]
    fn sizes() {
        assert_eq!(parse_size("256x128").unwrap(), (256, 128));
        assert!(parse_size("256").is_err());
        assert!(parse_size("ax3").is_err());
    }

    #[test]
    fn median_of_even_and_odd() {
        assert_eq!(median(vec![3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(vec![4.0, 1.0, 2.0, 3.0]), 2.5);
    }

    #[test]
    fn usage_errors_exit_2() {
        let (mut o, mut e) = (Vec::new(), Vec::new());
        assert_eq!(run(["dgpnet", "frobnicate"], &mut o, &mut e), EXIT_USAGE);
        assert_eq!(run(["dgpnet", "bench", "--size", "12"], &mut o, &mut e), EXIT_USAGE);
    }
}
