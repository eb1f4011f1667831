//! The `polyssm` command-line interface. Every subcommand is a thin shell
//! over the library; `run` returns the process exit code (0 success,
//! 1 usage, 2 data/config error, 3 numeric failure).

use crate::data::{
    load_csv, make_splits, save_csv, synth_cdt, ForecastTask, Regime, Split, SplitStrategy,
    SynthConfig,
};
use crate::error::{Error, Result};
use crate::hippo;
use crate::legendre::{self, QuadratureRule};
use crate::model::{
    load_checkpoint, peek_checkpoint, save_checkpoint, NormMeta, PolyMamba,
};
use crate::numerics::{DType, Elem, Tensor};
use crate::pipeline::{
    ablate, ablation_to_csv, baseline_last_value, evaluate, metrics_to_jsonl, train,
    config::RunConfig,
};
use crate::polyops::PolyVariant;
use crate::sscan::{self, ScanMode};
use clap::{Args, Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::path::{Path, PathBuf};

#[derive(Parser)]
#[command(
    name = "polyssm",
    version,
    about = "Selective state-space forecasting with time-varying channel mixing"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a forecaster and write checkpoint + metrics
    Train(TrainArgs),
    /// Evaluate a checkpoint on one split
    Eval(EvalArgs),
    /// Run the structural ablation grid
    Ablate(AblateArgs),
    /// Forecast beyond the end of a CSV with a trained checkpoint
    Forecast(ForecastArgs),
    /// Generate a synthetic dataset with planted channel coupling
    Synth(SynthArgs),
    /// Stream a signal through the online approximation and reconstruct it
    HippoDemo(HippoDemoArgs),
    /// Check multivariate basis orthogonality; export the Gram matrix
    BasisCheck(BasisCheckArgs),
    /// Time sequential vs parallel scans and report agreement
    ScanBench(ScanBenchArgs),
    /// Dump learned transform parameters or mean gate values
    Inspect(InspectArgs),
}

#[derive(Args, Clone)]
struct CommonTrainArgs {
    /// Nested key-value config file (model.*, data.*, train.*)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dataset CSV (overrides data.path from the config)
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    horizon: Option<usize>,
    #[arg(long)]
    lookback: Option<usize>,
    #[arg(long)]
    variant: Option<PolyVariantArg>,
    #[arg(long)]
    scan: Option<ScanModeArg>,
    #[arg(long)]
    precision: Option<DTypeArg>,
    /// Worker threads (1 guarantees the bit-determinism contract)
    #[arg(long)]
    threads: Option<usize>,
    #[arg(long)]
    max_steps: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: CommonTrainArgs,
    /// Output directory for model.ckpt and metrics.jsonl
    #[arg(long, default_value = "polyssm_run")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    #[arg(long)]
    scan: Option<ScanModeArg>,
    #[arg(long, default_value_t = 64)]
    batch_size: usize,
    /// Write the metrics record as JSON here (stdout otherwise)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AblateArgs {
    #[command(flatten)]
    common: CommonTrainArgs,
    /// Comma-separated seeds, one training run per (variant, seed)
    #[arg(long, default_value = "0,1,2")]
    seeds: String,
    /// Comma-separated variants (default: the full grid)
    #[arg(long)]
    variants: Option<String>,
    /// Ablation table CSV (stdout otherwise)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ForecastArgs {
    #[arg(long)]
    ckpt: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Predictions CSV (stdout otherwise)
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    scan: Option<ScanModeArg>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long, default_value = "switching")]
    regime: String,
    #[arg(long, default_value_t = 8)]
    c: usize,
    #[arg(long, default_value_t = 20000)]
    t: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV; generator parameters land next to it as .meta.json
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0.1)]
    noise_std: f64,
    /// Force a constant coupling coefficient
    #[arg(long)]
    alpha: Option<f64>,
    /// Force one lag for all channels
    #[arg(long)]
    tau: Option<usize>,
    #[arg(long, default_value_t = 96)]
    lag_base: usize,
}

#[derive(Args)]
struct HippoDemoArgs {
    /// State size N
    #[arg(long, default_value_t = 32)]
    n: usize,
    /// sin | square | csv:<path>
    #[arg(long, default_value = "sin")]
    signal: String,
    #[arg(long, default_value_t = 10.0)]
    t_end: f64,
    #[arg(long, default_value_t = 2000)]
    samples: usize,
    /// CSV (t, u, u_hat, abs_err); stdout otherwise. `.meta.json` lands
    /// next to it with the integration settings.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct BasisCheckArgs {
    #[arg(long, default_value_t = 2)]
    c: usize,
    #[arg(long, default_value_t = 3)]
    deg: usize,
    #[arg(long)]
    quad_order: Option<usize>,
    /// Gram matrix CSV (stdout otherwise)
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ScanBenchArgs {
    /// Comma-separated sequence lengths
    #[arg(long, default_value = "16,64,256,1024,4096")]
    l: String,
    /// seq | par | both
    #[arg(long, default_value = "both")]
    r#impl: String,
    /// Independent recurrence lanes per length
    #[arg(long, default_value_t = 512)]
    lanes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// lcm | mopa | gates
    #[arg(long)]
    what: String,
    /// Dataset CSV; required for `gates`
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone)]
struct PolyVariantArg(PolyVariant);
#[derive(Clone)]
struct ScanModeArg(ScanMode);
#[derive(Clone)]
struct DTypeArg(DType);

impl std::str::FromStr for PolyVariantArg {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.parse().map(PolyVariantArg).map_err(|e: Error| e.to_string())
    }
}
impl std::str::FromStr for ScanModeArg {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.parse().map(ScanModeArg).map_err(|e: Error| e.to_string())
    }
}
impl std::str::FromStr for DTypeArg {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        s.parse().map(DTypeArg).map_err(|e: Error| e.to_string())
    }
}

/// Entry point used by the binary and by tests. Parses `argv` (including
/// the program name) and runs the subcommand.
pub fn run<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            // clap renders its own usage text; both parse failures and
            // --help land here, but only real errors exit nonzero
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    let result = match cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Ablate(a) => cmd_ablate(a),
        Cmd::Forecast(a) => cmd_forecast(a),
        Cmd::Synth(a) => cmd_synth(a),
        Cmd::HippoDemo(a) => cmd_hippo_demo(a),
        Cmd::BasisCheck(a) => cmd_basis_check(a),
        Cmd::ScanBench(a) => cmd_scan_bench(a),
        Cmd::Inspect(a) => cmd_inspect(a),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn setup_threads(threads: usize) {
    if threads > 0 {
        // ignore AlreadyInitialized: values do not depend on pool size
        let _ = rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global();
    }
}

fn resolve_run_config(common: &CommonTrainArgs) -> Result<(RunConfig, PathBuf)> {
    let mut rc = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        rc.train.seed = seed;
    }
    if let Some(epochs) = common.epochs {
        rc.train.epochs = epochs;
    }
    if let Some(lr) = common.lr {
        rc.train.lr = lr;
    }
    if let Some(b) = common.batch_size {
        rc.train.batch_size = b;
    }
    if let Some(p) = common.patience {
        rc.train.patience = p;
    }
    if let Some(h) = common.horizon {
        rc.model.horizon = h;
    }
    if let Some(lb) = common.lookback {
        rc.model.lookback = lb;
    }
    if let Some(v) = &common.variant {
        rc.model.variant = v.0;
    }
    if let Some(s) = &common.scan {
        rc.train.scan = s.0;
    }
    if let Some(p) = &common.precision {
        rc.train.precision = p.0;
    }
    if let Some(t) = common.threads {
        rc.train.threads = t;
    }
    if let Some(m) = common.max_steps {
        rc.train.max_steps_per_epoch = Some(m);
    }
    let data_path = common
        .data
        .clone()
        .or_else(|| rc.data.path.clone().map(PathBuf::from))
        .ok_or_else(|| Error::Config("no dataset: pass --data or set data.path".into()))?;
    Ok((rc, data_path))
}

fn build_task(rc: &RunConfig, data_path: &Path) -> Result<ForecastTask> {
    let table = load_csv(data_path)?;
    make_splits(
        table,
        rc.data.splits,
        rc.model.lookback,
        rc.model.horizon,
        rc.model.instance_norm,
    )
}

fn write_or_stdout(out: &Option<PathBuf>, content: &str) -> Result<()> {
    match out {
        Some(p) => {
            if let Some(dir) = p.parent() {
                if !dir.as_os_str().is_empty() {
                    std::fs::create_dir_all(dir)?;
                }
            }
            std::fs::write(p, content)?;
        }
        None => print!("{content}"),
    }
    Ok(())
}

fn norm_meta(task: &ForecastTask) -> NormMeta {
    NormMeta {
        mean: task.spec.mean.clone(),
        std: task.spec.std.clone(),
        channel_names: task.table.channel_names.clone(),
    }
}

fn cmd_train(args: TrainArgs) -> Result<()> {
    let (rc, data_path) = resolve_run_config(&args.common)?;
    setup_threads(rc.train.threads);
    match rc.train.precision {
        DType::F32 => run_train::<f32>(&rc, &data_path, &args.out_dir),
        DType::F64 => run_train::<f64>(&rc, &data_path, &args.out_dir),
    }
}

fn run_train<T: Elem>(rc: &RunConfig, data_path: &Path, out_dir: &Path) -> Result<()> {
    let task = build_task(rc, data_path)?;
    let model_cfg = rc.model_config(task.table.channels())?;
    let train_cfg = rc.train_config();
    let mut model = PolyMamba::<T>::new(model_cfg, train_cfg.seed)?;
    let report = train(&mut model, &task, &train_cfg)?;
    std::fs::create_dir_all(out_dir)?;
    save_checkpoint(out_dir.join("model.ckpt"), &model, Some(&norm_meta(&task)))?;
    std::fs::write(
        out_dir.join("metrics.jsonl"),
        metrics_to_jsonl(&report.history)?,
    )?;
    let test = evaluate(
        &model,
        &task,
        Split::Test,
        train_cfg.scan,
        train_cfg.batch_size,
        report.best_epoch,
    )?;
    let baseline = baseline_last_value(&task, Split::Test)?;
    println!(
        "best epoch {} val mse {:.6}; test mse {:.6} mae {:.6} (last-value baseline mse {:.6}); artifacts in {}",
        report.best_epoch,
        report.best_val_mse,
        test.mse,
        test.mae,
        baseline.mse,
        out_dir.display()
    );
    Ok(())
}

fn cmd_eval(args: EvalArgs) -> Result<()> {
    let split: Split = args.split.parse()?;
    let meta = peek_checkpoint(&args.ckpt)?;
    let scan = args.scan.as_ref().map(|s| s.0).unwrap_or(ScanMode::Parallel);
    let record = match meta.dtype {
        DType::F32 => run_eval::<f32>(&args, split, scan)?,
        DType::F64 => run_eval::<f64>(&args, split, scan)?,
    };
    let json = serde_json::to_string(&record)
        .map_err(|e| Error::Config(format!("metrics: {e}")))?;
    write_or_stdout(&args.out, &format!("{json}\n"))
}

fn eval_task_for_ckpt<T: Elem>(
    model: &PolyMamba<T>,
    data: &Path,
) -> Result<ForecastTask> {
    let table = load_csv(data)?;
    make_splits(
        table,
        SplitStrategy::default(),
        model.cfg.patch.lookback,
        model.cfg.horizon,
        model.cfg.instance_norm,
    )
}

fn run_eval<T: Elem>(
    args: &EvalArgs,
    split: Split,
    scan: ScanMode,
) -> Result<crate::pipeline::MetricsRecord> {
    let (model, _) = load_checkpoint::<T>(&args.ckpt)?;
    let task = eval_task_for_ckpt(&model, &args.data)?;
    evaluate(&model, &task, split, scan, args.batch_size, 0)
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|x| x.trim())
        .filter(|x| !x.is_empty())
        .map(|x| {
            x.parse::<T>()
                .map_err(|_| Error::Config(format!("bad {what} entry `{x}`")))
        })
        .collect()
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let (rc, data_path) = resolve_run_config(&args.common)?;
    setup_threads(rc.train.threads);
    let seeds: Vec<u64> = parse_list(&args.seeds, "seed")?;
    let variants: Vec<PolyVariant> = match &args.variants {
        Some(v) => parse_list::<PolyVariant>(v, "variant")?,
        None => PolyVariant::ALL.to_vec(),
    };
    let rows = match rc.train.precision {
        DType::F32 => {
            let task = build_task(&rc, &data_path)?;
            let cfg = rc.model_config(task.table.channels())?;
            ablate::<f32>(&task, &cfg, &rc.train_config(), &seeds, &variants)?
        }
        DType::F64 => {
            let task = build_task(&rc, &data_path)?;
            let cfg = rc.model_config(task.table.channels())?;
            ablate::<f64>(&task, &cfg, &rc.train_config(), &seeds, &variants)?
        }
    };
    write_or_stdout(&args.out, &ablation_to_csv(&rows))
}

fn cmd_forecast(args: ForecastArgs) -> Result<()> {
    let meta = peek_checkpoint(&args.ckpt)?;
    match meta.dtype {
        DType::F32 => run_forecast::<f32>(&args),
        DType::F64 => run_forecast::<f64>(&args),
    }
}

fn run_forecast<T: Elem>(args: &ForecastArgs) -> Result<()> {
    let (model, norm) = load_checkpoint::<T>(&args.ckpt)?;
    let norm = norm.ok_or_else(|| {
        Error::data("checkpoint carries no normalization statistics; cannot forecast raw data")
    })?;
    let table = load_csv(&args.data)?;
    if table.channels() != norm.channel_names.len() {
        return Err(Error::data(format!(
            "data has {} channels, checkpoint expects {}",
            table.channels(),
            norm.channel_names.len()
        )));
    }
    let lb = model.cfg.patch.lookback;
    if table.rows() < lb {
        return Err(Error::data(format!(
            "need at least {lb} rows of context, got {}",
            table.rows()
        )));
    }
    let c = table.channels();
    // z-score the last lookback rows with the checkpoint statistics
    let mut x = Tensor::<T>::zeros(&[1, c, lb]);
    let start = table.rows() - lb;
    for k in 0..c {
        for r in 0..lb {
            let v = (table.values.at(&[start + r, k]) - norm.mean[k]) / norm.std[k];
            x.set(&[0, k, r], T::from_f64(v));
        }
    }
    let scan = args.scan.as_ref().map(|s| s.0).unwrap_or(ScanMode::Parallel);
    let pred = model.predict(&x, scan)?;
    // back to the raw scale
    let h = model.cfg.horizon;
    let step = if table.rows() >= 2 {
        table.timestamps[table.rows() - 1] - table.timestamps[table.rows() - 2]
    } else {
        chrono::Duration::hours(1)
    };
    let mut out = String::from("date,");
    out.push_str(&table.channel_names.join(","));
    out.push('\n');
    let last_ts = table.timestamps[table.rows() - 1];
    for r in 0..h {
        let ts = last_ts + step * (r as i32 + 1);
        out.push_str(&ts.format("%Y-%m-%d %H:%M:%S").to_string());
        for k in 0..c {
            let v = pred.at(&[0, k, r]).as_f64() * norm.std[k] + norm.mean[k];
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    write_or_stdout(&args.out, &out)
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let regime: Regime = args.regime.parse()?;
    let cfg = SynthConfig {
        t: args.t,
        c: args.c,
        seed: args.seed,
        regime,
        noise_std: args.noise_std,
        lag_base: args.lag_base,
        alpha_override: args.alpha,
        tau_override: args.tau,
    };
    let (table, meta) = synth_cdt(&cfg)?;
    if let Some(dir) = args.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    save_csv(&table, &args.out)?;
    let meta_path = args.out.with_extension("meta.json");
    let meta_json = serde_json::to_string_pretty(&meta)
        .map_err(|e| Error::Config(format!("meta: {e}")))?;
    std::fs::write(&meta_path, meta_json)?;
    eprintln!(
        "wrote {} rows x {} channels to {}; generator parameters in {}",
        args.t,
        args.c,
        args.out.display(),
        meta_path.display()
    );
    Ok(())
}

fn demo_signal(args: &HippoDemoArgs) -> Result<Vec<(f64, f64)>> {
    let t0 = args.t_end * 0.1;
    match args.signal.as_str() {
        "sin" => Ok((0..=args.samples)
            .map(|i| {
                let t = t0 + (args.t_end - t0) * i as f64 / args.samples as f64;
                (t, (std::f64::consts::TAU * t / args.t_end).sin())
            })
            .collect()),
        "square" => Ok((0..=args.samples)
            .map(|i| {
                let t = t0 + (args.t_end - t0) * i as f64 / args.samples as f64;
                let phase = (std::f64::consts::TAU * t / args.t_end).sin();
                (t, if phase >= 0.0 { 1.0 } else { -1.0 })
            })
            .collect()),
        other => {
            if let Some(path) = other.strip_prefix("csv:") {
                let table = load_csv(path)?;
                Ok((0..table.rows())
                    .map(|r| ((r + 1) as f64, table.values.at(&[r, 0])))
                    .collect())
            } else {
                Err(Error::Config(format!(
                    "unknown signal `{other}` (expected sin, square, or csv:<path>)"
                )))
            }
        }
    }
}

fn cmd_hippo_demo(args: HippoDemoArgs) -> Result<()> {
    if args.n == 0 {
        return Err(Error::Config("state size must be positive".into()));
    }
    let signal = demo_signal(&args)?;
    let traj = hippo::legs_online_approx(&signal, args.n)?;
    let horizon = *traj.times.last().unwrap();
    let coeffs = traj.final_coeffs();
    let mut out = String::from("t,u,u_hat,abs_err\n");
    let mut max_err = 0.0f64;
    for &(t, u) in &signal {
        let u_hat = hippo::reconstruct(&coeffs, horizon, t)?;
        let err = (u_hat - u).abs();
        max_err = max_err.max(err);
        out.push_str(&format!("{t},{u},{u_hat},{err}\n"));
    }
    write_or_stdout(&args.out, &out)?;
    let meta = serde_json::json!({
        "n": args.n,
        "signal": args.signal,
        "samples": signal.len(),
        "start_time_clamp": traj.start_time,
        "initial_state": "constant-history equilibrium c0 = u(t0)*sqrt(2)*e0",
        "stepper": "explicit midpoint, one step per sample interval",
        "max_abs_err": max_err,
    });
    match &args.out {
        Some(p) => {
            let mp = p.with_extension("meta.json");
            std::fs::write(&mp, serde_json::to_string_pretty(&meta).unwrap())?;
            eprintln!("max |u_hat - u| = {max_err:.3e}; metadata in {}", mp.display());
        }
        None => eprintln!("{meta}"),
    }
    Ok(())
}

fn cmd_basis_check(args: BasisCheckArgs) -> Result<()> {
    if args.c == 0 {
        return Err(Error::Config("need at least one variable".into()));
    }
    let order = args.quad_order.unwrap_or((args.deg + 1).max(8));
    let rule = QuadratureRule::gauss_legendre(order)?;
    let basis = legendre::enumerate_indices(args.c, args.deg);
    let gram = legendre::gram_matrix(args.c, args.deg, &rule)?;
    let m = basis.len();
    let label = |idx: &legendre::MultiIndex| {
        idx.degrees
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("_")
    };
    let mut out = String::from("index");
    for b in &basis {
        out.push(',');
        out.push_str(&label(b));
    }
    out.push('\n');
    let mut max_off = 0.0f64;
    let mut max_diag_dev = 0.0f64;
    for i in 0..m {
        out.push_str(&label(&basis[i]));
        for j in 0..m {
            let v = gram.at(&[i, j]);
            if i == j {
                let expect: f64 = basis[i]
                    .degrees
                    .iter()
                    .map(|&n| 2.0 / (2.0 * n as f64 + 1.0))
                    .product();
                max_diag_dev = max_diag_dev.max((v - expect).abs());
            } else {
                max_off = max_off.max(v.abs());
            }
            out.push_str(&format!(",{v}"));
        }
        out.push('\n');
    }
    write_or_stdout(&args.out, &out)?;
    eprintln!(
        "{} basis elements; max |off-diagonal| = {max_off:.3e}, max diagonal deviation = {max_diag_dev:.3e}",
        m
    );
    Ok(())
}

fn cmd_scan_bench(args: ScanBenchArgs) -> Result<()> {
    let lengths: Vec<usize> = parse_list(&args.l, "length")?;
    if lengths.is_empty() {
        return Err(Error::Config("no lengths given".into()));
    }
    let run_seq = matches!(args.r#impl.as_str(), "seq" | "both");
    let run_par = matches!(args.r#impl.as_str(), "par" | "both");
    if !run_seq && !run_par {
        return Err(Error::Config(format!(
            "unknown impl `{}` (expected seq, par, or both)",
            args.r#impl
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
    let mut out = String::from("l,impl,wall_ms,max_abs_diff_vs_seq\n");
    for &l in &lengths {
        let a = Tensor::<f64>::from_fn(&[l, args.lanes], |_| rng.random_range(0.0..1.0));
        let b = Tensor::<f64>::from_fn(&[l, args.lanes], |_| rng.random_range(-1.0..1.0));
        let seq = {
            let t0 = std::time::Instant::now();
            let r = sscan::scan_seq_stacked(&a, &b, None)?;
            (r, t0.elapsed().as_secs_f64() * 1e3)
        };
        if run_seq {
            out.push_str(&format!("{l},seq,{:.3},0\n", seq.1));
        }
        if run_par {
            let t0 = std::time::Instant::now();
            let par = sscan::scan_par_stacked(&a, &b, None)?;
            let ms = t0.elapsed().as_secs_f64() * 1e3;
            let diff = par.max_abs_diff(&seq.0);
            out.push_str(&format!("{l},par,{ms:.3},{diff:e}\n"));
        }
    }
    write_or_stdout(&args.out, &out)
}

fn cmd_inspect(args: InspectArgs) -> Result<()> {
    let meta = peek_checkpoint(&args.ckpt)?;
    match meta.dtype {
        DType::F32 => run_inspect::<f32>(&args),
        DType::F64 => run_inspect::<f64>(&args),
    }
}

fn matrix_csv<T: Elem>(
    layers: &[(usize, Tensor<T>)],
    col_names: &[String],
    row_names: &[String],
) -> String {
    let mut out = String::from("layer,row");
    for c in col_names {
        out.push(',');
        out.push_str(c);
    }
    out.push('\n');
    let (rows, cols) = (row_names.len(), col_names.len());
    let mut avg = vec![0.0f64; rows * cols];
    for (layer, m) in layers {
        for r in 0..rows {
            out.push_str(&format!("{layer},{}", row_names[r]));
            for c in 0..cols {
                let v = m.at(&[r, c]).as_f64();
                avg[r * cols + c] += v / layers.len() as f64;
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
    }
    for r in 0..rows {
        out.push_str(&format!("avg,{}", row_names[r]));
        for c in 0..cols {
            out.push_str(&format!(",{}", avg[r * cols + c]));
        }
        out.push('\n');
    }
    out
}

fn run_inspect<T: Elem>(args: &InspectArgs) -> Result<()> {
    let (model, norm) = load_checkpoint::<T>(&args.ckpt)?;
    let channel_names: Vec<String> = norm
        .as_ref()
        .map(|n| n.channel_names.clone())
        .unwrap_or_else(|| (0..model.cfg.channels).map(|k| format!("ch{k}")).collect());
    let layers = model.cfg.layers;
    match args.what.as_str() {
        "lcm" => {
            let mut mats = Vec::new();
            for layer in 0..layers {
                if let Some(id) = model.store.lookup(&format!("block{layer}.poly.l_mat")) {
                    mats.push((layer, model.store.value(id).clone()));
                }
            }
            if mats.is_empty() {
                return Err(Error::data("this variant has no channel-mixing matrix"));
            }
            write_or_stdout(&args.out, &matrix_csv(&mats, &channel_names, &channel_names))
        }
        "mopa" => {
            let mut mats = Vec::new();
            let mut order_names = Vec::new();
            for layer in 0..layers {
                if let Some(id) = model.store.lookup(&format!("block{layer}.poly.m_mat")) {
                    let m = model.store.value(id).clone();
                    if order_names.is_empty() {
                        let k = m.shape()[1];
                        let first = model.cfg.d_state - k;
                        order_names = (first..model.cfg.d_state)
                            .map(|o| format!("order{o}"))
                            .collect();
                    }
                    mats.push((layer, m));
                }
            }
            if mats.is_empty() {
                return Err(Error::data("this variant has no order-reweighting matrix"));
            }
            write_or_stdout(&args.out, &matrix_csv(&mats, &order_names, &channel_names))
        }
        "gates" => {
            let data = args.data.as_ref().ok_or_else(|| {
                Error::Config("`--what gates` needs --data to drive the model".into())
            })?;
            let task = eval_task_for_ckpt(&model, data)?;
            let origins = task.origins(Split::Test);
            let take = origins.len().min(32);
            let (x, _) = task.window_batch::<T>(&origins[..take])?;
            let stats = model.gate_stats(&x, ScanMode::Parallel)?;
            let mut rows: Vec<(usize, Tensor<f64>)> = Vec::new();
            let mut order_names = Vec::new();
            for (layer, s) in stats.into_iter().enumerate() {
                if let Some(m) = s {
                    if order_names.is_empty() {
                        let k = m.shape()[1];
                        let first = model.cfg.d_state - k;
                        order_names = (first..model.cfg.d_state)
                            .map(|o| format!("order{o}"))
                            .collect();
                    }
                    rows.push((layer, m));
                }
            }
            if rows.is_empty() {
                return Err(Error::data("this variant has no gate"));
            }
            write_or_stdout(&args.out, &matrix_csv(&rows, &order_names, &channel_names))
        }
        other => Err(Error::Config(format!(
            "unknown --what `{other}` (expected lcm, mopa, or gates)"
        ))),
    }
}
