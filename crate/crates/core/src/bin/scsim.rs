//! Experiment runner: kernel micro-statistics, the convex schedule sweep,
//! and MNIST training under noisy backends, all emitting deterministic CSV.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use scsim::data::{Dataset, Split};
use scsim::mlp::{self, MlpConfig, TrainTrace};
use scsim::noise::{dot_product_variance, BackendMode, BitBudget, GemmBackend};
use scsim::optim::{self, GdConfig, QuadraticProblem};
use scsim::records::{fmt_f64, CsvTable, ExperimentRecord};
use scsim::stochastic::{inner_product_bitsim, StreamParams};
use scsim::{Error, RngState};

#[derive(Parser)]
#[command(name = "scsim", version, about = "Stochastic-computing simulator experiments")]
struct Cli {
    /// TOML config file; command-line flags override file values
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Root seed for every derived random stream
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output CSV path
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Also append long-format metric records to this CSV
    #[arg(long, global = true)]
    records: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Empirical mean/variance of the stochastic kernels vs the closed-form
    /// predictions, over a (a, b, d, N) grid
    Kernels {
        /// Operand values; cells run over all ordered pairs
        #[arg(long, value_delimiter = ',')]
        values: Option<Vec<f64>>,
        /// Inner-product lane counts
        #[arg(long, value_delimiter = ',')]
        dims: Option<Vec<usize>>,
        /// Bit-sequence lengths
        #[arg(long, value_delimiter = ',')]
        n_bits: Option<Vec<u32>>,
        /// Encoding range r
        #[arg(long)]
        range: Option<f64>,
        /// Monte-Carlo trials per cell
        #[arg(long)]
        trials: Option<u64>,
    },
    /// Accuracy vs simulated-run-time sweep of noisy gradient descent over
    /// an (eta, gamma) schedule grid
    Convex {
        #[arg(long, value_delimiter = ',')]
        eta: Option<Vec<f64>>,
        #[arg(long, value_delimiter = ',')]
        gamma: Option<Vec<f64>>,
        #[arg(long)]
        k_max: Option<u32>,
        #[arg(long)]
        repetitions: Option<u32>,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        alpha0: Option<f64>,
        #[arg(long)]
        n0: Option<u32>,
        #[arg(long)]
        strong_convexity: Option<f64>,
        #[arg(long)]
        lipschitz: Option<f64>,
        #[arg(long)]
        t0: Option<f64>,
        #[arg(long)]
        sigma0_sq: Option<f64>,
    },
    /// Train the MLP on MNIST: a precise control run plus one run per
    /// stochastic bit budget, with per-epoch metrics and checkpoints
    Train {
        /// Backend for the noisy runs
        #[arg(long, value_enum)]
        backend: Option<BackendArg>,
        /// Bit budgets, one noisy run each (e.g. 16,64,256)
        #[arg(long, value_delimiter = ',')]
        n_bits: Option<Vec<u32>>,
        #[arg(long)]
        epochs: Option<u32>,
        /// Directory holding the four MNIST IDX files (plain or .gz)
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Use only the first N training images (0 = all)
        #[arg(long)]
        train_limit: Option<usize>,
        /// Skip the precise control run
        #[arg(long)]
        no_control: bool,
        /// Where checkpoints are written (default: alongside the CSV)
        #[arg(long)]
        checkpoint_dir: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum BackendArg {
    Exact,
    Bitsim,
    Analytic,
}

// ---------------------------------------------------------------------------
// Config file

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    seed: Option<u64>,
    out: Option<PathBuf>,
    #[serde(default)]
    kernels: KernelsFile,
    #[serde(default)]
    convex: ConvexFile,
    #[serde(default)]
    train: TrainFile,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct KernelsFile {
    values: Option<Vec<f64>>,
    dims: Option<Vec<usize>>,
    n_bits: Option<Vec<u32>>,
    range: Option<f64>,
    trials: Option<u64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConvexFile {
    eta: Option<Vec<f64>>,
    gamma: Option<Vec<f64>>,
    k_max: Option<u32>,
    repetitions: Option<u32>,
    dim: Option<usize>,
    alpha0: Option<f64>,
    n0: Option<u32>,
    strong_convexity: Option<f64>,
    lipschitz: Option<f64>,
    t0: Option<f64>,
    sigma0_sq: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct TrainFile {
    backend: Option<String>,
    n_bits: Option<Vec<u32>>,
    epochs: Option<u32>,
    data_dir: Option<PathBuf>,
    train_limit: Option<usize>,
    no_control: Option<bool>,
    checkpoint_dir: Option<PathBuf>,
    layer_sizes: Option<Vec<usize>>,
    batch_size: Option<usize>,
    momentum: Option<f64>,
    lr_initial: Option<f64>,
    lr_epoch_decay: Option<f64>,
    weight_decay: Option<f64>,
    init_sigma: Option<f64>,
    noisy_eval: Option<bool>,
}

fn load_file_config(path: Option<&Path>) -> Result<FileConfig, Error> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)
                .map_err(|e| Error::config(format!("cannot read config {}: {e}", p.display())))?;
            toml::from_str(&text)
                .map_err(|e| Error::config(format!("bad config {}: {e}", p.display())))
        }
    }
}

/// Flag beats file beats default.
fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

// ---------------------------------------------------------------------------
// kernels

#[derive(Debug, Serialize)]
struct KernelsConfig {
    values: Vec<f64>,
    dims: Vec<usize>,
    n_bits: Vec<u32>,
    range: f64,
    trials: u64,
    seed: u64,
}

fn run_kernels(cfg: &KernelsConfig) -> Result<(CsvTable, Vec<ExperimentRecord>), Error> {
    if cfg.values.is_empty() || cfg.dims.is_empty() || cfg.n_bits.is_empty() {
        return Err(Error::config("kernels grid must not be empty"));
    }
    if !(cfg.range > 0.0) {
        return Err(Error::config("range must be positive"));
    }
    if let Some(v) = cfg.values.iter().find(|v| **v < 0.0 || **v > cfg.range) {
        return Err(Error::config(format!(
            "grid value {v} outside the encodable range [0, {}]",
            cfg.range
        )));
    }
    if cfg.trials < 2 {
        return Err(Error::config("need at least 2 trials"));
    }
    if cfg.dims.contains(&0) {
        return Err(Error::config("lane count must be positive"));
    }

    let meta = serde_json::to_string(cfg).expect("config serializes");
    let mut table = CsvTable::new(
        "kernels",
        &meta,
        "a,b,d,n_bits,r,emp_mean,emp_var,pred_var,trials",
    );
    let mut records = Vec::new();

    let mut cell_idx = 0u64;
    for &a in &cfg.values {
        for &b in &cfg.values {
            for &d in &cfg.dims {
                for &n in &cfg.n_bits {
                    let params = StreamParams::new(n, cfg.range, cfg.seed)?;
                    let va = vec![a; d];
                    let vb = vec![b; d];
                    let pred = dot_product_variance(&va, &vb, cfg.range, n)?;
                    let cell_rng = RngState::stream(cfg.seed, cell_idx);
                    let (sum, sum_sq) = (0..cfg.trials)
                        .into_par_iter()
                        .map(|t| {
                            let c = inner_product_bitsim(&va, &vb, &params, &cell_rng.substream(t))
                                .expect("grid values validated");
                            (c, c * c)
                        })
                        .reduce(|| (0.0, 0.0), |x, y| (x.0 + y.0, x.1 + y.1));
                    let mean = sum / cfg.trials as f64;
                    let var = (sum_sq / cfg.trials as f64 - mean * mean).max(0.0);
                    table.push_row(format!(
                        "{},{},{},{},{},{},{},{},{}",
                        fmt_f64(a),
                        fmt_f64(b),
                        d,
                        n,
                        fmt_f64(cfg.range),
                        fmt_f64(mean),
                        fmt_f64(var),
                        fmt_f64(pred),
                        cfg.trials
                    ));
                    let params_str = format!(
                        "a={};b={};d={d};n={n};r={}",
                        fmt_f64(a),
                        fmt_f64(b),
                        fmt_f64(cfg.range)
                    );
                    for (metric, value) in
                        [("emp_mean", mean), ("emp_var", var), ("pred_var", pred)]
                    {
                        records.push(ExperimentRecord {
                            experiment: "kernels".into(),
                            params: params_str.clone(),
                            metric: metric.into(),
                            value,
                            repetition: 0,
                            seed: cfg.seed,
                        });
                    }
                    cell_idx += 1;
                }
            }
        }
    }
    Ok((table, records))
}

// ---------------------------------------------------------------------------
// convex

#[derive(Debug, Serialize)]
struct ConvexConfig {
    eta: Vec<f64>,
    gamma: Vec<f64>,
    dim: usize,
    gd: GdConfig,
}

fn run_convex(cfg: &ConvexConfig) -> Result<(CsvTable, Vec<ExperimentRecord>), Error> {
    if cfg.eta.is_empty() || cfg.gamma.is_empty() {
        return Err(Error::config("schedule grid must not be empty"));
    }
    for &eta in &cfg.eta {
        if eta == 1.0 && cfg.gd.alpha0 * cfg.gd.strong_convexity >= 1.0 {
            return Err(Error::config(format!(
                "contraction violated: alpha0 * l = {} >= 1 with eta = 1",
                cfg.gd.alpha0 * cfg.gd.strong_convexity
            )));
        }
    }
    let problem = QuadraticProblem::sample(
        cfg.dim,
        cfg.gd.strong_convexity,
        cfg.gd.lipschitz,
        &RngState::stream(cfg.gd.seed, u64::MAX),
    )?;
    let mut grid = Vec::new();
    for &eta in &cfg.eta {
        for &gamma in &cfg.gamma {
            grid.push((eta, gamma));
        }
    }
    let table = optim::run_sweep(&problem, &grid, &cfg.gd)?;

    let meta = serde_json::to_string(cfg).expect("config serializes");
    // normalization anchor: the gamma = 1 total simulated time
    let mut csv = CsvTable::new(
        "convex",
        &format!("{meta} time_normalization=gamma1_total"),
        "eta,gamma,mean_final_sq_error,ci_low,ci_high,total_time,normalized_time",
    );
    let mut records = Vec::new();
    for cell in &table.cells {
        let normalized = cell.total_time / table.reference_total_time;
        csv.push_row(format!(
            "{},{},{},{},{},{},{}",
            fmt_f64(cell.eta),
            fmt_f64(cell.gamma),
            fmt_f64(cell.mean_final_sq_error),
            fmt_f64(cell.ci_low),
            fmt_f64(cell.ci_high),
            fmt_f64(cell.total_time),
            fmt_f64(normalized)
        ));
        let params = format!("eta={};gamma={}", fmt_f64(cell.eta), fmt_f64(cell.gamma));
        for (metric, value) in [
            ("mean_final_sq_error", cell.mean_final_sq_error),
            ("total_time", cell.total_time),
            ("normalized_time", normalized),
        ] {
            records.push(ExperimentRecord {
                experiment: "convex".into(),
                params: params.clone(),
                metric: metric.into(),
                value,
                repetition: 0,
                seed: cfg.gd.seed,
            });
        }
    }
    Ok((csv, records))
}

// ---------------------------------------------------------------------------
// train

#[derive(Debug, Serialize)]
struct TrainConfig {
    mlp: MlpConfig,
    mode: BackendMode,
    n_bits: Vec<u32>,
    data_dir: PathBuf,
    train_limit: usize,
    control: bool,
    checkpoint_dir: Option<PathBuf>,
}

fn run_train(cfg: &TrainConfig, out: &Path) -> Result<(CsvTable, Vec<ExperimentRecord>), Error> {
    let train_full = Dataset::load_dir(&cfg.data_dir, Split::Train)?;
    let test_set = Dataset::load_dir(&cfg.data_dir, Split::Test)?;
    if cfg.train_limit == 0 {
        if let Err(e) = train_full.validate_canonical() {
            eprintln!("note: {e}; continuing with the records present");
        }
    }
    let train_set = if cfg.train_limit > 0 {
        train_full.subset(cfg.train_limit)
    } else {
        train_full
    };

    let mut runs: Vec<(String, GemmBackend)> = Vec::new();
    if cfg.control {
        runs.push(("control".into(), GemmBackend::exact()));
    }
    if cfg.mode != BackendMode::Exact {
        for &n in &cfg.n_bits {
            let backend = match cfg.mode {
                BackendMode::BitSim => GemmBackend::bit_sim(n, cfg.mlp.seed)?,
                BackendMode::Analytic => GemmBackend::analytic(BitBudget::finite(n)?, cfg.mlp.seed),
                BackendMode::Exact => unreachable!(),
            };
            runs.push((format!("SC-{n}"), backend));
        }
    }
    if runs.is_empty() {
        return Err(Error::config(
            "nothing to run: control disabled and no stochastic budgets listed",
        ));
    }

    let meta = serde_json::to_string(cfg).expect("config serializes");
    let mut csv = CsvTable::new(
        "train",
        &meta,
        "run,epoch,train_xent,test_miscount,test_error,n_bits",
    );
    let mut records = Vec::new();
    let ckpt_dir = cfg
        .checkpoint_dir
        .clone()
        .unwrap_or_else(|| out.parent().unwrap_or(Path::new(".")).to_path_buf());

    for (label, backend) in &runs {
        let run_cfg = MlpConfig {
            backend: *backend,
            ..cfg.mlp.clone()
        };
        eprintln!(
            "training {label}: {} epochs on {} images",
            run_cfg.epochs,
            train_set.len()
        );
        let (model, trace) = mlp::train(&run_cfg, &train_set, &test_set)?;
        push_train_rows(&mut csv, &mut records, label, &trace, run_cfg.seed);
        for rec in &trace.epochs {
            eprintln!(
                "  {label} epoch {}: train xent {:.4}, test error {:.2}% ({:.1}s)",
                rec.epoch,
                rec.train_xent,
                rec.test_error * 100.0,
                rec.wall_secs
            );
        }
        let ckpt = ckpt_dir.join(format!("{}.ckpt", label.to_lowercase()));
        mlp::save_checkpoint(&model, &ckpt)?;
        eprintln!("  checkpoint: {}", ckpt.display());
    }
    Ok((csv, records))
}

fn push_train_rows(
    csv: &mut CsvTable,
    records: &mut Vec<ExperimentRecord>,
    label: &str,
    trace: &TrainTrace,
    seed: u64,
) {
    for rec in &trace.epochs {
        csv.push_row(format!(
            "{},{},{},{},{},{}",
            label,
            rec.epoch,
            fmt_f64(rec.train_xent),
            rec.test_miscount,
            fmt_f64(rec.test_error),
            rec.n_bits
        ));
        let params = format!("run={label};epoch={}", rec.epoch);
        for (metric, value) in [
            ("train_xent", rec.train_xent),
            ("test_error", rec.test_error),
        ] {
            records.push(ExperimentRecord {
                experiment: "train".into(),
                params: params.clone(),
                metric: metric.into(),
                value,
                repetition: 0,
                seed,
            });
        }
    }
}

// ---------------------------------------------------------------------------

fn append_records(path: &Path, records: &[ExperimentRecord]) -> Result<(), Error> {
    use std::io::Write;
    let fresh = !path.exists();
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)?;
    if fresh {
        writeln!(file, "{}", ExperimentRecord::HEADER)?;
    }
    for r in records {
        writeln!(file, "{}", r.csv_row())?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), Error> {
    let file = load_file_config(cli.config.as_deref())?;
    let seed = pick(cli.seed, file.seed, 0);

    let (table, records, out) = match cli.command {
        Command::Kernels {
            values,
            dims,
            n_bits,
            range,
            trials,
        } => {
            let f = file.kernels;
            let cfg = KernelsConfig {
                values: pick(values, f.values, vec![0.0, 0.2, 0.5, 0.8]),
                dims: pick(dims, f.dims, vec![1, 4]),
                n_bits: pick(n_bits, f.n_bits, vec![16, 64, 256]),
                range: pick(range, f.range, 1.0),
                trials: pick(trials, f.trials, 10_000),
                seed,
            };
            let out = pick(cli.out, file.out, PathBuf::from("kernels.csv"));
            let (t, r) = run_kernels(&cfg)?;
            (t, r, out)
        }
        Command::Convex {
            eta,
            gamma,
            k_max,
            repetitions,
            dim,
            alpha0,
            n0,
            strong_convexity,
            lipschitz,
            t0,
            sigma0_sq,
        } => {
            let f = file.convex;
            let defaults = GdConfig::default();
            let strong_convexity = pick(
                strong_convexity,
                f.strong_convexity,
                defaults.strong_convexity,
            );
            let lipschitz = pick(lipschitz, f.lipschitz, defaults.lipschitz);
            let gd = GdConfig {
                alpha0: pick(
                    alpha0,
                    f.alpha0,
                    optim::optimal_fixed_rate(strong_convexity, lipschitz),
                ),
                eta: 1.0,
                n0: pick(n0, f.n0, defaults.n0),
                gamma: 1.0,
                k_max: pick(k_max, f.k_max, defaults.k_max),
                strong_convexity,
                lipschitz,
                t0: pick(t0, f.t0, defaults.t0),
                repetitions: pick(repetitions, f.repetitions, defaults.repetitions),
                seed,
                sigma0_sq: sigma0_sq.or(f.sigma0_sq),
            };
            let cfg = ConvexConfig {
                eta: pick(eta, f.eta, vec![0.8, 0.9, 1.0]),
                gamma: pick(gamma, f.gamma, vec![0.7, 0.8, 0.9, 1.0]),
                dim: pick(dim, f.dim, 10),
                gd,
            };
            let out = pick(cli.out, file.out, PathBuf::from("convex.csv"));
            let (t, r) = run_convex(&cfg)?;
            (t, r, out)
        }
        Command::Train {
            backend,
            n_bits,
            epochs,
            data_dir,
            train_limit,
            no_control,
            checkpoint_dir,
        } => {
            let f = file.train;
            let defaults = MlpConfig::default();
            let mode = match backend {
                Some(BackendArg::Exact) => BackendMode::Exact,
                Some(BackendArg::Bitsim) => BackendMode::BitSim,
                Some(BackendArg::Analytic) => BackendMode::Analytic,
                None => match f.backend.as_deref() {
                    None | Some("analytic") => BackendMode::Analytic,
                    Some("bitsim") => BackendMode::BitSim,
                    Some("exact") => BackendMode::Exact,
                    Some(other) => return Err(Error::config(format!("unknown backend '{other}'"))),
                },
            };
            let mlp = MlpConfig {
                layer_sizes: f.layer_sizes.unwrap_or(defaults.layer_sizes),
                batch_size: f.batch_size.unwrap_or(defaults.batch_size),
                momentum: f.momentum.unwrap_or(defaults.momentum),
                lr_initial: f.lr_initial.unwrap_or(defaults.lr_initial),
                lr_epoch_decay: f.lr_epoch_decay.unwrap_or(defaults.lr_epoch_decay),
                weight_decay: f.weight_decay.unwrap_or(defaults.weight_decay),
                epochs: pick(epochs, f.epochs, defaults.epochs),
                init_sigma: f.init_sigma.unwrap_or(defaults.init_sigma),
                backend: GemmBackend::exact(),
                seed,
                noisy_eval: f.noisy_eval.unwrap_or(false),
            };
            let cfg = TrainConfig {
                mlp,
                mode,
                n_bits: pick(n_bits, f.n_bits, vec![256]),
                data_dir: pick(data_dir, f.data_dir, PathBuf::from("data")),
                train_limit: pick(train_limit, f.train_limit, 0),
                control: !(no_control || f.no_control.unwrap_or(false)),
                checkpoint_dir: checkpoint_dir.or(f.checkpoint_dir),
            };
            let out = pick(cli.out, file.out, PathBuf::from("train.csv"));
            let (t, r) = run_train(&cfg, &out)?;
            (t, r, out)
        }
    };

    table.write_to(&out)?;
    eprintln!("wrote {} rows to {}", table.row_count(), out.display());
    if let Some(rec_path) = cli.records {
        append_records(&rec_path, &records)?;
        eprintln!(
            "appended {} records to {}",
            records.len(),
            rec_path.display()
        );
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(3),
                Error::Data(_) | Error::Parse { .. } | Error::Io(_) => ExitCode::from(4),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
