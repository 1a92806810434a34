//! `weit` — train weight templates under Kronecker constraints, fit banks to
//! existing weight matrices, and initialize models of new depths/widths from
//! a frozen bank.
//!
//! Exit codes: 0 success, 1 usage/file/config errors, 2 training divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use weit_core::analysis::{
    estimate_lipschitz, generalization_gap_bound, min_templates, spectrum, BoundInputs,
};
use weit_core::factorization::{fit, FactorizationConfig, ScalerSet, TemplateBank};
use weit_core::io::{
    load_bank, load_matrix_dump, load_run_config, save_bank, save_history, save_matrix_dump,
};
use weit_core::linalg::Rng;
use weit_core::nn::{eval_loss, Dataset, TinyTransformerConfig};
use weit_core::packing::ModelDims;
use weit_core::pipeline::{
    adapt_scalers, init_target, pretrain_constrained, train_unconstrained, AdaptConfig,
    DataSettings, OptimSettings, ScalerInit, TrainError,
};

/// Salt mixed into the run seed to build held-out evaluation data.
const EVAL_SEED_SALT: u64 = 0xE7A1;
const EVAL_EXAMPLES: usize = 256;

#[derive(Parser)]
#[command(name = "weit", version, about, max_term_width = 100)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Constrained pre-training from a JSON run config; writes a bank file
    /// and a tab-separated loss history.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// History path; defaults to `<out>.history`.
        #[arg(long)]
        history: Option<PathBuf>,
    },
    /// Optimal rank-N Kronecker fit of a raw weight-matrix dump.
    Fit {
        /// Raw dump: rows u64, cols u64, then row-major f64, little-endian.
        #[arg(long)]
        weights: PathBuf,
        /// Number of templates.
        #[arg(long)]
        n: usize,
        /// Template span A = r1·r2.
        #[arg(long)]
        a: usize,
        #[arg(long)]
        out: PathBuf,
        /// Template grid rows; defaults to √A when A is square, else 1.
        #[arg(long)]
        r1: Option<usize>,
    },
    /// Materialize full model weights for a target geometry from a bank.
    InitTarget {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        depth: usize,
        #[arg(long)]
        heads: usize,
        #[arg(long, default_value_t = 4)]
        head_dim: usize,
        #[arg(long, default_value = "inherit")]
        init: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Output path for the unified weight-matrix dump.
        #[arg(long)]
        out: PathBuf,
    },
    /// Scaler-only adaptation of a frozen bank to a target geometry.
    Adapt {
        #[arg(long)]
        bank: PathBuf,
        #[arg(long)]
        depth: usize,
        #[arg(long)]
        heads: usize,
        #[arg(long, default_value_t = 4)]
        head_dim: usize,
        #[arg(long, default_value_t = 300)]
        steps: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "inherit")]
        init: String,
        #[command(flatten)]
        data: DataArgs,
        /// Output bank path; defaults to `<bank>.adapted`.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Singular spectrum, minimal template count, and bound diagnostics for
    /// a raw weight-matrix dump.
    Analyze {
        #[arg(long)]
        weights: PathBuf,
        /// Template span A = r1·r2.
        #[arg(long)]
        a: usize,
        #[arg(long, default_value_t = 0.5)]
        epsilon: f64,
        /// Lipschitz constant; estimated from a linear probe when omitted.
        #[arg(long)]
        k: Option<f64>,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long, default_value_t = 1000)]
        samples: usize,
    },
    /// Unconstrained control run from the same JSON run config.
    Baseline {
        #[arg(long)]
        config: PathBuf,
        /// History path; defaults to `baseline.history` next to the config.
        #[arg(long)]
        history: Option<PathBuf>,
    },
}

#[derive(Args)]
struct DataArgs {
    #[arg(long, default_value_t = 16)]
    vocab: usize,
    #[arg(long, default_value_t = 16)]
    seq_len: usize,
    /// Training-stream size; adaptation uses the first 10%.
    #[arg(long, default_value_t = 20480)]
    n_examples: usize,
}

enum CliError {
    /// Anything that is the caller's fault or the filesystem's: exit 1.
    Usage(String),
    /// Loss went non-finite or over the guard: exit 2.
    Diverged(String),
}

impl CliError {
    fn exit_code(&self) -> ExitCode {
        match self {
            CliError::Usage(_) => ExitCode::from(1),
            CliError::Diverged(_) => ExitCode::from(2),
        }
    }

    fn message(&self) -> &str {
        match self {
            CliError::Usage(m) | CliError::Diverged(m) => m,
        }
    }
}

impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Diverged { .. } => CliError::Diverged(e.to_string()),
            other => CliError::Usage(other.to_string()),
        }
    }
}

macro_rules! usage_from {
    ($($ty:ty),*) => {
        $(impl From<$ty> for CliError {
            fn from(e: $ty) -> Self {
                CliError::Usage(e.to_string())
            }
        })*
    };
}

usage_from!(
    weit_core::io::BankFileError,
    weit_core::io::RunConfigError,
    weit_core::factorization::ConfigError,
    weit_core::packing::DimsError,
    weit_core::linalg::LinalgError
);

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version are not errors; everything else exits 1.
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    print!("{e}");
                    ExitCode::SUCCESS
                }
                _ => {
                    eprint!("{e}");
                    ExitCode::from(1)
                }
            };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message());
            e.exit_code()
        }
    }
}

/// `WEIT_SEED`, when set, overrides the seed carried by a run config.
fn env_seed_override(seed: u64) -> Result<u64, CliError> {
    match std::env::var("WEIT_SEED") {
        Ok(text) => text
            .parse::<u64>()
            .map_err(|e| CliError::Usage(format!("WEIT_SEED: {e}"))),
        Err(_) => Ok(seed),
    }
}

fn parse_init(text: &str) -> Result<ScalerInit, CliError> {
    text.parse::<ScalerInit>().map_err(CliError::Usage)
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Pretrain {
            config,
            out,
            history,
        } => cmd_pretrain(&config, &out, history),
        Command::Fit {
            weights,
            n,
            a,
            out,
            r1,
        } => cmd_fit(&weights, n, a, &out, r1),
        Command::InitTarget {
            bank,
            depth,
            heads,
            head_dim,
            init,
            seed,
            out,
        } => cmd_init_target(&bank, depth, heads, head_dim, &init, seed, &out),
        Command::Adapt {
            bank,
            depth,
            heads,
            head_dim,
            steps,
            seed,
            init,
            data,
            out,
        } => cmd_adapt(&bank, depth, heads, head_dim, steps, seed, &init, &data, out),
        Command::Analyze {
            weights,
            a,
            epsilon,
            k,
            delta,
            samples,
        } => cmd_analyze(&weights, a, epsilon, k, delta, samples),
        Command::Baseline { config, history } => cmd_baseline(&config, history),
    }
}

fn default_history_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().unwrap_or_default().to_os_string();
    name.push(".history");
    out.with_file_name(name)
}

fn cmd_pretrain(config: &Path, out: &Path, history: Option<PathBuf>) -> Result<(), CliError> {
    let mut cfg = load_run_config(config)?;
    cfg.optim.seed = env_seed_override(cfg.optim.seed)?;
    if !cfg
        .factorization
        .has_bottleneck(cfg.dims.layers, cfg.dims.packed_cols())
    {
        eprintln!(
            "warning: low-rank bottleneck violated: N·r1·r2 = {} is not below L·P = {}",
            cfg.factorization.n_templates * cfg.factorization.area(),
            cfg.dims.layers * cfg.dims.packed_cols()
        );
    }
    let run = pretrain_constrained(&cfg)?;
    save_bank(out, &run.bank, &run.scalers)?;
    let history_path = history.unwrap_or_else(|| default_history_path(out));
    save_history(&history_path, &run.history)?;
    let initial = run.history.first().map(|r| r.loss).unwrap_or(f64::NAN);
    let final_loss = run.history.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "pretrain: {} steps, loss {initial:.6} -> {final_loss:.6}",
        run.history.len()
    );
    println!("bank: {}", out.display());
    println!("history: {}", history_path.display());
    Ok(())
}

fn grid_for_span(a: usize, r1: Option<usize>) -> Result<(usize, usize), CliError> {
    if let Some(r1) = r1 {
        if r1 == 0 || a % r1 != 0 {
            return Err(CliError::Usage(format!(
                "--r1 {r1} does not divide the template span {a}"
            )));
        }
        return Ok((r1, a / r1));
    }
    let root = (a as f64).sqrt().round() as usize;
    if root * root == a {
        Ok((root, root))
    } else {
        Ok((1, a))
    }
}

fn cmd_fit(
    weights: &Path,
    n: usize,
    a: usize,
    out: &Path,
    r1: Option<usize>,
) -> Result<(), CliError> {
    let w = load_matrix_dump(weights)?;
    let (r1, r2) = grid_for_span(a, r1)?;
    let config = FactorizationConfig::new(n, r1, r2)?;
    let result = fit(&w, config)?;
    save_bank(out, &result.bank, &result.scalers)?;
    println!(
        "fit: {}x{} weights, N={n}, grid {r1}x{r2}",
        w.rows(),
        w.cols()
    );
    println!("residual: {:.6e}", result.residual);
    let tail: Vec<String> = result.sigma[n..]
        .iter()
        .take(8)
        .map(|s| format!("{s:.6e}"))
        .collect();
    println!("spectrum tail (sigma_{}..): [{}]", n + 1, tail.join(", "));
    println!("bank: {}", out.display());
    Ok(())
}

fn load_bank_for_target(
    bank_path: &Path,
    depth: usize,
    heads: usize,
    head_dim: usize,
) -> Result<(TemplateBank, ScalerSet, ModelDims), CliError> {
    let (bank, scalers) = load_bank(bank_path)?;
    let dims = ModelDims::new(depth, heads, head_dim, None)?;
    Ok((bank, scalers, dims))
}

#[allow(clippy::too_many_arguments)]
fn cmd_init_target(
    bank_path: &Path,
    depth: usize,
    heads: usize,
    head_dim: usize,
    init: &str,
    seed: u64,
    out: &Path,
) -> Result<(), CliError> {
    let (bank, scalers, target) = load_bank_for_target(bank_path, depth, heads, head_dim)?;
    let init = parse_init(init)?;
    let mut cfg = AdaptConfig::desk_default(target, seed);
    cfg.init = init;
    cfg.optim.steps = 0;
    let adapted = adapt_scalers(&bank, &scalers, &cfg)?;
    let tconfig = TinyTransformerConfig::new(target, cfg.data.vocab, cfg.data.seq_len, 2);
    let (weights, extras) = init_target(&adapted.bank, &adapted.scalers, &tconfig, seed);
    let w = weit_core::factorization::reconstruct(&adapted.bank, &adapted.scalers, None);
    save_matrix_dump(out, &w)?;
    let templated: usize = target.layers * target.packed_cols();
    let scaler_params = adapted.scalers.param_count();
    println!(
        "init-target: L={} H={} d={} (D={}, P={})",
        target.layers,
        target.heads,
        target.head_dim,
        target.embed_dim(),
        target.packed_cols()
    );
    println!("templated weights: {templated}");
    println!(
        "scaler parameters: {scaler_params} ({:.3}% of templated)",
        100.0 * scaler_params as f64 / templated as f64
    );
    println!("untemplated parameters: {}", extras.param_count());
    println!("layers materialized: {}", weights.len());
    println!("weights: {}", out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_adapt(
    bank_path: &Path,
    depth: usize,
    heads: usize,
    head_dim: usize,
    steps: usize,
    seed: u64,
    init: &str,
    data: &DataArgs,
    out: Option<PathBuf>,
) -> Result<(), CliError> {
    let (bank, scalers, target) = load_bank_for_target(bank_path, depth, heads, head_dim)?;
    let init = parse_init(init)?;
    let data_settings = DataSettings {
        vocab: data.vocab,
        seq_len: data.seq_len,
        n_examples: data.n_examples,
    };
    let base_cfg = AdaptConfig {
        target,
        init,
        optim: OptimSettings {
            steps: 0,
            seed,
            ..OptimSettings::desk_default()
        },
        data: data_settings,
        subset_fraction: 0.1,
    };

    let tconfig = TinyTransformerConfig::new(target, data.vocab, data.seq_len, 2);
    let eval = Dataset::synth(
        seed ^ EVAL_SEED_SALT,
        EVAL_EXAMPLES,
        data.vocab,
        data.seq_len,
    );

    // Zero-step initialization, the comparison point.
    let init_run = adapt_scalers(&bank, &scalers, &base_cfg)?;
    let w0 = init_run.layer_weights(&target);
    let loss0 = eval_loss(&tconfig, &w0, &init_run.extras, &eval, 32);

    // If the target matches the source geometry, report how faithfully the
    // inherited scalers reproduce the pre-trained unified matrix.
    if init == ScalerInit::Inherit
        && scalers.layers() == target.layers
        && scalers.row_width() == target.packed_cols()
    {
        let w_src = weit_core::factorization::reconstruct(&bank, &scalers, None);
        let w_init = weit_core::factorization::reconstruct(&init_run.bank, &init_run.scalers, None);
        println!(
            "reconstruction error vs pretrain: {:e}",
            w_src.sub(&w_init).frobenius_norm()
        );
    }

    let mut cfg = base_cfg;
    cfg.optim.steps = steps;
    let run = adapt_scalers(&bank, &scalers, &cfg)?;
    if run.bank_checksum_before != run.bank_checksum_after {
        return Err(CliError::Usage(
            "internal invariant broken: bank changed during adaptation".into(),
        ));
    }
    let w1 = run.layer_weights(&target);
    let loss1 = eval_loss(&tconfig, &w1, &run.extras, &eval, 32);

    let out = out.unwrap_or_else(|| {
        let mut name = bank_path.file_name().unwrap_or_default().to_os_string();
        name.push(".adapted");
        bank_path.with_file_name(name)
    });
    save_bank(&out, &run.bank, &run.scalers)?;
    println!(
        "adapt: L={} H={} d={}, {steps} steps, seed {seed}",
        target.layers, target.heads, target.head_dim
    );
    println!("eval loss: 0-step {loss0:.6} -> adapted {loss1:.6}");
    println!("bank checksum (frozen): {:016x}", run.bank_checksum_after);
    println!("adapted bank: {}", out.display());
    Ok(())
}

fn cmd_analyze(
    weights: &Path,
    a: usize,
    epsilon: f64,
    k: Option<f64>,
    delta: f64,
    samples: usize,
) -> Result<(), CliError> {
    let w = load_matrix_dump(weights)?;
    let spec = spectrum(&w, a)?;
    println!(
        "spectrum: {} values over ({}·{})x{} rearrangement",
        spec.sigma.len(),
        spec.layers,
        spec.blocks_b,
        spec.span_a
    );
    let shown: Vec<String> = spec.sigma.iter().take(16).map(|s| format!("{s:.6e}")).collect();
    println!("sigma: [{}]{}", shown.join(", "), if spec.sigma.len() > 16 { " ..." } else { "" });
    println!("numerical rank: {}", spec.numerical_rank());

    // Lipschitz estimate: a row-vector probe through the matrix itself when
    // no constant is supplied. A sampled lower bound, not a certificate.
    let k_hat = match k {
        Some(k) => k,
        None => {
            let mut rng = Rng::new(7);
            estimate_lipschitz(
                |x: &weit_core::linalg::Matrix, m| x.matmul(m),
                |rng| {
                    let x = rng.gaussian_matrix(1, w.rows(), 1.0);
                    x.scale(1.0 / x.frobenius_norm())
                },
                &w,
                &mut rng,
                64,
                0.1,
            )
            .k_hat
        }
    };
    let n = min_templates(&spec, epsilon, k_hat);
    println!("epsilon: {epsilon}, K: {k_hat:.6}");
    println!("min templates: N = {n}");

    let (r1, r2) = grid_for_span(a, None)?;
    let config = FactorizationConfig::new(n, r1, r2)?;
    let result = fit(&w, config)?;
    println!("fit residual at N: {:.6e}", result.residual);
    println!(
        "guaranteed output deviation: K·residual = {:.6} (target epsilon {epsilon})",
        k_hat * result.residual
    );

    let template_norm = result.bank.templates().frobenius_norm().max(1e-12);
    let scaler_norm = result
        .scalers
        .scalers()
        .iter()
        .map(|s| s.frobenius_norm().powi(2))
        .sum::<f64>()
        .sqrt()
        .max(1e-12);
    let inputs = BoundInputs {
        loss_lipschitz: 1.0,
        input_radius: 1.0,
        scaler_norm_cap: scaler_norm,
        template_norm,
        samples,
        delta,
        weight_cap: w.frobenius_norm().max(1e-12),
    };
    let bound = generalization_gap_bound(&inputs, 0.0);
    println!(
        "generalization gap bound (up to constants, R_hat=0, m={samples}, delta={delta}): {bound:.6}"
    );
    println!(
        "  complexity term uses C_S={scaler_norm:.6}, ||T||_F={template_norm:.6}"
    );
    Ok(())
}

fn cmd_baseline(config: &Path, history: Option<PathBuf>) -> Result<(), CliError> {
    let mut cfg = load_run_config(config)?;
    cfg.optim.seed = env_seed_override(cfg.optim.seed)?;
    let run = train_unconstrained(&cfg.dims, &cfg.data, &cfg.optim)?;
    let history_path = history.unwrap_or_else(|| {
        config
            .parent()
            .unwrap_or_else(|| Path::new("."))
            .join("baseline.history")
    });
    save_history(&history_path, &run.history)?;
    let initial = run.history.first().map(|r| r.loss).unwrap_or(f64::NAN);
    let final_loss = run.history.last().map(|r| r.loss).unwrap_or(f64::NAN);
    println!(
        "baseline: {} steps, loss {initial:.6} -> {final_loss:.6}",
        run.history.len()
    );
    println!("history: {}", history_path.display());
    Ok(())
}
