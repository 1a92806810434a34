//! Orchestration: constrained pre-training (templates + scalers trained,
//! weights always reconstructed), scaler-only adaptation of a frozen bank to
//! a new depth/width, target-model materialization, and an unconstrained
//! control arm trained the ordinary way.
//!
//! Runs are bit-deterministic per seed: one base stream is split into
//! independent init/data/mask streams, and every loop walks parameters in a
//! fixed order.

use thiserror::Error;

use crate::factorization::{
    kron_gradients, reconstruct, ConfigError, FactorizationConfig, ScalerSet, TemplateBank,
};
use crate::linalg::{Matrix, Rng};
use crate::nn::{
    model_loss, register_model, AdamConfig, AdamState, Dataset, ModelVars, TinyTransformerConfig,
    UntemplatedParams,
};
use crate::packing::{pack_transformer, unpack_transformer, LayerWeights, ModelDims};
use crate::scaling::{adapt_template, MaskError, WidthSchedule};

/// Initialization std for templates, scalers, and fresh weights.
const INIT_STD: f64 = 0.02;

/// Abort training when the loss leaves this range.
const DIVERGENCE_LIMIT: f64 = 1e4;

const SALT_INIT: u64 = 1;
const SALT_DATA: u64 = 2;
const SALT_MASK: u64 = 3;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error("cannot inherit scalers: source has {source_b} block columns, target needs {target_b}")]
    InheritMismatch { source_b: usize, target_b: usize },
}

/// Optimizer and loop settings shared by all training runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimSettings {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub steps: usize,
    pub batch: usize,
    pub seed: u64,
}

impl OptimSettings {
    pub fn desk_default() -> Self {
        OptimSettings {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            weight_decay: 0.0,
            steps: 500,
            batch: 64,
            seed: 0,
        }
    }

    fn adam(&self) -> AdamConfig {
        AdamConfig {
            lr: self.lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: 1e-8,
            weight_decay: self.weight_decay,
        }
    }
}

/// Synthetic-data settings.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DataSettings {
    pub vocab: usize,
    pub seq_len: usize,
    pub n_examples: usize,
}

impl DataSettings {
    pub fn desk_default() -> Self {
        DataSettings {
            vocab: 16,
            seq_len: 16,
            n_examples: 64,
        }
    }
}

/// Full configuration of one constrained pre-training run.
#[derive(Debug, Clone)]
pub struct PretrainConfig {
    pub dims: ModelDims,
    pub factorization: FactorizationConfig,
    pub schedule: WidthSchedule,
    pub optim: OptimSettings,
    pub data: DataSettings,
}

impl PretrainConfig {
    /// Desk defaults: L=4, H=2, d=4, N=8 templates on an 8×8 grid,
    /// widths {4, 6, 8}.
    pub fn desk_default() -> Self {
        PretrainConfig {
            dims: ModelDims::new(4, 2, 4, None).unwrap(),
            factorization: FactorizationConfig::new(8, 8, 8).unwrap(),
            schedule: WidthSchedule::default_for(8),
            optim: OptimSettings::desk_default(),
            data: DataSettings::desk_default(),
        }
    }

    pub fn transformer_config(&self) -> TinyTransformerConfig {
        TinyTransformerConfig::new(self.dims, self.data.vocab, self.data.seq_len, 2)
    }
}

/// One history line: the training loss of the step and the mask it sampled.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub loss: f64,
    pub mask_r1: usize,
    pub mask_r2: usize,
}

/// Output of [`pretrain_constrained`].
#[derive(Debug, Clone)]
pub struct PretrainRun {
    pub bank: TemplateBank,
    pub scalers: ScalerSet,
    pub extras: UntemplatedParams,
    pub history: Vec<StepRecord>,
    /// Whether `N·r1·r2 < L·P` held (violations train fine but defeat the
    /// low-rank bottleneck; the CLI warns).
    pub bottleneck_ok: bool,
}

impl PretrainRun {
    /// The unified matrix the trained templates and scalers reconstruct.
    pub fn final_w(&self) -> Matrix {
        reconstruct(&self.bank, &self.scalers, None)
    }
}

fn streams(seed: u64) -> (Rng, u64, Rng) {
    let base = Rng::new(seed);
    let init = base.derive(SALT_INIT);
    let data_seed = base.derive(SALT_DATA).next_u64();
    let mask = base.derive(SALT_MASK);
    (init, data_seed, mask)
}

/// Gradients of the six templated matrices, packed back into `∂loss/∂W`.
fn packed_layer_grads(
    grads: &crate::autodiff::Gradients,
    vars: &ModelVars,
    dims: &ModelDims,
) -> Matrix {
    let grad_layers: Vec<LayerWeights> = vars
        .layers
        .iter()
        .map(|lv| LayerWeights {
            w_q: grads.wrt(lv.w_q),
            w_k: grads.wrt(lv.w_k),
            w_v: grads.wrt(lv.w_v),
            w_o: grads.wrt(lv.w_o),
            w_in: grads.wrt(lv.w_in),
            w_out: grads.wrt(lv.w_out),
        })
        .collect();
    pack_transformer(&grad_layers, dims)
}

/// Gradients of the untemplated parameters, in the optimizer's fixed order.
fn extras_grads(grads: &crate::autodiff::Gradients, vars: &ModelVars) -> Vec<Matrix> {
    let mut out = vec![
        grads.wrt(vars.token_emb),
        grads.wrt(vars.pos_emb),
        grads.wrt(vars.head),
    ];
    for ev in &vars.extras {
        out.push(grads.wrt(ev.ln1_gain));
        out.push(grads.wrt(ev.ln1_bias));
        out.push(grads.wrt(ev.ln2_gain));
        out.push(grads.wrt(ev.ln2_bias));
        out.push(grads.wrt(ev.b1));
        out.push(grads.wrt(ev.b2));
    }
    out
}

/// Constrained pre-training: per step, sample a structured mask, reconstruct
/// `W` from the masked templates, run the model, backpropagate to `∂loss/∂W`,
/// map through the Kronecker adjoint, and update templates, scalers, and
/// untemplated parameters with Adam. `W` itself is never a trainable value.
pub fn pretrain_constrained(cfg: &PretrainConfig) -> Result<PretrainRun, TrainError> {
    let tconfig = cfg.transformer_config();
    let p = cfg.dims.packed_cols();
    let (mut init_rng, data_seed, mut mask_rng) = streams(cfg.optim.seed);

    let mut bank = TemplateBank::random(cfg.factorization, INIT_STD, &mut init_rng);
    let mut scalers = ScalerSet::random(cfg.factorization, cfg.dims.layers, p, INIT_STD, &mut init_rng)?;
    let mut extras = UntemplatedParams::init(&tconfig, &mut init_rng);
    let bottleneck_ok = cfg.factorization.has_bottleneck(cfg.dims.layers, p);

    let data = Dataset::synth(data_seed, cfg.data.n_examples, cfg.data.vocab, cfg.data.seq_len);
    let mut adam = AdamState::new(cfg.optim.adam());
    let mut history = Vec::with_capacity(cfg.optim.steps);

    for step in 0..cfg.optim.steps {
        let mask = cfg.schedule.sample(&mut mask_rng);
        let w = reconstruct(&bank, &scalers, Some(&mask));
        let layer_weights = unpack_transformer(&w, &cfg.dims);
        let batch = data.batch_cyclic(step * cfg.optim.batch, cfg.optim.batch);

        let mut tape = crate::autodiff::Tape::new();
        let vars = register_model(&mut tape, &layer_weights, &extras);
        let loss = model_loss(&mut tape, &tconfig, &vars, &batch);
        let loss_val = tape.scalar(loss);
        if !loss_val.is_finite() || loss_val > DIVERGENCE_LIMIT {
            return Err(TrainError::Diverged {
                step,
                loss: loss_val,
            });
        }

        let grads = tape.backward(loss);
        let gw = packed_layer_grads(&grads, &vars, &cfg.dims);
        let (d_templates, d_scalers) = kron_gradients(&gw, &bank, &scalers, Some(&mask));
        let e_grads = extras_grads(&grads, &vars);

        let mut params: Vec<&mut Matrix> = vec![bank.templates_mut()];
        params.extend(scalers.scalers_mut().iter_mut());
        params.extend(extras.params_mut());
        let mut grad_refs: Vec<&Matrix> = vec![&d_templates];
        grad_refs.extend(d_scalers.iter());
        grad_refs.extend(e_grads.iter());
        adam.step(&mut params, &grad_refs);

        history.push(StepRecord {
            step,
            loss: loss_val,
            mask_r1: mask.r1_eff,
            mask_r2: mask.r2_eff,
        });
    }

    Ok(PretrainRun {
        bank,
        scalers,
        extras,
        history,
        bottleneck_ok,
    })
}

/// How target scalers are created before adaptation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ScalerInit {
    /// Depth-wise linear interpolation of the pre-trained scaler rows onto
    /// the target layer positions.
    Inherit,
    /// Zero-mean Gaussian, std 0.02.
    Random,
}

impl std::str::FromStr for ScalerInit {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "inherit" => Ok(ScalerInit::Inherit),
            "random" => Ok(ScalerInit::Random),
            other => Err(format!("unknown scaler init '{other}' (inherit|random)")),
        }
    }
}

/// Configuration of one scaler-only adaptation run.
#[derive(Debug, Clone)]
pub struct AdaptConfig {
    pub target: ModelDims,
    pub init: ScalerInit,
    pub optim: OptimSettings,
    pub data: DataSettings,
    /// Fraction of the data stream used for adaptation (the "small subset").
    pub subset_fraction: f64,
}

impl AdaptConfig {
    pub fn desk_default(target: ModelDims, seed: u64) -> Self {
        AdaptConfig {
            target,
            init: ScalerInit::Inherit,
            optim: OptimSettings {
                steps: 300,
                batch: 32,
                seed,
                ..OptimSettings::desk_default()
            },
            data: DataSettings {
                n_examples: 20480,
                ..DataSettings::desk_default()
            },
            subset_fraction: 0.1,
        }
    }
}

/// Output of [`adapt_scalers`]: the width-adapted frozen bank, trained
/// target scalers, and fresh untemplated parameters.
#[derive(Debug, Clone)]
pub struct AdaptRun {
    pub bank: TemplateBank,
    pub scalers: ScalerSet,
    pub extras: UntemplatedParams,
    pub history: Vec<StepRecord>,
    pub bank_checksum_before: u64,
    pub bank_checksum_after: u64,
}

impl AdaptRun {
    /// Parameters the adaptation mechanism trains through the factorization.
    pub fn trainable_scaler_params(&self) -> usize {
        self.scalers.param_count()
    }

    /// Materializes the target model's templated weights.
    pub fn layer_weights(&self, dims: &ModelDims) -> Vec<LayerWeights> {
        unpack_transformer(&reconstruct(&self.bank, &self.scalers, None), dims)
    }
}

/// Instantiates target scalers from a source set: depth-wise linear
/// interpolation of rows onto the target layer count.
pub fn inherit_scalers(
    source: &ScalerSet,
    config: FactorizationConfig,
    target_layers: usize,
    target_p: usize,
) -> Result<ScalerSet, TrainError> {
    let a = config.area();
    if target_p % a != 0 {
        return Err(ConfigError::NotDivisible { p: target_p, a }.into());
    }
    let b_target = target_p / a;
    if b_target != source.b_cols() {
        return Err(TrainError::InheritMismatch {
            source_b: source.b_cols(),
            target_b: b_target,
        });
    }
    let l_src = source.layers();
    let mats = source
        .scalers()
        .iter()
        .map(|s| {
            Matrix::from_fn(target_layers, b_target, |l, b| {
                let pos = if target_layers == 1 {
                    (l_src - 1) as f64 / 2.0
                } else {
                    l as f64 * (l_src - 1) as f64 / (target_layers - 1) as f64
                };
                let lo = pos.floor() as usize;
                let hi = pos.ceil() as usize;
                let frac = pos - lo as f64;
                (1.0 - frac) * s.get(lo, b) + frac * s.get(hi, b)
            })
        })
        .collect();
    Ok(ScalerSet::new(config, target_layers, target_p, mats)?)
}

/// Scaler-only adaptation: the bank is width-adapted to the target, frozen,
/// and only scalers plus untemplated parameters receive updates. Training
/// uses the first `subset_fraction` of the data stream.
pub fn adapt_scalers(
    bank: &TemplateBank,
    source_scalers: &ScalerSet,
    cfg: &AdaptConfig,
) -> Result<AdaptRun, TrainError> {
    let d_target = cfg.target.embed_dim();
    let adapted_bank = adapt_template(bank, d_target, d_target);
    let fcfg = adapted_bank.config();
    let p = cfg.target.packed_cols();
    let tconfig = TinyTransformerConfig::new(cfg.target, cfg.data.vocab, cfg.data.seq_len, 2);
    let (mut init_rng, data_seed, _) = streams(cfg.optim.seed);

    let mut scalers = match cfg.init {
        ScalerInit::Inherit => inherit_scalers(source_scalers, fcfg, cfg.target.layers, p)?,
        ScalerInit::Random => {
            ScalerSet::random(fcfg, cfg.target.layers, p, INIT_STD, &mut init_rng)?
        }
    };
    let mut extras = UntemplatedParams::init(&tconfig, &mut init_rng);

    let full = Dataset::synth(data_seed, cfg.data.n_examples, cfg.data.vocab, cfg.data.seq_len);
    let subset_len = ((cfg.data.n_examples as f64 * cfg.subset_fraction).ceil() as usize).max(1);
    let data = full.subset(subset_len);

    let checksum_before = adapted_bank.checksum();
    let mut adam = AdamState::new(cfg.optim.adam());
    let mut history = Vec::with_capacity(cfg.optim.steps);

    for step in 0..cfg.optim.steps {
        let w = reconstruct(&adapted_bank, &scalers, None);
        let layer_weights = unpack_transformer(&w, &cfg.target);
        let batch = data.batch_cyclic(step * cfg.optim.batch, cfg.optim.batch);

        let mut tape = crate::autodiff::Tape::new();
        let vars = register_model(&mut tape, &layer_weights, &extras);
        let loss = model_loss(&mut tape, &tconfig, &vars, &batch);
        let loss_val = tape.scalar(loss);
        if !loss_val.is_finite() || loss_val > DIVERGENCE_LIMIT {
            return Err(TrainError::Diverged {
                step,
                loss: loss_val,
            });
        }

        let grads = tape.backward(loss);
        let gw = packed_layer_grads(&grads, &vars, &cfg.target);
        // Templates are frozen: only the scaler half of the adjoint is used.
        let (_, d_scalers) = kron_gradients(&gw, &adapted_bank, &scalers, None);
        let e_grads = extras_grads(&grads, &vars);

        let mut params: Vec<&mut Matrix> = Vec::new();
        params.extend(scalers.scalers_mut().iter_mut());
        params.extend(extras.params_mut());
        let mut grad_refs: Vec<&Matrix> = Vec::new();
        grad_refs.extend(d_scalers.iter());
        grad_refs.extend(e_grads.iter());
        adam.step(&mut params, &grad_refs);

        history.push(StepRecord {
            step,
            loss: loss_val,
            mask_r1: fcfg.r1,
            mask_r2: fcfg.r2,
        });
    }

    let checksum_after = adapted_bank.checksum();
    Ok(AdaptRun {
        bank: adapted_bank,
        scalers,
        extras,
        history,
        bank_checksum_before: checksum_before,
        bank_checksum_after: checksum_after,
    })
}

/// Materializes full target-model parameters: reconstruct, unpack, and
/// attach freshly initialized untemplated parameters.
pub fn init_target(
    bank: &TemplateBank,
    scalers: &ScalerSet,
    config: &TinyTransformerConfig,
    seed: u64,
) -> (Vec<LayerWeights>, UntemplatedParams) {
    assert_eq!(
        scalers.row_width(),
        config.dims.packed_cols(),
        "init_target: scaler row width {} != target P {}",
        scalers.row_width(),
        config.dims.packed_cols()
    );
    assert_eq!(
        scalers.layers(),
        config.dims.layers,
        "init_target: scalers carry {} layers, target has {}",
        scalers.layers(),
        config.dims.layers
    );
    let w = reconstruct(bank, scalers, None);
    let weights = unpack_transformer(&w, &config.dims);
    let mut init_rng = Rng::new(seed).derive(SALT_INIT);
    let extras = UntemplatedParams::init(config, &mut init_rng);
    (weights, extras)
}

/// Output of the unconstrained control arm.
#[derive(Debug, Clone)]
pub struct UnconstrainedRun {
    pub weights: Vec<LayerWeights>,
    pub extras: UntemplatedParams,
    pub history: Vec<StepRecord>,
}

/// Fresh Gaussian layer weights (std 0.02).
pub fn random_layer_weights(dims: &ModelDims, rng: &mut Rng) -> Vec<LayerWeights> {
    let d = dims.embed_dim();
    (0..dims.layers)
        .map(|_| LayerWeights {
            w_q: rng.gaussian_matrix(d, d, INIT_STD),
            w_k: rng.gaussian_matrix(d, d, INIT_STD),
            w_v: rng.gaussian_matrix(d, d, INIT_STD),
            w_o: rng.gaussian_matrix(d, d, INIT_STD),
            w_in: rng.gaussian_matrix(d, dims.ffn_dim, INIT_STD),
            w_out: rng.gaussian_matrix(dims.ffn_dim, d, INIT_STD),
        })
        .collect()
}

/// Trains all parameters directly from the given starting point.
pub fn train_unconstrained_from(
    mut weights: Vec<LayerWeights>,
    mut extras: UntemplatedParams,
    tconfig: &TinyTransformerConfig,
    data: &Dataset,
    optim: &OptimSettings,
) -> Result<UnconstrainedRun, TrainError> {
    let mut adam = AdamState::new(optim.adam());
    let mut history = Vec::with_capacity(optim.steps);
    for step in 0..optim.steps {
        let batch = data.batch_cyclic(step * optim.batch, optim.batch);
        let mut tape = crate::autodiff::Tape::new();
        let vars = register_model(&mut tape, &weights, &extras);
        let loss = model_loss(&mut tape, tconfig, &vars, &batch);
        let loss_val = tape.scalar(loss);
        if !loss_val.is_finite() || loss_val > DIVERGENCE_LIMIT {
            return Err(TrainError::Diverged {
                step,
                loss: loss_val,
            });
        }
        let grads = tape.backward(loss);
        let e_grads = extras_grads(&grads, &vars);
        let mut layer_grads: Vec<Matrix> = Vec::with_capacity(vars.layers.len() * 6);
        for lv in &vars.layers {
            layer_grads.push(grads.wrt(lv.w_q));
            layer_grads.push(grads.wrt(lv.w_k));
            layer_grads.push(grads.wrt(lv.w_v));
            layer_grads.push(grads.wrt(lv.w_o));
            layer_grads.push(grads.wrt(lv.w_in));
            layer_grads.push(grads.wrt(lv.w_out));
        }

        let mut params: Vec<&mut Matrix> = Vec::new();
        for lw in &mut weights {
            params.push(&mut lw.w_q);
            params.push(&mut lw.w_k);
            params.push(&mut lw.w_v);
            params.push(&mut lw.w_o);
            params.push(&mut lw.w_in);
            params.push(&mut lw.w_out);
        }
        params.extend(extras.params_mut());
        let mut grad_refs: Vec<&Matrix> = Vec::new();
        grad_refs.extend(layer_grads.iter());
        grad_refs.extend(e_grads.iter());
        adam.step(&mut params, &grad_refs);

        history.push(StepRecord {
            step,
            loss: loss_val,
            mask_r1: 0,
            mask_r2: 0,
        });
    }
    Ok(UnconstrainedRun {
        weights,
        extras,
        history,
    })
}

/// The control arm: direct parameterization of `W`, same trainer, same data
/// pipeline, seeded Gaussian init.
pub fn train_unconstrained(
    dims: &ModelDims,
    data_settings: &DataSettings,
    optim: &OptimSettings,
) -> Result<UnconstrainedRun, TrainError> {
    let tconfig = TinyTransformerConfig::new(*dims, data_settings.vocab, data_settings.seq_len, 2);
    let (mut init_rng, data_seed, _) = streams(optim.seed);
    let weights = random_layer_weights(dims, &mut init_rng);
    let extras = UntemplatedParams::init(&tconfig, &mut init_rng);
    let data = Dataset::synth(
        data_seed,
        data_settings.n_examples,
        data_settings.vocab,
        data_settings.seq_len,
    );
    train_unconstrained_from(weights, extras, &tconfig, &data, optim)
}
