//! Desk-scale transformer classifier built on the autodiff tape.
//!
//! Pre-LayerNorm residual blocks: `x + MSA(LN(x))` then `x + FFN(LN(x))`,
//! with per-head Q/K/V taken as `D × d` column slices of the packed `D × D`
//! projections. The sequence representation is mean-pooled into a linear
//! classifier head. Everything outside the six templated matrices — token
//! and positional embeddings, LayerNorm gains/biases, FFN biases, and the
//! head — is an untemplated parameter trained directly.

use crate::autodiff::{Tape, Var};
use crate::linalg::{Matrix, Rng};
use crate::packing::{LayerWeights, ModelDims};

/// Shapes of one desk model plus its task geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TinyTransformerConfig {
    pub dims: ModelDims,
    pub vocab: usize,
    pub seq_len: usize,
    pub classes: usize,
}

impl TinyTransformerConfig {
    pub fn new(dims: ModelDims, vocab: usize, seq_len: usize, classes: usize) -> Self {
        assert!(classes >= 2, "need at least two classes, got {classes}");
        assert!(seq_len >= 1, "need a nonempty sequence");
        TinyTransformerConfig {
            dims,
            vocab,
            seq_len,
            classes,
        }
    }

    /// The desk defaults: L=4, H=2, d=4 (D=8), D′=32, vocab 16, 16 tokens,
    /// binary labels. Exercises every path (multi-head, B=12) in
    /// milliseconds.
    pub fn desk_default() -> Self {
        TinyTransformerConfig::new(ModelDims::new(4, 2, 4, None).unwrap(), 16, 16, 2)
    }

    pub fn with_dims(&self, dims: ModelDims) -> Self {
        TinyTransformerConfig { dims, ..*self }
    }
}

/// Per-layer parameters that are not templated.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerExtraParams {
    pub ln1_gain: Matrix,
    pub ln1_bias: Matrix,
    pub ln2_gain: Matrix,
    pub ln2_bias: Matrix,
    pub b1: Matrix,
    pub b2: Matrix,
}

/// All untemplated parameters of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct UntemplatedParams {
    pub token_emb: Matrix,
    pub pos_emb: Matrix,
    pub head: Matrix,
    pub layers: Vec<LayerExtraParams>,
}

impl UntemplatedParams {
    /// Embeddings start Gaussian (std 0.02), LayerNorm gains at one, biases
    /// at zero, and the head at zero so the initial loss is exactly ln C.
    pub fn init(config: &TinyTransformerConfig, rng: &mut Rng) -> Self {
        let d = config.dims.embed_dim();
        let ffn = config.dims.ffn_dim;
        let ones = |cols: usize| Matrix::from_fn(1, cols, |_, _| 1.0);
        UntemplatedParams {
            token_emb: rng.gaussian_matrix(config.vocab, d, 0.02),
            pos_emb: rng.gaussian_matrix(config.seq_len, d, 0.02),
            head: Matrix::zeros(d, config.classes),
            layers: (0..config.dims.layers)
                .map(|_| LayerExtraParams {
                    ln1_gain: ones(d),
                    ln1_bias: Matrix::zeros(1, d),
                    ln2_gain: ones(d),
                    ln2_bias: Matrix::zeros(1, d),
                    b1: Matrix::zeros(1, ffn),
                    b2: Matrix::zeros(1, d),
                })
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|m| m.data().len()).sum()
    }

    /// Fixed traversal order; the optimizer state relies on it.
    pub fn params(&self) -> Vec<&Matrix> {
        let mut out = vec![&self.token_emb, &self.pos_emb, &self.head];
        for l in &self.layers {
            out.extend([&l.ln1_gain, &l.ln1_bias, &l.ln2_gain, &l.ln2_bias, &l.b1, &l.b2]);
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out: Vec<&mut Matrix> =
            vec![&mut self.token_emb, &mut self.pos_emb, &mut self.head];
        for l in &mut self.layers {
            out.push(&mut l.ln1_gain);
            out.push(&mut l.ln1_bias);
            out.push(&mut l.ln2_gain);
            out.push(&mut l.ln2_bias);
            out.push(&mut l.b1);
            out.push(&mut l.b2);
        }
        out
    }
}

/// A batch of token sequences with integer class labels; `tokens` is
/// example-major, flattened to `batch · seq_len` entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub batch: usize,
    pub seq_len: usize,
    pub tokens: Vec<usize>,
    pub labels: Vec<usize>,
}

/// Tape handles for one layer's templated matrices.
#[derive(Debug, Clone, Copy)]
pub struct LayerWeightVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
    pub w_in: Var,
    pub w_out: Var,
}

/// Tape handles for one layer's untemplated parameters.
#[derive(Debug, Clone, Copy)]
pub struct LayerExtraVars {
    pub ln1_gain: Var,
    pub ln1_bias: Var,
    pub ln2_gain: Var,
    pub ln2_bias: Var,
    pub b1: Var,
    pub b2: Var,
}

/// All leaf handles of one registered model.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub layers: Vec<LayerWeightVars>,
    pub extras: Vec<LayerExtraVars>,
    pub token_emb: Var,
    pub pos_emb: Var,
    pub head: Var,
}

/// Registers every parameter as a tape leaf, in a fixed order.
pub fn register_model(
    tape: &mut Tape,
    weights: &[LayerWeights],
    extras: &UntemplatedParams,
) -> ModelVars {
    let layers = weights
        .iter()
        .map(|lw| LayerWeightVars {
            w_q: tape.leaf(lw.w_q.clone()),
            w_k: tape.leaf(lw.w_k.clone()),
            w_v: tape.leaf(lw.w_v.clone()),
            w_o: tape.leaf(lw.w_o.clone()),
            w_in: tape.leaf(lw.w_in.clone()),
            w_out: tape.leaf(lw.w_out.clone()),
        })
        .collect();
    let extra_vars = extras
        .layers
        .iter()
        .map(|l| LayerExtraVars {
            ln1_gain: tape.leaf(l.ln1_gain.clone()),
            ln1_bias: tape.leaf(l.ln1_bias.clone()),
            ln2_gain: tape.leaf(l.ln2_gain.clone()),
            ln2_bias: tape.leaf(l.ln2_bias.clone()),
            b1: tape.leaf(l.b1.clone()),
            b2: tape.leaf(l.b2.clone()),
        })
        .collect();
    ModelVars {
        layers,
        extras: extra_vars,
        token_emb: tape.leaf(extras.token_emb.clone()),
        pos_emb: tape.leaf(extras.pos_emb.clone()),
        head: tape.leaf(extras.head.clone()),
    }
}

/// Runs the transformer on a batch; returns per-example logits
/// (`batch × classes`).
pub fn forward(
    tape: &mut Tape,
    config: &TinyTransformerConfig,
    vars: &ModelVars,
    batch: &Batch,
) -> Var {
    assert_eq!(
        batch.seq_len, config.seq_len,
        "forward: batch seq_len {} != config seq_len {}",
        batch.seq_len, config.seq_len
    );
    assert_eq!(batch.tokens.len(), batch.batch * batch.seq_len);
    assert_eq!(batch.labels.len(), batch.batch);
    for &t in &batch.tokens {
        assert!(t < config.vocab, "forward: token id {t} >= vocab {}", config.vocab);
    }
    let n = batch.seq_len;
    let b = batch.batch;
    let heads = config.dims.heads;
    let d_head = config.dims.head_dim;

    let tok = tape.gather_rows(vars.token_emb, &batch.tokens);
    let pos_tiled = tape.concat_rows(&vec![vars.pos_emb; b]);
    let mut h = tape.add(tok, pos_tiled);

    for (lw, ex) in vars.layers.iter().zip(&vars.extras) {
        // Attention block.
        let normed = tape.layernorm(h);
        let normed = tape.mul_row(normed, ex.ln1_gain);
        let normed = tape.add_row(normed, ex.ln1_bias);
        let q = tape.matmul(normed, lw.w_q);
        let k = tape.matmul(normed, lw.w_k);
        let v = tape.matmul(normed, lw.w_v);
        let mut per_example = Vec::with_capacity(b);
        for e in 0..b {
            let mut per_head = Vec::with_capacity(heads);
            for hh in 0..heads {
                let qe = tape.slice(q, e * n, n, hh * d_head, d_head);
                let ke = tape.slice(k, e * n, n, hh * d_head, d_head);
                let ve = tape.slice(v, e * n, n, hh * d_head, d_head);
                let kt = tape.transpose(ke);
                let scores = tape.matmul(qe, kt);
                let scores = tape.scale(scores, 1.0 / (d_head as f64).sqrt());
                let probs = tape.softmax_rows(scores);
                per_head.push(tape.matmul(probs, ve));
            }
            per_example.push(tape.concat_cols(&per_head));
        }
        let ctx = tape.concat_rows(&per_example);
        let attn = tape.matmul(ctx, lw.w_o);
        h = tape.add(h, attn);

        // Feed-forward block.
        let normed2 = tape.layernorm(h);
        let normed2 = tape.mul_row(normed2, ex.ln2_gain);
        let normed2 = tape.add_row(normed2, ex.ln2_bias);
        let f = tape.matmul(normed2, lw.w_in);
        let f = tape.add_row(f, ex.b1);
        let f = tape.gelu(f);
        let f = tape.matmul(f, lw.w_out);
        let f = tape.add_row(f, ex.b2);
        h = tape.add(h, f);
    }

    // Mean-pool each example's rows, then classify.
    let mut pool = Matrix::zeros(b, b * n);
    for e in 0..b {
        for t in 0..n {
            pool.set(e, e * n + t, 1.0 / n as f64);
        }
    }
    let pool = tape.leaf(pool);
    let pooled = tape.matmul(pool, h);
    tape.matmul(pooled, vars.head)
}

/// Mean cross-entropy of the batch (Var is 1×1).
pub fn classification_loss(tape: &mut Tape, logits: Var, labels: &[usize]) -> Var {
    tape.cross_entropy(logits, labels)
}

/// Forward plus loss on a fresh part of the tape.
pub fn model_loss(
    tape: &mut Tape,
    config: &TinyTransformerConfig,
    vars: &ModelVars,
    batch: &Batch,
) -> Var {
    let logits = forward(tape, config, vars, batch);
    classification_loss(tape, logits, &batch.labels)
}

/// Average loss over a dataset without touching any parameters.
pub fn eval_loss(
    config: &TinyTransformerConfig,
    weights: &[LayerWeights],
    extras: &UntemplatedParams,
    data: &Dataset,
    batch_size: usize,
) -> f64 {
    assert!(batch_size >= 1 && !data.is_empty());
    let mut total = 0.0;
    let mut seen = 0usize;
    let mut start = 0usize;
    while start < data.len() {
        let size = batch_size.min(data.len() - start);
        let batch = data.batch_exact(start, size);
        let mut tape = Tape::new();
        let vars = register_model(&mut tape, weights, extras);
        let loss = model_loss(&mut tape, config, &vars, &batch);
        total += tape.scalar(loss) * size as f64;
        seen += size;
        start += size;
    }
    total / seen as f64
}

/// Adam with decoupled weight decay; fully deterministic.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AdamState {
    cfg: AdamConfig,
    step: usize,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(cfg: AdamConfig) -> Self {
        AdamState {
            cfg,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update over an ordered parameter list. Moments are allocated on
    /// the first call and must line up with the same ordering afterwards.
    pub fn step(&mut self, params: &mut [&mut Matrix], grads: &[&Matrix]) {
        assert_eq!(
            params.len(),
            grads.len(),
            "adam: {} params vs {} grads",
            params.len(),
            grads.len()
        );
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
            self.v = self.m.clone();
        }
        assert_eq!(self.m.len(), params.len(), "adam: parameter list changed size");
        self.step += 1;
        let t = self.step as i32;
        let bc1 = 1.0 - self.cfg.beta1.powi(t);
        let bc2 = 1.0 - self.cfg.beta2.powi(t);
        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads)
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            assert_eq!(p.shape(), g.shape(), "adam: grad shape mismatch");
            let pd = p.data_mut();
            let gd = g.data();
            let md = m.data_mut();
            let vd = v.data_mut();
            for i in 0..pd.len() {
                md[i] = self.cfg.beta1 * md[i] + (1.0 - self.cfg.beta1) * gd[i];
                vd[i] = self.cfg.beta2 * vd[i] + (1.0 - self.cfg.beta2) * gd[i] * gd[i];
                let m_hat = md[i] / bc1;
                let v_hat = vd[i] / bc2;
                pd[i] -= self.cfg.lr * (m_hat / (v_hat.sqrt() + self.cfg.eps)
                    + self.cfg.weight_decay * pd[i]);
            }
        }
    }
}

/// Label: parity of the number of sentinel (id 0) tokens in the sequence.
pub fn parity_label(tokens: &[usize]) -> usize {
    tokens.iter().filter(|&&t| t == 0).count() % 2
}

/// A fixed synthetic dataset: uniform token sequences labeled by sentinel
/// parity, class-balanced by rejection against an alternating target.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: usize,
    pub seq_len: usize,
    examples: Vec<(Vec<usize>, usize)>,
}

impl Dataset {
    pub fn synth(seed: u64, n_examples: usize, vocab: usize, seq_len: usize) -> Dataset {
        assert!(vocab >= 2 && seq_len >= 1);
        let mut rng = Rng::new(seed);
        let mut examples = Vec::with_capacity(n_examples);
        for k in 0..n_examples {
            let target = k % 2;
            loop {
                let tokens: Vec<usize> = (0..seq_len).map(|_| rng.below(vocab)).collect();
                if parity_label(&tokens) == target {
                    examples.push((tokens, target));
                    break;
                }
            }
        }
        Dataset {
            vocab,
            seq_len,
            examples,
        }
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn label(&self, i: usize) -> usize {
        self.examples[i].1
    }

    pub fn class_balance(&self) -> f64 {
        let ones = self.examples.iter().filter(|(_, y)| *y == 1).count();
        ones as f64 / self.examples.len() as f64
    }

    /// First `n` examples, as a smaller dataset (the adaptation subset).
    pub fn subset(&self, n: usize) -> Dataset {
        Dataset {
            vocab: self.vocab,
            seq_len: self.seq_len,
            examples: self.examples[..n.min(self.examples.len())].to_vec(),
        }
    }

    /// Batch starting at `start`, wrapping around the dataset cyclically.
    pub fn batch_cyclic(&self, start: usize, size: usize) -> Batch {
        assert!(!self.examples.is_empty());
        let mut tokens = Vec::with_capacity(size * self.seq_len);
        let mut labels = Vec::with_capacity(size);
        for k in 0..size {
            let (t, y) = &self.examples[(start + k) % self.examples.len()];
            tokens.extend_from_slice(t);
            labels.push(*y);
        }
        Batch {
            batch: size,
            seq_len: self.seq_len,
            tokens,
            labels,
        }
    }

    /// Batch of examples `start .. start+size` without wrapping.
    pub fn batch_exact(&self, start: usize, size: usize) -> Batch {
        assert!(start + size <= self.examples.len());
        self.batch_cyclic(start, size)
    }
}
