//! Kronecker weight factorization: the unified matrix `W ∈ L×P` is
//! constrained to `W = Σᵢ Tᵢ ⊗ Sᵢ` with templates `Tᵢ ∈ 1×A` (A = r₁·r₂)
//! and scalers `Sᵢ ∈ L×B` (B = P/A).
//!
//! The rearrangement operator `R` maps `W` to an (L·B)×A matrix by the
//! strided rule `R(W)[l·B+b, a] = W[l, a·B+b]`, under which every Kronecker
//! term becomes the rank-1 outer product `vec(Sᵢ)·Tᵢ`. Fitting a bank to an
//! arbitrary `W` is therefore a truncated SVD of `R(W)`, and its residual is
//! exactly the discarded tail of the singular spectrum.

use thiserror::Error;

use crate::linalg::{svd, LinalgError, Matrix, Rng};
use crate::scaling::StructuredMask;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ConfigError {
    #[error("counts must be at least 1, got n={n}, r1={r1}, r2={r2}")]
    InvalidCounts { n: usize, r1: usize, r2: usize },
    #[error("row width {p} is not divisible by the template span {a}")]
    NotDivisible { p: usize, a: usize },
    #[error("rank {n} exceeds min(L·B, A) = {max}")]
    RankTooLarge { n: usize, max: usize },
    #[error(transparent)]
    Linalg(#[from] LinalgError),
}

/// Factorization geometry: `N` templates over an `r1 × r2` grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FactorizationConfig {
    pub n_templates: usize,
    pub r1: usize,
    pub r2: usize,
}

impl FactorizationConfig {
    pub fn new(n_templates: usize, r1: usize, r2: usize) -> Result<Self, ConfigError> {
        if n_templates < 1 || r1 < 1 || r2 < 1 {
            return Err(ConfigError::InvalidCounts {
                n: n_templates,
                r1,
                r2,
            });
        }
        Ok(FactorizationConfig { n_templates, r1, r2 })
    }

    /// Template span `A = r1 · r2`.
    pub fn area(&self) -> usize {
        self.r1 * self.r2
    }

    /// True when `N·r1·r2 < L·P`, the low-rank bottleneck that forces
    /// template reuse. Violations are legal but defeat the purpose.
    pub fn has_bottleneck(&self, layers: usize, p: usize) -> bool {
        self.n_templates * self.area() < layers * p
    }
}

/// The `N` shared weight templates, each a flattened `r1 × r2` grid.
/// Size-agnostic: one bank serves every model depth and width.
#[derive(Debug, Clone, PartialEq)]
pub struct TemplateBank {
    config: FactorizationConfig,
    templates: Matrix, // N × A, row i is template i
}

impl TemplateBank {
    pub fn new(config: FactorizationConfig, templates: Matrix) -> Self {
        assert_eq!(
            templates.shape(),
            (config.n_templates, config.area()),
            "TemplateBank: templates {}x{} do not match N={} A={}",
            templates.rows(),
            templates.cols(),
            config.n_templates,
            config.area()
        );
        TemplateBank { config, templates }
    }

    pub fn random(config: FactorizationConfig, std: f64, rng: &mut Rng) -> Self {
        let templates = rng.gaussian_matrix(config.n_templates, config.area(), std);
        TemplateBank { config, templates }
    }

    pub fn config(&self) -> FactorizationConfig {
        self.config
    }

    pub fn template(&self, i: usize) -> &[f64] {
        self.templates.row(i)
    }

    pub fn templates(&self) -> &Matrix {
        &self.templates
    }

    pub fn templates_mut(&mut self) -> &mut Matrix {
        &mut self.templates
    }

    pub fn param_count(&self) -> usize {
        self.config.n_templates * self.config.area()
    }

    /// FNV-1a over the exact bit pattern; used to verify the bank is frozen.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |byte: u8| {
            h ^= byte as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for v in [
            self.config.n_templates as u64,
            self.config.r1 as u64,
            self.config.r2 as u64,
        ] {
            for b in v.to_le_bytes() {
                eat(b);
            }
        }
        for x in self.templates.data() {
            for b in x.to_bits().to_le_bytes() {
                eat(b);
            }
        }
        h
    }
}

/// The `N` weight scalers attached to one model size: each `Sᵢ ∈ L × B`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalerSet {
    config: FactorizationConfig,
    layers: usize,
    b_cols: usize,
    mats: Vec<Matrix>,
}

impl ScalerSet {
    /// Validates `A | P` and wraps the given scaler matrices.
    pub fn new(
        config: FactorizationConfig,
        layers: usize,
        p: usize,
        mats: Vec<Matrix>,
    ) -> Result<Self, ConfigError> {
        let a = config.area();
        if p % a != 0 {
            return Err(ConfigError::NotDivisible { p, a });
        }
        let b_cols = p / a;
        assert_eq!(mats.len(), config.n_templates, "ScalerSet: wrong count");
        for (i, m) in mats.iter().enumerate() {
            assert_eq!(
                m.shape(),
                (layers, b_cols),
                "ScalerSet: scaler {i} is {}x{}, want {layers}x{b_cols}",
                m.rows(),
                m.cols()
            );
        }
        Ok(ScalerSet {
            config,
            layers,
            b_cols,
            mats,
        })
    }

    pub fn random(
        config: FactorizationConfig,
        layers: usize,
        p: usize,
        std: f64,
        rng: &mut Rng,
    ) -> Result<Self, ConfigError> {
        let a = config.area();
        if p % a != 0 {
            return Err(ConfigError::NotDivisible { p, a });
        }
        let b_cols = p / a;
        let mats = (0..config.n_templates)
            .map(|_| rng.gaussian_matrix(layers, b_cols, std))
            .collect();
        Ok(ScalerSet {
            config,
            layers,
            b_cols,
            mats,
        })
    }

    pub fn config(&self) -> FactorizationConfig {
        self.config
    }

    pub fn layers(&self) -> usize {
        self.layers
    }

    pub fn b_cols(&self) -> usize {
        self.b_cols
    }

    pub fn row_width(&self) -> usize {
        self.b_cols * self.config.area()
    }

    pub fn scaler(&self, i: usize) -> &Matrix {
        &self.mats[i]
    }

    pub fn scalers(&self) -> &[Matrix] {
        &self.mats
    }

    pub fn scalers_mut(&mut self) -> &mut [Matrix] {
        &mut self.mats
    }

    /// Total scaler parameters, `N·L·B`.
    pub fn param_count(&self) -> usize {
        self.config.n_templates * self.layers * self.b_cols
    }
}

/// Geometry of the rearrangement bijection: `A·B = P`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RearrangeDims {
    pub layers: usize,
    pub span_a: usize,
    pub blocks_b: usize,
}

impl RearrangeDims {
    pub fn new(layers: usize, span_a: usize, p: usize) -> Result<Self, ConfigError> {
        if span_a == 0 || p % span_a != 0 {
            return Err(ConfigError::NotDivisible { p, a: span_a });
        }
        Ok(RearrangeDims {
            layers,
            span_a,
            blocks_b: p / span_a,
        })
    }
}

/// Reconstructs `W = Σᵢ (mask ⊙ Tᵢ) ⊗ Sᵢ`, entrywise
/// `W[l, a·B + b] = Σᵢ T̃ᵢ[a] · Sᵢ[l, b]`.
pub fn reconstruct(
    bank: &TemplateBank,
    scalers: &ScalerSet,
    mask: Option<&StructuredMask>,
) -> Matrix {
    assert_eq!(
        bank.config(),
        scalers.config(),
        "reconstruct: bank and scalers disagree on factorization config"
    );
    if let Some(m) = mask {
        assert_eq!(
            (m.r1, m.r2),
            (bank.config().r1, bank.config().r2),
            "reconstruct: mask {}x{} does not match template grid {}x{}",
            m.r1,
            m.r2,
            bank.config().r1,
            bank.config().r2
        );
    }
    let a_span = bank.config().area();
    let b_cols = scalers.b_cols();
    let layers = scalers.layers();
    let mut w = Matrix::zeros(layers, a_span * b_cols);
    for i in 0..bank.config().n_templates {
        let t = bank.template(i);
        let s = scalers.scaler(i);
        for a in 0..a_span {
            let ta = match mask {
                Some(m) if !m.is_active(a) => continue,
                _ => t[a],
            };
            if ta == 0.0 {
                continue;
            }
            for l in 0..layers {
                let srow = s.row(l);
                let wrow = w.row_mut(l);
                for b in 0..b_cols {
                    wrow[a * b_cols + b] += ta * srow[b];
                }
            }
        }
    }
    w
}

/// The strided rearrangement `R(W)[l·B + b, a] = W[l, a·B + b]`.
pub fn rearrange(w: &Matrix, dims: RearrangeDims) -> Matrix {
    assert_eq!(
        w.shape(),
        (dims.layers, dims.span_a * dims.blocks_b),
        "rearrange: input {}x{} does not match dims L={} A={} B={}",
        w.rows(),
        w.cols(),
        dims.layers,
        dims.span_a,
        dims.blocks_b
    );
    let mut out = Matrix::zeros(dims.layers * dims.blocks_b, dims.span_a);
    for l in 0..dims.layers {
        for b in 0..dims.blocks_b {
            let orow = out.row_mut(l * dims.blocks_b + b);
            for a in 0..dims.span_a {
                orow[a] = w.get(l, a * dims.blocks_b + b);
            }
        }
    }
    out
}

/// Exact inverse of [`rearrange`].
pub fn unrearrange(wt: &Matrix, dims: RearrangeDims) -> Matrix {
    assert_eq!(
        wt.shape(),
        (dims.layers * dims.blocks_b, dims.span_a),
        "unrearrange: input {}x{} does not match dims L={} A={} B={}",
        wt.rows(),
        wt.cols(),
        dims.layers,
        dims.span_a,
        dims.blocks_b
    );
    let mut out = Matrix::zeros(dims.layers, dims.span_a * dims.blocks_b);
    for l in 0..dims.layers {
        for b in 0..dims.blocks_b {
            let trow = wt.row(l * dims.blocks_b + b);
            let orow = out.row_mut(l);
            for a in 0..dims.span_a {
                orow[a * dims.blocks_b + b] = trow[a];
            }
        }
    }
    out
}

/// Output of [`fit`]: the optimal rank-N bank/scaler pair and the exact
/// Frobenius residual `√(Σ_{j>N} σⱼ²)`.
#[derive(Debug, Clone)]
pub struct FitResult {
    pub bank: TemplateBank,
    pub scalers: ScalerSet,
    pub residual: f64,
    /// Full singular spectrum of the rearranged input.
    pub sigma: Vec<f64>,
}

/// Best rank-N Kronecker composition of `w` in Frobenius norm, computed by
/// truncated SVD of the rearranged matrix: template i = vᵢᵀ and
/// vec(Sᵢ) = σᵢ·uᵢ (row-major de-vectorization).
pub fn fit(w: &Matrix, config: FactorizationConfig) -> Result<FitResult, ConfigError> {
    let dims = RearrangeDims::new(w.rows(), config.area(), w.cols())?;
    let max_rank = (dims.layers * dims.blocks_b).min(dims.span_a);
    if config.n_templates > max_rank {
        return Err(ConfigError::RankTooLarge {
            n: config.n_templates,
            max: max_rank,
        });
    }
    let decomp = svd(&rearrange(w, dims))?;
    let n = config.n_templates;

    let templates = Matrix::from_fn(n, dims.span_a, |i, a| decomp.v.get(a, i));
    let mats: Vec<Matrix> = (0..n)
        .map(|i| {
            Matrix::from_fn(dims.layers, dims.blocks_b, |l, b| {
                decomp.sigma[i] * decomp.u.get(l * dims.blocks_b + b, i)
            })
        })
        .collect();

    let residual = decomp.sigma[n..]
        .iter()
        .map(|s| s * s)
        .sum::<f64>()
        .sqrt();

    Ok(FitResult {
        bank: TemplateBank::new(config, templates),
        scalers: ScalerSet::new(config, dims.layers, w.cols(), mats)
            .expect("divisibility checked above"),
        residual,
        sigma: decomp.sigma,
    })
}

/// Adjoint of [`reconstruct`]: maps an upstream gradient `g = ∂loss/∂W` to
/// per-template and per-scaler gradients.
///
/// With `G̃ = R(g)`: `dTᵢ = vec(Sᵢ)ᵀ·G̃` (zeroed where the mask is 0) and
/// `vec(dSᵢ) = G̃·(mask ⊙ Tᵢ)ᵀ`.
pub fn kron_gradients(
    g: &Matrix,
    bank: &TemplateBank,
    scalers: &ScalerSet,
    mask: Option<&StructuredMask>,
) -> (Matrix, Vec<Matrix>) {
    assert_eq!(
        bank.config(),
        scalers.config(),
        "kron_gradients: bank and scalers disagree on factorization config"
    );
    assert_eq!(
        g.shape(),
        (scalers.layers(), scalers.row_width()),
        "kron_gradients: gradient {}x{} does not match W {}x{}",
        g.rows(),
        g.cols(),
        scalers.layers(),
        scalers.row_width()
    );
    let n = bank.config().n_templates;
    let a_span = bank.config().area();
    let b_cols = scalers.b_cols();
    let layers = scalers.layers();

    let mut d_templates = Matrix::zeros(n, a_span);
    let mut d_scalers: Vec<Matrix> = (0..n).map(|_| Matrix::zeros(layers, b_cols)).collect();

    for i in 0..n {
        let t = bank.template(i);
        let s = scalers.scaler(i);
        let ds = &mut d_scalers[i];
        for a in 0..a_span {
            let active = mask.map_or(true, |m| m.is_active(a));
            let ta = if active { t[a] } else { 0.0 };
            let mut dta = 0.0;
            for l in 0..layers {
                let grow = g.row(l);
                let srow = s.row(l);
                let dsrow = ds.row_mut(l);
                for b in 0..b_cols {
                    let gv = grow[a * b_cols + b];
                    dta += gv * srow[b];
                    if active {
                        dsrow[b] += gv * ta;
                    }
                }
            }
            if active {
                d_templates.set(i, a, dta);
            }
        }
    }
    (d_templates, d_scalers)
}

/// `‖w − reconstruct(bank, scalers)‖_F`.
pub fn reconstruction_error(w: &Matrix, bank: &TemplateBank, scalers: &ScalerSet) -> f64 {
    let back = reconstruct(bank, scalers, None);
    assert_eq!(
        w.shape(),
        back.shape(),
        "reconstruction_error: w {}x{} vs reconstruction {}x{}",
        w.rows(),
        w.cols(),
        back.rows(),
        back.cols()
    );
    w.sub(&back).frobenius_norm()
}
