//! Executable diagnostics around the factorization: singular spectra of the
//! rearranged unified matrix, the smallest template count meeting an output
//! error budget, sampled Lipschitz estimates, and a generalization-gap
//! bound for scaler-only training.
//!
//! The Lipschitz value is a sampled lower bound, never a certificate, so
//! checks built on it are reported rather than asserted.

use crate::factorization::{ConfigError, RearrangeDims};
use crate::linalg::{svd, Matrix, Rng};

/// Singular values of `R(W)`, non-increasing, with the geometry they came
/// from.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub sigma: Vec<f64>,
    pub layers: usize,
    pub span_a: usize,
    pub blocks_b: usize,
}

impl Spectrum {
    /// `Σ_{j>n} σⱼ²` — the squared residual of the best rank-n fit.
    pub fn tail_energy(&self, n: usize) -> f64 {
        self.sigma.iter().skip(n).map(|s| s * s).sum()
    }

    /// Count of singular values above the numerical-rank cutoff 1e-12.
    pub fn numerical_rank(&self) -> usize {
        self.sigma.iter().filter(|&&s| s > 1e-12).count()
    }
}

/// Spectrum of the rearranged matrix for template span `a`.
pub fn spectrum(w: &Matrix, span_a: usize) -> Result<Spectrum, ConfigError> {
    let dims = RearrangeDims::new(w.rows(), span_a, w.cols())?;
    let decomp = svd(&crate::factorization::rearrange(w, dims))?;
    Ok(Spectrum {
        sigma: decomp.sigma,
        layers: dims.layers,
        span_a: dims.span_a,
        blocks_b: dims.blocks_b,
    })
}

/// Smallest template count `N ≥ 1` whose spectral tail satisfies
/// `Σ_{j>N} σⱼ² ≤ ε²/K²`. Values at or below the 1e-12 rank cutoff count as
/// zero tail, so exactly-representable inputs report their true rank.
pub fn min_templates(spec: &Spectrum, epsilon: f64, k: f64) -> usize {
    assert!(epsilon > 0.0 && k > 0.0, "min_templates: ε and K must be positive");
    let budget = (epsilon / k) * (epsilon / k);
    let clipped: Vec<f64> = spec
        .sigma
        .iter()
        .map(|&s| if s > 1e-12 { s } else { 0.0 })
        .collect();
    let full = spec.sigma.len();
    for n in 1..=full {
        let tail: f64 = clipped[n..].iter().map(|s| s * s).sum();
        if tail <= budget {
            return n;
        }
    }
    full
}

/// A sampled lower bound on the Lipschitz constant of `w ↦ f(x; w)`.
#[derive(Debug, Clone, Copy)]
pub struct LipschitzEstimate {
    pub k_hat: f64,
    pub samples: usize,
}

/// Estimates `K̂ = max ‖f(x; W+ΔW) − f(x; W)‖_F / ‖ΔW‖_F` over sampled
/// inputs and Gaussian perturbation directions around `base_w`.
/// Perturbations are floored at norm 1e-8 (rescaled along their direction),
/// so the quotient never divides by a vanishing step. Running max: with the
/// same RNG stream, more samples never lower the estimate.
pub fn estimate_lipschitz<X, F, G>(
    forward: F,
    mut sample_input: G,
    base_w: &Matrix,
    rng: &mut Rng,
    n_samples: usize,
    perturb_scale: f64,
) -> LipschitzEstimate
where
    F: Fn(&X, &Matrix) -> Matrix,
    G: FnMut(&mut Rng) -> X,
{
    assert!(n_samples >= 1, "estimate_lipschitz: need at least one sample");
    assert!(
        perturb_scale > 0.0,
        "estimate_lipschitz: perturbation scale must be positive"
    );
    let mut k_hat = 0.0f64;
    for _ in 0..n_samples {
        let x = sample_input(rng);
        let mut delta = rng.gaussian_matrix(base_w.rows(), base_w.cols(), perturb_scale);
        let norm = delta.frobenius_norm();
        if norm < 1e-8 {
            delta = delta.scale(1e-8 / norm.max(1e-300));
        }
        let perturbed = base_w.add(&delta);
        let diff = forward(&x, &perturbed).sub(&forward(&x, base_w));
        k_hat = k_hat.max(diff.frobenius_norm() / delta.frobenius_norm());
    }
    LipschitzEstimate {
        k_hat,
        samples: n_samples,
    }
}

/// Inputs to the generalization bound for scaler-only training.
#[derive(Debug, Clone, Copy)]
pub struct BoundInputs {
    /// Lipschitz constant of the loss w.r.t. the network output.
    pub loss_lipschitz: f64,
    /// Bound on input norms.
    pub input_radius: f64,
    /// Norm cap on the trainable scalers.
    pub scaler_norm_cap: f64,
    /// Frobenius norm of the frozen template bank.
    pub template_norm: f64,
    /// Training-set size.
    pub samples: usize,
    /// Confidence level: the bound holds with probability 1 − δ.
    pub delta: f64,
    /// Norm cap on a fully-trainable weight matrix, for comparison runs.
    pub weight_cap: f64,
}

impl BoundInputs {
    pub fn validate(&self) {
        assert!(
            self.loss_lipschitz > 0.0
                && self.input_radius > 0.0
                && self.scaler_norm_cap > 0.0
                && self.template_norm > 0.0
                && self.weight_cap > 0.0
                && self.samples > 0,
            "BoundInputs: all quantities must be positive"
        );
        assert!(
            self.delta > 0.0 && self.delta < 1.0,
            "BoundInputs: δ must be in (0, 1), got {}",
            self.delta
        );
    }
}

/// Generalization-gap bound for scaler-only training, with the hidden
/// constant of the complexity term fixed to 1 ("up to constants"):
///
/// `R̂ + 2·(L_ℓ·R·C_S·‖T‖_F / √m) + 3·√(ln(2/δ) / (2m))`
pub fn generalization_gap_bound(inputs: &BoundInputs, empirical_risk: f64) -> f64 {
    inputs.validate();
    let m = inputs.samples as f64;
    let complexity = inputs.loss_lipschitz
        * inputs.input_radius
        * inputs.scaler_norm_cap
        * inputs.template_norm
        / m.sqrt();
    let confidence = 3.0 * ((2.0 / inputs.delta).ln() / (2.0 * m)).sqrt();
    empirical_risk + 2.0 * complexity + confidence
}

/// Same bound with the full weight cap in place of the scaler capacity;
/// the comparison arm for fully-trainable fine-tuning.
pub fn full_ft_gap_bound(inputs: &BoundInputs, empirical_risk: f64) -> f64 {
    inputs.validate();
    let m = inputs.samples as f64;
    let complexity = inputs.loss_lipschitz * inputs.input_radius * inputs.weight_cap / m.sqrt();
    let confidence = 3.0 * ((2.0 / inputs.delta).ln() / (2.0 * m)).sqrt();
    empirical_risk + 2.0 * complexity + confidence
}

/// One end-to-end check of the expressivity pipeline: pick
/// `N = min_templates(spectrum(W), ε, K̂)`, fit, and measure the realized
/// output deviation. `satisfied` reports whether the measured deviation
/// stayed within ε; because K̂ is a lower bound this is a soft check.
#[derive(Debug, Clone)]
pub struct ExpressivityReport {
    pub epsilon: f64,
    pub k_hat: f64,
    pub n_chosen: usize,
    pub fit_residual: f64,
    pub max_deviation: f64,
    pub satisfied: bool,
}

impl ExpressivityReport {
    pub fn summary(&self) -> String {
        format!(
            "epsilon={:.6} k_hat={:.6} n_templates={} fit_residual={:.6e} max_deviation={:.6} within_budget={}",
            self.epsilon, self.k_hat, self.n_chosen, self.fit_residual, self.max_deviation,
            self.satisfied
        )
    }
}
