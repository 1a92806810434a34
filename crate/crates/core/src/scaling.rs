//! Template scaling: structured dropout over the template grid during
//! pre-training, and width adaptation (truncation / periodic tiling) when a
//! bank is reused at a different width.
//!
//! A mask activates the leading `r1_eff × r2_eff` sub-grid of every template
//! so that training keeps the templates usable at reduced widths; at
//! initialization time the grid itself is resized instead.

use thiserror::Error;

use crate::factorization::{FactorizationConfig, TemplateBank};
use crate::linalg::{Matrix, Rng};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("effective widths ({r1_eff}, {r2_eff}) out of range for grid ({r1}, {r2})")]
    OutOfRange {
        r1: usize,
        r2: usize,
        r1_eff: usize,
        r2_eff: usize,
    },
    #[error("width schedule is empty")]
    EmptySchedule,
    #[error("width schedule has {candidates} candidates but {weights} weights")]
    WeightCountMismatch { candidates: usize, weights: usize },
    #[error("width schedule weights must be nonnegative and sum to 1, got sum {sum}")]
    BadWeights { sum: f64 },
}

/// Leading-block mask over an `r1 × r2` template grid: entry (i, j) is
/// active iff `i < r1_eff` and `j < r2_eff` (row-major flattening).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StructuredMask {
    pub r1: usize,
    pub r2: usize,
    pub r1_eff: usize,
    pub r2_eff: usize,
}

impl StructuredMask {
    pub fn new(r1: usize, r2: usize, r1_eff: usize, r2_eff: usize) -> Result<Self, MaskError> {
        if r1_eff < 1 || r2_eff < 1 || r1_eff > r1 || r2_eff > r2 {
            return Err(MaskError::OutOfRange {
                r1,
                r2,
                r1_eff,
                r2_eff,
            });
        }
        Ok(StructuredMask {
            r1,
            r2,
            r1_eff,
            r2_eff,
        })
    }

    pub fn full(r1: usize, r2: usize) -> Self {
        StructuredMask {
            r1,
            r2,
            r1_eff: r1,
            r2_eff: r2,
        }
    }

    pub fn is_full(&self) -> bool {
        self.r1_eff == self.r1 && self.r2_eff == self.r2
    }

    /// Whether flattened grid position `a = i·r2 + j` is active.
    #[inline]
    pub fn is_active(&self, a: usize) -> bool {
        let i = a / self.r2;
        let j = a % self.r2;
        i < self.r1_eff && j < self.r2_eff
    }

    /// The mask as a flat 0/1 vector of length `r1 · r2`.
    pub fn flattened(&self) -> Vec<f64> {
        (0..self.r1 * self.r2)
            .map(|a| if self.is_active(a) { 1.0 } else { 0.0 })
            .collect()
    }

    pub fn active_count(&self) -> usize {
        self.r1_eff * self.r2_eff
    }
}

/// Candidate effective widths and their sampling probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct WidthSchedule {
    r1: usize,
    r2: usize,
    candidates: Vec<(usize, usize)>,
    weights: Vec<f64>,
}

impl WidthSchedule {
    pub fn new(
        r1: usize,
        r2: usize,
        candidates: Vec<(usize, usize)>,
        weights: Vec<f64>,
    ) -> Result<Self, MaskError> {
        if candidates.is_empty() {
            return Err(MaskError::EmptySchedule);
        }
        if candidates.len() != weights.len() {
            return Err(MaskError::WeightCountMismatch {
                candidates: candidates.len(),
                weights: weights.len(),
            });
        }
        for &(a, b) in &candidates {
            // Range errors surface with the offending candidate.
            StructuredMask::new(r1, r2, a, b)?;
        }
        let sum: f64 = weights.iter().sum();
        if weights.iter().any(|&w| w < 0.0) || (sum - 1.0).abs() > 1e-9 {
            return Err(MaskError::BadWeights { sum });
        }
        Ok(WidthSchedule {
            r1,
            r2,
            candidates,
            weights,
        })
    }

    /// Default square-synchronized schedule for an `r × r` grid: effective
    /// widths {⌈r/2⌉, ⌈3r/4⌉, r} with weights [0.25, 0.25, 0.5], so the full
    /// width dominates while truncated widths stay exercised.
    pub fn default_for(r: usize) -> Self {
        let half = r.div_ceil(2);
        let three_quarters = (3 * r).div_ceil(4);
        let mut candidates = vec![(half, half), (three_quarters, three_quarters), (r, r)];
        let mut weights = vec![0.25, 0.25, 0.5];
        // Tiny grids collapse candidates; merge duplicated widths.
        let mut merged: Vec<((usize, usize), f64)> = Vec::new();
        for (c, w) in candidates.drain(..).zip(weights.drain(..)) {
            match merged.iter_mut().find(|(mc, _)| *mc == c) {
                Some((_, mw)) => *mw += w,
                None => merged.push((c, w)),
            }
        }
        let (candidates, weights) = merged.into_iter().unzip();
        WidthSchedule::new(r, r, candidates, weights).expect("default schedule is valid")
    }

    pub fn single(r1: usize, r2: usize) -> Self {
        WidthSchedule::new(r1, r2, vec![(r1, r2)], vec![1.0]).expect("full-width schedule")
    }

    pub fn candidates(&self) -> &[(usize, usize)] {
        &self.candidates
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Draws one candidate; deterministic given the RNG state.
    pub fn sample(&self, rng: &mut Rng) -> StructuredMask {
        let u = rng.uniform();
        let mut acc = 0.0;
        for (c, w) in self.candidates.iter().zip(&self.weights) {
            acc += w;
            if u < acc {
                return StructuredMask::new(self.r1, self.r2, c.0, c.1)
                    .expect("candidates validated at construction");
            }
        }
        let last = *self.candidates.last().unwrap();
        StructuredMask::new(self.r1, self.r2, last.0, last.1).unwrap()
    }
}

/// Resizes every template grid to `target_r1 × target_r2`: leading-block
/// truncation when shrinking, periodic tiling when expanding,
/// `out(i, j) = T(i mod r1, j mod r2)`.
pub fn adapt_template(bank: &TemplateBank, target_r1: usize, target_r2: usize) -> TemplateBank {
    assert!(
        target_r1 >= 1 && target_r2 >= 1,
        "adapt_template: targets must be positive, got ({target_r1}, {target_r2})"
    );
    let config = bank.config();
    let new_config = FactorizationConfig::new(config.n_templates, target_r1, target_r2)
        .expect("positive counts checked above");
    let templates = Matrix::from_fn(config.n_templates, target_r1 * target_r2, |i, a| {
        let ti = a / target_r2;
        let tj = a % target_r2;
        let si = ti % config.r1;
        let sj = tj % config.r2;
        bank.template(i)[si * config.r2 + sj]
    });
    TemplateBank::new(new_config, templates)
}
