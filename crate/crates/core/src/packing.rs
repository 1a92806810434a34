//! Aggregation of named per-layer weights into the unified matrix and back.
//!
//! For a transformer, row `l` of the unified matrix is the row-major
//! flattening of `[W_q | W_k | W_v | W_o | W_in | W_out]` of layer `l`, in
//! that fixed order, giving `P = D·(4·H·d + 2·D′)` columns (`12·D²` when
//! `D′ = 4D`). For depthwise convolutions, each filter is one row of width
//! `C₁·k²`: the filter's `k²` weights sit at column offset `(c mod C₁)·k²`
//! where `c` is its channel index within the stage, so the template grid
//! `r1 = C₁, r2 = k²` aligns channels with grid rows. Rows are ordered
//! stage-major, then block, then channel.

use thiserror::Error;

use crate::linalg::Matrix;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DimsError {
    #[error("model dims must be positive, got L={layers}, H={heads}, d={head_dim}, D'={ffn}")]
    InvalidDims {
        layers: usize,
        heads: usize,
        head_dim: usize,
        ffn: usize,
    },
    #[error("conv dims must be positive, got C1={base_channels}, k={kernel}, stages={stages}")]
    InvalidConvDims {
        base_channels: usize,
        kernel: usize,
        stages: usize,
    },
}

/// Transformer geometry. `D = H·d`; `P = D·(4·H·d + 2·D′)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub layers: usize,
    pub heads: usize,
    pub head_dim: usize,
    pub ffn_dim: usize,
}

impl ModelDims {
    /// `ffn_dim` defaults to `4·D` when `None`.
    pub fn new(
        layers: usize,
        heads: usize,
        head_dim: usize,
        ffn_dim: Option<usize>,
    ) -> Result<Self, DimsError> {
        let embed = heads * head_dim;
        let ffn = ffn_dim.unwrap_or(4 * embed);
        if layers < 1 || heads < 1 || head_dim < 1 || ffn < 1 {
            return Err(DimsError::InvalidDims {
                layers,
                heads,
                head_dim,
                ffn,
            });
        }
        Ok(ModelDims {
            layers,
            heads,
            head_dim,
            ffn_dim: ffn,
        })
    }

    /// Embedding width `D = H·d`.
    pub fn embed_dim(&self) -> usize {
        self.heads * self.head_dim
    }

    /// Unified row width `P = D·(4·H·d + 2·D′)`; pure arithmetic, no
    /// allocation, so full-scale widths are safe to query.
    pub fn packed_cols(&self) -> usize {
        let d = self.embed_dim();
        d * (4 * self.heads * self.head_dim + 2 * self.ffn_dim)
    }
}

/// The six templated matrices of one transformer layer. `W_q`, `W_k`, `W_v`
/// are `D × D` with head `h` occupying columns `h·d .. (h+1)·d`; `W_o` is
/// `(H·d) × D`; `W_in` is `D × D′`; `W_out` is `D′ × D`.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub w_q: Matrix,
    pub w_k: Matrix,
    pub w_v: Matrix,
    pub w_o: Matrix,
    pub w_in: Matrix,
    pub w_out: Matrix,
}

impl LayerWeights {
    pub fn zeros(dims: &ModelDims) -> Self {
        let d = dims.embed_dim();
        LayerWeights {
            w_q: Matrix::zeros(d, d),
            w_k: Matrix::zeros(d, d),
            w_v: Matrix::zeros(d, d),
            w_o: Matrix::zeros(d, d),
            w_in: Matrix::zeros(d, dims.ffn_dim),
            w_out: Matrix::zeros(dims.ffn_dim, d),
        }
    }

    fn parts(&self) -> [(&'static str, &Matrix); 6] {
        [
            ("W_q", &self.w_q),
            ("W_k", &self.w_k),
            ("W_v", &self.w_v),
            ("W_o", &self.w_o),
            ("W_in", &self.w_in),
            ("W_out", &self.w_out),
        ]
    }

    fn expected_shapes(dims: &ModelDims) -> [(&'static str, (usize, usize)); 6] {
        let d = dims.embed_dim();
        [
            ("W_q", (d, d)),
            ("W_k", (d, d)),
            ("W_v", (d, d)),
            ("W_o", (d, d)),
            ("W_in", (d, dims.ffn_dim)),
            ("W_out", (dims.ffn_dim, d)),
        ]
    }
}

/// Flattens per-layer weights into the unified `L × P` matrix.
pub fn pack_transformer(weights: &[LayerWeights], dims: &ModelDims) -> Matrix {
    assert_eq!(
        weights.len(),
        dims.layers,
        "pack_transformer: {} layers of weights for L={}",
        weights.len(),
        dims.layers
    );
    let p = dims.packed_cols();
    let mut out = Matrix::zeros(dims.layers, p);
    for (l, lw) in weights.iter().enumerate() {
        for ((name, m), (_, want)) in lw.parts().iter().zip(LayerWeights::expected_shapes(dims)) {
            assert_eq!(
                m.shape(),
                want,
                "pack_transformer: layer {l} {name} is {}x{}, want {}x{}",
                m.rows(),
                m.cols(),
                want.0,
                want.1
            );
        }
        let row = out.row_mut(l);
        let mut offset = 0;
        for (_, m) in lw.parts() {
            row[offset..offset + m.data().len()].copy_from_slice(m.data());
            offset += m.data().len();
        }
        debug_assert_eq!(offset, p);
    }
    out
}

/// Exact inverse of [`pack_transformer`].
pub fn unpack_transformer(w: &Matrix, dims: &ModelDims) -> Vec<LayerWeights> {
    assert_eq!(
        w.shape(),
        (dims.layers, dims.packed_cols()),
        "unpack_transformer: input {}x{} does not match L={} P={}",
        w.rows(),
        w.cols(),
        dims.layers,
        dims.packed_cols()
    );
    let mut layers = Vec::with_capacity(dims.layers);
    for l in 0..dims.layers {
        let row = w.row(l);
        let mut offset = 0;
        let mut take = |rows: usize, cols: usize| {
            let m = Matrix::new(rows, cols, row[offset..offset + rows * cols].to_vec());
            offset += rows * cols;
            m
        };
        let d = dims.embed_dim();
        layers.push(LayerWeights {
            w_q: take(d, d),
            w_k: take(d, d),
            w_v: take(d, d),
            w_o: take(d, d),
            w_in: take(d, dims.ffn_dim),
            w_out: take(dims.ffn_dim, d),
        });
    }
    layers
}

/// Stage-wise depthwise-convolution geometry: stage `s` has `C_s = 2ˢ·C₁`
/// channels (0-indexed) and `blocks[s]` residual blocks with one `k × k`
/// filter per channel.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConvStageDims {
    pub base_channels: usize,
    pub kernel: usize,
    pub blocks: Vec<usize>,
}

impl ConvStageDims {
    pub fn new(base_channels: usize, kernel: usize, blocks: Vec<usize>) -> Result<Self, DimsError> {
        if base_channels < 1 || kernel < 1 || blocks.is_empty() || blocks.iter().any(|&b| b < 1) {
            return Err(DimsError::InvalidConvDims {
                base_channels,
                kernel,
                stages: blocks.len(),
            });
        }
        Ok(ConvStageDims {
            base_channels,
            kernel,
            blocks,
        })
    }

    pub fn stages(&self) -> usize {
        self.blocks.len()
    }

    /// Channel count of stage `s` under the doubling rule.
    pub fn channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Total filter count `P = Σ C_s·L_s`; one unified row per filter.
    pub fn total_filters(&self) -> usize {
        (0..self.stages())
            .map(|s| self.channels(s) * self.blocks[s])
            .sum()
    }

    /// Unified row width `C₁·k²`.
    pub fn row_width(&self) -> usize {
        self.base_channels * self.kernel * self.kernel
    }
}

/// Packs depthwise kernels into the unified `P × (C₁·k²)` matrix.
///
/// `kernels[s][b]` holds stage `s`, block `b` as a `C_s × k²` matrix (one
/// flattened filter per channel row).
pub fn pack_depthwise_conv(kernels: &[Vec<Matrix>], dims: &ConvStageDims) -> Matrix {
    assert_eq!(
        kernels.len(),
        dims.stages(),
        "pack_depthwise_conv: {} stages of kernels for {} stages",
        kernels.len(),
        dims.stages()
    );
    let k2 = dims.kernel * dims.kernel;
    let mut out = Matrix::zeros(dims.total_filters(), dims.row_width());
    let mut row = 0;
    for (s, stage_kernels) in kernels.iter().enumerate() {
        let channels = dims.channels(s);
        assert_eq!(
            stage_kernels.len(),
            dims.blocks[s],
            "pack_depthwise_conv: stage {s} has {} blocks, want {}",
            stage_kernels.len(),
            dims.blocks[s]
        );
        for (b, block) in stage_kernels.iter().enumerate() {
            assert_eq!(
                block.shape(),
                (channels, k2),
                "pack_depthwise_conv: stage {s} block {b} is {}x{}, want {channels}x{k2}",
                block.rows(),
                block.cols()
            );
            for c in 0..channels {
                let offset = (c % dims.base_channels) * k2;
                out.row_mut(row)[offset..offset + k2].copy_from_slice(block.row(c));
                row += 1;
            }
        }
    }
    out
}

/// Exact inverse of [`pack_depthwise_conv`].
pub fn unpack_depthwise_conv(w: &Matrix, dims: &ConvStageDims) -> Vec<Vec<Matrix>> {
    assert_eq!(
        w.shape(),
        (dims.total_filters(), dims.row_width()),
        "unpack_depthwise_conv: input {}x{} does not match P={} width={}",
        w.rows(),
        w.cols(),
        dims.total_filters(),
        dims.row_width()
    );
    let k2 = dims.kernel * dims.kernel;
    let mut out = Vec::with_capacity(dims.stages());
    let mut row = 0;
    for s in 0..dims.stages() {
        let channels = dims.channels(s);
        let mut stage = Vec::with_capacity(dims.blocks[s]);
        for _ in 0..dims.blocks[s] {
            let mut block = Matrix::zeros(channels, k2);
            for c in 0..channels {
                let offset = (c % dims.base_channels) * k2;
                block
                    .row_mut(c)
                    .copy_from_slice(&w.row(row)[offset..offset + k2]);
                row += 1;
            }
            stage.push(block);
        }
        out.push(stage);
    }
    out
}
