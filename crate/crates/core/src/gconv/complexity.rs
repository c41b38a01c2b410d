use serde::{Deserialize, Serialize};

use super::GaussConvLayer;

/// Multiply-accumulate counts of the three evaluation strategies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpCounts {
    /// C_i·C_o·H·W·N·k².
    pub vanilla: u128,
    /// K·C_i·C_o·H·W·K·k².
    pub lra: u128,
    /// 4·K·C_i·C_o·H·W.
    pub fast: u128,
}

impl OpCounts {
    /// Counts for explicit dimensions; `k` is the kernel side length.
    pub fn from_dims(c_in: usize, c_out: usize, h: usize, w: usize, n: usize, big_k: usize, k: usize) -> Self {
        let base = c_in as u128 * c_out as u128 * h as u128 * w as u128;
        let area = (k * k) as u128;
        Self {
            vanilla: base * n as u128 * area,
            lra: base * (big_k * big_k) as u128 * area,
            fast: 4 * big_k as u128 * base,
        }
    }

    pub fn vanilla_over_fast(&self) -> f64 {
        self.vanilla as f64 / self.fast as f64
    }

    pub fn vanilla_over_lra(&self) -> f64 {
        self.vanilla as f64 / self.lra as f64
    }

    pub fn lra_over_fast(&self) -> f64 {
        self.lra as f64 / self.fast as f64
    }
}

/// Counts for `layer` on a `(channels, height, width)` input against a
/// vanilla bank of `n` kernels of the same grid size.
pub fn complexity_count(layer: &GaussConvLayer, input_shape: (usize, usize, usize), n: usize) -> OpCounts {
    let (c, h, w) = input_shape;
    OpCounts::from_dims(c, layer.c_out, h, w, n, layer.k(), 2 * layer.grid_radius + 1)
}
