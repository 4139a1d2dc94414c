//! Moving-average trend / seasonal split.

use crate::autograd::{Graph, Var};
use crate::error::Result;
use crate::tensor::{self, Tensor};

pub const DEFAULT_WINDOW: usize = 25;

#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionPair {
    pub trend: Tensor,
    pub seasonal: Tensor,
    pub window: usize,
}

/// `trend = moving_average(x)`, `seasonal = x - trend`.
pub fn series_decomp(x: &Tensor, window: usize) -> Result<DecompositionPair> {
    let trend = tensor::avgpool1d_moving(x, window)?;
    let seasonal = Tensor::new(
        x.shape(),
        x.data().iter().zip(trend.data()).map(|(a, b)| a - b).collect(),
    )?;
    Ok(DecompositionPair {
        trend,
        seasonal,
        window,
    })
}

/// Differentiable form; returns `(trend, seasonal)`.
pub fn series_decomp_var(g: &mut Graph, x: Var, window: usize) -> Result<(Var, Var)> {
    let trend = g.moving_average(x, window)?;
    let seasonal = g.sub(x, trend)?;
    Ok((trend, seasonal))
}
