//! Degradation-aware classifier: three residual/strided stages and a global
//! average pool turning mid-network features into the global information vector.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Graph, Scalar, Tensor, Var};

pub const DAC_STAGES: usize = 3;

/// Channel widths entering each stage plus the output width: every stage halves
/// the width but never goes below `2C`.
pub fn dac_widths(input_width: usize, base_channels: usize) -> [usize; DAC_STAGES + 1] {
    let mut widths = [input_width; DAC_STAGES + 1];
    for k in 1..=DAC_STAGES {
        widths[k] = (widths[k - 1] / 2).max(2 * base_channels);
    }
    widths
}

/// Kernels of one stage: a two-conv residual block at the input width and a
/// stride-2 conv to the next width.
#[derive(Clone, Debug, PartialEq)]
pub struct DacStage<T> {
    pub conv1: Tensor<T>,
    pub conv2: Tensor<T>,
    pub down: Tensor<T>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DacParams<T> {
    pub stages: Vec<DacStage<T>>,
}

impl<T: Scalar> DacParams<T> {
    pub fn zeros(input_width: usize, base_channels: usize) -> Self {
        let w = dac_widths(input_width, base_channels);
        let stages = (0..DAC_STAGES)
            .map(|k| DacStage {
                conv1: Tensor::zeros(&[w[k], w[k], 3, 3]),
                conv2: Tensor::zeros(&[w[k], w[k], 3, 3]),
                down: Tensor::zeros(&[w[k + 1], w[k], 3, 3]),
            })
            .collect();
        Self { stages }
    }

    pub fn init(input_width: usize, base_channels: usize, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(input_width, base_channels);
        for s in &mut p.stages {
            for t in [&mut s.conv1, &mut s.conv2, &mut s.down] {
                fill_fan_in(t, rng);
            }
        }
        p
    }

    pub fn output_width(&self) -> usize {
        self.stages.last().map_or(0, |s| s.down.shape()[0])
    }

    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> DacVars {
        let mut leaf = |t: &Tensor<T>| {
            if trainable {
                g.param(t.clone())
            } else {
                g.constant(t.clone())
            }
        };
        DacVars {
            stages: self
                .stages
                .iter()
                .map(|s| DacStageVars {
                    conv1: leaf(&s.conv1),
                    conv2: leaf(&s.conv2),
                    down: leaf(&s.down),
                })
                .collect(),
        }
    }
}

/// Uniform in `±1/sqrt(fan_in)` for a `[out, in, kh, kw]` kernel.
pub(crate) fn fill_fan_in<T: Scalar>(t: &mut Tensor<T>, rng: &mut impl Rng) {
    let fan_in: usize = t.shape()[1..].iter().product();
    let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
    for v in t.data_mut() {
        *v = T::from_f64(rng.gen_range(-bound..bound));
    }
}

#[derive(Clone, Copy, Debug)]
pub struct DacStageVars {
    pub conv1: Var,
    pub conv2: Var,
    pub down: Var,
}

#[derive(Clone, Debug)]
pub struct DacVars {
    pub stages: Vec<DacStageVars>,
}

/// Stage `stage` (1-based) of the backbone: `x + conv2(gelu(conv1(x)))`, then a
/// stride-2 3x3 conv. Halves the spatial extents.
pub fn dac_backbone_step<T: Scalar>(g: &mut Graph<T>, x: Var, dac: &DacVars, stage: usize) -> Result<Var> {
    if stage == 0 || stage > dac.stages.len() {
        return Err(Error::invalid(
            "dac_backbone_step",
            format!("stage {stage} outside 1..={}", dac.stages.len()),
        ));
    }
    let shape = g.shape(x).to_vec();
    if shape.len() != 4 || shape[2] % 2 != 0 || shape[3] % 2 != 0 {
        return Err(Error::shape(
            "dac_backbone_step",
            format!("input {shape:?} needs even spatial extents"),
        ));
    }
    let s = dac.stages[stage - 1];
    let y = g.conv2d(x, s.conv1, 1, 1, 1)?;
    let y = g.gelu(y);
    let y = g.conv2d(y, s.conv2, 1, 1, 1)?;
    let y = g.add(x, y)?;
    g.conv2d(y, s.down, 2, 1, 1)
}

/// Full backbone followed by global average pooling: `[B, Cin, H, W] -> [B, 2C]`.
/// No softmax is applied, so the result is an unconstrained embedding.
pub fn dac_forward<T: Scalar>(g: &mut Graph<T>, features: Var, dac: &DacVars) -> Result<Var> {
    let shape = g.shape(features).to_vec();
    let factor = 1 << dac.stages.len();
    if shape.len() != 4 || shape[2] % factor != 0 || shape[3] % factor != 0 {
        return Err(Error::shape(
            "dac_forward",
            format!("input {shape:?} needs spatial extents divisible by {factor}"),
        ));
    }
    let mut y = features;
    for stage in 1..=dac.stages.len() {
        y = dac_backbone_step(g, y, dac, stage)?;
    }
    g.global_average_pool(y)
}
