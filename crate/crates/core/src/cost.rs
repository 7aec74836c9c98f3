//! Closed-form multiply-accumulate and parameter counts.
//!
//! MACs are counted per sample. `F_out` is the output spatial extent,
//! `floor((F + 2 * (W / 2) - W) / stride) + 1`:
//!
//! | kind            | MACs                          | params            |
//! |-----------------|-------------------------------|-------------------|
//! | standard        | F_out² · c_out · W² · c_in    | W² · c_in · c_out |
//! | depthwise       | F_out² · c_in · W²            | W² · c_in         |
//! | pointwise       | F_out² · c_out · c_in         | c_in · c_out      |
//! | group pointwise | F_out² · c_out · c_in / cg    | c_out · c_in / cg |
//! | sliding channel | F_out² · c_out · c_in / cg    | c_out · c_in / cg |
//! | DSC block       | depthwise + sliding channel   |                   |
//!
//! Bias adds `c_out` parameters (`c_in` for depthwise) when counted. The
//! overlap never enters the cost of a sliding-channel layer.

use std::fmt;
use std::iter::Sum;
use std::ops::Add;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cycle::{Overlap, SccConfig};
use crate::error::{Error, Result};
use crate::kernel::SccWeights;
use crate::reference::{
    grouped_conv_forward_counted, scc_channel_stack_forward, ConvSpec, ConvWeights,
};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Standard,
    Depthwise,
    Pointwise,
    GroupPointwise,
    Scc,
    DscBlock,
}

impl fmt::Display for LayerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            LayerKind::Standard => "standard",
            LayerKind::Depthwise => "depthwise",
            LayerKind::Pointwise => "pointwise",
            LayerKind::GroupPointwise => "group_pointwise",
            LayerKind::Scc => "scc",
            LayerKind::DscBlock => "dsc_block",
        };
        f.write_str(name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    /// Square input extent `F`.
    pub spatial: usize,
    pub cg: usize,
    pub overlap: Overlap,
    pub count_bias: bool,
}

impl LayerSpec {
    pub fn new(kind: LayerKind, c_in: usize, c_out: usize, spatial: usize) -> Self {
        let kernel = match kind {
            LayerKind::Standard | LayerKind::Depthwise | LayerKind::DscBlock => 3,
            _ => 1,
        };
        Self {
            kind,
            c_in,
            c_out,
            kernel,
            stride: 1,
            spatial,
            cg: 1,
            overlap: Overlap::Channels(0),
            count_bias: false,
        }
    }

    pub fn with_kernel(mut self, kernel: usize) -> Self {
        self.kernel = kernel;
        self
    }

    pub fn with_stride(mut self, stride: usize) -> Self {
        self.stride = stride;
        self
    }

    pub fn with_groups(mut self, cg: usize) -> Self {
        self.cg = cg;
        self
    }

    pub fn with_overlap(mut self, overlap: Overlap) -> Self {
        self.overlap = overlap;
        self
    }

    pub fn with_bias(mut self, count_bias: bool) -> Self {
        self.count_bias = count_bias;
        self
    }

    fn spatial_conv(&self, c_out: usize, groups: usize) -> Result<ConvSpec> {
        ConvSpec::new(
            self.c_in,
            c_out,
            self.kernel,
            self.stride,
            self.kernel / 2,
            groups,
        )
    }

    fn require_unit_kernel(&self) -> Result<()> {
        if self.kernel != 1 || self.stride != 1 {
            return Err(Error::config(format!(
                "{} layers are 1x1 stride 1, got kernel={} stride={}",
                self.kind, self.kernel, self.stride
            )));
        }
        Ok(())
    }

    fn scc_config(&self) -> Result<SccConfig> {
        SccConfig::new(
            self.c_in,
            self.c_out,
            self.cg,
            self.overlap,
            self.count_bias,
        )
    }

    /// Output spatial extent.
    pub fn output_spatial(&self) -> Result<usize> {
        self.validate()?;
        match self.kind {
            LayerKind::Standard | LayerKind::Depthwise | LayerKind::DscBlock => {
                self.spatial_conv(self.c_in, 1)?.output_size(self.spatial)
            }
            _ => Ok(self.spatial),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.spatial == 0 {
            return Err(Error::config("spatial extent must be >= 1"));
        }
        match self.kind {
            LayerKind::Standard => self.spatial_conv(self.c_out, 1).map(drop),
            LayerKind::Depthwise => {
                if self.c_out != self.c_in {
                    return Err(Error::config(format!(
                        "depthwise layers keep the channel count, got {} -> {}",
                        self.c_in, self.c_out
                    )));
                }
                self.spatial_conv(self.c_in, self.c_in).map(drop)
            }
            LayerKind::Pointwise => {
                self.require_unit_kernel()?;
                ConvSpec::pointwise(self.c_in, self.c_out, 1).map(drop)
            }
            LayerKind::GroupPointwise => {
                self.require_unit_kernel()?;
                ConvSpec::pointwise(self.c_in, self.c_out, self.cg).map(drop)
            }
            LayerKind::Scc => {
                self.require_unit_kernel()?;
                self.scc_config().map(drop)
            }
            LayerKind::DscBlock => {
                self.spatial_conv(self.c_in, self.c_in)?;
                self.scc_config().map(drop)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct CostReport {
    pub macs: u64,
    pub params: u64,
}

impl CostReport {
    /// Two FLOPs per multiply-accumulate.
    pub fn flops(&self) -> u64 {
        2 * self.macs
    }
}

impl Add for CostReport {
    type Output = CostReport;

    fn add(self, rhs: CostReport) -> CostReport {
        CostReport {
            macs: self.macs + rhs.macs,
            params: self.params + rhs.params,
        }
    }
}

impl Sum for CostReport {
    fn sum<I: Iterator<Item = CostReport>>(iter: I) -> CostReport {
        iter.fold(CostReport::default(), Add::add)
    }
}

pub fn layer_cost(spec: &LayerSpec) -> Result<CostReport> {
    spec.validate()?;
    let f_out = spec.output_spatial()? as u64;
    let area = f_out * f_out;
    let (c_in, c_out) = (spec.c_in as u64, spec.c_out as u64);
    let taps = (spec.kernel * spec.kernel) as u64;
    let bias = |count: u64| if spec.count_bias { count } else { 0 };
    let report = match spec.kind {
        LayerKind::Standard => CostReport {
            macs: area * c_out * taps * c_in,
            params: taps * c_in * c_out + bias(c_out),
        },
        LayerKind::Depthwise => CostReport {
            macs: area * c_in * taps,
            params: taps * c_in + bias(c_in),
        },
        LayerKind::Pointwise => CostReport {
            macs: area * c_out * c_in,
            params: c_in * c_out + bias(c_out),
        },
        LayerKind::GroupPointwise | LayerKind::Scc => {
            let width = c_in / spec.cg as u64;
            CostReport {
                macs: area * c_out * width,
                params: c_out * width + bias(c_out),
            }
        }
        LayerKind::DscBlock => {
            let depthwise = LayerSpec {
                kind: LayerKind::Depthwise,
                c_out: spec.c_in,
                ..*spec
            };
            let channel_mix = LayerSpec {
                kind: LayerKind::Scc,
                kernel: 1,
                stride: 1,
                spatial: f_out as usize,
                ..*spec
            };
            layer_cost(&depthwise)? + layer_cost(&channel_mix)?
        }
    };
    Ok(report)
}

pub fn model_cost(layers: &[LayerSpec]) -> Result<CostReport> {
    if layers.is_empty() {
        return Err(Error::argument("model has no layers"));
    }
    layers.iter().map(layer_cost).sum()
}

/// `(variant.macs / base.macs, variant.params / base.params)`.
pub fn reduction_ratio(base: &CostReport, variant: &CostReport) -> Result<(f64, f64)> {
    if base.macs == 0 || base.params == 0 {
        return Err(Error::Division(format!(
            "base report has zero entries: {base:?}"
        )));
    }
    Ok((
        variant.macs as f64 / base.macs as f64,
        variant.params as f64 / base.params as f64,
    ))
}

/// Multiplies executed by the naive reference forward for one sample of
/// this layer. Independent of the closed-form formulas above.
pub fn count_reference_multiplies(spec: &LayerSpec) -> Result<u64> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let input = Tensor4::random(1, spec.c_in, spec.spatial, spec.spatial, &mut rng)?;
    let conv_count = |conv: ConvSpec, input: &Tensor4| -> Result<(Tensor4, u64)> {
        let wts = ConvWeights::zeros(&conv, spec.count_bias);
        grouped_conv_forward_counted(input, &wts, &conv)
    };
    let scc_count = |input: &Tensor4| -> Result<u64> {
        let cfg = spec.scc_config()?;
        let (_, stats) = scc_channel_stack_forward(input, &SccWeights::zeros(&cfg), &cfg, false)?;
        Ok(stats.multiplies)
    };
    match spec.kind {
        LayerKind::Standard => Ok(conv_count(spec.spatial_conv(spec.c_out, 1)?, &input)?.1),
        LayerKind::Depthwise => Ok(conv_count(spec.spatial_conv(spec.c_in, spec.c_in)?, &input)?.1),
        LayerKind::Pointwise => {
            Ok(conv_count(ConvSpec::pointwise(spec.c_in, spec.c_out, 1)?, &input)?.1)
        }
        LayerKind::GroupPointwise => {
            Ok(conv_count(ConvSpec::pointwise(spec.c_in, spec.c_out, spec.cg)?, &input)?.1)
        }
        LayerKind::Scc => scc_count(&input),
        LayerKind::DscBlock => {
            let (mid, dw) = conv_count(spec.spatial_conv(spec.c_in, spec.c_in)?, &input)?;
            Ok(dw + scc_count(&mid)?)
        }
    }
}
