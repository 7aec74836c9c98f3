//! Sliding-channel convolution (SCC) on the CPU.
//!
//! An SCC layer is a 1x1 convolution whose filters each read a window of
//! `c_in / cg` input channels. Adjacent windows overlap and wrap around the
//! channel ring. This crate provides:
//!
//! * [`tensor`]: the `(n, c, h, w)` container and its fixture file format;
//! * [`cycle`]: layer configuration and the repeating window table;
//! * [`kernel`]: the direct forward and backward passes;
//! * [`reference`]: naive grouped convolution and composition-based oracles;
//! * [`cost`]: MAC and parameter counting;
//! * [`model`], [`data`], [`train`], [`gradcheck`], [`bench`]: the harness
//!   used by the command-line tool.

pub mod bench;
pub mod cost;
pub mod cycle;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod kernel;
pub mod model;
pub mod reference;
pub mod tensor;
pub mod train;

pub use cost::{layer_cost, model_cost, reduction_ratio, CostReport, LayerKind, LayerSpec};
pub use cycle::{
    compute_channel_cycle, covering_filters, ChannelCycle, ChannelWindow, Overlap, SccConfig,
};
pub use error::{Error, Result};
pub use kernel::{
    scc_backward, scc_backward_input, scc_backward_params, scc_forward, SccGradients, SccWeights,
};
pub use reference::{
    grouped_conv_backward, grouped_conv_forward, scc_channel_stack_forward, scc_conv_stack_forward,
    CompositionStats, ConvSpec, ConvWeights,
};
pub use tensor::{concat_channels, Tensor4};
