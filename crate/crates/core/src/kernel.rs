//! Direct sliding-channel convolution.
//!
//! The operator is a 1x1, stride-1 convolution in which output channel `oc`
//! reads only the window `window_of(oc)` of input channels:
//!
//! ```text
//! out[n, oc, y, x] = bias[oc] + sum_k weight[oc][k] * in[n, (start_oc + k) % c_in, y, x]
//! ```
//!
//! Work partitioning:
//!
//! * forward: one task per output plane `(n, oc)`, writes are disjoint;
//! * input gradient: one task per input plane `(n, ic)`, which pulls from
//!   every filter covering `ic`, so no two tasks write the same location;
//! * weight gradient: one task per weight slot `(oc, k)`, bias by `oc`.
//!
//! Each output value is accumulated in a fixed order inside a single task,
//! so results are bit-identical for any thread count.

use rand::Rng;
use rayon::prelude::*;

use crate::cycle::{InputCoverage, SccConfig};
use crate::error::{Error, Result};
use crate::tensor::Tensor4;

/// Filter weights, row-major `[oc][k]`. Slot `k` of filter `oc` binds to
/// input channel `(window_of(oc).start + k) % c_in`.
#[derive(Debug, Clone, PartialEq)]
pub struct SccWeights {
    weight: Vec<f64>,
    bias: Option<Vec<f64>>,
}

impl SccWeights {
    pub fn new(cfg: &SccConfig, weight: Vec<f64>, bias: Option<Vec<f64>>) -> Result<Self> {
        if weight.len() != cfg.weight_len() {
            return Err(Error::shape(format!(
                "weight has {} entries, expected c_out * group_width = {}",
                weight.len(),
                cfg.weight_len()
            )));
        }
        match (&bias, cfg.has_bias()) {
            (Some(b), true) if b.len() != cfg.c_out() => {
                return Err(Error::shape(format!(
                    "bias has {} entries, expected c_out = {}",
                    b.len(),
                    cfg.c_out()
                )))
            }
            (Some(_), false) => {
                return Err(Error::shape("bias given for a bias-free configuration"))
            }
            (None, true) => return Err(Error::shape("configuration expects a bias")),
            _ => {}
        }
        Ok(Self { weight, bias })
    }

    pub fn zeros(cfg: &SccConfig) -> Self {
        Self {
            weight: vec![0.0; cfg.weight_len()],
            bias: cfg.has_bias().then(|| vec![0.0; cfg.c_out()]),
        }
    }

    /// Fan-in scaled uniform init in `±sqrt(1 / group_width)`.
    pub fn init<R: Rng + ?Sized>(cfg: &SccConfig, rng: &mut R) -> Self {
        let bound = (1.0 / cfg.group_width() as f64).sqrt();
        let weight = (0..cfg.weight_len())
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = cfg.has_bias().then(|| {
            (0..cfg.c_out())
                .map(|_| rng.random_range(-bound..bound))
                .collect()
        });
        Self { weight, bias }
    }

    pub fn weight(&self) -> &[f64] {
        &self.weight
    }

    pub fn weight_mut(&mut self) -> &mut [f64] {
        &mut self.weight
    }

    pub fn bias(&self) -> Option<&[f64]> {
        self.bias.as_deref()
    }

    pub fn bias_mut(&mut self) -> Option<&mut [f64]> {
        self.bias.as_deref_mut()
    }

    /// Weights of filter `oc`, one per window slot.
    pub fn filter(&self, oc: usize, group_width: usize) -> &[f64] {
        &self.weight[oc * group_width..(oc + 1) * group_width]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SccGradients {
    pub grad_input: Tensor4,
    pub grad_weight: Vec<f64>,
    pub grad_bias: Option<Vec<f64>>,
}

fn check_weights(wts: &SccWeights, cfg: &SccConfig) -> Result<()> {
    if wts.weight.len() != cfg.weight_len() {
        return Err(Error::shape(format!(
            "weights hold {} entries, configuration needs {}",
            wts.weight.len(),
            cfg.weight_len()
        )));
    }
    if wts.bias.is_some() != cfg.has_bias() {
        return Err(Error::shape("bias presence disagrees with configuration"));
    }
    Ok(())
}

fn check_channels(t: &Tensor4, expected: usize, what: &str) -> Result<()> {
    if t.c() != expected {
        return Err(Error::shape(format!(
            "{what} has {} channels, expected {expected}",
            t.c()
        )));
    }
    Ok(())
}

pub fn scc_forward(input: &Tensor4, wts: &SccWeights, cfg: &SccConfig) -> Result<Tensor4> {
    check_channels(input, cfg.c_in(), "input")?;
    check_weights(wts, cfg)?;
    let cycle = cfg.channel_cycle();
    let (n, h, w) = (input.n(), input.h(), input.w());
    let (c_in, c_out, gw) = (cfg.c_in(), cfg.c_out(), cfg.group_width());
    let mut out = Tensor4::zeros(n, c_out, h, w)?;
    out.data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (b, oc) = (idx / c_out, idx % c_out);
            let init = wts.bias.as_ref().map_or(0.0, |bias| bias[oc]);
            plane.fill(init);
            let window = cycle.window_of(oc);
            for (k, &wv) in wts.filter(oc, gw).iter().enumerate() {
                let src = input.plane(b, window.channel(k, c_in));
                for (o, &s) in plane.iter_mut().zip(src) {
                    *o += wv * s;
                }
            }
        });
    Ok(out)
}

pub fn scc_backward_input(
    grad_out: &Tensor4,
    wts: &SccWeights,
    cfg: &SccConfig,
) -> Result<Tensor4> {
    check_channels(grad_out, cfg.c_out(), "output gradient")?;
    check_weights(wts, cfg)?;
    let cycle = cfg.channel_cycle();
    let coverage = InputCoverage::new(cfg, &cycle);
    let (n, h, w) = (grad_out.n(), grad_out.h(), grad_out.w());
    let (c_in, gw) = (cfg.c_in(), cfg.group_width());
    let mut grad_in = Tensor4::zeros(n, c_in, h, w)?;
    grad_in
        .data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (b, ic) = (idx / c_in, idx % c_in);
            for &(oc, k) in coverage.readers(ic) {
                let wv = wts.weight[oc * gw + k];
                let src = grad_out.plane(b, oc);
                for (g, &s) in plane.iter_mut().zip(src) {
                    *g += wv * s;
                }
            }
        });
    Ok(grad_in)
}

/// Weight and bias gradients. The bias gradient is `None` when the
/// configuration has no bias.
pub fn scc_backward_params(
    grad_out: &Tensor4,
    input: &Tensor4,
    cfg: &SccConfig,
) -> Result<(Vec<f64>, Option<Vec<f64>>)> {
    check_channels(grad_out, cfg.c_out(), "output gradient")?;
    check_channels(input, cfg.c_in(), "input")?;
    if (grad_out.n(), grad_out.h(), grad_out.w()) != (input.n(), input.h(), input.w()) {
        return Err(Error::shape(format!(
            "output gradient {:?} does not line up with input {:?}",
            grad_out.shape(),
            input.shape()
        )));
    }
    let cycle = cfg.channel_cycle();
    let (c_in, gw, n) = (cfg.c_in(), cfg.group_width(), input.n());
    let grad_weight = (0..cfg.weight_len())
        .into_par_iter()
        .map(|slot| {
            let (oc, k) = (slot / gw, slot % gw);
            let ic = cycle.window_of(oc).channel(k, c_in);
            let mut acc = 0.0;
            for b in 0..n {
                for (&g, &x) in grad_out.plane(b, oc).iter().zip(input.plane(b, ic)) {
                    acc += g * x;
                }
            }
            acc
        })
        .collect();
    let grad_bias = cfg.has_bias().then(|| bias_gradient(grad_out));
    Ok((grad_weight, grad_bias))
}

/// Per-channel sum of an output gradient over batch and space.
pub(crate) fn bias_gradient(grad_out: &Tensor4) -> Vec<f64> {
    (0..grad_out.c())
        .into_par_iter()
        .map(|oc| {
            let mut acc = 0.0;
            for b in 0..grad_out.n() {
                for &g in grad_out.plane(b, oc) {
                    acc += g;
                }
            }
            acc
        })
        .collect()
}

pub fn scc_backward(
    grad_out: &Tensor4,
    input: &Tensor4,
    wts: &SccWeights,
    cfg: &SccConfig,
) -> Result<SccGradients> {
    let grad_input = scc_backward_input(grad_out, wts, cfg)?;
    let (grad_weight, grad_bias) = scc_backward_params(grad_out, input, cfg)?;
    Ok(SccGradients {
        grad_input,
        grad_weight,
        grad_bias,
    })
}
