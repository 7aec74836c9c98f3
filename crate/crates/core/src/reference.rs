//! Naive reference convolutions and composition-based SCC oracles.
//!
//! [`grouped_conv_forward`] covers standard (groups = 1), depthwise
//! (groups = c_in) and pointwise / group-pointwise (kernel = 1) convolution.
//! It walks every kernel tap, padded ones included, and counts the multiplies
//! it executes so the cost model can be checked against it.
//!
//! The two SCC compositions rebuild the operator from slicing, concatenation
//! and grouped convolution:
//!
//! * channel stack: slice every filter's window, concatenate into one
//!   `c_out * group_width` channel tensor, then run a 1x1 convolution with
//!   `groups = c_out`;
//! * conv stack: slice each window, run a one-filter 1x1 convolution on it,
//!   and concatenate the `c_out` single-channel results.
//!
//! With the channel-cyclic option both only build the `cyclic_dist` distinct
//! windows of the first cycle and reuse them for later filters.

use rand::Rng;
use rayon::prelude::*;

use crate::cycle::SccConfig;
use crate::error::{Error, Result};
use crate::kernel::{bias_gradient, SccGradients, SccWeights};
use crate::tensor::{concat_channels, Tensor4};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ConvSpec {
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvSpec {
    pub fn new(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
    ) -> Result<Self> {
        let spec = Self {
            c_in,
            c_out,
            kernel,
            stride,
            padding,
            groups,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// 1x1, stride 1, no padding.
    pub fn pointwise(c_in: usize, c_out: usize, groups: usize) -> Result<Self> {
        Self::new(c_in, c_out, 1, 1, 0, groups)
    }

    /// One `kernel x kernel` filter per channel, padded to keep the spatial size.
    pub fn depthwise(channels: usize, kernel: usize, stride: usize) -> Result<Self> {
        Self::new(channels, channels, kernel, stride, kernel / 2, channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.c_in == 0 || self.c_out == 0 || self.groups == 0 {
            return Err(Error::config(format!("degenerate conv spec {self:?}")));
        }
        if self.kernel == 0 || self.stride == 0 {
            return Err(Error::config("kernel and stride must be >= 1"));
        }
        if self.c_in % self.groups != 0 || self.c_out % self.groups != 0 {
            return Err(Error::config(format!(
                "groups={} must divide c_in={} and c_out={}",
                self.groups, self.c_in, self.c_out
            )));
        }
        Ok(())
    }

    pub fn in_per_group(&self) -> usize {
        self.c_in / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.c_out / self.groups
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.in_per_group() * self.kernel * self.kernel
    }

    /// `floor((size + 2 * padding - kernel) / stride) + 1`, or a shape error
    /// when the padded input is smaller than the kernel.
    pub fn output_size(&self, size: usize) -> Result<usize> {
        let padded = size + 2 * self.padding;
        if padded < self.kernel {
            return Err(Error::shape(format!(
                "input extent {size} with padding {} is smaller than kernel {}",
                self.padding, self.kernel
            )));
        }
        Ok((padded - self.kernel) / self.stride + 1)
    }
}

/// Weights indexed `[oc][a][i][j]`, `a` running over the group's input channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvWeights {
    pub weight: Vec<f64>,
    pub bias: Option<Vec<f64>>,
}

impl ConvWeights {
    pub fn new(spec: &ConvSpec, weight: Vec<f64>, bias: Option<Vec<f64>>) -> Result<Self> {
        let w = Self { weight, bias };
        w.check(spec)?;
        Ok(w)
    }

    pub fn zeros(spec: &ConvSpec, with_bias: bool) -> Self {
        Self {
            weight: vec![0.0; spec.weight_len()],
            bias: with_bias.then(|| vec![0.0; spec.c_out]),
        }
    }

    /// Uniform in `±sqrt(1 / fan_in)`.
    pub fn init<R: Rng + ?Sized>(spec: &ConvSpec, with_bias: bool, rng: &mut R) -> Self {
        let fan_in = spec.in_per_group() * spec.kernel * spec.kernel;
        let bound = (1.0 / fan_in as f64).sqrt();
        let weight = (0..spec.weight_len())
            .map(|_| rng.random_range(-bound..bound))
            .collect();
        let bias = with_bias.then(|| {
            (0..spec.c_out)
                .map(|_| rng.random_range(-bound..bound))
                .collect()
        });
        Self { weight, bias }
    }

    fn check(&self, spec: &ConvSpec) -> Result<()> {
        if self.weight.len() != spec.weight_len() {
            return Err(Error::shape(format!(
                "conv weight has {} entries, spec needs {}",
                self.weight.len(),
                spec.weight_len()
            )));
        }
        if let Some(b) = &self.bias {
            if b.len() != spec.c_out {
                return Err(Error::shape(format!(
                    "conv bias has {} entries, spec needs {}",
                    b.len(),
                    spec.c_out
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvGradients {
    pub grad_input: Tensor4,
    pub grad_weight: Vec<f64>,
    pub grad_bias: Option<Vec<f64>>,
}

/// Intermediate storage used by a composition oracle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct CompositionStats {
    /// Feature-map channels materialized before any cycle replication.
    pub aux_channels_stored: usize,
    pub aux_bytes: usize,
    /// Scalar multiplies executed by the convolution step(s).
    pub multiplies: u64,
}

impl CompositionStats {
    fn for_channels(channels: usize, input: &Tensor4) -> Self {
        Self {
            aux_channels_stored: channels,
            aux_bytes: channels * input.n() * input.plane_len() * std::mem::size_of::<f64>(),
            multiplies: 0,
        }
    }
}

fn check_input(input: &Tensor4, spec: &ConvSpec) -> Result<(usize, usize)> {
    spec.validate()?;
    if input.c() != spec.c_in {
        return Err(Error::shape(format!(
            "input has {} channels, spec expects {}",
            input.c(),
            spec.c_in
        )));
    }
    Ok((spec.output_size(input.h())?, spec.output_size(input.w())?))
}

/// Input coordinate of output position `o` and tap `t`, or `None` in the padding.
#[inline]
fn source_coord(o: usize, t: usize, spec: &ConvSpec, extent: usize) -> Option<usize> {
    (o * spec.stride + t)
        .checked_sub(spec.padding)
        .filter(|&v| v < extent)
}

pub fn grouped_conv_forward(
    input: &Tensor4,
    wts: &ConvWeights,
    spec: &ConvSpec,
) -> Result<Tensor4> {
    grouped_conv_forward_counted(input, wts, spec).map(|(out, _)| out)
}

/// Forward pass that also returns the number of multiplies executed.
pub fn grouped_conv_forward_counted(
    input: &Tensor4,
    wts: &ConvWeights,
    spec: &ConvSpec,
) -> Result<(Tensor4, u64)> {
    let (out_h, out_w) = check_input(input, spec)?;
    wts.check(spec)?;
    let (cin_g, cout_g, k) = (spec.in_per_group(), spec.out_per_group(), spec.kernel);
    let (h, w) = (input.h(), input.w());
    let mut out = Tensor4::zeros(input.n(), spec.c_out, out_h, out_w)?;
    let multiplies = out
        .data_mut()
        .par_chunks_mut(out_h * out_w)
        .enumerate()
        .map(|(idx, plane)| {
            let (b, oc) = (idx / spec.c_out, idx % spec.c_out);
            let first_in = (oc / cout_g) * cin_g;
            let filter = &wts.weight[oc * cin_g * k * k..(oc + 1) * cin_g * k * k];
            let bias = wts.bias.as_ref().map_or(0.0, |bias| bias[oc]);
            let mut count = 0u64;
            for oy in 0..out_h {
                for ox in 0..out_w {
                    let mut acc = 0.0;
                    for a in 0..cin_g {
                        let src = input.plane(b, first_in + a);
                        for i in 0..k {
                            let iy = source_coord(oy, i, spec, h);
                            for j in 0..k {
                                let ix = source_coord(ox, j, spec, w);
                                let v = match (iy, ix) {
                                    (Some(y), Some(x)) => src[y * w + x],
                                    _ => 0.0,
                                };
                                acc += filter[(a * k + i) * k + j] * v;
                                count += 1;
                            }
                        }
                    }
                    plane[oy * out_w + ox] = acc + bias;
                }
            }
            count
        })
        .sum();
    Ok((out, multiplies))
}

pub fn grouped_conv_backward(
    grad_out: &Tensor4,
    input: &Tensor4,
    wts: &ConvWeights,
    spec: &ConvSpec,
) -> Result<ConvGradients> {
    let (out_h, out_w) = check_input(input, spec)?;
    wts.check(spec)?;
    if grad_out.shape() != [input.n(), spec.c_out, out_h, out_w] {
        return Err(Error::shape(format!(
            "output gradient {:?} does not match forward output {:?}",
            grad_out.shape(),
            [input.n(), spec.c_out, out_h, out_w]
        )));
    }
    let (cin_g, cout_g, k) = (spec.in_per_group(), spec.out_per_group(), spec.kernel);
    let (n, h, w) = (input.n(), input.h(), input.w());

    // Input gradient: one task per input plane, pulling from its group's filters.
    let mut grad_input = Tensor4::zeros(n, spec.c_in, h, w)?;
    grad_input
        .data_mut()
        .par_chunks_mut(h * w)
        .enumerate()
        .for_each(|(idx, plane)| {
            let (b, ic) = (idx / spec.c_in, idx % spec.c_in);
            let (g, a) = (ic / cin_g, ic % cin_g);
            for oc in g * cout_g..(g + 1) * cout_g {
                let go = grad_out.plane(b, oc);
                for i in 0..k {
                    for j in 0..k {
                        let wv = wts.weight[((oc * cin_g + a) * k + i) * k + j];
                        for oy in 0..out_h {
                            let Some(y) = source_coord(oy, i, spec, h) else {
                                continue;
                            };
                            for ox in 0..out_w {
                                if let Some(x) = source_coord(ox, j, spec, w) {
                                    plane[y * w + x] += wv * go[oy * out_w + ox];
                                }
                            }
                        }
                    }
                }
            }
        });

    // Weight gradient: one task per weight entry.
    let grad_weight = (0..spec.weight_len())
        .into_par_iter()
        .map(|slot| {
            let j = slot % k;
            let i = (slot / k) % k;
            let a = (slot / (k * k)) % cin_g;
            let oc = slot / (k * k * cin_g);
            let ic = (oc / cout_g) * cin_g + a;
            let mut acc = 0.0;
            for b in 0..n {
                let go = grad_out.plane(b, oc);
                let src = input.plane(b, ic);
                for oy in 0..out_h {
                    let Some(y) = source_coord(oy, i, spec, h) else {
                        continue;
                    };
                    for ox in 0..out_w {
                        if let Some(x) = source_coord(ox, j, spec, w) {
                            acc += go[oy * out_w + ox] * src[y * w + x];
                        }
                    }
                }
            }
            acc
        })
        .collect();

    let grad_bias = wts.bias.is_some().then(|| bias_gradient(grad_out));
    Ok(ConvGradients {
        grad_input,
        grad_weight,
        grad_bias,
    })
}

fn check_scc_input(input: &Tensor4, cfg: &SccConfig) -> Result<()> {
    if input.c() != cfg.c_in() {
        return Err(Error::shape(format!(
            "input has {} channels, expected {}",
            input.c(),
            cfg.c_in()
        )));
    }
    Ok(())
}

/// SCC weights viewed as a 1x1 grouped convolution with one group per filter.
fn per_filter_conv(wts: &SccWeights, cfg: &SccConfig) -> Result<(ConvSpec, ConvWeights)> {
    let gw = cfg.group_width();
    let spec = ConvSpec::pointwise(cfg.c_out() * gw, cfg.c_out(), cfg.c_out())?;
    let weights = ConvWeights::new(
        &spec,
        wts.weight().to_vec(),
        wts.bias().map(<[f64]>::to_vec),
    )?;
    Ok((spec, weights))
}

/// The tensor fed to the grouped convolution in the channel-stack
/// composition, plus the number of channels sliced out of the input.
fn channel_stack(input: &Tensor4, cfg: &SccConfig, use_cc: bool) -> Result<(Tensor4, usize)> {
    let cycle = cfg.channel_cycle();
    let gw = cfg.group_width();
    let slice = |oc: usize| input.slice_channels_cyclic(cycle.window_of(oc).start, gw);
    if !use_cc {
        let parts = (0..cfg.c_out()).map(slice).collect::<Result<Vec<_>>>()?;
        return Ok((concat_channels(&parts)?, cfg.c_out() * gw));
    }
    let dist = cycle.cyclic_dist();
    let parts = (0..dist).map(slice).collect::<Result<Vec<_>>>()?;
    let first_cycle = concat_channels(&parts)?;
    let repeats = cfg.c_out().div_ceil(dist);
    let replicated = concat_channels(&vec![first_cycle; repeats])?;
    let stacked = if repeats * dist == cfg.c_out() {
        replicated
    } else {
        replicated.slice_channels_cyclic(0, cfg.c_out() * gw)?
    };
    Ok((stacked, dist * gw))
}

pub fn scc_channel_stack_forward(
    input: &Tensor4,
    wts: &SccWeights,
    cfg: &SccConfig,
    use_cc: bool,
) -> Result<(Tensor4, CompositionStats)> {
    check_scc_input(input, cfg)?;
    let (stacked, stored) = channel_stack(input, cfg, use_cc)?;
    let (spec, conv_wts) = per_filter_conv(wts, cfg)?;
    let (out, multiplies) = grouped_conv_forward_counted(&stacked, &conv_wts, &spec)?;
    let mut stats = CompositionStats::for_channels(stored, input);
    stats.multiplies = multiplies;
    Ok((out, stats))
}

/// Adds stacked-tensor channel gradients back onto the input channels they
/// were sliced from.
fn scatter_windows(
    grad_stacked: &Tensor4,
    cfg: &SccConfig,
    filters: usize,
    c_in: usize,
) -> Result<Tensor4> {
    let cycle = cfg.channel_cycle();
    let gw = cfg.group_width();
    let (n, h, w) = (grad_stacked.n(), grad_stacked.h(), grad_stacked.w());
    let mut grad_input = Tensor4::zeros(n, c_in, h, w)?;
    let plane = h * w;
    for b in 0..n {
        for oc in 0..filters {
            let window = cycle.window_of(oc);
            for k in 0..gw {
                let ic = window.channel(k, c_in);
                let src = grad_stacked.plane(b, oc * gw + k);
                let start = (b * c_in + ic) * plane;
                for (d, &s) in grad_input.data_mut()[start..start + plane]
                    .iter_mut()
                    .zip(src)
                {
                    *d += s;
                }
            }
        }
    }
    Ok(grad_input)
}

/// Sums the gradient of every replicated cycle into the first cycle.
fn fold_cycles(grad_stacked: &Tensor4, cycle_channels: usize) -> Result<Tensor4> {
    let (n, c, h, w) = (
        grad_stacked.n(),
        grad_stacked.c(),
        grad_stacked.h(),
        grad_stacked.w(),
    );
    let mut folded = Tensor4::zeros(n, cycle_channels, h, w)?;
    let plane = h * w;
    for b in 0..n {
        for ch in 0..c {
            let start = (b * cycle_channels + ch % cycle_channels) * plane;
            for (d, &s) in folded.data_mut()[start..start + plane]
                .iter_mut()
                .zip(grad_stacked.plane(b, ch))
            {
                *d += s;
            }
        }
    }
    Ok(folded)
}

pub fn scc_channel_stack_backward(
    grad_out: &Tensor4,
    input: &Tensor4,
    wts: &SccWeights,
    cfg: &SccConfig,
    use_cc: bool,
) -> Result<SccGradients> {
    check_scc_input(input, cfg)?;
    let (stacked, _) = channel_stack(input, cfg, use_cc)?;
    let (spec, conv_wts) = per_filter_conv(wts, cfg)?;
    let grads = grouped_conv_backward(grad_out, &stacked, &conv_wts, &spec)?;
    let grad_input = if use_cc {
        let dist = cfg.channel_cycle().cyclic_dist();
        let folded = fold_cycles(&grads.grad_input, dist * cfg.group_width())?;
        scatter_windows(&folded, cfg, dist, cfg.c_in())?
    } else {
        scatter_windows(&grads.grad_input, cfg, cfg.c_out(), cfg.c_in())?
    };
    Ok(SccGradients {
        grad_input,
        grad_weight: grads.grad_weight,
        grad_bias: grads.grad_bias,
    })
}

/// One-filter 1x1 convolution for output channel `oc`.
fn single_filter_conv(
    wts: &SccWeights,
    cfg: &SccConfig,
    oc: usize,
) -> Result<(ConvSpec, ConvWeights)> {
    let gw = cfg.group_width();
    let spec = ConvSpec::pointwise(gw, 1, 1)?;
    let weights = ConvWeights::new(
        &spec,
        wts.filter(oc, gw).to_vec(),
        wts.bias().map(|b| vec![b[oc]]),
    )?;
    Ok((spec, weights))
}

/// Window slices consumed by the conv-stack composition: one per filter, or
/// one per distinct window with the channel-cyclic option.
fn conv_stack_slices(input: &Tensor4, cfg: &SccConfig, use_cc: bool) -> Result<Vec<Tensor4>> {
    let cycle = cfg.channel_cycle();
    let count = if use_cc {
        cycle.cyclic_dist()
    } else {
        cfg.c_out()
    };
    (0..count)
        .map(|oc| input.slice_channels_cyclic(cycle.window_of(oc).start, cfg.group_width()))
        .collect()
}

pub fn scc_conv_stack_forward(
    input: &Tensor4,
    wts: &SccWeights,
    cfg: &SccConfig,
    use_cc: bool,
) -> Result<(Tensor4, CompositionStats)> {
    check_scc_input(input, cfg)?;
    let slices = conv_stack_slices(input, cfg, use_cc)?;
    let mut stats = CompositionStats::for_channels(slices.len() * cfg.group_width(), input);
    let mut outputs = Vec::with_capacity(cfg.c_out());
    for oc in 0..cfg.c_out() {
        let (spec, conv_wts) = single_filter_conv(wts, cfg, oc)?;
        let (out, count) =
            grouped_conv_forward_counted(&slices[oc % slices.len()], &conv_wts, &spec)?;
        stats.multiplies += count;
        outputs.push(out);
    }
    Ok((concat_channels(&outputs)?, stats))
}

pub fn scc_conv_stack_backward(
    grad_out: &Tensor4,
    input: &Tensor4,
    wts: &SccWeights,
    cfg: &SccConfig,
    use_cc: bool,
) -> Result<SccGradients> {
    check_scc_input(input, cfg)?;
    if grad_out.c() != cfg.c_out() {
        return Err(Error::shape(format!(
            "output gradient has {} channels, expected {}",
            grad_out.c(),
            cfg.c_out()
        )));
    }
    let slices = conv_stack_slices(input, cfg, use_cc)?;
    let gw = cfg.group_width();
    let mut slice_grads: Vec<Option<Tensor4>> = vec![None; slices.len()];
    let mut grad_weight = Vec::with_capacity(cfg.weight_len());
    let mut grad_bias = cfg.has_bias().then(Vec::new);
    for oc in 0..cfg.c_out() {
        let (spec, conv_wts) = single_filter_conv(wts, cfg, oc)?;
        let go = grad_out.slice_channels_cyclic(oc, 1)?;
        let slot = oc % slices.len();
        let g = grouped_conv_backward(&go, &slices[slot], &conv_wts, &spec)?;
        grad_weight.extend_from_slice(&g.grad_weight);
        if let (Some(acc), Some(gb)) = (grad_bias.as_mut(), g.grad_bias) {
            acc.push(gb[0]);
        }
        match &mut slice_grads[slot] {
            Some(acc) => {
                for (d, s) in acc.data_mut().iter_mut().zip(g.grad_input.data()) {
                    *d += s;
                }
            }
            empty => *empty = Some(g.grad_input),
        }
    }
    let parts: Vec<Tensor4> = slice_grads.into_iter().flatten().collect();
    let grad_stacked = concat_channels(&parts)?;
    let grad_input = scatter_windows(&grad_stacked, cfg, parts.len(), cfg.c_in())?;
    debug_assert_eq!(grad_weight.len(), cfg.c_out() * gw);
    Ok(SccGradients {
        grad_input,
        grad_weight,
        grad_bias,
    })
}

/// SCC weights written out as a dense 1x1 convolution over all input
/// channels, with zeros outside each filter's window.
pub fn scc_as_pointwise(wts: &SccWeights, cfg: &SccConfig) -> Result<(ConvSpec, ConvWeights)> {
    let (c_in, c_out, gw) = (cfg.c_in(), cfg.c_out(), cfg.group_width());
    let spec = ConvSpec::pointwise(c_in, c_out, 1)?;
    let cycle = cfg.channel_cycle();
    let mut dense = vec![0.0; c_out * c_in];
    for oc in 0..c_out {
        let window = cycle.window_of(oc);
        for (k, &wv) in wts.filter(oc, gw).iter().enumerate() {
            dense[oc * c_in + window.channel(k, c_in)] = wv;
        }
    }
    let weights = ConvWeights::new(&spec, dense, wts.bias().map(<[f64]>::to_vec))?;
    Ok((spec, weights))
}

/// Group-pointwise layout of a zero-overlap SCC.
///
/// With no overlap, filter `oc` reads group `oc % cg`, while a grouped
/// convolution assigns contiguous output blocks to groups. The returned
/// `order[q]` is the SCC output channel that grouped output channel `q`
/// corresponds to.
pub fn scc_as_group_pointwise(
    wts: &SccWeights,
    cfg: &SccConfig,
) -> Result<(ConvSpec, ConvWeights, Vec<usize>)> {
    if cfg.overlap_channels() != 0 {
        return Err(Error::config(
            "group-pointwise layout needs zero overlap between filters",
        ));
    }
    let (cg, gw) = (cfg.cg(), cfg.group_width());
    let spec = ConvSpec::pointwise(cfg.c_in(), cfg.c_out(), cg)?;
    let per_group = cfg.c_out() / cg;
    let order: Vec<usize> = (0..cfg.c_out())
        .map(|q| (q % per_group) * cg + q / per_group)
        .collect();
    let weight = order
        .iter()
        .flat_map(|&oc| wts.filter(oc, gw).iter().copied())
        .collect();
    let bias = wts.bias().map(|b| order.iter().map(|&oc| b[oc]).collect());
    Ok((spec, ConvWeights::new(&spec, weight, bias)?, order))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cycle::Overlap;
    use crate::kernel::{scc_backward, scc_forward};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Depthwise convolution written directly from its per-channel sum.
    fn depthwise_by_definition(x: &Tensor4, k: &[f64], kernel: usize, pad: usize) -> Tensor4 {
        let (h, w) = (x.h(), x.w());
        Tensor4::from_fn(x.n(), x.c(), h, w, |b, c, m, n| {
            let mut acc = 0.0;
            for i in 0..kernel {
                for j in 0..kernel {
                    let (y, xx) = (
                        m as isize + i as isize - pad as isize,
                        n as isize + j as isize - pad as isize,
                    );
                    if y >= 0 && xx >= 0 && (y as usize) < h && (xx as usize) < w {
                        acc +=
                            k[(c * kernel + i) * kernel + j] * x.get(b, c, y as usize, xx as usize);
                    }
                }
            }
            acc
        })
        .unwrap()
    }

    /// Pointwise convolution written directly from its channel sum.
    fn pointwise_by_definition(x: &Tensor4, k: &[f64], c_out: usize) -> Tensor4 {
        Tensor4::from_fn(x.n(), c_out, x.h(), x.w(), |b, c, m, n| {
            (0..x.c())
                .map(|a| k[c * x.c() + a] * x.get(b, a, m, n))
                .sum()
        })
        .unwrap()
    }

    #[test]
    fn identity_kernel() {
        let spec = ConvSpec::pointwise(1, 1, 1).unwrap();
        let wts = ConvWeights::new(&spec, vec![1.0], None).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor4::random(2, 1, 3, 4, &mut rng).unwrap();
        assert_eq!(grouped_conv_forward(&x, &wts, &spec).unwrap(), x);
    }

    #[test]
    fn padded_box_filter() {
        let spec = ConvSpec::new(1, 1, 3, 1, 1, 1).unwrap();
        let wts = ConvWeights::new(&spec, vec![1.0; 9], None).unwrap();
        let x = Tensor4::filled(1, 1, 3, 3, 1.0).unwrap();
        let out = grouped_conv_forward(&x, &wts, &spec).unwrap();
        assert_eq!(out.data(), &[4.0, 6.0, 4.0, 6.0, 9.0, 6.0, 4.0, 6.0, 4.0]);
    }

    #[test]
    fn depthwise_channels_are_independent() {
        let spec = ConvSpec::depthwise(3, 3, 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut wts = ConvWeights::init(&spec, false, &mut rng);
        wts.weight[9..18].fill(0.0);
        let x = Tensor4::random(2, 3, 4, 4, &mut rng).unwrap();
        let out = grouped_conv_forward(&x, &wts, &spec).unwrap();
        for b in 0..2 {
            assert!(out.plane(b, 1).iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn matches_per_equation_definitions() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for (c, kernel) in [(3, 3), (4, 5), (2, 1)] {
            let x = Tensor4::random(2, c, 5, 4, &mut rng).unwrap();
            let spec = ConvSpec::depthwise(c, kernel, 1).unwrap();
            let wts = ConvWeights::init(&spec, false, &mut rng);
            let got = grouped_conv_forward(&x, &wts, &spec).unwrap();
            let want = depthwise_by_definition(&x, &wts.weight, kernel, kernel / 2);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12);

            let spec = ConvSpec::pointwise(c, 5, 1).unwrap();
            let wts = ConvWeights::init(&spec, false, &mut rng);
            let got = grouped_conv_forward(&x, &wts, &spec).unwrap();
            let want = pointwise_by_definition(&x, &wts.weight, 5);
            assert!(got.max_abs_diff(&want).unwrap() < 1e-12);
        }
    }

    #[test]
    fn strided_output_size() {
        let spec = ConvSpec::new(1, 1, 3, 2, 1, 1).unwrap();
        assert_eq!(spec.output_size(8).unwrap(), 4);
        assert_eq!(spec.output_size(7).unwrap(), 4);
        let spec = ConvSpec::new(1, 1, 5, 1, 0, 1).unwrap();
        assert!(spec.output_size(3).is_err());
    }

    #[test]
    fn spec_errors() {
        assert!(matches!(
            ConvSpec::new(6, 4, 1, 1, 0, 4),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ConvSpec::new(4, 4, 0, 1, 0, 1),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            ConvSpec::new(4, 4, 1, 0, 0, 1),
            Err(Error::Config(_))
        ));
        let spec = ConvSpec::pointwise(4, 4, 1).unwrap();
        let x = Tensor4::zeros(1, 3, 2, 2).unwrap();
        let wts = ConvWeights::zeros(&spec, false);
        assert!(matches!(
            grouped_conv_forward(&x, &wts, &spec),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn counted_multiplies_include_padding_taps() {
        let spec = ConvSpec::new(4, 6, 3, 1, 1, 2).unwrap();
        let wts = ConvWeights::zeros(&spec, true);
        let x = Tensor4::zeros(1, 4, 5, 5).unwrap();
        let (_, count) = grouped_conv_forward_counted(&x, &wts, &spec).unwrap();
        assert_eq!(count, 25 * 6 * 9 * 2);
    }

    #[test]
    fn zero_output_gradient_gives_zero_gradients() {
        let spec = ConvSpec::new(4, 4, 3, 1, 1, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let wts = ConvWeights::init(&spec, true, &mut rng);
        let x = Tensor4::random(2, 4, 4, 4, &mut rng).unwrap();
        let g = Tensor4::zeros(2, 4, 4, 4).unwrap();
        let grads = grouped_conv_backward(&g, &x, &wts, &spec).unwrap();
        assert!(grads.grad_input.data().iter().all(|&v| v == 0.0));
        assert!(grads.grad_weight.iter().all(|&v| v == 0.0));
        assert!(grads.grad_bias.unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn fig7_stats() {
        let cfg = SccConfig::new(4, 4, 2, Overlap::Ratio(0.5), true).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Tensor4::random(1, 4, 3, 3, &mut rng).unwrap();
        let wts = SccWeights::init(&cfg, &mut rng);
        let (_, plain) = scc_channel_stack_forward(&x, &wts, &cfg, false).unwrap();
        let (_, cc) = scc_channel_stack_forward(&x, &wts, &cfg, true).unwrap();
        assert_eq!(plain.aux_channels_stored, 8);
        assert_eq!(cc.aux_channels_stored, 8);
        assert_eq!(plain.aux_bytes, 8 * 9 * 8);
    }

    #[test]
    fn conv_stack_stats_for_wide_layer() {
        let cfg = SccConfig::new(64, 64, 2, Overlap::Ratio(0.5), false).unwrap();
        assert_eq!(cfg.overlap_channels(), 16);
        let x = Tensor4::zeros(1, 64, 1, 1).unwrap();
        let wts = SccWeights::zeros(&cfg);
        let (_, plain) = scc_conv_stack_forward(&x, &wts, &cfg, false).unwrap();
        let (_, cc) = scc_conv_stack_forward(&x, &wts, &cfg, true).unwrap();
        assert_eq!(plain.aux_channels_stored, 2048);
        assert_eq!(cc.aux_channels_stored, 128);
        assert_eq!(1.0 - 128.0 / 2048.0, 0.9375);
    }

    #[test]
    fn single_cycle_has_no_saving() {
        let cfg = SccConfig::new(6, 3, 2, Overlap::Channels(1), false).unwrap();
        assert_eq!(cfg.channel_cycle().cyclic_dist(), 3);
        let x = Tensor4::zeros(1, 6, 2, 2).unwrap();
        let wts = SccWeights::zeros(&cfg);
        let (_, plain) = scc_conv_stack_forward(&x, &wts, &cfg, false).unwrap();
        let (_, cc) = scc_conv_stack_forward(&x, &wts, &cfg, true).unwrap();
        assert_eq!(plain.aux_channels_stored, cc.aux_channels_stored);
    }

    #[test]
    fn single_filter_single_group_is_pointwise() {
        let cfg = SccConfig::new(5, 1, 1, Overlap::Ratio(1.0), false).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = Tensor4::random(2, 5, 3, 3, &mut rng).unwrap();
        let wts = SccWeights::init(&cfg, &mut rng);
        let (stacked, _) = channel_stack(&x, &cfg, false).unwrap();
        assert_eq!(stacked, x);
        let (out, _) = scc_channel_stack_forward(&x, &wts, &cfg, false).unwrap();
        let want = pointwise_by_definition(&x, wts.weight(), 1);
        assert!(out.max_abs_diff(&want).unwrap() < 1e-12);
    }

    #[test]
    fn compositions_agree_with_direct_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        // includes a config whose cycle does not divide c_out
        let configs = [
            (4, 4, 2, 1),
            (6, 8, 2, 1),
            (8, 5, 4, 1),
            (6, 7, 3, 0),
            (4, 6, 1, 2),
        ];
        for (c_in, c_out, cg, ov) in configs {
            let cfg = SccConfig::new(c_in, c_out, cg, Overlap::Channels(ov), true).unwrap();
            let x = Tensor4::random(2, c_in, 3, 2, &mut rng).unwrap();
            let g = Tensor4::random(2, c_out, 3, 2, &mut rng).unwrap();
            let wts = SccWeights::init(&cfg, &mut rng);
            let direct = scc_forward(&x, &wts, &cfg).unwrap();
            let direct_grads = scc_backward(&g, &x, &wts, &cfg).unwrap();
            for cc in [false, true] {
                let (a, _) = scc_channel_stack_forward(&x, &wts, &cfg, cc).unwrap();
                let (b, _) = scc_conv_stack_forward(&x, &wts, &cfg, cc).unwrap();
                assert!(a.max_abs_diff(&direct).unwrap() < 1e-12);
                assert!(b.max_abs_diff(&direct).unwrap() < 1e-12);
                for grads in [
                    scc_channel_stack_backward(&g, &x, &wts, &cfg, cc).unwrap(),
                    scc_conv_stack_backward(&g, &x, &wts, &cfg, cc).unwrap(),
                ] {
                    assert!(
                        grads
                            .grad_input
                            .max_abs_diff(&direct_grads.grad_input)
                            .unwrap()
                            < 1e-12
                    );
                    for (p, q) in grads.grad_weight.iter().zip(&direct_grads.grad_weight) {
                        assert!((p - q).abs() < 1e-12);
                    }
                    for (p, q) in grads
                        .grad_bias
                        .as_ref()
                        .unwrap()
                        .iter()
                        .zip(direct_grads.grad_bias.as_ref().unwrap())
                    {
                        assert!((p - q).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn group_pointwise_order() {
        let cfg = SccConfig::new(6, 6, 3, Overlap::Channels(0), false).unwrap();
        let wts = SccWeights::zeros(&cfg);
        let (spec, _, order) = scc_as_group_pointwise(&wts, &cfg).unwrap();
        assert_eq!(spec.groups, 3);
        assert_eq!(order, vec![0, 3, 1, 4, 2, 5]);
        let overlapped = SccConfig::new(6, 6, 3, Overlap::Channels(1), false).unwrap();
        assert!(scc_as_group_pointwise(&SccWeights::zeros(&overlapped), &overlapped).is_err());
    }
}
