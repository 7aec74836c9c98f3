//! Finite-difference and adjoint checks for the SCC kernel and the grouped
//! reference convolution.
//!
//! Every check uses the scalar loss `L = <G, F(X)>` for a random cotangent
//! `G`. Both operators are affine in each argument, so a central difference
//! of `L` recovers the gradient up to rounding.
//!
//! The adjoint check is done per argument. `F(X, W) = A(X, W) + b` with `A`
//! bilinear, hence `<G, F> = <dX, X> + <db, b>` and
//! `<G, F> = <dW, W> + <db, b>`.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cycle::{Overlap, SccConfig};
use crate::error::{Error, Result};
use crate::kernel::{scc_backward, scc_forward, SccGradients, SccWeights};
use crate::reference::{
    grouped_conv_backward, grouped_conv_forward, scc_channel_stack_backward,
    scc_channel_stack_forward, scc_conv_stack_backward, scc_conv_stack_forward, ConvGradients,
    ConvSpec, ConvWeights,
};
use crate::tensor::Tensor4;

/// Magnitude below which errors are measured absolutely rather than relative
/// to the gradient entry.
pub const REL_ERR_FLOOR: f64 = 1e-3;

/// Maximum elementwise disagreement tolerated between the direct kernel and
/// the composition oracles.
pub const ORACLE_TOL: f64 = 1e-12;

/// Maximum residual of the adjoint identities.
pub const ADJOINT_TOL: f64 = 1e-10;

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERR_FLOOR)
}

fn max_rel(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max)
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| p * q).sum()
}

/// Central difference of `loss` with respect to every entry of `params`.
fn central_difference<F>(params: &mut [f64], eps: f64, mut loss: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    (0..params.len())
        .map(|i| {
            let orig = params[i];
            params[i] = orig + eps;
            let plus = loss(params);
            params[i] = orig - eps;
            let minus = loss(params);
            params[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

fn with_data(t: &Tensor4, data: &[f64]) -> Tensor4 {
    let [n, c, h, w] = t.shape();
    Tensor4::from_vec(n, c, h, w, data.to_vec()).expect("shape preserved")
}

pub fn numeric_scc_gradients(
    cotangent: &Tensor4,
    input: &Tensor4,
    wts: &SccWeights,
    cfg: &SccConfig,
    eps: f64,
) -> Result<SccGradients> {
    let loss = |x: &Tensor4, w: &SccWeights| -> f64 {
        cotangent
            .dot(&scc_forward(x, w, cfg).expect("validated shapes"))
            .expect("validated shapes")
    };
    scc_forward(input, wts, cfg)?;

    let mut x = input.data().to_vec();
    let grad_input = central_difference(&mut x, eps, |d| loss(&with_data(input, d), wts));
    let mut w = wts.weight().to_vec();
    let grad_weight = central_difference(&mut w, eps, |d| {
        let trial = SccWeights::new(cfg, d.to_vec(), wts.bias().map(<[f64]>::to_vec)).unwrap();
        loss(input, &trial)
    });
    let grad_bias = wts.bias().map(|bias| {
        let mut b = bias.to_vec();
        central_difference(&mut b, eps, |d| {
            let trial = SccWeights::new(cfg, wts.weight().to_vec(), Some(d.to_vec())).unwrap();
            loss(input, &trial)
        })
    });
    Ok(SccGradients {
        grad_input: with_data(input, &grad_input),
        grad_weight,
        grad_bias,
    })
}

pub fn numeric_conv_gradients(
    cotangent: &Tensor4,
    input: &Tensor4,
    wts: &ConvWeights,
    spec: &ConvSpec,
    eps: f64,
) -> Result<ConvGradients> {
    let loss = |x: &Tensor4, w: &ConvWeights| -> f64 {
        cotangent
            .dot(&grouped_conv_forward(x, w, spec).expect("validated shapes"))
            .expect("validated shapes")
    };
    cotangent.require_same_shape(&grouped_conv_forward(input, wts, spec)?)?;

    let mut x = input.data().to_vec();
    let grad_input = central_difference(&mut x, eps, |d| loss(&with_data(input, d), wts));
    let mut w = wts.weight.clone();
    let grad_weight = central_difference(&mut w, eps, |d| {
        loss(
            input,
            &ConvWeights {
                weight: d.to_vec(),
                bias: wts.bias.clone(),
            },
        )
    });
    let grad_bias = wts.bias.as_ref().map(|bias| {
        let mut b = bias.clone();
        central_difference(&mut b, eps, |d| {
            loss(
                input,
                &ConvWeights {
                    weight: wts.weight.clone(),
                    bias: Some(d.to_vec()),
                },
            )
        })
    });
    Ok(ConvGradients {
        grad_input: with_data(input, &grad_input),
        grad_weight,
        grad_bias,
    })
}

/// Largest relative error between two sets of SCC gradients.
pub fn scc_gradient_error(analytic: &SccGradients, numeric: &SccGradients) -> f64 {
    let mut err = max_rel(analytic.grad_input.data(), numeric.grad_input.data())
        .max(max_rel(&analytic.grad_weight, &numeric.grad_weight));
    if let (Some(a), Some(n)) = (&analytic.grad_bias, &numeric.grad_bias) {
        err = err.max(max_rel(a, n));
    }
    err
}

pub fn conv_gradient_error(analytic: &ConvGradients, numeric: &ConvGradients) -> f64 {
    let mut err = max_rel(analytic.grad_input.data(), numeric.grad_input.data())
        .max(max_rel(&analytic.grad_weight, &numeric.grad_weight));
    if let (Some(a), Some(n)) = (&analytic.grad_bias, &numeric.grad_bias) {
        err = err.max(max_rel(a, n));
    }
    err
}

/// Largest elementwise gap between two gradient sets.
pub fn scc_gradient_gap(a: &SccGradients, b: &SccGradients) -> Result<f64> {
    let mut gap = a
        .grad_input
        .max_abs_diff(&b.grad_input)?
        .max(max_abs(&a.grad_weight, &b.grad_weight));
    if let (Some(p), Some(q)) = (&a.grad_bias, &b.grad_bias) {
        gap = gap.max(max_abs(p, q));
    }
    Ok(gap)
}

/// Residual of the input-side and weight-side adjoint identities; the
/// larger of the two is returned.
pub fn adjoint_residual(
    pairing: f64,
    input: &[f64],
    grad_input: &[f64],
    weight: &[f64],
    grad_weight: &[f64],
    bias: Option<(&[f64], &[f64])>,
) -> f64 {
    let bias_term = bias.map_or(0.0, |(b, gb)| dot(b, gb));
    let via_input = dot(input, grad_input) + bias_term;
    let via_weight = dot(weight, grad_weight) + bias_term;
    (pairing - via_input)
        .abs()
        .max((pairing - via_weight).abs())
}

pub fn scc_adjoint_residual(
    cotangent: &Tensor4,
    input: &Tensor4,
    wts: &SccWeights,
    cfg: &SccConfig,
    grads: &SccGradients,
) -> Result<f64> {
    let pairing = cotangent.dot(&scc_forward(input, wts, cfg)?)?;
    Ok(adjoint_residual(
        pairing,
        input.data(),
        grads.grad_input.data(),
        wts.weight(),
        &grads.grad_weight,
        wts.bias().zip(grads.grad_bias.as_deref()),
    ))
}

pub fn conv_adjoint_residual(
    cotangent: &Tensor4,
    input: &Tensor4,
    wts: &ConvWeights,
    spec: &ConvSpec,
    grads: &ConvGradients,
) -> Result<f64> {
    let pairing = cotangent.dot(&grouped_conv_forward(input, wts, spec)?)?;
    Ok(adjoint_residual(
        pairing,
        input.data(),
        grads.grad_input.data(),
        &wts.weight,
        &grads.grad_weight,
        wts.bias.as_deref().zip(grads.grad_bias.as_deref()),
    ))
}

/// Upper bounds for randomly drawn trial shapes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CaseLimits {
    pub max_c_in: usize,
    pub max_c_out: usize,
    pub max_spatial: usize,
    pub max_batch: usize,
}

impl Default for CaseLimits {
    fn default() -> Self {
        Self {
            max_c_in: 12,
            max_c_out: 12,
            max_spatial: 5,
            max_batch: 3,
        }
    }
}

/// A fully specified SCC trial shape.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SccCase {
    pub cfg: SccConfig,
    pub spatial: usize,
    pub batch: usize,
}

impl SccCase {
    pub fn label(&self) -> String {
        format!(
            "{};bias={};hw={};n={}",
            self.cfg,
            self.cfg.has_bias(),
            self.spatial,
            self.batch
        )
    }
}

fn divisors(n: usize) -> Vec<usize> {
    (1..=n).filter(|d| n % d == 0).collect()
}

pub fn random_scc_case<R: Rng + ?Sized>(rng: &mut R, limits: &CaseLimits) -> SccCase {
    let c_in = rng.random_range(1..=limits.max_c_in.max(1));
    let cg = *divisors(c_in).choose(rng).unwrap();
    let gw = c_in / cg;
    let overlap = rng.random_range(0..=gw);
    let c_out = rng.random_range(1..=limits.max_c_out.max(1));
    let has_bias = rng.random_bool(0.75);
    let cfg = SccConfig::new(c_in, c_out, cg, Overlap::Channels(overlap), has_bias)
        .expect("drawn parameters satisfy the config rules");
    SccCase {
        cfg,
        spatial: rng.random_range(1..=limits.max_spatial.max(1)),
        batch: rng.random_range(1..=limits.max_batch.max(1)),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvCase {
    pub spec: ConvSpec,
    pub has_bias: bool,
    pub spatial: usize,
    pub batch: usize,
}

impl ConvCase {
    pub fn label(&self) -> String {
        let s = &self.spec;
        format!(
            "cin={};cout={};k={};stride={};pad={};groups={};hw={};n={}",
            s.c_in, s.c_out, s.kernel, s.stride, s.padding, s.groups, self.spatial, self.batch
        )
    }
}

/// Grouped conv with kernel 1 or 3 and groups 1, 2 or `c_in`.
pub fn random_conv_case<R: Rng + ?Sized>(rng: &mut R, limits: &CaseLimits) -> ConvCase {
    let c_in = rng.random_range(1..=limits.max_c_in.max(1));
    let mut group_choices = vec![1, c_in];
    if c_in % 2 == 0 {
        group_choices.push(2);
    }
    let groups = *group_choices.choose(rng).unwrap();
    let per_group = rng.random_range(1..=(limits.max_c_out / groups).max(1));
    let kernel = *[1, 3].choose(rng).unwrap();
    let stride = rng.random_range(1..=2);
    let spec = ConvSpec::new(c_in, groups * per_group, kernel, stride, kernel / 2, groups)
        .expect("drawn parameters form a valid convolution");
    ConvCase {
        spec,
        has_bias: rng.random_bool(0.75),
        spatial: rng.random_range(1..=limits.max_spatial.max(1)),
        batch: rng.random_range(1..=limits.max_batch.max(1)),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckOptions {
    pub trials: usize,
    pub eps: f64,
    pub tol: f64,
    pub seed: u64,
    pub limits: CaseLimits,
    /// Check this SCC configuration in every trial instead of drawing one.
    pub fixed: Option<SccCase>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            trials: 20,
            eps: 1e-5,
            tol: 1e-4,
            seed: 0,
            limits: CaseLimits::default(),
            fixed: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialReport {
    pub trial: usize,
    pub config: String,
    pub conv_config: String,
    /// Largest gap between the direct kernel and the composition oracles,
    /// forward and backward.
    pub max_abs_diff: f64,
    /// Largest finite-difference error over the SCC and conv gradients.
    pub max_rel_grad_err: f64,
    pub adjoint_residual: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub tol: f64,
    pub trials: Vec<TrialReport>,
}

impl GradCheckReport {
    pub fn all_passed(&self) -> bool {
        self.trials.iter().all(|t| t.passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = &TrialReport> {
        self.trials.iter().filter(|t| !t.passed)
    }

    pub fn write_csv<W: std::io::Write>(&self, mut out: W) -> std::io::Result<()> {
        writeln!(
            out,
            "trial,config,max_abs_diff,max_rel_grad_err,adjoint_residual,status"
        )?;
        for t in &self.trials {
            writeln!(
                out,
                "{},{},{:.3e},{:.3e},{:.3e},{}",
                t.trial,
                t.config,
                t.max_abs_diff,
                t.max_rel_grad_err,
                t.adjoint_residual,
                if t.passed { "pass" } else { "FAIL" }
            )?;
        }
        Ok(())
    }
}

/// Runs the checks using [`scc_backward`] for the analytic SCC gradients.
pub fn grad_check_driver(opts: &GradCheckOptions) -> Result<GradCheckReport> {
    grad_check_with(opts, |_, g, x, w, c| scc_backward(g, x, w, c))
}

/// Runs the checks with a caller-supplied analytic SCC gradient, called as
/// `analytic(trial, grad_out, input, weights, cfg)`.
pub fn grad_check_with<F>(opts: &GradCheckOptions, analytic: F) -> Result<GradCheckReport>
where
    F: Fn(usize, &Tensor4, &Tensor4, &SccWeights, &SccConfig) -> Result<SccGradients>,
{
    if opts.eps.is_nan() || opts.eps <= 0.0 || opts.tol.is_nan() || opts.tol < 0.0 {
        return Err(Error::argument(format!(
            "eps must be positive and tol non-negative, got eps={}, tol={}",
            opts.eps, opts.tol
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut trials = Vec::with_capacity(opts.trials);
    for trial in 0..opts.trials {
        let case = opts
            .fixed
            .unwrap_or_else(|| random_scc_case(&mut rng, &opts.limits));
        let SccCase {
            cfg,
            spatial,
            batch,
        } = case;
        let x = Tensor4::random(batch, cfg.c_in(), spatial, spatial, &mut rng)?;
        let g = Tensor4::random(batch, cfg.c_out(), spatial, spatial, &mut rng)?;
        let wts = SccWeights::init(&cfg, &mut rng);

        let direct = scc_forward(&x, &wts, &cfg)?;
        let reference = scc_backward(&g, &x, &wts, &cfg)?;
        let mut max_abs_diff: f64 = 0.0;
        for cc in [false, true] {
            let (a, _) = scc_channel_stack_forward(&x, &wts, &cfg, cc)?;
            let (b, _) = scc_conv_stack_forward(&x, &wts, &cfg, cc)?;
            max_abs_diff = max_abs_diff
                .max(a.max_abs_diff(&direct)?)
                .max(b.max_abs_diff(&direct)?)
                .max(scc_gradient_gap(
                    &scc_channel_stack_backward(&g, &x, &wts, &cfg, cc)?,
                    &reference,
                )?)
                .max(scc_gradient_gap(
                    &scc_conv_stack_backward(&g, &x, &wts, &cfg, cc)?,
                    &reference,
                )?);
        }

        let grads = analytic(trial, &g, &x, &wts, &cfg)?;
        let numeric = numeric_scc_gradients(&g, &x, &wts, &cfg, opts.eps)?;
        let mut rel = scc_gradient_error(&grads, &numeric);
        let mut adjoint = scc_adjoint_residual(&g, &x, &wts, &cfg, &grads)?;

        let conv = random_conv_case(&mut rng, &opts.limits);
        let cx = Tensor4::random(
            conv.batch,
            conv.spec.c_in,
            conv.spatial,
            conv.spatial,
            &mut rng,
        )?;
        let cw = ConvWeights::init(&conv.spec, conv.has_bias, &mut rng);
        let out = grouped_conv_forward(&cx, &cw, &conv.spec)?;
        let [n, c, h, w] = out.shape();
        let cg = Tensor4::random(n, c, h, w, &mut rng)?;
        let conv_grads = grouped_conv_backward(&cg, &cx, &cw, &conv.spec)?;
        let conv_numeric = numeric_conv_gradients(&cg, &cx, &cw, &conv.spec, opts.eps)?;
        rel = rel.max(conv_gradient_error(&conv_grads, &conv_numeric));
        adjoint = adjoint.max(conv_adjoint_residual(
            &cg,
            &cx,
            &cw,
            &conv.spec,
            &conv_grads,
        )?);

        let passed = rel < opts.tol && max_abs_diff <= ORACLE_TOL && adjoint <= ADJOINT_TOL;
        trials.push(TrialReport {
            trial,
            config: case.label(),
            conv_config: conv.label(),
            max_abs_diff,
            max_rel_grad_err: rel,
            adjoint_residual: adjoint,
            passed,
        });
    }
    Ok(GradCheckReport {
        tol: opts.tol,
        trials,
    })
}
