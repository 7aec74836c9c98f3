//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use scc_core::bench::{bench_case, BenchCase, Implementation, Phase};
use scc_core::data::synth_dataset;
use scc_core::gradcheck::{
    grad_check_driver, random_scc_case, scc_gradient_gap, CaseLimits, GradCheckOptions,
};
use scc_core::model::{build_network, ModelSpecFile};
use scc_core::reference::{scc_as_group_pointwise, scc_as_pointwise};
use scc_core::train::{train, TrainConfig};
use scc_core::{
    grouped_conv_backward, grouped_conv_forward, layer_cost, reduction_ratio, scc_backward,
    scc_channel_stack_forward, scc_conv_stack_forward, scc_forward, CostReport, LayerKind,
    LayerSpec, Overlap, SccConfig, SccWeights, Tensor4,
};

const EQUIV_TOL: f64 = 1e-12;
const FD_STEP: f64 = 1e-5;
const FD_TOL: f64 = 1e-4;
const RATIO_TOL: f64 = 1e-15;
const TRAIN_ACCURACY: f64 = 0.95;

type Outcome = Result<String, String>;
type Criterion = (&'static str, Duration, fn() -> Outcome);

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max)
}

fn permute_channels(t: &Tensor4, source: impl Fn(usize) -> usize) -> Tensor4 {
    Tensor4::from_fn(t.n(), t.c(), t.h(), t.w(), |n, c, y, x| {
        t.get(n, source(c), y, x)
    })
    .unwrap()
}

fn random_tensors(rng: &mut ChaCha8Rng, cfg: &SccConfig) -> (Tensor4, Tensor4, SccWeights) {
    let (hw, n) = (rng.random_range(1..=6), rng.random_range(1..=3));
    let x = Tensor4::random(n, cfg.c_in(), hw, hw, rng).unwrap();
    let g = Tensor4::random(n, cfg.c_out(), hw, hw, rng).unwrap();
    let w = SccWeights::init(cfg, rng);
    (x, g, w)
}

/// cg=1 against dense pointwise and overlap=0 against group-pointwise, on
/// outputs and all three gradients.
fn degeneracy() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(101);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let c_in = rng.random_range(1..=16);
        let overlap = rng.random_range(0..=c_in);
        let cfg = SccConfig::new(
            c_in,
            rng.random_range(1..=16),
            1,
            Overlap::Channels(overlap),
            rng.random_bool(0.8),
        )
        .map_err(|e| e.to_string())?;
        let (x, g, w) = random_tensors(&mut rng, &cfg);
        let (spec, dense) = scc_as_pointwise(&w, &cfg).map_err(|e| e.to_string())?;
        let out = scc_forward(&x, &w, &cfg).unwrap();
        let grads = scc_backward(&g, &x, &w, &cfg).unwrap();
        let pw_out = grouped_conv_forward(&x, &dense, &spec).unwrap();
        let pw = grouped_conv_backward(&g, &x, &dense, &spec).unwrap();
        let cycle = cfg.channel_cycle();
        let mut gap = out
            .max_abs_diff(&pw_out)
            .unwrap()
            .max(grads.grad_input.max_abs_diff(&pw.grad_input).unwrap());
        for oc in 0..cfg.c_out() {
            let window = cycle.window_of(oc);
            for k in 0..c_in {
                let dense_idx = oc * c_in + window.channel(k, c_in);
                gap = gap.max((grads.grad_weight[oc * c_in + k] - pw.grad_weight[dense_idx]).abs());
            }
        }
        if let (Some(a), Some(b)) = (&grads.grad_bias, &pw.grad_bias) {
            gap = gap.max(max_abs(a, b));
        }
        ensure(gap <= EQUIV_TOL, || format!("cg=1 {cfg}: gap {gap:e}"))?;
        worst = worst.max(gap);
    }
    for _ in 0..50 {
        let c_in = [2, 4, 6, 8, 12, 16][rng.random_range(0..6)];
        let divisors: Vec<usize> = (1..=c_in).filter(|d| c_in % d == 0).collect();
        let cg = divisors[rng.random_range(0..divisors.len())];
        let c_out = cg * rng.random_range(1..=(16 / cg).max(1));
        let cfg = SccConfig::new(c_in, c_out, cg, Overlap::Channels(0), rng.random_bool(0.8))
            .map_err(|e| e.to_string())?;
        let (x, g, w) = random_tensors(&mut rng, &cfg);
        let (spec, gpw, order) = scc_as_group_pointwise(&w, &cfg).map_err(|e| e.to_string())?;
        let out = scc_forward(&x, &w, &cfg).unwrap();
        let grads = scc_backward(&g, &x, &w, &cfg).unwrap();
        let gpw_out = grouped_conv_forward(&x, &gpw, &spec).unwrap();
        let gpw_grads =
            grouped_conv_backward(&permute_channels(&g, |q| order[q]), &x, &gpw, &spec).unwrap();
        let gw = cfg.group_width();
        let mut gap = permute_channels(&out, |q| order[q])
            .max_abs_diff(&gpw_out)
            .unwrap()
            .max(
                grads
                    .grad_input
                    .max_abs_diff(&gpw_grads.grad_input)
                    .unwrap(),
            );
        for (q, &oc) in order.iter().enumerate() {
            gap = gap.max(max_abs(
                &grads.grad_weight[oc * gw..(oc + 1) * gw],
                &gpw_grads.grad_weight[q * gw..(q + 1) * gw],
            ));
            if let (Some(a), Some(b)) = (&grads.grad_bias, &gpw_grads.grad_bias) {
                gap = gap.max((a[oc] - b[q]).abs());
            }
        }
        ensure(gap <= EQUIV_TOL, || format!("overlap=0 {cfg}: gap {gap:e}"))?;
        worst = worst.max(gap);
    }
    Ok(format!("100 configs, max gap {worst:.2e}"))
}

fn oracle_triangle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let limits = CaseLimits {
        max_c_in: 16,
        max_c_out: 16,
        max_spatial: 8,
        max_batch: 4,
    };
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let case = random_scc_case(&mut rng, &limits);
        let cfg = case.cfg;
        let x =
            Tensor4::random(case.batch, cfg.c_in(), case.spatial, case.spatial, &mut rng).unwrap();
        let g = Tensor4::random(
            case.batch,
            cfg.c_out(),
            case.spatial,
            case.spatial,
            &mut rng,
        )
        .unwrap();
        let w = SccWeights::init(&cfg, &mut rng);
        let direct = scc_forward(&x, &w, &cfg).unwrap();
        let direct_grads = scc_backward(&g, &x, &w, &cfg).unwrap();
        for imp in &Implementation::ALL[1..] {
            let (out, _) = imp.forward(&x, &w, &cfg).unwrap();
            let grads = imp.backward(&g, &x, &w, &cfg).unwrap();
            let gap = out
                .max_abs_diff(&direct)
                .unwrap()
                .max(scc_gradient_gap(&grads, &direct_grads).unwrap());
            ensure(gap <= EQUIV_TOL, || {
                format!("{imp} on {}: gap {gap:e}", case.label())
            })?;
            worst = worst.max(gap);
        }
    }
    Ok(format!("50 configs x 4 compositions, max gap {worst:.2e}"))
}

fn gradients() -> Outcome {
    let opts = GradCheckOptions {
        trials: 25,
        eps: FD_STEP,
        tol: FD_TOL,
        seed: 303,
        ..Default::default()
    };
    let report = grad_check_driver(&opts).map_err(|e| e.to_string())?;
    let rel = report
        .trials
        .iter()
        .map(|t| t.max_rel_grad_err)
        .fold(0.0, f64::max);
    let adj = report
        .trials
        .iter()
        .map(|t| t.adjoint_residual)
        .fold(0.0, f64::max);
    if let Some(bad) = report.failures().next() {
        return Err(format!(
            "trial {} ({}) failed: {bad:?}",
            bad.trial, bad.config
        ));
    }
    Ok(format!(
        "{} SCC + {} grouped-conv trials, max rel err {rel:.2e}, max adjoint residual {adj:.2e}",
        report.trials.len(),
        report.trials.len()
    ))
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Every (c_in, cg, overlap, c_out) combination covered by the cycle-law
/// criterion.
fn cycle_configs() -> Vec<SccConfig> {
    let mut out = Vec::new();
    for c_in in [2, 4, 6, 8, 12, 16] {
        for cg in (1..=c_in).filter(|d| c_in % d == 0) {
            let gw = c_in / cg;
            for overlap in 0..=gw {
                for c_out in [c_in, 2 * c_in] {
                    out.push(
                        SccConfig::new(c_in, c_out, cg, Overlap::Channels(overlap), false).unwrap(),
                    );
                }
            }
        }
    }
    out
}

fn cycle_law() -> Outcome {
    let configs = cycle_configs();
    for cfg in &configs {
        let cycle = cfg.channel_cycle();
        let (c_in, c_out, shift) = (cfg.c_in(), cfg.c_out(), cfg.shift());
        let starts: Vec<usize> = (0..c_out).map(|oc| (oc * shift) % c_in).collect();
        let gw = cfg.group_width();
        let windows: Vec<Vec<usize>> = starts
            .iter()
            .map(|&s| (0..gw).map(|k| (s + k) % c_in).collect())
            .collect();
        let brute = (1..c_out)
            .find(|&d| windows[..d].contains(&windows[d]))
            .unwrap_or(c_out);
        ensure(cycle.cyclic_dist() == brute, || {
            format!(
                "{cfg}: cyclic_dist {} vs brute {brute}",
                cycle.cyclic_dist()
            )
        })?;
        if shift >= 1 {
            let closed = c_out.min(c_in / gcd(shift, c_in));
            ensure(cycle.cyclic_dist() == closed, || {
                format!(
                    "{cfg}: cyclic_dist {} vs closed form {closed}",
                    cycle.cyclic_dist()
                )
            })?;
        }
        for (oc, &start) in starts.iter().enumerate() {
            let w = cycle.window_of(oc);
            ensure(w.start == start && w.length == cfg.group_width(), || {
                format!("{cfg}: window_of({oc}) = {w:?}, expected start {start}")
            })?;
        }
    }
    let fig_a = SccConfig::new(4, 8, 2, Overlap::Ratio(0.5), false)
        .unwrap()
        .channel_cycle()
        .cyclic_dist();
    let fig_b = SccConfig::new(6, 12, 2, Overlap::Ratio(0.33), false)
        .unwrap()
        .channel_cycle()
        .cyclic_dist();
    ensure(fig_a == 4 && fig_b == 3, || {
        format!("reference instances gave {fig_a} and {fig_b}, expected 4 and 3")
    })?;
    Ok(format!(
        "{} configs; (4, cg=2, 50%) -> {fig_a}, (6, cg=2, 33%) -> {fig_b}",
        configs.len()
    ))
}

fn cost_formulas() -> Outcome {
    let mut sweep = 0;
    for c_in in [3, 16, 32, 64] {
        for c_out in [1, 8, 64, 100, 128, 1000] {
            for kernel in [1, 3, 5, 7] {
                for spatial in [7, 16, 32] {
                    let std = layer_cost(
                        &LayerSpec::new(LayerKind::Standard, c_in, c_out, spatial)
                            .with_kernel(kernel),
                    )
                    .unwrap();
                    let dsc = layer_cost(
                        &LayerSpec::new(LayerKind::DscBlock, c_in, c_out, spatial)
                            .with_kernel(kernel),
                    )
                    .unwrap();
                    let expected = 1.0 / c_out as f64 + 1.0 / (kernel * kernel) as f64;
                    let (macs, params) = reduction_ratio(&std, &dsc).unwrap();
                    ensure(
                        (macs - expected).abs() <= RATIO_TOL
                            && (params - expected).abs() <= RATIO_TOL,
                        || {
                            format!("c_in={c_in} c_out={c_out} W={kernel}: ratios {macs}, {params} vs {expected}")
                        },
                    )?;
                    sweep += 1;
                }
            }
        }
    }
    for (c_in, c_out) in [(16, 32), (64, 64), (48, 96)] {
        for cg in [1, 2, 4, 8, 16] {
            let gpw = layer_cost(
                &LayerSpec::new(LayerKind::GroupPointwise, c_in, c_out, 8).with_groups(cg),
            )
            .unwrap();
            for overlap in 0..=c_in / cg {
                let scc = LayerSpec::new(LayerKind::Scc, c_in, c_out, 8)
                    .with_groups(cg)
                    .with_overlap(Overlap::Channels(overlap));
                let scc = layer_cost(&scc).unwrap();
                ensure(scc == gpw, || {
                    format!("c_in={c_in} cg={cg} overlap={overlap}: SCC {scc:?} vs GPW {gpw:?}")
                })?;
            }
        }
    }
    let specs = [
        LayerSpec::new(LayerKind::Standard, 3, 8, 9),
        LayerSpec::new(LayerKind::Standard, 4, 6, 7)
            .with_kernel(5)
            .with_stride(2),
        LayerSpec::new(LayerKind::Depthwise, 8, 8, 10),
        LayerSpec::new(LayerKind::Depthwise, 6, 6, 9).with_stride(2),
        LayerSpec::new(LayerKind::Pointwise, 8, 12, 6),
        LayerSpec::new(LayerKind::GroupPointwise, 8, 12, 6).with_groups(4),
        LayerSpec::new(LayerKind::Scc, 8, 12, 6)
            .with_groups(2)
            .with_overlap(Overlap::Ratio(0.5)),
        LayerSpec::new(LayerKind::Scc, 12, 5, 4)
            .with_groups(3)
            .with_overlap(Overlap::Channels(1)),
        LayerSpec::new(LayerKind::Scc, 6, 9, 5)
            .with_overlap(Overlap::Channels(2))
            .with_bias(true),
        LayerSpec::new(LayerKind::DscBlock, 8, 16, 9)
            .with_groups(2)
            .with_overlap(Overlap::Ratio(0.5)),
        LayerSpec::new(LayerKind::DscBlock, 4, 8, 8)
            .with_kernel(5)
            .with_stride(2)
            .with_groups(4),
        LayerSpec::new(LayerKind::Standard, 5, 7, 6).with_bias(true),
    ];
    for spec in &specs {
        let counted = scc_core::cost::count_reference_multiplies(spec).unwrap();
        let CostReport { macs, .. } = layer_cost(spec).unwrap();
        ensure(counted == macs, || {
            format!("{spec:?}: counted {counted}, formula {macs}")
        })?;
    }
    Ok(format!(
        "{sweep} ratio points, SCC == GPW for every overlap, {} instrumented specs",
        specs.len()
    ))
}

fn cc_saving() -> Outcome {
    let configs = cycle_configs();
    let mut rng = ChaCha8Rng::seed_from_u64(606);
    for cfg in &configs {
        let x = Tensor4::random(1, cfg.c_in(), 2, 2, &mut rng).unwrap();
        let w = SccWeights::init(cfg, &mut rng);
        let (_, plain) = scc_conv_stack_forward(&x, &w, cfg, false).unwrap();
        let (_, cc) = scc_conv_stack_forward(&x, &w, cfg, true).unwrap();
        let (cd, gw) = (cfg.channel_cycle().cyclic_dist(), cfg.group_width());
        ensure(
            plain.aux_channels_stored == cfg.c_out() * gw && cc.aux_channels_stored == cd * gw,
            || {
                format!(
                    "{cfg}: stored {} / {} channels",
                    cc.aux_channels_stored, plain.aux_channels_stored
                )
            },
        )?;
        let ratio = cc.aux_channels_stored as f64 / plain.aux_channels_stored as f64;
        ensure(
            (ratio - cd as f64 / cfg.c_out() as f64).abs() < 1e-15,
            || format!("{cfg}: ratio {ratio}"),
        )?;
        let (_, stack_cc) = scc_channel_stack_forward(&x, &w, cfg, true).unwrap();
        ensure(stack_cc.aux_channels_stored == cd * gw, || {
            format!(
                "{cfg}: channel-stack CC stored {}",
                stack_cc.aux_channels_stored
            )
        })?;
    }
    Ok(format!("{} configs", configs.len()))
}

fn trainability() -> Outcome {
    let spec = ModelSpecFile::parse(include_str!("../../../specs/two_block_scc.json"))
        .map_err(|e| e.to_string())?;
    let input = spec.input.expect("spec declares its input");
    let data = synth_dataset(7, 512, 4, input.channels, input.spatial).unwrap();
    let cfg = TrainConfig {
        epochs: 30,
        batch_size: 16,
        learning_rate: 0.05,
        seed: 7,
    };
    let run = || {
        let mut net = build_network(&spec, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        train(&mut net, &data, &cfg).unwrap()
    };
    let history = run();
    let last = history.last().unwrap();
    ensure(last.accuracy >= TRAIN_ACCURACY, || {
        format!(
            "final accuracy {:.4} after {} epochs",
            last.accuracy, last.epoch
        )
    })?;
    ensure(run() == history, || {
        "second run with the same seed diverged".into()
    })?;
    Ok(format!(
        "accuracy {:.4}, loss {:.4} after {} epochs; rerun identical",
        last.accuracy, last.loss, last.epoch
    ))
}

fn efficiency() -> Outcome {
    let cfg = SccConfig::new(64, 64, 2, Overlap::Ratio(0.5), true).unwrap();
    let case = BenchCase {
        cfg,
        co_percent: 50.0,
        spatial: 16,
        batch: 8,
    };
    let rows = bench_case(&case, 5, 808).map_err(|e| e.to_string())?;
    let total = |imp: Implementation| -> f64 {
        rows.iter()
            .filter(|r| {
                r.implementation == imp && matches!(r.phase, Phase::Forward | Phase::Backward)
            })
            .map(|r| r.wall_ms)
            .sum()
    };
    let (direct, stack) = (
        total(Implementation::Direct),
        total(Implementation::ChannelStack),
    );
    let aux = rows
        .iter()
        .find(|r| r.implementation == Implementation::Direct)
        .unwrap()
        .aux_channels;
    ensure(aux == 0, || {
        format!("direct kernel reported {aux} auxiliary channels")
    })?;
    ensure(direct < stack, || {
        format!("direct {direct:.3} ms vs channel stack {stack:.3} ms")
    })?;
    Ok(format!(
        "direct {direct:.3} ms vs channel stack {stack:.3} ms fwd+bwd, aux 0"
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        (
            "degeneracy equivalence",
            Duration::from_secs(30),
            degeneracy,
        ),
        ("oracle triangle", Duration::from_secs(60), oracle_triangle),
        ("gradient correctness", Duration::from_secs(60), gradients),
        ("cycle law", Duration::from_secs(5), cycle_law),
        ("cost formulas", Duration::from_secs(10), cost_formulas),
        ("CC structural saving", Duration::from_secs(5), cc_saving),
        (
            "end-to-end trainability",
            Duration::from_secs(300),
            trainability,
        ),
        (
            "direct-kernel efficiency",
            Duration::from_secs(60),
            efficiency,
        ),
    ];
    let mut failed = 0;
    for (i, (name, budget, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = check();
        let elapsed = start.elapsed();
        let outcome = outcome.and_then(|detail| {
            if elapsed <= *budget {
                Ok(detail)
            } else {
                Err(format!("{detail}; took {elapsed:.2?}, budget {budget:?}"))
            }
        });
        match outcome {
            Ok(detail) => println!("PASS criterion {} {name}: {detail} [{elapsed:.2?}]", i + 1),
            Err(why) => {
                failed += 1;
                println!("FAIL criterion {} {name}: {why} [{elapsed:.2?}]", i + 1);
            }
        }
    }
    println!(
        "acceptance: {} passed, {failed} failed",
        criteria.len() - failed
    );
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
