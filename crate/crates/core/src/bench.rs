//! Wall-clock comparison of the direct kernel against the composition
//! oracles over a sweep of configurations.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::cycle::{Overlap, SccConfig};
use crate::error::{Error, Result};
use crate::gradcheck::{scc_gradient_gap, ORACLE_TOL};
use crate::kernel::{scc_backward, scc_forward, SccGradients, SccWeights};
use crate::reference::{
    scc_channel_stack_backward, scc_channel_stack_forward, scc_conv_stack_backward,
    scc_conv_stack_forward, CompositionStats,
};
use crate::tensor::Tensor4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Implementation {
    Direct,
    ChannelStack,
    ChannelStackCc,
    ConvStack,
    ConvStackCc,
}

impl Implementation {
    pub const ALL: [Implementation; 5] = [
        Implementation::Direct,
        Implementation::ChannelStack,
        Implementation::ChannelStackCc,
        Implementation::ConvStack,
        Implementation::ConvStackCc,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Implementation::Direct => "direct",
            Implementation::ChannelStack => "channel_stack",
            Implementation::ChannelStackCc => "channel_stack_cc",
            Implementation::ConvStack => "conv_stack",
            Implementation::ConvStackCc => "conv_stack_cc",
        }
    }

    pub fn forward(
        self,
        x: &Tensor4,
        w: &SccWeights,
        cfg: &SccConfig,
    ) -> Result<(Tensor4, CompositionStats)> {
        match self {
            Implementation::Direct => Ok((scc_forward(x, w, cfg)?, CompositionStats::default())),
            Implementation::ChannelStack => scc_channel_stack_forward(x, w, cfg, false),
            Implementation::ChannelStackCc => scc_channel_stack_forward(x, w, cfg, true),
            Implementation::ConvStack => scc_conv_stack_forward(x, w, cfg, false),
            Implementation::ConvStackCc => scc_conv_stack_forward(x, w, cfg, true),
        }
    }

    pub fn backward(
        self,
        g: &Tensor4,
        x: &Tensor4,
        w: &SccWeights,
        cfg: &SccConfig,
    ) -> Result<SccGradients> {
        match self {
            Implementation::Direct => scc_backward(g, x, w, cfg),
            Implementation::ChannelStack => scc_channel_stack_backward(g, x, w, cfg, false),
            Implementation::ChannelStackCc => scc_channel_stack_backward(g, x, w, cfg, true),
            Implementation::ConvStack => scc_conv_stack_backward(g, x, w, cfg, false),
            Implementation::ConvStackCc => scc_conv_stack_backward(g, x, w, cfg, true),
        }
    }
}

impl fmt::Display for Implementation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Phase {
    Forward,
    Backward,
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Phase::Forward => "forward",
            Phase::Backward => "backward",
        })
    }
}

/// Cartesian sweep over configuration axes. Overlaps are percentages of the
/// group width.
///
/// Parsed from `key=v1,v2;key=v3` with keys `cg`, `co`, `cin`, `cout`,
/// `spatial` and `batch`. Omitted keys keep their default single value.
#[derive(Debug, Clone, PartialEq)]
pub struct Sweep {
    pub cg: Vec<usize>,
    pub co_percent: Vec<f64>,
    pub c_in: Vec<usize>,
    pub c_out: Vec<usize>,
    pub spatial: Vec<usize>,
    pub batch: Vec<usize>,
}

impl Default for Sweep {
    fn default() -> Self {
        Self {
            cg: vec![2],
            co_percent: vec![50.0],
            c_in: vec![64],
            c_out: vec![64],
            spatial: vec![16],
            batch: vec![8],
        }
    }
}

fn parse_list<T: FromStr>(key: &str, values: &str) -> Result<Vec<T>> {
    let parsed = values
        .split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::argument(format!("invalid value {v:?} for sweep key {key}")))
        })
        .collect::<Result<Vec<T>>>()?;
    Ok(parsed)
}

impl FromStr for Sweep {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut sweep = Sweep::default();
        for part in s.split(';').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, values) = part.split_once('=').ok_or_else(|| {
                Error::argument(format!("sweep entry {part:?} is not key=values"))
            })?;
            let key = key.trim();
            match key {
                "cg" => sweep.cg = parse_list(key, values)?,
                "co" => sweep.co_percent = parse_list(key, &values.replace('%', ""))?,
                "cin" => sweep.c_in = parse_list(key, values)?,
                "cout" => sweep.c_out = parse_list(key, values)?,
                "spatial" => sweep.spatial = parse_list(key, values)?,
                "batch" => sweep.batch = parse_list(key, values)?,
                other => return Err(Error::argument(format!("unknown sweep key {other:?}"))),
            }
        }
        Ok(sweep)
    }
}

/// One point of a sweep.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BenchCase {
    pub cfg: SccConfig,
    pub co_percent: f64,
    pub spatial: usize,
    pub batch: usize,
}

impl Sweep {
    /// Expands the sweep; any point that is not a valid SCC configuration is
    /// an argument error.
    pub fn cases(&self) -> Result<Vec<BenchCase>> {
        let mut cases = Vec::new();
        for &c_in in &self.c_in {
            for &c_out in &self.c_out {
                for &cg in &self.cg {
                    for &co in &self.co_percent {
                        let cfg = SccConfig::new(c_in, c_out, cg, Overlap::Ratio(co / 100.0), true)
                            .map_err(|e| {
                                Error::argument(format!(
                                    "sweep point cin={c_in} cout={c_out} cg={cg} co={co}%: {e}"
                                ))
                            })?;
                        for &spatial in &self.spatial {
                            for &batch in &self.batch {
                                if spatial == 0 || batch == 0 {
                                    return Err(Error::argument("spatial and batch must be >= 1"));
                                }
                                cases.push(BenchCase {
                                    cfg,
                                    co_percent: co,
                                    spatial,
                                    batch,
                                });
                            }
                        }
                    }
                }
            }
        }
        Ok(cases)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub implementation: Implementation,
    pub phase: Phase,
    pub case: BenchCase,
    /// Mean over the timed repeats, in milliseconds.
    pub wall_ms: f64,
    pub aux_channels: usize,
}

fn mean_ms<F: FnMut() -> Result<()>>(repeats: usize, mut f: F) -> Result<f64> {
    f()?;
    let mut total = 0.0;
    for _ in 0..repeats {
        let start = Instant::now();
        f()?;
        total += start.elapsed().as_secs_f64() * 1e3;
    }
    Ok(total / repeats as f64)
}

/// Verifies every implementation against the direct kernel, then times each
/// (implementation, phase) pair.
pub fn bench_case(case: &BenchCase, repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if repeats == 0 {
        return Err(Error::argument("repeats must be >= 1"));
    }
    let cfg = &case.cfg;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = Tensor4::random(case.batch, cfg.c_in(), case.spatial, case.spatial, &mut rng)?;
    let g = Tensor4::random(
        case.batch,
        cfg.c_out(),
        case.spatial,
        case.spatial,
        &mut rng,
    )?;
    let w = SccWeights::init(cfg, &mut rng);

    let direct_out = scc_forward(&x, &w, cfg)?;
    let direct_grads = scc_backward(&g, &x, &w, cfg)?;
    let mut rows = Vec::with_capacity(2 * Implementation::ALL.len());
    for imp in Implementation::ALL {
        let (out, stats) = imp.forward(&x, &w, cfg)?;
        let diff = out.max_abs_diff(&direct_out)?.max(scc_gradient_gap(
            &imp.backward(&g, &x, &w, cfg)?,
            &direct_grads,
        )?);
        if diff.is_nan() || diff > ORACLE_TOL {
            return Err(Error::Mismatch {
                implementation: imp.name().to_owned(),
                diff,
            });
        }
        let forward = mean_ms(repeats, || imp.forward(&x, &w, cfg).map(drop))?;
        let backward = mean_ms(repeats, || imp.backward(&g, &x, &w, cfg).map(drop))?;
        for (phase, wall_ms) in [(Phase::Forward, forward), (Phase::Backward, backward)] {
            rows.push(BenchRow {
                implementation: imp,
                phase,
                case: *case,
                wall_ms,
                aux_channels: stats.aux_channels_stored,
            });
        }
    }
    Ok(rows)
}

pub fn bench(sweep: &Sweep, repeats: usize, seed: u64) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for case in sweep.cases()? {
        log::info!("benchmarking {}", case.cfg);
        rows.extend(bench_case(&case, repeats, seed)?);
    }
    Ok(rows)
}

pub const CSV_HEADER: &str =
    "implementation,phase,c_in,c_out,cg,co,spatial,batch,wall_ms,aux_channels";

pub fn write_csv<W: Write>(rows: &[BenchRow], mut out: W) -> std::io::Result<()> {
    writeln!(out, "{CSV_HEADER}")?;
    for r in rows {
        let c = &r.case;
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{:.4},{}",
            r.implementation,
            r.phase,
            c.cfg.c_in(),
            c.cfg.c_out(),
            c.cfg.cg(),
            c.co_percent,
            c.spatial,
            c.batch,
            r.wall_ms,
            r.aux_channels
        )?;
    }
    Ok(())
}
