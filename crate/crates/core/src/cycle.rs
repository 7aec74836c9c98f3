//! Sliding-channel configuration and the cyclic input-channel windows.
//!
//! Filter `oc` of a sliding-channel layer reads a window of `group_width`
//! consecutive input channels. Adjacent filters are offset by
//! `shift = group_width - overlap_channels`, and channel indices wrap modulo
//! `c_in`, so the window starts are `0, shift, 2*shift, ...` around the
//! channel ring. After `cyclic_dist` filters the sequence repeats, which lets
//! the kernels keep a table of `cyclic_dist` windows and look up filter `oc`
//! with `oc % cyclic_dist`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

/// Overlap between adjacent filters, either as a fraction of the window
/// width or as an explicit channel count.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Overlap {
    /// Fraction in `[0, 1]` of `group_width`, rounded to the nearest channel.
    Ratio(f64),
    Channels(usize),
}

impl Overlap {
    /// Overlap in whole channels for a window of `group_width`.
    pub fn resolve(self, group_width: usize) -> Result<usize> {
        match self {
            Overlap::Ratio(r) => {
                if !(0.0..=1.0).contains(&r) {
                    return Err(Error::config(format!(
                        "overlap ratio {r} must be within [0, 1]"
                    )));
                }
                // 0.33 * 3 must give one channel, so truncation is not an option.
                Ok((r * group_width as f64).round() as usize)
            }
            Overlap::Channels(ch) => {
                if ch > group_width {
                    return Err(Error::config(format!(
                        "overlap of {ch} channels exceeds group width {group_width}"
                    )));
                }
                Ok(ch)
            }
        }
    }
}

impl FromStr for Overlap {
    type Err = Error;

    /// `"50%"` is a ratio, `"0.5"` is a ratio, `"3"` is a channel count.
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let bad = || Error::argument(format!("cannot parse overlap {s:?}"));
        if let Some(pct) = s.strip_suffix('%') {
            let pct: f64 = pct.trim().parse().map_err(|_| bad())?;
            return Ok(Overlap::Ratio(pct / 100.0));
        }
        if let Ok(ch) = s.parse::<usize>() {
            return Ok(Overlap::Channels(ch));
        }
        let r: f64 = s.parse().map_err(|_| bad())?;
        Ok(Overlap::Ratio(r))
    }
}

impl fmt::Display for Overlap {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Overlap::Ratio(r) => write!(f, "{}%", r * 100.0),
            Overlap::Channels(ch) => write!(f, "{ch}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SccConfig {
    c_in: usize,
    c_out: usize,
    cg: usize,
    overlap_channels: usize,
    group_width: usize,
    shift: usize,
    has_bias: bool,
}

impl SccConfig {
    pub fn new(
        c_in: usize,
        c_out: usize,
        cg: usize,
        overlap: Overlap,
        has_bias: bool,
    ) -> Result<Self> {
        if c_in == 0 || c_out == 0 {
            return Err(Error::config(format!(
                "channel counts must be >= 1, got c_in={c_in}, c_out={c_out}"
            )));
        }
        if cg == 0 || cg > c_in {
            return Err(Error::config(format!(
                "channel groups {cg} must be within 1..={c_in}"
            )));
        }
        if c_in % cg != 0 {
            return Err(Error::config(format!(
                "c_in={c_in} is not divisible by cg={cg}"
            )));
        }
        let group_width = c_in / cg;
        let overlap_channels = overlap.resolve(group_width)?;
        let shift = group_width - overlap_channels;
        if shift == 0 && cg > 1 {
            log::warn!("full overlap with cg={cg}: every filter reads channels 0..{group_width}");
        }
        Ok(Self {
            c_in,
            c_out,
            cg,
            overlap_channels,
            group_width,
            shift,
            has_bias,
        })
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    pub fn c_out(&self) -> usize {
        self.c_out
    }

    pub fn cg(&self) -> usize {
        self.cg
    }

    pub fn overlap_channels(&self) -> usize {
        self.overlap_channels
    }

    pub fn group_width(&self) -> usize {
        self.group_width
    }

    /// Offset between the window starts of adjacent filters.
    pub fn shift(&self) -> usize {
        self.shift
    }

    pub fn has_bias(&self) -> bool {
        self.has_bias
    }

    pub fn weight_len(&self) -> usize {
        self.c_out * self.group_width
    }
}

impl fmt::Display for SccConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "cin={};cout={};cg={};overlap={}",
            self.c_in, self.c_out, self.cg, self.overlap_channels
        )
    }
}

/// `length` input channels starting at `start`, wrapping modulo `c_in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ChannelWindow {
    pub start: usize,
    pub length: usize,
}

impl ChannelWindow {
    /// Input channel bound to weight slot `k`.
    #[inline]
    pub fn channel(&self, k: usize, c_in: usize) -> usize {
        (self.start + k) % c_in
    }

    pub fn channels(&self, c_in: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.length).map(move |k| self.channel(k, c_in))
    }

    /// Weight slot that reads input channel `ic`, if the window covers it.
    #[inline]
    pub fn slot_of(&self, ic: usize, c_in: usize) -> Option<usize> {
        let slot = (ic + c_in - self.start % c_in) % c_in;
        (slot < self.length).then_some(slot)
    }

    pub fn contains(&self, ic: usize, c_in: usize) -> bool {
        self.slot_of(ic, c_in).is_some()
    }

    /// Last channel of the window.
    pub fn end(&self, c_in: usize) -> usize {
        self.channel(self.length - 1, c_in)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelCycle {
    windows: Vec<ChannelWindow>,
    c_in: usize,
}

impl ChannelCycle {
    pub fn windows(&self) -> &[ChannelWindow] {
        &self.windows
    }

    /// Number of filters after which the window sequence repeats.
    pub fn cyclic_dist(&self) -> usize {
        self.windows.len()
    }

    pub fn c_in(&self) -> usize {
        self.c_in
    }

    /// Window read by output channel `oc`.
    #[inline]
    pub fn window_of(&self, oc: usize) -> ChannelWindow {
        self.windows[oc % self.windows.len()]
    }
}

/// Walks the filters in order and records windows until one repeats or all
/// `c_out` filters have been visited.
pub fn compute_channel_cycle(cfg: &SccConfig) -> ChannelCycle {
    let c_in = cfg.c_in();
    let mut seen = vec![false; c_in];
    let mut windows = Vec::new();
    let mut start = 0;
    for _ in 0..cfg.c_out() {
        // The window length is fixed, so the start alone identifies it.
        if seen[start] {
            break;
        }
        seen[start] = true;
        windows.push(ChannelWindow {
            start,
            length: cfg.group_width(),
        });
        start = (start + cfg.shift()) % c_in;
    }
    ChannelCycle { windows, c_in }
}

impl SccConfig {
    pub fn channel_cycle(&self) -> ChannelCycle {
        compute_channel_cycle(self)
    }
}

/// Output channels whose window contains input channel `ic`, ascending.
pub fn covering_filters(cfg: &SccConfig, cycle: &ChannelCycle, ic: usize) -> Result<Vec<usize>> {
    if ic >= cfg.c_in() {
        return Err(Error::Index(format!(
            "input channel {ic} out of range for c_in={}",
            cfg.c_in()
        )));
    }
    Ok((0..cfg.c_out())
        .filter(|&oc| cycle.window_of(oc).contains(ic, cfg.c_in()))
        .collect())
}

/// For every input channel, the `(output channel, weight slot)` pairs that
/// read it, ordered by output channel. This is what an input-centric
/// backward pass iterates over.
#[derive(Debug, Clone)]
pub struct InputCoverage {
    by_input: Vec<Vec<(usize, usize)>>,
}

impl InputCoverage {
    pub fn new(cfg: &SccConfig, cycle: &ChannelCycle) -> Self {
        let c_in = cfg.c_in();
        let mut by_input = vec![Vec::new(); c_in];
        for oc in 0..cfg.c_out() {
            let window = cycle.window_of(oc);
            for k in 0..window.length {
                by_input[window.channel(k, c_in)].push((oc, k));
            }
        }
        Self { by_input }
    }

    pub fn readers(&self, ic: usize) -> &[(usize, usize)] {
        &self.by_input[ic]
    }
}
