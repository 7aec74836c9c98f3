//! Shared workloads for the criterion benchmarks.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use scc_core::{Overlap, SccConfig, SccWeights, Tensor4};

/// Input, output cotangent and weights for one SCC configuration.
pub struct Workload {
    pub cfg: SccConfig,
    pub input: Tensor4,
    pub grad_output: Tensor4,
    pub weights: SccWeights,
}

impl Workload {
    pub fn new(
        c_in: usize,
        c_out: usize,
        cg: usize,
        overlap: f64,
        spatial: usize,
        batch: usize,
    ) -> Self {
        let cfg = SccConfig::new(c_in, c_out, cg, Overlap::Ratio(overlap), true)
            .expect("valid benchmark configuration");
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let input =
            Tensor4::random(batch, c_in, spatial, spatial, &mut rng).expect("non-empty extents");
        let grad_output =
            Tensor4::random(batch, c_out, spatial, spatial, &mut rng).expect("non-empty extents");
        let weights = SccWeights::init(&cfg, &mut rng);
        Self {
            cfg,
            input,
            grad_output,
            weights,
        }
    }

    pub fn label(&self) -> String {
        format!(
            "cin{}_cout{}_cg{}_ov{}",
            self.cfg.c_in(),
            self.cfg.c_out(),
            self.cfg.cg(),
            self.cfg.overlap_channels()
        )
    }
}

/// Configurations swept by the benchmarks, all at spatial 16 and batch 8.
pub fn standard_workloads() -> Vec<Workload> {
    [(2, 0.5), (4, 0.5), (8, 0.25), (2, 0.75)]
        .into_iter()
        .map(|(cg, overlap)| Workload::new(64, 64, cg, overlap, 16, 8))
        .collect()
}
