//! Seeded synthetic pipelines and traces for benchmarks and property tests.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::catalog::{LatencyModel, ModelVariant, Pipeline, QualityScore, Stage};
use crate::predictor::LoadSeries;

/// Generates a random pipeline with `stages` stages of `variants` variants.
///
/// Variants grow in latency, cores, and quality together, loosely mirroring
/// model families. Stage budgets derive from batch-1 latencies, so generated
/// instances are usually (not always) feasible at moderate arrival rates.
pub fn random_pipeline(seed: u64, stages: usize, variants: usize) -> Pipeline {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out_stages = Vec::with_capacity(stages);
    for s in 0..stages {
        let mut out_variants = Vec::with_capacity(variants);
        let base_latency = rng.gen_range(0.01..0.08);
        for v in 0..variants {
            let scale = 1.0 + v as f64 * rng.gen_range(0.3..0.9);
            let l1 = base_latency * scale;
            let lin = l1 * rng.gen_range(0.2..0.8);
            let quad = lin * rng.gen_range(0.001..0.02);
            let konst = l1 - lin - quad;
            let base_cores = 1 + (v / 2) as u32 + rng.gen_range(0..2);
            out_variants.push(ModelVariant {
                id: format!("s{s}v{v}"),
                quality: QualityScore {
                    value: 40.0 + v as f64 * 8.0 + rng.gen_range(0.0..4.0),
                    higher_is_better: true,
                    measure_name: "accuracy".into(),
                },
                latency: LatencyModel::new(quad, lin, konst),
                base_cores,
                memory_bytes: 0.0,
                max_batch: 64,
            });
        }
        let stage_sla = crate::profiler::derive_stage_sla(&out_variants).expect("non-empty");
        out_stages.push(Stage {
            id: format!("s{s}"),
            variants: out_variants,
            stage_sla,
            threshold_rps: rng.gen_range(2.0..8.0),
        });
    }
    let pipeline_sla = out_stages.iter().map(|s| s.stage_sla).sum();
    Pipeline {
        id: format!("synthetic-{seed}"),
        stages: out_stages,
        pipeline_sla,
    }
}

/// Random per-second trace with counts in `[min_rps, max_rps]`.
pub fn random_trace(seed: u64, seconds: usize, min_rps: u64, max_rps: u64) -> LoadSeries {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    LoadSeries::new(
        0,
        (0..seconds)
            .map(|_| rng.gen_range(min_rps..=max_rps))
            .collect(),
    )
}
