//! Latency curve fitting, base resource allocation, and SLA derivation.
//!
//! Offline profiles record per-variant batch latency under specific core
//! allocations. A quadratic in the batch size is fitted per (variant, cores)
//! pair so latency at unmeasured batch sizes can be inferred. The base
//! allocation of a variant is the smallest profiled core count whose fitted
//! model can sustain the stage's threshold load at some admissible batch
//! while keeping the max-batch latency inside the stage budget.
//!
//! Stage budgets are five times the mean batch-1 latency across the stage's
//! variants; the pipeline budget is the sum of stage budgets. Budget and
//! base allocation reference each other, so [`derive_allocations_and_sla`]
//! resolves the pair by a short fixed-point iteration.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::catalog::{admissible_batches, LatencyModel, ModelVariant, Pipeline};

/// One profiling measurement for a (variant, cores, batch) combination.
#[derive(Debug, Clone, PartialEq)]
pub struct ProfileSample {
    pub variant_id: String,
    pub cores: u32,
    pub batch: u32,
    pub latency_s: f64,
    /// Measured throughput, informational. The solver and simulator use the
    /// fitted model's `b / l(b)` instead.
    pub throughput_rps: Option<f64>,
}

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("profile CSV row {row}: {message}")]
    Csv { row: usize, message: String },
    #[error("fit needs at least 3 distinct batch sizes, got {distinct}")]
    Underdetermined { distinct: usize },
    #[error("fitted model predicts non-positive latency {latency} at batch {batch}")]
    NonPositiveFit { batch: u32, latency: f64 },
    #[error("fit is singular: batch sizes are degenerate")]
    SingularFit,
    #[error("no profile samples provided")]
    EmptyProfiles,
    #[error("no variants provided")]
    EmptyVariants,
    #[error("sample has non-positive {field}: {value}")]
    InvalidSample { field: String, value: f64 },
}

/// Reads `variant_id,cores,batch,latency_s[,throughput_rps]` rows.
pub fn read_profiles_csv(path: &Path) -> Result<Vec<ProfileSample>, ProfileError> {
    let mut reader = csv::ReaderBuilder::new()
        .flexible(true)
        .from_path(path)
        .map_err(|e| ProfileError::Io {
            path: path.display().to_string(),
            source: std::io::Error::new(std::io::ErrorKind::Other, e.to_string()),
        })?;
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 2; // header is row 1
        let record = record.map_err(|e| ProfileError::Csv {
            row,
            message: e.to_string(),
        })?;
        if record.len() < 4 {
            return Err(ProfileError::Csv {
                row,
                message: format!("expected at least 4 fields, got {}", record.len()),
            });
        }
        let field = |idx: usize| record.get(idx).unwrap_or("").trim().to_string();
        let parse_u32 = |idx: usize, name: &str| {
            field(idx).parse::<u32>().map_err(|_| ProfileError::Csv {
                row,
                message: format!("{name} must be a positive integer, got '{}'", field(idx)),
            })
        };
        let parse_f64 = |idx: usize, name: &str| {
            field(idx).parse::<f64>().map_err(|_| ProfileError::Csv {
                row,
                message: format!("{name} must be a number, got '{}'", field(idx)),
            })
        };
        let sample = ProfileSample {
            variant_id: field(0),
            cores: parse_u32(1, "cores")?,
            batch: parse_u32(2, "batch")?,
            latency_s: parse_f64(3, "latency_s")?,
            throughput_rps: if record.len() > 4 && !field(4).is_empty() {
                Some(parse_f64(4, "throughput_rps")?)
            } else {
                None
            },
        };
        if sample.batch < 1 {
            return Err(ProfileError::Csv {
                row,
                message: "batch must be >= 1".into(),
            });
        }
        if !(sample.latency_s > 0.0) {
            return Err(ProfileError::Csv {
                row,
                message: format!("latency_s must be positive, got {}", sample.latency_s),
            });
        }
        out.push(sample);
    }
    Ok(out)
}

/// Least-squares quadratic fit of latency against batch size for one
/// (variant, cores) group of samples.
///
/// Requires at least 3 distinct batch sizes. Rejects fits that predict
/// non-positive latency at any sampled batch.
pub fn fit_latency(samples: &[ProfileSample]) -> Result<LatencyModel, ProfileError> {
    for s in samples {
        if !(s.latency_s > 0.0) {
            return Err(ProfileError::InvalidSample {
                field: "latency_s".into(),
                value: s.latency_s,
            });
        }
    }
    let mut distinct: Vec<u32> = samples.iter().map(|s| s.batch).collect();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 3 {
        return Err(ProfileError::Underdetermined {
            distinct: distinct.len(),
        });
    }

    // Normal equations for y = a*b^2 + b*b + c over the sample set.
    let mut m = [[0.0f64; 3]; 3];
    let mut rhs = [0.0f64; 3];
    for s in samples {
        let x = f64::from(s.batch);
        let basis = [x * x, x, 1.0];
        for i in 0..3 {
            for j in 0..3 {
                m[i][j] += basis[i] * basis[j];
            }
            rhs[i] += basis[i] * s.latency_s;
        }
    }
    let coeffs = solve_3x3(m, rhs).ok_or(ProfileError::SingularFit)?;
    let model = LatencyModel::new(coeffs[0], coeffs[1], coeffs[2]);

    for &b in &distinct {
        let predicted = model.predict(b);
        if !(predicted > 0.0) {
            return Err(ProfileError::NonPositiveFit {
                batch: b,
                latency: predicted,
            });
        }
    }
    Ok(model)
}

/// Gaussian elimination with partial pivoting on a 3x3 system.
fn solve_3x3(mut m: [[f64; 3]; 3], mut rhs: [f64; 3]) -> Option<[f64; 3]> {
    for col in 0..3 {
        let pivot = (col..3).max_by(|&a, &b| {
            m[a][col]
                .abs()
                .partial_cmp(&m[b][col].abs())
                .unwrap_or(std::cmp::Ordering::Equal)
        })?;
        if m[pivot][col].abs() < 1e-300 {
            return None;
        }
        m.swap(col, pivot);
        rhs.swap(col, pivot);
        for row in (col + 1)..3 {
            let factor = m[row][col] / m[col][col];
            for k in col..3 {
                m[row][k] -= factor * m[col][k];
            }
            rhs[row] -= factor * rhs[col];
        }
    }
    let mut x = [0.0f64; 3];
    for row in (0..3).rev() {
        let mut acc = rhs[row];
        for k in (row + 1)..3 {
            acc -= m[row][k] * x[k];
        }
        x[row] = acc / m[row][row];
    }
    Some(x)
}

/// Result of the base-allocation search: the minimum core count, or a marker
/// that no profiled core count satisfies the constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BaseAllocation {
    Cores(u32),
    Uncappable,
}

impl BaseAllocation {
    pub fn cores(&self) -> Option<u32> {
        match self {
            BaseAllocation::Cores(c) => Some(*c),
            BaseAllocation::Uncappable => None,
        }
    }
}

impl std::fmt::Display for BaseAllocation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            BaseAllocation::Cores(c) => write!(f, "{c}"),
            BaseAllocation::Uncappable => write!(f, "\u{2717}"),
        }
    }
}

/// Smallest profiled core count whose fitted latency model can sustain
/// `threshold_rps` at some admissible batch while keeping the max-batch
/// latency within `stage_sla`. Pass `stage_sla = None` to apply only the
/// throughput constraint (used by the first fixed-point round).
///
/// The search space is exactly the core counts present in `samples`.
pub fn base_allocation(
    samples: &[ProfileSample],
    threshold_rps: f64,
    stage_sla: Option<f64>,
    max_batch: u32,
) -> Result<BaseAllocation, ProfileError> {
    if samples.is_empty() {
        return Err(ProfileError::EmptyProfiles);
    }
    let mut by_cores: BTreeMap<u32, Vec<ProfileSample>> = BTreeMap::new();
    for s in samples {
        by_cores.entry(s.cores).or_default().push(s.clone());
    }
    for (&cores, group) in &by_cores {
        let model = fit_latency(group)?;
        let batches = admissible_batches(max_batch);
        let meets_threshold = batches
            .iter()
            .any(|&b| model.throughput(b) >= threshold_rps);
        let meets_sla = match stage_sla {
            Some(sla) => model.predict(max_batch) <= sla,
            None => true,
        };
        if meets_threshold && meets_sla {
            return Ok(BaseAllocation::Cores(cores));
        }
    }
    Ok(BaseAllocation::Uncappable)
}

/// Stage latency budget: five times the mean batch-1 latency of the stage's
/// variants at their base allocation.
pub fn derive_stage_sla(variants: &[ModelVariant]) -> Result<f64, ProfileError> {
    if variants.is_empty() {
        return Err(ProfileError::EmptyVariants);
    }
    let sum: f64 = variants.iter().map(|v| v.latency.predict(1)).sum();
    let mean = sum / variants.len() as f64;
    Ok(mean * 5.0)
}

/// Pipeline latency budget: sum of stage budgets.
pub fn derive_pipeline_sla(pipeline: &Pipeline) -> f64 {
    pipeline.stages.iter().map(|s| s.stage_sla).sum()
}

/// Resolves the budget/allocation circularity for one stage's variant set.
///
/// Round 0 computes each variant's allocation from the throughput constraint
/// alone, then derives the stage budget from the resulting batch-1 latencies.
/// Subsequent rounds re-run the search with the latency constraint included
/// and re-derive the budget, stopping when allocations stabilize or after
/// three rounds.
///
/// Returns per-variant allocations (in the order given) and the stage budget.
/// Variants that end uncappable are excluded from the budget mean.
pub fn derive_allocations_and_sla(
    per_variant_samples: &[(String, Vec<ProfileSample>)],
    threshold_rps: f64,
    max_batch: u32,
) -> Result<(Vec<(String, BaseAllocation)>, f64), ProfileError> {
    if per_variant_samples.is_empty() {
        return Err(ProfileError::EmptyProfiles);
    }

    let fit_at = |samples: &[ProfileSample], cores: u32| -> Result<LatencyModel, ProfileError> {
        let group: Vec<_> = samples.iter().filter(|s| s.cores == cores).cloned().collect();
        fit_latency(&group)
    };

    let sla_for = |allocs: &[(String, BaseAllocation)]| -> Result<Option<f64>, ProfileError> {
        let mut l1s = Vec::new();
        for (id, alloc) in allocs {
            if let BaseAllocation::Cores(c) = alloc {
                let samples = &per_variant_samples
                    .iter()
                    .find(|(vid, _)| vid == id)
                    .expect("allocation for unknown variant")
                    .1;
                l1s.push(fit_at(samples, *c)?.predict(1));
            }
        }
        if l1s.is_empty() {
            return Ok(None);
        }
        let mean = l1s.iter().sum::<f64>() / l1s.len() as f64;
        Ok(Some(mean * 5.0))
    };

    // Round 0: throughput constraint only.
    let mut allocs: Vec<(String, BaseAllocation)> = Vec::new();
    for (id, samples) in per_variant_samples {
        let alloc = base_allocation(samples, threshold_rps, None, max_batch)?;
        allocs.push((id.clone(), alloc));
    }
    let mut sla = sla_for(&allocs)?.unwrap_or(f64::INFINITY);

    for _ in 0..3 {
        let mut next: Vec<(String, BaseAllocation)> = Vec::new();
        for (id, samples) in per_variant_samples {
            let alloc = base_allocation(samples, threshold_rps, Some(sla), max_batch)?;
            next.push((id.clone(), alloc));
        }
        let next_sla = sla_for(&next)?.unwrap_or(f64::INFINITY);
        let stable = next == allocs;
        allocs = next;
        sla = next_sla;
        if stable {
            break;
        }
    }
    Ok((allocs, sla))
}
