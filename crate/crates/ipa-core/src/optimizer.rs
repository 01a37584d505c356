//! Exact solver for the joint variant/batch/replica decision.
//!
//! The objective rewards pipeline accuracy and penalizes held cores and batch
//! size; constraints bound the end-to-end latency (service plus worst-case
//! queueing delay per stage) and require each stage's replicas to sustain the
//! arrival rate. The solver enumerates per-stage options (variant x batch,
//! with the minimum replica count implied), prunes component-wise dominated
//! options, and runs depth-first branch-and-bound over stages ordered by
//! fewest options. Results are exact: the returned objective equals
//! exhaustive enumeration, and ties are broken deterministically by higher
//! accuracy, then lower total cores, then smaller total batch, then lowest
//! variant index per stage.
//!
//! Restricted variants of the solver fix the variant choice per stage
//! (policies without model switching) or fix the replica count per stage
//! (policies without scaling).

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use serde::Serialize;
use thiserror::Error;

use crate::accuracy::scaled_accuracies;
use crate::catalog::{Configuration, ModelVariant, Pipeline, StageConfig, POW2_BATCHES};

/// Slack applied to latency and throughput comparisons so float rounding
/// never flips a boundary decision.
pub const CONSTRAINT_SLACK: f64 = 1e-9;

/// Slack applied to branch-and-bound pruning; internal bound sums may differ
/// from canonical objective evaluation by a few ulps, never by more than this.
const BOUND_SLACK: f64 = 1e-9;

/// Objective weights: accuracy reward, core cost, and batch penalty.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ObjectiveWeights {
    pub accuracy_weight: f64,
    pub cost_weight: f64,
    pub batch_penalty: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        Self {
            accuracy_weight: 1.0,
            cost_weight: 0.02,
            batch_penalty: 0.001,
        }
    }
}

impl ObjectiveWeights {
    pub fn new(accuracy_weight: f64, cost_weight: f64, batch_penalty: f64) -> Self {
        Self {
            accuracy_weight,
            cost_weight,
            batch_penalty,
        }
    }

    fn validate(&self) -> Result<(), SolveError> {
        let ws = [self.accuracy_weight, self.cost_weight, self.batch_penalty];
        if ws.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return Err(SolveError::InvalidInput(
                "objective weights must be finite and non-negative".into(),
            ));
        }
        if ws.iter().all(|w| *w == 0.0) {
            return Err(SolveError::InvalidInput(
                "objective weights must not all be zero".into(),
            ));
        }
        Ok(())
    }
}

/// Everything a solve needs besides the restriction.
#[derive(Debug, Clone)]
pub struct SolveInput<'a> {
    pub pipeline: &'a Pipeline,
    pub weights: ObjectiveWeights,
    /// Arrival rate the configuration must sustain, in requests per second.
    pub arrival_rate: f64,
    /// End-to-end latency budget in seconds.
    pub sla: f64,
    /// Admissible batch sizes, ascending.
    pub batch_set: Vec<u32>,
    /// Per-stage replica ceiling.
    pub replica_cap: u32,
}

impl<'a> SolveInput<'a> {
    /// Input with default weights, the pipeline's own SLA, the power-of-two
    /// batch set, and a replica cap of 32.
    pub fn new(pipeline: &'a Pipeline, arrival_rate: f64) -> Self {
        Self {
            pipeline,
            weights: ObjectiveWeights::default(),
            arrival_rate,
            sla: pipeline.pipeline_sla,
            batch_set: POW2_BATCHES.to_vec(),
            replica_cap: 32,
        }
    }

    fn validate(&self) -> Result<(), SolveError> {
        self.weights.validate()?;
        if !(self.arrival_rate > 0.0) || !self.arrival_rate.is_finite() {
            return Err(SolveError::InvalidInput(format!(
                "arrival_rate must be positive, got {}",
                self.arrival_rate
            )));
        }
        if !(self.sla > 0.0) || !self.sla.is_finite() {
            return Err(SolveError::InvalidInput(format!(
                "sla must be positive, got {}",
                self.sla
            )));
        }
        if self.batch_set.is_empty() {
            return Err(SolveError::InvalidInput("batch_set must be non-empty".into()));
        }
        if self.batch_set.windows(2).any(|w| w[0] >= w[1]) || self.batch_set[0] < 1 {
            return Err(SolveError::InvalidInput(
                "batch_set must be strictly ascending positive integers".into(),
            ));
        }
        if self.replica_cap < 1 {
            return Err(SolveError::InvalidInput("replica_cap must be at least 1".into()));
        }
        if self.pipeline.stages.is_empty() {
            return Err(SolveError::InvalidInput("pipeline has no stages".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("invalid solve input: {0}")]
    InvalidInput(String),
    #[error("unknown stage '{0}' in restriction")]
    UnknownStage(String),
    #[error("unknown variant '{variant_id}' for stage '{stage_id}' in restriction")]
    UnknownVariant {
        stage_id: String,
        variant_id: String,
    },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("internal invariant failure: {0}")]
    Internal(String),
}

/// Why no configuration satisfies the constraints.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InfeasibleReason {
    /// Some stage cannot sustain the arrival rate within the replica cap.
    Throughput {
        stage_id: String,
        max_supportable_rps: f64,
    },
    /// Every stage can sustain the rate, but the cheapest-latency combination
    /// still exceeds the budget.
    Latency { min_total_latency_s: f64, sla_s: f64 },
}

impl std::fmt::Display for InfeasibleReason {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            InfeasibleReason::Throughput {
                stage_id,
                max_supportable_rps,
            } => write!(
                f,
                "stage '{stage_id}' supports at most {max_supportable_rps:.3} rps within the replica cap"
            ),
            InfeasibleReason::Latency {
                min_total_latency_s,
                sla_s,
            } => write!(
                f,
                "minimum achievable latency {min_total_latency_s:.6}s exceeds sla {sla_s:.6}s"
            ),
        }
    }
}

/// Feasible configuration with its objective, or the infeasibility reason.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "result", rename_all = "snake_case")]
pub enum SolveResult {
    Feasible {
        configuration: Configuration,
        objective: f64,
    },
    Infeasible { reason: InfeasibleReason },
}

impl SolveResult {
    pub fn configuration(&self) -> Option<&Configuration> {
        match self {
            SolveResult::Feasible { configuration, .. } => Some(configuration),
            SolveResult::Infeasible { .. } => None,
        }
    }

    pub fn objective(&self) -> Option<f64> {
        match self {
            SolveResult::Feasible { objective, .. } => Some(*objective),
            SolveResult::Infeasible { .. } => None,
        }
    }
}

/// Solve result plus search statistics.
#[derive(Debug, Clone)]
pub struct SolveOutcome {
    pub result: SolveResult,
    pub solve_time: Duration,
    pub nodes_explored: u64,
}

// ---------------------------------------------------------------------------
// Elementary quantities
// ---------------------------------------------------------------------------

/// Worst-case queueing delay before a batch fills: `(b - 1) / arrival_rate`.
pub fn queue_delay(batch: u32, arrival_rate: f64) -> f64 {
    f64::from(batch - 1) / arrival_rate
}

/// Service latency of the chosen variant plus the queueing delay.
pub fn stage_latency(variant: &ModelVariant, batch: u32, arrival_rate: f64) -> f64 {
    variant.latency.predict(batch) + queue_delay(batch, arrival_rate)
}

/// Fewest replicas whose combined throughput covers the arrival rate.
pub fn min_replicas(variant: &ModelVariant, batch: u32, arrival_rate: f64) -> u32 {
    let h = variant.latency.throughput(batch);
    let n = (arrival_rate / h).ceil();
    if n < 1.0 {
        1
    } else {
        n as u32
    }
}

fn canonical_objective(
    weights: &ObjectiveWeights,
    per_stage: impl Iterator<Item = (f64, u64, u32)>,
) -> f64 {
    let mut acc_sum = 0.0f64;
    let mut cores_sum = 0u64;
    let mut batch_sum = 0u64;
    for (acc, cores, batch) in per_stage {
        acc_sum += acc;
        cores_sum += cores;
        batch_sum += u64::from(batch);
    }
    weights.accuracy_weight * acc_sum
        - weights.cost_weight * (cores_sum as f64)
        - weights.batch_penalty * (batch_sum as f64)
}

/// Objective of a concrete configuration: accuracy reward minus core cost
/// minus batch penalty, using the configuration's actual replica counts.
pub fn objective_value(
    pipeline: &Pipeline,
    config: &Configuration,
    weights: &ObjectiveWeights,
) -> Result<f64, SolveError> {
    let mut terms = Vec::with_capacity(pipeline.stages.len());
    for stage in &pipeline.stages {
        let sc = config.stage(&stage.id).ok_or_else(|| {
            SolveError::Config(format!("configuration missing stage '{}'", stage.id))
        })?;
        let variant = stage.variant(&sc.variant_id).ok_or_else(|| {
            SolveError::Config(format!(
                "unknown variant '{}' in stage '{}'",
                sc.variant_id, stage.id
            ))
        })?;
        let acc = scaled_accuracies(stage)
            .get(&sc.variant_id)
            .expect("variant present in its own stage");
        let cores = u64::from(sc.replicas) * u64::from(variant.base_cores);
        terms.push((acc, cores, sc.batch));
    }
    Ok(canonical_objective(weights, terms.into_iter()))
}

/// Feasibility check result with every violated constraint named.
#[derive(Debug, Clone, PartialEq)]
pub struct Feasibility {
    pub ok: bool,
    pub violations: Vec<String>,
}

/// Re-checks a configuration against the latency and throughput constraints.
pub fn feasible(
    pipeline: &Pipeline,
    config: &Configuration,
    arrival_rate: f64,
    sla: f64,
) -> Feasibility {
    let mut violations = Vec::new();
    for v in crate::catalog::validate_configuration(pipeline, config) {
        violations.push(v.to_string());
    }
    if !violations.is_empty() {
        return Feasibility {
            ok: false,
            violations,
        };
    }
    let mut total_latency = 0.0f64;
    for stage in &pipeline.stages {
        let sc = config.stage(&stage.id).expect("validated above");
        let variant = stage.variant(&sc.variant_id).expect("validated above");
        let lat = stage_latency(variant, sc.batch, arrival_rate);
        total_latency += lat;
        let capacity = f64::from(sc.replicas) * variant.latency.throughput(sc.batch);
        if capacity < arrival_rate - CONSTRAINT_SLACK {
            violations.push(format!(
                "stage '{}': throughput {capacity:.6} rps below arrival rate {arrival_rate:.6} rps",
                stage.id
            ));
        }
    }
    if total_latency > sla + CONSTRAINT_SLACK {
        violations.push(format!(
            "total latency {total_latency:.6}s exceeds sla {sla:.6}s"
        ));
    }
    Feasibility {
        ok: violations.is_empty(),
        violations,
    }
}

// ---------------------------------------------------------------------------
// Branch-and-bound search
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
struct StageOption {
    variant_idx: usize,
    batch: u32,
    replicas: u32,
    latency: f64,
    accuracy: f64,
    cores: u64,
    contribution: f64,
}

enum Restriction<'a> {
    None,
    FixedVariants(&'a BTreeMap<String, String>),
    FixedReplicas(&'a BTreeMap<String, u32>),
}

/// Solves the unrestricted problem.
pub fn solve(input: &SolveInput) -> Result<SolveOutcome, SolveError> {
    solve_restricted(input, &Restriction::None)
}

/// Solves with the variant fixed per stage; only batch and replicas vary.
pub fn solve_fixed_variants(
    input: &SolveInput,
    fixed: &BTreeMap<String, String>,
) -> Result<SolveOutcome, SolveError> {
    for stage in &input.pipeline.stages {
        let variant_id = fixed
            .get(&stage.id)
            .ok_or_else(|| SolveError::UnknownStage(stage.id.clone()))?;
        if stage.variant(variant_id).is_none() {
            return Err(SolveError::UnknownVariant {
                stage_id: stage.id.clone(),
                variant_id: variant_id.clone(),
            });
        }
    }
    solve_restricted(input, &Restriction::FixedVariants(fixed))
}

/// Solves with the replica count fixed per stage; only variant and batch vary.
pub fn solve_fixed_replicas(
    input: &SolveInput,
    fixed_n: &BTreeMap<String, u32>,
) -> Result<SolveOutcome, SolveError> {
    for stage in &input.pipeline.stages {
        let n = fixed_n
            .get(&stage.id)
            .ok_or_else(|| SolveError::UnknownStage(stage.id.clone()))?;
        if *n < 1 {
            return Err(SolveError::InvalidInput(format!(
                "fixed replica count for stage '{}' must be at least 1",
                stage.id
            )));
        }
    }
    solve_restricted(input, &Restriction::FixedReplicas(fixed_n))
}

fn build_stage_options(
    input: &SolveInput,
    stage_idx: usize,
    restriction: &Restriction,
) -> Vec<StageOption> {
    let stage = &input.pipeline.stages[stage_idx];
    let scaled = scaled_accuracies(stage);
    let w = &input.weights;
    let mut options = Vec::new();
    for (variant_idx, variant) in stage.variants.iter().enumerate() {
        if let Restriction::FixedVariants(fixed) = restriction {
            if fixed.get(&stage.id) != Some(&variant.id) {
                continue;
            }
        }
        let acc = scaled.get(&variant.id).expect("scaled for own stage");
        for &batch in &input.batch_set {
            if batch > variant.max_batch {
                continue;
            }
            let latency = stage_latency(variant, batch, input.arrival_rate);
            let capacity_per_replica = variant.latency.throughput(batch);
            let replicas = match restriction {
                Restriction::FixedReplicas(fixed_n) => {
                    let n = fixed_n[&stage.id];
                    let capacity = f64::from(n) * capacity_per_replica;
                    if capacity < input.arrival_rate - CONSTRAINT_SLACK {
                        continue;
                    }
                    n
                }
                _ => {
                    let n = min_replicas(variant, batch, input.arrival_rate);
                    if n > input.replica_cap {
                        continue;
                    }
                    n
                }
            };
            let cores = u64::from(replicas) * u64::from(variant.base_cores);
            let contribution = w.accuracy_weight * acc
                - w.cost_weight * (cores as f64)
                - w.batch_penalty * f64::from(batch);
            options.push(StageOption {
                variant_idx,
                batch,
                replicas,
                latency,
                accuracy: acc,
                cores,
                contribution,
            });
        }
    }
    prune_dominated(options)
}

/// Removes options that another option weakly beats on every axis the
/// objective, the constraints, and the tie-break see (latency, accuracy,
/// cores, batch, variant index). Component-wise dominance keeps the search
/// exact down to the tie-break.
fn prune_dominated(options: Vec<StageOption>) -> Vec<StageOption> {
    let dominated = |x: &StageOption, y: &StageOption| -> bool {
        let weakly = y.latency <= x.latency
            && y.accuracy >= x.accuracy
            && y.cores <= x.cores
            && y.batch <= x.batch;
        let strictly = y.latency < x.latency
            || y.accuracy > x.accuracy
            || y.cores < x.cores
            || y.batch < x.batch
            || y.variant_idx < x.variant_idx;
        weakly && strictly
    };
    let keep: Vec<bool> = options
        .iter()
        .map(|x| !options.iter().any(|y| dominated(x, y)))
        .collect();
    options
        .into_iter()
        .zip(keep)
        .filter_map(|(o, k)| k.then_some(o))
        .collect()
}

/// Tie-break key: higher accuracy, then fewer cores, then smaller total
/// batch, then lexicographically lowest variant indices in stage order.
fn better_tie(
    a: (f64, u64, u64, &[usize]),
    b: (f64, u64, u64, &[usize]),
) -> bool {
    if a.0 != b.0 {
        return a.0 > b.0;
    }
    if a.1 != b.1 {
        return a.1 < b.1;
    }
    if a.2 != b.2 {
        return a.2 < b.2;
    }
    a.3 < b.3
}

fn max_supportable_rps(input: &SolveInput, stage_idx: usize, restriction: &Restriction) -> f64 {
    let stage = &input.pipeline.stages[stage_idx];
    let mut best = 0.0f64;
    for variant in &stage.variants {
        if let Restriction::FixedVariants(fixed) = restriction {
            if fixed.get(&stage.id) != Some(&variant.id) {
                continue;
            }
        }
        let n = match restriction {
            Restriction::FixedReplicas(fixed_n) => fixed_n[&stage.id],
            _ => input.replica_cap,
        };
        for &batch in &input.batch_set {
            if batch > variant.max_batch {
                continue;
            }
            let capacity = f64::from(n) * variant.latency.throughput(batch);
            if capacity > best {
                best = capacity;
            }
        }
    }
    best
}

fn solve_restricted(
    input: &SolveInput,
    restriction: &Restriction,
) -> Result<SolveOutcome, SolveError> {
    input.validate()?;
    let start = Instant::now();
    let pipeline = input.pipeline;
    let n_stages = pipeline.stages.len();

    let per_stage: Vec<Vec<StageOption>> = (0..n_stages)
        .map(|i| build_stage_options(input, i, restriction))
        .collect();

    // Tightest throughput bottleneck first, if any stage has no options.
    if per_stage.iter().any(|o| o.is_empty()) {
        let mut tightest: Option<(usize, f64)> = None;
        for (i, options) in per_stage.iter().enumerate() {
            if options.is_empty() {
                let cap = max_supportable_rps(input, i, restriction);
                if tightest.map_or(true, |(_, best)| cap < best) {
                    tightest = Some((i, cap));
                }
            }
        }
        let (idx, cap) = tightest.expect("some stage is empty");
        return Ok(SolveOutcome {
            result: SolveResult::Infeasible {
                reason: InfeasibleReason::Throughput {
                    stage_id: pipeline.stages[idx].id.clone(),
                    max_supportable_rps: cap,
                },
            },
            solve_time: start.elapsed(),
            nodes_explored: 0,
        });
    }

    // Latency infeasibility: even the per-stage minimum latencies overflow.
    let min_latency_total: f64 = per_stage
        .iter()
        .map(|options| {
            options
                .iter()
                .map(|o| o.latency)
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    if min_latency_total > input.sla + CONSTRAINT_SLACK {
        return Ok(SolveOutcome {
            result: SolveResult::Infeasible {
                reason: InfeasibleReason::Latency {
                    min_total_latency_s: min_latency_total,
                    sla_s: input.sla,
                },
            },
            solve_time: start.elapsed(),
            nodes_explored: 0,
        });
    }

    // Search stages with the fewest options first; iterate options by
    // contribution descending so the first leaf seeds a strong bound.
    let mut search_order: Vec<usize> = (0..n_stages).collect();
    search_order.sort_by_key(|&i| (per_stage[i].len(), i));
    let sorted_options: Vec<Vec<StageOption>> = search_order
        .iter()
        .map(|&i| {
            let mut opts = per_stage[i].clone();
            opts.sort_by(|a, b| {
                b.contribution
                    .partial_cmp(&a.contribution)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(
                        b.accuracy
                            .partial_cmp(&a.accuracy)
                            .unwrap_or(std::cmp::Ordering::Equal),
                    )
                    .then(a.cores.cmp(&b.cores))
                    .then(a.batch.cmp(&b.batch))
                    .then(a.variant_idx.cmp(&b.variant_idx))
            });
            opts
        })
        .collect();

    let suffix_max_contribution: Vec<f64> = {
        let mut suffix = vec![0.0f64; n_stages + 1];
        for d in (0..n_stages).rev() {
            let best = sorted_options[d]
                .iter()
                .map(|o| o.contribution)
                .fold(f64::NEG_INFINITY, f64::max);
            suffix[d] = suffix[d + 1] + best;
        }
        suffix
    };
    let suffix_min_latency: Vec<f64> = {
        let mut suffix = vec![0.0f64; n_stages + 1];
        for d in (0..n_stages).rev() {
            let min = sorted_options[d]
                .iter()
                .map(|o| o.latency)
                .fold(f64::INFINITY, f64::min);
            suffix[d] = suffix[d + 1] + min;
        }
        suffix
    };

    struct Search<'s> {
        sorted_options: &'s [Vec<StageOption>],
        search_order: &'s [usize],
        suffix_max_contribution: &'s [f64],
        suffix_min_latency: &'s [f64],
        weights: ObjectiveWeights,
        sla: f64,
        n_stages: usize,
        assignment: Vec<usize>,
        nodes: u64,
        best: Option<(f64, (f64, u64, u64, Vec<usize>), Vec<usize>)>,
    }

    impl Search<'_> {
        /// Canonical evaluation in original stage order, shared with
        /// `objective_value` via the same fold.
        fn evaluate_leaf(&mut self) {
            let mut by_stage: Vec<&StageOption> = vec![&self.sorted_options[0][0]; self.n_stages];
            for (depth, &stage_idx) in self.search_order.iter().enumerate() {
                by_stage[stage_idx] = &self.sorted_options[depth][self.assignment[depth]];
            }
            let mut latency = 0.0f64;
            for o in &by_stage {
                latency += o.latency;
            }
            if latency > self.sla + CONSTRAINT_SLACK {
                return;
            }
            let objective = canonical_objective(
                &self.weights,
                by_stage.iter().map(|o| (o.accuracy, o.cores, o.batch)),
            );
            let mut acc = 0.0f64;
            let mut cores = 0u64;
            let mut batch = 0u64;
            let mut idxs = Vec::with_capacity(self.n_stages);
            for o in &by_stage {
                acc += o.accuracy;
                cores += o.cores;
                batch += u64::from(o.batch);
                idxs.push(o.variant_idx);
            }
            let candidate_key = (acc, cores, batch, idxs);
            let replace = match &self.best {
                None => true,
                Some((best_obj, best_key, _)) => {
                    objective > *best_obj
                        || (objective == *best_obj
                            && better_tie(
                                (
                                    candidate_key.0,
                                    candidate_key.1,
                                    candidate_key.2,
                                    &candidate_key.3,
                                ),
                                (best_key.0, best_key.1, best_key.2, &best_key.3),
                            ))
                }
            };
            if replace {
                self.best = Some((objective, candidate_key, self.assignment.clone()));
            }
        }

        fn dfs(&mut self, depth: usize, partial_latency: f64, partial_contribution: f64) {
            if depth == self.n_stages {
                self.evaluate_leaf();
                return;
            }
            for (i, option) in self.sorted_options[depth].iter().enumerate() {
                self.nodes += 1;
                let bound = partial_contribution
                    + option.contribution
                    + self.suffix_max_contribution[depth + 1];
                if let Some((best_obj, _, _)) = &self.best {
                    // options are contribution-sorted: all later ones bound lower
                    if bound < *best_obj - BOUND_SLACK {
                        break;
                    }
                }
                let latency = partial_latency + option.latency;
                if latency + self.suffix_min_latency[depth + 1] > self.sla + CONSTRAINT_SLACK {
                    continue;
                }
                self.assignment[depth] = i;
                self.dfs(
                    depth + 1,
                    latency,
                    partial_contribution + option.contribution,
                );
            }
        }
    }

    let mut search = Search {
        sorted_options: &sorted_options,
        search_order: &search_order,
        suffix_max_contribution: &suffix_max_contribution,
        suffix_min_latency: &suffix_min_latency,
        weights: input.weights,
        sla: input.sla,
        n_stages,
        assignment: vec![0; n_stages],
        nodes: 0,
        best: None,
    };
    search.dfs(0, 0.0, 0.0);

    let Search {
        nodes,
        best,
        assignment: _,
        ..
    } = search;

    let result = match best {
        None => SolveResult::Infeasible {
            reason: InfeasibleReason::Latency {
                min_total_latency_s: min_latency_total,
                sla_s: input.sla,
            },
        },
        Some((objective, _, assignment)) => {
            let mut stage_configs: Vec<Option<StageConfig>> = vec![None; n_stages];
            for (depth, &stage_idx) in search_order.iter().enumerate() {
                let option = &sorted_options[depth][assignment[depth]];
                let stage = &pipeline.stages[stage_idx];
                stage_configs[stage_idx] = Some(StageConfig {
                    stage_id: stage.id.clone(),
                    variant_id: stage.variants[option.variant_idx].id.clone(),
                    batch: option.batch,
                    replicas: option.replicas,
                });
            }
            let configuration = Configuration {
                stages: stage_configs
                    .into_iter()
                    .map(|c| c.expect("every stage assigned"))
                    .collect(),
            };
            let check = feasible(pipeline, &configuration, input.arrival_rate, input.sla);
            if !check.ok {
                return Err(SolveError::Internal(format!(
                    "solver produced an infeasible configuration: {}",
                    check.violations.join("; ")
                )));
            }
            SolveResult::Feasible {
                configuration,
                objective,
            }
        }
    };

    Ok(SolveOutcome {
        result,
        solve_time: start.elapsed(),
        nodes_explored: nodes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::catalog::{LatencyModel, QualityScore, Stage};

    fn variant(id: &str, quality: f64, latency: LatencyModel, base_cores: u32) -> ModelVariant {
        ModelVariant {
            id: id.into(),
            quality: QualityScore {
                value: quality,
                higher_is_better: true,
                measure_name: "accuracy".into(),
            },
            latency,
            base_cores,
            memory_bytes: 0.0,
            max_batch: 64,
        }
    }

    /// Two-stage option-table pipeline: detection variants at 80/347 ms and
    /// classification variants at 73/136 ms batch-1 latency, quadratic growth
    /// toward the profiled batch-8 values.
    fn option_table_pipeline() -> Pipeline {
        let quad = |l1: f64, q: f64, l: f64| LatencyModel::new(q, l, l1 - q - l);
        Pipeline {
            id: "two-stage-options".into(),
            stages: vec![
                Stage {
                    id: "detect".into(),
                    variants: vec![
                        variant("yolov5n", 45.7, quad(0.080, 0.00048828125, 0.052734375), 1),
                        variant("yolov5m", 64.1, quad(0.347, 0.001953125, 0.169921875), 2),
                    ],
                    stage_sla: 0.4,
                    threshold_rps: 4.0,
                },
                Stage {
                    id: "classify".into(),
                    variants: vec![
                        variant("resnet18", 69.75, quad(0.073, 0.00048828125, 0.0400390625), 1),
                        variant("resnet50", 76.13, quad(0.136, 0.0009765625, 0.0908203125), 1),
                    ],
                    stage_sla: 0.2,
                    threshold_rps: 4.0,
                },
            ],
            pipeline_sla: 0.6,
        }
    }

    fn config(pairs: &[(&str, &str, u32, u32)]) -> Configuration {
        Configuration {
            stages: pairs
                .iter()
                .map(|&(stage_id, variant_id, batch, replicas)| StageConfig {
                    stage_id: stage_id.into(),
                    variant_id: variant_id.into(),
                    batch,
                    replicas,
                })
                .collect(),
        }
    }

    #[test]
    fn queue_delay_examples() {
        assert_eq!(queue_delay(1, 7.3), 0.0);
        assert_eq!(queue_delay(8, 20.0), 0.35);
        assert_eq!(queue_delay(64, 4.0), 15.75);
    }

    #[test]
    fn stage_latency_adds_service_and_queueing() {
        let v = variant("v", 1.0, LatencyModel::new(0.0, 0.0, 0.08), 1);
        assert_eq!(stage_latency(&v, 1, 20.0), 0.08);
        let v8 = variant("v", 1.0, LatencyModel::new(0.0, 0.05, 0.0), 1);
        // l(8) = 0.4, queue = 0.35
        assert!((stage_latency(&v8, 8, 20.0) - 0.75).abs() < 1e-12);
        let constant = variant("v", 1.0, LatencyModel::new(0.0, 0.0, 0.05), 1);
        assert_eq!(stage_latency(&constant, 1, 3.0), 0.05);
    }

    #[test]
    fn min_replicas_examples() {
        let v_h20 = variant("v", 1.0, LatencyModel::new(0.0, 0.0, 0.05), 1);
        assert_eq!(min_replicas(&v_h20, 1, 10.0), 1);
        let v_h12_5 = variant("v", 1.0, LatencyModel::new(0.0, 0.0, 0.08), 1);
        assert_eq!(min_replicas(&v_h12_5, 1, 20.0), 2);
        // 347 ms batch-1 latency: h = 2.88 rps, 20/2.88 -> 7 replicas
        let v_347 = variant("v", 1.0, LatencyModel::new(0.0, 0.0, 0.347), 2);
        assert_eq!(min_replicas(&v_347, 1, 20.0), 7);
    }

    #[test]
    fn objective_value_substitution() {
        let p = {
            let mk = |id: &str| Stage {
                id: id.into(),
                variants: vec![
                    variant("a", 1.0, LatencyModel::new(0.0, 0.0, 0.05), 1),
                    variant("b", 2.0, LatencyModel::new(0.0, 0.0, 0.06), 2),
                    variant("c", 3.0, LatencyModel::new(0.0, 0.0, 0.07), 1),
                ],
                stage_sla: 1.0,
                threshold_rps: 1.0,
            };
            Pipeline {
                id: "p".into(),
                stages: vec![mk("s0"), mk("s1")],
                pipeline_sla: 2.0,
            }
        };
        // mid variant in both stages: accuracies {0.5, 0.5}, n*R = {2, 2}
        let c = config(&[("s0", "b", 1, 1), ("s1", "b", 1, 1)]);
        let w = ObjectiveWeights::new(1.0, 0.5, 0.1);
        assert_eq!(objective_value(&p, &c, &w).unwrap(), -1.2);

        // alpha = 0: objective reduces to -(cost + batch penalty)
        let w0 = ObjectiveWeights::new(0.0, 0.5, 0.1);
        assert_eq!(objective_value(&p, &c, &w0).unwrap(), -2.2);

        // beta = delta = 0: objective is alpha * pipeline accuracy
        let wa = ObjectiveWeights::new(2.0, 0.0, 0.0);
        assert_eq!(objective_value(&p, &c, &wa).unwrap(), 2.0);
    }

    #[test]
    fn option_table_latency_sums_are_exact() {
        let p = option_table_pipeline();
        let light = config(&[("detect", "yolov5n", 1, 2), ("classify", "resnet18", 1, 2)]);
        let heavy = config(&[("detect", "yolov5m", 1, 7), ("classify", "resnet50", 1, 3)]);
        let sum = |c: &Configuration| -> f64 {
            p.stages
                .iter()
                .map(|s| {
                    let sc = c.stage(&s.id).unwrap();
                    stage_latency(s.variant(&sc.variant_id).unwrap(), sc.batch, 20.0)
                })
                .sum()
        };
        assert_eq!(sum(&light), 0.153);
        assert_eq!(sum(&heavy), 0.483);
        assert!(feasible(&p, &light, 20.0, 0.6).ok);
        assert!(feasible(&p, &heavy, 20.0, 0.6).ok);
    }

    #[test]
    fn throughput_violation_is_named() {
        let p = option_table_pipeline();
        let starved = config(&[("detect", "yolov5m", 1, 1), ("classify", "resnet18", 1, 2)]);
        let check = feasible(&p, &starved, 20.0, 0.6);
        assert!(!check.ok);
        assert!(check
            .violations
            .iter()
            .any(|v| v.contains("detect") && v.contains("throughput")));
    }

    #[test]
    fn single_option_solve_picks_smallest_batch_single_replica() {
        let p = Pipeline {
            id: "single".into(),
            stages: vec![Stage {
                id: "s0".into(),
                variants: vec![variant("only", 1.0, LatencyModel::new(0.0, 0.0, 0.05), 1)],
                stage_sla: 0.2,
                threshold_rps: 10.0,
            }],
            pipeline_sla: 0.2,
        };
        let input = SolveInput {
            pipeline: &p,
            weights: ObjectiveWeights::new(1.0, 0.1, 0.01),
            arrival_rate: 10.0,
            sla: 0.2,
            batch_set: vec![1, 2, 4, 8],
            replica_cap: 8,
        };
        let outcome = solve(&input).unwrap();
        let config = outcome.result.configuration().unwrap();
        assert_eq!(config.stages[0].variant_id, "only");
        assert_eq!(config.stages[0].batch, 1);
        assert_eq!(config.stages[0].replicas, 1);
    }

    #[test]
    fn option_table_argmax_follows_weights() {
        let p = option_table_pipeline();
        let accuracy_first = SolveInput {
            pipeline: &p,
            weights: ObjectiveWeights::default(),
            arrival_rate: 20.0,
            sla: 0.6,
            batch_set: POW2_BATCHES.to_vec(),
            replica_cap: 32,
        };
        let outcome = solve(&accuracy_first).unwrap();
        let config = outcome.result.configuration().unwrap();
        assert_eq!(config.stages[0].variant_id, "yolov5m");
        assert_eq!(config.stages[1].variant_id, "resnet50");

        let cost_first = SolveInput {
            weights: ObjectiveWeights::new(1.0, 2.0, 0.01),
            ..accuracy_first.clone()
        };
        let outcome = solve(&cost_first).unwrap();
        let config = outcome.result.configuration().unwrap();
        assert_eq!(config.stages[0].variant_id, "yolov5n");
        assert_eq!(config.stages[1].variant_id, "resnet18");
    }

    #[test]
    fn impossible_rate_is_infeasible_with_throughput_reason() {
        let p = option_table_pipeline();
        let input = SolveInput {
            pipeline: &p,
            weights: ObjectiveWeights::default(),
            arrival_rate: 100000.0,
            sla: 0.6,
            batch_set: POW2_BATCHES.to_vec(),
            replica_cap: 4,
        };
        let outcome = solve(&input).unwrap();
        match outcome.result {
            SolveResult::Infeasible {
                reason: InfeasibleReason::Throughput { .. },
            } => {}
            other => panic!("expected throughput infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn tight_sla_is_infeasible_with_latency_reason() {
        let p = option_table_pipeline();
        let input = SolveInput {
            pipeline: &p,
            weights: ObjectiveWeights::default(),
            arrival_rate: 20.0,
            sla: 0.1,
            batch_set: POW2_BATCHES.to_vec(),
            replica_cap: 32,
        };
        let outcome = solve(&input).unwrap();
        match outcome.result {
            SolveResult::Infeasible {
                reason: InfeasibleReason::Latency { .. },
            } => {}
            other => panic!("expected latency infeasibility, got {other:?}"),
        }
    }

    #[test]
    fn fixed_variants_matches_or_trails_free_solve() {
        let p = option_table_pipeline();
        let input = SolveInput {
            pipeline: &p,
            weights: ObjectiveWeights::default(),
            arrival_rate: 20.0,
            sla: 0.6,
            batch_set: POW2_BATCHES.to_vec(),
            replica_cap: 32,
        };
        let free = solve(&input).unwrap();
        let free_obj = free.result.objective().unwrap();

        let lightest: BTreeMap<String, String> = [
            ("detect".to_string(), "yolov5n".to_string()),
            ("classify".to_string(), "resnet18".to_string()),
        ]
        .into();
        let restricted = solve_fixed_variants(&input, &lightest).unwrap();
        assert!(restricted.result.objective().unwrap() <= free_obj);

        // fixing to the free solve's own variants reproduces it
        let own: BTreeMap<String, String> = free
            .result
            .configuration()
            .unwrap()
            .stages
            .iter()
            .map(|s| (s.stage_id.clone(), s.variant_id.clone()))
            .collect();
        let same = solve_fixed_variants(&input, &own).unwrap();
        assert_eq!(
            same.result.configuration().unwrap(),
            free.result.configuration().unwrap()
        );
        assert_eq!(same.result.objective(), free.result.objective());
    }

    #[test]
    fn fixed_variants_infeasible_when_heavy_combo_blows_sla() {
        let p = option_table_pipeline();
        let input = SolveInput {
            pipeline: &p,
            weights: ObjectiveWeights::default(),
            arrival_rate: 20.0,
            sla: 0.4, // below the heavy combination's 0.483
            batch_set: POW2_BATCHES.to_vec(),
            replica_cap: 32,
        };
        let heavy: BTreeMap<String, String> = [
            ("detect".to_string(), "yolov5m".to_string()),
            ("classify".to_string(), "resnet50".to_string()),
        ]
        .into();
        let outcome = solve_fixed_variants(&input, &heavy).unwrap();
        assert!(matches!(outcome.result, SolveResult::Infeasible { .. }));
    }

    #[test]
    fn fixed_replicas_behaves_like_a_restriction() {
        let p = option_table_pipeline();
        let input = SolveInput {
            pipeline: &p,
            weights: ObjectiveWeights::default(),
            arrival_rate: 20.0,
            sla: 0.6,
            batch_set: POW2_BATCHES.to_vec(),
            replica_cap: 32,
        };
        // generous static replicas: the most accurate feasible combo wins
        let generous: BTreeMap<String, u32> =
            [("detect".to_string(), 8), ("classify".to_string(), 8)].into();
        let outcome = solve_fixed_replicas(&input, &generous).unwrap();
        let config = outcome.result.configuration().unwrap();
        assert_eq!(config.stages[0].variant_id, "yolov5m");
        assert_eq!(config.stages[0].replicas, 8);
        assert_eq!(config.stages[1].variant_id, "resnet50");

        // a single replica everywhere cannot sustain 20 rps on this table
        let one: BTreeMap<String, u32> =
            [("detect".to_string(), 1), ("classify".to_string(), 1)].into();
        let outcome = solve_fixed_replicas(&input, &one).unwrap();
        assert!(matches!(outcome.result, SolveResult::Infeasible { .. }));

        // fixing n to the free solve's own counts cannot beat the free solve
        let free = solve(&input).unwrap();
        let own: BTreeMap<String, u32> = free
            .result
            .configuration()
            .unwrap()
            .stages
            .iter()
            .map(|s| (s.stage_id.clone(), s.replicas))
            .collect();
        let fixed = solve_fixed_replicas(&input, &own).unwrap();
        assert!(fixed.result.objective().unwrap() <= free.result.objective().unwrap());
    }

    #[test]
    fn returned_replicas_are_minimal() {
        let p = option_table_pipeline();
        let input = SolveInput {
            pipeline: &p,
            weights: ObjectiveWeights::default(),
            arrival_rate: 20.0,
            sla: 0.6,
            batch_set: POW2_BATCHES.to_vec(),
            replica_cap: 32,
        };
        let outcome = solve(&input).unwrap();
        let config = outcome.result.configuration().unwrap();
        for sc in &config.stages {
            if sc.replicas > 1 {
                let stage = p.stage(&sc.stage_id).unwrap();
                let v = stage.variant(&sc.variant_id).unwrap();
                let capacity = f64::from(sc.replicas - 1) * v.latency.throughput(sc.batch);
                assert!(
                    capacity < 20.0 - CONSTRAINT_SLACK,
                    "stage {} replicas not minimal",
                    sc.stage_id
                );
            }
        }
    }

    #[test]
    fn solve_is_deterministic() {
        let p = option_table_pipeline();
        let input = SolveInput {
            pipeline: &p,
            weights: ObjectiveWeights::default(),
            arrival_rate: 20.0,
            sla: 0.6,
            batch_set: POW2_BATCHES.to_vec(),
            replica_cap: 32,
        };
        let a = solve(&input).unwrap();
        let b = solve(&input).unwrap();
        assert_eq!(a.result, b.result);
        assert_eq!(a.nodes_explored, b.nodes_explored);
    }

    #[test]
    fn all_zero_weights_are_rejected() {
        let p = option_table_pipeline();
        let input = SolveInput {
            pipeline: &p,
            weights: ObjectiveWeights::new(0.0, 0.0, 0.0),
            arrival_rate: 20.0,
            sla: 0.6,
            batch_set: POW2_BATCHES.to_vec(),
            replica_cap: 32,
        };
        assert!(matches!(solve(&input), Err(SolveError::InvalidInput(_))));
    }
}
