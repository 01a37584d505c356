//! Deterministic discrete-event simulation of the pipeline runtime.
//!
//! Each stage has one central queue. Requests join the queue of stage 1 as
//! they arrive; when a stage's queue reaches the configured batch size (or
//! the head request has waited `batch_max_wait`, when set), a batch is
//! dispatched to the next replica in cyclic round-robin order. A replica
//! serves one batch at a time: a batch assigned to a busy replica starts
//! when the replica frees and completes after the variant's batch latency.
//!
//! Dropping: on dequeue at stage `s`, a request whose elapsed time already
//! exceeds the summed budgets of stages before `s` is dropped, as is any
//! request observed past twice the pipeline budget. The first stage has no
//! upstream budget and is exempt from the first rule.
//!
//! Reconfigurations activate at their scheduled time plus `reconfig_latency`
//! (the initial configuration activates immediately). Queues persist across
//! a reconfiguration and in-flight batches finish under the old settings;
//! when the variant is unchanged, surviving replicas keep their backlog.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use thiserror::Error;

use crate::accuracy::pipeline_accuracy;
use crate::catalog::{validate_configuration, Configuration, LatencyModel, Pipeline};
use crate::predictor::LoadSeries;

/// How arrivals are placed within each trace second.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArrivalMode {
    /// The second's requests are evenly spaced across it.
    UniformSpaced,
    /// The second's requests land at seeded uniform-random offsets.
    Poisson { seed: u64 },
}

/// Simulation inputs: trace, arrival placement, batching timeout, and the
/// configuration schedule to replay.
#[derive(Debug, Clone)]
pub struct SimConfig {
    pub arrival_mode: ArrivalMode,
    /// Delay between a scheduled reconfiguration and its activation.
    pub reconfig_latency: f64,
    /// Dispatch a partial batch once the head request has waited this long.
    pub batch_max_wait: Option<f64>,
    pub trace: LoadSeries,
    /// `(time_s, configuration)` entries; strictly increasing, first at 0.
    pub schedule: Vec<(f64, Configuration)>,
}

impl SimConfig {
    pub fn new(trace: LoadSeries, initial: Configuration) -> Self {
        Self {
            arrival_mode: ArrivalMode::UniformSpaced,
            reconfig_latency: 0.0,
            batch_max_wait: None,
            trace,
            schedule: vec![(0.0, initial)],
        }
    }
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error("schedule must be non-empty with the first entry at t=0")]
    BadScheduleStart,
    #[error("schedule times must be strictly increasing (entry {index})")]
    NonIncreasingSchedule { index: usize },
    #[error("schedule entry {index} invalid: {message}")]
    InvalidScheduledConfig { index: usize, message: String },
    #[error("reconfig_latency must be non-negative and finite")]
    BadReconfigLatency,
    #[error("batch_max_wait must be positive and finite")]
    BadBatchMaxWait,
}

/// Per-second counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct SecondRow {
    pub t_s: u64,
    pub arrivals: u64,
    pub completions: u64,
    pub drops: u64,
    pub sla_violations: u64,
}

/// Per-stage observations over the run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StageStats {
    pub stage_id: String,
    /// Largest central-queue depth observed at event boundaries.
    pub max_queue_depth: usize,
    /// Longest wait of a batch's earliest request before dispatch.
    pub max_head_wait_s: f64,
    /// Cumulative dispatches per replica slot.
    pub dispatches_per_replica: Vec<u64>,
    pub drops: u64,
}

/// Simulation outcome: totals, percentiles, time-averaged cost and accuracy,
/// per-second series, and per-stage observations.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SimReport {
    pub arrivals: u64,
    pub completions: u64,
    pub drops: u64,
    pub in_flight: u64,
    pub sla_violations: u64,
    pub sla_attainment: f64,
    pub p50_s: f64,
    pub p99_s: f64,
    pub mean_cost_cores: f64,
    pub mean_accuracy_rank: f64,
    pub per_second: Vec<SecondRow>,
    pub per_stage: Vec<StageStats>,
    /// End-to-end latencies of completed requests, in completion order.
    #[serde(skip)]
    pub completed_latencies: Vec<f64>,
}

/// Fraction of arrivals completed within `sla`. Drops and residual requests
/// count as violations; zero arrivals counts as full attainment.
pub fn measure_sla_attainment(report: &SimReport, sla: f64) -> f64 {
    if report.arrivals == 0 {
        return 1.0;
    }
    let within = report
        .completed_latencies
        .iter()
        .filter(|&&l| l <= sla)
        .count() as f64;
    within / report.arrivals as f64
}

fn percentile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return 0.0;
    }
    let rank = (q * sorted.len() as f64).ceil() as usize;
    sorted[rank.clamp(1, sorted.len()) - 1]
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
enum EventKind {
    ConfigActivation { index: usize },
    Arrival { request: usize },
    BatchTimeout { stage: usize, head: usize },
    BatchComplete { stage: usize, batch: usize },
}

#[derive(Debug, Clone, Copy)]
struct Event {
    time: f64,
    seq: u64,
    kind: EventKind,
}

impl PartialEq for Event {
    fn eq(&self, other: &Self) -> bool {
        self.time == other.time && self.seq == other.seq
    }
}
impl Eq for Event {}
impl Ord for Event {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap: earlier time first, insertion order among equals
        other
            .time
            .partial_cmp(&self.time)
            .unwrap_or(Ordering::Equal)
            .then(other.seq.cmp(&self.seq))
    }
}
impl PartialOrd for Event {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum RequestStatus {
    InFlight,
    Completed { e2e: f64 },
    Dropped,
}

#[derive(Debug)]
struct RequestState {
    arrival: f64,
    /// Enqueue time at the stage currently holding the request.
    enqueued_at: f64,
    status: RequestStatus,
}

struct StageRuntime {
    queue: VecDeque<usize>,
    batch: u32,
    variant_idx: usize,
    latency: LatencyModel,
    /// Time each replica frees up.
    replicas: Vec<f64>,
    rr_cursor: usize,
    armed_timeout: Option<usize>,
    // observations
    max_queue_depth: usize,
    max_head_wait: f64,
    dispatches_per_replica: Vec<u64>,
    drops: u64,
}

struct Engine<'a> {
    pipeline: &'a Pipeline,
    sim: &'a SimConfig,
    cum_stage_sla: Vec<f64>,
    stages: Vec<StageRuntime>,
    requests: Vec<RequestState>,
    batches: Vec<Vec<usize>>,
    events: BinaryHeap<Event>,
    seq: u64,
    // accounting
    arrivals_by_second: Vec<u64>,
    completions_by_second: Vec<u64>,
    drops_by_second: Vec<u64>,
    violations_by_second: Vec<u64>,
    completed_latencies: Vec<f64>,
    completions: u64,
    drops: u64,
}

impl<'a> Engine<'a> {
    fn push_event(&mut self, time: f64, kind: EventKind) {
        self.seq += 1;
        self.events.push(Event {
            time,
            seq: self.seq,
            kind,
        });
    }

    fn second_slot(&mut self, time: f64) -> usize {
        let idx = (time.floor() as u64).saturating_sub(self.sim.trace.start_time) as usize;
        let needed = idx + 1;
        if self.arrivals_by_second.len() < needed {
            self.arrivals_by_second.resize(needed, 0);
            self.completions_by_second.resize(needed, 0);
            self.drops_by_second.resize(needed, 0);
            self.violations_by_second.resize(needed, 0);
        }
        idx
    }

    fn drop_request(&mut self, request: usize, stage: usize, time: f64) {
        self.requests[request].status = RequestStatus::Dropped;
        self.drops += 1;
        self.stages[stage].drops += 1;
        let slot = self.second_slot(time);
        self.drops_by_second[slot] += 1;
        self.violations_by_second[slot] += 1;
    }

    /// Drop rule check for a request observed at `time` in stage `stage`.
    fn should_drop(&self, request: usize, stage: usize, time: f64) -> bool {
        let elapsed = time - self.requests[request].arrival;
        if elapsed > 2.0 * self.pipeline.pipeline_sla {
            return true;
        }
        stage > 0 && elapsed > self.cum_stage_sla[stage - 1]
    }

    /// Drops every queued request the drop rules already condemn; their
    /// dequeue would drop them anyway and they must not count toward batch
    /// formation.
    fn prune_queue(&mut self, stage: usize, time: f64) {
        let ids: Vec<usize> = self.stages[stage].queue.iter().copied().collect();
        let mut survivors = VecDeque::with_capacity(ids.len());
        for id in ids {
            if self.should_drop(id, stage, time) {
                self.drop_request(id, stage, time);
            } else {
                survivors.push_back(id);
            }
        }
        self.stages[stage].queue = survivors;
    }

    /// Applies drop rules to the whole queue, then dispatches full batches,
    /// then arms the partial-batch timeout for the surviving head.
    fn try_dispatch(&mut self, stage: usize, time: f64) {
        self.prune_queue(stage, time);

        while self.stages[stage].queue.len() >= self.stages[stage].batch as usize {
            let size = self.stages[stage].batch as usize;
            self.dispatch_batch(stage, size, time);
        }

        // partial-batch timeout for the current head
        if let Some(wait) = self.sim.batch_max_wait {
            if let Some(&head) = self.stages[stage].queue.front() {
                if self.stages[stage].armed_timeout != Some(head) {
                    self.stages[stage].armed_timeout = Some(head);
                    let deadline = self.requests[head].enqueued_at + wait;
                    self.push_event(deadline.max(time), EventKind::BatchTimeout { stage, head });
                }
            } else {
                self.stages[stage].armed_timeout = None;
            }
        }

        let depth = self.stages[stage].queue.len();
        if depth > self.stages[stage].max_queue_depth {
            self.stages[stage].max_queue_depth = depth;
        }
    }

    fn dispatch_batch(&mut self, stage: usize, size: usize, time: f64) {
        let mut members = Vec::with_capacity(size);
        for _ in 0..size {
            let id = self.stages[stage].queue.pop_front().expect("size checked");
            members.push(id);
        }
        let head_wait = time - self.requests[members[0]].enqueued_at;
        let st = &mut self.stages[stage];
        if head_wait > st.max_head_wait {
            st.max_head_wait = head_wait;
        }
        let replica = st.rr_cursor % st.replicas.len();
        st.rr_cursor = (st.rr_cursor + 1) % st.replicas.len();
        st.dispatches_per_replica[replica] += 1;
        let start = st.replicas[replica].max(time);
        let complete_at = start + st.latency.predict(members.len() as u32);
        st.replicas[replica] = complete_at;

        self.batches.push(members);
        let batch = self.batches.len() - 1;
        self.push_event(complete_at, EventKind::BatchComplete { stage, batch });
    }

    fn activate_config(&mut self, index: usize, time: f64) {
        let config = &self.sim.schedule[index].1;
        for (i, stage) in self.pipeline.stages.iter().enumerate() {
            let sc = &config.stages[i];
            let variant_idx = stage
                .variants
                .iter()
                .position(|v| v.id == sc.variant_id)
                .expect("schedule validated");
            let st = &mut self.stages[i];
            st.batch = sc.batch;
            if variant_idx != st.variant_idx {
                st.variant_idx = variant_idx;
                st.latency = stage.variants[variant_idx].latency;
                st.replicas = vec![time; sc.replicas as usize];
            } else {
                let n = sc.replicas as usize;
                if n > st.replicas.len() {
                    st.replicas.resize(n, time);
                } else {
                    st.replicas.truncate(n);
                }
            }
            if st.dispatches_per_replica.len() < st.replicas.len() {
                st.dispatches_per_replica.resize(st.replicas.len(), 0);
            }
            st.rr_cursor = 0;
        }
        for i in 0..self.stages.len() {
            self.try_dispatch(i, time);
        }
    }

    fn complete_batch(&mut self, stage: usize, batch: usize, time: f64) {
        let members = std::mem::take(&mut self.batches[batch]);
        let last_stage = stage + 1 == self.pipeline.stages.len();
        for id in members {
            if last_stage {
                let e2e = time - self.requests[id].arrival;
                self.requests[id].status = RequestStatus::Completed { e2e };
                self.completions += 1;
                self.completed_latencies.push(e2e);
                let slot = self.second_slot(time);
                self.completions_by_second[slot] += 1;
                if e2e > self.pipeline.pipeline_sla {
                    self.violations_by_second[slot] += 1;
                }
            } else {
                // observed past twice the pipeline budget between stages
                if time - self.requests[id].arrival > 2.0 * self.pipeline.pipeline_sla {
                    self.drop_request(id, stage + 1, time);
                    continue;
                }
                self.requests[id].enqueued_at = time;
                self.stages[stage + 1].queue.push_back(id);
            }
        }
        if !last_stage {
            self.try_dispatch(stage + 1, time);
        }
    }
}

/// Replays a trace through the pipeline under the scheduled configurations.
pub fn simulate(pipeline: &Pipeline, sim: &SimConfig) -> Result<SimReport, SimError> {
    if sim.schedule.is_empty() || sim.schedule[0].0 != 0.0 {
        return Err(SimError::BadScheduleStart);
    }
    for (i, window) in sim.schedule.windows(2).enumerate() {
        if window[0].0 >= window[1].0 {
            return Err(SimError::NonIncreasingSchedule { index: i + 1 });
        }
    }
    if !sim.reconfig_latency.is_finite() || sim.reconfig_latency < 0.0 {
        return Err(SimError::BadReconfigLatency);
    }
    if let Some(w) = sim.batch_max_wait {
        if !(w > 0.0) || !w.is_finite() {
            return Err(SimError::BadBatchMaxWait);
        }
    }
    for (i, (_, config)) in sim.schedule.iter().enumerate() {
        let violations = validate_configuration(pipeline, config);
        if !violations.is_empty() {
            return Err(SimError::InvalidScheduledConfig {
                index: i,
                message: violations
                    .iter()
                    .map(|v| v.to_string())
                    .collect::<Vec<_>>()
                    .join("; "),
            });
        }
    }

    let cum_stage_sla: Vec<f64> = pipeline
        .stages
        .iter()
        .scan(0.0, |acc, s| {
            *acc += s.stage_sla;
            Some(*acc)
        })
        .collect();

    // arrival times from the trace
    let start = sim.trace.start_time;
    let mut arrival_times = Vec::new();
    match sim.arrival_mode {
        ArrivalMode::UniformSpaced => {
            for (i, &count) in sim.trace.counts.iter().enumerate() {
                let base = (start + i as u64) as f64;
                for j in 0..count {
                    arrival_times.push(base + j as f64 / count as f64);
                }
            }
        }
        ArrivalMode::Poisson { seed } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for (i, &count) in sim.trace.counts.iter().enumerate() {
                let base = (start + i as u64) as f64;
                let mut offsets: Vec<f64> =
                    (0..count).map(|_| rng.gen_range(0.0..1.0)).collect();
                offsets.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
                for off in offsets {
                    arrival_times.push(base + off);
                }
            }
        }
    }

    let initial = &sim.schedule[0].1;
    let stages: Vec<StageRuntime> = pipeline
        .stages
        .iter()
        .enumerate()
        .map(|(i, stage)| {
            let sc = &initial.stages[i];
            let variant_idx = stage
                .variants
                .iter()
                .position(|v| v.id == sc.variant_id)
                .expect("validated");
            StageRuntime {
                queue: VecDeque::new(),
                batch: sc.batch,
                variant_idx,
                latency: stage.variants[variant_idx].latency,
                replicas: vec![0.0; sc.replicas as usize],
                rr_cursor: 0,
                armed_timeout: None,
                max_queue_depth: 0,
                max_head_wait: 0.0,
                dispatches_per_replica: vec![0; sc.replicas as usize],
                drops: 0,
            }
        })
        .collect();

    let trace_len = sim.trace.counts.len();
    let mut engine = Engine {
        pipeline,
        sim,
        cum_stage_sla,
        stages,
        requests: Vec::with_capacity(arrival_times.len()),
        batches: Vec::new(),
        events: BinaryHeap::new(),
        seq: 0,
        arrivals_by_second: vec![0; trace_len],
        completions_by_second: vec![0; trace_len],
        drops_by_second: vec![0; trace_len],
        violations_by_second: vec![0; trace_len],
        completed_latencies: Vec::new(),
        completions: 0,
        drops: 0,
    };

    for (i, &t) in arrival_times.iter().enumerate() {
        engine.requests.push(RequestState {
            arrival: t,
            enqueued_at: t,
            status: RequestStatus::InFlight,
        });
        engine.push_event(t, EventKind::Arrival { request: i });
    }
    // the initial configuration is the deployment itself; later entries pay
    // the reconfiguration delay
    for (i, (t, _)) in sim.schedule.iter().enumerate().skip(1) {
        engine.push_event(t + sim.reconfig_latency, EventKind::ConfigActivation { index: i });
    }

    while let Some(event) = engine.events.pop() {
        match event.kind {
            EventKind::Arrival { request } => {
                let slot = engine.second_slot(event.time);
                engine.arrivals_by_second[slot] += 1;
                engine.requests[request].enqueued_at = event.time;
                engine.stages[0].queue.push_back(request);
                engine.try_dispatch(0, event.time);
            }
            EventKind::ConfigActivation { index } => {
                engine.activate_config(index, event.time);
            }
            EventKind::BatchTimeout { stage, head } => {
                // stale if the armed head already left the queue
                if engine.stages[stage].queue.front() == Some(&head) {
                    engine.stages[stage].armed_timeout = None;
                    // the head itself may be droppable by now
                    engine.prune_queue(stage, event.time);
                    if engine.stages[stage].queue.front() == Some(&head) {
                        let size = engine.stages[stage]
                            .queue
                            .len()
                            .min(engine.stages[stage].batch as usize);
                        engine.dispatch_batch(stage, size, event.time);
                    }
                    // re-arm for whatever head remains and refresh depth stats
                    engine.try_dispatch(stage, event.time);
                }
            }
            EventKind::BatchComplete { stage, batch } => {
                engine.complete_batch(stage, batch, event.time);
            }
        }
    }

    // time-averaged cost and accuracy over the trace window
    let trace_end = trace_len as f64;
    let mut activations: Vec<(f64, usize)> = vec![(0.0, 0)];
    for (i, (t, _)) in sim.schedule.iter().enumerate().skip(1) {
        activations.push((t + sim.reconfig_latency, i));
    }
    let mut mean_cost = 0.0;
    let mut mean_acc = 0.0;
    if trace_end > 0.0 {
        for (i, &(at, idx)) in activations.iter().enumerate() {
            let next = activations
                .get(i + 1)
                .map(|&(t, _)| t)
                .unwrap_or(trace_end)
                .min(trace_end);
            let span = (next - at.min(trace_end)).max(0.0);
            if span == 0.0 {
                continue;
            }
            let config = &sim.schedule[idx].1;
            let cost = config.total_cores(pipeline).expect("validated") as f64;
            let acc = pipeline_accuracy(pipeline, config).expect("validated");
            mean_cost += cost * span;
            mean_acc += acc * span;
        }
        mean_cost /= trace_end;
        mean_acc /= trace_end;
    }

    let arrivals_total = arrival_times.len() as u64;
    let mut sorted = engine.completed_latencies.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap_or(Ordering::Equal));
    let late = engine
        .completed_latencies
        .iter()
        .filter(|&&l| l > pipeline.pipeline_sla)
        .count() as u64;

    let per_second: Vec<SecondRow> = (0..engine.arrivals_by_second.len())
        .map(|i| SecondRow {
            t_s: start + i as u64,
            arrivals: engine.arrivals_by_second[i],
            completions: engine.completions_by_second[i],
            drops: engine.drops_by_second[i],
            sla_violations: engine.violations_by_second[i],
        })
        .collect();
    let per_stage: Vec<StageStats> = pipeline
        .stages
        .iter()
        .zip(&engine.stages)
        .map(|(stage, st)| StageStats {
            stage_id: stage.id.clone(),
            max_queue_depth: st.max_queue_depth,
            max_head_wait_s: st.max_head_wait,
            dispatches_per_replica: st.dispatches_per_replica.clone(),
            drops: st.drops,
        })
        .collect();

    let mut report = SimReport {
        arrivals: arrivals_total,
        completions: engine.completions,
        drops: engine.drops,
        in_flight: arrivals_total - engine.completions - engine.drops,
        sla_violations: late + engine.drops,
        sla_attainment: 0.0,
        p50_s: percentile(&sorted, 0.50),
        p99_s: percentile(&sorted, 0.99),
        mean_cost_cores: mean_cost,
        mean_accuracy_rank: mean_acc,
        per_second,
        per_stage,
        completed_latencies: engine.completed_latencies,
    };
    report.sla_attainment = measure_sla_attainment(&report, pipeline.pipeline_sla);
    Ok(report)
}
