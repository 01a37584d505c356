//! Pipeline/variant data model and catalog file handling.
//!
//! A catalog file describes one linear inference pipeline: an ordered list of
//! stages, each holding the candidate model variants for that stage's task.
//! Variants carry a raw quality score (task-native units, e.g. mAP or word
//! error rate), a quadratic latency model, and a base CPU-core allocation.
//!
//! Stage and pipeline latency budgets may be given explicitly or derived from
//! the variants' batch-1 latencies (see [`crate::profiler`]). Only linear
//! chains are representable: stages form an ordered list with one input and
//! one output.

use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Batch sizes profiled by default: powers of two from 1 to 64.
pub const POW2_BATCHES: [u32; 7] = [1, 2, 4, 8, 16, 32, 64];

/// Default cap on a variant's batch size.
pub const DEFAULT_MAX_BATCH: u32 = 64;

/// Powers of two up to `max_batch` (always at least `[1]`).
pub fn admissible_batches(max_batch: u32) -> Vec<u32> {
    POW2_BATCHES
        .iter()
        .copied()
        .filter(|&b| b <= max_batch.max(1))
        .collect()
}

/// Raw quality of a model variant in its task-native measure.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub value: f64,
    /// Direction of the measure: true for mAP/accuracy/F1, false for WER.
    pub higher_is_better: bool,
    pub measure_name: String,
}

impl QualityScore {
    /// Quality adjusted so that larger always means better.
    pub fn directed(&self) -> f64 {
        if self.higher_is_better {
            self.value
        } else {
            -self.value
        }
    }
}

/// Quadratic latency model `l(b) = quad_coeff * b^2 + lin_coeff * b + const_coeff`,
/// in seconds, fitted per variant at its base allocation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    /// Seconds per request squared.
    pub quad_coeff: f64,
    /// Seconds per request.
    pub lin_coeff: f64,
    /// Seconds.
    pub const_coeff: f64,
}

impl LatencyModel {
    pub fn new(quad_coeff: f64, lin_coeff: f64, const_coeff: f64) -> Self {
        Self {
            quad_coeff,
            lin_coeff,
            const_coeff,
        }
    }

    /// Predicted batch latency in seconds.
    pub fn predict(&self, batch: u32) -> f64 {
        let b = f64::from(batch);
        self.quad_coeff * b * b + self.lin_coeff * b + self.const_coeff
    }

    /// Per-replica throughput in requests per second: `b / l(b)`.
    pub fn throughput(&self, batch: u32) -> f64 {
        f64::from(batch) / self.predict(batch)
    }
}

/// A profiled model option for one stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelVariant {
    pub id: String,
    pub quality: QualityScore,
    pub latency: LatencyModel,
    /// Base CPU cores per replica.
    pub base_cores: u32,
    /// Informational memory requirement in bytes.
    #[serde(default)]
    pub memory_bytes: f64,
    pub max_batch: u32,
}

impl ModelVariant {
    /// Power-of-two batches admitted by this variant's `max_batch`.
    pub fn admissible_batches(&self) -> Vec<u32> {
        admissible_batches(self.max_batch)
    }
}

/// One task in the pipeline with its candidate variants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub id: String,
    pub variants: Vec<ModelVariant>,
    /// Stage latency budget in seconds.
    pub stage_sla: f64,
    /// Reference load used for base allocations.
    pub threshold_rps: f64,
}

impl Stage {
    pub fn variant(&self, id: &str) -> Option<&ModelVariant> {
        self.variants.iter().find(|v| v.id == id)
    }
}

/// A linear chain of stages with an end-to-end latency budget.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Pipeline {
    pub id: String,
    pub stages: Vec<Stage>,
    /// End-to-end latency budget in seconds.
    pub pipeline_sla: f64,
}

impl Pipeline {
    pub fn stage(&self, id: &str) -> Option<&Stage> {
        self.stages.iter().find(|s| s.id == id)
    }
}

/// Chosen variant, batch size, and replica count for one stage.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage_id: String,
    pub variant_id: String,
    pub batch: u32,
    pub replicas: u32,
}

/// A full per-stage deployment decision; the solver's output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Configuration {
    pub stages: Vec<StageConfig>,
}

impl Configuration {
    pub fn stage(&self, stage_id: &str) -> Option<&StageConfig> {
        self.stages.iter().find(|s| s.stage_id == stage_id)
    }

    /// Total cores held: sum over stages of replicas times the active
    /// variant's base cores. Errors if a referenced variant is unknown.
    pub fn total_cores(&self, pipeline: &Pipeline) -> Result<u64, CatalogError> {
        let mut total = 0u64;
        for sc in &self.stages {
            let stage = pipeline.stage(&sc.stage_id).ok_or_else(|| {
                CatalogError::UnknownStage {
                    stage_id: sc.stage_id.clone(),
                }
            })?;
            let variant = stage.variant(&sc.variant_id).ok_or_else(|| {
                CatalogError::UnknownVariant {
                    stage_id: sc.stage_id.clone(),
                    variant_id: sc.variant_id.clone(),
                }
            })?;
            total += u64::from(sc.replicas) * u64::from(variant.base_cores);
        }
        Ok(total)
    }
}

impl fmt::Display for Configuration {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mut first = true;
        for sc in &self.stages {
            if !first {
                write!(f, " ")?;
            }
            first = false;
            write!(
                f,
                "{}:{}:{}:{}",
                sc.stage_id, sc.variant_id, sc.batch, sc.replicas
            )?;
        }
        Ok(())
    }
}

/// One invariant violation, naming the offending field.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum CatalogError {
    #[error("failed to read {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse catalog: {0}")]
    Parse(String),
    #[error("catalog validation failed: {}", format_violations(.0))]
    Validation(Vec<Violation>),
    #[error("unknown stage '{stage_id}'")]
    UnknownStage { stage_id: String },
    #[error("unknown variant '{variant_id}' in stage '{stage_id}'")]
    UnknownVariant {
        stage_id: String,
        variant_id: String,
    },
    #[error("profile samples error: {0}")]
    Profile(String),
}

fn format_violations(violations: &[Violation]) -> String {
    violations
        .iter()
        .map(|v| v.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}

// ---------------------------------------------------------------------------
// Catalog file schema
// ---------------------------------------------------------------------------

/// Serialized form of a latency model: inline coefficients or a reference to
/// a profile-sample CSV to fit at load time.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum LatencySpec {
    Coeffs { a: f64, b: f64, c: f64 },
    SamplesRef { samples_ref: String },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct QualityFile {
    value: f64,
    measure: String,
    #[serde(default = "default_true")]
    higher_is_better: bool,
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct VariantFile {
    id: String,
    quality: QualityFile,
    latency: LatencySpec,
    base_cores: u32,
    #[serde(default)]
    memory_bytes: f64,
    #[serde(default = "default_max_batch")]
    max_batch: u32,
}

fn default_max_batch() -> u32 {
    DEFAULT_MAX_BATCH
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct StageFile {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    sla: Option<f64>,
    threshold_rps: f64,
    variants: Vec<VariantFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct PipelineFile {
    id: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    sla: Option<f64>,
    stages: Vec<StageFile>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CatalogFile {
    pipeline: PipelineFile,
}

// ---------------------------------------------------------------------------
// Loading
// ---------------------------------------------------------------------------

/// Loads and validates a pipeline from a catalog file.
///
/// Variants whose latency is given as `samples_ref` are fitted from the
/// referenced CSV (resolved relative to the catalog file) at the variant's
/// declared `base_cores`. Missing stage SLAs are derived as five times the
/// mean batch-1 latency of the stage's variants; a missing pipeline SLA is
/// the sum of stage SLAs.
pub fn load_pipeline(path: &Path) -> Result<Pipeline, CatalogError> {
    let text = std::fs::read_to_string(path).map_err(|source| CatalogError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: CatalogFile =
        toml::from_str(&text).map_err(|e| CatalogError::Parse(e.to_string()))?;
    let base_dir = path.parent().unwrap_or_else(|| Path::new("."));
    resolve_pipeline(file, base_dir)
}

fn resolve_pipeline(file: CatalogFile, base_dir: &Path) -> Result<Pipeline, CatalogError> {
    let mut stages = Vec::with_capacity(file.pipeline.stages.len());
    for sf in file.pipeline.stages {
        let mut variants = Vec::with_capacity(sf.variants.len());
        for vf in sf.variants {
            let latency = match vf.latency {
                LatencySpec::Coeffs { a, b, c } => LatencyModel::new(a, b, c),
                LatencySpec::SamplesRef { samples_ref } => {
                    let csv_path = base_dir.join(&samples_ref);
                    let samples = crate::profiler::read_profiles_csv(&csv_path)
                        .map_err(|e| CatalogError::Profile(e.to_string()))?;
                    let at_base: Vec<_> = samples
                        .into_iter()
                        .filter(|s| s.variant_id == vf.id && s.cores == vf.base_cores)
                        .collect();
                    if at_base.is_empty() {
                        return Err(CatalogError::Profile(format!(
                            "variant '{}': no samples at base_cores {} in {}",
                            vf.id, vf.base_cores, samples_ref
                        )));
                    }
                    crate::profiler::fit_latency(&at_base)
                        .map_err(|e| CatalogError::Profile(e.to_string()))?
                }
            };
            variants.push(ModelVariant {
                id: vf.id,
                quality: QualityScore {
                    value: vf.quality.value,
                    higher_is_better: vf.quality.higher_is_better,
                    measure_name: vf.quality.measure,
                },
                latency,
                base_cores: vf.base_cores,
                memory_bytes: vf.memory_bytes,
                max_batch: vf.max_batch,
            });
        }
        let stage_sla = match sf.sla {
            Some(s) => s,
            None => crate::profiler::derive_stage_sla(&variants)
                .map_err(|e| CatalogError::Profile(e.to_string()))?,
        };
        stages.push(Stage {
            id: sf.id,
            variants,
            stage_sla,
            threshold_rps: sf.threshold_rps,
        });
    }
    let pipeline_sla = match file.pipeline.sla {
        Some(s) => s,
        None => stages.iter().map(|s| s.stage_sla).sum(),
    };
    let pipeline = Pipeline {
        id: file.pipeline.id,
        stages,
        pipeline_sla,
    };
    let violations = validate(&pipeline);
    if violations.is_empty() {
        Ok(pipeline)
    } else {
        Err(CatalogError::Validation(violations))
    }
}

/// Serializes a resolved pipeline back to catalog TOML (coefficients inline,
/// all SLAs explicit). `load_pipeline` of the result reproduces the pipeline
/// field for field.
pub fn to_toml_string(pipeline: &Pipeline) -> Result<String, CatalogError> {
    let file = CatalogFile {
        pipeline: PipelineFile {
            id: pipeline.id.clone(),
            sla: Some(pipeline.pipeline_sla),
            stages: pipeline
                .stages
                .iter()
                .map(|s| StageFile {
                    id: s.id.clone(),
                    sla: Some(s.stage_sla),
                    threshold_rps: s.threshold_rps,
                    variants: s
                        .variants
                        .iter()
                        .map(|v| VariantFile {
                            id: v.id.clone(),
                            quality: QualityFile {
                                value: v.quality.value,
                                measure: v.quality.measure_name.clone(),
                                higher_is_better: v.quality.higher_is_better,
                            },
                            latency: LatencySpec::Coeffs {
                                a: v.latency.quad_coeff,
                                b: v.latency.lin_coeff,
                                c: v.latency.const_coeff,
                            },
                            base_cores: v.base_cores,
                            memory_bytes: v.memory_bytes,
                            max_batch: v.max_batch,
                        })
                        .collect(),
                })
                .collect(),
        },
    };
    toml::to_string_pretty(&file).map_err(|e| CatalogError::Parse(e.to_string()))
}

/// Parses a pipeline from catalog TOML text (no `samples_ref` resolution).
pub fn from_toml_str(text: &str) -> Result<Pipeline, CatalogError> {
    let file: CatalogFile =
        toml::from_str(text).map_err(|e| CatalogError::Parse(e.to_string()))?;
    resolve_pipeline(file, Path::new("."))
}

// ---------------------------------------------------------------------------
// Validation
// ---------------------------------------------------------------------------

/// Checks every pipeline invariant and returns all violations, not just the
/// first. An empty result means the pipeline is valid.
pub fn validate(pipeline: &Pipeline) -> Vec<Violation> {
    let mut out = Vec::new();
    let mut push = |field: String, message: String| out.push(Violation { field, message });

    if pipeline.id.is_empty() {
        push("pipeline.id".into(), "must be non-empty".into());
    }
    if pipeline.stages.is_empty() {
        push("pipeline.stages".into(), "must contain at least one stage".into());
    }
    if !(pipeline.pipeline_sla > 0.0) || !pipeline.pipeline_sla.is_finite() {
        push(
            "pipeline.sla".into(),
            format!("must be positive and finite, got {}", pipeline.pipeline_sla),
        );
    }
    let mut stage_ids = BTreeSet::new();
    for stage in &pipeline.stages {
        let sp = format!("stage '{}'", stage.id);
        if !stage_ids.insert(stage.id.clone()) {
            push(format!("{sp}.id"), format!("duplicate stage id '{}'", stage.id));
        }
        if stage.variants.is_empty() {
            push(format!("{sp}.variants"), "must contain at least one variant".into());
        }
        if !(stage.stage_sla > 0.0) || !stage.stage_sla.is_finite() {
            push(
                format!("{sp}.sla"),
                format!("stage_sla must be positive, got {}", stage.stage_sla),
            );
        }
        if !(stage.threshold_rps > 0.0) || !stage.threshold_rps.is_finite() {
            push(
                format!("{sp}.threshold_rps"),
                format!("must be positive, got {}", stage.threshold_rps),
            );
        }
        let mut variant_ids = BTreeSet::new();
        for variant in &stage.variants {
            let vp = format!("{sp}.variant '{}'", variant.id);
            if !variant_ids.insert(variant.id.clone()) {
                push(format!("{vp}.id"), format!("duplicate variant id '{}'", variant.id));
            }
            if variant.base_cores < 1 {
                push(format!("{vp}.base_cores"), "must be at least 1".into());
            }
            if variant.max_batch < 1 {
                push(format!("{vp}.max_batch"), "must be at least 1".into());
            }
            if variant.memory_bytes < 0.0 || !variant.memory_bytes.is_finite() {
                push(format!("{vp}.memory_bytes"), "must be non-negative and finite".into());
            }
            if !variant.quality.value.is_finite() {
                push(format!("{vp}.quality.value"), "must be finite".into());
            }
            if variant.quality.measure_name.is_empty() {
                push(format!("{vp}.quality.measure"), "must be non-empty".into());
            }
            for coeff in [
                variant.latency.quad_coeff,
                variant.latency.lin_coeff,
                variant.latency.const_coeff,
            ] {
                if !coeff.is_finite() {
                    push(format!("{vp}.latency"), "coefficients must be finite".into());
                    break;
                }
            }
            for b in admissible_batches(variant.max_batch) {
                let l = variant.latency.predict(b);
                if !(l > 0.0) {
                    push(
                        format!("{vp}.latency"),
                        format!("predicted latency at batch {b} is {l}, must be positive"),
                    );
                }
            }
        }
    }
    out
}

/// Validates a configuration against a pipeline: one entry per stage, known
/// variants, admissible batch sizes, positive replica counts.
pub fn validate_configuration(pipeline: &Pipeline, config: &Configuration) -> Vec<Violation> {
    let mut out = Vec::new();
    if config.stages.len() != pipeline.stages.len() {
        out.push(Violation {
            field: "configuration.stages".into(),
            message: format!(
                "expected {} stage entries, got {}",
                pipeline.stages.len(),
                config.stages.len()
            ),
        });
    }
    for (i, stage) in pipeline.stages.iter().enumerate() {
        let Some(sc) = config.stages.get(i) else {
            continue;
        };
        let sp = format!("configuration.stage '{}'", sc.stage_id);
        if sc.stage_id != stage.id {
            out.push(Violation {
                field: format!("{sp}.stage_id"),
                message: format!("expected stage '{}' at position {i}", stage.id),
            });
            continue;
        }
        let Some(variant) = stage.variant(&sc.variant_id) else {
            out.push(Violation {
                field: format!("{sp}.variant_id"),
                message: format!("unknown variant '{}'", sc.variant_id),
            });
            continue;
        };
        if sc.batch < 1 || sc.batch > variant.max_batch {
            out.push(Violation {
                field: format!("{sp}.batch"),
                message: format!(
                    "batch {} outside [1, {}] for variant '{}'",
                    sc.batch, variant.max_batch, variant.id
                ),
            });
        } else if !variant.admissible_batches().contains(&sc.batch) {
            out.push(Violation {
                field: format!("{sp}.batch"),
                message: format!("batch {} is not in the admissible set", sc.batch),
            });
        }
        if sc.replicas < 1 {
            out.push(Violation {
                field: format!("{sp}.replicas"),
                message: "replicas must be at least 1".into(),
            });
        }
    }
    out
}
