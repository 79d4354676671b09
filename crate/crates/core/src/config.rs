//! Experiment registry: tasks, their sources, the backbone, the variant and
//! the schedules, loaded from a versioned TOML file and validated as a whole
//! before anything trains.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::SubBackboneSpec;
use crate::data::{make_synthetic_source, Source, SyntheticGeneratorSpec};
use crate::error::{Error, Result};
use crate::heads::{HeadSpec, LossKind};
use crate::probe::ProbeConfig;
use crate::schedule::ScheduleConfig;

pub const CONFIG_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Xlearner,
    XlearnerR,
    XlearnerT,
    XlearnerP,
    XlearnerPp,
    HardSharing,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Xlearner,
        Variant::XlearnerR,
        Variant::XlearnerT,
        Variant::XlearnerP,
        Variant::XlearnerPp,
        Variant::HardSharing,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Xlearner => "xlearner",
            Variant::XlearnerR => "xlearner_r",
            Variant::XlearnerT => "xlearner_t",
            Variant::XlearnerP => "xlearner_p",
            Variant::XlearnerPp => "xlearner_pp",
            Variant::HardSharing => "hard_sharing",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Invalid(format!("unknown variant {s:?}")))
    }

    /// The only topology each variant accepts.
    pub fn topology(self) -> Topology {
        match self {
            Variant::XlearnerT => Topology::DeepToShallow,
            Variant::HardSharing => Topology::None,
            _ => Topology::ShallowToDeep,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Topology {
    #[serde(rename = "shallow-to-deep")]
    ShallowToDeep,
    #[serde(rename = "deep-to-shallow")]
    DeepToShallow,
    #[serde(rename = "none")]
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub task_id: String,
    pub loss_kind: LossKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub head: Option<HeadSpec>,
    pub source_ids: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SourceSpec {
    pub source_id: String,
    pub task_id: String,
    pub size: usize,
    pub seed: u64,
    pub generator: SyntheticGeneratorSpec,
}

impl SourceSpec {
    pub fn build(&self) -> Source {
        make_synthetic_source(&self.source_id, &self.generator, self.size, self.seed)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudentInit {
    Fresh,
    /// Start from the first task's sub-backbone.
    WarmStart,
}

/// Squeeze-stage and variant-specific knobs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SqueezeOptions {
    /// 1-based stages whose fused features are matched; defaults to [D].
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distill_stages: Option<Vec<usize>>,
    #[serde(default = "fresh")]
    pub student_init: StudentInit,
    /// Prune sparsity; defaults to 1 − 1/T.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prune_sparsity: Option<f64>,
    /// Weight of the pre-distillation hint term.
    #[serde(default = "one")]
    pub hint_weight: f64,
    /// Training steps for each single-source teacher; defaults to τ.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub teacher_steps: Option<usize>,
    /// Width factor of the reversed variant's light sub-backbones; defaults to 1/√T.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reversed_width: Option<f64>,
}

fn fresh() -> StudentInit {
    StudentInit::Fresh
}
fn one() -> f64 {
    1.0
}

impl Default for SqueezeOptions {
    fn default() -> Self {
        Self {
            distill_stages: None,
            student_init: StudentInit::Fresh,
            prune_sparsity: None,
            hint_weight: 1.0,
            teacher_steps: None,
            reversed_width: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    pub variant: Variant,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub recon_topology: Option<Topology>,
    #[serde(default)]
    pub global_seed: u64,
    pub output_dir: PathBuf,
    pub backbone: SubBackboneSpec,
    pub expansion_schedule: ScheduleConfig,
    pub squeeze_schedule: ScheduleConfig,
    #[serde(default)]
    pub squeeze: SqueezeOptions,
    pub eval: ProbeConfig,
    pub tasks: Vec<TaskSpec>,
    pub sources: Vec<SourceSpec>,
}

/// One registry problem, addressed by a dotted field path.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Issue {
    pub path: String,
    pub message: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub issues: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.issues.is_empty()
    }

    fn push(&mut self, path: impl Into<String>, message: impl Into<String>) {
        self.issues.push(Issue { path: path.into(), message: message.into() });
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(&self.issues).expect("issues serialise")
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.issues.is_empty() {
            return writeln!(f, "config OK");
        }
        writeln!(f, "{} issue(s):", self.issues.len())?;
        for i in &self.issues {
            writeln!(f, "  - {i}")?;
        }
        Ok(())
    }
}

impl ExperimentConfig {
    pub fn parse(text: &str, origin: &Path) -> Result<Self> {
        let mut cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Parse { path: origin.to_path_buf(), message: e.to_string() })?;
        cfg.resolve();
        Ok(cfg)
    }

    /// Fills in every defaulted field so the config serialises fully.
    pub fn resolve(&mut self) {
        if self.recon_topology.is_none() {
            self.recon_topology = Some(self.variant.topology());
        }
        self.expansion_schedule.resolve();
        self.squeeze_schedule.resolve();
        let d = self.backbone.depth();
        for t in &mut self.tasks {
            if t.head.is_none() {
                t.head = Some(HeadSpec::default_for(t.loss_kind.head_kind(), d));
            }
        }
        if self.eval.feature_stage.is_none() {
            self.eval.feature_stage = Some(d);
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serialises")
    }

    /// SHA-256 of the canonical serialisation (output directory excluded).
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        hex::encode(Sha256::digest(c.to_toml().as_bytes()))
    }

    pub fn topology(&self) -> Topology {
        self.recon_topology.unwrap_or(self.variant.topology())
    }

    pub fn num_tasks(&self) -> usize {
        self.tasks.len()
    }

    pub fn head_spec(&self, task: &TaskSpec) -> HeadSpec {
        task.head.clone().unwrap_or_else(|| HeadSpec::default_for(task.loss_kind.head_kind(), self.backbone.depth()))
    }

    pub fn source(&self, id: &str) -> Option<&SourceSpec> {
        self.sources.iter().find(|s| s.source_id == id)
    }

    /// Built sources of a task in declaration order.
    pub fn task_sources(&self, task: &TaskSpec) -> Vec<Source> {
        task.source_ids.iter().filter_map(|id| self.source(id)).map(SourceSpec::build).collect()
    }

    /// The (t, n) index set of the averaged objective, 1-based.
    pub fn task_source_pairs(&self) -> Vec<(usize, usize, String, String)> {
        self.tasks
            .iter()
            .enumerate()
            .flat_map(|(t, task)| {
                task.source_ids
                    .iter()
                    .enumerate()
                    .map(move |(n, s)| (t + 1, n + 1, task.task_id.clone(), s.clone()))
            })
            .collect()
    }

    pub fn prune_sparsity(&self) -> f64 {
        self.squeeze.prune_sparsity.unwrap_or(1.0 - 1.0 / self.num_tasks().max(1) as f64)
    }

    pub fn reversed_width(&self) -> f64 {
        self.squeeze.reversed_width.unwrap_or(1.0 / (self.num_tasks().max(1) as f64).sqrt())
    }

    pub fn distill_stages(&self) -> Vec<usize> {
        self.squeeze.distill_stages.clone().unwrap_or_else(|| vec![self.backbone.depth()])
    }
}

/// Reads, resolves and validates a config file.
pub fn load_experiment_config(path: &Path) -> Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let cfg = ExperimentConfig::parse(&text, path)?;
    let report = validate_registry(&cfg);
    if report.is_ok() {
        Ok(cfg)
    } else {
        Err(Error::Validation(report.issues))
    }
}

/// Checks every registry invariant; never mutates the config.
pub fn validate_registry(cfg: &ExperimentConfig) -> ValidationReport {
    let mut r = ValidationReport::default();
    if cfg.version != CONFIG_VERSION {
        r.push("version", format!("unsupported config version {} (expected {CONFIG_VERSION})", cfg.version));
    }
    if cfg.tasks.is_empty() {
        r.push("tasks", "need at least one task (T >= 1)");
    }

    let topo = cfg.topology();
    if topo != cfg.variant.topology() {
        r.push(
            "recon_topology",
            format!("variant {} requires topology {:?}, got {:?}", cfg.variant, cfg.variant.topology(), topo),
        );
    }

    for (field, msg) in cfg.backbone.problems() {
        r.push(format!("backbone.{field}"), msg);
    }
    let depth = cfg.backbone.depth();
    let [_, in_h, in_w] = cfg.backbone.input_shape;

    let mut source_ids: BTreeMap<&str, usize> = BTreeMap::new();
    for (i, s) in cfg.sources.iter().enumerate() {
        if source_ids.insert(&s.source_id, i).is_some() {
            r.push(format!("sources[{i}].source_id"), format!("duplicate source_id {:?}", s.source_id));
        }
        if s.size < 2 * cfg.expansion_schedule.batch_size {
            r.push(
                format!("sources[{i}].size"),
                format!(
                    "source too small: {:?} has {} samples, need at least 2 x batch size = {}",
                    s.source_id,
                    s.size,
                    2 * cfg.expansion_schedule.batch_size
                ),
            );
        }
        for p in s.generator.problems() {
            r.push(format!("sources[{i}].generator"), p);
        }
        if s.generator.image_size != [in_h, in_w] {
            r.push(
                format!("sources[{i}].generator.image_size"),
                format!("{:?} does not match backbone input {}x{}", s.generator.image_size, in_h, in_w),
            );
        }
    }

    let mut task_ids = BTreeSet::new();
    let mut referenced = BTreeSet::new();
    for (ti, t) in cfg.tasks.iter().enumerate() {
        let at = format!("tasks[{ti}]");
        if !task_ids.insert(t.task_id.as_str()) {
            r.push(format!("{at}.task_id"), format!("duplicate task_id {:?}", t.task_id));
        }
        if t.source_ids.is_empty() {
            r.push(format!("{at}.source_ids"), format!("task {:?} has no sources (N_t >= 1)", t.task_id));
        }
        for (si, sid) in t.source_ids.iter().enumerate() {
            referenced.insert(sid.as_str());
            match cfg.source(sid) {
                None => r.push(format!("{at}.source_ids[{si}]"), format!("unknown source {sid:?}")),
                Some(s) => {
                    if s.task_id != t.task_id {
                        r.push(
                            format!("{at}.source_ids[{si}]"),
                            format!("source {sid:?} belongs to task {:?}, not {:?}", s.task_id, t.task_id),
                        );
                    }
                    let dense = s.generator.kind.is_dense();
                    if dense != (t.loss_kind == LossKind::PerPixelCe) {
                        r.push(
                            format!("{at}.source_ids[{si}]"),
                            format!("generator {:?} does not fit loss {:?}", s.generator.kind, t.loss_kind),
                        );
                    }
                }
            }
        }
        if t.source_ids.iter().collect::<BTreeSet<_>>().len() != t.source_ids.len() {
            r.push(format!("{at}.source_ids"), "a source is listed twice");
        }
        let head = cfg.head_spec(t);
        if head.kind != t.loss_kind.head_kind() {
            r.push(format!("{at}.head.kind"), format!("{:?} head cannot serve {:?}", head.kind, t.loss_kind));
        }
        if head.input_stages.is_empty() || head.input_stages.iter().any(|&s| s == 0 || s > depth) {
            r.push(format!("{at}.head.input_stages"), format!("stages must be within 1..={depth}"));
        }
    }
    for (i, s) in cfg.sources.iter().enumerate() {
        if !referenced.contains(s.source_id.as_str()) {
            r.push(format!("sources[{i}]"), format!("source {:?} is not used by any task", s.source_id));
        }
        if !task_ids.contains(s.task_id.as_str()) {
            r.push(format!("sources[{i}].task_id"), format!("unknown task {:?}", s.task_id));
        }
    }

    for (name, sched) in [("expansion_schedule", &cfg.expansion_schedule), ("squeeze_schedule", &cfg.squeeze_schedule)] {
        for (field, msg) in sched.problems() {
            r.push(format!("{name}.{field}"), msg);
        }
    }

    let opts = &cfg.squeeze;
    if let Some(stages) = &opts.distill_stages {
        if stages.is_empty() || stages.iter().any(|&s| s == 0 || s > depth) {
            r.push("squeeze.distill_stages", format!("stages must be within 1..={depth}"));
        }
    }
    if let Some(s) = opts.prune_sparsity {
        if !(s > 0.0 && s < 1.0) {
            r.push("squeeze.prune_sparsity", "must lie strictly between 0 and 1");
        }
    }
    if cfg.variant == Variant::XlearnerP && cfg.squeeze.prune_sparsity.is_none() && cfg.num_tasks() < 2 {
        r.push("variant", "pruning to 1 - 1/T needs T >= 2 (or an explicit prune_sparsity)");
    }
    if !(opts.hint_weight >= 0.0 && opts.hint_weight.is_finite()) {
        r.push("squeeze.hint_weight", "must be non-negative");
    }
    if let Some(f) = opts.reversed_width {
        if !(f > 0.0 && f <= 1.0) {
            r.push("squeeze.reversed_width", "must lie in (0, 1]");
        }
    }
    if cfg.variant == Variant::XlearnerR {
        if let Err(e) = cfg.backbone.scaled(cfg.reversed_width()).stage_shapes() {
            r.push("squeeze.reversed_width", format!("light sub-backbone invalid: {e}"));
        }
    }

    for (field, msg) in cfg.eval.problems(depth, [in_h, in_w]) {
        r.push(format!("eval.{field}"), msg);
    }
    r
}
