//! End-to-end orchestration: pre-training per variant, squeezing,
//! evaluation and variant comparison, with resumable checkpoints and a
//! metrics log under the output directory.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use crate::backbone::{SubBackbone, WeightInit};
use crate::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, StageTag};
use crate::config::{load_experiment_config, ExperimentConfig, Variant};
use crate::error::{Error, Result};
use crate::expansion::{
    attach_hints, build_pretrain_state, build_single_task_state, expansion_step, joint_step, new_optimizer,
    train_hint_teacher, TrainContext, TrainState, Trunk,
};
use crate::metrics::{LogRecord, MetricsLog, StepRecord};
use crate::nn::{params::fnv1a, ParamStore};
use crate::probe::{evaluate_transfer, FeatureExtractor, FrozenBackbone, TransferReport};
use crate::reconciliation::{member_prefix, ExpandedBackbone, ExpandedFeatures};
use crate::squeeze::{
    build_squeeze_state, count_nonzero, distill_step, magnitude_prune, squeeze_state_for, BackboneTeacher,
    ExpandedTeacher, SqueezeState, STUDENT_PREFIX,
};

pub const METRICS_FILE: &str = "metrics.log";
pub const REPORT_FILE: &str = "transfer_report.json";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Command {
    Pretrain,
    Squeeze,
    Evaluate,
    Compare,
    Report,
}

#[derive(Clone, Debug)]
pub struct RunOptions {
    pub output_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub resume: bool,
    pub force: bool,
    pub jobs: usize,
    /// Stop (after checkpointing) once the running stage reaches this step.
    pub stop_after: Option<usize>,
    pub checkpoint_every: usize,
    /// Variants for `compare`; all six when empty.
    pub variants: Vec<Variant>,
    pub verbose: bool,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            output_dir: None,
            seed: None,
            resume: false,
            force: false,
            jobs: 1,
            stop_after: None,
            checkpoint_every: 250,
            variants: Vec::new(),
            verbose: false,
        }
    }
}

/// Whether a stage ran to completion or stopped early on request.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Outcome {
    Completed,
    Stopped,
}

/// The model a variant hands to evaluation.
pub enum FinalModel {
    Student { backbone: SubBackbone, store: ParamStore },
    Expanded { expanded: ExpandedBackbone, store: ParamStore },
    Shared { backbone: SubBackbone, store: ParamStore },
}

impl FinalModel {
    pub fn extractor(&self) -> Box<dyn FeatureExtractor + '_> {
        match self {
            FinalModel::Student { backbone, store } | FinalModel::Shared { backbone, store } => {
                Box::new(FrozenBackbone { backbone, store })
            }
            FinalModel::Expanded { expanded, store } => Box::new(ExpandedFeatures { expanded, store, member: None }),
        }
    }

    pub fn depth(&self) -> usize {
        match self {
            FinalModel::Student { backbone, .. } | FinalModel::Shared { backbone, .. } => backbone.depth(),
            FinalModel::Expanded { expanded, .. } => expanded.depth(),
        }
    }
}

/// One configured run rooted at an output directory.
pub struct Run {
    pub cfg: ExperimentConfig,
    pub dir: PathBuf,
    pub hash: String,
    pub log: MetricsLog,
    pub opts: RunOptions,
}

impl Run {
    pub fn new(mut cfg: ExperimentConfig, opts: RunOptions) -> Result<Self> {
        if let Some(seed) = opts.seed {
            cfg.global_seed = seed;
        }
        if let Some(dir) = &opts.output_dir {
            cfg.output_dir = dir.clone();
        }
        let dir = cfg.output_dir.clone();
        fs::create_dir_all(dir.join("teachers")).map_err(|e| Error::io(&dir, e))?;
        let log = MetricsLog::open(&dir.join(METRICS_FILE))?;
        let hash = cfg.config_hash();
        Ok(Self { cfg, dir, hash, log, opts })
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn event(&self, stage: &str, message: impl Into<String>) -> Result<()> {
        let message = message.into();
        if self.opts.verbose {
            eprintln!("[{stage}] {message}");
        }
        self.log.append(&LogRecord::Event { stage: stage.into(), message })
    }

    fn record(&self, r: &StepRecord) -> Result<()> {
        if self.opts.verbose && (r.step % 50 == 0 || r.step == 1) {
            eprintln!("[{}] step {} {} loss {:.4} lr {}", r.stage, r.step, r.phase, r.total, r.lr);
        }
        self.log.step(r)
    }

    fn load_checked(&self, path: &Path) -> Result<Checkpoint> {
        let c = load_checkpoint(path)?;
        c.check_config(&self.hash, self.opts.force)?;
        Ok(c)
    }

    /// Loads a progress checkpoint when resuming and one exists.
    fn resume_from(&self, name: &str) -> Result<Option<Checkpoint>> {
        let p = self.path(name);
        if self.opts.resume && p.exists() {
            let c = self.load_checked(&p)?;
            self.event("resume", format!("{name} at step {}", c.header.step))?;
            Ok(Some(c))
        } else {
            Ok(None)
        }
    }

    fn capture_train(&self, tag: StageTag, state: &TrainState) -> Checkpoint {
        Checkpoint::capture(tag, state.step, &self.hash, self.cfg.global_seed, &state.store, Some(&state.opt), state.masks.as_ref())
    }

    fn restore_train(&self, c: &Checkpoint, state: &mut TrainState, path: &Path) -> Result<()> {
        c.restore_store(&mut state.store, path)?;
        c.restore_optimizer(&state.store, &mut state.opt);
        state.masks = c.restore_masks(&state.store);
        state.step = c.header.step;
        Ok(())
    }

    /// Steps a training state to `total`, logging every step, writing
    /// progress checkpoints, and honouring `stop_after`.
    fn drive_train(
        &self,
        progress: &str,
        state: &mut TrainState,
        total: usize,
        tag: impl Fn(usize) -> StageTag,
        mut step: impl FnMut(&mut TrainState) -> Result<StepRecord>,
        mut after: impl FnMut(&Self, &TrainState) -> Result<()>,
    ) -> Result<Outcome> {
        while state.step < total {
            if self.opts.stop_after.is_some_and(|s| state.step >= s) {
                save_checkpoint(&self.capture_train(tag(state.step), state), &self.path(progress))?;
                self.event(progress, format!("stopped at step {}", state.step))?;
                return Ok(Outcome::Stopped);
            }
            let r = step(state)?;
            self.record(&r)?;
            after(self, state)?;
            if state.step % self.opts.checkpoint_every.max(1) == 0 && state.step < total {
                save_checkpoint(&self.capture_train(tag(state.step), state), &self.path(progress))?;
            }
        }
        Ok(Outcome::Completed)
    }

    /// Expansion stage (or the variant's replacement for it).
    pub fn pretrain(&self) -> Result<Outcome> {
        let cfg = &self.cfg;
        let mut state = build_pretrain_state(cfg)?;
        if cfg.variant == Variant::XlearnerPp {
            let teachers = self.hint_teachers()?;
            attach_hints(&mut state, cfg, teachers)?;
        }
        let ctx = TrainContext::expansion(cfg);
        let tau = cfg.expansion_schedule.tau();
        let total = cfg.expansion_schedule.total_steps;
        let progress = "progress.expansion.ckpt";
        let resumed = match self.resume_from(progress)? {
            Some(c) => {
                self.restore_train(&c, &mut state, &self.path(progress))?;
                true
            }
            None => false,
        };
        if cfg.variant == Variant::XlearnerR && !resumed {
            if self.reversed_prelude(&mut state)? == Outcome::Stopped {
                return Ok(Outcome::Stopped);
            }
        }
        let shared = matches!(state.model.trunk, Trunk::Shared(_));
        let tag = move |s: usize| if s <= tau && !shared { StageTag::Phase1 } else { StageTag::Expanded };
        let outcome = self.drive_train(
            progress,
            &mut state,
            total,
            tag,
            |s| expansion_step(s, &ctx),
            |run, s| {
                if s.step == tau && !shared && run.cfg.variant != Variant::XlearnerR {
                    save_checkpoint(&run.capture_train(StageTag::Phase1, s), &run.path("phase1.ckpt"))?;
                }
                Ok(())
            },
        )?;
        if outcome == Outcome::Completed {
            save_checkpoint(&self.capture_train(StageTag::Expanded, &state), &self.path("expanded.ckpt"))?;
            self.event("expansion", format!("done after {total} steps"))?;
        }
        Ok(outcome)
    }

    /// Single-source teachers for the hint term, trained or reloaded.
    fn hint_teachers(&self) -> Result<Vec<Vec<(String, SubBackbone, ParamStore)>>> {
        let cfg = &self.cfg;
        let steps = cfg.squeeze.teacher_steps.unwrap_or(cfg.expansion_schedule.tau());
        let mut out = Vec::new();
        for (t, task) in cfg.tasks.iter().enumerate() {
            let mut per_task = Vec::new();
            for sid in &task.source_ids {
                let path = self.path(&format!("teachers/{}.{sid}.ckpt", task.task_id));
                let (backbone, store) = if self.opts.resume && path.exists() {
                    let seed = cfg.global_seed ^ fnv1a(sid.as_bytes());
                    let mut st = build_single_task_state(cfg, t, &cfg.backbone, Some(sid), seed)?;
                    self.load_checked(&path)?.restore_store(&mut st.store, &path)?;
                    let member = match st.model.trunk {
                        Trunk::Expanded(mut e) => e.members.remove(0),
                        Trunk::Shared(_) => unreachable!("single-task states are expanded"),
                    };
                    (member, st.store)
                } else {
                    let (b, s) = train_hint_teacher(cfg, t, sid, steps)?;
                    let c = Checkpoint::capture(StageTag::Teacher, steps, &self.hash, cfg.global_seed, &s, None, None);
                    save_checkpoint(&c, &path)?;
                    self.event("teacher", format!("{}/{sid} trained for {steps} steps", task.task_id))?;
                    (b, s)
                };
                per_task.push((sid.clone(), backbone, store));
            }
            out.push(per_task);
        }
        Ok(out)
    }

    /// Reversed order: full-width per-task teachers, distilled into the
    /// light sub-backbones, which the joint phase then links and trains.
    fn reversed_prelude(&self, state: &mut TrainState) -> Result<Outcome> {
        let cfg = &self.cfg;
        let tau = cfg.expansion_schedule.tau();
        let expanded = state.model.expanded().expect("reversed variant is expanded").clone();
        for (t, task) in cfg.tasks.iter().enumerate() {
            let path = self.path(&format!("teachers/{}.ckpt", task.task_id));
            let teacher_state = if self.opts.resume && path.exists() {
                let mut st = build_single_task_state(cfg, t, &cfg.backbone, None, cfg.global_seed)?;
                self.load_checked(&path)?.restore_store(&mut st.store, &path)?;
                st
            } else {
                let mut st = build_single_task_state(cfg, t, &cfg.backbone, None, cfg.global_seed)?;
                let ctx = TrainContext::new(&format!("teacher/{}", task.task_id), "expansion", cfg, &cfg.expansion_schedule)
                    .only_task(t, None);
                for _ in 0..tau {
                    let r = crate::expansion::independent_step(&mut st, &ctx)?;
                    self.record(&r)?;
                }
                let c = Checkpoint::capture(StageTag::Teacher, tau, &self.hash, cfg.global_seed, &st.store, None, None);
                save_checkpoint(&c, &path)?;
                st
            };
            let teacher = &teacher_state.model.expanded().expect("expanded").members[0];
            let light = &expanded.members[t];
            let prefix = member_prefix(&task.task_id);
            let mut sq = build_squeeze_state(
                &light.spec,
                &prefix,
                WeightInit::Kaiming,
                &[(task.task_id.clone(), teacher.spec.effective_channels()?)],
                &cfg.distill_stages(),
                cfg.global_seed,
                new_optimizer(&cfg.squeeze_schedule),
            )?;
            let ctx = TrainContext::new(&format!("reverse-distill/{}", task.task_id), "reverse-distill", cfg, &cfg.squeeze_schedule)
                .only_task(t, None);
            let bt = BackboneTeacher { backbone: teacher, store: &teacher_state.store };
            for _ in 0..cfg.squeeze_schedule.total_steps {
                let r = distill_step(&mut sq, &ctx, &bt)?;
                self.record(&r)?;
            }
            state.store.copy_prefix(&sq.store, &format!("{prefix}."), &format!("{prefix}."))?;
        }
        state.step = tau;
        save_checkpoint(&self.capture_train(StageTag::Phase1, state), &self.path("phase1.ckpt"))?;
        Ok(Outcome::Completed)
    }

    /// The trained pre-training state from `expanded.ckpt`.
    pub fn load_expanded(&self) -> Result<TrainState> {
        let path = self.path("expanded.ckpt");
        let c = self.load_checked(&path)?;
        let mut state = build_pretrain_state(&self.cfg)?;
        c.restore_store(&mut state.store, &path)?;
        state.step = c.header.step;
        Ok(state)
    }

    /// Squeeze stage: distillation, pruning, or nothing, per variant.
    pub fn squeeze(&self) -> Result<Outcome> {
        match self.cfg.variant {
            Variant::Xlearner | Variant::XlearnerT | Variant::XlearnerPp => self.distill(),
            Variant::XlearnerP => self.prune(),
            Variant::XlearnerR | Variant::HardSharing => {
                self.event("squeeze", format!("{} has no squeeze stage; final model is expanded.ckpt", self.cfg.variant))?;
                Ok(Outcome::Completed)
            }
        }
    }

    fn distill(&self) -> Result<Outcome> {
        let cfg = &self.cfg;
        let teacher_state = self.load_expanded()?;
        let expanded = teacher_state.model.expanded().ok_or_else(|| Error::Invalid("distillation needs an expanded backbone".into()))?;
        let mut sq = squeeze_state_for(cfg, expanded, &teacher_state.store)?;
        let progress = "progress.squeeze.ckpt";
        if let Some(c) = self.resume_from(progress)? {
            c.restore_store(&mut sq.store, &self.path(progress))?;
            c.restore_optimizer(&sq.store, &mut sq.opt);
            sq.step = c.header.step;
        }
        let ctx = TrainContext::new("squeeze", "squeeze", cfg, &cfg.squeeze_schedule);
        let teacher = ExpandedTeacher { expanded, store: &teacher_state.store };
        let total = cfg.squeeze_schedule.total_steps;
        let capture = |sq: &SqueezeState| {
            Checkpoint::capture(StageTag::Squeezed, sq.step, &self.hash, cfg.global_seed, &sq.store, Some(&sq.opt), None)
        };
        while sq.step < total {
            if self.opts.stop_after.is_some_and(|s| sq.step >= s) {
                save_checkpoint(&capture(&sq), &self.path(progress))?;
                self.event("squeeze", format!("stopped at step {}", sq.step))?;
                return Ok(Outcome::Stopped);
            }
            let r = distill_step(&mut sq, &ctx, &teacher)?;
            self.record(&r)?;
            if sq.step % self.opts.checkpoint_every.max(1) == 0 && sq.step < total {
                save_checkpoint(&capture(&sq), &self.path(progress))?;
            }
        }
        let c = capture(&sq).with_meta("student_parameters", sq.student.count_parameters(false));
        save_checkpoint(&c, &self.path("squeezed.ckpt"))?;
        self.event("squeeze", format!("student distilled for {total} steps"))?;
        Ok(Outcome::Completed)
    }

    fn prune_prefixes(&self) -> Vec<String> {
        vec!["sub.".to_string(), "links.".to_string()]
    }

    fn prune(&self) -> Result<Outcome> {
        let cfg = &self.cfg;
        let progress = "progress.prune.ckpt";
        let mut state = self.load_expanded()?;
        state.opt = new_optimizer(&cfg.squeeze_schedule);
        state.step = 0;
        if let Some(c) = self.resume_from(progress)? {
            self.restore_train(&c, &mut state, &self.path(progress))?;
        } else {
            let (masks, summary) = magnitude_prune(&mut state.store, &self.prune_prefixes(), cfg.prune_sparsity())?;
            state.masks = Some(masks);
            self.event("prune", format!("zeroed {} of {} prunable weights", summary.zeroed, summary.prunable))?;
        }
        let ctx = TrainContext::new("prune", "prune", cfg, &cfg.squeeze_schedule);
        let total = cfg.squeeze_schedule.total_steps;
        let outcome = self.drive_train(progress, &mut state, total, |_| StageTag::Pruned, |s| joint_step(s, &ctx), |_, _| Ok(()))?;
        if outcome == Outcome::Completed {
            let (nonzero, n) = count_nonzero(&state.store, &self.prune_prefixes());
            let c = self.capture_train(StageTag::Pruned, &state).with_meta("nonzero", nonzero).with_meta("prunable", n);
            save_checkpoint(&c, &self.path("pruned.ckpt"))?;
            self.event("prune", format!("fine-tuned {total} steps; {nonzero}/{n} weights nonzero"))?;
        }
        Ok(outcome)
    }

    /// The variant's final model, loaded from its checkpoint.
    pub fn final_model(&self) -> Result<FinalModel> {
        let cfg = &self.cfg;
        match cfg.variant {
            Variant::Xlearner | Variant::XlearnerT | Variant::XlearnerPp => {
                let path = self.path("squeezed.ckpt");
                let c = self.load_checked(&path)?;
                let teacher = build_pretrain_state(cfg)?;
                let expanded = teacher.model.expanded().expect("distilled variants are expanded");
                let mut sq = squeeze_state_for(cfg, expanded, &teacher.store)?;
                c.restore_store(&mut sq.store, &path)?;
                Ok(FinalModel::Student { backbone: sq.student, store: sq.store })
            }
            Variant::XlearnerP | Variant::XlearnerR | Variant::HardSharing => {
                let name = if cfg.variant == Variant::XlearnerP { "pruned.ckpt" } else { "expanded.ckpt" };
                let path = self.path(name);
                let c = self.load_checked(&path)?;
                let mut state = build_pretrain_state(cfg)?;
                c.restore_store(&mut state.store, &path)?;
                Ok(match state.model.trunk {
                    Trunk::Expanded(expanded) => FinalModel::Expanded { expanded, store: state.store },
                    Trunk::Shared(backbone) => FinalModel::Shared { backbone, store: state.store },
                })
            }
        }
    }

    /// Probes the final model and writes the report.
    pub fn evaluate(&self) -> Result<TransferReport> {
        let model = self.final_model()?;
        let report = evaluate_transfer(model.extractor().as_ref(), self.cfg.variant.name(), &self.cfg.eval, model.depth())?;
        fs::write(self.path(REPORT_FILE), report.to_json()).map_err(|e| Error::io(self.path(REPORT_FILE), e))?;
        self.log.append(&LogRecord::Transfer(report.clone()))?;
        Ok(report)
    }

    /// Probe report of a randomly initialised sub-backbone, for reference.
    pub fn evaluate_random_init(&self) -> Result<TransferReport> {
        let (backbone, store) = SubBackbone::standalone(&self.cfg.backbone, self.cfg.global_seed)?;
        let model = FrozenBackbone { backbone: &backbone, store: &store };
        evaluate_transfer(&model, "random_init", &self.cfg.eval, backbone.depth())
    }

    /// Probe reports of each sub-backbone of the trained expanded model alone.
    pub fn evaluate_members(&self) -> Result<Vec<TransferReport>> {
        let state = self.load_expanded()?;
        let e = state.model.expanded().ok_or_else(|| Error::Invalid("no per-task sub-backbones".into()))?;
        (0..e.num_tasks())
            .map(|m| {
                let f = ExpandedFeatures { expanded: e, store: &state.store, member: Some(m) };
                evaluate_transfer(&f, &format!("member:{}", e.task_ids[m]), &self.cfg.eval, e.depth())
            })
            .collect()
    }

    /// pretrain → squeeze → evaluate.
    pub fn full(&self) -> Result<Option<TransferReport>> {
        if self.pretrain()? == Outcome::Stopped {
            return Ok(None);
        }
        if self.squeeze()? == Outcome::Stopped {
            return Ok(None);
        }
        self.evaluate().map(Some)
    }
}

/// One row per model; columns are per-dataset probe accuracies, their mean
/// and the dense-task mIoU.
#[derive(Clone, Debug, PartialEq)]
pub struct CompareTable {
    pub datasets: Vec<String>,
    pub rows: Vec<TransferReport>,
}

impl CompareTable {
    pub fn from_reports(rows: Vec<TransferReport>) -> Self {
        let datasets = rows.first().map(|r| r.datasets.iter().map(|d| d.name.clone()).collect()).unwrap_or_default();
        Self { datasets, rows }
    }

    pub fn to_markdown(&self) -> String {
        let mut s = format!("| model | {} | AVG | seg mIoU |\n", self.datasets.join(" | "));
        s.push_str(&format!("|---|{}---|---|\n", "---|".repeat(self.datasets.len())));
        for r in &self.rows {
            let accs: Vec<String> = r.datasets.iter().map(|d| format!("{:.1}", 100.0 * d.accuracy)).collect();
            let miou = r.seg_miou.map_or("-".to_string(), |m| format!("{:.1}", 100.0 * m));
            s.push_str(&format!("| {} | {} | {:.1} | {miou} |\n", r.model, accs.join(" | "), 100.0 * r.avg_cls));
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = format!("model,{},avg_cls,seg_miou\n", self.datasets.join(","));
        for r in &self.rows {
            let accs: Vec<String> = r.datasets.iter().map(|d| format!("{:.6}", d.accuracy)).collect();
            let miou = r.seg_miou.map_or(String::new(), |m| format!("{m:.6}"));
            s.push_str(&format!("{},{},{:.6},{miou}\n", r.model, accs.join(","), r.avg_cls));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| Error::Invalid("empty table".into()))?.split(',').collect();
        if header.len() < 3 {
            return Err(Error::Invalid("malformed table header".into()));
        }
        let datasets: Vec<String> = header[1..header.len() - 2].iter().map(|s| s.to_string()).collect();
        let mut rows = Vec::new();
        for line in lines.filter(|l| !l.trim().is_empty()) {
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != header.len() {
                return Err(Error::Invalid(format!("row has {} cells, header {}", cells.len(), header.len())));
            }
            let num = |s: &str| s.parse::<f64>().map_err(|e| Error::Invalid(format!("bad number {s:?}: {e}")));
            let mut ds = Vec::new();
            for (name, cell) in datasets.iter().zip(&cells[1..]) {
                ds.push(crate::probe::DatasetScore { name: name.clone(), accuracy: num(cell)?, best_lambda: f64::NAN, train_accuracy: f64::NAN });
            }
            let last = cells[cells.len() - 1];
            rows.push(TransferReport {
                schema_version: crate::probe::REPORT_SCHEMA_VERSION,
                model: cells[0].to_string(),
                datasets: ds,
                avg_cls: num(cells[cells.len() - 2])?,
                seg_miou: if last.is_empty() { None } else { Some(num(last)?) },
            });
        }
        Ok(Self { datasets, rows })
    }
}

/// A copy of the config switched to another variant.
pub fn with_variant(cfg: &ExperimentConfig, variant: Variant) -> ExperimentConfig {
    let mut c = cfg.clone();
    c.variant = variant;
    c.recon_topology = None;
    c.resolve();
    c
}

/// Runs every requested variant end to end (plus a random-init reference)
/// and writes `compare.md` / `compare.csv`.
pub fn compare(cfg: &ExperimentConfig, opts: &RunOptions) -> Result<CompareTable> {
    let root = Run::new(cfg.clone(), RunOptions { stop_after: None, ..opts.clone() })?;
    let variants = if opts.variants.is_empty() { Variant::ALL.to_vec() } else { opts.variants.clone() };
    let results: Mutex<Vec<Option<Result<TransferReport>>>> = Mutex::new((0..variants.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    std::thread::scope(|s| {
        for _ in 0..opts.jobs.max(1).min(variants.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&v) = variants.get(i) else { break };
                let mut c = with_variant(&root.cfg, v);
                c.output_dir = root.dir.join("compare").join(v.name());
                let sub = RunOptions { output_dir: None, stop_after: None, ..opts.clone() };
                let r = Run::new(c, sub).and_then(|run| run.full()).and_then(|r| {
                    r.ok_or_else(|| Error::Invalid(format!("{v} stopped early")))
                });
                results.lock().unwrap_or_else(|p| p.into_inner())[i] = Some(r);
            });
        }
    });
    let mut rows = Vec::new();
    for r in results.into_inner().unwrap_or_else(|p| p.into_inner()) {
        rows.push(r.expect("every variant ran")?);
    }
    rows.push(root.evaluate_random_init()?);
    let table = CompareTable::from_reports(rows);
    fs::write(root.path("compare.md"), table.to_markdown()).map_err(|e| Error::io(root.path("compare.md"), e))?;
    fs::write(root.path("compare.csv"), table.to_csv()).map_err(|e| Error::io(root.path("compare.csv"), e))?;
    Ok(table)
}

/// Entry point shared by the binary and the C interface.
pub fn run_pipeline(config_path: &Path, command: Command, opts: &RunOptions) -> Result<()> {
    let cfg = load_experiment_config(config_path)?;
    match command {
        Command::Pretrain => Run::new(cfg, opts.clone())?.pretrain().map(|_| ()),
        Command::Squeeze => Run::new(cfg, opts.clone())?.squeeze().map(|_| ()),
        Command::Evaluate => {
            let report = Run::new(cfg, opts.clone())?.evaluate()?;
            println!("{}", report.to_json());
            Ok(())
        }
        Command::Compare => {
            let table = compare(&cfg, opts)?;
            print!("{}", table.to_markdown());
            Ok(())
        }
        Command::Report => {
            let run = Run::new(cfg, opts.clone())?;
            let files = crate::report::write_report(&run.dir)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(())
        }
    }
}

/// Final-model parameter counts as `(label, count)` pairs, for summaries.
pub fn parameter_summary(cfg: &ExperimentConfig) -> Result<Vec<(String, usize)>> {
    let state = build_pretrain_state(cfg)?;
    let mut out = vec![("pretrain backbone".to_string(), state.model.backbone_parameters())];
    if let Some(e) = state.model.expanded() {
        for (id, m) in e.task_ids.iter().zip(&e.members) {
            out.push((format!("sub-backbone {id}"), m.count_parameters(false)));
        }
        out.push(("links".into(), e.link_param_count()));
        let sq = squeeze_state_for(cfg, e, &state.store)?;
        out.push((format!("{STUDENT_PREFIX}"), sq.student.count_parameters(false)));
    }
    Ok(out)
}
