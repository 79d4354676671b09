//! Expansion-stage training: independent per-task updates up to τ, then
//! joint updates of the linked backbone under the averaged objective.

use crate::backbone::{SubBackbone, SubBackboneSpec, WeightInit};
use crate::config::{ExperimentConfig, Topology, Variant};
use crate::data::{sample_task_batch, step_rng, Batch, Source};
use crate::error::{Error, Result};
use crate::heads::{task_loss, Head, LossKind};
use crate::metrics::{SourceLoss, StepRecord};
use crate::nn::{apply_batch_stats, params::fnv1a, Graph, Masks, Mode, ParamStore, Sgd, Var};
use crate::reconciliation::{build_reconciliation_graph, member_prefix, ExpandedBackbone};
use crate::schedule::{lr_at, ScheduleConfig};
use crate::squeeze::{mean_sq_error, GuidanceLayer};

pub const PHASE_INDEPENDENT: &str = "independent";
pub const PHASE_JOINT: &str = "joint";

/// The heads of one task, one per source.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskHeads {
    pub task_id: String,
    pub loss_kind: LossKind,
    pub heads: Vec<(String, Head)>,
}

impl TaskHeads {
    pub fn head(&self, source_id: &str) -> Result<&Head> {
        self.heads
            .iter()
            .find(|(s, _)| s == source_id)
            .map(|(_, h)| h)
            .ok_or_else(|| Error::MissingTask(format!("no head for source {source_id:?} of task {:?}", self.task_id)))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Trunk {
    /// One sub-backbone per task plus links.
    Expanded(ExpandedBackbone),
    /// A single backbone shared by every task.
    Shared(SubBackbone),
}

/// A frozen single-source teacher and the guidance layer that maps the
/// student's last stage onto it.
#[derive(Clone, Debug)]
pub struct HintTeacher {
    pub source_id: String,
    pub backbone: SubBackbone,
    pub store: ParamStore,
    pub guidance: GuidanceLayer,
}

#[derive(Clone, Debug)]
pub struct Hints {
    pub weight: f64,
    /// Per task, one teacher per source.
    pub teachers: Vec<Vec<HintTeacher>>,
}

#[derive(Clone, Debug)]
pub struct PretrainModel {
    pub trunk: Trunk,
    pub tasks: Vec<TaskHeads>,
    pub hints: Option<Hints>,
}

impl PretrainModel {
    pub fn expanded(&self) -> Option<&ExpandedBackbone> {
        match &self.trunk {
            Trunk::Expanded(e) => Some(e),
            Trunk::Shared(_) => None,
        }
    }

    /// Backbone parameters, heads excluded.
    pub fn backbone_parameters(&self) -> usize {
        match &self.trunk {
            Trunk::Expanded(e) => e.count_parameters(),
            Trunk::Shared(b) => b.count_parameters(false),
        }
    }
}

/// Parameters, optimiser slots and the step counter of a training run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub store: ParamStore,
    pub model: PretrainModel,
    pub opt: Sgd,
    /// Completed steps.
    pub step: usize,
    pub masks: Option<Masks>,
}

/// What a step needs besides the state: data, schedule and the name of the
/// random stream batches are drawn from.
#[derive(Clone, Debug)]
pub struct TrainContext {
    pub stage: String,
    pub stream: String,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    /// Task ids and their built sources, in task order.
    pub tasks: Vec<(String, Vec<Source>)>,
}

impl TrainContext {
    pub fn new(stage: &str, stream: &str, cfg: &ExperimentConfig, schedule: &ScheduleConfig) -> Self {
        let tasks = cfg.tasks.iter().map(|t| (t.task_id.clone(), cfg.task_sources(t))).collect();
        Self { stage: stage.into(), stream: stream.into(), seed: cfg.global_seed, schedule: schedule.clone(), tasks }
    }

    pub fn expansion(cfg: &ExperimentConfig) -> Self {
        Self::new("expansion", "expansion", cfg, &cfg.expansion_schedule)
    }

    /// Restricts the context to one task (and optionally one of its sources).
    pub fn only_task(mut self, task: usize, source: Option<&str>) -> Self {
        let (id, mut sources) = self.tasks.swap_remove(task);
        if let Some(s) = source {
            sources.retain(|src| src.source_id == s);
        }
        self.tasks = vec![(id, sources)];
        self
    }

    /// Draws task `t`'s batch for 0-based `step`.
    pub fn batch(&self, t: usize, step: usize) -> Result<Batch> {
        let (id, sources) = &self.tasks[t];
        let refs: Vec<&Source> = sources.iter().collect();
        let mut rng = step_rng(self.seed, step, &format!("{}/{id}", self.stream));
        sample_task_batch(&refs, self.schedule.batch_size, &mut rng)
    }
}

/// Plain mean of the per-(task, source) losses present in a step.
pub fn average_multi_source_loss(losses: &[(usize, usize, f64)]) -> Result<f64> {
    if losses.is_empty() {
        return Err(Error::Invalid("no losses to average".into()));
    }
    Ok(losses.iter().map(|l| l.2).sum::<f64>() / losses.len() as f64)
}

fn task_heads(
    cfg: &ExperimentConfig,
    t: usize,
    channels: &[usize],
    only_source: Option<&str>,
    store: &mut ParamStore,
) -> Result<TaskHeads> {
    let task = &cfg.tasks[t];
    let spec = cfg.head_spec(task);
    let [_, h, w] = cfg.backbone.input_shape;
    let mut heads = Vec::new();
    for sid in &task.source_ids {
        if only_source.is_some_and(|s| s != sid) {
            continue;
        }
        let src = cfg.source(sid).ok_or_else(|| Error::MissingTask(format!("unknown source {sid:?}")))?;
        let name = format!("head.{}.{sid}", task.task_id);
        heads.push((sid.clone(), Head::build(&spec, channels, src.generator.num_classes, [h, w], store, &name, cfg.global_seed)?));
    }
    Ok(TaskHeads { task_id: task.task_id.clone(), loss_kind: task.loss_kind, heads })
}

/// Sub-backbone spec of every task for a variant (light ones for `_r`).
pub fn member_spec(cfg: &ExperimentConfig) -> SubBackboneSpec {
    match cfg.variant {
        Variant::XlearnerR => cfg.backbone.scaled(cfg.reversed_width()),
        _ => cfg.backbone.clone(),
    }
}

pub fn new_optimizer(schedule: &ScheduleConfig) -> Sgd {
    Sgd::new(schedule.momentum, schedule.weight_decay)
}

/// Fresh pre-training state for the configured variant.
pub fn build_pretrain_state(cfg: &ExperimentConfig) -> Result<TrainState> {
    let mut store = ParamStore::new();
    let ids: Vec<String> = cfg.tasks.iter().map(|t| t.task_id.clone()).collect();
    let (trunk, channels) = if cfg.variant == Variant::HardSharing {
        let b = SubBackbone::build(&cfg.backbone, cfg.global_seed, &mut store, "shared", WeightInit::Kaiming)?;
        let ch = cfg.backbone.effective_channels()?;
        (Trunk::Shared(b), ch)
    } else {
        let spec = member_spec(cfg);
        let topo = match cfg.topology() {
            Topology::None => Topology::ShallowToDeep,
            t => t,
        };
        let e = build_reconciliation_graph(&ids, &vec![spec.clone(); ids.len()], topo, &mut store, cfg.global_seed, WeightInit::Kaiming)?;
        (Trunk::Expanded(e), spec.effective_channels()?)
    };
    let tasks = (0..cfg.tasks.len()).map(|t| task_heads(cfg, t, &channels, None, &mut store)).collect::<Result<_>>()?;
    Ok(TrainState {
        store,
        model: PretrainModel { trunk, tasks, hints: None },
        opt: new_optimizer(&cfg.expansion_schedule),
        step: 0,
        masks: None,
    })
}

/// One task's sub-backbone and heads, alone; parameter names and initial
/// values match the same task's part of [`build_pretrain_state`].
pub fn build_single_task_state(
    cfg: &ExperimentConfig,
    t: usize,
    spec: &SubBackboneSpec,
    only_source: Option<&str>,
    seed: u64,
) -> Result<TrainState> {
    let mut store = ParamStore::new();
    let id = cfg.tasks[t].task_id.clone();
    let e = build_reconciliation_graph(
        std::slice::from_ref(&id),
        std::slice::from_ref(spec),
        Topology::ShallowToDeep,
        &mut store,
        seed,
        WeightInit::Kaiming,
    )?;
    let mut c = cfg.clone();
    c.global_seed = seed;
    let heads = task_heads(&c, t, &spec.effective_channels()?, only_source, &mut store)?;
    Ok(TrainState {
        store,
        model: PretrainModel { trunk: Trunk::Expanded(e), tasks: vec![heads], hints: None },
        opt: new_optimizer(&cfg.expansion_schedule),
        step: 0,
        masks: None,
    })
}

/// Trains task `t` alone for `steps` steps with the expansion schedule.
pub fn train_standalone(cfg: &ExperimentConfig, t: usize, steps: usize) -> Result<TrainState> {
    let mut state = build_single_task_state(cfg, t, &cfg.backbone, None, cfg.global_seed)?;
    let ctx = TrainContext::expansion(cfg).only_task(t, None);
    for _ in 0..steps {
        independent_step(&mut state, &ctx)?;
    }
    Ok(state)
}

/// Trains a single-source teacher for the hint term.
pub fn train_hint_teacher(cfg: &ExperimentConfig, t: usize, source_id: &str, steps: usize) -> Result<(SubBackbone, ParamStore)> {
    let seed = cfg.global_seed ^ fnv1a(source_id.as_bytes());
    let mut state = build_single_task_state(cfg, t, &cfg.backbone, Some(source_id), seed)?;
    let mut ctx = TrainContext::expansion(cfg).only_task(t, Some(source_id));
    ctx.stream = format!("teacher/{source_id}");
    ctx.seed = seed;
    for _ in 0..steps {
        independent_step(&mut state, &ctx)?;
    }
    let TrainState { store, model, .. } = state;
    match model.trunk {
        Trunk::Expanded(mut e) => Ok((e.members.remove(0), store)),
        Trunk::Shared(_) => unreachable!("single-task states are expanded"),
    }
}

/// Adds guidance layers for the given teachers and switches the hint term on.
pub fn attach_hints(state: &mut TrainState, cfg: &ExperimentConfig, teachers: Vec<Vec<(String, SubBackbone, ParamStore)>>) -> Result<()> {
    let e = state.model.expanded().ok_or_else(|| Error::Invalid("hints need per-task sub-backbones".into()))?;
    let student_c: Vec<usize> = e.members.iter().map(|m| *m.spec.effective_channels().unwrap().last().unwrap()).collect();
    let mut all = Vec::new();
    for (t, per_task) in teachers.into_iter().enumerate() {
        let mut v = Vec::new();
        for (source_id, backbone, store) in per_task {
            let teacher_c = *backbone.spec.effective_channels()?.last().expect("D >= 2");
            let name = format!("hint.{}.{source_id}", cfg.tasks[t].task_id);
            let guidance = GuidanceLayer::new(&mut state.store, &name, student_c[t], teacher_c, cfg.global_seed)?;
            v.push(HintTeacher { source_id, backbone, store, guidance });
        }
        all.push(v);
    }
    state.model.hints = Some(Hints { weight: cfg.squeeze.hint_weight, teachers: all });
    Ok(())
}

fn check_finite(value: f64, step: usize, task: &str, source: &str) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { step, task: task.to_string(), source_id: source.to_string() })
    }
}

/// Phase-1 update: each sub-backbone and its heads step on their own task
/// loss only, one task after another.
pub fn independent_step(state: &mut TrainState, ctx: &TrainContext) -> Result<StepRecord> {
    let s = state.step;
    let lr = lr_at(s, &ctx.schedule);
    let TrainState { store, model, opt, masks, .. } = state;
    let e = match &model.trunk {
        Trunk::Expanded(e) => e,
        Trunk::Shared(_) => return Err(Error::Invalid("a shared backbone has no independent phase".into())),
    };
    let mut losses = Vec::new();
    for (t, heads) in model.tasks.iter().enumerate() {
        let batch = ctx.batch(t, s)?;
        let member = &e.members[t];
        let mut g = Graph::new();
        let x = g.constant(batch.images.clone());
        let feats = member.forward(&mut g, store, Mode::Train, x)?;
        let head = heads.head(&batch.source_id)?;
        let logits = head.forward(&mut g, store, Mode::Train, &feats)?;
        let loss = task_loss(&mut g, heads.loss_kind, logits, &batch.labels)?;
        let value = g.value(loss).item();
        check_finite(value, s + 1, &heads.task_id, &batch.source_id)?;
        let mut objective = loss;
        if let Some(h) = &model.hints {
            let teacher = h.teachers[t]
                .iter()
                .find(|tc| tc.source_id == batch.source_id)
                .ok_or_else(|| Error::MissingTask(format!("no hint teacher for {}", batch.source_id)))?;
            let target = teacher.backbone.features(&teacher.store, Mode::Eval, &batch.images)?.pop().expect("D >= 2");
            let target = g.constant(target);
            let last = *feats.last().expect("D >= 2");
            let projected = teacher.guidance.forward(&mut g, store, Mode::Train, last)?;
            let hint = mean_sq_error(&mut g, projected, target)?;
            let weighted = g.scale(hint, h.weight);
            objective = g.add(loss, weighted)?;
        }
        let grads = g.backward(objective)?;
        apply_batch_stats(store, &g.take_batch_stats());
        opt.step(store, &grads, lr, masks.as_ref());
        losses.push(SourceLoss { task: heads.task_id.clone(), source: batch.source_id, loss: value });
    }
    state.step += 1;
    let total = losses.iter().map(|l| l.loss).sum::<f64>() / losses.len().max(1) as f64;
    Ok(StepRecord { stage: ctx.stage.clone(), step: s + 1, phase: PHASE_INDEPENDENT.into(), losses, total, lr })
}

/// Joint update of everything under the averaged objective.
pub fn joint_step(state: &mut TrainState, ctx: &TrainContext) -> Result<StepRecord> {
    let s = state.step;
    let lr = lr_at(s, &ctx.schedule);
    let TrainState { store, model, opt, masks, .. } = state;
    let batches: Vec<Batch> = (0..model.tasks.len()).map(|t| ctx.batch(t, s)).collect::<Result<_>>()?;
    let mut g = Graph::new();
    let xs: Vec<Var> = batches.iter().map(|b| g.constant(b.images.clone())).collect();
    let feats: Vec<Vec<Var>> = match &model.trunk {
        Trunk::Expanded(e) => e.fused_forward(&mut g, store, Mode::Train, &xs)?.fused,
        Trunk::Shared(b) => xs.iter().map(|&x| b.forward(&mut g, store, Mode::Train, x)).collect::<Result<_>>()?,
    };
    let mut loss_vars = Vec::new();
    let mut losses = Vec::new();
    for (t, heads) in model.tasks.iter().enumerate() {
        let b = &batches[t];
        let logits = heads.head(&b.source_id)?.forward(&mut g, store, Mode::Train, &feats[t])?;
        let loss = task_loss(&mut g, heads.loss_kind, logits, &b.labels)?;
        let value = g.value(loss).item();
        check_finite(value, s + 1, &heads.task_id, &b.source_id)?;
        loss_vars.push(loss);
        losses.push(SourceLoss { task: heads.task_id.clone(), source: b.source_id.clone(), loss: value });
    }
    let sum = g.add_n(&loss_vars)?;
    let mean = g.scale(sum, 1.0 / loss_vars.len() as f64);
    let total = g.value(mean).item();
    let grads = g.backward(mean)?;
    apply_batch_stats(store, &g.take_batch_stats());
    opt.step(store, &grads, lr, masks.as_ref());
    state.step += 1;
    Ok(StepRecord { stage: ctx.stage.clone(), step: s + 1, phase: PHASE_JOINT.into(), losses, total, lr })
}

/// One step of the expansion stage: independent while the 1-based step is
/// at most τ, joint afterwards. A shared backbone is always joint.
pub fn expansion_step(state: &mut TrainState, ctx: &TrainContext) -> Result<StepRecord> {
    if state.step >= ctx.schedule.total_steps {
        return Err(Error::Invalid(format!("step {} beyond K={}", state.step + 1, ctx.schedule.total_steps)));
    }
    let independent = matches!(state.model.trunk, Trunk::Expanded(_)) && state.step < ctx.schedule.tau();
    if independent {
        independent_step(state, ctx)
    } else {
        joint_step(state, ctx)
    }
}

/// Names of the parameters that belong to task `t`'s sub-backbone.
pub fn member_param_names(state: &TrainState, task_id: &str) -> Vec<String> {
    let prefix = format!("{}.", member_prefix(task_id));
    state.store.iter().filter(|(_, e)| e.name.starts_with(&prefix)).map(|(_, e)| e.name.clone()).collect()
}
