//! Squeeze stage: condense an expanded backbone into one sub-backbone-sized
//! student by matching every task's fused features through per-task
//! guidance layers, or by global magnitude pruning.

use crate::backbone::{SubBackbone, SubBackboneSpec, WeightInit};
use crate::config::{ExperimentConfig, StudentInit};
use crate::error::{Error, Result};
use crate::expansion::{new_optimizer, TrainContext};
use crate::metrics::{SourceLoss, StepRecord};
use crate::nn::{apply_batch_stats, BatchNorm, Conv2d, Graph, Init, Masks, Mode, ParamStore, Sgd, Tensor, Var};
use crate::reconciliation::{member_prefix, ExpandedBackbone};
use crate::schedule::lr_at;

pub const STUDENT_PREFIX: &str = "student";

/// 1×1 conv + norm projecting student features into one teacher's space.
#[derive(Clone, Debug, PartialEq)]
pub struct GuidanceLayer {
    pub conv: Conv2d,
    pub norm: BatchNorm,
}

impl GuidanceLayer {
    pub fn new(store: &mut ParamStore, name: &str, in_channels: usize, out_channels: usize, seed: u64) -> Result<Self> {
        let init = Init::Glorot { fan_in: in_channels, fan_out: out_channels };
        let conv = Conv2d::new(store, &format!("{name}.conv"), in_channels, out_channels, 1, 1, false, init, seed)?;
        let norm = BatchNorm::new(store, &format!("{name}.norm"), out_channels, Init::Ones)?;
        Ok(Self { conv, norm })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mode: Mode, x: Var) -> Result<Var> {
        let y = self.conv.forward(g, store, mode, x)?;
        self.norm.forward(g, store, mode, y)
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.norm.param_count()
    }
}

/// Σ (projected − teacher)² over every element.
pub fn hint_term(projected: &Tensor, teacher: &Tensor) -> Result<f64> {
    if projected.shape() != teacher.shape() {
        return Err(Error::Shape(format!("hint between {:?} and {:?}", projected.shape(), teacher.shape())));
    }
    Ok(projected.data().iter().zip(teacher.data()).map(|(a, b)| (a - b) * (a - b)).sum())
}

/// Single-teacher hint: the guided student feature against the teacher's.
pub fn pre_distill_hint_loss(
    g: &mut Graph,
    store: &ParamStore,
    guidance: &GuidanceLayer,
    student: Var,
    teacher: &Tensor,
) -> Result<Var> {
    let projected = guidance.forward(g, store, Mode::Train, student)?;
    let t = g.constant(teacher.clone());
    g.sq_diff_sum(projected, t)
}

/// Σ_t ‖G^t(F̂) − F^t‖² given the already-projected student features.
pub fn squeeze_loss(projected: &[Tensor], teachers: &[Tensor]) -> Result<f64> {
    if projected.len() != teachers.len() {
        return Err(Error::Shape(format!("{} projections for {} teachers", projected.len(), teachers.len())));
    }
    projected.iter().zip(teachers).map(|(p, t)| hint_term(p, t)).sum()
}

/// Squared error averaged over elements, the scale used in training.
pub fn mean_sq_error(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let n = g.value(a).numel().max(1);
    let s = g.sq_diff_sum(a, b)?;
    Ok(g.scale(s, 1.0 / n as f64))
}

/// Per-task stage maps of a frozen teacher for a batch: `[task][stage]`.
pub trait Teacher {
    fn task_maps(&self, images: &Tensor) -> Result<Vec<Vec<Tensor>>>;
}

/// The fused features of a frozen expanded backbone.
pub struct ExpandedTeacher<'a> {
    pub expanded: &'a ExpandedBackbone,
    pub store: &'a ParamStore,
}

impl Teacher for ExpandedTeacher<'_> {
    fn task_maps(&self, images: &Tensor) -> Result<Vec<Vec<Tensor>>> {
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let out = self.expanded.fused_forward(&mut g, self.store, Mode::Eval, &vec![x; self.expanded.num_tasks()])?;
        Ok(out.fused.iter().map(|f| f.iter().map(|v| g.value(*v).clone()).collect()).collect())
    }
}

/// A single frozen sub-backbone as a one-task teacher.
pub struct BackboneTeacher<'a> {
    pub backbone: &'a SubBackbone,
    pub store: &'a ParamStore,
}

impl Teacher for BackboneTeacher<'_> {
    fn task_maps(&self, images: &Tensor) -> Result<Vec<Vec<Tensor>>> {
        Ok(vec![self.backbone.features(self.store, Mode::Eval, images)?])
    }
}

/// Student, guidance layers and optimiser of a distillation run.
#[derive(Clone, Debug)]
pub struct SqueezeState {
    pub store: ParamStore,
    pub student: SubBackbone,
    /// `guidance[t][s]` serves teacher task `t` at `stages[s]`.
    pub guidance: Vec<Vec<GuidanceLayer>>,
    pub stages: Vec<usize>,
    pub opt: Sgd,
    pub step: usize,
}

/// Builds a student of `spec` under `prefix` with guidance layers towards
/// teachers of the given per-stage channel widths.
pub fn build_squeeze_state(
    spec: &SubBackboneSpec,
    prefix: &str,
    init: WeightInit,
    teacher_channels: &[(String, Vec<usize>)],
    stages: &[usize],
    seed: u64,
    opt: Sgd,
) -> Result<SqueezeState> {
    let mut store = ParamStore::new();
    let student = SubBackbone::build(spec, seed, &mut store, prefix, init)?;
    let chans = spec.effective_channels()?;
    let mut guidance = Vec::new();
    for (task, tc) in teacher_channels {
        let mut per_stage = Vec::new();
        for &s in stages {
            if s == 0 || s > chans.len() || s > tc.len() {
                return Err(Error::Invalid(format!("distill stage {s} outside 1..={}", chans.len())));
            }
            per_stage.push(GuidanceLayer::new(&mut store, &format!("guide.{task}.s{s}"), chans[s - 1], tc[s - 1], seed)?);
        }
        guidance.push(per_stage);
    }
    Ok(SqueezeState { store, student, guidance, stages: stages.to_vec(), opt, step: 0 })
}

/// The squeeze student for a trained expanded backbone.
pub fn squeeze_state_for(cfg: &ExperimentConfig, teacher: &ExpandedBackbone, teacher_store: &ParamStore) -> Result<SqueezeState> {
    let channels: Vec<(String, Vec<usize>)> = teacher
        .task_ids
        .iter()
        .zip(&teacher.members)
        .map(|(id, m)| Ok((id.clone(), m.spec.effective_channels()?)))
        .collect::<Result<_>>()?;
    let mut state = build_squeeze_state(
        &cfg.backbone,
        STUDENT_PREFIX,
        WeightInit::Glorot,
        &channels,
        &cfg.distill_stages(),
        cfg.global_seed,
        new_optimizer(&cfg.squeeze_schedule),
    )?;
    if cfg.squeeze.student_init == StudentInit::WarmStart {
        let from = format!("{}.", member_prefix(&teacher.task_ids[0]));
        state.store.copy_prefix(teacher_store, &from, &format!("{STUDENT_PREFIX}."))?;
    }
    Ok(state)
}

/// One distillation step. The batch comes from task `step mod T` of the
/// context; the student is matched against every teacher task on it.
pub fn distill_step(state: &mut SqueezeState, ctx: &TrainContext, teacher: &dyn Teacher) -> Result<StepRecord> {
    let s = state.step;
    let lr = lr_at(s, &ctx.schedule);
    let data_task = s % ctx.tasks.len();
    let batch = ctx.batch(data_task, s)?;
    let targets = teacher.task_maps(&batch.images)?;
    if targets.len() != state.guidance.len() {
        return Err(Error::Shape(format!("{} teacher tasks for {} guidance sets", targets.len(), state.guidance.len())));
    }
    let SqueezeState { store, student, guidance, stages, opt, .. } = state;
    let mut g = Graph::new();
    let x = g.constant(batch.images.clone());
    let feats = student.forward(&mut g, store, Mode::Train, x)?;
    let mut terms = Vec::new();
    let mut losses = Vec::new();
    for (t, per_stage) in guidance.iter().enumerate() {
        let mut task_terms = Vec::new();
        for (layer, &stage) in per_stage.iter().zip(stages.iter()) {
            let projected = layer.forward(&mut g, store, Mode::Train, feats[stage - 1])?;
            let target = g.constant(targets[t][stage - 1].clone());
            task_terms.push(mean_sq_error(&mut g, projected, target)?);
        }
        let task_loss = g.add_n(&task_terms)?;
        let value = g.value(task_loss).item();
        let task_name = ctx.tasks.get(t).map_or_else(|| format!("teacher{t}"), |x| x.0.clone());
        if !value.is_finite() {
            return Err(Error::NonFinite { step: s + 1, task: task_name, source_id: batch.source_id.clone() });
        }
        losses.push(SourceLoss { task: task_name, source: batch.source_id.clone(), loss: value });
        terms.push(task_loss);
    }
    let total_var = g.add_n(&terms)?;
    let total = g.value(total_var).item();
    let grads = g.backward(total_var)?;
    apply_batch_stats(store, &g.take_batch_stats());
    opt.step(store, &grads, lr, None);
    state.step += 1;
    Ok(StepRecord { stage: ctx.stage.clone(), step: s + 1, phase: "distill".into(), losses, total, lr })
}

/// Summary of a pruning pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PruneSummary {
    pub prunable: usize,
    pub zeroed: usize,
}

/// Zeroes the `⌈s·n⌉` smallest-magnitude prunable weights under the given
/// prefixes (ties broken by storage order) and returns the keep-masks.
pub fn magnitude_prune(store: &mut ParamStore, prefixes: &[String], sparsity: f64) -> Result<(Masks, PruneSummary)> {
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Invalid(format!("sparsity {sparsity} outside [0, 1)")));
    }
    let ids: Vec<_> = store
        .iter()
        .filter(|(_, e)| e.kind.is_prunable() && prefixes.iter().any(|p| e.name.starts_with(p.as_str())))
        .map(|(id, _)| id)
        .collect();
    let mut all: Vec<(f64, usize, usize)> = Vec::new();
    for (slot, &id) in ids.iter().enumerate() {
        for (i, v) in store.get(id).data().iter().enumerate() {
            all.push((v.abs(), slot, i));
        }
    }
    let n = all.len();
    let zeroed = ((sparsity * n as f64) - 1e-9).ceil().max(0.0) as usize;
    all.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
    let mut masks: Masks = ids.iter().map(|&id| (id, vec![true; store.get(id).numel()])).collect();
    for &(_, slot, i) in &all[..zeroed] {
        let id = ids[slot];
        masks.get_mut(&id).expect("mask exists")[i] = false;
        store.get_mut(id).data_mut()[i] = 0.0;
    }
    Ok((masks, PruneSummary { prunable: n, zeroed }))
}

/// Nonzero prunable weights under the prefixes.
pub fn count_nonzero(store: &ParamStore, prefixes: &[String]) -> (usize, usize) {
    let mut total = 0;
    let mut nonzero = 0;
    for (_, e) in store.iter() {
        if e.kind.is_prunable() && prefixes.iter().any(|p| e.name.starts_with(p.as_str())) {
            total += e.tensor.numel();
            nonzero += e.tensor.data().iter().filter(|v| **v != 0.0).count();
        }
    }
    (nonzero, total)
}
