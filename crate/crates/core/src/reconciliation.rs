//! Cross-task feature links and the expanded backbone they assemble.
//!
//! Task `t`'s fused stage-`i` feature is its own `E^t_i` plus, for every
//! other task `k` and every linked stage `j`, a transform chain applied to
//! a stop-gradient copy of `E^k_j`.

use serde::Serialize;

use crate::backbone::{SubBackbone, SubBackboneSpec, WeightInit};
use crate::config::Topology;
use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Graph, Init, Mode, ParamStore, Tensor, Var};
use crate::probe::FeatureExtractor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum GammaKind {
    /// 3×3 stride-2 conv, ReLU, norm: halves the resolution.
    GammaA,
    /// 1×1 conv, norm: keeps the resolution.
    GammaB,
    /// Nearest 2× upsample, 3×3 conv: doubles the resolution.
    GammaC,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GammaTransform {
    pub kind: GammaKind,
    pub in_channels: usize,
    pub out_channels: usize,
    pub conv: Conv2d,
    pub norm: Option<BatchNorm>,
}

impl GammaTransform {
    /// Glorot conv weights; with `zero_output` the transform starts out
    /// producing exactly zero (norm scale zeroed, or the conv itself when
    /// there is no norm).
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        kind: GammaKind,
        in_channels: usize,
        out_channels: usize,
        zero_output: bool,
        seed: u64,
    ) -> Result<Self> {
        let (kernel, stride) = match kind {
            GammaKind::GammaA => (3, 2),
            GammaKind::GammaB => (1, 1),
            GammaKind::GammaC => (3, 1),
        };
        let has_norm = kind != GammaKind::GammaC;
        let fan = kernel * kernel;
        let init = if zero_output && !has_norm {
            Init::Zeros
        } else {
            Init::Glorot { fan_in: in_channels * fan, fan_out: out_channels * fan }
        };
        let conv = Conv2d::new(store, &format!("{name}.conv"), in_channels, out_channels, kernel, stride, !has_norm, init, seed)?;
        let norm = if has_norm {
            let scale = if zero_output { Init::Zeros } else { Init::Ones };
            Some(BatchNorm::new(store, &format!("{name}.norm"), out_channels, scale)?)
        } else {
            None
        };
        Ok(Self { kind, in_channels, out_channels, conv, norm })
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mode: Mode, x: Var) -> Result<Var> {
        let x = if self.kind == GammaKind::GammaC { g.upsample2x(x)? } else { x };
        let mut y = self.conv.forward(g, store, mode, x)?;
        // ReLU ahead of the norm: a zero-scaled norm followed by ReLU would
        // pass no gradient at all.
        if self.kind == GammaKind::GammaA {
            y = g.relu(y);
        }
        if let Some(n) = &self.norm {
            y = n.forward(g, store, mode, y)?;
        }
        Ok(y)
    }

    /// Output (height, width) for an input of the given size.
    pub fn out_size(&self, (h, w): (usize, usize)) -> (usize, usize) {
        match self.kind {
            GammaKind::GammaA => (h.div_ceil(2), w.div_ceil(2)),
            GammaKind::GammaB => (h, w),
            GammaKind::GammaC => (2 * h, 2 * w),
        }
    }

    pub fn param_count(&self) -> usize {
        self.conv.param_count() + self.norm.as_ref().map_or(0, BatchNorm::param_count)
    }
}

/// Carries stage `source_layer` of `source_task` into stage `target_layer`
/// of `target_task` (task indices 0-based, layers 1-based).
#[derive(Clone, Debug, PartialEq)]
pub struct ReconciliationLink {
    pub source_task: usize,
    pub target_task: usize,
    pub source_layer: usize,
    pub target_layer: usize,
    pub chain: Vec<GammaTransform>,
}

impl ReconciliationLink {
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, mode: Mode, x: Var) -> Result<Var> {
        let mut y = x;
        for gamma in &self.chain {
            y = gamma.forward(g, store, mode, y)?;
        }
        Ok(y)
    }

    pub fn param_count(&self) -> usize {
        self.chain.iter().map(GammaTransform::param_count).sum()
    }

    pub fn name(&self, task_ids: &[String]) -> String {
        format!(
            "links.{}_to_{}.s{}_to_s{}",
            task_ids[self.source_task], task_ids[self.target_task], self.source_layer, self.target_layer
        )
    }
}

/// The (j, i) stage pairs a topology links, 1-based.
pub fn linked_layers(topology: Topology, depth: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 1..=depth {
        for j in 1..=depth {
            let keep = match topology {
                Topology::ShallowToDeep => j <= i,
                Topology::DeepToShallow => j >= i,
                Topology::None => false,
            };
            if keep {
                out.push((j, i));
            }
        }
    }
    out
}

/// All T sub-backbones plus the links between them.
#[derive(Clone, Debug, PartialEq)]
pub struct ExpandedBackbone {
    pub task_ids: Vec<String>,
    pub members: Vec<SubBackbone>,
    pub links: Vec<ReconciliationLink>,
    pub topology: Topology,
}

/// Prefix under which task `task_id`'s sub-backbone lives.
pub fn member_prefix(task_id: &str) -> String {
    format!("sub.{task_id}")
}

/// Builds one sub-backbone per task into `store` and links them.
pub fn build_reconciliation_graph(
    task_ids: &[String],
    specs: &[SubBackboneSpec],
    topology: Topology,
    store: &mut ParamStore,
    seed: u64,
    init: WeightInit,
) -> Result<ExpandedBackbone> {
    if task_ids.len() != specs.len() {
        return Err(Error::Invalid(format!("{} tasks but {} backbone specs", task_ids.len(), specs.len())));
    }
    let mut members = Vec::with_capacity(specs.len());
    for (id, spec) in task_ids.iter().zip(specs) {
        members.push(SubBackbone::build(spec, seed, store, &member_prefix(id), init)?);
    }
    let shapes: Vec<Vec<(usize, usize, usize)>> = specs.iter().map(|s| s.stage_shapes()).collect::<Result<_>>()?;
    let depth = specs.first().map_or(0, SubBackboneSpec::depth);
    if specs.iter().any(|s| s.depth() != depth) {
        return Err(Error::Invalid("all sub-backbones must have the same number of stages".into()));
    }
    let mut links = Vec::new();
    if topology != Topology::None {
        for t in 0..task_ids.len() {
            for k in 0..task_ids.len() {
                if k == t {
                    continue;
                }
                for (j, i) in linked_layers(topology, depth) {
                    links.push(build_link(store, task_ids, &shapes, (k, t, j, i), seed)?);
                }
            }
        }
    }
    Ok(ExpandedBackbone { task_ids: task_ids.to_vec(), members, links, topology })
}

fn build_link(
    store: &mut ParamStore,
    task_ids: &[String],
    shapes: &[Vec<(usize, usize, usize)>],
    (k, t, j, i): (usize, usize, usize, usize),
    seed: u64,
) -> Result<ReconciliationLink> {
    let (src_c, src_h, src_w) = shapes[k][j - 1];
    let (dst_c, dst_h, dst_w) = shapes[t][i - 1];
    let (kind, steps) = if j <= i { (GammaKind::GammaA, i - j) } else { (GammaKind::GammaC, j - i) };
    let name = format!("links.{}_to_{}.s{j}_to_s{i}", task_ids[k], task_ids[t]);
    let mut chain = Vec::with_capacity(steps + 1);
    chain.push(GammaTransform::new(store, &format!("{name}.0"), GammaKind::GammaB, src_c, dst_c, steps == 0, seed)?);
    for s in 0..steps {
        chain.push(GammaTransform::new(store, &format!("{name}.{}", s + 1), kind, dst_c, dst_c, s + 1 == steps, seed)?);
    }
    let size = chain.iter().fold((src_h, src_w), |hw, g| g.out_size(hw));
    if size != (dst_h, dst_w) {
        return Err(Error::Link {
            source_task: task_ids[k].clone(),
            target_task: task_ids[t].clone(),
            source_layer: j,
            target_layer: i,
            message: format!("chain maps {src_h}x{src_w} to {}x{}, target stage is {dst_h}x{dst_w}", size.0, size.1),
        });
    }
    Ok(ReconciliationLink { source_task: k, target_task: t, source_layer: j, target_layer: i, chain })
}

/// Per-task stage outputs of a fused forward pass.
#[derive(Clone, Debug)]
pub struct FusedOutput {
    /// `own[t][i-1]` = E^t_i on task t's input.
    pub own: Vec<Vec<Var>>,
    /// `fused[t][i-1]` = F^t_i.
    pub fused: Vec<Vec<Var>>,
}

impl ExpandedBackbone {
    pub fn num_tasks(&self) -> usize {
        self.members.len()
    }

    pub fn depth(&self) -> usize {
        self.members.first().map_or(0, SubBackbone::depth)
    }

    pub fn link_param_count(&self) -> usize {
        self.links.iter().map(ReconciliationLink::param_count).sum()
    }

    pub fn count_parameters(&self) -> usize {
        self.members.iter().map(|m| m.count_parameters(false)).sum::<usize>() + self.link_param_count()
    }

    pub fn link(&self, k: usize, t: usize, j: usize, i: usize) -> Option<&ReconciliationLink> {
        self.links
            .iter()
            .find(|l| (l.source_task, l.target_task, l.source_layer, l.target_layer) == (k, t, j, i))
    }

    /// Runs every task's input through the expanded backbone.
    ///
    /// Sub-backbone `k` is evaluated on each distinct input once; its
    /// output feeds links only through a stop-gradient copy. Batch
    /// statistics are kept only for a sub-backbone's pass over its own
    /// task's input.
    pub fn fused_forward(&self, g: &mut Graph, store: &ParamStore, mode: Mode, inputs: &[Var]) -> Result<FusedOutput> {
        let tasks = self.num_tasks();
        if inputs.len() != tasks {
            return Err(Error::MissingTask(format!("fused forward needs {tasks} task inputs, got {}", inputs.len())));
        }
        // outputs[k][x] = E^k on the x-th distinct input
        let mut distinct: Vec<Var> = Vec::new();
        let input_slot: Vec<usize> = inputs
            .iter()
            .map(|v| match distinct.iter().position(|d| d == v) {
                Some(p) => p,
                None => {
                    distinct.push(*v);
                    distinct.len() - 1
                }
            })
            .collect();
        let mut outputs: Vec<Vec<Vec<Var>>> = Vec::with_capacity(tasks);
        let mut kept = Vec::new();
        for (k, member) in self.members.iter().enumerate() {
            let mut per_input = Vec::with_capacity(distinct.len());
            for (x, &input) in distinct.iter().enumerate() {
                let feats = member.forward(g, store, mode, input)?;
                let stats = g.take_batch_stats();
                if input_slot[k] == x {
                    kept.extend(stats);
                }
                per_input.push(feats);
            }
            outputs.push(per_input);
        }
        let own: Vec<Vec<Var>> = (0..tasks).map(|t| outputs[t][input_slot[t]].clone()).collect();
        let mut fused = own.clone();
        let mut link_stats = Vec::new();
        for t in 0..tasks {
            let slot = input_slot[t];
            for i in 1..=self.depth() {
                let mut terms = vec![own[t][i - 1]];
                for link in self.links.iter().filter(|l| l.target_task == t && l.target_layer == i) {
                    let src = g.detach(outputs[link.source_task][slot][link.source_layer - 1]);
                    terms.push(link.forward(g, store, mode, src)?);
                }
                if terms.len() > 1 {
                    fused[t][i - 1] = g.add_n(&terms)?;
                }
            }
            link_stats.extend(g.take_batch_stats());
        }
        for s in kept.into_iter().chain(link_stats) {
            g.record_batch_stats(s);
        }
        Ok(FusedOutput { own, fused })
    }

    /// Structured description of every link, one JSON object per line.
    pub fn describe(&self) -> String {
        #[derive(Serialize)]
        struct Row<'a> {
            source_task: &'a str,
            target_task: &'a str,
            source_layer: usize,
            target_layer: usize,
            chain: Vec<GammaKind>,
            in_shape: (usize, usize, usize),
            out_shape: (usize, usize, usize),
            parameters: usize,
        }
        let shapes: Vec<Vec<(usize, usize, usize)>> =
            self.members.iter().map(|m| m.spec.stage_shapes().unwrap_or_default()).collect();
        let mut out = String::new();
        for l in &self.links {
            let row = Row {
                source_task: &self.task_ids[l.source_task],
                target_task: &self.task_ids[l.target_task],
                source_layer: l.source_layer,
                target_layer: l.target_layer,
                chain: l.chain.iter().map(|g| g.kind).collect(),
                in_shape: shapes[l.source_task].get(l.source_layer - 1).copied().unwrap_or_default(),
                out_shape: shapes[l.target_task].get(l.target_layer - 1).copied().unwrap_or_default(),
                parameters: l.param_count(),
            };
            out.push_str(&serde_json::to_string(&row).expect("row serialises"));
            out.push('\n');
        }
        out
    }
}

/// Outcome of [`gradient_isolation_check`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct IsolationReport {
    /// Nonzero gradients that crossed a stop-gradient boundary.
    pub violations: Vec<String>,
    /// Gradient norm of each link, per loss task: (loss task, link name, norm).
    pub link_gradients: Vec<(usize, String, f64)>,
}

impl IsolationReport {
    pub fn is_clean(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Backpropagates each task's loss separately and checks that no other
/// task's sub-backbone receives gradient.
pub fn gradient_isolation_check(
    expanded: &ExpandedBackbone,
    store: &ParamStore,
    inputs: &[Tensor],
    mut loss: impl FnMut(&mut Graph, usize, &[Var]) -> Result<Var>,
) -> Result<IsolationReport> {
    let mut report = IsolationReport::default();
    for t in 0..expanded.num_tasks() {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let out = expanded.fused_forward(&mut g, store, Mode::Train, &vars)?;
        let l = loss(&mut g, t, &out.fused[t])?;
        let grads = g.backward(l)?;
        for (k, member) in expanded.members.iter().enumerate() {
            if k == t {
                continue;
            }
            for id in store.ids_with_prefix(&format!("{}.", member.prefix)) {
                if let Some(gr) = grads.get(id) {
                    if gr.max_abs() != 0.0 {
                        report.violations.push(format!(
                            "loss of task {} reached {}",
                            expanded.task_ids[t],
                            store.entry(id).name
                        ));
                    }
                }
            }
        }
        for link in &expanded.links {
            let name = link.name(&expanded.task_ids);
            let norm: f64 = store
                .ids_with_prefix(&format!("{name}."))
                .filter_map(|id| grads.get(id))
                .map(Tensor::sq_norm)
                .sum::<f64>()
                .sqrt();
            report.link_gradients.push((t, name, norm));
        }
    }
    Ok(report)
}

/// Frozen expanded backbone as a feature source: either the channel
/// concatenation of every task's fused features, or one member alone.
pub struct ExpandedFeatures<'a> {
    pub expanded: &'a ExpandedBackbone,
    pub store: &'a ParamStore,
    pub member: Option<usize>,
}

impl FeatureExtractor for ExpandedFeatures<'_> {
    fn stage_maps(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        if let Some(m) = self.member {
            return self.expanded.members[m].features(self.store, Mode::Eval, images);
        }
        let mut g = Graph::new();
        let x = g.constant(images.clone());
        let inputs = vec![x; self.expanded.num_tasks()];
        let out = self.expanded.fused_forward(&mut g, self.store, Mode::Eval, &inputs)?;
        (0..self.expanded.depth())
            .map(|i| {
                let parts: Vec<Tensor> = out.fused.iter().map(|f| g.value(f[i]).clone()).collect();
                Tensor::concat_channels(&parts)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("task{i}")).collect()
    }

    fn expanded(t: usize, chans: &[usize], topo: Topology) -> (ExpandedBackbone, ParamStore) {
        let spec = SubBackboneSpec::toy(chans, [3, 32, 32]);
        let mut store = ParamStore::new();
        let e = build_reconciliation_graph(&ids(t), &vec![spec; t], topo, &mut store, 1, WeightInit::Kaiming).unwrap();
        (e, store)
    }

    #[test]
    fn link_counts() {
        assert_eq!(expanded(2, &[4, 8, 12, 16], Topology::ShallowToDeep).0.links.len(), 20);
        assert_eq!(expanded(1, &[4, 8, 12, 16], Topology::ShallowToDeep).0.links.len(), 0);
        assert_eq!(expanded(3, &[4, 8], Topology::ShallowToDeep).0.links.len(), 18);
        assert_eq!(expanded(2, &[4, 8, 12, 16], Topology::DeepToShallow).0.links.len(), 20);
        assert_eq!(expanded(2, &[4, 8], Topology::None).0.links.len(), 0);
    }

    #[test]
    fn chains_follow_the_topology() {
        let (e, _) = expanded(2, &[4, 8, 12], Topology::ShallowToDeep);
        let l = e.link(1, 0, 1, 3).unwrap();
        let kinds: Vec<_> = l.chain.iter().map(|g| g.kind).collect();
        assert_eq!(kinds, [GammaKind::GammaB, GammaKind::GammaA, GammaKind::GammaA]);
        let (e, _) = expanded(2, &[4, 8, 12], Topology::DeepToShallow);
        let l = e.link(0, 1, 3, 1).unwrap();
        let kinds: Vec<_> = l.chain.iter().map(|g| g.kind).collect();
        assert_eq!(kinds, [GammaKind::GammaB, GammaKind::GammaC, GammaKind::GammaC]);
        assert!(e.link(0, 1, 1, 3).is_none());
    }

    #[test]
    fn fusion_starts_as_identity() {
        for topo in [Topology::ShallowToDeep, Topology::DeepToShallow] {
            let (e, store) = expanded(2, &[4, 8, 12], topo);
            let x: Vec<f64> = (0..2 * 3 * 32 * 32).map(|v| ((v * 31 % 97) as f64 / 97.0) - 0.5).collect();
            let x = Tensor::from_vec(&[2, 3, 32, 32], x).unwrap();
            for mode in [Mode::Train, Mode::Eval] {
                let mut g = Graph::new();
                let xv = g.constant(x.clone());
                let out = e.fused_forward(&mut g, &store, mode, &[xv, xv]).unwrap();
                for t in 0..2 {
                    let alone = e.members[t].features(&store, mode, &x).unwrap();
                    for i in 0..3 {
                        assert_eq!(g.value(out.fused[t][i]), &alone[i]);
                    }
                }
            }
        }
    }

    #[test]
    fn isolation_holds_and_links_learn() {
        let (e, store) = expanded(2, &[4, 8], Topology::ShallowToDeep);
        let xs: Vec<Tensor> = (0..2)
            .map(|s| {
                Tensor::from_vec(&[2, 3, 32, 32], (0..6144).map(|v| ((v * (7 + s) % 53) as f64 / 53.0) - 0.5).collect())
                    .unwrap()
            })
            .collect();
        let report = gradient_isolation_check(&e, &store, &xs, |g, _, f| {
            let mut terms = Vec::new();
            for &v in f {
                let z = g.constant(Tensor::full(g.value(v).shape(), 0.3));
                terms.push(g.sq_diff_sum(v, z)?);
            }
            g.add_n(&terms)
        })
        .unwrap();
        assert!(report.is_clean(), "{:?}", report.violations);
        for (t, name, norm) in &report.link_gradients {
            let target = e.links.iter().find(|l| &l.name(&e.task_ids) == name).unwrap();
            if target.target_task == *t {
                assert!(*norm > 0.0, "{name} got no gradient from task {t}");
            } else {
                assert_eq!(*norm, 0.0);
            }
        }
    }

    #[test]
    fn mismatched_stage_sizes_name_the_link() {
        let mut store = ParamStore::new();
        let a = SubBackboneSpec::toy(&[4, 8], [3, 16, 16]);
        let b = SubBackboneSpec::toy(&[4, 8], [3, 32, 32]);
        let err = build_reconciliation_graph(&ids(2), &[a, b], Topology::ShallowToDeep, &mut store, 0, WeightInit::Kaiming)
            .unwrap_err();
        match err {
            Error::Link { source_task, target_task, .. } => assert_ne!(source_task, target_task),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn describe_lists_every_link() {
        let (e, _) = expanded(2, &[4, 8], Topology::ShallowToDeep);
        assert_eq!(e.describe().lines().count(), 6);
        assert!(e.describe().contains("\"chain\":[\"gamma_b\",\"gamma_a\"]"));
    }
}
