use std::path::Path;

use proptest::prelude::*;

use xlearner::backbone::{scale_channels, SubBackbone, SubBackboneSpec};
use xlearner::config::{ExperimentConfig, Topology, Variant};
use xlearner::expansion::average_multi_source_loss;
use xlearner::nn::{Graph, Mode, ParamKind, ParamStore, Tensor};
use xlearner::reconciliation::build_reconciliation_graph;
use xlearner::schedule::{lr_at, ScheduleConfig};
use xlearner::squeeze::{count_nonzero, magnitude_prune};

fn micro() -> ExperimentConfig {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/micro.toml");
    ExperimentConfig::parse(&std::fs::read_to_string(&path).unwrap(), &path).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn scaled_widths_are_multiples_below_the_exact_product(
        widths in prop::collection::vec(8usize..4096, 1..6),
        factor in 0.05f64..1.5,
        multiple in 1usize..9,
    ) {
        match scale_channels(&widths, factor, multiple) {
            Ok(scaled) => {
                for (w, s) in widths.iter().zip(&scaled) {
                    prop_assert_eq!(s % multiple, 0);
                    prop_assert!(*s >= multiple);
                    prop_assert!(*s as f64 <= *w as f64 * factor + 1e-6);
                    prop_assert!(*s as f64 > *w as f64 * factor - multiple as f64 - 1e-6);
                }
            }
            Err(_) => prop_assert!(widths.iter().any(|w| (*w as f64 * factor) < multiple as f64 + 1e-6)),
        }
    }

    #[test]
    fn scaling_is_monotone_in_factor_and_width(
        w in 16usize..4096,
        a in 0.1f64..1.0,
        b in 0.1f64..1.0,
    ) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        if let (Ok(x), Ok(y)) = (scale_channels(&[w], lo, 4), scale_channels(&[w], hi, 4)) {
            prop_assert!(x[0] <= y[0]);
        }
        if let (Ok(x), Ok(y)) = (scale_channels(&[w], lo, 4), scale_channels(&[w + 7], lo, 4)) {
            prop_assert!(x[0] <= y[0]);
        }
    }

    #[test]
    fn learning_rate_never_increases(k in 1usize..5000) {
        let s = ScheduleConfig::with_steps(k);
        let mut prev = f64::INFINITY;
        for step in (0..k).step_by((k / 97).max(1)) {
            let lr = lr_at(step, &s);
            prop_assert!(lr <= prev);
            prev = lr;
        }
    }

    #[test]
    fn averaged_loss_ignores_order(
        losses in prop::collection::vec((0usize..4, 0usize..3, 0.0f64..20.0), 1..12),
        seed in any::<u64>(),
    ) {
        let mut shuffled = losses.clone();
        let n = shuffled.len();
        for i in (1..n).rev() {
            let j = (seed.wrapping_mul(6364136223846793005).wrapping_add(i as u64) % (i as u64 + 1)) as usize;
            shuffled.swap(i, j);
        }
        let a = average_multi_source_loss(&losses).unwrap();
        let b = average_multi_source_loss(&shuffled).unwrap();
        prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        let lo = losses.iter().map(|l| l.2).fold(f64::INFINITY, f64::min);
        let hi = losses.iter().map(|l| l.2).fold(f64::NEG_INFINITY, f64::max);
        prop_assert!(a >= lo - 1e-12 && a <= hi + 1e-12);
    }

    #[test]
    fn pruning_is_exact_and_monotone(seed in 0u64..1000, s1 in 0.0f64..0.95, s2 in 0.0f64..0.95) {
        let spec = SubBackboneSpec::toy(&[4, 8], [3, 16, 16]);
        let (_, base) = SubBackbone::standalone(&spec, seed).unwrap();
        let prefixes = vec!["backbone.".to_string()];
        let (lo, hi) = if s1 <= s2 { (s1, s2) } else { (s2, s1) };
        let mut a = base.clone();
        let (ma, sa) = magnitude_prune(&mut a, &prefixes, lo).unwrap();
        let mut b = base.clone();
        let (_, sb) = magnitude_prune(&mut b, &prefixes, hi).unwrap();
        prop_assert_eq!(sa.zeroed, (lo * sa.prunable as f64 - 1e-9).ceil().max(0.0) as usize);
        let (nz_a, n) = count_nonzero(&a, &prefixes);
        let (nz_b, _) = count_nonzero(&b, &prefixes);
        prop_assert_eq!(n, sa.prunable);
        prop_assert!(nz_b <= nz_a);
        prop_assert!(sb.zeroed >= sa.zeroed);
        // every kept weight is at least as large as every pruned one
        let mut kept_min = f64::INFINITY;
        let mut pruned_max: f64 = 0.0;
        for (id, mask) in &ma {
            for (v, keep) in base.get(*id).data().iter().zip(mask) {
                if *keep { kept_min = kept_min.min(v.abs()) } else { pruned_max = pruned_max.max(v.abs()) }
            }
        }
        prop_assert!(pruned_max <= kept_min);
    }

    #[test]
    fn config_round_trips(seed in any::<u64>(), k in 2usize..5000, batch in 1usize..64, v in 0usize..6) {
        let mut cfg = micro();
        cfg.global_seed = seed;
        cfg.variant = Variant::ALL[v];
        cfg.recon_topology = None;
        cfg.expansion_schedule.total_steps = k;
        cfg.expansion_schedule.phase_threshold = None;
        cfg.expansion_schedule.batch_size = batch;
        cfg.resolve();
        let text = cfg.to_toml();
        let back = ExperimentConfig::parse(&text, Path::new("round-trip.toml")).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.config_hash(), cfg.config_hash());
        prop_assert_eq!(back.expansion_schedule.tau(), k.div_ceil(2));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn stage_shapes_match_the_forward_pass(
        c0 in 1usize..3,
        steps in prop::collection::vec(1usize..3, 1..3),
        scale in 1usize..3,
    ) {
        let mut chans = vec![4 * c0];
        for s in &steps {
            let next = chans.last().unwrap() + 4 * s;
            chans.push(next);
        }
        let side = (4usize << chans.len()) * scale;
        let spec = SubBackboneSpec::toy(&chans, [3, side, side]);
        let (bb, store) = SubBackbone::standalone(&spec, 1).unwrap();
        let x = Tensor::full(&[2, 3, side, side], 0.25);
        let feats = bb.features(&store, Mode::Eval, &x).unwrap();
        let shapes = spec.stage_shapes().unwrap();
        prop_assert_eq!(feats.len(), shapes.len());
        for (f, (c, h, w)) in feats.iter().zip(shapes) {
            prop_assert_eq!(f.shape(), &[2, c, h, w][..]);
        }
        // spatial size halves stage to stage
        for pair in spec.stage_shapes().unwrap().windows(2) {
            prop_assert_eq!(pair[0].1, 2 * pair[1].1);
        }
    }

    #[test]
    fn fused_output_is_symmetric_under_task_relabelling(seed in 0u64..500, deep in any::<bool>()) {
        // Swapping the task order (and the matching inputs) permutes the fused
        // outputs the same way when both orders hold the same parameter values.
        let topo = if deep { Topology::DeepToShallow } else { Topology::ShallowToDeep };
        let spec = SubBackboneSpec::toy(&[4, 8], [3, 16, 16]);
        let ids = vec!["p".to_string(), "q".to_string()];
        let swapped = vec!["q".to_string(), "p".to_string()];
        let mut s1 = ParamStore::new();
        let e1 = build_reconciliation_graph(&ids, &[spec.clone(), spec.clone()], topo, &mut s1, seed, xlearner::backbone::WeightInit::Kaiming).unwrap();
        let mut s2 = ParamStore::new();
        let e2 = build_reconciliation_graph(&swapped, &[spec.clone(), spec], topo, &mut s2, seed, xlearner::backbone::WeightInit::Kaiming).unwrap();
        // make links non-trivial, identically by name in both stores
        let names: Vec<(String, ParamKind)> = s1.iter().map(|(_, e)| (e.name.clone(), e.kind)).collect();
        for (i, (name, kind)) in names.iter().enumerate() {
            if *kind == ParamKind::NormScale && name.starts_with("links.") {
                let v = 0.5 + ((seed as usize + i) % 7) as f64 / 7.0;
                for s in [&mut s1, &mut s2] {
                    let id = s.id(name).unwrap();
                    s.get_mut(id).data_mut().iter_mut().for_each(|x| *x = v);
                }
            }
        }
        for (name, _) in &names {
            let v = s1.get(s1.id(name).unwrap()).clone();
            let id = s2.id(name).unwrap();
            *s2.get_mut(id) = v;
        }
        let xa = Tensor::from_vec(&[2, 3, 16, 16], (0..1536).map(|i| ((i * 13 + seed as usize) % 29) as f64 / 29.0 - 0.5).collect()).unwrap();
        let xb = Tensor::from_vec(&[2, 3, 16, 16], (0..1536).map(|i| ((i * 7 + 3) % 31) as f64 / 31.0 - 0.5).collect()).unwrap();
        let mut g1 = Graph::new();
        let (a1, b1) = (g1.constant(xa.clone()), g1.constant(xb.clone()));
        let o1 = e1.fused_forward(&mut g1, &s1, Mode::Eval, &[a1, b1]).unwrap();
        let mut g2 = Graph::new();
        let (b2, a2) = (g2.constant(xb), g2.constant(xa));
        let o2 = e2.fused_forward(&mut g2, &s2, Mode::Eval, &[b2, a2]).unwrap();
        for i in 0..2 {
            prop_assert_eq!(g1.value(o1.fused[0][i]), g2.value(o2.fused[1][i]));
            prop_assert_eq!(g1.value(o1.fused[1][i]), g2.value(o2.fused[0][i]));
        }
    }
}
