use nestednet::consensus::{Consensus, LearnedConsensus, Segment, SegmentLayout};
use nestednet::data::batches;
use nestednet::nesting::{
    binarize, build_channel_schedule, compute_soft_mask, project, schedule_to_masks, validate_nesting, BinaryMask,
    NestingParams, NestingReport, StrategyRegistry, DEFAULT_CUTOFF, DEFAULT_GAMMA,
};
use nestednet::nn::{Architecture, NestedNetwork};
use nestednet::tensor::Tensor;
use nestednet::training::{lr_at, TrainConfig};
use proptest::prelude::*;

fn weights_and_mask() -> impl Strategy<Value = (Tensor<f64>, BinaryMask)> {
    (1usize..64).prop_flat_map(|n| {
        (
            prop::collection::vec(-2.0f64..2.0, n),
            prop::collection::vec(any::<bool>(), n),
        )
            .prop_map(move |(w, b)| (Tensor::new(vec![n], w).unwrap(), BinaryMask::new(vec![n], b).unwrap()))
    })
}

fn ascending_fractions() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::btree_set(1u32..20, 0..3).prop_map(|s| {
        let mut f: Vec<f64> = s.into_iter().map(|k| f64::from(k) / 20.0).collect();
        f.push(1.0);
        f
    })
}

proptest! {
    #[test]
    fn projection_is_idempotent_and_keeps_the_support((w, m) in weights_and_mask()) {
        let p = project(&w, &m).unwrap();
        prop_assert_eq!(&project(&p, &m).unwrap(), &p);
        for ((&a, &b), &keep) in w.data().iter().zip(p.data()).zip(m.bits()) {
            prop_assert_eq!(b, if keep { a } else { 0.0 });
        }
    }

    #[test]
    fn larger_threshold_never_admits_more(
        w in prop::collection::vec(-1.0f64..1.0, 1..64),
        a in 0.0f64..1.0,
        b in 0.0f64..1.0,
    ) {
        let (lo, hi) = (a.min(b), a.max(b));
        let w = Tensor::new(vec![w.len()], w).unwrap();
        let m_lo = binarize(&compute_soft_mask(&w, lo, DEFAULT_GAMMA), DEFAULT_CUTOFF);
        let m_hi = binarize(&compute_soft_mask(&w, hi, DEFAULT_GAMMA), DEFAULT_CUTOFF);
        prop_assert!(m_hi.is_subset_of(&m_lo));
    }

    #[test]
    fn soft_mask_is_zero_exactly_at_or_below_threshold(
        w in prop::collection::vec(-1.0f64..1.0, 1..64),
        tau in 0.0f64..1.0,
    ) {
        let t = Tensor::new(vec![w.len()], w.clone()).unwrap();
        let s = compute_soft_mask(&t, tau, DEFAULT_GAMMA);
        for (&x, &v) in w.iter().zip(s.data()) {
            prop_assert!((0.0..=1.0).contains(&v));
            prop_assert_eq!(v == 0.0, x.abs() <= tau);
        }
    }

    #[test]
    fn channel_schedules_nest(
        hidden in prop::collection::vec(20usize..64, 1..4),
        fractions in ascending_fractions(),
    ) {
        let arch = Architecture::mlp([1, 1, 5], &hidden, 3).unwrap();
        let s = build_channel_schedule(&arch, &fractions).unwrap();
        for (name, h) in schedule_to_masks(&s, &arch).unwrap() {
            prop_assert_eq!(validate_nesting(&h), NestingReport::Ok, "{}", name);
        }
    }

    #[test]
    fn density_grows_with_level(hidden in 20usize..48, fractions in ascending_fractions()) {
        let arch = Architecture::mlp([1, 1, 6], &[hidden, hidden], 4).unwrap();
        let s = StrategyRegistry::default()
            .create("channel", NestingParams { fractions: fractions.clone(), ..Default::default() })
            .unwrap();
        let net = NestedNetwork::<f32>::new(arch, s.as_ref(), 1).unwrap();
        let d: Vec<f64> = (1..=net.levels()).map(|k| net.density(k)).collect();
        prop_assert!(d.windows(2).all(|p| p[0] <= p[1]), "{:?}", d);
        prop_assert_eq!(*d.last().unwrap(), 1.0);
    }

    #[test]
    fn batches_partition_the_indices(len in 0usize..300, bs in 1usize..64, seed: u64, epoch in 0u64..100) {
        let b = batches(len, bs, seed, epoch);
        prop_assert!(b.iter().all(|x| !x.is_empty() && x.len() <= bs));
        prop_assert!(b.iter().rev().skip(1).all(|x| x.len() == bs));
        let mut all = b.concat();
        all.sort_unstable();
        prop_assert_eq!(all, (0..len).collect::<Vec<_>>());
    }

    #[test]
    fn lr_never_increases(a in 0usize..100_000, b in 0usize..100_000) {
        let cfg = TrainConfig::default();
        prop_assert!(lr_at(a.max(b), &cfg) <= lr_at(a.min(b), &cfg));
    }

    #[test]
    fn learned_consensus_starts_as_the_average(
        segs in 2usize..5,
        rows in prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 2..20),
    ) {
        let layout = SegmentLayout {
            segments: (0..segs).map(|i| Segment { name: format!("s{i}"), size: 3 }).collect(),
        };
        let head = LearnedConsensus::new(layout).unwrap();
        let n = rows.len();
        // segment i is row r scaled by i + 1, so the average scales by (segs + 1) / 2
        let inputs: Vec<Tensor<f64>> = (0..segs)
            .map(|i| {
                let data = rows.iter().flatten().map(|v| v * (i + 1) as f64).collect();
                Tensor::new(vec![n, 3], data).unwrap()
            })
            .collect();
        let y = head.forward(&inputs).unwrap();
        let scale = (segs + 1) as f64 / 2.0;
        for (got, want) in y.data().iter().zip(rows.iter().flatten()) {
            prop_assert!((got - want * scale).abs() < 1e-9);
        }
    }
}
