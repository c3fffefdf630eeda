use nestednet::nesting::{NestingParams, StrategyRegistry};
use nestednet::nn::{Architecture, NestedNetwork};

fn params(depth: usize, widen: usize) -> usize {
    let arch = Architecture::wide_resnet(depth, widen, 100).unwrap();
    let s = StrategyRegistry::default()
        .create(
            "channel",
            NestingParams {
                fractions: vec![1.0],
                ..Default::default()
            },
        )
        .unwrap();
    NestedNetwork::<f32>::new(arch, s.as_ref(), 0).unwrap().param_count(1)
}

// Reference CIFAR-100 sizes, rounded to two figures; ours sit within 4%.
#[test]
fn wide_resnet_sizes_match_published_counts() {
    for (depth, widen, published) in [
        (32, 4, 7.4e6),
        (14, 4, 2.7e6),
        (32, 1, 0.47e6),
        (14, 1, 0.18e6),
        (14, 8, 10.8e6),
        (32, 2, 1.8e6),
    ] {
        let n = params(depth, widen) as f64;
        let rel = (n - published) / published;
        assert!(rel.abs() < 0.04, "WRN-{depth}-{widen}: {n} vs {published}");
    }
}

#[test]
fn channel_fraction_quarter_of_wrn_32_4_is_wrn_32_1() {
    let arch = Architecture::wide_resnet(32, 4, 100).unwrap();
    let s = StrategyRegistry::default()
        .create(
            "channel",
            NestingParams {
                fractions: vec![0.25, 1.0],
                ..Default::default()
            },
        )
        .unwrap();
    let net = NestedNetwork::<f32>::new(arch, s.as_ref(), 0).unwrap();
    assert_eq!(net.param_count(2), params(32, 4));
    let core = net.param_count(1) as f64;
    let wrn_32_1 = params(32, 1) as f64;
    assert!((core - wrn_32_1).abs() / wrn_32_1 < 0.05, "{core} vs {wrn_32_1}");
}
