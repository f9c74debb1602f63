use pcd::cli::parse_seeds;
use pcd::textconfig::ExperimentConfig;
use proptest::prelude::*;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    // Any float the writer emits must come back bit-identical.
    #[test]
    fn config_text_round_trips(
        lr in 1e-6f64..1.0,
        temp in 0.1f64..20.0,
        radius in 0.05f64..10.0,
        voxel in 0.05f64..2.0,
        seed in any::<u32>(),
        epochs in 1usize..500,
        car_w in 1.0f64..3.0,
    ) {
        let mut cfg = ExperimentConfig::toy();
        cfg.train.lr = lr;
        cfg.pipeline.temperature = temp;
        cfg.pipeline.partial_radius = radius;
        cfg.pipeline.voxel_size = [voxel, voxel * 1.5, voxel];
        cfg.pipeline.seed = seed as u64;
        cfg.train.epochs = epochs;
        cfg.data.classes[0].w = (car_w, car_w + 0.25);
        let text = cfg.to_text();
        let back = ExperimentConfig::parse(&text).unwrap();
        prop_assert_eq!(&back, &cfg);
        prop_assert_eq!(back.to_text(), text);
    }

    #[test]
    fn seed_ranges_expand_in_order(start in 0u64..10_000, len in 0u64..50, extra in 20_000u64..30_000) {
        let s = format!("{start}-{},{extra}", start + len);
        let seeds = parse_seeds(&s).unwrap();
        let mut want: Vec<u64> = (start..=start + len).collect();
        want.push(extra);
        prop_assert_eq!(seeds, want);
    }
}
