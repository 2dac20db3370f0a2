use proptest::prelude::*;
use tedsim_core::zero::{optimizer_step_tiled, shard_ranges, AdamWConfig, OptimizerShard, TileConfig, UPCAST_BYTES};
use tedsim_core::RankId;

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn shards_partition_the_range(total in 0usize..200, parts in 1usize..17) {
        let ranges = shard_ranges(total, parts).unwrap();
        prop_assert_eq!(ranges.len(), parts);
        let mut next = 0;
        for r in &ranges {
            prop_assert_eq!(r.start, next);
            next = r.end;
        }
        prop_assert_eq!(next, total);
        let (lo, hi) = ranges.iter().fold((usize::MAX, 0), |(lo, hi), r| (lo.min(r.len()), hi.max(r.len())));
        prop_assert!(hi - lo <= 1);
    }

    #[test]
    fn tiled_updates_are_bitwise_untiled(len in 1usize..120, ts in 1usize..150, steps in 1usize..4, seed in any::<u16>()) {
        let params: Vec<f64> = (0..len).map(|i| ((i + seed as usize) as f64 * 0.13).cos()).collect();
        let grads: Vec<f64> = (0..len).map(|i| ((i * 7 + seed as usize) as f64 * 0.29).sin() * 1e-2).collect();
        let hyper = AdamWConfig::default();
        let run = |tile: TileConfig| {
            let mut s = OptimizerShard::new(RankId(0), 0..len, &params).unwrap();
            let mut last = None;
            for _ in 0..steps {
                last = Some(optimizer_step_tiled(&mut s, &grads, &tile, &hyper).unwrap());
            }
            last.unwrap()
        };
        let (reference, _) = run(TileConfig::untiled());
        let (tiled, stats) = run(TileConfig::tiled(ts));
        prop_assert!(reference.iter().zip(&tiled).all(|(a, b)| a.to_bits() == b.to_bits()));
        prop_assert_eq!(stats.peak_upcast_bytes, UPCAST_BYTES * ts.min(len) as u64);
        prop_assert_eq!(stats.tiles, len.div_ceil(ts));
    }
}
