use std::thread;

use proptest::prelude::*;
use tedsim_core::tensor::Partition;
use tedsim_core::{CollectiveOp, Fabric, GroupKind, Phase, RankId, StorageWidth, Tensor};

const W: StorageWidth = StorageWidth::Wide;

/// Runs `f` on every rank of a world of `n` and returns the results in rank order.
fn on_all<T: Send>(n: usize, f: impl Fn(&Fabric, &tedsim_core::Group, RankId) -> T + Sync) -> (Vec<T>, Fabric) {
    let fabric = Fabric::new(n).unwrap();
    let ranks: Vec<RankId> = fabric.ranks().collect();
    let group = fabric.new_group(&ranks, GroupKind::Tensor).unwrap();
    let out = thread::scope(|s| {
        let handles: Vec<_> = ranks
            .iter()
            .map(|&r| {
                let (fabric, group, f) = (&fabric, &group, &f);
                s.spawn(move || f(fabric, group, r))
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    (out, fabric)
}

fn buffers(n: usize, len: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-1e3f64..1e3, len), n)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn all_reduce_is_the_sequential_sum((n, bufs) in (1usize..6, 0usize..9).prop_flat_map(|(n, len)| (Just(n), buffers(n, len)))) {
        let (outs, fabric) = on_all(n, |f, g, r| f.all_reduce(g, r, &bufs[r.0], W, Phase::Forward).unwrap());
        let mut expected = bufs[0].clone();
        for b in &bufs[1..] {
            for (e, v) in expected.iter_mut().zip(b) {
                *e += v;
            }
        }
        for o in &outs {
            prop_assert_eq!(o, &expected);
        }
        let entry = fabric.ledger().op_total(CollectiveOp::AllReduce);
        prop_assert_eq!(entry.calls, 1);
        prop_assert_eq!(entry.payload_bytes, (n * bufs[0].len()) as u64 * W.bytes());
    }

    #[test]
    fn all_to_all_twice_restores_segments(n in 1usize..6, lens in prop::collection::vec(0usize..4, 36), seed in any::<u32>()) {
        let send = |r: usize| -> Vec<Vec<f64>> {
            (0..n).map(|j| (0..lens[r * 6 + j]).map(|k| (seed as f64) + (r * 100 + j * 10 + k) as f64).collect()).collect()
        };
        let (outs, _) = on_all(n, |f, g, r| {
            let recv = f.all_to_all_v(g, r, send(r.0), W, Phase::Forward).unwrap();
            f.all_to_all_v(g, r, recv, W, Phase::Backward).unwrap()
        });
        for (r, o) in outs.iter().enumerate() {
            prop_assert_eq!(o, &send(r));
        }
    }

    #[test]
    fn gather_of_slices_is_the_full_tensor(n in 1usize..5, rows in 1usize..4, width in 1usize..4, seed in any::<u16>()) {
        let cols = n * width;
        let data: Vec<f64> = (0..rows * cols).map(|i| (i as f64) * 0.5 + seed as f64).collect();
        let full = Tensor::matrix(rows, cols, data, W).unwrap();
        let (outs, _) = on_all(n, |f, g, r| {
            let shard = Partition::Column { shard: r.0, of: n }.slice(&full).unwrap();
            let transposed: Vec<f64> = (0..width).flat_map(|c| (0..rows).map(move |i| (i, c))).map(|(i, c)| shard.row(i)[c]).collect();
            f.all_gather(g, r, &transposed, W, Phase::Forward).unwrap()
        });
        let expected: Vec<f64> = (0..cols).flat_map(|c| (0..rows).map(move |i| (i, c))).map(|(i, c)| full.row(i)[c]).collect();
        for o in &outs {
            prop_assert_eq!(o, &expected);
        }
    }

    #[test]
    fn all_gather_v_keeps_member_order(lens in prop::collection::vec(0usize..5, 1..6)) {
        let n = lens.len();
        let (outs, fabric) = on_all(n, |f, g, r| {
            let local: Vec<f64> = (0..lens[r.0]).map(|k| (r.0 * 10 + k) as f64).collect();
            f.all_gather_v(g, r, &local, W, Phase::Forward).unwrap()
        });
        for o in &outs {
            for (j, chunk) in o.iter().enumerate() {
                prop_assert_eq!(chunk.len(), lens[j]);
                prop_assert!(chunk.iter().enumerate().all(|(k, v)| *v == (j * 10 + k) as f64));
            }
        }
        let entry = fabric.ledger().op_total(CollectiveOp::AllGather);
        prop_assert_eq!(entry.payload_bytes, lens.iter().sum::<usize>() as u64 * W.bytes());
    }
}
