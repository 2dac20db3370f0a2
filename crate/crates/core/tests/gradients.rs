use tedsim_core::moe::{serial_reference_step, ParallelTrainer, TrainSetup};
use tedsim_core::tensor::{
    column_parallel_backward, column_parallel_forward, gelu_backward, gelu_forward, linear_backward, linear_forward,
    row_parallel_backward, row_parallel_forward, LocalReduce, Partition,
};
use tedsim_core::{derive_config, ExecFlags, MoeModelConfig, StorageWidth, Tensor};

const W: StorageWidth = StorageWidth::Wide;
const EPS: f64 = 1e-6;

fn mat(r: usize, c: usize, salt: f64) -> Tensor {
    let data = (0..r * c).map(|i| ((i as f64 + salt) * 0.37).sin()).collect();
    Tensor::matrix(r, c, data, W).unwrap()
}

/// Central difference of `f` with respect to every element of `t`.
fn numeric(t: &Tensor, f: impl Fn(&Tensor) -> f64) -> Vec<f64> {
    (0..t.len())
        .map(|i| {
            let mut p = t.clone();
            p.data_mut()[i] += EPS;
            let mut m = t.clone();
            m.data_mut()[i] -= EPS;
            (f(&p) - f(&m)) / (2.0 * EPS)
        })
        .collect()
}

fn assert_close(a: &[f64], b: &[f64], tol: f64) {
    assert_eq!(a.len(), b.len());
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() < tol, "element {i}: {x} vs {y}");
    }
}

/// Weighted sum so the upstream gradient is not uniform.
fn probe(y: &Tensor, upstream: &Tensor) -> f64 {
    y.data().iter().zip(upstream.data()).map(|(a, b)| a * b).sum()
}

#[test]
fn linear_gradients() {
    let (x, w, b) = (mat(3, 4, 0.0), mat(4, 5, 1.0), mat(1, 5, 2.0));
    let up = mat(3, 5, 3.0);
    let g = linear_backward(&x, &w, &up).unwrap();
    assert_close(g.dx.data(), &numeric(&x, |x| probe(&linear_forward(x, &w, Some(&b)).unwrap(), &up)), 1e-8);
    assert_close(g.dw.data(), &numeric(&w, |w| probe(&linear_forward(&x, w, Some(&b)).unwrap(), &up)), 1e-8);
    assert_close(g.db.data(), &numeric(&b, |b| probe(&linear_forward(&x, &w, Some(b)).unwrap(), &up)), 1e-8);
}

#[test]
fn gelu_gradient() {
    let x = mat(4, 6, 5.0).scaled(3.0);
    let up = mat(4, 6, 6.0);
    let dx = gelu_backward(&x, &up).unwrap();
    assert_close(dx.data(), &numeric(&x, |x| probe(&gelu_forward(x), &up)), 1e-8);
}

#[test]
fn sharded_linears_match_the_full_layer() {
    let (x, w) = (mat(3, 4, 0.0), mat(4, 6, 1.0));
    let full = linear_forward(&x, &w, None).unwrap();
    let up = mat(3, 6, 2.0);
    let full_grad = linear_backward(&x, &w, &up).unwrap();
    for t in [2, 3] {
        // Column shards produce column slices of the output.
        let mut dw_cols = Vec::new();
        for s in 0..t {
            let part = Partition::Column { shard: s, of: t };
            let ws = part.slice(&w).unwrap();
            let y = column_parallel_forward(&x, &ws, None).unwrap();
            assert_close(y.data(), part.slice(&full).unwrap().data(), 1e-12);
            let g = column_parallel_backward(&mut LocalReduce, &x, &ws, &part.slice(&up).unwrap()).unwrap();
            dw_cols.push(g.dw);
        }
        for (s, dw) in dw_cols.iter().enumerate() {
            let part = Partition::Column { shard: s, of: t };
            assert_close(dw.data(), part.slice(&full_grad.dw).unwrap().data(), 1e-12);
        }
    }
    // Row shards: partial products sum to the full output.
    let t = 2;
    let mut sum = Tensor::zeros(vec![3, 6], W);
    for s in 0..t {
        let xs = Partition::Column { shard: s, of: t }.slice(&x).unwrap();
        let ws = Partition::Row { shard: s, of: t }.slice(&w).unwrap();
        sum.add_assign(&row_parallel_forward(&mut LocalReduce, &xs, &ws, None).unwrap()).unwrap();
        let g = row_parallel_backward(&xs, &ws, &up).unwrap();
        let dw_full = Partition::Row { shard: s, of: t }.slice(&full_grad.dw).unwrap();
        assert_close(g.dw.data(), dw_full.data(), 1e-12);
    }
    assert_close(sum.data(), full.data(), 1e-12);
}

fn model() -> MoeModelConfig {
    MoeModelConfig {
        layers: 2,
        hidden: 8,
        experts: 2,
        tokens_per_shard: 8,
        seed: 11,
    }
}

#[test]
fn parallel_layers_match_serial_for_tensor_degrees_two_and_four() {
    for (g, t, e) in [(4, 2, 2), (8, 4, 2), (8, 2, 4), (4, 4, 1)] {
        let ted = derive_config(g, t, e).unwrap();
        let mut m = model();
        m.experts = e;
        for flags in ExecFlags::all_combinations() {
            let mut trainer = ParallelTrainer::new(TrainSetup::new(m, ted, flags)).unwrap();
            let batch = trainer.next_batch().unwrap();
            let out = trainer.step().unwrap();
            let serial = serial_reference_step(&m, &batch).unwrap();
            assert!((out.loss - serial.loss).abs() < 1e-12, "{g}/{t}/{e} {flags:?}");
            let diff = out.max_grad_diff(&serial).unwrap();
            assert!(diff < 1e-12, "{g}/{t}/{e} {flags:?}: {diff}");
        }
    }
}
