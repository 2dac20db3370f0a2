use proptest::prelude::*;
use tedsim_core::moe::{drop_tokens, token_roundtrip_check};
use tedsim_core::{derive_config, ExecFlags, StorageWidth, Tensor};

const W: StorageWidth = StorageWidth::Wide;

fn topology() -> impl Strategy<Value = (usize, usize, usize)> {
    // (T, E, replicas): G = T·E·replicas
    (prop::sample::select(vec![1usize, 2, 4]), prop::sample::select(vec![1usize, 2, 4]), 1usize..3)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn concatenated_drops_are_the_input(degree in 1usize..5, per in 1usize..4, cols in 1usize..4) {
        let rows = degree * per;
        let x = Tensor::matrix(rows, cols, (0..rows * cols).map(|v| v as f64).collect(), W).unwrap();
        let parts: Vec<Tensor> = (0..degree).map(|s| drop_tokens(&x, s, degree).unwrap()).collect();
        prop_assert!(parts.iter().all(|p| p.rows() == per));
        prop_assert_eq!(Tensor::concat_rows(&parts, cols, W).unwrap(), x);
    }

    #[test]
    fn tokens_are_conserved_and_return_home((t, e, d) in topology(), per in 1usize..4, seed in any::<u64>(), dtd in any::<bool>()) {
        let ted = derive_config(t * e * d, t, e).unwrap();
        let flags = ExecFlags::new(dtd, false, false);
        let report = token_roundtrip_check(&ted, t * per, seed, &flags).unwrap();
        prop_assert!(report.passed(), "{:?}", report.failures);
        prop_assert!(report.conserved && report.returned_in_place);
    }
}

#[test]
fn corrupted_drop_order_is_caught() {
    let ted = derive_config(4, 2, 2).unwrap();
    let mut flags = ExecFlags::new(true, false, false);
    flags.corrupt_drop_order = true;
    let report = token_roundtrip_check(&ted, 4, 3, &flags).unwrap();
    assert!(!report.passed());
}
