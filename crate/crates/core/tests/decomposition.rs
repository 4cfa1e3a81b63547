use pgp_core::dilated::{
    decomposition_report, dilated_chain_direct, dilated_chain_via_pgp, dilated_conv2d, dilated_via_pgp,
    DecompositionGrid,
};
use pgp_core::ops::conv::ConvSpec;
use pgp_core::{Shape, Tensor};
use proptest::prelude::*;

fn rand_tensor(shape: Shape, seed: u64) -> Tensor<f64> {
    let mut state = seed | 1;
    Tensor::from_fn(shape, |_, _, _, _| {
        state ^= state << 13;
        state ^= state >> 7;
        state ^= state << 17;
        (state % 2001) as f64 / 1000.0 - 1.0
    })
}

#[test]
fn single_precision_grid() {
    let report = decomposition_report::<f32>(&DecompositionGrid::default()).unwrap();
    assert_eq!(report.rows.len(), 27);
    assert_eq!(report.chains.len(), 9);
    println!("max rel dev {:e}", report.max_rel_dev());
    assert!(report.max_rel_dev() < 1e-6, "{:?}", report);
}

#[test]
fn double_precision_grid() {
    let report = decomposition_report::<f64>(&DecompositionGrid::default()).unwrap();
    assert!(report.max_rel_dev() < 1e-12, "{:?}", report);
}

#[test]
fn report_rows_serialize_flat() {
    let grid = DecompositionGrid {
        sizes: vec![4],
        rates: vec![2],
        seeds: vec![0],
        chains: vec![],
        ..Default::default()
    };
    let report = decomposition_report::<f32>(&grid).unwrap();
    let json = serde_json::to_value(&report.rows).unwrap();
    let row = &json.as_array().unwrap()[0];
    let mut keys: Vec<_> = row.as_object().unwrap().keys().cloned().collect();
    keys.sort();
    assert_eq!(keys, ["h", "max_abs_dev", "max_rel_dev", "r", "seed", "w"]);
}

#[test]
fn four_dilated_layers_share_one_pgp_level() {
    // Rates [4, 4, 4]: a single PGP with s = 4, three shared convs, one inverse.
    let x = rand_tensor(Shape::new(1, 2, 16, 16), 9);
    let ws: Vec<_> = (0..3).map(|i| rand_tensor(Shape::new(2, 2, 3, 3), 20 + i)).collect();
    let layers: Vec<_> = ws.iter().map(|w| (w, None, 4)).collect();
    let a = dilated_chain_direct(&x, &layers).unwrap();
    let b = dilated_chain_via_pgp(&x, &layers).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn decomposition_matches_direct(
        r in prop::sample::select(vec![1usize, 2, 3, 4]),
        m in 1usize..=4,
        c in 1usize..=3,
        o in 1usize..=3,
        k in prop::sample::select(vec![1usize, 3, 5]),
        seed in any::<u64>(),
    ) {
        let h = r * m;
        let x = rand_tensor(Shape::new(2, c, h, h + r), seed);
        let w = rand_tensor(Shape::new(o, c, k, k), seed ^ 7);
        let b = rand_tensor(Shape::new(1, o, 1, 1), seed ^ 9);
        let spec = ConvSpec::new(c, o, k).dilation(r).same_padding();
        let direct = dilated_conv2d(&x, &w, Some(&b), &spec).unwrap();
        let via = dilated_via_pgp(&x, &w, Some(&b), r).unwrap();
        prop_assert!(direct.max_abs_diff(&via).unwrap() < 1e-12);
    }
}
