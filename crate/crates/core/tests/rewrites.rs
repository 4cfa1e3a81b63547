use pgp_core::ir::{
    emit_ir, load_weights, parse_ir, save_weights, to_base, to_dconv, to_dconv_pgp_form, to_pgp, weights_compatible,
    Model, NetworkIR,
};
use pgp_core::{AggregateMode, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_input(n: usize, net: &NetworkIR, seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = net.input;
    Tensor::from_fn(Shape::new(n, c, h, w), |_, _, _, _| rng.random_range(-1.0..1.0))
}

/// Random running statistics so evaluation-mode batch norm is not the identity.
fn perturb_stats(model: &mut Model<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in model.params.iter_mut().filter(|p| !p.trainable) {
        let var = p.name.ends_with("running_var");
        for v in p.value.data_mut() {
            *v = if var { rng.random_range(0.5..2.0) } else { rng.random_range(-0.3..0.3) };
        }
    }
}

fn nets() -> Vec<NetworkIR> {
    vec![
        NetworkIR::reference((3, 16, 16), 4).unwrap(),
        parse_ir(
            "input c=2 h=12 w=12\nconv out=6 k=3 s=1 p=1\nrelu\navgpool k=3 s=2 p=1\nconv out=8 k=5 s=3 p=2\nbn\nrelu\n\
             conv out=8 k=3 s=1 p=1\nrelu\ngap\nlinear out=3\n",
        )
        .unwrap(),
    ]
}

#[test]
fn dconv_equals_explicit_pgp_form() {
    for net in nets() {
        for seed in 0..3 {
            let mut base = Model::<f64>::init(net.clone(), seed).unwrap();
            perturb_stats(&mut base, seed);
            let x = random_input(3, &net, seed + 100);
            let d = base.clone().rewrite(to_dconv(&net).unwrap()).unwrap().predict(&x).unwrap();
            let c = base.clone().rewrite(to_dconv_pgp_form(&net).unwrap()).unwrap().predict(&x).unwrap();
            let p = base.rewrite(to_pgp(&net, AggregateMode::Logits).unwrap()).unwrap().predict(&x).unwrap();
            assert!(d.max_abs_diff(&c).unwrap() < 1e-6);
            // GAP and the linear head commute with the branch mean.
            assert!(d.max_abs_diff(&p).unwrap() < 1e-6);
        }
    }
}

#[test]
fn round_trips_and_counts() {
    for net in nets() {
        let p = to_pgp(&net, AggregateMode::Probs).unwrap();
        assert_eq!(to_base(&p).unwrap(), net);
        let count = net.param_count().unwrap();
        for v in [to_dconv(&net).unwrap(), p.clone(), to_dconv_pgp_form(&net).unwrap()] {
            assert_eq!(v.param_count().unwrap(), count);
            assert_eq!(parse_ir(&emit_ir(&v)).unwrap(), v);
            let (a, b) = (net.infer_shapes().unwrap(), v.infer_shapes().unwrap());
            assert_eq!(a[0], b[0]);
        }
        assert!(weights_compatible(&net, &p).compatible);
    }
}

#[test]
fn strict_transfer_base_to_pgp_and_back() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("base.pgpw");
    let net = NetworkIR::reference((3, 16, 16), 4).unwrap();
    let base = Model::<f32>::init(net.clone(), 11).unwrap();
    save_weights(&base.params, &path).unwrap();

    let mut pgp = Model::<f32>::init(to_pgp(&net, AggregateMode::Logits).unwrap(), 99).unwrap();
    let report = load_weights(&mut pgp.params, &path, true).unwrap();
    assert!(report.skipped.is_empty() && report.missing.is_empty());
    assert_eq!(report.loaded.len(), base.params.len());

    let back = pgp.rewrite(to_base(&to_pgp(&net, AggregateMode::Logits).unwrap()).unwrap()).unwrap();
    for (a, b) in base.params.iter().zip(back.params.iter()) {
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(a.value.data()), bits(b.value.data()), "{}", a.name);
    }
}

#[test]
fn identical_branches_keep_base_prediction() {
    // With pointwise convs a constant image gives identical PGP branches
    // (larger kernels see the zero border differently per branch).
    let net = parse_ir(
        "input c=3 h=16 w=16\nconv out=8 k=1 s=2 p=0\nbn\nrelu\nconv out=8 k=1 s=2 p=0\nbn\nrelu\ngap\nlinear out=4",
    )
    .unwrap();
    let mut base = Model::<f64>::init(net.clone(), 4).unwrap();
    perturb_stats(&mut base, 4);
    let x = Tensor::from_fn(Shape::new(2, 3, 16, 16), |b, c, _, _| 0.2 * b as f64 - 0.1 * c as f64);
    let pgp = base.clone().rewrite(to_pgp(&net, AggregateMode::Probs).unwrap()).unwrap();
    let a = base.predict_probs(&x).unwrap();
    let b = pgp.predict_probs(&x).unwrap();
    assert!(a.max_abs_diff(&b).unwrap() < 1e-12);
}
