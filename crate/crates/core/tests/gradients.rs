use pgp_core::gradcheck::{network_gradcheck, op_suite};
use pgp_core::ir::{to_dconv, to_pgp, NetworkIR};
use pgp_core::AggregateMode;

#[test]
fn every_op_passes_gradcheck() {
    for seed in 0..5 {
        for e in op_suite(seed).unwrap() {
            assert!(e.checked > 0, "{}", e.name);
            assert!(e.max_rel_err < 1e-4, "{} seed {seed}: {:e} at {:?}", e.name, e.max_rel_err, e.worst);
        }
    }
}

#[test]
fn reference_network_gradients() {
    let base = NetworkIR::reference((3, 8, 8), 4).unwrap();
    let nets = [
        base.clone(),
        to_dconv(&base).unwrap(),
        to_pgp(&base, AggregateMode::Logits).unwrap(),
    ];
    for (net, seed) in nets.iter().flat_map(|n| (0..5).map(move |s| (n, s))) {
        let e = network_gradcheck(net, seed, 2, 8).unwrap();
        println!("{} {:e} {:?} refined {}", e.name, e.max_rel_err, e.worst, e.refined);
        assert!(e.max_rel_err < 1e-4, "{e:?}");
    }
}
