//! Property suites behind `check-equiv` and `gradcheck`: PGP partitioning,
//! the strided-op factorization, the dilated-conv decomposition, rewrite
//! equivalence and gradient checks.

use anyhow::Result;
use pgp_core::dilated::{decomposition_report, DecompositionGrid, DecompositionReport};
use pgp_core::gradcheck::{network_gradcheck, op_suite, SuiteEntry};
use pgp_core::gridpool::{pgp_inverse, pgp_tensor, two_step_downsample, PoolTarget};
use pgp_core::ir::{to_base, to_dconv, to_dconv_pgp_form, to_pgp, Model, NetworkIR};
use pgp_core::ops::conv::{avgpool2d, conv2d, ConvSpec};
use pgp_core::{AggregateMode, Shape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

pub const DECOMPOSITION_TOL: f64 = 1e-6;
pub const REWRITE_TOL: f64 = 1e-6;
pub const GRADIENT_TOL: f64 = 1e-4;

#[derive(Debug, Clone, Serialize)]
pub struct PartitionCase {
    pub shape: [usize; 4],
    pub s: usize,
    pub round_trip_exact: bool,
    pub multiset_equal: bool,
}

fn bits_sorted(v: &[f64]) -> Vec<u64> {
    let mut b: Vec<u64> = v.iter().map(|x| x.to_bits()).collect();
    b.sort_unstable();
    b
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: Shape) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| rng.random_range(-1.0..1.0))
}

/// `cases` random tensors up to 2×8×16×16 with `s` ∈ {1, 2, 4}.
pub fn partition_suite(cases: usize, seed: u64) -> Result<Vec<PartitionCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cases);
    for _ in 0..cases {
        let s = [1, 2, 4][rng.random_range(0..3)];
        let b = rng.random_range(1..=2);
        let c = rng.random_range(1..=8);
        let h = s * rng.random_range(1..=16 / s);
        let w = s * rng.random_range(1..=16 / s);
        let x = random_tensor(&mut rng, Shape::new(b, c, h, w));
        let y = pgp_tensor(&x, s)?;
        let back = pgp_inverse(&y, s)?;
        out.push(PartitionCase {
            shape: [b, c, h, w],
            s,
            round_trip_exact: back.tensor.data().iter().zip(x.data()).all(|(a, b)| a.to_bits() == b.to_bits())
                && back.tensor.shape() == x.shape(),
            multiset_equal: bits_sorted(y.tensor.data()) == bits_sorted(x.data()),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct FactorizationCase {
    pub op: &'static str,
    pub shape: [usize; 4],
    pub k: usize,
    pub sigma: usize,
    pub padding: usize,
    pub max_abs_diff: f64,
    pub exact: bool,
}

/// Strided op against the stride-1 op followed by grid pooling at (0, 0), in
/// double precision; alternates conv and avgpool cases.
pub fn factorization_suite(cases: usize, seed: u64) -> Result<Vec<FactorizationCase>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cases);
    for n in 0..cases {
        let sigma = rng.random_range(2..=3);
        let k = [1, 3, 5][rng.random_range(0..3)];
        let padding = rng.random_range(0..=k / 2);
        let (b, c) = (rng.random_range(1..=2), rng.random_range(1..=3));
        let (h, w) = (rng.random_range(k.max(4)..=13), rng.random_range(k.max(4)..=13));
        let x = random_tensor(&mut rng, Shape::new(b, c, h, w));
        let (op, strided, two) = if n % 2 == 0 {
            let o = rng.random_range(1..=4);
            let wt = random_tensor(&mut rng, Shape::new(o, c, k, k));
            let bias = random_tensor(&mut rng, Shape::new(1, o, 1, 1));
            let spec = ConvSpec::new(c, o, k).padding(padding);
            let strided = conv2d(&x, &wt, Some(&bias), &spec.stride(sigma))?;
            let target = PoolTarget::Conv {
                weight: &wt,
                bias: Some(&bias),
                spec,
            };
            ("conv", strided, two_step_downsample(&x, target, sigma)?)
        } else {
            let strided = avgpool2d(&x, k, sigma, padding)?;
            let target = PoolTarget::AvgPool { kernel: k, padding };
            ("avgpool", strided, two_step_downsample(&x, target, sigma)?)
        };
        let same_shape = strided.shape() == two.shape();
        let max_abs_diff = if same_shape { strided.max_abs_diff(&two)? } else { f64::INFINITY };
        let exact = same_shape && strided.data().iter().zip(two.data()).all(|(a, b)| a.to_bits() == b.to_bits());
        out.push(FactorizationCase {
            op,
            shape: [b, c, h, w],
            k,
            sigma,
            padding,
            max_abs_diff,
            exact,
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct RewriteCase {
    pub net: String,
    pub seed: u64,
    /// DConv logits against the explicit PGP / PGP⁻¹ form.
    pub dconv_vs_pgp_form: f64,
    /// DConv logits against the PGP network with logit aggregation.
    pub dconv_vs_pgp: f64,
    pub round_trip_identity: bool,
    /// Trainable parameter counts of base, DConv and PGP.
    pub param_counts: [usize; 3],
}

impl RewriteCase {
    pub fn passed(&self) -> bool {
        self.dconv_vs_pgp_form < REWRITE_TOL
            && self.dconv_vs_pgp < REWRITE_TOL
            && self.round_trip_identity
            && self.param_counts.iter().all(|&c| c == self.param_counts[0])
    }
}

/// Networks exercised by the rewrite suite: the reference network and one
/// with an avgpool stride and a stride-3 conv.
pub fn rewrite_nets() -> Result<Vec<NetworkIR>> {
    Ok(vec![
        NetworkIR::reference((3, 16, 16), 4)?,
        pgp_core::ir::parse_ir(
            "input c=2 h=12 w=12 name=mixed\nconv out=6 k=3 s=1 p=1\nrelu\navgpool k=3 s=2 p=1\n\
             conv out=8 k=5 s=3 p=2\nbn\nrelu\nconv out=8 k=3 s=1 p=1\nrelu\ngap\nlinear out=3\n",
        )?,
    ])
}

/// Random weights, random running statistics and random inputs, in double
/// precision.
pub fn rewrite_suite(seeds: &[u64]) -> Result<Vec<RewriteCase>> {
    let mut out = Vec::new();
    for net in rewrite_nets()? {
        let dconv = to_dconv(&net)?;
        let form = to_dconv_pgp_form(&net)?;
        let pgp = to_pgp(&net, AggregateMode::Logits)?;
        for &seed in seeds {
            let mut base = Model::<f64>::init(net.clone(), seed)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
            for p in base.params.iter_mut().filter(|p| !p.trainable) {
                let var = p.name.ends_with("running_var");
                for v in p.value.data_mut() {
                    *v = if var { rng.random_range(0.5..2.0) } else { rng.random_range(-0.3..0.3) };
                }
            }
            let (c, h, w) = net.input;
            let x = random_tensor(&mut rng, Shape::new(3, c, h, w));
            let yd = base.clone().rewrite(dconv.clone())?.predict(&x)?;
            let yf = base.clone().rewrite(form.clone())?.predict(&x)?;
            let yp = base.clone().rewrite(pgp.clone())?.predict(&x)?;
            out.push(RewriteCase {
                net: net.name.clone(),
                seed,
                dconv_vs_pgp_form: yd.max_abs_diff(&yf)?,
                dconv_vs_pgp: yd.max_abs_diff(&yp)?,
                round_trip_identity: to_base(&pgp)? == net,
                param_counts: [net.param_count()?, dconv.param_count()?, pgp.param_count()?],
            });
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct EquivReport {
    pub partition: Vec<PartitionCase>,
    pub factorization: Vec<FactorizationCase>,
    pub decomposition: DecompositionReport,
    pub decomposition_max_rel_dev: f64,
    pub rewrites: Vec<RewriteCase>,
    pub failures: Vec<String>,
    pub passed: bool,
}

/// All equivalence suites; `seeds` sets the decomposition and rewrite seeds.
pub fn check_equiv(seeds: usize) -> Result<EquivReport> {
    let seed_list: Vec<u64> = (0..seeds as u64).collect();
    let partition = partition_suite(50, 0)?;
    let factorization = factorization_suite(20, 0)?;
    let grid = DecompositionGrid {
        seeds: seed_list.clone(),
        ..Default::default()
    };
    let decomposition = decomposition_report::<f32>(&grid)?;
    let rewrites = rewrite_suite(&seed_list)?;

    let mut failures = Vec::new();
    for c in &partition {
        if !(c.round_trip_exact && c.multiset_equal) {
            failures.push(format!("partition {:?} s={}", c.shape, c.s));
        }
    }
    for c in &factorization {
        if !c.exact {
            failures.push(format!("factorization {} {:?} k={} σ={}: {:e}", c.op, c.shape, c.k, c.sigma, c.max_abs_diff));
        }
    }
    let decomposition_max_rel_dev = decomposition.max_rel_dev();
    if !(decomposition_max_rel_dev < DECOMPOSITION_TOL) {
        failures.push(format!("decomposition max relative deviation {decomposition_max_rel_dev:e}"));
    }
    for c in &rewrites {
        if !c.passed() {
            failures.push(format!("rewrite {} seed {}", c.net, c.seed));
        }
    }
    Ok(EquivReport {
        passed: failures.is_empty(),
        partition,
        factorization,
        decomposition,
        decomposition_max_rel_dev,
        rewrites,
        failures,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct GradReport {
    pub ops: Vec<SuiteEntry>,
    pub networks: Vec<SuiteEntry>,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Every differentiable op plus the reference network in all three forms,
/// for each seed.
pub fn gradient_suite(seeds: &[u64]) -> Result<GradReport> {
    let base = NetworkIR::reference((3, 16, 16), 4)?;
    let nets = [
        ("base", base.clone()),
        ("dconv", to_dconv(&base)?),
        ("pgp", to_pgp(&base, AggregateMode::Logits)?),
    ];
    let mut ops = Vec::new();
    let mut networks = Vec::new();
    for &seed in seeds {
        ops.extend(op_suite(seed)?);
        for (variant, net) in &nets {
            let mut e = network_gradcheck(net, seed, 2, 6)?;
            e.name = format!("{}:{variant}", e.name);
            networks.push(e);
        }
    }
    let max_rel_err = ops.iter().chain(&networks).map(|e| e.max_rel_err).fold(0.0, f64::max);
    Ok(GradReport {
        passed: max_rel_err < GRADIENT_TOL,
        ops,
        networks,
        max_rel_err,
        tolerance: GRADIENT_TOL,
    })
}
