//! Central-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::error::Result;
use crate::gridpool::GridCoord;
use crate::ir::{Mode, Model, NetworkIR};
use crate::ops::conv::{ConvSpec, Window};
use crate::ops::nn::BnMode;
use crate::param::{ParamStore, Parameter};
use crate::tape::{Tape, Var};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy)]
pub struct GradcheckOptions {
    /// Perturbation `eps` in `(f(θ+eps) − f(θ−eps)) / (2·eps)`.
    pub eps: f64,
    /// Denominator floor for the relative error, so entries whose true
    /// gradient is zero are judged by absolute error instead.
    pub floor: f64,
    /// Check at most this many randomly chosen entries per parameter.
    pub max_per_param: Option<usize>,
    /// How many times the step may be shrunk when successive estimates disagree.
    pub refinements: usize,
    pub seed: u64,
}

impl Default for GradcheckOptions {
    fn default() -> Self {
        GradcheckOptions {
            eps: 1e-4,
            floor: 1e-7,
            max_per_param: None,
            refinements: 0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    /// Entries whose estimate needed a smaller step.
    pub refined: usize,
    /// `name[index]` of the entry with the largest relative error.
    pub worst: Option<String>,
}

/// Compares tape gradients of a scalar function against central differences.
///
/// `f` builds the forward pass on the given tape from the parameters in
/// `store`; every trainable parameter is checked. Gradients in `store` are
/// overwritten with the analytic values.
pub fn gradcheck<F>(mut f: F, store: &mut ParamStore<f64>, opts: GradcheckOptions) -> Result<GradcheckReport>
where
    F: FnMut(&mut Tape<f64>, &ParamStore<f64>) -> Result<Var>,
{
    store.zero_grad();
    let mut tape = Tape::new();
    let loss = f(&mut tape, store)?;
    tape.backward(loss, store)?;

    let mut eval = |store: &ParamStore<f64>| -> Result<f64> {
        let mut tape = Tape::inference();
        let loss = f(&mut tape, store)?;
        Ok(tape.value(loss)?.data()[0])
    };

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradcheckReport {
        max_rel_err: 0.0,
        max_abs_err: 0.0,
        checked: 0,
        refined: 0,
        worst: None,
    };
    let names: Vec<String> = store.iter().filter(|p| p.trainable).map(|p| p.name.clone()).collect();
    for name in names {
        let id = store.id(&name)?;
        let n = store.get(id).numel();
        let indices: Vec<usize> = match opts.max_per_param {
            Some(k) if k < n => sample(&mut rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        for i in indices {
            let analytic = store.get(id).grad[i];
            let orig = store.get(id).value.data()[i];
            // Returns the estimate and its rounding-noise level.
            let mut central = |eps: f64| -> Result<(f64, f64)> {
                store.get_mut(id).value.data_mut()[i] = orig + eps;
                let plus = eval(store)?;
                store.get_mut(id).value.data_mut()[i] = orig - eps;
                let minus = eval(store)?;
                store.get_mut(id).value.data_mut()[i] = orig;
                let noise = 4.0 * f64::EPSILON * plus.abs().max(minus.abs()) / eps;
                Ok(((plus - minus) / (2.0 * eps), noise))
            };
            // A kink (e.g. ReLU at zero) inside the perturbation interval makes
            // successive step sizes disagree; shrink until two agree.
            let mut eps = opts.eps;
            let (mut numeric, _) = central(eps)?;
            for _ in 0..opts.refinements {
                eps /= 8.0;
                let (finer, noise) = central(eps)?;
                let scale = finer.abs().max(numeric.abs());
                let settled = scale < opts.floor || (finer - numeric).abs() <= 1e-5 * scale + noise;
                if settled {
                    break;
                }
                numeric = finer;
                report.refined += 1;
            }

            let abs = (analytic - numeric).abs();
            let rel = abs / analytic.abs().max(numeric.abs()).max(opts.floor);
            report.checked += 1;
            report.max_abs_err = report.max_abs_err.max(abs);
            if rel > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(rel);
                report.worst = Some(format!("{name}[{i}]"));
            }
        }
    }
    Ok(report)
}

/// Result of one entry of [`op_suite`] or [`network_gradcheck`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub name: String,
    pub seed: u64,
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub checked: usize,
    pub refined: usize,
    pub worst: Option<String>,
}

impl SuiteEntry {
    fn new(name: &str, seed: u64, r: GradcheckReport) -> Self {
        SuiteEntry {
            name: name.to_string(),
            seed,
            max_rel_err: r.max_rel_err,
            max_abs_err: r.max_abs_err,
            checked: r.checked,
            refined: r.refined,
            worst: r.worst,
        }
    }
}

/// Values in `±[0.1, 1]`, kept away from the ReLU kink.
fn away_from_zero(shape: Shape, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, _, _, _| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

fn store_of(rng: &mut ChaCha8Rng, entries: &[(&str, Shape)]) -> ParamStore<f64> {
    let mut store = ParamStore::new();
    for &(name, shape) in entries {
        let t = away_from_zero(shape, rng);
        let dims = vec![shape.b, shape.c, shape.h, shape.w];
        store.insert(Parameter::new(name, t, dims, true).expect("dims match")).expect("unique");
    }
    store
}

/// Projects a tensor-valued result onto a scalar with fixed random weights.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let n = tape.value(y)?.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let w = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    tape.weighted_sum(y, w)
}

type Build = fn(&mut Tape<f64>, &ParamStore<f64>, u64) -> Result<Var>;

fn p(tape: &mut Tape<f64>, store: &ParamStore<f64>, name: &str) -> Result<Var> {
    tape.param_by_name(store, name)
}

fn conv_case(tape: &mut Tape<f64>, store: &ParamStore<f64>, seed: u64, spec: ConvSpec) -> Result<Var> {
    let (x, w, b) = (p(tape, store, "x")?, p(tape, store, "w")?, p(tape, store, "b")?);
    let y = tape.conv2d(x, w, Some(b), &spec)?;
    project(tape, y, seed)
}

/// Gradient checks of every differentiable tape operation in double precision.
pub fn op_suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let s = Shape::new;
    let conv_params = |c: usize, o: usize, hw: usize| vec![("x", s(2, c, hw, hw)), ("w", s(o, c, 3, 3)), ("b", s(1, o, 1, 1))];
    let cases: Vec<(&str, Vec<(&str, Shape)>, Build)> = vec![
        ("conv2d", conv_params(3, 4, 5), |t, st, sd| conv_case(t, st, sd, ConvSpec::new(3, 4, 3).padding(1))),
        ("conv2d_stride2", conv_params(3, 4, 6), |t, st, sd| {
            conv_case(t, st, sd, ConvSpec::new(3, 4, 3).stride(2).padding(1))
        }),
        ("conv2d_dilated", conv_params(3, 4, 6), |t, st, sd| {
            conv_case(t, st, sd, ConvSpec::new(3, 4, 3).dilation(2).padding(2))
        }),
        ("conv2d_stride2_dilated", conv_params(2, 3, 7), |t, st, sd| {
            conv_case(t, st, sd, ConvSpec::new(2, 3, 3).stride(2).dilation(2))
        }),
        ("avgpool2d", vec![("x", s(2, 3, 6, 6))], |t, st, sd| {
            let x = p(t, st, "x")?;
            let y = t.avgpool2d(x, Window::new(3, 2, 1, 1))?;
            project(t, y, sd)
        }),
        ("avgpool2d_dilated", vec![("x", s(2, 2, 6, 6))], |t, st, sd| {
            let x = p(t, st, "x")?;
            let y = t.avgpool2d(x, Window::new(3, 1, 2, 2))?;
            project(t, y, sd)
        }),
        ("relu", vec![("x", s(2, 3, 4, 4))], |t, st, sd| {
            let x = p(t, st, "x")?;
            let y = t.relu(x)?;
            project(t, y, sd)
        }),
        ("batch_norm_train", vec![("x", s(3, 2, 3, 3)), ("g", s(1, 2, 1, 1)), ("b", s(1, 2, 1, 1))], |t, st, sd| {
            let (x, g, b) = (p(t, st, "x")?, p(t, st, "g")?, p(t, st, "b")?);
            let (y, _) = t.batch_norm(x, g, b, BnMode::Train)?;
            project(t, y, sd)
        }),
        ("batch_norm_eval", vec![("x", s(3, 2, 3, 3)), ("g", s(1, 2, 1, 1)), ("b", s(1, 2, 1, 1))], |t, st, sd| {
            let (x, g, b) = (p(t, st, "x")?, p(t, st, "g")?, p(t, st, "b")?);
            let (mean, var) = ([0.3, -0.2], [0.5, 1.7]);
            let (y, _) = t.batch_norm(x, g, b, BnMode::Eval { mean: &mean, var: &var })?;
            project(t, y, sd)
        }),
        ("global_avg_pool", vec![("x", s(2, 3, 4, 5))], |t, st, sd| {
            let x = p(t, st, "x")?;
            let y = t.global_avg_pool(x)?;
            project(t, y, sd)
        }),
        ("linear", vec![("x", s(3, 5, 1, 1)), ("w", s(4, 5, 1, 1)), ("b", s(1, 4, 1, 1))], |t, st, sd| {
            let (x, w, b) = (p(t, st, "x")?, p(t, st, "w")?, p(t, st, "b")?);
            let y = t.linear(x, w, Some(b))?;
            project(t, y, sd)
        }),
        ("softmax", vec![("x", s(3, 4, 1, 1))], |t, st, sd| {
            let x = p(t, st, "x")?;
            let y = t.softmax(x)?;
            project(t, y, sd)
        }),
        ("softmax_cross_entropy", vec![("x", s(4, 3, 1, 1))], |t, st, _| {
            let x = p(t, st, "x")?;
            t.softmax_cross_entropy(x, &[0, 2, 1, 2])
        }),
        ("branch_loss", vec![("x", s(8, 3, 1, 1))], |t, st, _| {
            let x = p(t, st, "x")?;
            t.branch_loss(x, &[1, 0], 4)
        }),
        ("grid_pool", vec![("x", s(2, 2, 5, 5))], |t, st, sd| {
            let x = p(t, st, "x")?;
            let y = t.grid_pool(x, 2, GridCoord::new(1, 0))?;
            project(t, y, sd)
        }),
        ("pgp", vec![("x", s(2, 2, 4, 4))], |t, st, sd| {
            let x = p(t, st, "x")?;
            let y = t.pgp(x, 2)?;
            project(t, y, sd)
        }),
        ("pgp_nested", vec![("x", s(1, 2, 8, 8))], |t, st, sd| {
            let x = p(t, st, "x")?;
            let y = t.pgp(x, 2)?;
            let y = t.pgp(y, 2)?;
            project(t, y, sd)
        }),
        ("pgp_inverse", vec![("x", s(8, 2, 2, 3))], |t, st, sd| {
            let x = p(t, st, "x")?;
            let y = t.pgp_inverse(x, 2)?;
            project(t, y, sd)
        }),
        ("zero_pad", vec![("x", s(2, 2, 3, 3))], |t, st, sd| {
            let x = p(t, st, "x")?;
            let y = t.zero_pad(x, 2)?;
            project(t, y, sd)
        }),
        ("mean_branches", vec![("x", s(8, 3, 2, 2))], |t, st, sd| {
            let x = p(t, st, "x")?;
            let y = t.mean_branches(x, 4)?;
            project(t, y, sd)
        }),
        ("sum", vec![("x", s(2, 3, 2, 2))], |t, st, _| {
            let x = p(t, st, "x")?;
            t.sum(x)
        }),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(cases.len());
    for (name, params, build) in cases {
        let mut store = store_of(&mut rng, &params);
        let opts = GradcheckOptions {
            seed,
            ..Default::default()
        };
        let report = gradcheck(|t, st| build(t, st, seed), &mut store, opts)?;
        out.push(SuiteEntry::new(name, seed, report));
    }
    Ok(out)
}

/// Gradient check of a network's training loss (batch statistics in batch
/// norm) on random inputs, sampling at most `per_param` entries per tensor.
pub fn network_gradcheck(net: &NetworkIR, seed: u64, batch: usize, per_param: usize) -> Result<SuiteEntry> {
    let mut model = Model::<f64>::init(net.clone(), seed)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
    let (c, h, w) = net.input;
    let x = Tensor::from_fn(Shape::new(batch, c, h, w), |_, _, _, _| rng.random_range(-1.0..1.0));
    let classes = net.output_shape()?.c;
    let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..classes)).collect();
    let mut store = std::mem::take(&mut model.params);
    let opts = GradcheckOptions {
        eps: 1e-5,
        floor: 1e-6,
        max_per_param: Some(per_param),
        refinements: 3,
        seed,
    };
    let report = gradcheck(
        |tape, params| {
            let m = Model::with_params(net.clone(), params.clone())?;
            let xv = tape.input(x.clone());
            let out = m.forward(tape, xv, Mode::Train)?;
            m.loss(tape, &out, &labels)
        },
        &mut store,
        opts,
    )?;
    Ok(SuiteEntry::new(&format!("network:{}", net.name), seed, report))
}
