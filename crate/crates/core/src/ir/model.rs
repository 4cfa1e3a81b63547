//! Running a [`NetworkIR`] on a tape with a parameter store.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{weights_compatible, FeatureShape, LayerSpec, NetworkIR, layer_prefixes};
use crate::error::{Error, Result};
use crate::gridpool::AggregateMode;
use crate::ops::conv::{ConvSpec, Window};
use crate::ops::nn::{BatchStats, BnMode};
use crate::param::{ParamStore, Parameter};
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

/// Weight of the current batch in the running batch-norm statistics.
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics in batch norm; statistics are returned for updating.
    Train,
    /// Running statistics in batch norm.
    Eval,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput<T> {
    /// Final value of the network.
    pub output: Var,
    /// Per-branch logits feeding the aggregation layer, or `output` when the
    /// network does not aggregate.
    pub logits: Var,
    /// Branch count of `logits`.
    pub branches: usize,
    pub aggregate: Option<AggregateMode>,
    /// Batch statistics per batch-norm prefix, in training mode.
    pub bn_stats: Vec<(String, BatchStats<T>)>,
}

/// A network together with its parameters.
#[derive(Debug, Clone)]
pub struct Model<T> {
    net: NetworkIR,
    shapes: Vec<FeatureShape>,
    pub params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    /// Fresh parameters drawn in declaration order from a stream seeded with `seed`.
    pub fn init(net: NetworkIR, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        for spec in net.param_specs()? {
            let value = spec.init.fill(spec.shape, &mut rng);
            params.insert(Parameter::new(spec.name, value, spec.dims, spec.trainable)?)?;
        }
        let shapes = net.infer_shapes()?;
        Ok(Model { net, shapes, params })
    }

    /// Wraps existing parameters, which must match the network exactly.
    pub fn with_params(net: NetworkIR, params: ParamStore<T>) -> Result<Self> {
        let specs = net.param_specs()?;
        let ok = specs.len() == params.len()
            && specs
                .iter()
                .zip(params.iter())
                .all(|(s, p)| s.name == p.name && s.dims == p.dims && s.shape == p.value.shape());
        if !ok {
            return Err(Error::shape("parameter store does not match the network"));
        }
        let shapes = net.infer_shapes()?;
        Ok(Model { net, shapes, params })
    }

    pub fn net(&self) -> &NetworkIR {
        &self.net
    }

    /// Runs the same parameters under another form of the network.
    pub fn rewrite(self, net: NetworkIR) -> Result<Self> {
        let compat = weights_compatible(&self.net, &net);
        if !compat.compatible {
            return Err(Error::Rewrite(format!(
                "parameters do not fit: {}",
                compat.shape_mismatches.join("; ")
            )));
        }
        Model::with_params(net, self.params)
    }

    pub fn forward(&self, tape: &mut Tape<T>, x: Var, mode: Mode) -> Result<ForwardOutput<T>> {
        let xs = tape.shape(x)?;
        let (c, h, w) = self.net.input;
        if (xs.c, xs.h, xs.w) != (c, h, w) {
            return Err(Error::shape(format!(
                "input {xs} does not match network input c={c} h={h} w={w}"
            )));
        }
        let mut cur = x;
        let mut out = ForwardOutput {
            output: x,
            logits: x,
            branches: 1,
            aggregate: None,
            bn_stats: Vec::new(),
        };
        let prefixes = layer_prefixes(&self.net.layers);
        for (i, layer) in self.net.layers.iter().enumerate() {
            let input = &self.shapes[i];
            let prefix = prefixes[i].as_deref().unwrap_or("");
            let p = |tape: &mut Tape<T>, role: &str| tape.param_by_name(&self.params, &format!("{prefix}.{role}"));
            cur = match *layer {
                LayerSpec::Conv {
                    out_channels,
                    k,
                    stride,
                    dilation,
                    padding,
                } => {
                    let spec = ConvSpec::new(input.c, out_channels, k)
                        .stride(stride)
                        .dilation(dilation)
                        .padding(padding);
                    let (wv, bv) = (p(tape, "weight")?, p(tape, "bias")?);
                    tape.conv2d(cur, wv, Some(bv), &spec)?
                }
                LayerSpec::AvgPool {
                    k,
                    stride,
                    padding,
                    dilation,
                } => tape.avgpool2d(cur, Window::new(k, stride, dilation, padding))?,
                LayerSpec::BatchNorm => {
                    let (g, b) = (p(tape, "gamma")?, p(tape, "beta")?);
                    let bn_mode = match mode {
                        Mode::Train => BnMode::Train,
                        Mode::Eval => BnMode::Eval {
                            mean: self.stat(prefix, "running_mean")?,
                            var: self.stat(prefix, "running_var")?,
                        },
                    };
                    let (y, stats) = tape.batch_norm(cur, g, b, bn_mode)?;
                    if let Some(stats) = stats {
                        out.bn_stats.push((prefix.to_string(), stats));
                    }
                    y
                }
                LayerSpec::ReLU => tape.relu(cur)?,
                LayerSpec::Pgp { s } => tape.pgp(cur, s)?,
                LayerSpec::PgpInverse { s } => tape.pgp_inverse(cur, s)?,
                LayerSpec::GlobalAvgPool => tape.global_avg_pool(cur)?,
                LayerSpec::Linear { .. } => {
                    let (wv, bv) = (p(tape, "weight")?, p(tape, "bias")?);
                    tape.linear(cur, wv, Some(bv))?
                }
                LayerSpec::Aggregate { mode: agg } => {
                    let branches = input.branches();
                    out.logits = cur;
                    out.branches = branches;
                    out.aggregate = Some(agg);
                    let v = match agg {
                        AggregateMode::Logits => cur,
                        AggregateMode::Probs => tape.softmax(cur)?,
                    };
                    tape.mean_branches(v, branches)?
                }
            };
        }
        out.output = cur;
        if out.aggregate.is_none() {
            out.logits = cur;
            out.branches = self.shapes.last().expect("non-empty").branches();
        }
        Ok(out)
    }

    fn stat(&self, prefix: &str, role: &str) -> Result<&[T]> {
        let name = format!("{prefix}.{role}");
        self.params
            .by_name(&name)
            .map(|p| p.value.data())
            .ok_or_else(|| Error::invalid(format!("missing `{name}`")))
    }

    /// Cross-entropy of the per-branch logits, every branch supervised with
    /// the labels of its source sample.
    pub fn loss(&self, tape: &mut Tape<T>, out: &ForwardOutput<T>, labels: &[usize]) -> Result<Var> {
        tape.branch_loss(out.logits, labels, out.branches)
    }

    /// `running ← (1 − m)·running + m·batch`, with the unbiased batch variance.
    pub fn update_running_stats(&mut self, stats: &[(String, BatchStats<T>)]) -> Result<()> {
        let m = T::from_f64_lossy(BN_MOMENTUM);
        let keep = T::one() - m;
        for (prefix, s) in stats {
            let n = T::from_f64_lossy(s.count as f64);
            let unbias = if s.count > 1 { n / (n - T::one()) } else { T::one() };
            for (role, batch, scale) in [("running_mean", &s.mean, T::one()), ("running_var", &s.var, unbias)] {
                let name = format!("{prefix}.{role}");
                let p = self
                    .params
                    .by_name_mut(&name)
                    .ok_or_else(|| Error::invalid(format!("missing `{name}`")))?;
                for (r, &b) in p.value.data_mut().iter_mut().zip(batch) {
                    *r = keep * *r + m * b * scale;
                }
            }
        }
        Ok(())
    }

    /// Output of the network for a batch in evaluation mode.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let xv = tape.input(x.clone());
        let out = self.forward(&mut tape, xv, Mode::Eval)?;
        Ok(tape.value(out.output)?.clone())
    }

    /// Class probabilities per sample; aggregating networks average over branches.
    pub fn predict_probs(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::inference();
        let xv = tape.input(x.clone());
        let out = self.forward(&mut tape, xv, Mode::Eval)?;
        let probs = match out.aggregate {
            Some(AggregateMode::Probs) => out.output,
            Some(AggregateMode::Logits) | None => {
                let p = tape.softmax(out.logits)?;
                tape.mean_branches(p, out.branches)?
            }
        };
        Ok(tape.value(probs)?.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ir::{parse_ir, to_dconv, to_dconv_pgp_form, to_pgp};
    use crate::tensor::Shape;

    fn randomize_stats(model: &mut Model<f64>) {
        let mut k = 0.0;
        for p in model.params.iter_mut().filter(|p| !p.trainable) {
            for v in p.value.data_mut() {
                k += 1.0;
                *v = if p.name.ends_with("var") { 0.5 + (k * 0.37f64).sin().abs() } else { (k * 0.91f64).cos() * 0.2 };
            }
        }
    }

    #[test]
    fn dconv_matches_explicit_pgp_form() {
        let net = NetworkIR::reference((3, 16, 16), 4).unwrap();
        let mut base = Model::<f64>::init(net.clone(), 5).unwrap();
        randomize_stats(&mut base);
        let x = Tensor::from_fn(Shape::new(2, 3, 16, 16), |b, c, h, w| ((b * 7 + c * 3 + h * 5 + w) as f64 * 0.13).sin());
        let d = base.clone().rewrite(to_dconv(&net).unwrap()).unwrap().predict(&x).unwrap();
        let f = base.clone().rewrite(to_dconv_pgp_form(&net).unwrap()).unwrap().predict(&x).unwrap();
        assert!(d.max_abs_diff(&f).unwrap() < 1e-10);
        let p = base.rewrite(to_pgp(&net, AggregateMode::Logits).unwrap()).unwrap().predict(&x).unwrap();
        assert!(d.max_abs_diff(&p).unwrap() < 1e-10);
    }

    #[test]
    fn same_seed_same_init() {
        let net = NetworkIR::reference((3, 8, 8), 4).unwrap();
        let a = Model::<f32>::init(net.clone(), 1).unwrap();
        let b = Model::<f32>::init(net.clone(), 1).unwrap();
        let c = Model::<f32>::init(net, 2).unwrap();
        assert_eq!(a.params, b.params);
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn running_stats_update() {
        let net = parse_ir("input c=1 h=2 w=2\nbn").unwrap();
        let mut m = Model::<f64>::init(net, 0).unwrap();
        let x = Tensor::new(Shape::new(1, 1, 2, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut tape = Tape::new();
        let xv = tape.input(x);
        let out = m.forward(&mut tape, xv, Mode::Train).unwrap();
        m.update_running_stats(&out.bn_stats).unwrap();
        let mean = m.params.by_name("bn0.running_mean").unwrap().value.data()[0];
        let var = m.params.by_name("bn0.running_var").unwrap().value.data()[0];
        assert!((mean - 0.25).abs() < 1e-12);
        assert!((var - (0.9 + 0.1 * 5.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn wrong_input_shape() {
        let net = NetworkIR::reference((3, 8, 8), 4).unwrap();
        let m = Model::<f32>::init(net, 0).unwrap();
        assert!(m.predict(&Tensor::zeros(Shape::new(1, 1, 8, 8))).is_err());
    }

    #[test]
    fn probs_sum_to_one() {
        let net = NetworkIR::reference((3, 8, 8), 4).unwrap();
        let m = Model::<f64>::init(to_pgp(&net, AggregateMode::Probs).unwrap(), 0).unwrap();
        let x = Tensor::from_fn(Shape::new(3, 3, 8, 8), |b, c, h, w| (b + c + h * w) as f64 * 0.01);
        let p = m.predict_probs(&x).unwrap();
        assert_eq!(p.shape(), Shape::new(3, 4, 1, 1));
        for b in 0..3 {
            let s: f64 = (0..4).map(|c| p.at(b, c, 0, 0)).sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }
}
