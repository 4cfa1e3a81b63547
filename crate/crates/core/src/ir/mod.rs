//! A linear-chain network description, its text format, the stride rewrites
//! between the base, dilated and PGP forms, weight files, and an executor.

mod model;
mod rewrite;
mod text;
mod weights;

use std::fmt;
use std::str::FromStr;

use serde::Serialize;

pub use model::{ForwardOutput, Mode, Model, BN_MOMENTUM};
pub use rewrite::{to_base, to_dconv, to_dconv_pgp_form, to_pgp, to_variant};
pub use text::{emit_ir, parse_ir};
pub use weights::{load_weights, read_weights, save_weights, LoadReport, WeightRecord, WEIGHTS_MAGIC};

use crate::error::{Error, Result};
use crate::gridpool::AggregateMode;
use crate::ops::conv::Window;
use crate::param::Init;
use crate::tensor::Shape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        padding: usize,
    },
    AvgPool {
        k: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    },
    BatchNorm,
    ReLU,
    Pgp {
        s: usize,
    },
    PgpInverse {
        s: usize,
    },
    GlobalAvgPool,
    Linear {
        out_features: usize,
    },
    Aggregate {
        mode: AggregateMode,
    },
}

impl LayerSpec {
    pub fn conv(out_channels: usize, k: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            k,
            stride,
            dilation: 1,
            padding,
        }
    }

    pub fn avgpool(k: usize, stride: usize, padding: usize) -> Self {
        LayerSpec::AvgPool {
            k,
            stride,
            padding,
            dilation: 1,
        }
    }

    /// Stride of a spatial layer, `None` for other layers.
    pub fn stride(&self) -> Option<usize> {
        match *self {
            LayerSpec::Conv { stride, .. } | LayerSpec::AvgPool { stride, .. } => Some(stride),
            _ => None,
        }
    }

    pub fn dilation(&self) -> Option<usize> {
        match *self {
            LayerSpec::Conv { dilation, .. } | LayerSpec::AvgPool { dilation, .. } => Some(dilation),
            _ => None,
        }
    }

    fn window(&self) -> Option<Window> {
        match *self {
            LayerSpec::Conv {
                k,
                stride,
                dilation,
                padding,
                ..
            }
            | LayerSpec::AvgPool {
                k,
                stride,
                dilation,
                padding,
            } => Some(Window::new(k, stride, dilation, padding)),
            _ => None,
        }
    }

    /// Checks the layer's own arguments, independent of its input.
    pub fn validate(&self) -> Result<()> {
        if let Some(win) = self.window() {
            win.validate()?;
        }
        match *self {
            LayerSpec::Conv { out_channels: 0, .. } => Err(Error::invalid("conv needs out ≥ 1")),
            LayerSpec::Conv { k, .. } if k % 2 == 0 => Err(Error::invalid(format!("conv kernel must be odd, got {k}"))),
            LayerSpec::Pgp { s: 0 } | LayerSpec::PgpInverse { s: 0 } => Err(Error::invalid("stride must be ≥ 1")),
            LayerSpec::Linear { out_features: 0 } => Err(Error::invalid("linear needs out ≥ 1")),
            _ => Ok(()),
        }
    }
}

/// Per-branch feature shape flowing between layers, plus the stack of PGP
/// strides applied so far (outermost last).
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FeatureShape {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub pgp: Vec<usize>,
}

impl FeatureShape {
    pub fn branches(&self) -> usize {
        self.pgp.iter().map(|s| s * s).product()
    }

    /// Shape of a batch of `n` samples at this point.
    pub fn batch_shape(&self, n: usize) -> Shape {
        Shape::new(n * self.branches(), self.c, self.h, self.w)
    }
}

/// Description of one parameter tensor of a network.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub dims: Vec<usize>,
    pub shape: Shape,
    pub init: Init,
    pub trainable: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkIR {
    pub name: String,
    /// `(c, h, w)` of one input sample.
    pub input: (usize, usize, usize),
    pub layers: Vec<LayerSpec>,
}

/// Parameter names of conv, batch-norm and linear layers are numbered per
/// layer kind, so they survive rewrites that insert or remove PGP layers.
pub(crate) fn layer_prefixes(layers: &[LayerSpec]) -> Vec<Option<String>> {
    let (mut conv, mut bn, mut lin) = (0, 0, 0);
    layers
        .iter()
        .map(|l| {
            let (kind, n) = match l {
                LayerSpec::Conv { .. } => ("conv", &mut conv),
                LayerSpec::BatchNorm => ("bn", &mut bn),
                LayerSpec::Linear { .. } => ("linear", &mut lin),
                _ => return None,
            };
            *n += 1;
            Some(format!("{kind}{}", *n - 1))
        })
        .collect()
}

impl NetworkIR {
    pub fn new(name: impl Into<String>, input: (usize, usize, usize), layers: Vec<LayerSpec>) -> Result<Self> {
        let net = NetworkIR {
            name: name.into(),
            input,
            layers,
        };
        net.infer_shapes()?;
        Ok(net)
    }

    /// `conv(16,3,1)-bn-relu-conv(32,3,2)-bn-relu-conv(32,3,1)-bn-relu-conv(64,3,2)-bn-relu-gap-linear(classes)`.
    pub fn reference(input: (usize, usize, usize), classes: usize) -> Result<Self> {
        use LayerSpec::*;
        let mut layers = Vec::new();
        for (out, stride) in [(16, 1), (32, 2), (32, 1), (64, 2)] {
            layers.extend([LayerSpec::conv(out, 3, stride, 1), BatchNorm, ReLU]);
        }
        layers.extend([GlobalAvgPool, Linear { out_features: classes }]);
        NetworkIR::new("reference", input, layers)
    }

    /// Input shape of every layer followed by the output shape, so the result
    /// has `layers.len() + 1` entries. Errors name the failing layer index.
    pub fn infer_shapes(&self) -> Result<Vec<FeatureShape>> {
        let (c, h, w) = self.input;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::shape(format!("input c={c} h={h} w={w} must be non-empty")));
        }
        let mut cur = FeatureShape { c, h, w, pgp: Vec::new() };
        let mut out = vec![cur.clone()];
        for (i, layer) in self.layers.iter().enumerate() {
            cur = next_shape(layer, cur).map_err(|e| at_layer(i, e))?;
            out.push(cur.clone());
        }
        Ok(out)
    }

    pub fn output_shape(&self) -> Result<FeatureShape> {
        Ok(self.infer_shapes()?.pop().expect("non-empty"))
    }

    pub fn param_specs(&self) -> Result<Vec<ParamSpec>> {
        let shapes = self.infer_shapes()?;
        let mut specs = Vec::new();
        for ((layer, prefix), input) in self.layers.iter().zip(layer_prefixes(&self.layers)).zip(&shapes) {
            let Some(prefix) = prefix else { continue };
            let vector = |role: &str, n: usize, init: Init, trainable: bool| ParamSpec {
                name: format!("{prefix}.{role}"),
                dims: vec![n],
                shape: Shape::new(1, n, 1, 1),
                init,
                trainable,
            };
            match *layer {
                LayerSpec::Conv { out_channels: o, k, .. } => {
                    specs.push(ParamSpec {
                        name: format!("{prefix}.weight"),
                        dims: vec![o, input.c, k, k],
                        shape: Shape::new(o, input.c, k, k),
                        init: Init::HeNormal { fan_in: input.c * k * k },
                        trainable: true,
                    });
                    specs.push(vector("bias", o, Init::Constant(0.0), true));
                }
                LayerSpec::BatchNorm => {
                    let c = input.c;
                    specs.push(vector("gamma", c, Init::Constant(1.0), true));
                    specs.push(vector("beta", c, Init::Constant(0.0), true));
                    specs.push(vector("running_mean", c, Init::Constant(0.0), false));
                    specs.push(vector("running_var", c, Init::Constant(1.0), false));
                }
                LayerSpec::Linear { out_features: o } => {
                    specs.push(ParamSpec {
                        name: format!("{prefix}.weight"),
                        dims: vec![o, input.c],
                        shape: Shape::new(o, input.c, 1, 1),
                        init: Init::HeNormal { fan_in: input.c },
                        trainable: true,
                    });
                    specs.push(vector("bias", o, Init::Constant(0.0), true));
                }
                _ => unreachable!("only parameterized layers get a prefix"),
            }
        }
        Ok(specs)
    }

    /// Number of trainable scalars.
    pub fn param_count(&self) -> Result<usize> {
        Ok(self
            .param_specs()?
            .iter()
            .filter(|p| p.trainable)
            .map(|p| p.shape.numel())
            .sum())
    }

    pub fn has_pgp(&self) -> bool {
        self.layers
            .iter()
            .any(|l| matches!(l, LayerSpec::Pgp { .. } | LayerSpec::PgpInverse { .. }))
    }

    /// True for networks without PGP layers and without dilation.
    pub fn is_base(&self) -> bool {
        !self.has_pgp() && self.layers.iter().all(|l| l.dilation().unwrap_or(1) == 1)
    }

    /// Resolution of each parameterized layer's input, keyed by parameter prefix.
    pub fn layer_resolutions(&self) -> Result<Vec<(String, (usize, usize))>> {
        let shapes = self.infer_shapes()?;
        Ok(layer_prefixes(&self.layers)
            .into_iter()
            .zip(&shapes)
            .filter_map(|(p, s)| p.map(|p| (p, (s.h, s.w))))
            .collect())
    }
}

fn at_layer(i: usize, e: Error) -> Error {
    let msg = match e {
        Error::Shape(m) | Error::InvalidArgument(m) => m,
        other => other.to_string(),
    };
    Error::Shape(format!("layer {i}: {msg}"))
}

fn next_shape(layer: &LayerSpec, cur: FeatureShape) -> Result<FeatureShape> {
    layer.validate()?;
    let flat = |cur: &FeatureShape, what: &str| -> Result<()> {
        if cur.h != 1 || cur.w != 1 {
            return Err(Error::shape(format!(
                "{what} needs a 1×1 map but gets {}×{}; insert `gap` first",
                cur.h, cur.w
            )));
        }
        Ok(())
    };
    let mut next = cur.clone();
    match *layer {
        LayerSpec::Conv { .. } | LayerSpec::AvgPool { .. } => {
            let win = layer.window().expect("spatial layer");
            next.h = win.out_size(cur.h, "height")?;
            next.w = win.out_size(cur.w, "width")?;
            if let LayerSpec::Conv { out_channels, .. } = *layer {
                next.c = out_channels;
            }
        }
        LayerSpec::BatchNorm | LayerSpec::ReLU => {}
        LayerSpec::Pgp { s } => {
            if cur.h % s != 0 || cur.w % s != 0 {
                return Err(Error::shape(format!(
                    "pgp s={s} needs a map divisible by {s}, got h={} w={}",
                    cur.h, cur.w
                )));
            }
            next.h /= s;
            next.w /= s;
            next.pgp.push(s);
        }
        LayerSpec::PgpInverse { s } => {
            if next.pgp.pop() != Some(s) {
                return Err(Error::shape(format!(
                    "pgp_inv s={s} does not match the innermost open pgp {:?}",
                    cur.pgp.last()
                )));
            }
            next.h *= s;
            next.w *= s;
        }
        LayerSpec::GlobalAvgPool => {
            next.h = 1;
            next.w = 1;
        }
        LayerSpec::Linear { out_features } => {
            flat(&cur, "linear")?;
            next.c = out_features;
        }
        LayerSpec::Aggregate { .. } => {
            flat(&cur, "aggregate")?;
            next.pgp.clear();
        }
    }
    Ok(next)
}

/// Which of the three network forms a network is run as.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Base,
    Dconv,
    Pgp,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::Base, Variant::Dconv, Variant::Pgp];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::Dconv => "dconv",
            Variant::Pgp => "pgp",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "base" => Ok(Variant::Base),
            "dconv" => Ok(Variant::Dconv),
            "pgp" => Ok(Variant::Pgp),
            _ => Err(Error::invalid(format!("unknown variant `{s}` (base, dconv, pgp)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct ResolutionDiff {
    pub layer: String,
    pub a: (usize, usize),
    pub b: (usize, usize),
}

/// Outcome of [`weights_compatible`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Default)]
pub struct Compatibility {
    pub compatible: bool,
    pub shape_mismatches: Vec<String>,
    /// Parameterized layers whose per-branch input resolution differs.
    pub resolution_diffs: Vec<ResolutionDiff>,
}

/// Two networks are compatible when they have the same parameter names and
/// shapes in the same order.
pub fn weights_compatible(a: &NetworkIR, b: &NetworkIR) -> Compatibility {
    let (pa, pb) = match (a.param_specs(), b.param_specs()) {
        (Ok(pa), Ok(pb)) => (pa, pb),
        (ea, eb) => {
            let mismatches = [ea.err(), eb.err()].into_iter().flatten().map(|e| e.to_string()).collect();
            return Compatibility {
                compatible: false,
                shape_mismatches: mismatches,
                resolution_diffs: Vec::new(),
            };
        }
    };
    let mut mismatches = Vec::new();
    for i in 0..pa.len().max(pb.len()) {
        match (pa.get(i), pb.get(i)) {
            (Some(x), Some(y)) if x.name == y.name && x.dims == y.dims => {}
            (Some(x), Some(y)) => mismatches.push(format!("{} {:?} vs {} {:?}", x.name, x.dims, y.name, y.dims)),
            (Some(x), None) => mismatches.push(format!("{} {:?} only in first", x.name, x.dims)),
            (None, Some(y)) => mismatches.push(format!("{} {:?} only in second", y.name, y.dims)),
            (None, None) => unreachable!(),
        }
    }
    let mut diffs = Vec::new();
    if let (Ok(ra), Ok(rb)) = (a.layer_resolutions(), b.layer_resolutions()) {
        for ((la, xa), (lb, xb)) in ra.into_iter().zip(rb) {
            if la == lb && xa != xb {
                diffs.push(ResolutionDiff { layer: la, a: xa, b: xb });
            }
        }
    }
    Compatibility {
        compatible: mismatches.is_empty(),
        shape_mismatches: mismatches,
        resolution_diffs: diffs,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_shapes() {
        let net = NetworkIR::reference((3, 16, 16), 4).unwrap();
        let shapes = net.infer_shapes().unwrap();
        let last = shapes.last().unwrap();
        assert_eq!((last.c, last.h, last.w), (4, 1, 1));
        // Input to conv3 is 8×8; after it 4×4.
        assert_eq!((shapes[9].h, shapes[10].h), (8, 4));
    }

    #[test]
    fn small_conv_param_count() {
        let net = NetworkIR::new("c", (1, 4, 4), vec![LayerSpec::conv(2, 3, 1, 1)]).unwrap();
        assert_eq!(net.param_count().unwrap(), 20);
    }

    #[test]
    fn bn_stats_are_not_counted() {
        let net = NetworkIR::new("c", (3, 4, 4), vec![LayerSpec::BatchNorm]).unwrap();
        assert_eq!(net.param_count().unwrap(), 6);
        assert_eq!(net.param_specs().unwrap().len(), 4);
    }

    #[test]
    fn linear_needs_flat_input() {
        let err = NetworkIR::new("c", (3, 4, 4), vec![LayerSpec::Linear { out_features: 2 }]).unwrap_err();
        assert!(err.to_string().contains("gap"), "{err}");
    }

    #[test]
    fn pgp_inverse_must_match() {
        let layers = vec![LayerSpec::Pgp { s: 2 }, LayerSpec::PgpInverse { s: 4 }];
        assert!(NetworkIR::new("c", (1, 8, 8), layers).is_err());
        let layers = vec![LayerSpec::Pgp { s: 2 }, LayerSpec::Pgp { s: 2 }, LayerSpec::PgpInverse { s: 2 }];
        let net = NetworkIR::new("c", (1, 8, 8), layers).unwrap();
        let out = net.output_shape().unwrap();
        assert_eq!((out.h, out.branches()), (4, 4));
    }

    #[test]
    fn pgp_divisibility() {
        let err = NetworkIR::new("c", (1, 6, 6), vec![LayerSpec::Pgp { s: 4 }]).unwrap_err();
        assert!(err.to_string().contains("layer 0"));
    }
}
