//! Line-oriented text form: an `input c= h= w=` header followed by one
//! `type key=value ...` layer per line. `#` starts a comment.

use std::collections::BTreeMap;
use std::fmt::Write;

use super::{next_shape, FeatureShape, LayerSpec, NetworkIR};
use crate::error::{Error, Result};
use crate::gridpool::AggregateMode;

struct Line<'a> {
    number: usize,
    kind: &'a str,
    args: BTreeMap<&'a str, &'a str>,
}

impl<'a> Line<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            line: self.number,
            msg: msg.into(),
        }
    }

    fn take(&mut self, key: &str) -> Result<Option<&'a str>> {
        Ok(self.args.remove(key))
    }

    fn int(&mut self, key: &str) -> Result<Option<usize>> {
        match self.take(key)? {
            None => Ok(None),
            Some(v) => v
                .parse()
                .map(Some)
                .map_err(|_| self.err(format!("`{key}` must be a non-negative integer, got `{v}`"))),
        }
    }

    fn required(&mut self, key: &str) -> Result<usize> {
        self.int(key)?
            .ok_or_else(|| self.err(format!("`{}` needs `{key}=`", self.kind)))
    }

    fn finish(&self) -> Result<()> {
        match self.args.keys().next() {
            Some(k) => Err(self.err(format!("unknown key `{k}` for `{}`", self.kind))),
            None => Ok(()),
        }
    }
}

fn tokenize(number: usize, raw: &str) -> Result<Option<Line<'_>>> {
    let text = raw.split('#').next().unwrap_or("");
    let mut tokens = text.split_whitespace();
    let Some(kind) = tokens.next() else {
        return Ok(None);
    };
    let mut args = BTreeMap::new();
    for tok in tokens {
        let (k, v) = tok.split_once('=').ok_or_else(|| Error::Parse {
            line: number,
            msg: format!("expected key=value, got `{tok}`"),
        })?;
        if args.insert(k, v).is_some() {
            return Err(Error::Parse {
                line: number,
                msg: format!("duplicate key `{k}`"),
            });
        }
    }
    Ok(Some(Line { number, kind, args }))
}

fn parse_layer(line: &mut Line<'_>) -> Result<LayerSpec> {
    let layer = match line.kind {
        "conv" => LayerSpec::Conv {
            out_channels: line.required("out")?,
            k: line.required("k")?,
            stride: line.required("s")?,
            padding: line.required("p")?,
            dilation: line.int("d")?.unwrap_or(1),
        },
        "avgpool" => LayerSpec::AvgPool {
            k: line.required("k")?,
            stride: line.required("s")?,
            padding: line.required("p")?,
            dilation: line.int("d")?.unwrap_or(1),
        },
        "bn" => LayerSpec::BatchNorm,
        "relu" => LayerSpec::ReLU,
        "pgp" => LayerSpec::Pgp { s: line.required("s")? },
        "pgp_inv" => LayerSpec::PgpInverse { s: line.required("s")? },
        "gap" => LayerSpec::GlobalAvgPool,
        "linear" => LayerSpec::Linear {
            out_features: line.required("out")?,
        },
        "aggregate" => {
            let mode = match line.take("mode")? {
                None => AggregateMode::default(),
                Some(m) => m.parse().map_err(|e: Error| line.err(e.to_string()))?,
            };
            LayerSpec::Aggregate { mode }
        }
        other => return Err(line.err(format!("unknown layer type `{other}`"))),
    };
    line.finish()?;
    layer.validate().map_err(|e| line.err(strip(e)))?;
    Ok(layer)
}

fn strip(e: Error) -> String {
    match e {
        Error::Shape(m) | Error::InvalidArgument(m) => m,
        other => other.to_string(),
    }
}

/// Parses the text form and type-checks it; errors carry 1-based line numbers.
pub fn parse_ir(text: &str) -> Result<NetworkIR> {
    let mut header: Option<(usize, (usize, usize, usize), String)> = None;
    let mut layers = Vec::new();
    let mut shape: Option<FeatureShape> = None;
    for (i, raw) in text.lines().enumerate() {
        let Some(mut line) = tokenize(i + 1, raw)? else {
            continue;
        };
        if line.kind == "input" {
            if header.is_some() {
                return Err(line.err("second `input` line"));
            }
            let dims = (line.required("c")?, line.required("h")?, line.required("w")?);
            let name = line.take("name")?.unwrap_or("").to_string();
            line.finish()?;
            if dims.0 == 0 || dims.1 == 0 || dims.2 == 0 {
                return Err(line.err("input dimensions must be ≥ 1"));
            }
            header = Some((line.number, dims, name));
            shape = Some(FeatureShape {
                c: dims.0,
                h: dims.1,
                w: dims.2,
                pgp: Vec::new(),
            });
            continue;
        }
        let Some(cur) = shape.take() else {
            return Err(line.err("layers must follow an `input c= h= w=` line"));
        };
        let layer = parse_layer(&mut line)?;
        shape = Some(next_shape(&layer, cur).map_err(|e| line.err(strip(e)))?);
        layers.push(layer);
    }
    let (_, input, name) = header.ok_or_else(|| Error::Parse {
        line: 0,
        msg: "missing `input c= h= w=` line".into(),
    })?;
    Ok(NetworkIR { name, input, layers })
}

/// Canonical text form; `parse_ir(emit_ir(n)) == n`.
pub fn emit_ir(net: &NetworkIR) -> String {
    let (c, h, w) = net.input;
    let mut out = format!("input c={c} h={h} w={w}");
    if !net.name.is_empty() {
        write!(out, " name={}", net.name).unwrap();
    }
    out.push('\n');
    for layer in &net.layers {
        match *layer {
            LayerSpec::Conv {
                out_channels,
                k,
                stride,
                dilation,
                padding,
            } => {
                write!(out, "conv out={out_channels} k={k} s={stride} p={padding}").unwrap();
                if dilation != 1 {
                    write!(out, " d={dilation}").unwrap();
                }
            }
            LayerSpec::AvgPool {
                k,
                stride,
                padding,
                dilation,
            } => {
                write!(out, "avgpool k={k} s={stride} p={padding}").unwrap();
                if dilation != 1 {
                    write!(out, " d={dilation}").unwrap();
                }
            }
            LayerSpec::BatchNorm => out.push_str("bn"),
            LayerSpec::ReLU => out.push_str("relu"),
            LayerSpec::Pgp { s } => write!(out, "pgp s={s}").unwrap(),
            LayerSpec::PgpInverse { s } => write!(out, "pgp_inv s={s}").unwrap(),
            LayerSpec::GlobalAvgPool => out.push_str("gap"),
            LayerSpec::Linear { out_features } => write!(out, "linear out={out_features}").unwrap(),
            LayerSpec::Aggregate { mode } => write!(out, "aggregate mode={}", mode.as_str()).unwrap(),
        }
        out.push('\n');
    }
    out
}
