//! Stride rewrites between the base, dilated (DConv) and PGP forms of a network.
//!
//! All rewrites keep the parameterized layers and their order, so the same
//! parameter names and shapes apply to every form.

use super::{LayerSpec, NetworkIR, Variant};
use crate::error::{Error, Result};
use crate::gridpool::AggregateMode;

fn require_base(net: &NetworkIR, pass: &str) -> Result<()> {
    if !net.is_base() {
        return Err(Error::Rewrite(format!(
            "{pass} expects a base network (no pgp layers, dilation 1)"
        )));
    }
    Ok(())
}

fn with_stride(layer: LayerSpec, new_stride: usize) -> LayerSpec {
    match layer {
        LayerSpec::Conv {
            out_channels,
            k,
            dilation,
            padding,
            ..
        } => LayerSpec::Conv {
            out_channels,
            k,
            stride: new_stride,
            dilation,
            padding,
        },
        LayerSpec::AvgPool {
            k, dilation, padding, ..
        } => LayerSpec::AvgPool {
            k,
            stride: new_stride,
            dilation,
            padding,
        },
        other => other,
    }
}

fn finish(net: &NetworkIR, layers: Vec<LayerSpec>) -> Result<NetworkIR> {
    NetworkIR::new(net.name.clone(), net.input, layers)
        .map_err(|e| Error::Rewrite(format!("rewritten network does not type-check: {e}")))
}

/// Replaces every stride σ > 1 by stride 1 and dilates all later spatial
/// layers by the accumulated rate. Padding is scaled by the rate so every
/// layer keeps its receptive field and the map stays at full resolution.
pub fn to_dconv(net: &NetworkIR) -> Result<NetworkIR> {
    require_base(net, "to_dconv")?;
    let mut rate = 1;
    let mut layers = Vec::with_capacity(net.layers.len());
    for &layer in &net.layers {
        let next = match layer {
            LayerSpec::Conv {
                out_channels,
                k,
                stride,
                padding,
                ..
            } => {
                let l = LayerSpec::Conv {
                    out_channels,
                    k,
                    stride: 1,
                    dilation: rate,
                    padding: padding * rate,
                };
                rate *= stride;
                l
            }
            LayerSpec::AvgPool { k, stride, padding, .. } => {
                let l = LayerSpec::AvgPool {
                    k,
                    stride: 1,
                    dilation: rate,
                    padding: padding * rate,
                };
                rate *= stride;
                l
            }
            other => other,
        };
        layers.push(next);
    }
    finish(net, layers)
}

fn pgp_layers(net: &NetworkIR) -> (Vec<LayerSpec>, Vec<usize>) {
    let mut layers = Vec::with_capacity(net.layers.len() + 4);
    let mut strides = Vec::new();
    for &layer in &net.layers {
        match layer.stride() {
            Some(s) if s > 1 => {
                layers.push(with_stride(layer, 1));
                layers.push(LayerSpec::Pgp { s });
                strides.push(s);
            }
            _ => layers.push(layer),
        }
    }
    (layers, strides)
}

/// Sets every strided layer to stride 1 followed by a PGP layer of that
/// stride, and appends branch aggregation after the head.
pub fn to_pgp(net: &NetworkIR, mode: AggregateMode) -> Result<NetworkIR> {
    require_base(net, "to_pgp")?;
    let (mut layers, _) = pgp_layers(net);
    layers.push(LayerSpec::Aggregate { mode });
    finish(net, layers)
}

/// The dilated network written with explicit PGP: like [`to_pgp`] but without
/// aggregation, and with all PGP levels undone just before global pooling.
pub fn to_dconv_pgp_form(net: &NetworkIR) -> Result<NetworkIR> {
    require_base(net, "to_dconv_pgp_form")?;
    let (mut layers, strides) = pgp_layers(net);
    let at = layers
        .iter()
        .position(|l| matches!(l, LayerSpec::GlobalAvgPool))
        .unwrap_or(layers.len());
    let inverse: Vec<_> = strides.iter().rev().map(|&s| LayerSpec::PgpInverse { s }).collect();
    layers.splice(at..at, inverse);
    finish(net, layers)
}

/// Inverse of [`to_pgp`]: folds each PGP layer back into the stride of the
/// spatial layer right before it and drops aggregation.
pub fn to_base(net: &NetworkIR) -> Result<NetworkIR> {
    if !net.layers.iter().any(|l| matches!(l, LayerSpec::Pgp { .. })) {
        return Err(Error::Rewrite("to_base: no PGP layers".into()));
    }
    let mut layers: Vec<LayerSpec> = Vec::with_capacity(net.layers.len());
    for (i, &layer) in net.layers.iter().enumerate() {
        match layer {
            LayerSpec::Pgp { s } => {
                let prev = layers.last_mut().filter(|l| l.stride() == Some(1)).ok_or_else(|| {
                    Error::Rewrite(format!(
                        "to_base: pgp at layer {i} is not preceded by a stride-1 conv or avgpool"
                    ))
                })?;
                *prev = with_stride(*prev, s);
            }
            LayerSpec::PgpInverse { .. } => {
                return Err(Error::Rewrite(format!("to_base: unexpected pgp_inv at layer {i}")));
            }
            LayerSpec::Aggregate { .. } => {}
            other => layers.push(other),
        }
    }
    if layers.iter().any(|l| l.dilation().unwrap_or(1) != 1) {
        return Err(Error::Rewrite("to_base: dilated layers have no base form".into()));
    }
    finish(net, layers)
}

/// Rewrites a base network into the requested form.
pub fn to_variant(net: &NetworkIR, variant: Variant, mode: AggregateMode) -> Result<NetworkIR> {
    match variant {
        Variant::Base => {
            require_base(net, "to_variant")?;
            Ok(net.clone())
        }
        Variant::Dconv => to_dconv(net),
        Variant::Pgp => to_pgp(net, mode),
    }
}
