//! Numerical certification of the filter-collapse, shift-identity, and
//! GeoConv/CoordConv equivalence statements, each checked against an
//! independent route (1-D re-evaluation, hand offset formula, or a dense
//! least-squares solve).

use nalgebra::{DMatrix, DVector};

use crate::model::{evaluate, Model};
use crate::datasets::Dataset;
use crate::error::{GeoError, Result};
use crate::geopos::{coordinate_channel_padded, coordinate_value, geopos_channel_padded, Axis, GeoChannelSpec, ShiftPolicy};
use crate::layers::{layer_forward, LayerParams, LayerSpec, LayerVariant};
use crate::nn::Activation;
use crate::tensor::{conv2d_forward, ConvGeometry, Tensor};

/// Outcome of the CoordConv -> GeoConv equivalence solve.
#[derive(Debug, Clone)]
pub struct EquivalenceResult {
    /// Least-squares GeoPos filter.
    pub geo_filter: Tensor,
    /// Max-abs discrepancy between the CoordConv positional response and the
    /// best GeoConv positional response over all output positions.
    pub residual: f32,
    /// Whether s1*s2 >= 2*(s1 + s2) holds for the kernel.
    pub condition_holds: bool,
}

/// Marginal sum of a 2-D filter keeping the index along `axis`.
pub fn collapse_filter(f: &Tensor, axis: Axis) -> Tensor {
    debug_assert_eq!(f.rank(), 2);
    let (kh, kw) = (f.shape()[0], f.shape()[1]);
    match axis {
        Axis::Row => {
            let mut out = Tensor::zeros(&[kh]);
            for i in 0..kh {
                let mut acc = 0.0f64;
                for j in 0..kw {
                    acc += f.at2(i, j) as f64;
                }
                out.data_mut()[i] = acc as f32;
            }
            out
        }
        Axis::Col => {
            let mut out = Tensor::zeros(&[kw]);
            for j in 0..kw {
                let mut acc = 0.0f64;
                for i in 0..kh {
                    acc += f.at2(i, j) as f64;
                }
                out.data_mut()[j] = acc as f32;
            }
            out
        }
    }
}

/// Response of a geoconv layer to `input` with shift `r` minus the response
/// with shift 0 must be the constant r * sum(GeoPos-plane filter) per output
/// channel; returns the max-abs violation.
pub fn verify_shift_identity(filters: &Tensor, input: &Tensor, r: f32, geom: &ConvGeometry) -> Result<f32> {
    if filters.rank() != 4 || filters.shape()[2] != geom.in_channels + 1 {
        return Err(GeoError::Config(format!(
            "verify_shift_identity needs filters with {} input planes (content + GeoPos), got {:?}",
            geom.in_channels + 1,
            filters.shape()
        )));
    }
    let (kh, kw, cout) = (filters.shape()[0], filters.shape()[1], filters.shape()[3]);
    let params = LayerParams { filters: filters.clone(), bias: Tensor::zeros(&[cout]) };
    let mut rng = rand::rngs::mock::StepRng::new(0, 0);

    let mut spec = LayerSpec::new(LayerVariant::GeoConv, *geom, Activation::None);
    spec.shift_policy = ShiftPolicy::fixed(r);
    let (out_r, _) = layer_forward(&spec, input, &params, &mut rng, true)?;
    spec.shift_policy = ShiftPolicy::fixed(0.0);
    let (out_0, _) = layer_forward(&spec, input, &params, &mut rng, true)?;

    // Per-output-channel offset r * sum of the GeoPos-plane filter.
    let k = geom.in_channels;
    let mut offsets = vec![0.0f64; cout];
    for co in 0..cout {
        for ky in 0..kh {
            for kx in 0..kw {
                offsets[co] += filters.at4(ky, kx, k, co) as f64;
            }
        }
        offsets[co] *= r as f64;
    }

    let (oh, ow) = (out_r.shape()[0], out_r.shape()[1]);
    let mut residual = 0.0f64;
    for oy in 0..oh {
        for ox in 0..ow {
            for co in 0..cout {
                let d = out_r.at3(oy, ox, co) as f64 - out_0.at3(oy, ox, co) as f64 - offsets[co];
                residual = residual.max(d.abs());
            }
        }
    }
    Ok(residual as f32)
}

/// 2-D convolution of a coordinate channel versus the 1-D convolution of its
/// varying profile with the collapsed filter; returns the max-abs difference.
pub fn verify_filter_collapse(
    f: &Tensor,
    spec: &GeoChannelSpec,
    axis: Axis,
    stride: usize,
    padding: usize,
) -> Result<f32> {
    if f.rank() != 2 {
        return Err(GeoError::dim("verify_filter_collapse filter", "rank 2", format!("{:?}", f.shape())));
    }
    let (kh, kw) = (f.shape()[0], f.shape()[1]);

    // Route A: full 2-D convolution over the analytically padded channel.
    let channel = coordinate_channel_padded(spec, axis, padding);
    let (ph, pw) = (channel.shape()[0], channel.shape()[1]);
    let input = channel.reshaped(&[ph, pw, 1])?;
    let filters = f.reshaped(&[kh, kw, 1, 1])?;
    let geom = ConvGeometry { kernel_h: kh, kernel_w: kw, stride, padding: 0, in_channels: 1, out_channels: 1 };
    let full = conv2d_forward(&input, &filters, &Tensor::zeros(&[1]), &geom)?;

    // Route B: 1-D convolution of the coordinate profile with the collapsed
    // filter, constant along the other output axis.
    let collapsed = collapse_filter(f, axis);
    let (extent, kernel_along) = match axis {
        Axis::Row => (spec.extent_h, kh),
        Axis::Col => (spec.extent_w, kw),
    };
    let out_along = (extent + 2 * padding - kernel_along) / stride + 1;
    let mut profile_response = vec![0.0f64; out_along];
    for (o, slot) in profile_response.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for i in 0..kernel_along {
            let idx = (o * stride + i) as i64 - padding as i64;
            acc += collapsed.data()[i] as f64 * coordinate_value(extent, idx, spec.normalize) as f64;
        }
        *slot = acc;
    }

    let (oh, ow) = (full.shape()[0], full.shape()[1]);
    let mut residual = 0.0f64;
    for oy in 0..oh {
        for ox in 0..ow {
            let expect = match axis {
                Axis::Row => profile_response[oy],
                Axis::Col => profile_response[ox],
            };
            residual = residual.max((full.at3(oy, ox, 0) as f64 - expect).abs());
        }
    }
    Ok(residual as f32)
}

/// Least-squares search for a single GeoPos filter reproducing the combined
/// response of a pair of coordinate-channel filters on an `extent` x `extent`
/// channel. The residual reports how close the best GeoConv response gets.
pub fn solve_equivalence(coord_filters: &Tensor, geom: &ConvGeometry, extent: usize) -> Result<EquivalenceResult> {
    if coord_filters.rank() != 3 || coord_filters.shape()[2] != 2 {
        return Err(GeoError::dim(
            "solve_equivalence coord filters",
            "rank 3 [KH,KW,2]",
            format!("{:?}", coord_filters.shape()),
        ));
    }
    let (kh, kw) = (coord_filters.shape()[0], coord_filters.shape()[1]);
    if extent + 2 * geom.padding < kh.max(kw) {
        return Err(GeoError::Config(format!("extent {extent} too small for kernel {kh}x{kw}")));
    }
    let spec = GeoChannelSpec::normalized(extent, extent);
    let c_row = coordinate_channel_padded(&spec, Axis::Row, geom.padding);
    let c_col = coordinate_channel_padded(&spec, Axis::Col, geom.padding);
    let g = geopos_channel_padded(&spec, 0.0, geom.padding);

    let stride = geom.stride;
    let padded = extent + 2 * geom.padding;
    let oh = (padded - kh) / stride + 1;
    let ow = (padded - kw) / stride + 1;

    // Target: f1 * c_row + f2 * c_col at every output position.
    let mut target = DVector::<f64>::zeros(oh * ow);
    let mut design = DMatrix::<f64>::zeros(oh * ow, kh * kw);
    for oy in 0..oh {
        for ox in 0..ow {
            let row = oy * ow + ox;
            let mut t = 0.0f64;
            for ky in 0..kh {
                for kx in 0..kw {
                    let (iy, ix) = (oy * stride + ky, ox * stride + kx);
                    t += coord_filters.at3(ky, kx, 0) as f64 * c_row.at2(iy, ix) as f64;
                    t += coord_filters.at3(ky, kx, 1) as f64 * c_col.at2(iy, ix) as f64;
                    design[(row, ky * kw + kx)] = g.at2(iy, ix) as f64;
                }
            }
            target[row] = t;
        }
    }

    let condition_holds = kh * kw >= 2 * (kh + kw);
    let degenerate = design.amax() < 1e-12 && target.amax() < 1e-12;
    let solution = if degenerate {
        DVector::<f64>::zeros(kh * kw)
    } else {
        let svd = design.clone().svd(true, true);
        svd.solve(&target, 1e-12).map_err(|e| GeoError::Internal(format!("SVD solve failed: {e}")))?
    };
    let residual = (&design * &solution - &target).amax();

    let geo_filter = Tensor::new(&[kh, kw], solution.iter().map(|&v| v as f32).collect())?;
    Ok(EquivalenceResult { geo_filter, residual: residual as f32, condition_holds })
}

/// Loss degradation of a trained model when the same content is translated:
/// mean loss on the shifted variants minus mean loss on the centered ones.
pub fn positional_invariance_probe(model: &Model, centered: &Dataset, shifted: &Dataset) -> Result<f32> {
    let base = evaluate(model, centered)?;
    let moved = evaluate(model, shifted)?;
    Ok(moved.mean_loss - base.mean_loss)
}
