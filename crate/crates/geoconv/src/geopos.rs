//! Coordinate channels and the GeoPos channel (sum of per-axis normalized
//! coordinates plus a scalar random shift).
//!
//! The channel value is a linear function of the pixel index, so padding is
//! handled by evaluating the same formula at out-of-range indices instead of
//! zero-filling. Values in the padded border fall outside [0, 1].

use rand::Rng;

use crate::error::{GeoError, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    /// Value varies with the row index.
    Row,
    /// Value varies with the column index.
    Col,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct GeoChannelSpec {
    pub extent_h: usize,
    pub extent_w: usize,
    pub normalize: bool,
}

impl GeoChannelSpec {
    pub fn normalized(extent_h: usize, extent_w: usize) -> GeoChannelSpec {
        GeoChannelSpec { extent_h, extent_w, normalize: true }
    }
}

/// Coordinate value at `index` along an axis with `extent` pixels. The index
/// may lie outside [0, extent) for padded extensions; the linear formula is
/// simply evaluated there. Normalization divides by (extent - 1); a
/// degenerate extent of 1 maps everything to 0.
pub fn coordinate_value(extent: usize, index: i64, normalize: bool) -> f32 {
    if extent == 1 {
        return 0.0;
    }
    if normalize {
        index as f32 / (extent - 1) as f32
    } else {
        index as f32
    }
}

pub fn coordinate_channel(spec: &GeoChannelSpec, axis: Axis) -> Tensor {
    coordinate_channel_padded(spec, axis, 0)
}

pub fn coordinate_channel_padded(spec: &GeoChannelSpec, axis: Axis, padding: usize) -> Tensor {
    let (h, w) = (spec.extent_h + 2 * padding, spec.extent_w + 2 * padding);
    let p = padding as i64;
    let mut out = Tensor::zeros(&[h, w]);
    for i in 0..h {
        for j in 0..w {
            let v = match axis {
                Axis::Row => coordinate_value(spec.extent_h, i as i64 - p, spec.normalize),
                Axis::Col => coordinate_value(spec.extent_w, j as i64 - p, spec.normalize),
            };
            out.set2(i, j, v);
        }
    }
    out
}

/// g(i, j) = row coordinate + column coordinate + shift.
pub fn geopos_channel(spec: &GeoChannelSpec, shift: f32) -> Tensor {
    geopos_channel_padded(spec, shift, 0)
}

pub fn geopos_channel_padded(spec: &GeoChannelSpec, shift: f32, padding: usize) -> Tensor {
    let (h, w) = (spec.extent_h + 2 * padding, spec.extent_w + 2 * padding);
    let p = padding as i64;
    let mut out = Tensor::zeros(&[h, w]);
    for i in 0..h {
        for j in 0..w {
            let v = coordinate_value(spec.extent_h, i as i64 - p, spec.normalize)
                + coordinate_value(spec.extent_w, j as i64 - p, spec.normalize)
                + shift;
            out.set2(i, j, v);
        }
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub enum ShiftMode {
    /// Draw a fresh uniform shift on every training forward pass.
    ResamplePerForward,
    /// Always use the given shift.
    Fixed(f32),
}

/// How the GeoPos shift r is produced during training and evaluation.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ShiftPolicy {
    pub low: f32,
    pub high: f32,
    pub mode: ShiftMode,
    pub eval_value: f32,
}

impl ShiftPolicy {
    pub fn uniform(low: f32, high: f32) -> Result<ShiftPolicy> {
        if !(low < high) {
            return Err(GeoError::Config(format!("shift policy requires low < high, got [{low}, {high})")));
        }
        Ok(ShiftPolicy { low, high, mode: ShiftMode::ResamplePerForward, eval_value: 0.0 })
    }

    pub fn fixed(r: f32) -> ShiftPolicy {
        ShiftPolicy { low: 0.0, high: 1.0, mode: ShiftMode::Fixed(r), eval_value: r }
    }
}

impl Default for ShiftPolicy {
    /// uniform(-1, 1) during training, 0 at eval.
    fn default() -> ShiftPolicy {
        ShiftPolicy::uniform(-1.0, 1.0).unwrap()
    }
}

/// Shift for one forward pass. Evaluation always uses `eval_value`.
pub fn sample_shift(policy: &ShiftPolicy, rng: &mut impl Rng, training: bool) -> f32 {
    if !training {
        return policy.eval_value;
    }
    match policy.mode {
        ShiftMode::Fixed(r) => r,
        ShiftMode::ResamplePerForward => rng.gen_range(policy.low..policy.high),
    }
}
