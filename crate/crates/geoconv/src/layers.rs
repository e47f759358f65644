//! The layer zoo: Conv2D, CoordConv2D, GeoConv2D, plus parameter and FLOP
//! accounting.
//!
//! Channel order is content channels first, positional channel(s) last. When
//! the layer pads, content channels are zero-padded while positional channels
//! are extended analytically (the coordinate formula is evaluated at the
//! out-of-range indices).

use rand::Rng;

use crate::error::{GeoError, Result};
use crate::geopos::{coordinate_value, sample_shift, ShiftPolicy};
use crate::nn::{kaiming_uniform, Activation};
use crate::tensor::{conv2d_backward, conv2d_forward, ConvGeometry, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum LayerVariant {
    Conv,
    CoordConv,
    GeoConv,
}

impl LayerVariant {
    /// Positional planes concatenated to the input: 0, 2 (row + col), or 1 (GeoPos).
    pub fn extra_channels(&self) -> usize {
        match self {
            LayerVariant::Conv => 0,
            LayerVariant::CoordConv => 2,
            LayerVariant::GeoConv => 1,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            LayerVariant::Conv => "conv",
            LayerVariant::CoordConv => "coordconv",
            LayerVariant::GeoConv => "geoconv",
        }
    }
}

/// One convolutional layer. `geom.in_channels` counts content channels only;
/// the filters carry `geom.in_channels + extra_channels` input planes.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerSpec {
    pub variant: LayerVariant,
    pub geom: ConvGeometry,
    pub activation: Activation,
    pub shift_policy: ShiftPolicy,
}

impl LayerSpec {
    pub fn new(variant: LayerVariant, geom: ConvGeometry, activation: Activation) -> LayerSpec {
        LayerSpec { variant, geom, activation, shift_policy: ShiftPolicy::default() }
    }

    pub fn effective_in_channels(&self) -> usize {
        self.geom.in_channels + self.variant.extra_channels()
    }

    /// Geometry of the convolution actually executed (after augmentation).
    fn effective_geom(&self) -> ConvGeometry {
        let mut g = self.geom;
        g.in_channels = self.effective_in_channels();
        if self.variant != LayerVariant::Conv {
            // Padding is realised while building the augmented tensor.
            g.padding = 0;
        }
        g
    }

    pub fn init_params(&self, rng: &mut impl Rng) -> LayerParams {
        let c_eff = self.effective_in_channels();
        let mut filters = Tensor::zeros(&[self.geom.kernel_h, self.geom.kernel_w, c_eff, self.geom.out_channels]);
        let fan_in = self.geom.kernel_h * self.geom.kernel_w * c_eff;
        kaiming_uniform(&mut filters, fan_in, rng);
        LayerParams { filters, bias: Tensor::zeros(&[self.geom.out_channels]) }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerParams {
    pub filters: Tensor,
    pub bias: Tensor,
}

#[derive(Debug, Clone)]
pub struct LayerCache {
    /// Input after channel concatenation (and padding, for coord/geo variants).
    augmented: Tensor,
    pre_activation: Tensor,
    eff_geom: ConvGeometry,
    /// Shift used by this forward pass (GeoConv only).
    pub shift: Option<f32>,
}

impl LayerCache {
    /// Shape of this layer's output, [H_out, W_out, C_out].
    pub fn output_shape(&self) -> &[usize] {
        self.pre_activation.shape()
    }
}

pub struct LayerGrads {
    pub grad_input: Tensor,
    pub grad_filters: Tensor,
    pub grad_bias: Tensor,
}

fn check_layer_input(spec: &LayerSpec, input: &Tensor, params: &LayerParams) -> Result<(usize, usize)> {
    if input.rank() != 3 {
        return Err(GeoError::dim("layer input", "rank 3 [H,W,C]", format!("{:?}", input.shape())));
    }
    if input.shape()[2] != spec.geom.in_channels {
        return Err(GeoError::Config(format!(
            "layer expects {} content channels, input has {}",
            spec.geom.in_channels,
            input.shape()[2]
        )));
    }
    let expect = [spec.geom.kernel_h, spec.geom.kernel_w, spec.effective_in_channels(), spec.geom.out_channels];
    if params.filters.shape() != expect {
        return Err(GeoError::Config(format!(
            "{} filters must have shape {expect:?} (content + {} positional planes), got {:?}",
            spec.variant.name(),
            spec.variant.extra_channels(),
            params.filters.shape()
        )));
    }
    Ok((input.shape()[0], input.shape()[1]))
}

/// Build the (padded) augmented input with positional planes appended.
fn augment(spec: &LayerSpec, input: &Tensor, shift: f32) -> Tensor {
    let (h, w, c) = (input.shape()[0], input.shape()[1], input.shape()[2]);
    let pad = spec.geom.padding;
    let c_eff = spec.effective_in_channels();
    let (ph, pw) = (h + 2 * pad, w + 2 * pad);
    let mut aug = Tensor::zeros(&[ph, pw, c_eff]);
    let p = pad as i64;
    for i in 0..ph {
        for j in 0..pw {
            let (ri, rj) = (i as i64 - p, j as i64 - p);
            let interior = ri >= 0 && ri < h as i64 && rj >= 0 && rj < w as i64;
            if interior {
                for ci in 0..c {
                    aug.set3(i, j, ci, input.at3(ri as usize, rj as usize, ci));
                }
            }
            match spec.variant {
                LayerVariant::Conv => {}
                LayerVariant::CoordConv => {
                    aug.set3(i, j, c, coordinate_value(h, ri, true));
                    aug.set3(i, j, c + 1, coordinate_value(w, rj, true));
                }
                LayerVariant::GeoConv => {
                    aug.set3(i, j, c, coordinate_value(h, ri, true) + coordinate_value(w, rj, true) + shift);
                }
            }
        }
    }
    aug
}

pub fn layer_forward(
    spec: &LayerSpec,
    input: &Tensor,
    params: &LayerParams,
    rng: &mut impl Rng,
    training: bool,
) -> Result<(Tensor, LayerCache)> {
    check_layer_input(spec, input, params)?;
    let (augmented, shift) = match spec.variant {
        LayerVariant::Conv => (input.clone(), None),
        LayerVariant::CoordConv => (augment(spec, input, 0.0), None),
        LayerVariant::GeoConv => {
            let r = sample_shift(&spec.shift_policy, rng, training);
            (augment(spec, input, r), Some(r))
        }
    };
    let eff_geom = spec.effective_geom();
    let pre = conv2d_forward(&augmented, &params.filters, &params.bias, &eff_geom)?;
    let out = spec.activation.apply(&pre);
    Ok((out, LayerCache { augmented, pre_activation: pre, eff_geom, shift }))
}

/// Exact adjoint of [`layer_forward`] with the cached shift. No gradient
/// flows into the positional planes (they are inputs, not parameters).
pub fn layer_backward(spec: &LayerSpec, params: &LayerParams, cache: &LayerCache, upstream: &Tensor) -> Result<LayerGrads> {
    if upstream.shape() != cache.pre_activation.shape() {
        return Err(GeoError::dim(
            "layer upstream gradient",
            format!("{:?}", cache.pre_activation.shape()),
            format!("{:?}", upstream.shape()),
        ));
    }
    let chained = spec.activation.backward(&cache.pre_activation, upstream);
    let (grad_aug, grad_filters, grad_bias) =
        conv2d_backward(&cache.augmented, &params.filters, &cache.eff_geom, &chained)?;

    let grad_input = match spec.variant {
        LayerVariant::Conv => grad_aug,
        _ => {
            let pad = spec.geom.padding;
            let (ph, pw) = (cache.augmented.shape()[0], cache.augmented.shape()[1]);
            let (h, w, c) = (ph - 2 * pad, pw - 2 * pad, spec.geom.in_channels);
            let mut g = Tensor::zeros(&[h, w, c]);
            for i in 0..h {
                for j in 0..w {
                    for ci in 0..c {
                        g.set3(i, j, ci, grad_aug.at3(i + pad, j + pad, ci));
                    }
                }
            }
            g
        }
    };
    Ok(LayerGrads { grad_input, grad_filters, grad_bias })
}

/// FLOP and parameter accounting for one layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct FlopReport {
    pub flops: u64,
    pub params: u64,
    pub h_out: usize,
    pub w_out: usize,
}

/// flops = 2 * H_out * W_out * K_H * K_W * C_eff * C_out,
/// params = K_H * K_W * C_eff * C_out + C_out,
/// where C_eff counts the variant's positional planes.
pub fn count_flops(spec: &LayerSpec, input_hw: (usize, usize)) -> Result<FlopReport> {
    spec.geom.validate()?;
    let (h_out, w_out) = spec.geom.output_hw(input_hw.0, input_hw.1)?;
    let c_eff = spec.effective_in_channels() as u64;
    let (kh, kw, cout) = (spec.geom.kernel_h as u64, spec.geom.kernel_w as u64, spec.geom.out_channels as u64);
    let flops = 2 * h_out as u64 * w_out as u64 * kh * kw * c_eff * cout;
    let params = kh * kw * c_eff * cout + cout;
    Ok(FlopReport { flops, params, h_out, w_out })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn geom(k: usize, s: usize, p: usize, cin: usize, cout: usize) -> ConvGeometry {
        ConvGeometry { kernel_h: k, kernel_w: k, stride: s, padding: p, in_channels: cin, out_channels: cout }
    }

    fn zero_params(spec: &LayerSpec) -> LayerParams {
        LayerParams {
            filters: Tensor::zeros(&[spec.geom.kernel_h, spec.geom.kernel_w, spec.effective_in_channels(), spec.geom.out_channels]),
            bias: Tensor::zeros(&[spec.geom.out_channels]),
        }
    }

    #[test]
    fn geoconv_zero_filters_zero_output() {
        let spec = LayerSpec::new(LayerVariant::GeoConv, geom(3, 1, 1, 2, 2), Activation::None);
        let params = zero_params(&spec);
        let input = Tensor::filled(&[6, 6, 2], 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out, _) = layer_forward(&spec, &input, &params, &mut rng, true).unwrap();
        assert!(out.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn geoconv_shift_offsets_output_by_nine_r() {
        // Filters zero except the GeoPos plane which is all ones: shifting by r
        // moves every output by 9r (3x3 kernel).
        let spec = {
            let mut s = LayerSpec::new(LayerVariant::GeoConv, geom(3, 1, 0, 1, 1), Activation::None);
            s.shift_policy = ShiftPolicy::fixed(0.5);
            s
        };
        let mut params = zero_params(&spec);
        for ky in 0..3 {
            for kx in 0..3 {
                params.filters.set4(ky, kx, 1, 0, 1.0);
            }
        }
        let input = Tensor::filled(&[5, 5, 1], 0.3);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (out_r, _) = layer_forward(&spec, &input, &params, &mut rng, true).unwrap();

        let mut spec0 = spec.clone();
        spec0.shift_policy = ShiftPolicy::fixed(0.0);
        let (out_0, _) = layer_forward(&spec0, &input, &params, &mut rng, true).unwrap();
        for (a, b) in out_r.data().iter().zip(out_0.data()) {
            assert!((a - b - 9.0 * 0.5).abs() < 1e-5, "{a} {b}");
        }
    }

    #[test]
    fn coordconv_with_zero_positional_filters_matches_conv() {
        let conv_spec = LayerSpec::new(LayerVariant::Conv, geom(3, 2, 1, 2, 3), Activation::Relu);
        let coord_spec = LayerSpec::new(LayerVariant::CoordConv, geom(3, 2, 1, 2, 3), Activation::Relu);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let conv_params = conv_spec.init_params(&mut rng);
        // Copy content-plane filters, zero the positional planes.
        let mut coord_params = zero_params(&coord_spec);
        for ky in 0..3 {
            for kx in 0..3 {
                for ci in 0..2 {
                    for co in 0..3 {
                        coord_params.filters.set4(ky, kx, ci, co, conv_params.filters.at4(ky, kx, ci, co));
                    }
                }
            }
        }
        let input = Tensor::new(&[7, 7, 2], (0..98).map(|v| (v as f32 * 0.37).cos()).collect()).unwrap();
        let (a, _) = layer_forward(&conv_spec, &input, &conv_params, &mut rng, false).unwrap();
        let (b, _) = layer_forward(&coord_spec, &input, &coord_params, &mut rng, false).unwrap();
        assert_eq!(a.shape(), b.shape());
        for (x, y) in a.data().iter().zip(b.data()) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn zero_upstream_zero_grads() {
        let spec = LayerSpec::new(LayerVariant::GeoConv, geom(3, 1, 1, 1, 2), Activation::LeakyRelu);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let params = spec.init_params(&mut rng);
        let input = Tensor::filled(&[5, 5, 1], 0.7);
        let (out, cache) = layer_forward(&spec, &input, &params, &mut rng, true).unwrap();
        let grads = layer_backward(&spec, &params, &cache, &Tensor::zeros(out.shape())).unwrap();
        assert!(grads.grad_input.data().iter().all(|&v| v == 0.0));
        assert!(grads.grad_filters.data().iter().all(|&v| v == 0.0));
        assert!(grads.grad_bias.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn geopos_plane_filter_grad_is_correlation_with_channel() {
        let spec = {
            let mut s = LayerSpec::new(LayerVariant::GeoConv, geom(3, 1, 0, 1, 1), Activation::None);
            s.shift_policy = ShiftPolicy::fixed(0.25);
            s
        };
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let params = spec.init_params(&mut rng);
        let input = Tensor::new(&[5, 5, 1], (0..25).map(|v| (v as f32).sin()).collect()).unwrap();
        let (out, cache) = layer_forward(&spec, &input, &params, &mut rng, true).unwrap();
        let up = Tensor::new(out.shape(), (0..out.len()).map(|v| (v as f32 * 0.7).cos()).collect()).unwrap();
        let grads = layer_backward(&spec, &params, &cache, &up).unwrap();
        // grad of the GeoPos-plane filter = cross-correlation of upstream with
        // the GeoPos channel.
        let g = crate::geopos::geopos_channel(&crate::geopos::GeoChannelSpec::normalized(5, 5), 0.25);
        for ky in 0..3 {
            for kx in 0..3 {
                let mut expect = 0.0f64;
                for oy in 0..3 {
                    for ox in 0..3 {
                        expect += up.at3(oy, ox, 0) as f64 * g.at2(oy + ky, ox + kx) as f64;
                    }
                }
                let got = grads.grad_filters.at4(ky, kx, 1, 0);
                assert!((got as f64 - expect).abs() < 1e-4, "{got} vs {expect}");
            }
        }
    }

    #[test]
    fn channel_mismatch_is_config_error() {
        let spec = LayerSpec::new(LayerVariant::GeoConv, geom(3, 1, 0, 2, 1), Activation::None);
        let params = LayerParams {
            // conv-sized filters for a geoconv spec
            filters: Tensor::zeros(&[3, 3, 2, 1]),
            bias: Tensor::zeros(&[1]),
        };
        let input = Tensor::zeros(&[5, 5, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let err = layer_forward(&spec, &input, &params, &mut rng, true).unwrap_err();
        assert!(matches!(err, GeoError::Config(_)), "{err}");
    }

    #[test]
    fn flop_formulas() {
        let mk = |v| LayerSpec::new(v, geom(3, 1, 1, 3, 8), Activation::None);
        let conv = count_flops(&mk(LayerVariant::Conv), (32, 32)).unwrap();
        let geo = count_flops(&mk(LayerVariant::GeoConv), (32, 32)).unwrap();
        let coord = count_flops(&mk(LayerVariant::CoordConv), (32, 32)).unwrap();
        assert_eq!(conv.h_out, 32);
        // 2 * 32 * 32 * 3 * 3 * C_eff * 8 with C_eff = 3 / 4 / 5.
        assert_eq!(conv.flops, 442_368);
        assert_eq!(geo.flops, 589_824);
        assert_eq!(coord.flops, 737_280);
        // CoordConv adds twice the extra FLOPs of GeoConv.
        assert_eq!(coord.flops - conv.flops, 2 * (geo.flops - conv.flops));
        // params(coordconv) - params(geoconv) == l * s1 * s2
        assert_eq!(coord.params - geo.params, 8 * 9);
    }
}
