//! Dense rank-<=4 tensors and exact 2-D convolution (cross-correlation)
//! forward/backward. Storage is f32, reductions accumulate in f64 with a
//! fixed iteration order so results are deterministic.

use crate::error::{GeoError, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f32>) -> Result<Tensor> {
        if shape.is_empty() || shape.len() > 4 {
            return Err(GeoError::dim("Tensor::new", "rank 1..=4", format!("rank {}", shape.len())));
        }
        if shape.iter().any(|&e| e == 0) {
            // Rank-4 dataset tensors allow N == 0 (empty dataset); every other
            // extent must be >= 1.
            let n_zero_ok = shape.len() == 4 && shape[0] == 0 && shape[1..].iter().all(|&e| e >= 1);
            if !n_zero_ok && !(shape.len() == 2 && shape[0] == 0) {
                return Err(GeoError::dim("Tensor::new", "all extents >= 1", format!("{shape:?}")));
            }
        }
        let expect: usize = shape.iter().product();
        if expect != data.len() {
            return Err(GeoError::dim(
                "Tensor::new",
                format!("{expect} elements for shape {shape:?}"),
                format!("{}", data.len()),
            ));
        }
        Ok(Tensor { shape: shape.to_vec(), data })
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![0.0; n] }
    }

    pub fn filled(shape: &[usize], value: f32) -> Tensor {
        let n: usize = shape.iter().product();
        Tensor { shape: shape.to_vec(), data: vec![value; n] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn at2(&self, i: usize, j: usize) -> f32 {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    pub fn at3(&self, i: usize, j: usize, k: usize) -> f32 {
        debug_assert_eq!(self.rank(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    pub fn at4(&self, i: usize, j: usize, k: usize, l: usize) -> f32 {
        debug_assert_eq!(self.rank(), 4);
        self.data[((i * self.shape[1] + j) * self.shape[2] + k) * self.shape[3] + l]
    }

    pub fn set2(&mut self, i: usize, j: usize, v: f32) {
        let w = self.shape[1];
        self.data[i * w + j] = v;
    }

    pub fn set3(&mut self, i: usize, j: usize, k: usize, v: f32) {
        let (s1, s2) = (self.shape[1], self.shape[2]);
        self.data[(i * s1 + j) * s2 + k] = v;
    }

    pub fn set4(&mut self, i: usize, j: usize, k: usize, l: usize, v: f32) {
        let (s1, s2, s3) = (self.shape[1], self.shape[2], self.shape[3]);
        self.data[((i * s1 + j) * s2 + k) * s3 + l] = v;
    }

    /// Flatten to rank 1 without copying the payload.
    pub fn flattened(&self) -> Tensor {
        Tensor { shape: vec![self.data.len()], data: self.data.clone() }
    }

    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    /// f64-accumulated dot product with a fixed order.
    pub fn dot(&self, other: &Tensor) -> f64 {
        debug_assert_eq!(self.len(), other.len());
        self.data
            .iter()
            .zip(other.data.iter())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().map(|&v| v as f64).sum()
    }

    pub fn max_abs(&self) -> f32 {
        self.data.iter().fold(0.0f32, |m, &v| m.max(v.abs()))
    }
}

/// Geometry of one 2-D convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct ConvGeometry {
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvGeometry {
    pub fn validate(&self) -> Result<()> {
        if self.kernel_h < 1 || self.kernel_w < 1 || self.stride < 1 || self.in_channels < 1 || self.out_channels < 1 {
            return Err(GeoError::Config(format!("invalid convolution geometry {self:?}")));
        }
        Ok(())
    }

    /// `floor((extent - kernel + 2*padding) / stride) + 1`
    pub fn output_extent(extent: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
        let padded = extent + 2 * padding;
        if padded < kernel {
            return Err(GeoError::Config(format!(
                "kernel {kernel} does not fit input extent {extent} with padding {padding}"
            )));
        }
        Ok((padded - kernel) / stride + 1)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let oh = Self::output_extent(h, self.kernel_h, self.stride, self.padding)?;
        let ow = Self::output_extent(w, self.kernel_w, self.stride, self.padding)?;
        Ok((oh, ow))
    }
}

fn check_conv_shapes(input: &Tensor, filters: &Tensor, geom: &ConvGeometry) -> Result<(usize, usize, usize, usize)> {
    geom.validate()?;
    if input.rank() != 3 {
        return Err(GeoError::dim("conv2d input", "rank 3 [H,W,C]", format!("{:?}", input.shape())));
    }
    if filters.rank() != 4 {
        return Err(GeoError::dim("conv2d filters", "rank 4 [KH,KW,Cin,Cout]", format!("{:?}", filters.shape())));
    }
    let expect = [geom.kernel_h, geom.kernel_w, geom.in_channels, geom.out_channels];
    if filters.shape() != expect {
        return Err(GeoError::dim("conv2d filters", format!("{expect:?}"), format!("{:?}", filters.shape())));
    }
    if input.shape()[2] != geom.in_channels {
        return Err(GeoError::dim(
            "conv2d input channels (axis 2)",
            format!("{}", geom.in_channels),
            format!("{}", input.shape()[2]),
        ));
    }
    let (oh, ow) = geom.output_hw(input.shape()[0], input.shape()[1])?;
    Ok((input.shape()[0], input.shape()[1], oh, ow))
}

/// Cross-correlation with zero padding outside the input, plus bias.
pub fn conv2d_forward(input: &Tensor, filters: &Tensor, bias: &Tensor, geom: &ConvGeometry) -> Result<Tensor> {
    let (h, w, oh, ow) = check_conv_shapes(input, filters, geom)?;
    if bias.shape() != [geom.out_channels] {
        return Err(GeoError::dim("conv2d bias", format!("[{}]", geom.out_channels), format!("{:?}", bias.shape())));
    }
    let (kh, kw, cin, cout) = (geom.kernel_h, geom.kernel_w, geom.in_channels, geom.out_channels);
    let (stride, pad) = (geom.stride, geom.padding as isize);

    let mut out = Tensor::zeros(&[oh, ow, cout]);
    let mut acc = vec![0.0f64; cout];
    for oy in 0..oh {
        for ox in 0..ow {
            for c in acc.iter_mut() {
                *c = 0.0;
            }
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let in_base = ((iy as usize) * w + ix as usize) * cin;
                    let f_base = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let x = input.data()[in_base + ci] as f64;
                        let fb = f_base + ci * cout;
                        for co in 0..cout {
                            acc[co] += x * filters.data()[fb + co] as f64;
                        }
                    }
                }
            }
            let out_base = (oy * ow + ox) * cout;
            for co in 0..cout {
                out.data_mut()[out_base + co] = (acc[co] + bias.data()[co] as f64) as f32;
            }
        }
    }
    Ok(out)
}

/// Exact adjoints of [`conv2d_forward`] with respect to input, filters, and bias.
pub fn conv2d_backward(
    input: &Tensor,
    filters: &Tensor,
    geom: &ConvGeometry,
    upstream: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (h, w, oh, ow) = check_conv_shapes(input, filters, geom)?;
    if upstream.shape() != [oh, ow, geom.out_channels] {
        return Err(GeoError::dim(
            "conv2d upstream gradient",
            format!("[{oh}, {ow}, {}]", geom.out_channels),
            format!("{:?}", upstream.shape()),
        ));
    }
    let (kh, kw, cin, cout) = (geom.kernel_h, geom.kernel_w, geom.in_channels, geom.out_channels);
    let (stride, pad) = (geom.stride, geom.padding as isize);

    let mut gin = vec![0.0f64; h * w * cin];
    let mut gfil = vec![0.0f64; kh * kw * cin * cout];
    let mut gbias = vec![0.0f64; cout];

    for oy in 0..oh {
        for ox in 0..ow {
            let up_base = (oy * ow + ox) * cout;
            for co in 0..cout {
                gbias[co] += upstream.data()[up_base + co] as f64;
            }
            for ky in 0..kh {
                let iy = (oy * stride + ky) as isize - pad;
                if iy < 0 || iy >= h as isize {
                    continue;
                }
                for kx in 0..kw {
                    let ix = (ox * stride + kx) as isize - pad;
                    if ix < 0 || ix >= w as isize {
                        continue;
                    }
                    let in_base = ((iy as usize) * w + ix as usize) * cin;
                    let f_base = (ky * kw + kx) * cin * cout;
                    for ci in 0..cin {
                        let x = input.data()[in_base + ci] as f64;
                        let fb = f_base + ci * cout;
                        let mut g = 0.0f64;
                        for co in 0..cout {
                            let u = upstream.data()[up_base + co] as f64;
                            gfil[fb + co] += u * x;
                            g += u * filters.data()[fb + co] as f64;
                        }
                        gin[in_base + ci] += g;
                    }
                }
            }
        }
    }

    let grad_input = Tensor::new(&[h, w, cin], gin.into_iter().map(|v| v as f32).collect())?;
    let grad_filters = Tensor::new(&[kh, kw, cin, cout], gfil.into_iter().map(|v| v as f32).collect())?;
    let grad_bias = Tensor::new(&[cout], gbias.into_iter().map(|v| v as f32).collect())?;
    Ok((grad_input, grad_filters, grad_bias))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn geom(k: usize, s: usize, p: usize, cin: usize, cout: usize) -> ConvGeometry {
        ConvGeometry { kernel_h: k, kernel_w: k, stride: s, padding: p, in_channels: cin, out_channels: cout }
    }

    #[test]
    fn scalar_product() {
        let input = Tensor::new(&[1, 1, 1], vec![5.0]).unwrap();
        let f = Tensor::new(&[1, 1, 1, 1], vec![2.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let out = conv2d_forward(&input, &f, &b, &geom(1, 1, 0, 1, 1)).unwrap();
        assert_eq!(out.data(), &[10.0]);
    }

    #[test]
    fn sum_of_ones() {
        let input = Tensor::filled(&[3, 3, 1], 1.0);
        let f = Tensor::filled(&[3, 3, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        let out = conv2d_forward(&input, &f, &b, &geom(3, 1, 0, 1, 1)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 1]);
        assert_eq!(out.data(), &[9.0]);
    }

    #[test]
    fn ramp_average_stride_two() {
        // 4x4 ramp input[i][j] = i*4 + j, 2x2 averaging filter, stride 2.
        let data: Vec<f32> = (0..16).map(|v| v as f32).collect();
        let input = Tensor::new(&[4, 4, 1], data).unwrap();
        let f = Tensor::filled(&[2, 2, 1, 1], 0.25);
        let b = Tensor::zeros(&[1]);
        let out = conv2d_forward(&input, &f, &b, &geom(2, 2, 0, 1, 1)).unwrap();
        assert_eq!(out.shape(), &[2, 2, 1]);
        assert_eq!(out.data(), &[2.5, 4.5, 10.5, 12.5]);
    }

    #[test]
    fn identity_filter_is_identity_map() {
        let data: Vec<f32> = (0..25).map(|v| (v as f32).sin()).collect();
        let input = Tensor::new(&[5, 5, 1], data.clone()).unwrap();
        let f = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
        let b = Tensor::zeros(&[1]);
        let out = conv2d_forward(&input, &f, &b, &geom(1, 1, 0, 1, 1)).unwrap();
        assert_eq!(out.data(), &data[..]);
    }

    #[test]
    fn output_shape_formula() {
        for (h, k, s, p) in [(32, 3, 2, 0), (32, 3, 1, 1), (7, 3, 2, 1), (5, 5, 1, 0)] {
            let g = geom(k, s, p, 1, 1);
            let input = Tensor::zeros(&[h, h, 1]);
            let f = Tensor::zeros(&[k, k, 1, 1]);
            let out = conv2d_forward(&input, &f, &Tensor::zeros(&[1]), &g).unwrap();
            let expect = (h - k + 2 * p) / s + 1;
            assert_eq!(out.shape(), &[expect, expect, 1]);
        }
    }

    #[test]
    fn zero_upstream_gives_zero_grads() {
        let input = Tensor::filled(&[4, 4, 2], 1.5);
        let f = Tensor::filled(&[3, 3, 2, 2], 0.5);
        let g = geom(3, 1, 0, 2, 2);
        let up = Tensor::zeros(&[2, 2, 2]);
        let (gi, gf, gb) = conv2d_backward(&input, &f, &g, &up).unwrap();
        assert!(gi.data().iter().all(|&v| v == 0.0));
        assert!(gf.data().iter().all(|&v| v == 0.0));
        assert!(gb.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn one_by_one_kernel_filter_grad_is_channel_sum() {
        let data: Vec<f32> = (0..18).map(|v| v as f32 * 0.1).collect();
        let input = Tensor::new(&[3, 3, 2], data).unwrap();
        let f = Tensor::zeros(&[1, 1, 2, 1]);
        let g = geom(1, 1, 0, 2, 1);
        let up = Tensor::filled(&[3, 3, 1], 1.0);
        let (_, gf, gb) = conv2d_backward(&input, &f, &g, &up).unwrap();
        for c in 0..2 {
            let sum: f32 = (0..3).flat_map(|i| (0..3).map(move |j| (i, j))).map(|(i, j)| input.at3(i, j, c)).sum();
            assert!((gf.data()[c] - sum).abs() < 1e-5);
        }
        assert_eq!(gb.data(), &[9.0]);
    }

    #[test]
    fn shape_mismatch_names_axis() {
        let input = Tensor::zeros(&[4, 4, 3]);
        let f = Tensor::zeros(&[3, 3, 2, 1]);
        let g = geom(3, 1, 0, 2, 1);
        let err = conv2d_forward(&input, &f, &Tensor::zeros(&[1]), &g).unwrap_err();
        assert!(err.to_string().contains("axis 2"), "{err}");
    }
}
