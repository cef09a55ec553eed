//! Dense row-major tensors of `f64` and the forward kernels used by the
//! supported layer set.
//!
//! Every kernel validates shapes up front and rejects non-finite results, so a
//! `Tensor` handed out by this module never contains NaN or infinity.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} holds {numel} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Self { shape, data })
    }

    /// 1-D tensor from a vector. Panics on empty or non-finite input.
    pub fn from_vec(data: Vec<f64>) -> Self {
        Self::new(vec![data.len()], data).expect("valid 1-D tensor")
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.numel() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        finite(
            "map",
            self.shape.clone(),
            self.data.iter().map(|&v| f(v)).collect(),
        )
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        same_shape(self, other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Every element rounded through `f32`, the on-disk precision.
    pub fn round_to_f32(&self) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| v as f32 as f64).collect(),
        }
    }

    pub(crate) fn from_parts_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }
}

fn finite(op: &'static str, shape: Vec<usize>, data: Vec<f64>) -> Result<Tensor> {
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(op));
    }
    Ok(Tensor { shape, data })
}

fn same_shape(a: &Tensor, b: &Tensor, op: &str) -> Result<()> {
    if a.shape != b.shape {
        return Err(Error::Shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape, b.shape
        )));
    }
    Ok(())
}

fn dims3(x: &Tensor, op: &str) -> Result<(usize, usize, usize)> {
    match *x.shape() {
        [c, h, w] => Ok((c, h, w)),
        ref s => Err(Error::Shape(format!("{op} expects [C,H,W], got {s:?}"))),
    }
}

/// Output spatial extent of a sliding window.
pub fn window_out(size: usize, kernel: usize, stride: usize, padding: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::InvalidArgument("stride must be positive".into()));
    }
    if kernel == 0 || kernel > size + 2 * padding {
        return Err(Error::Shape(format!(
            "window {kernel} does not fit extent {size} with padding {padding}"
        )));
    }
    Ok((size + 2 * padding - kernel) / stride + 1)
}

/// `y = W x + b` for `x: [in]`, `W: [out, in]`, `b: [out]`.
pub fn linear(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (out, inp) = match *w.shape() {
        [o, i] => (o, i),
        ref s => {
            return Err(Error::Shape(format!(
                "linear weight must be 2-D, got {s:?}"
            )))
        }
    };
    if x.shape() != [inp] {
        return Err(Error::Shape(format!(
            "linear expects input [{inp}], got {:?}",
            x.shape()
        )));
    }
    if b.shape() != [out] {
        return Err(Error::Shape(format!(
            "linear bias must be [{out}], got {:?}",
            b.shape()
        )));
    }
    let xd = x.data();
    let y = w
        .data()
        .chunks_exact(inp)
        .zip(b.data())
        .map(|(row, bias)| row.iter().zip(xd).map(|(a, v)| a * v).sum::<f64>() + bias)
        .collect();
    finite("linear", vec![out], y)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl Conv2dGeometry {
    pub fn resolve(
        x: &Tensor,
        k: &Tensor,
        b: &Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Self> {
        let (c, h, w) = dims3(x, "conv2d")?;
        let (f, kc, kh, kw) = match *k.shape() {
            [f, kc, kh, kw] => (f, kc, kh, kw),
            ref s => {
                return Err(Error::Shape(format!(
                    "conv2d kernel must be 4-D, got {s:?}"
                )))
            }
        };
        if kc != c {
            return Err(Error::Shape(format!(
                "conv2d kernel has {kc} input channels, input has {c}"
            )));
        }
        if b.shape() != [f] {
            return Err(Error::Shape(format!(
                "conv2d bias must be [{f}], got {:?}",
                b.shape()
            )));
        }
        Ok(Self {
            in_channels: c,
            height: h,
            width: w,
            filters: f,
            kernel_h: kh,
            kernel_w: kw,
            stride,
            padding,
            out_h: window_out(h, kh, stride, padding)?,
            out_w: window_out(w, kw, stride, padding)?,
        })
    }

    /// Input coordinate for output position `o` and kernel tap `k`, if it
    /// falls inside the unpadded input.
    #[inline]
    pub(crate) fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let pos = (o * self.stride + k) as isize - self.padding as isize;
        (pos >= 0 && (pos as usize) < extent).then_some(pos as usize)
    }
}

/// Cross-correlation (no kernel flip) plus per-filter bias.
pub fn conv2d(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let g = Conv2dGeometry::resolve(x, k, b, stride, padding)?;
    let (xd, kd) = (x.data(), k.data());
    let mut out = vec![0.0; g.filters * g.out_h * g.out_w];
    for f in 0..g.filters {
        let plane = &mut out[f * g.out_h * g.out_w..(f + 1) * g.out_h * g.out_w];
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let mut acc = 0.0;
                for c in 0..g.in_channels {
                    for ky in 0..g.kernel_h {
                        let Some(iy) = g.source(oy, ky, g.height) else {
                            continue;
                        };
                        let krow = ((f * g.in_channels + c) * g.kernel_h + ky) * g.kernel_w;
                        let xrow = (c * g.height + iy) * g.width;
                        for kx in 0..g.kernel_w {
                            if let Some(ix) = g.source(ox, kx, g.width) {
                                acc += kd[krow + kx] * xd[xrow + ix];
                            }
                        }
                    }
                }
                plane[oy * g.out_w + ox] = acc + b.data()[f];
            }
        }
    }
    finite("conv2d", vec![g.filters, g.out_h, g.out_w], out)
}

pub fn relu(x: &Tensor) -> Tensor {
    Tensor {
        shape: x.shape.clone(),
        data: x
            .data
            .iter()
            .map(|&v| if v > 0.0 { v } else { 0.0 })
            .collect(),
    }
}

/// Frozen batch-norm constants for one layer, indexed by channel (the
/// leading dimension of the activation).
#[derive(Clone, Copy, Debug)]
pub struct BatchNormParams<'a> {
    pub mean: &'a Tensor,
    pub var: &'a Tensor,
    pub scale: &'a Tensor,
    pub shift: &'a Tensor,
    pub eps: f64,
}

impl BatchNormParams<'_> {
    pub(crate) fn check(&self, x: &Tensor) -> Result<(usize, usize)> {
        let channels = *x
            .shape()
            .first()
            .ok_or_else(|| Error::Shape("batchnorm on scalar".into()))?;
        for (name, t) in [
            ("mean", self.mean),
            ("var", self.var),
            ("scale", self.scale),
            ("shift", self.shift),
        ] {
            if t.shape() != [channels] {
                return Err(Error::Shape(format!(
                    "batchnorm {name} must be [{channels}], got {:?}",
                    t.shape()
                )));
            }
        }
        if self.var.data().iter().any(|&v| v < 0.0) {
            return Err(Error::InvalidArgument(
                "batchnorm variance is negative".into(),
            ));
        }
        if self.eps < 0.0 {
            return Err(Error::InvalidArgument("batchnorm eps is negative".into()));
        }
        Ok((channels, x.numel() / channels))
    }

    #[inline]
    pub(crate) fn inv_std(&self, c: usize) -> f64 {
        1.0 / (self.var.data()[c] + self.eps).sqrt()
    }
}

/// `(x - mean) / sqrt(var + eps) * scale + shift`, per channel.
pub fn batchnorm(x: &Tensor, p: &BatchNormParams<'_>) -> Result<Tensor> {
    let (channels, per) = p.check(x)?;
    let mut out = Vec::with_capacity(x.numel());
    for c in 0..channels {
        let inv = p.inv_std(c);
        let (m, s, t) = (p.mean.data()[c], p.scale.data()[c], p.shift.data()[c]);
        out.extend(
            x.data()[c * per..(c + 1) * per]
                .iter()
                .map(|&v| (v - m) * inv * s + t),
        );
    }
    finite("batchnorm", x.shape.clone(), out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct PoolGeometry {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kernel: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl PoolGeometry {
    pub fn resolve(x: &Tensor, kernel: usize, stride: usize) -> Result<Self> {
        let (c, h, w) = dims3(x, "pool")?;
        Ok(Self {
            channels: c,
            height: h,
            width: w,
            kernel,
            stride,
            out_h: window_out(h, kernel, stride, 0)?,
            out_w: window_out(w, kernel, stride, 0)?,
        })
    }

    pub fn window(&self, c: usize, oy: usize, ox: usize) -> impl Iterator<Item = usize> + '_ {
        let base = c * self.height * self.width;
        (0..self.kernel).flat_map(move |ky| {
            let row = base + (oy * self.stride + ky) * self.width + ox * self.stride;
            row..row + self.kernel
        })
    }

    pub fn out_shape(&self) -> Vec<usize> {
        vec![self.channels, self.out_h, self.out_w]
    }
}

/// Max pooling; also returns the flat input index chosen for every output
/// (first maximum on ties).
pub fn maxpool2d_with_indices(
    x: &Tensor,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor, Vec<usize>)> {
    let g = PoolGeometry::resolve(x, kernel, stride)?;
    let xd = x.data();
    let mut out = Vec::with_capacity(g.channels * g.out_h * g.out_w);
    let mut arg = Vec::with_capacity(out.capacity());
    for c in 0..g.channels {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                let best = g
                    .window(c, oy, ox)
                    .reduce(|a, i| if xd[i] > xd[a] { i } else { a })
                    .expect("non-empty window");
                out.push(xd[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::from_parts_unchecked(g.out_shape(), out), arg))
}

pub fn maxpool2d(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    maxpool2d_with_indices(x, kernel, stride).map(|(t, _)| t)
}

pub fn avgpool2d(x: &Tensor, kernel: usize, stride: usize) -> Result<Tensor> {
    let g = PoolGeometry::resolve(x, kernel, stride)?;
    let xd = x.data();
    let norm = (kernel * kernel) as f64;
    let mut out = Vec::with_capacity(g.channels * g.out_h * g.out_w);
    for c in 0..g.channels {
        for oy in 0..g.out_h {
            for ox in 0..g.out_w {
                out.push(g.window(c, oy, ox).map(|i| xd[i]).sum::<f64>() / norm);
            }
        }
    }
    Ok(Tensor::from_parts_unchecked(g.out_shape(), out))
}

pub fn add(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    same_shape(a, b, "add")?;
    finite(
        "add",
        a.shape.clone(),
        a.data.iter().zip(&b.data).map(|(x, y)| x + y).collect(),
    )
}

/// Numerically stable softmax over all elements.
pub fn softmax(x: &Tensor) -> Tensor {
    let max = x.data.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = x.data.iter().map(|&v| (v - max).exp()).collect();
    let total: f64 = exp.iter().sum();
    Tensor {
        shape: x.shape.clone(),
        data: exp.into_iter().map(|e| e / total).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn tensor_rejects_bad_construction() {
        assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
        assert!(Tensor::new(vec![1], vec![f64::NAN]).is_err());
        assert!(Tensor::new(vec![0], vec![]).is_err());
    }

    #[test]
    fn linear_examples() {
        let id = t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]);
        let y = linear(&Tensor::from_vec(vec![3.0, 4.0]), &id, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y.data(), &[3.0, 4.0]);

        let y = linear(
            &Tensor::from_vec(vec![3.0, 4.0]),
            &t(&[1, 2], &[1.0, 2.0]),
            &Tensor::from_vec(vec![1.0]),
        )
        .unwrap();
        assert_eq!(y.data(), &[12.0]);

        let y = linear(
            &Tensor::from_vec(vec![5.0, 5.0]),
            &Tensor::zeros(&[1, 2]),
            &Tensor::from_vec(vec![-2.0]),
        )
        .unwrap();
        assert_eq!(y.data(), &[-2.0]);
    }

    #[test]
    fn linear_shape_mismatch() {
        let err = linear(
            &Tensor::from_vec(vec![1.0, 2.0, 3.0]),
            &Tensor::zeros(&[1, 2]),
            &Tensor::zeros(&[1]),
        );
        assert!(matches!(err, Err(Error::Shape(_))));
    }

    #[test]
    fn linear_overflow_is_an_error() {
        let y = linear(
            &Tensor::from_vec(vec![1e300, 1e300]),
            &t(&[1, 2], &[1e10, 1e10]),
            &Tensor::zeros(&[1]),
        );
        assert!(matches!(y, Err(Error::NonFinite(_))));
    }

    #[test]
    fn conv2d_examples() {
        let x = t(&[1, 2, 2], &[1.0, 2.0, 3.0, 4.0]);
        let id = conv2d(&x, &t(&[1, 1, 1, 1], &[1.0]), &Tensor::zeros(&[1]), 1, 0).unwrap();
        assert_eq!(id, x);

        let s = conv2d(
            &x,
            &Tensor::filled(&[1, 1, 2, 2], 1.0),
            &Tensor::zeros(&[1]),
            1,
            0,
        )
        .unwrap();
        assert_eq!(s.shape(), &[1, 1, 1]);
        assert_eq!(s.data(), &[10.0]);

        let z = conv2d(
            &x,
            &Tensor::zeros(&[1, 1, 2, 2]),
            &Tensor::from_vec(vec![7.0]),
            1,
            1,
        )
        .unwrap();
        assert_eq!(z.shape(), &[1, 3, 3]);
        assert!(z.data().iter().all(|&v| v == 7.0));
    }

    #[test]
    fn conv2d_output_geometry() {
        let x = Tensor::zeros(&[2, 7, 5]);
        let k = Tensor::zeros(&[3, 2, 3, 2]);
        let y = conv2d(&x, &k, &Tensor::zeros(&[3]), 2, 1).unwrap();
        assert_eq!(y.shape(), &[3, (7 + 2 - 3) / 2 + 1, (5 + 2 - 2) / 2 + 1]);
    }

    #[test]
    fn conv2d_errors() {
        let x = Tensor::zeros(&[1, 2, 2]);
        assert!(conv2d(
            &x,
            &Tensor::zeros(&[1, 1, 3, 3]),
            &Tensor::zeros(&[1]),
            1,
            0
        )
        .is_err());
        assert!(matches!(
            conv2d(
                &x,
                &Tensor::zeros(&[1, 1, 1, 1]),
                &Tensor::zeros(&[1]),
                0,
                0
            ),
            Err(Error::InvalidArgument(_))
        ));
        assert!(conv2d(
            &x,
            &Tensor::zeros(&[1, 2, 1, 1]),
            &Tensor::zeros(&[1]),
            1,
            0
        )
        .is_err());
    }

    #[test]
    fn relu_examples() {
        assert_eq!(
            relu(&Tensor::from_vec(vec![-1.0, 0.0, 2.0])).data(),
            &[0.0, 0.0, 2.0]
        );
        assert_eq!(relu(&Tensor::from_vec(vec![1.0, 3.0])).data(), &[1.0, 3.0]);
        assert_eq!(relu(&Tensor::from_vec(vec![-5.0])).data(), &[0.0]);
    }

    fn bn(x: f64, mean: f64, var: f64, scale: f64, shift: f64, eps: f64) -> f64 {
        let (m, v, s, h) = (
            Tensor::from_vec(vec![mean]),
            Tensor::from_vec(vec![var]),
            Tensor::from_vec(vec![scale]),
            Tensor::from_vec(vec![shift]),
        );
        let p = BatchNormParams {
            mean: &m,
            var: &v,
            scale: &s,
            shift: &h,
            eps,
        };
        batchnorm(&Tensor::from_vec(vec![x]), &p).unwrap().data()[0]
    }

    #[test]
    fn batchnorm_examples() {
        assert_eq!(bn(1.7, 0.0, 1.0, 1.0, 0.0, 0.0), 1.7);
        assert_eq!(bn(2.0, 2.0, 4.0, 1.0, 0.0, 0.0), 0.0);
        assert_eq!(bn(4.0, 2.0, 4.0, 3.0, 1.0, 0.0), 4.0);
    }

    #[test]
    fn batchnorm_is_per_channel() {
        let x = t(&[2, 1, 2], &[1.0, 2.0, 3.0, 4.0]);
        let mean = Tensor::from_vec(vec![1.0, 3.0]);
        let var = Tensor::from_vec(vec![1.0, 1.0]);
        let scale = Tensor::from_vec(vec![1.0, 2.0]);
        let shift = Tensor::from_vec(vec![0.0, 10.0]);
        let p = BatchNormParams {
            mean: &mean,
            var: &var,
            scale: &scale,
            shift: &shift,
            eps: 0.0,
        };
        assert_eq!(batchnorm(&x, &p).unwrap().data(), &[0.0, 1.0, 10.0, 12.0]);
        let short = Tensor::from_vec(vec![0.0]);
        let bad = BatchNormParams { mean: &short, ..p };
        assert!(batchnorm(&x, &bad).is_err());
    }

    #[test]
    fn pooling() {
        let x = t(&[1, 2, 4], &[1.0, 5.0, 2.0, 0.0, 3.0, 4.0, 8.0, 6.0]);
        let (m, idx) = maxpool2d_with_indices(&x, 2, 2).unwrap();
        assert_eq!(m.shape(), &[1, 1, 2]);
        assert_eq!(m.data(), &[5.0, 8.0]);
        assert_eq!(idx, vec![1, 6]);
        let a = avgpool2d(&x, 2, 2).unwrap();
        assert_eq!(a.data(), &[13.0 / 4.0, 16.0 / 4.0]);
        assert!(maxpool2d(&x, 3, 1).is_err());
    }

    #[test]
    fn residual_add_examples() {
        let a = Tensor::from_vec(vec![1.0, 2.0]);
        assert_eq!(add(&a, &Tensor::zeros(&[2])).unwrap(), a);
        assert_eq!(
            add(&a, &Tensor::from_vec(vec![3.0, 4.0])).unwrap().data(),
            &[4.0, 6.0]
        );
        let neg = a.map(|v| -v).unwrap();
        assert_eq!(add(&a, &neg).unwrap().data(), &[0.0, 0.0]);
        assert!(add(&a, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn softmax_examples() {
        let s = softmax(&Tensor::from_vec(vec![2.5; 3]));
        for v in s.data() {
            assert_abs_diff_eq!(*v, 1.0 / 3.0, epsilon = 1e-15);
        }
        let s = softmax(&Tensor::from_vec(vec![0.0, 3f64.ln()]));
        assert_abs_diff_eq!(s.data()[0], 0.25, epsilon = 1e-15);
        assert_abs_diff_eq!(s.data()[1], 0.75, epsilon = 1e-15);
        assert_eq!(softmax(&Tensor::from_vec(vec![-40.0])).data(), &[1.0]);
    }

    #[test]
    fn softmax_survives_large_logits() {
        let s = softmax(&Tensor::from_vec(vec![1000.0, 1000.0]));
        assert_eq!(s.data(), &[0.5, 0.5]);
    }

    fn vec_strategy(len: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-10.0f64..10.0, len)
    }

    proptest! {
        #[test]
        fn softmax_normalized_and_shift_invariant(v in prop::collection::vec(-30.0f64..30.0, 1..40), c in -50.0f64..50.0) {
            let x = Tensor::from_vec(v.clone());
            let s = softmax(&x);
            prop_assert!((s.sum() - 1.0).abs() <= 1e-12);
            prop_assert!(s.data().iter().all(|&p| p > 0.0 && p <= 1.0));
            let shifted = softmax(&Tensor::from_vec(v.iter().map(|a| a + c).collect()));
            for (a, b) in s.data().iter().zip(shifted.data()) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn linear_is_homogeneous(x in vec_strategy(5), w in vec_strategy(15), alpha in -4.0f64..4.0) {
            let x = Tensor::from_vec(x);
            let w = Tensor::new(vec![3, 5], w).unwrap();
            let b = Tensor::zeros(&[3]);
            let fx = linear(&x, &w, &b).unwrap();
            let fax = linear(&x.map(|v| alpha * v).unwrap(), &w, &b).unwrap();
            for (a, s) in fx.data().iter().zip(fax.data()) {
                prop_assert!((alpha * a - s).abs() <= 1e-10 * (1.0 + s.abs()));
            }
        }

        #[test]
        fn conv2d_is_homogeneous(x in vec_strategy(2 * 5 * 4), k in vec_strategy(3 * 2 * 3 * 3), alpha in -4.0f64..4.0) {
            let x = Tensor::new(vec![2, 5, 4], x).unwrap();
            let k = Tensor::new(vec![3, 2, 3, 3], k).unwrap();
            let b = Tensor::zeros(&[3]);
            let fx = conv2d(&x, &k, &b, 1, 1).unwrap();
            let fax = conv2d(&x.map(|v| alpha * v).unwrap(), &k, &b, 1, 1).unwrap();
            for (a, s) in fx.data().iter().zip(fax.data()) {
                prop_assert!((alpha * a - s).abs() <= 1e-10 * (1.0 + s.abs()));
            }
        }

        #[test]
        fn add_commutes(a in vec_strategy(6), b in vec_strategy(6)) {
            let (a, b) = (Tensor::from_vec(a), Tensor::from_vec(b));
            prop_assert_eq!(add(&a, &b).unwrap(), add(&b, &a).unwrap());
        }
    }
}
