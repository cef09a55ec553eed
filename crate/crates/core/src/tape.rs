//! Reverse-mode gradients through the supported layer set.
//!
//! A [`GradTape`] records every operation together with its forward value.
//! Leaves are either constants (no gradient) or tracked variables (the network
//! input, or parameters when training). [`GradTape::backward`] walks the
//! record in reverse and only materializes gradients for nodes that depend on
//! a tracked leaf.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{self, BatchNormParams, Conv2dGeometry, PoolGeometry, Tensor};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Var,
        stride: usize,
        padding: usize,
    },
    Relu(Var),
    BatchNorm {
        x: Var,
        mean: Var,
        var: Var,
        scale: Var,
        shift: Var,
        eps: f64,
    },
    MaxPool {
        x: Var,
        kernel: usize,
        stride: usize,
        argmax: Vec<usize>,
    },
    AvgPool {
        x: Var,
        kernel: usize,
        stride: usize,
    },
    Reshape(Var),
    Add(Var, Var),
    Softmax(Var),
    Sum(Var),
}

#[derive(Clone, Debug)]
struct Node<'a> {
    op: Op,
    value: Cow<'a, Tensor>,
    tracked: bool,
}

#[derive(Clone, Debug, Default)]
pub struct GradTape<'a> {
    nodes: Vec<Node<'a>>,
    input: Option<Var>,
    output: Option<Var>,
}

/// Gradients produced by one reverse pass, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients {
    slots: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not depend on a tracked leaf.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.slots.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.slots.get_mut(v.0).and_then(Option::take)
    }
}

/// Leaf values are either borrowed (parameters) or owned (fresh inputs).
pub trait IntoLeaf<'a> {
    fn into_leaf(self) -> Cow<'a, Tensor>;
}

impl<'a> IntoLeaf<'a> for &'a Tensor {
    fn into_leaf(self) -> Cow<'a, Tensor> {
        Cow::Borrowed(self)
    }
}

impl<'a> IntoLeaf<'a> for Tensor {
    fn into_leaf(self) -> Cow<'a, Tensor> {
        Cow::Owned(self)
    }
}

impl<'a> GradTape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Cow<'a, Tensor>, tracked: bool) -> Var {
        self.nodes.push(Node { op, value, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].tracked)
    }

    /// Constant leaf; no gradient flows into it.
    pub fn constant(&mut self, t: impl IntoLeaf<'a>) -> Var {
        self.push(Op::Leaf, t.into_leaf(), false)
    }

    /// Tracked leaf whose gradient is reported by [`GradTape::backward`].
    pub fn variable(&mut self, t: impl IntoLeaf<'a>) -> Var {
        self.push(Op::Leaf, t.into_leaf(), true)
    }

    /// Tracked leaf designated as the network input.
    pub fn input(&mut self, t: impl IntoLeaf<'a>) -> Var {
        let v = self.variable(t);
        self.input = Some(v);
        v
    }

    pub fn input_var(&self) -> Option<Var> {
        self.input
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = tensor::linear(self.value(x), self.value(w), self.value(b))?;
        let tracked = self.tracked(&[x, w, b]);
        Ok(self.push(Op::Linear { x, w, b }, Cow::Owned(y), tracked))
    }

    pub fn conv2d(&mut self, x: Var, k: Var, b: Var, stride: usize, padding: usize) -> Result<Var> {
        let y = tensor::conv2d(self.value(x), self.value(k), self.value(b), stride, padding)?;
        let tracked = self.tracked(&[x, k, b]);
        Ok(self.push(
            Op::Conv2d {
                x,
                k,
                b,
                stride,
                padding,
            },
            Cow::Owned(y),
            tracked,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = tensor::relu(self.value(x));
        let tracked = self.tracked(&[x]);
        self.push(Op::Relu(x), Cow::Owned(y), tracked)
    }

    pub fn batchnorm(
        &mut self,
        x: Var,
        mean: Var,
        var: Var,
        scale: Var,
        shift: Var,
        eps: f64,
    ) -> Result<Var> {
        let p = BatchNormParams {
            mean: self.value(mean),
            var: self.value(var),
            scale: self.value(scale),
            shift: self.value(shift),
            eps,
        };
        let y = tensor::batchnorm(self.value(x), &p)?;
        let tracked = self.tracked(&[x, scale, shift]);
        Ok(self.push(
            Op::BatchNorm {
                x,
                mean,
                var,
                scale,
                shift,
                eps,
            },
            Cow::Owned(y),
            tracked,
        ))
    }

    pub fn maxpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let (y, argmax) = tensor::maxpool2d_with_indices(self.value(x), kernel, stride)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(
            Op::MaxPool {
                x,
                kernel,
                stride,
                argmax,
            },
            Cow::Owned(y),
            tracked,
        ))
    }

    pub fn avgpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let y = tensor::avgpool2d(self.value(x), kernel, stride)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(Op::AvgPool { x, kernel, stride }, Cow::Owned(y), tracked))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let y = self.value(x).reshape(shape)?;
        let tracked = self.tracked(&[x]);
        Ok(self.push(Op::Reshape(x), Cow::Owned(y), tracked))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let y = tensor::add(self.value(a), self.value(b))?;
        let tracked = self.tracked(&[a, b]);
        Ok(self.push(Op::Add(a, b), Cow::Owned(y), tracked))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let y = tensor::softmax(self.value(x));
        let tracked = self.tracked(&[x]);
        self.push(Op::Softmax(x), Cow::Owned(y), tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let y = Tensor::from_vec(vec![self.value(x).sum()]);
        let tracked = self.tracked(&[x]);
        self.push(Op::Sum(x), Cow::Owned(y), tracked)
    }

    /// Marks `output` as the end of the recorded computation.
    pub fn finalize(&mut self, output: Var) {
        self.output = Some(output);
    }

    pub fn output(&self) -> Option<Var> {
        self.output
    }

    /// Smallest distance of any recorded ReLU pre-activation from zero, or of
    /// any max-pool window's winner from its runner-up. Finite differences
    /// are only meaningful when this exceeds the probe step.
    pub fn kink_margin(&self) -> f64 {
        let mut margin = f64::INFINITY;
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => {
                    for v in self.value(*x).data() {
                        margin = margin.min(v.abs());
                    }
                }
                Op::MaxPool {
                    x,
                    kernel,
                    stride,
                    argmax,
                } => {
                    let xv = self.value(*x);
                    let g = PoolGeometry::resolve(xv, *kernel, *stride).expect("recorded geometry");
                    let mut o = 0;
                    for c in 0..g.channels {
                        for oy in 0..g.out_h {
                            for ox in 0..g.out_w {
                                let best = argmax[o];
                                for i in g.window(c, oy, ox).filter(|&i| i != best) {
                                    margin = margin.min(xv.data()[best] - xv.data()[i]);
                                }
                                o += 1;
                            }
                        }
                    }
                }
                _ => {}
            }
        }
        margin
    }

    /// Recomputes every non-leaf node from the recorded leaves.
    pub fn replay(&self) -> Result<Vec<Tensor>> {
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            let v = |var: &Var| &values[var.0];
            let out = match &node.op {
                Op::Leaf => node.value.clone().into_owned(),
                Op::Linear { x, w, b } => tensor::linear(v(x), v(w), v(b))?,
                Op::Conv2d {
                    x,
                    k,
                    b,
                    stride,
                    padding,
                } => tensor::conv2d(v(x), v(k), v(b), *stride, *padding)?,
                Op::Relu(x) => tensor::relu(v(x)),
                Op::BatchNorm {
                    x,
                    mean,
                    var,
                    scale,
                    shift,
                    eps,
                } => tensor::batchnorm(
                    v(x),
                    &BatchNormParams {
                        mean: v(mean),
                        var: v(var),
                        scale: v(scale),
                        shift: v(shift),
                        eps: *eps,
                    },
                )?,
                Op::MaxPool {
                    x, kernel, stride, ..
                } => tensor::maxpool2d(v(x), *kernel, *stride)?,
                Op::AvgPool { x, kernel, stride } => tensor::avgpool2d(v(x), *kernel, *stride)?,
                Op::Reshape(x) => v(x).reshape(node.value.shape())?,
                Op::Add(a, b) => tensor::add(v(a), v(b))?,
                Op::Softmax(x) => tensor::softmax(v(x)),
                Op::Sum(x) => Tensor::from_vec(vec![v(x).sum()]),
            };
            values.push(out);
        }
        Ok(values)
    }

    /// Reverse pass from the finalized output seeded with `upstream`
    /// (`[1.0]` for a scalar loss).
    pub fn backward(&self, upstream: &Tensor) -> Result<Gradients> {
        let out = self
            .output
            .ok_or_else(|| Error::Tape("tape not finalized".into()))?;
        if upstream.shape() != self.value(out).shape() {
            return Err(Error::Shape(format!(
                "upstream gradient {:?} does not match output {:?}",
                upstream.shape(),
                self.value(out).shape()
            )));
        }
        let mut slots: Vec<Option<Tensor>> = vec![None; out.0 + 1];
        if self.nodes[out.0].tracked {
            slots[out.0] = Some(upstream.clone());
        }
        for i in (0..=out.0).rev() {
            let Some(g) = slots[i].take() else { continue };
            self.propagate(i, &g, &mut slots)?;
            slots[i] = Some(g);
        }
        Ok(Gradients { slots })
    }

    fn accumulate(&self, slots: &mut [Option<Tensor>], v: Var, grad: Vec<f64>) {
        if !self.nodes[v.0].tracked {
            return;
        }
        match &mut slots[v.0] {
            Some(existing) => {
                for (a, b) in existing.data_mut().iter_mut().zip(grad) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::from_parts_unchecked(
                    self.value(v).shape().to_vec(),
                    grad,
                ))
            }
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    fn propagate(&self, i: usize, g: &Tensor, slots: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let wv = self.value(*w);
                let xv = self.value(*x);
                let inp = xv.numel();
                if self.wants(*x) {
                    let mut gx = vec![0.0; inp];
                    for (row, &go) in wv.data().chunks_exact(inp).zip(gd) {
                        for (acc, &wij) in gx.iter_mut().zip(row) {
                            *acc += wij * go;
                        }
                    }
                    self.accumulate(slots, *x, gx);
                }
                if self.wants(*w) {
                    let gw = gd
                        .iter()
                        .flat_map(|&go| xv.data().iter().map(move |&xj| go * xj))
                        .collect();
                    self.accumulate(slots, *w, gw);
                }
                self.accumulate(slots, *b, gd.to_vec());
            }
            Op::Conv2d {
                x,
                k,
                b,
                stride,
                padding,
            } => {
                let (xv, kv) = (self.value(*x), self.value(*k));
                let geo = Conv2dGeometry::resolve(xv, kv, self.value(*b), *stride, *padding)?;
                let (want_x, want_k) = (self.wants(*x), self.wants(*k));
                let mut gx = vec![0.0; if want_x { xv.numel() } else { 0 }];
                let mut gk = vec![0.0; if want_k { kv.numel() } else { 0 }];
                let mut gb = vec![0.0; geo.filters];
                let (xd, kd) = (xv.data(), kv.data());
                for f in 0..geo.filters {
                    for oy in 0..geo.out_h {
                        for ox in 0..geo.out_w {
                            let go = gd[(f * geo.out_h + oy) * geo.out_w + ox];
                            gb[f] += go;
                            if go == 0.0 {
                                continue;
                            }
                            for c in 0..geo.in_channels {
                                for ky in 0..geo.kernel_h {
                                    let Some(iy) = geo.source(oy, ky, geo.height) else {
                                        continue;
                                    };
                                    let krow = ((f * geo.in_channels + c) * geo.kernel_h + ky)
                                        * geo.kernel_w;
                                    let xrow = (c * geo.height + iy) * geo.width;
                                    for kx in 0..geo.kernel_w {
                                        if let Some(ix) = geo.source(ox, kx, geo.width) {
                                            if want_x {
                                                gx[xrow + ix] += kd[krow + kx] * go;
                                            }
                                            if want_k {
                                                gk[krow + kx] += xd[xrow + ix] * go;
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if want_x {
                    self.accumulate(slots, *x, gx);
                }
                if want_k {
                    self.accumulate(slots, *k, gk);
                }
                self.accumulate(slots, *b, gb);
            }
            Op::Relu(x) => {
                let gx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(gd)
                    .map(|(&v, &go)| if v > 0.0 { go } else { 0.0 })
                    .collect();
                self.accumulate(slots, *x, gx);
            }
            Op::BatchNorm {
                x,
                mean,
                var,
                scale,
                shift,
                eps,
            } => {
                let p = BatchNormParams {
                    mean: self.value(*mean),
                    var: self.value(*var),
                    scale: self.value(*scale),
                    shift: self.value(*shift),
                    eps: *eps,
                };
                let xv = self.value(*x);
                let (channels, per) = p.check(xv)?;
                let mut gx = vec![0.0; xv.numel()];
                let mut gscale = vec![0.0; channels];
                let mut gshift = vec![0.0; channels];
                for c in 0..channels {
                    let inv = p.inv_std(c);
                    let (m, s) = (p.mean.data()[c], p.scale.data()[c]);
                    for j in c * per..(c + 1) * per {
                        gx[j] = gd[j] * inv * s;
                        gscale[c] += gd[j] * (xv.data()[j] - m) * inv;
                        gshift[c] += gd[j];
                    }
                }
                self.accumulate(slots, *x, gx);
                self.accumulate(slots, *scale, gscale);
                self.accumulate(slots, *shift, gshift);
            }
            Op::MaxPool { x, argmax, .. } => {
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (&src, &go) in argmax.iter().zip(gd) {
                    gx[src] += go;
                }
                self.accumulate(slots, *x, gx);
            }
            Op::AvgPool { x, kernel, stride } => {
                let xv = self.value(*x);
                let geo = PoolGeometry::resolve(xv, *kernel, *stride)?;
                let norm = (kernel * kernel) as f64;
                let mut gx = vec![0.0; xv.numel()];
                let mut o = 0;
                for c in 0..geo.channels {
                    for oy in 0..geo.out_h {
                        for ox in 0..geo.out_w {
                            for src in geo.window(c, oy, ox) {
                                gx[src] += gd[o] / norm;
                            }
                            o += 1;
                        }
                    }
                }
                self.accumulate(slots, *x, gx);
            }
            Op::Reshape(x) => self.accumulate(slots, *x, gd.to_vec()),
            Op::Add(a, b) => {
                self.accumulate(slots, *a, gd.to_vec());
                self.accumulate(slots, *b, gd.to_vec());
            }
            Op::Softmax(x) => {
                let s = self.nodes[i].value.data();
                let inner: f64 = s.iter().zip(gd).map(|(p, go)| p * go).sum();
                let gx = s.iter().zip(gd).map(|(p, go)| p * (go - inner)).collect();
                self.accumulate(slots, *x, gx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(slots, *x, vec![gd[0]; n]);
            }
        }
        Ok(())
    }
}

/// Gradient of the finalized output (contracted with `upstream`) with respect
/// to the designated input leaf.
pub fn backward_to_input(tape: &GradTape<'_>, upstream: &Tensor) -> Result<Tensor> {
    let input = tape
        .input_var()
        .ok_or_else(|| Error::Tape("tape has no designated input".into()))?;
    let mut grads = tape.backward(upstream)?;
    Ok(grads
        .take(input)
        .unwrap_or_else(|| Tensor::zeros(tape.value(input).shape())))
}

/// Central-difference gradient of a scalar function, one coordinate at a time.
pub fn finite_difference_gradient<F>(f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: Fn(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "step must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), grad)
}
