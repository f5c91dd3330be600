//! Convolutional building blocks with explicit forward traces.
//!
//! Activations use a channel-major `C x N x H x W` layout so that one GEMM
//! per convolution covers the whole batch: the im2col matrix is
//! `(Cin·k·k) x (N·H·W)` and the product with the `Cout x (Cin·k·k)`
//! weight lands directly in the output layout.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::scalar::{gemm, MatRef, Real};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shape {
    pub c: usize,
    pub n: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape {
    pub fn len(&self) -> usize {
        self.c * self.n * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane(&self) -> usize {
        self.h * self.w
    }
}

/// A `C x N x H x W` activation.
#[derive(Debug, Clone, PartialEq)]
pub struct Act<F> {
    pub data: Vec<F>,
    pub shape: Shape,
}

impl<F: Real> Act<F> {
    pub fn zeros(shape: Shape) -> Self {
        Self {
            data: vec![F::ZERO; shape.len()],
            shape,
        }
    }

    /// Offset of plane `(c, i)`.
    #[inline]
    pub fn plane_offset(&self, c: usize, i: usize) -> usize {
        (c * self.shape.n + i) * self.shape.plane()
    }
}

/// `k x k` convolution, stride 1, zero padding `k / 2`.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d<F> {
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    /// `cout x (cin·k·k)`
    pub weight: Vec<F>,
    pub bias: Vec<F>,
}

impl<F: Real> Conv2d<F> {
    /// He-normal initialization.
    pub fn new<R: Rng + ?Sized>(cin: usize, cout: usize, k: usize, rng: &mut R) -> Self {
        assert!(k % 2 == 1, "odd kernels only");
        let fan_in = (cin * k * k) as f64;
        let std = (2.0 / fan_in).sqrt();
        let weight = (0..cout * cin * k * k)
            .map(|_| {
                let z: f64 = StandardNormal.sample(rng);
                F::from_f64(z * std)
            })
            .collect();
        Self {
            cin,
            cout,
            k,
            weight,
            bias: vec![F::ZERO; cout],
        }
    }

    fn rows(&self) -> usize {
        self.cin * self.k * self.k
    }

    fn im2col(&self, x: &Act<F>) -> Vec<F> {
        let Shape { n, h, w, .. } = x.shape;
        let (k, pad) = (self.k, self.k / 2);
        let cols = n * h * w;
        let mut col = vec![F::ZERO; self.rows() * cols];
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let dst_row = &mut col[row * cols..(row + 1) * cols];
                    // valid output x range for this kernel column
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad).saturating_sub(kx).min(w);
                    for i in 0..n {
                        let src = &x.data[x.plane_offset(ci, i)..][..h * w];
                        for y in 0..h {
                            let sy = y + ky;
                            if sy < pad || sy - pad >= h {
                                continue;
                            }
                            let sy = sy - pad;
                            if x_lo >= x_hi {
                                continue;
                            }
                            let d0 = (i * h + y) * w;
                            let s0 = sy * w + x_lo + kx - pad;
                            dst_row[d0 + x_lo..d0 + x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                        }
                    }
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[F], shape: Shape) -> Act<F> {
        let Shape { n, h, w, .. } = shape;
        let (k, pad) = (self.k, self.k / 2);
        let cols = n * h * w;
        let mut dx = Act::zeros(shape);
        for ci in 0..self.cin {
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let src_row = &col[row * cols..(row + 1) * cols];
                    let x_lo = pad.saturating_sub(kx);
                    let x_hi = (w + pad).saturating_sub(kx).min(w);
                    if x_lo >= x_hi {
                        continue;
                    }
                    for i in 0..n {
                        let off = dx.plane_offset(ci, i);
                        let dst = &mut dx.data[off..off + h * w];
                        for y in 0..h {
                            let sy = y + ky;
                            if sy < pad || sy - pad >= h {
                                continue;
                            }
                            let sy = sy - pad;
                            let d0 = (i * h + y) * w;
                            let s0 = sy * w + x_lo + kx - pad;
                            for (t, v) in dst[s0..s0 + (x_hi - x_lo)]
                                .iter_mut()
                                .zip(&src_row[d0 + x_lo..d0 + x_hi])
                            {
                                *t += *v;
                            }
                        }
                    }
                }
            }
        }
        dx
    }

    pub fn forward(&self, x: &Act<F>) -> (Act<F>, Vec<F>) {
        debug_assert_eq!(x.shape.c, self.cin);
        let col = self.im2col(x);
        let cols = x.shape.n * x.shape.plane();
        let mut out = vec![F::ZERO; self.cout * cols];
        for (co, row) in out.chunks_mut(cols).enumerate() {
            row.fill(self.bias[co]);
        }
        gemm(
            F::ONE,
            MatRef::row_major(&self.weight, self.cout, self.rows()),
            MatRef::row_major(&col, self.rows(), cols),
            F::ONE,
            &mut out,
        );
        let shape = Shape {
            c: self.cout,
            ..x.shape
        };
        (Act { data: out, shape }, col)
    }

    /// Returns `(d_weight, d_bias, d_input)`.
    pub fn backward(
        &self,
        input_shape: Shape,
        col: &[F],
        dout: &Act<F>,
        need_input_grad: bool,
    ) -> (Vec<F>, Vec<F>, Option<Act<F>>) {
        let cols = input_shape.n * input_shape.plane();
        let dmat = MatRef::row_major(&dout.data, self.cout, cols);
        let mut dw = vec![F::ZERO; self.weight.len()];
        gemm(
            F::ONE,
            dmat,
            MatRef::row_major(col, self.rows(), cols).t(),
            F::ZERO,
            &mut dw,
        );
        let db = dout.data.chunks(cols).map(|r| r.iter().copied().sum()).collect();
        let dx = need_input_grad.then(|| {
            let mut dcol = vec![F::ZERO; self.rows() * cols];
            gemm(
                F::ONE,
                MatRef::row_major(&self.weight, self.cout, self.rows()).t(),
                dmat,
                F::ZERO,
                &mut dcol,
            );
            self.col2im(&dcol, input_shape)
        });
        (dw, db, dx)
    }
}

/// One stage of a sequential extractor.
#[derive(Debug, Clone, PartialEq)]
pub enum Layer<F> {
    Conv(Conv2d<F>),
    Relu,
    /// 2x2 max pooling, stride 2 (odd trailing rows/columns dropped).
    MaxPool,
    /// `x + body(x)`; the body must preserve the shape.
    Residual(Vec<Layer<F>>),
}

enum LayerTrace<F> {
    Conv { input_shape: Shape, col: Vec<F> },
    Relu { active: Vec<bool> },
    MaxPool { input_shape: Shape, argmax: Vec<u32> },
    Residual(Vec<LayerTrace<F>>),
}

/// What a backward pass needs from the matching forward pass.
pub struct SequentialTrace<F> {
    layers: Vec<LayerTrace<F>>,
}

impl<F: Real> Layer<F> {
    fn output_shape(&self, s: Shape) -> Result<Shape> {
        match self {
            Layer::Conv(conv) => {
                if s.c != conv.cin {
                    return Err(Error::Shape(format!(
                        "conv expects {} channels, got {}",
                        conv.cin, s.c
                    )));
                }
                Ok(Shape { c: conv.cout, ..s })
            }
            Layer::Relu => Ok(s),
            Layer::MaxPool => {
                if s.h < 2 || s.w < 2 {
                    return Err(Error::Shape(format!("cannot pool a {}x{} map", s.h, s.w)));
                }
                Ok(Shape {
                    h: s.h / 2,
                    w: s.w / 2,
                    ..s
                })
            }
            Layer::Residual(body) => {
                let out = body.iter().try_fold(s, |acc, l| l.output_shape(acc))?;
                if out != s {
                    return Err(Error::Shape("residual body changes shape".into()));
                }
                Ok(s)
            }
        }
    }

    fn forward(&self, x: Act<F>) -> (Act<F>, LayerTrace<F>) {
        match self {
            Layer::Conv(conv) => {
                let input_shape = x.shape;
                let (out, col) = conv.forward(&x);
                (out, LayerTrace::Conv { input_shape, col })
            }
            Layer::Relu => {
                let mut x = x;
                let active = x
                    .data
                    .iter_mut()
                    .map(|v| {
                        let on = *v > F::ZERO;
                        if !on {
                            *v = F::ZERO;
                        }
                        on
                    })
                    .collect();
                (x, LayerTrace::Relu { active })
            }
            Layer::MaxPool => {
                let s = x.shape;
                let (oh, ow) = (s.h / 2, s.w / 2);
                let out_shape = Shape { h: oh, w: ow, ..s };
                let mut out = Act::zeros(out_shape);
                let mut argmax = vec![0u32; out_shape.len()];
                for plane in 0..s.c * s.n {
                    let src = &x.data[plane * s.plane()..(plane + 1) * s.plane()];
                    let base = plane * oh * ow;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = (2 * oy) * s.w + 2 * ox;
                            for idx in [best + 1, best + s.w, best + s.w + 1] {
                                if src[idx] > src[best] {
                                    best = idx;
                                }
                            }
                            out.data[base + oy * ow + ox] = src[best];
                            argmax[base + oy * ow + ox] = best as u32;
                        }
                    }
                }
                (
                    out,
                    LayerTrace::MaxPool {
                        input_shape: s,
                        argmax,
                    },
                )
            }
            Layer::Residual(body) => {
                let skip = x.clone();
                let mut traces = Vec::with_capacity(body.len());
                let mut cur = x;
                for layer in body {
                    let (next, t) = layer.forward(cur);
                    traces.push(t);
                    cur = next;
                }
                for (o, s) in cur.data.iter_mut().zip(&skip.data) {
                    *o += *s;
                }
                (cur, LayerTrace::Residual(traces))
            }
        }
    }

    fn backward(
        &self,
        trace: LayerTrace<F>,
        dout: Act<F>,
        need_input_grad: bool,
        grads: &mut Vec<Vec<F>>,
    ) -> Option<Act<F>> {
        match (self, trace) {
            (Layer::Conv(conv), LayerTrace::Conv { input_shape, col }) => {
                let (dw, db, dx) = conv.backward(input_shape, &col, &dout, need_input_grad);
                // params are listed weight, bias; grads are built in reverse
                grads.push(db);
                grads.push(dw);
                dx
            }
            (Layer::Relu, LayerTrace::Relu { active }) => {
                let mut d = dout;
                for (v, &on) in d.data.iter_mut().zip(&active) {
                    if !on {
                        *v = F::ZERO;
                    }
                }
                Some(d)
            }
            (Layer::MaxPool, LayerTrace::MaxPool { input_shape, argmax }) => {
                let mut dx = Act::zeros(input_shape);
                let (ip, op) = (input_shape.plane(), dout.shape.plane());
                for plane in 0..input_shape.c * input_shape.n {
                    for j in 0..op {
                        let o = plane * op + j;
                        dx.data[plane * ip + argmax[o] as usize] += dout.data[o];
                    }
                }
                Some(dx)
            }
            (Layer::Residual(body), LayerTrace::Residual(traces)) => {
                let skip = dout.clone();
                let mut cur = Some(dout);
                for (layer, t) in body.iter().zip(traces).rev() {
                    cur = layer.backward(t, cur.expect("inner gradients are always propagated"), true, grads);
                }
                let mut d = cur.expect("residual body gradient");
                for (v, s) in d.data.iter_mut().zip(&skip.data) {
                    *v += *s;
                }
                Some(d)
            }
            _ => unreachable!("trace does not match layer"),
        }
    }

    fn collect_params<'a>(&'a self, out: &mut Vec<&'a [F]>) {
        match self {
            Layer::Conv(c) => {
                out.push(&c.weight);
                out.push(&c.bias);
            }
            Layer::Residual(body) => body.iter().for_each(|l| l.collect_params(out)),
            Layer::Relu | Layer::MaxPool => {}
        }
    }

    fn collect_params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut [F]>) {
        match self {
            Layer::Conv(c) => {
                out.push(&mut c.weight);
                out.push(&mut c.bias);
            }
            Layer::Residual(body) => body.iter_mut().for_each(|l| l.collect_params_mut(out)),
            Layer::Relu | Layer::MaxPool => {}
        }
    }
}

/// The trainable map from a normalized input batch to a feature map.
pub trait FeatureExtractor<F: Real> {
    type Trace;

    /// Feature shape `(C_f, h_f, w_f)` for a given input `(C, H, W)`.
    fn feature_shape(&self, c: usize, h: usize, w: usize) -> Result<(usize, usize, usize)>;
    fn extract(&self, input: Act<F>) -> (Act<F>, Self::Trace);
    /// Parameter gradients in [`FeatureExtractor::params`] order, plus the
    /// input gradient when requested.
    fn backward(&self, trace: Self::Trace, dout: Act<F>, need_input_grad: bool) -> (Vec<Vec<F>>, Option<Act<F>>);
    fn params(&self) -> Vec<&[F]>;
    fn params_mut(&mut self) -> Vec<&mut [F]>;
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Sequential<F> {
    pub layers: Vec<Layer<F>>,
}

impl<F: Real> FeatureExtractor<F> for Sequential<F> {
    type Trace = SequentialTrace<F>;

    fn feature_shape(&self, c: usize, h: usize, w: usize) -> Result<(usize, usize, usize)> {
        let s = self
            .layers
            .iter()
            .try_fold(Shape { c, n: 1, h, w }, |s, l| l.output_shape(s))?;
        Ok((s.c, s.h, s.w))
    }

    fn extract(&self, input: Act<F>) -> (Act<F>, SequentialTrace<F>) {
        let mut traces = Vec::with_capacity(self.layers.len());
        let mut cur = input;
        for layer in &self.layers {
            let (next, t) = layer.forward(cur);
            traces.push(t);
            cur = next;
        }
        (cur, SequentialTrace { layers: traces })
    }

    fn backward(
        &self,
        trace: SequentialTrace<F>,
        dout: Act<F>,
        need_input_grad: bool,
    ) -> (Vec<Vec<F>>, Option<Act<F>>) {
        let mut grads = Vec::new();
        let mut cur = Some(dout);
        let depth = self.layers.len();
        for (i, (layer, t)) in self.layers.iter().zip(trace.layers).enumerate().rev() {
            let need = i > 0 || need_input_grad;
            let d = cur.take().expect("gradient flows to every layer");
            cur = layer.backward(t, d, need, &mut grads);
            if i == 0 && !need_input_grad {
                cur = None;
            }
        }
        if depth == 0 && !need_input_grad {
            cur = None;
        }
        grads.reverse();
        (grads, cur)
    }

    fn params(&self) -> Vec<&[F]> {
        let mut out = Vec::new();
        self.layers.iter().for_each(|l| l.collect_params(&mut out));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut [F]> {
        let mut out = Vec::new();
        self.layers.iter_mut().for_each(|l| l.collect_params_mut(&mut out));
        out
    }
}

/// Serializable description of a backbone.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum BackboneSpec {
    /// `conv3x3 -> relu -> maxpool` per entry of `channels`.
    Reference { channels: Vec<usize> },
    /// A stem conv followed, per stage, by a transition conv, one basic
    /// residual block and a 2x2 max pool.
    Residual { channels: Vec<usize> },
    /// The (normalized) input itself is the feature map; with a frozen
    /// extractor the heads are plain softmax regressions.
    Identity,
}

impl BackboneSpec {
    pub fn build<F: Real, R: Rng + ?Sized>(&self, in_channels: usize, rng: &mut R) -> Result<Sequential<F>> {
        let mut layers = Vec::new();
        let mut c = in_channels;
        match self {
            BackboneSpec::Reference { channels } => {
                if channels.is_empty() {
                    return Err(Error::config("backbone.channels", "needs at least one block"));
                }
                for &out in channels {
                    layers.push(Layer::Conv(Conv2d::new(c, out, 3, rng)));
                    layers.push(Layer::Relu);
                    layers.push(Layer::MaxPool);
                    c = out;
                }
            }
            BackboneSpec::Residual { channels } => {
                let Some(&first) = channels.first() else {
                    return Err(Error::config("backbone.channels", "needs at least one stage"));
                };
                layers.push(Layer::Conv(Conv2d::new(c, first, 3, rng)));
                layers.push(Layer::Relu);
                c = first;
                for &out in channels {
                    if out != c {
                        layers.push(Layer::Conv(Conv2d::new(c, out, 3, rng)));
                        layers.push(Layer::Relu);
                        c = out;
                    }
                    let mut second = Conv2d::new(c, c, 3, rng);
                    // start each block close to identity
                    second.weight.iter_mut().for_each(|w| *w *= F::from_f64(0.1));
                    layers.push(Layer::Residual(vec![
                        Layer::Conv(Conv2d::new(c, c, 3, rng)),
                        Layer::Relu,
                        Layer::Conv(second),
                    ]));
                    layers.push(Layer::Relu);
                    layers.push(Layer::MaxPool);
                }
            }
            BackboneSpec::Identity => {}
        }
        Ok(Sequential { layers })
    }
}
