//! Minimal reverse-mode automatic differentiation over `ndarray` tensors.
//!
//! A [`Tape`] records one computation; [`Tape::backward`] walks it once and
//! returns cotangents for every parameter leaf. The op set is exactly what
//! the training objectives, the reference backbone, and the differentiable
//! auxiliary losses need; signal-level linear maps (inverse STFT, framed
//! STFT) enter as single ops whose backward passes are the hand-derived
//! adjoints from [`crate::spectral`].

pub mod conv;

use std::sync::Arc;

use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix3, IxDyn};

use crate::spectral::{self, SpectralConfig};
use crate::tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    AddConst(usize),
    MulScalar { tensor: usize, scalar: usize },
    Sqrt(usize),
    Powf(usize, f64),
    Ln(usize),
    Silu(usize),
    MaxConst(usize, f64),
    Sum(usize),
    Mean(usize),
    Conv2d { x: usize, w: usize },
    ChannelBias { x: usize, b: usize },
    ConcatChannels(usize, usize),
    AvgPoolFreq2(usize),
    UpsampleFreq2(usize),
    PadFreq { x: usize },
    CropFreq { x: usize, orig: usize },
    MatVec { w: usize, v: Arc<Array1<f64>> },
    SumChannels(usize),
    MulBroadcastChannels { x: usize, f: usize },
    Istft { x: usize, cfg: SpectralConfig, orig_len: usize },
    FrameStft { x: usize, n_fft: usize, hop: usize, window: Arc<Vec<f64>> },
}

struct Node {
    value: ArrayD<f64>,
    op: Op,
    needs_grad: bool,
}

/// Cotangents returned by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<ArrayD<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&ArrayD<f64>> {
        self.grads[v.0].as_ref()
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: ArrayD<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.iter().all(|x| x.is_finite()), "non-finite node value");
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Constant leaf; gradients do not flow into it.
    pub fn constant(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Parameter leaf; [`Gradients::get`] is populated for it.
    pub fn param(&mut self, value: ArrayD<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &ArrayD<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        let val = &self.nodes[v.0].value;
        debug_assert_eq!(val.len(), 1);
        *val.iter().next().unwrap()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value + &self.nodes[b.0].value;
        let g = self.ng(a.0) || self.ng(b.0);
        self.push(v, Op::Add(a.0, b.0), g)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value - &self.nodes[b.0].value;
        let g = self.ng(a.0) || self.ng(b.0);
        self.push(v, Op::Sub(a.0, b.0), g)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = &self.nodes[a.0].value * &self.nodes[b.0].value;
        let g = self.ng(a.0) || self.ng(b.0);
        self.push(v, Op::Mul(a.0, b.0), g)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| -x);
        let g = self.ng(a.0);
        self.push(v, Op::Neg(a.0), g)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * k);
        let g = self.ng(a.0);
        self.push(v, Op::Scale(a.0, k), g)
    }

    pub fn add_const(&mut self, a: Var, k: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x + k);
        let g = self.ng(a.0);
        self.push(v, Op::AddConst(a.0), g)
    }

    /// Tensor times a 0-d scalar node.
    pub fn mul_scalar(&mut self, tensor: Var, scalar: Var) -> Var {
        let s = self.scalar_value(scalar);
        let v = self.nodes[tensor.0].value.mapv(|x| x * s);
        let g = self.ng(tensor.0) || self.ng(scalar.0);
        self.push(v, Op::MulScalar { tensor: tensor.0, scalar: scalar.0 }, g)
    }

    /// Elementwise square root; caller guarantees positivity.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::sqrt);
        let g = self.ng(a.0);
        self.push(v, Op::Sqrt(a.0), g)
    }

    /// Elementwise power with constant exponent; caller guarantees x > 0.
    pub fn powf(&mut self, a: Var, k: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.powf(k));
        let g = self.ng(a.0);
        self.push(v, Op::Powf(a.0, k), g)
    }

    /// Elementwise natural log; caller guarantees x > 0.
    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(f64::ln);
        let g = self.ng(a.0);
        self.push(v, Op::Ln(a.0), g)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x * sigmoid(x));
        let g = self.ng(a.0);
        self.push(v, Op::Silu(a.0), g)
    }

    /// Elementwise `max(x, k)`; the gradient passes only where `x > k`.
    pub fn max_const(&mut self, a: Var, k: f64) -> Var {
        let v = self.nodes[a.0].value.mapv(|x| x.max(k));
        let g = self.ng(a.0);
        self.push(v, Op::MaxConst(a.0, k), g)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = tensor::scalar(self.nodes[a.0].value.sum());
        let g = self.ng(a.0);
        self.push(v, Op::Sum(a.0), g)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1) as f64;
        let v = tensor::scalar(self.nodes[a.0].value.sum() / n);
        let g = self.ng(a.0);
        self.push(v, Op::Mean(a.0), g)
    }

    /// Same-padded 2-D convolution: x is `(c_in, h, w)`, kernel
    /// `(c_out, c_in, kh, kw)`.
    pub fn conv2d(&mut self, x: Var, w: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let wv = self.nodes[w.0]
            .value
            .view()
            .into_dimensionality::<ndarray::Ix4>()
            .unwrap();
        let v = conv::conv2d_forward(&xv, &wv).into_dyn();
        let g = self.ng(x.0) || self.ng(w.0);
        self.push(v, Op::Conv2d { x: x.0, w: w.0 }, g)
    }

    /// Add a per-channel bias vector `(c)` to a `(c, h, w)` tensor.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix1>().unwrap();
        let mut out = xv.to_owned();
        for (c, mut plane) in out.axis_iter_mut(Axis(0)).enumerate() {
            plane += bv[c];
        }
        let g = self.ng(x.0) || self.ng(b.0);
        self.push(out.into_dyn(), Op::ChannelBias { x: x.0, b: b.0 }, g)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let bv = self.nodes[b.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let v = ndarray::concatenate(Axis(0), &[av, bv]).unwrap().into_dyn();
        let g = self.ng(a.0) || self.ng(b.0);
        self.push(v, Op::ConcatChannels(a.0, b.0), g)
    }

    /// Halve the frequency axis of a `(c, f, t)` tensor by averaging pairs.
    pub fn avg_pool_freq2(&mut self, a: Var) -> Var {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let (c, f, t) = av.dim();
        assert_eq!(f % 2, 0, "frequency axis must be even to pool");
        let mut out = ndarray::Array3::zeros((c, f / 2, t));
        for ci in 0..c {
            for i in 0..f / 2 {
                for j in 0..t {
                    out[(ci, i, j)] = 0.5 * (av[(ci, 2 * i, j)] + av[(ci, 2 * i + 1, j)]);
                }
            }
        }
        let g = self.ng(a.0);
        self.push(out.into_dyn(), Op::AvgPoolFreq2(a.0), g)
    }

    /// Nearest-neighbor upsampling of the frequency axis by 2.
    pub fn upsample_freq2(&mut self, a: Var) -> Var {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let (c, f, t) = av.dim();
        let mut out = ndarray::Array3::zeros((c, f * 2, t));
        for ci in 0..c {
            for i in 0..f {
                for j in 0..t {
                    out[(ci, 2 * i, j)] = av[(ci, i, j)];
                    out[(ci, 2 * i + 1, j)] = av[(ci, i, j)];
                }
            }
        }
        let g = self.ng(a.0);
        self.push(out.into_dyn(), Op::UpsampleFreq2(a.0), g)
    }

    /// Zero-pad the frequency axis up to `target` bins.
    pub fn pad_freq(&mut self, a: Var, target: usize) -> Var {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let (c, f, t) = av.dim();
        assert!(target >= f);
        let mut out = ndarray::Array3::zeros((c, target, t));
        out.slice_mut(ndarray::s![.., ..f, ..]).assign(&av);
        let g = self.ng(a.0);
        self.push(out.into_dyn(), Op::PadFreq { x: a.0 }, g)
    }

    /// Crop the frequency axis back to `orig` bins.
    pub fn crop_freq(&mut self, a: Var, orig: usize) -> Var {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let v = av.slice(ndarray::s![.., ..orig, ..]).to_owned().into_dyn();
        let g = self.ng(a.0);
        self.push(v, Op::CropFreq { x: a.0, orig }, g)
    }

    /// Parameter matrix `(c, e)` times a constant vector `(e)`.
    pub fn mat_vec(&mut self, w: Var, v: Arc<Array1<f64>>) -> Var {
        let wv = self.nodes[w.0].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let out = wv.dot(&*v).into_dyn();
        let g = self.ng(w.0);
        self.push(out, Op::MatVec { w: w.0, v }, g)
    }

    /// Sum a `(c, f, t)` tensor over its channel axis, yielding `(f, t)`.
    pub fn sum_channels(&mut self, a: Var) -> Var {
        let av = self.nodes[a.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let v = av.sum_axis(Axis(0)).into_dyn();
        let g = self.ng(a.0);
        self.push(v, Op::SumChannels(a.0), g)
    }

    /// Multiply each channel of a `(c, f, t)` tensor by the same `(f, t)` map.
    pub fn mul_broadcast_channels(&mut self, x: Var, f: Var) -> Var {
        let xv = self.nodes[x.0].value.view().into_dimensionality::<Ix3>().unwrap();
        let fv = self.nodes[f.0].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
        let mut out = xv.to_owned();
        for mut plane in out.axis_iter_mut(Axis(0)) {
            plane *= &fv;
        }
        let g = self.ng(x.0) || self.ng(f.0);
        self.push(out.into_dyn(), Op::MulBroadcastChannels { x: x.0, f: f.0 }, g)
    }

    /// Linear inverse-STFT synthesis of an already-decompressed `(2, f, t)`
    /// spectrogram tensor into a length-`orig_len` waveform tensor.
    pub fn istft(&mut self, x: Var, cfg: SpectralConfig, orig_len: usize) -> Var {
        let spec = tensor::dyn_to_complex(&self.nodes[x.0].value);
        let wave = spectral::istft_raw(&spec, &cfg, orig_len).expect("istft shapes validated upstream");
        let v = ArrayD::from_shape_vec(IxDyn(&[orig_len]), wave).unwrap();
        let g = self.ng(x.0);
        self.push(v, Op::Istft { x: x.0, cfg, orig_len }, g)
    }

    /// Uncentered framed STFT of a waveform tensor into `(2, f, t)`.
    pub fn frame_stft(&mut self, x: Var, n_fft: usize, hop: usize, window: Arc<Vec<f64>>) -> Var {
        let wave = self.nodes[x.0].value.view().into_dimensionality::<Ix1>().unwrap();
        let spec = spectral::frame_stft(wave.as_slice().unwrap(), n_fft, hop, &window);
        let v = tensor::complex_to_dyn(&spec);
        let g = self.ng(x.0);
        self.push(v, Op::FrameStft { x: x.0, n_fft, hop, window }, g)
    }

    /// Reverse pass from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<ArrayD<f64>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(tensor::scalar(1.0).into_shape_with_order(self.nodes[root.0].value.raw_dim()).unwrap());

        for i in (0..self.nodes.len()).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {
                    grads[i] = Some(g);
                }
                Op::Add(a, b) => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, g);
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *a, g.clone());
                    self.accum(&mut grads, *b, g.mapv(|x| -x));
                }
                Op::Mul(a, b) => {
                    let da = &g * &self.nodes[*b].value;
                    let db = &g * &self.nodes[*a].value;
                    self.accum(&mut grads, *a, da);
                    self.accum(&mut grads, *b, db);
                }
                Op::Neg(a) => self.accum(&mut grads, *a, g.mapv(|x| -x)),
                Op::Scale(a, k) => self.accum(&mut grads, *a, g.mapv(|x| x * k)),
                Op::AddConst(a) => self.accum(&mut grads, *a, g),
                Op::MulScalar { tensor, scalar } => {
                    let s = *self.nodes[*scalar].value.iter().next().unwrap();
                    let dt = g.mapv(|x| x * s);
                    let ds = (&g * &self.nodes[*tensor].value).sum();
                    self.accum(&mut grads, *tensor, dt);
                    self.accum(
                        &mut grads,
                        *scalar,
                        tensor::scalar(ds)
                            .into_shape_with_order(self.nodes[*scalar].value.raw_dim())
                            .unwrap(),
                    );
                }
                Op::Sqrt(a) => {
                    let da = &g / &self.nodes[i].value.mapv(|y| 2.0 * y);
                    self.accum(&mut grads, *a, da);
                }
                Op::Powf(a, k) => {
                    let da = &g * &self.nodes[*a].value.mapv(|x| k * x.powf(k - 1.0));
                    self.accum(&mut grads, *a, da);
                }
                Op::Ln(a) => {
                    let da = &g / &self.nodes[*a].value;
                    self.accum(&mut grads, *a, da);
                }
                Op::Silu(a) => {
                    let da = &g * &self.nodes[*a].value.mapv(|x| {
                        let s = sigmoid(x);
                        s * (1.0 + x * (1.0 - s))
                    });
                    self.accum(&mut grads, *a, da);
                }
                Op::MaxConst(a, k) => {
                    let mask = self.nodes[*a].value.mapv(|x| if x > *k { 1.0 } else { 0.0 });
                    self.accum(&mut grads, *a, &g * &mask);
                }
                Op::Sum(a) => {
                    let gs = *g.iter().next().unwrap();
                    let da = ArrayD::from_elem(self.nodes[*a].value.raw_dim(), gs);
                    self.accum(&mut grads, *a, da);
                }
                Op::Mean(a) => {
                    let n = self.nodes[*a].value.len().max(1) as f64;
                    let gs = *g.iter().next().unwrap() / n;
                    let da = ArrayD::from_elem(self.nodes[*a].value.raw_dim(), gs);
                    self.accum(&mut grads, *a, da);
                }
                Op::Conv2d { x, w } => {
                    let xv = self.nodes[*x].value.view().into_dimensionality::<Ix3>().unwrap();
                    let wv = self.nodes[*w]
                        .value
                        .view()
                        .into_dimensionality::<ndarray::Ix4>()
                        .unwrap();
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let (dx, dw) = conv::conv2d_backward(&xv, &wv, &gv);
                    self.accum(&mut grads, *x, dx.into_dyn());
                    self.accum(&mut grads, *w, dw.into_dyn());
                }
                Op::ChannelBias { x, b } => {
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let db: Array1<f64> = gv
                        .axis_iter(Axis(0))
                        .map(|plane| plane.sum())
                        .collect();
                    self.accum(&mut grads, *x, g.clone());
                    self.accum(&mut grads, *b, db.into_dyn());
                }
                Op::ConcatChannels(a, b) => {
                    let ca = self.nodes[*a].value.shape()[0];
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let da = gv.slice(ndarray::s![..ca, .., ..]).to_owned().into_dyn();
                    let db = gv.slice(ndarray::s![ca.., .., ..]).to_owned().into_dyn();
                    self.accum(&mut grads, *a, da);
                    self.accum(&mut grads, *b, db);
                }
                Op::AvgPoolFreq2(a) => {
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let (c, fh, t) = gv.dim();
                    let mut da = ndarray::Array3::zeros((c, fh * 2, t));
                    for ci in 0..c {
                        for i in 0..fh {
                            for j in 0..t {
                                let v = 0.5 * gv[(ci, i, j)];
                                da[(ci, 2 * i, j)] = v;
                                da[(ci, 2 * i + 1, j)] = v;
                            }
                        }
                    }
                    self.accum(&mut grads, *a, da.into_dyn());
                }
                Op::UpsampleFreq2(a) => {
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let (c, f2, t) = gv.dim();
                    let mut da = ndarray::Array3::zeros((c, f2 / 2, t));
                    for ci in 0..c {
                        for i in 0..f2 / 2 {
                            for j in 0..t {
                                da[(ci, i, j)] = gv[(ci, 2 * i, j)] + gv[(ci, 2 * i + 1, j)];
                            }
                        }
                    }
                    self.accum(&mut grads, *a, da.into_dyn());
                }
                Op::PadFreq { x } => {
                    let f = self.nodes[*x].value.shape()[1];
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let da = gv.slice(ndarray::s![.., ..f, ..]).to_owned().into_dyn();
                    self.accum(&mut grads, *x, da);
                }
                Op::CropFreq { x, orig } => {
                    let shape = self.nodes[*x].value.raw_dim();
                    let mut da = ArrayD::zeros(shape);
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    da.slice_mut(ndarray::s![.., ..*orig, ..]).assign(&gv);
                    self.accum(&mut grads, *x, da);
                }
                Op::MatVec { w, v } => {
                    let gv = g.view().into_dimensionality::<Ix1>().unwrap();
                    let c = gv.len();
                    let e = v.len();
                    let mut dw = Array2::zeros((c, e));
                    for ci in 0..c {
                        for ei in 0..e {
                            dw[(ci, ei)] = gv[ci] * v[ei];
                        }
                    }
                    self.accum(&mut grads, *w, dw.into_dyn());
                }
                Op::SumChannels(a) => {
                    let shape = self.nodes[*a].value.raw_dim();
                    let c = shape[0];
                    let gv = g.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let mut da = ArrayD::zeros(shape.clone());
                    {
                        let mut dav = da.view_mut().into_dimensionality::<Ix3>().unwrap();
                        for ci in 0..c {
                            dav.index_axis_mut(Axis(0), ci).assign(&gv);
                        }
                    }
                    self.accum(&mut grads, *a, da);
                }
                Op::MulBroadcastChannels { x, f } => {
                    let xv = self.nodes[*x].value.view().into_dimensionality::<Ix3>().unwrap();
                    let fv = self.nodes[*f].value.view().into_dimensionality::<ndarray::Ix2>().unwrap();
                    let gv = g.view().into_dimensionality::<Ix3>().unwrap();
                    let mut dx = gv.to_owned();
                    for mut plane in dx.axis_iter_mut(Axis(0)) {
                        plane *= &fv;
                    }
                    let mut df = ndarray::Array2::zeros(fv.raw_dim());
                    for (gp, xp) in gv.axis_iter(Axis(0)).zip(xv.axis_iter(Axis(0))) {
                        df += &(&gp * &xp);
                    }
                    self.accum(&mut grads, *x, dx.into_dyn());
                    self.accum(&mut grads, *f, df.into_dyn());
                }
                Op::Istft { x, cfg, orig_len } => {
                    let n_frames = self.nodes[*x].value.shape()[2];
                    let gw = g.view().into_dimensionality::<Ix1>().unwrap();
                    let dspec = spectral::istft_raw_adjoint(
                        gw.as_slice().unwrap(),
                        cfg,
                        n_frames,
                        *orig_len,
                    )
                    .expect("adjoint shapes validated upstream");
                    self.accum(&mut grads, *x, tensor::complex_to_dyn(&dspec));
                }
                Op::FrameStft { x, n_fft, hop, window } => {
                    let sig_len = self.nodes[*x].value.len();
                    let gspec = tensor::dyn_to_complex(&g);
                    let dx = spectral::frame_stft_adjoint(&gspec, *n_fft, *hop, window, sig_len);
                    self.accum(&mut grads, *x, ArrayD::from_shape_vec(IxDyn(&[sig_len]), dx).unwrap());
                }
            }
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<ArrayD<f64>>], target: usize, delta: ArrayD<f64>) {
        if !self.nodes[target].needs_grad {
            return;
        }
        match &mut grads[target] {
            Some(acc) => *acc += &delta,
            slot @ None => *slot = Some(delta),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}
