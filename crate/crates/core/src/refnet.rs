//! Arithmetic reference forward pass, valid at every training stage.
//!
//! All kernels accumulate integer-valued operands in a fixed order and apply
//! positive scale factors (input `1/255`, pooling `1/hw`, LSTM and dense
//! scales) once, after accumulation. Rounding is monotone, so in the fully
//! quantized stage every threshold decision taken here is exactly the one the
//! integer logic path takes.

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{Billnet, Cf, LayerKind, LstmLayer, ModelError, NormState, Stage};
use crate::quant::{
    self, clip, heaviside, sign_strict, ssign_scale, stern_scale, tern_code, tern_threshold,
    BNParams, QuantError, ShiftNorm, TgapCalibration, TgapMode,
};
use crate::tensor::{Tensor5, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("bad grouping: {0}")]
    BadGrouping(String),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("MUX select is not binary at element {0}")]
    NonBinarySelect(usize),
}

pub type Result<T> = std::result::Result<T, NetError>;

/// Scale applied to the 8-bit input codes after the stem convolution.
pub const INPUT_SCALE: f64 = 1.0 / 255.0;

/// 3-D convolution geometry. Padding is always "same" (output = ceil(input / stride),
/// extra padding on the trailing side).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub groups: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl ConvSpec {
    pub fn validate(&self) -> Result<()> {
        let g = self.groups;
        if g == 0 || self.in_channels % g != 0 || self.out_channels % g != 0 {
            return Err(NetError::BadGrouping(format!(
                "{} -> {} channels with {} groups",
                self.in_channels, self.out_channels, g
            )));
        }
        if self.kernel.iter().any(|&k| k % 2 == 0) || self.stride.iter().any(|&s| s == 0) {
            return Err(NetError::Shape(format!(
                "kernel {:?} must be odd and stride {:?} positive",
                self.kernel, self.stride
            )));
        }
        Ok(())
    }

    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    pub fn weight_shape(&self) -> [usize; 5] {
        [
            self.kernel[0],
            self.kernel[1],
            self.kernel[2],
            self.in_per_group(),
            self.out_channels,
        ]
    }

    pub fn fan_in(&self) -> usize {
        self.kernel.iter().product::<usize>() * self.in_per_group()
    }

    pub fn output_dims(&self, input: [usize; 3]) -> [usize; 3] {
        [0, 1, 2].map(|a| input[a].div_ceil(self.stride[a]))
    }

    fn pad_before(&self, input: [usize; 3]) -> [usize; 3] {
        let out = self.output_dims(input);
        [0, 1, 2].map(|a| {
            let needed = (out[a] - 1) * self.stride[a] + self.kernel[a];
            needed.saturating_sub(input[a]) / 2
        })
    }
}

/// Resolved geometry of one convolution call.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ConvGeom {
    pub input: [usize; 3],
    pub output: [usize; 3],
    pad: [usize; 3],
    pub spec: ConvSpec,
}

impl ConvGeom {
    pub fn new(x_shape: [usize; 5], w_shape: [usize; 5], spec: &ConvSpec) -> Result<Self> {
        spec.validate()?;
        if x_shape[4] != spec.in_channels {
            return Err(NetError::Shape(format!(
                "input has {} channels, conv expects {}",
                x_shape[4], spec.in_channels
            )));
        }
        if w_shape != spec.weight_shape() {
            return Err(NetError::Shape(format!(
                "weight shape {w_shape:?}, expected {:?}",
                spec.weight_shape()
            )));
        }
        let input = [x_shape[1], x_shape[2], x_shape[3]];
        Ok(Self {
            input,
            output: spec.output_dims(input),
            pad: spec.pad_before(input),
            spec: *spec,
        })
    }

    pub fn in_len(&self) -> usize {
        self.input.iter().product::<usize>() * self.spec.in_channels
    }

    pub fn out_len(&self) -> usize {
        self.output.iter().product::<usize>() * self.spec.out_channels
    }

    /// Calls `f(out_pixel, in_pixel, tap)` for every valid kernel tap, in a fixed order.
    #[inline]
    pub(crate) fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let [it, ih, iw] = self.input;
        let [ot, oh, ow] = self.output;
        let [kt, kh, kw] = self.spec.kernel;
        let [st, sh, sw] = self.spec.stride;
        let [pt, ph, pw] = self.pad;
        for t in 0..ot {
            for h in 0..oh {
                for w in 0..ow {
                    let op = (t * oh + h) * ow + w;
                    for dt in 0..kt {
                        let Some(xt) = (t * st + dt).checked_sub(pt).filter(|&v| v < it) else {
                            continue;
                        };
                        for dh in 0..kh {
                            let Some(xh) = (h * sh + dh).checked_sub(ph).filter(|&v| v < ih) else {
                                continue;
                            };
                            for dw in 0..kw {
                                let Some(xw) =
                                    (w * sw + dw).checked_sub(pw).filter(|&v| v < iw)
                                else {
                                    continue;
                                };
                                f(op, (xt * ih + xh) * iw + xw, (dt * kh + dh) * kw + dw);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Like [`Self::for_each_tap`] but grouped per output pixel: `f(out_pixel, [(in_pixel, tap)])`.
    fn for_each_output(&self, mut f: impl FnMut(usize, &[(usize, usize)])) {
        let mut taps = Vec::with_capacity(self.spec.kernel.iter().product());
        let mut current = usize::MAX;
        self.for_each_tap(|op, ip, tap| {
            if op != current {
                if current != usize::MAX {
                    f(current, &taps);
                }
                taps.clear();
                current = op;
            }
            taps.push((ip, tap));
        });
        if current != usize::MAX {
            f(current, &taps);
        }
    }

    fn patch_len(&self) -> usize {
        self.spec.kernel.iter().product::<usize>() * self.spec.in_per_group()
    }

    /// Weights rearranged to one contiguous `(tap, ci)` row per output channel.
    pub fn transpose_weights(&self, w: &[f64]) -> Vec<f64> {
        let (cout, kl) = (self.spec.out_channels, self.patch_len());
        let mut wt = vec![0.0; w.len()];
        for r in 0..kl {
            for o in 0..cout {
                wt[o * kl + r] = w[r * cout + o];
            }
        }
        wt
    }

    fn untranspose_weights(&self, wt: &[f64]) -> Vec<f64> {
        let (cout, kl) = (self.spec.out_channels, self.patch_len());
        let mut w = vec![0.0; wt.len()];
        for r in 0..kl {
            for o in 0..cout {
                w[r * cout + o] = wt[o * kl + r];
            }
        }
        w
    }

    fn taps_total(&self) -> usize {
        self.spec.kernel.iter().product()
    }

    /// Gathers the receptive field of one output pixel as `(group, tap, ci)` rows.
    fn fill_patch(&self, x: &[f64], taps: &[(usize, usize)], patch: &mut [f64]) {
        let s = &self.spec;
        let (cin, cig, kl) = (s.in_channels, s.in_per_group(), self.patch_len());
        if taps.len() < self.taps_total() {
            patch.iter_mut().for_each(|v| *v = 0.0);
        }
        for &(ip, tap) in taps {
            let xs = &x[ip * cin..(ip + 1) * cin];
            for gi in 0..s.groups {
                let dst = &mut patch[gi * kl + tap * cig..gi * kl + (tap + 1) * cig];
                for (d, &v) in dst.iter_mut().zip(&xs[gi * cig..(gi + 1) * cig]) {
                    *d = v;
                }
            }
        }
    }

    /// The receptive field of an output pixel; pointwise kernels read the input in place.
    fn patch<'a>(&self, x: &'a [f64], taps: &[(usize, usize)], buf: &'a mut [f64]) -> &'a [f64] {
        if self.taps_total() == 1 {
            let cin = self.spec.in_channels;
            let ip = taps[0].0;
            &x[ip * cin..(ip + 1) * cin]
        } else {
            self.fill_patch(x, taps, buf);
            buf
        }
    }

    /// One sample's forward pass with transposed weights `wt`.
    pub fn forward_sample(&self, x: &[f64], wt: &[f64], out: &mut [f64]) {
        let s = &self.spec;
        let (cout, cog, kl) = (s.out_channels, s.out_per_group(), self.patch_len());
        let mut buf = vec![0.0; s.groups * kl];
        self.for_each_output(|op, taps| {
            let patch = self.patch(x, taps, &mut buf);
            for (o, y) in out[op * cout..(op + 1) * cout].iter_mut().enumerate() {
                let gi = o / cog;
                *y = dot(&patch[gi * kl..(gi + 1) * kl], &wt[o * kl..(o + 1) * kl]);
            }
        });
    }

    pub fn backward_input_sample(&self, dy: &[f64], wt: &[f64], dx: &mut [f64]) {
        let s = &self.spec;
        let (cin, cout, cig, cog, kl) = (s.in_channels, s.out_channels, s.in_per_group(), s.out_per_group(), self.patch_len());
        dx.iter_mut().for_each(|v| *v = 0.0);
        let mut dpatch = vec![0.0; s.groups * kl];
        self.for_each_output(|op, taps| {
            dpatch.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..cout {
                let gi = o / cog;
                axpy(dy[op * cout + o], &wt[o * kl..(o + 1) * kl], &mut dpatch[gi * kl..(gi + 1) * kl]);
            }
            for &(ip, tap) in taps {
                let dst = &mut dx[ip * cin..(ip + 1) * cin];
                for gi in 0..s.groups {
                    let src = &dpatch[gi * kl + tap * cig..gi * kl + (tap + 1) * cig];
                    for (a, &b) in dst[gi * cig..(gi + 1) * cig].iter_mut().zip(src) {
                        *a += b;
                    }
                }
            }
        });
    }

    /// Accumulates the weight gradient (transposed layout) of one sample.
    pub fn backward_weight_sample(&self, x: &[f64], dy: &[f64], dwt: &mut [f64]) {
        let s = &self.spec;
        let (cout, cog, kl) = (s.out_channels, s.out_per_group(), self.patch_len());
        let mut buf = vec![0.0; s.groups * kl];
        self.for_each_output(|op, taps| {
            let patch = self.patch(x, taps, &mut buf);
            for o in 0..cout {
                let g = dy[op * cout + o];
                if g != 0.0 {
                    let gi = o / cog;
                    axpy(g, &patch[gi * kl..(gi + 1) * kl], &mut dwt[o * kl..(o + 1) * kl]);
                }
            }
        });
    }

    pub fn out_shape(&self, n: usize) -> [usize; 5] {
        [n, self.output[0], self.output[1], self.output[2], self.spec.out_channels]
    }
}

/// Dot product with four fixed partial sums (deterministic, vectorizable).
#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
pub(crate) fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (a, &b) in y.iter_mut().zip(x) {
        *a += alpha * b;
    }
}

/// Grouped 3-D cross-correlation with zero "same" padding.
pub fn conv3d(x: &Tensor5, w: &Tensor5, spec: &ConvSpec) -> Result<Tensor5> {
    let geo = ConvGeom::new(x.shape(), w.shape(), spec)?;
    let n = x.shape()[0];
    let wt = geo.transpose_weights(w.data());
    let mut out = Tensor5::zeros(geo.out_shape(n));
    let (il, ol) = (geo.in_len(), geo.out_len());
    out.data_mut()
        .par_chunks_mut(ol)
        .zip(x.data().par_chunks(il))
        .for_each(|(o, xs)| geo.forward_sample(xs, &wt, o));
    Ok(out)
}

/// Gradients of [`conv3d`] with respect to its input (if requested) and weights.
pub fn conv3d_backward(
    x: &Tensor5,
    w: &Tensor5,
    dy: &Tensor5,
    spec: &ConvSpec,
    need_dx: bool,
) -> Result<(Option<Tensor5>, Tensor5)> {
    let geo = ConvGeom::new(x.shape(), w.shape(), spec)?;
    let (il, ol) = (geo.in_len(), geo.out_len());
    let wt = geo.transpose_weights(w.data());
    let dx = need_dx.then(|| {
        let mut dx = Tensor5::zeros(x.shape());
        dx.data_mut()
            .par_chunks_mut(il)
            .zip(dy.data().par_chunks(ol))
            .for_each(|(d, g)| geo.backward_input_sample(g, &wt, d));
        dx
    });
    let partials: Vec<Vec<f64>> = x
        .data()
        .par_chunks(il)
        .zip(dy.data().par_chunks(ol))
        .map(|(xs, g)| {
            let mut dwt = vec![0.0; w.len()];
            geo.backward_weight_sample(xs, g, &mut dwt);
            dwt
        })
        .collect();
    let mut dwt = vec![0.0; w.len()];
    for p in &partials {
        for (a, b) in dwt.iter_mut().zip(p) {
            *a += b;
        }
    }
    Ok((dx, Tensor5::new(w.shape(), geo.untranspose_weights(&dwt))?))
}

/// Max pooling with stride equal to the window (floor mode). Returns the flat
/// input index of each maximum (first one on ties).
pub fn maxpool3d_indices(x: &Tensor5, window: [usize; 3]) -> Result<(Tensor5, Vec<usize>)> {
    let [n, t, h, w, c] = x.shape();
    if window.iter().any(|&v| v == 0) || t < window[0] || h < window[1] || w < window[2] {
        return Err(NetError::Shape(format!(
            "pool window {window:?} does not fit {t}x{h}x{w}"
        )));
    }
    let (ot, oh, ow) = (t / window[0], h / window[1], w / window[2]);
    let mut out = Tensor5::zeros([n, ot, oh, ow, c]);
    let mut arg = vec![0usize; out.len()];
    let xs = x.shape();
    let mut k = 0;
    for ni in 0..n {
        for ti in 0..ot {
            for hi in 0..oh {
                for wi in 0..ow {
                    for ci in 0..c {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_i = 0;
                        for dt in 0..window[0] {
                            for dh in 0..window[1] {
                                for dw in 0..window[2] {
                                    let i = crate::tensor::offset(
                                        &xs,
                                        [ni, ti * window[0] + dt, hi * window[1] + dh, wi * window[2] + dw, ci],
                                    );
                                    let v = x.data()[i];
                                    if v > best {
                                        best = v;
                                        best_i = i;
                                    }
                                }
                            }
                        }
                        out.data_mut()[k] = best;
                        arg[k] = best_i;
                        k += 1;
                    }
                }
            }
        }
    }
    Ok((out, arg))
}

pub fn maxpool3d(x: &Tensor5, window: [usize; 3]) -> Result<Tensor5> {
    Ok(maxpool3d_indices(x, window)?.0)
}

/// Spatial sum per `(n, t, c)`, shape `(N, T, 1, 1, C)`.
pub fn spatial_sum(x: &Tensor5) -> Tensor5 {
    let [n, t, h, w, c] = x.shape();
    let mut out = Tensor5::zeros([n, t, 1, 1, c]);
    let hw = h * w;
    for (o, frame) in out.data_mut().chunks_exact_mut(c).zip(x.data().chunks_exact(hw * c)) {
        for px in frame.chunks_exact(c) {
            for (a, &b) in o.iter_mut().zip(px) {
                *a += b;
            }
        }
    }
    out
}

/// Spatial global average pooling, shape `(N, T, 1, 1, C)`.
pub fn gap_spatial(x: &Tensor5) -> Tensor5 {
    let hw = (x.shape()[2] * x.shape()[3]) as f64;
    spatial_sum(x).map(|v| v / hw)
}

/// Thresholded global average pooling: the MUX select of a MOR block.
pub fn tgap(x: &Tensor5, mode: TgapMode) -> Tensor5 {
    let [n, t, _, _, c] = x.shape();
    let ap = gap_spatial(x);
    let mut out = Tensor5::zeros([n, t, 1, 1, c]);
    let per = t * c;
    for ni in 0..n {
        let means = &ap.data()[ni * per..(ni + 1) * per];
        let m = match mode {
            TgapMode::Quantized => 1.0,
            TgapMode::Float(TgapCalibration::Constant { m }) => m,
            TgapMode::Float(TgapCalibration::PerSample) => {
                means.iter().copied().fold(f64::NEG_INFINITY, f64::max)
            }
        };
        for (o, &mean) in out.data_mut()[ni * per..(ni + 1) * per].iter_mut().zip(means) {
            *o = f64::from(quant::tgap_float(mean, m) as u8);
        }
    }
    out
}

/// `MUX(I0, I1; S) = I1 * S + I0 * (1 - S)` with `S` broadcast over space.
pub fn mux(i0: &Tensor5, i1: &Tensor5, s: &Tensor5) -> Result<Tensor5> {
    let [n, t, h, w, c] = i0.shape();
    if i1.shape() != i0.shape() || s.shape() != [n, t, 1, 1, c] {
        return Err(NetError::Shape(format!(
            "mux operands {:?}, {:?}, select {:?}",
            i0.shape(),
            i1.shape(),
            s.shape()
        )));
    }
    if let Some(i) = s.data().iter().position(|&v| v != 0.0 && v != 1.0) {
        return Err(NetError::NonBinarySelect(i));
    }
    let mut out = i0.clone();
    let hw = h * w;
    for (k, o) in out.data_mut().iter_mut().enumerate() {
        let ci = k % c;
        let frame = k / (hw * c);
        let sel = s.data()[frame * c + ci];
        *o = i1.data()[k] * sel + *o * (1.0 - sel);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Heaviside,
}

impl Activation {
    #[inline]
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Heaviside => heaviside(x),
        }
    }
}

/// Inference-time normalization of one layer.
#[derive(Debug, Clone, PartialEq)]
pub enum Norm {
    Batch(BNParams),
    Shift(ShiftNorm),
}

impl Norm {
    pub fn apply(&self, x: &Tensor5) -> Tensor5 {
        match self {
            Norm::Batch(p) => quant::bn_forward(x, p),
            Norm::Shift(s) => s.apply(x),
        }
    }
}

/// Per-stage behaviour of the convolutional trunk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StageOps {
    pub act: Activation,
    pub tgap: TgapMode,
}

impl StageOps {
    pub fn for_stage(stage: Stage, calibration: TgapCalibration) -> Self {
        if stage.conv_acts_binary() {
            Self {
                act: Activation::Heaviside,
                tgap: TgapMode::Quantized,
            }
        } else {
            Self {
                act: Activation::Relu,
                tgap: TgapMode::Float(calibration),
            }
        }
    }
}

/// Factorized convolution with resolved (stage-effective) weights.
#[derive(Debug, Clone, PartialEq)]
pub struct CfBlock {
    pub pw1: (ConvSpec, Tensor5),
    pub gconv: (ConvSpec, Tensor5),
    pub pw2: (ConvSpec, Tensor5),
}

#[derive(Debug, Clone, PartialEq)]
pub struct CfTrace {
    pub pw1: Tensor5,
    pub gconv: Tensor5,
    pub pw2: Tensor5,
}

/// pointwise -> grouped 3x3x3 -> pointwise, with nothing in between.
pub fn cf_forward(x: &Tensor5, cf: &CfBlock) -> Result<CfTrace> {
    let pw1 = conv3d(x, &cf.pw1.1, &cf.pw1.0)?;
    let gconv = conv3d(&pw1, &cf.gconv.1, &cf.gconv.0)?;
    let pw2 = conv3d(&gconv, &cf.pw2.1, &cf.pw2.0)?;
    Ok(CfTrace { pw1, gconv, pw2 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MorBlock {
    pub cf1: CfBlock,
    pub norm1: Norm,
    pub cf2: CfBlock,
    pub norm2: Norm,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MorTrace {
    pub cf1: CfTrace,
    pub act1: Tensor5,
    pub i0: Tensor5,
    pub cf2: CfTrace,
    pub i1: Tensor5,
    pub select: Tensor5,
    pub out: Tensor5,
}

/// MUX-OR residual block:
/// `I0 = clip(act(norm1(CF1(x))) + x)`, `I1 = act(norm2(CF2(I0)))`,
/// `out = MUX(I0, I1; TGAP(x))`.
pub fn mor_forward(x: &Tensor5, block: &MorBlock, ops: StageOps) -> Result<MorTrace> {
    let cf1 = cf_forward(x, &block.cf1)?;
    let act1 = block.norm1.apply(&cf1.pw2).map(|v| ops.act.apply(v));
    let i0 = act1.zip_map(x, |a, b| clip(a + b))?;
    let cf2 = cf_forward(&i0, &block.cf2)?;
    let i1 = block.norm2.apply(&cf2.pw2).map(|v| ops.act.apply(v));
    let select = tgap(x, ops.tgap);
    let out = mux(&i0, &i1, &select)?;
    Ok(MorTrace {
        cf1,
        act1,
        i0,
        cf2,
        i1,
        select,
        out,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LstmMode {
    Float,
    /// Heaviside gates, strict-sign candidate, clipped ternary cell, no output tanh.
    Quantized,
}

/// Stage-effective LSTM weights. Gate column order is `[i, f, o, c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmWeights {
    pub n_in: usize,
    pub hidden: usize,
    pub wx: Vec<f64>,
    pub wh: Vec<f64>,
    pub bias: Option<Vec<f64>>,
    /// Weight scale applied after accumulation (1 for float weights).
    pub scale: f64,
}

/// `out += x * W` for a row vector `x` and a row-major `W` with `cols` columns.
#[inline]
pub(crate) fn vec_mat_acc(x: &[f64], w: &[f64], cols: usize, out: &mut [f64]) {
    for (j, &xv) in x.iter().enumerate() {
        if xv == 0.0 {
            continue;
        }
        for (a, &b) in out.iter_mut().zip(&w[j * cols..(j + 1) * cols]) {
            *a += xv * b;
        }
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Gate pre-activations `scale * ((x Wx) / x_div + h Wh) + b`.
///
/// `x_div` is a division rather than a reciprocal multiply: for integer `x Wx`
/// and `h Wh` the quotient is exact whenever the true sum is zero, so the sign
/// of every pre-activation matches `x Wx + x_div * h Wh` exactly.
pub fn lstm_preact(x: &[f64], x_div: f64, h_prev: &[f64], w: &LstmWeights) -> Vec<f64> {
    let cols = 4 * w.hidden;
    let mut px = vec![0.0; cols];
    vec_mat_acc(x, &w.wx, cols, &mut px);
    let mut ph = vec![0.0; cols];
    vec_mat_acc(h_prev, &w.wh, cols, &mut ph);
    let mut pre: Vec<f64> = px
        .iter()
        .zip(&ph)
        .map(|(a, b)| (a / x_div + b) * w.scale)
        .collect();
    if let Some(b) = &w.bias {
        for (p, bv) in pre.iter_mut().zip(b) {
            *p += bv;
        }
    }
    pre
}

/// One LSTM step. Returns `(h_t, c_t)`.
pub fn lstm_cell(
    x: &[f64],
    x_div: f64,
    h_prev: &[f64],
    c_prev: &[f64],
    w: &LstmWeights,
    mode: LstmMode,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let hd = w.hidden;
    if x.len() != w.n_in || h_prev.len() != hd || c_prev.len() != hd {
        return Err(NetError::Shape(format!(
            "lstm step: x {} (want {}), h {}, c {} (want {hd})",
            x.len(),
            w.n_in,
            h_prev.len(),
            c_prev.len()
        )));
    }
    let pre = lstm_preact(x, x_div, h_prev, w);
    let mut h = vec![0.0; hd];
    let mut c = vec![0.0; hd];
    for k in 0..hd {
        let (pi, pf, po, pc) = (pre[k], pre[hd + k], pre[2 * hd + k], pre[3 * hd + k]);
        match mode {
            LstmMode::Float => {
                let (i, f, o, cand) = (sigmoid(pi), sigmoid(pf), sigmoid(po), pc.tanh());
                c[k] = f * c_prev[k] + i * cand;
                h[k] = o * c[k].tanh();
            }
            LstmMode::Quantized => {
                let (i, f, o, cand) = (heaviside(pi), heaviside(pf), heaviside(po), sign_strict(pc));
                c[k] = clip(f * c_prev[k] + i * cand);
                h[k] = o * c[k];
            }
        }
    }
    Ok((h, c))
}

/// Runs an LSTM layer over a `(N, T, 1, 1, n_in)` sequence; returns `(h, c)` sequences.
pub fn lstm_sequence(
    x: &Tensor5,
    x_div: f64,
    w: &LstmWeights,
    mode: LstmMode,
) -> Result<(Tensor5, Tensor5)> {
    let [n, t, _, _, k] = x.shape();
    if k != w.n_in {
        return Err(NetError::Shape(format!("lstm input {k}, expected {}", w.n_in)));
    }
    let hd = w.hidden;
    let mut hs = Tensor5::zeros([n, t, 1, 1, hd]);
    let mut cs = Tensor5::zeros([n, t, 1, 1, hd]);
    for ni in 0..n {
        let mut h = vec![0.0; hd];
        let mut c = vec![0.0; hd];
        for ti in 0..t {
            let xi = &x.data()[(ni * t + ti) * k..(ni * t + ti + 1) * k];
            let (h2, c2) = lstm_cell(xi, x_div, &h, &c, w, mode)?;
            h = h2;
            c = c2;
            let o = (ni * t + ti) * hd;
            hs.data_mut()[o..o + hd].copy_from_slice(&h);
            cs.data_mut()[o..o + hd].copy_from_slice(&c);
        }
    }
    Ok((hs, cs))
}

/// Per-step unscaled dense responses `h_t W`, shape `(N, T, 1, 1, classes)`.
pub fn dense_head(h_seq: &Tensor5, w: &Tensor5) -> Result<Tensor5> {
    let [n, t, _, _, k] = h_seq.shape();
    let [_, _, _, wi, classes] = w.shape();
    if wi != k {
        return Err(NetError::Shape(format!("dense input {k}, weights expect {wi}")));
    }
    let mut out = Tensor5::zeros([n, t, 1, 1, classes]);
    for (o, x) in out
        .data_mut()
        .chunks_exact_mut(classes)
        .zip(h_seq.data().chunks_exact(k))
    {
        vec_mat_acc(x, w.data(), classes, o);
    }
    Ok(out)
}

/// Class scores: temporal mean of the scaled per-step responses, evaluated as
/// `(sum_t acc_t) * (scale / T)`.
pub fn aggregate_logits(acc: &Tensor5, scale: f64) -> Vec<Vec<f64>> {
    let [n, t, _, _, k] = acc.shape();
    let f = scale / t as f64;
    (0..n)
        .map(|ni| {
            let mut s = vec![0.0; k];
            for ti in 0..t {
                let row = &acc.data()[(ni * t + ti) * k..(ni * t + ti + 1) * k];
                for (a, b) in s.iter_mut().zip(row) {
                    *a += b;
                }
            }
            s.iter().map(|v| v * f).collect()
        })
        .collect()
}

/// Index of the largest score, lowest index on ties.
pub fn argmax<T: PartialOrd + Copy>(scores: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in scores.iter().enumerate() {
        if v > scores[best] {
            best = i;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Stage-effective weights

pub fn effective_conv(model: &Billnet, name: &str) -> Result<Tensor5> {
    let w = model.param(name)?;
    Ok(if model.stage.weights_quantized() {
        w.map(sign_strict)
    } else {
        w.clone()
    })
}

pub fn effective_cf(model: &Billnet, cf: &Cf) -> Result<CfBlock> {
    Ok(CfBlock {
        pw1: (cf.pw1.spec, effective_conv(model, &cf.pw1.weight)?),
        gconv: (cf.gconv.spec, effective_conv(model, &cf.gconv.weight)?),
        pw2: (cf.pw2.spec, effective_conv(model, &cf.pw2.weight)?),
    })
}

pub fn effective_norm(model: &Billnet, norm: usize) -> Norm {
    match &model.norms[norm] {
        NormState::Shift(s) => Norm::Shift(s.clone()),
        NormState::Batch { .. } => Norm::Batch(model.bn_params(norm).expect("batch norm params")),
    }
}

pub fn effective_lstm(model: &Billnet, l: &LstmLayer) -> Result<LstmWeights> {
    let wx = model.param(&l.wx)?;
    let wh = model.param(&l.wh)?;
    let quantized = model.stage.weights_quantized();
    let q = |t: &Tensor5| -> Vec<f64> {
        if quantized {
            t.data().iter().map(|&v| sign_strict(v)).collect()
        } else {
            t.data().to_vec()
        }
    };
    Ok(LstmWeights {
        n_in: l.n_in,
        hidden: l.hidden,
        wx: q(wx),
        wh: q(wh),
        bias: model.params.get(&l.bias).map(|b| b.data().to_vec()),
        scale: if quantized {
            ssign_scale(l.n_in, l.hidden)
        } else {
            1.0
        },
    })
}

/// Dense weights and their scale: ternary codes with `1/sqrt(4m)` once weights are quantized.
pub fn effective_dense(model: &Billnet) -> Result<(Tensor5, f64)> {
    let w = model.param(&model.graph.dense.weight)?;
    Ok(if model.stage.weights_quantized() {
        let delta = tern_threshold(w.data());
        (w.map(|v| tern_code(v, delta)), stern_scale(model.config.m))
    } else {
        (w.clone(), 1.0)
    })
}

pub fn lstm_mode(stage: Stage) -> LstmMode {
    if stage.lstm_acts_quantized() {
        LstmMode::Quantized
    } else {
        LstmMode::Float
    }
}

// ---------------------------------------------------------------------------
// Whole-model forward

/// Value domain of a traced intermediate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValueKind {
    Bits,
    Ternary,
    Integer,
    Real,
}

impl ValueKind {
    pub fn admits(self, v: f64) -> bool {
        match self {
            ValueKind::Bits => v == 0.0 || v == 1.0,
            ValueKind::Ternary => v == 0.0 || v == 1.0 || v == -1.0,
            ValueKind::Integer => v.fract() == 0.0,
            ValueKind::Real => v.is_finite(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceEntry {
    pub name: String,
    pub kind: ValueKind,
    pub value: Tensor5,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefOutput {
    /// Unscaled per-step dense responses, `(N, T', 1, 1, classes)`.
    pub acc: Tensor5,
    pub dense_scale: f64,
    pub scores: Vec<Vec<f64>>,
    pub predictions: Vec<usize>,
    pub trace: Vec<TraceEntry>,
}

impl RefOutput {
    /// Scaled per-step class responses (the class-temporal map) of sample `n`.
    pub fn heatmap(&self, n: usize) -> Vec<Vec<f64>> {
        let [_, t, _, _, k] = self.acc.shape();
        (0..t)
            .map(|ti| {
                (0..k)
                    .map(|ki| self.acc.get([n, ti, 0, 0, ki]) * self.dense_scale)
                    .collect()
            })
            .collect()
    }
}

struct Tracer {
    enabled: bool,
    quantized: bool,
    entries: Vec<TraceEntry>,
}

impl Tracer {
    fn push(&mut self, name: String, kind: ValueKind, value: &Tensor5) {
        if self.enabled {
            let kind = if self.quantized { kind } else { ValueKind::Real };
            self.entries.push(TraceEntry {
                name,
                kind,
                value: value.clone(),
            });
        }
    }

    fn cf(&mut self, prefix: &str, t: &CfTrace) {
        self.push(format!("{prefix}.pw1"), ValueKind::Integer, &t.pw1);
        self.push(format!("{prefix}.gconv"), ValueKind::Integer, &t.gconv);
        self.push(format!("{prefix}.pw2"), ValueKind::Integer, &t.pw2);
    }
}

/// Evaluates the model on a batch of 8-bit input codes `(N, T, H, W, 1)`.
pub fn forward(model: &Billnet, input: &Tensor5, trace: bool) -> Result<RefOutput> {
    let cfg = &model.config;
    let expect = [input.shape()[0], cfg.frames, cfg.height, cfg.width, 1];
    if input.shape() != expect {
        return Err(NetError::Shape(format!(
            "input {:?}, expected {expect:?}",
            input.shape()
        )));
    }
    let stage = model.stage;
    let ops = StageOps::for_stage(stage, cfg.tgap);
    let mut tr = Tracer {
        enabled: trace,
        quantized: stage == Stage::FULL,
        entries: Vec::new(),
    };
    let mut x = input.clone();
    for layer in &model.graph.layers {
        let name = &layer.name;
        x = match &layer.kind {
            LayerKind::Stem { conv, norm } => {
                let acc = conv3d(&x, &effective_conv(model, &conv.weight)?, &conv.spec)?;
                tr.push(format!("{name}.acc"), ValueKind::Integer, &acc);
                let pre = effective_norm(model, *norm).apply(&acc.map(|v| v * INPUT_SCALE));
                pre.map(|v| ops.act.apply(v))
            }
            LayerKind::Cf { cf, norm } => {
                let t = cf_forward(&x, &effective_cf(model, cf)?)?;
                tr.cf(&format!("{name}.cf"), &t);
                effective_norm(model, *norm)
                    .apply(&t.pw2)
                    .map(|v| ops.act.apply(v))
            }
            LayerKind::Mor {
                cf1,
                norm1,
                cf2,
                norm2,
            } => {
                let block = MorBlock {
                    cf1: effective_cf(model, cf1)?,
                    norm1: effective_norm(model, *norm1),
                    cf2: effective_cf(model, cf2)?,
                    norm2: effective_norm(model, *norm2),
                };
                let t = mor_forward(&x, &block, ops)?;
                tr.cf(&format!("{name}.cf1"), &t.cf1);
                tr.push(format!("{name}.act1"), ValueKind::Bits, &t.act1);
                tr.push(format!("{name}.i0"), ValueKind::Bits, &t.i0);
                tr.cf(&format!("{name}.cf2"), &t.cf2);
                tr.push(format!("{name}.i1"), ValueKind::Bits, &t.i1);
                tr.push(format!("{name}.select"), ValueKind::Bits, &t.select);
                t.out
            }
            LayerKind::MaxPool { window } => maxpool3d(&x, *window)?,
        };
        tr.push(name.clone(), ValueKind::Bits, &x);
    }
    let gap = spatial_sum(&x);
    tr.push("gap.sum".into(), ValueKind::Integer, &gap);
    let hw = (x.shape()[2] * x.shape()[3]) as f64;
    let mode = lstm_mode(stage);
    let mut seq = gap;
    // the first LSTM sees spatial sums; dividing by hw there makes them means
    let mut x_div = hw;
    for l in &model.graph.lstm {
        let w = effective_lstm(model, l)?;
        let (h, c) = lstm_sequence(&seq, x_div, &w, mode)?;
        tr.push(format!("{}.c", l.name), ValueKind::Ternary, &c);
        tr.push(format!("{}.h", l.name), ValueKind::Ternary, &h);
        seq = h;
        x_div = 1.0;
    }
    let (wd, dense_scale) = effective_dense(model)?;
    let acc = dense_head(&seq, &wd)?;
    tr.push("dense.acc".into(), ValueKind::Integer, &acc);
    let scores = aggregate_logits(&acc, dense_scale);
    let predictions = scores.iter().map(|s| argmax(s)).collect();
    Ok(RefOutput {
        acc,
        dense_scale,
        scores,
        predictions,
        trace: tr.entries,
    })
}

/// Checks every traced intermediate against its declared value domain; returns
/// the names of offending entries.
pub fn audit_trace(trace: &[TraceEntry]) -> Vec<String> {
    trace
        .iter()
        .filter(|e| !e.value.data().iter().all(|&v| e.kind.admits(v)))
        .map(|e| e.name.clone())
        .collect()
}

/// Predicted classes for a list of single clips, evaluated in batches.
pub fn predict(model: &Billnet, clips: &[&Tensor5], batch: usize) -> Result<Vec<usize>> {
    let chunks: Vec<&[&Tensor5]> = clips.chunks(batch.max(1)).collect();
    let preds: Result<Vec<Vec<usize>>> = chunks
        .par_iter()
        .map(|chunk| {
            let parts: Vec<Tensor5> = chunk.iter().map(|t| (*t).clone()).collect();
            let x = Tensor5::stack_batch(&parts)?;
            Ok(forward(model, &x, false)?.predictions)
        })
        .collect();
    Ok(preds?.into_iter().flatten().collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn spec(k: usize, g: usize, cin: usize, cout: usize) -> ConvSpec {
        ConvSpec {
            kernel: [k; 3],
            stride: [1; 3],
            groups: g,
            in_channels: cin,
            out_channels: cout,
        }
    }

    /// Direct six-loop convolution used as an oracle.
    fn naive_conv(x: &Tensor5, w: &Tensor5, s: &ConvSpec) -> Tensor5 {
        let [n, t, h, wd, _] = x.shape();
        let out_dims = s.output_dims([t, h, wd]);
        let pad = s.pad_before([t, h, wd]);
        let (cig, cog) = (s.in_per_group(), s.out_per_group());
        Tensor5::from_fn([n, out_dims[0], out_dims[1], out_dims[2], s.out_channels], |[ni, ot, oh, ow, oc]| {
            let gi = oc / cog;
            let mut acc = 0.0;
            for dt in 0..s.kernel[0] {
                for dh in 0..s.kernel[1] {
                    for dw in 0..s.kernel[2] {
                        let it = (ot * s.stride[0] + dt) as isize - pad[0] as isize;
                        let ih = (oh * s.stride[1] + dh) as isize - pad[1] as isize;
                        let iw = (ow * s.stride[2] + dw) as isize - pad[2] as isize;
                        if it < 0 || ih < 0 || iw < 0 || it >= t as isize || ih >= h as isize || iw >= wd as isize {
                            continue;
                        }
                        for ci in 0..cig {
                            acc += x.get([ni, it as usize, ih as usize, iw as usize, gi * cig + ci])
                                * w.get([dt, dh, dw, ci, oc]);
                        }
                    }
                }
            }
            acc
        })
    }

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 5]) -> Tensor5 {
        Tensor5::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn identity_pointwise_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = rand_tensor(&mut rng, [2, 3, 4, 5, 3]);
        let s = spec(1, 1, 3, 3);
        let w = Tensor5::from_fn(s.weight_shape(), |[_, _, _, ci, co]| f64::from(ci == co));
        assert_eq!(conv3d(&x, &w, &s).unwrap(), x);
    }

    #[test]
    fn ones_kernel_on_impulse() {
        let s = spec(3, 1, 1, 1);
        let w = Tensor5::filled(s.weight_shape(), 1.0);
        let mut x = Tensor5::zeros([1, 5, 5, 5, 1]);
        x.set([0, 2, 2, 2, 0], 1.0);
        let y = conv3d(&x, &w, &s).unwrap();
        assert_eq!(y.data().iter().sum::<f64>(), 27.0);
        assert!(y.data().iter().all(|&v| v == 0.0 || v == 1.0));
        assert_eq!(y.get([0, 1, 3, 2, 0]), 1.0);
    }

    #[test]
    fn depthwise_pointwise_is_channel_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&mut rng, [1, 2, 2, 2, 4]);
        let s = spec(1, 4, 4, 4);
        let w = Tensor5::vector(vec![1.0, -2.0, 0.5, 3.0]).unwrap().reshape([1, 1, 1, 1, 4]).unwrap();
        let y = conv3d(&x, &w, &s).unwrap();
        for (i, (&a, &b)) in y.data().iter().zip(x.data()).enumerate() {
            assert_eq!(a, b * w.data()[i % 4]);
        }
    }

    #[test]
    fn conv_matches_naive_including_strides() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let g = [1, 2][rng.gen_range(0..2)];
            let s = ConvSpec {
                kernel: [3, 3, 1],
                stride: [rng.gen_range(1..3), rng.gen_range(1..3), 1],
                groups: g,
                in_channels: 2 * g,
                out_channels: 2 * g,
            };
            let (t, h) = (rng.gen_range(1..6), rng.gen_range(1..6));
            let x = rand_tensor(&mut rng, [2, t, h, 3, 2 * g]);
            let w = rand_tensor(&mut rng, s.weight_shape());
            let a = conv3d(&x, &w, &s).unwrap();
            let b = naive_conv(&x, &w, &s);
            assert_eq!(a.shape(), b.shape());
            for (p, q) in a.data().iter().zip(b.data()) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn grouped_conv_equals_independent_slices() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let g = rng.gen_range(1..4);
            let (cig, cog) = (rng.gen_range(1..3), rng.gen_range(1..3));
            let s = spec(3, g, g * cig, g * cog);
            let x = Tensor5::from_fn([1, 3, 3, 4, g * cig], |_| f64::from(rng.gen_range(-3..4)));
            let w = Tensor5::from_fn(s.weight_shape(), |_| f64::from(rng.gen_range(-2..3)));
            let y = conv3d(&x, &w, &s).unwrap();
            for gi in 0..g {
                let xs = Tensor5::from_fn([1, 3, 3, 4, cig], |[a, b, c, d, e]| x.get([a, b, c, d, gi * cig + e]));
                let ws = Tensor5::from_fn([3, 3, 3, cig, cog], |[a, b, c, d, e]| w.get([a, b, c, d, gi * cog + e]));
                let ys = conv3d(&xs, &ws, &spec(3, 1, cig, cog)).unwrap();
                for idx in 0..ys.len() {
                    let (p, oc) = (idx / cog, idx % cog);
                    assert_eq!(ys.data()[idx], y.data()[p * g * cog + gi * cog + oc]);
                }
            }
        }
    }

    #[test]
    fn bad_grouping_rejected() {
        let s = spec(1, 3, 4, 6);
        let x = Tensor5::zeros([1, 1, 1, 1, 4]);
        let w = Tensor5::zeros([1, 1, 1, 1, 6]);
        assert!(matches!(conv3d(&x, &w, &s), Err(NetError::BadGrouping(_))));
    }

    #[test]
    fn stride_two_same_padding_halves() {
        let s = ConvSpec {
            kernel: [3, 3, 3],
            stride: [2, 2, 2],
            groups: 1,
            in_channels: 1,
            out_channels: 1,
        };
        assert_eq!(s.output_dims([16, 96, 128]), [8, 48, 64]);
        assert_eq!(s.output_dims([8, 24, 32]), [4, 12, 16]);
    }

    #[test]
    fn pooling_examples() {
        let x = Tensor5::filled([1, 2, 4, 4, 2], 0.75);
        assert!(maxpool3d(&x, [1, 2, 2]).unwrap().data().iter().all(|&v| v == 0.75));
        assert!(gap_spatial(&x).data().iter().all(|&v| v == 0.75));
        let map = Tensor5::from_fn([1, 1, 6, 8, 1], |[_, _, h, w, _]| f64::from((h * 8 + w) < 25));
        assert_eq!(gap_spatial(&map).data()[0], 25.0 / 48.0);
    }

    #[test]
    fn binary_maxpool_is_or_exhaustive() {
        // every 2x2 binary window
        for bits in 0u32..16 {
            let x = Tensor5::from_fn([1, 1, 2, 2, 1], |[_, _, h, w, _]| f64::from((bits >> (h * 2 + w)) & 1));
            let y = maxpool3d(&x, [1, 2, 2]).unwrap();
            assert_eq!(y.data()[0], f64::from(bits != 0));
        }
    }

    #[test]
    fn mux_selects() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bin = |rng: &mut ChaCha8Rng, s| Tensor5::from_fn(s, |_| f64::from(rng.gen::<bool>() as u8));
        let i0 = bin(&mut rng, [2, 3, 2, 2, 5]);
        let i1 = bin(&mut rng, [2, 3, 2, 2, 5]);
        assert_eq!(mux(&i0, &i1, &Tensor5::filled([2, 3, 1, 1, 5], 1.0)).unwrap(), i1);
        assert_eq!(mux(&i0, &i1, &Tensor5::zeros([2, 3, 1, 1, 5])).unwrap(), i0);
        let s = bin(&mut rng, [2, 3, 1, 1, 5]);
        let y = mux(&i0, &i1, &s).unwrap();
        for n in 0..2 {
            for t in 0..3 {
                for h in 0..2 {
                    for w in 0..2 {
                        for c in 0..5 {
                            let want = if s.get([n, t, 0, 0, c]) == 1.0 { i1.get([n, t, h, w, c]) } else { i0.get([n, t, h, w, c]) };
                            assert_eq!(y.get([n, t, h, w, c]), want);
                        }
                    }
                }
            }
        }
        let bad = Tensor5::filled([2, 3, 1, 1, 5], 0.5);
        assert!(matches!(mux(&i0, &i1, &bad), Err(NetError::NonBinarySelect(0))));
    }

    #[test]
    fn quantized_tgap_is_strict_half() {
        let map = |ones: usize| Tensor5::from_fn([1, 1, 6, 8, 1], |[_, _, h, w, _]| f64::from((h * 8 + w) < ones));
        assert_eq!(tgap(&map(25), TgapMode::Quantized).data()[0], 1.0);
        assert_eq!(tgap(&map(24), TgapMode::Quantized).data()[0], 0.0);
        assert_eq!(tgap(&map(0), TgapMode::Float(TgapCalibration::PerSample)).data()[0], 0.0);
    }

    #[test]
    fn float_tgap_uses_layer_maximum() {
        // two channels with means 0.2 and 0.8: threshold 0.4
        let x = Tensor5::from_fn([1, 1, 1, 1, 2], |[.., c]| [0.2, 0.8][c]);
        let s = tgap(&x, TgapMode::Float(TgapCalibration::PerSample));
        assert_eq!(s.data(), &[0.0, 1.0]);
        let s = tgap(&x, TgapMode::Float(TgapCalibration::Constant { m: 0.3 }));
        assert_eq!(s.data(), &[1.0, 1.0]);
    }

    fn identity_cf(c: usize, g: usize) -> CfBlock {
        // zero weights: CF output is all zero
        let low = c / 2;
        let z = |s: ConvSpec| (s, Tensor5::zeros(s.weight_shape()));
        CfBlock {
            pw1: z(spec(1, 1, c, low)),
            gconv: z(spec(3, g, low, low)),
            pw2: z(spec(1, 1, low, c)),
        }
    }

    #[test]
    fn mor_branches_follow_select() {
        let ops = StageOps::for_stage(Stage::FULL, TgapCalibration::PerSample);
        let mut block = MorBlock {
            cf1: identity_cf(4, 2),
            norm1: Norm::Shift(ShiftNorm::identity(4)),
            cf2: identity_cf(4, 2),
            norm2: Norm::Shift(ShiftNorm::identity(4)),
        };
        // mostly-zero input: select 0, output is the OR branch == x (CF1 output is 0)
        let x = Tensor5::from_fn([1, 2, 2, 2, 4], |[_, t, h, w, c]| f64::from(t == 0 && h == 0 && w == 0 && c < 2));
        let t = mor_forward(&x, &block, ops).unwrap();
        assert!(t.select.data().iter().all(|&v| v == 0.0));
        assert_eq!(t.out, t.i0);
        assert_eq!(t.i0, x);
        // mostly-one input: select 1, output is the second Heaviside (CF2 of ones)
        block.cf2.pw2.1 = Tensor5::filled(block.cf2.pw2.0.weight_shape(), 1.0);
        block.cf2.gconv.1 = Tensor5::filled(block.cf2.gconv.0.weight_shape(), 1.0);
        block.cf2.pw1.1 = Tensor5::filled(block.cf2.pw1.0.weight_shape(), 1.0);
        let ones = Tensor5::filled([1, 2, 2, 2, 4], 1.0);
        let t = mor_forward(&ones, &block, ops).unwrap();
        assert!(t.select.data().iter().all(|&v| v == 1.0));
        assert_eq!(t.out, t.i1);
        // zero input: select 0 everywhere, output is the OR branch
        let zero = Tensor5::zeros([1, 2, 2, 2, 4]);
        let t = mor_forward(&zero, &block, ops).unwrap();
        assert!(t.select.data().iter().all(|&v| v == 0.0));
        assert_eq!(t.out, t.i0);
    }

    fn rand_lstm(rng: &mut ChaCha8Rng, n_in: usize, hd: usize, quantized: bool) -> LstmWeights {
        let mut draw = |len: usize| -> Vec<f64> {
            (0..len)
                .map(|_| if quantized { if rng.gen() { 1.0 } else { -1.0 } } else { rng.gen_range(-0.5..0.5) })
                .collect()
        };
        LstmWeights {
            n_in,
            hidden: hd,
            wx: draw(n_in * 4 * hd),
            wh: draw(hd * 4 * hd),
            bias: (!quantized).then(|| draw(4 * hd)),
            scale: if quantized { ssign_scale(n_in, hd) } else { 1.0 },
        }
    }

    #[test]
    fn float_lstm_matches_textbook_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..200 {
            let (n_in, hd) = (rng.gen_range(1..6), rng.gen_range(1..5));
            let w = rand_lstm(&mut rng, n_in, hd, false);
            let x: Vec<f64> = (0..n_in).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let h0: Vec<f64> = (0..hd).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let c0: Vec<f64> = (0..hd).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (h, c) = lstm_cell(&x, 1.0, &h0, &c0, &w, LstmMode::Float).unwrap();
            // textbook: gate_k = act(W^k . [x, h] + b^k)
            let b = w.bias.as_ref().unwrap();
            for k in 0..hd {
                let gate = |gi: usize| {
                    let col = gi * hd + k;
                    let mut z = b[col];
                    for j in 0..n_in {
                        z += w.wx[j * 4 * hd + col] * x[j];
                    }
                    for j in 0..hd {
                        z += w.wh[j * 4 * hd + col] * h0[j];
                    }
                    z
                };
                let (i, f, o) = (sigmoid(gate(0)), sigmoid(gate(1)), sigmoid(gate(2)));
                let ct = f * c0[k] + i * gate(3).tanh();
                assert!((c[k] - ct).abs() < 1e-6);
                assert!((h[k] - o * ct.tanh()).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn quantized_lstm_zero_preacts() {
        let w = LstmWeights {
            n_in: 2,
            hidden: 3,
            wx: vec![1.0; 24],
            wh: vec![1.0; 36],
            bias: None,
            scale: 0.5,
        };
        let (h, c) = lstm_cell(&[0.0, 0.0], 1.0, &[0.0; 3], &[0.0; 3], &w, LstmMode::Quantized).unwrap();
        assert_eq!(h, vec![0.0; 3]);
        assert_eq!(c, vec![0.0; 3]);
    }

    #[test]
    fn quantized_lstm_saturates_cell() {
        // all gates open, candidate +1, c_prev = +1 -> clip(2) = 1
        let w = LstmWeights {
            n_in: 1,
            hidden: 1,
            wx: vec![1.0; 4],
            wh: vec![1.0; 4],
            bias: None,
            scale: 1.0,
        };
        let (h, c) = lstm_cell(&[1.0], 1.0, &[1.0], &[1.0], &w, LstmMode::Quantized).unwrap();
        assert_eq!((h[0], c[0]), (1.0, 1.0));
    }

    #[test]
    fn quantized_lstm_matches_substituted_equations() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..2000 {
            let (n_in, hd) = (rng.gen_range(1..8), rng.gen_range(1..6));
            let w = rand_lstm(&mut rng, n_in, hd, true);
            let x: Vec<f64> = (0..n_in).map(|_| f64::from(rng.gen_range(0..2))).collect();
            let h0: Vec<f64> = (0..hd).map(|_| f64::from(rng.gen_range(-1..2))).collect();
            let c0: Vec<f64> = (0..hd).map(|_| f64::from(rng.gen_range(-1..2))).collect();
            let (h, c) = lstm_cell(&x, 1.0, &h0, &c0, &w, LstmMode::Quantized).unwrap();
            for k in 0..hd {
                let z = |gi: usize| -> i64 {
                    let col = gi * hd + k;
                    let mut s = 0i64;
                    for j in 0..n_in {
                        s += (w.wx[j * 4 * hd + col] * x[j]) as i64;
                    }
                    for j in 0..hd {
                        s += (w.wh[j * 4 * hd + col] * h0[j]) as i64;
                    }
                    s
                };
                let step = |v: i64| i64::from(v > 0);
                let cand = if z(3) > 0 { 1 } else { -1 };
                let ct = (step(z(1)) * c0[k] as i64 + step(z(0)) * cand).clamp(-1, 1);
                assert_eq!(c[k], ct as f64);
                assert_eq!(h[k], (step(z(2)) * ct) as f64);
            }
        }
    }

    #[test]
    fn dense_zero_and_tie_rule() {
        let h = Tensor5::zeros([1, 8, 1, 1, 4]);
        let w = Tensor5::filled([1, 1, 1, 4, 27], 1.0);
        let acc = dense_head(&h, &w).unwrap();
        assert_eq!(acc.shape(), [1, 8, 1, 1, 27]);
        let s = aggregate_logits(&acc, 0.5);
        assert_eq!(argmax(&s[0]), 0);
        let scores = [0.1, 0.7, 0.3];
        let scaled: Vec<f64> = scores.iter().map(|v| v * 3.5).collect();
        assert_eq!(argmax(&scores), argmax(&scaled));
    }
}
