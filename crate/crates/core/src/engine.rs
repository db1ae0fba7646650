//! Logic-path executor for fully quantized models.
//!
//! A compiled [`GatePlan`] holds only bit planes, small signed integers and
//! integer thresholds. Execution uses AND/OR, popcount, integer compare and
//! small-integer adds. Normalization shifts and weight scales are positive and
//! never move a threshold at zero, so the compiler drops them.

use std::fmt;

use rayon::prelude::*;
use thiserror::Error;

use crate::model::{Billnet, Cf, LayerKind, NormState, Stage};
use crate::quant::tgap_threshold;
use crate::refnet::{
    argmax, effective_conv, effective_dense, effective_lstm, ConvGeom, NetError, TraceEntry,
};
use crate::tensor::{
    popcount_and_words, ternary_bipolar_dot_words, ternary_dot_words, BitTensor, IntTensor,
    Tensor5, TensorError, TernTensor,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EngineError {
    #[error("model is not fully quantized: {0}")]
    NotFullyQuantized(String),
    #[error("slot {slot} holds {found:?}, op expects {expected:?}")]
    SlotTypeMismatch {
        slot: usize,
        expected: SlotType,
        found: SlotType,
    },
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("input code {value} at element {index} is not an 8-bit integer")]
    BadInput { index: usize, value: f64 },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Net(#[from] NetError),
}

pub type Result<T> = std::result::Result<T, EngineError>;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SlotType {
    Bit,
    Ternary,
    Integer,
}

#[derive(Debug, Clone, PartialEq)]
pub enum SlotValue {
    Bit(BitTensor),
    Tern(TernTensor),
    Int(IntTensor),
}

impl SlotValue {
    pub fn slot_type(&self) -> SlotType {
        match self {
            SlotValue::Bit(_) => SlotType::Bit,
            SlotValue::Tern(_) => SlotType::Ternary,
            SlotValue::Int(_) => SlotType::Integer,
        }
    }

    pub fn shape(&self) -> [usize; 5] {
        match self {
            SlotValue::Bit(b) => b.shape(),
            SlotValue::Tern(t) => t.shape(),
            SlotValue::Int(i) => i.shape(),
        }
    }

    pub fn to_tensor(&self) -> Tensor5 {
        match self {
            SlotValue::Bit(b) => b.unpack(),
            SlotValue::Tern(t) => t.to_tensor(),
            SlotValue::Int(i) => i.to_tensor(),
        }
    }
}

/// Packed sign planes of one quantized LSTM layer. Column `(gate, k)` of each
/// matrix is stored as a bit vector over its inputs, bit set for weight `+1`.
/// Gate order is `[i, f, o, c]`.
#[derive(Debug, Clone, PartialEq)]
pub struct QLstmKernel {
    pub n_in: usize,
    pub hidden: usize,
    /// Multiplier on the recurrent term. The first layer reads raw bitcounts
    /// whose reference form is divided by `h*w`; scaling the recurrent term by
    /// `h*w` instead keeps everything integral.
    pub h_mult: i64,
    x_words: usize,
    h_words: usize,
    wx: Vec<u64>,
    wh: Vec<u64>,
}

fn pack_columns(signs: &[f64], rows: usize, cols: usize) -> (Vec<u64>, usize) {
    let words = rows.div_ceil(64);
    let mut out = vec![0u64; cols * words];
    for r in 0..rows {
        for c in 0..cols {
            if signs[r * cols + c] > 0.0 {
                out[c * words + r / 64] |= 1 << (r % 64);
            }
        }
    }
    (out, words)
}

impl QLstmKernel {
    /// From row-major `±1` matrices `wx (n_in x 4H)` and `wh (H x 4H)`.
    pub fn from_signs(n_in: usize, hidden: usize, wx: &[f64], wh: &[f64], h_mult: i64) -> Result<Self> {
        if wx.len() != n_in * 4 * hidden || wh.len() != hidden * 4 * hidden {
            return Err(EngineError::Shape(format!(
                "lstm kernels {} and {} for {n_in} -> {hidden}",
                wx.len(),
                wh.len()
            )));
        }
        let (wx, x_words) = pack_columns(wx, n_in, 4 * hidden);
        let (wh, h_words) = pack_columns(wh, hidden, 4 * hidden);
        Ok(Self {
            n_in,
            hidden,
            h_mult,
            x_words,
            h_words,
            wx,
            wh,
        })
    }

    fn column<'a>(&self, planes: &'a [u64], words: usize, col: usize) -> &'a [u64] {
        &planes[col * words..(col + 1) * words]
    }
}

/// Recurrent carry of a quantized LSTM, both ternary.
#[derive(Debug, Clone, PartialEq)]
pub struct QLstmState {
    pub c: TernTensor,
    pub h: TernTensor,
}

impl QLstmState {
    pub fn zeros(hidden: usize) -> Self {
        Self {
            c: TernTensor::zeros([1, 1, 1, 1, hidden]),
            h: TernTensor::zeros([1, 1, 1, 1, hidden]),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum LstmInput<'a> {
    /// Integer features (GAP bitcounts).
    Counts(&'a [i32]),
    /// Ternary features as plus/minus planes.
    Tern { plus: &'a [u64], minus: &'a [u64] },
}

/// One quantized LSTM step: integer pre-activations, strict `> 0` gates,
/// saturating ternary cell update, `h = o AND c`.
pub fn qlstm_step(kernel: &QLstmKernel, x: LstmInput<'_>, state: &QLstmState) -> Result<QLstmState> {
    let hd = kernel.hidden;
    if state.c.shape()[4] != hd || state.h.shape()[4] != hd {
        return Err(EngineError::Shape(format!(
            "state width {} / {}, kernel hidden {hd}",
            state.c.shape()[4],
            state.h.shape()[4]
        )));
    }
    match x {
        LstmInput::Counts(v) if v.len() != kernel.n_in => {
            return Err(EngineError::Shape(format!("{} counts, kernel expects {}", v.len(), kernel.n_in)))
        }
        LstmInput::Tern { plus, minus } if plus.len() != kernel.x_words || minus.len() != kernel.x_words => {
            return Err(EngineError::Shape(format!("ternary input of {} words", plus.len())))
        }
        _ => {}
    }
    let (hp, hm) = (state.h.plus().words(), state.h.minus().words());
    let pre = |col: usize| -> i64 {
        let wcol = kernel.column(&kernel.wx, kernel.x_words, col);
        let xpart = match x {
            LstmInput::Counts(counts) => {
                let mut total = 0i64;
                let mut plus = 0i64;
                for (j, &v) in counts.iter().enumerate() {
                    total += i64::from(v);
                    if (wcol[j / 64] >> (j % 64)) & 1 == 1 {
                        plus += i64::from(v);
                    }
                }
                2 * plus - total
            }
            LstmInput::Tern { plus, minus } => ternary_bipolar_dot_words(plus, minus, wcol),
        };
        let hcol = kernel.column(&kernel.wh, kernel.h_words, col);
        xpart + kernel.h_mult * ternary_bipolar_dot_words(hp, hm, hcol)
    };
    let mut c = TernTensor::zeros([1, 1, 1, 1, hd]);
    let mut h = TernTensor::zeros([1, 1, 1, 1, hd]);
    for k in 0..hd {
        let i = pre(k) > 0;
        let f = pre(hd + k) > 0;
        let o = pre(2 * hd + k) > 0;
        let cand: i8 = if pre(3 * hd + k) > 0 { 1 } else { -1 };
        let idx = [0, 0, 0, 0, k];
        let kept = if f { state.c.get(idx) } else { 0 };
        let added = if i { cand } else { 0 };
        let ck = (kept + added).clamp(-1, 1);
        c.set(idx, ck);
        if o {
            h.set(idx, ck);
        }
    }
    Ok(QLstmState { c, h })
}

/// One node of a compiled plan. `name` is the reference-trace name of the
/// value the op writes.
#[derive(Debug, Clone, PartialEq)]
pub enum GateOp {
    /// Integer MAC of `±1` weights over integer input (stem codes, CF inner layers).
    IntConv {
        name: String,
        input: usize,
        out: usize,
        geom: ConvGeom,
        weights: Vec<i8>,
    },
    /// Binary-input convolution: `2 * pc(a AND w) - pc(a AND group)` per tap.
    PackedConv {
        name: String,
        input: usize,
        out: usize,
        geom: ConvGeom,
        plus: Vec<u64>,
        group_mask: Vec<u64>,
    },
    /// `acc > 0`.
    Threshold { name: String, input: usize, out: usize },
    Or {
        name: String,
        a: usize,
        b: usize,
        out: usize,
    },
    /// Channel select: bitcount of the map `> threshold`.
    Tgap {
        name: String,
        input: usize,
        out: usize,
        threshold: u32,
    },
    Mux {
        name: String,
        i0: usize,
        i1: usize,
        select: usize,
        out: usize,
    },
    /// Max pooling on bits, as an OR over the window.
    OrPool {
        name: String,
        input: usize,
        out: usize,
        window: [usize; 3],
    },
    /// Per-channel spatial bitcount.
    BitCount { name: String, input: usize, out: usize },
    QLstm {
        name: String,
        input: usize,
        h_out: usize,
        c_out: usize,
        kernel: QLstmKernel,
    },
    TernDense {
        name: String,
        input: usize,
        out: usize,
        classes: usize,
        plus: Vec<u64>,
        minus: Vec<u64>,
    },
}

impl GateOp {
    pub fn kind(&self) -> &'static str {
        match self {
            GateOp::IntConv { .. } => "int-conv",
            GateOp::PackedConv { .. } => "packed-conv",
            GateOp::Threshold { .. } => "threshold",
            GateOp::Or { .. } => "or",
            GateOp::Tgap { .. } => "tgap",
            GateOp::Mux { .. } => "mux",
            GateOp::OrPool { .. } => "or-pool",
            GateOp::BitCount { .. } => "bitcount",
            GateOp::QLstm { .. } => "qlstm-step",
            GateOp::TernDense { .. } => "tern-dense",
        }
    }

    pub fn name(&self) -> &str {
        match self {
            GateOp::IntConv { name, .. }
            | GateOp::PackedConv { name, .. }
            | GateOp::Threshold { name, .. }
            | GateOp::Or { name, .. }
            | GateOp::Tgap { name, .. }
            | GateOp::Mux { name, .. }
            | GateOp::OrPool { name, .. }
            | GateOp::BitCount { name, .. }
            | GateOp::QLstm { name, .. }
            | GateOp::TernDense { name, .. } => name,
        }
    }
}

/// Topologically ordered gate program. Slot 0 holds the 8-bit input codes.
#[derive(Debug, Clone, PartialEq)]
pub struct GatePlan {
    pub ops: Vec<GateOp>,
    pub slot_types: Vec<SlotType>,
    pub input_shape: [usize; 4],
    pub logits_slot: usize,
    pub steps: usize,
    pub classes: usize,
}

impl GatePlan {
    /// Shape of the per-step class response map, `(T', classes)`.
    pub fn heatmap_shape(&self) -> (usize, usize) {
        (self.steps, self.classes)
    }

    pub fn count(&self, kind: &str) -> usize {
        self.ops.iter().filter(|o| o.kind() == kind).count()
    }
}

struct Builder {
    ops: Vec<GateOp>,
    slots: Vec<SlotType>,
}

impl Builder {
    fn slot(&mut self, t: SlotType) -> usize {
        self.slots.push(t);
        self.slots.len() - 1
    }

    fn conv(&mut self, name: String, input: usize, geom: ConvGeom, w: &Tensor5) -> usize {
        let out = self.slot(SlotType::Integer);
        let op = match self.slots[input] {
            SlotType::Bit => {
                let (plus, group_mask) = pack_conv_weights(&geom, w);
                GateOp::PackedConv {
                    name,
                    input,
                    out,
                    geom,
                    plus,
                    group_mask,
                }
            }
            _ => GateOp::IntConv {
                name,
                input,
                out,
                geom,
                weights: w.data().iter().map(|&v| if v > 0.0 { 1 } else { -1 }).collect(),
            },
        };
        self.ops.push(op);
        out
    }

    fn threshold(&mut self, name: String, input: usize) -> usize {
        let out = self.slot(SlotType::Bit);
        self.ops.push(GateOp::Threshold { name, input, out });
        out
    }

    fn cf(&mut self, model: &Billnet, prefix: &str, cf: &Cf, input: usize, dims: [usize; 3]) -> Result<usize> {
        let mut x = input;
        for (part, conv) in ["pw1", "gconv", "pw2"].iter().zip(cf.convs()) {
            let geom = ConvGeom::new(
                [1, dims[0], dims[1], dims[2], conv.spec.in_channels],
                conv.spec.weight_shape(),
                &conv.spec,
            )?;
            let w = effective_conv(model, &conv.weight)?;
            x = self.conv(format!("{prefix}.{part}"), x, geom, &w);
        }
        Ok(x)
    }
}

/// Per `(tap, out channel)` bit vector over the input channels, plus the
/// per-output-channel mask of its group's input channels.
fn pack_conv_weights(geom: &ConvGeom, w: &Tensor5) -> (Vec<u64>, Vec<u64>) {
    let s = &geom.spec;
    let (cin, cout, cig, cog) = (s.in_channels, s.out_channels, s.in_per_group(), s.out_per_group());
    let wpp = cin.div_ceil(64);
    let taps: usize = s.kernel.iter().product();
    let mut plus = vec![0u64; taps * cout * wpp];
    let mut mask = vec![0u64; cout * wpp];
    for o in 0..cout {
        let gi = o / cog;
        for ci in 0..cig {
            let ch = gi * cig + ci;
            mask[o * wpp + ch / 64] |= 1 << (ch % 64);
            for tap in 0..taps {
                if w.data()[(tap * cig + ci) * cout + o] > 0.0 {
                    plus[(tap * cout + o) * wpp + ch / 64] |= 1 << (ch % 64);
                }
            }
        }
    }
    (plus, mask)
}

/// Compiles a stage-5 model into a gate plan.
pub fn compile(model: &Billnet) -> Result<GatePlan> {
    if model.stage != Stage::FULL {
        return Err(EngineError::NotFullyQuantized(format!(
            "model is at stage {}",
            model.stage
        )));
    }
    if let Some(k) = model.norms.iter().position(|n| matches!(n, NormState::Batch { .. })) {
        return Err(EngineError::NotFullyQuantized(format!(
            "normalization {k} is still a batch norm"
        )));
    }
    if let Some(l) = model.graph.lstm.iter().find(|l| model.params.contains_key(&l.bias)) {
        return Err(EngineError::NotFullyQuantized(format!("{} still has a bias", l.name)));
    }
    let cfg = &model.config;
    let mut b = Builder {
        ops: Vec::new(),
        slots: vec![SlotType::Integer],
    };
    let mut x = 0;
    for layer in &model.graph.layers {
        let name = &layer.name;
        let dims = [layer.input.t, layer.input.h, layer.input.w];
        x = match &layer.kind {
            LayerKind::Stem { conv, .. } => {
                let geom = ConvGeom::new(
                    [1, dims[0], dims[1], dims[2], conv.spec.in_channels],
                    conv.spec.weight_shape(),
                    &conv.spec,
                )?;
                let acc = b.conv(format!("{name}.acc"), x, geom, &effective_conv(model, &conv.weight)?);
                b.threshold(name.clone(), acc)
            }
            LayerKind::Cf { cf, .. } => {
                let acc = b.cf(model, &format!("{name}.cf"), cf, x, dims)?;
                b.threshold(name.clone(), acc)
            }
            LayerKind::Mor { cf1, cf2, .. } => {
                let acc1 = b.cf(model, &format!("{name}.cf1"), cf1, x, dims)?;
                let act1 = b.threshold(format!("{name}.act1"), acc1);
                let i0 = b.slot(SlotType::Bit);
                b.ops.push(GateOp::Or {
                    name: format!("{name}.i0"),
                    a: act1,
                    b: x,
                    out: i0,
                });
                let acc2 = b.cf(model, &format!("{name}.cf2"), cf2, i0, dims)?;
                let i1 = b.threshold(format!("{name}.i1"), acc2);
                let select = b.slot(SlotType::Bit);
                b.ops.push(GateOp::Tgap {
                    name: format!("{name}.select"),
                    input: x,
                    out: select,
                    threshold: tgap_threshold(dims[1], dims[2]),
                });
                let out = b.slot(SlotType::Bit);
                b.ops.push(GateOp::Mux {
                    name: name.clone(),
                    i0,
                    i1,
                    select,
                    out,
                });
                out
            }
            LayerKind::MaxPool { window } => {
                let out = b.slot(SlotType::Bit);
                b.ops.push(GateOp::OrPool {
                    name: name.clone(),
                    input: x,
                    out,
                    window: *window,
                });
                out
            }
        };
    }
    let counts = b.slot(SlotType::Integer);
    b.ops.push(GateOp::BitCount {
        name: "gap.sum".into(),
        input: x,
        out: counts,
    });
    let gap = &model.graph.gap_dims;
    let mut seq = counts;
    for (k, l) in model.graph.lstm.iter().enumerate() {
        let w = effective_lstm(model, l)?;
        let h_mult = if k == 0 { (gap.h * gap.w) as i64 } else { 1 };
        let kernel = QLstmKernel::from_signs(l.n_in, l.hidden, &w.wx, &w.wh, h_mult)?;
        let h_out = b.slot(SlotType::Ternary);
        let c_out = b.slot(SlotType::Ternary);
        b.ops.push(GateOp::QLstm {
            name: l.name.clone(),
            input: seq,
            h_out,
            c_out,
            kernel,
        });
        seq = h_out;
    }
    let (codes, _) = effective_dense(model)?;
    let d = &model.graph.dense;
    let mut plus = Vec::new();
    let mut minus = Vec::new();
    let words = d.n_in.div_ceil(64);
    for k in 0..d.classes {
        let mut p = vec![0u64; words];
        let mut m = vec![0u64; words];
        for j in 0..d.n_in {
            match codes.data()[j * d.classes + k] {
                v if v > 0.0 => p[j / 64] |= 1 << (j % 64),
                v if v < 0.0 => m[j / 64] |= 1 << (j % 64),
                _ => {}
            }
        }
        plus.extend(p);
        minus.extend(m);
    }
    let logits = b.slot(SlotType::Integer);
    b.ops.push(GateOp::TernDense {
        name: "dense.acc".into(),
        input: seq,
        out: logits,
        classes: d.classes,
        plus,
        minus,
    });
    Ok(GatePlan {
        ops: b.ops,
        slot_types: b.slots,
        input_shape: [cfg.frames, cfg.height, cfg.width, 1],
        logits_slot: logits,
        steps: model.graph.steps,
        classes: d.classes,
    })
}

/// Converts real-valued 8-bit codes to the engine's integer input.
pub fn codes_from_tensor(x: &Tensor5) -> Result<IntTensor> {
    if let Some((index, &value)) = x
        .data()
        .iter()
        .enumerate()
        .find(|(_, &v)| !(0.0..=255.0).contains(&v) || v.fract() != 0.0)
    {
        return Err(EngineError::BadInput { index, value });
    }
    Ok(IntTensor::from_tensor(x)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineOutput {
    /// Per-step integer class responses `(N, T', 1, 1, classes)`.
    pub logits: IntTensor,
    /// Temporal sums of the responses per sample.
    pub scores: Vec<Vec<i64>>,
    pub predictions: Vec<usize>,
    pub trace: Vec<(String, SlotValue)>,
}

fn take<'a>(slots: &'a [Option<SlotValue>], slot: usize, expected: SlotType) -> Result<&'a SlotValue> {
    let v = slots[slot].as_ref().ok_or(EngineError::SlotTypeMismatch {
        slot,
        expected,
        found: expected,
    })?;
    if v.slot_type() != expected {
        return Err(EngineError::SlotTypeMismatch {
            slot,
            expected,
            found: v.slot_type(),
        });
    }
    Ok(v)
}

fn bits(slots: &[Option<SlotValue>], slot: usize) -> Result<&BitTensor> {
    match take(slots, slot, SlotType::Bit)? {
        SlotValue::Bit(b) => Ok(b),
        _ => unreachable!(),
    }
}

fn ints(slots: &[Option<SlotValue>], slot: usize) -> Result<&IntTensor> {
    match take(slots, slot, SlotType::Integer)? {
        SlotValue::Int(i) => Ok(i),
        _ => unreachable!(),
    }
}

fn terns(slots: &[Option<SlotValue>], slot: usize) -> Result<&TernTensor> {
    match take(slots, slot, SlotType::Ternary)? {
        SlotValue::Tern(t) => Ok(t),
        _ => unreachable!(),
    }
}

fn int_conv(x: &IntTensor, geom: &ConvGeom, w: &[i8]) -> IntTensor {
    let n = x.shape()[0];
    let s = &geom.spec;
    let (cin, cout, cig, cog) = (s.in_channels, s.out_channels, s.in_per_group(), s.out_per_group());
    let mut out = IntTensor::zeros(geom.out_shape(n));
    let (il, ol) = (geom.in_len(), geom.out_len());
    out.data_mut()
        .par_chunks_mut(ol)
        .zip(x.data().par_chunks(il))
        .for_each(|(o, xs)| {
            geom.for_each_tap(|op, ip, tap| {
                let xin = &xs[ip * cin..(ip + 1) * cin];
                let orow = &mut o[op * cout..(op + 1) * cout];
                for gi in 0..s.groups {
                    for ci in 0..cig {
                        let xv = xin[gi * cig + ci];
                        if xv == 0 {
                            continue;
                        }
                        let base = (tap * cig + ci) * cout + gi * cog;
                        for (a, &b) in orow[gi * cog..(gi + 1) * cog].iter_mut().zip(&w[base..base + cog]) {
                            *a += xv * i32::from(b);
                        }
                    }
                }
            });
        });
    out
}

fn packed_conv(x: &BitTensor, geom: &ConvGeom, plus: &[u64], mask: &[u64]) -> IntTensor {
    let n = x.shape()[0];
    let cout = geom.spec.out_channels;
    let wpp = x.words_per_pixel();
    let in_px = geom.input.iter().product::<usize>();
    let mut out = IntTensor::zeros(geom.out_shape(n));
    let ol = geom.out_len();
    out.data_mut().par_chunks_mut(ol).enumerate().for_each(|(ni, o)| {
        geom.for_each_tap(|op, ip, tap| {
            let a = x.pixel_words(ni * in_px + ip);
            if a.iter().all(|&v| v == 0) {
                return;
            }
            let orow = &mut o[op * cout..(op + 1) * cout];
            for (oc, acc) in orow.iter_mut().enumerate() {
                let wv = &plus[(tap * cout + oc) * wpp..(tap * cout + oc + 1) * wpp];
                let mv = &mask[oc * wpp..(oc + 1) * wpp];
                *acc += 2 * popcount_and_words(a, wv) as i32 - popcount_and_words(a, mv) as i32;
            }
        });
    });
    out
}

/// Per-channel bitcount over each `(n, t)` map, shape `(N, T, 1, 1, C)`.
pub fn channel_counts(x: &BitTensor) -> IntTensor {
    let [n, t, h, w, c] = x.shape();
    let mut out = IntTensor::zeros([n, t, 1, 1, c]);
    let hw = h * w;
    for (frame, counts) in out.data_mut().chunks_exact_mut(c).enumerate() {
        for p in frame * hw..(frame + 1) * hw {
            for (wi, &word) in x.pixel_words(p).iter().enumerate() {
                let mut v = word;
                while v != 0 {
                    counts[wi * 64 + v.trailing_zeros() as usize] += 1;
                    v &= v - 1;
                }
            }
        }
    }
    out
}

/// Max-pooling of binary maps as a bitwise OR over each window.
pub fn or_pool(x: &BitTensor, window: [usize; 3]) -> Result<BitTensor> {
    let [n, t, h, w, c] = x.shape();
    if window.iter().any(|&v| v == 0) || t < window[0] || h < window[1] || w < window[2] {
        return Err(EngineError::Shape(format!("pool window {window:?} on {t}x{h}x{w}")));
    }
    let shape = [n, t / window[0], h / window[1], w / window[2], c];
    let mut out = BitTensor::zeros(shape);
    let wpp = x.words_per_pixel();
    let mut acc = vec![0u64; wpp];
    for ni in 0..n {
        for ti in 0..shape[1] {
            for hi in 0..shape[2] {
                for wi in 0..shape[3] {
                    acc.iter_mut().for_each(|v| *v = 0);
                    for dt in 0..window[0] {
                        for dh in 0..window[1] {
                            for dw in 0..window[2] {
                                let p = x.pixel_index(ni, ti * window[0] + dt, hi * window[1] + dh, wi * window[2] + dw);
                                for (a, &b) in acc.iter_mut().zip(x.pixel_words(p)) {
                                    *a |= b;
                                }
                            }
                        }
                    }
                    let p = out.pixel_index(ni, ti, hi, wi);
                    out.set_pixel_words(p, &acc);
                }
            }
        }
    }
    Ok(out)
}

fn mux_bits(i0: &BitTensor, i1: &BitTensor, s: &BitTensor) -> Result<BitTensor> {
    let [n, t, h, w, c] = i0.shape();
    if i1.shape() != i0.shape() || s.shape() != [n, t, 1, 1, c] {
        return Err(EngineError::Shape(format!(
            "mux operands {:?}, {:?}, select {:?}",
            i0.shape(),
            i1.shape(),
            s.shape()
        )));
    }
    let wpp = i0.words_per_pixel();
    let hw = h * w;
    let mut words = Vec::with_capacity(i0.words().len());
    for p in 0..i0.pixels() {
        let sel = s.pixel_words(p / hw);
        let (a, b) = (i0.pixel_words(p), i1.pixel_words(p));
        for k in 0..wpp {
            words.push((b[k] & sel[k]) | (a[k] & !sel[k]));
        }
    }
    Ok(BitTensor::from_words(i0.shape(), words)?)
}

fn run_lstm(x: &SlotValue, kernel: &QLstmKernel) -> Result<(TernTensor, TernTensor)> {
    let [n, t, _, _, k] = x.shape();
    if k != kernel.n_in {
        return Err(EngineError::Shape(format!("lstm input {k}, kernel expects {}", kernel.n_in)));
    }
    let hd = kernel.hidden;
    let mut hs = TernTensor::zeros([n, t, 1, 1, hd]);
    let mut cs = TernTensor::zeros([n, t, 1, 1, hd]);
    for ni in 0..n {
        let mut state = QLstmState::zeros(hd);
        for ti in 0..t {
            let input = match x {
                SlotValue::Int(v) => LstmInput::Counts(&v.data()[(ni * t + ti) * k..(ni * t + ti + 1) * k]),
                SlotValue::Tern(v) => {
                    let p = v.plus().pixel_index(ni, ti, 0, 0);
                    LstmInput::Tern {
                        plus: v.plus().pixel_words(p),
                        minus: v.minus().pixel_words(p),
                    }
                }
                SlotValue::Bit(_) => {
                    return Err(EngineError::SlotTypeMismatch {
                        slot: 0,
                        expected: SlotType::Integer,
                        found: SlotType::Bit,
                    })
                }
            };
            state = qlstm_step(kernel, input, &state)?;
            for kk in 0..hd {
                hs.set([ni, ti, 0, 0, kk], state.h.get([0, 0, 0, 0, kk]));
                cs.set([ni, ti, 0, 0, kk], state.c.get([0, 0, 0, 0, kk]));
            }
        }
    }
    Ok((hs, cs))
}

fn tern_dense(h: &TernTensor, classes: usize, plus: &[u64], minus: &[u64]) -> IntTensor {
    let [n, t, _, _, _] = h.shape();
    let words = h.plus().words_per_pixel();
    let mut out = IntTensor::zeros([n, t, 1, 1, classes]);
    for p in 0..n * t {
        let (hp, hm) = (h.plus().pixel_words(p), h.minus().pixel_words(p));
        for k in 0..classes {
            let w = k * words..(k + 1) * words;
            out.data_mut()[p * classes + k] = ternary_dot_words(hp, hm, &plus[w.clone()], &minus[w]) as i32;
        }
    }
    out
}

/// Runs a plan on a batch of 8-bit input codes `(N, T, H, W, 1)`.
pub fn execute(plan: &GatePlan, input: &IntTensor, trace: bool) -> Result<EngineOutput> {
    let [n, t, h, w, c] = input.shape();
    if [t, h, w, c] != plan.input_shape {
        return Err(EngineError::Shape(format!(
            "input {:?}, plan expects {:?}",
            input.shape(),
            plan.input_shape
        )));
    }
    if let Some(index) = input.data().iter().position(|v| !(0..=255).contains(v)) {
        return Err(EngineError::BadInput {
            index,
            value: f64::from(input.data()[index]),
        });
    }
    let mut slots: Vec<Option<SlotValue>> = vec![None; plan.slot_types.len()];
    slots[0] = Some(SlotValue::Int(input.clone()));
    let mut log = Vec::new();
    for op in &plan.ops {
        let mut writes: Vec<(usize, SlotValue)> = Vec::with_capacity(2);
        match op {
            GateOp::IntConv {
                input,
                out,
                geom,
                weights,
                ..
            } => writes.push((*out, SlotValue::Int(int_conv(ints(&slots, *input)?, geom, weights)))),
            GateOp::PackedConv {
                input,
                out,
                geom,
                plus,
                group_mask,
                ..
            } => writes.push((
                *out,
                SlotValue::Int(packed_conv(bits(&slots, *input)?, geom, plus, group_mask)),
            )),
            GateOp::Threshold { input, out, .. } => {
                let x = ints(&slots, *input)?;
                let b = BitTensor::from_bools(x.shape(), x.data().iter().map(|&v| v > 0))?;
                writes.push((*out, SlotValue::Bit(b)));
            }
            GateOp::Or { a, b, out, .. } => {
                writes.push((*out, SlotValue::Bit(bits(&slots, *a)?.or(bits(&slots, *b)?)?)))
            }
            GateOp::Tgap {
                input,
                out,
                threshold,
                ..
            } => {
                let counts = channel_counts(bits(&slots, *input)?);
                let s = BitTensor::from_bools(
                    counts.shape(),
                    counts.data().iter().map(|&v| v as u32 > *threshold),
                )?;
                writes.push((*out, SlotValue::Bit(s)));
            }
            GateOp::Mux {
                i0, i1, select, out, ..
            } => writes.push((
                *out,
                SlotValue::Bit(mux_bits(bits(&slots, *i0)?, bits(&slots, *i1)?, bits(&slots, *select)?)?),
            )),
            GateOp::OrPool {
                input, out, window, ..
            } => writes.push((*out, SlotValue::Bit(or_pool(bits(&slots, *input)?, *window)?))),
            GateOp::BitCount { input, out, .. } => {
                writes.push((*out, SlotValue::Int(channel_counts(bits(&slots, *input)?))))
            }
            GateOp::QLstm {
                input,
                h_out,
                c_out,
                kernel,
                ..
            } => {
                let x = slots[*input].as_ref().ok_or(EngineError::SlotTypeMismatch {
                    slot: *input,
                    expected: SlotType::Integer,
                    found: SlotType::Integer,
                })?;
                let (hs, cs) = run_lstm(x, kernel)?;
                writes.push((*c_out, SlotValue::Tern(cs)));
                writes.push((*h_out, SlotValue::Tern(hs)));
            }
            GateOp::TernDense {
                input,
                out,
                classes,
                plus,
                minus,
                ..
            } => writes.push((
                *out,
                SlotValue::Int(tern_dense(terns(&slots, *input)?, *classes, plus, minus)),
            )),
        }
        for (slot, value) in writes {
            if value.slot_type() != plan.slot_types[slot] {
                return Err(EngineError::SlotTypeMismatch {
                    slot,
                    expected: plan.slot_types[slot],
                    found: value.slot_type(),
                });
            }
            if trace {
                let name = match op {
                    GateOp::QLstm { c_out, .. } if *c_out == slot => format!("{}.c", op.name()),
                    GateOp::QLstm { .. } => format!("{}.h", op.name()),
                    _ => op.name().to_string(),
                };
                log.push((name, value.clone()));
            }
            slots[slot] = Some(value);
        }
    }
    let logits = ints(&slots, plan.logits_slot)?.clone();
    let [_, steps, _, _, k] = logits.shape();
    let scores: Vec<Vec<i64>> = (0..n)
        .map(|ni| {
            let mut s = vec![0i64; k];
            for ti in 0..steps {
                for (ki, v) in s.iter_mut().enumerate() {
                    *v += i64::from(logits.get([ni, ti, 0, 0, ki]));
                }
            }
            s
        })
        .collect();
    let predictions = scores.iter().map(|s| argmax(s)).collect();
    Ok(EngineOutput {
        logits,
        scores,
        predictions,
        trace: log,
    })
}

/// Predicted classes for single clips, evaluated concurrently.
pub fn predict(plan: &GatePlan, clips: &[&Tensor5]) -> Result<Vec<usize>> {
    clips
        .par_iter()
        .map(|clip| Ok(execute(plan, &codes_from_tensor(clip)?, false)?.predictions[0]))
        .collect()
}

/// First point at which the two paths disagree.
#[derive(Debug, Clone, PartialEq)]
pub enum Divergence {
    Missing { layer: String },
    Shape {
        layer: String,
        reference: [usize; 5],
        logic: [usize; 5],
    },
    Value {
        layer: String,
        sample: usize,
        time_step: usize,
        /// Flat `(h, w, c)` index within the time step.
        index: usize,
        reference: f64,
        logic: f64,
    },
    Prediction {
        sample: usize,
        reference: usize,
        logic: usize,
    },
}

impl fmt::Display for Divergence {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Divergence::Missing { layer } => write!(f, "layer {layer}: missing from logic trace"),
            Divergence::Shape {
                layer,
                reference,
                logic,
            } => write!(f, "layer {layer}: shape {reference:?} vs {logic:?}"),
            Divergence::Value {
                layer,
                sample,
                time_step,
                index,
                reference,
                logic,
            } => write!(
                f,
                "layer {layer}, sample {sample}, time step {time_step}, bit {index}: reference {reference}, logic {logic}"
            ),
            Divergence::Prediction {
                sample,
                reference,
                logic,
            } => write!(f, "sample {sample}: reference class {reference}, logic class {logic}"),
        }
    }
}

/// Compares every reference intermediate to its logic-path counterpart.
/// Returns the number of compared elements.
pub fn compare_traces(reference: &[TraceEntry], logic: &[(String, SlotValue)]) -> std::result::Result<usize, Divergence> {
    let mut compared = 0;
    for e in reference {
        let Some((_, v)) = logic.iter().find(|(n, _)| *n == e.name) else {
            return Err(Divergence::Missing { layer: e.name.clone() });
        };
        let lt = v.to_tensor();
        if lt.shape() != e.value.shape() {
            return Err(Divergence::Shape {
                layer: e.name.clone(),
                reference: e.value.shape(),
                logic: lt.shape(),
            });
        }
        let [_, t, h, w, c] = lt.shape();
        let per_step = h * w * c;
        for (i, (&a, &b)) in e.value.data().iter().zip(lt.data()).enumerate() {
            if a != b {
                return Err(Divergence::Value {
                    layer: e.name.clone(),
                    sample: i / (t * per_step),
                    time_step: (i / per_step) % t,
                    index: i % per_step,
                    reference: a,
                    logic: b,
                });
            }
        }
        compared += lt.len();
    }
    Ok(compared)
}

/// Runs both paths on a batch and checks exact agreement of every
/// intermediate and of the predictions.
pub fn verify_batch(model: &Billnet, plan: &GatePlan, input: &Tensor5) -> std::result::Result<usize, VerifyError> {
    let r = crate::refnet::forward(model, input, true).map_err(VerifyError::Net)?;
    let codes = codes_from_tensor(input).map_err(VerifyError::Engine)?;
    let l = execute(plan, &codes, true).map_err(VerifyError::Engine)?;
    let compared = compare_traces(&r.trace, &l.trace).map_err(VerifyError::Diverged)?;
    for (sample, (&a, &b)) in r.predictions.iter().zip(&l.predictions).enumerate() {
        if a != b {
            return Err(VerifyError::Diverged(Divergence::Prediction {
                sample,
                reference: a,
                logic: b,
            }));
        }
    }
    Ok(compared)
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum VerifyError {
    #[error(transparent)]
    Net(NetError),
    #[error(transparent)]
    Engine(EngineError),
    #[error("paths diverge at {0}")]
    Diverged(Divergence),
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BillnetConfig;
    use crate::refnet::{lstm_cell, LstmMode, LstmWeights};
    use crate::quant::ssign_scale;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_codes(rng: &mut ChaCha8Rng, cfg: &BillnetConfig, n: usize) -> Tensor5 {
        Tensor5::from_fn([n, cfg.frames, cfg.height, cfg.width, 1], |_| f64::from(rng.gen_range(0u8..=255)))
    }

    #[test]
    fn stage_three_model_is_rejected() {
        let mut m = Billnet::build(&BillnetConfig::toy()).unwrap();
        m.stage = Stage::CONV_ACTS;
        assert!(matches!(compile(&m), Err(EngineError::NotFullyQuantized(_))));
        // stage tag alone is not enough while batch norms remain
        m.stage = Stage::FULL;
        assert!(matches!(compile(&m), Err(EngineError::NotFullyQuantized(_))));
    }

    #[test]
    fn paper_plan_has_no_norms_and_integer_tgap() {
        let m = Billnet::random_quantized(&BillnetConfig::paper(), 1).unwrap();
        let plan = compile(&m).unwrap();
        let last = plan
            .ops
            .iter()
            .rev()
            .find_map(|o| match o {
                GateOp::Tgap { threshold, .. } => Some(*threshold),
                _ => None,
            })
            .unwrap();
        assert_eq!(last, 24);
        assert_eq!(plan.heatmap_shape(), (8, 27));
        let kinds = ["int-conv", "packed-conv", "threshold", "or", "tgap", "mux", "or-pool", "bitcount", "qlstm-step", "tern-dense"];
        assert_eq!(kinds.iter().map(|k| plan.count(k)).sum::<usize>(), plan.ops.len());
        assert_eq!(plan.count("mux"), 3);
    }

    #[test]
    fn zero_input_matches_reference() {
        let cfg = BillnetConfig::toy();
        let m = Billnet::random_quantized(&cfg, 3).unwrap();
        let plan = compile(&m).unwrap();
        let x = Tensor5::zeros([1, cfg.frames, cfg.height, cfg.width, 1]);
        verify_batch(&m, &plan, &x).unwrap();
    }

    #[test]
    fn random_models_agree_exactly() {
        let cfg = BillnetConfig::toy();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for seed in 0..3 {
            let m = Billnet::random_quantized(&cfg, seed).unwrap();
            let plan = compile(&m).unwrap();
            let x = random_codes(&mut rng, &cfg, 3);
            let compared = verify_batch(&m, &plan, &x).unwrap();
            assert!(compared > 0);
        }
    }

    #[test]
    fn divergence_is_located() {
        let cfg = BillnetConfig::toy();
        let m = Billnet::random_quantized(&cfg, 4).unwrap();
        let plan = compile(&m).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_codes(&mut rng, &cfg, 1);
        let r = crate::refnet::forward(&m, &x, true).unwrap();
        let mut l = execute(&plan, &codes_from_tensor(&x).unwrap(), true).unwrap();
        // flip one bit of the stem output
        let (name, v) = l.trace.iter_mut().find(|(n, _)| n == "L0").unwrap();
        assert_eq!(name, "L0");
        let SlotValue::Bit(b) = v else { panic!() };
        let [_, _, h, w, c] = b.shape();
        let old = b.get([0, 1, 2, 3, 4]);
        b.set([0, 1, 2, 3, 4], !old);
        match compare_traces(&r.trace, &l.trace) {
            Err(Divergence::Value { layer, time_step, index, .. }) => {
                assert_eq!(layer, "L0");
                assert_eq!(time_step, 1);
                assert_eq!(index, (2 * w + 3) * c + 4);
                assert!(index < h * w * c);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bit_maxpool_equals_reference_max() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let x = Tensor5::from_fn([2, 3, 4, 6, 70], |_| f64::from(rng.gen_bool(0.2) as u8));
            let got = or_pool(&BitTensor::pack(&x).unwrap(), [1, 2, 2]).unwrap().unpack();
            assert_eq!(got, crate::refnet::maxpool3d(&x, [1, 2, 2]).unwrap());
        }
    }

    fn random_kernel(rng: &mut ChaCha8Rng, n_in: usize, hd: usize, h_mult: i64) -> (QLstmKernel, LstmWeights) {
        let mut signs = |len: usize| -> Vec<f64> { (0..len).map(|_| if rng.gen() { 1.0 } else { -1.0 }).collect() };
        let w = LstmWeights {
            n_in,
            hidden: hd,
            wx: signs(n_in * 4 * hd),
            wh: signs(hd * 4 * hd),
            bias: None,
            scale: ssign_scale(n_in, hd),
        };
        (QLstmKernel::from_signs(n_in, hd, &w.wx, &w.wh, h_mult).unwrap(), w)
    }

    #[test]
    fn qlstm_step_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let (k, _) = random_kernel(&mut rng, 3, 4, 1);
        let s = qlstm_step(&k, LstmInput::Counts(&[0, 0, 0]), &QLstmState::zeros(4)).unwrap();
        assert_eq!(s.h.to_i8(), vec![0; 4]);
        assert_eq!(s.c.to_i8(), vec![0; 4]);
        // saturation: every gate open, candidate +1, c_prev +1
        let ones = QLstmKernel::from_signs(1, 1, &[1.0; 4], &[1.0; 4], 1).unwrap();
        let mut st = QLstmState::zeros(1);
        st.c.set([0; 5], 1);
        st.h.set([0; 5], 1);
        let s = qlstm_step(&ones, LstmInput::Counts(&[1]), &st).unwrap();
        assert_eq!((s.c.get([0; 5]), s.h.get([0; 5])), (1, 1));
    }

    #[test]
    fn qlstm_step_equals_scaled_reference_cell() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut steps = 0;
        while steps < 10_000 {
            let (n_in, hd) = (rng.gen_range(1..40), rng.gen_range(1..12));
            let hw = [1usize, 12, 48][rng.gen_range(0..3)];
            let (kernel, w) = random_kernel(&mut rng, n_in, hd, hw as i64);
            let mut st = QLstmState::zeros(hd);
            let (mut h, mut c) = (vec![0.0; hd], vec![0.0; hd]);
            for _ in 0..20 {
                let counts: Vec<i32> = (0..n_in).map(|_| rng.gen_range(0..=hw as i32)).collect();
                let xf: Vec<f64> = counts.iter().map(|&v| f64::from(v)).collect();
                let (h2, c2) = lstm_cell(&xf, hw as f64, &h, &c, &w, LstmMode::Quantized).unwrap();
                st = qlstm_step(&kernel, LstmInput::Counts(&counts), &st).unwrap();
                assert!(st.c.planes_disjoint() && st.h.planes_disjoint());
                assert_eq!(st.h.to_tensor().data(), &h2[..]);
                assert_eq!(st.c.to_tensor().data(), &c2[..]);
                h = h2;
                c = c2;
                steps += 1;
            }
        }
    }

    #[test]
    fn slot_type_mismatch_detected() {
        let cfg = BillnetConfig::toy();
        let m = Billnet::random_quantized(&cfg, 8).unwrap();
        let mut plan = compile(&m).unwrap();
        // rewire the first threshold to read the raw input codes as if they were bits
        if let Some(GateOp::Or { b, .. }) = plan.ops.iter_mut().find(|o| o.kind() == "or") {
            *b = 0;
        }
        let x = codes_from_tensor(&Tensor5::zeros([1, cfg.frames, cfg.height, cfg.width, 1])).unwrap();
        assert!(matches!(
            execute(&plan, &x, false),
            Err(EngineError::SlotTypeMismatch { slot: 0, expected: SlotType::Bit, found: SlotType::Integer })
        ));
    }
}
