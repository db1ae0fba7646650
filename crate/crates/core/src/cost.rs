//! Bit-operation (BOP) and weight-memory accounting.
//!
//! Matmul-like layers (convolutions, LSTM matrices, dense head) are costed as
//! `MACs * b_w * b_a` (the simple metric) and `MACs * (b_w * b_a + log2 L)`
//! for accumulation length `L` (the accumulator-aware metric). Values that are
//! not quantized count 32 bits. Elementwise work is reported separately as
//! gate BOPs with these constants, `b` being the operand width:
//!
//! * add, compare, OR, MUX select, pooling element, shift: `b` per element
//! * multiply (batch-norm scale, float MUX, LSTM products): `b * b`
//! * TGAP: one `b`-bit accumulate per input element, one `log2(h w)`-bit
//!   compare per output
//!
//! The report is a pure function of the graph and the stage.

use std::fmt::Write as _;

use serde::Serialize;

use crate::model::{weight_bits, Billnet, Cf, Conv, Dims, KernelKind, LayerKind, ModelGraph, Stage};

const FLOAT_BITS: u32 = 32;
/// Width of the 8-bit input codes consumed by the stem.
const INPUT_BITS: u32 = 8;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerCost {
    pub name: String,
    pub macs: u64,
    pub b_w: u32,
    pub b_a: u32,
    /// Accumulation length of one output.
    pub acc_len: u64,
    pub bops_simple: u64,
    pub bops_acc: f64,
    pub weight_bits: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateCost {
    pub name: String,
    pub op: &'static str,
    pub bops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostReport {
    pub stage: u8,
    pub layers: Vec<LayerCost>,
    pub gates: Vec<GateCost>,
}

impl CostReport {
    pub fn matmul_simple(&self) -> u64 {
        self.layers.iter().map(|l| l.bops_simple).sum()
    }

    pub fn matmul_acc(&self) -> f64 {
        self.layers.iter().map(|l| l.bops_acc).sum()
    }

    pub fn gate_bops(&self) -> u64 {
        self.gates.iter().map(|g| g.bops).sum()
    }

    /// Simple matmul BOPs plus gate BOPs.
    pub fn total_simple(&self) -> u64 {
        self.matmul_simple() + self.gate_bops()
    }

    pub fn total_acc(&self) -> f64 {
        self.matmul_acc() + self.gate_bops() as f64
    }

    pub fn weight_bits(&self) -> u64 {
        self.layers.iter().map(|l| l.weight_bits).sum()
    }

    /// One row per matmul layer, then one per gate group, then totals.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("section,name,op,macs,b_w,b_a,acc_len,bops_simple,bops_acc,weight_bits\n");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "matmul,{},mac,{},{},{},{},{},{:.1},{}",
                l.name, l.macs, l.b_w, l.b_a, l.acc_len, l.bops_simple, l.bops_acc, l.weight_bits
            );
        }
        for g in &self.gates {
            let _ = writeln!(s, "gate,{},{},,,,,{},{},", g.name, g.op, g.bops, g.bops);
        }
        let _ = writeln!(
            s,
            "total,stage{},,,,,,{},{:.1},{}",
            self.stage,
            self.total_simple(),
            self.total_acc(),
            self.weight_bits()
        );
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("cost report, stage {}\n", self.stage);
        let _ = writeln!(s, "{:<16} {:>14} {:>4} {:>4} {:>16} {:>12}", "layer", "MACs", "b_w", "b_a", "BOPs", "weight bits");
        for l in &self.layers {
            let _ = writeln!(
                s,
                "{:<16} {:>14} {:>4} {:>4} {:>16} {:>12}",
                l.name, l.macs, l.b_w, l.b_a, l.bops_simple, l.weight_bits
            );
        }
        let g = |v: f64| v / 1e9;
        let _ = writeln!(s, "matmul GBOP (simple)      {:>10.3}", g(self.matmul_simple() as f64));
        let _ = writeln!(s, "matmul GBOP (accumulator) {:>10.3}", g(self.matmul_acc()));
        let _ = writeln!(s, "gate GBOP                 {:>10.3}", g(self.gate_bops() as f64));
        let _ = writeln!(s, "total GBOP (simple)       {:>10.3}", g(self.total_simple() as f64));
        let _ = writeln!(s, "weight memory (Mb)        {:>10.3}", self.weight_bits() as f64 / 1e6);
        s
    }
}

fn bits_for_count(max: usize) -> u32 {
    (usize::BITS - max.leading_zeros()).max(1)
}

struct Acc {
    stage: Stage,
    layers: Vec<LayerCost>,
    gates: Vec<GateCost>,
}

impl Acc {
    fn matmul(&mut self, name: &str, kind: KernelKind, macs: u64, acc_len: u64, b_a: u32, weights: u64) {
        let b_w = weight_bits(kind, self.stage);
        let p = u64::from(b_w) * u64::from(b_a);
        self.layers.push(LayerCost {
            name: name.to_string(),
            macs,
            b_w,
            b_a,
            acc_len,
            bops_simple: macs * p,
            bops_acc: macs as f64 * (p as f64 + (acc_len as f64).log2()),
            weight_bits: weights * u64::from(b_w),
        });
    }

    fn gate(&mut self, name: &str, op: &'static str, bops: u64) {
        self.gates.push(GateCost {
            name: name.to_string(),
            op,
            bops,
        });
    }

    /// Width of trunk activations.
    fn act_bits(&self) -> u32 {
        if self.stage.conv_acts_binary() {
            1
        } else {
            FLOAT_BITS
        }
    }

    fn conv(&mut self, name: &str, conv: &Conv, input: Dims, b_a: u32) -> Dims {
        let s = &conv.spec;
        let [t, h, w] = s.output_dims([input.t, input.h, input.w]);
        let out = Dims { t, h, w, c: s.out_channels };
        let fan_in = s.fan_in() as u64;
        let weights = (fan_in * s.out_channels as u64) as u64;
        self.matmul(name, KernelKind::Conv, out.elements() as u64 * fan_in, fan_in, b_a, weights);
        out
    }

    /// The inner convolutions of a CF block see unquantized integers.
    fn cf(&mut self, name: &str, cf: &Cf, input: Dims) -> Dims {
        let a = self.conv(&format!("{name}.pw1"), &cf.pw1, input, self.act_bits());
        let b = self.conv(&format!("{name}.gconv"), &cf.gconv, a, FLOAT_BITS);
        self.conv(&format!("{name}.pw2"), &cf.pw2, b, FLOAT_BITS)
    }

    fn norm_act(&mut self, name: &str, d: Dims) {
        let e = d.elements() as u64;
        let fb = u64::from(FLOAT_BITS);
        if self.stage.shift_norm() {
            self.gate(name, "shift", e * fb);
        } else {
            // scale multiply and offset add
            self.gate(name, "batch_norm", e * (fb * fb + fb));
        }
        // the activation compares a full-width pre-activation
        self.gate(name, "activation", e * fb);
    }
}

/// Cost of `graph` evaluated at `stage`.
pub fn cost_of(graph: &ModelGraph, stage: Stage) -> CostReport {
    let mut a = Acc {
        stage,
        layers: Vec::new(),
        gates: Vec::new(),
    };
    for layer in &graph.layers {
        let name = &layer.name;
        let ab = u64::from(a.act_bits());
        match &layer.kind {
            LayerKind::Stem { conv, norm: _ } => {
                let b_in = if stage.conv_acts_binary() { INPUT_BITS } else { FLOAT_BITS };
                let out = a.conv(&format!("{name}.conv"), conv, layer.input, b_in);
                a.norm_act(name, out);
            }
            LayerKind::Cf { cf, norm: _ } => {
                let out = a.cf(&format!("{name}.cf"), cf, layer.input);
                a.norm_act(name, out);
            }
            LayerKind::Mor { cf1, cf2, .. } => {
                let d = layer.input;
                let o1 = a.cf(&format!("{name}.cf1"), cf1, d);
                a.norm_act(&format!("{name}.1"), o1);
                let e = d.elements() as u64;
                let frames = (d.t * d.c) as u64;
                a.gate(name, "or", e * ab);
                let o2 = a.cf(&format!("{name}.cf2"), cf2, d);
                a.norm_act(&format!("{name}.2"), o2);
                a.gate(name, "tgap", e * ab + frames * u64::from(bits_for_count(d.h * d.w)));
                if stage.conv_acts_binary() {
                    a.gate(name, "mux", e);
                } else {
                    // I1 * S + I0 * (1 - S)
                    a.gate(name, "mux", e * (2 * ab * ab + 2 * ab));
                }
            }
            LayerKind::MaxPool { window } => {
                let window: usize = window.iter().product();
                a.gate(name, "maxpool", (layer.output.elements() * window) as u64 * ab);
            }
        }
    }
    let g = graph.gap_dims;
    a.gate("gap", "sum", g.elements() as u64 * u64::from(a.act_bits()));

    let steps = graph.steps as u64;
    let lstm_q = stage.lstm_acts_quantized();
    // ternary hidden states take 2 bits; GAP counts take bits_for_count(hw)
    let mut in_bits = if lstm_q && stage.conv_acts_binary() {
        bits_for_count(g.h * g.w)
    } else {
        FLOAT_BITS
    };
    let h_bits = if lstm_q { 2 } else { FLOAT_BITS };
    for l in &graph.lstm {
        let cols = 4 * l.hidden as u64;
        let (n_in, hd) = (l.n_in as u64, l.hidden as u64);
        a.matmul(&format!("{}.wx", l.name), KernelKind::Lstm, steps * n_in * cols, n_in, in_bits, n_in * cols);
        a.matmul(&format!("{}.wh", l.name), KernelKind::Lstm, steps * hd * cols, hd, h_bits, hd * cols);
        let per_step = if lstm_q {
            // 4 threshold units, f*c and i*g on ternary operands, clip, o*c
            4 * u64::from(FLOAT_BITS) + 3 * 2 * 2 + 2 * 2
        } else {
            let fb = u64::from(FLOAT_BITS);
            // 5 nonlinearities, 3 products, 1 add
            5 * fb + 3 * fb * fb + fb
        };
        a.gate(&l.name, "cell", steps * hd * per_step);
        in_bits = h_bits;
    }
    let d = &graph.dense;
    a.matmul(
        "dense",
        KernelKind::Dense,
        steps * (d.n_in * d.classes) as u64,
        d.n_in as u64,
        h_bits,
        (d.n_in * d.classes) as u64,
    );
    CostReport {
        stage: stage.get(),
        layers: a.layers,
        gates: a.gates,
    }
}

/// Cost of a model at its current stage.
pub fn cost(model: &Billnet) -> CostReport {
    cost_of(&model.graph, model.stage)
}

/// Published GBOP figures of the reference 2x network, stages 2 to 5.
pub const REFERENCE_GBOP: [(u8, f64); 4] = [(2, 24.54), (3, 8.53), (4, 6.39), (5, 6.34)];
