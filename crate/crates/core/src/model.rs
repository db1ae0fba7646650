//! Declarative BILLNET builder: configuration, layer graph, parameter store,
//! training-stage bookkeeping and parameter accounting.
//!
//! The default layout is a reconstruction of the published top-level figure:
//!
//! ```text
//! stem Conv3D 3x3x3 /2 -> MP -> MOR(n) -> CF(2n) -> MP -> MOR(2n)
//!     -> CF(4n) -> MP -> MOR(4n) -> GAP -> QLSTM(4m) -> QLSTM(4m) -> Dense(4m -> classes)
//! ```
//!
//! Every piece of it (block order, pooling windows, LSTM stack) is configurable.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::quant::{bsn_fold, BNParams, QuantError, ShiftNorm, TgapCalibration};
use crate::refnet::ConvSpec;
use crate::tensor::Tensor5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("bad config: {0}")]
    BadConfig(String),
    #[error("missing parameter {0}")]
    MissingParam(String),
}

/// One entry of the convolutional trunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayoutEntry {
    /// Full 3x3x3 convolution on the 8-bit input frames, `mult * n` outputs.
    Stem { mult: usize, stride: [usize; 3] },
    /// Stand-alone factorized convolution followed by normalization and activation.
    Cf { mult: usize },
    /// MUX-OR residual block; keeps the channel count.
    Mor,
    MaxPool { window: [usize; 3] },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BillnetConfig {
    pub n: usize,
    pub g: usize,
    pub m: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub layout: Vec<LayoutEntry>,
    pub lstm_hidden: Vec<usize>,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default)]
    pub tgap: TgapCalibration,
    #[serde(default)]
    pub seed: u64,
}

fn default_bn_eps() -> f64 {
    1e-3
}

fn default_bn_momentum() -> f64 {
    0.9
}

impl BillnetConfig {
    /// BILLNET 2x as evaluated in the results table: n = 64, g = 4, m = 32,
    /// 16 frames of 96x128, 27 classes.
    pub fn paper() -> Self {
        let pool = LayoutEntry::MaxPool { window: [1, 2, 2] };
        Self {
            n: 64,
            g: 4,
            m: 32,
            frames: 16,
            height: 96,
            width: 128,
            classes: 27,
            layout: vec![
                LayoutEntry::Stem {
                    mult: 1,
                    stride: [2, 2, 2],
                },
                pool,
                LayoutEntry::Mor,
                LayoutEntry::Cf { mult: 2 },
                pool,
                LayoutEntry::Mor,
                LayoutEntry::Cf { mult: 4 },
                pool,
                LayoutEntry::Mor,
            ],
            lstm_hidden: vec![128, 128],
            bn_eps: default_bn_eps(),
            bn_momentum: default_bn_momentum(),
            tgap: TgapCalibration::PerSample,
            seed: 0,
        }
    }

    /// Desk-scale configuration: n = 16, 8 frames of 24x32, 4 classes.
    pub fn toy() -> Self {
        let pool = LayoutEntry::MaxPool { window: [1, 2, 2] };
        Self {
            n: 16,
            g: 4,
            m: 8,
            frames: 8,
            height: 24,
            width: 32,
            classes: 4,
            layout: vec![
                LayoutEntry::Stem {
                    mult: 1,
                    stride: [2, 2, 2],
                },
                LayoutEntry::Mor,
                LayoutEntry::Cf { mult: 2 },
                pool,
                LayoutEntry::Mor,
                LayoutEntry::Cf { mult: 4 },
                pool,
                LayoutEntry::Mor,
            ],
            lstm_hidden: vec![32, 32],
            bn_eps: default_bn_eps(),
            bn_momentum: default_bn_momentum(),
            tgap: TgapCalibration::PerSample,
            seed: 0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "paper" => Some(Self::paper()),
            "toy" => Some(Self::toy()),
            _ => None,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, ModelError> {
        serde_json::from_str(text).map_err(|e| ModelError::BadConfig(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        self.graph().map(|_| ())
    }

    pub fn graph(&self) -> Result<ModelGraph, ModelError> {
        ModelGraph::from_config(self)
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// Training stage, 1..=5. Each stage's quantization set contains the previous one's.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Stage(u8);

impl Stage {
    pub const FLOAT: Stage = Stage(1);
    pub const WEIGHTS: Stage = Stage(2);
    pub const CONV_ACTS: Stage = Stage(3);
    pub const SHIFT_NORM: Stage = Stage(4);
    pub const FULL: Stage = Stage(5);

    pub fn new(k: u8) -> Option<Self> {
        (1..=5).contains(&k).then_some(Self(k))
    }

    pub fn get(self) -> u8 {
        self.0
    }

    pub fn all() -> [Stage; 5] {
        [Stage(1), Stage(2), Stage(3), Stage(4), Stage(5)]
    }

    pub fn weights_quantized(self) -> bool {
        self.0 >= 2
    }

    pub fn conv_acts_binary(self) -> bool {
        self.0 >= 3
    }

    pub fn shift_norm(self) -> bool {
        self.0 >= 4
    }

    pub fn lstm_acts_quantized(self) -> bool {
        self.0 >= 5
    }
}

impl std::fmt::Display for Stage {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "S{}", self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cf {
    pub pw1: Conv,
    pub gconv: Conv,
    pub pw2: Conv,
}

impl Cf {
    pub fn convs(&self) -> [&Conv; 3] {
        [&self.pw1, &self.gconv, &self.pw2]
    }
}

/// Spatio-temporal extent of a trunk tensor (per sample).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dims {
    pub t: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
}

impl Dims {
    pub fn voxels(&self) -> usize {
        self.t * self.h * self.w
    }

    pub fn elements(&self) -> usize {
        self.voxels() * self.c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Stem { conv: Conv, norm: usize },
    Cf { cf: Cf, norm: usize },
    Mor { cf1: Cf, norm1: usize, cf2: Cf, norm2: usize },
    MaxPool { window: [usize; 3] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
    pub input: Dims,
    pub output: Dims,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LstmLayer {
    pub name: String,
    pub n_in: usize,
    pub hidden: usize,
    pub wx: String,
    pub wh: String,
    pub bias: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DenseLayer {
    pub n_in: usize,
    pub classes: usize,
    pub weight: String,
}

/// The resolved layer graph of a configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub layers: Vec<Layer>,
    /// Spatial extent pooled by the GAP in front of the first LSTM.
    pub gap_dims: Dims,
    pub lstm: Vec<LstmLayer>,
    pub dense: DenseLayer,
    pub norm_channels: Vec<usize>,
    /// Number of LSTM time steps.
    pub steps: usize,
}

fn conv_out(input: usize, stride: usize) -> usize {
    input.div_ceil(stride)
}

impl ModelGraph {
    pub fn from_config(cfg: &BillnetConfig) -> Result<Self, ModelError> {
        let bad = |s: String| Err(ModelError::BadConfig(s));
        if cfg.n == 0 || cfg.g == 0 || cfg.m == 0 || cfg.classes == 0 {
            return bad("n, g, m and classes must be positive".into());
        }
        if cfg.n % (2 * cfg.g) != 0 {
            return bad(format!("n = {} must be divisible by 2g = {}", cfg.n, 2 * cfg.g));
        }
        if cfg.frames == 0 || cfg.height == 0 || cfg.width == 0 {
            return bad("input dimensions must be positive".into());
        }
        if !(cfg.bn_eps > 0.0) {
            return bad("bn_eps must be > 0".into());
        }
        let mut layers = Vec::new();
        let mut norm_channels = Vec::new();
        let mut dims = Dims {
            t: cfg.frames,
            h: cfg.height,
            w: cfg.width,
            c: 1,
        };
        let mut new_norm = |c: usize| {
            norm_channels.push(c);
            norm_channels.len() - 1
        };
        let make_cf = |prefix: &str, c_in: usize, c_out: usize| -> Result<Cf, ModelError> {
            let low = c_in / 2;
            if c_in % 2 != 0 || low % cfg.g != 0 || low == 0 {
                return Err(ModelError::BadConfig(format!(
                    "{prefix}: low dimension {c_in}/2 must be a positive multiple of g = {}",
                    cfg.g
                )));
            }
            let conv = |name: &str, kernel, groups, cin, cout| Conv {
                spec: ConvSpec {
                    kernel,
                    stride: [1, 1, 1],
                    groups,
                    in_channels: cin,
                    out_channels: cout,
                },
                weight: format!("{prefix}.{name}.w"),
            };
            Ok(Cf {
                pw1: conv("pw1", [1, 1, 1], 1, c_in, low),
                gconv: conv("gconv", [3, 3, 3], cfg.g, low, low),
                pw2: conv("pw2", [1, 1, 1], 1, low, c_out),
            })
        };
        let check_mult = |mult: usize| -> Result<usize, ModelError> {
            if ![1, 2, 4].contains(&mult) {
                return Err(ModelError::BadConfig(format!(
                    "channel multiplier {mult} not in {{1, 2, 4}}"
                )));
            }
            Ok(mult * cfg.n)
        };
        for (i, entry) in cfg.layout.iter().enumerate() {
            let name = format!("L{i}");
            let input = dims;
            let kind = match *entry {
                LayoutEntry::Stem { mult, stride } => {
                    if i != 0 {
                        return bad("the stem must be the first layout entry".into());
                    }
                    if stride.iter().any(|&s| s == 0) {
                        return bad("stem stride must be positive".into());
                    }
                    let c = check_mult(mult)?;
                    dims = Dims {
                        t: conv_out(dims.t, stride[0]),
                        h: conv_out(dims.h, stride[1]),
                        w: conv_out(dims.w, stride[2]),
                        c,
                    };
                    LayerKind::Stem {
                        conv: Conv {
                            spec: ConvSpec {
                                kernel: [3, 3, 3],
                                stride,
                                groups: 1,
                                in_channels: 1,
                                out_channels: c,
                            },
                            weight: format!("{name}.conv.w"),
                        },
                        norm: new_norm(c),
                    }
                }
                _ if i == 0 => return bad("layout must start with a stem".into()),
                LayoutEntry::Cf { mult } => {
                    let c = check_mult(mult)?;
                    let cf = make_cf(&format!("{name}.cf"), dims.c, c)?;
                    dims.c = c;
                    LayerKind::Cf {
                        cf,
                        norm: new_norm(c),
                    }
                }
                LayoutEntry::Mor => {
                    let c = dims.c;
                    LayerKind::Mor {
                        cf1: make_cf(&format!("{name}.cf1"), c, c)?,
                        norm1: new_norm(c),
                        cf2: make_cf(&format!("{name}.cf2"), c, c)?,
                        norm2: new_norm(c),
                    }
                }
                LayoutEntry::MaxPool { window } => {
                    if window.iter().any(|&w| w == 0) {
                        return bad("pooling window must be positive".into());
                    }
                    if dims.t < window[0] || dims.h < window[1] || dims.w < window[2] {
                        return bad(format!(
                            "{name}: pooling window {window:?} larger than {}x{}x{}",
                            dims.t, dims.h, dims.w
                        ));
                    }
                    dims = Dims {
                        t: dims.t / window[0],
                        h: dims.h / window[1],
                        w: dims.w / window[2],
                        c: dims.c,
                    };
                    LayerKind::MaxPool { window }
                }
            };
            layers.push(Layer {
                name,
                kind,
                input,
                output: dims,
            });
        }
        if layers.is_empty() {
            return bad("layout is empty".into());
        }
        if cfg.lstm_hidden.is_empty() {
            return bad("at least one LSTM layer is required".into());
        }
        if *cfg.lstm_hidden.last().unwrap() != 4 * cfg.m {
            return bad(format!(
                "last LSTM width {} must equal the dense input 4m = {}",
                cfg.lstm_hidden.last().unwrap(),
                4 * cfg.m
            ));
        }
        let mut lstm = Vec::new();
        let mut n_in = dims.c;
        for (k, &hidden) in cfg.lstm_hidden.iter().enumerate() {
            if hidden == 0 {
                return bad("LSTM width must be positive".into());
            }
            let name = format!("lstm{k}");
            lstm.push(LstmLayer {
                wx: format!("{name}.wx"),
                wh: format!("{name}.wh"),
                bias: format!("{name}.b"),
                name,
                n_in,
                hidden,
            });
            n_in = hidden;
        }
        Ok(Self {
            layers,
            gap_dims: dims,
            lstm,
            dense: DenseLayer {
                n_in: 4 * cfg.m,
                classes: cfg.classes,
                weight: "dense.w".into(),
            },
            norm_channels,
            steps: dims.t,
        })
    }

    pub fn convs(&self) -> Vec<&Conv> {
        let mut out = Vec::new();
        for l in &self.layers {
            match &l.kind {
                LayerKind::Stem { conv, .. } => out.push(conv),
                LayerKind::Cf { cf, .. } => out.extend(cf.convs()),
                LayerKind::Mor { cf1, cf2, .. } => {
                    out.extend(cf1.convs());
                    out.extend(cf2.convs());
                }
                LayerKind::MaxPool { .. } => {}
            }
        }
        out
    }

    pub fn norm_gamma(norm: usize) -> String {
        format!("norm{norm}.gamma")
    }

    pub fn norm_beta(norm: usize) -> String {
        format!("norm{norm}.beta")
    }
}

/// Per-normalization-layer state outside the trainable parameters.
#[derive(Debug, Clone, PartialEq)]
pub enum NormState {
    /// Batch norm: `gamma`/`beta` live in the parameter store, moving statistics here.
    Batch { mean: Vec<f64>, var: Vec<f64> },
    Shift(ShiftNorm),
}

/// A BILLNET instance: configuration, resolved graph, and all state.
#[derive(Debug, Clone, PartialEq)]
pub struct Billnet {
    pub config: BillnetConfig,
    pub graph: ModelGraph,
    /// Quantization state applied by the forward passes.
    pub stage: Stage,
    /// Last training stage that ran to completion (0 = none).
    pub completed: u8,
    pub params: BTreeMap<String, Tensor5>,
    pub norms: Vec<NormState>,
    /// Seed for the next training stage's shuffling.
    pub rng_state: u64,
}

fn uniform(rng: &mut ChaCha8Rng, shape: [usize; 5], bound: f64) -> Tensor5 {
    Tensor5::from_fn(shape, |_| rng.gen_range(-bound..bound))
}

impl Billnet {
    /// Builds a freshly initialized stage-1 model. Deterministic in `(cfg, cfg.seed)`.
    pub fn build(cfg: &BillnetConfig) -> Result<Self, ModelError> {
        let graph = cfg.graph()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut params = BTreeMap::new();
        for conv in graph.convs() {
            let s = &conv.spec;
            let fan_in = s.kernel.iter().product::<usize>() * s.in_channels / s.groups;
            let shape = [
                s.kernel[0],
                s.kernel[1],
                s.kernel[2],
                s.in_channels / s.groups,
                s.out_channels,
            ];
            params.insert(
                conv.weight.clone(),
                uniform(&mut rng, shape, (3.0 / fan_in as f64).sqrt()),
            );
        }
        for (k, &c) in graph.norm_channels.iter().enumerate() {
            params.insert(ModelGraph::norm_gamma(k), Tensor5::filled([1, 1, 1, 1, c], 1.0));
            params.insert(ModelGraph::norm_beta(k), Tensor5::zeros([1, 1, 1, 1, c]));
        }
        for l in &graph.lstm {
            let bound = 1.0 / (l.hidden as f64).sqrt();
            params.insert(
                l.wx.clone(),
                uniform(&mut rng, [1, 1, 1, l.n_in, 4 * l.hidden], bound),
            );
            params.insert(
                l.wh.clone(),
                uniform(&mut rng, [1, 1, 1, l.hidden, 4 * l.hidden], bound),
            );
            // forget-gate bias starts at 1
            let mut b = Tensor5::zeros([1, 1, 1, 1, 4 * l.hidden]);
            for j in l.hidden..2 * l.hidden {
                b.data_mut()[j] = 1.0;
            }
            params.insert(l.bias.clone(), b);
        }
        let d = &graph.dense;
        params.insert(
            d.weight.clone(),
            uniform(
                &mut rng,
                [1, 1, 1, d.n_in, d.classes],
                (3.0 / d.n_in as f64).sqrt(),
            ),
        );
        let norms = graph
            .norm_channels
            .iter()
            .map(|&c| NormState::Batch {
                mean: vec![0.0; c],
                var: vec![1.0; c],
            })
            .collect();
        Ok(Self {
            config: cfg.clone(),
            graph,
            stage: Stage::FLOAT,
            completed: 0,
            params,
            norms,
            rng_state: rng.gen(),
        })
    }

    pub fn param(&self, name: &str) -> Result<&Tensor5, ModelError> {
        self.params
            .get(name)
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }

    /// Batch-norm parameters of a normalization layer, if it is still a batch norm.
    pub fn bn_params(&self, norm: usize) -> Option<BNParams> {
        match &self.norms[norm] {
            NormState::Batch { mean, var } => Some(BNParams {
                gamma: self.params.get(&ModelGraph::norm_gamma(norm))?.data().to_vec(),
                beta: self.params.get(&ModelGraph::norm_beta(norm))?.data().to_vec(),
                mean: mean.clone(),
                var: var.clone(),
                eps: self.config.bn_eps,
            }),
            NormState::Shift(_) => None,
        }
    }

    /// Names of the weight kernels (convolutions, LSTM matrices, dense head).
    pub fn kernel_names(&self) -> Vec<String> {
        let mut names: Vec<String> = self.graph.convs().iter().map(|c| c.weight.clone()).collect();
        for l in &self.graph.lstm {
            names.push(l.wx.clone());
            names.push(l.wh.clone());
        }
        names.push(self.graph.dense.weight.clone());
        names
    }

    pub fn param_counts(&self) -> ParamReport {
        param_report(&self.graph, self.stage, &self.params, &self.norms)
    }

    /// Removes the LSTM biases; weight-quantized stages run without them.
    pub fn drop_lstm_biases(&mut self) {
        for l in &self.graph.lstm {
            self.params.remove(&l.bias);
        }
    }

    /// Replaces every remaining batch norm by its bit-shift fold. The affine
    /// parameters leave the parameter set.
    pub fn fold_norms(&mut self) -> Result<(), QuantError> {
        for k in 0..self.norms.len() {
            if let Some(p) = self.bn_params(k) {
                self.norms[k] = NormState::Shift(bsn_fold(&p)?);
            }
            self.params.remove(&ModelGraph::norm_gamma(k));
            self.params.remove(&ModelGraph::norm_beta(k));
        }
        Ok(())
    }

    /// A fully quantized model with random latent weights and random shifts in
    /// `[-3, 3]`. Used for path-equivalence testing.
    pub fn random_quantized(cfg: &BillnetConfig, seed: u64) -> Result<Self, ModelError> {
        let mut m = Self::build(cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for name in m.kernel_names() {
            let t = m.params.get_mut(&name).expect("kernel exists");
            t.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-1.0..1.0));
        }
        m.drop_lstm_biases();
        for k in 0..m.norms.len() {
            let shifts = (0..m.graph.norm_channels[k]).map(|_| rng.gen_range(-3..=3)).collect();
            m.norms[k] = NormState::Shift(ShiftNorm { shifts });
            m.params.remove(&ModelGraph::norm_gamma(k));
            m.params.remove(&ModelGraph::norm_beta(k));
        }
        m.stage = Stage::FULL;
        m.completed = Stage::FULL.get();
        Ok(m)
    }
}

/// Weight-memory bitwidth of each kernel kind at a stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KernelKind {
    Conv,
    Lstm,
    Dense,
}

pub fn weight_bits(kind: KernelKind, stage: Stage) -> u32 {
    if !stage.weights_quantized() {
        return 32;
    }
    match kind {
        KernelKind::Conv | KernelKind::Lstm => 1,
        KernelKind::Dense => 2,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub kind: KernelKind,
    pub count: usize,
    pub bits_per_weight: u32,
    pub bits: u64,
}

/// Parameter counts and weight memory. `weight_bits` covers the kernels only;
/// normalization and bias state is reported separately in `aux_bits`.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamReport {
    pub stage: Stage,
    pub entries: Vec<ParamEntry>,
    pub weight_count: usize,
    pub weight_bits: u64,
    pub aux_count: usize,
    pub aux_bits: u64,
}

impl ParamReport {
    pub fn megabits(&self) -> f64 {
        self.weight_bits as f64 / 1e6
    }
}

pub fn param_report(
    graph: &ModelGraph,
    stage: Stage,
    params: &BTreeMap<String, Tensor5>,
    norms: &[NormState],
) -> ParamReport {
    let mut entries = Vec::new();
    let mut push = |name: &str, kind: KernelKind| {
        if let Some(t) = params.get(name) {
            let b = weight_bits(kind, stage);
            entries.push(ParamEntry {
                name: name.to_string(),
                kind,
                count: t.len(),
                bits_per_weight: b,
                bits: t.len() as u64 * u64::from(b),
            });
        }
    };
    for c in graph.convs() {
        push(&c.weight, KernelKind::Conv);
    }
    for l in &graph.lstm {
        push(&l.wx, KernelKind::Lstm);
        push(&l.wh, KernelKind::Lstm);
    }
    push(&graph.dense.weight, KernelKind::Dense);
    let weight_count = entries.iter().map(|e| e.count).sum();
    let weight_bits = entries.iter().map(|e| e.bits).sum();
    let mut aux_count = 0usize;
    let mut aux_bits = 0u64;
    for (k, norm) in norms.iter().enumerate() {
        match norm {
            NormState::Batch { .. } => {
                for name in [ModelGraph::norm_gamma(k), ModelGraph::norm_beta(k)] {
                    if let Some(t) = params.get(&name) {
                        aux_count += t.len();
                        aux_bits += 32 * t.len() as u64;
                    }
                }
            }
            // one signed 8-bit shift per channel
            NormState::Shift(s) => {
                aux_count += s.shifts.len();
                aux_bits += 8 * s.shifts.len() as u64;
            }
        }
    }
    for l in &graph.lstm {
        if let Some(t) = params.get(&l.bias) {
            aux_count += t.len();
            aux_bits += 32 * t.len() as u64;
        }
    }
    ParamReport {
        stage,
        entries,
        weight_count,
        weight_bits,
        aux_count,
        aux_bits,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paper_config_geometry() {
        let g = BillnetConfig::paper().graph().unwrap();
        assert_eq!(g.dense.n_in, 128);
        assert_eq!(g.steps, 8);
        let last_mor = g
            .layers
            .iter()
            .rev()
            .find(|l| matches!(l.kind, LayerKind::Mor { .. }))
            .unwrap();
        assert_eq!((last_mor.input.h, last_mor.input.w), (6, 8));
        assert_eq!(g.gap_dims.c, 256);
    }

    #[test]
    fn toy_config_geometry() {
        let g = BillnetConfig::toy().graph().unwrap();
        assert_eq!(g.steps, 4);
        assert_eq!((g.gap_dims.h, g.gap_dims.w, g.gap_dims.c), (3, 4, 64));
    }

    #[test]
    fn bad_configs_name_the_violation() {
        let mut c = BillnetConfig::toy();
        c.n = 12;
        let e = c.validate().unwrap_err().to_string();
        assert!(e.contains("divisible by 2g"), "{e}");
        let mut c = BillnetConfig::toy();
        c.lstm_hidden = vec![16];
        assert!(c.validate().unwrap_err().to_string().contains("4m"));
        let mut c = BillnetConfig::toy();
        c.layout.remove(0);
        assert!(c.validate().unwrap_err().to_string().contains("stem"));
    }

    #[test]
    fn build_is_deterministic() {
        let a = Billnet::build(&BillnetConfig::toy()).unwrap();
        let b = Billnet::build(&BillnetConfig::toy()).unwrap();
        assert_eq!(a, b);
        let mut cfg = BillnetConfig::toy();
        cfg.seed = 1;
        assert_ne!(a.params, Billnet::build(&cfg).unwrap().params);
    }

    #[test]
    fn paper_param_count_near_one_million() {
        let model = Billnet::build(&BillnetConfig::paper()).unwrap();
        let r = model.param_counts();
        let rel = (r.weight_count as f64 - 1.007e6).abs() / 1.007e6;
        assert!(rel <= 0.2, "count {} off by {rel}", r.weight_count);
    }

    #[test]
    fn stage_compression_ratio() {
        for cfg in [BillnetConfig::paper(), BillnetConfig::toy()] {
            let model = Billnet::build(&cfg).unwrap();
            let s1 = param_report(&model.graph, Stage::FLOAT, &model.params, &model.norms);
            let s2 = param_report(&model.graph, Stage::WEIGHTS, &model.params, &model.norms);
            let ratio = s1.weight_bits as f64 / s2.weight_bits as f64;
            assert!((30.0..=32.0).contains(&ratio), "ratio {ratio}");
        }
    }

    #[test]
    fn empty_report_is_zero() {
        let g = BillnetConfig::toy().graph().unwrap();
        let r = param_report(&g, Stage::FLOAT, &BTreeMap::new(), &[]);
        assert_eq!((r.weight_count, r.weight_bits, r.aux_bits), (0, 0, 0));
    }

    #[test]
    fn config_json_round_trip() {
        let c = BillnetConfig::paper();
        assert_eq!(BillnetConfig::from_json(&c.to_json()).unwrap(), c);
        assert_eq!(c.hash(), BillnetConfig::paper().hash());
    }
}
