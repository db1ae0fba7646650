//! Staged quantization-aware training: the tape forward of the whole model,
//! the learning-rate schedule and the per-stage driver.

use std::collections::BTreeMap;
use std::io::Write;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Adam, AutodiffError, Tape, Var};
use crate::model::{Billnet, LayerKind, ModelError, ModelGraph, NormState, Stage};
use crate::quant::{ssign_scale, stern_scale, QuantError};
use crate::refnet::{self, NetError, StageOps, INPUT_SCALE};
use crate::tensor::Tensor5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("stage {requested} needs a model that completed stage {}, this one completed stage {completed}", requested - 1)]
    StageOrderViolation { requested: u8, completed: u8 },
    #[error("bad training data: {0}")]
    BadData(String),
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, TrainError>;

/// Hyper-parameters of one training stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageConfig {
    pub stage: u8,
    pub lr: f64,
    pub epochs: usize,
    /// Length of the trailing decay window.
    pub decay_epochs: usize,
    pub decay_rate: f64,
    pub batch_size: usize,
}

const PAPER_STAGES: [(f64, usize); 5] = [(5e-4, 100), (3e-4, 80), (3e-4, 80), (2e-4, 80), (1e-6, 80)];
const PAPER_DECAY_EPOCHS: usize = 50;
const PAPER_DECAY_RATE: f64 = 0.85;

impl StageConfig {
    /// Full-scale schedule.
    pub fn paper(stage: u8) -> Self {
        let (lr, epochs) = PAPER_STAGES[(stage - 1) as usize];
        Self {
            stage,
            lr,
            epochs,
            decay_epochs: PAPER_DECAY_EPOCHS,
            decay_rate: PAPER_DECAY_RATE,
            batch_size: 40,
        }
    }

    /// The full-scale schedule with epochs and decay window divided by
    /// `factor`. The rate is adjusted so the total decay over the window is
    /// unchanged: `r' = r^(D / D')`.
    pub fn scaled(stage: u8, factor: usize) -> Self {
        let p = Self::paper(stage);
        let epochs = (p.epochs / factor).max(1);
        let decay_epochs = (p.decay_epochs / factor).clamp(1, epochs);
        Self {
            epochs,
            decay_epochs,
            decay_rate: p.decay_rate.powf(p.decay_epochs as f64 / decay_epochs as f64),
            ..p
        }
    }

    /// Desk-scale schedule used for the synthetic gesture task: a few epochs
    /// per stage at a higher rate, decayed by `DESK_DECAY` per epoch over the
    /// second half.
    pub fn desk(stage: u8) -> Self {
        let p = Self::paper(stage);
        let (lr, epochs) = DESK_STAGES[usize::from(stage.clamp(1, 5)) - 1];
        Self {
            lr,
            epochs,
            decay_epochs: epochs / 2,
            decay_rate: DESK_DECAY,
            ..p
        }
    }
}

/// `(initial lr, epochs)` of the desk schedule per stage.
pub const DESK_STAGES: [(f64, usize); 5] = [(1e-2, 7), (5e-3, 4), (5e-3, 4), (5e-4, 10), (1e-3, 8)];
pub const DESK_DECAY: f64 = 0.7;

/// Learning rate of a (0-based) epoch.
pub fn lr_schedule(cfg: &StageConfig, epoch: usize) -> f64 {
    let start = cfg.epochs.saturating_sub(cfg.decay_epochs);
    if epoch < start {
        cfg.lr
    } else {
        cfg.lr * cfg.decay_rate.powi((epoch - start + 1) as i32)
    }
}

/// How batch norms behave on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Batch statistics; the moving statistics are updated afterwards.
    Train,
    /// Moving statistics, as in the reference forward.
    Eval,
}

/// A model forward recorded on a tape.
#[derive(Debug)]
pub struct TapeForward {
    /// Temporally averaged class scores `(N, 1, 1, 1, classes)`.
    pub logits: Var,
    /// Batch statistics of every training-mode batch norm, by norm index.
    pub batch_stats: BTreeMap<usize, crate::autodiff::BatchStats>,
}

struct Builder<'a> {
    model: &'a Billnet,
    tape: &'a mut Tape,
    vars: BTreeMap<String, Var>,
    ops: StageOps,
    bn: BnMode,
    stats: BTreeMap<usize, crate::autodiff::BatchStats>,
}

impl Builder<'_> {
    fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.vars.get(name) {
            return Ok(*v);
        }
        let v = self.tape.param(name, self.model.param(name)?.clone());
        self.vars.insert(name.to_string(), v);
        Ok(v)
    }

    fn conv(&mut self, x: Var, conv: &crate::model::Conv) -> Result<Var> {
        let mut w = self.param(&conv.weight)?;
        if self.model.stage.weights_quantized() {
            w = self.tape.sign(w);
        }
        Ok(self.tape.conv(x, w, &conv.spec)?)
    }

    fn cf(&mut self, x: Var, cf: &crate::model::Cf) -> Result<Var> {
        let a = self.conv(x, &cf.pw1)?;
        let b = self.conv(a, &cf.gconv)?;
        self.conv(b, &cf.pw2)
    }

    fn norm(&mut self, x: Var, k: usize) -> Result<Var> {
        match &self.model.norms[k] {
            NormState::Shift(s) => {
                let scales = (0..s.shifts.len()).map(|c| s.scale(c)).collect();
                Ok(self.tape.channel_scale(x, scales))
            }
            NormState::Batch { mean, var } => {
                let g = self.param(&ModelGraph::norm_gamma(k))?;
                let b = self.param(&ModelGraph::norm_beta(k))?;
                let eps = self.model.config.bn_eps;
                match self.bn {
                    BnMode::Train => {
                        let (y, stats) = self.tape.batch_norm(x, g, b, eps)?;
                        self.stats.insert(k, stats);
                        Ok(y)
                    }
                    BnMode::Eval => Ok(self.tape.fixed_norm(x, g, b, mean, var, eps)?),
                }
            }
        }
    }

    fn act(&mut self, x: Var) -> Var {
        match self.ops.act {
            refnet::Activation::Relu => self.tape.relu(x),
            refnet::Activation::Heaviside => self.tape.heaviside(x),
        }
    }

    fn lstm_step(
        &mut self,
        x: Var,
        x_div: f64,
        h: Var,
        c: Var,
        l: &crate::model::LstmLayer,
        (wx, wh, scale): (Var, Var, f64),
    ) -> Result<(Var, Var)> {
        let quantized = self.model.stage.lstm_acts_quantized();
        let hd = l.hidden;
        let px = self.tape.matmul(x, wx)?;
        let px = self.tape.div(px, x_div);
        let ph = self.tape.matmul(h, wh)?;
        let pre = self.tape.add(px, ph)?;
        let mut pre = self.tape.scale(pre, scale);
        if self.model.params.contains_key(&l.bias) {
            let b = self.param(&l.bias)?;
            pre = self.tape.add_bias(pre, b)?;
        }
        let gate = |t: &mut Tape, k: usize| t.slice_channels(pre, k * hd, hd);
        let (pi, pf, po, pc) = (gate(self.tape, 0), gate(self.tape, 1), gate(self.tape, 2), gate(self.tape, 3));
        let t = &mut *self.tape;
        if quantized {
            let (i, f, o, cand) = (t.heaviside(pi), t.heaviside(pf), t.heaviside(po), t.sign(pc));
            let fc = t.mul(f, c)?;
            let ic = t.mul(i, cand)?;
            let s = t.add(fc, ic)?;
            let c2 = t.clip(s);
            let h2 = t.mul(o, c2)?;
            Ok((h2, c2))
        } else {
            let (i, f, o, cand) = (t.sigmoid(pi), t.sigmoid(pf), t.sigmoid(po), t.tanh(pc));
            let fc = t.mul(f, c)?;
            let ic = t.mul(i, cand)?;
            let c2 = t.add(fc, ic)?;
            let tc = t.tanh(c2);
            let h2 = t.mul(o, tc)?;
            Ok((h2, c2))
        }
    }
}

/// Records the model forward on `tape`. In [`BnMode::Eval`] the class scores
/// equal the reference forward's bit for bit.
pub fn tape_forward(tape: &mut Tape, model: &Billnet, input: &Tensor5, bn: BnMode) -> Result<TapeForward> {
    let cfg = &model.config;
    let n = input.shape()[0];
    if input.shape() != [n, cfg.frames, cfg.height, cfg.width, 1] {
        return Err(TrainError::BadData(format!("input shape {:?}", input.shape())));
    }
    let mut b = Builder {
        model,
        tape,
        vars: BTreeMap::new(),
        ops: StageOps::for_stage(model.stage, cfg.tgap),
        bn,
        stats: BTreeMap::new(),
    };
    let mut x = b.tape.input(input.clone());
    for layer in &model.graph.layers {
        x = match &layer.kind {
            LayerKind::Stem { conv, norm } => {
                let acc = b.conv(x, conv)?;
                let scaled = b.tape.scale(acc, INPUT_SCALE);
                let pre = b.norm(scaled, *norm)?;
                b.act(pre)
            }
            LayerKind::Cf { cf, norm } => {
                let y = b.cf(x, cf)?;
                let pre = b.norm(y, *norm)?;
                b.act(pre)
            }
            LayerKind::Mor { cf1, norm1, cf2, norm2 } => {
                let y1 = b.cf(x, cf1)?;
                let p1 = b.norm(y1, *norm1)?;
                let a1 = b.act(p1);
                let s = b.tape.add(a1, x)?;
                let i0 = b.tape.clip(s);
                let y2 = b.cf(i0, cf2)?;
                let p2 = b.norm(y2, *norm2)?;
                let i1 = b.act(p2);
                let select = refnet::tgap(b.tape.value(x), b.ops.tgap);
                b.tape.mux(i0, i1, select)?
            }
            LayerKind::MaxPool { window } => b.tape.maxpool(x, *window)?,
        };
    }
    let [_, _, h, w, _] = b.tape.value(x).shape();
    let mut seq = b.tape.spatial_sum(x);
    let steps = b.tape.value(seq).shape()[1];
    let mut x_div = (h * w) as f64;
    let quantized = model.stage.weights_quantized();
    for l in &model.graph.lstm {
        let mut wx = b.param(&l.wx)?;
        let mut wh = b.param(&l.wh)?;
        let scale = if quantized {
            wx = b.tape.sign(wx);
            wh = b.tape.sign(wh);
            ssign_scale(l.n_in, l.hidden)
        } else {
            1.0
        };
        let mut hv = b.tape.input(Tensor5::zeros([n, 1, 1, 1, l.hidden]));
        let mut cv = b.tape.input(Tensor5::zeros([n, 1, 1, 1, l.hidden]));
        let mut hs = Vec::with_capacity(steps);
        for t in 0..steps {
            let xt = b.tape.slice_time(seq, t);
            (hv, cv) = b.lstm_step(xt, x_div, hv, cv, l, (wx, wh, scale))?;
            hs.push(hv);
        }
        seq = b.tape.stack_time(&hs)?;
        x_div = 1.0;
    }
    let mut wd = b.param(&model.graph.dense.weight)?;
    let dense_scale = if quantized {
        wd = b.tape.tern(wd);
        stern_scale(cfg.m)
    } else {
        1.0
    };
    let acc = b.tape.matmul(seq, wd)?;
    let total = b.tape.sum_time(acc);
    let logits = b.tape.scale(total, dense_scale / steps as f64);
    Ok(TapeForward {
        logits,
        batch_stats: b.stats,
    })
}

/// Moves the model to `stage`, applying that stage's layer swaps.
pub fn enter_stage(model: &mut Billnet, stage: Stage) -> Result<()> {
    let k = stage.get();
    if model.completed + 1 != k {
        return Err(TrainError::StageOrderViolation {
            requested: k,
            completed: model.completed,
        });
    }
    if k >= Stage::WEIGHTS.get() {
        model.drop_lstm_biases();
    }
    if k >= Stage::SHIFT_NORM.get() {
        model.fold_norms()?;
    }
    model.stage = stage;
    Ok(())
}

/// Names the optimizer updates at the model's current stage.
pub fn trainable(model: &Billnet) -> Vec<String> {
    model.params.keys().cloned().collect()
}

/// One row of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub stage: u8,
    pub epoch: usize,
    pub lr: f64,
    /// Mean mini-batch loss.
    pub loss: f64,
    /// Training accuracy of the mini-batch forwards.
    pub accuracy: f64,
    /// Accuracy of the reference forward on the held-out set, when given.
    pub val_accuracy: Option<f64>,
}

/// Labelled clips of 8-bit codes, each `(1, T, H, W, 1)`.
#[derive(Debug, Clone, Copy)]
pub struct Samples<'a> {
    pub clips: &'a [Tensor5],
    pub labels: &'a [usize],
}

impl<'a> Samples<'a> {
    pub fn new(clips: &'a [Tensor5], labels: &'a [usize]) -> Result<Self> {
        if clips.len() != labels.len() || clips.is_empty() {
            return Err(TrainError::BadData(format!("{} clips, {} labels", clips.len(), labels.len())));
        }
        Ok(Self { clips, labels })
    }

    pub fn len(&self) -> usize {
        self.clips.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.is_empty()
    }
}

/// Accuracy of the reference forward.
pub fn evaluate(model: &Billnet, data: Samples) -> Result<f64> {
    let refs: Vec<&Tensor5> = data.clips.iter().collect();
    let preds = refnet::predict(model, &refs, 40)?;
    let hits = preds.iter().zip(data.labels).filter(|(p, l)| p == l).count();
    Ok(hits as f64 / data.len() as f64)
}

/// One optimization step on a mini-batch. Returns `(loss, correct)`.
pub fn train_step(model: &mut Billnet, adam: &mut Adam, x: &Tensor5, labels: &[usize], lr: f64) -> Result<(f64, usize)> {
    let mut tape = Tape::new();
    let fwd = tape_forward(&mut tape, model, x, BnMode::Train)?;
    let loss = tape.softmax_cce(fwd.logits, labels)?;
    let loss_value = tape.value(loss).data()[0];
    let classes = model.config.classes;
    let correct = tape
        .value(fwd.logits)
        .data()
        .chunks_exact(classes)
        .zip(labels)
        .filter(|(row, &l)| refnet::argmax(row) == l)
        .count();
    let names = trainable(model);
    let grads = tape.backward(loss, &names)?;
    drop(tape);
    adam.step(&mut model.params, &grads, lr);
    if model.stage.weights_quantized() {
        for name in model.kernel_names() {
            if let Some(w) = model.params.get_mut(&name) {
                w.data_mut().iter_mut().for_each(|v| *v = v.clamp(-1.0, 1.0));
            }
        }
    }
    let momentum = model.config.bn_momentum;
    for (k, s) in fwd.batch_stats {
        if let NormState::Batch { mean, var } = &mut model.norms[k] {
            for (m, b) in mean.iter_mut().zip(&s.mean) {
                *m = momentum * *m + (1.0 - momentum) * b;
            }
            for (v, b) in var.iter_mut().zip(&s.var) {
                *v = momentum * *v + (1.0 - momentum) * b;
            }
        }
    }
    Ok((loss_value, correct))
}

/// Trains one stage. The model must have completed the previous stage; Adam
/// moments start from zero. `on_epoch` sees each log row as it is produced.
pub fn run_stage(
    model: &mut Billnet,
    cfg: &StageConfig,
    train: Samples,
    val: Option<Samples>,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<Vec<EpochLog>> {
    let stage = Stage::new(cfg.stage).ok_or_else(|| TrainError::BadData(format!("stage {}", cfg.stage)))?;
    enter_stage(model, stage)?;
    let mut rng = ChaCha8Rng::seed_from_u64(model.rng_state);
    let mut adam = Adam::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = lr_schedule(cfg, epoch);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut correct, mut batches) = (0.0, 0, 0);
        for idx in order.chunks(cfg.batch_size.max(1)) {
            let parts: Vec<Tensor5> = idx.iter().map(|&i| train.clips[i].clone()).collect();
            let x = Tensor5::stack_batch(&parts).map_err(NetError::from)?;
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels[i]).collect();
            let (loss, hits) = train_step(model, &mut adam, &x, &labels, lr)?;
            loss_sum += loss;
            correct += hits;
            batches += 1;
        }
        let val_accuracy = match val {
            Some(v) => Some(evaluate(model, v)?),
            None => None,
        };
        let row = EpochLog {
            stage: cfg.stage,
            epoch,
            lr,
            loss: loss_sum / batches as f64,
            accuracy: correct as f64 / train.len() as f64,
            val_accuracy,
        };
        on_epoch(&row);
        logs.push(row);
    }
    model.rng_state = rng.gen();
    model.completed = cfg.stage;
    Ok(logs)
}

/// Writes log rows as CSV with a header.
pub fn write_log_csv<W: Write>(out: W, rows: &[EpochLog]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["stage", "epoch", "lr", "loss", "accuracy", "val_accuracy"])?;
    for r in rows {
        w.write_record([
            r.stage.to_string(),
            r.epoch.to_string(),
            format!("{:e}", r.lr),
            format!("{:.17e}", r.loss),
            format!("{:.6}", r.accuracy),
            r.val_accuracy.map(|v| format!("{v:.6}")).unwrap_or_default(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::BillnetConfig;

    fn tiny() -> BillnetConfig {
        let mut c = BillnetConfig::toy();
        c.n = 8;
        c.m = 4;
        c.lstm_hidden = vec![16];
        c.frames = 4;
        c.height = 12;
        c.width = 16;
        c
    }

    fn batch(cfg: &BillnetConfig, n: usize, seed: u64) -> (Tensor5, Vec<usize>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor5::from_fn([n, cfg.frames, cfg.height, cfg.width, 1], |_| f64::from(rng.gen::<u8>()));
        let labels = (0..n).map(|i| i % cfg.classes).collect();
        (x, labels)
    }

    #[test]
    fn lr_examples() {
        let s1 = StageConfig::paper(1);
        assert_eq!(lr_schedule(&s1, 0), 0.0005);
        assert_eq!(lr_schedule(&s1, 49), 0.0005);
        assert_eq!(lr_schedule(&s1, 50), 0.0005 * 0.85);
        assert_eq!(lr_schedule(&s1, 99), 0.0005 * 0.85f64.powi(50));
        let d = StageConfig::scaled(1, 10);
        assert_eq!((d.epochs, d.decay_epochs), (10, 5));
        // total decay over the window matches the full-scale schedule
        let full = lr_schedule(&s1, 99) / s1.lr;
        let desk = lr_schedule(&d, 9) / d.lr;
        assert!((full - desk).abs() < 1e-15);
    }

    fn stage_model(cfg: &BillnetConfig, up_to: u8) -> Billnet {
        let mut m = Billnet::build(cfg).unwrap();
        for k in 1..=up_to {
            enter_stage(&mut m, Stage::new(k).unwrap()).unwrap();
            m.completed = k;
        }
        m
    }

    #[test]
    fn eval_tape_matches_reference_at_every_stage() {
        let cfg = tiny();
        let (x, _) = batch(&cfg, 3, 1);
        for k in 1..=5 {
            let mut m = stage_model(&cfg, k);
            // non-trivial moving statistics
            for (i, n) in m.norms.iter_mut().enumerate() {
                if let NormState::Batch { mean, var } = n {
                    mean.iter_mut().for_each(|v| *v = 0.01 * i as f64);
                    var.iter_mut().for_each(|v| *v = 0.5 + 0.1 * i as f64);
                }
            }
            let want = refnet::forward(&m, &x, false).unwrap().scores;
            let mut tape = Tape::new();
            let f = tape_forward(&mut tape, &m, &x, BnMode::Eval).unwrap();
            let got: Vec<Vec<f64>> = tape.value(f.logits).data().chunks(cfg.classes).map(|r| r.to_vec()).collect();
            assert_eq!(got, want, "stage {k}");
        }
    }

    #[test]
    fn stage_order_enforced() {
        let cfg = tiny();
        let mut m = stage_model(&cfg, 1);
        assert!(matches!(
            enter_stage(&mut m, Stage::CONV_ACTS),
            Err(TrainError::StageOrderViolation { requested: 3, completed: 1 })
        ));
        let mut fresh = Billnet::build(&cfg).unwrap();
        assert!(enter_stage(&mut fresh, Stage::WEIGHTS).is_err());
    }

    #[test]
    fn shift_norm_entry_removes_affine_params_only() {
        let cfg = tiny();
        let m3 = stage_model(&cfg, 3);
        let mut m4 = m3.clone();
        enter_stage(&mut m4, Stage::SHIFT_NORM).unwrap();
        let before = trainable(&m3);
        let after = trainable(&m4);
        let removed: Vec<&String> = before.iter().filter(|n| !after.contains(n)).collect();
        assert!(!removed.is_empty());
        assert!(removed.iter().all(|n| n.ends_with(".gamma") || n.ends_with(".beta")));
        assert!(after.iter().all(|n| before.contains(n)));
        assert_eq!(m3.param_counts().weight_count, m4.param_counts().weight_count);
        for n in &after {
            assert_eq!(m3.params[n], m4.params[n], "{n} carried over verbatim");
        }
    }

    #[test]
    fn weight_stage_changes_the_loss() {
        let cfg = tiny();
        let (x, labels) = batch(&cfg, 4, 2);
        let loss_at = |m: &Billnet| {
            let mut tape = Tape::new();
            let f = tape_forward(&mut tape, m, &x, BnMode::Train).unwrap();
            let l = tape.softmax_cce(f.logits, &labels).unwrap();
            tape.value(l).data()[0]
        };
        let m1 = stage_model(&cfg, 1);
        let m2 = stage_model(&cfg, 2);
        assert_ne!(loss_at(&m1), loss_at(&m2));
    }

    #[test]
    fn training_is_deterministic_and_clips_latents() {
        let cfg = tiny();
        let (x, labels) = batch(&cfg, 8, 3);
        let clips: Vec<Tensor5> = (0..8).map(|i| x.sample(i)).collect();
        let data = Samples::new(&clips, &labels).unwrap();
        let sc = StageConfig {
            stage: 2,
            lr: 0.05,
            epochs: 2,
            decay_epochs: 1,
            decay_rate: 0.85,
            batch_size: 4,
        };
        let run = || {
            let mut m = stage_model(&cfg, 1);
            let logs = run_stage(&mut m, &sc, data, None, |_| {}).unwrap();
            (m, logs)
        };
        let (a, la) = run();
        let (b, lb) = run();
        assert_eq!(la, lb);
        assert_eq!(a, b);
        assert_eq!(a.completed, 2);
        for name in a.kernel_names() {
            assert!(a.params[&name].data().iter().all(|v| v.abs() <= 1.0));
        }
    }

    #[test]
    fn csv_log_has_header_and_rows() {
        let rows = vec![EpochLog {
            stage: 1,
            epoch: 0,
            lr: 5e-4,
            loss: 1.25,
            accuracy: 0.5,
            val_accuracy: None,
        }];
        let mut buf = Vec::new();
        write_log_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next(), Some("stage,epoch,lr,loss,accuracy,val_accuracy"));
        assert!(lines.next().unwrap().starts_with("1,0,5e-4,"));
    }
}
