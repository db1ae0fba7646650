//! Element-wise quantizers, their straight-through surrogate gradients, and
//! batch-norm folding into power-of-two shifts.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::{popcount_words, BitTensor, Tensor5, TernTensor};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum QuantError {
    #[error("channel {channel} has a zero folded scale; cannot derive a shift")]
    ZeroScale { channel: usize },
    #[error("invalid batch-norm parameters: {0}")]
    BadParams(String),
}

/// Heaviside step `1{x > 0}` as a real 0/1.
#[inline]
pub fn heaviside(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// Straight-through surrogate for the Heaviside step: `1{|x| <= 1}`.
#[inline]
pub fn heaviside_ste_grad(x: f64) -> f64 {
    if x.abs() <= 1.0 {
        1.0
    } else {
        0.0
    }
}

/// Clipped identity `max(-1, min(1, y))`.
#[inline]
pub fn clip(y: f64) -> f64 {
    y.clamp(-1.0, 1.0)
}

#[inline]
pub fn clip_ste_grad(_y: f64) -> f64 {
    1.0
}

#[inline]
pub fn or_gate(a: bool, b: bool) -> bool {
    a || b
}

/// Strict sign: `+1` for `x > 0`, otherwise `-1`, so that
/// `sign_strict(x) == 2 * heaviside(x) - 1`.
#[inline]
pub fn sign_strict(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// Surrogate gradient for sign quantizers (weights and activations): `1{|x| <= 1}`.
#[inline]
pub fn sign_ste_grad(x: f64) -> f64 {
    heaviside_ste_grad(x)
}

/// Positive LSTM weight scale `3 / sqrt(n_i + n_o)`.
pub fn ssign_scale(n_in: usize, n_out: usize) -> f64 {
    assert!(n_in + n_out >= 1, "ssign needs at least one input");
    3.0 / ((n_in + n_out) as f64).sqrt()
}

pub fn ssign(w: f64, n_in: usize, n_out: usize) -> f64 {
    ssign_scale(n_in, n_out) * sign_strict(w)
}

/// Positive dense-head scale `1 / sqrt(4m)`.
pub fn stern_scale(m: usize) -> f64 {
    assert!(m >= 1, "stern needs m >= 1");
    1.0 / ((4 * m) as f64).sqrt()
}

/// Ternarization threshold `0.7 * mean(|w|)`.
pub fn tern_threshold(w: &[f64]) -> f64 {
    if w.is_empty() {
        return 0.0;
    }
    0.7 * w.iter().map(|v| v.abs()).sum::<f64>() / w.len() as f64
}

/// Ternary code of one weight given the threshold: 0 iff `|w| <= delta`.
#[inline]
pub fn tern_code(w: f64, delta: f64) -> f64 {
    if w.abs() <= delta {
        0.0
    } else if w > 0.0 {
        1.0
    } else {
        -1.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Ternarized {
    pub codes: Vec<i8>,
    pub delta: f64,
    pub scale: f64,
}

/// Scaled ternarization of a weight vector; value of element i is `codes[i] * scale`.
pub fn stern(w: &[f64], m: usize) -> Ternarized {
    let delta = tern_threshold(w);
    Ternarized {
        codes: w.iter().map(|&v| tern_code(v, delta) as i8).collect(),
        delta,
        scale: stern_scale(m),
    }
}

/// [`stern`] over a weight tensor, returning the packed planes and the scale.
pub fn stern_tensor(w: &Tensor5, m: usize) -> (TernTensor, f64) {
    let t = stern(w.data(), m);
    let planes = TernTensor::from_i8(w.shape(), &t.codes).expect("codes are ternary");
    (planes, t.scale)
}

/// Integer TGAP threshold for an `h x w` map: the select bit is `count > h*w/2`,
/// which for integer counts is `count > floor(h*w/2)`.
pub fn tgap_threshold(h: usize, w: usize) -> u32 {
    ((h * w) / 2) as u32
}

#[inline]
pub fn tgap_count_rule(count: u32, hw: usize) -> bool {
    2 * count as usize > hw
}

/// How the float-mode TGAP reference value `m` is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TgapCalibration {
    /// `m` is the maximum of the layer's pooled tensor, per sample and forward pass.
    #[default]
    PerSample,
    /// A fixed calibrated `m`.
    Constant { m: f64 },
}

/// Threshold rule applied by TGAP at a given training stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TgapMode {
    Float(TgapCalibration),
    /// Binary maps, `m = 1`.
    Quantized,
}

/// Float-mode decision `AP > 0.5 * m`.
#[inline]
pub fn tgap_float(mean: f64, m: f64) -> bool {
    mean > 0.5 * m
}

/// Bit-count TGAP of a packed map: one select bit per `(n, t, channel)`.
pub fn tgap_packed(x: &BitTensor) -> BitTensor {
    let [n, t, h, w, c] = x.shape();
    let threshold = tgap_threshold(h, w);
    let mut out = BitTensor::zeros([n, t, 1, 1, c]);
    let mut counts = vec![0u32; c];
    for ni in 0..n {
        for ti in 0..t {
            counts.iter_mut().for_each(|v| *v = 0);
            for hi in 0..h {
                for wi in 0..w {
                    let words = x.pixel_words(x.pixel_index(ni, ti, hi, wi));
                    for (ci, count) in counts.iter_mut().enumerate() {
                        *count += ((words[ci / 64] >> (ci % 64)) & 1) as u32;
                    }
                }
            }
            for (ci, &count) in counts.iter().enumerate() {
                if count > threshold {
                    out.set([ni, ti, 0, 0, ci], true);
                }
            }
        }
    }
    out
}

/// Population count of a whole single-channel map, used by tests and tooling.
pub fn map_popcount(x: &BitTensor) -> u64 {
    (0..x.pixels()).map(|p| popcount_words(x.pixel_words(p))).sum()
}

/// Per-channel batch-norm parameters and moving statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct BNParams {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub eps: f64,
}

impl BNParams {
    pub fn identity(channels: usize, eps: f64) -> Self {
        Self {
            gamma: vec![1.0; channels],
            beta: vec![0.0; channels],
            mean: vec![0.0; channels],
            var: vec![1.0; channels],
            eps,
        }
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    pub fn validate(&self) -> Result<(), QuantError> {
        let c = self.gamma.len();
        if self.beta.len() != c || self.mean.len() != c || self.var.len() != c {
            return Err(QuantError::BadParams("per-channel lengths differ".into()));
        }
        if !(self.eps > 0.0) {
            return Err(QuantError::BadParams(format!("eps = {} must be > 0", self.eps)));
        }
        if let Some(ch) = self.var.iter().position(|&v| !(v >= 0.0)) {
            return Err(QuantError::BadParams(format!("channel {ch} has negative variance")));
        }
        Ok(())
    }

    /// Folded per-channel `(scale, offset)`:
    /// `scale = gamma / sqrt(var + eps)`, `offset = beta - gamma * mean / sqrt(var + eps)`.
    pub fn folded(&self) -> (Vec<f64>, Vec<f64>) {
        let scale: Vec<f64> = self
            .gamma
            .iter()
            .zip(&self.var)
            .map(|(g, v)| g / (v + self.eps).sqrt())
            .collect();
        let offset = self
            .beta
            .iter()
            .zip(&self.mean)
            .zip(&scale)
            .map(|((b, m), s)| b - s * m)
            .collect();
        (scale, offset)
    }

    #[inline]
    pub fn apply(&self, x: f64, c: usize) -> f64 {
        self.gamma[c] * (x - self.mean[c]) / (self.var[c] + self.eps).sqrt() + self.beta[c]
    }
}

/// Inference-mode batch norm over the channel axis.
pub fn bn_forward(x: &Tensor5, p: &BNParams) -> Tensor5 {
    let c = x.shape()[4];
    assert_eq!(c, p.channels(), "batch-norm channel count");
    let mut out = x.clone();
    for (i, v) in out.data_mut().iter_mut().enumerate() {
        *v = p.apply(*v, i % c);
    }
    out
}

/// Offset-free power-of-two normalization: channel c is scaled by `2^shift[c]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShiftNorm {
    pub shifts: Vec<i32>,
}

impl ShiftNorm {
    pub fn identity(channels: usize) -> Self {
        Self {
            shifts: vec![0; channels],
        }
    }

    #[inline]
    pub fn scale(&self, c: usize) -> f64 {
        2f64.powi(self.shifts[c])
    }

    pub fn apply(&self, x: &Tensor5) -> Tensor5 {
        let c = x.shape()[4];
        let scales: Vec<f64> = (0..c).map(|ci| self.scale(ci)).collect();
        let mut out = x.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= scales[i % c];
        }
        out
    }
}

/// Replaces a batch norm by `2^round(log2|scale|)`, rounding ties to even and
/// discarding the offset.
pub fn bsn_fold(p: &BNParams) -> Result<ShiftNorm, QuantError> {
    p.validate()?;
    let (scale, _) = p.folded();
    let mut shifts = Vec::with_capacity(scale.len());
    for (channel, s) in scale.iter().enumerate() {
        if *s == 0.0 {
            return Err(QuantError::ZeroScale { channel });
        }
        shifts.push(s.abs().log2().round_ties_even() as i32);
    }
    Ok(ShiftNorm { shifts })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn heaviside_is_strict() {
        assert_eq!(heaviside(0.7), 1.0);
        assert_eq!(heaviside(0.0), 0.0);
        assert_eq!(heaviside(-1.2), 0.0);
    }

    #[test]
    fn heaviside_ste_includes_boundary() {
        assert_eq!(heaviside_ste_grad(0.5), 1.0);
        assert_eq!(heaviside_ste_grad(1.0), 1.0);
        assert_eq!(heaviside_ste_grad(-1.0), 1.0);
        assert_eq!(heaviside_ste_grad(2.0), 0.0);
    }

    #[test]
    fn clip_saturates() {
        assert_eq!(clip(1.7), 1.0);
        assert_eq!(clip(-3.0), -1.0);
        assert_eq!(clip(0.5), 0.5);
        assert_eq!(clip_ste_grad(17.0), 1.0);
    }

    #[test]
    fn or_matches_clipped_sum() {
        for a in [false, true] {
            for b in [false, true] {
                let sum = clip(f64::from(a as u8) + f64::from(b as u8));
                assert_eq!(sum, f64::from(or_gate(a, b) as u8));
            }
        }
    }

    #[test]
    fn sign_strict_zero_is_negative() {
        assert_eq!(sign_strict(0.3), 1.0);
        assert_eq!(sign_strict(-0.3), -1.0);
        assert_eq!(sign_strict(0.0), -1.0);
        for x in [-2.0, -0.1, 0.0, 0.1, 3.0] {
            assert_eq!(sign_strict(x), 2.0 * heaviside(x) - 1.0);
        }
    }

    #[test]
    fn ssign_examples() {
        assert_eq!(ssign(-0.02, 128, 128), -0.1875);
        assert_eq!(ssign(5.0, 2, 2), 1.5);
    }

    #[test]
    fn stern_example() {
        let t = stern(&[0.5, -0.01, 0.3], 32);
        assert!((t.delta - 0.189).abs() < 1e-12);
        assert_eq!(t.codes, vec![1, 0, 1]);
        assert!((t.scale - 0.088_388_347_648_318_44).abs() < 1e-15);
        let z = stern(&[0.0; 5], 4);
        assert!(z.codes.iter().all(|&c| c == 0));
    }

    #[test]
    fn tgap_paper_threshold() {
        assert_eq!(tgap_threshold(6, 8), 24);
        let map = |ones: usize| {
            BitTensor::from_bools([1, 1, 6, 8, 1], (0..48).map(|i| i < ones)).unwrap()
        };
        assert!(tgap_packed(&map(25)).get([0, 0, 0, 0, 0]));
        assert!(!tgap_packed(&map(24)).get([0, 0, 0, 0, 0]));
        assert!(!tgap_packed(&map(0)).get([0, 0, 0, 0, 0]));
        assert_eq!(map_popcount(&map(25)), 25);
    }

    #[test]
    fn bn_example_and_identity() {
        let p = BNParams {
            gamma: vec![2.0],
            beta: vec![1.0],
            mean: vec![0.0],
            var: vec![4.0 - 1e-3],
            eps: 1e-3,
        };
        let y = bn_forward(&Tensor5::vector(vec![1.0]).unwrap(), &p);
        assert!((y.data()[0] - 2.0).abs() < 1e-12);
        let id = BNParams {
            var: vec![1.0 - 1e-5],
            ..BNParams::identity(1, 1e-5)
        };
        let x = Tensor5::vector(vec![0.25]).unwrap();
        assert!((bn_forward(&x, &id).data()[0] - 0.25).abs() < 1e-15);
    }

    #[test]
    fn folded_form_matches_two_step_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..10_000 {
            let p = BNParams {
                gamma: vec![rng.gen_range(-3.0..3.0)],
                beta: vec![rng.gen_range(-3.0..3.0)],
                mean: vec![rng.gen_range(-3.0..3.0)],
                var: vec![rng.gen_range(0.0..5.0)],
                eps: 1e-3,
            };
            let x: f64 = rng.gen_range(-5.0..5.0);
            let (s, o) = p.folded();
            assert!((s[0] * x + o[0] - p.apply(x, 0)).abs() < 1e-12);
        }
    }

    #[test]
    fn bsn_fold_example() {
        let p = BNParams {
            gamma: vec![1.0, 1.0],
            beta: vec![0.0, 0.3],
            mean: vec![0.0, 0.0],
            var: vec![3.0, 1.0 - 1e-3],
            eps: 1e-3,
        };
        let s = bsn_fold(&p).unwrap();
        assert_eq!(s.shifts, vec![-1, 0]);
        assert_eq!(s.scale(0), 0.5);
    }

    #[test]
    fn bsn_fold_ties_to_even_and_zero_scale() {
        // scale = 2^1.5 rounds to 2 (even), 2^2.5 rounds to 2
        let p = |g: f64| BNParams {
            gamma: vec![g],
            beta: vec![0.0],
            mean: vec![0.0],
            var: vec![1.0 - 0.5],
            eps: 0.5,
        };
        assert_eq!(bsn_fold(&p(2f64.powf(1.5))).unwrap().shifts, vec![2]);
        assert_eq!(bsn_fold(&p(2f64.powf(2.5))).unwrap().shifts, vec![2]);
        assert_eq!(bsn_fold(&p(0.0)), Err(QuantError::ZeroScale { channel: 0 }));
    }

    #[test]
    fn shift_keeps_heaviside() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10_000 {
            let x: f64 = rng.gen_range(-4.0..4.0);
            let k: i32 = rng.gen_range(-8..=8);
            assert_eq!(heaviside(2f64.powi(k) * x), heaviside(x));
        }
    }
}
