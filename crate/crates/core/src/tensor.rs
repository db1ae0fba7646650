//! Dense and bit-packed tensor containers shared by the reference and logic paths.
//!
//! Every tensor uses the same five-axis `(batch, time, height, width, channel)`
//! shape with channels fastest. Packed tensors store each pixel's channel
//! vector in `ceil(C / 64)` little-endian words, bit `c % 64` of word `c / 64`
//! holding channel `c`. Bits past `C` in the last word of a pixel are always
//! zero, so whole-word popcounts never need masking.

use thiserror::Error;

pub type Shape5 = [usize; 5];

const WORD_BITS: usize = 64;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch: expected {expected:?}, found {found:?}")]
    ShapeMismatch { expected: Shape5, found: Shape5 },
    #[error("invalid shape {0:?}: every axis must be at least 1")]
    BadShape(Shape5),
    #[error("data length {len} does not match shape {shape:?}")]
    LengthMismatch { shape: Shape5, len: usize },
    #[error("element {index} is {value}, expected 0 or 1")]
    NonBinaryInput { index: usize, value: f64 },
    #[error("element {index} is {value}, expected -1, 0 or +1")]
    NonTernaryInput { index: usize, value: f64 },
    #[error("invariant violated: {0}")]
    InvariantViolation(String),
}

pub type Result<T> = std::result::Result<T, TensorError>;

fn check_shape(shape: Shape5) -> Result<usize> {
    if shape.iter().any(|&d| d == 0) {
        return Err(TensorError::BadShape(shape));
    }
    Ok(shape.iter().product())
}

fn same_shape(a: Shape5, b: Shape5) -> Result<()> {
    if a != b {
        return Err(TensorError::ShapeMismatch {
            expected: a,
            found: b,
        });
    }
    Ok(())
}

/// Row-major flat offset of a five-axis index, channels fastest.
#[inline]
pub fn offset(shape: &Shape5, idx: [usize; 5]) -> usize {
    (((idx[0] * shape[1] + idx[1]) * shape[2] + idx[2]) * shape[3] + idx[3]) * shape[4] + idx[4]
}

/// Dense real-valued tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor5 {
    shape: Shape5,
    data: Vec<f64>,
}

impl Tensor5 {
    pub fn new(shape: Shape5, data: Vec<f64>) -> Result<Self> {
        let len = check_shape(shape)?;
        if data.len() != len {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape5) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: Shape5, value: f64) -> Self {
        let len = check_shape(shape).expect("tensor axes must be at least 1");
        Self {
            shape,
            data: vec![value; len],
        }
    }

    pub fn from_fn(shape: Shape5, mut f: impl FnMut([usize; 5]) -> f64) -> Self {
        let mut t = Self::zeros(shape);
        let mut k = 0;
        for n in 0..shape[0] {
            for ti in 0..shape[1] {
                for h in 0..shape[2] {
                    for w in 0..shape[3] {
                        for c in 0..shape[4] {
                            t.data[k] = f([n, ti, h, w, c]);
                            k += 1;
                        }
                    }
                }
            }
        }
        t
    }

    /// A `(1, 1, 1, 1, len)` vector.
    pub fn vector(data: Vec<f64>) -> Result<Self> {
        Self::new([1, 1, 1, 1, data.len()], data)
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, idx: [usize; 5]) -> f64 {
        self.data[offset(&self.shape, idx)]
    }

    pub fn set(&mut self, idx: [usize; 5], value: f64) {
        let k = offset(&self.shape, idx);
        self.data[k] = value;
    }

    pub fn reshape(self, shape: Shape5) -> Result<Self> {
        Self::new(shape, self.data)
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            shape: self.shape,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        same_shape(self.shape, other.shape)?;
        Ok(Self {
            shape: self.shape,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn is_binary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0)
    }

    pub fn is_ternary(&self) -> bool {
        self.data.iter().all(|&v| v == 0.0 || v == 1.0 || v == -1.0)
    }

    /// Extracts sample `n` as a batch-of-one tensor.
    pub fn sample(&self, n: usize) -> Self {
        let per = self.data.len() / self.shape[0];
        let mut shape = self.shape;
        shape[0] = 1;
        Self {
            shape,
            data: self.data[n * per..(n + 1) * per].to_vec(),
        }
    }

    /// Concatenates batch-of-one (or larger) tensors along the batch axis.
    pub fn stack_batch(parts: &[Tensor5]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::InvariantViolation("empty batch".into()))?;
        let mut template = first.shape;
        template[0] = 0;
        let mut shape = template;
        let mut data = Vec::new();
        for p in parts {
            let mut s = p.shape;
            s[0] = 0;
            same_shape(template, s)?;
            shape[0] += p.shape[0];
            data.extend_from_slice(&p.data);
        }
        Self::new(shape, data)
    }
}

/// Bit-packed binary tensor, one bit per element.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BitTensor {
    shape: Shape5,
    words_per_pixel: usize,
    words: Vec<u64>,
}

#[inline]
fn last_word_mask(channels: usize) -> u64 {
    match channels % WORD_BITS {
        0 => u64::MAX,
        r => (1u64 << r) - 1,
    }
}

impl BitTensor {
    pub fn zeros(shape: Shape5) -> Self {
        check_shape(shape).expect("tensor axes must be at least 1");
        let words_per_pixel = shape[4].div_ceil(WORD_BITS);
        let pixels = shape[0] * shape[1] * shape[2] * shape[3];
        Self {
            shape,
            words_per_pixel,
            words: vec![0; pixels * words_per_pixel],
        }
    }

    /// Builds a tensor from raw words; padding bits are cleared.
    pub fn from_words(shape: Shape5, mut words: Vec<u64>) -> Result<Self> {
        check_shape(shape)?;
        let wpp = shape[4].div_ceil(WORD_BITS);
        let pixels = shape[0] * shape[1] * shape[2] * shape[3];
        if words.len() != pixels * wpp {
            return Err(TensorError::LengthMismatch {
                shape,
                len: words.len(),
            });
        }
        let mask = last_word_mask(shape[4]);
        for p in 0..pixels {
            words[p * wpp + wpp - 1] &= mask;
        }
        Ok(Self {
            shape,
            words_per_pixel: wpp,
            words,
        })
    }

    /// Packs a tensor whose elements are all exactly 0.0 or 1.0.
    pub fn pack(x: &Tensor5) -> Result<Self> {
        let mut out = Self::zeros(x.shape);
        let c = x.shape[4];
        for (p, chunk) in x.data.chunks_exact(c).enumerate() {
            let base = p * out.words_per_pixel;
            for (ci, &v) in chunk.iter().enumerate() {
                if v == 1.0 {
                    out.words[base + ci / WORD_BITS] |= 1u64 << (ci % WORD_BITS);
                } else if v != 0.0 {
                    return Err(TensorError::NonBinaryInput {
                        index: p * c + ci,
                        value: v,
                    });
                }
            }
        }
        Ok(out)
    }

    pub fn from_bools(shape: Shape5, bits: impl IntoIterator<Item = bool>) -> Result<Self> {
        let mut out = Self::zeros(shape);
        let c = shape[4];
        let mut count = 0;
        for (i, b) in bits.into_iter().enumerate() {
            if i >= out.len() {
                return Err(TensorError::LengthMismatch {
                    shape,
                    len: i + 1,
                });
            }
            if b {
                let (p, ci) = (i / c, i % c);
                out.words[p * out.words_per_pixel + ci / WORD_BITS] |= 1u64 << (ci % WORD_BITS);
            }
            count = i + 1;
        }
        if count != out.len() {
            return Err(TensorError::LengthMismatch { shape, len: count });
        }
        Ok(out)
    }

    pub fn unpack(&self) -> Tensor5 {
        let c = self.shape[4];
        let mut data = Vec::with_capacity(self.len());
        for p in 0..self.pixels() {
            let words = self.pixel_words(p);
            for ci in 0..c {
                data.push(((words[ci / WORD_BITS] >> (ci % WORD_BITS)) & 1) as f64);
            }
        }
        Tensor5 {
            shape: self.shape,
            data,
        }
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn pixels(&self) -> usize {
        self.shape[0] * self.shape[1] * self.shape[2] * self.shape[3]
    }

    pub fn words_per_pixel(&self) -> usize {
        self.words_per_pixel
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    #[inline]
    pub fn pixel_index(&self, n: usize, t: usize, h: usize, w: usize) -> usize {
        ((n * self.shape[1] + t) * self.shape[2] + h) * self.shape[3] + w
    }

    #[inline]
    pub fn pixel_words(&self, pixel: usize) -> &[u64] {
        &self.words[pixel * self.words_per_pixel..(pixel + 1) * self.words_per_pixel]
    }

    /// Overwrites one pixel's channel words, clearing padding bits.
    pub fn set_pixel_words(&mut self, pixel: usize, words: &[u64]) {
        let wpp = self.words_per_pixel;
        let dst = &mut self.words[pixel * wpp..(pixel + 1) * wpp];
        dst.copy_from_slice(words);
        dst[wpp - 1] &= last_word_mask(self.shape[4]);
    }

    pub fn get(&self, idx: [usize; 5]) -> bool {
        let p = self.pixel_index(idx[0], idx[1], idx[2], idx[3]);
        let c = idx[4];
        (self.words[p * self.words_per_pixel + c / WORD_BITS] >> (c % WORD_BITS)) & 1 == 1
    }

    pub fn set(&mut self, idx: [usize; 5], value: bool) {
        assert!(idx[4] < self.shape[4], "channel index out of range");
        let p = self.pixel_index(idx[0], idx[1], idx[2], idx[3]);
        let c = idx[4];
        let word = &mut self.words[p * self.words_per_pixel + c / WORD_BITS];
        let bit = 1u64 << (c % WORD_BITS);
        if value {
            *word |= bit;
        } else {
            *word &= !bit;
        }
    }

    pub fn popcount(&self) -> u64 {
        self.words.iter().map(|w| u64::from(w.count_ones())).sum()
    }

    pub fn or(&self, other: &Self) -> Result<Self> {
        same_shape(self.shape, other.shape)?;
        Ok(Self {
            shape: self.shape,
            words_per_pixel: self.words_per_pixel,
            words: self.words.iter().zip(&other.words).map(|(a, b)| a | b).collect(),
        })
    }

    pub fn and(&self, other: &Self) -> Result<Self> {
        same_shape(self.shape, other.shape)?;
        Ok(Self {
            shape: self.shape,
            words_per_pixel: self.words_per_pixel,
            words: self.words.iter().zip(&other.words).map(|(a, b)| a & b).collect(),
        })
    }
}

/// `|{i : a_i = 1 and b_i = 1}|`.
pub fn popcount_and(a: &BitTensor, b: &BitTensor) -> Result<u64> {
    same_shape(a.shape, b.shape)?;
    Ok(popcount_and_words(&a.words, &b.words))
}

#[inline]
pub fn popcount_and_words(a: &[u64], b: &[u64]) -> u64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| u64::from((x & y).count_ones()))
        .sum()
}

#[inline]
pub fn popcount_words(a: &[u64]) -> u64 {
    a.iter().map(|x| u64::from(x.count_ones())).sum()
}

/// Dot product of `{0,1}` activations with `{-1,+1}` weights given as a sign
/// plane (bit 1 = +1): `2 * pc(a & w) - pc(a)`.
#[inline]
pub fn bipolar_dot_words(a: &[u64], w: &[u64]) -> i64 {
    2 * popcount_and_words(a, w) as i64 - popcount_words(a) as i64
}

pub fn binary_dot_bipolar_weights(a: &BitTensor, w_bits: &BitTensor) -> Result<i64> {
    same_shape(a.shape, w_bits.shape)?;
    Ok(bipolar_dot_words(&a.words, &w_bits.words))
}

/// Two-plane ternary tensor: value = plus - minus.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TernTensor {
    plus: BitTensor,
    minus: BitTensor,
}

impl TernTensor {
    pub fn zeros(shape: Shape5) -> Self {
        Self {
            plus: BitTensor::zeros(shape),
            minus: BitTensor::zeros(shape),
        }
    }

    pub fn new(plus: BitTensor, minus: BitTensor) -> Result<Self> {
        same_shape(plus.shape, minus.shape)?;
        if let Some(i) = plus
            .words
            .iter()
            .zip(&minus.words)
            .position(|(p, m)| p & m != 0)
        {
            return Err(TensorError::InvariantViolation(format!(
                "ternary planes overlap in word {i}"
            )));
        }
        Ok(Self { plus, minus })
    }

    pub fn from_values(x: &Tensor5) -> Result<Self> {
        let mut out = Self::zeros(x.shape);
        for (i, &v) in x.data.iter().enumerate() {
            let (p, c) = (i / x.shape[4], i % x.shape[4]);
            let k = p * out.plus.words_per_pixel + c / WORD_BITS;
            let bit = 1u64 << (c % WORD_BITS);
            if v == 1.0 {
                out.plus.words[k] |= bit;
            } else if v == -1.0 {
                out.minus.words[k] |= bit;
            } else if v != 0.0 {
                return Err(TensorError::NonTernaryInput { index: i, value: v });
            }
        }
        Ok(out)
    }

    pub fn from_i8(shape: Shape5, values: &[i8]) -> Result<Self> {
        let len = check_shape(shape)?;
        if values.len() != len {
            return Err(TensorError::LengthMismatch {
                shape,
                len: values.len(),
            });
        }
        let mut out = Self::zeros(shape);
        for (i, &v) in values.iter().enumerate() {
            let (p, c) = (i / shape[4], i % shape[4]);
            let k = p * out.plus.words_per_pixel + c / WORD_BITS;
            let bit = 1u64 << (c % WORD_BITS);
            match v {
                1 => out.plus.words[k] |= bit,
                -1 => out.minus.words[k] |= bit,
                0 => {}
                _ => {
                    return Err(TensorError::NonTernaryInput {
                        index: i,
                        value: f64::from(v),
                    })
                }
            }
        }
        Ok(out)
    }

    pub fn shape(&self) -> Shape5 {
        self.plus.shape
    }

    pub fn plus(&self) -> &BitTensor {
        &self.plus
    }

    pub fn minus(&self) -> &BitTensor {
        &self.minus
    }

    pub fn get(&self, idx: [usize; 5]) -> i8 {
        i8::from(self.plus.get(idx)) - i8::from(self.minus.get(idx))
    }

    pub fn set(&mut self, idx: [usize; 5], value: i8) {
        self.plus.set(idx, value > 0);
        self.minus.set(idx, value < 0);
    }

    pub fn to_tensor(&self) -> Tensor5 {
        let p = self.plus.unpack();
        let m = self.minus.unpack();
        p.zip_map(&m, |a, b| a - b).expect("planes share a shape")
    }

    pub fn to_i8(&self) -> Vec<i8> {
        self.to_tensor().data.iter().map(|&v| v as i8).collect()
    }

    pub fn planes_disjoint(&self) -> bool {
        self.plus
            .words
            .iter()
            .zip(&self.minus.words)
            .all(|(p, m)| p & m == 0)
    }
}

/// `sum h_i * w_i` for ternary `h` and a bipolar sign plane `w`.
pub fn ternary_dot_bipolar_weights(h: &TernTensor, w_bits: &BitTensor) -> Result<i64> {
    same_shape(h.shape(), w_bits.shape)?;
    if !h.planes_disjoint() {
        return Err(TensorError::InvariantViolation(
            "ternary planes overlap".into(),
        ));
    }
    Ok(ternary_bipolar_dot_words(
        &h.plus.words,
        &h.minus.words,
        &w_bits.words,
    ))
}

#[inline]
pub fn ternary_bipolar_dot_words(plus: &[u64], minus: &[u64], w: &[u64]) -> i64 {
    bipolar_dot_words(plus, w) - bipolar_dot_words(minus, w)
}

/// `sum a_i * b_i` for two ternary operands given as plane words.
#[inline]
pub fn ternary_dot_words(ap: &[u64], am: &[u64], bp: &[u64], bm: &[u64]) -> i64 {
    let pos = popcount_and_words(ap, bp) + popcount_and_words(am, bm);
    let neg = popcount_and_words(ap, bm) + popcount_and_words(am, bp);
    pos as i64 - neg as i64
}

/// Exact integer tensor (accumulators, bitcounts, 8-bit input codes).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct IntTensor {
    shape: Shape5,
    data: Vec<i32>,
}

impl IntTensor {
    pub fn new(shape: Shape5, data: Vec<i32>) -> Result<Self> {
        let len = check_shape(shape)?;
        if data.len() != len {
            return Err(TensorError::LengthMismatch {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Shape5) -> Self {
        let len = check_shape(shape).expect("tensor axes must be at least 1");
        Self {
            shape,
            data: vec![0; len],
        }
    }

    pub fn shape(&self) -> Shape5 {
        self.shape
    }

    pub fn data(&self) -> &[i32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [i32] {
        &mut self.data
    }

    pub fn get(&self, idx: [usize; 5]) -> i32 {
        self.data[offset(&self.shape, idx)]
    }

    pub fn set(&mut self, idx: [usize; 5], v: i32) {
        let k = offset(&self.shape, idx);
        self.data[k] = v;
    }

    pub fn to_tensor(&self) -> Tensor5 {
        Tensor5 {
            shape: self.shape,
            data: self.data.iter().map(|&v| f64::from(v)).collect(),
        }
    }

    /// Converts an integer-valued real tensor; fails on any fractional element.
    pub fn from_tensor(x: &Tensor5) -> Result<Self> {
        let mut data = Vec::with_capacity(x.len());
        for (i, &v) in x.data.iter().enumerate() {
            if v.fract() != 0.0 || v.abs() > f64::from(i32::MAX) {
                return Err(TensorError::InvariantViolation(format!(
                    "element {i} = {v} is not a 32-bit integer"
                )));
            }
            data.push(v as i32);
        }
        Ok(Self {
            shape: x.shape,
            data,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bits(v: &[u8]) -> BitTensor {
        BitTensor::from_bools([1, 1, 1, 1, v.len()], v.iter().map(|&b| b == 1)).unwrap()
    }

    #[test]
    fn pack_zeros_gives_zero_words() {
        let t = BitTensor::pack(&Tensor5::zeros([1, 1, 1, 1, 8])).unwrap();
        assert!(t.words().iter().all(|&w| w == 0));
    }

    #[test]
    fn pack_is_channel_fastest_lsb_first() {
        let x = Tensor5::vector(vec![1., 0., 1., 1., 0., 0., 0., 0.]).unwrap();
        let t = BitTensor::pack(&x).unwrap();
        assert_eq!(t.words()[0] & 0xff, 0b0000_1101);
        assert_eq!(t.popcount(), 3);
    }

    #[test]
    fn pack_rejects_non_binary() {
        let x = Tensor5::vector(vec![1., 0.5]).unwrap();
        assert!(matches!(
            BitTensor::pack(&x),
            Err(TensorError::NonBinaryInput { index: 1, .. })
        ));
    }

    #[test]
    fn pack_round_trip_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..1000 {
            let shape = [
                rng.gen_range(1..3),
                rng.gen_range(1..3),
                rng.gen_range(1..4),
                rng.gen_range(1..4),
                rng.gen_range(1..130),
            ];
            let x = Tensor5::from_fn(shape, |_| f64::from(rng.gen::<bool>() as u8));
            let p = BitTensor::pack(&x).unwrap();
            assert_eq!(p.unpack(), x);
            assert_eq!(p.popcount() as f64, x.data().iter().sum::<f64>());
        }
    }

    #[test]
    fn popcount_and_examples() {
        assert_eq!(popcount_and(&bits(&[1, 0, 1, 1]), &bits(&[1, 0, 0, 1])).unwrap(), 2);
        let x = bits(&[1, 1, 0, 1, 0, 1]);
        assert_eq!(popcount_and(&x, &bits(&[1; 6])).unwrap(), x.popcount());
        assert_eq!(popcount_and(&x, &bits(&[0; 6])).unwrap(), 0);
        assert!(matches!(
            popcount_and(&x, &bits(&[1; 5])),
            Err(TensorError::ShapeMismatch { .. })
        ));
    }

    #[test]
    fn bipolar_dot_examples() {
        // weights +1,-1,-1,+1 -> sign plane 1001
        let a = bits(&[1, 0, 1, 1]);
        let w = bits(&[1, 0, 0, 1]);
        assert_eq!(binary_dot_bipolar_weights(&a, &w).unwrap(), 1);
        assert_eq!(binary_dot_bipolar_weights(&bits(&[0; 4]), &w).unwrap(), 0);
        assert_eq!(
            binary_dot_bipolar_weights(&bits(&[1; 16]), &bits(&[1; 16])).unwrap(),
            16
        );
    }

    #[test]
    fn ternary_dot_examples() {
        let h = TernTensor::from_i8([1, 1, 1, 1, 3], &[1, 0, -1]).unwrap();
        assert_eq!(ternary_dot_bipolar_weights(&h, &bits(&[1, 1, 1])).unwrap(), 0);
        let z = TernTensor::zeros([1, 1, 1, 1, 3]);
        assert_eq!(ternary_dot_bipolar_weights(&z, &bits(&[1, 0, 1])).unwrap(), 0);
        let h = TernTensor::from_i8([1, 1, 1, 1, 1], &[-1]).unwrap();
        assert_eq!(ternary_dot_bipolar_weights(&h, &bits(&[0])).unwrap(), 1);
    }

    #[test]
    fn overlapping_planes_rejected() {
        let p = bits(&[1, 0]);
        assert!(matches!(
            TernTensor::new(p.clone(), p),
            Err(TensorError::InvariantViolation(_))
        ));
    }

    #[test]
    fn bipolar_dot_matches_naive_exhaustively_random() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100_000 {
            let n = rng.gen_range(1..=64);
            let a: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
            let w: Vec<i64> = (0..n).map(|_| if rng.gen() { 1 } else { -1 }).collect();
            let naive: i64 = a.iter().zip(&w).map(|(&x, &y)| i64::from(x) * y).sum();
            let wb: Vec<u8> = w.iter().map(|&v| u8::from(v > 0)).collect();
            assert_eq!(binary_dot_bipolar_weights(&bits(&a), &bits(&wb)).unwrap(), naive);
        }
    }

    #[test]
    fn stack_batch_concatenates_many_parts() {
        let parts: Vec<Tensor5> = (0..3)
            .map(|i| Tensor5::from_fn([i + 1, 1, 1, 2, 1], |[n, _, _, w, _]| (10 * i + 2 * n + w) as f64))
            .collect();
        let s = Tensor5::stack_batch(&parts).unwrap();
        assert_eq!(s.shape(), [6, 1, 1, 2, 1]);
        assert_eq!(s.sample(3), parts[2].sample(0));
        assert_eq!(s.data()[10..], parts[2].data()[4..]);
        let odd = Tensor5::zeros([1, 1, 1, 3, 1]);
        assert!(Tensor5::stack_batch(&[parts[0].clone(), odd]).is_err());
    }

    #[test]
    fn setters_keep_padding_zero() {
        let mut t = BitTensor::zeros([1, 1, 1, 2, 3]);
        t.set_pixel_words(0, &[u64::MAX]);
        assert_eq!(t.popcount(), 3);
        t.set([0, 0, 0, 1, 2], true);
        assert_eq!(t.popcount(), 4);
        let t = BitTensor::from_words([1, 1, 1, 1, 70], vec![u64::MAX, u64::MAX]).unwrap();
        assert_eq!(t.popcount(), 70);
    }

    proptest! {
        #[test]
        fn round_trip_all_small_shapes(
            shape in prop::array::uniform5(1usize..=9),
            seed in any::<u64>(),
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let x = Tensor5::from_fn(shape, |_| f64::from(rng.gen::<bool>() as u8));
            prop_assert_eq!(BitTensor::pack(&x).unwrap().unpack(), x.clone());
            let tern = x.map(|v| if v == 1.0 { -1.0 } else { 0.0 });
            let tt = TernTensor::from_values(&tern).unwrap();
            prop_assert!(tt.planes_disjoint());
            prop_assert_eq!(tt.to_tensor(), tern);
        }
    }
}
