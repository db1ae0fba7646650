//! The `BLNT` checkpoint container.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! "BLNT" | version u32 | section*
//! section = tag [u8; 4] | len u64 | payload [u8; len] | crc32(payload) u32
//! ```
//!
//! Sections, in order: `CONF` (config JSON), `META` (stage u8, completed u8,
//! rng state u64), `NORM` (per norm layer: kind u8, channels u32, then f64
//! means and variances or i8 shifts), `PARM` (per parameter, sorted by name:
//! name length u16, name, quantizer u8, encoding u8, shape 5 x u32, data).
//!
//! Parameters are stored as raw f64 except in fully quantized models, where
//! binary kernels are a single sign plane and the dense head two ternary
//! planes (plus, minus), each bit-packed LSB-first into bytes. Those models
//! keep only the quantized images of their latent weights, which the forward
//! passes map to themselves.

use std::collections::BTreeMap;
use std::path::Path;

use thiserror::Error;

use crate::model::{Billnet, BillnetConfig, KernelKind, ModelError, ModelGraph, NormState, Stage};
use crate::quant::{sign_strict, tern_code, tern_threshold, ShiftNorm};
use crate::tensor::Tensor5;

pub const MAGIC: &[u8; 4] = b"BLNT";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("corrupt checkpoint: {0}")]
    CorruptFile(String),
    #[error("checkpoint version {found}, this build reads {expected}")]
    VersionMismatch { found: u32, expected: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

fn corrupt(msg: impl Into<String>) -> CheckpointError {
    CheckpointError::CorruptFile(msg.into())
}

/// Quantizer applied to a stored parameter by the forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
enum Quantizer {
    None = 0,
    Sign = 1,
    Tern = 2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
enum Encoding {
    F64 = 0,
    SignPlane = 1,
    TernPlanes = 2,
}

fn kernel_kinds(graph: &ModelGraph) -> BTreeMap<String, KernelKind> {
    let mut kinds: BTreeMap<String, KernelKind> =
        graph.convs().iter().map(|c| (c.weight.clone(), KernelKind::Conv)).collect();
    for l in &graph.lstm {
        kinds.insert(l.wx.clone(), KernelKind::Lstm);
        kinds.insert(l.wh.clone(), KernelKind::Lstm);
    }
    kinds.insert(graph.dense.weight.clone(), KernelKind::Dense);
    kinds
}

fn quantizer(kind: Option<KernelKind>, stage: Stage) -> Quantizer {
    match kind {
        Some(_) if !stage.weights_quantized() => Quantizer::None,
        Some(KernelKind::Dense) => Quantizer::Tern,
        Some(_) => Quantizer::Sign,
        None => Quantizer::None,
    }
}

fn pack_bits(bits: impl Iterator<Item = bool>, out: &mut Vec<u8>) {
    let mut byte = 0u8;
    let mut n = 0;
    for b in bits {
        byte |= u8::from(b) << n;
        n += 1;
        if n == 8 {
            out.push(byte);
            byte = 0;
            n = 0;
        }
    }
    if n > 0 {
        out.push(byte);
    }
}

fn unpack_bits(bytes: &[u8], count: usize) -> Vec<bool> {
    (0..count).map(|i| bytes[i / 8] >> (i % 8) & 1 == 1).collect()
}

/// Bytes of a bit plane of `count` values.
pub fn plane_bytes(count: usize) -> usize {
    count.div_ceil(8)
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn section(&mut self, tag: &[u8; 4], payload: &[u8]) {
        self.buf.extend_from_slice(tag);
        self.buf.extend_from_slice(&(payload.len() as u64).to_le_bytes());
        self.buf.extend_from_slice(payload);
        self.buf.extend_from_slice(&crc32fast::hash(payload).to_le_bytes());
    }
}

/// Serializes a model.
pub fn to_bytes(model: &Billnet) -> Vec<u8> {
    let mut w = Writer { buf: Vec::new() };
    w.buf.extend_from_slice(MAGIC);
    w.buf.extend_from_slice(&VERSION.to_le_bytes());
    w.section(b"CONF", model.config.to_json().as_bytes());

    let mut meta = vec![model.stage.get(), model.completed];
    meta.extend_from_slice(&model.rng_state.to_le_bytes());
    w.section(b"META", &meta);

    let mut norms = Vec::new();
    for n in &model.norms {
        match n {
            NormState::Batch { mean, var } => {
                norms.push(0);
                norms.extend_from_slice(&(mean.len() as u32).to_le_bytes());
                for v in mean.iter().chain(var) {
                    norms.extend_from_slice(&v.to_le_bytes());
                }
            }
            NormState::Shift(s) => {
                norms.push(1);
                norms.extend_from_slice(&(s.shifts.len() as u32).to_le_bytes());
                norms.extend(s.shifts.iter().map(|&k| k as i8 as u8));
            }
        }
    }
    w.section(b"NORM", &norms);

    let kinds = kernel_kinds(&model.graph);
    let packed = model.stage == Stage::FULL;
    let mut parm = Vec::new();
    for (name, t) in &model.params {
        let q = quantizer(kinds.get(name).copied(), model.stage);
        let enc = match q {
            Quantizer::Sign if packed => Encoding::SignPlane,
            Quantizer::Tern if packed => Encoding::TernPlanes,
            _ => Encoding::F64,
        };
        parm.extend_from_slice(&(name.len() as u16).to_le_bytes());
        parm.extend_from_slice(name.as_bytes());
        parm.push(q as u8);
        parm.push(enc as u8);
        for d in t.shape() {
            parm.extend_from_slice(&(d as u32).to_le_bytes());
        }
        match enc {
            Encoding::F64 => {
                for v in t.data() {
                    parm.extend_from_slice(&v.to_le_bytes());
                }
            }
            Encoding::SignPlane => pack_bits(t.data().iter().map(|&v| sign_strict(v) > 0.0), &mut parm),
            Encoding::TernPlanes => {
                let delta = tern_threshold(t.data());
                let codes: Vec<f64> = t.data().iter().map(|&v| tern_code(v, delta)).collect();
                pack_bits(codes.iter().map(|&c| c > 0.0), &mut parm);
                pack_bits(codes.iter().map(|&c| c < 0.0), &mut parm);
            }
        }
    }
    w.section(b"PARM", &parm);
    w.buf
}

pub fn save(model: &Billnet, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| corrupt(format!("truncated at byte {} (need {n} more)", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn section(&mut self, tag: &[u8; 4]) -> Result<Reader<'a>> {
        let found = self.take(4)?;
        if found != tag {
            return Err(corrupt(format!(
                "expected section {}, found {:?}",
                String::from_utf8_lossy(tag),
                String::from_utf8_lossy(found)
            )));
        }
        let len = usize::try_from(self.u64()?).map_err(|_| corrupt("section length"))?;
        let payload = self.take(len)?;
        let crc = self.u32()?;
        if crc32fast::hash(payload) != crc {
            return Err(corrupt(format!("CRC mismatch in section {}", String::from_utf8_lossy(tag))));
        }
        Ok(Reader { buf: payload, pos: 0 })
    }
}

/// Deserializes a model; the graph is rebuilt from the embedded config.
pub fn from_bytes(bytes: &[u8]) -> Result<Billnet> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4).map_err(|_| corrupt("file shorter than the header"))? != MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::VersionMismatch {
            found: version,
            expected: VERSION,
        });
    }
    let conf = r.section(b"CONF")?;
    let text = std::str::from_utf8(conf.buf).map_err(|_| corrupt("config is not UTF-8"))?;
    let cfg = BillnetConfig::from_json(text)?;
    let mut model = Billnet::build(&cfg)?;

    let mut meta = r.section(b"META")?;
    model.stage = Stage::new(meta.u8()?).ok_or_else(|| corrupt("stage out of range"))?;
    model.completed = meta.u8()?;
    model.rng_state = meta.u64()?;
    if model.completed > Stage::FULL.get() || !meta.done() {
        return Err(corrupt("bad META section"));
    }

    let mut nr = r.section(b"NORM")?;
    for (k, &c) in model.graph.norm_channels.iter().enumerate() {
        let kind = nr.u8()?;
        if nr.u32()? as usize != c {
            return Err(corrupt(format!("norm {k}: channel count")));
        }
        model.norms[k] = match kind {
            0 => {
                let mean = (0..c).map(|_| nr.f64()).collect::<Result<_>>()?;
                let var = (0..c).map(|_| nr.f64()).collect::<Result<_>>()?;
                NormState::Batch { mean, var }
            }
            1 => {
                let shifts = (0..c).map(|_| Ok(i32::from(nr.u8()? as i8))).collect::<Result<_>>()?;
                NormState::Shift(ShiftNorm { shifts })
            }
            _ => return Err(corrupt(format!("norm {k}: kind {kind}"))),
        };
    }
    if !nr.done() {
        return Err(corrupt("trailing bytes in NORM"));
    }

    let kinds = kernel_kinds(&model.graph);
    let mut pr = r.section(b"PARM")?;
    let mut params = BTreeMap::new();
    while !pr.done() {
        let len = pr.u16()? as usize;
        let name = std::str::from_utf8(pr.take(len)?)
            .map_err(|_| corrupt("parameter name"))?
            .to_string();
        let q = pr.u8()?;
        let enc = pr.u8()?;
        let mut shape = [0usize; 5];
        for d in &mut shape {
            *d = pr.u32()? as usize;
        }
        let expected = model
            .params
            .get(&name)
            .ok_or_else(|| corrupt(format!("unknown parameter {name}")))?;
        if expected.shape() != shape {
            return Err(corrupt(format!("{name}: shape {shape:?}, graph has {:?}", expected.shape())));
        }
        let want_q = quantizer(kinds.get(&name).copied(), model.stage);
        if q != want_q as u8 {
            return Err(corrupt(format!("{name}: quantizer tag {q} inconsistent with stage {}", model.stage)));
        }
        let count = expected.len();
        let data: Vec<f64> = match enc {
            0 => (0..count).map(|_| pr.f64()).collect::<Result<_>>()?,
            1 if want_q == Quantizer::Sign => unpack_bits(pr.take(plane_bytes(count))?, count)
                .into_iter()
                .map(|b| if b { 1.0 } else { -1.0 })
                .collect(),
            2 if want_q == Quantizer::Tern => {
                let plus = unpack_bits(pr.take(plane_bytes(count))?, count);
                let minus = unpack_bits(pr.take(plane_bytes(count))?, count);
                plus.iter()
                    .zip(&minus)
                    .map(|(&p, &m)| match (p, m) {
                        (true, false) => Ok(1.0),
                        (false, true) => Ok(-1.0),
                        (false, false) => Ok(0.0),
                        (true, true) => Err(corrupt(format!("{name}: overlapping ternary planes"))),
                    })
                    .collect::<Result<_>>()?
            }
            _ => return Err(corrupt(format!("{name}: encoding {enc}"))),
        };
        params.insert(name, Tensor5::new(shape, data).expect("shape checked"));
    }
    if !r.done() {
        return Err(corrupt("trailing bytes after the last section"));
    }
    let shift = model.stage.shift_norm();
    if model.norms.iter().any(|n| matches!(n, NormState::Shift(_)) != shift) {
        return Err(corrupt(format!("normalization kinds inconsistent with stage {}", model.stage)));
    }
    model.params = params;
    Ok(model)
}

pub fn load(path: &Path) -> Result<Billnet> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::refnet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

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

    #[test]
    fn float_round_trip_is_identity() {
        let mut m = Billnet::build(&tiny()).unwrap();
        m.rng_state = 0xdead_beef;
        if let NormState::Batch { mean, .. } = &mut m.norms[0] {
            mean[0] = 0.123;
        }
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(back, m);
        assert_eq!(to_bytes(&back), bytes);
    }

    #[test]
    fn quantized_round_trip_preserves_outputs_and_bytes() {
        let cfg = tiny();
        let m = Billnet::random_quantized(&cfg, 4).unwrap();
        let bytes = to_bytes(&m);
        let back = from_bytes(&bytes).unwrap();
        assert_eq!(to_bytes(&back), bytes);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor5::from_fn([3, cfg.frames, cfg.height, cfg.width, 1], |_| f64::from(rng.gen::<u8>()));
        let a = refnet::forward(&m, &x, true).unwrap();
        let b = refnet::forward(&back, &x, true).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn stage5_size_matches_analytic_count() {
        let cfg = tiny();
        let m = Billnet::random_quantized(&cfg, 0).unwrap();
        let bytes = to_bytes(&m);
        let kinds = kernel_kinds(&m.graph);
        let mut expect = 4 + 4;
        let section = |payload: usize| 4 + 8 + payload + 4;
        expect += section(cfg.to_json().len());
        expect += section(2 + 8);
        expect += section(m.graph.norm_channels.iter().map(|c| 1 + 4 + c).sum());
        let mut parm = 0;
        let (mut binary, mut ternary) = (0, 0);
        for (name, t) in &m.params {
            parm += 2 + name.len() + 2 + 20;
            parm += match kinds[name] {
                KernelKind::Dense => {
                    ternary += t.len();
                    2 * plane_bytes(t.len())
                }
                _ => {
                    binary += t.len();
                    plane_bytes(t.len())
                }
            };
        }
        expect += section(parm);
        assert_eq!(bytes.len(), expect);
        // weight payload is 1 bit per binary and 2 bits per ternary value, up to byte padding
        let weight_bytes: usize = m
            .params
            .iter()
            .map(|(n, t)| if kinds[n] == KernelKind::Dense { 2 * plane_bytes(t.len()) } else { plane_bytes(t.len()) })
            .sum();
        let exact_bits = binary + 2 * ternary;
        assert!(weight_bytes * 8 >= exact_bits && weight_bytes * 8 < exact_bits + 8 * 2 * m.params.len());
    }

    #[test]
    fn damaged_files_are_rejected() {
        let m = Billnet::build(&tiny()).unwrap();
        let bytes = to_bytes(&m);
        for cut in [0, 3, 8, 20, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(from_bytes(&bytes[..cut]), Err(CheckpointError::CorruptFile(_))), "cut {cut}");
        }
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(from_bytes(&bad), Err(CheckpointError::CorruptFile(_))));
        let mut flipped = bytes.clone();
        let mid = bytes.len() - 40;
        flipped[mid] ^= 0x10;
        assert!(matches!(from_bytes(&flipped), Err(CheckpointError::CorruptFile(_))));
        let mut v2 = bytes.clone();
        v2[4..8].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            from_bytes(&v2),
            Err(CheckpointError::VersionMismatch { found: 2, expected: 1 })
        ));
        let mut extra = bytes;
        extra.push(0);
        assert!(matches!(from_bytes(&extra), Err(CheckpointError::CorruptFile(_))));
    }

    #[test]
    fn inconsistent_stage_tag_rejected() {
        let mut m = Billnet::build(&tiny()).unwrap();
        m.stage = Stage::WEIGHTS;
        let mut bytes = to_bytes(&m);
        // rewrite the META stage byte back to 1 with a fresh CRC; quantizer tags now disagree
        let conf_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
        let meta_start = 8 + 4 + 8 + conf_len + 4;
        let payload = meta_start + 12;
        bytes[payload] = 1;
        let crc = crc32fast::hash(&bytes[payload..payload + 10]);
        bytes[payload + 10..payload + 14].copy_from_slice(&crc.to_le_bytes());
        let err = from_bytes(&bytes).unwrap_err();
        assert!(err.to_string().contains("quantizer tag"), "{err}");
    }
}
