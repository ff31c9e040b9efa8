//! Binary checkpoints of models and scenario state.
//!
//! Layout: magic `FBNN`, `u32` version, `u8` kind, `u8` proxy precision,
//! `u64` seed, architecture digest and TOML, class map, parameter records,
//! then for checkpoints the buffer and scenario progress. A SHA-256 of all
//! preceding bytes closes the file. Integers are little-endian; strings and
//! sequences carry a `u64` length prefix.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::arch::{ArchSpec, Model};
use crate::binmath::BitTensor;
use crate::encode::{ColorSpace, Encoding, QuantizedImage, RawImage};
use crate::error::{Error, Result};
use crate::qat::ParamKind;
use crate::replay::{ReplayBuffer, ReplayMode, RunReport, ScenarioState};
use crate::seed;
use crate::train::{Item, Payload};

pub const MAGIC: [u8; 4] = *b"FBNN";
pub const VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Kind {
    /// Model, buffer and scenario progress.
    Checkpoint = 1,
    /// Model with proxies and moments.
    Model = 2,
    /// Packed binary weights only.
    Inference = 3,
}

/// Storage precision of proxies and moments.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum Precision {
    F64 = 8,
    /// Halves the file; resumed training is no longer bit-identical.
    F32 = 4,
}

/// A model file's contents.
#[derive(Clone, Debug, PartialEq)]
pub struct SavedModel {
    pub seed: u64,
    pub model: Model,
    /// Dataset class of every output.
    pub class_map: Vec<usize>,
}

struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }
    fn u32(&mut self, v: u32) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }
    fn usize(&mut self, v: usize) {
        self.u64(v as u64);
    }
    fn opt_u64(&mut self, v: Option<u64>) {
        match v {
            Some(x) => {
                self.u8(1);
                self.u64(x);
            }
            None => self.u8(0),
        }
    }
    fn bytes(&mut self, b: &[u8]) {
        self.usize(b.len());
        self.buf.extend_from_slice(b);
    }
    fn str(&mut self, s: &str) {
        self.bytes(s.as_bytes());
    }
    fn usizes(&mut self, v: &[usize]) {
        self.usize(v.len());
        v.iter().for_each(|x| self.usize(*x));
    }
    fn reals(&mut self, v: &[f64], p: Precision) {
        self.usize(v.len());
        for x in v {
            match p {
                Precision::F64 => self.buf.extend_from_slice(&x.to_le_bytes()),
                Precision::F32 => self.buf.extend_from_slice(&(*x as f32).to_le_bytes()),
            }
        }
    }
    fn bits(&mut self, t: &BitTensor) {
        self.usizes(t.shape());
        t.words().iter().for_each(|w| self.u64(*w));
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Parse {
            offset: self.pos as u64,
            msg: msg.into(),
        })
    }
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return self.fail(format!("truncated: need {n} bytes, {} left", self.buf.len() - self.pos));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn usize(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v).or_else(|_| self.fail("length overflows usize"))
    }
    /// A length prefix for `unit`-byte elements, checked against the bytes left.
    fn len(&mut self, unit: usize) -> Result<usize> {
        let n = self.usize()?;
        if n.saturating_mul(unit) > self.buf.len() - self.pos {
            return self.fail(format!("truncated: {n} elements announced"));
        }
        Ok(n)
    }
    fn opt_u64(&mut self) -> Result<Option<u64>> {
        match self.u8()? {
            0 => Ok(None),
            1 => Ok(Some(self.u64()?)),
            t => self.fail(format!("bad option tag {t}")),
        }
    }
    fn bytes(&mut self) -> Result<&'a [u8]> {
        let n = self.len(1)?;
        self.take(n)
    }
    fn str(&mut self) -> Result<String> {
        let b = self.bytes()?;
        String::from_utf8(b.to_vec()).or_else(|_| self.fail("invalid UTF-8"))
    }
    fn usizes(&mut self) -> Result<Vec<usize>> {
        let n = self.len(8)?;
        (0..n).map(|_| self.usize()).collect()
    }
    fn reals(&mut self, p: Precision) -> Result<Vec<f64>> {
        let n = self.len(p as usize)?;
        (0..n)
            .map(|_| {
                Ok(match p {
                    Precision::F64 => f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")),
                    Precision::F32 => f32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as f64,
                })
            })
            .collect()
    }
    fn bits(&mut self) -> Result<BitTensor> {
        let shape = self.usizes()?;
        let len: usize = shape.iter().product();
        let n = len.div_ceil(64);
        if n.saturating_mul(8) > self.buf.len() - self.pos {
            return self.fail("truncated bit tensor");
        }
        let words = (0..n).map(|_| self.u64()).collect::<Result<Vec<_>>>()?;
        BitTensor::from_words(&shape, words)
    }
}

fn write_header(w: &mut Writer, kind: Kind, precision: Precision, seed: u64, spec: &ArchSpec) {
    w.buf.extend_from_slice(&MAGIC);
    w.u32(VERSION);
    w.u8(kind as u8);
    w.u8(precision as u8);
    w.u64(seed);
    w.str(&spec.digest());
    w.str(&toml::to_string(spec).expect("spec serializes"));
}

fn write_model(w: &mut Writer, model: &Model, class_map: &[usize], kind: Kind, precision: Precision) {
    w.usize(model.n_classes());
    w.usizes(class_map);
    let params = model.params();
    w.usize(params.len());
    for p in params {
        w.str(&p.name);
        w.u8(match p.kind {
            ParamKind::Binary => 0,
            ParamKind::Real => 1,
        });
        w.usizes(&p.shape);
        w.bits(p.bits());
        if kind != Kind::Inference {
            w.reals(&p.proxy, precision);
            w.reals(&p.m, precision);
            w.reals(&p.v, precision);
        }
    }
}

fn write_payload(w: &mut Writer, p: &Payload) {
    match p {
        Payload::Image(img) => {
            w.u8(0);
            w.usize(img.height);
            w.usize(img.width);
            w.u8(match img.space {
                ColorSpace::Rgb => 0,
                ColorSpace::YCbCr => 1,
            });
            w.bytes(&img.data);
        }
        Payload::Quantized(q) => {
            w.u8(1);
            w.usize(q.height);
            w.usize(q.width);
            write_encoding(w, q.encoding);
            w.bytes(&q.levels);
        }
        Payload::Latent(z) => {
            w.u8(2);
            w.bits(z);
        }
    }
}

fn write_encoding(w: &mut Writer, e: Encoding) {
    match e {
        Encoding::Tycc { n } => {
            w.u8(0);
            w.usize(n);
        }
        Encoding::Trgb => w.u8(1),
    }
}

fn write_buffer(w: &mut Writer, b: &ReplayBuffer) {
    w.u8(match b.mode {
        ReplayMode::Native => 0,
        ReplayMode::Latent => 1,
    });
    w.u64(b.capacity as u64);
    w.opt_u64(b.budget_bits);
    w.usize(b.label_bits);
    w.opt_u64(b.entry_payload_bits);
    w.usizes(b.classes());
    w.usize(b.entries.len());
    for e in &b.entries {
        w.usize(e.label);
        write_payload(w, &e.payload);
    }
}

fn finish(mut w: Writer) -> Vec<u8> {
    let d = Sha256::digest(&w.buf);
    w.buf.extend_from_slice(&d);
    w.buf
}

/// Serialized scenario checkpoint.
pub fn checkpoint_bytes(state: &ScenarioState, seed: u64, precision: Precision) -> Result<Vec<u8>> {
    let mut w = Writer { buf: Vec::new() };
    write_header(&mut w, Kind::Checkpoint, precision, seed, &state.model.spec);
    write_model(&mut w, &state.model, &state.class_map, Kind::Checkpoint, precision);
    write_buffer(&mut w, &state.buffer);
    w.usize(state.next_task);
    w.u8(state.fe_frozen as u8);
    w.usizes(&state.zero_quota);
    w.str(&state.report.to_csv()?);
    Ok(finish(w))
}

/// Serialized model. `Kind::Inference` keeps only the packed weights.
pub fn model_bytes(model: &Model, class_map: &[usize], seed: u64, kind: Kind, precision: Precision) -> Result<Vec<u8>> {
    if kind == Kind::Checkpoint {
        return Err(Error::Format("a checkpoint needs the scenario state".into()));
    }
    let mut w = Writer { buf: Vec::new() };
    write_header(&mut w, kind, precision, seed, &model.spec);
    write_model(&mut w, model, class_map, kind, precision);
    Ok(finish(w))
}

struct Header {
    kind: Kind,
    precision: Precision,
    seed: u64,
    spec: ArchSpec,
}

/// Checks magic, version and trailer digest and returns a reader over the
/// body.
fn open(bytes: &[u8]) -> Result<(Header, Reader<'_>)> {
    if bytes.len() < MAGIC.len() || bytes[..4] != MAGIC {
        return Err(Error::Format("not an FBNN file (bad magic)".into()));
    }
    if bytes.len() < 4 + 4 + DIGEST_LEN {
        return Err(Error::Parse {
            offset: bytes.len() as u64,
            msg: "truncated header".into(),
        });
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}, expected {VERSION}")));
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Format("content digest mismatch (truncated or corrupt file)".into()));
    }
    let mut r = Reader { buf: body, pos: 8 };
    let kind = match r.u8()? {
        1 => Kind::Checkpoint,
        2 => Kind::Model,
        3 => Kind::Inference,
        k => return r.fail(format!("unknown file kind {k}")),
    };
    let precision = match r.u8()? {
        8 => Precision::F64,
        4 => Precision::F32,
        p => return r.fail(format!("unknown precision {p}")),
    };
    let seed = r.u64()?;
    let digest = r.str()?;
    let text = r.str()?;
    let spec: ArchSpec = toml::from_str(&text).map_err(|e| Error::Format(format!("architecture: {e}")))?;
    if spec.digest() != digest {
        return Err(Error::Format("architecture digest does not match its description".into()));
    }
    Ok((
        Header {
            kind,
            precision,
            seed,
            spec,
        },
        r,
    ))
}

fn check_arch(h: &Header, expected: Option<&ArchSpec>) -> Result<()> {
    match expected {
        Some(e) if e.digest() != h.spec.digest() => Err(Error::Format(format!(
            "architecture digest mismatch: file {}, expected {}",
            h.spec.digest(),
            e.digest()
        ))),
        _ => Ok(()),
    }
}

fn read_model(r: &mut Reader, h: &Header) -> Result<(Model, Vec<usize>)> {
    let n_classes = r.usize()?;
    let class_map = r.usizes()?;
    if class_map.len() != n_classes {
        return r.fail("class map length differs from head size");
    }
    // Structure only; every value is overwritten below.
    let mut model = Model::build(&h.spec, n_classes, &mut seed::from_u64(0))?;
    let count = r.usize()?;
    let mut params = model.params_mut();
    if count != params.len() {
        return r.fail(format!("{count} parameter records, model has {}", params.len()));
    }
    for p in params.iter_mut() {
        let name = r.str()?;
        let kind = r.u8()?;
        let shape = r.usizes()?;
        if name != p.name || shape != p.shape {
            return r.fail(format!("record {name} {shape:?} does not match {} {:?}", p.name, p.shape));
        }
        let want = match p.kind {
            ParamKind::Binary => 0,
            ParamKind::Real => 1,
        };
        if kind != want {
            return r.fail(format!("record {name} has the wrong kind"));
        }
        let bits = r.bits()?;
        if h.kind == Kind::Inference {
            let proxy: Vec<f64> = (0..bits.len()).map(|i| bits.value(i) as f64).collect();
            let zeros = vec![0.0; proxy.len()];
            p.restore(&proxy, &zeros, &zeros)?;
        } else {
            let proxy = r.reals(h.precision)?;
            let m = r.reals(h.precision)?;
            let v = r.reals(h.precision)?;
            p.restore(&proxy, &m, &v)?;
            if h.precision == Precision::F64 && p.kind == ParamKind::Binary && p.bits() != &bits {
                return r.fail(format!("packed weights of {name} disagree with proxies"));
            }
        }
    }
    drop(params);
    Ok((model, class_map))
}

fn read_encoding(r: &mut Reader) -> Result<Encoding> {
    match r.u8()? {
        0 => Ok(Encoding::Tycc { n: r.usize()? }),
        1 => Ok(Encoding::Trgb),
        t => r.fail(format!("unknown encoding tag {t}")),
    }
}

fn read_payload(r: &mut Reader) -> Result<Payload> {
    match r.u8()? {
        0 => {
            let (height, width) = (r.usize()?, r.usize()?);
            let space = match r.u8()? {
                0 => ColorSpace::Rgb,
                1 => ColorSpace::YCbCr,
                t => return r.fail(format!("unknown colour space {t}")),
            };
            let data = r.bytes()?.to_vec();
            Ok(Payload::Image(RawImage::new(height, width, space, data)?))
        }
        1 => {
            let (height, width) = (r.usize()?, r.usize()?);
            let encoding = read_encoding(r)?;
            let levels = r.bytes()?.to_vec();
            if levels.len() != height * width * 3 {
                return r.fail("level count differs from image size");
            }
            Ok(Payload::Quantized(QuantizedImage {
                height,
                width,
                encoding,
                levels,
            }))
        }
        2 => Ok(Payload::Latent(r.bits()?)),
        t => r.fail(format!("unknown payload tag {t}")),
    }
}

fn read_buffer(r: &mut Reader) -> Result<ReplayBuffer> {
    let mode = match r.u8()? {
        0 => ReplayMode::Native,
        1 => ReplayMode::Latent,
        t => return r.fail(format!("unknown buffer mode {t}")),
    };
    let capacity = usize::try_from(r.u64()?).unwrap_or(usize::MAX);
    let budget = r.opt_u64()?;
    let label_bits = r.usize()?;
    let entry_bits = r.opt_u64()?;
    let classes = r.usizes()?;
    let n = r.len(9)?;
    let mut entries = Vec::with_capacity(n);
    for _ in 0..n {
        let label = r.usize()?;
        entries.push(Item {
            payload: read_payload(r)?,
            label,
        });
    }
    Ok(ReplayBuffer::from_parts(mode, capacity, budget, label_bits, entry_bits, classes, entries))
}

fn expect_end(r: &Reader) -> Result<()> {
    if r.pos != r.buf.len() {
        return r.fail("trailing bytes");
    }
    Ok(())
}

/// Parses a checkpoint, failing if its architecture is not `expected`.
pub fn checkpoint_from_bytes(bytes: &[u8], expected: Option<&ArchSpec>) -> Result<(u64, ScenarioState)> {
    let (h, mut r) = open(bytes)?;
    if h.kind != Kind::Checkpoint {
        return Err(Error::Format(format!("expected a checkpoint, found {:?}", h.kind)));
    }
    check_arch(&h, expected)?;
    let (model, class_map) = read_model(&mut r, &h)?;
    let buffer = read_buffer(&mut r)?;
    let next_task = r.usize()?;
    let fe_frozen = match r.u8()? {
        0 => false,
        1 => true,
        t => return r.fail(format!("bad flag {t}")),
    };
    let zero_quota = r.usizes()?;
    let report = RunReport::from_csv(&r.str()?)?;
    expect_end(&r)?;
    Ok((
        h.seed,
        ScenarioState {
            model,
            buffer,
            class_map,
            next_task,
            fe_frozen,
            zero_quota,
            report,
        },
    ))
}

/// Parses a model or inference export. Inference exports come back with
/// ±1 proxies and zero moments.
pub fn model_from_bytes(bytes: &[u8], expected: Option<&ArchSpec>) -> Result<SavedModel> {
    let (h, mut r) = open(bytes)?;
    check_arch(&h, expected)?;
    let (model, class_map) = read_model(&mut r, &h)?;
    if h.kind != Kind::Checkpoint {
        expect_end(&r)?;
    }
    Ok(SavedModel {
        seed: h.seed,
        model,
        class_map,
    })
}

pub fn save_checkpoint(path: &Path, state: &ScenarioState, seed: u64, precision: Precision) -> Result<()> {
    std::fs::write(path, checkpoint_bytes(state, seed, precision)?)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path, expected: Option<&ArchSpec>) -> Result<(u64, ScenarioState)> {
    checkpoint_from_bytes(&std::fs::read(path)?, expected)
}

pub fn save_model(path: &Path, model: &Model, class_map: &[usize], seed: u64, kind: Kind) -> Result<()> {
    std::fs::write(path, model_bytes(model, class_map, seed, kind, Precision::F64)?)?;
    Ok(())
}

pub fn load_model(path: &Path, expected: Option<&ArchSpec>) -> Result<SavedModel> {
    model_from_bytes(&std::fs::read(path)?, expected)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn model() -> Model {
        Model::build(&ArchSpec::tiny([8, 8, 16]), 3, &mut seed::from_u64(9)).unwrap()
    }

    #[test]
    fn model_round_trip_is_exact() {
        let m = model();
        let bytes = model_bytes(&m, &[4, 5, 6], 7, Kind::Model, Precision::F64).unwrap();
        let back = model_from_bytes(&bytes, Some(&m.spec)).unwrap();
        assert_eq!(back.model, m);
        assert_eq!(back.class_map, vec![4, 5, 6]);
        assert_eq!(back.seed, 7);
        let again = model_bytes(&back.model, &back.class_map, 7, Kind::Model, Precision::F64).unwrap();
        assert_eq!(again, bytes);
    }

    #[test]
    fn inference_export_keeps_bits_only() {
        let m = model();
        let full = model_bytes(&m, &[0, 1, 2], 0, Kind::Model, Precision::F64).unwrap();
        let inf = model_bytes(&m, &[0, 1, 2], 0, Kind::Inference, Precision::F64).unwrap();
        assert!(inf.len() * 20 < full.len());
        let back = model_from_bytes(&inf, None).unwrap().model;
        for (a, b) in back.params().iter().zip(m.params()) {
            assert_eq!(a.bits(), b.bits());
        }
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let m = model();
        let mut bytes = model_bytes(&m, &[0, 1, 2], 0, Kind::Model, Precision::F64).unwrap();
        assert!(matches!(model_from_bytes(&bytes[..bytes.len() - 5], None), Err(Error::Format(_))));
        let mut other = ArchSpec::tiny([8, 8, 16]);
        other.latent = 64;
        assert!(matches!(model_from_bytes(&bytes, Some(&other)), Err(Error::Format(_))));
        bytes[0] = b'X';
        assert!(matches!(model_from_bytes(&bytes, None), Err(Error::Format(_))));
    }

    #[test]
    fn f32_proxies_round_to_single_precision() {
        let m = model();
        let bytes = model_bytes(&m, &[0, 1, 2], 0, Kind::Model, Precision::F32).unwrap();
        let back = model_from_bytes(&bytes, None).unwrap().model;
        for (a, b) in back.params().iter().zip(m.params()) {
            assert_eq!(a.bits(), b.bits());
            assert!(a.proxy.iter().zip(&b.proxy).all(|(x, y)| *x == (*y as f32) as f64));
        }
    }
}
