//! Binary model and code files. All integers and floats are little-endian.
//!
//! Model file:
//!
//! ```text
//! "AGSF"  u32 version (1)
//! u32 bits  u32 anchors  u32 clusters  u32 knn
//! f64 gamma1  f64 gamma2  f64 gamma3  f64 lambda
//! u32 max_iter  u32 ogm_max_iter  f64 ogm_tol  f64 tol  u64 seed
//! u8 flags (bit 0 renormalize fusion, bit 1 classic momentum, bit 2 center)
//! f64 degree_floor  f64 edge_threshold
//! u32 M, then per modality: u32 d, d × f64 mean, d·K × f64 projection (column-major)
//! u64 P, P × u64 anchor index, P packed anchor codes
//! u8 has_codes; if 1: u64 N, N × u64 training index, N packed codes
//! ```
//!
//! A packed code is ⌈K/64⌉ u64 words, bit `b` of the code at bit `b % 64`
//! of word `b / 64`, set for `+1`.
//!
//! Code file: `"AGSC"  u32 version (1)  u32 K  u64 Q`, then Q packed codes.

use std::fs;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::retrieval::PackedCodes;
use crate::simplex_opt::Momentum;
use crate::training::{HashModel, Hyperparams};

const MODEL_MAGIC: &[u8; 4] = b"AGSF";
const CODES_MAGIC: &[u8; 4] = b"AGSC";
const VERSION: u32 = 1;

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn bytes(&mut self, b: &[u8]) {
        self.0.extend_from_slice(b);
    }
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) -> Result<()> {
        let v = u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{v} does not fit in 32 bits")))?;
        self.bytes(&v.to_le_bytes());
        Ok(())
    }
    fn u64(&mut self, v: u64) {
        self.bytes(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.bytes(&v.to_le_bytes());
    }
    fn codes(&mut self, codes: &PackedCodes) {
        for &w in codes.words() {
            self.u64(w);
        }
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], String> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            format!("truncated: needed {n} bytes at offset {}, file has {}", self.pos, self.buf.len())
        })?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }
    fn u8(&mut self) -> std::result::Result<u8, String> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> std::result::Result<usize, String> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> std::result::Result<u64, String> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> std::result::Result<usize, String> {
        usize::try_from(self.u64()?).map_err(|_| "length overflows".to_string())
    }
    fn f64(&mut self) -> std::result::Result<f64, String> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<f64>, String> {
        let raw = self.take(n.checked_mul(8).ok_or("length overflows")?)?;
        Ok(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
    }
    fn codes(&mut self, bits: usize, count: usize) -> std::result::Result<PackedCodes, String> {
        let n = PackedCodes::words_for(bits).checked_mul(count).ok_or("length overflows")?;
        let raw = self.take(n.checked_mul(8).ok_or("length overflows")?)?;
        let words = raw.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect();
        PackedCodes::from_words(bits, words).map_err(|e| e.to_string())
    }
    fn magic(&mut self, want: &[u8; 4]) -> std::result::Result<(), String> {
        let got = self.take(4)?;
        if got != want {
            return Err(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            ));
        }
        let version = self.u32()?;
        if version != VERSION as usize {
            return Err(format!("unsupported version {version}"));
        }
        Ok(())
    }
    fn finish(&self) -> std::result::Result<(), String> {
        if self.pos != self.buf.len() {
            return Err(format!("{} trailing bytes", self.buf.len() - self.pos));
        }
        Ok(())
    }
}

fn write_hyper(w: &mut Writer, h: &Hyperparams) -> Result<()> {
    w.u32(h.bits)?;
    w.u32(h.anchors)?;
    w.u32(h.clusters)?;
    w.u32(h.knn)?;
    for v in [h.gamma1, h.gamma2, h.gamma3, h.lambda] {
        w.f64(v);
    }
    w.u32(h.max_iter)?;
    w.u32(h.ogm_max_iter)?;
    w.f64(h.ogm_tol);
    w.f64(h.tol);
    w.u64(h.seed);
    let flags = h.renormalize_fusion as u8
        | ((h.momentum == Momentum::Classic) as u8) << 1
        | (h.center as u8) << 2;
    w.u8(flags);
    w.f64(h.degree_floor);
    w.f64(h.edge_threshold);
    Ok(())
}

fn read_hyper(r: &mut Reader<'_>) -> std::result::Result<Hyperparams, String> {
    let (bits, anchors, clusters, knn) = (r.u32()?, r.u32()?, r.u32()?, r.u32()?);
    let (gamma1, gamma2, gamma3, lambda) = (r.f64()?, r.f64()?, r.f64()?, r.f64()?);
    let (max_iter, ogm_max_iter) = (r.u32()?, r.u32()?);
    let (ogm_tol, tol, seed) = (r.f64()?, r.f64()?, r.u64()?);
    let flags = r.u8()?;
    if flags & !0b111 != 0 {
        return Err(format!("unknown flag bits {flags:#010b}"));
    }
    Ok(Hyperparams {
        bits,
        anchors,
        clusters,
        knn,
        gamma1,
        gamma2,
        gamma3,
        lambda,
        max_iter,
        ogm_max_iter,
        ogm_tol,
        tol,
        seed,
        renormalize_fusion: flags & 1 != 0,
        momentum: if flags & 2 != 0 { Momentum::Classic } else { Momentum::Linear },
        center: flags & 4 != 0,
        degree_floor: r.f64()?,
        edge_threshold: r.f64()?,
    })
}

pub fn model_to_bytes(model: &HashModel) -> Result<Vec<u8>> {
    let k = model.bits();
    if model.hyper.bits != k {
        return Err(Error::Shape(format!("model has {k}-bit anchor codes but records {} bits", model.hyper.bits)));
    }
    if model.means.len() != model.w.len() {
        return Err(Error::Shape("one mean vector per projection required".into()));
    }
    let mut w = Writer::default();
    w.bytes(MODEL_MAGIC);
    w.u32(VERSION as usize)?;
    write_hyper(&mut w, &model.hyper)?;
    w.u32(model.w.len())?;
    for (mean, proj) in model.means.iter().zip(&model.w) {
        if proj.shape() != (mean.len(), k) {
            return Err(Error::Shape(format!(
                "projection is {:?}, expected ({}, {k})",
                proj.shape(),
                mean.len()
            )));
        }
        w.u32(mean.len())?;
        mean.iter().for_each(|&v| w.f64(v));
        proj.iter().for_each(|&v| w.f64(v));
    }
    if model.anchor_indices.len() != model.bs.ncols() {
        return Err(Error::Shape("anchor indices and anchor codes disagree".into()));
    }
    w.u64(model.anchor_indices.len() as u64);
    model.anchor_indices.iter().for_each(|&i| w.u64(i as u64));
    w.codes(&PackedCodes::from_signs(&model.bs)?);
    match &model.b {
        Some(b) => {
            if b.nrows() != k || b.ncols() != model.train_indices.len() {
                return Err(Error::Shape("training codes and training indices disagree".into()));
            }
            w.u8(1);
            w.u64(model.train_indices.len() as u64);
            model.train_indices.iter().for_each(|&i| w.u64(i as u64));
            w.codes(&PackedCodes::from_signs(b)?);
        }
        None => w.u8(0),
    }
    Ok(w.0)
}

pub fn model_from_bytes(buf: &[u8]) -> std::result::Result<HashModel, String> {
    let mut r = Reader { buf, pos: 0 };
    r.magic(MODEL_MAGIC)?;
    let hyper = read_hyper(&mut r)?;
    let k = hyper.bits;
    if k == 0 {
        return Err("zero code length".into());
    }
    let m = r.u32()?;
    let mut means = Vec::with_capacity(m);
    let mut w = Vec::with_capacity(m);
    for _ in 0..m {
        let d = r.u32()?;
        means.push(DVector::from_vec(r.f64s(d)?));
        w.push(DMatrix::from_vec(d, k, r.f64s(d * k)?));
    }
    let p = r.len()?;
    let anchor_indices = (0..p).map(|_| r.len()).collect::<std::result::Result<Vec<_>, _>>()?;
    let bs = r.codes(k, p)?.to_signs();
    let (b, train_indices) = match r.u8()? {
        0 => (None, Vec::new()),
        1 => {
            let n = r.len()?;
            let idx = (0..n).map(|_| r.len()).collect::<std::result::Result<Vec<_>, _>>()?;
            (Some(r.codes(k, n)?.to_signs()), idx)
        }
        other => return Err(format!("bad code marker {other}")),
    };
    r.finish()?;
    Ok(HashModel { hyper, means, w, bs, b, train_indices, anchor_indices })
}

pub fn save_model(path: &Path, model: &HashModel) -> Result<()> {
    fs::write(path, model_to_bytes(model)?).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<HashModel> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    model_from_bytes(&buf).map_err(|msg| Error::format(path, msg))
}

pub fn codes_to_bytes(codes: &PackedCodes) -> Result<Vec<u8>> {
    let mut w = Writer::default();
    w.bytes(CODES_MAGIC);
    w.u32(VERSION as usize)?;
    w.u32(codes.bits())?;
    w.u64(codes.len() as u64);
    w.codes(codes);
    Ok(w.0)
}

pub fn codes_from_bytes(buf: &[u8]) -> std::result::Result<PackedCodes, String> {
    let mut r = Reader { buf, pos: 0 };
    r.magic(CODES_MAGIC)?;
    let k = r.u32()?;
    if k == 0 {
        return Err("zero code length".into());
    }
    let q = r.len()?;
    let codes = r.codes(k, q)?;
    r.finish()?;
    Ok(codes)
}

pub fn save_codes(path: &Path, codes: &PackedCodes) -> Result<()> {
    fs::write(path, codes_to_bytes(codes)?).map_err(|e| Error::io(path, e))
}

pub fn load_codes(path: &Path) -> Result<PackedCodes> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    codes_from_bytes(&buf).map_err(|msg| Error::format(path, msg))
}
