//! Binary parameter container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "HRDACKPT"              8-byte magic
//! u32 version             currently 1
//! u32 meta_len, meta      UTF-8 TOML: model config and EMA momentum
//! u32 count               number of arrays
//! count x {
//!     u32 name_len, name  UTF-8, e.g. "student.encoder.0.weight"
//!     u32 ndim
//!     ndim x u64          dimensions
//!     prod(dims) x f64    row-major IEEE-754 values
//! }
//! ```
//!
//! Values are stored bit-for-bit, so a save/load round trip is exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, NetworkParams, TeacherState};
use crate::tensor::Tensor;

const MAGIC: &[u8; 8] = b"HRDACKPT";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub student: NetworkParams,
    pub teacher: TeacherState,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    alpha: f64,
    model: ModelConfig,
}

pub fn write_arrays(
    w: &mut impl Write,
    meta: &str,
    arrays: &[(String, &Tensor)],
) -> std::io::Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&(meta.len() as u32).to_le_bytes())?;
    w.write_all(meta.as_bytes())?;
    w.write_all(&(arrays.len() as u32).to_le_bytes())?;
    for (name, t) in arrays {
        w.write_all(&(name.len() as u32).to_le_bytes())?;
        w.write_all(name.as_bytes())?;
        w.write_all(&(t.ndim() as u32).to_le_bytes())?;
        for &d in t.shape() {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        if self.buf.len() < n {
            return None;
        }
        let (head, rest) = self.buf.split_at(n);
        self.buf = rest;
        Some(head)
    }
    fn u32(&mut self) -> Option<u32> {
        self.take(4)
            .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
    }
    fn u64(&mut self) -> Option<u64> {
        self.take(8)
            .map(|b| u64::from_le_bytes(b.try_into().unwrap()))
    }
    fn string(&mut self) -> Option<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).ok()
    }
}

/// Parses a container; returns the metadata text and the named arrays.
pub fn read_arrays(bytes: &[u8]) -> Option<(String, Vec<(String, Tensor)>)> {
    let mut r = Reader { buf: bytes };
    if r.take(8)? != MAGIC || r.u32()? != VERSION {
        return None;
    }
    let meta = r.string()?;
    let count = r.u32()?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape: Vec<usize> = (0..ndim)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Option<_>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8)?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data).ok()?));
    }
    if !r.buf.is_empty() {
        return None;
    }
    Some((meta, out))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = toml::to_string(&Meta {
            alpha: self.teacher.alpha,
            model: self.model.clone(),
        })
        .expect("model config serializes");
        let mut arrays = Vec::new();
        for (prefix, p) in [
            ("student", &self.student),
            ("teacher", &self.teacher.params),
        ] {
            for (name, t, _) in p.named_tensors() {
                arrays.push((format!("{prefix}.{name}"), t));
            }
        }
        let mut buf = Vec::new();
        write_arrays(&mut buf, &meta, &arrays).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8], origin: &Path) -> Result<Self> {
        let bad = |m: &str| Error::format(origin, m);
        let (meta, arrays) =
            read_arrays(bytes).ok_or_else(|| bad("not a valid checkpoint container"))?;
        let meta: Meta = toml::from_str(&meta).map_err(|e| bad(&format!("metadata: {e}")))?;
        meta.model.validate()?;
        let geometry = meta.model.layer_geometry();

        let mut template = NetworkParams::init(
            &meta.model,
            &mut <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0),
        )?;
        let names: Vec<String> = template
            .named_tensors()
            .into_iter()
            .map(|(n, _, _)| n)
            .collect();
        let mut pick = |prefix: &str| -> Result<NetworkParams> {
            let mut ts = Vec::new();
            for (n, proto) in names.iter().zip(template.tensors_mut()) {
                let full = format!("{prefix}.{n}");
                let (_, t) = arrays
                    .iter()
                    .find(|(an, _)| *an == full)
                    .ok_or_else(|| bad(&format!("missing array {full}")))?;
                if t.shape() != proto.shape() {
                    return Err(bad(&format!(
                        "array {full} has shape {:?}, expected {:?}",
                        t.shape(),
                        proto.shape()
                    )));
                }
                ts.push(t.clone());
            }
            NetworkParams::from_parts(&geometry, ts)
        };
        let student = pick("student")?;
        let teacher = pick("teacher")?;
        Ok(Self {
            model: meta.model,
            student,
            teacher: TeacherState::new(teacher, meta.alpha)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&self.to_bytes())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut buf))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf, path)
    }
}
