//! `PGPW1` weight files.
//!
//! Layout, all integers little-endian: the magic `PGPW1\n`, a `u32` record
//! count, then per record a `u32` name length, the UTF-8 name, a `u8` dtype
//! tag (0 = f32, 1 = f64), a `u32` rank, `rank` × `u64` dims and the raw
//! scalars.

use std::path::Path;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::param::ParamStore;
use crate::tensor::{DType, Scalar};

pub const WEIGHTS_MAGIC: &[u8; 6] = b"PGPW1\n";

/// One tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightRecord {
    pub name: String,
    pub dtype: DType,
    pub dims: Vec<usize>,
    /// Raw little-endian scalars.
    pub bytes: Vec<u8>,
}

impl WeightRecord {
    pub fn numel(&self) -> usize {
        self.dims.iter().product()
    }

    /// Values converted to `T`; exact when the dtypes agree.
    pub fn values<T: Scalar>(&self) -> Vec<T> {
        let size = self.dtype.size_of();
        self.bytes
            .chunks_exact(size)
            .map(|b| match self.dtype {
                DType::F32 => T::from_f64_lossy(f32::read_le(b) as f64),
                DType::F64 if T::DTYPE == DType::F64 => T::read_le(b),
                DType::F64 => T::from_f64_lossy(f64::read_le(b)),
            })
            .collect()
    }
}

pub fn save_weights<T: Scalar>(store: &ParamStore<T>, path: impl AsRef<Path>) -> Result<()> {
    let mut out = WEIGHTS_MAGIC.to_vec();
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(T::DTYPE as u8);
        out.extend_from_slice(&(p.dims.len() as u32).to_le_bytes());
        for &d in &p.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in p.value.data() {
            v.write_le(&mut out);
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Format(format!(
                "truncated while reading {what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self, what: &str) -> Result<usize> {
        let v = u64::from_le_bytes(self.take(8, what)?.try_into().unwrap());
        usize::try_from(v).map_err(|_| Error::Format(format!("{what} {v} out of range")))
    }
}

pub fn read_weights(path: impl AsRef<Path>) -> Result<Vec<WeightRecord>> {
    let bytes = std::fs::read(path)?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(WEIGHTS_MAGIC.len(), "magic").ok() != Some(&WEIGHTS_MAGIC[..]) {
        return Err(Error::Format("bad magic, not a PGPW1 file".into()));
    }
    let count = r.u32("record count")?;
    let mut records = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let len = r.u32("name length")?;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let tag = r.take(1, "dtype")?[0];
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Format(format!("`{name}`: unknown dtype tag {tag}")))?;
        let rank = r.u32("rank")?;
        let dims = (0..rank).map(|_| r.u64("dim")).collect::<Result<Vec<_>>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(dtype.size_of()))
            .ok_or_else(|| Error::Format(format!("`{name}`: dims {dims:?} overflow")))?;
        let data = r.take(numel, &format!("data of `{name}`"))?.to_vec();
        records.push(WeightRecord {
            name,
            dtype,
            dims,
            bytes: data,
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after the last record",
            bytes.len() - r.pos
        )));
    }
    Ok(records)
}

/// What [`load_weights`] did.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize)]
pub struct LoadReport {
    pub loaded: Vec<String>,
    /// File records that were not used, with the reason.
    pub skipped: Vec<String>,
    /// Store parameters the file did not provide.
    pub missing: Vec<String>,
}

/// Loads parameters by name. Strict mode requires every parameter to be
/// present with its exact dims and every record to be used; otherwise the
/// matching intersection is loaded and the rest reported.
pub fn load_weights<T: Scalar>(store: &mut ParamStore<T>, path: impl AsRef<Path>, strict: bool) -> Result<LoadReport> {
    let records = read_weights(path)?;
    let mut report = LoadReport::default();
    let mut staged = Vec::new();
    for rec in &records {
        match store.by_name(&rec.name) {
            None => report.skipped.push(format!("{}: not in network", rec.name)),
            Some(p) if p.dims != rec.dims => report
                .skipped
                .push(format!("{}: file dims {:?}, network dims {:?}", rec.name, rec.dims, p.dims)),
            Some(_) => staged.push(rec),
        }
    }
    for p in store.iter() {
        if !records.iter().any(|r| r.name == p.name) {
            report.missing.push(p.name.clone());
        }
    }
    if strict && (!report.skipped.is_empty() || !report.missing.is_empty()) {
        let mut problems = report.skipped.clone();
        problems.extend(report.missing.iter().map(|m| format!("{m}: missing from file")));
        return Err(Error::Format(format!("strict load failed: {}", problems.join("; "))));
    }
    for rec in staged {
        let p = store.by_name_mut(&rec.name).expect("checked above");
        p.value.data_mut().copy_from_slice(&rec.values::<T>());
        report.loaded.push(rec.name.clone());
    }
    Ok(report)
}
