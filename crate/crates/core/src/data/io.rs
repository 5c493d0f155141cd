//! `ZSLB` bundle files and CSV import.
//!
//! Layout (little-endian):
//!
//! ```text
//! "ZSLB" | version u32 | N, D_x, S, U, D_a: u64
//! features  N·D_x f32   (row-major)
//! labels    N     u32
//! semantics (S+U)·D_a f32
//! seen ids  S u32 | unseen ids U u32
//! CRC32 (u32) of every byte after the magic
//! ```

use std::fs;
use std::path::Path;

use ndarray::Array2;

use super::DatasetBundle;
use crate::error::{Error, Result};

pub const BUNDLE_MAGIC: &[u8; 4] = b"ZSLB";
pub const BUNDLE_VERSION: u32 = 1;

pub fn write_bundle(bundle: &DatasetBundle) -> Vec<u8> {
    let (n, d_x) = bundle.features.dim();
    let mut out = Vec::with_capacity(48 + 4 * (n * d_x + n + bundle.semantics.len()));
    out.extend_from_slice(BUNDLE_MAGIC);
    out.extend_from_slice(&BUNDLE_VERSION.to_le_bytes());
    for v in [
        n,
        d_x,
        bundle.seen_classes.len(),
        bundle.unseen_classes.len(),
        bundle.semantics.ncols(),
    ] {
        out.extend_from_slice(&(v as u64).to_le_bytes());
    }
    for v in bundle.features.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in &bundle.labels {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in bundle.semantics.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for v in bundle.seen_classes.iter().chain(&bundle.unseen_classes) {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let crc = crc32fast::hash(&out[4..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

pub fn save_bundle(bundle: &DatasetBundle, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, write_bundle(bundle))?;
    Ok(())
}

pub fn load_bundle(path: impl AsRef<Path>) -> Result<DatasetBundle> {
    read_bundle(&fs::read(path)?)
}

/// Little cursor that reports offsets in its errors.
pub(crate) struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::format(
                self.bytes.len() as u64,
                format!(
                    "truncated payload: {what} needs {n} bytes at offset {}, file has {}",
                    self.pos,
                    self.bytes.len()
                ),
            )
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn count(&mut self, what: &str) -> Result<usize> {
        let at = self.pos;
        let v = self.u64(what)?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.bytes.len())
            .ok_or_else(|| Error::format(at as u64, format!("{what} = {v} exceeds the file size")))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f32>> {
        let bytes = self.take(n.checked_mul(4).unwrap_or(usize::MAX), what)?;
        Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    pub(crate) fn u32s(&mut self, n: usize, what: &str) -> Result<Vec<u32>> {
        let bytes = self.take(n.checked_mul(4).unwrap_or(usize::MAX), what)?;
        Ok(bytes.chunks_exact(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect())
    }

    /// Verifies the trailing CRC32 over `bytes[from..pos]` and that nothing follows it.
    pub(crate) fn finish_crc(&mut self, from: usize) -> Result<()> {
        let body_end = self.pos;
        let stored = self.u32("checksum")?;
        let actual = crc32fast::hash(&self.bytes[from..body_end]);
        if stored != actual {
            return Err(Error::format(
                body_end as u64,
                format!("checksum mismatch: stored {stored:08x}, computed {actual:08x}"),
            ));
        }
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("{} trailing bytes after checksum", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

pub fn read_bundle(bytes: &[u8]) -> Result<DatasetBundle> {
    let mut r = Reader::new(bytes);
    let magic = r.take(4, "magic")?;
    if magic != BUNDLE_MAGIC {
        return Err(Error::format(0, format!("bad magic {magic:?}, expected \"ZSLB\"")));
    }
    let version = r.u32("version")?;
    if version != BUNDLE_VERSION {
        return Err(Error::format(4, format!("unsupported version {version}")));
    }
    let n = r.count("N")?;
    let d_x = r.count("D_x")?;
    let s = r.count("S")?;
    let u = r.count("U")?;
    let d_a = r.count("D_a")?;
    let features = r.f32s(n * d_x, "features")?;
    let labels = r.u32s(n, "labels")?;
    let semantics = r.f32s((s + u) * d_a, "semantics")?;
    let seen = r.u32s(s, "seen class ids")?;
    let unseen = r.u32s(u, "unseen class ids")?;
    r.finish_crc(4)?;
    DatasetBundle::new(
        Array2::from_shape_vec((n, d_x), features).expect("length checked"),
        labels,
        Array2::from_shape_vec((s + u, d_a), semantics).expect("length checked"),
        seen,
        unseen,
    )
}

/// Imports hand-made fixtures.
///
/// `features_csv` has a header `label,f0,f1,...` and one sample per row.
/// `semantics_csv` has a header `class,split,a0,a1,...` where `split` is
/// `seen` or `unseen` and classes are numbered `0..C` in row order.
pub fn load_csv(features_csv: impl AsRef<Path>, semantics_csv: impl AsRef<Path>) -> Result<DatasetBundle> {
    let (labels, features) = read_table(features_csv.as_ref(), 1, |cols, line| {
        cols[0]
            .trim()
            .parse::<u32>()
            .map_err(|e| Error::format(line, format!("bad label {:?}: {e}", cols[0])))
    })?;
    let (classes, semantics) = read_table(semantics_csv.as_ref(), 2, |cols, line| {
        let id = cols[0]
            .trim()
            .parse::<u32>()
            .map_err(|e| Error::format(line, format!("bad class id {:?}: {e}", cols[0])))?;
        let seen = match cols[1].trim() {
            "seen" => true,
            "unseen" => false,
            other => return Err(Error::format(line, format!("split must be seen|unseen, got {other:?}"))),
        };
        Ok((id, seen))
    })?;
    for (row, (id, _)) in classes.iter().enumerate() {
        if *id as usize != row {
            return Err(Error::Data(format!("semantics row {row} declares class {id}; rows must be 0..C in order")));
        }
    }
    let seen = classes.iter().filter(|c| c.1).map(|c| c.0).collect();
    let unseen = classes.iter().filter(|c| !c.1).map(|c| c.0).collect();
    DatasetBundle::new(features, labels, semantics, seen, unseen)
}

fn read_table<K>(
    path: &Path,
    key_cols: usize,
    mut key: impl FnMut(&[&str], u64) -> Result<K>,
) -> Result<(Vec<K>, Array2<f32>)> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::format(0, format!("{} is empty", path.display())))?;
    let width = header.split(',').count();
    if width <= key_cols {
        return Err(Error::format(1, "header has no value columns"));
    }
    let mut keys = Vec::new();
    let mut values = Vec::new();
    for (i, line) in lines {
        let lineno = i as u64 + 1;
        let cols: Vec<&str> = line.split(',').collect();
        if cols.len() != width {
            return Err(Error::format(
                lineno,
                format!("line {lineno} has {} columns, header has {width}", cols.len()),
            ));
        }
        keys.push(key(&cols, lineno)?);
        for c in &cols[key_cols..] {
            values.push(
                c.trim()
                    .parse::<f32>()
                    .map_err(|e| Error::format(lineno, format!("line {lineno}: bad number {c:?}: {e}")))?,
            );
        }
    }
    let rows = keys.len();
    Ok((keys, Array2::from_shape_vec((rows, width - key_cols), values).expect("width checked")))
}
