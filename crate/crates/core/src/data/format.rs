//! MSHD: a little-endian binary container for a list of subjects.
//!
//! ```text
//! "MSHD"  u16 version  u32 n_subjects
//! per subject:
//!   u32 id_len  id bytes (UTF-8)
//!   u32 N  u32 C  u32 T  u32 n_classes
//!   N·C·T × f32 samples (row-major)
//!   N × i32 labels
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use super::SubjectDataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"MSHD";
pub const VERSION: u16 = 1;

pub fn encode(datasets: &[SubjectDataset]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(datasets.len() as u32).to_le_bytes());
    for d in datasets {
        let id = d.subject_id.as_bytes();
        out.extend_from_slice(&(id.len() as u32).to_le_bytes());
        out.extend_from_slice(id);
        for v in [d.len(), d.channels(), d.time_len(), d.n_classes()] {
            out.extend_from_slice(&(v as u32).to_le_bytes());
        }
        for v in d.samples().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for &y in d.labels() {
            out.extend_from_slice(&(y as i32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated file while reading {what} at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<SubjectDataset>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Format("bad magic bytes, not an MSHD file".into()));
    }
    let vb = r.take(2, "version")?;
    let version = u16::from_le_bytes([vb[0], vb[1]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported MSHD version {version}")));
    }
    let n_subjects = r.u32("subject count")?;
    let mut out = Vec::with_capacity(n_subjects.min(1024) as usize);
    for s in 0..n_subjects {
        let id_len = r.u32("subject id length")? as usize;
        let id = std::str::from_utf8(r.take(id_len, "subject id")?)
            .map_err(|_| Error::Format(format!("subject {s}: id is not UTF-8")))?
            .to_string();
        let n = r.u32("N")? as usize;
        let c = r.u32("C")? as usize;
        let t = r.u32("T")? as usize;
        let k = r.u32("n_classes")? as usize;
        let numel = n
            .checked_mul(c)
            .and_then(|v| v.checked_mul(t))
            .ok_or_else(|| Error::Format(format!("subject {id}: sample dimensions overflow")))?;
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Format("size overflow".into()))?, "samples")?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let raw = r.take(n * 4, "labels")?;
        let mut labels = Vec::with_capacity(n);
        for b in raw.chunks_exact(4) {
            let y = i32::from_le_bytes([b[0], b[1], b[2], b[3]]);
            if y < 0 {
                return Err(Error::Format(format!("subject {id}: negative label {y}")));
            }
            labels.push(y as usize);
        }
        let samples = Tensor::new(vec![n, c, t], data).map_err(|e| Error::Format(format!("subject {id}: {e}")))?;
        out.push(SubjectDataset::new(id, samples, labels, k).map_err(|e| Error::Format(e.to_string()))?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!("{} trailing bytes after last subject", bytes.len() - r.pos)));
    }
    Ok(out)
}

pub fn save_datasets(path: &Path, datasets: &[SubjectDataset]) -> Result<()> {
    fs::write(path, encode(datasets)).map_err(|e| Error::io(path, e))
}

pub fn load_datasets(path: &Path) -> Result<Vec<SubjectDataset>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| e.context(format!("reading {}", path.display())))
}

pub fn save_dataset(path: &Path, dataset: &SubjectDataset) -> Result<()> {
    save_datasets(path, std::slice::from_ref(dataset))
}

/// Loads a file that must contain exactly one subject.
pub fn load_dataset(path: &Path) -> Result<SubjectDataset> {
    let mut all = load_datasets(path)?;
    if all.len() != 1 {
        return Err(Error::Format(format!("{} holds {} subjects, expected 1", path.display(), all.len())));
    }
    Ok(all.remove(0))
}

/// Writes `subject_id,index,label` rows for inspection.
pub fn export_labels_csv(path: &Path, datasets: &[SubjectDataset]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut text = String::from("subject_id,index,label\n");
    for d in datasets {
        for (i, y) in d.labels().iter().enumerate() {
            text.push_str(&format!("{},{i},{y}\n", d.subject_id));
        }
    }
    f.write_all(text.as_bytes()).map_err(|e| Error::io(path, e))
}
