//! Bit-packed binary codes and exact Hamming-distance search.
//!
//! Bit `j` of a code lives in word `j / 64` at position `j % 64`
//! (least-significant first). A set bit stands for `+1`, a clear bit for
//! `-1`; padding bits above `K` are always zero.

use std::collections::HashSet;
use std::path::Path;

use crate::dataset::MultiLabelDataset;
use crate::error::{Error, Result};
use crate::model::HashModel;

#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct PackedCode {
    words: Vec<u64>,
    bits: usize,
}

fn words_for(bits: usize) -> usize {
    bits.div_ceil(64)
}

impl PackedCode {
    /// Packs a `{-1, +1}` code.
    pub fn pack(code: &[i8]) -> Result<Self> {
        if code.is_empty() {
            return Err(Error::InvalidArgument("cannot pack an empty code".into()));
        }
        let mut words = vec![0u64; words_for(code.len())];
        for (j, &v) in code.iter().enumerate() {
            match v {
                1 => words[j / 64] |= 1 << (j % 64),
                -1 => {}
                other => {
                    return Err(Error::InvalidArgument(format!(
                        "code value {other} at bit {j} is not -1 or +1"
                    )))
                }
            }
        }
        Ok(PackedCode {
            words,
            bits: code.len(),
        })
    }

    /// Packs the signs of real values, `sign(0) = +1`.
    pub fn from_signs(values: &[f64]) -> Result<Self> {
        let code: Vec<i8> = values.iter().map(|&v| crate::model::sign(v)).collect();
        PackedCode::pack(&code)
    }

    pub fn from_words(words: Vec<u64>, bits: usize) -> Result<Self> {
        if bits == 0 || words.len() != words_for(bits) {
            return Err(Error::Shape(format!(
                "{} words cannot hold a {bits}-bit code",
                words.len()
            )));
        }
        if !bits.is_multiple_of(64) && words[words.len() - 1] >> (bits % 64) != 0 {
            return Err(Error::Format("nonzero padding bits".into()));
        }
        Ok(PackedCode { words, bits })
    }

    pub fn unpack(&self) -> Vec<i8> {
        (0..self.bits)
            .map(|j| if self.words[j / 64] >> (j % 64) & 1 == 1 { 1 } else { -1 })
            .collect()
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    /// `ceil(K/8)` bytes, least-significant bit first.
    pub fn to_bytes(&self) -> Vec<u8> {
        let n = self.bits.div_ceil(8);
        self.words
            .iter()
            .flat_map(|w| w.to_le_bytes())
            .take(n)
            .collect()
    }

    pub fn from_bytes(bytes: &[u8], bits: usize) -> Result<Self> {
        if bits == 0 || bytes.len() != bits.div_ceil(8) {
            return Err(Error::Shape(format!(
                "{} bytes cannot hold a {bits}-bit code",
                bytes.len()
            )));
        }
        let words = bytes
            .chunks(8)
            .map(|c| {
                let mut buf = [0u8; 8];
                buf[..c.len()].copy_from_slice(c);
                u64::from_le_bytes(buf)
            })
            .collect();
        PackedCode::from_words(words, bits)
    }
}

#[inline]
fn popcount_distance(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// Number of differing bits.
pub fn hamming_distance(a: &PackedCode, b: &PackedCode) -> Result<u32> {
    if a.bits != b.bits {
        return Err(Error::BitsMismatch {
            left: a.bits,
            right: b.bits,
        });
    }
    Ok(popcount_distance(&a.words, &b.words))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Neighbor {
    pub id: u64,
    pub distance: u32,
}

/// Immutable-after-build store of packed codes in insertion order.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CodeDatabase {
    bits: usize,
    words_per_code: usize,
    ids: Vec<u64>,
    words: Vec<u64>,
    seen: HashSet<u64>,
}

impl CodeDatabase {
    pub fn new(bits: usize) -> Result<Self> {
        if bits == 0 {
            return Err(Error::InvalidArgument("code length must be positive".into()));
        }
        Ok(CodeDatabase {
            bits,
            words_per_code: words_for(bits),
            ids: Vec::new(),
            words: Vec::new(),
            seen: HashSet::new(),
        })
    }

    pub fn from_codes(bits: usize, entries: impl IntoIterator<Item = (u64, PackedCode)>) -> Result<Self> {
        let mut db = CodeDatabase::new(bits)?;
        for (id, code) in entries {
            db.push(id, &code)?;
        }
        Ok(db)
    }

    pub fn push(&mut self, id: u64, code: &PackedCode) -> Result<()> {
        if code.bits != self.bits {
            return Err(Error::BitsMismatch {
                left: self.bits,
                right: code.bits,
            });
        }
        if !self.seen.insert(id) {
            return Err(Error::DuplicateId { id });
        }
        self.ids.push(id);
        self.words.extend_from_slice(&code.words);
        Ok(())
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn ids(&self) -> &[u64] {
        &self.ids
    }

    pub fn contains_id(&self, id: u64) -> bool {
        self.seen.contains(&id)
    }

    pub fn code(&self, index: usize) -> PackedCode {
        let w = self.words_per_code;
        PackedCode {
            words: self.words[index * w..(index + 1) * w].to_vec(),
            bits: self.bits,
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (u64, PackedCode)> + '_ {
        (0..self.len()).map(|i| (self.ids[i], self.code(i)))
    }

    fn distances(&self, query: &PackedCode) -> Result<Vec<u32>> {
        if query.bits != self.bits {
            return Err(Error::BitsMismatch {
                left: self.bits,
                right: query.bits,
            });
        }
        Ok(self
            .words
            .chunks_exact(self.words_per_code)
            .map(|c| popcount_distance(c, &query.words))
            .collect())
    }

    /// Database positions ordered by distance, ties by insertion order.
    /// Counting sort over the `K + 1` possible distances.
    fn ranked_positions(&self, query: &PackedCode, limit: usize) -> Result<Vec<(usize, u32)>> {
        let dist = self.distances(query)?;
        let mut counts = vec![0usize; self.bits + 2];
        for &d in &dist {
            counts[d as usize + 1] += 1;
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let limit = limit.min(dist.len());
        let mut order = vec![(0usize, 0u32); dist.len()];
        for (pos, &d) in dist.iter().enumerate() {
            let slot = &mut counts[d as usize];
            order[*slot] = (pos, d);
            *slot += 1;
        }
        order.truncate(limit);
        Ok(order)
    }

    /// The `k` nearest codes, ascending by distance, ties by insertion order.
    pub fn search_topk(&self, query: &PackedCode, k: usize) -> Result<Vec<Neighbor>> {
        Ok(self
            .ranked_positions(query, k)?
            .into_iter()
            .map(|(pos, distance)| Neighbor {
                id: self.ids[pos],
                distance,
            })
            .collect())
    }

    pub fn rank_all(&self, query: &PackedCode) -> Result<Vec<Neighbor>> {
        self.search_topk(query, self.len())
    }

    /// Like [`rank_all`](Self::rank_all), returning database positions.
    pub fn rank_positions(&self, query: &PackedCode) -> Result<Vec<usize>> {
        Ok(self
            .ranked_positions(query, self.len())?
            .into_iter()
            .map(|(pos, _)| pos)
            .collect())
    }
}

const CODE_MAGIC: &[u8; 8] = b"DSRHCODE";
const CODE_VERSION: u16 = 1;

/// Layout (little-endian): magic, version u16, K u32, N u64, then N records of
/// id u64 followed by `ceil(K/8)` code bytes.
pub fn encode_codes(db: &CodeDatabase) -> Vec<u8> {
    let code_bytes = db.bits.div_ceil(8);
    let mut out = Vec::with_capacity(22 + db.len() * (8 + code_bytes));
    out.extend_from_slice(CODE_MAGIC);
    out.extend_from_slice(&CODE_VERSION.to_le_bytes());
    out.extend_from_slice(&(db.bits as u32).to_le_bytes());
    out.extend_from_slice(&(db.len() as u64).to_le_bytes());
    for (id, code) in db.iter() {
        out.extend_from_slice(&id.to_le_bytes());
        out.extend_from_slice(&code.to_bytes());
    }
    out
}

pub fn decode_codes(bytes: &[u8]) -> Result<CodeDatabase> {
    let truncated = || Error::Format("truncated code file".into());
    if bytes.len() < 22 {
        return Err(truncated());
    }
    if &bytes[..8] != CODE_MAGIC {
        return Err(Error::Format("not a code file (bad magic)".into()));
    }
    let version = u16::from_le_bytes(bytes[8..10].try_into().unwrap());
    if version != CODE_VERSION {
        return Err(Error::Format(format!("unsupported code file version {version}")));
    }
    let bits = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    if bits == 0 {
        return Err(Error::Format("code length K=0".into()));
    }
    let n = u64::from_le_bytes(bytes[14..22].try_into().unwrap());
    let record = 8 + bits.div_ceil(8);
    let body = &bytes[22..];
    let expected = usize::try_from(n)
        .ok()
        .and_then(|n| n.checked_mul(record))
        .ok_or_else(truncated)?;
    if body.len() < expected {
        return Err(truncated());
    }
    if body.len() > expected {
        return Err(Error::Format(format!(
            "{} trailing bytes after {n} records",
            body.len() - expected
        )));
    }
    let mut db = CodeDatabase::new(bits)?;
    for rec in body.chunks_exact(record) {
        let id = u64::from_le_bytes(rec[..8].try_into().unwrap());
        db.push(id, &PackedCode::from_bytes(&rec[8..], bits)?)?;
    }
    Ok(db)
}

pub fn save_codes(db: &CodeDatabase, path: impl AsRef<Path>) -> Result<()> {
    crate::io::write_atomic(path.as_ref(), |w| w.write_all(&encode_codes(db)))
}

pub fn load_codes(path: impl AsRef<Path>) -> Result<CodeDatabase> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_codes(&bytes)
}

/// Binary codes of every point in `ds`, keyed by point id, in dataset order.
pub fn encode_dataset(model: &HashModel, ds: &MultiLabelDataset) -> Result<CodeDatabase> {
    let mut db = CodeDatabase::new(model.bits())?;
    for chunk in ds.points.chunks(ENCODE_CHUNK) {
        let feats: Vec<&[f64]> = chunk.iter().map(|p| p.features.as_slice()).collect();
        for (p, code) in chunk.iter().zip(model.forward_binary(&feats)?) {
            db.push(p.id, &PackedCode::pack(&code)?)?;
        }
    }
    Ok(db)
}

const ENCODE_CHUNK: usize = 512;
