//! Embedding datasets: in-memory types, the `PTPS` binary container, and
//! grouping of flat record lists into ordered task streams.
//!
//! File layout (little-endian):
//!
//! ```text
//! "PTPS" | u32 version=1 | u32 d | u64 n_records | u32 n_classes
//! n_classes × { u32 class_id | u16 name_len | name (UTF-8) | d × f32 token }
//! n_records × { u32 class_id | u32 domain_id | u8 split (0 train, 1 test) | d × f32 vector }
//! ```
//!
//! Values are stored as `f32` and promoted to `f64` on load; every vector is
//! renormalized after promotion.

mod synth;

pub use synth::{gen_synthetic, StreamMode, SynthConfig};

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{norm, unit};

pub const DATASET_MAGIC: &[u8; 4] = b"PTPS";
pub const DATASET_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn to_byte(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub class_id: u32,
    pub domain_id: u32,
    pub split: Split,
    pub vector: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassToken {
    pub name: String,
    pub token: Vec<f64>,
}

/// Class-name token embeddings keyed by class id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClassTokenTable {
    entries: BTreeMap<u32, ClassToken>,
}

impl ClassTokenTable {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, class_id: u32, name: impl Into<String>, token: Vec<f64>) {
        self.entries.insert(
            class_id,
            ClassToken {
                name: name.into(),
                token,
            },
        );
    }

    pub fn get(&self, class_id: u32) -> Result<&ClassToken> {
        self.entries
            .get(&class_id)
            .ok_or(Error::MissingToken(class_id))
    }

    pub fn token(&self, class_id: u32) -> Result<&[f64]> {
        self.get(class_id).map(|t| t.token.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Entries in ascending class-id order.
    pub fn iter(&self) -> impl Iterator<Item = (u32, &ClassToken)> {
        self.entries.iter().map(|(&id, t)| (id, t))
    }

    /// Merges `other` into `self`; entries in `other` win on conflict.
    pub fn extend(&mut self, other: &ClassTokenTable) {
        for (id, t) in other.iter() {
            self.entries.insert(id, t.clone());
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Dataset {
    pub records: Vec<EmbeddingRecord>,
    pub tokens: ClassTokenTable,
}

impl Dataset {
    /// Embedding dimension, or `None` for a dataset with neither records nor tokens.
    pub fn dim(&self) -> Option<usize> {
        self.records
            .first()
            .map(|r| r.vector.len())
            .or_else(|| self.tokens.iter().next().map(|(_, t)| t.token.len()))
    }
}

pub fn write_dataset(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(dataset)?)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let bytes = fs::read(path)?;
    decode_dataset(&bytes)
}

pub fn encode_dataset(dataset: &Dataset) -> Result<Vec<u8>> {
    let d = dataset.dim().unwrap_or(0);
    for (id, t) in dataset.tokens.iter() {
        if t.token.len() != d {
            return Err(Error::Shape(format!(
                "token for class {id} has dimension {}, expected {d}",
                t.token.len()
            )));
        }
    }
    if let Some(r) = dataset.records.iter().find(|r| r.vector.len() != d) {
        return Err(Error::Shape(format!(
            "record of class {} has dimension {}, expected {d}",
            r.class_id,
            r.vector.len()
        )));
    }

    let mut out = Vec::with_capacity(24 + dataset.records.len() * (9 + 4 * d));
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.extend_from_slice(&(d as u32).to_le_bytes());
    out.extend_from_slice(&(dataset.records.len() as u64).to_le_bytes());
    out.extend_from_slice(&(dataset.tokens.len() as u32).to_le_bytes());

    for (id, t) in dataset.tokens.iter() {
        let name = t.name.as_bytes();
        let name_len = u16::try_from(name.len())
            .map_err(|_| Error::Config(format!("class name for {id} exceeds 65535 bytes")))?;
        out.extend_from_slice(&id.to_le_bytes());
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(name);
        put_f32s(&mut out, &t.token);
    }
    for r in &dataset.records {
        out.extend_from_slice(&r.class_id.to_le_bytes());
        out.extend_from_slice(&r.domain_id.to_le_bytes());
        out.push(r.split.to_byte());
        put_f32s(&mut out, &r.vector);
    }
    Ok(out)
}

fn put_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        out.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

/// Little-endian cursor that reports the offset of whatever it failed on.
pub(crate) struct ByteCursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> ByteCursor<'a> {
    pub(crate) fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub(crate) fn offset(&self) -> u64 {
        self.pos as u64
    }

    pub(crate) fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(
                self.pos as u64,
                format!(
                    "truncated {what}: need {n} bytes, {} left",
                    self.bytes.len() - self.pos
                ),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub(crate) fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    pub(crate) fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().unwrap()))
    }

    pub(crate) fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    pub(crate) fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    pub(crate) fn f32s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 4, what)?;
        Ok(raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect())
    }

    pub(crate) fn f64s(&mut self, n: usize, what: &str) -> Result<Vec<f64>> {
        let raw = self.take(n * 8, what)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }

    pub(crate) fn expect_magic(&mut self, magic: &[u8; 4]) -> Result<()> {
        let got = self.take(4, "magic")?;
        if got != magic {
            return Err(Error::format(
                0,
                format!(
                    "bad magic {:?}, expected {:?}",
                    String::from_utf8_lossy(got),
                    String::from_utf8_lossy(magic)
                ),
            ));
        }
        Ok(())
    }

    pub(crate) fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::format(
                self.pos as u64,
                format!("{} trailing bytes", self.bytes.len() - self.pos),
            ));
        }
        Ok(())
    }
}

fn renormalized(v: Vec<f64>, offset: u64) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Ok(v);
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::format(offset, "non-finite vector entry"));
    }
    unit(&v)
        .map(|(u, _)| u)
        .map_err(|_| Error::format(offset, format!("vector norm {:e} is zero", norm(&v))))
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut cur = ByteCursor::new(bytes);
    cur.expect_magic(DATASET_MAGIC)?;
    let at = cur.offset();
    let version = cur.u32("version")?;
    if version != DATASET_VERSION {
        return Err(Error::format(at, format!("unsupported version {version}")));
    }
    let d = cur.u32("dimension")? as usize;
    let n_records = cur.u64("record count")?;
    let n_classes = cur.u32("class count")?;

    let mut tokens = ClassTokenTable::new();
    for _ in 0..n_classes {
        let at = cur.offset();
        let id = cur.u32("class id")?;
        let len = cur.u16("name length")? as usize;
        let name_at = cur.offset();
        let name = std::str::from_utf8(cur.take(len, "class name")?)
            .map_err(|e| Error::format(name_at, format!("class name is not UTF-8: {e}")))?
            .to_string();
        let tok_at = cur.offset();
        let token = renormalized(cur.f32s(d, "class token")?, tok_at)?;
        if tokens.get(id).is_ok() {
            return Err(Error::format(at, format!("duplicate class id {id}")));
        }
        tokens.insert(id, name, token);
    }

    let record_size = 9 + 4 * d as u64;
    let remaining = (bytes.len() as u64).saturating_sub(cur.offset());
    if n_records.saturating_mul(record_size) > remaining {
        return Err(Error::format(
            cur.offset(),
            format!("header claims {n_records} records but only {remaining} bytes remain"),
        ));
    }
    let mut records = Vec::with_capacity(n_records as usize);
    for _ in 0..n_records {
        let class_id = cur.u32("record class id")?;
        let domain_id = cur.u32("record domain id")?;
        let at = cur.offset();
        let split = match cur.u8("split")? {
            0 => Split::Train,
            1 => Split::Test,
            other => return Err(Error::format(at, format!("invalid split byte {other}"))),
        };
        let vec_at = cur.offset();
        let vector = renormalized(cur.f32s(d, "record vector")?, vec_at)?;
        records.push(EmbeddingRecord {
            class_id,
            domain_id,
            split,
            vector,
        });
    }
    cur.finish()?;
    Ok(Dataset { records, tokens })
}

/// One task of a continual stream.
#[derive(Debug, Clone, PartialEq)]
pub struct Task {
    pub task_id: usize,
    /// Classes appearing for the first time in this task, ascending.
    pub new_class_ids: Vec<u32>,
    /// Every class with training data in this task, ascending.
    pub class_ids: Vec<u32>,
    pub domain_ids: Vec<u32>,
    pub train: Vec<EmbeddingRecord>,
    pub test: Vec<EmbeddingRecord>,
}

impl Task {
    /// Classes of this task that were introduced by an earlier task.
    pub fn recurring_class_ids(&self) -> Vec<u32> {
        let new: BTreeSet<u32> = self.new_class_ids.iter().copied().collect();
        self.class_ids
            .iter()
            .copied()
            .filter(|c| !new.contains(c))
            .collect()
    }
}

/// Ordered sequence of tasks sharing one class-token table.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct TaskStream {
    pub d: usize,
    pub tasks: Vec<Task>,
    pub tokens: ClassTokenTable,
}

impl TaskStream {
    /// Groups records into tasks by ascending `domain_id`; each distinct
    /// domain becomes one task.
    pub fn from_dataset(dataset: Dataset) -> Result<Self> {
        let d = dataset.dim().unwrap_or(0);
        let mut by_domain: BTreeMap<u32, (Vec<EmbeddingRecord>, Vec<EmbeddingRecord>)> =
            BTreeMap::new();
        for r in dataset.records {
            let entry = by_domain.entry(r.domain_id).or_default();
            match r.split {
                Split::Train => entry.0.push(r),
                Split::Test => entry.1.push(r),
            }
        }
        let mut seen = BTreeSet::new();
        let mut tasks = Vec::with_capacity(by_domain.len());
        for (task_id, (domain, (train, test))) in by_domain.into_iter().enumerate() {
            let classes: BTreeSet<u32> = train.iter().map(|r| r.class_id).collect();
            let new_class_ids: Vec<u32> = classes
                .iter()
                .copied()
                .filter(|c| !seen.contains(c))
                .collect();
            seen.extend(classes.iter().copied());
            tasks.push(Task {
                task_id,
                new_class_ids,
                class_ids: classes.into_iter().collect(),
                domain_ids: vec![domain],
                train,
                test,
            });
        }
        Ok(Self {
            d,
            tasks,
            tokens: dataset.tokens,
        })
    }

    /// Flattens the stream back into records, task order preserved.
    pub fn to_dataset(&self) -> Dataset {
        let records = self
            .tasks
            .iter()
            .flat_map(|t| t.train.iter().chain(&t.test).cloned())
            .collect();
        Dataset {
            records,
            tokens: self.tokens.clone(),
        }
    }

    /// Every class id that appears with training data anywhere in the stream.
    pub fn class_ids(&self) -> BTreeSet<u32> {
        self.tasks
            .iter()
            .flat_map(|t| t.class_ids.iter().copied())
            .collect()
    }

    /// Checks the class-incremental contract: no class trains in two tasks.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for t in &self.tasks {
            for &c in &t.class_ids {
                if !seen.insert(c) {
                    return Err(Error::Config(format!(
                        "class {c} appears again in task {}; class-incremental streams need disjoint tasks",
                        t.task_id
                    )));
                }
            }
        }
        Ok(())
    }

    /// Splits the stream into `(tasks[..n], tasks[n..])`, renumbering the second half.
    pub fn split_at(&self, n: usize) -> (TaskStream, TaskStream) {
        let n = n.min(self.tasks.len());
        let first = TaskStream {
            d: self.d,
            tasks: self.tasks[..n].to_vec(),
            tokens: self.tokens.clone(),
        };
        let mut rest: Vec<Task> = self.tasks[n..].to_vec();
        let mut seen: BTreeSet<u32> = BTreeSet::new();
        for (i, t) in rest.iter_mut().enumerate() {
            t.task_id = i;
            t.new_class_ids = t
                .class_ids
                .iter()
                .copied()
                .filter(|c| !seen.contains(c))
                .collect();
            seen.extend(t.class_ids.iter().copied());
        }
        let second = TaskStream {
            d: self.d,
            tasks: rest,
            tokens: self.tokens.clone(),
        };
        (first, second)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Dataset {
        let mut tokens = ClassTokenTable::new();
        tokens.insert(0, "zero", vec![1.0, 0.0, 0.0, 0.0]);
        tokens.insert(7, "seven", vec![0.0, 0.6, 0.8, 0.0]);
        let records = vec![
            EmbeddingRecord {
                class_id: 0,
                domain_id: 0,
                split: Split::Train,
                vector: vec![0.5, 0.5, 0.5, 0.5],
            },
            EmbeddingRecord {
                class_id: 7,
                domain_id: 1,
                split: Split::Test,
                vector: vec![0.1, 0.2, 0.3, (1.0f64 - 0.14).sqrt()],
            },
            EmbeddingRecord {
                class_id: 7,
                domain_id: 1,
                split: Split::Train,
                vector: vec![0.0, 0.0, 1.0, 0.0],
            },
        ];
        Dataset { records, tokens }
    }

    #[test]
    fn empty_round_trip() {
        let bytes = encode_dataset(&Dataset::default()).unwrap();
        assert_eq!(decode_dataset(&bytes).unwrap(), Dataset::default());
    }

    #[test]
    fn three_record_round_trip() {
        let ds = sample();
        let back = decode_dataset(&encode_dataset(&ds).unwrap()).unwrap();
        assert_eq!(back.records.len(), 3);
        for (a, b) in ds.records.iter().zip(&back.records) {
            assert_eq!(
                (a.class_id, a.domain_id, a.split),
                (b.class_id, b.domain_id, b.split)
            );
            for (x, y) in a.vector.iter().zip(&b.vector) {
                assert!((x - y).abs() < 1e-6);
            }
        }
        assert_eq!(back.tokens.get(7).unwrap().name, "seven");
    }

    #[test]
    fn corrupted_magic_is_rejected() {
        let mut bytes = encode_dataset(&sample()).unwrap();
        bytes[1] = b'X';
        match decode_dataset(&bytes) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn truncation_reports_offset() {
        let bytes = encode_dataset(&sample()).unwrap();
        let cut = &bytes[..bytes.len() - 3];
        assert!(matches!(decode_dataset(cut), Err(Error::Format { .. })));

        let mut bad_version = bytes.clone();
        bad_version[4] = 9;
        match decode_dataset(&bad_version) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 4),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn mismatched_dimension_is_rejected() {
        let mut ds = sample();
        ds.records[1].vector.push(0.0);
        assert!(matches!(encode_dataset(&ds), Err(Error::Shape(_))));
    }

    #[test]
    fn stream_grouping_by_domain() {
        let stream = TaskStream::from_dataset(sample()).unwrap();
        assert_eq!(stream.tasks.len(), 2);
        assert_eq!(stream.tasks[0].new_class_ids, vec![0]);
        assert_eq!(stream.tasks[1].new_class_ids, vec![7]);
        assert_eq!(stream.tasks[1].test.len(), 1);
        stream.check_disjoint().unwrap();
    }
}
