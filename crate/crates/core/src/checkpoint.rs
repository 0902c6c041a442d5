//! Lossless checkpoint storage.
//!
//! On-disk layout: `<root>/<role>/<k>/<l>/<j>/<gen>.ckpt`, one file per
//! record. All integers and floats are little-endian:
//!
//! ```text
//! magic        8 bytes  b"PRGCKPT\0"
//! version      u16      1
//! role         u8       0 = teacher, 1 = student
//! constituent  u32
//! chunk        u32
//! slice        u32
//! generation   u32
//! arch kind    u8       0 = softmax_linear, 1 = one_hidden_layer
//! feature_dim  u32
//! num_classes  u32
//! hidden_units u32      0 for softmax_linear
//! rng_cursor   u64
//! provenance   u32 count, then count × u32 teacher indices
//! param count  u64
//! params       count × f64 (IEEE-754 bit patterns)
//! ```
//!
//! Overwriting a slot writes a new generation; older generations stay on
//! disk until [`CheckpointStore::prune`] is called. A superseded generation
//! may still carry the influence of removed data, so operators who need
//! removal at rest should prune after unlearning.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::model::{ArchKind, ModelArch, ModelState};
use crate::{Error, Result};

pub const MAGIC: &[u8; 8] = b"PRGCKPT\0";
pub const FORMAT_VERSION: u16 = 1;
const EXTENSION: &str = "ckpt";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Teacher,
    Student,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Teacher => "teacher",
            Role::Student => "student",
        }
    }

    fn code(self) -> u8 {
        match self {
            Role::Teacher => 0,
            Role::Student => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Role::Teacher),
            1 => Some(Role::Student),
            _ => None,
        }
    }

    fn from_name(s: &str) -> Option<Self> {
        match s {
            "teacher" => Some(Role::Teacher),
            "student" => Some(Role::Student),
            _ => None,
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// A checkpoint position independent of generation: the state after
/// training slice `slice` of chunk `chunk` of constituent `constituent`.
/// Indices are 0-based. Teachers always use chunk 0.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Slot {
    pub role: Role,
    pub constituent: usize,
    pub chunk: usize,
    pub slice: usize,
}

impl Slot {
    pub fn teacher(member: usize, slice: usize) -> Self {
        Slot {
            role: Role::Teacher,
            constituent: member,
            chunk: 0,
            slice,
        }
    }

    pub fn student(constituent: usize, chunk: usize, slice: usize) -> Self {
        Slot {
            role: Role::Student,
            constituent,
            chunk,
            slice,
        }
    }

    pub fn at(self, generation: u32) -> CheckpointKey {
        CheckpointKey { slot: self, generation }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct CheckpointKey {
    #[serde(flatten)]
    pub slot: Slot,
    /// Starts at 1 and increases each time the slot is overwritten.
    pub generation: u32,
}

impl fmt::Display for CheckpointKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = &self.slot;
        write!(
            f,
            "{}/{}/{}/{}@{}",
            s.role, s.constituent, s.chunk, s.slice, self.generation
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointRecord {
    pub key: CheckpointKey,
    pub state: ModelState,
    /// Teacher indices whose soft labels had been seen by this student state.
    pub provenance: Vec<u32>,
}

impl CheckpointRecord {
    pub fn byte_size(&self) -> u64 {
        encoded_len(&self.state, self.provenance.len()) as u64
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Receipt {
    pub key: CheckpointKey,
    pub byte_size: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RoleUsage {
    pub records: usize,
    pub bytes: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageReport {
    pub teacher: RoleUsage,
    pub student: RoleUsage,
    pub total_bytes: u64,
}

const HEADER_LEN: usize = 8 + 2 + 1 + 4 * 4 + 1 + 4 * 3 + 8;

fn encoded_len(state: &ModelState, provenance: usize) -> usize {
    HEADER_LEN + 4 + 4 * provenance + 8 + 8 * state.params.len()
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Checkpoint(format!("{what} {v} does not fit in u32")))
}

pub fn encode(record: &CheckpointRecord) -> Result<Vec<u8>> {
    let CheckpointRecord { key, state, provenance } = record;
    let arch = &state.arch;
    if state.params.len() != arch.param_count() {
        return Err(Error::Checkpoint(format!(
            "state has {} params, architecture implies {}",
            state.params.len(),
            arch.param_count()
        )));
    }
    let mut buf = Vec::with_capacity(encoded_len(state, provenance.len()));
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.push(key.slot.role.code());
    for v in [key.slot.constituent, key.slot.chunk, key.slot.slice] {
        buf.extend_from_slice(&to_u32(v, "index")?.to_le_bytes());
    }
    buf.extend_from_slice(&key.generation.to_le_bytes());
    let (kind, hidden) = match arch.kind {
        ArchKind::SoftmaxLinear => (0u8, 0usize),
        ArchKind::OneHiddenLayer { hidden_units } => (1u8, hidden_units),
    };
    buf.push(kind);
    for v in [arch.feature_dim, arch.num_classes, hidden] {
        buf.extend_from_slice(&to_u32(v, "dimension")?.to_le_bytes());
    }
    buf.extend_from_slice(&state.rng_cursor.to_le_bytes());
    buf.extend_from_slice(&to_u32(provenance.len(), "provenance length")?.to_le_bytes());
    for t in provenance {
        buf.extend_from_slice(&t.to_le_bytes());
    }
    buf.extend_from_slice(&(state.params.len() as u64).to_le_bytes());
    for p in &state.params {
        buf.extend_from_slice(&p.to_le_bytes());
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint("truncated record".into()))?;
        let out = &self.buf[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<CheckpointRecord> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("bad magic".into()));
    }
    let version = r.u16()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let role = Role::from_code(r.u8()?).ok_or_else(|| Error::Checkpoint("bad role".into()))?;
    let constituent = r.u32()? as usize;
    let chunk = r.u32()? as usize;
    let slice = r.u32()? as usize;
    let generation = r.u32()?;
    let kind_code = r.u8()?;
    let feature_dim = r.u32()? as usize;
    let num_classes = r.u32()? as usize;
    let hidden = r.u32()? as usize;
    let kind = match kind_code {
        0 => ArchKind::SoftmaxLinear,
        1 => ArchKind::OneHiddenLayer { hidden_units: hidden },
        other => return Err(Error::Checkpoint(format!("bad arch kind {other}"))),
    };
    let arch = ModelArch { kind, feature_dim, num_classes };
    let rng_cursor = r.u64()?;
    let n_prov = r.u32()? as usize;
    let provenance = (0..n_prov).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
    let n_params = r.u64()? as usize;
    if n_params != arch.param_count() {
        return Err(Error::Checkpoint(format!(
            "record holds {n_params} params, architecture implies {}",
            arch.param_count()
        )));
    }
    let raw = r.take(n_params.checked_mul(8).ok_or_else(|| Error::Checkpoint("overflow".into()))?)?;
    let params = raw
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
        .collect();
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after record".into()));
    }
    Ok(CheckpointRecord {
        key: Slot { role, constituent, chunk, slice }.at(generation),
        state: ModelState { arch, params, rng_cursor },
        provenance,
    })
}

enum Backend {
    Memory(Mutex<HashMap<CheckpointKey, Vec<u8>>>),
    Directory(PathBuf),
}

/// Generation → byte size for every stored record of one slot.
type SlotIndex = BTreeMap<Slot, BTreeMap<u32, u64>>;

/// Checkpoint store backed by memory or by a directory tree.
///
/// Saves take `&self`: a single index lock serialises writers, so
/// constituents may save concurrently.
pub struct CheckpointStore {
    backend: Backend,
    index: Mutex<SlotIndex>,
}

impl fmt::Debug for CheckpointStore {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match &self.backend {
            Backend::Memory(_) => "memory".to_string(),
            Backend::Directory(p) => p.display().to_string(),
        };
        f.debug_struct("CheckpointStore").field("backend", &kind).finish()
    }
}

impl CheckpointStore {
    pub fn in_memory() -> Self {
        CheckpointStore {
            backend: Backend::Memory(Mutex::new(HashMap::new())),
            index: Mutex::new(BTreeMap::new()),
        }
    }

    /// Opens (creating if needed) a directory store and rebuilds its index
    /// from the files present.
    pub fn open(root: impl Into<PathBuf>) -> Result<Self> {
        let root = root.into();
        fs::create_dir_all(&root).map_err(|e| Error::io(&root, e))?;
        let mut index: SlotIndex = BTreeMap::new();
        for entry in walkdir::WalkDir::new(&root).min_depth(5).max_depth(5) {
            let entry = entry.map_err(|e| {
                Error::Checkpoint(format!("walking {}: {e}", root.display()))
            })?;
            if !entry.file_type().is_file() {
                continue;
            }
            let Some(key) = parse_path(&root, entry.path()) else {
                continue;
            };
            let size = entry
                .metadata()
                .map_err(|e| Error::Checkpoint(format!("stat {}: {e}", entry.path().display())))?
                .len();
            index.entry(key.slot).or_default().insert(key.generation, size);
        }
        Ok(CheckpointStore {
            backend: Backend::Directory(root),
            index: Mutex::new(index),
        })
    }

    pub fn root(&self) -> Option<&Path> {
        match &self.backend {
            Backend::Directory(p) => Some(p),
            Backend::Memory(_) => None,
        }
    }

    pub fn path_for(root: &Path, key: &CheckpointKey) -> PathBuf {
        let s = &key.slot;
        root.join(s.role.as_str())
            .join(s.constituent.to_string())
            .join(s.chunk.to_string())
            .join(s.slice.to_string())
            .join(format!("{}.{EXTENSION}", key.generation))
    }

    /// Writes a new generation of `slot`.
    pub fn save(&self, slot: Slot, state: &ModelState, provenance: &[u32]) -> Result<Receipt> {
        let mut index = self.index.lock().expect("checkpoint index poisoned");
        let generations = index.entry(slot).or_default();
        let generation = generations.keys().next_back().map_or(1, |g| g + 1);
        let key = slot.at(generation);
        let bytes = encode(&CheckpointRecord {
            key,
            state: state.clone(),
            provenance: provenance.to_vec(),
        })?;
        match &self.backend {
            Backend::Memory(map) => {
                map.lock().expect("memory store poisoned").insert(key, bytes.clone());
            }
            Backend::Directory(root) => {
                let path = Self::path_for(root, &key);
                let dir = path.parent().expect("checkpoint path has a parent");
                fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
                let tmp = path.with_extension("tmp");
                fs::write(&tmp, &bytes).map_err(|e| Error::io(&tmp, e))?;
                fs::rename(&tmp, &path).map_err(|e| Error::io(&path, e))?;
            }
        }
        let byte_size = bytes.len() as u64;
        generations.insert(generation, byte_size);
        Ok(Receipt { key, byte_size })
    }

    pub fn latest(&self, slot: Slot) -> Option<CheckpointKey> {
        let index = self.index.lock().expect("checkpoint index poisoned");
        index
            .get(&slot)
            .and_then(|g| g.keys().next_back())
            .map(|&g| slot.at(g))
    }

    /// Raw encoded bytes of a stored record.
    pub fn load_bytes(&self, key: &CheckpointKey) -> Result<Vec<u8>> {
        let known = {
            let index = self.index.lock().expect("checkpoint index poisoned");
            index
                .get(&key.slot)
                .is_some_and(|g| g.contains_key(&key.generation))
        };
        if !known {
            return Err(Error::NotFound(format!("checkpoint {key}")));
        }
        match &self.backend {
            Backend::Memory(map) => map
                .lock()
                .expect("memory store poisoned")
                .get(key)
                .cloned()
                .ok_or_else(|| Error::NotFound(format!("checkpoint {key}"))),
            Backend::Directory(root) => {
                let path = Self::path_for(root, key);
                fs::read(&path).map_err(|e| Error::io(&path, e))
            }
        }
    }

    pub fn load(&self, key: &CheckpointKey) -> Result<CheckpointRecord> {
        let record = decode(&self.load_bytes(key)?)?;
        if record.key != *key {
            return Err(Error::Checkpoint(format!(
                "record header {} does not match requested key {key}",
                record.key
            )));
        }
        Ok(record)
    }

    /// Loads `slot` at `generation`, or at its newest generation when `None`.
    pub fn load_slot(&self, slot: Slot, generation: Option<u32>) -> Result<CheckpointRecord> {
        let key = match generation {
            Some(g) => slot.at(g),
            None => self.latest(slot).ok_or_else(|| {
                Error::NotFound(format!(
                    "no checkpoint for {}/{}/{}/{}",
                    slot.role, slot.constituent, slot.chunk, slot.slice
                ))
            })?,
        };
        self.load(&key)
    }

    /// Slot → stored generations.
    pub fn generations(&self) -> BTreeMap<Slot, Vec<u32>> {
        let index = self.index.lock().expect("checkpoint index poisoned");
        index
            .iter()
            .map(|(s, g)| (*s, g.keys().copied().collect()))
            .collect()
    }

    pub fn storage_report(&self) -> StorageReport {
        let index = self.index.lock().expect("checkpoint index poisoned");
        let mut report = StorageReport::default();
        for (slot, gens) in index.iter() {
            let usage = match slot.role {
                Role::Teacher => &mut report.teacher,
                Role::Student => &mut report.student,
            };
            for size in gens.values() {
                usage.records += 1;
                usage.bytes += size;
            }
        }
        report.total_bytes = report.teacher.bytes + report.student.bytes;
        report
    }

    /// Drops every generation except the newest of each slot. Returns the
    /// number of records removed.
    pub fn prune(&self) -> Result<usize> {
        let mut index = self.index.lock().expect("checkpoint index poisoned");
        let mut removed = 0;
        for (slot, gens) in index.iter_mut() {
            let Some(&newest) = gens.keys().next_back() else {
                continue;
            };
            let stale: Vec<u32> = gens.keys().copied().filter(|&g| g != newest).collect();
            for g in stale {
                let key = slot.at(g);
                match &self.backend {
                    Backend::Memory(map) => {
                        map.lock().expect("memory store poisoned").remove(&key);
                    }
                    Backend::Directory(root) => {
                        let path = Self::path_for(root, &key);
                        fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
                    }
                }
                gens.remove(&g);
                removed += 1;
            }
        }
        Ok(removed)
    }
}

fn parse_path(root: &Path, path: &Path) -> Option<CheckpointKey> {
    if path.extension()? != EXTENSION {
        return None;
    }
    let rel = path.strip_prefix(root).ok()?;
    let parts: Vec<&str> = rel.iter().map(|p| p.to_str()).collect::<Option<_>>()?;
    let [role, k, l, j, file] = parts.as_slice() else {
        return None;
    };
    let generation = file.strip_suffix(&format!(".{EXTENSION}"))?.parse().ok()?;
    Some(
        Slot {
            role: Role::from_name(role)?,
            constituent: k.parse().ok()?,
            chunk: l.parse().ok()?,
            slice: j.parse().ok()?,
        }
        .at(generation),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::init_model;
    use proptest::prelude::*;

    fn state(seed: u64) -> ModelState {
        init_model(ModelArch::one_hidden_layer(3, 4, 2), seed).unwrap()
    }

    #[test]
    fn save_then_load_roundtrip() {
        let store = CheckpointStore::in_memory();
        let s = state(1);
        let r = store.save(Slot::student(0, 1, 2), &s, &[3, 1]).unwrap();
        assert_eq!(r.key.generation, 1);
        let rec = store.load(&r.key).unwrap();
        assert!(rec.state.bit_eq(&s));
        assert_eq!(rec.provenance, vec![3, 1]);
        assert_eq!(rec.byte_size(), r.byte_size);
    }

    #[test]
    fn overwrite_bumps_generation_and_keeps_old() {
        let store = CheckpointStore::in_memory();
        let slot = Slot::teacher(2, 0);
        store.save(slot, &state(1), &[]).unwrap();
        let r2 = store.save(slot, &state(2), &[]).unwrap();
        assert_eq!(r2.key.generation, 2);
        assert!(store.load_slot(slot, None).unwrap().state.bit_eq(&state(2)));
        assert!(store.load_slot(slot, Some(1)).unwrap().state.bit_eq(&state(1)));
        assert_eq!(store.prune().unwrap(), 1);
        assert!(matches!(store.load_slot(slot, Some(1)), Err(Error::NotFound(_))));
        assert!(store.load_slot(slot, Some(2)).is_ok());
    }

    #[test]
    fn missing_key_is_not_found() {
        let store = CheckpointStore::in_memory();
        assert!(matches!(
            store.load_slot(Slot::student(0, 0, 0), None),
            Err(Error::NotFound(_))
        ));
    }

    #[test]
    fn storage_report_sums_records() {
        let store = CheckpointStore::in_memory();
        assert_eq!(store.storage_report(), StorageReport::default());
        let mut sum = 0;
        for j in 0..3 {
            sum += store.save(Slot::teacher(0, j), &state(j as u64), &[]).unwrap().byte_size;
        }
        let sb = store.save(Slot::student(1, 0, 0), &state(9), &[0, 1, 2]).unwrap().byte_size;
        let report = store.storage_report();
        assert_eq!(report.teacher, RoleUsage { records: 3, bytes: sum });
        assert_eq!(report.student, RoleUsage { records: 1, bytes: sb });
        assert_eq!(report.total_bytes, sum + sb);
    }

    #[test]
    fn directory_store_reopens_and_matches_filesystem() {
        let dir = tempfile::tempdir().unwrap();
        let store = CheckpointStore::open(dir.path()).unwrap();
        store.save(Slot::teacher(0, 0), &state(1), &[]).unwrap();
        store.save(Slot::teacher(0, 0), &state(2), &[]).unwrap();
        store.save(Slot::student(3, 1, 0), &state(3), &[5]).unwrap();
        assert!(dir.path().join("teacher/0/0/0/2.ckpt").is_file());

        let fs_total: u64 = walkdir::WalkDir::new(dir.path())
            .into_iter()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_type().is_file())
            .map(|e| e.metadata().unwrap().len())
            .sum();
        assert_eq!(store.storage_report().total_bytes, fs_total);

        let reopened = CheckpointStore::open(dir.path()).unwrap();
        assert_eq!(reopened.generations(), store.generations());
        assert!(reopened
            .load_slot(Slot::student(3, 1, 0), None)
            .unwrap()
            .state
            .bit_eq(&state(3)));
    }

    #[test]
    fn decode_rejects_corruption() {
        let rec = CheckpointRecord {
            key: Slot::teacher(0, 0).at(1),
            state: state(4),
            provenance: vec![],
        };
        let bytes = encode(&rec).unwrap();
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode(&extra).is_err());
    }

    #[test]
    fn header_layout_is_stable() {
        let s = ModelState {
            arch: ModelArch::softmax_linear(1, 1),
            params: vec![1.5, -0.0],
            rng_cursor: 7,
        };
        let bytes = encode(&CheckpointRecord {
            key: Slot::student(1, 2, 3).at(4),
            state: s,
            provenance: vec![9],
        })
        .unwrap();
        let mut expected = Vec::new();
        expected.extend_from_slice(b"PRGCKPT\0");
        expected.extend_from_slice(&1u16.to_le_bytes());
        expected.push(1);
        for v in [1u32, 2, 3, 4] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        expected.push(0);
        for v in [1u32, 1, 0] {
            expected.extend_from_slice(&v.to_le_bytes());
        }
        expected.extend_from_slice(&7u64.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&9u32.to_le_bytes());
        expected.extend_from_slice(&2u64.to_le_bytes());
        expected.extend_from_slice(&1.5f64.to_le_bytes());
        expected.extend_from_slice(&(-0.0f64).to_le_bytes());
        assert_eq!(bytes, expected);
    }

    proptest! {
        #[test]
        fn encode_decode_is_bit_exact(
            params in proptest::collection::vec(any::<f64>(), 8),
            cursor in any::<u64>(),
            prov in proptest::collection::vec(any::<u32>(), 0..5),
            gen in 1u32..100,
        ) {
            let s = ModelState { arch: ModelArch::softmax_linear(3, 2), params, rng_cursor: cursor };
            let rec = CheckpointRecord { key: Slot::student(2, 1, 0).at(gen), state: s, provenance: prov };
            let back = decode(&encode(&rec).unwrap()).unwrap();
            prop_assert_eq!(back.key, rec.key);
            prop_assert_eq!(&back.provenance, &rec.provenance);
            prop_assert!(back.state.bit_eq(&rec.state));
        }
    }
}
