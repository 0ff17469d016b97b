//! Named parameter tensors, seeded initialisation and the checkpoint format.
//!
//! Checkpoint layout (little endian):
//!
//! ```text
//! magic     8 bytes  "HDVCKPT\0"
//! version   u32      = 1
//! meta_len  u32, then meta_len bytes of UTF-8 JSON (free-form metadata)
//! count     u32
//! count × { name_len u32, name bytes, locked u8, rows u32, cols u32, rows·cols f64 }
//! ```

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::graph::Mat;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"HDVCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<Mat>,
    locked: Vec<bool>,
    by_name: HashMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    /// Adds a tensor. Panics on a duplicate name, which is a construction bug.
    pub fn insert(&mut self, name: &str, value: Mat) -> ParamId {
        assert!(!self.by_name.contains_key(name), "duplicate parameter {name}");
        let id = ParamId(self.values.len());
        self.names.push(name.to_string());
        self.values.push(value);
        self.locked.push(false);
        self.by_name.insert(name.to_string(), id);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Mat {
        &self.values[id.0]
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Mat {
        &mut self.values[id.0]
    }

    pub fn is_locked(&self, id: ParamId) -> bool {
        self.locked[id.0]
    }

    pub fn set_locked(&mut self, id: ParamId, locked: bool) {
        self.locked[id.0] = locked;
    }

    /// Locks every tensor whose name satisfies `pred` and unlocks the rest.
    pub fn lock_only(&mut self, pred: impl Fn(&str) -> bool) {
        for i in 0..self.names.len() {
            self.locked[i] = pred(&self.names[i]);
        }
    }

    /// Total scalar count.
    pub fn scalar_count(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    pub fn scalar_count_where(&self, pred: impl Fn(&str) -> bool) -> usize {
        self.names
            .iter()
            .zip(&self.values)
            .filter(|(n, _)| pred(n))
            .map(|(_, v)| v.len())
            .sum()
    }

    /// Bit-level fingerprint of the selected tensors.
    pub fn fingerprint(&self, pred: impl Fn(&str) -> bool) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for (n, v) in self.names.iter().zip(&self.values) {
            if !pred(n) {
                continue;
            }
            for b in n.bytes() {
                h = fnv_mix(h, b as u64);
            }
            for x in v.iter() {
                h = fnv_mix(h, x.to_bits());
            }
        }
        h
    }

    /// Copies values (and lock flags) for every name present in `other`.
    pub fn load_from(&mut self, other: &ParamStore, include_locks: bool) -> Result<usize> {
        let mut n = 0;
        for (i, name) in other.names.iter().enumerate() {
            let Some(id) = self.id(name) else { continue };
            if self.values[id.0].dim() != other.values[i].dim() {
                return Err(Error::Shape(format!(
                    "checkpoint tensor {name}: {:?} vs model {:?}",
                    other.values[i].dim(),
                    self.values[id.0].dim()
                )));
            }
            self.values[id.0] = other.values[i].clone();
            if include_locks {
                self.locked[id.0] = other.locked[i];
            }
            n += 1;
        }
        Ok(n)
    }

    pub fn save(&self, path: &Path, metadata: &serde_json::Value) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        self.write_to(&mut w, metadata).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    fn write_to(&self, w: &mut impl Write, metadata: &serde_json::Value) -> std::io::Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_u32::<LittleEndian>(CHECKPOINT_VERSION)?;
        let meta = metadata.to_string();
        w.write_u32::<LittleEndian>(meta.len() as u32)?;
        w.write_all(meta.as_bytes())?;
        w.write_u32::<LittleEndian>(self.values.len() as u32)?;
        for i in 0..self.values.len() {
            let name = self.names[i].as_bytes();
            w.write_u32::<LittleEndian>(name.len() as u32)?;
            w.write_all(name)?;
            w.write_u8(self.locked[i] as u8)?;
            let (r, c) = self.values[i].dim();
            w.write_u32::<LittleEndian>(r as u32)?;
            w.write_u32::<LittleEndian>(c as u32)?;
            for x in self.values[i].iter() {
                w.write_f64::<LittleEndian>(*x)?;
            }
        }
        Ok(())
    }

    /// Reads a checkpoint, returning the tensors and the metadata document.
    pub fn load(path: &Path) -> Result<(ParamStore, serde_json::Value)> {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(f);
        let parse = |m: String| Error::Parse(format!("{}: {m}", path.display()));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|e| parse(e.to_string()))?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(parse("not a checkpoint file".into()));
        }
        let version = r.read_u32::<LittleEndian>().map_err(|e| parse(e.to_string()))?;
        if version != CHECKPOINT_VERSION {
            return Err(parse(format!("unsupported checkpoint version {version}")));
        }
        let read_bytes = |r: &mut BufReader<File>, n: usize| -> Result<Vec<u8>> {
            let mut buf = vec![0u8; n];
            r.read_exact(&mut buf).map_err(|e| parse(e.to_string()))?;
            Ok(buf)
        };
        let meta_len = r.read_u32::<LittleEndian>().map_err(|e| parse(e.to_string()))? as usize;
        let meta = read_bytes(&mut r, meta_len)?;
        let metadata: serde_json::Value =
            serde_json::from_slice(&meta).map_err(|e| parse(format!("metadata: {e}")))?;
        let count = r.read_u32::<LittleEndian>().map_err(|e| parse(e.to_string()))? as usize;
        let mut store = ParamStore::new();
        for _ in 0..count {
            let nlen = r.read_u32::<LittleEndian>().map_err(|e| parse(e.to_string()))? as usize;
            let name = String::from_utf8(read_bytes(&mut r, nlen)?)
                .map_err(|_| parse("tensor name is not UTF-8".into()))?;
            let locked = r.read_u8().map_err(|e| parse(e.to_string()))? != 0;
            let rows = r.read_u32::<LittleEndian>().map_err(|e| parse(e.to_string()))? as usize;
            let cols = r.read_u32::<LittleEndian>().map_err(|e| parse(e.to_string()))? as usize;
            let mut data = vec![0.0; rows * cols];
            r.read_f64_into::<LittleEndian>(&mut data)
                .map_err(|e| parse(e.to_string()))?;
            if store.id(&name).is_some() {
                return Err(parse(format!("duplicate tensor {name}")));
            }
            let id = store.insert(&name, Mat::from_shape_vec((rows, cols), data).expect("sized"));
            store.set_locked(id, locked);
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| parse(e.to_string()))?;
        if !rest.is_empty() {
            return Err(parse("trailing bytes after tensors".into()));
        }
        Ok((store, metadata))
    }
}

fn fnv_mix(mut h: u64, x: u64) -> u64 {
    for b in x.to_le_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Creates parameters with seeded uniform(±1/√fan_in) weights.
pub struct ParamBuilder<'a> {
    pub store: &'a mut ParamStore,
    rng: ChaCha8Rng,
}

impl<'a> ParamBuilder<'a> {
    pub fn new(store: &'a mut ParamStore, seed: u64) -> ParamBuilder<'a> {
        ParamBuilder {
            store,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
        let rng = &mut self.rng;
        let m = Mat::from_shape_fn((rows, cols), |_| rng.random_range(-bound..bound));
        self.store.insert(name, m)
    }

    pub fn constant(&mut self, name: &str, rows: usize, cols: usize, v: f64) -> ParamId {
        self.store.insert(name, Mat::from_elem((rows, cols), v))
    }
}
