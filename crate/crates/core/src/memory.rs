//! Asynchronous memory pool of estimated person features.
//!
//! Every `(video, clip)` slot holds the person features last written for that
//! clip, tagged with the training loss at write time. Reads return the
//! neighbouring clips of a target clip, each scaled by a staleness penalty
//! `min(err/δ, δ/err)` comparing the current loss `err` with the tag `δ`.
//! Slots that were never written read as zero features with an all-false
//! mask and tag 0.
//!
//! The pool is shared between threads: each slot is replaced as a unit, so a
//! reader always sees features and tag from the same write.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::Arc;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use parking_lot::RwLock;
use serde::{Deserialize, Serialize};

use crate::autograd::{Scope, Tape};
use crate::block::{FeatureSet, TapeFeatures};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

const POOL_MAGIC: &str = "AIA-POOL";
const POOL_VERSION: u32 = 1;

/// Current training loss as seen by the memory reader. Training starts at
/// `Infinite`, before any loss has been computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossLevel<T> {
    Infinite,
    Finite(T),
}

impl<T: Scalar> LossLevel<T> {
    pub fn finite(self) -> Option<T> {
        match self {
            LossLevel::Finite(x) => Some(x),
            LossLevel::Infinite => None,
        }
    }

    pub fn map<U>(self, f: impl FnOnce(T) -> U) -> LossLevel<U> {
        match self {
            LossLevel::Infinite => LossLevel::Infinite,
            LossLevel::Finite(x) => LossLevel::Finite(f(x)),
        }
    }
}

/// Staleness weight `min(err/δ, δ/err)` in `[0, 1]`.
///
/// An unwritten slot (`δ = 0`) and the initial infinite loss both give 0,
/// matching the limits of the ratio.
pub fn penalty<T: Scalar>(delta: T, err: LossLevel<T>) -> Result<T> {
    if !(delta >= T::zero()) || !delta.is_finite() {
        return Err(Error::InvalidLoss(delta.to_f64_lossy()));
    }
    match err {
        LossLevel::Infinite => Ok(T::zero()),
        LossLevel::Finite(e) if !(e > T::zero()) || !e.is_finite() => Err(Error::InvalidLoss(e.to_f64_lossy())),
        LossLevel::Finite(_) if delta == T::zero() => Ok(T::zero()),
        LossLevel::Finite(e) => Ok((e / delta).min(delta / e)),
    }
}

/// Slot address; `clip` is 1-based within its video.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct MemoryKey {
    pub video: u64,
    pub clip: u64,
}

impl MemoryKey {
    pub fn new(video: u64, clip: u64) -> Self {
        Self { video, clip }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryEntry<T> {
    /// `[K, d]`, zero-padded.
    pub features: Tensor<T>,
    pub mask: Vec<bool>,
    /// Loss at write time; 0 for a never-written slot.
    pub loss_tag: T,
    /// Training step of the write; 0 for a never-written slot.
    pub write_step: u64,
}

impl<T: Scalar> MemoryEntry<T> {
    pub fn zero(capacity: usize, dim: usize) -> Self {
        Self {
            features: Tensor::zeros(&[capacity, dim]),
            mask: vec![false; capacity],
            loss_tag: T::zero(),
            write_step: 0,
        }
    }

    pub fn is_zero_init(&self) -> bool {
        self.write_step == 0 && self.loss_tag == T::zero()
    }

    pub fn feature_set(&self) -> FeatureSet<T> {
        FeatureSet::new(self.features.clone(), self.mask.clone()).expect("entry shape is consistent")
    }
}

/// The shared pool of estimated person features.
#[derive(Debug)]
pub struct MemoryPool<T> {
    capacity: usize,
    dim: usize,
    window: usize,
    entries: RwLock<HashMap<MemoryKey, Arc<MemoryEntry<T>>>>,
    zero: Arc<MemoryEntry<T>>,
}

impl<T: Scalar> Clone for MemoryPool<T> {
    fn clone(&self) -> Self {
        Self {
            capacity: self.capacity,
            dim: self.dim,
            window: self.window,
            entries: RwLock::new(self.entries.read().clone()),
            zero: self.zero.clone(),
        }
    }
}

impl<T: Scalar> PartialEq for MemoryPool<T> {
    fn eq(&self, other: &Self) -> bool {
        self.capacity == other.capacity
            && self.dim == other.dim
            && self.window == other.window
            && self.snapshot() == other.snapshot()
    }
}

impl<T: Scalar> MemoryPool<T> {
    /// `capacity` persons per clip, feature width `dim`, window radius `window`.
    pub fn new(capacity: usize, dim: usize, window: usize) -> Self {
        Self {
            capacity,
            dim,
            window,
            entries: RwLock::new(HashMap::new()),
            zero: Arc::new(MemoryEntry::zero(capacity, dim)),
        }
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Number of slots that have been written at least once.
    pub fn written(&self) -> usize {
        self.entries.read().len()
    }

    /// The slot's current contents (zero-init if never written).
    pub fn get(&self, key: MemoryKey) -> Arc<MemoryEntry<T>> {
        self.entries
            .read()
            .get(&key)
            .cloned()
            .unwrap_or_else(|| self.zero.clone())
    }

    /// Written slots sorted by key.
    pub fn snapshot(&self) -> Vec<(MemoryKey, MemoryEntry<T>)> {
        let mut out: Vec<_> = self
            .entries
            .read()
            .iter()
            .map(|(k, e)| (*k, (**e).clone()))
            .collect();
        out.sort_by_key(|(k, _)| *k);
        out
    }

    /// Neighbour clip indices `t−L..t−1, t+1..t+L`; out-of-range clips are `None`.
    fn neighbours(&self, key: MemoryKey, clips_in_video: u64) -> Vec<Option<MemoryKey>> {
        let l = self.window as i64;
        let t = key.clip as i64;
        (t - l..=t + l)
            .filter(|&c| c != t)
            .map(|c| (c >= 1 && c <= clips_in_video as i64).then(|| MemoryKey::new(key.video, c as u64)))
            .collect()
    }

    /// Reads the `2L` neighbours of `key`, each scaled by its penalty against
    /// `err`. The pool itself is not modified.
    pub fn read_window(&self, key: MemoryKey, clips_in_video: u64, err: LossLevel<T>) -> Result<Vec<FeatureSet<T>>> {
        self.neighbours(key, clips_in_video)
            .into_iter()
            .map(|k| {
                let entry = k.map_or_else(|| self.zero.clone(), |k| self.get(k));
                let w = penalty(entry.loss_tag, err)?;
                Ok(entry.feature_set().scaled(w))
            })
            .collect()
    }

    /// Reads the neighbours without any penalty (inference).
    pub fn read_window_unweighted(&self, key: MemoryKey, clips_in_video: u64) -> Vec<FeatureSet<T>> {
        self.neighbours(key, clips_in_video)
            .into_iter()
            .map(|k| k.map_or_else(|| self.zero.clone(), |k| self.get(k)).feature_set())
            .collect()
    }

    /// Replaces the slot with `features` (fitted to `K` rows) tagged with `err`.
    pub fn write(&self, key: MemoryKey, features: &FeatureSet<T>, err: T, step: u64) -> Result<()> {
        if !(err > T::zero()) || !err.is_finite() {
            return Err(Error::InvalidLoss(err.to_f64_lossy()));
        }
        if features.dim() != self.dim {
            return Err(Error::ShapeMismatch {
                op: "memory write",
                lhs: vec![self.capacity, self.dim],
                rhs: features.features().shape().to_vec(),
            });
        }
        let fitted = features.fit_rows(self.capacity);
        let entry = Arc::new(MemoryEntry {
            features: fitted.features().detached(),
            mask: fitted.mask().to_vec(),
            loss_tag: err,
            write_step: step,
        });
        self.entries.write().insert(key, entry);
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let snapshot = self.snapshot();
        let io = |e| Error::io(path, e);
        writeln!(
            w,
            "{POOL_MAGIC} {POOL_VERSION} K={} d={} L={} entries={}",
            self.capacity,
            self.dim,
            self.window,
            snapshot.len()
        )
        .map_err(io)?;
        for (key, e) in &snapshot {
            w.write_u64::<LittleEndian>(key.video).map_err(io)?;
            w.write_u64::<LittleEndian>(key.clip).map_err(io)?;
            w.write_f64::<LittleEndian>(e.loss_tag.to_f64_lossy()).map_err(io)?;
            w.write_u64::<LittleEndian>(e.write_step).map_err(io)?;
            for &m in &e.mask {
                w.write_u8(m as u8).map_err(io)?;
            }
            for &x in e.features.data() {
                w.write_f64::<LittleEndian>(x.to_f64_lossy()).map_err(io)?;
            }
        }
        w.flush().map_err(io)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut r = BufReader::new(file);
        let mut header = Vec::new();
        r.read_until(b'\n', &mut header).map_err(|e| Error::io(path, e))?;
        let header = String::from_utf8(header).map_err(|_| Error::format(path, "header is not text"))?;
        let (capacity, dim, window, count) = parse_pool_header(header.trim_end()).map_err(|m| Error::format(path, m))?;

        let pool = Self::new(capacity, dim, window);
        let truncated = |_| Error::format(path, "truncated record");
        {
            let mut entries = pool.entries.write();
            for _ in 0..count {
                let video = r.read_u64::<LittleEndian>().map_err(truncated)?;
                let clip = r.read_u64::<LittleEndian>().map_err(truncated)?;
                let loss_tag = T::lit(r.read_f64::<LittleEndian>().map_err(truncated)?);
                let write_step = r.read_u64::<LittleEndian>().map_err(truncated)?;
                let mut mask = Vec::with_capacity(capacity);
                for _ in 0..capacity {
                    match r.read_u8().map_err(truncated)? {
                        0 => mask.push(false),
                        1 => mask.push(true),
                        b => return Err(Error::format(path, format!("bad mask byte {b}"))),
                    }
                }
                let mut data = Vec::with_capacity(capacity * dim);
                for _ in 0..capacity * dim {
                    data.push(T::lit(r.read_f64::<LittleEndian>().map_err(truncated)?));
                }
                let entry = MemoryEntry {
                    features: Tensor::new(vec![capacity, dim], data)?,
                    mask,
                    loss_tag,
                    write_step,
                };
                entries.insert(MemoryKey::new(video, clip), Arc::new(entry));
            }
        }
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|e| Error::io(path, e))?;
        if !rest.is_empty() {
            return Err(Error::format(path, format!("{} trailing bytes", rest.len())));
        }
        Ok(pool)
    }
}

fn parse_pool_header(line: &str) -> std::result::Result<(usize, usize, usize, usize), String> {
    let mut parts = line.split_whitespace();
    if parts.next() != Some(POOL_MAGIC) {
        return Err("not a memory pool file".into());
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or("missing version")?;
    if version != POOL_VERSION {
        return Err(format!("unsupported pool version {version}"));
    }
    let mut field = |name: &str| -> std::result::Result<usize, String> {
        let tok = parts.next().ok_or(format!("missing {name}"))?;
        tok.strip_prefix(name)
            .and_then(|v| v.strip_prefix('='))
            .and_then(|v| v.parse().ok())
            .ok_or(format!("bad {name} field `{tok}`"))
    };
    Ok((field("K")?, field("d")?, field("L")?, field("entries")?))
}

/// Concatenates `[w_{t−L}, …, w_{t−1}, current, w_{t+1}, …, w_{t+L}]` as pure data.
pub fn assemble_memory_sets<T: Scalar>(window: &[FeatureSet<T>], current: &FeatureSet<T>, capacity: usize) -> Result<FeatureSet<T>> {
    if !window.len().is_multiple_of(2) {
        return Err(Error::WindowLength {
            expected: window.len() + 1,
            got: window.len(),
        });
    }
    let half = window.len() / 2;
    let center = current.fit_rows(capacity);
    let parts: Vec<&FeatureSet<T>> = window[..half]
        .iter()
        .chain(std::iter::once(&center))
        .chain(&window[half..])
        .collect();
    let d = center.dim();
    let mut data = Vec::new();
    let mut mask = Vec::new();
    for p in parts {
        if p.dim() != d {
            return Err(Error::ShapeMismatch {
                op: "assemble_memory",
                lhs: vec![p.len(), d],
                rhs: p.features().shape().to_vec(),
            });
        }
        data.extend_from_slice(p.features().data());
        mask.extend_from_slice(p.mask());
    }
    FeatureSet::new(Tensor::new(vec![mask.len(), d], data)?, mask)
}

/// Builds the memory key/value set on `tape`: the `2L` window sets become
/// constants and the live `current` person features (fitted to `capacity`
/// rows) sit in the centre, so gradients still reach them.
pub fn assemble_memory<T: Scalar>(
    tape: &Tape<T>,
    window: &[FeatureSet<T>],
    current: &TapeFeatures,
    window_radius: usize,
    capacity: usize,
) -> Result<TapeFeatures> {
    if window.len() != 2 * window_radius {
        return Err(Error::WindowLength {
            expected: 2 * window_radius,
            got: window.len(),
        });
    }
    let d = tape.shape(current.var)[1];
    let center = fit_rows_on_tape(tape, current, capacity, d)?;
    let mut vars = Vec::with_capacity(window.len() + 1);
    let mut mask = Vec::with_capacity((window.len() + 1) * capacity);
    tape.with_scope(Scope::Memory, || -> Result<()> {
        for (i, fs) in window.iter().enumerate() {
            if i == window_radius {
                vars.push(center.var);
                mask.extend_from_slice(&center.mask);
            }
            if fs.len() != capacity || fs.dim() != d {
                return Err(Error::ShapeMismatch {
                    op: "assemble_memory",
                    lhs: vec![capacity, d],
                    rhs: fs.features().shape().to_vec(),
                });
            }
            vars.push(tape.constant(fs.features().clone()));
            mask.extend_from_slice(fs.mask());
        }
        Ok(())
    })?;
    if window_radius == 0 {
        return Ok(center);
    }
    Ok(TapeFeatures {
        var: tape.concat_rows(&vars)?,
        mask,
    })
}

/// Truncates or zero-pads on-tape features to `capacity` rows.
pub fn fit_rows_on_tape<T: Scalar>(tape: &Tape<T>, f: &TapeFeatures, capacity: usize, d: usize) -> Result<TapeFeatures> {
    let n = f.len();
    if n == capacity {
        return Ok(f.clone());
    }
    let mut mask: Vec<bool> = f.mask.iter().copied().take(capacity).collect();
    let kept = if n > capacity {
        tape.select_rows(f.var, &(0..capacity).collect::<Vec<_>>())?
    } else {
        f.var
    };
    let var = if n < capacity {
        let pad = tape.constant(Tensor::zeros(&[capacity - n, d]));
        mask.resize(capacity, false);
        tape.concat_rows(&[kept, pad])?
    } else {
        kept
    };
    Ok(TapeFeatures { var, mask })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn set(rows: &[&[f64]]) -> FeatureSet<f64> {
        let t = Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap();
        FeatureSet::dense(t).unwrap()
    }

    #[test]
    fn penalty_examples() {
        assert_eq!(penalty(0.7, LossLevel::Finite(0.7)).unwrap(), 1.0);
        assert_eq!(penalty(4.0, LossLevel::Finite(2.0)).unwrap(), 0.5);
        assert_eq!(penalty(0.0, LossLevel::Finite(0.3)).unwrap(), 0.0);
        assert_eq!(penalty(0.5, LossLevel::<f64>::Infinite).unwrap(), 0.0);
        assert!(penalty(0.5, LossLevel::Finite(0.0)).is_err());
        assert!(penalty(0.5, LossLevel::Finite(-1.0)).is_err());
    }

    #[test]
    fn fresh_pool_reads_zeros() {
        let pool = MemoryPool::<f64>::new(2, 3, 2);
        let w = pool.read_window(MemoryKey::new(0, 3), 6, LossLevel::Finite(0.5)).unwrap();
        assert_eq!(w.len(), 4);
        for fs in &w {
            assert!(fs.features().data().iter().all(|&x| x == 0.0));
            assert!(fs.mask().iter().all(|&m| !m));
        }
    }

    #[test]
    fn infinite_loss_zero_weights_everything() {
        let pool = MemoryPool::<f64>::new(1, 2, 1);
        pool.write(MemoryKey::new(0, 1), &set(&[&[1.0, 2.0]]), 0.4, 1).unwrap();
        pool.write(MemoryKey::new(0, 3), &set(&[&[3.0, 4.0]]), 0.4, 2).unwrap();
        let w = pool.read_window(MemoryKey::new(0, 2), 3, LossLevel::Infinite).unwrap();
        for fs in &w {
            assert!(fs.features().data().iter().all(|&x| x == 0.0));
            assert_eq!(fs.mask(), &[true]);
        }
    }

    #[test]
    fn read_applies_each_tag() {
        let pool = MemoryPool::<f64>::new(1, 2, 1);
        pool.write(MemoryKey::new(0, 1), &set(&[&[1.0, 2.0]]), 0.5, 1).unwrap();
        pool.write(MemoryKey::new(0, 3), &set(&[&[3.0, 4.0]]), 1.0, 2).unwrap();
        let w = pool.read_window(MemoryKey::new(0, 2), 3, LossLevel::Finite(0.5)).unwrap();
        // t−1 tagged 0.5 = err: unscaled; t+1 tagged 1.0: min(0.5, 2) = 0.5
        assert_eq!(w[0].features().data(), &[1.0, 2.0]);
        assert_eq!(w[1].features().data(), &[1.5, 2.0]);
    }

    #[test]
    fn read_does_not_mutate() {
        let pool = MemoryPool::<f64>::new(1, 1, 1);
        pool.write(MemoryKey::new(0, 1), &set(&[&[2.0]]), 0.25, 1).unwrap();
        let key = MemoryKey::new(0, 2);
        let a = pool.read_window(key, 2, LossLevel::Finite(0.5)).unwrap();
        let b = pool.read_window(key, 2, LossLevel::Finite(0.5)).unwrap();
        assert_eq!(a, b);
        assert_eq!(pool.get(MemoryKey::new(0, 1)).features.data(), &[2.0]);
    }

    #[test]
    fn boundary_clips_are_zero_init() {
        let pool = MemoryPool::<f64>::new(1, 1, 2);
        let w = pool.read_window(MemoryKey::new(0, 1), 2, LossLevel::Finite(1.0)).unwrap();
        assert_eq!(w.len(), 4);
        assert!(w.iter().all(|fs| fs.valid_count() == 0));
    }

    #[test]
    fn write_pads_and_last_writer_wins() {
        let pool = MemoryPool::<f64>::new(4, 2, 1);
        let key = MemoryKey::new(1, 1);
        pool.write(key, &set(&[&[1.0, 1.0], &[2.0, 2.0]]), 0.3, 1).unwrap();
        let e = pool.get(key);
        assert_eq!(e.mask, vec![true, true, false, false]);
        assert_eq!(&e.features.data()[4..], &[0.0; 4]);
        pool.write(key, &set(&[&[9.0, 9.0]]), 0.2, 2).unwrap();
        let e = pool.get(key);
        assert_eq!(e.mask, vec![true, false, false, false]);
        assert_eq!(e.loss_tag, 0.2);
        assert_eq!(e.write_step, 2);
        assert!(pool.write(key, &set(&[&[1.0, 1.0]]), 0.0, 3).is_err());
        assert!(pool.write(key, &set(&[&[1.0, 1.0]]), f64::INFINITY, 3).is_err());
    }

    #[test]
    fn assemble_places_current_in_centre() {
        let zero = FeatureSet::padding(2, 1);
        let cur = set(&[&[5.0]]);
        let m = assemble_memory_sets(&[zero.clone(), zero], &cur, 2).unwrap();
        assert_eq!(m.features().data(), &[0.0, 0.0, 5.0, 0.0, 0.0, 0.0]);
        assert_eq!(m.mask(), &[false, false, true, false, false, false]);

        let only = assemble_memory_sets(&[], &cur, 1).unwrap();
        assert_eq!(only.features().data(), &[5.0]);
    }

    #[test]
    fn assemble_on_tape_matches_data_version() {
        let tape = Tape::new();
        let window = vec![set(&[&[1.0], &[2.0]]), set(&[&[3.0], &[4.0]])];
        let cur = set(&[&[7.0]]);
        let tv = assemble_memory(&tape, &window, &cur.record(&tape), 1, 2).unwrap();
        let expect = assemble_memory_sets(&window, &cur, 2).unwrap();
        assert_eq!(tv.to_feature_set(&tape), expect);
        assert!(matches!(
            assemble_memory(&tape, &window[..1], &cur.record(&tape), 1, 2),
            Err(Error::WindowLength { .. })
        ));
    }

    #[test]
    fn pool_file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pool.bin");
        let empty = MemoryPool::<f64>::new(2, 2, 1);
        empty.save(&path).unwrap();
        assert_eq!(MemoryPool::<f64>::load(&path).unwrap(), empty);

        let pool = MemoryPool::<f64>::new(2, 2, 1);
        for c in 1..=3 {
            pool.write(MemoryKey::new(4, c), &set(&[&[0.1 * c as f64, -1.0 / 3.0]]), 0.7 / c as f64, c).unwrap();
        }
        pool.save(&path).unwrap();
        let back = MemoryPool::<f64>::load(&path).unwrap();
        assert_eq!(back, pool);

        let bytes = std::fs::read(&path).unwrap();
        let mut bad = b"AIA-POOL 9".to_vec();
        bad.extend_from_slice(&bytes[10..]);
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(MemoryPool::<f64>::load(&path), Err(Error::Format { .. })));
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(MemoryPool::<f64>::load(&path), Err(Error::Format { .. })));
        std::fs::write(&path, b"garbage\n").unwrap();
        assert!(matches!(MemoryPool::<f64>::load(&path), Err(Error::Format { .. })));
    }
}
