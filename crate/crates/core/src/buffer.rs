//! Capped store of past gradient directions.
//!
//! A [`GradBuffer`] keeps the raw gradients it admitted (cosines are measured
//! against those) next to an orthonormal basis of their span (projections use
//! that). Admission drops near-zero vectors, rejects near-duplicates by a full
//! cosine scan and evicts the oldest entry once the buffer is at capacity.

use std::collections::VecDeque;
use std::io::{self, Read, Write};

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::subspace::{cosine, OrthoBasis, ParamVector, DEFAULT_RANK_TOL, ZERO_NORM};

const BYTES_PER_F32: f64 = 4.0;
const MIB: f64 = 1024.0 * 1024.0;

/// Storage cost in MiB of `num_stored` float32 vectors of `num_params` entries.
pub fn memory_mb(num_stored: usize, num_params: usize) -> f64 {
    num_stored as f64 * num_params as f64 * BYTES_PER_F32 / MIB
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BufferConfig {
    /// Maximum number of stored gradients. Zero disables storage entirely.
    pub capacity: usize,
    /// Gradients whose cosine with any stored entry exceeds this are duplicates.
    pub tau_add: f64,
    /// Gradients with norm at or below this are dropped.
    pub tau_drop: f64,
    /// Residual ratio below which a gradient adds no new basis direction.
    pub rank_tol: f64,
}

impl Default for BufferConfig {
    fn default() -> Self {
        BufferConfig {
            capacity: 200,
            tau_add: 0.99,
            tau_drop: 1e-8,
            rank_tol: DEFAULT_RANK_TOL,
        }
    }
}

impl BufferConfig {
    pub fn validate(&self) -> Result<()> {
        if !(-1.0..=1.0).contains(&self.tau_add) {
            return Err(Error::BadConfig(format!(
                "tau_add {} outside [-1, 1]",
                self.tau_add
            )));
        }
        if !(self.tau_drop >= 0.0 && self.tau_drop.is_finite()) {
            return Err(Error::BadConfig(format!(
                "tau_drop {} must be a finite non-negative number",
                self.tau_drop
            )));
        }
        if !(self.rank_tol > 0.0 && self.rank_tol < 1.0) {
            return Err(Error::BadConfig(format!(
                "rank_tol {} outside (0, 1)",
                self.rank_tol
            )));
        }
        Ok(())
    }
}

/// Distinct buffer indices drawn uniformly without replacement.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleSubset {
    indices: Vec<usize>,
}

impl SampleSubset {
    /// Wraps explicit indices; duplicates are removed.
    pub fn from_indices(mut indices: Vec<usize>) -> Self {
        indices.sort_unstable();
        indices.dedup();
        SampleSubset { indices }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Admission {
    Added { evicted: bool },
    Duplicate,
    Dropped,
}

#[derive(Debug, Clone)]
pub struct GradBuffer {
    dim: usize,
    config: BufferConfig,
    seed: u64,
    entries: VecDeque<ParamVector>,
    basis: OrthoBasis,
    rng: ChaCha8Rng,
    draws: u64,
}

impl GradBuffer {
    pub fn new(dim: usize, config: BufferConfig, seed: u64) -> Self {
        GradBuffer {
            dim,
            config,
            seed,
            entries: VecDeque::with_capacity(config.capacity.min(1024)),
            basis: OrthoBasis::new(dim),
            rng: ChaCha8Rng::seed_from_u64(seed),
            draws: 0,
        }
    }

    /// Rebuilds a buffer from stored entries, e.g. a snapshot. Entries are taken
    /// as-is (no admission filtering) apart from the capacity cap.
    pub fn restore(
        dim: usize,
        config: BufferConfig,
        seed: u64,
        entries: Vec<ParamVector>,
    ) -> Result<Self> {
        let mut buf = GradBuffer::new(dim, config, seed);
        for e in &entries {
            e.check_dim(dim)?;
        }
        let skip = entries.len().saturating_sub(config.capacity);
        buf.entries = entries.into_iter().skip(skip).collect();
        buf.rebuild_basis()?;
        Ok(buf)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn config(&self) -> &BufferConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> impl ExactSizeIterator<Item = &ParamVector> + '_ {
        self.entries.iter()
    }

    pub fn entry(&self, i: usize) -> Option<&ParamVector> {
        self.entries.get(i)
    }

    pub fn basis(&self) -> &OrthoBasis {
        &self.basis
    }

    /// Number of subsets drawn so far.
    pub fn draws(&self) -> u64 {
        self.draws
    }

    pub fn memory_mb(&self) -> f64 {
        memory_mb(self.len(), self.dim)
    }

    /// Draws `min(k, len)` distinct indices. Drawing all indices consumes no randomness.
    pub fn sample_subset(&mut self, k: usize) -> Result<SampleSubset> {
        if self.entries.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        if k == 0 {
            return Err(Error::BadConfig("sample size k must be positive".into()));
        }
        let n = self.entries.len();
        self.draws += 1;
        if k >= n {
            return Ok(SampleSubset {
                indices: (0..n).collect(),
            });
        }
        let mut indices = index::sample(&mut self.rng, n, k).into_vec();
        indices.sort_unstable();
        Ok(SampleSubset { indices })
    }

    /// Maximum cosine between `g` and the sampled entries. Entries for which the
    /// cosine is undefined are skipped.
    pub fn mc_max_cos(&self, g: &[f64], subset: &SampleSubset) -> Result<f64> {
        if g.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: g.len(),
            });
        }
        if crate::subspace::norm(g) <= ZERO_NORM {
            return Err(Error::ZeroVector);
        }
        if self.entries.is_empty() {
            return Err(Error::EmptyBuffer);
        }
        let mut best: Option<f64> = None;
        for &i in &subset.indices {
            let entry = self.entries.get(i).ok_or(Error::LengthMismatch {
                what: "sample subset index",
                expected: self.entries.len(),
                found: i,
            })?;
            match cosine(g, entry) {
                Ok(c) => best = Some(best.map_or(c, |b: f64| b.max(c))),
                Err(Error::ZeroVector) => {}
                Err(e) => return Err(e),
            }
        }
        best.ok_or(Error::EmptyBuffer)
    }

    /// Maximum cosine over every stored entry.
    pub fn max_cos_full(&self, g: &[f64]) -> Result<f64> {
        let all = SampleSubset {
            indices: (0..self.entries.len()).collect(),
        };
        self.mc_max_cos(g, &all)
    }

    pub fn admit(&mut self, g: &[f64]) -> Result<Admission> {
        if g.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: g.len(),
            });
        }
        if self.config.capacity == 0 || crate::subspace::norm(g) <= self.config.tau_drop {
            return Ok(Admission::Dropped);
        }
        if !self.entries.is_empty() {
            match self.max_cos_full(g) {
                Ok(c) if c > self.config.tau_add => return Ok(Admission::Duplicate),
                Ok(_) | Err(Error::EmptyBuffer) => {}
                // below the cosine floor but above tau_drop: store it, it is not a duplicate
                Err(Error::ZeroVector) => {}
                Err(e) => return Err(e),
            }
        }
        let evicted = self.entries.len() >= self.config.capacity;
        if evicted {
            self.entries.pop_front();
        }
        self.entries.push_back(ParamVector::from(g));
        if evicted {
            self.rebuild_basis()?;
        } else {
            match self.basis.insert(g, self.config.rank_tol) {
                Ok(_) | Err(Error::ZeroVector) => {}
                Err(e) => return Err(e),
            }
        }
        Ok(Admission::Added { evicted })
    }

    fn rebuild_basis(&mut self) -> Result<()> {
        self.basis = OrthoBasis::from_vectors(self.dim, self.entries.iter(), self.config.rank_tol)?;
        Ok(())
    }

    /// Writes each entry as a little-endian `u64` length followed by that many
    /// little-endian `f32` values.
    pub fn write_snapshot<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.entries {
            w.write_all(&(e.dim() as u64).to_le_bytes())?;
            for &x in e.iter() {
                w.write_all(&(x as f32).to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads records written by [`GradBuffer::write_snapshot`] until end of input.
pub fn read_snapshot<R: Read>(mut r: R) -> Result<Vec<ParamVector>> {
    let mut out = Vec::new();
    loop {
        let mut len_bytes = [0u8; 8];
        match read_full(&mut r, &mut len_bytes)? {
            0 => return Ok(out),
            8 => {}
            n => {
                return Err(Error::TruncatedFile {
                    expected: 8,
                    found: n,
                })
            }
        }
        let len = usize::try_from(u64::from_le_bytes(len_bytes)).map_err(|_| Error::DimOverflow)?;
        let bytes = len.checked_mul(4).ok_or(Error::DimOverflow)?;
        let mut payload = vec![0u8; bytes];
        let got = read_full(&mut r, &mut payload)?;
        if got != bytes {
            return Err(Error::TruncatedFile {
                expected: bytes,
                found: got,
            });
        }
        let v = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        out.push(ParamVector::new(v));
    }
}

fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> io::Result<usize> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e),
        }
    }
    Ok(filled)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn e(dim: usize, i: usize) -> Vec<f64> {
        let mut v = vec![0.0; dim];
        v[i] = 1.0;
        v
    }

    fn buffer_with(dim: usize, cap: usize, vs: &[Vec<f64>]) -> GradBuffer {
        let cfg = BufferConfig {
            capacity: cap,
            ..BufferConfig::default()
        };
        let mut b = GradBuffer::new(dim, cfg, 42);
        for v in vs {
            assert!(matches!(b.admit(v).unwrap(), Admission::Added { .. }));
        }
        b
    }

    #[test]
    fn subset_clamps_to_size() {
        let mut b = buffer_with(2, 5, &[e(2, 0)]);
        assert_eq!(b.sample_subset(5).unwrap().indices(), &[0]);
    }

    #[test]
    fn subset_exhaustive() {
        let vs: Vec<Vec<f64>> = (0..200).map(|i| e(200, i)).collect();
        let mut b = buffer_with(200, 200, &vs);
        let s = b.sample_subset(200).unwrap();
        assert_eq!(s.indices(), (0..200).collect::<Vec<_>>().as_slice());
    }

    #[test]
    fn subset_distinct_in_range() {
        let vs: Vec<Vec<f64>> = (0..10).map(|i| e(10, i)).collect();
        let mut b = buffer_with(10, 10, &vs);
        let s = b.sample_subset(3).unwrap();
        assert_eq!(s.len(), 3);
        let mut idx = s.indices().to_vec();
        idx.dedup();
        assert_eq!(idx.len(), 3);
        assert!(idx.iter().all(|&i| i < 10));
    }

    #[test]
    fn subset_errors() {
        let mut b = GradBuffer::new(2, BufferConfig::default(), 0);
        assert!(matches!(b.sample_subset(1), Err(Error::EmptyBuffer)));
        let mut b = buffer_with(2, 5, &[e(2, 0)]);
        assert!(b.sample_subset(0).is_err());
    }

    #[test]
    fn mc_max_cos_examples() {
        let b = buffer_with(2, 5, &[e(2, 0), e(2, 1)]);
        let g = [1.0, 0.1];
        let only_e2 = SampleSubset::from_indices(vec![1]);
        let both = SampleSubset::from_indices(vec![0, 1]);
        assert_eq!(
            b.mc_max_cos(&e(2, 0), &SampleSubset::from_indices(vec![0]))
                .unwrap(),
            1.0
        );
        let s1 = b.mc_max_cos(&g, &only_e2).unwrap();
        let s2 = b.mc_max_cos(&g, &both).unwrap();
        assert!((s1 - 0.0995).abs() < 1e-3);
        assert!((s2 - 0.9950).abs() < 1e-3);
        assert!(s1 <= s2);
    }

    #[test]
    fn mc_max_cos_errors() {
        let b = buffer_with(2, 5, &[e(2, 0)]);
        let s = SampleSubset::from_indices(vec![0]);
        assert!(matches!(
            b.mc_max_cos(&[0.0, 0.0], &s),
            Err(Error::ZeroVector)
        ));
        assert!(b.mc_max_cos(&[1.0], &s).is_err());
        let empty = GradBuffer::new(2, BufferConfig::default(), 0);
        assert!(matches!(
            empty.mc_max_cos(&[1.0, 0.0], &s),
            Err(Error::EmptyBuffer)
        ));
        assert!(b
            .mc_max_cos(&[1.0, 0.0], &SampleSubset::from_indices(vec![3]))
            .is_err());
    }

    #[test]
    fn admit_examples() {
        let mut b = GradBuffer::new(2, BufferConfig::default(), 0);
        assert_eq!(b.admit(&[0.0, 0.0]).unwrap(), Admission::Dropped);

        let mut b = buffer_with(2, 5, &[e(2, 0)]);
        assert_eq!(b.admit(&e(2, 0)).unwrap(), Admission::Duplicate);

        let mut b = buffer_with(2, 1, &[e(2, 0)]);
        assert_eq!(
            b.admit(&e(2, 1)).unwrap(),
            Admission::Added { evicted: true }
        );
        assert_eq!(b.len(), 1);
        assert_eq!(b.entry(0).unwrap().as_slice(), &[0.0, 1.0]);
        assert_eq!(b.basis().rank(), 1);
        assert_eq!(b.basis().columns()[0].as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn zero_capacity_stores_nothing() {
        let cfg = BufferConfig {
            capacity: 0,
            ..BufferConfig::default()
        };
        let mut b = GradBuffer::new(2, cfg, 0);
        assert_eq!(b.admit(&[1.0, 0.0]).unwrap(), Admission::Dropped);
        assert!(b.is_empty());
    }

    #[test]
    fn admit_dimension_mismatch() {
        let mut b = GradBuffer::new(2, BufferConfig::default(), 0);
        assert!(matches!(
            b.admit(&[1.0]),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn memory_examples() {
        assert_eq!(memory_mb(0, 1000), 0.0);
        assert_eq!(memory_mb(1, 262_144), 1.0);
        for n in [1usize, 7, 638_986] {
            let ratio = memory_mb(200, n) / memory_mb(5625, n);
            assert!((ratio - 200.0 / 5625.0).abs() < 1e-15);
            assert!((ratio - 0.0356).abs() < 1e-4);
        }
    }

    #[test]
    fn snapshot_truncated() {
        let b = buffer_with(3, 5, &[vec![1.0, 2.0, 3.0]]);
        let mut bytes = Vec::new();
        b.write_snapshot(&mut bytes).unwrap();
        assert_eq!(bytes.len(), 8 + 12);
        assert_eq!(&bytes[..8], &3u64.to_le_bytes());
        bytes.pop();
        assert!(matches!(
            read_snapshot(bytes.as_slice()),
            Err(Error::TruncatedFile { .. })
        ));
    }

    #[test]
    fn restore_rebuilds_basis() {
        let b = buffer_with(3, 5, &[e(3, 0), e(3, 1)]);
        let mut bytes = Vec::new();
        b.write_snapshot(&mut bytes).unwrap();
        let entries = read_snapshot(bytes.as_slice()).unwrap();
        let r = GradBuffer::restore(3, *b.config(), b.seed(), entries).unwrap();
        assert_eq!(r.len(), 2);
        assert_eq!(r.basis(), b.basis());
    }
}
