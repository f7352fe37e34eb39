//! Precomputed retrieval results keyed by query start, with a binary file
//! format guarded by a parameter fingerprint. Layout is described in
//! `docs/FORMATS.md`.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{s, Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::index::{hash_values, PatchIndex};
use super::{query_seed, random_retrieve_with, retrieve_batch, ExclusionRule, MetricKind, PeriodRetrieval, Query, Reduction, RetrievalParams, RetrievalResult, Weighting};
use crate::error::{RaftError, Result};

pub const CACHE_VERSION: u8 = 1;
const CACHE_MAGIC: &[u8; 8] = b"RAFTRC\0\0";

/// Everything a cached result depends on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Fingerprint {
    pub lookback: usize,
    pub horizon: usize,
    pub stride: usize,
    pub periods: Vec<usize>,
    pub channels: usize,
    pub m: usize,
    pub tau: f64,
    pub metric: MetricKind,
    pub reduction: Reduction,
    pub weighting: Weighting,
    /// Hash of the retrieval database (training series).
    pub dataset_hash: String,
    /// Hash of the series the queries were cut from.
    pub query_hash: String,
    /// `true` when queries were excluded against their own start.
    pub training_exclusion: bool,
    /// Set when candidates were sampled at random instead of scored.
    #[serde(default)]
    pub random_seed: Option<u64>,
}

impl Fingerprint {
    pub fn new(index: &PatchIndex, params: &RetrievalParams, queries: ArrayView2<'_, f64>, training_exclusion: bool) -> Self {
        Self {
            lookback: index.lookback(),
            horizon: index.horizon(),
            stride: index.stride(),
            periods: index.periods().to_vec(),
            channels: index.n_channels(),
            m: params.m,
            tau: params.tau,
            metric: params.metric,
            reduction: params.reduction,
            weighting: params.weighting,
            dataset_hash: index.dataset_hash().to_string(),
            query_hash: hash_values(&queries),
            training_exclusion,
            random_seed: None,
        }
    }

    /// Error unless `self` (the expected fingerprint) equals `stored`.
    pub fn check(&self, stored: &Fingerprint) -> Result<()> {
        if self == stored {
            return Ok(());
        }
        let show = |f: &Fingerprint| serde_json::to_string(f).unwrap_or_default();
        Err(RaftError::FingerprintMismatch {
            expected: show(self),
            found: show(stored),
        })
    }
}

/// One cached query.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub query_start: usize,
    pub result: RetrievalResult,
}

#[derive(Debug, Clone)]
pub struct RetrievalCache {
    fingerprint: Fingerprint,
    entries: Vec<CacheEntry>,
    lookup: HashMap<usize, usize>,
}

/// Retrieve for the window of `queries` starting at every entry of `starts`.
/// With `training_exclusion`, each start is also the query's position in
/// the index's training series and overlapping candidates are excluded.
pub fn precompute(
    index: &PatchIndex,
    queries: ArrayView2<'_, f64>,
    starts: &[usize],
    params: &RetrievalParams,
    training_exclusion: bool,
) -> Result<RetrievalCache> {
    if params.metric == MetricKind::CosineProjected {
        return Err(RaftError::param(
            "metric",
            "cosine_projected retrieval depends on trained heads and cannot be precomputed",
        ));
    }
    let l = index.lookback();
    let span = queries.ncols();
    if let Some(&bad) = starts.iter().find(|&&s| s + l > span) {
        return Err(RaftError::SeriesTooShort { needed: bad + l, available: span });
    }
    let batch: Vec<Query<'_>> = starts
        .iter()
        .map(|&s| Query {
            values: queries.slice(s![.., s..s + l]),
            exclusion: if training_exclusion { ExclusionRule::training(s) } else { ExclusionRule::inference() },
        })
        .collect();
    let results = retrieve_batch(index, &batch, params, None)?;
    let entries = starts
        .iter()
        .zip(results)
        .map(|(&query_start, result)| CacheEntry { query_start, result })
        .collect();
    RetrievalCache::from_entries(Fingerprint::new(index, params, queries, training_exclusion), entries)
}

/// Like [`precompute`] but with uniformly sampled candidates and equal
/// weights; each query draws from its own stream derived from `seed`.
pub fn precompute_random(
    index: &PatchIndex,
    queries: ArrayView2<'_, f64>,
    starts: &[usize],
    params: &RetrievalParams,
    training_exclusion: bool,
    seed: u64,
) -> Result<RetrievalCache> {
    let l = index.lookback();
    let span = queries.ncols();
    if let Some(&bad) = starts.iter().find(|&&s| s + l > span) {
        return Err(RaftError::SeriesTooShort { needed: bad + l, available: span });
    }
    let entries = starts
        .par_iter()
        .map(|&s| {
            let exclusion = if training_exclusion { ExclusionRule::training(s) } else { ExclusionRule::inference() };
            let result = random_retrieve_with(index, queries.slice(s![.., s..s + l]), params, exclusion, query_seed(seed, s), None)?;
            Ok(CacheEntry { query_start: s, result })
        })
        .collect::<Result<Vec<_>>>()?;
    let mut fingerprint = Fingerprint::new(index, params, queries, training_exclusion);
    fingerprint.random_seed = Some(seed);
    RetrievalCache::from_entries(fingerprint, entries)
}

impl RetrievalCache {
    pub fn from_entries(fingerprint: Fingerprint, entries: Vec<CacheEntry>) -> Result<Self> {
        let mut lookup = HashMap::with_capacity(entries.len());
        for (i, e) in entries.iter().enumerate() {
            if lookup.insert(e.query_start, i).is_some() {
                return Err(RaftError::Format(format!("duplicate query start {}", e.query_start)));
            }
        }
        Ok(Self { fingerprint, entries, lookup })
    }

    pub fn fingerprint(&self) -> &Fingerprint {
        &self.fingerprint
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn get(&self, query_start: usize) -> Option<&RetrievalResult> {
        self.lookup.get(&query_start).map(|&i| &self.entries[i].result)
    }

    /// Like [`get`](Self::get) but a miss is an error.
    pub fn require(&self, query_start: usize) -> Result<&RetrievalResult> {
        self.get(query_start)
            .ok_or_else(|| RaftError::Empty(format!("no cached retrieval for query start {query_start}")))
    }

    /// Verify the cache was built with the expected parameters.
    pub fn ensure_matches(&self, expected: &Fingerprint) -> Result<()> {
        expected.check(&self.fingerprint)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| RaftError::io(path, e))?;
        let mut w = BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| RaftError::io(path, e))?;
        w.flush().map_err(|e| RaftError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| RaftError::io(path, e))?;
        Self::read_from(&mut BufReader::new(file))
    }

    /// Load and check the fingerprint in one step.
    pub fn load_checked(path: &Path, expected: &Fingerprint) -> Result<Self> {
        let cache = Self::load(path)?;
        cache.ensure_matches(expected)?;
        Ok(cache)
    }

    pub fn write_to(&self, w: &mut impl Write) -> std::io::Result<()> {
        w.write_all(&[CACHE_VERSION])?;
        w.write_all(CACHE_MAGIC)?;
        let json = serde_json::to_vec(&self.fingerprint).map_err(std::io::Error::other)?;
        w.write_all(&(json.len() as u64).to_le_bytes())?;
        w.write_all(&json)?;
        w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
        for e in &self.entries {
            w.write_all(&(e.query_start as u64).to_le_bytes())?;
            for pr in &e.result.periods {
                w.write_all(&(pr.candidates.len() as u64).to_le_bytes())?;
                for &c in &pr.candidates {
                    w.write_all(&(c as u64).to_le_bytes())?;
                }
                for &st in &pr.starts {
                    w.write_all(&(st as u64).to_le_bytes())?;
                }
                for v in pr.scores.iter().chain(&pr.weights).chain(pr.aggregate.iter()) {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
        }
        Ok(())
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let fmt = |e: std::io::Error| RaftError::Format(format!("truncated cache file: {e}"));
        let mut byte = [0u8; 1];
        r.read_exact(&mut byte).map_err(fmt)?;
        if byte[0] != CACHE_VERSION {
            return Err(RaftError::Format(format!("unsupported cache version {}", byte[0])));
        }
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(fmt)?;
        if &magic != CACHE_MAGIC {
            return Err(RaftError::Format("not a retrieval cache file".into()));
        }
        let json_len = read_u64(r).map_err(fmt)? as usize;
        let mut json = vec![0u8; json_len];
        r.read_exact(&mut json).map_err(fmt)?;
        let fingerprint: Fingerprint =
            serde_json::from_slice(&json).map_err(|e| RaftError::Format(format!("bad fingerprint: {e}")))?;
        let n = read_u64(r).map_err(fmt)? as usize;
        let mut entries = Vec::with_capacity(n);
        for _ in 0..n {
            let query_start = read_u64(r).map_err(fmt)? as usize;
            let mut periods = Vec::with_capacity(fingerprint.periods.len());
            for &period in &fingerprint.periods {
                let k = read_u64(r).map_err(fmt)? as usize;
                if k > fingerprint.m {
                    return Err(RaftError::Format(format!("{k} selections exceed m = {}", fingerprint.m)));
                }
                let candidates = read_usizes(r, k).map_err(fmt)?;
                let starts = read_usizes(r, k).map_err(fmt)?;
                let scores = read_f64s(r, k).map_err(fmt)?;
                let weights = read_f64s(r, k).map_err(fmt)?;
                let shape = (fingerprint.channels, fingerprint.horizon / period);
                let agg = read_f64s(r, shape.0 * shape.1).map_err(fmt)?;
                periods.push(PeriodRetrieval {
                    period,
                    candidates,
                    starts,
                    scores,
                    weights,
                    aggregate: Array2::from_shape_vec(shape, agg).expect("aggregate shape"),
                });
            }
            entries.push(CacheEntry { query_start, result: RetrievalResult { periods } });
        }
        Self::from_entries(fingerprint, entries)
    }
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_usizes(r: &mut impl Read, n: usize) -> std::io::Result<Vec<usize>> {
    (0..n).map(|_| read_u64(r).map(|v| v as usize)).collect()
}

fn read_f64s(r: &mut impl Read, n: usize) -> std::io::Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect())
}
