//! Hamming ranking and retrieval metrics.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::center;
use crate::error::{Error, Result};
use crate::training::{sgn, HashModel};

/// Sign codes packed one bit per position (`1` for `+1`), 64 bits per word.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackedCodes {
    bits: usize,
    words_per_code: usize,
    words: Vec<u64>,
}

impl PackedCodes {
    pub fn words_for(bits: usize) -> usize {
        bits.div_ceil(64)
    }

    /// Packs the columns of a `K × Q` sign matrix.
    pub fn from_signs(signs: &DMatrix<f64>) -> Result<Self> {
        let bits = signs.nrows();
        if bits == 0 {
            return Err(Error::InvalidArgument("codes must have at least one bit".into()));
        }
        let wpc = Self::words_for(bits);
        let mut words = vec![0u64; wpc * signs.ncols()];
        for (q, col) in signs.column_iter().enumerate() {
            for (b, &v) in col.iter().enumerate() {
                if v == 1.0 {
                    words[q * wpc + b / 64] |= 1 << (b % 64);
                } else if v != -1.0 {
                    return Err(Error::InvalidArgument(format!("code entry ({b}, {q}) is {v}, not ±1")));
                }
            }
        }
        Ok(Self { bits, words_per_code: wpc, words })
    }

    pub fn from_words(bits: usize, words: Vec<u64>) -> Result<Self> {
        let wpc = Self::words_for(bits);
        if bits == 0 || !words.len().is_multiple_of(wpc) {
            return Err(Error::InvalidArgument(format!(
                "{} words do not hold whole {bits}-bit codes",
                words.len()
            )));
        }
        let tail = bits % 64;
        if tail != 0 {
            let mask = !0u64 << tail;
            if words.chunks(wpc).any(|c| c[wpc - 1] & mask != 0) {
                return Err(Error::InvalidArgument("padding bits beyond the code length are set".into()));
            }
        }
        Ok(Self { bits, words_per_code: wpc, words })
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn len(&self) -> usize {
        self.words.len() / self.words_per_code
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn words(&self) -> &[u64] {
        &self.words
    }

    pub fn code(&self, i: usize) -> &[u64] {
        &self.words[i * self.words_per_code..(i + 1) * self.words_per_code]
    }

    /// Subset of codes in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let words = indices.iter().flat_map(|&i| self.code(i).iter().copied()).collect();
        Self { bits: self.bits, words_per_code: self.words_per_code, words }
    }

    pub fn to_signs(&self) -> DMatrix<f64> {
        DMatrix::from_fn(self.bits, self.len(), |b, q| {
            if self.code(q)[b / 64] >> (b % 64) & 1 == 1 {
                1.0
            } else {
                -1.0
            }
        })
    }
}

pub fn hamming(a: &[u64], b: &[u64]) -> u32 {
    a.iter().zip(b).map(|(x, y)| (x ^ y).count_ones()).sum()
}

/// `sgn(W_mᵀ (x − μ_m))` for each column of `features`.
pub fn encode(model: &HashModel, modality: usize, features: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let w = model
        .w
        .get(modality)
        .ok_or_else(|| Error::InvalidArgument(format!("model has no modality {modality}")))?;
    if features.nrows() != w.nrows() {
        return Err(Error::Shape(format!(
            "modality {modality} expects {}-dimensional features, got {}",
            w.nrows(),
            features.nrows()
        )));
    }
    Ok(w.tr_mul(&center(features, &model.means[modality])).map(sgn))
}

/// Database codes. Instances the model was trained on take their learned
/// code when `prefer_stored` is set; everything else is encoded.
pub fn encode_database(
    model: &HashModel,
    modality: usize,
    features: &DMatrix<f64>,
    indices: &[usize],
    prefer_stored: bool,
) -> Result<DMatrix<f64>> {
    let mut codes = encode(model, modality, &features.select_columns(indices))?;
    if let (true, Some(b)) = (prefer_stored, &model.b) {
        let position: std::collections::HashMap<usize, usize> =
            model.train_indices.iter().enumerate().map(|(p, &i)| (i, p)).collect();
        for (col, idx) in indices.iter().enumerate() {
            if let Some(&p) = position.get(idx) {
                codes.set_column(col, &b.column(p));
            }
        }
    }
    Ok(codes)
}

/// Database order by increasing Hamming distance, ties by lower index.
pub fn hamming_rank(query: &[u64], db: &PackedCodes) -> Vec<usize> {
    let dists: Vec<u32> = (0..db.len()).map(|j| hamming(query, db.code(j))).collect();
    rank_by_distance(&dists, db.bits())
}

fn rank_by_distance(dists: &[u32], bits: usize) -> Vec<usize> {
    // counting sort keeps index order within each distance
    let mut starts = vec![0usize; bits + 2];
    for &d in dists {
        starts[d as usize + 1] += 1;
    }
    for r in 1..starts.len() {
        starts[r] += starts[r - 1];
    }
    let mut order = vec![0usize; dists.len()];
    for (j, &d) in dists.iter().enumerate() {
        order[starts[d as usize]] = j;
        starts[d as usize] += 1;
    }
    order
}

/// How average precision at a cutoff is normalized.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ApNormalization {
    /// Divide by `min(#relevant in database, cutoff)`.
    #[default]
    MinRelevantCutoff,
    /// Divide by the number of relevant items inside the cutoff.
    RetrievedRelevant,
}

/// Average precision over the first `cutoff` entries of a ranked relevance list.
pub fn average_precision(ranked: &[bool], total_relevant: usize, cutoff: usize, norm: ApNormalization) -> f64 {
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (r, &rel) in ranked.iter().take(cutoff).enumerate() {
        if rel {
            hits += 1;
            sum += hits as f64 / (r + 1) as f64;
        }
    }
    let denom = match norm {
        ApNormalization::MinRelevantCutoff => total_relevant.min(cutoff),
        ApNormalization::RetrievedRelevant => hits,
    };
    if denom == 0 {
        0.0
    } else {
        sum / denom as f64
    }
}

/// Multi-hot label sets packed as bitsets; relevance means a shared label.
#[derive(Debug, Clone)]
pub struct LabelSets {
    words: usize,
    bits: Vec<u64>,
}

impl LabelSets {
    pub fn new(labels: &[Vec<u32>]) -> Self {
        let max = labels.iter().flatten().copied().max().map_or(0, |m| m as usize + 1);
        let words = max.div_ceil(64).max(1);
        let mut bits = vec![0u64; words * labels.len()];
        for (i, set) in labels.iter().enumerate() {
            for &l in set {
                bits[i * words + l as usize / 64] |= 1 << (l % 64);
            }
        }
        Self { words, bits }
    }

    pub fn len(&self) -> usize {
        self.bits.len() / self.words
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    fn set(&self, i: usize) -> &[u64] {
        &self.bits[i * self.words..(i + 1) * self.words]
    }

    pub fn relevant(&self, i: usize, other: &LabelSets, j: usize) -> bool {
        self.set(i).iter().zip(other.set(j)).any(|(a, b)| a & b != 0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub map_cutoff: usize,
    pub normalization: ApNormalization,
    pub top_n: Vec<usize>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            map_cutoff: 50,
            normalization: ApNormalization::MinRelevantCutoff,
            top_n: default_top_n(),
        }
    }
}

/// 50, 100, 200, …, 1000.
pub fn default_top_n() -> Vec<usize> {
    std::iter::once(50).chain((1..=10).map(|i| i * 100)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrPoint {
    pub radius: usize,
    pub precision: f64,
    pub recall: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub task: String,
    pub bits: usize,
    pub map_cutoff: usize,
    pub normalization: ApNormalization,
    pub map: f64,
    pub queries: usize,
    /// Queries with no relevant database item; left out of every average.
    pub excluded_queries: usize,
    pub top_n: Vec<(usize, f64)>,
    pub pr_curve: Vec<PrPoint>,
}

impl RetrievalReport {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::InvalidArgument(e.to_string()))
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidArgument(format!("bad report: {e}")))
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::format(path, e.to_string()))
    }

    /// Long-format rows `task,metric,x,value`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task,metric,x,value\n");
        out += &format!("{},map,{},{}\n", self.task, self.map_cutoff, self.map);
        for (n, p) in &self.top_n {
            out += &format!("{},precision_at,{n},{p}\n", self.task);
        }
        for pt in &self.pr_curve {
            out += &format!("{},pr_precision,{},{}\n", self.task, pt.radius, pt.precision);
            out += &format!("{},pr_recall,{},{}\n", self.task, pt.radius, pt.recall);
        }
        out
    }
}

/// Ranks the database for every query and averages the metrics over
/// queries that have at least one relevant database item.
pub fn evaluate(
    task: &str,
    queries: &PackedCodes,
    query_labels: &LabelSets,
    database: &PackedCodes,
    db_labels: &LabelSets,
    opts: &EvalOptions,
) -> Result<RetrievalReport> {
    if queries.bits() != database.bits() {
        return Err(Error::Shape(format!(
            "query codes have {} bits, database codes {}",
            queries.bits(),
            database.bits()
        )));
    }
    if queries.len() != query_labels.len() || database.len() != db_labels.len() {
        return Err(Error::Shape("codes and labels disagree on instance counts".into()));
    }
    let bits = database.bits();
    let n_db = database.len();

    struct PerQuery {
        ap: f64,
        top: Vec<f64>,
        // relevant and retrieved counts within each radius
        rel_within: Vec<usize>,
        ret_within: Vec<usize>,
        total_rel: usize,
    }

    let per_query: Vec<Option<PerQuery>> = (0..queries.len())
        .into_par_iter()
        .map(|q| {
            let code = queries.code(q);
            let dists: Vec<u32> = (0..n_db).map(|j| hamming(code, database.code(j))).collect();
            let order = rank_by_distance(&dists, bits);
            let rel: Vec<bool> = order.iter().map(|&j| query_labels.relevant(q, db_labels, j)).collect();
            let total_rel = rel.iter().filter(|&&r| r).count();
            if total_rel == 0 {
                return None;
            }
            let ap = average_precision(&rel, total_rel, opts.map_cutoff, opts.normalization);
            let mut prefix = Vec::with_capacity(n_db + 1);
            prefix.push(0usize);
            for &r in &rel {
                prefix.push(prefix.last().unwrap() + r as usize);
            }
            let top = opts
                .top_n
                .iter()
                .map(|&n| {
                    let n = n.min(n_db);
                    if n == 0 {
                        0.0
                    } else {
                        prefix[n] as f64 / n as f64
                    }
                })
                .collect();
            let mut rel_within = vec![0usize; bits + 1];
            let mut ret_within = vec![0usize; bits + 1];
            for (pos, &j) in order.iter().enumerate() {
                let d = dists[j] as usize;
                ret_within[d] += 1;
                rel_within[d] += rel[pos] as usize;
            }
            for r in 1..=bits {
                ret_within[r] += ret_within[r - 1];
                rel_within[r] += rel_within[r - 1];
            }
            Some(PerQuery { ap, top, rel_within, ret_within, total_rel })
        })
        .collect();

    let kept: Vec<&PerQuery> = per_query.iter().flatten().collect();
    let count = kept.len();
    let mean = |f: &dyn Fn(&PerQuery) -> f64| {
        if count == 0 {
            0.0
        } else {
            kept.iter().map(|p| f(p)).sum::<f64>() / count as f64
        }
    };
    let map = mean(&|p| p.ap);
    let top_n = opts
        .top_n
        .iter()
        .enumerate()
        .map(|(t, &n)| (n, mean(&|p| p.top[t])))
        .collect();
    let pr_curve = (0..=bits)
        .map(|r| {
            let retrieving: Vec<&&PerQuery> = kept.iter().filter(|p| p.ret_within[r] > 0).collect();
            let precision = if retrieving.is_empty() {
                0.0
            } else {
                retrieving
                    .iter()
                    .map(|p| p.rel_within[r] as f64 / p.ret_within[r] as f64)
                    .sum::<f64>()
                    / retrieving.len() as f64
            };
            PrPoint {
                radius: r,
                precision,
                recall: mean(&|p| p.rel_within[r] as f64 / p.total_rel as f64),
            }
        })
        .collect();

    Ok(RetrievalReport {
        task: task.to_string(),
        bits,
        map_cutoff: opts.map_cutoff,
        normalization: opts.normalization,
        map,
        queries: queries.len(),
        excluded_queries: queries.len() - count,
        top_n,
        pr_curve,
    })
}
