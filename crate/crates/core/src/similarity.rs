//! DTW ground truth, retrieval banks, zero-shot embeddings and ranking
//! metrics.

use std::cmp::Ordering;
use std::collections::BTreeSet;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::encoder::{forward, EncoderConfig, EncoderInput, Params};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::geo::{haversine_m, GpsPoint, Trajectory};
use crate::rng::{item_rng, DOMAIN_BANK};
use crate::vocab::sha256_hex;

pub const BANK_FILE_VERSION: u32 = 1;

/// Unwindowed dynamic time warping with haversine point cost, in metres.
pub fn dtw(a: &[GpsPoint], b: &[GpsPoint]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptyTrajectory);
    }
    let m = b.len();
    let mut prev = vec![f64::INFINITY; m + 1];
    let mut cur = vec![f64::INFINITY; m + 1];
    prev[0] = 0.0;
    for p in a {
        cur[0] = f64::INFINITY;
        for (j, q) in b.iter().enumerate() {
            let best = prev[j].min(prev[j + 1]).min(cur[j]);
            cur[j + 1] = haversine_m(p, q) + best;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    Ok(prev[m])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Geo,
    Kin,
    #[default]
    Sum,
}

impl fmt::Display for Pooling {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Pooling::Geo => "geo",
            Pooling::Kin => "kin",
            Pooling::Sum => "sum",
        })
    }
}

impl FromStr for Pooling {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "geo" => Ok(Pooling::Geo),
            "kin" => Ok(Pooling::Kin),
            "sum" => Ok(Pooling::Sum),
            other => Err(Error::Config(format!("unknown pooling `{other}`"))),
        }
    }
}

/// Mean of the pooled final state over non-PAD positions, L2-normalized.
pub fn embed_zero_shot(params: &Params, cfg: &EncoderConfig, input: &EncoderInput, pooling: Pooling) -> Result<Vec<f64>> {
    let out = forward(params, cfg, input, &[])?;
    let states = match pooling {
        Pooling::Geo => out.g_final,
        Pooling::Kin => out.k_final,
        Pooling::Sum => out.g_final + out.k_final,
    };
    let valid = input.key_valid();
    let n = valid.iter().filter(|&&v| v).count();
    let mut pooled = vec![0.0; states.ncols()];
    for (row, _) in states.rows().into_iter().zip(&valid).filter(|(_, &v)| v) {
        for (p, &x) in pooled.iter_mut().zip(row.iter()) {
            *p += x;
        }
    }
    let norm = pooled.iter().map(|x| (x / n as f64).powi(2)).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::Shape("pooled embedding has zero or non-finite norm".into()));
    }
    Ok(pooled.into_iter().map(|x| x / n as f64 / norm).collect())
}

pub fn embed_all(params: &Params, cfg: &EncoderConfig, inputs: &[EncoderInput], pooling: Pooling, exec: Execution) -> Result<Vec<Vec<f64>>> {
    exec.map_slice(inputs, |x| embed_zero_shot(params, cfg, x, pooling))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalBank {
    pub seed: u64,
    pub query_ids: Vec<String>,
    pub corpus_ids: Vec<String>,
    /// `n_q x n_c` DTW distances in metres.
    pub dtw: Vec<Vec<f64>>,
    /// Free-form configuration echo written as comment lines.
    pub note: Option<String>,
}

/// Samples disjoint query and corpus sets from `trajs` (duplicate ids keep
/// their first occurrence) and computes every query-corpus DTW distance.
pub fn build_bank(trajs: &[Trajectory], n_q: usize, n_c: usize, seed: u64, exec: Execution) -> Result<RetrievalBank> {
    let mut seen = BTreeSet::new();
    let mut unique: Vec<&Trajectory> = trajs.iter().filter(|t| seen.insert(t.id.as_str())).collect();
    if unique.len() < n_q + n_c || n_q == 0 || n_c == 0 {
        return Err(Error::InsufficientData {
            needed: (n_q + n_c).max(2),
            available: unique.len(),
        });
    }
    unique.sort_by(|a, b| a.id.cmp(&b.id));
    unique.shuffle(&mut item_rng(seed, DOMAIN_BANK, 0));
    let queries = &unique[..n_q];
    let corpus = &unique[n_q..n_q + n_c];
    let rows = exec.map_slice(queries, |q| -> Result<Vec<f64>> {
        corpus.iter().map(|c| dtw(&q.points, &c.points)).collect()
    });
    Ok(RetrievalBank {
        seed,
        query_ids: queries.iter().map(|t| t.id.clone()).collect(),
        corpus_ids: corpus.iter().map(|t| t.id.clone()).collect(),
        dtw: rows.into_iter().collect::<Result<_>>()?,
        note: None,
    })
}

fn check_id(id: &str) -> Result<()> {
    if id.is_empty() || id.contains(['\t', '\n', '\r']) {
        return Err(Error::Malformed(format!("trajectory id {id:?} cannot be stored in a bank file")));
    }
    Ok(())
}

impl RetrievalBank {
    pub fn n_q(&self) -> usize {
        self.query_ids.len()
    }

    pub fn n_c(&self) -> usize {
        self.corpus_ids.len()
    }

    pub fn to_text(&self) -> Result<String> {
        let mut s = String::new();
        if let Some(note) = &self.note {
            for line in note.lines() {
                s.push_str("# ");
                s.push_str(line);
                s.push('\n');
            }
        }
        s.push_str(&format!(
            "version={BANK_FILE_VERSION}\nseed={}\nn_q={}\nn_c={}\n",
            self.seed,
            self.n_q(),
            self.n_c()
        ));
        for id in &self.query_ids {
            check_id(id)?;
            s.push_str(&format!("query\t{id}\n"));
        }
        for id in &self.corpus_ids {
            check_id(id)?;
            s.push_str(&format!("corpus\t{id}\n"));
        }
        for row in &self.dtw {
            let cells: Vec<String> = row.iter().map(|d| format!("{d:?}")).collect();
            s.push_str("row\t");
            s.push_str(&cells.join("\t"));
            s.push('\n');
        }
        let sum = sha256_hex(s.as_bytes());
        s.push_str(&format!("checksum={sum}\n"));
        Ok(s)
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let body_end = text
            .rfind("checksum=")
            .ok_or_else(|| Error::Malformed("bank file has no checksum".into()))?;
        let (body, tail) = text.split_at(body_end);
        let stored = tail.trim_start_matches("checksum=").trim().to_string();
        let computed = sha256_hex(body.as_bytes());
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let bad = |m: &str| Error::Malformed(format!("bank file: {m}"));
        let mut note = Vec::new();
        let mut header = std::collections::BTreeMap::new();
        let mut bank = RetrievalBank {
            seed: 0,
            query_ids: vec![],
            corpus_ids: vec![],
            dtw: vec![],
            note: None,
        };
        for line in body.lines() {
            if let Some(n) = line.strip_prefix("# ") {
                note.push(n);
            } else if let Some(id) = line.strip_prefix("query\t") {
                bank.query_ids.push(id.to_string());
            } else if let Some(id) = line.strip_prefix("corpus\t") {
                bank.corpus_ids.push(id.to_string());
            } else if let Some(row) = line.strip_prefix("row\t") {
                let r = row
                    .split('\t')
                    .map(|v| v.parse::<f64>().map_err(|_| bad("bad distance")))
                    .collect::<Result<Vec<_>>>()?;
                bank.dtw.push(r);
            } else if let Some((k, v)) = line.split_once('=') {
                header.insert(k, v);
            } else if !line.is_empty() {
                return Err(bad(&format!("unexpected line {line:?}")));
            }
        }
        let num = |k: &str| -> Result<u64> {
            header
                .get(k)
                .ok_or_else(|| bad(&format!("missing {k}")))?
                .parse()
                .map_err(|_| bad(&format!("bad {k}")))
        };
        let version = num("version")? as u32;
        if version != BANK_FILE_VERSION {
            return Err(Error::Version {
                found: version,
                expected: BANK_FILE_VERSION,
            });
        }
        bank.seed = num("seed")?;
        if num("n_q")? as usize != bank.n_q() || num("n_c")? as usize != bank.n_c() {
            return Err(bad("id counts disagree with header"));
        }
        if bank.dtw.len() != bank.n_q() || bank.dtw.iter().any(|r| r.len() != bank.n_c()) {
            return Err(bad("distance matrix shape disagrees with header"));
        }
        if !note.is_empty() {
            bank.note = Some(note.join("\n"));
        }
        Ok(bank)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        Self::from_text(&std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct QueryMetrics {
    /// 1-based rank of the DTW-nearest item in the embedding ranking.
    pub nn_rank: usize,
    pub hr1: f64,
    pub hr10: f64,
    pub r5_20: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub ndcg50: f64,
    pub spearman: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub hr1: f64,
    pub hr10: f64,
    pub r5_20: f64,
    pub mrr: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub ndcg50: f64,
    pub spearman: f64,
    pub n_q: usize,
    pub n_c: usize,
    pub seed: u64,
}

impl MetricsReport {
    pub fn to_text(&self) -> String {
        format!(
            "HR@1={}\nHR@10={}\nR5@20={}\nMRR={}\nNDCG@5={}\nNDCG@10={}\nNDCG@50={}\nspearman={}\nn_q={}\nn_c={}\nseed={}\n",
            self.hr1, self.hr10, self.r5_20, self.mrr, self.ndcg5, self.ndcg10, self.ndcg50, self.spearman, self.n_q, self.n_c, self.seed
        )
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }
}

/// Corpus order by ascending key, ties broken by id.
fn order_by(keys: &[f64], ids: &[&str]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..keys.len()).collect();
    idx.sort_by(|&a, &b| keys[a].partial_cmp(&keys[b]).unwrap_or(Ordering::Equal).then_with(|| ids[a].cmp(ids[b])));
    idx
}

/// Average ranks (1-based), ties sharing their mean rank.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].partial_cmp(&values[b]).unwrap_or(Ordering::Equal));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && values[idx[j + 1]] == values[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman correlation; zero when either side has no variance.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = ra.len() as f64;
    if n < 2.0 {
        return 0.0;
    }
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let (mut cov, mut va, mut vb) = (0.0, 0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

fn ndcg_at(k: usize, ranking: &[usize], relevant: &[bool]) -> f64 {
    let k_eff = k.min(ranking.len());
    let dcg: f64 = ranking[..k_eff]
        .iter()
        .enumerate()
        .filter(|(_, &c)| relevant[c])
        .map(|(i, _)| 1.0 / ((i + 2) as f64).log2())
        .sum();
    let n_rel = relevant.iter().filter(|&&r| r).count().min(k_eff);
    let ideal: f64 = (0..n_rel).map(|i| 1.0 / ((i + 2) as f64).log2()).sum();
    if ideal == 0.0 {
        0.0
    } else {
        dcg / ideal
    }
}

/// Metrics for one query given its DTW row and cosine similarities.
pub fn query_metrics(dtw_row: &[f64], cosine: &[f64], corpus_ids: &[&str]) -> QueryMetrics {
    let n = dtw_row.len();
    let truth = order_by(dtw_row, corpus_ids);
    let neg_cos: Vec<f64> = cosine.iter().map(|c| -c).collect();
    let ranking = order_by(&neg_cos, corpus_ids);
    let nn = truth[0];
    let nn_rank = ranking.iter().position(|&c| c == nn).expect("nn in ranking") + 1;
    let top_set = |m: usize| {
        let mut rel = vec![false; n];
        for &c in &truth[..m.min(n)] {
            rel[c] = true;
        }
        rel
    };
    let rel5 = top_set(5);
    let m5 = 5.min(n);
    let found = ranking[..20.min(n)].iter().filter(|&&c| rel5[c]).count();
    let dist: Vec<f64> = cosine.iter().map(|c| 1.0 - c).collect();
    QueryMetrics {
        nn_rank,
        hr1: (nn_rank <= 1) as u8 as f64,
        hr10: (nn_rank <= 10) as u8 as f64,
        r5_20: found as f64 / m5 as f64,
        ndcg5: ndcg_at(5, &ranking, &top_set(5)),
        ndcg10: ndcg_at(10, &ranking, &top_set(10)),
        ndcg50: ndcg_at(50, &ranking, &top_set(50)),
        spearman: spearman(dtw_row, &dist),
    }
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Ranks each query's corpus row by descending cosine similarity and
/// averages the per-query metrics in query order.
pub fn evaluate(bank: &RetrievalBank, query_emb: &[Vec<f64>], corpus_emb: &[Vec<f64>], exec: Execution) -> Result<MetricsReport> {
    if query_emb.len() != bank.n_q() || corpus_emb.len() != bank.n_c() {
        return Err(Error::Shape(format!(
            "{} query / {} corpus embeddings for a {}x{} bank",
            query_emb.len(),
            corpus_emb.len(),
            bank.n_q(),
            bank.n_c()
        )));
    }
    if bank.n_q() == 0 || bank.n_c() == 0 {
        return Err(Error::InsufficientData { needed: 1, available: 0 });
    }
    let dim = query_emb[0].len();
    if query_emb.iter().chain(corpus_emb).any(|e| e.len() != dim) {
        return Err(Error::Shape("embeddings differ in dimension".into()));
    }
    let ids: Vec<&str> = bank.corpus_ids.iter().map(String::as_str).collect();
    let per: Vec<QueryMetrics> = exec.map_range(bank.n_q(), |q| {
        let cos: Vec<f64> = corpus_emb.iter().map(|c| cosine(&query_emb[q], c)).collect();
        query_metrics(&bank.dtw[q], &cos, &ids)
    });
    let n = per.len() as f64;
    let mean = |f: fn(&QueryMetrics) -> f64| per.iter().map(f).sum::<f64>() / n;
    Ok(MetricsReport {
        hr1: mean(|m| m.hr1),
        hr10: mean(|m| m.hr10),
        r5_20: mean(|m| m.r5_20),
        mrr: mean(|m| 1.0 / m.nn_rank as f64),
        ndcg5: mean(|m| m.ndcg5),
        ndcg10: mean(|m| m.ndcg10),
        ndcg50: mean(|m| m.ndcg50),
        spearman: mean(|m| m.spearman),
        n_q: bank.n_q(),
        n_c: bank.n_c(),
        seed: bank.seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pt(lat: f64, lon: f64) -> GpsPoint {
        GpsPoint { lat, lon, t: 0.0 }
    }

    fn random_seq(rng: &mut ChaCha8Rng, max_len: usize) -> Vec<GpsPoint> {
        let n = rng.random_range(1..=max_len);
        (0..n)
            .map(|_| pt(rng.random_range(41.10..41.22), rng.random_range(-8.70..-8.53)))
            .collect()
    }

    // Enumerates every monotone alignment path explicitly.
    fn brute_force_dtw(a: &[GpsPoint], b: &[GpsPoint]) -> f64 {
        fn go(a: &[GpsPoint], b: &[GpsPoint], i: usize, j: usize) -> f64 {
            let here = haversine_m(&a[i], &b[j]);
            if i + 1 == a.len() && j + 1 == b.len() {
                return here;
            }
            let mut best = f64::INFINITY;
            if i + 1 < a.len() {
                best = best.min(go(a, b, i + 1, j));
            }
            if j + 1 < b.len() {
                best = best.min(go(a, b, i, j + 1));
            }
            if i + 1 < a.len() && j + 1 < b.len() {
                best = best.min(go(a, b, i + 1, j + 1));
            }
            here + best
        }
        go(a, b, 0, 0)
    }

    #[test]
    fn dtw_matches_alignment_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let a = random_seq(&mut rng, 5);
            let b = random_seq(&mut rng, 5);
            let d = dtw(&a, &b).unwrap();
            let bf = brute_force_dtw(&a, &b);
            assert!((d - bf).abs() <= 1e-9 * bf.max(1.0), "{d} vs {bf}");
            assert_eq!(dtw(&a, &a).unwrap(), 0.0);
        }
    }

    #[test]
    fn dtw_basics() {
        let a = [pt(41.15, -8.61)];
        let b = [pt(41.16, -8.60)];
        assert_eq!(dtw(&a, &b).unwrap(), haversine_m(&a[0], &b[0]));
        assert!(dtw(&[], &b).is_err());
    }

    proptest! {
        #[test]
        fn dtw_symmetric(seed in 0u64..10_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_seq(&mut rng, 12);
            let b = random_seq(&mut rng, 12);
            let (ab, ba) = (dtw(&a, &b).unwrap(), dtw(&b, &a).unwrap());
            prop_assert!((ab - ba).abs() <= 1e-9 * ab.max(1.0));
        }
    }

    #[test]
    fn hand_fixture_one_query_four_items() {
        // DTW order: c2 < c0 < c3 < c1; embedding order: c0, c2, c1, c3.
        let dtw_row = [20.0, 90.0, 10.0, 50.0];
        let cos = [0.9, 0.5, 0.8, 0.1];
        let ids = ["c0", "c1", "c2", "c3"];
        let m = query_metrics(&dtw_row, &cos, &ids);
        assert_eq!(m.nn_rank, 2);
        assert_eq!(m.hr1, 0.0);
        assert_eq!(m.hr10, 1.0);
        assert_eq!(m.r5_20, 1.0);
        // every item is relevant with k=5 over 4 items
        assert_eq!(m.ndcg5, 1.0);
        // Spearman: dtw ranks (2,4,1,3), (1-cos) ranks (1,3,2,4)
        // no ties, so 1 - 6 * sum(d^2) / (n (n^2 - 1)) = 1 - 24 / 60
        assert!((m.spearman - 0.6).abs() < 1e-12);
    }

    #[test]
    fn perfect_ranking_scores_one() {
        let n = 60;
        let dtw_row: Vec<f64> = (0..n).map(|i| 10.0 * i as f64 + 1.0).collect();
        let cos: Vec<f64> = (0..n).map(|i| 1.0 - 0.01 * i as f64).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("{i:03}")).collect();
        let idr: Vec<&str> = ids.iter().map(String::as_str).collect();
        let m = query_metrics(&dtw_row, &cos, &idr);
        assert_eq!((m.nn_rank, m.hr1, m.hr10, m.r5_20), (1, 1.0, 1.0, 1.0));
        assert_eq!((m.ndcg5, m.ndcg10, m.ndcg50), (1.0, 1.0, 1.0));
        assert!((m.spearman - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adjacent_swap_never_improves() {
        let n = 30;
        let dtw_row: Vec<f64> = (0..n).map(|i| i as f64).collect();
        let ids: Vec<String> = (0..n).map(|i| format!("{i:03}")).collect();
        let idr: Vec<&str> = ids.iter().map(String::as_str).collect();
        let perfect: Vec<f64> = (0..n).map(|i| -(i as f64)).collect();
        let base = query_metrics(&dtw_row, &perfect, &idr);
        for s in 0..n - 1 {
            let mut cos = perfect.clone();
            cos.swap(s, s + 1);
            let m = query_metrics(&dtw_row, &cos, &idr);
            assert!(1.0 / m.nn_rank as f64 <= 1.0 / base.nn_rank as f64);
            assert!(m.ndcg5 <= base.ndcg5 && m.ndcg10 <= base.ndcg10 && m.ndcg50 <= base.ndcg50);
        }
    }

    #[test]
    fn average_ranks_share_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }
}
