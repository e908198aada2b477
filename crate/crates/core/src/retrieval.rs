//! Hamming ranking over a code database and the retrieval metrics: mAP@n,
//! ACG@n, DCG@n and NDCG@n with graded relevance.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::HashCode;

/// Database of codes with class labels.
#[derive(Clone, Debug, PartialEq)]
pub struct CodeIndex {
    bits: usize,
    codes: Vec<HashCode>,
    labels: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct IndexManifest {
    bits: usize,
    count: usize,
    bytes_per_code: usize,
    labels: Vec<usize>,
    blob: String,
}

const INDEX_MANIFEST: &str = "codes.json";
const INDEX_BLOB: &str = "codes.bin";

impl CodeIndex {
    pub fn new(codes: Vec<HashCode>, labels: Vec<usize>) -> Result<Self> {
        if codes.len() != labels.len() {
            return Err(Error::Shape { op: "code_index", detail: format!("{} codes, {} labels", codes.len(), labels.len()) });
        }
        let bits = codes.first().map_or(0, HashCode::len);
        if let Some(i) = codes.iter().position(|c| c.len() != bits) {
            return Err(Error::Shape {
                op: "code_index",
                detail: format!("code {i} has {} bits, code 0 has {bits}", codes[i].len()),
            });
        }
        Ok(Self { bits, codes, labels })
    }

    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn codes(&self) -> &[HashCode] {
        &self.codes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    /// Writes `codes.json` and `codes.bin` (each code in `⌈L/8⌉` bytes).
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let blob: Vec<u8> = self.codes.iter().flat_map(HashCode::to_bytes).collect();
        let manifest = IndexManifest {
            bits: self.bits,
            count: self.codes.len(),
            bytes_per_code: self.bits.div_ceil(8),
            labels: self.labels.clone(),
            blob: INDEX_BLOB.into(),
        };
        fs::write(dir.join(INDEX_BLOB), blob)?;
        fs::write(dir.join(INDEX_MANIFEST), serde_json::to_vec_pretty(&manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let m: IndexManifest = serde_json::from_slice(&fs::read(dir.join(INDEX_MANIFEST))?)?;
        let blob = fs::read(dir.join(&m.blob))?;
        let per = m.bits.div_ceil(8);
        if per != m.bytes_per_code || blob.len() != per * m.count || m.labels.len() != m.count {
            return Err(Error::Format(format!(
                "index of {} {}-bit codes does not match a {}-byte blob with {} labels",
                m.count,
                m.bits,
                blob.len(),
                m.labels.len()
            )));
        }
        let codes = (0..m.count)
            .map(|i| HashCode::from_bytes(&blob[i * per..(i + 1) * per], m.bits))
            .collect::<Result<Vec<_>>>()?;
        Self::new(codes, m.labels)
    }
}

/// The `n` nearest items by Hamming distance, ties broken by item id.
pub fn hamming_rank(query: &HashCode, index: &CodeIndex, n: usize) -> Result<Vec<(usize, u32)>> {
    if query.len() != index.bits && !index.is_empty() {
        return Err(Error::Shape {
            op: "hamming_rank",
            detail: format!("{}-bit query against {}-bit codes", query.len(), index.bits),
        });
    }
    if n > index.len() {
        return Err(Error::Domain { op: "hamming_rank", detail: format!("top {n} of {} items", index.len()) });
    }
    let mut ranked: Vec<(usize, u32)> = index.codes.iter().enumerate().map(|(i, c)| (i, query.hamming(c))).collect();
    ranked.sort_by_key(|&(i, d)| (d, i));
    ranked.truncate(n);
    Ok(ranked)
}

/// Graded relevance: 1 for the same class, 0.5 for a listed similar pair
/// of classes, 0 otherwise.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RelevanceSpec {
    similar: BTreeSet<(usize, usize)>,
}

impl RelevanceSpec {
    pub fn new(pairs: &[(usize, usize)]) -> Self {
        Self { similar: pairs.iter().map(|&(a, b)| (a.min(b), a.max(b))).collect() }
    }

    pub fn score(&self, query_class: usize, item_class: usize) -> f64 {
        if query_class == item_class {
            1.0
        } else if self.similar.contains(&(query_class.min(item_class), query_class.max(item_class))) {
            0.5
        } else {
            0.0
        }
    }

    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.similar.iter().copied()
    }
}

/// AP over the first `n` hits of a ranked relevance list, normalized by
/// `min(n, total_relevant)`. Zero when nothing is relevant.
pub fn average_precision(hits: &[bool], total_relevant: usize, n: usize) -> f64 {
    let denom = n.min(total_relevant);
    if denom == 0 {
        return 0.0;
    }
    let mut found = 0usize;
    let mut sum = 0.0;
    for (k, &hit) in hits.iter().take(n).enumerate() {
        if hit {
            found += 1;
            sum += found as f64 / (k + 1) as f64;
        }
    }
    sum / denom as f64
}

/// `r₁ + Σ_{i≥2} r_i / log₂ i` over the first `n` relevances.
pub fn dcg(relevances: &[f64], n: usize) -> f64 {
    relevances
        .iter()
        .take(n)
        .enumerate()
        .map(|(k, &r)| if k == 0 { r } else { r / ((k + 1) as f64).log2() })
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gains {
    pub acg: f64,
    pub dcg: f64,
    pub ndcg: f64,
    /// The database held nothing relevant, so NDCG was set to 0.
    pub idcg_zero: bool,
}

/// Gains of a returned window against the best window any ordering of
/// `pool` could produce.
pub fn gain_metrics(returned: &[f64], pool: &[f64], n: usize) -> Result<Gains> {
    if n == 0 {
        return Err(Error::Domain { op: "gain_metrics", detail: "n must be at least 1".into() });
    }
    let acg = returned.iter().take(n).sum::<f64>() / n as f64;
    let d = dcg(returned, n);
    let mut ideal = pool.to_vec();
    ideal.sort_by(|a, b| b.total_cmp(a));
    let idcg = dcg(&ideal, n);
    let (ndcg, idcg_zero) = if idcg > 0.0 { (d / idcg, false) } else { (0.0, true) };
    Ok(Gains { acg, dcg: d, ndcg, idcg_zero })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub top_n: usize,
    pub bits: usize,
    pub queries: usize,
    pub map: f64,
    pub acg: f64,
    pub dcg: f64,
    pub ndcg: f64,
    /// Queries left out of mAP because their class is absent from the
    /// database.
    pub skipped_queries: usize,
    /// Queries whose ideal DCG was zero.
    pub idcg_zero_queries: usize,
}

impl RetrievalReport {
    pub fn to_table(&self) -> String {
        let mut s = String::new();
        let n = self.top_n;
        let _ = writeln!(s, "{:<10} {:>10}", "metric", "value");
        for (name, v) in
            [(format!("mAP@{n}"), self.map), (format!("ACG@{n}"), self.acg), (format!("DCG@{n}"), self.dcg), (format!("NDCG@{n}"), self.ndcg)]
        {
            let _ = writeln!(s, "{name:<10} {v:>10.4}");
        }
        let _ = writeln!(s, "{} queries, {} bits, {} skipped", self.queries, self.bits, self.skipped_queries);
        s
    }
}

/// Ranks every query against `index` and averages the metrics in query
/// order.
pub fn evaluate(queries: &[HashCode], query_labels: &[usize], index: &CodeIndex, spec: &RelevanceSpec, n: usize) -> Result<RetrievalReport> {
    if queries.len() != query_labels.len() {
        return Err(Error::Shape {
            op: "evaluate",
            detail: format!("{} queries, {} labels", queries.len(), query_labels.len()),
        });
    }
    let (mut ap_sum, mut ap_count, mut skipped) = (0.0, 0usize, 0usize);
    let (mut acg, mut dcg_sum, mut ndcg, mut idcg_zero) = (0.0, 0.0, 0.0, 0usize);
    for (q, &y) in queries.iter().zip(query_labels) {
        let ranked = hamming_rank(q, index, n)?;
        let total_relevant = index.labels.iter().filter(|&&l| l == y).count();
        if total_relevant == 0 {
            skipped += 1;
        } else {
            let hits: Vec<bool> = ranked.iter().map(|&(i, _)| index.labels[i] == y).collect();
            ap_sum += average_precision(&hits, total_relevant, n);
            ap_count += 1;
        }
        let returned: Vec<f64> = ranked.iter().map(|&(i, _)| spec.score(y, index.labels[i])).collect();
        let pool: Vec<f64> = index.labels.iter().map(|&l| spec.score(y, l)).collect();
        let g = gain_metrics(&returned, &pool, n)?;
        acg += g.acg;
        dcg_sum += g.dcg;
        ndcg += g.ndcg;
        idcg_zero += g.idcg_zero as usize;
    }
    let q = queries.len().max(1) as f64;
    Ok(RetrievalReport {
        top_n: n,
        bits: index.bits,
        queries: queries.len(),
        map: if ap_count > 0 { ap_sum / ap_count as f64 } else { 0.0 },
        acg: acg / q,
        dcg: dcg_sum / q,
        ndcg: ndcg / q,
        skipped_queries: skipped,
        idcg_zero_queries: idcg_zero,
    })
}
