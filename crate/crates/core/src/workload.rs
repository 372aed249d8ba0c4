//! Synthetic corpus and Zipf-skewed retrieval traces.

use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::Fnv64;
use crate::retrieval::CorpusDoc;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorkloadError {
    #[error("invalid workload spec: {0}")]
    Invalid(String),
}

pub type Result<T, E = WorkloadError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorkloadSpec {
    pub n_docs: usize,
    pub doc_len_tokens: usize,
    pub n_queries: usize,
    pub top_k: usize,
    pub zipf_s: f64,
    pub seed: u64,
    pub vocab_size: usize,
}

impl Default for WorkloadSpec {
    fn default() -> Self {
        Self { n_docs: 1000, doc_len_tokens: 128, n_queries: 1000, top_k: 10, zipf_s: 1.0, seed: 0, vocab_size: 256 }
    }
}

impl WorkloadSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_docs", self.n_docs),
            ("doc_len_tokens", self.doc_len_tokens),
            ("n_queries", self.n_queries),
            ("top_k", self.top_k),
            ("vocab_size", self.vocab_size),
        ] {
            if v == 0 {
                return Err(WorkloadError::Invalid(format!("{name} must be positive")));
            }
        }
        if !(self.zipf_s.is_finite() && self.zipf_s > 0.0) {
            return Err(WorkloadError::Invalid(format!("zipf_s must be positive, got {}", self.zipf_s)));
        }
        if self.top_k > self.n_docs {
            return Err(WorkloadError::Invalid(format!("top_k {} exceeds n_docs {}", self.top_k, self.n_docs)));
        }
        Ok(())
    }

    pub fn doc_id(&self, index: usize) -> String {
        let width = self.n_docs.saturating_sub(1).to_string().len().max(5);
        format!("doc{index:0width$}")
    }

    /// Chunk id of a document's first (and, when the chunk size covers the
    /// document, only) chunk.
    pub fn chunk_id(&self, index: usize) -> String {
        format!("{}-0", self.doc_id(index))
    }
}

fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h = Fnv64::new();
    h.write(&seed.to_le_bytes());
    h.write(label.as_bytes());
    ChaCha8Rng::seed_from_u64(h.finish())
}

/// `n_docs` documents of `doc_len_tokens` uniform token ids.
pub fn generate_corpus(spec: &WorkloadSpec) -> Result<Vec<CorpusDoc>> {
    spec.validate()?;
    let mut rng = stream(spec.seed, "corpus");
    Ok((0..spec.n_docs)
        .map(|i| CorpusDoc {
            id: spec.doc_id(i),
            tokens: (0..spec.doc_len_tokens).map(|_| rng.random_range(0..spec.vocab_size as u32)).collect(),
        })
        .collect())
}

pub fn corpus_jsonl(docs: &[CorpusDoc]) -> String {
    let mut out = String::new();
    for d in docs {
        out.push_str(&serde_json::to_string(d).expect("doc serializes"));
        out.push('\n');
    }
    out
}

/// For each query, `top_k` distinct document indices drawn without
/// replacement with weight `1 / rank^zipf_s` (document `i` has rank `i+1`).
/// Indices appear in draw order.
pub fn generate_accesses(spec: &WorkloadSpec) -> Result<Vec<Vec<usize>>> {
    spec.validate()?;
    let log_weights: Vec<f64> = (1..=spec.n_docs).map(|r| -spec.zipf_s * (r as f64).ln()).collect();
    let mut rng = stream(spec.seed, "accesses");
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(spec.n_docs);
    let mut out = Vec::with_capacity(spec.n_queries);
    for _ in 0..spec.n_queries {
        // Exponential race: doc i finishes at E_i / w_i with E_i ~ Exp(1);
        // the k earliest finishers are a weighted sample without replacement.
        keyed.clear();
        for (i, lw) in log_weights.iter().enumerate() {
            let u: f64 = rng.random();
            let e = -(1.0 - u).ln();
            keyed.push((e.ln() - lw, i));
        }
        let by_key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if spec.top_k < keyed.len() {
            keyed.select_nth_unstable_by(spec.top_k - 1, by_key);
        }
        let top = &mut keyed[..spec.top_k];
        top.sort_by(by_key);
        out.push(top.iter().map(|&(_, i)| i).collect());
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkewReport {
    pub counts: Vec<u64>,
    pub total_accesses: u64,
    pub n_accessed_ge2: usize,
    pub fraction_ge2: f64,
}

impl SkewReport {
    /// Share of all accesses that hit the `fraction` most-accessed documents.
    pub fn top_share(&self, fraction: f64) -> f64 {
        let mut sorted = self.counts.clone();
        sorted.sort_unstable_by(|a, b| b.cmp(a));
        let n = ((sorted.len() as f64 * fraction).ceil() as usize).max(1);
        let top: u64 = sorted[..n.min(sorted.len())].iter().sum();
        if self.total_accesses == 0 {
            0.0
        } else {
            top as f64 / self.total_accesses as f64
        }
    }
}

pub fn skew_report(accesses: &[Vec<usize>], n_docs: usize) -> SkewReport {
    let mut counts = vec![0u64; n_docs];
    for set in accesses {
        for &d in set {
            counts[d] += 1;
        }
    }
    let n_accessed_ge2 = counts.iter().filter(|&&c| c >= 2).count();
    SkewReport {
        total_accesses: counts.iter().sum(),
        fraction_ge2: if n_docs == 0 { 0.0 } else { n_accessed_ge2 as f64 / n_docs as f64 },
        n_accessed_ge2,
        counts,
    }
}

/// One line of an access trace file.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceLine {
    pub query_index: usize,
    pub ids: Vec<String>,
}

pub fn trace_lines(spec: &WorkloadSpec, accesses: &[Vec<usize>]) -> Vec<TraceLine> {
    accesses
        .iter()
        .enumerate()
        .map(|(q, set)| TraceLine { query_index: q, ids: set.iter().map(|&d| spec.chunk_id(d)).collect() })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec() -> WorkloadSpec {
        WorkloadSpec { n_docs: 100, doc_len_tokens: 16, n_queries: 200, top_k: 10, zipf_s: 1.0, seed: 42, vocab_size: 64 }
    }

    #[test]
    fn corpus_is_deterministic() {
        let a = generate_corpus(&spec()).unwrap();
        assert_eq!(a, generate_corpus(&spec()).unwrap());
        assert_eq!(a.len(), 100);
        assert!(a.iter().all(|d| d.tokens.len() == 16 && d.tokens.iter().all(|&t| t < 64)));
        assert_eq!(corpus_jsonl(&a).lines().count(), 100);
        assert_eq!(a[7].id, "doc00007");
    }

    #[test]
    fn accesses_are_distinct_and_conserved() {
        let acc = generate_accesses(&spec()).unwrap();
        assert_eq!(acc, generate_accesses(&spec()).unwrap());
        for set in &acc {
            let mut s = set.clone();
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), 10);
        }
        let r = skew_report(&acc, 100);
        assert_eq!(r.total_accesses, 200 * 10);
        assert_eq!(r.counts.iter().sum::<u64>(), 2000);
    }

    #[test]
    fn top_k_above_n_docs_rejected() {
        let s = WorkloadSpec { top_k: 101, ..spec() };
        assert!(generate_accesses(&s).is_err());
        assert!(WorkloadSpec { zipf_s: 0.0, ..spec() }.validate().is_err());
    }

    #[test]
    fn rank_one_is_hottest() {
        let s = WorkloadSpec { n_queries: 2000, top_k: 3, ..spec() };
        let r = skew_report(&generate_accesses(&s).unwrap(), s.n_docs);
        let max = *r.counts.iter().max().unwrap();
        assert_eq!(r.counts[0], max);
        assert!(r.counts[0] > r.counts[1]);
    }

    #[test]
    fn single_query_and_doubling() {
        let s = WorkloadSpec { n_queries: 1, ..spec() };
        let acc = generate_accesses(&s).unwrap();
        let r = skew_report(&acc, s.n_docs);
        assert!(r.counts.iter().all(|&c| c <= 1));
        assert_eq!(r.n_accessed_ge2, 0);

        let acc = generate_accesses(&spec()).unwrap();
        let once = skew_report(&acc, 100);
        let twice = skew_report(&[acc.clone(), acc].concat(), 100);
        assert!(once.counts.iter().zip(&twice.counts).all(|(a, b)| *b == 2 * a));
    }

    #[test]
    fn trace_ids_name_first_chunks() {
        let s = spec();
        let lines = trace_lines(&s, &[vec![3, 0]]);
        assert_eq!(lines[0].ids, ["doc00003-0", "doc00000-0"]);
    }
}
