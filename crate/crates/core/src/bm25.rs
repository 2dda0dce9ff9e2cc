//! Okapi BM25 over a small in-memory corpus.
//!
//! Used as the reference ranking that agent-built retrieval tools are
//! checked against. Tokens are lowercase runs of alphanumeric characters.
//! IDF is the non-negative form `ln(1 + (N - n + 0.5) / (n + 0.5))`.

use std::collections::HashMap;

use num_traits::Float;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Bm25Params<F> {
    pub k1: F,
    pub b: F,
}

impl<F: Float> Default for Bm25Params<F> {
    fn default() -> Self {
        Self {
            k1: cast(1.2),
            b: cast(0.75),
        }
    }
}

fn cast<F: Float>(x: f64) -> F {
    F::from(x).expect("value representable in target float")
}

pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone)]
pub struct Bm25<F> {
    params: Bm25Params<F>,
    docs: Vec<HashMap<String, usize>>,
    lengths: Vec<usize>,
    doc_freq: HashMap<String, usize>,
    avg_len: F,
}

impl<F: Float> Bm25<F> {
    pub fn new<S: AsRef<str>>(docs: &[S], params: Bm25Params<F>) -> Self {
        let mut tfs = Vec::with_capacity(docs.len());
        let mut lengths = Vec::with_capacity(docs.len());
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        for doc in docs {
            let tokens = tokenize(doc.as_ref());
            lengths.push(tokens.len());
            let mut tf: HashMap<String, usize> = HashMap::new();
            for t in tokens {
                *tf.entry(t).or_default() += 1;
            }
            for term in tf.keys() {
                *doc_freq.entry(term.clone()).or_default() += 1;
            }
            tfs.push(tf);
        }
        let total: usize = lengths.iter().sum();
        let avg_len = if docs.is_empty() {
            F::zero()
        } else {
            cast::<F>(total as f64) / cast(docs.len() as f64)
        };
        Self {
            params,
            docs: tfs,
            lengths,
            doc_freq,
            avg_len,
        }
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn idf(&self, term: &str) -> F {
        let n = cast::<F>(self.docs.len() as f64);
        let df = cast::<F>(*self.doc_freq.get(term).unwrap_or(&0) as f64);
        let half = cast::<F>(0.5);
        (F::one() + (n - df + half) / (df + half)).ln()
    }

    pub fn score(&self, doc: usize, query: &str) -> F {
        let Bm25Params { k1, b } = self.params;
        let len_ratio = if self.avg_len > F::zero() {
            cast::<F>(self.lengths[doc] as f64) / self.avg_len
        } else {
            F::zero()
        };
        tokenize(query)
            .iter()
            .map(|term| {
                let tf = cast::<F>(*self.docs[doc].get(term).unwrap_or(&0) as f64);
                let norm = tf + k1 * (F::one() - b + b * len_ratio);
                if tf == F::zero() {
                    F::zero()
                } else {
                    self.idf(term) * tf * (k1 + F::one()) / norm
                }
            })
            .fold(F::zero(), |acc, s| acc + s)
    }

    /// Document indices ordered by descending score; ties by ascending index.
    pub fn rank(&self, query: &str) -> Vec<(usize, F)> {
        let mut scored: Vec<(usize, F)> = (0..self.docs.len())
            .map(|i| (i, self.score(i, query)))
            .collect();
        scored.sort_by(|a, b| {
            b.1.partial_cmp(&a.1)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.0.cmp(&b.0))
        });
        scored
    }
}
