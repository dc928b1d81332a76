//! Exact maximum-inner-product search over the encoded prompt pool, and
//! assembly of the final LM input.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::encoder::{tokenize, EncoderParams, Vocab};
use crate::error::{Error, Result};
use crate::io;
use crate::taskdata::PromptPool;

pub const DEFAULT_TOP_K: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalIndex {
    pub dim: usize,
    pub prompt_ids: Vec<usize>,
    /// Row-major, one row per prompt.
    pub matrix: Vec<f64>,
    pub params_fingerprint: String,
}

impl RetrievalIndex {
    /// Wraps precomputed rows; ids must be unique.
    pub fn from_rows(
        rows: Vec<Vec<f64>>,
        prompt_ids: Vec<usize>,
        params_fingerprint: String,
    ) -> Result<Self> {
        if rows.len() != prompt_ids.len() {
            return Err(Error::Data("row count differs from prompt id count".into()));
        }
        let dim = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != dim) {
            return Err(Error::DimMismatch {
                expected: dim,
                actual: bad.len(),
            });
        }
        Ok(Self {
            dim,
            prompt_ids,
            matrix: rows.concat(),
            params_fingerprint,
        })
    }

    pub fn len(&self) -> usize {
        self.prompt_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prompt_ids.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.matrix[i * self.dim..(i + 1) * self.dim]
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        io::write_json(path, self)
    }

    /// Loads an index and checks it was built with the given parameters.
    pub fn load(path: &Path, expected_fingerprint: &str) -> Result<Self> {
        let index: RetrievalIndex = io::read_json(path)?;
        if index.params_fingerprint != expected_fingerprint {
            return Err(Error::Fingerprint {
                expected: expected_fingerprint.to_string(),
                found: index.params_fingerprint,
            });
        }
        if index.matrix.len() != index.dim * index.prompt_ids.len() {
            return Err(Error::Data(
                "index matrix size does not match dim × rows".into(),
            ));
        }
        Ok(index)
    }
}

/// Encodes every pool record with the prompt tower.
pub fn build_index(
    params: &EncoderParams,
    vocab: &Vocab,
    pool: &PromptPool,
    max_len: usize,
) -> Result<RetrievalIndex> {
    if pool.is_empty() {
        return Err(Error::Data("cannot index an empty pool".into()));
    }
    let rows = pool
        .records
        .par_iter()
        .map(|r| params.encode_prompt(&tokenize(vocab, &r.text, max_len)))
        .collect::<Result<Vec<_>>>()?;
    RetrievalIndex::from_rows(
        rows,
        pool.records.iter().map(|r| r.prompt_id).collect(),
        params.fingerprint(),
    )
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Hit {
    score: f64,
    id: usize,
}

// "Greater" means better: higher score, then lower id. Signed zeros compare
// equal; total_cmp only orders NaN.
impl Ord for Hit {
    fn cmp(&self, other: &Self) -> Ordering {
        self.score
            .partial_cmp(&other.score)
            .unwrap_or_else(|| self.score.total_cmp(&other.score))
            .then_with(|| other.id.cmp(&self.id))
    }
}

impl PartialOrd for Hit {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Eq for Hit {}

/// Ids of the `k` rows with the largest inner product, best first; ties go
/// to the lower prompt id. Full scan, no approximation.
pub fn retrieve_topk(index: &RetrievalIndex, query: &[f64], k: usize) -> Result<Vec<usize>> {
    Ok(retrieve_topk_scored(index, query, k)?
        .into_iter()
        .map(|(id, _)| id)
        .collect())
}

pub fn retrieve_topk_scored(
    index: &RetrievalIndex,
    query: &[f64],
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    if query.len() != index.dim {
        return Err(Error::DimMismatch {
            expected: index.dim,
            actual: query.len(),
        });
    }
    let k = k.min(index.len());
    if k == 0 {
        return Ok(Vec::new());
    }
    // min-heap of the current best k (Reverse ordering via negation of Ord)
    let mut heap: BinaryHeap<std::cmp::Reverse<Hit>> = BinaryHeap::with_capacity(k + 1);
    for (row, &id) in index.prompt_ids.iter().enumerate() {
        let score: f64 = index.row(row).iter().zip(query).map(|(a, b)| a * b).sum();
        let hit = Hit { score, id };
        if heap.len() < k {
            heap.push(std::cmp::Reverse(hit));
        } else if hit > heap.peek().expect("heap holds k hits").0 {
            heap.pop();
            heap.push(std::cmp::Reverse(hit));
        }
    }
    let mut hits: Vec<Hit> = heap.into_iter().map(|r| r.0).collect();
    hits.sort_by(|a, b| b.cmp(a));
    Ok(hits.into_iter().map(|h| (h.id, h.score)).collect())
}

/// Joins retrieved prompts (best first) and the input with `\n`, placing the
/// best prompt right before the input: `p_K \n … \n p_1 \n x`.
pub fn assemble_input(retrieved: &[&str], input_text: &str) -> String {
    let mut parts: Vec<&str> = retrieved.iter().rev().copied().collect();
    parts.push(input_text);
    parts.join("\n")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::io::Rng;
    use proptest::prelude::*;
    use rand::{Rng as _, SeedableRng};

    fn index(rows: Vec<Vec<f64>>) -> RetrievalIndex {
        let n = rows.len();
        RetrievalIndex::from_rows(rows, (0..n).collect(), "fp".into()).unwrap()
    }

    fn brute_force(index: &RetrievalIndex, q: &[f64], k: usize) -> Vec<usize> {
        let mut all: Vec<(usize, f64)> = (0..index.len())
            .map(|i| {
                (
                    index.prompt_ids[i],
                    index.row(i).iter().zip(q).map(|(a, b)| a * b).sum(),
                )
            })
            .collect();
        all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        all.into_iter().take(k).map(|(id, _)| id).collect()
    }

    #[test]
    fn small_example() {
        let idx = index(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        assert_eq!(retrieve_topk(&idx, &[2.0, 1.0], 2).unwrap(), vec![2, 0]);
        assert_eq!(retrieve_topk(&idx, &[2.0, 1.0], 10).unwrap(), vec![2, 0, 1]);
        assert_eq!(retrieve_topk(&idx, &[0.0, 0.0], 2).unwrap(), vec![0, 1]);
        assert!(retrieve_topk(&idx, &[1.0], 2).is_err());
        assert!(retrieve_topk(&idx, &[1.0, 1.0], 0).unwrap().is_empty());
    }

    #[test]
    fn signed_zero_scores_tie() {
        // -1 * 0 gives -0.0 for row 0 and +0.0 for row 1
        let idx = index(vec![vec![-1.0], vec![1.0]]);
        assert_eq!(retrieve_topk(&idx, &[0.0], 1).unwrap(), vec![0]);
        let idx = index(vec![vec![1.0], vec![-1.0]]);
        assert_eq!(retrieve_topk(&idx, &[0.0], 2).unwrap(), vec![0, 1]);
    }

    #[test]
    fn matches_brute_force_with_ties() {
        let mut rng = Rng::seed_from_u64(17);
        for _ in 0..200 {
            let n = rng.random_range(1..80);
            let d = rng.random_range(1..8);
            // integer coordinates make ties common
            let rows: Vec<Vec<f64>> = (0..n)
                .map(|_| (0..d).map(|_| rng.random_range(-2..3) as f64).collect())
                .collect();
            let q: Vec<f64> = (0..d).map(|_| rng.random_range(-2..3) as f64).collect();
            let idx = index(rows);
            for k in [1, 3, 10] {
                assert_eq!(
                    retrieve_topk(&idx, &q, k).unwrap(),
                    brute_force(&idx, &q, k)
                );
            }
        }
    }

    proptest! {
        #[test]
        fn row_order_does_not_matter(seed in any::<u64>(), k in 1usize..6) {
            let mut rng = Rng::seed_from_u64(seed);
            let n = 20;
            let rows: Vec<Vec<f64>> = (0..n).map(|_| (0..3).map(|_| rng.random_range(-1..2) as f64).collect()).collect();
            let q: Vec<f64> = (0..3).map(|_| rng.random_range(-1..2) as f64).collect();
            let a = index(rows.clone());
            let mut perm: Vec<usize> = (0..n).collect();
            perm.reverse();
            let b = RetrievalIndex::from_rows(perm.iter().map(|&i| rows[i].clone()).collect(), perm.clone(), "fp".into()).unwrap();
            prop_assert_eq!(retrieve_topk(&a, &q, k).unwrap(), retrieve_topk(&b, &q, k).unwrap());
        }
    }

    #[test]
    fn assembly_order() {
        assert_eq!(assemble_input(&["pA", "pB", "pC"], "x"), "pC\npB\npA\nx");
        assert_eq!(assemble_input(&[], "x"), "x");
        assert_eq!(assemble_input(&["p1"], "x"), "p1\nx");
        assert_eq!(
            assemble_input(&["a", "b", "c"], "x").matches('\n').count(),
            3
        );
    }

    #[test]
    fn fingerprint_checked_on_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("index.json");
        let idx = index(vec![vec![1.0, 2.0]]);
        idx.save(&path).unwrap();
        assert_eq!(RetrievalIndex::load(&path, "fp").unwrap(), idx);
        assert!(matches!(
            RetrievalIndex::load(&path, "other"),
            Err(Error::Fingerprint { .. })
        ));
    }
}
