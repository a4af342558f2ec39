//! Item embeddings, the recommendation classifier and candidate scoring.
//!
//! The classifier is linear in the concatenation of the context encoding and
//! the optional assist vector, projected into item space and matched against
//! each candidate embedding:
//!
//! `score_i = e_i · (W_ctx c + W_assist ê + b)`
//!
//! A missing assist vector is the zero vector, so the plain and the
//! assisted heads share every parameter.

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::backend::softmax;
use crate::corpus::Catalog;
use crate::error::{Error, Result};
use crate::util::derive_seed;

/// Lower clamp on probabilities inside `-ln`.
pub const PROB_EPSILON: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ItemEmbeddingTable {
    dim: usize,
    vectors: BTreeMap<String, Vec<f64>>,
    #[serde(skip)]
    accum: BTreeMap<String, Vec<f64>>,
}

impl ItemEmbeddingTable {
    pub fn new(dim: usize, vectors: BTreeMap<String, Vec<f64>>) -> Result<Self> {
        for v in vectors.values() {
            if v.len() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: v.len(),
                });
            }
        }
        Ok(ItemEmbeddingTable {
            dim,
            vectors,
            accum: BTreeMap::new(),
        })
    }

    /// Small random vectors for every product in the catalogs.
    pub fn random<'a>(
        catalogs: impl IntoIterator<Item = &'a Catalog>,
        dim: usize,
        seed: u64,
    ) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let mut vectors = BTreeMap::new();
        for catalog in catalogs {
            for p in catalog.products() {
                let mut rng =
                    ChaCha8Rng::seed_from_u64(derive_seed(seed, &["item", &p.product_id]));
                let v = (0..dim).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
                vectors.insert(p.product_id.clone(), v);
            }
        }
        ItemEmbeddingTable {
            dim,
            vectors,
            accum: BTreeMap::new(),
        }
    }

    /// Vectors built from the product's attribute values: the normalized sum
    /// of one seeded random direction per `attribute=value`, plus a small
    /// product-specific perturbation. Products sharing values start close.
    pub fn from_attributes<'a>(
        catalogs: impl IntoIterator<Item = &'a Catalog>,
        dim: usize,
        seed: u64,
    ) -> Self {
        let direction = |parts: &[&str], scale: f64| -> Vec<f64> {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, parts));
            (0..dim)
                .map(|_| rng.gen_range(-1.0..1.0) * scale)
                .collect::<Vec<f64>>()
        };
        let mut vectors = BTreeMap::new();
        for catalog in catalogs {
            for p in catalog.products() {
                let mut v = direction(&["item", &p.product_id], 0.1);
                for (attr, value) in &p.attributes {
                    let d = direction(&["value", &catalog.category.id, attr, value], 1.0);
                    v.iter_mut().zip(d).for_each(|(a, b)| *a += b);
                }
                let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
                v.iter_mut().for_each(|x| *x /= norm);
                vectors.insert(p.product_id.clone(), v);
            }
        }
        ItemEmbeddingTable {
            dim,
            vectors,
            accum: BTreeMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn get(&self, product_id: &str) -> Result<&[f64]> {
        self.vectors
            .get(product_id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::UnknownProduct(product_id.to_string()))
    }

    pub fn covers(&self, catalog: &Catalog) -> bool {
        catalog
            .products()
            .iter()
            .all(|p| self.vectors.contains_key(&p.product_id))
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    fn apply_gradient(&mut self, product_id: &str, grad: &[f64], lr: f64) {
        let Some(v) = self.vectors.get_mut(product_id) else {
            return;
        };
        let acc = self
            .accum
            .entry(product_id.to_string())
            .or_insert_with(|| vec![0.0; grad.len()]);
        for k in 0..v.len() {
            acc[k] += grad[k] * grad[k];
            v[k] -= lr * grad[k] / (acc[k].sqrt() + 1e-8);
        }
    }
}

/// Candidate ids with probabilities aligned to them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationScores {
    pub candidates: Vec<String>,
    pub probabilities: Vec<f64>,
}

impl RecommendationScores {
    pub fn new(candidates: Vec<String>, probabilities: Vec<f64>) -> Result<Self> {
        if candidates.len() != probabilities.len() || candidates.is_empty() {
            return Err(Error::InvalidArgument(format!(
                "{} candidates but {} probabilities",
                candidates.len(),
                probabilities.len()
            )));
        }
        let sum: f64 = probabilities.iter().sum();
        if probabilities.iter().any(|p| !(*p >= 0.0)) || (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "probabilities must be a distribution (sum {sum})"
            )));
        }
        Ok(RecommendationScores {
            candidates,
            probabilities,
        })
    }

    pub fn probability_of(&self, product_id: &str) -> Option<f64> {
        self.candidates
            .iter()
            .position(|c| c == product_id)
            .map(|i| self.probabilities[i])
    }

    /// Candidate indices ranked by probability descending, ties by product
    /// id ascending.
    pub fn ranking(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.candidates.len()).collect();
        idx.sort_by(|&a, &b| {
            self.probabilities[b]
                .total_cmp(&self.probabilities[a])
                .then_with(|| self.candidates[a].cmp(&self.candidates[b]))
        });
        idx
    }

    pub fn ranked_ids(&self) -> Vec<&str> {
        self.ranking()
            .into_iter()
            .map(|i| self.candidates[i].as_str())
            .collect()
    }

    /// 1-based rank of `product_id` in [`Self::ranking`].
    pub fn rank_of(&self, product_id: &str) -> Option<usize> {
        self.ranking()
            .into_iter()
            .position(|i| self.candidates[i] == product_id)
            .map(|r| r + 1)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RecommendationHead {
    item_dim: usize,
    context_dim: usize,
    /// `item_dim × context_dim`, row-major.
    context_weights: Vec<f64>,
    /// `item_dim × item_dim`, row-major.
    assist_weights: Vec<f64>,
    bias: Vec<f64>,
    #[serde(skip)]
    accum: Option<Box<HeadAccum>>,
}

#[derive(Debug, Clone, PartialEq)]
struct HeadAccum {
    context: Vec<f64>,
    assist: Vec<f64>,
    bias: Vec<f64>,
}

/// Gradients of one recommendation loss with respect to the head inputs.
#[derive(Debug, Clone)]
pub struct HeadGradients {
    pub context: Vec<f64>,
}

impl RecommendationHead {
    /// Random context weights; assist weights and bias start at zero.
    pub fn new(item_dim: usize, context_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, &["head"]));
        let scale = 1.0 / (context_dim as f64).sqrt();
        RecommendationHead {
            item_dim,
            context_dim,
            context_weights: (0..item_dim * context_dim)
                .map(|_| rng.gen_range(-1.0..1.0) * scale)
                .collect(),
            assist_weights: vec![0.0; item_dim * item_dim],
            bias: vec![0.0; item_dim],
            accum: None,
        }
    }

    pub fn from_parts(
        item_dim: usize,
        context_dim: usize,
        context_weights: Vec<f64>,
        assist_weights: Vec<f64>,
        bias: Vec<f64>,
    ) -> Result<Self> {
        let check = |expected: usize, actual: usize| {
            if expected != actual {
                Err(Error::DimensionMismatch { expected, actual })
            } else {
                Ok(())
            }
        };
        check(item_dim * context_dim, context_weights.len())?;
        check(item_dim * item_dim, assist_weights.len())?;
        check(item_dim, bias.len())?;
        Ok(RecommendationHead {
            item_dim,
            context_dim,
            context_weights,
            assist_weights,
            bias,
            accum: None,
        })
    }

    pub fn item_dim(&self) -> usize {
        self.item_dim
    }

    pub fn context_dim(&self) -> usize {
        self.context_dim
    }

    /// `W_ctx c + W_assist ê + b`.
    fn query(&self, context: &[f64], assist: Option<&[f64]>) -> Vec<f64> {
        let mut q = self.bias.clone();
        for (j, qj) in q.iter_mut().enumerate() {
            let row = &self.context_weights[j * self.context_dim..(j + 1) * self.context_dim];
            *qj += row.iter().zip(context).map(|(w, c)| w * c).sum::<f64>();
            if let Some(a) = assist {
                let row = &self.assist_weights[j * self.item_dim..(j + 1) * self.item_dim];
                *qj += row.iter().zip(a).map(|(w, x)| w * x).sum::<f64>();
            }
        }
        q
    }

    fn check_inputs(&self, context: &[f64], assist: Option<&[f64]>) -> Result<()> {
        if context.len() != self.context_dim {
            return Err(Error::DimensionMismatch {
                expected: self.context_dim,
                actual: context.len(),
            });
        }
        if let Some(a) = assist {
            if a.len() != self.item_dim {
                return Err(Error::DimensionMismatch {
                    expected: self.item_dim,
                    actual: a.len(),
                });
            }
        }
        Ok(())
    }

    /// Unnormalized classifier scores for each candidate.
    pub fn logits(
        &self,
        embeddings: &ItemEmbeddingTable,
        context: &[f64],
        assist: Option<&[f64]>,
        candidates: &[String],
    ) -> Result<Vec<f64>> {
        self.check_inputs(context, assist)?;
        if embeddings.dim() != self.item_dim {
            return Err(Error::DimensionMismatch {
                expected: self.item_dim,
                actual: embeddings.dim(),
            });
        }
        let q = self.query(context, assist);
        candidates
            .iter()
            .map(|c| Ok(embeddings.get(c)?.iter().zip(&q).map(|(e, q)| e * q).sum()))
            .collect()
    }

    pub fn score(
        &self,
        embeddings: &ItemEmbeddingTable,
        context: &[f64],
        assist: Option<&[f64]>,
        candidates: &[String],
    ) -> Result<RecommendationScores> {
        if candidates.is_empty() {
            return Err(Error::InvalidArgument("empty candidate set".into()));
        }
        let logits = self.logits(embeddings, context, assist, candidates)?;
        Ok(RecommendationScores {
            candidates: candidates.to_vec(),
            probabilities: softmax(&logits),
        })
    }

    /// One AdaGrad step on `-ln r_gold`. Updates the head and the candidate
    /// embeddings; returns the loss before the update and the gradient with
    /// respect to the context encoding. The assist vector is treated as a
    /// constant.
    #[allow(clippy::too_many_arguments)]
    pub fn train_step(
        &mut self,
        embeddings: &mut ItemEmbeddingTable,
        context: &[f64],
        assist: Option<&[f64]>,
        candidates: &[String],
        gold: &str,
        lr: f64,
    ) -> Result<(f64, HeadGradients)> {
        let scores = self.score(embeddings, context, assist, candidates)?;
        let loss = recommendation_loss(&scores, gold)?;
        let q = self.query(context, assist);

        // dL/ds_i = r_i - [i = gold]
        let mut ds = scores.probabilities.clone();
        let gold_idx = candidates
            .iter()
            .position(|c| c == gold)
            .expect("checked by loss");
        ds[gold_idx] -= 1.0;

        let mut dq = vec![0.0; self.item_dim];
        for (c, g) in candidates.iter().zip(&ds) {
            let e = embeddings.get(c)?;
            for k in 0..self.item_dim {
                dq[k] += g * e[k];
            }
        }
        let mut dctx = vec![0.0; self.context_dim];
        for j in 0..self.item_dim {
            let row = &self.context_weights[j * self.context_dim..(j + 1) * self.context_dim];
            for k in 0..self.context_dim {
                dctx[k] += dq[j] * row[k];
            }
        }

        for (c, g) in candidates.iter().zip(&ds) {
            let grad: Vec<f64> = q.iter().map(|qk| g * qk).collect();
            embeddings.apply_gradient(c, &grad, lr);
        }

        let (cd, idim) = (self.context_dim, self.item_dim);
        let acc = self.accum.get_or_insert_with(|| {
            Box::new(HeadAccum {
                context: vec![0.0; idim * cd],
                assist: vec![0.0; idim * idim],
                bias: vec![0.0; idim],
            })
        });
        for j in 0..idim {
            for k in 0..cd {
                let g = dq[j] * context[k];
                let i = j * cd + k;
                acc.context[i] += g * g;
                self.context_weights[i] -= lr * g / (acc.context[i].sqrt() + 1e-8);
            }
            if let Some(a) = assist {
                for k in 0..idim {
                    let g = dq[j] * a[k];
                    let i = j * idim + k;
                    acc.assist[i] += g * g;
                    self.assist_weights[i] -= lr * g / (acc.assist[i].sqrt() + 1e-8);
                }
            }
            acc.bias[j] += dq[j] * dq[j];
            self.bias[j] -= lr * dq[j] / (acc.bias[j].sqrt() + 1e-8);
        }
        Ok((loss, HeadGradients { context: dctx }))
    }
}

/// `-ln r_gold`, with `r_gold` clamped at [`PROB_EPSILON`].
pub fn recommendation_loss(scores: &RecommendationScores, gold: &str) -> Result<f64> {
    let p = scores.probability_of(gold).ok_or_else(|| {
        Error::InvalidArgument(format!("gold product {gold:?} is not a candidate"))
    })?;
    Ok(-p.max(PROB_EPSILON).ln())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ids(n: usize) -> Vec<String> {
        (0..n).map(|i| format!("p{i}")).collect()
    }

    fn one_hot_table(n: usize) -> ItemEmbeddingTable {
        let vectors = (0..n)
            .map(|i| {
                let mut v = vec![0.0; n];
                v[i] = 1.0;
                (format!("p{i}"), v)
            })
            .collect();
        ItemEmbeddingTable::new(n, vectors).unwrap()
    }

    fn identity(n: usize) -> Vec<f64> {
        (0..n * n)
            .map(|i| if i / n == i % n { 1.0 } else { 0.0 })
            .collect()
    }

    #[test]
    fn zero_context_dot_product_is_uniform() {
        let n = 5;
        let head =
            RecommendationHead::from_parts(n, n, identity(n), vec![0.0; n * n], vec![0.0; n])
                .unwrap();
        let s = head
            .score(&one_hot_table(n), &vec![0.0; n], None, &ids(n))
            .unwrap();
        for p in &s.probabilities {
            assert!((p - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn single_candidate_has_probability_one() {
        let head = RecommendationHead::new(3, 4, 1);
        let table =
            ItemEmbeddingTable::new(3, [("a".to_string(), vec![0.3, -2.0, 5.0])].into()).unwrap();
        let s = head
            .score(&table, &[1.0, 2.0, 3.0, 4.0], None, &["a".to_string()])
            .unwrap();
        assert_eq!(s.probabilities, vec![1.0]);
    }

    #[test]
    fn unknown_candidate_is_an_error() {
        let head = RecommendationHead::new(2, 2, 1);
        let table = one_hot_table(2);
        let err = head
            .score(&table, &[0.0, 0.0], None, &["zz".to_string()])
            .unwrap_err();
        assert!(matches!(err, Error::UnknownProduct(id) if id == "zz"));
    }

    #[test]
    fn loss_closed_forms() {
        let s = RecommendationScores::new(vec!["a".into()], vec![1.0]).unwrap();
        assert_eq!(recommendation_loss(&s, "a").unwrap(), 0.0);

        let uniform = RecommendationScores::new(ids(20), vec![0.05; 20]).unwrap();
        let l = recommendation_loss(&uniform, "p3").unwrap();
        assert!((l - 20f64.ln()).abs() < 1e-12);
        assert!((l - 2.9957).abs() < 1e-4);

        let s = RecommendationScores::new(vec!["a".into(), "b".into()], vec![1.0, 0.0]).unwrap();
        assert!((recommendation_loss(&s, "b").unwrap() + 1e-12f64.ln()).abs() < 1e-12);

        assert!(recommendation_loss(&s, "c").is_err());
    }

    #[test]
    fn ranking_breaks_ties_by_id() {
        let s = RecommendationScores::new(
            vec!["b".into(), "a".into(), "c".into()],
            vec![0.4, 0.4, 0.2],
        )
        .unwrap();
        assert_eq!(s.ranked_ids(), vec!["a", "b", "c"]);
        assert_eq!(s.rank_of("b"), Some(2));
    }

    #[test]
    fn context_gradient_matches_finite_differences() {
        let (idim, cdim) = (3, 4);
        let mut head = RecommendationHead::new(idim, cdim, 5);
        head.bias = vec![0.1, -0.2, 0.3];
        let table = ItemEmbeddingTable::random(std::iter::empty(), idim, 0);
        let mut table = {
            let mut t = table;
            for (i, id) in ids(4).iter().enumerate() {
                t.vectors.insert(
                    id.clone(),
                    vec![0.1 * i as f64, -0.3, 0.2 + 0.05 * i as f64],
                );
            }
            t
        };
        let ctx = vec![0.5, -0.1, 0.2, 0.7];
        let cands = ids(4);
        let loss_at = |h: &RecommendationHead, t: &ItemEmbeddingTable, c: &[f64]| {
            recommendation_loss(&h.score(t, c, None, &cands).unwrap(), "p2").unwrap()
        };
        let h0 = head.clone();
        let t0 = table.clone();
        let (_, grads) = head
            .train_step(&mut table, &ctx, None, &cands, "p2", 0.0)
            .unwrap();
        let eps = 1e-6;
        for k in 0..cdim {
            let mut up = ctx.clone();
            up[k] += eps;
            let mut down = ctx.clone();
            down[k] -= eps;
            let fd = (loss_at(&h0, &t0, &up) - loss_at(&h0, &t0, &down)) / (2.0 * eps);
            assert!(
                (fd - grads.context[k]).abs() < 1e-7,
                "k={k}: {fd} vs {}",
                grads.context[k]
            );
        }
    }

    #[test]
    fn training_step_reduces_loss() {
        let mut head = RecommendationHead::new(4, 4, 2);
        let mut table = ItemEmbeddingTable::new(
            4,
            ids(5)
                .into_iter()
                .enumerate()
                .map(|(i, id)| {
                    (
                        id,
                        (0..4).map(|k| ((i * 4 + k) as f64 * 0.37).sin()).collect(),
                    )
                })
                .collect(),
        )
        .unwrap();
        let ctx = vec![0.3, 0.1, -0.4, 0.9];
        let cands = ids(5);
        let (first, _) = head
            .train_step(&mut table, &ctx, None, &cands, "p1", 0.1)
            .unwrap();
        let mut last = first;
        for _ in 0..50 {
            last = head
                .train_step(&mut table, &ctx, None, &cands, "p1", 0.1)
                .unwrap()
                .0;
        }
        assert!(last < first * 0.5, "{first} -> {last}");
    }
}
