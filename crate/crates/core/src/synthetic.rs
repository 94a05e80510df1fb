//! Planted datasets with known structure.
//!
//! Items carry Gaussian taste factors `f` and sparse binary aversion features
//! `g`. A user with tastes `t` and aversions `s ≥ 0` has affinity
//! `t·f − s·g + noise·ε` for every item they rate, and likes exactly the items
//! above their median affinity. Item text names quantile bins of `f`; the
//! knowledge graph ties items that share an aversion feature.

use std::collections::BTreeMap;

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::data::{binarize, split, InteractionDataset, RatingRecord, SplitConfig};
use crate::error::{Error, Result};
use crate::kg::{build_item_graph, ItemGraph, Triple, TEXT_RELATION};
use crate::seed::{self, stream};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSpec {
    pub users: usize,
    pub items: usize,
    pub prefer_dim: usize,
    pub dislike_dim: usize,
    /// Standard deviation of the affinity noise.
    pub noise: f64,
    pub seed: u64,
    pub ratings_per_user: usize,
    /// Probability that an item has a given aversion feature.
    pub dislike_rate: f64,
    /// Scale of the half-normal user aversions.
    pub aversion_scale: f64,
    /// Quantile bins per taste factor in the item text.
    pub text_bins: usize,
    /// Entities shared by items with the same aversion feature.
    pub entities_per_feature: usize,
    pub threshold: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            users: 200,
            items: 100,
            prefer_dim: 2,
            dislike_dim: 2,
            noise: 0.1,
            seed: 0,
            ratings_per_user: 50,
            dislike_rate: 0.3,
            aversion_scale: 2.0,
            text_bins: 8,
            entities_per_feature: 4,
            threshold: 3,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("synthetic spec: {m}")));
        if self.users == 0 || self.items < 2 {
            return bad("need at least one user and two items");
        }
        if self.ratings_per_user < 10 || self.ratings_per_user > self.items {
            return bad("ratings per user must lie in 10..=items");
        }
        if self.prefer_dim == 0 || self.text_bins == 0 {
            return bad("need at least one taste factor and one text bin");
        }
        if !(0.0..=1.0).contains(&self.dislike_rate)
            || !(self.noise >= 0.0)
            || !(self.aversion_scale >= 0.0)
        {
            return bad("rates and scales must be non-negative, dislike_rate at most 1");
        }
        if self.entities_per_feature <= self.threshold && self.dislike_dim > 0 {
            return bad("entities per feature must exceed the sharing threshold");
        }
        Ok(())
    }
}

/// The planted factors, row `i` belonging to item or user `i`.
#[derive(Clone, Debug, PartialEq)]
pub struct Factors {
    pub item_tastes: Tensor,
    pub item_aversions: Tensor,
    pub user_tastes: Tensor,
    pub user_aversions: Tensor,
}

impl Factors {
    /// Noise-free affinity of `user` for `item`.
    pub fn affinity(&self, user: usize, item: usize) -> f64 {
        let d = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        d(
            self.user_tastes.row_slice(user),
            self.item_tastes.row_slice(item),
        ) - d(
            self.user_aversions.row_slice(user),
            self.item_aversions.row_slice(item),
        )
    }
}

#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub ratings: Vec<RatingRecord>,
    /// Binarized and split with the spec seed.
    pub dataset: InteractionDataset,
    pub triples: Vec<Triple>,
    pub graph: ItemGraph,
    pub texts: BTreeMap<String, String>,
    pub factors: Factors,
}

pub fn item_id(i: usize) -> String {
    format!("m{i:04}")
}

pub fn user_id(u: usize) -> String {
    format!("u{u:04}")
}

fn normal<R: Rng>(rng: &mut R, rows: usize, cols: usize) -> Tensor {
    let data = (0..rows * cols)
        .map(|_| StandardNormal.sample(rng))
        .collect();
    Tensor::from_vec(rows, cols, data).expect("shape matches")
}

/// Bin index of every value among `values`, by rank.
fn quantile_bins(values: &[f64], bins: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]).then(a.cmp(&b)));
    let mut out = vec![0; values.len()];
    for (rank, &i) in order.iter().enumerate() {
        out[i] = rank * bins / values.len();
    }
    out
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed, &[stream::SYNTHETIC]);
    let (m, n) = (spec.items, spec.users);

    let item_tastes = normal(&mut rng, m, spec.prefer_dim);
    let aversion_data = (0..m * spec.dislike_dim)
        .map(|_| f64::from(u8::from(rng.random_bool(spec.dislike_rate))))
        .collect();
    let item_aversions = Tensor::from_vec(m, spec.dislike_dim, aversion_data)?;
    let user_tastes = normal(&mut rng, n, spec.prefer_dim);
    let user_aversions =
        normal(&mut rng, n, spec.dislike_dim).map(|v| v.abs() * spec.aversion_scale);
    let factors = Factors {
        item_tastes,
        item_aversions,
        user_tastes,
        user_aversions,
    };

    let mut ratings = Vec::with_capacity(n * spec.ratings_per_user);
    for u in 0..n {
        let mut items: Vec<usize> = index::sample(&mut rng, m, spec.ratings_per_user).into_vec();
        items.sort_unstable();
        let scores: Vec<f64> = items
            .iter()
            .map(|&i| {
                factors.affinity(u, i)
                    + spec.noise * Distribution::<f64>::sample(&StandardNormal, &mut rng)
            })
            .collect();
        let ranks = quantile_bins(&scores, scores.len());
        for (k, &i) in items.iter().enumerate() {
            ratings.push(RatingRecord {
                user: user_id(u),
                item: item_id(i),
                rating: 5.0 * (ranks[k] as f64 + 0.5) / scores.len() as f64,
            });
        }
    }

    let mut texts = BTreeMap::new();
    let bins: Vec<Vec<usize>> = (0..spec.prefer_dim)
        .map(|k| {
            let col: Vec<f64> = (0..m).map(|i| factors.item_tastes.get(i, k)).collect();
            quantile_bins(&col, spec.text_bins)
        })
        .collect();
    for i in 0..m {
        let words: Vec<String> = (0..spec.prefer_dim)
            .map(|k| format!("taste{k}bin{}", bins[k][i]))
            .collect();
        texts.insert(item_id(i), words.join(" "));
    }

    let mut triples = Vec::new();
    for i in 0..m {
        let id = item_id(i);
        for k in 0..spec.dislike_dim {
            if factors.item_aversions.get(i, k) > 0.0 {
                for e in 0..spec.entities_per_feature {
                    triples.push(Triple::new(&id, "has_trait", &format!("trait{k}_{e}")));
                }
            }
        }
        triples.push(Triple::new(
            &id,
            "noted_for",
            &format!("misc{}", rng.random_range(0..m.max(1))),
        ));
        let mut text = Triple::new(&id, TEXT_RELATION, &texts[&id]);
        text.text = true;
        triples.push(text);
    }
    let ids: Vec<String> = (0..m).map(item_id).collect();
    let graph = build_item_graph(&triples, &ids, spec.threshold);

    let dataset = split(&binarize(&ratings, 10)?, &SplitConfig::default(), spec.seed);
    Ok(SyntheticData {
        ratings,
        dataset,
        triples,
        graph,
        texts,
        factors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noiseless_labels_follow_the_planted_rule() {
        let spec = SyntheticSpec {
            noise: 0.0,
            users: 30,
            ..SyntheticSpec::default()
        };
        let data = generate_synthetic(&spec).unwrap();
        let ds = &data.dataset;
        for u in 0..ds.user_count() {
            let uid: usize = ds.users()[u][1..].parse().unwrap();
            let aff: Vec<(f64, bool)> = ds
                .user_interactions(u)
                .iter()
                .map(|x| {
                    let iid: usize = ds.items()[x.item][1..].parse().unwrap();
                    (data.factors.affinity(uid, iid), x.label)
                })
                .collect();
            let mut sorted: Vec<f64> = aff.iter().map(|a| a.0).collect();
            sorted.sort_by(f64::total_cmp);
            let h = sorted.len() / 2;
            let median = (sorted[h - 1] + sorted[h]) / 2.0;
            for (a, label) in aff {
                assert_eq!(label, a > median);
            }
        }
    }

    #[test]
    fn deterministic_and_balanced() {
        let spec = SyntheticSpec::default();
        let a = generate_synthetic(&spec).unwrap();
        let b = generate_synthetic(&spec).unwrap();
        assert_eq!(a.ratings, b.ratings);
        assert_eq!(a.graph, b.graph);
        assert_eq!(a.dataset, b.dataset);
        let m = a.dataset.manifest();
        let frac = m.positive as f64 / m.ratings as f64;
        assert!((0.45..=0.55).contains(&frac), "{frac}");
        assert_eq!(m.users, 200);
    }

    #[test]
    fn graph_links_items_sharing_a_trait() {
        let data = generate_synthetic(&SyntheticSpec::default()).unwrap();
        let g = &data.factors.item_aversions;
        for i in 0..100 {
            for j in i + 1..100 {
                let shared = (0..2).any(|k| g.get(i, k) > 0.0 && g.get(j, k) > 0.0);
                assert_eq!(data.graph.has_edge(i, j), shared);
            }
        }
    }
}
