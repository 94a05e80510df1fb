//! Ranking metrics, model evaluation, repeated-seed runs and ablations.
//!
//! AUC is pooled over every scored sample. NDCG uses binary gains (gain equals
//! the label), skips users without positives and breaks score ties by
//! ascending item index.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::checkpoint::Checkpoint;
use crate::config::{Aggregation, Modality, RunConfig, Views};
use crate::data::{build_history_lenient, InteractionDataset, Split};
use crate::error::{Error, Result};
use crate::kg::ItemGraph;
use crate::model::{predict_click, Model, ModelInputs};
use crate::semantic::SentenceSource;
use crate::train::train;

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc(samples: &[(f64, bool)]) -> Result<f64> {
    if samples.iter().any(|(s, _)| s.is_nan()) {
        return Err(Error::UndefinedMetric("AUC of NaN scores".into()));
    }
    let positives = samples.iter().filter(|s| s.1).count() as u64;
    let negatives = samples.len() as u64 - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(format!(
            "AUC needs both classes, got {positives} positives and {negatives} negatives"
        )));
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the Mann-Whitney count, kept integral
    let mut doubled: u64 = 0;
    let mut below: u64 = 0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        let (mut p, mut n) = (0u64, 0u64);
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            if sorted[j].1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        doubled += 2 * p * below + p * n;
        below += n;
        i = j;
    }
    Ok(doubled as f64 / (2 * positives * negatives) as f64)
}

/// `(item, score, label)` sorted by descending score, ties by ascending item.
pub fn rank(mut scored: Vec<(usize, f64, bool)>) -> Vec<(usize, f64, bool)> {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    scored
}

/// DCG@k of one ranked label list over its ideal DCG; `None` without
/// positives.
pub fn ndcg_user(ranked: &[bool], k: usize) -> Option<f64> {
    let positives = ranked.iter().filter(|&&l| l).count();
    if positives == 0 {
        return None;
    }
    let disc = |r: usize| 1.0 / ((r + 2) as f64).log2();
    let dcg: f64 = ranked
        .iter()
        .take(k)
        .enumerate()
        .filter(|(_, &l)| l)
        .map(|(r, _)| disc(r))
        .sum();
    let ideal: f64 = (0..positives.min(k)).map(disc).sum();
    Some(dcg / ideal)
}

/// Mean NDCG@k over users with at least one positive.
pub fn ndcg_at_k(ranked: &[Vec<bool>], k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("NDCG cutoff must be at least 1".into()));
    }
    let vals: Vec<f64> = ranked.iter().filter_map(|r| ndcg_user(r, k)).collect();
    if vals.is_empty() {
        return Err(Error::UndefinedMetric(
            "NDCG needs a user with a positive".into(),
        ));
    }
    Ok(vals.iter().sum::<f64>() / vals.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricReport {
    pub auc: f64,
    pub ndcg: BTreeMap<usize, f64>,
    pub samples: usize,
    pub users: usize,
    /// Users ranked for NDCG but skipped for lack of positives.
    pub users_without_positives: usize,
}

/// Scores every `(user, item)` sample of `split` and computes pooled AUC plus
/// NDCG at each cutoff in `ks`. Users get the same history sample they were
/// trained with; an empty view becomes a zero vector.
pub fn evaluate_model(
    model: &Model,
    dataset: &InteractionDataset,
    split: Split,
    ks: &[usize],
) -> Result<MetricReport> {
    let dataset = if dataset.items() == model.items() {
        std::borrow::Cow::Borrowed(dataset)
    } else {
        std::borrow::Cow::Owned(dataset.reindex_items(model.items())?)
    };
    let items = model.item_matrix()?;
    let weights = model.score_weights();
    let mut pooled = Vec::new();
    let mut per_user = Vec::new();
    for u in 0..dataset.user_count() {
        let samples: Vec<(usize, bool)> = dataset
            .user_interactions(u)
            .iter()
            .filter(|x| x.split == split)
            .map(|x| (x.item, x.label))
            .collect();
        if samples.is_empty() {
            continue;
        }
        let h = build_history_lenient(&dataset, u, model.config.history_size, model.config.seed);
        let views = model.user_views(&items, &h)?;
        let mut scored = Vec::with_capacity(samples.len());
        for (item, label) in samples {
            let s = predict_click(&views, items.row_slice(item), weights)?;
            pooled.push((s, label));
            scored.push((item, s, label));
        }
        per_user.push(rank(scored).into_iter().map(|x| x.2).collect::<Vec<bool>>());
    }
    let mut ndcg = BTreeMap::new();
    for &k in ks {
        ndcg.insert(k, ndcg_at_k(&per_user, k)?);
    }
    Ok(MetricReport {
        auc: auc(&pooled)?,
        ndcg,
        samples: pooled.len(),
        users: per_user.len(),
        users_without_positives: per_user.iter().filter(|r| !r.contains(&true)).count(),
    })
}

pub const DEFAULT_CUTOFFS: [usize; 2] = [5, 10];

/// Test-split metrics of a checkpoint. Items of `dataset` unknown to the
/// checkpoint are reported together.
pub fn evaluate(checkpoint: &Checkpoint, dataset: &InteractionDataset) -> Result<MetricReport> {
    let model = Model::from_checkpoint(checkpoint)?;
    evaluate_model(&model, dataset, Split::Test, &DEFAULT_CUTOFFS)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SeedRun {
    pub seed: u64,
    pub auc: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
    pub w1: Option<f64>,
    pub w2: Option<f64>,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Summary {
    pub mean: f64,
    pub std: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Summary {
        let n = values.len().max(1) as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (values.len() - 1) as f64
        } else {
            0.0
        };
        Summary {
            mean,
            std: var.sqrt(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MultiSeedReport {
    pub runs: Vec<SeedRun>,
    pub auc: Summary,
    pub ndcg5: Summary,
    pub ndcg10: Summary,
}

impl MultiSeedReport {
    fn from_runs(runs: Vec<SeedRun>) -> Self {
        let col = |f: fn(&SeedRun) -> f64| runs.iter().map(f).collect::<Vec<_>>();
        MultiSeedReport {
            auc: Summary::of(&col(|r| r.auc)),
            ndcg5: Summary::of(&col(|r| r.ndcg5)),
            ndcg10: Summary::of(&col(|r| r.ndcg10)),
            runs,
        }
    }

    pub fn aucs(&self) -> Vec<f64> {
        self.runs.iter().map(|r| r.auc).collect()
    }
}

/// Trains and tests one model per seed; the seed replaces `config.seed`.
pub fn run_seeds(
    dataset: &InteractionDataset,
    graph: &ItemGraph,
    sentences: &SentenceSource,
    config: &RunConfig,
    seeds: &[u64],
) -> Result<MultiSeedReport> {
    let mut runs = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let cfg = RunConfig {
            seed,
            ..config.clone()
        };
        let inputs = ModelInputs::new(graph, sentences.clone(), &cfg)?;
        let outcome = train(dataset, inputs, &cfg)?;
        let report = evaluate_model(&outcome.model, dataset, Split::Test, &DEFAULT_CUTOFFS)?;
        let w = outcome.model.view_weights();
        runs.push(SeedRun {
            seed,
            auc: report.auc,
            ndcg5: report.ndcg[&5],
            ndcg10: report.ndcg[&10],
            w1: w.map(|w| w.w1),
            w2: w.map(|w| w.w2),
            best_epoch: outcome.best_epoch,
            epochs_run: outcome.log.len(),
        });
    }
    Ok(MultiSeedReport::from_runs(runs))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Full,
    SemanticOnly,
    StructuralOnly,
    SingleView,
    Concat,
    Average,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Full,
        Variant::SemanticOnly,
        Variant::StructuralOnly,
        Variant::SingleView,
        Variant::Concat,
        Variant::Average,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::SemanticOnly => "semantic_only",
            Variant::StructuralOnly => "structural_only",
            Variant::SingleView => "single_view",
            Variant::Concat => "concat",
            Variant::Average => "average",
        }
    }

    pub fn parse(s: &str) -> Result<Variant> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown variant `{s}`")))
    }

    /// `base` with only the mechanism named by the variant changed.
    pub fn apply(self, base: &RunConfig) -> RunConfig {
        let mut c = base.clone();
        match self {
            Variant::Full => {}
            Variant::SemanticOnly => c.modality = Modality::SemanticOnly,
            Variant::StructuralOnly => c.modality = Modality::StructuralOnly,
            Variant::SingleView => c.views = Views::Single,
            Variant::Concat => c.aggregation = Aggregation::Concat,
            Variant::Average => c.aggregation = Aggregation::Average,
        }
        c
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct VariantReport {
    pub variant: Variant,
    #[serde(flatten)]
    pub report: MultiSeedReport,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Delta {
    pub baseline: Variant,
    pub variant: Variant,
    pub metric: &'static str,
    /// `baseline − variant` on the metric means.
    pub absolute: f64,
    /// `absolute / variant`.
    pub relative: f64,
    /// Seeds on which the baseline beat the variant.
    pub seeds_won: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationReport {
    pub ndcg_gain: &'static str,
    pub seeds: Vec<u64>,
    pub config: String,
    pub variants: Vec<VariantReport>,
    pub deltas: Vec<Delta>,
}

/// Trains every variant on every seed and compares each variant with the
/// first one listed.
pub fn ablate(
    variants: &[Variant],
    dataset: &InteractionDataset,
    graph: &ItemGraph,
    sentences: &SentenceSource,
    config: &RunConfig,
    seeds: &[u64],
) -> Result<AblationReport> {
    if variants.is_empty() || seeds.is_empty() {
        return Err(Error::Usage(
            "ablation needs at least one variant and one seed".into(),
        ));
    }
    let mut reports = Vec::with_capacity(variants.len());
    for &v in variants {
        let cfg = v.apply(config);
        cfg.validate()?;
        log::info!("ablation variant {}", v.as_str());
        reports.push(VariantReport {
            variant: v,
            report: run_seeds(dataset, graph, sentences, &cfg, seeds)?,
        });
    }
    let base = &reports[0];
    let mut deltas = Vec::new();
    for other in &reports[1..] {
        for (metric, f) in [
            ("auc", (|r: &SeedRun| r.auc) as fn(&SeedRun) -> f64),
            ("ndcg5", |r| r.ndcg5),
            ("ndcg10", |r| r.ndcg10),
        ] {
            let a = Summary::of(&base.report.runs.iter().map(f).collect::<Vec<_>>()).mean;
            let b = Summary::of(&other.report.runs.iter().map(f).collect::<Vec<_>>()).mean;
            deltas.push(Delta {
                baseline: base.variant,
                variant: other.variant,
                metric,
                absolute: a - b,
                relative: (a - b) / b,
                seeds_won: base
                    .report
                    .runs
                    .iter()
                    .zip(&other.report.runs)
                    .filter(|(x, y)| f(x) > f(y))
                    .count(),
            });
        }
    }
    Ok(AblationReport {
        ndcg_gain: "binary",
        seeds: seeds.to_vec(),
        config: config.to_text(),
        variants: reports,
        deltas,
    })
}

impl AblationReport {
    pub fn variant(&self, v: Variant) -> Option<&MultiSeedReport> {
        self.variants
            .iter()
            .find(|r| r.variant == v)
            .map(|r| &r.report)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    /// `series,x,y` rows: one bar series per metric with variants on the x
    /// axis, plus `w1`/`w2` series over seeds.
    pub fn plot_csv(&self) -> String {
        let mut s = String::from("series,x,y\n");
        for (metric, f) in [
            (
                "auc",
                (|r: &MultiSeedReport| r.auc.mean) as fn(&MultiSeedReport) -> f64,
            ),
            ("ndcg5", |r| r.ndcg5.mean),
            ("ndcg10", |r| r.ndcg10.mean),
        ] {
            for v in &self.variants {
                s.push_str(&format!(
                    "{metric},{},{}\n",
                    v.variant.as_str(),
                    f(&v.report)
                ));
            }
        }
        for v in &self.variants {
            for r in &v.report.runs {
                if let (Some(w1), Some(w2)) = (r.w1, r.w2) {
                    s.push_str(&format!("{}.w1,{},{w1}\n", v.variant.as_str(), r.seed));
                    s.push_str(&format!("{}.w2,{},{w2}\n", v.variant.as_str(), r.seed));
                }
            }
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn pairwise(samples: &[(f64, bool)]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for p in samples.iter().filter(|s| s.1) {
            for n in samples.iter().filter(|s| !s.1) {
                pairs += 1.0;
                if p.0 > n.0 {
                    wins += 1.0;
                } else if p.0 == n.0 {
                    wins += 0.5;
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[(0.9, true), (0.8, true), (0.1, false)]).unwrap(), 1.0);
        assert_eq!(auc(&[(1.0, true), (1.0, false), (1.0, true)]).unwrap(), 0.5);
        assert!(matches!(
            auc(&[(1.0, true)]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn ndcg_examples() {
        assert_eq!(ndcg_at_k(&[vec![true, true, false]], 5).unwrap(), 1.0);
        let v = ndcg_at_k(&[vec![false, true, false]], 5).unwrap();
        assert!((v - 1.0 / 3f64.log2()).abs() < 1e-15);
        assert!(ndcg_at_k(&[vec![false]], 5).is_err());
        // users without positives are skipped
        assert_eq!(
            ndcg_at_k(&[vec![true], vec![false, false]], 3).unwrap(),
            1.0
        );
    }

    #[test]
    fn ties_break_by_item_index() {
        let r = rank(vec![(3, 1.0, false), (1, 1.0, true), (2, 2.0, false)]);
        assert_eq!(r.iter().map(|x| x.0).collect::<Vec<_>>(), vec![2, 1, 3]);
    }

    proptest! {
        #[test]
        fn auc_equals_pairwise(raw in prop::collection::vec((0u8..6, any::<bool>()), 2..120)) {
            let samples: Vec<(f64, bool)> = raw.iter().map(|&(s, l)| (s as f64 * 0.5, l)).collect();
            let both = samples.iter().any(|s| s.1) && samples.iter().any(|s| !s.1);
            prop_assume!(both);
            prop_assert_eq!(auc(&samples).unwrap(), pairwise(&samples));
        }

        #[test]
        fn auc_invariant_under_monotone_maps(raw in prop::collection::vec((-5.0f64..5.0, any::<bool>()), 2..80)) {
            prop_assume!(raw.iter().any(|s| s.1) && raw.iter().any(|s| !s.1));
            let mapped: Vec<(f64, bool)> = raw.iter().map(|&(s, l)| (s.exp() * 3.0 + 1.0, l)).collect();
            prop_assert_eq!(auc(&raw).unwrap(), auc(&mapped).unwrap());
        }
    }
}
