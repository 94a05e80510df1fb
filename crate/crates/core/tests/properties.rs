use std::collections::{BTreeSet, HashSet};

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use mmrec::aggregate::{aggregate_average, aggregate_concat};
use mmrec::autodiff::{softmax_rows, Params, Tape};
use mmrec::data::{
    binarize, epoch_examples, split, Histories, RatingRecord, Split, SplitConfig, UserHistory,
};
use mmrec::eval::{auc, ndcg_at_k, rank};
use mmrec::kg::{build_item_graph, Triple};
use mmrec::model::{predict_click, ScoreWeights};
use mmrec::semantic::{hashed_bow, project, tokenize_pad};
use mmrec::structural::{GatLayer, GatMode, GraphContext};
use mmrec::user::{mean_pool, SelfAttention, UserViews};
use mmrec::Tensor;

fn tensor(r: usize, c: usize, v: &[f64]) -> Tensor {
    Tensor::from_vec(r, c, v[..r * c].to_vec()).unwrap()
}

fn ratings(users: &[Vec<u8>]) -> Vec<RatingRecord> {
    users
        .iter()
        .enumerate()
        .flat_map(|(u, rs)| {
            rs.iter().enumerate().map(move |(i, &r)| RatingRecord {
                user: format!("u{u}"),
                item: format!("i{}", (i * 7 + u) % 40),
                rating: f64::from(r) * 0.5,
            })
        })
        .collect()
}

fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_normalise_and_ignore_shifts(
        v in prop::collection::vec(-2.0f64..2.0, 12),
        shift in -50.0f64..50.0,
    ) {
        let x = tensor(3, 4, &v);
        let s = softmax_rows(&x);
        for r in 0..3 {
            prop_assert!((s.row_slice(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
        let shifted = softmax_rows(&x.map(|a| a + shift));
        prop_assert!(max_abs_diff(&s, &shifted) < 1e-12);
    }

    #[test]
    fn dataset_contracts(
        users in prop::collection::vec(prop::collection::vec(0u8..11, 10..30), 1..12),
        seed in any::<u64>(),
        size in 1usize..8,
        negatives in 1usize..6,
    ) {
        let ds = binarize(&ratings(&users), 10).unwrap();
        let ds = split(&ds, &SplitConfig::default(), seed);
        for u in 0..ds.user_count() {
            let xs = ds.user_interactions(u);
            let avg = ds.user_avg(u);
            let mut seen = HashSet::new();
            for x in xs {
                prop_assert_eq!(x.label, x.rating > avg);
                prop_assert!(seen.insert(x.item), "item listed twice for one user");
            }
        }
        let histories = Histories::build(&ds, size, seed);
        let test_items = |u: usize| -> BTreeSet<usize> {
            ds.user_interactions(u).iter().filter(|x| x.split != Split::Train).map(|x| x.item).collect()
        };
        for h in histories.included() {
            prop_assert_eq!(h.prefer.len(), size);
            prop_assert_eq!(h.dislike.len(), size);
            let held = test_items(h.user);
            prop_assert!(h.prefer.iter().chain(&h.dislike).all(|i| !held.contains(i)));
        }
        for ex in epoch_examples(&ds, &histories, negatives, seed).unwrap() {
            let held = test_items(ex.user);
            prop_assert_eq!(ex.negatives.len(), negatives);
            prop_assert!(!held.contains(&ex.positive));
            prop_assert!(ex.negatives.iter().all(|i| !held.contains(i)));
        }
    }

    #[test]
    fn item_graph_is_simple_and_order_free(
        raw in prop::collection::vec((0usize..15, 0usize..12), 0..80),
        threshold in 0usize..3,
        seed in any::<u64>(),
    ) {
        let items: Vec<String> = (0..15).map(|i| format!("m{i}")).collect();
        let triples: Vec<Triple> = raw.iter().map(|&(i, e)| Triple::new(&items[i], "r", &format!("e{e}"))).collect();
        let g = build_item_graph(&triples, &items, threshold);
        for &(a, b) in g.edges() {
            prop_assert!(a < b);
            prop_assert!(g.has_edge(b, a));
        }
        for i in 0..items.len() {
            prop_assert!(!g.has_edge(i, i));
        }
        let mut shuffled = triples.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(build_item_graph(&shuffled, &items, threshold), g);
    }

    #[test]
    fn gat_is_equivariant_to_relabelling(
        n in 2usize..9,
        seed in any::<u64>(),
        average in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut lists = vec![Vec::new(); n];
        for i in 0..n {
            for j in i + 1..n {
                if (i * 31 + j * 17 + seed as usize).is_multiple_of(3) {
                    lists[i].push(j);
                    lists[j].push(i);
                }
            }
        }
        for (i, l) in lists.iter_mut().enumerate() {
            if l.is_empty() {
                l.push(i);
            }
        }
        let mode = if average { GatMode::Average } else { GatMode::Concat };
        let mut params = Params::new();
        let layer = GatLayer::new(&mut params, "g", 3, 2, 2, mode, 0.2, &mut rng);
        let x = Tensor::randn(n, 3, 1.0, &mut rng);
        // perm[i] is the new label of node i
        let perm: Vec<usize> = (0..n).map(|i| (i + 1) % n).collect();
        let mut inv = vec![0; n];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        let relabelled: Vec<Vec<usize>> = (0..n).map(|p| lists[inv[p]].iter().map(|&j| perm[j]).collect()).collect();
        let run = |lists: &[Vec<usize>], x: &Tensor| {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let mut r = ChaCha8Rng::seed_from_u64(0);
            let out = layer.forward(&mut tape, &params, xv, &GraphContext::new(lists), 0.0, false, &mut r).unwrap();
            tape.value(out).clone()
        };
        let a = run(&lists, &x);
        let b = run(&relabelled, &x.gather_rows(&inv));
        prop_assert!(max_abs_diff(&a, &b.gather_rows(&perm)) < 1e-12);
    }

    #[test]
    fn projection_is_affine(
        v1 in prop::collection::vec(-2.0f64..2.0, 4),
        v2 in prop::collection::vec(-2.0f64..2.0, 4),
        w in prop::collection::vec(-2.0f64..2.0, 12),
        b in prop::collection::vec(-2.0f64..2.0, 3),
        alpha in -1.0f64..2.0,
    ) {
        let (w, b) = (tensor(4, 3, &w), tensor(1, 3, &b));
        let mix: Vec<f64> = v1.iter().zip(&v2).map(|(x, y)| alpha * x + (1.0 - alpha) * y).collect();
        let lhs = project(&mix, &w, &b).unwrap();
        let (p1, p2) = (project(&v1, &w, &b).unwrap(), project(&v2, &w, &b).unwrap());
        for c in 0..3 {
            prop_assert!((lhs[c] - (alpha * p1[c] + (1.0 - alpha) * p2[c])).abs() < 1e-10);
        }
    }

    #[test]
    fn bag_of_words_ignores_order_and_padding(
        words in prop::collection::vec("[a-e]{1,3}", 1..8),
        extra in 0usize..10,
        seed in any::<u64>(),
    ) {
        let table = Tensor::randn(64, 3, 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
        let len = words.len();
        let text = words.join(" ");
        let mut rev = words.clone();
        rev.reverse();
        let a = hashed_bow(&tokenize_pad(&text, len).unwrap(), &table);
        let b = hashed_bow(&tokenize_pad(&rev.join(" "), len + extra).unwrap(), &table);
        for c in 0..3 {
            prop_assert!((a[c] - b[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn aggregation_laws(
        s in prop::collection::vec(-5.0f64..5.0, 1..8),
        seed in any::<u64>(),
    ) {
        let p: Vec<f64> = s.iter().map(|v| v * 0.5 - (seed % 7) as f64).collect();
        let r = aggregate_concat(&s, &p);
        prop_assert_eq!(&r[..s.len()], &s[..]);
        prop_assert_eq!(&r[s.len()..], &p[..]);
        prop_assert_eq!(aggregate_average(&s, &p).unwrap(), aggregate_average(&p, &s).unwrap());
    }

    #[test]
    fn self_attention_is_permutation_equivariant(
        z in 1usize..8,
        heads in 1usize..3,
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = heads * 2;
        let mut params = Params::new();
        let sa = SelfAttention::new(&mut params, "s", d, heads, &mut rng).unwrap();
        let rows = Tensor::randn(z, d, 1.0, &mut rng);
        let perm: Vec<usize> = (0..z).rev().collect();
        let (a, _) = sa.apply(&params, &rows).unwrap();
        let (b, _) = sa.apply(&params, &rows.gather_rows(&perm)).unwrap();
        prop_assert!(max_abs_diff(&a.gather_rows(&perm), &b) < 1e-12);
        let (ma, mb) = (mean_pool(&a).unwrap(), mean_pool(&b).unwrap());
        prop_assert!(ma.iter().zip(&mb).all(|(x, y)| (x - y).abs() < 1e-12));
    }

    #[test]
    fn click_scales_with_the_candidate(
        c in prop::collection::vec(-2.0f64..2.0, 4),
        up in prop::collection::vec(-2.0f64..2.0, 4),
        ud in prop::collection::vec(-2.0f64..2.0, 4),
        lambda in -3.0f64..3.0,
        w1 in -2.0f64..2.0,
        w2 in -2.0f64..2.0,
    ) {
        let views = UserViews { user: 0, prefer: up, dislike: ud };
        let w = ScoreWeights { w1, w2 };
        let scaled: Vec<f64> = c.iter().map(|v| v * lambda).collect();
        let a = predict_click(&views, &c, w).unwrap();
        let b = predict_click(&views, &scaled, w).unwrap();
        prop_assert!((b - lambda * a).abs() < 1e-12);
    }

    #[test]
    fn label_oracle_scores_are_perfect(labels in prop::collection::vec(prop::collection::vec(any::<bool>(), 1..15), 1..10)) {
        let mut pooled = Vec::new();
        let mut ranked = Vec::new();
        for (u, ls) in labels.iter().enumerate() {
            let scored: Vec<(usize, f64, bool)> =
                ls.iter().enumerate().map(|(i, &l)| ((i * 5 + u) % 97, f64::from(u8::from(l)), l)).collect();
            pooled.extend(scored.iter().map(|x| (x.1, x.2)));
            ranked.push(rank(scored).into_iter().map(|x| x.2).collect::<Vec<_>>());
        }
        if pooled.iter().any(|p| p.1) && pooled.iter().any(|p| !p.1) {
            prop_assert_eq!(auc(&pooled).unwrap(), 1.0);
        }
        if pooled.iter().any(|p| p.1) {
            for k in [1, 5, 10] {
                prop_assert_eq!(ndcg_at_k(&ranked, k).unwrap(), 1.0);
            }
        }
    }

    #[test]
    fn tie_break_is_deterministic(scores in prop::collection::vec((0u8..3, any::<bool>()), 1..20), seed in any::<u64>()) {
        let items: Vec<(usize, f64, bool)> =
            scores.iter().enumerate().map(|(i, &(s, l))| (i, f64::from(s), l)).collect();
        let mut shuffled = items.clone();
        use rand::seq::SliceRandom;
        shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        prop_assert_eq!(rank(items), rank(shuffled));
    }
}

#[test]
fn loss_ignores_the_order_of_negatives() {
    use mmrec::config::{InitMethod, RunConfig};
    use mmrec::data::TrainExample;
    use mmrec::kg::ItemGraph;
    use mmrec::model::{Model, ModelInputs};
    use mmrec::semantic::SentenceSource;

    let cfg = RunConfig {
        init_method: InitMethod::SeededRandom,
        init_dim: 3,
        gat_heads_concat: 2,
        gat_head_dim: 2,
        gat_heads_average: 1,
        structural_dim: 4,
        hash_buckets: 8,
        sentence_dim: 3,
        semantic_dim: 4,
        attention_heads: 2,
        ..RunConfig::default()
    };
    let items: Vec<String> = (0..6).map(|i| format!("i{i}")).collect();
    let graph = ItemGraph::from_edges(items, &[(0, 1), (2, 3), (3, 4)], 0).unwrap();
    let src = SentenceSource::hashed(&["a", "b c", "c", "d a", "e", "f b"], 4, 8).unwrap();
    let model = Model::new(cfg.clone(), ModelInputs::new(&graph, src, &cfg).unwrap()).unwrap();
    let histories = Histories {
        per_user: vec![Some(UserHistory {
            user: 0,
            prefer: vec![0, 2],
            dislike: vec![1, 5],
        })],
        excluded: vec![],
    };
    let loss = |negatives: Vec<usize>| {
        let mut tape = Tape::new();
        let ex = TrainExample {
            user: 0,
            positive: 3,
            negatives,
        };
        let l = model
            .batch_loss(
                &mut tape,
                &[ex],
                &histories,
                false,
                &mut ChaCha8Rng::seed_from_u64(0),
            )
            .unwrap();
        tape.value(l).item()
    };
    let base = loss(vec![1, 4, 5, 0]);
    for order in [vec![5, 0, 4, 1], vec![0, 1, 4, 5], vec![4, 5, 1, 0]] {
        assert!((loss(order) - base).abs() < 1e-12);
    }
}
