//! The full recommender: item encoder, two-view user encoder and the click
//! score `w1·⟨c, u_prefer⟩ + w2·⟨c, u_dislike⟩`.

use std::collections::{BTreeMap, HashMap};
use std::rc::Rc;

use log::warn;
use rand_chacha::ChaCha8Rng;

use crate::aggregate::aggregate;
use crate::autodiff::{ParamId, Params, Tape, Var};
use crate::checkpoint::{Checkpoint, NamedTensor};
use crate::config::{Modality, RunConfig, Views};
use crate::data::{Histories, TrainExample, UserHistory};
use crate::error::{Error, Result};
use crate::kg::ItemGraph;
use crate::matrix_io::LabeledMatrix;
use crate::seed::{self, stream};
use crate::semantic::{SemanticEncoder, SentenceSource};
use crate::structural::{init_nodes, GraphContext, SdneOptions, StructuralEncoder};
use crate::tensor::{dot, Tensor};
use crate::user::{SelfAttention, UserViews};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ScoreWeights {
    pub w1: f64,
    pub w2: f64,
}

/// `w1·⟨c, u_prefer⟩ + w2·⟨c, u_dislike⟩`.
pub fn predict_click(views: &UserViews, c: &[f64], w: ScoreWeights) -> Result<f64> {
    if c.len() != views.prefer.len() || c.len() != views.dislike.len() {
        return Err(Error::Config(format!(
            "candidate has width {} but the user views have widths {} and {}",
            c.len(),
            views.prefer.len(),
            views.dislike.len()
        )));
    }
    Ok(w.w1 * dot(c, &views.prefer) + w.w2 * dot(c, &views.dislike))
}

/// Everything the model reads but never trains, aligned to one item order.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelInputs {
    pub items: Vec<String>,
    /// Neighbourhood each item attends over in the graph layers.
    pub attention_lists: Vec<Vec<usize>>,
    /// Structural input vectors, `M × init_dim`.
    pub init: Tensor,
    pub sentences: SentenceSource,
}

impl ModelInputs {
    /// Node vectors are computed from `graph` with the configured method and
    /// seed; `sentences` must follow the graph's item order.
    pub fn new(graph: &ItemGraph, sentences: SentenceSource, cfg: &RunConfig) -> Result<Self> {
        if sentences.item_count() != graph.node_count() {
            return Err(Error::Dimension {
                op: "model inputs",
                left: [graph.node_count(), 0],
                right: [sentences.item_count(), 0],
            });
        }
        let init = init_nodes(
            graph,
            cfg.init_dim,
            cfg.init_method,
            cfg.seed,
            &SdneOptions::from_config(cfg),
        )?;
        Ok(ModelInputs {
            items: graph.items().to_vec(),
            attention_lists: graph.attention_lists(),
            init,
            sentences,
        })
    }

    /// Hashed bag-of-words sentences from item texts; items without text get
    /// an empty text.
    pub fn from_texts(
        graph: &ItemGraph,
        texts: &BTreeMap<String, String>,
        cfg: &RunConfig,
    ) -> Result<Self> {
        let missing = graph
            .items()
            .iter()
            .filter(|i| !texts.contains_key(*i))
            .count();
        if missing > 0 {
            warn!("{missing} items have no text");
        }
        let bodies: Vec<&str> = graph
            .items()
            .iter()
            .map(|i| texts.get(i).map_or("", String::as_str))
            .collect();
        let src = SentenceSource::hashed(&bodies, cfg.text_length, cfg.hash_buckets)?;
        Self::new(graph, src, cfg)
    }

    pub fn from_vectors(
        graph: &ItemGraph,
        vectors: &LabeledMatrix,
        cfg: &RunConfig,
    ) -> Result<Self> {
        let t = vectors.select(graph.items())?;
        Self::new(graph, SentenceSource::Precomputed(t), cfg)
    }

    fn to_tensors(&self) -> Vec<NamedTensor> {
        let edges: Vec<Vec<f64>> = self
            .attention_lists
            .iter()
            .enumerate()
            .flat_map(|(i, l)| l.iter().map(move |&j| vec![i as f64, j as f64]))
            .collect();
        let mut out = vec![
            NamedTensor::constant("input.init", self.init.clone()),
            NamedTensor::constant("input.neighbors", pairs(&edges)),
        ];
        match &self.sentences {
            SentenceSource::Precomputed(t) => {
                out.push(NamedTensor::constant("input.sentences", t.clone()))
            }
            SentenceSource::Hashed { buckets, lists } => {
                let tokens: Vec<Vec<f64>> = lists
                    .iter()
                    .enumerate()
                    .flat_map(|(i, l)| l.iter().map(move |&b| vec![i as f64, b as f64]))
                    .collect();
                out.push(NamedTensor::constant("input.tokens", pairs(&tokens)));
                out.push(NamedTensor::constant(
                    "input.buckets",
                    Tensor::scalar(*buckets as f64),
                ));
            }
        }
        out
    }

    fn from_tensors(items: Vec<String>, tensors: &[NamedTensor]) -> Result<Self> {
        let find = |name: &str| tensors.iter().find(|t| t.name == name).map(|t| &t.value);
        let need = |name: &'static str| {
            find(name).ok_or_else(|| Error::format("checkpoint", format!("missing {name}")))
        };
        let m = items.len();
        let lists = |t: &Tensor| -> Result<Vec<Vec<usize>>> {
            let mut out = vec![Vec::new(); m];
            for r in 0..t.rows() {
                let (i, j) = (t.get(r, 0) as usize, t.get(r, 1) as usize);
                out.get_mut(i)
                    .ok_or_else(|| {
                        Error::format("checkpoint", format!("list owner {i} outside {m} items"))
                    })?
                    .push(j);
            }
            Ok(out)
        };
        let init = need("input.init")?.clone();
        let attention_lists = lists(need("input.neighbors")?)?;
        let sentences = match find("input.sentences") {
            Some(t) => SentenceSource::Precomputed(t.clone()),
            None => SentenceSource::Hashed {
                buckets: need("input.buckets")?.item() as usize,
                lists: lists(need("input.tokens")?)?,
            },
        };
        Ok(ModelInputs {
            items,
            attention_lists,
            init,
            sentences,
        })
    }
}

fn pairs(rows: &[Vec<f64>]) -> Tensor {
    if rows.is_empty() {
        Tensor::zeros(0, 2)
    } else {
        Tensor::from_rows(rows).expect("pairs have two columns")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum View {
    Prefer,
    Dislike,
}

impl View {
    pub fn as_str(self) -> &'static str {
        match self {
            View::Prefer => "prefer",
            View::Dislike => "dislike",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub config: RunConfig,
    pub params: Params,
    pub inputs: ModelInputs,
    ctx: GraphContext,
    semantic: Option<SemanticEncoder>,
    structural: Option<StructuralEncoder>,
    prefer: SelfAttention,
    /// `None` for the single-view variant.
    dislike: Option<SelfAttention>,
    weights: Option<(ParamId, ParamId)>,
}

impl Model {
    /// Fresh parameters drawn from the configured seed.
    pub fn new(config: RunConfig, inputs: ModelInputs) -> Result<Self> {
        config.validate()?;
        let m = inputs.items.len();
        if inputs.attention_lists.len() != m
            || inputs.init.rows() != m
            || inputs.sentences.item_count() != m
        {
            return Err(Error::Usage(format!(
                "model inputs disagree on the item count: {m} ids, {} neighbour lists, {} node vectors, {} sentences",
                inputs.attention_lists.len(),
                inputs.init.rows(),
                inputs.sentences.item_count()
            )));
        }
        if inputs.init.cols() != config.init_dim {
            return Err(Error::Config(format!(
                "node vectors have width {} but init_dim is {}",
                inputs.init.cols(),
                config.init_dim
            )));
        }
        let mut rng = seed::rng(config.seed, &[stream::INIT]);
        let mut params = Params::new();
        let semantic = (config.modality != Modality::StructuralOnly).then(|| {
            SemanticEncoder::new(
                &mut params,
                &inputs.sentences,
                config.sentence_dim,
                config.semantic_dim,
                &mut rng,
            )
        });
        let structural = (config.modality != Modality::SemanticOnly)
            .then(|| StructuralEncoder::new(&mut params, &config, &mut rng));
        let d = config.item_dim();
        let prefer =
            SelfAttention::new(&mut params, "prefer", d, config.attention_heads, &mut rng)?;
        let (dislike, weights) = match config.views {
            Views::Single => (None, None),
            Views::Multi => {
                let dislike = if config.tie_views {
                    prefer.clone()
                } else {
                    SelfAttention::new(&mut params, "dislike", d, config.attention_heads, &mut rng)?
                };
                let w1 = params.add("score.w1", Tensor::scalar(config.w1_init));
                let w2 = params.add("score.w2", Tensor::scalar(config.w2_init));
                (Some(dislike), Some((w1, w2)))
            }
        };
        let ctx = GraphContext::new(&inputs.attention_lists);
        Ok(Model {
            config,
            params,
            inputs,
            ctx,
            semantic,
            structural,
            prefer,
            dislike,
            weights,
        })
    }

    pub fn item_dim(&self) -> usize {
        self.config.item_dim()
    }

    pub fn items(&self) -> &[String] {
        &self.inputs.items
    }

    /// Learned `(w1, w2)`; `None` for the single-view variant.
    pub fn view_weights(&self) -> Option<ScoreWeights> {
        self.weights.map(|(a, b)| ScoreWeights {
            w1: self.params.get(a).item(),
            w2: self.params.get(b).item(),
        })
    }

    /// Entries of the parameter store that the optimizer must leave alone.
    pub fn frozen_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.params.len()];
        if self.config.freeze_structural {
            if let Some(s) = &self.structural {
                for id in s.param_ids() {
                    mask[id.index()] = true;
                }
            }
        }
        mask
    }

    /// Item representations of every item, `M × d`.
    pub fn item_embeddings(
        &self,
        tape: &mut Tape,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let s = match &self.semantic {
            Some(enc) => Some(enc.forward(tape, &self.params, &self.inputs.sentences)?),
            None => None,
        };
        let p = match &self.structural {
            Some(enc) => {
                let init = tape.constant(self.inputs.init.clone());
                Some(enc.forward(tape, &self.params, init, &self.ctx, training, rng)?)
            }
            None => None,
        };
        match (s, p) {
            (Some(s), Some(p)) => aggregate(tape, self.config.aggregation, s, p),
            (Some(x), None) | (None, Some(x)) => Ok(x),
            (None, None) => Err(Error::Usage("model has no item modality".into())),
        }
    }

    fn attention_for(&self, view: View) -> Result<&SelfAttention> {
        match view {
            View::Prefer => Ok(&self.prefer),
            View::Dislike => self
                .dislike
                .as_ref()
                .ok_or_else(|| Error::Usage("single-view model has no dislike view".into())),
        }
    }

    /// Mean-pooled self-attention over the embeddings of `sample`, as a
    /// `1 × d` row; an empty sample gives a zero row.
    pub fn user_vector(
        &self,
        tape: &mut Tape,
        items: Var,
        sample: &[usize],
        view: View,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        if sample.is_empty() {
            return Ok(tape.constant(Tensor::zeros(1, self.item_dim())));
        }
        let rows = tape.gather_rows(items, Rc::new(sample.to_vec()))?;
        let (out, _) = self.attention_for(view)?.forward(
            tape,
            &self.params,
            rows,
            self.config.attention_dropout,
            training,
            rng,
        )?;
        tape.mean_rows(out)
    }

    /// Click scores of `candidates` for one user as a `1 × n` row.
    fn click_row(
        &self,
        tape: &mut Tape,
        items: Var,
        candidates: &[usize],
        views: (Var, Option<Var>),
    ) -> Result<Var> {
        let c = tape.gather_rows(items, Rc::new(candidates.to_vec()))?;
        let sp = tape.matmul_nt(c, views.0)?;
        let sp = tape.transpose(sp);
        match (self.weights, views.1) {
            (Some((w1, w2)), Some(ud)) => {
                let sd = tape.matmul_nt(c, ud)?;
                let sd = tape.transpose(sd);
                let w1 = tape.param(&self.params, w1);
                let w2 = tape.param(&self.params, w2);
                let a = tape.scale_by(sp, w1)?;
                let b = tape.scale_by(sd, w2)?;
                tape.add(a, b)
            }
            _ => Ok(sp),
        }
    }

    /// Negative-sampling loss summed over `examples`.
    pub fn batch_loss(
        &self,
        tape: &mut Tape,
        examples: &[TrainExample],
        histories: &Histories,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        if examples.is_empty() {
            return Err(Error::Usage("empty batch".into()));
        }
        let items = self.item_embeddings(tape, training, rng)?;
        let mut users: HashMap<usize, (Var, Option<Var>)> = HashMap::new();
        let mut rows = Vec::with_capacity(examples.len());
        for ex in examples {
            let views = match users.get(&ex.user) {
                Some(v) => *v,
                None => {
                    let h = histories
                        .get(ex.user)
                        .ok_or_else(|| Error::Usage(format!("user {} has no history", ex.user)))?;
                    let v = self.views_on_tape(tape, items, h, training, rng)?;
                    users.insert(ex.user, v);
                    v
                }
            };
            let mut cand = Vec::with_capacity(1 + ex.negatives.len());
            cand.push(ex.positive);
            cand.extend_from_slice(&ex.negatives);
            rows.push(self.click_row(tape, items, &cand, views)?);
        }
        let scores = tape.concat_rows(&rows)?;
        tape.softmax_xent(scores)
    }

    fn views_on_tape(
        &self,
        tape: &mut Tape,
        items: Var,
        h: &UserHistory,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Option<Var>)> {
        let up = self.user_vector(tape, items, &h.prefer, View::Prefer, training, rng)?;
        let ud = match self.dislike {
            Some(_) => {
                Some(self.user_vector(tape, items, &h.dislike, View::Dislike, training, rng)?)
            }
            None => None,
        };
        Ok((up, ud))
    }

    /// Evaluation-mode item representations as a plain matrix.
    pub fn item_matrix(&self) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut rng = seed::rng(0, &[]);
        let items = self.item_embeddings(&mut tape, false, &mut rng)?;
        Ok(tape.value(items).clone())
    }

    /// Evaluation-mode views of one user from precomputed item rows.
    pub fn user_views(&self, items: &Tensor, h: &UserHistory) -> Result<UserViews> {
        let mut tape = Tape::new();
        let mut rng = seed::rng(0, &[]);
        let iv = tape.constant(items.clone());
        let (up, ud) = self.views_on_tape(&mut tape, iv, h, false, &mut rng)?;
        Ok(UserViews {
            user: h.user,
            prefer: tape.value(up).data().to_vec(),
            dislike: match ud {
                Some(v) => tape.value(v).data().to_vec(),
                None => vec![0.0; self.item_dim()],
            },
        })
    }

    /// Weights used when scoring; the single-view variant scores `⟨c, u⟩`.
    pub fn score_weights(&self) -> ScoreWeights {
        self.view_weights()
            .unwrap_or(ScoreWeights { w1: 1.0, w2: 0.0 })
    }

    /// Attention matrices of one user: `(view, head, z × z matrix)`.
    pub fn attention_maps(
        &self,
        items: &Tensor,
        h: &UserHistory,
    ) -> Result<Vec<(View, usize, Tensor)>> {
        let mut out = Vec::new();
        let views: &[View] = if self.dislike.is_some() {
            &[View::Prefer, View::Dislike]
        } else {
            &[View::Prefer]
        };
        for &view in views {
            let sample = match view {
                View::Prefer => &h.prefer,
                View::Dislike => &h.dislike,
            };
            if sample.is_empty() {
                continue;
            }
            let (_, betas) = self
                .attention_for(view)?
                .apply(&self.params, &items.gather_rows(sample))?;
            out.extend(betas.into_iter().enumerate().map(|(k, b)| (view, k, b)));
        }
        Ok(out)
    }

    pub fn to_checkpoint(&self, epoch: usize, metrics: Vec<(String, f64)>) -> Checkpoint {
        let mut tensors: Vec<NamedTensor> = self
            .params
            .iter()
            .map(|(_, name, t)| NamedTensor::trainable(name, t.clone()))
            .collect();
        tensors.extend(self.inputs.to_tensors());
        Checkpoint {
            config: self.config.to_text(),
            epoch,
            metrics,
            items: self.inputs.items.clone(),
            tensors,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Model> {
        let config = RunConfig::from_text(&ck.config)?;
        let inputs = ModelInputs::from_tensors(ck.items.clone(), &ck.tensors)?;
        let mut model = Model::new(config, inputs)?;
        let stored: HashMap<&str, &Tensor> = ck
            .tensors
            .iter()
            .filter(|t| t.trainable)
            .map(|t| (t.name.as_str(), &t.value))
            .collect();
        if stored.len() != model.params.len() {
            return Err(Error::format(
                "checkpoint",
                format!(
                    "{} trainable tensors stored, model has {}",
                    stored.len(),
                    model.params.len()
                ),
            ));
        }
        let ids: Vec<ParamId> = model.params.ids().collect();
        for id in ids {
            let name = model.params.name(id).to_string();
            let t = stored
                .get(name.as_str())
                .ok_or_else(|| Error::format("checkpoint", format!("missing tensor {name}")))?;
            if t.shape() != model.params.get(id).shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!(
                        "tensor {name} has shape {:?}, expected {:?}",
                        t.shape(),
                        model.params.get(id).shape()
                    ),
                ));
            }
            *model.params.get_mut(id) = (*t).clone();
        }
        Ok(model)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Aggregation;
    use crate::gradcheck::{check_gradients, GradCheck};

    pub(crate) fn toy(config: &RunConfig) -> (Model, Histories, Vec<TrainExample>) {
        let items: Vec<String> = (0..8).map(|i| format!("i{i}")).collect();
        let graph =
            ItemGraph::from_edges(items, &[(0, 1), (1, 2), (2, 3), (4, 5), (5, 6), (0, 6)], 0)
                .unwrap();
        let texts = ["a b", "b c", "c d e", "", "e f", "f a", "g", "a g h"];
        let src = SentenceSource::hashed(&texts, 5, config.hash_buckets).unwrap();
        let inputs = ModelInputs::new(&graph, src, config).unwrap();
        let model = Model::new(config.clone(), inputs).unwrap();
        let histories = Histories {
            per_user: vec![
                Some(UserHistory {
                    user: 0,
                    prefer: vec![0, 1, 1],
                    dislike: vec![4, 5, 7],
                }),
                Some(UserHistory {
                    user: 1,
                    prefer: vec![2, 6, 3],
                    dislike: vec![0, 0, 1],
                }),
            ],
            excluded: vec![],
        };
        let examples = vec![
            TrainExample {
                user: 0,
                positive: 2,
                negatives: vec![4, 7],
            },
            TrainExample {
                user: 1,
                positive: 3,
                negatives: vec![1, 0],
            },
        ];
        (model, histories, examples)
    }

    pub(crate) fn toy_config() -> RunConfig {
        RunConfig {
            init_method: crate::config::InitMethod::SeededRandom,
            init_dim: 3,
            gat_heads_concat: 2,
            gat_head_dim: 2,
            gat_heads_average: 1,
            structural_dim: 8,
            hash_buckets: 16,
            sentence_dim: 3,
            semantic_dim: 8,
            attention_heads: 2,
            ..RunConfig::default()
        }
    }

    #[test]
    fn click_examples() {
        let v = UserViews {
            user: 0,
            prefer: vec![1.0, 1.0],
            dislike: vec![1.0, 0.0],
        };
        let c = [1.0, 1.0];
        assert_eq!(
            predict_click(&v, &c, ScoreWeights { w1: 1.0, w2: 0.0 }).unwrap(),
            2.0
        );
        assert_eq!(
            predict_click(&v, &[0.0, 0.0], ScoreWeights { w1: 0.3, w2: 0.7 }).unwrap(),
            0.0
        );
        assert_eq!(
            predict_click(&v, &c, ScoreWeights { w1: 0.5, w2: -0.5 }).unwrap(),
            0.5
        );
        assert!(predict_click(&v, &[1.0], ScoreWeights { w1: 1.0, w2: 1.0 }).is_err());
    }

    #[test]
    fn full_model_gradients() {
        let cfg = toy_config();
        let (model, histories, examples) = toy(&cfg);
        let report = check_gradients(&model.params, GradCheck::default(), |p, tape| {
            let mut m = model.clone();
            m.params = p.clone();
            let mut rng = seed::rng(0, &[]);
            m.batch_loss(tape, &examples, &histories, false, &mut rng)
        })
        .unwrap();
        assert!(report.passed(), "{:?}", report.mismatches);
        assert!(report.checked.iter().any(|(n, _)| n == "score.w2"));
    }

    #[test]
    fn variants_build() {
        for (modality, agg, views) in [
            (Modality::SemanticOnly, Aggregation::Concat, Views::Multi),
            (Modality::StructuralOnly, Aggregation::Concat, Views::Single),
            (Modality::Both, Aggregation::Average, Views::Multi),
        ] {
            let cfg = RunConfig {
                modality,
                aggregation: agg,
                views,
                ..toy_config()
            };
            let (model, h, ex) = toy(&cfg);
            let mut tape = Tape::new();
            let loss = model
                .batch_loss(&mut tape, &ex, &h, true, &mut seed::rng(1, &[]))
                .unwrap();
            assert!(tape.value(loss).item().is_finite());
            assert_eq!(model.item_matrix().unwrap().cols(), cfg.item_dim());
            assert_eq!(model.view_weights().is_some(), views == Views::Multi);
        }
    }

    #[test]
    fn checkpoint_restores_scores() {
        let (model, h, _) = toy(&toy_config());
        let back = Model::from_checkpoint(&model.to_checkpoint(0, vec![])).unwrap();
        let a = model.item_matrix().unwrap();
        assert_eq!(a, back.item_matrix().unwrap());
        let hist = h.get(1).unwrap();
        assert_eq!(
            model.user_views(&a, hist).unwrap(),
            back.user_views(&a, hist).unwrap()
        );
    }
}
