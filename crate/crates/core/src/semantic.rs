//! Semantic item vectors: text is tokenised and padded, turned into a
//! sentence vector (precomputed, or a mean of hashed token embeddings), then
//! projected by an affine layer.

use std::collections::BTreeMap;
use std::fs;
use std::hash::Hasher;
use std::path::Path;

use fnv::FnvHasher;
use log::warn;

use crate::autodiff::{ParamId, Params, Segments, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{dot, Tensor};

pub const PAD: &str = "<pad>";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    /// Exactly `L` entries; trailing entries may be [`PAD`].
    pub tokens: Vec<String>,
    pub original_length: usize,
}

impl TokenSequence {
    /// Tokens that are not padding.
    pub fn content(&self) -> &[String] {
        &self.tokens[..self.original_length.min(self.tokens.len())]
    }
}

/// Lowercased whitespace tokens, truncated at the end or padded to `length`.
pub fn tokenize_pad(text: &str, length: usize) -> Result<TokenSequence> {
    if length == 0 {
        return Err(Error::Config("text length must be at least 1".into()));
    }
    let words: Vec<String> = text.split_whitespace().map(str::to_lowercase).collect();
    if words.is_empty() {
        warn!("empty text becomes {length} padding tokens");
    }
    let original_length = words.len();
    let mut tokens: Vec<String> = words.into_iter().take(length).collect();
    tokens.resize(length, PAD.to_string());
    Ok(TokenSequence {
        tokens,
        original_length,
    })
}

/// FNV-1a bucket of a token.
pub fn hash_bucket(token: &str, buckets: usize) -> usize {
    let mut h = FnvHasher::default();
    h.write(token.as_bytes());
    (h.finish() % buckets as u64) as usize
}

/// Bucket ids of the non-padding tokens of each sequence.
pub fn bucket_lists(seqs: &[TokenSequence], buckets: usize) -> Vec<Vec<usize>> {
    seqs.iter()
        .map(|s| {
            s.content()
                .iter()
                .map(|t| hash_bucket(t, buckets))
                .collect()
        })
        .collect()
}

/// Mean of the table rows of the non-padding tokens; all padding gives zeros.
pub fn hashed_bow(seq: &TokenSequence, table: &Tensor) -> Vec<f64> {
    let mut out = vec![0.0; table.cols()];
    let content = seq.content();
    if content.is_empty() {
        return out;
    }
    for t in content {
        for (o, v) in out
            .iter_mut()
            .zip(table.row_slice(hash_bucket(t, table.rows())))
        {
            *o += v;
        }
    }
    let n = content.len() as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

/// `s = v W + b` for a row vector `v`, with `W` stored `d_e × d_h`.
pub fn project(v: &[f64], w: &Tensor, b: &Tensor) -> Result<Vec<f64>> {
    if v.len() != w.rows() || b.shape() != [1, w.cols()] {
        return Err(Error::Config(format!(
            "projection expects a {}-vector and a 1×{} bias, got {} and {:?}",
            w.rows(),
            w.cols(),
            v.len(),
            b.shape()
        )));
    }
    let wt = w.transpose();
    Ok((0..w.cols())
        .map(|c| dot(v, wt.row_slice(c)) + b.data()[c])
        .collect())
}

/// `item_id<TAB>text` lines.
pub fn read_item_texts(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = BTreeMap::new();
    for (no, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, body) = line.split_once('\t').ok_or_else(|| {
            Error::format(
                "item text file",
                format!("{}:{}: missing tab", path.display(), no + 1),
            )
        })?;
        out.insert(id.trim().to_string(), body.to_string());
    }
    Ok(out)
}

/// Where sentence vectors come from at training time.
#[derive(Clone, Debug, PartialEq)]
pub enum SentenceSource {
    /// Fixed `M × d_e` vectors, one row per item.
    Precomputed(Tensor),
    /// Per-item bucket ids into a trainable `buckets × d_e` table.
    Hashed {
        buckets: usize,
        lists: Vec<Vec<usize>>,
    },
}

impl SentenceSource {
    pub fn hashed(texts: &[&str], length: usize, buckets: usize) -> Result<Self> {
        let seqs = texts
            .iter()
            .map(|t| tokenize_pad(t, length))
            .collect::<Result<Vec<_>>>()?;
        Ok(SentenceSource::Hashed {
            buckets,
            lists: bucket_lists(&seqs, buckets),
        })
    }

    pub fn item_count(&self) -> usize {
        match self {
            SentenceSource::Precomputed(t) => t.rows(),
            SentenceSource::Hashed { lists, .. } => lists.len(),
        }
    }
}

/// Trainable part of the semantic path.
#[derive(Clone, Debug, PartialEq)]
pub struct SemanticEncoder {
    pub table: Option<ParamId>,
    pub w: ParamId,
    pub b: ParamId,
    segments: Option<std::rc::Rc<Segments>>,
}

impl SemanticEncoder {
    pub fn new<R: rand::Rng + ?Sized>(
        params: &mut Params,
        source: &SentenceSource,
        sentence_dim: usize,
        out_dim: usize,
        rng: &mut R,
    ) -> Self {
        let (table, segments, d_e) = match source {
            SentenceSource::Precomputed(t) => (None, None, t.cols()),
            SentenceSource::Hashed { buckets, lists } => {
                let t = Tensor::randn(*buckets, sentence_dim, 1.0, rng);
                let id = params.add("semantic.table", t);
                (
                    Some(id),
                    Some(std::rc::Rc::new(Segments::new(lists))),
                    sentence_dim,
                )
            }
        };
        SemanticEncoder {
            table,
            w: params.add("semantic.w", Tensor::glorot(d_e, out_dim, rng)),
            b: params.add("semantic.b", Tensor::zeros(1, out_dim)),
            segments,
        }
    }

    /// Sentence vectors of every item, `M × d_e`.
    pub fn sentences(
        &self,
        tape: &mut Tape,
        params: &Params,
        source: &SentenceSource,
    ) -> Result<Var> {
        match (source, self.table, &self.segments) {
            (SentenceSource::Precomputed(t), _, _) => Ok(tape.constant(t.clone())),
            (SentenceSource::Hashed { .. }, Some(table), Some(seg)) => {
                let t = tape.param(params, table);
                tape.segment_mean(t, seg.clone())
            }
            _ => Err(Error::Usage(
                "semantic encoder built for a different sentence source".into(),
            )),
        }
    }

    /// Projected semantic vectors of every item, `M × d_h`.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        source: &SentenceSource,
    ) -> Result<Var> {
        let v = self.sentences(tape, params, source)?;
        let w = tape.param(params, self.w);
        let b = tape.param(params, self.b);
        let s = tape
            .matmul(v, w)
            .map_err(|e| Error::Config(format!("semantic projection: {e}")))?;
        tape.add_row(s, b)
    }
}
