//! User representation from two views: multi-head self-attention over the
//! embeddings of sampled liked (or disliked) items, then a mean over rows.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{softmax_rows, ParamId, Params, Tape, Var};
use crate::data::UserHistory;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Multi-head self-attention over the rows of a `z × d` matrix. Head `x` uses
/// columns `x·d_hide .. (x+1)·d_hide` of the `d × d` query, key and value maps.
#[derive(Clone, Debug, PartialEq)]
pub struct SelfAttention {
    pub q: ParamId,
    pub k: ParamId,
    pub v: ParamId,
    pub o: ParamId,
    pub heads: usize,
    pub dim: usize,
}

impl SelfAttention {
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        prefix: &str,
        dim: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || !dim.is_multiple_of(heads) {
            return Err(Error::Config(format!(
                "{heads} attention heads do not divide the item dimension {dim}"
            )));
        }
        let mut m =
            |name: &str| params.add(format!("{prefix}.{name}"), Tensor::glorot(dim, dim, rng));
        Ok(SelfAttention {
            q: m("q"),
            k: m("k"),
            v: m("v"),
            o: m("o"),
            heads,
            dim,
        })
    }

    pub fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    pub fn param_ids(&self) -> [ParamId; 4] {
        [self.q, self.k, self.v, self.o]
    }

    /// Returns the transformed rows and, per head, the row-stochastic
    /// attention matrix before dropout.
    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        rows: Var,
        dropout: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Var, Vec<Var>)> {
        let [z, d] = tape.value(rows).shape();
        if z == 0 || d != self.dim {
            return Err(Error::Dimension {
                op: "self attention",
                left: [z, d],
                right: [z.max(1), self.dim],
            });
        }
        let dh = self.head_dim();
        let q = tape.param(params, self.q);
        let k = tape.param(params, self.k);
        let v = tape.param(params, self.v);
        let o = tape.param(params, self.o);
        let qa = tape.matmul(rows, q)?;
        let ka = tape.matmul(rows, k)?;
        let va = tape.matmul(rows, v)?;
        let mut heads = Vec::with_capacity(self.heads);
        let mut betas = Vec::with_capacity(self.heads);
        for x in 0..self.heads {
            let (a, b) = (x * dh, (x + 1) * dh);
            let qx = tape.slice_cols(qa, a, b)?;
            let kx = tape.slice_cols(ka, a, b)?;
            let vx = tape.slice_cols(va, a, b)?;
            let logits = tape.matmul_nt(qx, kx)?;
            let logits = tape.scale(logits, 1.0 / (dh as f64).sqrt());
            let beta = tape.softmax_rows(logits);
            betas.push(beta);
            let dropped = tape.dropout(beta, dropout, training, rng)?;
            heads.push(tape.matmul(dropped, vx)?);
        }
        let cat = if heads.len() == 1 {
            heads[0]
        } else {
            tape.concat_cols(&heads)?
        };
        Ok((tape.matmul(cat, o)?, betas))
    }

    /// Evaluation-mode output and attention matrices as plain tensors.
    pub fn apply(&self, params: &Params, rows: &Tensor) -> Result<(Tensor, Vec<Tensor>)> {
        let mut tape = Tape::new();
        let r = tape.constant(rows.clone());
        let mut rng = crate::seed::rng(0, &[]);
        let (out, betas) = self.forward(&mut tape, params, r, 0.0, false, &mut rng)?;
        Ok((
            tape.value(out).clone(),
            betas.iter().map(|b| tape.value(*b).clone()).collect(),
        ))
    }
}

/// Mean over rows.
pub fn mean_pool(rows: &Tensor) -> Result<Vec<f64>> {
    if rows.rows() == 0 {
        return Err(Error::Usage("mean of zero rows".into()));
    }
    let mut out = vec![0.0; rows.cols()];
    for r in 0..rows.rows() {
        for (o, v) in out.iter_mut().zip(rows.row_slice(r)) {
            *o += v;
        }
    }
    let n = rows.rows() as f64;
    Ok(out.into_iter().map(|v| v / n).collect())
}

/// Embedding rows of the prefer and dislike samples, in sampled order.
pub fn split_views(
    history: &UserHistory,
    embeddings: &Tensor,
    item_ids: &[String],
) -> Result<(Tensor, Tensor)> {
    let missing: Vec<String> = history
        .prefer
        .iter()
        .chain(&history.dislike)
        .filter(|&&i| i >= embeddings.rows())
        .map(|&i| item_ids.get(i).cloned().unwrap_or_else(|| format!("#{i}")))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingEmbedding(missing));
    }
    Ok((
        embeddings.gather_rows(&history.prefer),
        embeddings.gather_rows(&history.dislike),
    ))
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserViews {
    pub user: usize,
    pub prefer: Vec<f64>,
    pub dislike: Vec<f64>,
}

/// Both views of one user without dropout. An empty sample yields a zero
/// vector for that view.
pub fn build_user_views(
    history: &UserHistory,
    embeddings: &Tensor,
    item_ids: &[String],
    prefer: &SelfAttention,
    dislike: &SelfAttention,
    params: &Params,
) -> Result<UserViews> {
    let (p, d) = split_views(history, embeddings, item_ids)?;
    let view = |rows: &Tensor, sa: &SelfAttention| -> Result<Vec<f64>> {
        if rows.rows() == 0 {
            return Ok(vec![0.0; embeddings.cols()]);
        }
        mean_pool(&sa.apply(params, rows)?.0)
    };
    Ok(UserViews {
        user: history.user,
        prefer: view(&p, prefer)?,
        dislike: view(&d, dislike)?,
    })
}

/// Scalar-loop evaluation of self-attention, used as a test oracle.
pub fn self_attention_reference(
    sa: &SelfAttention,
    params: &Params,
    rows: &Tensor,
) -> (Tensor, Vec<Tensor>) {
    let (z, d, dh) = (rows.rows(), sa.dim, sa.head_dim());
    let proj = |m: ParamId| {
        let w = params.get(m);
        let mut out = Tensor::zeros(z, d);
        for i in 0..z {
            for c in 0..d {
                out.set(i, c, (0..d).map(|k| rows.get(i, k) * w.get(k, c)).sum());
            }
        }
        out
    };
    let (q, k, v) = (proj(sa.q), proj(sa.k), proj(sa.v));
    let mut cat = Tensor::zeros(z, d);
    let mut betas = Vec::new();
    for x in 0..sa.heads {
        let mut logits = Tensor::zeros(z, z);
        for i in 0..z {
            for j in 0..z {
                let s: f64 = (x * dh..(x + 1) * dh)
                    .map(|c| q.get(i, c) * k.get(j, c))
                    .sum();
                logits.set(i, j, s / (dh as f64).sqrt());
            }
        }
        let beta = softmax_rows(&logits);
        for i in 0..z {
            for c in x * dh..(x + 1) * dh {
                cat.set(i, c, (0..z).map(|j| beta.get(i, j) * v.get(j, c)).sum());
            }
        }
        betas.push(beta);
    }
    let o = params.get(sa.o);
    let mut out = Tensor::zeros(z, d);
    for i in 0..z {
        for c in 0..d {
            out.set(i, c, (0..d).map(|k| cat.get(i, k) * o.get(k, c)).sum());
        }
    }
    (out, betas)
}
