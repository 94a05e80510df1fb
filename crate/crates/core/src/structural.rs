//! Structural item vectors: an input vector per graph node, refined by two
//! multi-head graph-attention layers (heads concatenated, then averaged).

use std::rc::Rc;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{elu, leaky_relu, softmax_rows, ParamId, Params, Segments, Tape, Var};
use crate::config::{InitMethod, RunConfig};
use crate::error::{Error, Result};
use crate::kg::ItemGraph;
use crate::optim::{Adam, AdamConfig};
use crate::seed::{self, stream};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SdneOptions {
    pub epochs: usize,
    pub learning_rate: f64,
    pub first_order: f64,
    pub edge_weight: f64,
}

impl SdneOptions {
    pub fn from_config(cfg: &RunConfig) -> Self {
        SdneOptions {
            epochs: cfg.sdne_epochs,
            learning_rate: cfg.sdne_learning_rate,
            first_order: cfg.sdne_first_order,
            edge_weight: cfg.sdne_edge_weight,
        }
    }
}

impl Default for SdneOptions {
    fn default() -> Self {
        Self::from_config(&RunConfig::default())
    }
}

/// One `dim`-wide input vector per node.
pub fn init_nodes(
    graph: &ItemGraph,
    dim: usize,
    method: InitMethod,
    seed: u64,
    sdne: &SdneOptions,
) -> Result<Tensor> {
    if dim == 0 {
        return Err(Error::Config(
            "node vector dimension must be at least 1".into(),
        ));
    }
    let mut rng = seed::rng(seed, &[stream::STRUCTURAL_INIT]);
    match method {
        InitMethod::SeededRandom => Ok(Tensor::randn(
            graph.node_count(),
            dim,
            1.0 / (dim as f64).sqrt(),
            &mut rng,
        )),
        InitMethod::Spectral => spectral(graph, dim),
        InitMethod::SdneLite => sdne_lite(graph, dim, sdne, &mut rng),
    }
}

/// Eigenvectors of the normalised Laplacian `I − D^{-1/2} A D^{-1/2}` for the
/// `dim` smallest eigenvalues, scaled by `√n`. Each vector's sign makes its
/// largest-magnitude entry positive.
fn spectral(graph: &ItemGraph, dim: usize) -> Result<Tensor> {
    let n = graph.node_count();
    if dim > n {
        return Err(Error::Config(format!(
            "spectral node vectors need init_dim ≤ node count, got {dim} > {n}"
        )));
    }
    let inv_sqrt: Vec<f64> = (0..n)
        .map(|i| match graph.neighbors(i).len() {
            0 => 0.0,
            d => 1.0 / (d as f64).sqrt(),
        })
        .collect();
    let mut lap = DMatrix::<f64>::identity(n, n);
    for &(a, b) in graph.edges() {
        let w = inv_sqrt[a] * inv_sqrt[b];
        lap[(a, b)] -= w;
        lap[(b, a)] -= w;
    }
    let eig = SymmetricEigen::new(lap);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&x, &y| {
        eig.eigenvalues[x]
            .total_cmp(&eig.eigenvalues[y])
            .then(x.cmp(&y))
    });
    let scale = (n as f64).sqrt();
    let mut out = Tensor::zeros(n, dim);
    for (c, &k) in order.iter().take(dim).enumerate() {
        let col = eig.eigenvectors.column(k);
        let pivot = (0..n).fold(0, |best, i| {
            if col[i].abs() > col[best].abs() + 1e-12 {
                i
            } else {
                best
            }
        });
        let sign = if col[pivot] < 0.0 { -1.0 } else { 1.0 };
        for i in 0..n {
            out.set(i, c, sign * scale * col[i]);
        }
    }
    Ok(out)
}

/// Single-hidden-layer autoencoder over adjacency rows. The loss is the
/// reconstruction error, with observed edges weighted by `edge_weight`, plus
/// `first_order · Σ_{(i,j)∈E} ‖h_i − h_j‖²`. Returns the hidden `tanh` layer.
fn sdne_lite(
    graph: &ItemGraph,
    dim: usize,
    opts: &SdneOptions,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor> {
    let n = graph.node_count();
    if n == 0 {
        return Ok(Tensor::zeros(0, dim));
    }
    let rows = graph.adjacency_rows();
    let adjacency = Tensor::from_rows(&rows)?;
    let weights = adjacency.map(|a| 1.0 + (opts.edge_weight - 1.0) * a);
    let mut params = Params::new();
    let w_enc = params.add("sdne.encode", Tensor::glorot(n, dim, rng));
    let b_enc = params.add("sdne.encode_bias", Tensor::zeros(1, dim));
    let w_dec = params.add("sdne.decode", Tensor::glorot(dim, n, rng));
    let b_dec = params.add("sdne.decode_bias", Tensor::zeros(1, n));
    let src: Rc<Vec<usize>> = Rc::new(graph.edges().iter().map(|e| e.0).collect());
    let dst: Rc<Vec<usize>> = Rc::new(graph.edges().iter().map(|e| e.1).collect());

    let hidden = |tape: &mut Tape, params: &Params| -> Result<Var> {
        let x = tape.constant(adjacency.clone());
        let w = tape.param(params, w_enc);
        let b = tape.param(params, b_enc);
        let z = tape.matmul(x, w)?;
        let z = tape.add_row(z, b)?;
        Ok(tape.tanh(z))
    };

    let mut adam = Adam::new(
        &params,
        AdamConfig {
            learning_rate: opts.learning_rate,
            ..AdamConfig::default()
        },
    );
    for _ in 0..opts.epochs {
        let mut tape = Tape::new();
        let h = hidden(&mut tape, &params)?;
        let wd = tape.param(&params, w_dec);
        let bd = tape.param(&params, b_dec);
        let recon = tape.matmul(h, wd)?;
        let recon = tape.add_row(recon, bd)?;
        let target = tape.constant(adjacency.clone());
        let diff = tape.sub(recon, target)?;
        let weight = tape.constant(weights.clone());
        let weighted = tape.mul(diff, weight)?;
        let sq = tape.mul(weighted, diff)?;
        let mut loss = tape.sum(sq);
        if !src.is_empty() && opts.first_order > 0.0 {
            let hs = tape.gather_rows(h, src.clone())?;
            let hd = tape.gather_rows(h, dst.clone())?;
            let d = tape.sub(hs, hd)?;
            let d2 = tape.mul(d, d)?;
            let s = tape.sum(d2);
            let s = tape.scale(s, opts.first_order);
            loss = tape.add(loss, s)?;
        }
        let loss = tape.scale(loss, 1.0 / n as f64);
        let grads = tape.backward(loss, &params)?;
        adam.step(&mut params, &grads, &[])?;
    }
    let mut tape = Tape::new();
    let h = hidden(&mut tape, &params)?;
    Ok(tape.value(h).clone())
}

/// Precomputed neighbourhood structure shared by every attention layer.
#[derive(Clone, Debug)]
pub struct GraphContext {
    pub segments: Rc<Segments>,
    owners: Rc<Vec<usize>>,
    targets: Rc<Vec<usize>>,
}

impl GraphContext {
    /// `lists[i]` is the neighbourhood node `i` attends over.
    pub fn new(lists: &[Vec<usize>]) -> Self {
        let segments = Segments::new(lists);
        let owners = Rc::new(segments.owners().to_vec());
        let targets = Rc::new(segments.targets().to_vec());
        GraphContext {
            segments: Rc::new(segments),
            owners,
            targets,
        }
    }

    pub fn from_graph(graph: &ItemGraph) -> Self {
        Self::new(&graph.attention_lists())
    }

    pub fn node_count(&self) -> usize {
        self.segments.segment_count()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GatMode {
    Concat,
    Average,
}

/// One attention head: `W` is `in × out` (rows are node vectors), `a` is the
/// `2·out × 1` attention vector whose first half scores the attending node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct GatHead {
    pub w: ParamId,
    pub a: ParamId,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GatLayer {
    pub heads: Vec<GatHead>,
    pub mode: GatMode,
    pub in_dim: usize,
    pub out_dim: usize,
    pub slope: f64,
}

impl GatLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        params: &mut Params,
        prefix: &str,
        in_dim: usize,
        out_dim: usize,
        heads: usize,
        mode: GatMode,
        slope: f64,
        rng: &mut R,
    ) -> Self {
        let heads = (0..heads)
            .map(|k| GatHead {
                w: params.add(
                    format!("{prefix}.head{k}.w"),
                    Tensor::glorot(in_dim, out_dim, rng),
                ),
                a: params.add(
                    format!("{prefix}.head{k}.a"),
                    Tensor::glorot(2 * out_dim, 1, rng),
                ),
            })
            .collect();
        GatLayer {
            heads,
            mode,
            in_dim,
            out_dim,
            slope,
        }
    }

    pub fn output_dim(&self) -> usize {
        match self.mode {
            GatMode::Concat => self.heads.len() * self.out_dim,
            GatMode::Average => self.out_dim,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        self.heads.iter().flat_map(|h| [h.w, h.a]).collect()
    }

    /// Attention weights of head `k` as an `E × 1` column in segment order,
    /// plus the transformed node rows.
    fn head_forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        x: Var,
        ctx: &GraphContext,
        k: usize,
    ) -> Result<(Var, Var)> {
        let head = self.heads[k];
        let w = tape.param(params, head.w);
        let a = tape.param(params, head.a);
        let h = tape.matmul(x, w)?;
        let a_src = tape.slice_rows(a, 0, self.out_dim)?;
        let a_dst = tape.slice_rows(a, self.out_dim, 2 * self.out_dim)?;
        let s_src = tape.matmul(h, a_src)?;
        let s_dst = tape.matmul(h, a_dst)?;
        let e_src = tape.gather_rows(s_src, ctx.owners.clone())?;
        let e_dst = tape.gather_rows(s_dst, ctx.targets.clone())?;
        let e = tape.add(e_src, e_dst)?;
        let e = tape.leaky_relu(e, self.slope)?;
        let alpha = tape.segment_softmax(e, ctx.segments.clone())?;
        Ok((alpha, h))
    }

    /// Attention weights of every head, each in segment order.
    pub fn attention(
        &self,
        params: &Params,
        x: &Tensor,
        ctx: &GraphContext,
    ) -> Result<Vec<Tensor>> {
        let mut tape = Tape::new();
        let xv = tape.constant(x.clone());
        (0..self.heads.len())
            .map(|k| {
                let (alpha, _) = self.head_forward(&mut tape, params, xv, ctx, k)?;
                Ok(tape.value(alpha).clone())
            })
            .collect()
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        x: Var,
        ctx: &GraphContext,
        dropout: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let [n, d] = tape.value(x).shape();
        if n != ctx.node_count() || d != self.in_dim {
            return Err(Error::Dimension {
                op: "graph attention",
                left: [n, d],
                right: [ctx.node_count(), self.in_dim],
            });
        }
        let mut outs = Vec::with_capacity(self.heads.len());
        for k in 0..self.heads.len() {
            let (alpha, h) = self.head_forward(tape, params, x, ctx, k)?;
            let alpha = tape.dropout(alpha, dropout, training, rng)?;
            outs.push(tape.edge_aggregate(alpha, h, ctx.segments.clone())?);
        }
        match self.mode {
            GatMode::Concat => {
                let act: Vec<Var> = outs.into_iter().map(|o| tape.elu(o)).collect();
                tape.concat_cols(&act)
            }
            GatMode::Average => {
                let mut acc = outs[0];
                for &o in &outs[1..] {
                    acc = tape.add(acc, o)?;
                }
                let mean = tape.scale(acc, 1.0 / self.heads.len() as f64);
                Ok(tape.elu(mean))
            }
        }
    }
}

/// The two attention layers applied to the node input vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct StructuralEncoder {
    pub concat: GatLayer,
    pub average: GatLayer,
    pub dropout: f64,
}

impl StructuralEncoder {
    pub fn new<R: Rng + ?Sized>(params: &mut Params, cfg: &RunConfig, rng: &mut R) -> Self {
        let concat = GatLayer::new(
            params,
            "gat1",
            cfg.init_dim,
            cfg.gat_head_dim,
            cfg.gat_heads_concat,
            GatMode::Concat,
            cfg.leaky_slope,
            rng,
        );
        let average = GatLayer::new(
            params,
            "gat2",
            concat.output_dim(),
            cfg.structural_dim,
            cfg.gat_heads_average,
            GatMode::Average,
            cfg.leaky_slope,
            rng,
        );
        StructuralEncoder {
            concat,
            average,
            dropout: cfg.gat_dropout,
        }
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        let mut ids = self.concat.param_ids();
        ids.extend(self.average.param_ids());
        ids
    }

    pub fn forward(
        &self,
        tape: &mut Tape,
        params: &Params,
        init: Var,
        ctx: &GraphContext,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<Var> {
        let p1 = self
            .concat
            .forward(tape, params, init, ctx, self.dropout, training, rng)?;
        self.average
            .forward(tape, params, p1, ctx, self.dropout, training, rng)
    }
}

/// Node inputs followed by freshly initialised attention layers, evaluated
/// without dropout.
pub fn encode_structural(graph: &ItemGraph, cfg: &RunConfig, seed: u64) -> Result<Tensor> {
    let init = init_nodes(
        graph,
        cfg.init_dim,
        cfg.init_method,
        seed,
        &SdneOptions::from_config(cfg),
    )?;
    let mut params = Params::new();
    let mut rng = seed::rng(seed, &[stream::INIT]);
    let encoder = StructuralEncoder::new(&mut params, cfg, &mut rng);
    let ctx = GraphContext::from_graph(graph);
    let mut tape = Tape::new();
    let x = tape.constant(init);
    let out = encoder.forward(&mut tape, &params, x, &ctx, false, &mut rng)?;
    Ok(tape.value(out).clone())
}

/// Scalar-loop evaluation of one attention layer, used as a test oracle.
pub fn gat_layer_reference(
    layer: &GatLayer,
    params: &Params,
    x: &Tensor,
    lists: &[Vec<usize>],
) -> Tensor {
    let n = x.rows();
    let (d_in, d_out) = (layer.in_dim, layer.out_dim);
    let k_heads = layer.heads.len();
    let mut per_head = Vec::with_capacity(k_heads);
    for head in &layer.heads {
        let w = params.get(head.w);
        let a = params.get(head.a);
        let mut h = vec![vec![0.0; d_out]; n];
        for i in 0..n {
            for o in 0..d_out {
                let mut s = 0.0;
                for c in 0..d_in {
                    s += x.get(i, c) * w.get(c, o);
                }
                h[i][o] = s;
            }
        }
        let mut out = vec![vec![0.0; d_out]; n];
        for i in 0..n {
            let logits: Vec<f64> = lists[i]
                .iter()
                .map(|&j| {
                    let mut s = 0.0;
                    for o in 0..d_out {
                        s += a.get(o, 0) * h[i][o] + a.get(d_out + o, 0) * h[j][o];
                    }
                    leaky_relu(s, layer.slope)
                })
                .collect();
            let alpha = softmax_rows(&Tensor::row(logits));
            for (e, &j) in lists[i].iter().enumerate() {
                for o in 0..d_out {
                    out[i][o] += alpha.get(0, e) * h[j][o];
                }
            }
        }
        per_head.push(out);
    }
    match layer.mode {
        GatMode::Concat => {
            let mut t = Tensor::zeros(n, k_heads * d_out);
            for (k, out) in per_head.iter().enumerate() {
                for i in 0..n {
                    for o in 0..d_out {
                        t.set(i, k * d_out + o, elu(out[i][o]));
                    }
                }
            }
            t
        }
        GatMode::Average => {
            let mut t = Tensor::zeros(n, d_out);
            for i in 0..n {
                for o in 0..d_out {
                    let m = per_head.iter().map(|h| h[i][o]).sum::<f64>() / k_heads as f64;
                    t.set(i, o, elu(m));
                }
            }
            t
        }
    }
}
