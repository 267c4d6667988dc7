//! Equivariant scoring policy over Gram matrices.
//!
//! The model consumes the Gram matrix only (so left-orthogonal changes of the
//! basis are invisible to it by construction) and produces a score matrix M
//! that transforms as M(H^T G H) = H^T M(G) H for every signed permutation H.
//!
//! Construction: each ordered index pair (i, j), i != j, is a node of a graph
//! with an edge wherever two pairs share an index; the sharing pattern
//! (i=i', j=j', i=j', j=i') labels the edge with one of four classes, each
//! with its own message weights. Node features split into sign-invariant
//! channels (diagonal entries of G and G^2, |G_ij|) processed by the
//! message-passing trunk with even activations, and sign-covariant channels
//! c_p = (G^p)_ij, p = 1..3, that multiply the trunk's even outputs in the
//! head: under conjugation by a signed permutation every c_p picks up exactly
//! the factor s_i s_j, so M transforms correctly while the trunk sees only
//! invariant quantities. The input is normalized by trace(G)/n, which makes
//! the scores invariant to rescaling of the basis.
//!
//! Sampling: the absolute off-diagonal scores are normalized to a
//! distribution over pairs, an index is drawn with the Gumbel-Softmax trick,
//! the move's row and column are filled from M (or just the single entry,
//! per [`MoveFill`]) and discretized by stochastic rounding. Both sampling
//! stages keep gradients flowing to the parameters.

use num_bigint::BigInt;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{
    gumbel_softmax_sample, stochastic_round, NodeId, Relaxation, Tape,
};
use crate::error::{Error, Result};
use crate::intmat::IntMat;
use crate::lattice::{Basis, GramMatrix, UnimodularMatrix, TOL_DET};
use crate::mat::Mat;
use crate::rng::{stream_rng, NS_PARAM_INIT};
use crate::unimodular::{materialize, ExtendedGaussMove};

pub const SCORE_DEGENERACY_TOL: f64 = 1e-12;

/// How a sampled move is populated from the score matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MoveFill {
    /// Fill the whole nontrivial row i and column j from M.
    RowCol,
    /// Only the sampled entry m_ij (a plain shear).
    SingleEntry,
}

/// Pair-of-indices graph underlying the message passing; depends only on n.
#[derive(Debug, Clone)]
pub struct PairGraph {
    pub n: usize,
    /// Ordered pairs (i, j), i != j, in row-major order.
    pub pairs: Vec<(usize, usize)>,
    index: Vec<Option<usize>>,
}

/// Edge classes by shared-index pattern between (i, j) and (i', j').
pub const ADJACENCY_CLASSES: usize = 4;

impl PairGraph {
    pub fn new(n: usize) -> Self {
        let mut pairs = Vec::with_capacity(n * (n - 1));
        let mut index = vec![None; n * n];
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    index[i * n + j] = Some(pairs.len());
                    pairs.push((i, j));
                }
            }
        }
        PairGraph { n, pairs, index }
    }

    pub fn node_count(&self) -> usize {
        self.pairs.len()
    }

    pub fn pair_id(&self, i: usize, j: usize) -> Option<usize> {
        self.index[i * self.n + j]
    }

    /// Neighbors of pair p in the given class. The self pair is excluded;
    /// the swapped pair (j, i) matches both cross classes.
    pub fn neighbors(&self, p: usize, class: usize) -> Vec<usize> {
        let (i, j) = self.pairs[p];
        let mut out = Vec::new();
        for (q, &(iq, jq)) in self.pairs.iter().enumerate() {
            if q == p {
                continue;
            }
            let matches = match class {
                0 => iq == i,
                1 => jq == j,
                2 => jq == i,
                3 => iq == j,
                _ => unreachable!(),
            };
            if matches {
                out.push(q);
            }
        }
        out
    }

    /// Mean-aggregation matrices, one per class: A_c[p][q] = 1/deg for each
    /// class-c neighbor q of p.
    fn aggregation_mats(&self) -> Vec<Mat> {
        let count = self.node_count();
        (0..ADJACENCY_CLASSES)
            .map(|class| {
                let mut a = Mat::zeros(count, count);
                for p in 0..count {
                    let nbrs = self.neighbors(p, class);
                    if nbrs.is_empty() {
                        continue;
                    }
                    let w = 1.0 / nbrs.len() as f64;
                    for q in nbrs {
                        a[(p, q)] = w;
                    }
                }
                a
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamTensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl ParamTensor {
    fn zeros(shape: Vec<usize>) -> Self {
        let total = shape.iter().product();
        ParamTensor { shape, data: vec![0.0; total] }
    }

    fn uniform<R: Rng>(shape: Vec<usize>, width: f64, rng: &mut R) -> Self {
        let total: usize = shape.iter().product();
        let data = (0..total).map(|_| (rng.gen::<f64>() * 2.0 - 1.0) * width).collect();
        ParamTensor { shape, data }
    }
}

/// Sign-invariant node features: Gn_ii, Gn_jj, (Gn^2)_ii, (Gn^2)_jj,
/// |Gn_ij|, |Gn_ij|/Gn_ii, |Gn_ij|/Gn_jj, |Gn_ij|/sqrt(Gn_ii Gn_jj) and the
/// symmetric length ratio Gn_ii/Gn_jj + Gn_jj/Gn_ii. The ratio channels
/// carry the projection-coefficient contrasts the reducer itself works with;
/// without them the raw entries of this generation distribution are nearly
/// indistinguishable across pairs.
pub const INVARIANT_CHANNELS: usize = 9;
/// Sign-covariant channels multiplying the head outputs: (Gn^p)_ij for
/// p = 1..3 plus the projection coefficients Gn_ij/Gn_ii and Gn_ij/Gn_jj.
/// Each picks up exactly the factor s_i s_j under conjugation by a signed
/// permutation.
pub const COVARIANT_CHANNELS: usize = 5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyConfig {
    pub layers: usize,
    pub hidden: usize,
    pub move_fill: MoveFill,
    pub gumbel_temperature: f64,
}

impl Default for PolicyConfig {
    fn default() -> Self {
        PolicyConfig {
            layers: 3,
            hidden: 32,
            move_fill: MoveFill::RowCol,
            gumbel_temperature: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerParams {
    pub w_self: ParamTensor,
    pub w_class: Vec<ParamTensor>,
    pub bias: ParamTensor,
}

/// All learnable parameters. Shapes depend only on the hidden width, never on
/// the lattice dimension, so one parameter set applies to any n.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyParams {
    pub config: PolicyConfig,
    pub w_in: ParamTensor,
    pub b_in: ParamTensor,
    pub layers: Vec<LayerParams>,
    pub head_w1: ParamTensor,
    pub head_b1: ParamTensor,
    pub head_w2: ParamTensor,
    pub head_b2: ParamTensor,
}

impl PolicyParams {
    /// Uniform(-1/sqrt(d), 1/sqrt(d)) trunk; the head's final weights start
    /// at zero with bias (-1, 0, 0), so the initial scores are the negated
    /// normalized Gram entries. The sampling distribution only sees |M|, but
    /// the sign matters for the rounded entries: negative coefficients act as
    /// size reductions from the first update on, while a positive start has
    /// to cross the degenerate |M| = 0 region before it can reduce anything.
    pub fn init(config: PolicyConfig, seed: u64) -> Self {
        let d = config.hidden;
        let width = 1.0 / (d as f64).sqrt();
        let mut rng = stream_rng(seed, NS_PARAM_INIT, 0);
        let w_in = ParamTensor::uniform(vec![INVARIANT_CHANNELS, d], width, &mut rng);
        let b_in = ParamTensor::zeros(vec![d]);
        let layers = (0..config.layers)
            .map(|_| LayerParams {
                w_self: ParamTensor::uniform(vec![d, d], width, &mut rng),
                w_class: (0..ADJACENCY_CLASSES)
                    .map(|_| ParamTensor::uniform(vec![d, d], width, &mut rng))
                    .collect(),
                bias: ParamTensor::zeros(vec![d]),
            })
            .collect();
        let head_w1 = ParamTensor::uniform(vec![d, d], width, &mut rng);
        let head_b1 = ParamTensor::zeros(vec![d]);
        // small but nonzero: the output bias still dominates the initial
        // scores, while the trunk receives gradient from the first step
        let head_w2 = ParamTensor::uniform(vec![d, COVARIANT_CHANNELS], 0.1 * width, &mut rng);
        let mut head_b2 = ParamTensor::zeros(vec![COVARIANT_CHANNELS]);
        // start at M = -Gn_ij / Gn_ii: the rounded entries act as pairwise
        // size reductions from the first update on
        head_b2.data[3] = -1.0;
        PolicyParams { config, w_in, b_in, layers, head_w1, head_b1, head_w2, head_b2 }
    }

    /// Tensors in canonical (name, tensor) order; the order defines the
    /// layout of flattened gradient and optimizer-state buffers.
    pub fn tensors(&self) -> Vec<(String, &ParamTensor)> {
        let mut out: Vec<(String, &ParamTensor)> = vec![
            ("w_in".into(), &self.w_in),
            ("b_in".into(), &self.b_in),
        ];
        for (l, layer) in self.layers.iter().enumerate() {
            out.push((format!("layer{l}.w_self"), &layer.w_self));
            for (c, w) in layer.w_class.iter().enumerate() {
                out.push((format!("layer{l}.w_class{c}"), w));
            }
            out.push((format!("layer{l}.bias"), &layer.bias));
        }
        out.push(("head_w1".into(), &self.head_w1));
        out.push(("head_b1".into(), &self.head_b1));
        out.push(("head_w2".into(), &self.head_w2));
        out.push(("head_b2".into(), &self.head_b2));
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut ParamTensor> {
        let mut out: Vec<&mut ParamTensor> = vec![&mut self.w_in, &mut self.b_in];
        for layer in self.layers.iter_mut() {
            out.push(&mut layer.w_self);
            for w in layer.w_class.iter_mut() {
                out.push(w);
            }
            out.push(&mut layer.bias);
        }
        out.push(&mut self.head_w1);
        out.push(&mut self.head_b1);
        out.push(&mut self.head_w2);
        out.push(&mut self.head_b2);
        out
    }

    pub fn param_count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.data.len()).sum()
    }
}

/// The score computation recorded on a tape, with handles needed downstream.
struct ForwardGraph {
    graph: PairGraph,
    /// Per-pair scores, aligned with `graph.pairs`.
    m_vec: NodeId,
}

/// Records parameter tensors on a tape; node order matches
/// [`PolicyParams::tensors`].
fn input_params(tape: &mut Tape, params: &PolicyParams) -> Result<Vec<NodeId>> {
    params
        .tensors()
        .into_iter()
        .map(|(_, t)| tape.input(t.shape.clone(), t.data.clone()))
        .collect()
}

fn build_forward(
    tape: &mut Tape,
    g_node: NodeId,
    n: usize,
    params: &PolicyParams,
    param_nodes: &[NodeId],
) -> Result<ForwardGraph> {
    let graph = PairGraph::new(n);
    let count = graph.node_count();
    let d = params.config.hidden;

    // normalization by trace(G)/n: scale-invariant input
    let diag: Vec<usize> = (0..n).map(|i| i * n + i).collect();
    let diag_nodes = tape.gather(g_node, diag.clone())?;
    let trace = tape.sum(diag_nodes);
    let scale = tape.scale(trace, 1.0 / n as f64);
    let gn = tape.div_scalar(g_node, scale)?;
    let g2 = tape.matmul(gn, gn)?;
    let g3 = tape.matmul(g2, gn)?;

    let idx_ij: Vec<usize> = graph.pairs.iter().map(|&(i, j)| i * n + j).collect();
    let idx_ii: Vec<usize> = graph.pairs.iter().map(|&(i, _)| i * n + i).collect();
    let idx_jj: Vec<usize> = graph.pairs.iter().map(|&(_, j)| j * n + j).collect();

    let c1 = tape.gather(gn, idx_ij.clone())?;
    let c2 = tape.gather(g2, idx_ij.clone())?;
    let c3 = tape.gather(g3, idx_ij)?;
    let gii = tape.gather(gn, idx_ii.clone())?;
    let gjj = tape.gather(gn, idx_jj.clone())?;
    let g2ii = tape.gather(g2, idx_ii)?;
    let g2jj = tape.gather(g2, idx_jj)?;
    let absg = tape.abs(c1);

    // projection-coefficient channels (covariant) and their magnitudes plus
    // length-ratio contrasts (invariant); the unbounded channels are softly
    // clipped (odd, sign-exact) so a shrunken column cannot start a feedback
    // runaway through the division features
    let soft_clip = |tape: &mut Tape, x: NodeId, s: f64| -> NodeId {
        let scaled = tape.scale(x, 1.0 / s);
        let t = tape.tanh(scaled);
        tape.scale(t, s)
    };
    let c2 = soft_clip(tape, c2, 6.0);
    let c3 = soft_clip(tape, c3, 6.0);
    let c4 = tape.div(c1, gii)?;
    let c4 = soft_clip(tape, c4, 6.0);
    let c5 = tape.div(c1, gjj)?;
    let c5 = soft_clip(tape, c5, 6.0);
    let abs_c4 = tape.abs(c4);
    let abs_c5 = tape.abs(c5);
    let gij_sq = tape.mul(c4, c5)?;
    let corr_sq = tape.abs(gij_sq);
    let ratio_a = tape.div(gii, gjj)?;
    let ratio_b = tape.div(gjj, gii)?;
    let ratio = tape.add(ratio_a, ratio_b)?;
    let ratio = soft_clip(tape, ratio, 8.0);

    let features =
        tape.stack_cols(&[gii, gjj, g2ii, g2jj, absg, abs_c4, abs_c5, corr_sq, ratio])?;

    let mut p = param_nodes.iter().copied();
    let mut next = || p.next().expect("parameter node order matches tensors()");

    let w_in = next();
    let b_in = next();
    let embedded = tape.matmul(features, w_in)?;
    let embedded = tape.add_row_broadcast(embedded, b_in)?;
    let mut h = tape.logcosh(embedded);

    let agg: Vec<NodeId> = graph
        .aggregation_mats()
        .iter()
        .map(|a| tape.input_mat(a))
        .collect();

    for _ in 0..params.config.layers {
        let w_self = next();
        let mut pre = tape.matmul(h, w_self)?;
        for a in &agg {
            let w_c = next();
            let msg = tape.matmul(*a, h)?;
            let mixed = tape.matmul(msg, w_c)?;
            pre = tape.add(pre, mixed)?;
        }
        let bias = next();
        let pre = tape.add_row_broadcast(pre, bias)?;
        h = tape.logcosh(pre);
    }

    let head_w1 = next();
    let head_b1 = next();
    let head_w2 = next();
    let head_b2 = next();
    let hh = tape.matmul(h, head_w1)?;
    let hh = tape.add_row_broadcast(hh, head_b1)?;
    let hh = tape.logcosh(hh);
    let rho = tape.matmul(hh, head_w2)?;
    let rho = tape.add_row_broadcast(rho, head_b2)?;

    let covariant = [c1, c2, c3, c4, c5];
    let mut m_vec: Option<NodeId> = None;
    for (p, &cp) in covariant.iter().enumerate() {
        let rho_p = tape.gather(rho, (0..count).map(|r| r * COVARIANT_CHANNELS + p).collect())?;
        let term = tape.mul(cp, rho_p)?;
        m_vec = Some(match m_vec {
            None => term,
            Some(acc) => tape.add(acc, term)?,
        });
    }

    let _ = d;
    Ok(ForwardGraph { graph, m_vec: m_vec.expect("covariant channels nonempty") })
}

/// Deterministic score matrix M for a Gram matrix (diagonal zero).
pub fn forward_scores(g: &GramMatrix, params: &PolicyParams) -> Result<Mat> {
    let n = g.n();
    let mut tape = Tape::new();
    let param_nodes = input_params(&mut tape, params)?;
    let g_node = tape.input_mat(g.mat());
    let fwd = build_forward(&mut tape, g_node, n, params, &param_nodes)?;
    let mut m = Mat::zeros(n, n);
    let values = tape.value(fwd.m_vec);
    for (p, &(i, j)) in fwd.graph.pairs.iter().enumerate() {
        m[(i, j)] = values[p];
    }
    Ok(m)
}

/// Probability vector over off-diagonal indices, aligned with
/// [`PairGraph::pairs`]: p_ij = |M_ij| / sum |M_kl|. A degenerate all-zero
/// score matrix falls back to the uniform distribution with a logged warning.
pub fn index_distribution(scores: &Mat) -> (Vec<f64>, bool) {
    let n = scores.rows();
    let graph = PairGraph::new(n);
    let abs: Vec<f64> =
        graph.pairs.iter().map(|&(i, j)| scores[(i, j)].abs()).collect();
    let total: f64 = abs.iter().sum();
    if total < SCORE_DEGENERACY_TOL {
        log::warn!("degenerate all-zero score matrix; falling back to uniform index distribution");
        let u = 1.0 / graph.node_count() as f64;
        return (vec![u; graph.node_count()], true);
    }
    (abs.iter().map(|a| a / total).collect(), false)
}

/// One sampled move with its diagnostics.
#[derive(Debug, Clone)]
pub struct PolicyOutput {
    pub scores: Mat,
    pub index: (usize, usize),
    pub mv: ExtendedGaussMove,
    /// log p of the sampled index under the normalized |M| distribution.
    pub log_prob: f64,
    pub degenerate_scores: bool,
}

struct SampledMove {
    index: (usize, usize),
    mv: ExtendedGaussMove,
    move_node: NodeId,
    /// Exact index probabilities softmax(logits) on the tape.
    probs_node: NodeId,
    /// Candidate move matrices I + U_k, one per pair, on the tape.
    candidate_nodes: Vec<NodeId>,
    log_prob: f64,
    degenerate: bool,
}

/// Move slots (flat positions in T and the pair ids feeding them) for a
/// candidate index (i, j).
fn move_slots(
    graph: &PairGraph,
    i: usize,
    j: usize,
    move_fill: MoveFill,
) -> Vec<(usize, usize)> {
    let n = graph.n;
    let mut slots = vec![(i * n + j, graph.pair_id(i, j).expect("off-diagonal"))];
    if move_fill == MoveFill::RowCol {
        for c in 0..n {
            if c != i && c != j {
                slots.push((i * n + c, graph.pair_id(i, c).expect("off-diagonal")));
            }
        }
        for r in 0..n {
            if r != i && r != j {
                slots.push((r * n + j, graph.pair_id(r, j).expect("off-diagonal")));
            }
        }
    }
    slots
}

/// Samples the index via Gumbel-Softmax over log |M| and discretizes each
/// populated entry with stochastic rounding.
///
/// The move matrix is assembled as T = I + sum_k onehot_k * U_k over every
/// candidate index k, where U_k is the (stochastically rounded) update the
/// move at k would apply. The hard one-hot makes the forward value exactly
/// I + U_chosen, while the backward pass sees each candidate's full
/// first-order effect through the soft index weights, so the index choice
/// and every rounded entry stay on the gradient path.
fn sample_move_on_tape<R: Rng>(
    tape: &mut Tape,
    fwd: &ForwardGraph,
    config: &PolicyConfig,
    relaxation: Relaxation,
    rng: &mut R,
) -> Result<SampledMove> {
    let graph = &fwd.graph;
    let n = graph.n;
    let count = graph.node_count();

    let abs_scores = tape.abs(fwd.m_vec);
    let total_node = tape.sum(abs_scores);
    let total = tape.scalar(total_node);
    let degenerate = total < SCORE_DEGENERACY_TOL;
    if degenerate {
        log::warn!("degenerate all-zero score matrix; sampling uniformly over indices");
    }
    // +eps keeps log finite on exact zeros; for degenerate inputs all logits
    // collapse to the same constant, i.e. the uniform fallback
    let shifted = tape.add_const(abs_scores, 1e-30);
    let logits = tape.log(shifted)?;
    let sample =
        gumbel_softmax_sample(tape, logits, config.gumbel_temperature, rng, relaxation)?;
    let (i, j) = graph.pairs[sample.index];

    let probs = {
        let values = tape.value(abs_scores);
        if degenerate {
            vec![1.0 / count as f64; count]
        } else {
            values.iter().map(|v| v / total).collect()
        }
    };
    let log_prob = probs[sample.index].max(f64::MIN_POSITIVE).ln();
    let probs_node = tape.softmax(logits)?;

    let mut row_values = vec![BigInt::from(0); n];
    let mut col_values = vec![BigInt::from(0); n];
    let identity = tape.input_mat(&Mat::identity(n));
    let mut move_node = identity;
    let mut candidate_nodes = Vec::with_capacity(count);
    for (k, &(ci, cj)) in graph.pairs.iter().enumerate() {
        let slots = move_slots(graph, ci, cj, config.move_fill);
        let mut entry_nodes = Vec::with_capacity(slots.len());
        let mut positions = Vec::with_capacity(slots.len());
        for &(pos, pid) in &slots {
            let raw = tape.gather(fwd.m_vec, vec![pid])?;
            let rounded =
                stochastic_round(tape, raw, config.gumbel_temperature, rng, relaxation)?;
            if rounded.value.abs() >= 9e15 {
                return Err(Error::Internal(format!(
                    "sampled move entry {} overflows the exact integer range",
                    rounded.value
                )));
            }
            if k == sample.index {
                let int_val = BigInt::from(rounded.value as i64);
                let (r, c) = (pos / n, pos % n);
                if r == ci {
                    row_values[c] = int_val;
                } else {
                    col_values[r] = int_val;
                }
            }
            entry_nodes.push(rounded.output);
            positions.push(pos);
        }
        let entries = tape.stack_scalars(&entry_nodes)?;
        let update = tape.scatter(entries, positions, vec![n, n])?;
        candidate_nodes.push(tape.add(identity, update)?);
        let weight = tape.gather(sample.output, vec![k])?;
        let weighted = tape.mul_scalar(update, weight)?;
        move_node = tape.add(move_node, weighted)?;
    }

    let mv = ExtendedGaussMove::new(n, i, j, row_values, col_values)?;
    Ok(SampledMove {
        index: (i, j),
        mv,
        move_node,
        probs_node,
        candidate_nodes,
        log_prob,
        degenerate,
    })
}

/// Draws an index pair from a fixed score matrix with the same
/// Gumbel-argmax sampler used inside [`sample_move`]; useful when many
/// samples are needed for one matrix.
pub fn sample_index_from_scores<R: Rng>(
    scores: &Mat,
    temperature: f64,
    rng: &mut R,
) -> Result<(usize, usize)> {
    if temperature <= 0.0 {
        return Err(Error::InvalidParameter(format!(
            "gumbel temperature must be positive, got {temperature}"
        )));
    }
    let n = scores.rows();
    let graph = PairGraph::new(n);
    let mut best = 0usize;
    let mut best_val = f64::NEG_INFINITY;
    for (p, &(i, j)) in graph.pairs.iter().enumerate() {
        let logit = (scores[(i, j)].abs() + 1e-30).ln();
        let u: f64 = rng.gen::<f64>().max(f64::MIN_POSITIVE);
        let g = -(-u.ln()).ln();
        let v = logit + g;
        if v > best_val {
            best_val = v;
            best = p;
        }
    }
    Ok(graph.pairs[best])
}

/// Samples one extended Gauss move for a Gram matrix.
pub fn sample_move(g: &GramMatrix, params: &PolicyParams, seed: u64) -> Result<PolicyOutput> {
    let mut rng = stream_rng(seed, crate::rng::NS_EVAL, 0);
    sample_move_with_rng(g, params, &mut rng)
}

pub fn sample_move_with_rng<R: Rng>(
    g: &GramMatrix,
    params: &PolicyParams,
    rng: &mut R,
) -> Result<PolicyOutput> {
    let n = g.n();
    let mut tape = Tape::new();
    let param_nodes = input_params(&mut tape, params)?;
    let g_node = tape.input_mat(g.mat());
    let fwd = build_forward(&mut tape, g_node, n, params, &param_nodes)?;
    let mut scores = Mat::zeros(n, n);
    for (p, &(i, j)) in fwd.graph.pairs.iter().enumerate() {
        scores[(i, j)] = tape.value(fwd.m_vec)[p];
    }
    let sampled = sample_move_on_tape(
        &mut tape,
        &fwd,
        &params.config,
        Relaxation::StraightThrough,
        rng,
    )?;
    Ok(PolicyOutput {
        scores,
        index: sampled.index,
        mv: sampled.mv,
        log_prob: sampled.log_prob,
        degenerate_scores: sampled.degenerate,
    })
}

/// How the per-step losses aggregate into the training loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossAggregation {
    MeanSteps,
    FinalStep,
}

#[derive(Debug, Clone)]
pub struct RolloutConfig {
    pub steps: usize,
    pub relaxation: Relaxation,
    pub aggregation: LossAggregation,
    /// Train on the exact expectation of each step's loss over the index
    /// distribution: sum_k p_k * logdefect(B (I + U_k)) with every candidate
    /// update U_k on the tape. The trajectory still follows the sampled
    /// index; only the backpropagated objective marginalizes the choice.
    /// Index-sampling noise otherwise drowns the policy gradient — the
    /// straight-through path linearizes integer-sized moves and carries
    /// almost no usable signal for the discrete selection.
    pub expected_index_loss: bool,
}

impl RolloutConfig {
    pub fn training(steps: usize) -> Self {
        RolloutConfig {
            steps,
            relaxation: Relaxation::StraightThrough,
            aggregation: LossAggregation::MeanSteps,
            expected_index_loss: true,
        }
    }
}

/// A recursive application of k sampled moves with per-step losses and the
/// exact unimodular product.
pub struct RolloutOutcome {
    pub tape: Tape,
    /// Aggregated loss node (see [`LossAggregation`]); this is the reported
    /// quantity.
    pub loss: NodeId,
    /// Node to backpropagate for training: the loss plus the score-function
    /// index term when enabled (its forward value differs from `loss` by the
    /// advantage-weighted log-probabilities, which carry no meaning; only
    /// its gradients matter).
    pub objective: NodeId,
    /// Parameter nodes aligned with [`PolicyParams::tensors`].
    pub param_nodes: Vec<NodeId>,
    pub step_losses: Vec<f64>,
    pub moves: Vec<ExtendedGaussMove>,
    pub transform: UnimodularMatrix,
    pub final_basis: Basis,
    pub degenerate_steps: usize,
}

pub fn rollout(
    basis: &Basis,
    params: &PolicyParams,
    cfg: &RolloutConfig,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutOutcome> {
    if cfg.steps == 0 {
        return Err(Error::InvalidParameter("rollout needs at least one step".into()));
    }
    let n = basis.n();
    let log_det = basis.mat().det().abs().ln();

    let mut tape = Tape::new();
    let param_nodes = input_params(&mut tape, params)?;
    let mut b_node = tape.input_mat(basis.mat());

    let mut transform = IntMat::identity(n);
    let mut moves = Vec::with_capacity(cfg.steps);
    let mut loss_nodes = Vec::with_capacity(cfg.steps);
    let mut expected_loss_nodes = Vec::with_capacity(cfg.steps);
    let mut step_losses = Vec::with_capacity(cfg.steps);
    let mut degenerate_steps = 0;

    for _ in 0..cfg.steps {
        let bt = tape.transpose(b_node)?;
        let g_node = tape.matmul(bt, b_node)?;
        let fwd = build_forward(&mut tape, g_node, n, params, &param_nodes)?;
        let sampled = sample_move_on_tape(&mut tape, &fwd, &params.config, cfg.relaxation, rng)?;
        if sampled.degenerate {
            degenerate_steps += 1;
        }
        transform = transform.mul(materialize(&sampled.mv).mat());
        moves.push(sampled.mv);

        if cfg.expected_index_loss {
            // exact expectation over the index distribution: every candidate
            // next state is already materialized on the tape
            let mut candidate_losses = Vec::with_capacity(sampled.candidate_nodes.len());
            for &cand in &sampled.candidate_nodes {
                let b_k = tape.matmul(b_node, cand)?;
                let squares = tape.mul(b_k, b_k)?;
                let col_sq = tape.sum_axis0(squares)?;
                // the epsilon guards log on candidates that would zero a
                // column exactly
                let col_sq = tape.add_const(col_sq, 1e-300);
                let logs = tape.log(col_sq)?;
                let half_sum = tape.sum(logs);
                let half_sum = tape.scale(half_sum, 0.5);
                candidate_losses.push(tape.add_const(half_sum, -log_det));
            }
            let stacked = tape.stack_scalars(&candidate_losses)?;
            let weighted = tape.mul(stacked, sampled.probs_node)?;
            expected_loss_nodes.push(tape.sum(weighted));
        }

        b_node = tape.matmul(b_node, sampled.move_node)?;

        // determinant is preserved exactly in theory; guard the numeric path
        let current = tape.to_mat(b_node)?;
        let det = current.det().abs();
        if !det.is_finite() || det <= TOL_DET {
            return Err(Error::SingularBasis { det, tol: TOL_DET });
        }

        let squares = tape.mul(b_node, b_node)?;
        let col_sq = tape.sum_axis0(squares)?;
        let logs = tape.log(col_sq)?;
        let half_sum = tape.sum(logs);
        let half_sum = tape.scale(half_sum, 0.5);
        let step_loss = tape.add_const(half_sum, -log_det);
        step_losses.push(tape.scalar(step_loss));
        loss_nodes.push(step_loss);
    }

    let aggregate = |tape: &mut Tape, nodes: &[NodeId]| -> Result<NodeId> {
        Ok(match cfg.aggregation {
            LossAggregation::FinalStep => *nodes.last().expect("at least one step"),
            LossAggregation::MeanSteps => {
                let mut acc = nodes[0];
                for l in &nodes[1..] {
                    acc = tape.add(acc, *l)?;
                }
                tape.scale(acc, 1.0 / cfg.steps as f64)
            }
        })
    };
    let loss = aggregate(&mut tape, &loss_nodes)?;
    let objective = if cfg.expected_index_loss {
        aggregate(&mut tape, &expected_loss_nodes)?
    } else {
        loss
    };

    let q = UnimodularMatrix::new(transform)?;
    let final_basis = Basis::new(basis.mat().matmul(&q.mat().to_f64()))?;
    Ok(RolloutOutcome {
        tape,
        loss,
        objective,
        param_nodes,
        step_losses,
        moves,
        transform: q,
        final_basis,
        degenerate_steps,
    })
}
