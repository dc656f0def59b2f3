//! Spatial adjacency rules and multi-head graph self-attention.
//!
//! Neighbors are determined by four box predicates (containment both ways,
//! IoU overlap, relative center distance against the image diagonal), plus
//! self-loops so no node ever attends over an empty set. Attention
//! coefficients for node i are a softmax over its neighbor set of
//! `LeakyReLU(lambda^T [U f_i || U f_j])`, and each head emits
//! `sigma(sum_j alpha_ij U f_j)`; head outputs are concatenated.

use crate::data::Box2D;
use crate::tensor::{Tape, TensorResult, Var};
use serde::Serialize;

/// Intersection over union of two boxes; 0 when disjoint.
pub fn iou(a: &Box2D, b: &Box2D) -> f64 {
    let ix = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let iy = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Which neighbor rules fired for an ordered pair (i, j).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct EdgeRules {
    /// b_i completely includes b_j.
    pub inside: bool,
    /// b_i is fully covered by b_j.
    pub cover: bool,
    /// IoU above the overlap threshold.
    pub overlap: bool,
    /// Center distance over the image diagonal below the relative threshold.
    pub relative: bool,
}

impl EdgeRules {
    pub fn any(&self) -> bool {
        self.inside || self.cover || self.overlap || self.relative
    }
}

/// Boolean neighbor matrix over entities with per-edge rule tags.
/// Self-loops are always present: the diagonal is true by convention, so
/// every neighbor set is non-empty.
#[derive(Debug, Clone, PartialEq)]
pub struct Adjacency {
    n: usize,
    edges: Vec<bool>,
    rules: Vec<EdgeRules>,
    /// Diagonal convention, recorded explicitly.
    pub self_loops: bool,
}

impl Adjacency {
    pub fn n(&self) -> usize {
        self.n
    }

    pub fn is_edge(&self, i: usize, j: usize) -> bool {
        self.edges[i * self.n + j]
    }

    pub fn rules(&self, i: usize, j: usize) -> EdgeRules {
        self.rules[i * self.n + j]
    }

    /// Neighbor indices of node i in ascending order (includes i itself).
    pub fn neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.n).filter(|&j| self.is_edge(i, j)).collect()
    }

    pub fn to_matrix(&self) -> Vec<Vec<bool>> {
        (0..self.n)
            .map(|i| (0..self.n).map(|j| self.is_edge(i, j)).collect())
            .collect()
    }
}

/// Normalized boxes live in the unit square, so the image diagonal is
/// constant.
pub const IMAGE_DIAGONAL: f64 = std::f64::consts::SQRT_2;

/// Builds the neighbor matrix from the four spatial rules. An edge (i, j)
/// is present iff any rule fires or i == j.
pub fn build_adjacency(boxes: &[Box2D], iou_threshold: f64, distance_ratio_threshold: f64) -> Adjacency {
    let n = boxes.len();
    assert!(n >= 1, "adjacency requires at least one box");
    let mut edges = vec![false; n * n];
    let mut rules = vec![EdgeRules::default(); n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j {
                edges[i * n + j] = true;
                continue;
            }
            let (cxi, cyi) = boxes[i].center();
            let (cxj, cyj) = boxes[j].center();
            let d = ((cxj - cxi).powi(2) + (cyj - cyi).powi(2)).sqrt();
            let tag = EdgeRules {
                inside: boxes[i].contains(&boxes[j]),
                cover: boxes[j].contains(&boxes[i]),
                overlap: iou(&boxes[i], &boxes[j]) > iou_threshold,
                relative: d / IMAGE_DIAGONAL < distance_ratio_threshold,
            };
            rules[i * n + j] = tag;
            edges[i * n + j] = tag.any();
        }
    }
    Adjacency {
        n,
        edges,
        rules,
        self_loops: true,
    }
}

/// Tape handles of one attention head: `u` is the M'xM input transform and
/// `lambda` the 2M'x1 attention weight vector.
#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub u: Var,
    pub lambda: Var,
}

/// Attention coefficients of one node: `alpha` is a 1x|neighbors| row
/// summing to 1, aligned with `neighbors` (ascending).
#[derive(Debug, Clone)]
pub struct AttentionRow {
    pub node: usize,
    pub neighbors: Vec<usize>,
    pub alpha: Var,
}

/// Computes attention coefficients for every node of one head.
/// `features[i]` is the 1xM input row of node i.
pub fn attention_coefficients(
    tape: &mut Tape,
    head: &HeadVars,
    features: &[Var],
    adjacency: &Adjacency,
    slope: f64,
) -> TensorResult<Vec<AttentionRow>> {
    let transformed = transform_features(tape, head, features)?;
    let mut rows = Vec::with_capacity(features.len());
    for i in 0..features.len() {
        rows.push(coefficient_row(tape, head, &transformed, adjacency, i, slope)?);
    }
    Ok(rows)
}

fn transform_features(tape: &mut Tape, head: &HeadVars, features: &[Var]) -> TensorResult<Vec<Var>> {
    let ut = tape.transpose(head.u)?;
    features.iter().map(|&f| tape.matmul(f, ut)).collect()
}

fn coefficient_row(
    tape: &mut Tape,
    head: &HeadVars,
    transformed: &[Var],
    adjacency: &Adjacency,
    node: usize,
    slope: f64,
) -> TensorResult<AttentionRow> {
    let neighbors = adjacency.neighbors(node);
    debug_assert!(!neighbors.is_empty(), "self-loops guarantee a neighbor");
    let mut scores = Vec::with_capacity(neighbors.len());
    for &j in &neighbors {
        let cat = tape.concat(&[transformed[node], transformed[j]], 1)?;
        let e = tape.matmul(cat, head.lambda)?;
        scores.push(tape.leaky_relu(e, slope)?);
    }
    let row = tape.concat(&scores, 1)?;
    let alpha = tape.softmax_rows(row)?;
    Ok(AttentionRow {
        node,
        neighbors,
        alpha,
    })
}

/// Dense n x n coefficient matrix with exact zeros on non-edges.
pub fn alpha_dense(tape: &Tape, rows: &[AttentionRow], n: usize) -> Vec<Vec<f64>> {
    let mut out = vec![vec![0.0; n]; n];
    for row in rows {
        let vals = tape.value(row.alpha);
        for (k, &j) in row.neighbors.iter().enumerate() {
            out[row.node][j] = vals[k];
        }
    }
    out
}

/// One multi-head attention layer. Returns a per-node 1x(K*M') row: the
/// concatenation over heads of `sigma(sum_j alpha_ij U f_j)`, with sigma a
/// LeakyReLU of the configured slope.
pub fn gat_layer(
    tape: &mut Tape,
    heads: &[HeadVars],
    features: &[Var],
    adjacency: &Adjacency,
    slope: f64,
) -> TensorResult<Vec<Var>> {
    assert!(!heads.is_empty(), "at least one attention head");
    let n = features.len();
    let mut per_head: Vec<Vec<Var>> = Vec::with_capacity(heads.len());
    for head in heads {
        let transformed = transform_features(tape, head, features)?;
        let mut outs = Vec::with_capacity(n);
        for i in 0..n {
            let row = coefficient_row(tape, head, &transformed, adjacency, i, slope)?;
            let stacked: Vec<Var> = row.neighbors.iter().map(|&j| transformed[j]).collect();
            let nbrs = tape.concat(&stacked, 0)?;
            let mixed = tape.matmul(row.alpha, nbrs)?;
            outs.push(tape.leaky_relu(mixed, slope)?);
        }
        per_head.push(outs);
    }
    (0..n)
        .map(|i| {
            let parts: Vec<Var> = per_head.iter().map(|h| h[i]).collect();
            tape.concat(&parts, 1)
        })
        .collect()
}

/// Per-image attention diagnostics: adjacency, fired rules and the dense
/// coefficient matrix of every head.
#[derive(Debug, Serialize)]
pub struct AttentionReport {
    pub image_id: String,
    pub adjacency: Vec<Vec<bool>>,
    pub edge_rules: Vec<Vec<Vec<String>>>,
    /// One dense n x n matrix per head.
    pub alpha: Vec<Vec<Vec<f64>>>,
}

impl AttentionReport {
    pub fn new(image_id: String, adjacency: &Adjacency, alpha: Vec<Vec<Vec<f64>>>) -> Self {
        let n = adjacency.n();
        let edge_rules = (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let r = adjacency.rules(i, j);
                        let mut tags = Vec::new();
                        if r.inside {
                            tags.push("inside".to_string());
                        }
                        if r.cover {
                            tags.push("cover".to_string());
                        }
                        if r.overlap {
                            tags.push("overlap".to_string());
                        }
                        if r.relative {
                            tags.push("relative".to_string());
                        }
                        tags
                    })
                    .collect()
            })
            .collect();
        AttentionReport {
            image_id,
            adjacency: adjacency.to_matrix(),
            edge_rules,
            alpha,
        }
    }
}
