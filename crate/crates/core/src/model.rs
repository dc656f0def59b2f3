//! Full model assembly: node contexts, the global graph representation, the
//! MLP classification heads and the joint training objective.
//!
//! Per image, entity features are projected by a shared linear layer, each
//! annotated relation is transformed into the common relation space, and
//! every entity's context is its projected feature concatenated with the
//! element-wise sum of its subject-role relation representations. Graph
//! self-attention over the spatial adjacency embeds the contexts, an adapter
//! restores the configured width, and the sum over nodes is the global
//! representation fed (with the per-item projected feature) to both heads.

use crate::attention::{
    alpha_dense, attention_coefficients, build_adjacency, gat_layer, Adjacency, AttentionReport,
    HeadVars,
};
use crate::config::ModelConfig;
use crate::data::{relation_context, DataError, SceneInstance, BG};
use crate::semantic::{expected_embedding, relation_summary, role_term, EmbeddingTable};
use crate::tensor::{BoundParams, ParamStore, Tape, Tensor, TensorError, TensorResult, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("scene has no entities")]
    EmptyScene,
    #[error("instance incompatible with model config: {0}")]
    SizeMismatch(String),
    #[error("incompatible checkpoint: {0}")]
    IncompatibleCheckpoint(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("checkpoint encoding: {0}")]
    Json(#[from] serde_json::Error),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) enum ParamKind {
    Weight { fan_in: usize },
    /// Fan-in scaled by an extra gain factor (the visual projection).
    ScaledWeight { fan_in: usize, gain: f64 },
    /// Classifier output layers start at zero: logits begin uniform and the
    /// first updates already point along the loss gradient instead of
    /// fighting initialization noise.
    OutputWeight,
    Bias,
    Embedding,
}

/// Names, shapes and initialization kinds of every parameter, in a fixed
/// order shared by initialization, checkpoints and the optimizer.
pub(crate) fn param_layout(cfg: &ModelConfig) -> Vec<(String, Vec<usize>, ParamKind)> {
    use ParamKind::*;
    let d = cfg.feature_dim;
    let dp = cfg.visual_proj_dim;
    let e = cfg.embed_dim;
    let s = cfg.semantic_dim;
    let a = cfg.attention_dim;
    let h = cfg.mlp_hidden;
    let m = cfg.node_context_dim();
    let mp = cfg.head_dim();

    let mut out: Vec<(String, Vec<usize>, ParamKind)> = Vec::new();
    out.push((
        "visual_proj.w".into(),
        vec![d, dp],
        ScaledWeight {
            fan_in: d,
            gain: cfg.visual_proj_gain,
        },
    ));
    out.push(("visual_proj.b".into(), vec![1, dp], Bias));
    if cfg.use_semantic {
        for l in 0..3 {
            out.push((format!("embed_path.l{l}.w"), vec![e, e], Weight { fan_in: e }));
            out.push((format!("embed_path.l{l}.b"), vec![1, e], Bias));
        }
        for w in 1..=3 {
            out.push((
                format!("semantic.w{w}"),
                vec![dp + e, s],
                Weight { fan_in: dp + e },
            ));
        }
        out.push(("embed.entity".into(), vec![cfg.entity_classes, e], Embedding));
        out.push((
            "embed.predicate".into(),
            vec![cfg.predicate_classes, e],
            Embedding,
        ));
    }
    if cfg.use_attention {
        for k in 0..cfg.attention_heads {
            out.push((format!("attn.h{k}.u"), vec![mp, m], Weight { fan_in: m }));
            out.push((
                format!("attn.h{k}.lambda"),
                vec![2 * mp, 1],
                Weight { fan_in: 2 * mp },
            ));
        }
        let adapter_in = cfg.attention_heads * mp;
        out.push((
            "attn.out.w".into(),
            vec![adapter_in, a],
            Weight { fan_in: adapter_in },
        ));
    } else {
        out.push(("attn.out.w".into(), vec![m, a], Weight { fan_in: m }));
    }
    out.push(("attn.out.b".into(), vec![1, a], Bias));

    for (head, width) in [
        ("entity_head", cfg.entity_classes),
        ("relation_head", cfg.predicate_classes),
    ] {
        out.push((format!("{head}.l0.w"), vec![dp + a, h], Weight { fan_in: dp + a }));
        out.push((format!("{head}.l0.b"), vec![1, h], Bias));
        out.push((format!("{head}.l1.w"), vec![h, h], Weight { fan_in: h }));
        out.push((format!("{head}.l1.b"), vec![1, h], Bias));
        out.push((format!("{head}.l2.w"), vec![h, width], OutputWeight));
        out.push((format!("{head}.l2.b"), vec![1, width], Bias));
    }
    out
}

/// All learnable weights plus the configuration that shaped them.
#[derive(Debug, Clone)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub store: ParamStore,
}

impl ModelParams {
    /// Deterministic initialization: weights are symmetric-uniform scaled by
    /// fan-in, biases zero, embedding tables Gaussian (sigma 0.1) unless
    /// loaded from file.
    pub fn init(config: &ModelConfig, seed: u64) -> ModelParams {
        Self::build(config, seed, None).expect("random tables always match the layout")
    }

    /// Initialization with pre-loaded embedding tables; loaded tables are
    /// frozen unless `train_embeddings` overrides.
    pub fn init_with_table(
        config: &ModelConfig,
        seed: u64,
        table: EmbeddingTable,
    ) -> Result<ModelParams, ModelError> {
        Self::build(config, seed, Some(table))
    }

    fn build(
        config: &ModelConfig,
        seed: u64,
        table: Option<EmbeddingTable>,
    ) -> Result<ModelParams, ModelError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let random_table = EmbeddingTable::random(
            config.entity_classes,
            config.predicate_classes,
            config.embed_dim,
            // Separate stream so the table does not shift the weight draws.
            seed ^ 0x9e37_79b9_7f4a_7c15,
        );
        let table = table.unwrap_or(random_table);
        let trainable_tables = config
            .train_embeddings
            .unwrap_or(table.randomly_initialized);

        let mut store = ParamStore::new();
        for (name, shape, kind) in param_layout(config) {
            let numel: usize = shape.iter().product();
            let tensor = match kind {
                ParamKind::Weight { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
                    Tensor::from_vec(shape, data).with_grad()
                }
                ParamKind::ScaledWeight { fan_in, gain } => {
                    let bound = gain / (fan_in as f64).sqrt();
                    let data = (0..numel).map(|_| rng.gen_range(-bound..bound)).collect();
                    Tensor::from_vec(shape, data).with_grad()
                }
                ParamKind::OutputWeight | ParamKind::Bias => Tensor::zeros(shape).with_grad(),
                ParamKind::Embedding => {
                    let src = if name == "embed.entity" {
                        &table.entity
                    } else {
                        &table.predicate
                    };
                    if src.shape != shape {
                        return Err(ModelError::IncompatibleCheckpoint(format!(
                            "embedding table {name} has shape {:?}, expected {shape:?}",
                            src.shape
                        )));
                    }
                    let mut t = src.clone();
                    t.requires_grad = trainable_tables;
                    t
                }
            };
            store.push(name, tensor);
        }
        Ok(ModelParams {
            config: config.clone(),
            store,
        })
    }

    /// Parameters subject to weight decay: every trainable matrix, never
    /// biases, never frozen tables.
    pub fn decay_names(cfg: &ModelConfig) -> Vec<String> {
        param_layout(cfg)
            .into_iter()
            .filter(|(_, _, kind)| !matches!(kind, ParamKind::Bias))
            .map(|(name, _, _)| name)
            .collect()
    }
}

/// Distributions and context produced by one prediction pass.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedGraph {
    /// Per-entity label distributions, n x |C|.
    pub entity_probs: Vec<Vec<f64>>,
    /// Per ordered pair (subject, object): predicate distribution over |R|.
    pub pair_probs: Vec<((usize, usize), Vec<f64>)>,
    /// Global graph representation.
    pub omega: Vec<f64>,
    /// Graph-constrained ranking of candidate triplets.
    pub triplets: Vec<crate::eval::RankedTriplet>,
}

/// Tape handles produced by [`forward_scene`].
pub struct SceneForward {
    pub node_contexts: Vec<Var>,
    pub omega: Var,
    pub entity_logits: Vec<Var>,
    pub entity_probs: Vec<Var>,
    /// Aligned with the `pairs` argument of the forward pass.
    pub pair_probs: Vec<((usize, usize), Var)>,
    /// Per annotated relation, aligned with `instance.relations`.
    pub semantic_losses: Vec<Var>,
    pub adjacency: Adjacency,
    /// Dense per-head coefficient matrices, when requested.
    pub alpha: Option<Vec<Vec<Vec<f64>>>>,
}

fn affine(tape: &mut Tape, x: Var, w: Var, b: Var) -> TensorResult<Var> {
    let xw = tape.matmul(x, w)?;
    tape.add(xw, b)
}

fn affine_named(tape: &mut Tape, bound: &BoundParams<'_>, x: Var, prefix: &str) -> TensorResult<Var> {
    affine(
        tape,
        x,
        bound.var(&format!("{prefix}.w")),
        bound.var(&format!("{prefix}.b")),
    )
}

/// Three affine layers with activations after the first two; logits out.
fn mlp3(
    tape: &mut Tape,
    bound: &BoundParams<'_>,
    x: Var,
    prefix: &str,
    slope: f64,
) -> TensorResult<Var> {
    let h0 = affine_named(tape, bound, x, &format!("{prefix}.l0"))?;
    let h0 = tape.leaky_relu(h0, slope)?;
    let h1 = affine_named(tape, bound, h0, &format!("{prefix}.l1"))?;
    let h1 = tape.leaky_relu(h1, slope)?;
    affine_named(tape, bound, h1, &format!("{prefix}.l2"))
}

/// Three affine+nonlinearity layers projecting a word embedding.
fn embed_path(tape: &mut Tape, bound: &BoundParams<'_>, x: Var, slope: f64) -> TensorResult<Var> {
    let mut cur = x;
    for l in 0..3 {
        cur = affine_named(tape, bound, cur, &format!("embed_path.l{l}"))?;
        cur = tape.leaky_relu(cur, slope)?;
    }
    Ok(cur)
}

/// Runs the model forward on one instance. Classification heads are
/// evaluated on `pairs` (ordered, no self-pairs); relation summaries and
/// the semantic losses always cover the instance's annotated relations.
pub fn forward_scene(
    tape: &mut Tape,
    bound: &BoundParams<'_>,
    cfg: &ModelConfig,
    instance: &SceneInstance,
    pairs: &[(usize, usize)],
    want_alpha: bool,
) -> Result<SceneForward, ModelError> {
    let n = instance.n_entities();
    if n == 0 {
        return Err(ModelError::EmptyScene);
    }
    for (idx, e) in instance.entities.iter().enumerate() {
        if e.feat.len() != cfg.feature_dim {
            return Err(ModelError::SizeMismatch(format!(
                "entity {idx} feature width {} != configured {}",
                e.feat.len(),
                cfg.feature_dim
            )));
        }
        if e.scores.len() != cfg.entity_classes {
            return Err(ModelError::SizeMismatch(format!(
                "entity {idx} has {} scores for {} classes",
                e.scores.len(),
                cfg.entity_classes
            )));
        }
    }
    let slope = cfg.leaky_slope;

    // Shared visual projection of entity features.
    let proj: Vec<Var> = instance
        .entities
        .iter()
        .map(|e| {
            let f = tape.constant(vec![1, cfg.feature_dim], e.feat.clone());
            affine_named(tape, bound, f, "visual_proj")
        })
        .collect::<TensorResult<_>>()?;

    // Relation contexts for every pair the forward pass touches.
    let mut needed: std::collections::BTreeSet<(usize, usize)> = pairs.iter().copied().collect();
    if cfg.use_semantic {
        for r in &instance.relations {
            needed.insert((r.subject(), r.object()));
        }
    }
    let mut pair_proj: BTreeMap<(usize, usize), Var> = BTreeMap::new();
    let mut pair_scores: BTreeMap<(usize, usize), Vec<f64>> = BTreeMap::new();
    for &(i, j) in &needed {
        let ctx = relation_context(instance, i, j, cfg.union_margin, cfg.predicate_classes);
        let f = tape.constant(vec![1, cfg.feature_dim], ctx.feature);
        pair_proj.insert((i, j), affine_named(tape, bound, f, "visual_proj")?);
        pair_scores.insert((i, j), ctx.scores);
    }

    // Node contexts: projected feature, with the summed subject-role
    // relation representations when the semantic path is on.
    let mut semantic_losses = Vec::new();
    let node_contexts: Vec<Var> = if cfg.use_semantic {
        let ent_table = bound.var("embed.entity");
        let pred_table = bound.var("embed.predicate");
        let w1 = bound.var("semantic.w1");
        let w2 = bound.var("semantic.w2");
        let w3 = bound.var("semantic.w3");

        let mut subj_terms = Vec::with_capacity(n);
        let mut obj_terms = Vec::with_capacity(n);
        for (i, e) in instance.entities.iter().enumerate() {
            let scores = tape.constant(vec![1, cfg.entity_classes], e.scores.clone());
            let mixed = expected_embedding(tape, scores, ent_table)?;
            let v = embed_path(tape, bound, mixed, slope)?;
            subj_terms.push(role_term(tape, w1, proj[i], v)?);
            obj_terms.push(role_term(tape, w3, proj[i], v)?);
        }

        let mut thetas_by_subject: Vec<Vec<Var>> = vec![Vec::new(); n];
        for r in &instance.relations {
            let (i, j) = (r.subject(), r.object());
            let scores = tape.constant(
                vec![1, cfg.predicate_classes],
                pair_scores[&(i, j)].clone(),
            );
            let mixed = expected_embedding(tape, scores, pred_table)?;
            let v_p = embed_path(tape, bound, mixed, slope)?;
            let pred_term = role_term(tape, w2, pair_proj[&(i, j)], v_p)?;

            let theta = tape.concat(&[subj_terms[i], pred_term, obj_terms[j]], 1)?;
            thetas_by_subject[i].push(theta);

            let sum = tape.add(subj_terms[i], pred_term)?;
            let diff = tape.sub(obj_terms[j], sum)?;
            semantic_losses.push(tape.l2_sq(diff));
        }

        (0..n)
            .map(|i| {
                let summary =
                    relation_summary(tape, &thetas_by_subject[i], cfg.relation_repr_dim())?;
                tape.concat(&[proj[i], summary], 1)
            })
            .collect::<TensorResult<_>>()?
    } else {
        proj.clone()
    };

    // Spatial adjacency and graph self-attention.
    let boxes: Vec<_> = instance.entities.iter().map(|e| e.bbox).collect();
    let adjacency = build_adjacency(&boxes, cfg.iou_threshold, cfg.distance_ratio_threshold);
    let (mixed, alpha) = if cfg.use_attention {
        let heads: Vec<HeadVars> = (0..cfg.attention_heads)
            .map(|k| HeadVars {
                u: bound.var(&format!("attn.h{k}.u")),
                lambda: bound.var(&format!("attn.h{k}.lambda")),
            })
            .collect();
        let out = gat_layer(tape, &heads, &node_contexts, &adjacency, slope)?;
        let alpha = if want_alpha {
            let mut per_head = Vec::with_capacity(heads.len());
            for head in &heads {
                let rows = attention_coefficients(tape, head, &node_contexts, &adjacency, slope)?;
                per_head.push(alpha_dense(tape, &rows, n));
            }
            Some(per_head)
        } else {
            None
        };
        (out, alpha)
    } else {
        (node_contexts.clone(), None)
    };

    let node_repr: Vec<Var> = mixed
        .iter()
        .map(|&x| affine_named(tape, bound, x, "attn.out"))
        .collect::<TensorResult<_>>()?;
    let omega = tape.sum_all(&node_repr)?;

    // Classification heads.
    let mut entity_logits = Vec::with_capacity(n);
    let mut entity_probs = Vec::with_capacity(n);
    for &p in &proj {
        let input = tape.concat(&[p, omega], 1)?;
        let logits = mlp3(tape, bound, input, "entity_head", slope)?;
        entity_logits.push(logits);
        entity_probs.push(tape.softmax_rows(logits)?);
    }
    let mut pair_probs = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        let input = tape.concat(&[pair_proj[&(i, j)], omega], 1)?;
        let logits = mlp3(tape, bound, input, "relation_head", slope)?;
        pair_probs.push(((i, j), tape.softmax_rows(logits)?));
    }

    Ok(SceneForward {
        node_contexts,
        omega,
        entity_logits,
        entity_probs,
        pair_probs,
        semantic_losses,
        adjacency,
        alpha,
    })
}

/// Full prediction for one image: label distributions for every entity and
/// every ordered pair, the global representation, and the graph-constrained
/// triplet ranking.
pub fn predict(params: &ModelParams, instance: &SceneInstance) -> Result<PredictedGraph, ModelError> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&params.store, &mut tape);
    let pairs = instance.ordered_pairs();
    let fwd = forward_scene(&mut tape, &bound, &params.config, instance, &pairs, false)?;
    let mut graph = PredictedGraph {
        entity_probs: fwd
            .entity_probs
            .iter()
            .map(|&v| tape.value(v).to_vec())
            .collect(),
        pair_probs: fwd
            .pair_probs
            .iter()
            .map(|&((i, j), v)| ((i, j), tape.value(v).to_vec()))
            .collect(),
        omega: tape.value(fwd.omega).to_vec(),
        triplets: Vec::new(),
    };
    graph.triplets = crate::eval::rank_triplets(&graph, crate::eval::RankMode::Constrained);
    Ok(graph)
}

/// Global graph representation of one instance under the given parameters.
pub fn global_representation(
    params: &ModelParams,
    instance: &SceneInstance,
) -> Result<Vec<f64>, ModelError> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&params.store, &mut tape);
    let fwd = forward_scene(&mut tape, &bound, &params.config, instance, &[], false)?;
    Ok(tape.value(fwd.omega).to_vec())
}

/// Attention diagnostics for one image.
pub fn attention_report(
    params: &ModelParams,
    instance: &SceneInstance,
) -> Result<AttentionReport, ModelError> {
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&params.store, &mut tape);
    let fwd = forward_scene(&mut tape, &bound, &params.config, instance, &[], true)?;
    Ok(AttentionReport::new(
        instance.id.clone(),
        &fwd.adjacency,
        fwd.alpha.unwrap_or_default(),
    ))
}

/// Ordered pairs with the label each contributes to the relation loss:
/// annotated pairs carry their predicate, sampled unannotated pairs carry bg.
#[derive(Debug, Clone, PartialEq)]
pub struct PairSample {
    pub items: Vec<(usize, usize, usize)>,
}

impl PairSample {
    /// Every ordered pair, with implicit bg labels on unannotated ones.
    pub fn full(instance: &SceneInstance) -> PairSample {
        let annotated: BTreeMap<(usize, usize), usize> = instance
            .relations
            .iter()
            .map(|r| ((r.subject(), r.object()), r.predicate()))
            .collect();
        let items = instance
            .ordered_pairs()
            .into_iter()
            .map(|(i, j)| (i, j, annotated.get(&(i, j)).copied().unwrap_or(BG)))
            .collect();
        PairSample { items }
    }

    /// All positives plus `ratio` times as many bg pairs, drawn without
    /// replacement from the unannotated ordered pairs.
    pub fn subsampled(instance: &SceneInstance, ratio: usize, rng: &mut impl Rng) -> PairSample {
        let annotated: BTreeMap<(usize, usize), usize> = instance
            .relations
            .iter()
            .map(|r| ((r.subject(), r.object()), r.predicate()))
            .collect();
        let mut items: Vec<(usize, usize, usize)> = instance
            .relations
            .iter()
            .map(|r| (r.subject(), r.object(), r.predicate()))
            .collect();
        let mut negatives: Vec<(usize, usize)> = instance
            .ordered_pairs()
            .into_iter()
            .filter(|p| !annotated.contains_key(p))
            .collect();
        let want = ratio * items.len();
        // Partial Fisher-Yates: the first `want` slots are a uniform draw.
        for k in 0..want.min(negatives.len()) {
            let pick = rng.gen_range(k..negatives.len());
            negatives.swap(k, pick);
        }
        for &(i, j) in negatives.iter().take(want) {
            items.push((i, j, BG));
        }
        PairSample { items }
    }

    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.items.iter().map(|&(i, j, _)| (i, j)).collect()
    }
}

/// Sum of entity cross entropies against ground-truth labels.
pub fn entity_loss(
    tape: &mut Tape,
    fwd: &SceneForward,
    instance: &SceneInstance,
) -> Result<Var, ModelError> {
    let mut terms = Vec::with_capacity(instance.n_entities());
    for (probs, e) in fwd.entity_probs.iter().zip(&instance.entities) {
        terms.push(tape.cross_entropy(*probs, e.gt_label)?);
    }
    Ok(tape.sum_all(&terms)?)
}

/// Sum of predicate cross entropies over the sampled pairs. The forward
/// pass must have been run on exactly the sample's pairs.
pub fn relation_loss(
    tape: &mut Tape,
    fwd: &SceneForward,
    sample: &PairSample,
) -> Result<Var, ModelError> {
    if sample.items.is_empty() {
        return Ok(tape.zeros(vec![1]));
    }
    let by_pair: BTreeMap<(usize, usize), Var> = fwd.pair_probs.iter().copied().collect();
    let mut terms = Vec::with_capacity(sample.items.len());
    for &(i, j, label) in &sample.items {
        let probs = by_pair.get(&(i, j)).copied().ok_or_else(|| {
            ModelError::SizeMismatch(format!("pair ({i},{j}) missing from forward pass"))
        })?;
        terms.push(tape.cross_entropy(probs, label)?);
    }
    Ok(tape.sum_all(&terms)?)
}

/// Joint objective: weighted entity, relation and semantic losses plus
/// weight decay over all trainable non-bias parameters.
pub fn joint_loss(
    tape: &mut Tape,
    bound: &BoundParams<'_>,
    cfg: &ModelConfig,
    instance: &SceneInstance,
    sample: &PairSample,
) -> Result<Var, ModelError> {
    let fwd = forward_scene(tape, bound, cfg, instance, &sample.pairs(), false)?;
    let le = entity_loss(tape, &fwd, instance)?;
    let lr = relation_loss(tape, &fwd, sample)?;
    let ls = if fwd.semantic_losses.is_empty() {
        tape.zeros(vec![1])
    } else {
        tape.sum_all(&fwd.semantic_losses)?
    };

    let le_w = tape.scale(le, cfg.lambda_entity);
    let lr_w = tape.scale(lr, cfg.lambda_relation);
    let ls_w = tape.scale(ls, cfg.lambda_semantic);
    let mut total = tape.add(le_w, lr_w)?;
    total = tape.add(total, ls_w)?;

    if cfg.weight_decay != 0.0 {
        let mut decay_terms = Vec::new();
        for name in ModelParams::decay_names(cfg) {
            if bound
                .store()
                .get(&name)
                .map(|t| t.requires_grad)
                .unwrap_or(false)
            {
                let v = bound.var(&name);
                decay_terms.push(tape.l2_sq(v));
            }
        }
        if !decay_terms.is_empty() {
            let wd = tape.sum_all(&decay_terms)?;
            let wd = tape.scale(wd, cfg.weight_decay);
            total = tape.add(total, wd)?;
        }
    }
    Ok(total)
}
