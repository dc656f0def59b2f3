//! Triplet ranking and the Recall@K evaluation protocols.
//!
//! Triplets are scored by the product of subject, predicate and object
//! confidences. Constrained ranking admits at most one (the best) non-bg
//! predicate per ordered pair, so the returned set is consistent with a
//! scene graph; unconstrained ranking admits every non-bg predicate.
//! Recall@K is averaged image-wise; images without ground-truth relations
//! are skipped and counted.

use crate::data::{SceneInstance, BG};
use crate::model::{predict, ModelError, ModelParams, PredictedGraph};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};

/// Evaluation task. SGCls predicts entity and predicate labels from given
/// boxes; PredCls is additionally given the ground-truth entity labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    SGCls,
    PredCls,
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sgcls" => Ok(Task::SGCls),
            "predcls" => Ok(Task::PredCls),
            other => Err(format!("unknown task {other:?} (expected sgcls or predcls)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankMode {
    /// Top non-bg predicate per ordered pair only.
    Constrained,
    /// Every non-bg predicate per ordered pair.
    Unconstrained,
}

/// One scored candidate triplet with the entity labels used for matching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedTriplet {
    pub subject: usize,
    pub subject_label: usize,
    pub object: usize,
    pub object_label: usize,
    pub predicate: usize,
    pub score: f64,
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Ranks candidate triplets by `P(subject) * P(predicate) * P(object)`,
/// descending, with deterministic ties broken by (subject, object,
/// predicate). Entity labels are the argmax of the entity distributions.
pub fn rank_triplets(graph: &PredictedGraph, mode: RankMode) -> Vec<RankedTriplet> {
    rank_triplets_capped(graph, mode, None)
}

/// Like [`rank_triplets`], with an optional cap on predicates per pair in
/// unconstrained mode.
pub fn rank_triplets_capped(
    graph: &PredictedGraph,
    mode: RankMode,
    pair_cap: Option<usize>,
) -> Vec<RankedTriplet> {
    let labels: Vec<usize> = graph.entity_probs.iter().map(|p| argmax(p)).collect();
    let mut out = Vec::new();
    for ((i, j), probs) in &graph.pair_probs {
        let (i, j) = (*i, *j);
        // Non-bg predicates ordered by probability, ties by index.
        let mut candidates: Vec<usize> = (0..probs.len()).filter(|&p| p != BG).collect();
        candidates.sort_by(|&a, &b| {
            probs[b]
                .partial_cmp(&probs[a])
                .unwrap()
                .then(a.cmp(&b))
        });
        let keep = match mode {
            RankMode::Constrained => 1,
            RankMode::Unconstrained => pair_cap.unwrap_or(candidates.len()),
        };
        for &p in candidates.iter().take(keep) {
            out.push(RankedTriplet {
                subject: i,
                subject_label: labels[i],
                object: j,
                object_label: labels[j],
                predicate: p,
                score: graph.entity_probs[i][labels[i]] * probs[p] * graph.entity_probs[j][labels[j]],
            });
        }
    }
    out.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| (a.subject, a.object, a.predicate).cmp(&(b.subject, b.object, b.predicate)))
    });
    out
}

/// Image-wise Recall@K: the fraction of ground-truth triplets found in the
/// top-k ranked predictions. A triplet matches when subject index, object
/// index and predicate agree and the predicted entity labels equal the
/// ground truth (under PredCls the labels are given, so they always match).
/// Returns `None` for images without ground-truth relations.
pub fn recall_at_k(
    ranked: &[RankedTriplet],
    instance: &SceneInstance,
    k: usize,
    task: Task,
) -> Option<f64> {
    if instance.relations.is_empty() {
        return None;
    }
    let mut remaining: HashSet<(usize, usize, usize)> = instance
        .relations
        .iter()
        .map(|r| (r.subject(), r.object(), r.predicate()))
        .collect();
    let total = remaining.len();
    let mut hit = 0usize;
    for t in ranked.iter().take(k) {
        let key = (t.subject, t.object, t.predicate);
        let labels_ok = task == Task::PredCls
            || (t.subject_label == instance.entities[t.subject].gt_label
                && t.object_label == instance.entities[t.object].gt_label);
        if labels_ok && remaining.contains(&key) {
            remaining.remove(&key);
            hit += 1;
        }
    }
    Some(hit as f64 / total as f64)
}

/// Per-predicate hit/total counts at k: for each ground-truth pair, a hit
/// when the true predicate is among the pair's top-k predicted predicates
/// (bg included in the ranking, ties by index).
pub fn per_predicate_counts(
    graph: &PredictedGraph,
    instance: &SceneInstance,
    k: usize,
) -> BTreeMap<usize, (usize, usize)> {
    let by_pair: BTreeMap<(usize, usize), &Vec<f64>> = graph
        .pair_probs
        .iter()
        .map(|((i, j), p)| ((*i, *j), p))
        .collect();
    let mut counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    for r in &instance.relations {
        let entry = counts.entry(r.predicate()).or_insert((0, 0));
        entry.1 += 1;
        let Some(probs) = by_pair.get(&(r.subject(), r.object())) else {
            continue;
        };
        let mut order: Vec<usize> = (0..probs.len()).collect();
        order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
        if order.iter().take(k).any(|&p| p == r.predicate()) {
            entry.0 += 1;
        }
    }
    counts
}

/// Aggregate evaluation result over a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub task: Task,
    pub constrained_recall_50: f64,
    pub constrained_recall_100: f64,
    pub unconstrained_recall_50: f64,
    pub unconstrained_recall_100: f64,
    /// Predicate name -> Recall@5, only for predicates present in the
    /// ground truth.
    pub per_predicate_recall_5: BTreeMap<String, f64>,
    /// Images that contributed to the averages.
    pub image_count: usize,
    /// Images skipped for having no ground-truth relations.
    pub skipped_images: usize,
}

/// Runs the model over a dataset under the given task protocol. For PredCls
/// the entity distributions are replaced by ground-truth one-hots before
/// ranking. `predicate_names` supplies the per-predicate table's keys.
pub fn evaluate(
    dataset: &[SceneInstance],
    params: &ModelParams,
    task: Task,
    predicate_names: &[String],
) -> Result<EvalResult, ModelError> {
    let mut sums = [0.0f64; 4];
    let mut image_count = 0usize;
    let mut skipped = 0usize;
    let mut predicate_counts: BTreeMap<usize, (usize, usize)> = BTreeMap::new();

    for instance in dataset {
        let mut graph = predict(params, instance)?;
        if task == Task::PredCls {
            let classes = params.config.entity_classes;
            graph.entity_probs = instance
                .entities
                .iter()
                .map(|e| {
                    let mut one_hot = vec![0.0; classes];
                    one_hot[e.gt_label] = 1.0;
                    one_hot
                })
                .collect();
        }
        let constrained = rank_triplets(&graph, RankMode::Constrained);
        let unconstrained = rank_triplets(&graph, RankMode::Unconstrained);
        graph.triplets = constrained.clone();

        let recalls = [
            recall_at_k(&constrained, instance, 50, task),
            recall_at_k(&constrained, instance, 100, task),
            recall_at_k(&unconstrained, instance, 50, task),
            recall_at_k(&unconstrained, instance, 100, task),
        ];
        match recalls[0] {
            None => {
                skipped += 1;
                continue;
            }
            Some(_) => {
                image_count += 1;
                for (s, r) in sums.iter_mut().zip(recalls) {
                    *s += r.unwrap();
                }
            }
        }
        for (pred, (hits, total)) in per_predicate_counts(&graph, instance, 5) {
            let entry = predicate_counts.entry(pred).or_insert((0, 0));
            entry.0 += hits;
            entry.1 += total;
        }
    }

    let denom = image_count.max(1) as f64;
    let per_predicate_recall_5 = predicate_counts
        .into_iter()
        .filter(|(_, (_, total))| *total > 0)
        .map(|(pred, (hits, total))| {
            let name = predicate_names
                .get(pred)
                .cloned()
                .unwrap_or_else(|| format!("predicate_{pred}"));
            (name, hits as f64 / total as f64)
        })
        .collect();

    Ok(EvalResult {
        task,
        constrained_recall_50: sums[0] / denom,
        constrained_recall_100: sums[1] / denom,
        unconstrained_recall_50: sums[2] / denom,
        unconstrained_recall_100: sums[3] / denom,
        per_predicate_recall_5,
        image_count,
        skipped_images: skipped,
    })
}

#[cfg(test)]
mod tests;
