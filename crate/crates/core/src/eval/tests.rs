use super::*;
use crate::config::{ModelConfig, SyntheticConfig};
use crate::data::{Box2D, Entity, Relation};
use crate::synthetic::gen_synthetic;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn softmax(logits: &[f64]) -> Vec<f64> {
    crate::data::initial_scores(logits)
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, classes: usize, predicates: usize) -> PredictedGraph {
    let entity_probs = (0..n)
        .map(|_| softmax(&(0..classes).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<_>>()))
        .collect();
    let mut pair_probs = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j {
                let logits: Vec<f64> = (0..predicates).map(|_| rng.gen_range(-2.0..2.0)).collect();
                pair_probs.push(((i, j), softmax(&logits)));
            }
        }
    }
    PredictedGraph {
        entity_probs,
        pair_probs,
        omega: vec![],
        triplets: vec![],
    }
}

fn dummy_instance(rng: &mut ChaCha8Rng, n: usize, classes: usize, predicates: usize) -> SceneInstance {
    let entities = (0..n)
        .map(|k| Entity {
            bbox: Box2D::new(0.1 + 0.02 * k as f64, 0.1, 0.5, 0.5),
            feat: vec![0.0; 4],
            scores: vec![1.0 / classes as f64; classes],
            gt_label: rng.gen_range(0..classes),
        })
        .collect();
    let mut relations = Vec::new();
    for i in 0..n {
        for j in 0..n {
            if i != j && rng.gen_bool(0.5) {
                relations.push(Relation(i, j, rng.gen_range(1..predicates)));
            }
        }
    }
    SceneInstance {
        id: "test".into(),
        entities,
        relations,
    }
}

/// Straight-line reimplementation of ranking + matching used as the oracle.
fn brute_force_recall(
    graph: &PredictedGraph,
    instance: &SceneInstance,
    k: usize,
    task: Task,
    mode: RankMode,
) -> Option<f64> {
    if instance.relations.is_empty() {
        return None;
    }
    let labels: Vec<usize> = graph
        .entity_probs
        .iter()
        .map(|p| {
            let mut best = 0;
            for (i, &v) in p.iter().enumerate() {
                if v > p[best] {
                    best = i;
                }
            }
            best
        })
        .collect();
    let mut cands: Vec<(f64, usize, usize, usize)> = Vec::new();
    for ((i, j), probs) in &graph.pair_probs {
        let mut preds: Vec<usize> = (1..probs.len()).collect();
        preds.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
        let take = match mode {
            RankMode::Constrained => 1,
            RankMode::Unconstrained => preds.len(),
        };
        for &p in preds.iter().take(take) {
            let score =
                graph.entity_probs[*i][labels[*i]] * probs[p] * graph.entity_probs[*j][labels[*j]];
            cands.push((score, *i, *j, p));
        }
    }
    cands.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .unwrap()
            .then_with(|| (a.1, a.2, a.3).cmp(&(b.1, b.2, b.3)))
    });
    let mut remaining: std::collections::HashSet<(usize, usize, usize)> = instance
        .relations
        .iter()
        .map(|r| (r.subject(), r.object(), r.predicate()))
        .collect();
    let total = remaining.len();
    let mut hits = 0;
    for &(_, i, j, p) in cands.iter().take(k) {
        let ok = match task {
            Task::PredCls => true,
            Task::SGCls => {
                labels[i] == instance.entities[i].gt_label
                    && labels[j] == instance.entities[j].gt_label
            }
        };
        if ok && remaining.remove(&(i, j, p)) {
            hits += 1;
        }
    }
    Some(hits as f64 / total as f64)
}

#[test]
fn constrained_ranking_caps_one_triplet_per_pair() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let graph = random_graph(&mut rng, 2, 5, 51);
    let constrained = rank_triplets(&graph, RankMode::Constrained);
    assert!(constrained.len() <= 2);
    let unconstrained = rank_triplets(&graph, RankMode::Unconstrained);
    assert_eq!(unconstrained.len(), 2 * 50);
    assert!(unconstrained.iter().all(|t| t.predicate != BG));
    // Optional cap on predicates per pair.
    let capped = rank_triplets_capped(&graph, RankMode::Unconstrained, Some(3));
    assert_eq!(capped.len(), 2 * 3);
}

#[test]
fn higher_confidence_products_rank_first() {
    let graph = PredictedGraph {
        entity_probs: vec![vec![0.9, 0.1], vec![0.9, 0.1]],
        pair_probs: vec![
            ((0, 1), vec![0.0, 0.8, 0.2]),
            ((1, 0), vec![0.0, 0.7, 0.3]),
        ],
        omega: vec![],
        triplets: vec![],
    };
    let ranked = rank_triplets(&graph, RankMode::Constrained);
    // 0.9*0.8*0.9 beats 0.9*0.7*0.9.
    assert_eq!((ranked[0].subject, ranked[0].object), (0, 1));
    assert!((ranked[0].score - 0.9 * 0.8 * 0.9).abs() < 1e-12);
    assert!(ranked[0].score > ranked[1].score);
}

#[test]
fn ranking_breaks_ties_deterministically() {
    let uniform = vec![1.0 / 3.0; 3];
    let graph = PredictedGraph {
        entity_probs: vec![vec![0.5, 0.5], vec![0.5, 0.5]],
        pair_probs: vec![((0, 1), uniform.clone()), ((1, 0), uniform)],
        omega: vec![],
        triplets: vec![],
    };
    let ranked = rank_triplets(&graph, RankMode::Unconstrained);
    let order: Vec<(usize, usize, usize)> =
        ranked.iter().map(|t| (t.subject, t.object, t.predicate)).collect();
    assert_eq!(order, vec![(0, 1, 1), (0, 1, 2), (1, 0, 1), (1, 0, 2)]);
}

#[test]
fn constrained_choice_ignores_logit_shifts() {
    // Adding a constant to every relation logit leaves the picked predicate
    // unchanged.
    let logits = vec![0.3, -0.7, 1.2, 0.1];
    let shifted: Vec<f64> = logits.iter().map(|v| v + 9.0).collect();
    let graph_a = PredictedGraph {
        entity_probs: vec![vec![1.0], vec![1.0]],
        pair_probs: vec![((0, 1), softmax(&logits))],
        omega: vec![],
        triplets: vec![],
    };
    let graph_b = PredictedGraph {
        entity_probs: vec![vec![1.0], vec![1.0]],
        pair_probs: vec![((0, 1), softmax(&shifted))],
        omega: vec![],
        triplets: vec![],
    };
    let a = rank_triplets(&graph_a, RankMode::Constrained);
    let b = rank_triplets(&graph_b, RankMode::Constrained);
    assert_eq!(a[0].predicate, b[0].predicate);
}

#[test]
fn perfect_predictions_give_full_recall() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let instance = dummy_instance(&mut rng, 4, 3, 4);
    // One-hot correct heads.
    let entity_probs = instance
        .entities
        .iter()
        .map(|e| {
            let mut p = vec![0.0; 3];
            p[e.gt_label] = 1.0;
            p
        })
        .collect();
    let gt: std::collections::HashMap<(usize, usize), usize> = instance
        .relations
        .iter()
        .map(|r| ((r.subject(), r.object()), r.predicate()))
        .collect();
    let mut pair_probs = Vec::new();
    for (i, j) in instance.ordered_pairs() {
        let mut p = vec![0.0; 4];
        p[gt.get(&(i, j)).copied().unwrap_or(BG)] = 1.0;
        pair_probs.push(((i, j), p));
    }
    let graph = PredictedGraph {
        entity_probs,
        pair_probs,
        omega: vec![],
        triplets: vec![],
    };
    let ranked = rank_triplets(&graph, RankMode::Constrained);
    assert_eq!(
        recall_at_k(&ranked, &instance, 50, Task::SGCls),
        Some(1.0)
    );
}

#[test]
fn partial_matches_average_correctly() {
    // Two ground-truth triplets, exactly one predicted on top.
    let instance = SceneInstance {
        id: "x".into(),
        entities: vec![
            Entity {
                bbox: Box2D::new(0.1, 0.1, 0.2, 0.2),
                feat: vec![],
                scores: vec![1.0],
                gt_label: 0,
            },
            Entity {
                bbox: Box2D::new(0.3, 0.3, 0.4, 0.4),
                feat: vec![],
                scores: vec![1.0],
                gt_label: 0,
            },
        ],
        relations: vec![Relation(0, 1, 1), Relation(1, 0, 2)],
    };
    let ranked = vec![RankedTriplet {
        subject: 0,
        subject_label: 0,
        object: 1,
        object_label: 0,
        predicate: 1,
        score: 1.0,
    }];
    assert_eq!(recall_at_k(&ranked, &instance, 50, Task::SGCls), Some(0.5));
    // Empty ground truth is a skip, not a zero.
    let empty = SceneInstance {
        relations: vec![],
        ..instance
    };
    assert_eq!(recall_at_k(&ranked, &empty, 50, Task::SGCls), None);
}

#[test]
fn recall_matches_brute_force_on_random_scenes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..500 {
        let n = rng.gen_range(2..=4usize);
        let classes = rng.gen_range(2..=4usize);
        let predicates = rng.gen_range(2..=6usize);
        let graph = random_graph(&mut rng, n, classes, predicates);
        let instance = dummy_instance(&mut rng, n, classes, predicates);
        for task in [Task::SGCls, Task::PredCls] {
            for mode in [RankMode::Constrained, RankMode::Unconstrained] {
                for k in [1, 3, 50, 100] {
                    let ranked = rank_triplets(&graph, mode);
                    let got = recall_at_k(&ranked, &instance, k, task);
                    let want = brute_force_recall(&graph, &instance, k, task, mode);
                    assert_eq!(got, want, "case {case} task {task:?} mode {mode:?} k {k}");
                }
            }
        }
    }
}

#[test]
fn unconstrained_dominates_constrained_and_k100_dominates_k50() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        let n = rng.gen_range(2..=4usize);
        let graph = random_graph(&mut rng, n, 3, 5);
        let instance = dummy_instance(&mut rng, n, 3, 5);
        if instance.relations.is_empty() {
            continue;
        }
        let con = rank_triplets(&graph, RankMode::Constrained);
        let unc = rank_triplets(&graph, RankMode::Unconstrained);
        for task in [Task::SGCls, Task::PredCls] {
            let c50 = recall_at_k(&con, &instance, 50, task).unwrap();
            let c100 = recall_at_k(&con, &instance, 100, task).unwrap();
            let u50 = recall_at_k(&unc, &instance, 50, task).unwrap();
            let u100 = recall_at_k(&unc, &instance, 100, task).unwrap();
            assert!(u50 >= c50);
            assert!(u100 >= c100);
            assert!(c100 >= c50);
            assert!(u100 >= u50);
        }
    }
}

#[test]
fn per_predicate_recall_perfect_and_absent() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let instance = dummy_instance(&mut rng, 3, 2, 4);
    let gt: std::collections::HashMap<(usize, usize), usize> = instance
        .relations
        .iter()
        .map(|r| ((r.subject(), r.object()), r.predicate()))
        .collect();
    let mut pair_probs = Vec::new();
    for (i, j) in instance.ordered_pairs() {
        let mut p = vec![0.0; 4];
        p[gt.get(&(i, j)).copied().unwrap_or(BG)] = 1.0;
        pair_probs.push(((i, j), p));
    }
    let graph = PredictedGraph {
        entity_probs: vec![vec![1.0, 0.0]; 3],
        pair_probs,
        omega: vec![],
        triplets: vec![],
    };
    let counts = per_predicate_counts(&graph, &instance, 5);
    for r in &instance.relations {
        let (hits, total) = counts[&r.predicate()];
        assert_eq!(hits, total);
    }
    // Predicates absent from the ground truth never appear.
    let present: std::collections::HashSet<usize> =
        instance.relations.iter().map(|r| r.predicate()).collect();
    for pred in counts.keys() {
        assert!(present.contains(pred));
    }
}

#[test]
fn per_predicate_recall_of_random_scores_approaches_five_over_51() {
    // Sampling oracle: with i.i.d. random score vectors every predicate is
    // equally likely to land in the top five of 51.
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut hits = 0usize;
    let mut total = 0usize;
    for _ in 0..10_000 {
        let instance = SceneInstance {
            id: "s".into(),
            entities: vec![
                Entity {
                    bbox: Box2D::new(0.1, 0.1, 0.2, 0.2),
                    feat: vec![],
                    scores: vec![1.0],
                    gt_label: 0,
                },
                Entity {
                    bbox: Box2D::new(0.3, 0.3, 0.4, 0.4),
                    feat: vec![],
                    scores: vec![1.0],
                    gt_label: 0,
                },
            ],
            relations: vec![Relation(0, 1, rng.gen_range(1..51))],
        };
        let logits: Vec<f64> = (0..51).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let graph = PredictedGraph {
            entity_probs: vec![vec![1.0]; 2],
            pair_probs: vec![((0, 1), softmax(&logits))],
            omega: vec![],
            triplets: vec![],
        };
        for (_, (h, t)) in per_predicate_counts(&graph, &instance, 5) {
            hits += h;
            total += t;
        }
    }
    let rate = hits as f64 / total as f64;
    let expected = 5.0 / 51.0;
    assert!(
        (rate - expected).abs() < 0.03,
        "rate {rate} vs expected {expected}"
    );
}

fn eval_setup() -> (Vec<SceneInstance>, crate::model::ModelParams, Vec<String>) {
    let syn = SyntheticConfig {
        n_images: 12,
        entities_per_image: 4,
        entity_classes: 4,
        predicate_classes: 3,
        feature_dim: 16,
        seed: 6,
        ..SyntheticConfig::default()
    };
    let (data, vocab) = gen_synthetic(&syn).unwrap();
    let cfg = ModelConfig {
        entity_classes: 4,
        predicate_classes: 3,
        feature_dim: 16,
        visual_proj_dim: 6,
        embed_dim: 4,
        semantic_dim: 3,
        attention_dim: 6,
        attention_heads: 2,
        mlp_hidden: 8,
        ..ModelConfig::default()
    };
    let params = crate::model::ModelParams::init(&cfg, 7);
    (data, params, vocab.predicates)
}

#[test]
fn predcls_dominates_sgcls_on_the_same_model() {
    let (data, params, names) = eval_setup();
    let sgcls = evaluate(&data, &params, Task::SGCls, &names).unwrap();
    let predcls = evaluate(&data, &params, Task::PredCls, &names).unwrap();
    assert!(predcls.constrained_recall_50 >= sgcls.constrained_recall_50);
    assert!(predcls.unconstrained_recall_50 >= sgcls.unconstrained_recall_50);
}

#[test]
fn evaluate_is_deterministic_and_reports_images() {
    let (data, params, names) = eval_setup();
    let a = evaluate(&data, &params, Task::SGCls, &names).unwrap();
    let b = evaluate(&data, &params, Task::SGCls, &names).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.image_count + a.skipped_images, data.len());
    for r in [
        a.constrained_recall_50,
        a.constrained_recall_100,
        a.unconstrained_recall_50,
        a.unconstrained_recall_100,
    ] {
        assert!((0.0..=1.0).contains(&r));
    }
    assert!(a.unconstrained_recall_50 >= a.constrained_recall_50);
    assert!(a.constrained_recall_100 >= a.constrained_recall_50);
}

#[test]
fn task_parses_from_cli_strings() {
    assert_eq!("sgcls".parse::<Task>().unwrap(), Task::SGCls);
    assert_eq!("PredCls".parse::<Task>().unwrap(), Task::PredCls);
    assert!("detect".parse::<Task>().is_err());
}
