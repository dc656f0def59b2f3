//! Synthetic dataset generator: a desk-scale substrate where entity classes
//! are separable from appearance and predicates follow deterministic spatial
//! rules, so both classification tasks are learnable by construction.

use crate::attention::iou;
use crate::config::SyntheticConfig;
use crate::data::{Box2D, DataError, Entity, Relation, SceneInstance, Vocab, BG};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// Vertical/horizontal center offset required by the above/below and
/// left_of/right_of rules.
const DIRECTION_MARGIN: f64 = 0.2;
/// Center distance below which two boxes are "near".
const NEAR_DISTANCE: f64 = 0.3;
/// IoU above which two boxes are "overlapping".
const OVERLAP_IOU: f64 = 0.3;
/// When the feature width allows it, the leading 2*SPATIAL_DIM components
/// carry no class prototype mass and only this fraction of the appearance
/// noise, so the relation-context features (which add box coordinates onto
/// those components) expose the pair geometry cleanly.
const GEOMETRY_NOISE_FACTOR: f64 = 0.1;
/// Probability of drawing a large box, which makes the containment rules
/// fire at a useful rate.
const LARGE_BOX_PROB: f64 = 0.25;

/// Evaluates the spatial predicate rules in priority order and returns the
/// predicate index for an ordered (subject, object) box pair, or [`BG`].
/// Only the first `n_predicates - 1` rules of
/// [`SPATIAL_RULE_NAMES`](crate::data::SPATIAL_RULE_NAMES) are active.
pub fn spatial_predicate(subject: &Box2D, object: &Box2D, n_predicates: usize) -> usize {
    let (scx, scy) = subject.center();
    let (ocx, ocy) = object.center();
    let dist = ((scx - ocx).powi(2) + (scy - ocy).powi(2)).sqrt();
    let fired: [bool; 8] = [
        object.contains(subject),                 // inside
        subject.contains(object),                 // covers
        scy < ocy - DIRECTION_MARGIN,             // above
        scy > ocy + DIRECTION_MARGIN,             // below
        dist < NEAR_DISTANCE,                     // near
        scx < ocx - DIRECTION_MARGIN,             // left_of
        scx > ocx + DIRECTION_MARGIN,             // right_of
        iou(subject, object) > OVERLAP_IOU,       // overlapping
    ];
    for (rule, &hit) in fired.iter().enumerate().take(n_predicates - 1) {
        if hit {
            return rule + 1;
        }
    }
    BG
}

/// Generates a dataset deterministically from the seed, together with its
/// canonical vocabulary.
///
/// Construction: each entity class has a Gaussian feature prototype;
/// appearance = prototype + noise; initial score vectors are a softened
/// one-hot of a noisy classifier (correct with probability
/// `score_correct_prob`); predicates follow [`spatial_predicate`].
pub fn gen_synthetic(cfg: &SyntheticConfig) -> Result<(Vec<SceneInstance>, Vocab), DataError> {
    for (name, v) in [
        ("n_images", cfg.n_images),
        ("entities_per_image", cfg.entities_per_image),
        ("entity_classes", cfg.entity_classes),
        ("feature_dim", cfg.feature_dim),
    ] {
        if v == 0 {
            return Err(DataError::InvalidConfig(format!("{name} must be positive")));
        }
    }
    if !(0.0..=1.0).contains(&cfg.score_correct_prob) {
        return Err(DataError::InvalidConfig(
            "score_correct_prob must lie in [0,1]".into(),
        ));
    }
    if cfg.noise_sigma < 0.0 {
        return Err(DataError::InvalidConfig("noise_sigma must be >= 0".into()));
    }
    let vocab = Vocab::synthetic(cfg.entity_classes, cfg.predicate_classes)?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).unwrap();

    // Features wider than the two spatial blocks reserve those leading
    // components for geometry: prototypes are zero there and appearance
    // noise is damped.
    let geometry_dims = if cfg.feature_dim > 2 * crate::data::SPATIAL_DIM {
        2 * crate::data::SPATIAL_DIM
    } else {
        0
    };
    let prototypes: Vec<Vec<f64>> = (0..cfg.entity_classes)
        .map(|_| {
            (0..cfg.feature_dim)
                .map(|k| {
                    if k < geometry_dims {
                        0.0
                    } else {
                        std_normal.sample(&mut rng)
                    }
                })
                .collect()
        })
        .collect();

    let mut instances = Vec::with_capacity(cfg.n_images);
    for img in 0..cfg.n_images {
        let mut entities = Vec::with_capacity(cfg.entities_per_image);
        for _ in 0..cfg.entities_per_image {
            let class = rng.gen_range(0..cfg.entity_classes);

            let cx: f64 = rng.gen_range(0.15..0.85);
            let cy: f64 = rng.gen_range(0.15..0.85);
            let large = rng.gen_bool(LARGE_BOX_PROB);
            let (hw, hh) = if large {
                (rng.gen_range(0.15..0.35), rng.gen_range(0.15..0.35))
            } else {
                (rng.gen_range(0.03..0.10), rng.gen_range(0.03..0.10))
            };
            let bbox = Box2D::new(
                (cx - hw).max(0.0),
                (cy - hh).max(0.0),
                (cx + hw).min(1.0),
                (cy + hh).min(1.0),
            );

            let feat: Vec<f64> = prototypes[class]
                .iter()
                .enumerate()
                .map(|(k, p)| {
                    let sigma = if k < geometry_dims {
                        GEOMETRY_NOISE_FACTOR * cfg.noise_sigma
                    } else {
                        cfg.noise_sigma
                    };
                    p + sigma * std_normal.sample(&mut rng)
                })
                .collect();

            let predicted = if rng.gen_bool(cfg.score_correct_prob) || cfg.entity_classes == 1 {
                class
            } else {
                let mut other = rng.gen_range(0..cfg.entity_classes - 1);
                if other >= class {
                    other += 1;
                }
                other
            };
            let alpha = cfg.score_softness;
            let base = alpha / cfg.entity_classes as f64;
            let mut scores = vec![base; cfg.entity_classes];
            scores[predicted] += 1.0 - alpha;

            entities.push(Entity {
                bbox,
                feat,
                scores,
                gt_label: class,
            });
        }

        let mut relations = Vec::new();
        for i in 0..entities.len() {
            for j in 0..entities.len() {
                if i == j {
                    continue;
                }
                let pred =
                    spatial_predicate(&entities[i].bbox, &entities[j].bbox, cfg.predicate_classes);
                if pred != BG {
                    relations.push(Relation(i, j, pred));
                }
            }
        }

        instances.push(SceneInstance {
            id: format!("img_{img:05}"),
            entities,
            relations,
        });
    }
    Ok((instances, vocab))
}

/// Convenience wrapper used by tests: panics on invalid configs.
pub fn gen_synthetic_unchecked(cfg: &SyntheticConfig) -> (Vec<SceneInstance>, Vocab) {
    gen_synthetic(cfg).expect("valid synthetic config")
}
