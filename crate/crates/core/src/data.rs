//! Dataset model: boxes, vocabularies, scene instances and the line-delimited
//! JSON interchange format.
//!
//! One line per image: `{"id", "entities":[{"box":[x1,y1,x2,y2], "feat":[...],
//! "scores":[...], "gt_label":int}], "relations":[[subj,obj,pred],...]}`.
//! Boxes are normalized to [0,1] in corner convention; the image diagonal is
//! therefore the constant sqrt(2).

use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

/// Predicate index reserved for "no relationship".
pub const BG: usize = 0;

/// Width of a spatial feature vector.
pub const SPATIAL_DIM: usize = 8;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("invalid instance {id}: {reason}")]
    Validation { id: String, reason: String },
    #[error("invalid vocab: {0}")]
    InvalidVocab(String),
    #[error("invalid generator config: {0}")]
    InvalidConfig(String),
}

/// Axis-aligned box with normalized corner coordinates, x1 < x2 and y1 < y2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2D {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl Box2D {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Box2D {
        Box2D { x1, y1, x2, y2 }
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Non-strict containment on all four coordinates.
    pub fn contains(&self, other: &Box2D) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    pub fn validate(&self) -> Result<(), String> {
        let in_range = |v: f64| (0.0..=1.0).contains(&v);
        if ![self.x1, self.y1, self.x2, self.y2].iter().all(|&v| in_range(v)) {
            return Err(format!("box coordinates outside [0,1]: {self:?}"));
        }
        if !(self.x1 < self.x2 && self.y1 < self.y2) {
            return Err(format!("degenerate box: {self:?}"));
        }
        Ok(())
    }
}

/// Entity and predicate name tables. Predicate index 0 is always `bg`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Vocab {
    pub entities: Vec<String>,
    pub predicates: Vec<String>,
}

impl Vocab {
    pub fn new(entities: Vec<String>, predicates: Vec<String>) -> Result<Vocab, DataError> {
        let v = Vocab {
            entities,
            predicates,
        };
        v.validate()?;
        Ok(v)
    }

    /// Canonical vocabulary used by the synthetic generator: entity names
    /// `class_0..` and spatial predicate names after `bg`.
    pub fn synthetic(entity_classes: usize, predicate_classes: usize) -> Result<Vocab, DataError> {
        if predicate_classes < 2 || predicate_classes > 1 + SPATIAL_RULE_NAMES.len() {
            return Err(DataError::InvalidConfig(format!(
                "predicate_classes must lie in 2..={}, got {predicate_classes}",
                1 + SPATIAL_RULE_NAMES.len()
            )));
        }
        if entity_classes == 0 {
            return Err(DataError::InvalidConfig(
                "entity_classes must be positive".into(),
            ));
        }
        let entities = (0..entity_classes).map(|c| format!("class_{c}")).collect();
        let mut predicates = vec!["bg".to_string()];
        predicates.extend(
            SPATIAL_RULE_NAMES[..predicate_classes - 1]
                .iter()
                .map(|s| s.to_string()),
        );
        Vocab::new(entities, predicates)
    }

    pub fn validate(&self) -> Result<(), DataError> {
        if self.predicates.first().map(String::as_str) != Some("bg") {
            return Err(DataError::InvalidVocab(
                "predicate index 0 must be \"bg\"".into(),
            ));
        }
        for names in [&self.entities, &self.predicates] {
            let mut seen = std::collections::HashSet::new();
            for n in names {
                if !seen.insert(n) {
                    return Err(DataError::InvalidVocab(format!("duplicate name {n:?}")));
                }
            }
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab, DataError> {
        let text = std::fs::read_to_string(path)?;
        let v: Vocab = serde_json::from_str(&text).map_err(|e| DataError::Parse {
            line: e.line(),
            msg: e.to_string(),
        })?;
        v.validate()?;
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<(), DataError> {
        let mut f = std::fs::File::create(path)?;
        serde_json::to_writer_pretty(&mut f, self).map_err(|e| DataError::Parse {
            line: 0,
            msg: e.to_string(),
        })?;
        f.write_all(b"\n")?;
        Ok(())
    }
}

/// Ordered names of the generator's spatial predicate rules, evaluated in
/// this priority order.
pub const SPATIAL_RULE_NAMES: [&str; 8] = [
    "inside", "covers", "above", "below", "near", "left_of", "right_of", "overlapping",
];

/// One detected entity: box, appearance feature, initial class scores and
/// ground-truth label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Entity {
    #[serde(rename = "box", with = "box_as_array")]
    pub bbox: Box2D,
    pub feat: Vec<f64>,
    pub scores: Vec<f64>,
    pub gt_label: usize,
}

mod box_as_array {
    use super::Box2D;
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(b: &Box2D, s: S) -> Result<S::Ok, S::Error> {
        [b.x1, b.y1, b.x2, b.y2].serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Box2D, D::Error> {
        let [x1, y1, x2, y2] = <[f64; 4]>::deserialize(d)?;
        Ok(Box2D { x1, y1, x2, y2 })
    }
}

/// Ground-truth relation as (subject index, object index, predicate index);
/// serialized as a plain 3-element array.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Relation(pub usize, pub usize, pub usize);

impl Relation {
    pub fn subject(&self) -> usize {
        self.0
    }

    pub fn object(&self) -> usize {
        self.1
    }

    pub fn predicate(&self) -> usize {
        self.2
    }
}

/// One image's worth of detector output plus ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneInstance {
    pub id: String,
    pub entities: Vec<Entity>,
    pub relations: Vec<Relation>,
}

impl SceneInstance {
    pub fn n_entities(&self) -> usize {
        self.entities.len()
    }

    /// Relation partners of entity `i` in the subject role, in annotation order.
    pub fn subject_partners(&self, i: usize) -> impl Iterator<Item = &Relation> {
        self.relations.iter().filter(move |r| r.subject() == i)
    }

    /// Ordered entity pairs (i, j), i != j, row-major.
    pub fn ordered_pairs(&self) -> Vec<(usize, usize)> {
        let n = self.n_entities();
        let mut out = Vec::with_capacity(n.saturating_sub(1) * n);
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    out.push((i, j));
                }
            }
        }
        out
    }

    /// Checks every invariant against a vocabulary, deduplicating exact
    /// repeated relation triplets first.
    pub fn validate(&mut self, vocab: &Vocab) -> Result<(), DataError> {
        let fail = |reason: String| {
            Err(DataError::Validation {
                id: self.id.clone(),
                reason,
            })
        };
        let n = self.entities.len();
        let feat_dim = self.entities.first().map(|e| e.feat.len()).unwrap_or(0);
        for (idx, e) in self.entities.iter().enumerate() {
            if let Err(msg) = e.bbox.validate() {
                return fail(format!("entity {idx}: {msg}"));
            }
            if e.feat.len() != feat_dim {
                return fail(format!(
                    "entity {idx}: feature dim {} != {}",
                    e.feat.len(),
                    feat_dim
                ));
            }
            if e.scores.len() != vocab.entities.len() {
                return fail(format!(
                    "entity {idx}: {} scores for {} classes",
                    e.scores.len(),
                    vocab.entities.len()
                ));
            }
            let sum: f64 = e.scores.iter().sum();
            if (sum - 1.0).abs() > 1e-6 || e.scores.iter().any(|&s| s < 0.0) {
                return fail(format!("entity {idx}: scores are not a distribution (sum {sum})"));
            }
            if e.gt_label >= vocab.entities.len() {
                return fail(format!("entity {idx}: gt_label {} out of range", e.gt_label));
            }
            if e.feat.iter().any(|v| !v.is_finite()) {
                return fail(format!("entity {idx}: non-finite feature"));
            }
        }

        // Exact duplicate triplets are dropped; conflicting pairs are errors.
        let mut seen = std::collections::HashSet::new();
        self.relations.retain(|r| seen.insert(*r));
        let mut pairs = std::collections::HashSet::new();
        for r in &self.relations {
            if r.subject() >= n || r.object() >= n {
                return fail(format!("relation {r:?}: entity index out of range"));
            }
            if r.subject() == r.object() {
                return fail(format!("relation {r:?}: self-pair"));
            }
            if r.predicate() == BG || r.predicate() >= vocab.predicates.len() {
                return fail(format!(
                    "relation {r:?}: predicate must be a non-bg index below {}",
                    vocab.predicates.len()
                ));
            }
            if !pairs.insert((r.subject(), r.object())) {
                return fail(format!(
                    "relation {r:?}: duplicate pair ({}, {})",
                    r.subject(),
                    r.object()
                ));
            }
        }
        Ok(())
    }
}

/// Loads and validates a line-delimited dataset. Malformed lines are
/// rejected with the 1-based line number.
pub fn load_dataset(path: &Path, vocab: &Vocab) -> Result<Vec<SceneInstance>, DataError> {
    let file = std::fs::File::open(path)?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let mut instance: SceneInstance =
            serde_json::from_str(&line).map_err(|e| DataError::Parse {
                line: lineno + 1,
                msg: e.to_string(),
            })?;
        instance.validate(vocab)?;
        out.push(instance);
    }
    Ok(out)
}

/// Writes a dataset in the line-delimited format. `load(save(x))` is
/// bit-exact for valid data.
pub fn save_dataset(path: &Path, instances: &[SceneInstance]) -> Result<(), DataError> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for inst in instances {
        let line = serde_json::to_string(inst).map_err(|e| DataError::Parse {
            line: 0,
            msg: e.to_string(),
        })?;
        f.write_all(line.as_bytes())?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Smallest box containing `a` and `b`, expanded by `margin` times the union
/// width/height on each side and clipped to [0,1].
pub fn union_box(a: &Box2D, b: &Box2D, margin: f64) -> Box2D {
    assert!(margin >= 0.0, "margin must be non-negative");
    let x1 = a.x1.min(b.x1);
    let y1 = a.y1.min(b.y1);
    let x2 = a.x2.max(b.x2);
    let y2 = a.y2.max(b.y2);
    let mx = margin * (x2 - x1);
    let my = margin * (y2 - y1);
    Box2D {
        x1: (x1 - mx).max(0.0),
        y1: (y1 - my).max(0.0),
        x2: (x2 + mx).min(1.0),
        y2: (y2 + my).min(1.0),
    }
}

/// Coordinate features of a box: `[x1, y1, x2, y2, cx, cy, w, h]`.
pub fn spatial_feature(b: &Box2D) -> [f64; SPATIAL_DIM] {
    let (cx, cy) = b.center();
    [b.x1, b.y1, b.x2, b.y2, cx, cy, b.width(), b.height()]
}

/// Numerically stable softmax, for datasets that supply raw logits.
pub fn initial_scores(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.iter().map(|e| e / sum).collect()
}

/// Per-pair relation context derived from the instance: union box, an
/// uninformative initial predicate distribution, and an appearance feature
/// synthesized as the mean of the two entity features with the subject and
/// object spatial features added onto the leading components.
#[derive(Debug, Clone, PartialEq)]
pub struct RelationContext {
    pub union: Box2D,
    pub scores: Vec<f64>,
    pub feature: Vec<f64>,
}

pub fn relation_context(
    instance: &SceneInstance,
    subject: usize,
    object: usize,
    union_margin: f64,
    n_predicates: usize,
) -> RelationContext {
    let s = &instance.entities[subject];
    let o = &instance.entities[object];
    let union = union_box(&s.bbox, &o.bbox, union_margin);
    let scores = initial_scores(&vec![0.0; n_predicates]);
    let mut feature: Vec<f64> = s
        .feat
        .iter()
        .zip(&o.feat)
        .map(|(a, b)| (a + b) / 2.0)
        .collect();
    let sp_s = spatial_feature(&s.bbox);
    let sp_o = spatial_feature(&o.bbox);
    for k in 0..SPATIAL_DIM {
        if k < feature.len() {
            feature[k] += sp_s[k];
        }
        if SPATIAL_DIM + k < feature.len() {
            feature[SPATIAL_DIM + k] += sp_o[k];
        }
    }
    RelationContext {
        union,
        scores,
        feature,
    }
}
