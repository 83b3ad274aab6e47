//! Object-quality scoring and top-k selection of training scenes.

use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::cosine;
use crate::scenekit::{Manifest, ObjectRecord};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct QualityScore {
    pub single_object: f64,
    pub object_pair: f64,
    pub total: f64,
}

/// Mean text-image cosine over the objects.
pub fn single_object_score(objects: &[ObjectRecord]) -> Result<f64> {
    if objects.is_empty() {
        return Err(Error::argument(
            "single_object_score needs at least one object",
        ));
    }
    let s: f64 = objects
        .iter()
        .map(|o| cosine(&o.text_embedding, &o.image_embedding))
        .sum();
    Ok(s / objects.len() as f64)
}

/// Negated mean image-image cosine over ordered distinct pairs; 0 for a
/// single object.
pub fn object_pair_score(objects: &[ObjectRecord]) -> f64 {
    let n = objects.len();
    if n < 2 {
        return 0.0;
    }
    let mut s = 0.0;
    for i in 0..n {
        for j in 0..n {
            if i != j {
                s += cosine(&objects[i].image_embedding, &objects[j].image_embedding);
            }
        }
    }
    -s / (n * (n - 1)) as f64
}

pub fn quality_of(objects: &[ObjectRecord]) -> Result<QualityScore> {
    let single_object = single_object_score(objects)?;
    let object_pair = object_pair_score(objects);
    Ok(QualityScore {
        single_object,
        object_pair,
        total: single_object + object_pair,
    })
}

/// Score of record `index` using the manifest's cached embeddings.
pub fn object_quality_score(m: &Manifest, index: usize) -> Result<QualityScore> {
    let rec = m
        .records
        .get(index)
        .ok_or_else(|| Error::argument(format!("record index {index} out of range")))?;
    let objects = m.objects(rec)?;
    if objects.is_empty() {
        return Err(Error::Data {
            record: rec.id.to_string(),
            message: "no objects".into(),
        });
    }
    if objects
        .iter()
        .any(|o| o.text_embedding.is_empty() || o.image_embedding.is_empty())
    {
        return Err(Error::Data {
            record: rec.id.to_string(),
            message: "missing embeddings".into(),
        });
    }
    quality_of(&objects)
}

/// Fills the `scores` field of every record.
pub fn score_manifest(m: &Manifest) -> Result<Manifest> {
    let scores: Vec<QualityScore> = (0..m.len())
        .into_par_iter()
        .map(|i| object_quality_score(m, i))
        .collect::<Result<_>>()?;
    let mut out = m.clone();
    for (r, s) in out.records.iter_mut().zip(scores) {
        r.scores = Some(s);
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScoreField {
    Total,
    ObjectPair,
    SingleObject,
}

impl ScoreField {
    pub fn get(self, s: &QualityScore) -> f64 {
        match self {
            ScoreField::Total => s.total,
            ScoreField::ObjectPair => s.object_pair,
            ScoreField::SingleObject => s.single_object,
        }
    }
}

impl FromStr for ScoreField {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "total" => Ok(ScoreField::Total),
            "pair" | "object_pair" => Ok(ScoreField::ObjectPair),
            "single" | "single_object" => Ok(ScoreField::SingleObject),
            _ => Err(Error::argument(format!(
                "unknown score field {s:?} (total|pair|single)"
            ))),
        }
    }
}

/// Indices of the `k` best-scoring records: descending by score, ties by
/// ascending index.
pub fn top_k_indices(scores: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > scores.len() {
        return Err(Error::argument(format!(
            "k = {k} exceeds {} records",
            scores.len()
        )));
    }
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score of record {i}")));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

/// Records must carry scores (see [`score_manifest`]).
pub fn select_top_k(m: &Manifest, k: usize, field: ScoreField) -> Result<Vec<usize>> {
    let scores = m
        .records
        .iter()
        .map(|r| {
            r.scores
                .as_ref()
                .map(|s| field.get(s))
                .ok_or_else(|| Error::Data {
                    record: r.id.to_string(),
                    message: "record has no scores; run scoring first".into(),
                })
        })
        .collect::<Result<Vec<f64>>>()?;
    top_k_indices(&scores, k)
}
