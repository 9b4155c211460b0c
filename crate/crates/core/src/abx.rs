//! Homophone ABX probe. A, B and X share a pronunciation; only A and X share
//! a meaning. A triplet counts as correct when `cos(A, X) > cos(A, B)`.
//! Ties count as incorrect, so fully degenerate embeddings score 0, not 0.5.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::{csv_writer, AnnotationTable};
use crate::error::{Error, Result};
use crate::seeding;

pub const TRIPLET_COLUMNS: [&str; 6] = ["a_id", "b_id", "x_id", "phonetic_key", "a_meaning_key", "b_meaning_key"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbxTriplet {
    pub a_id: String,
    pub b_id: String,
    pub x_id: String,
    pub phonetic_key: String,
    pub a_meaning_key: String,
    pub b_meaning_key: String,
}

impl AbxTriplet {
    pub fn check(&self) -> std::result::Result<(), String> {
        if self.a_meaning_key == self.b_meaning_key {
            return Err(format!("A and B share meaning key {:?}", self.a_meaning_key));
        }
        if self.a_id == self.b_id || self.a_id == self.x_id || self.b_id == self.x_id {
            return Err("A, B and X must be distinct units".into());
        }
        Ok(())
    }
}

/// Reads a triplet list; the error names the offending line.
pub fn read_triplets(path: impl AsRef<Path>) -> Result<Vec<AbxTriplet>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let row_err = |line: u64, reason: String| Error::Row { path: path.to_path_buf(), line, reason };
    let headers = rdr.headers().map_err(|e| row_err(1, e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != TRIPLET_COLUMNS {
        return Err(row_err(1, format!("expected header {}", TRIPLET_COLUMNS.join(","))));
    }
    let mut out = Vec::new();
    for rec in rdr.deserialize::<AbxTriplet>() {
        let t = rec.map_err(|e| row_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = out.len() as u64 + 2;
        t.check().map_err(|reason| row_err(line, format!("triplet {}: {reason}", out.len())))?;
        out.push(t);
    }
    Ok(out)
}

pub fn write_triplets(triplets: &[AbxTriplet], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv_writer(path)?;
    for t in triplets {
        w.serialize(t).map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Checks triplets against unit annotations: X carries A's meaning and all
/// three units carry the shared phonetic key.
pub fn check_against_annotations(
    triplets: &[AbxTriplet],
    table: &AnnotationTable,
    meaning_key: &str,
    phonetic_key: &str,
) -> Result<()> {
    let units = table.by_id();
    for (n, t) in triplets.iter().enumerate() {
        let get = |id: &str, key: &str| -> Result<String> {
            let row = units
                .get(id)
                .ok_or_else(|| Error::Validation(format!("triplet {n}: unknown unit {id}")))?;
            row.get(key)
                .map(str::to_owned)
                .ok_or_else(|| Error::Validation(format!("triplet {n}: unit {id} lacks {key:?}")))
        };
        if get(&t.x_id, meaning_key)? != t.a_meaning_key || get(&t.a_id, meaning_key)? != t.a_meaning_key {
            return Err(Error::Validation(format!("triplet {n}: A and X do not share meaning {:?}", t.a_meaning_key)));
        }
        if get(&t.b_id, meaning_key)? != t.b_meaning_key {
            return Err(Error::Validation(format!("triplet {n}: B meaning differs from {:?}", t.b_meaning_key)));
        }
        for id in [&t.a_id, &t.b_id, &t.x_id] {
            if get(id, phonetic_key)? != t.phonetic_key {
                return Err(Error::Validation(format!(
                    "triplet {n}: unit {id} not pronounced {:?}",
                    t.phonetic_key
                )));
            }
        }
    }
    Ok(())
}

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("vectors of length {} and {}", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Validation("zero-norm embedding".into()));
    }
    Ok(dot / (na * nb))
}

/// 1 when X is strictly closer to A than B is, else 0.
pub fn triplet_outcome(t: &AbxTriplet, embeddings: &HashMap<String, Vec<f64>>) -> Result<u8> {
    let get = |id: &str| {
        embeddings
            .get(id)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Validation(format!("no embedding for unit {id}")))
    };
    let (a, b, x) = (get(&t.a_id)?, get(&t.b_id)?, get(&t.x_id)?);
    let named = |e: Error, id: &str| match e {
        Error::Validation(m) => Error::Validation(format!("{m} (unit {id})")),
        other => other,
    };
    let ax = cosine(a, x).map_err(|e| named(e, &t.x_id))?;
    let ab = cosine(a, b).map_err(|e| named(e, &t.b_id))?;
    Ok((ax > ab) as u8)
}

pub fn abx_score(triplets: &[AbxTriplet], embeddings: &HashMap<String, Vec<f64>>) -> Result<f64> {
    if triplets.is_empty() {
        return Err(Error::Undefined("ABX accuracy over zero triplets".into()));
    }
    let hits = triplets
        .iter()
        .map(|t| triplet_outcome(t, embeddings).map(u64::from))
        .sum::<Result<u64>>()?;
    Ok(hits as f64 / triplets.len() as f64)
}

/// ABX accuracy on `n_folds` seeded 80% triplet subsamples.
pub fn abx_accuracy(
    triplets: &[AbxTriplet],
    embeddings: &HashMap<String, Vec<f64>>,
    n_folds: usize,
    seed: u64,
) -> Result<Vec<(usize, f64)>> {
    for (n, t) in triplets.iter().enumerate() {
        t.check().map_err(|reason| Error::Validation(format!("triplet {n}: {reason}")))?;
    }
    let outcomes = triplets
        .par_iter()
        .map(|t| triplet_outcome(t, embeddings))
        .collect::<Result<Vec<u8>>>()?;
    (0..n_folds)
        .map(|fold| {
            let mut rng = seeding::rng(seeding::fold_seed(seed, fold));
            let subset = seeding::subsample(outcomes.len(), 0.8, &mut rng);
            if subset.is_empty() {
                return Err(Error::Undefined("empty ABX fold".into()));
            }
            let hits: u64 = subset.iter().map(|&i| outcomes[i] as u64).sum();
            Ok((fold, hits as f64 / subset.len() as f64))
        })
        .collect()
}
