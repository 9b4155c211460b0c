//! On-disk formats: frame embeddings, annotation tables, parses, run
//! manifests and score tables.
//!
//! Embedding files are a small binary container:
//!
//! ```text
//! magic      8 bytes   b"PKEMBv1\n"
//! hdr_len    u32 LE    length of the JSON header in bytes
//! header     hdr_len   UTF-8 JSON {utterance_id, layer_id, n_frames, dim, frame_period_s?}
//! payload    n_frames * dim * 4 bytes, f32 LE, row-major
//! ```
//!
//! Reference feature tables (acoustic or semantic vectors, one row per unit)
//! reuse the same container plus a sidecar `<path>.ids` listing one unit id
//! per line in row order.

use std::collections::{BTreeMap, HashSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const EMBEDDING_MAGIC: &[u8; 8] = b"PKEMBv1\n";

/// Frame period assumed when a header omits it (20 ms framing).
pub const DEFAULT_FRAME_PERIOD_S: f64 = 0.02;

/// Column names every annotation table must carry.
pub const ANNOTATION_COLUMNS: [&str; 5] = ["unit_id", "utterance_id", "start_s", "end_s", "label"];

pub const SCORE_COLUMNS: [&str; 6] = ["probe_id", "model_id", "step", "layer_id", "fold", "score"];

/// Frame-level hidden states of one utterance at one layer.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEmbeddings {
    pub utterance_id: String,
    pub layer_id: String,
    pub frame_period_s: f64,
    n_frames: usize,
    dim: usize,
    data: Vec<f32>,
}

impl FrameEmbeddings {
    pub fn new(
        utterance_id: impl Into<String>,
        layer_id: impl Into<String>,
        frame_period_s: f64,
        n_frames: usize,
        dim: usize,
        data: Vec<f32>,
    ) -> Result<Self> {
        if n_frames == 0 || dim == 0 {
            return Err(Error::Validation(format!(
                "embedding must have n_frames >= 1 and dim >= 1 (got {n_frames} x {dim})"
            )));
        }
        if !(frame_period_s > 0.0 && frame_period_s.is_finite()) {
            return Err(Error::Validation(format!(
                "frame_period_s must be positive, got {frame_period_s}"
            )));
        }
        if data.len() != n_frames * dim {
            return Err(Error::Shape(format!(
                "data length {} != {n_frames} x {dim}",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::Validation(format!(
                "non-finite embedding value at element {index}"
            )));
        }
        Ok(Self {
            utterance_id: utterance_id.into(),
            layer_id: layer_id.into(),
            frame_period_s,
            n_frames,
            dim,
            data,
        })
    }

    /// Builds from nested rows, mostly for tests and synthetic data.
    pub fn from_rows(
        utterance_id: impl Into<String>,
        layer_id: impl Into<String>,
        frame_period_s: f64,
        rows: &[Vec<f32>],
    ) -> Result<Self> {
        let dim = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != dim) {
            return Err(Error::Shape("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::new(utterance_id, layer_id, frame_period_s, rows.len(), dim, data)
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn duration_s(&self) -> f64 {
        self.n_frames as f64 * self.frame_period_s
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct EmbeddingHeader {
    utterance_id: String,
    layer_id: String,
    n_frames: usize,
    dim: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    frame_period_s: Option<f64>,
}

pub fn write_embedding_file(emb: &FrameEmbeddings, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let header = serde_json::to_vec(&EmbeddingHeader {
        utterance_id: emb.utterance_id.clone(),
        layer_id: emb.layer_id.clone(),
        n_frames: emb.n_frames,
        dim: emb.dim,
        frame_period_s: Some(emb.frame_period_s),
    })
    .expect("header serializes");
    let mut buf = Vec::with_capacity(12 + header.len() + emb.data.len() * 4);
    buf.extend_from_slice(EMBEDDING_MAGIC);
    buf.extend_from_slice(&(header.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header);
    for v in &emb.data {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_embedding_file(path: impl AsRef<Path>) -> Result<FrameEmbeddings> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embedding(&bytes, path)
}

fn decode_embedding(bytes: &[u8], path: &Path) -> Result<FrameEmbeddings> {
    let corrupt = |reason: &str| Error::Corrupt {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 12 || &bytes[..8] != EMBEDDING_MAGIC {
        return Err(corrupt("missing embedding magic"));
    }
    let hdr_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let hdr_end = 12usize
        .checked_add(hdr_len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| corrupt("header length exceeds file size"))?;
    let header: EmbeddingHeader = serde_json::from_slice(&bytes[12..hdr_end])
        .map_err(|e| corrupt(&format!("bad header: {e}")))?;
    if header.n_frames == 0 || header.dim == 0 {
        return Err(corrupt("n_frames and dim must be >= 1"));
    }
    let frame_period_s = header.frame_period_s.unwrap_or(DEFAULT_FRAME_PERIOD_S);
    if !(frame_period_s > 0.0 && frame_period_s.is_finite()) {
        return Err(corrupt("frame_period_s must be positive"));
    }
    let payload = &bytes[hdr_end..];
    let expected = header
        .n_frames
        .checked_mul(header.dim)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| corrupt("declared size overflows"))?;
    if payload.len() != expected {
        return Err(Error::PayloadSize {
            path: path.to_path_buf(),
            expected,
            actual: payload.len(),
        });
    }
    let data: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    if let Some(index) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            path: path.to_path_buf(),
            index,
        });
    }
    Ok(FrameEmbeddings {
        utterance_id: header.utterance_id,
        layer_id: header.layer_id,
        frame_period_s,
        n_frames: header.n_frames,
        dim: header.dim,
        data,
    })
}

/// Path of the embedding file for `utterance_id` inside a layer directory.
pub fn embedding_path(dir: impl AsRef<Path>, utterance_id: &str) -> PathBuf {
    dir.as_ref().join(format!("{utterance_id}.emb"))
}

/// A feature table keyed by unit id: one row per unit.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTable {
    pub ids: Vec<String>,
    pub vectors: FrameEmbeddings,
}

impl ReferenceTable {
    pub fn row_of(&self) -> BTreeMap<&str, usize> {
        self.ids
            .iter()
            .enumerate()
            .map(|(i, id)| (id.as_str(), i))
            .collect()
    }
}

pub fn sidecar_path(path: impl AsRef<Path>) -> PathBuf {
    let mut s = path.as_ref().as_os_str().to_owned();
    s.push(".ids");
    PathBuf::from(s)
}

pub fn write_reference_table(table: &ReferenceTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if table.ids.len() != table.vectors.n_frames() {
        return Err(Error::Shape(format!(
            "{} ids for {} rows",
            table.ids.len(),
            table.vectors.n_frames()
        )));
    }
    write_embedding_file(&table.vectors, path)?;
    let side = sidecar_path(path);
    let mut text = table.ids.join("\n");
    text.push('\n');
    fs::write(&side, text).map_err(|e| Error::io(side, e))
}

pub fn read_reference_table(path: impl AsRef<Path>) -> Result<ReferenceTable> {
    let path = path.as_ref();
    let vectors = read_embedding_file(path)?;
    let side = sidecar_path(path);
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let ids: Vec<String> = text.lines().filter(|l| !l.is_empty()).map(str::to_owned).collect();
    if ids.len() != vectors.n_frames() {
        return Err(Error::Corrupt {
            path: side,
            reason: format!("{} ids for {} rows", ids.len(), vectors.n_frames()),
        });
    }
    let mut seen = HashSet::new();
    if let Some(dup) = ids.iter().find(|id| !seen.insert(id.as_str())) {
        return Err(Error::Corrupt {
            path: side,
            reason: format!("duplicate unit id {dup}"),
        });
    }
    Ok(ReferenceTable { ids, vectors })
}

/// One time-aligned linguistic unit.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotationRow {
    pub unit_id: String,
    pub utterance_id: String,
    pub start_s: f64,
    pub end_s: f64,
    pub label: String,
    pub aux_labels: BTreeMap<String, String>,
}

impl AnnotationRow {
    /// `"label"` selects the primary label; anything else looks in the aux columns.
    pub fn get(&self, key: &str) -> Option<&str> {
        if key == "label" {
            Some(&self.label)
        } else {
            self.aux_labels.get(key).map(String::as_str)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AnnotationTable {
    pub rows: Vec<AnnotationRow>,
}

impl AnnotationTable {
    pub fn from_rows(rows: Vec<AnnotationRow>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, r) in rows.iter().enumerate() {
            check_span(r).map_err(|reason| Error::Validation(format!("row {i}: {reason}")))?;
            if !seen.insert(r.unit_id.as_str()) {
                return Err(Error::Validation(format!("duplicate unit_id {}", r.unit_id)));
            }
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// Aux column names, sorted.
    pub fn aux_columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = self
            .rows
            .iter()
            .flat_map(|r| r.aux_labels.keys().cloned())
            .collect();
        cols.sort();
        cols.dedup();
        cols
    }

    pub fn utterance_ids(&self) -> Vec<&str> {
        let mut ids: Vec<&str> = self.rows.iter().map(|r| r.utterance_id.as_str()).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }

    pub fn by_id(&self) -> BTreeMap<&str, &AnnotationRow> {
        self.rows.iter().map(|r| (r.unit_id.as_str(), r)).collect()
    }
}

fn check_span(r: &AnnotationRow) -> std::result::Result<(), String> {
    if !(r.start_s.is_finite() && r.end_s.is_finite()) {
        return Err("non-finite time".into());
    }
    if r.start_s < 0.0 {
        return Err(format!("negative start_s {}", r.start_s));
    }
    if r.start_s >= r.end_s {
        return Err(format!(
            "start_s {} must be < end_s {}",
            r.start_s, r.end_s
        ));
    }
    Ok(())
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<AnnotationTable> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let row_err = |line: u64, reason: String| Error::Row {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let headers = rdr
        .headers()
        .map_err(|e| row_err(1, e.to_string()))?
        .clone();
    let mut col = [0usize; 5];
    for (slot, name) in col.iter_mut().zip(ANNOTATION_COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| row_err(1, format!("missing required column {name}")))?;
    }
    let aux: Vec<(usize, String)> = headers
        .iter()
        .enumerate()
        .filter(|(_, h)| !ANNOTATION_COLUMNS.contains(h))
        .map(|(i, h)| (i, h.to_string()))
        .collect();

    let mut rows = Vec::new();
    let mut seen = HashSet::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            row_err(line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        let field = |i: usize| rec.get(i).unwrap_or("").trim();
        let parse_time = |i: usize, name: &str| {
            field(i)
                .parse::<f64>()
                .map_err(|_| row_err(line, format!("{name} is not a number: {:?}", field(i))))
        };
        let row = AnnotationRow {
            unit_id: field(col[0]).to_string(),
            utterance_id: field(col[1]).to_string(),
            start_s: parse_time(col[2], "start_s")?,
            end_s: parse_time(col[3], "end_s")?,
            label: field(col[4]).to_string(),
            aux_labels: aux
                .iter()
                .filter(|(i, _)| !field(*i).is_empty())
                .map(|(i, name)| (name.clone(), field(*i).to_string()))
                .collect(),
        };
        if row.unit_id.is_empty() || row.utterance_id.is_empty() {
            return Err(row_err(line, "empty unit_id or utterance_id".into()));
        }
        check_span(&row).map_err(|reason| row_err(line, reason))?;
        if !seen.insert(row.unit_id.clone()) {
            return Err(row_err(line, format!("duplicate unit_id {}", row.unit_id)));
        }
        rows.push(row);
    }
    Ok(AnnotationTable { rows })
}

pub fn write_annotations(table: &AnnotationTable, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let aux = table.aux_columns();
    let mut w = csv_writer(path)?;
    let mut header: Vec<&str> = ANNOTATION_COLUMNS.to_vec();
    header.extend(aux.iter().map(String::as_str));
    let map = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(&header).map_err(map)?;
    for r in &table.rows {
        let mut rec = vec![
            r.unit_id.clone(),
            r.utterance_id.clone(),
            r.start_s.to_string(),
            r.end_s.to_string(),
            r.label.clone(),
        ];
        rec.extend(
            aux.iter()
                .map(|k| r.aux_labels.get(k).cloned().unwrap_or_default()),
        );
        w.write_record(&rec).map_err(map)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Gold dependency parse of one sentence, as undirected word-index edges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SentenceParse {
    pub sentence_id: String,
    pub words: Vec<String>,
    pub edges: Vec<(usize, usize)>,
}

/// Checks that `edges` form a spanning tree over `n` nodes.
pub fn validate_tree(n: usize, edges: &[(usize, usize)]) -> std::result::Result<(), String> {
    if n == 0 {
        return Err("tree needs at least one node".into());
    }
    if edges.len() != n - 1 {
        return Err(format!("{} edges for {n} nodes (need {})", edges.len(), n - 1));
    }
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(i, j) in edges {
        if i >= n || j >= n {
            return Err(format!("edge ({i}, {j}) out of range for {n} nodes"));
        }
        if i == j {
            return Err(format!("self loop at {i}"));
        }
        let (ri, rj) = (find(&mut parent, i), find(&mut parent, j));
        if ri == rj {
            return Err(format!("edge ({i}, {j}) closes a cycle"));
        }
        parent[ri] = rj;
    }
    Ok(())
}

/// Reads a JSON-lines parse file: one sentence document per line.
pub fn read_parses(path: impl AsRef<Path>) -> Result<Vec<SentenceParse>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let lineno = i as u64 + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row_err = |reason: String| Error::Row {
            path: path.to_path_buf(),
            line: lineno,
            reason,
        };
        let parse: SentenceParse =
            serde_json::from_str(&line).map_err(|e| row_err(e.to_string()))?;
        validate_tree(parse.words.len(), &parse.edges).map_err(row_err)?;
        if !ids.insert(parse.sentence_id.clone()) {
            return Err(row_err(format!("duplicate sentence_id {}", parse.sentence_id)));
        }
        out.push(parse);
    }
    Ok(out)
}

pub fn write_parses(parses: &[SentenceParse], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for p in parses {
        let line = serde_json::to_string(p).expect("parse serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub layer_id: String,
    pub embedding_dir: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointEntry {
    pub step: u64,
    pub layers: Vec<LayerEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelEntry {
    pub model_id: String,
    pub checkpoints: Vec<CheckpointEntry>,
}

/// Models, their checkpoints and per-layer embedding directories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub models: Vec<ModelEntry>,
}

impl RunManifest {
    pub fn validate(&self) -> Result<()> {
        let mut model_ids = HashSet::new();
        for m in &self.models {
            if !model_ids.insert(&m.model_id) {
                return Err(Error::Validation(format!("duplicate model_id {}", m.model_id)));
            }
            for w in m.checkpoints.windows(2) {
                if w[1].step <= w[0].step {
                    return Err(Error::Validation(format!(
                        "model {}: steps must be strictly increasing ({} then {})",
                        m.model_id, w[0].step, w[1].step
                    )));
                }
            }
            for c in &m.checkpoints {
                let mut layers = HashSet::new();
                for l in &c.layers {
                    if !layers.insert(&l.layer_id) {
                        return Err(Error::Validation(format!(
                            "model {} step {}: duplicate layer_id {}",
                            m.model_id, c.step, l.layer_id
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Resolves relative embedding directories against `base`.
    pub fn resolve_paths(&mut self, base: &Path) {
        for m in &mut self.models {
            for c in &mut m.checkpoints {
                for l in &mut c.layers {
                    if l.embedding_dir.is_relative() {
                        l.embedding_dir = base.join(&l.embedding_dir);
                    }
                }
            }
        }
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<RunManifest> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut manifest: RunManifest = serde_json::from_str(&text).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    manifest.validate()?;
    if let Some(base) = path.parent() {
        manifest.resolve_paths(base);
    }
    Ok(manifest)
}

pub fn write_manifest(manifest: &RunManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(manifest).expect("manifest serializes");
    fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

/// One score cell: (probe, model, checkpoint step, layer, fold).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeScore {
    pub probe_id: String,
    pub model_id: String,
    pub step: u64,
    pub layer_id: String,
    pub fold: usize,
    pub score: f64,
}

impl ProbeScore {
    fn sort_key(&self) -> (&str, &str, u64, &str, usize) {
        (&self.probe_id, &self.model_id, self.step, &self.layer_id, self.fold)
    }
}

pub fn sort_scores(scores: &mut [ProbeScore]) {
    scores.sort_by(|a, b| a.sort_key().cmp(&b.sort_key()));
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<BufWriter<fs::File>>> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().from_writer(BufWriter::new(file)))
}

/// Writes a sorted score table. Floats use shortest round-trip formatting.
pub fn write_scores(scores: &[ProbeScore], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut sorted = scores.to_vec();
    sort_scores(&mut sorted);
    let mut w = csv_writer(path)?;
    let map = |e: csv::Error| Error::io(path, std::io::Error::other(e));
    w.write_record(SCORE_COLUMNS).map_err(map)?;
    for s in &sorted {
        w.write_record([
            s.probe_id.as_str(),
            s.model_id.as_str(),
            &s.step.to_string(),
            s.layer_id.as_str(),
            &s.fold.to_string(),
            &s.score.to_string(),
        ])
        .map_err(map)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_scores(path: impl AsRef<Path>) -> Result<Vec<ProbeScore>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(file);
    let row_err = |line: u64, reason: String| Error::Row {
        path: path.to_path_buf(),
        line,
        reason,
    };
    let headers = rdr.headers().map_err(|e| row_err(1, e.to_string()))?;
    if headers.iter().collect::<Vec<_>>() != SCORE_COLUMNS {
        return Err(row_err(1, format!("expected header {}", SCORE_COLUMNS.join(","))));
    }
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| row_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = rec.position().map_or(0, |p| p.line());
        let bad = |what: &str| row_err(line, format!("bad {what}"));
        let score: f64 = rec[5].parse().map_err(|_| bad("score"))?;
        if !score.is_finite() {
            return Err(bad("score (non-finite)"));
        }
        out.push(ProbeScore {
            probe_id: rec[0].to_string(),
            model_id: rec[1].to_string(),
            step: rec[2].parse().map_err(|_| bad("step"))?,
            layer_id: rec[3].to_string(),
            fold: rec[4].parse().map_err(|_| bad("fold"))?,
            score,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn emb3x2() -> FrameEmbeddings {
        FrameEmbeddings::new("utt1", "T1", 0.02, 3, 2, vec![1., 2., 3., 4., 5., 6.]).unwrap()
    }

    #[test]
    fn embedding_layout_is_row_major() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.emb");
        write_embedding_file(&emb3x2(), &p).unwrap();
        let e = read_embedding_file(&p).unwrap();
        assert_eq!(e.row(0), &[1., 2.]);
        assert_eq!(e.row(1), &[3., 4.]);
        assert_eq!(e.row(2), &[5., 6.]);
        assert_eq!(e, emb3x2());
    }

    fn raw_file(header: &str, payload: &[f32]) -> Vec<u8> {
        let mut b = EMBEDDING_MAGIC.to_vec();
        b.extend_from_slice(&(header.len() as u32).to_le_bytes());
        b.extend_from_slice(header.as_bytes());
        for v in payload {
            b.extend_from_slice(&v.to_le_bytes());
        }
        b
    }

    #[test]
    fn missing_frame_period_defaults_to_20ms() {
        let bytes = raw_file(
            r#"{"utterance_id":"u","layer_id":"L","n_frames":1,"dim":1}"#,
            &[0.5],
        );
        let e = decode_embedding(&bytes, Path::new("x")).unwrap();
        assert_eq!(e.frame_period_s, 0.02);
    }

    #[test]
    fn short_payload_is_corrupt() {
        let bytes = raw_file(
            r#"{"utterance_id":"u","layer_id":"L","n_frames":3,"dim":2}"#,
            &[1., 2., 3., 4., 5.],
        );
        match decode_embedding(&bytes, Path::new("x")) {
            Err(Error::PayloadSize { expected, actual, .. }) => {
                assert_eq!((expected, actual), (24, 20));
            }
            other => panic!("expected payload error, got {other:?}"),
        }
    }

    #[test]
    fn nan_payload_names_index() {
        let bytes = raw_file(
            r#"{"utterance_id":"u","layer_id":"L","n_frames":2,"dim":2}"#,
            &[1., 2., f32::NAN, f32::INFINITY],
        );
        match decode_embedding(&bytes, Path::new("x")) {
            Err(Error::NonFinite { index, .. }) => assert_eq!(index, 2),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = raw_file(
            r#"{"utterance_id":"u","layer_id":"L","n_frames":1,"dim":1}"#,
            &[1.],
        );
        bytes[0] = b'X';
        assert!(matches!(
            decode_embedding(&bytes, Path::new("x")),
            Err(Error::Corrupt { .. })
        ));
    }

    #[test]
    fn annotation_row_parses() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(&p, "unit_id,utterance_id,start_s,end_s,label\np1,utt1,0.04,0.10,a\n").unwrap();
        let t = read_annotations(&p).unwrap();
        assert_eq!(t.rows.len(), 1);
        let r = &t.rows[0];
        assert_eq!((r.unit_id.as_str(), r.label.as_str()), ("p1", "a"));
        assert_eq!((r.start_s, r.end_s), (0.04, 0.10));
    }

    #[test]
    fn empty_span_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(
            &p,
            "unit_id,utterance_id,start_s,end_s,label\np1,utt1,0.0,0.1,a\np2,utt1,0.10,0.10,a\n",
        )
        .unwrap();
        match read_annotations(&p) {
            Err(Error::Row { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn duplicate_unit_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        fs::write(
            &p,
            "unit_id,utterance_id,start_s,end_s,label\np1,u,0,0.1,a\np1,u,0.1,0.2,b\n",
        )
        .unwrap();
        assert!(matches!(read_annotations(&p), Err(Error::Row { line: 3, .. })));
    }

    #[test]
    fn phone_scale_table_accepted() {
        let rows: Vec<AnnotationRow> = (0..1850)
            .map(|i| AnnotationRow {
                unit_id: format!("p{i}"),
                utterance_id: format!("utt{}", i / 20),
                start_s: (i % 20) as f64 * 0.1,
                end_s: (i % 20) as f64 * 0.1 + 0.06,
                label: format!("ph{}", i % 37),
                aux_labels: BTreeMap::new(),
            })
            .collect();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_annotations(&AnnotationTable::from_rows(rows).unwrap(), &p).unwrap();
        let t = read_annotations(&p).unwrap();
        assert_eq!(t.len(), 1850);
        let labels: HashSet<_> = t.rows.iter().map(|r| r.label.clone()).collect();
        assert_eq!(labels.len(), 37);
    }

    #[test]
    fn aux_columns_round_trip() {
        let mut aux = BTreeMap::new();
        aux.insert("pos".to_string(), "NOUN".to_string());
        let t = AnnotationTable::from_rows(vec![AnnotationRow {
            unit_id: "w1".into(),
            utterance_id: "s1".into(),
            start_s: 0.1,
            end_s: 0.35,
            label: "huis".into(),
            aux_labels: aux,
        }])
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.csv");
        write_annotations(&t, &p).unwrap();
        assert_eq!(read_annotations(&p).unwrap(), t);
        assert_eq!(t.rows[0].get("pos"), Some("NOUN"));
        assert_eq!(t.rows[0].get("label"), Some("huis"));
    }

    fn score(fold: usize, v: f64) -> ProbeScore {
        ProbeScore {
            probe_id: "phones".into(),
            model_id: "m".into(),
            step: 1000,
            layer_id: "T1".into(),
            fold,
            score: v,
        }
    }

    #[test]
    fn scores_sorted_by_fold() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_scores(&[score(1, 0.2), score(0, 0.1)], &p).unwrap();
        let text = fs::read_to_string(&p).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "probe_id,model_id,step,layer_id,fold,score");
        assert_eq!(lines[1], "phones,m,1000,T1,0,0.1");
        assert_eq!(lines[2], "phones,m,1000,T1,1,0.2");
    }

    #[test]
    fn empty_scores_write_header_only() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.csv");
        write_scores(&[], &p).unwrap();
        assert_eq!(fs::read_to_string(&p).unwrap(), "probe_id,model_id,step,layer_id,fold,score\n");
        assert!(read_scores(&p).unwrap().is_empty());
    }

    #[test]
    fn unwritable_score_path_is_io_error() {
        let r = write_scores(&[score(0, 0.1)], "/nonexistent-dir/x/s.csv");
        assert!(matches!(r, Err(Error::Io { .. })));
    }

    #[test]
    fn tree_validation() {
        assert!(validate_tree(3, &[(0, 1), (1, 2)]).is_ok());
        assert!(validate_tree(3, &[(0, 1)]).is_err());
        assert!(validate_tree(3, &[(0, 1), (1, 0)]).is_err());
        assert!(validate_tree(3, &[(0, 1), (1, 3)]).is_err());
        assert!(validate_tree(4, &[(0, 1), (1, 2), (2, 0)]).is_err());
        assert!(validate_tree(1, &[]).is_ok());
    }

    #[test]
    fn parses_round_trip_and_reject_cycles() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("p.jsonl");
        let parse = SentenceParse {
            sentence_id: "s1".into(),
            words: vec!["w1".into(), "w2".into(), "w3".into()],
            edges: vec![(0, 1), (1, 2)],
        };
        write_parses(std::slice::from_ref(&parse), &p).unwrap();
        assert_eq!(read_parses(&p).unwrap(), vec![parse]);
        fs::write(&p, r#"{"sentence_id":"s","words":["a","b","c"],"edges":[[0,1],[1,0]]}"#).unwrap();
        assert!(matches!(read_parses(&p), Err(Error::Row { line: 1, .. })));
    }

    #[test]
    fn manifest_requires_increasing_steps() {
        let m: RunManifest = serde_json::from_str(
            r#"{"models":[{"model_id":"m","checkpoints":[
                {"step":2,"layers":[]},{"step":1,"layers":[]}]}]}"#,
        )
        .unwrap();
        assert!(m.validate().is_err());
        let m: RunManifest = serde_json::from_str(
            r#"{"models":[{"model_id":"m","checkpoints":[
                {"step":1,"layers":[{"layer_id":"T1","embedding_dir":"a"},{"layer_id":"T1","embedding_dir":"b"}]}]}]}"#,
        )
        .unwrap();
        assert!(m.validate().is_err());
    }

    #[test]
    fn reference_table_uses_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("mfcc.emb");
        let t = ReferenceTable {
            ids: vec!["p1".into(), "p2".into(), "p3".into()],
            vectors: emb3x2(),
        };
        write_reference_table(&t, &p).unwrap();
        assert!(sidecar_path(&p).exists());
        assert_eq!(read_reference_table(&p).unwrap(), t);
    }

    proptest! {
        #[test]
        fn embedding_round_trip_bit_exact(
            n in 1usize..6, d in 1usize..5,
            seed in proptest::collection::vec(-1e6f32..1e6f32, 30),
            period in 0.001f64..0.1,
        ) {
            let data: Vec<f32> = seed.iter().cycle().take(n * d).copied().collect();
            let e = FrameEmbeddings::new("u", "L", period, n, d, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("e.emb");
            write_embedding_file(&e, &p).unwrap();
            let back = read_embedding_file(&p).unwrap();
            prop_assert_eq!(
                back.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
                e.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
            );
            prop_assert_eq!(back, e);
        }

        #[test]
        fn score_round_trip(values in proptest::collection::vec((0u64..5, 0usize..5, -1.0f64..1.0), 0..20)) {
            let scores: Vec<ProbeScore> = values.iter().enumerate().map(|(i, &(step, fold, v))| ProbeScore {
                probe_id: format!("p{}", i % 3),
                model_id: "m".into(),
                step: step * 1000,
                layer_id: format!("T{i}"),
                fold,
                score: v,
            }).collect();
            let dir = tempfile::tempdir().unwrap();
            let p = dir.path().join("s.csv");
            write_scores(&scores, &p).unwrap();
            let mut expected = scores.clone();
            sort_scores(&mut expected);
            prop_assert_eq!(read_scores(&p).unwrap(), expected);
        }
    }
}
