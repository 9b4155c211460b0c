use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::abx::read_triplets;
use crate::clusterprobe::{ClusterPreset, ClusterProbeConfig};
use crate::dataio::{
    embedding_path, read_annotations, read_manifest, read_parses, read_reference_table, AnnotationTable, RunManifest,
};
use crate::error::{Error, Result};
use crate::structprobe::ProbeHyperparams;

pub const DEFAULT_FOLDS: usize = 5;

fn default_folds() -> usize {
    DEFAULT_FOLDS
}

fn default_label_key() -> String {
    "label".into()
}

/// Batch run description. Relative paths resolve against the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub manifest: PathBuf,
    pub probes: Vec<ProbeConfig>,
    #[serde(default = "default_folds")]
    pub n_folds: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub probe_id: String,
    /// Unit annotations whose spans are pooled from each layer.
    pub annotations: PathBuf,
    #[serde(flatten)]
    pub kind: ProbeKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum ProbeKind {
    Cluster {
        #[serde(default)]
        preset: Option<ClusterPreset>,
        /// Explicit design; takes precedence over `preset`.
        #[serde(default)]
        design: Option<ClusterProbeConfig>,
        #[serde(default = "default_label_key")]
        label_key: String,
    },
    Rsa {
        reference: PathBuf,
        #[serde(default)]
        group_by: Option<String>,
        #[serde(default)]
        exclude_same: Option<String>,
    },
    Abx {
        triplets: PathBuf,
        /// Annotation columns checked against the triplet keys when given.
        #[serde(default)]
        meaning_key: Option<String>,
        #[serde(default)]
        phonetic_key: Option<String>,
    },
    Structural {
        parses: PathBuf,
        #[serde(default)]
        hyperparams: ProbeHyperparams,
    },
}

impl ProbeKind {
    pub fn name(&self) -> &'static str {
        match self {
            ProbeKind::Cluster { .. } => "cluster",
            ProbeKind::Rsa { .. } => "rsa",
            ProbeKind::Abx { .. } => "abx",
            ProbeKind::Structural { .. } => "structural",
        }
    }
}

impl ProbeConfig {
    /// Effective clustering design, if this is a clustering probe.
    pub fn cluster_design(&self) -> Option<ClusterProbeConfig> {
        match &self.kind {
            ProbeKind::Cluster { design: Some(d), .. } => Some(d.clone()),
            ProbeKind::Cluster { preset: Some(p), .. } => Some(ClusterProbeConfig::preset(*p)),
            _ => None,
        }
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut self.annotations);
        match &mut self.kind {
            ProbeKind::Rsa { reference, .. } => fix(reference),
            ProbeKind::Abx { triplets, .. } => fix(triplets),
            ProbeKind::Structural { parses, .. } => fix(parses),
            ProbeKind::Cluster { .. } => {}
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> std::result::Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Reads a config file and resolves its relative paths.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)
            .map_err(|e| Error::Corrupt { path: path.to_path_buf(), reason: e.to_string() })?;
        let base = path.parent().unwrap_or(Path::new("."));
        cfg.resolve_paths(base);
        Ok(cfg)
    }

    pub fn resolve_paths(&mut self, base: &Path) {
        if self.manifest.is_relative() {
            self.manifest = base.join(&self.manifest);
        }
        if let Some(out) = &self.out_dir {
            if out.is_relative() {
                self.out_dir = Some(base.join(out));
            }
        }
        for p in &mut self.probes {
            p.resolve_paths(base);
        }
    }

    pub fn probe(&self, probe_id: &str) -> Option<&ProbeConfig> {
        self.probes.iter().find(|p| p.probe_id == probe_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Issue {
    /// File or config location the issue refers to.
    pub path: String,
    pub rule: String,
}

impl fmt::Display for Issue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.rule)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ValidationReport {
    pub errors: Vec<Issue>,
    pub warnings: Vec<Issue>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }

    fn error(&mut self, path: impl fmt::Display, rule: impl Into<String>) {
        self.errors.push(Issue { path: path.to_string(), rule: rule.into() });
    }

    fn warn(&mut self, path: impl fmt::Display, rule: impl Into<String>) {
        self.warnings.push(Issue { path: path.to_string(), rule: rule.into() });
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.errors {
            writeln!(f, "error: {e}")?;
        }
        for w in &self.warnings {
            writeln!(f, "warning: {w}")?;
        }
        write!(f, "{} errors, {} warnings", self.errors.len(), self.warnings.len())
    }
}

/// Dry-run checks of a loaded config: files present and parseable, label
/// columns available, dataset designs matching their presets. Embedding
/// payloads are not read.
pub fn validate(cfg: &RunConfig) -> (ValidationReport, Option<RunManifest>) {
    let mut report = ValidationReport::default();
    if cfg.n_folds < 2 {
        report.error("n_folds", format!("need >= 2 folds, got {}", cfg.n_folds));
    }
    let mut seen = HashSet::new();
    for p in &cfg.probes {
        if p.probe_id.is_empty() || p.probe_id.contains(',') {
            report.error(format!("probes.{}", p.probe_id), "probe_id must be non-empty without commas");
        }
        if !seen.insert(&p.probe_id) {
            report.error(format!("probes.{}", p.probe_id), "duplicate probe_id");
        }
    }
    if cfg.probes.is_empty() {
        report.error("probes", "no probes configured");
    }
    let manifest = match read_manifest(&cfg.manifest) {
        Ok(m) => Some(m),
        Err(e) => {
            report.error(cfg.manifest.display(), e.to_string());
            None
        }
    };
    let mut layer_dirs: BTreeSet<PathBuf> = BTreeSet::new();
    if let Some(m) = &manifest {
        if m.models.is_empty() {
            report.error(cfg.manifest.display(), "manifest lists no models");
        }
        for model in &m.models {
            for c in &model.checkpoints {
                for l in &c.layers {
                    if l.embedding_dir.is_dir() {
                        layer_dirs.insert(l.embedding_dir.clone());
                    } else {
                        report.error(
                            l.embedding_dir.display(),
                            format!("embedding dir missing (model {} step {} layer {})", model.model_id, c.step, l.layer_id),
                        );
                    }
                }
            }
        }
    }
    for p in &cfg.probes {
        validate_probe(p, cfg.n_folds, &layer_dirs, &mut report);
    }
    report.errors.sort();
    report.warnings.sort();
    (report, manifest)
}

fn validate_probe(p: &ProbeConfig, n_folds: usize, layer_dirs: &BTreeSet<PathBuf>, report: &mut ValidationReport) {
    let ann_path = p.annotations.display().to_string();
    let table = match read_annotations(&p.annotations) {
        Ok(t) => t,
        Err(e) => {
            report.error(&ann_path, e.to_string());
            return;
        }
    };
    for dir in layer_dirs {
        let missing: Vec<&str> =
            table.utterance_ids().into_iter().filter(|u| !embedding_path(dir, u).is_file()).collect();
        if let Some(first) = missing.first() {
            report.error(
                embedding_path(dir, first).display(),
                format!("probe {}: {} utterance embedding file(s) missing in this layer", p.probe_id, missing.len()),
            );
        }
    }
    let columns: BTreeSet<String> =
        std::iter::once("label".to_string()).chain(table.aux_columns()).collect();
    let need_column = |report: &mut ValidationReport, key: &str, what: &str| {
        if !columns.contains(key) {
            report.error(&ann_path, format!("probe {}: {what} column {key:?} absent", p.probe_id));
        }
    };
    match &p.kind {
        ProbeKind::Cluster { label_key, .. } => {
            need_column(report, label_key, "label");
            let Some(design) = p.cluster_design() else {
                report.error(format!("probes.{}", p.probe_id), "cluster probe needs a preset or a design");
                return;
            };
            if let Err(e) = design.validate() {
                report.error(format!("probes.{}", p.probe_id), e.to_string());
            }
            if let Some(key) = &design.disjoint_key {
                need_column(report, key, "disjointness key");
            }
            if design.implied_folds() != n_folds {
                report.warn(
                    format!("probes.{}", p.probe_id),
                    format!("test fraction {} implies {} folds; running {n_folds}", design.test_fraction, design.implied_folds()),
                );
            }
            if columns.contains(label_key) {
                let labels: Vec<String> = table.rows.iter().filter_map(|r| r.get(label_key).map(str::to_owned)).collect();
                for w in design.design_warnings(&labels) {
                    report.warn(&ann_path, format!("probe {}: {w}", p.probe_id));
                }
            }
        }
        ProbeKind::Rsa { reference, group_by, exclude_same } => {
            for key in [group_by, exclude_same].into_iter().flatten() {
                need_column(report, key, "label");
            }
            match read_reference_table(reference) {
                Ok(r) => {
                    let units = table.by_id();
                    let shared = r.ids.iter().filter(|id| units.contains_key(id.as_str())).count();
                    if shared < 3 {
                        report.error(
                            reference.display(),
                            format!("probe {}: {shared} reference ids match annotated units; need >= 3", p.probe_id),
                        );
                    }
                }
                Err(e) => report.error(reference.display(), e.to_string()),
            }
        }
        ProbeKind::Abx { triplets, meaning_key, phonetic_key } => match read_triplets(triplets) {
            Ok(ts) => {
                let units = table.by_id();
                if ts.is_empty() {
                    report.error(triplets.display(), "no triplets");
                }
                if let Some((n, id)) = ts
                    .iter()
                    .enumerate()
                    .flat_map(|(n, t)| [(n, &t.a_id), (n, &t.b_id), (n, &t.x_id)])
                    .find(|(_, id)| !units.contains_key(id.as_str()))
                {
                    report.error(triplets.display(), format!("triplet {n}: unit {id} not annotated"));
                } else if let (Some(m), Some(ph)) = (meaning_key, phonetic_key) {
                    if let Err(e) = crate::abx::check_against_annotations(&ts, &table, m, ph) {
                        report.error(triplets.display(), e.to_string());
                    }
                }
            }
            Err(e) => report.error(triplets.display(), e.to_string()),
        },
        ProbeKind::Structural { parses, hyperparams } => {
            if hyperparams.batch_size == 0 || hyperparams.rank == 0 || hyperparams.max_epochs == 0 {
                report.error(format!("probes.{}", p.probe_id), "batch_size, rank and max_epochs must be >= 1");
            }
            match read_parses(parses) {
                Ok(ps) => {
                    let units = table.by_id();
                    if ps.len() < n_folds {
                        report.error(parses.display(), format!("{} sentences cannot fill {n_folds} folds", ps.len()));
                    }
                    if let Some((s, w)) = ps
                        .iter()
                        .flat_map(|s| s.words.iter().map(move |w| (&s.sentence_id, w)))
                        .find(|(_, w)| !units.contains_key(w.as_str()))
                    {
                        report.error(parses.display(), format!("sentence {s}: word unit {w} not annotated"));
                    }
                    if let Some(s) = ps.iter().find(|s| s.words.len() < 2) {
                        report.error(parses.display(), format!("sentence {}: fewer than 2 words", s.sentence_id));
                    }
                }
                Err(e) => report.error(parses.display(), e.to_string()),
            }
        }
    }
}

/// Per-unit label maps (`label` plus every aux column).
pub fn unit_labels(table: &AnnotationTable) -> crate::rsa::UnitLabels {
    table
        .rows
        .iter()
        .map(|r| {
            let mut m: BTreeMap<String, String> = r.aux_labels.clone();
            m.insert("label".into(), r.label.clone());
            (r.unit_id.clone(), m)
        })
        .collect()
}
