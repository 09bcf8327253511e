//! Identity preservation scoring. Each synthetic clip is embedded and compared
//! by cosine similarity to the centroid of real clips of its identity.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::process::Command;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{load_dataset, write_dataset, SilhouetteSequence};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingVector {
    pub values: Vec<f64>,
    pub source_sequence_id: String,
    pub identity_index: usize,
}

impl EmbeddingVector {
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.norm() > 0.0)
    }
}

pub trait Embedder {
    fn name(&self) -> String;

    fn embed(&self, seq: &SilhouetteSequence) -> Result<EmbeddingVector>;

    fn embed_all(&self, seqs: &[SilhouetteSequence]) -> Result<Vec<EmbeddingVector>> {
        seqs.iter().map(|s| self.embed(s)).collect()
    }
}

/// Gait energy image: the temporal mean silhouette, flattened and
/// L2-normalized. An all-zero mean yields the zero vector.
#[derive(Debug, Clone, Copy, Default)]
pub struct GeiEmbedder;

impl Embedder for GeiEmbedder {
    fn name(&self) -> String {
        "gei".into()
    }

    fn embed(&self, seq: &SilhouetteSequence) -> Result<EmbeddingVector> {
        let (f, h, w) = seq.frames.dim();
        if f == 0 || h * w == 0 {
            return Err(Error::Parameter(format!("sequence {} is empty", seq.sequence_id)));
        }
        let mut gei = vec![0.0f64; h * w];
        for frame in seq.frames.outer_iter() {
            for (g, &v) in gei.iter_mut().zip(frame.iter()) {
                *g += f64::from(v);
            }
        }
        let n = f as f64;
        gei.iter_mut().for_each(|g| *g /= n);
        let norm = gei.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm > 0.0 {
            gei.iter_mut().for_each(|g| *g /= norm);
        }
        Ok(EmbeddingVector {
            values: gei,
            source_sequence_id: seq.sequence_id.clone(),
            identity_index: seq.identity_index,
        })
    }
}

/// Wraps an external recognition model. The program is run once per batch as
/// `program [args..] --data <dataset dir> --out <table path>` and must write
/// an embedding table covering every sequence in the dataset.
#[derive(Debug, Clone)]
pub struct ExternalEmbedder {
    pub program: PathBuf,
    pub args: Vec<String>,
    pub n_ids: usize,
}

impl Embedder for ExternalEmbedder {
    fn name(&self) -> String {
        format!("external:{}", self.program.display())
    }

    fn embed(&self, seq: &SilhouetteSequence) -> Result<EmbeddingVector> {
        let mut out = self.embed_all(std::slice::from_ref(seq))?;
        Ok(out.remove(0))
    }

    fn embed_all(&self, seqs: &[SilhouetteSequence]) -> Result<Vec<EmbeddingVector>> {
        let work = tempfile::tempdir()?;
        let data = work.path().join("data");
        let n_ids = seqs
            .iter()
            .map(|s| s.identity_index + 1)
            .max()
            .unwrap_or(0)
            .max(self.n_ids);
        write_dataset(&data, n_ids, seqs)?;
        let table = work.path().join("embeddings.csv");
        let status = Command::new(&self.program)
            .args(&self.args)
            .arg("--data")
            .arg(&data)
            .arg("--out")
            .arg(&table)
            .status()
            .map_err(|e| Error::Embedder(format!("cannot run {}: {e}", self.program.display())))?;
        if !status.success() {
            return Err(Error::Embedder(format!("{} exited with {status}", self.program.display())));
        }
        let rows = read_embedding_table(&table)
            .map_err(|e| Error::Embedder(format!("bad embedding table: {e}")))?;
        let mut by_id: BTreeMap<String, EmbeddingVector> = rows
            .into_iter()
            .map(|r| (r.vector.source_sequence_id.clone(), r.vector))
            .collect();
        seqs.iter()
            .map(|s| {
                by_id
                    .remove(&s.sequence_id)
                    .ok_or_else(|| Error::Embedder(format!("no embedding for {}", s.sequence_id)))
            })
            .collect()
    }
}

/// How synthetic identities are matched to real ones.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Pairing {
    SameIdentity,
    /// Synthetic identity to real identity.
    MatchedIds(BTreeMap<usize, usize>),
}

impl Pairing {
    fn target(&self, id: usize) -> Option<usize> {
        match self {
            Pairing::SameIdentity => Some(id),
            Pairing::MatchedIds(m) => m.get(&id).copied(),
        }
    }

    /// Pair every identity with the next one in sorted order, wrapping around.
    /// Scores under this pairing measure similarity to the wrong identity.
    pub fn shifted(ids: &BTreeSet<usize>) -> Self {
        let v: Vec<usize> = ids.iter().copied().collect();
        let n = v.len();
        Pairing::MatchedIds((0..n).map(|k| (v[k], v[(k + 1) % n])).collect())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbsReport {
    pub overall_score: f64,
    pub per_identity: BTreeMap<usize, f64>,
    pub pair_count: usize,
    pub embedder_name: String,
    /// Embeddings left out because their norm was zero.
    pub excluded_zero_norm: usize,
}

fn unit(v: &[f64]) -> Option<Vec<f64>> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    (n > 0.0 && n.is_finite()).then(|| v.iter().map(|x| x / n).collect())
}

pub fn cosine(a: &[f64], b: &[f64]) -> Option<f64> {
    let (a, b) = (unit(a)?, unit(b)?);
    Some(a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>().clamp(-1.0, 1.0))
}

/// Score precomputed embeddings. Centroids average the unit-normalized real
/// embeddings, so the score does not depend on embedding magnitudes.
pub fn gbs_from_embeddings(
    real: &[EmbeddingVector],
    synthetic: &[EmbeddingVector],
    pairing: &Pairing,
    embedder_name: &str,
) -> Result<GbsReport> {
    if real.is_empty() || synthetic.is_empty() {
        return Err(Error::Parameter("both real and synthetic sets must be nonempty".into()));
    }
    let dim = real[0].values.len();
    if let Some(bad) = real.iter().chain(synthetic).find(|e| e.values.len() != dim) {
        return Err(Error::shape(&[dim], &[bad.values.len()]));
    }
    let mut excluded = 0;
    let mut sums: BTreeMap<usize, (Vec<f64>, usize)> = BTreeMap::new();
    for e in real {
        match unit(&e.values) {
            Some(u) => {
                let slot = sums.entry(e.identity_index).or_insert_with(|| (vec![0.0; dim], 0));
                slot.0.iter_mut().zip(&u).for_each(|(s, x)| *s += x);
                slot.1 += 1;
            }
            None => excluded += 1,
        }
    }
    let missing: BTreeSet<usize> = synthetic
        .iter()
        .filter(|e| pairing.target(e.identity_index).is_none_or(|t| !sums.contains_key(&t)))
        .map(|e| e.identity_index)
        .collect();
    if !missing.is_empty() {
        return Err(Error::Pairing(missing.into_iter().collect()));
    }
    let mut per: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for e in synthetic {
        let target = pairing.target(e.identity_index).expect("checked above");
        match cosine(&e.values, &sums[&target].0) {
            Some(c) => {
                let slot = per.entry(e.identity_index).or_insert((0.0, 0));
                slot.0 += c;
                slot.1 += 1;
            }
            None => excluded += 1,
        }
    }
    if excluded > 0 {
        warn!("{excluded} zero-norm embeddings excluded from the score");
    }
    let pair_count: usize = per.values().map(|p| p.1).sum();
    if pair_count == 0 {
        return Err(Error::Parameter("no scorable pairs after excluding zero-norm embeddings".into()));
    }
    let total: f64 = per.values().map(|p| p.0).sum();
    Ok(GbsReport {
        overall_score: (total / pair_count as f64).clamp(-1.0, 1.0),
        per_identity: per.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect(),
        pair_count,
        embedder_name: embedder_name.into(),
        excluded_zero_norm: excluded,
    })
}

pub fn gbs(
    real: &[SilhouetteSequence],
    synthetic: &[SilhouetteSequence],
    embedder: &dyn Embedder,
    pairing: &Pairing,
) -> Result<GbsReport> {
    let r = embedder.embed_all(real)?;
    let s = embedder.embed_all(synthetic)?;
    gbs_from_embeddings(&r, &s, pairing, &embedder.name())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRow {
    pub vector: EmbeddingVector,
    pub is_synthetic: bool,
}

/// Write an embedding table: a header row, then one row per sequence sorted
/// by sequence id. Values use the shortest text that parses back exactly.
pub fn write_embedding_table(rows: &[EmbeddingRow], out_path: &Path) -> Result<()> {
    let dim = rows.first().map_or(0, |r| r.vector.values.len());
    if let Some(bad) = rows.iter().find(|r| r.vector.values.len() != dim) {
        return Err(Error::shape(&[dim], &[bad.vector.values.len()]));
    }
    let mut sorted: Vec<&EmbeddingRow> = rows.iter().collect();
    sorted.sort_by(|a, b| a.vector.source_sequence_id.cmp(&b.vector.source_sequence_id));
    if let Some(parent) = out_path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(out_path).map_err(csv_err)?;
    let mut header = vec!["sequence_id".to_string(), "identity_index".into(), "is_synthetic".into()];
    header.extend((0..dim).map(|k| format!("v{k}")));
    w.write_record(&header).map_err(csv_err)?;
    for r in sorted {
        let mut rec = vec![
            r.vector.source_sequence_id.clone(),
            r.vector.identity_index.to_string(),
            r.is_synthetic.to_string(),
        ];
        rec.extend(r.vector.values.iter().map(|v| v.to_string()));
        w.write_record(&rec).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e.to_string()))
}

pub fn read_embedding_table(path: &Path) -> Result<Vec<EmbeddingRow>> {
    let bad = |reason: String| Error::load(path, reason);
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    let header = r.headers().map_err(|e| bad(e.to_string()))?.clone();
    let fixed = ["sequence_id", "identity_index", "is_synthetic"];
    if header.len() < 3 || header.iter().take(3).ne(fixed.iter().copied()) {
        return Err(bad(format!("header must start with {fixed:?}")));
    }
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| bad(e.to_string()))?;
        let values = rec
            .iter()
            .skip(3)
            .map(|v| v.parse::<f64>().map_err(|e| bad(format!("{v:?}: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if values.iter().any(|v| !v.is_finite()) {
            return Err(bad(format!("non-finite embedding for {}", &rec[0])));
        }
        rows.push(EmbeddingRow {
            vector: EmbeddingVector {
                values,
                source_sequence_id: rec[0].to_string(),
                identity_index: rec[1].parse().map_err(|e| bad(format!("identity: {e}")))?,
            },
            is_synthetic: rec[2].parse().map_err(|e| bad(format!("is_synthetic: {e}")))?,
        });
    }
    Ok(rows)
}

/// Embed `sequences` and write the table.
pub fn export_embeddings(
    sequences: &[(SilhouetteSequence, bool)],
    embedder: &dyn Embedder,
    out_path: &Path,
) -> Result<Vec<EmbeddingRow>> {
    let seqs: Vec<SilhouetteSequence> = sequences.iter().map(|(s, _)| s.clone()).collect();
    let vectors = embedder.embed_all(&seqs)?;
    let rows: Vec<EmbeddingRow> = vectors
        .into_iter()
        .zip(sequences)
        .map(|(vector, (_, is_synthetic))| EmbeddingRow {
            vector,
            is_synthetic: *is_synthetic,
        })
        .collect();
    write_embedding_table(&rows, out_path)?;
    Ok(rows)
}

/// Load every sequence of a dataset directory in full, optionally resized.
pub fn load_all(dir: &Path, frame_size: Option<(usize, usize)>, workers: usize) -> Result<Vec<SilhouetteSequence>> {
    let manifest = load_dataset(dir)?;
    crate::data::parallel_map(&manifest.entries, workers, |e| {
        crate::data::load_full(&manifest, &e.sequence_id, frame_size)
    })
    .into_iter()
    .collect()
}
