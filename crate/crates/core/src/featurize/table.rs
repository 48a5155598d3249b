//! Feature tables on disk.
//!
//! `<name>.csv` holds `utterance_id,label,f_0..f_71` with an empty cell for an
//! undefined value; `<name>.csv.manifest.json` holds the layout, its hash and
//! the per-utterance metadata. Sequences are stored as JSON lines.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Dataset, Example, ExampleMeta, FeatureManifest, FeatureSequence, FeatureVector};
use crate::dataset::DecisionLabel;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableSidecar {
    pub manifest: FeatureManifest,
    pub manifest_hash: String,
    pub examples: Vec<ExampleMeta>,
}

/// Alias kept for readers that think in terms of tables.
pub type FeatureTable = Dataset;

pub fn sidecar_path(table: &Path) -> PathBuf {
    let mut s = table.as_os_str().to_owned();
    s.push(".manifest.json");
    PathBuf::from(s)
}

fn json_err(path: &Path) -> impl Fn(serde_json::Error) -> Error + '_ {
    move |source| Error::Json {
        path: path.to_path_buf(),
        source,
    }
}

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path.to_path_buf())
        } else {
            Error::io(path, e)
        }
    })
}

pub fn write_table(path: &Path, data: &Dataset) -> Result<()> {
    let manifest = FeatureManifest::vector();
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = csv::Writer::from_writer(BufWriter::new(file));
    let mut header = vec!["utterance_id".to_string(), "label".to_string()];
    header.extend((0..manifest.len()).map(|i| format!("f_{i}")));
    w.write_record(&header).map_err(csv_err)?;
    for ex in &data.examples {
        if ex.vector.values.len() != manifest.len() {
            return Err(Error::Table(format!(
                "{} has {} values, expected {}",
                ex.meta.utterance_id,
                ex.vector.values.len(),
                manifest.len()
            )));
        }
        let mut row = vec![ex.meta.utterance_id.clone(), ex.meta.label.code().to_string()];
        row.extend(
            ex.vector
                .values
                .iter()
                .zip(&ex.vector.defined)
                .map(|(v, &d)| if d { v.to_string() } else { String::new() }),
        );
        w.write_record(&row).map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    let side = TableSidecar {
        manifest,
        manifest_hash: data.manifest_hash.clone(),
        examples: data.examples.iter().map(|e| e.meta.clone()).collect(),
    };
    let sp = sidecar_path(path);
    let f = File::create(&sp).map_err(|e| Error::io(&sp, e))?;
    serde_json::to_writer_pretty(BufWriter::new(f), &side).map_err(json_err(&sp))
}

pub fn read_table(path: &Path) -> Result<Dataset> {
    let sp = sidecar_path(path);
    let side: TableSidecar = serde_json::from_reader(BufReader::new(open(&sp)?)).map_err(json_err(&sp))?;
    if side.manifest != FeatureManifest::vector() {
        return Err(Error::Table(format!("{}: feature layout differs from this build", sp.display())));
    }
    let csv_err = |source| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut r = csv::Reader::from_reader(open(path)?);
    let n = side.manifest.len();
    let header = r.headers().map_err(csv_err)?.clone();
    if header.len() != n + 2 || &header[0] != "utterance_id" || &header[1] != "label" {
        return Err(Error::Table(format!("{}: unexpected header", path.display())));
    }
    let mut examples = Vec::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let id = &rec[0];
        let label: DecisionLabel = rec[1].parse()?;
        // Rows and sidecar entries share one order.
        let m = side
            .examples
            .get(row)
            .filter(|m| m.utterance_id == id)
            .ok_or_else(|| Error::Table(format!("row {row} ({id}) does not match {}", sp.display())))?;
        if m.label != label {
            return Err(Error::Table(format!("{id}: label differs between table and sidecar")));
        }
        let mut values = Vec::with_capacity(n);
        let mut defined = Vec::with_capacity(n);
        for cell in rec.iter().skip(2) {
            if cell.is_empty() {
                values.push(0.0);
                defined.push(false);
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| Error::Table(format!("{id}: bad value '{cell}'")))?;
                if !v.is_finite() {
                    return Err(Error::Table(format!("{id}: non-finite value")));
                }
                values.push(v);
                defined.push(true);
            }
        }
        examples.push(Example {
            meta: m.clone(),
            vector: FeatureVector {
                utterance_id: id.to_string(),
                values,
                defined,
                normalized: false,
            },
            sequence: None,
        });
    }
    if examples.len() != side.examples.len() {
        return Err(Error::Table(format!("{} rows but {} sidecar entries", examples.len(), side.examples.len())));
    }
    Ok(Dataset {
        manifest_hash: side.manifest_hash,
        examples,
    })
}

#[derive(Serialize, Deserialize)]
struct SequenceLine {
    session_id: String,
    utterance_id: String,
    steps: Vec<Vec<Option<f64>>>,
}

pub fn write_sequences(path: &Path, data: &Dataset) -> Result<()> {
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for ex in &data.examples {
        let Some(s) = &ex.sequence else { continue };
        let line = SequenceLine {
            session_id: ex.meta.session_id.clone(),
            utterance_id: s.utterance_id.clone(),
            steps: s
                .steps
                .iter()
                .zip(&s.defined)
                .map(|(row, def)| row.iter().zip(def).map(|(&v, &d)| d.then_some(v)).collect())
                .collect(),
        };
        serde_json::to_writer(&mut w, &line).map_err(json_err(path))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Attaches sequences from a JSON lines file to matching examples.
pub fn read_sequences(path: &Path, data: &mut Dataset) -> Result<usize> {
    let index: HashMap<(String, String), usize> = data
        .examples
        .iter()
        .enumerate()
        .map(|(i, e)| ((e.meta.session_id.clone(), e.meta.utterance_id.clone()), i))
        .collect();
    let mut attached = 0;
    for line in BufReader::new(open(path)?).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let s: SequenceLine = serde_json::from_str(&line).map_err(json_err(path))?;
        let Some(&i) = index.get(&(s.session_id, s.utterance_id.clone())) else { continue };
        data.examples[i].sequence = Some(FeatureSequence {
            utterance_id: s.utterance_id,
            defined: s.steps.iter().map(|r| r.iter().map(Option::is_some).collect()).collect(),
            steps: s.steps.iter().map(|r| r.iter().map(|v| v.unwrap_or(0.0)).collect()).collect(),
            normalized: false,
        });
        attached += 1;
    }
    Ok(attached)
}
