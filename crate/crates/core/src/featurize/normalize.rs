//! Per-participant z-scores followed by a global min-max map onto [-1, 1].

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use super::{FeatureSequence, FeatureVector};
use crate::error::{Error, Result};

const CONSTANT_STD: f64 = 1e-12;

/// Running mean and population variance per feature over defined values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParticipantStats {
    pub count: Vec<usize>,
    pub mean: Vec<f64>,
    m2: Vec<f64>,
    /// Utterances contributing.
    pub samples: usize,
}

impl ParticipantStats {
    pub fn new(dim: usize) -> Self {
        Self {
            count: vec![0; dim],
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
            samples: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn push_row(&mut self, values: &[f64], defined: &[bool]) {
        for i in 0..self.dim() {
            if defined[i] {
                self.count[i] += 1;
                let d = values[i] - self.mean[i];
                self.mean[i] += d / self.count[i] as f64;
                self.m2[i] += d * (values[i] - self.mean[i]);
            }
        }
    }

    /// Adds one utterance made of one or more rows.
    pub fn push_sample<'a>(&mut self, rows: impl IntoIterator<Item = (&'a [f64], &'a [bool])>) {
        for (v, d) in rows {
            self.push_row(v, d);
        }
        self.samples += 1;
    }

    pub fn std(&self, i: usize) -> f64 {
        if self.count[i] == 0 {
            0.0
        } else {
            (self.m2[i] / self.count[i] as f64).max(0.0).sqrt()
        }
    }
}

/// Which statistics standardised a value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StatsSource {
    Participant,
    /// Participant had too few training samples.
    Global,
    /// Participant absent from training; statistics from its own unlabelled features.
    Unseen,
}

/// Utterance ids a derived statistic was computed from.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Provenance {
    pub stat: String,
    pub ids: BTreeSet<String>,
}

impl Provenance {
    pub fn new(stat: impl Into<String>, ids: impl IntoIterator<Item = impl Into<String>>) -> Self {
        Self {
            stat: stat.into(),
            ids: ids.into_iter().map(Into::into).collect(),
        }
    }

    /// Fails when any of `forbidden` contributed to this statistic.
    pub fn check(&self, forbidden: &BTreeSet<String>) -> Result<()> {
        let hit: Vec<String> = self.ids.intersection(forbidden).cloned().collect();
        if hit.is_empty() {
            Ok(())
        } else {
            Err(Error::Leakage {
                stat: self.stat.clone(),
                ids: hit,
            })
        }
    }
}

/// One training utterance: participant key, utterance id and its rows.
pub struct FitItem<'a> {
    pub key: &'a str,
    pub id: &'a str,
    pub rows: Vec<(&'a [f64], &'a [bool])>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    dim: usize,
    min_samples: usize,
    participants: BTreeMap<String, ParticipantStats>,
    global: ParticipantStats,
    min: Vec<f64>,
    max: Vec<f64>,
    unseen: BTreeMap<String, ParticipantStats>,
    provenance: Vec<Provenance>,
}

impl Normalizer {
    pub fn fit(items: &[FitItem<'_>], dim: usize) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Empty("normalizer training set"));
        }
        for it in items {
            for (v, d) in &it.rows {
                if v.len() != dim || d.len() != dim {
                    return Err(Error::Table(format!("row of {} values, expected {dim}", v.len())));
                }
            }
        }
        let mut global = ParticipantStats::new(dim);
        let mut participants: BTreeMap<String, ParticipantStats> = BTreeMap::new();
        let mut ids: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for it in items {
            global.push_sample(it.rows.iter().copied());
            participants
                .entry(it.key.to_string())
                .or_insert_with(|| ParticipantStats::new(dim))
                .push_sample(it.rows.iter().copied());
            ids.entry(it.key.to_string()).or_default().insert(it.id.to_string());
        }
        let all_ids: BTreeSet<String> = items.iter().map(|it| it.id.to_string()).collect();
        let mut provenance = vec![
            Provenance::new("global_zscore", all_ids.clone()),
            Provenance::new("minmax", all_ids),
        ];
        for (k, set) in ids {
            provenance.push(Provenance {
                stat: format!("zscore:{k}"),
                ids: set,
            });
        }
        let mut norm = Self {
            dim,
            min_samples: 2,
            participants,
            global,
            min: vec![f64::INFINITY; dim],
            max: vec![f64::NEG_INFINITY; dim],
            unseen: BTreeMap::new(),
            provenance,
        };
        for it in items {
            for (v, d) in &it.rows {
                let (z, _) = norm.zscore(it.key, v, d);
                for i in 0..dim {
                    norm.min[i] = norm.min[i].min(z[i]);
                    norm.max[i] = norm.max[i].max(z[i]);
                }
            }
        }
        Ok(norm)
    }

    pub fn fit_vectors(vectors: &[(&str, &FeatureVector)]) -> Result<Self> {
        let dim = vectors.first().map_or(0, |(_, v)| v.values.len());
        let items: Vec<FitItem<'_>> = vectors
            .iter()
            .map(|(key, v)| FitItem {
                key,
                id: &v.utterance_id,
                rows: vec![(&v.values[..], &v.defined[..])],
            })
            .collect();
        Self::fit(&items, dim)
    }

    /// Sequence steps share statistics across time.
    pub fn fit_sequences(sequences: &[(&str, &FeatureSequence)]) -> Result<Self> {
        let dim = sequences.first().and_then(|(_, s)| s.steps.first()).map_or(0, Vec::len);
        let items: Vec<FitItem<'_>> = sequences
            .iter()
            .map(|(key, s)| FitItem {
                key,
                id: &s.utterance_id,
                rows: s.steps.iter().zip(&s.defined).map(|(v, d)| (&v[..], &d[..])).collect(),
            })
            .collect();
        Self::fit(&items, dim)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    pub fn check_leakage(&self, forbidden: &BTreeSet<String>) -> Result<()> {
        self.provenance.iter().try_for_each(|p| p.check(forbidden))
    }

    pub fn training_stats(&self, key: &str) -> Option<&ParticipantStats> {
        self.participants.get(key)
    }

    pub fn knows(&self, key: &str) -> bool {
        self.participants.contains_key(key)
    }

    /// Registers self statistics for a participant absent from training.
    pub fn set_unseen(&mut self, key: &str, stats: ParticipantStats) -> Result<()> {
        if stats.dim() != self.dim {
            return Err(Error::Table(format!("statistics of dimension {}, expected {}", stats.dim(), self.dim)));
        }
        self.unseen.insert(key.to_string(), stats);
        Ok(())
    }

    fn source(&self, key: &str) -> (StatsSource, &ParticipantStats) {
        match self.participants.get(key) {
            Some(s) if s.samples >= self.min_samples => (StatsSource::Participant, s),
            Some(_) => (StatsSource::Global, &self.global),
            None => match self.unseen.get(key) {
                Some(s) => (StatsSource::Unseen, s),
                None => (StatsSource::Global, &self.global),
            },
        }
    }

    /// Standardised values; undefined values map to 0.
    pub fn zscore(&self, key: &str, values: &[f64], defined: &[bool]) -> (Vec<f64>, StatsSource) {
        let (source, stats) = self.source(key);
        let z = (0..self.dim)
            .map(|i| {
                if !defined[i] {
                    return 0.0;
                }
                // Features a participant has fewer than two values for use the pooled statistics.
                let (mean, std) = if stats.count[i] >= 2 {
                    (stats.mean[i], stats.std(i))
                } else {
                    (self.global.mean[i], self.global.std(i))
                };
                if std <= CONSTANT_STD {
                    0.0
                } else {
                    (values[i] - mean) / std
                }
            })
            .collect();
        (z, source)
    }

    fn scale(&self, z: &mut [f64]) {
        for i in 0..self.dim {
            let span = self.max[i] - self.min[i];
            z[i] = if span <= CONSTANT_STD {
                0.0
            } else {
                (2.0 * (z[i] - self.min[i]) / span - 1.0).clamp(-1.0, 1.0)
            };
        }
    }

    pub fn transform_row(&self, key: &str, values: &[f64], defined: &[bool]) -> (Vec<f64>, StatsSource) {
        let (mut z, src) = self.zscore(key, values, defined);
        self.scale(&mut z);
        (z, src)
    }

    pub fn apply_vector(&self, key: &str, v: &mut FeatureVector) -> Result<StatsSource> {
        if v.normalized {
            return Err(Error::AlreadyNormalized);
        }
        let (z, src) = self.transform_row(key, &v.values, &v.defined);
        v.values = z;
        v.normalized = true;
        Ok(src)
    }

    pub fn apply_sequence(&self, key: &str, s: &mut FeatureSequence) -> Result<StatsSource> {
        if s.normalized {
            return Err(Error::AlreadyNormalized);
        }
        let mut src = StatsSource::Participant;
        for (row, def) in s.steps.iter_mut().zip(&s.defined) {
            let (z, sr) = self.transform_row(key, row, def);
            *row = z;
            src = sr;
        }
        s.normalized = true;
        Ok(src)
    }
}
