//! Family-agnostic training entry point and the on-disk model container.
//!
//! Container layout (all integers little-endian):
//!
//! ```text
//! magic "TTMODEL\0" | u32 version | u32 header_len | header JSON
//! | u64 blob_len | bincode parameter blob | SHA-256 of everything before
//! ```

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{LearnError, Result};
use crate::forest::{ForestParams, RandomForest};
use crate::nn::{CellKind, Mlp, MlpParams, Rnn, RnnParams, TrainHistory};
use crate::svm::{Svm, SvmParams};
use crate::tree::{DecisionTree, TreeParams};

const MAGIC: &[u8; 8] = b"TTMODEL\0";
const VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Dt,
    Rf,
    Svm,
    Mlp,
    Lstm,
    Gru,
}

impl Family {
    pub const ALL: [Family; 6] = [
        Family::Dt,
        Family::Rf,
        Family::Svm,
        Family::Mlp,
        Family::Lstm,
        Family::Gru,
    ];

    pub fn is_sequential(self) -> bool {
        matches!(self, Family::Lstm | Family::Gru)
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Dt => "dt",
            Family::Rf => "rf",
            Family::Svm => "svm",
            Family::Mlp => "mlp",
            Family::Lstm => "lstm",
            Family::Gru => "gru",
        }
    }
}

impl std::fmt::Display for Family {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Family {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        Family::ALL
            .into_iter()
            .find(|f| f.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown model family '{s}'"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Hyperparameters {
    Tree(TreeParams),
    Forest(ForestParams),
    Svm(SvmParams),
    Mlp(MlpParams),
    Rnn(RnnParams),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub family: Family,
    pub hyperparameters: Hyperparameters,
    pub seed: u64,
}

impl ModelSpec {
    fn check(&self) -> Result<()> {
        let ok = match (&self.family, &self.hyperparameters) {
            (Family::Dt, Hyperparameters::Tree(_))
            | (Family::Rf, Hyperparameters::Forest(_))
            | (Family::Svm, Hyperparameters::Svm(_))
            | (Family::Mlp, Hyperparameters::Mlp(_)) => true,
            (Family::Lstm, Hyperparameters::Rnn(p)) => p.cell == CellKind::Lstm,
            (Family::Gru, Hyperparameters::Rnn(p)) => p.cell == CellKind::Gru,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(LearnError::InvalidHyperparameter(format!(
                "{:?} hyperparameters do not fit family {}",
                self.hyperparameters, self.family
            )))
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum Input<'a> {
    Vector(&'a [f64]),
    Sequence(&'a [Vec<f64>]),
}

impl Input<'_> {
    fn kind(&self) -> &'static str {
        match self {
            Input::Vector(_) => "vector",
            Input::Sequence(_) => "sequence",
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub enum TrainingData<'a> {
    Vectors {
        x: &'a [Vec<f64>],
        y: &'a [usize],
        validation: Option<(&'a [Vec<f64>], &'a [usize])>,
    },
    Sequences {
        x: &'a [Vec<Vec<f64>>],
        y: &'a [usize],
        validation: Option<(&'a [Vec<Vec<f64>>], &'a [usize])>,
    },
}

impl TrainingData<'_> {
    fn kind(&self) -> &'static str {
        match self {
            TrainingData::Vectors { .. } => "vector",
            TrainingData::Sequences { .. } => "sequence",
        }
    }

    fn shape(&self) -> (usize, usize) {
        match self {
            TrainingData::Vectors { x, .. } => (0, x.first().map_or(0, Vec::len)),
            TrainingData::Sequences { x, .. } => {
                let first = x.first();
                (
                    first.map_or(0, Vec::len),
                    first.and_then(|s| s.first()).map_or(0, Vec::len),
                )
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
enum Learned {
    Tree(DecisionTree),
    Forest(RandomForest),
    Svm(Svm),
    Mlp(Mlp),
    Rnn(Rnn),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    spec: ModelSpec,
    classes: Vec<String>,
    manifest_hash: String,
    steps: usize,
    input_dim: usize,
}

/// A fitted classifier together with the class names and the hash of the
/// feature manifest it was trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainedModel {
    header: Header,
    learned: Learned,
    history: Option<TrainHistory>,
}

pub fn train(
    spec: &ModelSpec,
    data: TrainingData<'_>,
    classes: &[String],
    manifest_hash: &str,
) -> Result<TrainedModel> {
    spec.check()?;
    let n_classes = classes.len();
    if n_classes < 2 {
        return Err(LearnError::InvalidHyperparameter(
            "at least two classes are required".into(),
        ));
    }
    let wants = if spec.family.is_sequential() {
        "sequence"
    } else {
        "vector"
    };
    if wants != data.kind() {
        return Err(LearnError::WrongInputKind {
            expected: wants,
            got: data.kind(),
        });
    }
    let (steps, input_dim) = data.shape();
    let mut history = None;
    let learned = match (&spec.hyperparameters, data) {
        (Hyperparameters::Tree(p), TrainingData::Vectors { x, y, .. }) => {
            Learned::Tree(DecisionTree::fit(x, y, n_classes, *p)?)
        }
        (Hyperparameters::Forest(p), TrainingData::Vectors { x, y, .. }) => {
            Learned::Forest(RandomForest::fit(x, y, n_classes, *p, spec.seed)?)
        }
        (Hyperparameters::Svm(p), TrainingData::Vectors { x, y, .. }) => {
            Learned::Svm(Svm::fit(x, y, n_classes, p)?)
        }
        (Hyperparameters::Mlp(p), TrainingData::Vectors { x, y, validation }) => {
            let (net, h) = Mlp::fit(x, y, n_classes, validation, p, spec.seed)?;
            history = Some(h);
            Learned::Mlp(net)
        }
        (Hyperparameters::Rnn(p), TrainingData::Sequences { x, y, validation }) => {
            let (net, h) = Rnn::fit(x, y, n_classes, validation, p, spec.seed)?;
            history = Some(h);
            Learned::Rnn(net)
        }
        _ => unreachable!("family and input kind checked above"),
    };
    Ok(TrainedModel {
        header: Header {
            spec: spec.clone(),
            classes: classes.to_vec(),
            manifest_hash: manifest_hash.to_string(),
            steps,
            input_dim,
        },
        learned,
        history,
    })
}

impl TrainedModel {
    pub fn spec(&self) -> &ModelSpec {
        &self.header.spec
    }

    pub fn classes(&self) -> &[String] {
        &self.header.classes
    }

    pub fn manifest_hash(&self) -> &str {
        &self.header.manifest_hash
    }

    /// Training curves for neural families; not persisted.
    pub fn history(&self) -> Option<&TrainHistory> {
        self.history.as_ref()
    }

    /// Class index and class probabilities.
    pub fn predict(&self, input: Input<'_>, manifest_hash: &str) -> Result<(usize, Vec<f64>)> {
        if manifest_hash != self.header.manifest_hash {
            return Err(LearnError::ManifestMismatch {
                model: self.header.manifest_hash.clone(),
                input: manifest_hash.to_string(),
            });
        }
        let probs = self.predict_unchecked(input)?;
        Ok((crate::argmax(&probs), probs))
    }

    /// Prediction without the manifest check, for callers that verified the
    /// hash once for a whole batch.
    pub fn predict_unchecked(&self, input: Input<'_>) -> Result<Vec<f64>> {
        let wants = if self.header.spec.family.is_sequential() {
            "sequence"
        } else {
            "vector"
        };
        if wants != input.kind() {
            return Err(LearnError::WrongInputKind {
                expected: wants,
                got: input.kind(),
            });
        }
        match input {
            Input::Vector(v) if v.len() != self.header.input_dim => {
                return Err(LearnError::DimensionMismatch {
                    expected: self.header.input_dim,
                    got: v.len(),
                })
            }
            Input::Sequence(s) => {
                if s.len() != self.header.steps {
                    return Err(LearnError::RaggedSequences {
                        index: 0,
                        expected: self.header.steps,
                        got: s.len(),
                    });
                }
                if let Some(row) = s.iter().find(|r| r.len() != self.header.input_dim) {
                    return Err(LearnError::DimensionMismatch {
                        expected: self.header.input_dim,
                        got: row.len(),
                    });
                }
            }
            _ => {}
        }
        Ok(match (&self.learned, input) {
            (Learned::Tree(m), Input::Vector(v)) => m.predict_proba(v).to_vec(),
            (Learned::Forest(m), Input::Vector(v)) => m.predict_proba(v),
            (Learned::Svm(m), Input::Vector(v)) => m.predict_proba(v),
            (Learned::Mlp(m), Input::Vector(v)) => m.predict_proba(v),
            (Learned::Rnn(m), Input::Sequence(s)) => m.predict_proba(s),
            _ => unreachable!("input kind checked above"),
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header =
            serde_json::to_vec(&self.header).map_err(|e| LearnError::Corrupted(e.to_string()))?;
        let blob = bincode::serialize(&self.learned).map_err(|e| LearnError::Corrupted(e.to_string()))?;
        let mut out = Vec::with_capacity(header.len() + blob.len() + 64);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(blob.len() as u64).to_le_bytes());
        out.extend_from_slice(&blob);
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let corrupt = |what: &str| LearnError::Corrupted(what.to_string());
        if bytes.len() < MAGIC.len() + 4 + 4 + 8 + 32 {
            return Err(corrupt("truncated container"));
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(corrupt("checksum mismatch"));
        }
        if &body[..8] != MAGIC {
            return Err(corrupt("bad magic"));
        }
        let version = u32::from_le_bytes(body[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(LearnError::Corrupted(format!("unsupported container version {version}")));
        }
        let header_len = u32::from_le_bytes(body[12..16].try_into().unwrap()) as usize;
        let header_end = 16 + header_len;
        if body.len() < header_end + 8 {
            return Err(corrupt("truncated header"));
        }
        let header: Header = serde_json::from_slice(&body[16..header_end])
            .map_err(|e| LearnError::Corrupted(format!("header: {e}")))?;
        let blob_len = u64::from_le_bytes(body[header_end..header_end + 8].try_into().unwrap()) as usize;
        let blob = &body[header_end + 8..];
        if blob.len() != blob_len {
            return Err(corrupt("blob length mismatch"));
        }
        let learned: Learned =
            bincode::deserialize(blob).map_err(|e| LearnError::Corrupted(format!("blob: {e}")))?;
        header.spec.check()?;
        Ok(Self {
            header,
            learned,
            history: None,
        })
    }
}
