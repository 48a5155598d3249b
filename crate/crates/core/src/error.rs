use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("missing file {0}")]
    MissingFile(PathBuf),

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("{path}: {source}")]
    Csv {
        path: PathBuf,
        #[source]
        source: csv::Error,
    },

    #[error("{path}: {source}")]
    Wav {
        path: PathBuf,
        #[source]
        source: hound::Error,
    },

    #[error("{path}: sample rate {got} Hz, expected 16000 Hz")]
    SampleRate { path: PathBuf, got: u32 },

    #[error("{path}: {detail}")]
    WavFormat { path: PathBuf, detail: String },

    #[error("invalid session: {0}")]
    InvalidSession(String),

    #[error("duplicate utterance id {0}")]
    DuplicateUtterance(String),

    #[error("utterance {utterance_id}: {detail}")]
    InvalidAnnotation { utterance_id: String, detail: String },

    #[error("utterance {utterance_id} overlaps robot utterance {robot_id}")]
    AnnotationOverlapsRobot { utterance_id: String, robot_id: String },

    #[error("{file} refers to unknown participant {id}")]
    UnknownParticipant { file: String, id: String },

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("robot utterance {0} passed where only human records are allowed")]
    RobotRecord(String),

    #[error("a session needs at least 2 participants, got {0}")]
    TooFewParticipants(usize),

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("window [{ta:.3}, {tb:.3}] s lies outside the {len:.3} s stream")]
    Window { ta: f64, tb: f64, len: f64 },

    #[error("t = {t:.3} s is outside episode [{start:.3}, {end:.3}]")]
    OutsideEpisode { t: f64, start: f64, end: f64 },

    #[error("no skeleton frames in [{ta:.3}, {tb:.3}) s")]
    NoFrames { ta: f64, tb: f64 },

    #[error("values are already normalized")]
    AlreadyNormalized,

    #[error("leakage: statistic '{stat}' derived from non-training utterances {ids:?}")]
    Leakage { stat: String, ids: Vec<String> },

    #[error("class {class} missing from {context}")]
    MissingClass { context: String, class: String },

    #[error("threshold heuristic needs at least 3 distinct values, got {0}")]
    TooFewDistinct(usize),

    #[error("cannot select {k} features out of {n}")]
    SelectionTooLarge { k: usize, n: usize },

    #[error("feature table: {0}")]
    Table(String),

    #[error("stream protocol: {0}")]
    Protocol(String),

    #[error(transparent)]
    Learn(#[from] topic_learn::LearnError),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}
