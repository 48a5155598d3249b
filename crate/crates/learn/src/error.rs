use thiserror::Error;

pub type Result<T> = std::result::Result<T, LearnError>;

#[derive(Debug, Error)]
pub enum LearnError {
    #[error("training set is empty")]
    EmptyTrainingSet,

    #[error("{features} samples but {labels} labels")]
    LengthMismatch { features: usize, labels: usize },

    #[error("label {label} is out of range for {n_classes} classes")]
    LabelOutOfRange { label: usize, n_classes: usize },

    #[error("expected {expected} input dimensions, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("sequence {index} has {got} steps, expected {expected}")]
    RaggedSequences { index: usize, expected: usize, got: usize },

    #[error("model consumes {expected} inputs, got {got}")]
    WrongInputKind {
        expected: &'static str,
        got: &'static str,
    },

    #[error("invalid hyperparameter: {0}")]
    InvalidHyperparameter(String),

    #[error(
        "SMO did not converge after {iterations} iterations \
         (KKT gap {gap:.3e}, tolerance {tol:.1e}, {n_samples} samples, C = {c})"
    )]
    SvmNotConverged {
        iterations: usize,
        gap: f64,
        tol: f64,
        n_samples: usize,
        c: f64,
    },

    #[error("non-finite loss at epoch {epoch}, batch {batch} (seed {seed}, batch size {batch_size})")]
    NonFiniteLoss {
        seed: u64,
        epoch: usize,
        batch: usize,
        batch_size: usize,
    },

    #[error("manifest hash mismatch: model was trained on {model}, input is {input}")]
    ManifestMismatch { model: String, input: String },

    #[error("corrupted model payload: {0}")]
    Corrupted(String),
}
