//! Sessions, annotations and their on-disk form, plus a synthetic generator.

pub mod io;
pub mod synthetic;
pub mod types;

pub use io::{load_session, validate_annotations, write_session, ANNOTATION_FILE, SESSION_FILE, SKELETON_FILE};
pub use synthetic::{corpus_specs, generate_synthetic_session, robot_pose, seat_positions, SyntheticSpec};
pub use types::*;
