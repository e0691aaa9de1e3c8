//! World-definition files: a text preprocessor followed by an XML schema.

pub mod expr;
pub mod parse;
pub mod preprocess;

use std::collections::HashMap;
use std::fmt;
use std::path::Path;

pub use parse::{parse_world, parse_world_in, BlockSpec, SchemaError, VehicleSpec, WorldDefinition};
pub use preprocess::{preprocess, preprocess_file, preprocess_named, PreprocessError, PreprocessErrorKind};

#[derive(Debug)]
pub enum WorldFileError {
    Preprocess(PreprocessError),
    /// Schema errors report lines of the expanded text.
    Schema { file: String, error: SchemaError },
}

impl fmt::Display for WorldFileError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            WorldFileError::Preprocess(e) => e.fmt(f),
            WorldFileError::Schema { file, error } => {
                write!(f, "{file}:{}: <{}>: {}", error.line, error.path, error.message)
            }
        }
    }
}

impl std::error::Error for WorldFileError {}

/// Preprocesses and parses a world file.
pub fn load_world(path: &Path, env: &HashMap<String, String>) -> Result<WorldDefinition, WorldFileError> {
    let text = preprocess_file(path, env).map_err(WorldFileError::Preprocess)?;
    let base = path.parent().unwrap_or(Path::new("."));
    parse_world_in(&text, base).map_err(|error| WorldFileError::Schema { file: path.display().to_string(), error })
}

/// The process environment as a map, for [`load_world`].
pub fn process_env() -> HashMap<String, String> {
    std::env::vars().collect()
}
