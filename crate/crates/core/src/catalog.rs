//! Species catalog: the known paramagnetic features of NbTiN-on-sapphire
//! resonators, shipped as JSON and loadable from user files.

use std::path::Path;

use crate::error::{Error, Result};
use crate::types::SpinSpecies;

const DEFAULT_CATALOG: &str = include_str!("../data/catalog.json");

/// Label of the optional faint line carried in the default catalog.
pub const OPTIONAL_FAINT_LINE: &str = "faint line g=3.3 (optional)";

/// Parse a JSON array of species.
pub fn parse_catalog(json: &str) -> serde_json::Result<Vec<SpinSpecies>> {
    serde_json::from_str(json)
}

/// The built-in catalog.
pub fn default_catalog() -> Vec<SpinSpecies> {
    parse_catalog(DEFAULT_CATALOG).expect("built-in catalog is valid")
}

/// Raw JSON of the built-in catalog.
pub fn default_catalog_json() -> &'static str {
    DEFAULT_CATALOG
}

pub fn load_catalog(path: impl AsRef<Path>) -> Result<Vec<SpinSpecies>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_catalog(&text).map_err(|source| Error::Json {
        path: path.to_path_buf(),
        source,
    })
}

/// First catalog entry with the given label.
pub fn find<'a>(catalog: &'a [SpinSpecies], label: &str) -> Option<&'a SpinSpecies> {
    catalog.iter().find(|s| s.label == label)
}
