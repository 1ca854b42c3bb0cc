pub mod data;
pub mod entropy;
pub mod sample;
pub mod sweep;
pub mod theory;
pub mod train;
pub mod weaken;

use std::path::Path;

use swg_core::dataset::{self, TokenGrid};
use swg_core::files::atomic_write;
use swg_core::toymodel::{self, ModelWeights};

use crate::args::require_file;
use crate::error::{CliError, CliResult};

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult {
    atomic_write(path, bytes).map_err(|e| CliError::file(path, e))
}

pub fn load_weights(flag: &str, path: &Path) -> CliResult<ModelWeights> {
    require_file(flag, path)?;
    toymodel::load_weights(path).map_err(|e| CliError::file(path, e))
}

pub fn load_corpus(flag: &str, path: &Path) -> CliResult<Vec<TokenGrid>> {
    require_file(flag, path)?;
    let file = std::fs::File::open(path).map_err(|e| CliError::file(path, e))?;
    dataset::read_corpus(std::io::BufReader::new(file)).map_err(|e| CliError::file(path, e))
}

pub fn corpus_bytes(grids: &[TokenGrid]) -> Vec<u8> {
    let mut out = Vec::new();
    dataset::write_corpus(&mut out, grids).expect("writing to memory");
    out
}
