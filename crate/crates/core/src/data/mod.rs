//! Tokenizer, corpus loading and batching.

mod batch;
pub mod bpe;

use std::fs;
use std::path::Path;

pub use batch::{Batch, BatchIterator, EvalSet};
pub use bpe::{BpeVocab, BASE_VOCAB, SEP_CHAR, SEP_ID};

use crate::error::{Error, Result};

/// Reads a UTF-8 corpus file.
pub fn read_corpus(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let text = String::from_utf8(bytes)
        .map_err(|e| Error::Data(format!("{} is not valid UTF-8: {e}", path.display())))?;
    if text.is_empty() {
        return Err(Error::Data(format!("{} is empty", path.display())));
    }
    Ok(text)
}

/// Splits a token stream into training and validation parts, keeping the
/// last `val_fraction` for validation.
pub fn split_tokens(tokens: &[usize], val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    let cut = ((tokens.len() as f64) * (1.0 - val_fraction.clamp(0.0, 1.0))).round() as usize;
    (tokens[..cut].to_vec(), tokens[cut..].to_vec())
}
