pub mod benchmark;
pub mod cli;
pub mod dataprep;
pub mod error;
pub mod masking;
pub mod model;
pub mod numerics;
pub mod scoring;
pub mod training;

pub use error::{Error, Result};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(bytes))
}
