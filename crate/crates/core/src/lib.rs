//! Residual networks of residual networks: tensor engine, topology builder,
//! loss, training pipeline, aging-curve analysis and data handling.

pub mod aging;
pub mod arch;
pub mod data;
pub mod model;
pub mod objective;
pub mod plot;
pub mod tensor;
pub mod trainer;

/// SHA-256 of `bytes` as lowercase hex.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::Digest;
    hex::encode(sha2::Sha256::digest(bytes))
}
