//! Content hashing for replay checks.
//!
//! Trajectories record which model and schedule produced them; consumers
//! compare hashes instead of trusting file names, so a silent schedule or
//! weight mismatch surfaces as a provenance error instead of corrupt output.

use sha2::{Digest, Sha256};

use crate::schedule::Schedule;

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    let digest = h.finalize();
    let mut out = String::with_capacity(64);
    for b in digest {
        out.push_str(&format!("{b:02x}"));
    }
    out
}

/// Hash of the full sampling discretization, bit-level on the beta range.
pub fn schedule_hash(s: &Schedule) -> String {
    let mut canon = format!(
        "schedule:t={}:bs={:016x}:be={:016x}:steps=",
        s.t_train(),
        s.beta_start().to_bits(),
        s.beta_end().to_bits()
    );
    for t in s.sample_steps() {
        canon.push_str(&format!("{t},"));
    }
    sha256_hex(canon.as_bytes())
}
