//! Small shared helpers: stable hashing, seed derivation, atomic writes.

use std::fs;
use std::io;
use std::path::Path;

/// FNV-1a 64-bit hash. Stable across platforms and releases, unlike the
/// standard library's default hasher.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Derive a seed from a list of parts. Parts are length-prefixed so that
/// `["ab", "c"]` and `["a", "bc"]` hash differently.
pub fn stable_seed(parts: &[&str]) -> u64 {
    let mut buf = Vec::with_capacity(parts.iter().map(|p| p.len() + 8).sum());
    for p in parts {
        buf.extend_from_slice(&(p.len() as u64).to_le_bytes());
        buf.extend_from_slice(p.as_bytes());
    }
    fnv1a64(&buf)
}

/// Hex digest of a string, used for scripted-prompt keys and config hashes.
pub fn hex_digest(s: &str) -> String {
    // Two passes with different salts to widen the key to 128 bits.
    let a = fnv1a64(s.as_bytes());
    let b = fnv1a64(format!("digest-salt:{s}").as_bytes());
    format!("{a:016x}{b:016x}")
}

/// Write a file atomically via a temp sibling and rename.
pub fn atomic_write(path: &Path, content: &str) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, content)?;
    fs::rename(&tmp, path)?;
    Ok(())
}
