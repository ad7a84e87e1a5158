use parking_lot::Mutex;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

/// Source of opaque identifiers (jti values, tickets, token strings).
///
/// Seeded generators make a whole federation run reproducible.
#[derive(Debug)]
pub struct IdGen(Mutex<ChaCha20Rng>);

impl IdGen {
    pub fn seeded(seed: u64) -> Self {
        IdGen(Mutex::new(ChaCha20Rng::seed_from_u64(seed)))
    }

    pub fn from_entropy() -> Self {
        IdGen(Mutex::new(ChaCha20Rng::from_entropy()))
    }

    /// `prefix` followed by 128 random bits in hex.
    pub fn next(&self, prefix: &str) -> String {
        let mut bytes = [0u8; 16];
        self.0.lock().fill_bytes(&mut bytes);
        let mut out = String::with_capacity(prefix.len() + 33);
        out.push_str(prefix);
        out.push('-');
        for b in bytes {
            out.push_str(&format!("{b:02x}"));
        }
        out
    }
}
