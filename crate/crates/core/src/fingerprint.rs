//! Short content hashes used to tie fitted models to the data they saw.

use sha2::{Digest, Sha256};

#[derive(Default)]
pub struct Fingerprint {
    hasher: Sha256,
}

impl Fingerprint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn tag(&mut self, s: &str) -> &mut Self {
        self.hasher.update((s.len() as u64).to_le_bytes());
        self.hasher.update(s.as_bytes());
        self
    }

    pub fn floats(&mut self, xs: &[f64]) -> &mut Self {
        self.hasher.update((xs.len() as u64).to_le_bytes());
        for x in xs {
            self.hasher.update(x.to_le_bytes());
        }
        self
    }

    pub fn bytes(&mut self, xs: &[u8]) -> &mut Self {
        self.hasher.update((xs.len() as u64).to_le_bytes());
        self.hasher.update(xs);
        self
    }

    /// First 16 hex digits of the SHA-256 digest.
    pub fn finish(self) -> String {
        let digest = self.hasher.finalize();
        hex::encode(&digest[..8])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stable_and_sensitive() {
        let mut a = Fingerprint::new();
        a.floats(&[0.1, 0.2]).bytes(&[1, 0]);
        let mut b = Fingerprint::new();
        b.floats(&[0.1, 0.2]).bytes(&[1, 0]);
        let mut c = Fingerprint::new();
        c.floats(&[0.1, 0.2]).bytes(&[0, 1]);
        let (a, b, c) = (a.finish(), b.finish(), c.finish());
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 16);
    }
}
