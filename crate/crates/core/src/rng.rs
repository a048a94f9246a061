//! Counter-based seeding. Every random stream is addressed by a key path
//! hashed together with the master seed, so a stream can be regenerated in
//! isolation (common random numbers across σ, z or method).

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::{Digest, Sha256};

/// One component of a stream key.
#[derive(Clone, Debug)]
pub enum KeyPart<'a> {
    Str(&'a str),
    Int(u64),
}

impl<'a> From<&'a str> for KeyPart<'a> {
    fn from(s: &'a str) -> Self {
        KeyPart::Str(s)
    }
}

impl From<u64> for KeyPart<'_> {
    fn from(v: u64) -> Self {
        KeyPart::Int(v)
    }
}

impl From<usize> for KeyPart<'_> {
    fn from(v: usize) -> Self {
        KeyPart::Int(v as u64)
    }
}

/// A stream address: master seed plus a path of labels.
#[derive(Clone, Debug)]
pub struct SeedKey {
    digest: [u8; 32],
}

impl SeedKey {
    pub fn new(master: u64) -> Self {
        let mut h = Sha256::new();
        h.update(b"gcdyn/v1");
        h.update(master.to_le_bytes());
        SeedKey {
            digest: h.finalize().into(),
        }
    }

    /// Derive a child key. Strings and integers are tagged so `"1"` and `1`
    /// address different streams.
    pub fn child<'a>(&self, part: impl Into<KeyPart<'a>>) -> Self {
        let mut h = Sha256::new();
        h.update(self.digest);
        match part.into() {
            KeyPart::Str(s) => {
                h.update([0u8]);
                h.update((s.len() as u64).to_le_bytes());
                h.update(s.as_bytes());
            }
            KeyPart::Int(v) => {
                h.update([1u8]);
                h.update(v.to_le_bytes());
            }
        }
        SeedKey {
            digest: h.finalize().into(),
        }
    }

    pub fn rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::from_seed(self.digest)
    }

    pub fn hex(&self) -> String {
        hex::encode(self.digest)
    }
}

/// Standard normal matrix filled in column-major order.
pub fn normal_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> DMatrix<f64> {
    let data: Vec<f64> = (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect();
    DMatrix::from_vec(rows, cols, data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn keys_are_deterministic_and_distinct() {
        let a = SeedKey::new(7).child("G").child(0usize);
        let b = SeedKey::new(7).child("G").child(0usize);
        let c = SeedKey::new(7).child("G").child(1usize);
        let d = SeedKey::new(7).child("0").child("G");
        assert_eq!(a.rng().next_u64(), b.rng().next_u64());
        assert_ne!(a.hex(), c.hex());
        assert_ne!(SeedKey::new(7).child("1").hex(), SeedKey::new(7).child(1u64).hex());
        assert_ne!(a.hex(), d.hex());
    }

    #[test]
    fn normal_matrix_moments() {
        let mut rng = SeedKey::new(1).rng();
        let z = normal_matrix(&mut rng, 200, 100);
        let mean = z.sum() / 20000.0;
        let var = z.iter().map(|x| x * x).sum::<f64>() / 20000.0;
        assert!(mean.abs() < 4.0 / 20000f64.sqrt());
        assert!((var - 1.0).abs() < 0.05);
    }
}
