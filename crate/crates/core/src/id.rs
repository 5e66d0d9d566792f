use std::fmt;
use std::str::FromStr;

use rand::Rng;

pub const OBJECT_ID_LEN: usize = 20;

/// Opaque 20-byte object identifier; text form is 40 lowercase hex digits.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ObjectId([u8; OBJECT_ID_LEN]);

impl ObjectId {
    pub const fn from_bytes(bytes: [u8; OBJECT_ID_LEN]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; OBJECT_ID_LEN] {
        &self.0
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        let mut bytes = [0u8; OBJECT_ID_LEN];
        rng.fill(&mut bytes[..]);
        Self(bytes)
    }

    /// Deterministic id for tests and fixtures: `n` big-endian in the last
    /// eight bytes.
    pub fn from_u64(n: u64) -> Self {
        let mut bytes = [0u8; OBJECT_ID_LEN];
        bytes[OBJECT_ID_LEN - 8..].copy_from_slice(&n.to_be_bytes());
        Self(bytes)
    }
}

impl fmt::Display for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&hex::encode(self.0))
    }
}

impl fmt::Debug for ObjectId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ObjectId({self})")
    }
}

#[derive(Debug, thiserror::Error)]
#[error("object id must be 40 hex characters")]
pub struct ParseObjectIdError;

impl FromStr for ObjectId {
    type Err = ParseObjectIdError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut bytes = [0u8; OBJECT_ID_LEN];
        hex::decode_to_slice(s, &mut bytes).map_err(|_| ParseObjectIdError)?;
        Ok(Self(bytes))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_form_round_trips() {
        let id = ObjectId::from_bytes([0xab; 20]);
        let s = id.to_string();
        assert_eq!(s.len(), 40);
        assert_eq!(s, "ab".repeat(20));
        assert_eq!(s.parse::<ObjectId>().unwrap(), id);
        assert!("abc".parse::<ObjectId>().is_err());
        assert!("zz".repeat(20).parse::<ObjectId>().is_err());
    }

    #[test]
    fn ordering_is_bytewise() {
        assert!(ObjectId::from_u64(1) < ObjectId::from_u64(2));
        let mut hi = [0u8; 20];
        hi[0] = 1;
        assert!(ObjectId::from_u64(u64::MAX) < ObjectId::from_bytes(hi));
    }
}
