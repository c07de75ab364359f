//! Canonical byte encoding for every hashed or signed structure.
//!
//! A record is encoded as a set of named fields. Fields are emitted sorted by
//! name, each as `u32` name length, name bytes, `u64` value length, value
//! bytes (all lengths big-endian), preceded by a `u32` field count. Nested
//! records and lists are encoded to bytes first and stored as field values,
//! so the encoding is injective and independent of declaration order.

use std::collections::BTreeMap;

use crate::crypto::{hash, Digest};

/// Builder for one canonical record.
#[derive(Debug, Default, Clone)]
pub struct Canonical {
    fields: BTreeMap<&'static str, Vec<u8>>,
}

impl Canonical {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn bytes(mut self, name: &'static str, value: &[u8]) -> Self {
        let previous = self.fields.insert(name, value.to_vec());
        debug_assert!(previous.is_none(), "duplicate canonical field {name}");
        self
    }

    pub fn str(self, name: &'static str, value: &str) -> Self {
        self.bytes(name, value.as_bytes())
    }

    pub fn u64(self, name: &'static str, value: u64) -> Self {
        self.bytes(name, &value.to_be_bytes())
    }

    pub fn bool(self, name: &'static str, value: bool) -> Self {
        self.bytes(name, &[u8::from(value)])
    }

    pub fn nested(self, name: &'static str, value: Canonical) -> Self {
        self.bytes(name, &value.finish())
    }

    /// A list is a `u64` element count followed by length-prefixed elements.
    pub fn list<I, B>(self, name: &'static str, items: I) -> Self
    where
        I: IntoIterator<Item = B>,
        B: AsRef<[u8]>,
    {
        let mut out = Vec::new();
        let mut count = 0u64;
        let mut body = Vec::new();
        for item in items {
            let item = item.as_ref();
            body.extend_from_slice(&(item.len() as u64).to_be_bytes());
            body.extend_from_slice(item);
            count += 1;
        }
        out.extend_from_slice(&count.to_be_bytes());
        out.extend_from_slice(&body);
        self.bytes(name, &out)
    }

    pub fn finish(self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(&(self.fields.len() as u32).to_be_bytes());
        for (name, value) in self.fields {
            out.extend_from_slice(&(name.len() as u32).to_be_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(value.len() as u64).to_be_bytes());
            out.extend_from_slice(&value);
        }
        out
    }
}

/// Types with a canonical encoding.
pub trait CanonicalEncode {
    fn canonical(&self) -> Canonical;

    fn canonical_bytes(&self) -> Vec<u8> {
        self.canonical().finish()
    }

    fn canonical_digest(&self) -> Digest {
        hash(&self.canonical_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn field_order_does_not_matter() {
        let a = Canonical::new().u64("b", 2).str("a", "x").finish();
        let b = Canonical::new().str("a", "x").u64("b", 2).finish();
        assert_eq!(a, b);
    }

    #[test]
    fn length_prefixing_separates_boundaries() {
        let a = Canonical::new().str("a", "ab").str("b", "c").finish();
        let b = Canonical::new().str("a", "a").str("b", "bc").finish();
        assert_ne!(a, b);
        let l1 = Canonical::new().list("l", ["ab", "c"]).finish();
        let l2 = Canonical::new().list("l", ["a", "bc"]).finish();
        assert_ne!(l1, l2);
    }

    #[test]
    fn known_layout() {
        let enc = Canonical::new().bytes("k", &[7]).finish();
        assert_eq!(
            enc,
            vec![0, 0, 0, 1, 0, 0, 0, 1, b'k', 0, 0, 0, 0, 0, 0, 0, 1, 7]
        );
    }
}
