//! Published test vectors for the hash and signature primitives, read from
//! fixture files.

use dmas::crypto::{hash, sign, verify, Signature, SigningKeyPair, VerificationKey};

fn rows(text: &str) -> Vec<Vec<Vec<u8>>> {
    text.lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_whitespace()
                .map(|f| if f == "-" { Vec::new() } else { hex::decode(f).unwrap() })
                .collect()
        })
        .collect()
}

#[test]
fn sha256_published_vectors() {
    let vectors = rows(include_str!("fixtures/sha256_vectors.txt"));
    assert_eq!(vectors.len(), 3);
    for v in vectors {
        assert_eq!(hash(&v[0]).as_bytes().as_slice(), v[1].as_slice());
    }
}

#[test]
fn sha256_empty_input() {
    assert_eq!(
        hash(b"").to_string(),
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    );
}

#[test]
fn ed25519_published_vectors() {
    let vectors = rows(include_str!("fixtures/ed25519_vectors.txt"));
    assert_eq!(vectors.len(), 3);
    for v in vectors {
        let secret: [u8; 32] = v[0].clone().try_into().unwrap();
        let keys = SigningKeyPair::from_secret_bytes(&secret);
        assert_eq!(keys.public.0.as_slice(), v[1].as_slice());
        let sig = sign(&v[2], &keys);
        assert_eq!(sig.0.as_slice(), v[3].as_slice());
        let public = VerificationKey(v[1].clone().try_into().unwrap());
        let expected = Signature(v[3].clone().try_into().unwrap());
        assert!(verify(&v[2], &expected, &public));
    }
}
