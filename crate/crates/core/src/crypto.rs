//! Curve keys, signatures, key agreement, hashing and authenticated encryption.
//!
//! Everything here is a pure function of its inputs. Encodings are fixed:
//! public keys are 33-byte compressed SEC1 points, signatures are 64-byte
//! `r || s` in low-s form, digests are SHA-256 and the AEAD is
//! ChaCha20-Poly1305 with 12-byte nonces.

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use p256::ecdsa::signature::{Signer, Verifier};
use p256::ecdsa::{SigningKey, VerifyingKey};
use p256::elliptic_curve::sec1::ToSec1Point;
use p256::{ProjectivePoint, PublicKey as CurvePoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use sha2::{Digest as _, Sha256};

pub const DIGEST_LEN: usize = 32;
pub const PUBLIC_KEY_LEN: usize = 33;
pub const SIGNATURE_LEN: usize = 64;
pub const ADDRESS_LEN: usize = 20;
pub const NONCE_LEN: usize = 12;

/// Domain separation prefix for the ECDH key derivation.
pub const KDF_PREFIX: &[u8] = b"DSKDF1";

pub type Digest = [u8; DIGEST_LEN];

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CryptoError {
    #[error("point is not on the curve")]
    PointNotOnCurve,
    #[error("invalid signature encoding")]
    InvalidSignatureEncoding,
    #[error("authentication failure")]
    AuthFailure,
    #[error("invalid secret scalar")]
    InvalidScalar,
    #[error("cannot sign an empty message")]
    EmptyMessage,
    #[error("unsupported curve `{0}`")]
    UnsupportedCurve(String),
}

pub fn hash(data: &[u8]) -> Digest {
    Sha256::digest(data).into()
}

/// Hashes the concatenation of `parts` without materializing it.
pub fn hash_parts(parts: &[&[u8]]) -> Digest {
    let mut h = Sha256::new();
    for p in parts {
        h.update(p);
    }
    h.finalize().into()
}

/// Domain parameters of a short Weierstrass curve `y^2 = x^3 + ax + b` over F_p,
/// big-endian encoded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CurveParams {
    pub name: &'static str,
    pub p: [u8; 32],
    pub a: [u8; 32],
    pub b: [u8; 32],
    pub n: [u8; 32],
    pub gx: [u8; 32],
    pub gy: [u8; 32],
}

const fn h32(s: &[u8; 64]) -> [u8; 32] {
    const fn nib(c: u8) -> u8 {
        match c {
            b'0'..=b'9' => c - b'0',
            b'a'..=b'f' => c - b'a' + 10,
            _ => panic!("bad hex"),
        }
    }
    let mut out = [0u8; 32];
    let mut i = 0;
    while i < 32 {
        out[i] = (nib(s[2 * i]) << 4) | nib(s[2 * i + 1]);
        i += 1;
    }
    out
}

/// NIST P-256 (secp256r1).
pub const P256: CurveParams = CurveParams {
    name: "P-256",
    p: h32(b"ffffffff00000001000000000000000000000000ffffffffffffffffffffffff"),
    a: h32(b"ffffffff00000001000000000000000000000000fffffffffffffffffffffffc"),
    b: h32(b"5ac635d8aa3a93e7b3ebbd55769886bc651d06b0cc53b0f63bce3c3e27d2604b"),
    n: h32(b"ffffffff00000000ffffffffffffffffbce6faada7179e84f3b9cac2fc632551"),
    gx: h32(b"6b17d1f2e12c4247f8bce6e563a440f277037d812deb33a0f4a13945d898c296"),
    gy: h32(b"4fe342e2fe1a7f9b8ee7eb4a7c0f9e162bce33576b315ececbb6406837bf51f5"),
};

/// Resolves a configured curve name. Only P-256 is backed by an implementation.
pub fn curve_by_name(name: &str) -> Result<&'static CurveParams, CryptoError> {
    match name.to_ascii_lowercase().as_str() {
        "p-256" | "p256" | "secp256r1" | "prime256v1" => Ok(&P256),
        _ => Err(CryptoError::UnsupportedCurve(name.to_string())),
    }
}

#[derive(Clone)]
pub struct SecretKey(SigningKey);

impl SecretKey {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        SigningKey::from_slice(bytes)
            .map(Self)
            .map_err(|_| CryptoError::InvalidScalar)
    }

    pub fn to_bytes(&self) -> [u8; 32] {
        self.0.to_bytes().into()
    }

    pub fn public_key(&self) -> PublicKey {
        PublicKey(CurvePoint::from(self.0.verifying_key()))
    }
}

impl fmt::Debug for SecretKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SecretKey(..)")
    }
}

impl PartialEq for SecretKey {
    fn eq(&self, other: &Self) -> bool {
        self.to_bytes() == other.to_bytes()
    }
}

impl Eq for SecretKey {}

#[derive(Clone, Copy, PartialEq, Eq)]
pub struct PublicKey(CurvePoint);

impl PublicKey {
    /// Decodes a SEC1 point (compressed or not), rejecting points off the curve.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        CurvePoint::from_sec1_bytes(bytes)
            .map(Self)
            .map_err(|_| CryptoError::PointNotOnCurve)
    }

    pub fn to_bytes(&self) -> [u8; PUBLIC_KEY_LEN] {
        let enc = self.0.to_sec1_point(true);
        let mut out = [0u8; PUBLIC_KEY_LEN];
        out.copy_from_slice(enc.as_bytes());
        out
    }

    pub fn address(&self) -> Address {
        let d = hash(&self.to_bytes());
        let mut a = [0u8; ADDRESS_LEN];
        a.copy_from_slice(&d[..ADDRESS_LEN]);
        Address(a)
    }

    fn verifying_key(&self) -> VerifyingKey {
        VerifyingKey::from(&self.0)
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({})", hex::encode(self.to_bytes()))
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyPair {
    pub sk: SecretKey,
    pub pk: PublicKey,
}

impl KeyPair {
    pub fn from_secret(sk: SecretKey) -> Self {
        let pk = sk.public_key();
        Self { sk, pk }
    }

    pub fn address(&self) -> Address {
        self.pk.address()
    }
}

/// Deterministic key generation: rejection-samples 32-byte strings from a
/// seeded ChaCha20 stream until one is a scalar in `[1, n-1]`.
pub fn keygen(seed: u64) -> KeyPair {
    keygen_from_rng(&mut ChaCha20Rng::seed_from_u64(seed))
}

pub fn keygen_from_seed_bytes(seed: [u8; 32]) -> KeyPair {
    keygen_from_rng(&mut ChaCha20Rng::from_seed(seed))
}

fn keygen_from_rng(rng: &mut impl Rng) -> KeyPair {
    loop {
        let mut bytes = [0u8; 32];
        rng.fill_bytes(&mut bytes);
        if let Ok(sk) = SecretKey::from_bytes(&bytes) {
            return KeyPair::from_secret(sk);
        }
    }
}

/// Blockchain address: the first 20 bytes of the hash of the compressed public key.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Address(pub [u8; ADDRESS_LEN]);

impl Address {
    pub fn from_hex(s: &str) -> Option<Self> {
        let bytes = hex::decode(s.strip_prefix("0x").unwrap_or(s)).ok()?;
        Some(Self(bytes.try_into().ok()?))
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "0x{}", hex::encode(self.0))
    }
}

impl fmt::Debug for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Display::fmt(self, f)
    }
}

/// ECDSA signature as `r || s`, each 32 bytes big-endian.
#[derive(Clone, Copy, PartialEq, Eq)]
pub struct Signature(pub [u8; SIGNATURE_LEN]);

impl Signature {
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CryptoError> {
        let arr: [u8; SIGNATURE_LEN] = bytes
            .try_into()
            .map_err(|_| CryptoError::InvalidSignatureEncoding)?;
        p256::ecdsa::Signature::from_slice(&arr)
            .map_err(|_| CryptoError::InvalidSignatureEncoding)?;
        Ok(Self(arr))
    }

    pub fn as_bytes(&self) -> &[u8; SIGNATURE_LEN] {
        &self.0
    }
}

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({})", hex::encode(self.0))
    }
}

/// Deterministic (RFC 6979) ECDSA over SHA-256, normalized to low-s.
pub fn sign(sk: &SecretKey, msg: &[u8]) -> Result<Signature, CryptoError> {
    if msg.is_empty() {
        return Err(CryptoError::EmptyMessage);
    }
    let sig: p256::ecdsa::Signature = sk.0.sign(msg);
    let sig = sig.normalize_s();
    let mut out = [0u8; SIGNATURE_LEN];
    out.copy_from_slice(&sig.to_bytes());
    Ok(Signature(out))
}

/// Accepts only canonical low-s signatures that verify over `msg`.
pub fn verify(pk: &PublicKey, msg: &[u8], sig: &Signature) -> bool {
    let Ok(parsed) = p256::ecdsa::Signature::from_slice(&sig.0) else {
        return false;
    };
    if parsed.normalize_s() != parsed {
        return false;
    }
    pk.verifying_key().verify(msg, &parsed).is_ok()
}

#[derive(Clone, PartialEq, Eq)]
pub struct SymmetricKey(pub [u8; 32]);

impl fmt::Debug for SymmetricKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("SymmetricKey(..)")
    }
}

/// `k = SHA-256("DSKDF1" || x(sk * peer))`.
pub fn ecdh_negotiate(sk: &SecretKey, peer: &[u8]) -> Result<SymmetricKey, CryptoError> {
    let peer = PublicKey::from_bytes(peer)?;
    Ok(ecdh_with(sk, &peer))
}

pub fn ecdh_with(sk: &SecretKey, peer: &PublicKey) -> SymmetricKey {
    let shared = (ProjectivePoint::from(*peer.0.as_affine()) * sk.0.as_nonzero_scalar().as_ref())
        .to_affine();
    let enc = shared.to_sec1_point(false);
    // Uncompressed SEC1: 0x04 || x || y.
    let x = &enc.as_bytes()[1..33];
    SymmetricKey(hash_parts(&[KDF_PREFIX, x]))
}

pub fn aead_encrypt(k: &SymmetricKey, nonce: &[u8; NONCE_LEN], plaintext: &[u8]) -> Vec<u8> {
    ChaCha20Poly1305::new(&Key::from(k.0))
        .encrypt(&Nonce::from(*nonce), plaintext)
        .expect("ChaCha20-Poly1305 encryption of an in-memory buffer cannot fail")
}

pub fn aead_decrypt(
    k: &SymmetricKey,
    nonce: &[u8; NONCE_LEN],
    ciphertext: &[u8],
) -> Result<Vec<u8>, CryptoError> {
    ChaCha20Poly1305::new(&Key::from(k.0))
        .decrypt(&Nonce::from(*nonce), ciphertext)
        .map_err(|_| CryptoError::AuthFailure)
}

/// Integrated encryption to a public key: an ephemeral ECDH exchange followed
/// by AEAD under the derived key.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SealedBox {
    pub ephemeral_pk: [u8; PUBLIC_KEY_LEN],
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
}

impl SealedBox {
    pub fn seal(recipient: &PublicKey, plaintext: &[u8], ephemeral_seed: [u8; 32]) -> Self {
        let eph = keygen_from_seed_bytes(ephemeral_seed);
        let k = ecdh_with(&eph.sk, recipient);
        let mut nonce = [0u8; NONCE_LEN];
        nonce.copy_from_slice(&hash_parts(&[b"DSBOX1", &ephemeral_seed])[..NONCE_LEN]);
        Self {
            ephemeral_pk: eph.pk.to_bytes(),
            nonce,
            ciphertext: aead_encrypt(&k, &nonce, plaintext),
        }
    }

    pub fn open(&self, sk: &SecretKey) -> Result<Vec<u8>, CryptoError> {
        let k = ecdh_negotiate(sk, &self.ephemeral_pk)?;
        aead_decrypt(&k, &self.nonce, &self.ciphertext)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(PUBLIC_KEY_LEN + NONCE_LEN + 4 + self.ciphertext.len());
        out.extend_from_slice(&self.ephemeral_pk);
        out.extend_from_slice(&self.nonce);
        out.extend_from_slice(&(self.ciphertext.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.ciphertext);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        let ephemeral_pk = bytes.get(..PUBLIC_KEY_LEN)?.try_into().ok()?;
        let rest = &bytes[PUBLIC_KEY_LEN..];
        let nonce = rest.get(..NONCE_LEN)?.try_into().ok()?;
        let rest = &rest[NONCE_LEN..];
        let len = u32::from_be_bytes(rest.get(..4)?.try_into().ok()?) as usize;
        let ciphertext = rest.get(4..)?;
        (ciphertext.len() == len).then(|| Self {
            ephemeral_pk,
            nonce,
            ciphertext: ciphertext.to_vec(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngExt;

    #[test]
    fn empty_input_hash_vector() {
        assert_eq!(
            hex::encode(hash(b"")),
            "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
        );
        assert_eq!(
            hex::encode(hash(b"abc")),
            "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad"
        );
    }

    #[test]
    fn hash_avalanche_is_near_half() {
        let mut rng = ChaCha20Rng::seed_from_u64(11);
        let mut total = 0u32;
        for _ in 0..100 {
            let mut msg = [0u8; 64];
            rng.fill_bytes(&mut msg);
            let before = hash(&msg);
            let bit = rng.random_range(0..512);
            msg[bit / 8] ^= 1 << (bit % 8);
            let after = hash(&msg);
            total += before
                .iter()
                .zip(after)
                .map(|(a, b)| (a ^ b).count_ones())
                .sum::<u32>();
        }
        let mean = f64::from(total) / 100.0 / 256.0;
        assert!((0.45..0.55).contains(&mean), "mean flipped fraction {mean}");
    }

    #[test]
    fn secret_one_maps_to_generator() {
        let mut one = [0u8; 32];
        one[31] = 1;
        let kp = KeyPair::from_secret(SecretKey::from_bytes(&one).unwrap());
        let mut g = [0u8; 33];
        g[0] = 0x02 | (P256.gy[31] & 1);
        g[1..].copy_from_slice(&P256.gx);
        assert_eq!(kp.pk.to_bytes(), g);
    }

    #[test]
    fn scalar_zero_and_order_rejected() {
        assert_eq!(
            SecretKey::from_bytes(&[0u8; 32]),
            Err(CryptoError::InvalidScalar)
        );
        assert_eq!(
            SecretKey::from_bytes(&P256.n),
            Err(CryptoError::InvalidScalar)
        );
    }

    #[test]
    fn signatures_are_deterministic_and_low_s() {
        let kp = keygen(3);
        let a = sign(&kp.sk, b"ctm").unwrap();
        let b = sign(&kp.sk, b"ctm").unwrap();
        assert_eq!(a, b);
        assert!(verify(&kp.pk, b"ctm", &a));
        assert_eq!(sign(&kp.sk, b""), Err(CryptoError::EmptyMessage));
    }

    #[test]
    fn high_s_form_is_rejected() {
        let kp = keygen(5);
        let sig = sign(&kp.sk, b"message").unwrap();
        let parsed = p256::ecdsa::Signature::from_slice(&sig.0).unwrap();
        let (r, s) = parsed.split_scalars();
        let high = p256::ecdsa::Signature::from_scalars(r.to_bytes(), (-*s).to_bytes()).unwrap();
        let high = Signature(high.to_bytes().into());
        assert_ne!(high, sig);
        assert!(!verify(&kp.pk, b"message", &high));
    }

    #[test]
    fn off_curve_peer_rejected() {
        let kp = keygen(1);
        // Generator x with y + 1: an uncompressed point that fails the curve equation.
        let mut bogus = vec![0x04];
        bogus.extend_from_slice(&P256.gx);
        let mut y = P256.gy;
        y[31] ^= 1;
        bogus.extend_from_slice(&y);
        assert_eq!(
            ecdh_negotiate(&kp.sk, &bogus),
            Err(CryptoError::PointNotOnCurve)
        );
    }

    #[test]
    fn sealed_box_round_trip_and_wrong_recipient() {
        let alice = keygen(10);
        let eve = keygen(11);
        let boxed = SealedBox::seal(&alice.pk, b"location key", [7u8; 32]);
        assert_eq!(boxed.open(&alice.sk).unwrap(), b"location key");
        assert_eq!(boxed.open(&eve.sk), Err(CryptoError::AuthFailure));
        assert_eq!(SealedBox::from_bytes(&boxed.to_bytes()).unwrap(), boxed);
    }

    #[test]
    fn curve_names() {
        assert_eq!(curve_by_name("P-256").unwrap().name, "P-256");
        assert!(matches!(
            curve_by_name("secp256k1"),
            Err(CryptoError::UnsupportedCurve(_))
        ));
    }

    fn big(b: &[u8]) -> num_bigint::BigUint {
        num_bigint::BigUint::from_bytes_be(b)
    }

    #[test]
    fn p256_parameters_and_doubling_by_hand() {
        use num_bigint::BigUint;
        let (p, a, b) = (big(&P256.p), big(&P256.a), big(&P256.b));
        let (gx, gy) = (big(&P256.gx), big(&P256.gy));
        assert_eq!(&a + BigUint::from(3u8), p);
        assert_eq!(
            gy.modpow(&2u8.into(), &p),
            (gx.modpow(&3u8.into(), &p) + &a * &gx + &b) % &p
        );

        // 2G from the tangent rule, inverses via Fermat.
        let inv = |v: &BigUint| v.modpow(&(&p - BigUint::from(2u8)), &p);
        let lambda = (BigUint::from(3u8) * &gx * &gx + &a) * inv(&(BigUint::from(2u8) * &gy)) % &p;
        let x2 = (&lambda * &lambda + BigUint::from(2u8) * (&p - &gx)) % &p;
        let y2 = (&lambda * ((&gx + &p - &x2) % &p) + (&p - &gy)) % &p;
        assert_eq!(
            hex::encode(x2.to_bytes_be()),
            "7cf27b188d034f7e8a52380304b51ac3c08969e277f21b35a60b48fc47669978"
        );

        let mut two = [0u8; 32];
        two[31] = 2;
        let pk = SecretKey::from_bytes(&two).unwrap().public_key().to_bytes();
        let parity = if y2.bit(0) { 0x03 } else { 0x02 };
        assert_eq!(pk[0], parity);
        assert_eq!(big(&pk[1..]), x2);
    }

    #[test]
    fn keygen_has_no_collisions() {
        let mut seen = std::collections::HashSet::new();
        for seed in 0..10_000u64 {
            assert!(seen.insert(keygen(seed).sk.to_bytes()), "seed {seed}");
        }
    }

    #[test]
    fn flipped_message_bit_rejects() {
        let kp = keygen(21);
        let mut rng = ChaCha20Rng::seed_from_u64(22);
        for _ in 0..100 {
            let mut msg = [0u8; 48];
            rng.fill_bytes(&mut msg);
            let sig = sign(&kp.sk, &msg).unwrap();
            let bit = rng.random_range(0..msg.len() * 8);
            msg[bit / 8] ^= 1 << (bit % 8);
            assert!(!verify(&kp.pk, &msg, &sig));
        }
    }

    #[test]
    fn ecdh_agrees_and_excludes_third_party() {
        let (a, b, c) = (keygen(31), keygen(32), keygen(33));
        let k = ecdh_with(&a.sk, &b.pk);
        assert_eq!(k, ecdh_negotiate(&b.sk, &a.pk.to_bytes()).unwrap());
        assert_ne!(k, ecdh_with(&c.sk, &a.pk));
        assert_ne!(k, ecdh_with(&c.sk, &b.pk));
    }

    #[test]
    fn aead_tamper_scan() {
        let k = SymmetricKey([9; 32]);
        let nonce = [4; NONCE_LEN];
        let ct = aead_encrypt(&k, &nonce, b"response bytes for the ca");
        assert_eq!(
            aead_decrypt(&k, &nonce, &ct).unwrap(),
            b"response bytes for the ca"
        );
        let mut rng = ChaCha20Rng::seed_from_u64(41);
        for _ in 0..100 {
            let mut bad = ct.clone();
            let i = rng.random_range(0..bad.len());
            bad[i] ^= 1 << rng.random_range(0..8);
            assert_eq!(
                aead_decrypt(&k, &nonce, &bad),
                Err(CryptoError::AuthFailure)
            );
        }
        assert_eq!(
            aead_decrypt(&k, &[5; NONCE_LEN], &ct),
            Err(CryptoError::AuthFailure)
        );
    }
}
