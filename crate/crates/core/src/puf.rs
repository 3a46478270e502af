//! Simulated SRAM PUF with a repetition-code fuzzy extractor.
//!
//! A [`SramPufModel`] is the "silicon": a fixed vector of preferred power-up
//! values plus a per-cell read-noise probability. Readings go through the
//! code-offset construction in [`fe_gen`] / [`fe_rep`] to obtain a stable
//! 256-bit [`DeviceSecret`], which then keys the challenge-response function
//! and wraps the device's signing key.
//!
//! Helper data uses the syndrome form of the repetition code: the secret bit
//! of block `i` is the first enrolled bit of that block and the helper stores
//! every bit of the block XOR that value. Complementing a whole block of the
//! reading leaves the helper unchanged, so the helper never pins a secret bit.

use std::fmt;

use chacha20poly1305::aead::{Aead, KeyInit};
use chacha20poly1305::{ChaCha20Poly1305, Key, Nonce};
use hmac::{Hmac, Mac};
use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::{ChaCha20Rng, ChaCha8Rng};
use sha2::Sha256;

use crate::crypto::{hash_parts, SecretKey, NONCE_LEN};

pub const KEY_BITS: usize = 256;
pub const DEFAULT_N_PUF: usize = 4096;
pub const DEFAULT_REPETITION: usize = 15;
pub const SPARE_BITS: usize = 256;
pub const DEFAULT_FLIP_PROB: f64 = 0.10;
/// Whole-key reproduction failure the automatic repetition choice must not exceed.
pub const TARGET_KEY_FAILURE: f64 = 1e-6;
/// Power-ups the manufacturer majority-votes over when enrolling.
pub const ENROLLMENT_READS: usize = 31;
pub const HELPER_VERSION: u8 = 1;

const CHECK_LABEL: &[u8] = b"DSFE1-check";
const KEY_LABEL: &[u8] = b"DSFE1-key";
const GEN_LABEL: &[u8] = b"DSGEN1";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PufError {
    #[error("reading has {got} bits, expected {expected}")]
    WrongReadingLength { expected: usize, got: usize },
    #[error("key reproduction failed integrity check")]
    ReproductionFailed,
    #[error("key unwrap failed authentication")]
    AuthFailure,
    #[error("invalid PUF parameters: {0}")]
    InvalidParams(String),
    #[error("malformed device record: {0}")]
    MalformedRecord(&'static str),
}

/// Dense bit vector, one `bool` per cell.
#[derive(Clone, PartialEq, Eq, Default)]
pub struct Bits(Vec<bool>);

impl Bits {
    pub fn zeros(len: usize) -> Self {
        Self(vec![false; len])
    }

    pub fn from_bools(bits: Vec<bool>) -> Self {
        Self(bits)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, i: usize) -> bool {
        self.0[i]
    }

    pub fn set(&mut self, i: usize, v: bool) {
        self.0[i] = v;
    }

    pub fn flip(&mut self, i: usize) {
        self.0[i] = !self.0[i];
    }

    pub fn as_slice(&self) -> &[bool] {
        &self.0
    }

    pub fn hamming_distance(&self, other: &Bits) -> usize {
        assert_eq!(
            self.len(),
            other.len(),
            "hamming distance of unequal lengths"
        );
        self.0.iter().zip(&other.0).filter(|(a, b)| a != b).count()
    }

    /// MSB-first packing, zero-padded to a whole byte.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len().div_ceil(8)];
        for (i, &b) in self.0.iter().enumerate() {
            if b {
                out[i / 8] |= 0x80 >> (i % 8);
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], len: usize) -> Self {
        Self(
            (0..len)
                .map(|i| bytes[i / 8] & (0x80 >> (i % 8)) != 0)
                .collect(),
        )
    }
}

impl fmt::Debug for Bits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Bits[{}]", self.len())
    }
}

/// Fuzzy-extractor and simulation parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PufParams {
    pub n_puf: usize,
    pub repetition: usize,
    pub flip_prob: f64,
}

impl PufParams {
    /// Explicit repetition; `n_puf` is the larger of 4096 and the bits the
    /// code needs plus the spare block.
    pub fn new(repetition: usize, flip_prob: f64) -> Result<Self, PufError> {
        if repetition == 0 || repetition.is_multiple_of(2) {
            return Err(PufError::InvalidParams(format!(
                "repetition must be odd, got {repetition}"
            )));
        }
        if !(0.0..0.5).contains(&flip_prob) {
            return Err(PufError::InvalidParams(format!(
                "flip_prob must lie in [0, 0.5), got {flip_prob}"
            )));
        }
        let n_puf = DEFAULT_N_PUF.max(KEY_BITS * repetition + SPARE_BITS);
        Ok(Self {
            n_puf,
            repetition,
            flip_prob,
        })
    }

    /// Smallest odd repetition, starting from 15, whose predicted whole-key
    /// failure is at most [`TARGET_KEY_FAILURE`].
    pub fn auto(flip_prob: f64) -> Result<Self, PufError> {
        let mut params = Self::new(DEFAULT_REPETITION, flip_prob)?;
        while params.key_failure_probability() > TARGET_KEY_FAILURE {
            params = Self::new(params.repetition + 2, flip_prob)?;
        }
        Ok(params)
    }

    /// Probability that a reproduction cell disagrees with the enrolled
    /// (majority-voted) value.
    pub fn effective_error_rate(&self) -> f64 {
        let p = self.flip_prob;
        let q = binomial_upper_tail(ENROLLMENT_READS, ENROLLMENT_READS / 2 + 1, p);
        p * (1.0 - q) + q * (1.0 - p)
    }

    pub fn bit_failure_probability(&self) -> f64 {
        binomial_upper_tail(
            self.repetition,
            self.repetition / 2 + 1,
            self.effective_error_rate(),
        )
    }

    pub fn key_failure_probability(&self) -> f64 {
        let pb = self.bit_failure_probability();
        -(KEY_BITS as f64 * (-pb).ln_1p()).exp_m1()
    }
}

impl Default for PufParams {
    fn default() -> Self {
        Self::auto(DEFAULT_FLIP_PROB).expect("default flip probability is valid")
    }
}

/// `P(X >= k)` for `X ~ Binomial(n, p)`, summed in log space.
fn binomial_upper_tail(n: usize, k: usize, p: f64) -> f64 {
    if p == 0.0 {
        return if k == 0 { 1.0 } else { 0.0 };
    }
    let ln_choose = |n: usize, k: usize| -> f64 {
        (1..=k)
            .map(|i| ((n - k + i) as f64).ln() - (i as f64).ln())
            .sum()
    };
    (k..=n)
        .map(|i| (ln_choose(n, i) + i as f64 * p.ln() + (n - i) as f64 * (-p).ln_1p()).exp())
        .sum()
}

/// One simulated SRAM block. The ground truth never leaves this type.
#[derive(Clone)]
pub struct SramPufModel {
    device_id: String,
    ground_truth: Bits,
    flip_prob: f64,
}

impl SramPufModel {
    pub fn new(device_id: impl Into<String>, identity_seed: u64, params: &PufParams) -> Self {
        let mut rng = ChaCha20Rng::seed_from_u64(identity_seed);
        let ground_truth = Bits((0..params.n_puf).map(|_| rng.random::<bool>()).collect());
        Self {
            device_id: device_id.into(),
            ground_truth,
            flip_prob: params.flip_prob,
        }
    }

    pub fn device_id(&self) -> &str {
        &self.device_id
    }

    pub fn n_puf(&self) -> usize {
        self.ground_truth.len()
    }

    pub fn flip_prob(&self) -> f64 {
        self.flip_prob
    }

    /// A single power-up: each cell independently reads inverted with
    /// probability `flip_prob`, driven by `noise_seed`.
    pub fn power_on_read(&self, noise_seed: u64) -> Bits {
        let mut rng = ChaCha8Rng::seed_from_u64(noise_seed);
        let mut out = self.ground_truth.clone();
        if self.flip_prob > 0.0 {
            for bit in out.0.iter_mut() {
                if rng.random_bool(self.flip_prob) {
                    *bit = !*bit;
                }
            }
        }
        out
    }

    /// Per-cell majority over [`ENROLLMENT_READS`] power-ups.
    pub fn enrollment_read(&self, seed: u64) -> Bits {
        let mut counts = vec![0usize; self.n_puf()];
        let mut seeds = ChaCha8Rng::seed_from_u64(seed);
        for _ in 0..ENROLLMENT_READS {
            let r = self.power_on_read(seeds.next_u64());
            for (c, b) in counts.iter_mut().zip(r.as_slice()) {
                *c += usize::from(*b);
            }
        }
        Bits(
            counts
                .into_iter()
                .map(|c| c > ENROLLMENT_READS / 2)
                .collect(),
        )
    }

    #[cfg(test)]
    pub(crate) fn ground_truth(&self) -> &Bits {
        &self.ground_truth
    }
}

impl fmt::Debug for SramPufModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SramPufModel")
            .field("device_id", &self.device_id)
            .field("n_puf", &self.n_puf())
            .field("flip_prob", &self.flip_prob)
            .finish_non_exhaustive()
    }
}

/// Public helper data: the code-offset syndrome plus an integrity tag over
/// the decoded bits and the syndrome itself.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct HelperData {
    pub version: u8,
    pub repetition: usize,
    pub syndrome: Bits,
    pub check: [u8; 32],
}

#[derive(Clone, PartialEq, Eq)]
pub struct DeviceSecret {
    pub key: [u8; 32],
}

impl fmt::Debug for DeviceSecret {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str("DeviceSecret(..)")
    }
}

fn check_tag(decoded: &[u8], syndrome: &Bits) -> [u8; 32] {
    hash_parts(&[CHECK_LABEL, decoded, &syndrome.to_bytes()])
}

fn condition(decoded: &[u8]) -> DeviceSecret {
    DeviceSecret {
        key: hash_parts(&[KEY_LABEL, decoded]),
    }
}

pub fn fe_gen(reading: &Bits, repetition: usize) -> Result<(DeviceSecret, HelperData), PufError> {
    let needed = KEY_BITS * repetition;
    let expected = DEFAULT_N_PUF.max(needed + SPARE_BITS);
    if reading.len() != expected {
        return Err(PufError::WrongReadingLength {
            expected,
            got: reading.len(),
        });
    }
    let mut syndrome = Bits::zeros(reading.len());
    let mut secret_bits = Bits::zeros(KEY_BITS);
    for block in 0..KEY_BITS {
        let base = block * repetition;
        let s = reading.get(base);
        secret_bits.set(block, s);
        for j in 0..repetition {
            syndrome.set(base + j, reading.get(base + j) ^ s);
        }
    }
    let decoded = secret_bits.to_bytes();
    let helper = HelperData {
        version: HELPER_VERSION,
        repetition,
        check: check_tag(&decoded, &syndrome),
        syndrome,
    };
    Ok((condition(&decoded), helper))
}

/// Majority-decodes each block of `reading XOR syndrome`; the integrity tag
/// turns any mis-decode into [`PufError::ReproductionFailed`].
pub fn fe_rep(reading: &Bits, helper: &HelperData) -> Result<DeviceSecret, PufError> {
    if reading.len() != helper.syndrome.len() {
        return Err(PufError::WrongReadingLength {
            expected: helper.syndrome.len(),
            got: reading.len(),
        });
    }
    let r = helper.repetition;
    if r == 0 || KEY_BITS * r > reading.len() {
        return Err(PufError::ReproductionFailed);
    }
    let mut secret_bits = Bits::zeros(KEY_BITS);
    for block in 0..KEY_BITS {
        let base = block * r;
        let ones = (base..base + r)
            .filter(|&i| reading.get(i) ^ helper.syndrome.get(i))
            .count();
        secret_bits.set(block, 2 * ones > r);
    }
    let decoded = secret_bits.to_bytes();
    if check_tag(&decoded, &helper.syndrome) != helper.check {
        return Err(PufError::ReproductionFailed);
    }
    Ok(condition(&decoded))
}

type HmacSha256 = Hmac<Sha256>;

fn hmac(key: &[u8; 32], parts: &[&[u8]]) -> [u8; 32] {
    let mut mac = HmacSha256::new_from_slice(key).expect("HMAC accepts any key length");
    for p in parts {
        mac.update(p);
    }
    mac.finalize().into_bytes().into()
}

/// Keyed PRF of `input` under the device secret.
pub fn gen(secret: &DeviceSecret, input: &[u8; 32]) -> [u8; 32] {
    hmac(&secret.key, &[GEN_LABEL, input])
}

/// `r = Hash(gen(K_dev, c))`.
pub fn response_for(secret: &DeviceSecret, challenge: &[u8; 32]) -> [u8; 32] {
    crate::crypto::hash(&gen(secret, challenge))
}

/// The device signing key, sealed under a key derived from the PUF secret.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct WrappedKey {
    pub nonce: [u8; NONCE_LEN],
    pub ciphertext: Vec<u8>,
}

fn wrap_cipher(secret: &DeviceSecret) -> ChaCha20Poly1305 {
    let k = hmac(&secret.key, &[b"DSWRAP1-key"]);
    ChaCha20Poly1305::new(&Key::from(k))
}

/// Nonce is synthetic (derived from the key and plaintext), so wrapping is
/// deterministic and never reuses a nonce across distinct keys.
pub fn wrap_sk(secret: &DeviceSecret, sk: &SecretKey) -> WrappedKey {
    let sk_bytes = sk.to_bytes();
    let mut nonce = [0u8; NONCE_LEN];
    nonce.copy_from_slice(&hmac(&secret.key, &[b"DSWRAP1-nonce", &sk_bytes])[..NONCE_LEN]);
    let ciphertext = wrap_cipher(secret)
        .encrypt(&Nonce::from(nonce), sk_bytes.as_slice())
        .expect("in-memory AEAD cannot fail");
    WrappedKey { nonce, ciphertext }
}

pub fn unwrap_sk(secret: &DeviceSecret, wrapped: &WrappedKey) -> Result<SecretKey, PufError> {
    let pt = wrap_cipher(secret)
        .decrypt(&Nonce::from(wrapped.nonce), wrapped.ciphertext.as_slice())
        .map_err(|_| PufError::AuthFailure)?;
    SecretKey::from_bytes(&pt).map_err(|_| PufError::AuthFailure)
}

/// A PUF-equipped device after enrollment: the silicon, its public helper
/// data and a noise source that makes each power-up distinct.
#[derive(Clone, Debug)]
pub struct PufDevice {
    model: SramPufModel,
    helper: HelperData,
    noise: ChaCha8Rng,
}

impl PufDevice {
    /// Manufacturer-side enrollment from a majority-voted reading.
    pub fn enroll(
        model: SramPufModel,
        repetition: usize,
        enroll_seed: u64,
        noise_seed: u64,
    ) -> Result<(Self, DeviceSecret), PufError> {
        let reading = model.enrollment_read(enroll_seed);
        let (secret, helper) = fe_gen(&reading, repetition)?;
        Ok((Self::from_parts(model, helper, noise_seed), secret))
    }

    pub fn from_parts(model: SramPufModel, helper: HelperData, noise_seed: u64) -> Self {
        Self {
            model,
            helper,
            noise: ChaCha8Rng::seed_from_u64(noise_seed),
        }
    }

    pub fn id(&self) -> &str {
        self.model.device_id()
    }

    pub fn helper(&self) -> &HelperData {
        &self.helper
    }

    /// One power-up followed by reproduction.
    pub fn reproduce(&mut self) -> Result<DeviceSecret, PufError> {
        let reading = self.model.power_on_read(self.noise.next_u64());
        fe_rep(&reading, &self.helper)
    }

    pub fn respond(&mut self, challenge: &[u8; 32]) -> Result<[u8; 32], PufError> {
        Ok(response_for(&self.reproduce()?, challenge))
    }
}

/// Persistent device state. The ground truth is never part of it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeviceRecord {
    pub id: String,
    pub helper: HelperData,
    pub wrapped: WrappedKey,
}

pub const DEVICE_MAGIC: &[u8; 4] = b"DSPF";
pub const DEVICE_RECORD_VERSION: u8 = 1;

impl DeviceRecord {
    /// `"DSPF" | ver | u16 id_len | id | helper_ver | u16 rep | u32 bits |
    /// packed syndrome | check[32] | nonce[12] | u16 ct_len | ct`, big-endian.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(DEVICE_MAGIC);
        out.push(DEVICE_RECORD_VERSION);
        out.extend_from_slice(&(self.id.len() as u16).to_be_bytes());
        out.extend_from_slice(self.id.as_bytes());
        out.push(self.helper.version);
        out.extend_from_slice(&(self.helper.repetition as u16).to_be_bytes());
        out.extend_from_slice(&(self.helper.syndrome.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.helper.syndrome.to_bytes());
        out.extend_from_slice(&self.helper.check);
        out.extend_from_slice(&self.wrapped.nonce);
        out.extend_from_slice(&(self.wrapped.ciphertext.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.wrapped.ciphertext);
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, PufError> {
        let mut r = Reader(bytes);
        if r.take(4)? != DEVICE_MAGIC {
            return Err(PufError::MalformedRecord("bad magic"));
        }
        if r.u8()? != DEVICE_RECORD_VERSION {
            return Err(PufError::MalformedRecord("unsupported version"));
        }
        let id_len = r.u16()? as usize;
        let id = std::str::from_utf8(r.take(id_len)?)
            .map_err(|_| PufError::MalformedRecord("id is not UTF-8"))?
            .to_string();
        let version = r.u8()?;
        let repetition = r.u16()? as usize;
        let nbits = r.u32()? as usize;
        let syndrome = Bits::from_bytes(r.take(nbits.div_ceil(8))?, nbits);
        let check = r.take(32)?.try_into().expect("length checked");
        let nonce = r.take(NONCE_LEN)?.try_into().expect("length checked");
        let ct_len = r.u16()? as usize;
        let ciphertext = r.take(ct_len)?.to_vec();
        if !r.0.is_empty() {
            return Err(PufError::MalformedRecord("trailing bytes"));
        }
        Ok(Self {
            id,
            helper: HelperData {
                version,
                repetition,
                syndrome,
                check,
            },
            wrapped: WrappedKey { nonce, ciphertext },
        })
    }
}

struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], PufError> {
        if self.0.len() < n {
            return Err(PufError::MalformedRecord("truncated"));
        }
        let (head, tail) = self.0.split_at(n);
        self.0 = tail;
        Ok(head)
    }
    fn u8(&mut self) -> Result<u8, PufError> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16, PufError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }
    fn u32(&mut self) -> Result<u32, PufError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
}
