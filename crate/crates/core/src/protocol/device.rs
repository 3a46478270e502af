use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::crypto::{
    self, hash_parts, keygen_from_seed_bytes, Address, KeyPair, PublicKey, SealedBox, SecretKey,
    Signature,
};
use crate::ledger::{
    CopyrightTransferMarker, LedgerError, Payload, SecureDb, SecureDbRecord, Transaction,
    UnsignedTx,
};
use crate::puf::{
    response_for, unwrap_sk, wrap_sk, DeviceRecord, DeviceSecret, PufDevice, PufError, PufParams,
    SramPufModel, WrappedKey,
};
use crate::watermark::{embed, extract, EmbedConfig, Image24, LocationKey, Watermark};

use super::ProtocolError;

/// Power-ups a device tries before giving up on key reproduction.
pub const MAX_POWER_ONS: usize = 3;

/// 64-bit seed for `label` under `master`.
pub fn derive_seed(master: u64, label: &str) -> u64 {
    let h = hash_parts(&[b"DSSEED1", &master.to_be_bytes(), label.as_bytes()]);
    u64::from_be_bytes(h[..8].try_into().unwrap())
}

fn derive_seed32(master: u64, label: &str) -> [u8; 32] {
    hash_parts(&[b"DSSEED1", &master.to_be_bytes(), label.as_bytes()])
}

/// Every seed a simulated device needs.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DeviceSeeds {
    /// Silicon identity (SRAM ground truth).
    pub identity: u64,
    pub enroll: u64,
    pub noise: u64,
    pub key: [u8; 32],
    pub session: u64,
}

impl DeviceSeeds {
    pub fn derive(master: u64, name: &str) -> Self {
        Self {
            identity: derive_seed(master, &format!("device/{name}/identity")),
            enroll: derive_seed(master, &format!("device/{name}/enroll")),
            noise: derive_seed(master, &format!("device/{name}/noise")),
            key: derive_seed32(master, &format!("device/{name}/key")),
            session: derive_seed(master, &format!("device/{name}/session")),
        }
    }
}

/// Issues challenges and enrolls devices in the trusted setting.
pub struct Manufacturer {
    rng: ChaCha20Rng,
}

impl Manufacturer {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn challenge(&mut self) -> [u8; 32] {
        let mut c = [0u8; 32];
        self.rng.fill_bytes(&mut c);
        c
    }

    /// Enrolls with a fresh challenge.
    pub fn enroll(
        &mut self,
        id: &str,
        params: &PufParams,
        seeds: &DeviceSeeds,
        db: &mut SecureDb,
    ) -> Result<(Device, SecureDbRecord), ProtocolError> {
        let c = self.challenge();
        self.enroll_with_challenge(id, params, seeds, c, db)
    }

    pub fn enroll_with_challenge(
        &mut self,
        id: &str,
        params: &PufParams,
        seeds: &DeviceSeeds,
        challenge: [u8; 32],
        db: &mut SecureDb,
    ) -> Result<(Device, SecureDbRecord), ProtocolError> {
        if db.get(id).is_some() {
            return Err(LedgerError::AlreadyEnrolled.into());
        }
        let model = SramPufModel::new(id, seeds.identity, params);
        let (puf, secret) = PufDevice::enroll(model, params.repetition, seeds.enroll, seeds.noise)?;
        let record = SecureDbRecord {
            id: id.to_string(),
            challenge,
            response: response_for(&secret, &challenge),
        };
        db.insert(record.clone())?;
        let keys = keygen_from_seed_bytes(seeds.key);
        let wrapped = wrap_sk(&secret, &keys.sk);
        Ok((Device::new(puf, wrapped, keys.pk, seeds.session), record))
    }
}

/// A PUF-equipped party. The signing key exists in the clear only inside
/// [`Device::with_sk`]; location keys never leave the methods below except
/// sealed to a recipient.
pub struct Device {
    puf: PufDevice,
    wrapped: WrappedKey,
    pk: PublicKey,
    rng: ChaCha20Rng,
    issued: Vec<LocationKey>,
}

impl std::fmt::Debug for Device {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Device")
            .field("id", &self.id())
            .field("addr", &self.address())
            .finish_non_exhaustive()
    }
}

impl Device {
    fn new(puf: PufDevice, wrapped: WrappedKey, pk: PublicKey, session_seed: u64) -> Self {
        Self {
            puf,
            wrapped,
            pk,
            rng: ChaCha20Rng::seed_from_u64(session_seed),
            issued: Vec::new(),
        }
    }

    /// Rebuilds a device from its silicon and persisted record. The public
    /// key is recovered by one unwrap.
    pub fn restore(
        model: SramPufModel,
        record: DeviceRecord,
        noise_seed: u64,
        session_seed: u64,
    ) -> Result<Self, ProtocolError> {
        if model.device_id() != record.id {
            return Err(PufError::MalformedRecord("record id does not match device").into());
        }
        let mut puf = PufDevice::from_parts(model, record.helper, noise_seed);
        let secret = (0..MAX_POWER_ONS)
            .find_map(|_| puf.reproduce().ok())
            .ok_or(PufError::ReproductionFailed)?;
        let pk = unwrap_sk(&secret, &record.wrapped)?.public_key();
        Ok(Self::new(puf, record.wrapped, pk, session_seed))
    }

    pub fn record(&self) -> DeviceRecord {
        DeviceRecord {
            id: self.id().to_string(),
            helper: self.puf.helper().clone(),
            wrapped: self.wrapped.clone(),
        }
    }

    pub fn id(&self) -> &str {
        self.puf.id()
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.pk
    }

    pub fn address(&self) -> Address {
        self.pk.address()
    }

    /// Up to [`MAX_POWER_ONS`] power-ups; returns the secret and the number
    /// of power-ups used.
    pub fn reproduce(&mut self) -> Result<(DeviceSecret, usize), PufError> {
        for attempt in 1..=MAX_POWER_ONS {
            match self.puf.reproduce() {
                Ok(s) => return Ok((s, attempt)),
                Err(PufError::ReproductionFailed) => continue,
                Err(e) => return Err(e),
            }
        }
        Err(PufError::ReproductionFailed)
    }

    /// `r = Hash(gen(K_dev, c))`.
    pub fn respond(&mut self, challenge: &[u8; 32]) -> Result<[u8; 32], PufError> {
        Ok(response_for(&self.reproduce()?.0, challenge))
    }

    fn with_sk<T>(&mut self, f: impl FnOnce(&SecretKey) -> T) -> Result<T, ProtocolError> {
        let (secret, _) = self.reproduce()?;
        let sk = unwrap_sk(&secret, &self.wrapped)?;
        Ok(f(&sk))
    }

    pub fn random_bytes<const N: usize>(&mut self) -> [u8; N] {
        let mut b = [0u8; N];
        self.rng.fill_bytes(&mut b);
        b
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Fresh ephemeral key pair for a handshake.
    pub fn ephemeral(&mut self) -> KeyPair {
        keygen_from_seed_bytes(self.random_bytes())
    }

    pub fn sign_tx(
        &mut self,
        payload: Payload,
        timestamp: u64,
    ) -> Result<Transaction, ProtocolError> {
        let body = UnsignedTx::new(payload, self.address(), timestamp);
        self.with_sk(|sk| body.sign(sk))
    }

    /// Signature over `hash(ctm)`; this is the watermark payload.
    pub fn sign_ctm(&mut self, ctm: &CopyrightTransferMarker) -> Result<Signature, ProtocolError> {
        let msg = ctm.digest();
        self.with_sk(|sk| crypto::sign(sk, &msg))?
            .map_err(ProtocolError::from)
    }

    /// Embeds `sig` under fresh location-key seeds. The key stays inside the
    /// device; [`Device::seal_location_key`] releases it encrypted.
    pub fn embed_signature(
        &mut self,
        cover: &Image24,
        sig: &Signature,
    ) -> Result<(Image24, usize), ProtocolError> {
        let cfg = EmbedConfig::new(self.random_bytes(), self.next_u64());
        let (covered, lk) = embed(cover, &Watermark::from_signature(sig), &cfg)?;
        self.issued.push(lk);
        Ok((covered, self.issued.len() - 1))
    }

    pub fn seal_location_key(&mut self, handle: usize, recipient: &PublicKey) -> SealedBox {
        let lk = self.issued[handle].to_bytes();
        SealedBox::seal(recipient, &lk, self.random_bytes())
    }

    /// Opens the sealed key, extracts the watermark and checks it against
    /// `hash(ctm)` under `seller_pk`, all inside the device.
    pub fn verify_watermark(
        &mut self,
        covered: &Image24,
        sealed: &SealedBox,
        ctm: &CopyrightTransferMarker,
        seller_pk: &PublicKey,
    ) -> Result<(), ProtocolError> {
        let lk_bytes = self.with_sk(|sk| sealed.open(sk))??;
        let lk = LocationKey::from_bytes(&lk_bytes)?;
        let wm = extract(covered, &lk)?;
        let sig = wm.to_signature().ok_or(ProtocolError::WatermarkInvalid)?;
        if crypto::verify(seller_pk, &ctm.digest(), &sig) {
            Ok(())
        } else {
            Err(ProtocolError::WatermarkInvalid)
        }
    }

    /// Location keys this device has generated; used by transcript audits.
    pub fn issued_location_keys(&self) -> &[LocationKey] {
        &self.issued
    }
}
