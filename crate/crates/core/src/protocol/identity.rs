//! Device identity registration: ephemeral ECDH, challenge under AEAD,
//! PUF response under AEAD, CA check against the secure database.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::crypto::{
    aead_decrypt, aead_encrypt, ecdh_negotiate, keygen_from_seed_bytes, CryptoError, KeyPair,
    PublicKey, NONCE_LEN, PUBLIC_KEY_LEN,
};
use crate::ledger::{CertAuthority, ChallengeTranscript, RegistryEntry, SecureDb};

use super::{Device, Env, Message, MsgKind, ProtocolError};

pub const CA_NAME: &str = "CA";

/// The certification authority as a protocol party.
pub struct CaNode {
    pub authority: CertAuthority,
    rng: ChaCha20Rng,
}

impl CaNode {
    pub fn new(keys: KeyPair, db: SecureDb, seed: u64) -> Self {
        Self {
            authority: CertAuthority::new(keys, db),
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    fn random<const N: usize>(&mut self) -> [u8; N] {
        let mut b = [0u8; N];
        self.rng.fill_bytes(&mut b);
        b
    }
}

fn deliver(env: &mut Env, msg: Message) -> Result<Message, ProtocolError> {
    let kind = msg.kind;
    env.bus
        .transmit(msg)
        .ok_or(ProtocolError::MessageLost(kind))
}

fn cancel(env: &mut Env, to: &str, reason: &ProtocolError) {
    let notice = Message::new(CA_NAME, to, MsgKind::Cancellation)
        .plain(format!("registration cancelled: {reason}").into_bytes());
    env.bus.transmit(notice);
}

fn split<const N: usize>(b: &[u8], kind: MsgKind) -> Result<([u8; N], &[u8]), ProtocolError> {
    if b.len() < N {
        return Err(ProtocolError::MalformedMessage(kind));
    }
    Ok((b[..N].try_into().unwrap(), &b[N..]))
}

/// Runs one registration session. On any CA-side rejection a cancellation
/// notice is sent and the device must re-initiate.
pub fn register_identity(
    device: &mut Device,
    ca: &mut CaNode,
    env: &mut Env,
) -> Result<RegistryEntry, ProtocolError> {
    let id = device.id().to_string();

    // Device -> CA: id and ephemeral key.
    let eph_d = device.ephemeral();
    let mut hello = Vec::new();
    hello.extend_from_slice(&(id.len() as u16).to_be_bytes());
    hello.extend_from_slice(id.as_bytes());
    hello.extend_from_slice(&eph_d.pk.to_bytes());
    let m = deliver(
        env,
        Message::new(&id, CA_NAME, MsgKind::IdentityRequest).plain(hello),
    )?;

    // CA: look up the record, answer with its ephemeral key and E_k(c).
    let (len, rest) = split::<2>(&m.plaintext, m.kind)?;
    let len = u16::from_be_bytes(len) as usize;
    if rest.len() != len + PUBLIC_KEY_LEN {
        return Err(ProtocolError::MalformedMessage(m.kind));
    }
    let claimed_id = String::from_utf8(rest[..len].to_vec())
        .map_err(|_| ProtocolError::MalformedMessage(m.kind))?;
    let Some(record) = ca.authority.db().get(&claimed_id).cloned() else {
        let e = ProtocolError::Ledger(crate::ledger::LedgerError::UnknownId(claimed_id));
        cancel(env, &id, &e);
        return Err(e);
    };
    let eph_c = keygen_from_seed_bytes(ca.random());
    let k_ca = ecdh_negotiate(&eph_c.sk, &rest[len..])?;
    let nonce_c: [u8; NONCE_LEN] = ca.random();
    let mut reply = eph_c.pk.to_bytes().to_vec();
    reply.extend_from_slice(&nonce_c);
    let m = deliver(
        env,
        Message::new(CA_NAME, &id, MsgKind::HandshakeReply)
            .plain(reply)
            .sealed(aead_encrypt(&k_ca, &nonce_c, &record.challenge)),
    )?;

    // Device: decrypt c, answer E_k(r || pk).
    let (ca_pk, rest) = split::<PUBLIC_KEY_LEN>(&m.plaintext, m.kind)?;
    let nonce: [u8; NONCE_LEN] = rest
        .try_into()
        .map_err(|_| ProtocolError::MalformedMessage(m.kind))?;
    let k_dev = ecdh_negotiate(&eph_d.sk, &ca_pk)?;
    let c: [u8; 32] = aead_decrypt(&k_dev, &nonce, &m.ciphertext)?
        .try_into()
        .map_err(|_| ProtocolError::MalformedMessage(m.kind))?;
    let r = device.respond(&c)?;
    let mut body = r.to_vec();
    body.extend_from_slice(&device.public_key().to_bytes());
    let nonce_r: [u8; NONCE_LEN] = device.random_bytes();
    let m = deliver(
        env,
        Message::new(&id, CA_NAME, MsgKind::ChallengeResponse)
            .plain(nonce_r.to_vec())
            .sealed(aead_encrypt(&k_dev, &nonce_r, &body)),
    )?;

    // CA: decrypt under this session's key and check the pair.
    let outcome = (|| {
        let nonce: [u8; NONCE_LEN] = m
            .plaintext
            .as_slice()
            .try_into()
            .map_err(|_| ProtocolError::MalformedMessage(m.kind))?;
        let body = aead_decrypt(&k_ca, &nonce, &m.ciphertext)?;
        let (response, pk) = split::<32>(&body, m.kind)?;
        let pk = PublicKey::from_bytes(pk).map_err(|_| CryptoError::PointNotOnCurve)?;
        let t = ChallengeTranscript {
            challenge: record.challenge,
            response,
        };
        let tx = ca
            .authority
            .registration_tx(&env.ledger, &claimed_id, &pk, &t)?;
        Ok::<_, ProtocolError>(env.submit(tx)?)
    })();
    match outcome {
        Ok(txid) => {
            env.bus.transmit(
                Message::new(CA_NAME, &id, MsgKind::RegistrationAck).plain(txid.to_vec()),
            );
            Ok(env
                .ledger
                .registry_entry(&claimed_id)
                .expect("registered")
                .clone())
        }
        Err(e) => {
            cancel(env, &id, &e);
            Err(e)
        }
    }
}
