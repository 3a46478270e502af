//! Certification authority: the off-chain secure database of challenge
//! response pairs and the on-chain device registry it maintains.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::crypto::{KeyPair, PublicKey};

use super::tx::{DeviceStatus, Payload, Transaction};
use super::{Genesis, Ledger, LedgerError, RegistryEntry};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SecureDbRecord {
    pub id: String,
    pub challenge: [u8; 32],
    pub response: [u8; 32],
}

/// The `<c, r>` pair presented during identity registration.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChallengeTranscript {
    pub challenge: [u8; 32],
    pub response: [u8; 32],
}

#[derive(Serialize, Deserialize)]
struct RecordJson {
    id: String,
    challenge: String,
    response: String,
}

/// Write-once store keyed by device id.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct SecureDb {
    records: BTreeMap<String, SecureDbRecord>,
}

impl SecureDb {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, record: SecureDbRecord) -> Result<(), LedgerError> {
        if self.records.contains_key(&record.id) {
            return Err(LedgerError::AlreadyEnrolled);
        }
        self.records.insert(record.id.clone(), record);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&SecureDbRecord> {
        self.records.get(id)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// One JSON object per line, ordered by id.
    pub fn to_json_lines(&self) -> String {
        self.records
            .values()
            .map(|r| {
                let j = RecordJson {
                    id: r.id.clone(),
                    challenge: hex::encode(r.challenge),
                    response: hex::encode(r.response),
                };
                serde_json::to_string(&j).expect("plain struct serialises") + "\n"
            })
            .collect()
    }

    pub fn from_json_lines(text: &str) -> Result<Self, LedgerError> {
        let bad = |_| LedgerError::Malformed("secure database record");
        let mut db = Self::new();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let j: RecordJson = serde_json::from_str(line)
                .map_err(|_| LedgerError::Malformed("secure database record"))?;
            let mut challenge = [0u8; 32];
            let mut response = [0u8; 32];
            hex::decode_to_slice(&j.challenge, &mut challenge).map_err(bad)?;
            hex::decode_to_slice(&j.response, &mut response).map_err(bad)?;
            db.insert(SecureDbRecord {
                id: j.id,
                challenge,
                response,
            })?;
        }
        Ok(db)
    }
}

pub struct CertAuthority {
    keys: KeyPair,
    db: SecureDb,
}

impl CertAuthority {
    pub fn new(keys: KeyPair, db: SecureDb) -> Self {
        Self { keys, db }
    }

    pub fn public_key(&self) -> &PublicKey {
        &self.keys.pk
    }

    pub fn db(&self) -> &SecureDb {
        &self.db
    }

    pub fn db_mut(&mut self) -> &mut SecureDb {
        &mut self.db
    }

    pub fn genesis(&self, balances: BTreeMap<crate::crypto::Address, u64>) -> Genesis {
        Genesis {
            ca_pk: self.keys.pk,
            balances,
        }
    }

    /// Compares a presented pair with the manufacturing record.
    pub fn check_response(&self, id: &str, t: &ChallengeTranscript) -> Result<(), LedgerError> {
        let rec = self
            .db
            .get(id)
            .ok_or_else(|| LedgerError::UnknownId(id.to_string()))?;
        if rec.challenge != t.challenge || rec.response != t.response {
            return Err(LedgerError::ResponseMismatch);
        }
        Ok(())
    }

    pub fn register_device(
        &self,
        ledger: &mut Ledger,
        id: &str,
        pk: &PublicKey,
        transcript: &ChallengeTranscript,
    ) -> Result<RegistryEntry, LedgerError> {
        let tx = self.registration_tx(ledger, id, pk, transcript)?;
        ledger.submit(tx)?;
        Ok(ledger.registry_entry(id).expect("just registered").clone())
    }

    /// Checks the pair and builds the signed DeviceRegister transaction
    /// without submitting it.
    pub fn registration_tx(
        &self,
        ledger: &Ledger,
        id: &str,
        pk: &PublicKey,
        transcript: &ChallengeTranscript,
    ) -> Result<Transaction, LedgerError> {
        self.check_response(id, transcript)?;
        if ledger
            .registry_entry(id)
            .is_some_and(|e| e.status == DeviceStatus::Active)
        {
            return Err(LedgerError::AlreadyRegistered);
        }
        Ok(self.status_tx(ledger, id, pk, DeviceStatus::Active))
    }

    /// Flags a device as revoked; its transactions are rejected from then on.
    pub fn revoke_device(
        &self,
        ledger: &mut Ledger,
        id: &str,
    ) -> Result<RegistryEntry, LedgerError> {
        let pk = ledger
            .registry_entry(id)
            .ok_or_else(|| LedgerError::UnknownId(id.to_string()))?
            .pk;
        ledger.submit(self.status_tx(ledger, id, &pk, DeviceStatus::Revoked))?;
        Ok(ledger.registry_entry(id).expect("just revoked").clone())
    }

    fn status_tx(
        &self,
        ledger: &Ledger,
        id: &str,
        pk: &PublicKey,
        status: DeviceStatus,
    ) -> Transaction {
        let payload = Payload::DeviceRegister {
            id: id.to_string(),
            pk: pk.to_bytes(),
            status,
        };
        Transaction::signed(payload, &self.keys.sk, ledger.tick())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keygen;

    fn setup() -> (CertAuthority, Ledger) {
        let mut db = SecureDb::new();
        db.insert(SecureDbRecord {
            id: "dev-a".into(),
            challenge: [1; 32],
            response: [2; 32],
        })
        .unwrap();
        let ca = CertAuthority::new(keygen(100), db);
        let ledger = Ledger::new(ca.genesis(BTreeMap::new()));
        (ca, ledger)
    }

    #[test]
    fn matching_pair_registers_active_entry() {
        let (ca, mut ledger) = setup();
        let pk = keygen(1).pk;
        let t = ChallengeTranscript {
            challenge: [1; 32],
            response: [2; 32],
        };
        let e = ca.register_device(&mut ledger, "dev-a", &pk, &t).unwrap();
        assert_eq!(e.status, DeviceStatus::Active);
        assert_eq!(e.addr, pk.address());
        assert_eq!(ledger.height(), 1);
        assert_eq!(
            ca.register_device(&mut ledger, "dev-a", &pk, &t),
            Err(LedgerError::AlreadyRegistered)
        );
    }

    #[test]
    fn wrong_response_creates_no_entry() {
        let (ca, mut ledger) = setup();
        let t = ChallengeTranscript {
            challenge: [1; 32],
            response: [3; 32],
        };
        assert_eq!(
            ca.register_device(&mut ledger, "dev-a", &keygen(1).pk, &t),
            Err(LedgerError::ResponseMismatch)
        );
        let t = ChallengeTranscript {
            challenge: [9; 32],
            response: [2; 32],
        };
        assert_eq!(
            ca.register_device(&mut ledger, "dev-a", &keygen(1).pk, &t),
            Err(LedgerError::ResponseMismatch)
        );
        assert!(matches!(
            ca.register_device(&mut ledger, "dev-x", &keygen(1).pk, &t),
            Err(LedgerError::UnknownId(_))
        ));
        assert!(ledger.registry_entry("dev-a").is_none());
        assert_eq!(ledger.height(), 0);
    }

    #[test]
    fn device_register_from_non_ca_is_rejected() {
        let (_, mut ledger) = setup();
        let rogue = keygen(5);
        let tx = Transaction::signed(
            Payload::DeviceRegister {
                id: "dev-a".into(),
                pk: rogue.pk.to_bytes(),
                status: DeviceStatus::Active,
            },
            &rogue.sk,
            0,
        );
        assert!(matches!(
            ledger.submit(tx),
            Err(LedgerError::UnknownSender(_))
        ));
    }

    #[test]
    fn secure_db_is_write_once_and_round_trips() {
        let (ca, _) = setup();
        let mut db = ca.db().clone();
        assert_eq!(
            db.insert(SecureDbRecord {
                id: "dev-a".into(),
                challenge: [0; 32],
                response: [0; 32],
            }),
            Err(LedgerError::AlreadyEnrolled)
        );
        let text = db.to_json_lines();
        assert_eq!(SecureDb::from_json_lines(&text).unwrap(), db);
        assert!(SecureDb::from_json_lines("{\"id\":1}").is_err());
    }

    #[test]
    fn revoked_device_cannot_submit() {
        let (ca, mut ledger) = setup();
        let dev = keygen(1);
        let t = ChallengeTranscript {
            challenge: [1; 32],
            response: [2; 32],
        };
        ca.register_device(&mut ledger, "dev-a", &dev.pk, &t)
            .unwrap();
        ledger.register_copyright(&dev.sk, [7; 32]).unwrap();
        let e = ca.revoke_device(&mut ledger, "dev-a").unwrap();
        assert_eq!(e.status, DeviceStatus::Revoked);
        assert!(matches!(
            ledger.register_copyright(&dev.sk, [8; 32]),
            Err(LedgerError::UnknownSender(_))
        ));
    }
}
