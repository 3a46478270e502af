//! Transactions and their canonical byte form.
//!
//! Canonical layout: fixed field order, big-endian integers, `u32`-length
//! prefixed byte strings. The txid is the hash of the unsigned canonical form
//! and the signature covers exactly those bytes.

use crate::crypto::{
    self, hash, Address, Digest, SecretKey, Signature, ADDRESS_LEN, PUBLIC_KEY_LEN, SIGNATURE_LEN,
};

use super::LedgerError;

pub type TxId = [u8; 32];
/// Contracts are named by the txid of their deploy transaction.
pub type ContractId = TxId;

const TX_DOMAIN: &[u8; 5] = b"DSTX1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum TxKind {
    DeviceRegister = 1,
    CopyrightRegister = 2,
    CopyrightUpdate = 3,
    ContractDeploy = 4,
    ContractFund = 5,
    ContractConfirm = 6,
    ContractRefund = 7,
}

impl TxKind {
    fn from_code(c: u8) -> Option<Self> {
        use TxKind::*;
        Some(match c {
            1 => DeviceRegister,
            2 => CopyrightRegister,
            3 => CopyrightUpdate,
            4 => ContractDeploy,
            5 => ContractFund,
            6 => ContractConfirm,
            7 => ContractRefund,
            _ => return None,
        })
    }
}

/// `ctm`: the marker being transferred and both parties.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct CopyrightTransferMarker {
    pub prev_txid: TxId,
    pub seller: Address,
    pub buyer: Address,
}

impl CopyrightTransferMarker {
    pub const ENCODED_LEN: usize = 32 + 2 * ADDRESS_LEN;

    pub fn to_bytes(&self) -> [u8; Self::ENCODED_LEN] {
        let mut out = [0u8; Self::ENCODED_LEN];
        out[..32].copy_from_slice(&self.prev_txid);
        out[32..52].copy_from_slice(&self.seller.0);
        out[52..].copy_from_slice(&self.buyer.0);
        out
    }

    /// The value the seller signs to produce the watermark.
    pub fn digest(&self) -> Digest {
        hash(&self.to_bytes())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EscrowTerms {
    pub seller: Address,
    pub buyer: Address,
    /// Marker txid whose copyright is for sale.
    pub marker: TxId,
    pub price: u64,
    pub pay_deadline: u64,
    pub deliver_deadline: u64,
    pub confirm_deadline: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DeviceStatus {
    Active = 0,
    Revoked = 1,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Payload {
    DeviceRegister {
        id: String,
        pk: [u8; PUBLIC_KEY_LEN],
        status: DeviceStatus,
    },
    CopyrightRegister {
        digest: Digest,
        holder: Address,
    },
    CopyrightUpdate {
        new_digest: Digest,
        ctm: CopyrightTransferMarker,
        contract: ContractId,
    },
    ContractDeploy(EscrowTerms),
    ContractFund {
        contract: ContractId,
        amount: u64,
    },
    ContractConfirm {
        contract: ContractId,
    },
    ContractRefund {
        contract: ContractId,
    },
}

impl Payload {
    pub fn kind(&self) -> TxKind {
        match self {
            Payload::DeviceRegister { .. } => TxKind::DeviceRegister,
            Payload::CopyrightRegister { .. } => TxKind::CopyrightRegister,
            Payload::CopyrightUpdate { .. } => TxKind::CopyrightUpdate,
            Payload::ContractDeploy(_) => TxKind::ContractDeploy,
            Payload::ContractFund { .. } => TxKind::ContractFund,
            Payload::ContractConfirm { .. } => TxKind::ContractConfirm,
            Payload::ContractRefund { .. } => TxKind::ContractRefund,
        }
    }

    fn encode_into(&self, out: &mut Vec<u8>) {
        match self {
            Payload::DeviceRegister { id, pk, status } => {
                put_bytes(out, id.as_bytes());
                out.extend_from_slice(pk);
                out.push(*status as u8);
            }
            Payload::CopyrightRegister { digest, holder } => {
                out.extend_from_slice(digest);
                out.extend_from_slice(&holder.0);
            }
            Payload::CopyrightUpdate {
                new_digest,
                ctm,
                contract,
            } => {
                out.extend_from_slice(new_digest);
                out.extend_from_slice(&ctm.to_bytes());
                out.extend_from_slice(contract);
            }
            Payload::ContractDeploy(t) => {
                out.extend_from_slice(&t.seller.0);
                out.extend_from_slice(&t.buyer.0);
                out.extend_from_slice(&t.marker);
                for v in [
                    t.price,
                    t.pay_deadline,
                    t.deliver_deadline,
                    t.confirm_deadline,
                ] {
                    out.extend_from_slice(&v.to_be_bytes());
                }
            }
            Payload::ContractFund { contract, amount } => {
                out.extend_from_slice(contract);
                out.extend_from_slice(&amount.to_be_bytes());
            }
            Payload::ContractConfirm { contract } | Payload::ContractRefund { contract } => {
                out.extend_from_slice(contract);
            }
        }
    }

    fn decode(kind: TxKind, r: &mut Reader<'_>) -> Result<Self, LedgerError> {
        Ok(match kind {
            TxKind::DeviceRegister => {
                let id = String::from_utf8(r.bytes()?.to_vec())
                    .map_err(|_| LedgerError::Malformed("device id is not UTF-8"))?;
                let pk = r.array()?;
                let status = match r.u8()? {
                    0 => DeviceStatus::Active,
                    1 => DeviceStatus::Revoked,
                    _ => return Err(LedgerError::Malformed("device status")),
                };
                Payload::DeviceRegister { id, pk, status }
            }
            TxKind::CopyrightRegister => Payload::CopyrightRegister {
                digest: r.array()?,
                holder: Address(r.array()?),
            },
            TxKind::CopyrightUpdate => Payload::CopyrightUpdate {
                new_digest: r.array()?,
                ctm: CopyrightTransferMarker {
                    prev_txid: r.array()?,
                    seller: Address(r.array()?),
                    buyer: Address(r.array()?),
                },
                contract: r.array()?,
            },
            TxKind::ContractDeploy => Payload::ContractDeploy(EscrowTerms {
                seller: Address(r.array()?),
                buyer: Address(r.array()?),
                marker: r.array()?,
                price: r.u64()?,
                pay_deadline: r.u64()?,
                deliver_deadline: r.u64()?,
                confirm_deadline: r.u64()?,
            }),
            TxKind::ContractFund => Payload::ContractFund {
                contract: r.array()?,
                amount: r.u64()?,
            },
            TxKind::ContractConfirm => Payload::ContractConfirm {
                contract: r.array()?,
            },
            TxKind::ContractRefund => Payload::ContractRefund {
                contract: r.array()?,
            },
        })
    }
}

/// A transaction before signing; the signer signs [`UnsignedTx::signing_bytes`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UnsignedTx {
    pub payload: Payload,
    pub sender: Address,
    pub timestamp: u64,
}

impl UnsignedTx {
    pub fn new(payload: Payload, sender: Address, timestamp: u64) -> Self {
        Self {
            payload,
            sender,
            timestamp,
        }
    }

    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(128);
        out.extend_from_slice(TX_DOMAIN);
        out.push(self.payload.kind() as u8);
        out.extend_from_slice(&self.sender.0);
        out.extend_from_slice(&self.timestamp.to_be_bytes());
        self.payload.encode_into(&mut out);
        out
    }

    pub fn txid(&self) -> TxId {
        hash(&self.signing_bytes())
    }

    pub fn with_signature(self, signature: Signature) -> Transaction {
        Transaction {
            body: self,
            signature,
        }
    }

    pub fn sign(self, sk: &SecretKey) -> Transaction {
        let sig = crypto::sign(sk, &self.signing_bytes()).expect("signing bytes are never empty");
        self.with_signature(sig)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Transaction {
    pub body: UnsignedTx,
    pub signature: Signature,
}

impl Transaction {
    /// Convenience for callers holding the key in the clear.
    pub fn signed(payload: Payload, sk: &SecretKey, timestamp: u64) -> Self {
        UnsignedTx::new(payload, sk.public_key().address(), timestamp).sign(sk)
    }

    pub fn txid(&self) -> TxId {
        self.body.txid()
    }

    pub fn kind(&self) -> TxKind {
        self.body.payload.kind()
    }

    pub fn sender(&self) -> Address {
        self.body.sender
    }

    pub fn payload(&self) -> &Payload {
        &self.body.payload
    }

    /// Canonical form followed by the 64-byte signature.
    pub fn encode(&self) -> Vec<u8> {
        let mut out = self.body.signing_bytes();
        out.extend_from_slice(self.signature.as_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, LedgerError> {
        let mut r = Reader::new(bytes);
        if r.take(TX_DOMAIN.len())? != TX_DOMAIN {
            return Err(LedgerError::Malformed("transaction domain tag"));
        }
        let kind = TxKind::from_code(r.u8()?).ok_or(LedgerError::Malformed("transaction kind"))?;
        let sender = Address(r.array()?);
        let timestamp = r.u64()?;
        let payload = Payload::decode(kind, &mut r)?;
        let signature =
            Signature::from_bytes(r.take(SIGNATURE_LEN)?).map_err(|_| LedgerError::BadSignature)?;
        r.finish()?;
        Ok(Transaction {
            body: UnsignedTx {
                payload,
                sender,
                timestamp,
            },
            signature,
        })
    }
}

pub(crate) fn put_bytes(out: &mut Vec<u8>, b: &[u8]) {
    out.extend_from_slice(&(b.len() as u32).to_be_bytes());
    out.extend_from_slice(b);
}

pub(crate) struct Reader<'a>(&'a [u8]);

impl<'a> Reader<'a> {
    pub(crate) fn new(b: &'a [u8]) -> Self {
        Self(b)
    }

    pub(crate) fn take(&mut self, n: usize) -> Result<&'a [u8], LedgerError> {
        if self.0.len() < n {
            return Err(LedgerError::Malformed("truncated record"));
        }
        let (h, t) = self.0.split_at(n);
        self.0 = t;
        Ok(h)
    }

    pub(crate) fn array<const N: usize>(&mut self) -> Result<[u8; N], LedgerError> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub(crate) fn u8(&mut self) -> Result<u8, LedgerError> {
        Ok(self.take(1)?[0])
    }

    pub(crate) fn u32(&mut self) -> Result<u32, LedgerError> {
        Ok(u32::from_be_bytes(self.array()?))
    }

    pub(crate) fn u64(&mut self) -> Result<u64, LedgerError> {
        Ok(u64::from_be_bytes(self.array()?))
    }

    pub(crate) fn bytes(&mut self) -> Result<&'a [u8], LedgerError> {
        let n = self.u32()? as usize;
        self.take(n)
    }

    pub(crate) fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub(crate) fn finish(self) -> Result<(), LedgerError> {
        if self.0.is_empty() {
            Ok(())
        } else {
            Err(LedgerError::Malformed("trailing bytes"))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::keygen;
    use proptest::prelude::*;

    fn arb_payload() -> impl Strategy<Value = Payload> {
        let a32 = any::<[u8; 32]>();
        let addr = any::<[u8; 20]>().prop_map(Address);
        prop_oneof![
            ("[a-z0-9-]{0,16}", any::<bool>()).prop_map(|(id, revoked)| Payload::DeviceRegister {
                id,
                pk: keygen(1).pk.to_bytes(),
                status: if revoked {
                    DeviceStatus::Revoked
                } else {
                    DeviceStatus::Active
                },
            }),
            (a32, addr.clone())
                .prop_map(|(digest, holder)| Payload::CopyrightRegister { digest, holder }),
            (a32, a32, addr.clone(), addr.clone(), a32).prop_map(|(d, p, s, b, c)| {
                Payload::CopyrightUpdate {
                    new_digest: d,
                    ctm: CopyrightTransferMarker {
                        prev_txid: p,
                        seller: s,
                        buyer: b,
                    },
                    contract: c,
                }
            }),
            (addr.clone(), addr, a32, any::<[u64; 4]>()).prop_map(|(s, b, m, v)| {
                Payload::ContractDeploy(EscrowTerms {
                    seller: s,
                    buyer: b,
                    marker: m,
                    price: v[0],
                    pay_deadline: v[1],
                    deliver_deadline: v[2],
                    confirm_deadline: v[3],
                })
            }),
            (a32, any::<u64>())
                .prop_map(|(contract, amount)| Payload::ContractFund { contract, amount }),
            a32.prop_map(|contract| Payload::ContractConfirm { contract }),
            a32.prop_map(|contract| Payload::ContractRefund { contract }),
        ]
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(payload in arb_payload(), ts in any::<u64>()) {
            let tx = Transaction::signed(payload, &keygen(9).sk, ts);
            let bytes = tx.encode();
            let back = Transaction::decode(&bytes).unwrap();
            prop_assert_eq!(back.txid(), tx.txid());
            prop_assert_eq!(back, tx);
            prop_assert!(Transaction::decode(&bytes[..bytes.len() - 1]).is_err());
        }
    }

    #[test]
    fn ctm_layout() {
        let ctm = CopyrightTransferMarker {
            prev_txid: [1; 32],
            seller: Address([2; 20]),
            buyer: Address([3; 20]),
        };
        let b = ctm.to_bytes();
        assert_eq!(b.len(), 72);
        assert_eq!(b[0], 1);
        assert_eq!(b[32], 2);
        assert_eq!(b[71], 3);
    }
}
