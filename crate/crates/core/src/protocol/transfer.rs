//! Copyright transfer through escrow: deploy, pay, mark, deliver, verify,
//! settle. Any failure aborts the session and, once the relevant deadline
//! passes, refunds the buyer.

use serde::{Deserialize, Serialize};

use crate::crypto::{self, hash, keygen_from_seed_bytes, SealedBox};
use crate::ledger::{
    ContractId, ContractState, CopyrightTransferMarker, DeviceStatus, EscrowTerms, LedgerError,
    Payload, TxId,
};
use crate::watermark::{load_bmp, save_bmp, Image24};

use super::{Device, Env, Event, Message, MsgKind, ProtocolError};

/// Price and deadline windows, relative to the deploy tick.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Terms {
    pub price: u64,
    pub pay_window: u64,
    pub deliver_window: u64,
    pub confirm_window: u64,
}

impl Default for Terms {
    fn default() -> Self {
        Self {
            price: 30,
            pay_window: 4,
            deliver_window: 8,
            confirm_window: 12,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Stage {
    Negotiated,
    ContractDeployed,
    Paid,
    MarkerRecorded,
    Delivered,
    Verified,
    Settled,
    Aborted,
}

/// How the seller deviates from the protocol, if at all.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub enum SellerBehavior {
    #[default]
    Honest,
    /// Signs the transfer marker with a key that is not registered.
    ForgedKey,
    /// Records the watermarked digest but ships these bytes instead.
    DeliverSubstitute(Vec<u8>),
}

/// What travels off-chain from seller to buyer: the covered file in the
/// clear and the location key sealed to the buyer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DeliveryPackage {
    pub tx_u: TxId,
    pub covered: Vec<u8>,
    pub sealed_lk: SealedBox,
}

impl DeliveryPackage {
    fn into_message(self, from: &str, to: &str) -> Message {
        let mut plain = self.tx_u.to_vec();
        plain.extend_from_slice(&self.covered);
        Message::new(from, to, MsgKind::Delivery)
            .plain(plain)
            .sealed(self.sealed_lk.to_bytes())
    }

    fn from_message(m: &Message) -> Result<Self, ProtocolError> {
        let bad = || ProtocolError::MalformedMessage(m.kind);
        if m.plaintext.len() < 32 {
            return Err(bad());
        }
        Ok(Self {
            tx_u: m.plaintext[..32].try_into().unwrap(),
            covered: m.plaintext[32..].to_vec(),
            sealed_lk: SealedBox::from_bytes(&m.ciphertext).ok_or_else(bad)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TransferOutcome {
    pub session: u64,
    pub stage: Stage,
    /// Stage that was being attempted when the session aborted.
    pub failed_at: Option<Stage>,
    pub error: Option<ProtocolError>,
    pub contract: Option<ContractId>,
    pub tx_u: Option<TxId>,
    /// File bytes the buyer accepted.
    pub received: Option<Vec<u8>>,
    pub refunded: bool,
}

impl TransferOutcome {
    pub fn is_settled(&self) -> bool {
        self.stage == Stage::Settled
    }
}

struct Session {
    id: u64,
    reached: Option<Stage>,
    contract: Option<ContractId>,
    tx_u: Option<TxId>,
}

impl Session {
    fn reach(&mut self, env: &mut Env, stage: Stage) {
        self.reached = Some(stage);
        env.bus.record(Event::Stage {
            session: self.id,
            stage: format!("{stage:?}"),
        });
    }

    fn attempting(&self) -> Stage {
        match self.reached {
            None => Stage::Negotiated,
            Some(Stage::Negotiated) => Stage::ContractDeployed,
            Some(Stage::ContractDeployed) => Stage::Paid,
            Some(Stage::Paid) => Stage::MarkerRecorded,
            Some(Stage::MarkerRecorded) => Stage::Delivered,
            Some(Stage::Delivered) => Stage::Verified,
            Some(_) => Stage::Settled,
        }
    }
}

fn deliver(env: &mut Env, msg: Message) -> Result<Message, ProtocolError> {
    let kind = msg.kind;
    env.bus
        .transmit(msg)
        .ok_or(ProtocolError::MessageLost(kind))
}

fn terms_bytes(marker: &TxId, t: &Terms) -> Vec<u8> {
    let mut b = marker.to_vec();
    for v in [t.price, t.pay_window, t.deliver_window, t.confirm_window] {
        b.extend_from_slice(&v.to_be_bytes());
    }
    b
}

/// Buyer-side acceptance check. Returns the covered image on success.
pub fn verify_received(
    env: &Env,
    buyer: &mut Device,
    package: &DeliveryPackage,
) -> Result<Image24, ProtocolError> {
    let tx = env
        .ledger
        .get_tx(&package.tx_u)
        .ok_or(LedgerError::UnknownMarker)?;
    let Payload::CopyrightUpdate {
        new_digest, ctm, ..
    } = tx.payload()
    else {
        return Err(LedgerError::UnknownMarker.into());
    };
    if ctm.buyer != buyer.address() {
        return Err(LedgerError::ContractMismatch.into());
    }
    if hash(&package.covered) != *new_digest {
        return Err(ProtocolError::HashMismatch);
    }
    let img = load_bmp(&package.covered)?;
    let seller_pk = env
        .ledger
        .entry_by_addr(&ctm.seller)
        .filter(|e| e.status == DeviceStatus::Active)
        .ok_or(LedgerError::UnknownParty(ctm.seller))?
        .pk;
    match buyer.verify_watermark(&img, &package.sealed_lk, ctm, &seller_pk) {
        Ok(()) => Ok(img),
        Err(ProtocolError::Watermark(_)) => Err(ProtocolError::WatermarkInvalid),
        Err(e) => Err(e),
    }
}

/// Runs one session to Settled or Aborted. `file` is the seller's copy as
/// BMP bytes and must match the digest recorded for `marker`.
#[allow(clippy::too_many_arguments)]
pub fn run_transfer(
    env: &mut Env,
    session: u64,
    seller: &mut Device,
    buyer: &mut Device,
    marker: TxId,
    file: &[u8],
    terms: &Terms,
    behavior: &SellerBehavior,
) -> TransferOutcome {
    let mut s = Session {
        id: session,
        reached: None,
        contract: None,
        tx_u: None,
    };
    match drive(env, &mut s, seller, buyer, marker, file, terms, behavior) {
        Ok(received) => TransferOutcome {
            session,
            stage: Stage::Settled,
            failed_at: None,
            error: None,
            contract: s.contract,
            tx_u: s.tx_u,
            received: Some(received),
            refunded: false,
        },
        Err(e) => abort(env, s, seller, buyer, e),
    }
}

#[allow(clippy::too_many_arguments)]
fn drive(
    env: &mut Env,
    s: &mut Session,
    seller: &mut Device,
    buyer: &mut Device,
    marker: TxId,
    file: &[u8],
    terms: &Terms,
    behavior: &SellerBehavior,
) -> Result<Vec<u8>, ProtocolError> {
    let (sid, bid) = (seller.id().to_string(), buyer.id().to_string());

    // Seller only offers a file whose hash matches the marker it holds.
    let on_chain = env
        .ledger
        .marker(&marker)
        .ok_or(LedgerError::UnknownMarker)?;
    if hash(file) != on_chain.digest {
        return Err(ProtocolError::HashMismatch);
    }
    let cover = load_bmp(file)?;
    deliver(
        env,
        Message::new(&sid, &bid, MsgKind::TermsOffer).plain(terms_bytes(&marker, terms)),
    )?;
    s.reach(env, Stage::Negotiated);

    let now = env.ledger.tick();
    let escrow = EscrowTerms {
        seller: seller.address(),
        buyer: buyer.address(),
        marker,
        price: terms.price,
        pay_deadline: now + terms.pay_window,
        deliver_deadline: now + terms.deliver_window,
        confirm_deadline: now + terms.confirm_window,
    };
    let tx = seller.sign_tx(Payload::ContractDeploy(escrow), now)?;
    let contract = env.submit(tx)?;
    s.contract = Some(contract);
    deliver(
        env,
        Message::new(&sid, &bid, MsgKind::ContractNotice).plain(contract.to_vec()),
    )?;
    s.reach(env, Stage::ContractDeployed);

    if env.ledger.contract(&contract).map(|c| c.terms) != Some(escrow) {
        return Err(LedgerError::ContractMismatch.into());
    }
    let tx = buyer.sign_tx(
        Payload::ContractFund {
            contract,
            amount: terms.price,
        },
        env.ledger.tick(),
    )?;
    env.submit(tx)?;
    s.reach(env, Stage::Paid);

    let ctm = CopyrightTransferMarker {
        prev_txid: marker,
        seller: seller.address(),
        buyer: buyer.address(),
    };
    let sig = match behavior {
        SellerBehavior::ForgedKey => {
            let rogue = keygen_from_seed_bytes(seller.random_bytes());
            crypto::sign(&rogue.sk, &ctm.digest())?
        }
        _ => seller.sign_ctm(&ctm)?,
    };
    let (covered, lk_handle) = seller.embed_signature(&cover, &sig)?;
    let covered = save_bmp(&covered);
    let tx = seller.sign_tx(
        Payload::CopyrightUpdate {
            new_digest: hash(&covered),
            ctm,
            contract,
        },
        env.ledger.tick(),
    )?;
    let tx_u = env.submit(tx)?;
    s.tx_u = Some(tx_u);
    s.reach(env, Stage::MarkerRecorded);

    let shipped = match behavior {
        SellerBehavior::DeliverSubstitute(bytes) => bytes.clone(),
        _ => covered,
    };
    let package = DeliveryPackage {
        tx_u,
        covered: shipped,
        sealed_lk: seller.seal_location_key(lk_handle, buyer.public_key()),
    };
    let m = deliver(env, package.into_message(&sid, &bid))?;
    s.reach(env, Stage::Delivered);

    let package = DeliveryPackage::from_message(&m)?;
    verify_received(env, buyer, &package)?;
    s.reach(env, Stage::Verified);

    let tx = buyer.sign_tx(Payload::ContractConfirm { contract }, env.ledger.tick())?;
    env.submit(tx)?;
    env.bus
        .transmit(Message::new(&bid, &sid, MsgKind::Confirmation).plain(contract.to_vec()));
    s.reach(env, Stage::Settled);
    Ok(package.covered)
}

fn abort(
    env: &mut Env,
    s: Session,
    seller: &mut Device,
    buyer: &mut Device,
    error: ProtocolError,
) -> TransferOutcome {
    let failed_at = s.attempting();
    env.bus.record(Event::Stage {
        session: s.id,
        stage: format!("Aborted at {failed_at:?}: {error}"),
    });
    if failed_at >= Stage::Verified {
        env.bus.transmit(
            Message::new(buyer.id(), seller.id(), MsgKind::Cancellation)
                .plain(format!("transaction cancelled: {error}").into_bytes()),
        );
    }
    let mut refunded = false;
    if let Some(contract) = s.contract {
        refunded = refund_after_deadline(env, contract, seller, buyer);
    }
    TransferOutcome {
        session: s.id,
        stage: Stage::Aborted,
        failed_at: Some(failed_at),
        error: Some(error),
        contract: s.contract,
        tx_u: s.tx_u,
        received: None,
        refunded,
    }
}

/// Waits out the deadline guarding the contract's current state, then asks
/// the chain for a refund (buyer if it paid, otherwise seller).
fn refund_after_deadline(
    env: &mut Env,
    contract: ContractId,
    seller: &mut Device,
    buyer: &mut Device,
) -> bool {
    let Some(c) = env.ledger.contract(&contract) else {
        return false;
    };
    let Some(deadline) = c.refund_deadline() else {
        return false;
    };
    let caller = if c.state == ContractState::Deployed {
        seller
    } else {
        buyer
    };
    let result = env
        .advance_to(deadline + 1)
        .map_err(ProtocolError::from)
        .and_then(|_| caller.sign_tx(Payload::ContractRefund { contract }, env.ledger.tick()))
        .and_then(|tx| env.submit(tx).map_err(ProtocolError::from));
    if let Err(e) = &result {
        env.bus.record(Event::Note(format!("refund failed: {e}")));
    }
    result.is_ok()
}
