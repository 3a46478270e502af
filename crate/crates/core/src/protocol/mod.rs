//! End-to-end workflows between the manufacturer, the certification
//! authority and devices: enrollment, identity registration, copyright
//! transfer through escrow, buyer-side verification and resale.

pub mod bus;
mod device;
mod identity;
pub mod scenario;
mod transfer;

pub use bus::{Bus, Event, Fault, FaultAction, Leak, Message, MsgKind, Part, Transcript};
pub use device::{derive_seed, Device, DeviceSeeds, Manufacturer, MAX_POWER_ONS};
pub use identity::{register_identity, CaNode};
pub use transfer::{
    run_transfer, verify_received, DeliveryPackage, SellerBehavior, Stage, Terms, TransferOutcome,
};

use crate::crypto::CryptoError;
use crate::ledger::{Ledger, LedgerError, Transaction, TxId};
use crate::puf::PufError;
use crate::watermark::WatermarkError;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error(transparent)]
    Crypto(#[from] CryptoError),
    #[error(transparent)]
    Puf(#[from] PufError),
    #[error(transparent)]
    Watermark(#[from] WatermarkError),
    #[error(transparent)]
    Ledger(#[from] LedgerError),
    #[error("delivered file does not match the on-chain digest")]
    HashMismatch,
    #[error("embedded watermark does not verify under the seller's registered key")]
    WatermarkInvalid,
    #[error("{0:?} message lost in transit")]
    MessageLost(MsgKind),
    #[error("malformed {0:?} message")]
    MalformedMessage(MsgKind),
    #[error("invalid scenario: {0}")]
    Scenario(String),
}

/// Shared world state for one run: the chain and the transport.
#[derive(Debug)]
pub struct Env {
    pub ledger: Ledger,
    pub bus: Bus,
}

impl Env {
    pub fn new(ledger: Ledger, bus: Bus) -> Self {
        Self { ledger, bus }
    }

    /// Submits, logs the outcome, then advances one tick. Conservation is
    /// checked after every block.
    pub fn submit(&mut self, tx: Transaction) -> Result<TxId, LedgerError> {
        let bytes = tx.encode();
        let kind = format!("{:?}", tx.kind());
        match self.ledger.submit(tx) {
            Ok(txid) => {
                self.bus.record(Event::Ledger { txid, kind, bytes });
                self.ledger.check_conservation()?;
                self.ledger.advance(1);
                Ok(txid)
            }
            Err(e) => {
                self.bus
                    .record(Event::Note(format!("ledger rejected {kind}: {e}")));
                Err(e)
            }
        }
    }

    /// Moves the clock forward to `tick` (no-op if already past it).
    pub fn advance_to(&mut self, tick: u64) -> Result<(), LedgerError> {
        if tick > self.ledger.tick() {
            self.ledger.set_tick(tick)?;
        }
        self.ledger.check_conservation()
    }
}
