//! Simulated single-node blockchain.
//!
//! Every accepted transaction is sealed into its own block at the current
//! logical tick. State (device registry, copyright markers, balances and
//! escrow contracts) is a pure function of the genesis record and the block
//! sequence, which is what the store replays on open.

pub mod escrow;
pub mod registry;
pub mod store;
pub mod tx;

use std::collections::{BTreeMap, HashMap};
use std::sync::{Arc, RwLock, RwLockReadGuard};

use crate::crypto::{self, hash, Address, Digest, PublicKey, SecretKey, PUBLIC_KEY_LEN};

pub use escrow::{ContractState, EscrowContract};
pub use registry::{CertAuthority, ChallengeTranscript, SecureDb, SecureDbRecord};
pub use store::{decode_ledger, encode_ledger, verify_file, LedgerStore, VerifyReport};
pub use tx::{
    ContractId, CopyrightTransferMarker, DeviceStatus, EscrowTerms, Payload, Transaction, TxId,
    TxKind, UnsignedTx,
};

use escrow::Balances;
use tx::Reader;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LedgerError {
    #[error("signature does not verify for sender")]
    BadSignature,
    #[error("sender {0} is not a registered active device")]
    UnknownSender(Address),
    #[error("party {0} is not a registered active device")]
    UnknownParty(Address),
    #[error("sender is not authorised for this action")]
    Unauthorized,
    #[error("duplicate transaction id")]
    DuplicateTx,
    #[error("file digest already registered")]
    DuplicateDigest,
    #[error("unknown copyright marker")]
    UnknownMarker,
    #[error("seller is not the current holder of the marker")]
    NotCurrentHolder,
    #[error("previous transfer of this marker has not settled")]
    PendingSettlement,
    #[error("unknown contract")]
    UnknownContract,
    #[error("transfer marker does not match the contract terms")]
    ContractMismatch,
    #[error("contract is in state {0}")]
    WrongContractState(ContractState),
    #[error("deadline {deadline} not reached at tick {tick}")]
    DeadlineNotReached { deadline: u64, tick: u64 },
    #[error("deadline passed")]
    DeadlinePassed,
    #[error("insufficient funds")]
    InsufficientFunds,
    #[error("amount {got} does not match price {expected}")]
    AmountMismatch { expected: u64, got: u64 },
    #[error("invalid contract terms: {0}")]
    InvalidTerms(&'static str),
    #[error("invalid public key")]
    InvalidPublicKey,
    #[error("challenge response does not match the secure database")]
    ResponseMismatch,
    #[error("unknown device id {0:?}")]
    UnknownId(String),
    #[error("device already registered")]
    AlreadyRegistered,
    #[error("device already enrolled")]
    AlreadyEnrolled,
    #[error("tick may not move backwards ({current} -> {requested})")]
    TickRegression { current: u64, requested: u64 },
    #[error("malformed record: {0}")]
    Malformed(&'static str),
    #[error("ledger corrupt: {0}")]
    Corrupt(String),
    #[error("token conservation violated: {actual} != {expected}")]
    ConservationViolated { expected: u128, actual: u128 },
    #[error("i/o: {0}")]
    Io(String),
}

const GENESIS_DOMAIN: &[u8; 5] = b"DSGN1";
const BLOCK_DOMAIN: &[u8; 6] = b"DSBLK1";

/// Initial state: the CA key that may register devices and the token supply.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Genesis {
    pub ca_pk: PublicKey,
    pub balances: BTreeMap<Address, u64>,
}

impl Genesis {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(GENESIS_DOMAIN);
        out.extend_from_slice(&self.ca_pk.to_bytes());
        out.extend_from_slice(&(self.balances.len() as u32).to_be_bytes());
        for (addr, bal) in &self.balances {
            out.extend_from_slice(&addr.0);
            out.extend_from_slice(&bal.to_be_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, LedgerError> {
        let mut r = Reader::new(bytes);
        if r.take(GENESIS_DOMAIN.len())? != GENESIS_DOMAIN {
            return Err(LedgerError::Malformed("genesis domain tag"));
        }
        let ca_pk = PublicKey::from_bytes(r.take(PUBLIC_KEY_LEN)?)
            .map_err(|_| LedgerError::InvalidPublicKey)?;
        let n = r.u32()? as usize;
        let mut balances = BTreeMap::new();
        let mut last: Option<Address> = None;
        for _ in 0..n {
            let addr = Address(r.array()?);
            if last.is_some_and(|l| l >= addr) {
                return Err(LedgerError::Malformed(
                    "genesis balances not in canonical order",
                ));
            }
            last = Some(addr);
            balances.insert(addr, r.u64()?);
        }
        r.finish()?;
        Ok(Self { ca_pk, balances })
    }

    pub fn hash(&self) -> Digest {
        hash(&self.encode())
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Block {
    pub height: u64,
    pub prev_hash: Digest,
    pub tick: u64,
    pub txids: Vec<TxId>,
    pub hash: Digest,
}

impl Block {
    pub fn compute_hash(height: u64, prev_hash: &Digest, tick: u64, txids: &[TxId]) -> Digest {
        let mut buf = Vec::with_capacity(64 + 32 * txids.len());
        buf.extend_from_slice(BLOCK_DOMAIN);
        buf.extend_from_slice(&height.to_be_bytes());
        buf.extend_from_slice(prev_hash);
        buf.extend_from_slice(&tick.to_be_bytes());
        buf.extend_from_slice(&(txids.len() as u32).to_be_bytes());
        for t in txids {
            buf.extend_from_slice(t);
        }
        hash(&buf)
    }

    pub(crate) fn encode_header(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.height.to_be_bytes());
        out.extend_from_slice(&self.prev_hash);
        out.extend_from_slice(&self.tick.to_be_bytes());
        out.extend_from_slice(&(self.txids.len() as u32).to_be_bytes());
        for t in &self.txids {
            out.extend_from_slice(t);
        }
        out.extend_from_slice(&self.hash);
    }

    pub(crate) fn decode_header(r: &mut Reader<'_>) -> Result<Self, LedgerError> {
        let height = r.u64()?;
        let prev_hash = r.array()?;
        let tick = r.u64()?;
        let n = r.u32()? as usize;
        let mut txids = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            txids.push(r.array()?);
        }
        Ok(Self {
            height,
            prev_hash,
            tick,
            txids,
            hash: r.array()?,
        })
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RegistryEntry {
    pub id: String,
    pub pk: PublicKey,
    pub addr: Address,
    pub status: DeviceStatus,
}

/// A TX_r or TX_u as seen by the chain index.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Marker {
    pub txid: TxId,
    pub digest: Digest,
    pub holder: Address,
    /// `None` for the registering TX_r.
    pub prev: Option<TxId>,
    pub root: TxId,
    /// Contract that produced this TX_u.
    pub contract: Option<ContractId>,
    /// Effective successor, if the marker has been transferred on.
    pub next: Option<TxId>,
    /// Set when the producing contract was refunded after delivery.
    pub voided: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TraceEntry {
    pub holder: Address,
    pub txid: TxId,
    pub digest: Digest,
}

#[derive(Clone, Debug)]
pub struct Ledger {
    genesis: Genesis,
    genesis_hash: Digest,
    ca_addr: Address,
    total_supply: u128,
    tick: u64,
    blocks: Vec<Block>,
    txs: Vec<Transaction>,
    tx_index: HashMap<TxId, usize>,
    registry: BTreeMap<String, RegistryEntry>,
    by_addr: HashMap<Address, String>,
    markers: HashMap<TxId, Marker>,
    heads: HashMap<TxId, TxId>,
    digests: HashMap<Digest, TxId>,
    balances: Balances,
    contracts: BTreeMap<ContractId, EscrowContract>,
}

impl Ledger {
    pub fn new(genesis: Genesis) -> Self {
        let total_supply = genesis.balances.values().map(|&v| u128::from(v)).sum();
        Self {
            genesis_hash: genesis.hash(),
            ca_addr: genesis.ca_pk.address(),
            balances: genesis.balances.clone(),
            genesis,
            total_supply,
            tick: 0,
            blocks: Vec::new(),
            txs: Vec::new(),
            tx_index: HashMap::new(),
            registry: BTreeMap::new(),
            by_addr: HashMap::new(),
            markers: HashMap::new(),
            heads: HashMap::new(),
            digests: HashMap::new(),
            contracts: BTreeMap::new(),
        }
    }

    pub fn genesis(&self) -> &Genesis {
        &self.genesis
    }

    pub fn tick(&self) -> u64 {
        self.tick
    }

    pub fn advance(&mut self, ticks: u64) {
        self.tick += ticks;
    }

    pub fn set_tick(&mut self, tick: u64) -> Result<(), LedgerError> {
        if tick < self.tick {
            return Err(LedgerError::TickRegression {
                current: self.tick,
                requested: tick,
            });
        }
        self.tick = tick;
        Ok(())
    }

    pub fn height(&self) -> u64 {
        self.blocks.len() as u64
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn transactions(&self) -> &[Transaction] {
        &self.txs
    }

    pub fn tip_hash(&self) -> Digest {
        self.blocks.last().map_or(self.genesis_hash, |b| b.hash)
    }

    pub fn get_tx(&self, txid: &TxId) -> Option<&Transaction> {
        self.tx_index.get(txid).map(|&i| &self.txs[i])
    }

    pub fn registry(&self) -> impl Iterator<Item = &RegistryEntry> {
        self.registry.values()
    }

    pub fn registry_entry(&self, id: &str) -> Option<&RegistryEntry> {
        self.registry.get(id)
    }

    pub fn entry_by_addr(&self, addr: &Address) -> Option<&RegistryEntry> {
        self.by_addr.get(addr).and_then(|id| self.registry.get(id))
    }

    fn active_pk(&self, addr: &Address) -> Option<&PublicKey> {
        self.entry_by_addr(addr)
            .filter(|e| e.status == DeviceStatus::Active && e.addr == *addr)
            .map(|e| &e.pk)
    }

    pub fn marker(&self, txid: &TxId) -> Option<&Marker> {
        self.markers.get(txid)
    }

    pub fn marker_by_digest(&self, digest: &Digest) -> Option<&Marker> {
        self.digests.get(digest).and_then(|t| self.markers.get(t))
    }

    /// Current holder of the chain containing `txid`.
    pub fn current_holder(&self, txid: &TxId) -> Option<Address> {
        let m = self.markers.get(txid)?;
        Some(self.markers[&self.heads[&m.root]].holder)
    }

    pub fn contract(&self, id: &ContractId) -> Option<&EscrowContract> {
        self.contracts.get(id)
    }

    pub fn contracts(&self) -> impl Iterator<Item = &EscrowContract> {
        self.contracts.values()
    }

    pub fn balance(&self, addr: &Address) -> u64 {
        self.balances.get(addr).copied().unwrap_or(0)
    }

    pub fn balances(&self) -> &BTreeMap<Address, u64> {
        &self.balances
    }

    pub fn total_supply(&self) -> u128 {
        self.total_supply
    }

    /// Accounts plus frozen contract balances must equal the genesis supply.
    pub fn check_conservation(&self) -> Result<(), LedgerError> {
        let actual: u128 = self.balances.values().map(|&v| u128::from(v)).sum::<u128>()
            + self
                .contracts
                .values()
                .map(|c| u128::from(c.balance))
                .sum::<u128>();
        if actual == self.total_supply {
            Ok(())
        } else {
            Err(LedgerError::ConservationViolated {
                expected: self.total_supply,
                actual,
            })
        }
    }

    /// Recomputes every block hash and link.
    pub fn verify_chain(&self) -> Result<(), LedgerError> {
        let mut prev = self.genesis_hash;
        for (h, b) in self.blocks.iter().enumerate() {
            if b.height != h as u64 || b.prev_hash != prev {
                return Err(LedgerError::Corrupt(format!("block {h} is not linked")));
            }
            if Block::compute_hash(b.height, &b.prev_hash, b.tick, &b.txids) != b.hash {
                return Err(LedgerError::Corrupt(format!("block {h} hash mismatch")));
            }
            prev = b.hash;
        }
        Ok(())
    }

    /// Appends `tx` in a new block at the current tick.
    pub fn submit(&mut self, tx: Transaction) -> Result<TxId, LedgerError> {
        let txid = self.apply(tx)?;
        self.seal(vec![txid]);
        Ok(txid)
    }

    fn seal(&mut self, txids: Vec<TxId>) -> &Block {
        let height = self.height();
        let prev_hash = self.tip_hash();
        let hash = Block::compute_hash(height, &prev_hash, self.tick, &txids);
        self.blocks.push(Block {
            height,
            prev_hash,
            tick: self.tick,
            txids,
            hash,
        });
        self.blocks.last().unwrap()
    }

    /// Replays a stored block: applies its transactions at its tick and
    /// checks the recomputed header against the stored one.
    pub(crate) fn replay_block(
        &mut self,
        stored: &Block,
        txs: Vec<Transaction>,
    ) -> Result<(), LedgerError> {
        let h = stored.height;
        self.set_tick(stored.tick)
            .map_err(|_| LedgerError::Corrupt(format!("block {h} tick moves backwards")))?;
        let mut txids = Vec::with_capacity(txs.len());
        for tx in txs {
            let id = self
                .apply(tx)
                .map_err(|e| LedgerError::Corrupt(format!("block {h} replay failed: {e}")))?;
            txids.push(id);
        }
        if self.seal(txids) != stored {
            return Err(LedgerError::Corrupt(format!("block {h} header mismatch")));
        }
        Ok(())
    }

    fn authenticate(&self, tx: &Transaction) -> Result<(), LedgerError> {
        let sender = tx.sender();
        let pk = if tx.kind() == TxKind::DeviceRegister {
            if sender != self.ca_addr {
                return Err(LedgerError::UnknownSender(sender));
            }
            &self.genesis.ca_pk
        } else {
            self.active_pk(&sender)
                .ok_or(LedgerError::UnknownSender(sender))?
        };
        if crypto::verify(pk, &tx.body.signing_bytes(), &tx.signature) {
            Ok(())
        } else {
            Err(LedgerError::BadSignature)
        }
    }

    /// A marker may be sold only by its holder, only from the chain head,
    /// and only once the sale that produced it has settled.
    fn check_sellable(&self, marker: &TxId, seller: Address) -> Result<&Marker, LedgerError> {
        let m = self.markers.get(marker).ok_or(LedgerError::UnknownMarker)?;
        if m.voided || self.heads[&m.root] != *marker || m.holder != seller {
            return Err(LedgerError::NotCurrentHolder);
        }
        if let Some(cid) = m.contract {
            if self.contracts[&cid].state != ContractState::Settled {
                return Err(LedgerError::PendingSettlement);
            }
        }
        Ok(m)
    }

    fn new_marker(&mut self, m: Marker) {
        self.digests.insert(m.digest, m.txid);
        self.heads.insert(m.root, m.txid);
        self.markers.insert(m.txid, m);
    }

    /// Validates then mutates; on error no state has changed.
    fn apply(&mut self, tx: Transaction) -> Result<TxId, LedgerError> {
        let txid = tx.txid();
        if self.tx_index.contains_key(&txid) {
            return Err(LedgerError::DuplicateTx);
        }
        self.authenticate(&tx)?;
        let sender = tx.sender();
        let tick = self.tick;
        match tx.payload().clone() {
            Payload::DeviceRegister { id, pk, status } => {
                let pk = PublicKey::from_bytes(&pk).map_err(|_| LedgerError::InvalidPublicKey)?;
                let addr = pk.address();
                match status {
                    DeviceStatus::Active => {
                        if self
                            .registry
                            .get(&id)
                            .is_some_and(|e| e.status == DeviceStatus::Active)
                        {
                            return Err(LedgerError::AlreadyRegistered);
                        }
                        if self.by_addr.get(&addr).is_some_and(|other| *other != id) {
                            return Err(LedgerError::AlreadyRegistered);
                        }
                    }
                    DeviceStatus::Revoked => match self.registry.get(&id) {
                        Some(e) if e.pk == pk => {}
                        Some(_) => return Err(LedgerError::InvalidPublicKey),
                        None => return Err(LedgerError::UnknownId(id)),
                    },
                }
                self.by_addr.insert(addr, id.clone());
                self.registry.insert(
                    id.clone(),
                    RegistryEntry {
                        id,
                        pk,
                        addr,
                        status,
                    },
                );
            }
            Payload::CopyrightRegister { digest, holder } => {
                if holder != sender {
                    return Err(LedgerError::Unauthorized);
                }
                if self.digests.contains_key(&digest) {
                    return Err(LedgerError::DuplicateDigest);
                }
                self.new_marker(Marker {
                    txid,
                    digest,
                    holder,
                    prev: None,
                    root: txid,
                    contract: None,
                    next: None,
                    voided: false,
                });
            }
            Payload::CopyrightUpdate {
                new_digest,
                ctm,
                contract,
            } => {
                if sender != ctm.seller {
                    return Err(LedgerError::Unauthorized);
                }
                let root = self.check_sellable(&ctm.prev_txid, ctm.seller)?.root;
                let c = self
                    .contracts
                    .get(&contract)
                    .ok_or(LedgerError::UnknownContract)?;
                if c.terms.seller != ctm.seller
                    || c.terms.buyer != ctm.buyer
                    || c.terms.marker != ctm.prev_txid
                {
                    return Err(LedgerError::ContractMismatch);
                }
                c.check_deliver(tick)?;
                if self.digests.contains_key(&new_digest) {
                    return Err(LedgerError::DuplicateDigest);
                }
                self.contracts
                    .get_mut(&contract)
                    .unwrap()
                    .apply_deliver(txid);
                self.markers.get_mut(&ctm.prev_txid).unwrap().next = Some(txid);
                self.new_marker(Marker {
                    txid,
                    digest: new_digest,
                    holder: ctm.buyer,
                    prev: Some(ctm.prev_txid),
                    root,
                    contract: Some(contract),
                    next: None,
                    voided: false,
                });
            }
            Payload::ContractDeploy(terms) => {
                if sender != terms.seller && sender != terms.buyer {
                    return Err(LedgerError::Unauthorized);
                }
                for party in [terms.seller, terms.buyer] {
                    if self.active_pk(&party).is_none() {
                        return Err(LedgerError::UnknownParty(party));
                    }
                }
                self.check_sellable(&terms.marker, terms.seller)?;
                if terms.pay_deadline < tick {
                    return Err(LedgerError::InvalidTerms("pay deadline already passed"));
                }
                let c = EscrowContract::deploy(txid, terms)?;
                self.contracts.insert(txid, c);
            }
            Payload::ContractFund { contract, amount } => {
                let c = self
                    .contracts
                    .get_mut(&contract)
                    .ok_or(LedgerError::UnknownContract)?;
                c.check_fund(sender, amount, tick, &self.balances)?;
                c.apply_fund(&mut self.balances);
            }
            Payload::ContractConfirm { contract } => {
                let c = self
                    .contracts
                    .get_mut(&contract)
                    .ok_or(LedgerError::UnknownContract)?;
                c.check_confirm(sender, tick)?;
                c.apply_confirm(&mut self.balances);
            }
            Payload::ContractRefund { contract } => {
                let c = self
                    .contracts
                    .get_mut(&contract)
                    .ok_or(LedgerError::UnknownContract)?;
                c.check_refund(sender, tick)?;
                if let Some(voided) = c.apply_refund(&mut self.balances) {
                    self.void_transfer(voided);
                }
            }
        }
        self.tx_index.insert(txid, self.txs.len());
        self.txs.push(tx);
        Ok(txid)
    }

    /// Undo a delivered-but-unconfirmed TX_u: holdership returns to the seller.
    fn void_transfer(&mut self, txid: TxId) {
        let m = self
            .markers
            .get_mut(&txid)
            .expect("delivered contracts reference a marker");
        m.voided = true;
        let (root, prev) = (m.root, m.prev.expect("TX_u has a predecessor"));
        debug_assert_eq!(self.heads[&root], txid);
        self.markers.get_mut(&prev).unwrap().next = None;
        self.heads.insert(root, prev);
    }

    /// Ordered chain from the registering TX_r to the current holder.
    pub fn trace_txid(&self, txid: &TxId) -> Result<Vec<TraceEntry>, LedgerError> {
        let m = self.markers.get(txid).ok_or(LedgerError::UnknownMarker)?;
        let mut out = Vec::new();
        let mut cur = Some(m.root);
        while let Some(t) = cur {
            let m = &self.markers[&t];
            out.push(TraceEntry {
                holder: m.holder,
                txid: m.txid,
                digest: m.digest,
            });
            cur = m.next;
        }
        Ok(out)
    }

    pub fn trace_digest(&self, digest: &Digest) -> Result<Vec<TraceEntry>, LedgerError> {
        let txid = self.digests.get(digest).ok_or(LedgerError::UnknownMarker)?;
        self.trace_txid(txid)
    }

    /// Accepts either a marker txid or a file digest.
    pub fn trace(&self, key: &[u8; 32]) -> Result<Vec<TraceEntry>, LedgerError> {
        if self.markers.contains_key(key) {
            self.trace_txid(key)
        } else {
            self.trace_digest(key)
        }
    }

    // Convenience wrappers for callers holding a key in the clear. Devices
    // that keep their key wrapped build an `UnsignedTx` and sign it
    // themselves.

    pub fn signed(&self, payload: Payload, sk: &SecretKey) -> Transaction {
        Transaction::signed(payload, sk, self.tick)
    }

    pub fn register_copyright(
        &mut self,
        sk: &SecretKey,
        digest: Digest,
    ) -> Result<TxId, LedgerError> {
        let holder = sk.public_key().address();
        self.submit(self.signed(Payload::CopyrightRegister { digest, holder }, sk))
    }

    pub fn record_transfer(
        &mut self,
        sk: &SecretKey,
        ctm: CopyrightTransferMarker,
        new_digest: Digest,
        contract: ContractId,
    ) -> Result<TxId, LedgerError> {
        self.submit(self.signed(
            Payload::CopyrightUpdate {
                new_digest,
                ctm,
                contract,
            },
            sk,
        ))
    }

    pub fn deploy(
        &mut self,
        sk: &SecretKey,
        terms: EscrowTerms,
    ) -> Result<ContractId, LedgerError> {
        self.submit(self.signed(Payload::ContractDeploy(terms), sk))
    }

    pub fn fund(
        &mut self,
        sk: &SecretKey,
        contract: ContractId,
        amount: u64,
    ) -> Result<TxId, LedgerError> {
        self.submit(self.signed(Payload::ContractFund { contract, amount }, sk))
    }

    pub fn confirm(&mut self, sk: &SecretKey, contract: ContractId) -> Result<TxId, LedgerError> {
        self.submit(self.signed(Payload::ContractConfirm { contract }, sk))
    }

    pub fn refund(&mut self, sk: &SecretKey, contract: ContractId) -> Result<TxId, LedgerError> {
        self.submit(self.signed(Payload::ContractRefund { contract }, sk))
    }
}

/// Single writer, many readers. Each submit runs under the write lock, so
/// readers see either the whole block or none of it.
#[derive(Clone, Debug)]
pub struct SharedLedger(Arc<RwLock<Ledger>>);

impl SharedLedger {
    pub fn new(ledger: Ledger) -> Self {
        Self(Arc::new(RwLock::new(ledger)))
    }

    pub fn read(&self) -> RwLockReadGuard<'_, Ledger> {
        self.0.read().unwrap_or_else(|e| e.into_inner())
    }

    pub fn submit(&self, tx: Transaction) -> Result<TxId, LedgerError> {
        self.0.write().unwrap_or_else(|e| e.into_inner()).submit(tx)
    }

    pub fn with_mut<T>(&self, f: impl FnOnce(&mut Ledger) -> T) -> T {
        f(&mut self.0.write().unwrap_or_else(|e| e.into_inner()))
    }
}
