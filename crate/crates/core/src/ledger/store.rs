//! Append-only ledger file.
//!
//! `"DSLG" | version | record*`, each record a `u32` big-endian length and
//! its bytes. Record 0 is the genesis; every later record is one block: its
//! header followed by `u32` transaction count and length-prefixed canonical
//! transactions. Opening replays every block through the state machine, so
//! any mutation either fails to parse, fails a transaction check, or changes
//! a recomputed hash.

use std::fs::{File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::crypto::Digest;

use super::tx::{put_bytes, Reader};
use super::{Block, Genesis, Ledger, LedgerError, Transaction};

pub const LEDGER_MAGIC: &[u8; 4] = b"DSLG";
pub const LEDGER_VERSION: u8 = 1;

fn io_err(e: std::io::Error) -> LedgerError {
    LedgerError::Io(e.to_string())
}

fn block_record(ledger: &Ledger, block: &Block) -> Vec<u8> {
    let mut rec = Vec::new();
    block.encode_header(&mut rec);
    rec.extend_from_slice(&(block.txids.len() as u32).to_be_bytes());
    for txid in &block.txids {
        put_bytes(
            &mut rec,
            &ledger.get_tx(txid).expect("sealed tx is indexed").encode(),
        );
    }
    rec
}

pub fn encode_ledger(ledger: &Ledger) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(LEDGER_MAGIC);
    out.push(LEDGER_VERSION);
    put_bytes(&mut out, &ledger.genesis().encode());
    for b in ledger.blocks() {
        put_bytes(&mut out, &block_record(ledger, b));
    }
    out
}

pub fn decode_ledger(bytes: &[u8]) -> Result<Ledger, LedgerError> {
    let corrupt = |e: LedgerError| match e {
        LedgerError::Corrupt(_) => e,
        other => LedgerError::Corrupt(other.to_string()),
    };
    let mut r = Reader::new(bytes);
    if r.take(4).map_err(corrupt)? != LEDGER_MAGIC {
        return Err(LedgerError::Corrupt("bad magic".into()));
    }
    if r.u8().map_err(corrupt)? != LEDGER_VERSION {
        return Err(LedgerError::Corrupt("unsupported version".into()));
    }
    let genesis = Genesis::decode(r.bytes().map_err(corrupt)?).map_err(corrupt)?;
    let mut ledger = Ledger::new(genesis);
    while !r.is_empty() {
        let rec = r.bytes().map_err(corrupt)?;
        let mut br = Reader::new(rec);
        let header = Block::decode_header(&mut br).map_err(corrupt)?;
        if header.height != ledger.height() {
            return Err(LedgerError::Corrupt(format!(
                "unexpected block height {}",
                header.height
            )));
        }
        let n = br.u32().map_err(corrupt)? as usize;
        let mut txs = Vec::with_capacity(n.min(1024));
        for _ in 0..n {
            txs.push(Transaction::decode(br.bytes().map_err(corrupt)?).map_err(corrupt)?);
        }
        br.finish().map_err(corrupt)?;
        ledger.replay_block(&header, txs)?;
    }
    ledger.verify_chain()?;
    ledger.check_conservation().map_err(corrupt)?;
    Ok(ledger)
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerifyReport {
    pub blocks: u64,
    pub transactions: usize,
    pub tick: u64,
    pub tip_hash: Digest,
}

/// Handle on a ledger file that appends blocks sealed since the last write.
#[derive(Debug)]
pub struct LedgerStore {
    path: PathBuf,
    persisted: u64,
    genesis_hash: Digest,
}

impl LedgerStore {
    /// Writes a fresh file; refuses to replace an existing one.
    pub fn create(path: impl AsRef<Path>, ledger: &Ledger) -> Result<Self, LedgerError> {
        let path = path.as_ref().to_path_buf();
        let mut f = OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&path)
            .map_err(io_err)?;
        f.write_all(&encode_ledger(ledger)).map_err(io_err)?;
        f.sync_all().map_err(io_err)?;
        Ok(Self {
            path,
            persisted: ledger.height(),
            genesis_hash: ledger.genesis().hash(),
        })
    }

    pub fn open(path: impl AsRef<Path>) -> Result<(Self, Ledger), LedgerError> {
        let path = path.as_ref().to_path_buf();
        let bytes = std::fs::read(&path).map_err(io_err)?;
        let ledger = decode_ledger(&bytes)?;
        let store = Self {
            path,
            persisted: ledger.height(),
            genesis_hash: ledger.genesis().hash(),
        };
        Ok((store, ledger))
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Appends every block of `ledger` not yet on disk.
    pub fn append(&mut self, ledger: &Ledger) -> Result<usize, LedgerError> {
        if ledger.genesis().hash() != self.genesis_hash || ledger.height() < self.persisted {
            return Err(LedgerError::Corrupt(
                "ledger does not extend the stored chain".into(),
            ));
        }
        let mut out = Vec::new();
        for b in &ledger.blocks()[self.persisted as usize..] {
            put_bytes(&mut out, &block_record(ledger, b));
        }
        let n = ledger.height() - self.persisted;
        if n > 0 {
            let mut f: File = OpenOptions::new()
                .append(true)
                .open(&self.path)
                .map_err(io_err)?;
            f.write_all(&out).map_err(io_err)?;
            f.sync_all().map_err(io_err)?;
            self.persisted = ledger.height();
        }
        Ok(n as usize)
    }
}

pub fn verify_file(path: impl AsRef<Path>) -> Result<VerifyReport, LedgerError> {
    let (_, ledger) = LedgerStore::open(path)?;
    Ok(VerifyReport {
        blocks: ledger.height(),
        transactions: ledger.transactions().len(),
        tick: ledger.tick(),
        tip_hash: ledger.tip_hash(),
    })
}
