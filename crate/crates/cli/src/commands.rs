use std::fs::File;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use datasafe::crypto::{hash, hash_parts, keygen, Address};
use datasafe::ledger::{
    decode_ledger, encode_ledger, verify_file, Genesis, LedgerError, LedgerStore, Payload,
    SecureDb, Transaction,
};
use datasafe::protocol::scenario::{run_scenario, Scenario};
use datasafe::protocol::{
    derive_seed, register_identity, Bus, CaNode, Device, DeviceSeeds, Env, Manufacturer,
};
use datasafe::puf::{DeviceRecord, SramPufModel};
use datasafe::watermark::{
    embed, extract, load_bmp, psnr, save_bmp, Channel, EmbedConfig, LocationKey, Watermark,
};

use crate::config::Config;
use crate::error::CliError;
use crate::output::Output;
use crate::SeedArgs;

type Result<T> = std::result::Result<T, CliError>;

const LOCK_FILE: &str = ".datasafe.lock";

pub struct Ctx {
    root: PathBuf,
    cfg: Config,
}

fn fmt_psnr(v: f64) -> String {
    if v.is_infinite() {
        "inf".into()
    } else {
        format!("{v:.4}")
    }
}

fn payload_record(p: &Payload) -> Value {
    match p {
        Payload::DeviceRegister { id, pk, status } => json!({
            "id": id, "pk": hex::encode(pk), "status": format!("{status:?}"),
        }),
        Payload::CopyrightRegister { digest, holder } => json!({
            "digest": hex::encode(digest), "holder": holder.to_string(),
        }),
        Payload::CopyrightUpdate {
            new_digest,
            ctm,
            contract,
        } => json!({
            "new_digest": hex::encode(new_digest),
            "prev_txid": hex::encode(ctm.prev_txid),
            "seller": ctm.seller.to_string(),
            "buyer": ctm.buyer.to_string(),
            "contract": hex::encode(contract),
        }),
        Payload::ContractDeploy(t) => json!({
            "seller": t.seller.to_string(),
            "buyer": t.buyer.to_string(),
            "marker": hex::encode(t.marker),
            "price": t.price,
            "pay_deadline": t.pay_deadline,
            "deliver_deadline": t.deliver_deadline,
            "confirm_deadline": t.confirm_deadline,
        }),
        Payload::ContractFund { contract, amount } => json!({
            "contract": hex::encode(contract), "amount": amount,
        }),
        Payload::ContractConfirm { contract } | Payload::ContractRefund { contract } => json!({
            "contract": hex::encode(contract),
        }),
    }
}

fn tx_record(tx: &Transaction) -> Value {
    json!({
        "txid": hex::encode(tx.txid()),
        "kind": format!("{:?}", tx.kind()),
        "sender": tx.sender().to_string(),
        "timestamp": tx.body.timestamp,
        "payload": payload_record(tx.payload()),
    })
}

impl Ctx {
    pub fn new(root: PathBuf, cfg: Config) -> Self {
        Self { root, cfg }
    }

    fn path(&self, p: &Path) -> PathBuf {
        self.root.join(p)
    }

    fn read(&self, p: &Path) -> Result<Vec<u8>> {
        let p = self.path(p);
        std::fs::read(&p).map_err(|e| CliError::io(&p, e))
    }

    fn write(&self, p: &Path, bytes: &[u8]) -> Result<()> {
        let p = self.path(p);
        if let Some(dir) = p.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        std::fs::write(&p, bytes).map_err(|e| CliError::io(&p, e))
    }

    /// Held for the duration of a mutating command.
    fn lock(&self) -> Result<File> {
        std::fs::create_dir_all(&self.root).map_err(|e| CliError::io(&self.root, e))?;
        let p = self.root.join(LOCK_FILE);
        let f = File::options()
            .create(true)
            .truncate(false)
            .write(true)
            .open(&p)
            .map_err(|e| CliError::io(&p, e))?;
        f.lock().map_err(|e| CliError::io(&p, e))?;
        Ok(f)
    }

    fn seeds(&self, id: &str, o: SeedArgs) -> DeviceSeeds {
        let mut s = DeviceSeeds::derive(self.cfg.master_seed, id);
        if let Some(v) = o.identity_seed {
            s.identity = v;
        }
        if let Some(v) = o.noise_seed {
            s.noise = v;
        }
        s
    }

    fn device_file(&self, id: &str) -> Result<PathBuf> {
        let ok = !id.is_empty()
            && id
                .chars()
                .all(|c| c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.')
            && !id.starts_with('.');
        if !ok {
            return Err(CliError::Usage(format!("invalid device id `{id}`")));
        }
        Ok(self.cfg.device_dir.join(format!("{id}.dspf")))
    }

    fn load_db(&self) -> Result<SecureDb> {
        let p = self.path(&self.cfg.secure_db);
        if !p.exists() {
            return Ok(SecureDb::new());
        }
        let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
        Ok(SecureDb::from_json_lines(&text)?)
    }

    fn load_device(&self, id: &str, o: SeedArgs) -> Result<Device> {
        let file = self.device_file(id)?;
        if !self.path(&file).exists() {
            return Err(LedgerError::UnknownId(id.to_string()).into());
        }
        let record = DeviceRecord::decode(&self.read(&file)?)?;
        let seeds = self.seeds(id, o);
        let model = SramPufModel::new(id, seeds.identity, &self.cfg.puf_params()?);
        Ok(Device::restore(model, record, seeds.noise, seeds.session)?)
    }

    fn ca(&self, db: SecureDb) -> CaNode {
        let master = self.cfg.master_seed;
        CaNode::new(
            keygen(derive_seed(master, "ca")),
            db,
            derive_seed(master, "ca/session"),
        )
    }

    fn ledger_path(&self, over: Option<&Path>) -> PathBuf {
        self.path(over.unwrap_or(&self.cfg.ledger_path))
    }

    /// Opens the configured ledger with the clock one tick past the last
    /// block, as a running chain would be.
    fn open(&self) -> Result<(LedgerStore, Env)> {
        let (store, ledger) = LedgerStore::open(self.ledger_path(None))?;
        let next = ledger.blocks().last().map(|b| b.tick + 1);
        let mut env = Env::new(ledger, Bus::default());
        if let Some(t) = next {
            env.advance_to(t)?;
        }
        Ok((store, env))
    }

    pub fn device_enroll(&self, out: &mut Output, id: &str, o: SeedArgs) -> Result<u8> {
        let _lock = self.lock()?;
        let file = self.device_file(id)?;
        let mut db = self.load_db()?;
        if self.path(&file).exists() {
            return Err(LedgerError::AlreadyEnrolled.into());
        }
        let mut maker = Manufacturer::new(derive_seed(
            self.cfg.master_seed,
            &format!("manufacturer/{id}"),
        ));
        let (dev, _) = maker.enroll(id, &self.cfg.puf_params()?, &self.seeds(id, o), &mut db)?;
        self.write(&file, &dev.record().encode())?;
        self.write(&self.cfg.secure_db, db.to_json_lines().as_bytes())?;
        let pk = hex::encode(dev.public_key().to_bytes());
        out.emit(
            format!("enrolled {id} address {} pk {pk}", dev.address()),
            json!({"enrolled": id, "address": dev.address().to_string(), "pk": pk}),
        );
        Ok(0)
    }

    pub fn device_register(&self, out: &mut Output, id: &str, o: SeedArgs) -> Result<u8> {
        let _lock = self.lock()?;
        let (mut store, mut env) = self.open()?;
        let mut dev = self.load_device(id, o)?;
        let mut ca = self.ca(self.load_db()?);
        let entry = register_identity(&mut dev, &mut ca, &mut env)?;
        store.append(&env.ledger)?;
        out.emit(
            format!("registered {id} address {}", entry.addr),
            json!({"registered": id, "address": entry.addr.to_string(), "pk": hex::encode(entry.pk.to_bytes())}),
        );
        Ok(0)
    }

    pub fn device_show(&self, out: &mut Output, id: &str, o: SeedArgs) -> Result<u8> {
        let dev = self.load_device(id, o)?;
        let pk = hex::encode(dev.public_key().to_bytes());
        out.emit(
            format!("{id} address {} pk {pk}", dev.address()),
            json!({"id": id, "address": dev.address().to_string(), "pk": pk}),
        );
        Ok(0)
    }

    pub fn file_register(&self, out: &mut Output, bmp: &Path, id: &str, o: SeedArgs) -> Result<u8> {
        let _lock = self.lock()?;
        let bytes = self.read(bmp)?;
        load_bmp(&bytes)?;
        let (mut store, mut env) = self.open()?;
        let mut dev = self.load_device(id, o)?;
        let digest = hash(&bytes);
        let payload = Payload::CopyrightRegister {
            digest,
            holder: dev.address(),
        };
        let tx = dev.sign_tx(payload, env.ledger.tick())?;
        let txid = env.submit(tx)?;
        store.append(&env.ledger)?;
        out.emit(
            format!("registered {} txid {} digest {}", bmp.display(), hex::encode(txid), hex::encode(digest)),
            json!({"txid": hex::encode(txid), "digest": hex::encode(digest), "holder": dev.address().to_string()}),
        );
        Ok(0)
    }

    pub fn transfer_run(
        &self,
        out: &mut Output,
        scenario: &Path,
        dir: Option<&Path>,
    ) -> Result<u8> {
        let path = self.path(scenario);
        let s = Scenario::load(&path)?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let report = run_scenario(&s, Some(&base))?;
        let dir = dir
            .map(Path::to_path_buf)
            .unwrap_or_else(|| Path::new("runs").join(&s.name));
        let ledger_file = dir.join("ledger.dslg");
        self.write(&ledger_file, &encode_ledger(&report.env.ledger))?;
        self.write(
            &dir.join("transcript.jsonl"),
            report.env.bus.transcript().to_json_lines().as_bytes(),
        )?;
        for (name, addr) in &report.addresses {
            out.emit(
                format!("party {name} {addr}"),
                json!({"party": name, "address": addr.to_string()}),
            );
        }
        for st in &report.steps {
            let flag = if st.met { "" } else { " [unmet]" };
            out.emit(
                format!("step {} {}: {}{flag}", st.index, st.step, st.outcome),
                json!({"step": st.index, "action": st.step, "outcome": st.outcome, "error": st.error, "met": st.met}),
            );
        }
        for t in &report.transfers {
            let tx_u = t.tx_u.map(hex::encode);
            out.emit(
                format!(
                    "session {} {:?} tx_u {}",
                    t.session,
                    t.stage,
                    tx_u.as_deref().unwrap_or("-")
                ),
                json!({
                    "session": t.session,
                    "stage": format!("{:?}", t.stage),
                    "failed_at": t.failed_at.map(|s| format!("{s:?}")),
                    "tx_u": tx_u,
                    "refunded": t.refunded,
                }),
            );
        }
        for l in &report.leaks {
            out.emit(
                format!("leak in event {} at offset {}", l.event, l.offset),
                json!({"leak_event": l.event, "offset": l.offset}),
            );
        }
        let code = report.exit_code();
        out.emit(
            format!(
                "scenario {} {} (exit {code}); ledger {}",
                report.name,
                if report.passed() { "passed" } else { "failed" },
                ledger_file.display()
            ),
            json!({"scenario": report.name, "passed": report.passed(), "exit": code,
                   "ledger": ledger_file.display().to_string()}),
        );
        if code != 0 {
            let kind = if report.passed() {
                report.final_error.clone().unwrap_or_default()
            } else {
                "protocol.Scenario".into()
            };
            eprintln!(
                "{}",
                json!({"error": kind, "code": code, "message": format!("scenario {}", report.name)})
            );
        }
        Ok(code)
    }

    #[allow(clippy::too_many_arguments)]
    pub fn wm_embed(
        &self,
        out: &mut Output,
        cover: &Path,
        output: &Path,
        wm_hex: Option<&str>,
        wm_file: Option<&Path>,
        key_out: &Path,
        seed: Option<u64>,
    ) -> Result<u8> {
        let img = load_bmp(&self.read(cover)?)?;
        let payload = match (wm_hex, wm_file) {
            (Some(h), _) => {
                hex::decode(h).map_err(|e| CliError::Usage(format!("--watermark-hex: {e}")))?
            }
            (None, Some(f)) => self.read(f)?,
            (None, None) => return Err(CliError::Usage("a watermark is required".into())),
        };
        let seed = seed.unwrap_or(self.cfg.master_seed);
        let cfg = EmbedConfig {
            seed_x: hash_parts(&[b"DSWMSEED1", &seed.to_be_bytes()]),
            fill_seed: derive_seed(seed, "wm/fill"),
            rule_table: self.cfg.rules()?,
            target_channel: Channel::B,
        };
        let wm = Watermark::from_bytes(&payload);
        let (covered, lk) = embed(&img, &wm, &cfg)?;
        self.write(output, &save_bmp(&covered))?;
        self.write(key_out, &lk.to_bytes())?;
        let db = psnr(&img, &covered)?;
        out.emit(
            format!("embedded {} bits, psnr {} dB", wm.len(), fmt_psnr(db)),
            json!({"bits": wm.len(), "psnr": fmt_psnr(db)}),
        );
        Ok(0)
    }

    pub fn wm_extract(&self, out: &mut Output, covered: &Path, key: &Path) -> Result<u8> {
        let img = load_bmp(&self.read(covered)?)?;
        let lk = LocationKey::from_bytes(&self.read(key)?)?;
        let h = hex::encode(extract(&img, &lk)?.to_bytes());
        out.emit(&h, json!({"watermark": h}));
        Ok(0)
    }

    pub fn wm_psnr(&self, out: &mut Output, original: &Path, covered: &Path) -> Result<u8> {
        let a = load_bmp(&self.read(original)?)?;
        let b = load_bmp(&self.read(covered)?)?;
        let v = fmt_psnr(psnr(&a, &b)?);
        out.emit(&v, json!({"psnr": v}));
        Ok(0)
    }

    pub fn ledger_init(&self, out: &mut Output, balances: &[String]) -> Result<u8> {
        let _lock = self.lock()?;
        let mut map = std::collections::BTreeMap::new();
        for b in balances {
            let (who, amount) = b.split_once('=').ok_or_else(|| {
                CliError::Usage(format!("--balance expects NAME=AMOUNT, got `{b}`"))
            })?;
            let amount: u64 = amount
                .parse()
                .map_err(|_| CliError::Usage(format!("bad amount in `{b}`")))?;
            let addr = match Address::from_hex(who) {
                Some(a) if who.starts_with("0x") => a,
                _ => self.load_device(who, SeedArgs::default())?.address(),
            };
            *map.entry(addr).or_insert(0) += amount;
        }
        let ca = keygen(derive_seed(self.cfg.master_seed, "ca"));
        let genesis = Genesis {
            ca_pk: ca.pk,
            balances: map,
        };
        let path = self.ledger_path(None);
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        }
        let ledger = datasafe::ledger::Ledger::new(genesis);
        LedgerStore::create(&path, &ledger)?;
        out.emit(
            format!("created {} genesis {}", path.display(), hex::encode(ledger.genesis().hash())),
            json!({"ledger": path.display().to_string(), "genesis": hex::encode(ledger.genesis().hash())}),
        );
        Ok(0)
    }

    pub fn ledger_verify(&self, out: &mut Output, over: Option<&Path>) -> Result<u8> {
        let r = verify_file(self.ledger_path(over))?;
        out.emit(
            format!(
                "ok: {} blocks, {} transactions, tick {}, tip {}",
                r.blocks,
                r.transactions,
                r.tick,
                hex::encode(r.tip_hash)
            ),
            json!({"ok": true, "blocks": r.blocks, "transactions": r.transactions, "tick": r.tick,
                   "tip": hex::encode(r.tip_hash)}),
        );
        Ok(0)
    }

    pub fn ledger_dump(&self, out: &mut Output, over: Option<&Path>) -> Result<u8> {
        let p = self.ledger_path(over);
        let bytes = std::fs::read(&p).map_err(|e| CliError::io(&p, e))?;
        let ledger = decode_ledger(&bytes)?;
        let g = ledger.genesis();
        let balances: serde_json::Map<String, Value> = g
            .balances
            .iter()
            .map(|(a, v)| (a.to_string(), json!(v)))
            .collect();
        out.emit(
            format!("genesis {} ca {}", hex::encode(g.hash()), hex::encode(g.ca_pk.to_bytes())),
            json!({"genesis": hex::encode(g.hash()), "ca_pk": hex::encode(g.ca_pk.to_bytes()), "balances": balances}),
        );
        for (a, v) in &g.balances {
            out.human(format!("  balance {a} {v}"));
        }
        for b in ledger.blocks() {
            out.emit(
                format!(
                    "block {} tick {} hash {}",
                    b.height,
                    b.tick,
                    hex::encode(b.hash)
                ),
                json!({"block": b.height, "tick": b.tick, "hash": hex::encode(b.hash),
                       "prev": hex::encode(b.prev_hash)}),
            );
            for id in &b.txids {
                let tx = ledger.get_tx(id).expect("indexed by block");
                let rec = tx_record(tx);
                out.emit(format!("  tx {rec}"), rec);
            }
        }
        Ok(0)
    }

    pub fn ledger_trace(&self, out: &mut Output, key: &str, over: Option<&Path>) -> Result<u8> {
        let p = self.ledger_path(over);
        let bytes = std::fs::read(&p).map_err(|e| CliError::io(&p, e))?;
        let ledger = decode_ledger(&bytes)?;
        let file = self.path(Path::new(key));
        let k: [u8; 32] = if file.is_file() {
            hash(&std::fs::read(&file).map_err(|e| CliError::io(&file, e))?)
        } else {
            let raw = hex::decode(key.strip_prefix("0x").unwrap_or(key))
                .map_err(|_| CliError::Usage(format!("`{key}` is neither a file nor hex")))?;
            raw.try_into()
                .map_err(|_| CliError::Usage(format!("`{key}` is not 32 bytes")))?
        };
        for e in ledger.trace(&k)? {
            out.emit(
                format!("{} {} {}", e.holder, hex::encode(e.txid), hex::encode(e.digest)),
                json!({"holder": e.holder.to_string(), "txid": hex::encode(e.txid), "digest": hex::encode(e.digest)}),
            );
        }
        Ok(0)
    }
}
