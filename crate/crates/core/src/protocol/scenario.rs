//! Scripted runs: parties, files, a fault schedule and a list of steps with
//! expected outcomes, read from TOML.
//!
//! ```toml
//! name = "honest"
//! master_seed = 7
//!
//! [[device]]
//! name = "A"
//!
//! [[device]]
//! name = "B"
//! balance = 100
//!
//! [[file]]
//! name = "art"
//! owner = "A"
//!
//! [[step]]
//! action = "register_device"
//! device = "A"
//!
//! [[step]]
//! action = "transfer"
//! file = "art"
//! seller = "A"
//! buyer = "B"
//!
//! [[fault]]
//! kind = "delivery"
//! occurrence = 1
//! action = "tamper"
//! part = "plaintext"
//! offset = 4000
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::crypto::{hash, keygen, Address};
use crate::error::{exit_code, kind_matches, ErrorKind};
use crate::ledger::{Genesis, Ledger, LedgerError, Payload, SecureDb, TxId};
use crate::puf::{PufParams, DEFAULT_FLIP_PROB};
use crate::watermark::{load_bmp, save_bmp, Image24};

use super::{
    derive_seed, register_identity, run_transfer, Bus, CaNode, Device, DeviceSeeds, Env, Event,
    Fault, Leak, Manufacturer, ProtocolError, SellerBehavior, Stage, Terms, TransferOutcome,
};

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub master_seed: u64,
    #[serde(default)]
    pub puf: PufConfig,
    #[serde(default, rename = "device")]
    pub devices: Vec<DeviceSpec>,
    #[serde(default, rename = "file")]
    pub files: Vec<FileSpec>,
    #[serde(default, rename = "step")]
    pub steps: Vec<Step>,
    #[serde(default, rename = "fault")]
    pub faults: Vec<Fault>,
}

/// Omitting `repetition` picks the smallest code meeting the key failure
/// target.
#[derive(Clone, Copy, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct PufConfig {
    pub repetition: Option<usize>,
    #[serde(default = "default_flip")]
    pub flip_prob: f64,
}

fn default_flip() -> f64 {
    DEFAULT_FLIP_PROB
}

impl Default for PufConfig {
    fn default() -> Self {
        Self {
            repetition: None,
            flip_prob: DEFAULT_FLIP_PROB,
        }
    }
}

impl PufConfig {
    pub fn params(&self) -> Result<PufParams, ProtocolError> {
        Ok(match self.repetition {
            Some(r) => PufParams::new(r, self.flip_prob)?,
            None => PufParams::auto(self.flip_prob)?,
        })
    }
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct DeviceSpec {
    pub name: String,
    #[serde(default)]
    pub balance: u64,
    /// A device left out of the manufacturer's database.
    #[serde(default = "yes")]
    pub enrolled: bool,
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(deny_unknown_fields)]
pub struct FileSpec {
    pub name: String,
    pub owner: String,
    /// BMP on disk, relative to the scenario file. Otherwise a noise image
    /// is synthesised.
    pub path: Option<PathBuf>,
    #[serde(default = "default_side")]
    pub width: usize,
    #[serde(default = "default_side")]
    pub height: usize,
    pub seed: Option<u64>,
}

fn default_side() -> usize {
    64
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Behavior {
    #[default]
    Honest,
    ForgedKey,
    /// Ship the file's first-registered bytes instead of the new cover.
    DeliverOriginal,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum MarkerRef {
    #[default]
    Current,
    Root,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Deserialize, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Source {
    /// The copy the party holds.
    #[default]
    Held,
    Original,
}

/// `expect` is `"ok"`, `"settled"`, `"aborted"` or an error kind such as
/// `"DuplicateDigest"` or `"ledger.NotCurrentHolder"`.
#[derive(Clone, Debug, Deserialize, Serialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Step {
    RegisterDevice {
        device: String,
        expect: Option<String>,
    },
    RegisterFile {
        file: String,
        device: Option<String>,
        #[serde(default)]
        source: Source,
        expect: Option<String>,
    },
    Transfer {
        file: String,
        seller: String,
        buyer: String,
        #[serde(default)]
        terms: Terms,
        #[serde(default)]
        behavior: Behavior,
        #[serde(default)]
        marker: MarkerRef,
        #[serde(default)]
        source: Source,
        expect: Option<String>,
        expect_failed_at: Option<Stage>,
        expect_refunded: Option<bool>,
    },
    Advance {
        ticks: u64,
    },
    ExpectTrace {
        file: String,
        holders: Vec<String>,
    },
    ExpectBalance {
        device: String,
        amount: u64,
    },
}

impl Step {
    fn label(&self) -> String {
        match self {
            Step::RegisterDevice { device, .. } => format!("register_device {device}"),
            Step::RegisterFile { file, device, .. } => {
                format!(
                    "register_file {file} by {}",
                    device.as_deref().unwrap_or("owner")
                )
            }
            Step::Transfer {
                file,
                seller,
                buyer,
                ..
            } => format!("transfer {file} {seller} -> {buyer}"),
            Step::Advance { ticks } => format!("advance {ticks}"),
            Step::ExpectTrace { file, .. } => format!("expect_trace {file}"),
            Step::ExpectBalance { device, .. } => format!("expect_balance {device}"),
        }
    }

    fn is_check(&self) -> bool {
        matches!(self, Step::ExpectTrace { .. } | Step::ExpectBalance { .. })
    }
}

impl Scenario {
    pub fn from_toml(text: &str) -> Result<Self, ProtocolError> {
        toml::from_str(text).map_err(|e| ProtocolError::Scenario(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, ProtocolError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| ProtocolError::Scenario(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize)]
pub struct StepReport {
    pub index: usize,
    pub step: String,
    pub outcome: String,
    /// Error kind, if the step ended in one.
    pub error: Option<String>,
    pub met: bool,
}

pub struct ScenarioReport {
    pub name: String,
    pub steps: Vec<StepReport>,
    pub transfers: Vec<TransferOutcome>,
    pub leaks: Vec<Leak>,
    pub addresses: BTreeMap<String, Address>,
    pub env: Env,
    /// Error kind left by the last non-check step.
    pub final_error: Option<String>,
}

impl ScenarioReport {
    pub fn passed(&self) -> bool {
        self.leaks.is_empty() && self.steps.iter().all(|s| s.met)
    }

    /// 0 when every expectation held and the last action succeeded; the
    /// scenario code on unmet expectations or leaks; otherwise the code of
    /// the last action's error.
    pub fn exit_code(&self) -> u8 {
        if !self.passed() {
            return ProtocolError::Scenario(String::new()).exit_code();
        }
        self.final_error.as_deref().and_then(exit_code).unwrap_or(0)
    }

    pub fn name_of(&self, addr: &Address) -> String {
        self.addresses
            .iter()
            .find(|(_, a)| *a == addr)
            .map(|(n, _)| n.clone())
            .unwrap_or_else(|| addr.to_string())
    }
}

struct FileState {
    owner: String,
    original: Vec<u8>,
    root: Option<TxId>,
    current: Option<TxId>,
    held: BTreeMap<String, Vec<u8>>,
}

struct World {
    env: Env,
    ca: CaNode,
    devices: BTreeMap<String, Device>,
    files: BTreeMap<String, FileState>,
    transfers: Vec<TransferOutcome>,
}

enum Done {
    Ok,
    Transfer(TransferOutcome),
}

fn scenario_err(msg: impl Into<String>) -> ProtocolError {
    ProtocolError::Scenario(msg.into())
}

/// Deterministic noise image.
pub fn synth_image(width: usize, height: usize, seed: u64) -> Result<Image24, ProtocolError> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let pixels = (0..width * height)
        .map(|_| {
            let mut p = [0u8; 3];
            rng.fill_bytes(&mut p);
            p
        })
        .collect();
    Ok(Image24::new(width, height, pixels)?)
}

impl World {
    fn setup(s: &Scenario, base: Option<&Path>) -> Result<Self, ProtocolError> {
        let master = s.master_seed;
        let params = s.puf.params()?;
        let mut maker = Manufacturer::new(derive_seed(master, "manufacturer"));
        let mut db = SecureDb::new();
        let mut devices = BTreeMap::new();
        for spec in &s.devices {
            if devices.contains_key(&spec.name) {
                return Err(scenario_err(format!("duplicate device {}", spec.name)));
            }
            let seeds = DeviceSeeds::derive(master, &spec.name);
            let mut scratch = SecureDb::new();
            let target = if spec.enrolled { &mut db } else { &mut scratch };
            let (dev, _) = maker.enroll(&spec.name, &params, &seeds, target)?;
            devices.insert(spec.name.clone(), dev);
        }
        let ca_keys = keygen(derive_seed(master, "ca"));
        let balances = s
            .devices
            .iter()
            .filter(|d| d.balance > 0)
            .map(|d| (devices[&d.name].address(), d.balance))
            .collect();
        let genesis = Genesis {
            ca_pk: ca_keys.pk,
            balances,
        };
        let env = Env::new(Ledger::new(genesis), Bus::new(s.faults.clone()));
        let ca = CaNode::new(ca_keys, db, derive_seed(master, "ca/session"));

        let mut files = BTreeMap::new();
        for f in &s.files {
            if !devices.contains_key(&f.owner) {
                return Err(scenario_err(format!(
                    "file {} owner {} is not a device",
                    f.name, f.owner
                )));
            }
            let original = match &f.path {
                Some(p) => {
                    let p = base.map(|b| b.join(p)).unwrap_or_else(|| p.clone());
                    let bytes = std::fs::read(&p)
                        .map_err(|e| scenario_err(format!("{}: {e}", p.display())))?;
                    load_bmp(&bytes)?;
                    bytes
                }
                None => {
                    let seed = f
                        .seed
                        .unwrap_or_else(|| derive_seed(master, &format!("file/{}", f.name)));
                    save_bmp(&synth_image(f.width, f.height, seed)?)
                }
            };
            let held = BTreeMap::from([(f.owner.clone(), original.clone())]);
            files.insert(
                f.name.clone(),
                FileState {
                    owner: f.owner.clone(),
                    original,
                    root: None,
                    current: None,
                    held,
                },
            );
        }
        Ok(Self {
            env,
            ca,
            devices,
            files,
            transfers: Vec::new(),
        })
    }

    fn device(&mut self, name: &str) -> Result<&mut Device, ProtocolError> {
        self.devices
            .get_mut(name)
            .ok_or_else(|| scenario_err(format!("unknown device {name}")))
    }

    fn file(&mut self, name: &str) -> Result<&mut FileState, ProtocolError> {
        self.files
            .get_mut(name)
            .ok_or_else(|| scenario_err(format!("unknown file {name}")))
    }

    fn address(&self, name: &str) -> Result<Address, ProtocolError> {
        self.devices
            .get(name)
            .map(Device::address)
            .ok_or_else(|| scenario_err(format!("unknown device {name}")))
    }

    fn run(&mut self, step: &Step) -> Result<Done, ProtocolError> {
        match step {
            Step::RegisterDevice { device, .. } => {
                let mut dev = self
                    .devices
                    .remove(device)
                    .ok_or_else(|| scenario_err(format!("unknown device {device}")))?;
                let r = register_identity(&mut dev, &mut self.ca, &mut self.env);
                self.devices.insert(device.clone(), dev);
                r.map(|_| Done::Ok)
            }
            Step::RegisterFile {
                file,
                device,
                source,
                ..
            } => {
                let fs = self.file(file)?;
                let who = device.clone().unwrap_or_else(|| fs.owner.clone());
                let bytes =
                    match source {
                        Source::Original => fs.original.clone(),
                        Source::Held => fs.held.get(&who).cloned().ok_or_else(|| {
                            scenario_err(format!("{who} holds no copy of {file}"))
                        })?,
                    };
                let tick = self.env.ledger.tick();
                let dev = self.device(&who)?;
                let payload = Payload::CopyrightRegister {
                    digest: hash(&bytes),
                    holder: dev.address(),
                };
                let tx = dev.sign_tx(payload, tick)?;
                let txid = self.env.submit(tx)?;
                let fs = self.file(file)?;
                fs.root.get_or_insert(txid);
                fs.current.get_or_insert(txid);
                Ok(Done::Ok)
            }
            Step::Transfer {
                file,
                seller,
                buyer,
                terms,
                behavior,
                marker,
                source,
                ..
            } => {
                if seller == buyer {
                    return Err(scenario_err("seller and buyer must differ"));
                }
                let fs = self.file(file)?;
                let marker = match marker {
                    MarkerRef::Current => fs.current,
                    MarkerRef::Root => fs.root,
                }
                .ok_or(LedgerError::UnknownMarker)?;
                let bytes =
                    match source {
                        Source::Original => fs.original.clone(),
                        Source::Held => fs.held.get(seller).cloned().ok_or_else(|| {
                            scenario_err(format!("{seller} holds no copy of {file}"))
                        })?,
                    };
                let behavior = match behavior {
                    Behavior::Honest => SellerBehavior::Honest,
                    Behavior::ForgedKey => SellerBehavior::ForgedKey,
                    Behavior::DeliverOriginal => {
                        SellerBehavior::DeliverSubstitute(fs.original.clone())
                    }
                };
                self.device(buyer)?;
                let mut s = self
                    .devices
                    .remove(seller)
                    .ok_or_else(|| scenario_err(format!("unknown device {seller}")))?;
                let mut b = self.devices.remove(buyer).expect("checked above");
                let session = self.transfers.len() as u64 + 1;
                let out = run_transfer(
                    &mut self.env,
                    session,
                    &mut s,
                    &mut b,
                    marker,
                    &bytes,
                    terms,
                    &behavior,
                );
                self.devices.insert(seller.clone(), s);
                self.devices.insert(buyer.clone(), b);
                if let (true, Some(tx_u), Some(received)) =
                    (out.is_settled(), out.tx_u, &out.received)
                {
                    let fs = self.file(file)?;
                    fs.current = Some(tx_u);
                    fs.held.insert(buyer.clone(), received.clone());
                }
                self.transfers.push(out.clone());
                Ok(Done::Transfer(out))
            }
            Step::Advance { ticks } => {
                let to = self.env.ledger.tick() + ticks;
                self.env.advance_to(to)?;
                Ok(Done::Ok)
            }
            Step::ExpectTrace { file, holders } => {
                let current = self.file(file)?.current.ok_or(LedgerError::UnknownMarker)?;
                let got = self.env.ledger.trace_txid(&current)?;
                let want = holders
                    .iter()
                    .map(|h| self.address(h))
                    .collect::<Result<Vec<_>, _>>()?;
                let got: Vec<Address> = got.iter().map(|e| e.holder).collect();
                if got != want {
                    return Err(scenario_err(format!(
                        "trace has {} holders, expected {:?}",
                        got.len(),
                        holders
                    )));
                }
                Ok(Done::Ok)
            }
            Step::ExpectBalance { device, amount } => {
                let addr = self.address(device)?;
                let got = self.env.ledger.balance(&addr);
                if got != *amount {
                    return Err(scenario_err(format!(
                        "{device} balance {got}, expected {amount}"
                    )));
                }
                Ok(Done::Ok)
            }
        }
    }

    fn needles(&self) -> Vec<Vec<u8>> {
        let mut out = vec![crate::watermark::LOCATION_KEY_MAGIC.to_vec()];
        for d in self.devices.values() {
            for lk in d.issued_location_keys() {
                out.push(lk.seed_x.to_vec());
                out.push(lk.fill_seed.to_be_bytes().to_vec());
            }
        }
        out
    }
}

fn judge(step: &Step, result: &Result<Done, ProtocolError>) -> (String, Option<String>, bool) {
    let expect = match step {
        Step::RegisterDevice { expect, .. } | Step::RegisterFile { expect, .. } => {
            expect.as_deref()
        }
        Step::Transfer { expect, .. } => Some(expect.as_deref().unwrap_or("settled")),
        _ => None,
    };
    match result {
        Err(e) => {
            let kind = e.kind();
            let met = expect.is_some_and(|x| kind_matches(kind, x));
            (format!("error: {e}"), Some(kind.to_string()), met)
        }
        Ok(Done::Ok) => ("ok".into(), None, matches!(expect, None | Some("ok"))),
        Ok(Done::Transfer(out)) => {
            let Step::Transfer {
                expect_failed_at,
                expect_refunded,
                ..
            } = step
            else {
                unreachable!("transfer outcome from a transfer step")
            };
            let kind = out.error.as_ref().map(|e| e.kind().to_string());
            let outcome = match (&out.failed_at, &out.error) {
                (Some(at), Some(e)) => format!("aborted at {at:?}: {e}; refunded={}", out.refunded),
                _ => "settled".to_string(),
            };
            let x = expect.unwrap_or("settled");
            let mut met = match &kind {
                None => x == "settled",
                Some(k) => x == "aborted" || kind_matches(k, x),
            };
            if let Some(at) = expect_failed_at {
                met &= out.failed_at == Some(*at);
            }
            if let Some(r) = expect_refunded {
                met &= out.refunded == *r;
            }
            (outcome, kind, met)
        }
    }
}

/// Runs every step, collecting outcomes instead of stopping at the first
/// failure. Setup problems (bad names, unreadable files) are errors.
pub fn run_scenario(s: &Scenario, base: Option<&Path>) -> Result<ScenarioReport, ProtocolError> {
    let mut w = World::setup(s, base)?;
    let mut steps = Vec::new();
    let mut final_error = None;
    for (index, step) in s.steps.iter().enumerate() {
        let label = step.label();
        w.env
            .bus
            .record(Event::Note(format!("step {index}: {label}")));
        let result = w.run(step);
        if let Err(ProtocolError::Scenario(msg)) = &result {
            if !step.is_check() {
                return Err(scenario_err(format!("step {index}: {msg}")));
            }
        }
        let (outcome, error, met) = judge(step, &result);
        if !step.is_check() {
            final_error = error.clone();
        }
        steps.push(StepReport {
            index,
            step: label,
            outcome,
            error,
            met,
        });
    }
    w.env.ledger.check_conservation()?;
    let leaks = w.env.bus.transcript().scan(&w.needles());
    let addresses = w
        .devices
        .iter()
        .map(|(n, d)| (n.clone(), d.address()))
        .collect();
    Ok(ScenarioReport {
        name: s.name.clone(),
        steps,
        transfers: w.transfers,
        leaks,
        addresses,
        env: w.env,
        final_error,
    })
}
