//! In-process transport with scripted faults and a full transcript.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

/// Message kinds exchanged between parties.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MsgKind {
    IdentityRequest,
    HandshakeReply,
    ChallengeResponse,
    RegistrationAck,
    Cancellation,
    TermsOffer,
    ContractNotice,
    Delivery,
    Confirmation,
}

/// A message split into the part sent in the clear and the AEAD-protected
/// part. The confidentiality scan only ever inspects `plaintext`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Message {
    pub from: String,
    pub to: String,
    pub kind: MsgKind,
    pub plaintext: Vec<u8>,
    pub ciphertext: Vec<u8>,
}

impl Message {
    pub fn new(from: &str, to: &str, kind: MsgKind) -> Self {
        Self {
            from: from.to_string(),
            to: to.to_string(),
            kind,
            plaintext: Vec::new(),
            ciphertext: Vec::new(),
        }
    }

    pub fn plain(mut self, bytes: Vec<u8>) -> Self {
        self.plaintext = bytes;
        self
    }

    pub fn sealed(mut self, bytes: Vec<u8>) -> Self {
        self.ciphertext = bytes;
        self
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Part {
    Plaintext,
    Ciphertext,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "action")]
pub enum FaultAction {
    Drop,
    /// Flip the low bit of one byte (offset taken modulo the part length).
    Tamper {
        part: Part,
        offset: usize,
    },
    /// Deliver the previous message of the same kind instead.
    Replay,
}

/// Applies `action` to the `occurrence`-th (1-based) message of `kind`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Fault {
    pub kind: MsgKind,
    pub occurrence: usize,
    #[serde(flatten)]
    pub action: FaultAction,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Event {
    Sent(Message),
    Delivered(Message),
    Dropped {
        kind: MsgKind,
        occurrence: usize,
    },
    Tampered {
        kind: MsgKind,
        occurrence: usize,
        part: Part,
        offset: usize,
    },
    Replayed {
        kind: MsgKind,
        occurrence: usize,
    },
    Stage {
        session: u64,
        stage: String,
    },
    Ledger {
        txid: [u8; 32],
        kind: String,
        bytes: Vec<u8>,
    },
    Note(String),
}

/// Line-oriented JSON form; large byte strings are summarised by length
/// and SHA-256 so transcripts stay readable.
#[derive(Serialize)]
struct Record<'a> {
    seq: usize,
    event: &'static str,
    #[serde(skip_serializing_if = "Option::is_none")]
    from: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    to: Option<&'a str>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kind: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    occurrence: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    plaintext: Option<Blob>,
    #[serde(skip_serializing_if = "Option::is_none")]
    ciphertext: Option<Blob>,
    #[serde(skip_serializing_if = "Option::is_none")]
    detail: Option<String>,
}

#[derive(Serialize)]
#[serde(untagged)]
enum Blob {
    Hex(String),
    Summary { len: usize, sha256: String },
}

const INLINE_LIMIT: usize = 256;

fn blob(b: &[u8]) -> Option<Blob> {
    if b.is_empty() {
        None
    } else if b.len() <= INLINE_LIMIT {
        Some(Blob::Hex(hex::encode(b)))
    } else {
        Some(Blob::Summary {
            len: b.len(),
            sha256: hex::encode(crate::crypto::hash(b)),
        })
    }
}

#[derive(Clone, Debug, Default)]
pub struct Transcript {
    events: Vec<Event>,
}

/// A needle found in the clear.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Leak {
    pub event: usize,
    pub needle: usize,
    pub offset: usize,
}

impl Transcript {
    pub fn push(&mut self, e: Event) {
        self.events.push(e);
    }

    pub fn events(&self) -> &[Event] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn messages(&self) -> impl Iterator<Item = &Message> {
        self.events.iter().filter_map(|e| match e {
            Event::Sent(m) | Event::Delivered(m) => Some(m),
            _ => None,
        })
    }

    /// Every byte string that crossed a boundary unencrypted.
    pub fn cleartext(&self) -> impl Iterator<Item = (usize, &[u8])> {
        self.events.iter().enumerate().filter_map(|(i, e)| match e {
            Event::Sent(m) | Event::Delivered(m) => Some((i, m.plaintext.as_slice())),
            Event::Ledger { bytes, .. } => Some((i, bytes.as_slice())),
            Event::Note(s) => Some((i, s.as_bytes())),
            _ => None,
        })
    }

    /// Searches all cleartext for each needle.
    pub fn scan(&self, needles: &[Vec<u8>]) -> Vec<Leak> {
        let mut out = Vec::new();
        for (event, hay) in self.cleartext() {
            for (ni, needle) in needles.iter().enumerate() {
                if needle.is_empty() || needle.len() > hay.len() {
                    continue;
                }
                if let Some(offset) = hay
                    .windows(needle.len())
                    .position(|w| w == needle.as_slice())
                {
                    out.push(Leak {
                        event,
                        needle: ni,
                        offset,
                    });
                }
            }
        }
        out
    }

    pub fn to_json_lines(&self) -> String {
        let mut out = String::new();
        for (seq, e) in self.events.iter().enumerate() {
            let mut r = Record {
                seq,
                event: "",
                from: None,
                to: None,
                kind: None,
                occurrence: None,
                plaintext: None,
                ciphertext: None,
                detail: None,
            };
            match e {
                Event::Sent(m) | Event::Delivered(m) => {
                    r.event = if matches!(e, Event::Sent(_)) {
                        "send"
                    } else {
                        "deliver"
                    };
                    r.from = Some(&m.from);
                    r.to = Some(&m.to);
                    r.kind = Some(format!("{:?}", m.kind));
                    r.plaintext = blob(&m.plaintext);
                    r.ciphertext = blob(&m.ciphertext);
                }
                Event::Dropped { kind, occurrence } => {
                    r.event = "drop";
                    r.kind = Some(format!("{kind:?}"));
                    r.occurrence = Some(*occurrence);
                }
                Event::Tampered {
                    kind,
                    occurrence,
                    part,
                    offset,
                } => {
                    r.event = "tamper";
                    r.kind = Some(format!("{kind:?}"));
                    r.occurrence = Some(*occurrence);
                    r.detail = Some(format!("{part:?}@{offset}"));
                }
                Event::Replayed { kind, occurrence } => {
                    r.event = "replay";
                    r.kind = Some(format!("{kind:?}"));
                    r.occurrence = Some(*occurrence);
                }
                Event::Stage { session, stage } => {
                    r.event = "stage";
                    r.detail = Some(format!("session {session}: {stage}"));
                }
                Event::Ledger { txid, kind, bytes } => {
                    r.event = "ledger";
                    r.kind = Some(kind.clone());
                    r.detail = Some(hex::encode(txid));
                    r.plaintext = blob(bytes);
                }
                Event::Note(s) => {
                    r.event = "note";
                    r.detail = Some(s.clone());
                }
            }
            out.push_str(&serde_json::to_string(&r).expect("record serialises"));
            out.push('\n');
        }
        out
    }
}

/// Delivers synchronously in submission order, applying the fault schedule.
#[derive(Clone, Debug, Default)]
pub struct Bus {
    faults: Vec<Fault>,
    counts: HashMap<MsgKind, usize>,
    history: HashMap<MsgKind, Vec<Message>>,
    transcript: Transcript,
}

impl Bus {
    pub fn new(faults: Vec<Fault>) -> Self {
        Self {
            faults,
            ..Self::default()
        }
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn record(&mut self, e: Event) {
        self.transcript.push(e);
    }

    /// Sends `msg` and returns what arrives at the recipient, if anything.
    pub fn transmit(&mut self, msg: Message) -> Option<Message> {
        let kind = msg.kind;
        let occurrence = {
            let n = self.counts.entry(kind).or_insert(0);
            *n += 1;
            *n
        };
        self.transcript.push(Event::Sent(msg.clone()));
        let fault = self
            .faults
            .iter()
            .find(|f| f.kind == kind && f.occurrence == occurrence)
            .map(|f| f.action);
        let delivered = match fault {
            None => Some(msg.clone()),
            Some(FaultAction::Drop) => {
                self.transcript.push(Event::Dropped { kind, occurrence });
                None
            }
            Some(FaultAction::Tamper { part, offset }) => {
                let mut m = msg.clone();
                let buf = match part {
                    Part::Plaintext => &mut m.plaintext,
                    Part::Ciphertext => &mut m.ciphertext,
                };
                if !buf.is_empty() {
                    let at = offset % buf.len();
                    buf[at] ^= 1;
                    self.transcript.push(Event::Tampered {
                        kind,
                        occurrence,
                        part,
                        offset: at,
                    });
                }
                Some(m)
            }
            Some(FaultAction::Replay) => match self.history.get(&kind).and_then(|h| h.last()) {
                Some(old) => {
                    self.transcript.push(Event::Replayed { kind, occurrence });
                    Some(old.clone())
                }
                None => Some(msg.clone()),
            },
        };
        self.history.entry(kind).or_default().push(msg);
        if let Some(d) = &delivered {
            self.transcript.push(Event::Delivered(d.clone()));
        }
        delivered
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn msg(kind: MsgKind, p: &[u8], c: &[u8]) -> Message {
        Message::new("a", "b", kind)
            .plain(p.to_vec())
            .sealed(c.to_vec())
    }

    #[test]
    fn faults_hit_the_scheduled_occurrence_only() {
        let mut bus = Bus::new(vec![
            Fault {
                kind: MsgKind::Delivery,
                occurrence: 2,
                action: FaultAction::Drop,
            },
            Fault {
                kind: MsgKind::TermsOffer,
                occurrence: 1,
                action: FaultAction::Tamper {
                    part: Part::Ciphertext,
                    offset: 5,
                },
            },
        ]);
        assert!(bus.transmit(msg(MsgKind::Delivery, b"x", b"")).is_some());
        assert!(bus.transmit(msg(MsgKind::Delivery, b"y", b"")).is_none());
        assert!(bus.transmit(msg(MsgKind::Delivery, b"z", b"")).is_some());
        let got = bus
            .transmit(msg(MsgKind::TermsOffer, b"p", &[0, 0]))
            .unwrap();
        assert_eq!(got.ciphertext, vec![0, 1]);
        assert_eq!(got.plaintext, b"p");
    }

    #[test]
    fn replay_delivers_previous_message() {
        let mut bus = Bus::new(vec![Fault {
            kind: MsgKind::ChallengeResponse,
            occurrence: 2,
            action: FaultAction::Replay,
        }]);
        bus.transmit(msg(MsgKind::ChallengeResponse, b"", b"old"));
        let got = bus
            .transmit(msg(MsgKind::ChallengeResponse, b"", b"new"))
            .unwrap();
        assert_eq!(got.ciphertext, b"old");
    }

    #[test]
    fn scan_finds_only_cleartext() {
        let mut bus = Bus::default();
        bus.transmit(msg(MsgKind::Delivery, b"..DSLK..", b"secret-in-ciphertext"));
        let t = bus.transcript();
        let leaks = t.scan(&[b"DSLK".to_vec(), b"secret".to_vec()]);
        assert_eq!(leaks.len(), 2); // sent + delivered copies
        assert!(leaks.iter().all(|l| l.needle == 0 && l.offset == 2));
    }

    #[test]
    fn json_lines_are_parseable() {
        let mut bus = Bus::default();
        bus.transmit(msg(MsgKind::Delivery, &[7; 1000], b"c"));
        bus.record(Event::Stage {
            session: 1,
            stage: "Settled".into(),
        });
        let text = bus.transcript().to_json_lines();
        let lines: Vec<serde_json::Value> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), 3);
        assert_eq!(lines[0]["event"], "send");
        assert_eq!(lines[0]["plaintext"]["len"], 1000);
        assert_eq!(lines[0]["ciphertext"], "63");
        assert_eq!(lines[2]["event"], "stage");
    }

    #[test]
    fn fault_toml_shape() {
        #[derive(Deserialize)]
        struct W {
            fault: Vec<Fault>,
        }
        let w: W = toml::from_str(
            r#"
            [[fault]]
            kind = "delivery"
            occurrence = 1
            action = "tamper"
            part = "plaintext"
            offset = 100

            [[fault]]
            kind = "challenge_response"
            occurrence = 2
            action = "replay"
            "#,
        )
        .unwrap();
        assert_eq!(
            w.fault[0].action,
            FaultAction::Tamper {
                part: Part::Plaintext,
                offset: 100
            }
        );
        assert_eq!(w.fault[1].action, FaultAction::Replay);
    }
}
