//! Stable names and process exit codes for every error kind.

use crate::crypto::CryptoError;
use crate::ledger::LedgerError;
use crate::protocol::ProtocolError;
use crate::puf::PufError;
use crate::watermark::WatermarkError;

/// `(kind, exit code)`. Codes 1..=9 are left to front ends.
pub const EXIT_CODES: &[(&str, u8)] = &[
    ("crypto.PointNotOnCurve", 10),
    ("crypto.InvalidSignatureEncoding", 11),
    ("crypto.AuthFailure", 12),
    ("crypto.InvalidScalar", 13),
    ("crypto.EmptyMessage", 14),
    ("crypto.UnsupportedCurve", 15),
    ("puf.WrongReadingLength", 20),
    ("puf.ReproductionFailed", 21),
    ("puf.AuthFailure", 22),
    ("puf.InvalidParams", 23),
    ("puf.MalformedRecord", 24),
    ("watermark.UnsupportedFormat", 30),
    ("watermark.InsufficientCapacity", 31),
    ("watermark.DimensionMismatch", 32),
    ("watermark.InvalidImage", 33),
    ("watermark.MalformedLocationKey", 34),
    ("watermark.EmptyWatermark", 35),
    ("ledger.BadSignature", 40),
    ("ledger.UnknownSender", 41),
    ("ledger.UnknownParty", 42),
    ("ledger.Unauthorized", 43),
    ("ledger.DuplicateTx", 44),
    ("ledger.DuplicateDigest", 45),
    ("ledger.UnknownMarker", 46),
    ("ledger.NotCurrentHolder", 47),
    ("ledger.PendingSettlement", 48),
    ("ledger.UnknownContract", 49),
    ("ledger.ContractMismatch", 50),
    ("ledger.WrongContractState", 51),
    ("ledger.DeadlineNotReached", 52),
    ("ledger.DeadlinePassed", 53),
    ("ledger.InsufficientFunds", 54),
    ("ledger.AmountMismatch", 55),
    ("ledger.InvalidTerms", 56),
    ("ledger.InvalidPublicKey", 57),
    ("ledger.ResponseMismatch", 58),
    ("ledger.UnknownId", 59),
    ("ledger.AlreadyRegistered", 60),
    ("ledger.AlreadyEnrolled", 61),
    ("ledger.TickRegression", 62),
    ("ledger.Malformed", 63),
    ("ledger.Corrupt", 64),
    ("ledger.ConservationViolated", 65),
    ("ledger.Io", 66),
    ("protocol.HashMismatch", 80),
    ("protocol.WatermarkInvalid", 81),
    ("protocol.MessageLost", 82),
    ("protocol.MalformedMessage", 83),
    ("protocol.Scenario", 84),
];

/// Exit code for a kind name, accepting the bare variant name when it is
/// unambiguous.
pub fn exit_code(kind: &str) -> Option<u8> {
    let mut hits = EXIT_CODES
        .iter()
        .filter(|(k, _)| *k == kind || k.split_once('.').is_some_and(|(_, v)| v == kind));
    match (hits.next(), hits.next()) {
        (Some(&(_, code)), None) => Some(code),
        _ => None,
    }
}

/// True if `expected` names `kind`, either fully or by bare variant.
pub fn kind_matches(kind: &str, expected: &str) -> bool {
    kind == expected || kind.split_once('.').is_some_and(|(_, v)| v == expected)
}

pub trait ErrorKind {
    fn kind(&self) -> &'static str;

    fn exit_code(&self) -> u8 {
        exit_code(self.kind()).expect("every kind has a code")
    }
}

impl ErrorKind for CryptoError {
    fn kind(&self) -> &'static str {
        match self {
            Self::PointNotOnCurve => "crypto.PointNotOnCurve",
            Self::InvalidSignatureEncoding => "crypto.InvalidSignatureEncoding",
            Self::AuthFailure => "crypto.AuthFailure",
            Self::InvalidScalar => "crypto.InvalidScalar",
            Self::EmptyMessage => "crypto.EmptyMessage",
            Self::UnsupportedCurve(_) => "crypto.UnsupportedCurve",
        }
    }
}

impl ErrorKind for PufError {
    fn kind(&self) -> &'static str {
        match self {
            Self::WrongReadingLength { .. } => "puf.WrongReadingLength",
            Self::ReproductionFailed => "puf.ReproductionFailed",
            Self::AuthFailure => "puf.AuthFailure",
            Self::InvalidParams(_) => "puf.InvalidParams",
            Self::MalformedRecord(_) => "puf.MalformedRecord",
        }
    }
}

impl ErrorKind for WatermarkError {
    fn kind(&self) -> &'static str {
        match self {
            Self::UnsupportedFormat(_) => "watermark.UnsupportedFormat",
            Self::InsufficientCapacity { .. } => "watermark.InsufficientCapacity",
            Self::DimensionMismatch(..) => "watermark.DimensionMismatch",
            Self::InvalidImage(_) => "watermark.InvalidImage",
            Self::MalformedLocationKey(_) => "watermark.MalformedLocationKey",
            Self::EmptyWatermark => "watermark.EmptyWatermark",
        }
    }
}

impl ErrorKind for LedgerError {
    fn kind(&self) -> &'static str {
        use LedgerError::*;
        match self {
            BadSignature => "ledger.BadSignature",
            UnknownSender(_) => "ledger.UnknownSender",
            UnknownParty(_) => "ledger.UnknownParty",
            Unauthorized => "ledger.Unauthorized",
            DuplicateTx => "ledger.DuplicateTx",
            DuplicateDigest => "ledger.DuplicateDigest",
            UnknownMarker => "ledger.UnknownMarker",
            NotCurrentHolder => "ledger.NotCurrentHolder",
            PendingSettlement => "ledger.PendingSettlement",
            UnknownContract => "ledger.UnknownContract",
            ContractMismatch => "ledger.ContractMismatch",
            WrongContractState(_) => "ledger.WrongContractState",
            DeadlineNotReached { .. } => "ledger.DeadlineNotReached",
            DeadlinePassed => "ledger.DeadlinePassed",
            InsufficientFunds => "ledger.InsufficientFunds",
            AmountMismatch { .. } => "ledger.AmountMismatch",
            InvalidTerms(_) => "ledger.InvalidTerms",
            InvalidPublicKey => "ledger.InvalidPublicKey",
            ResponseMismatch => "ledger.ResponseMismatch",
            UnknownId(_) => "ledger.UnknownId",
            AlreadyRegistered => "ledger.AlreadyRegistered",
            AlreadyEnrolled => "ledger.AlreadyEnrolled",
            TickRegression { .. } => "ledger.TickRegression",
            Malformed(_) => "ledger.Malformed",
            Corrupt(_) => "ledger.Corrupt",
            ConservationViolated { .. } => "ledger.ConservationViolated",
            Io(_) => "ledger.Io",
        }
    }
}

impl ErrorKind for ProtocolError {
    fn kind(&self) -> &'static str {
        match self {
            Self::Crypto(e) => e.kind(),
            Self::Puf(e) => e.kind(),
            Self::Watermark(e) => e.kind(),
            Self::Ledger(e) => e.kind(),
            Self::HashMismatch => "protocol.HashMismatch",
            Self::WatermarkInvalid => "protocol.WatermarkInvalid",
            Self::MessageLost(_) => "protocol.MessageLost",
            Self::MalformedMessage(_) => "protocol.MalformedMessage",
            Self::Scenario(_) => "protocol.Scenario",
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ledger::ContractState;
    use crate::protocol::MsgKind;
    use std::collections::BTreeSet;

    fn every_error() -> Vec<ProtocolError> {
        let crypto = [
            CryptoError::PointNotOnCurve,
            CryptoError::InvalidSignatureEncoding,
            CryptoError::AuthFailure,
            CryptoError::InvalidScalar,
            CryptoError::EmptyMessage,
            CryptoError::UnsupportedCurve("x".into()),
        ];
        let puf = [
            PufError::WrongReadingLength {
                expected: 1,
                got: 2,
            },
            PufError::ReproductionFailed,
            PufError::AuthFailure,
            PufError::InvalidParams("x".into()),
            PufError::MalformedRecord("x"),
        ];
        let wm = [
            WatermarkError::UnsupportedFormat("x".into()),
            WatermarkError::InsufficientCapacity {
                needed: 1,
                available: 0,
            },
            WatermarkError::DimensionMismatch(1, 1, 2, 2),
            WatermarkError::InvalidImage("x"),
            WatermarkError::MalformedLocationKey("x"),
            WatermarkError::EmptyWatermark,
        ];
        use LedgerError::*;
        let ledger = [
            BadSignature,
            UnknownSender(crate::crypto::Address([0; 20])),
            UnknownParty(crate::crypto::Address([0; 20])),
            Unauthorized,
            DuplicateTx,
            DuplicateDigest,
            UnknownMarker,
            NotCurrentHolder,
            PendingSettlement,
            UnknownContract,
            ContractMismatch,
            WrongContractState(ContractState::Funded),
            DeadlineNotReached {
                deadline: 1,
                tick: 0,
            },
            DeadlinePassed,
            InsufficientFunds,
            AmountMismatch {
                expected: 1,
                got: 2,
            },
            InvalidTerms("x"),
            InvalidPublicKey,
            ResponseMismatch,
            UnknownId("x".into()),
            AlreadyRegistered,
            AlreadyEnrolled,
            TickRegression {
                current: 1,
                requested: 0,
            },
            Malformed("x"),
            Corrupt("x".into()),
            ConservationViolated {
                expected: 1,
                actual: 2,
            },
            Io("x".into()),
        ];
        let mut all: Vec<ProtocolError> = Vec::new();
        all.extend(crypto.into_iter().map(Into::into));
        all.extend(puf.into_iter().map(Into::into));
        all.extend(wm.into_iter().map(Into::into));
        all.extend(ledger.into_iter().map(Into::into));
        all.extend([
            ProtocolError::HashMismatch,
            ProtocolError::WatermarkInvalid,
            ProtocolError::MessageLost(MsgKind::Delivery),
            ProtocolError::MalformedMessage(MsgKind::Delivery),
            ProtocolError::Scenario("x".into()),
        ]);
        all
    }

    #[test]
    fn kinds_and_codes_are_one_to_one() {
        let errors = every_error();
        assert_eq!(errors.len(), EXIT_CODES.len());
        let kinds: BTreeSet<_> = errors.iter().map(|e| e.kind()).collect();
        let codes: BTreeSet<_> = errors.iter().map(|e| e.exit_code()).collect();
        assert_eq!(kinds.len(), errors.len());
        assert_eq!(codes.len(), errors.len());
        assert!(codes.iter().all(|&c| c >= 10));
    }

    #[test]
    fn bare_names_resolve_only_when_unambiguous() {
        assert_eq!(exit_code("DuplicateDigest"), Some(45));
        assert_eq!(exit_code("ledger.DuplicateDigest"), Some(45));
        assert_eq!(exit_code("AuthFailure"), None);
        assert_eq!(exit_code("puf.AuthFailure"), Some(22));
        assert!(kind_matches("protocol.HashMismatch", "HashMismatch"));
        assert!(!kind_matches("protocol.HashMismatch", "Hash"));
    }
}
