//! Location-keyed LSB watermarking of 24-bit images.
//!
//! Each pixel is classified by a 3-bit feature group built from bit 1 of its
//! three channels XOR three bits of a keyed stream. The class decides whether
//! the pixel carries a watermark bit (LSB replacement or LSB matching), gets a
//! random LSB, or is left alone. Only bit 0 of one channel is ever written, so
//! the extractor can recompute every feature group from the covered image.

mod bmp;
mod embed;
mod psnr;

pub use bmp::{load_bmp, save_bmp};
pub use embed::{
    classify, embed, extract, feature_group, lsbm, lsbr, EmbedConfig, FeatureGroup, XStream,
};
pub use psnr::{mse, psnr};

use crate::crypto::{Signature, SIGNATURE_LEN};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum WatermarkError {
    #[error("unsupported image format: {0}")]
    UnsupportedFormat(String),
    #[error("insufficient capacity: {available} carrier pixels for {needed} watermark bits")]
    InsufficientCapacity { needed: usize, available: usize },
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    DimensionMismatch(usize, usize, usize, usize),
    #[error("invalid image: {0}")]
    InvalidImage(&'static str),
    #[error("malformed location key: {0}")]
    MalformedLocationKey(&'static str),
    #[error("empty watermark")]
    EmptyWatermark,
}

/// Row-major RGB image; pixel 0 is the top-left corner.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Image24 {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<[u8; 3]>,
}

impl Image24 {
    pub fn new(width: usize, height: usize, pixels: Vec<[u8; 3]>) -> Result<Self, WatermarkError> {
        if width == 0 || height == 0 {
            return Err(WatermarkError::InvalidImage("zero dimension"));
        }
        if pixels.len() != width * height {
            return Err(WatermarkError::InvalidImage(
                "pixel count does not match dimensions",
            ));
        }
        Ok(Self {
            width,
            height,
            pixels,
        })
    }

    pub fn channel_bytes(&self) -> impl Iterator<Item = u8> + '_ {
        self.pixels.iter().flatten().copied()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Channel {
    R = 0,
    G = 1,
    B = 2,
}

impl Channel {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::R),
            1 => Some(Self::G),
            2 => Some(Self::B),
            _ => None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Action {
    Lsbr = 0,
    Lsbm = 1,
    RandomFill = 2,
    Unchanged = 3,
}

impl Action {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Self::Lsbr),
            1 => Some(Self::Lsbm),
            2 => Some(Self::RandomFill),
            3 => Some(Self::Unchanged),
            _ => None,
        }
    }

    pub fn is_carrier(self) -> bool {
        matches!(self, Self::Lsbr | Self::Lsbm)
    }
}

/// Total map from feature value (0..=7) to action.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RuleTable(pub [Action; 8]);

impl Default for RuleTable {
    /// `v -> v mod 4`: two feature values per action.
    fn default() -> Self {
        use Action::*;
        Self([
            Lsbr, Lsbm, RandomFill, Unchanged, Lsbr, Lsbm, RandomFill, Unchanged,
        ])
    }
}

impl RuleTable {
    pub fn action(&self, feature: FeatureGroup) -> Action {
        self.0[feature.value() as usize]
    }

    pub fn to_codes(&self) -> [u8; 8] {
        self.0.map(|a| a as u8)
    }

    pub fn from_codes(codes: [u8; 8]) -> Option<Self> {
        let mut out = [Action::Unchanged; 8];
        for (slot, code) in out.iter_mut().zip(codes) {
            *slot = Action::from_code(code)?;
        }
        Some(Self(out))
    }
}

/// The watermark payload: bits in transmission order.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct Watermark {
    pub bits: Vec<bool>,
}

impl Watermark {
    /// MSB-first expansion of `bytes`.
    pub fn from_bytes(bytes: &[u8]) -> Self {
        Self {
            bits: bytes
                .iter()
                .flat_map(|b| (0..8).rev().map(move |i| (b >> i) & 1 == 1))
                .collect(),
        }
    }

    pub fn from_signature(sig: &Signature) -> Self {
        Self::from_bytes(sig.as_bytes())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.bits
            .chunks(8)
            .map(|c| c.iter().fold(0u8, |acc, &b| (acc << 1) | u8::from(b)) << (8 - c.len()))
            .collect()
    }

    /// Reinterprets a 512-bit watermark as a signature.
    pub fn to_signature(&self) -> Option<Signature> {
        if self.bits.len() != SIGNATURE_LEN * 8 {
            return None;
        }
        Signature::from_bytes(&self.to_bytes()).ok()
    }

    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }
}

pub const LOCATION_KEY_MAGIC: &[u8; 4] = b"DSLK";
pub const LOCATION_KEY_VERSION: u8 = 1;
pub const LOCATION_KEY_LEN: usize = 4 + 1 + 32 + 8 + 1 + 4 + 8;

/// Everything the extractor needs to find the watermark again.
#[derive(Clone, PartialEq, Eq, Debug)]
pub struct LocationKey {
    pub seed_x: [u8; 32],
    pub fill_seed: u64,
    pub target_channel: Channel,
    pub wm_len: u32,
    pub rule_table: RuleTable,
}

impl LocationKey {
    /// `"DSLK" | 0x01 | seed_x[32] | fill_seed u64 | channel u8 | wm_len u32 | rules[8]`,
    /// integers big-endian.
    pub fn to_bytes(&self) -> [u8; LOCATION_KEY_LEN] {
        let mut out = [0u8; LOCATION_KEY_LEN];
        out[..4].copy_from_slice(LOCATION_KEY_MAGIC);
        out[4] = LOCATION_KEY_VERSION;
        out[5..37].copy_from_slice(&self.seed_x);
        out[37..45].copy_from_slice(&self.fill_seed.to_be_bytes());
        out[45] = self.target_channel as u8;
        out[46..50].copy_from_slice(&self.wm_len.to_be_bytes());
        out[50..58].copy_from_slice(&self.rule_table.to_codes());
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, WatermarkError> {
        use WatermarkError::MalformedLocationKey as Bad;
        if bytes.len() != LOCATION_KEY_LEN {
            return Err(Bad("wrong length"));
        }
        if &bytes[..4] != LOCATION_KEY_MAGIC {
            return Err(Bad("bad magic"));
        }
        if bytes[4] != LOCATION_KEY_VERSION {
            return Err(Bad("unsupported version"));
        }
        Ok(Self {
            seed_x: bytes[5..37].try_into().unwrap(),
            fill_seed: u64::from_be_bytes(bytes[37..45].try_into().unwrap()),
            target_channel: Channel::from_code(bytes[45]).ok_or(Bad("bad channel"))?,
            wm_len: u32::from_be_bytes(bytes[46..50].try_into().unwrap()),
            rule_table: RuleTable::from_codes(bytes[50..58].try_into().unwrap())
                .ok_or(Bad("bad action code"))?,
        })
    }
}
