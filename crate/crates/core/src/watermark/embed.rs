use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::{Action, Channel, Image24, LocationKey, RuleTable, Watermark, WatermarkError};

/// 3-bit per-pixel class: `4*(x_i ^ r1) + 2*(x_{i+1} ^ g1) + (x_{i+2} ^ b1)`,
/// where `c1` is bit 1 of channel `c`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct FeatureGroup(u8);

impl FeatureGroup {
    pub fn value(self) -> u8 {
        self.0
    }
}

pub fn feature_group(pixel: [u8; 3], stream: [bool; 3]) -> FeatureGroup {
    let bit1 = |v: u8| (v >> 1) & 1;
    let [r, g, b] = pixel;
    let [x0, x1, x2] = stream.map(u8::from);
    FeatureGroup(4 * (x0 ^ bit1(r)) + 2 * (x1 ^ bit1(g)) + (x2 ^ bit1(b)))
}

/// LSB replacement: unchanged on match, else +1 for even and -1 for odd values.
pub fn lsbr(value: u8, bit: bool) -> u8 {
    if (value & 1 == 1) == bit {
        value
    } else if value.is_multiple_of(2) {
        value + 1
    } else {
        value - 1
    }
}

/// LSB matching with the ±1 direction fixed so that bit 1 never changes:
/// LSB 0 steps up, LSB 1 steps down. The 0 and 255 boundary cases fall out
/// of the same rule.
pub fn lsbm(value: u8, bit: bool) -> u8 {
    if (value & 1 == 1) == bit {
        return value;
    }
    match value {
        0 => 1,
        255 => 254,
        v if v & 1 == 0 => v + 1,
        v => v - 1,
    }
}

/// Keyed bit stream `x`, three bits per pixel in row-major order.
pub struct XStream {
    rng: ChaCha20Rng,
    word: u64,
    left: u32,
}

impl XStream {
    pub fn new(seed: [u8; 32]) -> Self {
        Self::from_rng(ChaCha20Rng::from_seed(seed))
    }

    fn from_u64(seed: u64) -> Self {
        Self::from_rng(ChaCha20Rng::seed_from_u64(seed))
    }

    fn from_rng(rng: ChaCha20Rng) -> Self {
        Self {
            rng,
            word: 0,
            left: 0,
        }
    }

    pub fn next_bit(&mut self) -> bool {
        if self.left == 0 {
            self.word = self.rng.next_u64();
            self.left = 64;
        }
        let b = self.word & 1 == 1;
        self.word >>= 1;
        self.left -= 1;
        b
    }

    pub fn next3(&mut self) -> [bool; 3] {
        [self.next_bit(), self.next_bit(), self.next_bit()]
    }
}

/// Action for every pixel, row-major. Depends only on bit 1 of each channel
/// and the stream, so embedding never changes it.
pub fn classify(img: &Image24, seed_x: [u8; 32], rules: &RuleTable) -> Vec<Action> {
    let mut x = XStream::new(seed_x);
    img.pixels
        .iter()
        .map(|&p| rules.action(feature_group(p, x.next3())))
        .collect()
}

/// Secret inputs to one embedding.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EmbedConfig {
    pub seed_x: [u8; 32],
    pub fill_seed: u64,
    pub rule_table: RuleTable,
    pub target_channel: Channel,
}

impl EmbedConfig {
    pub fn new(seed_x: [u8; 32], fill_seed: u64) -> Self {
        Self {
            seed_x,
            fill_seed,
            rule_table: RuleTable::default(),
            target_channel: Channel::B,
        }
    }
}

pub fn embed(
    img: &Image24,
    watermark: &Watermark,
    cfg: &EmbedConfig,
) -> Result<(Image24, LocationKey), WatermarkError> {
    if watermark.is_empty() {
        return Err(WatermarkError::EmptyWatermark);
    }
    let actions = classify(img, cfg.seed_x, &cfg.rule_table);
    let available = actions.iter().filter(|a| a.is_carrier()).count();
    if available < watermark.len() {
        return Err(WatermarkError::InsufficientCapacity {
            needed: watermark.len(),
            available,
        });
    }
    let ch = cfg.target_channel.index();
    let mut fill = XStream::from_u64(cfg.fill_seed);
    let mut payload = watermark.bits.iter().copied();
    let mut covered = img.clone();
    for (px, action) in covered.pixels.iter_mut().zip(&actions) {
        let v = &mut px[ch];
        match action {
            Action::Lsbr => {
                if let Some(bit) = payload.next() {
                    *v = lsbr(*v, bit);
                }
            }
            Action::Lsbm => {
                if let Some(bit) = payload.next() {
                    *v = lsbm(*v, bit);
                }
            }
            Action::RandomFill => *v = (*v & !1) | u8::from(fill.next_bit()),
            Action::Unchanged => {}
        }
    }
    let lk = LocationKey {
        seed_x: cfg.seed_x,
        fill_seed: cfg.fill_seed,
        target_channel: cfg.target_channel,
        wm_len: watermark.len() as u32,
        rule_table: cfg.rule_table,
    };
    Ok((covered, lk))
}

pub fn extract(covered: &Image24, lk: &LocationKey) -> Result<Watermark, WatermarkError> {
    let needed = lk.wm_len as usize;
    let ch = lk.target_channel.index();
    let actions = classify(covered, lk.seed_x, &lk.rule_table);
    let bits: Vec<bool> = covered
        .pixels
        .iter()
        .zip(&actions)
        .filter(|(_, a)| a.is_carrier())
        .take(needed)
        .map(|(p, _)| p[ch] & 1 == 1)
        .collect();
    if bits.len() < needed {
        return Err(WatermarkError::InsufficientCapacity {
            needed,
            available: bits.len(),
        });
    }
    Ok(Watermark { bits })
}
