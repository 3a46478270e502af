use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use datasafe::crypto::curve_by_name;
use datasafe::puf::{PufError, PufParams, DEFAULT_FLIP_PROB, KEY_BITS, SPARE_BITS};
use datasafe::watermark::RuleTable;

use crate::error::CliError;

pub const DEFAULT_CONFIG: &str = "datasafe.toml";

#[derive(Clone, Debug, PartialEq, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub ledger_path: PathBuf,
    pub device_dir: PathBuf,
    pub secure_db: PathBuf,
    pub curve: String,
    pub master_seed: u64,
    pub puf: PufSection,
    /// Action codes for feature values 0..=7 (0 lsbr, 1 lsbm, 2 fill, 3 unchanged).
    pub rule_table: [u8; 8],
}

#[derive(Clone, Copy, Debug, PartialEq, Default, Deserialize, Serialize)]
#[serde(default, deny_unknown_fields)]
pub struct PufSection {
    pub n_puf: Option<usize>,
    pub flip_prob: Option<f64>,
    pub repetition: Option<usize>,
}

impl Default for Config {
    fn default() -> Self {
        Self {
            ledger_path: "ledger.dslg".into(),
            device_dir: "devices".into(),
            secure_db: "ca/secure_db.jsonl".into(),
            curve: "P-256".into(),
            master_seed: 1,
            puf: PufSection::default(),
            rule_table: RuleTable::default().to_codes(),
        }
    }
}

fn parse<T: std::str::FromStr>(var: &str, v: &str) -> Result<T, CliError> {
    v.trim()
        .parse()
        .map_err(|_| CliError::Config(format!("{var}: cannot parse `{v}`")))
}

impl Config {
    /// Reads `explicit` (or `datasafe.toml` under `root` when present), then
    /// applies `DATASAFE_*` overrides from `vars`.
    pub fn load(
        root: &Path,
        explicit: Option<&Path>,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, CliError> {
        let path = match explicit {
            Some(p) => Some(root.join(p)),
            None => Some(root.join(DEFAULT_CONFIG)).filter(|p| p.exists()),
        };
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(&p).map_err(|e| CliError::io(&p, e))?;
                toml::from_str(&text)
                    .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
            }
            None => Config::default(),
        };
        for (k, v) in vars {
            let Some(name) = k.strip_prefix("DATASAFE_") else {
                continue;
            };
            match name {
                "LEDGER_PATH" => cfg.ledger_path = v.into(),
                "DEVICE_DIR" => cfg.device_dir = v.into(),
                "SECURE_DB" => cfg.secure_db = v.into(),
                "CURVE" => cfg.curve = v,
                "MASTER_SEED" => cfg.master_seed = parse(&k, &v)?,
                "N_PUF" => cfg.puf.n_puf = Some(parse(&k, &v)?),
                "FLIP_PROB" => cfg.puf.flip_prob = Some(parse(&k, &v)?),
                "REPETITION" => cfg.puf.repetition = Some(parse(&k, &v)?),
                "RULE_TABLE" => {
                    let codes = v
                        .split(',')
                        .map(|c| parse::<u8>(&k, c))
                        .collect::<Result<Vec<_>, _>>()?;
                    cfg.rule_table = codes
                        .try_into()
                        .map_err(|_| CliError::Config(format!("{k}: expected 8 codes")))?;
                }
                _ => return Err(CliError::Config(format!("unknown variable {k}"))),
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn validate(&self) -> Result<(), CliError> {
        curve_by_name(&self.curve).map_err(CliError::core)?;
        self.rules()?;
        self.puf_params()?;
        Ok(())
    }

    pub fn rules(&self) -> Result<RuleTable, CliError> {
        RuleTable::from_codes(self.rule_table)
            .ok_or_else(|| CliError::Config(format!("invalid rule table {:?}", self.rule_table)))
    }

    pub fn puf_params(&self) -> Result<PufParams, CliError> {
        let flip = self.puf.flip_prob.unwrap_or(DEFAULT_FLIP_PROB);
        let mut p = match self.puf.repetition {
            Some(r) => PufParams::new(r, flip),
            None => PufParams::auto(flip),
        }
        .map_err(CliError::core)?;
        if let Some(n) = self.puf.n_puf {
            let need = KEY_BITS * p.repetition + SPARE_BITS;
            if n < need {
                return Err(CliError::core(PufError::InvalidParams(format!(
                    "n_puf {n} is below the {need} bits repetition {} needs",
                    p.repetition
                ))));
            }
            p.n_puf = n;
        }
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vars(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter()
            .map(|(a, b)| (a.to_string(), b.to_string()))
            .collect()
    }

    #[test]
    fn defaults_without_file() {
        let dir = tempfile::tempdir().unwrap();
        let c = Config::load(dir.path(), None, vec![]).unwrap();
        assert_eq!(c, Config::default());
        assert_eq!(c.puf_params().unwrap().repetition, 33);
    }

    #[test]
    fn file_then_environment() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(
            dir.path().join(DEFAULT_CONFIG),
            "master_seed = 9\n[puf]\nrepetition = 15\n",
        )
        .unwrap();
        let c = Config::load(
            dir.path(),
            None,
            vars(&[
                ("DATASAFE_MASTER_SEED", "12"),
                ("HOME", "/x"),
                ("DATASAFE_N_PUF", "5000"),
            ]),
        )
        .unwrap();
        assert_eq!(c.master_seed, 12);
        let p = c.puf_params().unwrap();
        assert_eq!((p.repetition, p.n_puf), (15, 5000));
    }

    #[test]
    fn bad_values_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let load = |v: &[(&str, &str)]| Config::load(dir.path(), None, vars(v));
        assert!(matches!(
            load(&[("DATASAFE_CURVE", "secp256k1")]),
            Err(CliError::Core(_))
        ));
        assert!(matches!(
            load(&[("DATASAFE_REPETITION", "4")]),
            Err(CliError::Core(_))
        ));
        assert!(matches!(
            load(&[("DATASAFE_N_PUF", "100")]),
            Err(CliError::Core(_))
        ));
        assert!(matches!(
            load(&[("DATASAFE_RULE_TABLE", "0,1,2")]),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            load(&[("DATASAFE_SEED", "1")]),
            Err(CliError::Config(_))
        ));
        assert!(matches!(
            Config::load(dir.path(), Some(Path::new("missing.toml")), vec![]),
            Err(CliError::Io { .. })
        ));
    }
}
