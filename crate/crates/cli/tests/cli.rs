use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

fn scenarios() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn ds(root: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_datasafe"))
        .env_clear()
        .arg("--root")
        .arg(root)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn records(o: &Output) -> Vec<Value> {
    stdout(o)
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

fn stderr_record(o: &Output) -> Value {
    let text = String::from_utf8(o.stderr.clone()).unwrap();
    serde_json::from_str(text.lines().last().unwrap()).unwrap()
}

/// Small 24-bit BMP with a gradient.
fn write_bmp(path: &Path, w: u32, h: u32, salt: u8) {
    let row = (w * 3).div_ceil(4) * 4;
    let mut data = Vec::new();
    for y in 0..h {
        for x in 0..row {
            data.push((x.wrapping_mul(7) + y.wrapping_mul(13)) as u8 ^ salt);
        }
    }
    let mut b = Vec::new();
    b.extend_from_slice(b"BM");
    b.extend_from_slice(&(54 + data.len() as u32).to_le_bytes());
    b.extend_from_slice(&[0; 4]);
    b.extend_from_slice(&54u32.to_le_bytes());
    b.extend_from_slice(&40u32.to_le_bytes());
    b.extend_from_slice(&(w as i32).to_le_bytes());
    b.extend_from_slice(&(h as i32).to_le_bytes());
    b.extend_from_slice(&1u16.to_le_bytes());
    b.extend_from_slice(&24u16.to_le_bytes());
    b.extend_from_slice(&[0; 4]);
    b.extend_from_slice(&(data.len() as u32).to_le_bytes());
    b.extend_from_slice(&[0; 16]);
    b.extend_from_slice(&data);
    std::fs::write(path, b).unwrap();
}

#[test]
fn psnr_of_identical_files_is_infinite() {
    let dir = tempfile::tempdir().unwrap();
    write_bmp(&dir.path().join("a.bmp"), 16, 16, 0);
    let o = ds(dir.path(), &["wm", "psnr", "a.bmp", "a.bmp"]);
    assert_eq!(code(&o), 0);
    assert_eq!(stdout(&o).trim(), "inf");
}

#[test]
fn watermark_embed_then_extract() {
    let dir = tempfile::tempdir().unwrap();
    write_bmp(&dir.path().join("cover.bmp"), 64, 64, 3);
    let wm = "00112233445566778899aabbccddeeff";
    let o = ds(
        dir.path(),
        &[
            "--json",
            "wm",
            "embed",
            "cover.bmp",
            "out.bmp",
            "--watermark-hex",
            wm,
            "--key-out",
            "lk.bin",
        ],
    );
    assert_eq!(code(&o), 0, "{o:?}");
    assert_eq!(records(&o)[0]["bits"], 128);
    let o = ds(dir.path(), &["wm", "extract", "out.bmp", "--key", "lk.bin"]);
    assert_eq!(stdout(&o).trim(), wm);
    let o = ds(dir.path(), &["wm", "psnr", "cover.bmp", "out.bmp"]);
    let db: f64 = stdout(&o).trim().parse().unwrap();
    assert!(db > 50.0, "{db}");

    write_bmp(&dir.path().join("small.bmp"), 8, 8, 0);
    let o = ds(
        dir.path(),
        &[
            "wm",
            "embed",
            "small.bmp",
            "x.bmp",
            "--watermark-hex",
            &"ab".repeat(64),
            "--key-out",
            "k",
        ],
    );
    assert_eq!(code(&o), 31);
    assert_eq!(stderr_record(&o)["error"], "watermark.InsufficientCapacity");
}

#[test]
fn device_and_file_registration_flow() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    assert_eq!(code(&ds(root, &["device", "enroll", "A"])), 0);
    assert_eq!(code(&ds(root, &["device", "enroll", "A"])), 61);
    assert_eq!(
        code(&ds(root, &["device", "register", "A"])),
        66,
        "no ledger yet"
    );
    assert_eq!(code(&ds(root, &["ledger", "init", "--balance", "A=50"])), 0);
    assert_eq!(
        code(&ds(root, &["ledger", "init"])),
        66,
        "refuses to overwrite"
    );
    assert_eq!(code(&ds(root, &["device", "register", "A"])), 0);
    assert_eq!(code(&ds(root, &["device", "register", "A"])), 60);
    assert_eq!(code(&ds(root, &["device", "register", "Z"])), 59);

    write_bmp(&root.join("art.bmp"), 32, 32, 9);
    let o = ds(
        root,
        &["--json", "file", "register", "art.bmp", "--device", "A"],
    );
    assert_eq!(code(&o), 0);
    let digest = records(&o)[0]["digest"].as_str().unwrap().to_string();
    let o = ds(root, &["file", "register", "art.bmp", "--device", "A"]);
    assert_eq!(code(&o), 45);
    assert_eq!(stderr_record(&o)["error"], "ledger.DuplicateDigest");

    let o = ds(root, &["--json", "ledger", "trace", &digest]);
    let show = records(&ds(root, &["--json", "device", "show", "A"]));
    assert_eq!(records(&o)[0]["holder"], show[0]["address"]);
    let o = ds(root, &["--json", "ledger", "trace", "art.bmp"]);
    assert_eq!(records(&o).len(), 1);
    let o = ds(root, &["--json", "ledger", "verify"]);
    assert_eq!(records(&o)[0]["blocks"], 2);
}

#[test]
fn bundled_scenarios_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    for (name, want) in [
        ("honest", 0),
        ("duplicate", 45),
        ("tamper", 80),
        ("forged_key", 81),
        ("resale", 0),
    ] {
        let path = scenarios().join(format!("{name}.toml"));
        let o = ds(
            dir.path(),
            &["transfer", "run", "--scenario", path.to_str().unwrap()],
        );
        assert_eq!(code(&o), want, "{name}: {}", stdout(&o));
        if want != 0 {
            assert_eq!(stderr_record(&o)["code"], want);
        }
        let ledger = dir.path().join("runs").join(name).join("ledger.dslg");
        let v = ds(
            dir.path(),
            &["ledger", "verify", "--ledger", ledger.to_str().unwrap()],
        );
        assert_eq!(code(&v), 0);
    }
}

#[test]
fn trace_after_two_hops_lists_three_holders_in_order() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenarios().join("resale.toml");
    let o = ds(
        dir.path(),
        &[
            "--json",
            "transfer",
            "run",
            "--scenario",
            path.to_str().unwrap(),
        ],
    );
    assert_eq!(code(&o), 0);
    let recs = records(&o);
    let addr = |n: &str| {
        recs.iter()
            .find(|r| r["party"] == n)
            .map(|r| r["address"].clone())
            .unwrap()
    };
    let last_tx_u = recs
        .iter()
        .filter_map(|r| r["tx_u"].as_str())
        .next_back()
        .unwrap()
        .to_string();
    let t = ds(
        dir.path(),
        &[
            "--json",
            "ledger",
            "trace",
            &last_tx_u,
            "--ledger",
            "runs/resale/ledger.dslg",
        ],
    );
    let holders: Vec<Value> = records(&t).iter().map(|r| r["holder"].clone()).collect();
    assert_eq!(holders, vec![addr("A"), addr("B"), addr("C")]);
}

#[test]
fn scenario_output_is_byte_stable() {
    let path = scenarios().join("tamper.toml");
    let run = || {
        let dir = tempfile::tempdir().unwrap();
        let o = ds(
            dir.path(),
            &[
                "--json",
                "transfer",
                "run",
                "--scenario",
                path.to_str().unwrap(),
            ],
        );
        let t = std::fs::read(dir.path().join("runs/tamper/transcript.jsonl")).unwrap();
        let l = std::fs::read(dir.path().join("runs/tamper/ledger.dslg")).unwrap();
        (o.stdout, t, l)
    };
    assert_eq!(run(), run());
}

#[test]
fn mutated_ledger_file_fails_verify() {
    let dir = tempfile::tempdir().unwrap();
    let path = scenarios().join("honest.toml");
    assert_eq!(
        code(&ds(
            dir.path(),
            &[
                "transfer",
                "run",
                "--scenario",
                path.to_str().unwrap(),
                "--out",
                "r"
            ]
        )),
        0
    );
    let file = dir.path().join("r/ledger.dslg");
    let original = std::fs::read(&file).unwrap();
    let step = (original.len() / 40).max(1);
    for i in (0..original.len())
        .step_by(step)
        .chain([original.len() - 1])
    {
        let mut m = original.clone();
        m[i] ^= 0x01;
        std::fs::write(&file, &m).unwrap();
        let o = ds(
            dir.path(),
            &["ledger", "verify", "--ledger", "r/ledger.dslg"],
        );
        assert_ne!(code(&o), 0, "byte {i} mutation accepted");
    }
}

#[test]
fn configuration_errors_map_to_codes() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_datasafe"))
        .env_clear()
        .env("DATASAFE_CURVE", "secp256k1")
        .args([
            "--root",
            dir.path().to_str().unwrap(),
            "wm",
            "psnr",
            "a",
            "b",
        ])
        .output()
        .unwrap();
    assert_eq!(code(&o), 15);
    std::fs::write(dir.path().join("datasafe.toml"), "nonsense = 1\n").unwrap();
    assert_eq!(code(&ds(dir.path(), &["wm", "psnr", "a", "b"])), 4);
    std::fs::remove_file(dir.path().join("datasafe.toml")).unwrap();
    assert_eq!(code(&ds(dir.path(), &["wm", "psnr", "a", "b"])), 3);
    assert_eq!(code(&ds(dir.path(), &["ledger", "trace", "zz"])), 3);
    assert_eq!(code(&ds(dir.path(), &["frobnicate"])), 2);
}
