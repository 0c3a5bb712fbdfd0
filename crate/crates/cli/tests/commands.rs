use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use cotrain_core::memcalc::{find_preset, memory_report, MemoryReport, TechniqueFlags};

fn cotrain(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cotrain")).args(args).output().unwrap()
}

fn memcalc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_memcalc")).args(args).output().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn scenario(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

fn simulate(name: &str, out: &Path) -> Output {
    cotrain(&[
        "simulate",
        scenario(name).to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ])
}

fn memcalc_json(args: &[&str]) -> MemoryReport {
    let mut full = vec!["--preset", "gpt2-large", "--json"];
    full.extend_from_slice(args);
    let o = memcalc(&full);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    serde_json::from_str(&stdout(&o)).unwrap()
}

#[test]
fn simulate_writes_monotone_csv() {
    let dir = tempfile::tempdir().unwrap();
    let o = simulate("homogeneous4.scenario", dir.path());
    assert_eq!(o.status.code(), Some(0));
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("round,loss,live_peers,bytes_total,sim_seconds"));
    let rounds: Vec<u64> = lines.map(|l| l.split(',').next().unwrap().parse().unwrap()).collect();
    assert_eq!(rounds, (1..=200).collect::<Vec<_>>());
    for name in ["trace.txt", "bytes.csv", "ledger.json"] {
        assert!(dir.path().join(name).exists(), "{name}");
    }
}

#[test]
fn simulate_is_repeatable() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert!(simulate("churn5.scenario", a.path()).status.success());
    assert!(simulate("churn5.scenario", b.path()).status.success());
    for name in ["metrics.csv", "trace.txt", "bytes.csv", "ledger.json"] {
        assert_eq!(
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn churn_csv_follows_schedule() {
    let dir = tempfile::tempdir().unwrap();
    assert!(simulate("churn5.scenario", dir.path()).status.success());
    let csv = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
    for line in csv.lines().skip(1) {
        let cols: Vec<&str> = line.split(',').collect();
        let round: u64 = cols[0].parse().unwrap();
        let live: u64 = cols[2].parse().unwrap();
        let expected = if round < 50 {
            5
        } else if round <= 70 {
            3
        } else {
            4
        };
        assert_eq!(live, expected, "round {round}");
    }
}

#[test]
fn simulate_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.scenario");
    fs::write(&bad, "seed = 1\nrounds = 0\n").unwrap();
    let o = cotrain(&["simulate", bad.to_str().unwrap(), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));

    let aborting = dir.path().join("abort.scenario");
    fs::write(
        &aborting,
        "seed = 1\nrounds = 5\ntarget_batch = 64\nmicrobatch = 8\n\
         [task]\nname = \"quadratic\"\ndim = 4\n\
         [[peers]]\nid = 0\n\
         [[churn]]\npeer = 0\nevent = \"crash\"\nround = 2\n",
    )
    .unwrap();
    let out = dir.path().join("aborted");
    let o = cotrain(&["simulate", aborting.to_str().unwrap(), "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(!out.join("metrics.csv").exists());
    assert!(out.join("trace.txt").exists());

    assert_eq!(cotrain(&["simulate"]).status.code(), Some(2));
}

#[test]
fn memcalc_reproduces_reference_figures() {
    let fp32 = memcalc_json(&[]);
    assert_eq!(fp32.device.optimizer_state, 6_192_000_000);
    let eight = memcalc_json(&["--opt-bits", "8"]);
    assert_eq!(
        eight.device.optimizer_state,
        1_548_000_000 + 8 * 774_000_000u64.div_ceil(4096)
    );
    let off = memcalc_json(&["--opt-bits", "8", "--offload"]);
    assert_eq!(off.device.optimizer_state, 0);
    assert_eq!(off.host.offloaded_state, eight.device.optimizer_state);
}

#[test]
fn memcalc_matches_library_for_all_flags() {
    let preset = find_preset("gpt2-large").unwrap();
    let flags = TechniqueFlags {
        optimizer_bits: 8,
        offload: true,
        checkpointing: true,
        sharing_factor: 2,
    };
    let expected = memory_report(&preset, &flags, 4, 512).unwrap();
    let got = memcalc_json(&[
        "--opt-bits",
        "8",
        "--offload",
        "--checkpointing",
        "--sharing",
        "2",
        "--batch",
        "4",
        "--seq",
        "512",
    ]);
    assert_eq!(got, expected);
    let via_cotrain = cotrain(&["memcalc", "--preset", "gpt2-large", "--json"]);
    assert_eq!(
        serde_json::from_str::<MemoryReport>(&stdout(&via_cotrain)).unwrap(),
        memcalc_json(&[])
    );
}

#[test]
fn memcalc_table_and_errors() {
    let o = memcalc(&["--preset", "gpt2-large"]);
    assert!(stdout(&o).contains("6192000000"));
    assert_eq!(memcalc(&["--preset", "nope"]).status.code(), Some(2));
    assert_eq!(memcalc(&["--preset", "gpt2", "--opt-bits", "4"]).status.code(), Some(2));
    assert!(stdout(&memcalc(&["--list"])).contains("dalle-1.1b"));
}

fn records_jsonl(n: usize) -> String {
    (0..n)
        .map(|i| {
            let codes: Vec<String> = (0..1024).map(|j| ((i * 131 + j * 7) % 8192).to_string()).collect();
            format!(
                "{{\"caption_tokens\":[{i},{},{}],\"image_codes\":[{}]}}\n",
                i * 3,
                49407,
                codes.join(",")
            )
        })
        .collect()
}

#[test]
fn shard_pack_unpack_inspect() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("records.jsonl");
    let text = records_jsonl(25);
    fs::write(&input, &text).unwrap();
    let shards = dir.path().join("shards");
    let o = cotrain(&[
        "shard",
        "pack",
        input.to_str().unwrap(),
        "--out",
        shards.to_str().unwrap(),
        "--per-shard",
        "10",
    ]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(stdout(&o).starts_with("packed 25 records into 3 shards"));

    let o = cotrain(&["shard", "unpack", shards.to_str().unwrap()]);
    assert!(o.status.success());
    assert_eq!(stdout(&o), text);

    let last = shards.join("shard-00002.tshd");
    let o = cotrain(&["shard", "inspect", last.to_str().unwrap()]);
    let report = stdout(&o);
    assert!(report.contains("records          5\n"), "{report}");
    assert!(report.contains("verified         5 records"));

    let mut bytes = fs::read(&last).unwrap();
    let n = bytes.len();
    bytes[n - 3] ^= 0x10;
    fs::write(&last, bytes).unwrap();
    assert_eq!(
        cotrain(&["shard", "inspect", last.to_str().unwrap()]).status.code(),
        Some(1)
    );
    let o = cotrain(&["shard", "unpack", shards.to_str().unwrap(), "--skip-corrupt"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 20);
}

#[test]
fn shard_pack_rejects_bad_records() {
    let dir = tempfile::tempdir().unwrap();
    let input = dir.path().join("bad.jsonl");
    fs::write(&input, "{\"caption_tokens\":[],\"image_codes\":[1,2,3]}\n").unwrap();
    let o = cotrain(&[
        "shard",
        "pack",
        input.to_str().unwrap(),
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_demo_divergence() {
    let lossless = stdout(&cotrain(&["train-demo", "--rounds", "10"]));
    assert!(lossless.starts_with("max_divergence 0e0\n"), "{lossless}");
    let single = stdout(&cotrain(&[
        "train-demo",
        "--rounds",
        "10",
        "--peers",
        "1",
        "--task",
        "mlp",
    ]));
    assert!(single.starts_with("max_divergence 0e0\n"), "{single}");
    let lossy = stdout(&cotrain(&[
        "train-demo",
        "--rounds",
        "10",
        "--codec",
        "compressed",
        "--q8-threshold",
        "8",
        "--topology",
        "partitioned",
    ]));
    let d: f64 = lossy
        .lines()
        .next()
        .unwrap()
        .split_whitespace()
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!(d > 0.0 && d < 1e-2, "{lossy}");
}

#[test]
fn ledger_leaderboard_from_simulation() {
    let dir = tempfile::tempdir().unwrap();
    assert!(simulate("churn5.scenario", dir.path()).status.success());
    let o = cotrain(&["ledger", dir.path().join("ledger.json").to_str().unwrap(), "--top", "3"]);
    assert!(o.status.success());
    let text = stdout(&o);
    assert_eq!(text.lines().count(), 5);
    let seconds: Vec<f64> = text
        .lines()
        .skip(1)
        .take(3)
        .map(|l| l.split_whitespace().last().unwrap().parse().unwrap())
        .collect();
    assert!(seconds.windows(2).all(|w| w[0] >= w[1]));
}
