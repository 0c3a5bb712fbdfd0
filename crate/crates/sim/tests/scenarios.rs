use std::path::PathBuf;

use cotrain_core::swarm::PeerId;
use cotrain_sim::{simulate, Outcome, Scenario, SimOptions, SimResult, CSV_HEADER};
use proptest::prelude::*;

fn bundled(name: &str) -> Scenario {
    let path = PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name);
    Scenario::load(&path).unwrap()
}

fn captured(s: &Scenario) -> SimResult {
    let opts = SimOptions {
        capture: true,
        ..SimOptions::default()
    };
    simulate(s, &opts).unwrap()
}

fn assert_peers_agree(r: &SimResult) {
    for (round, peers) in &r.captures.peer_hashes {
        let coord = r.captures.coordinator_hashes[round];
        for (peer, h) in peers {
            assert_eq!(*h, coord, "{peer} diverged in round {round}");
        }
    }
    assert_eq!(r.metrics.hash_mismatches, 0);
}

fn assert_well_formed(r: &SimResult) {
    let mut last = 0.0f64;
    for line in r.trace.lines() {
        let t: f64 = line.split_whitespace().next().unwrap().parse().unwrap();
        assert!(t >= last, "trace goes back in time at {line:?}");
        last = t;
    }
    for w in r.metrics.rounds.windows(2) {
        assert_eq!(w[1].round, w[0].round + 1);
        assert!(w[1].bytes_total >= w[0].bytes_total);
        assert!(w[1].sim_seconds >= w[0].sim_seconds);
    }
    let sent: u64 = r.metrics.bytes_sent.values().sum();
    let received: u64 = r.metrics.bytes_received.values().sum();
    assert!(received <= sent, "received {received} > sent {sent}");
}

fn swarm_toml(topology: &str, speeds: &[f64], extra: &str) -> String {
    let mut s = format!(
        "seed = 3\nrounds = 12\ntarget_batch = 128\nmicrobatch = 8\ntopology = \"{topology}\"\n{extra}\n\
         [task]\nname = \"logreg\"\nseed = 1\nsamples = 512\ndim = 6\n"
    );
    for (i, v) in speeds.iter().enumerate() {
        s += &format!(
            "[[peers]]\nid = {i}\ntoken = \"t{i}\"\nspeed = {v}\nuplink = {}e6\n",
            2 + i
        );
    }
    s
}

#[test]
fn homogeneous_runs_to_completion() {
    let r = simulate(&bundled("homogeneous4.scenario"), &SimOptions::default()).unwrap();
    assert_eq!(r.outcome, Outcome::Completed);
    let rounds: Vec<u64> = r.metrics.rounds.iter().map(|m| m.round).collect();
    assert_eq!(rounds, (1..=200).collect::<Vec<_>>());
    assert!(r.metrics.rounds.iter().all(|m| m.live_peers == 4));
    assert!(r.metrics.final_loss().unwrap() < r.metrics.rounds[0].loss);
    assert!(r.metrics.to_csv().starts_with(CSV_HEADER));
    assert_well_formed(&r);
}

#[test]
fn churn_schedule_shows_in_live_peers() {
    let r = captured(&bundled("churn5.scenario"));
    assert_eq!(r.outcome, Outcome::Completed);
    for m in &r.metrics.rounds {
        let expected = match m.round {
            ..=49 => 5,
            50..=70 => 3,
            _ => 4,
        };
        assert_eq!(m.live_peers, expected, "round {}", m.round);
    }
    assert_peers_agree(&r);
    assert_well_formed(&r);
    assert!(r.trace.contains("crash peer-3"));
}

#[test]
fn outsiders_do_not_change_training() {
    let base = swarm_toml("star", &[50.0, 80.0, 120.0], "allowlist = [\"t0\", \"t1\", \"t2\"]");
    let crowded = format!(
        "{base}[[peers]]\nid = 3\ntoken = \"forged\"\nspeed = 500.0\n\
         [[peers]]\nid = 4\ntoken = \"forged\"\nspeed = 500.0\nrogue = true\n"
    );
    let a = captured(&Scenario::parse(&base).unwrap());
    let b = captured(&Scenario::parse(&crowded).unwrap());
    assert_eq!(a.outcome, Outcome::Completed);
    assert_eq!(b.outcome, Outcome::Completed);
    assert_eq!(a.captures.coordinator_hashes, b.captures.coordinator_hashes);
    assert_eq!(a.final_params, b.final_params);
    assert!(b.captures.ignored[&PeerId(4)] > 0);
    assert!(b.captures.peer_hashes.values().all(|p| !p.contains_key(&PeerId(3))));
    assert!(b.ledger.get(PeerId(3)).is_none() && b.ledger.get(PeerId(4)).is_none());
}

#[test]
fn lossy_partitioned_run_stays_consistent() {
    let extra = "drop_prob = 0.1\nretries = 20\nretry_timeout = 0.1\n[codec]\nkind = \"compressed\"\nq8_threshold = 4";
    let s = Scenario::parse(&swarm_toml("partitioned", &[40.0, 60.0, 90.0, 130.0], extra)).unwrap();
    let r = captured(&s);
    assert_eq!(r.outcome, Outcome::Completed);
    assert!(r.metrics.messages_dropped > 0);
    assert_eq!(r.captures.peer_hashes.len(), 12);
    assert_peers_agree(&r);
    assert_well_formed(&r);
}

#[test]
fn ledger_credits_contributed_samples() {
    let r = captured(&bundled("homogeneous4.scenario"));
    let contributed: u64 = r
        .captures
        .rounds
        .iter()
        .flat_map(|c| &c.members)
        .map(|m| m.samples)
        .sum();
    assert_eq!(r.ledger.total_samples(), contributed);
    assert_eq!(r.ledger.entries().len(), 4);
}

#[test]
fn scenario_survives_serialization() {
    let s = bundled("churn5.scenario");
    let again = Scenario::parse(&s.to_toml()).unwrap();
    assert_eq!(s, again);
}

#[test]
fn disabled_trace_is_empty_but_results_match() {
    let s = bundled("churn5.scenario");
    let quiet = SimOptions {
        trace: false,
        ..SimOptions::default()
    };
    let a = simulate(&s, &quiet).unwrap();
    let b = simulate(&s, &SimOptions::default()).unwrap();
    assert!(a.trace.is_empty());
    assert_eq!(a.metrics.to_csv(), b.metrics.to_csv());
}

#[test]
fn event_limit_is_reported() {
    let s = bundled("homogeneous4.scenario");
    let opts = SimOptions {
        max_events: 100,
        ..SimOptions::default()
    };
    assert!(simulate(&s, &opts).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_swarms_finish_and_agree(
        seed in 0u64..1000,
        speeds in proptest::collection::vec(10.0f64..200.0, 2..5),
        partitioned in any::<bool>(),
        drop in 0.0f64..0.1,
    ) {
        let topology = if partitioned { "partitioned" } else { "star" };
        let extra = format!("drop_prob = {drop}\nretries = 30\nretry_timeout = 0.1");
        let mut s = Scenario::parse(&swarm_toml(topology, &speeds, &extra)).unwrap();
        s.seed = seed;
        let r = captured(&s);
        prop_assert_eq!(&r.outcome, &Outcome::Completed);
        prop_assert_eq!(r.metrics.rounds.len(), 12);
        for rc in &r.captures.rounds {
            let total: u64 = rc.members.iter().map(|m| m.samples).sum();
            prop_assert!((128..136).contains(&total));
        }
        assert_peers_agree(&r);
        assert_well_formed(&r);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn random_churn_keeps_survivors_in_sync(
        seed in 0u64..1000,
        partitioned in any::<bool>(),
        leave in any::<bool>(),
        down in 0.05f64..2.0,
        up in 0.05f64..2.0,
        drop in 0.0f64..0.05,
    ) {
        let topology = if partitioned { "partitioned" } else { "star" };
        let event = if leave { "leave" } else { "crash" };
        let extra = format!(
            "drop_prob = {drop}\nretries = 30\nretry_timeout = 0.1\n\
             [[churn]]\npeer = 1\nevent = \"{event}\"\ntime = {down}\n\
             [[churn]]\npeer = 1\nevent = \"join\"\ntime = {}\n",
            down + up
        );
        let mut s = Scenario::parse(&swarm_toml(topology, &[60.0, 90.0, 120.0], &extra)).unwrap();
        s.seed = seed;
        let r = captured(&s);
        prop_assert_eq!(&r.outcome, &Outcome::Completed);
        prop_assert_eq!(r.metrics.rounds.len(), 12);
        for round in 1..=12u64 {
            let peers = &r.captures.peer_hashes[&round];
            prop_assert!(peers.contains_key(&PeerId(0)) && peers.contains_key(&PeerId(2)));
        }
        assert_peers_agree(&r);
        assert_well_formed(&r);
    }
}
