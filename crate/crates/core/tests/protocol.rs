mod common;

use common::protocol;
use fedrel_core::fed::{self, FedConfig, Federation, Method};
use fedrel_core::seed;

#[test]
fn participant_counts_use_exact_ceiling() {
    assert_eq!(protocol::exact_participants(100, 30), 3);
    assert_eq!(protocol::exact_participants(250, 10), 3);
    assert_eq!(protocol::exact_participants(1, 10), 1);
    protocol::participant_counts(1000).unwrap();
}

#[test]
fn selection_is_uniform_over_clients() {
    // each client joins a round with probability m/N; counts over many rounds are binomial
    let (n, gamma, rounds) = (10usize, 0.3, 20_000);
    let m = fed::participants_per_round(n, gamma);
    let mut hits = vec![0usize; n];
    for r in 0..rounds {
        let mut rng = seed::stream(4, "participation", &[r as u64]);
        for c in fed::select_participants(n, gamma, &mut rng) {
            hits[c] += 1;
        }
    }
    let p = m as f64 / n as f64;
    let sd = (rounds as f64 * p * (1.0 - p)).sqrt();
    for h in hits {
        assert!((h as f64 - rounds as f64 * p).abs() < 5.0 * sd, "{h}");
    }
}

#[test]
fn aggregation_hand_cases() {
    protocol::aggregation_hand_cases().unwrap();
}

#[test]
fn single_client_federation_is_centralized_training() {
    protocol::single_client_equals_centralized().unwrap();
}

#[test]
fn fedprox_with_zero_mu_is_fedavg() {
    protocol::fedprox_zero_equals_fedavg().unwrap();
}

#[test]
fn in_memory_resume_is_bitwise() {
    let (spec, clients) = protocol::small_clients(4, Some(0.5), 9);
    let cfg = FedConfig {
        clients: 4,
        rounds: 6,
        local_epochs: 2,
        participation: 0.5,
        lr: 0.05,
        batch_size: 8,
        method: Method::FedProx { mu: 0.01 },
        seed: 12,
    };
    let full = fed::run_federation(&spec, &clients, &cfg).unwrap();
    let mut first = Federation::new(&spec, &clients, &cfg).unwrap();
    for _ in 0..2 {
        first.step().unwrap();
    }
    let saved = first.into_result();
    let resumed = Federation::from_state(&spec, &clients, &cfg, saved)
        .unwrap()
        .run()
        .unwrap();
    assert_eq!(resumed, full);
}

#[test]
fn round_logs_are_one_based_and_complete() {
    let (spec, clients) = protocol::small_clients(3, None, 2);
    let cfg = FedConfig {
        clients: 3,
        rounds: 3,
        local_epochs: 1,
        participation: 1.0,
        lr: 0.05,
        batch_size: 8,
        method: Method::FedAvg,
        seed: 1,
    };
    let res = fed::run_federation(&spec, &clients, &cfg).unwrap();
    assert_eq!(res.logs.iter().map(|l| l.round).collect::<Vec<_>>(), vec![1, 2, 3]);
    for l in &res.logs {
        assert_eq!(l.participants, vec![0, 1, 2]);
        assert_eq!(l.local_losses.len(), 3);
        assert!(l.f_ece >= 0.0 && l.accuracy <= 1.0);
    }
    assert!(res.locals.iter().all(Option::is_some));
}
