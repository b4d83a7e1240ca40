//! Federation protocol checks shared by the protocol tests and the acceptance target.

use fedrel_core::data::{self, ClientData, PartitionPlan};
use fedrel_core::fed::{self, FedConfig, Method};
use fedrel_core::nn::{self, Scope, TrainConfig};
use fedrel_core::seed::{self, ShuffleStream};
use fedrel_core::{ModelParams, ModelSpec};
use rand::Rng;

/// `ceil(k N / 1000)` in integer arithmetic, floored at one participant.
pub fn exact_participants(thousandths: u64, clients: u64) -> u64 {
    (thousandths * clients).div_ceil(1000).clamp(1, clients)
}

/// Participant counts for `draws` random `(gamma, N)` pairs, with `gamma` on a 1/1000 grid.
pub fn participant_counts(draws: usize) -> Result<(), String> {
    let mut rng = seed::rng(314);
    for _ in 0..draws {
        let k: u64 = rng.random_range(1..=1000);
        let n: u64 = rng.random_range(1..=500);
        let gamma = k as f64 / 1000.0;
        let got = fed::participants_per_round(n as usize, gamma) as u64;
        let want = exact_participants(k, n);
        if got != want {
            return Err(format!("gamma={gamma} N={n}: {got} participants, expected {want}"));
        }
        let ids = fed::select_participants(n as usize, gamma, &mut rng);
        if ids.len() as u64 != want || ids.windows(2).any(|w| w[0] >= w[1]) || ids.iter().any(|&i| i as u64 >= n) {
            return Err(format!("gamma={gamma} N={n}: bad selection {ids:?}"));
        }
    }
    Ok(())
}

fn flat(p: &ModelParams) -> Vec<f64> {
    p.base.iter().chain(&p.head).copied().collect()
}

fn params(v: &[f64]) -> ModelParams {
    ModelParams {
        base: v[..2].to_vec(),
        head: v[2..].to_vec(),
    }
}

type Case<'a> = (Vec<(&'a ModelParams, f64)>, [f64; 4]);

/// Hand-computed weighted means.
pub fn aggregation_hand_cases() -> Result<(), String> {
    let a = params(&[1.0, 2.0, 3.0, -4.0]);
    let b = params(&[3.0, 2.0, -1.0, 0.0]);
    let c = params(&[0.5, 0.0, 0.0, 8.0]);
    let cases: Vec<Case> = vec![
        // (1*a + 1*b) / 2
        (vec![(&a, 1.0), (&b, 1.0)], [2.0, 2.0, 1.0, -2.0]),
        // (3a + b) / 4
        (vec![(&a, 30.0), (&b, 10.0)], [1.5, 2.0, 2.0, -3.0]),
        // (2a + b + c) / 4
        (vec![(&a, 2.0), (&b, 1.0), (&c, 1.0)], [1.375, 1.5, 1.25, 0.0]),
        (vec![(&c, 7.0)], [0.5, 0.0, 0.0, 8.0]),
        (vec![(&b, 5.0), (&b, 9.0)], [3.0, 2.0, -1.0, 0.0]),
    ];
    for (updates, want) in cases {
        let got = flat(&fed::aggregate(&updates).map_err(|e| e.to_string())?);
        for (g, w) in got.iter().zip(want) {
            if (g - w).abs() > 1e-12 {
                return Err(format!("aggregate gave {got:?}, expected {want:?}"));
            }
        }
    }
    // order of the updates never changes a bit
    let fwd = fed::aggregate(&[(&a, 0.3), (&b, 1.7), (&c, 2.9)]).unwrap();
    let rev = fed::aggregate(&[(&c, 2.9), (&a, 0.3), (&b, 1.7)]).unwrap();
    if flat(&fwd)
        .iter()
        .map(|v| v.to_bits())
        .ne(flat(&rev).iter().map(|v| v.to_bits()))
    {
        return Err("aggregation depends on input order".into());
    }
    Ok(())
}

pub fn small_clients(n_clients: usize, alpha: Option<f64>, seed_: u64) -> (ModelSpec, Vec<ClientData>) {
    let ds = data::gen_synthetic(3, 5, 40, 3.0, seed_).unwrap();
    let parts = data::partition(
        &ds,
        &PartitionPlan {
            clients: n_clients,
            alpha,
            quantity_skew: None,
            seed: seed_ + 1,
        },
    )
    .unwrap();
    let clients = parts
        .iter()
        .map(|p| data::train_test_split(p, 0.2, seed_ + 2).unwrap())
        .collect();
    (ModelSpec::new(5, vec![7], vec![5, 3]).unwrap(), clients)
}

fn bits(p: &ModelParams) -> Vec<u64> {
    flat(p).iter().map(|v| v.to_bits()).collect()
}

/// One client at full participation is plain SGD for `R * E` epochs.
pub fn single_client_equals_centralized() -> Result<(), String> {
    let (spec, clients) = small_clients(1, None, 21);
    for batch_size in [8, 1000] {
        let cfg = FedConfig {
            clients: 1,
            rounds: 4,
            local_epochs: 3,
            participation: 1.0,
            lr: 0.05,
            batch_size,
            method: Method::FedAvg,
            seed: 17,
        };
        let fedres = fed::run_federation(&spec, &clients, &cfg).map_err(|e| e.to_string())?;
        let init = ModelParams::init(&spec, &mut seed::stream(cfg.seed, "init", &[]));
        let tc = TrainConfig {
            epochs: cfg.rounds * cfg.local_epochs,
            lr: cfg.lr,
            batch_size,
            scope: Scope::All,
        };
        let stream = ShuffleStream::new(seed::derive(cfg.seed, "shuffle", &[0]));
        let central = nn::sgd_epochs(&spec, &init, &clients[0].train.batch().unwrap(), &tc, None, stream)
            .map_err(|e| e.to_string())?;
        if bits(&fedres.global) != bits(&central.params) {
            return Err(format!(
                "batch {batch_size}: federation with one client differs from centralized SGD"
            ));
        }
    }
    Ok(())
}

/// FedProx with `mu = 0` reproduces FedAvg bit for bit, logs included.
pub fn fedprox_zero_equals_fedavg() -> Result<(), String> {
    let (spec, clients) = small_clients(4, Some(0.3), 5);
    let mut cfg = FedConfig {
        clients: 4,
        rounds: 3,
        local_epochs: 2,
        participation: 0.5,
        lr: 0.05,
        batch_size: 8,
        method: Method::FedAvg,
        seed: 8,
    };
    let avg = fed::run_federation(&spec, &clients, &cfg).map_err(|e| e.to_string())?;
    cfg.method = Method::FedProx { mu: 0.0 };
    let prox = fed::run_federation(&spec, &clients, &cfg).map_err(|e| e.to_string())?;
    if bits(&avg.global) != bits(&prox.global) || avg.logs != prox.logs {
        return Err("FedProx(0) differs from FedAvg".into());
    }
    cfg.method = Method::FedProx { mu: 0.5 };
    let strong = fed::run_federation(&spec, &clients, &cfg).map_err(|e| e.to_string())?;
    if bits(&strong.global) == bits(&avg.global) {
        return Err("FedProx(0.5) is indistinguishable from FedAvg".into());
    }
    Ok(())
}
