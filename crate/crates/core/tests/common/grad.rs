//! Finite-difference gradient checks against the oracle network.

use super::OracleNet;
use fedrel_core::nn::{self, Anchor, Batch};
use fedrel_core::{Matrix, ModelParams, ModelSpec};
use rand::Rng;
use rand_distr::StandardNormal;

pub const STEP: f64 = 1e-5;
/// Pre-activations closer than this to zero make a finite difference straddle a ReLU kink.
const KINK_MARGIN: f64 = 1e-3;
/// Denominator floor for the relative error, so near-zero gradients are compared absolutely.
const REL_FLOOR: f64 = 1e-6;

pub struct Instance {
    pub spec: ModelSpec,
    pub params: ModelParams,
    pub xs: Vec<Vec<f64>>,
    pub ys: Vec<usize>,
    pub net: OracleNet,
}

pub fn random_instance<R: Rng>(rng: &mut R) -> Instance {
    loop {
        let input = rng.random_range(2..=5);
        let ext: Vec<usize> = (0..rng.random_range(0..=2)).map(|_| rng.random_range(2..=6)).collect();
        let k = rng.random_range(2..=4);
        let mut head: Vec<usize> = (0..rng.random_range(0..=1)).map(|_| rng.random_range(2..=5)).collect();
        head.push(k);
        let spec = ModelSpec::new(input, ext.clone(), head.clone()).unwrap();
        let params = ModelParams::init(&spec, rng);
        let n = rng.random_range(1..=6);
        let xs: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..input).map(|_| rng.sample::<f64, _>(StandardNormal)).collect())
            .collect();
        let ys: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
        let net = OracleNet::new(input, &ext, &head);
        let flat: Vec<f64> = params.base.iter().chain(&params.head).copied().collect();
        let (_, pre) = net.loss(&flat, &xs, &ys);
        if pre.iter().all(|z| z.abs() > KINK_MARGIN) {
            return Instance {
                spec,
                params,
                xs,
                ys,
                net,
            };
        }
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Largest elementwise relative error between analytic and central-difference gradients.
pub fn max_gradient_error(inst: &Instance, mu: f64, reference: Option<&ModelParams>) -> f64 {
    let x = Matrix::from_rows(&inst.xs).unwrap();
    let batch = Batch::new(&x, &inst.ys).unwrap();
    let anchor = reference.map(|r| Anchor { reference: r, mu });
    let (_, g) = nn::loss_and_grads(&inst.spec, &inst.params, &batch, anchor).unwrap();
    let analytic: Vec<f64> = g.base.iter().chain(&g.head).copied().collect();
    let flat: Vec<f64> = inst.params.base.iter().chain(&inst.params.head).copied().collect();
    let ref_flat: Option<Vec<f64>> = reference.map(|r| r.base.iter().chain(&r.head).copied().collect());
    let loss = |p: &[f64]| {
        let (l, _) = inst.net.loss(p, &inst.xs, &inst.ys);
        let prox = ref_flat.as_ref().map_or(0.0, |r| {
            0.5 * mu * p.iter().zip(r).map(|(a, b)| (a - b) * (a - b)).sum::<f64>()
        });
        l + prox
    };
    let mut worst: f64 = 0.0;
    let mut p = flat.clone();
    for i in 0..flat.len() {
        p[i] = flat[i] + STEP;
        let up = loss(&p);
        p[i] = flat[i] - STEP;
        let down = loss(&p);
        p[i] = flat[i];
        let numeric = (up - down) / (2.0 * STEP);
        worst = worst.max(rel_err(analytic[i], numeric));
    }
    worst
}
