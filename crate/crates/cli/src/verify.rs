//! Property battery behind `cellfree verify`.

use cellfree_core::aagnn::{Model, ModelConfig};
use cellfree_core::baselines::{wmmse, WmmseOptions};
use cellfree_core::dataset::Dataset;
use cellfree_core::equivariance::{
    check_commutation, check_policy_equivariance, commutant_dimension, generators, PermTriple,
    SharedWeightSpec,
};
use cellfree_core::objective::{per_ap_power, sinr_direct, sinr_masked, Precoder};
use cellfree_core::scenario::{
    generate_sample, masked_channels, reconstruct, sample_rng, Association, ChannelSet,
    ScenarioConfig,
};
use cellfree_core::tensor::{CTensor, C64};
use cellfree_core::training::{init_model, loss_grad_check};
use rand::Rng;

use crate::report::CheckRow;

const SEED: u64 = 0x5eed;

fn random_tensor<R: Rng>(shape: &[usize], rng: &mut R) -> CTensor {
    CTensor::from_fn(shape, |_| {
        C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
    })
}

pub fn commutant_dimensions() -> CheckRow {
    let cases = [
        ((2, 2, 2), 6),
        ((3, 2, 2), 6),
        ((2, 3, 2), 6),
        ((2, 2, 3), 6),
        ((1, 1, 2), 2),
        ((1, 1, 1), 1),
    ];
    let mut bad = Vec::new();
    for ((n, m, k), want) in cases {
        match commutant_dimension(n, m, k) {
            Ok(d) if d == want => {}
            Ok(d) => bad.push(format!("(N,M,K)=({n},{m},{k}) gave {d} not {want}")),
            Err(e) => bad.push(format!("({n},{m},{k}): {e}")),
        }
    }
    let detail = if bad.is_empty() {
        "6 6 6 6 2 1 as expected".to_string()
    } else {
        bad.join("; ")
    };
    CheckRow::new("commutant_dimension", bad.is_empty(), detail)
}

/// Random tied weights commute exactly with random triples at (3,3,3).
pub fn weight_sharing_commutation(trials: usize) -> CheckRow {
    let mut rng = sample_rng(SEED, 1);
    let mut worst = 0.0f64;
    for _ in 0..trials {
        let w = SharedWeightSpec::random(3, 3, 3, &mut rng).materialize();
        let t = PermTriple::random(3, 3, 3, &mut rng);
        worst = worst.max(check_commutation(&w, &t));
    }
    CheckRow::new(
        "weight_sharing_commutation",
        worst == 0.0,
        format!("{trials} triples at (3;3;3) max residual {worst:e}"),
    )
}

/// Breaking one tied entry must be caught by some generator.
pub fn broken_tie_detected() -> CheckRow {
    let mut rng = sample_rng(SEED, 2);
    let mut w = SharedWeightSpec::random(3, 3, 3, &mut rng).materialize();
    w[(0, 1)] += C64::new(0.25, 0.0);
    let worst = generators(3, 3, 3)
        .iter()
        .map(|g| check_commutation(&w, g))
        .fold(0.0, f64::max);
    CheckRow::new(
        "broken_tie_detected",
        worst > 0.0,
        format!("corrupted entry gives residual {worst:e}"),
    )
}

/// Association-masked SINR equals the norm-ratio form on random instances.
pub fn rate_form_equivalence(instances: usize) -> CheckRow {
    let mut rng = sample_rng(SEED, 3);
    let mut worst = 0.0f64;
    for _ in 0..instances {
        let (k, m, n) = (
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
            rng.gen_range(1..=4),
        );
        let h = ChannelSet::new(random_tensor(&[k, m, n], &mut rng));
        let d = Association::from_fn(k, m, |_, _| rng.gen_bool(0.5));
        let v = Precoder::new(random_tensor(&[k, m, n], &mut rng));
        let noise = rng.gen_range(0.01..1.0);
        let (served, other) = masked_channels(&h, &d);
        let a = sinr_direct(&h, &d, &v, noise);
        let b = sinr_masked(&served, &other, &v, noise);
        for (x, y) in a.iter().zip(&b) {
            worst = worst.max((x - y).abs() / x.abs().max(f64::MIN_POSITIVE));
        }
    }
    CheckRow::new(
        "rate_form_equivalence",
        worst <= 1e-10,
        format!("{instances} instances max relative deviation {worst:e}"),
    )
}

fn randomized_model(attention: bool, seed: u64) -> Model {
    let cfg = ModelConfig {
        features: 3,
        layers: 2,
        attention,
        seed,
        ..Default::default()
    };
    let mut model = Model::new(cfg, 1.0).expect("valid config");
    let mut rng = sample_rng(seed, 4);
    for l in &mut model.params.layers {
        l.alpha = random_tensor(l.alpha.shape(), &mut rng).scale(0.3);
        l.beta = random_tensor(l.beta.shape(), &mut rng).scale(0.3);
    }
    model
}

/// Max relative deviation of `model` from 3D permutation equivariance.
pub fn model_pe_deviation(model: &Model, triples: usize, seed: u64) -> f64 {
    let mut rng = sample_rng(seed, 5);
    let mut worst = 0.0f64;
    for _ in 0..triples {
        let (k, m, n) = (
            rng.gen_range(2..=4),
            rng.gen_range(2..=4),
            rng.gen_range(2..=4),
        );
        let h = ChannelSet::new(random_tensor(&[k, m, n], &mut rng));
        let mut d = Association::from_fn(k, m, |_, _| rng.gen_bool(0.6));
        if (0..k).any(|u| d.serving_set(u).is_empty()) {
            d = Association::from_fn(k, m, |u, a| d.get(u, a) || a == u % m);
        }
        let (served, other) = masked_channels(&h, &d);
        let t = PermTriple::random(n, m, k, &mut rng);
        let policy = |s: &CTensor, o: &CTensor| {
            let (hh, dd) = reconstruct(s, o);
            model.forward(&hh, &dd, 1.0).into_tensor()
        };
        worst =
            worst.max(check_policy_equivariance(policy, &served, &other, &t, 1e-6).max_deviation);
    }
    worst
}

pub fn model_equivariance(attention: bool, triples: usize) -> CheckRow {
    let model = randomized_model(attention, 11);
    let worst = model_pe_deviation(&model, triples, SEED);
    let name = if attention {
        "model_equivariance_attention"
    } else {
        "model_equivariance_plain"
    };
    CheckRow::new(
        name,
        worst <= 1e-6,
        format!("{triples} triples max relative deviation {worst:e}"),
    )
}

/// Full-model loss gradient against central differences at K=M=N=F=L=2.
pub fn model_gradient() -> CheckRow {
    let cfg = ScenarioConfig {
        n_ues: 2,
        n_aps: 2,
        n_antennas: 2,
        ..Default::default()
    };
    let ds = Dataset::generate(&cfg, SEED, 2);
    let mut worst = 0.0f64;
    let mut detail = Vec::new();
    for attention in [true, false] {
        let mc = ModelConfig {
            features: 2,
            layers: 2,
            attention,
            ..Default::default()
        };
        let r = init_model(mc, &ds)
            .and_then(|m| loss_grad_check(&m, &ds.samples, ds.power, ds.noise_power, 1e-5));
        match r {
            Ok(gc) => {
                worst = worst.max(gc.max_rel_error);
                detail.push(format!(
                    "attention={attention} rel error {:e}",
                    gc.max_rel_error
                ));
            }
            Err(e) => {
                worst = f64::INFINITY;
                detail.push(e.to_string());
            }
        }
    }
    CheckRow::new("model_gradient", worst <= 1e-5, detail.join("; "))
}

/// WMMSE rates never decrease and every AP stays within budget.
pub fn wmmse_oracle(instances: usize) -> CheckRow {
    let cfg = ScenarioConfig::default();
    let opts = WmmseOptions::default();
    let mut bad = Vec::new();
    for i in 0..instances as u64 {
        let s = generate_sample(&cfg, SEED, i);
        match wmmse(&s.channels, &s.assoc, cfg.power, cfg.noise_power(), &opts) {
            Ok((v, trace)) => {
                if trace.sum_rates.windows(2).any(|w| w[1] < w[0] - 1e-8) {
                    bad.push(format!("sample {i} not monotone"));
                }
                if per_ap_power(&v)
                    .iter()
                    .any(|&p| p > cfg.power * (1.0 + 1e-8))
                {
                    bad.push(format!("sample {i} over budget"));
                }
            }
            Err(e) => bad.push(format!("sample {i}: {e}")),
        }
    }
    let detail = if bad.is_empty() {
        format!("{instances} instances monotone and feasible")
    } else {
        bad.join("; ")
    };
    CheckRow::new("wmmse_monotone_feasible", bad.is_empty(), detail)
}

pub fn dataset_round_trip() -> CheckRow {
    let cfg = ScenarioConfig {
        n_ues: 3,
        n_aps: 2,
        n_antennas: 4,
        ..Default::default()
    };
    let ds = Dataset::generate(&cfg, SEED, 8);
    let ok = ds
        .to_bytes()
        .and_then(|b| Ok((Dataset::from_bytes(&b)?, b)))
        .map(|(back, b)| back == ds && back.to_bytes().map(|b2| b2 == b).unwrap_or(false))
        .unwrap_or(false);
    CheckRow::new(
        "dataset_round_trip",
        ok,
        "8 samples re-serialize identically",
    )
}

pub fn checkpoint_round_trip() -> CheckRow {
    let model = randomized_model(true, 12);
    let ok = model
        .to_checkpoint_json()
        .and_then(|t| Model::from_checkpoint_json(&t))
        .map(|back| back == model)
        .unwrap_or(false);
    CheckRow::new(
        "checkpoint_round_trip",
        ok,
        "random attention model reloads identically",
    )
}

/// Every check, in report order.
pub fn run_all() -> Vec<CheckRow> {
    vec![
        commutant_dimensions(),
        weight_sharing_commutation(50),
        broken_tie_detected(),
        rate_form_equivalence(1000),
        model_equivariance(true, 100),
        model_equivariance(false, 100),
        model_gradient(),
        wmmse_oracle(20),
        dataset_round_trip(),
        checkpoint_round_trip(),
    ]
}
