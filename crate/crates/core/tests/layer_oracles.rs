use cellfree_core::aagnn::{
    aggregate, combine_attention, combine_plain, Activation, LayerParams, Model, ModelConfig,
};
use cellfree_core::scenario::{sample_rng, Association, ChannelSet};
use cellfree_core::tensor::{CTensor, C64};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn rand_c(rng: &mut ChaCha8Rng) -> C64 {
    C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0))
}

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> CTensor {
    CTensor::from_fn(shape, |_| rand_c(rng))
}

fn rand_layer(f: usize, rng: &mut ChaCha8Rng) -> LayerParams {
    let mut m = || rand_tensor(&[f, f], rng);
    let (o1_t, o2_t, p_t, q1_t, o1_h, o2_h, p_h, q1_h) = (m(), m(), m(), m(), m(), m(), m(), m());
    LayerParams {
        o1_t,
        o2_t,
        p_t,
        q1_t,
        o1_h,
        o2_h,
        p_h,
        q1_h,
        alpha: rand_tensor(&[f], rng),
        beta: rand_tensor(&[f], rng),
    }
}

fn rand_assoc(k: usize, m: usize, rng: &mut ChaCha8Rng) -> Association {
    Association::from_fn(k, m, |_, _| rng.gen_bool(0.5))
}

fn rel_diff(a: &CTensor, b: &CTensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.max_abs_diff(b) / a.max_abs().max(b.max_abs()).max(f64::MIN_POSITIVE)
}

/// `sum_g w[f, g] x[g]`
fn fmap(w: &CTensor, x: &[C64], f: usize) -> C64 {
    (0..x.len()).map(|g| w.get(&[f, g]) * x[g]).sum()
}

fn leaky(z: C64, slope: f64) -> C64 {
    let r = |v: f64| if v >= 0.0 { v } else { slope * v };
    C64::new(r(z.re), r(z.im))
}

/// Aggregation block written as nested loops over (k, m, n, f) and the
/// summation indices.
fn aggregate_loops(x: &CTensor, d: &Association, l: &LayerParams) -> (CTensor, CTensor) {
    let s = x.shape();
    let (kn, mn, nn, fnn) = (s[0], s[1], s[2], s[3]);
    let dd = |k: usize, m: usize| d.weight(k, m);
    let feat = |k: usize, m: usize, n: usize| -> Vec<C64> {
        (0..fnn).map(|g| x.get(&[k, m, n, g])).collect()
    };
    let mut u = CTensor::zeros(s);
    let mut w = CTensor::zeros(s);
    for k in 0..kn {
        for m in 0..mn {
            for n in 0..nn {
                for f in 0..fnn {
                    let mut acc = C64::new(0.0, 0.0);
                    for c in (0..nn).filter(|&c| c != n) {
                        let v = feat(k, m, c);
                        acc += fmap(&l.o2_t, &v, f) * dd(k, m)
                            + fmap(&l.o2_h, &v, f) * (1.0 - dd(k, m));
                    }
                    for b in (0..mn).filter(|&b| b != m) {
                        for c in 0..nn {
                            let v = feat(k, b, c);
                            acc += fmap(&l.p_t, &v, f) * dd(k, b)
                                + fmap(&l.p_h, &v, f) * (1.0 - dd(k, b));
                        }
                    }
                    u.set(&[k, m, n, f], acc);
                    let mut acc = C64::new(0.0, 0.0);
                    for a in (0..kn).filter(|&a| a != k) {
                        let v = feat(a, m, n);
                        acc += fmap(&l.q1_t, &v, f) * dd(a, m)
                            + fmap(&l.q1_h, &v, f) * (1.0 - dd(a, m));
                    }
                    w.set(&[k, m, n, f], acc);
                }
            }
        }
    }
    (u, w)
}

/// The scalar update with all eight shared coefficients, `F = 1`. The
/// "other UE, other antenna" (`q2`) and "other UE, other AP" (`r`) terms are
/// kept explicit so they can be set to zero.
struct Scalars {
    o1: [C64; 2],
    o2: [C64; 2],
    p: [C64; 2],
    q1: [C64; 2],
    q2: [C64; 2],
    r: [C64; 2],
}

fn scalar_update(x: &CTensor, d: &Association, c: &Scalars, slope: Option<f64>) -> CTensor {
    let s = x.shape();
    let (kn, mn, nn) = (s[0], s[1], s[2]);
    let mut out = CTensor::zeros(s);
    for k in 0..kn {
        for m in 0..mn {
            for n in 0..nn {
                let mut acc = C64::new(0.0, 0.0);
                for a in 0..kn {
                    for b in 0..mn {
                        for cc in 0..nn {
                            let coef = match (a == k, b == m, cc == n) {
                                (true, true, true) => c.o1,
                                (true, true, false) => c.o2,
                                (true, false, _) => c.p,
                                (false, true, true) => c.q1,
                                (false, true, false) => c.q2,
                                (false, false, _) => c.r,
                            };
                            let da = d.weight(a, b);
                            acc += (coef[0] * da + coef[1] * (1.0 - da)) * x.get(&[a, b, cc, 0]);
                        }
                    }
                }
                out.set(&[k, m, n, 0], slope.map_or(acc, |sl| leaky(acc, sl)));
            }
        }
    }
    out
}

#[test]
fn aggregation_matches_nested_loops() {
    let mut rng = sample_rng(21, 0);
    for _ in 0..5 {
        let x = rand_tensor(&[3, 2, 2, 2], &mut rng);
        let d = rand_assoc(3, 2, &mut rng);
        let l = rand_layer(2, &mut rng);
        let (u, w) = aggregate(&x, &d, &l);
        let (ue, we) = aggregate_loops(&x, &d, &l);
        assert!(rel_diff(&u, &ue) <= 1e-12, "u {}", rel_diff(&u, &ue));
        assert!(rel_diff(&w, &we) <= 1e-12, "w {}", rel_diff(&w, &we));
    }
}

#[test]
fn single_ue_has_no_cross_message_and_single_antenna_no_o2() {
    let mut rng = sample_rng(22, 0);
    let l = rand_layer(2, &mut rng);
    let x = rand_tensor(&[1, 3, 2, 2], &mut rng);
    let (_, w) = aggregate(&x, &Association::full(1, 3), &l);
    assert_eq!(w.norm_sqr(), 0.0);
    let mut only_o2 = l.clone();
    for t in [
        &mut only_o2.p_t,
        &mut only_o2.p_h,
        &mut only_o2.q1_t,
        &mut only_o2.q1_h,
    ] {
        *t = CTensor::zeros(&[2, 2]);
    }
    let x = rand_tensor(&[2, 2, 1, 2], &mut rng);
    let (u, _) = aggregate(&x, &rand_assoc(2, 2, &mut rng), &only_o2);
    assert_eq!(u.norm_sqr(), 0.0);
}

#[test]
fn plain_layer_is_the_scalar_update_without_q2_and_r() {
    let mut rng = sample_rng(23, 0);
    let zero = C64::new(0.0, 0.0);
    for trial in 0..6 {
        let (k, m, n) = (
            rng.gen_range(1..=4),
            rng.gen_range(1..=3),
            rng.gen_range(1..=3),
        );
        let x = rand_tensor(&[k, m, n, 1], &mut rng);
        let d = rand_assoc(k, m, &mut rng);
        let l = rand_layer(1, &mut rng);
        let s = |t: &CTensor| t.data()[0];
        let c = Scalars {
            o1: [s(&l.o1_t), s(&l.o1_h)],
            o2: [s(&l.o2_t), s(&l.o2_h)],
            p: [s(&l.p_t), s(&l.p_h)],
            q1: [s(&l.q1_t), s(&l.q1_h)],
            q2: [zero; 2],
            r: [zero; 2],
        };
        let (act, slope) = if trial % 2 == 0 {
            (Activation::LeakyRelu, Some(0.1))
        } else {
            (Activation::None, None)
        };
        let (u, w) = aggregate(&x, &d, &l);
        let got = combine_plain(&x, &d, &u, &w, &l, act, 0.1);
        let want = scalar_update(&x, &d, &c, slope);
        assert!(rel_diff(&got, &want) <= 1e-12, "{}", rel_diff(&got, &want));
    }
}

#[test]
fn scalar_model_hidden_states_follow_the_update() {
    let mut rng = sample_rng(24, 0);
    let cfg = ModelConfig {
        features: 1,
        layers: 2,
        attention: false,
        gain_exponent: 1.0,
        ..Default::default()
    };
    let mut model = Model::new(cfg, 1.0).unwrap();
    model.params.lift = CTensor::from_vec(&[1, 1], vec![C64::new(1.0, 0.0)]);
    for l in &mut model.params.layers {
        *l = rand_layer(1, &mut rng);
    }
    let h = ChannelSet::new(rand_tensor(&[3, 2, 3], &mut rng));
    let d = rand_assoc(3, 2, &mut rng);
    let states = model.hidden_states(&h, &d);
    let zero = C64::new(0.0, 0.0);
    let mut x = h.tensor().clone().reshape(&[3, 2, 3, 1]);
    for (i, l) in model.params.layers.iter().enumerate() {
        let s = |t: &CTensor| t.data()[0];
        let c = Scalars {
            o1: [s(&l.o1_t), s(&l.o1_h)],
            o2: [s(&l.o2_t), s(&l.o2_h)],
            p: [s(&l.p_t), s(&l.p_h)],
            q1: [s(&l.q1_t), s(&l.q1_h)],
            q2: [zero; 2],
            r: [zero; 2],
        };
        let slope = if i + 1 < model.params.layers.len() {
            Some(0.1)
        } else {
            None
        };
        x = scalar_update(&x, &d, &c, slope);
        assert!(rel_diff(&states[i + 1], &x) <= 1e-12);
    }
}

/// `x_km = (alpha h_km^H t_km) t_km + sum_{a != k} (beta h_km^H z_am) z_am`
/// per feature channel.
fn attention_loops(
    x: &CTensor,
    d: &Association,
    h: &ChannelSet,
    l: &LayerParams,
    slope: Option<f64>,
) -> CTensor {
    let s = x.shape();
    let (kn, mn, nn, fnn) = (s[0], s[1], s[2], s[3]);
    let dd = |k: usize, m: usize| d.weight(k, m);
    let feat = |k: usize, m: usize, n: usize| -> Vec<C64> {
        (0..fnn).map(|g| x.get(&[k, m, n, g])).collect()
    };
    let mut t = CTensor::zeros(s);
    let mut z = CTensor::zeros(s);
    for k in 0..kn {
        for m in 0..mn {
            for n in 0..nn {
                for f in 0..fnn {
                    let own = feat(k, m, n);
                    let mut acc = fmap(&l.o1_t, &own, f) * dd(k, m)
                        + fmap(&l.o1_h, &own, f) * (1.0 - dd(k, m));
                    for c in (0..nn).filter(|&c| c != n) {
                        let v = feat(k, m, c);
                        acc += fmap(&l.o2_t, &v, f) * dd(k, m)
                            + fmap(&l.o2_h, &v, f) * (1.0 - dd(k, m));
                    }
                    for b in (0..mn).filter(|&b| b != m) {
                        for c in 0..nn {
                            let v = feat(k, b, c);
                            acc += fmap(&l.p_t, &v, f) * dd(k, b)
                                + fmap(&l.p_h, &v, f) * (1.0 - dd(k, b));
                        }
                    }
                    t.set(&[k, m, n, f], acc);
                    z.set(
                        &[k, m, n, f],
                        fmap(&l.q1_t, &own, f) * dd(k, m)
                            + fmap(&l.q1_h, &own, f) * (1.0 - dd(k, m)),
                    );
                }
            }
        }
    }
    let corr = |k: usize, m: usize, y: &CTensor, a: usize, f: usize| -> C64 {
        (0..nn)
            .map(|n| h.link(k, m)[n].conj() * y.get(&[a, m, n, f]))
            .sum()
    };
    let mut out = CTensor::zeros(s);
    for k in 0..kn {
        for m in 0..mn {
            for f in 0..fnn {
                let lam = l.alpha.data()[f] * corr(k, m, &t, k, f);
                let cross: Vec<C64> = (0..kn)
                    .map(|a| l.beta.data()[f] * corr(k, m, &z, a, f))
                    .collect();
                for n in 0..nn {
                    let mut v = lam * t.get(&[k, m, n, f]);
                    for a in (0..kn).filter(|&a| a != k) {
                        v += cross[a] * z.get(&[a, m, n, f]);
                    }
                    out.set(&[k, m, n, f], slope.map_or(v, |sl| leaky(v, sl)));
                }
            }
        }
    }
    out
}

#[test]
fn attention_layer_matches_nested_loops() {
    let mut rng = sample_rng(25, 0);
    for trial in 0..4 {
        let (k, m, n, f) = (
            rng.gen_range(1..=4),
            rng.gen_range(1..=3),
            rng.gen_range(1..=3),
            rng.gen_range(1..=3),
        );
        let x = rand_tensor(&[k, m, n, f], &mut rng);
        let h = ChannelSet::new(rand_tensor(&[k, m, n], &mut rng));
        let d = rand_assoc(k, m, &mut rng);
        let l = rand_layer(f, &mut rng);
        let (act, slope) = if trial % 2 == 0 {
            (Activation::LeakyRelu, Some(0.1))
        } else {
            (Activation::None, None)
        };
        let got = combine_attention(&x, &d, &h, &l, act, 0.1);
        let want = attention_loops(&x, &d, &h, &l, slope);
        assert!(rel_diff(&got, &want) <= 1e-12, "{}", rel_diff(&got, &want));
    }
}

#[test]
fn zero_attention_coefficients_zero_the_state() {
    let mut rng = sample_rng(26, 0);
    let mut l = rand_layer(2, &mut rng);
    l.alpha = CTensor::zeros(&[2]);
    l.beta = CTensor::zeros(&[2]);
    let x = rand_tensor(&[3, 2, 2, 2], &mut rng);
    let h = ChannelSet::new(rand_tensor(&[3, 2, 2], &mut rng));
    let out = combine_attention(
        &x,
        &rand_assoc(3, 2, &mut rng),
        &h,
        &l,
        Activation::LeakyRelu,
        0.1,
    );
    assert_eq!(out.norm_sqr(), 0.0);
}
