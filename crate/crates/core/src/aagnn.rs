//! Association-aware edge GNN for cell-free precoding.
//!
//! The hidden state is a `[K, M, N, F]` tensor: one `F`-wide feature vector per
//! (UE, AP, antenna) edge. Every layer splits the state into its served part
//! `d_km x_km` and its unserved part `(1 - d_km) x_km` and mixes them through
//! eight `F x F` matrices, four per part:
//!
//! * `o1` acts on the edge itself,
//! * `o2` on the other antennas of the same (UE, AP) pair,
//! * `p` on every antenna of the other APs of the same UE,
//! * `q1` on the same antenna and AP for the other UEs.
//!
//! With `F = 1` these are scalars, and the layer is the fully
//! permutation-equivariant linear map with its two non-adjacent orbit
//! couplings removed. The attention variant regroups the same terms into a
//! "self" part `t_km` and per-UE "cross" parts `z_am`, then weights them by
//! their correlation with the raw channel `h_km`.
//!
//! Nothing in the parameters depends on `K`, `M` or `N`, so a trained model
//! runs on any problem size.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::objective::Precoder;
use crate::scenario::{sample_rng, Association, ChannelSet};
use crate::tensor::{CTensor, C64};

pub const CHECKPOINT_FORMAT: &str = "AAGNN v1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    /// Leaky rectifier on real and imaginary parts separately.
    LeakyRelu,
    None,
}

/// How the output is brought onto the per-AP power budget.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PowerRule {
    /// Every AP with nonzero output transmits exactly at the budget.
    Full,
    /// Only APs above the budget are scaled down.
    Clip,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    #[serde(rename = "L")]
    pub layers: usize,
    #[serde(rename = "F")]
    pub features: usize,
    pub activation: Activation,
    pub attention: bool,
    pub seed: u64,
    pub leak_slope: f64,
    /// Channels are multiplied by this before entering the network.
    pub input_scale: f64,
    /// Each link block enters as `h_km ||h_km||^(gamma - 1)`: 1 feeds the raw
    /// channel, 0 only its direction.
    pub gain_exponent: f64,
    pub power_rule: PowerRule,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            features: 8,
            activation: Activation::LeakyRelu,
            attention: true,
            seed: 0,
            leak_slope: 0.1,
            input_scale: 1.0,
            gain_exponent: 0.0,
            power_rule: PowerRule::Full,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers == 0 || self.features == 0 {
            return Err(Error::InvalidArgument("L and F must be at least 1".into()));
        }
        if !(self.input_scale > 0.0 && self.input_scale.is_finite()) {
            return Err(Error::InvalidArgument(
                "input_scale must be positive".into(),
            ));
        }
        if !self.gain_exponent.is_finite() {
            return Err(Error::InvalidArgument(
                "gain_exponent must be finite".into(),
            ));
        }
        Ok(())
    }
}

/// Weights of one layer. `*_t` act on the served part, `*_h` on the unserved
/// part. `alpha`/`beta` are only used by the attention variant.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub o1_t: CTensor,
    pub o2_t: CTensor,
    pub p_t: CTensor,
    pub q1_t: CTensor,
    pub o1_h: CTensor,
    pub o2_h: CTensor,
    pub p_h: CTensor,
    pub q1_h: CTensor,
    pub alpha: CTensor,
    pub beta: CTensor,
}

pub const LAYER_TENSORS: usize = 10;

impl LayerParams {
    pub fn zeros(features: usize) -> Self {
        let m = || CTensor::zeros(&[features, features]);
        Self {
            o1_t: m(),
            o2_t: m(),
            p_t: m(),
            q1_t: m(),
            o1_h: m(),
            o2_h: m(),
            p_h: m(),
            q1_h: m(),
            alpha: CTensor::zeros(&[features]),
            beta: CTensor::zeros(&[features]),
        }
    }

    fn tensors(&self) -> [&CTensor; LAYER_TENSORS] {
        [
            &self.o1_t,
            &self.o2_t,
            &self.p_t,
            &self.q1_t,
            &self.o1_h,
            &self.o2_h,
            &self.p_h,
            &self.q1_h,
            &self.alpha,
            &self.beta,
        ]
    }

    fn tensors_mut(&mut self) -> [&mut CTensor; LAYER_TENSORS] {
        [
            &mut self.o1_t,
            &mut self.o2_t,
            &mut self.p_t,
            &mut self.q1_t,
            &mut self.o1_h,
            &mut self.o2_h,
            &mut self.p_h,
            &mut self.q1_h,
            &mut self.alpha,
            &mut self.beta,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    /// `F x 1` map from the scalar channel entry to the first state.
    pub lift: CTensor,
    /// `1 x F` map from the last state to the precoder entry.
    pub collapse: CTensor,
    pub layers: Vec<LayerParams>,
}

fn gaussian<R: Rng>(shape: &[usize], std: f64, rng: &mut R) -> CTensor {
    let s = std * std::f64::consts::FRAC_1_SQRT_2;
    CTensor::from_fn(shape, |_| {
        let re: f64 = rng.sample(StandardNormal);
        let im: f64 = rng.sample(StandardNormal);
        C64::new(re * s, im * s)
    })
}

impl ModelParams {
    /// Complex Gaussian layer matrices with `E|w|^2 = 1/F`; attention scalars
    /// start at `0.1 / typical_gain`, where `typical_gain` is a representative
    /// `||h_km||^2` of the (scaled) network input.
    pub fn init(config: &ModelConfig, typical_gain: f64) -> Self {
        let f = config.features;
        let mut rng = sample_rng(config.seed, u64::MAX);
        let std = 1.0 / (f as f64).sqrt();
        let attn = if typical_gain > 0.0 {
            0.1 / typical_gain
        } else {
            0.1
        };
        let lift = gaussian(&[f, 1], 1.0, &mut rng);
        let collapse = gaussian(&[1, f], std, &mut rng);
        let layers = (0..config.layers)
            .map(|_| {
                let mut m = || gaussian(&[f, f], std, &mut rng);
                LayerParams {
                    o1_t: m(),
                    o2_t: m(),
                    p_t: m(),
                    q1_t: m(),
                    o1_h: m(),
                    o2_h: m(),
                    p_h: m(),
                    q1_h: m(),
                    alpha: CTensor::from_vec(&[f], vec![C64::new(attn, 0.0); f]),
                    beta: CTensor::from_vec(&[f], vec![C64::new(attn, 0.0); f]),
                }
            })
            .collect();
        Self {
            lift,
            collapse,
            layers,
        }
    }

    pub fn features(&self) -> usize {
        self.lift.shape()[0]
    }

    /// All parameter tensors in a fixed order: lift, collapse, then each
    /// layer's ten tensors.
    pub fn tensors(&self) -> Vec<&CTensor> {
        let mut out = vec![&self.lift, &self.collapse];
        for l in &self.layers {
            out.extend(l.tensors());
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut CTensor> {
        let mut out = vec![&mut self.lift, &mut self.collapse];
        for l in &mut self.layers {
            out.extend(l.tensors_mut());
        }
        out
    }

    pub fn from_tensors(tensors: Vec<CTensor>, layers: usize) -> Result<Self> {
        if tensors.len() != 2 + layers * LAYER_TENSORS {
            return Err(Error::Shape(format!(
                "{} tensors for {layers} layers",
                tensors.len()
            )));
        }
        let mut it = tensors.into_iter();
        let lift = it.next().unwrap();
        let collapse = it.next().unwrap();
        let f = lift.shape()[0];
        let mut out_layers = Vec::with_capacity(layers);
        for _ in 0..layers {
            let mut l = LayerParams::zeros(f);
            for slot in l.tensors_mut() {
                *slot = it.next().unwrap();
            }
            out_layers.push(l);
        }
        Ok(Self {
            lift,
            collapse,
            layers: out_layers,
        })
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    fn check(&self, config: &ModelConfig) -> Result<()> {
        let f = config.features;
        let ok = self.lift.shape() == [f, 1]
            && self.collapse.shape() == [1, f]
            && self.layers.len() == config.layers
            && self.layers.iter().all(|l| {
                l.tensors()[..8].iter().all(|t| t.shape() == [f, f])
                    && l.alpha.shape() == [f]
                    && l.beta.shape() == [f]
            });
        if ok {
            Ok(())
        } else {
            Err(Error::Shape("parameters do not match model config".into()))
        }
    }
}

/// Parameter leaves registered on a tape, in [`ModelParams::tensors`] order.
#[derive(Clone, Debug)]
pub struct ParamVars {
    pub lift: Var,
    pub collapse: Var,
    pub layers: Vec<LayerVars>,
}

#[derive(Clone, Copy, Debug)]
pub struct LayerVars {
    pub o1_t: Var,
    pub o2_t: Var,
    pub p_t: Var,
    pub q1_t: Var,
    pub o1_h: Var,
    pub o2_h: Var,
    pub p_h: Var,
    pub q1_h: Var,
    pub alpha: Var,
    pub beta: Var,
}

impl ParamVars {
    /// Registers every parameter as a trainable leaf (`trainable`) or constant.
    pub fn register(tape: &mut Tape, params: &ModelParams, trainable: bool) -> Self {
        let mut put = |t: &CTensor| {
            if trainable {
                tape.leaf(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let lift = put(&params.lift);
        let collapse = put(&params.collapse);
        let layers = params
            .layers
            .iter()
            .map(|l| LayerVars {
                o1_t: put(&l.o1_t),
                o2_t: put(&l.o2_t),
                p_t: put(&l.p_t),
                q1_t: put(&l.q1_t),
                o1_h: put(&l.o1_h),
                o2_h: put(&l.o2_h),
                p_h: put(&l.p_h),
                q1_h: put(&l.q1_h),
                alpha: put(&l.alpha),
                beta: put(&l.beta),
            })
            .collect();
        Self {
            lift,
            collapse,
            layers,
        }
    }

    /// Inverse of [`ParamVars::vars`].
    pub fn from_vars(vars: &[Var]) -> Result<Self> {
        if vars.len() < 2 || !(vars.len() - 2).is_multiple_of(LAYER_TENSORS) {
            return Err(Error::Shape(format!(
                "{} parameter nodes do not form whole layers",
                vars.len()
            )));
        }
        let layers = vars[2..]
            .chunks_exact(LAYER_TENSORS)
            .map(|c| LayerVars {
                o1_t: c[0],
                o2_t: c[1],
                p_t: c[2],
                q1_t: c[3],
                o1_h: c[4],
                o2_h: c[5],
                p_h: c[6],
                q1_h: c[7],
                alpha: c[8],
                beta: c[9],
            })
            .collect();
        Ok(Self {
            lift: vars[0],
            collapse: vars[1],
            layers,
        })
    }

    pub fn vars(&self) -> Vec<Var> {
        let mut out = vec![self.lift, self.collapse];
        for l in &self.layers {
            out.extend([
                l.o1_t, l.o2_t, l.p_t, l.q1_t, l.o1_h, l.o2_h, l.p_h, l.q1_h, l.alpha, l.beta,
            ]);
        }
        out
    }
}

/// Fixed per-sample inputs of a forward pass, already on the tape.
struct Inputs {
    shape: [usize; 4],
    served: Vec<f64>,
    unserved: Vec<f64>,
    /// `conj(h)` after input scaling, `[K, M, N]`.
    h_conj: Var,
}

fn sum_except_self(tape: &mut Tape, x: Var, axes: &[usize]) -> Var {
    let shape = tape.shape(x).to_vec();
    let s = tape.sum_axes(x, axes);
    let e = tape.expand(s, &shape);
    tape.sub(e, x)
}

/// `sum_{b != m} sum_c x[k, b, c]` broadcast back to `[K, M, N, F]`.
fn other_aps_all_antennas(tape: &mut Tape, x: Var) -> Var {
    let shape = tape.shape(x).to_vec();
    let all = tape.sum_axes(x, &[1, 2]);
    let all = tape.expand(all, &shape);
    let own = tape.sum_axes(x, &[2]);
    let own = tape.expand(own, &shape);
    tape.sub(all, own)
}

/// The six self-and-same-UE terms (`o1`, `o2`, `p` for both parts).
fn self_terms(tape: &mut Tape, xd: Var, xb: Var, w: &LayerVars) -> Var {
    let o1 = tape.feature_map(xd, w.o1_t);
    let o1h = tape.feature_map(xb, w.o1_h);
    let nd = sum_except_self(tape, xd, &[2]);
    let o2 = tape.feature_map(nd, w.o2_t);
    let nb = sum_except_self(tape, xb, &[2]);
    let o2h = tape.feature_map(nb, w.o2_h);
    let md = other_aps_all_antennas(tape, xd);
    let p = tape.feature_map(md, w.p_t);
    let mb = other_aps_all_antennas(tape, xb);
    let ph = tape.feature_map(mb, w.p_h);
    tape.add_all(&[o1, o1h, o2, o2h, p, ph])
}

/// Aggregated messages `(u, w)`: `u` collects the same-UE terms other than the
/// edge itself, `w` the same-antenna terms from other UEs.
fn aggregate_on_tape(tape: &mut Tape, x: Var, inputs: &Inputs, w: &LayerVars) -> (Var, Var) {
    let xd = tape.mask(x, &inputs.served);
    let xb = tape.mask(x, &inputs.unserved);
    let nd = sum_except_self(tape, xd, &[2]);
    let o2 = tape.feature_map(nd, w.o2_t);
    let nb = sum_except_self(tape, xb, &[2]);
    let o2h = tape.feature_map(nb, w.o2_h);
    let md = other_aps_all_antennas(tape, xd);
    let p = tape.feature_map(md, w.p_t);
    let mb = other_aps_all_antennas(tape, xb);
    let ph = tape.feature_map(mb, w.p_h);
    let u = tape.add_all(&[o2, o2h, p, ph]);
    let kd = sum_except_self(tape, xd, &[0]);
    let q = tape.feature_map(kd, w.q1_t);
    let kb = sum_except_self(tape, xb, &[0]);
    let qh = tape.feature_map(kb, w.q1_h);
    let wv = tape.add(q, qh);
    (u, wv)
}

fn activate(tape: &mut Tape, x: Var, activation: Activation, slope: f64) -> Var {
    match activation {
        Activation::LeakyRelu => tape.leaky_relu(x, slope),
        Activation::None => x,
    }
}

fn combine_plain_on_tape(
    tape: &mut Tape,
    x: Var,
    inputs: &Inputs,
    u: Var,
    w_msg: Var,
    w: &LayerVars,
    activation: Activation,
    slope: f64,
) -> Var {
    let xd = tape.mask(x, &inputs.served);
    let xb = tape.mask(x, &inputs.unserved);
    let o1 = tape.feature_map(xd, w.o1_t);
    let o1h = tape.feature_map(xb, w.o1_h);
    let pre = tape.add_all(&[o1, o1h, u, w_msg]);
    activate(tape, pre, activation, slope)
}

fn combine_attention_on_tape(
    tape: &mut Tape,
    x: Var,
    inputs: &Inputs,
    w: &LayerVars,
    activation: Activation,
    slope: f64,
) -> Var {
    let [k_n, m_n, n_n, f_n] = inputs.shape;
    let full = [k_n, m_n, n_n, f_n];
    let xd = tape.mask(x, &inputs.served);
    let xb = tape.mask(x, &inputs.unserved);
    let t = self_terms(tape, xd, xb, w);
    let zd = tape.feature_map(xd, w.q1_t);
    let zb = tape.feature_map(xb, w.q1_h);
    let z = tape.add(zd, zb);

    // lambda_kkm = alpha * h_km^H t_km, per feature channel
    let hc = tape.reshape(inputs.h_conj, &[k_n, m_n, n_n, 1]);
    let hc = tape.expand(hc, &full);
    let ht = tape.mul(hc, t);
    let ht = tape.sum_axes(ht, &[2]);
    let alpha = tape.reshape(w.alpha, &[1, 1, 1, f_n]);
    let alpha = tape.expand(alpha, &[k_n, m_n, 1, f_n]);
    let lam = tape.mul(ht, alpha);
    let lam = tape.expand(lam, &full);
    let own = tape.mul(lam, t);

    // sum_{a != k} (beta * h_km^H z_am) z_am over a [K, A, M, N, F] grid
    let grid = [k_n, k_n, m_n, n_n, f_n];
    let hg = tape.reshape(inputs.h_conj, &[k_n, 1, m_n, n_n, 1]);
    let hg = tape.expand(hg, &grid);
    let zg = tape.reshape(z, &[1, k_n, m_n, n_n, f_n]);
    let zg = tape.expand(zg, &grid);
    let hz = tape.mul(hg, zg);
    let hz = tape.sum_axes(hz, &[3]);
    let beta = tape.reshape(w.beta, &[1, 1, 1, 1, f_n]);
    let beta = tape.expand(beta, &[k_n, k_n, m_n, 1, f_n]);
    let lam_x = tape.mul(hz, beta);
    let off_diag: Vec<f64> = (0..k_n * k_n)
        .map(|i| if i / k_n == i % k_n { 0.0 } else { 1.0 })
        .collect();
    let lam_x = tape.mask(lam_x, &off_diag);
    let lam_x = tape.expand(lam_x, &grid);
    let cross = tape.mul(lam_x, zg);
    let cross = tape.sum_axes(cross, &[1]);
    let cross = tape.reshape(cross, &full);

    let pre = tape.add(own, cross);
    activate(tape, pre, activation, slope)
}

fn association_masks(assoc: &Association) -> (Vec<f64>, Vec<f64>) {
    let served: Vec<f64> = assoc.bits().iter().map(|&b| b as f64).collect();
    let unserved = served.iter().map(|d| 1.0 - d).collect();
    (served, unserved)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn new(config: ModelConfig, typical_gain: f64) -> Result<Self> {
        config.validate()?;
        let params = ModelParams::init(&config, typical_gain);
        Ok(Self { config, params })
    }

    pub fn from_parts(config: ModelConfig, params: ModelParams) -> Result<Self> {
        config.validate()?;
        params.check(&config)?;
        Ok(Self { config, params })
    }

    /// Same parameters with attention switched on or off.
    pub fn with_attention(&self, attention: bool) -> Self {
        let mut m = self.clone();
        m.config.attention = attention;
        m
    }

    /// The channel as the network sees it: scaled, then per-link gain
    /// compressed.
    pub fn network_input(&self, channels: &ChannelSet) -> CTensor {
        let scale = self.config.input_scale;
        let gamma = self.config.gain_exponent;
        let mut t = channels.tensor().scale(scale);
        if gamma != 1.0 {
            let n = channels.n_antennas();
            for block in t.data_mut().chunks_mut(n) {
                let g: f64 = block.iter().map(|z| z.norm_sqr()).sum();
                if g > 0.0 {
                    let f = g.powf(0.5 * (gamma - 1.0));
                    for z in block {
                        *z *= f;
                    }
                }
            }
        }
        t
    }

    fn inputs(&self, tape: &mut Tape, channels: &ChannelSet, assoc: &Association) -> Inputs {
        assert_eq!(
            (assoc.n_ues(), assoc.n_aps()),
            (channels.n_ues(), channels.n_aps()),
            "association does not match channel"
        );
        let (served, unserved) = association_masks(assoc);
        let h_conj = tape.constant(self.network_input(channels).map(|z| z.conj()));
        Inputs {
            shape: [
                channels.n_ues(),
                channels.n_aps(),
                channels.n_antennas(),
                self.config.features,
            ],
            served,
            unserved,
            h_conj,
        }
    }

    fn lift_on_tape(&self, tape: &mut Tape, channels: &ChannelSet, vars: &ParamVars) -> Var {
        let (k, m, n) = (channels.n_ues(), channels.n_aps(), channels.n_antennas());
        let h = tape.constant(self.network_input(channels).reshape(&[k, m, n, 1]));
        tape.feature_map(h, vars.lift)
    }

    fn layers_on_tape(
        &self,
        tape: &mut Tape,
        mut x: Var,
        inputs: &Inputs,
        vars: &ParamVars,
    ) -> Var {
        let last = self.config.layers - 1;
        for (l, w) in vars.layers.iter().enumerate() {
            let act = if l == last {
                Activation::None
            } else {
                self.config.activation
            };
            let slope = self.config.leak_slope;
            x = if self.config.attention {
                combine_attention_on_tape(tape, x, inputs, w, act, slope)
            } else {
                let (u, wm) = aggregate_on_tape(tape, x, inputs, w);
                combine_plain_on_tape(tape, x, inputs, u, wm, w, act, slope)
            };
        }
        x
    }

    fn output_on_tape(
        &self,
        tape: &mut Tape,
        x: Var,
        inputs: &Inputs,
        vars: &ParamVars,
        power: f64,
    ) -> Var {
        let [k, m, n, _] = inputs.shape;
        let y = tape.feature_map(x, vars.collapse);
        let y = tape.reshape(y, &[k, m, n]);
        let v = tape.mask(y, &inputs.served);
        let a = tape.abs2(v);
        let p = tape.sum_axes(a, &[0, 2]);
        let r = tape.rsqrt_or_zero(p);
        let s = tape.scale(r, power.sqrt());
        let s = match self.config.power_rule {
            PowerRule::Full => s,
            PowerRule::Clip => {
                // APs already within budget keep unit gain.
                let over: Vec<f64> = tape
                    .value(p)
                    .data()
                    .iter()
                    .map(|z| if z.re > power { 1.0 } else { 0.0 })
                    .collect();
                let under: Vec<f64> = over.iter().map(|o| 1.0 - o).collect();
                let kept = tape.mask(s, &over);
                let ones = tape.constant(CTensor::from_vec(
                    &[1, m, 1],
                    under.iter().map(|&u| C64::new(u, 0.0)).collect(),
                ));
                tape.add(kept, ones)
            }
        };
        let s = tape.expand(s, &[k, m, n]);
        tape.mul(v, s)
    }

    /// Full forward pass on `tape`; returns the `[K, M, N]` precoder node.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        vars: &ParamVars,
        channels: &ChannelSet,
        assoc: &Association,
        power: f64,
    ) -> Var {
        let inputs = self.inputs(tape, channels, assoc);
        let x = self.lift_on_tape(tape, channels, vars);
        let x = self.layers_on_tape(tape, x, &inputs, vars);
        self.output_on_tape(tape, x, &inputs, vars, power)
    }

    pub fn forward(&self, channels: &ChannelSet, assoc: &Association, power: f64) -> Precoder {
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &self.params, false);
        let v = self.forward_on_tape(&mut tape, &vars, channels, assoc, power);
        Precoder::new(tape.value(v).clone())
    }

    /// The `[K, M, N, F]` state after the input lift.
    pub fn input_lift(&self, channels: &ChannelSet) -> CTensor {
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &self.params, false);
        let x = self.lift_on_tape(&mut tape, channels, &vars);
        tape.value(x).clone()
    }

    /// The state after every layer, lift output first.
    pub fn hidden_states(&self, channels: &ChannelSet, assoc: &Association) -> Vec<CTensor> {
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &self.params, false);
        let inputs = self.inputs(&mut tape, channels, assoc);
        let mut x = self.lift_on_tape(&mut tape, channels, &vars);
        let mut out = vec![tape.value(x).clone()];
        let last = self.config.layers - 1;
        for (l, w) in vars.layers.iter().enumerate() {
            let act = if l == last {
                Activation::None
            } else {
                self.config.activation
            };
            x = if self.config.attention {
                combine_attention_on_tape(&mut tape, x, &inputs, w, act, self.config.leak_slope)
            } else {
                let (u, wm) = aggregate_on_tape(&mut tape, x, &inputs, w);
                combine_plain_on_tape(&mut tape, x, &inputs, u, wm, w, act, self.config.leak_slope)
            };
            out.push(tape.value(x).clone());
        }
        out
    }

    /// Maps a `[K, M, N, F]` state to the power-normalized precoder.
    pub fn output_precoder(&self, state: &CTensor, assoc: &Association, power: f64) -> Precoder {
        let mut tape = Tape::new();
        let vars = ParamVars::register(&mut tape, &self.params, false);
        let s = state.shape();
        let (served, unserved) = association_masks(assoc);
        let h_conj = tape.constant(CTensor::zeros(&s[..3]));
        let inputs = Inputs {
            shape: [s[0], s[1], s[2], s[3]],
            served,
            unserved,
            h_conj,
        };
        let x = tape.constant(state.clone());
        let v = self.output_on_tape(&mut tape, x, &inputs, &vars, power);
        Precoder::new(tape.value(v).clone())
    }
}

fn layer_inputs(
    tape: &mut Tape,
    state: &CTensor,
    assoc: &Association,
    h: Option<&ChannelSet>,
) -> Inputs {
    let s = state.shape();
    let (served, unserved) = association_masks(assoc);
    let h_conj = match h {
        Some(c) => tape.constant(c.tensor().map(|z| z.conj())),
        None => tape.constant(CTensor::zeros(&s[..3])),
    };
    Inputs {
        shape: [s[0], s[1], s[2], s[3]],
        served,
        unserved,
        h_conj,
    }
}

fn layer_vars(tape: &mut Tape, layer: &LayerParams) -> LayerVars {
    let mut c = |t: &CTensor| tape.constant(t.clone());
    LayerVars {
        o1_t: c(&layer.o1_t),
        o2_t: c(&layer.o2_t),
        p_t: c(&layer.p_t),
        q1_t: c(&layer.q1_t),
        o1_h: c(&layer.o1_h),
        o2_h: c(&layer.o2_h),
        p_h: c(&layer.p_h),
        q1_h: c(&layer.q1_h),
        alpha: c(&layer.alpha),
        beta: c(&layer.beta),
    }
}

/// Aggregation step of one plain layer on a `[K, M, N, F]` state.
pub fn aggregate(state: &CTensor, assoc: &Association, layer: &LayerParams) -> (CTensor, CTensor) {
    let mut tape = Tape::new();
    let inputs = layer_inputs(&mut tape, state, assoc, None);
    let w = layer_vars(&mut tape, layer);
    let x = tape.constant(state.clone());
    let (u, wm) = aggregate_on_tape(&mut tape, x, &inputs, &w);
    (tape.value(u).clone(), tape.value(wm).clone())
}

/// Combination step of one plain layer.
pub fn combine_plain(
    state: &CTensor,
    assoc: &Association,
    u: &CTensor,
    w: &CTensor,
    layer: &LayerParams,
    activation: Activation,
    leak_slope: f64,
) -> CTensor {
    let mut tape = Tape::new();
    let inputs = layer_inputs(&mut tape, state, assoc, None);
    let lv = layer_vars(&mut tape, layer);
    let x = tape.constant(state.clone());
    let uv = tape.constant(u.clone());
    let wv = tape.constant(w.clone());
    let out = combine_plain_on_tape(&mut tape, x, &inputs, uv, wv, &lv, activation, leak_slope);
    tape.value(out).clone()
}

/// One attention layer; `channels` is the raw (unmasked) channel the
/// attention coefficients correlate against.
pub fn combine_attention(
    state: &CTensor,
    assoc: &Association,
    channels: &ChannelSet,
    layer: &LayerParams,
    activation: Activation,
    leak_slope: f64,
) -> CTensor {
    let mut tape = Tape::new();
    let inputs = layer_inputs(&mut tape, state, assoc, Some(channels));
    let lv = layer_vars(&mut tape, layer);
    let x = tape.constant(state.clone());
    let out = combine_attention_on_tape(&mut tape, x, &inputs, &lv, activation, leak_slope);
    tape.value(out).clone()
}

mod checkpoint {
    use super::*;

    type Pair = [f64; 2];

    fn to_pairs(t: &CTensor) -> Vec<Pair> {
        t.data().iter().map(|z| [z.re, z.im]).collect()
    }

    fn matrix(t: &CTensor) -> Vec<Vec<Pair>> {
        let cols = t.shape()[1];
        to_pairs(t).chunks(cols).map(<[Pair]>::to_vec).collect()
    }

    fn from_matrix(rows: &[Vec<Pair>], what: &'static str) -> Result<CTensor> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Format {
                what,
                detail: "ragged matrix".into(),
            });
        }
        let data = rows
            .iter()
            .flatten()
            .map(|p| C64::new(p[0], p[1]))
            .collect();
        Ok(CTensor::from_vec(&[rows.len(), cols], data))
    }

    fn from_vector(v: &[Pair]) -> CTensor {
        CTensor::from_vec(&[v.len()], v.iter().map(|p| C64::new(p[0], p[1])).collect())
    }

    #[derive(Serialize, Deserialize)]
    pub(super) struct LayerDoc {
        o1_tilde: Vec<Vec<Pair>>,
        o2_tilde: Vec<Vec<Pair>>,
        p_tilde: Vec<Vec<Pair>>,
        q1_tilde: Vec<Vec<Pair>>,
        o1_hat: Vec<Vec<Pair>>,
        o2_hat: Vec<Vec<Pair>>,
        p_hat: Vec<Vec<Pair>>,
        q1_hat: Vec<Vec<Pair>>,
        alpha: Vec<Pair>,
        beta: Vec<Pair>,
    }

    #[derive(Serialize, Deserialize)]
    pub(super) struct CheckpointDoc {
        format: String,
        config: ModelConfig,
        layers: Vec<LayerDoc>,
        lift: Vec<Vec<Pair>>,
        collapse: Vec<Vec<Pair>>,
    }

    impl CheckpointDoc {
        pub(super) fn from_model(model: &Model) -> Self {
            let layers = model
                .params
                .layers
                .iter()
                .map(|l| LayerDoc {
                    o1_tilde: matrix(&l.o1_t),
                    o2_tilde: matrix(&l.o2_t),
                    p_tilde: matrix(&l.p_t),
                    q1_tilde: matrix(&l.q1_t),
                    o1_hat: matrix(&l.o1_h),
                    o2_hat: matrix(&l.o2_h),
                    p_hat: matrix(&l.p_h),
                    q1_hat: matrix(&l.q1_h),
                    alpha: to_pairs(&l.alpha),
                    beta: to_pairs(&l.beta),
                })
                .collect();
            Self {
                format: CHECKPOINT_FORMAT.into(),
                config: model.config.clone(),
                layers,
                lift: matrix(&model.params.lift),
                collapse: matrix(&model.params.collapse),
            }
        }

        pub(super) fn into_model(self) -> Result<Model> {
            if self.format != CHECKPOINT_FORMAT {
                return Err(Error::Format {
                    what: "checkpoint",
                    detail: format!("unsupported format {:?}", self.format),
                });
            }
            let what = "checkpoint";
            let layers = self
                .layers
                .iter()
                .map(|l| {
                    Ok(LayerParams {
                        o1_t: from_matrix(&l.o1_tilde, what)?,
                        o2_t: from_matrix(&l.o2_tilde, what)?,
                        p_t: from_matrix(&l.p_tilde, what)?,
                        q1_t: from_matrix(&l.q1_tilde, what)?,
                        o1_h: from_matrix(&l.o1_hat, what)?,
                        o2_h: from_matrix(&l.o2_hat, what)?,
                        p_h: from_matrix(&l.p_hat, what)?,
                        q1_h: from_matrix(&l.q1_hat, what)?,
                        alpha: from_vector(&l.alpha),
                        beta: from_vector(&l.beta),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let params = ModelParams {
                lift: from_matrix(&self.lift, what)?,
                collapse: from_matrix(&self.collapse, what)?,
                layers,
            };
            Model::from_parts(self.config, params)
        }
    }
}

impl Model {
    pub fn to_checkpoint_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(
            &checkpoint::CheckpointDoc::from_model(self),
        )?)
    }

    pub fn from_checkpoint_json(text: &str) -> Result<Self> {
        let doc: checkpoint::CheckpointDoc = serde_json::from_str(text)?;
        doc.into_model()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        crate::io::write_atomic(path, self.to_checkpoint_json()?.as_bytes())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_checkpoint_json(&text)
    }
}
