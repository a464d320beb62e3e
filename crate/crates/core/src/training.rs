//! Unsupervised training on the negative batch-mean sum rate, evaluation
//! against cached WMMSE references, and the cache itself.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::aagnn::{Model, ModelConfig, ParamVars};
use crate::autodiff::{grad_check, GradCheck, Tape, Var};
use crate::baselines::{ratio, wmmse, WmmseOptions};
use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::io::{read_to_string, write_atomic};
use crate::objective::{rate_report, Precoder};
use crate::scenario::{sample_rng, ChannelSet, Sample};
use crate::tensor::{CTensor, C64};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub learning_rate: f64,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Evaluate every this many epochs (and after the last); 0 disables.
    pub eval_every: usize,
    /// Rescale the gradient to at most this Euclidean norm.
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 64,
            learning_rate: 0.005,
            epochs: 100,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            eval_every: 1,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument(
                "batch_size must be at least 1".into(),
            ));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(
                "learning_rate must be non-negative".into(),
            ));
        }
        Ok(())
    }
}

/// Sum rate of precoder node `v` (`[K, M, N]`, already association-masked) as
/// a real scalar node.
pub fn sum_rate_on_tape(tape: &mut Tape, v: Var, channels: &ChannelSet, noise_power: f64) -> Var {
    let (k, m, n) = (channels.n_ues(), channels.n_aps(), channels.n_antennas());
    let hc = tape.constant(channels.tensor().map(|z| z.conj()).reshape(&[k, m * n]));
    let vf = tape.reshape(v, &[k, m * n]);
    let vt = tape.transpose(vf);
    let g = tape.matmul(hc, vt);
    let p = tape.abs2(g);
    let eye: Vec<f64> = (0..k * k)
        .map(|i| if i / k == i % k { 1.0 } else { 0.0 })
        .collect();
    let off: Vec<f64> = eye.iter().map(|e| 1.0 - e).collect();
    let sig = tape.mask(p, &eye);
    let sig = tape.sum_axes(sig, &[1]);
    let int = tape.mask(p, &off);
    let int = tape.sum_axes(int, &[1]);
    let int = tape.add_const(int, noise_power);
    let sinr = tape.div_real(sig, int);
    let rates = tape.log1p(sinr);
    tape.sum_all(rates)
}

/// Sum rate of one sample and `d(sum rate)/d(conj theta)` for every
/// parameter tensor.
pub fn sample_rate_and_grad(
    model: &Model,
    sample: &Sample,
    power: f64,
    noise_power: f64,
) -> Result<(f64, Vec<CTensor>)> {
    let mut tape = Tape::new();
    let vars = ParamVars::register(&mut tape, &model.params, true);
    let v = model.forward_on_tape(&mut tape, &vars, &sample.channels, &sample.assoc, power);
    let r = sum_rate_on_tape(&mut tape, v, &sample.channels, noise_power);
    let rate = tape.value(r).data()[0].re;
    let mut grads = tape.backward(r)?;
    let out = vars
        .vars()
        .into_iter()
        .zip(model.params.tensors())
        .map(|(var, t)| grads.take(var).unwrap_or_else(|| CTensor::zeros(t.shape())))
        .collect();
    Ok((rate, out))
}

/// Finite-difference check of the batch loss gradient over every parameter.
pub fn loss_grad_check(
    model: &Model,
    batch: &[Sample],
    power: f64,
    noise_power: f64,
    eps: f64,
) -> Result<GradCheck> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let scale = -1.0 / batch.len() as f64;
    grad_check(
        |tape, leaves| {
            let vars = ParamVars::from_vars(leaves).expect("leaves come from the model");
            let rates: Vec<Var> = batch
                .iter()
                .map(|s| {
                    let v = model.forward_on_tape(tape, &vars, &s.channels, &s.assoc, power);
                    sum_rate_on_tape(tape, v, &s.channels, noise_power)
                })
                .collect();
            let total = tape.add_all(&rates);
            tape.scale(total, scale)
        },
        &model
            .params
            .tensors()
            .into_iter()
            .cloned()
            .collect::<Vec<_>>(),
        eps,
    )
}

pub fn predict(model: &Model, sample: &Sample, power: f64) -> Precoder {
    model.forward(&sample.channels, &sample.assoc, power)
}

/// `-(1/B) sum_b sum_rate_b`.
pub fn loss(model: &Model, batch: &[Sample], power: f64, noise_power: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let total: f64 = batch
        .iter()
        .map(|s| {
            rate_report(
                &s.channels,
                &s.assoc,
                &predict(model, s, power),
                noise_power,
            )
            .sum_rate
        })
        .sum();
    Ok(-total / batch.len() as f64)
}

/// Loss and its gradient (conjugate cogradient convention) over a batch.
pub fn loss_and_grad(
    model: &Model,
    batch: &[Sample],
    power: f64,
    noise_power: f64,
) -> Result<(f64, Vec<CTensor>)> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    let scale = -1.0 / batch.len() as f64;
    let mut total = 0.0;
    let mut acc: Vec<CTensor> = model
        .params
        .tensors()
        .iter()
        .map(|t| CTensor::zeros(t.shape()))
        .collect();
    for s in batch {
        let (r, g) = sample_rate_and_grad(model, s, power, noise_power)?;
        total += r;
        for (a, gi) in acc.iter_mut().zip(&g) {
            for (x, y) in a.data_mut().iter_mut().zip(gi.data()) {
                *x += y * scale;
            }
        }
    }
    Ok((total * scale, acc))
}

/// Adam with moments kept on real and imaginary coordinates separately.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(shapes: &[usize], beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; 2 * n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; 2 * n]).collect(),
        }
    }

    /// One descent step. `grads` hold `dL/d(conj theta)`; the real-coordinate
    /// gradient is `(2 Re g, 2 Im g)`.
    pub fn update(&mut self, params: Vec<&mut CTensor>, grads: &[CTensor], lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (((p, g), m), v) in params
            .into_iter()
            .zip(grads)
            .zip(&mut self.m)
            .zip(&mut self.v)
        {
            for (j, (z, gz)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                let coords = [2.0 * gz.re, 2.0 * gz.im];
                let mut delta = [0.0; 2];
                for (c, &gc) in coords.iter().enumerate() {
                    let i = 2 * j + c;
                    m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gc;
                    v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gc * gc;
                    let mh = m[i] / c1;
                    let vh = v[i] / c2;
                    delta[c] = lr * mh / (vh.sqrt() + self.eps);
                }
                *z -= C64::new(delta[0], delta[1]);
            }
        }
    }
}

fn clip(grads: &mut [CTensor], max_norm: f64) {
    let norm = (4.0 * grads.iter().map(CTensor::norm_sqr).sum::<f64>()).sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        for g in grads {
            *g = g.scale(s);
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub eval_norm_rate: Option<f64>,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub records: Vec<EpochRecord>,
}

/// Floats in CSV output carry 12 significant digits.
pub fn fmt_float(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let s = format!("{x:.11e}");
    let v: f64 = s.parse().unwrap();
    format!("{v}")
}

impl History {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,eval_norm_rate,seconds\n");
        for r in &self.records {
            let eval = r.eval_norm_rate.map(fmt_float).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{}\n",
                r.epoch,
                fmt_float(r.train_loss),
                eval,
                fmt_float(r.seconds)
            ));
        }
        out
    }

    /// Same records without wall time, for determinism comparisons.
    pub fn without_timing(&self) -> Vec<(usize, f64, Option<f64>)> {
        self.records
            .iter()
            .map(|r| (r.epoch, r.train_loss, r.eval_norm_rate))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub index: usize,
    pub sum_rate_nats: f64,
}

/// WMMSE reference sum rates for one dataset, tied to its content digest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WmmseCache {
    pub digest: String,
    pub entries: Vec<CacheEntry>,
}

impl WmmseCache {
    pub fn build(dataset: &Dataset, opts: &WmmseOptions) -> Result<Self> {
        let entries = dataset
            .samples
            .iter()
            .enumerate()
            .map(|(index, s)| {
                let (_, trace) = wmmse(
                    &s.channels,
                    &s.assoc,
                    dataset.power,
                    dataset.noise_power,
                    opts,
                )?;
                Ok(CacheEntry {
                    index,
                    sum_rate_nats: trace.final_rate(),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            digest: dataset.digest()?,
            entries,
        })
    }

    pub fn get(&self, index: usize) -> Result<f64> {
        self.entries
            .get(index)
            .filter(|e| e.index == index)
            .or_else(|| self.entries.iter().find(|e| e.index == index))
            .map(|e| e.sum_rate_nats)
            .ok_or(Error::MissingCacheEntry(index))
    }

    /// Refuses a cache built for different dataset contents.
    pub fn check(&self, dataset: &Dataset) -> Result<()> {
        let actual = dataset.digest()?;
        if actual == self.digest {
            Ok(())
        } else {
            Err(Error::StaleCache {
                cached: self.digest.clone(),
                actual,
            })
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_json()?.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&read_to_string(path)?)?)
    }

    /// Loads `path` if it matches `dataset`, otherwise rebuilds and saves.
    pub fn load_or_build(path: &Path, dataset: &Dataset, opts: &WmmseOptions) -> Result<Self> {
        if path.exists() {
            let cache = Self::load(path)?;
            if cache.check(dataset).is_ok() && cache.entries.len() == dataset.len() {
                return Ok(cache);
            }
        }
        let cache = Self::build(dataset, opts)?;
        cache.save(path)?;
        Ok(cache)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Metrics {
    pub mean_norm_rate: f64,
    pub ratios: Vec<f64>,
    pub sum_rates: Vec<f64>,
}

impl Metrics {
    pub fn median_norm_rate(&self) -> f64 {
        median(&self.ratios)
    }

    pub fn std_norm_rate(&self) -> f64 {
        std_dev(&self.ratios)
    }
}

pub fn median(xs: &[f64]) -> f64 {
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

pub fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

/// Population standard deviation.
pub fn std_dev(xs: &[f64]) -> f64 {
    let m = mean(xs);
    (xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / xs.len() as f64).sqrt()
}

/// Normalized sum rates of arbitrary per-sample precoders.
pub fn evaluate_with<F>(dataset: &Dataset, cache: &WmmseCache, mut policy: F) -> Result<Metrics>
where
    F: FnMut(&Sample) -> Precoder,
{
    let mut ratios = Vec::with_capacity(dataset.len());
    let mut sum_rates = Vec::with_capacity(dataset.len());
    for (i, s) in dataset.samples.iter().enumerate() {
        let reference = cache.get(i)?;
        let r = rate_report(&s.channels, &s.assoc, &policy(s), dataset.noise_power).sum_rate;
        ratios.push(ratio(r, reference)?);
        sum_rates.push(r);
    }
    Ok(Metrics {
        mean_norm_rate: mean(&ratios),
        ratios,
        sum_rates,
    })
}

pub fn evaluate(model: &Model, dataset: &Dataset, cache: &WmmseCache) -> Result<Metrics> {
    evaluate_with(dataset, cache, |s| predict(model, s, dataset.power))
}

/// Median `||h_km||^2` of the network input over served links; sets the
/// starting size of the attention coefficients.
pub fn typical_gain(dataset: &Dataset, model: &Model) -> f64 {
    let mut gains = Vec::new();
    for s in &dataset.samples {
        let x = ChannelSet::new(model.network_input(&s.channels));
        for k in 0..dataset.n_ues {
            for m in 0..dataset.n_aps {
                if s.assoc.get(k, m) {
                    gains.push(x.link_gain(k, m));
                }
            }
        }
    }
    if gains.is_empty() {
        1.0
    } else {
        median(&gains)
    }
}

/// Channel scale making `||h||^2` read as a full-power SNR.
pub fn default_input_scale(power: f64, noise_power: f64) -> f64 {
    (power / noise_power).sqrt()
}

/// Fresh model for `dataset`: input scale from its SNR calibration, attention
/// scalars from its typical link gain.
pub fn init_model(mut config: ModelConfig, dataset: &Dataset) -> Result<Model> {
    config.input_scale = default_input_scale(dataset.power, dataset.noise_power);
    let probe = Model::new(config.clone(), 1.0)?;
    let g = typical_gain(dataset, &probe);
    Model::new(config, g)
}

/// Trains `model` in place. On a non-finite loss the model keeps the last
/// parameters that produced a finite one and the error names the batch.
pub fn train(
    model: &mut Model,
    cfg: &TrainConfig,
    train_set: &Dataset,
    eval: Option<(&Dataset, &WmmseCache)>,
) -> Result<History> {
    train_with(model, cfg, train_set, eval, |_| {})
}

/// [`train`] with a callback after every epoch.
pub fn train_with<F>(
    model: &mut Model,
    cfg: &TrainConfig,
    train_set: &Dataset,
    eval: Option<(&Dataset, &WmmseCache)>,
    mut on_epoch: F,
) -> Result<History>
where
    F: FnMut(&EpochRecord),
{
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    if let Some((ds, cache)) = eval {
        if ds.power != train_set.power || ds.noise_power != train_set.noise_power {
            return Err(Error::InvalidArgument(
                "train and eval sets differ in P or noise power".into(),
            ));
        }
        cache.check(ds)?;
    }
    let shapes: Vec<usize> = model.params.tensors().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(&shapes, cfg.beta1, cfg.beta2, cfg.eps);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = History::default();
    let start = Instant::now();
    for epoch in 1..=cfg.epochs {
        let mut rng = sample_rng(cfg.seed, epoch as u64);
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<Sample> = chunk
                .iter()
                .map(|&i| train_set.samples[i].clone())
                .collect();
            let (l, mut grads) =
                loss_and_grad(model, &batch, train_set.power, train_set.noise_power)?;
            if !l.is_finite()
                || grads
                    .iter()
                    .any(|g| g.data().iter().any(|z| !z.is_finite()))
            {
                return Err(Error::NonFiniteLoss { epoch, batch: b });
            }
            loss_sum += l * batch.len() as f64;
            if let Some(c) = cfg.clip_norm {
                clip(&mut grads, c);
            }
            adam.update(model.params.tensors_mut(), &grads, cfg.learning_rate);
        }
        let eval_norm_rate = match eval {
            Some((ds, cache))
                if cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs) =>
            {
                Some(evaluate(model, ds, cache)?.mean_norm_rate)
            }
            _ => None,
        };
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            eval_norm_rate,
            seconds: start.elapsed().as_secs_f64(),
        };
        on_epoch(&record);
        history.records.push(record);
    }
    Ok(history)
}
