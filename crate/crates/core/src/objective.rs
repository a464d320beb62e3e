//! SINR, sum rate and per-AP power of a downlink precoder.

use serde::{Deserialize, Serialize};

use crate::scenario::{association_ratio, Association, ChannelSet};
use crate::tensor::{CTensor, C64, ZERO};

/// Precoder `v[k, m, n]`, same layout as [`ChannelSet`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Precoder {
    v: CTensor,
}

impl Precoder {
    pub fn new(v: CTensor) -> Self {
        assert_eq!(v.shape().len(), 3, "precoder tensor must be K x M x N");
        Self { v }
    }

    pub fn zeros(n_ues: usize, n_aps: usize, n_antennas: usize) -> Self {
        Self::new(CTensor::zeros(&[n_ues, n_aps, n_antennas]))
    }

    pub fn tensor(&self) -> &CTensor {
        &self.v
    }

    pub fn into_tensor(self) -> CTensor {
        self.v
    }

    pub fn n_ues(&self) -> usize {
        self.v.shape()[0]
    }

    pub fn n_aps(&self) -> usize {
        self.v.shape()[1]
    }

    pub fn n_antennas(&self) -> usize {
        self.v.shape()[2]
    }

    pub fn block(&self, k: usize, m: usize) -> &[C64] {
        let n = self.n_antennas();
        let off = (k * self.n_aps() + m) * n;
        &self.v.data()[off..off + n]
    }

    pub fn block_mut(&mut self, k: usize, m: usize) -> &mut [C64] {
        let n = self.n_antennas();
        let off = (k * self.n_aps() + m) * n;
        &mut self.v.data_mut()[off..off + n]
    }

    /// True when every block with `d_km = 0` is exactly zero.
    pub fn respects(&self, assoc: &Association) -> bool {
        (0..self.n_ues()).all(|k| {
            (0..self.n_aps())
                .all(|m| assoc.get(k, m) || self.block(k, m).iter().all(|z| *z == ZERO))
        })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub sinr: Vec<f64>,
    pub rates: Vec<f64>,
    pub sum_rate: f64,
}

impl RateReport {
    pub fn from_sinr(sinr: Vec<f64>) -> Self {
        let rates: Vec<f64> = sinr.iter().map(|g| g.ln_1p()).collect();
        let sum_rate = rates.iter().sum();
        Self {
            sinr,
            rates,
            sum_rate,
        }
    }
}

fn check_shapes(channels: &ChannelSet, assoc: &Association, precoder: &Precoder) {
    assert_eq!(
        channels.tensor().shape(),
        precoder.tensor().shape(),
        "channel/precoder shape"
    );
    assert_eq!(
        (assoc.n_ues(), assoc.n_aps()),
        (channels.n_ues(), channels.n_aps()),
        "association shape"
    );
}

fn dot_h(a: &[C64], b: &[C64]) -> C64 {
    a.iter().zip(b).map(|(x, y)| x.conj() * y).sum()
}

/// Signal/interference powers from the effective gains
/// `s[k][i] = sum_m weight(i, m) h_km^H v_im`.
fn sinr_from_gains(gains: &[Vec<C64>], noise: f64) -> Vec<f64> {
    let k_n = gains.len();
    (0..k_n)
        .map(|k| {
            let signal = gains[k][k].norm_sqr();
            let interference: f64 = (0..k_n)
                .filter(|&i| i != k)
                .map(|i| gains[k][i].norm_sqr())
                .sum();
            signal / (interference + noise)
        })
        .collect()
}

/// Per-UE SINR with the association applied to the precoder.
pub fn sinr_direct(
    channels: &ChannelSet,
    assoc: &Association,
    precoder: &Precoder,
    noise_power: f64,
) -> Vec<f64> {
    check_shapes(channels, assoc, precoder);
    let (k_n, m_n) = (channels.n_ues(), channels.n_aps());
    let gains: Vec<Vec<C64>> = (0..k_n)
        .map(|k| {
            (0..k_n)
                .map(|i| {
                    (0..m_n)
                        .map(|m| {
                            dot_h(channels.link(k, m), precoder.block(i, m)) * assoc.weight(i, m)
                        })
                        .sum()
                })
                .collect()
        })
        .collect();
    sinr_from_gains(&gains, noise_power)
}

/// SINR from the masked channel pair, recovering `d_im` through the norm ratio
/// `||h~_im|| / ||h~_im + h^_im||`.
pub fn sinr_masked(
    served: &CTensor,
    other: &CTensor,
    precoder: &Precoder,
    noise_power: f64,
) -> Vec<f64> {
    let shape = served.shape();
    assert_eq!(shape, other.shape());
    assert_eq!(shape, precoder.tensor().shape());
    let (k_n, m_n, n_n) = (shape[0], shape[1], shape[2]);
    let block = |t: &CTensor, k: usize, m: usize| {
        let off = (k * m_n + m) * n_n;
        t.data()[off..off + n_n].to_vec()
    };
    let total = served.zip_map(other, |a, b| a + b);
    let ratio: Vec<f64> = (0..k_n * m_n)
        .map(|km| {
            let (k, m) = (km / m_n, km % m_n);
            let s: f64 = block(served, k, m).iter().map(|z| z.norm_sqr()).sum();
            let t: f64 = block(&total, k, m).iter().map(|z| z.norm_sqr()).sum();
            association_ratio(s, t)
        })
        .collect();
    (0..k_n)
        .map(|k| {
            let signal: C64 = (0..m_n)
                .map(|m| dot_h(&block(served, k, m), precoder.block(k, m)))
                .sum();
            let interference: f64 = (0..k_n)
                .filter(|&i| i != k)
                .map(|i| {
                    let g: C64 = (0..m_n)
                        .map(|m| {
                            dot_h(&block(&total, k, m), precoder.block(i, m)) * ratio[i * m_n + m]
                        })
                        .sum();
                    g.norm_sqr()
                })
                .sum();
            signal.norm_sqr() / (interference + noise_power)
        })
        .collect()
}

/// `sum_k ln(1 + sinr_k)`, in nats.
pub fn sum_rate(sinr: &[f64]) -> f64 {
    sinr.iter().map(|g| g.ln_1p()).sum()
}

pub fn rate_report(
    channels: &ChannelSet,
    assoc: &Association,
    precoder: &Precoder,
    noise_power: f64,
) -> RateReport {
    RateReport::from_sinr(sinr_direct(channels, assoc, precoder, noise_power))
}

/// `sum_k ||v_km||^2` for each AP.
pub fn per_ap_power(precoder: &Precoder) -> Vec<f64> {
    (0..precoder.n_aps())
        .map(|m| {
            (0..precoder.n_ues())
                .map(|k| {
                    precoder
                        .block(k, m)
                        .iter()
                        .map(|z| z.norm_sqr())
                        .sum::<f64>()
                })
                .sum()
        })
        .collect()
}

/// Relative slack above the budget tolerated before an AP is rescaled; keeps
/// the projection idempotent under rounding.
pub const PROJECTION_SLACK: f64 = 1e-12;

/// Scales each over-budget AP down onto `sum_k ||v_km||^2 = power`.
pub fn project_per_ap(precoder: &Precoder, power: f64) -> Precoder {
    assert!(power > 0.0);
    let powers = per_ap_power(precoder);
    let mut out = precoder.clone();
    for (m, &p) in powers.iter().enumerate() {
        if p > power * (1.0 + PROJECTION_SLACK) {
            let s = (power / p).sqrt();
            for k in 0..out.n_ues() {
                for z in out.block_mut(k, m) {
                    *z *= s;
                }
            }
        }
    }
    out
}
