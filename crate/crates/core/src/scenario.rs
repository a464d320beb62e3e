//! Cell-free deployment geometry, UE-AP association, large-scale gains and
//! Rayleigh small-scale fading.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::tensor::{CTensor, C64};

/// Inter-site distance of the AP grid, meters.
pub const DEFAULT_ISD: f64 = 400.0;
/// UE association radius, meters.
pub const DEFAULT_SERVING_RADIUS: f64 = 300.0;
/// Path loss distances are clamped below at this value, meters.
pub const MIN_PATH_LOSS_DISTANCE: f64 = 1.0;

/// Radius of the per-AP disc that UEs are dropped in.
pub fn ue_disc_radius(isd: f64) -> f64 {
    isd / 3f64.sqrt()
}

pub type Point = [f64; 2];

pub fn distance(a: Point, b: Point) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Per-sample RNG. Each sample index gets its own ChaCha stream so datasets can
/// be generated in any order (or in parallel) with identical results.
pub fn sample_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

/// Binary UE-AP association matrix, stored k-major.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Association {
    n_ues: usize,
    n_aps: usize,
    bits: Vec<u8>,
}

impl Association {
    pub fn new(n_ues: usize, n_aps: usize, bits: Vec<u8>) -> Self {
        assert_eq!(bits.len(), n_ues * n_aps, "association size mismatch");
        assert!(
            bits.iter().all(|&b| b <= 1),
            "association entries must be 0/1"
        );
        Self { n_ues, n_aps, bits }
    }

    pub fn full(n_ues: usize, n_aps: usize) -> Self {
        Self::new(n_ues, n_aps, vec![1; n_ues * n_aps])
    }

    pub fn from_fn(n_ues: usize, n_aps: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut bits = Vec::with_capacity(n_ues * n_aps);
        for k in 0..n_ues {
            for m in 0..n_aps {
                bits.push(f(k, m) as u8);
            }
        }
        Self::new(n_ues, n_aps, bits)
    }

    pub fn n_ues(&self) -> usize {
        self.n_ues
    }

    pub fn n_aps(&self) -> usize {
        self.n_aps
    }

    pub fn get(&self, k: usize, m: usize) -> bool {
        self.bits[k * self.n_aps + m] == 1
    }

    /// `d_km` as a real number.
    pub fn weight(&self, k: usize, m: usize) -> f64 {
        self.bits[k * self.n_aps + m] as f64
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    /// APs serving UE `k`, ascending.
    pub fn serving_set(&self, k: usize) -> Vec<usize> {
        (0..self.n_aps).filter(|&m| self.get(k, m)).collect()
    }

    /// Number of UEs served by AP `m`.
    pub fn served_count(&self, m: usize) -> usize {
        (0..self.n_ues).filter(|&k| self.get(k, m)).count()
    }

    /// Smallest number of serving APs over all UEs.
    pub fn min_serving(&self) -> usize {
        (0..self.n_ues)
            .map(|k| self.serving_set(k).len())
            .min()
            .unwrap_or(0)
    }
}

/// Channel tensor `h[k, m, n]` from antenna `n` of AP `m` to UE `k`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSet {
    h: CTensor,
}

impl ChannelSet {
    pub fn new(h: CTensor) -> Self {
        assert_eq!(h.shape().len(), 3, "channel tensor must be K x M x N");
        Self { h }
    }

    pub fn tensor(&self) -> &CTensor {
        &self.h
    }

    pub fn into_tensor(self) -> CTensor {
        self.h
    }

    pub fn n_ues(&self) -> usize {
        self.h.shape()[0]
    }

    pub fn n_aps(&self) -> usize {
        self.h.shape()[1]
    }

    pub fn n_antennas(&self) -> usize {
        self.h.shape()[2]
    }

    /// The N-vector `h_km`.
    pub fn link(&self, k: usize, m: usize) -> &[C64] {
        let n = self.n_antennas();
        let off = (k * self.n_aps() + m) * n;
        &self.h.data()[off..off + n]
    }

    pub fn link_gain(&self, k: usize, m: usize) -> f64 {
        self.link(k, m).iter().map(|z| z.norm_sqr()).sum()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScenarioConfig {
    pub n_ues: usize,
    pub n_aps: usize,
    pub n_antennas: usize,
    /// Per-AP power budget, watts.
    pub power: f64,
    pub edge_snr_db: f64,
    pub isd: f64,
    pub serving_radius: f64,
}

impl Default for ScenarioConfig {
    fn default() -> Self {
        Self {
            n_ues: 4,
            n_aps: 3,
            n_antennas: 8,
            power: 1.0,
            edge_snr_db: 5.0,
            isd: DEFAULT_ISD,
            serving_radius: DEFAULT_SERVING_RADIUS,
        }
    }
}

impl ScenarioConfig {
    pub fn disc_radius(&self) -> f64 {
        ue_disc_radius(self.isd)
    }

    pub fn noise_power(&self) -> f64 {
        noise_power(self.power, self.edge_snr_db, self.disc_radius())
    }

    pub fn ap_positions(&self) -> Vec<Point> {
        place_aps(self.n_aps, self.isd)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub ap_positions: Vec<Point>,
    pub ue_positions: Vec<Point>,
    pub assoc: Association,
    pub power_budget: f64,
    pub noise_power: f64,
    pub n_antennas: usize,
}

impl Scenario {
    /// Drops UEs for one sample and associates them.
    pub fn random<R: Rng + ?Sized>(config: &ScenarioConfig, rng: &mut R) -> Self {
        let ap_positions = config.ap_positions();
        let ue_positions = sample_ues(&ap_positions, config.n_ues, config.disc_radius(), rng);
        let assoc = associate(&ap_positions, &ue_positions, config.serving_radius);
        Self {
            ap_positions,
            ue_positions,
            assoc,
            power_budget: config.power,
            noise_power: config.noise_power(),
            n_antennas: config.n_antennas,
        }
    }

    pub fn n_ues(&self) -> usize {
        self.ue_positions.len()
    }

    pub fn n_aps(&self) -> usize {
        self.ap_positions.len()
    }

    /// Linear large-scale gain `g_km`.
    pub fn large_scale_gain(&self, k: usize, m: usize) -> f64 {
        let d = distance(self.ue_positions[k], self.ap_positions[m]);
        10f64.powf(-path_loss_db(d) / 10.0)
    }
}

/// APs on a `ceil(sqrt(M))` square grid with spacing `isd`, centered at the
/// origin and filled row-major.
pub fn place_aps(n_aps: usize, isd: f64) -> Vec<Point> {
    assert!(n_aps >= 1 && isd > 0.0);
    let side = (n_aps as f64).sqrt().ceil() as usize;
    let center = (side as f64 - 1.0) / 2.0;
    (0..n_aps)
        .map(|i| {
            let (row, col) = (i / side, i % side);
            [(col as f64 - center) * isd, (row as f64 - center) * isd]
        })
        .collect()
}

/// Uniform drops over the union of discs of `radius` around the APs, by
/// rejection from the bounding box of the union.
pub fn sample_ues<R: Rng + ?Sized>(
    ap_positions: &[Point],
    n_ues: usize,
    radius: f64,
    rng: &mut R,
) -> Vec<Point> {
    assert!(!ap_positions.is_empty());
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in ap_positions {
        for i in 0..2 {
            lo[i] = lo[i].min(p[i] - radius);
            hi[i] = hi[i].max(p[i] + radius);
        }
    }
    let mut out = Vec::with_capacity(n_ues);
    while out.len() < n_ues {
        let p = [rng.gen_range(lo[0]..hi[0]), rng.gen_range(lo[1]..hi[1])];
        if ap_positions.iter().any(|&a| distance(a, p) <= radius) {
            out.push(p);
        }
    }
    out
}

/// `d_km = 1` iff UE k is within `radius` of AP m (inclusive).
pub fn associate(ap_positions: &[Point], ue_positions: &[Point], radius: f64) -> Association {
    Association::from_fn(ue_positions.len(), ap_positions.len(), |k, m| {
        distance(ue_positions[k], ap_positions[m]) <= radius
    })
}

pub fn path_loss_db(d3d: f64) -> f64 {
    13.54 + 39.08 * d3d.max(MIN_PATH_LOSS_DISTANCE).log10()
}

/// Noise power that puts the full-power SNR at `edge_distance` to `edge_snr_db`.
pub fn noise_power(power: f64, edge_snr_db: f64, edge_distance: f64) -> f64 {
    assert!(power > 0.0);
    power * 10f64.powf(-path_loss_db(edge_distance) / 10.0) / 10f64.powf(edge_snr_db / 10.0)
}

/// Rayleigh channel `h_km = sqrt(g_km) e_km`, `e_km ~ CN(0, I_N)`.
pub fn sample_channel<R: Rng + ?Sized>(scenario: &Scenario, rng: &mut R) -> ChannelSet {
    let (k_n, m_n, n_n) = (scenario.n_ues(), scenario.n_aps(), scenario.n_antennas);
    let mut h = CTensor::zeros(&[k_n, m_n, n_n]);
    let data = h.data_mut();
    let std = std::f64::consts::FRAC_1_SQRT_2;
    for k in 0..k_n {
        for m in 0..m_n {
            let amp = scenario.large_scale_gain(k, m).sqrt();
            for n in 0..n_n {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                data[(k * m_n + m) * n_n + n] = C64::new(re * std, im * std) * amp;
            }
        }
    }
    ChannelSet::new(h)
}

/// Splits `h` into the served part `d_km h_km` and the interfering part
/// `(1 - d_km) h_km`.
pub fn masked_channels(channels: &ChannelSet, assoc: &Association) -> (CTensor, CTensor) {
    let h = channels.tensor();
    assert_eq!(
        (assoc.n_ues(), assoc.n_aps()),
        (channels.n_ues(), channels.n_aps()),
        "association shape does not match channel"
    );
    let served = CTensor::from_fn(h.shape(), |i| {
        if assoc.get(i[0], i[1]) {
            h.get(i)
        } else {
            C64::new(0.0, 0.0)
        }
    });
    let other = CTensor::from_fn(h.shape(), |i| {
        if assoc.get(i[0], i[1]) {
            C64::new(0.0, 0.0)
        } else {
            h.get(i)
        }
    });
    (served, other)
}

/// Recovers `h` and `D` from the masked pair; a zero-norm block maps to `d = 0`.
pub fn reconstruct(served: &CTensor, other: &CTensor) -> (ChannelSet, Association) {
    let shape = served.shape();
    assert_eq!(shape, other.shape());
    let (k_n, m_n, n_n) = (shape[0], shape[1], shape[2]);
    let h = served.zip_map(other, |a, b| a + b);
    let assoc = Association::from_fn(k_n, m_n, |k, m| {
        let off = (k * m_n + m) * n_n;
        let s: f64 = served.data()[off..off + n_n]
            .iter()
            .map(|z| z.norm_sqr())
            .sum();
        let t: f64 = h.data()[off..off + n_n].iter().map(|z| z.norm_sqr()).sum();
        association_ratio(s, t) > 0.5
    });
    (ChannelSet::new(h), assoc)
}

/// `||h~|| / ||h~ + h^||` from squared norms with the `0/0 = 0` convention.
pub fn association_ratio(served_sqr: f64, total_sqr: f64) -> f64 {
    if total_sqr == 0.0 {
        0.0
    } else {
        (served_sqr / total_sqr).sqrt()
    }
}

/// One dataset sample: association plus channel realization.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub assoc: Association,
    pub channels: ChannelSet,
}

/// Draws sample `index` of the dataset seeded by `seed`.
pub fn generate_sample(config: &ScenarioConfig, seed: u64, index: u64) -> Sample {
    let mut rng = sample_rng(seed, index);
    let scenario = Scenario::random(config, &mut rng);
    let channels = sample_channel(&scenario, &mut rng);
    Sample {
        assoc: scenario.assoc,
        channels,
    }
}
