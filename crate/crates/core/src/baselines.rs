//! Reference precoders: per-AP maximum ratio transmission and an
//! association-restricted WMMSE with per-AP power constraints.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::objective::{per_ap_power, project_per_ap, rate_report, Precoder};
use crate::scenario::{Association, ChannelSet};
use crate::tensor::C64;

/// Eigenvalues below this fraction of the largest are treated as zero when a
/// Hermitian system is inverted.
const PINV_RTOL: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WmmseOptions {
    pub max_outer_iters: usize,
    /// Stop when the relative sum-rate change drops below this.
    pub objective_tol: f64,
    /// Per-AP power tolerance, as a fraction of the budget.
    pub power_tol: f64,
    pub bisection_iters: usize,
    pub sweep_limit: usize,
}

impl Default for WmmseOptions {
    fn default() -> Self {
        Self {
            max_outer_iters: 200,
            objective_tol: 1e-6,
            power_tol: 1e-8,
            bisection_iters: 60,
            sweep_limit: 50,
        }
    }
}

impl WmmseOptions {
    fn validate(&self) -> Result<()> {
        let ok = self.max_outer_iters > 0
            && self.objective_tol > 0.0
            && self.power_tol > 0.0
            && self.bisection_iters > 0
            && self.sweep_limit > 0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(
                "WMMSE options must be positive".into(),
            ))
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WmmseTrace {
    /// Sum rate (nats) of the MRT start followed by every accepted iterate.
    pub sum_rates: Vec<f64>,
    pub final_powers: Vec<f64>,
    pub converged: bool,
    /// Some Hermitian system was rank deficient and solved in the
    /// least-norm sense.
    pub regularized: bool,
}

impl WmmseTrace {
    pub fn iterations(&self) -> usize {
        self.sum_rates.len() - 1
    }

    pub fn final_rate(&self) -> f64 {
        *self.sum_rates.last().unwrap()
    }
}

/// `v_km = d_km sqrt(P / K_m) h_km / ||h_km||`: each AP splits its budget
/// evenly over the UEs it serves.
pub fn mrt(channels: &ChannelSet, assoc: &Association, power: f64) -> Precoder {
    let (k_n, m_n, n_n) = (channels.n_ues(), channels.n_aps(), channels.n_antennas());
    let mut v = Precoder::zeros(k_n, m_n, n_n);
    for m in 0..m_n {
        let served = assoc.served_count(m);
        if served == 0 {
            continue;
        }
        let amp = (power / served as f64).sqrt();
        for k in 0..k_n {
            let norm = channels.link_gain(k, m).sqrt();
            if !assoc.get(k, m) || norm == 0.0 {
                continue;
            }
            for (out, h) in v.block_mut(k, m).iter_mut().zip(channels.link(k, m)) {
                *out = h * (amp / norm);
            }
        }
    }
    v
}

/// `sum_rate(candidate) / sum_rate(reference)`.
pub fn normalized_sum_rate(
    candidate: &Precoder,
    reference: &Precoder,
    channels: &ChannelSet,
    assoc: &Association,
    noise_power: f64,
) -> Result<f64> {
    let r = rate_report(channels, assoc, reference, noise_power).sum_rate;
    let c = rate_report(channels, assoc, candidate, noise_power).sum_rate;
    ratio(c, r)
}

/// Normalized rate from already computed sum rates.
pub fn ratio(candidate: f64, reference: f64) -> Result<f64> {
    if reference > 0.0 {
        Ok(candidate / reference)
    } else {
        Err(Error::ZeroReference)
    }
}

/// Least-norm solve of a Hermitian PSD system through its eigendecomposition.
/// Returns the solution and whether any direction was dropped.
fn hermitian_solve(a: &DMatrix<C64>, b: &DMatrix<C64>) -> (DMatrix<C64>, bool) {
    let eig = SymmetricEigen::new(a.clone());
    let top = eig.eigenvalues.iter().fold(0.0f64, |acc, &e| acc.max(e));
    let mut dropped = false;
    let inv: Vec<f64> = eig
        .eigenvalues
        .iter()
        .map(|&e| {
            if e > PINV_RTOL * top {
                1.0 / e
            } else {
                dropped = true;
                0.0
            }
        })
        .collect();
    let q = &eig.eigenvectors;
    let mut y = q.adjoint() * b;
    for (i, s) in inv.iter().enumerate() {
        y.row_mut(i).scale_mut(*s);
    }
    (q * y, dropped)
}

/// One UE's precoder subproblem, restricted to its serving set.
struct UeSystem {
    aps: Vec<usize>,
    /// `sum_k w_k |u_k|^2 g_k g_k^H`
    a: DMatrix<C64>,
    /// `w_i u_i g_i`
    b: DVector<C64>,
}

impl UeSystem {
    fn dim(&self) -> usize {
        self.a.nrows()
    }

    fn with_multipliers(&self, mu: &[f64], n: usize, skip: Option<usize>) -> DMatrix<C64> {
        let mut a = self.a.clone();
        for (slot, &m) in self.aps.iter().enumerate() {
            if Some(m) == skip {
                continue;
            }
            for j in 0..n {
                a[(slot * n + j, slot * n + j)] += C64::new(mu[m], 0.0);
            }
        }
        a
    }

    fn solve(&self, mu: &[f64], n: usize) -> (DVector<C64>, bool) {
        let a = self.with_multipliers(mu, n, None);
        let (x, dropped) = hermitian_solve(
            &a,
            &DMatrix::from_column_slice(self.dim(), 1, self.b.as_slice()),
        );
        (DVector::from_column_slice(x.as_slice()), dropped)
    }

    /// Spectral data of the block of AP `m` after eliminating the other APs:
    /// `||v_im(mu)||^2 = sum_j c_j / (s_j + mu)^2`.
    fn reduced_spectrum(&self, m: usize, mu: &[f64], n: usize) -> (Vec<(f64, f64)>, bool) {
        let slot = self.aps.iter().position(|&x| x == m).unwrap();
        let a = self.with_multipliers(mu, n, Some(m));
        let d = self.dim();
        let own: Vec<usize> = (slot * n..slot * n + n).collect();
        let rest: Vec<usize> = (0..d).filter(|i| !own.contains(i)).collect();
        let pick = |rows: &[usize], cols: &[usize]| {
            DMatrix::from_fn(rows.len(), cols.len(), |i, j| a[(rows[i], cols[j])])
        };
        let mut s = pick(&own, &own);
        let mut c = DVector::from_fn(n, |i, _| self.b[own[i]]);
        let mut dropped = false;
        if !rest.is_empty() {
            let a_oo = pick(&rest, &rest);
            let a_om = pick(&rest, &own);
            let mut rhs = DMatrix::zeros(rest.len(), n + 1);
            rhs.columns_mut(0, n).copy_from(&a_om);
            for (i, &r) in rest.iter().enumerate() {
                rhs[(i, n)] = self.b[r];
            }
            let (x, dr) = hermitian_solve(&a_oo, &rhs);
            dropped = dr;
            let a_mo = a_om.adjoint();
            s -= &a_mo * x.columns(0, n);
            c -= &a_mo * x.column(n);
        }
        let s = (&s + s.adjoint()) * C64::new(0.5, 0.0);
        let eig = SymmetricEigen::new(s);
        let top = eig.eigenvalues.iter().fold(0.0f64, |acc, &e| acc.max(e));
        let ct = eig.eigenvectors.adjoint() * c;
        let terms = eig
            .eigenvalues
            .iter()
            .zip(ct.iter())
            .filter(|(&e, _)| e > PINV_RTOL * top)
            .map(|(&e, z)| (e, z.norm_sqr()))
            .collect();
        (terms, dropped)
    }
}

fn spectrum_power(terms: &[Vec<(f64, f64)>], mu: f64) -> f64 {
    terms
        .iter()
        .flatten()
        .map(|&(s, c)| c / ((s + mu) * (s + mu)))
        .sum()
}

struct Problem<'a> {
    channels: &'a ChannelSet,
    assoc: &'a Association,
    serving: Vec<Vec<usize>>,
    power: f64,
    noise: f64,
}

impl Problem<'_> {
    fn n(&self) -> usize {
        self.channels.n_antennas()
    }

    /// `g[k][i] = sum_{m in S_i} h_km^H v_im`
    fn gains(&self, v: &Precoder) -> Vec<Vec<C64>> {
        let k_n = self.channels.n_ues();
        (0..k_n)
            .map(|k| {
                (0..k_n)
                    .map(|i| {
                        self.serving[i]
                            .iter()
                            .map(|&m| {
                                self.channels
                                    .link(k, m)
                                    .iter()
                                    .zip(v.block(i, m))
                                    .map(|(h, x)| h.conj() * x)
                                    .sum::<C64>()
                            })
                            .sum()
                    })
                    .collect()
            })
            .collect()
    }

    fn sum_rate(&self, v: &Precoder) -> f64 {
        rate_report(self.channels, self.assoc, v, self.noise).sum_rate
    }

    /// MMSE receivers and weights for the current precoder.
    fn receivers(&self, v: &Precoder) -> (Vec<C64>, Vec<f64>) {
        let g = self.gains(v);
        let k_n = g.len();
        let mut u = Vec::with_capacity(k_n);
        let mut w = Vec::with_capacity(k_n);
        for k in 0..k_n {
            let total: f64 = g[k].iter().map(|z| z.norm_sqr()).sum::<f64>() + self.noise;
            let uk = g[k][k] / total;
            let mse = (1.0 - (uk.conj() * g[k][k]).re).max(f64::MIN_POSITIVE);
            u.push(uk);
            w.push(1.0 / mse);
        }
        (u, w)
    }

    fn stacked(&self, k: usize, aps: &[usize]) -> DVector<C64> {
        let n = self.n();
        DVector::from_iterator(
            aps.len() * n,
            aps.iter()
                .flat_map(|&m| self.channels.link(k, m).iter().copied()),
        )
    }

    fn systems(&self, u: &[C64], w: &[f64]) -> Vec<UeSystem> {
        let k_n = self.channels.n_ues();
        (0..k_n)
            .map(|i| {
                let aps = self.serving[i].clone();
                let d = aps.len() * self.n();
                let mut a = DMatrix::zeros(d, d);
                for k in 0..k_n {
                    let g = self.stacked(k, &aps);
                    let c = w[k] * u[k].norm_sqr();
                    a.gerc(C64::new(c, 0.0), &g, &g, C64::new(1.0, 0.0));
                }
                let a = (&a + a.adjoint()) * C64::new(0.5, 0.0);
                let b = self.stacked(i, &aps) * (u[i] * w[i]);
                UeSystem { aps, a, b }
            })
            .collect()
    }

    /// Cyclic per-AP multiplier search; `mu` is updated in place.
    fn multipliers(&self, systems: &[UeSystem], mu: &mut [f64], opts: &WmmseOptions) -> bool {
        let n = self.n();
        let m_n = self.channels.n_aps();
        let (hi_p, lo_p) = (
            self.power * (1.0 + opts.power_tol),
            self.power * (1.0 - opts.power_tol),
        );
        let mut dropped = false;
        for _ in 0..opts.sweep_limit {
            let mut settled = true;
            for m in 0..m_n {
                let terms: Vec<Vec<(f64, f64)>> = systems
                    .iter()
                    .filter(|s| s.aps.contains(&m))
                    .map(|s| {
                        let (t, dr) = s.reduced_spectrum(m, mu, n);
                        dropped |= dr;
                        t
                    })
                    .collect();
                if terms.is_empty() {
                    continue;
                }
                let p_now = spectrum_power(&terms, mu[m]);
                if p_now <= hi_p && (mu[m] == 0.0 || p_now >= lo_p) {
                    continue;
                }
                settled = false;
                if spectrum_power(&terms, 0.0) <= self.power {
                    mu[m] = 0.0;
                    continue;
                }
                let mut hi = 1.0;
                while spectrum_power(&terms, hi) > self.power && hi < f64::MAX / 4.0 {
                    hi *= 2.0;
                }
                let mut lo = 0.0;
                for _ in 0..opts.bisection_iters {
                    let mid = 0.5 * (lo + hi);
                    if spectrum_power(&terms, mid) > self.power {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                    if spectrum_power(&terms, hi) >= lo_p {
                        break;
                    }
                }
                mu[m] = hi;
            }
            if settled {
                break;
            }
        }
        dropped
    }

    fn precoder_step(&self, v: &Precoder, mu: &mut [f64], opts: &WmmseOptions) -> (Precoder, bool) {
        let (u, w) = self.receivers(v);
        let systems = self.systems(&u, &w);
        let mut dropped = self.multipliers(&systems, mu, opts);
        let n = self.n();
        let ch = self.channels;
        let mut out = Precoder::zeros(ch.n_ues(), ch.n_aps(), n);
        for (i, sys) in systems.iter().enumerate() {
            let (x, dr) = sys.solve(mu, n);
            dropped |= dr;
            for (slot, &m) in sys.aps.iter().enumerate() {
                out.block_mut(i, m)
                    .copy_from_slice(&x.as_slice()[slot * n..slot * n + n]);
            }
        }
        (project_per_ap(&out, self.power), dropped)
    }
}

/// Association-restricted WMMSE started from [`mrt`]. Every returned iterate
/// is feasible and the recorded sum rate never decreases: a step that would
/// lower it ends the run instead.
pub fn wmmse(
    channels: &ChannelSet,
    assoc: &Association,
    power: f64,
    noise_power: f64,
    opts: &WmmseOptions,
) -> Result<(Precoder, WmmseTrace)> {
    opts.validate()?;
    if power <= 0.0 || noise_power < 0.0 {
        return Err(Error::InvalidArgument(
            "power must be positive and noise non-negative".into(),
        ));
    }
    let serving: Vec<Vec<usize>> = (0..channels.n_ues())
        .map(|k| assoc.serving_set(k))
        .collect();
    if let Some(k) = serving.iter().position(Vec::is_empty) {
        return Err(Error::InvalidArgument(format!("UE {k} has no serving AP")));
    }
    let problem = Problem {
        channels,
        assoc,
        serving,
        power,
        noise: noise_power,
    };
    let mut v = mrt(channels, assoc, power);
    let mut rate = problem.sum_rate(&v);
    let mut trace = WmmseTrace {
        sum_rates: vec![rate],
        final_powers: Vec::new(),
        converged: false,
        regularized: false,
    };
    let mut mu = vec![0.0; channels.n_aps()];
    for _ in 0..opts.max_outer_iters {
        let (next, dropped) = problem.precoder_step(&v, &mut mu, opts);
        trace.regularized |= dropped;
        let next_rate = problem.sum_rate(&next);
        if !(next_rate >= rate) {
            trace.converged = true;
            break;
        }
        let change = (next_rate - rate).abs();
        v = next;
        rate = next_rate;
        trace.sum_rates.push(rate);
        if change <= opts.objective_tol * rate.abs() {
            trace.converged = true;
            break;
        }
    }
    debug_assert!(v.respects(assoc));
    trace.final_powers = per_ap_power(&v);
    Ok((v, trace))
}
