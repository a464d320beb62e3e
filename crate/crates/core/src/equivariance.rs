//! Three-level permutation structure of the precoding problem.
//!
//! A [`PermTriple`] permutes UEs, APs, and the antennas inside each AP. On the
//! stacked `NM x K` matrix form it acts as `X -> A X Pi_K^T` with
//! `A = (Pi_M (x) I_N) diag(Pi_N,1, ..., Pi_N,M)`, and on `vec(X)` as
//! `Pi_K (x) A`. Every permutation here is stored as a destination map:
//! element `i` moves to position `perm[i]`.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{CTensor, C64, ZERO};

/// Largest `N*M*K` accepted by [`commutant_dimension`].
pub const MAX_COMMUTANT_SIZE: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PermTriple {
    /// One antenna permutation per (original) AP index.
    pub antenna_perms: Vec<Vec<usize>>,
    pub ap_perm: Vec<usize>,
    pub ue_perm: Vec<usize>,
}

fn is_bijection(p: &[usize]) -> bool {
    let mut seen = vec![false; p.len()];
    p.iter()
        .all(|&i| i < p.len() && !std::mem::replace(&mut seen[i], true))
}

fn invert(p: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; p.len()];
    for (i, &j) in p.iter().enumerate() {
        inv[j] = i;
    }
    inv
}

fn transposition(len: usize, a: usize) -> Vec<usize> {
    let mut p: Vec<usize> = (0..len).collect();
    p.swap(a, a + 1);
    p
}

impl PermTriple {
    pub fn new(
        antenna_perms: Vec<Vec<usize>>,
        ap_perm: Vec<usize>,
        ue_perm: Vec<usize>,
    ) -> Result<Self> {
        if antenna_perms.len() != ap_perm.len() {
            return Err(Error::Shape(format!(
                "{} antenna permutations for {} APs",
                antenna_perms.len(),
                ap_perm.len()
            )));
        }
        let n = antenna_perms.first().map_or(0, Vec::len);
        let ok = is_bijection(&ap_perm)
            && is_bijection(&ue_perm)
            && antenna_perms
                .iter()
                .all(|p| p.len() == n && is_bijection(p));
        if !ok {
            return Err(Error::InvalidArgument(
                "permutation is not a bijection".into(),
            ));
        }
        Ok(Self {
            antenna_perms,
            ap_perm,
            ue_perm,
        })
    }

    pub fn identity(n_antennas: usize, n_aps: usize, n_ues: usize) -> Self {
        Self {
            antenna_perms: vec![(0..n_antennas).collect(); n_aps],
            ap_perm: (0..n_aps).collect(),
            ue_perm: (0..n_ues).collect(),
        }
    }

    pub fn random<R: Rng + ?Sized>(
        n_antennas: usize,
        n_aps: usize,
        n_ues: usize,
        rng: &mut R,
    ) -> Self {
        let mut shuffled = |len: usize| {
            let mut p: Vec<usize> = (0..len).collect();
            p.shuffle(rng);
            p
        };
        let antenna_perms = (0..n_aps).map(|_| shuffled(n_antennas)).collect();
        let ap_perm = shuffled(n_aps);
        let ue_perm = shuffled(n_ues);
        Self {
            antenna_perms,
            ap_perm,
            ue_perm,
        }
    }

    pub fn n_antennas(&self) -> usize {
        self.antenna_perms.first().map_or(0, Vec::len)
    }

    pub fn n_aps(&self) -> usize {
        self.ap_perm.len()
    }

    pub fn n_ues(&self) -> usize {
        self.ue_perm.len()
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity(self.n_antennas(), self.n_aps(), self.n_ues())
    }

    /// `self` after `inner`: applying the result equals applying `inner`, then `self`.
    pub fn compose(&self, inner: &Self) -> Self {
        let ap_perm = inner.ap_perm.iter().map(|&m| self.ap_perm[m]).collect();
        let ue_perm = inner.ue_perm.iter().map(|&k| self.ue_perm[k]).collect();
        let antenna_perms = (0..inner.n_aps())
            .map(|m| {
                let outer = &self.antenna_perms[inner.ap_perm[m]];
                inner.antenna_perms[m].iter().map(|&n| outer[n]).collect()
            })
            .collect();
        Self {
            antenna_perms,
            ap_perm,
            ue_perm,
        }
    }

    pub fn inverse(&self) -> Self {
        let ap_inv = invert(&self.ap_perm);
        let antenna_perms = (0..self.n_aps())
            .map(|dest| invert(&self.antenna_perms[ap_inv[dest]]))
            .collect();
        Self {
            antenna_perms,
            ap_perm: ap_inv,
            ue_perm: invert(&self.ue_perm),
        }
    }

    /// Destination of `vec(X)` index `k*MN + m*N + n`; this is `Pi_K (x) A`.
    pub fn vec_index_map(&self) -> Vec<usize> {
        let (n_n, m_n, k_n) = (self.n_antennas(), self.n_aps(), self.n_ues());
        let mut map = Vec::with_capacity(n_n * m_n * k_n);
        for k in 0..k_n {
            for m in 0..m_n {
                for n in 0..n_n {
                    let (k2, m2, n2) = (self.ue_perm[k], self.ap_perm[m], self.antenna_perms[m][n]);
                    map.push((k2 * m_n + m2) * n_n + n2);
                }
            }
        }
        map
    }

    /// The `NMK x NMK` permutation matrix `Pi_K (x) A`.
    pub fn vec_matrix(&self) -> DMatrix<C64> {
        let map = self.vec_index_map();
        let size = map.len();
        let mut p = DMatrix::from_element(size, size, ZERO);
        for (src, &dst) in map.iter().enumerate() {
            p[(dst, src)] = C64::new(1.0, 0.0);
        }
        p
    }

    /// The `NM x NM` matrix `A`.
    pub fn stacked_row_matrix(&self) -> DMatrix<C64> {
        let (n_n, m_n) = (self.n_antennas(), self.n_aps());
        let mut a = DMatrix::from_element(n_n * m_n, n_n * m_n, ZERO);
        for m in 0..m_n {
            for n in 0..n_n {
                let dst = self.ap_perm[m] * n_n + self.antenna_perms[m][n];
                a[(dst, m * n_n + n)] = C64::new(1.0, 0.0);
            }
        }
        a
    }

    /// `Pi_K` as a `K x K` matrix.
    pub fn ue_matrix(&self) -> DMatrix<C64> {
        let k_n = self.n_ues();
        let mut p = DMatrix::from_element(k_n, k_n, ZERO);
        for (k, &dst) in self.ue_perm.iter().enumerate() {
            p[(dst, k)] = C64::new(1.0, 0.0);
        }
        p
    }

    /// Permutes a `[K, M, N, ...]` tensor; trailing axes are carried along.
    pub fn apply_tensor(&self, x: &CTensor) -> CTensor {
        let shape = x.shape();
        assert!(shape.len() >= 3, "expected a [K, M, N, ...] tensor");
        assert_eq!(
            (shape[0], shape[1], shape[2]),
            (self.n_ues(), self.n_aps(), self.n_antennas()),
            "permutation does not match tensor shape"
        );
        let inner: usize = shape[3..].iter().product();
        let map = self.vec_index_map();
        let mut out = CTensor::zeros(shape);
        let src = x.data();
        let dst = out.data_mut();
        for (i, &j) in map.iter().enumerate() {
            dst[j * inner..(j + 1) * inner].copy_from_slice(&src[i * inner..(i + 1) * inner]);
        }
        out
    }
}

/// `[K, M, N]` tensor to the stacked `NM x K` matrix `[H_1^T, ..., H_M^T]^T`.
pub fn to_stacked(x: &CTensor) -> DMatrix<C64> {
    let s = x.shape();
    assert_eq!(s.len(), 3);
    let (k_n, m_n, n_n) = (s[0], s[1], s[2]);
    DMatrix::from_fn(n_n * m_n, k_n, |row, k| x.get(&[k, row / n_n, row % n_n]))
}

pub fn from_stacked(x: &DMatrix<C64>, n_antennas: usize) -> CTensor {
    let (rows, k_n) = x.shape();
    assert_eq!(rows % n_antennas, 0);
    let m_n = rows / n_antennas;
    CTensor::from_fn(&[k_n, m_n, n_antennas], |i| {
        x[(i[1] * n_antennas + i[2], i[0])]
    })
}

/// `A X Pi_K^T` on the stacked form.
pub fn apply_3d_perm(x: &DMatrix<C64>, triple: &PermTriple) -> DMatrix<C64> {
    assert_eq!(
        x.shape(),
        (triple.n_antennas() * triple.n_aps(), triple.n_ues())
    );
    triple.stacked_row_matrix() * x * triple.ue_matrix().transpose()
}

/// The six orbit coefficients of an equivariant `NMK x NMK` weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SharedWeightSpec {
    pub o1: C64,
    pub o2: C64,
    pub p: C64,
    pub q1: C64,
    pub q2: C64,
    pub r: C64,
    pub n_antennas: usize,
    pub n_aps: usize,
    pub n_ues: usize,
}

impl SharedWeightSpec {
    pub fn random<R: Rng + ?Sized>(
        n_antennas: usize,
        n_aps: usize,
        n_ues: usize,
        rng: &mut R,
    ) -> Self {
        let mut c = || C64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
        Self {
            o1: c(),
            o2: c(),
            p: c(),
            q1: c(),
            q2: c(),
            r: c(),
            n_antennas,
            n_aps,
            n_ues,
        }
    }

    pub fn size(&self) -> usize {
        self.n_antennas * self.n_aps * self.n_ues
    }

    /// Coefficient for row `(k, m, n)` and column `(k2, m2, n2)`.
    pub fn entry(&self, row: (usize, usize, usize), col: (usize, usize, usize)) -> C64 {
        let (k, m, n) = row;
        let (k2, m2, n2) = col;
        match (k == k2, m == m2, n == n2) {
            (true, true, true) => self.o1,
            (true, true, false) => self.o2,
            (true, false, _) => self.p,
            (false, true, true) => self.q1,
            (false, true, false) => self.q2,
            (false, false, _) => self.r,
        }
    }

    /// Dense matrix acting on `vec(X)` (n fastest, then m, then k).
    pub fn materialize(&self) -> DMatrix<C64> {
        let (n_n, m_n) = (self.n_antennas, self.n_aps);
        let split = |i: usize| (i / (m_n * n_n), (i / n_n) % m_n, i % n_n);
        let size = self.size();
        DMatrix::from_fn(size, size, |i, j| self.entry(split(i), split(j)))
    }
}

pub fn materialize_weight(spec: &SharedWeightSpec) -> DMatrix<C64> {
    spec.materialize()
}

/// `max |(Pi_K (x) A) W - W (Pi_K (x) A)|`.
pub fn check_commutation(w: &DMatrix<C64>, triple: &PermTriple) -> f64 {
    let p = triple.vec_matrix();
    assert_eq!(
        w.shape(),
        p.shape(),
        "weight size does not match permutation"
    );
    let residual = &p * w - w * &p;
    residual.iter().map(|z| z.norm()).fold(0.0, f64::max)
}

/// Generators of the hierarchical group: adjacent UE swaps, adjacent AP swaps,
/// and adjacent antenna swaps inside each AP separately.
pub fn generators(n_antennas: usize, n_aps: usize, n_ues: usize) -> Vec<PermTriple> {
    let id = PermTriple::identity(n_antennas, n_aps, n_ues);
    let mut gens = Vec::new();
    for k in 0..n_ues.saturating_sub(1) {
        gens.push(PermTriple {
            ue_perm: transposition(n_ues, k),
            ..id.clone()
        });
    }
    for m in 0..n_aps.saturating_sub(1) {
        gens.push(PermTriple {
            ap_perm: transposition(n_aps, m),
            ..id.clone()
        });
    }
    for m in 0..n_aps {
        for n in 0..n_antennas.saturating_sub(1) {
            let mut g = id.clone();
            g.antenna_perms[m] = transposition(n_antennas, n);
            gens.push(g);
        }
    }
    gens
}

/// Dimension of the space of matrices commuting with every `Pi_K (x) A`,
/// from the null space of the stacked commutation constraints.
pub fn commutant_dimension(n_antennas: usize, n_aps: usize, n_ues: usize) -> Result<usize> {
    if n_antennas == 0 || n_aps == 0 || n_ues == 0 {
        return Err(Error::InvalidArgument(
            "dimensions must be at least 1".into(),
        ));
    }
    let size = n_antennas * n_aps * n_ues;
    if size > MAX_COMMUTANT_SIZE {
        return Err(Error::TooLarge {
            size,
            limit: MAX_COMMUTANT_SIZE,
        });
    }
    let gens = generators(n_antennas, n_aps, n_ues);
    let unknowns = size * size;
    if gens.is_empty() {
        return Ok(unknowns);
    }
    // Row (i, j) of generator g: W[pinv(i), j] - W[i, p(j)] = 0.
    let mut c = DMatrix::<f64>::zeros(gens.len() * unknowns, unknowns);
    for (g, triple) in gens.iter().enumerate() {
        let p = triple.vec_index_map();
        let pinv = invert(&p);
        for i in 0..size {
            for j in 0..size {
                let row = g * unknowns + i * size + j;
                c[(row, pinv[i] * size + j)] += 1.0;
                c[(row, i * size + p[j])] -= 1.0;
            }
        }
    }
    let sv = c.singular_values();
    let largest = sv.iter().cloned().fold(0.0, f64::max);
    let rank = sv.iter().filter(|&&s| s > 1e-8 * largest).count();
    Ok(unknowns - rank)
}

/// Number of orbits of the group on index pairs; equals the commutant dimension.
pub fn orbit_count(n_antennas: usize, n_aps: usize, n_ues: usize) -> usize {
    let ue_classes = 1 + usize::from(n_ues >= 2);
    let ap_antenna_classes = 1 + usize::from(n_antennas >= 2) + usize::from(n_aps >= 2);
    ue_classes * ap_antenna_classes
}

#[derive(Clone, Debug, PartialEq)]
pub struct EquivarianceReport {
    pub passed: bool,
    pub max_deviation: f64,
}

/// Compares `A F(H_D, H_D') Pi_K^T` against `F(A H_D Pi_K^T, A H_D' Pi_K^T)`,
/// relative to the largest output entry.
pub fn check_policy_equivariance<F>(
    policy: F,
    served: &CTensor,
    other: &CTensor,
    triple: &PermTriple,
    tol: f64,
) -> EquivarianceReport
where
    F: Fn(&CTensor, &CTensor) -> CTensor,
{
    let base = policy(served, other);
    let lhs = triple.apply_tensor(&base);
    let rhs = policy(&triple.apply_tensor(served), &triple.apply_tensor(other));
    let scale = lhs.max_abs().max(rhs.max_abs()).max(f64::MIN_POSITIVE);
    let max_deviation = lhs.max_abs_diff(&rhs) / scale;
    EquivarianceReport {
        passed: max_deviation <= tol,
        max_deviation,
    }
}
