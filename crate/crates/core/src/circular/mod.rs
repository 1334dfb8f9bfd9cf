//! Circular multidimensional scaling and sector allocation.
//!
//! Items are placed on angles so that `1 - cos(separation)` approximates a
//! given distance matrix. Since `cos` is even and 2π-periodic, the shortest
//! arc separation and the raw difference give the same value, which keeps the
//! objective smooth everywhere.

pub mod lbfgs;

use std::collections::BTreeMap;
use std::f64::consts::{PI, TAU};

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::par;
pub use lbfgs::{LbfgsOptions, LbfgsResult};

/// Shortest arc between two angles, in [0, π].
pub fn angular_separation(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(TAU);
    d.min(TAU - d)
}

/// Wraps into [0, 2π).
pub fn normalize_angle(a: f64) -> f64 {
    let w = a.rem_euclid(TAU);
    if w >= TAU {
        0.0
    } else {
        w
    }
}

/// Wraps into (-π, π].
pub fn signed_angle(a: f64) -> f64 {
    let w = normalize_angle(a);
    if w > PI {
        w - TAU
    } else {
        w
    }
}

/// Σ_{i<j} (1 - cos Δ_ij - D_ij)².
pub fn circular_stress(thetas: &[f64], d: &[Vec<f64>]) -> f64 {
    stress_with(thetas, d, false)
}

// Trig goes through libm: std sin/cos can be fused into sincos under
// optimization, which changes low bits between build profiles.
pub fn stress_with(thetas: &[f64], d: &[Vec<f64>], parallel: bool) -> f64 {
    let n = thetas.len();
    par::sum_range(n, parallel, |i| {
        let mut s = 0.0;
        for j in i + 1..n {
            let r = 1.0 - libm::cos(thetas[i] - thetas[j]) - d[i][j];
            s += r * r;
        }
        s
    })
}

/// ∂S/∂θ_i = Σ_j 2 (d_ij - D_ij) sin(θ_i - θ_j).
pub fn circular_stress_gradient(thetas: &[f64], d: &[Vec<f64>]) -> Vec<f64> {
    gradient_with(thetas, d, false)
}

pub fn gradient_with(thetas: &[f64], d: &[Vec<f64>], parallel: bool) -> Vec<f64> {
    let n = thetas.len();
    par::map_range(n, parallel, |i| {
        let mut g = 0.0;
        for j in 0..n {
            if j != i {
                let diff = thetas[i] - thetas[j];
                g += 2.0 * (1.0 - libm::cos(diff) - d[i][j]) * libm::sin(diff);
            }
        }
        g
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MdsConfig {
    pub restarts: usize,
    pub max_iterations: usize,
    pub grad_tolerance: f64,
    pub seed: u64,
    pub parallel: bool,
}

impl Default for MdsConfig {
    fn default() -> Self {
        Self {
            restarts: 10,
            max_iterations: 500,
            grad_tolerance: 1e-6,
            seed: 0,
            parallel: par::available(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AngleSolution {
    /// Angles in [0, 2π), index-aligned with the distance matrix.
    pub thetas: Vec<f64>,
    pub objective: f64,
    pub restarts_used: usize,
    pub converged: bool,
    /// Final objective of every restart, in restart order.
    pub restart_objectives: Vec<f64>,
}

/// Angles of a two-dimensional classical MDS embedding. Squared chord length
/// on the unit circle is `2 - 2cos Δ`, i.e. twice the target distance, so a
/// circle-consistent matrix is recovered exactly.
pub fn classical_mds_angles(d: &[Vec<f64>]) -> Vec<f64> {
    let n = d.len();
    if n < 2 {
        return vec![0.0; n];
    }
    let sq = DMatrix::from_fn(n, n, |i, j| 2.0 * d[i][j]);
    let row_means: Vec<f64> = (0..n).map(|i| sq.row(i).sum() / n as f64).collect();
    let total = row_means.iter().sum::<f64>() / n as f64;
    let b = DMatrix::from_fn(n, n, |i, j| -0.5 * (sq[(i, j)] - row_means[i] - row_means[j] + total));
    let eig = SymmetricEigen::new(b);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    let (k1, k2) = (order[0], order[1]);
    let (s1, s2) = (eig.eigenvalues[k1].max(0.0).sqrt(), eig.eigenvalues[k2].max(0.0).sqrt());
    // sign convention: largest-magnitude component positive, for determinism
    let col = |k: usize| {
        let c = eig.eigenvectors.column(k);
        let mut idx = 0;
        for i in 0..n {
            if c[i].abs() > c[idx].abs() + 1e-12 {
                idx = i;
            }
        }
        if c[idx] < 0.0 {
            -1.0
        } else {
            1.0
        }
    };
    let (f1, f2) = (col(k1), col(k2));
    let pts: Vec<(f64, f64)> = (0..n)
        .map(|i| (f1 * s1 * eig.eigenvectors[(i, k1)], f2 * s2 * eig.eigenvectors[(i, k2)]))
        .collect();
    // the embedding is centered on the centroid, not on the circle
    let (cx, cy) = circle_center(&pts);
    pts.iter()
        .map(|(x, y)| normalize_angle((y - cy).atan2(x - cx)))
        .collect()
}

/// Algebraic least-squares circle fit; the origin when degenerate.
fn circle_center(pts: &[(f64, f64)]) -> (f64, f64) {
    let a = DMatrix::from_fn(pts.len(), 3, |i, j| match j {
        0 => pts[i].0,
        1 => pts[i].1,
        _ => 1.0,
    });
    let b = nalgebra::DVector::from_fn(pts.len(), |i, _| -(pts[i].0.powi(2) + pts[i].1.powi(2)));
    let ata = a.transpose() * &a;
    let atb = a.transpose() * b;
    match ata.lu().solve(&atb) {
        Some(sol) if sol.iter().all(|v| v.is_finite()) => (-sol[0] / 2.0, -sol[1] / 2.0),
        _ => (0.0, 0.0),
    }
}

/// Rotates so item 0 sits at 0, reflects so item 1 lies in [0, π], and wraps
/// into [0, 2π).
pub fn canonical_gauge(thetas: &[f64]) -> Vec<f64> {
    let Some(&t0) = thetas.first() else {
        return vec![];
    };
    let mut out: Vec<f64> = thetas.iter().map(|t| normalize_angle(t - t0)).collect();
    if out.len() > 1 && out[1] > PI {
        out = out.iter().map(|t| normalize_angle(-t)).collect();
    }
    out[0] = 0.0;
    out
}

fn restart_seed(seed: u64, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64);
    rng
}

/// Best-of-restarts L-BFGS. Restart 0 starts from classical MDS, the rest
/// from uniform random angles. Index 0 of `d` must be the lowest snippet id
/// for the gauge to be canonical.
pub fn optimize_angles(d: &[Vec<f64>], config: &MdsConfig) -> AngleSolution {
    let n = d.len();
    if n < 2 {
        return AngleSolution {
            thetas: vec![0.0; n],
            objective: 0.0,
            restarts_used: 0,
            converged: true,
            restart_objectives: vec![],
        };
    }
    let restarts = config.restarts.max(1);
    let opts = LbfgsOptions {
        max_iterations: config.max_iterations,
        grad_tolerance: config.grad_tolerance,
        ..Default::default()
    };
    let inner_parallel = config.parallel && n >= 256;
    let runs: Vec<LbfgsResult> = par::map_range(restarts, config.parallel, |r| {
        let x0 = if r == 0 {
            classical_mds_angles(d)
        } else {
            let mut rng = restart_seed(config.seed, r);
            (0..n).map(|_| rng.random_range(0.0..TAU)).collect()
        };
        lbfgs::minimize(
            |x| (stress_with(x, d, inner_parallel), gradient_with(x, d, inner_parallel)),
            x0,
            &opts,
        )
    });
    let mut best = 0;
    for (i, r) in runs.iter().enumerate() {
        if r.f < runs[best].f {
            best = i;
        }
    }
    let thetas = canonical_gauge(&runs[best].x);
    AngleSolution {
        objective: circular_stress(&thetas, d),
        thetas,
        restarts_used: restarts,
        converged: runs[best].converged,
        restart_objectives: runs.iter().map(|r| r.f).collect(),
    }
}

/// Angle range of one sector; `end - start` is its span. Angles are in
/// radians with `0 <= start < end <= 2π`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sector {
    pub start: f64,
    pub end: f64,
}

impl Sector {
    pub fn span(&self) -> f64 {
        self.end - self.start
    }

    pub fn mid(&self) -> f64 {
        0.5 * (self.start + self.end)
    }

    pub fn is_full_circle(&self) -> bool {
        self.span() >= TAU - 1e-12
    }

    pub fn contains(&self, angle: f64) -> bool {
        if self.is_full_circle() {
            return true;
        }
        let a = normalize_angle(angle);
        a >= self.start - 1e-12 && a <= self.end + 1e-12
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SectorAllocation {
    pub sectors: BTreeMap<usize, Sector>,
    pub order: Vec<usize>,
    /// Padding per boundary, radians.
    pub padding: f64,
}

impl SectorAllocation {
    pub fn total_padding(&self) -> f64 {
        if self.order.len() > 1 {
            self.padding * self.order.len() as f64
        } else {
            0.0
        }
    }
}

pub const DEFAULT_PADDING_DEGREES: f64 = 2.0;

/// Mean direction of a set of angles, in [0, 2π).
pub fn circular_mean(angles: &[f64]) -> f64 {
    let (s, c) = angles
        .iter()
        .fold((0.0, 0.0), |(s, c), a| (s + libm::sin(*a), c + libm::cos(*a)));
    normalize_angle(s.atan2(c))
}

/// Orders clusters by circular mean and gives each a span proportional to
/// its size, leaving `padding` radians at every boundary (none for a single
/// cluster). Sectors are laid out from angle `padding / 2`.
pub fn allocate_sectors(members: &BTreeMap<usize, Vec<f64>>, padding: f64) -> SectorAllocation {
    let mut order: Vec<(f64, usize)> = members
        .iter()
        .filter(|(_, m)| !m.is_empty())
        .map(|(&id, m)| (circular_mean(m), id))
        .collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let order: Vec<usize> = order.into_iter().map(|(_, id)| id).collect();
    let n: usize = order.iter().map(|id| members[id].len()).sum();
    let mut sectors = BTreeMap::new();
    if order.len() == 1 {
        sectors.insert(order[0], Sector { start: 0.0, end: TAU });
        return SectorAllocation {
            sectors,
            order,
            padding,
        };
    }
    let total_padding = padding * order.len() as f64;
    let avail = TAU - total_padding;
    let mut cursor = padding / 2.0;
    for id in &order {
        let span = avail * members[id].len() as f64 / n as f64;
        sectors.insert(
            *id,
            Sector {
                start: cursor,
                end: cursor + span,
            },
        );
        cursor += span + padding;
    }
    SectorAllocation {
        sectors,
        order,
        padding,
    }
}
