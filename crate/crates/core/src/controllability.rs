//! Linearization at a consensus point, Kalman and spectral controllability
//! tests, and minimal-energy steering with a single controlled agent.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::cloud;
use crate::error::{Error, Result};
use crate::kernel::CommKernel;
use crate::quadrature;

/// Relative singular-value threshold of the rank test.
pub const RANK_TOL: f64 = 1e-10;
/// Relative tolerance for calling two eigenvalues equal or a coefficient zero.
pub const SPECTRAL_TOL: f64 = 1e-8;

/// `v̇ = A v + b u` with `A = −L` at fixed positions and `b = e_i`.
#[derive(Debug, Clone)]
pub struct LinearizedSystem {
    pub a: DMatrix<f64>,
    pub control_index: usize,
    /// Eigenvalues of `A` in decreasing order; the first is `0`.
    pub eigenvalues: Vec<f64>,
    /// Orthonormal eigenvectors, columns matching `eigenvalues`.
    pub eigenvectors: DMatrix<f64>,
    /// Modal coefficients of the input: `αⱼ = P[i, j]`.
    pub alpha: Vec<f64>,
}

impl LinearizedSystem {
    pub fn agents(&self) -> usize {
        self.a.nrows()
    }

    pub fn input(&self) -> DVector<f64> {
        let mut b = DVector::zeros(self.agents());
        b[self.control_index] = 1.0;
        b
    }

    /// `e^{At}` from the spectral decomposition.
    pub fn propagator(&self, t: f64) -> DMatrix<f64> {
        let p = &self.eigenvectors;
        let exp = DMatrix::from_diagonal(&DVector::from_iterator(
            self.agents(),
            self.eigenvalues.iter().map(|l| (l * t).exp()),
        ));
        p * exp * p.transpose()
    }
}

/// Linearize the velocity equations at positions `x_tilde` (one agent per
/// row) with the input acting on `control_index`.
pub fn linearize_at_consensus(
    x_tilde: &DMatrix<f64>,
    kernel: &CommKernel,
    control_index: usize,
) -> Result<LinearizedSystem> {
    let n = x_tilde.nrows();
    if n < 2 {
        return Err(Error::InvalidArgument("need at least two agents".into()));
    }
    if control_index >= n {
        return Err(Error::InvalidArgument(format!(
            "control index {control_index} out of range for {n} agents"
        )));
    }
    let a = -cloud::laplacian_of_positions(x_tilde, kernel);
    // symmetrize away rounding so the eigensolver sees an exactly symmetric matrix
    let a = (&a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(a.clone());
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&p, &q| eig.eigenvalues[q].total_cmp(&eig.eigenvalues[p]));
    let mut eigenvalues: Vec<f64> = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let mut eigenvectors = DMatrix::zeros(n, n);
    for (col, &k) in order.iter().enumerate() {
        eigenvectors.set_column(col, &eig.eigenvectors.column(k));
    }
    // the kernel direction is known exactly
    eigenvalues[0] = 0.0;
    let ones = DVector::from_element(n, 1.0 / (n as f64).sqrt());
    if eigenvectors.column(0).dot(&ones).abs() > 0.5 {
        eigenvectors.set_column(0, &ones);
    }
    let alpha = (0..n).map(|j| eigenvectors[(control_index, j)]).collect();
    Ok(LinearizedSystem {
        a,
        control_index,
        eigenvalues,
        eigenvectors,
        alpha,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpectralReport {
    pub distinct_eigenvalues: bool,
    pub nonzero_coefficients: bool,
    pub min_eigen_gap: f64,
    pub min_abs_coefficient: f64,
}

impl SpectralReport {
    pub fn controllable(&self) -> bool {
        self.distinct_eigenvalues && self.nonzero_coefficients
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KalmanResult {
    pub controllable: bool,
    pub rank: usize,
    pub singular_values: Vec<f64>,
    pub spectral: SpectralReport,
}

impl KalmanResult {
    /// Both criteria give the same verdict.
    pub fn criteria_agree(&self) -> bool {
        self.controllable == self.spectral.controllable()
    }
}

/// Numerical rank from singular values relative to the largest.
pub fn numerical_rank(singular_values: &[f64], rel_tol: f64) -> usize {
    let top = singular_values.iter().copied().fold(0.0, f64::max);
    if top == 0.0 {
        return 0;
    }
    singular_values.iter().filter(|&&s| s > rel_tol * top).count()
}

/// Krylov matrix spanning the same space as `[b, Ab, …, A^{n−1}b]`.
///
/// Columns are `T_k(Â)b` for Chebyshev polynomials `T_k` of `Â = (A − cI)/r`,
/// where `[c − r, c + r]` is the spectral interval of a symmetric `A`
/// (the real Gershgorin interval otherwise), each normalized. `T_k` has degree `k` with nonzero leading coefficient, so
/// the column space and the rank are those of the monomial matrix, which
/// is a Vandermonde matrix in the eigenvalues and loses rank numerically
/// once eigenvalues cluster.
pub fn kalman_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    let n = a.nrows();
    let m = b.ncols();
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    if (a - a.transpose()).amax() <= 1e-14 * a.amax() {
        for l in a.clone().symmetric_eigenvalues().iter() {
            lo = lo.min(*l);
            hi = hi.max(*l);
        }
    } else {
        for i in 0..n {
            let radius: f64 = (0..n).filter(|&j| j != i).map(|j| a[(i, j)].abs()).sum();
            lo = lo.min(a[(i, i)] - radius);
            hi = hi.max(a[(i, i)] + radius);
        }
    }
    let center = 0.5 * (lo + hi);
    let half = 0.5 * (hi - lo);
    let half = if half > 0.0 { half } else { 1.0 };
    let shifted = (a - DMatrix::<f64>::identity(n, n) * center) / half;

    let mut k = DMatrix::zeros(n, n * m);
    let mut prev = b.clone();
    let mut block = b.clone();
    for p in 0..n {
        for c in 0..m {
            let col = block.column(c);
            let norm = col.norm();
            if norm > 0.0 {
                k.set_column(p * m + c, &(col / norm));
            }
        }
        let next = if p == 0 {
            &shifted * &block
        } else {
            &shifted * &block * 2.0 - &prev
        };
        prev = std::mem::replace(&mut block, next);
    }
    k
}

/// Kalman rank test together with the spectral criterion.
pub fn kalman_test(sys: &LinearizedSystem) -> KalmanResult {
    let n = sys.agents();
    let b = DMatrix::from_column_slice(n, 1, sys.input().as_slice());
    let k = kalman_matrix(&sys.a, &b);
    let singular_values: Vec<f64> = k.singular_values().iter().copied().collect();
    let rank = numerical_rank(&singular_values, RANK_TOL);

    let spread = sys
        .eigenvalues
        .iter()
        .map(|l| l.abs())
        .fold(0.0, f64::max)
        .max(f64::MIN_POSITIVE);
    let min_eigen_gap = sys
        .eigenvalues
        .windows(2)
        .map(|w| (w[0] - w[1]).abs())
        .fold(f64::INFINITY, f64::min);
    let min_abs_coefficient = sys.alpha.iter().map(|a| a.abs()).fold(f64::INFINITY, f64::min);
    let spectral = SpectralReport {
        distinct_eigenvalues: min_eigen_gap > SPECTRAL_TOL * spread,
        nonzero_coefficients: min_abs_coefficient > SPECTRAL_TOL / (n as f64).sqrt(),
        min_eigen_gap,
        min_abs_coefficient,
    };
    KalmanResult {
        controllable: rank == n,
        rank,
        singular_values,
        spectral,
    }
}

/// Kalman rank of the position-augmented system `ẋ = v`, `v̇ = Av + bu`.
///
/// `v + L x` moves only in the controlled coordinate, so this rank never
/// exceeds `N + 1`.
pub fn augmented_kalman_rank(sys: &LinearizedSystem) -> usize {
    let n = sys.agents();
    let mut a = DMatrix::zeros(2 * n, 2 * n);
    a.view_mut((0, n), (n, n)).copy_from(&DMatrix::<f64>::identity(n, n));
    a.view_mut((n, n), (n, n)).copy_from(&sys.a);
    let mut b = DMatrix::zeros(2 * n, 1);
    b[(n + sys.control_index, 0)] = 1.0;
    let k = kalman_matrix(&a, &b);
    let sv: Vec<f64> = k.singular_values().iter().copied().collect();
    numerical_rank(&sv, RANK_TOL)
}

/// `W(T) = ∫₀ᵀ e^{As} b bᵀ e^{Aᵀs} ds`, entry by entry with adaptive quadrature.
pub fn controllability_gramian(sys: &LinearizedSystem, horizon: f64) -> DMatrix<f64> {
    let n = sys.agents();
    let p = &sys.eigenvectors;
    // (e^{As} b)_r = Σⱼ P[r,j] αⱼ e^{λⱼ s}
    let column = |s: f64, r: usize| -> f64 {
        (0..n)
            .map(|j| p[(r, j)] * sys.alpha[j] * (sys.eigenvalues[j] * s).exp())
            .sum()
    };
    let mut w = DMatrix::zeros(n, n);
    for r in 0..n {
        for c in r..n {
            let f = |s: f64| column(s, r) * column(s, c);
            let value = quadrature::integrate(f, 0.0, horizon, 1e-14 * horizon.max(1.0), 400).value;
            w[(r, c)] = value;
            w[(c, r)] = value;
        }
    }
    w
}

/// `W(T)` from the eigen-decomposition:
/// `Pᵀ W P = [αⱼαₖ (e^{(λⱼ+λₖ)T} − 1)/(λⱼ+λₖ)]`.
pub fn controllability_gramian_spectral(sys: &LinearizedSystem, horizon: f64) -> DMatrix<f64> {
    let n = sys.agents();
    let mut g = DMatrix::zeros(n, n);
    for j in 0..n {
        for k in 0..n {
            let s = sys.eigenvalues[j] + sys.eigenvalues[k];
            // (e^{sT} − 1)/s, with its limit T at s = 0
            let factor = if (s * horizon).abs() < 1e-12 {
                horizon
            } else {
                (s * horizon).exp_m1() / s
            };
            g[(j, k)] = sys.alpha[j] * sys.alpha[k] * factor;
        }
    }
    &sys.eigenvectors * g * sys.eigenvectors.transpose()
}

/// Open-loop minimal-energy input on `[0, T]`, one scalar signal per axis,
/// applied to the controlled agent only.
#[derive(Debug, Clone)]
pub struct SteeringControl {
    pub system: LinearizedSystem,
    pub horizon: f64,
    /// `W⁻¹(v₁ − e^{AT}v₀)` per axis (columns).
    pub multipliers: DMatrix<f64>,
    pub gramian: DMatrix<f64>,
}

impl SteeringControl {
    /// Input of the controlled agent at time `t`, one entry per axis:
    /// `bᵀ e^{Aᵀ(T−t)} η`.
    pub fn signal(&self, t: f64) -> Vec<f64> {
        let row = self
            .system
            .propagator(self.horizon - t)
            .row(self.system.control_index)
            .clone_owned();
        (0..self.multipliers.ncols())
            .map(|k| row.dot(&self.multipliers.column(k).transpose()))
            .collect()
    }

    /// Full `N × d` input at time `t`, zero except the controlled row.
    pub fn control_matrix(&self, t: f64) -> DMatrix<f64> {
        let n = self.system.agents();
        let d = self.multipliers.ncols();
        let mut u = DMatrix::zeros(n, d);
        for (k, s) in self.signal(t).into_iter().enumerate() {
            u[(self.system.control_index, k)] = s;
        }
        u
    }

    /// `∫₀ᵀ ‖u(t)‖² dt = Σ_axes ηᵀ W η`.
    pub fn energy(&self) -> f64 {
        (0..self.multipliers.ncols())
            .map(|k| {
                let eta = self.multipliers.column(k);
                (eta.transpose() * &self.gramian * eta)[(0, 0)]
            })
            .sum()
    }

    /// Integrate `ẋ = v`, `v̇ = Av + u` with RK4 and `steps` steps.
    pub fn simulate_linear(&self, x0: &DMatrix<f64>, v0: &DMatrix<f64>, steps: usize) -> (DMatrix<f64>, DMatrix<f64>) {
        let h = self.horizon / steps as f64;
        let a = &self.system.a;
        let f =
            |t: f64, v: &DMatrix<f64>| -> (DMatrix<f64>, DMatrix<f64>) { (v.clone(), a * v + self.control_matrix(t)) };
        let mut x = x0.clone();
        let mut v = v0.clone();
        for k in 0..steps {
            let t = k as f64 * h;
            let (k1x, k1v) = f(t, &v);
            let (k2x, k2v) = f(t + 0.5 * h, &(&v + &k1v * (0.5 * h)));
            let (k3x, k3v) = f(t + 0.5 * h, &(&v + &k2v * (0.5 * h)));
            let (k4x, k4v) = f(t + h, &(&v + &k3v * h));
            x += (k1x + k2x * 2.0 + k3x * 2.0 + k4x) * (h / 6.0);
            v += (k1v + k2v * 2.0 + k3v * 2.0 + k4v) * (h / 6.0);
        }
        (x, v)
    }
}

/// Minimal-energy input steering the velocity deviations `v0 → v1`
/// (`N × d`, one agent per row) in time `horizon`.
///
/// Positions are integrators driven by the velocities and are not steered:
/// `v + L x` is conserved outside the controlled coordinate.
pub fn minimal_energy_steering(
    sys: &LinearizedSystem,
    v0: &DMatrix<f64>,
    v1: &DMatrix<f64>,
    horizon: f64,
) -> Result<SteeringControl> {
    let n = sys.agents();
    if v0.shape() != v1.shape() || v0.nrows() != n {
        return Err(Error::DimensionMismatch(format!(
            "initial {:?} and target {:?} for {n} agents",
            v0.shape(),
            v1.shape()
        )));
    }
    if !(horizon > 0.0 && horizon.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "horizon must be positive, got {horizon}"
        )));
    }
    let gramian = controllability_gramian(sys, horizon);
    let sv: Vec<f64> = gramian.singular_values().iter().copied().collect();
    let rank = numerical_rank(&sv, RANK_TOL);
    if rank < n {
        return Err(Error::SingularGramian { rank, size: n });
    }
    let chol = gramian
        .clone()
        .cholesky()
        .ok_or(Error::SingularGramian { rank, size: n })?;
    let drift = sys.propagator(horizon) * v0;
    let multipliers = chol.solve(&(v1 - drift));
    Ok(SteeringControl {
        system: sys.clone(),
        horizon,
        multipliers,
        gramian,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn kernel() -> CommKernel {
        CommKernel::cucker_smale(1.0, 1.0, 1.0).unwrap()
    }

    fn random_positions(rng: &mut ChaCha8Rng, n: usize, d: usize) -> DMatrix<f64> {
        DMatrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn two_agents_hand_computation() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 2.0]);
        let sys = linearize_at_consensus(&x, &kernel(), 0).unwrap();
        assert_eq!(sys.eigenvalues[0], 0.0);
        assert_relative_eq!(sys.eigenvalues[1], -0.2, epsilon = 1e-14);
        let k = kalman_test(&sys);
        assert!(k.controllable && k.rank == 2 && k.criteria_agree());
    }

    #[test]
    fn rows_sum_to_zero_and_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_positions(&mut rng, 6, 2);
        let sys = linearize_at_consensus(&x, &kernel(), 2).unwrap();
        assert!((&sys.a * DVector::from_element(6, 1.0)).amax() < 1e-15);
        assert!((&sys.a - sys.a.transpose()).amax() == 0.0);
        assert!(sys.eigenvalues.iter().all(|&l| l <= 1e-14));
        // P is orthogonal and diagonalizes A
        let p = &sys.eigenvectors;
        let d = p.transpose() * &sys.a * p;
        for j in 0..6 {
            assert_relative_eq!(d[(j, j)], sys.eigenvalues[j], epsilon = 1e-12);
        }
    }

    #[test]
    fn equal_mutual_distances_are_uncontrollable() {
        let h = 3f64.sqrt() / 2.0;
        let triangle = DMatrix::from_row_slice(3, 2, &[0.0, 0.0, 1.0, 0.0, 0.5, h]);
        let sys = linearize_at_consensus(&triangle, &kernel(), 1).unwrap();
        assert_relative_eq!(sys.eigenvalues[1], sys.eigenvalues[2], epsilon = 1e-12);
        let k = kalman_test(&sys);
        assert!(!k.controllable);
        assert!(k.rank < 3);
        assert!(k.criteria_agree());
        // regular tetrahedron
        let s = 1.0 / 2f64.sqrt();
        let tet = DMatrix::from_row_slice(4, 3, &[1.0, 0.0, -s, -1.0, 0.0, -s, 0.0, 1.0, s, 0.0, -1.0, s]);
        let k = kalman_test(&linearize_at_consensus(&tet, &kernel(), 0).unwrap());
        assert!(!k.controllable && k.criteria_agree());
    }

    #[test]
    fn symmetric_line_with_middle_control_is_uncontrollable() {
        // the middle agent cannot separate the antisymmetric mode
        let x = DMatrix::from_row_slice(3, 1, &[-1.0, 0.0, 1.0]);
        let sys = linearize_at_consensus(&x, &kernel(), 1).unwrap();
        let k = kalman_test(&sys);
        assert!(!k.spectral.nonzero_coefficients);
        assert!(!k.controllable && k.criteria_agree());
    }

    #[test]
    fn random_configurations_are_controllable() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for trial in 0..100 {
            let n = rng.random_range(2..=8);
            let d = rng.random_range(1..=3);
            let x = random_positions(&mut rng, n, d);
            let i = rng.random_range(0..n);
            let k = kalman_test(&linearize_at_consensus(&x, &kernel(), i).unwrap());
            assert!(k.controllable, "trial {trial}: {k:?}");
            assert!(k.criteria_agree(), "trial {trial}: {k:?}");
        }
    }

    #[test]
    fn augmented_system_rank_is_n_plus_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_positions(&mut rng, 4, 2);
        let sys = linearize_at_consensus(&x, &kernel(), 0).unwrap();
        assert_eq!(augmented_kalman_rank(&sys), 5);
    }

    #[test]
    fn gramian_quadrature_matches_spectral_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_positions(&mut rng, 5, 2);
        let sys = linearize_at_consensus(&x, &kernel(), 3).unwrap();
        let w = controllability_gramian(&sys, 2.0);
        let ws = controllability_gramian_spectral(&sys, 2.0);
        assert!((&w - &ws).amax() < 1e-12, "{}", (&w - &ws).amax());
        assert!(w.clone().cholesky().is_some());
    }

    #[test]
    fn steering_reaches_target() {
        let x = DMatrix::from_row_slice(2, 1, &[0.0, 1.5]);
        let sys = linearize_at_consensus(&x, &kernel(), 0).unwrap();
        let v0 = DMatrix::from_row_slice(2, 1, &[0.01, -0.02]);
        let v1 = DMatrix::from_row_slice(2, 1, &[0.03, 0.03]);
        let ctl = minimal_energy_steering(&sys, &v0, &v1, 1.0).unwrap();
        let (_, v) = ctl.simulate_linear(&DMatrix::zeros(2, 1), &v0, 2000);
        assert!((&v - &v1).amax() <= 1e-6 * v1.amax(), "{v}");
        assert!(ctl.energy() > 0.0);
        let u = ctl.control_matrix(0.3);
        assert_eq!(u[(1, 0)], 0.0);
    }

    #[test]
    fn zero_displacement_needs_no_control() {
        let x = DMatrix::from_row_slice(3, 1, &[0.0, 0.7, 2.0]);
        let sys = linearize_at_consensus(&x, &kernel(), 2).unwrap();
        let v = DMatrix::zeros(3, 1);
        let ctl = minimal_energy_steering(&sys, &v, &v, 1.0).unwrap();
        assert_eq!(ctl.energy(), 0.0);
        assert!(ctl.signal(0.5).iter().all(|&s| s == 0.0));
    }

    #[test]
    fn singular_gramian_is_reported() {
        let x = DMatrix::from_row_slice(3, 1, &[-1.0, 0.0, 1.0]);
        let sys = linearize_at_consensus(&x, &kernel(), 1).unwrap();
        let v = DMatrix::zeros(3, 1);
        let err = minimal_energy_steering(&sys, &v, &v, 1.0).unwrap_err();
        assert!(matches!(err, Error::SingularGramian { size: 3, .. }));
    }
}
