//! Linear-quadratic problem data, the Hamiltonian, the cost functional and
//! the matrix ODEs (Riccati and general affine-gain) that serve as oracles.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Location, Result};
use crate::grid::TimeGrid;
use crate::linalg::{dims, is_symmetric, min_eigenvalue, spd_inverse, symmetrize};
use crate::sde::Ensemble;

const SYMMETRY_TOL: f64 = 1e-12;
const PSD_TOL: f64 = 1e-10;

/// Raw problem data, validated by [`LqProblem::new`].
#[derive(Debug, Clone, PartialEq)]
pub struct LqParams {
    pub a: DMatrix<f64>,
    pub b: DMatrix<f64>,
    pub sigma: DMatrix<f64>,
    pub q: DMatrix<f64>,
    pub r: DMatrix<f64>,
    pub q_f: DMatrix<f64>,
    pub m0: DVector<f64>,
    pub sigma0: DMatrix<f64>,
    pub horizon: f64,
}

/// A validated LQ problem: `dX = (AX + BU)dt + σ dW`, `X_0 ~ N(m0, Σ0)`,
/// running cost `½(xᵀQx + uᵀRu)`, terminal cost `½xᵀQ_f x`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqProblem {
    params: LqParams,
    d: DMatrix<f64>,
    r_inv: DMatrix<f64>,
}

fn check_dims(field: &str, m: &DMatrix<f64>, rows: usize, cols: usize) -> Result<()> {
    if m.nrows() != rows || m.ncols() != cols {
        return Err(Error::problem(
            field,
            format!("expected {rows}x{cols}, found {}", dims(m)),
        ));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::problem(field, "contains non-finite entries"));
    }
    Ok(())
}

fn check_psd(field: &str, m: &DMatrix<f64>, strict: bool) -> Result<()> {
    if !is_symmetric(m, SYMMETRY_TOL) {
        return Err(Error::problem(field, "must be symmetric"));
    }
    let scale = m.amax().max(1.0);
    let min = min_eigenvalue(m);
    if strict && min <= PSD_TOL * scale {
        return Err(Error::problem(
            field,
            format!("must be positive definite (smallest eigenvalue {min:.3e})"),
        ));
    }
    if min < -PSD_TOL * scale {
        return Err(Error::problem(
            field,
            format!("must be positive semi-definite (smallest eigenvalue {min:.3e})"),
        ));
    }
    Ok(())
}

impl LqProblem {
    pub fn new(params: LqParams) -> Result<Self> {
        let n = params.a.nrows();
        if n == 0 {
            return Err(Error::problem("a", "state dimension must be at least 1"));
        }
        check_dims("a", &params.a, n, n)?;
        let m = params.b.ncols();
        if m == 0 {
            return Err(Error::problem("b", "control dimension must be at least 1"));
        }
        check_dims("b", &params.b, n, m)?;
        check_dims("sigma", &params.sigma, n, n)?;
        check_dims("q", &params.q, n, n)?;
        check_dims("r", &params.r, m, m)?;
        check_dims("q_f", &params.q_f, n, n)?;
        check_dims("sigma0", &params.sigma0, n, n)?;
        if params.m0.len() != n || params.m0.iter().any(|v| !v.is_finite()) {
            return Err(Error::problem(
                "m0",
                format!("expected a finite vector of length {n}"),
            ));
        }
        if !(params.horizon.is_finite() && params.horizon > 0.0) {
            return Err(Error::problem("horizon", "must be positive and finite"));
        }
        check_psd("q", &params.q, false)?;
        check_psd("q_f", &params.q_f, false)?;
        check_psd("r", &params.r, true)?;
        check_psd("sigma0", &params.sigma0, false)?;
        let mut d = &params.sigma * params.sigma.transpose();
        symmetrize(&mut d);
        if min_eigenvalue(&d) <= PSD_TOL * d.amax().max(1.0) {
            return Err(Error::problem(
                "sigma",
                "sigma·sigmaᵀ must be positive definite",
            ));
        }
        let mut r = params.r.clone();
        symmetrize(&mut r);
        let r_inv = spd_inverse(&r, "R", None)?;
        Ok(Self { params, d, r_inv })
    }

    /// The two-dimensional mass-spring system with unit costs and noise.
    pub fn mass_spring() -> Self {
        Self::new(LqParams {
            a: DMatrix::from_row_slice(2, 2, &[0.0, 1.0, -1.0, 0.0]),
            b: DMatrix::from_row_slice(2, 1, &[0.0, 1.0]),
            sigma: DMatrix::identity(2, 2),
            q: DMatrix::identity(2, 2),
            r: DMatrix::identity(1, 1),
            q_f: DMatrix::identity(2, 2),
            m0: DVector::zeros(2),
            sigma0: DMatrix::identity(2, 2),
            horizon: 1.0,
        })
        .expect("mass-spring preset is valid")
    }

    pub fn params(&self) -> &LqParams {
        &self.params
    }

    pub fn state_dim(&self) -> usize {
        self.params.a.nrows()
    }

    pub fn control_dim(&self) -> usize {
        self.params.b.ncols()
    }

    pub fn a(&self) -> &DMatrix<f64> {
        &self.params.a
    }

    pub fn b(&self) -> &DMatrix<f64> {
        &self.params.b
    }

    pub fn sigma(&self) -> &DMatrix<f64> {
        &self.params.sigma
    }

    pub fn q(&self) -> &DMatrix<f64> {
        &self.params.q
    }

    pub fn r(&self) -> &DMatrix<f64> {
        &self.params.r
    }

    pub fn q_f(&self) -> &DMatrix<f64> {
        &self.params.q_f
    }

    pub fn m0(&self) -> &DVector<f64> {
        &self.params.m0
    }

    pub fn sigma0(&self) -> &DMatrix<f64> {
        &self.params.sigma0
    }

    pub fn horizon(&self) -> f64 {
        self.params.horizon
    }

    /// Diffusion matrix `D = σσᵀ`.
    pub fn diffusion(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn r_inv(&self) -> &DMatrix<f64> {
        &self.r_inv
    }

    /// Feedback matrix `-R⁻¹Bᵀ G` of the control minimizing the Hamiltonian when `Y = G X`.
    pub fn feedback_gain(&self, g1: &DMatrix<f64>) -> DMatrix<f64> {
        -(&self.r_inv * (self.params.b.transpose() * g1))
    }
}

/// Per-grid-point adjoint gains: `Y_t = G₁(t) X_t + G₂(t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    pub g1: Vec<DMatrix<f64>>,
    pub g2: Option<Vec<DVector<f64>>>,
}

impl GainSchedule {
    pub fn n_points(&self) -> usize {
        self.g1.len()
    }

    /// Feedback matrices `-R⁻¹BᵀG₁(t_k)` at every grid point.
    pub fn feedback(&self, prob: &LqProblem) -> Vec<DMatrix<f64>> {
        self.g1.iter().map(|g| prob.feedback_gain(g)).collect()
    }
}

/// Control law `U = K₁X + K₂Y + K₃ vec(Z) + K₄`, each factor given per grid point.
///
/// `vec(Z)` flattens the `n×n` adjoint diffusion row-major, so `K₃` is `m×n²`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineControlLaw {
    pub k1: Vec<DMatrix<f64>>,
    pub k2: Vec<DMatrix<f64>>,
    pub k3: Vec<DMatrix<f64>>,
    pub k4: Vec<DVector<f64>>,
}

impl AffineControlLaw {
    pub fn constant(
        grid: &TimeGrid,
        k1: DMatrix<f64>,
        k2: DMatrix<f64>,
        k3: DMatrix<f64>,
        k4: DVector<f64>,
    ) -> Self {
        let p = grid.n_points();
        Self {
            k1: vec![k1; p],
            k2: vec![k2; p],
            k3: vec![k3; p],
            k4: vec![k4; p],
        }
    }

    pub fn zero(prob: &LqProblem, grid: &TimeGrid) -> Self {
        let (n, m) = (prob.state_dim(), prob.control_dim());
        Self::constant(
            grid,
            DMatrix::zeros(m, n),
            DMatrix::zeros(m, n),
            DMatrix::zeros(m, n * n),
            DVector::zeros(m),
        )
    }

    /// The Hamiltonian minimizer `U = -R⁻¹BᵀY`.
    pub fn optimal(prob: &LqProblem, grid: &TimeGrid) -> Self {
        let mut law = Self::zero(prob, grid);
        let k2 = -(prob.r_inv() * prob.b().transpose());
        law.k2 = vec![k2; grid.n_points()];
        law
    }

    fn validate(&self, prob: &LqProblem, grid: &TimeGrid) -> Result<()> {
        let (n, m, p) = (prob.state_dim(), prob.control_dim(), grid.n_points());
        if self.k1.len() != p || self.k2.len() != p || self.k3.len() != p || self.k4.len() != p {
            return Err(Error::shape(
                "AffineControlLaw",
                format!("{p} grid points"),
                "a different count",
            ));
        }
        let bad =
            |ms: &[DMatrix<f64>], c: usize| ms.iter().any(|k| k.nrows() != m || k.ncols() != c);
        if bad(&self.k1, n)
            || bad(&self.k2, n)
            || bad(&self.k3, n * n)
            || self.k4.iter().any(|k| k.len() != m)
        {
            return Err(Error::shape(
                "AffineControlLaw",
                format!("K1,K2: {m}x{n}, K3: {m}x{}, K4: {m}", n * n),
                "mismatch",
            ));
        }
        Ok(())
    }
}

/// `½[xᵀQx + uᵀRu] + yᵀ(Ax + Bu) + Tr(σᵀz)`.
pub fn hamiltonian(
    prob: &LqProblem,
    x: &DVector<f64>,
    u: &DVector<f64>,
    y: &DVector<f64>,
    z: &DMatrix<f64>,
) -> f64 {
    let running = 0.5 * (x.dot(&(prob.q() * x)) + u.dot(&(prob.r() * u)));
    let drift = prob.a() * x + prob.b() * u;
    running + y.dot(&drift) + prob.sigma().dot(z)
}

/// `∂H/∂u = Ru + Bᵀy`.
pub fn hamiltonian_du(prob: &LqProblem, u: &DVector<f64>, y: &DVector<f64>) -> DVector<f64> {
    prob.r() * u + prob.b().transpose() * y
}

/// `-R⁻¹Bᵀy`, the minimizer of the Hamiltonian over `u`.
pub fn optimal_feedback(prob: &LqProblem, y: &DVector<f64>) -> DVector<f64> {
    let rhs = prob.b().transpose() * y;
    match prob.r().clone().cholesky() {
        Some(chol) => -chol.solve(&rhs),
        None => -(prob.r_inv() * rhs),
    }
}

struct GainRhs<'a> {
    a: &'a DMatrix<f64>,
    at: DMatrix<f64>,
    b: &'a DMatrix<f64>,
    q: &'a DMatrix<f64>,
    sigma: &'a DMatrix<f64>,
}

/// Law coefficients at one RK4 stage, pre-multiplied by `B` where possible.
struct StageLaw {
    bk1: DMatrix<f64>,
    bk2: DMatrix<f64>,
    k2: DMatrix<f64>,
    k3: DMatrix<f64>,
    k4: DVector<f64>,
}

impl StageLaw {
    fn at(law: &AffineControlLaw, b: &DMatrix<f64>, k: usize) -> Self {
        Self {
            bk1: b * &law.k1[k],
            bk2: b * &law.k2[k],
            k2: law.k2[k].clone(),
            k3: law.k3[k].clone(),
            k4: law.k4[k].clone(),
        }
    }

    fn midpoint(lo: &Self, hi: &Self) -> Self {
        Self {
            bk1: (&lo.bk1 + &hi.bk1) * 0.5,
            bk2: (&lo.bk2 + &hi.bk2) * 0.5,
            k2: (&lo.k2 + &hi.k2) * 0.5,
            k3: (&lo.k3 + &hi.k3) * 0.5,
            k4: (&lo.k4 + &hi.k4) * 0.5,
        }
    }
}

impl GainRhs<'_> {
    /// Time derivatives `(Ġ₁, Ġ₂)`.
    fn eval(
        &self,
        g1: &DMatrix<f64>,
        g2: &DVector<f64>,
        law: &StageLaw,
    ) -> (DMatrix<f64>, DVector<f64>) {
        let dg1 = -(g1 * self.a + &self.at * g1 + g1 * &law.bk1 + g1 * &law.bk2 * g1 + self.q);
        let z = g1 * self.sigma;
        let n = z.nrows();
        let vec_z = DVector::from_iterator(
            n * n,
            (0..n)
                .flat_map(|i| (0..n).map(move |j| (i, j)))
                .map(|(i, j)| z[(i, j)]),
        );
        let u_part = &law.k2 * g2 + &law.k3 * vec_z + &law.k4;
        let dg2 = -(g1 * (self.b * u_part) + &self.at * g2);
        (dg1, dg2)
    }
}

fn integrate_gains(
    prob: &LqProblem,
    law: &AffineControlLaw,
    grid: &TimeGrid,
) -> Result<GainSchedule> {
    law.validate(prob, grid)?;
    let n_steps = grid.n_steps();
    let rhs = GainRhs {
        a: prob.a(),
        at: prob.a().transpose(),
        b: prob.b(),
        q: prob.q(),
        sigma: prob.sigma(),
    };
    let stages: Vec<StageLaw> = (0..grid.n_points())
        .map(|k| StageLaw::at(law, prob.b(), k))
        .collect();
    let keep_symmetric = stages
        .iter()
        .all(|s| s.bk1.amax() == 0.0 && is_symmetric(&s.bk2, 1e-14));

    let n = prob.state_dim();
    let mut g1s = vec![DMatrix::zeros(n, n); grid.n_points()];
    let mut g2s = vec![DVector::zeros(n); grid.n_points()];
    let mut g1 = prob.q_f().clone();
    let mut g2 = DVector::zeros(n);
    g1s[n_steps] = g1.clone();
    g2s[n_steps] = g2.clone();

    let h = -grid.dt();
    for k in (0..n_steps).rev() {
        let (hi, lo) = (&stages[k + 1], &stages[k]);
        let mid = StageLaw::midpoint(lo, hi);
        let (a1, b1) = rhs.eval(&g1, &g2, hi);
        let (a2, b2) = rhs.eval(&(&g1 + &a1 * (0.5 * h)), &(&g2 + &b1 * (0.5 * h)), &mid);
        let (a3, b3) = rhs.eval(&(&g1 + &a2 * (0.5 * h)), &(&g2 + &b2 * (0.5 * h)), &mid);
        let (a4, b4) = rhs.eval(&(&g1 + &a3 * h), &(&g2 + &b3 * h), lo);
        g1 += (a1 + (a2 + a3) * 2.0 + a4) * (h / 6.0);
        g2 += (b1 + (b2 + b3) * 2.0 + b4) * (h / 6.0);
        if keep_symmetric {
            symmetrize(&mut g1);
        }
        if g1
            .iter()
            .chain(g2.iter())
            .any(|v| !v.is_finite() || v.abs() > 1e12)
        {
            return Err(Error::NonFinite {
                what: "gain ODE solution",
                location: Location::step(k),
            });
        }
        g1s[k] = g1.clone();
        g2s[k] = g2.clone();
    }
    Ok(GainSchedule {
        g1: g1s,
        g2: Some(g2s),
    })
}

/// Solves the Riccati equation `Ġ₁ = -(G₁A + AᵀG₁ + Q - G₁BR⁻¹BᵀG₁)`,
/// `G₁(T) = Q_f`, backward with classical RK4 on the grid.
pub fn riccati_solve(prob: &LqProblem, grid: &TimeGrid) -> Result<GainSchedule> {
    let law = AffineControlLaw::optimal(prob, grid);
    let mut out = integrate_gains(prob, &law, grid)?;
    out.g2 = None;
    Ok(out)
}

/// Solves the coupled `G₁`, `G₂` ODEs for an arbitrary affine control law.
///
/// Time-varying `K` factors are linearly interpolated at the RK4 midpoints.
pub fn affine_gain_odes(
    prob: &LqProblem,
    law: &AffineControlLaw,
    grid: &TimeGrid,
) -> Result<GainSchedule> {
    integrate_gains(prob, law, grid)
}

fn quad(m: &DMatrix<f64>, x: &[f64]) -> f64 {
    let n = x.len();
    let mut acc = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += m[(i, j)] * x[j];
        }
        acc += x[i] * row;
    }
    acc
}

/// Monte-Carlo estimate of `E[∫ ½(XᵀQX + UᵀRU) dt + ½X_TᵀQ_f X_T]` with a
/// left-Riemann sum for the running cost.
pub fn cost_estimate(
    prob: &LqProblem,
    states: &Ensemble,
    controls: &Ensemble,
    grid: &TimeGrid,
) -> Result<f64> {
    let n_samples = states.n_samples();
    states.check_shape(
        "cost_estimate states",
        n_samples,
        grid.n_points(),
        prob.state_dim(),
    )?;
    controls.check_shape(
        "cost_estimate controls",
        n_samples,
        grid.n_points(),
        prob.control_dim(),
    )?;
    if n_samples == 0 {
        return Err(Error::TooFewSamples {
            needed: 1,
            found: 0,
        });
    }
    let dt = grid.dt();
    let n = grid.n_steps();
    let total: f64 = (0..n_samples)
        .map(|i| {
            let running: f64 = (0..n)
                .map(|k| {
                    0.5 * (quad(prob.q(), states.at(i, k)) + quad(prob.r(), controls.at(i, k))) * dt
                })
                .sum();
            running + 0.5 * quad(prob.q_f(), states.at(i, n))
        })
        .sum();
    Ok(total / n_samples as f64)
}

/// Optimal LQG cost `½m₀ᵀG₁(0)m₀ + ½Tr(G₁(0)Σ₀) + ½∫Tr(DG₁(t))dt`, with the
/// trace integral evaluated by the trapezoidal rule on the Riccati solution.
pub fn optimal_cost_oracle(prob: &LqProblem, grid: &TimeGrid) -> Result<f64> {
    let gains = riccati_solve(prob, grid)?;
    Ok(optimal_cost_from_gains(prob, grid, &gains))
}

pub(crate) fn optimal_cost_from_gains(
    prob: &LqProblem,
    grid: &TimeGrid,
    gains: &GainSchedule,
) -> f64 {
    let g0 = &gains.g1[0];
    let traces: Vec<f64> = gains
        .g1
        .iter()
        .map(|g| (prob.diffusion() * g).trace())
        .collect();
    let n = traces.len() - 1;
    let integral =
        grid.dt() * (0.5 * traces[0] + traces[1..n].iter().sum::<f64>() + 0.5 * traces[n]);
    0.5 * prob.m0().dot(&(g0 * prob.m0())) + 0.5 * (g0 * prob.sigma0()).trace() + 0.5 * integral
}

/// Means and covariances at every grid point.
pub type MomentPath = (Vec<DVector<f64>>, Vec<DMatrix<f64>>);

/// Exact mean and covariance of the state under a linear feedback `U = K(t)X`
/// (or zero control), from `ṁ = (A+BK)m`, `Σ̇ = (A+BK)Σ + Σ(A+BK)ᵀ + D`
/// integrated forward with RK4 on the grid.
pub fn closed_loop_moments(
    prob: &LqProblem,
    grid: &TimeGrid,
    feedback: Option<&[DMatrix<f64>]>,
) -> Result<MomentPath> {
    let closed: Vec<DMatrix<f64>> = match feedback {
        Some(ks) => {
            if ks.len() != grid.n_points() {
                return Err(Error::shape(
                    "closed_loop_moments feedback",
                    grid.n_points(),
                    ks.len(),
                ));
            }
            ks.iter().map(|k| prob.a() + prob.b() * k).collect()
        }
        None => vec![prob.a().clone(); grid.n_points()],
    };
    let d = prob.diffusion();
    let f = |ac: &DMatrix<f64>, m: &DVector<f64>, s: &DMatrix<f64>| {
        (ac * m, ac * s + s * ac.transpose() + d)
    };
    let h = grid.dt();
    let mut m = prob.m0().clone();
    let mut s = prob.sigma0().clone();
    let mut means = Vec::with_capacity(grid.n_points());
    let mut covs = Vec::with_capacity(grid.n_points());
    means.push(m.clone());
    covs.push(s.clone());
    for k in 0..grid.n_steps() {
        let (lo, hi) = (&closed[k], &closed[k + 1]);
        let mid = (lo + hi) * 0.5;
        let (m1, s1) = f(lo, &m, &s);
        let (m2, s2) = f(&mid, &(&m + &m1 * (0.5 * h)), &(&s + &s1 * (0.5 * h)));
        let (m3, s3) = f(&mid, &(&m + &m2 * (0.5 * h)), &(&s + &s2 * (0.5 * h)));
        let (m4, s4) = f(hi, &(&m + &m3 * h), &(&s + &s3 * h));
        m += (m1 + (m2 + m3) * 2.0 + m4) * (h / 6.0);
        s += (s1 + (s2 + s3) * 2.0 + s4) * (h / 6.0);
        symmetrize(&mut s);
        if m.iter().chain(s.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "moment ODE solution",
                location: Location::step(k + 1),
            });
        }
        means.push(m.clone());
        covs.push(s.clone());
    }
    Ok((means, covs))
}
