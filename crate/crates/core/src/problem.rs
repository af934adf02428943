//! Finite-sum objectives `F(x) = (1/n) sum_i f_i(x) + psi(x)` and their reference optimum.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::prox::Regularizer;
use crate::Vector;

/// Name of the generator family recorded in manifests.
pub const GENERATOR_RNG: &str = "ChaCha20 (rand_chacha), seed_from_u64";

#[derive(Debug, Clone, PartialEq)]
pub enum ComponentKind {
    /// `0.5 x'Ax - b'x + c`
    Quadratic {
        hessian: DMatrix<f64>,
        linear: Vector,
        offset: f64,
    },
    /// `0.5 (a'x - t)^2`
    LeastSquares { row: Vector, target: f64 },
    /// `|a'x - t|`
    Lad { row: Vector, target: f64 },
    /// `max(0, 1 - y a'x)` with `y` in `{-1, +1}`
    Hinge { row: Vector, label: f64 },
}

/// One summand `f_i` together with its declared constants.
#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub kind: ComponentKind,
    pub smooth_l: Option<f64>,
    pub lip_g: Option<f64>,
}

impl Component {
    pub fn quadratic(hessian: DMatrix<f64>, linear: Vector, offset: f64) -> Result<Self> {
        let d = linear.len();
        if hessian.nrows() != d || hessian.ncols() != d {
            return Err(Error::DimensionMismatch { expected: d, got: hessian.nrows() });
        }
        if !all_finite(hessian.iter()) || !all_finite(linear.iter()) || !offset.is_finite() {
            return Err(Error::DegenerateData("non-finite quadratic data".into()));
        }
        let asym = (&hessian - hessian.transpose()).amax();
        if asym > 1e-12 * (1.0 + hessian.amax()) {
            return Err(Error::invalid(format!("hessian is not symmetric (asymmetry {asym:e})")));
        }
        let eig = SymmetricEigen::new(hessian.clone()).eigenvalues;
        let (lo, hi) = (eig.min(), eig.max());
        if lo < -1e-12 * hi.abs().max(1.0) {
            return Err(Error::invalid(format!("hessian is not PSD (eigenvalue {lo:e})")));
        }
        Ok(Component {
            kind: ComponentKind::Quadratic { hessian, linear, offset },
            smooth_l: Some(hi.max(0.0)),
            lip_g: None,
        })
    }

    /// `0.5 ||x - center||^2`.
    pub fn shifted_square(center: Vector) -> Result<Self> {
        let d = center.len();
        let offset = 0.5 * center.norm_squared();
        Component::quadratic(DMatrix::identity(d, d), center, offset)
    }

    pub fn least_squares(row: Vector, target: f64) -> Result<Self> {
        check_row(&row, target)?;
        let l = row.norm_squared();
        Ok(Component {
            kind: ComponentKind::LeastSquares { row, target },
            smooth_l: Some(l),
            lip_g: None,
        })
    }

    pub fn lad(row: Vector, target: f64) -> Result<Self> {
        check_row(&row, target)?;
        let g = row.norm();
        Ok(Component {
            kind: ComponentKind::Lad { row, target },
            smooth_l: None,
            lip_g: Some(g),
        })
    }

    pub fn hinge(row: Vector, label: f64) -> Result<Self> {
        check_row(&row, label)?;
        if label != 1.0 && label != -1.0 {
            return Err(Error::invalid(format!("hinge label must be +1 or -1, got {label}")));
        }
        let g = row.norm();
        Ok(Component {
            kind: ComponentKind::Hinge { row, label },
            smooth_l: None,
            lip_g: Some(g),
        })
    }

    /// Overrides the declared smoothness constant (used for negative controls).
    pub fn with_smooth_l(mut self, l: f64) -> Self {
        self.smooth_l = Some(l);
        self
    }

    pub fn with_lip_g(mut self, g: f64) -> Self {
        self.lip_g = Some(g);
        self
    }

    pub fn dim(&self) -> usize {
        match &self.kind {
            ComponentKind::Quadratic { linear, .. } => linear.len(),
            ComponentKind::LeastSquares { row, .. }
            | ComponentKind::Lad { row, .. }
            | ComponentKind::Hinge { row, .. } => row.len(),
        }
    }

    pub fn is_smooth(&self) -> bool {
        matches!(
            self.kind,
            ComponentKind::Quadratic { .. } | ComponentKind::LeastSquares { .. }
        )
    }

    pub fn value(&self, x: &Vector) -> f64 {
        match &self.kind {
            ComponentKind::Quadratic { hessian, linear, offset } => {
                0.5 * x.dot(&(hessian * x)) - linear.dot(x) + offset
            }
            ComponentKind::LeastSquares { row, target } => 0.5 * (row.dot(x) - target).powi(2),
            ComponentKind::Lad { row, target } => (row.dot(x) - target).abs(),
            ComponentKind::Hinge { row, label } => (1.0 - label * row.dot(x)).max(0.0),
        }
    }

    /// Gradient, or the minimal-norm-at-the-kink subgradient for LAD and hinge.
    pub fn gradient(&self, x: &Vector) -> Vector {
        match &self.kind {
            ComponentKind::Quadratic { hessian, linear, .. } => hessian * x - linear,
            ComponentKind::LeastSquares { row, target } => row * (row.dot(x) - target),
            ComponentKind::Lad { row, target } => {
                let r = row.dot(x) - target;
                row * sign0(r)
            }
            ComponentKind::Hinge { row, label } => {
                if 1.0 - label * row.dot(x) > 0.0 {
                    row * (-label)
                } else {
                    Vector::zeros(row.len())
                }
            }
        }
    }

    /// `B(x, y) = f(x) - f(y) - <grad f(y), x - y>`, evaluated without
    /// cancellation for the quadratic kinds.
    pub fn bregman(&self, x: &Vector, y: &Vector) -> f64 {
        match &self.kind {
            ComponentKind::Quadratic { hessian, .. } => {
                let diff = x - y;
                0.5 * diff.dot(&(hessian * &diff))
            }
            ComponentKind::LeastSquares { row, .. } => 0.5 * row.dot(&(x - y)).powi(2),
            _ => self.value(x) - self.value(y) - self.gradient(y).dot(&(x - y)),
        }
    }

    /// `(A, b, c)` with `f(x) = 0.5 x'Ax - b'x + c` for the smooth kinds.
    pub fn quadratic_form(&self) -> Option<(DMatrix<f64>, Vector, f64)> {
        match &self.kind {
            ComponentKind::Quadratic { hessian, linear, offset } => {
                Some((hessian.clone(), linear.clone(), *offset))
            }
            ComponentKind::LeastSquares { row, target } => Some((
                row * row.transpose(),
                row * *target,
                0.5 * target * target,
            )),
            _ => None,
        }
    }

    /// Data row and target for the piecewise-linear kinds.
    fn piecewise_data(&self) -> Option<(&Vector, f64)> {
        match &self.kind {
            ComponentKind::Lad { row, target } => Some((row, *target)),
            ComponentKind::Hinge { row, label } => Some((row, *label)),
            _ => None,
        }
    }
}

fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn all_finite<'a>(mut it: impl Iterator<Item = &'a f64>) -> bool {
    it.all(|v| v.is_finite())
}

fn check_row(row: &Vector, target: f64) -> Result<()> {
    if row.is_empty() {
        return Err(Error::DegenerateData("empty data row".into()));
    }
    if !all_finite(row.iter()) || !target.is_finite() {
        return Err(Error::DegenerateData("non-finite data".into()));
    }
    if row.iter().all(|&v| v == 0.0) {
        return Err(Error::DegenerateData("zero data row".into()));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq)]
pub struct FiniteSumProblem {
    pub components: Vec<Component>,
    pub reg: Regularizer,
    pub mu_f: f64,
    d: usize,
}

impl FiniteSumProblem {
    pub fn new(components: Vec<Component>, reg: Regularizer, mu_f: f64) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::invalid("problem needs at least one component"))?;
        let d = first.dim();
        if d == 0 {
            return Err(Error::invalid("dimension must be positive"));
        }
        for (i, c) in components.iter().enumerate() {
            if c.dim() != d {
                return Err(Error::DimensionMismatch { expected: d, got: c.dim() });
            }
            if c.smooth_l.is_none() && c.lip_g.is_none() {
                return Err(Error::invalid(format!("component {i} declares neither L nor G")));
            }
            for v in [c.smooth_l, c.lip_g].into_iter().flatten() {
                if !(v.is_finite() && v >= 0.0) {
                    return Err(Error::invalid(format!("component {i} has constant {v}")));
                }
            }
            if !c.is_smooth() && c.smooth_l.is_some() {
                return Err(Error::invalid(format!(
                    "component {i} is non-smooth but declares L"
                )));
            }
        }
        reg.check_dim(d)?;
        if !(mu_f.is_finite() && mu_f >= 0.0) {
            return Err(Error::invalid(format!("mu_f must be nonnegative, got {mu_f}")));
        }
        if mu_f > 0.0 && components.iter().any(|c| c.lip_g.is_some()) {
            return Err(Error::invalid(
                "mu_f > 0 is incompatible with Lipschitz (G) components",
            ));
        }
        Ok(FiniteSumProblem { components, reg, mu_f, d })
    }

    /// `n = 2`, `d = 1`, `f_i(x) = (x - a_i)^2 / 2`: the smallest hand-checkable instance.
    pub fn shifted_squares(centers: &[Vector], reg: Regularizer) -> Result<Self> {
        let comps = centers
            .iter()
            .map(|c| Component::shifted_square(c.clone()))
            .collect::<Result<Vec<_>>>()?;
        FiniteSumProblem::new(comps, reg, 1.0)
    }

    pub fn n(&self) -> usize {
        self.components.len()
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    pub fn is_smooth(&self) -> bool {
        self.components.iter().all(|c| c.is_smooth())
    }

    pub fn smooth_constants(&self) -> Option<Vec<f64>> {
        self.components.iter().map(|c| c.smooth_l).collect()
    }

    pub fn lipschitz_constants(&self) -> Option<Vec<f64>> {
        self.components.iter().map(|c| c.lip_g).collect()
    }

    /// `(1/n) sum L_i`, if every component declares `L_i`.
    pub fn l_bar(&self) -> Option<f64> {
        self.smooth_constants().map(|ls| mean(&ls))
    }

    /// `max L_i`.
    pub fn l_star(&self) -> Option<f64> {
        self.smooth_constants()
            .map(|ls| ls.into_iter().fold(0.0, f64::max))
    }

    /// `(1/n) sum G_i`.
    pub fn g_bar(&self) -> Option<f64> {
        self.lipschitz_constants().map(|gs| mean(&gs))
    }

    pub fn mu_psi(&self) -> f64 {
        self.reg.mu_psi()
    }

    /// Returns a copy with every declared `L_i` multiplied by `factor`.
    pub fn with_scaled_smoothness(&self, factor: f64) -> Self {
        let mut out = self.clone();
        for c in &mut out.components {
            c.smooth_l = c.smooth_l.map(|l| l * factor);
        }
        out
    }

    pub fn check_dim(&self, x: &Vector) -> Result<()> {
        if x.len() != self.d {
            return Err(Error::DimensionMismatch { expected: self.d, got: x.len() });
        }
        Ok(())
    }

    pub fn f_value(&self, x: &Vector) -> f64 {
        self.components.iter().map(|c| c.value(x)).sum::<f64>() / self.n() as f64
    }

    /// `F(x)`; `f64::INFINITY` outside the domain of `psi`.
    pub fn objective_value(&self, x: &Vector) -> Result<f64> {
        self.check_dim(x)?;
        let psi = self.reg.value(x);
        if psi.is_infinite() {
            return Ok(f64::INFINITY);
        }
        Ok(self.f_value(x) + psi)
    }

    /// `grad f(x) = (1/n) sum grad f_i(x)`.
    pub fn full_gradient(&self, x: &Vector) -> Result<Vector> {
        self.check_dim(x)?;
        let mut g = Vector::zeros(self.d);
        for c in &self.components {
            g += c.gradient(x);
        }
        Ok(g / self.n() as f64)
    }

    pub fn bregman_f(&self, x: &Vector, y: &Vector) -> f64 {
        self.components.iter().map(|c| c.bregman(x, y)).sum::<f64>() / self.n() as f64
    }

    /// Aggregated `(H, l, c)` with `f(x) = 0.5 x'Hx - l'x + c`, when every component is smooth.
    pub fn quadratic_form(&self) -> Option<(DMatrix<f64>, Vector, f64)> {
        let n = self.n() as f64;
        let mut h = DMatrix::zeros(self.d, self.d);
        let mut l = Vector::zeros(self.d);
        let mut c0 = 0.0;
        for comp in &self.components {
            let (a, b, c) = comp.quadratic_form()?;
            h += a;
            l += b;
            c0 += c;
        }
        Some((h / n, l / n, c0 / n))
    }

    /// Extreme eigenvalues `(min, max)` of the averaged Hessian (smooth problems only).
    pub fn hessian_spectrum(&self) -> Option<(f64, f64)> {
        let (h, _, _) = self.quadratic_form()?;
        let eig = SymmetricEigen::new(h).eigenvalues;
        Some((eig.min(), eig.max()))
    }

    /// `dist(-grad f(x), d psi(x))`, the first-order residual for smooth `f`.
    pub fn optimality_residual(&self, x: &Vector) -> Result<f64> {
        if !self.is_smooth() {
            return Err(Error::Precondition(
                "optimality residual needs a smooth f".into(),
            ));
        }
        let g = self.full_gradient(x)?;
        Ok(self.reg.subdifferential_distance(x, &(-g)))
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

// ---------------------------------------------------------------------------
// Generators

fn rng_for(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

fn gaussian_vec(rng: &mut ChaCha20Rng, d: usize) -> Vector {
    Vector::from_fn(d, |_, _| rng.sample(StandardNormal))
}

fn gaussian_nonzero_row(rng: &mut ChaCha20Rng, d: usize) -> Vector {
    loop {
        let row = gaussian_vec(rng, d);
        if row.norm() > 1e-8 {
            return row;
        }
    }
}

fn random_orthogonal(rng: &mut ChaCha20Rng, d: usize) -> DMatrix<f64> {
    let g = DMatrix::from_fn(d, d, |_, _| rng.sample(StandardNormal));
    g.qr().q()
}

/// Knobs for [`make_quadratic_with`].
#[derive(Debug, Clone, PartialEq)]
pub struct QuadraticGen {
    /// Per-component eigenvalues are drawn uniformly from `[eig_lo, eig_hi]`.
    pub eig_lo: f64,
    pub eig_hi: f64,
    /// Standard deviation of the linear terms `b_i`.
    pub linear_scale: f64,
}

impl Default for QuadraticGen {
    fn default() -> Self {
        QuadraticGen { eig_lo: 0.0, eig_hi: 1.0, linear_scale: 1.0 }
    }
}

/// Random quadratic components `0.5 x'A_i x - b_i'x` with averaged Hessian
/// satisfying `lambda_min >= mu_f_target`.
pub fn make_quadratic(n: usize, d: usize, seed: u64, mu_f_target: f64) -> Result<FiniteSumProblem> {
    make_quadratic_with(n, d, seed, mu_f_target, &QuadraticGen::default())
}

pub fn make_quadratic_with(
    n: usize,
    d: usize,
    seed: u64,
    mu_f_target: f64,
    gen: &QuadraticGen,
) -> Result<FiniteSumProblem> {
    if n == 0 || d == 0 {
        return Err(Error::invalid("n and d must be positive"));
    }
    if !(mu_f_target >= 0.0 && mu_f_target.is_finite()) {
        return Err(Error::invalid("mu_f_target must be nonnegative"));
    }
    if !(gen.eig_lo >= 0.0 && gen.eig_hi >= gen.eig_lo) {
        return Err(Error::invalid("need 0 <= eig_lo <= eig_hi"));
    }
    let mut rng = rng_for(seed);
    let mut hessians = Vec::with_capacity(n);
    let mut linears = Vec::with_capacity(n);
    for _ in 0..n {
        let q = random_orthogonal(&mut rng, d);
        let eig = Vector::from_fn(d, |_, _| rng.random_range(gen.eig_lo..=gen.eig_hi));
        let a = &q * DMatrix::from_diagonal(&eig) * q.transpose();
        hessians.push((&a + a.transpose()) * 0.5);
        linears.push(gaussian_vec(&mut rng, d) * gen.linear_scale);
    }
    let avg = hessians.iter().fold(DMatrix::zeros(d, d), |acc, a| acc + a) / n as f64;
    let lam_min = SymmetricEigen::new(avg).eigenvalues.min();
    // shift every component by the same multiple of I; the margin absorbs rounding
    let shift = if lam_min < mu_f_target {
        mu_f_target - lam_min + 1e-12 * (1.0 + mu_f_target)
    } else {
        0.0
    };
    let comps = hessians
        .into_iter()
        .zip(linears)
        .map(|(a, b)| Component::quadratic(a + DMatrix::identity(d, d) * shift, b, 0.0))
        .collect::<Result<Vec<_>>>()?;
    let probe = FiniteSumProblem::new(comps, Regularizer::Zero, 0.0)?;
    let (mu, _) = probe.hessian_spectrum().expect("smooth by construction");
    let mut p = probe;
    p.mu_f = mu.max(0.0);
    Ok(p)
}

/// Data for the generalized linear families: rows `a_i ~ N(0, I)` (optionally
/// column-scaled) and a planted `x_true ~ N(0, I)`.
fn linear_data(
    rng: &mut ChaCha20Rng,
    n: usize,
    d: usize,
    col_scales: Option<&[f64]>,
) -> (Vec<Vector>, Vector) {
    let x_true = gaussian_vec(rng, d);
    let rows = (0..n)
        .map(|_| {
            let mut row = gaussian_nonzero_row(rng, d);
            if let Some(s) = col_scales {
                row.component_mul_assign(&Vector::from_row_slice(s));
            }
            row
        })
        .collect();
    (rows, x_true)
}

fn check_shape(n: usize, d: usize) -> Result<()> {
    if n == 0 || d == 0 {
        Err(Error::invalid("n and d must be positive"))
    } else {
        Ok(())
    }
}

/// Least squares `0.5 (a_i'x - b_i)^2` with `b = A x_true + noise * N(0,1)`, zero regularizer.
pub fn make_least_squares(n: usize, d: usize, seed: u64, noise: f64) -> Result<FiniteSumProblem> {
    make_scaled_least_squares(n, d, seed, noise, None)
}

/// [`make_least_squares`] with column `j` of every row multiplied by `col_scales[j]`.
pub fn make_scaled_least_squares(
    n: usize,
    d: usize,
    seed: u64,
    noise: f64,
    col_scales: Option<&[f64]>,
) -> Result<FiniteSumProblem> {
    check_shape(n, d)?;
    if let Some(s) = col_scales {
        if s.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: s.len() });
        }
    }
    let mut rng = rng_for(seed);
    let (rows, x_true) = linear_data(&mut rng, n, d, col_scales);
    let comps = rows
        .into_iter()
        .map(|row| {
            let eps: f64 = rng.sample(StandardNormal);
            let b = row.dot(&x_true) + noise * eps;
            Component::least_squares(row, b)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut p = FiniteSumProblem::new(comps, Regularizer::Zero, 0.0)?;
    let (mu, _) = p.hessian_spectrum().expect("smooth");
    p.mu_f = if mu > 1e-12 { mu } else { 0.0 };
    Ok(p)
}

/// Least squares plus `lambda ||x||_1`; `lambda = 0` gives the plain least-squares problem.
pub fn make_lasso(
    n: usize,
    d: usize,
    seed: u64,
    noise: f64,
    lambda: f64,
) -> Result<FiniteSumProblem> {
    let mut p = make_least_squares(n, d, seed, noise)?;
    p.reg = if lambda == 0.0 {
        Regularizer::Zero
    } else {
        Regularizer::l1(lambda)?
    };
    Ok(p)
}

/// LAD `|a_i'x - b_i|` with `b = A x_true + noise * N(0,1)`.
///
/// `col_scales` multiplies column `j` of every row by `col_scales[j]`.
pub fn make_lad(
    n: usize,
    d: usize,
    seed: u64,
    noise: f64,
    col_scales: Option<&[f64]>,
) -> Result<FiniteSumProblem> {
    check_shape(n, d)?;
    if let Some(s) = col_scales {
        if s.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: s.len() });
        }
    }
    let mut rng = rng_for(seed);
    let (rows, x_true) = linear_data(&mut rng, n, d, col_scales);
    let comps = rows
        .into_iter()
        .map(|row| {
            let eps: f64 = rng.sample(StandardNormal);
            let b = row.dot(&x_true) + noise * eps;
            Component::lad(row, b)
        })
        .collect::<Result<Vec<_>>>()?;
    FiniteSumProblem::new(comps, Regularizer::Zero, 0.0)
}

/// Hinge loss with labels `sign(a_i'w_true)`, each flipped with probability `flip`.
pub fn make_hinge(
    n: usize,
    d: usize,
    seed: u64,
    flip: f64,
    reg: Regularizer,
) -> Result<FiniteSumProblem> {
    check_shape(n, d)?;
    if !(0.0..=1.0).contains(&flip) {
        return Err(Error::invalid("flip probability must lie in [0, 1]"));
    }
    let mut rng = rng_for(seed);
    let (rows, w_true) = linear_data(&mut rng, n, d, None);
    let comps = rows
        .into_iter()
        .map(|row| {
            let mut y = if row.dot(&w_true) >= 0.0 { 1.0 } else { -1.0 };
            if rng.random::<f64>() < flip {
                y = -y;
            }
            Component::hinge(row, y)
        })
        .collect::<Result<Vec<_>>>()?;
    FiniteSumProblem::new(comps, reg, 0.0)
}

// ---------------------------------------------------------------------------
// Reference solution

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReferenceMethod {
    ClosedForm,
    HighAccuracySolver,
}

impl ReferenceMethod {
    pub fn as_str(&self) -> &'static str {
        match self {
            ReferenceMethod::ClosedForm => "closed_form",
            ReferenceMethod::HighAccuracySolver => "high_accuracy_solver",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceSolution {
    pub x_star: Vector,
    pub f_star: f64,
    /// `||x* - x1||`
    pub d: f64,
    pub method: ReferenceMethod,
    pub tolerance: f64,
    /// Certified accuracy: stationarity norm `||grad f + g||` (smooth `f`),
    /// duality gap (LAD / hinge with strongly convex `psi`), the norm of a
    /// vertex subgradient certificate (LAD / hinge with zero `psi`), or the
    /// proximal-point subgradient norm (LAD / hinge otherwise).
    pub residual: f64,
}

impl ReferenceSolution {
    /// Same optimum, distance recomputed for another start.
    pub fn with_start(&self, x1: &Vector) -> Self {
        let mut out = self.clone();
        out.d = (&self.x_star - x1).norm();
        out
    }
}

pub const DEFAULT_SMOOTH_TOL: f64 = 1e-10;
pub const DEFAULT_NONSMOOTH_TOL: f64 = 1e-8;

/// Computes `x*` and `F*`.
///
/// * smooth `f` with zero or squared-l2 `psi`: linear solve (pseudo-inverse
///   when singular, picking the minimizer closest to `x1`);
/// * smooth `f` with any other `psi`: accelerated proximal gradient with
///   restarts, certified by `||grad f(x) + g||` with `g` in `d psi(x)`;
/// * LAD / hinge: dual coordinate ascent on the strongly convex problem
///   (wrapped in a proximal-point loop when `mu_psi = 0`), certified by the
///   duality gap and the proximal-point step length.
///
/// Fails with [`Error::ReferenceNotConverged`] rather than returning an
/// inaccurate point.
pub fn compute_reference(
    p: &FiniteSumProblem,
    x1: &Vector,
    tol: Option<f64>,
) -> Result<ReferenceSolution> {
    p.check_dim(x1)?;
    let smooth = p.is_smooth();
    let tol = tol.unwrap_or(if smooth { DEFAULT_SMOOTH_TOL } else { DEFAULT_NONSMOOTH_TOL });
    if !(tol > 0.0) {
        return Err(Error::invalid("reference tolerance must be positive"));
    }
    let (x_star, method, residual) = if smooth {
        match &p.reg {
            Regularizer::Zero | Regularizer::SqL2 { .. } => {
                let (x, r) = closed_form(p, x1, tol)?;
                (x, ReferenceMethod::ClosedForm, r)
            }
            _ => {
                let (x, r) = accelerated_prox_gradient(p, x1, tol)?;
                (x, ReferenceMethod::HighAccuracySolver, r)
            }
        }
    } else if p.components.iter().all(|c| c.piecewise_data().is_some()) {
        let (x, r) = piecewise_linear_reference(p, x1, tol)?;
        (x, ReferenceMethod::HighAccuracySolver, r)
    } else {
        return Err(Error::invalid(
            "reference solver supports all-smooth or all-piecewise-linear problems",
        ));
    };
    let f_star = p.objective_value(&x_star)?;
    if !f_star.is_finite() {
        return Err(Error::ReferenceNotConverged("reference point left dom psi".into()));
    }
    let d = (&x_star - x1).norm();
    Ok(ReferenceSolution { x_star, f_star, d, method, tolerance: tol, residual })
}

fn closed_form(p: &FiniteSumProblem, x1: &Vector, tol: f64) -> Result<(Vector, f64)> {
    let (mut h, mut l, _) = p.quadratic_form().expect("smooth");
    if let Regularizer::SqL2 { mu, center } = &p.reg {
        for j in 0..p.dim() {
            h[(j, j)] += mu;
        }
        if let Some(c) = center {
            l += c * *mu;
        }
    }
    let scale = 1.0 + l.norm() + h.norm() * x1.norm();
    let rhs = &l - &h * x1;
    let svd = h.clone().svd(true, true);
    let cutoff = 1e-12 * svd.singular_values.max().max(f64::MIN_POSITIVE);
    let step = svd
        .solve(&rhs, cutoff)
        .map_err(|e| Error::ReferenceNotConverged(format!("linear solve failed: {e}")))?;
    let mut x = x1 + step;
    // one step of iterative refinement
    let r = &l - &h * &x;
    if let Ok(corr) = svd.solve(&r, cutoff) {
        x += corr;
    }
    let residual = (&h * &x - &l).norm();
    if residual > tol * scale {
        return Err(Error::DegenerateData(format!(
            "quadratic is unbounded below (stationarity residual {residual:e})"
        )));
    }
    Ok((x, residual))
}

const MAX_FISTA_ITERS: usize = 2_000_000;

fn accelerated_prox_gradient(p: &FiniteSumProblem, x1: &Vector, tol: f64) -> Result<(Vector, f64)> {
    let (h, l, _) = p.quadratic_form().expect("smooth");
    let lmax = SymmetricEigen::new(h.clone()).eigenvalues.max();
    let step = 1.0 / lmax.max(1e-300);
    let grad = |x: &Vector| &h * x - &l;

    let mut x = p.reg.prox_scaled(step, x1);
    let mut y = x.clone();
    let mut t = 1.0_f64;
    let mut best = f64::INFINITY;
    for _ in 0..MAX_FISTA_ITERS {
        let g = grad(&y);
        let z = &y - &g * step;
        let x_next = p.reg.prox_scaled(step, &z);
        // (z - x_next)/step is in d psi(x_next)
        let g_psi = (&z - &x_next) / step;
        let res = (grad(&x_next) + g_psi).norm();
        best = best.min(res);
        if res <= tol {
            return Ok((x_next, res));
        }
        if (&y - &x_next).dot(&(&x_next - &x)) > 0.0 {
            // gradient-based restart
            t = 1.0;
            y = x_next.clone();
        } else {
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &x_next + (&x_next - &x) * ((t - 1.0) / t_next);
            t = t_next;
        }
        x = x_next;
    }
    Err(Error::ReferenceNotConverged(format!(
        "accelerated prox-gradient stopped at residual {best:e} > {tol:e}"
    )))
}

/// Dual coordinate ascent for `(1/n) sum phi_i(a_i'x) + psi(x) + (rho/2)||x - anchor||^2`
/// with `phi_i` LAD or hinge.
struct DualSolver<'a> {
    p: &'a FiniteSumProblem,
    rows: Vec<(&'a Vector, f64, bool)>,
    row_sq: Vec<f64>,
    beta: Vec<f64>,
    w: Vector,
}

impl<'a> DualSolver<'a> {
    fn new(p: &'a FiniteSumProblem) -> Self {
        let rows: Vec<_> = p
            .components
            .iter()
            .map(|c| {
                let (row, t) = c.piecewise_data().expect("piecewise");
                (row, t, matches!(c.kind, ComponentKind::Hinge { .. }))
            })
            .collect();
        let row_sq = rows.iter().map(|(r, _, _)| r.norm_squared()).collect();
        let n = rows.len();
        DualSolver { p, rows, row_sq, beta: vec![0.0; n], w: Vector::zeros(p.dim()) }
    }

    /// `argmin_x w'x + psi(x) + (rho/2)||x - anchor||^2`.
    fn primal(&self, rho: f64, anchor: &Vector) -> Vector {
        if rho > 0.0 {
            self.p.reg.prox_scaled(1.0 / rho, &(anchor - &self.w / rho))
        } else {
            match &self.p.reg {
                Regularizer::SqL2 { mu, center } => {
                    let base = -&self.w / *mu;
                    match center {
                        Some(c) => base + c,
                        None => base,
                    }
                }
                Regularizer::ElasticNet { lambda, mu } => {
                    crate::prox::soft_threshold(&(-&self.w), *lambda) / *mu
                }
                _ => unreachable!("rho = 0 needs a strongly convex psi"),
            }
        }
    }

    /// `(1/n) sum [phi_i(z_i) - beta_i (z_i - p_i)]`
    fn gap(&self, x: &Vector) -> f64 {
        let n = self.rows.len() as f64;
        self.rows
            .iter()
            .zip(&self.beta)
            .map(|((row, t, hinge), &b)| {
                let z = row.dot(x);
                let phi = if *hinge { (1.0 - t * z).max(0.0) } else { (z - t).abs() };
                phi - b * (z - t)
            })
            .sum::<f64>()
            / n
    }

    /// Runs until the duality gap drops below `gap_tol`; returns the last
    /// primal point and whether the gap target was met.
    fn solve(&mut self, rho: f64, anchor: &Vector, gap_tol: f64, max_epochs: usize) -> (Vector, bool) {
        let n = self.rows.len();
        let mu_tot = self.p.reg.mu_psi() + rho;
        let mut x = self.primal(rho, anchor);
        for _ in 0..max_epochs {
            for i in 0..n {
                let (row, t, hinge) = self.rows[i];
                let z = row.dot(&x);
                let old = self.beta[i];
                let mut b = old + (z - t) * mu_tot * n as f64 / self.row_sq[i];
                b = if hinge {
                    // beta lies between 0 and -y
                    if t > 0.0 { b.clamp(-1.0, 0.0) } else { b.clamp(0.0, 1.0) }
                } else {
                    b.clamp(-1.0, 1.0)
                };
                if b != old {
                    self.w += row * ((b - old) / n as f64);
                    self.beta[i] = b;
                    x = self.primal(rho, anchor);
                }
            }
            if self.gap(&x) <= gap_tol {
                return (x, true);
            }
        }
        (x, false)
    }

    /// Kink location and subgradient of `phi_i` in `z = a_i'x`, away from the kink.
    fn kink_and_slope(&self, i: usize, z: f64) -> (f64, f64) {
        let (_, t, hinge) = self.rows[i];
        if hinge {
            // kink at y z = 1, slope -y below it
            (t, if t * z < 1.0 { -t } else { 0.0 })
        } else {
            (t, sign0(z - t))
        }
    }

    /// Interval of admissible multipliers at the kink of `phi_i`.
    fn kink_interval(&self, i: usize) -> (f64, f64) {
        let (_, t, hinge) = self.rows[i];
        match (hinge, t > 0.0) {
            (false, _) => (-1.0, 1.0),
            (true, true) => (-1.0, 0.0),
            (true, false) => (0.0, 1.0),
        }
    }

    /// Tries to certify a vertex near `x` as an exact minimizer when `psi = 0`.
    ///
    /// Picks the `d` components whose kinks are closest to `x`, solves for the
    /// point where all of them sit at their kink, and looks for multipliers
    /// for every kink through that point that make the subgradient vanish.
    /// Returns the vertex and the residual norm of that certificate.
    fn polish_vertex(&self, x: &Vector) -> Option<(Vector, f64)> {
        if !matches!(self.p.reg, Regularizer::Zero) {
            return None;
        }
        let n = self.rows.len();
        let d = x.len();
        if n < d {
            return None;
        }
        let mut order: Vec<usize> = (0..n).collect();
        let dist = |i: usize| {
            let (row, _, _) = self.rows[i];
            let (k, _) = self.kink_and_slope(i, row.dot(x));
            (row.dot(x) - k).abs() / self.row_sq[i].sqrt()
        };
        order.sort_by(|&a, &b| dist(a).total_cmp(&dist(b)));
        let active = &order[..d];
        let mut a_s = DMatrix::zeros(d, d);
        let mut k_s = Vector::zeros(d);
        for (r, &i) in active.iter().enumerate() {
            let (row, _, _) = self.rows[i];
            a_s.set_row(r, &row.transpose());
            k_s[r] = self.kink_and_slope(i, row.dot(x)).0;
        }
        let vertex = a_s.lu().solve(&k_s)?;
        if !vertex.iter().all(|v| v.is_finite()) {
            return None;
        }
        let mut rest = Vector::zeros(d);
        let mut scale = 0.0_f64;
        let mut at_kink = Vec::new();
        let tie = 1e-10 * (1.0 + vertex.norm());
        for i in 0..n {
            let (row, _, _) = self.rows[i];
            let z = row.dot(&vertex);
            let (k, s) = self.kink_and_slope(i, z);
            scale += self.row_sq[i].sqrt();
            if (z - k).abs() / self.row_sq[i].sqrt() <= tie {
                at_kink.push(i);
            } else {
                rest += row * s;
            }
        }
        let residual = self.box_multipliers(&at_kink, &rest) / n as f64;
        if residual > 1e-10 * (1.0 + scale / n as f64) {
            return None;
        }
        Some((vertex, residual))
    }

    /// Box-constrained least squares `min ||sum_j beta_j a_j + rest||` over
    /// the kink intervals, by accelerated projected gradient.
    fn box_multipliers(&self, idx: &[usize], rest: &Vector) -> f64 {
        let m = idx.len();
        if m == 0 {
            return rest.norm();
        }
        let mut mat = DMatrix::zeros(rest.len(), m);
        for (c, &i) in idx.iter().enumerate() {
            mat.set_column(c, self.rows[i].0);
        }
        let lip = (mat.transpose() * &mat).symmetric_eigenvalues().max().max(1e-300);
        let bounds: Vec<_> = idx.iter().map(|&i| self.kink_interval(i)).collect();
        let project = |v: &mut Vector| {
            for (x, (lo, hi)) in v.iter_mut().zip(&bounds) {
                *x = x.clamp(*lo, *hi);
            }
        };
        let resid = |b: &Vector| (&mat * b + rest).norm();
        let mut x = Vector::zeros(m);
        let mut y = x.clone();
        let mut t = 1.0_f64;
        let mut best = (x.clone(), resid(&x));
        for _ in 0..20_000 {
            if best.1 <= 1e-14 * (1.0 + rest.norm()) {
                break;
            }
            let g = mat.transpose() * (&mat * &y + rest);
            let mut x_next = &y - g / lip;
            project(&mut x_next);
            let r = resid(&x_next);
            if r < best.1 {
                best = (x_next.clone(), r);
            }
            let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
            y = &x_next + (&x_next - &x) * ((t - 1.0) / t_next);
            x = x_next;
            t = t_next;
        }
        best.1
    }
}

fn piecewise_linear_reference(p: &FiniteSumProblem, x1: &Vector, tol: f64) -> Result<(Vector, f64)> {
    let mut solver = DualSolver::new(p);
    let mu_psi = p.reg.mu_psi();
    let data_scale = solver.row_sq.iter().sum::<f64>() / p.n() as f64;
    if mu_psi > 0.0 {
        let gap_tol = (1e-3 * tol).max(1e-15 * (1.0 + data_scale));
        let (x, ok) = solver.solve(0.0, x1, gap_tol, 200_000);
        if !ok {
            return Err(Error::ReferenceNotConverged("dual ascent gap above tolerance".into()));
        }
        let gap = solver.gap(&x).max(0.0);
        return Ok((x, gap));
    }
    let rho = 0.1 * data_scale.max(1e-12);
    let mut anchor = x1.clone();
    for _ in 0..5_000 {
        let (x, ok) = solver.solve(rho, &anchor, 1e-16 * (1.0 + data_scale), 20_000);
        if let Some(found) = solver.polish_vertex(&x).filter(|(_, r)| *r <= tol) {
            return Ok(found);
        }
        if !ok {
            return Err(Error::ReferenceNotConverged("inner dual ascent stalled".into()));
        }
        // rho (anchor - x) approximates an element of dF(x)
        let residual = rho * (&anchor - &x).norm();
        anchor = x;
        if residual <= tol {
            return Ok((anchor, residual));
        }
    }
    Err(Error::ReferenceNotConverged("proximal-point loop hit its iteration cap".into()))
}
