//! Stationary Matérn covariance functions (closed-form half-integer orders),
//! Gram-matrix assembly, and analytic hyperparameter derivatives.

use nalgebra::{DMatrix, DVector};

use crate::error::{NogapError, Result};

/// Half-integer Matérn smoothness orders with closed-form profiles.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MaternOrder {
    Half,
    ThreeHalves,
    FiveHalves,
}

impl MaternOrder {
    pub fn as_str(&self) -> &'static str {
        match self {
            MaternOrder::Half => "1/2",
            MaternOrder::ThreeHalves => "3/2",
            MaternOrder::FiveHalves => "5/2",
        }
    }

    pub fn parse(s: &str) -> crate::error::Result<Self> {
        match s {
            "1/2" => Ok(MaternOrder::Half),
            "3/2" => Ok(MaternOrder::ThreeHalves),
            "5/2" => Ok(MaternOrder::FiveHalves),
            other => Err(crate::error::NogapError::Config(format!(
                "unknown Matern order '{other}' (expected 1/2, 3/2 or 5/2)"
            ))),
        }
    }
}

/// Hyperparameters of one kernel factor, stored as unconstrained logs.
#[derive(Clone, Copy, Debug)]
pub struct KernelHyper {
    pub order: MaternOrder,
    pub log_lengthscale: f64,
    pub log_variance: f64,
}

impl KernelHyper {
    /// Default initialization on normalized data: h = 1, σ_f² = 1.
    pub fn new(order: MaternOrder) -> Self {
        KernelHyper {
            order,
            log_lengthscale: 0.0,
            log_variance: 0.0,
        }
    }

    pub fn lengthscale(&self) -> f64 {
        self.log_lengthscale.exp()
    }

    pub fn variance(&self) -> f64 {
        self.log_variance.exp()
    }
}

/// Normalized Matérn profile ρ(t) with t = r/h; ρ(0) = 1, strictly decreasing.
fn profile(order: MaternOrder, t: f64) -> f64 {
    match order {
        MaternOrder::Half => (-t).exp(),
        MaternOrder::ThreeHalves => {
            let s = 3.0_f64.sqrt() * t;
            (1.0 + s) * (-s).exp()
        }
        MaternOrder::FiveHalves => {
            let s = 5.0_f64.sqrt() * t;
            (1.0 + s + 5.0 * t * t / 3.0) * (-s).exp()
        }
    }
}

/// Derivative of the covariance with respect to log h at scaled lag t = r/h,
/// divided by σ_f² (i.e. −t·ρ'(t), using dt/d(log h) = −t).
fn profile_dlog_h(order: MaternOrder, t: f64) -> f64 {
    match order {
        MaternOrder::Half => t * (-t).exp(),
        MaternOrder::ThreeHalves => 3.0 * t * t * (-(3.0_f64.sqrt()) * t).exp(),
        MaternOrder::FiveHalves => {
            let s5 = 5.0_f64.sqrt();
            (5.0 * t * t / 3.0) * (1.0 + s5 * t) * (-s5 * t).exp()
        }
    }
}

/// Matérn covariance σ_f²·ρ(r/h) at distance r ≥ 0.
pub fn matern(r: f64, hyper: &KernelHyper) -> Result<f64> {
    if r < 0.0 {
        return Err(NogapError::domain("matern", format!("negative distance {r}")));
    }
    let t = r / hyper.lengthscale();
    Ok(hyper.variance() * profile(hyper.order, t))
}

/// Closed-form derivatives `(∂k/∂log h, ∂k/∂log σ_f²)` at distance r.
pub fn matern_grad(r: f64, hyper: &KernelHyper) -> Result<(f64, f64)> {
    if r < 0.0 {
        return Err(NogapError::domain("matern_grad", format!("negative distance {r}")));
    }
    let t = r / hyper.lengthscale();
    let k = hyper.variance() * profile(hyper.order, t);
    let dk_dlog_h = hyper.variance() * profile_dlog_h(hyper.order, t);
    Ok((dk_dlog_h, k))
}

/// Pairwise scaled Euclidean distances: D[i,j] = scale·‖p_i − p_j‖.
///
/// For function-valued inputs the callers pass `scale = 1/√(grid size)` so
/// lengthscales are resolution-insensitive; for coordinate inputs scale = 1.
pub fn distance_matrix(points: &[DVector<f64>], scale: f64) -> Result<DMatrix<f64>> {
    let n = points.len();
    if n == 0 {
        return Err(NogapError::domain("distance_matrix", "no points"));
    }
    let dim = points[0].len();
    for (i, p) in points.iter().enumerate() {
        if p.len() != dim {
            return Err(NogapError::shape(
                "distance_matrix",
                format!("point dimension {dim}"),
                format!("point {i} has dimension {}", p.len()),
            ));
        }
    }
    let mut d = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let r = (&points[i] - &points[j]).norm() * scale;
            d[(i, j)] = r;
            d[(j, i)] = r;
        }
    }
    Ok(d)
}

/// Gram matrix from a precomputed distance matrix; exactly symmetric.
pub fn gram_from_distances(dists: &DMatrix<f64>, hyper: &KernelHyper) -> DMatrix<f64> {
    let n = dists.nrows();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        g[(i, i)] = hyper.variance();
        for j in (i + 1)..n {
            let k = matern(dists[(i, j)], hyper).expect("distances are non-negative");
            g[(i, j)] = k;
            g[(j, i)] = k;
        }
    }
    g
}

/// ∂G/∂(log h) from a precomputed distance matrix (∂G/∂(log σ_f²) is G itself).
pub fn gram_grad_log_h(dists: &DMatrix<f64>, hyper: &KernelHyper) -> DMatrix<f64> {
    let n = dists.nrows();
    let mut g = DMatrix::zeros(n, n);
    for i in 0..n {
        for j in (i + 1)..n {
            let (dh, _) = matern_grad(dists[(i, j)], hyper).expect("distances are non-negative");
            g[(i, j)] = dh;
            g[(j, i)] = dh;
        }
    }
    g
}

/// Gram matrix G[i,j] = matern(scale·‖p_i − p_j‖, hyper).
pub fn gram(points: &[DVector<f64>], hyper: &KernelHyper, scale: f64) -> Result<DMatrix<f64>> {
    let d = distance_matrix(points, scale)?;
    Ok(gram_from_distances(&d, hyper))
}

/// Cross-Gram column k[i] = matern(scale·‖p_i − q‖, hyper).
pub fn cross_gram_column(
    points: &[DVector<f64>],
    q: &DVector<f64>,
    hyper: &KernelHyper,
    scale: f64,
) -> Result<DVector<f64>> {
    let mut out = DVector::zeros(points.len());
    for (i, p) in points.iter().enumerate() {
        if p.len() != q.len() {
            return Err(NogapError::shape(
                "cross_gram_column",
                format!("point dimension {}", q.len()),
                format!("point {i} has dimension {}", p.len()),
            ));
        }
        out[i] = matern((p - q).norm() * scale, hyper)?;
    }
    Ok(out)
}
