//! Plant, reference model, matching-condition oracle and the control law.
//!
//! The plant `ẋ = A x + B u` is unknown to the controller. Its matrices live
//! here so that the simulation can integrate it and the test oracles can
//! check the regression identities; nothing in the adaptive pipeline reads
//! them.

use thiserror::Error;

use crate::matrix::{self, determinant, rank, solve, Lu, Mat, MatrixError};
use crate::numeric::Real;

/// Accepted matching defect `‖A + B Kx − A_ref‖ + ‖B Kr − B_ref‖`.
pub const MATCHING_TOL: f64 = 1e-6;

/// Relative tolerance for the controllability rank test.
pub const CONTROLLABILITY_RANK_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PlantError {
    #[error("dimension mismatch in {what}: expected {expected}, found {found}")]
    Dimension {
        what: &'static str,
        expected: String,
        found: String,
    },
    #[error("input matrix B does not have full column rank (det(BᵀB) = {det_btb:e})")]
    RankDeficientInput { det_btb: f64 },
    #[error("(A, B) is not controllable: controllability matrix has rank {rank} < {n}")]
    Uncontrollable { rank: usize, n: usize },
    #[error("reference state matrix is not Hurwitz: {reason}")]
    NotHurwitz { reason: String },
    #[error("initial feedforward gain block K̂r(0) is zero")]
    ZeroFeedforward,
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

fn check_len(what: &'static str, v: usize, expected: usize) -> Result<(), PlantError> {
    if v == expected {
        Ok(())
    } else {
        Err(PlantError::Dimension {
            what,
            expected: expected.to_string(),
            found: v.to_string(),
        })
    }
}

fn check_shape(
    what: &'static str,
    m: &Mat<f64>,
    rows: usize,
    cols: usize,
) -> Result<(), PlantError> {
    if (m.rows(), m.cols()) == (rows, cols) {
        Ok(())
    } else {
        Err(PlantError::Dimension {
            what,
            expected: format!("{rows}x{cols}"),
            found: format!("{}x{}", m.rows(), m.cols()),
        })
    }
}

/// True plant `(A, B, x0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PlantModel {
    a: Mat<f64>,
    b: Mat<f64>,
    x0: Vec<f64>,
}

impl PlantModel {
    /// Validates shapes, full column rank of `B` and controllability of `(A, B)`.
    pub fn new(a: Mat<f64>, b: Mat<f64>, x0: Vec<f64>) -> Result<Self, PlantError> {
        let n = a.rows();
        check_shape("plant A", &a, n, n)?;
        check_len("plant B rows", b.rows(), n)?;
        check_len("plant x0", x0.len(), n)?;
        let model = Self { a, b, x0 };
        let det_btb = model.input_gram_det();
        let bnorm = model.b.frobenius_norm();
        if !(det_btb > 1e-12 * bnorm.powi(2 * model.m() as i32))
            || rank(&model.b, 1e-12) < model.m()
        {
            return Err(PlantError::RankDeficientInput { det_btb });
        }
        let r = rank(&model.controllability_matrix(), CONTROLLABILITY_RANK_TOL);
        if r < n {
            return Err(PlantError::Uncontrollable { rank: r, n });
        }
        Ok(model)
    }

    pub fn n(&self) -> usize {
        self.a.rows()
    }
    pub fn m(&self) -> usize {
        self.b.cols()
    }
    pub fn a(&self) -> &Mat<f64> {
        &self.a
    }
    pub fn b(&self) -> &Mat<f64> {
        &self.b
    }
    pub fn x0(&self) -> &[f64] {
        &self.x0
    }

    /// `det(BᵀB)`.
    pub fn input_gram_det(&self) -> f64 {
        determinant(&(&self.b.transpose() * &self.b)).unwrap_or(0.0)
    }

    /// `[B, AB, …, A^{n−1}B]`.
    pub fn controllability_matrix(&self) -> Mat<f64> {
        let mut blocks = self.b.clone();
        let mut power = self.b.clone();
        for _ in 1..self.n() {
            power = &self.a * &power;
            blocks = blocks.hstack(&power).expect("same row count");
        }
        blocks
    }

    /// Extended parameter matrix `θ̄_AB = [A B x0]ᵀ`, or `[A B]ᵀ` when the
    /// initial state is measured.
    pub fn theta_ab_bar<T: Real>(&self, include_x0: bool) -> Mat<T> {
        let n = self.n();
        let m = self.m();
        let q = n + m + usize::from(include_x0);
        Mat::from_fn(q, n, |i, j| {
            let v = if i < n {
                self.a[(j, i)]
            } else if i < n + m {
                self.b[(j, i - n)]
            } else {
                self.x0[j]
            };
            T::lit(v)
        })
    }

    /// `A x + B u`.
    pub fn derivative<T: Real>(&self, x: &[T], u: &[T]) -> Result<Vec<T>, PlantError> {
        check_len("plant state", x.len(), self.n())?;
        check_len("plant input", u.len(), self.m())?;
        Ok(affine(&self.a, x, &self.b, u))
    }
}

fn affine<T: Real>(a: &Mat<f64>, x: &[T], b: &Mat<f64>, u: &[T]) -> Vec<T> {
    (0..a.rows())
        .map(|i| {
            let mut acc = T::zero();
            for (j, &xj) in x.iter().enumerate() {
                let aij = a[(i, j)];
                if aij != 0.0 {
                    acc += T::lit(aij) * xj;
                }
            }
            for (j, &uj) in u.iter().enumerate() {
                let bij = b[(i, j)];
                if bij != 0.0 {
                    acc += T::lit(bij) * uj;
                }
            }
            acc
        })
        .collect()
}

pub fn plant_derivative<T: Real>(
    model: &PlantModel,
    x: &[T],
    u: &[T],
) -> Result<Vec<T>, PlantError> {
    model.derivative(x, u)
}

/// Reference model `ẋ_ref = A_ref x_ref + B_ref r` with Hurwitz `A_ref`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceModel {
    a_ref: Mat<f64>,
    b_ref: Mat<f64>,
    x0_ref: Vec<f64>,
}

impl ReferenceModel {
    pub fn new(a_ref: Mat<f64>, b_ref: Mat<f64>, x0_ref: Vec<f64>) -> Result<Self, PlantError> {
        let n = a_ref.rows();
        check_shape("reference A_ref", &a_ref, n, n)?;
        check_len("reference B_ref rows", b_ref.rows(), n)?;
        check_len("reference x0_ref", x0_ref.len(), n)?;
        hurwitz_check(&a_ref)?;
        Ok(Self {
            a_ref,
            b_ref,
            x0_ref,
        })
    }

    pub fn n(&self) -> usize {
        self.a_ref.rows()
    }
    pub fn m(&self) -> usize {
        self.b_ref.cols()
    }
    pub fn a_ref(&self) -> &Mat<f64> {
        &self.a_ref
    }
    pub fn b_ref(&self) -> &Mat<f64> {
        &self.b_ref
    }
    pub fn x0_ref(&self) -> &[f64] {
        &self.x0_ref
    }

    pub fn derivative<T: Real>(&self, x_ref: &[T], r: &[T]) -> Result<Vec<T>, PlantError> {
        check_len("reference state", x_ref.len(), self.n())?;
        check_len("reference signal", r.len(), self.m())?;
        Ok(affine(&self.a_ref, x_ref, &self.b_ref, r))
    }
}

pub fn reference_derivative<T: Real>(
    model: &ReferenceModel,
    x_ref: &[T],
    r: &[T],
) -> Result<Vec<T>, PlantError> {
    model.derivative(x_ref, r)
}

/// Solves `AᵀP + PA = −I` and accepts `A` iff `P` is symmetric positive definite.
pub fn hurwitz_check(a: &Mat<f64>) -> Result<Mat<f64>, PlantError> {
    let n = a.rows();
    let at = a.transpose();
    // column-major vec: vec(AᵀP + PA) = (I ⊗ Aᵀ + Aᵀ ⊗ I) vec(P)
    let dim = n * n;
    let kron = Mat::from_fn(dim, dim, |r, c| {
        let (ri, rj) = (r % n, r / n);
        let (ci, cj) = (c % n, c / n);
        let mut v = 0.0;
        if rj == cj {
            v += at[(ri, ci)];
        }
        if ri == ci {
            v += at[(rj, cj)];
        }
        v
    });
    let rhs = Mat::from_fn(dim, 1, |r, _| if r % n == r / n { -1.0 } else { 0.0 });
    let sol = solve(&kron, &rhs).map_err(|e| PlantError::NotHurwitz {
        reason: format!("Lyapunov equation not solvable ({e})"),
    })?;
    let p = Mat::from_fn(n, n, |i, j| sol[(j * n + i, 0)]);
    // Cholesky-style pivots of the symmetric part
    let mut sym = p.clone();
    sym.symmetrize();
    let mut work = sym.clone();
    for k in 0..n {
        let piv = work[(k, k)];
        if !(piv > 0.0) {
            return Err(PlantError::NotHurwitz {
                reason: format!("Lyapunov solution not positive definite (pivot {k} = {piv:e})"),
            });
        }
        for i in (k + 1)..n {
            let f = work[(i, k)] / piv;
            for j in k..n {
                let v = work[(k, j)];
                work[(i, j)] -= f * v;
            }
        }
    }
    Ok(sym)
}

/// Ideal gains `Kx`, `Kr` from the matching condition, least-squares sense.
#[derive(Debug, Clone, PartialEq)]
pub struct IdealGains<T: Real = f64> {
    pub kx: Mat<T>,
    pub kr: Mat<T>,
    pub residual: f64,
}

impl<T: Real> IdealGains<T> {
    /// `θ = [Kx Kr]ᵀ`, shape `(n+m)×m`.
    pub fn theta(&self) -> Mat<T> {
        self.kx
            .transpose()
            .vstack(&self.kr.transpose())
            .expect("Kxᵀ and Krᵀ share m columns")
    }

    pub fn matched(&self) -> bool {
        self.residual <= MATCHING_TOL
    }
}

/// Test oracle: least-squares solution of `B Kx = A_ref − A`, `B Kr = B_ref`
/// through the normal equations. Never used by the controller.
pub fn ideal_gains<T: Real>(
    plant: &PlantModel,
    reference: &ReferenceModel,
) -> Result<IdealGains<T>, PlantError> {
    if plant.n() != reference.n() || plant.m() != reference.m() {
        return Err(PlantError::Dimension {
            what: "plant vs reference model",
            expected: format!("n={}, m={}", plant.n(), plant.m()),
            found: format!("n={}, m={}", reference.n(), reference.m()),
        });
    }
    let b: Mat<T> = plant.b().cast();
    let bt = b.transpose();
    let btb = &bt * &b;
    let lu = Lu::factor(&btb)?;
    if lu.has_zero_pivot() {
        return Err(PlantError::RankDeficientInput { det_btb: 0.0 });
    }
    let da: Mat<T> = &reference.a_ref().cast() - &plant.a().cast();
    let kx = matrix::solve(&btb, &(&bt * &da)).map_err(|_| PlantError::RankDeficientInput {
        det_btb: plant.input_gram_det(),
    })?;
    let kr = matrix::solve(&btb, &(&bt * &reference.b_ref().cast())).map_err(|_| {
        PlantError::RankDeficientInput {
            det_btb: plant.input_gram_det(),
        }
    })?;
    let residual = (&(&b * &kx) - &da).frobenius_norm()
        + (&(&b * &kr) - &reference.b_ref().cast()).frobenius_norm();
    Ok(IdealGains {
        kx,
        kr,
        residual: residual.to_f64_lossy(),
    })
}

/// Adjustable controller parameters `θ̂ = [K̂x K̂r]ᵀ`, `(n+m)×m`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    theta_hat: Mat<f64>,
    n: usize,
}

impl ControllerState {
    /// Rejects a wrong shape or an all-zero `K̂r` block.
    pub fn new(theta_hat: Mat<f64>, n: usize, m: usize) -> Result<Self, PlantError> {
        check_shape("controller θ̂", &theta_hat, n + m, m)?;
        let kr_block = theta_hat.row_block(n, n + m);
        if kr_block.max_abs() == 0.0 {
            return Err(PlantError::ZeroFeedforward);
        }
        Ok(Self { theta_hat, n })
    }

    /// `θ̂ᵀ(0) = [0 I]`.
    pub fn initial(n: usize, m: usize) -> Self {
        Self {
            theta_hat: Mat::from_fn(
                n + m,
                m,
                |i, j| if i >= n && i - n == j { 1.0 } else { 0.0 },
            ),
            n,
        }
    }

    pub fn theta_hat(&self) -> &Mat<f64> {
        &self.theta_hat
    }

    pub fn kx_hat(&self) -> Mat<f64> {
        self.theta_hat.row_block(0, self.n).transpose()
    }

    pub fn kr_hat(&self) -> Mat<f64> {
        self.theta_hat
            .row_block(self.n, self.theta_hat.rows())
            .transpose()
    }

    pub fn control(&self, x: &[f64], r: &[f64]) -> Result<Vec<f64>, PlantError> {
        control(&self.theta_hat, x, r)
    }
}

/// `u = θ̂ᵀ ω` with `ω = [xᵀ rᵀ]ᵀ`.
pub fn control<T: Real>(theta_hat: &Mat<T>, x: &[T], r: &[T]) -> Result<Vec<T>, PlantError> {
    check_len(
        "controller regressor ω",
        x.len() + r.len(),
        theta_hat.rows(),
    )?;
    let omega: Vec<T> = x.iter().chain(r).copied().collect();
    Ok(theta_hat.tr_mul_vec(&omega)?)
}

pub fn tracking_error<T: Real>(x: &[T], x_ref: &[T]) -> Result<Vec<T>, PlantError> {
    check_len("tracking error", x_ref.len(), x.len())?;
    Ok(x.iter().zip(x_ref).map(|(&a, &b)| a - b).collect())
}

/// `‖ξ‖ = sqrt(‖e_ref‖² + ‖vec(θ̂ − θ)‖²)`.
pub fn augmented_error<T: Real>(e_ref: &[T], theta_hat: &Mat<T>, theta_true: &Mat<T>) -> T {
    let e2 = e_ref.iter().fold(T::zero(), |acc, &v| acc + v * v);
    let t2 = theta_hat
        .data()
        .iter()
        .zip(theta_true.data())
        .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    (e2 + t2).sqrt()
}
