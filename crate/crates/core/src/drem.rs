//! Dynamic regressor extension and mixing.
//!
//! The vector regression `z̄ = θ̄ᵀ φ̄` is extended through `1/(p + k)` into
//! `F = ℌ[φ̄φ̄ᵀ]`, `G = ℌ[φ̄z̄ᵀ]` and mixed with the adjugate, giving
//! `z = adj(F) G = det(F) θ̄`. From the blocks of `z` the controller
//! parameters obey the scalar-gain regression `y_θ = Δ θ`.

use thiserror::Error;

use crate::matrix::{adjugate, det_adjugate_mul, determinant, Mat, MatrixError};
use crate::numeric::Real;
use crate::plant::ReferenceModel;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DremError {
    #[error("operator constant k must be positive and finite, got {0}")]
    InvalidK(f64),
    #[error("regressor scale s must be positive and finite, got {0}")]
    InvalidScale(f64),
    #[error("z has {rows} rows, fewer than n + m = {needed}")]
    TooFewRows { rows: usize, needed: usize },
    #[error(transparent)]
    Matrix(#[from] MatrixError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DremConfig {
    pub k: f64,
    /// Applied as `φ̄ ← sφ̄`, `z̄ ← sz̄` before extension.
    pub scale: f64,
}

impl DremConfig {
    pub fn new(k: f64, scale: f64) -> Result<Self, DremError> {
        if !(k > 0.0 && k.is_finite()) {
            return Err(DremError::InvalidK(k));
        }
        if !(scale > 0.0 && scale.is_finite()) {
            return Err(DremError::InvalidScale(scale));
        }
        Ok(Self { k, scale })
    }
}

impl Default for DremConfig {
    fn default() -> Self {
        Self {
            k: 10.0,
            scale: 1.0,
        }
    }
}

/// States of `ℌ[φ̄φ̄ᵀ]` (`q×q`) and `ℌ[φ̄z̄ᵀ]` (`q×n`).
#[derive(Debug, Clone, PartialEq)]
pub struct DremState<T: Real = f64> {
    pub f: Mat<T>,
    pub g: Mat<T>,
    pub k: f64,
}

impl<T: Real> DremState<T> {
    pub fn new(q: usize, n: usize, k: f64) -> Self {
        Self {
            f: Mat::zeros(q, q),
            g: Mat::zeros(q, n),
            k,
        }
    }

    pub fn q(&self) -> usize {
        self.f.rows()
    }
}

/// Right-hand sides `(−kF + φ̄φ̄ᵀ, −kG + φ̄z̄ᵀ)` written into `df`, `dg`.
pub fn drem_rhs_into<T: Real>(
    k: T,
    f: &[T],
    g: &[T],
    phi_bar: &[T],
    z_bar: &[T],
    df: &mut [T],
    dg: &mut [T],
) {
    let q = phi_bar.len();
    let n = z_bar.len();
    for i in 0..q {
        let pi = phi_bar[i];
        for j in 0..q {
            df[i * q + j] = pi * phi_bar[j] - k * f[i * q + j];
        }
        for j in 0..n {
            dg[i * n + j] = pi * z_bar[j] - k * g[i * n + j];
        }
    }
}

/// One RK4 step with `φ̄`, `z̄` held, followed by `F ← (F + Fᵀ)/2`.
pub fn drem_step<T: Real>(
    state: &DremState<T>,
    phi_bar: &[T],
    z_bar: &[T],
    dt: f64,
) -> DremState<T> {
    let q = state.q();
    let n = state.g.cols();
    assert_eq!(phi_bar.len(), q, "drem_step: regressor length");
    assert_eq!(z_bar.len(), n, "drem_step: z̄ length");
    let k = T::lit(state.k);
    let h = T::lit(dt);
    let half = T::lit(0.5);
    let (nf, ng) = (q * q, q * n);
    let mut kf = [
        vec![T::zero(); nf],
        vec![T::zero(); nf],
        vec![T::zero(); nf],
        vec![T::zero(); nf],
    ];
    let mut kg = [
        vec![T::zero(); ng],
        vec![T::zero(); ng],
        vec![T::zero(); ng],
        vec![T::zero(); ng],
    ];
    let f0 = state.f.data();
    let g0 = state.g.data();
    let coeffs = [T::zero(), half * h, half * h, h];
    for s in 0..4 {
        let (fs, gs): (Vec<T>, Vec<T>) = if s == 0 {
            (f0.to_vec(), g0.to_vec())
        } else {
            let c = coeffs[s];
            (
                f0.iter()
                    .zip(&kf[s - 1])
                    .map(|(&a, &b)| a + c * b)
                    .collect(),
                g0.iter()
                    .zip(&kg[s - 1])
                    .map(|(&a, &b)| a + c * b)
                    .collect(),
            )
        };
        drem_rhs_into(k, &fs, &gs, phi_bar, z_bar, &mut kf[s], &mut kg[s]);
    }
    let sixth = h / T::lit(6.0);
    let two = T::lit(2.0);
    let comb = |y: &[T], ks: &[Vec<T>; 4]| -> Vec<T> {
        (0..y.len())
            .map(|i| y[i] + sixth * (ks[0][i] + two * ks[1][i] + two * ks[2][i] + ks[3][i]))
            .collect()
    };
    let mut f = Mat::new_unchecked(q, q, comb(f0, &kf));
    f.symmetrize();
    DremState {
        f,
        g: Mat::new_unchecked(q, n, comb(g0, &kg)),
        k: state.k,
    }
}

/// `(z, φ) = (adj(F) G, det(F))`.
pub fn mix<T: Real>(state: &DremState<T>) -> Result<(Mat<T>, T), DremError> {
    let (phi, z) = det_adjugate_mul(&state.f, &state.g)?;
    Ok((z, phi))
}

/// `z_A = (first n rows of z)ᵀ`, `z_B = (rows n..n+m of z)ᵀ`.
pub fn extract<T: Real>(z: &Mat<T>, n: usize, m: usize) -> Result<(Mat<T>, Mat<T>), DremError> {
    if z.rows() < n + m {
        return Err(DremError::TooFewRows {
            rows: z.rows(),
            needed: n + m,
        });
    }
    if z.cols() != n {
        return Err(MatrixError::Dimension {
            op: "extract",
            expected: format!("z with {n} columns"),
            found: format!("{} columns", z.cols()),
        }
        .into());
    }
    Ok((
        z.row_block(0, n).transpose(),
        z.row_block(n, n + m).transpose(),
    ))
}

/// `Δ = det(z_Bᵀz_B)` and `y_θ` with `y_θᵀ = adj(z_Bᵀz_B) z_Bᵀ ȳ_θᵀ`,
/// where `ȳ_θᵀ = [φA_ref − z_A, φB_ref]`.
pub fn controller_regression<T: Real>(
    z_a: &Mat<T>,
    z_b: &Mat<T>,
    phi: T,
    reference: &ReferenceModel,
) -> Result<(T, Mat<T>), DremError> {
    let n = reference.n();
    let m = reference.m();
    if (z_a.rows(), z_a.cols()) != (n, n) || (z_b.rows(), z_b.cols()) != (n, m) {
        return Err(MatrixError::Dimension {
            op: "controller_regression",
            expected: format!("z_A {n}x{n}, z_B {n}x{m}"),
            found: format!(
                "z_A {}x{}, z_B {}x{}",
                z_a.rows(),
                z_a.cols(),
                z_b.rows(),
                z_b.cols()
            ),
        }
        .into());
    }
    let a_ref = reference.a_ref();
    let b_ref = reference.b_ref();
    let y_bar_t = Mat::from_fn(n, n + m, |i, j| {
        if j < n {
            phi * T::lit(a_ref[(i, j)]) - z_a[(i, j)]
        } else {
            phi * T::lit(b_ref[(i, j - n)])
        }
    });
    let zbt = z_b.transpose();
    let gram = &zbt * z_b;
    let delta = determinant(&gram)?;
    let y_theta_t = &adjugate(&gram)? * &(&zbt * &y_bar_t);
    Ok((delta, y_theta_t.transpose()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DremSnapshot<T: Real = f64> {
    pub z: Mat<T>,
    pub phi: T,
    pub z_a: Mat<T>,
    pub z_b: Mat<T>,
    pub delta: T,
    pub y_theta: Mat<T>,
}

/// Mixing, extraction and controller regression from the current `F`, `G`.
pub fn snapshot<T: Real>(
    state: &DremState<T>,
    reference: &ReferenceModel,
) -> Result<DremSnapshot<T>, DremError> {
    let (z, phi) = mix(state)?;
    let (z_a, z_b) = extract(&z, reference.n(), reference.m())?;
    let (delta, y_theta) = controller_regression(&z_a, &z_b, phi, reference)?;
    Ok(DremSnapshot {
        z,
        phi,
        z_a,
        z_b,
        delta,
        y_theta,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::min_eig_sym;
    use crate::numeric::Dd;
    use crate::plant::{ideal_gains, tests::aircraft};
    use num_traits::Float;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn zero_regressor_keeps_state_zero() {
        let mut s = DremState::<f64>::new(3, 2, 10.0);
        for _ in 0..100 {
            s = drem_step(&s, &[0.0; 3], &[0.0; 2], 0.01);
        }
        assert_eq!(s.f.max_abs(), 0.0);
        assert_eq!(s.g.max_abs(), 0.0);
    }

    #[test]
    fn constant_regressor_dc_gain() {
        let c = [1.0, -2.0, 0.5];
        let zb = [3.0, 1.0];
        let mut s = DremState::<f64>::new(3, 2, 10.0);
        for _ in 0..500 {
            s = drem_step(&s, &c, &zb, 0.01);
        }
        let expect_f = Mat::outer(&c, &c).scale(0.1);
        let expect_g = Mat::outer(&c, &zb).scale(0.1);
        assert!((&s.f - &expect_f).max_abs() < 1e-12);
        assert!((&s.g - &expect_g).max_abs() < 1e-12);
    }

    #[test]
    fn mix_examples() {
        let s = DremState::<f64>::new(3, 2, 10.0);
        let (z, phi) = mix(&s).unwrap();
        assert_eq!(phi, 0.0);
        assert_eq!(z.max_abs(), 0.0);

        let g = Mat::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap();
        let s = DremState {
            f: Mat::identity(3),
            g: g.clone(),
            k: 10.0,
        };
        let (z, phi) = mix(&s).unwrap();
        assert_eq!(phi, 1.0);
        assert!((&z - &g).max_abs() < 1e-15);
    }

    #[test]
    fn extract_selectors() {
        let (plant, _) = aircraft();
        let phi = 0.37;
        let z = plant.theta_ab_bar::<f64>(true).scale(phi);
        let (za, zb) = extract(&z, 4, 2).unwrap();
        assert!((&za - &plant.a().scale(phi)).max_abs() < 1e-15);
        assert!((&zb - &plant.b().scale(phi)).max_abs() < 1e-15);
        let (za, zb) = extract(&Mat::<f64>::zeros(7, 4), 4, 2).unwrap();
        assert_eq!((za.max_abs(), zb.max_abs()), (0.0, 0.0));
        assert!(matches!(
            extract(&Mat::<f64>::zeros(5, 4), 4, 2),
            Err(DremError::TooFewRows { .. })
        ));
    }

    #[test]
    fn controller_regression_examples() {
        let (plant, reference) = aircraft();
        let (delta, y) =
            controller_regression(&Mat::zeros(4, 4), &Mat::zeros(4, 2), 0.0, &reference).unwrap();
        assert_eq!(delta, 0.0);
        assert_eq!(y.max_abs(), 0.0);

        // z_A = φA, z_B = φB ⇒ y_θ = Δ θ_LS exactly, Δ = φ⁴ det(BᵀB)
        let phi = 1.7;
        let theta = ideal_gains::<f64>(&plant, &reference).unwrap().theta();
        let (delta, y) = controller_regression(
            &plant.a().scale(phi),
            &plant.b().scale(phi),
            phi,
            &reference,
        )
        .unwrap();
        let expect = phi.powi(4) * plant.input_gram_det();
        assert!((delta - expect).abs() <= 1e-12 * expect);
        let err = (&y - &theta.scale(delta)).frobenius_norm();
        assert!(err <= 1e-10 * (1.0 + delta), "{err:e}");
    }

    #[test]
    fn scalar_input_delta_is_squared_norm() {
        let a_ref = Mat::from_rows(&[vec![-1.0, 0.0], vec![1.0, -2.0]]).unwrap();
        let b_ref = Mat::from_rows(&[vec![1.0], vec![0.5]]).unwrap();
        let reference = ReferenceModel::new(a_ref, b_ref, vec![0.0, 0.0]).unwrap();
        let zb = Mat::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let (delta, _) = controller_regression(&Mat::zeros(2, 2), &zb, 1.0, &reference).unwrap();
        assert_eq!(delta, 25.0);
    }

    /// Random bounded regressor driven through a known linear map: the
    /// mixed output must equal `φ θ̄` and `F` must stay PSD.
    #[test]
    fn mixing_identity_on_synthetic_regression_in_double_double() {
        let (plant, reference) = aircraft();
        let theta_bar: Mat<Dd> = plant.theta_ab_bar(true);
        let mut s = DremState::<Dd>::new(7, 4, 10.0);
        let dt = 1e-3;
        for k in 0..2000 {
            let t = k as f64 * dt;
            let pb: Vec<Dd> = (0..7)
                .map(|i| Dd::lit(((i as f64 + 1.0) * t * 1.3).sin() + 0.2 * i as f64 * (-t).exp()))
                .collect();
            let zb = theta_bar.tr_mul_vec(&pb).unwrap();
            s = drem_step(&s, &pb, &zb, dt);
        }
        let snap = snapshot(&s, &reference).unwrap();
        let target = theta_bar.scale(snap.phi);
        let rel = (&snap.z - &target).frobenius_norm() / target.frobenius_norm();
        assert!(snap.phi > Dd::lit(0.0));
        assert!(rel.to_f64_lossy() < 1e-12, "{rel}");
        let fmin = min_eig_sym(&s.f.cast::<f64>()).unwrap();
        assert!(fmin >= -1e-9 * s.f.frobenius_norm().to_f64_lossy());
        let theta: Mat<Dd> = ideal_gains(&plant, &reference).unwrap().theta();
        let yerr = (&snap.y_theta - &theta.scale(snap.delta)).frobenius_norm()
            / (theta.scale(snap.delta)).frobenius_norm();
        assert!(yerr.to_f64_lossy() < 1e-10, "{yerr}");
    }

    #[test]
    fn scaling_multiplies_phi_by_s_to_2q() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let f = Mat::from_fn(3, 3, |_, _| rng.gen_range(-1.0..1.0));
        let f = &f.transpose() * &f;
        let g = Mat::from_fn(3, 2, |_, _| rng.gen_range(-1.0..1.0));
        let s = 3.0f64;
        let base = mix(&DremState {
            f: f.clone(),
            g: g.clone(),
            k: 1.0,
        })
        .unwrap();
        let scaled = mix(&DremState {
            f: f.scale(s * s),
            g: g.scale(s * s),
            k: 1.0,
        })
        .unwrap();
        assert!((scaled.1 - base.1 * s.powi(6)).abs() <= 1e-10 * scaled.1.abs());
        assert!((&scaled.0 - &base.0.scale(s.powi(6))).max_abs() <= 1e-10 * scaled.0.max_abs());
    }

    #[test]
    fn config_validation() {
        assert!(DremConfig::new(0.0, 1.0).is_err());
        assert!(DremConfig::new(10.0, -1.0).is_err());
        assert!(DremConfig::new(10.0, 1e4).is_ok());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn phi_and_delta_nonnegative(seed in any::<u64>()) {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let (_, reference) = aircraft();
            let mut s = DremState::<f64>::new(7, 4, 10.0);
            for _ in 0..50 {
                let pb: Vec<f64> = (0..7).map(|_| rng.gen_range(-1.0..1.0)).collect();
                let zb: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
                s = drem_step(&s, &pb, &zb, 0.01);
            }
            let snap = snapshot(&s, &reference).unwrap();
            let fscale = s.f.frobenius_norm().powi(7);
            prop_assert!(snap.phi >= -1e-9 * fscale);
            prop_assert!(snap.delta >= -1e-9 * snap.z_b.frobenius_norm().powi(4));
            prop_assert!(Float::is_finite(snap.delta));
        }
    }
}
