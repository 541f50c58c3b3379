//! Forgetting-integral memory, gain schedule and the adaptive laws.
//!
//! `𝔊[f] = e^{−σt} ∫₀ᵗ f` is realised as `v̇ = −σv + e^{−σt} f`, giving
//! `Ω = 𝔊[Δ²]` and `Υ = 𝔊[Δ y_θ] = Ω θ`. The proposed law drives
//! `θ̂` towards `Υ / Ω` once `Ω` leaves zero; the baseline law uses the
//! instantaneous pair `(Δ, y_θ)` instead.

use thiserror::Error;

use crate::matrix::Mat;
use crate::numeric::Real;

/// Relative threshold standing in for `Ω = 0`.
pub const OMEGA_EPSILON_REL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AdaptationError {
    #[error("gamma0 must be >= 1, got {0}")]
    Gamma0(f64),
    #[error("gamma1 must be >= 0, got {0}")]
    Gamma1(f64),
    #[error("forgetting factor sigma must be positive, got {0}")]
    Sigma(f64),
    #[error("omega_epsilon must be positive, got {0}")]
    Epsilon(f64),
    #[error("baseline gain must be positive, got {0}")]
    BaselineGain(f64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct MemoryState<T: Real = f64> {
    pub omega: T,
    pub upsilon: Mat<T>,
    pub sigma: f64,
    pub t: f64,
}

impl<T: Real> MemoryState<T> {
    pub fn new(rows: usize, cols: usize, sigma: f64) -> Result<Self, AdaptationError> {
        if !(sigma > 0.0 && sigma.is_finite()) {
            return Err(AdaptationError::Sigma(sigma));
        }
        Ok(Self {
            omega: T::zero(),
            upsilon: Mat::zeros(rows, cols),
            sigma,
            t: 0.0,
        })
    }
}

/// `(−σΩ + e^{−σt}Δ², −σΥ + e^{−σt}Δ y_θ)` with `Υ`, `y_θ` as flat slices.
pub fn memory_rhs_into<T: Real>(
    sigma: T,
    t: T,
    omega: T,
    upsilon: &[T],
    delta: T,
    y_theta: &[T],
    d_up: &mut [T],
) -> T {
    let w = (-sigma * t).exp();
    let wd = w * delta;
    for ((d, &u), &y) in d_up.iter_mut().zip(upsilon).zip(y_theta) {
        *d = wd * y - sigma * u;
    }
    wd * delta - sigma * omega
}

/// One RK4 step of the memory with `Δ`, `y_θ` held; the weight `e^{−σt}`
/// follows the substep times.
pub fn memory_step<T: Real>(
    state: &MemoryState<T>,
    delta: T,
    y_theta: &Mat<T>,
    dt: f64,
) -> MemoryState<T> {
    let sigma = T::lit(state.sigma);
    let h = T::lit(dt);
    let half = T::lit(0.5);
    let t0 = T::lit(state.t);
    let u0 = state.upsilon.data();
    let y = y_theta.data();
    let len = u0.len();
    let mut ku = [
        vec![T::zero(); len],
        vec![T::zero(); len],
        vec![T::zero(); len],
        vec![T::zero(); len],
    ];
    let mut ko = [T::zero(); 4];
    let offs = [T::zero(), half * h, half * h, h];
    for s in 0..4 {
        let c = offs[s];
        let (o, u): (T, Vec<T>) = if s == 0 {
            (state.omega, u0.to_vec())
        } else {
            (
                state.omega + c * ko[s - 1],
                u0.iter()
                    .zip(&ku[s - 1])
                    .map(|(&a, &b)| a + c * b)
                    .collect(),
            )
        };
        ko[s] = memory_rhs_into(sigma, t0 + c, o, &u, delta, y, &mut ku[s]);
    }
    let sixth = h / T::lit(6.0);
    let two = T::lit(2.0);
    let omega = state.omega + sixth * (ko[0] + two * ko[1] + two * ko[2] + ko[3]);
    let up: Vec<T> = (0..len)
        .map(|i| u0[i] + sixth * (ku[0][i] + two * ku[1][i] + two * ku[2][i] + ku[3][i]))
        .collect();
    MemoryState {
        omega,
        upsilon: Mat::new_unchecked(state.upsilon.rows(), state.upsilon.cols(), up),
        sigma: state.sigma,
        t: state.t + dt,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GainSchedule {
    pub gamma0: f64,
    pub gamma1: f64,
    /// `Ω` counts as zero while `Ω ≤ omega_epsilon · (1 + max Ω so far)`.
    pub omega_epsilon: f64,
}

impl GainSchedule {
    pub fn new(gamma0: f64, gamma1: f64, omega_epsilon: f64) -> Result<Self, AdaptationError> {
        if !(gamma0 >= 1.0 && gamma0.is_finite()) {
            return Err(AdaptationError::Gamma0(gamma0));
        }
        if !(gamma1 >= 0.0 && gamma1.is_finite()) {
            return Err(AdaptationError::Gamma1(gamma1));
        }
        if !(omega_epsilon > 0.0 && omega_epsilon.is_finite()) {
            return Err(AdaptationError::Epsilon(omega_epsilon));
        }
        Ok(Self {
            gamma0,
            gamma1,
            omega_epsilon,
        })
    }

    pub fn threshold<T: Real>(&self, running_max_omega: T) -> T {
        T::lit(self.omega_epsilon) * (T::one() + running_max_omega)
    }

    pub fn is_active<T: Real>(&self, omega: T, running_max_omega: T) -> bool {
        omega > self.threshold(running_max_omega)
    }

    /// `γ0 ‖ω‖² + γ1`, the contraction rate `γΩ²` on the active branch.
    pub fn rate<T: Real>(&self, omega_vec: &[T]) -> T {
        let w2 = omega_vec.iter().fold(T::zero(), |acc, &v| acc + v * v);
        T::lit(self.gamma0) * w2 + T::lit(self.gamma1)
    }
}

impl Default for GainSchedule {
    fn default() -> Self {
        Self {
            gamma0: 1.0,
            gamma1: 10.0,
            omega_epsilon: OMEGA_EPSILON_REL,
        }
    }
}

/// `γ = 0` while `Ω` counts as zero, else `(γ0 ‖ω‖² + γ1) / Ω²`.
pub fn gain<T: Real>(
    schedule: &GainSchedule,
    omega: T,
    omega_vec: &[T],
    running_max_omega: T,
) -> T {
    if schedule.is_active(omega, running_max_omega) {
        schedule.rate(omega_vec) / (omega * omega)
    } else {
        T::zero()
    }
}

/// `θ̂̇ = −γΩ(Ωθ̂ − Υ)`, evaluated as `−(γ0‖ω‖² + γ1)(θ̂ − Υ/Ω)` on the
/// active branch so that `Ω²` is never formed.
pub fn adapt_rhs_into<T: Real>(
    theta_hat: &[T],
    omega: T,
    upsilon: &[T],
    schedule: &GainSchedule,
    omega_vec: &[T],
    running_max_omega: T,
    out: &mut [T],
) -> bool {
    if !schedule.is_active(omega, running_max_omega) {
        out.iter_mut().for_each(|v| *v = T::zero());
        return false;
    }
    active_rhs_into(theta_hat, omega, upsilon, schedule.rate(omega_vec), out);
    true
}

/// Active branch of the proposed law, `−rate·(θ̂ − Υ/Ω)`, without the switch test.
pub fn active_rhs_into<T: Real>(theta_hat: &[T], omega: T, upsilon: &[T], rate: T, out: &mut [T]) {
    for ((d, &th), &up) in out.iter_mut().zip(theta_hat).zip(upsilon) {
        *d = -rate * (th - up / omega);
    }
}

/// One RK4 step of the proposed law with `Ω`, `Υ`, `ω` held.
pub fn adapt_step<T: Real>(
    theta_hat: &Mat<T>,
    state: &MemoryState<T>,
    schedule: &GainSchedule,
    omega_vec: &[T],
    running_max_omega: T,
    dt: f64,
) -> Mat<T> {
    let up = state.upsilon.data();
    rk4_matrix(theta_hat, dt, |th, out| {
        adapt_rhs_into(
            th,
            state.omega,
            up,
            schedule,
            omega_vec,
            running_max_omega,
            out,
        );
    })
}

/// Sign convention for the instantaneous-data law.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BaselineSign {
    /// `θ̂̇ = −γΔ(y_θ − Δθ̂) = +γΔ²θ̃`.
    AsPrinted,
    /// `θ̂̇ = −γΔ(Δθ̂ − y_θ) = −γΔ²θ̃`.
    Corrected,
}

impl BaselineSign {
    pub fn label(self) -> &'static str {
        match self {
            BaselineSign::AsPrinted => "as_printed",
            BaselineSign::Corrected => "corrected",
        }
    }
}

pub fn baseline_rhs_into<T: Real>(
    theta_hat: &[T],
    delta: T,
    y_theta: &[T],
    gamma: T,
    sign: BaselineSign,
    out: &mut [T],
) {
    let g = gamma * delta;
    for ((d, &th), &y) in out.iter_mut().zip(theta_hat).zip(y_theta) {
        let innov = y - delta * th;
        *d = match sign {
            BaselineSign::AsPrinted => -g * innov,
            BaselineSign::Corrected => g * innov,
        };
    }
}

pub fn baseline_adapt_step<T: Real>(
    theta_hat: &Mat<T>,
    delta: T,
    y_theta: &Mat<T>,
    gamma: T,
    sign: BaselineSign,
    dt: f64,
) -> Mat<T> {
    let y = y_theta.data();
    rk4_matrix(theta_hat, dt, |th, out| {
        baseline_rhs_into(th, delta, y, gamma, sign, out)
    })
}

fn rk4_matrix<T: Real>(y0: &Mat<T>, dt: f64, mut f: impl FnMut(&[T], &mut [T])) -> Mat<T> {
    let h = T::lit(dt);
    let half = T::lit(0.5);
    let base = y0.data();
    let len = base.len();
    let mut k = [
        vec![T::zero(); len],
        vec![T::zero(); len],
        vec![T::zero(); len],
        vec![T::zero(); len],
    ];
    let offs = [T::zero(), half * h, half * h, h];
    for s in 0..4 {
        let y: Vec<T> = if s == 0 {
            base.to_vec()
        } else {
            base.iter()
                .zip(&k[s - 1])
                .map(|(&a, &b)| a + offs[s] * b)
                .collect()
        };
        f(&y, &mut k[s]);
    }
    let sixth = h / T::lit(6.0);
    let two = T::lit(2.0);
    let out = (0..len)
        .map(|i| base[i] + sixth * (k[0][i] + two * k[1][i] + two * k[2][i] + k[3][i]))
        .collect();
    Mat::new_unchecked(y0.rows(), y0.cols(), out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn zero_excitation_keeps_memory_zero() {
        let mut s = MemoryState::<f64>::new(6, 2, 0.5).unwrap();
        let y = Mat::zeros(6, 2);
        for _ in 0..100 {
            s = memory_step(&s, 0.0, &y, 0.01);
        }
        assert_eq!(s.omega, 0.0);
        assert_eq!(s.upsilon.max_abs(), 0.0);
    }

    #[test]
    fn constant_delta_squared_matches_closed_form() {
        // Δ² = c ⇒ Ω(t) = e^{−σt} c t
        let c: f64 = 2.5;
        let delta = c.sqrt();
        let mut s = MemoryState::<f64>::new(1, 1, 0.5).unwrap();
        let y = Mat::zeros(1, 1);
        let dt = 1e-3;
        for _ in 0..5000 {
            s = memory_step(&s, delta, &y, dt);
        }
        let exact = (-0.5f64 * 5.0).exp() * c * 5.0;
        assert!(((s.omega - exact) / exact).abs() <= 1e-6);
    }

    #[test]
    fn upsilon_tracks_omega_theta() {
        let theta = Mat::from_rows(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap();
        let mut s = MemoryState::<f64>::new(2, 2, 0.5).unwrap();
        for k in 0..2000 {
            let t = k as f64 * 1e-3;
            let delta = (3.0 * t).sin().powi(2);
            s = memory_step(&s, delta, &theta.scale(delta), 1e-3);
        }
        let err = (&s.upsilon - &theta.scale(s.omega)).max_abs();
        assert!(err <= 1e-14 * s.omega.max(1.0));
    }

    #[test]
    fn gain_examples() {
        let sch = GainSchedule::default();
        assert_eq!(gain(&sch, 0.0, &[1.0, 2.0], 0.0), 0.0);
        assert_eq!(gain(&sch, 1.0, &[0.0; 6], 1.0), 10.0);
        assert_eq!(gain(&sch, 2.0, &[3.0, 4.0, 0.0, 0.0, 0.0, 0.0], 2.0), 8.75);
    }

    #[test]
    fn threshold_is_relative_to_running_max() {
        let sch = GainSchedule::default();
        assert!(!sch.is_active(1e-13, 0.0));
        assert!(sch.is_active(2e-12, 0.0));
        assert!(!sch.is_active(1e-4, 1e9));
    }

    #[test]
    fn schedule_validation() {
        assert_eq!(
            GainSchedule::new(0.5, 10.0, 1e-12),
            Err(AdaptationError::Gamma0(0.5))
        );
        assert_eq!(
            GainSchedule::new(1.0, -1.0, 1e-12),
            Err(AdaptationError::Gamma1(-1.0))
        );
        assert!(GainSchedule::new(1.0, 0.0, 0.0).is_err());
        assert!(MemoryState::<f64>::new(1, 1, 0.0).is_err());
    }

    #[test]
    fn frozen_while_omega_is_zero() {
        let th = Mat::from_rows(&[vec![0.3], vec![1.0]]).unwrap();
        let mem = MemoryState::<f64>::new(2, 1, 0.5).unwrap();
        let next = adapt_step(&th, &mem, &GainSchedule::default(), &[1.0, 1.0], 0.0, 0.01);
        assert_eq!(next, th);
    }

    #[test]
    fn equilibrium_at_true_parameters() {
        let theta = Mat::from_rows(&[vec![0.3], vec![-1.0]]).unwrap();
        let mem = MemoryState {
            omega: 4.0,
            upsilon: theta.scale(4.0),
            sigma: 0.5,
            t: 1.0,
        };
        let next = adapt_step(
            &theta,
            &mem,
            &GainSchedule::default(),
            &[1.0, 2.0],
            4.0,
            0.01,
        );
        assert!((&next - &theta).max_abs() < 1e-15);
    }

    #[test]
    fn scalar_toy_closed_form() {
        // Ω = 1, Υ = θ = 2, γ = 1 (γ0‖ω‖² + γ1 = 1 with ω = 0, γ1 = 1)
        let sch = GainSchedule::new(1.0, 1.0, 1e-12).unwrap();
        let mem = MemoryState {
            omega: 1.0,
            upsilon: Mat::from_rows(&[vec![2.0]]).unwrap(),
            sigma: 0.5,
            t: 0.0,
        };
        assert_eq!(gain(&sch, 1.0, &[0.0], 1.0), 1.0);
        let mut th = Mat::zeros(1, 1);
        for _ in 0..1000 {
            th = adapt_step(&th, &mem, &sch, &[0.0], 1.0, 1e-3);
        }
        let exact = 2.0 * (1.0 - (-1.0f64).exp());
        assert!((th[(0, 0)] - exact).abs() <= 1e-6);
    }

    #[test]
    fn baseline_examples() {
        let th = Mat::from_rows(&[vec![0.7]]).unwrap();
        let y = Mat::from_rows(&[vec![5.0]]).unwrap();
        for sign in [BaselineSign::AsPrinted, BaselineSign::Corrected] {
            assert_eq!(baseline_adapt_step(&th, 0.0, &y, 1.0, sign, 0.01), th);
            let theta = Mat::from_rows(&[vec![2.0]]).unwrap();
            let eq = baseline_adapt_step(&theta, 3.0, &theta.scale(3.0), 1.0, sign, 0.01);
            assert!((&eq - &theta).max_abs() < 1e-15);
        }
    }

    /// With persistent Δ the corrected sign contracts `θ̃` and the printed
    /// sign expands it.
    #[test]
    fn baseline_sign_direction_on_scalar_toy() {
        let theta = 2.0;
        let run = |sign| {
            let mut th = Mat::zeros(1, 1);
            for k in 0..2000 {
                let t = k as f64 * 1e-3;
                let delta = 1.0 + 0.5 * (2.0 * t).sin();
                th = baseline_adapt_step(
                    &th,
                    delta,
                    &Mat::from_rows(&[vec![delta * theta]]).unwrap(),
                    1.0,
                    sign,
                    1e-3,
                );
            }
            (th[(0, 0)] - theta).abs()
        };
        assert!(run(BaselineSign::Corrected) < 0.2);
        assert!(run(BaselineSign::AsPrinted) > 2.0);
    }

    proptest! {
        #[test]
        fn omega_nonnegative_and_bounded(seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let mut s = MemoryState::<f64>::new(1, 1, 0.5).unwrap();
            let y = Mat::zeros(1, 1);
            // Ω ≤ sup Δ² · sup_t t e^{−σt} = sup Δ² / (σ e)
            let bound = 4.0 / (0.5 * std::f64::consts::E);
            for _ in 0..1000 {
                let d = rng.gen_range(-2.0..2.0);
                s = memory_step(&s, d, &y, 0.01);
                prop_assert!(s.omega >= 0.0);
                prop_assert!(s.omega <= bound * (1.0 + 1e-9));
            }
        }

        #[test]
        fn proposed_law_is_componentwise_monotone(th0 in prop::collection::vec(-5.0f64..5.0, 4), w in prop::collection::vec(-3.0f64..3.0, 3)) {
            let theta = Mat::new(2, 2, vec![1.0, -1.0, 0.5, 2.0]).unwrap();
            let mem = MemoryState { omega: 0.3, upsilon: theta.scale(0.3), sigma: 0.5, t: 0.0 };
            let sch = GainSchedule::default();
            let mut th = Mat::new(2, 2, th0).unwrap();
            let mut prev = (&th - &theta).data().to_vec();
            for _ in 0..50 {
                th = adapt_step(&th, &mem, &sch, &w, 0.3, 1e-3);
                let cur = (&th - &theta).data().to_vec();
                for (c, p) in cur.iter().zip(&prev) {
                    prop_assert!(c.abs() <= p.abs() + 1e-15);
                    prop_assert!(c * p >= 0.0);
                }
                prev = cur;
            }
        }
    }
}
