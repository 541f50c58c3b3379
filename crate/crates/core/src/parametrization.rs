//! Stable filters and the extended regression `z̄ = θ̄_ABᵀ φ̄`.
//!
//! `Φ = [xᵀ uᵀ]ᵀ` is passed through `1/(p + l)` to give `Φ̄`. The decaying
//! entry `e^{−lt}` of the regressor is carried as a filter state `ε` with
//! `ε̇ = −lε`, `ε(0) = 1`, so that the same integrator that produces `Φ̄`
//! produces it and the discrete regression identity holds to roundoff.

use thiserror::Error;

use crate::numeric::Real;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FilterError {
    #[error("filter constant l must be positive and finite, got {0}")]
    InvalidL(f64),
    #[error("known-x0 mode needs an initial state of length {expected}, got {found}")]
    MissingX0 { expected: usize, found: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterConfig {
    pub l: f64,
    pub x0_known: bool,
}

impl FilterConfig {
    pub fn new(l: f64, x0_known: bool) -> Result<Self, FilterError> {
        if !(l > 0.0 && l.is_finite()) {
            return Err(FilterError::InvalidL(l));
        }
        Ok(Self { l, x0_known })
    }

    /// Regressor length `q`.
    pub fn regressor_dim(&self, n: usize, m: usize) -> usize {
        n + m + usize::from(!self.x0_known)
    }
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            l: 1.0,
            x0_known: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FilterState<T: Real = f64> {
    pub phi_bar: Vec<T>,
    /// `ε(t) = e^{−lt}`.
    pub decay: T,
    pub t: f64,
    n: usize,
    x0: Option<Vec<T>>,
}

impl<T: Real> FilterState<T> {
    /// Zero filters at `t = 0`. `x0` is required in known-x0 mode and ignored otherwise.
    pub fn new(
        n: usize,
        m: usize,
        cfg: &FilterConfig,
        x0: Option<&[f64]>,
    ) -> Result<Self, FilterError> {
        let x0 = if cfg.x0_known {
            match x0 {
                Some(v) if v.len() == n => Some(v.iter().map(|&a| T::lit(a)).collect()),
                other => {
                    return Err(FilterError::MissingX0 {
                        expected: n,
                        found: other.map_or(0, <[f64]>::len),
                    })
                }
            }
        } else {
            None
        };
        Ok(Self {
            phi_bar: vec![T::zero(); n + m],
            decay: T::one(),
            t: 0.0,
            n,
            x0,
        })
    }

    /// `x̄ = [I 0] Φ̄`.
    pub fn x_bar(&self) -> &[T] {
        &self.phi_bar[..self.n]
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn known_x0(&self) -> Option<&[T]> {
        self.x0.as_deref()
    }
}

/// Right-hand side `(−lΦ̄ + Φ, −lε)`.
pub fn filter_rhs<T: Real>(l: T, phi_bar: &[T], decay: T, big_phi: &[T]) -> (Vec<T>, T) {
    let d = phi_bar
        .iter()
        .zip(big_phi)
        .map(|(&pb, &p)| p - l * pb)
        .collect();
    (d, -l * decay)
}

/// One RK4 step of the filter with `Φ` held over the step.
pub fn filter_step<T: Real>(
    state: &FilterState<T>,
    big_phi: &[T],
    dt: f64,
    cfg: &FilterConfig,
) -> FilterState<T> {
    assert_eq!(
        big_phi.len(),
        state.phi_bar.len(),
        "filter_step: input length"
    );
    let l = T::lit(cfg.l);
    let h = T::lit(dt);
    let half = T::lit(0.5);
    let axpy =
        |y: &[T], k: &[T], c: T| -> Vec<T> { y.iter().zip(k).map(|(&a, &b)| a + c * b).collect() };

    let (k1, e1) = filter_rhs(l, &state.phi_bar, state.decay, big_phi);
    let (k2, e2) = filter_rhs(
        l,
        &axpy(&state.phi_bar, &k1, half * h),
        state.decay + half * h * e1,
        big_phi,
    );
    let (k3, e3) = filter_rhs(
        l,
        &axpy(&state.phi_bar, &k2, half * h),
        state.decay + half * h * e2,
        big_phi,
    );
    let (k4, e4) = filter_rhs(
        l,
        &axpy(&state.phi_bar, &k3, h),
        state.decay + h * e3,
        big_phi,
    );

    let sixth = h / T::lit(6.0);
    let two = T::lit(2.0);
    let phi_bar = (0..k1.len())
        .map(|i| state.phi_bar[i] + sixth * (k1[i] + two * k2[i] + two * k3[i] + k4[i]))
        .collect();
    let decay = state.decay + sixth * (e1 + two * e2 + two * e3 + e4);
    FilterState {
        phi_bar,
        decay,
        t: state.t + dt,
        n: state.n,
        x0: state.x0.clone(),
    }
}

/// `z̄ = x − l x̄`, less `e^{−lt} x0` in known-x0 mode.
pub fn z_bar_from<T: Real>(x: &[T], x_bar: &[T], decay: T, l: T, known_x0: Option<&[T]>) -> Vec<T> {
    match known_x0 {
        Some(x0) => x
            .iter()
            .zip(x_bar)
            .zip(x0)
            .map(|((&xi, &xb), &x0i)| xi - l * xb - decay * x0i)
            .collect(),
        None => x.iter().zip(x_bar).map(|(&xi, &xb)| xi - l * xb).collect(),
    }
}

pub fn z_bar<T: Real>(state: &FilterState<T>, x: &[T], cfg: &FilterConfig) -> Vec<T> {
    assert_eq!(x.len(), state.n, "z_bar: state length");
    z_bar_from(
        x,
        state.x_bar(),
        state.decay,
        T::lit(cfg.l),
        state.known_x0(),
    )
}

/// `φ̄ = [Φ̄ᵀ e^{−lt}]ᵀ`, or `Φ̄` alone in known-x0 mode.
pub fn regressor_from<T: Real>(phi_bar: &[T], decay: T, x0_known: bool) -> Vec<T> {
    let mut v = phi_bar.to_vec();
    if !x0_known {
        v.push(decay);
    }
    v
}

pub fn extended_regressor<T: Real>(state: &FilterState<T>, cfg: &FilterConfig) -> Vec<T> {
    regressor_from(&state.phi_bar, state.decay, cfg.x0_known)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::matrix::Mat;
    use crate::plant::tests::aircraft;
    use proptest::prelude::*;

    fn run_constant(l: f64, c: &[f64], t_end: f64, dt: f64) -> FilterState<f64> {
        let cfg = FilterConfig::new(l, false).unwrap();
        let mut s = FilterState::new(c.len() - 1, 1, &cfg, None).unwrap();
        let steps = (t_end / dt).round() as usize;
        for _ in 0..steps {
            s = filter_step(&s, c, dt, &cfg);
        }
        s
    }

    #[test]
    fn zero_input_stays_zero() {
        let s = run_constant(1.0, &[0.0; 3], 1.0, 0.01);
        assert!(s.phi_bar.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn dc_gain_is_one_over_l() {
        let c = [1.0, -2.0, 0.5];
        let s = run_constant(1.0, &c, 40.0, 0.01);
        for (a, b) in s.phi_bar.iter().zip(c) {
            assert!((a - b).abs() < 1e-12);
        }
        let s = run_constant(2.0, &c, 30.0, 0.01);
        for (a, b) in s.phi_bar.iter().zip(c) {
            assert!((a - b / 2.0).abs() < 1e-12);
        }
    }

    #[test]
    fn step_response_matches_closed_form() {
        let s = run_constant(1.0, &[1.0, 0.0], 1.0, 1e-3);
        assert!((s.phi_bar[0] - (1.0 - (-1.0f64).exp())).abs() < 1e-13);
        assert!((s.decay - (-1.0f64).exp()).abs() < 1e-13);
    }

    #[test]
    fn decay_entry() {
        let cfg = FilterConfig::default();
        let s0 = FilterState::<f64>::new(4, 2, &cfg, None).unwrap();
        let phi = extended_regressor(&s0, &cfg);
        assert_eq!(phi.len(), 7);
        assert_eq!(phi[6], 1.0);

        let dt = 2f64.ln() / 1000.0;
        let mut s = s0;
        for _ in 0..1000 {
            s = filter_step(&s, &[0.0; 6], dt, &cfg);
        }
        assert!((extended_regressor(&s, &cfg)[6] - 0.5).abs() < 1e-14);

        let known = FilterConfig::new(1.0, true).unwrap();
        let sk = FilterState::<f64>::new(4, 2, &known, Some(&[1.0, 2.0, 3.0, 4.0])).unwrap();
        assert_eq!(extended_regressor(&sk, &known).len(), 6);
        assert_eq!(known.regressor_dim(4, 2), 6);
    }

    #[test]
    fn z_bar_at_start_and_on_zero_trajectory() {
        let cfg = FilterConfig::default();
        let s = FilterState::<f64>::new(4, 2, &cfg, None).unwrap();
        let x0 = [-1.0, -0.5, 0.0, 0.0];
        assert_eq!(z_bar(&s, &x0, &cfg), x0.to_vec());
        assert_eq!(z_bar(&s, &[0.0; 4], &cfg), vec![0.0; 4]);

        let known = FilterConfig::new(1.0, true).unwrap();
        let sk = FilterState::<f64>::new(4, 2, &known, Some(&x0)).unwrap();
        assert_eq!(z_bar(&sk, &x0, &known), vec![0.0; 4]);
    }

    #[test]
    fn config_validation() {
        assert!(FilterConfig::new(0.0, false).is_err());
        assert!(FilterConfig::new(f64::NAN, false).is_err());
        let known = FilterConfig::new(1.0, true).unwrap();
        assert_eq!(
            FilterState::<f64>::new(4, 2, &known, None).unwrap_err(),
            FilterError::MissingX0 {
                expected: 4,
                found: 0
            }
        );
    }

    /// Open-loop aircraft with a smooth input: the filtered regression
    /// `z̄ = [A B x0] φ̄` must hold along the trajectory to integrator accuracy.
    #[test]
    fn regression_identity_open_loop() {
        let (plant, _) = aircraft();
        let cfg = FilterConfig::default();
        let theta_bar: Mat<f64> = plant.theta_ab_bar(true);
        let dt = 1e-3;
        let mut x = plant.x0().to_vec();
        let mut fs = FilterState::<f64>::new(4, 2, &cfg, None).unwrap();
        let input = |t: f64| vec![0.1 * (3.0 * t).sin(), 0.05 * (1.0 - (-t).exp())];
        let mut worst: f64 = 0.0;
        for k in 0..3000 {
            let t = k as f64 * dt;
            // joint RK4 of plant and filter
            let rhs = |t: f64, x: &[f64], pb: &[f64], e: f64| {
                let u = input(t);
                let dx = plant.derivative(x, &u).unwrap();
                let big: Vec<f64> = x.iter().copied().chain(u).collect();
                let (dpb, de) = filter_rhs(1.0, pb, e, &big);
                (dx, dpb, de)
            };
            let add = |a: &[f64], b: &[f64], c: f64| {
                a.iter().zip(b).map(|(p, q)| p + c * q).collect::<Vec<_>>()
            };
            let (a1, b1, c1) = rhs(t, &x, &fs.phi_bar, fs.decay);
            let (a2, b2, c2) = rhs(
                t + dt / 2.0,
                &add(&x, &a1, dt / 2.0),
                &add(&fs.phi_bar, &b1, dt / 2.0),
                fs.decay + dt / 2.0 * c1,
            );
            let (a3, b3, c3) = rhs(
                t + dt / 2.0,
                &add(&x, &a2, dt / 2.0),
                &add(&fs.phi_bar, &b2, dt / 2.0),
                fs.decay + dt / 2.0 * c2,
            );
            let (a4, b4, c4) = rhs(
                t + dt,
                &add(&x, &a3, dt),
                &add(&fs.phi_bar, &b3, dt),
                fs.decay + dt * c3,
            );
            for i in 0..4 {
                x[i] += dt / 6.0 * (a1[i] + 2.0 * a2[i] + 2.0 * a3[i] + a4[i]);
            }
            for i in 0..6 {
                fs.phi_bar[i] += dt / 6.0 * (b1[i] + 2.0 * b2[i] + 2.0 * b3[i] + b4[i]);
            }
            fs.decay += dt / 6.0 * (c1 + 2.0 * c2 + 2.0 * c3 + c4);

            let zb = z_bar(&fs, &x, &cfg);
            let pb = extended_regressor(&fs, &cfg);
            let pred = theta_bar.tr_mul_vec(&pb).unwrap();
            let err: f64 = zb
                .iter()
                .zip(&pred)
                .map(|(a, b)| (a - b).powi(2))
                .sum::<f64>()
                .sqrt();
            let scale = 1.0 + pb.iter().map(|v| v * v).sum::<f64>().sqrt();
            worst = worst.max(err / scale);
        }
        assert!(worst < 1e-12, "worst regression residual {worst:e}");
    }

    proptest! {
        #[test]
        fn filter_output_bounded_by_input(l in 0.1f64..5.0, seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let cfg = FilterConfig::new(l, false).unwrap();
            let mut s = FilterState::<f64>::new(2, 1, &cfg, None).unwrap();
            let mut sup: f64 = 0.0;
            for _ in 0..400 {
                let p: Vec<f64> = (0..3).map(|_| rng.gen_range(-2.0..2.0)).collect();
                sup = sup.max(p.iter().map(|v| v * v).sum::<f64>().sqrt());
                s = filter_step(&s, &p, 0.01, &cfg);
                let nb = s.phi_bar.iter().map(|v| v * v).sum::<f64>().sqrt();
                prop_assert!(nb <= sup / l + 1e-12);
            }
        }
    }
}
