//! Forward SDE families with linear drift and their Gaussian transition
//! kernels `p_0t(x(t) | x(0)) = N(mu(t) x(0), sigma(t)^2 I)`.

use std::fmt;

use rand::Rng;

use crate::error::{Error, Result};
use crate::rng::normal_tensor;
use crate::tensor::Tensor;

pub const DEFAULT_EPSILON: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SdeKind {
    /// Variance exploding.
    Ve,
    /// Variance preserving.
    Vp,
    /// Sub-variance preserving.
    SubVp,
}

impl SdeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SdeKind::Ve => "ve",
            SdeKind::Vp => "vp",
            SdeKind::SubVp => "subvp",
        }
    }
}

impl fmt::Display for SdeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for SdeKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ve" => Ok(SdeKind::Ve),
            "vp" => Ok(SdeKind::Vp),
            "subvp" | "sub-vp" | "sub_vp" => Ok(SdeKind::SubVp),
            other => Err(Error::InvalidConfig(format!("unknown sde kind {other:?}"))),
        }
    }
}

/// One SDE family with its schedule, the uniform time grid size and the
/// time floor. Immutable once built.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SdeSpec {
    kind: SdeKind,
    /// `(sigma_min, sigma_max)` for VE, `(beta_min, beta_max)` otherwise.
    lo: f64,
    hi: f64,
    steps: usize,
    epsilon: f64,
}

impl SdeSpec {
    pub fn ve(sigma_min: f64, sigma_max: f64, steps: usize, epsilon: f64) -> Result<Self> {
        Self::new(SdeKind::Ve, sigma_min, sigma_max, steps, epsilon)
    }

    pub fn vp(beta_min: f64, beta_max: f64, steps: usize, epsilon: f64) -> Result<Self> {
        Self::new(SdeKind::Vp, beta_min, beta_max, steps, epsilon)
    }

    pub fn subvp(beta_min: f64, beta_max: f64, steps: usize, epsilon: f64) -> Result<Self> {
        Self::new(SdeKind::SubVp, beta_min, beta_max, steps, epsilon)
    }

    /// `lo`/`hi` are the sigma bounds for VE and the beta bounds for VP/sub-VP.
    pub fn new(kind: SdeKind, lo: f64, hi: f64, steps: usize, epsilon: f64) -> Result<Self> {
        let names = match kind {
            SdeKind::Ve => "sigma_min < sigma_max",
            _ => "beta_min < beta_max",
        };
        if !(lo > 0.0 && lo < hi && hi.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "{kind} schedule requires 0 < {names}, got ({lo}, {hi})"
            )));
        }
        if steps < 2 {
            return Err(Error::InvalidConfig(format!("steps must be >= 2, got {steps}")));
        }
        if !(epsilon > 0.0 && epsilon < 1.0 / steps as f64) {
            return Err(Error::InvalidConfig(format!(
                "epsilon must lie in (0, 1/steps), got {epsilon}"
            )));
        }
        Ok(Self {
            kind,
            lo,
            hi,
            steps,
            epsilon,
        })
    }

    /// The low-dimensional toy setup: VE with sigma in [0.1, 20].
    pub fn toy_ve(steps: usize) -> Self {
        Self::ve(0.1, 20.0, steps, DEFAULT_EPSILON).expect("valid toy schedule")
    }

    pub fn kind(&self) -> SdeKind {
        self.kind
    }

    pub fn schedule(&self) -> (f64, f64) {
        (self.lo, self.hi)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    /// Same schedule on a different grid size.
    pub fn with_steps(&self, steps: usize) -> Result<Self> {
        Self::new(self.kind, self.lo, self.hi, steps, self.epsilon)
    }

    fn check_time(&self, t: f64) -> Result<()> {
        if t > 0.0 && t <= 1.0 {
            Ok(())
        } else {
            Err(Error::TimeDomain { t, domain: "(0, 1]" })
        }
    }

    fn check_floor(&self, t: f64) -> Result<()> {
        // Grid times are computed as eps + k*(1-eps)/(S-1); allow for rounding.
        if t >= self.epsilon * (1.0 - 1e-12) && t <= 1.0 {
            Ok(())
        } else {
            Err(Error::TimeDomain {
                t,
                domain: "[epsilon, 1]",
            })
        }
    }

    /// VE noise scale `sigma_min (sigma_max / sigma_min)^t`.
    fn ve_sigma(&self, t: f64) -> f64 {
        self.lo * (self.hi / self.lo).powf(t)
    }

    fn beta(&self, t: f64) -> f64 {
        self.lo + t * (self.hi - self.lo)
    }

    /// Integral of beta over [0, t].
    fn beta_integral(&self, t: f64) -> f64 {
        self.lo * t + 0.5 * t * t * (self.hi - self.lo)
    }

    /// `(mu(t), sigma(t))` of the transition kernel.
    pub fn marginal_params(&self, t: f64) -> Result<(f64, f64)> {
        self.check_time(t)?;
        Ok(self.marginal_unchecked(t))
    }

    fn marginal_unchecked(&self, t: f64) -> (f64, f64) {
        match self.kind {
            // sigma(0) = 0 in the piecewise schedule, so the kernel variance is sigma(t)^2.
            SdeKind::Ve => (1.0, self.ve_sigma(t)),
            SdeKind::Vp => {
                let b = self.beta_integral(t);
                ((-0.5 * b).exp(), (-(-b).exp_m1()).sqrt())
            }
            SdeKind::SubVp => {
                let b = self.beta_integral(t);
                ((-0.5 * b).exp(), -(-b).exp_m1())
            }
        }
    }

    /// `(f(t), g(t))` with drift `f(t) x` and diffusion `g(t)`.
    pub fn drift_diffusion(&self, t: f64) -> Result<(f64, f64)> {
        self.check_time(t)?;
        Ok(self.drift_diffusion_unchecked(t))
    }

    fn drift_diffusion_unchecked(&self, t: f64) -> (f64, f64) {
        match self.kind {
            SdeKind::Ve => {
                let g = self.ve_sigma(t) * (2.0 * (self.hi / self.lo).ln()).sqrt();
                (0.0, g)
            }
            SdeKind::Vp => {
                let b = self.beta(t);
                (-0.5 * b, b.sqrt())
            }
            SdeKind::SubVp => {
                let b = self.beta(t);
                let disc = -(-2.0 * self.beta_integral(t)).exp_m1();
                (-0.5 * b, (b * disc).sqrt())
            }
        }
    }

    /// `x_t = mu(t) x0 + sigma(t) z`.
    pub fn perturb(&self, x0: &Tensor, t: f64, z: &Tensor) -> Result<Tensor> {
        let (mu, sigma) = self.marginal_params(t)?;
        x0.zip_map(z, |a, n| mu * a + sigma * n)
    }

    /// Inverse of [`SdeSpec::perturb`]: the noise that maps `x0` to `x_t`.
    pub fn noise_of(&self, x_t: &Tensor, x0: &Tensor, t: f64) -> Result<Tensor> {
        self.check_floor(t)?;
        let (mu, sigma) = self.marginal_unchecked(t);
        x_t.zip_map(x0, |x, a| (x - mu * a) / sigma)
    }

    /// Score of the transition kernel conditioned on `x0`,
    /// `-(x_t - mu x0) / sigma^2`, evaluated as `-z / sigma`.
    pub fn self_score(&self, x_t: &Tensor, x0: &Tensor, t: f64) -> Result<Tensor> {
        let z = self.noise_of(x_t, x0, t)?;
        let (_, sigma) = self.marginal_unchecked(t);
        Ok(self_score_from_noise(&z, sigma))
    }

    /// Variance jump at t = 0+. The VE schedule is discontinuous at zero
    /// (sigma(0) = 0 but sigma(0+) = sigma_min), which carries a point mass
    /// sigma_min^2 in d[sigma^2]/dt.
    pub fn initial_jump_variance(&self) -> f64 {
        match self.kind {
            SdeKind::Ve => self.lo * self.lo,
            _ => 0.0,
        }
    }

    /// Draw from the prior: `N(0, sigma_max^2 I)` for VE, `N(0, I)` otherwise.
    pub fn prior_sample<R: Rng + ?Sized>(&self, shape: &[usize], rng: &mut R) -> Tensor {
        let scale = match self.kind {
            SdeKind::Ve => self.hi,
            _ => 1.0,
        };
        normal_tensor(shape, rng).scale(scale)
    }

    /// `t_k = eps + k (1 - eps) / (S - 1)`, ascending.
    pub fn time_grid(&self) -> Vec<f64> {
        (0..self.steps).map(|k| self.grid_time(k)).collect()
    }

    pub fn grid_time(&self, k: usize) -> f64 {
        if k + 1 == self.steps {
            return 1.0;
        }
        self.epsilon + (k as f64 / (self.steps - 1) as f64) * (1.0 - self.epsilon)
    }

    /// Nearest grid index for a time in [eps, 1].
    pub fn grid_index(&self, t: f64) -> Result<usize> {
        self.check_floor(t)?;
        let k = ((t - self.epsilon) / (1.0 - self.epsilon) * (self.steps - 1) as f64).round();
        Ok((k.max(0.0) as usize).min(self.steps - 1))
    }

    /// Integrator step size: spacing between adjacent grid points.
    pub fn dt(&self) -> f64 {
        (1.0 - self.epsilon) / (self.steps - 1) as f64
    }
}

pub(crate) fn self_score_from_noise(z: &Tensor, sigma: f64) -> Tensor {
    z.map(|v| -v / sigma)
}

/// Euler-Maruyama simulation of the forward SDE from `x0` at t = 0 up to the
/// listed times using `n_steps` uniform steps on [0, 1]. Returns the state at
/// each requested time (each must be a multiple of `1 / n_steps`).
pub fn simulate_forward<R: Rng + ?Sized>(
    spec: &SdeSpec,
    x0: &Tensor,
    n_steps: usize,
    record_at: &[f64],
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    let dt = 1.0 / n_steps as f64;
    let mut record_idx = Vec::with_capacity(record_at.len());
    for &t in record_at {
        spec.check_time(t)?;
        let k = (t / dt).round() as usize;
        if ((k as f64) * dt - t).abs() > 1e-9 {
            return Err(Error::InvalidConfig(format!(
                "record time {t} is not on the {n_steps}-step grid"
            )));
        }
        record_idx.push(k);
    }
    let mut x = x0.clone();
    let jump = spec.initial_jump_variance().sqrt();
    if jump > 0.0 {
        let n = normal_tensor(x.shape(), rng);
        x = x.zip_map(&n, |a, b| a + jump * b)?;
    }
    let mut out = vec![Tensor::zeros(&[0]); record_at.len()];
    for k in 0..n_steps {
        let t = k as f64 * dt;
        // f and g are continuous on [0, 1]; evaluate at the left endpoint.
        let (f, g) = spec.drift_diffusion_unchecked(t);
        let scale = g * dt.sqrt();
        for v in x.data_mut() {
            let n: f64 = rng.sample(rand_distr::StandardNormal);
            *v += f * *v * dt + scale * n;
        }
        for (slot, &idx) in record_idx.iter().enumerate() {
            if idx == k + 1 {
                out[slot] = x.clone();
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    fn toy() -> SdeSpec {
        SdeSpec::toy_ve(100)
    }

    fn vp() -> SdeSpec {
        SdeSpec::vp(0.1, 20.0, 1000, DEFAULT_EPSILON).unwrap()
    }

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn rejects_bad_schedules() {
        assert!(SdeSpec::ve(20.0, 0.1, 100, 1e-5).is_err());
        assert!(SdeSpec::vp(0.0, 20.0, 100, 1e-5).is_err());
        assert!(SdeSpec::vp(0.1, 20.0, 1, 1e-5).is_err());
        assert!(SdeSpec::vp(0.1, 20.0, 100, 0.01).is_err());
        assert!(SdeSpec::vp(0.1, 20.0, 100, 0.0).is_err());
    }

    #[test]
    fn marginal_params_examples() {
        let (mu, s) = toy().marginal_params(1.0).unwrap();
        assert_eq!(mu, 1.0);
        assert!(close(s, 20.0, 1e-12));
        let (mu, s) = toy().marginal_params(0.5).unwrap();
        assert_eq!(mu, 1.0);
        assert!(close(s, std::f64::consts::SQRT_2, 1e-12));
        let (mu, s) = vp().marginal_params(0.5).unwrap();
        assert!(close(mu, 0.281_182_880_796_752_4, 1e-12));
        assert!(close(s, 0.959_654_202_068_036_3, 1e-12));
        let sub = SdeSpec::subvp(0.1, 20.0, 1000, DEFAULT_EPSILON).unwrap();
        let (_, s) = sub.marginal_params(0.5).unwrap();
        assert!(close(s, 0.920_936_187_546_839_4, 1e-12));
    }

    #[test]
    fn marginal_params_domain() {
        assert!(matches!(toy().marginal_params(0.0), Err(Error::TimeDomain { .. })));
        assert!(toy().marginal_params(1.0 + 1e-9).is_err());
        assert!(toy().marginal_params(-0.3).is_err());
    }

    #[test]
    fn drift_diffusion_examples() {
        for t in [0.01, 0.5, 1.0] {
            assert_eq!(toy().drift_diffusion(t).unwrap().0, 0.0);
        }
        let (_, g) = toy().drift_diffusion(0.5).unwrap();
        assert!(close(g, 4.603_614_826_002_73, 1e-10));
        assert!(close(g * g, 21.193_269_466_192_15, 1e-9));
        let (f, g) = vp().drift_diffusion(0.5).unwrap();
        assert!(close(f, -5.025, 1e-12));
        assert!(close(g, 3.170_173_496_829_471_5, 1e-12));
        assert!(toy().drift_diffusion(0.0).is_err());
    }

    #[test]
    fn perturb_examples() {
        let x0 = Tensor::vector(vec![1.0, -2.0]);
        let z = Tensor::vector(vec![0.5, 0.5]);
        let xt = toy().perturb(&x0, 0.5, &z).unwrap();
        assert!(close(xt[0], 1.707_106_781_186_547_5, 1e-12));
        assert!(close(xt[1], -1.292_893_218_813_452_5, 1e-12));

        let zero = Tensor::zeros(&[2]);
        let (mu, _) = vp().marginal_params(0.3).unwrap();
        assert_eq!(vp().perturb(&x0, 0.3, &zero).unwrap(), x0.scale(mu));

        let near = vp().perturb(&x0, DEFAULT_EPSILON, &z).unwrap();
        // sigma(eps) is about 1e-3 for this schedule.
        assert!((near[0] - 1.0).abs() < 2e-3 && (near[1] + 2.0).abs() < 2e-3);

        assert!(toy().perturb(&x0, 0.5, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn self_score_examples() {
        let x0 = Tensor::vector(vec![1.0, -2.0]);
        let z = Tensor::vector(vec![0.5, 0.5]);
        let xt = toy().perturb(&x0, 0.5, &z).unwrap();
        let s = toy().self_score(&xt, &x0, 0.5).unwrap();
        assert!(close(s[0], -0.353_553_390_593_273_73, 1e-12));
        assert!(close(s[1], -0.353_553_390_593_273_73, 1e-12));

        let on_mean = toy().self_score(&x0, &x0, 0.5).unwrap();
        assert!(on_mean.data().iter().all(|&v| v == 0.0));

        assert!(toy().self_score(&xt, &x0, 1e-7).is_err());
    }

    #[test]
    fn self_score_identity_over_kinds() {
        let mut rng = stream(3, &[]);
        for spec in [toy(), vp(), SdeSpec::subvp(0.1, 20.0, 1000, DEFAULT_EPSILON).unwrap()] {
            for &t in &[1e-3, 0.2, 0.7, 1.0] {
                let x0 = normal_tensor(&[5], &mut rng);
                let z = normal_tensor(&[5], &mut rng);
                let xt = spec.perturb(&x0, t, &z).unwrap();
                let s = spec.self_score(&xt, &x0, t).unwrap();
                let (_, sigma) = spec.marginal_params(t).unwrap();
                for i in 0..5 {
                    let want = -z[i] / sigma;
                    assert!((s[i] - want).abs() <= 1e-8 * want.abs().max(1.0), "{spec:?} t={t}");
                }
            }
        }
    }

    #[test]
    fn prior_statistics() {
        let mut rng = stream(11, &[]);
        let s = vp().prior_sample(&[100_000], &mut rng);
        let var = s.norm_sq() / s.len() as f64 - s.mean().powi(2);
        assert!((var - 1.0).abs() < 0.03);
        let s = toy().prior_sample(&[100_000], &mut rng);
        let sd = (s.norm_sq() / s.len() as f64 - s.mean().powi(2)).sqrt();
        assert!((sd - 20.0).abs() < 0.6);

        let a = toy().prior_sample(&[16], &mut stream(5, &[1]));
        let b = toy().prior_sample(&[16], &mut stream(5, &[1]));
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn time_grid_examples() {
        let two = SdeSpec::ve(0.1, 20.0, 2, 1e-5).unwrap().time_grid();
        assert_eq!(two, vec![1e-5, 1.0]);

        let g = SdeSpec::ve(0.1, 20.0, 1000, 1e-5).unwrap().time_grid();
        let h = g[1] - g[0];
        for w in g.windows(2) {
            assert!(((w[1] - w[0]) - h).abs() <= 4.0 * f64::EPSILON);
        }

        let big = SdeSpec::ve(0.1, 20.0, 2000, 1e-5).unwrap();
        assert!((big.grid_time(250) - 0.125_07).abs() < 1e-4);
        for k in [0, 1, 250, 1998, 1999] {
            assert_eq!(big.grid_index(big.grid_time(k)).unwrap(), k);
        }
    }

    #[test]
    fn monotone_schedules() {
        for spec in [toy(), vp(), SdeSpec::subvp(0.1, 20.0, 1000, DEFAULT_EPSILON).unwrap()] {
            let mut prev = (f64::INFINITY, 0.0);
            for k in 1..=10_000 {
                let t = k as f64 / 10_000.0;
                let (mu, s) = spec.marginal_params(t).unwrap();
                assert!(mu > 0.0 && mu <= 1.0);
                assert!(mu <= prev.0, "{spec:?} mu not non-increasing at {t}");
                assert!(s > prev.1, "{spec:?} sigma not increasing at {t}");
                prev = (mu, s);
            }
        }
    }

    #[test]
    fn ve_diffusion_matches_variance_derivative() {
        let spec = toy();
        let h = 1e-6;
        for &t in &[0.01, 0.25, 0.5, 0.9] {
            let var = |t: f64| spec.marginal_params(t).unwrap().1.powi(2);
            let fd = (var(t + h) - var(t - h)) / (2.0 * h);
            let g2 = spec.drift_diffusion(t).unwrap().1.powi(2);
            assert!((fd - g2).abs() / g2 < 1e-4);
        }
    }

    #[test]
    fn vp_family_variance_ode() {
        // d sigma^2/dt = 2 f sigma^2 + g^2 for linear-drift SDEs started at a point.
        let h = 1e-6;
        for spec in [vp(), SdeSpec::subvp(0.1, 20.0, 1000, DEFAULT_EPSILON).unwrap()] {
            for &t in &[0.05, 0.3, 0.8] {
                let var = |t: f64| spec.marginal_params(t).unwrap().1.powi(2);
                let fd = (var(t + h) - var(t - h)) / (2.0 * h);
                let (f, g) = spec.drift_diffusion(t).unwrap();
                let rhs = 2.0 * f * var(t) + g * g;
                assert!((fd - rhs).abs() / rhs.abs().max(1e-3) < 1e-4, "{spec:?} {t}");
            }
        }
    }
}
