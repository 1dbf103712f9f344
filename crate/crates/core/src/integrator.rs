//! Reverse-time Euler (probability flow ODE) and Euler-Maruyama (reverse SDE)
//! steps for a whole-score branch driven by the model and a self-score
//! branch driven by the known noise of the original sample.
//!
//! All steps evaluate drift, diffusion and score at the step-start state and
//! time, then apply every term at once.

use rand::Rng;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::ScoreModel;
use crate::rng::{self, normal_tensor};
use crate::sde::{self_score_from_noise, SdeSpec};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Mode {
    /// Probability flow ODE, `1/2 g^2` score coefficient, no noise.
    #[default]
    Ode,
    /// Reverse SDE, `g^2` score coefficient plus `g sqrt(dt) n`.
    Sde,
}

impl std::str::FromStr for Mode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "ode" => Ok(Mode::Ode),
            "sde" => Ok(Mode::Sde),
            other => Err(Error::InvalidConfig(format!(
                "unknown sampler {other:?} (expected ode or sde)"
            ))),
        }
    }
}

impl std::fmt::Display for Mode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Mode::Ode => "ode",
            Mode::Sde => "sde",
        })
    }
}

/// The shared update rule: `x - f x dt + c g^2 s dt (+ g sqrt(dt) n)`.
fn update(
    spec: &SdeSpec,
    x: &Tensor,
    score: &Tensor,
    t: f64,
    dt: f64,
    mode: Mode,
    n: Option<&Tensor>,
) -> Result<Tensor> {
    if !(dt > 0.0) {
        return Err(Error::InvalidConfig(format!("step size must be positive, got {dt}")));
    }
    let (f, g) = spec.drift_diffusion(t)?;
    let g2 = g * g;
    match mode {
        Mode::Ode => x.zip_map(score, |x, s| x - f * x * dt + 0.5 * g2 * s * dt),
        Mode::Sde => {
            let n = n.ok_or_else(|| Error::InvalidConfig("reverse SDE step needs a noise draw".into()))?;
            let drifted = x.zip_map(score, |x, s| x - f * x * dt + g2 * s * dt)?;
            let sd = g * dt.sqrt();
            drifted.zip_map(n, |a, n| a + sd * n)
        }
    }
}

/// One probability-flow step of the whole-score branch from `t` to `t - dt`.
pub fn flow_ode_step_whole<M: ScoreModel + ?Sized>(
    spec: &SdeSpec,
    model: &M,
    x: &Tensor,
    t: f64,
    dt: f64,
) -> Result<Tensor> {
    let s = model.score(x, t)?;
    update(spec, x, &s, t, dt, Mode::Ode, None)
}

/// One reverse-SDE step of the whole-score branch with noise draw `n`.
pub fn reverse_sde_step_whole<M: ScoreModel + ?Sized>(
    spec: &SdeSpec,
    model: &M,
    x: &Tensor,
    t: f64,
    dt: f64,
    n: &Tensor,
) -> Result<Tensor> {
    let s = model.score(x, t)?;
    update(spec, x, &s, t, dt, Mode::Sde, Some(n))
}

/// One self-score step from `t` to `t_next`, using `-z / sigma(t)` as the
/// score, followed by the noise update
/// `z_next = (x_next - mu(t_next) x0) / sigma(t_next)`. Costs no NFE.
#[allow(clippy::too_many_arguments)]
pub fn self_step(
    spec: &SdeSpec,
    x_self: &Tensor,
    x0: &Tensor,
    z: &Tensor,
    t: f64,
    t_next: f64,
    mode: Mode,
    n: Option<&Tensor>,
) -> Result<(Tensor, Tensor)> {
    let (_, sigma) = spec.marginal_params(t)?;
    let s = self_score_from_noise(z, sigma);
    let next = update(spec, x_self, &s, t, t - t_next, mode, n)?;
    let z_next = spec.noise_of(&next, x0, t_next)?;
    Ok((next, z_next))
}

/// Coupled whole-score / self-score trajectories started from the same
/// noised sample.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryPair {
    pub x_whole: Tensor,
    pub x_self: Tensor,
    pub z: Tensor,
    pub x0_ref: Tensor,
    /// Grid index of the current time.
    pub index: usize,
    pub t: f64,
    /// Score-model evaluations so far.
    pub nfe: u64,
    /// Noise draws used by reverse-SDE steps, when recording is enabled.
    pub noise_log: Option<Vec<Tensor>>,
}

impl TrajectoryPair {
    /// Both branches start at `perturb(x0, t_k, z)`. The stored noise is
    /// recomputed from that state so that the self-score equals the
    /// conditional score of the state bit-for-bit.
    pub fn new(spec: &SdeSpec, x0: &Tensor, index: usize, z: &Tensor) -> Result<Self> {
        if index >= spec.steps() {
            return Err(Error::GridUnderrun { start: index, steps: 0 });
        }
        let t = spec.grid_time(index);
        let x = spec.perturb(x0, t, z)?;
        let z = spec.noise_of(&x, x0, t)?;
        Ok(Self {
            x_whole: x.clone(),
            x_self: x,
            z,
            x0_ref: x0.clone(),
            index,
            t,
            nfe: 0,
            noise_log: None,
        })
    }

    pub fn record_noise(mut self) -> Self {
        self.noise_log = Some(Vec::new());
        self
    }

    /// Advance both branches one grid step with a shared noise draw.
    pub fn step<M: ScoreModel + ?Sized>(
        &mut self,
        spec: &SdeSpec,
        model: &M,
        mode: Mode,
        n: Option<&Tensor>,
    ) -> Result<()> {
        if self.index == 0 {
            return Err(Error::GridUnderrun { start: 0, steps: 1 });
        }
        let t = self.t;
        let t_next = spec.grid_time(self.index - 1);
        let dt = t - t_next;
        let s = model.score(&self.x_whole, t)?;
        self.nfe += 1;
        let whole = update(spec, &self.x_whole, &s, t, dt, mode, n)?;
        let (x_self, z) = self_step(spec, &self.x_self, &self.x0_ref, &self.z, t, t_next, mode, n)?;
        if !whole.is_finite() || !x_self.is_finite() || !z.is_finite() {
            return Err(Error::Divergence {
                step: spec.steps() - 1 - self.index,
                t,
            });
        }
        self.x_whole = whole;
        self.x_self = x_self;
        self.z = z;
        self.index -= 1;
        self.t = t_next;
        if let (Some(log), Some(n)) = (self.noise_log.as_mut(), n) {
            log.push(n.clone());
        }
        Ok(())
    }
}

/// Start a pair at grid index `start` and advance it `r` coupled steps.
/// `z` and the per-step noise come from `rng`, in that order.
pub fn run_pair<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    spec: &SdeSpec,
    model: &M,
    x0: &Tensor,
    start: usize,
    r: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<TrajectoryPair> {
    run_pair_with(spec, model, x0, start, r, mode, rng, |_| {})
}

/// [`run_pair`] with a callback on the initial state and after every step.
#[allow(clippy::too_many_arguments)]
pub fn run_pair_with<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    spec: &SdeSpec,
    model: &M,
    x0: &Tensor,
    start: usize,
    r: usize,
    mode: Mode,
    rng: &mut R,
    mut on_state: impl FnMut(&TrajectoryPair),
) -> Result<TrajectoryPair> {
    if r > start || start >= spec.steps() {
        return Err(Error::GridUnderrun { start, steps: r });
    }
    let z = normal_tensor(x0.shape(), rng);
    let mut pair = TrajectoryPair::new(spec, x0, start, &z)?;
    on_state(&pair);
    for _ in 0..r {
        let n = match mode {
            Mode::Sde => Some(normal_tensor(x0.shape(), rng)),
            Mode::Ode => None,
        };
        pair.step(spec, model, mode, n.as_ref())?;
        on_state(&pair);
    }
    Ok(pair)
}

/// Integrate the whole-score branch alone from grid index `start` down to
/// index 0 (`t = eps`). Returns the final state and the NFE.
fn integrate_whole<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    spec: &SdeSpec,
    model: &M,
    mut x: Tensor,
    start: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor, u64)> {
    let mut nfe = 0;
    for k in (1..=start).rev() {
        let t = spec.grid_time(k);
        let dt = t - spec.grid_time(k - 1);
        let s = model.score(&x, t)?;
        nfe += 1;
        let n = match mode {
            Mode::Sde => Some(normal_tensor(x.shape(), rng)),
            Mode::Ode => None,
        };
        x = update(spec, &x, &s, t, dt, mode, n.as_ref())?;
        if !x.is_finite() {
            return Err(Error::Divergence { step: start - k, t });
        }
    }
    Ok((x, nfe))
}

/// Draw from the prior at `t = 1` and integrate over the whole grid to
/// `t = eps`. Uses `S - 1` score evaluations.
pub fn generate<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    spec: &SdeSpec,
    model: &M,
    shape: &[usize],
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor, u64)> {
    let x = spec.prior_sample(shape, rng);
    integrate_whole(spec, model, x, spec.steps() - 1, mode, rng)
}

/// `n` independent samples, sample `i` drawn from stream `(seed, i)`.
pub fn generate_many<M: ScoreModel + ?Sized>(
    spec: &SdeSpec,
    model: &M,
    shape: &[usize],
    n: usize,
    mode: Mode,
    seed: u64,
    exec: Exec,
) -> Result<(Vec<Tensor>, u64)> {
    let out = exec.try_map(n, |i| {
        generate(spec, model, shape, mode, &mut rng::stream(seed, &[0x6E, i as u64]))
    })?;
    let nfe = out.iter().map(|(_, n)| n).sum();
    Ok((out.into_iter().map(|(x, _)| x).collect(), nfe))
}

/// Noise `x0` to grid index `start`, then integrate the whole-score branch
/// back to `t = eps`.
pub fn reconstruct<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    spec: &SdeSpec,
    model: &M,
    x0: &Tensor,
    start: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<(Tensor, u64)> {
    if start >= spec.steps() {
        return Err(Error::GridUnderrun { start, steps: start });
    }
    let z = normal_tensor(x0.shape(), rng);
    let x = spec.perturb(x0, spec.grid_time(start), &z)?;
    integrate_whole(spec, model, x, start, mode, rng)
}

/// One row group of the trajectory export.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub step: usize,
    pub t: f64,
    pub x_whole: Tensor,
    pub x_self: Tensor,
}

/// Run a pair from `start` all the way to `t = eps`, recording every state.
pub fn record_pair<M: ScoreModel + ?Sized, R: Rng + ?Sized>(
    spec: &SdeSpec,
    model: &M,
    x0: &Tensor,
    start: usize,
    mode: Mode,
    rng: &mut R,
) -> Result<(TrajectoryPair, Vec<TrajectoryRecord>)> {
    let mut records = Vec::with_capacity(start + 1);
    let pair = run_pair_with(spec, model, x0, start, start, mode, rng, |p| {
        records.push(TrajectoryRecord {
            step: start - p.index,
            t: p.t,
            x_whole: p.x_whole.clone(),
            x_self: p.x_self.clone(),
        })
    })?;
    Ok((pair, records))
}

/// CSV with header `branch,step,t,coord0,coord1`. Missing coordinates are
/// left empty for one-dimensional states.
pub fn format_trajectory_csv(records: &[TrajectoryRecord]) -> String {
    let mut out = String::from("branch,step,t,coord0,coord1\n");
    for (branch, pick) in [("whole", 0), ("self", 1)] {
        for r in records {
            let x = if pick == 0 { &r.x_whole } else { &r.x_self };
            let c0 = x.data().first().map(|v| format!("{v:?}")).unwrap_or_default();
            let c1 = x.data().get(1).map(|v| format!("{v:?}")).unwrap_or_default();
            out.push_str(&format!("{branch},{},{:?},{c0},{c1}\n", r.step, r.t));
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{CountingModel, MixtureScore, SelfScoreStub, ZeroScore};
    use crate::oracle::GaussianMixture;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn oracle(spec: SdeSpec) -> MixtureScore {
        MixtureScore {
            mixture: GaussianMixture::toy(),
            spec,
        }
    }

    #[test]
    fn ode_step_examples() {
        let ve = SdeSpec::toy_ve(100);
        let x = Tensor::vector(vec![0.0, 0.0]);
        let same = flow_ode_step_whole(&ve, &ZeroScore, &Tensor::vector(vec![1.5, -2.0]), 0.5, 0.01).unwrap();
        assert_eq!(same.data(), &[1.5, -2.0]);

        let next = flow_ode_step_whole(&ve, &oracle(ve), &x, 0.5, 0.01).unwrap();
        let expected = 0.5 * 21.193_269_466_192_15 * 0.01;
        assert!(
            close(next[0], expected, 1e-6) && close(next[1], expected, 1e-6),
            "{next:?}"
        );
        assert!(close(next[0], 0.10597, 5e-6));

        let vp = SdeSpec::vp(0.1, 20.0, 1000, 1e-5).unwrap();
        let moved = flow_ode_step_whole(&vp, &ZeroScore, &Tensor::vector(vec![1.0, 0.0]), 0.5, 0.01).unwrap();
        assert!(close(moved[0], 1.05025, 1e-12) && moved[1] == 0.0);
    }

    #[test]
    fn sde_step_examples() {
        let ve = SdeSpec::toy_ve(100);
        let zero = Tensor::zeros(&[2]);
        let x = Tensor::vector(vec![0.7, 0.1]);
        assert_eq!(
            reverse_sde_step_whole(&ve, &ZeroScore, &x, 0.5, 0.01, &zero).unwrap(),
            x
        );
        let next = reverse_sde_step_whole(&ve, &oracle(ve), &zero, 0.5, 0.01, &zero).unwrap();
        assert!(close(next[0], 0.21193, 5e-6) && close(next[1], 0.21193, 5e-6));

        // The noise enters as g sqrt(dt) n on top of the drift.
        let n = Tensor::vector(vec![1.0, -1.0]);
        let a = reverse_sde_step_whole(&ve, &ZeroScore, &x, 0.5, 0.01, &n).unwrap();
        let (_, g) = ve.drift_diffusion(0.5).unwrap();
        assert!(close(a[0] - 0.7, g * 0.1, 1e-12) && close(a[1] - 0.1, -g * 0.1, 1e-12));
    }

    #[test]
    fn self_step_examples() {
        let ve = SdeSpec::toy_ve(100);
        let x0 = Tensor::vector(vec![1.0, 2.0]);
        let xs = Tensor::vector(vec![1.3, 1.9]);
        let (t, tn) = (0.5, 0.49);
        let (next, z) = self_step(&ve, &xs, &x0, &Tensor::zeros(&[2]), t, tn, Mode::Ode, None).unwrap();
        assert_eq!(next, xs);
        let (_, sn) = ve.marginal_params(tn).unwrap();
        assert!(close(z[0], 0.3 / sn, 1e-12) && close(z[1], -0.1 / sn, 1e-12));

        // From x = x0 + sigma z, one Euler step gives z (sigma - sigma' dt) / sigma_next.
        let z0 = Tensor::vector(vec![0.4, -1.2]);
        let xs = ve.perturb(&x0, t, &z0).unwrap();
        let (_, zn) = self_step(&ve, &xs, &x0, &z0, t, tn, Mode::Ode, None).unwrap();
        let (_, s) = ve.marginal_params(t).unwrap();
        let (_, g) = ve.drift_diffusion(t).unwrap();
        // sigma' = g^2 / (2 sigma) for VE.
        let factor = (s - g * g / (2.0 * s) * (t - tn)) / sn;
        assert!(close(zn[0], 0.4 * factor, 1e-10) && close(zn[1], -1.2 * factor, 1e-10));
        assert!(close(factor, 1.0, 0.01));

        assert!(self_step(&ve, &xs, &x0, &z0, t, 0.0, Mode::Ode, None).is_err());
    }

    /// Distance of the self branch at `t = eps` from the exact end point of
    /// the conditional flow, `perturb(x0, eps, z)`.
    fn self_error(spec: &SdeSpec, start_t: f64, seed: u64) -> f64 {
        let x0 = Tensor::vector(vec![5.17, 5.2]);
        let start = spec.grid_index(start_t).unwrap();
        let z = normal_tensor(&[2], &mut rng::stream(seed, &[]));
        let mut pair = TrajectoryPair::new(spec, &x0, start, &z).unwrap();
        for _ in 0..start {
            pair.step(spec, &ZeroScore, Mode::Ode, None).unwrap();
        }
        let exact = spec.perturb(&x0, spec.epsilon(), &z).unwrap();
        pair.x_self.zip_map(&exact, |a, b| a - b).unwrap().norm()
    }

    #[test]
    fn self_ode_path_converges_first_order_for_ve() {
        let ve = SdeSpec::toy_ve(100);
        let e100 = self_error(&ve, 0.6, 3);
        assert!(e100 < 0.05, "{e100}");
        let e200 = self_error(&ve.with_steps(199).unwrap(), 0.6, 3);
        let ratio = e100 / e200;
        assert!((ratio - 2.0).abs() < 0.5, "ratio {ratio}");
    }

    #[test]
    fn stub_branches_are_bit_equal() {
        for spec in [
            SdeSpec::toy_ve(50),
            SdeSpec::vp(0.1, 20.0, 50, 1e-5).unwrap(),
            SdeSpec::subvp(0.1, 20.0, 50, 1e-5).unwrap(),
        ] {
            for mode in [Mode::Ode, Mode::Sde] {
                let x0 = Tensor::vector(vec![-6.0, 5.0]);
                let stub = SelfScoreStub { spec, x0: x0.clone() };
                run_pair_with(&spec, &stub, &x0, 40, 40, mode, &mut rng::stream(4, &[]), |p| {
                    assert!(p.x_whole.bit_eq(&p.x_self), "{:?} {mode} at {}", spec.kind(), p.index);
                })
                .unwrap();
            }
        }
    }

    #[test]
    fn nfe_accounting() {
        let spec = SdeSpec::toy_ve(100);
        let counted = CountingModel::new(oracle(spec));
        let x0 = Tensor::vector(vec![1.0, 1.0]);
        let pair = run_pair(&spec, &counted, &x0, 60, 1, Mode::Ode, &mut rng::stream(1, &[])).unwrap();
        assert_eq!((pair.nfe, counted.calls()), (1, 1));
        let pair = run_pair(&spec, &counted, &x0, 60, 7, Mode::Sde, &mut rng::stream(1, &[])).unwrap();
        assert_eq!(pair.nfe, 7);
        let (_, nfe) = generate(&spec, &counted, &[2], Mode::Ode, &mut rng::stream(2, &[])).unwrap();
        assert_eq!(nfe, 99);
        assert_eq!(counted.calls(), 1 + 7 + 99);
        assert!(matches!(
            run_pair(&spec, &counted, &x0, 5, 6, Mode::Ode, &mut rng::stream(1, &[])),
            Err(Error::GridUnderrun { start: 5, steps: 6 })
        ));
    }

    #[test]
    fn noise_log_records_shared_draws() {
        let spec = SdeSpec::toy_ve(100);
        let x0 = Tensor::vector(vec![1.0, 1.0]);
        let mut pair = TrajectoryPair::new(&spec, &x0, 10, &Tensor::zeros(&[2]))
            .unwrap()
            .record_noise();
        let n = Tensor::vector(vec![0.3, 0.1]);
        pair.step(&spec, &ZeroScore, Mode::Sde, Some(&n)).unwrap();
        assert_eq!(pair.noise_log.as_ref().unwrap(), &vec![n]);
    }

    #[test]
    fn anomaly_moves_up_in_density_and_self_stays() {
        let spec = SdeSpec::toy_ve(100);
        let mix = GaussianMixture::toy();
        let x0 = Tensor::vector(vec![-6.0, 5.0]);
        let start = spec.grid_index(0.6).unwrap();
        let z = normal_tensor(&[2], &mut rng::stream(0, &[]));
        let mut pair = TrajectoryPair::new(&spec, &x0, start, &z).unwrap();
        for _ in 0..start {
            pair.step(&spec, &oracle(spec), Mode::Ode, None).unwrap();
        }
        let logp = |x: &Tensor| mix.marginal_log_density(&spec, x, spec.epsilon()).unwrap();
        assert!(logp(&pair.x_whole) > logp(&x0) + 5.0);
        let exact = spec.perturb(&x0, spec.epsilon(), &z).unwrap();
        assert!(pair.x_self.zip_map(&exact, |a, b| a - b).unwrap().norm() < 0.05);
    }

    #[test]
    fn generate_is_deterministic() {
        let spec = SdeSpec::toy_ve(50);
        let a = generate_many(&spec, &oracle(spec), &[2], 5, Mode::Ode, 9, Exec::Sequential).unwrap();
        let b = generate_many(&spec, &oracle(spec), &[2], 5, Mode::Ode, 9, Exec::default()).unwrap();
        assert!(a.0.iter().zip(&b.0).all(|(x, y)| x.bit_eq(y)));
        assert_eq!(a.1, 5 * 49);
    }

    #[test]
    fn reconstruct_small_noise_is_identity() {
        let spec = SdeSpec::toy_ve(100);
        let x0 = Tensor::vector(vec![5.17, 5.2]);
        let (x, nfe) = reconstruct(&spec, &oracle(spec), &x0, 0, Mode::Ode, &mut rng::stream(1, &[])).unwrap();
        assert_eq!(nfe, 0);
        assert!(x.zip_map(&x0, |a, b| a - b).unwrap().norm() < 1e-2 * x0.norm());
        let (x, _) = reconstruct(&spec, &oracle(spec), &x0, 1, Mode::Ode, &mut rng::stream(1, &[])).unwrap();
        assert!(x.zip_map(&x0, |a, b| a - b).unwrap().norm() < 1e-2 * x0.norm());
    }

    #[test]
    fn trajectory_csv_layout() {
        let spec = SdeSpec::toy_ve(10);
        let x0 = Tensor::vector(vec![1.0, 2.0]);
        let (_, rec) = record_pair(&spec, &ZeroScore, &x0, 3, Mode::Ode, &mut rng::stream(1, &[])).unwrap();
        assert_eq!(rec.len(), 4);
        let csv = format_trajectory_csv(&rec);
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "branch,step,t,coord0,coord1");
        assert_eq!(lines.len(), 9);
        assert!(lines[1].starts_with("whole,0,"));
        assert!(lines[5].starts_with("self,0,"));
    }
}
