//! Denoising score matching with Adam.

use rand::Rng;

use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::ScoreNet;
use crate::rng;
use crate::sde::SdeSpec;
use crate::tensor::Tensor;

/// Per-time weighting of the squared score residual.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Weighting {
    /// `lambda(t) = sigma(t)^2`: the residual measured in noise units.
    #[default]
    SigmaSquared,
    /// `lambda(t) = 1`.
    Unit,
}

impl Weighting {
    fn lambda(self, sigma: f64) -> f64 {
        match self {
            Weighting::SigmaSquared => sigma * sigma,
            Weighting::Unit => 1.0,
        }
    }
}

impl std::str::FromStr for Weighting {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sigma2" | "sigma_squared" => Ok(Weighting::SigmaSquared),
            "unit" | "one" => Ok(Weighting::Unit),
            other => Err(Error::InvalidConfig(format!("unknown weighting {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch: usize,
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weighting: Weighting,
    pub seed: u64,
    /// Call the checkpoint hook every this many steps; 0 disables it.
    pub checkpoint_every: usize,
    /// Warn when the mean loss over the final steps stays above this value.
    pub warn_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch: 128,
            steps: 20_000,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weighting: Weighting::SigmaSquared,
            seed: 0,
            checkpoint_every: 0,
            warn_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::InvalidConfig("train.batch must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!(
                "train.lr must be positive, got {}",
                self.lr
            )));
        }
        if !(0.0 < self.beta1 && self.beta1 < self.beta2 && self.beta2 < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "need 0 < beta1 < beta2 < 1, got ({}, {})",
                self.beta1, self.beta2
            )));
        }
        if !(self.adam_eps > 0.0) {
            return Err(Error::InvalidConfig("adam epsilon must be positive".into()));
        }
        Ok(())
    }
}

/// One Monte Carlo draw of the objective: the time and the injected noise.
#[derive(Debug, Clone)]
pub struct DsmDraw {
    pub t: f64,
    pub z: Tensor,
}

/// Draw `t ~ U[eps, 1]` and `z ~ N(0, I)` for every sample, in order.
pub fn draw_noise<R: Rng + ?Sized>(spec: &SdeSpec, batch: &[Tensor], rng: &mut R) -> Vec<DsmDraw> {
    batch
        .iter()
        .map(|x0| {
            let t = rng.gen_range(spec.epsilon()..=1.0);
            let z = rng::normal_tensor(x0.shape(), rng);
            DsmDraw { t, z }
        })
        .collect()
}

/// Loss of an arbitrary score function on fixed draws. `score(i, x_t, t)`
/// evaluates the model for batch item `i`.
pub fn dsm_loss_with(
    spec: &SdeSpec,
    batch: &[Tensor],
    draws: &[DsmDraw],
    weighting: Weighting,
    score: impl Fn(usize, &Tensor, f64) -> Result<Tensor>,
) -> Result<f64> {
    if batch.is_empty() || batch.len() != draws.len() {
        return Err(Error::InvalidConfig(
            "loss needs a non-empty batch with one draw per sample".into(),
        ));
    }
    let mut total = 0.0;
    for (i, (x0, d)) in batch.iter().zip(draws).enumerate() {
        let (_, sigma) = spec.marginal_params(d.t)?;
        let xt = spec.perturb(x0, d.t, &d.z)?;
        let s = score(i, &xt, d.t)?;
        let r = s.zip_map(&d.z, |s, z| s + z / sigma)?;
        total += 0.5 * weighting.lambda(sigma) * r.norm_sq();
    }
    Ok(total / batch.len() as f64)
}

/// Samples per gradient chunk. Chunking is fixed so the reduction order, and
/// hence the result, does not depend on the thread count.
const CHUNK: usize = 16;

/// Mean loss and its exact parameter gradient on fixed draws.
pub fn dsm_loss_grad(
    net: &ScoreNet,
    spec: &SdeSpec,
    batch: &[Tensor],
    draws: &[DsmDraw],
    weighting: Weighting,
    exec: Exec,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() || batch.len() != draws.len() {
        return Err(Error::InvalidConfig(
            "loss needs a non-empty batch with one draw per sample".into(),
        ));
    }
    let n = batch.len();
    let inv_n = 1.0 / n as f64;
    let chunks = n.div_ceil(CHUNK);
    let parts = exec.try_map(chunks, |c| -> Result<(f64, Vec<f64>)> {
        let mut grad = vec![0.0; net.params().len()];
        let mut loss = 0.0;
        for i in c * CHUNK..((c + 1) * CHUNK).min(n) {
            let d = &draws[i];
            let (_, sigma) = spec.marginal_params(d.t)?;
            let lambda = weighting.lambda(sigma);
            let xt = spec.perturb(&batch[i], d.t, &d.z)?;
            let mut residual = None;
            net.forward_backward(
                &xt,
                d.t,
                |s| {
                    let r = s.zip_map(&d.z, |s, z| s + z / sigma).expect("same shape");
                    let u = r.scale(lambda * inv_n);
                    residual = Some(r);
                    u
                },
                &mut grad,
            )?;
            loss += 0.5 * lambda * residual.expect("upstream ran").norm_sq();
        }
        Ok((loss, grad))
    })?;
    let mut grad = vec![0.0; net.params().len()];
    let mut loss = 0.0;
    for (l, g) in parts {
        loss += l;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss * inv_n, grad))
}

/// Draw noise from `rng`, then return the mean loss and its gradient.
pub fn dsm_loss<R: Rng + ?Sized>(
    net: &ScoreNet,
    spec: &SdeSpec,
    batch: &[Tensor],
    weighting: Weighting,
    rng: &mut R,
) -> Result<(f64, Vec<f64>)> {
    let draws = draw_noise(spec, batch, rng);
    dsm_loss_grad(net, spec, batch, &draws, weighting, Exec::default())
}

/// Adam moments.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    /// One bias-corrected update of `params` in place.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(Error::ShapeMismatch {
                expected: vec![self.m.len()],
                got: vec![params.len(), grads.len()],
            });
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for i in 0..params.len() {
            let g = grads[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let m_hat = self.m[i] / c1;
            let v_hat = self.v[i] / c2;
            params[i] -= lr * m_hat / (v_hat.sqrt() + self.eps);
        }
        Ok(())
    }
}

/// Train with no checkpoint hook.
pub fn train(net: ScoreNet, spec: &SdeSpec, dataset: &[Tensor], cfg: &TrainConfig) -> Result<(ScoreNet, Vec<f64>)> {
    train_with(net, spec, dataset, cfg, Exec::default(), |_, _| Ok(()))
}

/// Run `cfg.steps` Adam steps on minibatches drawn with replacement.
///
/// Step `k` uses its own RNG stream, so the loss trace is a pure function of
/// the seed. `on_checkpoint(step, net)` runs every `cfg.checkpoint_every`
/// steps (1-based step count).
pub fn train_with(
    mut net: ScoreNet,
    spec: &SdeSpec,
    dataset: &[Tensor],
    cfg: &TrainConfig,
    exec: Exec,
    mut on_checkpoint: impl FnMut(usize, &ScoreNet) -> Result<()>,
) -> Result<(ScoreNet, Vec<f64>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidConfig("training set is empty".into()));
    }
    let mut adam = Adam::new(net.params().len(), cfg.beta1, cfg.beta2, cfg.adam_eps);
    let mut trace = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut r = rng::stream(cfg.seed, &[0x7A, step as u64]);
        let batch: Vec<Tensor> = (0..cfg.batch)
            .map(|_| dataset[r.gen_range(0..dataset.len())].clone())
            .collect();
        let draws = draw_noise(spec, &batch, &mut r);
        let (loss, grad) = dsm_loss_grad(&net, spec, &batch, &draws, cfg.weighting, exec)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::LossDivergence { step });
        }
        adam.step(net.params_mut(), &grad, cfg.lr)?;
        trace.push(loss);
        if cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 {
            on_checkpoint(step + 1, &net)?;
        }
        if step % 1000 == 0 {
            log::debug!("step {step}: loss {loss:.5}");
        }
    }
    if let Some(limit) = cfg.warn_loss {
        let tail = &trace[trace.len().saturating_sub(100)..];
        if !tail.is_empty() {
            let mean = tail.iter().sum::<f64>() / tail.len() as f64;
            if mean > limit {
                log::warn!("final training loss {mean:.4} is above the expected {limit}");
            }
        }
    }
    Ok((net, trace))
}

/// Loss trace as CSV with header `step,loss`.
pub fn format_loss_csv(trace: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        out.push_str(&format!("{},{l:?}\n", i + 1));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{MlpConfig, MlpScoreNet, ScoreModel};

    fn net(seed: u64) -> ScoreNet {
        let mut c = MlpConfig::new(2, 8);
        c.seed = seed;
        let mut n = MlpScoreNet::new(c).unwrap();
        // Nonzero output layer so every parameter receives gradient.
        let mut r = rng::stream(seed, &[99]);
        for p in n.params_mut() {
            *p += 0.1 * r.gen_range(-1.0..1.0);
        }
        ScoreNet::Mlp(n)
    }

    fn batch() -> Vec<Tensor> {
        vec![Tensor::vector(vec![1.0, -2.0]), Tensor::vector(vec![4.5, 5.5])]
    }

    #[test]
    fn self_score_stub_has_zero_loss() {
        let spec = SdeSpec::vp(0.1, 20.0, 1000, 1e-5).unwrap();
        let b = batch();
        let draws = draw_noise(&spec, &b, &mut rng::stream(1, &[]));
        let loss = dsm_loss_with(&spec, &b, &draws, Weighting::SigmaSquared, |i, x, t| {
            spec.self_score(x, &b[i], t)
        })
        .unwrap();
        assert!(loss.abs() < 1e-12, "{loss}");
    }

    #[test]
    fn zero_net_loss_is_half_dimension() {
        let spec = SdeSpec::toy_ve(100);
        let data: Vec<Tensor> = (0..10_000)
            .map(|i| Tensor::vector(vec![i as f64 * 1e-3, 1.0]))
            .collect();
        let draws = draw_noise(&spec, &data, &mut rng::stream(2, &[]));
        let loss = dsm_loss_with(&spec, &data, &draws, Weighting::SigmaSquared, |_, x, _| {
            Ok(Tensor::zeros(x.shape()))
        })
        .unwrap();
        assert!((loss - 1.0).abs() < 0.03, "{loss}");
    }

    #[test]
    fn hand_computed_loss_and_gradient() {
        let spec = SdeSpec::toy_ve(100);
        let n = net(3);
        let b = vec![Tensor::vector(vec![0.3, -0.4])];
        let draws = vec![DsmDraw {
            t: 0.5,
            z: Tensor::vector(vec![0.5, -1.0]),
        }];
        let (loss, grad) = dsm_loss_grad(&n, &spec, &b, &draws, Weighting::SigmaSquared, Exec::Sequential).unwrap();

        let sigma = 2f64.sqrt();
        let xt = Tensor::vector(vec![0.3 + sigma * 0.5, -0.4 - sigma]);
        let s = n.score(&xt, 0.5).unwrap();
        let by_hand = 0.5 * ((sigma * s[0] + 0.5).powi(2) + (sigma * s[1] - 1.0).powi(2));
        assert!((loss - by_hand).abs() < 1e-12);

        let eval =
            |p: &ScoreNet| dsm_loss_with(&spec, &b, &draws, Weighting::SigmaSquared, |_, x, t| p.score(x, t)).unwrap();
        let h = 1e-5;
        let mut probe = n.clone();
        for (i, &g) in grad.iter().enumerate() {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + h;
            let up = eval(&probe);
            probe.params_mut()[i] = orig - h;
            let down = eval(&probe);
            probe.params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (g - fd).abs() / g.abs().max(fd.abs()).max(1e-5);
            assert!(rel < 1e-4, "param {i}: {g} vs {fd}");
        }
    }

    #[test]
    fn chunked_gradient_matches_sequential() {
        let spec = SdeSpec::toy_ve(100);
        let n = net(4);
        let data: Vec<Tensor> = (0..37).map(|i| Tensor::vector(vec![i as f64 * 0.1, -1.0])).collect();
        let draws = draw_noise(&spec, &data, &mut rng::stream(5, &[]));
        let a = dsm_loss_grad(&n, &spec, &data, &draws, Weighting::SigmaSquared, Exec::Sequential).unwrap();
        let b = dsm_loss_grad(&n, &spec, &data, &draws, Weighting::SigmaSquared, Exec::default()).unwrap();
        assert_eq!(a.0.to_bits(), b.0.to_bits());
        assert!(a.1.iter().zip(&b.1).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut adam = Adam::new(3, 0.9, 0.999, 1e-8);
        adam.m = vec![1.0, -1.0, 0.5];
        let mut p = vec![1.0, 2.0, 3.0];
        let before_m = adam.m.clone();
        let mut fresh = Adam::new(3, 0.9, 0.999, 1e-8);
        fresh.step(&mut p, &[0.0; 3], 1e-3).unwrap();
        assert_eq!(p, vec![1.0, 2.0, 3.0]);
        adam.step(&mut [0.0; 3], &[0.0; 3], 1e-3).unwrap();
        for (m, b) in adam.m.iter().zip(&before_m) {
            assert_eq!(*m, 0.9 * b);
        }
    }

    #[test]
    fn adam_first_step_is_sign() {
        let mut adam = Adam::new(3, 0.9, 0.999, 1e-8);
        let mut p = vec![0.0; 3];
        adam.step(&mut p, &[3.0, -0.2, 50.0], 1e-3).unwrap();
        for (v, s) in p.iter().zip([-1.0, 1.0, -1.0]) {
            assert!((v - s * 1e-3).abs() < 1e-9, "{v}");
        }
    }

    #[test]
    fn adam_two_step_trace() {
        let (b1, b2, eps, lr, g) = (0.9, 0.999, 1e-8, 0.01, 2.0);
        let mut adam = Adam::new(1, b1, b2, eps);
        let mut p = vec![1.0];
        adam.step(&mut p, &[g], lr).unwrap();
        adam.step(&mut p, &[g], lr).unwrap();
        // Hand-rolled recurrence.
        let (mut m, mut v, mut x) = (0.0, 0.0, 1.0);
        for k in 1..=2 {
            m = b1 * m + (1.0 - b1) * g;
            v = b2 * v + (1.0 - b2) * g * g;
            let mh = m / (1.0 - f64::powi(b1, k));
            let vh = v / (1.0 - f64::powi(b2, k));
            x -= lr * mh / (vh.sqrt() + eps);
        }
        assert_eq!(p[0], x);
        assert!((x - 0.98).abs() < 1e-8);
    }

    #[test]
    fn small_step_decreases_single_sample_loss() {
        let spec = SdeSpec::toy_ve(100);
        let b = vec![Tensor::vector(vec![2.0, -1.0])];
        let draws = draw_noise(&spec, &b, &mut rng::stream(8, &[]));
        for lr in [1e-4, 1e-5] {
            let mut n = net(6);
            let (before, grad) =
                dsm_loss_grad(&n, &spec, &b, &draws, Weighting::SigmaSquared, Exec::Sequential).unwrap();
            for (p, g) in n.params_mut().iter_mut().zip(&grad) {
                *p -= lr * g;
            }
            let (after, _) = dsm_loss_grad(&n, &spec, &b, &draws, Weighting::SigmaSquared, Exec::Sequential).unwrap();
            assert!(after < before, "lr {lr}: {after} >= {before}");
        }
    }

    #[test]
    fn zero_steps_and_determinism() {
        let spec = SdeSpec::toy_ve(100);
        let data = batch();
        let mut cfg = TrainConfig {
            steps: 0,
            batch: 4,
            ..TrainConfig::default()
        };
        let n = net(7);
        let (same, trace) = train(n.clone(), &spec, &data, &cfg).unwrap();
        assert_eq!(same, n);
        assert!(trace.is_empty());

        cfg.steps = 15;
        let (a, ta) = train(n.clone(), &spec, &data, &cfg).unwrap();
        let (b, tb) = train(n.clone(), &spec, &data, &cfg).unwrap();
        assert_eq!(ta, tb);
        assert_eq!(a, b);
        assert!(format_loss_csv(&ta).starts_with("step,loss\n1,"));
    }

    #[test]
    fn divergence_and_validation() {
        let spec = SdeSpec::toy_ve(100);
        let data = vec![Tensor::vector(vec![1e200, 1e200])];
        let cfg = TrainConfig {
            steps: 3,
            batch: 1,
            ..TrainConfig::default()
        };
        assert!(matches!(
            train(net(1), &spec, &data, &cfg),
            Err(Error::LossDivergence { step: 0 })
        ));
        let bad = TrainConfig {
            beta1: 0.9999,
            ..TrainConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(train(net(1), &spec, &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn checkpoint_hook_cadence() {
        let spec = SdeSpec::toy_ve(100);
        let cfg = TrainConfig {
            steps: 10,
            batch: 2,
            checkpoint_every: 4,
            ..TrainConfig::default()
        };
        let mut seen = Vec::new();
        train_with(net(2), &spec, &batch(), &cfg, Exec::Sequential, |s, _| {
            seen.push(s);
            Ok(())
        })
        .unwrap();
        assert_eq!(seen, vec![4, 8]);
    }
}
