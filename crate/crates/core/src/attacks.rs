//! Projected gradient (PGD / FGSM) attacks on the ensemble predictor.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, TensorOps, Var};
use crate::error::{Error, Result};
use crate::interval_bound::{Ball, ClipRange};
use crate::network::{forward_with, Ensemble, Example, Network};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttackConfig {
    pub epsilon: f64,
    pub steps: usize,
    /// Defaults to `2.5 ε / steps`.
    pub step_size: Option<f64>,
    pub clip: Option<ClipRange>,
    /// Restart 0 starts at `x`; later restarts start uniformly in the ball.
    pub restarts: usize,
    pub seed: u64,
}

impl AttackConfig {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            steps: 10,
            step_size: None,
            clip: None,
            restarts: 1,
            seed: 0,
        }
    }

    pub fn with_epsilon(mut self, epsilon: f64) -> Self {
        self.epsilon = epsilon;
        self
    }

    pub fn step(&self) -> f64 {
        match self.step_size {
            Some(s) => s,
            None if self.steps > 0 => 2.5 * self.epsilon / self.steps as f64,
            None => 0.0,
        }
    }

    pub fn ball(&self) -> Result<Ball> {
        Ball::new(self.epsilon, self.clip)
    }

    pub fn validate(&self) -> Result<()> {
        self.ball()?;
        if self.restarts == 0 {
            return Err(Error::usage("attack needs at least one restart"));
        }
        if let Some(s) = self.step_size {
            if !(s > 0.0) || !s.is_finite() {
                return Err(Error::usage(format!("attack step size must be positive, got {s}")));
            }
        }
        Ok(())
    }
}

/// Sign-gradient ascent of `objective` from `start`, projecting onto the
/// ball around `x`. Returns the best iterate seen and its objective value.
pub(crate) fn pgd_maximize(
    x: &Tensor,
    ball: &Ball,
    steps: usize,
    step: f64,
    start: Tensor,
    mut objective: impl FnMut(&Tensor, bool) -> Result<(f64, Option<Tensor>)>,
) -> Result<(Tensor, f64)> {
    let mut current = start;
    ball.project(x.data(), current.data_mut());
    let mut best = current.clone();
    let mut best_value = f64::NEG_INFINITY;
    for k in 0..=steps {
        let want_grad = k < steps;
        let (value, grad) = objective(&current, want_grad)?;
        if value > best_value {
            best_value = value;
            best.data_mut().copy_from_slice(current.data());
        }
        if let Some(g) = grad {
            for (c, gi) in current.data_mut().iter_mut().zip(g.data()) {
                *c += step * sign(*gi);
            }
            ball.project(x.data(), current.data_mut());
        }
    }
    Ok((best, best_value))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn input_gradient<'t>(tape: &'t Tape, loss: &Var<'t>, input: &Var<'t>) -> Result<Tensor> {
    Ok(tape.backward(loss)?.wrt(input))
}

/// Cross-entropy of `(1/N) Σ σ(f^{w_i}(x))` against `y`, and its gradient in `x`.
pub fn ensemble_loss(ensemble: &Ensemble, x: &Tensor, y: usize, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
    let tape = Tape::new();
    let input = tape.leaf(x.clone());
    let mut terms = Vec::with_capacity(ensemble.len());
    for m in ensemble.members() {
        let params = m.trace(&tape, false);
        terms.push(forward_with(m.arch(), &params, input.clone())?.log_softmax()?.pick(y)?);
    }
    let n = ensemble.len() as f64;
    let loss = Var::stack(&terms)?.log_sum_exp()?.add_scalar(-n.ln()).scale(-1.0);
    let value = loss.value().item();
    let grad = if want_grad {
        Some(input_gradient(&tape, &loss, &input)?)
    } else {
        None
    };
    Ok((value, grad))
}

/// `-log σ_y(f^w(x))` for a single network, and its gradient in `x`.
pub fn network_loss(net: &Network, x: &Tensor, y: usize, want_grad: bool) -> Result<(f64, Option<Tensor>)> {
    let tape = Tape::new();
    let input = tape.leaf(x.clone());
    let params = net.trace(&tape, false);
    let loss = forward_with(net.arch(), &params, input.clone())?
        .log_softmax()?
        .pick(y)?
        .scale(-1.0);
    let value = loss.value().item();
    let grad = if want_grad {
        Some(input_gradient(&tape, &loss, &input)?)
    } else {
        None
    };
    Ok((value, grad))
}

fn run_restarts(
    x: &Tensor,
    cfg: &AttackConfig,
    stream: u64,
    mut objective: impl FnMut(&Tensor, bool) -> Result<(f64, Option<Tensor>)>,
) -> Result<Tensor> {
    cfg.validate()?;
    let ball = cfg.ball()?;
    if cfg.steps == 0 || cfg.epsilon == 0.0 {
        let mut out = x.clone();
        ball.project(x.data(), out.data_mut());
        return Ok(out);
    }
    let mut best: Option<(Tensor, f64)> = None;
    for r in 0..cfg.restarts {
        let start = if r == 0 {
            x.clone()
        } else {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ r as u64);
            let mut s = x.clone();
            for v in s.data_mut() {
                *v += rng.random_range(-cfg.epsilon..=cfg.epsilon);
            }
            s
        };
        let (cand, value) = pgd_maximize(x, &ball, cfg.steps, cfg.step(), start, &mut objective)?;
        if best.as_ref().is_none_or(|(_, v)| value > *v) {
            best = Some((cand, value));
        }
    }
    Ok(best.expect("at least one restart").0)
}

/// PGD against the ensemble's cross-entropy; the result lies in the (clipped) ball.
pub fn pgd_attack(ensemble: &Ensemble, x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<Tensor> {
    pgd_attack_stream(ensemble, x, y, cfg, 0)
}

fn pgd_attack_stream(ensemble: &Ensemble, x: &Tensor, y: usize, cfg: &AttackConfig, stream: u64) -> Result<Tensor> {
    check_class(y, ensemble.arch().class_count())?;
    run_restarts(x, cfg, stream, |p, g| ensemble_loss(ensemble, p, y, g))
}

/// PGD against a single network, as used inside the PGD-approximated likelihood.
pub fn pgd_attack_network(net: &Network, x: &Tensor, y: usize, cfg: &AttackConfig) -> Result<Tensor> {
    check_class(y, net.arch().class_count())?;
    run_restarts(x, cfg, 0, |p, g| network_loss(net, p, y, g))
}

fn check_class(y: usize, classes: usize) -> Result<()> {
    if y >= classes {
        return Err(Error::usage(format!("label {y} out of range for {classes} classes")));
    }
    Ok(())
}

/// Fraction of points classified correctly both at `x` and at the attack's
/// output. An upper estimate of the robust accuracy.
pub fn empirical_robust_accuracy(ensemble: &Ensemble, data: &[&Example], cfg: &AttackConfig) -> Result<f64> {
    let flags = robust_flags(ensemble, data, cfg)?;
    Ok(flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64)
}

/// Per-point outcome of [`empirical_robust_accuracy`].
pub fn robust_flags(ensemble: &Ensemble, data: &[&Example], cfg: &AttackConfig) -> Result<Vec<bool>> {
    if data.is_empty() {
        return Err(Error::usage("robust accuracy of an empty set"));
    }
    cfg.validate()?;
    let indexed: Vec<(usize, &&Example)> = data.iter().enumerate().collect();
    par::map(&indexed, |(i, e)| {
        if ensemble.classify(&e.input)? != e.label {
            return Ok(false);
        }
        let adv = pgd_attack_stream(ensemble, &e.input, e.label, cfg, *i as u64)?;
        Ok(ensemble.classify(&adv)? == e.label)
    })
    .into_iter()
    .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{NetworkArchitecture, WeightVector};

    fn toy_ensemble(seed: u64, n: usize) -> Ensemble {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = NetworkArchitecture::mlp(3, &[6], 3).unwrap();
        let samples: Vec<WeightVector> = (0..n).map(|_| WeightVector::initialize(&arch, &mut rng)).collect();
        Ensemble::new(&arch, &samples).unwrap()
    }

    #[test]
    fn zero_radius_or_zero_steps_is_identity() {
        let e = toy_ensemble(1, 3);
        let x = Tensor::vector(vec![0.2, 0.4, 0.6]);
        assert_eq!(pgd_attack(&e, &x, 0, &AttackConfig::new(0.0)).unwrap(), x);
        let cfg = AttackConfig {
            steps: 0,
            ..AttackConfig::new(0.3)
        };
        assert_eq!(pgd_attack(&e, &x, 0, &cfg).unwrap(), x);
    }

    #[test]
    fn fgsm_reaches_worst_corner_of_linear_model() {
        // two classes, logit margin z_0 - z_1 = a·x
        let arch = NetworkArchitecture::mlp(3, &[], 2).unwrap();
        let a = [0.7, -1.3, 0.4];
        let mut v = a.to_vec();
        v.extend([0.0, 0.0, 0.0, 0.0, 0.0]);
        let w = WeightVector::new(&arch, v).unwrap();
        let e = Ensemble::new(&arch, &[w]).unwrap();
        let x = Tensor::vector(vec![0.1, 0.2, -0.3]);
        let eps = 0.05;
        let cfg = AttackConfig {
            steps: 1,
            step_size: Some(eps),
            ..AttackConfig::new(eps)
        };
        let adv = pgd_attack(&e, &x, 0, &cfg).unwrap();
        for ((&xi, &ai), &got) in x.data().iter().zip(&a).zip(adv.data()) {
            assert!((got - (xi - eps * ai.signum())).abs() < 1e-12);
        }
    }

    #[test]
    fn attack_output_is_feasible() {
        let e = toy_ensemble(2, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..200 {
            let x = Tensor::vector((0..3).map(|_| rng.random_range(0.0..1.0)).collect());
            let eps = rng.random_range(0.0..0.4);
            let cfg = AttackConfig {
                clip: Some(ClipRange::UNIT),
                restarts: 2,
                seed: rng.random(),
                steps: rng.random_range(0..5),
                ..AttackConfig::new(eps)
            };
            let y = rng.random_range(0..3);
            let adv = pgd_attack(&e, &x, y, &cfg).unwrap();
            for (a, c) in adv.data().iter().zip(x.data()) {
                assert!((a - c).abs() <= eps + 1e-12);
                assert!((0.0..=1.0).contains(a));
            }
        }
    }

    #[test]
    fn attack_does_not_decrease_loss() {
        let e = toy_ensemble(4, 3);
        let x = Tensor::vector(vec![0.3, -0.2, 0.5]);
        let adv = pgd_attack(&e, &x, 1, &AttackConfig::new(0.2)).unwrap();
        let before = ensemble_loss(&e, &x, 1, false).unwrap().0;
        let after = ensemble_loss(&e, &adv, 1, false).unwrap().0;
        assert!(after >= before);
    }

    #[test]
    fn ensemble_loss_matches_predictive_mean() {
        let e = toy_ensemble(5, 4);
        let x = Tensor::vector(vec![0.3, -0.2, 0.5]);
        let (v, _) = ensemble_loss(&e, &x, 2, false).unwrap();
        let p = e.predict(&x).unwrap().data()[2];
        assert!((v + p.ln()).abs() < 1e-12);
    }

    #[test]
    fn robust_accuracy_cases() {
        let e = toy_ensemble(6, 2);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let data: Vec<Example> = (0..30)
            .map(|_| Example {
                input: Tensor::vector((0..3).map(|_| rng.random_range(-1.0..1.0)).collect()),
                label: rng.random_range(0..3),
            })
            .collect();
        let refs: Vec<&Example> = data.iter().collect();
        let cfg0 = AttackConfig {
            steps: 0,
            ..AttackConfig::new(0.5)
        };
        assert_eq!(empirical_robust_accuracy(&e, &refs, &cfg0).unwrap(), e.accuracy(&refs).unwrap());
        let mut prev = 1.0;
        for eps in [0.0, 0.05, 0.1, 0.3] {
            let r = empirical_robust_accuracy(&e, &refs, &AttackConfig::new(eps)).unwrap();
            assert!(r <= prev + 1e-12);
            prev = r;
        }

        // constant output network: biases only
        let arch = NetworkArchitecture::mlp(3, &[], 3).unwrap();
        let mut v = vec![0.0; 9];
        v.extend([0.0, 2.0, 0.0]);
        let c = Ensemble::new(&arch, &[WeightVector::new(&arch, v).unwrap()]).unwrap();
        let ones: Vec<Example> = data.iter().map(|d| Example { label: 1, ..d.clone() }).collect();
        let refs: Vec<&Example> = ones.iter().collect();
        assert_eq!(empirical_robust_accuracy(&c, &refs, &AttackConfig::new(0.9)).unwrap(), 1.0);
    }
}
