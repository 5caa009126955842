//! The robust likelihood `E_ε[σ_y(f^{w,ε}_min(x))]`, its IBP lower bound and
//! its PGD approximation, plus the perturbation-radius distributions.

use std::sync::Arc;

use rand::Rng;

use crate::attacks::{pgd_attack_network, AttackConfig};
use crate::autodiff::{Tape, TensorOps};
use crate::error::{Error, Result};
use crate::interval_bound::{ibp_forward_with, input_ball, worst_case_with, Ball, ClipRange, Interval};
use crate::network::{flatten_gradients, forward_with, DenseParams, Example, Network, NetworkArchitecture, WeightVector};
use crate::par;
use crate::tensor::Tensor;

/// Probabilities below this are clamped before taking the log.
pub const PROB_FLOOR: f64 = 1e-30;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum EpsilonLaw {
    /// ε = 0: the standard softmax likelihood.
    Dirac0,
    /// ε = 0 with probability λ, ε = η otherwise.
    Discrete {
        lambda: f64,
        eta: f64,
    },
    Rayleigh {
        scale: f64,
    },
    /// Rate `1/scale`.
    Exponential {
        scale: f64,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpsilonDistribution {
    pub law: EpsilonLaw,
    /// Monte Carlo draws per batch for the continuous laws.
    pub mc_samples: usize,
}

impl EpsilonDistribution {
    pub fn new(law: EpsilonLaw, mc_samples: usize) -> Result<Self> {
        let d = Self { law, mc_samples };
        d.validate()?;
        Ok(d)
    }

    pub fn dirac0() -> Self {
        Self {
            law: EpsilonLaw::Dirac0,
            mc_samples: 10,
        }
    }

    pub fn discrete(lambda: f64, eta: f64) -> Result<Self> {
        Self::new(EpsilonLaw::Discrete { lambda, eta }, 10)
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::usage(format!("{name} must be positive, got {v}")))
            }
        };
        match self.law {
            EpsilonLaw::Dirac0 => {}
            EpsilonLaw::Discrete { lambda, eta } => {
                if !(0.0..=1.0).contains(&lambda) {
                    return Err(Error::usage(format!("lambda must lie in [0, 1], got {lambda}")));
                }
                positive("eta", eta)?;
            }
            EpsilonLaw::Rayleigh { scale } | EpsilonLaw::Exponential { scale } => {
                positive("scale", scale)?;
                if self.mc_samples == 0 {
                    return Err(Error::usage("continuous epsilon laws need mc_samples >= 1"));
                }
            }
        }
        Ok(())
    }

    /// The radius parameter η (0 for Dirac0).
    pub fn eta(&self) -> f64 {
        match self.law {
            EpsilonLaw::Dirac0 => 0.0,
            EpsilonLaw::Discrete { eta, .. } => eta,
            EpsilonLaw::Rayleigh { scale } | EpsilonLaw::Exponential { scale } => scale,
        }
    }

    /// Same law with η replaced; used by the training ramp. η = 0 degenerates to Dirac0.
    pub fn with_eta(&self, eta: f64) -> Self {
        if eta <= 0.0 {
            return Self {
                law: EpsilonLaw::Dirac0,
                ..*self
            };
        }
        let law = match self.law {
            EpsilonLaw::Dirac0 => EpsilonLaw::Dirac0,
            EpsilonLaw::Discrete { lambda, .. } => EpsilonLaw::Discrete { lambda, eta },
            EpsilonLaw::Rayleigh { .. } => EpsilonLaw::Rayleigh { scale: eta },
            EpsilonLaw::Exponential { .. } => EpsilonLaw::Exponential { scale: eta },
        };
        Self { law, ..*self }
    }

    pub fn is_standard(&self) -> bool {
        matches!(self.law, EpsilonLaw::Dirac0)
    }

    /// Radius/weight pairs approximating the expectation over ε. Exact for
    /// the discrete laws, `mc_samples` equally weighted draws otherwise.
    pub fn quadrature(&self, rng: &mut impl Rng) -> Vec<(f64, f64)> {
        match self.law {
            EpsilonLaw::Dirac0 => vec![(0.0, 1.0)],
            EpsilonLaw::Discrete { lambda, eta } => [(0.0, lambda), (eta, 1.0 - lambda)]
                .into_iter()
                .filter(|&(_, wt)| wt > 0.0)
                .collect(),
            _ => {
                let wt = 1.0 / self.mc_samples as f64;
                (0..self.mc_samples).map(|_| (sample_epsilon(self, rng), wt)).collect()
            }
        }
    }
}

/// One draw of ε.
pub fn sample_epsilon(p: &EpsilonDistribution, rng: &mut impl Rng) -> f64 {
    // 1 - U lies in (0, 1], keeping the logs finite
    let mut open_unit = || 1.0 - rng.random::<f64>();
    match p.law {
        EpsilonLaw::Dirac0 => 0.0,
        EpsilonLaw::Discrete { lambda, eta } => {
            if rng.random::<f64>() < lambda {
                0.0
            } else {
                eta
            }
        }
        EpsilonLaw::Rayleigh { scale } => scale * (-2.0 * open_unit().ln()).sqrt(),
        EpsilonLaw::Exponential { scale } => -scale * open_unit().ln(),
    }
}

/// Linear warm-up of η towards `target_eta · (1 + overshoot)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RampSchedule {
    pub target_eta: f64,
    pub warmup_epochs: f64,
    pub overshoot: f64,
}

impl RampSchedule {
    pub fn new(target_eta: f64, warmup_epochs: f64) -> Self {
        Self {
            target_eta,
            warmup_epochs,
            overshoot: 0.10,
        }
    }

    /// η at (fractional) epoch `t`.
    pub fn eta_at(&self, t: f64) -> f64 {
        let progress = if self.warmup_epochs <= 0.0 {
            1.0
        } else {
            (t / self.warmup_epochs).clamp(0.0, 1.0)
        };
        self.target_eta * (1.0 + self.overshoot) * progress
    }
}

/// How the inner minimum over the ball is handled.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum BoundMethod {
    /// Worst-case logits from interval bounds: a lower bound on the likelihood.
    Ibp,
    /// Softmax at the point found by PGD on the current network. Not a bound.
    Pgd(AttackConfig),
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RobustLikelihood {
    pub p_eps: EpsilonDistribution,
    pub method: BoundMethod,
    pub clip: Option<ClipRange>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradientMode {
    None,
    Sum,
    /// Also accumulate squared per-example gradients.
    SumAndSquares,
}

/// Sums over a batch of the per-example negative log-likelihood and its
/// parameter gradients.
#[derive(Clone, Debug, Default)]
pub struct BatchEvaluation {
    pub nll_sum: f64,
    pub grad_sum: Vec<f64>,
    pub grad_sq_sum: Vec<f64>,
    /// Examples whose probability hit [`PROB_FLOOR`].
    pub clamped: usize,
    pub count: usize,
}

impl BatchEvaluation {
    fn merge(&mut self, other: BatchEvaluation) {
        self.nll_sum += other.nll_sum;
        add_into(&mut self.grad_sum, &other.grad_sum);
        add_into(&mut self.grad_sq_sum, &other.grad_sq_sum);
        self.clamped += other.clamped;
        self.count += other.count;
    }
}

fn add_into(acc: &mut Vec<f64>, v: &[f64]) {
    if v.is_empty() {
        return;
    }
    if acc.is_empty() {
        acc.extend_from_slice(v);
    } else {
        for (a, b) in acc.iter_mut().zip(v) {
            *a += b;
        }
    }
}

impl RobustLikelihood {
    pub fn standard() -> Self {
        Self {
            p_eps: EpsilonDistribution::dirac0(),
            method: BoundMethod::Ibp,
            clip: None,
        }
    }

    pub fn ibp(p_eps: EpsilonDistribution, clip: Option<ClipRange>) -> Self {
        Self {
            p_eps,
            method: BoundMethod::Ibp,
            clip,
        }
    }

    pub fn pgd(p_eps: EpsilonDistribution, attack: AttackConfig) -> Self {
        Self {
            p_eps,
            method: BoundMethod::Pgd(attack),
            clip: attack.clip,
        }
    }

    pub fn with_eta(&self, eta: f64) -> Self {
        Self {
            p_eps: self.p_eps.with_eta(eta),
            ..*self
        }
    }

    /// Negative log of the quadrature-weighted likelihood for one example.
    /// Returns the term and whether it was clamped.
    fn example_term<T: TensorOps>(
        &self,
        net: &Network,
        params: &[DenseParams<T>],
        lift: &impl Fn(Tensor) -> T,
        ex: &Example,
        quad: &[(f64, f64)],
    ) -> Result<(T, bool)> {
        let arch = net.arch();
        let y = ex.label;
        let log_prob = |eps: f64| -> Result<T> {
            let logits = if eps == 0.0 {
                forward_with(arch, params, lift(ex.input.clone()))?
            } else {
                match self.method {
                    BoundMethod::Ibp => {
                        let b = input_ball(&ex.input, &Ball::new(eps, self.clip)?)?;
                        let out = ibp_forward_with(
                            arch,
                            params,
                            Interval {
                                lower: lift(b.lower),
                                upper: lift(b.upper),
                            },
                        )?;
                        worst_case_with(&out, y)?
                    }
                    BoundMethod::Pgd(cfg) => {
                        let cfg = AttackConfig {
                            clip: self.clip,
                            ..cfg.with_epsilon(eps)
                        };
                        let adv = pgd_attack_network(net, &ex.input, y, &cfg)?;
                        forward_with(arch, params, lift(adv))?
                    }
                }
            };
            logits.log_softmax()?.pick(y)
        };

        if let [(eps, wt)] = quad {
            if *eps == 0.0 && *wt == 1.0 {
                // plain cross-entropy; kept on its own path so it matches standard_nll exactly
                return Ok((log_prob(0.0)?.scale(-1.0), false));
            }
        }
        let mut parts = Vec::with_capacity(quad.len());
        for &(eps, wt) in quad {
            if wt > 0.0 {
                parts.push(log_prob(eps)?.add_scalar(wt.ln()));
            }
        }
        if parts.is_empty() {
            return Err(Error::usage("epsilon quadrature has no positive weight"));
        }
        let total = if parts.len() == 1 {
            parts.pop().expect("one part")
        } else {
            T::stack(&parts)?.log_sum_exp()?
        };
        if total.value().item() < PROB_FLOOR.ln() {
            return Ok((total.detach_to(-PROB_FLOOR.ln()), true));
        }
        Ok((total.scale(-1.0), false))
    }

    /// Evaluates the batch for the network `net` under the given ε quadrature.
    pub fn evaluate(&self, net: &Network, batch: &[&Example], quad: &[(f64, f64)], mode: GradientMode) -> Result<BatchEvaluation> {
        if batch.is_empty() {
            return Err(Error::usage("likelihood of an empty batch"));
        }
        let chunks: Vec<&[&Example]> = batch.chunks(par::CHUNK).collect();
        let results = par::map(&chunks, |chunk| self.evaluate_chunk(net, chunk, quad, mode));
        let mut out = BatchEvaluation::default();
        for r in results {
            out.merge(r?);
        }
        Ok(out)
    }

    fn evaluate_chunk(&self, net: &Network, chunk: &[&Example], quad: &[(f64, f64)], mode: GradientMode) -> Result<BatchEvaluation> {
        let mut out = BatchEvaluation::default();
        let mut g = Vec::new();
        for ex in chunk {
            out.count += 1;
            if mode == GradientMode::None {
                let (t, clamped) = self.example_term(net, net.params(), &|v| Arc::new(v), ex, quad)?;
                out.nll_sum += t.value().item();
                out.clamped += usize::from(clamped);
                continue;
            }
            let tape = Tape::new();
            let params = net.trace(&tape, true);
            let (t, clamped) = self.example_term(net, &params, &|v| tape.constant(v), ex, quad)?;
            out.nll_sum += t.value().item();
            out.clamped += usize::from(clamped);
            let grads = tape.backward(&t)?;
            flatten_gradients(&params, &grads, &mut g);
            add_into(&mut out.grad_sum, &g);
            if mode == GradientMode::SumAndSquares {
                if out.grad_sq_sum.is_empty() {
                    out.grad_sq_sum = vec![0.0; g.len()];
                }
                for (a, v) in out.grad_sq_sum.iter_mut().zip(&g) {
                    *a += v * v;
                }
            }
        }
        if mode != GradientMode::None && out.grad_sum.is_empty() {
            out.grad_sum = vec![0.0; net.arch().param_count()];
        }
        Ok(out)
    }

    /// Batch negative log-likelihood at `w`, drawing the ε quadrature from `rng`.
    pub fn nll(&self, arch: &NetworkArchitecture, w: &WeightVector, batch: &[&Example], rng: &mut impl Rng) -> Result<f64> {
        self.p_eps.validate()?;
        let quad = self.p_eps.quadrature(rng);
        let net = Network::new(arch, w)?;
        let ev = self.evaluate(&net, batch, &quad, GradientMode::None)?;
        if ev.clamped > 0 {
            log::warn!("{} of {} likelihood terms clamped at {PROB_FLOOR:e}", ev.clamped, ev.count);
        }
        Ok(ev.nll_sum)
    }
}

/// `-Σ_i log E_ε[σ_{y_i}(f^{w,ε}_{LB}(x_i))]`.
pub fn robust_nll_ibp(
    arch: &NetworkArchitecture,
    w: &WeightVector,
    batch: &[&Example],
    p_eps: &EpsilonDistribution,
    clip: Option<ClipRange>,
    rng: &mut impl Rng,
) -> Result<f64> {
    RobustLikelihood::ibp(*p_eps, clip).nll(arch, w, batch, rng)
}

/// The PGD-approximated robust NLL. An estimate, not a bound.
pub fn robust_nll_pgd(
    arch: &NetworkArchitecture,
    w: &WeightVector,
    batch: &[&Example],
    p_eps: &EpsilonDistribution,
    attack: &AttackConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    RobustLikelihood::pgd(*p_eps, *attack).nll(arch, w, batch, rng)
}

/// Gaussian NLL of the worse of `(E_ε[f_max] − y)²` and `(E_ε[f_min] − y)²`,
/// with `f_max`/`f_min` taken from the IBP output bounds.
#[allow(clippy::too_many_arguments)]
pub fn robust_gaussian_nll_regression(
    arch: &NetworkArchitecture,
    w: &WeightVector,
    x: &Tensor,
    y: f64,
    p_eps: &EpsilonDistribution,
    clip: Option<ClipRange>,
    variance: f64,
    rng: &mut impl Rng,
) -> Result<f64> {
    if !(variance > 0.0) {
        return Err(Error::usage(format!("variance must be positive, got {variance}")));
    }
    if arch.class_count() != 1 {
        return Err(Error::usage("regression likelihood needs a single-output network"));
    }
    p_eps.validate()?;
    let net = Network::new(arch, w)?;
    let (mut hi, mut lo) = (0.0, 0.0);
    for (eps, wt) in p_eps.quadrature(rng) {
        let b = net.ibp(x, &Ball::new(eps, clip)?)?;
        hi += wt * b.upper.data()[0];
        lo += wt * b.lower.data()[0];
    }
    let sq = (hi - y).powi(2).max((lo - y).powi(2));
    Ok(0.5 * (2.0 * std::f64::consts::PI * variance).ln() + sq / (2.0 * variance))
}
