//! Epoch-level training loops that turn a data set and a likelihood into a
//! serialized-ready [`Posterior`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attacks::AttackConfig;
use crate::data::batches;
use crate::error::{Error, Result};
use crate::inference::{
    bbb_step, hmc_run, natgrad_vi_step, sgd_step, GaussianVariationalPosterior, HmcConfig, LogLikelihood, NetworkObjective,
    NetworkPotential, Posterior, PriorSpec, StepReport, SwagMoments,
};
use crate::interval_bound::ClipRange;
use crate::network::{Dataset, Ensemble, NetworkArchitecture, WeightVector};
use crate::robust_likelihood::{EpsilonDistribution, RampSchedule, RobustLikelihood};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Method {
    Bbb,
    Natgrad,
    Swag,
    Hmc,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Bbb => "bbb",
            Method::Natgrad => "natgrad",
            Method::Swag => "swag",
            Method::Hmc => "hmc",
        }
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "bbb" => Method::Bbb,
            "natgrad" => Method::Natgrad,
            "swag" => Method::Swag,
            "hmc" => Method::Hmc,
            other => {
                return Err(Error::usage(format!(
                    "method: unknown value {other:?} (expected bbb, natgrad, swag or hmc)"
                )))
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LikelihoodKind {
    Standard,
    Ibp,
    Pgd,
}

impl LikelihoodKind {
    pub fn name(self) -> &'static str {
        match self {
            LikelihoodKind::Standard => "standard",
            LikelihoodKind::Ibp => "ibp",
            LikelihoodKind::Pgd => "pgd",
        }
    }
}

impl std::str::FromStr for LikelihoodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "standard" => LikelihoodKind::Standard,
            "ibp" => LikelihoodKind::Ibp,
            "pgd" => LikelihoodKind::Pgd,
            other => {
                return Err(Error::usage(format!(
                    "likelihood: unknown value {other:?} (expected standard, ibp or pgd)"
                )))
            }
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SwagConfig {
    /// SGD epochs before the first iterate is collected.
    pub warmup_epochs: usize,
    /// Steps between collected iterates.
    pub collect_every: usize,
}

impl Default for SwagConfig {
    fn default() -> Self {
        Self {
            warmup_epochs: 5,
            collect_every: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub method: Method,
    pub likelihood: LikelihoodKind,
    /// `p_ε` at its target scale; ignored for the standard likelihood.
    pub p_eps: EpsilonDistribution,
    /// Epochs over which η rises linearly to `(1 + overshoot) · target`.
    pub warmup_epochs: f64,
    pub overshoot: f64,
    /// PGD settings for the training-time attack; ε comes from `p_ε`.
    pub attack: AttackConfig,
    pub clip: Option<ClipRange>,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Per-epoch exponential decay: `lr_e = lr · exp(−decay · e)`.
    pub lr_decay: f64,
    /// Prior variance as a multiple of the fan-in initialization variance.
    pub prior_scaling: f64,
    /// Posterior temperature for BBB and natgrad. The variational family
    /// targets `(p(D|w) p(w))^{1/T}`: same mean as at `T = 1`, variance
    /// scaled by `T`. `1` is ordinary VI.
    pub temperature: f64,
    pub swag: SwagConfig,
    pub hmc: HmcConfig,
    /// SGD epochs used to initialize robust HMC.
    pub hmc_warm_start_epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(method: Method, likelihood: LikelihoodKind) -> Self {
        Self {
            method,
            likelihood,
            p_eps: EpsilonDistribution::dirac0(),
            warmup_epochs: 0.0,
            overshoot: 0.10,
            attack: AttackConfig::new(0.0),
            clip: Some(ClipRange::UNIT),
            epochs: 20,
            batch_size: 128,
            learning_rate: 0.1,
            lr_decay: 0.0,
            prior_scaling: 10.0,
            temperature: 1.0,
            swag: SwagConfig::default(),
            hmc: HmcConfig::default(),
            hmc_warm_start_epochs: 10,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.likelihood != LikelihoodKind::Standard {
            self.p_eps.validate()?;
        }
        self.attack.validate()?;
        let checks: [(bool, &str); 6] = [
            (self.batch_size > 0, "batch_size must be positive"),
            (
                self.learning_rate > 0.0 && self.learning_rate.is_finite(),
                "learning_rate must be positive",
            ),
            (self.lr_decay >= 0.0, "lr_decay must be non-negative"),
            (self.prior_scaling > 0.0, "prior_scaling must be positive"),
            (
                self.temperature > 0.0 && self.temperature.is_finite(),
                "temperature must be positive",
            ),
            (
                self.warmup_epochs >= 0.0 && self.overshoot >= 0.0,
                "ramp settings must be non-negative",
            ),
        ];
        for (ok, msg) in checks {
            if !ok {
                return Err(Error::usage(msg));
            }
        }
        if self.method == Method::Natgrad && self.learning_rate > 1.0 {
            return Err(Error::usage("natgrad learning_rate must lie in (0, 1]"));
        }
        if self.method == Method::Swag && self.swag.collect_every == 0 {
            return Err(Error::usage("swag.collect_every must be positive"));
        }
        if self.method == Method::Hmc && (self.hmc.leapfrog_steps == 0 || self.hmc.samples == 0) {
            return Err(Error::usage("hmc needs at least one leapfrog step and one sample"));
        }
        Ok(())
    }

    fn ramp(&self) -> RampSchedule {
        RampSchedule {
            target_eta: self.p_eps.eta(),
            warmup_epochs: self.warmup_epochs,
            overshoot: self.overshoot,
        }
    }

    /// η at fractional epoch `t`; 0 for the standard likelihood.
    pub fn eta_at(&self, t: f64) -> f64 {
        match self.likelihood {
            LikelihoodKind::Standard => 0.0,
            _ => self.ramp().eta_at(t),
        }
    }

    fn likelihood_at(&self, t: f64) -> RobustLikelihood {
        match self.likelihood {
            LikelihoodKind::Standard => RobustLikelihood::standard(),
            LikelihoodKind::Ibp => RobustLikelihood::ibp(self.p_eps, self.clip).with_eta(self.eta_at(t)),
            LikelihoodKind::Pgd => RobustLikelihood::pgd(
                self.p_eps,
                AttackConfig {
                    clip: self.clip,
                    ..self.attack
                },
            )
            .with_eta(self.eta_at(t)),
        }
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean step loss over the epoch (NLL plus per-datum regularizer).
    pub loss: f64,
    /// Training accuracy of the network at the current posterior mean.
    pub accuracy: f64,
    /// η at the end of the epoch.
    pub eta: f64,
    pub learning_rate: f64,
    pub clamped: usize,
    pub rejected: usize,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub posterior: Posterior,
    pub log: Vec<EpochLog>,
}

/// Independent random streams derived from the run seed.
#[derive(Clone, Copy)]
enum Stream {
    Init = 0,
    Batches = 1,
    Steps = 2,
    Hmc = 3,
}

fn stream(seed: u64, s: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(s as u64);
    rng
}

/// Consecutive rejected steps after which training aborts.
const MAX_CONSECUTIVE_REJECTIONS: usize = 20;

struct EpochState {
    loss_sum: f64,
    steps: usize,
    clamped: usize,
    rejected: usize,
    consecutive: usize,
}

impl EpochState {
    fn new() -> Self {
        Self {
            loss_sum: 0.0,
            steps: 0,
            clamped: 0,
            rejected: 0,
            consecutive: 0,
        }
    }

    fn record(&mut self, r: StepReport, epoch: usize) -> Result<()> {
        self.clamped += r.clamped;
        if r.accepted {
            self.loss_sum += r.loss;
            self.steps += 1;
            self.consecutive = 0;
        } else {
            self.rejected += 1;
            self.consecutive += 1;
            if self.consecutive >= MAX_CONSECUTIVE_REJECTIONS {
                return Err(Error::numeric(
                    "train",
                    format!(
                        "{} consecutive non-finite steps in epoch {epoch} (last loss {})",
                        self.consecutive, r.loss
                    ),
                ));
            }
        }
        Ok(())
    }

    fn finish(&self, epoch: usize, accuracy: f64, eta: f64, learning_rate: f64) -> Result<EpochLog> {
        let loss = self.loss_sum / self.steps.max(1) as f64;
        if !loss.is_finite() {
            return Err(Error::numeric("train", format!("non-finite mean loss in epoch {epoch}")));
        }
        Ok(EpochLog {
            epoch,
            loss,
            accuracy,
            eta,
            learning_rate,
            clamped: self.clamped,
            rejected: self.rejected,
        })
    }
}

fn train_accuracy(arch: &NetworkArchitecture, data: &Dataset, mean: &[f64]) -> Result<f64> {
    let e = Ensemble::new(arch, &[WeightVector::from_values(mean.to_vec())])?;
    e.accuracy(&data.refs())
}

/// Minibatch loop shared by the stochastic methods. `step` receives the
/// objective at the current η, the batch and the learning rate.
fn run_epochs<F, M>(
    arch: &NetworkArchitecture,
    data: &Dataset,
    cfg: &TrainConfig,
    epochs: usize,
    log: &mut Vec<EpochLog>,
    mut step: F,
    mean: M,
) -> Result<()>
where
    F: FnMut(&dyn LogLikelihood, &[usize], &mut f64, usize) -> Result<StepReport>,
    M: Fn() -> Vec<f64>,
{
    let mut batch_rng = stream(cfg.seed, Stream::Batches);
    let first = log.len();
    for e in 0..epochs {
        let epoch = first + e;
        let order = batches(data.len(), cfg.batch_size, &mut batch_rng)?;
        let per_epoch = order.len() as f64;
        let mut lr = cfg.learning_rate * (-cfg.lr_decay * epoch as f64).exp();
        let mut state = EpochState::new();
        for (k, batch) in order.iter().enumerate() {
            let t = epoch as f64 + k as f64 / per_epoch;
            let objective = NetworkObjective {
                arch,
                data,
                likelihood: cfg.likelihood_at(t),
            };
            let report = step(&objective, batch, &mut lr, epoch)?;
            state.record(report, epoch)?;
        }
        let eta = cfg.eta_at(epoch as f64 + 1.0);
        let row = state.finish(epoch, train_accuracy(arch, data, &mean())?, eta, lr)?;
        log::info!(
            "epoch {epoch}: loss {:.4} acc {:.4} eta {:.4} clamped {} rejected {}",
            row.loss,
            row.accuracy,
            row.eta,
            row.clamped,
            row.rejected
        );
        log.push(row);
    }
    Ok(())
}

/// Trains an approximate posterior for `arch` on `data`.
pub fn train(arch: &NetworkArchitecture, data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if data.input_dim() != arch.input_dim() || data.class_count() != arch.class_count() {
        return Err(Error::dim(
            "train",
            format!(
                "data is {}→{} but the network is {}→{}",
                data.input_dim(),
                data.class_count(),
                arch.input_dim(),
                arch.class_count()
            ),
        ));
    }
    let prior = PriorSpec::scaled(arch, cfg.prior_scaling)?;
    let mut init_rng = stream(cfg.seed, Stream::Init);
    let mut step_rng = stream(cfg.seed, Stream::Steps);
    let n_data = data.len() as f64;
    let mut log = Vec::new();

    let posterior = match cfg.method {
        Method::Natgrad | Method::Bbb => {
            let mean = WeightVector::initialize(arch, &mut init_rng).into_values();
            let t = cfg.temperature;
            let prior = PriorSpec::new(prior.mean.clone(), prior.precision.iter().map(|p| p / t).collect())?;
            let n_eff = n_data / t;
            // s is a per-datum precision, so q starts with exactly the prior's spread
            let s0 = prior.precision.iter().map(|p| p / n_eff).collect();
            let post = std::cell::RefCell::new(GaussianVariationalPosterior::new(mean, s0, n_eff)?);
            let natgrad = cfg.method == Method::Natgrad;
            run_epochs(
                arch,
                data,
                cfg,
                cfg.epochs,
                &mut log,
                |obj, batch, lr, _| {
                    let mut p = post.borrow_mut();
                    if natgrad {
                        natgrad_vi_step(&mut p, obj, batch, &prior, lr, &mut step_rng)
                    } else {
                        bbb_step(&mut p, obj, batch, &prior, lr, &mut step_rng)
                    }
                },
                || post.borrow().mean.clone(),
            )?;
            Posterior::Gaussian(post.into_inner())
        }
        Method::Swag => {
            let w = std::cell::RefCell::new(WeightVector::initialize(arch, &mut init_rng).into_values());
            let moments = std::cell::RefCell::new(SwagMoments::new(arch.param_count()));
            let mut counter = 0usize;
            let warmup = cfg.swag.warmup_epochs;
            run_epochs(
                arch,
                data,
                cfg,
                cfg.epochs,
                &mut log,
                |obj, batch, lr, epoch| {
                    let mut w = w.borrow_mut();
                    let r = sgd_step(&mut w, obj, batch, lr, &mut step_rng)?;
                    if epoch >= warmup && r.accepted {
                        if counter.is_multiple_of(cfg.swag.collect_every) {
                            moments.borrow_mut().collect(&w);
                        }
                        counter += 1;
                    }
                    Ok(r)
                },
                || w.borrow().clone(),
            )?;
            let moments = moments.into_inner();
            moments.check_ready()?;
            Posterior::Swag(moments)
        }
        Method::Hmc => {
            let init = if cfg.likelihood == LikelihoodKind::Standard {
                prior.sample(&mut init_rng)
            } else {
                let w = std::cell::RefCell::new(WeightVector::initialize(arch, &mut init_rng).into_values());
                run_epochs(
                    arch,
                    data,
                    cfg,
                    cfg.hmc_warm_start_epochs,
                    &mut log,
                    |obj, batch, lr, _| sgd_step(&mut w.borrow_mut(), obj, batch, lr, &mut step_rng),
                    || w.borrow().clone(),
                )?;
                w.into_inner()
            };
            let t = log.len() as f64;
            let objective = NetworkObjective {
                arch,
                data,
                likelihood: cfg.likelihood_at(t.max(cfg.warmup_epochs)),
            };
            let potential = NetworkPotential {
                objective: &objective,
                prior: &prior,
                seed: cfg.seed,
            };
            let mut hmc_rng = stream(cfg.seed, Stream::Hmc);
            let chain = hmc_run(&init, &potential, &cfg.hmc, &mut hmc_rng)?;
            log::info!("hmc: acceptance {:.3}, divergent {}", chain.acceptance_rate(), chain.divergent);
            let posterior = Posterior::Samples(chain.samples);
            let epoch = log.len();
            log.push(EpochLog {
                epoch,
                loss: potential_loss(&objective, &posterior.mean())?,
                accuracy: train_accuracy(arch, data, &posterior.mean())?,
                eta: cfg.eta_at(t.max(cfg.warmup_epochs)),
                learning_rate: cfg.hmc.step_size,
                clamped: 0,
                rejected: chain.proposed - chain.accepted,
            });
            posterior
        }
    };
    Ok(TrainOutcome { posterior, log })
}

fn potential_loss(objective: &NetworkObjective, w: &[f64]) -> Result<f64> {
    let all: Vec<usize> = (0..objective.data_len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let ev = objective.evaluate(w, &all, crate::robust_likelihood::GradientMode::None, &mut rng)?;
    Ok(ev.nll_sum / all.len() as f64)
}

/// Writes the training log as CSV with a header row.
pub fn write_log_csv(mut out: impl std::io::Write, log: &[EpochLog]) -> Result<()> {
    writeln!(out, "epoch,loss,accuracy,eta,learning_rate,clamped,rejected")?;
    for r in log {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.epoch, r.loss, r.accuracy, r.eta, r.learning_rate, r.clamped, r.rejected
        )?;
    }
    Ok(())
}
