use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use certbnn::attacks::robust_flags;
use certbnn::certification::{certified_radii, certify_point};
use certbnn::inference::{read_posterior, sample_posterior, write_posterior, Posterior};
use certbnn::interval_bound::Ball;
use certbnn::network::write_weight_samples;
use certbnn::training::{train as train_posterior, write_log_csv};
use certbnn::uncertainty::{dataset_uncertainty, likelihood_ratio_from, Histogram, PointUncertainty};
use certbnn::{Dataset, Ensemble, NetworkArchitecture};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::Config;
use crate::{CliError, Common, EvalArgs};

/// Stream of the run seed reserved for drawing posterior samples.
const SAMPLE_STREAM: u64 = 10;

pub struct Context {
    pub config: Config,
    pub seed: u64,
    pub out_dir: PathBuf,
}

impl Context {
    pub fn new(common: &Common) -> Result<Self, CliError> {
        let config = Config::load(&common.config)?;
        let seed = common.seed.unwrap_or(config.seed);
        std::fs::create_dir_all(&common.out_dir)?;
        Ok(Self {
            config,
            seed,
            out_dir: common.out_dir.clone(),
        })
    }

    fn out(&self, name: &str) -> PathBuf {
        self.out_dir.join(name)
    }

    fn epsilon(&self, eval: &EvalArgs) -> Result<f64, CliError> {
        let eps = eval.epsilon.unwrap_or(self.config.eval.epsilon);
        if eps.is_nan() || eps < 0.0 {
            return Err(CliError::Core(certbnn::Error::Usage(format!(
                "epsilon must be non-negative, got {eps}"
            ))));
        }
        Ok(eps)
    }

    /// Loads the posterior and draws the `N` samples used by every evaluation
    /// command; also writes them to `samples.bin`.
    fn ensemble(&self, eval: &EvalArgs) -> Result<(NetworkArchitecture, Ensemble, usize), CliError> {
        let path = eval.posterior.clone().unwrap_or_else(|| self.out("posterior.bin"));
        let (arch, post) = read_posterior(std::io::BufReader::new(open(&path)?))?;
        let default_n = if matches!(post, Posterior::Samples(_)) { 25 } else { 100 };
        let n = eval.samples.or(self.config.eval.samples).unwrap_or(default_n);
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(SAMPLE_STREAM);
        let samples = sample_posterior(&post, n, &mut rng)?;
        write_weight_samples(create(&self.out("samples.bin"))?, &samples)?;
        Ok((arch.clone(), Ensemble::new(&arch, &samples)?, n))
    }

    fn test_data(&self, arch: &NetworkArchitecture) -> Result<Dataset, CliError> {
        let d = self.config.test_data()?;
        check_shape(arch, &d)?;
        Ok(d)
    }
}

fn open(path: &Path) -> Result<File, CliError> {
    File::open(path).map_err(|e| CliError::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    Ok(BufWriter::new(File::create(path)?))
}

fn check_shape(arch: &NetworkArchitecture, d: &Dataset) -> Result<(), CliError> {
    if d.input_dim() != arch.input_dim() || d.class_count() != arch.class_count() {
        return Err(CliError::Config(format!(
            "data is {}→{} but the posterior network is {}→{}",
            d.input_dim(),
            d.class_count(),
            arch.input_dim(),
            arch.class_count()
        )));
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut out = create(path)?;
    serde_json::to_writer_pretty(&mut out, value)?;
    writeln!(out)?;
    out.flush()?;
    Ok(())
}

fn fraction(flags: &[bool]) -> f64 {
    flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64
}

pub fn train(ctx: &Context) -> Result<(), CliError> {
    let data = ctx.config.train_data()?;
    let arch = ctx.config.architecture(&data)?;
    let cfg = ctx.config.train_config(ctx.seed)?;
    log::info!(
        "training {} / {} on {} examples, {} parameters",
        cfg.method.name(),
        cfg.likelihood.name(),
        data.len(),
        arch.param_count()
    );
    let outcome = train_posterior(&arch, &data, &cfg)?;
    let mut out = create(&ctx.out("posterior.bin"))?;
    write_posterior(&mut out, &arch, &outcome.posterior)?;
    out.flush()?;
    let mut log_out = create(&ctx.out("train_log.csv"))?;
    write_log_csv(&mut log_out, &outcome.log)?;
    log_out.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct CertifySummary {
    accuracy: f64,
    pgd_robust_accuracy: f64,
    ibp_certified_accuracy: f64,
    epsilon: f64,
    samples: usize,
    seed: u64,
    points: usize,
}

pub fn certify(ctx: &Context, eval: &EvalArgs) -> Result<(), CliError> {
    let eps = ctx.epsilon(eval)?;
    let (arch, ens, n) = ctx.ensemble(eval)?;
    let data = ctx.test_data(&arch)?;
    let refs = data.refs();
    let ball = Ball::new(eps, ctx.config.clip())?;
    let certs = refs
        .iter()
        .map(|e| certify_point(&ens, &e.input, e.label, &ball))
        .collect::<Result<Vec<_>, _>>()?;
    let pgd = robust_flags(&ens, &refs, &ctx.config.attack(eps, ctx.seed))?;

    let mut csv = create(&ctx.out("certify.csv"))?;
    writeln!(
        csv,
        "index,label,predicted,correct,pgd_robust,certified,plain_true_prob,worst_case_true_prob"
    )?;
    let mut correct = Vec::with_capacity(refs.len());
    for (i, (e, c)) in refs.iter().zip(&certs).enumerate() {
        let predicted = certbnn::tensor::argmax(c.plain.data());
        correct.push(predicted == e.label);
        writeln!(
            csv,
            "{i},{},{predicted},{},{},{},{},{}",
            e.label,
            predicted == e.label,
            pgd[i],
            c.certified,
            c.plain.data()[e.label],
            c.worst_case.data()[e.label]
        )?;
    }
    csv.flush()?;
    let certified: Vec<bool> = certs.iter().map(|c| c.certified).collect();
    let summary = CertifySummary {
        accuracy: fraction(&correct),
        pgd_robust_accuracy: fraction(&pgd),
        ibp_certified_accuracy: fraction(&certified),
        epsilon: eps,
        samples: n,
        seed: ctx.seed,
        points: refs.len(),
    };
    log::info!(
        "accuracy {:.4}, pgd {:.4}, certified {:.4} at ε = {eps}",
        summary.accuracy,
        summary.pgd_robust_accuracy,
        summary.ibp_certified_accuracy
    );
    write_json(&ctx.out("certify.json"), &summary)
}

#[derive(Serialize)]
struct AttackSummary {
    accuracy: f64,
    pgd_robust_accuracy: f64,
    epsilon: f64,
    steps: usize,
    samples: usize,
    seed: u64,
    points: usize,
}

pub fn attack(ctx: &Context, eval: &EvalArgs) -> Result<(), CliError> {
    let eps = ctx.epsilon(eval)?;
    let (arch, ens, n) = ctx.ensemble(eval)?;
    let data = ctx.test_data(&arch)?;
    let refs = data.refs();
    let cfg = ctx.config.attack(eps, ctx.seed);
    let robust = robust_flags(&ens, &refs, &cfg)?;
    let mut csv = create(&ctx.out("attack.csv"))?;
    writeln!(csv, "index,label,predicted,correct,pgd_robust")?;
    let mut correct = Vec::with_capacity(refs.len());
    for (i, e) in refs.iter().enumerate() {
        let predicted = ens.classify(&e.input)?;
        correct.push(predicted == e.label);
        writeln!(csv, "{i},{},{predicted},{},{}", e.label, predicted == e.label, robust[i])?;
    }
    csv.flush()?;
    write_json(
        &ctx.out("attack.json"),
        &AttackSummary {
            accuracy: fraction(&correct),
            pgd_robust_accuracy: fraction(&robust),
            epsilon: eps,
            steps: cfg.steps,
            samples: n,
            seed: ctx.seed,
            points: refs.len(),
        },
    )
}

#[derive(Serialize)]
struct RadiusSummary {
    mean_radius: f64,
    tol: f64,
    samples: usize,
    seed: u64,
    points: usize,
}

pub fn radius(ctx: &Context, eval: &EvalArgs) -> Result<(), CliError> {
    let (arch, ens, n) = ctx.ensemble(eval)?;
    let data = ctx.test_data(&arch)?;
    let refs: Vec<_> = data.refs().into_iter().take(ctx.config.eval.radius_points).collect();
    let tol = ctx.config.eval.radius_tol;
    let radii = certified_radii(&ens, &refs, ctx.config.clip(), tol)?;
    let mut csv = create(&ctx.out("radius.csv"))?;
    writeln!(csv, "index,label,radius")?;
    for (i, (e, r)) in refs.iter().zip(&radii).enumerate() {
        writeln!(csv, "{i},{},{r}", e.label)?;
    }
    csv.flush()?;
    write_json(
        &ctx.out("radius.json"),
        &RadiusSummary {
            mean_radius: radii.iter().sum::<f64>() / radii.len().max(1) as f64,
            tol,
            samples: n,
            seed: ctx.seed,
            points: refs.len(),
        },
    )
}

#[derive(Serialize)]
struct UncertaintySummary {
    mean_entropy_in: f64,
    mean_entropy_out: f64,
    likelihood_ratio: f64,
    bins: usize,
    samples: usize,
    seed: u64,
    points_in: usize,
    points_out: usize,
}

fn write_points(path: &Path, stats: &[PointUncertainty]) -> Result<(), CliError> {
    let mut csv = create(path)?;
    writeln!(csv, "index,mean_sample_entropy,entropy_of_mean,max_prob")?;
    for (i, s) in stats.iter().enumerate() {
        writeln!(csv, "{i},{},{},{}", s.mean_sample_entropy, s.entropy_of_mean, s.max_prob)?;
    }
    csv.flush()?;
    Ok(())
}

fn mean_entropy(stats: &[PointUncertainty]) -> f64 {
    stats.iter().map(|s| s.mean_sample_entropy).sum::<f64>() / stats.len() as f64
}

pub fn uncertainty(ctx: &Context, eval: &EvalArgs) -> Result<(), CliError> {
    let (arch, ens, n) = ctx.ensemble(eval)?;
    let inside = ctx.test_data(&arch)?;
    let outside = ctx.config.ood_data()?;
    check_shape(&arch, &outside)?;
    let a = dataset_uncertainty(&ens, &inside.refs())?;
    let b = dataset_uncertainty(&ens, &outside.refs())?;
    if a.is_empty() || b.is_empty() {
        return Err(CliError::Config("uncertainty needs non-empty in and out sets".into()));
    }
    write_points(&ctx.out("uncertainty_in.csv"), &a)?;
    write_points(&ctx.out("uncertainty_out.csv"), &b)?;

    let bins = ctx.config.eval.bins;
    let max = (arch.class_count() as f64).ln();
    let entropies = |s: &[PointUncertainty]| s.iter().map(|p| p.mean_sample_entropy).collect::<Vec<_>>();
    let hin = Histogram::new(&entropies(&a), bins, max)?;
    let hout = Histogram::new(&entropies(&b), bins, max)?;
    let mut csv = create(&ctx.out("entropy_histogram.csv"))?;
    writeln!(csv, "bin_lo,bin_hi,count_in,count_out")?;
    for k in 0..bins {
        writeln!(csv, "{},{},{},{}", hin.edges[k], hin.edges[k + 1], hin.counts[k], hout.counts[k])?;
    }
    csv.flush()?;

    write_json(
        &ctx.out("uncertainty.json"),
        &UncertaintySummary {
            mean_entropy_in: mean_entropy(&a),
            mean_entropy_out: mean_entropy(&b),
            likelihood_ratio: likelihood_ratio_from(&a, &b),
            bins,
            samples: n,
            seed: ctx.seed,
            points_in: a.len(),
            points_out: b.len(),
        },
    )
}
