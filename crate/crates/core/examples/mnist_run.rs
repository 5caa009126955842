//! Trains one posterior on the MNIST subset and reports clean, PGD and IBP
//! accuracy at ε = 0.1.
//!
//! ```text
//! cargo run --release --example mnist_run -- natgrad ibp [epochs] [lr] [prior_scaling] [samples] [temperature] [lr_decay]
//! ```

use std::time::Instant;

use certbnn::attacks::{empirical_robust_accuracy, AttackConfig};
use certbnn::certification::certified_robust_accuracy;
use certbnn::data::load_idx_dataset;
use certbnn::inference::sample_posterior;
use certbnn::interval_bound::{Ball, ClipRange};
use certbnn::robust_likelihood::EpsilonDistribution;
use certbnn::training::{train, TrainConfig};
use certbnn::{Ensemble, NetworkArchitecture};
use rand::SeedableRng;

fn main() -> certbnn::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let arg = |i: usize, d: &str| args.get(i).cloned().unwrap_or_else(|| d.to_string());
    let dir = std::env::var("CERTBNN_DATA").unwrap_or_else(|_| "data".into());
    let train_set = load_idx_dataset(format!("{dir}/mnist-train-images.idx"), format!("{dir}/mnist-train-labels.idx"), 10)?;
    let test_set = load_idx_dataset(format!("{dir}/mnist-test-images.idx"), format!("{dir}/mnist-test-labels.idx"), 10)?;
    let arch = NetworkArchitecture::mlp(784, &[128], 10)?;

    let mut cfg = TrainConfig::new(arg(1, "natgrad").parse()?, arg(2, "ibp").parse()?);
    cfg.epochs = arg(3, "15").parse().unwrap();
    cfg.learning_rate = arg(4, "0.005").parse().unwrap();
    cfg.prior_scaling = arg(5, "5").parse().unwrap();
    cfg.p_eps = EpsilonDistribution::discrete(0.25, 0.1)?;
    cfg.warmup_epochs = cfg.epochs as f64 / 2.0;
    let n: usize = arg(6, "20").parse().unwrap();
    cfg.temperature = arg(7, "0.001").parse().unwrap();
    cfg.lr_decay = arg(8, "0.1").parse().unwrap();

    let start = Instant::now();
    let out = train(&arch, &train_set, &cfg)?;
    for r in &out.log {
        println!(
            "{:>2} loss {:.4} acc {:.4} eta {:.4} clamped {} rejected {}",
            r.epoch, r.loss, r.accuracy, r.eta, r.clamped, r.rejected
        );
    }
    println!("train {:.1}s", start.elapsed().as_secs_f64());

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
    let samples = sample_posterior(&out.posterior, n, &mut rng)?;
    let ens = Ensemble::new(&arch, &samples)?;
    let test = test_set.refs();
    let t = Instant::now();
    let acc = ens.accuracy(&test)?;
    println!("clean {acc:.4} ({:.1}s)", t.elapsed().as_secs_f64());
    for eps in [0.05, 0.1] {
        let t = Instant::now();
        let ibp = certified_robust_accuracy(&ens, &test, &Ball::new(eps, Some(ClipRange::UNIT))?)?;
        println!("ibp@{eps} {ibp:.4} ({:.1}s)", t.elapsed().as_secs_f64());
    }
    if std::env::var("PGD").is_ok() {
        let t = Instant::now();
        let attack = AttackConfig {
            clip: Some(ClipRange::UNIT),
            ..AttackConfig::new(0.1)
        };
        let pgd = empirical_robust_accuracy(&ens, &test, &attack)?;
        println!("pgd@0.1 {pgd:.4} ({:.1}s)", t.elapsed().as_secs_f64());
    }
    Ok(())
}
