//! WebAssembly bindings for the browser demo in `www/`.
//!
//! A small Bayesian network is trained on a 2-D toy problem when the page
//! loads; the page then queries certificates, radii and the entropy field.

use certbnn::certification::{certify_point, max_certified_radius, DEFAULT_RADIUS_TOL};
use certbnn::data::{make_toy_dataset, ToyKind};
use certbnn::inference::sample_posterior;
use certbnn::interval_bound::Ball;
use certbnn::robust_likelihood::EpsilonDistribution;
use certbnn::training::{train, LikelihoodKind, Method, TrainConfig};
use certbnn::uncertainty::point_uncertainty;
use certbnn::{Dataset, Ensemble, NetworkArchitecture, Result, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use wasm_bindgen::prelude::*;

const SAMPLES: usize = 20;

fn js(e: certbnn::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// The trained ensemble and its data, independent of the JS bindings.
pub struct Model {
    data: Dataset,
    ensemble: Ensemble,
    final_loss: f64,
}

#[derive(Serialize)]
struct Certificate {
    plain: Vec<f64>,
    worst_case: Vec<f64>,
    certified: bool,
    /// Per-sample logit bounds, `[sample][class]`.
    lower: Vec<Vec<f64>>,
    upper: Vec<Vec<f64>>,
}

impl Model {
    /// Trains a 2-16-2 network with natural-gradient VI. `toy` is
    /// `two_gaussians` or `xor`; `likelihood` is `standard` or `ibp`.
    pub fn train(toy: &str, likelihood: &str, eta: f64, seed: u64) -> Result<Self> {
        let kind = match toy {
            "xor" => ToyKind::Xor,
            _ => ToyKind::TwoGaussians,
        };
        let likelihood: LikelihoodKind = likelihood.parse()?;
        let data = make_toy_dataset(kind, 200, seed)?;
        let arch = NetworkArchitecture::mlp(2, &[16], 2)?;
        let mut cfg = TrainConfig::new(Method::Natgrad, likelihood);
        cfg.epochs = 30;
        cfg.batch_size = 20;
        cfg.learning_rate = 0.05;
        cfg.prior_scaling = 1.0;
        cfg.clip = None;
        cfg.warmup_epochs = 10.0;
        cfg.seed = seed;
        if likelihood != LikelihoodKind::Standard {
            cfg.p_eps = EpsilonDistribution::discrete(0.25, eta)?;
        }
        let out = train(&arch, &data, &cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let samples = sample_posterior(&out.posterior, SAMPLES, &mut rng)?;
        Ok(Self {
            data,
            ensemble: Ensemble::new(&arch, &samples)?,
            final_loss: out.log.last().map_or(f64::NAN, |r| r.loss),
        })
    }

    pub fn points(&self) -> Vec<f64> {
        self.data
            .examples()
            .iter()
            .flat_map(|e| [e.input.data()[0], e.input.data()[1], e.label as f64])
            .collect()
    }

    pub fn certify(&self, x: f64, y: f64, label: usize, eps: f64) -> Result<String> {
        let p = Tensor::vector(vec![x, y]);
        let ball = Ball::new(eps, None)?;
        let c = certify_point(&self.ensemble, &p, label, &ball)?;
        let mut lower = Vec::new();
        let mut upper = Vec::new();
        for m in self.ensemble.members() {
            let b = m.ibp(&p, &ball)?;
            lower.push(b.lower.data().to_vec());
            upper.push(b.upper.data().to_vec());
        }
        let cert = Certificate {
            plain: c.plain.data().to_vec(),
            worst_case: c.worst_case.data().to_vec(),
            certified: c.certified,
            lower,
            upper,
        };
        Ok(serde_json::to_string(&cert).expect("certificate serializes"))
    }

    pub fn radius(&self, x: f64, y: f64) -> Result<f64> {
        let p = Tensor::vector(vec![x, y]);
        let label = self.ensemble.classify(&p)?;
        max_certified_radius(&self.ensemble, &p, label, None, DEFAULT_RADIUS_TOL)
    }

    pub fn field(&self, res: usize, lo: f64, hi: f64) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(2 * res * res);
        let step = (hi - lo) / (res.max(2) - 1) as f64;
        for r in 0..res {
            for c in 0..res {
                let p = Tensor::vector(vec![lo + c as f64 * step, hi - r as f64 * step]);
                let u = point_uncertainty(&self.ensemble, &p)?;
                out.push(self.ensemble.predict(&p)?.data()[1]);
                out.push(u.mean_sample_entropy);
            }
        }
        Ok(out)
    }
}

#[wasm_bindgen]
pub struct Demo(Model);

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(toy: &str, likelihood: &str, eta: f64, seed: u32) -> std::result::Result<Demo, JsError> {
        Model::train(toy, likelihood, eta, seed as u64).map(Demo).map_err(js)
    }

    #[wasm_bindgen(getter)]
    pub fn final_loss(&self) -> f64 {
        self.0.final_loss
    }

    /// Training points as `x, y, label` triples.
    pub fn points(&self) -> Vec<f64> {
        self.0.points()
    }

    /// Certificate for the box of half-width `eps` around `(x, y)`, as JSON.
    pub fn certify(&self, x: f64, y: f64, label: usize, eps: f64) -> std::result::Result<String, JsError> {
        self.0.certify(x, y, label, eps).map_err(js)
    }

    /// Largest certified half-width at `(x, y)` for the predicted class.
    pub fn radius(&self, x: f64, y: f64) -> std::result::Result<f64, JsError> {
        self.0.radius(x, y).map_err(js)
    }

    /// `res × res` grid over `[lo, hi]²`, row-major from the top: pairs of
    /// (probability of class 1, mean predictive entropy).
    pub fn field(&self, res: usize, lo: f64, hi: f64) -> std::result::Result<Vec<f64>, JsError> {
        self.0.field(res, lo, hi).map_err(js)
    }
}
