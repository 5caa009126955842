//! Certification of the ensemble predictor: worst-case predictive vectors,
//! certified robust accuracy and maximal certified radius.

use crate::error::{Error, Result};
use crate::interval_bound::{Ball, ClipRange};
use crate::network::{Ensemble, Example};
use crate::par;
use crate::tensor::{argmax, Tensor};

/// Upper end of the radius search.
pub const RADIUS_CAP: f64 = 1.0;
pub const DEFAULT_RADIUS_TOL: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq)]
pub struct CertifiedPrediction {
    /// `Ê^N(x)`.
    pub plain: Tensor,
    /// Entry `y`: mean of `σ_y` at the worst-case logits. Entry `c ≠ y`: mean
    /// of `σ_c` at the best-case logits for `c`. Not normalized.
    pub worst_case: Tensor,
    pub certified: bool,
}

/// Certifies that no point of the ball changes the ensemble's argmax away from `y`.
pub fn certify_point(ensemble: &Ensemble, x: &Tensor, y: usize, ball: &Ball) -> Result<CertifiedPrediction> {
    let classes = ensemble.arch().class_count();
    if y >= classes {
        return Err(Error::usage(format!("label {y} out of range for {classes} classes")));
    }
    let n = ensemble.len() as f64;
    let mut plain = vec![0.0; classes];
    let mut worst = vec![0.0; classes];
    for m in ensemble.members() {
        let p = m.predict_proba(x)?;
        let b = m.ibp(x, ball)?;
        let (lo, hi) = (b.lower.data(), b.upper.data());
        for c in 0..classes {
            plain[c] += p.data()[c] / n;
            worst[c] += class_bound(lo, hi, c, c == y) / n;
        }
    }
    let certified = argmax(&worst) == y;
    Ok(CertifiedPrediction {
        plain: Tensor::vector(plain),
        worst_case: Tensor::vector(worst),
        certified,
    })
}

/// `σ_c` of the logits taking `lo` at `c` and `hi` elsewhere (`lower = true`),
/// or `hi` at `c` and `lo` elsewhere.
fn class_bound(lo: &[f64], hi: &[f64], c: usize, lower: bool) -> f64 {
    let (own, other) = if lower { (lo, hi) } else { (hi, lo) };
    let zc = own[c];
    let mut max = zc;
    for (j, &z) in other.iter().enumerate() {
        if j != c {
            max = max.max(z);
        }
    }
    let mut denom = 0.0;
    for (j, &z) in other.iter().enumerate() {
        if j != c {
            denom += (z - max).exp();
        }
    }
    let num = (zc - max).exp();
    num / (num + denom)
}

/// Fraction of points certified at radius `epsilon`: a lower bound on the
/// robust accuracy of the ensemble.
pub fn certified_robust_accuracy(ensemble: &Ensemble, data: &[&Example], ball: &Ball) -> Result<f64> {
    let flags = certified_flags(ensemble, data, ball)?;
    Ok(flags.iter().filter(|&&f| f).count() as f64 / flags.len() as f64)
}

pub fn certified_flags(ensemble: &Ensemble, data: &[&Example], ball: &Ball) -> Result<Vec<bool>> {
    if data.is_empty() {
        return Err(Error::usage("certified accuracy of an empty set"));
    }
    par::map(data, |e| certify_point(ensemble, &e.input, e.label, ball).map(|c| c.certified))
        .into_iter()
        .collect()
}

/// Largest radius (to within `tol`) at which the point is certified; 0 when
/// it is misclassified. The bracket doubles from `tol` up to [`RADIUS_CAP`].
pub fn max_certified_radius(ensemble: &Ensemble, x: &Tensor, y: usize, clip: Option<ClipRange>, tol: f64) -> Result<f64> {
    if !(tol > 0.0) {
        return Err(Error::usage(format!("radius tolerance must be positive, got {tol}")));
    }
    let certified = |eps: f64| -> Result<bool> { Ok(certify_point(ensemble, x, y, &Ball::new(eps, clip)?)?.certified) };
    if !certified(0.0)? {
        return Ok(0.0);
    }
    let mut lo = 0.0;
    let mut hi = tol.min(RADIUS_CAP);
    loop {
        if !certified(hi)? {
            break;
        }
        lo = hi;
        if hi >= RADIUS_CAP {
            return Ok(RADIUS_CAP);
        }
        hi = (hi * 2.0).min(RADIUS_CAP);
    }
    while hi - lo > tol {
        let mid = 0.5 * (lo + hi);
        if certified(mid)? {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(lo)
}

/// [`max_certified_radius`] for every point.
pub fn certified_radii(ensemble: &Ensemble, data: &[&Example], clip: Option<ClipRange>, tol: f64) -> Result<Vec<f64>> {
    par::map(data, |e| max_certified_radius(ensemble, &e.input, e.label, clip, tol))
        .into_iter()
        .collect()
}
