//! Interval bound propagation (IBP) and the worst-case softmax lower bound.

use std::sync::Arc;

use crate::autodiff::TensorOps;
use crate::error::{Error, Result};
use crate::network::{DenseParams, LayerKind, Network, NetworkArchitecture, WeightVector};
use crate::tensor::Tensor;

/// Closed range the input coordinates must stay in.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ClipRange {
    pub lo: f64,
    pub hi: f64,
}

impl ClipRange {
    /// Valid pixel intensities.
    pub const UNIT: ClipRange = ClipRange { lo: 0.0, hi: 1.0 };
}

/// The ℓ∞ perturbation set `{x' : |x - x'|_∞ ≤ ε}`, optionally intersected
/// with a clip range.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ball {
    pub epsilon: f64,
    pub clip: Option<ClipRange>,
}

impl Ball {
    pub fn new(epsilon: f64, clip: Option<ClipRange>) -> Result<Self> {
        if !(epsilon >= 0.0) || !epsilon.is_finite() {
            return Err(Error::usage(format!("epsilon must be finite and non-negative, got {epsilon}")));
        }
        Ok(Self { epsilon, clip })
    }

    pub fn with_epsilon(self, epsilon: f64) -> Result<Self> {
        Self::new(epsilon, self.clip)
    }

    /// Projects `x` onto the ball around `center`.
    pub fn project(&self, center: &[f64], x: &mut [f64]) {
        for (v, &c) in x.iter_mut().zip(center) {
            let (lo, hi) = self.coordinate_range(c);
            *v = v.clamp(lo, hi);
        }
    }

    fn coordinate_range(&self, c: f64) -> (f64, f64) {
        let (mut lo, mut hi) = (c - self.epsilon, c + self.epsilon);
        if let Some(clip) = self.clip {
            lo = lo.max(clip.lo).min(clip.hi);
            hi = hi.min(clip.hi).max(clip.lo);
        }
        (lo, hi)
    }
}

/// An axis-aligned box `[lower, upper]`.
#[derive(Clone, Debug)]
pub struct Interval<T> {
    pub lower: T,
    pub upper: T,
}

pub type IntervalTensor = Interval<Tensor>;

impl IntervalTensor {
    pub fn new(lower: Tensor, upper: Tensor) -> Result<Self> {
        lower.check_same_shape(&upper, "interval")?;
        for (i, (l, u)) in lower.data().iter().zip(upper.data()).enumerate() {
            if !l.is_finite() || !u.is_finite() {
                return Err(Error::numeric("interval", format!("non-finite bound at {i}")));
            }
            if l > u {
                return Err(Error::usage(format!("interval bound inverted at {i}: {l} > {u}")));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn point(x: Tensor) -> Self {
        Self {
            lower: x.clone(),
            upper: x,
        }
    }

    pub fn contains(&self, x: &Tensor) -> bool {
        x.shape() == self.lower.shape()
            && x.data()
                .iter()
                .zip(self.lower.data().iter().zip(self.upper.data()))
                .all(|(v, (l, u))| l <= v && v <= u)
    }

    /// Largest width `U - L` across coordinates.
    pub fn max_width(&self) -> f64 {
        self.lower
            .data()
            .iter()
            .zip(self.upper.data())
            .map(|(l, u)| u - l)
            .fold(0.0, f64::max)
    }
}

/// `[x − ε, x + ε]`, intersected with the clip range if one is set.
pub fn input_ball(x: &Tensor, ball: &Ball) -> Result<IntervalTensor> {
    Ball::new(ball.epsilon, ball.clip)?;
    let (lower, upper): (Vec<f64>, Vec<f64>) = x.data().iter().map(|&c| ball.coordinate_range(c)).unzip();
    IntervalTensor::new(Tensor::new(x.shape().to_vec(), lower)?, Tensor::new(x.shape().to_vec(), upper)?)
}

fn affine<T: TensorOps>(weight: &T, bias: &T, b: &Interval<T>) -> Result<Interval<T>> {
    let mid = b.upper.add(&b.lower)?.scale(0.5);
    let rad = b.upper.sub(&b.lower)?.scale(0.5);
    let mu = weight.matmul(&mid)?.add(bias)?;
    let r = weight.abs().matmul(&rad)?;
    Ok(Interval {
        lower: mu.sub(&r)?,
        upper: mu.add(&r)?,
    })
}

/// Propagates a box through `W x + b` using its centre and radius.
pub fn propagate_affine(weight: &Tensor, bias: &Tensor, b: &IntervalTensor) -> Result<IntervalTensor> {
    let arc = |t: &Tensor| Arc::new(t.clone());
    let out = affine(
        &arc(weight),
        &arc(bias),
        &Interval {
            lower: arc(&b.lower),
            upper: arc(&b.upper),
        },
    )?;
    Ok(Interval {
        lower: Arc::unwrap_or_clone(out.lower),
        upper: Arc::unwrap_or_clone(out.upper),
    })
}

/// Applies a monotone non-decreasing elementwise `h` to both bounds.
/// Fails when the images come out inverted, which exposes a decreasing `h`.
pub fn propagate_monotone_activation(h: impl Fn(f64) -> f64, b: &IntervalTensor) -> Result<IntervalTensor> {
    let lower = b.lower.map(&h);
    let upper = b.upper.map(&h);
    if lower.data().iter().zip(upper.data()).any(|(l, u)| l > u) {
        return Err(Error::usage("activation is not monotone non-decreasing on this box"));
    }
    IntervalTensor::new(lower, upper)
}

/// Generic IBP through all layers; used eagerly and on the autodiff tape.
pub fn ibp_forward_with<T: TensorOps>(arch: &NetworkArchitecture, params: &[DenseParams<T>], input: Interval<T>) -> Result<Interval<T>> {
    if input.lower.value().shape() != [arch.input_dim()] {
        return Err(Error::dim(
            "ibp_forward",
            format!(
                "input shape {:?}, network expects [{}]",
                input.lower.value().shape(),
                arch.input_dim()
            ),
        ));
    }
    let mut b = input;
    let mut dense = params.iter();
    for l in arch.layers() {
        b = match l.kind {
            LayerKind::Dense => {
                let p = dense.next().ok_or_else(|| Error::usage("missing dense parameters"))?;
                affine(&p.weight, &p.bias, &b)?
            }
            LayerKind::Relu => Interval {
                lower: b.lower.relu(),
                upper: b.upper.relu(),
            },
        };
    }
    Ok(b)
}

impl Network {
    /// Logit bounds over the ball around `x`.
    pub fn ibp(&self, x: &Tensor, ball: &Ball) -> Result<IntervalTensor> {
        let input = input_ball(x, ball)?;
        let out = ibp_forward_with(
            self.arch(),
            self.params(),
            Interval {
                lower: Arc::new(input.lower),
                upper: Arc::new(input.upper),
            },
        )?;
        IntervalTensor::new(Arc::unwrap_or_clone(out.lower), Arc::unwrap_or_clone(out.upper))
    }
}

/// Logit bounds `[f^{w,L,ε}, f^{w,U,ε}]` over the ball around `x`.
pub fn ibp_forward(arch: &NetworkArchitecture, w: &WeightVector, x: &Tensor, ball: &Ball) -> Result<IntervalTensor> {
    Network::new(arch, w)?.ibp(x, ball)
}

/// Lower bound at `class`, upper bound elsewhere.
#[derive(Clone, Debug, PartialEq)]
pub struct WorstCaseLogits {
    pub values: Tensor,
    pub target_class: usize,
}

fn class_mask(len: usize, class: usize) -> Result<Vec<bool>> {
    if class >= len {
        return Err(Error::usage(format!("class {class} out of range for {len} logits")));
    }
    Ok((0..len).map(|j| j == class).collect())
}

pub(crate) fn worst_case_with<T: TensorOps>(b: &Interval<T>, y: usize) -> Result<T> {
    let mask = class_mask(b.lower.value().len(), y)?;
    b.lower.select(&b.upper, &mask)
}

pub(crate) fn best_case_with<T: TensorOps>(b: &Interval<T>, c: usize) -> Result<T> {
    let mask = class_mask(b.lower.value().len(), c)?;
    b.upper.select(&b.lower, &mask)
}

pub fn worst_case_logits(b: &IntervalTensor, y: usize) -> Result<WorstCaseLogits> {
    let arc = Interval {
        lower: Arc::new(b.lower.clone()),
        upper: Arc::new(b.upper.clone()),
    };
    Ok(WorstCaseLogits {
        values: Arc::unwrap_or_clone(worst_case_with(&arc, y)?),
        target_class: y,
    })
}

/// Upper bound at `c`, lower bound elsewhere.
pub fn best_case_logits(b: &IntervalTensor, c: usize) -> Result<Tensor> {
    let arc = Interval {
        lower: Arc::new(b.lower.clone()),
        upper: Arc::new(b.upper.clone()),
    };
    Ok(Arc::unwrap_or_clone(best_case_with(&arc, c)?))
}

/// `σ_y` of the worst-case logits: a lower bound on the smallest softmax
/// probability of `y` over the ball.
pub fn ibp_softmax_lower(arch: &NetworkArchitecture, w: &WeightVector, x: &Tensor, y: usize, ball: &Ball) -> Result<f64> {
    let b = ibp_forward(arch, w, x, ball)?;
    let worst = worst_case_logits(&b, y)?;
    Ok(worst.values.softmax()?.data()[y])
}
