//! Feed-forward architectures, the flat weight vector, forward evaluation
//! and the standard softmax likelihood.

use std::io::{Read, Write};
use std::sync::Arc;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::autodiff::{Gradients, Tape, TensorOps, Var};
use crate::error::{Error, Result};
use crate::par;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LayerKind {
    Dense,
    Relu,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub input_width: usize,
    pub output_width: usize,
}

impl LayerSpec {
    pub fn dense(input_width: usize, output_width: usize) -> Self {
        Self {
            kind: LayerKind::Dense,
            input_width,
            output_width,
        }
    }

    pub fn relu(width: usize) -> Self {
        Self {
            kind: LayerKind::Relu,
            input_width: width,
            output_width: width,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NetworkArchitecture {
    layers: Vec<LayerSpec>,
    input_dim: usize,
    class_count: usize,
}

impl NetworkArchitecture {
    pub fn new(layers: Vec<LayerSpec>) -> Result<Self> {
        let first = layers.first().ok_or_else(|| Error::usage("architecture has no layers"))?;
        let last = layers.last().expect("non-empty");
        if last.kind != LayerKind::Dense {
            return Err(Error::usage("final layer must be dense"));
        }
        for pair in layers.windows(2) {
            if pair[0].output_width != pair[1].input_width {
                return Err(Error::usage(format!(
                    "layer widths do not chain: {} -> {}",
                    pair[0].output_width, pair[1].input_width
                )));
            }
        }
        for l in &layers {
            if l.input_width == 0 || l.output_width == 0 {
                return Err(Error::usage("layer widths must be positive"));
            }
            if l.kind == LayerKind::Relu && l.input_width != l.output_width {
                return Err(Error::usage("activation layers preserve width"));
            }
        }
        Ok(Self {
            input_dim: first.input_width,
            class_count: last.output_width,
            layers,
        })
    }

    /// Dense/ReLU stack: `input -> hidden[0] -> ... -> classes`.
    pub fn mlp(input_dim: usize, hidden: &[usize], class_count: usize) -> Result<Self> {
        let mut layers = Vec::new();
        let mut width = input_dim;
        for &h in hidden {
            layers.push(LayerSpec::dense(width, h));
            layers.push(LayerSpec::relu(h));
            width = h;
        }
        layers.push(LayerSpec::dense(width, class_count));
        Self::new(layers)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    /// Number of dense layers.
    pub fn depth(&self) -> usize {
        self.dense_layers().count()
    }

    /// Hidden widths, i.e. the inverse of [`NetworkArchitecture::mlp`] for MLPs.
    pub fn hidden_widths(&self) -> Vec<usize> {
        let dense: Vec<_> = self.dense_layers().collect();
        dense[..dense.len() - 1].iter().map(|l| l.output_width).collect()
    }

    pub fn dense_layers(&self) -> impl Iterator<Item = &LayerSpec> {
        self.layers.iter().filter(|l| l.kind == LayerKind::Dense)
    }

    pub fn param_count(&self) -> usize {
        self.dense_layers().map(|l| l.input_width * l.output_width + l.output_width).sum()
    }

    /// Per-parameter standard deviation of fan-in Gaussian initialization.
    pub fn init_std(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in self.dense_layers() {
            let std = (1.0 / l.input_width as f64).sqrt();
            out.extend(std::iter::repeat_n(std, l.input_width * l.output_width + l.output_width));
        }
        out
    }
}

/// Flat parameter vector. Layout: for each dense layer in order, the weight
/// matrix row-major `[out, in]`, then the bias `[out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightVector(Vec<f64>);

impl WeightVector {
    pub fn new(arch: &NetworkArchitecture, values: Vec<f64>) -> Result<Self> {
        if values.len() != arch.param_count() {
            return Err(Error::dim(
                "weights",
                format!("architecture needs {} parameters, got {}", arch.param_count(), values.len()),
            ));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric("weights", "non-finite parameter"));
        }
        Ok(Self(values))
    }

    pub fn from_values(values: Vec<f64>) -> Self {
        Self(values)
    }

    pub fn zeros(arch: &NetworkArchitecture) -> Self {
        Self(vec![0.0; arch.param_count()])
    }

    /// Fan-in Gaussian weights, zero biases.
    pub fn initialize(arch: &NetworkArchitecture, rng: &mut impl Rng) -> Self {
        let mut values = Vec::with_capacity(arch.param_count());
        for l in arch.dense_layers() {
            let std = (1.0 / l.input_width as f64).sqrt();
            for _ in 0..l.input_width * l.output_width {
                let z: f64 = rng.sample(StandardNormal);
                values.push(std * z);
            }
            values.extend(std::iter::repeat_n(0.0, l.output_width));
        }
        Self(values)
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }

    pub fn into_values(self) -> Vec<f64> {
        self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Weight matrix and bias of one dense layer.
#[derive(Clone, Debug)]
pub struct DenseParams<T> {
    pub weight: T,
    pub bias: T,
}

pub fn unpack(arch: &NetworkArchitecture, w: &WeightVector) -> Result<Vec<DenseParams<Tensor>>> {
    if w.len() != arch.param_count() {
        return Err(Error::dim(
            "unpack",
            format!("expected {} parameters, got {}", arch.param_count(), w.len()),
        ));
    }
    let mut offset = 0;
    let mut out = Vec::with_capacity(arch.depth());
    for l in arch.dense_layers() {
        let (n_in, n_out) = (l.input_width, l.output_width);
        let weight = Tensor::matrix(n_out, n_in, w.0[offset..offset + n_in * n_out].to_vec())?;
        offset += n_in * n_out;
        let bias = Tensor::vector(w.0[offset..offset + n_out].to_vec());
        offset += n_out;
        out.push(DenseParams { weight, bias });
    }
    Ok(out)
}

pub fn pack(arch: &NetworkArchitecture, params: &[DenseParams<Tensor>]) -> Result<WeightVector> {
    let mut values = Vec::with_capacity(arch.param_count());
    let dense: Vec<_> = arch.dense_layers().collect();
    if dense.len() != params.len() {
        return Err(Error::dim(
            "pack",
            format!("{} layers vs {} parameter blocks", dense.len(), params.len()),
        ));
    }
    for (l, p) in dense.iter().zip(params) {
        if p.weight.shape() != [l.output_width, l.input_width] || p.bias.shape() != [l.output_width] {
            return Err(Error::dim("pack", "parameter block shape does not match layer"));
        }
        values.extend_from_slice(p.weight.data());
        values.extend_from_slice(p.bias.data());
    }
    WeightVector::new(arch, values)
}

/// Generic forward pass shared by eager and traced evaluation.
pub fn forward_with<T: TensorOps>(arch: &NetworkArchitecture, params: &[DenseParams<T>], x: T) -> Result<T> {
    if x.value().shape() != [arch.input_dim()] {
        return Err(Error::dim(
            "forward",
            format!("input shape {:?}, network expects [{}]", x.value().shape(), arch.input_dim()),
        ));
    }
    let mut h = x;
    let mut dense = params.iter();
    for l in arch.layers() {
        h = match l.kind {
            LayerKind::Dense => {
                let p = dense.next().ok_or_else(|| Error::usage("missing dense parameters"))?;
                p.weight.matmul(&h)?.add(&p.bias)?
            }
            LayerKind::Relu => h.relu(),
        };
    }
    Ok(h)
}

/// A weight sample unpacked into per-layer tensors, ready for repeated evaluation.
#[derive(Clone, Debug)]
pub struct Network {
    arch: NetworkArchitecture,
    params: Vec<DenseParams<Arc<Tensor>>>,
}

impl Network {
    pub fn new(arch: &NetworkArchitecture, w: &WeightVector) -> Result<Self> {
        let params = unpack(arch, w)?
            .into_iter()
            .map(|p| DenseParams {
                weight: Arc::new(p.weight),
                bias: Arc::new(p.bias),
            })
            .collect();
        Ok(Self {
            arch: arch.clone(),
            params,
        })
    }

    pub fn arch(&self) -> &NetworkArchitecture {
        &self.arch
    }

    pub fn params(&self) -> &[DenseParams<Arc<Tensor>>] {
        &self.params
    }

    /// Logits `f^w(x)`.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let out = forward_with(&self.arch, &self.params, Arc::new(x.clone()))?;
        Ok(Arc::unwrap_or_clone(out))
    }

    pub fn predict_proba(&self, x: &Tensor) -> Result<Tensor> {
        self.forward(x)?.softmax()
    }

    /// Records the parameters on `tape`, as leaves or as constants.
    pub fn trace<'t>(&self, tape: &'t Tape, as_leaves: bool) -> Vec<DenseParams<Var<'t>>> {
        self.params
            .iter()
            .map(|p| {
                let f = |t: &Arc<Tensor>| {
                    if as_leaves {
                        tape.leaf(Arc::clone(t))
                    } else {
                        tape.constant(Arc::clone(t))
                    }
                };
                DenseParams {
                    weight: f(&p.weight),
                    bias: f(&p.bias),
                }
            })
            .collect()
    }
}

/// Flattens gradients for traced parameters into weight-vector layout.
pub fn flatten_gradients(params: &[DenseParams<Var<'_>>], grads: &Gradients, out: &mut Vec<f64>) {
    out.clear();
    for p in params {
        out.extend_from_slice(grads.wrt(&p.weight).data());
        out.extend_from_slice(grads.wrt(&p.bias).data());
    }
}

pub fn forward(arch: &NetworkArchitecture, w: &WeightVector, x: &Tensor) -> Result<Tensor> {
    Network::new(arch, w)?.forward(x)
}

/// One labelled input.
#[derive(Clone, Debug, PartialEq)]
pub struct Example {
    pub input: Tensor,
    pub label: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    examples: Vec<Example>,
    class_count: usize,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, class_count: usize) -> Result<Self> {
        if let Some(first) = examples.first() {
            let shape = first.input.shape().to_vec();
            for (i, e) in examples.iter().enumerate() {
                if e.label >= class_count {
                    return Err(Error::usage(format!("example {i}: label {} >= {class_count} classes", e.label)));
                }
                if e.input.shape() != shape.as_slice() {
                    return Err(Error::dim("dataset", format!("example {i} has shape {:?}", e.input.shape())));
                }
            }
        }
        Ok(Self { examples, class_count })
    }

    pub fn from_parts(inputs: Vec<Tensor>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::dim("dataset", format!("{} inputs vs {} labels", inputs.len(), labels.len())));
        }
        let examples = inputs
            .into_iter()
            .zip(labels)
            .map(|(input, label)| Example { input, label })
            .collect();
        Self::new(examples, class_count)
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_count(&self) -> usize {
        self.class_count
    }

    pub fn input_dim(&self) -> usize {
        self.examples.first().map_or(0, |e| e.input.len())
    }

    /// References to the examples at `indices`.
    pub fn batch(&self, indices: &[usize]) -> Vec<&Example> {
        indices.iter().map(|&i| &self.examples[i]).collect()
    }

    pub fn refs(&self) -> Vec<&Example> {
        self.examples.iter().collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.examples.iter().map(|e| e.label).collect()
    }
}

/// `-log σ_y(f^w(x))` for one example.
pub(crate) fn example_nll<T: TensorOps>(arch: &NetworkArchitecture, params: &[DenseParams<T>], x: T, y: usize) -> Result<T> {
    Ok(forward_with(arch, params, x)?.log_softmax()?.pick(y)?.scale(-1.0))
}

/// Sum over the batch of `-log σ_y(f^w(x))`.
pub fn standard_nll(arch: &NetworkArchitecture, w: &WeightVector, batch: &[&Example]) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::usage("standard_nll on an empty batch"));
    }
    let net = Network::new(arch, w)?;
    let chunks: Vec<&[&Example]> = batch.chunks(par::CHUNK).collect();
    let sums = par::map(&chunks, |chunk| {
        let mut s = 0.0;
        for e in *chunk {
            s += example_nll(arch, &net.params, Arc::new(e.input.clone()), e.label)?.value().item();
        }
        Ok::<f64, Error>(s)
    });
    let mut total = 0.0;
    for s in sums {
        total += s?;
    }
    Ok(total)
}

/// An ensemble of posterior weight samples; evaluates the empirical predictive mean.
#[derive(Clone, Debug)]
pub struct Ensemble {
    arch: NetworkArchitecture,
    members: Vec<Network>,
}

impl Ensemble {
    pub fn new(arch: &NetworkArchitecture, samples: &[WeightVector]) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::usage("ensemble needs at least one weight sample"));
        }
        let members = samples.iter().map(|w| Network::new(arch, w)).collect::<Result<_>>()?;
        Ok(Self {
            arch: arch.clone(),
            members,
        })
    }

    pub fn arch(&self) -> &NetworkArchitecture {
        &self.arch
    }

    pub fn members(&self) -> &[Network] {
        &self.members
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    /// Per-member softmax outputs.
    pub fn member_probabilities(&self, x: &Tensor) -> Result<Vec<Tensor>> {
        self.members.iter().map(|m| m.predict_proba(x)).collect()
    }

    /// `(1/N) Σ σ(f^{w_i}(x))`.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let probs = self.member_probabilities(x)?;
        Ok(mean_of(&probs))
    }

    pub fn classify(&self, x: &Tensor) -> Result<usize> {
        Ok(self.predict(x)?.argmax())
    }

    /// Fraction of examples whose predicted class matches the label.
    pub fn accuracy(&self, data: &[&Example]) -> Result<f64> {
        if data.is_empty() {
            return Err(Error::usage("accuracy of an empty set"));
        }
        let hits = par::map(data, |e| self.classify(&e.input).map(|c| c == e.label));
        let mut correct = 0usize;
        for h in hits {
            correct += usize::from(h?);
        }
        Ok(correct as f64 / data.len() as f64)
    }
}

pub(crate) fn mean_of(tensors: &[Tensor]) -> Tensor {
    let mut acc = Tensor::zeros(tensors[0].shape());
    for t in tensors {
        for (a, v) in acc.data_mut().iter_mut().zip(t.data()) {
            *a += v;
        }
    }
    let n = tensors.len() as f64;
    acc.map(|v| v / n)
}

/// Empirical predictive `Ê^N(x)`.
pub fn predict_ensemble(arch: &NetworkArchitecture, samples: &[WeightVector], x: &Tensor) -> Result<Tensor> {
    Ensemble::new(arch, samples)?.predict(x)
}

const SAMPLES_MAGIC: &[u8; 4] = b"CBNW";

/// Writes weight samples as: magic `CBNW`, `n_w: u64`, `N: u64`, then
/// `N * n_w` little-endian `f64`.
pub fn write_weight_samples(mut out: impl Write, samples: &[WeightVector]) -> Result<()> {
    let n_w = samples.first().map_or(0, WeightVector::len);
    if samples.iter().any(|s| s.len() != n_w) {
        return Err(Error::usage("weight samples differ in length"));
    }
    out.write_all(SAMPLES_MAGIC)?;
    out.write_all(&(n_w as u64).to_le_bytes())?;
    out.write_all(&(samples.len() as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(n_w * 8);
    for s in samples {
        buf.clear();
        for v in s.values() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf)?;
    }
    Ok(())
}

pub(crate) fn read_exact_at(input: &mut impl Read, buf: &mut [u8], offset: &mut u64) -> Result<()> {
    input.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::Format {
                offset: *offset,
                detail: format!("truncated: needed {} more bytes", buf.len()),
            }
        } else {
            Error::Io(e)
        }
    })?;
    *offset += buf.len() as u64;
    Ok(())
}

pub(crate) fn read_u64(input: &mut impl Read, offset: &mut u64) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_at(input, &mut b, offset)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64s(input: &mut impl Read, n: usize, offset: &mut u64) -> Result<Vec<f64>> {
    let mut raw = vec![0u8; n * 8];
    read_exact_at(input, &mut raw, offset)?;
    Ok(raw
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect())
}

pub fn read_weight_samples(mut input: impl Read) -> Result<Vec<WeightVector>> {
    let mut offset = 0u64;
    read_weight_samples_at(&mut input, &mut offset)
}

pub(crate) fn read_weight_samples_at(input: &mut impl Read, offset: &mut u64) -> Result<Vec<WeightVector>> {
    let mut magic = [0u8; 4];
    let start = *offset;
    read_exact_at(input, &mut magic, offset)?;
    if &magic != SAMPLES_MAGIC {
        return Err(Error::Format {
            offset: start,
            detail: format!("bad magic {magic:?}, expected {SAMPLES_MAGIC:?}"),
        });
    }
    let n_w = read_u64(input, offset)? as usize;
    let count = read_u64(input, offset)? as usize;
    if n_w.checked_mul(count).and_then(|v| v.checked_mul(8)).is_none() {
        return Err(Error::Format {
            offset: *offset,
            detail: "sample block size overflows".into(),
        });
    }
    (0..count).map(|_| read_f64s(input, n_w, offset).map(WeightVector)).collect()
}
