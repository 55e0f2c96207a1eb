//! Datasets, shards and the compact classifier each subchain trains.
//!
//! The default model is multinomial logistic regression. A one-hidden-layer
//! perceptron with `tanh` units is available through [`Architecture::Mlp`].
//! Training is plain mini-batch gradient descent on softmax cross-entropy
//! with batch size `min(8, shard size)` and a seeded per-epoch shuffle.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ids::MinerId;
use crate::ledger::Hash32;
use crate::rng;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const MAX_BATCH: usize = 8;

/// Dense feature matrix with integer labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    dim: usize,
    classes: usize,
    features: Vec<f64>,
    labels: Vec<u32>,
}

impl Dataset {
    pub fn new(dim: usize, classes: usize, features: Vec<f64>, labels: Vec<u32>) -> Result<Self> {
        if classes < 2 {
            return Err(Error::BadParams(format!("need at least 2 classes, got {classes}")));
        }
        if dim == 0 {
            return Err(Error::BadParams("feature dimension must be positive".into()));
        }
        if features.len() != dim * labels.len() {
            return Err(Error::DimensionMismatch { expected: dim * labels.len(), found: features.len() });
        }
        if let Some(i) = features.iter().position(|v| !v.is_finite()) {
            return Err(Error::BadParams(format!("non-finite feature at flat index {i}")));
        }
        if let Some((index, &label)) = labels.iter().enumerate().find(|(_, &l)| l as usize >= classes) {
            return Err(Error::InvalidLabel { index, label });
        }
        Ok(Dataset { dim, classes, features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn label(&self, i: usize) -> u32 {
        self.labels[i]
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    /// The dataset concatenated with itself.
    pub fn duplicated(&self) -> Self {
        let mut features = self.features.clone();
        features.extend_from_slice(&self.features);
        let mut labels = self.labels.clone();
        labels.extend_from_slice(&self.labels);
        Dataset { dim: self.dim, classes: self.classes, features, labels }
    }
}

fn be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    match bytes.get(at..at + 4) {
        Some(b) => Ok(u32::from_be_bytes([b[0], b[1], b[2], b[3]])),
        None => Err(Error::TruncatedFile { needed: at + 4, available: bytes.len() }),
    }
}

/// Parses an IDX image file (`0x00000803`, `[n, rows, cols]`, u8 pixels)
/// and its IDX label file (`0x00000801`, `[n]`, u8 labels 0-9). Pixels are
/// scaled to `[0, 1]`.
pub fn parse_idx(images: &[u8], labels: &[u8]) -> Result<Dataset> {
    let magic = be_u32(images, 0)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic { expected: IDX_IMAGES_MAGIC, found: magic });
    }
    let magic = be_u32(labels, 0)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic { expected: IDX_LABELS_MAGIC, found: magic });
    }
    let n_images = be_u32(images, 4)? as usize;
    let rows = be_u32(images, 8)? as usize;
    let cols = be_u32(images, 12)? as usize;
    let n_labels = be_u32(labels, 4)? as usize;
    if n_images != n_labels {
        return Err(Error::CountMismatch { images: n_images, labels: n_labels });
    }
    let dim = rows * cols;
    let pixel_bytes = &images[16..];
    if pixel_bytes.len() < n_images * dim {
        return Err(Error::TruncatedFile { needed: 16 + n_images * dim, available: images.len() });
    }
    let label_bytes = &labels[8..];
    if label_bytes.len() < n_labels {
        return Err(Error::TruncatedFile { needed: 8 + n_labels, available: labels.len() });
    }
    let features = pixel_bytes[..n_images * dim].iter().map(|&p| f64::from(p) / 255.0).collect();
    let labels = label_bytes[..n_labels].iter().map(|&l| u32::from(l)).collect();
    Dataset::new(dim, 10, features, labels)
}

/// Gaussian blobs: class `c` is centred at `separation * e_c` with unit
/// noise in every coordinate. Samples are interleaved by class.
pub fn synth_dataset(classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if classes < 2 || per_class < 1 {
        return Err(Error::BadParams(format!(
            "synthetic data needs classes >= 2 and per_class >= 1, got {classes} and {per_class}"
        )));
    }
    if dim < classes {
        return Err(Error::BadParams(format!("dim {dim} cannot hold {classes} orthogonal class centres")));
    }
    if !(separation.is_finite() && separation >= 0.0) {
        return Err(Error::BadParams(format!("separation must be finite and non-negative, got {separation}")));
    }
    let mut stream = rng::stream(seed, "synth-dataset", 0);
    let n = classes * per_class;
    let mut features = Vec::with_capacity(n * dim);
    let mut labels = Vec::with_capacity(n);
    for _ in 0..per_class {
        for c in 0..classes {
            for k in 0..dim {
                let centre = if k == c { separation } else { 0.0 };
                features.push(centre + rng::standard_normal(&mut stream));
            }
            labels.push(c as u32);
        }
    }
    Dataset::new(dim, classes, features, labels)
}

/// A miner's private sample: indices into a shared [`Dataset`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Shard {
    pub owner: MinerId,
    pub indices: Vec<usize>,
}

impl Shard {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Content digest used as the `data_id` of ledger activations.
    pub fn digest(&self) -> Hash32 {
        let mut h = Sha256::new();
        h.update(b"poflsc/shard");
        h.update(self.owner.0.to_be_bytes());
        h.update((self.indices.len() as u64).to_be_bytes());
        for &i in &self.indices {
            h.update((i as u64).to_be_bytes());
        }
        h.finalize().into()
    }
}

/// Seeded split of `0..n` into `(holdout, rest)`, both ascending. The
/// holdout takes `ceil(fraction * n)` indices.
pub fn holdout_split(n: usize, fraction: f64, seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, "holdout-split", 0));
    let take = libm::ceil(fraction.clamp(0.0, 1.0) * n as f64) as usize;
    let mut holdout = order[..take].to_vec();
    let mut rest = order[take..].to_vec();
    holdout.sort_unstable();
    rest.sort_unstable();
    (holdout, rest)
}

/// One shard per miner drawn from `pool`: without replacement inside a
/// shard, independently across miners (shards may overlap).
pub fn shard_pool(pool: &[usize], miner_count: usize, samples_per_miner: usize, seed: u64) -> Result<Vec<Shard>> {
    if pool.len() < samples_per_miner {
        return Err(Error::DatasetTooSmall { available: pool.len(), needed: samples_per_miner });
    }
    Ok((0..miner_count as u32)
        .map(|m| {
            let mut stream = rng::stream(seed, "shard", u64::from(m));
            let picks = rand::seq::index::sample(&mut stream, pool.len(), samples_per_miner);
            Shard { owner: MinerId(m), indices: picks.into_iter().map(|p| pool[p]).collect() }
        })
        .collect())
}

pub fn shard_dataset(ds: &Dataset, miner_count: usize, samples_per_miner: usize, seed: u64) -> Result<Vec<Shard>> {
    let all: Vec<usize> = (0..ds.len()).collect();
    shard_pool(&all, miner_count, samples_per_miner, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Architecture {
    Logistic { inputs: usize, classes: usize },
    Mlp { inputs: usize, hidden: usize, classes: usize },
}

impl Architecture {
    pub fn inputs(&self) -> usize {
        match *self {
            Architecture::Logistic { inputs, .. } | Architecture::Mlp { inputs, .. } => inputs,
        }
    }

    pub fn classes(&self) -> usize {
        match *self {
            Architecture::Logistic { classes, .. } | Architecture::Mlp { classes, .. } => classes,
        }
    }

    pub fn dim(&self) -> usize {
        match *self {
            Architecture::Logistic { inputs, classes } => classes * (inputs + 1),
            Architecture::Mlp { inputs, hidden, classes } => hidden * (inputs + 1) + classes * (hidden + 1),
        }
    }
}

/// Flat parameter vector plus the layout that interprets it.
///
/// Logistic layout: `W[classes][inputs]` then `b[classes]`.
/// MLP layout: `W1[hidden][inputs]`, `b1[hidden]`, `W2[classes][hidden]`, `b2[classes]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub arch: Architecture,
    pub values: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(arch: Architecture) -> Self {
        ModelParams { arch, values: vec![0.0; arch.dim()] }
    }

    /// Zeros for logistic models; weights uniform in `±0.05` (biases zero)
    /// for perceptrons.
    pub fn init(arch: Architecture, seed: u64) -> Self {
        let mut params = ModelParams::zeros(arch);
        if let Architecture::Mlp { inputs, hidden, classes } = arch {
            let mut stream = rng::stream(seed, "model-init", 0);
            let w1 = hidden * inputs;
            let w2_start = hidden * (inputs + 1);
            let w2_end = w2_start + classes * hidden;
            let (head, tail) = params.values.split_at_mut(w2_start);
            for v in head[..w1].iter_mut().chain(tail[..w2_end - w2_start].iter_mut()) {
                *v = stream.random_range(-0.05..=0.05);
            }
        }
        params
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    fn check(&self) -> Result<()> {
        if self.values.len() != self.arch.dim() {
            return Err(Error::DimensionMismatch { expected: self.arch.dim(), found: self.values.len() });
        }
        Ok(())
    }

    fn check_data(&self, ds: &Dataset) -> Result<()> {
        self.check()?;
        if self.arch.inputs() != ds.dim() {
            return Err(Error::DimensionMismatch { expected: self.arch.inputs(), found: ds.dim() });
        }
        if self.arch.classes() != ds.classes() {
            return Err(Error::DimensionMismatch { expected: self.arch.classes(), found: ds.classes() });
        }
        Ok(())
    }

    /// `self += weight * delta`.
    pub fn add_scaled(&mut self, delta: &[f64], weight: f64) -> Result<()> {
        if delta.len() != self.values.len() {
            return Err(Error::DimensionMismatch { expected: self.values.len(), found: delta.len() });
        }
        for (p, d) in self.values.iter_mut().zip(delta) {
            *p += weight * d;
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    /// Canonical bytes: layout tag and sizes, then every value's bits.
    pub fn canonical_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 8 * self.values.len());
        match self.arch {
            Architecture::Logistic { inputs, classes } => {
                out.push(0);
                out.extend_from_slice(&(inputs as u64).to_be_bytes());
                out.extend_from_slice(&(classes as u64).to_be_bytes());
            }
            Architecture::Mlp { inputs, hidden, classes } => {
                out.push(1);
                out.extend_from_slice(&(inputs as u64).to_be_bytes());
                out.extend_from_slice(&(hidden as u64).to_be_bytes());
                out.extend_from_slice(&(classes as u64).to_be_bytes());
            }
        }
        out.extend_from_slice(&(self.values.len() as u64).to_be_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_bits().to_be_bytes());
        }
        out
    }

    pub fn hash(&self) -> Hash32 {
        let mut h = Sha256::new();
        h.update(b"poflsc/model");
        h.update(self.canonical_bytes());
        h.finalize().into()
    }
}

/// Scratch buffers for one forward/backward pass.
struct Workspace {
    hidden: Vec<f64>,
    logits: Vec<f64>,
    dhidden: Vec<f64>,
}

impl Workspace {
    fn new(arch: Architecture) -> Self {
        let hidden = match arch {
            Architecture::Logistic { .. } => 0,
            Architecture::Mlp { hidden, .. } => hidden,
        };
        Workspace { hidden: vec![0.0; hidden], logits: vec![0.0; arch.classes()], dhidden: vec![0.0; hidden] }
    }
}

fn dense(weights: &[f64], bias: &[f64], input: &[f64], out: &mut [f64]) {
    let width = input.len();
    for (o, (row, b)) in out.iter_mut().zip(weights.chunks(width).zip(bias)) {
        *o = *b + row.iter().zip(input).map(|(w, x)| w * x).sum::<f64>();
    }
}

fn forward(params: &ModelParams, x: &[f64], ws: &mut Workspace) {
    let v = &params.values;
    match params.arch {
        Architecture::Logistic { inputs, classes } => {
            let (w, b) = v.split_at(classes * inputs);
            dense(w, b, x, &mut ws.logits);
        }
        Architecture::Mlp { inputs, hidden, classes } => {
            let (w1, rest) = v.split_at(hidden * inputs);
            let (b1, rest) = rest.split_at(hidden);
            let (w2, b2) = rest.split_at(classes * hidden);
            dense(w1, b1, x, &mut ws.hidden);
            for h in ws.hidden.iter_mut() {
                *h = libm::tanh(*h);
            }
            dense(w2, b2, &ws.hidden, &mut ws.logits);
        }
    }
}

/// Turns `ws.logits` into `softmax - onehot(label)` and returns the loss.
fn softmax_cross_entropy(ws: &mut Workspace, label: usize) -> f64 {
    let max = ws.logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for z in ws.logits.iter_mut() {
        *z = libm::exp(*z - max);
        sum += *z;
    }
    let loss = -libm::log(ws.logits[label] / sum);
    for z in ws.logits.iter_mut() {
        *z /= sum;
    }
    ws.logits[label] -= 1.0;
    loss
}

/// Adds `scale * d loss / d params` for one sample; `ws.logits` must hold
/// the output error from [`softmax_cross_entropy`].
fn backward(params: &ModelParams, x: &[f64], ws: &mut Workspace, scale: f64, grad: &mut [f64]) {
    let v = &params.values;
    match params.arch {
        Architecture::Logistic { inputs, classes } => {
            let (gw, gb) = grad.split_at_mut(classes * inputs);
            for (c, &dz) in ws.logits.iter().enumerate() {
                let s = scale * dz;
                for (g, xk) in gw[c * inputs..(c + 1) * inputs].iter_mut().zip(x) {
                    *g += s * xk;
                }
                gb[c] += s;
            }
        }
        Architecture::Mlp { inputs, hidden, classes } => {
            let w2 = &v[hidden * (inputs + 1)..hidden * (inputs + 1) + classes * hidden];
            let (g1, rest) = grad.split_at_mut(hidden * (inputs + 1));
            let (gw1, gb1) = g1.split_at_mut(hidden * inputs);
            let (gw2, gb2) = rest.split_at_mut(classes * hidden);
            for dh in ws.dhidden.iter_mut() {
                *dh = 0.0;
            }
            for (c, &dz) in ws.logits.iter().enumerate() {
                let s = scale * dz;
                for j in 0..hidden {
                    gw2[c * hidden + j] += s * ws.hidden[j];
                    ws.dhidden[j] += w2[c * hidden + j] * dz;
                }
                gb2[c] += s;
            }
            for j in 0..hidden {
                let h = ws.hidden[j];
                let da = scale * ws.dhidden[j] * (1.0 - h * h);
                for (g, xk) in gw1[j * inputs..(j + 1) * inputs].iter_mut().zip(x) {
                    *g += da * xk;
                }
                gb1[j] += da;
            }
        }
    }
}

/// Mean cross-entropy over `indices`.
pub fn loss(params: &ModelParams, ds: &Dataset, indices: &[usize]) -> Result<f64> {
    params.check_data(ds)?;
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut ws = Workspace::new(params.arch);
    let mut total = 0.0;
    for &i in indices {
        forward(params, ds.row(i), &mut ws);
        total += softmax_cross_entropy(&mut ws, ds.label(i) as usize);
    }
    Ok(total / indices.len() as f64)
}

/// Mean cross-entropy and its analytic gradient over `indices`. An empty
/// index list yields zero loss and a zero gradient.
pub fn loss_and_gradient(params: &ModelParams, ds: &Dataset, indices: &[usize]) -> Result<(f64, Vec<f64>)> {
    params.check_data(ds)?;
    let mut grad = vec![0.0; params.dim()];
    if indices.is_empty() {
        return Ok((0.0, grad));
    }
    let mut ws = Workspace::new(params.arch);
    let scale = 1.0 / indices.len() as f64;
    let mut total = 0.0;
    for &i in indices {
        let x = ds.row(i);
        forward(params, x, &mut ws);
        total += softmax_cross_entropy(&mut ws, ds.label(i) as usize);
        backward(params, x, &mut ws, scale, &mut grad);
    }
    Ok((total * scale, grad))
}

/// Local change a miner submits after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientUpdate {
    pub miner: MinerId,
    pub delta: Vec<f64>,
    pub samples_used: usize,
    pub round: u64,
}

/// Runs `epochs` of mini-batch gradient descent on the shard and returns
/// `new_params - params`.
pub fn train_local(
    params: &ModelParams,
    ds: &Dataset,
    shard: &Shard,
    epochs: u32,
    lr: f64,
    seed: u64,
    round: u64,
) -> Result<GradientUpdate> {
    params.check_data(ds)?;
    if let Some(&bad) = shard.indices.iter().find(|&&i| i >= ds.len()) {
        return Err(Error::BadParams(format!("shard index {bad} outside dataset of {}", ds.len())));
    }
    let mut model = params.clone();
    if !shard.is_empty() && lr != 0.0 {
        let mut stream = rng::from_seed(seed);
        let mut order = shard.indices.clone();
        let batch = MAX_BATCH.min(order.len());
        let mut ws = Workspace::new(params.arch);
        let mut grad = vec![0.0; params.dim()];
        for _ in 0..epochs {
            order.shuffle(&mut stream);
            for chunk in order.chunks(batch) {
                grad.iter_mut().for_each(|g| *g = 0.0);
                let scale = 1.0 / chunk.len() as f64;
                for &i in chunk {
                    let x = ds.row(i);
                    forward(&model, x, &mut ws);
                    softmax_cross_entropy(&mut ws, ds.label(i) as usize);
                    backward(&model, x, &mut ws, scale, &mut grad);
                }
                for (p, g) in model.values.iter_mut().zip(&grad) {
                    *p -= lr * g;
                }
            }
        }
    }
    let delta = model.values.iter().zip(&params.values).map(|(n, o)| n - o).collect();
    Ok(GradientUpdate { miner: shard.owner, delta, samples_used: shard.len(), round })
}

/// Predicted class; ties go to the lower class index.
fn predict(params: &ModelParams, x: &[f64], ws: &mut Workspace) -> usize {
    forward(params, x, ws);
    let mut best = 0;
    for (c, &z) in ws.logits.iter().enumerate().skip(1) {
        if z > ws.logits[best] {
            best = c;
        }
    }
    best
}

/// Fraction of `indices` whose argmax prediction matches the label.
pub fn evaluate_on(params: &ModelParams, ds: &Dataset, indices: &[usize]) -> Result<f64> {
    params.check_data(ds)?;
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut ws = Workspace::new(params.arch);
    let correct = indices
        .iter()
        .filter(|&&i| predict(params, ds.row(i), &mut ws) == ds.label(i) as usize)
        .count();
    Ok(correct as f64 / indices.len() as f64)
}

pub fn evaluate(params: &ModelParams, ds: &Dataset) -> Result<f64> {
    let all: Vec<usize> = (0..ds.len()).collect();
    evaluate_on(params, ds, &all)
}
