//! Small MLP encoder with explicit backprop, the prototype head, SGD, and the
//! training loop.
//!
//! The encoder stands in for a convolutional backbone: `d_in -> hidden -> d`
//! with ReLU on hidden layers and a linear output. The prototype head holds
//! one `d`-dimensional column per identity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{child_class_index, BatchSampler, Dataset};
use crate::losses::{total_loss, MarginConfig};
use crate::math::{cosine_matrix, mean_off_diagonal_abs, norm, Matrix};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `out x in`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
    pub relu: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    layers: Vec<Layer>,
}

fn tensor_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

impl EncoderParams {
    pub fn new(layers: Vec<Layer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::InvalidArgument("encoder needs at least one layer".into()));
        }
        for (l, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.rows() {
                return Err(Error::Shape(format!(
                    "layer {l}: bias has {} entries for {} outputs",
                    layer.bias.len(),
                    layer.weight.rows()
                )));
            }
            if l > 0 && layers[l - 1].weight.rows() != layer.weight.cols() {
                return Err(Error::Shape(format!(
                    "layer {l} expects {} inputs but layer {} produces {}",
                    layer.weight.cols(),
                    l - 1,
                    layers[l - 1].weight.rows()
                )));
            }
            if !layer.weight.is_finite() || layer.bias.iter().any(|b| !b.is_finite()) {
                return Err(Error::NonFinite(format!("layer {l} parameters")));
            }
        }
        Ok(EncoderParams { layers })
    }

    /// Fan-in scaled Gaussian weights (`std = sqrt(2 / fan_in)`), zero biases,
    /// ReLU on every layer but the last. Each weight tensor draws from its own
    /// stream of `seed`.
    pub fn init(input_dim: usize, hidden: &[usize], output_dim: usize, seed: u64) -> Self {
        let dims: Vec<usize> = std::iter::once(input_dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(output_dim))
            .collect();
        let last = dims.len() - 2;
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(l, w)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let std = (2.0 / fan_in as f64).sqrt();
                let mut rng = tensor_rng(seed, 100 + l as u64);
                let data = (0..fan_in * fan_out)
                    .map(|_| {
                        let z: f64 = StandardNormal.sample(&mut rng);
                        std * z
                    })
                    .collect();
                Layer {
                    weight: Matrix::from_vec(fan_out, fan_in, data).expect("sized above"),
                    bias: vec![0.0; fan_out],
                    relu: l != last,
                }
            })
            .collect();
        EncoderParams { layers }
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].weight.rows()
    }

    pub fn is_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weight.is_finite() && l.bias.iter().all(|b| b.is_finite()))
    }

    fn fingerprint(&self) -> u64 {
        let mut h = 0xcbf2_9ce4_8422_2325u64;
        for layer in &self.layers {
            for v in layer.weight.data().iter().chain(&layer.bias) {
                h = (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Activations saved by [`encode_forward`] for the matching backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input; `activations[l + 1]` the output of layer `l`.
    activations: Vec<Matrix>,
    pre_activations: Vec<Matrix>,
    fingerprint: u64,
}

pub fn encode_forward(params: &EncoderParams, inputs: &Matrix) -> Result<(Matrix, ForwardCache)> {
    if inputs.rows() != params.input_dim() {
        return Err(Error::Shape(format!(
            "encoder expects {} input rows, got {}",
            params.input_dim(),
            inputs.rows()
        )));
    }
    let batch = inputs.cols();
    let mut activations = vec![inputs.clone()];
    let mut pre_activations = Vec::with_capacity(params.layers.len());
    for layer in &params.layers {
        let mut z = layer.weight.matmul(activations.last().expect("seeded with input"))?;
        for (i, b) in layer.bias.iter().enumerate() {
            for j in 0..batch {
                z[(i, j)] += b;
            }
        }
        let mut a = z.clone();
        if layer.relu {
            a.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
        }
        pre_activations.push(z);
        activations.push(a);
    }
    let out = activations.last().expect("at least one layer").clone();
    Ok((
        out,
        ForwardCache {
            activations,
            pre_activations,
            fingerprint: params.fingerprint(),
        },
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    /// Gradient with respect to the encoder input.
    pub inputs: Matrix,
}

pub fn encode_backward(
    params: &EncoderParams,
    cache: &ForwardCache,
    grad_features: &Matrix,
) -> Result<EncoderGrads> {
    if cache.pre_activations.len() != params.layers.len() || cache.fingerprint != params.fingerprint() {
        return Err(Error::InvalidArgument(
            "forward cache does not belong to these parameters".into(),
        ));
    }
    let out = cache.activations.last().expect("non-empty");
    if grad_features.shape() != out.shape() {
        return Err(Error::Shape(format!(
            "upstream gradient {:?} does not match encoder output {:?}",
            grad_features.shape(),
            out.shape()
        )));
    }
    let n_layers = params.layers.len();
    let mut weights = vec![Matrix::zeros(0, 0); n_layers];
    let mut biases = vec![Vec::new(); n_layers];
    let mut g = grad_features.clone();
    for l in (0..n_layers).rev() {
        let layer = &params.layers[l];
        if layer.relu {
            let z = &cache.pre_activations[l];
            for (gv, &zv) in g.data_mut().iter_mut().zip(z.data()) {
                if zv <= 0.0 {
                    *gv = 0.0;
                }
            }
        }
        weights[l] = g.matmul_t(&cache.activations[l])?;
        biases[l] = (0..g.rows()).map(|i| g.row(i).iter().sum()).collect();
        g = layer.weight.t_matmul(&g)?;
    }
    Ok(EncoderGrads {
        weights,
        biases,
        inputs: g,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeHead {
    /// `d x n`, one column per identity.
    pub weights: Matrix,
    pub child_ids: Vec<usize>,
}

impl PrototypeHead {
    /// Unit-normalised Gaussian columns.
    pub fn init(dim: usize, n_identities: usize, child_ids: Vec<usize>, seed: u64) -> Result<Self> {
        if let Some(&bad) = child_ids.iter().find(|&&c| c >= n_identities) {
            return Err(Error::InvalidArgument(format!(
                "child identity {bad} out of range for {n_identities} prototypes"
            )));
        }
        let mut rng = tensor_rng(seed, 1);
        let mut weights = Matrix::zeros(dim, n_identities);
        for j in 0..n_identities {
            let col = loop {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect();
                let n = norm(&v);
                if n > 1e-12 {
                    break v.into_iter().map(|x| x / n).collect::<Vec<_>>();
                }
            };
            weights.set_col(j, &col);
        }
        Ok(PrototypeHead { weights, child_ids })
    }

    /// Mean `|cos|` over ordered pairs of distinct child prototypes.
    pub fn child_mean_abs_cos(&self) -> Result<Option<f64>> {
        if self.child_ids.len() < 2 {
            return Ok(None);
        }
        let sub = self.weights.select_columns(&self.child_ids);
        Ok(Some(mean_off_diagonal_abs(&cosine_matrix(&sub, &sub)?)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    weights: Vec<Matrix>,
    biases: Vec<Vec<f64>>,
    prototypes: Matrix,
}

impl SgdState {
    pub fn new(params: &EncoderParams, head: &PrototypeHead) -> Self {
        SgdState {
            weights: params
                .layers
                .iter()
                .map(|l| Matrix::zeros(l.weight.rows(), l.weight.cols()))
                .collect(),
            biases: params.layers.iter().map(|l| vec![0.0; l.bias.len()]).collect(),
            prototypes: Matrix::zeros(head.weights.rows(), head.weights.cols()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SgdHyper {
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

/// `v <- mu * v + g + wd * p; p <- p - lr * v`, element-wise.
fn momentum_update(p: &mut [f64], v: &mut [f64], g: &[f64], lr: f64, mu: f64, wd: f64) {
    for ((p, v), &g) in p.iter_mut().zip(v.iter_mut()).zip(g) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
}

/// One SGD-with-momentum step on the encoder and the prototype matrix.
///
/// Weight decay applies to encoder weights and prototypes, not to biases.
/// Nothing is modified when any gradient is non-finite.
pub fn sgd_step(
    params: &mut EncoderParams,
    head: &mut PrototypeHead,
    grads: &EncoderGrads,
    grad_prototypes: &Matrix,
    state: &mut SgdState,
    hyper: SgdHyper,
) -> Result<()> {
    if grads.weights.len() != params.layers.len() || state.weights.len() != params.layers.len() {
        return Err(Error::Shape("gradient/state layer count mismatch".into()));
    }
    if grad_prototypes.shape() != head.weights.shape() {
        return Err(Error::Shape(format!(
            "prototype gradient {:?} vs prototypes {:?}",
            grad_prototypes.shape(),
            head.weights.shape()
        )));
    }
    for (l, layer) in params.layers.iter().enumerate() {
        if grads.weights[l].shape() != layer.weight.shape() || grads.biases[l].len() != layer.bias.len() {
            return Err(Error::Shape(format!("layer {l} gradient shape mismatch")));
        }
        if !grads.weights[l].is_finite() {
            return Err(Error::NonFinite(format!("gradient of layer {l} weight")));
        }
        if grads.biases[l].iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("gradient of layer {l} bias")));
        }
    }
    if !grad_prototypes.is_finite() {
        return Err(Error::NonFinite("gradient of prototypes".into()));
    }

    let SgdHyper {
        learning_rate: lr,
        momentum: mu,
        weight_decay: wd,
    } = hyper;
    for (l, layer) in params.layers.iter_mut().enumerate() {
        momentum_update(
            layer.weight.data_mut(),
            state.weights[l].data_mut(),
            grads.weights[l].data(),
            lr,
            mu,
            wd,
        );
        momentum_update(&mut layer.bias, &mut state.biases[l], &grads.biases[l], lr, mu, 0.0);
    }
    momentum_update(
        head.weights.data_mut(),
        state.prototypes.data_mut(),
        grad_prototypes.data(),
        lr,
        mu,
        wd,
    );
    Ok(())
}

/// Which prototype columns the inter-prototype term sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IpTarget {
    ChildOnly,
    AllIdentities,
    Off,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// 0-based epoch indices from which the rate is multiplied by `decay_factor`.
    pub decay_epochs: Vec<usize>,
    pub decay_factor: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub margin: MarginConfig,
    pub apply_ip_to: IpTarget,
    pub hidden_dims: Vec<usize>,
    pub embedding_dim: usize,
    /// Child:adult ratio per mini-batch; `None` samples uniformly.
    pub oversample_rho: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.1,
            decay_epochs: vec![17, 25],
            decay_factor: 0.1,
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            margin: MarginConfig::default(),
            apply_ip_to: IpTarget::ChildOnly,
            hidden_dims: vec![64],
            embedding_dim: 16,
            oversample_rho: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "learning rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "decay factor must lie in (0, 1], got {}",
                self.decay_factor
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must lie in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::InvalidArgument("weight decay must be >= 0".into()));
        }
        if self.embedding_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::InvalidArgument("layer widths must be positive".into()));
        }
        self.margin.validate()
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        let decays = self.decay_epochs.iter().filter(|&&e| e <= epoch).count();
        self.learning_rate * self.decay_factor.powi(decays as i32)
    }

    /// Effective inter-prototype weight after `apply_ip_to`.
    pub fn effective_lambda(&self) -> f64 {
        match self.apply_ip_to {
            IpTarget::Off => 0.0,
            _ => self.margin.lambda_ip,
        }
    }

    /// SHA-256 over the canonical (key-sorted) JSON form of the config.
    pub fn digest(&self) -> String {
        config_digest(self)
    }
}

/// SHA-256 hex of the key-sorted JSON rendering of `value`.
pub fn config_digest<T: Serialize>(value: &T) -> String {
    let canonical = serde_json::to_value(value).expect("config serialises");
    let bytes = serde_json::to_vec(&canonical).expect("json value serialises");
    let digest = Sha256::digest(&bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub learning_rate: f64,
    pub batches: usize,
    pub dropped_samples: usize,
    pub margin_loss: f64,
    pub ip_loss: f64,
    pub total_loss: f64,
    pub child_mean_abs_cos: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalMetrics {
    pub total_loss: f64,
    pub child_mean_abs_cos: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunLedger {
    pub run_id: String,
    pub seed: u64,
    pub config_digest: String,
    pub epochs: Vec<EpochRecord>,
    pub final_metrics: FinalMetrics,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: EncoderParams,
    pub head: PrototypeHead,
    pub ledger: RunLedger,
}

pub fn train(dataset: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome> {
    train_observed(dataset, cfg, |_| {})
}

/// [`train`], calling `on_epoch` after every completed epoch.
///
/// Runs `epochs` passes of forward, combined loss, backward and SGD over
/// mini-batches; the incomplete trailing batch of each epoch is dropped.
pub fn train_observed<F>(dataset: &Dataset, cfg: &TrainConfig, mut on_epoch: F) -> Result<TrainOutcome>
where
    F: FnMut(&EpochRecord),
{
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::Precondition("training dataset is empty".into()));
    }
    let n = dataset.n_identities();
    let mut seen = vec![false; n];
    for s in dataset.samples() {
        seen[s.identity] = true;
    }
    if let Some(missing) = seen.iter().position(|&v| !v) {
        return Err(Error::Precondition(format!("identity {missing} has no samples")));
    }
    let child_ids = child_class_index(dataset);
    let ip_ids: Vec<usize> = match cfg.apply_ip_to {
        IpTarget::ChildOnly => child_ids.clone(),
        IpTarget::AllIdentities => (0..n).collect(),
        IpTarget::Off => Vec::new(),
    };
    let lambda = cfg.effective_lambda();
    if lambda > 0.0 && ip_ids.len() < 2 {
        return Err(Error::Precondition(format!(
            "inter-prototype loss needs >= 2 target identities, dataset has {}",
            ip_ids.len()
        )));
    }
    let margin_cfg = MarginConfig {
        lambda_ip: lambda,
        ..cfg.margin.clone()
    };

    let mut params = EncoderParams::init(dataset.dim(), &cfg.hidden_dims, cfg.embedding_dim, cfg.seed);
    let mut head = PrototypeHead::init(cfg.embedding_dim, n, child_ids, cfg.seed)?;
    let mut state = SgdState::new(&params, &head);
    let mut sampler = BatchSampler::new(dataset, cfg.batch_size, cfg.oversample_rho, cfg.seed)?;
    let labels = dataset.labels();
    let flags = dataset.child_flags();
    let digest = cfg.digest();

    let mut epochs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cfg.learning_rate_at(epoch);
        let hyper = SgdHyper {
            learning_rate: lr,
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        };
        let batches = sampler.next_epoch();
        let (mut margin_sum, mut ip_sum, mut total_sum) = (0.0, 0.0, 0.0);
        for (b, batch) in batches.iter().enumerate() {
            let inputs = dataset.feature_matrix_of(batch);
            let batch_labels: Vec<usize> = batch.iter().map(|&k| labels[k]).collect();
            let batch_flags: Vec<bool> = batch.iter().map(|&k| flags[k]).collect();
            let (features, cache) = encode_forward(&params, &inputs)?;
            let loss = total_loss(
                &features,
                &head.weights,
                &batch_labels,
                Some(&batch_flags),
                &ip_ids,
                &margin_cfg,
            )
            .map_err(|e| Error::Precondition(format!("epoch {epoch} batch {b}: {e}")))?;
            if !loss.loss.is_finite() {
                return Err(Error::NonFinite(format!("loss at epoch {epoch} batch {b}")));
            }
            let grads = encode_backward(&params, &cache, &loss.grad_features)?;
            sgd_step(&mut params, &mut head, &grads, &loss.grad_prototypes, &mut state, hyper)
                .map_err(|e| match e {
                    Error::NonFinite(what) => {
                        Error::NonFinite(format!("{what} at epoch {epoch} batch {b}"))
                    }
                    other => other,
                })?;
            margin_sum += loss.components.margin;
            ip_sum += loss.components.inter_prototype;
            total_sum += loss.loss;
        }
        let count = batches.len().max(1) as f64;
        let record = EpochRecord {
            epoch,
            learning_rate: lr,
            batches: batches.len(),
            dropped_samples: sampler.dropped_per_epoch(),
            margin_loss: margin_sum / count,
            ip_loss: ip_sum / count,
            total_loss: total_sum / count,
            child_mean_abs_cos: head.child_mean_abs_cos()?,
        };
        on_epoch(&record);
        epochs.push(record);
    }

    let last = epochs.last().expect("epochs >= 1");
    let final_metrics = FinalMetrics {
        total_loss: last.total_loss,
        child_mean_abs_cos: last.child_mean_abs_cos,
    };
    let ledger = RunLedger {
        run_id: format!("{}-s{}", &digest[..12], cfg.seed),
        seed: cfg.seed,
        config_digest: digest,
        epochs,
        final_metrics,
    };
    Ok(TrainOutcome {
        params,
        head,
        ledger,
    })
}
