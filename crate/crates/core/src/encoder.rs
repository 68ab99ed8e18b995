//! The student encoder: a ReLU MLP backbone shared by three affine heads.
//!
//! * `cls`  – seen-class logits (the classification head),
//! * `sim`  – the retrieval embedding,
//! * `soft` – logits in the teacher's class space, matched against soft labels.
//!
//! Every quadruplet slot goes through the same parameter set; the network
//! itself is stateless apart from its gradient buffers, so `forward` takes
//! `&self` and `backward` accumulates into `grads`.

use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ndcore::{Matrix, Rng};

/// Affine layer `y = W x + b` with `W` stored `out × in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weights: Matrix,
    pub bias: Vec<f64>,
}

impl Dense {
    pub fn zeros(input: usize, output: usize) -> Self {
        Dense {
            weights: Matrix::zeros(output, input),
            bias: vec![0.0; output],
        }
    }

    /// Glorot-uniform weights in `±√(6/(fan_in+fan_out))`, zero bias.
    pub fn glorot(input: usize, output: usize, rng: &mut Rng) -> Self {
        let limit = (6.0 / (input + output) as f64).sqrt();
        let data = (0..input * output).map(|_| rng.uniform(-limit, limit)).collect();
        Dense {
            weights: Matrix::new(output, input, data).expect("sized by construction"),
            bias: vec![0.0; output],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weights.cols()
    }

    pub fn output_dim(&self) -> usize {
        self.weights.rows()
    }

    pub fn forward(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut y = self.weights.matvec(x)?;
        for (yi, bi) in y.iter_mut().zip(&self.bias) {
            *yi += bi;
        }
        Ok(y)
    }

    /// Accumulates `dW += dy xᵀ`, `db += dy` into `grad` and returns `Wᵀ dy`.
    pub fn backward(&self, grad: &mut Dense, x: &[f64], dy: &[f64]) -> Result<Vec<f64>> {
        grad.weights.add_outer(dy, x)?;
        for (g, d) in grad.bias.iter_mut().zip(dy) {
            *g += d;
        }
        self.weights.matvec_transposed(dy)
    }

    pub fn param_count(&self) -> usize {
        self.weights.data().len() + self.bias.len()
    }

    fn shapes_match(&self, other: &Dense) -> bool {
        self.weights.rows() == other.weights.rows()
            && self.weights.cols() == other.weights.cols()
            && self.bias.len() == other.bias.len()
    }
}

pub(crate) fn relu(v: &[f64]) -> Vec<f64> {
    v.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect()
}

pub(crate) fn relu_backward(pre: &[f64], upstream: &[f64]) -> Vec<f64> {
    pre.iter()
        .zip(upstream)
        .map(|(&p, &g)| if p > 0.0 { g } else { 0.0 })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub input_dim: usize,
    #[serde(default)]
    pub hidden_dims: Vec<usize>,
    #[serde(default = "default_embed_dim")]
    pub embed_dim: usize,
    pub num_seen_classes: usize,
    pub teacher_class_count: usize,
    #[serde(default)]
    pub init_seed: u64,
}

fn default_embed_dim() -> usize {
    512
}

/// Embedding sizes reported for the reference architecture.
pub const REFERENCE_EMBED_DIMS: [usize; 3] = [64, 512, 1024];

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("input_dim", self.input_dim),
            ("embed_dim", self.embed_dim),
            ("num_seen_classes", self.num_seen_classes),
            ("teacher_class_count", self.teacher_class_count),
        ];
        for (name, v) in named {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be at least 1")));
            }
        }
        if self.hidden_dims.contains(&0) {
            return Err(Error::Config("hidden layer widths must be at least 1".into()));
        }
        if !REFERENCE_EMBED_DIMS.contains(&self.embed_dim) {
            warn!(
                "embed_dim {} is outside the reference sizes {:?}",
                self.embed_dim, REFERENCE_EMBED_DIMS
            );
        }
        Ok(())
    }
}

/// All trainable tensors of the encoder. Also used for the gradient buffers
/// and optimiser state, which mirror the parameters one-to-one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub backbone: Vec<Dense>,
    pub head_cls: Dense,
    pub head_sim: Dense,
    pub head_soft: Dense,
}

impl EncoderParams {
    fn build(cfg: &EncoderConfig, mut make: impl FnMut(usize, usize) -> Dense) -> Self {
        let mut backbone = Vec::with_capacity(cfg.hidden_dims.len());
        let mut width = cfg.input_dim;
        for &h in &cfg.hidden_dims {
            backbone.push(make(width, h));
            width = h;
        }
        EncoderParams {
            backbone,
            head_cls: make(width, cfg.num_seen_classes),
            head_sim: make(width, cfg.embed_dim),
            head_soft: make(width, cfg.teacher_class_count),
        }
    }

    pub fn zeros_like(&self) -> Self {
        EncoderParams {
            backbone: self
                .backbone
                .iter()
                .map(|d| Dense::zeros(d.input_dim(), d.output_dim()))
                .collect(),
            head_cls: Dense::zeros(self.head_cls.input_dim(), self.head_cls.output_dim()),
            head_sim: Dense::zeros(self.head_sim.input_dim(), self.head_sim.output_dim()),
            head_soft: Dense::zeros(self.head_soft.input_dim(), self.head_soft.output_dim()),
        }
    }

    /// Layers in a fixed order: backbone first, then cls, sim, soft.
    pub fn layers(&self) -> impl Iterator<Item = &Dense> {
        self.backbone
            .iter()
            .chain([&self.head_cls, &self.head_sim, &self.head_soft])
    }

    pub fn layers_mut(&mut self) -> impl Iterator<Item = &mut Dense> {
        self.backbone
            .iter_mut()
            .chain([&mut self.head_cls, &mut self.head_sim, &mut self.head_soft])
    }

    /// Flat views of every parameter tensor, in `layers()` order, weights
    /// before bias.
    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for layer in self.layers_mut() {
            out.push(layer.weights.data_mut());
            out.push(layer.bias.as_mut_slice());
        }
        out
    }

    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for layer in self.layers() {
            out.push(layer.weights.data());
            out.push(layer.bias.as_slice());
        }
        out
    }

    pub fn len(&self) -> usize {
        self.layers().map(Dense::param_count).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().concat()
    }

    pub fn assign_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::Shape(format!(
                "expected {} parameters, got {}",
                self.len(),
                values.len()
            )));
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub fn fill_zero(&mut self) {
        for t in self.tensors_mut() {
            t.fill(0.0);
        }
    }

    pub fn same_shape(&self, other: &EncoderParams) -> bool {
        self.backbone.len() == other.backbone.len()
            && self.layers().zip(other.layers()).all(|(a, b)| a.shapes_match(b))
    }
}

/// Intermediate values of one forward pass, kept for backprop.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardRecord {
    pub input: Vec<f64>,
    /// Pre-activation of each backbone layer.
    pub pre_activations: Vec<Vec<f64>>,
    /// Post-ReLU output of each backbone layer.
    pub activations: Vec<Vec<f64>>,
    pub embedding: Vec<f64>,
    pub cls_logits: Vec<f64>,
    pub soft_logits: Vec<f64>,
}

impl ForwardRecord {
    /// The shared feature all three heads consume.
    pub fn features(&self) -> &[f64] {
        self.activations.last().unwrap_or(&self.input)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderNetwork {
    config: EncoderConfig,
    pub params: EncoderParams,
    pub grads: EncoderParams,
}

impl EncoderNetwork {
    pub fn init(config: EncoderConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let params = EncoderParams::build(&config, |i, o| Dense::glorot(i, o, rng));
        let grads = params.zeros_like();
        Ok(EncoderNetwork {
            config,
            params,
            grads,
        })
    }

    /// Initialises from `config.init_seed`.
    pub fn init_seeded(config: EncoderConfig) -> Result<Self> {
        let mut rng = Rng::new(config.init_seed);
        Self::init(config, &mut rng)
    }

    pub fn from_params(config: EncoderConfig, params: EncoderParams) -> Result<Self> {
        config.validate()?;
        let expected = EncoderParams::build(&config, Dense::zeros);
        if !expected.same_shape(&params) {
            return Err(Error::Shape(
                "parameter shapes do not match the encoder config".into(),
            ));
        }
        if params.flatten().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("non-finite parameter".into()));
        }
        let grads = params.zeros_like();
        Ok(EncoderNetwork {
            config,
            params,
            grads,
        })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn forward(&self, x: &[f64]) -> Result<ForwardRecord> {
        if x.len() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "encoder expects input of length {}, got {}",
                self.config.input_dim,
                x.len()
            )));
        }
        let mut pre_activations = Vec::with_capacity(self.params.backbone.len());
        let mut activations = Vec::with_capacity(self.params.backbone.len());
        let mut h = x.to_vec();
        for layer in &self.params.backbone {
            let z = layer.forward(&h)?;
            h = relu(&z);
            pre_activations.push(z);
            activations.push(h.clone());
        }
        Ok(ForwardRecord {
            input: x.to_vec(),
            embedding: self.params.head_sim.forward(&h)?,
            cls_logits: self.params.head_cls.forward(&h)?,
            soft_logits: self.params.head_soft.forward(&h)?,
            pre_activations,
            activations,
        })
    }

    /// Retrieval path: the embedding head only.
    pub fn apply_embedding_only(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.config.input_dim {
            return Err(Error::Shape(format!(
                "encoder expects input of length {}, got {}",
                self.config.input_dim,
                x.len()
            )));
        }
        let mut h = x.to_vec();
        for layer in &self.params.backbone {
            h = relu(&layer.forward(&h)?);
        }
        self.params.head_sim.forward(&h)
    }

    /// Accumulates parameter gradients for one forward record and returns the
    /// gradient with respect to the input.
    pub fn backward(
        &mut self,
        record: &ForwardRecord,
        d_embedding: &[f64],
        d_cls_logits: &[f64],
        d_soft_logits: &[f64],
    ) -> Result<Vec<f64>> {
        let checks = [
            ("embedding", d_embedding.len(), self.config.embed_dim),
            ("cls", d_cls_logits.len(), self.config.num_seen_classes),
            ("soft", d_soft_logits.len(), self.config.teacher_class_count),
        ];
        for (name, got, want) in checks {
            if got != want {
                return Err(Error::Shape(format!(
                    "{name} gradient has length {got}, head has {want}"
                )));
            }
        }
        if record.activations.len() != self.params.backbone.len() {
            return Err(Error::Shape("record does not match network depth".into()));
        }

        let features = record.features();
        let p = &self.params;
        let g = &mut self.grads;
        let mut dh = p.head_sim.backward(&mut g.head_sim, features, d_embedding)?;
        let from_cls = p.head_cls.backward(&mut g.head_cls, features, d_cls_logits)?;
        let from_soft = p.head_soft.backward(&mut g.head_soft, features, d_soft_logits)?;
        for ((d, a), b) in dh.iter_mut().zip(&from_cls).zip(&from_soft) {
            *d += a + b;
        }

        for l in (0..p.backbone.len()).rev() {
            let dz = relu_backward(&record.pre_activations[l], &dh);
            let layer_input = if l == 0 {
                &record.input
            } else {
                &record.activations[l - 1]
            };
            dh = p.backbone[l].backward(&mut g.backbone[l], layer_input, &dz)?;
        }
        Ok(dh)
    }

    pub fn zero_grads(&mut self) {
        self.grads.fill_zero();
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format_version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            params: self.params.clone(),
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::load(path)?.into_network()
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// JSON checkpoint: encoder config plus every parameter. Floats are written
/// in shortest round-trip form, so save/load is bit-exact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Checkpoint {
    pub format_version: u32,
    pub config: EncoderConfig,
    pub params: EncoderParams,
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let ck: Checkpoint = serde_json::from_str(s)?;
        if ck.format_version != CHECKPOINT_VERSION {
            return Err(Error::Data(format!(
                "unsupported checkpoint version {}",
                ck.format_version
            )));
        }
        Ok(ck)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&s)
    }

    pub fn into_network(self) -> Result<EncoderNetwork> {
        EncoderNetwork::from_params(self.config, self.params)
    }
}
