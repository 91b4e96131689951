use std::fs;
use std::path::Path;

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::ModelConfig;
use crate::error::{Error, Result};

/// Affine map `y = x·W + b` with `W` stored input-major (in × out).
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Linear {
    pub fn glorot<R: Rng + ?Sized>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        Linear {
            weight: Array2::from_shape_fn((inputs, outputs), |_| rng.random_range(-bound..bound)),
            bias: Array1::zeros(outputs),
        }
    }

    fn zeros_like(&self) -> Self {
        Linear {
            weight: Array2::zeros(self.weight.raw_dim()),
            bias: Array1::zeros(self.bias.raw_dim()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gamma: Array1<f64>,
    pub beta: Array1<f64>,
}

impl LayerNorm {
    pub fn new(dim: usize) -> Self {
        LayerNorm {
            gamma: Array1::ones(dim),
            beta: Array1::zeros(dim),
        }
    }

    fn zeros_like(&self) -> Self {
        LayerNorm {
            gamma: Array1::zeros(self.gamma.raw_dim()),
            beta: Array1::zeros(self.beta.raw_dim()),
        }
    }
}

/// One pre-LN transformer layer plus its proximity-bias projection.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub attn_norm: LayerNorm,
    pub query: Linear,
    pub key: Linear,
    pub value: Linear,
    pub output: Linear,
    pub ffn_norm: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
    /// Maps an M-vector proximity encoding to one logit bias per head.
    pub proximity: Linear,
}

impl EncoderLayer {
    fn new<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Self {
        let d = cfg.hidden;
        EncoderLayer {
            attn_norm: LayerNorm::new(d),
            query: Linear::glorot(d, d, rng),
            key: Linear::glorot(d, d, rng),
            value: Linear::glorot(d, d, rng),
            output: Linear::glorot(d, d, rng),
            ffn_norm: LayerNorm::new(d),
            ffn_in: Linear::glorot(d, 4 * d, rng),
            ffn_out: Linear::glorot(4 * d, d, rng),
            proximity: Linear::glorot(cfg.proximity_order, cfg.heads, rng),
        }
    }

    fn zeros_like(&self) -> Self {
        EncoderLayer {
            attn_norm: self.attn_norm.zeros_like(),
            query: self.query.zeros_like(),
            key: self.key.zeros_like(),
            value: self.value.zeros_like(),
            output: self.output.zeros_like(),
            ffn_norm: self.ffn_norm.zeros_like(),
            ffn_in: self.ffn_in.zeros_like(),
            ffn_out: self.ffn_out.zeros_like(),
            proximity: self.proximity.zeros_like(),
        }
    }
}

/// All trainable tensors. The same type doubles as the gradient container.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub input: Linear,
    /// One row per token kind (center, fine, super, global).
    pub kind_embedding: Array2<f64>,
    pub global_features: Array2<f64>,
    pub global_proximity: Array2<f64>,
    pub layers: Vec<EncoderLayer>,
    pub head_norm: LayerNorm,
    pub head_hidden: Linear,
    pub head_out: Linear,
}

macro_rules! visit_linear {
    ($f:expr, $name:expr, $lin:expr, $method:ident) => {
        $f(&format!("{}.weight", $name), $lin.weight.$method().unwrap());
        $f(&format!("{}.bias", $name), $lin.bias.$method().unwrap());
    };
}

macro_rules! visit_norm {
    ($f:expr, $name:expr, $ln:expr, $method:ident) => {
        $f(&format!("{}.gamma", $name), $ln.gamma.$method().unwrap());
        $f(&format!("{}.beta", $name), $ln.beta.$method().unwrap());
    };
}

macro_rules! visit_all {
    ($self:expr, $f:expr, $method:ident, $iter:ident) => {{
        visit_linear!($f, "input", $self.input, $method);
        $f("kind_embedding", $self.kind_embedding.$method().unwrap());
        $f("global_features", $self.global_features.$method().unwrap());
        $f("global_proximity", $self.global_proximity.$method().unwrap());
        for (l, layer) in $self.layers.$iter().enumerate() {
            visit_norm!($f, format!("layer{l}.attn_norm"), layer.attn_norm, $method);
            visit_linear!($f, format!("layer{l}.query"), layer.query, $method);
            visit_linear!($f, format!("layer{l}.key"), layer.key, $method);
            visit_linear!($f, format!("layer{l}.value"), layer.value, $method);
            visit_linear!($f, format!("layer{l}.output"), layer.output, $method);
            visit_norm!($f, format!("layer{l}.ffn_norm"), layer.ffn_norm, $method);
            visit_linear!($f, format!("layer{l}.ffn_in"), layer.ffn_in, $method);
            visit_linear!($f, format!("layer{l}.ffn_out"), layer.ffn_out, $method);
            visit_linear!($f, format!("layer{l}.proximity"), layer.proximity, $method);
        }
        visit_norm!($f, "head_norm", $self.head_norm, $method);
        visit_linear!($f, "head_hidden", $self.head_hidden, $method);
        visit_linear!($f, "head_out", $self.head_out, $method);
    }};
}

impl ModelParams {
    pub fn new<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let d = config.hidden;
        let small = |rng: &mut R, rows: usize, cols: usize| {
            Array2::from_shape_fn((rows, cols), |_| rng.random_range(-0.1..0.1))
        };
        let input = Linear::glorot(config.input_dim, d, rng);
        let kind_embedding = small(rng, 4, d);
        let global_features = small(rng, config.global_tokens, d);
        let global_proximity = small(rng, config.global_tokens, config.proximity_order);
        let layers = (0..config.layers)
            .map(|_| EncoderLayer::new(&config, rng))
            .collect();
        let head_hidden = Linear::glorot(d, d, rng);
        let head_out = Linear::glorot(d, config.classes, rng);
        Ok(ModelParams {
            input,
            kind_embedding,
            global_features,
            global_proximity,
            layers,
            head_norm: LayerNorm::new(d),
            head_hidden,
            head_out,
            config,
        })
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            config: self.config.clone(),
            input: self.input.zeros_like(),
            kind_embedding: Array2::zeros(self.kind_embedding.raw_dim()),
            global_features: Array2::zeros(self.global_features.raw_dim()),
            global_proximity: Array2::zeros(self.global_proximity.raw_dim()),
            layers: self.layers.iter().map(EncoderLayer::zeros_like).collect(),
            head_norm: self.head_norm.zeros_like(),
            head_hidden: self.head_hidden.zeros_like(),
            head_out: self.head_out.zeros_like(),
        }
    }

    /// Visits every tensor as a flat slice, in a fixed order.
    pub fn visit(&self, f: &mut dyn FnMut(&str, &[f64])) {
        let this = self;
        visit_all!(this, f, as_slice, iter);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        let this = self;
        visit_all!(this, f, as_slice_mut, iter_mut);
    }

    pub fn num_parameters(&self) -> usize {
        let mut total = 0;
        self.visit(&mut |_, t| total += t.len());
        total
    }

    /// Flattened copy of every tensor in visiting order.
    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_parameters());
        self.visit(&mut |_, t| out.extend_from_slice(t));
        out
    }

    pub fn assign_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_parameters() {
            return Err(Error::Dimension(format!(
                "{} values for {} parameters",
                flat.len(),
                self.num_parameters()
            )));
        }
        let mut offset = 0;
        self.visit_mut(&mut |_, t| {
            t.copy_from_slice(&flat[offset..offset + t.len()]);
            offset += t.len();
        });
        Ok(())
    }

    /// `self += scale · other`.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        let flat = other.flatten();
        let mut offset = 0;
        self.visit_mut(&mut |_, t| {
            let len = t.len();
            for (a, b) in t.iter_mut().zip(&flat[offset..offset + len]) {
                *a += scale * b;
            }
            offset += len;
        });
    }

    pub fn fill_zero(&mut self) {
        self.visit_mut(&mut |_, t| t.iter_mut().for_each(|v| *v = 0.0));
    }

    pub fn is_finite(&self) -> bool {
        let mut ok = true;
        self.visit(&mut |_, t| ok &= t.iter().all(|v| v.is_finite()));
        ok
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut tensors = Vec::new();
        let shapes = self.shapes();
        let mut idx = 0;
        self.visit(&mut |name, t| {
            tensors.push(TensorRecord {
                name: name.to_string(),
                shape: shapes[idx].clone(),
                data: t.to_vec(),
            });
            idx += 1;
        });
        let ckpt = Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            version: CHECKPOINT_VERSION,
            config: self.config.clone(),
            tensors,
        };
        let text = serde_json::to_string(&ckpt).map_err(|e| Error::Checkpoint(e.to_string()))?;
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, text).map_err(|e| Error::io(&tmp, e))?;
        fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ckpt: Checkpoint =
            serde_json::from_str(&text).map_err(|e| Error::Checkpoint(e.to_string()))?;
        if ckpt.format != CHECKPOINT_FORMAT || ckpt.version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint {} v{}",
                ckpt.format, ckpt.version
            )));
        }
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let mut params = ModelParams::new(ckpt.config, &mut rng)?;
        let shapes = params.shapes();
        let mut idx = 0;
        let mut err = None;
        params.visit_mut(&mut |name, t| {
            let Some(rec) = ckpt.tensors.get(idx) else {
                err.get_or_insert(format!("missing tensor {name}"));
                return;
            };
            if rec.name != name || rec.shape != shapes[idx] || rec.data.len() != t.len() {
                err.get_or_insert(format!("tensor {idx}: expected {name} {:?}", shapes[idx]));
            } else {
                t.copy_from_slice(&rec.data);
            }
            idx += 1;
        });
        if let Some(e) = err {
            return Err(Error::Checkpoint(e));
        }
        if idx != ckpt.tensors.len() {
            return Err(Error::Checkpoint("extra tensors in checkpoint".into()));
        }
        Ok(params)
    }

    fn shapes(&self) -> Vec<Vec<usize>> {
        let mut out = Vec::new();
        let lin = |out: &mut Vec<Vec<usize>>, l: &Linear| {
            out.push(l.weight.shape().to_vec());
            out.push(l.bias.shape().to_vec());
        };
        let norm = |out: &mut Vec<Vec<usize>>, n: &LayerNorm| {
            out.push(n.gamma.shape().to_vec());
            out.push(n.beta.shape().to_vec());
        };
        lin(&mut out, &self.input);
        out.push(self.kind_embedding.shape().to_vec());
        out.push(self.global_features.shape().to_vec());
        out.push(self.global_proximity.shape().to_vec());
        for layer in &self.layers {
            norm(&mut out, &layer.attn_norm);
            for l in [&layer.query, &layer.key, &layer.value, &layer.output] {
                lin(&mut out, l);
            }
            norm(&mut out, &layer.ffn_norm);
            lin(&mut out, &layer.ffn_in);
            lin(&mut out, &layer.ffn_out);
            lin(&mut out, &layer.proximity);
        }
        norm(&mut out, &self.head_norm);
        lin(&mut out, &self.head_hidden);
        lin(&mut out, &self.head_out);
        out
    }
}

pub const CHECKPOINT_FORMAT: &str = "ansgt-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorRecord {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    config: ModelConfig,
    tensors: Vec<TensorRecord>,
}
