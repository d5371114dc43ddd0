//! Classifier architectures with seeded initialization and checkpointing.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::{linalg, Conv2dParams, Tape, Var};
use crate::checkpoint;
use crate::error::{Error, Result};
use crate::rng::{Purpose, RngStream};
use crate::tensor::Tensor;

/// Rows per forward pass when running inference over many images.
const INFERENCE_CHUNK: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "id", rename_all = "snake_case", deny_unknown_fields)]
pub enum Architecture {
    /// conv3x3(c1)-relu-pool2, conv3x3(c2)-relu-pool2, linear(hidden)-relu, linear(classes).
    DeskCnn {
        conv1: usize,
        conv2: usize,
        hidden: usize,
    },
    /// flatten, linear(hidden)-relu, linear(classes).
    Mlp { hidden: usize },
}

impl Architecture {
    pub const DESK_CNN: Architecture = Architecture::DeskCnn {
        conv1: 16,
        conv2: 32,
        hidden: 128,
    };
    pub const MLP: Architecture = Architecture::Mlp { hidden: 128 };

    /// Default widths for an architecture id.
    pub fn from_id(id: &str) -> Result<Self> {
        match id {
            "desk_cnn" => Ok(Self::DESK_CNN),
            "mlp" => Ok(Self::MLP),
            other => Err(Error::config(format!(
                "unknown architecture id `{other}` (expected desk_cnn or mlp)"
            ))),
        }
    }

    pub fn id(&self) -> &'static str {
        match self {
            Architecture::DeskCnn { .. } => "desk_cnn",
            Architecture::Mlp { .. } => "mlp",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub arch: Architecture,
    /// `(channels, height, width)`.
    pub input: [usize; 3],
    pub classes: usize,
    pub init_seed: u64,
}

impl ModelSpec {
    pub fn new(arch: Architecture, input: [usize; 3], classes: usize, init_seed: u64) -> Self {
        ModelSpec {
            arch,
            input,
            classes,
            init_seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 {
            return Err(Error::config("model needs at least 2 classes"));
        }
        if self.input.contains(&0) {
            return Err(Error::config(format!(
                "input dims must be positive, got {:?}",
                self.input
            )));
        }
        match self.arch {
            Architecture::DeskCnn {
                conv1,
                conv2,
                hidden,
            } => {
                if self.input[1] < 4 || self.input[2] < 4 {
                    return Err(Error::config(format!(
                        "desk_cnn needs spatial dims >= 4, got {:?}",
                        self.input
                    )));
                }
                if conv1 == 0 || conv2 == 0 || hidden == 0 {
                    return Err(Error::config("desk_cnn widths must be positive"));
                }
            }
            Architecture::Mlp { hidden } => {
                if hidden == 0 {
                    return Err(Error::config("mlp hidden width must be positive"));
                }
            }
        }
        Ok(())
    }

    /// `(name, shape, fan_in)` for every parameter, in storage order.
    fn layout(&self) -> Vec<(&'static str, Vec<usize>, usize)> {
        let [c, h, w] = self.input;
        let k = self.classes;
        match self.arch {
            Architecture::DeskCnn {
                conv1,
                conv2,
                hidden,
            } => {
                let flat = conv2 * (h / 2 / 2) * (w / 2 / 2);
                vec![
                    ("conv1.weight", vec![conv1, c, 3, 3], c * 9),
                    ("conv1.bias", vec![conv1], 0),
                    ("conv2.weight", vec![conv2, conv1, 3, 3], conv1 * 9),
                    ("conv2.bias", vec![conv2], 0),
                    ("fc1.weight", vec![flat, hidden], flat),
                    ("fc1.bias", vec![hidden], 0),
                    ("fc2.weight", vec![hidden, k], hidden),
                    ("fc2.bias", vec![k], 0),
                ]
            }
            Architecture::Mlp { hidden } => {
                let flat = c * h * w;
                vec![
                    ("fc1.weight", vec![flat, hidden], flat),
                    ("fc1.bias", vec![hidden], 0),
                    ("fc2.weight", vec![hidden, k], hidden),
                    ("fc2.bias", vec![k], 0),
                ]
            }
        }
    }

    /// Text sidecar written next to checkpoints.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "arch={}", self.arch.id());
        match self.arch {
            Architecture::DeskCnn {
                conv1,
                conv2,
                hidden,
            } => {
                let _ = writeln!(s, "widths={conv1},{conv2},{hidden}");
            }
            Architecture::Mlp { hidden } => {
                let _ = writeln!(s, "widths={hidden}");
            }
        }
        let [c, h, w] = self.input;
        let _ = writeln!(s, "input={c},{h},{w}");
        let _ = writeln!(s, "classes={}", self.classes);
        let _ = writeln!(s, "init_seed={}", self.init_seed);
        s
    }
}

/// Anything that maps a batch of images to class probabilities.
pub trait Predictor {
    /// `(M, C, H, W)` images to `(M, classes)` probability rows.
    fn probabilities(&self, images: &Tensor) -> Result<Tensor>;
}

#[derive(Clone, Debug)]
pub struct Model {
    spec: ModelSpec,
    names: Vec<&'static str>,
    params: Vec<Tensor>,
}

/// Weight of the final (logits) layer in both architectures.
const OUTPUT_WEIGHT: &str = "fc2.weight";

impl Model {
    /// Builds a model with fan-in scaled uniform weights drawn from the spec's
    /// init seed, and zero biases. Layers followed by a ReLU use He scaling
    /// (`U(-a, a)`, `a = sqrt(6 / fan_in)`); the logits layer uses unit gain
    /// (`a = sqrt(3 / fan_in)`).
    pub fn build(spec: &ModelSpec) -> Result<Self> {
        spec.validate()?;
        let mut names = Vec::new();
        let mut params = Vec::new();
        for (layer, (name, shape, fan_in)) in spec.layout().into_iter().enumerate() {
            let n: usize = shape.iter().product();
            let data = if fan_in == 0 {
                vec![0.0; n]
            } else {
                let gain2 = if name == OUTPUT_WEIGHT { 1.0 } else { 2.0 };
                let bound = (3.0 * gain2 / fan_in as f64).sqrt();
                let mut rng = RngStream::new(spec.init_seed, Purpose::ModelInit, layer as u64, 0);
                (0..n).map(|_| rng.uniform(-bound, bound)).collect()
            };
            names.push(name);
            params.push(Tensor::new(shape, data)?.with_grad());
        }
        Ok(Model {
            spec: spec.clone(),
            names,
            params,
        })
    }

    pub fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn named_params(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().copied().zip(&self.params)
    }

    pub fn parameter_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a leaf on `tape`.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p)).collect()
    }

    /// Logits for `images` using parameters already bound to `tape`.
    pub fn forward_on(&self, tape: &mut Tape, params: &[Var], images: Var) -> Result<Var> {
        let shape = tape.shape(images).to_vec();
        let [c, h, w] = self.spec.input;
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::shape_mismatch("model input", &shape, &[0, c, h, w]));
        }
        let m = shape[0];
        match self.spec.arch {
            Architecture::DeskCnn { .. } => {
                let same = Conv2dParams {
                    stride: 1,
                    padding: 1,
                };
                let x = tape.conv2d(images, params[0], Some(params[1]), same)?;
                let x = tape.relu(x)?;
                let x = tape.max_pool2d(x, 2)?;
                let x = tape.conv2d(x, params[2], Some(params[3]), same)?;
                let x = tape.relu(x)?;
                let x = tape.max_pool2d(x, 2)?;
                let flat = tape.value(x).len() / m.max(1);
                let x = tape.reshape(x, &[m, flat])?;
                let x = tape.matmul(x, params[4])?;
                let x = tape.add_bias(x, params[5])?;
                let x = tape.relu(x)?;
                let x = tape.matmul(x, params[6])?;
                tape.add_bias(x, params[7])
            }
            Architecture::Mlp { .. } => {
                let x = tape.reshape(images, &[m, c * h * w])?;
                let x = tape.matmul(x, params[0])?;
                let x = tape.add_bias(x, params[1])?;
                let x = tape.relu(x)?;
                let x = tape.matmul(x, params[2])?;
                tape.add_bias(x, params[3])
            }
        }
    }

    /// Inference-only forward pass. Errors if any logit is non-finite.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        let m = images.shape().first().copied().unwrap_or(0);
        let item: Vec<usize> = images.shape()[1..].to_vec();
        let width: usize = item.iter().product();
        let mut out = Vec::with_capacity(m * self.spec.classes);
        for start in (0..m).step_by(INFERENCE_CHUNK) {
            let end = (start + INFERENCE_CHUNK).min(m);
            let mut shape = vec![end - start];
            shape.extend_from_slice(&item);
            let chunk = Tensor::new(shape, images.data()[start * width..end * width].to_vec())?;
            let mut tape = Tape::new();
            let params: Vec<Var> = self
                .params
                .iter()
                .map(|p| tape.constant(p.clone()))
                .collect();
            let x = tape.constant(chunk);
            let y = self.forward_on(&mut tape, &params, x)?;
            out.extend_from_slice(tape.value(y));
        }
        if let Some(bad) = out.iter().find(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: "forward",
                detail: format!("non-finite logit {bad}"),
            });
        }
        Tensor::new(vec![m, self.spec.classes], out)
    }

    /// Copies gradients from `tape` (after backward) into the parameters.
    pub fn collect_grads(&mut self, tape: &Tape, vars: &[Var]) -> Result<()> {
        for (p, &v) in self.params.iter_mut().zip(vars) {
            let g = tape
                .grad(v)
                .map(<[f64]>::to_vec)
                .unwrap_or_else(|| vec![0.0; p.len()]);
            p.set_grad(g)?;
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<u8> {
        checkpoint::encode(&self.params)
    }

    /// Replaces parameters from a checkpoint; shapes must match exactly.
    pub fn restore(&mut self, bytes: &[u8]) -> Result<()> {
        let loaded = checkpoint::decode(bytes)?;
        if loaded.len() != self.params.len() {
            return Err(Error::format(
                8,
                format!(
                    "checkpoint holds {} tensors, model has {}",
                    loaded.len(),
                    self.params.len()
                ),
            ));
        }
        for (i, (have, got)) in self.params.iter().zip(&loaded).enumerate() {
            if have.shape() != got.shape() {
                return Err(Error::format(
                    12,
                    format!(
                        "tensor {i} ({}) has shape {:?}, checkpoint has {:?}",
                        self.names[i],
                        have.shape(),
                        got.shape()
                    ),
                ));
            }
        }
        self.params = loaded.into_iter().map(Tensor::with_grad).collect();
        Ok(())
    }

    /// Writes `<path>` (checkpoint) and `<path>.manifest` (text sidecar).
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.snapshot())?;
        let mut sidecar = path.as_os_str().to_owned();
        sidecar.push(".manifest");
        std::fs::write(sidecar, self.spec.manifest())?;
        Ok(())
    }
}

impl Predictor for Model {
    fn probabilities(&self, images: &Tensor) -> Result<Tensor> {
        let mut logits = self.logits(images)?;
        let k = self.spec.classes;
        for row in logits.data_mut().chunks_mut(k) {
            linalg::softmax_in_place(row);
        }
        Ok(logits)
    }
}
