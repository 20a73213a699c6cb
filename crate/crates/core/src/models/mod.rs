//! Small fully convolutional segmentation networks: stride-1, resolution
//! preserving convolutions with optional ReLU, producing `[M, H, W]` logits.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{train, train_with_progress, EpochStats, TrainConfig};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synthdata::LabelMap;
use crate::tensorcore::{argmax_channels, Graph, NodeId, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub activation: Activation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub name: String,
    pub input_channels: usize,
    pub layers: Vec<LayerSpec>,
}

impl ModelSpec {
    /// Hidden layers with ReLU followed by a linear `num_classes` head.
    pub fn conv_stack(name: &str, input_channels: usize, hidden: &[usize], kernel: usize, num_classes: usize) -> Self {
        let mut layers: Vec<LayerSpec> = hidden
            .iter()
            .map(|&c| LayerSpec {
                out_channels: c,
                kernel,
                activation: Activation::Relu,
            })
            .collect();
        layers.push(LayerSpec {
            out_channels: num_classes,
            kernel,
            activation: Activation::None,
        });
        Self {
            name: name.to_string(),
            input_channels,
            layers,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.layers.last().map_or(0, |l| l.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("model {}: {m}", self.name)));
        if self.name.is_empty() {
            return Err(Error::Config("model name must not be empty".into()));
        }
        if self.input_channels == 0 {
            return bad("input_channels must be positive".into());
        }
        let Some(last) = self.layers.last() else {
            return bad("needs at least one layer".into());
        };
        if last.activation != Activation::None {
            return bad("final layer must produce raw logits (activation = none)".into());
        }
        if last.out_channels < 2 {
            return bad("final layer needs at least two classes".into());
        }
        for (i, l) in self.layers.iter().enumerate() {
            if l.out_channels == 0 {
                return bad(format!("layer {i} has zero output channels"));
            }
            if l.kernel % 2 == 0 {
                return bad(format!("layer {i} kernel {} is not odd", l.kernel));
            }
        }
        Ok(())
    }

    /// `(kernel shape, bias shape)` per layer.
    pub fn param_shapes(&self) -> Vec<([usize; 4], usize)> {
        let mut c_in = self.input_channels;
        self.layers
            .iter()
            .map(|l| {
                let s = ([l.out_channels, c_in, l.kernel, l.kernel], l.out_channels);
                c_in = l.out_channels;
                s
            })
            .collect()
    }
}

/// The default model zoo: three architectures with different depth, width
/// and receptive field.
pub fn default_zoo(input_channels: usize, num_classes: usize) -> Vec<ModelSpec> {
    vec![
        ModelSpec::conv_stack("A", input_channels, &[16, 32], 5, num_classes),
        ModelSpec::conv_stack("B", input_channels, &[16, 16, 32, 32], 3, num_classes),
        ModelSpec::conv_stack("C", input_channels, &[24, 48, 24], 3, num_classes),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    pub kernel: Tensor,
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub layers: Vec<LayerParams>,
}

impl Parameters {
    pub fn zeros(spec: &ModelSpec) -> Self {
        Self {
            layers: spec
                .param_shapes()
                .into_iter()
                .map(|(k, b)| LayerParams {
                    kernel: Tensor::zeros(&k),
                    bias: Tensor::zeros(&[b]),
                })
                .collect(),
        }
    }

    pub fn check(&self, spec: &ModelSpec) -> Result<()> {
        let shapes = spec.param_shapes();
        if shapes.len() != self.layers.len() {
            return Err(Error::shape(
                "parameters",
                format!("{} layers in spec, {} in parameters", shapes.len(), self.layers.len()),
            ));
        }
        for (i, ((k, b), p)) in shapes.iter().zip(&self.layers).enumerate() {
            if p.kernel.shape() != k || p.bias.shape() != [*b] {
                return Err(Error::shape(
                    "parameters",
                    format!(
                        "layer {i}: kernel {:?} bias {:?}, spec wants {k:?} and [{b}]",
                        p.kernel.shape(),
                        p.bias.shape()
                    ),
                ));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.layers.iter().map(|l| l.kernel.len() + l.bias.len()).sum()
    }

    /// All values in layer order (kernel then bias).
    pub fn flat(&self) -> Vec<f32> {
        self.layers
            .iter()
            .flat_map(|l| l.kernel.data().iter().chain(l.bias.data()).copied())
            .collect()
    }
}

/// Uniform init with bound `sqrt(6 / fan_in)`; biases start at zero.
pub fn init_params(seed: u64, spec: &ModelSpec) -> Result<Parameters> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = spec
        .param_shapes()
        .into_iter()
        .map(|(k, b)| {
            let fan_in = (k[1] * k[2] * k[3]) as f32;
            let bound = (6.0 / fan_in).sqrt();
            LayerParams {
                kernel: Tensor::from_fn(&k, |_| rng.gen_range(-bound..bound)),
                bias: Tensor::zeros(&[b]),
            }
        })
        .collect();
    Ok(Parameters { layers })
}

/// Parameter leaves added to a graph, for reading back their gradients.
pub struct ParamNodes {
    pub layers: Vec<(NodeId, NodeId)>,
}

/// Appends the network to `g` on top of `input`; returns the logits node.
pub fn build_forward(
    g: &mut Graph,
    params: &Parameters,
    spec: &ModelSpec,
    input: NodeId,
    params_require_grad: bool,
) -> Result<(NodeId, ParamNodes)> {
    let (c, _, _) = g.value(input).dims3()?;
    if c != spec.input_channels {
        return Err(Error::shape(
            "forward",
            format!(
                "model {} expects {} channels, image has {c}",
                spec.name, spec.input_channels
            ),
        ));
    }
    params.check(spec)?;
    let mut x = input;
    let mut nodes = Vec::with_capacity(spec.layers.len());
    for (layer, p) in spec.layers.iter().zip(&params.layers) {
        let k = g.leaf(p.kernel.clone(), params_require_grad);
        let b = g.leaf(p.bias.clone(), params_require_grad);
        nodes.push((k, b));
        x = g.conv2d(x, k, b, layer.kernel / 2)?;
        if layer.activation == Activation::Relu {
            x = g.relu(x)?;
        }
    }
    Ok((x, ParamNodes { layers: nodes }))
}

/// Logits `[M, H, W]` for one image.
pub fn forward(params: &Parameters, spec: &ModelSpec, image: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let input = g.leaf(image.clone(), false);
    let (logits, _) = build_forward(&mut g, params, spec, input, false)?;
    Ok(g.value(logits).clone())
}

pub fn predict(params: &Parameters, spec: &ModelSpec, image: &Tensor) -> Result<LabelMap> {
    let logits = forward(params, spec, image)?;
    let (_, h, w) = logits.dims3()?;
    LabelMap::new(h, w, argmax_channels(&logits)?)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub seed: u64,
    pub epochs: u32,
    pub final_train_loss: f64,
    pub eval_miou: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub spec: ModelSpec,
    pub params: Parameters,
    pub meta: TrainMeta,
}

impl Checkpoint {
    pub fn name(&self) -> &str {
        &self.spec.name
    }

    pub fn forward(&self, image: &Tensor) -> Result<Tensor> {
        forward(&self.params, &self.spec, image)
    }

    pub fn predict(&self, image: &Tensor) -> Result<LabelMap> {
        predict(&self.params, &self.spec, image)
    }
}
