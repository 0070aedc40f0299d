//! The multi-scale gradual-integration network, its four ablations, and
//! the checkpoint container.

mod checkpoint;
mod config;

pub use checkpoint::{read_container, write_container, Container, CONTAINER_VERSION};
pub use config::{Fusion, ModelConfig, Variant, DEFAULT_DROPOUT};

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{softmax, Activations, Graph, Mode, NodeId, Param, Scalar, Tensor};
use crate::patching::{PatchTriple, PATCH_SIZE};
use crate::training::xavier_init;

/// Per-sample input shape `[channels, z, y, x]`.
pub const INPUT_SHAPE: [usize; 4] = [1, PATCH_SIZE[2], PATCH_SIZE[1], PATCH_SIZE[0]];

/// An intermediate activation and the stage that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap<T = f32> {
    pub values: Tensor<T>,
    pub stage_tag: String,
}

/// A stream-merge operation; `Conv1x1` carries its learned projection.
#[derive(Debug, Clone, Copy)]
pub enum FusionOp<'a, T> {
    Concat,
    Sum,
    Conv1x1 { weight: &'a [T], bias: &'a [T] },
}

/// Merges two stream outputs.
pub fn fuse_streams<T: Scalar>(a: &FeatureMap<T>, b: &FeatureMap<T>, op: FusionOp<'_, T>) -> Result<FeatureMap<T>> {
    let (sa, sb) = (a.values.shape, b.values.shape);
    let mismatch = |detail: String| Error::ShapeMismatch {
        layer: "fusion".into(),
        detail,
    };
    if sa[1..] != sb[1..] {
        return Err(mismatch(format!("spatial dims differ: {sa:?} vs {sb:?}")));
    }
    let concat = || {
        let mut data = a.values.data.clone();
        data.extend_from_slice(&b.values.data);
        Tensor::from_vec([sa[0] + sb[0], sa[1], sa[2], sa[3]], data)
    };
    let values = match op {
        FusionOp::Sum => {
            if sa != sb {
                return Err(mismatch(format!("sum needs identical shapes: {sa:?} vs {sb:?}")));
            }
            let data = a.values.data.iter().zip(&b.values.data).map(|(&x, &y)| x + y).collect();
            Tensor::from_vec(sa, data)
        }
        FusionOp::Concat => concat(),
        FusionOp::Conv1x1 { weight, bias } => {
            let cat = concat();
            if weight.len() != sa[0] * cat.channels() || bias.len() != sa[0] {
                return Err(mismatch(format!(
                    "1x1 projection expects {} -> {} weights",
                    cat.channels(),
                    sa[0]
                )));
            }
            crate::nn::kernels::conv3d_forward(&cat, weight, bias, sa[0], 1)
        }
    };
    Ok(FeatureMap {
        values,
        stage_tag: "fused".into(),
    })
}

/// An instantiated network: topology, configuration and parameters.
#[derive(Debug, Clone)]
pub struct Model<T: Scalar = f32> {
    config: ModelConfig,
    graph: Graph,
    params: Vec<Param<T>>,
}

struct Builder<'a> {
    g: Graph,
    cfg: &'a ModelConfig,
    inputs: [NodeId; 3],
}

impl Builder<'_> {
    /// Two (conv 3x3x3, ReLU) layers.
    fn block(&mut self, name: &str, x: NodeId, width: usize) -> NodeId {
        let a = self.g.conv_relu(&format!("{name}.conv1"), x, width, 3);
        self.g.conv_relu(&format!("{name}.conv2"), a, width, 3)
    }

    /// Stream tail: conv + ReLU at the final stage width, then max-pool.
    fn tail(&mut self, prefix: &str, x: NodeId) -> NodeId {
        let c3 = self.cfg.stage_channels[2];
        let t = self.g.conv_relu(&format!("{prefix}.tail"), x, c3, 3);
        self.g.maxpool(&format!("{prefix}.pool"), t)
    }

    /// Gradual feature extraction over the scales in `order`.
    fn gradual(&mut self, prefix: &str, order: [usize; 3]) -> Result<NodeId> {
        let [c1, c2, c3] = [self.cfg.stage_channels[0], self.cfg.stage_channels[1], self.cfg.stage_channels[2]];
        let f1 = self.block(&format!("{prefix}.stage1"), self.inputs[order[0]], c1);
        self.g.set_tag(f1, format!("{prefix}.F1"));
        let cat = self.g.concat(&format!("{prefix}.cat2"), &[f1, self.inputs[order[1]]])?;
        let f12 = self.block(&format!("{prefix}.stage2"), cat, c2);
        self.g.set_tag(f12, format!("{prefix}.F12"));
        let cat = self.g.concat(&format!("{prefix}.cat3"), &[f12, self.inputs[order[2]]])?;
        let f123 = self.block(&format!("{prefix}.stage3"), cat, c3);
        self.g.set_tag(f123, format!("{prefix}.F123"));
        Ok(self.tail(prefix, f123))
    }

    fn radical_inputs(&mut self) -> Result<NodeId> {
        let [c1, c2, c3] = [self.cfg.stage_channels[0], self.cfg.stage_channels[1], self.cfg.stage_channels[2]];
        let x = self.g.concat("ri.input", &self.inputs.clone())?;
        let f1 = self.block("ri.stage1", x, c1);
        self.g.set_tag(f1, "ri.F1");
        let f2 = self.block("ri.stage2", f1, c2);
        self.g.set_tag(f2, "ri.F12");
        let f3 = self.block("ri.stage3", f2, c3);
        self.g.set_tag(f3, "ri.F123");
        Ok(self.tail("ri", f3))
    }

    fn radical_low_level(&mut self) -> Result<NodeId> {
        let [c1, c2, c3] = [self.cfg.stage_channels[0], self.cfg.stage_channels[1], self.cfg.stage_channels[2]];
        let firsts: Vec<NodeId> = (0..3)
            .map(|s| {
                let f = self.block(&format!("lr.stage1.s{}", s + 1), self.inputs[s], c1);
                self.g.set_tag(f, format!("lr.S{}.F1", s + 1));
                f
            })
            .collect();
        let sum = self.g.add("lr.sum12", firsts[0], firsts[1])?;
        let sum = self.g.add("lr.sum123", sum, firsts[2])?;
        self.g.set_tag(sum, "lr.F1");
        let f2 = self.block("lr.stage2", sum, c2);
        self.g.set_tag(f2, "lr.F12");
        let f3 = self.block("lr.stage3", f2, c3);
        self.g.set_tag(f3, "lr.F123");
        Ok(self.tail("lr", f3))
    }

    fn head(&mut self, mut x: NodeId) {
        for (i, &w) in self.cfg.head_channels.clone().iter().enumerate() {
            x = self.g.conv_relu(&format!("head.conv{}", i + 1), x, w, 3);
        }
        x = self.g.maxpool("head.pool", x);
        for (i, &w) in self.cfg.fc_widths.clone().iter().enumerate() {
            let d = self.g.dense(&format!("fc{}", i + 1), x, w);
            let r = self.g.relu(&format!("fc{}.relu", i + 1), d);
            x = self.g.dropout(&format!("fc{}.dropout", i + 1), r, self.cfg.dropout_rate);
        }
        let out = self.g.dense("output", x, self.cfg.num_classes);
        self.g.set_output(out);
    }
}

/// Builds the topology for `config`.
pub fn build_graph(config: &ModelConfig) -> Result<Graph> {
    config.validate()?;
    let mut g = Graph::new();
    let inputs = [g.input(0, INPUT_SHAPE), g.input(1, INPUT_SHAPE), g.input(2, INPUT_SHAPE)];
    let mut b = Builder { g, cfg: config, inputs };
    let trunk = match config.variant {
        Variant::Zi => b.gradual("zi", [0, 1, 2])?,
        Variant::Zo => b.gradual("zo", [2, 1, 0])?,
        Variant::Ri => b.radical_inputs()?,
        Variant::Lr => b.radical_low_level()?,
        Variant::Mgi => {
            let zi = b.gradual("zi", [0, 1, 2])?;
            let zo = b.gradual("zo", [2, 1, 0])?;
            let fused = match config.fusion {
                Fusion::Sum => b.g.add("fusion.sum", zi, zo)?,
                Fusion::Concat => b.g.concat("fusion.concat", &[zi, zo])?,
                Fusion::Conv1x1 => {
                    let cat = b.g.concat("fusion.concat", &[zi, zo])?;
                    b.g.conv("fusion.conv1x1", cat, config.stage_channels[2], 1)
                }
            };
            b.g.set_tag(fused, "fused");
            fused
        }
    };
    b.head(trunk);
    Ok(b.g)
}

/// Converts a patch triple into the three network inputs.
pub fn triple_inputs<T: Scalar>(t: &PatchTriple) -> [Tensor<T>; 3] {
    t.scales()
        .map(|p| Tensor::from_vec(INPUT_SHAPE, p.data().iter().map(|&v| T::of(v as f64)).collect()))
}

impl<T: Scalar> Model<T> {
    /// Builds the network with all parameters zero.
    pub fn build(config: ModelConfig) -> Result<Self> {
        let graph = build_graph(&config)?;
        let params = graph
            .param_shapes()
            .iter()
            .map(|(name, shape)| Param {
                name: name.clone(),
                shape: shape.clone(),
                data: vec![T::zero(); shape.iter().product()],
            })
            .collect();
        Ok(Model { config, graph, params })
    }

    /// Builds the network with Xavier-uniform weights and zero biases.
    pub fn build_initialized(config: ModelConfig, seed: u64) -> Result<Self> {
        let mut m = Self::build(config)?;
        m.initialize(seed);
        Ok(m)
    }

    /// Re-draws every weight tensor from one seeded stream, in parameter order.
    pub fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for p in &mut self.params {
            p.data = xavier_init(&p.shape, &mut rng);
        }
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn graph(&self) -> &Graph {
        &self.graph
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param<T>> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    /// Sets the dropout rate used in training mode.
    pub fn set_dropout(&mut self, rate: f64) {
        self.config.dropout_rate = rate;
        self.graph.set_dropout_rate(rate);
    }

    /// Exact trainable scalar count (weights + biases).
    pub fn count_parameters(&self) -> usize {
        self.graph.parameter_count()
    }

    /// Forward pass over one sample, keeping every activation.
    pub fn forward_sample(&self, t: &PatchTriple, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Activations<T>> {
        self.graph.forward(&self.params, &triple_inputs(t), mode, rng)
    }

    /// Inference: `[p(non-nodule), p(nodule)]` per sample.
    pub fn forward(&self, batch: &[PatchTriple]) -> Result<Vec<[f64; 2]>> {
        if batch.is_empty() {
            return Err(Error::InvalidArgument("forward needs a non-empty batch".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        batch
            .iter()
            .map(|t| {
                let acts = self.forward_sample(t, Mode::Inference, &mut rng)?;
                let p = softmax(&acts.output().data);
                Ok([p[0].as_f64(), p[1].as_f64()])
            })
            .collect()
    }

    /// Intermediate activations for the requested stage tags.
    pub fn dump_feature_maps(&self, x: &PatchTriple, tags: &[&str]) -> Result<BTreeMap<String, FeatureMap<T>>> {
        let ids: Vec<NodeId> = tags
            .iter()
            .map(|t| self.graph.find_tag(t).ok_or_else(|| Error::UnknownTag(t.to_string())))
            .collect::<Result<_>>()?;
        if ids.is_empty() {
            return Ok(BTreeMap::new());
        }
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut acts = self.forward_sample(x, Mode::Inference, &mut rng)?;
        Ok(tags
            .iter()
            .zip(ids)
            .map(|(t, id)| {
                let values = std::mem::replace(&mut acts.values[id], Tensor::zeros([0, 0, 0, 0]));
                (
                    t.to_string(),
                    FeatureMap {
                        values,
                        stage_tag: t.to_string(),
                    },
                )
            })
            .collect())
    }

    /// Fusion op with this model's learned parameters (two-stream only).
    pub fn fusion_op(&self) -> Option<FusionOp<'_, T>> {
        if self.config.variant != Variant::Mgi {
            return None;
        }
        Some(match self.config.fusion {
            Fusion::Sum => FusionOp::Sum,
            Fusion::Concat => FusionOp::Concat,
            Fusion::Conv1x1 => FusionOp::Conv1x1 {
                weight: &self.param("fusion.conv1x1.weight")?.data,
                bias: &self.param("fusion.conv1x1.bias")?.data,
            },
        })
    }

    /// Max |a - b| over all parameters; `None` if the topologies differ.
    pub fn max_param_diff(&self, other: &Model<T>) -> Option<f64> {
        if self.params.len() != other.params.len() {
            return None;
        }
        let mut m = 0.0f64;
        for (a, b) in self.params.iter().zip(&other.params) {
            if a.shape != b.shape {
                return None;
            }
            for (&x, &y) in a.data.iter().zip(&b.data) {
                m = m.max((x - y).abs().as_f64());
            }
        }
        Some(m)
    }
}

impl Model<f32> {
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let meta = serde_json::json!({ "kind": "checkpoint", "config": self.config });
        let tensors = self
            .params
            .iter()
            .map(|p| (p.name.clone(), p.shape.clone(), p.data.clone()))
            .collect();
        write_container(path, &Container { meta, tensors })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = read_container(path)?;
        let config: ModelConfig = serde_json::from_value(c.meta["config"].clone())
            .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
        let mut m = Model::build(config)?;
        if c.tensors.len() != m.params.len() {
            return Err(Error::Format(format!(
                "checkpoint has {} tensors, model expects {}",
                c.tensors.len(),
                m.params.len()
            )));
        }
        for (p, (name, shape, data)) in m.params.iter_mut().zip(c.tensors) {
            if p.name != name || p.shape != shape {
                return Err(Error::Format(format!(
                    "tensor `{name}` {shape:?} does not match `{}` {:?}",
                    p.name, p.shape
                )));
            }
            p.data = data;
        }
        Ok(m)
    }

    /// Writes the requested feature maps as a container.
    pub fn save_feature_maps(&self, x: &PatchTriple, tags: &[&str], path: impl AsRef<Path>) -> Result<()> {
        let maps = self.dump_feature_maps(x, tags)?;
        let meta = serde_json::json!({
            "kind": "feature_maps",
            "config": self.config,
            "series_id": x.candidate.series_id,
            "world_mm": x.candidate.world_mm,
        });
        let tensors = maps
            .into_iter()
            .map(|(tag, fm)| (tag, fm.values.shape.to_vec(), fm.values.data))
            .collect();
        write_container(path, &Container { meta, tensors })
    }

    /// Same parameters at double precision.
    pub fn to_f64(&self) -> Model<f64> {
        Model {
            config: self.config.clone(),
            graph: self.graph.clone(),
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|&v| v as f64).collect(),
                })
                .collect(),
        }
    }
}

#[cfg(test)]
mod tests;
