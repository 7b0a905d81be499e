//! Instantiated single-scale stage chains with a GAP + linear head.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{BranchGraph, LayerGraph, LayerOp, Shape3, StageGraph};
use super::session::{Mode, ParamStore, Session};
use super::spec::{BaseNetworkSpec, LayerSpec};
use crate::autodiff::{BatchStats, Var};
use crate::error::{Error, Result};
use crate::layers::{update_running_stats, Conv2dSpec, BN_EPSILON, BN_MOMENTUM};
use crate::tensor::{Scalar, Tensor};

/// Convolution (no bias) + batch norm, optionally followed by ReLU.
#[derive(Debug, Clone)]
struct ConvUnit {
    name: String,
    conv: Conv2dSpec,
    relu: bool,
    weight: String,
    gamma: String,
    beta: String,
    running_mean: String,
    running_var: String,
}

impl ConvUnit {
    fn new(name: String, conv: Conv2dSpec, relu: bool) -> Self {
        ConvUnit {
            weight: format!("{name}.weight"),
            gamma: format!("{name}.bn.gamma"),
            beta: format!("{name}.bn.beta"),
            running_mean: format!("{name}.bn.running_mean"),
            running_var: format!("{name}.bn.running_var"),
            name,
            conv,
            relu,
        }
    }
}

#[derive(Debug, Clone)]
enum Block {
    Plain(Vec<ConvUnit>),
    Residual {
        name: String,
        conv1: ConvUnit,
        conv2: ConvUnit,
        shortcut: Option<ConvUnit>,
    },
}

impl Block {
    fn units(&self) -> Vec<&ConvUnit> {
        match self {
            Block::Plain(units) => units.iter().collect(),
            Block::Residual {
                conv1,
                conv2,
                shortcut,
                ..
            } => [Some(conv1), Some(conv2), shortcut.as_ref()]
                .into_iter()
                .flatten()
                .collect(),
        }
    }
}

/// Single-scale network. Parameters live in `params`, batch-norm running
/// statistics in `buffers`; both are keyed by dotted names under `prefix`.
#[derive(Debug, Clone)]
pub struct BaseNetwork<T: Scalar = f32> {
    spec: BaseNetworkSpec,
    prefix: String,
    stages: Vec<Vec<Block>>,
    widths: Vec<usize>,
    head_weight: String,
    head_bias: String,
    params: ParamStore<T>,
    buffers: ParamStore<T>,
}

impl<T: Scalar> BaseNetwork<T> {
    /// Instantiates `spec` (scaled by its alpha) with fan-in normal
    /// initialization drawn from `seed`.
    pub fn new(spec: &BaseNetworkSpec, prefix: &str, seed: u64) -> Result<Self> {
        spec.validate()?;
        let scaled = spec.scaled_stages();
        let mut stages = Vec::with_capacity(scaled.len());
        let mut in_c = spec.in_channels;
        for (i, stage) in scaled.iter().enumerate() {
            let mut blocks = Vec::with_capacity(stage.layers.len());
            for (j, layer) in stage.layers.iter().enumerate() {
                let name = format!("{prefix}.s{i}.l{j}");
                let convs = layer.convs(in_c)?;
                let unit = |(suffix, conv): (&str, Conv2dSpec), relu| {
                    ConvUnit::new(format!("{name}.{suffix}"), conv, relu)
                };
                let block = match layer {
                    LayerSpec::BasicBlock { .. } => {
                        let mut it = convs.into_iter();
                        let conv1 = unit(it.next().unwrap(), true);
                        let conv2 = unit(it.next().unwrap(), false);
                        let shortcut = it.next().map(|c| unit(c, false));
                        Block::Residual {
                            name,
                            conv1,
                            conv2,
                            shortcut,
                        }
                    }
                    _ => Block::Plain(convs.into_iter().map(|c| unit(c, true)).collect()),
                };
                blocks.push(block);
                in_c = layer.out_channels();
            }
            stages.push(blocks);
        }
        let widths: Vec<usize> = scaled.iter().map(|s| s.out_channels).collect();
        let mut net = BaseNetwork {
            spec: spec.clone(),
            prefix: prefix.to_string(),
            stages,
            head_weight: format!("{prefix}.head.weight"),
            head_bias: format!("{prefix}.head.bias"),
            widths,
            params: ParamStore::new(),
            buffers: ParamStore::new(),
        };
        net.initialize(seed);
        Ok(net)
    }

    fn initialize(&mut self, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut normal = |shape: Vec<usize>, fan_in: usize| {
            let dist = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
            Tensor::from_fn(shape, |_| T::from_f64_lossy(dist.sample(&mut rng)))
        };
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        for block in self.stages.iter().flatten() {
            for u in block.units() {
                let c = u.conv.out_channels;
                params.insert(u.weight.clone(), normal(u.conv.weight_shape().to_vec(), u.conv.fan_in()));
                params.insert(u.gamma.clone(), Tensor::ones(vec![c]));
                params.insert(u.beta.clone(), Tensor::zeros(vec![c]));
                buffers.insert(u.running_mean.clone(), Tensor::zeros(vec![c]));
                buffers.insert(u.running_var.clone(), Tensor::ones(vec![c]));
            }
        }
        let (k, c) = (self.spec.num_classes, self.head_features());
        params.insert(self.head_weight.clone(), normal(vec![k, c], c));
        params.insert(self.head_bias.clone(), Tensor::zeros(vec![k]));
        self.params = params;
        self.buffers = buffers;
    }

    pub fn spec(&self) -> &BaseNetworkSpec {
        &self.spec
    }

    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    /// Instantiated output channels of every stage.
    pub fn stage_widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn head_features(&self) -> usize {
        *self.widths.last().expect("validated non-empty")
    }

    pub fn head_param_names(&self) -> [&str; 2] {
        [&self.head_weight, &self.head_bias]
    }

    /// Names of the parameters belonging to stage `i`.
    pub fn stage_param_names(&self, i: usize) -> Vec<String> {
        self.stages[i]
            .iter()
            .flat_map(|b| b.units())
            .flat_map(|u| [u.weight.clone(), u.gamma.clone(), u.beta.clone()])
            .collect()
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn buffers(&self) -> &ParamStore<T> {
        &self.buffers
    }

    pub fn buffers_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.buffers
    }

    /// Same network in another precision.
    pub fn cast<U: Scalar>(&self) -> BaseNetwork<U> {
        let cast = |s: &ParamStore<T>| s.iter().map(|(k, v)| (k.clone(), v.cast())).collect();
        BaseNetwork {
            spec: self.spec.clone(),
            prefix: self.prefix.clone(),
            stages: self.stages.clone(),
            widths: self.widths.clone(),
            head_weight: self.head_weight.clone(),
            head_bias: self.head_bias.clone(),
            params: cast(&self.params),
            buffers: cast(&self.buffers),
        }
    }

    fn record_unit(&self, sess: &mut Session<T>, u: &ConvUnit, x: Var) -> Result<Var> {
        let w = sess.bind(&self.params, &u.weight)?;
        let gamma = sess.bind(&self.params, &u.gamma)?;
        let beta = sess.bind(&self.params, &u.beta)?;
        let y = sess.tape.conv2d(x, w, None, u.conv)?;
        let eps = T::from_f64_lossy(BN_EPSILON);
        let y = match sess.mode() {
            Mode::Train => {
                let (y, stats) = sess.tape.batchnorm_train(y, gamma, beta, eps)?;
                sess.record_bn(&u.name, stats);
                y
            }
            Mode::Eval => sess.tape.batchnorm_infer(
                y,
                gamma,
                beta,
                &self.buffers[&u.running_mean],
                &self.buffers[&u.running_var],
                eps,
            )?,
        };
        if u.relu {
            sess.tape.relu(y)
        } else {
            Ok(y)
        }
    }

    fn record_block(&self, sess: &mut Session<T>, block: &Block, x: Var) -> Result<Var> {
        match block {
            Block::Plain(units) => units
                .iter()
                .try_fold(x, |h, u| self.record_unit(sess, u, h)),
            Block::Residual {
                conv1,
                conv2,
                shortcut,
                ..
            } => {
                let h = self.record_unit(sess, conv1, x)?;
                let h = self.record_unit(sess, conv2, h)?;
                let skip = match shortcut {
                    Some(u) => self.record_unit(sess, u, x)?,
                    None => x,
                };
                let sum = sess.tape.add(h, skip)?;
                sess.tape.relu(sum)
            }
        }
    }

    /// Stage `i` applied to `x`; the result is the stage-end feature map.
    pub fn record_stage(&self, sess: &mut Session<T>, i: usize, x: Var) -> Result<Var> {
        let blocks = self.stages.get(i).ok_or_else(|| {
            Error::InvalidSpec(format!("{}: no stage {i}", self.prefix))
        })?;
        blocks
            .iter()
            .try_fold(x, |h, b| self.record_block(sess, b, h))
    }

    /// Global average pooling followed by the linear classifier.
    pub fn record_head(&self, sess: &mut Session<T>, features: Var) -> Result<Var> {
        let w = sess.bind(&self.params, &self.head_weight)?;
        let b = sess.bind(&self.params, &self.head_bias)?;
        let pooled = sess.tape.global_avg_pool(features)?;
        sess.tape.linear(pooled, w, Some(b))
    }

    /// Full network: logits and every stage-end feature.
    pub fn record(&self, sess: &mut Session<T>, x: Var) -> Result<(Var, Vec<Var>)> {
        self.check_channels(sess.tape.value(x)?)?;
        let mut features = Vec::with_capacity(self.stages.len());
        let mut h = x;
        for i in 0..self.stages.len() {
            h = self.record_stage(sess, i, h)?;
            features.push(h);
        }
        Ok((self.record_head(sess, h)?, features))
    }

    /// Inference-mode forward pass returning logits and stage features.
    pub fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Vec<Tensor<T>>)> {
        let mut sess = Session::inference();
        let xv = sess.tape.constant(x.clone());
        let (logits, feats) = self.record(&mut sess, xv)?;
        let feats = feats
            .into_iter()
            .map(|f| sess.tape.value(f).cloned())
            .collect::<Result<_>>()?;
        Ok((sess.tape.value(logits)?.clone(), feats))
    }

    pub(crate) fn check_channels(&self, x: &Tensor<T>) -> Result<()> {
        let (_, c, _, _) = x.dims4()?;
        if c != self.spec.in_channels {
            return Err(Error::ShapeMismatch {
                op: "network input channels",
                left: x.shape().to_vec(),
                right: vec![self.spec.in_channels],
            });
        }
        Ok(())
    }

    /// Folds training-mode batch statistics into the running statistics.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats<T>)]) -> Result<()> {
        let momentum = T::from_f64_lossy(BN_MOMENTUM);
        for (unit, stats) in updates {
            let mean_key = format!("{unit}.bn.running_mean");
            let var_key = format!("{unit}.bn.running_var");
            if !self.buffers.contains_key(&mean_key) {
                continue;
            }
            let mut mean = self.buffers.remove(&mean_key).unwrap();
            let var = self
                .buffers
                .get_mut(&var_key)
                .ok_or_else(|| Error::InvalidSpec(format!("missing buffer {var_key}")))?;
            update_running_stats(&mut mean, var, &stats.mean, &stats.var, stats.count, momentum);
            self.buffers.insert(mean_key, mean);
        }
        Ok(())
    }

    /// Shape propagation and MAC counts for a `[C, H, W]` input.
    pub fn describe(&self, name: &str, height: usize, width: usize) -> Result<BranchGraph> {
        let input: Shape3 = [self.spec.in_channels, height, width];
        let mut shape = input;
        let conv_layer = |u: &ConvUnit, s: Shape3| -> Result<LayerGraph> {
            let (oh, ow) = u.conv.output_size(s[1], s[2]).map_err(|_| {
                Error::InvalidSpec(format!(
                    "{}: {} produces an empty output from {}x{} input",
                    self.spec.name, u.name, s[1], s[2]
                ))
            })?;
            Ok(LayerGraph {
                name: u.name.clone(),
                op: LayerOp::Conv2d {
                    kernel: u.conv.kernel,
                    stride: u.conv.stride,
                    padding: u.conv.padding,
                    groups: u.conv.groups,
                    batchnorm: true,
                    relu: u.relu,
                },
                in_shape: s,
                out_shape: [u.conv.out_channels, oh, ow],
                macs: u.conv.macs(oh, ow),
            })
        };
        let mut stages = Vec::with_capacity(self.stages.len());
        for (i, blocks) in self.stages.iter().enumerate() {
            let mut layers = Vec::new();
            for block in blocks {
                match block {
                    Block::Plain(units) => {
                        for u in units {
                            let l = conv_layer(u, shape)?;
                            shape = l.out_shape;
                            layers.push(l);
                        }
                    }
                    Block::Residual {
                        name,
                        conv1,
                        conv2,
                        shortcut,
                    } => {
                        let l1 = conv_layer(conv1, shape)?;
                        let l2 = conv_layer(conv2, l1.out_shape)?;
                        let out = l2.out_shape;
                        layers.push(l1);
                        layers.push(l2);
                        if let Some(sc) = shortcut {
                            let l = conv_layer(sc, shape)?;
                            if l.out_shape != out {
                                return Err(Error::InvalidSpec(format!(
                                    "{name}: shortcut shape {:?} differs from {:?}",
                                    l.out_shape, out
                                )));
                            }
                            layers.push(l);
                        }
                        layers.push(LayerGraph {
                            name: format!("{name}.add"),
                            op: LayerOp::ResidualAdd { relu: true },
                            in_shape: out,
                            out_shape: out,
                            macs: 0,
                        });
                        shape = out;
                    }
                }
            }
            stages.push(StageGraph {
                index: i,
                stem: self.spec.is_stem(i),
                out_shape: shape,
                layers,
            });
        }
        let k = self.spec.num_classes;
        let head = vec![
            LayerGraph {
                name: format!("{}.head.pool", self.prefix),
                op: LayerOp::GlobalAvgPool,
                in_shape: shape,
                out_shape: [shape[0], 1, 1],
                macs: 0,
            },
            LayerGraph {
                name: format!("{}.head", self.prefix),
                op: LayerOp::Linear,
                in_shape: [shape[0], 1, 1],
                out_shape: [k, 1, 1],
                macs: (shape[0] * k) as u64,
            },
        ];
        Ok(BranchGraph {
            name: name.to_string(),
            input,
            stages,
            head,
        })
    }
}

/// Instantiates a single-scale network for `resolution`×`resolution` inputs,
/// rejecting stage chains that collapse to an empty map.
pub fn build_base<T: Scalar>(
    spec: &BaseNetworkSpec,
    resolution: usize,
    seed: u64,
) -> Result<BaseNetwork<T>> {
    let net = BaseNetwork::new(spec, "base", seed)?;
    net.describe("base", resolution, resolution)?;
    Ok(net)
}
