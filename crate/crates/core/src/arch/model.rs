use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::bilinear::{bilinear_deconv_kernel, bilinear_kernel_size};
use super::count::conv_has_bias;
use super::geometry::analyze_geometry;
use super::spec::{LayerKind, NetworkSpec, Role};
use crate::error::{Error, Result};
use crate::tensor::{
    batchnorm2d, batchnorm2d_backward, conv2d, conv2d_backward, conv_transpose2d,
    conv_transpose2d_backward, elementwise_sum, maxpool2d, maxpool2d_backward, relu, relu_backward,
    BnCache, BnMode, BnParams, ConvParams, Shape, Tensor,
};

/// Newly initialized parameters (context net, score branches, upsamplers)
/// train with a larger learning rate than backbone ones.
#[derive(Copy, Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Backbone,
    New,
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    /// Value with its gradient slot.
    pub value: Tensor,
    pub velocity: Vec<f64>,
    pub group: ParamGroup,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BnState {
    pub name: String,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub epsilon: f64,
    pub momentum: f64,
}

/// Batch statistics one BN site saw in the last forward pass.
#[derive(Clone, Debug)]
pub struct BnMoments {
    pub state: usize,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Conv {
        src: usize,
        weight: usize,
        bias: Option<usize>,
        stride: usize,
        pad: usize,
    },
    Upsample {
        src: usize,
        weight: usize,
        factor: usize,
    },
    BatchNorm {
        src: usize,
        gamma: usize,
        beta: usize,
        state: usize,
    },
    Relu {
        src: usize,
    },
    MaxPool {
        src: usize,
        kernel: usize,
        stride: usize,
    },
    Sum {
        srcs: Vec<usize>,
    },
}

enum Cache {
    None,
    Bn(BnCache),
    Pool(Vec<usize>),
}

struct Tape {
    values: Vec<Tensor>,
    caches: Vec<Cache>,
}

/// Executable network: parameter store plus a static graph evaluated with a
/// reverse-mode tape.
pub struct Model {
    spec: NetworkSpec,
    params: Vec<Param>,
    bn: Vec<BnState>,
    mode: BnMode,
    ops: Vec<Op>,
    /// Trunk feature-map name to the node holding its tapped output.
    taps: HashMap<String, usize>,
    /// Per-branch prediction nodes on the fusion grid.
    branches: Vec<(String, usize)>,
    head: Option<(usize, usize)>,
    output: usize,
    coarsest_jump: usize,
    tape: Option<Tape>,
}

impl Model {
    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.params.iter_mut().find(|p| p.name == name)
    }

    pub fn bn_states(&self) -> &[BnState] {
        &self.bn
    }

    pub fn bn_states_mut(&mut self) -> &mut [BnState] {
        &mut self.bn
    }

    pub fn mode(&self) -> BnMode {
        self.mode
    }

    pub fn set_mode(&mut self, mode: BnMode) {
        self.mode = mode;
    }

    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn classes(&self) -> usize {
        self.spec
            .classes()
            .unwrap_or_else(|| self.spec.output_channels())
    }

    /// Names of the branch sources, in fusion order.
    pub fn branch_sources(&self) -> Vec<&str> {
        self.branches.iter().map(|(s, _)| s.as_str()).collect()
    }

    /// Input sides must be multiples of this.
    pub fn coarsest_jump(&self) -> usize {
        self.coarsest_jump
    }

    /// Drops activations recorded by the last forward pass.
    pub fn clear_tape(&mut self) {
        self.tape = None;
    }

    pub fn zero_grads(&mut self) {
        for p in &mut self.params {
            p.value.zero_grad();
        }
    }

    fn check_input(&self, input: &Tensor) -> Result<()> {
        let s = input.shape();
        if s.c != self.spec.input_channels {
            return Err(Error::dim(format!(
                "model '{}' expects {} input channels (axis 1), got {}",
                self.spec.name, self.spec.input_channels, s.c
            )));
        }
        let j = self.coarsest_jump;
        if s.h % j != 0 || s.w % j != 0 {
            return Err(Error::geometry(format!(
                "model '{}' needs input sides divisible by {j}, got {}x{}",
                self.spec.name, s.h, s.w
            )));
        }
        Ok(())
    }

    fn run(&mut self, input: &Tensor) -> Result<Tape> {
        self.check_input(input)?;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.ops.len());
        let mut caches = Vec::with_capacity(self.ops.len());
        for op in &self.ops {
            let (value, cache) = match op {
                Op::Input => {
                    let mut t = input.clone();
                    t.clear_grad();
                    (t, Cache::None)
                }
                Op::Conv {
                    src,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let p = conv_params(&self.params, *weight, *bias, *stride, *pad);
                    (conv2d(&values[*src], &p)?, Cache::None)
                }
                Op::Upsample {
                    src,
                    weight,
                    factor,
                } => {
                    let p = upsample_params(&self.params, *weight, *factor);
                    let s = values[*src].shape();
                    (
                        conv_transpose2d(&values[*src], &p, (s.h * factor, s.w * factor))?,
                        Cache::None,
                    )
                }
                Op::BatchNorm {
                    src,
                    gamma,
                    beta,
                    state,
                } => {
                    let mut p = bn_params(&self.params, &self.bn[*state], *gamma, *beta, self.mode);
                    let (out, cache) = batchnorm2d(&values[*src], &mut p)?;
                    let st = &mut self.bn[*state];
                    st.running_mean = p.running_mean;
                    st.running_var = p.running_var;
                    (out, Cache::Bn(cache))
                }
                Op::Relu { src } => (relu(&values[*src]), Cache::None),
                Op::MaxPool {
                    src,
                    kernel,
                    stride,
                } => {
                    let out = maxpool2d(&values[*src], *kernel, *stride)?;
                    (out.output, Cache::Pool(out.argmax))
                }
                Op::Sum { srcs } => {
                    let inputs: Vec<&Tensor> = srcs.iter().map(|&i| &values[i]).collect();
                    (elementwise_sum(&inputs)?, Cache::None)
                }
            };
            values.push(value);
            caches.push(cache);
        }
        Ok(Tape { values, caches })
    }

    /// Logits at input resolution. Records the tape for [`Model::backward`].
    pub fn forward(&mut self, input: &Tensor) -> Result<Tensor> {
        let tape = self.run(input)?;
        let out = tape.values[self.output].clone();
        self.tape = Some(tape);
        Ok(out)
    }

    /// Forward pass without keeping the tape.
    pub fn predict(&mut self, input: &Tensor) -> Result<Tensor> {
        self.tape = None;
        let tape = self.run(input)?;
        Ok(tape.values[self.output].clone())
    }

    /// Output of a named trunk feature map from the last forward pass.
    pub fn feature(&self, name: &str) -> Option<&Tensor> {
        let &node = self.taps.get(name)?;
        self.tape.as_ref().map(|t| &t.values[node])
    }

    /// Each branch's prediction carried to input resolution by the head
    /// upsampler. Their sum is the model output.
    pub fn branch_outputs(&mut self, input: &Tensor) -> Result<Vec<(String, Tensor)>> {
        let tape = self.run(input)?;
        let mut out = Vec::with_capacity(self.branches.len());
        for (source, node) in &self.branches {
            let v = &tape.values[*node];
            let full = match self.head {
                Some((weight, factor)) => {
                    let p = upsample_params(&self.params, weight, factor);
                    let s = v.shape();
                    conv_transpose2d(v, &p, (s.h * factor, s.w * factor))?
                }
                None => v.clone(),
            };
            out.push((source.clone(), full));
        }
        self.tape = Some(tape);
        Ok(out)
    }

    /// Batch statistics seen by each BN site in the last forward pass.
    pub fn last_bn_moments(&self) -> Option<Vec<BnMoments>> {
        let tape = self.tape.as_ref()?;
        let mut out = Vec::new();
        for (i, op) in self.ops.iter().enumerate() {
            if let (Op::BatchNorm { state, src, .. }, Cache::Bn(c)) = (op, &tape.caches[i]) {
                let s = tape.values[*src].shape();
                out.push(BnMoments {
                    state: *state,
                    mean: c.batch_mean.clone(),
                    var: c.batch_var.clone(),
                    count: s.n * s.h * s.w,
                });
            }
        }
        Some(out)
    }

    /// Accumulates parameter gradients of `<output, grad_output>` from the
    /// last forward pass and returns the input gradient.
    pub fn backward(&mut self, grad_output: &Tensor) -> Result<Tensor> {
        let tape = self
            .tape
            .take()
            .ok_or_else(|| Error::config("backward called without a recorded forward pass"))?;
        if grad_output.shape() != tape.values[self.output].shape() {
            return Err(Error::dim(format!(
                "output gradient {} does not match output {}",
                grad_output.shape(),
                tape.values[self.output].shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.ops.len()];
        let mut g0 = grad_output.clone();
        g0.clear_grad();
        grads[self.output] = Some(g0);
        for i in (0..self.ops.len()).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.ops[i] {
                Op::Input => grads[i] = Some(g),
                Op::Conv {
                    src,
                    weight,
                    bias,
                    stride,
                    pad,
                } => {
                    let p = conv_params(&self.params, *weight, *bias, *stride, *pad);
                    let cg = conv2d_backward(&tape.values[*src], &p, &g)?;
                    add_grad(&mut self.params[*weight], cg.kernel.data());
                    if let (Some(b), Some(gb)) = (bias, cg.bias) {
                        add_grad(&mut self.params[*b], &gb);
                    }
                    accumulate(&mut grads[*src], cg.input)?;
                }
                Op::Upsample {
                    src,
                    weight,
                    factor,
                } => {
                    let p = upsample_params(&self.params, *weight, *factor);
                    let cg = conv_transpose2d_backward(&tape.values[*src], &p, &g)?;
                    add_grad(&mut self.params[*weight], cg.kernel.data());
                    accumulate(&mut grads[*src], cg.input)?;
                }
                Op::BatchNorm {
                    src,
                    gamma,
                    beta,
                    state,
                } => {
                    let Cache::Bn(cache) = &tape.caches[i] else {
                        unreachable!("batch norm node without cache")
                    };
                    let p = bn_params(&self.params, &self.bn[*state], *gamma, *beta, cache.mode);
                    let bg = batchnorm2d_backward(cache, &p, &g)?;
                    add_grad(&mut self.params[*gamma], &bg.gamma);
                    add_grad(&mut self.params[*beta], &bg.beta);
                    accumulate(&mut grads[*src], bg.input)?;
                }
                Op::Relu { src } => {
                    let gi = relu_backward(&tape.values[*src], &g)?;
                    accumulate(&mut grads[*src], gi)?;
                }
                Op::MaxPool { src, .. } => {
                    let Cache::Pool(argmax) = &tape.caches[i] else {
                        unreachable!("pool node without cache")
                    };
                    let gi = maxpool2d_backward(tape.values[*src].shape(), argmax, &g)?;
                    accumulate(&mut grads[*src], gi)?;
                }
                Op::Sum { srcs } => {
                    for &s in srcs {
                        accumulate(&mut grads[s], g.clone())?;
                    }
                }
            }
        }
        Ok(grads[0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(tape.values[0].shape())))
    }
}

fn conv_params(
    params: &[Param],
    weight: usize,
    bias: Option<usize>,
    stride: usize,
    pad: usize,
) -> ConvParams {
    let mut kernel = params[weight].value.clone();
    kernel.clear_grad();
    ConvParams::new(
        kernel,
        bias.map(|b| params[b].value.data().to_vec()),
        stride,
        pad,
    )
}

fn upsample_params(params: &[Param], weight: usize, factor: usize) -> ConvParams {
    let mut kernel = params[weight].value.clone();
    kernel.clear_grad();
    let c = kernel.shape().n;
    let k = kernel.shape().h;
    ConvParams::new(kernel, None, factor, (k - factor) / 2).with_groups(c)
}

fn bn_params(params: &[Param], st: &BnState, gamma: usize, beta: usize, mode: BnMode) -> BnParams {
    BnParams {
        gamma: params[gamma].value.data().to_vec(),
        beta: params[beta].value.data().to_vec(),
        running_mean: st.running_mean.clone(),
        running_var: st.running_var.clone(),
        epsilon: st.epsilon,
        momentum: st.momentum,
        mode,
    }
}

fn add_grad(p: &mut Param, g: &[f64]) {
    for (a, b) in p.value.grad_mut().iter_mut().zip(g) {
        *a += b;
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(t) => t.axpy(1.0, &g),
        None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

struct Builder {
    rng: ChaCha8Rng,
    params: Vec<Param>,
    ops: Vec<Op>,
}

impl Builder {
    fn param(&mut self, name: String, value: Tensor, group: ParamGroup) -> usize {
        let len = value.len();
        self.params.push(Param {
            name,
            value,
            velocity: vec![0.0; len],
            group,
        });
        self.params.len() - 1
    }

    fn gaussian(&mut self, shape: Shape, std: f64) -> Tensor {
        let normal = Normal::new(0.0, std).expect("positive standard deviation");
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_, _, _, _| normal.sample(rng))
    }

    fn op(&mut self, op: Op) -> usize {
        self.ops.push(op);
        self.ops.len() - 1
    }

    fn upsampler(
        &mut self,
        name: String,
        src: usize,
        classes: usize,
        factor: usize,
    ) -> Result<usize> {
        if factor < 2 {
            return Ok(src);
        }
        let value = bilinear_deconv_kernel(factor, classes)?.kernel;
        debug_assert_eq!(value.shape().h, bilinear_kernel_size(factor));
        let weight = self.param(name, value, ParamGroup::New);
        Ok(self.op(Op::Upsample {
            src,
            weight,
            factor,
        }))
    }
}

/// Standard deviation of new-layer Gaussian initialization (variance 1e-2).
pub const NEW_LAYER_STD: f64 = 0.1;

/// Builds a model from a validated spec. Backbone convs get He-scaled
/// Gaussians, context and score convs N(0, 1e-2), biases zero, upsamplers
/// bilinear, BN gamma 1 and beta 0. Deterministic in `seed`.
pub fn instantiate(spec: &NetworkSpec, seed: u64) -> Result<Model> {
    spec.validate()?;
    let mut b = Builder {
        rng: ChaCha8Rng::seed_from_u64(seed),
        params: Vec::new(),
        ops: vec![Op::Input],
    };
    let mut bn = Vec::new();
    let mut tied: HashMap<String, (usize, Option<usize>)> = HashMap::new();
    let mut layer_nodes = Vec::with_capacity(spec.layers.len());
    let mut prev = 0;
    for (i, l) in spec.layers.iter().enumerate() {
        let group = match l.role {
            Role::Context => ParamGroup::New,
            Role::Backbone | Role::Classifier => ParamGroup::Backbone,
        };
        let node = match l.kind {
            LayerKind::Conv | LayerKind::Score => {
                if l.kernel.0 != l.kernel.1 {
                    return Err(Error::config(format!(
                        "layer '{}': only square kernels are supported",
                        l.name
                    )));
                }
                let shape = Shape::new(l.out_channels, l.in_channels, l.kernel.0, l.kernel.1);
                let std = match group {
                    ParamGroup::Backbone => {
                        (2.0 / (l.kernel.0 * l.kernel.1 * l.in_channels) as f64).sqrt()
                    }
                    ParamGroup::New => NEW_LAYER_STD,
                };
                let has_bias = conv_has_bias(spec, i);
                let existing = l.tie_group.as_ref().and_then(|g| tied.get(g).copied());
                let (weight, bias) = match existing {
                    Some(ids) => ids,
                    None => {
                        let base = l.tie_group.clone().unwrap_or_else(|| l.name.clone());
                        let value = b.gaussian(shape, std);
                        let weight = b.param(format!("{base}/weight"), value, group);
                        let bias = has_bias.then(|| {
                            b.param(
                                format!("{base}/bias"),
                                Tensor::zeros(Shape::new(1, 1, 1, l.out_channels)),
                                group,
                            )
                        });
                        if let Some(g) = &l.tie_group {
                            tied.insert(g.clone(), (weight, bias));
                        }
                        (weight, bias)
                    }
                };
                b.op(Op::Conv {
                    src: prev,
                    weight,
                    bias,
                    stride: l.stride,
                    pad: l.pad,
                })
            }
            LayerKind::Bn => {
                let c = l.out_channels;
                let gamma = b.param(
                    format!("{}/gamma", l.name),
                    Tensor::filled(Shape::new(1, 1, 1, c), 1.0),
                    group,
                );
                let beta = b.param(
                    format!("{}/beta", l.name),
                    Tensor::zeros(Shape::new(1, 1, 1, c)),
                    group,
                );
                bn.push(BnState {
                    name: l.name.clone(),
                    running_mean: vec![0.0; c],
                    running_var: vec![1.0; c],
                    epsilon: BnParams::DEFAULT_EPSILON,
                    momentum: BnParams::DEFAULT_MOMENTUM,
                });
                b.op(Op::BatchNorm {
                    src: prev,
                    gamma,
                    beta,
                    state: bn.len() - 1,
                })
            }
            LayerKind::Relu => b.op(Op::Relu { src: prev }),
            LayerKind::Maxpool => {
                if l.kernel.0 != l.kernel.1 || l.pad != 0 {
                    return Err(Error::config(format!(
                        "layer '{}': pooling must be square and unpadded",
                        l.name
                    )));
                }
                b.op(Op::MaxPool {
                    src: prev,
                    kernel: l.kernel.0,
                    stride: l.stride,
                })
            }
            LayerKind::Deconv | LayerKind::SumJunction => {
                return Err(Error::config(format!(
                    "layer '{}' cannot appear in the trunk",
                    l.name
                )))
            }
        };
        layer_nodes.push(node);
        prev = node;
    }

    let mut taps = HashMap::new();
    for (i, l) in spec.layers.iter().enumerate() {
        if l.kind.is_feature_map() {
            let tap = spec.tap_index(&l.name).unwrap_or(i);
            taps.insert(l.name.clone(), layer_nodes[tap]);
        }
    }

    let mut branches = Vec::new();
    for edge in &spec.skip_edges {
        let tap = taps[&edge.source];
        let cin = spec.layers[spec.tap_index(&edge.source).unwrap_or(0)].out_channels;
        let classes = edge.branch.classes;
        let value = b.gaussian(Shape::new(classes, cin, 1, 1), NEW_LAYER_STD);
        let weight = b.param(
            format!("score/{}/weight", edge.source),
            value,
            ParamGroup::New,
        );
        let bias = b.param(
            format!("score/{}/bias", edge.source),
            Tensor::zeros(Shape::new(1, 1, 1, classes)),
            ParamGroup::New,
        );
        let score = b.op(Op::Conv {
            src: tap,
            weight,
            bias: Some(bias),
            stride: 1,
            pad: 0,
        });
        let up = b.upsampler(
            format!("up/{}/weight", edge.source),
            score,
            classes,
            edge.branch.upsample,
        )?;
        branches.push((edge.source.clone(), up));
    }

    let mut head = None;
    let output = if branches.is_empty() {
        prev
    } else {
        let fused = if branches.len() == 1 {
            branches[0].1
        } else {
            b.op(Op::Sum {
                srcs: branches.iter().map(|(_, n)| *n).collect(),
            })
        };
        let classes = spec.classes().unwrap_or(1);
        let factor = spec.head.as_ref().map_or(1, |h| h.upsample);
        let out = b.upsampler("head/weight".to_string(), fused, classes, factor)?;
        if factor >= 2 {
            head = Some((b.params.len() - 1, factor));
        }
        out
    };

    let coarsest_jump = analyze_geometry(spec)
        .entries
        .iter()
        .map(|(_, g)| g.jump)
        .max()
        .unwrap_or(1);
    Ok(Model {
        spec: spec.clone(),
        params: b.params,
        bn,
        mode: BnMode::Train,
        ops: b.ops,
        taps,
        branches,
        head,
        output,
        coarsest_jump,
        tape: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::assemble::{assemble, Variant};
    use crate::arch::count::{count_params, ParamConvention};
    use crate::arch::spec::{mini_backbone_spec, ContextNetConfig};

    fn tiny(variant: Variant) -> NetworkSpec {
        let backbone = mini_backbone_spec(&[4, 4, 6, 6], 4).unwrap();
        let ctx = variant
            .uses_context()
            .then(|| ContextNetConfig::new(3, 2, 6).hidden(6));
        assemble(variant, &backbone, ctx.as_ref(), 4, 3).unwrap()
    }

    #[test]
    fn output_shape_and_param_count() {
        let spec = tiny(Variant::Ifcn);
        let mut m = instantiate(&spec, 1).unwrap();
        let x = Tensor::filled(Shape::new(2, 3, 32, 32), 0.3);
        let y = m.forward(&x).unwrap();
        assert_eq!(y.shape(), Shape::new(2, 3, 32, 32));
        assert_eq!(
            m.num_scalars() as u64,
            count_params(&spec, ParamConvention::All)
        );
    }

    #[test]
    fn rejects_indivisible_inputs() {
        let mut m = instantiate(&tiny(Variant::Fcn), 1).unwrap();
        assert!(matches!(
            m.forward(&Tensor::zeros(Shape::new(1, 3, 20, 16))),
            Err(Error::Geometry(_))
        ));
        assert!(matches!(
            m.forward(&Tensor::zeros(Shape::new(1, 2, 16, 16))),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn groups_cover_all_params() {
        let m = instantiate(&tiny(Variant::IfcnA), 3).unwrap();
        assert!(m
            .params()
            .iter()
            .filter(|p| p.name.starts_with("ctx")
                || p.name.starts_with("score")
                || p.name.starts_with("up"))
            .all(|p| p.group == ParamGroup::New));
        assert!(m.param("conv1_1/weight").unwrap().group == ParamGroup::Backbone);
        assert!(m.param("head/weight").is_some());
    }

    #[test]
    fn backward_requires_forward() {
        let mut m = instantiate(&tiny(Variant::Fcn), 1).unwrap();
        assert!(m
            .backward(&Tensor::zeros(Shape::new(1, 3, 16, 16)))
            .is_err());
    }
}
