use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adversary::InputGradient;
use crate::error::{Error, Result};
use crate::layers::{
    backward_stack, forward_stack, infer_stack, serialize, AvgPool, Dense, KernelWeights, ORTHO_INIT_STD, Layer, LayerGrad,
    LayerTape, OrthoConv, PlainConv,
};
use crate::numerics::{Real, Tensor};
use crate::odeint::{node_backward, node_forward, solve, DynamicsField, NodeTape, SolverConfig, TimeMode};
use crate::rng::{stream, Purpose};

use super::loss::{argmax_rows, cross_entropy};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchKind {
    ResnetBaseline,
    VanillaOde,
    OrthoOde,
}

impl ArchKind {
    pub const ALL: [ArchKind; 3] = [ArchKind::ResnetBaseline, ArchKind::VanillaOde, ArchKind::OrthoOde];

    pub fn name(self) -> &'static str {
        match self {
            ArchKind::ResnetBaseline => "resnet_baseline",
            ArchKind::VanillaOde => "vanilla_ode",
            ArchKind::OrthoOde => "ortho_ode",
        }
    }

    pub fn is_node(self) -> bool {
        self != ArchKind::ResnetBaseline
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Groupsort,
}

impl Activation {
    fn layer<T: Real>(self) -> Layer<T> {
        match self {
            Activation::Relu => Layer::Relu,
            Activation::Groupsort => Layer::GroupSort,
        }
    }
}

/// Widths and depths of the classifier. Everything except the body is
/// shared by the three architectures.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSpec {
    /// Output channels of the plain convs in the stem.
    pub pre_channels: Vec<usize>,
    /// The first `pool_stages` stem convs are followed by 2× average pooling.
    pub pool_stages: usize,
    pub kernel: usize,
    /// Activation inside the body; groupsort for ortho_ode and relu
    /// otherwise when absent.
    pub activation: Option<Activation>,
    pub time_mode: TimeMode,
    pub residual_blocks: usize,
}

impl Default for ModelSpec {
    fn default() -> Self {
        Self {
            pre_channels: vec![16, 32],
            pool_stages: 2,
            kernel: 3,
            activation: None,
            time_mode: TimeMode::Autonomous,
            residual_blocks: 2,
        }
    }
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if self.pre_channels.is_empty() || self.pre_channels.contains(&0) {
            return bad("pre_channels must be a non-empty list of positive widths");
        }
        if self.pool_stages > self.pre_channels.len() {
            return bad("pool_stages cannot exceed the number of stem convs");
        }
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return bad("kernel size must be odd");
        }
        if self.residual_blocks == 0 {
            return bad("residual_blocks must be positive");
        }
        Ok(())
    }

    pub fn activation_for(&self, arch: ArchKind) -> Activation {
        self.activation.unwrap_or(match arch {
            ArchKind::OrthoOde => Activation::Groupsort,
            _ => Activation::Relu,
        })
    }

    /// Feature shape `(C, H, W)` entering the body.
    pub fn feature_dims(&self, (_, h, w): (usize, usize, usize)) -> Result<(usize, usize, usize)> {
        let (mut h, mut w) = (h, w);
        for _ in 0..self.pool_stages {
            for size in [h, w] {
                if size % 2 != 0 {
                    return Err(Error::IndivisibleShape { size, factor: 2 });
                }
            }
            h /= 2;
            w /= 2;
        }
        Ok((*self.pre_channels.last().unwrap(), h, w))
    }
}

#[derive(Clone, Debug)]
pub enum Body<T: Real> {
    Node { field: DynamicsField<T>, solver: SolverConfig },
    /// `z ← z + block(z)` for each block.
    Residual { blocks: Vec<Vec<Layer<T>>> },
}

/// `f_post ∘ body ∘ f_pre`.
#[derive(Clone, Debug)]
pub struct NodeModel<T: Real> {
    pub arch: ArchKind,
    pub spec: ModelSpec,
    pub input_dims: (usize, usize, usize),
    pub classes: usize,
    pub pre: Vec<Layer<T>>,
    pub body: Body<T>,
    pub post: Vec<Layer<T>>,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    arch: ArchKind,
    spec: ModelSpec,
    input_dims: (usize, usize, usize),
    classes: usize,
    solver: Option<SolverConfig>,
}

enum BodyTape<'a, T: Real> {
    Node(NodeTape<'a, T>),
    Residual(Vec<Vec<LayerTape<T>>>),
}

pub struct ModelTape<'a, T: Real> {
    pre: Vec<LayerTape<T>>,
    body: BodyTape<'a, T>,
    post: Vec<LayerTape<T>>,
}

impl<T: Real> ModelTape<'_, T> {
    /// Accepted solver steps, if the body is a NODE.
    pub fn solver_steps(&self) -> Option<usize> {
        match &self.body {
            BodyTape::Node(t) => Some(t.step_count()),
            BodyTape::Residual(_) => None,
        }
    }
}

pub struct ModelGrads<T> {
    pub grad_x: Tensor<T>,
    /// One entry per layer in [`NodeModel::layers`] order.
    pub layers: Vec<LayerGrad<T>>,
}

impl<T: Real> NodeModel<T> {
    /// Fresh model with seeded initialization. `solver` is ignored for the
    /// residual baseline.
    pub fn build(
        arch: ArchKind,
        spec: &ModelSpec,
        input_dims: (usize, usize, usize),
        classes: usize,
        solver: &SolverConfig,
        seed: u64,
    ) -> Result<Self> {
        spec.validate()?;
        if classes < 2 {
            return Err(Error::InvalidConfig(format!("need at least 2 classes, got {classes}")));
        }
        let mut index = 0u64;
        let mut rng = || {
            index += 1;
            stream(seed, Purpose::Init, index)
        };
        let k = spec.kernel;
        let (mut c, mut h, mut w) = input_dims;
        let mut pre = Vec::new();
        for (i, &out) in spec.pre_channels.iter().enumerate() {
            pre.push(Layer::PlainConv(PlainConv::init(out, c, k, (h, w), true, &mut rng())?));
            pre.push(Layer::Relu);
            if i < spec.pool_stages {
                let pool = AvgPool::new(2)?;
                (h, w) = pool.output_dims((h, w))?;
                pre.push(Layer::AvgPool(pool));
            }
            c = out;
        }
        let act = spec.activation_for(arch);
        let c_in = match spec.time_mode {
            TimeMode::Autonomous => c,
            TimeMode::TimeChannel => c + 1,
        };
        let body = match arch {
            ArchKind::OrthoOde => {
                solver.validate()?;
                let layers = vec![
                    Layer::OrthoConv(OrthoConv::init(c, c_in, k, (h, w), &mut rng())?),
                    act.layer(),
                    Layer::OrthoConv(OrthoConv::init(c, c, k, (h, w), &mut rng())?),
                ];
                Body::Node {
                    field: DynamicsField::new(layers, spec.time_mode),
                    solver: solver.clone(),
                }
            }
            ArchKind::VanillaOde => {
                solver.validate()?;
                // Same init as the orthogonal kernels; fan-in scaling diverges.
                let mut conv = |fan_in: usize| -> Result<Layer<T>> {
                    let weights = KernelWeights::gaussian(c, fan_in, k, ORTHO_INIT_STD, &mut rng());
                    Ok(Layer::PlainConv(PlainConv::new(weights, None, (h, w))?))
                };
                let layers = vec![conv(c_in)?, act.layer(), conv(c)?];
                Body::Node {
                    field: DynamicsField::new(layers, spec.time_mode),
                    solver: solver.clone(),
                }
            }
            ArchKind::ResnetBaseline => {
                let blocks = (0..spec.residual_blocks)
                    .map(|_| Ok(vec![act.layer(), Layer::PlainConv(PlainConv::init(c, c, k, (h, w), true, &mut rng())?)]))
                    .collect::<Result<_>>()?;
                Body::Residual { blocks }
            }
        };
        let post = vec![Layer::Dense(Dense::init(c * h * w, classes, &mut rng()))];
        Ok(Self {
            arch,
            spec: spec.clone(),
            input_dims,
            classes,
            pre,
            body,
            post,
        })
    }

    pub fn solver(&self) -> Option<&SolverConfig> {
        match &self.body {
            Body::Node { solver, .. } => Some(solver),
            Body::Residual { .. } => None,
        }
    }

    /// Replaces the solver used by the NODE body; no-op for the baseline.
    pub fn set_solver(&mut self, cfg: &SolverConfig) -> Result<()> {
        cfg.validate()?;
        if let Body::Node { solver, .. } = &mut self.body {
            *solver = cfg.clone();
        }
        Ok(())
    }

    pub fn dynamics(&self) -> Option<&DynamicsField<T>> {
        match &self.body {
            Body::Node { field, .. } => Some(field),
            Body::Residual { .. } => None,
        }
    }

    pub fn layers(&self) -> Vec<&Layer<T>> {
        let mut out: Vec<&Layer<T>> = self.pre.iter().collect();
        match &self.body {
            Body::Node { field, .. } => out.extend(field.layers.iter()),
            Body::Residual { blocks } => out.extend(blocks.iter().flatten()),
        }
        out.extend(self.post.iter());
        out
    }

    pub fn layers_mut(&mut self) -> Vec<&mut Layer<T>> {
        let mut out: Vec<&mut Layer<T>> = self.pre.iter_mut().collect();
        match &mut self.body {
            Body::Node { field, .. } => out.extend(field.layers.iter_mut()),
            Body::Residual { blocks } => out.extend(blocks.iter_mut().flatten()),
        }
        out.extend(self.post.iter_mut());
        out
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.param_count()).sum()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let (c, h, w) = self.input_dims;
        x.ensure_shape(&[x.batch(), c, h, w])
    }

    /// Body input for a batch of images.
    pub fn features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        infer_stack(&self.pre, x)
    }

    /// Applies the NODE flow or the residual blocks to features.
    pub fn body_map(&self, z: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.body {
            Body::Node { field, solver } => solve(field, z, solver),
            Body::Residual { blocks } => {
                let mut z = z.clone();
                for block in blocks {
                    z = z.add(&infer_stack(block, &z)?)?;
                }
                Ok(z)
            }
        }
    }

    pub fn logits(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let z = self.body_map(&self.features(x)?)?;
        infer_stack(&self.post, &z)
    }

    pub fn predict(&self, x: &Tensor<T>) -> Result<Vec<usize>> {
        Ok(argmax_rows(&self.logits(x)?))
    }

    pub fn forward_taped(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ModelTape<'_, T>)> {
        self.check_input(x)?;
        let (z, pre) = forward_stack(&self.pre, x)?;
        let (z, body) = match &self.body {
            Body::Node { field, solver } => {
                let (z, tape) = node_forward(field, &z, solver)?;
                (z, BodyTape::Node(tape))
            }
            Body::Residual { blocks } => {
                let mut z = z;
                let mut tapes = Vec::with_capacity(blocks.len());
                for block in blocks {
                    let (dz, t) = forward_stack(block, &z)?;
                    z = z.add(&dz)?;
                    tapes.push(t);
                }
                (z, BodyTape::Residual(tapes))
            }
        };
        let (logits, post) = forward_stack(&self.post, &z)?;
        Ok((logits, ModelTape { pre, body, post }))
    }

    pub fn backward(&self, tape: ModelTape<'_, T>, grad_logits: &Tensor<T>) -> Result<ModelGrads<T>> {
        let mut post_grads = vec![LayerGrad::None; self.post.len()];
        let g = backward_stack(&self.post, tape.post, grad_logits, &mut post_grads)?;
        let (g, body_grads) = match (&self.body, tape.body) {
            (Body::Node { .. }, BodyTape::Node(t)) => {
                let ng = node_backward(t, &g)?;
                (ng.grad_z, ng.layers)
            }
            (Body::Residual { blocks }, BodyTape::Residual(tapes)) => {
                let mut g = g;
                let mut grads: Vec<Vec<LayerGrad<T>>> = blocks.iter().map(|b| vec![LayerGrad::None; b.len()]).collect();
                for ((block, t), acc) in blocks.iter().zip(tapes).zip(grads.iter_mut()).rev() {
                    let gb = backward_stack(block, t, &g, acc)?;
                    g.add_assign(&gb)?;
                }
                (g, grads.into_iter().flatten().collect())
            }
            _ => return Err(Error::InvalidConfig("tape does not belong to this model".into())),
        };
        let mut pre_grads = vec![LayerGrad::None; self.pre.len()];
        let grad_x = backward_stack(&self.pre, tape.pre, &g, &mut pre_grads)?;
        let mut layers = pre_grads;
        layers.extend(body_grads);
        layers.extend(post_grads);
        Ok(ModelGrads { grad_x, layers })
    }

    /// Mean loss, correct count and all gradients for one batch.
    pub fn loss_and_grads(&self, x: &Tensor<T>, labels: &[usize], grad_scale: T) -> Result<(T, usize, ModelGrads<T>)> {
        let (logits, tape) = self.forward_taped(x)?;
        let (loss, g) = cross_entropy(&logits, labels)?;
        let correct = argmax_rows(&logits).iter().zip(labels).filter(|(p, y)| p == y).count();
        let grads = self.backward(tape, &g.scale(grad_scale))?;
        Ok((loss, correct, grads))
    }

    pub fn cast<U: Real>(&self) -> Result<NodeModel<U>> {
        let stack = |ls: &[Layer<T>]| ls.iter().map(Layer::cast).collect::<Result<Vec<_>>>();
        Ok(NodeModel {
            arch: self.arch,
            spec: self.spec.clone(),
            input_dims: self.input_dims,
            classes: self.classes,
            pre: stack(&self.pre)?,
            body: match &self.body {
                Body::Node { field, solver } => Body::Node {
                    field: field.cast()?,
                    solver: solver.clone(),
                },
                Body::Residual { blocks } => Body::Residual {
                    blocks: blocks.iter().map(|b| stack(b)).collect::<Result<_>>()?,
                },
            },
            post: stack(&self.post)?,
        })
    }

    fn meta(&self) -> Result<serde_json::Value> {
        Ok(serde_json::to_value(CheckpointMeta {
            arch: self.arch,
            spec: self.spec.clone(),
            input_dims: self.input_dims,
            classes: self.classes,
            solver: self.solver().cloned(),
        })?)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut sections: Vec<(String, &[Layer<T>])> = vec![("pre".into(), &self.pre)];
        match &self.body {
            Body::Node { field, .. } => sections.push(("dynamics".into(), &field.layers)),
            Body::Residual { blocks } => {
                for (i, b) in blocks.iter().enumerate() {
                    sections.push((format!("block{i}"), b));
                }
            }
        }
        sections.push(("post".into(), &self.post));
        let named: Vec<(&str, &[Layer<T>])> = sections.iter().map(|(n, l)| (n.as_str(), *l)).collect();
        serialize::encode(&named, self.meta()?)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (sections, header) = serialize::decode::<T>(bytes)?;
        let meta: CheckpointMeta = serde_json::from_value(header.meta)
            .map_err(|e| Error::Checkpoint(format!("model metadata: {e}")))?;
        let mut sections = sections.into_iter();
        let mut next = |name: &str| -> Result<Vec<Layer<T>>> {
            match sections.next() {
                Some((n, layers)) if n == name => Ok(layers),
                other => Err(Error::Checkpoint(format!(
                    "expected section {name}, found {:?}",
                    other.map(|(n, _)| n)
                ))),
            }
        };
        let pre = next("pre")?;
        let body = if meta.arch.is_node() {
            let solver = meta
                .solver
                .clone()
                .ok_or_else(|| Error::Checkpoint("NODE checkpoint without solver settings".into()))?;
            Body::Node {
                field: DynamicsField::new(next("dynamics")?, meta.spec.time_mode),
                solver,
            }
        } else {
            let blocks = (0..meta.spec.residual_blocks)
                .map(|i| next(&format!("block{i}")))
                .collect::<Result<_>>()?;
            Body::Residual { blocks }
        };
        let post = next("post")?;
        let model = Self {
            arch: meta.arch,
            spec: meta.spec,
            input_dims: meta.input_dims,
            classes: meta.classes,
            pre,
            body,
            post,
        };
        let (c, h, w) = model.input_dims;
        let probe = model.logits(&Tensor::zeros(&[1, c, h, w]))?;
        probe
            .ensure_shape(&[1, model.classes])
            .map_err(|e| Error::Checkpoint(format!("layers do not compose: {e}")))?;
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

impl<T: Real> InputGradient<T> for NodeModel<T> {
    fn loss_and_input_grad(&self, x: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
        let (loss, _, grads) = self.loss_and_grads(x, labels, T::one())?;
        Ok((loss, grads.grad_x))
    }
}

/// Largest pairwise relative difference in parameter count across the
/// three architectures.
pub fn parameter_spread(spec: &ModelSpec, input_dims: (usize, usize, usize), classes: usize) -> Result<f64> {
    let counts = ArchKind::ALL
        .iter()
        .map(|&a| Ok(NodeModel::<f32>::build(a, spec, input_dims, classes, &SolverConfig::default(), 0)?.param_count()))
        .collect::<Result<Vec<_>>>()?;
    let max = *counts.iter().max().unwrap() as f64;
    let min = *counts.iter().min().unwrap() as f64;
    Ok((max - min) / max)
}
