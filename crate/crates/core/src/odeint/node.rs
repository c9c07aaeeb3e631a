use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{backward_stack, forward_stack, infer_stack, Layer, LayerGrad, LayerTape};
use crate::numerics::{Real, Tensor};

use super::{drive, u_checked, SolverConfig, StageEval, VectorField};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeMode {
    #[default]
    Autonomous,
    /// A constant plane holding `t` is appended to the input channels.
    TimeChannel,
}

/// Layer stack defining `f(z, t)`. Output shape must equal input shape.
#[derive(Clone, Debug)]
pub struct DynamicsField<T: Real> {
    pub layers: Vec<Layer<T>>,
    pub time_mode: TimeMode,
}

fn append_time_plane<T: Real>(z: &Tensor<T>, t: T) -> Result<Tensor<T>> {
    let &[b, c, h, w] = z.shape() else {
        return Err(Error::InvalidShape(format!(
            "time channel needs [B, C, H, W] states, got {:?}",
            z.shape()
        )));
    };
    let plane = h * w;
    let mut data = Vec::with_capacity(b * (c + 1) * plane);
    for s in 0..b {
        data.extend_from_slice(z.sample(s));
        data.extend(std::iter::repeat(t).take(plane));
    }
    Tensor::new(vec![b, c + 1, h, w], data)
}

fn drop_time_plane<T: Real>(g: &Tensor<T>) -> Result<Tensor<T>> {
    let (b, c1, h, w) = (g.shape()[0], g.shape()[1], g.shape()[2], g.shape()[3]);
    let keep = (c1 - 1) * h * w;
    let mut data = Vec::with_capacity(b * keep);
    for s in 0..b {
        data.extend_from_slice(&g.sample(s)[..keep]);
    }
    Tensor::new(vec![b, c1 - 1, h, w], data)
}

impl<T: Real> DynamicsField<T> {
    pub fn new(layers: Vec<Layer<T>>, time_mode: TimeMode) -> Self {
        Self { layers, time_mode }
    }

    fn input(&self, t: T, z: &Tensor<T>) -> Result<Tensor<T>> {
        match self.time_mode {
            TimeMode::Autonomous => Ok(z.clone()),
            TimeMode::TimeChannel => append_time_plane(z, t),
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Layer::param_count).sum()
    }

    pub fn empty_grads(&self) -> Vec<LayerGrad<T>> {
        vec![LayerGrad::None; self.layers.len()]
    }

    /// Vector-Jacobian product of one recorded evaluation.
    fn vjp(&self, tapes: Vec<LayerTape<T>>, grad: &Tensor<T>, grads: &mut [LayerGrad<T>]) -> Result<Tensor<T>> {
        let g = backward_stack(&self.layers, tapes, grad, grads)?;
        match self.time_mode {
            TimeMode::Autonomous => Ok(g),
            TimeMode::TimeChannel => drop_time_plane(&g),
        }
    }

    pub fn cast<U: Real>(&self) -> Result<DynamicsField<U>> {
        Ok(DynamicsField {
            layers: self.layers.iter().map(Layer::cast).collect::<Result<_>>()?,
            time_mode: self.time_mode,
        })
    }
}

impl<T: Real> VectorField<T> for DynamicsField<T> {
    fn eval(&self, t: T, z: &Tensor<T>) -> Result<Tensor<T>> {
        u_checked(infer_stack(&self.layers, &self.input(t, z)?)?, z)
    }
}

struct Taped<'a, T: Real>(&'a DynamicsField<T>);

impl<T: Real> StageEval<T> for Taped<'_, T> {
    type Tape = Vec<LayerTape<T>>;

    fn stage(&self, t: T, u: &Tensor<T>) -> Result<(Tensor<T>, Self::Tape)> {
        let (k, tapes) = forward_stack(&self.0.layers, &self.0.input(t, u)?)?;
        Ok((u_checked(k, u)?, tapes))
    }
}

struct StepRecord<T> {
    h: T,
    stages: Vec<Vec<LayerTape<T>>>,
}

/// Everything [`node_backward`] needs. Borrows the field so its weights
/// cannot change while the tape is alive; consumed by the backward pass.
pub struct NodeTape<'a, T: Real> {
    field: &'a DynamicsField<T>,
    cfg: SolverConfig,
    steps: Vec<StepRecord<T>>,
    input_shape: Vec<usize>,
}

impl<T: Real> NodeTape<'_, T> {
    pub fn step_count(&self) -> usize {
        self.steps.len()
    }

    pub fn step_sizes(&self) -> Vec<T> {
        self.steps.iter().map(|s| s.h).collect()
    }
}

pub struct NodeGrads<T> {
    pub grad_z: Tensor<T>,
    /// One accumulated gradient per dynamics layer.
    pub layers: Vec<LayerGrad<T>>,
}

pub fn node_forward<'a, T: Real>(
    field: &'a DynamicsField<T>,
    z_in: &Tensor<T>,
    cfg: &SolverConfig,
) -> Result<(Tensor<T>, NodeTape<'a, T>)> {
    let mut steps = Vec::new();
    let z_out = drive(&Taped(field), z_in, cfg, |acc| {
        steps.push(StepRecord {
            h: acc.h,
            stages: acc.stages,
        });
        Ok(())
    })?;
    Ok((
        z_out,
        NodeTape {
            field,
            cfg: cfg.clone(),
            steps,
            input_shape: z_in.shape().to_vec(),
        },
    ))
}

/// Reverse-mode pass through the recorded solver steps. For adaptive
/// solves the accepted step sizes are treated as constants.
pub fn node_backward<T: Real>(tape: NodeTape<'_, T>, grad_out: &Tensor<T>) -> Result<NodeGrads<T>> {
    grad_out.ensure_shape(&tape.input_shape)?;
    let field = tape.field;
    let tab = tape.cfg.method.tableau();
    let mut grads = field.empty_grads();
    let mut zbar = grad_out.clone();
    for step in tape.steps.into_iter().rev() {
        let h = step.h;
        let s = step.stages.len();
        let mut kbar: Vec<Option<Tensor<T>>> = (0..s)
            .map(|i| (tab.b[i] != 0.0).then(|| zbar.scale(h * T::lit(tab.b[i]))))
            .collect();
        let mut z_in = zbar;
        for (i, tapes) in step.stages.into_iter().enumerate().rev() {
            let Some(kb) = kbar[i].take() else { continue };
            let ubar = field.vjp(tapes, &kb, &mut grads)?;
            z_in.add_assign(&ubar)?;
            for (j, &aij) in tab.a[i].iter().enumerate() {
                if aij == 0.0 {
                    continue;
                }
                let w = h * T::lit(aij);
                match &mut kbar[j] {
                    Some(acc) => acc.axpy(w, &ubar)?,
                    slot @ None => *slot = Some(ubar.scale(w)),
                }
            }
        }
        zbar = z_in;
    }
    Ok(NodeGrads { grad_z: zbar, layers: grads })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{KernelWeights, OrthoConv, PlainConv};
    use crate::odeint::Method;
    use crate::reference;
    use crate::rng::{stream, Purpose};
    use rand::Rng as _;

    fn scalar_field(c: f64) -> DynamicsField<f64> {
        let w = KernelWeights::new(Tensor::new(vec![1, 1, 1, 1], vec![c]).unwrap()).unwrap();
        DynamicsField::new(vec![Layer::PlainConv(PlainConv::new(w, None, (1, 1)).unwrap())], TimeMode::Autonomous)
    }

    fn ortho_field(seed: u64, time_mode: TimeMode) -> DynamicsField<f64> {
        let mut rng = stream(seed, Purpose::Test, 0);
        let extra = usize::from(time_mode == TimeMode::TimeChannel);
        let mut w1 = KernelWeights::<f64>::gaussian(2, 2 + extra, 3, 0.4, &mut rng);
        w1.values = w1.values.map(|v| v + 0.05);
        let w2 = KernelWeights::<f64>::gaussian(2, 2, 3, 0.4, &mut rng);
        DynamicsField::new(
            vec![
                Layer::OrthoConv(OrthoConv::new(w1, (4, 4)).unwrap()),
                Layer::GroupSort,
                Layer::OrthoConv(OrthoConv::new(w2, (4, 4)).unwrap()),
            ],
            time_mode,
        )
    }

    #[test]
    fn zero_dynamics_pass_input_through() {
        let field = scalar_field(0.0);
        let z = Tensor::from_fn(&[3, 1, 1, 1], |i| i as f64 - 1.0);
        let (out, tape) = node_forward(&field, &z, &SolverConfig::default()).unwrap();
        assert_eq!(out, z);
        let g = node_backward(tape, &Tensor::zeros(z.shape())).unwrap();
        assert_eq!(g.grad_z.max_abs(), 0.0);
    }

    #[test]
    fn linear_sensitivity_matches_exponential() {
        let c = -0.7;
        let field = scalar_field(c);
        let z = Tensor::new(vec![1, 1, 1, 1], vec![2.0]).unwrap();
        let (_, tape) = node_forward(&field, &z, &SolverConfig::fixed(Method::Rk4, 20)).unwrap();
        let g = node_backward(tape, &Tensor::full(&[1, 1, 1, 1], 1.0)).unwrap();
        assert!((g.grad_z.data()[0] - f64::exp(c)).abs() < 1e-5);
    }

    #[test]
    fn single_euler_step_is_a_residual_block() {
        let field = ortho_field(3, TimeMode::Autonomous);
        let mut rng = stream(4, Purpose::Test, 0);
        let z = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let r = Tensor::from_fn(&[1, 2, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let (_, tape) = node_forward(&field, &z, &SolverConfig::fixed(Method::Euler, 1).with_span(0.0, 0.3)).unwrap();
        let g = node_backward(tape, &r).unwrap();
        let (_, tapes) = forward_stack(&field.layers, &z).unwrap();
        let mut scratch = field.empty_grads();
        let jt = backward_stack(&field.layers, tapes, &r, &mut scratch).unwrap();
        let expected = r.add(&jt.scale(0.3)).unwrap();
        assert!(g.grad_z.sub(&expected).unwrap().max_abs() < 1e-14);
    }

    fn fd_check(method: Method, time_mode: TimeMode) {
        let field = ortho_field(7, time_mode);
        let cfg = match method {
            Method::Dopri5 => SolverConfig::adaptive(1e-3, 1e-5),
            m => SolverConfig::fixed(m, 3),
        };
        let mut rng = stream(8, Purpose::Test, 0);
        let z = Tensor::from_fn(&[2, 2, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let r = Tensor::from_fn(&[2, 2, 4, 4], |_| rng.gen_range(-1.0..1.0));
        let (_, tape) = node_forward(&field, &z, &cfg).unwrap();
        let frozen = tape.step_sizes();
        let g = node_backward(tape, &r).unwrap();

        // Replays the forward with the step sequence frozen.
        let replay = |f: &DynamicsField<f64>, z: &Tensor<f64>| -> f64 {
            match method {
                Method::Dopri5 => {
                    let mut cur = z.clone();
                    let mut t = 0.0;
                    for &h in &frozen {
                        let att = super::super::rk_step(&Taped(f), &super::super::DOPRI5, t, h, &cur, None, None).unwrap();
                        cur = att.z_new;
                        t += h;
                    }
                    cur.dot(&r).unwrap()
                }
                _ => node_forward(f, z, &cfg).unwrap().0.dot(&r).unwrap(),
            }
        };

        let fd_z = reference::central_difference(
            &mut |v| replay(&field, &Tensor::new(z.shape().to_vec(), v.to_vec()).unwrap()),
            z.data(),
            1e-5,
        );
        assert!(reference::relative_error(g.grad_z.data(), &fd_z, 1e-12) < 1e-4);

        for (li, lg) in g.layers.into_iter().enumerate() {
            let grads = field.layers[li].param_gradients(lg).unwrap();
            for (pi, pg) in grads.iter().enumerate() {
                let base = field.layers[li].params()[pi].clone();
                let fd = reference::central_difference(
                    &mut |v| {
                        let mut probe = field.clone();
                        *probe.layers[li].params_mut()[pi] = Tensor::new(base.shape().to_vec(), v.to_vec()).unwrap();
                        probe.layers[li].refresh().unwrap();
                        replay(&probe, &z)
                    },
                    base.data(),
                    1e-5,
                );
                let rel = reference::relative_error(pg.data(), &fd, 1e-12);
                assert!(rel < 1e-4, "layer {li} param {pi}: {rel}");
            }
        }
    }

    #[test]
    fn rk4_gradients_match_central_differences() {
        fd_check(Method::Rk4, TimeMode::Autonomous);
    }

    #[test]
    fn euler_time_channel_gradients_match_central_differences() {
        fd_check(Method::Euler, TimeMode::TimeChannel);
    }

    #[test]
    fn dopri5_gradients_with_frozen_steps() {
        fd_check(Method::Dopri5, TimeMode::Autonomous);
    }

    #[test]
    fn dynamics_must_preserve_shape() {
        let mut rng = stream(1, Purpose::Test, 0);
        let field = DynamicsField::new(
            vec![Layer::PlainConv(PlainConv::<f64>::init(3, 2, 3, (4, 4), false, &mut rng).unwrap())],
            TimeMode::Autonomous,
        );
        let z = Tensor::zeros(&[1, 2, 4, 4]);
        assert!(matches!(node_forward(&field, &z, &SolverConfig::default()), Err(Error::ShapeMismatch { .. })));
    }
}
