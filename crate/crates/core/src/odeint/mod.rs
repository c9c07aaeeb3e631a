//! Explicit ODE integrators and the NODE block.
//!
//! [`integrate`] solves `dz/dt = f(z, t)` with Euler, classic RK4 or adaptive
//! Dormand–Prince. [`node_forward`] runs the same schemes while recording
//! every stage evaluation, and [`node_backward`] differentiates the discrete
//! solver exactly by walking those stages in reverse.

mod node;
mod tableau;
mod trajectory;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

pub use node::{node_backward, node_forward, DynamicsField, NodeGrads, NodeTape, TimeMode};
pub use trajectory::{non_intersection_check, IntersectionReport, Trajectory, MERGE_THRESHOLD};

use tableau::{Tableau, DOPRI5, EULER, RK4};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Euler,
    Rk4,
    Dopri5,
}

impl Method {
    fn tableau(self) -> &'static Tableau {
        match self {
            Method::Euler => &EULER,
            Method::Rk4 => &RK4,
            Method::Dopri5 => &DOPRI5,
        }
    }

    pub fn is_adaptive(self) -> bool {
        self == Method::Dopri5
    }

    pub fn order(self) -> u32 {
        self.tableau().order
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverConfig {
    pub method: Method,
    pub t0: f64,
    pub t1: f64,
    pub fixed_steps: usize,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            method: Method::Rk4,
            t0: 0.0,
            t1: 1.0,
            fixed_steps: 10,
            rtol: 1e-4,
            atol: 1e-6,
            max_steps: 10_000,
        }
    }
}

impl SolverConfig {
    pub fn fixed(method: Method, steps: usize) -> Self {
        Self {
            method,
            fixed_steps: steps,
            ..Self::default()
        }
    }

    pub fn adaptive(rtol: f64, atol: f64) -> Self {
        Self {
            method: Method::Dopri5,
            rtol,
            atol,
            ..Self::default()
        }
    }

    pub fn with_span(mut self, t0: f64, t1: f64) -> Self {
        self.t0 = t0;
        self.t1 = t1;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.into()));
        if !(self.t0.is_finite() && self.t1.is_finite() && self.t1 > self.t0) {
            return bad("solver requires finite t1 > t0");
        }
        if self.fixed_steps == 0 {
            return bad("fixed_steps must be at least 1");
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return bad("rtol and atol must be positive");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        Ok(())
    }
}

/// Right-hand side `f(z, t)`.
pub trait VectorField<T: Real> {
    fn eval(&self, t: T, z: &Tensor<T>) -> Result<Tensor<T>>;
}

/// Adapts a closure to [`VectorField`].
pub struct FnField<F>(pub F);

impl<T: Real, F: Fn(T, &Tensor<T>) -> Result<Tensor<T>>> VectorField<T> for FnField<F> {
    fn eval(&self, t: T, z: &Tensor<T>) -> Result<Tensor<T>> {
        (self.0)(t, z)
    }
}

/// Stage evaluation, optionally recording a tape.
pub(crate) trait StageEval<T: Real> {
    type Tape;
    fn stage(&self, t: T, u: &Tensor<T>) -> Result<(Tensor<T>, Self::Tape)>;
}

struct Untaped<'a, F: ?Sized>(&'a F);

impl<T: Real, F: VectorField<T> + ?Sized> StageEval<T> for Untaped<'_, F> {
    type Tape = ();
    fn stage(&self, t: T, u: &Tensor<T>) -> Result<(Tensor<T>, ())> {
        Ok((u_checked(self.0.eval(t, u)?, u)?, ()))
    }
}

pub(crate) fn u_checked<T: Real>(k: Tensor<T>, u: &Tensor<T>) -> Result<Tensor<T>> {
    if k.shape() != u.shape() {
        return Err(Error::ShapeMismatch {
            expected: u.shape().to_vec(),
            found: k.shape().to_vec(),
        });
    }
    Ok(k)
}

struct Attempt<T, P> {
    z_new: Tensor<T>,
    stages: Vec<(Tensor<T>, P)>,
    err: Option<f64>,
}

/// One explicit RK step from `(t, z)` with step `h`. `first` is a
/// precomputed first stage (FSAL reuse).
fn rk_step<T: Real, E: StageEval<T>>(
    eval: &E,
    tab: &Tableau,
    t: T,
    h: T,
    z: &Tensor<T>,
    first: Option<(Tensor<T>, E::Tape)>,
    tol: Option<(f64, f64)>,
) -> Result<Attempt<T, E::Tape>> {
    let s = tab.stages();
    let mut first = first;
    let mut stages: Vec<(Tensor<T>, E::Tape)> = Vec::with_capacity(s);
    for i in 0..s {
        if i == 0 {
            if let Some(f) = first.take() {
                stages.push(f);
                continue;
            }
        }
        let mut u = z.clone();
        for (j, &aij) in tab.a[i].iter().enumerate() {
            if aij != 0.0 {
                u.axpy(h * T::lit(aij), &stages[j].0)?;
            }
        }
        if tab.fsal && i == s - 1 {
            // Last stage sits at the new state, which the b row defines.
            let mut z_new = z.clone();
            for (j, &bj) in tab.b.iter().enumerate().take(s - 1) {
                if bj != 0.0 {
                    z_new.axpy(h * T::lit(bj), &stages[j].0)?;
                }
            }
            u = z_new;
        }
        stages.push(eval.stage(t + h * T::lit(tab.c[i]), &u)?);
    }
    let mut z_new = z.clone();
    for (j, &bj) in tab.b.iter().enumerate() {
        if bj != 0.0 {
            z_new.axpy(h * T::lit(bj), &stages[j].0)?;
        }
    }
    let err = match (tab.e, tol) {
        (Some(e), Some((rtol, atol))) => {
            let mut est = Tensor::zeros(z.shape());
            for (j, &ej) in e.iter().enumerate() {
                if ej != 0.0 {
                    est.axpy(h * T::lit(ej), &stages[j].0)?;
                }
            }
            Some(error_norm(&est, z, &z_new, rtol, atol))
        }
        _ => None,
    };
    Ok(Attempt { z_new, stages, err })
}

/// Scaled RMS norm used by the step controller.
fn error_norm<T: Real>(est: &Tensor<T>, z: &Tensor<T>, z_new: &Tensor<T>, rtol: f64, atol: f64) -> f64 {
    let n = est.len().max(1) as f64;
    let sum: f64 = est
        .data()
        .iter()
        .zip(z.data())
        .zip(z_new.data())
        .map(|((&e, &a), &b)| {
            let sc = atol + rtol * a.to_f64().abs().max(b.to_f64().abs());
            (e.to_f64() / sc).powi(2)
        })
        .sum();
    (sum / n).sqrt()
}

const SAFETY: f64 = 0.9;
const FACTOR_MIN: f64 = 0.2;
const FACTOR_MAX: f64 = 5.0;
const PI_ALPHA: f64 = 0.17;
const PI_BETA: f64 = 0.04;

/// Accepted step as reported to the driver's callback.
pub(crate) struct Accepted<T, P> {
    pub t: T,
    pub h: T,
    pub z_new: Tensor<T>,
    pub stages: Vec<P>,
}

fn initial_step<T: Real, E: StageEval<T>>(eval: &E, t0: T, z0: &Tensor<T>, f0: &Tensor<T>, cfg: &SolverConfig, span: f64) -> Result<f64> {
    let scale = |v: &Tensor<T>| -> f64 {
        let n = v.len().max(1) as f64;
        let s: f64 = v
            .data()
            .iter()
            .zip(z0.data())
            .map(|(&x, &z)| (x.to_f64() / (cfg.atol + cfg.rtol * z.to_f64().abs())).powi(2))
            .sum();
        (s / n).sqrt()
    };
    let (d0, d1) = (scale(z0), scale(f0));
    let h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 }.min(span);
    let mut z1 = z0.clone();
    z1.axpy(T::lit(h0), f0)?;
    let (f1, _) = eval.stage(t0 + T::lit(h0), &z1)?;
    let d2 = scale(&f1.sub(f0)?) / h0;
    let h1 = if d1.max(d2) <= 1e-15 {
        (h0 * 1e-3).max(1e-6)
    } else {
        (0.01 / d1.max(d2)).powf(1.0 / 5.0)
    };
    Ok((100.0 * h0).min(h1).min(span))
}

/// Drives a full solve, calling `on_accept` after each accepted step.
pub(crate) fn drive<T: Real, E: StageEval<T>>(
    eval: &E,
    z0: &Tensor<T>,
    cfg: &SolverConfig,
    mut on_accept: impl FnMut(Accepted<T, E::Tape>) -> Result<()>,
) -> Result<Tensor<T>> {
    cfg.validate()?;
    if !z0.is_finite() {
        return Err(Error::NonFiniteState { t: cfg.t0 });
    }
    let tab = cfg.method.tableau();
    let span = cfg.t1 - cfg.t0;
    let mut z = z0.clone();
    if !cfg.method.is_adaptive() {
        let h = span / cfg.fixed_steps as f64;
        for n in 0..cfg.fixed_steps {
            let t = cfg.t0 + h * n as f64;
            let att = rk_step(eval, tab, T::lit(t), T::lit(h), &z, None, None)?;
            if !att.z_new.is_finite() {
                return Err(Error::NonFiniteState { t: t + h });
            }
            z = att.z_new.clone();
            on_accept(Accepted {
                t: T::lit(t),
                h: T::lit(h),
                z_new: att.z_new,
                stages: att.stages.into_iter().map(|(_, p)| p).collect(),
            })?;
        }
        return Ok(z);
    }

    let tol = Some((cfg.rtol, cfg.atol));
    let mut t = cfg.t0;
    let mut first = Some(eval.stage(T::lit(t), &z)?);
    let mut h = initial_step(eval, T::lit(t), &z, &first.as_ref().unwrap().0, cfg, span)?;
    let mut err_prev: f64 = 1e-4;
    let mut attempts = 0usize;
    let end_slack = 1e-12 * span.max(1.0);
    while t < cfg.t1 - end_slack {
        attempts += 1;
        if attempts > cfg.max_steps {
            return Err(Error::MaxStepsExceeded {
                max_steps: cfg.max_steps,
                t,
            });
        }
        let last = t + h >= cfg.t1 - end_slack;
        if last {
            h = cfg.t1 - t;
        }
        // The first stage is reused on rejection, so only a stage clone is needed.
        let f = first.take().expect("first stage present");
        let att = rk_step(eval, tab, T::lit(t), T::lit(h), &z, Some(f), tol)?;
        let err = att.err.unwrap_or(0.0);
        if !err.is_finite() || !att.z_new.is_finite() {
            // Treat a blow-up as a rejection and shrink hard.
            let mut stages = att.stages;
            first = Some(stages.swap_remove(0));
            h *= FACTOR_MIN;
            if h < 1e-14 * span {
                return Err(Error::NonFiniteState { t });
            }
            continue;
        }
        if err <= 1.0 {
            let factor = (SAFETY * err.max(1e-10).powf(-PI_ALPHA) * err_prev.powf(PI_BETA)).clamp(FACTOR_MIN, FACTOR_MAX);
            err_prev = err.max(1e-4);
            let mut stages = att.stages;
            let fsal = stages.pop().expect("fsal stage");
            let step_t = t;
            t = if last { cfg.t1 } else { t + h };
            z = att.z_new.clone();
            on_accept(Accepted {
                t: T::lit(step_t),
                h: T::lit(h),
                z_new: att.z_new,
                stages: stages.into_iter().map(|(_, p)| p).collect(),
            })?;
            first = Some(fsal);
            h *= factor;
        } else {
            let factor = (SAFETY * err.powf(-0.2)).clamp(FACTOR_MIN, 1.0);
            let mut stages = att.stages;
            first = Some(stages.swap_remove(0));
            h *= factor;
        }
    }
    Ok(z)
}

/// Final state only.
pub fn solve<T: Real, F: VectorField<T> + ?Sized>(f: &F, z0: &Tensor<T>, cfg: &SolverConfig) -> Result<Tensor<T>> {
    drive(&Untaped(f), z0, cfg, |_| Ok(()))
}

/// Integrates `f` from `cfg.t0` to `cfg.t1`, recording every accepted step.
pub fn integrate<T: Real, F: VectorField<T> + ?Sized>(f: &F, z0: &Tensor<T>, cfg: &SolverConfig) -> Result<Trajectory<T>> {
    let mut traj = Trajectory {
        times: vec![T::lit(cfg.t0)],
        states: vec![z0.clone()],
    };
    drive(&Untaped(f), z0, cfg, |acc| {
        traj.times.push(acc.t + acc.h);
        traj.states.push(acc.z_new);
        Ok(())
    })?;
    if let Some(last) = traj.times.last_mut() {
        *last = T::lit(cfg.t1);
    }
    Ok(traj)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear(c: f64) -> FnField<impl Fn(f64, &Tensor<f64>) -> Result<Tensor<f64>>> {
        FnField(move |_t: f64, z: &Tensor<f64>| Ok(z.scale(c)))
    }

    fn final_value(method: Method, steps: usize) -> f64 {
        let z0 = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let traj = integrate(&linear(1.0), &z0, &SolverConfig::fixed(method, steps)).unwrap();
        traj.final_state().data()[0]
    }

    #[test]
    fn zero_field_keeps_state_exactly() {
        let z0 = Tensor::new(vec![2, 3], vec![1.5, -2.0, 0.25, 3.0, 7.0, -0.5]).unwrap();
        for cfg in [SolverConfig::fixed(Method::Euler, 7), SolverConfig::default(), SolverConfig::adaptive(1e-6, 1e-9)] {
            let traj = integrate(&linear(0.0), &z0, &cfg).unwrap();
            assert_eq!(traj.final_state(), &z0);
        }
    }

    #[test]
    fn rk4_exponential() {
        assert!((final_value(Method::Rk4, 64) - std::f64::consts::E).abs() < 1e-6);
    }

    #[test]
    fn step_halving_ratios() {
        let e = std::f64::consts::E;
        let err = |m, n| (final_value(m, n) - e).abs();
        let euler = err(Method::Euler, 64) / err(Method::Euler, 128);
        assert!((1.8..=2.2).contains(&euler), "euler ratio {euler}");
        let rk4 = err(Method::Rk4, 8) / err(Method::Rk4, 16);
        assert!((14.0..=18.0).contains(&rk4), "rk4 ratio {rk4}");
    }

    #[test]
    fn dopri5_meets_tolerance_against_tight_reference() {
        let field = FnField(|t: f64, z: &Tensor<f64>| Ok(z.map(|v| -v * v + t.sin())));
        let z0 = Tensor::new(vec![1, 3], vec![0.5, 1.0, 2.0]).unwrap();
        let (rtol, atol) = (1e-6, 1e-8);
        let coarse = integrate(&field, &z0, &SolverConfig::adaptive(rtol, atol).with_span(0.0, 3.0)).unwrap();
        let fine = integrate(&field, &z0, &SolverConfig::adaptive(rtol / 10.0, atol / 10.0).with_span(0.0, 3.0)).unwrap();
        let bound = 10.0 * (rtol * fine.final_state().norm2() + atol);
        assert!(coarse.final_state().sub(fine.final_state()).unwrap().norm2() <= bound);
        assert!(coarse.times.windows(2).all(|w| w[1] > w[0]));
        assert_eq!(*coarse.times.last().unwrap(), 3.0);
    }

    #[test]
    fn dopri5_rejects_too_small_budget() {
        let z0 = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let cfg = SolverConfig {
            max_steps: 3,
            ..SolverConfig::adaptive(1e-12, 1e-14)
        }
        .with_span(0.0, 10.0);
        assert!(matches!(integrate(&linear(1.0), &z0, &cfg), Err(Error::MaxStepsExceeded { .. })));
    }

    #[test]
    fn non_finite_state_is_reported() {
        let z0 = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let blow = FnField(|_t: f64, z: &Tensor<f64>| Ok(z.map(|v| v * v * 1e200)));
        assert!(matches!(
            integrate(&blow, &z0, &SolverConfig::fixed(Method::Euler, 4)),
            Err(Error::NonFiniteState { .. })
        ));
    }

    #[test]
    fn invalid_config_is_rejected() {
        let z0 = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let cfg = SolverConfig::default().with_span(1.0, 1.0);
        assert!(matches!(integrate(&linear(1.0), &z0, &cfg), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn integration_is_deterministic() {
        let field = FnField(|t: f64, z: &Tensor<f64>| Ok(z.map(|v| (v + t).cos())));
        let z0 = Tensor::new(vec![1, 2], vec![0.3, -0.7]).unwrap();
        let cfg = SolverConfig::adaptive(1e-7, 1e-9);
        let a = integrate(&field, &z0, &cfg).unwrap();
        let b = integrate(&field, &z0, &cfg).unwrap();
        assert_eq!(a.times, b.times);
        assert_eq!(a.states, b.states);
    }
}
