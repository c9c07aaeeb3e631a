//! Model assembly, cross-entropy, SGD with momentum, evaluation and
//! certification of trained models.

mod loss;
mod model;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use loss::{argmax_rows, cross_entropy};
pub use model::{parameter_spread, Activation, ArchKind, Body, ModelGrads, ModelSpec, ModelTape, NodeModel};

use crate::adversary::{apply_attack, AttackKind, AttackSpec};
use crate::dataio::{Augmentation, Dataset};
use crate::error::{Error, Result};
use crate::layers::LayerGrad;
use crate::lipschitz::{
    contraction_rate, empirical_lipschitz, gronwall_certify, lipschitz_upper_bound, stack_upper_bound,
    ContractionReport, GronwallReport, LipschitzEstimate,
};
use crate::numerics::{Real, Tensor};
use crate::rng::{stream, Purpose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub augmentation: Augmentation,
    /// Samples per gradient work item. Chunks are reduced in a fixed
    /// order, so results do not depend on the thread count.
    pub chunk_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 32,
            learning_rate: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            augmentation: Augmentation::off(),
            chunk_size: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size == 0 || self.chunk_size == 0 {
            return bad("batch_size and chunk_size must be positive".into());
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be finite and >= 0, got {}", self.learning_rate));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if self.weight_decay != 0.0 {
            return bad(format!("weight_decay is fixed at 0, got {}", self.weight_decay));
        }
        Ok(())
    }
}

/// Plain SGD with heavy-ball momentum: `v ← μv + g`, `p ← p − ηv`.
pub struct Sgd<T> {
    pub learning_rate: f64,
    pub momentum: f64,
    velocity: Vec<Vec<Tensor<T>>>,
}

impl<T: Real> Sgd<T> {
    pub fn new(model: &NodeModel<T>, learning_rate: f64, momentum: f64) -> Self {
        let velocity = model
            .layers()
            .iter()
            .map(|l| l.params().iter().map(|p| Tensor::zeros(p.shape())).collect())
            .collect();
        Self {
            learning_rate,
            momentum,
            velocity,
        }
    }

    pub fn step(&mut self, model: &mut NodeModel<T>, grads: Vec<LayerGrad<T>>) -> Result<()> {
        let lr = T::lit(self.learning_rate);
        let mu = T::lit(self.momentum);
        let mut layers = model.layers_mut();
        if grads.len() != layers.len() {
            return Err(Error::InvalidConfig("gradient count does not match layer count".into()));
        }
        for ((layer, grad), vel) in layers.iter_mut().zip(grads).zip(&mut self.velocity) {
            if layer.param_count() == 0 {
                continue;
            }
            let pg = layer.param_gradients(grad)?;
            for ((p, g), v) in layer.params_mut().into_iter().zip(&pg).zip(vel.iter_mut()) {
                for ((pv, &gv), vv) in p.data_mut().iter_mut().zip(g.data()).zip(v.data_mut()) {
                    *vv = mu * *vv + gv;
                    *pv = *pv - lr * *vv;
                }
            }
            layer.refresh()?;
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean minibatch loss over the epoch.
    pub train_loss: f64,
    pub train_accuracy: f64,
    /// Product bound of the NODE dynamics after the epoch.
    pub dynamics_upper_bound: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttackResult {
    pub label: String,
    pub spec: AttackSpec,
    /// Percent in [0, 100].
    pub accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Certificates {
    pub lipschitz: Option<LipschitzEstimate>,
    pub gronwall: Option<GronwallReport>,
    pub contraction: Option<ContractionReport>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub arch: Option<ArchKind>,
    pub param_count: usize,
    /// Full-training-set loss before the first update.
    pub initial_loss: Option<f64>,
    pub epochs: Vec<EpochRecord>,
    pub accuracy: Vec<AttackResult>,
    #[serde(flatten)]
    pub certificates: Certificates,
    /// Resolved configuration that produced this report.
    #[serde(default, skip_serializing_if = "serde_json::Value::is_null")]
    pub config: serde_json::Value,
    /// Wall-clock seconds; the only field that varies between identical runs.
    pub timings: BTreeMap<String, f64>,
}

impl MetricsReport {
    /// `[initial, epoch 1, …, epoch n]`.
    pub fn loss_curve(&self) -> Vec<f64> {
        self.initial_loss.into_iter().chain(self.epochs.iter().map(|e| e.train_loss)).collect()
    }

    pub fn accuracy_of(&self, label: &str) -> Option<f64> {
        self.accuracy.iter().find(|r| r.label == label).map(|r| r.accuracy)
    }

    pub fn without_timings(&self) -> Self {
        Self {
            timings: BTreeMap::new(),
            ..self.clone()
        }
    }
}

fn percent(correct: usize, total: usize) -> f64 {
    if total == 0 {
        0.0
    } else {
        100.0 * correct as f64 / total as f64
    }
}

fn index_chunks(n: usize, size: usize) -> Vec<Vec<usize>> {
    (0..n).collect::<Vec<_>>().chunks(size).map(<[usize]>::to_vec).collect()
}

/// Mean loss and accuracy over a dataset without updating anything.
pub fn dataset_loss<T: Real>(model: &NodeModel<T>, data: &Dataset, batch_size: usize) -> Result<(f64, f64)> {
    let parts = index_chunks(data.len(), batch_size.max(1))
        .par_iter()
        .map(|idx| {
            let (x, y) = data.batch::<T>(idx);
            let logits = model.logits(&x)?;
            let (loss, _) = cross_entropy(&logits, &y)?;
            let correct = argmax_rows(&logits).iter().zip(&y).filter(|(p, l)| p == l).count();
            Ok((Real::to_f64(loss) * idx.len() as f64, correct))
        })
        .collect::<Result<Vec<_>>>()?;
    let (loss, correct) = parts.iter().fold((0.0, 0), |(a, b), &(l, c)| (a + l, b + c));
    Ok((loss / data.len().max(1) as f64, percent(correct, data.len())))
}

fn dynamics_bound<T: Real>(model: &NodeModel<T>) -> Result<Option<f64>> {
    model.dynamics().map(lipschitz_upper_bound).transpose()
}

/// Trains in place. `on_epoch` sees each record as it is produced.
pub fn train_with<T: Real>(
    model: &mut NodeModel<T>,
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<MetricsReport> {
    cfg.validate()?;
    let (c, h, w) = data.image_dims();
    if (c, h, w) != model.input_dims || data.class_count != model.classes {
        return Err(Error::InvalidConfig(format!(
            "dataset is {c}x{h}x{w} with {} classes, model expects {:?} with {}",
            data.class_count, model.input_dims, model.classes
        )));
    }
    let started = Instant::now();
    let mut report = MetricsReport {
        arch: Some(model.arch),
        param_count: model.param_count(),
        ..MetricsReport::default()
    };
    let (initial, _) = dataset_loss(model, data, cfg.batch_size)?;
    report.initial_loss = Some(initial);
    let mut opt = Sgd::new(model, cfg.learning_rate, cfg.momentum);
    let mut step = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut stream(cfg.seed, Purpose::Shuffle, epoch as u64));
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for batch in order.chunks(cfg.batch_size) {
            step += 1;
            let (x, y) = data.batch::<T>(batch);
            let x = cfg.augmentation.apply(&x, &mut stream(cfg.seed, Purpose::Augment, step as u64));
            let scale = T::lit(1.0 / batch.len() as f64);
            let chunks = index_chunks(batch.len(), cfg.chunk_size);
            let parts = chunks
                .par_iter()
                .map(|idx| {
                    let xs = x.select(idx);
                    let ys: Vec<usize> = idx.iter().map(|&i| y[i]).collect();
                    model.loss_and_grads(&xs, &ys, T::lit(idx.len() as f64) * scale)
                        .map(|(l, c, g)| (Real::to_f64(l) * idx.len() as f64, c, g.layers))
                })
                .collect::<Result<Vec<_>>>()
                .map_err(|e| match e {
                    Error::NonFiniteState { .. } => Error::NonFiniteLoss {
                        epoch,
                        step,
                        value: f64::NAN,
                    },
                    e => e,
                })?;
            let mut grads: Option<Vec<LayerGrad<T>>> = None;
            let mut batch_loss = 0.0;
            for (l, c, g) in parts {
                batch_loss += l;
                correct += c;
                match &mut grads {
                    None => grads = Some(g),
                    Some(acc) => {
                        for (a, b) in acc.iter_mut().zip(g) {
                            a.accumulate(b)?;
                        }
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    value: batch_loss / batch.len() as f64,
                });
            }
            loss_sum += batch_loss;
            opt.step(model, grads.unwrap_or_default())?;
        }
        let record = EpochRecord {
            epoch,
            train_loss: loss_sum / data.len() as f64,
            train_accuracy: percent(correct, data.len()),
            dynamics_upper_bound: dynamics_bound(model)?,
        };
        on_epoch(&record);
        report.epochs.push(record);
    }
    report.timings.insert("train_seconds".into(), started.elapsed().as_secs_f64());
    Ok(report)
}

pub fn train<T: Real>(model: &mut NodeModel<T>, data: &Dataset, cfg: &TrainConfig) -> Result<MetricsReport> {
    train_with(model, data, cfg, |_| {})
}

/// ℓ∞ and range check on generated inputs.
fn check_budget<T: Real>(x: &Tensor<T>, adv: &Tensor<T>, spec: &AttackSpec) -> Result<()> {
    let in_range = adv.data().iter().all(|&v| v >= T::zero() && v <= T::one());
    let within = match spec.kind {
        AttackKind::Fgsm | AttackKind::Pgd => Real::to_f64(adv.sub(x)?.max_abs()) <= spec.epsilon + 1e-6,
        _ => true,
    };
    if in_range && within {
        Ok(())
    } else {
        Err(Error::NumericalHealth(format!("{} produced inputs outside its budget", spec.label())))
    }
}

/// Accuracy under each attack. The clean row is always first.
pub fn evaluate<T: Real>(
    model: &NodeModel<T>,
    data: &Dataset,
    attacks: &[AttackSpec],
    seed: u64,
    batch_size: usize,
) -> Result<MetricsReport> {
    let mut specs = vec![AttackSpec::none()];
    specs.extend(attacks.iter().filter(|a| a.kind != AttackKind::None).cloned());
    let mut report = MetricsReport {
        arch: Some(model.arch),
        param_count: model.param_count(),
        ..MetricsReport::default()
    };
    let batches = index_chunks(data.len(), batch_size.max(1));
    for spec in specs {
        spec.validate()?;
        let started = Instant::now();
        let correct = batches
            .par_iter()
            .enumerate()
            .map(|(b, idx)| {
                let (x, y) = data.batch::<T>(idx);
                let adv = apply_attack(model, &x, &y, &spec, seed, b as u64)?;
                check_budget(&x, &adv, &spec)?;
                Ok(model.predict(&adv)?.iter().zip(&y).filter(|(p, l)| p == l).count())
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .sum();
        let label = spec.label();
        report.timings.insert(format!("eval_{label}_seconds"), started.elapsed().as_secs_f64());
        report.accuracy.push(AttackResult {
            label,
            spec,
            accuracy: percent(correct, data.len()),
        });
    }
    Ok(report)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CertifyConfig {
    pub pairs: usize,
    /// Std of the Gaussian offset between the two images of a nearby pair.
    pub pair_noise: f64,
    /// Grönwall constant; the dynamics' product bound when absent.
    pub gronwall_c: Option<f64>,
}

impl Default for CertifyConfig {
    fn default() -> Self {
        Self {
            pairs: 100,
            pair_noise: 0.1,
            gronwall_c: None,
        }
    }
}

/// Feature-space input pairs: even indices pair two different images,
/// odd indices pair an image with a noisy copy of itself. Pairs whose
/// features coincide are redrawn.
pub fn feature_pairs<T: Real>(
    model: &NodeModel<T>,
    data: &Dataset,
    count: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
    const ROUNDS: usize = 20;
    if data.len() < 2 {
        return Err(Error::InvalidConfig("certification needs at least two samples".into()));
    }
    let mut rng = stream(seed, Purpose::Certify, 0);
    let normal = Normal::new(0.0, noise.max(0.0)).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let mut pairs = Vec::with_capacity(count);
    for _ in 0..ROUNDS {
        let need = count - pairs.len();
        if need == 0 {
            break;
        }
        let mut firsts = Vec::with_capacity(need);
        let mut seconds = Vec::with_capacity(need);
        for i in 0..need {
            let p = pairs.len() + i;
            let mut picks: Vec<usize> = (0..data.len()).collect();
            let (chosen, _) = picks.partial_shuffle(&mut rng, 2);
            let (a, b) = (chosen[0], chosen[1]);
            let (xa, _) = data.batch::<T>(&[a]);
            let xb = if p % 2 == 0 {
                data.batch::<T>(&[b]).0
            } else {
                let mut xb = xa.clone();
                for v in xb.data_mut() {
                    *v = (*v + T::lit(normal.sample(&mut rng))).max(T::zero()).min(T::one());
                }
                xb
            };
            firsts.push(xa);
            seconds.push(xb);
        }
        let za = model.features(&Tensor::concat(&firsts.iter().collect::<Vec<_>>())?)?;
        let zb = model.features(&Tensor::concat(&seconds.iter().collect::<Vec<_>>())?)?;
        for i in 0..need {
            let (u, v) = (za.select(&[i]), zb.select(&[i]));
            if Real::to_f64(u.sub(&v)?.norm2()) > 1e-12 {
                pairs.push((u, v));
            }
        }
    }
    if pairs.len() < count {
        return Err(Error::InvalidConfig(format!(
            "only {} of {count} certification pairs have distinct features",
            pairs.len()
        )));
    }
    Ok(pairs)
}

/// Lipschitz sandwich for the body and, for NODE bodies, Grönwall and
/// contraction reports over feature-space pairs. Runs at 64-bit.
pub fn certify<T: Real>(model: &NodeModel<T>, data: &Dataset, cfg: &CertifyConfig, seed: u64) -> Result<Certificates> {
    let model = model.cast::<f64>()?;
    let pairs = feature_pairs(&model, data, cfg.pairs, cfg.pair_noise, seed)?;
    match &model.body {
        Body::Node { field, solver } => {
            let upper = lipschitz_upper_bound(field)?;
            let lower = empirical_lipschitz(|z| crate::odeint::VectorField::eval(field, solver.t0, z), &pairs)?;
            let c = cfg.gronwall_c.unwrap_or(upper);
            Ok(Certificates {
                lipschitz: Some(LipschitzEstimate {
                    upper,
                    lower,
                    samples_used: pairs.len(),
                }),
                gronwall: Some(gronwall_certify(field, solver, &pairs, c)?),
                contraction: Some(contraction_rate(field, solver, &pairs)?),
            })
        }
        Body::Residual { blocks } => {
            let upper = blocks
                .iter()
                .map(|b| stack_upper_bound(b).map(|l| 1.0 + l))
                .product::<Result<f64>>()?;
            let lower = empirical_lipschitz(|z| model.body_map(z), &pairs)?;
            Ok(Certificates {
                lipschitz: Some(LipschitzEstimate {
                    upper,
                    lower,
                    samples_used: pairs.len(),
                }),
                gronwall: None,
                contraction: None,
            })
        }
    }
}

#[cfg(test)]
mod tests;
