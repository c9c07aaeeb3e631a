//! White-box ℓ∞ attacks (FGSM, PGD) and Gaussian input noise.

use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};
use crate::rng::{stream, Purpose, Rng};

/// Anything that can report the gradient of its classification loss with
/// respect to its input.
pub trait InputGradient<T: Real> {
    /// Returns the mean loss over the batch and `∂loss/∂x`.
    fn loss_and_input_grad(&self, x: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)>;
}

/// Adapts a closure to [`InputGradient`].
pub struct FnGradient<F>(pub F);

impl<T: Real, F: Fn(&Tensor<T>, &[usize]) -> Result<(T, Tensor<T>)>> InputGradient<T> for FnGradient<F> {
    fn loss_and_input_grad(&self, x: &Tensor<T>, labels: &[usize]) -> Result<(T, Tensor<T>)> {
        (self.0)(x, labels)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    None,
    Fgsm,
    Pgd,
    Gaussian,
}

pub const PGD_DEFAULT_STEPS: usize = 20;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AttackSpec {
    pub kind: AttackKind,
    /// ℓ∞ budget on the [0, 1] input scale.
    #[serde(default)]
    pub epsilon: f64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    /// Defaults to `epsilon / 4` when absent.
    #[serde(default)]
    pub step_size: Option<f64>,
    #[serde(default)]
    pub sigma: f64,
    #[serde(default = "default_true")]
    pub random_start: bool,
}

fn default_steps() -> usize {
    PGD_DEFAULT_STEPS
}

fn default_true() -> bool {
    true
}

impl AttackSpec {
    pub fn none() -> Self {
        Self {
            kind: AttackKind::None,
            epsilon: 0.0,
            steps: PGD_DEFAULT_STEPS,
            step_size: None,
            sigma: 0.0,
            random_start: true,
        }
    }

    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::Fgsm,
            epsilon,
            ..Self::none()
        }
    }

    pub fn pgd(epsilon: f64) -> Self {
        Self {
            kind: AttackKind::Pgd,
            epsilon,
            ..Self::none()
        }
    }

    /// `sigma` on the [0, 1] scale.
    pub fn gaussian(sigma: f64) -> Self {
        Self {
            kind: AttackKind::Gaussian,
            sigma,
            ..Self::none()
        }
    }

    /// `sigma` on the 0–255 pixel scale.
    pub fn gaussian_255(sigma: f64) -> Self {
        Self::gaussian(sigma / 255.0)
    }

    pub fn step_size(&self) -> f64 {
        self.step_size.unwrap_or(self.epsilon / 4.0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.epsilon >= 0.0 && self.epsilon.is_finite()) {
            return bad(format!("attack epsilon must be finite and >= 0, got {}", self.epsilon));
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad(format!("gaussian sigma must be finite and >= 0, got {}", self.sigma));
        }
        if self.kind == AttackKind::Pgd {
            if self.steps == 0 {
                return bad("pgd needs at least one step".into());
            }
            if self.epsilon > 0.0 && !(self.step_size() > 0.0) {
                return bad(format!("pgd step size must be positive, got {}", self.step_size()));
            }
        }
        Ok(())
    }

    /// Short column label, e.g. `fgsm_eps=0.0196`.
    pub fn label(&self) -> String {
        match self.kind {
            AttackKind::None => "clean".into(),
            AttackKind::Fgsm => format!("fgsm_eps={:.4}", self.epsilon),
            AttackKind::Pgd => format!("pgd_eps={:.4}", self.epsilon),
            AttackKind::Gaussian => format!("gaussian_sigma={:.4}", self.sigma),
        }
    }
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

fn project<T: Real>(x: &mut Tensor<T>, x0: &Tensor<T>, eps: T) {
    for (v, &c) in x.data_mut().iter_mut().zip(x0.data()) {
        *v = v.max(c - eps).min(c + eps).max(T::zero()).min(T::one());
    }
}

fn sign_step<T: Real>(x: &Tensor<T>, grad: &Tensor<T>, alpha: T) -> Result<Tensor<T>> {
    x.zip_map(grad, |v, g| v + alpha * sign(g))
}

/// `clip(x + ε · sign(∇ₓ loss), 0, 1)`.
pub fn fgsm<T: Real, M: InputGradient<T> + ?Sized>(model: &M, x: &Tensor<T>, labels: &[usize], epsilon: f64) -> Result<Tensor<T>> {
    if epsilon == 0.0 {
        return Ok(x.clone());
    }
    let (_, grad) = model.loss_and_input_grad(x, labels)?;
    let mut adv = sign_step(x, &grad, T::lit(epsilon))?;
    project(&mut adv, x, T::lit(epsilon));
    Ok(adv)
}

/// Projected sign-gradient ascent inside `B∞(x, ε) ∩ [0, 1]`.
pub fn pgd<T: Real, M: InputGradient<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    labels: &[usize],
    spec: &AttackSpec,
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    spec.validate()?;
    if spec.epsilon == 0.0 {
        return Ok(x.clone());
    }
    let eps = T::lit(spec.epsilon);
    let alpha = T::lit(spec.step_size());
    let mut adv = x.clone();
    if spec.random_start {
        let u = Uniform::new_inclusive(-spec.epsilon, spec.epsilon);
        adv.data_mut().iter_mut().for_each(|v| *v = *v + T::lit(u.sample(rng)));
        project(&mut adv, x, eps);
    }
    for _ in 0..spec.steps {
        let (_, grad) = model.loss_and_input_grad(&adv, labels)?;
        adv = sign_step(&adv, &grad, alpha)?;
        project(&mut adv, x, eps);
    }
    Ok(adv)
}

/// i.i.d. `N(0, σ²)` samples.
pub fn gaussian_noise<T: Real>(shape: &[usize], sigma: f64, rng: &mut Rng) -> Tensor<T> {
    if sigma == 0.0 {
        return Tensor::zeros(shape);
    }
    let normal = Normal::new(0.0, sigma).expect("finite sigma");
    Tensor::from_fn(shape, |_| T::lit(normal.sample(rng)))
}

/// `clip(x + N(0, σ²), 0, 1)`, deterministic per seed.
pub fn gaussian_perturb<T: Real>(x: &Tensor<T>, sigma: f64, seed: u64) -> Tensor<T> {
    let mut rng = stream(seed, Purpose::Noise, 0);
    let noise = gaussian_noise::<T>(x.shape(), sigma, &mut rng);
    x.zip_map(&noise, |a, n| (a + n).max(T::zero()).min(T::one()))
        .expect("same shape")
}

/// Applies `spec` to one batch. `stream_index` separates the random streams
/// of different batches under the same seed.
pub fn apply_attack<T: Real, M: InputGradient<T> + ?Sized>(
    model: &M,
    x: &Tensor<T>,
    labels: &[usize],
    spec: &AttackSpec,
    seed: u64,
    stream_index: u64,
) -> Result<Tensor<T>> {
    spec.validate()?;
    match spec.kind {
        AttackKind::None => Ok(x.clone()),
        AttackKind::Fgsm => fgsm(model, x, labels, spec.epsilon),
        AttackKind::Pgd => pgd(model, x, labels, spec, &mut stream(seed, Purpose::AttackStart, stream_index)),
        AttackKind::Gaussian => {
            let mut rng = stream(seed, Purpose::Noise, stream_index);
            let noise = gaussian_noise::<T>(x.shape(), spec.sigma, &mut rng);
            x.zip_map(&noise, |a, n| (a + n).max(T::zero()).min(T::one()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng as _;

    /// Softmax cross-entropy of a fixed linear classifier.
    fn linear_model(seed: u64, inputs: usize, classes: usize) -> impl InputGradient<f64> {
        let mut rng = stream(seed, Purpose::Test, 0);
        let w: Vec<f64> = (0..inputs * classes).map(|_| rng.gen_range(-1.0..1.0)).collect();
        FnGradient(move |x: &Tensor<f64>, y: &[usize]| {
            let n = x.batch();
            let mut grad = Tensor::zeros(x.shape());
            let mut loss = 0.0;
            for b in 0..n {
                let xs = x.sample(b);
                let logits: Vec<f64> = (0..classes)
                    .map(|c| (0..inputs).map(|i| w[c * inputs + i] * xs[i]).sum())
                    .collect();
                let m = logits.iter().cloned().fold(f64::MIN, f64::max);
                let z: f64 = logits.iter().map(|l| (l - m).exp()).sum();
                loss += z.ln() + m - logits[y[b]];
                for c in 0..classes {
                    let p = (logits[c] - m).exp() / z - if c == y[b] { 1.0 } else { 0.0 };
                    for i in 0..inputs {
                        grad.sample_mut(b)[i] += p * w[c * inputs + i] / n as f64;
                    }
                }
            }
            Ok((loss / n as f64, grad))
        })
    }

    fn quadratic() -> impl InputGradient<f64> {
        // loss = (x - c)ᵀ A (x - c), A positive definite
        FnGradient(|x: &Tensor<f64>, _y: &[usize]| {
            let (a, c) = ([[2.0, 0.6], [0.6, 1.0]], [0.45, 0.55]);
            let d = [x.data()[0] - c[0], x.data()[1] - c[1]];
            let ad = [a[0][0] * d[0] + a[0][1] * d[1], a[1][0] * d[0] + a[1][1] * d[1]];
            let loss = d[0] * ad[0] + d[1] * ad[1];
            Ok((loss, Tensor::new(vec![1, 2], vec![2.0 * ad[0], 2.0 * ad[1]])?))
        })
    }

    fn random_images(seed: u64, shape: &[usize]) -> Tensor<f64> {
        let mut rng = stream(seed, Purpose::Test, 1);
        Tensor::from_fn(shape, |_| rng.gen_range(0.0..1.0))
    }

    #[test]
    fn zero_budget_is_identity() {
        let m = linear_model(1, 6, 3);
        let x = random_images(1, &[4, 6]);
        let y = [0, 1, 2, 0];
        assert_eq!(fgsm(&m, &x, &y, 0.0).unwrap(), x);
        let mut rng = stream(1, Purpose::AttackStart, 0);
        assert_eq!(pgd(&m, &x, &y, &AttackSpec::pgd(0.0), &mut rng).unwrap(), x);
        assert_eq!(gaussian_perturb(&x, 0.0, 3), x);
    }

    #[test]
    fn positive_gradient_moves_up_and_clips() {
        let m = FnGradient(|x: &Tensor<f64>, _y: &[usize]| Ok((x.sum(), Tensor::full(x.shape(), 1.0))));
        let x = Tensor::new(vec![1, 3], vec![0.1, 0.5, 0.98]).unwrap();
        let adv = fgsm(&m, &x, &[0], 0.05).unwrap();
        let expected = [0.15, 0.55, 1.0];
        for (a, e) in adv.data().iter().zip(expected) {
            assert!((a - e).abs() < 1e-15);
        }
    }

    #[test]
    fn attacks_respect_budget_and_range() {
        let m = linear_model(2, 16, 4);
        let x = random_images(2, &[8, 16]);
        let y: Vec<usize> = (0..8).map(|i| i % 4).collect();
        for eps in [1.0 / 255.0, 0.1, 0.3] {
            let mut rng = stream(2, Purpose::AttackStart, 0);
            for adv in [fgsm(&m, &x, &y, eps).unwrap(), pgd(&m, &x, &y, &AttackSpec::pgd(eps), &mut rng).unwrap()] {
                assert!(adv.sub(&x).unwrap().max_abs() <= eps + 1e-7);
                assert!(adv.data().iter().all(|v| (0.0..=1.0).contains(v)));
            }
        }
    }

    #[test]
    fn single_step_pgd_without_start_is_fgsm() {
        let m = linear_model(3, 5, 3);
        let x = random_images(3, &[3, 5]);
        let y = [2, 0, 1];
        let spec = AttackSpec {
            steps: 1,
            step_size: Some(0.04),
            random_start: false,
            ..AttackSpec::pgd(0.03)
        };
        let mut rng = stream(3, Purpose::AttackStart, 0);
        let got = pgd(&m, &x, &y, &spec, &mut rng).unwrap();
        let mut expected = fgsm(&m, &x, &y, 0.04).unwrap();
        project(&mut expected, &x, 0.03);
        assert_eq!(got, expected);
    }

    #[test]
    fn pgd_beats_fgsm_on_convex_quadratic() {
        let m = quadratic();
        let x = Tensor::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let eps = 0.2;
        let loss = |v: &Tensor<f64>| m.loss_and_input_grad(v, &[0]).unwrap().0;
        let f = fgsm(&m, &x, &[0], eps).unwrap();
        for random_start in [false, true] {
            let spec = AttackSpec {
                steps: 10,
                random_start,
                ..AttackSpec::pgd(eps)
            };
            let p = pgd(&m, &x, &[0], &spec, &mut stream(4, Purpose::AttackStart, 0)).unwrap();
            assert!(loss(&p) >= loss(&f) - 1e-12, "{} < {}", loss(&p), loss(&f));
        }
    }

    #[test]
    fn noise_moments() {
        let sigma = 0.4;
        let mut rng = stream(11, Purpose::Noise, 0);
        let n = gaussian_noise::<f64>(&[1_000_000], sigma, &mut rng);
        let mean = n.sum() / n.len() as f64;
        let std = (n.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.len() as f64).sqrt();
        assert!(mean.abs() < 3.0 * sigma / 1000.0);
        assert!((std - sigma).abs() < 0.01 * sigma);
    }

    #[test]
    fn seeded_attacks_are_deterministic() {
        let x = random_images(5, &[2, 10]);
        assert_eq!(gaussian_perturb(&x, 0.3, 9), gaussian_perturb(&x, 0.3, 9));
        assert_ne!(gaussian_perturb(&x, 0.3, 9), gaussian_perturb(&x, 0.3, 10));
        let m = linear_model(5, 10, 3);
        let y = [1, 2];
        let a = apply_attack(&m, &x, &y, &AttackSpec::pgd(0.1), 7, 0).unwrap();
        let b = apply_attack(&m, &x, &y, &AttackSpec::pgd(0.1), 7, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spec_defaults_and_validation() {
        let spec: AttackSpec = serde_json::from_str(r#"{"kind": "pgd", "epsilon": 0.2}"#).unwrap();
        assert_eq!(spec.steps, 20);
        assert!(spec.random_start);
        assert!((spec.step_size() - 0.05).abs() < 1e-15);
        assert!((AttackSpec::gaussian_255(100.0).sigma - 100.0 / 255.0).abs() < 1e-15);
        assert!(AttackSpec::fgsm(-0.1).validate().is_err());
        assert!(AttackSpec { steps: 0, ..AttackSpec::pgd(0.1) }.validate().is_err());
    }
}
