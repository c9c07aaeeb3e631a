//! Quick property suite behind the `selftest` command. Each property is
//! checked against the slow oracles in [`crate::reference`].

use std::time::Instant;

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::error::Result;
use crate::layers::{cayley_orthogonalize_with, cayley_square, AvgPool, CayleyFn, Dense, KernelWeights, Layer, OrthoConv, PlainConv};
use crate::lipschitz::{contraction_rate, gronwall_certify};
use crate::numerics::{circular_conv, fft2, ComplexMatrix, Tensor};
use crate::odeint::{integrate, node_backward, node_forward, DynamicsField, FnField, Method, SolverConfig, TimeMode};
use crate::reference;
use crate::rng::{stream, Purpose, Rng};

/// Deliberate defects for exercising the failure path.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Cayley transform that returns `I − A` without the inverse factor.
    BrokenCayley,
}

#[derive(Clone, Debug, Serialize)]
pub struct PropertyResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

fn skip_inversion(a: &ComplexMatrix<f64>) -> Result<(ComplexMatrix<f64>, ComplexMatrix<f64>)> {
    let id = ComplexMatrix::identity(a.rows());
    Ok((id.sub(a)?, id))
}

fn gaussian(shape: &[usize], rng: &mut Rng) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.sample(StandardNormal))
}

type Check = Result<(bool, String)>;

fn fft_round_trip() -> Check {
    let mut rng = stream(1, Purpose::Test, 0);
    let mut worst: f64 = 0.0;
    for &(h, w) in &[(4, 4), (5, 6), (7, 7), (8, 3)] {
        let x = gaussian(&[h, w], &mut rng);
        let spec = fft2(&x)?;
        let naive = reference::naive_dft2(x.data(), h, w);
        for (a, b) in spec.data.iter().zip(&naive) {
            worst = worst.max((a - b).norm());
        }
        let back = crate::numerics::ifft2(&spec)?.real_part();
        worst = worst.max(back.sub(&x)?.max_abs());
    }
    Ok((worst < 1e-9, format!("max deviation {worst:.2e}")))
}

fn conv_matches_dense() -> Check {
    let mut rng = stream(2, Purpose::Test, 0);
    let mut worst: f64 = 0.0;
    for &(co, ci, k, h, w) in &[(2, 3, 3, 5, 5), (3, 1, 1, 4, 6), (1, 2, 5, 6, 6)] {
        let kern = gaussian(&[co, ci, k, k], &mut rng);
        let x = gaussian(&[1, ci, h, w], &mut rng);
        let dense = reference::dense_matvec(&reference::dense_conv_matrix(&kern, h, w), x.data());
        let fast = circular_conv(&x, &kern)?;
        worst = worst.max(reference::relative_error(fast.data(), &dense, 1e-12));
    }
    Ok((worst < 1e-10, format!("max relative error {worst:.2e}")))
}

/// Dense matrix of an ortho conv, probed column by column.
fn materialize(op: &crate::layers::OrthoConvOperator<f64>) -> Result<nalgebra::DMatrix<f64>> {
    let (h, w) = op.spatial_dims();
    let (co, ci) = (op.c_out(), op.c_in());
    let mut m = nalgebra::DMatrix::zeros(co * h * w, ci * h * w);
    for j in 0..ci * h * w {
        let mut e = Tensor::zeros(&[1, ci, h, w]);
        e.data_mut()[j] = 1.0;
        for (i, &v) in op.apply(&e)?.data().iter().enumerate() {
            m[(i, j)] = v;
        }
    }
    Ok(m)
}

fn cayley_orthogonality(cayley: CayleyFn<f64>) -> Check {
    let mut rng = stream(3, Purpose::Test, 0);
    let mut worst: f64 = 0.0;
    for case in 0..12 {
        let c = 1 + case % 4;
        let n = 3 + case % 6;
        let w = KernelWeights::gaussian(c, c, 3, 0.5, &mut rng);
        let op = cayley_orthogonalize_with(&w, (n, n), cayley)?;
        for s in reference::singular_values(&materialize(&op)?) {
            worst = worst.max((s - 1.0).abs());
        }
        let x = gaussian(&[1, c, n, n], &mut rng);
        worst = worst.max((op.apply(&x)?.norm2() / x.norm2() - 1.0).abs());
    }
    Ok((worst < 1e-6, format!("max |sigma - 1| {worst:.2e}")))
}

/// Relative error between backward and central differences for
/// `loss = ⟨g, layer(x)⟩` with respect to the input and every parameter.
pub fn layer_gradient_error(layer: &Layer<f64>, x: &Tensor<f64>, rng: &mut Rng) -> Result<f64> {
    let (y, tape) = layer.forward(x)?;
    let g = gaussian(y.shape(), rng);
    let (gx, pg) = layer.backward(tape, &g)?;
    let params = layer.param_gradients(pg)?;
    let mut worst = 0.0f64;
    let fd_x = reference::central_difference(
        &mut |v| {
            let t = Tensor::new(x.shape().to_vec(), v.to_vec()).unwrap();
            layer.forward(&t).unwrap().0.dot(&g).unwrap()
        },
        x.data(),
        1e-6,
    );
    worst = worst.max(reference::relative_error(gx.data(), &fd_x, 1e-8));
    for (pi, grad) in params.iter().enumerate() {
        let base = layer.params()[pi].data().to_vec();
        let fd = reference::central_difference(
            &mut |v| {
                let mut l = layer.clone();
                l.params_mut()[pi].data_mut().copy_from_slice(v);
                l.refresh().unwrap();
                l.forward(x).unwrap().0.dot(&g).unwrap()
            },
            &base,
            1e-6,
        );
        worst = worst.max(reference::relative_error(grad.data(), &fd, 1e-8));
    }
    Ok(worst)
}

fn gradient_checks() -> Check {
    let mut rng = stream(4, Purpose::Test, 0);
    let dims = (5, 5);
    let layers: Vec<Layer<f64>> = vec![
        Layer::PlainConv(PlainConv::init(3, 2, 3, dims, true, &mut rng)?),
        Layer::OrthoConv(OrthoConv::new(KernelWeights::gaussian(2, 2, 3, 0.3, &mut rng), dims)?),
        Layer::OrthoConv(OrthoConv::new(KernelWeights::gaussian(3, 2, 3, 0.3, &mut rng), dims)?),
        Layer::Dense(Dense::init(50, 4, &mut rng)),
        Layer::GroupSort,
        Layer::Relu,
    ];
    let mut worst: f64 = 0.0;
    for layer in &layers {
        let x = gaussian(&[2, 2, 5, 5], &mut rng);
        worst = worst.max(layer_gradient_error(layer, &x, &mut rng)?);
    }
    let pool = Layer::AvgPool(AvgPool::new(2)?);
    worst = worst.max(layer_gradient_error(&pool, &gaussian(&[1, 2, 4, 4], &mut rng), &mut rng)?);

    let field = DynamicsField::new(
        vec![
            Layer::OrthoConv(OrthoConv::new(KernelWeights::gaussian(2, 2, 3, 0.3, &mut rng), (4, 4))?),
            Layer::GroupSort,
            Layer::OrthoConv(OrthoConv::new(KernelWeights::gaussian(2, 2, 3, 0.3, &mut rng), (4, 4))?),
        ],
        TimeMode::Autonomous,
    );
    let cfg = SolverConfig::fixed(Method::Rk4, 3);
    let z = gaussian(&[1, 2, 4, 4], &mut rng);
    let g = gaussian(&[1, 2, 4, 4], &mut rng);
    let (_, tape) = node_forward(&field, &z, &cfg)?;
    let grads = node_backward(tape, &g)?;
    let fd = reference::central_difference(
        &mut |v| {
            let t = Tensor::new(z.shape().to_vec(), v.to_vec()).unwrap();
            node_forward(&field, &t, &cfg).unwrap().0.dot(&g).unwrap()
        },
        z.data(),
        1e-6,
    );
    worst = worst.max(reference::relative_error(grads.grad_z.data(), &fd, 1e-8));
    Ok((worst < 1e-4, format!("max relative error {worst:.2e}")))
}

fn empirical_order(method: Method, f: fn(f64) -> f64, exact: f64, n: usize) -> Result<f64> {
    let field = FnField(move |_t: f64, z: &Tensor<f64>| Ok(z.map(f)));
    let z0 = Tensor::new(vec![1, 1], vec![1.0])?;
    let err = |steps: usize| -> Result<f64> {
        let traj = integrate(&field, &z0, &SolverConfig::fixed(method, steps))?;
        Ok((traj.final_state().data()[0] - exact).abs())
    };
    Ok((err(n)? / err(2 * n)?).log2())
}

fn solver_orders() -> Check {
    // sin case: z' = sin z, z(0) = 1 has z(1) = 2 atan(e · tan(1/2)).
    let sin_exact = 2.0 * (std::f64::consts::E * 0.5f64.tan()).atan();
    let cases = [
        (Method::Euler, 64, empirical_order(Method::Euler, |z| z, std::f64::consts::E, 64)?, 0.8, 1.2),
        (Method::Euler, 64, empirical_order(Method::Euler, f64::sin, sin_exact, 64)?, 0.8, 1.2),
        (Method::Rk4, 8, empirical_order(Method::Rk4, |z| z, std::f64::consts::E, 8)?, 3.5, 4.5),
        (Method::Rk4, 8, empirical_order(Method::Rk4, f64::sin, sin_exact, 8)?, 3.5, 4.5),
    ];
    let ok = cases.iter().all(|&(_, _, p, lo, hi)| (lo..=hi).contains(&p));
    let detail = cases.iter().map(|(m, _, p, _, _)| format!("{m:?} {p:.3}")).collect::<Vec<_>>().join(", ");
    Ok((ok, detail))
}

fn gronwall_equality() -> Check {
    let c = 0.8;
    let field = FnField(move |_t: f64, z: &Tensor<f64>| Ok(z.scale(c)));
    let mut rng = stream(6, Purpose::Test, 0);
    let pairs: Vec<_> = (0..4).map(|_| (gaussian(&[1, 3], &mut rng), gaussian(&[1, 3], &mut rng))).collect();
    let report = gronwall_certify(&field, &SolverConfig::fixed(Method::Rk4, 20), &pairs, c)?;
    Ok((
        (report.max_ratio - 1.0).abs() < 1e-4 && !report.violated,
        format!("max ratio {:.8}", report.max_ratio),
    ))
}

fn contraction_rates() -> Check {
    let mut rng = stream(7, Purpose::Test, 0);
    let pairs: Vec<_> = (0..4).map(|_| (gaussian(&[1, 3], &mut rng), gaussian(&[1, 3], &mut rng))).collect();
    let cfg = SolverConfig::fixed(Method::Rk4, 20);
    let shrink = contraction_rate(&FnField(|_t: f64, z: &Tensor<f64>| Ok(z.scale(-1.0))), &cfg, &pairs)?;
    let grow = contraction_rate(&FnField(|_t: f64, z: &Tensor<f64>| Ok(z.clone())), &cfg, &pairs)?;
    Ok((
        (shrink.rho_estimate - 1.0).abs() <= 0.05 && (grow.rho_estimate + 1.0).abs() <= 0.05,
        format!("rho(-z) {:.4}, rho(z) {:.4}", shrink.rho_estimate, grow.rho_estimate),
    ))
}

/// Runs every property; a property that errors counts as failed.
pub fn run(fault: Option<Fault>) -> Vec<PropertyResult> {
    let cayley: CayleyFn<f64> = match fault {
        Some(Fault::BrokenCayley) => skip_inversion,
        None => cayley_square,
    };
    let suite: Vec<(&'static str, Box<dyn Fn() -> Check>)> = vec![
        ("fft_round_trip", Box::new(fft_round_trip)),
        ("conv_dense_oracle", Box::new(conv_matches_dense)),
        ("cayley_orthogonality", Box::new(move || cayley_orthogonality(cayley))),
        ("gradient_checks", Box::new(gradient_checks)),
        ("solver_orders", Box::new(solver_orders)),
        ("gronwall_equality", Box::new(gronwall_equality)),
        ("contraction_rates", Box::new(contraction_rates)),
    ];
    suite
        .into_iter()
        .map(|(name, check)| {
            let started = Instant::now();
            let (passed, detail) = match check() {
                Ok(r) => r,
                Err(e) => (false, format!("error: {e}")),
            };
            PropertyResult {
                name,
                passed,
                detail,
                seconds: started.elapsed().as_secs_f64(),
            }
        })
        .collect()
}
