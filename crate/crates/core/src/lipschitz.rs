//! Lipschitz bounds and trajectory certificates.
//!
//! Upper bounds come from exact per-frequency SVDs of convolution spectra and
//! dense SVDs of fully connected weights. Lower bounds come from sampled
//! input pairs. [`gronwall_certify`] checks the exponential separation bound
//! `‖z₂(t) − z₁(t)‖ ≤ ‖x₂ − x₁‖ e^{C t}` along integrated trajectories and
//! [`contraction_rate`] fits the decay rate of trajectory gaps.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::layers::{KernelWeights, Layer};
use crate::numerics::{kernel_spectrum, ComplexMatrix, Fft2, HalfSpectrum, Real, Tensor};
use crate::odeint::{integrate, DynamicsField, SolverConfig, Trajectory, VectorField};

/// Relative slack on the Grönwall ratio.
pub const GRONWALL_TOLERANCE: f64 = 1e-6;
/// Input pairs closer than this are rejected.
pub const MIN_PAIR_DISTANCE: f64 = 1e-12;
/// Smallest fitted rate that counts as contraction.
pub const RHO_MIN: f64 = 1e-6;
/// Largest RMS residual (in log-distance) for a contraction fit to count.
pub const FIT_RESIDUAL_MAX: f64 = 0.1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LipschitzEstimate {
    pub upper: f64,
    pub lower: f64,
    pub samples_used: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GronwallReport {
    pub pairs_tested: usize,
    pub max_ratio: f64,
    pub violated: bool,
    #[serde(rename = "C_used")]
    pub c_used: f64,
    pub tolerance: f64,
    /// Largest `‖f(x₂) − f(x₁)‖ / ‖x₂ − x₁‖` over the initial pairs at `t0`.
    pub empirical_lower: f64,
    /// Set when `C` is below that lower bound, in which case the report
    /// certifies nothing.
    pub c_below_empirical: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ContractionReport {
    pub rho_estimate: f64,
    pub contractive: bool,
    pub fit_residual: f64,
    pub pairs_used: usize,
    pub points_used: usize,
}

fn largest_singular_value(m: &ComplexMatrix<f64>) -> f64 {
    let dm = DMatrix::from_row_slice(m.rows(), m.cols(), m.entries());
    dm.singular_values().max()
}

/// Operator 2-norm of the circular convolution with `w` on the given grid:
/// the largest singular value over all frequency blocks.
pub fn spectral_norm_conv<T: Real>(w: &KernelWeights<T>, spatial_dims: (usize, usize)) -> Result<f64> {
    let plan = Fft2::<f64>::new(spatial_dims.0, spatial_dims.1)?;
    let op = kernel_spectrum(&w.values.cast::<f64>(), &plan)?;
    let half = HalfSpectrum::new(spatial_dims.0, spatial_dims.1);
    Ok(half
        .representatives()
        .iter()
        .map(|&f| largest_singular_value(op.block(f)))
        .fold(0.0, f64::max))
}

/// Largest singular value of a real matrix `[rows, cols]`, from the
/// eigenvalues of the smaller Gram matrix.
pub fn dense_spectral_norm<T: Real>(weight: &Tensor<T>) -> Result<f64> {
    let &[rows, cols] = weight.shape() else {
        return Err(Error::InvalidShape(format!("expected a matrix, got {:?}", weight.shape())));
    };
    let m = DMatrix::from_row_slice(rows, cols, &weight.data().iter().map(|&v| Real::to_f64(v)).collect::<Vec<_>>());
    let gram = if rows <= cols { &m * m.transpose() } else { m.transpose() * &m };
    let top = gram.symmetric_eigenvalues().max();
    Ok(top.max(0.0).sqrt())
}

/// Known Lipschitz bound of one layer.
pub fn layer_bound<T: Real>(layer: &Layer<T>) -> Result<f64> {
    match layer {
        Layer::PlainConv(c) => spectral_norm_conv(&c.weights, c.spatial_dims()),
        Layer::OrthoConv(c) => {
            // Orthogonal up to rounding; measure it rather than assume 1.
            let op = c.operator().freq_op.cast::<f64>();
            let half = HalfSpectrum::new(op.spatial_dims().0, op.spatial_dims().1);
            Ok(half
                .representatives()
                .iter()
                .map(|&f| largest_singular_value(op.block(f)))
                .fold(0.0, f64::max))
        }
        Layer::Dense(d) => dense_spectral_norm(&d.weight),
        Layer::Relu | Layer::GroupSort => Ok(1.0),
        Layer::AvgPool(p) => Ok(1.0 / p.factor as f64),
    }
}

/// Product of per-layer bounds.
pub fn stack_upper_bound<T: Real>(layers: &[Layer<T>]) -> Result<f64> {
    let mut product = 1.0;
    for (index, layer) in layers.iter().enumerate() {
        let finite = layer.params().iter().all(|p| p.is_finite());
        let b = if finite { layer_bound(layer)? } else { f64::NAN };
        if !b.is_finite() {
            return Err(Error::UnboundedLayer {
                index,
                kind: layer.kind().to_string(),
            });
        }
        product *= b;
    }
    Ok(product)
}

pub fn lipschitz_upper_bound<T: Real>(f: &DynamicsField<T>) -> Result<f64> {
    stack_upper_bound(&f.layers)
}

fn pair_distance<T: Real>(index: usize, a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    let d = Real::to_f64(a.sub(b)?.norm2());
    if !(d >= MIN_PAIR_DISTANCE) {
        return Err(Error::DegeneratePair { index, distance: d });
    }
    Ok(d)
}

/// Largest observed `‖f(x) − f(x′)‖ / ‖x − x′‖` over the pairs.
pub fn empirical_lipschitz<T: Real>(
    f: impl Fn(&Tensor<T>) -> Result<Tensor<T>>,
    pairs: &[(Tensor<T>, Tensor<T>)],
) -> Result<f64> {
    let mut best: f64 = 0.0;
    for (i, (a, b)) in pairs.iter().enumerate() {
        let d = pair_distance(i, a, b)?;
        let out = Real::to_f64(f(a)?.sub(&f(b)?)?.norm2());
        best = best.max(out / d);
    }
    Ok(best)
}

pub fn lipschitz_estimate<T: Real>(f: &DynamicsField<T>, pairs: &[(Tensor<T>, Tensor<T>)]) -> Result<LipschitzEstimate> {
    Ok(LipschitzEstimate {
        upper: lipschitz_upper_bound(f)?,
        lower: empirical_lipschitz(|x| f.eval(T::zero(), x), pairs)?,
        samples_used: pairs.len(),
    })
}

/// Integrates every pair in one batch and returns per-pair gap series
/// `(t, ‖z_b(t) − z_a(t)‖)`.
fn gap_series<T: Real, F: VectorField<T> + ?Sized>(
    f: &F,
    cfg: &SolverConfig,
    pairs: &[(Tensor<T>, Tensor<T>)],
) -> Result<Vec<Vec<(f64, f64)>>> {
    let mut parts: Vec<&Tensor<T>> = pairs.iter().map(|(a, _)| a).collect();
    parts.extend(pairs.iter().map(|(_, b)| b));
    let traj: Trajectory<T> = integrate(f, &Tensor::concat(&parts)?, cfg)?;
    let sizes: Vec<usize> = pairs.iter().map(|(a, _)| a.batch()).collect();
    let total: usize = sizes.iter().sum();
    let mut series = vec![Vec::with_capacity(traj.len()); pairs.len()];
    for (t, z) in traj.times.iter().zip(&traj.states) {
        let n = z.sample_len();
        let mut offset = 0;
        for (p, &size) in sizes.iter().enumerate() {
            let a = &z.data()[offset * n..(offset + size) * n];
            let b = &z.data()[(total + offset) * n..(total + offset + size) * n];
            let gap = a
                .iter()
                .zip(b)
                .map(|(&x, &y)| (Real::to_f64(x) - Real::to_f64(y)).powi(2))
                .sum::<f64>()
                .sqrt();
            series[p].push((Real::to_f64(*t), gap));
            offset += size;
        }
    }
    Ok(series)
}

fn check_pairs<T: Real>(pairs: &[(Tensor<T>, Tensor<T>)]) -> Result<Vec<f64>> {
    if pairs.is_empty() {
        return Err(Error::InvalidConfig("at least one input pair is required".into()));
    }
    pairs.iter().enumerate().map(|(i, (a, b))| pair_distance(i, a, b)).collect()
}

pub fn gronwall_certify<T: Real, F: VectorField<T> + ?Sized>(
    f: &F,
    cfg: &SolverConfig,
    pairs: &[(Tensor<T>, Tensor<T>)],
    c: f64,
) -> Result<GronwallReport> {
    let d0 = check_pairs(pairs)?;
    let t0 = T::lit(cfg.t0);
    let empirical_lower = empirical_lipschitz(|x| f.eval(t0, x), pairs)?;
    let series = gap_series(f, cfg, pairs)?;
    let mut max_ratio: f64 = 0.0;
    for (gaps, &d) in series.iter().zip(&d0) {
        for &(t, gap) in gaps {
            max_ratio = max_ratio.max(gap / (d * (c * (t - cfg.t0)).exp()));
        }
    }
    Ok(GronwallReport {
        pairs_tested: pairs.len(),
        max_ratio,
        violated: max_ratio > 1.0 + GRONWALL_TOLERANCE,
        c_used: c,
        tolerance: GRONWALL_TOLERANCE,
        empirical_lower,
        c_below_empirical: c < empirical_lower,
    })
}

/// Least-squares slope of `log ‖δz(t)‖` against `t`, with one intercept per
/// pair; `rho_estimate` is minus that slope.
pub fn contraction_rate<T: Real, F: VectorField<T> + ?Sized>(
    f: &F,
    cfg: &SolverConfig,
    pairs: &[(Tensor<T>, Tensor<T>)],
) -> Result<ContractionReport> {
    check_pairs(pairs)?;
    let series = gap_series(f, cfg, pairs)?;
    let centered: Vec<Vec<(f64, f64)>> = series
        .iter()
        .map(|s| {
            let pts: Vec<(f64, f64)> = s.iter().filter(|(_, g)| *g > 0.0).map(|&(t, g)| (t, g.ln())).collect();
            let n = pts.len().max(1) as f64;
            let (mt, my) = pts.iter().fold((0.0, 0.0), |(a, b), (t, y)| (a + t / n, b + y / n));
            pts.into_iter().map(|(t, y)| (t - mt, y - my)).collect()
        })
        .collect();
    let (sxy, sxx) = centered
        .iter()
        .flatten()
        .fold((0.0, 0.0), |(a, b), (t, y)| (a + t * y, b + t * t));
    let points: usize = centered.iter().map(Vec::len).sum();
    if sxx <= 0.0 {
        return Err(Error::InvalidConfig("contraction fit needs at least two recorded times".into()));
    }
    let slope = sxy / sxx;
    let sse: f64 = centered.iter().flatten().map(|(t, y)| (y - slope * t).powi(2)).sum();
    let fit_residual = (sse / points as f64).sqrt();
    let rho = -slope;
    Ok(ContractionReport {
        rho_estimate: rho,
        contractive: rho > RHO_MIN && fit_residual < FIT_RESIDUAL_MAX,
        fit_residual,
        pairs_used: pairs.len(),
        points_used: points,
    })
}
