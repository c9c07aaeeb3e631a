use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::numerics::{Real, Tensor};

use super::{integrate, SolverConfig, VectorField};

/// Distance below which two recorded trajectories count as merged.
pub const MERGE_THRESHOLD: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory<T> {
    pub times: Vec<T>,
    pub states: Vec<Tensor<T>>,
}

impl<T: Real> Trajectory<T> {
    pub fn final_state(&self) -> &Tensor<T> {
        self.states.last().expect("trajectory holds the initial state")
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Writes `time,norm[,s0,s1,...]`, one row per recorded time. The norm
    /// is taken over the whole flattened state.
    pub fn write_csv<W: Write>(&self, out: W, full_state: bool) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut head = vec!["time".to_string(), "norm".to_string()];
        if full_state {
            let n = self.states.first().map_or(0, Tensor::len);
            head.extend((0..n).map(|i| format!("s{i}")));
        }
        w.write_record(&head).map_err(csv_error)?;
        for (t, z) in self.times.iter().zip(&self.states) {
            let mut row = vec![Real::to_f64(*t).to_string(), Real::to_f64(z.norm2()).to_string()];
            if full_state {
                row.extend(z.data().iter().map(|v| Real::to_f64(*v).to_string()));
            }
            w.write_record(&row).map_err(csv_error)?;
        }
        w.flush().map_err(|e| Error::io("<csv>", e))
    }
}

pub(crate) fn csv_error(e: csv::Error) -> Error {
    Error::InvalidConfig(format!("csv output failed: {e}"))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct IntersectionReport {
    pub min_distance: f64,
    pub time_of_min: f64,
    pub initial_distance: f64,
    pub threshold: f64,
    pub merged: bool,
}

/// Integrates both initial states together (as a batch of two) and reports
/// the smallest recorded separation.
pub fn non_intersection_check<T: Real, F: VectorField<T> + ?Sized>(
    f: &F,
    z0_a: &Tensor<T>,
    z0_b: &Tensor<T>,
    cfg: &SolverConfig,
) -> Result<IntersectionReport> {
    if z0_a.shape() != z0_b.shape() {
        return Err(Error::ShapeMismatch {
            expected: z0_a.shape().to_vec(),
            found: z0_b.shape().to_vec(),
        });
    }
    let batch = z0_a.batch();
    let traj = integrate(f, &Tensor::concat(&[z0_a, z0_b])?, cfg)?;
    let mut best = (f64::INFINITY, cfg.t0);
    for (t, z) in traj.times.iter().zip(&traj.states) {
        let (a, b) = z.split_at(batch);
        let d = Real::to_f64(a.sub(&b)?.norm2());
        if d < best.0 {
            best = (d, Real::to_f64(*t));
        }
    }
    Ok(IntersectionReport {
        min_distance: best.0,
        time_of_min: best.1,
        initial_distance: Real::to_f64(z0_a.sub(z0_b)?.norm2()),
        threshold: MERGE_THRESHOLD,
        merged: best.0 < MERGE_THRESHOLD,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::odeint::{FnField, Method};

    #[test]
    fn contractive_field_shrinks_gap_by_e() {
        let f = FnField(|_t: f64, z: &Tensor<f64>| Ok(z.scale(-1.0)));
        let a = Tensor::new(vec![1, 2], vec![1.0, 2.0]).unwrap();
        let b = Tensor::new(vec![1, 2], vec![1.3, 1.6]).unwrap();
        let rep = non_intersection_check(&f, &a, &b, &SolverConfig::default()).unwrap();
        assert!((rep.min_distance - 0.5 * (-1.0f64).exp()).abs() < 1e-4);
        assert_eq!(rep.time_of_min, 1.0);
        assert!(!rep.merged);
    }

    #[test]
    fn zero_field_keeps_initial_gap() {
        let f = FnField(|_t: f64, z: &Tensor<f64>| Ok(z.scale(0.0)));
        let a = Tensor::new(vec![1, 1], vec![0.0]).unwrap();
        let b = Tensor::new(vec![1, 1], vec![0.75]).unwrap();
        let rep = non_intersection_check(&f, &a, &b, &SolverConfig::fixed(Method::Euler, 3)).unwrap();
        assert_eq!(rep.min_distance, 0.75);
    }

    #[test]
    fn csv_has_one_row_per_time() {
        let f = FnField(|_t: f64, z: &Tensor<f64>| Ok(z.scale(1.0)));
        let z0 = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
        let traj = integrate(&f, &z0, &SolverConfig::fixed(Method::Euler, 2)).unwrap();
        let mut buf = Vec::new();
        traj.write_csv(&mut buf, true).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "time,norm,s0,s1");
        assert_eq!(lines[1], "0,5,3,4");
        assert_eq!(lines.len(), 4);
    }
}
