//! Explicit Runge-Kutta integrators used as references and for the
//! reconstruction steps that are allowed to integrate directly.

use nalgebra::DVector;

use crate::error::{Error, Result};

pub fn rk4_step<F>(f: &F, t: f64, y: &DVector<f64>, h: f64) -> DVector<f64>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let k1 = f(t, y);
    let k2 = f(t + 0.5 * h, &(y + &k1 * (0.5 * h)));
    let k3 = f(t + 0.5 * h, &(y + &k2 * (0.5 * h)));
    let k4 = f(t + h, &(y + &k3 * h));
    y + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
}

/// Fixed-step RK4 reporting at each grid time, with `substeps` steps per interval.
pub fn rk4<F>(f: F, y0: &DVector<f64>, grid: &[f64], substeps: usize) -> Vec<DVector<f64>>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    let mut out = vec![y0.clone()];
    let mut y = y0.clone();
    for w in grid.windows(2) {
        let h = (w[1] - w[0]) / substeps as f64;
        for k in 0..substeps {
            y = rk4_step(&f, w[0] + k as f64 * h, &y, h);
        }
        out.push(y.clone());
    }
    out
}

/// Adaptive Dormand-Prince 5(4) reporting at each grid time.
pub fn dopri45<F>(f: F, y0: &DVector<f64>, grid: &[f64], rtol: f64, atol: f64) -> Result<Vec<DVector<f64>>>
where
    F: Fn(f64, &DVector<f64>) -> DVector<f64>,
{
    const C: [f64; 7] = [0.0, 1.0 / 5.0, 3.0 / 10.0, 4.0 / 5.0, 8.0 / 9.0, 1.0, 1.0];
    const A: [[f64; 6]; 7] = [
        [0.0; 6],
        [1.0 / 5.0, 0.0, 0.0, 0.0, 0.0, 0.0],
        [3.0 / 40.0, 9.0 / 40.0, 0.0, 0.0, 0.0, 0.0],
        [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0, 0.0, 0.0, 0.0],
        [19372.0 / 6561.0, -25360.0 / 2187.0, 64448.0 / 6561.0, -212.0 / 729.0, 0.0, 0.0],
        [9017.0 / 3168.0, -355.0 / 33.0, 46732.0 / 5247.0, 49.0 / 176.0, -5103.0 / 18656.0, 0.0],
        [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0],
    ];
    const B: [f64; 7] = [35.0 / 384.0, 0.0, 500.0 / 1113.0, 125.0 / 192.0, -2187.0 / 6784.0, 11.0 / 84.0, 0.0];
    const E: [f64; 7] = [
        71.0 / 57600.0,
        0.0,
        -71.0 / 16695.0,
        71.0 / 1920.0,
        -17253.0 / 339200.0,
        22.0 / 525.0,
        -1.0 / 40.0,
    ];
    let mut out = vec![y0.clone()];
    let mut y = y0.clone();
    let mut t = grid[0];
    let mut h = grid.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min).min(1e-2);
    for &t_next in &grid[1..] {
        while t < t_next {
            let last = t + h >= t_next;
            let step = if last { t_next - t } else { h };
            let mut k: Vec<DVector<f64>> = Vec::with_capacity(7);
            for s in 0..7 {
                let mut ys = y.clone();
                for (j, kj) in k.iter().enumerate() {
                    if A[s][j] != 0.0 {
                        ys += kj * (step * A[s][j]);
                    }
                }
                k.push(f(t + C[s] * step, &ys));
            }
            let mut y_new = y.clone();
            let mut err = DVector::zeros(y.len());
            for s in 0..7 {
                y_new += &k[s] * (step * B[s]);
                err += &k[s] * (step * E[s]);
            }
            let en = err
                .iter()
                .zip(y.iter().zip(y_new.iter()))
                .map(|(e, (a, b))| (e / (atol + rtol * a.abs().max(b.abs()))).abs())
                .fold(0.0f64, f64::max);
            if !en.is_finite() {
                return Err(Error::Invalid("non-finite state in reference integrator".into()));
            }
            if en <= 1.0 {
                t = if last { t_next } else { t + step };
                y = y_new;
            }
            let factor = if en == 0.0 { 5.0 } else { (0.9 * en.powf(-0.2)).clamp(0.2, 5.0) };
            h = step * factor;
            if h < 1e-14 {
                return Err(Error::Invalid("reference integrator step underflow".into()));
            }
        }
        out.push(y.clone());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn harmonic_oscillator() {
        let f = |_t: f64, y: &DVector<f64>| DVector::from_vec(vec![y[1], -y[0]]);
        let grid: Vec<f64> = (0..=20).map(|i| i as f64 * 0.5).collect();
        let y0 = DVector::from_vec(vec![1.0, 0.0]);
        let ref45 = dopri45(f, &y0, &grid, 1e-10, 1e-10).unwrap();
        let r4 = rk4(f, &y0, &grid, 200);
        for (i, &t) in grid.iter().enumerate() {
            assert!((ref45[i][0] - t.cos()).abs() < 1e-8);
            assert!((r4[i][0] - t.cos()).abs() < 1e-8);
        }
    }
}
