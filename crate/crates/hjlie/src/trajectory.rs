//! Time-stamped phase-space samples with per-row diagnostics.

use nalgebra::DVector;

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrajectorySample {
    pub state_labels: Vec<String>,
    pub diagnostic_labels: Vec<String>,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub diagnostics: Vec<Vec<f64>>,
    /// Set when the run stopped early; rows up to the failure are kept.
    pub failure: Option<String>,
    pub notes: Vec<String>,
}

impl TrajectorySample {
    pub fn new(state_labels: Vec<String>) -> Self {
        TrajectorySample { state_labels, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn push(&mut self, t: f64, state: Vec<f64>) {
        self.times.push(t);
        self.states.push(state);
        self.diagnostics.push(vec![f64::NAN; self.diagnostic_labels.len()]);
    }

    /// Adds (or replaces) a diagnostic column.
    pub fn set_diagnostic(&mut self, label: &str, values: &[f64]) {
        assert_eq!(values.len(), self.len());
        let col = match self.diagnostic_labels.iter().position(|l| l == label) {
            Some(c) => c,
            None => {
                self.diagnostic_labels.push(label.to_string());
                for row in &mut self.diagnostics {
                    row.push(f64::NAN);
                }
                self.diagnostic_labels.len() - 1
            }
        };
        for (row, v) in self.diagnostics.iter_mut().zip(values) {
            row[col] = *v;
        }
    }

    pub fn diagnostic(&self, label: &str) -> Option<Vec<f64>> {
        let col = self.diagnostic_labels.iter().position(|l| l == label)?;
        Some(self.diagnostics.iter().map(|r| r[col]).collect())
    }

    /// Max over the finite entries of a diagnostic column (0 when absent or empty).
    pub fn max_diagnostic(&self, label: &str) -> f64 {
        self.diagnostic(label)
            .map(|v| v.into_iter().filter(|x| x.is_finite()).fold(0.0, f64::max))
            .unwrap_or(0.0)
    }

    pub fn state(&self, i: usize) -> DVector<f64> {
        DVector::from_column_slice(&self.states[i])
    }
}

/// Finite-difference weights for the first derivative at `x0` over `xs` (Fornberg).
pub fn derivative_weights(x0: f64, xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut c = vec![vec![0.0; 2]; n];
    let mut c1 = 1.0;
    let mut c4 = xs[0] - x0;
    c[0][0] = 1.0;
    for i in 1..n {
        let mut c2 = 1.0;
        let c5 = c4;
        c4 = xs[i] - x0;
        for j in 0..i {
            let c3 = xs[i] - xs[j];
            c2 *= c3;
            if j == i - 1 {
                c[i][1] = c1 * (c[i - 1][0] - c5 * c[i - 1][1]) / c2;
                c[i][0] = -c1 * c5 * c[i - 1][0] / c2;
            }
            c[j][1] = (c4 * c[j][1] - c[j][0]) / c3;
            c[j][0] = c4 * c[j][0] / c3;
        }
        c1 = c2;
    }
    c.into_iter().map(|w| w[1]).collect()
}

/// Derivative of sampled values: centered five-point stencil where two
/// neighbours exist on each side, one-sided four-point otherwise.
/// The flag marks interior (centered) rows.
pub fn stencil_derivative(times: &[f64], values: &[DVector<f64>]) -> Vec<(DVector<f64>, bool)> {
    let n = times.len();
    (0..n)
        .map(|i| {
            let (lo, hi, interior) = if n < 4 {
                (0, n, false)
            } else if i >= 2 && i + 2 < n {
                (i - 2, i + 3, true)
            } else if i < 2 {
                (0, 4, false)
            } else {
                (n - 4, n, false)
            };
            let w = derivative_weights(times[i], &times[lo..hi]);
            let mut d = DVector::zeros(values[i].len());
            for (k, wk) in w.iter().enumerate() {
                d += &values[lo + k] * *wk;
            }
            (d, interior)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn centered_weights_match_textbook() {
        let w = derivative_weights(0.0, &[-2.0, -1.0, 0.0, 1.0, 2.0]);
        let expect = [1.0 / 12.0, -8.0 / 12.0, 0.0, 8.0 / 12.0, -1.0 / 12.0];
        for (a, b) in w.iter().zip(expect) {
            assert!((a - b).abs() < 1e-14);
        }
    }

    #[test]
    fn stencil_differentiates_sine() {
        let times: Vec<f64> = (0..=64).map(|i| i as f64 / 64.0).collect();
        let vals: Vec<_> = times.iter().map(|t| DVector::from_vec(vec![t.sin()])).collect();
        for (i, (d, interior)) in stencil_derivative(&times, &vals).iter().enumerate() {
            let tol = if *interior { 1e-8 } else { 1e-6 };
            assert!((d[0] - times[i].cos()).abs() < tol);
        }
    }

    #[test]
    fn diagnostics_columns() {
        let mut s = TrajectorySample::new(vec!["x".into()]);
        s.push(0.0, vec![1.0]);
        s.push(1.0, vec![2.0]);
        s.set_diagnostic("r", &[1e-3, f64::NAN]);
        assert_eq!(s.max_diagnostic("r"), 1e-3);
        assert_eq!(s.max_diagnostic("missing"), 0.0);
    }
}
