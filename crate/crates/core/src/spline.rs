//! Natural cubic spline interpolation over an arbitrary strictly increasing
//! knot grid. Building block for reference paths and guidance smoothing.

use crate::{Error, Result};

/// One-dimensional natural cubic spline (zero second derivative at both
/// ends), interpolating `(t_i, y_i)` exactly at the knots.
#[derive(Debug, Clone)]
pub struct CubicSpline {
    knots: Vec<f64>,
    /// Per-segment coefficients `a + b dx + c dx^2 + d dx^3`, `dx = t - t_i`.
    coeffs: Vec<[f64; 4]>,
}

impl CubicSpline {
    /// Fit a natural cubic spline through `(ts[i], ys[i])`.
    pub fn natural(ts: &[f64], ys: &[f64]) -> Result<Self> {
        if ts.len() != ys.len() {
            return Err(Error::InvalidInput(format!(
                "knot/value length mismatch: {} vs {}",
                ts.len(),
                ys.len()
            )));
        }
        if ts.len() < 2 {
            return Err(Error::InvalidInput(
                "spline needs at least 2 knots".to_string(),
            ));
        }
        if ts.iter().any(|t| !t.is_finite()) || ys.iter().any(|y| !y.is_finite()) {
            return Err(Error::InvalidInput("non-finite spline data".to_string()));
        }
        let n = ts.len();
        let mut h = Vec::with_capacity(n - 1);
        for i in 0..n - 1 {
            let dt = ts[i + 1] - ts[i];
            if dt <= 0.0 {
                return Err(Error::InvalidInput(format!(
                    "knots not strictly increasing at index {i}: {} -> {}",
                    ts[i],
                    ts[i + 1]
                )));
            }
            h.push(dt);
        }

        // Second derivatives m[i] from the natural-spline tridiagonal system,
        // solved by the Thomas algorithm.
        let mut m = vec![0.0; n];
        if n > 2 {
            let dim = n - 2;
            let mut diag = vec![0.0; dim];
            let mut rhs = vec![0.0; dim];
            let mut upper = vec![0.0; dim];
            for i in 1..n - 1 {
                diag[i - 1] = 2.0 * (h[i - 1] + h[i]);
                upper[i - 1] = h[i];
                rhs[i - 1] = 6.0 * ((ys[i + 1] - ys[i]) / h[i] - (ys[i] - ys[i - 1]) / h[i - 1]);
            }
            // Forward sweep; the lower diagonal is h[i-1].
            for i in 1..dim {
                let w = h[i] / diag[i - 1];
                diag[i] -= w * upper[i - 1];
                rhs[i] -= w * rhs[i - 1];
            }
            m[dim] = rhs[dim - 1] / diag[dim - 1];
            for i in (1..dim).rev() {
                m[i] = (rhs[i - 1] - upper[i - 1] * m[i + 1]) / diag[i - 1];
            }
        }

        let mut coeffs = Vec::with_capacity(n - 1);
        for i in 0..n - 1 {
            let a = ys[i];
            let c = m[i] / 2.0;
            let d = (m[i + 1] - m[i]) / (6.0 * h[i]);
            let b = (ys[i + 1] - ys[i]) / h[i] - h[i] * (2.0 * m[i] + m[i + 1]) / 6.0;
            coeffs.push([a, b, c, d]);
        }
        Ok(Self {
            knots: ts.to_vec(),
            coeffs,
        })
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn domain(&self) -> (f64, f64) {
        (self.knots[0], *self.knots.last().unwrap())
    }

    /// Segment index whose polynomial covers `t`; boundary polynomials
    /// extrapolate outside the domain.
    fn segment(&self, t: f64) -> usize {
        match self
            .knots
            .binary_search_by(|k| k.partial_cmp(&t).expect("finite knot"))
        {
            Ok(i) => i.min(self.coeffs.len() - 1),
            Err(0) => 0,
            Err(i) => (i - 1).min(self.coeffs.len() - 1),
        }
    }

    pub fn value(&self, t: f64) -> f64 {
        let i = self.segment(t);
        let dx = t - self.knots[i];
        let [a, b, c, d] = self.coeffs[i];
        a + dx * (b + dx * (c + dx * d))
    }

    pub fn derivative(&self, t: f64) -> f64 {
        let i = self.segment(t);
        let dx = t - self.knots[i];
        let [_, b, c, d] = self.coeffs[i];
        b + dx * (2.0 * c + dx * 3.0 * d)
    }

    pub fn second_derivative(&self, t: f64) -> f64 {
        let i = self.segment(t);
        let dx = t - self.knots[i];
        let [_, _, c, d] = self.coeffs[i];
        2.0 * c + 6.0 * d * dx
    }
}
