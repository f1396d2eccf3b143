//! Arc-length parameterized cubic-spline reference paths with closest-point
//! projection and the contouring/lag error frame used by planner and tracker.

use serde::{Deserialize, Serialize};

use crate::spline::CubicSpline;
use crate::{Error, Result, Vec2};

/// Centerline sample point [m].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    pub x: f64,
    pub y: f64,
}

impl Waypoint {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Local path frame at progress `s`.
#[derive(Debug, Clone, Copy)]
pub struct PathFrame {
    pub position: Vec2,
    /// Unit tangent.
    pub tangent: Vec2,
    /// Unit left normal (tangent rotated +90 degrees).
    pub normal: Vec2,
    /// Signed curvature [1/m]; positive bends toward the left normal.
    pub curvature: f64,
    /// Progress after clamping [m].
    pub s: f64,
    /// Set when the query fell outside `[0, total_length]`.
    pub clamped: bool,
}

/// Result of a closest-point projection.
#[derive(Debug, Clone, Copy)]
pub struct Projection {
    pub s: f64,
    /// Set when Newton and the grid fallback both failed to converge; the
    /// returned value is the best grid sample.
    pub degraded: bool,
}

/// Reference centerline as a pair of cubic splines `x(s), y(s)` indexed by
/// arc length. Immutable after construction and safe to share across
/// concurrent planners.
#[derive(Debug, Clone)]
pub struct ReferencePath {
    x: CubicSpline,
    y: CubicSpline,
    total_length: f64,
}

/// 5-node Gauss-Legendre quadrature nodes/weights on [-1, 1].
const GL_NODES: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683_1,
    0.0,
    0.538_469_310_105_683_1,
    0.906_179_845_938_664,
];
const GL_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189_08,
    0.478_628_670_499_366_47,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_47,
    0.236_926_885_056_189_08,
];

fn segment_length(x: &CubicSpline, y: &CubicSpline, a: f64, b: f64) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    GL_NODES
        .iter()
        .zip(GL_WEIGHTS.iter())
        .map(|(&n, &w)| {
            let u = mid + half * n;
            w * x.derivative(u).hypot(y.derivative(u))
        })
        .sum::<f64>()
        * half
}

impl ReferencePath {
    /// Fit a C2 spline through the waypoints and reparameterize it so the
    /// knot parameter is arc length (quadrature pass plus one refit).
    pub fn fit(waypoints: &[Waypoint]) -> Result<Self> {
        if waypoints.len() < 2 {
            return Err(Error::InvalidInput(format!(
                "reference path needs at least 2 waypoints, got {}",
                waypoints.len()
            )));
        }
        for (i, w) in waypoints.iter().enumerate() {
            if !w.x.is_finite() || !w.y.is_finite() {
                return Err(Error::InvalidInput(format!(
                    "non-finite waypoint at index {i}"
                )));
            }
            if i > 0 {
                let prev = waypoints[i - 1];
                let d = (w.x - prev.x).hypot(w.y - prev.y);
                if d <= 1e-9 {
                    return Err(Error::InvalidInput(format!(
                        "coincident consecutive waypoints at indices {} and {i}",
                        i - 1
                    )));
                }
            }
        }

        // First pass: chord-length parameterization.
        let xs: Vec<f64> = waypoints.iter().map(|w| w.x).collect();
        let ys: Vec<f64> = waypoints.iter().map(|w| w.y).collect();
        let mut u = vec![0.0];
        for i in 1..waypoints.len() {
            let d = (xs[i] - xs[i - 1]).hypot(ys[i] - ys[i - 1]);
            u.push(u[i - 1] + d);
        }
        let x0 = CubicSpline::natural(&u, &xs)?;
        let y0 = CubicSpline::natural(&u, &ys)?;

        // Arc length of each chord segment, then refit on the arc-length grid.
        let mut s = vec![0.0];
        for i in 1..u.len() {
            s.push(s[i - 1] + segment_length(&x0, &y0, u[i - 1], u[i]));
        }
        let x = CubicSpline::natural(&s, &xs)?;
        let y = CubicSpline::natural(&s, &ys)?;
        let total_length = *s.last().unwrap();
        Ok(Self { x, y, total_length })
    }

    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    /// Arc-length knots of the fitted segments.
    pub fn knots(&self) -> &[f64] {
        self.x.knots()
    }

    pub fn position(&self, s: f64) -> Vec2 {
        Vec2::new(self.x.value(s), self.y.value(s))
    }

    /// First and second spline derivatives with respect to the path
    /// parameter (close to, but not exactly, unit speed).
    pub fn derivatives(&self, s: f64) -> (Vec2, Vec2) {
        (
            Vec2::new(self.x.derivative(s), self.y.derivative(s)),
            Vec2::new(self.x.second_derivative(s), self.y.second_derivative(s)),
        )
    }

    /// Tangent heading [rad] at `s`.
    pub fn heading(&self, s: f64) -> f64 {
        let (d1, _) = self.derivatives(s);
        d1.y.atan2(d1.x)
    }

    /// Position/tangent/normal/curvature frame at `s`, clamping out-of-domain
    /// queries to the nearest endpoint.
    pub fn frame(&self, s: f64) -> Result<PathFrame> {
        if !s.is_finite() {
            return Err(Error::InvalidInput(format!("non-finite path parameter {s}")));
        }
        let clamped = s < 0.0 || s > self.total_length;
        let sc = s.clamp(0.0, self.total_length);
        let (d1, d2) = self.derivatives(sc);
        let speed = d1.norm();
        let tangent = d1 / speed;
        let normal = Vec2::new(-tangent.y, tangent.x);
        let curvature = (d1.x * d2.y - d1.y * d2.x) / speed.powi(3);
        Ok(PathFrame {
            position: self.position(sc),
            tangent,
            normal,
            curvature,
            s: sc,
            clamped,
        })
    }

    fn distance_gradient(&self, point: Vec2, s: f64) -> (f64, f64) {
        let r = self.position(s) - point;
        let (d1, d2) = self.derivatives(s);
        (r.dot(&d1), d1.dot(&d1) + r.dot(&d2))
    }

    fn newton_project(&self, point: Vec2, s0: f64) -> Option<f64> {
        let mut s = s0.clamp(0.0, self.total_length);
        for _ in 0..50 {
            let (g, h) = self.distance_gradient(point, s);
            if h <= 1e-12 {
                return None;
            }
            let next = (s - g / h).clamp(0.0, self.total_length);
            if (next - s).abs() < 1e-7 {
                // Either an interior stationary point or pinned at a boundary.
                let (g2, _) = self.distance_gradient(point, next);
                let at_lower = next <= 0.0 && g2 >= 0.0;
                let at_upper = next >= self.total_length && g2 <= 0.0;
                if g2.abs() < 1e-6 || at_lower || at_upper {
                    return Some(next);
                }
                return None;
            }
            s = next;
        }
        None
    }

    /// Closest-point progress for `point`, seeded at `s_guess`. Newton with a
    /// 200-sample grid fallback.
    pub fn project(&self, point: Vec2, s_guess: f64) -> Projection {
        assert!(
            point.x.is_finite() && point.y.is_finite(),
            "projection of non-finite point"
        );
        if let Some(s) = self.newton_project(point, s_guess) {
            return Projection { s, degraded: false };
        }
        // Coarse grid, then polish.
        let n = 200;
        let mut best_s = 0.0;
        let mut best_d = f64::INFINITY;
        for i in 0..=n {
            let s = self.total_length * i as f64 / n as f64;
            let d = (self.position(s) - point).norm_squared();
            if d < best_d {
                best_d = d;
                best_s = s;
            }
        }
        match self.newton_project(point, best_s) {
            Some(s) => Projection { s, degraded: false },
            None => Projection {
                s: best_s,
                degraded: true,
            },
        }
    }

    /// Contouring (lateral) and lag (longitudinal) errors of `position`
    /// relative to the frame at `s`.
    pub fn contouring_errors(&self, position: Vec2, s: f64) -> Result<(f64, f64)> {
        let frame = self.frame(s)?;
        let r = position - frame.position;
        Ok((frame.normal.dot(&r), frame.tangent.dot(&r)))
    }
}
