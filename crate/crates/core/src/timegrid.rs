//! Discretisations of `[0, T]` and the interpolations that extend discrete
//! paths to continuous time.

use crate::error::{invalid, shape, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GridKind {
    Uniform,
    /// Chebyshev-Lobatto nodes mapped to `[0, T]`.
    Chebyshev,
}

/// Ordered time points `t_0 = 0 < ... < t_N = T`.
#[derive(Debug, Clone, PartialEq)]
pub struct TimeGrid {
    horizon: f64,
    points: Vec<f64>,
    kind: GridKind,
}

impl TimeGrid {
    /// `N + 1` equally spaced points with `Δt = T/N`.
    pub fn uniform(horizon: f64, steps: usize) -> Result<Self> {
        check_horizon(horizon)?;
        if steps == 0 {
            return Err(invalid("uniform grid needs at least one step"));
        }
        let dt = horizon / steps as f64;
        let mut points: Vec<f64> = (0..=steps).map(|n| n as f64 * dt).collect();
        points[steps] = horizon;
        Ok(TimeGrid {
            horizon,
            points,
            kind: GridKind::Uniform,
        })
    }

    /// Chebyshev-Lobatto nodes `T/2 (1 - cos(kπ/N))`, k = 0..N.
    ///
    /// The first half is computed directly and mirrored so the grid is
    /// exactly symmetric about `T/2`.
    pub fn chebyshev(horizon: f64, steps: usize) -> Result<Self> {
        check_horizon(horizon)?;
        if steps < 2 {
            return Err(invalid("chebyshev grid needs at least two steps"));
        }
        let n = steps;
        let mut points = vec![0.0; n + 1];
        for k in 0..=n / 2 {
            let c = (k as f64 * std::f64::consts::PI / n as f64).cos();
            let t = 0.5 * horizon * (1.0 - c);
            points[k] = t;
            points[n - k] = horizon - t;
        }
        points[0] = 0.0;
        points[n] = horizon;
        if n % 2 == 0 {
            points[n / 2] = 0.5 * horizon;
        }
        Ok(TimeGrid {
            horizon,
            points,
            kind: GridKind::Chebyshev,
        })
    }

    /// Grid from explicit points; must start at 0 and increase strictly.
    pub fn from_points(points: Vec<f64>) -> Result<Self> {
        if points.len() < 2 {
            return Err(invalid("grid needs at least two points"));
        }
        if points[0] != 0.0 {
            return Err(invalid("grid must start at 0"));
        }
        if points.windows(2).any(|w| !(w[1] > w[0])) || points.iter().any(|p| !p.is_finite()) {
            return Err(invalid("grid points must be finite and strictly increasing"));
        }
        let horizon = *points.last().unwrap();
        Ok(TimeGrid {
            horizon,
            points,
            kind: GridKind::Uniform,
        }
        .classify())
    }

    fn classify(mut self) -> Self {
        let n = self.steps();
        let dt = self.horizon / n as f64;
        let uniform = self
            .points
            .iter()
            .enumerate()
            .all(|(i, &t)| (t - i as f64 * dt).abs() <= 1e-12 * self.horizon);
        self.kind = if uniform {
            GridKind::Uniform
        } else {
            GridKind::Chebyshev
        };
        self
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn kind(&self) -> GridKind {
        self.kind
    }

    /// Number of steps `N`.
    pub fn steps(&self) -> usize {
        self.points.len() - 1
    }

    pub fn time(&self, n: usize) -> f64 {
        self.points[n]
    }

    /// Local step `t_{n+1} - t_n`.
    pub fn step(&self, n: usize) -> f64 {
        self.points[n + 1] - self.points[n]
    }

    pub fn step_sizes(&self) -> Vec<f64> {
        self.points.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn max_step(&self) -> f64 {
        self.step_sizes().into_iter().fold(0.0, f64::max)
    }

    /// `max{n : t_n ≤ t}`.
    pub fn locate(&self, t: f64) -> Result<usize> {
        if !(t >= 0.0 && t <= self.horizon) {
            return Err(invalid(format!("t = {t} outside [0, {}]", self.horizon)));
        }
        Ok(self.points.partition_point(|&p| p <= t) - 1)
    }

    pub fn interpolate_constant(&self, values: &[f64], t: f64) -> Result<f64> {
        self.check_len(values)?;
        Ok(values[self.locate(t)?])
    }

    pub fn interpolate_linear(&self, values: &[f64], t: f64) -> Result<f64> {
        self.check_len(values)?;
        let n = self.locate(t)?;
        if n == self.steps() || t == self.points[n] {
            return Ok(values[n]);
        }
        let w = (t - self.points[n]) / self.step(n);
        Ok(values[n] + w * (values[n + 1] - values[n]))
    }

    fn check_len(&self, values: &[f64]) -> Result<()> {
        if values.len() != self.points.len() {
            return Err(shape(format!(
                "{} values for a grid of {} points",
                values.len(),
                self.points.len()
            )));
        }
        Ok(())
    }
}

fn check_horizon(horizon: f64) -> Result<()> {
    if !(horizon.is_finite() && horizon > 0.0) {
        return Err(invalid(format!("horizon must be positive and finite, got {horizon}")));
    }
    Ok(())
}
