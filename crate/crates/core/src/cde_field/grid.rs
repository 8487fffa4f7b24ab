use crate::error::{Error, Result};

/// Uniform axis `min, min + h, …, max` with `nodes` points.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Axis {
    pub min: f64,
    pub max: f64,
    pub nodes: usize,
}

impl Axis {
    pub fn new(min: f64, max: f64, nodes: usize) -> Result<Self> {
        let axis = Self { min, max, nodes };
        axis.validate("axis")?;
        Ok(axis)
    }

    pub fn validate(&self, name: &str) -> Result<()> {
        if self.nodes < 3 {
            return Err(Error::invalid(format!("{name} needs at least 3 nodes, got {}", self.nodes)));
        }
        if !self.min.is_finite() || !self.max.is_finite() || !(self.max > self.min) {
            return Err(Error::invalid(format!("{name} range [{}, {}] is empty or non-finite", self.min, self.max)));
        }
        Ok(())
    }

    pub fn spacing(&self) -> f64 {
        (self.max - self.min) / (self.nodes - 1) as f64
    }

    pub fn coord(&self, i: usize) -> f64 {
        if i + 1 == self.nodes {
            self.max
        } else {
            self.min + i as f64 * self.spacing()
        }
    }

    pub fn coords(&self) -> Vec<f64> {
        (0..self.nodes).map(|i| self.coord(i)).collect()
    }

    pub fn contains(&self, c: f64) -> bool {
        let tol = 1e-12 * self.spacing();
        c >= self.min - tol && c <= self.max + tol
    }

    /// Cell `i` with `coord(i) ≤ c ≤ coord(i+1)` and the fractional offset in
    /// it, after clamping `c` into the axis.
    pub(crate) fn locate(&self, c: f64) -> (usize, f64) {
        let h = self.spacing();
        let c = c.clamp(self.min, self.max);
        let s = (c - self.min) / h;
        let i = (s.floor() as usize).min(self.nodes - 2);
        (i, (s - i as f64).clamp(0.0, 1.0))
    }
}

/// Node layout of a field: the horizon axis varies slowest, then the optional
/// margin axis, then the state axes with the last one fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct GridSpec {
    pub x: Vec<Axis>,
    /// Present only when the margin varies (or a family of fixed margins is
    /// wanted); otherwise the field is stored for a single margin.
    pub margin: Option<Axis>,
    pub horizon: Axis,
}

impl GridSpec {
    pub fn new(x: Vec<Axis>, margin: Option<Axis>, horizon: Axis) -> Result<Self> {
        let g = Self { x, margin, horizon };
        g.validate()?;
        Ok(g)
    }

    /// One state axis, no margin axis, horizon `[0, t_max]`.
    pub fn scalar(x: Axis, t_max: f64, t_nodes: usize) -> Result<Self> {
        Self::new(vec![x], None, Axis::new(0.0, t_max, t_nodes)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.x.is_empty() {
            return Err(Error::invalid("grid needs at least one state axis"));
        }
        for (i, a) in self.x.iter().enumerate() {
            a.validate(&format!("x{i} axis"))?;
        }
        if let Some(l) = &self.margin {
            l.validate("margin axis")?;
        }
        self.horizon.validate("horizon axis")?;
        if self.horizon.min != 0.0 {
            return Err(Error::invalid("horizon axis must start at T = 0"));
        }
        Ok(())
    }

    /// Spatial axes in storage order: `[L?, x0, x1, …]`.
    pub fn spatial_axes(&self) -> Vec<Axis> {
        self.margin.iter().chain(&self.x).copied().collect()
    }

    /// All axes in storage order: `[T, L?, x0, …]`.
    pub fn axes(&self) -> Vec<Axis> {
        std::iter::once(self.horizon).chain(self.spatial_axes()).collect()
    }

    pub fn spatial_len(&self) -> usize {
        self.spatial_axes().iter().map(|a| a.nodes).product()
    }

    pub fn len(&self) -> usize {
        self.horizon.nodes * self.spatial_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// `(L, x)` at spatial node `s`.
    pub fn spatial_point(&self, s: usize, fixed_margin: f64) -> (f64, Vec<f64>) {
        let axes = self.spatial_axes();
        let mut rem = s;
        let mut coords = vec![0.0; axes.len()];
        for (k, a) in axes.iter().enumerate().rev() {
            coords[k] = a.coord(rem % a.nodes);
            rem /= a.nodes;
        }
        if self.margin.is_some() {
            (coords[0], coords[1..].to_vec())
        } else {
            (fixed_margin, coords)
        }
    }
}
