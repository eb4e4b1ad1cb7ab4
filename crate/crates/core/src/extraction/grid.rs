use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::field::ImplicitField;
use crate::geometry::Vec3;

/// Regular sampling lattice over an axis-aligned box.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    /// Nodes per axis.
    pub resolution: usize,
    pub min: Vec3,
    pub max: Vec3,
    pub iso: f64,
}

impl Default for GridSpec {
    /// 256³ nodes over the unit cube centred at the origin plus a 5% margin.
    fn default() -> Self {
        Self::unit(256)
    }
}

impl GridSpec {
    pub fn unit(resolution: usize) -> Self {
        Self {
            resolution,
            min: Vec3::repeat(-0.55),
            max: Vec3::repeat(0.55),
            iso: 0.0,
        }
    }

    pub fn new(resolution: usize, min: Vec3, max: Vec3) -> Result<Self> {
        let spec = Self {
            resolution,
            min,
            max,
            iso: 0.0,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.resolution < 8 {
            return Err(Error::Argument(format!(
                "grid resolution {} is below the minimum of 8",
                self.resolution
            )));
        }
        if !(0..3).all(|a| self.max[a] > self.min[a]) {
            return Err(Error::Argument("grid bounds are empty".into()));
        }
        Ok(())
    }

    /// Spacing between neighbouring nodes along each axis.
    pub fn step(&self) -> Vec3 {
        (self.max - self.min) / (self.resolution - 1) as f64
    }

    /// Largest per-axis spacing.
    pub fn cell_size(&self) -> f64 {
        self.step().max()
    }

    pub fn node(&self, i: usize, j: usize, k: usize) -> Vec3 {
        let s = self.step();
        self.min + Vec3::new(i as f64 * s.x, j as f64 * s.y, k as f64 * s.z)
    }

    pub fn node_count(&self) -> usize {
        self.resolution.pow(3)
    }

    pub fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.resolution * (j + self.resolution * k)
    }

    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] >= self.min[a] && p[a] <= self.max[a])
    }
}

/// Field values at every node of a [`GridSpec`], `x` fastest.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalarGrid {
    pub spec: GridSpec,
    pub values: Vec<f64>,
}

impl ScalarGrid {
    pub fn new(spec: GridSpec, values: Vec<f64>) -> Result<Self> {
        spec.validate()?;
        if values.len() != spec.node_count() {
            return Err(Error::Argument(format!(
                "{} values for {} grid nodes",
                values.len(),
                spec.node_count()
            )));
        }
        Ok(Self { spec, values })
    }

    /// Evaluates a closure at every node, one z-slab per task.
    pub fn from_fn(spec: GridSpec, f: impl Fn(&Vec3) -> f64 + Sync) -> Result<Self> {
        spec.validate()?;
        let n = spec.resolution;
        let values = (0..n)
            .into_par_iter()
            .flat_map_iter(|k| {
                let f = &f;
                (0..n).flat_map(move |j| (0..n).map(move |i| f(&spec.node(i, j, k))))
            })
            .collect();
        Ok(Self { spec, values })
    }

    /// Evaluates an implicit field slab by slab.
    pub fn sample<F: ImplicitField + ?Sized>(field: &F, spec: GridSpec) -> Result<Self> {
        spec.validate()?;
        let n = spec.resolution;
        let mut values = Vec::with_capacity(spec.node_count());
        for k in 0..n {
            let slab: Vec<Vec3> = (0..n)
                .flat_map(|j| (0..n).map(move |i| (i, j)))
                .map(|(i, j)| spec.node(i, j, k))
                .collect();
            values.extend(field.values(&slab));
        }
        Ok(Self { spec, values })
    }

    pub fn at(&self, i: usize, j: usize, k: usize) -> f64 {
        self.values[self.spec.index(i, j, k)]
    }

    /// Gradient of the trilinear interpolant at `p` (clamped into the grid).
    pub fn gradient_at(&self, p: &Vec3) -> Vec3 {
        let n = self.spec.resolution;
        let step = self.spec.step();
        let mut cell = [0usize; 3];
        let mut t = [0.0; 3];
        for a in 0..3 {
            let u = ((p[a] - self.spec.min[a]) / step[a]).clamp(0.0, (n - 1) as f64);
            let c = (u.floor() as usize).min(n - 2);
            cell[a] = c;
            t[a] = u - c as f64;
        }
        let v = |di: usize, dj: usize, dk: usize| self.at(cell[0] + di, cell[1] + dj, cell[2] + dk);
        let lerp = |a: f64, b: f64, s: f64| a + (b - a) * s;
        let [tx, ty, tz] = t;
        let dx = lerp(
            lerp(v(1, 0, 0) - v(0, 0, 0), v(1, 1, 0) - v(0, 1, 0), ty),
            lerp(v(1, 0, 1) - v(0, 0, 1), v(1, 1, 1) - v(0, 1, 1), ty),
            tz,
        );
        let dy = lerp(
            lerp(v(0, 1, 0) - v(0, 0, 0), v(1, 1, 0) - v(1, 0, 0), tx),
            lerp(v(0, 1, 1) - v(0, 0, 1), v(1, 1, 1) - v(1, 0, 1), tx),
            tz,
        );
        let dz = lerp(
            lerp(v(0, 0, 1) - v(0, 0, 0), v(1, 0, 1) - v(1, 0, 0), tx),
            lerp(v(0, 1, 1) - v(0, 1, 0), v(1, 1, 1) - v(1, 1, 0), tx),
            ty,
        );
        Vec3::new(dx / step.x, dy / step.y, dz / step.z)
    }

    /// Values at the eight outer corners of the box.
    pub fn corner_values(&self) -> [f64; 8] {
        let m = self.spec.resolution - 1;
        let mut out = [0.0; 8];
        for (c, slot) in out.iter_mut().enumerate() {
            *slot = self.at((c & 1) * m, ((c >> 1) & 1) * m, ((c >> 2) & 1) * m);
        }
        out
    }

    /// Values on the six faces of the box.
    pub fn boundary_values(&self) -> Vec<f64> {
        let n = self.spec.resolution;
        let mut out = Vec::new();
        for k in 0..n {
            for j in 0..n {
                for i in 0..n {
                    if i == 0 || j == 0 || k == 0 || i == n - 1 || j == n - 1 || k == n - 1 {
                        out.push(self.at(i, j, k));
                    }
                }
            }
        }
        out
    }
}
