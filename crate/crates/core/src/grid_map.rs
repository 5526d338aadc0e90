//! Bounded 3D voxel occupancy with a Euclidean distance field.
//!
//! Cells are indexed `(x, y, z)` from the map origin; a cell's world
//! center is `origin + (index + 0.5) * resolution`. The distance field
//! stores, for every cell center, the distance in meters to the nearest
//! occupied cell center (0 on occupied cells) and is rebuilt on demand
//! after any mutation.

use std::path::Path;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{PlanError, Result};

pub type Vec3 = Vector3<f64>;

/// Integer voxel index.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Cell {
    pub x: i32,
    pub y: i32,
    pub z: i32,
}

impl Cell {
    pub const fn new(x: i32, y: i32, z: i32) -> Self {
        Self { x, y, z }
    }

    pub fn offset(self, dx: i32, dy: i32, dz: i32) -> Self {
        Self::new(self.x + dx, self.y + dy, self.z + dz)
    }

    /// Euclidean distance in cell units.
    pub fn distance(self, other: Cell) -> f64 {
        let dx = (self.x - other.x) as f64;
        let dy = (self.y - other.y) as f64;
        let dz = (self.z - other.z) as f64;
        (dx * dx + dy * dy + dz * dz).sqrt()
    }

    pub fn as_vec(self) -> Vec3 {
        Vec3::new(self.x as f64, self.y as f64, self.z as f64)
    }
}

impl From<[i32; 3]> for Cell {
    fn from(v: [i32; 3]) -> Self {
        Self::new(v[0], v[1], v[2])
    }
}

/// Result of a distance-field query.
#[derive(Clone, Copy, Debug)]
pub struct DistanceQuery {
    /// Interpolated distance to the nearest obstacle (m).
    pub distance: f64,
    /// Spatial derivative of the interpolant.
    pub gradient: Vec3,
    /// Set when the query point lay outside the map and was clamped.
    pub clamped: bool,
}

/// Default distance reported where no obstacle exists.
pub const DEFAULT_MAX_DISTANCE: f64 = 10.0;

#[derive(Clone, Debug)]
pub struct GridMap3D {
    origin: Vec3,
    dims: [usize; 3],
    resolution: f64,
    occupancy: Vec<bool>,
    distance_field: Option<Vec<f64>>,
    max_distance: f64,
}

impl GridMap3D {
    pub fn new(origin: Vec3, dims: [usize; 3], resolution: f64) -> Result<Self> {
        if dims.iter().any(|&d| d == 0) {
            return Err(PlanError::Config(format!("map dims must be positive, got {dims:?}")));
        }
        if !(resolution > 0.0) {
            return Err(PlanError::Config(format!("resolution must be positive, got {resolution}")));
        }
        Ok(Self {
            origin,
            dims,
            resolution,
            occupancy: vec![false; dims[0] * dims[1] * dims[2]],
            distance_field: None,
            max_distance: DEFAULT_MAX_DISTANCE,
        })
    }

    /// Map covering the axis-aligned box `[origin, origin + size]`.
    pub fn with_size(origin: Vec3, size: Vec3, resolution: f64) -> Result<Self> {
        let dims = [
            (size.x / resolution).round().max(1.0) as usize,
            (size.y / resolution).round().max(1.0) as usize,
            (size.z / resolution).round().max(1.0) as usize,
        ];
        Self::new(origin, dims, resolution)
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    /// Upper corner of the map volume.
    pub fn max_corner(&self) -> Vec3 {
        self.origin
            + Vec3::new(self.dims[0] as f64, self.dims[1] as f64, self.dims[2] as f64)
                * self.resolution
    }

    pub fn max_distance(&self) -> f64 {
        self.max_distance
    }

    /// Distance reported (and used as a cap) where obstacles are far away.
    pub fn set_max_distance(&mut self, d: f64) {
        self.max_distance = d;
        self.distance_field = None;
    }

    pub fn cell_count(&self) -> usize {
        self.occupancy.len()
    }

    pub fn occupied_count(&self) -> usize {
        self.occupancy.iter().filter(|&&o| o).count()
    }

    pub fn contains_cell(&self, c: Cell) -> bool {
        c.x >= 0
            && c.y >= 0
            && c.z >= 0
            && (c.x as usize) < self.dims[0]
            && (c.y as usize) < self.dims[1]
            && (c.z as usize) < self.dims[2]
    }

    pub fn contains_point(&self, p: &Vec3) -> bool {
        let hi = self.max_corner();
        (0..3).all(|i| p[i] >= self.origin[i] && p[i] < hi[i])
    }

    #[inline]
    fn index(&self, c: Cell) -> usize {
        (c.z as usize * self.dims[1] + c.y as usize) * self.dims[0] + c.x as usize
    }

    fn cell_of_index(&self, idx: usize) -> Cell {
        let x = idx % self.dims[0];
        let y = (idx / self.dims[0]) % self.dims[1];
        let z = idx / (self.dims[0] * self.dims[1]);
        Cell::new(x as i32, y as i32, z as i32)
    }

    pub fn world_to_cell(&self, p: &Vec3) -> Result<Cell> {
        if !self.contains_point(p) {
            return Err(PlanError::OutOfBounds(format!("point {:?} outside map", p.as_slice())));
        }
        Ok(self.world_to_cell_unchecked(p))
    }

    /// Cell containing `p`, clamped into the volume.
    pub fn world_to_cell_clamped(&self, p: &Vec3) -> Cell {
        let c = self.world_to_cell_unchecked(p);
        Cell::new(
            c.x.clamp(0, self.dims[0] as i32 - 1),
            c.y.clamp(0, self.dims[1] as i32 - 1),
            c.z.clamp(0, self.dims[2] as i32 - 1),
        )
    }

    fn world_to_cell_unchecked(&self, p: &Vec3) -> Cell {
        let u = (p - self.origin) / self.resolution;
        Cell::new(u.x.floor() as i32, u.y.floor() as i32, u.z.floor() as i32)
    }

    pub fn cell_to_world(&self, c: Cell) -> Vec3 {
        self.origin + (c.as_vec() + Vec3::repeat(0.5)) * self.resolution
    }

    pub fn is_occupied(&self, c: Cell) -> Result<bool> {
        if !self.contains_cell(c) {
            return Err(PlanError::OutOfBounds(format!("cell {c:?} outside dims {:?}", self.dims)));
        }
        Ok(self.occupancy[self.index(c)])
    }

    /// Occupancy lookup treating out-of-range cells as occupied.
    #[inline]
    pub fn is_blocked(&self, c: Cell) -> bool {
        !self.contains_cell(c) || self.occupancy[self.index(c)]
    }

    pub fn set_occupied(&mut self, c: Cell) -> Result<()> {
        self.set(c, true)
    }

    pub fn set(&mut self, c: Cell, occupied: bool) -> Result<()> {
        if !self.contains_cell(c) {
            return Err(PlanError::OutOfBounds(format!("cell {c:?} outside dims {:?}", self.dims)));
        }
        let i = self.index(c);
        self.occupancy[i] = occupied;
        self.distance_field = None;
        Ok(())
    }

    /// Marks the cell containing `p`; points outside the map are ignored.
    pub fn set_occupied_world(&mut self, p: &Vec3) {
        if let Ok(c) = self.world_to_cell(p) {
            let i = self.index(c);
            self.occupancy[i] = true;
            self.distance_field = None;
        }
    }

    pub fn occupied_cells(&self) -> impl Iterator<Item = Cell> + '_ {
        self.occupancy
            .iter()
            .enumerate()
            .filter(|(_, &o)| o)
            .map(|(i, _)| self.cell_of_index(i))
    }

    /// Squared Euclidean distance transform in cell units (separable,
    /// exact). Unoccupied maps yield `f64::INFINITY` everywhere.
    fn squared_edt(&self) -> Vec<f64> {
        let [nx, ny, nz] = self.dims;
        let mut f: Vec<f64> = self
            .occupancy
            .iter()
            .map(|&o| if o { 0.0 } else { f64::INFINITY })
            .collect();
        let n_max = nx.max(ny).max(nz);
        let mut line = vec![0.0; n_max];
        let mut out = vec![0.0; n_max];
        let mut work = Edt1d::new(n_max);
        // x lines
        for z in 0..nz {
            for y in 0..ny {
                let base = (z * ny + y) * nx;
                line[..nx].copy_from_slice(&f[base..base + nx]);
                work.transform(&line[..nx], &mut out[..nx]);
                f[base..base + nx].copy_from_slice(&out[..nx]);
            }
        }
        // y lines
        for z in 0..nz {
            for x in 0..nx {
                for y in 0..ny {
                    line[y] = f[(z * ny + y) * nx + x];
                }
                work.transform(&line[..ny], &mut out[..ny]);
                for y in 0..ny {
                    f[(z * ny + y) * nx + x] = out[y];
                }
            }
        }
        // z lines
        for y in 0..ny {
            for x in 0..nx {
                for z in 0..nz {
                    line[z] = f[(z * ny + y) * nx + x];
                }
                work.transform(&line[..nz], &mut out[..nz]);
                for z in 0..nz {
                    f[(z * ny + y) * nx + x] = out[z];
                }
            }
        }
        f
    }

    pub fn build_distance_field(&mut self) {
        let res = self.resolution;
        let cap = self.max_distance;
        let field = self
            .squared_edt()
            .into_iter()
            .map(|d2| if d2.is_finite() { (d2.sqrt() * res).min(cap) } else { cap })
            .collect();
        self.distance_field = Some(field);
    }

    pub fn has_distance_field(&self) -> bool {
        self.distance_field.is_some()
    }

    /// Field value at a cell center.
    pub fn cell_distance(&self, c: Cell) -> Result<f64> {
        let field = self
            .distance_field
            .as_ref()
            .ok_or_else(|| PlanError::State("distance field not built".into()))?;
        if !self.contains_cell(c) {
            return Err(PlanError::OutOfBounds(format!("cell {c:?}")));
        }
        Ok(field[self.index(c)])
    }

    /// Trilinear interpolation of the distance field and its exact spatial
    /// derivative. Points outside the volume are clamped to the boundary;
    /// the derivative along a clamped axis is zero.
    pub fn distance_and_gradient(&self, p: &Vec3) -> Result<DistanceQuery> {
        let field = self
            .distance_field
            .as_ref()
            .ok_or_else(|| PlanError::State("distance field not built".into()))?;
        let clamped = !self.contains_point(p);
        let u = (p - self.origin) / self.resolution - Vec3::repeat(0.5);
        let mut base = [0usize; 3];
        let mut frac = [0.0f64; 3];
        let mut live = [true; 3];
        for a in 0..3 {
            let n = self.dims[a];
            if n == 1 {
                live[a] = false;
                continue;
            }
            let hi = (n - 1) as f64;
            let ua = if u[a] <= 0.0 {
                live[a] = false;
                0.0
            } else if u[a] >= hi {
                live[a] = false;
                hi
            } else {
                u[a]
            };
            let i0 = (ua.floor() as usize).min(n - 2);
            base[a] = i0;
            frac[a] = ua - i0 as f64;
        }
        let step = |a: usize| if self.dims[a] > 1 { 1 } else { 0 };
        let at = |dx: usize, dy: usize, dz: usize| -> f64 {
            let c = Cell::new(
                (base[0] + dx * step(0)) as i32,
                (base[1] + dy * step(1)) as i32,
                (base[2] + dz * step(2)) as i32,
            );
            field[self.index(c)]
        };
        let (fx, fy, fz) = (frac[0], frac[1], frac[2]);
        let v000 = at(0, 0, 0);
        let v100 = at(1, 0, 0);
        let v010 = at(0, 1, 0);
        let v110 = at(1, 1, 0);
        let v001 = at(0, 0, 1);
        let v101 = at(1, 0, 1);
        let v011 = at(0, 1, 1);
        let v111 = at(1, 1, 1);

        let c00 = v000 * (1.0 - fx) + v100 * fx;
        let c10 = v010 * (1.0 - fx) + v110 * fx;
        let c01 = v001 * (1.0 - fx) + v101 * fx;
        let c11 = v011 * (1.0 - fx) + v111 * fx;
        let c0 = c00 * (1.0 - fy) + c10 * fy;
        let c1 = c01 * (1.0 - fy) + c11 * fy;
        let distance = c0 * (1.0 - fz) + c1 * fz;

        let mut gradient = Vec3::zeros();
        if live[0] {
            let d00 = v100 - v000;
            let d10 = v110 - v010;
            let d01 = v101 - v001;
            let d11 = v111 - v011;
            let d0 = d00 * (1.0 - fy) + d10 * fy;
            let d1 = d01 * (1.0 - fy) + d11 * fy;
            gradient.x = (d0 * (1.0 - fz) + d1 * fz) / self.resolution;
        }
        if live[1] {
            gradient.y = ((c10 - c00) * (1.0 - fz) + (c11 - c01) * fz) / self.resolution;
        }
        if live[2] {
            gradient.z = (c1 - c0) / self.resolution;
        }
        Ok(DistanceQuery { distance, gradient, clamped })
    }

    /// Marks every cell whose center lies within `radius` (m) of an
    /// occupied cell center.
    pub fn inflate(&mut self, radius: f64) {
        if radius <= 0.0 {
            return;
        }
        let r_cells = radius / self.resolution + 1e-9;
        let r2 = r_cells * r_cells;
        let edt = self.squared_edt();
        for (o, d2) in self.occupancy.iter_mut().zip(edt) {
            if d2 <= r2 {
                *o = true;
            }
        }
        self.distance_field = None;
    }

    /// Copy of this map inflated by `radius`.
    pub fn inflated(&self, radius: f64) -> Self {
        let mut m = self.clone();
        m.inflate(radius);
        m
    }

    /// Union of two maps on a common grid. The result spans the bounding
    /// box of both volumes; its distance field must be rebuilt.
    pub fn merge(&self, other: &GridMap3D) -> Result<GridMap3D> {
        if (self.resolution - other.resolution).abs() > 1e-12 {
            return Err(PlanError::Config(format!(
                "cannot merge maps with resolutions {} and {}",
                self.resolution, other.resolution
            )));
        }
        let shift = (other.origin - self.origin) / self.resolution;
        if (0..3).any(|a| (shift[a] - shift[a].round()).abs() > 1e-6) {
            return Err(PlanError::Config("map origins are not aligned to a common grid".into()));
        }
        let lo = self.origin.inf(&other.origin);
        let hi = self.max_corner().sup(&other.max_corner());
        let dims = [
            ((hi.x - lo.x) / self.resolution).round() as usize,
            ((hi.y - lo.y) / self.resolution).round() as usize,
            ((hi.z - lo.z) / self.resolution).round() as usize,
        ];
        let mut out = GridMap3D::new(lo, dims, self.resolution)?;
        out.max_distance = self.max_distance.max(other.max_distance);
        for src in [self, other] {
            let off = ((src.origin - lo) / self.resolution).map(|v| v.round() as i32);
            for c in src.occupied_cells() {
                let t = c.offset(off.x, off.y, off.z);
                let i = out.index(t);
                out.occupancy[i] = true;
            }
        }
        Ok(out)
    }

    /// Occupied cells within the cube of half-width `r` cells around `c`.
    pub fn occupied_cells_near(&self, c: Cell, r: i32) -> impl Iterator<Item = Cell> + '_ {
        let r = r.max(0);
        (-r..=r)
            .flat_map(move |dz| (-r..=r).flat_map(move |dy| (-r..=r).map(move |dx| c.offset(dx, dy, dz))))
            .filter(move |n| self.contains_cell(*n) && self.occupancy[self.index(*n)])
    }

    /// Sub-map covering the cells that intersect the box `[lo, hi]`,
    /// clamped to this map. Occupancy is copied; the distance field is not.
    pub fn crop(&self, lo: &Vec3, hi: &Vec3) -> Result<GridMap3D> {
        let a = self.world_to_cell_clamped(lo);
        let b = self.world_to_cell_clamped(hi);
        let dims = [(b.x - a.x + 1) as usize, (b.y - a.y + 1) as usize, (b.z - a.z + 1) as usize];
        if dims.iter().any(|&d| d == 0 || d > i32::MAX as usize) {
            return Err(PlanError::Config("empty crop box".into()));
        }
        let mut out = GridMap3D::new(self.cell_to_world(a) - Vec3::repeat(0.5 * self.resolution), dims, self.resolution)?;
        out.max_distance = self.max_distance;
        for z in 0..dims[2] as i32 {
            for y in 0..dims[1] as i32 {
                for x in 0..dims[0] as i32 {
                    if self.occupancy[self.index(a.offset(x, y, z))] {
                        let i = out.index(Cell::new(x, y, z));
                        out.occupancy[i] = true;
                    }
                }
            }
        }
        Ok(out)
    }

    /// Map with `factor` times coarser cells. A coarse cell is occupied when
    /// any fine cell inside it is; partial cells at the upper faces count.
    pub fn coarsened(&self, factor: usize) -> Result<GridMap3D> {
        if factor == 0 {
            return Err(PlanError::Config("coarsening factor must be positive".into()));
        }
        let dims = self.dims.map(|d| d.div_ceil(factor));
        let mut out = GridMap3D::new(self.origin, dims, self.resolution * factor as f64)?;
        out.max_distance = self.max_distance;
        for c in self.occupied_cells() {
            let f = factor as i32;
            let i = out.index(Cell::new(c.x / f, c.y / f, c.z / f));
            out.occupancy[i] = true;
        }
        Ok(out)
    }

    /// Copies the occupied cells of `truth` whose centers lie within
    /// `range` of `center` into this map and returns the ones that were not
    /// known before. Both maps must share one grid.
    pub fn observe(&mut self, truth: &GridMap3D, center: &Vec3, range: f64) -> Result<Vec<Cell>> {
        if self.dims != truth.dims || (self.origin - truth.origin).norm() > 1e-9 || self.resolution != truth.resolution {
            return Err(PlanError::Config("observed map must share the grid of the truth map".into()));
        }
        let lo = self.world_to_cell_clamped(&(center - Vec3::repeat(range)));
        let hi = self.world_to_cell_clamped(&(center + Vec3::repeat(range)));
        let mut fresh = Vec::new();
        for z in lo.z..=hi.z {
            for y in lo.y..=hi.y {
                for x in lo.x..=hi.x {
                    let c = Cell::new(x, y, z);
                    let i = self.index(c);
                    if truth.occupancy[i] && !self.occupancy[i] && (self.cell_to_world(c) - center).norm() <= range {
                        self.occupancy[i] = true;
                        fresh.push(c);
                    }
                }
            }
        }
        if !fresh.is_empty() {
            self.distance_field = None;
        }
        Ok(fresh)
    }

    /// True when the straight segment between two points stays in free
    /// space, checked at quarter-cell steps.
    pub fn line_of_sight(&self, a: &Vec3, b: &Vec3) -> bool {
        let len = (b - a).norm();
        let steps = ((len / (0.25 * self.resolution)).ceil() as usize).max(1);
        (0..=steps).all(|k| {
            let p = a + (b - a) * (k as f64 / steps as f64);
            !self.is_blocked(self.world_to_cell_unchecked(&p))
        })
    }

    /// Nearest unoccupied cell by breadth-first search over 26-neighbors.
    pub fn nearest_free(&self, start: Cell) -> Option<Cell> {
        let start = Cell::new(
            start.x.clamp(0, self.dims[0] as i32 - 1),
            start.y.clamp(0, self.dims[1] as i32 - 1),
            start.z.clamp(0, self.dims[2] as i32 - 1),
        );
        if !self.is_blocked(start) {
            return Some(start);
        }
        let mut seen = vec![false; self.occupancy.len()];
        let mut queue = std::collections::VecDeque::new();
        seen[self.index(start)] = true;
        queue.push_back(start);
        let mut best: Option<(f64, Cell)> = None;
        let mut best_ring = usize::MAX;
        let mut ring_of = std::collections::HashMap::new();
        ring_of.insert(start, 0usize);
        while let Some(c) = queue.pop_front() {
            let ring = ring_of[&c];
            if ring > best_ring {
                break;
            }
            if !self.is_blocked(c) {
                let d = c.distance(start);
                if best.is_none_or(|(bd, bc)| d < bd || (d == bd && c < bc)) {
                    best = Some((d, c));
                }
                best_ring = ring.min(best_ring);
                continue;
            }
            for dz in -1..=1 {
                for dy in -1..=1 {
                    for dx in -1..=1 {
                        let n = c.offset(dx, dy, dz);
                        if self.contains_cell(n) && !seen[self.index(n)] {
                            seen[self.index(n)] = true;
                            ring_of.insert(n, ring + 1);
                            queue.push_back(n);
                        }
                    }
                }
            }
        }
        best.map(|(_, c)| c)
    }

    /// Adds a vertical cylinder spanning the full map height.
    pub fn add_pillar(&mut self, center_xy: (f64, f64), radius: f64) {
        let r = radius.max(0.5 * self.resolution);
        let lo = self.world_to_cell_clamped(&Vec3::new(center_xy.0 - r, center_xy.1 - r, self.origin.z));
        let hi = self.world_to_cell_clamped(&Vec3::new(center_xy.0 + r, center_xy.1 + r, self.origin.z));
        for y in lo.y..=hi.y {
            for x in lo.x..=hi.x {
                let w = self.cell_to_world(Cell::new(x, y, 0));
                let (dx, dy) = (w.x - center_xy.0, w.y - center_xy.1);
                if dx * dx + dy * dy <= r * r + 1e-12 {
                    for z in 0..self.dims[2] as i32 {
                        let i = self.index(Cell::new(x, y, z));
                        self.occupancy[i] = true;
                    }
                }
            }
        }
        self.distance_field = None;
    }

    /// Fills every cell whose center lies inside the axis-aligned box.
    pub fn add_box(&mut self, lo: Vec3, hi: Vec3) {
        for idx in 0..self.occupancy.len() {
            let w = self.cell_to_world(self.cell_of_index(idx));
            if (0..3).all(|a| w[a] >= lo[a] && w[a] <= hi[a]) {
                self.occupancy[idx] = true;
            }
        }
        self.distance_field = None;
    }

    pub fn random_forest(spec: &ForestSpec) -> Result<Self> {
        if !(spec.avg_spacing > 2.0 * spec.pillar_radius) {
            return Err(PlanError::Config(format!(
                "avg spacing {} must exceed pillar diameter {}",
                spec.avg_spacing,
                2.0 * spec.pillar_radius
            )));
        }
        let mut map = Self::with_size(spec.origin, spec.size, spec.resolution)?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let nx = (spec.size.x / spec.avg_spacing).floor().max(1.0) as usize;
        let ny = (spec.size.y / spec.avg_spacing).floor().max(1.0) as usize;
        let (sx, sy) = (spec.size.x / nx as f64, spec.size.y / ny as f64);
        let jitter = 0.25 * spec.avg_spacing;
        for iy in 0..ny {
            for ix in 0..nx {
                let cx = spec.origin.x + (ix as f64 + 0.5) * sx + rng.random_range(-jitter..=jitter);
                let cy = spec.origin.y + (iy as f64 + 0.5) * sy + rng.random_range(-jitter..=jitter);
                let blocked = spec.clear_zones.iter().any(|(c, r)| {
                    let (dx, dy) = (c.x - cx, c.y - cy);
                    (dx * dx + dy * dy).sqrt() < r + spec.pillar_radius
                });
                if !blocked {
                    map.add_pillar((cx, cy), spec.pillar_radius);
                }
            }
        }
        Ok(map)
    }

    pub fn to_voxel_file(&self) -> VoxelFile {
        VoxelFile {
            origin: [self.origin.x, self.origin.y, self.origin.z],
            resolution: self.resolution,
            dims: self.dims,
            occupied: self.occupied_cells().map(|c| [c.x, c.y, c.z]).collect(),
        }
    }

    pub fn from_voxel_file(f: &VoxelFile) -> Result<Self> {
        let mut m = Self::new(Vec3::from(f.origin), f.dims, f.resolution)?;
        for &c in &f.occupied {
            m.set_occupied(Cell::from(c))?;
        }
        Ok(m)
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let s = serde_json::to_string(&self.to_voxel_file())?;
        std::fs::write(path, s)?;
        Ok(())
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<Self> {
        let s = std::fs::read_to_string(path)?;
        Self::from_voxel_file(&serde_json::from_str(&s)?)
    }
}

impl PartialEq for GridMap3D {
    fn eq(&self, other: &Self) -> bool {
        self.origin == other.origin
            && self.dims == other.dims
            && self.resolution == other.resolution
            && self.occupancy == other.occupancy
    }
}

/// Voxel-list serialization: origin, resolution, dims and occupied indices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VoxelFile {
    pub origin: [f64; 3],
    pub resolution: f64,
    pub dims: [usize; 3],
    pub occupied: Vec<[i32; 3]>,
}

/// Parameters for a procedurally generated pillar forest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForestSpec {
    pub seed: u64,
    pub origin: Vec3,
    pub size: Vec3,
    pub resolution: f64,
    pub avg_spacing: f64,
    pub pillar_radius: f64,
    /// Discs `(center, radius)` in the xy-plane kept free of pillars.
    #[serde(default)]
    pub clear_zones: Vec<(Vec3, f64)>,
}

/// 1D squared distance transform of a sampled function (lower envelope of
/// parabolas), reusing scratch buffers across lines.
struct Edt1d {
    v: Vec<usize>,
    z: Vec<f64>,
}

impl Edt1d {
    fn new(n: usize) -> Self {
        Self { v: vec![0; n], z: vec![0.0; n + 1] }
    }

    fn transform(&mut self, f: &[f64], d: &mut [f64]) {
        let n = f.len();
        let mut k: isize = -1;
        for q in 0..n {
            if !f[q].is_finite() {
                continue;
            }
            loop {
                if k < 0 {
                    k = 0;
                    self.v[0] = q;
                    self.z[0] = f64::NEG_INFINITY;
                    self.z[1] = f64::INFINITY;
                    break;
                }
                let p = self.v[k as usize];
                let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                if s <= self.z[k as usize] {
                    k -= 1;
                    continue;
                }
                k += 1;
                self.v[k as usize] = q;
                self.z[k as usize] = s;
                self.z[k as usize + 1] = f64::INFINITY;
                break;
            }
        }
        if k < 0 {
            d.iter_mut().for_each(|x| *x = f64::INFINITY);
            return;
        }
        let mut j = 0usize;
        for q in 0..n {
            while self.z[j + 1] < q as f64 {
                j += 1;
            }
            let p = self.v[j];
            let dq = q as f64 - p as f64;
            d[q] = dq * dq + f[p];
        }
    }
}
