//! Voxel lattice storing one raw density and 27 SH coefficients per vertex.
//!
//! Storage is dense (x-fastest, 28 scalars per vertex) with a per-cell
//! occupancy mask that the ray sampler consults to skip empty space.
//! `resolution` counts cells per axis, so a grid has `(n+1)` vertices per
//! axis and doubling the resolution keeps every old vertex on the lattice.

use std::io::{Read, Write};
use std::path::Path;

use nalgebra::Vector3;
use sha2::{Digest, Sha256};

use crate::gradients::GradientBuffer;
use crate::sh::ShCoeffs;
use crate::{Error, Result, PARAMS_PER_VERTEX, SH_COEFFS};

pub const GRID_MAGIC: &[u8; 4] = b"VXGF";
pub const GRID_VERSION: u32 = 1;

/// Cells whose largest effective corner density falls below this are pruned.
pub const DEFAULT_PRUNE_THRESHOLD: f64 = 1e-3;

/// Flat per-vertex parameter block: `[sigma, sh_r[0..9], sh_g[0..9], sh_b[0..9]]`.
pub type ParamBlock = [f64; PARAMS_PER_VERTEX];

#[inline]
pub fn sh_slot(channel: usize, basis: usize) -> usize {
    1 + channel * SH_COEFFS + basis
}

#[derive(Clone, Debug, PartialEq)]
pub struct GridGeometry {
    pub resolution: [usize; 3],
    pub origin: Vector3<f64>,
    pub voxel_size: f64,
}

/// A point located inside one unit cell: integer cell coordinates and the
/// fractional position within the cell, each component in `[0, 1]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellPoint {
    pub cell: [usize; 3],
    pub frac: [f64; 3],
}

impl GridGeometry {
    pub fn new(resolution: [usize; 3], origin: Vector3<f64>, voxel_size: f64) -> Result<Self> {
        if resolution.iter().any(|&n| n < 2) {
            return Err(Error::InvalidGeometry(format!(
                "resolution {resolution:?} must be at least 2 per axis"
            )));
        }
        if !(voxel_size > 0.0 && voxel_size.is_finite()) {
            return Err(Error::InvalidGeometry(format!(
                "voxel size {voxel_size} must be positive"
            )));
        }
        if !origin.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidGeometry("origin must be finite".into()));
        }
        Ok(Self {
            resolution,
            origin,
            voxel_size,
        })
    }

    /// Cubic voxels covering `[min, max]` grown by `margin` (a fraction of the
    /// extent on each side); the longest axis receives `max_cells` cells.
    pub fn from_bounds(
        min: Vector3<f64>,
        max: Vector3<f64>,
        max_cells: usize,
        margin: f64,
    ) -> Result<Self> {
        let extent = max - min;
        if extent.iter().any(|&e| !(e > 0.0)) {
            return Err(Error::InvalidGeometry("empty bounding box".into()));
        }
        let pad = extent * margin;
        let lo = min - pad;
        let size = extent + 2.0 * pad;
        let voxel = size.max() / max_cells as f64;
        let res = [0, 1, 2].map(|a| ((size[a] / voxel).ceil() as usize).max(2));
        let used = Vector3::new(res[0] as f64, res[1] as f64, res[2] as f64) * voxel;
        // Centre the lattice on the padded box.
        let origin = lo - (used - size) * 0.5;
        Self::new(res, origin, voxel)
    }

    pub fn vertex_dims(&self) -> [usize; 3] {
        self.resolution.map(|n| n + 1)
    }

    pub fn vertex_count(&self) -> usize {
        self.vertex_dims().iter().product()
    }

    pub fn cell_count(&self) -> usize {
        self.resolution.iter().product()
    }

    #[inline]
    pub fn vertex_index(&self, x: usize, y: usize, z: usize) -> usize {
        let [vx, vy, _] = self.vertex_dims();
        x + vx * (y + vy * z)
    }

    #[inline]
    pub fn cell_index(&self, cell: [usize; 3]) -> usize {
        let [nx, ny, _] = self.resolution;
        cell[0] + nx * (cell[1] + ny * cell[2])
    }

    pub fn vertex_coords(&self, index: usize) -> [usize; 3] {
        let [vx, vy, _] = self.vertex_dims();
        [index % vx, (index / vx) % vy, index / (vx * vy)]
    }

    #[inline]
    pub fn to_grid(&self, p: &Vector3<f64>) -> Vector3<f64> {
        (p - self.origin) / self.voxel_size
    }

    #[inline]
    pub fn to_world(&self, g: &Vector3<f64>) -> Vector3<f64> {
        self.origin + g * self.voxel_size
    }

    pub fn vertex_position(&self, x: usize, y: usize, z: usize) -> Vector3<f64> {
        self.to_world(&Vector3::new(x as f64, y as f64, z as f64))
    }

    pub fn bounds(&self) -> (Vector3<f64>, Vector3<f64>) {
        let n = self.resolution;
        let max = self.to_world(&Vector3::new(n[0] as f64, n[1] as f64, n[2] as f64));
        (self.origin, max)
    }

    pub fn diagonal(&self) -> f64 {
        let (lo, hi) = self.bounds();
        (hi - lo).norm()
    }

    /// Finds the enclosing cell. On an interior lattice plane the lower-index
    /// cell is chosen (fraction 1 instead of 0).
    #[inline]
    pub fn locate(&self, p: &Vector3<f64>) -> Option<CellPoint> {
        let g = self.to_grid(p);
        let mut cell = [0usize; 3];
        let mut frac = [0.0; 3];
        for a in 0..3 {
            let n = self.resolution[a];
            let v = g[a];
            if !(v >= 0.0 && v <= n as f64) {
                return None;
            }
            let c = if v <= 0.0 {
                0
            } else {
                (v.ceil() as usize - 1).min(n - 1)
            };
            cell[a] = c;
            frac[a] = v - c as f64;
        }
        Some(CellPoint { cell, frac })
    }

    /// Vertex indices of the cell corners, ordered by bit pattern
    /// `k = x | y << 1 | z << 2`.
    #[inline]
    pub fn corners(&self, cell: [usize; 3]) -> [usize; 8] {
        let [vx, vy, _] = self.vertex_dims();
        let base = self.vertex_index(cell[0], cell[1], cell[2]);
        let sx = 1;
        let sy = vx;
        let sz = vx * vy;
        [
            base,
            base + sx,
            base + sy,
            base + sx + sy,
            base + sz,
            base + sx + sz,
            base + sy + sz,
            base + sx + sy + sz,
        ]
    }

    /// Parametric interval `[t0, t1]` over which `o + t d` lies inside the box.
    pub fn ray_interval(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> Option<(f64, f64)> {
        let (lo, hi) = self.bounds();
        let mut t0 = f64::NEG_INFINITY;
        let mut t1 = f64::INFINITY;
        for a in 0..3 {
            if d[a].abs() < 1e-300 {
                if o[a] < lo[a] || o[a] > hi[a] {
                    return None;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let mut ta = (lo[a] - o[a]) * inv;
            let mut tb = (hi[a] - o[a]) * inv;
            if ta > tb {
                std::mem::swap(&mut ta, &mut tb);
            }
            t0 = t0.max(ta);
            t1 = t1.min(tb);
        }
        (t0 <= t1).then_some((t0, t1))
    }
}

/// Trilinear weights of the 8 corners (same ordering as [`GridGeometry::corners`]).
/// Non-negative and summing to one for fractions in `[0, 1]³`.
#[inline]
pub fn trilinear_weights(frac: [f64; 3]) -> [f64; 8] {
    let [x, y, z] = frac;
    let (ix, iy, iz) = (1.0 - x, 1.0 - y, 1.0 - z);
    [
        ix * iy * iz,
        x * iy * iz,
        ix * y * iz,
        x * y * iz,
        ix * iy * z,
        x * iy * z,
        ix * y * z,
        x * y * z,
    ]
}

/// Polynomial form `a0 + a1 x + a2 y + a3 z + a4 xy + a5 xz + a6 yz + a7 xyz`
/// of the trilinear interpolant on a unit cell with its lower corner at the origin.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct InterpCoeffs(pub [f64; 8]);

impl InterpCoeffs {
    /// `v` is indexed by corner bit pattern `x | y << 1 | z << 2`.
    #[inline]
    pub fn from_corners(v: &[f64; 8]) -> Self {
        Self([
            v[0],
            v[1] - v[0],
            v[2] - v[0],
            v[4] - v[0],
            v[3] - v[1] - v[2] + v[0],
            v[5] - v[1] - v[4] + v[0],
            v[6] - v[2] - v[4] + v[0],
            v[7] - v[3] - v[5] - v[6] + v[1] + v[2] + v[4] - v[0],
        ])
    }

    #[inline]
    pub fn eval(&self, [x, y, z]: [f64; 3]) -> f64 {
        let a = &self.0;
        a[0] + a[1] * x + a[2] * y + a[3] * z + a[4] * x * y + a[5] * x * z + a[6] * y * z
            + a[7] * x * y * z
    }

    /// Derivative with respect to the unit-cell coordinates.
    #[inline]
    pub fn gradient(&self, [x, y, z]: [f64; 3]) -> [f64; 3] {
        let a = &self.0;
        [
            a[1] + a[4] * y + a[5] * z + a[7] * y * z,
            a[2] + a[4] * x + a[6] * z + a[7] * x * z,
            a[3] + a[5] * x + a[6] * y + a[7] * x * y,
        ]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VertexPayload {
    pub sigma: f64,
    pub sh: ShCoeffs,
}

impl VertexPayload {
    pub fn from_block(block: &[f64]) -> Self {
        let mut sh = [[0.0; SH_COEFFS]; 3];
        for (ch, coeffs) in sh.iter_mut().enumerate() {
            coeffs.copy_from_slice(&block[sh_slot(ch, 0)..sh_slot(ch, 0) + SH_COEFFS]);
        }
        Self {
            sigma: block[0],
            sh,
        }
    }

    pub fn to_block(&self) -> ParamBlock {
        let mut out = [0.0; PARAMS_PER_VERTEX];
        out[0] = self.sigma;
        for ch in 0..3 {
            out[sh_slot(ch, 0)..sh_slot(ch, 0) + SH_COEFFS].copy_from_slice(&self.sh[ch]);
        }
        out
    }

    pub fn effective_sigma(&self) -> f64 {
        self.sigma.max(0.0)
    }
}

/// One bit per cell, x-fastest, LSB-first within each 64-bit word.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct OccupancyMask {
    words: Vec<u64>,
    len: usize,
}

impl OccupancyMask {
    pub fn new(len: usize, active: bool) -> Self {
        let fill = if active { u64::MAX } else { 0 };
        let mut mask = Self {
            words: vec![fill; len.div_ceil(64)],
            len,
        };
        mask.clear_tail();
        mask
    }

    fn clear_tail(&mut self) {
        let rem = self.len % 64;
        if rem != 0 {
            if let Some(last) = self.words.last_mut() {
                *last &= (1u64 << rem) - 1;
            }
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    #[inline]
    pub fn get(&self, i: usize) -> bool {
        (self.words[i >> 6] >> (i & 63)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, i: usize, active: bool) {
        let bit = 1u64 << (i & 63);
        if active {
            self.words[i >> 6] |= bit;
        } else {
            self.words[i >> 6] &= !bit;
        }
    }

    pub fn count_active(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    fn to_bytes(&self) -> Vec<u8> {
        let mut out = vec![0u8; self.len.div_ceil(8)];
        for (i, byte) in out.iter_mut().enumerate() {
            *byte = (self.words[i / 8] >> ((i % 8) * 8)) as u8;
        }
        out
    }

    fn from_bytes(bytes: &[u8], len: usize) -> Self {
        let mut mask = Self::new(len, false);
        for (i, &b) in bytes.iter().enumerate() {
            mask.words[i / 8] |= (b as u64) << ((i % 8) * 8);
        }
        mask.clear_tail();
        mask
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VoxelGrid {
    geometry: GridGeometry,
    params: Vec<f64>,
    occupancy: OccupancyMask,
}

impl VoxelGrid {
    /// Every vertex set to `init`, every cell active.
    pub fn filled(geometry: GridGeometry, init: &VertexPayload) -> Self {
        let block = init.to_block();
        let n = geometry.vertex_count();
        let mut params = Vec::with_capacity(n * PARAMS_PER_VERTEX);
        for _ in 0..n {
            params.extend_from_slice(&block);
        }
        let occupancy = OccupancyMask::new(geometry.cell_count(), true);
        Self {
            geometry,
            params,
            occupancy,
        }
    }

    /// Zero density and mid-gray color everywhere.
    pub fn empty(geometry: GridGeometry) -> Self {
        Self::filled(
            geometry,
            &VertexPayload {
                sigma: 0.0,
                sh: [[0.0; SH_COEFFS]; 3],
            },
        )
    }

    pub fn geometry(&self) -> &GridGeometry {
        &self.geometry
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    #[inline]
    pub fn block(&self, vertex: usize) -> &[f64] {
        &self.params[vertex * PARAMS_PER_VERTEX..(vertex + 1) * PARAMS_PER_VERTEX]
    }

    #[inline]
    pub fn block_mut(&mut self, vertex: usize) -> &mut [f64] {
        &mut self.params[vertex * PARAMS_PER_VERTEX..(vertex + 1) * PARAMS_PER_VERTEX]
    }

    pub fn vertex(&self, vertex: usize) -> VertexPayload {
        VertexPayload::from_block(self.block(vertex))
    }

    pub fn set_vertex(&mut self, vertex: usize, payload: &VertexPayload) {
        self.block_mut(vertex).copy_from_slice(&payload.to_block());
    }

    pub fn occupancy(&self) -> &OccupancyMask {
        &self.occupancy
    }

    pub fn occupancy_mut(&mut self) -> &mut OccupancyMask {
        &mut self.occupancy
    }

    #[inline]
    pub fn is_cell_active(&self, cell: [usize; 3]) -> bool {
        self.occupancy.get(self.geometry.cell_index(cell))
    }

    /// Trilinear blend of all 28 channels at a located point.
    #[inline]
    pub fn interpolate(&self, loc: &CellPoint) -> ParamBlock {
        let w = trilinear_weights(loc.frac);
        let corners = self.geometry.corners(loc.cell);
        let mut out = [0.0; PARAMS_PER_VERTEX];
        for (k, &v) in corners.iter().enumerate() {
            let wk = w[k];
            let block = self.block(v);
            for (o, b) in out.iter_mut().zip(block) {
                *o += wk * b;
            }
        }
        out
    }

    /// Interpolated raw density and SH coefficients at a world point.
    pub fn trilerp(&self, p: &Vector3<f64>) -> Result<VertexPayload> {
        let loc = self
            .geometry
            .locate(p)
            .ok_or(Error::OutsideGrid(p.x, p.y, p.z))?;
        Ok(VertexPayload::from_block(&self.interpolate(&loc)))
    }

    /// World-space gradient (per meter) of every channel, via the polynomial
    /// coefficients of the enclosing cell.
    pub fn trilerp_spatial_grad(&self, p: &Vector3<f64>) -> Result<[[f64; 3]; PARAMS_PER_VERTEX]> {
        let loc = self
            .geometry
            .locate(p)
            .ok_or(Error::OutsideGrid(p.x, p.y, p.z))?;
        let corners = self.geometry.corners(loc.cell);
        let inv = 1.0 / self.geometry.voxel_size;
        let mut out = [[0.0; 3]; PARAMS_PER_VERTEX];
        for (ch, slot) in out.iter_mut().enumerate() {
            let values = corners.map(|v| self.params[v * PARAMS_PER_VERTEX + ch]);
            let g = InterpCoeffs::from_corners(&values).gradient(loc.frac);
            *slot = g.map(|c| c * inv);
        }
        Ok(out)
    }

    /// World-space gradient of the scalar field `Σ_c upstream[c] · v_c(p)`.
    /// This is what the pose path needs: one contraction per corner, then a
    /// single polynomial derivative.
    #[inline]
    pub fn contracted_spatial_grad(&self, loc: &CellPoint, upstream: &ParamBlock) -> Vector3<f64> {
        let corners = self.geometry.corners(loc.cell);
        let values = corners.map(|v| {
            self.block(v)
                .iter()
                .zip(upstream)
                .map(|(a, b)| a * b)
                .sum::<f64>()
        });
        let g = InterpCoeffs::from_corners(&values).gradient(loc.frac);
        Vector3::new(g[0], g[1], g[2]) / self.geometry.voxel_size
    }

    /// Doubles the resolution. New vertices take the trilinear value of the
    /// old field at their position; a new cell is active iff its parent was.
    pub fn upsample(&self, max_cells: usize) -> Result<VoxelGrid> {
        let old = &self.geometry;
        let res = old.resolution.map(|n| n * 2);
        if let Some(&worst) = res.iter().max() {
            if worst > max_cells {
                return Err(Error::ResolutionOverflow {
                    requested: worst,
                    max: max_cells,
                });
            }
        }
        let geometry = GridGeometry::new(res, old.origin, old.voxel_size * 0.5)?;
        let [vx, vy, vz] = geometry.vertex_dims();
        let mut params = Vec::with_capacity(geometry.vertex_count() * PARAMS_PER_VERTEX);
        for z in 0..vz {
            for y in 0..vy {
                for x in 0..vx {
                    let idx = [x, y, z];
                    let mut cell = [0usize; 3];
                    let mut frac = [0.0; 3];
                    for a in 0..3 {
                        // Integer arithmetic keeps old vertices bit-exact.
                        let c = (idx[a] / 2).min(old.resolution[a] - 1);
                        cell[a] = c;
                        frac[a] = if idx[a] == 2 * c { 0.0 } else if idx[a] == 2 * c + 1 { 0.5 } else { 1.0 };
                    }
                    let block = if frac.iter().all(|&f| f == 0.0) {
                        let mut b = [0.0; PARAMS_PER_VERTEX];
                        b.copy_from_slice(self.block(old.vertex_index(cell[0], cell[1], cell[2])));
                        b
                    } else {
                        self.interpolate(&CellPoint { cell, frac })
                    };
                    params.extend_from_slice(&block);
                }
            }
        }
        let mut occupancy = OccupancyMask::new(geometry.cell_count(), false);
        for z in 0..res[2] {
            for y in 0..res[1] {
                for x in 0..res[0] {
                    let parent = [x / 2, y / 2, z / 2];
                    if self.occupancy.get(old.cell_index(parent)) {
                        occupancy.set(geometry.cell_index([x, y, z]), true);
                    }
                }
            }
        }
        Ok(VoxelGrid {
            geometry,
            params,
            occupancy,
        })
    }

    /// Deactivates cells whose largest effective corner density is below
    /// `threshold`. Returns the number of cells deactivated.
    pub fn prune(&mut self, threshold: f64) -> usize {
        let res = self.geometry.resolution;
        let mut pruned = 0;
        for z in 0..res[2] {
            for y in 0..res[1] {
                for x in 0..res[0] {
                    let cell = [x, y, z];
                    let ci = self.geometry.cell_index(cell);
                    if !self.occupancy.get(ci) {
                        continue;
                    }
                    let max_sigma = self
                        .geometry
                        .corners(cell)
                        .iter()
                        .map(|&v| self.params[v * PARAMS_PER_VERTEX].max(0.0))
                        .fold(0.0, f64::max);
                    if max_sigma < threshold {
                        self.occupancy.set(ci, false);
                        pruned += 1;
                    }
                }
            }
        }
        pruned
    }

    /// Rounds every parameter to `f32`, the precision of the file format.
    pub fn quantize_to_f32(&mut self) {
        for v in self.params.iter_mut() {
            *v = *v as f32 as f64;
        }
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        let g = &self.geometry;
        w.write_all(GRID_MAGIC)?;
        w.write_all(&GRID_VERSION.to_le_bytes())?;
        for n in g.resolution {
            w.write_all(&(n as u32).to_le_bytes())?;
        }
        for c in g.origin.iter() {
            w.write_all(&c.to_le_bytes())?;
        }
        w.write_all(&g.voxel_size.to_le_bytes())?;
        let mut buf = Vec::with_capacity(self.params.len() * 4);
        for v in &self.params {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
        w.write_all(&self.occupancy.to_bytes())?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = bytes;
        Self::read_from(&mut r)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |msg: &str| Error::GridFormat(msg.to_string());
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(|_| bad("truncated header"))?;
        if &magic != GRID_MAGIC {
            return Err(bad("wrong magic"));
        }
        let mut u32buf = [0u8; 4];
        let mut read_u32 = |r: &mut R| -> Result<u32> {
            r.read_exact(&mut u32buf).map_err(|_| bad("truncated header"))?;
            Ok(u32::from_le_bytes(u32buf))
        };
        let version = read_u32(&mut r)?;
        if version != GRID_VERSION {
            return Err(Error::GridFormat(format!("unsupported version {version}")));
        }
        let mut resolution = [0usize; 3];
        for n in resolution.iter_mut() {
            *n = read_u32(&mut r)? as usize;
        }
        let mut f64buf = [0u8; 8];
        let mut read_f64 = |r: &mut R| -> Result<f64> {
            r.read_exact(&mut f64buf).map_err(|_| bad("truncated header"))?;
            Ok(f64::from_le_bytes(f64buf))
        };
        let origin = Vector3::new(read_f64(&mut r)?, read_f64(&mut r)?, read_f64(&mut r)?);
        let voxel_size = read_f64(&mut r)?;
        let geometry = GridGeometry::new(resolution, origin, voxel_size)?;

        let count = geometry.vertex_count() * PARAMS_PER_VERTEX;
        let mut raw = vec![0u8; count * 4];
        r.read_exact(&mut raw).map_err(|_| bad("truncated payload"))?;
        let params: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        if params.iter().any(|v| !v.is_finite()) {
            return Err(bad("non-finite payload value"));
        }
        let cells = geometry.cell_count();
        let mut mask = vec![0u8; cells.div_ceil(8)];
        r.read_exact(&mut mask).map_err(|_| bad("truncated occupancy mask"))?;
        let mut rest = Vec::new();
        r.read_to_end(&mut rest).map_err(|_| bad("read error"))?;
        if !rest.is_empty() {
            return Err(bad("trailing bytes after occupancy mask"));
        }
        Ok(VoxelGrid {
            occupancy: OccupancyMask::from_bytes(&mask, cells),
            geometry,
            params,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_to(&mut w).map_err(|e| Error::io(path, e))?;
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }

    /// SHA-256 of the serialized grid, as lowercase hex.
    pub fn checksum(&self) -> String {
        hex_digest(&self.to_bytes())
    }
}

pub(crate) fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Adds `upstream · w_k` to the slots of the 8 corners enclosing `p`.
/// Out-of-bounds points are counted in the buffer's diagnostics and ignored.
pub fn scatter_grad(
    buffer: &mut GradientBuffer,
    geometry: &GridGeometry,
    p: &Vector3<f64>,
    upstream: &ParamBlock,
) {
    match geometry.locate(p) {
        Some(loc) => scatter_located(buffer, geometry, &loc, upstream),
        None => buffer.outside_count += 1,
    }
}

#[inline]
pub(crate) fn scatter_located(
    buffer: &mut GradientBuffer,
    geometry: &GridGeometry,
    loc: &CellPoint,
    upstream: &ParamBlock,
) {
    let w = trilinear_weights(loc.frac);
    for (k, v) in geometry.corners(loc.cell).into_iter().enumerate() {
        let wk = w[k];
        if wk == 0.0 {
            continue;
        }
        let slot = buffer.slot_mut(v);
        for (s, u) in slot.iter_mut().zip(upstream) {
            *s += wk * u;
        }
    }
}
