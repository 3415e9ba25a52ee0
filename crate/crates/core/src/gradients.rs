//! Analytical derivatives of the rendered color and depth.
//!
//! Map path: per-sample `∂L/∂c_i = w_i · ∂L/∂Ĉ` and
//! `∂Ĉ/∂σ_i = δ_i [c_i T_{i+1} − Ĉ + Σ_{j≤i} c_j w_j]` (the depth analogue
//! substitutes `t_i` for `c_i`), routed through the clamp activations, the SH
//! basis and the trilinear adjoint into a sparse [`GradientBuffer`].
//!
//! Ray path: the same per-sample factors contracted against the spatial
//! derivative of the trilinear field at `p_i = o + t_i d`, accumulated with
//! `∂p_i/∂o = I` and `∂p_i/∂d = t_i I`. The SH basis is held fixed with
//! respect to `d`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::hash::{BuildHasherDefault, Hasher};

use nalgebra::Vector3;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::Ray;
use crate::grid::{scatter_located, sh_slot, GridGeometry, ParamBlock, VoxelGrid};
use crate::render::{render_ray, render_ray_with_basis, RayWorkspace, RenderSettings};
use crate::sh::{sh_basis, sh_basis_jacobian, ShBasis};
use crate::{Error, Result, PARAMS_PER_VERTEX, SH_COEFFS};

/// Multiplicative hash for dense integer keys.
#[derive(Default, Clone, Copy)]
pub struct IndexHasher(u64);

impl Hasher for IndexHasher {
    fn finish(&self) -> u64 {
        self.0
    }

    fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 = (self.0.rotate_left(8) ^ b as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
        }
    }

    fn write_usize(&mut self, i: usize) {
        self.0 = (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    }
}

type IndexMap<V> = HashMap<usize, V, BuildHasherDefault<IndexHasher>>;

/// Sparse per-vertex gradient accumulator plus a 6-vector pose gradient
/// (`[ω; τ]`).
#[derive(Clone, Debug, Default)]
pub struct GradientBuffer {
    slots: IndexMap<ParamBlock>,
    pub pose: [f64; 6],
    /// Scatter requests that fell outside the grid.
    pub outside_count: usize,
}

impl GradientBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn slot_mut(&mut self, vertex: usize) -> &mut ParamBlock {
        self.slots
            .entry(vertex)
            .or_insert([0.0; PARAMS_PER_VERTEX])
    }

    pub fn get(&self, vertex: usize) -> Option<&ParamBlock> {
        self.slots.get(&vertex)
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn sorted_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = self.slots.keys().copied().collect();
        idx.sort_unstable();
        idx
    }

    /// `(vertex, gradient)` pairs in ascending vertex order.
    pub fn sorted_entries(&self) -> Vec<(usize, &ParamBlock)> {
        let mut e: Vec<_> = self.slots.iter().map(|(k, v)| (*k, v)).collect();
        e.sort_unstable_by_key(|(k, _)| *k);
        e
    }

    /// Adds `other` into `self`, visiting `other` in ascending index order.
    pub fn merge(&mut self, other: &GradientBuffer) {
        for (v, g) in other.sorted_entries() {
            let slot = self.slot_mut(v);
            for (s, x) in slot.iter_mut().zip(g) {
                *s += x;
            }
        }
        for (a, b) in self.pose.iter_mut().zip(other.pose) {
            *a += b;
        }
        self.outside_count += other.outside_count;
    }

    pub fn scale(&mut self, factor: f64) {
        for slot in self.slots.values_mut() {
            for g in slot.iter_mut() {
                *g *= factor;
            }
        }
        for p in self.pose.iter_mut() {
            *p *= factor;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.slots
            .values()
            .flat_map(|s| s.iter())
            .chain(self.pose.iter())
            .fold(0.0, |m, g| m.max(g.abs()))
    }
}

/// Loss derivatives with respect to one sample's effective density and
/// clamped color.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MapGradContribution {
    pub d_sigma: f64,
    pub d_color: [f64; 3],
}

/// Loss derivatives with respect to the ray origin and (unnormalized) direction.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct PoseGradContribution {
    pub d_origin: Vector3<f64>,
    pub d_direction: Vector3<f64>,
}

impl PoseGradContribution {
    /// Direction gradient with the radial (gauge) component removed.
    pub fn tangent_direction(&self, d: &Vector3<f64>) -> Vector3<f64> {
        self.d_direction - d * d.dot(&self.d_direction)
    }
}

/// `∂L/∂c_i` and the color part of `∂L/∂σ_i` for every processed sample.
pub fn grad_color_wrt_params(ws: &RayWorkspace, upstream: [f64; 3]) -> Vec<MapGradContribution> {
    let n = ws.len();
    let mut out = Vec::with_capacity(n);
    let mut prefix = [0.0; 3];
    for i in 0..n {
        let w = ws.weight[i];
        let c = ws.color[i];
        let t_next = ws.transmittance[i + 1];
        let delta = ws.delta(i);
        let mut d_sigma = 0.0;
        let mut d_color = [0.0; 3];
        for ch in 0..3 {
            prefix[ch] += c[ch] * w;
            let dc_dsigma = delta * (c[ch] * t_next - ws.color_hat[ch] + prefix[ch]);
            d_sigma += upstream[ch] * dc_dsigma;
            d_color[ch] = upstream[ch] * w;
        }
        out.push(MapGradContribution { d_sigma, d_color });
    }
    out
}

/// `∂L/∂σ_i` through the expected depth.
pub fn grad_depth_wrt_sigma(ws: &RayWorkspace, upstream: f64) -> Vec<f64> {
    let n = ws.len();
    let mut out = Vec::with_capacity(n);
    let mut prefix = 0.0;
    for i in 0..n {
        let t = ws.t(i);
        prefix += t * ws.weight[i];
        let dd = ws.delta(i) * (t * ws.transmittance[i + 1] - ws.depth_hat + prefix);
        out.push(upstream * dd);
    }
    out
}

/// Per-sample contributions of a combined color + depth upstream.
pub fn sample_contributions(
    ws: &RayWorkspace,
    upstream_color: [f64; 3],
    upstream_depth: f64,
) -> Vec<MapGradContribution> {
    let mut contrib = grad_color_wrt_params(ws, upstream_color);
    if upstream_depth != 0.0 {
        for (c, d) in contrib.iter_mut().zip(grad_depth_wrt_sigma(ws, upstream_depth)) {
            c.d_sigma += d;
        }
    }
    contrib
}

/// Maps a sample contribution onto the 28 interpolated raw channels:
/// density through `max(σ, 0)`, color through the clamp and the SH basis.
#[inline]
pub fn raw_channel_upstream(ws: &RayWorkspace, i: usize, c: &MapGradContribution) -> ParamBlock {
    let mut u = [0.0; PARAMS_PER_VERTEX];
    if ws.sigma_live[i] {
        u[0] = c.d_sigma;
    }
    let live = ws.color_live[i];
    for ch in 0..3 {
        if !live[ch] || c.d_color[ch] == 0.0 {
            continue;
        }
        for m in 0..SH_COEFFS {
            u[sh_slot(ch, m)] = c.d_color[ch] * ws.basis[m];
        }
    }
    u
}

/// Scatters per-sample contributions to the vertex slots of `buffer`.
pub fn backprop_to_vertices(
    grid: &VoxelGrid,
    ws: &RayWorkspace,
    contrib: &[MapGradContribution],
    buffer: &mut GradientBuffer,
) {
    debug_assert_eq!(contrib.len(), ws.len());
    let geo = grid.geometry();
    for (i, c) in contrib.iter().enumerate() {
        let u = raw_channel_upstream(ws, i, c);
        if u.iter().all(|&x| x == 0.0) {
            continue;
        }
        scatter_located(buffer, geo, &ws.samples[i].loc, &u);
    }
}

/// `∂L/∂o = Σ_i g_i`, `∂L/∂d = Σ_i t_i g_i`, with `g_i` the spatial gradient
/// of the loss-weighted field at sample `i`.
pub fn grad_wrt_ray(
    grid: &VoxelGrid,
    ws: &RayWorkspace,
    contrib: &[MapGradContribution],
) -> PoseGradContribution {
    let mut out = PoseGradContribution::default();
    for (i, c) in contrib.iter().enumerate() {
        let u = raw_channel_upstream(ws, i, c);
        if u.iter().all(|&x| x == 0.0) {
            continue;
        }
        let g = grid.contracted_spatial_grad(&ws.samples[i].loc, &u);
        out.d_origin += g;
        out.d_direction += g * ws.t(i);
    }
    out
}

/// Extra direction gradient from the view dependence of the SH basis,
/// `Σ_i Σ_c ∂L/∂c_i · Σ_m k_m ∂Y_m/∂d`. Zero when the basis is frozen.
pub fn grad_direction_via_basis(
    grid: &VoxelGrid,
    ws: &RayWorkspace,
    contrib: &[MapGradContribution],
    direction: &Vector3<f64>,
) -> Vector3<f64> {
    let jac = sh_basis_jacobian(direction);
    let mut out = Vector3::zeros();
    for (i, c) in contrib.iter().enumerate() {
        let live = ws.color_live[i];
        if (0..3).all(|ch| !live[ch] || c.d_color[ch] == 0.0) {
            continue;
        }
        let v = grid.interpolate(&ws.samples[i].loc);
        for ch in 0..3 {
            if !live[ch] {
                continue;
            }
            for (m, row) in jac.iter().enumerate() {
                let k = c.d_color[ch] * v[sh_slot(ch, m)];
                out += Vector3::new(row[0], row[1], row[2]) * k;
            }
        }
    }
    out
}

/// Result of one finite-difference probe.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Probe {
    Value(f64),
    /// The perturbed evaluation crossed a non-smooth point (cell boundary,
    /// clamp, early-termination change); the configuration should be resampled.
    Kink,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FdEntry {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_err: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct FdReport {
    pub entries: Vec<FdEntry>,
    /// Denominator floor: relative errors use `max(|a|, |n|, floor)`.
    pub floor: f64,
    /// Parameters whose probes hit a kink.
    pub kinks: Vec<usize>,
}

impl FdReport {
    pub fn worst(&self) -> Option<&FdEntry> {
        self.entries
            .iter()
            .max_by(|a, b| a.rel_err.total_cmp(&b.rel_err))
    }

    pub fn max_rel_err(&self) -> f64 {
        self.worst().map_or(0.0, |e| e.rel_err)
    }

    pub fn has_kinks(&self) -> bool {
        !self.kinks.is_empty()
    }

    /// Plain-text report: one line per parameter, worst offender last.
    pub fn to_text(&self) -> String {
        let mut s = String::from("# index analytic numeric rel_err\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{} {:.12e} {:.12e} {:.3e}",
                e.index, e.analytic, e.numeric, e.rel_err
            );
        }
        if let Some(w) = self.worst() {
            let _ = writeln!(
                s,
                "# worst index={} analytic={:.12e} numeric={:.12e} rel_err={:.3e}",
                w.index, w.analytic, w.numeric, w.rel_err
            );
        }
        let _ = writeln!(s, "# floor={:.3e} kinks={}", self.floor, self.kinks.len());
        s
    }
}

/// Central differences `(f(x+ε) − f(x−ε)) / 2ε` for every parameter,
/// compared against `analytic`. The relative-error denominator is floored at
/// `floor_fraction · max|analytic|` so that vanishing entries are judged on
/// the gradient's own scale.
pub fn fd_check<F>(
    mut loss: F,
    params: &[f64],
    analytic: &[f64],
    eps: f64,
    floor_fraction: f64,
) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> Probe,
{
    assert_eq!(params.len(), analytic.len());
    let scale = analytic.iter().fold(0.0f64, |m, a| m.max(a.abs()));
    let floor = (floor_fraction * scale).max(f64::MIN_POSITIVE);
    let mut x = params.to_vec();
    let mut report = FdReport {
        floor,
        ..Default::default()
    };
    for i in 0..x.len() {
        let base = x[i];
        x[i] = base + eps;
        let plus = loss(&x);
        x[i] = base - eps;
        let minus = loss(&x);
        x[i] = base;
        let (fp, fm) = match (plus, minus) {
            (Probe::Value(a), Probe::Value(b)) => (a, b),
            _ => {
                report.kinks.push(i);
                continue;
            }
        };
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFiniteCheck(i));
        }
        let numeric = (fp - fm) / (2.0 * eps);
        let a = analytic[i];
        let rel_err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(floor);
        report.entries.push(FdEntry {
            index: i,
            analytic: a,
            numeric,
            rel_err,
        });
    }
    Ok(report)
}

/// [`fd_check`] for a smooth scalar function.
pub fn fd_check_smooth<F>(mut f: F, params: &[f64], analytic: &[f64], eps: f64) -> Result<FdReport>
where
    F: FnMut(&[f64]) -> f64,
{
    fd_check(|x| Probe::Value(f(x)), params, analytic, eps, 0.0)
}

/// Compact description of the non-smooth state of a rendered ray: sample
/// cells, activation flags and the termination point. Two renders with equal
/// signatures lie on the same smooth piece of the loss.
pub fn ray_signature(ws: &RayWorkspace) -> Vec<u64> {
    let mut sig = Vec::with_capacity(ws.len() + 1);
    sig.push(ws.len() as u64 | (ws.terminated_early as u64) << 63);
    for i in 0..ws.len() {
        let s = &ws.samples[i];
        let cell = (s.loc.cell[0] as u64) | (s.loc.cell[1] as u64) << 16 | (s.loc.cell[2] as u64) << 32;
        let live = ws.color_live[i];
        let flags = ws.sigma_live[i] as u64
            | (live[0] as u64) << 1
            | (live[1] as u64) << 2
            | (live[2] as u64) << 3;
        sig.push(cell | flags << 48);
    }
    sig
}

/// Settings of [`random_gradcheck`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradcheckSpec {
    /// Cells per axis of every random grid.
    pub resolution: usize,
    /// Number of kink-free grid/ray configurations to check.
    pub cases: usize,
    pub seed: u64,
    pub lambda_d: f64,
    pub eps_map: f64,
    pub eps_ray: f64,
    pub floor_fraction: f64,
}

impl Default for GradcheckSpec {
    fn default() -> Self {
        Self {
            resolution: 8,
            cases: 100,
            seed: 0,
            lambda_d: 0.7,
            eps_map: 1e-6,
            eps_ray: 1e-7,
            floor_fraction: 1e-3,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckSummary {
    pub cases: usize,
    /// Configurations discarded because a probe crossed a kink or the ray missed.
    pub resampled: usize,
    pub map_params_checked: usize,
    pub map_max_rel_err: f64,
    pub ray_max_rel_err: f64,
    /// Report of the case with the largest map-parameter error.
    pub worst_map: FdReport,
    /// Report of the case with the largest ray-parameter error.
    pub worst_ray: FdReport,
}

impl GradcheckSummary {
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "# cases={} resampled={} map_params={} map_max_rel_err={:.3e} ray_max_rel_err={:.3e}",
            self.cases, self.resampled, self.map_params_checked, self.map_max_rel_err, self.ray_max_rel_err
        );
        s.push_str("# worst map-parameter case\n");
        s.push_str(&self.worst_map.to_text());
        s.push_str("# worst ray-parameter case (origin xyz, direction xyz)\n");
        s.push_str(&self.worst_ray.to_text());
        s
    }
}

/// Grid of `res³` cells over `[0, 1]³` with densities in `[-2, 12)` and SH
/// coefficients in `[-0.4, 0.4)`.
pub fn random_grid(rng: &mut impl Rng, res: usize) -> VoxelGrid {
    let geo = GridGeometry::new([res; 3], Vector3::zeros(), 1.0 / res as f64).expect("valid geometry");
    let mut grid = VoxelGrid::empty(geo);
    for v in 0..grid.geometry().vertex_count() {
        let b = grid.block_mut(v);
        b[0] = rng.random_range(-2.0..12.0);
        for x in b[1..].iter_mut() {
            *x = rng.random_range(-0.4..0.4);
        }
    }
    grid
}

/// Ray entering through the `z = 0` face towards the middle of the grid.
pub fn random_ray(rng: &mut impl Rng, grid: &VoxelGrid) -> Ray {
    let (lo, hi) = grid.geometry().bounds();
    let c = (lo + hi) * 0.5;
    let m = 0.05 * (hi.x - lo.x);
    let o = Vector3::new(
        rng.random_range(lo.x + m..hi.x - m),
        rng.random_range(lo.y + m..hi.y - m),
        lo.z + 0.01 * (hi.z - lo.z),
    );
    let s = hi.x - lo.x;
    let target = c + Vector3::new(rng.random_range(-0.3..0.3) * s, rng.random_range(-0.3..0.3) * s, 0.4 * s);
    Ray::new(o, (target - o).normalize()).expect("unit direction")
}

/// Squared color error plus `lambda_d` × squared depth error of one ray,
/// with the non-smooth signature of the render.
pub fn ray_loss(
    grid: &VoxelGrid,
    ray: &Ray,
    settings: &RenderSettings,
    basis: &ShBasis,
    target: ([f64; 3], f64),
    lambda_d: f64,
) -> (f64, Vec<u64>) {
    let mut ws = RayWorkspace::default();
    let r = render_ray_with_basis(grid, ray, settings, basis, &mut ws);
    let mut l = 0.0;
    for ch in 0..3 {
        l += (r.color[ch] - target.0[ch]).powi(2);
    }
    l += lambda_d * (r.depth - target.1).powi(2);
    (l, ray_signature(&ws))
}

/// Checks the analytic map-parameter and ray gradients of [`ray_loss`]
/// against central differences on random grids and rays. The SH basis is
/// frozen at the unperturbed direction.
pub fn random_gradcheck(spec: &GradcheckSpec) -> Result<GradcheckSummary> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut out = GradcheckSummary::default();
    let mut attempts = 0usize;
    while out.cases < spec.cases {
        attempts += 1;
        if attempts > 50 * spec.cases.max(1) {
            return Err(Error::Config("too many configurations crossed a kink".into()));
        }
        let mut grid = random_grid(&mut rng, spec.resolution);
        let ray = random_ray(&mut rng, &grid);
        let settings = RenderSettings::for_grid(&grid);
        let basis = sh_basis(&ray.direction);
        let target = ([rng.random(), rng.random(), rng.random()], rng.random_range(0.2..1.0));
        let mut ws = RayWorkspace::default();
        let r = render_ray(&grid, &ray, &settings, &mut ws);
        if !r.hit {
            out.resampled += 1;
            continue;
        }
        let up = [0, 1, 2].map(|ch| 2.0 * (r.color[ch] - target.0[ch]));
        let contrib = sample_contributions(&ws, up, 2.0 * spec.lambda_d * (r.depth - target.1));
        let mut buf = GradientBuffer::new();
        backprop_to_vertices(&grid, &ws, &contrib, &mut buf);
        let pg = grad_wrt_ray(&grid, &ws, &contrib);
        let base_sig = ray_signature(&ws);

        let mut indices = Vec::new();
        let mut analytic = Vec::new();
        for (v, g) in buf.sorted_entries() {
            for (ch, a) in g.iter().enumerate() {
                indices.push(v * PARAMS_PER_VERTEX + ch);
                analytic.push(*a);
            }
        }
        let params: Vec<f64> = indices.iter().map(|&i| grid.params()[i]).collect();
        let map = fd_check(
            |x| {
                for (&i, &v) in indices.iter().zip(x) {
                    grid.params_mut()[i] = v;
                }
                let (l, sig) = ray_loss(&grid, &ray, &settings, &basis, target, spec.lambda_d);
                if sig == base_sig { Probe::Value(l) } else { Probe::Kink }
            },
            &params,
            &analytic,
            spec.eps_map,
            spec.floor_fraction,
        )?;
        for (&i, &v) in indices.iter().zip(&params) {
            grid.params_mut()[i] = v;
        }

        let ray_params = [
            ray.origin.x, ray.origin.y, ray.origin.z,
            ray.direction.x, ray.direction.y, ray.direction.z,
        ];
        let ray_analytic = [
            pg.d_origin.x, pg.d_origin.y, pg.d_origin.z,
            pg.d_direction.x, pg.d_direction.y, pg.d_direction.z,
        ];
        let rays = fd_check(
            |x| {
                let r = Ray {
                    origin: Vector3::new(x[0], x[1], x[2]),
                    direction: Vector3::new(x[3], x[4], x[5]),
                };
                let (l, sig) = ray_loss(&grid, &r, &settings, &basis, target, spec.lambda_d);
                if sig == base_sig { Probe::Value(l) } else { Probe::Kink }
            },
            &ray_params,
            &ray_analytic,
            spec.eps_ray,
            spec.floor_fraction,
        )?;
        if map.has_kinks() || rays.has_kinks() {
            out.resampled += 1;
            continue;
        }
        out.cases += 1;
        out.map_params_checked += map.entries.len();
        if map.max_rel_err() >= out.map_max_rel_err {
            out.map_max_rel_err = map.max_rel_err();
            out.worst_map = map;
        }
        if rays.max_rel_err() >= out.ray_max_rel_err {
            out.ray_max_rel_err = rays.max_rel_err();
            out.worst_ray = rays;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Renders a synthetic workspace directly from per-sample σ and c.
    fn synthetic_workspace(sigma: &[f64], color: &[[f64; 3]], t: &[f64], delta: &[f64]) -> RayWorkspace {
        let mut ws = RayWorkspace::default();
        let mut trans = 1.0;
        ws.transmittance.push(1.0);
        for i in 0..sigma.len() {
            let decay = (-sigma[i] * delta[i]).exp();
            let w = trans * (1.0 - decay);
            trans *= decay;
            for ch in 0..3 {
                ws.color_hat[ch] += w * color[i][ch];
            }
            ws.depth_hat += w * t[i];
            ws.samples.push(crate::render::RaySample {
                t: t[i],
                delta: delta[i],
                loc: crate::grid::CellPoint {
                    cell: [0; 3],
                    frac: [0.0; 3],
                },
            });
            ws.sigma.push(sigma[i]);
            ws.sigma_live.push(true);
            ws.color.push(color[i]);
            ws.color_live.push([true; 3]);
            ws.weight.push(w);
            ws.transmittance.push(trans);
        }
        ws
    }

    #[test]
    fn single_sample_reduces_to_closed_form() {
        let (s, d, c) = (3.0, 0.2, [0.3, 0.6, 0.9]);
        let ws = synthetic_workspace(&[s], &[c], &[1.0], &[d]);
        let g = grad_color_wrt_params(&ws, [1.0, 0.0, 0.0]);
        assert!((g[0].d_sigma - d * c[0] * (-s * d).exp()).abs() < 1e-15);
        assert!((g[0].d_color[0] - (1.0 - (-s * d).exp())).abs() < 1e-15);
    }

    #[test]
    fn zero_density_zero_color_gradient() {
        let ws = synthetic_workspace(&[0.0, 0.0], &[[0.2; 3], [0.8; 3]], &[0.5, 1.0], &[0.5, 0.5]);
        for c in grad_color_wrt_params(&ws, [1.0, 1.0, 1.0]) {
            assert_eq!(c.d_color, [0.0; 3]);
        }
    }

    #[test]
    fn depth_gradient_limits() {
        let ws = synthetic_workspace(&[250.0], &[[0.5; 3]], &[2.0], &[0.2]);
        assert!(grad_depth_wrt_sigma(&ws, 1.0)[0].abs() < 1e-12);
        let (s, d, t) = (1e-8, 0.2, 2.0);
        let ws = synthetic_workspace(&[s], &[[0.5; 3]], &[t], &[d]);
        let g = grad_depth_wrt_sigma(&ws, 1.0)[0];
        assert!((g - d * t).abs() < 1e-8);
    }

    fn loss_of(sigma: &[f64], color: &[[f64; 3]], t: &[f64], delta: &[f64], up: [f64; 3], up_d: f64) -> f64 {
        let ws = synthetic_workspace(sigma, color, t, delta);
        up.iter().zip(ws.color_hat).map(|(u, c)| u * c).sum::<f64>() + up_d * ws.depth_hat
    }

    #[test]
    fn per_sample_derivatives_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for _ in 0..20 {
            let n = 10;
            let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..8.0)).collect();
            let color: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let delta: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..0.2)).collect();
            let mut t = Vec::new();
            let mut acc = 0.3;
            for d in &delta {
                t.push(acc + d / 2.0);
                acc += d;
            }
            let up = [rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)];
            let up_d = rng.random_range(-1.0..1.0);
            let ws = synthetic_workspace(&sigma, &color, &t, &delta);
            let contrib = sample_contributions(&ws, up, up_d);
            let h = 1e-6;
            for i in 0..n {
                let mut sp = sigma.clone();
                let mut sm = sigma.clone();
                sp[i] += h;
                sm[i] -= h;
                let num = (loss_of(&sp, &color, &t, &delta, up, up_d) - loss_of(&sm, &color, &t, &delta, up, up_d)) / (2.0 * h);
                let rel = (num - contrib[i].d_sigma).abs() / num.abs().max(1e-4);
                assert!(rel < 1e-6, "sigma {i}: {} vs {num}", contrib[i].d_sigma);
                for ch in 0..3 {
                    let mut cp = color.clone();
                    let mut cm = color.clone();
                    cp[i][ch] += h;
                    cm[i][ch] -= h;
                    let num = (loss_of(&sigma, &cp, &t, &delta, up, up_d) - loss_of(&sigma, &cm, &t, &delta, up, up_d)) / (2.0 * h);
                    let rel = (num - contrib[i].d_color[ch]).abs() / num.abs().max(1e-4);
                    assert!(rel < 1e-6);
                }
            }
        }
    }

    #[test]
    fn prefix_and_suffix_forms_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let n = rng.random_range(1..20);
            let sigma: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..10.0)).collect();
            let color: Vec<[f64; 3]> = (0..n).map(|_| [rng.random(), rng.random(), rng.random()]).collect();
            let delta: Vec<f64> = (0..n).map(|_| rng.random_range(0.01..0.3)).collect();
            let t: Vec<f64> = (0..n).map(|i| 0.1 + i as f64 * 0.3).collect();
            let ws = synthetic_workspace(&sigma, &color, &t, &delta);
            let g = grad_color_wrt_params(&ws, [1.0, 0.0, 0.0]);
            for i in 0..n {
                // δ_i [c_i T_{i+1} − Σ_{j>i} c_j w_j]
                let suffix: f64 = (i + 1..n).map(|j| color[j][0] * ws.weight[j]).sum();
                let alt = delta[i] * (color[i][0] * ws.transmittance[i + 1] - suffix);
                assert!((alt - g[i].d_sigma).abs() < 1e-13, "{alt} vs {}", g[i].d_sigma);
            }
        }
    }

    #[test]
    fn map_and_ray_gradients_match_finite_differences() {
        let summary = random_gradcheck(&GradcheckSpec { cases: 20, seed: 31, ..Default::default() }).unwrap();
        assert_eq!(summary.cases, 20);
        assert!(summary.map_params_checked > 20 * 28);
        assert!(summary.map_max_rel_err < 1e-5, "{}", summary.to_text());
        assert!(summary.ray_max_rel_err < 1e-4, "{}", summary.to_text());
    }

    #[test]
    fn live_basis_direction_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(43);
        let mut configs = 0;
        while configs < 10 {
            let grid = random_grid(&mut rng, 8);
            let ray = random_ray(&mut rng, &grid);
            let settings = RenderSettings::for_grid(&grid);
            let target = ([rng.random(), rng.random(), rng.random()], rng.random_range(0.2..1.0));
            let mut ws = RayWorkspace::default();
            let r = render_ray(&grid, &ray, &settings, &mut ws);
            if !r.hit {
                continue;
            }
            let up: [f64; 3] = [0, 1, 2].map(|ch| 2.0 * (r.color[ch] - target.0[ch]));
            let up_d = 2.0 * 0.5 * (r.depth - target.1);
            let contrib = sample_contributions(&ws, up, up_d);
            let d_dir = grad_wrt_ray(&grid, &ws, &contrib).d_direction
                + grad_direction_via_basis(&grid, &ws, &contrib, &ray.direction);
            let (_, base_sig) = ray_loss(&grid, &ray, &settings, &sh_basis(&ray.direction), target, 0.5);
            let params = [ray.direction.x, ray.direction.y, ray.direction.z];
            let report = fd_check(
                |x| {
                    let d = Vector3::new(x[0], x[1], x[2]);
                    let r = Ray { origin: ray.origin, direction: d };
                    let (l, sig) = ray_loss(&grid, &r, &settings, &sh_basis(&d), target, 0.5);
                    if sig == base_sig { Probe::Value(l) } else { Probe::Kink }
                },
                &params,
                d_dir.as_slice(),
                1e-7,
                1e-3,
            )
            .unwrap();
            if report.has_kinks() {
                continue;
            }
            configs += 1;
            assert!(report.max_rel_err() < 1e-4, "{}", report.to_text());
        }
    }

    #[test]
    fn constant_grid_has_no_ray_gradient() {
        let geo = GridGeometry::new([4; 3], Vector3::zeros(), 0.25).unwrap();
        let mut block = [0.1; PARAMS_PER_VERTEX];
        block[0] = 3.0;
        let grid = VoxelGrid::filled(geo, &crate::grid::VertexPayload::from_block(&block));
        let ray = Ray::new(Vector3::new(0.5, 0.5, 0.01), Vector3::z()).unwrap();
        let mut ws = RayWorkspace::default();
        render_ray(&grid, &ray, &RenderSettings::for_grid(&grid), &mut ws);
        let contrib = sample_contributions(&ws, [1.0, -0.5, 0.2], 0.3);
        let pg = grad_wrt_ray(&grid, &ws, &contrib);
        assert!(pg.d_origin.norm() < 1e-12);
        assert!(pg.d_direction.norm() < 1e-12);
    }

    #[test]
    fn single_sample_direction_is_t_times_origin() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let grid = random_grid(&mut rng, 4);
        let ray = Ray::new(Vector3::new(0.2, 0.3, 0.01), Vector3::new(0.1, 0.2, 1.0).normalize()).unwrap();
        let settings = RenderSettings {
            step: 0.1,
            t_near: 0.2,
            t_far: 0.3,
            early_termination: 0.0,
        };
        let mut ws = RayWorkspace::default();
        render_ray(&grid, &ray, &settings, &mut ws);
        assert_eq!(ws.len(), 1);
        let contrib = sample_contributions(&ws, [0.3, 0.1, -0.2], 0.5);
        let pg = grad_wrt_ray(&grid, &ws, &contrib);
        assert_eq!(pg.d_direction, pg.d_origin * ws.t(0));
    }

    #[test]
    fn zero_upstream_gives_empty_buffer() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let grid = random_grid(&mut rng, 4);
        let ray = random_ray(&mut rng, &grid);
        let mut ws = RayWorkspace::default();
        render_ray(&grid, &ray, &RenderSettings::for_grid(&grid), &mut ws);
        let contrib = sample_contributions(&ws, [0.0; 3], 0.0);
        let mut buf = GradientBuffer::new();
        backprop_to_vertices(&grid, &ws, &contrib, &mut buf);
        assert!(buf.is_empty());
    }

    #[test]
    fn sample_on_vertex_lands_on_that_vertex() {
        let geo = GridGeometry::new([2; 3], Vector3::zeros(), 1.0).unwrap();
        let mut grid = VoxelGrid::empty(geo.clone());
        for v in 0..geo.vertex_count() {
            grid.block_mut(v)[0] = 1.0;
        }
        // one sample at t = 1 → p = (1, 1, 1), a lattice vertex
        let ray = Ray::new(Vector3::new(1.0, 1.0, 0.0), Vector3::z()).unwrap();
        let settings = RenderSettings {
            step: 0.5,
            t_near: 0.75,
            t_far: 1.25,
            early_termination: 0.0,
        };
        let mut ws = RayWorkspace::default();
        render_ray(&grid, &ray, &settings, &mut ws);
        assert_eq!(ws.len(), 1);
        let contrib = sample_contributions(&ws, [1.0; 3], 1.0);
        let mut buf = GradientBuffer::new();
        backprop_to_vertices(&grid, &ws, &contrib, &mut buf);
        assert_eq!(buf.sorted_indices(), vec![geo.vertex_index(1, 1, 1)]);
    }

    #[test]
    fn gradient_vanishes_at_minimum_and_is_linear() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let grid = random_grid(&mut rng, 6);
        let ray = random_ray(&mut rng, &grid);
        let mut ws = RayWorkspace::default();
        let r = render_ray(&grid, &ray, &RenderSettings::for_grid(&grid), &mut ws);
        // loss at its minimum: residuals are exactly zero
        let up: [f64; 3] = [0, 1, 2].map(|ch| 2.0 * (r.color[ch] - r.color[ch]));
        let contrib = sample_contributions(&ws, up, 2.0 * (r.depth - r.depth));
        let mut buf = GradientBuffer::new();
        backprop_to_vertices(&grid, &ws, &contrib, &mut buf);
        assert_eq!(buf.max_abs(), 0.0);

        let (a, b) = (0.3, -1.7);
        let u1 = ([0.2, -0.1, 0.4], 0.5);
        let u2 = ([-0.3, 0.6, 0.1], -0.2);
        let mut g1 = GradientBuffer::new();
        backprop_to_vertices(&grid, &ws, &sample_contributions(&ws, u1.0, u1.1), &mut g1);
        let mut g2 = GradientBuffer::new();
        backprop_to_vertices(&grid, &ws, &sample_contributions(&ws, u2.0, u2.1), &mut g2);
        let combo = sample_contributions(
            &ws,
            [0, 1, 2].map(|c| a * u1.0[c] + b * u2.0[c]),
            a * u1.1 + b * u2.1,
        );
        let mut g12 = GradientBuffer::new();
        backprop_to_vertices(&grid, &ws, &combo, &mut g12);
        for (v, g) in g12.sorted_entries() {
            let x = g1.get(v).copied().unwrap_or([0.0; PARAMS_PER_VERTEX]);
            let y = g2.get(v).copied().unwrap_or([0.0; PARAMS_PER_VERTEX]);
            for k in 0..PARAMS_PER_VERTEX {
                assert!((g[k] - (a * x[k] + b * y[k])).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn harness_self_test() {
        // f(x) = Σ k x_k² + x_0 x_1
        let f = |x: &[f64]| -> f64 {
            x.iter().enumerate().map(|(k, v)| (k as f64 + 1.0) * v * v).sum::<f64>() + x[0] * x[1]
        };
        let x = [0.3, -1.2, 2.0, 0.7];
        let grad: Vec<f64> = (0..4)
            .map(|k| {
                2.0 * (k as f64 + 1.0) * x[k]
                    + if k == 0 { x[1] } else if k == 1 { x[0] } else { 0.0 }
            })
            .collect();
        let r = fd_check_smooth(f, &x, &grad, 1e-4).unwrap();
        assert!(r.max_rel_err() < 1e-10, "{}", r.to_text());

        let lin = |x: &[f64]| 3.0 * x[0] - 2.0 * x[1];
        let r = fd_check_smooth(lin, &[1.0, 1.0], &[3.0, -2.0], 1e-3).unwrap();
        assert!(r.max_rel_err() < 1e-12);

        let bad = |_: &[f64]| f64::NAN;
        assert!(fd_check_smooth(bad, &[1.0], &[0.0], 1e-3).is_err());
    }
}
