//! Map-quality and trajectory metrics, and the tracking speed/accuracy sweep.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::camera::{generate_ray, CameraIntrinsics, Pose};
use crate::dataset::{Dataset, Frame};
use crate::grid::VoxelGrid;
use crate::render::{render_ray, RayWorkspace, RenderSettings};
use crate::tracking::{track_sequence, TrackingConfig};
use crate::{Error, Result};

pub const PSNR_CAP_DB: f64 = 99.0;
pub const ASSOCIATION_WINDOW: f64 = 0.02;
pub const RPE_INTERVAL_M: f64 = 1.0;

/// Timestamped camera-to-world poses with strictly increasing timestamps.
#[derive(Clone, Debug, PartialEq)]
pub struct Trajectory {
    entries: Vec<(f64, Pose)>,
}

impl Trajectory {
    pub fn new(entries: Vec<(f64, Pose)>) -> Result<Self> {
        for (i, w) in entries.windows(2).enumerate() {
            if !(w[1].0 > w[0].0) {
                return Err(Error::Trajectory(format!(
                    "timestamps must increase strictly: entry {} has {} after {}",
                    i + 1,
                    w[1].0,
                    w[0].0
                )));
            }
        }
        if let Some((t, _)) = entries.iter().find(|(t, _)| !t.is_finite()) {
            return Err(Error::Trajectory(format!("non-finite timestamp {t}")));
        }
        Ok(Self { entries })
    }

    pub fn entries(&self) -> &[(f64, Pose)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn poses(&self) -> impl Iterator<Item = &Pose> {
        self.entries.iter().map(|(_, p)| p)
    }

    /// Left-multiplies every pose by `g`.
    pub fn transformed(&self, g: &Pose) -> Self {
        Self {
            entries: self.entries.iter().map(|(t, p)| (*t, g.compose(p))).collect(),
        }
    }

    pub fn path_length(&self) -> f64 {
        self.entries
            .windows(2)
            .map(|w| (w[1].1.translation - w[0].1.translation).norm())
            .sum()
    }

    /// TUM text: `timestamp tx ty tz qx qy qz qw`, 17 significant digits.
    pub fn to_tum(&self) -> String {
        let mut s = String::from("# timestamp tx ty tz qx qy qz qw\n");
        for (t, p) in &self.entries {
            let q = p.rotation.quaternion();
            let vals = [
                *t,
                p.translation.x,
                p.translation.y,
                p.translation.z,
                q.i,
                q.j,
                q.k,
                q.w,
            ];
            let line: Vec<String> = vals.iter().map(|v| format!("{v:.16e}")).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }

    pub fn parse_tum(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Trajectory(format!("line {}: {e}", lineno + 1)))?;
            if vals.len() != 8 {
                return Err(Error::Trajectory(format!(
                    "line {}: expected 8 fields, found {}",
                    lineno + 1,
                    vals.len()
                )));
            }
            let q = Quaternion::new(vals[7], vals[4], vals[5], vals[6]);
            let norm = q.norm();
            if !(norm > 0.5 && norm < 1.5) {
                return Err(Error::Trajectory(format!(
                    "line {}: quaternion norm {norm} is not close to 1",
                    lineno + 1
                )));
            }
            // Keep bits exactly when the file was written from a unit quaternion.
            let rotation = if (norm - 1.0).abs() < 1e-12 {
                UnitQuaternion::new_unchecked(q)
            } else {
                UnitQuaternion::new_normalize(q)
            };
            entries.push((
                vals[0],
                Pose::new(rotation, Vector3::new(vals[1], vals[2], vals[3])),
            ));
        }
        Self::new(entries)
    }

    pub fn save_tum(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tum()).map_err(|e| Error::io(path, e))
    }

    pub fn load_tum(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse_tum(&text)
    }
}

/// Index pairs `(estimate, reference)` whose timestamps are within `window`
/// seconds, nearest first, each entry used at most once.
pub fn associate(estimate: &Trajectory, reference: &Trajectory, window: f64) -> Vec<(usize, usize)> {
    let est = estimate.entries();
    let mut used = vec![false; est.len()];
    let mut pairs = Vec::new();
    for (ri, (tr, _)) in reference.entries().iter().enumerate() {
        let pos = est.partition_point(|(t, _)| t < tr);
        let best = [pos.checked_sub(1), Some(pos)]
            .into_iter()
            .flatten()
            .filter(|&i| i < est.len() && !used[i])
            .min_by(|&a, &b| (est[a].0 - tr).abs().total_cmp(&(est[b].0 - tr).abs()));
        if let Some(ei) = best {
            if (est[ei].0 - tr).abs() <= window {
                used[ei] = true;
                pairs.push((ei, ri));
            }
        }
    }
    pairs
}

/// Rigid transform `g` minimizing `Σ |g(src_k) − dst_k|²`.
pub fn align_rigid(src: &[Vector3<f64>], dst: &[Vector3<f64>]) -> Pose {
    let n = src.len() as f64;
    let mu_s = src.iter().sum::<Vector3<f64>>() / n;
    let mu_d = dst.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    for (s, d) in src.iter().zip(dst) {
        cov += (d - mu_d) * (s - mu_s).transpose();
    }
    let svd = cov.svd(true, true);
    let (u, v_t) = (svd.u.unwrap(), svd.v_t.unwrap());
    let mut fix = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        fix[(2, 2)] = -1.0;
    }
    let r = u * fix * v_t;
    let rot = UnitQuaternion::from_matrix(&r);
    Pose::new(rot, mu_d - rot * mu_s)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AteStats {
    pub rmse: f64,
    pub mean: f64,
    pub std: f64,
    pub pairs: usize,
}

/// Translation residual statistics after optional rigid alignment of the
/// estimate onto the reference.
pub fn ate(estimate: &Trajectory, reference: &Trajectory, align: bool) -> Result<AteStats> {
    let pairs = associate(estimate, reference, ASSOCIATION_WINDOW);
    if pairs.len() < 2 {
        return Err(Error::Metric(format!(
            "ATE needs at least 2 associated poses, found {}",
            pairs.len()
        )));
    }
    let est: Vec<_> = pairs.iter().map(|&(e, _)| estimate.entries()[e].1.translation).collect();
    let gt: Vec<_> = pairs.iter().map(|&(_, r)| reference.entries()[r].1.translation).collect();
    let g = if align { align_rigid(&est, &gt) } else { Pose::identity() };
    let errs: Vec<f64> = est
        .iter()
        .zip(&gt)
        .map(|(e, r)| (g.transform_point(e) - r).norm())
        .collect();
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let rmse = (errs.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let std = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / n).sqrt();
    Ok(AteStats {
        rmse,
        mean,
        std,
        pairs: errs.len(),
    })
}

pub fn ate_rmse(estimate: &Trajectory, reference: &Trajectory, align: bool) -> Result<f64> {
    ate(estimate, reference, align).map(|s| s.rmse)
}

/// Angle of the rotation taking `a` to `b`, degrees. The error quaternion
/// `a⁻¹ b` is expanded by hand so that equal inputs give exactly zero.
pub fn rotation_angle_deg(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
    let (qa, qb) = (a.quaternion(), b.quaternion());
    let (va, vb) = (qa.vector(), qb.vector());
    let w = qa.w * qb.w + va.dot(&vb);
    let v = vb * qa.w - va * qb.w - va.cross(&vb);
    (2.0 * v.norm().atan2(w.abs())).to_degrees()
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RpeStats {
    pub trans_rmse: f64,
    pub rot_rmse_deg: f64,
    pub pairs: usize,
}

/// Relative pose error over pairs separated by `interval` meters of
/// reference path.
pub fn rpe(estimate: &Trajectory, reference: &Trajectory, interval: f64) -> Result<RpeStats> {
    let pairs = associate(estimate, reference, ASSOCIATION_WINDOW);
    let est: Vec<Pose> = pairs.iter().map(|&(e, _)| estimate.entries()[e].1).collect();
    let gt: Vec<Pose> = pairs.iter().map(|&(_, r)| reference.entries()[r].1).collect();
    let mut cum = vec![0.0; gt.len()];
    for k in 1..gt.len() {
        cum[k] = cum[k - 1] + (gt[k].translation - gt[k - 1].translation).norm();
    }
    let (mut st, mut sr, mut count) = (0.0, 0.0, 0usize);
    for i in 0..gt.len() {
        let j = cum.partition_point(|&c| c - cum[i] < interval);
        if j >= gt.len() {
            break;
        }
        let rel_gt = gt[i].inverse().compose(&gt[j]);
        let rel_est = est[i].inverse().compose(&est[j]);
        let e = rel_gt.inverse().compose(&rel_est);
        st += e.translation.norm_squared();
        sr += rotation_angle_deg(&rel_gt.rotation, &rel_est.rotation).powi(2);
        count += 1;
    }
    if count == 0 {
        return Err(Error::Metric(format!(
            "no pose pairs {interval} m apart (reference path {:.3} m)",
            cum.last().copied().unwrap_or(0.0)
        )));
    }
    Ok(RpeStats {
        trans_rmse: (st / count as f64).sqrt(),
        rot_rmse_deg: (sr / count as f64).sqrt(),
        pairs: count,
    })
}

/// `10 log10(1 / MSE)` with MSE averaged over pixels and channels.
pub fn psnr(rendered: &[[f64; 3]], reference: &[[f64; 3]]) -> Result<f64> {
    if rendered.len() != reference.len() {
        return Err(Error::Metric(format!(
            "image sizes differ: {} vs {}",
            rendered.len(),
            reference.len()
        )));
    }
    if rendered.is_empty() {
        return Err(Error::Metric("PSNR over an empty pixel set".into()));
    }
    let mut sum = 0.0;
    for (a, b) in rendered.iter().zip(reference) {
        for ch in 0..3 {
            sum += (a[ch] - b[ch]).powi(2);
        }
    }
    Ok(psnr_from_mse(sum / (3 * rendered.len()) as f64))
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP_DB
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB)
    }
}

/// Mean absolute depth error over pixels where `valid` holds.
pub fn depth_l1(rendered: &[f64], reference: &[f64], valid: &[bool]) -> Result<f64> {
    if rendered.len() != reference.len() || valid.len() != reference.len() {
        return Err(Error::Metric("depth image sizes differ".into()));
    }
    let (mut sum, mut n) = (0.0, 0usize);
    for ((a, b), &ok) in rendered.iter().zip(reference).zip(valid) {
        if ok {
            sum += (a - b).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(Error::Metric("depth L1 over an empty mask".into()));
    }
    Ok(sum / n as f64)
}

/// Which pixels of which frames feed the map-quality metrics.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PixelSampling {
    pub images: usize,
    pub pixels_per_image: usize,
    pub seed: u64,
}

impl Default for PixelSampling {
    fn default() -> Self {
        Self {
            images: 10,
            pixels_per_image: 10_000,
            seed: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewMetrics {
    pub psnr: f64,
    pub depth_l1: f64,
    pub color_samples: usize,
    pub depth_samples: usize,
}

/// Renders sampled pixels of `frames` at their ground-truth poses and scores
/// them. A pixel count at or above the frame size renders every pixel.
pub fn evaluate_views(
    grid: &VoxelGrid,
    intrinsics: &CameraIntrinsics,
    frames: &[&Frame],
    sampling: &PixelSampling,
    settings: &RenderSettings,
) -> Result<ViewMetrics> {
    let mut rng = ChaCha8Rng::seed_from_u64(sampling.seed);
    let chosen: Vec<usize> = if sampling.images >= frames.len() {
        (0..frames.len()).collect()
    } else {
        let mut v = sample(&mut rng, frames.len(), sampling.images).into_vec();
        v.sort_unstable();
        v
    };
    let (mut rendered, mut reference) = (Vec::new(), Vec::new());
    let (mut d_hat, mut d_ref) = (Vec::new(), Vec::new());
    let mut ws = RayWorkspace::default();
    for &fi in &chosen {
        let frame = frames[fi];
        let pose = frame
            .gt_pose
            .ok_or_else(|| Error::Metric(format!("frame {fi} has no pose")))?;
        let n = frame.pixel_count();
        let pixels: Vec<usize> = if sampling.pixels_per_image >= n {
            (0..n).collect()
        } else {
            let mut v = sample(&mut rng, n, sampling.pixels_per_image).into_vec();
            v.sort_unstable();
            v
        };
        for i in pixels {
            let (x, y) = (i % frame.width as usize, i / frame.width as usize);
            let ray = generate_ray(intrinsics, &pose, x as f64, y as f64)?;
            let r = render_ray(grid, &ray, settings, &mut ws);
            rendered.push(r.color);
            reference.push(frame.color[i]);
            if frame.depth_valid(i) {
                d_hat.push(r.depth);
                d_ref.push(frame.depth[i]);
            }
        }
    }
    let valid = vec![true; d_ref.len()];
    Ok(ViewMetrics {
        psnr: psnr(&rendered, &reference)?,
        depth_l1: depth_l1(&d_hat, &d_ref, &valid)?,
        color_samples: rendered.len(),
        depth_samples: d_ref.len(),
    })
}

/// Metrics gathered for one run; `None` marks a metric that was not computed.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub psnr: Option<f64>,
    pub depth_l1: Option<f64>,
    pub ate_rmse: Option<f64>,
    pub ate_rmse_unaligned: Option<f64>,
    pub rpe_t: Option<f64>,
    pub rpe_r: Option<f64>,
    pub color_samples: usize,
    pub depth_samples: usize,
    pub ate_pairs: usize,
    pub rpe_pairs: usize,
}

impl MetricReport {
    pub fn add_views(&mut self, v: &ViewMetrics) {
        self.psnr = Some(v.psnr);
        self.depth_l1 = Some(v.depth_l1);
        self.color_samples = v.color_samples;
        self.depth_samples = v.depth_samples;
    }

    /// Fills the trajectory metrics; RPE is left empty when the reference
    /// path is shorter than the interval.
    pub fn add_trajectory(&mut self, estimate: &Trajectory, reference: &Trajectory) -> Result<()> {
        let aligned = ate(estimate, reference, true)?;
        self.ate_rmse = Some(aligned.rmse);
        self.ate_rmse_unaligned = Some(ate(estimate, reference, false)?.rmse);
        self.ate_pairs = aligned.pairs;
        if let Ok(r) = rpe(estimate, reference, RPE_INTERVAL_M) {
            self.rpe_t = Some(r.trans_rmse);
            self.rpe_r = Some(r.rot_rmse_deg);
            self.rpe_pairs = r.pairs;
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("metric report serializes")
    }

    pub fn to_table(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |x| format!("{x:.6}"));
        let rows = [
            ("psnr [dB]", fmt(self.psnr), self.color_samples),
            ("depth_l1 [m]", fmt(self.depth_l1), self.depth_samples),
            ("ate_rmse [m]", fmt(self.ate_rmse), self.ate_pairs),
            ("ate_rmse_unaligned [m]", fmt(self.ate_rmse_unaligned), self.ate_pairs),
            ("rpe_t [m]", fmt(self.rpe_t), self.rpe_pairs),
            ("rpe_r [deg]", fmt(self.rpe_r), self.rpe_pairs),
        ];
        let mut s = format!("{:<24} {:>14} {:>10}\n", "metric", "value", "samples");
        for (name, val, n) in rows {
            let _ = writeln!(s, "{name:<24} {val:>14} {n:>10}");
        }
        s
    }
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for k in i..=j {
            r[idx[k]] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties. `NaN` when either
/// side is constant.
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    assert_eq!(x.len(), y.len());
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx).powi(2);
        syy += (b - my).powi(2);
    }
    sxy / (sxx * syy).sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub rays: usize,
    pub iters: usize,
    /// Aligned ATE RMSE, or `None` when the run failed.
    pub ate_m: Option<f64>,
    /// Standard deviation of the per-frame aligned translation error.
    pub ate_std_m: Option<f64>,
    pub rpe_t_m: Option<f64>,
    pub rpe_r_deg: Option<f64>,
    pub ms_per_frame: f64,
    pub failed_frames: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Spearman correlation between ray budget and ATE over successful rows.
    pub rays_ate_spearman: f64,
}

impl SweepResult {
    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "nan".to_string(), |x| format!("{x:.9}"));
        let mut s = String::from("rays,iters,ate_m,ate_std_m,rpe_t_m,rpe_r_deg,ms_per_frame\n");
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{:.3}",
                r.rays,
                r.iters,
                opt(r.ate_m),
                opt(r.ate_std_m),
                opt(r.rpe_t_m),
                opt(r.rpe_r_deg),
                r.ms_per_frame
            );
        }
        s
    }
}

/// Tracks the whole sequence once per `(rays, iterations)` setting.
pub fn speed_accuracy_sweep(
    grid: &VoxelGrid,
    dataset: &Dataset,
    ray_counts: &[usize],
    iteration_counts: &[usize],
    base: &TrackingConfig,
) -> Result<SweepResult> {
    let reference = dataset
        .trajectory()
        .ok_or_else(|| Error::Dataset("sweep needs ground-truth poses".into()))?;
    let mut rows = Vec::new();
    for &iters in iteration_counts {
        for &rays in ray_counts {
            let cfg = TrackingConfig {
                rays_per_iteration: rays,
                iterations: iters,
                ..base.clone()
            };
            let start = Instant::now();
            let run = track_sequence(grid, dataset, &cfg);
            let ms_per_frame = start.elapsed().as_secs_f64() * 1e3 / dataset.frames.len() as f64;
            let mut row = SweepRow {
                rays,
                iters,
                ate_m: None,
                ate_std_m: None,
                rpe_t_m: None,
                rpe_r_deg: None,
                ms_per_frame,
                failed_frames: 0,
            };
            match run {
                Ok(seq) => {
                    row.failed_frames = seq.statuses.iter().filter(|s| s.failed).count();
                    if let Ok(a) = ate(&seq.trajectory, &reference, true) {
                        row.ate_m = Some(a.rmse);
                        row.ate_std_m = Some(a.std);
                    }
                    if let Ok(r) = rpe(&seq.trajectory, &reference, RPE_INTERVAL_M) {
                        row.rpe_t_m = Some(r.trans_rmse);
                        row.rpe_r_deg = Some(r.rot_rmse_deg);
                    }
                }
                Err(e) => log::warn!("sweep setting rays={rays} iters={iters} failed: {e}"),
            }
            rows.push(row);
        }
    }
    let ok: Vec<&SweepRow> = rows.iter().filter(|r| r.ate_m.is_some()).collect();
    let rays: Vec<f64> = ok.iter().map(|r| r.rays as f64).collect();
    let ates: Vec<f64> = ok.iter().map(|r| r.ate_m.unwrap()).collect();
    let rays_ate_spearman = if ok.len() >= 2 { spearman(&rays, &ates) } else { f64::NAN };
    Ok(SweepResult {
        rows,
        rays_ate_spearman,
    })
}
