//! True-posterior diagnostics for the synthetic model: unnormalized
//! log-posterior, MAP search, Laplace fit, Mahalanobis distance and density
//! ratio to the MAP, and dense grid evaluation.

use std::f64::consts::PI;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::decoder_mean;
use crate::synthetic::stream_rng;
use crate::vae::gaussian_loglik;

pub type Mat2 = [[f64; 2]; 2];

/// Default grid bounds and resolution for posterior evaluation.
pub const GRID_BOUNDS: (f64, f64) = (-5.0, 5.0);
pub const GRID_RESOLUTION: usize = 400;

pub const HESSIAN_STEP: f64 = 1e-4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mapping {
    /// `f(z) = A z + [0, 0, z1 z2]`
    Oracle,
    /// `f(z) = A z`; the posterior is exactly Gaussian.
    Linear,
}

/// Generative model `z ~ N(0, I)`, `x | z ~ N(f(z), σ² I)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentModel {
    pub mapping: Mapping,
    pub sigma: f64,
}

impl LatentModel {
    pub fn oracle(sigma: f64) -> Self {
        LatentModel {
            mapping: Mapping::Oracle,
            sigma,
        }
    }

    pub fn linear(sigma: f64) -> Self {
        LatentModel {
            mapping: Mapping::Linear,
            sigma,
        }
    }

    pub fn mean(&self, z: [f64; 2]) -> [f64; 3] {
        match self.mapping {
            Mapping::Oracle => decoder_mean(z),
            Mapping::Linear => [z[0], z[1], z[0] + z[1]],
        }
    }

    fn jacobian(&self, z: [f64; 2]) -> [[f64; 2]; 3] {
        match self.mapping {
            Mapping::Oracle => [[1.0, 0.0], [0.0, 1.0], [1.0 + z[1], 1.0 + z[0]]],
            Mapping::Linear => [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]],
        }
    }

    /// `log p(x | z) + log p(z)`, i.e. the log-posterior up to `log p(x)`.
    pub fn log_posterior_unnorm(&self, z: [f64; 2], x: &[f64; 3]) -> f64 {
        let lik = gaussian_loglik(x, &self.mean(z), self.sigma).expect("sigma validated at construction");
        lik - (2.0 * PI).ln() - 0.5 * (z[0] * z[0] + z[1] * z[1])
    }

    /// Analytic gradient of [`LatentModel::log_posterior_unnorm`] in `z`.
    pub fn grad_log_posterior(&self, z: [f64; 2], x: &[f64; 3]) -> [f64; 2] {
        let f = self.mean(z);
        let j = self.jacobian(z);
        let s2 = self.sigma * self.sigma;
        let mut g = [-z[0], -z[1]];
        for i in 0..3 {
            let r = (x[i] - f[i]) / s2;
            g[0] += j[i][0] * r;
            g[1] += j[i][1] * r;
        }
        g
    }

    /// Analytic Hessian, used only to polish MAP iterates.
    fn hessian_analytic(&self, z: [f64; 2], x: &[f64; 3]) -> Mat2 {
        let f = self.mean(z);
        let j = self.jacobian(z);
        let s2 = self.sigma * self.sigma;
        let mut h = [[-1.0, 0.0], [0.0, -1.0]];
        for row in &j {
            for a in 0..2 {
                for b in 0..2 {
                    h[a][b] -= row[a] * row[b] / s2;
                }
            }
        }
        if self.mapping == Mapping::Oracle {
            let cross = (x[2] - f[2]) / s2;
            h[0][1] += cross;
            h[1][0] += cross;
        }
        h
    }

    /// Central finite-difference Hessian of the log-posterior.
    pub fn hessian_fd(&self, z: [f64; 2], x: &[f64; 3], h: f64) -> Mat2 {
        let f = |a: f64, b: f64| self.log_posterior_unnorm([z[0] + a, z[1] + b], x);
        let f0 = f(0.0, 0.0);
        let h00 = (f(h, 0.0) - 2.0 * f0 + f(-h, 0.0)) / (h * h);
        let h11 = (f(0.0, h) - 2.0 * f0 + f(0.0, -h)) / (h * h);
        let h01 = (f(h, h) - f(h, -h) - f(-h, h) + f(-h, -h)) / (4.0 * h * h);
        [[h00, h01], [h01, h11]]
    }
}

fn norm2(v: [f64; 2]) -> f64 {
    (v[0] * v[0] + v[1] * v[1]).sqrt()
}

/// Eigenvalues of a symmetric 2×2 matrix, ascending.
pub fn sym_eigenvalues(m: &Mat2) -> [f64; 2] {
    let tr = m[0][0] + m[1][1];
    let diff = 0.5 * (m[0][0] - m[1][1]);
    let disc = (diff * diff + m[0][1] * m[0][1]).sqrt();
    [0.5 * tr - disc, 0.5 * tr + disc]
}

pub fn inverse2(m: &Mat2) -> Result<Mat2> {
    let det = m[0][0] * m[1][1] - m[0][1] * m[1][0];
    if det == 0.0 || !det.is_finite() {
        return Err(Error::invalid("singular 2x2 matrix"));
    }
    Ok([[m[1][1] / det, -m[0][1] / det], [-m[1][0] / det, m[0][0] / det]])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MapSearch {
    /// Total number of starting points.
    pub restarts: usize,
    /// Gradient-ascent iterations per start.
    pub steps: usize,
    /// Initial step size; adapted by backtracking.
    pub lr: f64,
    pub seed: u64,
    /// Resolution of the coarse grid whose argmax seeds one start.
    pub seed_grid_resolution: usize,
    pub grad_tol: f64,
}

impl Default for MapSearch {
    fn default() -> Self {
        MapSearch {
            restarts: 5,
            steps: 2000,
            lr: 1e-3,
            seed: 0,
            seed_grid_resolution: 101,
            grad_tol: 1e-5,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    pub z: [f64; 2],
    pub log_post: f64,
    pub grad_norm: f64,
    pub converged: bool,
}

fn ascend(model: &LatentModel, x: &[f64; 3], start: [f64; 2], cfg: &MapSearch) -> MapResult {
    let mut z = start;
    let mut f = model.log_posterior_unnorm(z, x);
    let mut step = cfg.lr;
    for _ in 0..cfg.steps {
        let g = model.grad_log_posterior(z, x);
        if norm2(g) < 0.01 * cfg.grad_tol {
            break;
        }
        loop {
            let cand = [z[0] + step * g[0], z[1] + step * g[1]];
            let fc = model.log_posterior_unnorm(cand, x);
            if fc >= f {
                z = cand;
                f = fc;
                step *= 1.2;
                break;
            }
            step *= 0.5;
            if step < 1e-16 {
                break;
            }
        }
        if step < 1e-16 {
            break;
        }
    }
    // Newton polish while the Hessian is negative definite and it helps.
    for _ in 0..20 {
        let g = model.grad_log_posterior(z, x);
        if norm2(g) < 1e-3 * cfg.grad_tol {
            break;
        }
        let h = model.hessian_analytic(z, x);
        if sym_eigenvalues(&h)[1] >= 0.0 {
            break;
        }
        let Ok(hi) = inverse2(&h) else { break };
        let cand = [
            z[0] - (hi[0][0] * g[0] + hi[0][1] * g[1]),
            z[1] - (hi[1][0] * g[0] + hi[1][1] * g[1]),
        ];
        let fc = model.log_posterior_unnorm(cand, x);
        if fc < f - 1e-12 {
            break;
        }
        z = cand;
        f = fc;
    }
    let grad_norm = norm2(model.grad_log_posterior(z, x));
    MapResult {
        z,
        log_post: f,
        grad_norm,
        converged: grad_norm < cfg.grad_tol,
    }
}

/// Multi-start gradient ascent on the log-posterior. Starts are, in order:
/// `encoder_means` (typically the amortized posterior means), the origin,
/// the best node of a coarse grid, then standard-normal draws until
/// `restarts` starts exist. Returns the best endpoint; `converged` is false
/// if its gradient norm is not below `grad_tol`.
pub fn find_map(model: &LatentModel, x: &[f64; 3], encoder_means: &[[f64; 2]], cfg: &MapSearch) -> Result<MapResult> {
    if cfg.restarts == 0 {
        return Err(Error::invalid("find_map needs at least one restart"));
    }
    let mut starts = encoder_means.to_vec();
    starts.push([0.0, 0.0]);
    if cfg.seed_grid_resolution >= 2 {
        let grid = posterior_grid(model, x, GRID_BOUNDS, cfg.seed_grid_resolution)?;
        starts.push(grid.argmax().0);
    }
    let mut rng = stream_rng(cfg.seed, 7);
    while starts.len() < cfg.restarts {
        starts.push([StandardNormal.sample(&mut rng), StandardNormal.sample(&mut rng)]);
    }
    let best = starts
        .into_iter()
        .map(|s| ascend(model, x, s, cfg))
        .max_by(|a, b| a.log_post.total_cmp(&b.log_post))
        .expect("at least one start");
    Ok(best)
}

/// Local Gaussian approximation at the MAP.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LaplaceFit {
    pub z_map: [f64; 2],
    pub covariance: Mat2,
    pub precision: Mat2,
    pub log_post_at_map: f64,
}

/// `Σ = (-H)⁻¹` with `H` the symmetrized central-difference Hessian of the
/// log-posterior at `z_map`.
pub fn laplace_fit(model: &LatentModel, x: &[f64; 3], z_map: [f64; 2]) -> Result<LaplaceFit> {
    let g = norm2(model.grad_log_posterior(z_map, x));
    if !(g < 1e-4) {
        return Err(Error::invalid(format!("laplace_fit needs a local maximum, gradient norm is {g:.3e}")));
    }
    let (covariance, precision) = covariance_from_hessian(&model.hessian_fd(z_map, x, HESSIAN_STEP))?;
    Ok(LaplaceFit {
        z_map,
        covariance,
        precision,
        log_post_at_map: model.log_posterior_unnorm(z_map, x),
    })
}

/// Symmetrizes `h`, negates it into a precision matrix and inverts it.
/// Fails with the smallest eigenvalue if the precision is not positive
/// definite (a saddle or minimum rather than a maximum).
pub fn covariance_from_hessian(h: &Mat2) -> Result<(Mat2, Mat2)> {
    let off = 0.5 * (h[0][1] + h[1][0]);
    let precision = [[-h[0][0], -off], [-off, -h[1][1]]];
    let eig = sym_eigenvalues(&precision);
    if !(eig[0] > 0.0) {
        return Err(Error::NotPositiveDefinite { eigenvalue: eig[0] });
    }
    let mut covariance = inverse2(&precision)?;
    let c = 0.5 * (covariance[0][1] + covariance[1][0]);
    covariance[0][1] = c;
    covariance[1][0] = c;
    Ok((covariance, precision))
}

/// Alternative fit: covariance of the normalized posterior on a local grid
/// centred at the MAP (`half_width` per axis), kept for comparison with the
/// Laplace covariance.
pub fn moment_matched_fit(model: &LatentModel, x: &[f64; 3], z_map: [f64; 2], half_width: f64, resolution: usize) -> Result<LaplaceFit> {
    if resolution < 2 || !(half_width > 0.0) {
        return Err(Error::invalid("moment matching needs resolution >= 2 and a positive window"));
    }
    let step = 2.0 * half_width / (resolution - 1) as f64;
    let mut pts = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        for j in 0..resolution {
            let z = [z_map[0] - half_width + i as f64 * step, z_map[1] - half_width + j as f64 * step];
            pts.push((z, model.log_posterior_unnorm(z, x)));
        }
    }
    let mx = pts.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max);
    let (mut w, mut m) = (0.0, [0.0; 2]);
    for (z, l) in &pts {
        let p = (l - mx).exp();
        w += p;
        m[0] += p * z[0];
        m[1] += p * z[1];
    }
    m = [m[0] / w, m[1] / w];
    let mut cov = [[0.0; 2]; 2];
    for (z, l) in &pts {
        let p = (l - mx).exp() / w;
        let d = [z[0] - m[0], z[1] - m[1]];
        for a in 0..2 {
            for b in 0..2 {
                cov[a][b] += p * d[a] * d[b];
            }
        }
    }
    let precision = inverse2(&cov)?;
    Ok(LaplaceFit {
        z_map,
        covariance: cov,
        precision,
        log_post_at_map: model.log_posterior_unnorm(z_map, x),
    })
}

/// `sqrt((μ - z_MAP)ᵀ Σ⁻¹ (μ - z_MAP))`.
pub fn mahalanobis(mu: [f64; 2], fit: &LaplaceFit) -> f64 {
    let d = [mu[0] - fit.z_map[0], mu[1] - fit.z_map[1]];
    let p = &fit.precision;
    let q = d[0] * (p[0][0] * d[0] + p[0][1] * d[1]) + d[1] * (p[1][0] * d[0] + p[1][1] * d[1]);
    q.max(0.0).sqrt()
}

/// `p(μ | x) / p(z_MAP | x)`; the evidence cancels.
pub fn density_ratio(model: &LatentModel, mu: [f64; 2], x: &[f64; 3], z_map: [f64; 2]) -> f64 {
    (model.log_posterior_unnorm(mu, x) - model.log_posterior_unnorm(z_map, x)).exp()
}

/// Unnormalized log-posterior on a square lattice. Node `(i, j)` sits at
/// `(lo + i h, lo + j h)` with `h = (hi - lo) / (resolution - 1)` and is
/// stored at `i * resolution + j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorGrid {
    pub bounds: (f64, f64),
    pub resolution: usize,
    pub log_density: Vec<f64>,
}

/// JSON header written next to a grid CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridHeader {
    pub bounds: (f64, f64),
    pub resolution: usize,
    pub x: [f64; 3],
    pub sigma: f64,
    #[serde(default)]
    pub markers: Vec<GridMarker>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridMarker {
    pub label: String,
    pub z: [f64; 2],
}

impl PosteriorGrid {
    pub fn cell_width(&self) -> f64 {
        (self.bounds.1 - self.bounds.0) / (self.resolution - 1) as f64
    }

    pub fn node(&self, i: usize, j: usize) -> [f64; 2] {
        let h = self.cell_width();
        [self.bounds.0 + i as f64 * h, self.bounds.0 + j as f64 * h]
    }

    pub fn argmax(&self) -> ([f64; 2], f64) {
        let (idx, v) = self
            .log_density
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .expect("non-empty grid");
        (self.node(idx / self.resolution, idx % self.resolution), *v)
    }

    /// `log ∫ exp(log_density) dz` by the lattice Riemann sum.
    pub fn log_integral(&self) -> f64 {
        let m = self.log_density.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = self.log_density.iter().map(|l| (l - m).exp()).sum();
        m + s.ln() + 2.0 * self.cell_width().ln()
    }

    pub fn write_csv(&self, path: impl AsRef<Path>, header: &GridHeader) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["z1", "z2", "log_density"])?;
        for i in 0..self.resolution {
            for j in 0..self.resolution {
                let z = self.node(i, j);
                let v = self.log_density[i * self.resolution + j];
                w.write_record([z[0].to_string(), z[1].to_string(), v.to_string()])?;
            }
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        crate::models::write_json(path.with_extension("json"), header)
    }
}

pub fn posterior_grid(model: &LatentModel, x: &[f64; 3], bounds: (f64, f64), resolution: usize) -> Result<PosteriorGrid> {
    if resolution < 2 {
        return Err(Error::invalid("grid resolution must be at least 2"));
    }
    if !(bounds.1 > bounds.0) {
        return Err(Error::invalid("grid bounds must satisfy lo < hi"));
    }
    let h = (bounds.1 - bounds.0) / (resolution - 1) as f64;
    let mut log_density = Vec::with_capacity(resolution * resolution);
    for i in 0..resolution {
        let z1 = bounds.0 + i as f64 * h;
        for j in 0..resolution {
            let z2 = bounds.0 + j as f64 * h;
            log_density.push(model.log_posterior_unnorm([z1, z2], x));
        }
    }
    Ok(PosteriorGrid {
        bounds,
        resolution,
        log_density,
    })
}

/// `KL(q ‖ p(z | x))` by quadrature of `q log(q / p)` on a grid spanning
/// `±8` posterior standard deviations of `q`, with `log_evidence` the
/// normalizer of the true posterior.
pub fn kl_to_posterior_grid(model: &LatentModel, x: &[f64; 3], q: &crate::models::PosteriorParams, log_evidence: f64, resolution: usize) -> Result<f64> {
    if resolution < 2 || q.dim() != 2 {
        return Err(Error::invalid("kl quadrature needs a 2-D posterior and resolution >= 2"));
    }
    let sd = [(0.5 * q.log_variance[0]).exp(), (0.5 * q.log_variance[1]).exp()];
    let lo = [q.mean[0] - 8.0 * sd[0], q.mean[1] - 8.0 * sd[1]];
    let h = [16.0 * sd[0] / (resolution - 1) as f64, 16.0 * sd[1] / (resolution - 1) as f64];
    let area = h[0] * h[1];
    let log_norm = -(2.0 * PI).ln() - 0.5 * (q.log_variance[0] + q.log_variance[1]);
    let mut acc = 0.0;
    for i in 0..resolution {
        let z1 = lo[0] + i as f64 * h[0];
        for j in 0..resolution {
            let z2 = lo[1] + j as f64 * h[1];
            let u = [(z1 - q.mean[0]) / sd[0], (z2 - q.mean[1]) / sd[1]];
            let log_q = log_norm - 0.5 * (u[0] * u[0] + u[1] * u[1]);
            let log_p = model.log_posterior_unnorm([z1, z2], x) - log_evidence;
            acc += log_q.exp() * (log_q - log_p) * area;
        }
    }
    Ok(acc)
}
