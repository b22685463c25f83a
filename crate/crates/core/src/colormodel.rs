//! Gaussian and Gaussian-mixture color models over CIELAB pixels, and the
//! KL divergences between them.

use nalgebra::{Matrix3, Vector3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::imageio::LabImage;
use crate::superpixel::Superpixel;
use crate::{Error, Result};

/// Ridge added to every fitted covariance to keep it positive definite.
pub const COV_FLOOR: f64 = 1e-4;

/// EM stops when the log-likelihood gain drops below this.
pub const EM_TOL: f64 = 1e-6;

/// Hard cap on EM iterations.
pub const EM_MAX_ITERS: usize = 100;

const LN_2PI: f64 = 1.8378770664093453;

/// Full-covariance 3D Gaussian.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianModel {
    pub mean: Vector3<f64>,
    pub cov: Matrix3<f64>,
}

/// Weighted mixture of full-covariance Gaussians. Weights sum to 1.
#[derive(Debug, Clone, PartialEq)]
pub struct GmmModel {
    pub weights: Vec<f64>,
    pub components: Vec<GaussianModel>,
}

impl GaussianModel {
    /// Inverse and log-determinant of the covariance, or an error when the
    /// matrix is numerically singular.
    fn inv_logdet(&self) -> Result<(Matrix3<f64>, f64)> {
        let det = self.cov.determinant();
        if !det.is_finite() || det <= 0.0 {
            return Err(Error::SingularCovariance);
        }
        let inv = self.cov.try_inverse().ok_or(Error::SingularCovariance)?;
        Ok((inv, det.ln()))
    }
}

/// Fits a Gaussian with population covariance (divide by n) plus the
/// diagonal ridge. Errors on an empty sample.
pub fn fit_gaussian(samples: &[Vector3<f64>]) -> Result<GaussianModel> {
    if samples.is_empty() {
        return Err(Error::Empty("cannot fit a Gaussian to zero samples".into()));
    }
    let n = samples.len() as f64;
    let mut mean = Vector3::zeros();
    for s in samples {
        mean += s;
    }
    mean /= n;
    let mut cov = Matrix3::zeros();
    for s in samples {
        let d = s - mean;
        cov += d * d.transpose();
    }
    cov /= n;
    cov += Matrix3::identity() * COV_FLOOR;
    Ok(GaussianModel { mean, cov })
}

/// Fills `gaussian` on every superpixel from its pixels.
pub fn fit_superpixel_gaussians(sps: &mut [Superpixel], img: &LabImage) -> Result<()> {
    for sp in sps {
        let samples: Vec<Vector3<f64>> = sp
            .pixels
            .iter()
            .map(|&p| Vector3::from(img.pixels[p as usize]))
            .collect();
        sp.gaussian = Some(fit_gaussian(&samples)?);
    }
    Ok(())
}

/// KL divergence between two 3D Gaussians,
/// `0.5 * (ln(|S_q|/|S_p|) + tr(S_q^-1 S_p) + (m_q-m_p)' S_q^-1 (m_q-m_p) - 3)`.
/// Zero when the models coincide.
pub fn kl_gaussian(p: &GaussianModel, q: &GaussianModel) -> Result<f64> {
    let (q_inv, q_logdet) = q.inv_logdet()?;
    let p_det = p.cov.determinant();
    if !p_det.is_finite() || p_det <= 0.0 {
        return Err(Error::SingularCovariance);
    }
    let dm = q.mean - p.mean;
    let trace = (q_inv * p.cov).trace();
    let maha = (dm.transpose() * q_inv * dm)[(0, 0)];
    Ok(0.5 * (q_logdet - p_det.ln() + trace + maha - 3.0))
}

/// Symmetrized divergence: the smaller of the two directions.
pub fn sym_kl_gaussian(a: &GaussianModel, b: &GaussianModel) -> Result<f64> {
    Ok(kl_gaussian(a, b)?.min(kl_gaussian(b, a)?))
}

/// Approximate divergence from a Gaussian to a mixture:
/// `min_k (KL(g, component_k) - ln w_k)`.
pub fn kl_gaussian_to_gmm(g: &GaussianModel, gmm: &GmmModel) -> Result<f64> {
    let mut best = f64::INFINITY;
    for (w, comp) in gmm.weights.iter().zip(&gmm.components) {
        let d = kl_gaussian(g, comp)? - w.ln();
        if d < best {
            best = d;
        }
    }
    if !best.is_finite() {
        return Err(Error::Empty("mixture has no usable component".into()));
    }
    Ok(best)
}

#[inline]
fn log_pdf(x: &Vector3<f64>, mean: &Vector3<f64>, inv: &Matrix3<f64>, logdet: f64) -> f64 {
    let d = x - mean;
    let maha = (d.transpose() * inv * d)[(0, 0)];
    -0.5 * (3.0 * LN_2PI + logdet + maha)
}

/// Seeded k-means++ centers: first uniform, the rest weighted by squared
/// distance to the nearest chosen center.
fn kmeans_pp_centers(samples: &[Vector3<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let n = samples.len();
    let mut centers = Vec::with_capacity(k);
    centers.push(rng.gen_range(0..n));
    let mut d2: Vec<f64> = samples
        .iter()
        .map(|s| (s - samples[centers[0]]).norm_squared())
        .collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let mut t = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if t < w {
                    pick = i;
                    break;
                }
                t -= w;
            }
            pick
        } else {
            // All remaining distances are zero (duplicated points).
            rng.gen_range(0..n)
        };
        centers.push(next);
        for (i, s) in samples.iter().enumerate() {
            let d = (s - samples[next]).norm_squared();
            if d < d2[i] {
                d2[i] = d;
            }
        }
    }
    centers
}

struct Component {
    weight: f64,
    mean: Vector3<f64>,
    cov: Matrix3<f64>,
    inv: Matrix3<f64>,
    logdet: f64,
}

fn component_from_moments(
    weight: f64,
    mean: Vector3<f64>,
    cov: Matrix3<f64>,
) -> Result<Component> {
    let g = GaussianModel { mean, cov };
    let (inv, logdet) = g.inv_logdet()?;
    Ok(Component {
        weight,
        mean,
        cov,
        inv,
        logdet,
    })
}

/// Fits a K-component GMM by EM, seeded with k-means++ cluster moments.
/// Requires at least `3 * k` samples.
pub fn fit_gmm(samples: &[Vector3<f64>], k: usize, seed: u64) -> Result<GmmModel> {
    fit_gmm_traced(samples, k, seed).map(|(model, _)| model)
}

/// Same as [`fit_gmm`] but also returns the per-iteration log-likelihoods,
/// one entry per E-step.
pub fn fit_gmm_traced(
    samples: &[Vector3<f64>],
    k: usize,
    seed: u64,
) -> Result<(GmmModel, Vec<f64>)> {
    if k == 0 {
        return Err(Error::InvalidInput("mixture needs at least 1 component".into()));
    }
    let n = samples.len();
    if n < 3 * k {
        return Err(Error::TooFewSamples {
            samples: n,
            components: k,
        });
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = kmeans_pp_centers(samples, k, &mut rng);

    // Initial hard assignment to the nearest center.
    let mut assign = vec![0usize; n];
    for (i, s) in samples.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (c, &ci) in centers.iter().enumerate() {
            let d = (s - samples[ci]).norm_squared();
            if d < best {
                best = d;
                assign[i] = c;
            }
        }
    }

    let global = fit_gaussian(samples)?;
    let mut comps = Vec::with_capacity(k);
    for c in 0..k {
        let members: Vec<Vector3<f64>> = samples
            .iter()
            .zip(&assign)
            .filter(|(_, &a)| a == c)
            .map(|(s, _)| *s)
            .collect();
        let (weight, mean, cov) = if members.len() >= 2 {
            let g = fit_gaussian(&members)?;
            (members.len() as f64 / n as f64, g.mean, g.cov)
        } else {
            // Starved cluster: fall back to the global moments with a small
            // weight so EM can still reassign mass to it.
            (1.0 / n as f64, samples[centers[c]], global.cov)
        };
        comps.push(component_from_moments(weight, mean, cov)?);
    }
    let wsum: f64 = comps.iter().map(|c| c.weight).sum();
    for c in &mut comps {
        c.weight /= wsum;
    }

    let mut resp = vec![0.0f64; n * k];
    let mut ll_trace = Vec::new();
    let mut prev_ll = f64::NEG_INFINITY;

    for _ in 0..EM_MAX_ITERS {
        // E step with log-sum-exp.
        let mut ll = 0.0;
        for (i, s) in samples.iter().enumerate() {
            let row = &mut resp[i * k..(i + 1) * k];
            let mut mx = f64::NEG_INFINITY;
            for (c, comp) in comps.iter().enumerate() {
                row[c] = comp.weight.ln() + log_pdf(s, &comp.mean, &comp.inv, comp.logdet);
                if row[c] > mx {
                    mx = row[c];
                }
            }
            let mut sum = 0.0;
            for r in row.iter_mut() {
                *r = (*r - mx).exp();
                sum += *r;
            }
            for r in row.iter_mut() {
                *r /= sum;
            }
            ll += mx + sum.ln();
        }
        // Mean per-sample log-likelihood, so the stopping tolerance does
        // not scale with the training-set size.
        ll /= n as f64;
        ll_trace.push(ll);
        if ll - prev_ll < EM_TOL {
            break;
        }
        prev_ll = ll;

        // M step with the same ridge as fit_gaussian.
        for c in 0..k {
            let mut nk = 0.0;
            let mut mean = Vector3::zeros();
            for (i, s) in samples.iter().enumerate() {
                let r = resp[i * k + c];
                nk += r;
                mean += s * r;
            }
            if nk <= f64::MIN_POSITIVE {
                // Component lost all responsibility; park it on the global fit.
                comps[c] = component_from_moments(1e-10, global.mean, global.cov)?;
                continue;
            }
            mean /= nk;
            let mut cov = Matrix3::zeros();
            for (i, s) in samples.iter().enumerate() {
                let d = s - mean;
                cov += d * d.transpose() * resp[i * k + c];
            }
            cov /= nk;
            cov += Matrix3::identity() * COV_FLOOR;
            comps[c] = component_from_moments(nk / n as f64, mean, cov)?;
        }
        let wsum: f64 = comps.iter().map(|c| c.weight).sum();
        for c in &mut comps {
            c.weight /= wsum;
        }
    }

    let model = GmmModel {
        weights: comps.iter().map(|c| c.weight).collect(),
        components: comps
            .iter()
            .map(|c| GaussianModel {
                mean: c.mean,
                cov: c.cov,
            })
            .collect(),
    };
    Ok((model, ll_trace))
}
