//! Conditional density of a continuous exposure: a mean regression plus a
//! Gaussian mixture on the residuals.

use std::f64::consts::PI;
use std::sync::Arc;

use crate::dgp::Covariates;
use crate::error::{Error, Result};

use super::Predictor;

#[derive(Debug, Clone, Copy, PartialEq)]
struct Component {
    weight: f64,
    mean: f64,
    sd: f64,
}

fn normal_pdf(u: f64, mean: f64, sd: f64) -> f64 {
    let v = (u - mean) / sd;
    (-0.5 * v * v).exp() / (sd * (2.0 * PI).sqrt())
}

/// Univariate Gaussian mixture fitted by EM.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    components: Vec<Component>,
}

impl GaussianMixture {
    /// Deterministic EM started from equal-frequency groups of the sorted data.
    pub fn fit(values: &[f64], k: usize, iterations: usize) -> Result<Self> {
        let n = values.len();
        if n < 2 * k.max(1) {
            return Err(Error::DegenerateFit(format!(
                "{n} values are too few for {k} mixture components"
            )));
        }
        let mut sorted = values.to_vec();
        sorted.sort_by(f64::total_cmp);
        let total_sd = sd_of(&sorted).max(1e-9);
        let floor = 1e-3 * total_sd;
        let mut comps: Vec<Component> = (0..k)
            .map(|c| {
                let chunk = &sorted[c * n / k..(c + 1) * n / k];
                Component {
                    weight: 1.0 / k as f64,
                    mean: chunk.iter().sum::<f64>() / chunk.len() as f64,
                    sd: sd_of(chunk).max(floor).max(total_sd / k as f64),
                }
            })
            .collect();
        let mut resp = vec![0.0; n * k];
        for _ in 0..iterations {
            for (i, &v) in values.iter().enumerate() {
                let row = &mut resp[i * k..(i + 1) * k];
                let mut s = 0.0;
                for (c, comp) in comps.iter().enumerate() {
                    row[c] = comp.weight * normal_pdf(v, comp.mean, comp.sd);
                    s += row[c];
                }
                if s > 0.0 {
                    row.iter_mut().for_each(|r| *r /= s);
                } else {
                    row.iter_mut().for_each(|r| *r = 1.0 / k as f64);
                }
            }
            for (c, comp) in comps.iter_mut().enumerate() {
                let nk: f64 = (0..n).map(|i| resp[i * k + c]).sum();
                if nk < 1e-9 {
                    continue;
                }
                let mean = (0..n).map(|i| resp[i * k + c] * values[i]).sum::<f64>() / nk;
                let var = (0..n)
                    .map(|i| resp[i * k + c] * (values[i] - mean).powi(2))
                    .sum::<f64>()
                    / nk;
                *comp = Component {
                    weight: nk / n as f64,
                    mean,
                    sd: var.sqrt().max(floor),
                };
            }
        }
        Ok(Self { components: comps })
    }

    pub fn pdf(&self, u: f64) -> f64 {
        self.components
            .iter()
            .map(|c| c.weight * normal_pdf(u, c.mean, c.sd))
            .sum()
    }
}

fn sd_of(v: &[f64]) -> f64 {
    let m = v.iter().sum::<f64>() / v.len() as f64;
    (v.iter().map(|a| (a - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt()
}

/// `p(z | x) = g(z - m(x))` with a fitted mean `m` and residual mixture `g`.
#[derive(Clone)]
pub struct ConditionalDensity {
    mean: Arc<dyn Predictor>,
    residual: GaussianMixture,
}

impl std::fmt::Debug for ConditionalDensity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ConditionalDensity")
            .field("residual", &self.residual)
            .finish_non_exhaustive()
    }
}

impl ConditionalDensity {
    pub fn fit(x: &Covariates, z: &[f64], mean: Arc<dyn Predictor>, components: usize) -> Result<Self> {
        let res: Vec<f64> = x.rows().zip(z).map(|(xi, zi)| zi - mean.predict(xi)).collect();
        let residual = GaussianMixture::fit(&res, components, 200)?;
        Ok(Self { mean, residual })
    }

    pub fn density(&self, z: f64, x: &[f64]) -> f64 {
        self.residual.pdf(z - self.mean.predict(x))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dgp::sample_covariates;
    use crate::learners::linear::fit_additive_poly;
    use crate::rng;
    use rand_distr::{Distribution, StandardNormal};

    #[test]
    fn mixture_recovers_two_components() {
        let mut r = rng::seeded(1);
        let v: Vec<f64> = (0..6000)
            .map(|i| {
                let e: f64 = StandardNormal.sample(&mut r);
                if i % 3 == 0 {
                    -2.0 + 0.5 * e
                } else {
                    1.0 + 0.3 * e
                }
            })
            .collect();
        let gm = GaussianMixture::fit(&v, 2, 300).unwrap();
        let truth = |u: f64| normal_pdf(u, -2.0, 0.5) / 3.0 + 2.0 * normal_pdf(u, 1.0, 0.3) / 3.0;
        for u in [-2.5, -2.0, 0.0, 1.0, 1.4] {
            assert!((gm.pdf(u) - truth(u)).abs() < 0.05, "{u}");
        }
    }

    #[test]
    fn conditional_density_of_linear_gaussian() {
        let x = sample_covariates(5000, 1, 2).unwrap();
        let mut r = rng::seeded(3);
        let z: Vec<f64> = x
            .rows()
            .map(|v| {
                let e: f64 = StandardNormal.sample(&mut r);
                0.3 + 0.2 * v[0] + 0.25 * e
            })
            .collect();
        let mean = fit_additive_poly(&x, &z, &vec![1.0; 5000], 1, 0.0).unwrap();
        let cd = ConditionalDensity::fit(&x, &z, Arc::new(mean), 1).unwrap();
        for (zz, xx) in [(0.3, 0.0), (0.5, 0.5), (0.0, -0.8)] {
            let truth = normal_pdf(zz, 0.3 + 0.2 * xx, 0.25);
            assert!((cd.density(zz, &[xx]) - truth).abs() < 0.05);
        }
    }
}
