//! Additive polynomial least squares and a one-dimensional binned regressor.

use nalgebra::{DMatrix, DVector};

use crate::dgp::Covariates;
use crate::error::{Error, Result};

use super::Predictor;

/// Weighted least squares on the basis `1, x_k, x_k^2, ..., x_k^degree` for
/// every coordinate `k`, with a small ridge penalty on non-intercept terms.
#[derive(Debug, Clone)]
pub struct AdditivePoly {
    degree: usize,
    coef: Vec<f64>,
}

fn basis(x: &[f64], degree: usize, out: &mut Vec<f64>) {
    out.clear();
    out.push(1.0);
    for &v in x {
        let mut p = 1.0;
        for _ in 0..degree {
            p *= v;
            out.push(p);
        }
    }
}

pub fn fit_additive_poly(x: &Covariates, y: &[f64], w: &[f64], degree: usize, ridge: f64) -> Result<AdditivePoly> {
    let n = x.len();
    if n == 0 {
        return Err(Error::Positivity("no training rows".into()));
    }
    if y.len() != n || w.len() != n {
        return Err(Error::param("feature, target and weight lengths differ"));
    }
    let m = 1 + x.dim() * degree;
    let mut xtx = DMatrix::<f64>::zeros(m, m);
    let mut xty = DVector::<f64>::zeros(m);
    let mut row = Vec::with_capacity(m);
    let mut wsum = 0.0;
    for (i, xi) in x.rows().enumerate() {
        if !y[i].is_finite() {
            return Err(Error::Numeric { row: i, what: "training target" });
        }
        basis(xi, degree, &mut row);
        let wi = w[i];
        wsum += wi;
        for a in 0..m {
            xty[a] += wi * row[a] * y[i];
            for b in a..m {
                xtx[(a, b)] += wi * row[a] * row[b];
            }
        }
    }
    if !(wsum > 0.0) {
        return Err(Error::DegenerateFit("weights have zero sum".into()));
    }
    for a in 0..m {
        for b in 0..a {
            xtx[(a, b)] = xtx[(b, a)];
        }
        if a > 0 {
            xtx[(a, a)] += ridge * wsum;
        }
    }
    let coef = xtx
        .clone()
        .cholesky()
        .map(|c| c.solve(&xty))
        .or_else(|| xtx.lu().solve(&xty))
        .ok_or_else(|| Error::DegenerateFit("singular design in polynomial fit".into()))?;
    Ok(AdditivePoly {
        degree,
        coef: coef.iter().copied().collect(),
    })
}

impl Predictor for AdditivePoly {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut row = Vec::with_capacity(self.coef.len());
        basis(x, self.degree, &mut row);
        row.iter().zip(&self.coef).map(|(a, b)| a * b).sum()
    }
}

/// Piecewise-constant regression on equal-frequency bins of the first feature.
#[derive(Debug, Clone)]
pub struct Binned {
    edges: Vec<f64>,
    values: Vec<f64>,
}

pub fn fit_binned(x: &Covariates, y: &[f64], w: &[f64], bins: usize) -> Result<Binned> {
    let n = x.len();
    if n == 0 {
        return Err(Error::Positivity("no training rows".into()));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| x.row(a)[0].total_cmp(&x.row(b)[0]));
    let bins = bins.clamp(1, n);
    let mut edges = Vec::with_capacity(bins);
    let mut values = Vec::with_capacity(bins);
    let mut start = 0;
    for b in 0..bins {
        let end = (b + 1) * n / bins;
        if end <= start {
            continue;
        }
        let (mut s, mut ws) = (0.0, 0.0);
        for &i in &order[start..end] {
            s += w[i] * y[i];
            ws += w[i];
        }
        let v = if ws > 0.0 { s / ws } else { f64::NAN };
        edges.push(x.row(order[end - 1])[0]);
        values.push(v);
        start = end;
    }
    let global = {
        let ws: f64 = w.iter().sum();
        y.iter().zip(w).map(|(a, b)| a * b).sum::<f64>() / ws
    };
    for v in &mut values {
        if !v.is_finite() {
            *v = global;
        }
    }
    Ok(Binned { edges, values })
}

impl Predictor for Binned {
    fn predict(&self, x: &[f64]) -> f64 {
        let b = self.edges.partition_point(|&e| e < x[0]).min(self.values.len() - 1);
        self.values[b]
    }
}
