//! Histogram gradient-boosted regression trees.

use rand::seq::index::sample;

use crate::dgp::Covariates;
use crate::error::{Error, Result};
use crate::rng;

use super::Predictor;

/// Training objective.
#[derive(Debug, Clone, PartialEq)]
pub enum Loss {
    Squared,
    /// Binary cross-entropy on `y` in `{0, 1}`; predictions are probabilities.
    Logistic,
    /// Check loss with one quantile level per training row.
    Pinball(Vec<f64>),
}

/// Boosting hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoostParams {
    pub trees: usize,
    pub depth: usize,
    pub learning_rate: f64,
    pub bins: usize,
    pub min_leaf: usize,
    pub subsample: f64,
    pub l2: f64,
    pub seed: u64,
}

impl Default for BoostParams {
    fn default() -> Self {
        Self {
            trees: 100,
            depth: 3,
            learning_rate: 0.05,
            bins: 32,
            min_leaf: 50,
            subsample: 0.8,
            l2: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf(f64),
}

#[derive(Debug, Clone)]
struct Tree {
    nodes: Vec<Node>,
}

impl Tree {
    fn predict(&self, x: &[f64]) -> f64 {
        let mut at = 0;
        loop {
            match self.nodes[at] {
                Node::Leaf(v) => return v,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => at = if x[feature] <= threshold { left } else { right },
            }
        }
    }
}

/// Fitted boosted ensemble.
#[derive(Debug, Clone)]
pub struct Gbdt {
    init: f64,
    learning_rate: f64,
    trees: Vec<Tree>,
    logistic: bool,
}

impl Gbdt {
    fn raw(&self, x: &[f64]) -> f64 {
        self.init + self.learning_rate * self.trees.iter().map(|t| t.predict(x)).sum::<f64>()
    }

    pub fn tree_count(&self) -> usize {
        self.trees.len()
    }
}

impl Predictor for Gbdt {
    fn predict(&self, x: &[f64]) -> f64 {
        let r = self.raw(x);
        if self.logistic {
            sigmoid(r)
        } else {
            r
        }
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Minimizer of `sum_i w_i rho_{a_i}(r_i - c)` over `c`: the point where the
/// subgradient `sum_{r_i < c} w_i (1 - a_i) - sum_{r_i > c} w_i a_i` changes sign.
pub fn weighted_pinball_minimizer(values: &[f64], weights: &[f64], levels: &[f64]) -> f64 {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut upper: f64 = order.iter().map(|&i| weights[i] * levels[i]).sum();
    let mut lower = 0.0;
    for &i in &order {
        // at c just above values[i]: weight below includes i
        upper -= weights[i] * levels[i];
        lower += weights[i] * (1.0 - levels[i]);
        if lower >= upper {
            return values[i];
        }
    }
    order.last().map_or(0.0, |&i| values[i])
}

/// Per-feature bin thresholds (upper edges) and the binned training matrix.
struct Binned {
    thresholds: Vec<Vec<f64>>,
    codes: Vec<Vec<u16>>,
}

fn bin_features(x: &Covariates, bins: usize) -> Binned {
    let n = x.len();
    let p = x.dim();
    let mut thresholds = Vec::with_capacity(p);
    let mut codes = Vec::with_capacity(p);
    for f in 0..p {
        let mut vals: Vec<f64> = x.rows().map(|r| r[f]).collect();
        vals.sort_by(f64::total_cmp);
        vals.dedup();
        let edges: Vec<f64> = if vals.len() <= bins {
            vals.windows(2).map(|w| 0.5 * (w[0] + w[1])).collect()
        } else {
            let mut e: Vec<f64> = (1..bins)
                .map(|b| {
                    let pos = b * vals.len() / bins;
                    0.5 * (vals[pos - 1] + vals[pos])
                })
                .collect();
            e.dedup();
            e
        };
        let col: Vec<u16> = x
            .rows()
            .map(|r| edges.partition_point(|&e| e < r[f]) as u16)
            .collect();
        debug_assert_eq!(col.len(), n);
        thresholds.push(edges);
        codes.push(col);
    }
    Binned { thresholds, codes }
}

struct Builder<'a> {
    binned: &'a Binned,
    grad: &'a [f64],
    hess: &'a [f64],
    params: &'a BoostParams,
}

struct Candidate {
    gain: f64,
    feature: usize,
    bin: usize,
}

impl Builder<'_> {
    fn best_split(&self, rows: &[usize]) -> Option<Candidate> {
        let (g_tot, h_tot) = rows
            .iter()
            .fold((0.0, 0.0), |(g, h), &i| (g + self.grad[i], h + self.hess[i]));
        let parent = g_tot * g_tot / (h_tot + self.params.l2);
        let mut best: Option<Candidate> = None;
        for (f, edges) in self.binned.thresholds.iter().enumerate() {
            if edges.is_empty() {
                continue;
            }
            let nb = edges.len() + 1;
            let mut g = vec![0.0; nb];
            let mut h = vec![0.0; nb];
            let mut c = vec![0usize; nb];
            let col = &self.binned.codes[f];
            for &i in rows {
                let b = col[i] as usize;
                g[b] += self.grad[i];
                h[b] += self.hess[i];
                c[b] += 1;
            }
            let (mut gl, mut hl, mut cl) = (0.0, 0.0, 0usize);
            for b in 0..nb - 1 {
                gl += g[b];
                hl += h[b];
                cl += c[b];
                let cr = rows.len() - cl;
                if cl < self.params.min_leaf || cr < self.params.min_leaf {
                    continue;
                }
                let (gr, hr) = (g_tot - gl, h_tot - hl);
                let gain = gl * gl / (hl + self.params.l2) + gr * gr / (hr + self.params.l2) - parent;
                if gain > 1e-12 && best.as_ref().is_none_or(|b| gain > b.gain) {
                    best = Some(Candidate {
                        gain,
                        feature: f,
                        bin: b,
                    });
                }
            }
        }
        best
    }

    /// Grows a tree and returns it with the leaf index of every row.
    fn grow(&self, rows: Vec<usize>) -> (Tree, Vec<(usize, Vec<usize>)>) {
        let mut nodes = vec![Node::Leaf(0.0)];
        let mut leaves = Vec::new();
        let mut frontier = vec![(0usize, rows, 0usize)];
        while let Some((id, rows, depth)) = frontier.pop() {
            let split = if depth < self.params.depth && rows.len() >= 2 * self.params.min_leaf {
                self.best_split(&rows)
            } else {
                None
            };
            match split {
                Some(c) => {
                    let col = &self.binned.codes[c.feature];
                    let (l, r): (Vec<usize>, Vec<usize>) =
                        rows.iter().partition(|&&i| (col[i] as usize) <= c.bin);
                    let (li, ri) = (nodes.len(), nodes.len() + 1);
                    nodes.push(Node::Leaf(0.0));
                    nodes.push(Node::Leaf(0.0));
                    nodes[id] = Node::Split {
                        feature: c.feature,
                        threshold: self.binned.thresholds[c.feature][c.bin],
                        left: li,
                        right: ri,
                    };
                    frontier.push((li, l, depth + 1));
                    frontier.push((ri, r, depth + 1));
                }
                None => leaves.push((id, rows)),
            }
        }
        (Tree { nodes }, leaves)
    }
}

/// Fits a boosted ensemble on rows of `x` with targets `y` and row weights `w`.
pub fn fit_gbdt(x: &Covariates, y: &[f64], w: &[f64], loss: &Loss, params: &BoostParams) -> Result<Gbdt> {
    let n = x.len();
    if n == 0 {
        return Err(Error::Positivity("no training rows".into()));
    }
    if y.len() != n || w.len() != n {
        return Err(Error::param("feature, target and weight lengths differ"));
    }
    if let Some(row) = y.iter().position(|v| !v.is_finite()) {
        return Err(Error::Numeric { row, what: "training target" });
    }
    let wsum: f64 = w.iter().sum();
    if !(wsum > 0.0) || w.iter().any(|v| !(*v >= 0.0)) {
        return Err(Error::DegenerateFit("weights must be nonnegative with positive sum".into()));
    }
    // normalized to mean one so that l2 and min_leaf act on a fixed scale
    let w: Vec<f64> = w.iter().map(|v| v * n as f64 / wsum).collect();
    let levels: Option<&[f64]> = match loss {
        Loss::Pinball(levels) => {
            if levels.len() != n || levels.iter().any(|a| !(0.0..=1.0).contains(a)) {
                return Err(Error::param("pinball levels must be in [0, 1], one per row"));
            }
            Some(levels)
        }
        _ => None,
    };
    let logistic = matches!(loss, Loss::Logistic);
    let init = match loss {
        Loss::Squared => y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / n as f64,
        Loss::Logistic => {
            let p = y.iter().zip(&w).map(|(a, b)| a * b).sum::<f64>() / n as f64;
            if p <= 0.0 || p >= 1.0 {
                return Err(Error::DegenerateFit("single-class training data".into()));
            }
            (p / (1.0 - p)).ln()
        }
        Loss::Pinball(levels) => weighted_pinball_minimizer(y, &w, levels),
    };
    let binned = bin_features(x, params.bins.clamp(2, u16::MAX as usize));
    let mut raw = vec![init; n];
    let mut grad = vec![0.0; n];
    let mut hess = vec![0.0; n];
    let mut trees = Vec::with_capacity(params.trees);
    let mut r = rng::seeded(params.seed);
    let take = ((params.subsample.clamp(0.0, 1.0) * n as f64).round() as usize).clamp(1, n);
    for _ in 0..params.trees {
        for i in 0..n {
            let (g, h) = match loss {
                Loss::Squared => (raw[i] - y[i], 1.0),
                Loss::Logistic => {
                    let p = sigmoid(raw[i]);
                    (p - y[i], (p * (1.0 - p)).max(1e-6))
                }
                Loss::Pinball(levels) => {
                    let below = if y[i] < raw[i] { 1.0 } else { 0.0 };
                    (below - levels[i], 1.0)
                }
            };
            grad[i] = w[i] * g;
            hess[i] = w[i] * h;
        }
        let mut rows: Vec<usize> = if take < n {
            sample(&mut r, n, take).into_vec()
        } else {
            (0..n).collect()
        };
        rows.sort_unstable();
        let builder = Builder {
            binned: &binned,
            grad: &grad,
            hess: &hess,
            params,
        };
        let (mut tree, leaves) = builder.grow(rows);
        for (id, rows) in leaves {
            let value = match levels {
                Some(levels) => {
                    let res: Vec<f64> = rows.iter().map(|&i| y[i] - raw[i]).collect();
                    let ww: Vec<f64> = rows.iter().map(|&i| w[i]).collect();
                    let ll: Vec<f64> = rows.iter().map(|&i| levels[i]).collect();
                    weighted_pinball_minimizer(&res, &ww, &ll)
                }
                None => {
                    let (g, h) = rows
                        .iter()
                        .fold((0.0, 0.0), |(g, h), &i| (g + grad[i], h + hess[i]));
                    -g / (h + params.l2)
                }
            };
            tree.nodes[id] = Node::Leaf(value);
        }
        for (i, x_i) in x.rows().enumerate() {
            raw[i] += params.learning_rate * tree.predict(x_i);
        }
        trees.push(tree);
    }
    Ok(Gbdt {
        init,
        learning_rate: params.learning_rate,
        trees,
        logistic,
    })
}
