//! Two-state hidden Markov tree across scales: upward-downward inference,
//! EM training and max-product MAP decoding.
//!
//! Trees live on dyadic grids. Level 0 is the finest scale and covers every
//! pixel; level `k` keeps every `2^k`-th sample of its full-resolution plane
//! in both directions, so grid node `(r, c)` sits at pixel `(r 2^k, c 2^k)`.
//! Node `(r, c)` on level `k + 1` parents `(2r + dr, 2c + dc)`, `dr, dc ∈
//! {0, 1}`, on level `k` (children past the grid edge are absent). Each
//! top-level node roots its own tree; a [`CoeffQuadtree`] with a 1x1 top
//! level is a single tree, larger top levels are forests.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hmc::{
    check_distribution, has_converged, ln_matrix, swap_emission, FrozenState, TrainOutcome,
    MIN_RESPONSIBILITY,
};
use crate::stat_models::{log_sum_exp2, Emission, VARIANCE_FLOOR};
use crate::swt::Plane;

#[derive(Debug, Clone, PartialEq)]
pub struct Grid {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl Grid {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if rows == 0 || cols == 0 || values.len() != rows * cols {
            return Err(Error::Dimension(format!(
                "{} values for a {rows}x{cols} grid",
                values.len()
            )));
        }
        Ok(Grid { rows, cols, values })
    }
}

/// Coefficients of one orientation arranged as a quadtree forest.
#[derive(Debug, Clone, PartialEq)]
pub struct CoeffQuadtree {
    levels: Vec<Grid>,
}

impl CoeffQuadtree {
    /// `levels[0]` is the finest. Each coarser grid must have
    /// `ceil(rows / 2) x ceil(cols / 2)` nodes of the grid below it.
    pub fn new(levels: Vec<Grid>) -> Result<Self> {
        if levels.is_empty() {
            return Err(Error::Dimension("quadtree needs at least one level".into()));
        }
        for (k, pair) in levels.windows(2).enumerate() {
            let (fine, coarse) = (&pair[0], &pair[1]);
            if coarse.rows != fine.rows.div_ceil(2) || coarse.cols != fine.cols.div_ceil(2) {
                return Err(Error::Dimension(format!(
                    "level {} is {}x{}, expected {}x{} above a {}x{} level",
                    k + 1,
                    coarse.rows,
                    coarse.cols,
                    fine.rows.div_ceil(2),
                    fine.cols.div_ceil(2),
                    fine.rows,
                    fine.cols
                )));
            }
        }
        Ok(CoeffQuadtree { levels })
    }

    /// One complete tree with `values[k]` holding the `4^(L-1-k)` level-`k`
    /// coefficients in row-major order.
    pub fn single(values: Vec<Vec<f64>>) -> Result<Self> {
        let depth = values.len();
        let levels = values
            .into_iter()
            .enumerate()
            .map(|(k, v)| {
                let side = 1 << (depth - 1 - k);
                Grid::new(side, side, v)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(levels)
    }

    /// Builds the forest from full-resolution detail planes, finest first,
    /// sampling level `k` every `2^k` pixels.
    pub fn from_planes(planes: &[&Plane]) -> Result<Self> {
        let first = planes
            .first()
            .ok_or_else(|| Error::Dimension("no planes for quadtree".into()))?;
        let (w, h) = (first.width(), first.height());
        let levels = planes
            .iter()
            .enumerate()
            .map(|(k, p)| {
                if (p.width(), p.height()) != (w, h) {
                    return Err(Error::Dimension(format!(
                        "plane {k} is {}x{}, expected {w}x{h}",
                        p.width(),
                        p.height()
                    )));
                }
                let stride = 1usize << k;
                let rows = h.div_ceil(stride);
                let cols = w.div_ceil(stride);
                let mut values = Vec::with_capacity(rows * cols);
                for r in 0..rows {
                    for c in 0..cols {
                        values.push(p.get(c * stride, r * stride));
                    }
                }
                Grid::new(rows, cols, values)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::new(levels)
    }

    pub fn depth(&self) -> usize {
        self.levels.len()
    }

    pub fn levels(&self) -> &[Grid] {
        &self.levels
    }

    pub fn roots(&self) -> usize {
        let top = self.levels.last().unwrap();
        top.rows * top.cols
    }

    pub fn node_count(&self) -> usize {
        self.levels.iter().map(|g| g.values.len()).sum()
    }

    /// Indices of the children of node `idx` on level `level >= 1`.
    pub fn children(&self, level: usize, idx: usize) -> impl Iterator<Item = usize> + '_ {
        let parent = &self.levels[level];
        let child = &self.levels[level - 1];
        let (r, c) = (idx / parent.cols, idx % parent.cols);
        (0..4).filter_map(move |d| {
            let (cr, cc) = (2 * r + d / 2, 2 * c + d % 2);
            (cr < child.rows && cc < child.cols).then_some(cr * child.cols + cc)
        })
    }

    /// Index of the parent (on `level + 1`) of node `idx` on `level`.
    pub fn parent(&self, level: usize, idx: usize) -> usize {
        let cols = self.levels[level].cols;
        let (r, c) = (idx / cols, idx % cols);
        (r / 2) * self.levels[level + 1].cols + c / 2
    }

    /// Root index of node `idx` on `level`.
    pub fn root_of(&self, level: usize, idx: usize) -> usize {
        let shift = self.depth() - 1 - level;
        let cols = self.levels[level].cols;
        let (r, c) = (idx / cols, idx % cols);
        (r >> shift) * self.levels.last().unwrap().cols + (c >> shift)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeParams {
    /// State distribution of top-level (root) nodes.
    pub root_prior: [f64; 2],
    /// `transitions[k][m][n] = p(child on level k is n | parent is m)`, one
    /// matrix per non-root level.
    pub transitions: Vec<[[f64; 2]; 2]>,
    /// Emission densities per level.
    pub emissions: Vec<Emission>,
}

impl TreeParams {
    pub fn new(
        root_prior: [f64; 2],
        transitions: Vec<[[f64; 2]; 2]>,
        emissions: Vec<Emission>,
    ) -> Result<Self> {
        let p = TreeParams {
            root_prior,
            transitions,
            emissions,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn depth(&self) -> usize {
        self.emissions.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.emissions.is_empty() || self.transitions.len() + 1 != self.emissions.len() {
            return Err(Error::InvalidParams(format!(
                "{} transition matrices for {} levels",
                self.transitions.len(),
                self.emissions.len()
            )));
        }
        check_distribution("root prior", &self.root_prior)?;
        for (k, t) in self.transitions.iter().enumerate() {
            check_distribution(&format!("level {k} transition row 0"), &t[0])?;
            check_distribution(&format!("level {k} transition row 1"), &t[1])?;
        }
        self.emissions.iter().try_for_each(Emission::validate)
    }

    /// Marginal state distribution of each level, propagated from the roots.
    pub fn level_marginals(&self) -> Vec<[f64; 2]> {
        let mut out = vec![[0.0; 2]; self.depth()];
        let mut p = self.root_prior;
        out[self.depth() - 1] = p;
        for k in (0..self.depth() - 1).rev() {
            let t = &self.transitions[k];
            p = [
                p[0] * t[0][0] + p[1] * t[1][0],
                p[0] * t[0][1] + p[1] * t[1][1],
            ];
            out[k] = p;
        }
        out
    }

    /// Exchanges the two state labels; see [`crate::hmc::ChainParams::swap_states`].
    pub fn swap_states(&self) -> TreeParams {
        TreeParams {
            root_prior: [self.root_prior[1], self.root_prior[0]],
            transitions: self
                .transitions
                .iter()
                .map(|a| [[a[1][1], a[1][0]], [a[0][1], a[0][0]]])
                .collect(),
            emissions: self.emissions.iter().map(swap_emission).collect(),
        }
    }

    fn check_tree(&self, tree: &CoeffQuadtree) -> Result<()> {
        if tree.depth() != self.depth() {
            return Err(Error::Dimension(format!(
                "tree has {} levels, parameters have {}",
                tree.depth(),
                self.depth()
            )));
        }
        Ok(())
    }
}

/// Upward pass output, all in log space.
#[derive(Debug, Clone, PartialEq)]
pub struct Upward {
    /// `beta[k][i][m]`: log-likelihood of the subtree below node `i` on level
    /// `k`, given that node is in state `m`.
    pub beta: Vec<Vec<[f64; 2]>>,
    /// `to_parent[k][i][m]`: log-likelihood of the subtree below node `i`
    /// given its parent is in state `m` (levels below the top only).
    pub to_parent: Vec<Vec<[f64; 2]>>,
    /// Log-likelihood of each tree, indexed by root.
    pub tree_log_likelihood: Vec<f64>,
}

impl Upward {
    pub fn log_likelihood(&self) -> f64 {
        self.tree_log_likelihood.iter().sum()
    }
}

fn ln_emission_table(grid: &Grid, e: &Emission) -> Result<Vec<[f64; 2]>> {
    grid.values
        .iter()
        .enumerate()
        .map(|(i, &w)| {
            let d = e.ln_densities(w);
            if d.iter().all(|v| !v.is_finite()) {
                Err(Error::Underflow { index: i })
            } else {
                Ok(d)
            }
        })
        .collect()
}

/// Leaf-to-root conditional likelihoods.
pub fn upward_pass(tree: &CoeffQuadtree, params: &TreeParams) -> Result<Upward> {
    params.check_tree(tree)?;
    let depth = tree.depth();
    let mut beta: Vec<Vec<[f64; 2]>> = Vec::with_capacity(depth);
    let mut to_parent: Vec<Vec<[f64; 2]>> = Vec::with_capacity(depth - 1);
    for k in 0..depth {
        let mut b = ln_emission_table(&tree.levels[k], &params.emissions[k])?;
        if k > 0 {
            let below = &to_parent[k - 1];
            for (i, bi) in b.iter_mut().enumerate() {
                for c in tree.children(k, i) {
                    bi[0] += below[c][0];
                    bi[1] += below[c][1];
                }
            }
        }
        if k + 1 < depth {
            let ln_a = ln_matrix(&params.transitions[k]);
            to_parent.push(
                b.iter()
                    .map(|bc| {
                        [
                            log_sum_exp2(ln_a[0][0] + bc[0], ln_a[0][1] + bc[1]),
                            log_sum_exp2(ln_a[1][0] + bc[0], ln_a[1][1] + bc[1]),
                        ]
                    })
                    .collect(),
            );
        }
        beta.push(b);
    }
    let ln_prior = [params.root_prior[0].ln(), params.root_prior[1].ln()];
    let tree_log_likelihood: Vec<f64> = beta[depth - 1]
        .iter()
        .map(|b| log_sum_exp2(ln_prior[0] + b[0], ln_prior[1] + b[1]))
        .collect();
    if let Some(i) = tree_log_likelihood.iter().position(|v| !v.is_finite()) {
        return Err(Error::Underflow { index: i });
    }
    Ok(Upward {
        beta,
        to_parent,
        tree_log_likelihood,
    })
}

/// Downward pass output.
#[derive(Debug, Clone, PartialEq)]
pub struct Downward {
    /// `alpha[k][i][m]`: log joint probability of state `m` at the node and
    /// every coefficient outside its subtree.
    pub alpha: Vec<Vec<[f64; 2]>>,
    /// `posterior[k][i][m] = p(s = m | tree coefficients)`.
    pub posterior: Vec<Vec<[f64; 2]>>,
    /// `pairwise[k][i][m][n] = p(parent = m, node = n | coefficients)` for
    /// node `i` on non-top level `k`.
    pub pairwise: Vec<Vec<[[f64; 2]; 2]>>,
}

/// Root-to-leaf pass producing node and parent-child posteriors.
pub fn downward_pass(tree: &CoeffQuadtree, params: &TreeParams, up: &Upward) -> Result<Downward> {
    params.check_tree(tree)?;
    let depth = tree.depth();
    let mut alpha: Vec<Vec<[f64; 2]>> = vec![Vec::new(); depth];
    let mut posterior: Vec<Vec<[f64; 2]>> = vec![Vec::new(); depth];
    let mut pairwise: Vec<Vec<[[f64; 2]; 2]>> = vec![Vec::new(); depth - 1];
    let ln_prior = [params.root_prior[0].ln(), params.root_prior[1].ln()];
    alpha[depth - 1] = vec![ln_prior; tree.levels[depth - 1].values.len()];
    for k in (0..depth).rev() {
        posterior[k] = alpha[k]
            .iter()
            .zip(&up.beta[k])
            .map(|(a, b)| {
                let z = log_sum_exp2(a[0] + b[0], a[1] + b[1]);
                let p1 = (a[1] + b[1] - z).exp();
                [1.0 - p1, p1]
            })
            .collect();
        if k == 0 {
            break;
        }
        let ln_a = ln_matrix(&params.transitions[k - 1]);
        let n_child = tree.levels[k - 1].values.len();
        let mut child_alpha = vec![[f64::NEG_INFINITY; 2]; n_child];
        let mut child_pair = vec![[[0.0; 2]; 2]; n_child];
        let parent_emission = &params.emissions[k];
        for (p, &w) in tree.levels[k].values.iter().enumerate() {
            let children: Vec<usize> = tree.children(k, p).collect();
            let e = parent_emission.ln_densities(w);
            for &c in &children {
                // Parent belief excluding this child's own subtree.
                let mut rest = [alpha[k][p][0] + e[0], alpha[k][p][1] + e[1]];
                for &s in children.iter().filter(|&&s| s != c) {
                    rest[0] += up.to_parent[k - 1][s][0];
                    rest[1] += up.to_parent[k - 1][s][1];
                }
                let bc = up.beta[k - 1][c];
                child_alpha[c] = [
                    log_sum_exp2(rest[0] + ln_a[0][0], rest[1] + ln_a[1][0]),
                    log_sum_exp2(rest[0] + ln_a[0][1], rest[1] + ln_a[1][1]),
                ];
                let joint = [
                    [rest[0] + ln_a[0][0] + bc[0], rest[0] + ln_a[0][1] + bc[1]],
                    [rest[1] + ln_a[1][0] + bc[0], rest[1] + ln_a[1][1] + bc[1]],
                ];
                let z = log_sum_exp2(
                    log_sum_exp2(joint[0][0], joint[0][1]),
                    log_sum_exp2(joint[1][0], joint[1][1]),
                );
                for m in 0..2 {
                    for n in 0..2 {
                        child_pair[c][m][n] = (joint[m][n] - z).exp();
                    }
                }
            }
        }
        alpha[k - 1] = child_alpha;
        pairwise[k - 1] = child_pair;
    }
    Ok(Downward {
        alpha,
        posterior,
        pairwise,
    })
}

/// MAP labels of every node plus the joint log-probability they attain.
#[derive(Debug, Clone, PartialEq)]
pub struct TreeStates {
    /// `labels[k][i]` for node `i` on level `k`.
    pub labels: Vec<Vec<u8>>,
    pub log_score: f64,
}

/// Max-product decoding: the joint state assignment maximizing
/// `p(states, coefficients)`. Ties resolve to state 0 at every node.
pub fn map_states_tree(tree: &CoeffQuadtree, params: &TreeParams) -> Result<TreeStates> {
    params.check_tree(tree)?;
    let depth = tree.depth();
    // best[k][i][m]: best log-score of the subtree given the node's state m.
    let mut best: Vec<Vec<[f64; 2]>> = Vec::with_capacity(depth);
    // choice[k][i][m]: child state chosen when its parent is in state m.
    let mut choice: Vec<Vec<[u8; 2]>> = Vec::with_capacity(depth - 1);
    let mut up_msg: Vec<Vec<[f64; 2]>> = Vec::with_capacity(depth - 1);
    for k in 0..depth {
        let mut b = ln_emission_table(&tree.levels[k], &params.emissions[k])?;
        if k > 0 {
            for (i, bi) in b.iter_mut().enumerate() {
                for c in tree.children(k, i) {
                    bi[0] += up_msg[k - 1][c][0];
                    bi[1] += up_msg[k - 1][c][1];
                }
            }
        }
        if k + 1 < depth {
            let ln_a = ln_matrix(&params.transitions[k]);
            let mut msg = Vec::with_capacity(b.len());
            let mut ch = Vec::with_capacity(b.len());
            for bc in &b {
                let mut m_out = [0.0; 2];
                let mut c_out = [0u8; 2];
                for m in 0..2 {
                    let s0 = ln_a[m][0] + bc[0];
                    let s1 = ln_a[m][1] + bc[1];
                    (m_out[m], c_out[m]) = if s1 > s0 { (s1, 1) } else { (s0, 0) };
                }
                msg.push(m_out);
                ch.push(c_out);
            }
            up_msg.push(msg);
            choice.push(ch);
        }
        best.push(b);
    }
    let ln_prior = [params.root_prior[0].ln(), params.root_prior[1].ln()];
    let mut labels: Vec<Vec<u8>> = tree
        .levels
        .iter()
        .map(|g| vec![0u8; g.values.len()])
        .collect();
    let mut log_score = 0.0;
    for (i, b) in best[depth - 1].iter().enumerate() {
        let s0 = ln_prior[0] + b[0];
        let s1 = ln_prior[1] + b[1];
        let (s, m) = if s1 > s0 { (s1, 1) } else { (s0, 0) };
        log_score += s;
        labels[depth - 1][i] = m;
    }
    for k in (1..depth).rev() {
        for p in 0..labels[k].len() {
            let m = labels[k][p] as usize;
            for c in tree.children(k, p) {
                labels[k - 1][c] = choice[k - 1][c][m];
            }
        }
    }
    Ok(TreeStates { labels, log_score })
}

#[derive(Debug, Clone, Default, PartialEq)]
struct TreeStats {
    log_likelihood: f64,
    roots: f64,
    root_occupancy: [f64; 2],
    transitions: Vec<[[f64; 2]; 2]>,
    occupancy: Vec<[f64; 2]>,
    weighted_sq: Vec<f64>,
    weighted_abs: Vec<f64>,
}

impl TreeStats {
    fn zeros(depth: usize) -> Self {
        TreeStats {
            transitions: vec![[[0.0; 2]; 2]; depth - 1],
            occupancy: vec![[0.0; 2]; depth],
            weighted_sq: vec![0.0; depth],
            weighted_abs: vec![0.0; depth],
            ..Default::default()
        }
    }

    fn merge(&mut self, o: &TreeStats) {
        self.log_likelihood += o.log_likelihood;
        self.roots += o.roots;
        for m in 0..2 {
            self.root_occupancy[m] += o.root_occupancy[m];
        }
        for (a, b) in self.transitions.iter_mut().zip(&o.transitions) {
            for m in 0..2 {
                for n in 0..2 {
                    a[m][n] += b[m][n];
                }
            }
        }
        for k in 0..self.occupancy.len() {
            self.occupancy[k][0] += o.occupancy[k][0];
            self.occupancy[k][1] += o.occupancy[k][1];
            self.weighted_sq[k] += o.weighted_sq[k];
            self.weighted_abs[k] += o.weighted_abs[k];
        }
    }
}

fn tree_stats(tree: &CoeffQuadtree, params: &TreeParams) -> Result<TreeStats> {
    let up = upward_pass(tree, params)?;
    let down = downward_pass(tree, params, &up)?;
    let depth = tree.depth();
    let mut s = TreeStats::zeros(depth);
    s.log_likelihood = up.log_likelihood();
    s.roots = tree.roots() as f64;
    for g in &down.posterior[depth - 1] {
        s.root_occupancy[0] += g[0];
        s.root_occupancy[1] += g[1];
    }
    for k in 0..depth {
        for (g, &w) in down.posterior[k].iter().zip(&tree.levels[k].values) {
            s.occupancy[k][0] += g[0];
            s.occupancy[k][1] += g[1];
            s.weighted_sq[k] += g[0] * w * w;
            s.weighted_abs[k] += g[1] * w.abs();
        }
    }
    for k in 0..depth - 1 {
        for x in &down.pairwise[k] {
            for m in 0..2 {
                for n in 0..2 {
                    s.transitions[k][m][n] += x[m][n];
                }
            }
        }
    }
    Ok(s)
}

/// Log-likelihood of a collection of trees.
pub fn log_likelihood(trees: &[CoeffQuadtree], params: &TreeParams) -> Result<f64> {
    trees
        .iter()
        .map(|t| upward_pass(t, params).map(|u| u.log_likelihood()))
        .sum()
}

fn e_step(trees: &[CoeffQuadtree], params: &TreeParams) -> Result<TreeStats> {
    let parts: Vec<Result<TreeStats>> = trees.par_iter().map(|t| tree_stats(t, params)).collect();
    let mut total = TreeStats::zeros(params.depth());
    for p in parts {
        total.merge(&p?);
    }
    Ok(total)
}

fn m_step(
    stats: &TreeStats,
    old: &TreeParams,
    iteration: usize,
    frozen: &mut Vec<FrozenState>,
) -> TreeParams {
    let mut next = old.clone();
    let r0 = stats.root_occupancy[0] / stats.roots;
    next.root_prior = [r0, 1.0 - r0];
    for (k, t) in next.transitions.iter_mut().enumerate() {
        for m in 0..2 {
            let row = stats.transitions[k][m];
            let total = row[0] + row[1];
            if total >= MIN_RESPONSIBILITY {
                t[m] = [row[0] / total, 1.0 - row[0] / total];
            }
        }
    }
    for (k, e) in next.emissions.iter_mut().enumerate() {
        let occ = stats.occupancy[k];
        if occ[0] >= MIN_RESPONSIBILITY {
            e.sigma0 = (stats.weighted_sq[k] / occ[0]).sqrt().max(VARIANCE_FLOOR);
        } else {
            frozen.push(FrozenState {
                iteration,
                level: k,
                state: 0,
            });
        }
        if occ[1] >= MIN_RESPONSIBILITY {
            e.b1 = (stats.weighted_abs[k] / occ[1]).max(VARIANCE_FLOOR);
        } else {
            frozen.push(FrozenState {
                iteration,
                level: k,
                state: 1,
            });
        }
    }
    next
}

/// EM with parameters tied per level across every tree. Iteration and
/// stopping semantics match [`crate::hmc::em_train`].
pub fn em_train_tree(
    trees: &[CoeffQuadtree],
    init: &TreeParams,
    max_iters: usize,
    tol: f64,
) -> Result<TrainOutcome<TreeParams>> {
    init.validate()?;
    if trees.is_empty() {
        return Err(Error::InvalidParams("no trees to train on".into()));
    }
    for t in trees {
        init.check_tree(t)?;
    }
    let mut params = init.clone();
    let mut stats = e_step(trees, &params)?;
    let mut history = vec![stats.log_likelihood];
    let mut frozen = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        params = m_step(&stats, &params, iterations, &mut frozen);
        stats = e_step(trees, &params)?;
        let prev = *history.last().unwrap();
        history.push(stats.log_likelihood);
        if has_converged(prev, stats.log_likelihood, tol) {
            converged = true;
            break;
        }
    }
    if !converged && max_iters > 0 {
        log::warn!("tree EM stopped at max_iters = {max_iters} before reaching tol = {tol}");
    }
    Ok(TrainOutcome {
        params,
        history,
        iterations,
        converged,
        frozen,
    })
}
