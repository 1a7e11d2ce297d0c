//! Two-state hidden Markov chain over coefficient sequences: log-space
//! forward-backward, Baum-Welch (EM) training and Viterbi decoding.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stat_models::{log_sum_exp2, Emission, VARIANCE_FLOOR};

/// Responsibility mass below which a state's parameters are frozen for an
/// M-step.
pub const MIN_RESPONSIBILITY: f64 = 1e-12;

const STOCHASTIC_TOL: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChainParams {
    pub initial: [f64; 2],
    /// `transition[i][j] = p(s_t = j | s_{t-1} = i)`
    pub transition: [[f64; 2]; 2],
    pub emission: Emission,
}

pub(crate) fn check_distribution(name: &str, p: &[f64; 2]) -> Result<()> {
    if p.iter().any(|v| !(0.0..=1.0).contains(v)) || (p[0] + p[1] - 1.0).abs() > STOCHASTIC_TOL {
        return Err(Error::InvalidParams(format!(
            "{name} {p:?} is not a probability vector"
        )));
    }
    Ok(())
}

pub(crate) fn ln_matrix(m: &[[f64; 2]; 2]) -> [[f64; 2]; 2] {
    [[m[0][0].ln(), m[0][1].ln()], [m[1][0].ln(), m[1][1].ln()]]
}

impl ChainParams {
    pub fn new(initial: [f64; 2], transition: [[f64; 2]; 2], emission: Emission) -> Result<Self> {
        let p = ChainParams {
            initial,
            transition,
            emission,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        check_distribution("initial", &self.initial)?;
        check_distribution("transition row 0", &self.transition[0])?;
        check_distribution("transition row 1", &self.transition[1])?;
        self.emission.validate()
    }

    /// Long-run fraction of edge states, `a01 / (a01 + a10)`. Falls back to
    /// the initial distribution when the chain is reducible.
    pub fn stationary_edge(&self) -> f64 {
        let (a01, a10) = (self.transition[0][1], self.transition[1][0]);
        if a01 + a10 > 0.0 {
            a01 / (a01 + a10)
        } else {
            self.initial[1]
        }
    }

    /// Exchanges the roles of the two states. Emissions cannot be swapped
    /// literally (the families differ), so each is replaced by the other
    /// family with matching variance: `sigma0' = sqrt(2) b1`,
    /// `b1' = sigma0 / sqrt(2)`. Applying it twice is the identity.
    pub fn swap_states(&self) -> ChainParams {
        let a = self.transition;
        ChainParams {
            initial: [self.initial[1], self.initial[0]],
            transition: [[a[1][1], a[1][0]], [a[0][1], a[0][0]]],
            emission: swap_emission(&self.emission),
        }
    }
}

pub(crate) fn swap_emission(e: &Emission) -> Emission {
    Emission {
        sigma0: (e.b1 * std::f64::consts::SQRT_2).max(VARIANCE_FLOOR),
        b1: (e.sigma0 / std::f64::consts::SQRT_2).max(VARIANCE_FLOOR),
    }
}

/// Hidden states of one chain, `0` = non-edge, `1` = edge.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct StateSequence(pub Vec<u8>);

impl StateSequence {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn states(&self) -> &[u8] {
        &self.0
    }
}

/// Viterbi tables: `delta[t][j]` is the best log-score of any path ending in
/// state `j` at `t`, `psi[t][j]` the predecessor attaining it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trellis {
    pub delta: Vec<[f64; 2]>,
    pub psi: Vec<[u8; 2]>,
}

/// Forward-backward output.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainPosteriors {
    pub log_likelihood: f64,
    /// `gamma[t][m] = p(s_t = m | obs)`
    pub gamma: Vec<[f64; 2]>,
    /// `xi[t][i][j] = p(s_t = i, s_{t+1} = j | obs)`, length `T - 1`.
    pub xi: Vec<[[f64; 2]; 2]>,
}

/// Log emission table for a sequence; fails on the first index where neither
/// state has positive finite density.
pub fn ln_emissions(obs: &[f64], emission: &Emission) -> Result<Vec<[f64; 2]>> {
    obs.iter()
        .enumerate()
        .map(|(t, &w)| {
            let e = emission.ln_densities(w);
            if e.iter().all(|v| !(v.is_finite())) {
                Err(Error::Underflow { index: t })
            } else {
                Ok(e)
            }
        })
        .collect()
}

struct Lattice {
    alpha: Vec<[f64; 2]>,
    beta: Vec<[f64; 2]>,
    log_likelihood: f64,
}

fn lattice(ln_e: &[[f64; 2]], initial: &[f64; 2], ln_a: &[[f64; 2]; 2]) -> Result<Lattice> {
    let t_len = ln_e.len();
    let mut alpha = vec![[0.0; 2]; t_len];
    alpha[0] = [initial[0].ln() + ln_e[0][0], initial[1].ln() + ln_e[0][1]];
    for t in 1..t_len {
        let prev = alpha[t - 1];
        for j in 0..2 {
            alpha[t][j] = log_sum_exp2(prev[0] + ln_a[0][j], prev[1] + ln_a[1][j]) + ln_e[t][j];
        }
    }
    let log_likelihood = log_sum_exp2(alpha[t_len - 1][0], alpha[t_len - 1][1]);
    if !log_likelihood.is_finite() {
        let index = alpha
            .iter()
            .position(|a| log_sum_exp2(a[0], a[1]) == f64::NEG_INFINITY)
            .unwrap_or(0);
        return Err(Error::Underflow { index });
    }
    let mut beta = vec![[0.0; 2]; t_len];
    for t in (0..t_len - 1).rev() {
        let next = beta[t + 1];
        let e = ln_e[t + 1];
        for i in 0..2 {
            beta[t][i] = log_sum_exp2(ln_a[i][0] + e[0] + next[0], ln_a[i][1] + e[1] + next[1]);
        }
    }
    Ok(Lattice {
        alpha,
        beta,
        log_likelihood,
    })
}

fn normalized_pair(a: f64, b: f64) -> [f64; 2] {
    let z = log_sum_exp2(a, b);
    let p1 = (b - z).exp();
    [1.0 - p1, p1]
}

/// Forward-backward over a precomputed log emission table.
pub fn forward_backward_ln(
    ln_e: &[[f64; 2]],
    initial: &[f64; 2],
    transition: &[[f64; 2]; 2],
) -> Result<ChainPosteriors> {
    if ln_e.is_empty() {
        return Err(Error::InvalidParams("empty observation sequence".into()));
    }
    let ln_a = ln_matrix(transition);
    let lat = lattice(ln_e, initial, &ln_a)?;
    let ll = lat.log_likelihood;
    let gamma = lat
        .alpha
        .iter()
        .zip(&lat.beta)
        .map(|(a, b)| normalized_pair(a[0] + b[0], a[1] + b[1]))
        .collect();
    let xi = (0..ln_e.len() - 1)
        .map(|t| {
            let mut x = [[0.0; 2]; 2];
            for (i, row) in x.iter_mut().enumerate() {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = (lat.alpha[t][i] + ln_a[i][j] + ln_e[t + 1][j] + lat.beta[t + 1][j] - ll)
                        .exp();
                }
            }
            x
        })
        .collect();
    Ok(ChainPosteriors {
        log_likelihood: ll,
        gamma,
        xi,
    })
}

/// Posterior state marginals, pairwise posteriors and the log-likelihood of
/// one sequence.
pub fn forward_backward(obs: &[f64], params: &ChainParams) -> Result<ChainPosteriors> {
    forward_backward_ln(
        &ln_emissions(obs, &params.emission)?,
        &params.initial,
        &params.transition,
    )
}

/// Log-likelihood alone (forward pass only).
pub fn log_likelihood(obs: &[f64], params: &ChainParams) -> Result<f64> {
    if obs.is_empty() {
        return Err(Error::InvalidParams("empty observation sequence".into()));
    }
    let ln_e = ln_emissions(obs, &params.emission)?;
    let ln_a = ln_matrix(&params.transition);
    let mut alpha = [
        params.initial[0].ln() + ln_e[0][0],
        params.initial[1].ln() + ln_e[0][1],
    ];
    for e in &ln_e[1..] {
        alpha = [
            log_sum_exp2(alpha[0] + ln_a[0][0], alpha[1] + ln_a[1][0]) + e[0],
            log_sum_exp2(alpha[0] + ln_a[0][1], alpha[1] + ln_a[1][1]) + e[1],
        ];
    }
    Ok(log_sum_exp2(alpha[0], alpha[1]))
}

/// Viterbi over a log emission table; returns the trellis, the MAP path and
/// its log-score. Every argmax prefers state 0 on ties.
pub fn viterbi_ln(
    ln_e: &[[f64; 2]],
    initial: &[f64; 2],
    transition: &[[f64; 2]; 2],
) -> Result<(Trellis, StateSequence, f64)> {
    if ln_e.is_empty() {
        return Err(Error::InvalidParams("empty observation sequence".into()));
    }
    let ln_a = ln_matrix(transition);
    let t_len = ln_e.len();
    let mut delta = Vec::with_capacity(t_len);
    let mut psi = Vec::with_capacity(t_len);
    delta.push([initial[0].ln() + ln_e[0][0], initial[1].ln() + ln_e[0][1]]);
    psi.push([0u8; 2]);
    for e in &ln_e[1..] {
        let prev: [f64; 2] = *delta.last().unwrap();
        let mut d = [0.0; 2];
        let mut back = [0u8; 2];
        for j in 0..2 {
            let from0 = prev[0] + ln_a[0][j];
            let from1 = prev[1] + ln_a[1][j];
            let (best, arg) = if from1 > from0 {
                (from1, 1)
            } else {
                (from0, 0)
            };
            d[j] = best + e[j];
            back[j] = arg;
        }
        delta.push(d);
        psi.push(back);
    }
    let last = delta[t_len - 1];
    let (score, mut state) = if last[1] > last[0] {
        (last[1], 1u8)
    } else {
        (last[0], 0u8)
    };
    let mut path = vec![0u8; t_len];
    path[t_len - 1] = state;
    for t in (0..t_len - 1).rev() {
        state = psi[t + 1][state as usize];
        path[t] = state;
    }
    Ok((Trellis { delta, psi }, StateSequence(path), score))
}

/// MAP state sequence and its joint log-probability `ln p(states, obs)`.
pub fn viterbi(obs: &[f64], params: &ChainParams) -> Result<(StateSequence, f64)> {
    let ln_e = ln_emissions(obs, &params.emission)?;
    let (_, path, score) = viterbi_ln(&ln_e, &params.initial, &params.transition)?;
    Ok((path, score))
}

/// Expected sufficient statistics from one E-step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub(crate) struct ChainStats {
    pub log_likelihood: f64,
    pub sequences: f64,
    pub initial: [f64; 2],
    pub transitions: [[f64; 2]; 2],
    pub occupancy: [f64; 2],
    pub weighted_sq: f64,
    pub weighted_abs: f64,
}

impl ChainStats {
    fn merge(mut self, o: &ChainStats) -> ChainStats {
        self.log_likelihood += o.log_likelihood;
        self.sequences += o.sequences;
        for i in 0..2 {
            self.initial[i] += o.initial[i];
            self.occupancy[i] += o.occupancy[i];
            for j in 0..2 {
                self.transitions[i][j] += o.transitions[i][j];
            }
        }
        self.weighted_sq += o.weighted_sq;
        self.weighted_abs += o.weighted_abs;
        self
    }
}

fn sequence_stats(obs: &[f64], params: &ChainParams) -> Result<ChainStats> {
    let post = forward_backward(obs, params)?;
    let mut s = ChainStats {
        log_likelihood: post.log_likelihood,
        sequences: 1.0,
        initial: post.gamma[0],
        ..Default::default()
    };
    for (g, &o) in post.gamma.iter().zip(obs) {
        s.occupancy[0] += g[0];
        s.occupancy[1] += g[1];
        s.weighted_sq += g[0] * o * o;
        s.weighted_abs += g[1] * o.abs();
    }
    for x in &post.xi {
        for i in 0..2 {
            for j in 0..2 {
                s.transitions[i][j] += x[i][j];
            }
        }
    }
    Ok(s)
}

/// E-step over all sequences. Per-sequence statistics are computed in
/// parallel and summed in input order.
pub(crate) fn e_step<S: AsRef<[f64]> + Sync>(
    sequences: &[S],
    params: &ChainParams,
) -> Result<ChainStats> {
    let parts: Vec<Result<ChainStats>> = sequences
        .par_iter()
        .map(|s| sequence_stats(s.as_ref(), params))
        .collect();
    let mut total = ChainStats::default();
    for p in parts {
        total = total.merge(&p?);
    }
    Ok(total)
}

/// A state whose parameters were held fixed during an M-step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrozenState {
    /// 1-based EM iteration.
    pub iteration: usize,
    /// Tree level (0 = finest); always 0 for chains.
    pub level: usize,
    pub state: u8,
}

pub(crate) fn m_step(
    stats: &ChainStats,
    old: &ChainParams,
    iteration: usize,
    frozen: &mut Vec<FrozenState>,
) -> ChainParams {
    let mut next = *old;
    let n = stats.sequences;
    next.initial = [stats.initial[0] / n, 1.0 - stats.initial[0] / n];
    for i in 0..2 {
        let row = stats.transitions[i];
        let total = row[0] + row[1];
        if total >= MIN_RESPONSIBILITY {
            next.transition[i] = [row[0] / total, 1.0 - row[0] / total];
        }
    }
    if stats.occupancy[0] >= MIN_RESPONSIBILITY {
        next.emission.sigma0 = (stats.weighted_sq / stats.occupancy[0])
            .sqrt()
            .max(VARIANCE_FLOOR);
    } else {
        frozen.push(FrozenState {
            iteration,
            level: 0,
            state: 0,
        });
    }
    if stats.occupancy[1] >= MIN_RESPONSIBILITY {
        next.emission.b1 = (stats.weighted_abs / stats.occupancy[1]).max(VARIANCE_FLOOR);
    } else {
        frozen.push(FrozenState {
            iteration,
            level: 0,
            state: 1,
        });
    }
    next
}

/// Result of an EM run.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome<P> {
    pub params: P,
    /// Log-likelihood of the starting parameters followed by the
    /// log-likelihood after each iteration; the last entry belongs to
    /// `params`.
    pub history: Vec<f64>,
    pub iterations: usize,
    /// Stopped on the relative-improvement test rather than `max_iters`.
    pub converged: bool,
    pub frozen: Vec<FrozenState>,
}

impl<P> TrainOutcome<P> {
    pub fn final_log_likelihood(&self) -> f64 {
        *self.history.last().expect("history is never empty")
    }
}

/// True once `(new - old) / |old|` drops below `tol`.
pub(crate) fn has_converged(old: f64, new: f64, tol: f64) -> bool {
    let scale = if old != 0.0 { old.abs() } else { 1.0 };
    (new - old) / scale < tol
}

/// Baum-Welch training with parameters tied across all `sequences`.
///
/// Each iteration is one M-step followed by the E-step that scores it, so
/// `tol = f64::INFINITY` runs exactly one iteration.
pub fn em_train<S: AsRef<[f64]> + Sync>(
    sequences: &[S],
    init: &ChainParams,
    max_iters: usize,
    tol: f64,
) -> Result<TrainOutcome<ChainParams>> {
    init.validate()?;
    if sequences.iter().any(|s| s.as_ref().is_empty()) {
        return Err(Error::InvalidParams("empty training sequence".into()));
    }
    if !sequences.iter().any(|s| s.as_ref().len() >= 2) {
        return Err(Error::InvalidParams(
            "training needs at least one sequence of length >= 2".into(),
        ));
    }
    let mut params = *init;
    let mut stats = e_step(sequences, &params)?;
    let mut history = vec![stats.log_likelihood];
    let mut frozen = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    while iterations < max_iters {
        iterations += 1;
        params = m_step(&stats, &params, iterations, &mut frozen);
        stats = e_step(sequences, &params)?;
        let prev = *history.last().unwrap();
        history.push(stats.log_likelihood);
        if has_converged(prev, stats.log_likelihood, tol) {
            converged = true;
            break;
        }
    }
    if !converged && max_iters > 0 {
        log::warn!("chain EM stopped at max_iters = {max_iters} before reaching tol = {tol}");
    }
    Ok(TrainOutcome {
        params,
        history,
        iterations,
        converged,
        frozen,
    })
}
