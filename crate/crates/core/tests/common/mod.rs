//! Independent oracles and seeded generators shared by the integration tests.
//!
//! Densities are re-derived here from their closed forms instead of calling
//! the library, so a mistake in the library cannot hide in its own oracle.

#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use swt_hmm_edge::hmc::ChainParams;
use swt_hmm_edge::hmt::{CoeffQuadtree, TreeParams};
use swt_hmm_edge::stat_models::Emission;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn ln_gaussian(w: f64, sigma: f64) -> f64 {
    -0.5 * (2.0 * std::f64::consts::PI * sigma * sigma).ln() - w * w / (2.0 * sigma * sigma)
}

pub fn ln_laplacian(w: f64, b: f64) -> f64 {
    -(2.0 * b).ln() - w.abs() / b
}

pub fn ln_emission(e: &Emission, state: u8, w: f64) -> f64 {
    if state == 0 {
        ln_gaussian(w, e.sigma0)
    } else {
        ln_laplacian(w, e.b1)
    }
}

/// Stable `ln(sum(exp(v)))`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

fn probability_pair(rng: &mut ChaCha8Rng) -> [f64; 2] {
    let p = rng.gen_range(0.05..0.95);
    [p, 1.0 - p]
}

pub fn random_emission(rng: &mut ChaCha8Rng) -> Emission {
    Emission {
        sigma0: rng.gen_range(0.05..1.0),
        b1: rng.gen_range(0.05..1.0),
    }
}

pub fn random_chain_params(rng: &mut ChaCha8Rng) -> ChainParams {
    ChainParams::new(
        probability_pair(rng),
        [probability_pair(rng), probability_pair(rng)],
        random_emission(rng),
    )
    .unwrap()
}

pub fn random_tree_params(rng: &mut ChaCha8Rng, depth: usize) -> TreeParams {
    TreeParams::new(
        probability_pair(rng),
        (1..depth)
            .map(|_| [probability_pair(rng), probability_pair(rng)])
            .collect(),
        (0..depth).map(|_| random_emission(rng)).collect(),
    )
    .unwrap()
}

pub fn draw_state(rng: &mut ChaCha8Rng, p: &[f64; 2]) -> u8 {
    u8::from(rng.gen::<f64>() >= p[0])
}

/// One draw from the state's emission density (Laplacian by inverse CDF).
pub fn draw_emission(rng: &mut ChaCha8Rng, e: &Emission, state: u8) -> f64 {
    if state == 0 {
        let z: f64 = rng.sample(StandardNormal);
        e.sigma0 * z
    } else {
        let u: f64 = rng.gen_range(-0.5..0.5);
        -e.b1 * u.signum() * (1.0 - 2.0 * u.abs()).ln()
    }
}

/// Samples states and observations of length `t_len` from a chain.
pub fn sample_chain(
    rng: &mut ChaCha8Rng,
    params: &ChainParams,
    t_len: usize,
) -> (Vec<u8>, Vec<f64>) {
    let mut states = Vec::with_capacity(t_len);
    let mut obs = Vec::with_capacity(t_len);
    let mut s = draw_state(rng, &params.initial);
    for t in 0..t_len {
        if t > 0 {
            s = draw_state(rng, &params.transition[s as usize]);
        }
        states.push(s);
        obs.push(draw_emission(rng, &params.emission, s));
    }
    (states, obs)
}

/// `ln p(states, obs)` written out term by term.
pub fn chain_joint(params: &ChainParams, states: &[u8], obs: &[f64]) -> f64 {
    let mut lp = params.initial[states[0] as usize].ln();
    for t in 0..obs.len() {
        if t > 0 {
            lp += params.transition[states[t - 1] as usize][states[t] as usize].ln();
        }
        lp += ln_emission(&params.emission, states[t], obs[t]);
    }
    lp
}

/// Every one of the `2^T` state paths, decoded from the bits of its index
/// (bit `t` is the state at time `t`).
pub fn path_from_bits(bits: usize, t_len: usize) -> Vec<u8> {
    (0..t_len).map(|t| ((bits >> t) & 1) as u8).collect()
}

pub struct ChainEnumeration {
    pub max_score: f64,
    pub log_likelihood: f64,
    /// `gamma[t][m]`
    pub gamma: Vec<[f64; 2]>,
}

pub fn enumerate_chain(params: &ChainParams, obs: &[f64]) -> ChainEnumeration {
    let t_len = obs.len();
    let scores: Vec<f64> = (0..1usize << t_len)
        .map(|bits| chain_joint(params, &path_from_bits(bits, t_len), obs))
        .collect();
    let max_score = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_likelihood = log_sum_exp(&scores);
    let mut gamma = vec![[0.0; 2]; t_len];
    for (bits, s) in scores.iter().enumerate() {
        let w = (s - log_likelihood).exp();
        for (t, g) in gamma.iter_mut().enumerate() {
            g[(bits >> t) & 1] += w;
        }
    }
    ChainEnumeration {
        max_score,
        log_likelihood,
        gamma,
    }
}

/// Random complete tree of the given depth with coefficients drawn from
/// the tree model itself.
pub fn sample_tree(rng: &mut ChaCha8Rng, params: &TreeParams) -> (Vec<Vec<u8>>, CoeffQuadtree) {
    let depth = params.depth();
    let mut states: Vec<Vec<u8>> = vec![Vec::new(); depth];
    let mut values: Vec<Vec<f64>> = vec![Vec::new(); depth];
    // Top level first; node (r, c) on level k has parent (r / 2, c / 2).
    for k in (0..depth).rev() {
        let side = 1usize << (depth - 1 - k);
        for r in 0..side {
            for c in 0..side {
                let s = if k + 1 == depth {
                    draw_state(rng, &params.root_prior)
                } else {
                    let parent = states[k + 1][(r / 2) * (side / 2) + c / 2];
                    draw_state(rng, &params.transitions[k][parent as usize])
                };
                states[k].push(s);
                values[k].push(draw_emission(rng, &params.emissions[k], s));
            }
        }
    }
    (states, CoeffQuadtree::single(values).unwrap())
}

/// A flat list of the nodes of one complete tree: `(level, index, parent)`
/// where `parent` is the flat position of the parent node.
pub fn tree_nodes(depth: usize) -> Vec<(usize, usize, Option<usize>)> {
    let mut nodes = Vec::new();
    let mut level_start = vec![0; depth];
    for k in (0..depth).rev() {
        level_start[k] = nodes.len();
        let side = 1usize << (depth - 1 - k);
        for r in 0..side {
            for c in 0..side {
                let parent =
                    (k + 1 < depth).then(|| level_start[k + 1] + (r / 2) * (side / 2) + c / 2);
                nodes.push((k, r * side + c, parent));
            }
        }
    }
    nodes
}

pub struct TreeEnumeration {
    pub log_likelihood: f64,
    pub max_score: f64,
    /// Per-level state labels of the best assignment (first maximum in
    /// enumeration order).
    pub best: Vec<Vec<u8>>,
    /// `posterior[k][i][m]`
    pub posterior: Vec<Vec<[f64; 2]>>,
}

/// Brute force over all `2^nodes` joint state assignments of one tree.
pub fn enumerate_tree(tree: &CoeffQuadtree, params: &TreeParams) -> TreeEnumeration {
    let depth = tree.depth();
    let nodes = tree_nodes(depth);
    let n = nodes.len();
    let value = |k: usize, i: usize| tree.levels()[k].values[i];
    let scores: Vec<f64> = (0..1usize << n)
        .map(|bits| {
            let s = |j: usize| ((bits >> j) & 1) as u8;
            nodes
                .iter()
                .enumerate()
                .map(|(j, &(k, i, parent))| {
                    let prior = match parent {
                        None => params.root_prior[s(j) as usize],
                        Some(p) => params.transitions[k][s(p) as usize][s(j) as usize],
                    };
                    prior.ln() + ln_emission(&params.emissions[k], s(j), value(k, i))
                })
                .sum()
        })
        .collect();
    let log_likelihood = log_sum_exp(&scores);
    let (best_bits, max_score) =
        scores
            .iter()
            .copied()
            .enumerate()
            .fold(
                (0, f64::NEG_INFINITY),
                |acc, (b, s)| if s > acc.1 { (b, s) } else { acc },
            );
    let mut best: Vec<Vec<u8>> = (0..depth)
        .map(|k| vec![0; tree.levels()[k].values.len()])
        .collect();
    let mut posterior: Vec<Vec<[f64; 2]>> = (0..depth)
        .map(|k| vec![[0.0; 2]; tree.levels()[k].values.len()])
        .collect();
    for (j, &(k, i, _)) in nodes.iter().enumerate() {
        best[k][i] = ((best_bits >> j) & 1) as u8;
    }
    for (bits, s) in scores.iter().enumerate() {
        let w = (s - log_likelihood).exp();
        for (j, &(k, i, _)) in nodes.iter().enumerate() {
            posterior[k][i][(bits >> j) & 1] += w;
        }
    }
    TreeEnumeration {
        log_likelihood,
        max_score,
        best,
        posterior,
    }
}

/// Log joint of a given per-level labeling of one tree.
pub fn tree_joint(tree: &CoeffQuadtree, params: &TreeParams, labels: &[Vec<u8>]) -> f64 {
    tree_nodes(tree.depth())
        .iter()
        .map(|&(k, i, parent)| {
            let s = labels[k][i] as usize;
            let prior = match parent {
                None => params.root_prior[s],
                Some(_) => {
                    let side = 1usize << (tree.depth() - 1 - k);
                    let (r, c) = (i / side, i % side);
                    let p = labels[k + 1][(r / 2) * (side / 2) + c / 2] as usize;
                    params.transitions[k][p][s]
                }
            };
            prior.ln() + ln_emission(&params.emissions[k], s as u8, tree.levels()[k].values[i])
        })
        .sum()
}

/// Adaptive Simpson quadrature of `f` on `[a, b]` to absolute tolerance `eps`.
pub fn adaptive_simpson(f: &dyn Fn(f64) -> f64, a: f64, b: f64, eps: f64) -> f64 {
    fn simpson(fa: f64, fm: f64, fb: f64, a: f64, b: f64) -> f64 {
        (b - a) / 6.0 * (fa + 4.0 * fm + fb)
    }
    #[allow(clippy::too_many_arguments)]
    fn recurse(
        f: &dyn Fn(f64) -> f64,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        eps: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = simpson(fa, flm, fm, a, m);
        let right = simpson(fm, frm, fb, m, b);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * eps {
            left + right + delta / 15.0
        } else {
            recurse(f, a, m, fa, flm, fm, left, eps / 2.0, depth - 1)
                + recurse(f, m, b, fm, frm, fb, right, eps / 2.0, depth - 1)
        }
    }
    let (fa, fb, fm) = (f(a), f(b), f(0.5 * (a + b)));
    recurse(f, a, b, fa, fm, fb, simpson(fa, fm, fb, a, b), eps, 48)
}

/// Mass of a symmetric density on `[-limit, limit]`, integrated as
/// `2 * int_0^sqrt(limit) f(t^2) 2t dt` so that a cusp at zero becomes smooth.
pub fn symmetric_mass(f: &dyn Fn(f64) -> f64, limit: f64, eps: f64) -> f64 {
    let g = |t: f64| f(t * t) * 2.0 * t;
    // Split the range so the peak region is resolved before the tail.
    let top = limit.sqrt();
    let knots = [0.0, top / 64.0, top / 16.0, top / 4.0, top];
    2.0 * knots
        .windows(2)
        .map(|w| adaptive_simpson(&g, w[0], w[1], eps))
        .sum::<f64>()
}

/// Random grayscale values in `[0, 1]`, row-major.
pub fn random_pixels(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.gen::<f64>()).collect()
}
