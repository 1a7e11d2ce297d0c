//! Inference routines against brute-force enumeration.

mod common;

use swt_hmm_edge::hmc;
use swt_hmm_edge::hmt::{self, CoeffQuadtree, TreeParams};
use swt_hmm_edge::stat_models::Emission;
use swt_hmm_edge::swt::Plane;

#[test]
fn chain_posteriors_match_enumeration() {
    let mut rng = common::rng(11);
    for trial in 0..60 {
        let params = common::random_chain_params(&mut rng);
        let t_len = 1 + trial % 9;
        let (_, obs) = common::sample_chain(&mut rng, &params, t_len);
        let oracle = common::enumerate_chain(&params, &obs);
        let post = hmc::forward_backward(&obs, &params).unwrap();
        for (g, o) in post.gamma.iter().zip(&oracle.gamma) {
            assert!(
                (g[0] - o[0]).abs() < 1e-10 && (g[1] - o[1]).abs() < 1e-10,
                "{g:?} vs {o:?}"
            );
        }
    }
}

#[test]
fn chain_pairwise_posteriors_match_enumeration() {
    let mut rng = common::rng(12);
    for _ in 0..30 {
        let params = common::random_chain_params(&mut rng);
        let (_, obs) = common::sample_chain(&mut rng, &params, 6);
        let post = hmc::forward_backward(&obs, &params).unwrap();
        let ll = common::enumerate_chain(&params, &obs).log_likelihood;
        let mut xi = vec![[[0.0; 2]; 2]; 5];
        for bits in 0..64usize {
            let path = common::path_from_bits(bits, 6);
            let w = (common::chain_joint(&params, &path, &obs) - ll).exp();
            for t in 0..5 {
                xi[t][path[t] as usize][path[t + 1] as usize] += w;
            }
        }
        for (a, b) in post.xi.iter().zip(&xi) {
            for i in 0..2 {
                for j in 0..2 {
                    assert!((a[i][j] - b[i][j]).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn viterbi_path_is_the_first_maximum_on_ties() {
    // Equal emission scores and a uniform chain: all 2^T paths tie exactly,
    // so the decoder must return the all-zero path.
    let ln_e = vec![[-1.25, -1.25]; 6];
    let (_, path, score) = hmc::viterbi_ln(&ln_e, &[0.5, 0.5], &[[0.5, 0.5], [0.5, 0.5]]).unwrap();
    assert_eq!(path.states(), &[0u8; 6]);
    let expected = 6.0 * (0.5f64.ln() - 1.25);
    assert!((score - expected).abs() < 1e-12);
}

#[test]
fn forest_inference_splits_into_independent_trees() {
    // A 6x4 plane with two levels forms a 3x2 forest of 2-level trees.
    let mut rng = common::rng(13);
    let params = common::random_tree_params(&mut rng, 2);
    let fine: Vec<f64> = (0..24)
        .map(|_| common::draw_emission(&mut rng, &params.emissions[0], 1))
        .collect();
    let coarse: Vec<f64> = (0..24)
        .map(|_| common::draw_emission(&mut rng, &params.emissions[1], 1))
        .collect();
    let p0 = Plane::new(4, 6, fine).unwrap();
    let p1 = Plane::new(4, 6, coarse).unwrap();
    let forest = CoeffQuadtree::from_planes(&[&p0, &p1]).unwrap();
    assert_eq!(forest.roots(), 6);
    let up = hmt::upward_pass(&forest, &params).unwrap();
    let down = hmt::downward_pass(&forest, &params, &up).unwrap();
    let map = hmt::map_states_tree(&forest, &params).unwrap();
    let mut total_ll = 0.0;
    let mut total_score = 0.0;
    for r in 0..3 {
        for c in 0..2 {
            // Gather one 2x2 block and its root by hand.
            let leaves: Vec<f64> = (0..4)
                .map(|d| p0.get(2 * c + d % 2, 2 * r + d / 2))
                .collect();
            let root = p1.get(2 * c, 2 * r);
            let tree = CoeffQuadtree::single(vec![leaves, vec![root]]).unwrap();
            let oracle = common::enumerate_tree(&tree, &params);
            total_ll += oracle.log_likelihood;
            total_score += oracle.max_score;
            let root_idx = r * 2 + c;
            assert!((down.posterior[1][root_idx][1] - oracle.posterior[1][0][1]).abs() < 1e-10);
            assert_eq!(map.labels[1][root_idx], oracle.best[1][0]);
            for d in 0..4 {
                let leaf_idx = (2 * r + d / 2) * 4 + 2 * c + d % 2;
                assert!((down.posterior[0][leaf_idx][1] - oracle.posterior[0][d][1]).abs() < 1e-10);
                assert_eq!(map.labels[0][leaf_idx], oracle.best[0][d]);
            }
        }
    }
    assert!((up.log_likelihood() - total_ll).abs() < 1e-9);
    assert!((map.log_score - total_score).abs() < 1e-9);
}

#[test]
fn ragged_forest_has_partial_families() {
    // Odd sizes leave border parents with fewer than four children.
    let mut rng = common::rng(14);
    let params = common::random_tree_params(&mut rng, 3);
    let planes: Vec<Plane> = (0..3)
        .map(|k| {
            let v = (0..35)
                .map(|_| common::draw_emission(&mut rng, &params.emissions[k], 0))
                .collect();
            Plane::new(7, 5, v).unwrap()
        })
        .collect();
    let refs: Vec<&Plane> = planes.iter().collect();
    let forest = CoeffQuadtree::from_planes(&refs).unwrap();
    assert_eq!(forest.node_count(), 35 + 12 + 4);
    let up = hmt::upward_pass(&forest, &params).unwrap();
    let down = hmt::downward_pass(&forest, &params, &up).unwrap();
    for level in &down.posterior {
        for p in level {
            assert!((p[0] + p[1] - 1.0).abs() < 1e-12);
        }
    }
    // Every node is visited exactly once when walking down from the roots.
    let mut seen = 0;
    let mut stack: Vec<(usize, usize)> = (0..forest.roots()).map(|i| (2, i)).collect();
    while let Some((k, i)) = stack.pop() {
        seen += 1;
        if k > 0 {
            stack.extend(forest.children(k, i).map(|c| (k - 1, c)));
        }
    }
    assert_eq!(seen, forest.node_count());
}

#[test]
fn tree_pairwise_posteriors_match_enumeration() {
    let mut rng = common::rng(15);
    for _ in 0..20 {
        let params = common::random_tree_params(&mut rng, 2);
        let (_, tree) = common::sample_tree(&mut rng, &params);
        let up = hmt::upward_pass(&tree, &params).unwrap();
        let down = hmt::downward_pass(&tree, &params, &up).unwrap();
        let ll = common::enumerate_tree(&tree, &params).log_likelihood;
        let leaves = &tree.levels()[0].values;
        let root = tree.levels()[1].values[0];
        for (i, pair) in down.pairwise[0].iter().enumerate() {
            for m in 0..2u8 {
                for n in 0..2u8 {
                    // Sum the joint over every assignment with parent = m, leaf i = n.
                    let mut mass = 0.0;
                    for bits in 0..16usize {
                        let s: Vec<u8> = (0..4).map(|d| ((bits >> d) & 1) as u8).collect();
                        if s[i] != n {
                            continue;
                        }
                        let lp = params.root_prior[m as usize].ln()
                            + common::ln_emission(&params.emissions[1], m, root)
                            + (0..4)
                                .map(|d| {
                                    params.transitions[0][m as usize][s[d] as usize].ln()
                                        + common::ln_emission(&params.emissions[0], s[d], leaves[d])
                                })
                                .sum::<f64>();
                        mass += (lp - ll).exp();
                    }
                    assert!((pair[m as usize][n as usize] - mass).abs() < 1e-10);
                }
            }
        }
    }
}

#[test]
fn tree_marginals_without_data_follow_the_prior() {
    let params = TreeParams::new(
        [0.7, 0.3],
        vec![[[0.9, 0.1], [0.4, 0.6]]],
        vec![
            Emission {
                sigma0: 1.0,
                b1: 1.0
            };
            2
        ],
    )
    .unwrap();
    let m = params.level_marginals();
    // Level 0 marginal: 0.7 * 0.1 + 0.3 * 0.6 = 0.25.
    assert!((m[1][1] - 0.3).abs() < 1e-15);
    assert!((m[0][1] - 0.25).abs() < 1e-15);
}
