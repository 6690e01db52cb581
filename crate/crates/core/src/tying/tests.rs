use super::*;
use crate::rng::sub_rng;
use proptest::prelude::*;
use rand::Rng;
use rand_distr::{Distribution, Normal};

type Frames = Vec<Vec<f32>>;

/// Frames of `n` classes; class `c` is centred at `centres[c]` in every dimension.
fn class_frames(centres: &[f64], per_class: usize, dim: usize, seed: u64) -> Vec<Frames> {
    let mut rng = sub_rng(seed, "tying-test", 0);
    centres
        .iter()
        .map(|&m| {
            let n = Normal::new(m, 0.3).unwrap();
            (0..per_class)
                .map(|_| (0..dim).map(|_| n.sample(&mut rng) as f32).collect())
                .collect()
        })
        .collect()
}

fn stats_of(frames: &[Frames]) -> Vec<GaussianNodeStats> {
    frames
        .iter()
        .map(|fs| {
            let mut s = GaussianNodeStats::new(fs[0].len());
            for f in fs {
                s.add_frame(f, 1.0);
            }
            s
        })
        .collect()
}

/// Fits a Gaussian to the frames with a two-pass estimate and sums their
/// log-densities frame by frame.
fn direct_ll(frames: &[&Vec<f32>]) -> f64 {
    if frames.is_empty() {
        return 0.0;
    }
    let n = frames.len() as f64;
    let d = frames[0].len();
    let mean: Vec<f64> = (0..d).map(|k| frames.iter().map(|f| f[k] as f64).sum::<f64>() / n).collect();
    let var: Vec<f64> = (0..d)
        .map(|k| {
            (frames.iter().map(|f| (f[k] as f64 - mean[k]).powi(2)).sum::<f64>() / n).max(VARIANCE_FLOOR)
        })
        .collect();
    frames
        .iter()
        .map(|f| {
            (0..d)
                .map(|k| -0.5 * ((2.0 * PI * var[k]).ln() + (f[k] as f64 - mean[k]).powi(2) / var[k]))
                .sum::<f64>()
        })
        .sum()
}

fn direct_ll_classes(frames: &[Frames], classes: &[u32]) -> f64 {
    let all: Vec<&Vec<f32>> = classes.iter().flat_map(|&c| frames[c as usize].iter()).collect();
    direct_ll(&all)
}

#[test]
fn empty_set_scores_zero() {
    assert_eq!(pooled_log_likelihood(&GaussianNodeStats::new(4), VARIANCE_FLOOR).unwrap(), 0.0);
}

#[test]
fn analytic_cancellation() {
    let sigma = (1.0 / (2.0 * PI)).sqrt();
    let mut s = GaussianNodeStats::new(1);
    s.add_frame(&[(1.0 + sigma) as f32], 1.0);
    s.add_frame(&[(1.0 - sigma) as f32], 1.0);
    let l = pooled_log_likelihood(&s, VARIANCE_FLOOR).unwrap();
    assert!((l + 1.0).abs() < 1e-6, "{l}");
}

#[test]
fn negative_occupancy_is_rejected() {
    let mut s = GaussianNodeStats::new(2);
    s.occupancy = -1.0;
    assert!(matches!(pooled_log_likelihood(&s, VARIANCE_FLOOR), Err(Error::Invariant(_))));
}

#[test]
fn pooled_formula_matches_frame_by_frame_density() {
    for seed in 0..5 {
        let mut rng = sub_rng(seed, "pool", 0);
        let frames: Vec<Vec<f32>> = (0..200).map(|_| (0..6).map(|_| rng.gen::<f32>()).collect()).collect();
        let mut states = vec![GaussianNodeStats::new(6); 3];
        for (i, f) in frames.iter().enumerate() {
            states[i % 3].add_frame(f, 1.0);
        }
        let mut pooled = GaussianNodeStats::new(6);
        for s in &states {
            pooled += s;
        }
        let fast = pooled_log_likelihood(&pooled, VARIANCE_FLOOR).unwrap();
        let refs: Vec<&Vec<f32>> = frames.iter().collect();
        let slow = direct_ll(&refs);
        assert!(((fast - slow) / slow).abs() < 1e-6, "{fast} vs {slow}");
    }
}

#[test]
fn identical_children_gain_nothing() {
    let frames = class_frames(&[0.5], 50, 3, 1);
    let s = &stats_of(&frames)[0];
    let gain = split_gain(s, s, VARIANCE_FLOOR).unwrap();
    assert!(gain.abs() < 1e-9, "{gain}");
}

#[test]
fn separated_children_gain() {
    let frames = class_frames(&[0.0, 5.0], 50, 3, 2);
    let s = stats_of(&frames);
    assert!(split_gain(&s[0], &s[1], VARIANCE_FLOOR).unwrap() > 0.0);
}

fn question(id: usize, members: &[u32]) -> Question {
    Question {
        id,
        position: 0,
        members: members.to_vec(),
    }
}

fn open_cfg() -> TyingConfig {
    TyingConfig {
        split_threshold: 0.0,
        min_occupancy: 0.0,
        ..TyingConfig::default()
    }
}

#[test]
fn best_question_matches_exhaustive_scoring() {
    for seed in 0..10 {
        let frames = class_frames(&[0.0, 0.7, 1.1, 2.0], 40, 2, seed);
        let stats = stats_of(&frames);
        let qs = vec![question(0, &[0]), question(1, &[0, 1]), question(2, &[3])];
        let tree = build_tying_tree(0, &qs, &stats, &open_cfg()).unwrap();
        let all = [0u32, 1, 2, 3];
        let parent = direct_ll_classes(&frames, &all);
        let mut best = (f64::NEG_INFINITY, 0);
        for q in &qs {
            let (yes, no) = q.partition(&all).unwrap();
            let g = direct_ll_classes(&frames, &yes) + direct_ll_classes(&frames, &no) - parent;
            if g > best.0 {
                best = (g, q.id);
            }
        }
        assert_eq!(tree.nodes[0].question, Some(best.1), "seed {seed}");
        assert!((tree.nodes[0].gain - best.0).abs() < 1e-6 * best.0.abs().max(1.0));
    }
}

#[test]
fn single_class_has_no_questions() {
    let stats = stats_of(&class_frames(&[0.0], 10, 2, 0));
    let (_, qs) = generate_question_set(0, &stats, None, VARIANCE_FLOOR).unwrap();
    assert!(qs.is_empty());
}

#[test]
fn full_question_tree_has_n_minus_one_questions() {
    let centres: Vec<f64> = (0..9).map(|c| c as f64 * 0.37).collect();
    let stats = stats_of(&class_frames(&centres, 20, 3, 4));
    let (tree, qs) = generate_question_set(2, &stats, None, VARIANCE_FLOOR).unwrap();
    assert_eq!(qs.len(), 8);
    assert!(qs.iter().all(|q| q.position == 2 && !q.members.is_empty() && q.members.len() < 9));
    let mut sets: Vec<&Vec<u32>> = qs.iter().map(|q| &q.members).collect();
    sets.sort();
    sets.dedup();
    assert_eq!(sets.len(), 8);
    assert!(tree
        .nodes
        .iter()
        .filter(|n| n.children.is_none())
        .all(|n| n.classes.len() == 1));

    let (_, shallow) = generate_question_set(2, &stats, Some(1), VARIANCE_FLOOR).unwrap();
    assert_eq!(shallow.len(), 1);
}

#[test]
fn root_question_separates_the_two_clusters() {
    let frames = class_frames(&[0.0, 0.1, 3.0, 3.1], 50, 2, 5);
    let stats = stats_of(&frames);
    let (_, qs) = generate_question_set(0, &stats, None, VARIANCE_FLOOR).unwrap();
    // Oracle: the best 2-partition by total pooled likelihood.
    let mut best = (f64::NEG_INFINITY, vec![]);
    for mask in 1u32..7 {
        let yes: Vec<u32> = (0..4).filter(|c| mask & (1 << c) != 0).collect();
        let no: Vec<u32> = (0..4).filter(|c| mask & (1 << c) == 0).collect();
        let l = direct_ll_classes(&frames, &yes) + direct_ll_classes(&frames, &no);
        if l > best.0 {
            best = (l, yes);
        }
    }
    let root = &qs[0].members;
    let complement: Vec<u32> = (0..4).filter(|c| !root.contains(c)).collect();
    assert!(*root == best.1 || complement == best.1, "{root:?} vs {:?}", best.1);
    assert!(*root == vec![0, 1] || *root == vec![2, 3]);
}

#[test]
fn question_generation_is_deterministic_and_round_trips() {
    let centres: Vec<f64> = (0..6).map(|c| (c % 3) as f64).collect();
    let stats = stats_of(&class_frames(&centres, 20, 3, 6));
    let a = generate_question_set(1, &stats, None, VARIANCE_FLOOR).unwrap();
    let b = generate_question_set(1, &stats, None, VARIANCE_FLOOR).unwrap();
    assert_eq!(a, b);
    let sets = vec![Vec::new(), a.1.clone()];
    let mut buf = Vec::new();
    write_questions(&mut buf, &sets).unwrap();
    assert_eq!(read_questions(buf.as_slice(), 2).unwrap(), sets);
}

#[test]
fn infinite_threshold_gives_one_leaf() {
    let stats = stats_of(&class_frames(&[0.0, 2.0, 4.0], 30, 2, 7));
    let qs = vec![question(0, &[0]), question(1, &[1])];
    let cfg = TyingConfig {
        split_threshold: f64::INFINITY,
        ..open_cfg()
    };
    assert_eq!(build_tying_tree(0, &qs, &stats, &cfg).unwrap().num_leaves(), 1);
}

#[test]
fn zero_threshold_gives_singletons() {
    let stats = stats_of(&class_frames(&[0.0, 1.0, 2.0, 3.0], 30, 2, 8));
    let qs: Vec<Question> = (0..4).map(|c| question(c, &[c as u32])).collect();
    let tree = build_tying_tree(0, &qs, &stats, &open_cfg()).unwrap();
    let leaves = tree.leaves();
    assert_eq!(leaves.len(), 4);
    assert!(leaves.iter().all(|&l| tree.nodes[l].classes.len() == 1));
    for (n, node) in tree.nodes.iter().enumerate() {
        if let Some((a, b)) = node.children {
            let mut joined = tree.nodes[a].classes.clone();
            joined.extend(&tree.nodes[b].classes);
            joined.sort();
            assert_eq!(joined, node.classes, "node {n}");
            assert!((tree.nodes[a].stats.occupancy + tree.nodes[b].stats.occupancy - node.stats.occupancy).abs() < 1e-9);
        }
    }
}

#[test]
fn identical_pair_stays_tied_while_outlier_splits_first() {
    // A = 0 and B = 1 share one distribution; C = 2 differs.
    let mut frames = class_frames(&[0.0, 0.0, 2.0], 60, 2, 9);
    frames[1] = frames[0].clone();
    let stats = stats_of(&frames);
    let qs = vec![question(0, &[0]), question(1, &[1]), question(2, &[2])];
    let tree = build_tying_tree(0, &qs, &stats, &open_cfg()).unwrap();
    let all = [0u32, 1, 2];
    let parent = direct_ll_classes(&frames, &all);
    let gains: Vec<f64> = qs
        .iter()
        .map(|q| {
            let (y, n) = q.partition(&all).unwrap();
            direct_ll_classes(&frames, &y) + direct_ll_classes(&frames, &n) - parent
        })
        .collect();
    assert!(gains[2] > gains[0] && gains[2] > gains[1]);
    assert_eq!(tree.nodes[0].question, Some(2));
    let leaves: Vec<Vec<u32>> = tree.leaves().iter().map(|&l| tree.nodes[l].classes.clone()).collect();
    assert_eq!(leaves, vec![vec![2], vec![0, 1]]);
}

fn singleton_trees(num_classes: usize, positions: usize, seed: u64) -> (Vec<Vec<Frames>>, Vec<TyingTree>) {
    let mut rng = sub_rng(seed, "trees", 0);
    let mut all_frames = Vec::new();
    let mut trees = Vec::new();
    for p in 0..positions {
        let centres: Vec<f64> = (0..num_classes).map(|_| rng.gen_range(0.0..2.0)).collect();
        let frames = class_frames(&centres, 25, 2, seed * 31 + p as u64);
        let stats = stats_of(&frames);
        let (_, qs) = generate_question_set(p, &stats, None, VARIANCE_FLOOR).unwrap();
        trees.push(build_tying_tree(p, &qs, &stats, &open_cfg()).unwrap());
        all_frames.push(frames);
    }
    (all_frames, trees)
}

#[test]
fn merging_to_leaf_count_changes_nothing() {
    let (_, mut trees) = singleton_trees(4, 3, 1);
    // drop one split so the leaf count differs from the untied count
    let cut = trees[0].nodes.iter().position(|n| n.children.is_some() && {
        let (a, b) = n.children.unwrap();
        trees[0].nodes[a].is_leaf() && trees[0].nodes[b].is_leaf()
    });
    trees[0].nodes[cut.unwrap()].children = None;
    let leaves: usize = trees.iter().map(TyingTree::num_leaves).sum();
    let out = merge_to_target(&trees, leaves, VARIANCE_FLOOR).unwrap();
    assert!(out.merges.is_empty());
    assert_eq!(out.map.num_tied(), leaves);
}

#[test]
fn untied_target_is_identity() {
    let (_, trees) = singleton_trees(5, 5, 2);
    let out = merge_to_target(&trees, 25, VARIANCE_FLOOR).unwrap();
    assert!(out.map.is_identity());
    assert_eq!(out.map, StateTyingMap::identity(5, 5));
}

#[test]
fn minimum_target_collapses_every_tree() {
    let (_, trees) = singleton_trees(4, 5, 3);
    let out = merge_to_target(&trees, 5, VARIANCE_FLOOR).unwrap();
    assert!(out.trees.iter().all(|t| t.num_leaves() == 1));
    for p in 0..5 {
        let ids: Vec<u32> = (0..4).map(|c| out.map.tied_id(c, p)).collect();
        assert!(ids.iter().all(|&i| i == ids[0]));
    }
    assert!(matches!(
        merge_to_target(&trees, 4, VARIANCE_FLOOR),
        Err(Error::TargetOutOfRange { min: 5, max: 20, .. })
    ));
    assert!(merge_to_target(&trees, 21, VARIANCE_FLOOR).is_err());
}

#[test]
fn merges_follow_exhaustive_rescoring() {
    // 4 positions x 3 classes = 12 singleton leaves, merged down to 9.
    let (frames, trees) = singleton_trees(3, 4, 4);
    let out = merge_to_target(&trees, 9, VARIANCE_FLOOR).unwrap();
    assert_eq!(out.merges.len(), 3);

    let mut sim = trees.clone();
    for step in 0..3 {
        let mut best: Option<(f64, usize, usize)> = None;
        for (p, t) in sim.iter().enumerate() {
            for (n, node) in t.nodes.iter().enumerate() {
                let Some((a, b)) = node.children else { continue };
                if !(t.nodes[a].is_leaf() && t.nodes[b].is_leaf()) {
                    continue;
                }
                let f = &frames[p];
                let cost = direct_ll_classes(f, &t.nodes[a].classes) + direct_ll_classes(f, &t.nodes[b].classes)
                    - direct_ll_classes(f, &node.classes);
                if best.map_or(true, |(c, _, _)| cost < c) {
                    best = Some((cost, p, n));
                }
            }
        }
        let (cost, p, n) = best.unwrap();
        let rec = &out.merges[step];
        assert_eq!((rec.position, rec.node), (p, n), "step {step}");
        assert!((rec.cost - cost).abs() < 1e-6 * cost.abs().max(1.0));
        assert!(rec.cost >= -1e-9);
        sim[p].nodes[n].children = None;
    }
    assert_eq!(out.map.num_tied(), 9);
}

#[test]
fn average_state_targets() {
    assert_eq!(retarget_average_states(3980, 3.0).unwrap(), 11940);
    assert_eq!(retarget_average_states(20, 5.0).unwrap(), 100);
    assert_eq!(retarget_average_states(20, 1.0).unwrap(), 20);
    assert!(retarget_average_states(20, 0.0).is_err());
}

#[test]
fn dot_export_lists_every_node() {
    let (_, trees) = singleton_trees(3, 1, 5);
    let dot = trees[0].to_dot(&[]);
    assert!(dot.starts_with("digraph"));
    assert_eq!(dot.matches("[label=\"{").count() + dot.matches("[label=\"q").count(), trees[0].nodes.len());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn maps_are_total_pure_and_exact(seed in 0u64..10_000, classes in 2usize..7, positions in 1usize..5, frac in 0.0f64..1.0) {
        let (_, trees) = singleton_trees(classes, positions, seed);
        let leaves: usize = trees.iter().map(TyingTree::num_leaves).sum();
        let target = positions + ((leaves - positions) as f64 * frac) as usize;
        let out = merge_to_target(&trees, target, VARIANCE_FLOOR).unwrap();
        prop_assert_eq!(out.map.num_tied(), target);
        prop_assert!(out.merges.iter().all(|m| m.cost >= -1e-9));
        for id in 0..target as u32 {
            let members = out.map.members(id);
            prop_assert!(!members.is_empty());
            prop_assert!(members.iter().all(|s| s.position == members[0].position));
        }
        let again = merge_to_target(&trees, target, VARIANCE_FLOOR).unwrap();
        prop_assert_eq!(again.map, out.map);
    }
}
