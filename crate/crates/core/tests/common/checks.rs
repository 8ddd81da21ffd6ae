//! Oracle comparison loops shared by the oracle tests and the acceptance suite.
//! Each returns a summary instead of asserting so callers can report it.

use ozbias::forest::{best_split, fit_forest, ForestHyper, Node, PixelSample};
use ozbias::nn::{adam_step, AdamHyper, AdamState, Param};
use ozbias::zonal::{build_landuse_stack, categorical_cell_stats, continuous_cell_stats, ClassSet, ExtractOptions};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::oracles::{adam_reference, brute_cell, brute_force_split, random_scene};

pub fn adam_trajectory(w0: f64, grads: &[f64], lr: f64, wd: f64) -> Vec<f64> {
    let mut p = vec![Param { name: "w".into(), shape: vec![1], data: vec![w0] }];
    let mut st = AdamState::for_params(&p, AdamHyper::default());
    grads
        .iter()
        .map(|&g| {
            adam_step(&mut p, &[vec![g]], &mut st, lr, wd).unwrap();
            p[0].data[0]
        })
        .collect()
}

/// Largest absolute deviation from the reference over `settings` random
/// `(w0, g_1..g_10, lr, wd)` draws.
pub fn adam_suite(settings: usize, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..settings {
        let w0 = rng.random_range(-2.0..2.0);
        let grads: Vec<f64> = (0..10).map(|_| rng.random_range(-5.0..5.0)).collect();
        let lr = 10f64.powf(rng.random_range(-4.0..-1.0));
        let wd = [0.0, 1e-3, 0.1][rng.random_range(0..3)];
        let ours = adam_trajectory(w0, &grads, lr, wd);
        let reference = adam_reference(w0, &grads, lr, wd);
        for (a, b) in ours.iter().zip(&reference) {
            worst = worst.max((a - b).abs());
        }
    }
    worst
}

fn random_samples(rng: &mut ChaCha8Rng) -> (Vec<Vec<f64>>, Vec<f64>) {
    let n = rng.random_range(2..=12);
    let p = rng.random_range(1..=3);
    // Small integer grids make tied values and tied decreases common.
    let x: Vec<Vec<f64>> = (0..n).map(|_| (0..p).map(|_| rng.random_range(0..4) as f64).collect()).collect();
    let y: Vec<f64> = (0..n)
        .map(|_| if rng.random_bool(0.5) { rng.random_range(0..3) as f64 } else { rng.random_range(-5.0..5.0) })
        .collect();
    (x, y)
}

fn to_samples(x: &[Vec<f64>], y: &[f64]) -> Vec<PixelSample> {
    x.iter().zip(y).map(|(f, &t)| PixelSample { features: f.clone(), target: t }).collect()
}

/// Cases where `best_split` disagrees with exhaustive enumeration.
pub fn split_suite(cases: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for _ in 0..cases {
        let (x, y) = random_samples(&mut rng);
        let min_leaf = rng.random_range(1..=2);
        let all: Vec<usize> = (0..x[0].len()).collect();
        let ours = best_split(&to_samples(&x, &y), &all, min_leaf).unwrap().map(|s| (s.feature, s.threshold));
        let brute = brute_force_split(&x, &y, min_leaf).map(|c| (c.0, c.1));
        if ours != brute {
            bad.push(format!("x={x:?} y={y:?}: {ours:?} vs {brute:?}"));
        }
    }
    bad
}

/// Cases where the root of a depth-1, single-tree forest grown on all
/// samples and features disagrees with exhaustive enumeration.
pub fn stump_suite(cases: usize, seed: u64) -> Vec<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bad = Vec::new();
    for _ in 0..cases {
        let (x, y) = random_samples(&mut rng);
        let hyper = ForestHyper {
            n_trees: 1,
            max_depth: Some(1),
            min_samples_leaf: 1,
            features_per_split: Some(x[0].len()),
            bootstrap: false,
        };
        let forest = fit_forest(&to_samples(&x, &y), &hyper, 0).unwrap();
        let root = match forest.trees[0].nodes[0] {
            Node::Split { feature, threshold, .. } => Some((feature, threshold)),
            Node::Leaf { .. } => None,
        };
        let brute = brute_force_split(&x, &y, 1).map(|c| (c.0, c.1));
        if root != brute {
            bad.push(format!("x={x:?} y={y:?}: {root:?} vs {brute:?}"));
        }
    }
    bad
}

#[derive(Debug, Default)]
pub struct ZonalSummary {
    pub scenes: usize,
    pub cells: usize,
    pub empty_cells: usize,
    pub max_rel_moment: f64,
    pub max_coverage_err: f64,
    pub channel_counts_ok: bool,
    pub failures: Vec<String>,
}

fn rel(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

/// Compares per-cell statistics with a full pixel scan on `scenes` random
/// raster/grid pairs. Counts, mode, min and max must match exactly; mean and
/// variance are reported as the worst relative difference.
pub fn zonal_suite(scenes: u64) -> ZonalSummary {
    let classes = ClassSet::default();
    let mut s = ZonalSummary {
        scenes: scenes as usize,
        channel_counts_ok: true,
        ..Default::default()
    };
    for seed in 0..scenes {
        let (spec, lc, pop) = random_scene(seed, classes.codes());
        let stack = build_landuse_stack(&lc, &pop, &spec, &classes, &ExtractOptions::default()).unwrap().stack;
        s.channel_counts_ok &= stack.n_channels() == 23;
        for r in 0..spec.rows() {
            for c in 0..spec.cols() {
                s.cells += 1;
                let cell = spec.cell_bounds(r, c);
                let bl = brute_cell(&lc, &cell, classes.codes());
                let bp = brute_cell(&pop, &cell, classes.codes());
                let mut fail = |what: &str| s.failures.push(format!("scene {seed} cell ({r},{c}): {what}"));
                match categorical_cell_stats(&lc, &cell, &classes) {
                    Ok(st) => {
                        let counts: Vec<usize> =
                            st.coverage.iter().map(|f| (f * st.count as f64).round() as usize).collect();
                        if st.count != bl.count || counts != bl.class_counts {
                            fail("class counts");
                        }
                        if Some(st.mode) != bl.mode || stack.get(17, r, c) != st.mode as f64 {
                            fail("mode");
                        }
                        s.max_coverage_err = s.max_coverage_err.max((st.coverage.iter().sum::<f64>() - 1.0).abs());
                        s.max_rel_moment = s.max_rel_moment.max(rel(st.variance, bl.lc_mean_var.unwrap().1));
                    }
                    Err(_) if bl.count == 0 => s.empty_cells += 1,
                    Err(e) => fail(&format!("land cover: {e}")),
                }
                match continuous_cell_stats(&pop, &cell) {
                    Ok(st) => {
                        if st.count != bp.count {
                            fail("population count");
                        }
                        if (Some(st.min), Some(st.max)) != (bp.min, bp.max) {
                            fail("population min/max");
                        }
                        if stack.get(22, r, c) != st.mean {
                            fail("stack mean channel");
                        }
                        s.max_rel_moment = s
                            .max_rel_moment
                            .max(rel(st.mean, bp.mean.unwrap()))
                            .max(rel(st.variance, bp.variance.unwrap()));
                    }
                    Err(_) if bp.count == 0 => {}
                    Err(e) => fail(&format!("population: {e}")),
                }
            }
        }
    }
    s
}
