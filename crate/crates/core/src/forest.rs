//! Per-pixel random-forest regression (CART with variance reduction).

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::grid::{GridStack, MaskedField};

/// One training example: the input channels at a pixel and its target bias.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelSample {
    pub features: Vec<f64>,
    pub target: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ForestHyper {
    pub n_trees: usize,
    /// `None` grows until leaves are pure or too small to split.
    pub max_depth: Option<usize>,
    pub min_samples_leaf: usize,
    /// Features tried at each node; `None` means `ceil(p / 3)`.
    pub features_per_split: Option<usize>,
    pub bootstrap: bool,
}

impl Default for ForestHyper {
    fn default() -> Self {
        ForestHyper {
            n_trees: 100,
            max_depth: None,
            min_samples_leaf: 3,
            features_per_split: None,
            bootstrap: true,
        }
    }
}

impl ForestHyper {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.min_samples_leaf == 0 || self.features_per_split == Some(0) {
            return Err(Error::InvalidConfig(
                "n_trees, min_samples_leaf and features_per_split must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn mtry(&self, n_features: usize) -> usize {
        self.features_per_split.unwrap_or(n_features.div_ceil(3)).clamp(1, n_features.max(1))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Split {
    pub feature: usize,
    pub threshold: f64,
    /// Parent variance minus the size-weighted mean of the child variances.
    pub decrease: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        /// Index of the right child; the left child follows immediately.
        right: usize,
        n_samples: usize,
        decrease: f64,
    },
    Leaf {
        value: f64,
        count: usize,
    },
}

/// Nodes in pre-order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Leaf { value, .. } => return value,
                Node::Split { feature, threshold, right, .. } => {
                    i = if x[feature] <= threshold { i + 1 } else { right };
                }
            }
        }
    }

    pub fn depth(&self) -> usize {
        fn walk(nodes: &[Node], i: usize) -> (usize, usize) {
            // Returns (depth below i, index after the subtree).
            match nodes[i] {
                Node::Leaf { .. } => (0, i + 1),
                Node::Split { right, .. } => {
                    let (dl, _) = walk(nodes, i + 1);
                    let (dr, end) = walk(nodes, right);
                    (1 + dl.max(dr), end)
                }
            }
        }
        walk(&self.nodes, 0).0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub hyper: ForestHyper,
    pub seed: u64,
    pub channels: Vec<String>,
    pub trees: Vec<Tree>,
}

/// Column-major feature matrix.
struct Columns {
    n: usize,
    cols: Vec<Vec<f64>>,
}

impl Columns {
    fn from_samples(samples: &[PixelSample]) -> Result<Self> {
        let p = samples.first().map_or(0, |s| s.features.len());
        let mut cols = vec![Vec::with_capacity(samples.len()); p];
        for s in samples {
            if s.features.len() != p {
                return Err(Error::DimensionMismatch {
                    expected: p,
                    found: s.features.len(),
                });
            }
            if !s.target.is_finite() || s.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::InvalidConfig("samples must be finite".into()));
            }
            for (c, &v) in cols.iter_mut().zip(&s.features) {
                c.push(v);
            }
        }
        Ok(Columns { n: samples.len(), cols })
    }
}

/// Best variance-reducing split of the samples at `idx` over `features`.
///
/// Candidates are midpoints between consecutive distinct values; `x <=
/// threshold` goes left and each side keeps at least `min_leaf` samples.
/// Decreases within `1e-12 · Var(parent)` of the maximum count as tied and
/// the tie goes to the lowest feature index, then the lowest threshold.
fn split_indices(cols: &Columns, y: &[f64], idx: &[usize], features: &[usize], min_leaf: usize) -> Option<Split> {
    let n = idx.len();
    if n < 2 * min_leaf.max(1) {
        return None;
    }
    let mean = idx.iter().map(|&i| y[i]).sum::<f64>() / n as f64;
    let sse_parent: f64 = idx.iter().map(|&i| (y[i] - mean).powi(2)).sum();
    let var_parent = sse_parent / n as f64;
    let tol = 1e-12 * var_parent;

    let mut candidates: Vec<Split> = Vec::new();
    let mut order = idx.to_vec();
    let mut feats = features.to_vec();
    feats.sort_unstable();
    feats.dedup();
    for &f in &feats {
        let col = &cols.cols[f];
        order.sort_by(|&a, &b| col[a].total_cmp(&col[b]));
        let (mut s, mut sq) = (0.0, 0.0);
        let total_s: f64 = order.iter().map(|&i| y[i] - mean).sum();
        for k in 0..n - 1 {
            let r = y[order[k]] - mean;
            s += r;
            sq += r * r;
            let nl = k + 1;
            let nr = n - nl;
            let (lo, hi) = (col[order[k]], col[order[k + 1]]);
            if nl < min_leaf || nr < min_leaf || lo == hi {
                continue;
            }
            let sse_l = sq - s * s / nl as f64;
            let sr = total_s - s;
            let sse_r = (sse_parent - sq) - sr * sr / nr as f64;
            let decrease = (sse_parent - sse_l - sse_r) / n as f64;
            let mid = lo + (hi - lo) / 2.0;
            candidates.push(Split {
                feature: f,
                threshold: if mid < hi { mid } else { lo },
                decrease,
            });
        }
    }
    let best = candidates.iter().map(|c| c.decrease).fold(f64::NEG_INFINITY, f64::max);
    if best <= tol {
        return None;
    }
    candidates.into_iter().find(|c| c.decrease >= best - tol)
}

/// Best split of all `samples` over `features`, or `None` when no candidate
/// reduces the variance.
pub fn best_split(samples: &[PixelSample], features: &[usize], min_samples_leaf: usize) -> Result<Option<Split>> {
    let cols = Columns::from_samples(samples)?;
    let p = cols.cols.len();
    if let Some(&f) = features.iter().find(|&&f| f >= p) {
        return Err(Error::DimensionMismatch { expected: p, found: f + 1 });
    }
    let y: Vec<f64> = samples.iter().map(|s| s.target).collect();
    let idx: Vec<usize> = (0..samples.len()).collect();
    Ok(split_indices(&cols, &y, &idx, features, min_samples_leaf))
}

fn leaf(y: &[f64], idx: &[usize]) -> Node {
    let sum: f64 = idx.iter().map(|&i| y[i]).sum();
    let (lo, hi) = idx.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &i| (a.min(y[i]), b.max(y[i])));
    Node::Leaf {
        value: (sum / idx.len() as f64).clamp(lo, hi),
        count: idx.len(),
    }
}

fn grow(
    cols: &Columns,
    y: &[f64],
    idx: Vec<usize>,
    depth: usize,
    hyper: &ForestHyper,
    rng: &mut ChaCha8Rng,
    nodes: &mut Vec<Node>,
) {
    let p = cols.cols.len();
    let can_split = hyper.max_depth.is_none_or(|d| depth < d) && p > 0;
    let split = if can_split {
        let mut feats = sample(rng, p, hyper.mtry(p)).into_vec();
        feats.sort_unstable();
        split_indices(cols, y, &idx, &feats, hyper.min_samples_leaf)
    } else {
        None
    };
    let Some(s) = split else {
        nodes.push(leaf(y, &idx));
        return;
    };
    let (left, right): (Vec<usize>, Vec<usize>) = idx.iter().partition(|&&i| cols.cols[s.feature][i] <= s.threshold);
    let at = nodes.len();
    nodes.push(Node::Split {
        feature: s.feature,
        threshold: s.threshold,
        right: 0,
        n_samples: idx.len(),
        decrease: s.decrease,
    });
    grow(cols, y, left, depth + 1, hyper, rng, nodes);
    let right_at = nodes.len();
    if let Node::Split { right, .. } = &mut nodes[at] {
        *right = right_at;
    }
    grow(cols, y, right, depth + 1, hyper, rng, nodes);
}

/// Fits a forest; tree `t` draws from its own stream of the seeded generator,
/// so the result does not depend on how trees are scheduled.
pub fn fit_forest(samples: &[PixelSample], hyper: &ForestHyper, seed: u64) -> Result<Forest> {
    fit_forest_named(samples, hyper, seed, Vec::new())
}

/// [`fit_forest`] recording the names of the feature channels.
pub fn fit_forest_named(samples: &[PixelSample], hyper: &ForestHyper, seed: u64, channels: Vec<String>) -> Result<Forest> {
    hyper.validate()?;
    if samples.is_empty() {
        return Err(Error::EmptyInput("no training samples"));
    }
    let cols = Columns::from_samples(samples)?;
    if !channels.is_empty() && channels.len() != cols.cols.len() {
        return Err(Error::DimensionMismatch {
            expected: cols.cols.len(),
            found: channels.len(),
        });
    }
    let y: Vec<f64> = samples.iter().map(|s| s.target).collect();
    let trees = (0..hyper.n_trees)
        .into_par_iter()
        .map(|t| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(t as u64);
            let idx: Vec<usize> = if hyper.bootstrap {
                (0..cols.n).map(|_| rng.random_range(0..cols.n)).collect()
            } else {
                (0..cols.n).collect()
            };
            let mut nodes = Vec::new();
            grow(&cols, &y, idx, 0, hyper, &mut rng, &mut nodes);
            Tree { nodes }
        })
        .collect();
    Ok(Forest {
        hyper: *hyper,
        seed,
        channels,
        trees,
    })
}

impl Forest {
    pub fn n_features(&self) -> Option<usize> {
        (!self.channels.is_empty()).then_some(self.channels.len())
    }

    /// Mean of the trees' leaf values.
    pub fn predict(&self, features: &[f64]) -> Result<f64> {
        self.check_width(features.len())?;
        Ok(self.predict_unchecked(features))
    }

    fn check_width(&self, found: usize) -> Result<()> {
        if let Some(p) = self.n_features() {
            if found != p {
                return Err(Error::DimensionMismatch { expected: p, found });
            }
        }
        let max_feature = self
            .trees
            .iter()
            .flat_map(|t| &t.nodes)
            .filter_map(|n| match n {
                Node::Split { feature, .. } => Some(*feature),
                Node::Leaf { .. } => None,
            })
            .max();
        match max_feature {
            Some(f) if f >= found => Err(Error::DimensionMismatch { expected: f + 1, found }),
            _ => Ok(()),
        }
    }

    fn predict_unchecked(&self, features: &[f64]) -> f64 {
        let (mut sum, mut lo, mut hi) = (0.0, f64::INFINITY, f64::NEG_INFINITY);
        for t in &self.trees {
            let v = t.predict(features);
            sum += v;
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (sum / self.trees.len() as f64).clamp(lo, hi)
    }

    /// Sample-weighted impurity decrease per feature, averaged over trees and
    /// normalized to sum to 1 (uniform when no tree ever split).
    pub fn feature_importance(&self, n_features: usize) -> Vec<f64> {
        let mut total = vec![0.0; n_features];
        for t in &self.trees {
            for n in &t.nodes {
                if let Node::Split {
                    feature,
                    n_samples,
                    decrease,
                    ..
                } = *n
                {
                    if feature < n_features {
                        total[feature] += n_samples as f64 * decrease / self.trees.len() as f64;
                    }
                }
            }
        }
        let sum: f64 = total.iter().sum();
        if sum > 0.0 {
            total.iter().map(|v| v / sum).collect()
        } else {
            vec![1.0 / n_features as f64; n_features]
        }
    }

    /// Predicts every cell of a stack.
    pub fn predict_field(&self, stack: &GridStack) -> Result<MaskedField> {
        if !self.channels.is_empty() && stack.channels() != self.channels {
            return Err(Error::ChannelMismatch {
                expected: self.channels.clone(),
                found: stack.channels().to_vec(),
            });
        }
        self.check_width(stack.n_channels())?;
        let (rows, cols) = stack.spec().shape();
        let values: Vec<f64> = (0..rows * cols)
            .into_par_iter()
            .map(|i| self.predict_unchecked(&stack.pixel(i / cols, i % cols)))
            .collect();
        MaskedField::dense(stack.spec().clone(), values)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_text(&text).map_err(|reason| Error::format(path, reason))
    }

    /// Line-oriented text form. Floats use Rust's shortest round-trip
    /// formatting, so reading back is exact.
    pub fn to_text(&self) -> String {
        let h = &self.hyper;
        let mut s = String::new();
        let _ = writeln!(s, "{FOREST_FORMAT}");
        let _ = writeln!(s, "seed {}", self.seed);
        let _ = writeln!(s, "n_trees {}", h.n_trees);
        let _ = writeln!(s, "max_depth {}", h.max_depth.map_or("none".into(), |d| d.to_string()));
        let _ = writeln!(s, "min_samples_leaf {}", h.min_samples_leaf);
        let _ = writeln!(s, "features_per_split {}", h.features_per_split.map_or("auto".into(), |d| d.to_string()));
        let _ = writeln!(s, "bootstrap {}", h.bootstrap);
        let _ = writeln!(s, "channels {}", self.channels.join(" "));
        for (i, t) in self.trees.iter().enumerate() {
            let _ = writeln!(s, "tree {i} {}", t.nodes.len());
            for n in &t.nodes {
                let _ = match n {
                    Node::Split {
                        feature,
                        threshold,
                        n_samples,
                        decrease,
                        ..
                    } => writeln!(s, "S {feature} {threshold:?} {n_samples} {decrease:?}"),
                    Node::Leaf { value, count } => writeln!(s, "L {value:?} {count}"),
                };
            }
        }
        s
    }

    pub fn from_text(text: &str) -> std::result::Result<Self, String> {
        let mut lines = text.lines();
        let mut next = |what: &str| lines.next().ok_or_else(|| format!("missing {what}"));
        if next("format line")? != FOREST_FORMAT {
            return Err("not a forest checkpoint".into());
        }
        fn field<'a>(line: &'a str, key: &str) -> std::result::Result<&'a str, String> {
            line.strip_prefix(key)
                .and_then(|r| r.strip_prefix(' ').or((r.is_empty()).then_some("")))
                .ok_or_else(|| format!("expected `{key}`, found `{line}`"))
        }
        fn num<T: std::str::FromStr>(s: &str) -> std::result::Result<T, String> {
            s.parse().map_err(|_| format!("bad number `{s}`"))
        }
        let seed = num(field(next("seed")?, "seed")?)?;
        let n_trees: usize = num(field(next("n_trees")?, "n_trees")?)?;
        let max_depth = match field(next("max_depth")?, "max_depth")? {
            "none" => None,
            d => Some(num(d)?),
        };
        let min_samples_leaf = num(field(next("min_samples_leaf")?, "min_samples_leaf")?)?;
        let features_per_split = match field(next("features_per_split")?, "features_per_split")? {
            "auto" => None,
            d => Some(num(d)?),
        };
        let bootstrap = num(field(next("bootstrap")?, "bootstrap")?)?;
        let channels: Vec<String> = field(next("channels")?, "channels")?.split_whitespace().map(String::from).collect();
        let mut trees = Vec::with_capacity(n_trees);
        for t in 0..n_trees {
            let head = next("tree header")?;
            let rest = field(head, "tree")?;
            let parts: Vec<&str> = rest.split_whitespace().collect();
            if parts.len() != 2 || num::<usize>(parts[0])? != t {
                return Err(format!("bad tree header `{head}`"));
            }
            let count: usize = num(parts[1])?;
            let mut raw = Vec::with_capacity(count);
            for _ in 0..count {
                raw.push(next("node")?);
            }
            trees.push(parse_tree(&raw)?);
        }
        let forest = Forest {
            hyper: ForestHyper {
                n_trees,
                max_depth,
                min_samples_leaf,
                features_per_split,
                bootstrap,
            },
            seed,
            channels,
            trees,
        };
        forest.hyper.validate().map_err(|e| e.to_string())?;
        Ok(forest)
    }
}

const FOREST_FORMAT: &str = "ozbias-forest v1";

fn parse_tree(lines: &[&str]) -> std::result::Result<Tree, String> {
    fn parse(lines: &[&str], nodes: &mut Vec<Node>) -> std::result::Result<(), String> {
        let line = *lines.get(nodes.len()).ok_or("tree ends inside a split")?;
        let p: Vec<&str> = line.split_whitespace().collect();
        let bad = || format!("bad node `{line}`");
        let f = |s: &str| s.parse::<f64>().map_err(|_| bad()).and_then(|v| if v.is_finite() { Ok(v) } else { Err(bad()) });
        let u = |s: &str| s.parse::<usize>().map_err(|_| bad());
        match p.as_slice() {
            ["L", value, count] => {
                nodes.push(Node::Leaf {
                    value: f(value)?,
                    count: u(count)?,
                });
                Ok(())
            }
            ["S", feature, threshold, n, decrease] => {
                let at = nodes.len();
                nodes.push(Node::Split {
                    feature: u(feature)?,
                    threshold: f(threshold)?,
                    right: 0,
                    n_samples: u(n)?,
                    decrease: f(decrease)?,
                });
                parse(lines, nodes)?;
                let right_at = nodes.len();
                if let Node::Split { right, .. } = &mut nodes[at] {
                    *right = right_at;
                }
                parse(lines, nodes)
            }
            _ => Err(bad()),
        }
    }
    let mut nodes = Vec::with_capacity(lines.len());
    parse(lines, &mut nodes)?;
    if nodes.len() != lines.len() {
        return Err("trailing nodes after a complete tree".into());
    }
    Ok(Tree { nodes })
}

/// Samples from every observed cell of every day.
pub fn pixel_samples(ds: &Dataset) -> Vec<PixelSample> {
    let mut out = Vec::new();
    for day in ds.days() {
        let cols = day.input.spec().cols();
        for (i, target) in day.target.valid() {
            out.push(PixelSample {
                features: day.input.pixel(i / cols, i % cols),
                target,
            });
        }
    }
    out
}

/// Fits a forest to the observed pixels of a dataset.
pub fn train_forest(ds: &Dataset, hyper: &ForestHyper, seed: u64) -> Result<Forest> {
    if ds.is_empty() {
        return Err(Error::EmptyDataset);
    }
    fit_forest_named(&pixel_samples(ds), hyper, seed, ds.channels().to_vec())
}
