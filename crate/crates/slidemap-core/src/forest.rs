//! Random forest over the 19-percentile feature vectors: axis-aligned
//! threshold splits chosen by Gini impurity on bootstrap resamples, with
//! out-of-bag accuracy. Trees are grown in parallel from pre-drawn per-tree
//! RNG streams, so a fixed (data order, seed) pair always yields the same
//! forest.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::chipping::DensityClass;
use crate::error::{Error, Result};
use crate::exec;
use crate::features::{FeatureVector, N_PERCENTILES};
use crate::raster::write_atomic;

pub const N_CLASSES: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForestConfig {
    pub n_trees: usize,
    /// `None` grows trees until pure (unlimited depth).
    pub max_depth: Option<usize>,
    pub min_leaf: usize,
    pub mtry: usize,
    /// Resample each class equally in the bootstrap (off by default).
    pub balanced: bool,
    pub seed: u64,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 200,
            max_depth: None,
            min_leaf: 1,
            mtry: (N_PERCENTILES as f64).sqrt().ceil() as usize, // 5
            balanced: false,
            seed: 0,
        }
    }
}

impl ForestConfig {
    fn validate(&self) -> Result<()> {
        if self.n_trees == 0 {
            return Err(Error::Forest("n_trees must be at least 1".into()));
        }
        if !(1..=N_PERCENTILES).contains(&self.mtry) {
            return Err(Error::Forest(format!("mtry must be in 1..={N_PERCENTILES}, got {}", self.mtry)));
        }
        if self.min_leaf == 0 {
            return Err(Error::Forest("min_leaf must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Node {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        counts: [usize; N_CLASSES],
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    fn leaf_counts(&self, x: &FeatureVector) -> &[usize; N_CLASSES] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Leaf { counts } => return counts,
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x.values[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }

    fn proba(&self, x: &FeatureVector) -> [f64; N_CLASSES] {
        let counts = self.leaf_counts(x);
        let total: usize = counts.iter().sum();
        let mut p = [0.0; N_CLASSES];
        for k in 0..N_CLASSES {
            p[k] = counts[k] as f64 / total as f64;
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Forest {
    pub config: ForestConfig,
    pub trees: Vec<Tree>,
    pub oob_score: f64,
}

fn gini(counts: &[usize; N_CLASSES]) -> f64 {
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let t = total as f64;
    1.0 - counts.iter().map(|&c| (c as f64 / t).powi(2)).sum::<f64>()
}

struct TreeBuilder<'a> {
    features: &'a [FeatureVector],
    classes: &'a [usize],
    config: &'a ForestConfig,
    nodes: Vec<Node>,
}

impl TreeBuilder<'_> {
    fn counts_of(&self, indices: &[usize]) -> [usize; N_CLASSES] {
        let mut counts = [0usize; N_CLASSES];
        for &i in indices {
            counts[self.classes[i]] += 1;
        }
        counts
    }

    /// Best (threshold, weighted child impurity) for one feature, or None
    /// when all values coincide.
    fn best_split_on(&self, indices: &[usize], feature: usize) -> Option<(f64, f64)> {
        let mut vals: Vec<(f64, usize)> = indices.iter().map(|&i| (self.features[i].values[feature], self.classes[i])).collect();
        vals.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite features"));
        let n = vals.len();
        let mut left = [0usize; N_CLASSES];
        let mut right = self.counts_of(indices);
        let mut best: Option<(f64, f64)> = None;
        for i in 0..n - 1 {
            left[vals[i].1] += 1;
            right[vals[i].1] -= 1;
            if vals[i].0 == vals[i + 1].0 {
                continue;
            }
            let nl = i + 1;
            let nr = n - nl;
            if nl < self.config.min_leaf || nr < self.config.min_leaf {
                continue;
            }
            let score = (nl as f64 * gini(&left) + nr as f64 * gini(&right)) / n as f64;
            let threshold = (vals[i].0 + vals[i + 1].0) / 2.0;
            match best {
                Some((_, s)) if s <= score => {}
                _ => best = Some((threshold, score)),
            }
        }
        best
    }

    fn build(&mut self, indices: Vec<usize>, depth: usize, rng: &mut ChaCha8Rng) -> usize {
        let counts = self.counts_of(&indices);
        let n_here: usize = counts.iter().sum();
        let pure = counts.iter().filter(|&&c| c > 0).count() <= 1;
        let depth_out = self.config.max_depth.map_or(false, |d| depth >= d);
        if pure || depth_out || n_here < 2 * self.config.min_leaf {
            self.nodes.push(Node::Leaf { counts });
            return self.nodes.len() - 1;
        }

        // mtry features drawn without replacement, order fixed by the rng
        let mut candidates: Vec<usize> = (0..N_PERCENTILES).collect();
        candidates.shuffle(rng);
        candidates.truncate(self.config.mtry);

        let mut best: Option<(usize, f64, f64)> = None;
        for &f in &candidates {
            if let Some((threshold, score)) = self.best_split_on(&indices, f) {
                match best {
                    Some((_, _, s)) if s <= score => {}
                    _ => best = Some((f, threshold, score)),
                }
            }
        }
        let Some((feature, threshold, _)) = best else {
            self.nodes.push(Node::Leaf { counts });
            return self.nodes.len() - 1;
        };

        let (left_idx, right_idx): (Vec<usize>, Vec<usize>) =
            indices.into_iter().partition(|&i| self.features[i].values[feature] <= threshold);
        let placeholder = self.nodes.len();
        self.nodes.push(Node::Leaf { counts }); // patched below
        let left = self.build(left_idx, depth + 1, rng);
        let right = self.build(right_idx, depth + 1, rng);
        self.nodes[placeholder] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        placeholder
    }
}

fn bootstrap_indices(n: usize, classes: &[usize], config: &ForestConfig, rng: &mut ChaCha8Rng) -> Vec<usize> {
    if !config.balanced {
        return (0..n).map(|_| rng.gen_range(0..n)).collect();
    }
    // equal draws per present class, n total
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); N_CLASSES];
    for (i, &c) in classes.iter().enumerate() {
        by_class[c].push(i);
    }
    let present: Vec<&Vec<usize>> = by_class.iter().filter(|v| !v.is_empty()).collect();
    let per = n / present.len();
    let mut out = Vec::with_capacity(n);
    for pool in &present {
        for _ in 0..per {
            out.push(pool[rng.gen_range(0..pool.len())]);
        }
    }
    while out.len() < n {
        out.push(rng.gen_range(0..n));
    }
    out
}

/// Fit a forest. Deterministic per (input order, seed).
pub fn forest_fit(features: &[FeatureVector], classes: &[DensityClass], config: ForestConfig) -> Result<Forest> {
    config.validate()?;
    if features.is_empty() {
        return Err(Error::Forest("empty training set".into()));
    }
    if features.len() != classes.len() {
        return Err(Error::Forest(format!(
            "{} feature vectors but {} classes",
            features.len(),
            classes.len()
        )));
    }
    let class_idx: Vec<usize> = classes.iter().map(|c| c.index()).collect();
    let distinct = {
        let mut seen = [false; N_CLASSES];
        class_idx.iter().for_each(|&c| seen[c] = true);
        seen.iter().filter(|&&s| s).count()
    };
    if distinct < 2 {
        return Err(Error::Forest("training set holds a single class".into()));
    }

    let n = features.len();
    let built = exec::map_indexed(config.n_trees, |t| {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(t as u64 + 1);
        let indices = bootstrap_indices(n, &class_idx, &config, &mut rng);
        let mut in_bag = vec![false; n];
        for &i in &indices {
            in_bag[i] = true;
        }
        let mut builder = TreeBuilder {
            features,
            classes: &class_idx,
            config: &config,
            nodes: Vec::new(),
        };
        builder.build(indices, 0, &mut rng);
        (Tree { nodes: builder.nodes }, in_bag)
    });

    // out-of-bag accuracy, votes accumulated in tree order
    let mut oob_proba = vec![[0.0f64; N_CLASSES]; n];
    let mut oob_votes = vec![0usize; n];
    for (tree, in_bag) in &built {
        for i in 0..n {
            if !in_bag[i] {
                let p = tree.proba(&features[i]);
                for k in 0..N_CLASSES {
                    oob_proba[i][k] += p[k];
                }
                oob_votes[i] += 1;
            }
        }
    }
    let mut hits = 0usize;
    let mut counted = 0usize;
    for i in 0..n {
        if oob_votes[i] == 0 {
            continue;
        }
        counted += 1;
        if argmax_low_tie(&oob_proba[i]) == class_idx[i] {
            hits += 1;
        }
    }
    let oob_score = if counted > 0 { hits as f64 / counted as f64 } else { 0.0 };

    Ok(Forest {
        config,
        trees: built.into_iter().map(|(t, _)| t).collect(),
        oob_score,
    })
}

fn argmax_low_tie(p: &[f64; N_CLASSES]) -> usize {
    let mut best = 0;
    for k in 1..N_CLASSES {
        if p[k] > p[best] {
            best = k;
        }
    }
    best
}

/// Mean over trees of leaf class-count proportions; sums to 1.
pub fn forest_predict_proba(forest: &Forest, feature: &FeatureVector) -> [f64; N_CLASSES] {
    let mut acc = [0.0; N_CLASSES];
    for tree in &forest.trees {
        let p = tree.proba(feature);
        for k in 0..N_CLASSES {
            acc[k] += p[k];
        }
    }
    let n = forest.trees.len() as f64;
    acc.iter_mut().for_each(|v| *v /= n);
    acc
}

/// Argmax of [`forest_predict_proba`]; ties break toward the lower class.
pub fn forest_predict(forest: &Forest, feature: &FeatureVector) -> DensityClass {
    let p = forest_predict_proba(forest, feature);
    DensityClass::from_index(argmax_low_tie(&p)).expect("index in range")
}

// ---------------------------------------------------------------------------
// serialization: config header, then one line per node per tree

pub fn save_forest(forest: &Forest, path: &Path) -> Result<()> {
    let mut out = String::new();
    let c = &forest.config;
    out.push_str(&format!("n_trees = {}\n", c.n_trees));
    out.push_str(&format!(
        "max_depth = {}\n",
        c.max_depth.map_or("none".to_string(), |d| d.to_string())
    ));
    out.push_str(&format!("min_leaf = {}\n", c.min_leaf));
    out.push_str(&format!("mtry = {}\n", c.mtry));
    out.push_str(&format!("balanced = {}\n", c.balanced));
    out.push_str(&format!("seed = {}\n", c.seed));
    out.push_str(&format!("oob_score = {}\n", forest.oob_score));
    for (t, tree) in forest.trees.iter().enumerate() {
        out.push_str(&format!("tree {t} {}\n", tree.nodes.len()));
        for node in &tree.nodes {
            match node {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => out.push_str(&format!("S {feature} {threshold} {left} {right}\n")),
                Node::Leaf { counts } => out.push_str(&format!("L {} {} {}\n", counts[0], counts[1], counts[2])),
            }
        }
    }
    write_atomic(path, out.as_bytes())
}

pub fn load_forest(path: &Path) -> Result<Forest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Forest(format!("{}: {msg}", path.display()));
    let mut lines = text.lines();
    let mut header = std::collections::HashMap::new();
    let mut first_tree_line: Option<&str> = None;
    for line in lines.by_ref() {
        if line.starts_with("tree ") {
            first_tree_line = Some(line);
            break;
        }
        if let Some((k, v)) = line.split_once('=') {
            header.insert(k.trim().to_string(), v.trim().to_string());
        }
    }
    let get = |k: &str| header.get(k).cloned().ok_or_else(|| bad(&format!("missing `{k}`")));
    let config = ForestConfig {
        n_trees: get("n_trees")?.parse().map_err(|e| bad(&format!("n_trees: {e}")))?,
        max_depth: match get("max_depth")?.as_str() {
            "none" => None,
            s => Some(s.parse().map_err(|e| bad(&format!("max_depth: {e}")))?),
        },
        min_leaf: get("min_leaf")?.parse().map_err(|e| bad(&format!("min_leaf: {e}")))?,
        mtry: get("mtry")?.parse().map_err(|e| bad(&format!("mtry: {e}")))?,
        balanced: get("balanced")? == "true",
        seed: get("seed")?.parse().map_err(|e| bad(&format!("seed: {e}")))?,
    };
    let oob_score: f64 = get("oob_score")?.parse().map_err(|e| bad(&format!("oob_score: {e}")))?;

    let mut trees = Vec::with_capacity(config.n_trees);
    let mut tree_line = first_tree_line;
    while let Some(line) = tree_line {
        let n_nodes: usize = line
            .split_whitespace()
            .nth(2)
            .ok_or_else(|| bad("malformed tree line"))?
            .parse()
            .map_err(|e| bad(&format!("tree size: {e}")))?;
        let mut nodes = Vec::with_capacity(n_nodes);
        for _ in 0..n_nodes {
            let node_line = lines.next().ok_or_else(|| bad("truncated tree"))?;
            let parts: Vec<&str> = node_line.split_whitespace().collect();
            let node = match parts.first() {
                Some(&"S") if parts.len() == 5 => Node::Split {
                    feature: parts[1].parse().map_err(|e| bad(&format!("{e}")))?,
                    threshold: parts[2].parse().map_err(|e| bad(&format!("{e}")))?,
                    left: parts[3].parse().map_err(|e| bad(&format!("{e}")))?,
                    right: parts[4].parse().map_err(|e| bad(&format!("{e}")))?,
                },
                Some(&"L") if parts.len() == 4 => Node::Leaf {
                    counts: [
                        parts[1].parse().map_err(|e| bad(&format!("{e}")))?,
                        parts[2].parse().map_err(|e| bad(&format!("{e}")))?,
                        parts[3].parse().map_err(|e| bad(&format!("{e}")))?,
                    ],
                },
                _ => return Err(bad(&format!("malformed node line `{node_line}`"))),
            };
            nodes.push(node);
        }
        trees.push(Tree { nodes });
        tree_line = lines.next();
    }
    if trees.len() != config.n_trees {
        return Err(bad(&format!("expected {} trees, found {}", config.n_trees, trees.len())));
    }
    Ok(Forest {
        config,
        trees,
        oob_score,
    })
}

/// Axis-separable 3-class blobs used by tests and the acceptance suite.
pub fn synthetic_blobs(n: usize, seed: u64) -> (Vec<FeatureVector>, Vec<DensityClass>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut features = Vec::with_capacity(n);
    let mut classes = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % N_CLASSES;
        let mut values = [0.0; N_PERCENTILES];
        for v in values.iter_mut() {
            *v = class as f64 * 0.3 + rng.gen_range(-0.05..0.05);
        }
        features.push(FeatureVector { values });
        classes.push(DensityClass::from_index(class).expect("in range"));
    }
    (features, classes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fv(first: f64) -> FeatureVector {
        let mut values = [0.0; N_PERCENTILES];
        values[0] = first;
        FeatureVector { values }
    }

    #[test]
    fn trivially_separable_two_class() {
        let features = vec![fv(0.0), fv(1.0)];
        let classes = vec![DensityClass::Zero, DensityClass::Low];
        let forest = forest_fit(
            &features,
            &classes,
            ForestConfig {
                n_trees: 25,
                mtry: N_PERCENTILES,
                ..ForestConfig::default()
            },
        )
        .unwrap();
        assert_eq!(forest_predict(&forest, &fv(0.0)), DensityClass::Zero);
        assert_eq!(forest_predict(&forest, &fv(1.0)), DensityClass::Low);
    }

    #[test]
    fn blobs_oob_accuracy() {
        let (features, classes) = synthetic_blobs(300, 17);
        let forest = forest_fit(&features, &classes, ForestConfig::default()).unwrap();
        assert!(forest.oob_score >= 0.95, "oob {}", forest.oob_score);
    }

    #[test]
    fn same_seed_same_forest() {
        let (features, classes) = synthetic_blobs(120, 3);
        let cfg = ForestConfig {
            n_trees: 30,
            ..ForestConfig::default()
        };
        let a = forest_fit(&features, &classes, cfg).unwrap();
        let b = forest_fit(&features, &classes, cfg).unwrap();
        assert_eq!(a, b);
        let c = forest_fit(
            &features,
            &classes,
            ForestConfig {
                seed: 1,
                ..cfg
            },
        )
        .unwrap();
        assert_ne!(a.trees, c.trees);
    }

    #[test]
    fn single_class_and_empty_inputs_rejected() {
        let features = vec![fv(0.0), fv(1.0)];
        let classes = vec![DensityClass::Zero, DensityClass::Zero];
        assert!(matches!(
            forest_fit(&features, &classes, ForestConfig::default()),
            Err(Error::Forest(_))
        ));
        assert!(matches!(forest_fit(&[], &[], ForestConfig::default()), Err(Error::Forest(_))));
    }

    #[test]
    fn pure_leaf_probability() {
        let tree = Tree {
            nodes: vec![Node::Leaf { counts: [0, 0, 7] }],
        };
        let forest = Forest {
            config: ForestConfig {
                n_trees: 1,
                ..ForestConfig::default()
            },
            trees: vec![tree],
            oob_score: 0.0,
        };
        assert_eq!(forest_predict_proba(&forest, &fv(0.5)), [0.0, 0.0, 1.0]);
    }

    #[test]
    fn two_tree_vote_averaging_and_tie_break() {
        let leaf = |counts| Tree {
            nodes: vec![Node::Leaf { counts }],
        };
        let forest = Forest {
            config: ForestConfig {
                n_trees: 2,
                ..ForestConfig::default()
            },
            trees: vec![leaf([4, 0, 0]), leaf([0, 4, 0])],
            oob_score: 0.0,
        };
        let p = forest_predict_proba(&forest, &fv(0.0));
        assert_eq!(p, [0.5, 0.5, 0.0]);
        // tie toward the lower class index
        assert_eq!(forest_predict(&forest, &fv(0.0)), DensityClass::Zero);
    }

    #[test]
    fn proba_on_simplex_and_argmax_consistent() {
        let (features, classes) = synthetic_blobs(90, 8);
        let forest = forest_fit(
            &features,
            &classes,
            ForestConfig {
                n_trees: 40,
                ..ForestConfig::default()
            },
        )
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..100 {
            let mut values = [0.0; N_PERCENTILES];
            values.iter_mut().for_each(|v| *v = rng.gen_range(-0.2..0.9));
            let x = FeatureVector { values };
            let p = forest_predict_proba(&forest, &x);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&v| v >= 0.0));
            assert_eq!(forest_predict(&forest, &x).index(), argmax_low_tie(&p));
        }
    }

    #[test]
    fn forest_file_round_trip() {
        let (features, classes) = synthetic_blobs(60, 21);
        let forest = forest_fit(
            &features,
            &classes,
            ForestConfig {
                n_trees: 12,
                max_depth: Some(6),
                ..ForestConfig::default()
            },
        )
        .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.forest");
        save_forest(&forest, &path).unwrap();
        let back = load_forest(&path).unwrap();
        assert_eq!(back, forest);
    }

    #[test]
    fn balanced_bootstrap_still_deterministic() {
        let (features, classes) = synthetic_blobs(90, 2);
        let cfg = ForestConfig {
            n_trees: 10,
            balanced: true,
            ..ForestConfig::default()
        };
        let a = forest_fit(&features, &classes, cfg).unwrap();
        let b = forest_fit(&features, &classes, cfg).unwrap();
        assert_eq!(a, b);
    }
}
