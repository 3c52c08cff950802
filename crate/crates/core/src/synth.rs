//! Seeded synthetic databanks for smoke tests and desk-scale evaluation.
//!
//! Samples are drawn from well-separated Gaussian clusters. A stand-in tree
//! ensemble assigns leaves: every "tree" is a stack of random hyperplanes,
//! and the leaf is the pattern of sides a point falls on. Odd clusters are
//! malicious and carry a per-cluster family tag; even clusters are benign
//! and mostly untagged.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use sha2::Digest as _;

use crate::model::{
    Label, LeafMatrix, SampleMeta, ScoredTagList, Sha256, Subset, Tag, TagKind, YearMonth,
};

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub n_clusters: usize,
    pub dim: usize,
    pub n_trees: usize,
    /// Hyperplanes per tree; each tree has `2^depth` leaves.
    pub depth: u32,
    /// Cluster centres are uniform in `[-separation, separation]^dim`.
    pub separation: f64,
    pub spread: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            n_samples: 5000,
            n_clusters: 10,
            dim: 16,
            n_trees: 64,
            depth: 4,
            separation: 10.0,
            spread: 1.0,
            seed: 0,
        }
    }
}

/// Points grouped in Gaussian clusters, with their cluster ids.
pub fn gaussian_clusters(cfg: &SynthConfig, rng: &mut impl Rng) -> (Vec<Vec<f64>>, Vec<usize>) {
    let centres: Vec<Vec<f64>> = (0..cfg.n_clusters)
        .map(|_| {
            (0..cfg.dim)
                .map(|_| rng.random_range(-cfg.separation..=cfg.separation))
                .collect()
        })
        .collect();
    let mut points = Vec::with_capacity(cfg.n_samples);
    let mut clusters = Vec::with_capacity(cfg.n_samples);
    for _ in 0..cfg.n_samples {
        let c = rng.random_range(0..cfg.n_clusters);
        let p = centres[c]
            .iter()
            .map(|&m| {
                let z: f64 = rng.sample(StandardNormal);
                m + cfg.spread * z
            })
            .collect();
        points.push(p);
        clusters.push(c);
    }
    (points, clusters)
}

#[derive(Debug, Clone)]
struct Split {
    normal: Vec<f64>,
    threshold: f64,
}

/// Ensemble of random-hyperplane trees standing in for a trained model.
#[derive(Debug, Clone)]
pub struct HyperplaneForest {
    trees: Vec<Vec<Split>>,
    depth: u32,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl HyperplaneForest {
    /// Draws random directions; thresholds pass through random data points.
    pub fn fit(points: &[Vec<f64>], n_trees: usize, depth: u32, rng: &mut impl Rng) -> Self {
        let dim = points.first().map_or(0, Vec::len);
        let trees = (0..n_trees)
            .map(|_| {
                (0..depth)
                    .map(|_| {
                        let mut normal: Vec<f64> =
                            (0..dim).map(|_| rng.sample(StandardNormal)).collect();
                        let norm = dot(&normal, &normal).sqrt().max(f64::MIN_POSITIVE);
                        normal.iter_mut().for_each(|v| *v /= norm);
                        let anchor = &points[rng.random_range(0..points.len())];
                        let threshold = dot(&normal, anchor);
                        Split { normal, threshold }
                    })
                    .collect()
            })
            .collect();
        HyperplaneForest { trees, depth }
    }

    pub fn n_trees(&self) -> usize {
        self.trees.len()
    }

    /// Leaf index per tree, numbered like heap-ordered tree nodes.
    pub fn leaves(&self, point: &[f64]) -> Vec<u32> {
        let first_leaf = (1u32 << self.depth) - 1;
        self.trees
            .iter()
            .map(|splits| {
                let bits = splits.iter().fold(0u32, |acc, s| {
                    (acc << 1) | u32::from(dot(&s.normal, point) > s.threshold)
                });
                first_leaf + bits
            })
            .collect()
    }

    pub fn leaf_matrix(&self, points: &[Vec<f64>]) -> LeafMatrix {
        let data: Vec<u32> = points.iter().flat_map(|p| self.leaves(p)).collect();
        LeafMatrix::new(points.len(), self.n_trees(), data).expect("non-empty synthetic matrix")
    }
}

/// A complete synthetic databank in the toolkit's input formats.
#[derive(Debug, Clone)]
pub struct SyntheticBank {
    pub clusters: Vec<usize>,
    pub leaves: LeafMatrix,
    pub metas: Vec<SampleMeta>,
    pub tags: BTreeMap<Sha256, ScoredTagList>,
}

pub fn synthetic_sha(seed: u64, i: usize) -> Sha256 {
    let digest = sha2::Sha256::digest(format!("leafsim-synthetic-{seed}-{i}").as_bytes());
    Sha256::parse(&hex::encode(digest)).expect("hex digest")
}

fn cluster_label(c: usize) -> Label {
    if c % 2 == 1 {
        Label::Malicious
    } else {
        Label::Benign
    }
}

fn tag(kind: TagKind, name: &str) -> Tag {
    Tag::new(kind, name).expect("synthetic tag names are valid")
}

/// Generates clusters, leaves, metadata and AVClass-style tags.
///
/// Rows cycle through train, train, train, test, unlabeled so every subset
/// draws from every cluster.
pub fn generate(cfg: &SynthConfig) -> SyntheticBank {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (points, clusters) = gaussian_clusters(cfg, &mut rng);
    let forest = HyperplaneForest::fit(&points, cfg.n_trees, cfg.depth, &mut rng);
    let leaves = forest.leaf_matrix(&points);

    let mut metas = Vec::with_capacity(cfg.n_samples);
    let mut tags = BTreeMap::new();
    for (i, &c) in clusters.iter().enumerate() {
        let sha = synthetic_sha(cfg.seed, i);
        let (subset, month) = match i % 5 {
            0..=2 => (Subset::Train, rng.random_range(1..=10)),
            3 => (Subset::Test, rng.random_range(11..=12)),
            _ => (Subset::Unlabeled, rng.random_range(1..=12)),
        };
        let label = if subset == Subset::Unlabeled {
            Label::Unlabeled
        } else {
            cluster_label(c)
        };
        let appeared = Some(YearMonth { year: 2018, month });
        metas.push(
            SampleMeta::new(i, sha.clone(), label, subset, appeared).expect("consistent meta"),
        );

        let list = if cluster_label(c) == Label::Malicious {
            let mut t = vec![
                (
                    tag(TagKind::Fam, &format!("fam{c}")),
                    rng.random_range(4..=12),
                ),
                (
                    tag(TagKind::Class, &format!("class{}", c % 3)),
                    rng.random_range(2..=8),
                ),
                (tag(TagKind::File, "os:windows"), rng.random_range(5..=15)),
            ];
            if rng.random_bool(0.5) {
                t.push((
                    tag(TagKind::Fam, &format!("alias{c}")),
                    rng.random_range(1..=3),
                ));
            }
            if rng.random_bool(0.3) {
                t.push((tag(TagKind::Beh, "inject"), rng.random_range(1..=4)));
            }
            t.shuffle(&mut rng);
            let detections = rng.random_range(10..=60);
            ScoredTagList::new(t, Some(detections)).expect("distinct synthetic tags")
        } else if rng.random_bool(0.05) {
            ScoredTagList::new(vec![(tag(TagKind::Class, "grayware"), 1)], Some(1))
                .expect("one tag")
        } else {
            ScoredTagList::empty()
        };
        tags.insert(sha, list);
    }

    SyntheticBank {
        clusters,
        leaves,
        metas,
        tags,
    }
}

/// Uniform random leaf matrix with indices in `0..max_leaf`.
pub fn uniform_leaves(
    n_samples: usize,
    n_trees: usize,
    max_leaf: u32,
    rng: &mut impl Rng,
) -> LeafMatrix {
    let data = (0..n_samples * n_trees)
        .map(|_| rng.random_range(0..max_leaf))
        .collect();
    LeafMatrix::new(n_samples, n_trees, data).expect("non-empty matrix")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_seeded() {
        let cfg = SynthConfig {
            n_samples: 50,
            n_trees: 8,
            seed: 3,
            ..SynthConfig::default()
        };
        let a = generate(&cfg);
        let b = generate(&cfg);
        assert_eq!(a.leaves, b.leaves);
        assert_eq!(a.metas, b.metas);
        assert_eq!(a.tags, b.tags);
        let c = generate(&SynthConfig { seed: 4, ..cfg });
        assert_ne!(a.leaves, c.leaves);
    }

    #[test]
    fn leaves_are_in_range() {
        let cfg = SynthConfig {
            n_samples: 100,
            n_trees: 16,
            depth: 3,
            ..SynthConfig::default()
        };
        let bank = generate(&cfg);
        assert_eq!(bank.leaves.n_trees(), 16);
        for row in bank.leaves.rows() {
            assert!(row.iter().all(|v| (7..15).contains(&v)));
        }
    }

    #[test]
    fn identical_points_share_all_leaves() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = vec![vec![0.5, -1.0], vec![3.0, 2.0]];
        let forest = HyperplaneForest::fit(&pts, 10, 4, &mut rng);
        assert_eq!(forest.leaves(&pts[0]), forest.leaves(&[0.5, -1.0]));
    }

    #[test]
    fn malicious_samples_are_tagged() {
        let bank = generate(&SynthConfig {
            n_samples: 200,
            n_trees: 4,
            ..SynthConfig::default()
        });
        for (m, c) in bank.metas.iter().zip(&bank.clusters) {
            let list = &bank.tags[&m.sha256];
            if c % 2 == 1 {
                assert!(list.contains(&Tag::new(TagKind::Fam, &format!("fam{c}")).unwrap()));
            }
        }
    }
}
