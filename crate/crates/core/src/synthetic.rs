//! Clustered synthetic captions, token features and image features with a
//! known ground truth, for exercising the matcher end to end.
//!
//! Every word and every image belongs to one of `clusters` groups. A caption
//! describes one image using words of that image's cluster. Token and image
//! features live in different spaces, so the heads must learn the mapping.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::corpus::{CaptionPair, Corpus, CorpusError};
use crate::features::{FeatureMatrix, FeatureRole};
use crate::index::VokenAssignment;
use crate::tokenizer::TokenizerRegistry;

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub clusters: usize,
    pub words_per_cluster: usize,
    pub images: usize,
    pub train_captions: usize,
    pub eval_captions: usize,
    pub tokens_per_caption: usize,
    pub token_dim: usize,
    pub image_dim: usize,
    /// Standard deviation of per-coordinate noise; centroids have unit-variance coordinates.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            clusters: 8,
            words_per_cluster: 6,
            images: 512,
            train_captions: 400,
            eval_captions: 100,
            tokens_per_caption: 5,
            token_dim: 32,
            image_dim: 48,
            noise: 0.5,
            seed: 0,
        }
    }
}

/// One split of captions with aligned features and labels.
#[derive(Debug, Clone)]
pub struct SyntheticSplit {
    pub captions: Corpus,
    pub pairs: Vec<CaptionPair>,
    /// One row per token in corpus order.
    pub token_feats: FeatureMatrix,
    /// Cluster of every token in corpus order.
    pub token_clusters: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct SyntheticData {
    pub train: SyntheticSplit,
    pub eval: SyntheticSplit,
    pub image_feats: FeatureMatrix,
    pub image_clusters: Vec<usize>,
}

impl SyntheticData {
    pub fn image_ids(&self) -> Vec<String> {
        (0..self.image_feats.rows())
            .map(|i| format!("img{i:05}"))
            .collect()
    }
}

fn gaussian_vec<R: Rng>(rng: &mut R, dim: usize, sd: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, sd).expect("finite standard deviation");
    (0..dim).map(|_| normal.sample(rng)).collect()
}

fn word(cluster: usize, j: usize) -> String {
    format!("w{cluster}x{j}")
}

struct Spaces {
    token_centroids: Vec<Vec<f64>>,
    word_offsets: Vec<Vec<Vec<f64>>>,
}

fn make_split<R: Rng>(
    name: &str,
    n: usize,
    config: &SyntheticConfig,
    spaces: &Spaces,
    image_clusters: &[usize],
    rng: &mut R,
) -> Result<SyntheticSplit, CorpusError> {
    let noise = Normal::new(0.0, config.noise).expect("finite noise");
    let mut text = String::new();
    let mut pairs = Vec::with_capacity(n);
    let mut rows = Vec::with_capacity(n * config.tokens_per_caption);
    let mut token_clusters = Vec::with_capacity(rows.capacity());
    for s in 0..n {
        let image_id = rng.gen_range(0..image_clusters.len());
        let c = image_clusters[image_id];
        // A shared sentence context makes features depend on more than the word.
        let context = gaussian_vec(rng, config.token_dim, config.noise);
        let mut words = Vec::with_capacity(config.tokens_per_caption);
        for _ in 0..config.tokens_per_caption {
            let j = rng.gen_range(0..config.words_per_cluster);
            words.push(word(c, j));
            let row: Vec<f64> = (0..config.token_dim)
                .map(|d| {
                    spaces.token_centroids[c][d]
                        + spaces.word_offsets[c][j][d]
                        + context[d]
                        + noise.sample(rng)
                })
                .collect();
            rows.push(row);
            token_clusters.push(c);
        }
        text.push_str(&words.join(" "));
        text.push('\n');
        pairs.push(CaptionPair {
            sentence_id: s as u64,
            image_id,
        });
    }
    let registry = TokenizerRegistry::with_defaults();
    let captions = Corpus::from_text(name, &text, "whitespace", &registry)?;
    let token_feats = FeatureMatrix::from_rows_f64(&rows, FeatureRole::TokenHidden)
        .expect("finite synthetic rows");
    Ok(SyntheticSplit {
        captions,
        pairs,
        token_feats,
        token_clusters,
    })
}

pub fn generate(config: &SyntheticConfig) -> Result<SyntheticData, CorpusError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let spaces = Spaces {
        token_centroids: (0..config.clusters)
            .map(|_| gaussian_vec(&mut rng, config.token_dim, 1.0))
            .collect(),
        word_offsets: (0..config.clusters)
            .map(|_| {
                (0..config.words_per_cluster)
                    .map(|_| gaussian_vec(&mut rng, config.token_dim, 0.3))
                    .collect()
            })
            .collect(),
    };
    let image_centroids: Vec<Vec<f64>> = (0..config.clusters)
        .map(|_| gaussian_vec(&mut rng, config.image_dim, 1.0))
        .collect();
    let image_clusters: Vec<usize> = (0..config.images).map(|i| i % config.clusters).collect();
    let image_rows: Vec<Vec<f64>> = image_clusters
        .iter()
        .map(|&c| {
            let n = gaussian_vec(&mut rng, config.image_dim, config.noise);
            image_centroids[c]
                .iter()
                .zip(n)
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect();
    let image_feats = FeatureMatrix::from_rows_f64(&image_rows, FeatureRole::ImageEmbedding)
        .expect("finite synthetic rows");

    let train = make_split(
        "synthetic-train",
        config.train_captions,
        config,
        &spaces,
        &image_clusters,
        &mut rng,
    )?;
    let eval = make_split(
        "synthetic-eval",
        config.eval_captions,
        config,
        &spaces,
        &image_clusters,
        &mut rng,
    )?;
    Ok(SyntheticData {
        train,
        eval,
        image_feats,
        image_clusters,
    })
}

/// Share of tokens whose retrieved image is in the token's cluster.
pub fn precision_at_1(
    assignments: &[VokenAssignment],
    token_clusters: &[usize],
    image_clusters: &[usize],
) -> f64 {
    let mut hits = 0usize;
    let mut total = 0usize;
    let ids = assignments.iter().flat_map(|a| a.voken_ids.iter());
    for (&voken, &cluster) in ids.zip(token_clusters) {
        total += 1;
        if voken >= 0 && image_clusters.get(voken as usize) == Some(&cluster) {
            hits += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        hits as f64 / total as f64
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic_and_aligned() {
        let config = SyntheticConfig {
            images: 16,
            train_captions: 10,
            eval_captions: 4,
            ..SyntheticConfig::default()
        };
        let a = generate(&config).unwrap();
        let b = generate(&config).unwrap();
        assert_eq!(a.image_feats, b.image_feats);
        assert_eq!(a.train.token_feats, b.train.token_feats);
        assert_eq!(a.train.captions.token_count(), 50);
        assert_eq!(a.train.token_feats.rows(), 50);
        assert_eq!(a.train.token_clusters.len(), 50);
        assert_eq!(a.eval.pairs.len(), 4);
        for (pair, s) in a.train.pairs.iter().zip(&a.train.captions.sentences) {
            let c = a.image_clusters[pair.image_id];
            assert!(s
                .tokens
                .iter()
                .all(|t| t.text.starts_with(&format!("w{c}x"))));
        }
    }

    #[test]
    fn precision_counts_cluster_hits() {
        let a = [VokenAssignment {
            sentence_id: 0,
            voken_ids: vec![0, 1, 2, -1],
            scores: vec![0.0; 4],
        }];
        assert_eq!(precision_at_1(&a, &[0, 0, 0, 0], &[0, 1, 0]), 0.5);
    }
}
