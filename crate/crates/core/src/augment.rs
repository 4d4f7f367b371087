//! The two text-augmentation mechanisms: a per-username history
//! dictionary queried at prediction time, and KMeans cluster retrieval
//! of cosine-similar training tweets injected at training time.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Corpus;
use crate::embed::{cosine_similarity, sentence_embedding, EmbeddingTable};
use crate::error::Error;
use crate::geo::GeoPoint;
use crate::textprep::{encode_words, normalize, NormalizeOpts, Vocab};
use crate::Result;

/// One historical post in a user's timeline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryItem {
    pub tweet_id: String,
    pub created_at: i64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub location: Option<GeoPoint>,
    pub tokens: Vec<String>,
}

/// Per-username history, built strictly from the training split and
/// sorted by time.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct UserDict {
    entries: BTreeMap<String, Vec<HistoryItem>>,
}

impl UserDict {
    pub fn get(&self, username: &str) -> Option<&[HistoryItem]> {
        self.entries.get(username).map(|v| v.as_slice())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// All tweet ids referenced by the dictionary.
    pub fn tweet_ids(&self) -> impl Iterator<Item = &str> {
        self.entries
            .values()
            .flatten()
            .map(|h| h.tweet_id.as_str())
    }
}

/// Hyperparameters of both augmentation mechanisms.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Symmetric history window around the query tweet's timestamp.
    pub time_window_hours: f64,
    /// Tokens taken from the front of each kept history tweet.
    pub k_tokens: usize,
    /// Fraction of the eligible history actually used, in [0,1].
    pub sample_frac: f64,
    pub num_clusters: usize,
    /// Similar tweets injected per training example.
    pub nc_samples: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            time_window_hours: 72.0,
            k_tokens: 16,
            sample_frac: 1.0,
            num_clusters: 4,
            nc_samples: 20,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.time_window_hours < 0.0 {
            return Err(Error::config("time_window_hours must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.sample_frac) {
            return Err(Error::config("sample_frac must be in [0,1]"));
        }
        Ok(())
    }
}

/// Build the username history dictionary from a tokenized training split.
pub fn build_user_dict(train: &Corpus, opts: &NormalizeOpts) -> UserDict {
    let mut entries: BTreeMap<String, Vec<HistoryItem>> = BTreeMap::new();
    for rec in train.records() {
        let tokens = normalize(&rec.text, opts).tokens;
        entries
            .entry(rec.username.clone())
            .or_default()
            .push(HistoryItem {
                tweet_id: rec.id.clone(),
                created_at: rec.created_at,
                location: rec.point(),
                tokens,
            });
    }
    for items in entries.values_mut() {
        items.sort_by(|a, b| a.created_at.cmp(&b.created_at).then(a.tweet_id.cmp(&b.tweet_id)));
    }
    UserDict { entries }
}

/// Extend a tweet's tokens with history from its author.
///
/// Eligible history lies within the time window and excludes the tweet
/// itself; the earliest `ceil(sample_frac * |eligible|)` items each
/// contribute their first `k_tokens` tokens, appended after the
/// original text so truncation favors the query tweet. Unknown users
/// pass through unchanged.
pub fn augment_with_history(
    tweet_id: &str,
    tokens: &[String],
    username: &str,
    created_at: i64,
    dict: &UserDict,
    cfg: &AugmentConfig,
    max_words: usize,
) -> Vec<String> {
    let mut out = tokens.to_vec();
    let Some(history) = dict.get(username) else {
        out.truncate(max_words);
        return out;
    };
    let window = (cfg.time_window_hours * 3600.0) as i64;
    let eligible: Vec<&HistoryItem> = history
        .iter()
        .filter(|h| h.tweet_id != tweet_id && (h.created_at - created_at).abs() <= window)
        .collect();
    let keep = (cfg.sample_frac * eligible.len() as f64).ceil() as usize;
    for item in eligible.into_iter().take(keep) {
        out.extend(item.tokens.iter().take(cfg.k_tokens).cloned());
    }
    out.truncate(max_words);
    out
}

// -- KMeans ----------------------------------------------------------------

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum of squared distances to assigned centroids.
pub fn kmeans_inertia(points: &[Vec<f64>], centroids: &[Vec<f64>], assignments: &[usize]) -> f64 {
    points
        .iter()
        .zip(assignments)
        .map(|(p, &a)| sq_dist(p, &centroids[a]))
        .sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (i, c) in centroids.iter().enumerate() {
        let d = sq_dist(point, c);
        if d < best_d {
            best_d = d;
            best = i;
        }
    }
    best
}

/// Seeded k-means++ initialization.
fn kmeans_pp_init(points: &[Vec<f64>], k: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f64>> {
    let mut centroids = vec![points[rng.gen_range(0..points.len())].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total <= 0.0 {
            rng.gen_range(0..points.len())
        } else {
            let mut target = rng.gen_range(0.0..total);
            let mut chosen = points.len() - 1;
            for (i, &d) in d2.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        };
        centroids.push(points[next].clone());
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, centroids.last().unwrap()));
        }
    }
    centroids
}

/// Lloyd's algorithm with k-means++ seeding; empty clusters are
/// re-seeded to the farthest point. Deterministic for a fixed seed.
pub fn kmeans(
    points: &[Vec<f64>],
    k: usize,
    seed: u64,
    max_iter: usize,
) -> Result<(Vec<Vec<f64>>, Vec<usize>)> {
    if k == 0 || points.len() < k {
        return Err(Error::invalid(format!(
            "kmeans needs n >= k >= 1, got n={} k={k}",
            points.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(points, k, &mut rng);
    let dim = points[0].len();
    let mut assignments: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
    for _ in 0..max_iter {
        let mut sums = vec![vec![0.0; dim]; k];
        let mut counts = vec![0usize; k];
        for (p, &a) in points.iter().zip(&assignments) {
            counts[a] += 1;
            for (s, v) in sums[a].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] == 0 {
                // re-seed to the point farthest from its centroid
                let far = points
                    .iter()
                    .enumerate()
                    .max_by(|(i, p), (j, q)| {
                        let di = sq_dist(p, &centroids[assignments[*i]]);
                        let dj = sq_dist(q, &centroids[assignments[*j]]);
                        di.partial_cmp(&dj).unwrap()
                    })
                    .map(|(i, _)| i)
                    .unwrap();
                centroids[c] = points[far].clone();
            } else {
                for (cv, s) in centroids[c].iter_mut().zip(&sums[c]) {
                    *cv = s / counts[c] as f64;
                }
            }
        }
        let next: Vec<usize> = points.iter().map(|p| nearest(p, &centroids)).collect();
        if next == assignments {
            break;
        }
        assignments = next;
    }
    Ok((centroids, assignments))
}

// -- Cluster index ---------------------------------------------------------

/// Sentence-embedding matrix over the training split with KMeans
/// structure and a username -> rows map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterIndex {
    embeddings: Vec<Vec<f64>>,
    tweet_ids: Vec<String>,
    /// Token lists aligned to rows, for re-encoding sampled tweets.
    tokens: Vec<Vec<String>>,
    centroids: Vec<Vec<f64>>,
    assignments: Vec<usize>,
    user_rows: BTreeMap<String, Vec<usize>>,
}

impl ClusterIndex {
    pub fn num_clusters(&self) -> usize {
        self.centroids.len()
    }

    pub fn len(&self) -> usize {
        self.embeddings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.is_empty()
    }

    pub fn assignment(&self, row: usize) -> usize {
        self.assignments[row]
    }

    pub fn tokens_of(&self, row: usize) -> &[String] {
        &self.tokens[row]
    }

    pub fn tweet_id(&self, row: usize) -> &str {
        &self.tweet_ids[row]
    }

    pub fn tweet_ids(&self) -> impl Iterator<Item = &str> {
        self.tweet_ids.iter().map(|s| s.as_str())
    }

    /// Modal cluster over a user's training rows.
    pub fn user_cluster(&self, username: &str) -> Option<usize> {
        let rows = self.user_rows.get(username)?;
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &r in rows {
            *counts.entry(self.assignments[r]).or_insert(0) += 1;
        }
        counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(c, _)| c)
    }
}

/// Embed every training tweet, cluster the matrix, and record the
/// username -> rows map.
pub fn build_cluster_index(
    train: &Corpus,
    table: &EmbeddingTable,
    vocab: &Vocab,
    opts: &NormalizeOpts,
    cfg: &AugmentConfig,
    seed: u64,
) -> Result<ClusterIndex> {
    if cfg.num_clusters == 0 || cfg.num_clusters > train.len() {
        return Err(Error::invalid(format!(
            "num_clusters {} out of range for corpus of {}",
            cfg.num_clusters,
            train.len()
        )));
    }
    let mut embeddings = Vec::with_capacity(train.len());
    let mut tweet_ids = Vec::with_capacity(train.len());
    let mut tokens = Vec::with_capacity(train.len());
    let mut user_rows: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (row, rec) in train.records().iter().enumerate() {
        let t = normalize(&rec.text, opts);
        let ids = encode_words(&t, vocab, opts.max_words);
        embeddings.push(sentence_embedding(&ids, table));
        tweet_ids.push(rec.id.clone());
        tokens.push(t.tokens);
        user_rows.entry(rec.username.clone()).or_default().push(row);
    }
    let (centroids, assignments) = kmeans(&embeddings, cfg.num_clusters, seed, 100)?;
    Ok(ClusterIndex {
        embeddings,
        tweet_ids,
        tokens,
        centroids,
        assignments,
        user_rows,
    })
}

/// The `nc` most cosine-similar training rows from the user's cluster
/// (fallback: the cluster of the tweet's own embedding), excluding the
/// tweet itself, in descending similarity.
pub fn sample_similar(
    tweet_id: &str,
    tweet_embedding: &[f64],
    username: &str,
    index: &ClusterIndex,
    nc: usize,
) -> Result<Vec<usize>> {
    if nc == 0 {
        return Ok(Vec::new());
    }
    let cluster = match index.user_cluster(username) {
        Some(c) => c,
        None => nearest(tweet_embedding, &index.centroids),
    };
    let mut scored: Vec<(usize, f64)> = Vec::new();
    for row in 0..index.len() {
        if index.assignments[row] != cluster || index.tweet_ids[row] == tweet_id {
            continue;
        }
        let sim = cosine_similarity(tweet_embedding, &index.embeddings[row])?;
        scored.push((row, sim));
    }
    scored.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
    Ok(scored.into_iter().take(nc).map(|(r, _)| r).collect())
}
