//! The five architectures, the training loop, evaluation, and
//! prediction.
//!
//! Coordinate targets are z-score normalized against the training
//! split; the regression loss is the mean pairwise Euclidean distance
//! in that normalized space, while reported distance metrics are
//! geodesic miles.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{
    augment_with_history, build_cluster_index, build_user_dict, sample_similar, AugmentConfig,
    ClusterIndex, UserDict,
};
use crate::corpus::{Corpus, LabelField, Splits, TweetRecord};
use crate::embed::{hashed_embeddings, sentence_embedding, EmbeddingTable};
use crate::error::Error;
use crate::geo::{self, GeoPoint, Prediction, PredictionSet};
use crate::tensor::{
    lstm_step, multi_head_attention, position_wise_ffn, sinusoidal_encoding, Graph, LstmParams,
    Optimizer, OptimizerKind, Tensor,
};
use crate::textprep::{
    default_stopwords, encode_chars, encode_words, normalize, CharVocab, NormalizeOpts, Vocab,
};
use crate::Result;


/// Channel count of every char-branch convolution.
const CHAR_CHANNELS: usize = 64;
/// Width of the char branch's final fully connected output `e`.
const CHAR_FC: usize = 128;
/// Shortest character sequence the 7/7/3 conv stack accepts.
const MIN_CHARS: usize = 51;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    WordCnnReg,
    Cch,
    CchA,
    Mh,
    MhU,
    MhC,
}

impl Variant {
    pub fn is_regression(self) -> bool {
        matches!(self, Variant::WordCnnReg | Variant::Cch | Variant::CchA)
    }

    fn uses_chars(self) -> bool {
        matches!(self, Variant::Cch | Variant::CchA)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Coords,
    Zipcode,
    Neighborhood,
}

impl Task {
    pub fn label_field(self) -> Option<LabelField> {
        match self {
            Task::Coords => None,
            Task::Zipcode => Some(LabelField::Zipcode),
            Task::Neighborhood => Some(LabelField::Neighborhood),
        }
    }
}

/// Every architecture and training hyperparameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub variant: Variant,
    pub task: Task,
    /// Convolution widths of the word CNN trunk.
    pub kernels: Vec<usize>,
    pub channels: usize,
    pub fc_layers: usize,
    pub lr: f64,
    /// Multiplicative learning-rate decay per epoch.
    pub lr_decay: f64,
    pub optimizer: OptimizerKind,
    pub batch_size: usize,
    pub epochs: usize,
    /// Encoder block count of the MH variants.
    pub encoders: usize,
    pub emb_dim: usize,
    /// Divisor producing the position-wise FFN inner width:
    /// ffn = max(emb_dim / div_factor, 8).
    pub div_factor: usize,
    pub heads: usize,
    pub dropout: f64,
    pub max_words: usize,
    pub max_chars: usize,
    pub char_emb_dim: usize,
    pub vocab_min_freq: u64,
    pub vocab_max_size: usize,
    pub augment: AugmentConfig,
    /// Apply the username-history augmentation while training too
    /// (MH_U normally augments only at prediction time).
    pub history_at_train: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            variant: Variant::Mh,
            task: Task::Zipcode,
            kernels: vec![2, 4, 8],
            channels: 32,
            fc_layers: 1,
            lr: 0.005,
            lr_decay: 1.0,
            optimizer: OptimizerKind::Adam,
            batch_size: 64,
            epochs: 10,
            encoders: 2,
            emb_dim: 32,
            div_factor: 4,
            heads: 8,
            dropout: 0.0,
            max_words: 64,
            max_chars: 280,
            char_emb_dim: 16,
            vocab_min_freq: 1,
            vocab_max_size: 50_000,
            augment: AugmentConfig::default(),
            history_at_train: false,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn ffn_dim(&self) -> usize {
        (self.emb_dim / self.div_factor).max(8)
    }

    pub fn validate(&self) -> Result<()> {
        if self.variant.is_regression() != (self.task == Task::Coords) {
            return Err(Error::config(format!(
                "variant {:?} cannot serve task {:?}",
                self.variant, self.task
            )));
        }
        match self.variant {
            Variant::WordCnnReg | Variant::Cch => {
                if self.kernels.is_empty() {
                    return Err(Error::config("CNN variants need at least one kernel"));
                }
                if let Some(&k) = self.kernels.iter().find(|&&k| k == 0 || k > self.max_words) {
                    return Err(Error::config(format!(
                        "kernel {k} invalid for max_words {}",
                        self.max_words
                    )));
                }
            }
            Variant::Mh | Variant::MhU | Variant::MhC => {
                if self.heads == 0 || self.emb_dim % self.heads != 0 {
                    return Err(Error::config(format!(
                        "emb_dim {} not divisible by heads {}",
                        self.emb_dim, self.heads
                    )));
                }
                if self.encoders == 0 {
                    return Err(Error::config("MH variants need at least one encoder"));
                }
            }
            Variant::CchA => {}
        }
        if self.variant.uses_chars() && self.max_chars < MIN_CHARS {
            return Err(Error::config(format!(
                "char branch needs max_chars >= {MIN_CHARS}, got {}",
                self.max_chars
            )));
        }
        if self.channels == 0 || self.emb_dim == 0 || self.max_words == 0 {
            return Err(Error::config("channels, emb_dim, max_words must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be positive"));
        }
        if self.lr <= 0.0 || !(0.0..=1.0).contains(&self.lr_decay) {
            return Err(Error::config("lr must be positive and lr_decay in [0,1]"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::config("dropout must be in [0,1)"));
        }
        if self.div_factor == 0 {
            return Err(Error::config("div_factor must be positive"));
        }
        self.augment.validate()
    }

    fn normalize_opts(&self) -> NormalizeOpts {
        NormalizeOpts {
            max_words: self.max_words,
            stem: true,
            stopwords: default_stopwords(),
        }
    }
}

/// One named weight tensor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

/// Per-coordinate z-score statistics from the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoordStats {
    pub mean: [f64; 2],
    pub std: [f64; 2],
}

impl CoordStats {
    fn fit(train: &Corpus) -> Result<Self> {
        let pts: Vec<[f64; 2]> = train
            .records()
            .iter()
            .filter_map(|r| r.point().map(|p| [p.lon, p.lat]))
            .collect();
        if pts.is_empty() {
            return Err(Error::invalid(
                "coords task requires geotagged training records",
            ));
        }
        let n = pts.len() as f64;
        let mut mean = [0.0; 2];
        for p in &pts {
            mean[0] += p[0];
            mean[1] += p[1];
        }
        mean[0] /= n;
        mean[1] /= n;
        let mut var = [0.0; 2];
        for p in &pts {
            var[0] += (p[0] - mean[0]).powi(2);
            var[1] += (p[1] - mean[1]).powi(2);
        }
        let std = [(var[0] / n).sqrt().max(1e-9), (var[1] / n).sqrt().max(1e-9)];
        Ok(CoordStats { mean, std })
    }

    fn normalize(&self, p: GeoPoint) -> [f64; 2] {
        [
            (p.lon - self.mean[0]) / self.std[0],
            (p.lat - self.mean[1]) / self.std[1],
        ]
    }

    fn denormalize(&self, v: [f64; 2]) -> GeoPoint {
        GeoPoint::new(
            (v[0] * self.std[0] + self.mean[0]).clamp(-180.0, 180.0),
            (v[1] * self.std[1] + self.mean[1]).clamp(-90.0, 90.0),
        )
    }
}

/// Metrics of one evaluation pass; classification and regression
/// populate disjoint subsets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub count: usize,
    pub mean_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub accuracy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_cross_entropy: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_at_30: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub acc_at_161: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mean_error_miles: Option<f64>,
    /// Evaluation rows whose label was unseen at training time; scored
    /// incorrect.
    pub unknown_labels: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub valid: Option<Metrics>,
}

/// A model with its parameters and every artifact needed to run it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainedModel {
    pub config: ModelConfig,
    pub params: BTreeMap<String, Param>,
    pub vocab: Vocab,
    pub char_vocab: CharVocab,
    /// Classification label set in id order.
    pub labels: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub coord_stats: Option<CoordStats>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub user_dict: Option<UserDict>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cluster_index: Option<ClusterIndex>,
    pub history: Vec<EpochRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    model: TrainedModel,
}

// -- construction ----------------------------------------------------------

fn xavier(rng: &mut ChaCha8Rng, shape: &[usize], values: &mut Vec<f64>) {
    let (fan_in, fan_out) = match shape.len() {
        2 => (shape[0], shape[1]),
        3 => (shape[0] * shape[1], shape[2]),
        _ => (shape[0], shape[0]),
    };
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    values.extend((0..n).map(|_| rng.gen_range(-a..a)));
}

/// Parameter names and shapes in creation order, one entry per weight.
fn param_specs(cfg: &ModelConfig, vocab_len: usize, out_dim: usize) -> Vec<(String, Vec<usize>)> {
    let d = cfg.emb_dim;
    let c = cfg.channels;
    let mut specs: Vec<(String, Vec<usize>)> = vec![("word_emb".into(), vec![vocab_len, d])];
    let char_specs = |specs: &mut Vec<(String, Vec<usize>)>| {
        specs.push(("char_emb".into(), vec![CharVocab::default().len(), cfg.char_emb_dim]));
        specs.push(("cconv1_w".into(), vec![7, cfg.char_emb_dim, CHAR_CHANNELS]));
        specs.push(("cconv1_b".into(), vec![CHAR_CHANNELS]));
        specs.push(("cconv2_w".into(), vec![7, CHAR_CHANNELS, CHAR_CHANNELS]));
        specs.push(("cconv2_b".into(), vec![CHAR_CHANNELS]));
        specs.push(("cconv3_w".into(), vec![3, CHAR_CHANNELS, CHAR_CHANNELS]));
        specs.push(("cconv3_b".into(), vec![CHAR_CHANNELS]));
        specs.push(("char_fc_w".into(), vec![CHAR_CHANNELS, CHAR_FC]));
        specs.push(("char_fc_b".into(), vec![CHAR_FC]));
    };
    let cnn_trunk = |specs: &mut Vec<(String, Vec<usize>)>| -> usize {
        for &k in &cfg.kernels {
            specs.push((format!("conv{k}_w"), vec![k, d, c]));
            specs.push((format!("conv{k}_b"), vec![c]));
        }
        let mut width = cfg.kernels.len() * c;
        for i in 0..cfg.fc_layers {
            specs.push((format!("fc{i}_w"), vec![width, c]));
            specs.push((format!("fc{i}_b"), vec![c]));
            width = c;
        }
        width
    };
    match cfg.variant {
        Variant::WordCnnReg => {
            let w = cnn_trunk(&mut specs);
            specs.push(("out_w".into(), vec![w, out_dim]));
            specs.push(("out_b".into(), vec![out_dim]));
        }
        Variant::Cch => {
            let w = cnn_trunk(&mut specs);
            char_specs(&mut specs);
            specs.push(("out_w".into(), vec![w + CHAR_FC, out_dim]));
            specs.push(("out_b".into(), vec![out_dim]));
        }
        Variant::CchA => {
            for gate in ["i", "f", "o", "g"] {
                specs.push((format!("lstm_wx_{gate}"), vec![d, c]));
                specs.push((format!("lstm_wh_{gate}"), vec![c, c]));
                specs.push((format!("lstm_b_{gate}"), vec![c]));
            }
            char_specs(&mut specs);
            specs.push(("out_w".into(), vec![c + CHAR_FC, out_dim]));
            specs.push(("out_b".into(), vec![out_dim]));
        }
        Variant::Mh | Variant::MhU | Variant::MhC => {
            let f = cfg.ffn_dim();
            for i in 0..cfg.encoders {
                for proj in ["wq", "wk", "wv", "wo"] {
                    specs.push((format!("enc{i}_{proj}"), vec![d, d]));
                }
                specs.push((format!("enc{i}_ffn_w1"), vec![d, f]));
                specs.push((format!("enc{i}_ffn_b1"), vec![f]));
                specs.push((format!("enc{i}_ffn_w2"), vec![f, d]));
                specs.push((format!("enc{i}_ffn_b2"), vec![d]));
            }
            let cls_in = if cfg.variant == Variant::MhC { 2 * d } else { d };
            specs.push(("cls_w".into(), vec![cls_in, out_dim]));
            specs.push(("cls_b".into(), vec![out_dim]));
        }
    }
    specs
}

fn init_params(cfg: &ModelConfig, vocab_len: usize, out_dim: usize) -> BTreeMap<String, Param> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut params = BTreeMap::new();
    for (name, shape) in param_specs(cfg, vocab_len, out_dim) {
        let n: usize = shape.iter().product();
        let mut values = Vec::with_capacity(n);
        if name.ends_with("_b") {
            values.resize(n, 0.0);
        } else if name.ends_with("_emb") {
            values.extend((0..n).map(|_| rng.gen_range(-0.1..0.1)));
        } else {
            xavier(&mut rng, &shape, &mut values);
        }
        params.insert(name, Param { shape, values });
    }
    params
}

/// The vocabulary a model with this config would build from `train`;
/// used to load embedding files before construction.
pub fn vocab_for(cfg: &ModelConfig, train: &Corpus) -> Vocab {
    let opts = cfg.normalize_opts();
    let tokenized: Vec<_> = train
        .records()
        .iter()
        .map(|r| normalize(&r.text, &opts))
        .collect();
    crate::textprep::build_vocab(&tokenized, cfg.vocab_min_freq, cfg.vocab_max_size)
}

/// Build an initialized, untrained model from a config and its
/// training corpus (vocabulary, label set, coordinate statistics, and
/// augmentation structures all derive from the training split only).
pub fn build(
    cfg: &ModelConfig,
    train: &Corpus,
    embeddings: Option<&EmbeddingTable>,
) -> Result<TrainedModel> {
    cfg.validate()?;
    let opts = cfg.normalize_opts();
    let tokenized: Vec<_> = train
        .records()
        .iter()
        .map(|r| normalize(&r.text, &opts))
        .collect();
    let vocab = crate::textprep::build_vocab(&tokenized, cfg.vocab_min_freq, cfg.vocab_max_size);

    let (labels, coord_stats) = match cfg.task.label_field() {
        Some(field) => {
            let labels = train.labels(field).to_vec();
            if labels.is_empty() {
                return Err(Error::invalid(format!(
                    "no {field:?} labels in training corpus"
                )));
            }
            (labels, None)
        }
        None => (Vec::new(), Some(CoordStats::fit(train)?)),
    };
    let out_dim = if labels.is_empty() { 2 } else { labels.len() };

    let user_dict = if cfg.variant == Variant::MhU {
        Some(build_user_dict(train, &opts))
    } else {
        None
    };
    let cluster_index = if cfg.variant == Variant::MhC {
        let owned;
        let table = match embeddings {
            Some(t) => t,
            None => {
                owned = hashed_embeddings(&vocab, cfg.emb_dim, cfg.seed);
                &owned
            }
        };
        Some(build_cluster_index(
            train,
            table,
            &vocab,
            &opts,
            &cfg.augment,
            cfg.seed,
        )?)
    } else {
        None
    };

    Ok(TrainedModel {
        config: cfg.clone(),
        params: init_params(cfg, vocab.len(), out_dim),
        vocab,
        char_vocab: CharVocab::default(),
        labels,
        coord_stats,
        user_dict,
        cluster_index,
        history: Vec::new(),
    })
}

/// Build and fit in one call.
pub fn train(
    cfg: &ModelConfig,
    splits: &Splits,
    embeddings: Option<&EmbeddingTable>,
) -> Result<TrainedModel> {
    let mut model = build(cfg, &splits.train, embeddings)?;
    model.fit(&splits.train, Some(&splits.valid), embeddings)?;
    Ok(model)
}

// -- encoded examples ------------------------------------------------------

struct Example {
    word_ids: Vec<usize>,
    char_ids: Vec<usize>,
    target_class: Option<usize>,
    target_coords: Option<[f64; 2]>,
    /// Flattened word ids of the sampled similar tweets (MH_C train).
    sampled_ids: Vec<usize>,
}

struct BatchData {
    b: usize,
    word_ids: Vec<usize>,
    char_ids: Vec<usize>,
    sampled_ids: Option<Vec<usize>>,
}

impl TrainedModel {
    fn label_id(&self, label: &str) -> Option<usize> {
        self.labels.iter().position(|l| l == label)
    }

    /// Encode one record for this model. `augment_history` injects the
    /// username-dictionary tokens (MH_U); `sample_clusters` attaches
    /// cluster-retrieved tweets (MH_C training).
    fn encode_record(
        &self,
        rec: &TweetRecord,
        augment_history: bool,
        sample_clusters: Option<&EmbeddingTable>,
        require_target: bool,
    ) -> Result<Example> {
        let cfg = &self.config;
        let opts = cfg.normalize_opts();
        let t = normalize(&rec.text, &opts);
        let mut tokens = t.tokens;
        if augment_history {
            if let Some(dict) = &self.user_dict {
                tokens = augment_with_history(
                    &rec.id,
                    &tokens,
                    &rec.username,
                    rec.created_at,
                    dict,
                    &cfg.augment,
                    cfg.max_words,
                );
            }
        }
        let tweet = crate::textprep::TokenizedTweet {
            tokens,
            char_seq: t.char_seq,
        };
        let word_ids = encode_words(&tweet, &self.vocab, cfg.max_words);
        let char_ids = if cfg.variant.uses_chars() {
            encode_chars(&tweet.char_seq, &self.char_vocab, cfg.max_chars)
        } else {
            Vec::new()
        };

        let (target_class, target_coords) = match cfg.task.label_field() {
            Some(field) => {
                let id = field.get(rec).and_then(|l| self.label_id(l));
                if require_target && id.is_none() {
                    return Err(Error::invalid(format!(
                        "record {} lacks a known {field:?} label",
                        rec.id
                    )));
                }
                (id, None)
            }
            None => {
                let stats = self.coord_stats.as_ref().unwrap();
                let coords = rec.point().map(|p| stats.normalize(p));
                if require_target && coords.is_none() {
                    return Err(Error::invalid(format!("record {} lacks coordinates", rec.id)));
                }
                (None, coords)
            }
        };

        let sampled_ids = match sample_clusters {
            Some(table) if cfg.augment.nc_samples > 0 => {
                let index = self.cluster_index.as_ref().unwrap();
                let emb = sentence_embedding(&word_ids, table);
                let rows = sample_similar(
                    &rec.id,
                    &emb,
                    &rec.username,
                    index,
                    cfg.augment.nc_samples,
                )?;
                let mut ids = Vec::with_capacity(cfg.augment.nc_samples * cfg.max_words);
                for slot in 0..cfg.augment.nc_samples {
                    // cycle when the cluster has fewer than nc rows;
                    // an empty cluster contributes all-pad tweets
                    match rows.get(slot % rows.len().max(1)) {
                        Some(&row) if !rows.is_empty() => {
                            let tw = crate::textprep::TokenizedTweet {
                                tokens: index.tokens_of(row).to_vec(),
                                char_seq: Vec::new(),
                            };
                            ids.extend(encode_words(&tw, &self.vocab, cfg.max_words));
                        }
                        _ => ids.extend(std::iter::repeat(crate::textprep::PAD_ID).take(cfg.max_words)),
                    }
                }
                ids
            }
            _ => Vec::new(),
        };

        Ok(Example {
            word_ids,
            char_ids,
            target_class,
            target_coords,
            sampled_ids,
        })
    }

    fn batch_of(&self, examples: &[&Example]) -> BatchData {
        let cfg = &self.config;
        let b = examples.len();
        let mut word_ids = Vec::with_capacity(b * cfg.max_words);
        let mut char_ids = Vec::new();
        let mut sampled = Vec::new();
        for ex in examples {
            word_ids.extend_from_slice(&ex.word_ids);
            char_ids.extend_from_slice(&ex.char_ids);
            sampled.extend_from_slice(&ex.sampled_ids);
        }
        let sampled_ids = if sampled.is_empty() { None } else { Some(sampled) };
        BatchData {
            b,
            word_ids,
            char_ids,
            sampled_ids,
        }
    }

    // -- forward -----------------------------------------------------------

    fn graph_params(&self, g: &mut Graph) -> Result<BTreeMap<String, Tensor>> {
        let mut out = BTreeMap::new();
        for (name, p) in &self.params {
            out.insert(name.clone(), g.param(p.values.clone(), p.shape.clone())?);
        }
        Ok(out)
    }

    fn linear(
        g: &mut Graph,
        pt: &BTreeMap<String, Tensor>,
        x: Tensor,
        prefix: &str,
    ) -> Result<Tensor> {
        let h = g.matmul(x, pt[&format!("{prefix}_w")])?;
        g.add_bias(h, pt[&format!("{prefix}_b")])
    }

    fn cnn_trunk(
        &self,
        g: &mut Graph,
        pt: &BTreeMap<String, Tensor>,
        batch: &BatchData,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        let emb = g.embedding_lookup(pt["word_emb"], &batch.word_ids, &[batch.b, cfg.max_words])?;
        let mut pooled = Vec::new();
        for &k in &cfg.kernels {
            let c = g.conv1d(emb, pt[&format!("conv{k}_w")])?;
            let c = g.add_bias(c, pt[&format!("conv{k}_b")])?;
            let c = g.relu(c);
            pooled.push(g.global_max_pool(c)?);
        }
        let mut h = g.concat(&pooled, 1)?;
        h = g.dropout(h, cfg.dropout)?;
        for i in 0..cfg.fc_layers {
            h = Self::linear(g, pt, h, &format!("fc{i}"))?;
            h = g.relu(h);
            h = g.dropout(h, cfg.dropout)?;
        }
        Ok(h)
    }

    fn char_branch(
        &self,
        g: &mut Graph,
        pt: &BTreeMap<String, Tensor>,
        batch: &BatchData,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        let emb = g.embedding_lookup(pt["char_emb"], &batch.char_ids, &[batch.b, cfg.max_chars])?;
        let mut h = emb;
        for (i, pool) in [(1, true), (2, true), (3, false)] {
            let c = g.conv1d(h, pt[&format!("cconv{i}_w")])?;
            let c = g.add_bias(c, pt[&format!("cconv{i}_b")])?;
            let c = g.relu(c);
            h = if pool { g.max_pool1d(c, 3, 3)? } else { c };
        }
        let pooled = g.global_max_pool(h)?;
        let e = Self::linear(g, pt, pooled, "char_fc")?;
        Ok(g.relu(e))
    }

    fn lstm_attention(
        &self,
        g: &mut Graph,
        pt: &BTreeMap<String, Tensor>,
        batch: &BatchData,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        let (b, t, dh) = (batch.b, cfg.max_words, cfg.channels);
        let zeros = g.constant(vec![0.0; b * dh], vec![b, dh])?;
        let (mut h, mut c) = (zeros, zeros);
        let params = LstmParams {
            wx_i: pt["lstm_wx_i"],
            wh_i: pt["lstm_wh_i"],
            b_i: pt["lstm_b_i"],
            wx_f: pt["lstm_wx_f"],
            wh_f: pt["lstm_wh_f"],
            b_f: pt["lstm_b_f"],
            wx_o: pt["lstm_wx_o"],
            wh_o: pt["lstm_wh_o"],
            b_o: pt["lstm_b_o"],
            wx_g: pt["lstm_wx_g"],
            wh_g: pt["lstm_wh_g"],
            b_g: pt["lstm_b_g"],
        };
        let mut steps = Vec::with_capacity(t);
        for ti in 0..t {
            let ids: Vec<usize> = (0..b).map(|i| batch.word_ids[i * t + ti]).collect();
            let x = g.embedding_lookup(pt["word_emb"], &ids, &[b])?;
            let (hn, cn) = lstm_step(g, x, h, c, &params)?;
            h = hn;
            c = cn;
            steps.push(g.reshape(hn, vec![b, 1, dh])?);
        }
        let hmat = g.concat(&steps, 1)?; // [b,t,dh]
        let h_final = g.reshape(h, vec![b, dh, 1])?;
        let scores = g.bmm(hmat, h_final)?; // [b,t,1]
        let scores = g.reshape(scores, vec![b, t])?;
        let attn = g.softmax(scores)?;
        let attn = g.reshape(attn, vec![b, 1, t])?;
        let ctx = g.bmm(attn, hmat)?; // [b,1,dh]
        g.reshape(ctx, vec![b, dh])
    }

    /// Shared MH encoder: token ids for `rows` sequences -> `[rows,D]`.
    fn mh_encode(
        &self,
        g: &mut Graph,
        pt: &BTreeMap<String, Tensor>,
        ids: &[usize],
        rows: usize,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        let (t, d) = (cfg.max_words, cfg.emb_dim);
        let emb = g.embedding_lookup(pt["word_emb"], ids, &[rows, t])?;
        let pe = sinusoidal_encoding(t, d);
        let tiled: Vec<f64> = pe.iter().copied().cycle().take(rows * t * d).collect();
        let pec = g.constant(tiled, vec![rows, t, d])?;
        let mut x = g.add(emb, pec)?;
        for i in 0..cfg.encoders {
            let a = multi_head_attention(
                g,
                x,
                pt[&format!("enc{i}_wq")],
                pt[&format!("enc{i}_wk")],
                pt[&format!("enc{i}_wv")],
                pt[&format!("enc{i}_wo")],
                cfg.heads,
            )?;
            let f = position_wise_ffn(
                g,
                a,
                pt[&format!("enc{i}_ffn_w1")],
                pt[&format!("enc{i}_ffn_b1")],
                pt[&format!("enc{i}_ffn_w2")],
                pt[&format!("enc{i}_ffn_b2")],
            )?;
            x = g.dropout(f, cfg.dropout)?;
        }
        g.mean_axis(x, 1)
    }

    /// Model output for a batch: `[B,2]` normalized coordinates or
    /// `[B,L]` logits.
    fn forward(
        &self,
        g: &mut Graph,
        pt: &BTreeMap<String, Tensor>,
        batch: &BatchData,
    ) -> Result<Tensor> {
        let cfg = &self.config;
        match cfg.variant {
            Variant::WordCnnReg => {
                let rep = self.cnn_trunk(g, pt, batch)?;
                Self::linear(g, pt, rep, "out")
            }
            Variant::Cch => {
                let rep = self.cnn_trunk(g, pt, batch)?;
                let e = self.char_branch(g, pt, batch)?;
                let cat = g.concat(&[rep, e], 1)?;
                Self::linear(g, pt, cat, "out")
            }
            Variant::CchA => {
                let ctx = self.lstm_attention(g, pt, batch)?;
                let e = self.char_branch(g, pt, batch)?;
                let cat = g.concat(&[ctx, e], 1)?;
                Self::linear(g, pt, cat, "out")
            }
            Variant::Mh | Variant::MhU => {
                let h = self.mh_encode(g, pt, &batch.word_ids, batch.b)?;
                Self::linear(g, pt, h, "cls")
            }
            Variant::MhC => {
                let h = self.mh_encode(g, pt, &batch.word_ids, batch.b)?;
                let d = cfg.emb_dim;
                let aug = match &batch.sampled_ids {
                    Some(ids) => {
                        let nc = cfg.augment.nc_samples;
                        let enc = self.mh_encode(g, pt, ids, batch.b * nc)?;
                        let grouped = g.reshape(enc, vec![batch.b, nc, d])?;
                        g.mean_axis(grouped, 1)?
                    }
                    None => g.constant(vec![0.0; batch.b * d], vec![batch.b, d])?,
                };
                let cat = g.concat(&[h, aug], 1)?;
                Self::linear(g, pt, cat, "cls")
            }
        }
    }

    fn batch_loss(
        &self,
        g: &mut Graph,
        out: Tensor,
        examples: &[&Example],
    ) -> Result<Tensor> {
        if self.config.task == Task::Coords {
            let truth: Vec<f64> = examples
                .iter()
                .flat_map(|e| e.target_coords.unwrap())
                .collect();
            g.pairwise_loss(out, &truth)
        } else {
            let targets: Vec<usize> = examples.iter().map(|e| e.target_class.unwrap()).collect();
            g.cross_entropy(out, &targets)
        }
    }

    // -- training ----------------------------------------------------------

    /// Mini-batch training over `train`, recording per-epoch history
    /// (validation metrics when `valid` is given). Deterministic for a
    /// fixed config.
    pub fn fit(
        &mut self,
        train: &Corpus,
        valid: Option<&Corpus>,
        embeddings: Option<&EmbeddingTable>,
    ) -> Result<()> {
        let cfg = self.config.clone();
        let owned;
        let sample_table = if cfg.variant == Variant::MhC {
            Some(match embeddings {
                Some(t) => t,
                None => {
                    owned = hashed_embeddings(&self.vocab, cfg.emb_dim, cfg.seed);
                    &owned
                }
            })
        } else {
            None
        };
        let augment_train = cfg.variant == Variant::MhU && cfg.history_at_train;
        let examples: Vec<Example> = train
            .records()
            .iter()
            .map(|r| self.encode_record(r, augment_train, sample_table, true))
            .collect::<Result<_>>()?;
        if examples.is_empty() {
            return Err(Error::invalid("training corpus is empty"));
        }

        let mut optimizer = Optimizer::new(cfg.optimizer, cfg.lr, cfg.lr_decay);
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
        let mut order: Vec<usize> = (0..examples.len()).collect();

        for epoch in 0..cfg.epochs {
            order.shuffle(&mut shuffle_rng);
            let mut epoch_loss = 0.0;
            let mut batches = 0usize;
            for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
                let refs: Vec<&Example> = chunk.iter().map(|&i| &examples[i]).collect();
                let batch = self.batch_of(&refs);
                let graph_seed = cfg
                    .seed
                    .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                    .wrapping_add(((epoch as u64) << 32) | bi as u64);
                let mut g = Graph::for_training(graph_seed);
                let pt = self.graph_params(&mut g)?;
                let out = self.forward(&mut g, &pt, &batch)?;
                let loss = self.batch_loss(&mut g, out, &refs)?;
                let grads = g.backward(loss).map_err(|e| {
                    Error::numerical(format!("epoch {epoch} batch {bi}: {e}"))
                })?;
                epoch_loss += g.values(loss)[0];
                batches += 1;
                for (name, &tensor) in &pt {
                    if let Some(grad) = grads.get(tensor) {
                        let param = self.params.get_mut(name).unwrap();
                        optimizer.step(name, &mut param.values, grad)?;
                    }
                }
            }
            optimizer.end_epoch();
            let valid_metrics = match valid {
                Some(v) if !v.is_empty() => Some(self.evaluate(v)?),
                _ => None,
            };
            self.history.push(EpochRecord {
                epoch,
                train_loss: epoch_loss / batches as f64,
                valid: valid_metrics,
            });
        }
        Ok(())
    }

    // -- evaluation and prediction -----------------------------------------

    /// Raw eval-mode outputs for a set of records (no augmentation
    /// beyond the variant's prediction-time contract).
    fn eval_outputs(&self, records: &[TweetRecord]) -> Result<Vec<Vec<f64>>> {
        let cfg = &self.config;
        let augment = cfg.variant == Variant::MhU;
        let mut outputs = Vec::with_capacity(records.len());
        for chunk in records.chunks(cfg.batch_size) {
            let examples: Vec<Example> = chunk
                .iter()
                .map(|r| self.encode_record(r, augment, None, false))
                .collect::<Result<_>>()?;
            let refs: Vec<&Example> = examples.iter().collect();
            let batch = self.batch_of(&refs);
            let mut g = Graph::new();
            let pt = self.graph_params(&mut g)?;
            let out = self.forward(&mut g, &pt, &batch)?;
            let width = self.forward_width();
            for row in g.values(out).chunks(width) {
                outputs.push(row.to_vec());
            }
        }
        if outputs.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::numerical("non-finite model output at evaluation"));
        }
        Ok(outputs)
    }

    fn forward_width(&self) -> usize {
        if self.config.task == Task::Coords {
            2
        } else {
            self.labels.len()
        }
    }

    fn softmax_row(logits: &[f64]) -> Vec<f64> {
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut out: Vec<f64> = logits.iter().map(|v| (v - max).exp()).collect();
        let sum: f64 = out.iter().sum();
        for v in &mut out {
            *v /= sum;
        }
        out
    }

    /// Per-tweet predictions; truth fields populated when present.
    pub fn predict(&self, records: &[TweetRecord]) -> Result<PredictionSet> {
        let outputs = self.eval_outputs(records)?;
        let mut entries = Vec::with_capacity(records.len());
        for (rec, out) in records.iter().zip(outputs) {
            let field = self.config.task.label_field();
            let entry = if self.config.task == Task::Coords {
                let stats = self.coord_stats.as_ref().unwrap();
                Prediction {
                    id: rec.id.clone(),
                    truth_point: rec.point(),
                    pred_point: Some(stats.denormalize([out[0], out[1]])),
                    truth_label: None,
                    pred_label: None,
                    probability: None,
                    distribution: None,
                }
            } else {
                let dist = Self::softmax_row(&out);
                let best = dist
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                Prediction {
                    id: rec.id.clone(),
                    truth_point: rec.point(),
                    pred_point: None,
                    truth_label: field.unwrap().get(rec).map(str::to_string),
                    pred_label: Some(self.labels[best].clone()),
                    probability: Some(dist[best]),
                    distribution: Some(dist),
                }
            };
            entries.push(entry);
        }
        Ok(PredictionSet { entries })
    }

    /// Metrics over a labeled corpus.
    pub fn evaluate(&self, corpus: &Corpus) -> Result<Metrics> {
        if corpus.is_empty() {
            return Err(Error::invalid("evaluate on empty corpus"));
        }
        let records = corpus.records();
        let outputs = self.eval_outputs(records)?;
        if self.config.task == Task::Coords {
            let stats = self.coord_stats.as_ref().unwrap();
            let mut preds = PredictionSet::default();
            let mut norm_pred = Vec::new();
            let mut norm_truth = Vec::new();
            for (rec, out) in records.iter().zip(&outputs) {
                let truth = rec.point().ok_or_else(|| {
                    Error::invalid(format!("record {} lacks coordinates", rec.id))
                })?;
                norm_pred.push([out[0], out[1]]);
                norm_truth.push(stats.normalize(truth));
                preds.entries.push(Prediction {
                    id: rec.id.clone(),
                    truth_point: Some(truth),
                    pred_point: Some(stats.denormalize([out[0], out[1]])),
                    truth_label: None,
                    pred_label: None,
                    probability: None,
                    distribution: None,
                });
            }
            Ok(Metrics {
                count: records.len(),
                mean_loss: geo::pairwise_loss(&norm_pred, &norm_truth)?,
                accuracy: None,
                mean_cross_entropy: None,
                acc_at_30: Some(geo::acc_at(&preds, 30.0)?),
                acc_at_161: Some(geo::acc_at(&preds, 161.0)?),
                mean_error_miles: Some(geo::mean_error_miles(&preds)?),
                unknown_labels: 0,
            })
        } else {
            let field = self.config.task.label_field().unwrap();
            let mut correct = 0usize;
            let mut unknown = 0usize;
            let mut ce_sum = 0.0;
            let mut ce_count = 0usize;
            for (rec, out) in records.iter().zip(&outputs) {
                let truth = field.get(rec).ok_or_else(|| {
                    Error::invalid(format!("record {} lacks a {field:?} label", rec.id))
                })?;
                let dist = Self::softmax_row(out);
                let best = dist
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(i, _)| i)
                    .unwrap();
                match self.label_id(truth) {
                    Some(tid) => {
                        if tid == best {
                            correct += 1;
                        }
                        ce_sum -= dist[tid].max(1e-300).ln();
                        ce_count += 1;
                    }
                    None => unknown += 1,
                }
            }
            let mean_ce = if ce_count > 0 {
                ce_sum / ce_count as f64
            } else {
                0.0
            };
            Ok(Metrics {
                count: records.len(),
                mean_loss: mean_ce,
                accuracy: Some(correct as f64 / records.len() as f64),
                mean_cross_entropy: Some(mean_ce),
                acc_at_30: None,
                acc_at_161: None,
                mean_error_miles: None,
                unknown_labels: unknown,
            })
        }
    }

    // -- persistence -------------------------------------------------------

    pub fn save(&self, path: &Path) -> Result<()> {
        let ckpt = Checkpoint {
            version: 1,
            model: self.clone(),
        };
        let json = serde_json::to_string_pretty(&ckpt)
            .map_err(|e| Error::invalid(format!("checkpoint serialization: {e}")))?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = std::fs::read_to_string(path)?;
        let ckpt: Checkpoint = serde_json::from_str(&data)
            .map_err(|e| Error::parse(0, format!("checkpoint: {e}")))?;
        if ckpt.version != 1 {
            return Err(Error::invalid(format!(
                "unsupported checkpoint version {}",
                ckpt.version
            )));
        }
        Ok(ckpt.model)
    }
}
