//! Corpus data model, file ingestion, synthetic corpus generation with
//! planted signal, splitting, stratified sampling, and sample-factor
//! oversampling.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::Error;
use crate::geo::{GeoPoint, Polygon, RegionKind, RegionSet};
use crate::Result;

/// One post: text, author, timestamp, optional coordinates and labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TweetRecord {
    pub id: String,
    pub text: String,
    pub username: String,
    /// Seconds since epoch, UTC; strictly positive.
    pub created_at: i64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lon: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lat: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub zipcode: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub neighborhood: Option<String>,
}

impl TweetRecord {
    pub fn point(&self) -> Option<GeoPoint> {
        match (self.lon, self.lat) {
            (Some(lon), Some(lat)) => Some(GeoPoint::new(lon, lat)),
            _ => None,
        }
    }
}

/// Which label field an operation targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LabelField {
    Zipcode,
    Neighborhood,
}

impl LabelField {
    pub fn get<'a>(&self, rec: &'a TweetRecord) -> Option<&'a str> {
        match self {
            LabelField::Zipcode => rec.zipcode.as_deref(),
            LabelField::Neighborhood => rec.neighborhood.as_deref(),
        }
    }
}

/// Bounding box of geotagged records.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub min_lon: f64,
    pub max_lon: f64,
    pub min_lat: f64,
    pub max_lat: f64,
}

/// An ordered record list with derived label sets and bounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Corpus {
    records: Vec<TweetRecord>,
    zipcodes: Vec<String>,
    neighborhoods: Vec<String>,
    bounds: Option<Bounds>,
}

impl Corpus {
    /// Build a corpus, validating record invariants and computing the
    /// distinct label sets and coordinate bounds.
    pub fn from_records(records: Vec<TweetRecord>) -> Result<Self> {
        let mut ids = BTreeSet::new();
        let mut zips = BTreeSet::new();
        let mut hoods = BTreeSet::new();
        let mut bounds: Option<Bounds> = None;
        for (i, r) in records.iter().enumerate() {
            if !ids.insert(r.id.clone()) {
                return Err(Error::invalid(format!("duplicate id `{}`", r.id)));
            }
            if r.lon.is_some() != r.lat.is_some() {
                return Err(Error::invalid(format!(
                    "coordinate pair incomplete at record {i} (id `{}`)",
                    r.id
                )));
            }
            if r.created_at <= 0 {
                return Err(Error::invalid(format!(
                    "created_at must be positive (id `{}`)",
                    r.id
                )));
            }
            if r.text.trim().is_empty() {
                return Err(Error::invalid(format!("empty text (id `{}`)", r.id)));
            }
            if let Some(z) = &r.zipcode {
                zips.insert(z.clone());
            }
            if let Some(n) = &r.neighborhood {
                hoods.insert(n.clone());
            }
            if let Some(p) = r.point() {
                if !(-180.0..=180.0).contains(&p.lon) || !(-90.0..=90.0).contains(&p.lat) {
                    return Err(Error::invalid(format!(
                        "coordinates out of range (id `{}`)",
                        r.id
                    )));
                }
                bounds = Some(match bounds {
                    None => Bounds {
                        min_lon: p.lon,
                        max_lon: p.lon,
                        min_lat: p.lat,
                        max_lat: p.lat,
                    },
                    Some(b) => Bounds {
                        min_lon: b.min_lon.min(p.lon),
                        max_lon: b.max_lon.max(p.lon),
                        min_lat: b.min_lat.min(p.lat),
                        max_lat: b.max_lat.max(p.lat),
                    },
                });
            }
        }
        Ok(Corpus {
            records,
            zipcodes: zips.into_iter().collect(),
            neighborhoods: hoods.into_iter().collect(),
            bounds,
        })
    }

    pub fn records(&self) -> &[TweetRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn labels(&self, field: LabelField) -> &[String] {
        match field {
            LabelField::Zipcode => &self.zipcodes,
            LabelField::Neighborhood => &self.neighborhoods,
        }
    }

    pub fn bounds(&self) -> Option<Bounds> {
        self.bounds
    }

    pub fn ids(&self) -> BTreeSet<&str> {
        self.records.iter().map(|r| r.id.as_str()).collect()
    }

    /// Class counts for a label field; errors if any record lacks it.
    pub fn class_counts(&self, field: LabelField) -> Result<BTreeMap<String, usize>> {
        let mut counts = BTreeMap::new();
        let mut missing = 0usize;
        for r in &self.records {
            match field.get(r) {
                Some(l) => *counts.entry(l.to_string()).or_insert(0) += 1,
                None => missing += 1,
            }
        }
        if missing > 0 {
            return Err(Error::invalid(format!(
                "{missing} records missing {field:?} label"
            )));
        }
        Ok(counts)
    }
}

/// File format for corpus ingestion.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    Jsonl,
    Csv,
}

impl std::str::FromStr for CorpusFormat {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "jsonl" => Ok(CorpusFormat::Jsonl),
            "csv" => Ok(CorpusFormat::Csv),
            other => Err(Error::invalid(format!("unknown corpus format `{other}`"))),
        }
    }
}

/// Result of ingestion: the corpus plus how many empty-text rows were
/// dropped.
#[derive(Debug)]
pub struct LoadOutcome {
    pub corpus: Corpus,
    pub dropped_empty: usize,
}

#[derive(Debug, Deserialize)]
struct RawRow {
    id: String,
    text: String,
    username: String,
    created_at: i64,
    #[serde(default, deserialize_with = "de_opt_f64")]
    lon: Option<f64>,
    #[serde(default, deserialize_with = "de_opt_f64")]
    lat: Option<f64>,
    #[serde(default, deserialize_with = "de_opt_string")]
    zipcode: Option<String>,
    #[serde(default, deserialize_with = "de_opt_string")]
    neighborhood: Option<String>,
}

// CSV rows encode "absent" as the empty field.
fn de_opt_f64<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Raw {
        Num(f64),
        Text(String),
        None,
    }
    match Raw::deserialize(d)? {
        Raw::Num(v) => Ok(Some(v)),
        Raw::None => Ok(None),
        Raw::Text(s) if s.trim().is_empty() => Ok(None),
        Raw::Text(s) => s
            .trim()
            .parse()
            .map(Some)
            .map_err(|_| serde::de::Error::custom(format!("bad number `{s}`"))),
    }
}

fn de_opt_string<'de, D: serde::Deserializer<'de>>(
    d: D,
) -> std::result::Result<Option<String>, D::Error> {
    let v: Option<String> = Option::deserialize(d)?;
    Ok(v.filter(|s| !s.trim().is_empty()))
}

fn validate_row(row: RawRow, line: usize) -> Result<TweetRecord> {
    if row.lon.is_some() != row.lat.is_some() {
        return Err(Error::parse(line, "coordinate pair incomplete"));
    }
    if row.created_at <= 0 {
        return Err(Error::parse(line, "created_at must be positive"));
    }
    Ok(TweetRecord {
        id: row.id,
        text: row.text,
        username: row.username,
        created_at: row.created_at,
        lon: row.lon,
        lat: row.lat,
        zipcode: row.zipcode,
        neighborhood: row.neighborhood,
    })
}

/// Load a corpus from JSONL or CSV, dropping (and counting) rows whose
/// text is empty.
pub fn load_corpus(path: &Path, format: CorpusFormat) -> Result<LoadOutcome> {
    let mut records = Vec::new();
    let mut dropped = 0usize;
    match format {
        CorpusFormat::Jsonl => {
            let text = std::fs::read_to_string(path)?;
            for (i, line) in text.lines().enumerate() {
                let lineno = i + 1;
                if line.trim().is_empty() {
                    continue;
                }
                let row: RawRow = serde_json::from_str(line)
                    .map_err(|e| Error::parse(lineno, e.to_string()))?;
                if row.text.trim().is_empty() {
                    dropped += 1;
                    continue;
                }
                records.push(validate_row(row, lineno)?);
            }
        }
        CorpusFormat::Csv => {
            let mut rdr = csv::Reader::from_path(path)?;
            for (i, result) in rdr.deserialize::<RawRow>().enumerate() {
                let lineno = i + 2; // header is line 1
                let row = result.map_err(|e| Error::parse(lineno, e.to_string()))?;
                if row.text.trim().is_empty() {
                    dropped += 1;
                    continue;
                }
                records.push(validate_row(row, lineno)?);
            }
        }
    }
    Ok(LoadOutcome {
        corpus: Corpus::from_records(records)?,
        dropped_empty: dropped,
    })
}

/// Write a corpus as JSONL with one record object per line.
pub fn save_corpus_jsonl(corpus: &Corpus, path: &Path) -> Result<()> {
    use std::io::Write;
    let mut f = std::fs::File::create(path)?;
    for r in corpus.records() {
        serde_json::to_writer(&mut f, r).map_err(|e| Error::invalid(e.to_string()))?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

// -- Synthetic generation --------------------------------------------------

/// Degrees per synthetic grid cell.
pub const CELL_DEG: f64 = 0.2;
/// South-west corner of the synthetic grid.
pub const GRID_ORIGIN: (f64, f64) = (-84.8, 33.2);
// Keep sampled points strictly interior so generator labels and the
// point-in-polygon labeler can never disagree on a shared edge.
const CELL_MARGIN: f64 = 1e-6;

/// Parameters of the planted-signal synthetic corpus.
///
/// Each user gets a home region; each post comes from the home region
/// with probability `locality`, otherwise from a uniformly random
/// region. Post text mixes the chosen region's signature vocabulary
/// with region-independent shared vocabulary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub grid_rows: usize,
    pub grid_cols: usize,
    pub num_users: usize,
    /// Mean posts per user.
    pub posts_per_user: usize,
    /// ρ: probability a post is drawn from the author's home region.
    pub locality: f64,
    /// Signature vocabulary size per region.
    pub signature_words: usize,
    /// Region-independent vocabulary size.
    pub shared_words: usize,
    /// Tokens per post.
    #[serde(default = "default_tokens_per_post")]
    pub tokens_per_post: usize,
    /// Probability each token is a signature word rather than shared.
    #[serde(default = "default_signature_ratio")]
    pub signature_ratio: f64,
    pub time_span_days: u32,
    pub seed: u64,
}

fn default_tokens_per_post() -> usize {
    8
}

fn default_signature_ratio() -> f64 {
    0.5
}

impl SyntheticSpec {
    pub fn num_regions(&self) -> usize {
        self.grid_rows * self.grid_cols
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid_rows == 0
            || self.grid_cols == 0
            || self.num_users == 0
            || self.posts_per_user == 0
            || self.signature_words == 0
            || self.shared_words == 0
            || self.tokens_per_post == 0
            || self.time_span_days == 0
        {
            return Err(Error::config("synthetic spec counts must all be >= 1"));
        }
        if !(0.0..=1.0).contains(&self.locality) {
            return Err(Error::config("locality must be in [0,1]"));
        }
        if !(0.0..=1.0).contains(&self.signature_ratio) {
            return Err(Error::config("signature_ratio must be in [0,1]"));
        }
        Ok(())
    }
}

/// Region label for a grid cell index.
pub fn region_label(idx: usize) -> String {
    format!("r{idx:02}")
}

/// Closed-form ground-truth labeler for the synthetic grid.
pub fn grid_region_of(spec: &SyntheticSpec, p: GeoPoint) -> Option<String> {
    let (x0, y0) = GRID_ORIGIN;
    let col = (p.lon - x0) / CELL_DEG;
    let row = (p.lat - y0) / CELL_DEG;
    if col < 0.0 || row < 0.0 {
        return None;
    }
    let (col, row) = (col.floor() as usize, row.floor() as usize);
    if col >= spec.grid_cols || row >= spec.grid_rows {
        return None;
    }
    Some(region_label(row * spec.grid_cols + col))
}

/// The synthetic grid as a labeled polygon set (one square per region).
pub fn synthetic_regions(spec: &SyntheticSpec, kind: RegionKind) -> RegionSet {
    let (x0, y0) = GRID_ORIGIN;
    let mut regions = Vec::new();
    for row in 0..spec.grid_rows {
        for col in 0..spec.grid_cols {
            let lon0 = x0 + col as f64 * CELL_DEG;
            let lat0 = y0 + row as f64 * CELL_DEG;
            let ring = vec![
                GeoPoint::new(lon0, lat0),
                GeoPoint::new(lon0 + CELL_DEG, lat0),
                GeoPoint::new(lon0 + CELL_DEG, lat0 + CELL_DEG),
                GeoPoint::new(lon0, lat0 + CELL_DEG),
                GeoPoint::new(lon0, lat0),
            ];
            regions.push((
                region_label(row * spec.grid_cols + col),
                Polygon {
                    outer: ring,
                    holes: vec![],
                },
            ));
        }
    }
    RegionSet { kind, regions }
}

/// Generate a deterministic corpus with planted region signal.
pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n_regions = spec.num_regions();
    let (x0, y0) = GRID_ORIGIN;
    let mut records = Vec::new();
    let mut next_id = 0usize;
    for u in 0..spec.num_users {
        let home = rng.gen_range(0..n_regions);
        // Posts per user: uniform around the mean, at least one.
        let lo = (spec.posts_per_user / 2).max(1);
        let hi = (spec.posts_per_user * 3 / 2).max(lo + 1);
        let n_posts = rng.gen_range(lo..hi.max(lo + 1));
        for _ in 0..n_posts {
            let region = if rng.gen_bool(spec.locality) {
                home
            } else {
                rng.gen_range(0..n_regions)
            };
            let mut words = Vec::with_capacity(spec.tokens_per_post);
            for _ in 0..spec.tokens_per_post {
                if rng.gen_bool(spec.signature_ratio) {
                    let w = rng.gen_range(0..spec.signature_words);
                    words.push(format!("sig{region}x{w}"));
                } else {
                    let w = rng.gen_range(0..spec.shared_words);
                    words.push(format!("common{w}"));
                }
            }
            let row = region / spec.grid_cols;
            let col = region % spec.grid_cols;
            let lon = x0
                + col as f64 * CELL_DEG
                + rng.gen_range(CELL_MARGIN..CELL_DEG - CELL_MARGIN);
            let lat = y0
                + row as f64 * CELL_DEG
                + rng.gen_range(CELL_MARGIN..CELL_DEG - CELL_MARGIN);
            let created_at = rng.gen_range(1..=spec.time_span_days as i64 * 86_400);
            let label = region_label(region);
            records.push(TweetRecord {
                id: format!("t{next_id:06}"),
                text: words.join(" "),
                username: format!("u{u:04}"),
                created_at,
                lon: Some(lon),
                lat: Some(lat),
                zipcode: Some(label.clone()),
                neighborhood: Some(label),
            });
            next_id += 1;
        }
    }
    Corpus::from_records(records)
}

// -- Splitting and sampling ------------------------------------------------

/// Disjoint train/valid/test partition of a corpus.
#[derive(Debug, Clone)]
pub struct Splits {
    pub train: Corpus,
    pub valid: Corpus,
    pub test: Corpus,
}

fn take_sizes(n: usize, ratios: (f64, f64, f64)) -> (usize, usize) {
    let train = (n as f64 * ratios.0).round() as usize;
    let valid = ((n as f64 * ratios.1).round() as usize).min(n - train.min(n));
    (train.min(n), valid)
}

/// Deterministic shuffled split, optionally stratified by a label field.
pub fn split(
    corpus: &Corpus,
    ratios: (f64, f64, f64),
    seed: u64,
    stratify: Option<LabelField>,
) -> Result<Splits> {
    let sum = ratios.0 + ratios.1 + ratios.2;
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split ratios sum to {sum}, not 1")));
    }
    if ratios.0 < 0.0 || ratios.1 < 0.0 || ratios.2 < 0.0 {
        return Err(Error::config("split ratios must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();

    let mut groups: Vec<Vec<usize>> = Vec::new();
    match stratify {
        None => groups.push((0..corpus.len()).collect()),
        Some(field) => {
            let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
            let mut missing = 0usize;
            for (i, r) in corpus.records().iter().enumerate() {
                match field.get(r) {
                    Some(l) => by_label.entry(l).or_default().push(i),
                    None => missing += 1,
                }
            }
            if missing > 0 {
                return Err(Error::invalid(format!(
                    "{missing} records missing {field:?} label for stratified split"
                )));
            }
            groups.extend(by_label.into_values());
        }
    }
    for mut idxs in groups {
        idxs.shuffle(&mut rng);
        let (n_train, n_valid) = take_sizes(idxs.len(), ratios);
        for (pos, idx) in idxs.into_iter().enumerate() {
            let rec = corpus.records()[idx].clone();
            if pos < n_train {
                train.push(rec);
            } else if pos < n_train + n_valid {
                valid.push(rec);
            } else {
                test.push(rec);
            }
        }
    }
    Ok(Splits {
        train: Corpus::from_records(train)?,
        valid: Corpus::from_records(valid)?,
        test: Corpus::from_records(test)?,
    })
}

/// Minority-class oversampling controlled by the sample factor `s`:
/// each class count moves from n_c (s=0) toward the majority count
/// n_max (s=1) along round(n_c + s·(n_max − n_c)). Extra records are
/// drawn with replacement and given derived ids.
pub fn oversample(train: &Corpus, field: LabelField, s: f64, seed: u64) -> Result<Corpus> {
    if !(0.0..=1.0).contains(&s) {
        return Err(Error::config("sample factor must be in [0,1]"));
    }
    let counts = train.class_counts(field)?;
    if counts.is_empty() {
        return Err(Error::invalid("oversample on empty class list"));
    }
    let n_max = *counts.values().max().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = train.records().to_vec();
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in train.records().iter().enumerate() {
        by_label.entry(field.get(r).unwrap()).or_default().push(i);
    }
    for (label, idxs) in by_label {
        let n_c = idxs.len();
        let target = (n_c as f64 + s * (n_max - n_c) as f64).round() as usize;
        for k in 0..target.saturating_sub(n_c) {
            let pick = idxs[rng.gen_range(0..idxs.len())];
            let mut dup = train.records()[pick].clone();
            dup.id = format!("{}#dup{}-{}", dup.id, label, k);
            records.push(dup);
        }
    }
    Corpus::from_records(records)
}

/// Balance the validation set to the minimum class count.
pub fn stratified_validation(valid: &Corpus, field: LabelField, seed: u64) -> Result<Corpus> {
    let counts = valid.class_counts(field)?;
    if counts.len() < 2 {
        return Err(Error::invalid(format!(
            "stratified validation needs >= 2 classes, got {}",
            counts.len()
        )));
    }
    let floor = *counts.values().min().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut by_label: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in valid.records().iter().enumerate() {
        by_label.entry(field.get(r).unwrap()).or_default().push(i);
    }
    let mut keep: Vec<usize> = Vec::new();
    for idxs in by_label.values_mut() {
        idxs.shuffle(&mut rng);
        keep.extend(idxs.iter().take(floor));
    }
    keep.sort_unstable();
    let records = keep
        .into_iter()
        .map(|i| valid.records()[i].clone())
        .collect();
    Corpus::from_records(records)
}
