//! Rating ingestion, implicit-feedback conversion and per-user train/test splits.
//!
//! Ratings are read from delimited text (MovieLens `ratings.csv` or the
//! tab-separated `u.data` layout), users with too few ratings are dropped,
//! and each remaining rating becomes an [`Interaction`] carrying a feedback
//! weight of `+1`/`-1` and a binary relevance label.

use std::collections::hash_map::Entry;
use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// Minimum number of ratings a user needs to survive filtering.
pub const DEFAULT_MIN_COUNT: usize = 10;
/// Ratings at or above this value are relevant (`w = +1`, `y = 1`).
pub const DEFAULT_THRESHOLD: f64 = 4.0;

/// One row of a rating file.
#[derive(Debug, Clone, PartialEq)]
pub struct RawRating {
    pub user: String,
    pub item: String,
    pub rating: f64,
    pub timestamp: Option<i64>,
    /// 1-based source line, 0 when the rating did not come from a file.
    pub line: u64,
}

impl RawRating {
    pub fn new(user: impl Into<String>, item: impl Into<String>, rating: f64) -> Self {
        RawRating {
            user: user.into(),
            item: item.into(),
            rating,
            timestamp: None,
            line: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Delimiter {
    Auto,
    Comma,
    Tab,
}

impl Delimiter {
    fn byte(self) -> u8 {
        match self {
            Delimiter::Tab => b'\t',
            _ => b',',
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeaderMode {
    /// A first row whose rating column is not numeric is treated as a header.
    Auto,
    Present,
    Absent,
}

/// Column schema of a rating file: `user, item, rating[, timestamp]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RatingFormat {
    pub delimiter: Delimiter,
    pub header: HeaderMode,
    pub min_rating: f64,
    pub max_rating: f64,
}

impl Default for RatingFormat {
    fn default() -> Self {
        RatingFormat {
            delimiter: Delimiter::Auto,
            header: HeaderMode::Auto,
            min_rating: 0.5,
            max_rating: 5.0,
        }
    }
}

/// Layout detected while reading, reused when splits are written back out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Layout {
    pub delimiter: Delimiter,
    pub has_header: bool,
}

impl Default for Layout {
    fn default() -> Self {
        Layout {
            delimiter: Delimiter::Comma,
            has_header: true,
        }
    }
}

pub fn load_ratings(path: impl AsRef<Path>, format: &RatingFormat) -> Result<Vec<RawRating>> {
    load_ratings_with_layout(path, format).map(|(ratings, _)| ratings)
}

pub fn load_ratings_with_layout(
    path: impl AsRef<Path>,
    format: &RatingFormat,
) -> Result<(Vec<RawRating>, Layout)> {
    let path = path.as_ref();
    let mut text = String::new();
    File::open(path)
        .and_then(|mut f| f.read_to_string(&mut text))
        .map_err(|e| Error::io(path, e))?;
    parse_ratings(&text, format)
}

/// SHA-256 of a file's bytes, hex encoded.
pub fn file_sha256(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let mut file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut hasher = Sha256::new();
    std::io::copy(&mut file, &mut hasher).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(hasher.finalize()))
}

/// Parses rating rows from text. Duplicate (user, item) pairs are rejected.
pub fn parse_ratings(text: &str, format: &RatingFormat) -> Result<(Vec<RawRating>, Layout)> {
    let delimiter = match format.delimiter {
        Delimiter::Auto => {
            let first = text.lines().find(|l| !l.trim().is_empty()).unwrap_or("");
            if first.contains('\t') {
                Delimiter::Tab
            } else {
                Delimiter::Comma
            }
        }
        d => d,
    };

    let mut reader = csv::ReaderBuilder::new()
        .delimiter(delimiter.byte())
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(text.as_bytes());

    let mut ratings = Vec::new();
    let mut seen: HashMap<(String, String), u64> = HashMap::new();
    let mut has_header = false;
    let mut first = true;

    for record in reader.records() {
        let record = record.map_err(|e| Error::MalformedRow {
            line: e.position().map_or(0, |p| p.line()),
            reason: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.iter().all(|f| f.is_empty()) {
            continue;
        }

        if first {
            first = false;
            let header = match format.header {
                HeaderMode::Present => true,
                HeaderMode::Absent => false,
                HeaderMode::Auto => record
                    .get(2)
                    .is_none_or(|field| field.parse::<f64>().is_err()),
            };
            if header {
                has_header = true;
                continue;
            }
        }

        if record.len() < 3 || record.len() > 4 {
            return Err(Error::MalformedRow {
                line,
                reason: format!("expected 3 or 4 columns, found {}", record.len()),
            });
        }
        let user = record[0].to_string();
        let item = record[1].to_string();
        if user.is_empty() || item.is_empty() {
            return Err(Error::MalformedRow {
                line,
                reason: "empty user or item id".into(),
            });
        }
        let rating: f64 = record[2].parse().map_err(|_| Error::MalformedRow {
            line,
            reason: format!("rating {:?} is not a number", &record[2]),
        })?;
        if !rating.is_finite() || rating < format.min_rating || rating > format.max_rating {
            return Err(Error::RatingOutOfRange {
                line,
                rating,
                min: format.min_rating,
                max: format.max_rating,
            });
        }
        let timestamp = match record.get(3) {
            Some(ts) if !ts.is_empty() => Some(ts.parse::<i64>().map_err(|_| Error::MalformedRow {
                line,
                reason: format!("timestamp {ts:?} is not an integer"),
            })?),
            _ => None,
        };

        match seen.entry((user.clone(), item.clone())) {
            Entry::Occupied(e) => {
                return Err(Error::DuplicatePair {
                    user,
                    item,
                    first_line: *e.get(),
                    second_line: line,
                })
            }
            Entry::Vacant(e) => {
                e.insert(line);
            }
        }

        ratings.push(RawRating {
            user,
            item,
            rating,
            timestamp,
            line,
        });
    }

    Ok((
        ratings,
        Layout {
            delimiter,
            has_header,
        },
    ))
}

/// Writes ratings as `user,item,rating[,timestamp]` rows.
pub fn write_ratings(path: impl AsRef<Path>, ratings: &[RawRating], layout: Layout) -> Result<()> {
    let path = path.as_ref();
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let sep = match layout.delimiter {
        Delimiter::Tab => '\t',
        _ => ',',
    };
    let write = |out: &mut BufWriter<File>| -> std::io::Result<()> {
        if layout.has_header {
            writeln!(out, "userId{sep}movieId{sep}rating{sep}timestamp")?;
        }
        for r in ratings {
            match r.timestamp {
                Some(ts) => writeln!(out, "{}{sep}{}{sep}{}{sep}{}", r.user, r.item, r.rating, ts)?,
                None => writeln!(out, "{}{sep}{}{sep}{}", r.user, r.item, r.rating)?,
            }
        }
        out.flush()
    };
    write(&mut out).map_err(|e| Error::io(path, e))
}

/// Keeps only ratings of users with at least `min_count` ratings, preserving order.
pub fn filter_sparse_users(ratings: &[RawRating], min_count: usize) -> Vec<RawRating> {
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in ratings {
        *counts.entry(r.user.as_str()).or_default() += 1;
    }
    ratings
        .iter()
        .filter(|r| counts[r.user.as_str()] >= min_count)
        .cloned()
        .collect()
}

/// Bidirectional map between raw ids and dense indices.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    ids: Vec<String>,
    index: HashMap<String, usize>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_ids(ids: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(ids.len());
        for (i, id) in ids.iter().enumerate() {
            if index.insert(id.clone(), i).is_some() {
                return Err(Error::InvalidConfig(format!("duplicate id {id:?} in id map")));
            }
        }
        Ok(IdMap { ids, index })
    }

    /// Returns the index of `id`, assigning the next free one if unseen.
    pub fn intern(&mut self, id: &str) -> usize {
        if let Some(&i) = self.index.get(id) {
            return i;
        }
        let i = self.ids.len();
        self.ids.push(id.to_string());
        self.index.insert(id.to_string(), i);
        i
    }

    pub fn get(&self, id: &str) -> Option<usize> {
        self.index.get(id).copied()
    }

    pub fn id(&self, index: usize) -> &str {
        &self.ids[index]
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// SHA-256 over the ids in index order, hex encoded.
    pub fn digest(&self) -> String {
        let mut hasher = Sha256::new();
        for id in &self.ids {
            hasher.update((id.len() as u64).to_le_bytes());
            hasher.update(id.as_bytes());
        }
        hex::encode(hasher.finalize())
    }
}

/// An observed (user, item) pair after implicit conversion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interaction {
    pub item: usize,
    pub rating: f64,
    /// Feedback weight `w`.
    pub weight: f64,
    /// Binary relevance `y`.
    pub relevant: bool,
    pub timestamp: Option<i64>,
}

impl Interaction {
    pub fn new(item: usize, weight: f64, relevant: bool) -> Self {
        Interaction {
            item,
            rating: if relevant { 5.0 } else { 1.0 },
            weight,
            relevant,
            timestamp: None,
        }
    }

    pub fn y(&self) -> f64 {
        if self.relevant {
            1.0
        } else {
            0.0
        }
    }
}

/// How ratings map to `(w, y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ImplicitConversion {
    pub threshold: f64,
}

impl Default for ImplicitConversion {
    fn default() -> Self {
        ImplicitConversion {
            threshold: DEFAULT_THRESHOLD,
        }
    }
}

impl ImplicitConversion {
    pub fn convert(&self, item: usize, rating: f64, timestamp: Option<i64>) -> Interaction {
        let relevant = rating >= self.threshold;
        Interaction {
            item,
            rating,
            weight: if relevant { 1.0 } else { -1.0 },
            relevant,
            timestamp,
        }
    }
}

/// Per-user interaction lists, each sorted by item index.
#[derive(Debug, Clone, PartialEq)]
pub struct InteractionDataset {
    users: IdMap,
    items: IdMap,
    per_user: Vec<Vec<Interaction>>,
}

impl InteractionDataset {
    /// Builds a dataset from dense per-user lists; the id maps must cover every index.
    pub fn new(users: IdMap, items: IdMap, mut per_user: Vec<Vec<Interaction>>) -> Result<Self> {
        if per_user.len() != users.len() {
            return Err(Error::InvalidConfig(format!(
                "{} user lists for {} user ids",
                per_user.len(),
                users.len()
            )));
        }
        for (u, list) in per_user.iter_mut().enumerate() {
            list.sort_by_key(|x| x.item);
            for pair in list.windows(2) {
                if pair[0].item == pair[1].item {
                    return Err(Error::DuplicatePair {
                        user: users.id(u).to_string(),
                        item: items.id(pair[0].item).to_string(),
                        first_line: 0,
                        second_line: 0,
                    });
                }
            }
            if let Some(last) = list.last() {
                if last.item >= items.len() {
                    return Err(Error::IndexOutOfRange {
                        what: "item",
                        index: last.item,
                        bound: items.len(),
                    });
                }
            }
        }
        Ok(InteractionDataset {
            users,
            items,
            per_user,
        })
    }

    /// Synthetic dataset with ids equal to the decimal dense indices.
    pub fn from_lists(n_items: usize, per_user: Vec<Vec<Interaction>>) -> Result<Self> {
        let users = IdMap::from_ids((0..per_user.len()).map(|u| u.to_string()).collect())?;
        let items = IdMap::from_ids((0..n_items).map(|i| i.to_string()).collect())?;
        Self::new(users, items, per_user)
    }

    pub fn n_users(&self) -> usize {
        self.per_user.len()
    }

    pub fn n_items(&self) -> usize {
        self.items.len()
    }

    pub fn n_interactions(&self) -> usize {
        self.per_user.iter().map(Vec::len).sum()
    }

    pub fn user(&self, u: usize) -> &[Interaction] {
        &self.per_user[u]
    }

    pub fn per_user(&self) -> &[Vec<Interaction>] {
        &self.per_user
    }

    pub fn user_ids(&self) -> &IdMap {
        &self.users
    }

    pub fn item_ids(&self) -> &IdMap {
        &self.items
    }

    /// Users that have at least one interaction.
    pub fn active_users(&self) -> Vec<usize> {
        (0..self.n_users())
            .filter(|&u| !self.per_user[u].is_empty())
            .collect()
    }

    /// Re-emits interactions as raw ratings, users then items in index order.
    pub fn to_raw_ratings(&self) -> Vec<RawRating> {
        let mut out = Vec::with_capacity(self.n_interactions());
        for (u, list) in self.per_user.iter().enumerate() {
            for x in list {
                out.push(RawRating {
                    user: self.users.id(u).to_string(),
                    item: self.items.id(x.item).to_string(),
                    rating: x.rating,
                    timestamp: x.timestamp,
                    line: 0,
                });
            }
        }
        out
    }
}

/// Converts ratings to implicit feedback; dense indices follow first appearance.
pub fn to_implicit(ratings: &[RawRating], threshold: f64) -> Result<InteractionDataset> {
    let mut users = IdMap::new();
    let mut items = IdMap::new();
    for r in ratings {
        users.intern(&r.user);
        items.intern(&r.item);
    }
    to_implicit_with_maps(ratings, users, items, ImplicitConversion { threshold })
}

/// Converts ratings against existing id maps. Unknown ids are an item-space mismatch.
pub fn to_implicit_with_maps(
    ratings: &[RawRating],
    users: IdMap,
    items: IdMap,
    conversion: ImplicitConversion,
) -> Result<InteractionDataset> {
    let mut per_user: Vec<Vec<Interaction>> = vec![Vec::new(); users.len()];
    let mut seen: HashMap<(usize, usize), u64> = HashMap::new();
    for r in ratings {
        let u = users
            .get(&r.user)
            .ok_or_else(|| Error::ItemSpaceMismatch(format!("unknown user id {:?}", r.user)))?;
        let i = items
            .get(&r.item)
            .ok_or_else(|| Error::ItemSpaceMismatch(format!("unknown item id {:?}", r.item)))?;
        if let Some(&first_line) = seen.get(&(u, i)) {
            return Err(Error::DuplicatePair {
                user: r.user.clone(),
                item: r.item.clone(),
                first_line,
                second_line: r.line,
            });
        }
        seen.insert((u, i), r.line);
        per_user[u].push(conversion.convert(i, r.rating, r.timestamp));
    }
    InteractionDataset::new(users, items, per_user)
}

/// A per-user random half split sharing the original id maps.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitPair {
    pub train: InteractionDataset,
    pub test: InteractionDataset,
    pub seed: u64,
}

/// Splits every user's interactions into disjoint random halves.
///
/// The training half receives `ceil(len / 2)` interactions. Users with no
/// interactions are carried through empty; users with exactly one cannot be
/// split and are an error.
pub fn split_half(dataset: &InteractionDataset, seed: u64) -> Result<SplitPair> {
    split_impl(dataset, seed, true)
}

/// Like [`split_half`], but users with a single interaction keep it in the
/// training half instead of failing. Used to carve validation sets out of a
/// training half.
pub fn split_half_lenient(dataset: &InteractionDataset, seed: u64) -> SplitPair {
    split_impl(dataset, seed, false).expect("lenient split cannot fail")
}

fn split_impl(dataset: &InteractionDataset, seed: u64, strict: bool) -> Result<SplitPair> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train = Vec::with_capacity(dataset.n_users());
    let mut test = Vec::with_capacity(dataset.n_users());
    for (u, list) in dataset.per_user.iter().enumerate() {
        if list.len() == 1 {
            if strict {
                return Err(Error::TooFewInteractions {
                    user: dataset.users.id(u).to_string(),
                    count: list.len(),
                    required: 2,
                });
            }
            train.push(list.clone());
            test.push(Vec::new());
            continue;
        }
        let mut shuffled = list.clone();
        shuffled.shuffle(&mut rng);
        let cut = list.len().div_ceil(2);
        let mut tr = shuffled[..cut].to_vec();
        let mut te = shuffled[cut..].to_vec();
        tr.sort_by_key(|x| x.item);
        te.sort_by_key(|x| x.item);
        train.push(tr);
        test.push(te);
    }
    Ok(SplitPair {
        train: InteractionDataset {
            users: dataset.users.clone(),
            items: dataset.items.clone(),
            per_user: train,
        },
        test: InteractionDataset {
            users: dataset.users.clone(),
            items: dataset.items.clone(),
            per_user: test,
        },
        seed,
    })
}
