//! Rating ingestion, binarisation against each user's mean rating, per-user
//! splitting, fixed-size preference/dislike histories, and negative-sampled
//! training examples.

use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::ops::Range;
use std::path::Path;

use log::{info, warn};
use rand::seq::{index, SliceRandom};
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::{self, stream};

/// Fraction of malformed lines above which ingestion fails.
pub const MAX_MALFORMED_FRACTION: f64 = 0.01;

#[derive(Clone, Debug, PartialEq)]
pub struct RatingRecord {
    pub user: String,
    pub item: String,
    pub rating: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RatingSchema {
    pub delimiter: char,
    pub min_rating: f64,
    pub max_rating: f64,
}

impl Default for RatingSchema {
    fn default() -> Self {
        RatingSchema {
            delimiter: '\t',
            min_rating: 0.0,
            max_rating: 5.0,
        }
    }
}

impl RatingSchema {
    /// Book-Crossing style 0–10 ratings.
    pub fn ten_point(delimiter: char) -> Self {
        RatingSchema {
            delimiter,
            min_rating: 0.0,
            max_rating: 10.0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParsedRatings {
    pub records: Vec<RatingRecord>,
    pub malformed: usize,
    /// 1-based line numbers of malformed lines.
    pub malformed_lines: Vec<usize>,
}

pub fn parse_ratings(path: &Path, schema: &RatingSchema) -> Result<ParsedRatings> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_ratings_str(&text, schema, path)
}

/// Parses rating lines `user, item, rating[, timestamp]`. Blank lines and lines
/// starting with `#` are skipped.
pub fn parse_ratings_str(
    text: &str,
    schema: &RatingSchema,
    origin: &Path,
) -> Result<ParsedRatings> {
    let mut out = ParsedRatings::default();
    let mut considered = 0;
    for (no, line) in text.lines().enumerate() {
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        considered += 1;
        match parse_rating_line(line, schema) {
            Some(r) => out.records.push(r),
            None => {
                out.malformed += 1;
                out.malformed_lines.push(no + 1);
            }
        }
    }
    if considered > 0 && out.malformed as f64 > MAX_MALFORMED_FRACTION * considered as f64 {
        return Err(Error::Ingestion {
            path: origin.to_path_buf(),
            malformed: out.malformed,
            total: considered,
            lines: out.malformed_lines.iter().take(20).copied().collect(),
        });
    }
    if out.malformed > 0 {
        warn!(
            "{}: skipped {} malformed rating lines",
            origin.display(),
            out.malformed
        );
    }
    Ok(out)
}

fn parse_rating_line(line: &str, schema: &RatingSchema) -> Option<RatingRecord> {
    let cols: Vec<&str> = line.split(schema.delimiter).map(str::trim).collect();
    if !(3..=4).contains(&cols.len()) || cols[0].is_empty() || cols[1].is_empty() {
        return None;
    }
    let rating: f64 = cols[2].parse().ok()?;
    if !rating.is_finite() || rating < schema.min_rating || rating > schema.max_rating {
        return None;
    }
    Some(RatingRecord {
        user: cols[0].to_string(),
        item: cols[1].to_string(),
        rating,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Validation => "validation",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "validation" => Some(Split::Validation),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Interaction {
    pub user: usize,
    pub item: usize,
    pub rating: f64,
    pub label: bool,
    pub split: Split,
}

/// The binarised interaction matrix with split tags.
///
/// Interactions are stored grouped by user; `user_range(u)` indexes the slice
/// that belongs to user `u`.
#[derive(Clone, Debug, PartialEq)]
pub struct InteractionDataset {
    users: Vec<String>,
    items: Vec<String>,
    user_avg: Vec<f64>,
    interactions: Vec<Interaction>,
    ranges: Vec<Range<usize>>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub users: usize,
    pub items: usize,
    pub ratings: usize,
    pub positive: usize,
    pub negative: usize,
    pub sparsity: f64,
    pub extra: Vec<(String, String)>,
}

impl Manifest {
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "users={}\nitems={}\nratings={}\npositive={}\nnegative={}\nsparsity={:.6}\n",
            self.users, self.items, self.ratings, self.positive, self.negative, self.sparsity
        );
        for (k, v) in &self.extra {
            s.push_str(&format!("{k}={v}\n"));
        }
        s
    }
}

pub const DEFAULT_MIN_RECORDS: usize = 10;

/// Labels each rating 1 when it strictly exceeds the user's mean rating and 0
/// otherwise, then drops users with fewer than `min_records` ratings.
///
/// Repeated `(user, item)` pairs keep the last rating. Users and items are
/// indexed in order of first appearance.
pub fn binarize(records: &[RatingRecord], min_records: usize) -> Result<InteractionDataset> {
    if records.is_empty() {
        return Err(Error::Usage("cannot binarize an empty rating list".into()));
    }
    let mut user_index: HashMap<&str, usize> = HashMap::new();
    let mut per_user: Vec<(&str, Vec<(&str, f64)>)> = Vec::new();
    let mut slot: HashMap<(&str, &str), (usize, usize)> = HashMap::new();
    let mut duplicates = 0;
    for r in records {
        let u = *user_index.entry(&r.user).or_insert_with(|| {
            per_user.push((&r.user, Vec::new()));
            per_user.len() - 1
        });
        match slot.get(&(r.user.as_str(), r.item.as_str())) {
            Some(&(uu, pos)) => {
                per_user[uu].1[pos].1 = r.rating;
                duplicates += 1;
            }
            None => {
                per_user[u].1.push((&r.item, r.rating));
                slot.insert((&r.user, &r.item), (u, per_user[u].1.len() - 1));
            }
        }
    }
    if duplicates > 0 {
        warn!("{duplicates} repeated (user, item) ratings; kept the last of each");
    }

    let mut builder = Builder::default();
    let mut dropped = 0;
    for (user, ratings) in per_user {
        if ratings.len() < min_records {
            dropped += 1;
            continue;
        }
        let avg = ratings.iter().map(|(_, r)| r).sum::<f64>() / ratings.len() as f64;
        let labelled = ratings
            .into_iter()
            .map(|(item, rating)| (item.to_string(), rating, rating > avg, Split::Train));
        builder.push_user(user.to_string(), avg, labelled);
    }
    if dropped > 0 {
        info!("dropped {dropped} users with fewer than {min_records} ratings");
    }
    Ok(builder.finish())
}

#[derive(Default)]
struct Builder {
    users: Vec<String>,
    items: Vec<String>,
    item_index: HashMap<String, usize>,
    user_avg: Vec<f64>,
    interactions: Vec<Interaction>,
    ranges: Vec<Range<usize>>,
}

impl Builder {
    fn push_user(
        &mut self,
        user: String,
        avg: f64,
        rows: impl IntoIterator<Item = (String, f64, bool, Split)>,
    ) {
        let u = self.users.len();
        let start = self.interactions.len();
        for (item, rating, label, split) in rows {
            let next = self.items.len();
            let i = *self.item_index.entry(item.clone()).or_insert(next);
            if i == next {
                self.items.push(item);
            }
            self.interactions.push(Interaction {
                user: u,
                item: i,
                rating,
                label,
                split,
            });
        }
        self.users.push(user);
        self.user_avg.push(avg);
        self.ranges.push(start..self.interactions.len());
    }

    fn finish(self) -> InteractionDataset {
        InteractionDataset {
            users: self.users,
            items: self.items,
            user_avg: self.user_avg,
            interactions: self.interactions,
            ranges: self.ranges,
        }
    }
}

impl InteractionDataset {
    pub fn users(&self) -> &[String] {
        &self.users
    }

    pub fn items(&self) -> &[String] {
        &self.items
    }

    pub fn user_count(&self) -> usize {
        self.users.len()
    }

    pub fn item_count(&self) -> usize {
        self.items.len()
    }

    pub fn interactions(&self) -> &[Interaction] {
        &self.interactions
    }

    pub fn user_interactions(&self, user: usize) -> &[Interaction] {
        &self.interactions[self.ranges[user].clone()]
    }

    /// Mean rating of `user` over the full history it was binarised with.
    pub fn user_avg(&self, user: usize) -> f64 {
        self.user_avg[user]
    }

    pub fn user_index(&self, id: &str) -> Option<usize> {
        self.users.iter().position(|u| u == id)
    }

    pub fn item_index(&self, id: &str) -> Option<usize> {
        self.items.iter().position(|i| i == id)
    }

    /// Items of `user` in `split` with the given label, in stored order.
    pub fn items_where(&self, user: usize, split: Split, label: bool) -> Vec<usize> {
        self.user_interactions(user)
            .iter()
            .filter(|x| x.split == split && x.label == label)
            .map(|x| x.item)
            .collect()
    }

    pub fn manifest(&self) -> Manifest {
        let positive = self.interactions.iter().filter(|x| x.label).count();
        let ratings = self.interactions.len();
        let cells = self.users.len() * self.items.len();
        Manifest {
            users: self.users.len(),
            items: self.items.len(),
            ratings,
            positive,
            negative: ratings - positive,
            sparsity: if cells == 0 {
                0.0
            } else {
                ratings as f64 / cells as f64
            },
            extra: Vec::new(),
        }
    }

    /// Keeps only the items for which `keep` holds, then drops users left with
    /// fewer than `min_records` interactions. Labels and user means are not
    /// recomputed.
    pub fn retain_items(
        &self,
        keep: impl Fn(&str) -> bool,
        min_records: usize,
    ) -> InteractionDataset {
        let mut builder = Builder::default();
        for u in 0..self.users.len() {
            let rows: Vec<_> = self
                .user_interactions(u)
                .iter()
                .filter(|x| keep(&self.items[x.item]))
                .map(|x| (self.items[x.item].clone(), x.rating, x.label, x.split))
                .collect();
            if rows.len() >= min_records {
                builder.push_user(self.users[u].clone(), self.user_avg[u], rows);
            }
        }
        builder.finish()
    }

    /// Re-indexes items to follow `order` exactly, so the dataset can share an
    /// item index with a graph or embedding table. Items absent from `order`
    /// are an error.
    pub fn reindex_items(&self, order: &[String]) -> Result<InteractionDataset> {
        let pos: HashMap<&str, usize> = order
            .iter()
            .enumerate()
            .map(|(i, s)| (s.as_str(), i))
            .collect();
        let missing: Vec<String> = self
            .items
            .iter()
            .filter(|i| !pos.contains_key(i.as_str()))
            .cloned()
            .collect();
        if !missing.is_empty() {
            return Err(Error::UnknownIds {
                kind: "item",
                ids: missing,
            });
        }
        let mut out = self.clone();
        out.items = order.to_vec();
        for x in &mut out.interactions {
            x.item = pos[self.items[x.item].as_str()];
        }
        Ok(out)
    }

    /// Users whose test split has only one label class.
    pub fn single_class_test_users(&self) -> Vec<usize> {
        (0..self.users.len())
            .filter(|&u| {
                let test: Vec<bool> = self
                    .user_interactions(u)
                    .iter()
                    .filter(|x| x.split == Split::Test)
                    .map(|x| x.label)
                    .collect();
                !(test.contains(&true) && test.contains(&false))
            })
            .collect()
    }

    /// Tab-separated `user item rating user_avg label split` rows.
    pub fn write_tsv(&self, path: &Path) -> Result<()> {
        let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(file);
        let io = |e| Error::io(path, e);
        writeln!(w, "#user\titem\trating\tuser_avg\tlabel\tsplit").map_err(io)?;
        for x in &self.interactions {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}\t{}",
                self.users[x.user],
                self.items[x.item],
                x.rating,
                self.user_avg[x.user],
                u8::from(x.label),
                x.split.as_str()
            )
            .map_err(io)?;
        }
        w.flush().map_err(io)
    }

    pub fn read_tsv(path: &Path) -> Result<InteractionDataset> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut builder = Builder::default();
        let mut current: Option<(String, f64, Vec<(String, f64, bool, Split)>)> = None;
        let mut seen = std::collections::HashSet::new();
        for (no, line) in text.lines().enumerate() {
            if line.starts_with('#') || line.trim().is_empty() {
                continue;
            }
            let bad = || {
                Error::format(
                    "dataset file",
                    format!("{}:{}: {line}", path.display(), no + 1),
                )
            };
            let cols: Vec<&str> = line.split('\t').collect();
            if cols.len() != 6 {
                return Err(bad());
            }
            let rating: f64 = cols[2].parse().map_err(|_| bad())?;
            let avg: f64 = cols[3].parse().map_err(|_| bad())?;
            let label = match cols[4] {
                "1" => true,
                "0" => false,
                _ => return Err(bad()),
            };
            let split = Split::parse(cols[5]).ok_or_else(bad)?;
            let same_user = current.as_ref().is_some_and(|(u, _, _)| u == cols[0]);
            if !same_user {
                if let Some((u, a, rows)) = current.take() {
                    builder.push_user(u, a, rows);
                }
                if !seen.insert(cols[0].to_string()) {
                    return Err(Error::format(
                        "dataset file",
                        format!("rows of user {} are not contiguous", cols[0]),
                    ));
                }
                current = Some((cols[0].to_string(), avg, Vec::new()));
            }
            if let Some((_, _, rows)) = current.as_mut() {
                rows.push((cols[1].to_string(), rating, label, split));
            }
        }
        if let Some((u, a, rows)) = current.take() {
            builder.push_user(u, a, rows);
        }
        Ok(builder.finish())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub validation_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: 0.7,
            validation_fraction: 0.1,
        }
    }
}

/// Per-user sizes `(train, validation, test)` for a history of `n` records.
pub fn split_sizes(n: usize, cfg: &SplitConfig) -> (usize, usize, usize) {
    let train_side = ((n as f64) * cfg.train_fraction).round() as usize;
    let train_side = train_side.min(n);
    let validation = ((train_side as f64) * cfg.validation_fraction).round() as usize;
    (train_side - validation, validation, n - train_side)
}

/// Randomly tags each user's records train / validation / test.
///
/// When a user has both labels, the test side is repaired to contain both by
/// swapping one record with the train side.
pub fn split(dataset: &InteractionDataset, cfg: &SplitConfig, seed: u64) -> InteractionDataset {
    let mut out = dataset.clone();
    let mut single_class = 0;
    for u in 0..out.users.len() {
        let range = out.ranges[u].clone();
        let n = range.len();
        let (_, validation, test) = split_sizes(n, cfg);
        let mut rng = seed::rng(seed, &[stream::SPLIT, u as u64]);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);

        let labels: Vec<bool> = out.interactions[range.clone()]
            .iter()
            .map(|x| x.label)
            .collect();
        let has_both = labels.contains(&true) && labels.contains(&false);
        if has_both && test > 0 && test < n {
            for wanted in [true, false] {
                let test_has = order[..test].iter().any(|&k| labels[k] == wanted);
                if test_has {
                    continue;
                }
                let donor = (test..n).find(|&p| labels[order[p]] == wanted);
                if let Some(p) = donor {
                    // every test record has the other label here
                    order.swap(0, p);
                }
            }
        }
        let test_labels: Vec<bool> = order[..test].iter().map(|&k| labels[k]).collect();
        if !(test_labels.contains(&true) && test_labels.contains(&false)) {
            single_class += 1;
        }
        for (pos, &k) in order.iter().enumerate() {
            out.interactions[range.start + k].split = if pos < test {
                Split::Test
            } else if pos < test + validation {
                Split::Validation
            } else {
                Split::Train
            };
        }
    }
    if single_class > 0 {
        warn!("{single_class} users have a single-class test split");
    }
    out
}

/// The fixed-size preference and dislike samples that represent one user.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct UserHistory {
    pub user: usize,
    pub prefer: Vec<usize>,
    pub dislike: Vec<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Exclusion {
    NoPreferItems,
    NoDislikeItems,
}

impl fmt::Display for Exclusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Exclusion::NoPreferItems => f.write_str("no preferred items in the train split"),
            Exclusion::NoDislikeItems => f.write_str("no disliked items in the train split"),
        }
    }
}

/// Exactly `size` entries from `pool`: a uniform sample without replacement
/// when the pool is large enough, otherwise every pool entry once plus
/// uniform draws with replacement, shuffled.
pub fn resample<R: Rng + ?Sized>(pool: &[usize], size: usize, rng: &mut R) -> Vec<usize> {
    if pool.is_empty() {
        return Vec::new();
    }
    if pool.len() >= size {
        return index::sample(rng, pool.len(), size)
            .into_iter()
            .map(|k| pool[k])
            .collect();
    }
    let mut out = pool.to_vec();
    while out.len() < size {
        out.push(pool[rng.random_range(0..pool.len())]);
    }
    out.shuffle(rng);
    out
}

/// Train-split history of `user` with exactly `size` prefer and dislike items.
pub fn build_history(
    dataset: &InteractionDataset,
    user: usize,
    size: usize,
    seed: u64,
) -> std::result::Result<UserHistory, Exclusion> {
    let prefer = dataset.items_where(user, Split::Train, true);
    let dislike = dataset.items_where(user, Split::Train, false);
    if prefer.is_empty() {
        return Err(Exclusion::NoPreferItems);
    }
    if dislike.is_empty() {
        return Err(Exclusion::NoDislikeItems);
    }
    Ok(sample_history(user, &prefer, &dislike, size, seed))
}

/// Like [`build_history`] but an empty side stays empty instead of excluding
/// the user. Used for scoring users the trainer skipped.
pub fn build_history_lenient(
    dataset: &InteractionDataset,
    user: usize,
    size: usize,
    seed: u64,
) -> UserHistory {
    let prefer = dataset.items_where(user, Split::Train, true);
    let dislike = dataset.items_where(user, Split::Train, false);
    sample_history(user, &prefer, &dislike, size, seed)
}

fn sample_history(
    user: usize,
    prefer: &[usize],
    dislike: &[usize],
    size: usize,
    seed: u64,
) -> UserHistory {
    let mut rng = seed::rng(seed, &[stream::HISTORY, user as u64]);
    let prefer = resample(prefer, size, &mut rng);
    let dislike = resample(dislike, size, &mut rng);
    UserHistory {
        user,
        prefer,
        dislike,
    }
}

/// Histories for every user; excluded users are logged and left as `None`.
#[derive(Clone, Debug, PartialEq)]
pub struct Histories {
    pub per_user: Vec<Option<UserHistory>>,
    pub excluded: Vec<(usize, Exclusion)>,
}

impl Histories {
    pub fn build(dataset: &InteractionDataset, size: usize, seed: u64) -> Histories {
        let mut per_user = Vec::with_capacity(dataset.user_count());
        let mut excluded = Vec::new();
        for u in 0..dataset.user_count() {
            match build_history(dataset, u, size, seed) {
                Ok(h) => per_user.push(Some(h)),
                Err(why) => {
                    info!("user {} excluded from training: {why}", dataset.users()[u]);
                    excluded.push((u, why));
                    per_user.push(None);
                }
            }
        }
        Histories { per_user, excluded }
    }

    pub fn get(&self, user: usize) -> Option<&UserHistory> {
        self.per_user.get(user).and_then(Option::as_ref)
    }

    pub fn included(&self) -> impl Iterator<Item = &UserHistory> {
        self.per_user.iter().flatten()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TrainExample {
    pub user: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// `count` negatives drawn uniformly from `pool`, with replacement only when
/// the pool is smaller than `count`.
fn draw_negatives<R: Rng + ?Sized>(pool: &[usize], count: usize, rng: &mut R) -> Vec<usize> {
    if pool.len() >= count {
        index::sample(rng, pool.len(), count)
            .into_iter()
            .map(|k| pool[k])
            .collect()
    } else {
        (0..count)
            .map(|_| pool[rng.random_range(0..pool.len())])
            .collect()
    }
}

/// One pass over every train positive of every included user, each paired
/// with `negatives` train dislikes, shuffled.
pub fn epoch_examples(
    dataset: &InteractionDataset,
    histories: &Histories,
    negatives: usize,
    seed: u64,
) -> Result<Vec<TrainExample>> {
    if negatives == 0 {
        return Err(Error::Config(
            "negative sampling rate must be at least 1".into(),
        ));
    }
    let mut examples = Vec::new();
    for h in histories.included() {
        let u = h.user;
        let dislikes = dataset.items_where(u, Split::Train, false);
        let mut rng = seed::rng(seed, &[stream::EXAMPLES, u as u64]);
        for positive in dataset.items_where(u, Split::Train, true) {
            examples.push(TrainExample {
                user: u,
                positive,
                negatives: draw_negatives(&dislikes, negatives, &mut rng),
            });
        }
    }
    let mut rng = seed::rng(seed, &[stream::EXAMPLES, u64::MAX]);
    examples.shuffle(&mut rng);
    Ok(examples)
}

/// [`epoch_examples`] cut into batches of at most `batch_size`.
pub fn sample_training_batches(
    dataset: &InteractionDataset,
    histories: &Histories,
    negatives: usize,
    batch_size: usize,
    seed: u64,
) -> Result<Vec<Vec<TrainExample>>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let examples = epoch_examples(dataset, histories, negatives, seed)?;
    Ok(examples.chunks(batch_size).map(<[_]>::to_vec).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::path::PathBuf;

    fn rec(user: &str, item: &str, rating: f64) -> RatingRecord {
        RatingRecord {
            user: user.into(),
            item: item.into(),
            rating,
        }
    }

    fn user_with(user: &str, ratings: &[f64]) -> Vec<RatingRecord> {
        ratings
            .iter()
            .enumerate()
            .map(|(i, &r)| rec(user, &format!("i{i}"), r))
            .collect()
    }

    #[test]
    fn parse_empty_and_wellformed() {
        let p = PathBuf::from("mem");
        let empty = parse_ratings_str("", &RatingSchema::default(), &p).unwrap();
        assert!(empty.records.is_empty());
        assert_eq!(empty.malformed, 0);

        let text = "u1\ti1\t4\nu1\ti2\t3.5\t978300760\nu2\ti1\t1\n";
        let parsed = parse_ratings_str(text, &RatingSchema::default(), &p).unwrap();
        assert_eq!(parsed.records.len(), 3);
        assert_eq!(parsed.records[1], rec("u1", "i2", 3.5));
        assert_eq!(parsed.records[2].user, "u2");
    }

    #[test]
    fn non_numeric_rating_is_counted() {
        let p = PathBuf::from("mem");
        let mut text = String::new();
        for i in 0..150 {
            text.push_str(&format!("u\ti{i}\t3\n"));
        }
        text.push_str("u\tix\tgreat\n");
        let parsed = parse_ratings_str(&text, &RatingSchema::default(), &p).unwrap();
        assert_eq!(parsed.malformed, 1);
        assert_eq!(parsed.malformed_lines, vec![151]);
        assert_eq!(parsed.records.len(), 150);

        let err =
            parse_ratings_str("u\ti\tx\nu\tj\t1\n", &RatingSchema::default(), &p).unwrap_err();
        assert!(matches!(
            err,
            Error::Ingestion {
                malformed: 1,
                total: 2,
                ..
            }
        ));
    }

    #[test]
    fn out_of_range_rating_is_malformed() {
        let p = PathBuf::from("mem");
        let mut text = String::from("u,a,11\n");
        for i in 0..200 {
            text.push_str(&format!("u,i{i},9\n"));
        }
        let five = RatingSchema {
            delimiter: ',',
            ..Default::default()
        };
        assert!(parse_ratings_str(&text, &five, &p).is_err());
        let ten = parse_ratings_str(&text, &RatingSchema::ten_point(','), &p).unwrap();
        assert_eq!(ten.malformed, 1);
    }

    #[test]
    fn binarize_against_user_mean() {
        let ratings = [5.0, 4.0, 3.0, 2.0, 1.0, 5.0, 4.0, 3.0, 2.0, 1.0];
        let ds = binarize(&user_with("u", &ratings), 10).unwrap();
        assert_eq!(ds.user_avg(0), 3.0);
        for x in ds.interactions() {
            assert_eq!(x.label, x.rating > 3.0, "rating {}", x.rating);
        }
    }

    #[test]
    fn equal_ratings_are_all_dislikes() {
        let ds = binarize(&user_with("u", &[4.0; 12]), 10).unwrap();
        assert!(ds.interactions().iter().all(|x| !x.label));
    }

    #[test]
    fn mean_of_three_point_one() {
        // ten ratings averaging 3.1
        let ratings = [5.0, 4.0, 4.0, 3.0, 3.0, 3.0, 2.0, 2.0, 3.0, 2.0];
        let ds = binarize(&user_with("u", &ratings), 10).unwrap();
        assert!((ds.user_avg(0) - 3.1).abs() < 1e-12);
        let liked: Vec<f64> = ds
            .interactions()
            .iter()
            .filter(|x| x.label)
            .map(|x| x.rating)
            .collect();
        assert_eq!(liked, vec![5.0, 4.0, 4.0]);
    }

    #[test]
    fn short_histories_are_dropped() {
        let mut recs = user_with("keep", &[1.0; 10]);
        recs.extend(user_with("drop", &[1.0; 9]));
        let ds = binarize(&recs, 10).unwrap();
        assert_eq!(ds.users(), &["keep".to_string()]);
    }

    fn ten_record_dataset() -> InteractionDataset {
        let ratings = [5.0, 4.0, 3.0, 2.0, 1.0, 5.0, 4.0, 3.0, 2.0, 1.0];
        binarize(&user_with("u", &ratings), 10).unwrap()
    }

    #[test]
    fn split_of_ten_records() {
        assert_eq!(split_sizes(10, &SplitConfig::default()), (6, 1, 3));
        let ds = split(&ten_record_dataset(), &SplitConfig::default(), 4);
        let count = |s| ds.interactions().iter().filter(|x| x.split == s).count();
        assert_eq!(
            (
                count(Split::Train),
                count(Split::Validation),
                count(Split::Test)
            ),
            (6, 1, 3)
        );
        assert!(ds.single_class_test_users().is_empty());
        assert_eq!(ds, split(&ten_record_dataset(), &SplitConfig::default(), 4));
    }

    #[test]
    fn histories_have_exact_size() {
        let ds = split(&ten_record_dataset(), &SplitConfig::default(), 1);
        // a user needs both sides in train for a strict history
        match build_history(&ds, 0, 10, 3) {
            Ok(h) => {
                assert_eq!(h.prefer.len(), 10);
                assert_eq!(h.dislike.len(), 10);
            }
            Err(e) => panic!("{e}"),
        }
    }

    #[test]
    fn user_without_dislikes_is_excluded() {
        let mut ratings = vec![5.0; 10];
        ratings.push(0.0);
        // mean below 5 so the ten fives are liked and the zero is the only dislike
        let ds = binarize(&user_with("u", &ratings), 10).unwrap();
        let cfg = SplitConfig {
            train_fraction: 0.7,
            validation_fraction: 0.0,
        };
        let ds = split(&ds, &cfg, 0);
        let only_zero_in_test = ds
            .user_interactions(0)
            .iter()
            .any(|x| !x.label && x.split == Split::Test);
        assert!(
            only_zero_in_test,
            "repair should move the dislike into test"
        );
        assert_eq!(build_history(&ds, 0, 10, 0), Err(Exclusion::NoDislikeItems));
        let h = Histories::build(&ds, 10, 0);
        assert_eq!(h.excluded, vec![(0, Exclusion::NoDislikeItems)]);
    }

    #[test]
    fn resample_rules() {
        let mut rng = seed::rng(0, &[]);
        let pool: Vec<usize> = (0..15).collect();
        let mut s = resample(&pool, 10, &mut rng);
        s.sort_unstable();
        s.dedup();
        assert_eq!(s.len(), 10);

        let small = [3, 7, 9, 11];
        let s = resample(&small, 10, &mut rng);
        assert_eq!(s.len(), 10);
        for x in small {
            assert!(s.contains(&x));
        }
        assert!(s.iter().all(|x| small.contains(x)));
    }

    #[test]
    fn single_dislike_is_repeated() {
        let mut rng = seed::rng(0, &[]);
        assert_eq!(draw_negatives(&[42], 4, &mut rng), vec![42; 4]);
        let mut d = draw_negatives(&[1, 2, 3, 4, 5], 4, &mut rng);
        d.sort_unstable();
        d.dedup();
        assert_eq!(d.len(), 4);
    }

    #[test]
    fn manifest_counts() {
        let ds = ten_record_dataset();
        let m = ds.manifest();
        assert_eq!(
            (m.users, m.items, m.ratings, m.positive, m.negative),
            (1, 10, 10, 4, 6)
        );
        assert!((m.sparsity - 1.0).abs() < 1e-12);
        assert!(m.to_text().contains("positive=4\n"));
    }

    #[test]
    fn tsv_round_trip() {
        let ds = split(&ten_record_dataset(), &SplitConfig::default(), 2);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.tsv");
        ds.write_tsv(&path).unwrap();
        assert_eq!(InteractionDataset::read_tsv(&path).unwrap(), ds);
    }
}
