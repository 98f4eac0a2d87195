//! Interaction logs: loading, leave-one-out splits, batching, synthetic
//! periodic data, and length buckets.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::IdTensor;

/// Minimum raw sequence length: one training item plus validation and test
/// targets.
pub const MIN_SEQUENCE_LEN: usize = 3;

/// Chronological item sequences keyed by user id. Items are `1..=item_count`;
/// 0 is reserved for padding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct InteractionDataset {
    pub name: String,
    pub item_count: usize,
    pub user_sequences: BTreeMap<u64, Vec<usize>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LoadReport {
    pub interactions: usize,
    pub dropped_users: usize,
}

impl InteractionDataset {
    pub fn new(name: impl Into<String>, item_count: usize, user_sequences: BTreeMap<u64, Vec<usize>>) -> Result<Self> {
        let ds = Self {
            name: name.into(),
            item_count,
            user_sequences,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        for (user, seq) in &self.user_sequences {
            if seq.len() < MIN_SEQUENCE_LEN {
                return Err(Error::Validation(format!(
                    "user {user} has {} interactions, need {MIN_SEQUENCE_LEN}",
                    seq.len()
                )));
            }
            if let Some(&bad) = seq.iter().find(|&&i| i == 0 || i > self.item_count) {
                return Err(Error::Validation(format!(
                    "user {user}: item {bad} outside 1..={}",
                    self.item_count
                )));
            }
        }
        Ok(())
    }

    pub fn user_count(&self) -> usize {
        self.user_sequences.len()
    }

    pub fn interaction_count(&self) -> usize {
        self.user_sequences.values().map(Vec::len).sum()
    }

    /// One `user item` line per interaction, users ascending.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (user, seq) in &self.user_sequences {
            for item in seq {
                writeln!(out, "{user} {item}").expect("write to string");
            }
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn split(&self, kind: SplitKind) -> SplitView<'_> {
        SplitView { dataset: self, kind }
    }
}

/// Reads a whitespace-separated `user_id item_id` log. Per-user order is
/// file order. Users with fewer than three interactions are dropped and
/// counted in the report.
pub fn load_interactions(path: &Path) -> Result<(InteractionDataset, LoadReport)> {
    let text = std::fs::read_to_string(path)?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_interactions(&text, &name, path)
}

pub(crate) fn parse_interactions(text: &str, name: &str, path: &Path) -> Result<(InteractionDataset, LoadReport)> {
    let parse_err = |line: usize, message: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut sequences: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    let mut interactions = 0;
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() {
            continue;
        }
        let mut fields = line.split_whitespace();
        let (Some(u), Some(i), None) = (fields.next(), fields.next(), fields.next()) else {
            return Err(parse_err(n + 1, format!("expected `user item`, got `{line}`")));
        };
        let user: u64 = u
            .parse()
            .map_err(|_| parse_err(n + 1, format!("bad user id `{u}`")))?;
        let item: usize = i
            .parse()
            .map_err(|_| parse_err(n + 1, format!("bad item id `{i}`")))?;
        if item == 0 {
            return Err(parse_err(n + 1, "item id 0 is reserved for padding".into()));
        }
        sequences.entry(user).or_default().push(item);
        interactions += 1;
    }
    if interactions == 0 {
        return Err(Error::Empty(format!("{} contains no interactions", path.display())));
    }
    let before = sequences.len();
    sequences.retain(|_, s| s.len() >= MIN_SEQUENCE_LEN);
    let dropped_users = before - sequences.len();
    let item_count = sequences.values().flatten().copied().max().unwrap_or(0);
    if sequences.is_empty() {
        return Err(Error::Empty("no user has at least three interactions".into()));
    }
    let ds = InteractionDataset::new(name, item_count, sequences)?;
    Ok((
        ds,
        LoadReport {
            interactions,
            dropped_users,
        },
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitKind {
    Train,
    Valid,
    Test,
}

/// Leave-one-out view over a dataset. Each user contributes a prefix of
/// their sequence whose final item is the view's target: the last item for
/// test, the second-to-last for validation. The train prefix stops before
/// the validation target.
#[derive(Debug, Clone, Copy)]
pub struct SplitView<'a> {
    pub dataset: &'a InteractionDataset,
    pub kind: SplitKind,
}

impl<'a> SplitView<'a> {
    pub fn sequence(&self, seq: &'a [usize]) -> &'a [usize] {
        let n = seq.len();
        match self.kind {
            SplitKind::Train => &seq[..n - 2],
            SplitKind::Valid => &seq[..n - 1],
            SplitKind::Test => seq,
        }
    }

    /// `(user, prefix)` pairs in ascending user order.
    pub fn sequences(&self) -> impl Iterator<Item = (u64, &'a [usize])> + '_ {
        self.dataset
            .user_sequences
            .iter()
            .map(move |(&u, s)| (u, self.sequence(s)))
    }

    /// Held-out `(history, target)` for evaluation views.
    pub fn history_and_target(&self, seq: &'a [usize]) -> (&'a [usize], usize) {
        let prefix = self.sequence(seq);
        let (last, history) = prefix.split_last().expect("non-empty prefix");
        (history, *last)
    }

    pub fn len(&self) -> usize {
        self.dataset.user_count()
    }

    pub fn is_empty(&self) -> bool {
        self.dataset.user_sequences.is_empty()
    }
}

/// Left-padded id batch. Row `b`, slot `t` predicts `target_ids[b][t]` from
/// `input_ids[b][..=t]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub input_ids: IdTensor,
    pub target_ids: IdTensor,
    pub valid_mask: Vec<bool>,
    pub user_ids: Vec<u64>,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.user_ids.len()
    }

    pub fn valid_count(&self) -> usize {
        self.valid_mask.iter().filter(|&&m| m).count()
    }

    /// Builds a batch from item sequences: the most recent `max_len + 1`
    /// items of each give `max_len` input/target pairs, right-aligned.
    pub fn from_sequences(rows: &[(u64, &[usize])], max_len: usize) -> Self {
        let b = rows.len();
        let mut input = vec![0; b * max_len];
        let mut target = vec![0; b * max_len];
        let mut mask = vec![false; b * max_len];
        for (r, (_, seq)) in rows.iter().enumerate() {
            let recent = &seq[seq.len().saturating_sub(max_len + 1)..];
            if recent.len() < 2 {
                continue;
            }
            let pairs = recent.len() - 1;
            let start = max_len - pairs;
            for p in 0..pairs {
                let slot = r * max_len + start + p;
                input[slot] = recent[p];
                target[slot] = recent[p + 1];
                mask[slot] = true;
            }
        }
        Self {
            input_ids: IdTensor::new(vec![b, max_len], input).expect("consistent"),
            target_ids: IdTensor::new(vec![b, max_len], target).expect("consistent"),
            valid_mask: mask,
            user_ids: rows.iter().map(|(u, _)| *u).collect(),
        }
    }
}

/// Splits a view into batches of at most `batch_size` users. Without
/// shuffling users appear in ascending id order; the last batch may be short.
pub fn make_batches<R: Rng + ?Sized>(
    view: &SplitView<'_>,
    batch_size: usize,
    max_len: usize,
    shuffle: bool,
    rng: &mut R,
) -> Result<Vec<Batch>> {
    if batch_size == 0 || max_len == 0 {
        return Err(Error::Config("batch size and max_len must be positive".into()));
    }
    let mut rows: Vec<(u64, &[usize])> = view.sequences().collect();
    if shuffle {
        rows.shuffle(rng);
    }
    Ok(rows
        .chunks(batch_size)
        .map(|chunk| Batch::from_sequences(chunk, max_len))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub cycle_count: usize,
    pub users: usize,
    pub seq_len: usize,
    pub noise_rate: f64,
    pub item_count: usize,
}

/// Generated dataset together with the ground truth used to build it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub dataset: InteractionDataset,
    pub cycles: Vec<Vec<usize>>,
    /// Index into `cycles` per user.
    pub user_cycle: BTreeMap<u64, usize>,
    /// Cycle position of each user's first interaction.
    pub user_phase: BTreeMap<u64, usize>,
    /// Number of positions that were replaced by a random item.
    pub corrupted: usize,
}

impl SyntheticData {
    /// Uncorrupted item a user would see at position `pos`.
    pub fn clean_item(&self, user: u64, pos: usize) -> usize {
        let cycle = &self.cycles[self.user_cycle[&user]];
        cycle[(self.user_phase[&user] + pos) % cycle.len()]
    }
}

/// Periodic users: `cycle_count` disjoint cycles of length 3 to 5 are drawn
/// over consecutive item ids, each user follows one cycle (round-robin) from
/// a random phase, and each position is replaced by a uniformly random item
/// with probability `noise_rate`.
pub fn generate_synthetic<R: Rng + ?Sized>(spec: &SyntheticSpec, rng: &mut R) -> Result<SyntheticData> {
    if spec.cycle_count == 0 {
        return Err(Error::Config("need at least one cycle".into()));
    }
    let mut next = 1;
    let mut cycles = Vec::with_capacity(spec.cycle_count);
    for _ in 0..spec.cycle_count {
        let period = rng.gen_range(3..=5);
        cycles.push((next..next + period).collect());
        next += period;
    }
    if next - 1 > spec.item_count {
        return Err(Error::Config(format!(
            "{} cycles need {} items but only {} are available",
            spec.cycle_count,
            next - 1,
            spec.item_count
        )));
    }
    generate_from_cycles(cycles, spec.users, spec.seq_len, spec.noise_rate, spec.item_count, rng)
}

/// [`generate_synthetic`] with caller-supplied cycles.
pub fn generate_from_cycles<R: Rng + ?Sized>(
    cycles: Vec<Vec<usize>>,
    users: usize,
    seq_len: usize,
    noise_rate: f64,
    item_count: usize,
    rng: &mut R,
) -> Result<SyntheticData> {
    if !(0.0..1.0).contains(&noise_rate) {
        return Err(Error::Config(format!("noise rate {noise_rate} outside [0, 1)")));
    }
    if seq_len < MIN_SEQUENCE_LEN || users == 0 || cycles.is_empty() {
        return Err(Error::Config(
            "need at least one user, one cycle, and sequences of length 3".into(),
        ));
    }
    if cycles.iter().flatten().any(|&i| i == 0 || i > item_count) || cycles.iter().any(Vec::is_empty) {
        return Err(Error::Config(format!("cycle items must lie in 1..={item_count}")));
    }
    let mut sequences = BTreeMap::new();
    let mut user_cycle = BTreeMap::new();
    let mut user_phase = BTreeMap::new();
    let mut corrupted = 0;
    for u in 0..users {
        let user = u as u64 + 1;
        let c = u % cycles.len();
        let cycle = &cycles[c];
        let phase = rng.gen_range(0..cycle.len());
        let seq = (0..seq_len)
            .map(|pos| {
                if noise_rate > 0.0 && rng.gen::<f64>() < noise_rate {
                    corrupted += 1;
                    rng.gen_range(1..=item_count)
                } else {
                    cycle[(phase + pos) % cycle.len()]
                }
            })
            .collect();
        sequences.insert(user, seq);
        user_cycle.insert(user, c);
        user_phase.insert(user, phase);
    }
    Ok(SyntheticData {
        dataset: InteractionDataset::new("synthetic", item_count, sequences)?,
        cycles,
        user_cycle,
        user_phase,
        corrupted,
    })
}

/// Users grouped by raw sequence length.
#[derive(Debug, Clone, PartialEq)]
pub struct LengthBucket {
    /// Inclusive length range.
    pub range: (usize, usize),
    pub users: Vec<u64>,
    /// Fraction of all users that fall in this bucket.
    pub share: f64,
}

impl LengthBucket {
    pub fn label(&self) -> String {
        format!("[{},{}]", self.range.0, self.range.1)
    }
}

/// Partitions users into the given inclusive length ranges. Users outside
/// every range are left out; empty buckets are kept.
pub fn sparsity_buckets(ds: &InteractionDataset, bounds: &[(usize, usize)]) -> Result<Vec<LengthBucket>> {
    for (i, &(lo, hi)) in bounds.iter().enumerate() {
        if lo > hi {
            return Err(Error::Config(format!("bucket [{lo},{hi}] is empty")));
        }
        for &(lo2, hi2) in &bounds[i + 1..] {
            if lo <= hi2 && lo2 <= hi {
                return Err(Error::Config(format!(
                    "buckets [{lo},{hi}] and [{lo2},{hi2}] overlap"
                )));
            }
        }
    }
    let total = ds.user_count().max(1) as f64;
    Ok(bounds
        .iter()
        .map(|&(lo, hi)| {
            let users: Vec<u64> = ds
                .user_sequences
                .iter()
                .filter(|(_, s)| (lo..=hi).contains(&s.len()))
                .map(|(&u, _)| u)
                .collect();
            LengthBucket {
                range: (lo, hi),
                share: users.len() as f64 / total,
                users,
            }
        })
        .collect())
}

/// Parses `5-6,7-8` style bucket lists.
pub fn parse_buckets(s: &str) -> Result<Vec<(usize, usize)>> {
    s.split(',')
        .map(str::trim)
        .filter(|p| !p.is_empty())
        .map(|p| {
            let (lo, hi) = p.split_once('-').unwrap_or((p, p));
            let num = |v: &str| {
                v.trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad bucket bound `{v}`")))
            };
            Ok((num(lo)?, num(hi)?))
        })
        .collect()
}
