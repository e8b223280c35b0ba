//! Painting metadata: ingestion, the per-class floor, the 70/30 split, class
//! distributions and the mean per-class accuracy metric.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::io::Read;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::imaging::{ImageBuffer, ImageError};

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("metadata line {line}: {msg}")]
    Parse { line: u64, msg: String },
    #[error("duplicate painting id `{0}`")]
    DuplicateId(String),
    #[error("degenerate dataset: {0}")]
    Degenerate(String),
    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },
    #[error("unknown painting id `{0}`")]
    UnknownId(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error(transparent)]
    Image(#[from] ImageError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Artist,
    Style,
    Genre,
}

impl Task {
    pub const ALL: [Task; 3] = [Task::Artist, Task::Style, Task::Genre];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Task::Artist => "artist",
            Task::Style => "style",
            Task::Genre => "genre",
        }
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "artist" => Ok(Task::Artist),
            "style" => Ok(Task::Style),
            "genre" => Ok(Task::Genre),
            other => Err(format!("unknown task `{other}` (expected artist, style or genre)")),
        }
    }
}

impl std::fmt::Display for Task {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    #[default]
    Unassigned,
}

impl std::str::FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "unassigned" => Ok(Split::Unassigned),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PaintingRecord {
    pub id: String,
    pub image_path: String,
    pub artist: String,
    pub style: String,
    pub genre: String,
    #[serde(default)]
    pub split: Split,
}

impl PaintingRecord {
    pub fn label(&self, task: Task) -> &str {
        match task {
            Task::Artist => &self.artist,
            Task::Style => &self.style,
            Task::Genre => &self.genre,
        }
    }
}

/// Records parsed from a metadata table, plus the number of rows dropped for missing labels.
#[derive(Clone, Debug, PartialEq)]
pub struct ParsedMetadata {
    pub records: Vec<PaintingRecord>,
    pub dropped: usize,
}

const COLUMNS: [&str; 5] = ["id", "filename", "artist", "style", "genre"];

/// Reads a CSV with header columns `id, filename, artist, style, genre` (any order,
/// extra columns ignored). Rows with an empty label are dropped and counted.
pub fn parse_metadata(source: impl Read) -> Result<ParsedMetadata, DatasetError> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(source);
    let headers = rdr.headers().map_err(|e| csv_err(&e))?.clone();
    let mut cols = [0usize; 5];
    for (slot, name) in cols.iter_mut().zip(COLUMNS) {
        *slot = headers
            .iter()
            .position(|h| h.eq_ignore_ascii_case(name))
            .ok_or_else(|| DatasetError::Parse { line: 1, msg: format!("missing column `{name}`") })?;
    }
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    let mut dropped = 0;
    for row in rdr.records() {
        let row = row.map_err(|e| csv_err(&e))?;
        let line = row.position().map_or(0, |p| p.line());
        let field = |i: usize| row.get(cols[i]).unwrap_or("").to_string();
        let id = field(0);
        if id.is_empty() {
            return Err(DatasetError::Parse { line, msg: "empty id".into() });
        }
        if field(2).is_empty() || field(3).is_empty() || field(4).is_empty() {
            dropped += 1;
            continue;
        }
        if !seen.insert(id.clone()) {
            return Err(DatasetError::DuplicateId(id));
        }
        records.push(PaintingRecord {
            id,
            image_path: field(1),
            artist: field(2),
            style: field(3),
            genre: field(4),
            split: Split::Unassigned,
        });
    }
    Ok(ParsedMetadata { records, dropped })
}

fn csv_err(e: &csv::Error) -> DatasetError {
    let line = e.position().map_or(0, |p| p.line());
    DatasetError::Parse { line, msg: e.to_string() }
}

/// Bijection between label strings and dense ids `0..K`, in lexicographic label order.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelIndex {
    pub labels: Vec<String>,
    pub counts: Vec<usize>,
}

impl LabelIndex {
    pub fn build(records: &[PaintingRecord], task: Task) -> Self {
        let mut tally: BTreeMap<&str, usize> = BTreeMap::new();
        for r in records {
            *tally.entry(r.label(task)).or_default() += 1;
        }
        Self {
            labels: tally.keys().map(|k| k.to_string()).collect(),
            counts: tally.values().copied().collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn id(&self, label: &str) -> Option<usize> {
        self.labels.binary_search_by(|l| l.as_str().cmp(label)).ok()
    }

    pub fn label(&self, id: usize) -> Option<&str> {
        self.labels.get(id).map(String::as_str)
    }
}

/// Repeatedly removes records in any task class with fewer than `min_count` members
/// until no class in any task is below the floor, then rebuilds the label indices.
pub fn filter_min_per_class(
    records: Vec<PaintingRecord>,
    min_count: usize,
) -> Result<(Vec<PaintingRecord>, [LabelIndex; 3]), DatasetError> {
    if min_count == 0 {
        return Err(DatasetError::Degenerate("min_count must be >= 1".into()));
    }
    let mut current = records;
    loop {
        let counts: [HashMap<&str, usize>; 3] = Task::ALL.map(|t| {
            let mut m = HashMap::new();
            for r in &current {
                *m.entry(r.label(t)).or_insert(0) += 1;
            }
            m
        });
        let keep: Vec<bool> = current
            .iter()
            .map(|r| Task::ALL.iter().all(|&t| counts[t.index()][r.label(t)] >= min_count))
            .collect();
        if keep.iter().all(|&k| k) {
            break;
        }
        let mut it = keep.into_iter();
        current.retain(|_| it.next().unwrap_or(false));
    }
    if current.is_empty() {
        return Err(DatasetError::Degenerate(format!("no records survive a floor of {min_count} per class")));
    }
    let index = Task::ALL.map(|t| LabelIndex::build(&current, t));
    Ok((current, index))
}

pub const TRAIN_FRACTION: f64 = 0.7;

/// Seeded uniform partition: `round(0.7·n)` records go to train, the rest to test.
pub fn split_70_30(mut records: Vec<PaintingRecord>, seed: u64) -> Vec<PaintingRecord> {
    let n = records.len();
    let n_train = (n as f64 * TRAIN_FRACTION).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    for (rank, &i) in order.iter().enumerate() {
        records[i].split = if rank < n_train { Split::Train } else { Split::Test };
    }
    records
}

/// `(label, count)` pairs sorted by descending count, ties by label.
pub fn class_distribution(records: &[PaintingRecord], task: Task) -> Vec<(String, usize)> {
    let idx = LabelIndex::build(records, task);
    let mut out: Vec<(String, usize)> = idx.labels.into_iter().zip(idx.counts).collect();
    out.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    out
}

/// Plot-ready CSV (`rank,label,count`) of a class distribution.
pub fn distribution_csv(dist: &[(String, usize)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["rank", "label", "count"]).expect("in-memory write");
    for (i, (label, count)) in dist.iter().enumerate() {
        w.write_record([(i + 1).to_string(), label.clone(), count.to_string()]).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("in-memory flush")).expect("utf-8 input")
}

/// Mean over classes of per-class recall; classes with no evaluation samples are left
/// out of the mean.
pub fn mean_per_class_accuracy(predictions: &[usize], labels: &[usize], k: usize) -> Result<f64, DatasetError> {
    if k == 0 {
        return Err(DatasetError::Degenerate("zero classes".into()));
    }
    if predictions.len() != labels.len() {
        return Err(DatasetError::Degenerate(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    let mut total = vec![0usize; k];
    let mut hit = vec![0usize; k];
    for (&p, &l) in predictions.iter().zip(labels) {
        if l >= k {
            return Err(DatasetError::Label { label: l, classes: k });
        }
        total[l] += 1;
        if p == l {
            hit[l] += 1;
        }
    }
    let present: Vec<f64> = total
        .iter()
        .zip(&hit)
        .filter(|(&t, _)| t > 0)
        .map(|(&t, &h)| h as f64 / t as f64)
        .collect();
    if present.is_empty() {
        return Err(DatasetError::Degenerate("no evaluation samples".into()));
    }
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

pub const MANIFEST_VERSION: u32 = 1;

/// Filtered, split dataset with its label indices; stored as JSON.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    /// Directory image paths are resolved against.
    pub root: PathBuf,
    pub seed: u64,
    pub min_per_class: usize,
    pub dropped_missing_labels: usize,
    pub records: Vec<PaintingRecord>,
    pub labels: [LabelIndex; 3],
}

impl Manifest {
    /// Parses, filters and splits a metadata table.
    pub fn build(
        source: impl Read,
        root: impl Into<PathBuf>,
        min_per_class: usize,
        seed: u64,
    ) -> Result<Self, DatasetError> {
        let parsed = parse_metadata(source)?;
        let (records, labels) = filter_min_per_class(parsed.records, min_per_class)?;
        Ok(Self {
            version: MANIFEST_VERSION,
            root: root.into(),
            seed,
            min_per_class,
            dropped_missing_labels: parsed.dropped,
            records: split_70_30(records, seed),
            labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), DatasetError> {
        let f = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(f, self).map_err(|e| DatasetError::Manifest(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self, DatasetError> {
        let f = std::io::BufReader::new(std::fs::File::open(path)?);
        let m: Manifest = serde_json::from_reader(f).map_err(|e| DatasetError::Manifest(e.to_string()))?;
        if m.version != MANIFEST_VERSION {
            return Err(DatasetError::Manifest(format!("unsupported manifest version {}", m.version)));
        }
        Ok(m)
    }

    pub fn num_classes(&self) -> [usize; 3] {
        [self.labels[0].len(), self.labels[1].len(), self.labels[2].len()]
    }

    pub fn split(&self, split: Split) -> Vec<&PaintingRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn record(&self, id: &str) -> Option<&PaintingRecord> {
        self.records.iter().find(|r| r.id == id)
    }

    /// Dense label ids of a record for the three tasks.
    pub fn label_ids(&self, r: &PaintingRecord) -> Result<[usize; 3], DatasetError> {
        let mut out = [0; 3];
        for t in Task::ALL {
            out[t.index()] = self.labels[t.index()]
                .id(r.label(t))
                .ok_or_else(|| DatasetError::Manifest(format!("label `{}` of `{}` not indexed", r.label(t), r.id)))?;
        }
        Ok(out)
    }

    pub fn image_path(&self, r: &PaintingRecord) -> PathBuf {
        self.root.join(&r.image_path)
    }
}

/// Supplies decoded images for records.
pub trait ImageSource: Send + Sync {
    fn load(&self, record: &PaintingRecord) -> Result<ImageBuffer, DatasetError>;
}

/// Reads images from disk relative to a root directory.
#[derive(Clone, Debug)]
pub struct DiskSource {
    pub root: PathBuf,
}

impl ImageSource for DiskSource {
    fn load(&self, record: &PaintingRecord) -> Result<ImageBuffer, DatasetError> {
        Ok(ImageBuffer::open(&self.root.join(&record.image_path))?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn rec(id: &str, a: &str, s: &str, g: &str) -> PaintingRecord {
        PaintingRecord {
            id: id.into(),
            image_path: format!("{id}.png"),
            artist: a.into(),
            style: s.into(),
            genre: g.into(),
            split: Split::Unassigned,
        }
    }

    #[test]
    fn parses_and_drops_rows() {
        let csv = "id,filename,artist,style,genre\n1,a.jpg,A,S,G\n2,b.jpg,A,,G\n3,c.jpg,B,S,G\n4,d.jpg,B,T,H\n5,e.jpg,C,T,H\n";
        let p = parse_metadata(csv.as_bytes()).unwrap();
        assert_eq!(p.records.len(), 4);
        assert_eq!(p.dropped, 1);
        let five = "genre,id,style,filename,artist\nG,1,S,a,A\nG,2,S,b,A\nG,3,S,c,A\nG,4,S,d,A\nG,5,S,e,A\n";
        assert_eq!(parse_metadata(five.as_bytes()).unwrap().records.len(), 5);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let csv = "id,filename,artist,style,genre\nx,a,A,S,G\nx,b,A,S,G\n";
        match parse_metadata(csv.as_bytes()) {
            Err(DatasetError::DuplicateId(id)) => assert_eq!(id, "x"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn malformed_rows_report_line() {
        let csv = "id,filename,artist,style,genre\n1,a,A,S,G\n2,b,A\n";
        match parse_metadata(csv.as_bytes()) {
            Err(DatasetError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(parse_metadata("id,artist\n".as_bytes()).is_err());
    }

    #[test]
    fn floor_removes_small_artist() {
        let mut rs: Vec<_> = (0..9).map(|i| rec(&format!("a{i}"), "A", "S", "G")).collect();
        rs.extend((0..10).map(|i| rec(&format!("b{i}"), "B", "S", "G")));
        let (kept, idx) = filter_min_per_class(rs, 10).unwrap();
        assert_eq!(kept.len(), 10);
        assert_eq!(idx[0].labels, vec!["B".to_string()]);
    }

    #[test]
    fn floor_cascades_across_tasks() {
        // Style T has 10 works, one by the starved artist A; removing A leaves T at 9.
        let mut rs: Vec<_> = (0..9).map(|i| rec(&format!("a{i}"), "A", "S", "G")).collect();
        rs.push(rec("a9", "A", "T", "G"));
        rs.extend((0..9).map(|i| rec(&format!("t{i}"), "B", "T", "G")));
        rs.extend((0..10).map(|i| rec(&format!("s{i}"), "C", "S", "G")));
        rs.push(rec("x", "B", "S", "G"));
        let (kept, _) = filter_min_per_class(rs.clone(), 10).unwrap();
        // A has 10 works, B has 10, C has 10; S has 20, T has 10: already a fixed point
        assert_eq!(kept.len(), rs.len());
        let mut smaller = rs;
        smaller.retain(|r| r.id != "a0");
        let (kept, idx) = filter_min_per_class(smaller, 10).unwrap();
        assert!(kept.iter().all(|r| r.artist == "C"));
        assert_eq!(idx[1].labels, vec!["S".to_string()]);
    }

    #[test]
    fn empty_result_is_degenerate() {
        let rs = vec![rec("1", "A", "S", "G")];
        assert!(matches!(filter_min_per_class(rs, 2), Err(DatasetError::Degenerate(_))));
    }

    #[test]
    fn split_is_exact_and_seeded() {
        let rs: Vec<_> = (0..100).map(|i| rec(&i.to_string(), "A", "S", "G")).collect();
        let a = split_70_30(rs.clone(), 5);
        assert_eq!(a.iter().filter(|r| r.split == Split::Train).count(), 70);
        assert_eq!(a, split_70_30(rs.clone(), 5));
        assert_ne!(a, split_70_30(rs, 6));
    }

    #[test]
    fn distribution_sorted_and_complete() {
        let rs = vec![rec("1", "A", "S", "G"), rec("2", "B", "S", "G"), rec("3", "B", "T", "G")];
        let d = class_distribution(&rs, Task::Artist);
        assert_eq!(d, vec![("B".to_string(), 2), ("A".to_string(), 1)]);
        assert_eq!(distribution_csv(&d), "rank,label,count\n1,B,2\n2,A,1\n");
    }

    #[test]
    fn metric_examples() {
        assert_eq!(mean_per_class_accuracy(&[0, 1, 0], &[0, 1, 1], 2).unwrap(), 0.75);
        assert_eq!(mean_per_class_accuracy(&[2, 0], &[2, 0], 3).unwrap(), 1.0);
        assert!(mean_per_class_accuracy(&[0], &[0], 0).is_err());
        assert!(mean_per_class_accuracy(&[0], &[3], 3).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let mut csv = String::from("id,filename,artist,style,genre\n");
        for i in 0..30 {
            csv.push_str(&format!("p{i},p{i}.png,A{},S,G{}\n", i % 2, i % 3));
        }
        let m = Manifest::build(csv.as_bytes(), "/data", 5, 1).unwrap();
        assert_eq!(m.num_classes(), [2, 1, 3]);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.json");
        m.save(&path).unwrap();
        assert_eq!(Manifest::load(&path).unwrap(), m);
        let r = m.record("p4").unwrap();
        assert_eq!(m.label_ids(r).unwrap(), [0, 0, 1]);
        assert_eq!(m.image_path(r), PathBuf::from("/data/p4.png"));
    }

    fn random_records(seed: u64, n: usize) -> Vec<PaintingRecord> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|i| {
                let a = rng.random_range(0..6);
                let s = rng.random_range(0..4);
                let g = rng.random_range(0..3);
                rec(&i.to_string(), &format!("A{a}"), &format!("S{s}"), &format!("G{g}"))
            })
            .collect()
    }

    proptest! {
        #[test]
        fn filter_reaches_fixed_point(seed in any::<u64>(), n in 10usize..120, floor in 1usize..12) {
            if let Ok((kept, idx)) = filter_min_per_class(random_records(seed, n), floor) {
                let (again, _) = filter_min_per_class(kept.clone(), floor).unwrap();
                prop_assert_eq!(&again, &kept);
                for i in &idx {
                    prop_assert!(i.counts.iter().all(|&c| c >= floor));
                }
            }
        }

        #[test]
        fn split_within_one_record(seed in any::<u64>(), n in 0usize..300) {
            let rs = split_70_30(random_records(seed, n), seed);
            let train = rs.iter().filter(|r| r.split == Split::Train).count();
            prop_assert!((train as f64 - 0.7 * n as f64).abs() <= 1.0);
            prop_assert!(rs.iter().all(|r| r.split != Split::Unassigned));
        }

        #[test]
        fn metric_invariant_to_relabeling(seed in any::<u64>(), n in 1usize..60) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = 4;
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let preds: Vec<usize> = (0..n).map(|_| rng.random_range(0..k)).collect();
            let mut perm: Vec<usize> = (0..k).collect();
            perm.shuffle(&mut rng);
            let pl: Vec<usize> = labels.iter().map(|&l| perm[l]).collect();
            let pp: Vec<usize> = preds.iter().map(|&p| perm[p]).collect();
            let a = mean_per_class_accuracy(&preds, &labels, k).unwrap();
            let b = mean_per_class_accuracy(&pp, &pl, k).unwrap();
            prop_assert!((a - b).abs() < 1e-12);
        }
    }
}
