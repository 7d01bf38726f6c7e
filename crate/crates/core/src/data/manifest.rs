use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
    Unassigned,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::Unassigned => "unassigned",
        }
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            "unassigned" => Split::Unassigned,
            _ => return Err(Error::config(format!("unknown split {s:?}"))),
        })
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    /// Relative to the manifest's directory.
    pub path: String,
    pub age: f64,
    pub split: Split,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct Manifest {
    /// Directory that record paths are relative to.
    pub root: PathBuf,
    pub records: Vec<Record>,
}

pub const MANIFEST_HEADER: [&str; 3] = ["path", "age", "split"];

impl Manifest {
    pub fn new(root: impl Into<PathBuf>, records: Vec<Record>) -> Result<Self> {
        let mut seen = HashSet::new();
        for (i, r) in records.iter().enumerate() {
            check_age(r.age).map_err(|msg| Error::Parse { row: i + 2, msg })?;
            if !seen.insert(r.path.as_str()) {
                return Err(Error::Parse { row: i + 2, msg: format!("duplicate path {}", r.path) });
            }
        }
        Ok(Manifest { root: root.into(), records })
    }

    /// Reads a `path,age,split` CSV. Parse errors carry the 1-based file line.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let root = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::parse(&text, root)
    }

    pub fn parse(text: &str, root: PathBuf) -> Result<Self> {
        let mut rd = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
        let header = rd.headers().map_err(|e| Error::Parse { row: 1, msg: e.to_string() })?;
        if header.iter().map(str::trim).ne(MANIFEST_HEADER) {
            return Err(Error::Parse { row: 1, msg: format!("expected header path,age,split, got {header:?}") });
        }
        let mut records = Vec::new();
        let mut seen = HashSet::new();
        for row in rd.records() {
            let row = row.map_err(|e| Error::Parse {
                row: e.position().map_or(0, |p| p.line() as usize),
                msg: e.to_string(),
            })?;
            let line = row.position().map_or(0, |p| p.line() as usize);
            let bad = |msg: String| Error::Parse { row: line, msg };
            let path = row[0].trim().to_string();
            if path.is_empty() {
                return Err(bad("empty path".into()));
            }
            let age: f64 = row[1].trim().parse().map_err(|_| bad(format!("bad age {:?}", &row[1])))?;
            check_age(age).map_err(bad)?;
            let split: Split = row[2].trim().parse().map_err(|_| bad(format!("bad split {:?}", &row[2])))?;
            if !seen.insert(path.clone()) {
                return Err(bad(format!("duplicate path {path}")));
            }
            records.push(Record { path, age, split });
        }
        Ok(Manifest { root, records })
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(MANIFEST_HEADER).expect("in-memory write");
        for r in &self.records {
            w.write_record([r.path.as_str(), &r.age.to_string(), r.split.as_str()]).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("in-memory write")).expect("csv output is utf-8")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn resolve(&self, r: &Record) -> PathBuf {
        self.root.join(&r.path)
    }

    pub fn split(&self, which: Split) -> Vec<&Record> {
        self.records.iter().filter(|r| r.split == which).collect()
    }

    pub fn counts(&self) -> BTreeMap<Split, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.split).or_default() += 1;
        }
        m
    }
}

fn check_age(age: f64) -> std::result::Result<(), String> {
    if age.is_finite() && age >= 0.0 {
        Ok(())
    } else {
        Err(format!("age must be finite and >= 0, got {age}"))
    }
}

/// How records are grouped before splitting.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SplitMode {
    /// Each image is assigned independently.
    #[default]
    Image,
    /// Images sharing a parent directory (one subject) stay together.
    Subject,
}

impl FromStr for SplitMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(SplitMode::Image),
            "subject" => Ok(SplitMode::Subject),
            _ => Err(Error::config(format!("unknown split mode {s:?}"))),
        }
    }
}

/// Sizes for `n` items under `ratios` using largest-remainder rounding.
/// Equal remainders favour the later part.
pub fn largest_remainder(n: usize, ratios: [f64; 3]) -> [usize; 3] {
    let quotas = ratios.map(|r| r * n as f64);
    let mut sizes = quotas.map(|q| q.floor() as usize);
    let mut left = n - sizes.iter().sum::<usize>().min(n);
    let mut order = [0usize, 1, 2];
    // stable sort by descending remainder; ties broken towards the later index
    order.sort_by(|&a, &b| {
        let (ra, rb) = (quotas[a] - quotas[a].floor(), quotas[b] - quotas[b].floor());
        if (ra - rb).abs() < 1e-9 {
            b.cmp(&a)
        } else {
            rb.partial_cmp(&ra).unwrap()
        }
    });
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    sizes
}

pub fn check_ratios(ratios: [f64; 3]) -> Result<()> {
    if ratios.iter().any(|r| !(*r > 0.0)) || (ratios.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config(format!("split ratios must be positive and sum to 1, got {ratios:?}")));
    }
    Ok(())
}

const PARTS: [Split; 3] = [Split::Train, Split::Val, Split::Test];

/// Assigns every unassigned record to train/val/test. Records that already
/// carry a split are left untouched.
pub fn split_dataset(manifest: &Manifest, ratios: [f64; 3], seed: u64, mode: SplitMode) -> Result<Manifest> {
    check_ratios(ratios)?;
    if manifest.records.len() < 3 {
        return Err(Error::contract(format!(
            "need at least 3 records to split, got {}",
            manifest.records.len()
        )));
    }
    let free: Vec<usize> = (0..manifest.records.len())
        .filter(|&i| manifest.records[i].split == Split::Unassigned)
        .collect();
    let mut out = manifest.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = largest_remainder(free.len(), ratios);
    match mode {
        SplitMode::Image => {
            let mut order = free;
            order.shuffle(&mut rng);
            let mut at = 0;
            for (part, &size) in PARTS.iter().zip(&sizes) {
                for &i in &order[at..at + size] {
                    out.records[i].split = *part;
                }
                at += size;
            }
        }
        SplitMode::Subject => {
            let mut groups: BTreeMap<PathBuf, Vec<usize>> = BTreeMap::new();
            for &i in &free {
                let parent = Path::new(&manifest.records[i].path).parent().map(Path::to_path_buf).unwrap_or_default();
                groups.entry(parent).or_default().push(i);
            }
            let mut groups: Vec<Vec<usize>> = groups.into_values().collect();
            groups.shuffle(&mut rng);
            let mut part = 0;
            let mut filled = 0;
            for grp in groups {
                while part < 2 && filled >= sizes[part] {
                    part += 1;
                    filled = 0;
                }
                for &i in &grp {
                    out.records[i].split = PARTS[part];
                }
                filled += grp.len();
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn manifest(n: usize) -> Manifest {
        let recs = (0..n)
            .map(|i| Record { path: format!("s{}/{i}.png", i % 4), age: i as f64, split: Split::Unassigned })
            .collect();
        Manifest::new("", recs).unwrap()
    }

    #[test]
    fn parse_examples() {
        let m = Manifest::parse("path,age,split\n", PathBuf::new()).unwrap();
        assert!(m.records.is_empty());
        let m = Manifest::parse("path,age,split\nimg/a.png,34,train\n", PathBuf::new()).unwrap();
        assert_eq!(m.records, vec![Record { path: "img/a.png".into(), age: 34.0, split: Split::Train }]);
    }

    #[test]
    fn parse_errors_name_rows() {
        let dup = "path,age,split\na.png,3,train\nb.png,4,val\na.png,5,test\n";
        match Manifest::parse(dup, PathBuf::new()) {
            Err(Error::Parse { row, msg }) => {
                assert_eq!(row, 4);
                assert!(msg.contains("a.png"));
            }
            other => panic!("{other:?}"),
        }
        for bad in ["-1", "NaN", "old"] {
            let text = format!("path,age,split\na.png,3,train\nb.png,{bad},train\n");
            assert!(matches!(Manifest::parse(&text, PathBuf::new()), Err(Error::Parse { row: 3, .. })));
        }
        assert!(matches!(Manifest::load(Path::new("/nonexistent/m.csv")), Err(Error::Io { .. })));
    }

    #[test]
    fn csv_round_trip() {
        let m = manifest(5);
        assert_eq!(Manifest::parse(&m.to_csv(), PathBuf::new()).unwrap(), m);
    }

    #[test]
    fn largest_remainder_examples() {
        assert_eq!(largest_remainder(100, [0.8, 0.1, 0.1]), [80, 10, 10]);
        assert_eq!(largest_remainder(10, [0.7, 0.15, 0.15]), [7, 1, 2]);
        assert_eq!(largest_remainder(3, [0.34, 0.33, 0.33]), [1, 1, 1]);
    }

    #[test]
    fn split_partitions_and_preserves() {
        let mut m = manifest(100);
        m.records[0].split = Split::Test;
        let s = split_dataset(&m, [0.8, 0.1, 0.1], 7, SplitMode::Image).unwrap();
        assert_eq!(s.records[0].split, Split::Test);
        let c = s.counts();
        assert_eq!(c.get(&Split::Unassigned), None);
        // 99 free records: quotas 79.2 / 9.9 / 9.9 round to 79 / 10 / 10,
        // plus the pre-assigned test record
        assert_eq!((c[&Split::Train], c[&Split::Val], c[&Split::Test]), (79, 10, 11));
        assert_eq!(split_dataset(&m, [0.8, 0.1, 0.1], 7, SplitMode::Image).unwrap(), s);
        assert_ne!(split_dataset(&m, [0.8, 0.1, 0.1], 8, SplitMode::Image).unwrap(), s);
    }

    #[test]
    fn split_errors() {
        assert!(matches!(split_dataset(&manifest(2), [0.8, 0.1, 0.1], 0, SplitMode::Image), Err(Error::Contract(_))));
        assert!(matches!(split_dataset(&manifest(9), [0.8, 0.1, 0.2], 0, SplitMode::Image), Err(Error::Config(_))));
    }

    #[test]
    fn subject_split_keeps_groups_together() {
        let s = split_dataset(&manifest(40), [0.5, 0.25, 0.25], 3, SplitMode::Subject).unwrap();
        let mut by_subject: BTreeMap<&str, HashSet<Split>> = BTreeMap::new();
        for r in &s.records {
            by_subject.entry(&r.path[..2]).or_default().insert(r.split);
        }
        assert!(by_subject.values().all(|v| v.len() == 1));
        assert!(s.records.iter().all(|r| r.split != Split::Unassigned));
    }
}
