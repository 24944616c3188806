//! Count-matrix files, train/test splits, run configuration and
//! crash-safe output.

use std::collections::{HashMap, HashSet};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{rca_transform, CountMatrix, HyperParams, ObservationMask, RcaMode};

/// Version of this library, recorded in every output directory.
pub const CODE_VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CountFormat {
    /// Header row of column labels, then one row per line led by its label.
    #[default]
    Dense,
    /// Header row, then `row_label, col_label, count` lines.
    Triplet,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preprocess {
    /// Cells are non-negative integer counts.
    #[default]
    None,
    /// Cells are raw export values; RCA rounded to integers.
    RcaRound,
    /// Cells are raw export values; RCA thresholded at 1.
    RcaBinary,
}

fn delimiter_for(path: &Path) -> u8 {
    match path.extension().and_then(|e| e.to_str()) {
        Some("tsv") | Some("tab") => b'\t',
        _ => b',',
    }
}

fn parse_err(path: &Path, line: u64, message: impl Into<String>) -> Error {
    Error::Parse { path: path.to_path_buf(), line: line as usize, message: message.into() }
}

fn reader(path: &Path) -> Result<csv::Reader<fs::File>> {
    let file = fs::File::open(path)?;
    Ok(csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .delimiter(delimiter_for(path))
        .from_reader(file))
}

/// Parses one cell: empty means zero. Counts must be non-negative integers
/// unless `raw` is set, in which case any non-negative real is accepted.
fn parse_cell(field: &str, raw: bool) -> std::result::Result<f64, String> {
    if field.is_empty() {
        return Ok(0.0);
    }
    if raw {
        let v: f64 = field.parse().map_err(|_| format!("`{field}` is not a number"))?;
        if !v.is_finite() || v < 0.0 {
            return Err(format!("value `{field}` must be finite and non-negative"));
        }
        return Ok(v);
    }
    if field.starts_with('-') {
        return Err(format!("negative count `{field}`"));
    }
    field.parse::<u64>().map(|v| v as f64).map_err(|_| format!("`{field}` is not a non-negative integer count"))
}

struct Table {
    row_labels: Vec<String>,
    col_labels: Vec<String>,
    values: Vec<(usize, usize, f64)>,
}

fn read_dense(path: &Path, raw: bool) -> Result<Table> {
    let mut rdr = reader(path)?;
    let mut records = rdr.records();
    let header = match records.next() {
        Some(r) => r.map_err(|e| parse_err(path, 1, e.to_string()))?,
        None => return Err(parse_err(path, 1, "empty file")),
    };
    let col_labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
    let mut seen = HashSet::new();
    for l in &col_labels {
        if !seen.insert(l.as_str()) {
            return Err(parse_err(path, 1, format!("duplicate column label `{l}`")));
        }
    }
    let mut row_labels = Vec::new();
    let mut row_seen = HashSet::new();
    let mut values = Vec::new();
    for rec in records {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != col_labels.len() + 1 {
            return Err(parse_err(
                path,
                line,
                format!("expected {} fields, found {}", col_labels.len() + 1, rec.len()),
            ));
        }
        let label = rec[0].to_string();
        if !row_seen.insert(label.clone()) {
            return Err(parse_err(path, line, format!("duplicate row label `{label}`")));
        }
        let n = row_labels.len();
        for (d, field) in rec.iter().skip(1).enumerate() {
            let v = parse_cell(field, raw).map_err(|m| parse_err(path, line, m))?;
            if v > 0.0 {
                values.push((n, d, v));
            }
        }
        row_labels.push(label);
    }
    Ok(Table { row_labels, col_labels, values })
}

fn read_triplets(path: &Path, raw: bool) -> Result<Table> {
    let mut rdr = reader(path)?;
    let mut rows: HashMap<String, usize> = HashMap::new();
    let mut cols: HashMap<String, usize> = HashMap::new();
    let (mut row_labels, mut col_labels) = (Vec::new(), Vec::new());
    let mut seen = HashSet::new();
    let mut values = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        if i == 0 {
            continue;
        }
        if rec.len() == 1 && rec[0].is_empty() {
            continue;
        }
        if rec.len() != 3 {
            return Err(parse_err(path, line, format!("expected 3 fields, found {}", rec.len())));
        }
        let index = |map: &mut HashMap<String, usize>, labels: &mut Vec<String>, l: &str| {
            *map.entry(l.to_string()).or_insert_with(|| {
                labels.push(l.to_string());
                labels.len() - 1
            })
        };
        let n = index(&mut rows, &mut row_labels, &rec[0]);
        let d = index(&mut cols, &mut col_labels, &rec[1]);
        if !seen.insert((n, d)) {
            return Err(parse_err(path, line, format!("duplicate cell ({}, {})", &rec[0], &rec[1])));
        }
        let v = parse_cell(&rec[2], raw).map_err(|m| parse_err(path, line, m))?;
        if v > 0.0 {
            values.push((n, d, v));
        }
    }
    Ok(Table { row_labels, col_labels, values })
}

/// Reads a count matrix. Empty and zero cells are equivalent.
pub fn load_counts(path: &Path, format: CountFormat, preprocess: Preprocess) -> Result<CountMatrix> {
    let raw = preprocess != Preprocess::None;
    let table = match format {
        CountFormat::Dense => read_dense(path, raw)?,
        CountFormat::Triplet => read_triplets(path, raw)?,
    };
    if table.row_labels.is_empty() || table.col_labels.is_empty() {
        return Err(parse_err(path, 1, "no data rows or columns"));
    }
    let mode = match preprocess {
        Preprocess::None => {
            let mut m = CountMatrix::new(table.row_labels, table.col_labels)?;
            for (n, d, v) in table.values {
                m.set(n, d, v as u64)?;
            }
            return Ok(m);
        }
        Preprocess::RcaRound => RcaMode::Round,
        Preprocess::RcaBinary => RcaMode::Binary,
    };
    let mut dense = Array2::zeros((table.row_labels.len(), table.col_labels.len()));
    for (n, d, v) in table.values {
        dense[[n, d]] = v;
    }
    rca_transform(dense.view(), table.row_labels, table.col_labels, mode)
}

fn csv_bytes(write: impl FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> csv::Result<()>, delimiter: u8) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut w = csv::WriterBuilder::new().delimiter(delimiter).from_writer(&mut buf);
        write(&mut w).and_then(|_| w.flush().map_err(csv::Error::from)).map_err(|e| Error::Data(e.to_string()))?;
    }
    Ok(buf)
}

/// Writes `data` so that [`load_counts`] with the same format restores it.
/// Triplet files list the first row and first column in full (zeros
/// included) so that every label and its order survive.
pub fn save_counts(data: &CountMatrix, path: &Path, format: CountFormat) -> Result<()> {
    let bytes = csv_bytes(
        |w| match format {
            CountFormat::Dense => {
                let mut header = vec![String::new()];
                header.extend(data.col_labels().iter().cloned());
                w.write_record(&header)?;
                for (n, label) in data.row_labels().iter().enumerate() {
                    let mut rec = vec![label.clone()];
                    rec.extend((0..data.n_cols()).map(|d| data.get(n, d).to_string()));
                    w.write_record(&rec)?;
                }
                Ok(())
            }
            CountFormat::Triplet => {
                let (rl, cl) = (data.row_labels(), data.col_labels());
                w.write_record(["row", "col", "count"])?;
                for n in 0..data.n_rows() {
                    w.write_record([&rl[n], &cl[0], &data.get(n, 0).to_string()])?;
                }
                for d in 1..data.n_cols() {
                    w.write_record([&rl[0], &cl[d], &data.get(0, d).to_string()])?;
                }
                for (n, d, x) in data.iter_nonzero().filter(|&(n, d, _)| n > 0 && d > 0) {
                    w.write_record([&rl[n], &cl[d], &x.to_string()])?;
                }
                Ok(())
            }
        },
        delimiter_for(path),
    )?;
    atomic_write(path, &bytes)
}

/// `n_folds` masks, each holding out `⌈fraction·N·D⌉` cells drawn without
/// replacement. Fold `i` uses ChaCha8 seeded with `seed` on stream `i`.
pub fn make_splits(data: &CountMatrix, fraction: f64, n_folds: usize, seed: u64) -> Result<Vec<ObservationMask>> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::param("fraction", format!("must lie in (0, 1), got {fraction}")));
    }
    let cells = data.n_rows() * data.n_cols();
    // The nudge keeps products like 0.1 * 100 from rounding up past 10.
    let count = ((fraction * cells as f64) - 1e-9).ceil().max(1.0) as usize;
    (0..n_folds)
        .map(|fold| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(fold as u64);
            let picked = rand::seq::index::sample(&mut rng, cells, count.min(cells));
            let mut idx = picked.into_vec();
            idx.sort_unstable();
            ObservationMask::new(data, idx.into_iter().map(|i| (i / data.n_cols(), i % data.n_cols())))
        })
        .collect()
}

/// Writes to a sibling temporary file and renames it into place, so
/// readers never observe a partial file.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let name = path.file_name().ok_or_else(|| Error::Data(format!("`{}` is not a file path", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    let result = (|| -> Result<()> {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    result
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    Ok(serde_json::from_slice(&fs::read(path)?)?)
}

/// Two-column tab-separated table.
pub fn write_pairs(path: &Path, header: [&str; 2], points: &[(f64, f64)]) -> Result<()> {
    let mut s = format!("{}\t{}\n", header[0], header[1]);
    for (a, b) in points {
        s.push_str(&format!("{a}\t{b}\n"));
    }
    atomic_write(path, s.as_bytes())
}

/// Everything that determines a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub dataset: Option<PathBuf>,
    pub format: CountFormat,
    pub preprocess: Preprocess,
    /// Fraction of cells held out per fold.
    pub holdout: f64,
    pub folds: usize,
    pub output: PathBuf,
    /// Columns per feature for coherence, topics and matching.
    pub top_m: usize,
    pub qq_draws: usize,
    pub checkpoint_every: Option<u64>,
    pub hyper: HyperParams,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            dataset: None,
            format: CountFormat::Dense,
            preprocess: Preprocess::None,
            holdout: 0.1,
            folds: 10,
            output: PathBuf::from("out"),
            top_m: 10,
            qq_draws: 100,
            checkpoint_every: None,
            hyper: HyperParams::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.holdout > 0.0 && self.holdout < 1.0) {
            return Err(Error::param("holdout", format!("must lie in (0, 1), got {}", self.holdout)));
        }
        if self.folds == 0 {
            return Err(Error::param("folds", "must be at least 1"));
        }
        if self.top_m == 0 {
            return Err(Error::param("top_m", "must be at least 1"));
        }
        if self.qq_draws == 0 {
            return Err(Error::param("qq_draws", "must be at least 1"));
        }
        if self.checkpoint_every == Some(0) {
            return Err(Error::param("checkpoint_every", "must be at least 1"));
        }
        self.hyper.validate()
    }

    /// Makes the dataset and output paths absolute.
    pub fn resolve_paths(&mut self) -> Result<()> {
        if let Some(p) = &self.dataset {
            self.dataset = Some(std::path::absolute(p)?);
        }
        self.output = std::path::absolute(&self.output)?;
        Ok(())
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Data(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Data(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| {
            let line = e.span().map_or(0, |s| text[..s.start.min(text.len())].matches('\n').count() + 1);
            parse_err(path, line as u64, e.message().to_string())
        })
    }
}

/// Record written next to every output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub command: String,
    pub code_version: String,
    pub seed: u64,
    pub config: RunConfig,
}

impl Provenance {
    pub fn new(command: &str, config: &RunConfig) -> Self {
        Provenance {
            command: command.to_string(),
            code_version: CODE_VERSION.to_string(),
            seed: config.hyper.seed,
            config: config.clone(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = toml::to_string(self).map_err(|e| Error::Data(format!("provenance: {e}")))?;
        atomic_write(&dir.join("provenance.toml"), text.as_bytes())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let text = fs::read_to_string(dir.join("provenance.toml"))?;
        toml::from_str(&text).map_err(|e| Error::Data(format!("provenance: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use tempfile::tempdir;

    fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, text).unwrap();
        p
    }

    fn line_of(err: Error) -> usize {
        match err {
            Error::Parse { line, .. } => line,
            other => panic!("expected a parse error, got {other}"),
        }
    }

    #[test]
    fn dense_two_by_two() {
        let dir = tempdir().unwrap();
        let p = write(dir.path(), "x.csv", ",a,b\nr1,1,0\nr2,2,3\n");
        let m = load_counts(&p, CountFormat::Dense, Preprocess::None).unwrap();
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.get(1, 1), 3);
        assert_eq!(m.col_labels(), ["a", "b"]);
    }

    #[test]
    fn empty_cells_are_zero_and_tabs_work() {
        let dir = tempdir().unwrap();
        let p = write(dir.path(), "x.tsv", "\ta\tb\nr1\t\t4\n");
        let m = load_counts(&p, CountFormat::Dense, Preprocess::None).unwrap();
        assert_eq!(m.get(0, 0), 0);
        assert_eq!(m.get(0, 1), 4);
    }

    #[test]
    fn dense_errors_carry_lines() {
        let dir = tempdir().unwrap();
        let neg = write(dir.path(), "neg.csv", ",a\nr1,1\nr2,-1\n");
        assert_eq!(line_of(load_counts(&neg, CountFormat::Dense, Preprocess::None).unwrap_err()), 3);
        let frac = write(dir.path(), "frac.csv", ",a\nr1,1.5\n");
        assert_eq!(line_of(load_counts(&frac, CountFormat::Dense, Preprocess::None).unwrap_err()), 2);
        let dup = write(dir.path(), "dup.csv", ",a\nr1,1\nr1,2\n");
        assert_eq!(line_of(load_counts(&dup, CountFormat::Dense, Preprocess::None).unwrap_err()), 3);
        let dup_col = write(dir.path(), "dupc.csv", ",a,a\nr1,1,1\n");
        assert_eq!(line_of(load_counts(&dup_col, CountFormat::Dense, Preprocess::None).unwrap_err()), 1);
    }

    #[test]
    fn raw_values_accepted_under_rca() {
        let dir = tempdir().unwrap();
        let p = write(dir.path(), "raw.csv", ",a,b\nr1,2.0,0\nr2,1.0,1.0\n");
        let m = load_counts(&p, CountFormat::Dense, Preprocess::RcaRound).unwrap();
        assert_eq!(m.get(0, 0), 1);
        assert_eq!(m.get(0, 1), 0);
        let b = load_counts(&p, CountFormat::Dense, Preprocess::RcaBinary).unwrap();
        assert!(b.iter_nonzero().all(|(_, _, x)| x == 1));
    }

    #[test]
    fn triplets() {
        let dir = tempdir().unwrap();
        let p = write(dir.path(), "t.csv", "row,col,count\nr1,a,1\nr2,b,3\nr2,a,2\n");
        let m = load_counts(&p, CountFormat::Triplet, Preprocess::None).unwrap();
        assert_eq!(m.nnz(), 3);
        assert_eq!(m.get(1, 0), 2);
        let dup = write(dir.path(), "d.csv", "row,col,count\nr1,a,1\nr1,a,2\n");
        assert_eq!(line_of(load_counts(&dup, CountFormat::Triplet, Preprocess::None).unwrap_err()), 3);
    }

    #[test]
    fn splits() {
        let data = CountMatrix::with_default_labels(10, 10).unwrap();
        let folds = make_splits(&data, 0.1, 10, 7).unwrap();
        assert_eq!(folds.len(), 10);
        assert!(folds.iter().all(|m| m.len() == 10));
        assert_ne!(folds[0], folds[1]);
        assert_eq!(make_splits(&data, 0.1, 2, 7).unwrap()[1], folds[1]);
        assert!(make_splits(&data, 1.0, 1, 7).is_err());
        let odd = CountMatrix::with_default_labels(3, 7).unwrap();
        assert_eq!(make_splits(&odd, 0.1, 1, 0).unwrap()[0].len(), 3);
    }

    #[test]
    fn config_round_trip() {
        let mut c = RunConfig::default();
        c.dataset = Some(PathBuf::from("/data/x.csv"));
        c.checkpoint_every = Some(500);
        c.hyper.sigma = 0.25;
        let back = RunConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
        assert!(RunConfig::from_toml("bogus = 1").is_err());
        let defaults = RunConfig::from_toml("").unwrap();
        assert_eq!(defaults.folds, 10);
        assert_eq!(defaults.hyper.burn_in, 30_000);
    }

    #[test]
    fn provenance_round_trip() {
        let dir = tempdir().unwrap();
        let p = Provenance::new("fit", &RunConfig::default());
        p.write(dir.path()).unwrap();
        assert_eq!(Provenance::read(dir.path()).unwrap(), p);
    }

    #[test]
    fn atomic_write_leaves_no_temp() {
        let dir = tempdir().unwrap();
        let p = dir.path().join("out.txt");
        atomic_write(&p, b"hello").unwrap();
        atomic_write(&p, b"again").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"again");
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);
        assert!(atomic_write(&dir.path().join("missing/x"), b"x").is_err());
    }

    fn matrix_strategy() -> impl Strategy<Value = Vec<Vec<u64>>> {
        (1usize..6, 1usize..6).prop_flat_map(|(n, d)| prop::collection::vec(prop::collection::vec(0u64..4, d), n))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn save_load_identity(rows in matrix_strategy(), triplet in any::<bool>()) {
            let m = CountMatrix::from_rows(&rows).unwrap();
            let dir = tempdir().unwrap();
            let format = if triplet { CountFormat::Triplet } else { CountFormat::Dense };
            let p = dir.path().join("m.csv");
            save_counts(&m, &p, format).unwrap();
            prop_assert_eq!(load_counts(&p, format, Preprocess::None).unwrap(), m);
        }
    }
}
