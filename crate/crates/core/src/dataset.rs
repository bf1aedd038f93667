//! Multi-modal feature datasets: loading, validation, synthetic generation,
//! train/query splits and anchor sampling.
//!
//! Feature matrices are stored column-per-instance (`d × N`), which is also
//! the on-disk order of the binary format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

const FEATURE_MAGIC: &[u8; 4] = b"AGFM";
const FEATURE_VERSION: u32 = 1;

/// Dense features of one modality, one column per instance.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub modality_id: usize,
    pub data: DMatrix<f64>,
}

impl FeatureMatrix {
    pub fn new(modality_id: usize, data: DMatrix<f64>) -> Result<Self> {
        if let Some((pos, v)) = data.iter().enumerate().find(|(_, v)| !v.is_finite()) {
            let (row, col) = (pos % data.nrows(), pos / data.nrows());
            return Err(Error::InvalidArgument(format!(
                "non-finite feature value {v} at row {}, column {}",
                row + 1,
                col + 1
            )));
        }
        Ok(Self { modality_id, data })
    }

    pub fn feature_dim(&self) -> usize {
        self.data.nrows()
    }

    pub fn count(&self) -> usize {
        self.data.ncols()
    }

    /// Columns `indices` as a new matrix.
    pub fn select(&self, indices: &[usize]) -> DMatrix<f64> {
        self.data.select_columns(indices)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FeatureFormat {
    Csv,
    Bin,
}

impl FeatureFormat {
    /// `.csv` → CSV, anything else → binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => FeatureFormat::Csv,
            _ => FeatureFormat::Bin,
        }
    }
}

pub fn load_features(path: &Path, format: FeatureFormat) -> Result<FeatureMatrix> {
    match format {
        FeatureFormat::Csv => load_csv(path),
        FeatureFormat::Bin => load_bin(path),
    }
}

fn load_csv(path: &Path) -> Result<FeatureMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (r, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for (c, cell) in line.split(',').enumerate() {
            let parse_err = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                row: r + 1,
                col: c + 1,
                msg,
            };
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("cannot parse {:?} as a number", cell.trim())))?;
            if !v.is_finite() {
                return Err(parse_err(format!("non-finite value {:?}", cell.trim())));
            }
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if first.len() != row.len() {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    row: r + 1,
                    col: row.len().min(first.len()) + 1,
                    msg: format!("expected {} values, found {}", first.len(), row.len()),
                });
            }
        }
        rows.push(row);
    }
    let d = rows.len();
    let n = rows.first().map_or(0, Vec::len);
    let data = DMatrix::from_fn(d, n, |i, j| rows[i][j]);
    Ok(FeatureMatrix {
        modality_id: 0,
        data,
    })
}

fn read_exact(reader: &mut impl Read, buf: &mut [u8], path: &Path, what: &str) -> Result<()> {
    reader.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(path, format!("truncated file while reading {what}"))
        } else {
            Error::io(path, e)
        }
    })
}

fn load_bin(path: &Path) -> Result<FeatureMatrix> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);
    let mut magic = [0u8; 4];
    read_exact(&mut reader, &mut magic, path, "magic")?;
    if &magic != FEATURE_MAGIC {
        return Err(Error::format(path, "missing AGFM magic"));
    }
    let mut b4 = [0u8; 4];
    let mut b8 = [0u8; 8];
    read_exact(&mut reader, &mut b4, path, "version")?;
    let version = u32::from_le_bytes(b4);
    if version != FEATURE_VERSION {
        return Err(Error::format(path, format!("unsupported version {version}")));
    }
    read_exact(&mut reader, &mut b4, path, "feature dimension")?;
    let d = u32::from_le_bytes(b4) as usize;
    read_exact(&mut reader, &mut b8, path, "instance count")?;
    let n = u64::from_le_bytes(b8) as usize;

    let total = d
        .checked_mul(n)
        .ok_or_else(|| Error::format(path, "header dimensions overflow"))?;
    let mut values = Vec::with_capacity(total);
    for idx in 0..total {
        read_exact(&mut reader, &mut b8, path, "feature values")?;
        let v = f64::from_le_bytes(b8);
        if !v.is_finite() {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                row: idx % d.max(1) + 1,
                col: idx / d.max(1) + 1,
                msg: format!("non-finite value {v}"),
            });
        }
        values.push(v);
    }
    if reader.read(&mut b8).map_err(|e| Error::io(path, e))? != 0 {
        return Err(Error::format(
            path,
            format!("trailing bytes after {d}x{n} values"),
        ));
    }
    Ok(FeatureMatrix {
        modality_id: 0,
        data: DMatrix::from_vec(d, n, values),
    })
}

pub fn save_features_bin(path: &Path, features: &DMatrix<f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    write(FEATURE_MAGIC)?;
    write(&FEATURE_VERSION.to_le_bytes())?;
    let d = u32::try_from(features.nrows())
        .map_err(|_| Error::InvalidArgument("feature dimension exceeds u32".into()))?;
    write(&d.to_le_bytes())?;
    write(&(features.ncols() as u64).to_le_bytes())?;
    // nalgebra storage is column-major, which is the file order
    for v in features.iter() {
        write(&v.to_le_bytes())?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn save_features_csv(path: &Path, features: &DMatrix<f64>) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for row in features.row_iter() {
        let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
        writeln!(w, "{}", line.join(",")).map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Training / query partition. `database` defaults to the training set when
/// absent.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<usize>,
    pub query: Vec<usize>,
    pub database: Option<Vec<usize>>,
}

impl Split {
    pub fn database(&self) -> &[usize] {
        self.database.as_deref().unwrap_or(&self.train)
    }

    pub fn validate(&self, n: usize) -> Result<()> {
        let mut seen = vec![0u8; n];
        for (which, set) in [(1u8, &self.train), (2u8, &self.query)] {
            for &i in set {
                if i >= n {
                    return Err(Error::InvalidArgument(format!(
                        "split index {i} out of range for {n} instances"
                    )));
                }
                if seen[i] & which != 0 {
                    return Err(Error::InvalidArgument(format!(
                        "split index {i} listed twice"
                    )));
                }
                seen[i] |= which;
            }
        }
        if let Some(i) = seen.iter().position(|&s| s == 3) {
            return Err(Error::InvalidArgument(format!(
                "instance {i} is in both the training and query sets"
            )));
        }
        if let Some(db) = &self.database {
            if let Some(&i) = db.iter().find(|&&i| i >= n) {
                return Err(Error::InvalidArgument(format!(
                    "database index {i} out of range for {n} instances"
                )));
            }
        }
        Ok(())
    }

    /// Split file: line 1 training indices, line 2 query indices, optional
    /// line 3 database indices; all space separated.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut lines = text.lines();
        let mut parse_line = |row: usize| -> Result<Option<Vec<usize>>> {
            let Some(line) = lines.next() else {
                return Ok(None);
            };
            line.split_whitespace()
                .enumerate()
                .map(|(c, tok)| {
                    tok.parse::<usize>().map_err(|_| Error::Parse {
                        path: path.to_path_buf(),
                        row,
                        col: c + 1,
                        msg: format!("bad index {tok:?}"),
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map(Some)
        };
        let train = parse_line(1)?.ok_or_else(|| Error::format(path, "missing training line"))?;
        let query = parse_line(2)?.ok_or_else(|| Error::format(path, "missing query line"))?;
        let database = parse_line(3)?.filter(|d| !d.is_empty());
        Ok(Split {
            train,
            query,
            database,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(" ");
        let mut text = format!("{}\n{}\n", join(&self.train), join(&self.query));
        if let Some(db) = &self.database {
            text.push_str(&join(db));
            text.push('\n');
        }
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}

/// Per-instance label sets. Two instances are relevant to each other when
/// they share at least one label.
pub type Labels = Vec<Vec<u32>>;

/// Label file: one line per instance, labels separated by spaces or commas.
pub fn load_labels(path: &Path) -> Result<Labels> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(r, line)| {
            let mut set = line
                .split(|c: char| c == ',' || c.is_whitespace())
                .filter(|t| !t.is_empty())
                .enumerate()
                .map(|(c, tok)| {
                    tok.parse::<u32>().map_err(|_| Error::Parse {
                        path: path.to_path_buf(),
                        row: r + 1,
                        col: c + 1,
                        msg: format!("bad label {tok:?}"),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            set.sort_unstable();
            set.dedup();
            Ok(set)
        })
        .collect()
}

pub fn save_labels(path: &Path, labels: &Labels) -> Result<()> {
    let text: String = labels
        .iter()
        .map(|set| {
            let mut line = set.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
            line.push('\n');
            line
        })
        .collect();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub modalities: Vec<FeatureMatrix>,
    pub labels: Option<Labels>,
    pub split: Split,
}

impl Dataset {
    pub fn new(mut modalities: Vec<FeatureMatrix>, labels: Option<Labels>, split: Split) -> Result<Self> {
        if modalities.len() < 2 {
            return Err(Error::InvalidArgument(format!(
                "need at least two modalities, got {}",
                modalities.len()
            )));
        }
        let n = modalities[0].count();
        for (m, f) in modalities.iter_mut().enumerate() {
            if f.count() != n {
                return Err(Error::Shape(format!(
                    "modality {m} has {} instances, modality 0 has {n}",
                    f.count()
                )));
            }
            f.modality_id = m;
        }
        if let Some(l) = &labels {
            if l.len() != n {
                return Err(Error::Shape(format!(
                    "{} label rows for {n} instances",
                    l.len()
                )));
            }
        }
        split.validate(n)?;
        Ok(Self {
            modalities,
            labels,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.modalities[0].count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dims(&self) -> Vec<usize> {
        self.modalities.iter().map(FeatureMatrix::feature_dim).collect()
    }

    /// Per-dimension means over the training split, one vector per modality.
    pub fn training_means(&self) -> Vec<DVector<f64>> {
        self.modalities
            .iter()
            .map(|f| {
                let d = f.feature_dim();
                if self.split.train.is_empty() {
                    return DVector::zeros(d);
                }
                let mut sum = DVector::zeros(d);
                for &i in &self.split.train {
                    sum += f.data.column(i);
                }
                sum / self.split.train.len() as f64
            })
            .collect()
    }
}

/// Subtracts `mean` from every column.
pub fn center(data: &DMatrix<f64>, mean: &DVector<f64>) -> DMatrix<f64> {
    let mut out = data.clone();
    for mut col in out.column_iter_mut() {
        col -= mean;
    }
    out
}

/// Landmark instances shared by all modalities.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorSet {
    /// Dataset instance indices, ascending.
    pub indices: Vec<usize>,
    /// One `d_m × P` matrix per modality.
    pub anchors: Vec<DMatrix<f64>>,
}

impl AnchorSet {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Picks `p` distinct training instances uniformly without replacement.
pub fn sample_anchor_indices(train: &[usize], p: usize, seed: u64) -> Result<Vec<usize>> {
    if p > train.len() {
        return Err(Error::InvalidArgument(format!(
            "{p} anchors requested but the training set has {} instances",
            train.len()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, train.len(), p)
        .into_iter()
        .map(|i| train[i])
        .collect();
    picked.sort_unstable();
    Ok(picked)
}

pub fn sample_anchors(dataset: &Dataset, p: usize, seed: u64) -> Result<AnchorSet> {
    let indices = sample_anchor_indices(&dataset.split.train, p, seed)?;
    let anchors = dataset.modalities.iter().map(|f| f.select(&indices)).collect();
    Ok(AnchorSet { indices, anchors })
}

/// Parameters of the synthetic multi-modal generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub clusters: usize,
    pub count: usize,
    pub dims: Vec<usize>,
    pub noise: f64,
    pub seed: u64,
}

/// Generates `count` instances in `clusters` balanced Gaussian clusters.
///
/// All randomness comes from one `ChaCha8Rng` seeded with
/// `seed_from_u64(seed)`; normal draws use `rand_distr::StandardNormal`.
/// Draw order:
/// 1. latent codes, instance by instance: `z_i = e_{y_i} + noise·ξ_i` in
///    `R^clusters`, with `y_i = i mod clusters`;
/// 2. for each modality, the `d_m × clusters` embedding `R_m` column-major,
///    then per-instance noise so `x_i = R_m z_i + noise·ε_i`;
/// 3. a Fisher–Yates shuffle of `0..count` whose first `max(1, count/10)`
///    entries become the query set and the rest the training set.
pub fn synth_multimodal(spec: &SynthSpec) -> Result<Dataset> {
    let SynthSpec {
        clusters,
        count,
        ref dims,
        noise,
        seed,
    } = *spec;
    if clusters < 2 || count < clusters || dims.contains(&0) || dims.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "synthetic data needs C >= 2, N >= C, at least two modalities with dims >= 1 \
             (got C={clusters}, N={count}, dims={dims:?})"
        )));
    }
    if !noise.is_finite() || noise < 0.0 {
        return Err(Error::InvalidArgument(format!("noise must be >= 0, got {noise}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gauss = || -> f64 { StandardNormal.sample(&mut rng) };

    let labels: Vec<usize> = (0..count).map(|i| i % clusters).collect();
    let mut latent = DMatrix::zeros(clusters, count);
    for (i, &y) in labels.iter().enumerate() {
        for c in 0..clusters {
            let base = if c == y { 1.0 } else { 0.0 };
            latent[(c, i)] = base + noise * gauss();
        }
    }

    let mut modalities = Vec::with_capacity(dims.len());
    for (m, &d) in dims.iter().enumerate() {
        let embed = DMatrix::from_fn(d, clusters, |_, _| gauss());
        let mut x = &embed * &latent;
        for v in x.iter_mut() {
            *v += noise * gauss();
        }
        modalities.push(FeatureMatrix::new(m, x)?);
    }

    let mut order: Vec<usize> = (0..count).collect();
    {
        use rand::seq::SliceRandom;
        order.shuffle(&mut rng);
    }
    let n_query = (count / 10).max(1);
    let mut query = order[..n_query].to_vec();
    let mut train = order[n_query..].to_vec();
    query.sort_unstable();
    train.sort_unstable();

    let labels = labels.into_iter().map(|y| vec![y as u32]).collect();
    Dataset::new(
        modalities,
        Some(labels),
        Split {
            train,
            query,
            database: None,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write(dir: &tempfile::TempDir, name: &str, text: &str) -> std::path::PathBuf {
        let p = dir.path().join(name);
        std::fs::write(&p, text).unwrap();
        p
    }

    #[test]
    fn csv_two_by_three() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "x.csv", "1,2,3\n4,5,6\n");
        let f = load_features(&p, FeatureFormat::Csv).unwrap();
        assert_eq!((f.feature_dim(), f.count()), (2, 3));
        assert_eq!(f.data[(1, 2)], 6.0);
        assert_eq!(f.data[(0, 1)], 2.0);
    }

    #[test]
    fn csv_nan_names_cell() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "x.csv", "1,2,3\n4,NaN,6\n");
        let err = load_features(&p, FeatureFormat::Csv).unwrap_err();
        match &err {
            Error::Parse { row, col, .. } => assert_eq!((*row, *col), (2, 2)),
            other => panic!("unexpected {other:?}"),
        }
        assert!(err.to_string().contains("row 2, column 2"));
    }

    #[test]
    fn csv_ragged_rows_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = write(&dir, "x.csv", "1,2,3\n4,5\n");
        assert!(matches!(
            load_features(&p, FeatureFormat::Csv),
            Err(Error::Parse { row: 2, .. })
        ));
        let p = write(&dir, "y.csv", "1,abc\n");
        assert!(matches!(
            load_features(&p, FeatureFormat::Csv),
            Err(Error::Parse { row: 1, col: 2, .. })
        ));
    }

    #[test]
    fn bin_wiki_image_shape() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("img.bin");
        let data = DMatrix::from_fn(128, 2173, |i, j| (i * 7 + j) as f64 * 0.001 - 3.0);
        save_features_bin(&p, &data).unwrap();
        let f = load_features(&p, FeatureFormat::Bin).unwrap();
        assert_eq!((f.feature_dim(), f.count()), (128, 2173));
        assert_eq!(f.data, data);
        let len = std::fs::metadata(&p).unwrap().len();
        assert_eq!(len, 4 + 4 + 4 + 8 + 8 * 128 * 2173);
    }

    #[test]
    fn bin_layout_is_instance_contiguous() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        // d=2, N=2: columns (1,2) and (3,4)
        let data = DMatrix::from_column_slice(2, 2, &[1.0, 2.0, 3.0, 4.0]);
        save_features_bin(&p, &data).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(&bytes[..4], b"AGFM");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        assert_eq!(u64::from_le_bytes(bytes[12..20].try_into().unwrap()), 2);
        let vals: Vec<f64> = bytes[20..]
            .chunks(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        assert_eq!(vals, vec![1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn bin_rejects_truncation_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        save_features_bin(&p, &DMatrix::from_element(3, 3, 1.0)).unwrap();
        let mut bytes = std::fs::read(&p).unwrap();
        bytes.truncate(bytes.len() - 3);
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_features(&p, FeatureFormat::Bin), Err(Error::Format { .. })));
        bytes[0] = b'X';
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_features(&p, FeatureFormat::Bin), Err(Error::Format { .. })));
    }

    #[test]
    fn missing_file_is_io_error() {
        let err = load_features(Path::new("/nonexistent/feat.csv"), FeatureFormat::Csv).unwrap_err();
        assert_eq!(err.exit_code(), 2);
        assert!(err.to_string().contains("/nonexistent/feat.csv"));
    }

    fn toy_dataset(n: usize, train: Vec<usize>) -> Dataset {
        let a = FeatureMatrix::new(0, DMatrix::from_fn(2, n, |i, j| (i + j) as f64)).unwrap();
        let b = FeatureMatrix::new(1, DMatrix::from_fn(3, n, |i, j| (i * j) as f64)).unwrap();
        let query = (0..n).filter(|i| !train.contains(i)).collect();
        Dataset::new(
            vec![a, b],
            None,
            Split {
                train,
                query,
                database: None,
            },
        )
        .unwrap()
    }

    #[test]
    fn anchors_exhaustive_sample() {
        let ds = toy_dataset(10, vec![1, 3, 5, 7, 9]);
        for seed in [0, 1, 99] {
            let a = sample_anchors(&ds, 5, seed).unwrap();
            assert_eq!(a.indices, vec![1, 3, 5, 7, 9]);
        }
    }

    #[test]
    fn anchors_nus_scale() {
        let train: Vec<usize> = (0..5000).collect();
        let idx = sample_anchor_indices(&train, 900, 3).unwrap();
        let mut dedup = idx.clone();
        dedup.dedup();
        assert_eq!(dedup.len(), 900);
        assert_eq!(idx, sample_anchor_indices(&train, 900, 3).unwrap());
        assert_ne!(idx, sample_anchor_indices(&train, 900, 4).unwrap());
    }

    #[test]
    fn anchors_match_source_columns() {
        let ds = toy_dataset(12, (0..8).collect());
        let a = sample_anchors(&ds, 4, 11).unwrap();
        for (m, t) in a.anchors.iter().enumerate() {
            for (p, &i) in a.indices.iter().enumerate() {
                assert_eq!(t.column(p), ds.modalities[m].data.column(i));
            }
        }
        assert!(a.indices.iter().all(|i| ds.split.train.contains(i)));
        assert!(sample_anchors(&ds, 9, 0).is_err());
    }

    #[test]
    fn split_validation() {
        let ok = Split { train: vec![0, 1], query: vec![2], database: None };
        assert!(ok.validate(3).is_ok());
        let overlap = Split { train: vec![0, 1], query: vec![1], database: None };
        assert!(overlap.validate(3).is_err());
        let oob = Split { train: vec![0, 5], query: vec![], database: None };
        assert!(oob.validate(3).is_err());
    }

    #[test]
    fn split_and_labels_files_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let split = Split { train: vec![0, 2, 4], query: vec![1, 3], database: Some(vec![0, 1, 2, 4]) };
        let p = dir.path().join("split.txt");
        split.save(&p).unwrap();
        assert_eq!(Split::load(&p).unwrap(), split);
        let labels: Labels = vec![vec![1], vec![0, 3], vec![]];
        let p = dir.path().join("labels.txt");
        save_labels(&p, &labels).unwrap();
        assert_eq!(load_labels(&p).unwrap(), labels);
    }

    #[test]
    fn synth_zero_noise_is_separable() {
        let ds = synth_multimodal(&SynthSpec {
            clusters: 2,
            count: 40,
            dims: vec![3, 5],
            noise: 0.0,
            seed: 1,
        })
        .unwrap();
        let labels = ds.labels.as_ref().unwrap();
        for f in &ds.modalities {
            for i in 0..40 {
                for j in 0..40 {
                    let same = labels[i] == labels[j];
                    let dist = (f.data.column(i) - f.data.column(j)).norm();
                    if same {
                        assert_eq!(dist, 0.0);
                    } else {
                        assert!(dist > 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn synth_is_deterministic_and_balanced() {
        let spec = SynthSpec { clusters: 4, count: 2000, dims: vec![16, 24], noise: 0.1, seed: 5 };
        let a = synth_multimodal(&spec).unwrap();
        let b = synth_multimodal(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.split.query.len(), 200);
        assert_eq!(a.split.train.len(), 1800);
        let labels = a.labels.as_ref().unwrap();
        for c in 0..4u32 {
            assert_eq!(labels.iter().filter(|l| l[0] == c).count(), 500);
        }
        let other = synth_multimodal(&SynthSpec { seed: 6, ..spec }).unwrap();
        assert_ne!(a.modalities[0].data, other.modalities[0].data);
    }

    /// Label-consistency oracle: nearest class centroid recovers every label
    /// in each modality of the benchmark configuration.
    #[test]
    fn synth_benchmark_labels_consistent() {
        let spec = SynthSpec { clusters: 4, count: 2000, dims: vec![16, 24], noise: 0.1, seed: 0 };
        let ds = synth_multimodal(&spec).unwrap();
        let labels = ds.labels.as_ref().unwrap();
        for f in &ds.modalities {
            let d = f.feature_dim();
            let mut centroids = vec![DVector::<f64>::zeros(d); 4];
            let mut counts = [0usize; 4];
            for (i, l) in labels.iter().enumerate() {
                let y = l[0] as usize;
                centroids[y] += f.data.column(i);
                counts[y] += 1;
            }
            for (c, n) in centroids.iter_mut().zip(counts) {
                *c /= n as f64;
            }
            for (i, l) in labels.iter().enumerate() {
                let best = (0..4)
                    .min_by(|&a, &b| {
                        let da = (f.data.column(i) - &centroids[a]).norm();
                        let db = (f.data.column(i) - &centroids[b]).norm();
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                assert_eq!(best as u32, l[0]);
            }
        }
    }

    #[test]
    fn synth_preconditions() {
        let bad = SynthSpec { clusters: 1, count: 10, dims: vec![2, 2], noise: 0.0, seed: 0 };
        assert!(synth_multimodal(&bad).is_err());
        let bad = SynthSpec { clusters: 3, count: 2, dims: vec![2, 2], noise: 0.0, seed: 0 };
        assert!(synth_multimodal(&bad).is_err());
        let bad = SynthSpec { clusters: 2, count: 4, dims: vec![2, 0], noise: 0.0, seed: 0 };
        assert!(synth_multimodal(&bad).is_err());
    }

    #[test]
    fn centering_uses_training_means() {
        let ds = toy_dataset(6, vec![0, 1, 2]);
        let means = ds.training_means();
        // modality 0 rows are i + j, so training mean of row i is i + 1
        assert_eq!(means[0].as_slice(), &[1.0, 2.0]);
        let centered = center(&ds.modalities[0].select(&ds.split.train), &means[0]);
        assert!(centered.column_sum().iter().all(|v| v.abs() < 1e-12));
    }
}
