//! Bag/dataset model, the planted-factor synthetic generator, bag-file and
//! manifest persistence, and deterministic stratified splitting.
//!
//! A bag is one sample: a matrix of instance feature vectors plus a bag-level
//! class label. Synthetic bags additionally carry per-instance truth factors
//! (tumor cell, microenvironment, background) that evaluation may read but
//! training code paths never see.

use std::fmt;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{Matrix, SeededStream};

/// Magic bytes at the start of every binary bag file.
pub const BAG_MAGIC: [u8; 4] = *b"PGBF";
/// Current bag-file format version.
pub const BAG_VERSION: u32 = 1;

/// Semantic factor of an instance.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Factor {
    Tc,
    Me,
    Bg,
}

impl Factor {
    pub fn code(self) -> u8 {
        match self {
            Factor::Tc => 0,
            Factor::Me => 1,
            Factor::Bg => 2,
        }
    }

    pub fn from_code(code: u8) -> Option<Factor> {
        match code {
            0 => Some(Factor::Tc),
            1 => Some(Factor::Me),
            2 => Some(Factor::Bg),
            _ => None,
        }
    }
}

impl fmt::Display for Factor {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Factor::Tc => write!(f, "TC"),
            Factor::Me => write!(f, "ME"),
            Factor::Bg => write!(f, "BG"),
        }
    }
}

/// One sample: instance features, a bag-level label, and optional
/// ground-truth factor tags.
#[derive(Clone, Debug, PartialEq)]
pub struct Bag {
    pub features: Matrix,
    pub label: usize,
    pub bag_id: String,
    pub truth_factors: Option<Vec<Factor>>,
}

impl Bag {
    pub fn new(
        features: Matrix,
        label: usize,
        bag_id: impl Into<String>,
        truth_factors: Option<Vec<Factor>>,
    ) -> Result<Self> {
        if features.rows() < 3 {
            return Err(Error::InvalidInput(format!(
                "bag needs at least 3 instances, got {}",
                features.rows()
            )));
        }
        if let Some(tf) = &truth_factors {
            if tf.len() != features.rows() {
                return Err(Error::Dimension(format!(
                    "{} truth factors for {} instances",
                    tf.len(),
                    features.rows()
                )));
            }
        }
        Ok(Bag { features, label, bag_id: bag_id.into(), truth_factors })
    }

    pub fn num_instances(&self) -> usize {
        self.features.rows()
    }

    pub fn feature_dim(&self) -> usize {
        self.features.cols()
    }
}

/// A named collection of bags with a shared feature dimension and class count.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub bags: Vec<Bag>,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub name: String,
}

impl Dataset {
    pub fn new(
        bags: Vec<Bag>,
        num_classes: usize,
        feature_dim: usize,
        name: impl Into<String>,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {num_classes}")));
        }
        let mut seen = std::collections::HashSet::new();
        for bag in &bags {
            if bag.feature_dim() != feature_dim {
                return Err(Error::Dimension(format!(
                    "bag {} has feature dim {}, dataset declares {}",
                    bag.bag_id,
                    bag.feature_dim(),
                    feature_dim
                )));
            }
            if bag.label >= num_classes {
                return Err(Error::InvalidInput(format!(
                    "bag {} has label {} >= num_classes {}",
                    bag.bag_id, bag.label, num_classes
                )));
            }
            if !seen.insert(bag.bag_id.clone()) {
                return Err(Error::InvalidInput(format!("duplicate bag id {}", bag.bag_id)));
            }
        }
        Ok(Dataset { bags, num_classes, feature_dim, name: name.into() })
    }

    pub fn len(&self) -> usize {
        self.bags.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bags.is_empty()
    }
}

/// Configuration for the planted-factor synthetic benchmark.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_bags: usize,
    pub instances_per_bag: usize,
    pub d_in: usize,
    pub num_classes: usize,
    /// (tc, me, bg) instance fractions, summing to 1.
    pub fractions: (f64, f64, f64),
    /// Class-mean spacing in units of the component standard deviation.
    pub separation: f64,
    /// Fraction of the class signal leaked into the microenvironment component.
    pub me_leak: f64,
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            num_bags: 120,
            instances_per_bag: 30,
            d_in: 16,
            num_classes: 3,
            fractions: (0.2, 0.3, 0.5),
            separation: 4.0,
            me_leak: 0.15,
            noise_std: 1.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let (tc, me, bg) = self.fractions;
        if ((tc + me + bg) - 1.0).abs() > 1e-9 {
            return Err(Error::Config(format!(
                "fractions sum to {}, expected 1",
                tc + me + bg
            )));
        }
        if tc <= 0.0 || me <= 0.0 || bg <= 0.0 {
            return Err(Error::Config("each fraction must be > 0".into()));
        }
        if self.num_bags == 0 {
            return Err(Error::Config("num_bags must be >= 1".into()));
        }
        if self.instances_per_bag < 3 {
            return Err(Error::Config("instances_per_bag must be >= 3".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.d_in < self.num_classes {
            return Err(Error::Config(format!(
                "d_in {} too small to place {} orthogonal class means",
                self.d_in, self.num_classes
            )));
        }
        if self.separation < 0.0 {
            return Err(Error::Config("separation must be >= 0".into()));
        }
        if !(0.0..=1.0).contains(&self.me_leak) {
            return Err(Error::Config("me_leak must be in [0, 1]".into()));
        }
        if self.noise_std <= 0.0 {
            return Err(Error::Config("noise_std must be > 0".into()));
        }
        self.component_counts().map(|_| ())
    }

    /// Per-bag instance counts (tc, me, bg). TC and ME round to nearest; BG
    /// takes the remainder so the counts always total `instances_per_bag`.
    pub fn component_counts(&self) -> Result<(usize, usize, usize)> {
        let n = self.instances_per_bag as f64;
        let n_tc = (self.fractions.0 * n).round() as usize;
        let n_me = (self.fractions.1 * n).round() as usize;
        if n_tc == 0 || n_me == 0 || n_tc + n_me >= self.instances_per_bag {
            return Err(Error::Config(format!(
                "fractions {:?} round to degenerate counts ({n_tc}, {n_me}, {}) for {} instances",
                self.fractions,
                self.instances_per_bag as i64 - n_tc as i64 - n_me as i64,
                self.instances_per_bag
            )));
        }
        Ok((n_tc, n_me, self.instances_per_bag - n_tc - n_me))
    }
}

/// Generates a dataset with class signal planted in the TC component, an
/// optional leaked signal in ME, and none in BG. Deterministic in the seed.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<Dataset> {
    cfg.validate()?;
    let (n_tc, n_me, n_bg) = cfg.component_counts()?;
    let scale = cfg.separation * cfg.noise_std;

    // Class means on mutually orthogonal axes; the shared ME center sits on
    // the next free axis when one exists, so its bulk carries no class
    // information and only the me_leak term does.
    let mut class_means = Vec::with_capacity(cfg.num_classes);
    for c in 0..cfg.num_classes {
        let mut mu = vec![0.0; cfg.d_in];
        mu[c] = scale;
        class_means.push(mu);
    }
    let mean_of_means: Vec<f64> = (0..cfg.d_in)
        .map(|j| class_means.iter().map(|m| m[j]).sum::<f64>() / cfg.num_classes as f64)
        .collect();
    let mut me_center = vec![0.0; cfg.d_in];
    if cfg.d_in > cfg.num_classes {
        me_center[cfg.num_classes] = scale;
    }

    let mut stream = SeededStream::new(cfg.seed);
    let mut bags = Vec::with_capacity(cfg.num_bags);
    for b in 0..cfg.num_bags {
        let label = b % cfg.num_classes; // balanced to within one bag
        let mut rows = Vec::with_capacity(cfg.instances_per_bag);
        let mut factors = Vec::with_capacity(cfg.instances_per_bag);
        for _ in 0..n_tc {
            let row: Vec<f64> = (0..cfg.d_in)
                .map(|j| class_means[label][j] + cfg.noise_std * stream.draw_gaussian())
                .collect();
            rows.push(row);
            factors.push(Factor::Tc);
        }
        for _ in 0..n_me {
            let row: Vec<f64> = (0..cfg.d_in)
                .map(|j| {
                    me_center[j]
                        + cfg.me_leak * (class_means[label][j] - mean_of_means[j])
                        + cfg.noise_std * stream.draw_gaussian()
                })
                .collect();
            rows.push(row);
            factors.push(Factor::Me);
        }
        for _ in 0..n_bg {
            let row: Vec<f64> = (0..cfg.d_in)
                .map(|_| cfg.noise_std * stream.draw_gaussian())
                .collect();
            rows.push(row);
            factors.push(Factor::Bg);
        }
        let features = Matrix::from_rows(&rows)?;
        bags.push(Bag::new(features, label, format!("bag{b:05}"), Some(factors))?);
    }

    let name = format!(
        "synth-c{}-b{}-n{}-seed{}",
        cfg.num_classes, cfg.num_bags, cfg.instances_per_bag, cfg.seed
    );
    Dataset::new(bags, cfg.num_classes, cfg.d_in, name)
}

fn format_err(offset: u64, message: impl Into<String>) -> Error {
    Error::Format { offset, message: message.into() }
}

/// Writes a bag in the binary bag-file layout (little-endian): magic "PGBF",
/// u32 version, u32 n_instances, u32 d_in, u32 label, u8 truth flag,
/// optional n_instances factor codes, then n_instances·d_in f64 features.
pub fn write_bag_file(bag: &Bag, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(&BAG_MAGIC);
    buf.extend_from_slice(&BAG_VERSION.to_le_bytes());
    buf.extend_from_slice(&(bag.num_instances() as u32).to_le_bytes());
    buf.extend_from_slice(&(bag.feature_dim() as u32).to_le_bytes());
    buf.extend_from_slice(&(bag.label as u32).to_le_bytes());
    match &bag.truth_factors {
        Some(factors) => {
            buf.push(1);
            buf.extend(factors.iter().map(|f| f.code()));
        }
        None => buf.push(0),
    }
    for v in bag.features.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

/// Reads a binary bag file, reporting the byte offset of any malformed field.
pub fn load_bag_file(path: &Path) -> Result<Bag> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut pos: usize = 0;

    let take = |pos: &mut usize, len: usize| -> Result<&[u8]> {
        if *pos + len > bytes.len() {
            return Err(format_err(bytes.len() as u64, format!(
                "truncated: needed {} bytes at offset {}, file has {}",
                len, *pos, bytes.len()
            )));
        }
        let slice = &bytes[*pos..*pos + len];
        *pos += len;
        Ok(slice)
    };

    let magic = take(&mut pos, 4)?;
    if magic != BAG_MAGIC {
        return Err(format_err(0, format!("bad magic {magic:?}, expected {BAG_MAGIC:?}")));
    }
    let version = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap());
    if version != BAG_VERSION {
        return Err(format_err(4, format!("unsupported version {version}")));
    }
    let n = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let label = u32::from_le_bytes(take(&mut pos, 4)?.try_into().unwrap()) as usize;
    let flag_offset = pos as u64;
    let flag = take(&mut pos, 1)?[0];
    if flag > 1 {
        return Err(format_err(flag_offset, format!("truth flag must be 0 or 1, got {flag}")));
    }
    let truth_factors = if flag == 1 {
        let start = pos as u64;
        let codes = take(&mut pos, n)?;
        let mut factors = Vec::with_capacity(n);
        for (i, &code) in codes.iter().enumerate() {
            factors.push(Factor::from_code(code).ok_or_else(|| {
                format_err(start + i as u64, format!("invalid factor code {code}"))
            })?);
        }
        Some(factors)
    } else {
        None
    };
    let payload_start = pos as u64;
    let payload = take(&mut pos, n * d * 8)?;
    if pos != bytes.len() {
        return Err(format_err(pos as u64, format!("{} trailing bytes", bytes.len() - pos)));
    }
    let mut data = Vec::with_capacity(n * d);
    for (i, chunk) in payload.chunks_exact(8).enumerate() {
        let v = f64::from_le_bytes(chunk.try_into().unwrap());
        if !v.is_finite() {
            return Err(format_err(payload_start + (i * 8) as u64, format!("non-finite value {v}")));
        }
        data.push(v);
    }
    let features = Matrix::from_vec(n, d, data)?;
    let bag_id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| "bag".to_string());
    Bag::new(features, label, bag_id, truth_factors)
}

/// One bag entry in a dataset manifest.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ManifestBag {
    pub id: String,
    pub path: String,
    pub label: usize,
}

/// JSON manifest listing the bags of a dataset. Paths are resolved relative
/// to the manifest's directory.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub num_classes: usize,
    pub feature_dim: usize,
    pub bags: Vec<ManifestBag>,
}

/// Writes `bags/<id>.pgbf` files plus `manifest.json` under `dir`; returns
/// the manifest path.
pub fn save_dataset(ds: &Dataset, dir: &Path) -> Result<PathBuf> {
    let bag_dir = dir.join("bags");
    fs::create_dir_all(&bag_dir)?;
    let mut entries = Vec::with_capacity(ds.bags.len());
    for bag in &ds.bags {
        let rel = format!("bags/{}.pgbf", bag.bag_id);
        write_bag_file(bag, &dir.join(&rel))?;
        entries.push(ManifestBag { id: bag.bag_id.clone(), path: rel, label: bag.label });
    }
    let manifest = Manifest {
        name: ds.name.clone(),
        num_classes: ds.num_classes,
        feature_dim: ds.feature_dim,
        bags: entries,
    };
    let manifest_path = dir.join("manifest.json");
    fs::write(&manifest_path, serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest_path)
}

fn load_csv_bag(path: &Path, id: &str, label: usize) -> Result<Bag> {
    let text = fs::read_to_string(path)?;
    let mut rows: Vec<Vec<f64>> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let mut row = Vec::new();
        for field in line.split(',') {
            let v: f64 = field.trim().parse().map_err(|_| {
                format_err(
                    (lineno + 1) as u64,
                    format!("line {}: cannot parse '{}' as a number", lineno + 1, field.trim()),
                )
            })?;
            row.push(v);
        }
        if let Some(first) = rows.first() {
            if row.len() != first.len() {
                return Err(format_err(
                    (lineno + 1) as u64,
                    format!("line {}: {} columns, expected {}", lineno + 1, row.len(), first.len()),
                ));
            }
        }
        rows.push(row);
    }
    let features = Matrix::from_rows(&rows)?;
    Bag::new(features, label, id, None)
}

/// Loads a dataset from a manifest. Bag entries ending in `.csv` are parsed
/// as one-instance-per-row CSV; anything else is read as a binary bag file.
pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let text = fs::read_to_string(manifest_path)?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    let base = manifest_path.parent().unwrap_or_else(|| Path::new("."));
    let mut bags = Vec::with_capacity(manifest.bags.len());
    for entry in &manifest.bags {
        let path = base.join(&entry.path);
        let bag = if entry.path.ends_with(".csv") {
            load_csv_bag(&path, &entry.id, entry.label)?
        } else {
            let mut bag = load_bag_file(&path)?;
            if bag.label != entry.label {
                return Err(Error::Format {
                    offset: 16,
                    message: format!(
                        "bag file {} has label {}, manifest says {}",
                        entry.path, bag.label, entry.label
                    ),
                });
            }
            bag.bag_id = entry.id.clone();
            bag
        };
        bags.push(bag);
    }
    Dataset::new(bags, manifest.num_classes, manifest.feature_dim, manifest.name)
}

/// Stratified train/validation split: each class is shuffled with a seed
/// derived from (seed, class) and cut at round(train_ratio · class size).
pub fn split_dataset(ds: &Dataset, train_ratio: f64, seed: u64) -> Result<(Dataset, Dataset)> {
    if !(0.0 < train_ratio && train_ratio < 1.0) {
        return Err(Error::Config(format!("train_ratio {train_ratio} not in (0, 1)")));
    }
    let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); ds.num_classes];
    for (i, bag) in ds.bags.iter().enumerate() {
        per_class[bag.label].push(i);
    }
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for (class, indices) in per_class.iter_mut().enumerate() {
        if indices.len() < 2 {
            return Err(Error::Split(format!(
                "class {class} has {} bags; need at least 2 to split",
                indices.len()
            )));
        }
        let mut stream = SeededStream::derived(seed, class as u64);
        stream.shuffle(indices);
        let n_train = ((train_ratio * indices.len() as f64).round() as usize)
            .clamp(1, indices.len() - 1);
        train_idx.extend_from_slice(&indices[..n_train]);
        val_idx.extend_from_slice(&indices[n_train..]);
    }
    // Keep the original bag order within each side.
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    let subset = |idx: &[usize], suffix: &str| {
        Dataset::new(
            idx.iter().map(|&i| ds.bags[i].clone()).collect(),
            ds.num_classes,
            ds.feature_dim,
            format!("{}-{}", ds.name, suffix),
        )
    };
    Ok((subset(&train_idx, "train")?, subset(&val_idx, "val")?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::mean_of_rows;

    fn small_cfg() -> SynthConfig {
        SynthConfig {
            num_bags: 60,
            instances_per_bag: 30,
            d_in: 16,
            num_classes: 3,
            fractions: (0.2, 0.3, 0.5),
            separation: 4.0,
            me_leak: 0.0,
            noise_std: 1.0,
            seed: 0,
        }
    }

    #[test]
    fn generator_counts_match_config() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        assert_eq!(ds.len(), 60);
        let mut class_counts = [0usize; 3];
        for bag in &ds.bags {
            class_counts[bag.label] += 1;
            let factors = bag.truth_factors.as_ref().unwrap();
            let tc = factors.iter().filter(|f| **f == Factor::Tc).count();
            let me = factors.iter().filter(|f| **f == Factor::Me).count();
            let bg = factors.iter().filter(|f| **f == Factor::Bg).count();
            assert_eq!((tc, me, bg), (6, 9, 15));
        }
        assert_eq!(class_counts, [20, 20, 20]);
    }

    #[test]
    fn generator_is_deterministic() {
        let a = generate_synthetic(&small_cfg()).unwrap();
        let b = generate_synthetic(&small_cfg()).unwrap();
        for (x, y) in a.bags.iter().zip(b.bags.iter()) {
            assert_eq!(x.features, y.features);
        }
    }

    #[test]
    fn degenerate_fractions_rejected() {
        let cfg = SynthConfig { fractions: (0.01, 0.01, 0.98), ..small_cfg() };
        assert!(matches!(generate_synthetic(&cfg), Err(Error::Config(_))));
    }

    /// Nearest-class-centroid classifier on the means of truth-TC instances.
    /// This is the independent signal oracle for the generator.
    fn tc_mean_oracle_accuracy(cfg: &SynthConfig) -> f64 {
        let ds = generate_synthetic(cfg).unwrap();
        let (train, val) = split_dataset(&ds, 0.6, 17).unwrap();
        let tc_mean = |bag: &Bag| -> Vec<f64> {
            let factors = bag.truth_factors.as_ref().unwrap();
            let rows: Vec<&[f64]> = (0..bag.num_instances())
                .filter(|&i| factors[i] == Factor::Tc)
                .map(|i| bag.features.row(i))
                .collect();
            mean_of_rows(&rows)
        };
        let mut centroids: Vec<Vec<Vec<f64>>> = vec![Vec::new(); ds.num_classes];
        for bag in &train.bags {
            centroids[bag.label].push(tc_mean(bag));
        }
        let class_centers: Vec<Vec<f64>> = centroids
            .iter()
            .map(|rows| {
                let refs: Vec<&[f64]> = rows.iter().map(|r| r.as_slice()).collect();
                mean_of_rows(&refs)
            })
            .collect();
        let mut correct = 0;
        for bag in &val.bags {
            let m = tc_mean(bag);
            let pred = class_centers
                .iter()
                .enumerate()
                .min_by(|(_, a), (_, b)| {
                    let da: f64 = a.iter().zip(&m).map(|(x, y)| (x - y) * (x - y)).sum();
                    let db: f64 = b.iter().zip(&m).map(|(x, y)| (x - y) * (x - y)).sum();
                    da.total_cmp(&db)
                })
                .map(|(c, _)| c)
                .unwrap();
            if pred == bag.label {
                correct += 1;
            }
        }
        correct as f64 / val.len() as f64
    }

    #[test]
    fn oracle_classifier_on_separated_data() {
        assert!(tc_mean_oracle_accuracy(&small_cfg()) >= 0.98);
    }

    #[test]
    fn oracle_accuracy_monotone_in_separation() {
        let acc_at = |sep: f64| tc_mean_oracle_accuracy(&SynthConfig { separation: sep, ..small_cfg() });
        let a0 = acc_at(0.0);
        let a2 = acc_at(2.0);
        let a4 = acc_at(4.0);
        assert!(a0 <= a2 + 1e-12 && a2 <= a4 + 1e-12, "{a0} {a2} {a4}");
        assert!(a0 < 0.7, "no-signal accuracy should be near chance, got {a0}");
    }

    #[test]
    fn bag_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&SynthConfig { num_bags: 2, ..small_cfg() }).unwrap();
        let path = dir.path().join("b.pgbf");
        write_bag_file(&ds.bags[0], &path).unwrap();
        let loaded = load_bag_file(&path).unwrap();
        assert_eq!(loaded.features, ds.bags[0].features);
        assert_eq!(loaded.label, ds.bags[0].label);
        assert_eq!(loaded.truth_factors, ds.bags[0].truth_factors);
    }

    #[test]
    fn bag_file_payload_size() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&SynthConfig { num_bags: 1, ..small_cfg() }).unwrap();
        let path = dir.path().join("b.pgbf");
        write_bag_file(&ds.bags[0], &path).unwrap();
        let len = std::fs::metadata(&path).unwrap().len();
        // header: 4 magic + 4 version + 12 dims/label + 1 flag + 30 codes
        assert_eq!(len, 4 + 4 + 12 + 1 + 30 + 30 * 16 * 8);
    }

    #[test]
    fn bag_file_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&SynthConfig { num_bags: 1, ..small_cfg() }).unwrap();
        let path = dir.path().join("b.pgbf");
        write_bag_file(&ds.bags[0], &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'X';
        std::fs::write(&path, &bytes).unwrap();
        match load_bag_file(&path) {
            Err(Error::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("expected format error, got {other:?}"),
        }
    }

    #[test]
    fn bag_file_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&SynthConfig { num_bags: 1, ..small_cfg() }).unwrap();
        let path = dir.path().join("b.pgbf");
        write_bag_file(&ds.bags[0], &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 5]).unwrap();
        assert!(matches!(load_bag_file(&path), Err(Error::Format { .. })));
    }

    #[test]
    fn dataset_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let ds = generate_synthetic(&SynthConfig { num_bags: 6, ..small_cfg() }).unwrap();
        let manifest = save_dataset(&ds, dir.path()).unwrap();
        let loaded = load_dataset(&manifest).unwrap();
        assert_eq!(loaded.len(), ds.len());
        assert_eq!(loaded.num_classes, ds.num_classes);
        for (a, b) in loaded.bags.iter().zip(ds.bags.iter()) {
            assert_eq!(a.features, b.features);
            assert_eq!(a.bag_id, b.bag_id);
        }
    }

    #[test]
    fn csv_bags_load_through_manifest() {
        let dir = tempfile::tempdir().unwrap();
        std::fs::write(dir.path().join("a.csv"), "1.0,2.0\n3.0,4.0\n5.0,6.0\n").unwrap();
        std::fs::write(dir.path().join("b.csv"), "0.5,0.5\n1.5,2.5\n-1.0,0.0\n").unwrap();
        let manifest = Manifest {
            name: "csv-test".into(),
            num_classes: 2,
            feature_dim: 2,
            bags: vec![
                ManifestBag { id: "a".into(), path: "a.csv".into(), label: 0 },
                ManifestBag { id: "b".into(), path: "b.csv".into(), label: 1 },
            ],
        };
        let mpath = dir.path().join("manifest.json");
        std::fs::write(&mpath, serde_json::to_string(&manifest).unwrap()).unwrap();
        let ds = load_dataset(&mpath).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.bags[0].features.row(1), &[3.0, 4.0]);
        assert_eq!(ds.bags[1].label, 1);
    }

    #[test]
    fn split_is_stratified_and_deterministic() {
        let ds = generate_synthetic(&small_cfg()).unwrap();
        let (train, val) = split_dataset(&ds, 0.6, 0).unwrap();
        let count = |d: &Dataset, c: usize| d.bags.iter().filter(|b| b.label == c).count();
        for c in 0..3 {
            assert_eq!(count(&train, c), 12);
            assert_eq!(count(&val, c), 8);
        }
        let (train2, val2) = split_dataset(&ds, 0.6, 0).unwrap();
        let ids = |d: &Dataset| d.bags.iter().map(|b| b.bag_id.clone()).collect::<Vec<_>>();
        assert_eq!(ids(&train), ids(&train2));
        assert_eq!(ids(&val), ids(&val2));
    }

    #[test]
    fn split_is_a_partition() {
        let ds = generate_synthetic(&SynthConfig { num_bags: 21, ..small_cfg() }).unwrap();
        let (train, val) = split_dataset(&ds, 0.7, 5).unwrap();
        let mut all: Vec<String> = train.bags.iter().chain(val.bags.iter()).map(|b| b.bag_id.clone()).collect();
        all.sort();
        let mut orig: Vec<String> = ds.bags.iter().map(|b| b.bag_id.clone()).collect();
        orig.sort();
        assert_eq!(all, orig);
    }

    #[test]
    fn split_rejects_thin_classes() {
        let ds = generate_synthetic(&SynthConfig { num_bags: 4, ..small_cfg() }).unwrap();
        // 4 bags over 3 classes leaves at least one class with a single bag
        assert!(matches!(split_dataset(&ds, 0.6, 0), Err(Error::Split(_))));
    }
}
