//! Dataset loading, splitting and batching.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, Read};
use std::path::Path;

use flate2::read::GzDecoder;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
pub const ECG_SIGNAL_LEN: usize = 187;
pub const ECG_CLASSES: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    /// `[n_samples, n_features]`.
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl LabeledDataset {
    pub fn new(features: Tensor, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if features.rank() != 2 || features.rows() != labels.len() {
            return Err(Error::shape("LabeledDataset", features.shape(), &[labels.len()]));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= n_classes) {
            return Err(Error::BadLabel {
                line: i + 1,
                value: l.to_string(),
                n_classes,
            });
        }
        if !features.all_finite() {
            return Err(Error::InvalidArgument("dataset contains non-finite features".into()));
        }
        Ok(Self {
            features,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            features: self.features.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
            n_classes: self.n_classes,
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Row-wise concatenation of datasets with the same feature width.
    pub fn concat(parts: &[LabeledDataset]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("nothing to concatenate".into()))?;
        let (cols, n_classes) = (first.n_features(), first.n_classes);
        let mut data = Vec::new();
        let mut labels = Vec::new();
        for p in parts {
            if p.n_features() != cols || p.n_classes != n_classes {
                return Err(Error::shape("concat", first.features.shape(), p.features.shape()));
            }
            data.extend_from_slice(p.features.data());
            labels.extend_from_slice(&p.labels);
        }
        Self::new(Tensor::matrix(labels.len(), cols, data)?, labels, n_classes)
    }
}

fn read_maybe_gz(path: &Path) -> Result<Vec<u8>> {
    let mut raw = Vec::new();
    File::open(path)?.read_to_end(&mut raw)?;
    if raw.starts_with(&[0x1f, 0x8b]) {
        let mut out = Vec::new();
        GzDecoder::new(raw.as_slice()).read_to_end(&mut out)?;
        Ok(out)
    } else {
        Ok(raw)
    }
}

fn be_u32(buf: &[u8], at: usize, what: &str) -> Result<u32> {
    buf.get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::TruncatedFile(format!("{what}: header ends at byte {}", buf.len())))
}

/// Parses an IDX image file: magic `0x00000803`, count, rows, cols, then one
/// byte per pixel. Pixels are scaled to `[0, 1]`.
pub fn parse_idx_images(buf: &[u8]) -> Result<Tensor> {
    let magic = be_u32(buf, 0, "images")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: IDX_IMAGES_MAGIC,
        });
    }
    let n = be_u32(buf, 4, "images")? as usize;
    let rows = be_u32(buf, 8, "images")? as usize;
    let cols = be_u32(buf, 12, "images")? as usize;
    let need = n * rows * cols;
    let pixels = &buf[16..];
    if pixels.len() < need {
        return Err(Error::TruncatedFile(format!(
            "images: expected {need} pixel bytes, found {}",
            pixels.len()
        )));
    }
    let data = pixels[..need].iter().map(|&p| p as f64 / 255.0).collect();
    Tensor::matrix(n, rows * cols, data)
}

/// Parses an IDX label file: magic `0x00000801`, count, then one byte per label.
pub fn parse_idx_labels(buf: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(buf, 0, "labels")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            found: magic,
            expected: IDX_LABELS_MAGIC,
        });
    }
    let n = be_u32(buf, 4, "labels")? as usize;
    let body = &buf[8..];
    if body.len() < n {
        return Err(Error::TruncatedFile(format!(
            "labels: expected {n} bytes, found {}",
            body.len()
        )));
    }
    Ok(body[..n].iter().map(|&b| b as usize).collect())
}

/// Loads an MNIST image/label pair. Either file may be gzip-compressed.
pub fn load_mnist_idx(images_path: impl AsRef<Path>, labels_path: impl AsRef<Path>) -> Result<LabeledDataset> {
    let images = parse_idx_images(&read_maybe_gz(images_path.as_ref())?)?;
    let labels = parse_idx_labels(&read_maybe_gz(labels_path.as_ref())?)?;
    if images.rows() != labels.len() {
        return Err(Error::CountMismatch {
            images: images.rows(),
            labels: labels.len(),
        });
    }
    LabeledDataset::new(images, labels, 10)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EcgCsvOptions {
    /// Skip the first line.
    pub has_header: bool,
}

/// Loads a heartbeat CSV: 187 samples in `[0, 1]` followed by the class label
/// (0..=4, possibly written as a float such as `2.0`).
pub fn load_ecg_csv(path: impl AsRef<Path>) -> Result<LabeledDataset> {
    load_ecg_csv_with(path, EcgCsvOptions::default())
}

pub fn load_ecg_csv_with(path: impl AsRef<Path>, opts: EcgCsvOptions) -> Result<LabeledDataset> {
    parse_ecg_csv(BufReader::new(File::open(path)?), opts)
}

pub fn parse_ecg_csv(reader: impl BufRead, opts: EcgCsvOptions) -> Result<LabeledDataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = i + 1;
        if (opts.has_header && i == 0) || line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.trim_end().split(',').collect();
        if fields.len() != ECG_SIGNAL_LEN + 1 {
            return Err(Error::BadRowLength {
                line: lineno,
                expected: ECG_SIGNAL_LEN + 1,
                found: fields.len(),
            });
        }
        for f in &fields[..ECG_SIGNAL_LEN] {
            let v: f64 = f.trim().parse().map_err(|_| Error::NonFiniteValue {
                line: lineno,
                value: f.to_string(),
            })?;
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::NonFiniteValue {
                    line: lineno,
                    value: f.to_string(),
                });
            }
            data.push(v);
        }
        let raw = fields[ECG_SIGNAL_LEN].trim();
        let bad = || Error::BadLabel {
            line: lineno,
            value: raw.to_string(),
            n_classes: ECG_CLASSES,
        };
        let label: f64 = raw.parse().map_err(|_| bad())?;
        if label.fract() != 0.0 || !(0.0..ECG_CLASSES as f64).contains(&label) {
            return Err(bad());
        }
        labels.push(label as usize);
    }
    let n = labels.len();
    LabeledDataset::new(Tensor::matrix(n, ECG_SIGNAL_LEN, data)?, labels, ECG_CLASSES)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequencePair {
    pub input: Vec<f64>,
    pub target: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SequenceDataset {
    pub series: Vec<SequencePair>,
    /// Sample times of the underlying signal (one more than the steps).
    pub times: Vec<f64>,
}

impl SequenceDataset {
    pub fn new(series: Vec<SequencePair>, times: Vec<f64>) -> Result<Self> {
        for p in &series {
            if p.input.len() != p.target.len() {
                return Err(Error::shape("SequenceDataset", &[p.input.len()], &[p.target.len()]));
            }
        }
        Ok(Self { series, times })
    }
}

/// Next-step prediction on `sin(t)`, `t` uniform on `[0, total_length]`:
/// input `sin(t_i)`, target `sin(t_{i+1})`, giving `n_points - 1` steps.
pub fn gen_sine(total_length: f64, n_points: usize) -> Result<SequenceDataset> {
    if n_points < 2 {
        return Err(Error::InvalidArgument("sine wave needs at least 2 points".into()));
    }
    if !(total_length > 0.0) {
        return Err(Error::InvalidArgument("sine length must be positive".into()));
    }
    let dt = total_length / (n_points - 1) as f64;
    let times: Vec<f64> = (0..n_points).map(|i| i as f64 * dt).collect();
    let values: Vec<f64> = times.iter().map(|t| t.sin()).collect();
    let pair = SequencePair {
        input: values[..n_points - 1].to_vec(),
        target: values[1..].to_vec(),
    };
    SequenceDataset::new(vec![pair], times)
}

/// Default sine task: `16 pi` long, 512 points.
pub fn default_sine() -> SequenceDataset {
    gen_sine(16.0 * std::f64::consts::PI, 512).expect("valid defaults")
}

/// Per-class counts that sum to `n` and stay within one sample of the exact
/// proportional share (largest-remainder rounding, ties by class index).
pub fn proportional_counts(counts: &[usize], n: usize) -> Vec<usize> {
    allocate(counts, counts, n)
}

/// Largest-remainder allocation of `n` by `weights`, never exceeding `caps`.
fn allocate(weights: &[usize], caps: &[usize], n: usize) -> Vec<usize> {
    let total: usize = weights.iter().sum();
    if total == 0 {
        return vec![0; weights.len()];
    }
    let n = n.min(caps.iter().sum());
    let exact: Vec<f64> = weights.iter().map(|&c| c as f64 * n as f64 / total as f64).collect();
    let mut out: Vec<usize> = exact
        .iter()
        .zip(caps)
        .map(|(e, &cap)| (e.floor() as usize).min(cap))
        .collect();
    let mut missing = n - out.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..weights.len()).collect();
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    while missing > 0 {
        for &c in &order {
            if missing > 0 && out[c] < caps[c] {
                out[c] += 1;
                missing -= 1;
            }
        }
    }
    out
}

fn indices_by_class(ds: &LabeledDataset, rng: &mut ChaCha8Rng) -> BTreeMap<usize, Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, &l) in ds.labels.iter().enumerate() {
        by_class.entry(l).or_default().push(i);
    }
    for idx in by_class.values_mut() {
        idx.shuffle(rng);
    }
    by_class
}

/// Draws `n` samples with class proportions preserved. Returns the drawn
/// subset and the remainder, both in original order.
pub fn stratified_take(ds: &LabeledDataset, n: usize, seed: u64) -> Result<(LabeledDataset, LabeledDataset)> {
    if n > ds.len() {
        return Err(Error::InvalidArgument(format!(
            "requested {n} samples but only {} are available",
            ds.len()
        )));
    }
    let quota = proportional_counts(&ds.class_counts(), n);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = vec![false; ds.len()];
    for (class, idx) in indices_by_class(ds, &mut rng) {
        for &i in &idx[..quota[class]] {
            chosen[i] = true;
        }
    }
    let (take, rest): (Vec<usize>, Vec<usize>) = (0..ds.len()).partition(|&i| chosen[i]);
    Ok((ds.subset(&take), ds.subset(&rest)))
}

/// Seeded stratified train/test split of a pool.
pub fn stratified_split(
    pool: &LabeledDataset,
    n_train: usize,
    n_test: usize,
    seed: u64,
) -> Result<(LabeledDataset, LabeledDataset)> {
    if n_train + n_test > pool.len() {
        return Err(Error::InvalidArgument(format!(
            "requested {n_train} train + {n_test} test samples but the pool has {}",
            pool.len()
        )));
    }
    let counts = pool.class_counts();
    let test_quota = proportional_counts(&counts, n_test);
    let spare: Vec<usize> = counts.iter().zip(&test_quota).map(|(c, t)| c - t).collect();
    let train_quota = allocate(&counts, &spare, n_train);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut train, mut test) = (Vec::with_capacity(n_train), Vec::with_capacity(n_test));
    for (class, idx) in indices_by_class(pool, &mut rng) {
        let (t, rest) = idx.split_at(test_quota[class]);
        test.extend_from_slice(t);
        train.extend_from_slice(&rest[..train_quota[class]]);
    }
    train.sort_unstable();
    test.sort_unstable();
    Ok((pool.subset(&train), pool.subset(&test)))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub indices: Vec<usize>,
}

/// Shuffled mini-batches for one epoch. The order depends only on `(seed,
/// epoch)`; the last batch may be short.
pub fn batch_iter(ds: &LabeledDataset, batch_size: usize, seed: u64, epoch: u64) -> impl Iterator<Item = Batch> + '_ {
    assert!(batch_size >= 1, "batch_size must be >= 1");
    let order = epoch_order(ds.len(), seed, epoch);
    let chunks: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    chunks.into_iter().map(move |idx| Batch {
        features: ds.features.select_rows(&idx),
        labels: idx.iter().map(|&i| ds.labels[i]).collect(),
        indices: idx,
    })
}

/// Seeded permutation of `0..n` for a given epoch.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::Cursor;

    fn idx_images(n: u32, rows: u32, cols: u32, pixels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        for x in [IDX_IMAGES_MAGIC, n, rows, cols] {
            v.extend_from_slice(&x.to_be_bytes());
        }
        v.extend_from_slice(pixels);
        v
    }

    fn idx_labels(labels: &[u8]) -> Vec<u8> {
        let mut v = Vec::new();
        v.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
        v.extend_from_slice(&(labels.len() as u32).to_be_bytes());
        v.extend_from_slice(labels);
        v
    }

    #[test]
    fn parses_images_and_scales_pixels() {
        let buf = idx_images(2, 2, 2, &[0, 255, 51, 102, 0, 0, 0, 255]);
        let t = parse_idx_images(&buf).unwrap();
        assert_eq!(t.shape(), &[2, 4]);
        assert_eq!(t.row(0), &[0.0, 1.0, 0.2, 0.4]);
        assert!(t.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut buf = idx_images(1, 1, 1, &[0]);
        buf[3] = 0x02;
        assert!(matches!(
            parse_idx_images(&buf),
            Err(Error::BadMagic { found: 0x802, .. })
        ));
        assert!(matches!(
            parse_idx_labels(&idx_images(1, 1, 1, &[0])),
            Err(Error::BadMagic { .. })
        ));
    }

    #[test]
    fn truncated_files_are_rejected() {
        let buf = idx_images(3, 2, 2, &[0; 7]);
        assert!(matches!(parse_idx_images(&buf), Err(Error::TruncatedFile(_))));
        assert!(matches!(parse_idx_images(&buf[..10]), Err(Error::TruncatedFile(_))));
        let mut labels = idx_labels(&[1, 2, 3]);
        labels.pop();
        assert!(matches!(parse_idx_labels(&labels), Err(Error::TruncatedFile(_))));
    }

    fn ecg_row(label: &str) -> String {
        let mut fields: Vec<String> = (0..ECG_SIGNAL_LEN).map(|i| format!("{}", i as f64 / 200.0)).collect();
        fields.push(label.to_string());
        fields.join(",")
    }

    #[test]
    fn parses_ecg_rows() {
        let text = format!("{}\n{}\n", ecg_row("0.000000000000000000e+00"), ecg_row("4"));
        let ds = parse_ecg_csv(Cursor::new(text), EcgCsvOptions::default()).unwrap();
        assert_eq!(ds.len(), 2);
        assert_eq!(ds.n_features(), 187);
        assert_eq!(ds.labels, vec![0, 4]);
        assert_eq!(ds.n_classes, 5);
    }

    #[test]
    fn ecg_header_is_optional() {
        let text = format!("h{}\n{}\n", ",x".repeat(187), ecg_row("1"));
        assert!(parse_ecg_csv(Cursor::new(text.clone()), EcgCsvOptions::default()).is_err());
        let ds = parse_ecg_csv(Cursor::new(text), EcgCsvOptions { has_header: true }).unwrap();
        assert_eq!(ds.labels, vec![1]);
    }

    #[test]
    fn ecg_bad_label() {
        let text = ecg_row("7");
        assert!(matches!(
            parse_ecg_csv(Cursor::new(text), EcgCsvOptions::default()),
            Err(Error::BadLabel { line: 1, .. })
        ));
        let text = ecg_row("1.5");
        assert!(matches!(
            parse_ecg_csv(Cursor::new(text), EcgCsvOptions::default()),
            Err(Error::BadLabel { .. })
        ));
    }

    #[test]
    fn ecg_bad_row_length() {
        let text = vec!["0.5"; 100].join(",");
        assert!(matches!(
            parse_ecg_csv(Cursor::new(text), EcgCsvOptions::default()),
            Err(Error::BadRowLength { found: 100, .. })
        ));
    }

    #[test]
    fn ecg_non_finite_and_out_of_range() {
        for bad in ["nan", "inf", "1.5", "abc"] {
            let text = ecg_row("0").replacen("0.005", bad, 1);
            assert!(matches!(
                parse_ecg_csv(Cursor::new(text), EcgCsvOptions::default()),
                Err(Error::NonFiniteValue { .. })
            ));
        }
    }

    #[test]
    fn sine_small_case() {
        let ds = gen_sine(2.0 * std::f64::consts::PI, 3).unwrap();
        let p = &ds.series[0];
        assert_eq!(p.input.len(), 2);
        assert_eq!(p.input[0], 0.0);
        assert!(p.input[1].abs() < 1e-15);
        assert!(p.target[0].abs() < 1e-15);
        assert!(gen_sine(1.0, 1).is_err());
    }

    #[test]
    fn default_sine_shape() {
        let ds = default_sine();
        assert_eq!(ds.series[0].input.len(), 511);
        assert_eq!(ds.times.len(), 512);
        assert!(ds.series[0]
            .input
            .iter()
            .chain(&ds.series[0].target)
            .all(|v| (-1.0..=1.0).contains(v)));
    }

    fn toy(n: usize, classes: usize) -> LabeledDataset {
        let features = Tensor::matrix(n, 1, (0..n).map(|i| i as f64).collect()).unwrap();
        let labels = (0..n).map(|i| (i * 7 + i / 3) % classes).collect();
        LabeledDataset::new(features, labels, classes).unwrap()
    }

    #[test]
    fn batches_cover_dataset_once() {
        let ds = toy(10, 2);
        let batches: Vec<_> = batch_iter(&ds, 4, 9, 0).collect();
        assert_eq!(batches.iter().map(|b| b.labels.len()).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut seen: Vec<usize> = batches.iter().flat_map(|b| b.indices.clone()).collect();
        seen.sort();
        assert_eq!(seen, (0..10).collect::<Vec<_>>());
        let again: Vec<_> = batch_iter(&ds, 4, 9, 0).collect();
        assert_eq!(batches, again);
        let other: Vec<_> = batch_iter(&ds, 4, 9, 1).collect();
        assert_ne!(batches, other);
    }

    #[test]
    fn proportional_counts_within_one() {
        let counts = [500, 130, 40, 7, 323];
        for n in [0, 1, 17, 100, 999, 1000] {
            let q = proportional_counts(&counts, n);
            assert_eq!(q.iter().sum::<usize>(), n);
            for (c, k) in counts.iter().zip(&q) {
                let exact = *c as f64 * n as f64 / 1000.0;
                assert!((*k as f64 - exact).abs() < 1.0 + 1e-9);
            }
        }
    }

    #[test]
    fn stratified_split_preserves_proportions() {
        let ds = toy(1000, 5);
        let (train, test) = stratified_split(&ds, 600, 200, 3).unwrap();
        assert_eq!((train.len(), test.len()), (600, 200));
        let full = ds.class_counts();
        for (set, n) in [(&train, 600.0), (&test, 200.0)] {
            for (c, k) in full.iter().zip(set.class_counts()) {
                let exact = *c as f64 * n / 1000.0;
                assert!((k as f64 - exact).abs() <= 1.0 + 1e-9, "{k} vs {exact}");
            }
        }
        let mut ids: Vec<f64> = train.features.data().iter().chain(test.features.data()).cloned().collect();
        ids.sort_by(f64::total_cmp);
        ids.dedup();
        assert_eq!(ids.len(), 800);
        assert!(stratified_split(&ds, 900, 200, 3).is_err());
    }
}
