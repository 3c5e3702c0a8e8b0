//! Digits dataset ingestion, splitting and distribution-shift variants.

use std::io::{Read, Write};
use std::path::Path;

use faer::Mat;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const DIGITS_PIXELS: usize = 64;
pub const NUM_CLASSES: usize = 10;
const PIXEL_MAX: f64 = 16.0;

/// Labelled examples with features in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    features: Mat<f64>,
    labels: Vec<usize>,
    name: String,
}

impl Dataset {
    pub fn new(features: Mat<f64>, labels: Vec<usize>, name: impl Into<String>) -> Result<Self> {
        if features.nrows() == 0 {
            return Err(Error::InvalidArgument("dataset has no examples".into()));
        }
        if features.nrows() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "{} feature rows but {} labels",
                features.nrows(),
                labels.len()
            )));
        }
        for j in 0..features.ncols() {
            if let Some(v) = features.col(j).iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidArgument(format!(
                    "feature value {v} outside [0, 1] in column {j}"
                )));
            }
        }
        if let Some(l) = labels.iter().find(|&&l| l >= NUM_CLASSES) {
            return Err(Error::InvalidArgument(format!("label {l} outside 0..{NUM_CLASSES}")));
        }
        Ok(Self { features, labels, name: name.into() })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.features.ncols()
    }

    /// Feature matrix, one example per row.
    pub fn features(&self) -> &Mat<f64> {
        &self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    /// Rows `indices` in the given order.
    pub fn select(&self, indices: &[usize], name: impl Into<String>) -> Self {
        let features = Mat::from_fn(indices.len(), self.n_features(), |i, j| {
            self.features[(indices[i], j)]
        });
        let labels = indices.iter().map(|&i| self.labels[i]).collect();
        Self { features, labels, name: name.into() }
    }

    pub fn mean_feature(&self) -> f64 {
        let total: f64 = (0..self.n_features())
            .map(|j| self.features.col(j).iter().sum::<f64>())
            .sum();
        total / (self.len() * self.n_features()) as f64
    }

    /// Writes the dataset as headerless CSV, pixels rescaled to `0..=16` and rounded.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
        let mut record = Vec::with_capacity(self.n_features() + 1);
        for i in 0..self.len() {
            record.clear();
            for j in 0..self.n_features() {
                record.push(((self.features[(i, j)] * PIXEL_MAX).round() as u32).to_string());
            }
            record.push(self.labels[i].to_string());
            w.write_record(&record).map_err(csv_io)?;
        }
        w.flush()?;
        Ok(())
    }
}

fn csv_io(e: csv::Error) -> Error {
    Error::Io(std::io::Error::other(e))
}

/// Train/test split parameters.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitSpec {
    pub test_fraction: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { test_fraction: 0.2, seed: 0 }
    }
}

/// The 1797-image 8×8 digits set shipped with the crate, in the CSV format read by [`read_digits`].
pub const BUNDLED_DIGITS: &str = include_str!("../data/digits.csv");

pub fn bundled_digits() -> Result<Dataset> {
    read_digits(BUNDLED_DIGITS.as_bytes())
}

/// Loads the digits CSV (64 pixel columns in `0..=16`, then a label).
pub fn load_digits(path: impl AsRef<Path>) -> Result<Dataset> {
    let file = std::fs::File::open(path.as_ref())?;
    read_digits(file)
}

pub fn read_digits<R: Read>(input: R) -> Result<Dataset> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .from_reader(input);
    let mut pixels: Vec<f64> = Vec::new();
    let mut labels = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let line = idx + 1;
        let record = record.map_err(|e| Error::Parse { line, message: e.to_string() })?;
        if record.len() != DIGITS_PIXELS + 1 {
            return Err(Error::Parse {
                line,
                message: format!("expected {} columns, found {}", DIGITS_PIXELS + 1, record.len()),
            });
        }
        for (col, field) in record.iter().enumerate() {
            let value: u32 = field.parse().map_err(|_| Error::Parse {
                line,
                message: format!("column {}: `{field}` is not a non-negative integer", col + 1),
            })?;
            if col < DIGITS_PIXELS {
                if value as f64 > PIXEL_MAX {
                    return Err(Error::Parse {
                        line,
                        message: format!("pixel {value} in column {} outside 0..=16", col + 1),
                    });
                }
                pixels.push(value as f64 / PIXEL_MAX);
            } else {
                if value as usize >= NUM_CLASSES {
                    return Err(Error::Parse { line, message: format!("label {value} outside 0..=9") });
                }
                labels.push(value as usize);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::Parse { line: 0, message: "no rows".into() });
    }
    let n = labels.len();
    let features = Mat::from_fn(n, DIGITS_PIXELS, |i, j| pixels[i * DIGITS_PIXELS + j]);
    Dataset::new(features, labels, "digits")
}

/// Number of training rows for `n` examples: `⌈n·(1−f)⌉`.
pub fn train_size(n: usize, test_fraction: f64) -> usize {
    // Guard against 10 * 0.8 = 8.000000000000002 style rounding.
    ((n as f64) * (1.0 - test_fraction) - 1e-9).ceil().max(0.0) as usize
}

/// Unstratified random split; each side keeps the original row order.
pub fn split(d: &Dataset, s: &SplitSpec) -> Result<(Dataset, Dataset)> {
    if !(s.test_fraction > 0.0 && s.test_fraction < 1.0) {
        return Err(Error::InvalidSplit(format!(
            "test fraction {} outside (0, 1)",
            s.test_fraction
        )));
    }
    let n = d.len();
    let n_train = train_size(n, s.test_fraction);
    if n_train == 0 || n_train >= n {
        return Err(Error::InvalidSplit(format!(
            "{n} examples with test fraction {} leaves an empty side",
            s.test_fraction
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(s.seed));
    let (train_idx, test_idx) = order.split_at_mut(n_train);
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    Ok((
        d.select(train_idx, format!("{}-train", d.name())),
        d.select(test_idx, format!("{}-test", d.name())),
    ))
}

/// Same shape as `d`, features i.i.d. uniform on `[0, 1)`, labels uniform on `0..10`.
pub fn make_noise_like(d: &Dataset, seed: u64) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, m) = (d.len(), d.n_features());
    // Row-major draw order so the values do not depend on the storage layout.
    let draws: Vec<f64> = (0..n * m).map(|_| rng.random::<f64>()).collect();
    let labels = (0..n).map(|_| rng.random_range(0..NUM_CLASSES)).collect();
    Dataset { features: Mat::from_fn(n, m, |i, j| draws[i * m + j]), labels, name: "noise".into() }
}

/// Pixel inversion `x ↦ 1 − x`.
pub fn invert(d: &Dataset) -> Dataset {
    Dataset {
        features: Mat::from_fn(d.len(), d.n_features(), |i, j| 1.0 - d.features[(i, j)]),
        labels: d.labels.clone(),
        name: format!("{}-inverted", d.name),
    }
}

/// Applies a uniformly random permutation to the labels.
pub fn shuffle_labels(d: &Dataset, seed: u64) -> Dataset {
    let mut labels = d.labels.clone();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Dataset {
        features: d.features.clone(),
        labels,
        name: format!("{}-shuffled-labels", d.name),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy(n: usize) -> Dataset {
        let features = Mat::from_fn(n, 4, |i, j| ((i * 4 + j) % 17) as f64 / 16.0);
        let labels = (0..n).map(|i| i % NUM_CLASSES).collect();
        Dataset::new(features, labels, "toy").unwrap()
    }

    fn row(pixels: &[u32], label: u32) -> String {
        let mut s: Vec<String> = pixels.iter().map(|p| p.to_string()).collect();
        s.push(label.to_string());
        s.join(",")
    }

    #[test]
    fn parses_and_scales_rows() {
        let mut px = vec![0u32; 64];
        px[2] = 5;
        px[10] = 16;
        let text = format!("{}\n{}\n", row(&px, 0), row(&[0; 64], 7));
        let d = read_digits(text.as_bytes()).unwrap();
        assert_eq!(d.len(), 2);
        assert_eq!(d.labels(), &[0, 7]);
        assert_eq!(d.features()[(0, 2)], 5.0 / 16.0);
        assert_eq!(d.features()[(0, 10)], 1.0);
        assert!((0..64).all(|j| d.features()[(1, j)] == 0.0));
    }

    #[test]
    fn parse_errors_name_the_line() {
        let good = row(&[0; 64], 1);
        let cases = [
            format!("{good}\n{}\n", row(&[0; 63], 1)),
            format!("{good}\n{}\n", row(&[17; 64], 1)),
            format!("{good}\n{}\n", row(&[0; 64], 10)),
        ];
        for text in cases {
            match read_digits(text.as_bytes()) {
                Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
                other => panic!("expected parse error, got {other:?}"),
            }
        }
    }

    #[test]
    fn split_sizes() {
        let (a, b) = split(&toy(10), &SplitSpec { test_fraction: 0.2, seed: 0 }).unwrap();
        assert_eq!((a.len(), b.len()), (8, 2));
        assert_eq!(train_size(1797, 0.2), 1438);
        assert_eq!(1797 - train_size(1797, 0.2), 359);
    }

    #[test]
    fn split_is_deterministic_and_disjoint() {
        let d = toy(50);
        let s = SplitSpec { test_fraction: 0.3, seed: 9 };
        let (a1, b1) = split(&d, &s).unwrap();
        let (a2, b2) = split(&d, &s).unwrap();
        assert_eq!(a1, a2);
        assert_eq!(b1, b2);
        assert_eq!(a1.len() + b1.len(), 50);
    }

    #[test]
    fn split_rejects_bad_fractions() {
        let d = toy(3);
        assert!(matches!(split(&d, &SplitSpec { test_fraction: 0.0, seed: 0 }), Err(Error::InvalidSplit(_))));
        assert!(matches!(split(&d, &SplitSpec { test_fraction: 1.0, seed: 0 }), Err(Error::InvalidSplit(_))));
        assert!(matches!(split(&d, &SplitSpec { test_fraction: 0.01, seed: 0 }), Err(Error::InvalidSplit(_))));
    }

    #[test]
    fn noise_shape_range_and_determinism() {
        let d = toy(100);
        let a = make_noise_like(&d, 3);
        assert_eq!((a.len(), a.n_features()), (100, 4));
        assert!(a.features().col_iter().all(|c| c.iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(a, make_noise_like(&d, 3));
        assert_ne!(a, make_noise_like(&d, 4));
    }

    #[test]
    fn noise_mean_is_one_half() {
        // 359 x 64 uniform draws: standard error 0.0019
        let d = Dataset::new(Mat::zeros(359, 64), vec![0; 359], "z").unwrap();
        let m = make_noise_like(&d, 11).mean_feature();
        assert!((m - 0.5).abs() < 0.01, "{m}");
    }

    #[test]
    fn invert_is_an_involution() {
        let d = toy(20);
        let inv = invert(&d);
        assert_eq!(invert(&inv).features(), d.features());
        assert!((inv.mean_feature() - (1.0 - d.mean_feature())).abs() < 1e-12);
        let z = Dataset::new(Mat::zeros(1, 1), vec![0], "z").unwrap();
        assert_eq!(invert(&z).features()[(0, 0)], 1.0);
    }

    #[test]
    fn shuffle_preserves_multiset() {
        let d = toy(37);
        let s = shuffle_labels(&d, 5);
        let mut a = d.labels().to_vec();
        let mut b = s.labels().to_vec();
        a.sort();
        b.sort();
        assert_eq!(a, b);
        assert_eq!(s.features(), d.features());
        assert_eq!(s, shuffle_labels(&d, 5));
    }

    #[test]
    fn csv_export_roundtrips_integer_pixels() {
        let d = toy(12);
        let mut buf = Vec::new();
        let padded = Dataset::new(
            Mat::from_fn(12, 64, |i, j| if j < 4 { d.features()[(i, j)] } else { 0.0 }),
            d.labels().to_vec(),
            "p",
        )
        .unwrap();
        padded.write_csv(&mut buf).unwrap();
        let back = read_digits(buf.as_slice()).unwrap();
        assert_eq!(back.features(), padded.features());
        assert_eq!(back.labels(), padded.labels());
    }
}
