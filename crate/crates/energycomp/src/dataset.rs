//! Dataset ingestion: IDX (MNIST layout) and CSV, plus a synthetic
//! MNIST-shaped generator for offline runs.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use energycomp_core::model::{Dataset, Split};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

pub const TRAIN_IMAGES: &str = "train-images-idx3-ubyte";
pub const TRAIN_LABELS: &str = "train-labels-idx1-ubyte";
pub const TEST_IMAGES: &str = "t10k-images-idx3-ubyte";
pub const TEST_LABELS: &str = "t10k-labels-idx1-ubyte";

pub const TRAIN_CSV: &str = "train.csv";
pub const TEST_CSV: &str = "test.csv";

pub const VALIDATION_FRACTION: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetFormat {
    Idx,
    Csv,
}

/// Decoded IDX image file, pixels row-major per image.
#[derive(Debug, Clone, PartialEq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    /// Pixels scaled to `[0, 1]`.
    pub fn scaled(&self) -> Vec<f32> {
        self.pixels.iter().map(|&p| f32::from(p) / 255.0).collect()
    }
}

fn be_u32(bytes: &[u8], at: usize, what: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or_else(|| Error::Format(format!("IDX header truncated reading {what}")))
}

fn check_magic(bytes: &[u8], expected: u32) -> Result<()> {
    let found = be_u32(bytes, 0, "magic")?;
    if found != expected {
        return Err(Error::Format(format!(
            "bad IDX magic: expected 0x{expected:08x}, found 0x{found:08x}"
        )));
    }
    Ok(())
}

pub fn parse_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    check_magic(bytes, IDX_IMAGES_MAGIC)?;
    let count = be_u32(bytes, 4, "image count")? as usize;
    let rows = be_u32(bytes, 8, "row count")? as usize;
    let cols = be_u32(bytes, 12, "column count")? as usize;
    let expected = count
        .checked_mul(rows)
        .and_then(|n| n.checked_mul(cols))
        .ok_or_else(|| Error::Format(format!("IDX dims {count}x{rows}x{cols} overflow")))?;
    let body = &bytes[16..];
    if body.len() != expected {
        return Err(Error::Format(format!(
            "IDX dims {count}x{rows}x{cols} need {expected} pixel bytes, found {}",
            body.len()
        )));
    }
    Ok(IdxImages {
        count,
        rows,
        cols,
        pixels: body.to_vec(),
    })
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    check_magic(bytes, IDX_LABELS_MAGIC)?;
    let count = be_u32(bytes, 4, "label count")? as usize;
    let body = &bytes[8..];
    if body.len() != count {
        return Err(Error::Format(format!(
            "IDX label file declares {count} labels, found {}",
            body.len()
        )));
    }
    Ok(body.to_vec())
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IDX_IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&IDX_LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).at(path)
}

fn with_path<T>(path: &Path, r: Result<T>) -> Result<T> {
    r.map_err(|e| match e {
        Error::Format(msg) => Error::Format(format!("{}: {msg}", path.display())),
        other => other,
    })
}

/// Reads an image/label file pair into a split and its `[1, rows, cols]`
/// input shape.
pub fn read_idx_split(images: &Path, labels: &Path, class_count: usize) -> Result<(Split, Vec<usize>)> {
    let img = with_path(images, parse_idx_images(&read(images)?))?;
    let lab = with_path(labels, parse_idx_labels(&read(labels)?))?;
    if img.count != lab.len() {
        return Err(Error::Format(format!(
            "{} holds {} images but {} holds {} labels",
            images.display(),
            img.count,
            labels.display(),
            lab.len()
        )));
    }
    let labels = checked_labels(lab.iter().map(|&l| u32::from(l)), class_count, labels)?;
    let split = Split::new(img.rows * img.cols, img.scaled(), labels)?;
    Ok((split, vec![1, img.rows, img.cols]))
}

fn checked_labels(labels: impl Iterator<Item = u32>, class_count: usize, path: &Path) -> Result<Vec<u32>> {
    labels
        .enumerate()
        .map(|(i, l)| {
            if (l as usize) < class_count {
                Ok(l)
            } else {
                Err(Error::Format(format!(
                    "{}: sample {i} has label {l}, outside 0..{class_count}",
                    path.display()
                )))
            }
        })
        .collect()
}

/// Reads `label,pixel,...` rows. Pixels are 0-255 and scaled to `[0, 1]`.
/// A first row whose label field is not an integer is taken as a header.
pub fn read_csv_split(path: &Path, class_count: usize) -> Result<Split> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let mut features = Vec::new();
    let mut labels = Vec::new();
    let mut dim = None;
    for (row, record) in reader.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let Some(first) = record.get(0) else { continue };
        let label: u32 = match first.trim().parse() {
            Ok(l) => l,
            Err(_) if row == 0 => continue,
            Err(_) => {
                return Err(Error::Format(format!(
                    "{} row {}: label {first:?} is not an integer",
                    path.display(),
                    row + 1
                )))
            }
        };
        let width = record.len() - 1;
        if *dim.get_or_insert(width) != width {
            return Err(Error::Format(format!(
                "{} row {}: {width} pixels, earlier rows have {}",
                path.display(),
                row + 1,
                dim.unwrap_or(0)
            )));
        }
        for field in record.iter().skip(1) {
            let v: f32 = field.trim().parse().map_err(|_| {
                Error::Format(format!("{} row {}: pixel {field:?} is not a number", path.display(), row + 1))
            })?;
            features.push(v / 255.0);
        }
        labels.push(label);
    }
    let dim = dim.ok_or_else(|| Error::Format(format!("{} has no samples", path.display())))?;
    let labels = checked_labels(labels.into_iter(), class_count, path)?;
    Ok(Split::new(dim, features, labels)?)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::Format(format!("{}: {e}", path.display()))
}

/// Loads the train and test files found in `dir`, holding out a seeded 10%
/// of the training samples for validation.
pub fn load_dataset(dir: &Path, format: DatasetFormat, class_count: usize, seed: u64) -> Result<Dataset> {
    let (train, test, shape) = match format {
        DatasetFormat::Idx => {
            let (train, shape) = read_idx_split(&dir.join(TRAIN_IMAGES), &dir.join(TRAIN_LABELS), class_count)?;
            let (test, test_shape) = read_idx_split(&dir.join(TEST_IMAGES), &dir.join(TEST_LABELS), class_count)?;
            if shape != test_shape {
                return Err(Error::Format(format!(
                    "train images are {shape:?} but test images are {test_shape:?}"
                )));
            }
            (train, test, shape)
        }
        DatasetFormat::Csv => {
            let train = read_csv_split(&dir.join(TRAIN_CSV), class_count)?;
            let test = read_csv_split(&dir.join(TEST_CSV), class_count)?;
            if train.dim() != test.dim() {
                return Err(Error::Format(format!(
                    "train rows have {} pixels but test rows have {}",
                    train.dim(),
                    test.dim()
                )));
            }
            let shape = vec![train.dim()];
            (train, test, shape)
        }
    };
    Ok(Dataset::with_validation_split(
        train,
        test,
        shape,
        class_count,
        VALIDATION_FRACTION,
        seed,
    )?)
}

/// Parameters of the synthetic digit-like image generator.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub train: usize,
    pub test: usize,
    pub side: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            train: 9000,
            test: 1000,
            side: 28,
            classes: 10,
            seed: 0,
        }
    }
}

/// Class prototypes are built from soft blobs drawn from a shared pool, so
/// classes overlap. Samples shift the prototype by up to three pixels,
/// rescale it, sometimes add a stray blob and add uniform noise.
pub fn synthesize(spec: &SynthSpec) -> (IdxImages, Vec<u8>, IdxImages, Vec<u8>) {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let s = spec.side;
    let sf = s as f32;
    let blob = |rng: &mut ChaCha8Rng| {
        (
            rng.gen_range(sf * 0.2..sf * 0.8),
            rng.gen_range(sf * 0.2..sf * 0.8),
            rng.gen_range(sf * 0.05..sf * 0.12),
        )
    };
    let pool: Vec<(f32, f32, f32)> = (0..12).map(|_| blob(&mut rng)).collect();
    let render = |blobs: &[(f32, f32, f32)]| -> Vec<f32> {
        (0..s * s)
            .map(|p| {
                let (y, x) = ((p / s) as f32, (p % s) as f32);
                let v: f32 = blobs
                    .iter()
                    .map(|&(cy, cx, r)| (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * r * r)).exp())
                    .sum();
                v.min(1.0)
            })
            .collect()
    };
    let prototypes: Vec<Vec<f32>> = (0..spec.classes)
        .map(|_| {
            let mut blobs: Vec<(f32, f32, f32)> = (0..3).map(|_| pool[rng.gen_range(0..pool.len())]).collect();
            blobs.push(blob(&mut rng));
            render(&blobs)
        })
        .collect();

    let mut draw = |n: usize| {
        let mut pixels = Vec::with_capacity(n * s * s);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let c = rng.gen_range(0..spec.classes);
            let (dy, dx) = (rng.gen_range(-3i32..=3), rng.gen_range(-3i32..=3));
            let gain = rng.gen_range(0.5f32..1.0);
            let stray = if rng.gen_bool(0.5) {
                let b = pool[rng.gen_range(0..pool.len())];
                render(&[b])
            } else {
                vec![0.0; s * s]
            };
            for y in 0..s as i32 {
                for x in 0..s as i32 {
                    let (sy, sx) = (y - dy, x - dx);
                    let base = if (0..s as i32).contains(&sy) && (0..s as i32).contains(&sx) {
                        prototypes[c][sy as usize * s + sx as usize]
                    } else {
                        0.0
                    };
                    let noise = rng.gen_range(-0.3f32..0.3);
                    let v = (base * gain + 0.6 * stray[y as usize * s + x as usize] + noise).clamp(0.0, 1.0);
                    pixels.push((v * 255.0).round() as u8);
                }
            }
            labels.push(c as u8);
        }
        (
            IdxImages {
                count: n,
                rows: s,
                cols: s,
                pixels,
            },
            labels,
        )
    };
    let (train_x, train_y) = draw(spec.train);
    let (test_x, test_y) = draw(spec.test);
    (train_x, train_y, test_x, test_y)
}

/// Writes a synthetic dataset in `format` under `dir` using the standard
/// file names. Returns the files written.
pub fn write_synthetic(dir: &Path, spec: &SynthSpec, format: DatasetFormat) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir).at(dir)?;
    let (train_x, train_y, test_x, test_y) = synthesize(spec);
    let mut written = Vec::new();
    match format {
        DatasetFormat::Idx => {
            for (name, bytes) in [
                (TRAIN_IMAGES, encode_idx_images(&train_x)),
                (TRAIN_LABELS, encode_idx_labels(&train_y)),
                (TEST_IMAGES, encode_idx_images(&test_x)),
                (TEST_LABELS, encode_idx_labels(&test_y)),
            ] {
                let path = dir.join(name);
                fs::write(&path, bytes).at(&path)?;
                written.push(path);
            }
        }
        DatasetFormat::Csv => {
            for (name, images, labels) in [(TRAIN_CSV, &train_x, &train_y), (TEST_CSV, &test_x, &test_y)] {
                let path = dir.join(name);
                let mut file = std::io::BufWriter::new(fs::File::create(&path).at(&path)?);
                let dim = images.rows * images.cols;
                for (i, label) in labels.iter().enumerate() {
                    write!(file, "{label}").at(&path)?;
                    for p in &images.pixels[i * dim..(i + 1) * dim] {
                        write!(file, ",{p}").at(&path)?;
                    }
                    writeln!(file).at(&path)?;
                }
                file.flush().at(&path)?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
