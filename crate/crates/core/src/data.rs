//! Dataset ingestion: IDX parsing, 28×28 → 16×16 bilinear resize, and
//! flattening orders whose top bipartition is the left/right or up/down
//! split of the image.

use std::fmt;
use std::fs;
use std::io::Read;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use md5::{Digest, Md5};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;

pub const IMAGES_MAGIC: u32 = 2051;
pub const LABELS_MAGIC: u32 = 2049;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum IdxKind {
    Images,
    Labels,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct IdxImages {
    pub count: usize,
    pub rows: usize,
    pub cols: usize,
    pub pixels: Vec<u8>,
}

impl IdxImages {
    pub fn image(&self, i: usize) -> &[u8] {
        let n = self.rows * self.cols;
        &self.pixels[i * n..(i + 1) * n]
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum IdxPayload {
    Images(IdxImages),
    Labels(Vec<u8>),
}

fn be_u32(bytes: &[u8], offset: usize) -> Result<u32> {
    bytes
        .get(offset..offset + 4)
        .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
        .ok_or(Error::Idx {
            offset,
            message: "truncated header".into(),
        })
}

/// Parses a big-endian IDX container holding unsigned bytes.
pub fn read_idx(bytes: &[u8], kind: IdxKind) -> Result<IdxPayload> {
    let magic = be_u32(bytes, 0)?;
    let expected = match kind {
        IdxKind::Images => IMAGES_MAGIC,
        IdxKind::Labels => LABELS_MAGIC,
    };
    if magic != expected {
        return Err(Error::Idx {
            offset: 0,
            message: format!("unexpected magic {magic} (expected {expected})"),
        });
    }
    let dims = (magic & 0xff) as usize;
    let mut shape = Vec::with_capacity(dims);
    for d in 0..dims {
        shape.push(be_u32(bytes, 4 + 4 * d)? as usize);
    }
    let header = 4 + 4 * dims;
    let payload_len: usize = shape.iter().product();
    let available = bytes.len() - header.min(bytes.len());
    if available < payload_len {
        return Err(Error::Idx {
            offset: bytes.len(),
            message: format!("truncated payload: {available} of {payload_len} bytes present"),
        });
    }
    if available > payload_len {
        return Err(Error::Idx {
            offset: header + payload_len,
            message: format!("{} trailing bytes after payload", available - payload_len),
        });
    }
    let payload = bytes[header..].to_vec();
    Ok(match kind {
        IdxKind::Images => IdxPayload::Images(IdxImages {
            count: shape[0],
            rows: shape[1],
            cols: shape[2],
            pixels: payload,
        }),
        IdxKind::Labels => IdxPayload::Labels(payload),
    })
}

pub fn read_idx_images(bytes: &[u8]) -> Result<IdxImages> {
    match read_idx(bytes, IdxKind::Images)? {
        IdxPayload::Images(i) => Ok(i),
        IdxPayload::Labels(_) => unreachable!(),
    }
}

pub fn read_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    match read_idx(bytes, IdxKind::Labels)? {
        IdxPayload::Labels(l) => Ok(l),
        IdxPayload::Images(_) => unreachable!(),
    }
}

pub fn encode_idx_images(images: &IdxImages) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + images.pixels.len());
    for v in [IMAGES_MAGIC, images.count as u32, images.rows as u32, images.cols as u32] {
        out.extend_from_slice(&v.to_be_bytes());
    }
    out.extend_from_slice(&images.pixels);
    out
}

pub fn encode_idx_labels(labels: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + labels.len());
    out.extend_from_slice(&LABELS_MAGIC.to_be_bytes());
    out.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    out.extend_from_slice(labels);
    out
}

/// Bilinear resize with pixel-center alignment; source coordinates are
/// `(i + 0.5)·in/out − 0.5`, clamped to the image. Output clamped to [0, 1].
pub fn resize(image: &[f64], in_side: usize, out_side: usize) -> Vec<f64> {
    assert_eq!(image.len(), in_side * in_side, "image is not {in_side}x{in_side}");
    let ratio = in_side as f64 / out_side as f64;
    let coord = |i: usize| {
        let s = ((i as f64 + 0.5) * ratio - 0.5).max(0.0);
        let lo = (s.floor() as usize).min(in_side - 1);
        let hi = (lo + 1).min(in_side - 1);
        (lo, hi, s - lo as f64)
    };
    let mut out = vec![0.0; out_side * out_side];
    for r in 0..out_side {
        let (r0, r1, fr) = coord(r);
        for c in 0..out_side {
            let (c0, c1, fc) = coord(c);
            let top = image[r0 * in_side + c0] * (1.0 - fc) + image[r0 * in_side + c1] * fc;
            let bottom = image[r1 * in_side + c0] * (1.0 - fc) + image[r1 * in_side + c1] * fc;
            out[r * out_side + c] = (top * (1.0 - fr) + bottom * fr).clamp(0.0, 1.0);
        }
    }
    out
}

pub fn resize_16(image: &[f64]) -> Vec<f64> {
    resize(image, 28, 16)
}

/// Which image halves the top pooling node separates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FlattenOrder {
    LeftRight,
    UpDown,
}

impl FlattenOrder {
    pub fn as_str(self) -> &'static str {
        match self {
            FlattenOrder::LeftRight => "leftright",
            FlattenOrder::UpDown => "updown",
        }
    }

    /// Flat index of pixel `(row, col)` in a `side × side` image. Each half
    /// is enumerated row-major.
    pub fn index(self, row: usize, col: usize, side: usize) -> usize {
        let half = side / 2;
        match self {
            FlattenOrder::LeftRight => {
                let block = usize::from(col >= half);
                block * side * half + row * half + (col - block * half)
            }
            FlattenOrder::UpDown => row * side + col,
        }
    }
}

impl fmt::Display for FlattenOrder {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for FlattenOrder {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "leftright" => Ok(FlattenOrder::LeftRight),
            "updown" => Ok(FlattenOrder::UpDown),
            other => Err(Error::Input(format!(
                "unknown flatten order `{other}` (leftright|updown)"
            ))),
        }
    }
}

pub fn flatten(image: &[f64], side: usize, order: FlattenOrder) -> Vec<f64> {
    let mut out = vec![0.0; side * side];
    for r in 0..side {
        for c in 0..side {
            out[order.index(r, c, side)] = image[r * side + c];
        }
    }
    out
}

/// Resized, scaled and flattened samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ProcessedDataset {
    /// One sample per row, values in [0, 1].
    pub samples: Matrix,
    pub labels: Vec<usize>,
    pub order: FlattenOrder,
}

impl ProcessedDataset {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn gather(&self, indices: &[usize]) -> (Matrix, Vec<usize>) {
        let n = self.samples.cols();
        let mut data = Vec::with_capacity(indices.len() * n);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.samples.row(i));
            labels.push(self.labels[i]);
        }
        (Matrix::from_vec(indices.len(), n, data).expect("sized"), labels)
    }

    /// First `limit` samples.
    pub fn truncated(&self, limit: usize) -> ProcessedDataset {
        let idx: Vec<usize> = (0..limit.min(self.len())).collect();
        let (samples, labels) = self.gather(&idx);
        ProcessedDataset {
            samples,
            labels,
            order: self.order,
        }
    }
}

/// Scales bytes by 1/255, resizes to `side × side` and flattens.
pub fn process(images: &IdxImages, labels: &[u8], side: usize, order: FlattenOrder) -> Result<ProcessedDataset> {
    if images.count != labels.len() {
        return Err(Error::Input(format!(
            "{} images but {} labels",
            images.count,
            labels.len()
        )));
    }
    if images.rows != images.cols {
        return Err(Error::Input(format!(
            "non-square images {}x{}",
            images.rows, images.cols
        )));
    }
    let n = side * side;
    let mut data = Vec::with_capacity(images.count * n);
    for i in 0..images.count {
        let scaled: Vec<f64> = images.image(i).iter().map(|&b| b as f64 / 255.0).collect();
        let small = if images.rows == side {
            scaled
        } else {
            resize(&scaled, images.rows, side)
        };
        data.extend(flatten(&small, side, order));
    }
    Ok(ProcessedDataset {
        samples: Matrix::from_vec(images.count, n, data)?,
        labels: labels.iter().map(|&l| l as usize).collect(),
        order,
    })
}

/// Sample indices for one epoch: a seeded shuffle cut into batches, the
/// final short batch kept. The stream id is the epoch, so any epoch can be
/// regenerated independently.
pub fn batches(len: usize, batch_size: usize, seed: u64, epoch: u64) -> Vec<Vec<usize>> {
    assert!(batch_size >= 1, "batch size must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..len).collect();
    idx.shuffle(&mut rng);
    idx.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

pub fn md5_hex(bytes: &[u8]) -> String {
    let digest = Md5::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Downloads `url` to `dest` unless a file with the expected MD5 already
/// exists there. A download whose checksum does not match is removed.
pub fn fetch(url: &str, expected_md5: &str, dest: &Path) -> Result<PathBuf> {
    if let Ok(existing) = fs::read(dest) {
        if md5_hex(&existing) == expected_md5 {
            return Ok(dest.to_path_buf());
        }
    }
    if let Some(parent) = dest.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let transport = |message: String| Error::Transport {
        url: url.to_string(),
        message,
    };
    let response = ureq::get(url).call().map_err(|e| transport(e.to_string()))?;
    let mut body = Vec::new();
    response
        .into_reader()
        .read_to_end(&mut body)
        .map_err(|e| transport(e.to_string()))?;
    crate::io::write_atomic(dest, &body)?;
    let actual = md5_hex(&body);
    if actual != expected_md5 {
        let _ = fs::remove_file(dest);
        return Err(Error::Checksum {
            path: dest.to_path_buf(),
            expected: expected_md5.to_string(),
            actual,
        });
    }
    Ok(dest.to_path_buf())
}

pub fn gunzip(bytes: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    flate2::read::GzDecoder::new(bytes)
        .read_to_end(&mut out)
        .map_err(|e| Error::Input(format!("gzip decode failed: {e}")))?;
    Ok(out)
}

/// The four files of a dataset split, named `{train,test}-{images,labels}`
/// inside `data/<dataset>/`.
pub const SPLIT_FILES: [&str; 4] = ["train-images", "train-labels", "test-images", "test-labels"];

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    fn prefix(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

pub fn dataset_dir(data_root: &Path, dataset: &str) -> PathBuf {
    data_root.join(dataset)
}

/// Reads one prepared split from `data/<dataset>/` and processes it.
pub fn load_split(
    data_root: &Path,
    dataset: &str,
    split: Split,
    side: usize,
    order: FlattenOrder,
) -> Result<ProcessedDataset> {
    let dir = dataset_dir(data_root, dataset);
    let img_path = dir.join(format!("{}-images", split.prefix()));
    let lbl_path = dir.join(format!("{}-labels", split.prefix()));
    let images = read_idx_images(&fs::read(&img_path).map_err(|e| Error::io(&img_path, e))?)
        .map_err(|e| Error::Input(format!("{}: {e}", img_path.display())))?;
    let labels = read_idx_labels(&fs::read(&lbl_path).map_err(|e| Error::io(&lbl_path, e))?)
        .map_err(|e| Error::Input(format!("{}: {e}", lbl_path.display())))?;
    process(&images, &labels, side, order)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fixture() -> Vec<u8> {
        let mut b = Vec::new();
        for v in [2051u32, 1, 2, 2] {
            b.extend_from_slice(&v.to_be_bytes());
        }
        b.extend_from_slice(&[0, 128, 255, 64]);
        b
    }

    #[test]
    fn parses_constructed_image_file() {
        let img = read_idx_images(&fixture()).unwrap();
        assert_eq!((img.count, img.rows, img.cols), (1, 2, 2));
        assert_eq!(img.image(0), &[0, 128, 255, 64]);
    }

    #[test]
    fn rejects_wrong_magic() {
        let mut b = fixture();
        b[3] = 0x02; // 2050
        match read_idx(&b, IdxKind::Images) {
            Err(Error::Idx { offset: 0, message }) => assert!(message.contains("unexpected magic")),
            other => panic!("{other:?}"),
        }
        assert!(read_idx(&fixture(), IdxKind::Labels).is_err());
    }

    #[test]
    fn rejects_truncated_payload_and_header() {
        let b = fixture();
        match read_idx(&b[..18], IdxKind::Images) {
            Err(Error::Idx { offset, .. }) => assert_eq!(offset, 18),
            other => panic!("{other:?}"),
        }
        assert!(read_idx(&b[..6], IdxKind::Images).is_err());
    }

    #[test]
    fn labels_round_trip() {
        let enc = encode_idx_labels(&[3, 1, 4]);
        assert_eq!(read_idx_labels(&enc).unwrap(), vec![3, 1, 4]);
        let img = read_idx_images(&fixture()).unwrap();
        assert_eq!(encode_idx_images(&img), fixture());
    }

    #[test]
    fn resize_constant_and_range() {
        let c = vec![0.3; 28 * 28];
        assert!(resize_16(&c).iter().all(|&v| (v - 0.3).abs() < 1e-15));
        let ramp: Vec<f64> = (0..784).map(|i| (i % 28) as f64 / 27.0 * 0.8 + 0.1).collect();
        let out = resize_16(&ramp);
        assert!(out.iter().all(|&v| (0.1 - 1e-15..=0.9 + 1e-15).contains(&v)));
    }

    #[test]
    fn flatten_examples() {
        assert_eq!(FlattenOrder::LeftRight.index(0, 8, 16), 128);
        assert_eq!(FlattenOrder::UpDown.index(8, 0, 16), 128);
        assert_eq!(FlattenOrder::LeftRight.index(1, 0, 16), 8);
        for order in [FlattenOrder::LeftRight, FlattenOrder::UpDown] {
            let mut idx: Vec<usize> = (0..16)
                .flat_map(|r| (0..16).map(move |c| order.index(r, c, 16)))
                .collect();
            idx.sort_unstable();
            assert_eq!(idx, (0..256).collect::<Vec<_>>());
        }
    }

    #[test]
    fn order_parsing() {
        assert_eq!("updown".parse::<FlattenOrder>().unwrap(), FlattenOrder::UpDown);
        assert!("diagonal".parse::<FlattenOrder>().is_err());
        assert_eq!(serde_json::to_string(&FlattenOrder::LeftRight).unwrap(), "\"leftright\"");
    }

    #[test]
    fn batch_counts_and_determinism() {
        let b = batches(60000, 50, 3, 0);
        assert_eq!(b.len(), 1200);
        assert_eq!(b, batches(60000, 50, 3, 0));
        assert_ne!(b, batches(60000, 50, 3, 1));
        let short = batches(103, 50, 1, 0);
        assert_eq!(short.iter().map(Vec::len).collect::<Vec<_>>(), vec![50, 50, 3]);
        let mut all: Vec<usize> = short.concat();
        all.sort_unstable();
        assert_eq!(all, (0..103).collect::<Vec<_>>());
    }

    #[test]
    fn md5_known_value() {
        assert_eq!(md5_hex(b""), "d41d8cd98f00b204e9800998ecf8427e");
    }

    #[test]
    fn process_checks_counts() {
        let img = read_idx_images(&fixture()).unwrap();
        assert!(process(&img, &[1, 2], 2, FlattenOrder::UpDown).is_err());
        let p = process(&img, &[7], 2, FlattenOrder::LeftRight).unwrap();
        // 2x2 left/right: (0,0) (1,0) | (0,1) (1,1)
        let expect = [0.0, 255.0 / 255.0, 128.0 / 255.0, 64.0 / 255.0];
        assert_eq!(p.samples.row(0), &expect);
        assert_eq!(p.labels, vec![7]);
    }
}
