//! `TSEGDATA` container.
//!
//! ```text
//! magic    8 bytes  "TSEGDATA"
//! version  u32      1
//! n, H, W, C, M     u32 each
//! n records, each:
//!   image  C*H*W f32   (channel-major)
//!   labels H*W   u16
//! ```
//! All integers and floats are little-endian.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Dataset, LabelMap, Sample};
use crate::error::{Error, Result};
use crate::tensorcore::Tensor;

pub const DATASET_MAGIC: &[u8; 8] = b"TSEGDATA";
pub const DATASET_VERSION: u32 = 1;

pub fn save_dataset(path: impl AsRef<Path>, dataset: &Dataset) -> Result<()> {
    let path = path.as_ref();
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(DATASET_MAGIC)?;
    let header = [
        DATASET_VERSION,
        dataset.samples.len() as u32,
        dataset.height as u32,
        dataset.width as u32,
        dataset.channels as u32,
        dataset.num_classes as u32,
    ];
    for v in header {
        out.write_all(&v.to_le_bytes())?;
    }
    let expect = [dataset.channels, dataset.height, dataset.width];
    for (i, s) in dataset.samples.iter().enumerate() {
        if s.image.shape() != expect || s.labels.height != dataset.height || s.labels.width != dataset.width {
            return Err(Error::shape(
                "save_dataset",
                format!("sample {i} does not match dataset dimensions {expect:?}"),
            ));
        }
        for v in s.image.data() {
            out.write_all(&v.to_le_bytes())?;
        }
        for c in &s.labels.classes {
            out.write_all(&c.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub(crate) fn read_exact_or(
    r: &mut impl Read,
    buf: &mut [u8],
    path: &Path,
    what: impl FnOnce() -> String,
) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Truncated {
            path: path.to_path_buf(),
            what: what(),
        },
        _ => Error::Io(e),
    })
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 8];
    read_exact_or(&mut r, &mut magic, path, || "magic".into())?;
    if &magic != DATASET_MAGIC {
        return Err(Error::BadMagic {
            path: path.to_path_buf(),
            expected: "TSEGDATA",
        });
    }
    let mut header = [0u32; 6];
    for (i, slot) in header.iter_mut().enumerate() {
        let mut b = [0u8; 4];
        read_exact_or(&mut r, &mut b, path, || format!("header field {i}"))?;
        *slot = u32::from_le_bytes(b);
    }
    let [version, n, h, w, c, m] = header.map(|v| v as usize);
    if version as u32 != DATASET_VERSION {
        return Err(Error::Version {
            path: path.to_path_buf(),
            found: version as u32,
            expected: DATASET_VERSION,
        });
    }
    if h == 0 || w == 0 || c == 0 || m == 0 {
        return Err(Error::Input(format!(
            "{}: degenerate dimensions {h}x{w}x{c}, {m} classes",
            path.display()
        )));
    }
    let plane = h * w;
    let mut img_buf = vec![0u8; c * plane * 4];
    let mut lab_buf = vec![0u8; plane * 2];
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        read_exact_or(&mut r, &mut img_buf, path, || format!("record {i} (image)"))?;
        read_exact_or(&mut r, &mut lab_buf, path, || format!("record {i} (labels)"))?;
        let image: Vec<f32> = img_buf
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let classes: Vec<u16> = lab_buf
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        if let Some(bad) = classes.iter().find(|&&l| l as usize >= m) {
            return Err(Error::Input(format!(
                "{}: record {i} has label {bad} but only {m} classes",
                path.display()
            )));
        }
        samples.push(Sample {
            image: Tensor::new(vec![c, h, w], image)?,
            labels: LabelMap::new(h, w, classes)?,
        });
    }
    Ok(Dataset {
        height: h,
        width: w,
        channels: c,
        num_classes: m,
        samples,
    })
}
