//! IDX binary image/label loader (the MNIST container format).
//!
//! Big-endian headers, magic 0x00000803 for images and 0x00000801 for
//! labels. Pixels are scaled from `0..=255` to `[0, 1]`. Parse errors
//! report the byte offset at which decoding failed.

use std::fs::File;
use std::io::{BufReader, Read, Write};
use std::path::Path;

use byteorder::{BigEndian, ReadBytesExt, WriteBytesExt};

use crate::data::{Item, LabeledDataset};
use crate::error::{Error, Result};

const IMAGES_MAGIC: u32 = 0x0000_0803;
const LABELS_MAGIC: u32 = 0x0000_0801;

struct Offset<R> {
    inner: R,
    position: u64,
}

impl<R: Read> Offset<R> {
    fn new(inner: R) -> Self {
        Self { inner, position: 0 }
    }

    fn read_u32(&mut self, what: &str) -> Result<u32> {
        let at = self.position;
        let v = self.inner.read_u32::<BigEndian>().map_err(|_| Error::Parse {
            offset: at,
            message: format!("truncated while reading {what}"),
        })?;
        self.position += 4;
        Ok(v)
    }

    fn read_exact(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.position;
        self.inner.read_exact(buf).map_err(|_| Error::Parse {
            offset: at,
            message: format!("truncated while reading {what}"),
        })?;
        self.position += buf.len() as u64;
        Ok(())
    }
}

/// Loads a paired IDX image/label file into a dataset.
pub fn load_idx(images_path: &Path, labels_path: &Path) -> Result<LabeledDataset> {
    let mut images = Offset::new(BufReader::new(File::open(images_path)?));
    let magic = images.read_u32("images magic")?;
    if magic != IMAGES_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad images magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}"),
        });
    }
    let count = images.read_u32("image count")? as usize;
    let rows = images.read_u32("row count")? as usize;
    let cols = images.read_u32("column count")? as usize;

    let mut labels = Offset::new(BufReader::new(File::open(labels_path)?));
    let magic = labels.read_u32("labels magic")?;
    if magic != LABELS_MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: format!("bad labels magic {magic:#010x}, expected {LABELS_MAGIC:#010x}"),
        });
    }
    let label_count = labels.read_u32("label count")? as usize;
    if label_count != count {
        return Err(Error::Parse {
            offset: 4,
            message: format!("label count {label_count} does not match image count {count}"),
        });
    }

    let dim = rows * cols;
    let mut label_bytes = vec![0u8; count];
    labels.read_exact(&mut label_bytes, "labels")?;

    let mut items = Vec::with_capacity(count);
    let mut buf = vec![0u8; dim];
    for (id, &label) in label_bytes.iter().enumerate() {
        images.read_exact(&mut buf, "image pixels")?;
        items.push(Item {
            id: id as u64,
            pixels: buf.iter().map(|&b| f64::from(b) / 255.0).collect(),
            label: label as usize,
        });
    }
    let num_classes = items.iter().map(|i| i.label + 1).max().unwrap_or(0);
    LabeledDataset::new(items, num_classes.max(1))
}

/// Writes a dataset back out as an IDX image/label pair, quantizing
/// pixels to bytes. Intended for inspecting synthetic datasets with
/// standard tooling.
pub fn save_idx(ds: &LabeledDataset, side: usize, images_path: &Path, labels_path: &Path) -> Result<()> {
    if side * side != ds.input_dim {
        return Err(Error::shape(format!(
            "side {side} squared does not match input dim {}",
            ds.input_dim
        )));
    }
    let mut images = File::create(images_path)?;
    images.write_u32::<BigEndian>(IMAGES_MAGIC)?;
    images.write_u32::<BigEndian>(ds.len() as u32)?;
    images.write_u32::<BigEndian>(side as u32)?;
    images.write_u32::<BigEndian>(side as u32)?;
    for item in &ds.items {
        let bytes: Vec<u8> = item
            .pixels
            .iter()
            .map(|&p| (p * 255.0).round().clamp(0.0, 255.0) as u8)
            .collect();
        images.write_all(&bytes)?;
    }

    let mut labels = File::create(labels_path)?;
    labels.write_u32::<BigEndian>(LABELS_MAGIC)?;
    labels.write_u32::<BigEndian>(ds.len() as u32)?;
    for item in &ds.items {
        labels.write_all(&[item.label as u8])?;
    }
    Ok(())
}
