//! IDX image/label file ingestion (the Fashion-MNIST container format)
//! plus a writer so synthetic sets can round-trip through the same path.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use tnas_autodiff::{Scalar, Tensor};

use crate::error::{Result, TnasError};
use crate::harness::data::LabeledImages;

pub const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
pub const IDX_LABELS_MAGIC: u32 = 0x0000_0801;

fn read_u32_be<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)
        .map_err(|_| TnasError::IdxFormat("truncated header".into()))?;
    Ok(u32::from_be_bytes(b))
}

/// Parse an IDX image file and its label file into a dataset with pixel
/// values scaled to [0, 1].
pub fn load_idx_images<T: Scalar>(
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
    classes: usize,
) -> Result<LabeledImages<T>> {
    let mut ir = BufReader::new(File::open(images_path)?);
    let magic = read_u32_be(&mut ir)?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(TnasError::IdxFormat(format!(
            "image magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}"
        )));
    }
    let n = read_u32_be(&mut ir)? as usize;
    let h = read_u32_be(&mut ir)? as usize;
    let w = read_u32_be(&mut ir)? as usize;
    let mut pixels = vec![0u8; n * h * w];
    ir.read_exact(&mut pixels)
        .map_err(|_| TnasError::IdxFormat("truncated image payload".into()))?;

    let mut lr = BufReader::new(File::open(labels_path)?);
    let magic = read_u32_be(&mut lr)?;
    if magic != IDX_LABELS_MAGIC {
        return Err(TnasError::IdxFormat(format!(
            "label magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}"
        )));
    }
    let ln = read_u32_be(&mut lr)? as usize;
    if ln != n {
        return Err(TnasError::IdxFormat(format!(
            "count mismatch: {n} images vs {ln} labels"
        )));
    }
    let mut labels = vec![0u8; ln];
    lr.read_exact(&mut labels)
        .map_err(|_| TnasError::IdxFormat("truncated label payload".into()))?;
    if let Some(&bad) = labels.iter().find(|&&l| l as usize >= classes) {
        return Err(TnasError::IdxFormat(format!(
            "label {bad} outside [0, {})",
            classes
        )));
    }

    let values: Vec<T> = pixels
        .iter()
        .map(|&p| T::from_f64(p as f64 / 255.0))
        .collect();
    Ok(LabeledImages {
        images: Tensor::from_vec(vec![n, 1, h, w], values)?,
        labels: labels.into_iter().map(|l| l as usize).collect(),
        classes,
    })
}

/// Write a dataset back to the IDX pair; values are clamped to [0, 1] and
/// quantized to bytes.
pub fn save_idx_images<T: Scalar>(
    data: &LabeledImages<T>,
    images_path: impl AsRef<Path>,
    labels_path: impl AsRef<Path>,
) -> Result<()> {
    let shape = data.images.shape().to_vec();
    let (n, h, w) = (shape[0], shape[2], shape[3]);
    let mut iw = BufWriter::new(File::create(images_path)?);
    iw.write_all(&IDX_IMAGES_MAGIC.to_be_bytes())?;
    iw.write_all(&(n as u32).to_be_bytes())?;
    iw.write_all(&(h as u32).to_be_bytes())?;
    iw.write_all(&(w as u32).to_be_bytes())?;
    for v in data.images.values() {
        let b = (v.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8;
        iw.write_all(&[b])?;
    }
    iw.flush()?;

    let mut lw = BufWriter::new(File::create(labels_path)?);
    lw.write_all(&IDX_LABELS_MAGIC.to_be_bytes())?;
    lw.write_all(&(n as u32).to_be_bytes())?;
    for &l in &data.labels {
        lw.write_all(&[l as u8])?;
    }
    lw.flush()?;
    Ok(())
}
