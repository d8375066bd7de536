//! On-disk dataset format.
//!
//! A dataset directory holds one binary file per sequence plus a
//! `manifest.tsv` with one `id<TAB>label<TAB>file` line per sequence.
//!
//! Sequence file layout, all little-endian:
//!
//! ```text
//! magic  4 bytes  "MFRS"
//! F      u32      frame count
//! D      u32      feature dimension
//! flag   u8       1 if a saliency mask follows the features
//! feats  F*D f32  row-major
//! mask   F u8     0/1 per frame, present only if flag == 1
//! ```
//!
//! Features are stored as f32 and widened to f64 in memory, so writing and
//! reading back preserves ids, labels and saliency exactly and features to
//! f32 precision.

use std::fs;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use super::{DataError, Dataset, FrameSequence, Split};
use crate::numerics::Matrix;

const MAGIC: &[u8; 4] = b"MFRS";

fn write_sequence(seq: &FrameSequence, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_all(&(seq.num_frames() as u32).to_le_bytes())?;
    w.write_all(&(seq.feat_dim() as u32).to_le_bytes())?;
    w.write_all(&[seq.saliency.is_some() as u8])?;
    for &v in seq.frames.values() {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    if let Some(mask) = &seq.saliency {
        for &b in mask {
            w.write_all(&[b as u8])?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_sequence(path: &Path, id: String, label: usize) -> Result<FrameSequence, DataError> {
    let shown = path.display().to_string();
    let truncated = |detail: &str| DataError::Truncated {
        path: shown.clone(),
        detail: detail.to_string(),
    };

    let bytes = fs::read(path)?;
    if bytes.len() < 13 {
        return Err(truncated("shorter than the fixed header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(DataError::BadMagic { path: shown });
    }
    let f = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let d = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let has_mask = match bytes[12] {
        0 => false,
        1 => true,
        other => return Err(truncated(&format!("saliency flag byte is {other}, want 0 or 1"))),
    };
    if f == 0 || d == 0 {
        return Err(truncated("zero frame count or feature dimension"));
    }

    let feat_bytes = f
        .checked_mul(d)
        .and_then(|n| n.checked_mul(4))
        .ok_or_else(|| truncated("frame count times dimension overflows"))?;
    let expected = 13 + feat_bytes + if has_mask { f } else { 0 };
    if bytes.len() != expected {
        return Err(truncated(&format!("{} bytes, expected {expected}", bytes.len())));
    }

    let mut data = Vec::with_capacity(f * d);
    for chunk in bytes[13..13 + feat_bytes].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    let saliency = if has_mask {
        let mut mask = Vec::with_capacity(f);
        for (i, &b) in bytes[13 + feat_bytes..].iter().enumerate() {
            match b {
                0 => mask.push(false),
                1 => mask.push(true),
                other => {
                    return Err(truncated(&format!(
                        "saliency byte {i} is {other}, want 0 or 1"
                    )))
                }
            }
        }
        Some(mask)
    } else {
        None
    };

    Ok(FrameSequence { id, label, frames: Matrix::from_vec(f, d, data), saliency })
}

/// Write every sequence of `ds` into `dir` (created if missing) along with
/// `manifest.tsv`. Sequence files are named after a sanitized id.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<(), DataError> {
    ds.validate()?;
    fs::create_dir_all(dir)?;
    let mut manifest = BufWriter::new(fs::File::create(dir.join("manifest.tsv"))?);
    for (idx, seq) in ds.sequences.iter().enumerate() {
        let safe: String = seq
            .id
            .chars()
            .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
            .collect();
        let file = format!("{idx:05}_{safe}.mfrs");
        write_sequence(seq, &dir.join(&file))?;
        writeln!(manifest, "{}\t{}\t{}", seq.id, seq.label, file)?;
    }
    manifest.flush()?;
    Ok(())
}

/// Read a dataset back from `dir`, taking the class count as one more than
/// the largest label in the manifest.
pub fn read_dataset(dir: &Path) -> Result<Dataset, DataError> {
    let ds = read_manifest(dir, None)?;
    Ok(ds)
}

/// Read a dataset whose labels must all lie below `num_classes`.
pub fn read_dataset_with_classes(dir: &Path, num_classes: usize) -> Result<Dataset, DataError> {
    read_manifest(dir, Some(num_classes))
}

fn read_manifest(dir: &Path, num_classes: Option<usize>) -> Result<Dataset, DataError> {
    let manifest_path = dir.join("manifest.tsv");
    let shown = manifest_path.display().to_string();
    let mut text = String::new();
    fs::File::open(&manifest_path)?.read_to_string(&mut text)?;

    // Validate the whole manifest before touching any sequence file so that
    // structural problems are reported even when files are also missing.
    let mut entries = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: &str| DataError::BadManifest {
            path: shown.clone(),
            line: lineno + 1,
            detail: detail.to_string(),
        };
        let mut parts = line.split('\t');
        let id = parts.next().filter(|s| !s.is_empty()).ok_or_else(|| bad("missing id"))?;
        let label: usize = parts
            .next()
            .ok_or_else(|| bad("missing label"))?
            .parse()
            .map_err(|_| bad("label is not a non-negative integer"))?;
        let file = parts.next().filter(|s| !s.is_empty()).ok_or_else(|| bad("missing file"))?;
        if parts.next().is_some() {
            return Err(bad("more than three tab-separated fields"));
        }
        if let Some(c) = num_classes {
            if label >= c {
                return Err(DataError::LabelOutOfRange { id: id.to_string(), label, classes: c });
            }
        }
        entries.push((id.to_string(), label, file.to_string()));
    }

    let mut sequences = Vec::new();
    let mut max_label = 0usize;
    for (id, label, file) in entries {
        max_label = max_label.max(label);
        sequences.push(read_sequence(&dir.join(file), id, label)?);
    }

    let ds = Dataset {
        sequences,
        num_classes: num_classes.unwrap_or(max_label + 1),
        split: Split::Train,
    };
    ds.validate()?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::envdata::{generate_synthetic, SyntheticSpec};

    fn sample_dataset() -> Dataset {
        generate_synthetic(&SyntheticSpec {
            num_classes: 3,
            frames_per_video: 10,
            feat_dim: 4,
            salient_fraction: 0.2,
            confuser_fraction: 0.2,
            noise_sigma: 0.2,
            videos_per_class: 2,
            seed: 11,
        })
        .unwrap()
    }

    fn quantized(ds: &Dataset) -> Dataset {
        let mut out = ds.clone();
        for seq in &mut out.sequences {
            for v in seq.frames.values_mut() {
                *v = *v as f32 as f64;
            }
        }
        out
    }

    #[test]
    fn round_trip_preserves_everything_to_f32() {
        let ds = sample_dataset();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = read_dataset(dir.path()).unwrap();
        assert_eq!(back.num_classes, ds.num_classes);
        assert_eq!(back.sequences, quantized(&ds).sequences);
    }

    #[test]
    fn file_size_matches_format_arithmetic() {
        let seq = FrameSequence {
            id: "sz".into(),
            label: 0,
            frames: Matrix::zeros(10, 4),
            saliency: None,
        };
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("sz.mfrs");
        write_sequence(&seq, &path).unwrap();
        assert_eq!(fs::metadata(&path).unwrap().len(), 173);
    }

    #[test]
    fn corrupt_magic_is_a_distinct_error() {
        let ds = sample_dataset();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let victim = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().path())
            .find(|p| p.extension().is_some_and(|e| e == "mfrs"))
            .unwrap();
        let mut bytes = fs::read(&victim).unwrap();
        bytes[..4].copy_from_slice(b"XXXX");
        fs::write(&victim, bytes).unwrap();
        match read_dataset(dir.path()) {
            Err(DataError::BadMagic { .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let ds = sample_dataset();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let victim = fs::read_dir(dir.path())
            .unwrap()
            .map(|e| e.unwrap().path())
            .find(|p| p.extension().is_some_and(|e| e == "mfrs"))
            .unwrap();
        let bytes = fs::read(&victim).unwrap();
        fs::write(&victim, &bytes[..bytes.len() - 3]).unwrap();
        match read_dataset(dir.path()) {
            Err(DataError::Truncated { .. }) => {}
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn label_out_of_range_detected_with_explicit_class_count() {
        let ds = sample_dataset();
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        match read_dataset_with_classes(dir.path(), 2) {
            Err(DataError::LabelOutOfRange { label: 2, classes: 2, .. }) => {}
            other => panic!("expected LabelOutOfRange, got {other:?}"),
        }
    }

    #[test]
    fn malformed_manifest_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join("manifest.tsv"), "a\t0\tf.mfrs\nbroken line\n").unwrap();
        match read_dataset(dir.path()) {
            Err(DataError::BadManifest { line: 2, .. }) => {}
            other => panic!("expected BadManifest at line 2, got {other:?}"),
        }
    }
}
