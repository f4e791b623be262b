//! Binary artifact formats for everything the pipeline persists.
//!
//! Four formats, all little-endian, all free of timestamps or other
//! machine-dependent bytes so that identical runs produce identical files:
//!
//! * `LTDT` — a float tensor: magic, version byte, u32 rank, u32 dims,
//!   row-major f32 payload. Feature matrices are rank 2.
//! * `LTLB` — integer labels: magic, u32 count, u32 entries. Sits next to
//!   the `LTDT` file it annotates.
//! * `LTSL` — soft-label slices: magic, version byte, u32 (k, M, K), the
//!   k·M·K f32 logits, f64 jitter sigma, then the teacher fingerprints.
//! * `LTMD` — model checkpoint: magic, version byte, u32 dims, activation
//!   tag, f32 parameters in layer order.
//!
//! Readers validate magic, version, and exact length; a file that parses
//! but carries extra bytes is rejected, because trailing garbage usually
//! means a concatenated or half-overwritten artifact.
//!
//! In-memory model parameters are f64 but checkpoints are f32 by design:
//! reloading a checkpoint rounds parameters to f32 precision, which is the
//! precision every fingerprint is computed at.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::distill::DistilledSet;
use crate::longtail::LabeledSet;
use crate::model::{Activation, MlpModel};
use crate::numcore::Matrix;
use crate::softlabel::SoftLabelSet;
use crate::{Error, Result};

pub const TENSOR_MAGIC: [u8; 4] = *b"LTDT";
pub const LABEL_MAGIC: [u8; 4] = *b"LTLB";
pub const SOFTLABEL_MAGIC: [u8; 4] = *b"LTSL";
pub const MODEL_MAGIC: [u8; 4] = *b"LTMD";
pub const FORMAT_VERSION: u8 = 0x01;

fn read_exact_or_truncated(r: &mut impl Read, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == std::io::ErrorKind::UnexpectedEof {
            Error::format(format!("file truncated while reading {what}"))
        } else {
            Error::Io(e)
        }
    })
}

fn read_u8(r: &mut impl Read, what: &str) -> Result<u8> {
    let mut b = [0u8; 1];
    read_exact_or_truncated(r, &mut b, what)?;
    Ok(b[0])
}

fn read_u32(r: &mut impl Read, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_truncated(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, what: &str) -> Result<u64> {
    let mut b = [0u8; 8];
    read_exact_or_truncated(r, &mut b, what)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read, what: &str) -> Result<f64> {
    let mut b = [0u8; 8];
    read_exact_or_truncated(r, &mut b, what)?;
    Ok(f64::from_le_bytes(b))
}

fn read_f32_payload(r: &mut impl Read, count: usize, what: &str) -> Result<Vec<f32>> {
    let mut bytes = vec![0u8; count * 4];
    read_exact_or_truncated(r, &mut bytes, what)?;
    Ok(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
}

fn expect_magic(r: &mut impl Read, expected: [u8; 4], format_name: &str) -> Result<()> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(r, &mut magic, "magic bytes")?;
    if magic != expected {
        return Err(Error::format(format!(
            "bad magic for {format_name}: expected {:?}, found {:?}",
            String::from_utf8_lossy(&expected),
            String::from_utf8_lossy(&magic)
        )));
    }
    Ok(())
}

fn expect_version(r: &mut impl Read, format_name: &str) -> Result<()> {
    let version = read_u8(r, "version byte")?;
    if version != FORMAT_VERSION {
        return Err(Error::format(format!(
            "unsupported {format_name} version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    Ok(())
}

fn expect_eof(r: &mut impl Read, format_name: &str) -> Result<()> {
    let mut probe = [0u8; 1];
    match r.read(&mut probe) {
        Ok(0) => Ok(()),
        Ok(_) => {
            Err(Error::format(format!("{format_name} file has trailing bytes after the payload")))
        }
        Err(e) => Err(Error::Io(e)),
    }
}

fn as_u32(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value)
        .map_err(|_| Error::capacity(format!("{what} = {value} exceeds the u32 format field")))
}

/// Writes a rank-2 tensor in `LTDT` format.
pub fn write_tensor(w: &mut impl Write, m: &Matrix) -> Result<()> {
    let (rows, cols) = m.shape();
    w.write_all(&TENSOR_MAGIC)?;
    w.write_all(&[FORMAT_VERSION])?;
    w.write_all(&2u32.to_le_bytes())?;
    w.write_all(&as_u32(rows, "tensor rows")?.to_le_bytes())?;
    w.write_all(&as_u32(cols, "tensor cols")?.to_le_bytes())?;
    for v in m.as_slice() {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

/// Reads one `LTDT` tensor; the stream may continue afterwards.
pub fn read_tensor(r: &mut impl Read) -> Result<Matrix> {
    expect_magic(r, TENSOR_MAGIC, "tensor")?;
    expect_version(r, "tensor")?;
    let rank = read_u32(r, "tensor rank")?;
    if rank != 2 {
        return Err(Error::format(format!("tensor rank {rank} unsupported, expected 2")));
    }
    let rows = read_u32(r, "tensor rows")? as usize;
    let cols = read_u32(r, "tensor cols")? as usize;
    let payload = read_f32_payload(r, rows.saturating_mul(cols), "tensor payload")?;
    Matrix::from_vec(rows, cols, payload)
        .map_err(|e| Error::format(format!("tensor payload invalid: {e}")))
}

/// Writes labels in `LTLB` format (no version byte; the layout is fixed).
pub fn write_labels(w: &mut impl Write, labels: &[usize]) -> Result<()> {
    w.write_all(&LABEL_MAGIC)?;
    w.write_all(&as_u32(labels.len(), "label count")?.to_le_bytes())?;
    for &l in labels {
        w.write_all(&as_u32(l, "label value")?.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_labels(r: &mut impl Read) -> Result<Vec<usize>> {
    expect_magic(r, LABEL_MAGIC, "labels")?;
    let count = read_u32(r, "label count")? as usize;
    let mut labels = Vec::with_capacity(count);
    for _ in 0..count {
        labels.push(read_u32(r, "label entry")? as usize);
    }
    Ok(labels)
}

/// Writes a model checkpoint in `LTMD` format.
pub fn write_model(w: &mut impl Write, model: &MlpModel) -> Result<()> {
    w.write_all(&MODEL_MAGIC)?;
    w.write_all(&[FORMAT_VERSION])?;
    w.write_all(&as_u32(model.input_dim(), "input dim")?.to_le_bytes())?;
    w.write_all(&as_u32(model.hidden_dim(), "hidden dim")?.to_le_bytes())?;
    w.write_all(&as_u32(model.num_classes(), "class count")?.to_le_bytes())?;
    w.write_all(&[model.activation().tag()])?;
    for p in model.params_f32() {
        w.write_all(&p.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_model(r: &mut impl Read) -> Result<MlpModel> {
    expect_magic(r, MODEL_MAGIC, "model")?;
    expect_version(r, "model")?;
    let input_dim = read_u32(r, "input dim")? as usize;
    let hidden_dim = read_u32(r, "hidden dim")? as usize;
    let num_classes = read_u32(r, "class count")? as usize;
    let activation = Activation::from_tag(read_u8(r, "activation tag")?)?;
    let count = crate::model::param_count(input_dim, hidden_dim, num_classes);
    let params = read_f32_payload(r, count, "parameter payload")?;
    MlpModel::from_params_f32(input_dim, hidden_dim, num_classes, activation, &params)
}

/// Writes soft-label slices in `LTSL` format.
pub fn write_softlabels(w: &mut impl Write, set: &SoftLabelSet) -> Result<()> {
    w.write_all(&SOFTLABEL_MAGIC)?;
    w.write_all(&[FORMAT_VERSION])?;
    w.write_all(&as_u32(set.num_label_epochs(), "label epoch count")?.to_le_bytes())?;
    w.write_all(&as_u32(set.num_items(), "item count")?.to_le_bytes())?;
    w.write_all(&as_u32(set.num_classes(), "class count")?.to_le_bytes())?;
    for e in 0..set.num_label_epochs() {
        for v in set.slice(e).as_slice() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.write_all(&set.jitter_sigma().to_le_bytes())?;
    w.write_all(&as_u32(set.teacher_ids().len(), "teacher id count")?.to_le_bytes())?;
    for id in set.teacher_ids() {
        w.write_all(&id.to_le_bytes())?;
    }
    Ok(())
}

pub fn read_softlabels(r: &mut impl Read) -> Result<SoftLabelSet> {
    expect_magic(r, SOFTLABEL_MAGIC, "soft labels")?;
    expect_version(r, "soft labels")?;
    let k = read_u32(r, "label epoch count")? as usize;
    let items = read_u32(r, "item count")? as usize;
    let classes = read_u32(r, "class count")? as usize;
    let mut slices = Vec::with_capacity(k);
    for e in 0..k {
        let payload =
            read_f32_payload(r, items * classes, &format!("logits payload of slice {e}"))?;
        let m = Matrix::from_vec(items, classes, payload)
            .map_err(|e| Error::format(format!("logits payload invalid: {e}")))?;
        slices.push(m);
    }
    let jitter_sigma = read_f64(r, "jitter sigma")?;
    let id_count = read_u32(r, "teacher id count")? as usize;
    let mut teacher_ids = Vec::with_capacity(id_count);
    for _ in 0..id_count {
        teacher_ids.push(read_u64(r, "teacher id")?);
    }
    SoftLabelSet::new(slices, jitter_sigma, teacher_ids)
        .map_err(|e| Error::format(format!("soft-label payload invalid: {e}")))
}

fn open_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn open_reader(path: &Path) -> Result<BufReader<File>> {
    Ok(BufReader::new(File::open(path)?))
}

/// Saves features to `features_path` (`LTDT`) and labels to the sibling
/// `labels_path` (`LTLB`).
pub fn save_labeled_set(set: &LabeledSet, features_path: &Path, labels_path: &Path) -> Result<()> {
    let mut fw = open_writer(features_path)?;
    write_tensor(&mut fw, set.features())?;
    fw.flush()?;
    let mut lw = open_writer(labels_path)?;
    write_labels(&mut lw, set.labels())?;
    lw.flush()?;
    Ok(())
}

/// Loads the `LTDT`/`LTLB` pair back into a [`LabeledSet`].
///
/// `num_classes` comes from the experiment config: the label file stores
/// raw indices, not the class-space size.
pub fn load_labeled_set(
    features_path: &Path,
    labels_path: &Path,
    num_classes: usize,
) -> Result<LabeledSet> {
    let mut fr = open_reader(features_path)?;
    let features = read_tensor(&mut fr)?;
    expect_eof(&mut fr, "tensor")?;
    let mut lr = open_reader(labels_path)?;
    let labels = read_labels(&mut lr)?;
    expect_eof(&mut lr, "labels")?;
    LabeledSet::new(features, labels, num_classes)
        .map_err(|e| Error::format(format!("artifact pair is inconsistent: {e}")))
}

/// Saves a distilled set with the same `LTDT`/`LTLB` pair a raw dataset
/// uses; its per-class instance count travels in the run manifest.
pub fn save_distilled_set(
    set: &DistilledSet,
    features_path: &Path,
    labels_path: &Path,
) -> Result<()> {
    let mut fw = open_writer(features_path)?;
    write_tensor(&mut fw, set.features())?;
    fw.flush()?;
    let mut lw = open_writer(labels_path)?;
    write_labels(&mut lw, set.labels())?;
    lw.flush()?;
    Ok(())
}

/// Loads a distilled set and checks the label file matches the interleaved
/// layout a distilled set is defined by (item `m` labeled `m mod K`).
pub fn load_distilled_set(
    features_path: &Path,
    labels_path: &Path,
    num_classes: usize,
) -> Result<DistilledSet> {
    let mut fr = open_reader(features_path)?;
    let features = read_tensor(&mut fr)?;
    expect_eof(&mut fr, "tensor")?;
    let mut lr = open_reader(labels_path)?;
    let labels = read_labels(&mut lr)?;
    expect_eof(&mut lr, "labels")?;
    let rows = features.shape().0;
    if num_classes == 0 || rows % num_classes != 0 {
        return Err(Error::format(format!(
            "{rows} distilled rows do not divide into {num_classes} classes"
        )));
    }
    let set = DistilledSet::new(features, rows / num_classes, num_classes)?;
    if set.labels() != labels.as_slice() {
        return Err(Error::format(
            "label file does not match the interleaved distilled layout".to_string(),
        ));
    }
    Ok(set)
}

pub fn save_model(path: &Path, model: &MlpModel) -> Result<()> {
    let mut w = open_writer(path)?;
    write_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<MlpModel> {
    let mut r = open_reader(path)?;
    let model = read_model(&mut r)?;
    expect_eof(&mut r, "model")?;
    Ok(model)
}

pub fn save_softlabel_set(path: &Path, set: &SoftLabelSet) -> Result<()> {
    let mut w = open_writer(path)?;
    write_softlabels(&mut w, set)?;
    w.flush()?;
    Ok(())
}

pub fn load_softlabel_set(path: &Path) -> Result<SoftLabelSet> {
    let mut r = open_reader(path)?;
    let set = read_softlabels(&mut r)?;
    expect_eof(&mut r, "soft labels")?;
    Ok(set)
}
