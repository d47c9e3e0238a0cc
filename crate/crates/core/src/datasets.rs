//! Labelled datasets: synthetic Gaussian blobs, IDX image files, splits and
//! label encodings.

use std::fs;
use std::io::Write;
use std::path::Path;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::rng::{gaussian, substream, Stream};
use crate::scalar::Scalar;

const IDX_IMAGE_MAGIC: u32 = 0x0000_0803;
const IDX_LABEL_MAGIC: u32 = 0x0000_0801;

/// How integer labels are turned into regression targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelEncoding {
    /// Two classes; class 0 maps to -1 and class 1 to +1.
    SignedBinary,
    OneHot,
}

/// Row-wise input normalisation applied when splitting.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Normalization {
    #[default]
    None,
    /// Every row rescaled to unit l2 norm. All-zero rows are an error.
    UnitNorm,
    /// Raw 8-bit intensities divided by 255.
    PixelScale,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitSpec {
    pub train_fraction: f64,
    pub seed: u64,
    pub normalize: Normalization,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    inputs: Array2<T>,
    labels: Vec<usize>,
    num_classes: usize,
    encoding: LabelEncoding,
    image_shape: Option<(usize, usize)>,
}

impl<T: Scalar> Dataset<T> {
    pub fn new(
        inputs: Array2<T>,
        labels: Vec<usize>,
        num_classes: usize,
        encoding: LabelEncoding,
    ) -> Result<Self> {
        if inputs.nrows() != labels.len() {
            return Err(Error::param(format!(
                "{} input rows but {} labels",
                inputs.nrows(),
                labels.len()
            )));
        }
        if num_classes < 2 {
            return Err(Error::param(format!(
                "need at least 2 classes, got {num_classes}"
            )));
        }
        if encoding == LabelEncoding::SignedBinary && num_classes != 2 {
            return Err(Error::param(format!(
                "signed binary encoding requires 2 classes, got {num_classes}"
            )));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= num_classes) {
            return Err(Error::param(format!(
                "label {l} at row {i} outside [0, {num_classes})"
            )));
        }
        if let Some((i, _)) = inputs
            .axis_iter(Axis(0))
            .enumerate()
            .find(|(_, r)| r.iter().any(|v| !v.is_finite()))
        {
            return Err(Error::param(format!("row {i} has non-finite entries")));
        }
        Ok(Self {
            inputs,
            labels,
            num_classes,
            encoding,
            image_shape: None,
        })
    }

    pub fn with_image_shape(mut self, height: usize, width: usize) -> Result<Self> {
        if height * width != self.dim() {
            return Err(Error::param(format!(
                "image shape {height}x{width} does not match dimension {}",
                self.dim()
            )));
        }
        self.image_shape = Some((height, width));
        Ok(self)
    }

    pub fn with_encoding(self, encoding: LabelEncoding) -> Result<Self> {
        let shape = self.image_shape;
        let mut ds = Dataset::new(self.inputs, self.labels, self.num_classes, encoding)?;
        ds.image_shape = shape;
        Ok(ds)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.inputs.ncols()
    }

    pub fn inputs(&self) -> ArrayView2<'_, T> {
        self.inputs.view()
    }

    pub fn input(&self, i: usize) -> ArrayView1<'_, T> {
        self.inputs.row(i)
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn encoding(&self) -> LabelEncoding {
        self.encoding
    }

    pub fn image_shape(&self) -> Option<(usize, usize)> {
        self.image_shape
    }

    /// Number of model outputs implied by the encoding (1 for signed binary).
    pub fn output_dim(&self) -> usize {
        match self.encoding {
            LabelEncoding::SignedBinary => 1,
            LabelEncoding::OneHot => self.num_classes,
        }
    }

    /// Regression targets: `n x 1` in {-1, +1} or `n x k` one-hot.
    pub fn label_matrix(&self) -> Array2<T> {
        let mut y = Array2::zeros((self.len(), self.output_dim()));
        for (i, &l) in self.labels.iter().enumerate() {
            match self.encoding {
                LabelEncoding::SignedBinary => y[[i, 0]] = signed_label(l),
                LabelEncoding::OneHot => y[[i, l]] = T::one(),
            }
        }
        y
    }

    /// Frequency of the most common label.
    pub fn majority_rate(&self) -> f64 {
        if self.is_empty() {
            return 0.0;
        }
        let mut counts = vec![0usize; self.num_classes];
        for &l in &self.labels {
            counts[l] += 1;
        }
        *counts.iter().max().unwrap() as f64 / self.len() as f64
    }

    pub fn subset(&self, indices: &[usize]) -> Result<Self> {
        if let Some(&bad) = indices.iter().find(|&&i| i >= self.len()) {
            return Err(Error::param(format!(
                "subset index {bad} out of range for {} rows",
                self.len()
            )));
        }
        Ok(Self {
            inputs: self.inputs.select(Axis(0), indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            num_classes: self.num_classes,
            encoding: self.encoding,
            image_shape: self.image_shape,
        })
    }

    pub fn normalized(&self, normalize: Normalization) -> Result<Self> {
        let mut out = self.clone();
        match normalize {
            Normalization::None => {}
            Normalization::PixelScale => out.inputs.mapv_inplace(|v| v / T::lit(255.0)),
            Normalization::UnitNorm => {
                for (i, mut row) in out.inputs.axis_iter_mut(Axis(0)).enumerate() {
                    let norm = row.dot(&row).sqrt();
                    if norm == T::zero() {
                        return Err(Error::param(format!(
                            "row {i} is all zero and cannot be unit-normalised"
                        )));
                    }
                    row.mapv_inplace(|v| v / norm);
                }
            }
        }
        Ok(out)
    }

    /// Class-balanced deterministic train/validation split.
    ///
    /// Within each class, indices are shuffled with the split seed and the first
    /// `round(train_fraction * count)` go to training. Both halves keep the
    /// original row order.
    pub fn split(&self, spec: &SplitSpec) -> Result<(Self, Self)> {
        if !(spec.train_fraction > 0.0 && spec.train_fraction < 1.0) {
            return Err(Error::param(format!(
                "train_fraction must lie in (0, 1), got {}",
                spec.train_fraction
            )));
        }
        let mut rng = substream(spec.seed, Stream::Split);
        let mut train = Vec::new();
        let mut val = Vec::new();
        for c in 0..self.num_classes {
            let mut members: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == c).collect();
            members.shuffle(&mut rng);
            let cut = (spec.train_fraction * members.len() as f64).round() as usize;
            train.extend_from_slice(&members[..cut]);
            val.extend_from_slice(&members[cut..]);
        }
        train.sort_unstable();
        val.sort_unstable();
        let tr = self.subset(&train)?.normalized(spec.normalize)?;
        let va = self.subset(&val)?.normalized(spec.normalize)?;
        Ok((tr, va))
    }

    /// Writes `x0,..,x{d-1},label` rows.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        let header: Vec<String> = (0..self.dim()).map(|j| format!("x{j}")).collect();
        out.push_str(&header.join(","));
        out.push_str(",label\n");
        for (row, &l) in self.inputs.axis_iter(Axis(0)).zip(&self.labels) {
            for v in row.iter() {
                out.push_str(&format!("{},", v.as_f64()));
            }
            out.push_str(&format!("{l}\n"));
        }
        fs::File::create(path)?.write_all(out.as_bytes())?;
        Ok(())
    }
}

pub(crate) fn signed_label<T: Scalar>(class: usize) -> T {
    if class == 0 {
        -T::one()
    } else {
        T::one()
    }
}

/// Inverse of [`Dataset::label_matrix`]: sign for a single column, argmax otherwise.
pub fn decode_labels<T: Scalar>(y: ArrayView2<'_, T>) -> Vec<usize> {
    y.axis_iter(Axis(0)).map(|row| classify(row)).collect()
}

/// Class predicted by a score vector: sign for scalar outputs (0 counts as
/// class 0), argmax with lowest-index tie breaking otherwise.
pub fn classify<T: Scalar>(scores: ArrayView1<'_, T>) -> usize {
    if scores.len() == 1 {
        usize::from(scores[0] > T::zero())
    } else {
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate() {
            if s > scores[best] {
                best = i;
            }
        }
        best
    }
}

/// Centre of class `c` for the synthetic blobs: `separation * e_c`.
pub fn blob_center<T: Scalar>(class: usize, dim: usize, separation: f64) -> Array1<T> {
    let mut c = Array1::zeros(dim);
    c[class] = T::lit(separation);
    c
}

/// Isotropic unit-variance Gaussian blobs around `separation * e_c`.
///
/// Example `i` belongs to class `i mod k`, so class sizes differ by at most one.
/// Two classes use the signed binary encoding, more use one-hot.
pub fn generate_gaussian_blobs<T: Scalar>(
    n: usize,
    d: usize,
    k: usize,
    separation: f64,
    seed: u64,
) -> Result<Dataset<T>> {
    if k < 2 || n < k {
        return Err(Error::param(format!("need k >= 2 and n >= k, got n = {n}, k = {k}")));
    }
    if d < k {
        return Err(Error::param(format!(
            "class centres use the first k basis vectors; need d >= k, got d = {d}, k = {k}"
        )));
    }
    if !(separation > 0.0 && separation.is_finite()) {
        return Err(Error::param(format!("separation must be positive, got {separation}")));
    }
    let mut rng = substream(seed, Stream::Dataset);
    let mut inputs = Array2::zeros((n, d));
    let labels: Vec<usize> = (0..n).map(|i| i % k).collect();
    for (i, mut row) in inputs.axis_iter_mut(Axis(0)).enumerate() {
        for v in row.iter_mut() {
            *v = gaussian::<T, _>(&mut rng, 1.0);
        }
        row[labels[i]] += T::lit(separation);
    }
    let encoding = if k == 2 {
        LabelEncoding::SignedBinary
    } else {
        LabelEncoding::OneHot
    };
    Dataset::new(inputs, labels, k, encoding)
}

struct IdxHeader {
    count: usize,
    dims: Vec<usize>,
}

fn read_idx_header(bytes: &[u8], magic: u32, what: &str) -> Result<IdxHeader> {
    let word = |at: usize| -> Result<u32> {
        bytes
            .get(at..at + 4)
            .map(|b| u32::from_be_bytes([b[0], b[1], b[2], b[3]]))
            .ok_or_else(|| Error::Format(format!("{what} file truncated in header")))
    };
    let found = word(0)?;
    if found != magic {
        return Err(Error::Format(format!(
            "{what} file has magic 0x{found:08x}, expected 0x{magic:08x}"
        )));
    }
    let ndim = (magic & 0xff) as usize;
    let count = word(4)? as usize;
    let dims = (1..ndim)
        .map(|k| word(4 + 4 * k).map(|v| v as usize))
        .collect::<Result<Vec<_>>>()?;
    Ok(IdxHeader { count, dims })
}

/// Parses an IDX image/label pair already loaded in memory.
///
/// Pixels are divided by 255. With `classes`, only those labels are kept and
/// they are renumbered by ascending original value. `limit` caps the number of
/// examples kept after filtering.
pub fn parse_idx<T: Scalar>(
    images: &[u8],
    labels: &[u8],
    limit: Option<usize>,
    classes: Option<&[usize]>,
) -> Result<Dataset<T>> {
    let ih = read_idx_header(images, IDX_IMAGE_MAGIC, "image")?;
    let lh = read_idx_header(labels, IDX_LABEL_MAGIC, "label")?;
    if ih.count != lh.count {
        return Err(Error::Format(format!(
            "image file holds {} items but label file holds {}",
            ih.count, lh.count
        )));
    }
    let (rows, cols) = (ih.dims[0], ih.dims[1]);
    let pixels = rows
        .checked_mul(cols)
        .ok_or_else(|| Error::Format("image dimensions overflow".into()))?;
    let img_off = 16;
    let lab_off = 8;
    let need = ih
        .count
        .checked_mul(pixels)
        .and_then(|p| p.checked_add(img_off))
        .ok_or_else(|| Error::Format("image payload size overflows".into()))?;
    if images.len() < need {
        return Err(Error::Format(format!(
            "image file truncated: {} bytes, need {need}",
            images.len()
        )));
    }
    if labels.len() < lab_off + lh.count {
        return Err(Error::Format(format!(
            "label file truncated: {} bytes, need {}",
            labels.len(),
            lab_off + lh.count
        )));
    }

    let mut keep_classes: Option<Vec<usize>> = classes.map(|c| {
        let mut c = c.to_vec();
        c.sort_unstable();
        c.dedup();
        c
    });
    if let Some(c) = &keep_classes {
        if c.len() < 2 {
            return Err(Error::param("class filter must name at least 2 classes"));
        }
    }
    let cap = limit.unwrap_or(usize::MAX);
    let mut selected = Vec::new();
    let mut new_labels = Vec::new();
    for i in 0..ih.count {
        if selected.len() >= cap {
            break;
        }
        let raw = labels[lab_off + i] as usize;
        let mapped = match &keep_classes {
            Some(c) => match c.binary_search(&raw) {
                Ok(pos) => pos,
                Err(_) => continue,
            },
            None => raw,
        };
        selected.push(i);
        new_labels.push(mapped);
    }
    let num_classes = match keep_classes.take() {
        Some(c) => c.len(),
        None => new_labels.iter().copied().max().map_or(2, |m| (m + 1).max(2)),
    };
    let mut inputs = Array2::zeros((selected.len(), pixels));
    let scale = T::lit(255.0);
    for (r, &i) in selected.iter().enumerate() {
        let src = &images[img_off + i * pixels..img_off + (i + 1) * pixels];
        for (dst, &b) in inputs.row_mut(r).iter_mut().zip(src) {
            *dst = T::lit(b as f64) / scale;
        }
    }
    let encoding = if num_classes == 2 {
        LabelEncoding::SignedBinary
    } else {
        LabelEncoding::OneHot
    };
    Dataset::new(inputs, new_labels, num_classes, encoding)?.with_image_shape(rows, cols)
}

pub fn load_idx_images<T: Scalar>(
    image_path: &Path,
    label_path: &Path,
    limit: Option<usize>,
    classes: Option<&[usize]>,
) -> Result<Dataset<T>> {
    let images = fs::read(image_path)?;
    let labels = fs::read(label_path)?;
    parse_idx(&images, &labels, limit, classes)
}

/// Serialises images and labels in IDX format (pixel values rounded from `[0,1]`).
pub fn encode_idx(images: &[Vec<u8>], rows: usize, cols: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
    let mut img = Vec::with_capacity(16 + images.len() * rows * cols);
    img.extend_from_slice(&IDX_IMAGE_MAGIC.to_be_bytes());
    img.extend_from_slice(&(images.len() as u32).to_be_bytes());
    img.extend_from_slice(&(rows as u32).to_be_bytes());
    img.extend_from_slice(&(cols as u32).to_be_bytes());
    for im in images {
        img.extend_from_slice(im);
    }
    let mut lab = Vec::with_capacity(8 + labels.len());
    lab.extend_from_slice(&IDX_LABEL_MAGIC.to_be_bytes());
    lab.extend_from_slice(&(labels.len() as u32).to_be_bytes());
    lab.extend_from_slice(labels);
    (img, lab)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn idx_pair(n: usize, labels: &[u8]) -> (Vec<u8>, Vec<u8>) {
        let images: Vec<Vec<u8>> = (0..n).map(|i| vec![(i * 20) as u8; 28 * 28]).collect();
        encode_idx(&images, 28, 28, labels)
    }

    #[test]
    fn blobs_are_balanced_and_centred() {
        let ds = generate_gaussian_blobs::<f64>(4, 2, 2, 10.0, 0).unwrap();
        assert_eq!(ds.labels(), &[0, 1, 0, 1]);
        let c0 = blob_center::<f64>(0, 2, 10.0);
        let c1 = blob_center::<f64>(1, 2, 10.0);
        let gap = (&c0 - &c1).mapv(|v| v * v).sum().sqrt();
        assert!((gap - 10.0 * 2f64.sqrt()).abs() < 1e-12);
        // sample means stay near their centres
        for c in 0..2 {
            let rows: Vec<usize> = (0..4).filter(|&i| ds.labels()[i] == c).collect();
            let mean = ds.inputs().select(Axis(0), &rows).mean_axis(Axis(0)).unwrap();
            let off = (&mean - &blob_center::<f64>(c, 2, 10.0)).mapv(|v| v * v).sum().sqrt();
            assert!(off < 6.0, "class {c} mean is {off} from its centre");
        }
    }

    #[test]
    fn blobs_are_bit_reproducible() {
        let a = generate_gaussian_blobs::<f64>(100, 16, 2, 5.0, 7).unwrap();
        let b = generate_gaussian_blobs::<f64>(100, 16, 2, 5.0, 7).unwrap();
        assert_eq!(a, b);
        let c = generate_gaussian_blobs::<f64>(100, 16, 2, 5.0, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn blob_size_errors() {
        assert!(generate_gaussian_blobs::<f64>(1, 2, 2, 1.0, 0).is_err());
        assert!(generate_gaussian_blobs::<f64>(10, 0, 2, 1.0, 0).is_err());
        assert!(generate_gaussian_blobs::<f64>(10, 2, 2, 0.0, 0).is_err());
        assert!(generate_gaussian_blobs::<f64>(10, 2, 3, 1.0, 0).is_err());
    }

    #[test]
    fn signed_binary_label_matrix() {
        let ds = Dataset::new(array![[1.0], [2.0]], vec![0, 1], 2, LabelEncoding::SignedBinary).unwrap();
        assert_eq!(ds.label_matrix(), array![[-1.0], [1.0]]);
    }

    #[test]
    fn one_hot_label_matrix() {
        let ds = Dataset::new(array![[1.0f64]], vec![2], 3, LabelEncoding::OneHot).unwrap();
        assert_eq!(ds.label_matrix(), array![[0.0, 0.0, 1.0]]);
    }

    #[test]
    fn empty_label_matrix() {
        let ds = Dataset::<f64>::new(Array2::zeros((0, 3)), vec![], 3, LabelEncoding::OneHot).unwrap();
        assert_eq!(ds.label_matrix().dim(), (0, 3));
    }

    #[test]
    fn invariants_are_checked() {
        assert!(Dataset::new(array![[1.0f64]], vec![3], 3, LabelEncoding::OneHot).is_err());
        assert!(Dataset::new(array![[1.0f64]], vec![0], 3, LabelEncoding::SignedBinary).is_err());
        assert!(Dataset::new(array![[f64::INFINITY]], vec![0], 2, LabelEncoding::OneHot).is_err());
    }

    #[test]
    fn unit_norm_rejects_zero_rows() {
        let ds = Dataset::new(array![[3.0f64, 4.0], [0.0, 0.0]], vec![0, 1], 2, LabelEncoding::SignedBinary)
            .unwrap();
        assert!(ds.normalized(Normalization::UnitNorm).is_err());
        let ok = ds.subset(&[0]).unwrap().normalized(Normalization::UnitNorm).unwrap();
        assert_eq!(ok.input(0).to_vec(), vec![0.6, 0.8]);
    }

    #[test]
    fn split_is_balanced_and_deterministic() {
        let ds = generate_gaussian_blobs::<f64>(40, 4, 2, 3.0, 1).unwrap();
        let spec = SplitSpec {
            train_fraction: 0.5,
            seed: 9,
            normalize: Normalization::UnitNorm,
        };
        let (tr, va) = ds.split(&spec).unwrap();
        let (tr2, va2) = ds.split(&spec).unwrap();
        assert_eq!(tr, tr2);
        assert_eq!(va, va2);
        assert_eq!(tr.len(), 20);
        assert_eq!(tr.labels().iter().filter(|&&l| l == 0).count(), 10);
        assert_eq!(va.labels().iter().filter(|&&l| l == 1).count(), 10);
        for r in tr.inputs().axis_iter(Axis(0)) {
            assert!((r.dot(&r).sqrt() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn idx_limit() {
        let (img, lab) = idx_pair(10, &[0, 1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let ds = parse_idx::<f64>(&img, &lab, Some(5), None).unwrap();
        assert_eq!(ds.len(), 5);
        assert_eq!(ds.dim(), 784);
        assert_eq!(ds.image_shape(), Some((28, 28)));
        assert_eq!(ds.num_classes(), 5);
        assert!((ds.input(1)[0] - 20.0 / 255.0).abs() < 1e-15);
    }

    #[test]
    fn idx_bad_magic() {
        let (mut img, lab) = idx_pair(2, &[0, 1]);
        img[..4].copy_from_slice(&[0, 0, 0, 0]);
        assert!(matches!(parse_idx::<f64>(&img, &lab, None, None), Err(Error::Format(_))));
    }

    #[test]
    fn idx_truncated_and_mismatched() {
        let (img, lab) = idx_pair(3, &[0, 1, 1]);
        assert!(matches!(
            parse_idx::<f64>(&img[..img.len() - 1], &lab, None, None),
            Err(Error::Format(_))
        ));
        let (_, lab2) = idx_pair(2, &[0, 1]);
        assert!(matches!(parse_idx::<f64>(&img, &lab2, None, None), Err(Error::Format(_))));
        assert!(matches!(parse_idx::<f64>(&img[..10], &lab, None, None), Err(Error::Format(_))));
    }

    #[test]
    fn idx_class_filter_relabels() {
        let (img, lab) = idx_pair(6, &[3, 1, 5, 3, 0, 5]);
        let ds = parse_idx::<f64>(&img, &lab, None, Some(&[5, 3])).unwrap();
        assert_eq!(ds.labels(), &[0, 1, 0, 1]);
        assert_eq!(ds.num_classes(), 2);
        assert_eq!(ds.encoding(), LabelEncoding::SignedBinary);
    }

    #[test]
    fn csv_header() {
        let ds = Dataset::new(array![[1.5f64, 2.0]], vec![1], 2, LabelEncoding::SignedBinary).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.csv");
        ds.write_csv(&p).unwrap();
        assert_eq!(fs::read_to_string(p).unwrap(), "x0,x1,label\n1.5,2,1\n");
    }
}
