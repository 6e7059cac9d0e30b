//! Dense row-major `f32` arrays and integer class maps.

use crate::error::{Error, Result};

/// Dense row-major array of `f32` values with up to four axes.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self::filled(shape, 0.0)
    }

    pub fn filled(shape: &[usize], value: f32) -> Self {
        assert!(
            !shape.is_empty() && shape.len() <= 4 && shape.iter().all(|&d| d > 0),
            "invalid tensor shape {shape:?}"
        );
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![value; len],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f32>) -> Result<Self> {
        if shape.is_empty() || shape.len() > 4 || shape.contains(&0) {
            return Err(Error::shape(format!("invalid tensor shape {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f32> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Interprets the tensor as channels × height × width. Two-axis tensors
    /// are treated as a single channel.
    pub fn chw(&self) -> Result<(usize, usize, usize)> {
        match *self.shape.as_slice() {
            [h, w] => Ok((1, h, w)),
            [c, h, w] => Ok((c, h, w)),
            [1, c, h, w] => Ok((c, h, w)),
            _ => Err(Error::shape(format!(
                "expected a C×H×W feature map, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Spatial plane `c` of a C×H×W tensor.
    pub fn plane(&self, c: usize) -> &[f32] {
        let (_, h, w) = self.chw().expect("plane() on non-spatial tensor");
        &self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let (_, h, w) = self.chw().expect("plane_mut() on non-spatial tensor");
        &mut self.data[c * h * w..(c + 1) * h * w]
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if expected != self.data.len() || shape.is_empty() || shape.len() > 4 {
            return Err(Error::shape(format!(
                "cannot reshape {:?} into {shape:?}",
                self.shape
            )));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> Self {
        Self {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs_diff(&self, other: &Tensor) -> f32 {
        assert_eq!(self.shape, other.shape, "max_abs_diff on mismatched shapes");
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f32::max)
    }

    /// Concatenates two C×H×W tensors along the channel axis.
    pub fn concat_channels(&self, other: &Tensor) -> Result<Tensor> {
        let (ca, ha, wa) = self.chw()?;
        let (cb, hb, wb) = other.chw()?;
        if (ha, wa) != (hb, wb) {
            return Err(Error::shape(format!(
                "cannot concatenate {:?} with {:?}",
                self.shape, other.shape
            )));
        }
        let mut data = Vec::with_capacity(self.len() + other.len());
        data.extend_from_slice(&self.data);
        data.extend_from_slice(&other.data);
        Tensor::from_vec(&[ca + cb, ha, wa], data)
    }

    /// Transposes each spatial plane.
    pub fn transpose_spatial(&self) -> Tensor {
        let (c, h, w) = self.chw().expect("transpose_spatial on non-spatial tensor");
        let mut out = vec![0.0; self.len()];
        for ch in 0..c {
            let src = self.plane(ch);
            let dst = &mut out[ch * h * w..(ch + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    dst[x * h + y] = src[y * w + x];
                }
            }
        }
        let shape = if self.shape.len() == 2 {
            vec![w, h]
        } else {
            vec![c, w, h]
        };
        Tensor::from_vec(&shape, out).expect("transpose preserves length")
    }
}

/// Per-voxel integer labels (class indices or binary masks), row-major.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ClassMap {
    height: usize,
    width: usize,
    labels: Vec<u8>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, labels: Vec<u8>) -> Result<Self> {
        if height * width != labels.len() || height == 0 || width == 0 {
            return Err(Error::shape(format!(
                "class map {height}×{width} needs {} labels, got {}",
                height * width,
                labels.len()
            )));
        }
        Ok(Self {
            height,
            width,
            labels,
        })
    }

    pub fn filled(height: usize, width: usize, label: u8) -> Self {
        Self {
            height,
            width,
            labels: vec![label; height * width],
        }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn labels_mut(&mut self) -> &mut [u8] {
        &mut self.labels
    }

    pub fn get(&self, y: usize, x: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Binary map of the voxels labelled `class`.
    pub fn select(&self, class: u8) -> ClassMap {
        ClassMap {
            height: self.height,
            width: self.width,
            labels: self.labels.iter().map(|&l| u8::from(l == class)).collect(),
        }
    }

    pub fn max_label(&self) -> u8 {
        self.labels.iter().copied().max().unwrap_or(0)
    }

    /// Per-voxel argmax over the channel axis of a K×H×W tensor. Ties go to
    /// the lowest class index.
    pub fn argmax(scores: &Tensor) -> Result<ClassMap> {
        let (k, h, w) = scores.chw()?;
        if k > usize::from(u8::MAX) + 1 {
            return Err(Error::shape(format!("{k} classes do not fit a u8 label")));
        }
        let n = h * w;
        let data = scores.data();
        let labels = (0..n)
            .map(|i| {
                let mut best = 0;
                for c in 1..k {
                    if data[c * n + i] > data[best * n + i] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        ClassMap::new(h, w, labels)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn from_vec_rejects_length_mismatch() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[2, 0], vec![]).is_err());
    }

    #[test]
    fn argmax_prefers_lowest_index_on_ties() {
        let t = Tensor::from_vec(&[2, 1, 2], vec![0.5, 0.2, 0.5, 0.8]).unwrap();
        assert_eq!(ClassMap::argmax(&t).unwrap().labels(), &[0, 1]);
    }

    #[test]
    fn transpose_twice_is_identity() {
        let t = Tensor::from_vec(&[2, 2, 3], (0..12).map(|v| v as f32).collect()).unwrap();
        assert_eq!(t.transpose_spatial().transpose_spatial(), t);
        assert_eq!(t.transpose_spatial().shape(), &[2, 3, 2]);
    }
}
