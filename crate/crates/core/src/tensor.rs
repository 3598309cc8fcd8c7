//! Dense row-major f64 tensors.
//!
//! Tensors are immutable once handed out: operations allocate fresh buffers.
//! Finiteness is enforced at the public construction boundary; internal ops
//! that cannot introduce NaN/Inf from finite inputs skip the re-scan.

use crate::error::{Error, Result};
use crate::rng::Rng;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    /// Builds a tensor, rejecting shape/data length mismatches and non-finite
    /// values.
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("tensor construction", &shape, &[data.len()]));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                context: format!("tensor construction at flat index {i}"),
            });
        }
        Ok(Tensor { shape, data })
    }

    /// Skips the finiteness scan. Intended for loss debugging and for internal
    /// ops whose inputs are already finite.
    pub fn new_unchecked(shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Tensor { shape, data }
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; numel],
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![value],
        }
    }

    /// Uniform draws in [lo, hi).
    pub fn uniform(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| rng.range_f64(lo, hi)).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    /// Normal draws with the given mean and standard deviation.
    pub fn normal(shape: &[usize], mean: f64, std: f64, rng: &mut Rng) -> Self {
        let numel = shape.iter().product();
        let data = (0..numel).map(|_| mean + std * rng.next_normal()).collect();
        Tensor {
            shape: shape.to_vec(),
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        let numel: usize = shape.iter().product();
        if numel != self.data.len() {
            return Err(Error::shape("reshape", shape, &self.shape));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: self.data.clone(),
        })
    }

    pub fn map(&self, mut f: impl FnMut(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Tensor, mut f: impl FnMut(f64, f64) -> f64) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape("elementwise op", &self.shape, &other.shape));
        }
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(&a, &b)| f(a, b))
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data,
        })
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.map(|v| c * v)
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Tensor {
        self.map(|v| v.clamp(lo, hi))
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn dot(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("dot", &self.shape, &other.shape));
        }
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn norm_l2(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Mean squared difference; errors on shape mismatch.
    pub fn mse(&self, other: &Tensor) -> Result<f64> {
        if self.shape != other.shape {
            return Err(Error::shape("mse", &self.shape, &other.shape));
        }
        let n = self.data.len().max(1) as f64;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n)
    }

    /// Rows `rows` of a tensor whose first axis indexes items. Output keeps
    /// the remaining axes.
    pub fn take_rows(&self, rows: &[usize]) -> Result<Tensor> {
        if self.shape.is_empty() {
            return Err(Error::invalid("take_rows on rank-0 tensor"));
        }
        let n = self.shape[0];
        let stride: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * stride);
        for &r in rows {
            if r >= n {
                return Err(Error::invalid(format!("row {r} out of range 0..{n}")));
            }
            data.extend_from_slice(&self.data[r * stride..(r + 1) * stride]);
        }
        let mut shape = self.shape.clone();
        shape[0] = rows.len();
        Ok(Tensor { shape, data })
    }

    /// Single item of a batch as a tensor with leading axis 1.
    pub fn row(&self, index: usize) -> Result<Tensor> {
        self.take_rows(&[index])
    }

    /// Stacks tensors of identical shape along a new leading axis.
    pub fn stack(items: &[Tensor]) -> Result<Tensor> {
        let first = items
            .first()
            .ok_or_else(|| Error::invalid("stack of zero tensors"))?;
        let mut data = Vec::with_capacity(first.numel() * items.len());
        for it in items {
            if it.shape != first.shape {
                return Err(Error::shape("stack", &first.shape, &it.shape));
            }
            data.extend_from_slice(&it.data);
        }
        let mut shape = vec![items.len()];
        shape.extend_from_slice(&first.shape);
        Ok(Tensor { shape, data })
    }

    /// Nearest-neighbour upsampling of a [B,C,H,W] tensor by an integer
    /// factor.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor> {
        if self.shape.len() != 4 {
            return Err(Error::invalid("upsample_nearest expects a [B,C,H,W] tensor"));
        }
        if factor == 0 {
            return Err(Error::invalid("upsample factor must be positive"));
        }
        if factor == 1 {
            return Ok(self.clone());
        }
        let (b, c, h, w) = (self.shape[0], self.shape[1], self.shape[2], self.shape[3]);
        let (oh, ow) = (h * factor, w * factor);
        let mut data = vec![0.0; b * c * oh * ow];
        for bi in 0..b {
            for ci in 0..c {
                let src = (bi * c + ci) * h * w;
                let dst = (bi * c + ci) * oh * ow;
                for y in 0..oh {
                    let sy = y / factor;
                    for x in 0..ow {
                        data[dst + y * ow + x] = self.data[src + sy * w + x / factor];
                    }
                }
            }
        }
        Ok(Tensor {
            shape: vec![b, c, oh, ow],
            data,
        })
    }

    /// Raw little-endian bytes of the payload, used for content digests.
    pub fn le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 8);
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_shape_and_finiteness() {
        assert!(Tensor::new(vec![2, 2], vec![0.0; 4]).is_ok());
        assert!(Tensor::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::NAN]).is_err());
        assert!(Tensor::new(vec![2], vec![1.0, f64::INFINITY]).is_err());
    }

    #[test]
    fn take_rows_and_stack_round_trip() {
        let t = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let picked = t.take_rows(&[2, 0]).unwrap();
        assert_eq!(picked.shape(), &[2, 2]);
        assert_eq!(picked.data(), &[5.0, 6.0, 1.0, 2.0]);
        assert!(t.take_rows(&[3]).is_err());

        let rows: Vec<Tensor> = (0..3).map(|i| t.row(i).unwrap().reshape(&[2]).unwrap()).collect();
        let back = Tensor::stack(&rows).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn upsample_nearest_replicates_blocks() {
        let t = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let up = t.upsample_nearest(2).unwrap();
        assert_eq!(up.shape(), &[1, 1, 4, 4]);
        assert_eq!(
            up.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }

    #[test]
    fn mse_matches_hand_value() {
        let a = Tensor::new(vec![2], vec![0.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        assert_eq!(a.mse(&b).unwrap(), 0.5);
    }
}
