//! Dense row-major f64 tensor with cheap clones (shared storage, copy-on-write).
//!
//! All training and test arithmetic runs in 64-bit. Matrix kernels are plain
//! loops arranged for contiguous inner access so the compiler vectorizes them.

use std::sync::Arc;

use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Arc<Vec<f64>>,
}

impl PartialEq for Tensor {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape && *self.data == *other.data
    }
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![0.0; n]),
        }
    }

    pub fn full(shape: &[usize], value: f64) -> Self {
        let n: usize = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: Arc::new(vec![value; n]),
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: Arc::new(vec![value]),
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                format!("{shape:?} ({n} values)"),
                format!("{} values", data.len()),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::new(data),
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn dim(&self, axis: usize) -> usize {
        self.shape[axis]
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    /// Mutable access; clones the storage first if it is shared.
    pub fn data_mut(&mut self) -> &mut [f64] {
        Arc::make_mut(&mut self.data).as_mut_slice()
    }

    /// Scalar value of a single-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.len(), 1, "item() on tensor with {} values", self.len());
        self.data[0]
    }

    /// Reinterpret with a new shape of the same total size.
    pub fn reshaped(&self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        if n != self.len() {
            return Err(Error::shape(
                format!("reshape target {shape:?}"),
                format!("{:?}", self.shape),
            ));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data: Arc::clone(&self.data),
        })
    }

    /// Rows/cols of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        if self.rank() != 2 {
            return Err(Error::shape("rank-2 tensor", format!("{:?}", self.shape)));
        }
        Ok((self.shape[0], self.shape[1]))
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let cols = *self.shape.last().expect("row() on rank-0 tensor");
        &self.data[r * cols..(r + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, context: &str) -> Result<()> {
        if self.all_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite(format!(
                "tensor with shape {:?} in {context}",
                self.shape
            )))
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: Arc::new(self.data.iter().map(|&v| f(v)).collect()),
        }
    }

    pub fn scale(&self, k: f64) -> Tensor {
        self.map(|v| v * k)
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        if self.shape != other.shape {
            return Err(Error::shape(
                format!("{:?}", self.shape),
                format!("{:?}", other.shape),
            ));
        }
        let data = self
            .data
            .iter()
            .zip(other.data.iter())
            .map(|(a, b)| a + b)
            .collect();
        Ok(Tensor {
            shape: self.shape.clone(),
            data: Arc::new(data),
        })
    }

    /// `self += other * k` in place.
    pub fn axpy(&mut self, other: &Tensor, k: f64) {
        debug_assert_eq!(self.shape, other.shape);
        let dst = Arc::make_mut(&mut self.data);
        for (d, s) in dst.iter_mut().zip(other.data.iter()) {
            *d += s * k;
        }
    }

    pub fn sum(&self) -> f64 {
        self.data.iter().sum()
    }

    pub fn sq_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }
}

/// C = A[m,k] * B[k,n].
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if k != kb {
        return Err(Error::shape(
            format!("[{m},{k}]x[{k},n]"),
            format!("[{m},{k}]x[{kb},{n}]"),
        ));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (l, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[l * n..(l + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                *c += av * bv;
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// C = A^T[k,m] * B[k,n]  (A stored as [k,m]).
pub fn matmul_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if k != kb {
        return Err(Error::shape(
            format!("A^T[{k},{m}] x B[{k},n]"),
            format!("B is [{kb},{n}]"),
        ));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for l in 0..k {
        let arow = &ad[l * m..(l + 1) * m];
        let brow = &bd[l * n..(l + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let crow = &mut out[i * n..(i + 1) * n];
            for (c, &bv) in crow.iter_mut().zip(brow.iter()) {
                *c += av * bv;
            }
        }
    }
    Tensor::from_vec(&[m, n], out)
}

/// C = A[m,k] * B^T[n,k]  (B stored as [n,k]).
pub fn matmul_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = a.dims2()?;
    let (n, kb) = b.dims2()?;
    if k != kb {
        return Err(Error::shape(
            format!("A[{m},{k}] x B^T[n,{k}]"),
            format!("B is [{n},{kb}]"),
        ));
    }
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        let arow = &ad[i * k..(i + 1) * k];
        let crow = &mut out[i * n..(i + 1) * n];
        for (j, c) in crow.iter_mut().enumerate() {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow.iter()) {
                acc += av * bv;
            }
            *c = acc;
        }
    }
    Tensor::from_vec(&[m, n], out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_known() {
        let a = Tensor::from_vec(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Tensor::from_vec(&[3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_variants_agree() {
        let a = Tensor::from_vec(&[3, 4], (0..12).map(|v| v as f64 * 0.37 - 1.1).collect()).unwrap();
        let b = Tensor::from_vec(&[4, 5], (0..20).map(|v| v as f64 * 0.21 - 2.0).collect()).unwrap();
        let c = matmul(&a, &b).unwrap();

        // A^T variant: store A transposed and recompute.
        let mut at = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                at[j * 3 + i] = a.data()[i * 4 + j];
            }
        }
        let at = Tensor::from_vec(&[4, 3], at).unwrap();
        let c2 = matmul_tn(&at, &b).unwrap();
        assert_eq!(c.data(), c2.data());

        // B^T variant.
        let mut bt = vec![0.0; 20];
        for i in 0..4 {
            for j in 0..5 {
                bt[j * 4 + i] = b.data()[i * 5 + j];
            }
        }
        let bt = Tensor::from_vec(&[5, 4], bt).unwrap();
        let c3 = matmul_nt(&a, &bt).unwrap();
        for (x, y) in c.data().iter().zip(c3.data().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_mismatch_rejected() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        assert!(matmul(&a, &b).is_err());
        assert!(Tensor::from_vec(&[2, 2], vec![1.0]).is_err());
    }

    #[test]
    fn cheap_clone_copy_on_write() {
        let a = Tensor::zeros(&[4]);
        let mut b = a.clone();
        b.data_mut()[0] = 5.0;
        assert_eq!(a.data()[0], 0.0);
        assert_eq!(b.data()[0], 5.0);
    }
}
