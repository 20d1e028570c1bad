use crate::{Error, Real, Result};

/// Dense row-major array of up to four dimensions (batch, channel, height, width).
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.len() > 4 {
            return Err(Error::shape("Tensor::new", format!("rank {} > 4", shape.len())));
        }
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::shape(
                "Tensor::new",
                format!("shape {shape:?} needs {n} values, got {}", data.len()),
            ));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); shape.iter().product()],
        }
    }

    pub fn full(shape: &[usize], v: T) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![v; shape.iter().product()],
        }
    }

    /// Rank-0 tensor holding one value.
    pub fn scalar(v: T) -> Self {
        Self {
            shape: Vec::new(),
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn item(&self) -> T {
        self.data[0]
    }

    /// Shape padded on the left with ones up to rank 4.
    pub fn dims4(&self) -> [usize; 4] {
        pad4(&self.shape)
    }

    pub fn cast<U: Real>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64c(v.as_f64())).collect(),
        }
    }

    pub(crate) fn from_parts(shape: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Self { shape, data }
    }
}

pub(crate) fn pad4(shape: &[usize]) -> [usize; 4] {
    let mut out = [1; 4];
    let off = 4 - shape.len();
    out[off..].copy_from_slice(shape);
    out
}

/// Numpy-style broadcast of two shapes.
pub(crate) fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::shape(
                    op,
                    format!("cannot broadcast {a:?} with {b:?}"),
                ))
            }
        };
    }
    Ok(out)
}

/// Strides of `shape` (rank-4 padded) inside a broadcast to `out`, zero on
/// broadcast axes.
pub(crate) fn broadcast_strides(shape: &[usize], out: &[usize]) -> [usize; 4] {
    let s = pad4(shape);
    let o = pad4(out);
    let mut strides = [0; 4];
    let mut acc = 1;
    for i in (0..4).rev() {
        strides[i] = if s[i] == 1 && o[i] != 1 { 0 } else { acc };
        acc *= s[i];
    }
    strides
}

/// Visits every output position of a broadcast as `(out, a, b)` flat indices.
#[inline]
pub(crate) fn for_each_broadcast(
    out: &[usize],
    sa: [usize; 4],
    sb: [usize; 4],
    mut f: impl FnMut(usize, usize, usize),
) {
    let o = pad4(out);
    let mut oi = 0;
    for i0 in 0..o[0] {
        for i1 in 0..o[1] {
            for i2 in 0..o[2] {
                let ba = i0 * sa[0] + i1 * sa[1] + i2 * sa[2];
                let bb = i0 * sb[0] + i1 * sb[1] + i2 * sb[2];
                for i3 in 0..o[3] {
                    f(oi, ba + i3 * sa[3], bb + i3 * sb[3]);
                    oi += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_rules() {
        assert_eq!(broadcast_shape("t", &[2, 3, 4, 4], &[2, 1, 4, 4]).unwrap(), vec![2, 3, 4, 4]);
        assert_eq!(broadcast_shape("t", &[2, 3, 1, 1], &[2, 1, 4, 4]).unwrap(), vec![2, 3, 4, 4]);
        assert_eq!(broadcast_shape("t", &[], &[5, 2]).unwrap(), vec![5, 2]);
        assert!(broadcast_shape("t", &[2, 3], &[3, 2]).is_err());
    }

    #[test]
    fn strides_zero_on_broadcast_axes() {
        assert_eq!(broadcast_strides(&[2, 1, 4, 4], &[2, 3, 4, 4]), [16, 0, 4, 1]);
        assert_eq!(broadcast_strides(&[], &[2, 3])[2..], [0, 0]);
    }

    #[test]
    fn rejects_bad_construction() {
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
    }
}
