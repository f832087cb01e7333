use super::NumericsError;

/// Dense row-major tensor of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    pub requires_grad: bool,
    pub grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, NumericsError> {
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(NumericsError::Shape(format!(
                "shape {:?} holds {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let n = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; n],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds a matrix from equally sized rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, NumericsError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(NumericsError::Shape("ragged rows".into()));
        }
        Self::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Matrix view of the shape: scalars are 1×1, vectors are 1×n, and higher
    /// ranks fold every leading axis into the row count.
    pub fn matrix_dims(&self) -> (usize, usize) {
        matrix_dims(&self.shape)
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    /// Adds `g` into the gradient slot, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<(), NumericsError> {
        if g.len() != self.data.len() {
            return Err(NumericsError::Shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }
}

pub(crate) fn matrix_dims(shape: &[usize]) -> (usize, usize) {
    match shape.len() {
        0 => (1, 1),
        1 => (1, shape[0]),
        _ => {
            let cols = shape[shape.len() - 1];
            (shape[..shape.len() - 1].iter().product(), cols)
        }
    }
}

/// `c[m×n] += a[m×k] · b[k×n]`, all row-major.
pub(crate) fn gemm_nn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let c_row = &mut c[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`.
pub(crate) fn gemm_nt(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] += dot(a_row, b_row);
        }
    }
}

/// `c[k×n] += a[m×k]ᵀ · b[m×n]`.
pub(crate) fn gemm_tn(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += av * bv;
            }
        }
    }
}

/// Four-lane dot product; the fixed lane split keeps results independent of
/// how many rows are processed together.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0f64; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        let i = c * 4;
        acc[0] += a[i] * b[i];
        acc[1] += a[i + 1] * b[i + 1];
        acc[2] += a[i + 2] * b[i + 2];
        acc[3] += a[i + 3] * b[i + 3];
    }
    let mut tail = 0.0;
    for i in chunks * 4..a.len() {
        tail += a[i] * b[i];
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Plain matrix product of two tensors, no tape involved.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, NumericsError> {
    let (m, k) = a.matrix_dims();
    let (k2, n) = b.matrix_dims();
    if k != k2 {
        return Err(NumericsError::Shape(format!(
            "matmul inner dimensions differ: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    gemm_nn(a.data(), b.data(), &mut out, m, k, n);
    Tensor::new(vec![m, n], out)
}

/// Numerically stable softmax over `x`, with masked entries (`mask[i] == false`)
/// forced to exactly zero.
pub fn softmax(x: &[f64], mask: Option<&[bool]>) -> Result<Vec<f64>, NumericsError> {
    let mut out = vec![0.0; x.len()];
    softmax_into(x, mask, &mut out)?;
    Ok(out)
}

pub(crate) fn softmax_into(
    x: &[f64],
    mask: Option<&[bool]>,
    out: &mut [f64],
) -> Result<(), NumericsError> {
    let allowed = |i: usize| mask.is_none_or(|m| m[i]);
    let max = (0..x.len())
        .filter(|&i| allowed(i))
        .map(|i| x[i])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(NumericsError::Infeasible);
    }
    let mut total = 0.0;
    for i in 0..x.len() {
        out[i] = if allowed(i) { (x[i] - max).exp() } else { 0.0 };
        total += out[i];
    }
    for v in out.iter_mut() {
        *v /= total;
    }
    Ok(())
}

/// Log-softmax companion of [`softmax`]; masked entries are `-inf`.
pub(crate) fn log_softmax_into(
    x: &[f64],
    mask: Option<&[bool]>,
    out: &mut [f64],
) -> Result<(), NumericsError> {
    let allowed = |i: usize| mask.is_none_or(|m| m[i]);
    let max = (0..x.len())
        .filter(|&i| allowed(i))
        .map(|i| x[i])
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(NumericsError::Infeasible);
    }
    let total: f64 = (0..x.len())
        .filter(|&i| allowed(i))
        .map(|i| (x[i] - max).exp())
        .sum();
    let lse = max + total.ln();
    for i in 0..x.len() {
        out[i] = if allowed(i) {
            x[i] - lse
        } else {
            f64::NEG_INFINITY
        };
    }
    Ok(())
}

pub fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

pub fn tanh_clip(x: f64, clip: f64) -> f64 {
    clip * x.tanh()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn new_rejects_bad_length() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert_eq!(Tensor::new(vec![2, 3], vec![0.0; 6]).unwrap().len(), 6);
    }

    #[test]
    fn identity_matmul() {
        let eye = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]).unwrap();
        let v = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        let out = matmul(&eye, &v).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.data(), &[3.0, 4.0]);
    }

    #[test]
    fn row_times_column() {
        let a = Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let b = Tensor::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::zeros(vec![2, 3]);
        let b = Tensor::zeros(vec![2, 2]);
        let msg = matmul(&a, &b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[2, 2]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let s = softmax(&[0.0, 0.0, 0.0], None).unwrap();
        for v in s {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert_eq!(softmax(&[5.0, 5.0], Some(&[false, true])).unwrap(), vec![0.0, 1.0]);
        assert!(matches!(
            softmax(&[1.0, 2.0], Some(&[false, false])),
            Err(NumericsError::Infeasible)
        ));
    }

    #[test]
    fn softmax_matches_direct_formula() {
        // e^1, e^2, e^3 normalised, evaluated with the textbook expression.
        let e: Vec<f64> = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).collect();
        let z: f64 = e.iter().sum();
        let s = softmax(&[1.0, 2.0, 3.0], None).unwrap();
        for (a, b) in s.iter().zip(&e) {
            assert!((a - b / z).abs() < 1e-15);
        }
        assert!((s[0] - 0.09003057317038046).abs() < 1e-15);
        assert!((s[2] - 0.6652409557748219).abs() < 1e-15);
    }

    #[test]
    fn elementwise_helpers() {
        let r: Vec<f64> = [-1.0, 0.0, 2.0].iter().map(|&x| relu(x)).collect();
        assert_eq!(r, vec![0.0, 0.0, 2.0]);
        assert_eq!(tanh_clip(0.0, 10.0), 0.0);
        let sat = tanh_clip(1e6, 10.0);
        assert!(sat <= 10.0 && 10.0 - sat < 1e-6);
    }

    #[test]
    fn dot_handles_tails() {
        let a: Vec<f64> = (0..7).map(f64::from).collect();
        assert_eq!(dot(&a, &a), 91.0);
    }
}
