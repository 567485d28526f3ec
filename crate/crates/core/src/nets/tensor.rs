//! Dense NCHW `f32` tensors and the GEMM wrapper used by every layer.

use ndarray::Array2;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: [usize; 4],
    data: Vec<f32>,
}

impl Tensor {
    pub fn zeros(shape: [usize; 4]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 4], data: Vec<f32>) -> Self {
        assert_eq!(
            data.len(),
            shape.iter().product::<usize>(),
            "data length does not match shape {shape:?}"
        );
        Self { shape, data }
    }

    /// Stacks single-channel images into an `N x 1 x H x W` batch.
    pub fn from_images<'a, I>(images: I) -> Self
    where
        I: IntoIterator<Item = &'a Array2<f32>>,
    {
        let mut data = Vec::new();
        let mut hw = None;
        let mut n = 0;
        for img in images {
            let dim = img.dim();
            match hw {
                None => hw = Some(dim),
                Some(prev) => assert_eq!(prev, dim, "images in a batch must share a shape"),
            }
            data.extend(img.iter().copied());
            n += 1;
        }
        let (h, w) = hw.unwrap_or((0, 0));
        Self::from_vec([n, 1, h, w], data)
    }

    /// `N x C` matrix as an `N x C x 1 x 1` tensor.
    pub fn from_matrix(m: &Array2<f32>) -> Self {
        let (n, c) = m.dim();
        Self::from_vec([n, c, 1, 1], m.iter().copied().collect())
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn n(&self) -> usize {
        self.shape[0]
    }

    pub fn c(&self) -> usize {
        self.shape[1]
    }

    pub fn h(&self) -> usize {
        self.shape[2]
    }

    pub fn w(&self) -> usize {
        self.shape[3]
    }

    /// Elements per sample.
    pub fn sample_len(&self) -> usize {
        self.shape[1] * self.shape[2] * self.shape[3]
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

    pub fn sample(&self, n: usize) -> &[f32] {
        let len = self.sample_len();
        &self.data[n * len..(n + 1) * len]
    }

    pub fn sample_mut(&mut self, n: usize) -> &mut [f32] {
        let len = self.sample_len();
        &mut self.data[n * len..(n + 1) * len]
    }

    pub fn reshape(mut self, shape: [usize; 4]) -> Self {
        assert_eq!(shape.iter().product::<usize>(), self.data.len());
        self.shape = shape;
        self
    }

    /// `N x (C*H*W)` matrix view copied into an ndarray.
    pub fn to_matrix(&self) -> Array2<f32> {
        Array2::from_shape_vec((self.n(), self.sample_len()), self.data.clone()).expect("shape is consistent")
    }

    /// Rows `[start, end)` along the batch axis.
    pub fn rows(&self, start: usize, end: usize) -> Tensor {
        let len = self.sample_len();
        Tensor::from_vec(
            [end - start, self.shape[1], self.shape[2], self.shape[3]],
            self.data[start * len..end * len].to_vec(),
        )
    }

    /// Concatenates along the batch axis.
    pub fn cat_rows(parts: &[&Tensor]) -> Tensor {
        let first = parts[0].shape;
        let mut data = Vec::new();
        let mut n = 0;
        for p in parts {
            assert_eq!(p.shape[1..], first[1..], "cat_rows shape mismatch");
            data.extend_from_slice(&p.data);
            n += p.shape[0];
        }
        Tensor::from_vec([n, first[1], first[2], first[3]], data)
    }

    pub fn add_assign(&mut self, other: &Tensor) {
        assert_eq!(self.shape, other.shape);
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// `C = alpha * op(A) * op(B) + beta * C` for row-major matrices, where
/// `op(A)` is `m x k` and `op(B)` is `k x n`.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    trans_a: bool,
    trans_b: bool,
    m: usize,
    k: usize,
    n: usize,
    alpha: f32,
    a: &[f32],
    b: &[f32],
    beta: f32,
    c: &mut [f32],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserts above bound every index the kernel touches given
    // these strides; `c` does not alias `a` or `b` (distinct borrows).
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}
