use super::scalar::Scalar;

/// A `[channels, height, width]` array.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor { c, h, w, data: vec![T::zero(); c * h * w] }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Tensor { c, h, w, data }
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.c, self.h, self.w)
    }

    pub fn plane_len(&self) -> usize {
        self.h * self.w
    }

    pub fn plane(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> T {
        self.data[(c * self.h + y) * self.w + x]
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.shape(), other.shape(), "tensor add shapes");
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor { c: self.c, h: self.h, w: self.w, data: self.data.iter().map(|v| U::of(v.as_f64())).collect() }
    }

    /// Copies the window `[y0, y0 + h) x [x0, x0 + w)` of every channel.
    pub fn crop(&self, y0: usize, x0: usize, h: usize, w: usize) -> Tensor<T> {
        assert!(y0 + h <= self.h && x0 + w <= self.w, "crop out of bounds");
        let mut out = Vec::with_capacity(self.c * h * w);
        for c in 0..self.c {
            for y in y0..y0 + h {
                let row = (c * self.h + y) * self.w;
                out.extend_from_slice(&self.data[row + x0..row + x0 + w]);
            }
        }
        Tensor::from_vec(self.c, h, w, out)
    }

    /// Mirror padding (edge pixel not repeated) on the bottom and right.
    pub fn reflect_pad(&self, ph: usize, pw: usize) -> Tensor<T> {
        if ph == 0 && pw == 0 {
            return self.clone();
        }
        let (h2, w2) = (self.h + ph, self.w + pw);
        let reflect = |i: usize, n: usize| -> usize {
            if n == 1 {
                return 0;
            }
            let period = 2 * (n - 1);
            let m = i % period;
            if m < n {
                m
            } else {
                period - m
            }
        };
        let mut out = Vec::with_capacity(self.c * h2 * w2);
        for c in 0..self.c {
            for y in 0..h2 {
                let sy = reflect(y, self.h);
                for x in 0..w2 {
                    out.push(self.at(c, sy, reflect(x, self.w)));
                }
            }
        }
        Tensor::from_vec(self.c, h2, w2, out)
    }
}
