//! Dense kernels shared by forward and backward passes.

/// Row/column strides of a matrix operand.
#[derive(Clone, Copy)]
pub(crate) struct Layout {
    pub rs: isize,
    pub cs: isize,
}

impl Layout {
    pub fn row_major(cols: usize) -> Self {
        Layout {
            rs: cols as isize,
            cs: 1,
        }
    }

    /// The transpose of a row-major `rows × cols` buffer.
    pub fn transposed(cols: usize) -> Self {
        Layout {
            rs: 1,
            cs: cols as isize,
        }
    }
}

/// `c = a·b + beta·c` for an `m×k` by `k×n` product, `c` row-major `m×n`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    la: Layout,
    b: &[f64],
    lb: Layout,
    beta: f64,
    c: &mut [f64],
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() == m * n);
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: operand lengths were checked above and the strides index
    // strictly within an m×k, k×n and m×n extent respectively.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            la.rs,
            la.cs,
            b.as_ptr(),
            lb.rs,
            lb.cs,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Geometry of a valid, strided 2-D cross-correlation over `[batch, h, w, c]`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeometry {
    pub batch: usize,
    pub h: usize,
    pub w: usize,
    pub c: usize,
    pub k: usize,
    pub f: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl ConvGeometry {
    pub fn patch_len(&self) -> usize {
        self.k * self.k * self.c
    }

    pub fn out_positions(&self) -> usize {
        self.batch * self.oh * self.ow
    }

    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (h, w, c, k, s) = (self.h, self.w, self.c, self.k, self.stride);
        let plen = self.patch_len();
        for b in 0..self.batch {
            for oy in 0..self.oh {
                for ox in 0..self.ow {
                    let row = (b * self.oh + oy) * self.ow + ox;
                    for ky in 0..k {
                        let iy = oy * s + ky;
                        for kx in 0..k {
                            let ix = ox * s + kx;
                            let src = ((b * h + iy) * w + ix) * c;
                            let dst = row * plen + (ky * k + kx) * c;
                            for ch in 0..c {
                                f(src + ch, dst + ch);
                            }
                        }
                    }
                }
            }
        }
    }

    /// Unfolds the input into `[out_positions, k·k·c]` columns.
    pub fn im2col(&self, image: &[f64]) -> Vec<f64> {
        let mut cols = vec![0.0; self.out_positions() * self.patch_len()];
        self.for_each_tap(|src, dst| cols[dst] = image[src]);
        cols
    }

    /// Scatter-adds column gradients back onto the input layout.
    pub fn col2im_add(&self, dcols: &[f64], dimage: &mut [f64]) {
        self.for_each_tap(|src, dst| dimage[src] += dcols[dst]);
    }
}
