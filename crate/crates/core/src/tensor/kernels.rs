//! Raw numeric kernels shared by the forward and backward rules.

/// Strided read-only view of a matrix.
#[derive(Clone, Copy)]
pub(crate) struct MatRef<'a> {
    pub data: &'a [f64],
    pub rows: usize,
    pub cols: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a> MatRef<'a> {
    /// Row-major `rows x cols`, or its transpose when `transposed` is set
    /// (the storage then holds `cols x rows`).
    pub fn new(data: &'a [f64], rows: usize, cols: usize, transposed: bool) -> Self {
        if transposed {
            Self {
                data,
                rows,
                cols,
                rs: 1,
                cs: rows,
            }
        } else {
            Self {
                data,
                rows,
                cols,
                rs: cols,
                cs: 1,
            }
        }
    }

    pub fn t(self) -> Self {
        Self {
            data: self.data,
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
        }
    }

    fn max_offset(&self) -> usize {
        (self.rows - 1) * self.rs + (self.cols - 1) * self.cs
    }
}

/// `c = a * b + beta * c`, with `c` row-major `a.rows x b.cols`.
pub(crate) fn gemm(a: MatRef<'_>, b: MatRef<'_>, beta: f64, c: &mut [f64]) {
    assert_eq!(a.cols, b.rows, "gemm inner dimension");
    assert!(a.max_offset() < a.data.len());
    assert!(b.max_offset() < b.data.len());
    assert_eq!(c.len(), a.rows * b.cols);
    // SAFETY: all strided accesses were bounds-checked above.
    unsafe {
        matrixmultiply::dgemm(
            a.rows,
            a.cols,
            b.cols,
            1.0,
            a.data.as_ptr(),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr(),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr(),
            b.cols as isize,
            1,
        );
    }
}

/// Geometry of a 2-D convolution over one `channels x height x width` image.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(
        channels: usize,
        height: usize,
        width: usize,
        kh: usize,
        kw: usize,
        stride: usize,
        pad: usize,
    ) -> Option<Self> {
        let eff_h = (height + 2 * pad).checked_sub(kh)?;
        let eff_w = (width + 2 * pad).checked_sub(kw)?;
        Some(Self {
            channels,
            height,
            width,
            kh,
            kw,
            stride,
            pad,
            out_h: eff_h / stride + 1,
            out_w: eff_w / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_len(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// Visits every (patch row, output column, source offset) triple whose
    /// source pixel lies inside the image.
    #[inline]
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let (h, w) = (self.height as isize, self.width as isize);
        for c in 0..self.channels {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (c * self.kh + ki) * self.kw + kj;
                    for oy in 0..self.out_h {
                        let iy = (oy * self.stride + ki) as isize - self.pad as isize;
                        if iy < 0 || iy >= h {
                            continue;
                        }
                        for ox in 0..self.out_w {
                            let ix = (ox * self.stride + kj) as isize - self.pad as isize;
                            if ix < 0 || ix >= w {
                                continue;
                            }
                            let src = (c * self.height + iy as usize) * self.width + ix as usize;
                            f(row, oy * self.out_w + ox, src);
                        }
                    }
                }
            }
        }
    }
}

/// Writes the patches of `image` into columns `[col0, col0 + out_len)` of a
/// `patch_len x ld` matrix. The destination must be zeroed beforehand.
pub(crate) fn im2col(image: &[f64], g: &ConvGeom, cols: &mut [f64], ld: usize, col0: usize) {
    g.for_each_tap(|row, col, src| cols[row * ld + col0 + col] = image[src]);
}

/// Adjoint of [`im2col`]: scatter-adds columns back into `image`.
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, ld: usize, col0: usize, image: &mut [f64]) {
    g.for_each_tap(|row, col, src| image[src] += cols[row * ld + col0 + col]);
}

/// Splits `shape` around `axis` into (outer, dim, inner) extents.
pub(crate) fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Row-major strides of `shape`.
pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Copies `src` (shape `shape`) into `dst` laid out with axes permuted by
/// `axes`, i.e. `dst` has shape `[shape[axes[0]], shape[axes[1]], ...]`.
pub(crate) fn permute_into(src: &[f64], shape: &[usize], axes: &[usize], dst: &mut [f64]) {
    let rank = shape.len();
    let src_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for d in dst.iter_mut() {
        *d = src[off];
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            off += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            off -= step[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
}
