use super::Tensor;
use crate::error::{shape_err, Result};

/// Geometry of a convolution in its GEMM view.
///
/// `columns` selects a subset of im2col rows (equivalently, GEMM weight
/// columns) in the full `cin * kh * kw` layout; `None` means all of them.
/// A compact (column-pruned) layer stores its weight as `cout x columns.len()`.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvGeometry {
    pub cin: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub columns: Option<Vec<usize>>,
}

impl ConvGeometry {
    pub fn dense(cin: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> Self {
        Self {
            cin,
            kh,
            kw,
            stride,
            pad,
            columns: None,
        }
    }

    pub fn full_columns(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Number of GEMM columns actually used.
    pub fn gemm_columns(&self) -> usize {
        self.columns
            .as_ref()
            .map_or_else(|| self.full_columns(), |c| c.len())
    }

    /// Full-layout column index of GEMM column `j`.
    pub fn column_index(&self, j: usize) -> usize {
        self.columns.as_ref().map_or(j, |c| c[j])
    }

    /// Input channel feeding GEMM column `j`.
    pub fn column_channel(&self, j: usize) -> usize {
        self.column_index(j) / (self.kh * self.kw)
    }

    pub fn output_hw(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        Ok((
            conv_output_extent(h, self.kh, self.stride, self.pad)?,
            conv_output_extent(w, self.kw, self.stride, self.pad)?,
        ))
    }
}

/// `(extent + 2 pad - kernel) / stride + 1`, rejecting non-integral results.
pub fn conv_output_extent(extent: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return shape_err("stride must be positive");
    }
    let padded = extent + 2 * pad;
    if kernel == 0 || kernel > padded {
        return shape_err(format!(
            "kernel {kernel} does not fit extent {extent} with pad {pad}"
        ));
    }
    if (padded - kernel) % stride != 0 {
        return shape_err(format!(
            "non-integral output extent: ({extent} + 2*{pad} - {kernel}) / {stride}"
        ));
    }
    Ok((padded - kernel) / stride + 1)
}

/// `c += a * b` for row-major `a: m x k`, `b: k x n`.
pub(crate) fn gemm_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += a_ip * bj;
            }
        }
    }
}

/// `c += a * b^T` for `a: m x k`, `b: n x k`.
pub(crate) fn gemm_nt_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (x, y) in a_row.iter().zip(b_row) {
                acc += x * y;
            }
            c[i * n + j] += acc;
        }
    }
}

/// `c += a^T * b` for `a: k x m`, `b: k x n`.
pub(crate) fn gemm_tn_acc(m: usize, k: usize, n: usize, a: &[f64], b: &[f64], c: &mut [f64]) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        let a_row = &a[p * m..(p + 1) * m];
        let b_row = &b[p * n..(p + 1) * n];
        for (i, &a_pi) in a_row.iter().enumerate() {
            if a_pi == 0.0 {
                continue;
            }
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cj, &bj) in c_row.iter_mut().zip(b_row) {
                *cj += a_pi * bj;
            }
        }
    }
}

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => shape_err(format!("{what} must be a matrix, got shape {s:?}")),
    }
}

/// General matrix multiply `A * B`.
pub fn gemm(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(a, "gemm lhs")?;
    let (k2, n) = matrix_dims(b, "gemm rhs")?;
    if k != k2 {
        return shape_err(format!("gemm inner dimensions differ: {k} vs {k2}"));
    }
    let mut c = vec![0.0; m * n];
    gemm_acc(m, k, n, a.data(), b.data(), &mut c);
    Tensor::new(vec![m, n], c)
}

/// `A * B^T`.
pub fn gemm_nt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = matrix_dims(a, "gemm_nt lhs")?;
    let (n, k2) = matrix_dims(b, "gemm_nt rhs")?;
    if k != k2 {
        return shape_err(format!("gemm_nt inner dimensions differ: {k} vs {k2}"));
    }
    let mut c = vec![0.0; m * n];
    gemm_nt_acc(m, k, n, a.data(), b.data(), &mut c);
    Tensor::new(vec![m, n], c)
}

/// `A^T * B`.
pub fn gemm_tn(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (k, m) = matrix_dims(a, "gemm_tn lhs")?;
    let (k2, n) = matrix_dims(b, "gemm_tn rhs")?;
    if k != k2 {
        return shape_err(format!("gemm_tn inner dimensions differ: {k} vs {k2}"));
    }
    let mut c = vec![0.0; m * n];
    gemm_tn_acc(m, k, n, a.data(), b.data(), &mut c);
    Tensor::new(vec![m, n], c)
}

/// Writes the selected im2col rows of one `c x h x w` image into `out`
/// (`geom.gemm_columns() x (ho * wo)`).
pub(crate) fn im2col_into(
    image: &[f64],
    h: usize,
    w: usize,
    geom: &ConvGeometry,
    ho: usize,
    wo: usize,
    out: &mut [f64],
) {
    let kk = geom.kh * geom.kw;
    let hw_out = ho * wo;
    let (s, p) = (geom.stride as isize, geom.pad as isize);
    for row in 0..geom.gemm_columns() {
        let full = geom.column_index(row);
        let (c, ki, kj) = (full / kk, (full % kk) / geom.kw, full % geom.kw);
        let plane = &image[c * h * w..(c + 1) * h * w];
        let dst = &mut out[row * hw_out..(row + 1) * hw_out];
        for oy in 0..ho {
            let iy = oy as isize * s + ki as isize - p;
            let dst_row = &mut dst[oy * wo..(oy + 1) * wo];
            if iy < 0 || iy >= h as isize {
                dst_row.fill(0.0);
                continue;
            }
            let src_row = &plane[iy as usize * w..(iy as usize + 1) * w];
            for (ox, d) in dst_row.iter_mut().enumerate() {
                let ix = ox as isize * s + kj as isize - p;
                *d = if ix < 0 || ix >= w as isize {
                    0.0
                } else {
                    src_row[ix as usize]
                };
            }
        }
    }
}

/// Scatter-adds a column matrix back onto one image (adjoint of [`im2col_into`]).
pub(crate) fn col2im_acc(
    cols: &[f64],
    h: usize,
    w: usize,
    geom: &ConvGeometry,
    ho: usize,
    wo: usize,
    image: &mut [f64],
) {
    let kk = geom.kh * geom.kw;
    let hw_out = ho * wo;
    let (s, p) = (geom.stride as isize, geom.pad as isize);
    for row in 0..geom.gemm_columns() {
        let full = geom.column_index(row);
        let (c, ki, kj) = (full / kk, (full % kk) / geom.kw, full % geom.kw);
        let src = &cols[row * hw_out..(row + 1) * hw_out];
        for oy in 0..ho {
            let iy = oy as isize * s + ki as isize - p;
            if iy < 0 || iy >= h as isize {
                continue;
            }
            let base = c * h * w + iy as usize * w;
            for ox in 0..wo {
                let ix = ox as isize * s + kj as isize - p;
                if ix >= 0 && ix < w as isize {
                    image[base + ix as usize] += src[oy * wo + ox];
                }
            }
        }
    }
}

/// Lowers a `C x H x W` image to its `(C*kh*kw) x (H_out*W_out)` patch matrix.
///
/// Rows are ordered channel-major, then kernel row, then kernel column.
/// Padded cells read as zero.
pub fn im2col(input: &Tensor, kernel: (usize, usize), stride: usize, pad: usize) -> Result<Tensor> {
    let [c, h, w] = *input.shape() else {
        return shape_err(format!("im2col expects C x H x W, got {:?}", input.shape()));
    };
    let geom = ConvGeometry::dense(c, kernel.0, kernel.1, stride, pad);
    let (ho, wo) = geom.output_hw(h, w)?;
    let mut out = vec![0.0; geom.full_columns() * ho * wo];
    im2col_into(input.data(), h, w, &geom, ho, wo, &mut out);
    Tensor::new(vec![geom.full_columns(), ho * wo], out)
}

/// Adjoint of [`im2col`]: folds a patch matrix back onto a `C x H x W` image.
pub fn col2im(
    cols: &Tensor,
    image_shape: (usize, usize, usize),
    kernel: (usize, usize),
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (c, h, w) = image_shape;
    let geom = ConvGeometry::dense(c, kernel.0, kernel.1, stride, pad);
    let (ho, wo) = geom.output_hw(h, w)?;
    if cols.shape() != [geom.full_columns(), ho * wo] {
        return shape_err(format!(
            "col2im expects {:?}, got {:?}",
            [geom.full_columns(), ho * wo],
            cols.shape()
        ));
    }
    let mut image = vec![0.0; c * h * w];
    col2im_acc(cols.data(), h, w, &geom, ho, wo, &mut image);
    Tensor::new(vec![c, h, w], image)
}

/// Batched GEMM-view convolution. `input` is `N x C x H x W`, `weight` is the
/// `cout x gemm_columns` matrix (any shape with that element count).
/// Returns the `N x cout x ho x wo` output and, if requested, the per-image
/// patch matrices concatenated.
pub(crate) fn conv2d_batched(
    input: &[f64],
    n: usize,
    h: usize,
    w: usize,
    geom: &ConvGeometry,
    weight: &[f64],
    bias: &[f64],
    keep_cols: bool,
) -> Result<(Vec<f64>, usize, usize, Option<Vec<f64>>)> {
    let (ho, wo) = geom.output_hw(h, w)?;
    let k = geom.gemm_columns();
    let cout = bias.len();
    if weight.len() != cout * k {
        return shape_err(format!(
            "conv weight has {} entries, expected {cout} x {k}",
            weight.len()
        ));
    }
    let hw = ho * wo;
    let in_stride = geom.cin * h * w;
    if input.len() != n * in_stride {
        return shape_err("conv input size does not match geometry");
    }
    let mut out = vec![0.0; n * cout * hw];
    let mut saved = keep_cols.then(|| vec![0.0; n * k * hw]);
    let mut scratch = if keep_cols { Vec::new() } else { vec![0.0; k * hw] };
    for img in 0..n {
        let cols: &mut [f64] = match saved.as_mut() {
            Some(all) => &mut all[img * k * hw..(img + 1) * k * hw],
            None => &mut scratch,
        };
        im2col_into(&input[img * in_stride..(img + 1) * in_stride], h, w, geom, ho, wo, cols);
        let dst = &mut out[img * cout * hw..(img + 1) * cout * hw];
        for (oc, &b) in bias.iter().enumerate() {
            dst[oc * hw..(oc + 1) * hw].fill(b);
        }
        gemm_acc(cout, k, hw, weight, cols, dst);
    }
    Ok((out, ho, wo, saved))
}

/// Convolution via im2col + GEMM.
///
/// `input` is `C x H x W` or `N x C x H x W`; `weight` is `Cout x Cin x kh x kw`;
/// `bias` has `Cout` entries.
pub fn conv2d(
    input: &Tensor,
    weight: &Tensor,
    bias: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let (n, c, h, w, batched) = match *input.shape() {
        [c, h, w] => (1, c, h, w, false),
        [n, c, h, w] => (n, c, h, w, true),
        ref s => return shape_err(format!("conv2d input must be rank 3 or 4, got {s:?}")),
    };
    let [cout, cin, kh, kw] = *weight.shape() else {
        return shape_err(format!("conv2d weight must be rank 4, got {:?}", weight.shape()));
    };
    if cin != c {
        return shape_err(format!("conv2d channel mismatch: weight expects {cin}, input has {c}"));
    }
    if bias.numel() != cout {
        return shape_err(format!("conv2d bias has {} entries, expected {cout}", bias.numel()));
    }
    let geom = ConvGeometry::dense(cin, kh, kw, stride, pad);
    let (out, ho, wo, _) =
        conv2d_batched(input.data(), n, h, w, &geom, weight.data(), bias.data(), false)?;
    let shape = if batched {
        vec![n, cout, ho, wo]
    } else {
        vec![cout, ho, wo]
    };
    Tensor::new(shape, out)
}

/// Non-overlapping max pooling (`size x size` windows, stride `size`, floor).
/// Returns the pooled `N x C x ho x wo` values and the flat argmax input index
/// of every output cell; ties keep the first maximum in scan order.
pub fn max_pool2d(input: &Tensor, size: usize) -> Result<(Tensor, Vec<usize>)> {
    let [n, c, h, w] = *input.shape() else {
        return shape_err(format!("max_pool2d expects N x C x H x W, got {:?}", input.shape()));
    };
    if size == 0 || size > h || size > w {
        return shape_err(format!("pool size {size} does not fit {h}x{w}"));
    }
    let (ho, wo) = (h / size, w / size);
    let src = input.data();
    let mut out = Vec::with_capacity(n * c * ho * wo);
    let mut arg = Vec::with_capacity(n * c * ho * wo);
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * size * w + ox * size;
                for dy in 0..size {
                    for dx in 0..size {
                        let idx = base + (oy * size + dy) * w + ox * size + dx;
                        if src[idx] > src[best] {
                            best = idx;
                        }
                    }
                }
                out.push(src[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, ho, wo], out)?, arg))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_gemm(a: &Tensor, b: &Tensor) -> Tensor {
        let (m, k) = (a.shape()[0], a.shape()[1]);
        let n = b.shape()[1];
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a.data()[i * k + p] * b.data()[p * n + j];
                }
            }
        }
        Tensor::new(vec![m, n], c).unwrap()
    }

    #[test]
    fn gemm_identity() {
        let i2 = Tensor::from_rows(&[&[1.0, 0.0], &[0.0, 1.0]]).unwrap();
        let b = Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap();
        assert_eq!(gemm(&i2, &b).unwrap(), b);
    }

    #[test]
    fn gemm_matches_triple_loop() {
        let a = Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]).unwrap();
        let b = Tensor::from_rows(&[&[5.0, 6.0], &[7.0, 8.0]]).unwrap();
        let expected = naive_gemm(&a, &b);
        assert_eq!(expected.data(), &[19.0, 22.0, 43.0, 50.0]);
        assert_eq!(gemm(&a, &b).unwrap(), expected);
    }

    #[test]
    fn gemm_zero_annihilates() {
        let a = Tensor::zeros(&[3, 4]);
        let b = Tensor::new(vec![4, 2], vec![0.3, -1.2, 4.0, 2.2, 0.1, 9.0, -3.3, 0.7]).unwrap();
        assert_eq!(gemm(&a, &b).unwrap(), Tensor::zeros(&[3, 2]));
    }

    #[test]
    fn gemm_rejects_mismatch() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[2, 3]);
        assert!(matches!(gemm(&a, &b), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn transposed_variants_agree() {
        let a = Tensor::new(vec![2, 3], vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.5]).unwrap();
        let b = Tensor::new(vec![4, 3], (0..12).map(|x| x as f64 * 0.25 - 1.0).collect()).unwrap();
        let bt = {
            let mut d = vec![0.0; 12];
            for i in 0..4 {
                for j in 0..3 {
                    d[j * 4 + i] = b.data()[i * 3 + j];
                }
            }
            Tensor::new(vec![3, 4], d).unwrap()
        };
        assert_eq!(gemm_nt(&a, &b).unwrap(), naive_gemm(&a, &bt));
        let at = {
            let mut d = vec![0.0; 6];
            for i in 0..2 {
                for j in 0..3 {
                    d[j * 2 + i] = a.data()[i * 3 + j];
                }
            }
            Tensor::new(vec![3, 2], d).unwrap()
        };
        assert_eq!(gemm_tn(&at, &bt).unwrap(), naive_gemm(&a, &bt));
    }

    #[test]
    fn im2col_hand_enumeration() {
        let x = Tensor::new(vec![1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let cols = im2col(&x, (2, 2), 1, 0).unwrap();
        assert_eq!(cols.shape(), &[4, 4]);
        let expected_columns = [[1.0, 2.0, 4.0, 5.0], [2.0, 3.0, 5.0, 6.0], [4.0, 5.0, 7.0, 8.0], [5.0, 6.0, 8.0, 9.0]];
        for (j, col) in expected_columns.iter().enumerate() {
            for (r, &v) in col.iter().enumerate() {
                assert_eq!(cols.data()[r * 4 + j], v);
            }
        }
    }

    #[test]
    fn im2col_full_window_is_flattened_input() {
        let x = Tensor::new(vec![2, 2, 3], (0..12).map(|v| v as f64 - 4.0).collect()).unwrap();
        let cols = im2col(&x, (2, 3), 1, 0).unwrap();
        assert_eq!(cols.shape(), &[12, 1]);
        assert_eq!(cols.data(), x.data());
    }

    #[test]
    fn im2col_zero_input() {
        let x = Tensor::zeros(&[3, 5, 5]);
        let cols = im2col(&x, (3, 3), 2, 1).unwrap();
        assert!(cols.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn im2col_rejects_non_integral_extent() {
        let x = Tensor::zeros(&[1, 4, 4]);
        assert!(matches!(im2col(&x, (3, 3), 2, 0), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let x = Tensor::new(vec![2, 4, 5], (0..40).map(|v| (v as f64 * 0.37).sin()).collect()).unwrap();
        let cols = im2col(&x, (3, 2), 1, 1).unwrap();
        let y = cols.map(|v| v * 0.5 + 0.1).zip_map(&cols, |a, b| a - 0.3 * b * b).unwrap();
        let lhs: f64 = cols.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let back = col2im(&y, (2, 4, 5), (3, 2), 1, 1).unwrap();
        let rhs: f64 = x.data().iter().zip(back.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12 * lhs.abs().max(1.0));
    }

    #[test]
    fn identity_kernel_passes_channel_through() {
        let x = Tensor::new(vec![1, 3, 3], (0..9).map(|v| v as f64 * 1.5).collect()).unwrap();
        let w = Tensor::filled(&[1, 1, 1, 1], 1.0);
        let b = Tensor::zeros(&[1]);
        let y = conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn zeroed_filter_yields_constant_bias() {
        let x = Tensor::new(vec![2, 4, 4], (0..32).map(|v| (v as f64).cos()).collect()).unwrap();
        let mut w = Tensor::new(vec![2, 2, 3, 3], (0..36).map(|v| v as f64 * 0.01).collect()).unwrap();
        w.data_mut()[18..].fill(0.0);
        let b = Tensor::new(vec![2], vec![0.5, -0.25]).unwrap();
        let y = conv2d(&x, &w, &b, 1, 1).unwrap();
        assert!(y.data()[16..].iter().all(|&v| v == -0.25));
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::zeros(&[2, 4, 4]);
        let w = Tensor::zeros(&[1, 3, 3, 3]);
        let b = Tensor::zeros(&[1]);
        assert!(matches!(conv2d(&x, &w, &b, 1, 1), Err(crate::Error::Shape(_))));
    }

    #[test]
    fn max_pool_picks_first_maximum() {
        let x = Tensor::new(vec![1, 1, 2, 4], vec![1.0, 3.0, 2.0, 2.0, 3.0, 0.0, 2.0, 2.0]).unwrap();
        let (y, arg) = max_pool2d(&x, 2).unwrap();
        assert_eq!(y.data(), &[3.0, 2.0]);
        assert_eq!(arg, vec![1, 2]);
    }
}
