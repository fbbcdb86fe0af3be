//! Dense forward/backward kernels shared by the tape ops.
//!
//! Everything is a direct loop over row-major buffers. The convolutions are
//! deliberately naive; any faster path must match these in tests.

use crate::tensor::Scalar;

/// out[r,c] = sum_k a[r,k] * b[k,c]
pub fn matmul<T: Scalar>(a: &[T], b: &[T], r: usize, k: usize, c: usize) -> Vec<T> {
    let mut out = vec![T::ZERO; r * c];
    for i in 0..r {
        let out_row = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * c..(p + 1) * c];
            for j in 0..c {
                out_row[j] += av * b_row[j];
            }
        }
    }
    out
}

/// dA = dY · Bᵀ
pub fn matmul_grad_lhs<T: Scalar>(dy: &[T], b: &[T], r: usize, k: usize, c: usize) -> Vec<T> {
    let mut da = vec![T::ZERO; r * k];
    for i in 0..r {
        let dy_row = &dy[i * c..(i + 1) * c];
        let da_row = &mut da[i * k..(i + 1) * k];
        for p in 0..k {
            let b_row = &b[p * c..(p + 1) * c];
            let mut acc = T::ZERO;
            for j in 0..c {
                acc += dy_row[j] * b_row[j];
            }
            da_row[p] += acc;
        }
    }
    da
}

/// dB = Aᵀ · dY
pub fn matmul_grad_rhs<T: Scalar>(dy: &[T], a: &[T], r: usize, k: usize, c: usize) -> Vec<T> {
    let mut db = vec![T::ZERO; k * c];
    for i in 0..r {
        let dy_row = &dy[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            let db_row = &mut db[p * c..(p + 1) * c];
            for j in 0..c {
                db_row[j] += av * dy_row[j];
            }
        }
    }
    db
}

/// Geometry of a 2-D convolution (NCHW input, OIHW weight).
#[derive(Clone, Copy, Debug)]
pub struct Conv2dDims {
    pub n: usize,
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dDims {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }
}

pub fn conv2d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, d: &Conv2dDims) -> Vec<T> {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut out = vec![T::ZERO; d.n * d.c_out * oh * ow];
    let plane_in = d.h * d.w;
    let plane_out = oh * ow;
    for n in 0..d.n {
        for oc in 0..d.c_out {
            let out_plane = &mut out[(n * d.c_out + oc) * plane_out..][..plane_out];
            if let Some(b) = bias {
                let bv = b[oc];
                for v in out_plane.iter_mut() {
                    *v = bv;
                }
            }
            for ic in 0..d.c_in {
                let x_plane = &x[(n * d.c_in + ic) * plane_in..][..plane_in];
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let wv = w[((oc * d.c_in + ic) * d.kh + kh) * d.kw + kw];
                        for oy in 0..oh {
                            let iy = (oy * d.stride + kh) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let x_row = &x_plane[iy as usize * d.w..][..d.w];
                            let o_row = &mut out_plane[oy * ow..][..ow];
                            let off = kw as isize - d.pad as isize;
                            for ox in 0..ow {
                                let ix = (ox * d.stride) as isize + off;
                                if ix >= 0 && ix < d.w as isize {
                                    o_row[ox] += wv * x_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (dx, dw, db).
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    d: &Conv2dDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (oh, ow) = (d.out_h(), d.out_w());
    let mut dx = vec![T::ZERO; x.len()];
    let mut dw = vec![T::ZERO; w.len()];
    let mut db = vec![T::ZERO; d.c_out];
    let plane_in = d.h * d.w;
    let plane_out = oh * ow;
    for n in 0..d.n {
        for oc in 0..d.c_out {
            let dy_plane = &dy[(n * d.c_out + oc) * plane_out..][..plane_out];
            for v in dy_plane {
                db[oc] += *v;
            }
            for ic in 0..d.c_in {
                let x_plane = &x[(n * d.c_in + ic) * plane_in..][..plane_in];
                let dx_plane = &mut dx[(n * d.c_in + ic) * plane_in..][..plane_in];
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let widx = ((oc * d.c_in + ic) * d.kh + kh) * d.kw + kw;
                        let wv = w[widx];
                        let mut wacc = T::ZERO;
                        for oy in 0..oh {
                            let iy = (oy * d.stride + kh) as isize - d.pad as isize;
                            if iy < 0 || iy >= d.h as isize {
                                continue;
                            }
                            let x_row = &x_plane[iy as usize * d.w..][..d.w];
                            let dx_row = &mut dx_plane[iy as usize * d.w..][..d.w];
                            let dy_row = &dy_plane[oy * ow..][..ow];
                            let off = kw as isize - d.pad as isize;
                            for ox in 0..ow {
                                let ix = (ox * d.stride) as isize + off;
                                if ix >= 0 && ix < d.w as isize {
                                    let g = dy_row[ox];
                                    wacc += g * x_row[ix as usize];
                                    dx_row[ix as usize] += g * wv;
                                }
                            }
                        }
                        dw[widx] += wacc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Geometry of a 1-D convolution (NCL input, OIK weight).
#[derive(Clone, Copy, Debug)]
pub struct Conv1dDims {
    pub n: usize,
    pub c_in: usize,
    pub len: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv1dDims {
    pub fn out_len(&self) -> usize {
        (self.len + 2 * self.pad - self.k) / self.stride + 1
    }
}

pub fn conv1d_forward<T: Scalar>(x: &[T], w: &[T], bias: Option<&[T]>, d: &Conv1dDims) -> Vec<T> {
    let ol = d.out_len();
    let mut out = vec![T::ZERO; d.n * d.c_out * ol];
    for n in 0..d.n {
        for oc in 0..d.c_out {
            let o_row = &mut out[(n * d.c_out + oc) * ol..][..ol];
            if let Some(b) = bias {
                let bv = b[oc];
                for v in o_row.iter_mut() {
                    *v = bv;
                }
            }
            for ic in 0..d.c_in {
                let x_row = &x[(n * d.c_in + ic) * d.len..][..d.len];
                for k in 0..d.k {
                    let wv = w[(oc * d.c_in + ic) * d.k + k];
                    let off = k as isize - d.pad as isize;
                    for ox in 0..ol {
                        let ix = (ox * d.stride) as isize + off;
                        if ix >= 0 && ix < d.len as isize {
                            o_row[ox] += wv * x_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns (dx, dw, db).
pub fn conv1d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    d: &Conv1dDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let ol = d.out_len();
    let mut dx = vec![T::ZERO; x.len()];
    let mut dw = vec![T::ZERO; w.len()];
    let mut db = vec![T::ZERO; d.c_out];
    for n in 0..d.n {
        for oc in 0..d.c_out {
            let dy_row = &dy[(n * d.c_out + oc) * ol..][..ol];
            for v in dy_row {
                db[oc] += *v;
            }
            for ic in 0..d.c_in {
                let x_row = &x[(n * d.c_in + ic) * d.len..][..d.len];
                let dx_row = &mut dx[(n * d.c_in + ic) * d.len..][..d.len];
                for k in 0..d.k {
                    let widx = (oc * d.c_in + ic) * d.k + k;
                    let wv = w[widx];
                    let mut wacc = T::ZERO;
                    let off = k as isize - d.pad as isize;
                    for ox in 0..ol {
                        let ix = (ox * d.stride) as isize + off;
                        if ix >= 0 && ix < d.len as isize {
                            let g = dy_row[ox];
                            wacc += g * x_row[ix as usize];
                            dx_row[ix as usize] += g * wv;
                        }
                    }
                    dw[widx] += wacc;
                }
            }
        }
    }
    (dx, dw, db)
}
