//! Convolution kernels: a direct loop reference and an im2col + GEMM path.

use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_hw(&self) -> (usize, usize) {
        (
            (self.h + 2 * self.pad - self.k) / self.stride + 1,
            (self.w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn cols(&self) -> usize {
        self.c * self.k * self.k
    }
}

/// Direct cross-correlation, used as the reference for the fast path.
pub fn conv2d_loops(x: &[f64], w: &[f64], g: ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let mut out = vec![0.0; g.n * g.o * ho * wo];
    for n in 0..g.n {
        for o in 0..g.o {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for c in 0..g.c {
                        for a in 0..g.k {
                            let r = (i * g.stride + a) as isize - g.pad as isize;
                            if r < 0 || r >= g.h as isize {
                                continue;
                            }
                            for b in 0..g.k {
                                let s = (j * g.stride + b) as isize - g.pad as isize;
                                if s < 0 || s >= g.w as isize {
                                    continue;
                                }
                                acc += x[((n * g.c + c) * g.h + r as usize) * g.w + s as usize]
                                    * w[((o * g.c + c) * g.k + a) * g.k + b];
                            }
                        }
                    }
                    out[((n * g.o + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    out
}

fn im2col(x: &[f64], g: ConvGeom, cols: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    for c in 0..g.c {
        for a in 0..g.k {
            for b in 0..g.k {
                let row = (c * g.k + a) * g.k + b;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                for i in 0..ho {
                    let r = (i * g.stride + a) as isize - g.pad as isize;
                    for j in 0..wo {
                        let s = (j * g.stride + b) as isize - g.pad as isize;
                        dst[i * wo + j] =
                            if r < 0 || r >= g.h as isize || s < 0 || s >= g.w as isize {
                                0.0
                            } else {
                                x[(c * g.h + r as usize) * g.w + s as usize]
                            };
                    }
                }
            }
        }
    }
}

fn col2im(cols: &[f64], g: ConvGeom, dx: &mut [f64]) {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    for c in 0..g.c {
        for a in 0..g.k {
            for b in 0..g.k {
                let row = (c * g.k + a) * g.k + b;
                let src = &cols[row * hw..(row + 1) * hw];
                for i in 0..ho {
                    let r = (i * g.stride + a) as isize - g.pad as isize;
                    if r < 0 || r >= g.h as isize {
                        continue;
                    }
                    for j in 0..wo {
                        let s = (j * g.stride + b) as isize - g.pad as isize;
                        if s >= 0 && s < g.w as isize {
                            dx[(c * g.h + r as usize) * g.w + s as usize] += src[i * wo + j];
                        }
                    }
                }
            }
        }
    }
}

/// C (m×n) = alpha·A·B + beta·C with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    // SAFETY: every index touched is within the slices given the strides above,
    // which callers derive from the same dimensions used to size the buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(x: &[f64], w: &[f64], g: ConvGeom) -> Vec<f64> {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    let ckk = g.cols();
    let in_sz = g.c * g.h * g.w;
    let mut out = vec![0.0; g.n * g.o * hw];
    out.par_chunks_mut(g.o * hw).enumerate().for_each(|(n, y)| {
        let xn = &x[n * in_sz..(n + 1) * in_sz];
        if g.k == 1 && g.stride == 1 && g.pad == 0 {
            gemm(g.o, ckk, hw, w, ckk, 1, xn, hw, 1, 0.0, y);
        } else {
            let mut cols = vec![0.0; ckk * hw];
            im2col(xn, g, &mut cols);
            gemm(g.o, ckk, hw, w, ckk, 1, &cols, hw, 1, 0.0, y);
        }
    });
    out
}

/// Gradients with respect to the input and the weights.
pub fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    g: ConvGeom,
    need_dx: bool,
) -> (Vec<f64>, Vec<f64>) {
    let (ho, wo) = g.out_hw();
    let hw = ho * wo;
    let ckk = g.cols();
    let in_sz = g.c * g.h * g.w;
    let parts: Vec<(Vec<f64>, Vec<f64>)> = (0..g.n)
        .into_par_iter()
        .map(|n| {
            let xn = &x[n * in_sz..(n + 1) * in_sz];
            let dyn_ = &dy[n * g.o * hw..(n + 1) * g.o * hw];
            let direct = g.k == 1 && g.stride == 1 && g.pad == 0;
            let cols_buf;
            let cols: &[f64] = if direct {
                xn
            } else {
                let mut c = vec![0.0; ckk * hw];
                im2col(xn, g, &mut c);
                cols_buf = c;
                &cols_buf
            };
            // dW = dY · colsᵀ
            let mut dw = vec![0.0; g.o * ckk];
            gemm(g.o, hw, ckk, dyn_, hw, 1, cols, 1, hw, 0.0, &mut dw);
            let mut dx = Vec::new();
            if need_dx {
                // dcols = Wᵀ · dY
                let mut dcols = vec![0.0; ckk * hw];
                gemm(ckk, g.o, hw, w, 1, ckk, dyn_, hw, 1, 0.0, &mut dcols);
                if direct {
                    dx = dcols;
                } else {
                    dx = vec![0.0; in_sz];
                    col2im(&dcols, g, &mut dx);
                }
            }
            (dx, dw)
        })
        .collect();
    let mut dw = vec![0.0; g.o * ckk];
    let mut dx = if need_dx {
        Vec::with_capacity(g.n * in_sz)
    } else {
        Vec::new()
    };
    for (pdx, pdw) in parts {
        for (a, b) in dw.iter_mut().zip(&pdw) {
            *a += b;
        }
        dx.extend_from_slice(&pdx);
    }
    (dx, dw)
}
