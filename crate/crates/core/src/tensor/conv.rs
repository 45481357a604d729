//! Cross-correlation via im2col and GEMM. Samples are processed in batch
//! order and every reduction runs in a fixed sequence, so results are
//! bit-reproducible.

use super::Element;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.ho * self.wo
    }

    /// 1x1 kernels with unit stride and no padding read the input directly.
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Element>(g: &ConvGeometry, input: &[T], cols: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let out_row = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let src = &input[(c * g.h + iy as usize) * g.w..][..g.w];
                    for (ox, v) in out_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *v = if ix < 0 || ix >= g.w as isize {
                            T::zero()
                        } else {
                            src[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im_add<T: Element>(g: &ConvGeometry, cols: &[T], grad_input: &mut [T]) {
    let p = g.positions();
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * p..(row + 1) * p];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let dst = &mut grad_input[(c * g.h + iy as usize) * g.w..][..g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[ix as usize] = dst[ix as usize] + src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn forward<T: Element>(g: &ConvGeometry, input: &[T], kernel: &[T]) -> Vec<T> {
    let (patch, p) = (g.patch(), g.positions());
    let mut out = vec![T::zero(); g.n * g.o * p];
    let mut cols = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); patch * p] };
    for n in 0..g.n {
        let x = &input[n * g.c * g.h * g.w..(n + 1) * g.c * g.h * g.w];
        let b: &[T] = if g.is_pointwise() {
            x
        } else {
            im2col(g, x, &mut cols);
            &cols
        };
        let y = &mut out[n * g.o * p..(n + 1) * g.o * p];
        // SAFETY: kernel is o x patch, b is patch x p, y is o x p, all row-major.
        unsafe {
            T::gemm(
                g.o,
                patch,
                p,
                T::one(),
                kernel.as_ptr(),
                patch as isize,
                1,
                b.as_ptr(),
                p as isize,
                1,
                T::zero(),
                y.as_mut_ptr(),
                p as isize,
                1,
            );
        }
    }
    out
}

/// Returns `(grad_input, grad_kernel)`; either may be skipped.
pub(crate) fn backward<T: Element>(
    g: &ConvGeometry,
    input: &[T],
    kernel: &[T],
    grad_out: &[T],
    want_input: bool,
    want_kernel: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (patch, p) = (g.patch(), g.positions());
    let in_len = g.c * g.h * g.w;
    let mut grad_in = want_input.then(|| vec![T::zero(); g.n * in_len]);
    let mut grad_k = want_kernel.then(|| vec![T::zero(); g.o * patch]);
    let mut cols = vec![T::zero(); patch * p];
    for n in 0..g.n {
        let gy = &grad_out[n * g.o * p..(n + 1) * g.o * p];
        if let Some(gk) = grad_k.as_mut() {
            let x = &input[n * in_len..(n + 1) * in_len];
            let b: &[T] = if g.is_pointwise() {
                x
            } else {
                im2col(g, x, &mut cols);
                &cols
            };
            // SAFETY: gy is o x p, b^T is p x patch (column-major view of b), gk is o x patch.
            unsafe {
                T::gemm(
                    g.o,
                    p,
                    patch,
                    T::one(),
                    gy.as_ptr(),
                    p as isize,
                    1,
                    b.as_ptr(),
                    1,
                    p as isize,
                    T::one(),
                    gk.as_mut_ptr(),
                    patch as isize,
                    1,
                );
            }
        }
        if let Some(gi) = grad_in.as_mut() {
            let dst = &mut gi[n * in_len..(n + 1) * in_len];
            if g.is_pointwise() {
                // SAFETY: kernel^T is patch x o, gy is o x p, dst is patch x p (patch == c).
                unsafe {
                    T::gemm(
                        patch,
                        g.o,
                        p,
                        T::one(),
                        kernel.as_ptr(),
                        1,
                        patch as isize,
                        gy.as_ptr(),
                        p as isize,
                        1,
                        T::zero(),
                        dst.as_mut_ptr(),
                        p as isize,
                        1,
                    );
                }
            } else {
                // SAFETY: as above, writing into the patch x p column buffer.
                unsafe {
                    T::gemm(
                        patch,
                        g.o,
                        p,
                        T::one(),
                        kernel.as_ptr(),
                        1,
                        patch as isize,
                        gy.as_ptr(),
                        p as isize,
                        1,
                        T::zero(),
                        cols.as_mut_ptr(),
                        p as isize,
                        1,
                    );
                }
                col2im_add(g, &cols, dst);
            }
        }
    }
    (grad_in, grad_k)
}
