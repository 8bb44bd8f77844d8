//! Raw loops behind the tape's heavier ops.

use super::Real;

/// Geometry of a stride-1 zero-padded 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub cout: usize,
    pub h: usize,
    pub w: usize,
    pub k: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.k
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.k
    }

    /// Output index range `[lo, hi)` whose tap `offset` lands inside an
    /// input axis of length `len`.
    #[inline]
    fn span(&self, offset: usize, len: usize, out_len: usize) -> (usize, usize) {
        let lo = self.pad.saturating_sub(offset);
        let hi = (len + self.pad).saturating_sub(offset).min(out_len);
        (lo, hi.max(lo))
    }
}

pub(crate) fn conv2d_forward<T: Real>(
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    let mut out = vec![T::zero(); g.cout * plane];
    for co in 0..g.cout {
        let dst = &mut out[co * plane..(co + 1) * plane];
        if let Some(b) = bias {
            dst.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..g.cin {
            let src = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
            let taps = &weight[(co * g.cin + ci) * g.k * g.k..(co * g.cin + ci + 1) * g.k * g.k];
            correlate_plane(src, taps, dst, g);
        }
    }
    out
}

pub(crate) fn depthwise_forward<T: Real>(
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
    g: &ConvGeom,
) -> Vec<T> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let plane = ho * wo;
    let mut out = vec![T::zero(); g.cout * plane];
    for c in 0..g.cout {
        let dst = &mut out[c * plane..(c + 1) * plane];
        if let Some(b) = bias {
            dst.iter_mut().for_each(|v| *v = b[c]);
        }
        let src = &input[c * g.h * g.w..(c + 1) * g.h * g.w];
        let taps = &weight[c * g.k * g.k..(c + 1) * g.k * g.k];
        correlate_plane(src, taps, dst, g);
    }
    out
}

/// dst += src ⋆ taps for one (input plane, output plane) pair.
#[inline]
fn correlate_plane<T: Real>(src: &[T], taps: &[T], dst: &mut [T], g: &ConvGeom) {
    let (ho, wo) = (g.out_h(), g.out_w());
    for ky in 0..g.k {
        let (y0, y1) = g.span(ky, g.h, ho);
        for kx in 0..g.k {
            let wv = taps[ky * g.k + kx];
            let (x0, x1) = g.span(kx, g.w, wo);
            for oy in y0..y1 {
                let iy = oy + ky - g.pad;
                let row_in = &src[iy * g.w + x0 + kx - g.pad..iy * g.w + x1 + kx - g.pad];
                let row_out = &mut dst[oy * wo + x0..oy * wo + x1];
                for (o, &i) in row_out.iter_mut().zip(row_in) {
                    *o += wv * i;
                }
            }
        }
    }
}

/// Accumulates gradients of one (input plane, output plane) pair.
#[inline]
fn correlate_plane_backward<T: Real>(
    src: &[T],
    taps: &[T],
    dout: &[T],
    mut dsrc: Option<&mut [T]>,
    mut dtaps: Option<&mut [T]>,
    g: &ConvGeom,
) {
    let (ho, wo) = (g.out_h(), g.out_w());
    for ky in 0..g.k {
        let (y0, y1) = g.span(ky, g.h, ho);
        for kx in 0..g.k {
            let (x0, x1) = g.span(kx, g.w, wo);
            let wv = taps[ky * g.k + kx];
            let mut acc = T::zero();
            for oy in y0..y1 {
                let iy = oy + ky - g.pad;
                let lo = iy * g.w + x0 + kx - g.pad;
                let hi = iy * g.w + x1 + kx - g.pad;
                let row_dout = &dout[oy * wo + x0..oy * wo + x1];
                if dtaps.is_some() {
                    for (&d, &i) in row_dout.iter().zip(&src[lo..hi]) {
                        acc += d * i;
                    }
                }
                if let Some(ds) = dsrc.as_deref_mut() {
                    for (s, &d) in ds[lo..hi].iter_mut().zip(row_dout) {
                        *s += wv * d;
                    }
                }
            }
            if let Some(dt) = dtaps.as_deref_mut() {
                dt[ky * g.k + kx] += acc;
            }
        }
    }
}

pub(crate) fn conv2d_backward<T: Real>(
    input: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeom,
    mut dinput: Option<&mut [T]>,
    mut dweight: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let plane = g.out_h() * g.out_w();
    let kk = g.k * g.k;
    let hw = g.h * g.w;
    for co in 0..g.cout {
        let dplane = &dout[co * plane..(co + 1) * plane];
        for ci in 0..g.cin {
            let wi = (co * g.cin + ci) * kk;
            correlate_plane_backward(
                &input[ci * hw..(ci + 1) * hw],
                &weight[wi..wi + kk],
                dplane,
                dinput.as_deref_mut().map(|d| &mut d[ci * hw..(ci + 1) * hw]),
                dweight.as_deref_mut().map(|d| &mut d[wi..wi + kk]),
                g,
            );
        }
    }
    if let Some(db) = dbias {
        for co in 0..g.cout {
            db[co] += dout[co * plane..(co + 1) * plane].iter().copied().sum::<T>();
        }
    }
}

pub(crate) fn depthwise_backward<T: Real>(
    input: &[T],
    weight: &[T],
    dout: &[T],
    g: &ConvGeom,
    mut dinput: Option<&mut [T]>,
    mut dweight: Option<&mut [T]>,
    dbias: Option<&mut [T]>,
) {
    let plane = g.out_h() * g.out_w();
    let kk = g.k * g.k;
    let hw = g.h * g.w;
    for c in 0..g.cout {
        correlate_plane_backward(
            &input[c * hw..(c + 1) * hw],
            &weight[c * kk..(c + 1) * kk],
            &dout[c * plane..(c + 1) * plane],
            dinput.as_deref_mut().map(|d| &mut d[c * hw..(c + 1) * hw]),
            dweight.as_deref_mut().map(|d| &mut d[c * kk..(c + 1) * kk]),
            g,
        );
    }
    if let Some(db) = dbias {
        for c in 0..g.cout {
            db[c] += dout[c * plane..(c + 1) * plane].iter().copied().sum::<T>();
        }
    }
}

/// C[m,n] = A[m,k] · B[k,n]
pub(crate) fn matmul<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize) -> Vec<T> {
    let mut c = vec![T::zero(); m * n];
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (cv, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
    c
}

/// dA += dC · Bᵀ
pub(crate) fn matmul_grad_lhs<T: Real>(dc: &[T], b: &[T], da: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            da[i * k + p] += drow.iter().zip(brow).map(|(&x, &y)| x * y).sum::<T>();
        }
    }
}

/// dB += Aᵀ · dC
pub(crate) fn matmul_grad_rhs<T: Real>(a: &[T], dc: &[T], db: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let drow = &dc[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (d, &g) in db[p * n..(p + 1) * n].iter_mut().zip(drow) {
                *d += av * g;
            }
        }
    }
}
