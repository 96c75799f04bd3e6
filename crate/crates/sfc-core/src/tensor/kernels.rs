//! Raw computational loops shared by tape forwards and their reverse rules.
//! Everything is single-threaded and iterates in a fixed order, so repeated
//! runs are bit-identical.

use super::Scalar;

/// C (m×n) += A (m×k) · B (k×n)
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C (m×n) += Aᵀ · B where A is (k×m), B is (k×n).
pub fn matmul_at_b_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for p in 0..k {
        for i in 0..m {
            let av = a[p * m + i];
            if av == T::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
}

/// C (m×n) += A (m×k) · Bᵀ where B is (n×k).
pub fn matmul_a_bt_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        for j in 0..n {
            let mut acc = T::zero();
            let arow = &a[i * k..(i + 1) * k];
            let brow = &b[j * k..(j + 1) * k];
            for p in 0..k {
                acc += arow[p] * brow[p];
            }
            c[i * n + j] += acc;
        }
    }
}

pub struct Conv2dDims {
    pub c_in: usize,
    pub c_out: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
}

impl Conv2dDims {
    fn pads(&self) -> (usize, usize) {
        (self.kh / 2, self.kw / 2)
    }
}

/// Same-size cross-correlation, stride 1, zero padding, odd kernel.
/// x: (c_in,h,w), w: (c_out,c_in,kh,kw), out: (c_out,h,w).
pub fn conv2d<T: Scalar>(x: &[T], wt: &[T], d: &Conv2dDims) -> Vec<T> {
    let (ph, pw) = d.pads();
    let mut out = vec![T::zero(); d.c_out * d.h * d.w];
    for co in 0..d.c_out {
        for ci in 0..d.c_in {
            let xk = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for u in 0..d.kh {
                for v in 0..d.kw {
                    let wv = wt[((co * d.c_in + ci) * d.kh + u) * d.kw + v];
                    if wv == T::zero() {
                        continue;
                    }
                    // out[y, z] += wv * x[y+u-ph, z+v-pw]
                    let y0 = ph.saturating_sub(u);
                    let y1 = (d.h + ph).saturating_sub(u).min(d.h);
                    let z0 = pw.saturating_sub(v);
                    let z1 = (d.w + pw).saturating_sub(v).min(d.w);
                    for y in y0..y1 {
                        let xrow = &xk[(y + u - ph) * d.w..];
                        let orow = &mut out[(co * d.h + y) * d.w..];
                        for z in z0..z1 {
                            orow[z] += wv * xrow[z + v - pw];
                        }
                    }
                }
            }
        }
    }
    out
}

/// Reverse rule for [`conv2d`]: accumulates input/weight gradients in place.
pub fn conv2d_backward<T: Scalar>(
    x: &[T],
    wt: &[T],
    g: &[T],
    d: &Conv2dDims,
    dx: &mut [T],
    dw: &mut [T],
) {
    let (ph, pw) = d.pads();
    for co in 0..d.c_out {
        for ci in 0..d.c_in {
            let xk = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            let dxk = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
            for u in 0..d.kh {
                for v in 0..d.kw {
                    let widx = ((co * d.c_in + ci) * d.kh + u) * d.kw + v;
                    let wv = wt[widx];
                    let mut wacc = T::zero();
                    let y0 = ph.saturating_sub(u);
                    let y1 = (d.h + ph).saturating_sub(u).min(d.h);
                    let z0 = pw.saturating_sub(v);
                    let z1 = (d.w + pw).saturating_sub(v).min(d.w);
                    for y in y0..y1 {
                        let grow = &g[(co * d.h + y) * d.w..];
                        let xoff = (y + u - ph) * d.w;
                        for z in z0..z1 {
                            let gv = grow[z];
                            wacc += gv * xk[xoff + z + v - pw];
                            dxk[xoff + z + v - pw] += gv * wv;
                        }
                    }
                    dw[widx] += wacc;
                }
            }
        }
    }
}

/// Same-size transpose convolution, stride 1, odd kernel.
/// x: (c_in,h,w), w: (c_in,c_out,kh,kw), out: (c_out,h,w).
/// Each input pixel scatters the kernel into the output.
pub fn deconv2d<T: Scalar>(x: &[T], wt: &[T], d: &Conv2dDims) -> Vec<T> {
    let (ph, pw) = d.pads();
    let mut out = vec![T::zero(); d.c_out * d.h * d.w];
    for ci in 0..d.c_in {
        let xk = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for co in 0..d.c_out {
            for u in 0..d.kh {
                for v in 0..d.kw {
                    let wv = wt[((ci * d.c_out + co) * d.kh + u) * d.kw + v];
                    if wv == T::zero() {
                        continue;
                    }
                    // out[y+u-ph, z+v-pw] += wv * x[y, z]
                    let y0 = ph.saturating_sub(u);
                    let y1 = (d.h + ph).saturating_sub(u).min(d.h);
                    let z0 = pw.saturating_sub(v);
                    let z1 = (d.w + pw).saturating_sub(v).min(d.w);
                    for y in y0..y1 {
                        let xrow = &xk[y * d.w..];
                        let orow = &mut out[(co * d.h + y + u - ph) * d.w..];
                        for z in z0..z1 {
                            orow[z + v - pw] += wv * xrow[z];
                        }
                    }
                }
            }
        }
    }
    out
}

pub fn deconv2d_backward<T: Scalar>(
    x: &[T],
    wt: &[T],
    g: &[T],
    d: &Conv2dDims,
    dx: &mut [T],
    dw: &mut [T],
) {
    let (ph, pw) = d.pads();
    for ci in 0..d.c_in {
        let xk = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        let dxk = &mut dx[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for co in 0..d.c_out {
            for u in 0..d.kh {
                for v in 0..d.kw {
                    let widx = ((ci * d.c_out + co) * d.kh + u) * d.kw + v;
                    let wv = wt[widx];
                    let mut wacc = T::zero();
                    let y0 = ph.saturating_sub(u);
                    let y1 = (d.h + ph).saturating_sub(u).min(d.h);
                    let z0 = pw.saturating_sub(v);
                    let z1 = (d.w + pw).saturating_sub(v).min(d.w);
                    for y in y0..y1 {
                        let grow = &g[(co * d.h + y + u - ph) * d.w..];
                        let xoff = y * d.w;
                        for z in z0..z1 {
                            let gv = grow[z + v - pw];
                            wacc += gv * xk[xoff + z];
                            dxk[xoff + z] += gv * wv;
                        }
                    }
                    dw[widx] += wacc;
                }
            }
        }
    }
}

pub struct Conv1dDims {
    pub c_in: usize,
    pub c_out: usize,
    pub len: usize,
    pub k: usize,
    pub groups: usize,
    pub pad_left: usize,
    pub pad_right: usize,
}

impl Conv1dDims {
    pub fn out_len(&self) -> usize {
        self.len + self.pad_left + self.pad_right + 1 - self.k
    }
}

/// Grouped 1-D cross-correlation, stride 1, explicit zero padding.
/// x: (c_in,len), w: (c_out, c_in/groups, k), out: (c_out, out_len).
pub fn conv1d<T: Scalar>(x: &[T], wt: &[T], d: &Conv1dDims) -> Vec<T> {
    let out_len = d.out_len();
    let cpg_in = d.c_in / d.groups;
    let cpg_out = d.c_out / d.groups;
    let mut out = vec![T::zero(); d.c_out * out_len];
    for g in 0..d.groups {
        for oc in 0..cpg_out {
            let co = g * cpg_out + oc;
            for ic in 0..cpg_in {
                let ci = g * cpg_in + ic;
                let xk = &x[ci * d.len..(ci + 1) * d.len];
                for u in 0..d.k {
                    let wv = wt[(co * cpg_in + ic) * d.k + u];
                    if wv == T::zero() {
                        continue;
                    }
                    // out[j] += wv * x[j + u - pad_left]
                    let j0 = d.pad_left.saturating_sub(u);
                    let j1 = (d.len + d.pad_left).saturating_sub(u).min(out_len);
                    let orow = &mut out[co * out_len..];
                    for j in j0..j1 {
                        orow[j] += wv * xk[j + u - d.pad_left];
                    }
                }
            }
        }
    }
    out
}

pub fn conv1d_backward<T: Scalar>(
    x: &[T],
    wt: &[T],
    g: &[T],
    d: &Conv1dDims,
    dx: &mut [T],
    dw: &mut [T],
) {
    let out_len = d.out_len();
    let cpg_in = d.c_in / d.groups;
    let cpg_out = d.c_out / d.groups;
    for gr in 0..d.groups {
        for oc in 0..cpg_out {
            let co = gr * cpg_out + oc;
            let grow = &g[co * out_len..(co + 1) * out_len];
            for ic in 0..cpg_in {
                let ci = gr * cpg_in + ic;
                let xk = &x[ci * d.len..(ci + 1) * d.len];
                let dxk = &mut dx[ci * d.len..(ci + 1) * d.len];
                for u in 0..d.k {
                    let widx = (co * cpg_in + ic) * d.k + u;
                    let wv = wt[widx];
                    let mut wacc = T::zero();
                    let j0 = d.pad_left.saturating_sub(u);
                    let j1 = (d.len + d.pad_left).saturating_sub(u).min(out_len);
                    for j in j0..j1 {
                        let gv = grow[j];
                        wacc += gv * xk[j + u - d.pad_left];
                        dxk[j + u - d.pad_left] += gv * wv;
                    }
                    dw[widx] += wacc;
                }
            }
        }
    }
}

pub struct ScanDims {
    pub d: usize,
    pub n: usize,
    pub len: usize,
}

/// Selective state-space recurrence with zero-order-hold discretization and
/// zero initial state:
///   h[d,n,t] = exp(dt[d,t]·a[d,n])·h[d,n,t-1] + dt[d,t]·b[n,t]·x[d,t]
///   y[d,t]   = Σ_n c[n,t]·h[d,n,t] + d_skip[d]·x[d,t]
/// Returns (y, h); h is retained for the reverse pass.
#[allow(clippy::too_many_arguments)]
pub fn ssm_scan<T: Scalar>(
    x: &[T],
    dt: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d_skip: &[T],
    dims: &ScanDims,
) -> (Vec<T>, Vec<T>) {
    let (d, n, len) = (dims.d, dims.n, dims.len);
    let mut h = vec![T::zero(); d * n * len];
    let mut y = vec![T::zero(); d * len];
    for di in 0..d {
        for t in 0..len {
            let dtv = dt[di * len + t];
            let xv = x[di * len + t];
            let mut acc = T::zero();
            for ni in 0..n {
                let abar = (dtv * a[di * n + ni]).exp();
                let prev = if t == 0 { T::zero() } else { h[(di * n + ni) * len + t - 1] };
                let hv = abar * prev + dtv * b[ni * len + t] * xv;
                h[(di * n + ni) * len + t] = hv;
                acc += c[ni * len + t] * hv;
            }
            y[di * len + t] = acc + d_skip[di] * xv;
        }
    }
    (y, h)
}

/// Reverse pass for [`ssm_scan`]; `h` is the forward-state buffer.
#[allow(clippy::too_many_arguments)]
pub fn ssm_scan_backward<T: Scalar>(
    x: &[T],
    dt: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d_skip: &[T],
    h: &[T],
    g: &[T],
    dims: &ScanDims,
    dx: &mut [T],
    ddt: &mut [T],
    da: &mut [T],
    db: &mut [T],
    dc: &mut [T],
    dd: &mut [T],
) {
    let (d, n, len) = (dims.d, dims.n, dims.len);
    // λ[n] carries ∂L/∂h[d,n,t] while walking t backwards per channel.
    let mut lam = vec![T::zero(); n];
    for di in 0..d {
        lam.iter_mut().for_each(|v| *v = T::zero());
        for t in (0..len).rev() {
            let gv = g[di * len + t];
            let dtv = dt[di * len + t];
            let xv = x[di * len + t];
            dd[di] += gv * xv;
            let mut dxv = d_skip[di] * gv;
            let mut ddtv = T::zero();
            for ni in 0..n {
                let hv = h[(di * n + ni) * len + t];
                dc[ni * len + t] += gv * hv;
                // Total ∂L/∂h at (t): direct output term plus carry from t+1.
                let l = lam[ni] + gv * c[ni * len + t];
                let prev = if t == 0 { T::zero() } else { h[(di * n + ni) * len + t - 1] };
                let av = a[di * n + ni];
                let abar = (dtv * av).exp();
                let bv = b[ni * len + t];
                da[di * n + ni] += l * prev * dtv * abar;
                ddtv += l * (prev * av * abar + bv * xv);
                db[ni * len + t] += l * dtv * xv;
                dxv += l * dtv * bv;
                lam[ni] = l * abar;
            }
            dx[di * len + t] += dxv;
            ddt[di * len + t] += ddtv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_small_known_product() {
        // [[1,2],[3,4]] · [[5,6],[7,8]] = [[19,22],[43,50]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0f64; 4];
        matmul_acc(&a, &b, &mut c, 2, 2, 2);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn conv2d_identity_kernel_passes_through() {
        let d = Conv2dDims { c_in: 1, c_out: 1, h: 3, w: 3, kh: 3, kw: 3 };
        let x: Vec<f64> = (0..9).map(|i| i as f64).collect();
        let mut w = vec![0.0; 9];
        w[4] = 1.0; // center tap
        assert_eq!(conv2d(&x, &w, &d), x);
    }

    #[test]
    fn conv2d_shape_follows_filter_count() {
        // (2M,F,T) in, D' filters, k=3, stride 1, same-pad → (D',F,T)
        let d = Conv2dDims { c_in: 4, c_out: 7, h: 16, w: 5, kh: 3, kw: 1 };
        let x = vec![1.0f32; 4 * 16 * 5];
        let w = vec![0.5f32; 7 * 4 * 3];
        assert_eq!(conv2d(&x, &w, &d).len(), 7 * 16 * 5);
    }

    #[test]
    fn conv1d_causal_padding_keeps_length_and_causality() {
        let d = Conv1dDims { c_in: 1, c_out: 1, len: 6, k: 4, groups: 1, pad_left: 3, pad_right: 0 };
        let mut x = vec![0.0f64; 6];
        x[3] = 1.0;
        let w = vec![1.0; 4];
        let y = conv1d(&x, &w, &d);
        assert_eq!(y.len(), 6);
        // Impulse at t=3 must not leak before t=3.
        assert_eq!(&y[..3], &[0.0, 0.0, 0.0]);
        assert_eq!(&y[3..], &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn scan_with_zero_dt_reduces_to_skip_path() {
        let dims = ScanDims { d: 2, n: 3, len: 4 };
        let x: Vec<f64> = (1..=8).map(|i| i as f64 * 0.25).collect();
        let dt = vec![0.0; 8];
        let a = vec![-1.0; 6];
        let b = vec![0.7; 12];
        let c = vec![0.3; 12];
        let d_skip = [2.0, -1.5];
        let (y, _) = ssm_scan(&x, &dt, &a, &b, &c, &d_skip, &dims);
        for di in 0..2 {
            for t in 0..4 {
                assert_eq!(y[di * 4 + t], d_skip[di] * x[di * 4 + t]);
            }
        }
    }
}
