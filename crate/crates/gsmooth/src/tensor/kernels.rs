//! Raw dense kernels shared by the tape ops and the inference path.
//!
//! All buffers are contiguous row-major `f64`. Shape validation happens in
//! the callers; these functions assume conforming sizes. Geometry is passed
//! as explicit scalars and the window loops index directly so the stride
//! arithmetic stays visible.
#![allow(clippy::too_many_arguments, clippy::needless_range_loop)]

/// `out[m,n] += a[m,k] * b[k,n]`
pub fn matmul_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (kk, &aik) in a_row.iter().enumerate() {
            if aik == 0.0 {
                continue;
            }
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += aik * bv;
            }
        }
    }
}

/// `out[m,k] += g[m,n] * b[k,n]^T`  (i.e. g . b transposed on the right)
pub fn matmul_acc_bt(g: &[f64], b: &[f64], out: &mut [f64], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for (kk, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            let mut acc = 0.0;
            for (gv, bv) in g_row.iter().zip(b_row.iter()) {
                acc += gv * bv;
            }
            *o += acc;
        }
    }
}

/// `out[k,n] += a[m,k]^T * g[m,n]`
pub fn matmul_acc_at(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (kk, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row.iter()) {
                *o += av * gv;
            }
        }
    }
}

/// Output spatial extent of a valid convolution / pooling window sweep.
/// Floor semantics: windows that do not fit are dropped.
pub fn valid_out_extent(input: usize, window: usize, stride: usize) -> usize {
    (input - window) / stride + 1
}

/// Valid 2-D convolution (cross-correlation) forward pass for one image.
///
/// `input`: `[cin, h, w]`, `kernel`: `[cout, cin, k, k]`, `out`: `[cout, ho, wo]` (zeroed).
pub fn conv2d_forward(
    input: &[f64],
    kernel: &[f64],
    out: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
) {
    let ho = valid_out_extent(h, k, stride);
    let wo = valid_out_extent(w, k, stride);
    for co in 0..cout {
        let out_ch = &mut out[co * ho * wo..(co + 1) * ho * wo];
        for ci in 0..cin {
            let in_ch = &input[ci * h * w..(ci + 1) * h * w];
            let ker = &kernel[(co * cin + ci) * k * k..(co * cin + ci + 1) * k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let kv = ker[ky * k + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let in_row = &in_ch[(oy * stride + ky) * w + kx..];
                        let out_row = &mut out_ch[oy * wo..oy * wo + wo];
                        if stride == 1 {
                            for (o, &iv) in out_row.iter_mut().zip(in_row.iter()) {
                                *o += kv * iv;
                            }
                        } else {
                            for ox in 0..wo {
                                out_row[ox] += kv * in_row[ox * stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates the input-gradient of `conv2d_forward`.
pub fn conv2d_backward_input(
    grad_out: &[f64],
    kernel: &[f64],
    grad_in: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
) {
    let ho = valid_out_extent(h, k, stride);
    let wo = valid_out_extent(w, k, stride);
    for co in 0..cout {
        let g_ch = &grad_out[co * ho * wo..(co + 1) * ho * wo];
        for ci in 0..cin {
            let gi_ch = &mut grad_in[ci * h * w..(ci + 1) * h * w];
            let ker = &kernel[(co * cin + ci) * k * k..(co * cin + ci + 1) * k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let kv = ker[ky * k + kx];
                    if kv == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let g_row = &g_ch[oy * wo..oy * wo + wo];
                        let gi_row = &mut gi_ch[(oy * stride + ky) * w + kx..];
                        if stride == 1 {
                            for (gi, &gv) in gi_row.iter_mut().zip(g_row.iter()) {
                                *gi += kv * gv;
                            }
                        } else {
                            for ox in 0..wo {
                                gi_row[ox * stride] += kv * g_row[ox];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Accumulates the kernel-gradient of `conv2d_forward`.
pub fn conv2d_backward_kernel(
    grad_out: &[f64],
    input: &[f64],
    grad_kernel: &mut [f64],
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    k: usize,
    stride: usize,
) {
    let ho = valid_out_extent(h, k, stride);
    let wo = valid_out_extent(w, k, stride);
    for co in 0..cout {
        let g_ch = &grad_out[co * ho * wo..(co + 1) * ho * wo];
        for ci in 0..cin {
            let in_ch = &input[ci * h * w..(ci + 1) * h * w];
            let gk = &mut grad_kernel[(co * cin + ci) * k * k..(co * cin + ci + 1) * k * k];
            for ky in 0..k {
                for kx in 0..k {
                    let mut acc = 0.0;
                    for oy in 0..ho {
                        let g_row = &g_ch[oy * wo..oy * wo + wo];
                        let in_row = &in_ch[(oy * stride + ky) * w + kx..];
                        if stride == 1 {
                            for (&gv, &iv) in g_row.iter().zip(in_row.iter()) {
                                acc += gv * iv;
                            }
                        } else {
                            for ox in 0..wo {
                                acc += g_row[ox] * in_row[ox * stride];
                            }
                        }
                    }
                    gk[ky * k + kx] += acc;
                }
            }
        }
    }
}

/// Average pooling over `[c, h, w]` with a square window; `out` is `[c, ho, wo]` (zeroed).
pub fn avg_pool_forward(
    input: &[f64],
    out: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) {
    let ho = valid_out_extent(h, window, stride);
    let wo = valid_out_extent(w, window, stride);
    let inv = 1.0 / (window * window) as f64;
    for ch in 0..c {
        let in_ch = &input[ch * h * w..(ch + 1) * h * w];
        let out_ch = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ky in 0..window {
                    let row = &in_ch[(oy * stride + ky) * w + ox * stride..];
                    for kx in 0..window {
                        acc += row[kx];
                    }
                }
                out_ch[oy * wo + ox] = acc * inv;
            }
        }
    }
}

/// Accumulates the input-gradient of `avg_pool_forward`.
pub fn avg_pool_backward(
    grad_out: &[f64],
    grad_in: &mut [f64],
    c: usize,
    h: usize,
    w: usize,
    window: usize,
    stride: usize,
) {
    let ho = valid_out_extent(h, window, stride);
    let wo = valid_out_extent(w, window, stride);
    let inv = 1.0 / (window * window) as f64;
    for ch in 0..c {
        let g_ch = &grad_out[ch * ho * wo..(ch + 1) * ho * wo];
        let gi_ch = &mut grad_in[ch * h * w..(ch + 1) * h * w];
        for oy in 0..ho {
            for ox in 0..wo {
                let gv = g_ch[oy * wo + ox] * inv;
                for ky in 0..window {
                    let row = &mut gi_ch[(oy * stride + ky) * w + ox * stride..];
                    for kx in 0..window {
                        row[kx] += gv;
                    }
                }
            }
        }
    }
}
