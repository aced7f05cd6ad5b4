//! Convolution arithmetic: hand-rolled matmul kernels, im2col/col2im and the
//! conv2d forward/backward passes built on them.
//!
//! Determinism contract: every output element is accumulated in a fixed
//! order regardless of thread count. Parallelism only ever partitions
//! independent output regions (rows of a matmul, images of a batch).

use rayon::prelude::*;

use crate::tensor::Element;

/// `out[m x n] = a[m x k] * b[k x n]`, row-major. Overwrites `out`.
pub fn matmul<F: Element>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.iter_mut().for_each(|v| *v = F::zero());
    matmul_acc_serial(a, b, out, m, k, n);
}

/// Like [`matmul`] but parallelises over row blocks when the problem is
/// large enough to amortise the fork. Accumulation order per element is
/// identical to the serial path.
pub fn matmul_par<F: Element>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    out.iter_mut().for_each(|v| *v = F::zero());
    // Flop heuristic: below ~4M MACs the fork overhead dominates.
    if m * k * n < 4_000_000 || m < 8 {
        matmul_acc_serial(a, b, out, m, k, n);
        return;
    }
    let rows_per_block = (m / (rayon::current_num_threads() * 4)).max(4);
    out.par_chunks_mut(rows_per_block * n)
        .enumerate()
        .for_each(|(blk, out_blk)| {
            let i0 = blk * rows_per_block;
            let rows = out_blk.len() / n;
            matmul_acc_serial(&a[i0 * k..(i0 + rows) * k], b, out_blk, rows, k, n);
        });
}

/// Column tile width of the microkernel; 4 rows x 32 cols of f32
/// accumulators stay resident in vector registers.
const NB: usize = 64;

/// Accumulating core: `out += a * b`. Register-tiled 4xNB microkernel with
/// the column panel outermost so the B panel (k x NB) stays cache-resident
/// across all row quads.
fn matmul_acc_serial<F: Element>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    let mut j0 = 0;
    while j0 + NB <= n {
        let mut i = 0;
        while i + 4 <= m {
            let a0 = &a[i * k..(i + 1) * k];
            let a1 = &a[(i + 1) * k..(i + 2) * k];
            let a2 = &a[(i + 2) * k..(i + 3) * k];
            let a3 = &a[(i + 3) * k..(i + 4) * k];
            let mut acc = [[F::zero(); NB]; 4];
            for l in 0..k {
                let b_blk: &[F; NB] = b[l * n + j0..l * n + j0 + NB].try_into().unwrap();
                let (v0, v1, v2, v3) = (a0[l], a1[l], a2[l], a3[l]);
                for j in 0..NB {
                    let bj = b_blk[j];
                    acc[0][j] = v0.mul_add(bj, acc[0][j]);
                    acc[1][j] = v1.mul_add(bj, acc[1][j]);
                    acc[2][j] = v2.mul_add(bj, acc[2][j]);
                    acc[3][j] = v3.mul_add(bj, acc[3][j]);
                }
            }
            for (r, acc_r) in acc.iter().enumerate() {
                let row = &mut out[(i + r) * n + j0..(i + r) * n + j0 + NB];
                for j in 0..NB {
                    row[j] += acc_r[j];
                }
            }
            i += 4;
        }
        while i < m {
            let a_row = &a[i * k..(i + 1) * k];
            let mut acc = [F::zero(); NB];
            for l in 0..k {
                let b_blk: &[F; NB] = b[l * n + j0..l * n + j0 + NB].try_into().unwrap();
                let v = a_row[l];
                for j in 0..NB {
                    acc[j] = v.mul_add(b_blk[j], acc[j]);
                }
            }
            let row = &mut out[i * n + j0..i * n + j0 + NB];
            for j in 0..NB {
                row[j] += acc[j];
            }
            i += 1;
        }
        j0 += NB;
    }
    if j0 < n {
        // ragged column tail
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            let a_row = &a[i * k..(i + 1) * k];
            for l in 0..k {
                let v = a_row[l];
                let b_row = &b[l * n..(l + 1) * n];
                for j in j0..n {
                    row[j] = v.mul_add(b_row[j], row[j]);
                }
            }
        }
    }
}

/// Accumulator lanes for dot-product reductions; breaks the FMA latency
/// chain and vectorizes.
const DOT_LANES: usize = 16;

#[inline]
fn dot_lanes<F: Element>(a: &[F], b: &[F]) -> F {
    debug_assert_eq!(a.len(), b.len());
    let l = a.len();
    let chunks = l / DOT_LANES;
    let mut acc = [F::zero(); DOT_LANES];
    for c in 0..chunks {
        let off = c * DOT_LANES;
        let av: &[F; DOT_LANES] = a[off..off + DOT_LANES].try_into().unwrap();
        let bv: &[F; DOT_LANES] = b[off..off + DOT_LANES].try_into().unwrap();
        for t in 0..DOT_LANES {
            acc[t] = av[t].mul_add(bv[t], acc[t]);
        }
    }
    let mut s = F::zero();
    for v in acc {
        s += v;
    }
    for t in chunks * DOT_LANES..l {
        s = a[t].mul_add(b[t], s);
    }
    s
}

/// `out[m x n] += a[m x l] * b[n x l]^T` — both operands traversed along
/// their contiguous rows (dot products), used for dW = dY * col^T and for
/// Gram matrices. Columns are processed four at a time so each `a` row
/// pass covers four dots.
pub fn matmul_abt_acc<F: Element>(a: &[F], b: &[F], out: &mut [F], m: usize, l: usize, n: usize) {
    debug_assert_eq!(a.len(), m * l);
    debug_assert_eq!(b.len(), n * l);
    debug_assert_eq!(out.len(), m * n);
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let a_row = &a[i * l..(i + 1) * l];
        let mut j = 0;
        while j + 8 <= n {
            let brows: [&[F]; 8] = std::array::from_fn(|q| &b[(j + q) * l..(j + q + 1) * l]);
            let mut acc = [[F::zero(); DOT_LANES]; 8];
            let chunks = l / DOT_LANES;
            for c in 0..chunks {
                let off = c * DOT_LANES;
                let av: &[F; DOT_LANES] = a_row[off..off + DOT_LANES].try_into().unwrap();
                for q in 0..8 {
                    let bv: &[F; DOT_LANES] = brows[q][off..off + DOT_LANES].try_into().unwrap();
                    for t in 0..DOT_LANES {
                        acc[q][t] = av[t].mul_add(bv[t], acc[q][t]);
                    }
                }
            }
            for (q, acc_q) in acc.iter().enumerate() {
                let mut s = F::zero();
                for v in acc_q {
                    s += *v;
                }
                for t in chunks * DOT_LANES..l {
                    s = a_row[t].mul_add(brows[q][t], s);
                }
                row[j + q] += s;
            }
            j += 8;
        }
        while j < n {
            row[j] += dot_lanes(a_row, &b[j * l..(j + 1) * l]);
            j += 1;
        }
    });
}

/// `out[k x n] = a[m x k]^T * b[m x n]` — used for dCol = W^T * dY.
pub fn matmul_atb<F: Element>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    out.iter_mut().for_each(|v| *v = F::zero());
    matmul_atb_acc(a, b, out, m, k, n);
}

/// Accumulating variant of [`matmul_atb`]: `out += a^T * b`.
pub fn matmul_atb_acc<F: Element>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for t in 0..k {
            let v = a_row[t];
            let o_row = &mut out[t * n..(t + 1) * n];
            for j in 0..n {
                o_row[j] = v.mul_add(b_row[j], o_row[j]);
            }
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeom {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
    pub in_h: usize,
    pub in_w: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.in_h + 2 * self.pad - self.kernel) / self.stride + 1
    }
    pub fn out_w(&self) -> usize {
        (self.in_w + 2 * self.pad - self.kernel) / self.stride + 1
    }
    fn ch_per_group(&self) -> usize {
        self.in_ch / self.groups
    }
    fn out_per_group(&self) -> usize {
        self.out_ch / self.groups
    }
    /// Rows of the im2col matrix for one group.
    fn col_rows(&self) -> usize {
        self.ch_per_group() * self.kernel * self.kernel
    }
}

/// Unpack one image's group-g input patch matrix into `col` at column
/// offset `col_off`, rows strided by `row_stride`. Rows are
/// (channel-within-group, ky, kx), columns are output positions.
fn im2col<F: Element>(
    x: &[F],
    g: &ConvGeom,
    group: usize,
    col: &mut [F],
    row_stride: usize,
    col_off: usize,
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cpg = g.ch_per_group();
    let mut row = 0;
    for c in 0..cpg {
        let plane = &x[(group * cpg + c) * g.in_h * g.in_w..(group * cpg + c + 1) * g.in_h * g.in_w];
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let dst = &mut col[row * row_stride + col_off..row * row_stride + col_off + oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                    if iy < 0 || iy >= g.in_h as isize {
                        dst_row.iter_mut().for_each(|v| *v = F::zero());
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    if g.stride == 1 && g.pad <= kx && kx - g.pad + ow <= g.in_w {
                        // fully interior: straight copy
                        dst_row.copy_from_slice(&src_row[kx - g.pad..kx - g.pad + ow]);
                        continue;
                    }
                    for (ox, d) in dst_row.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.in_w as isize {
                            F::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-add the column matrix back into an image gradient.
fn col2im_acc<F: Element>(col: &[F], g: &ConvGeom, group: usize, dx: &mut [F]) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let cpg = g.ch_per_group();
    let mut row = 0;
    for c in 0..cpg {
        let plane_off = (group * cpg + c) * g.in_h * g.in_w;
        for ky in 0..g.kernel {
            for kx in 0..g.kernel {
                let src = &col[row * oh * ow..(row + 1) * oh * ow];
                for oy in 0..oh {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    for ox in 0..ow {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= g.in_w as isize {
                            continue;
                        }
                        dx[plane_off + iy as usize * g.in_w + ix as usize] += src[oy * ow + ox];
                    }
                }
                row += 1;
            }
        }
    }
}

/// Batched conv2d forward. `x` is `[n, in_ch, in_h, in_w]`, `weight` is
/// `[out_ch, in_ch/groups, k, k]`, output `[n, out_ch, out_h, out_w]`.
/// Images are processed in parallel; each image is serial.
pub fn conv2d_forward<F: Element>(
    x: &[F],
    weight: &[F],
    bias: Option<&[F]>,
    g: &ConvGeom,
    batch: usize,
    out: &mut [F],
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let in_sz = g.in_ch * g.in_h * g.in_w;
    let out_sz = g.out_ch * oh * ow;
    debug_assert_eq!(x.len(), batch * in_sz);
    debug_assert_eq!(out.len(), batch * out_sz);

    if g.groups == g.in_ch && g.out_ch == g.in_ch {
        depthwise_forward(x, weight, bias, g, batch, out);
        return;
    }
    if g.groups == 1
        && g.kernel == 3
        && g.stride == 1
        && g.pad == 1
        && oh % 2 == 0
        && ow % 2 == 0
        && oh * ow >= 16
    {
        winograd3x3_forward(x, weight, bias, g, batch, out);
        return;
    }

    let col_rows = g.col_rows();
    let opg = g.out_per_group();
    let wpg = opg * col_rows;
    let ohw = oh * ow;
    // Pack several images into one column matrix when the spatial extent is
    // small, so the matmul still sees wide rows.
    let chunk = (512usize.div_ceil(ohw)).clamp(1, batch);
    let pointwise = g.kernel == 1 && g.stride == 1 && g.pad == 0;
    out.par_chunks_mut(chunk * out_sz).enumerate().for_each_init(
        || (Vec::<F>::new(), Vec::<F>::new()),
        |(col, tmp), (ci, out_chunk)| {
            let imgs = out_chunk.len() / out_sz;
            if pointwise && g.groups == 1 && ohw >= 4 * NB {
                // im2col of a 1x1/s1/p0 conv is the input itself, and the
                // column count is wide enough for the microkernel
                for (im, out_img) in out_chunk.chunks_mut(out_sz).enumerate() {
                    let img = ci * chunk + im;
                    let x_img = &x[img * in_sz..(img + 1) * in_sz];
                    matmul(weight, x_img, out_img, g.out_ch, col_rows, ohw);
                }
                add_bias(out_chunk, bias, g.out_ch, ohw, out_sz);
                return;
            }
            if imgs == 1 && g.groups == 1 {
                let img = ci * chunk;
                let x_img = &x[img * in_sz..(img + 1) * in_sz];
                col.resize(col_rows * ohw, F::zero());
                im2col(x_img, g, 0, col, ohw, 0);
                matmul(weight, col, out_chunk, g.out_ch, col_rows, ohw);
                add_bias(out_chunk, bias, g.out_ch, ohw, out_sz);
                return;
            }
            let n_eff = imgs * ohw;
            col.resize(col_rows * n_eff, F::zero());
            tmp.resize(opg * n_eff, F::zero());
            for grp in 0..g.groups {
                for im in 0..imgs {
                    let img = ci * chunk + im;
                    im2col(&x[img * in_sz..(img + 1) * in_sz], g, grp, col, n_eff, im * ohw);
                }
                let w_g = &weight[grp * wpg..(grp + 1) * wpg];
                matmul(w_g, col, tmp, opg, col_rows, n_eff);
                for oc in 0..opg {
                    let bc = bias.map(|b| b[grp * opg + oc]).unwrap_or_else(F::zero);
                    for im in 0..imgs {
                        let src = &tmp[oc * n_eff + im * ohw..oc * n_eff + (im + 1) * ohw];
                        let dst = &mut out_chunk[im * out_sz + (grp * opg + oc) * ohw
                            ..im * out_sz + (grp * opg + oc + 1) * ohw];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = *s + bc;
                        }
                    }
                }
            }
        },
    );
}

fn add_bias<F: Element>(
    out_chunk: &mut [F],
    bias: Option<&[F]>,
    out_ch: usize,
    ohw: usize,
    out_sz: usize,
) {
    let Some(b) = bias else { return };
    for out_img in out_chunk.chunks_mut(out_sz) {
        for c in 0..out_ch {
            let bc = b[c];
            out_img[c * ohw..(c + 1) * ohw].iter_mut().for_each(|v| *v += bc);
        }
    }
}

/// Winograd F(2x2, 3x3) for stride-1 pad-1 ungrouped 3x3 convolutions with
/// even output extents: 2.25x fewer multiplies than im2col and the inner
/// products become 16 well-shaped GEMMs over (out_ch x in_ch x tiles).
fn winograd3x3_forward<F: Element>(
    x: &[F],
    weight: &[F],
    bias: Option<&[F]>,
    g: &ConvGeom,
    batch: usize,
    out: &mut [F],
) {
    let (h, w) = (g.in_h, g.in_w);
    let (oh, ow) = (g.out_h(), g.out_w());
    let (c_in, k_out) = (g.in_ch, g.out_ch);
    let (th, tw) = (oh / 2, ow / 2);
    let tiles_img = th * tw;
    let in_sz = c_in * h * w;
    let out_sz = k_out * oh * ow;

    // filter transform U[p][k][c] = (G g G')[p], shared across the batch
    let mut u = vec![F::zero(); 16 * k_out * c_in];
    let half = F::from_f64(0.5);
    for k in 0..k_out {
        for c in 0..c_in {
            let gk = &weight[(k * c_in + c) * 9..(k * c_in + c + 1) * 9];
            // t = G g (4x3)
            let mut t = [F::zero(); 12];
            for j in 0..3 {
                let (g0, g1, g2) = (gk[j], gk[3 + j], gk[6 + j]);
                t[j] = g0;
                t[3 + j] = half * (g0 + g1 + g2);
                t[6 + j] = half * (g0 - g1 + g2);
                t[9 + j] = g2;
            }
            // u_kc = t G' (4x4)
            for i in 0..4 {
                let (t0, t1, t2) = (t[i * 3], t[i * 3 + 1], t[i * 3 + 2]);
                let row = [t0, half * (t0 + t1 + t2), half * (t0 - t1 + t2), t2];
                for (p_col, val) in row.into_iter().enumerate() {
                    u[(i * 4 + p_col) * k_out * c_in + k * c_in + c] = val;
                }
            }
        }
    }

    let chunk = (512usize.div_ceil(tiles_img)).clamp(1, batch);
    out.par_chunks_mut(chunk * out_sz).enumerate().for_each_init(
        || (Vec::<F>::new(), Vec::<F>::new()),
        |(v_buf, m_buf), (ci, out_chunk)| {
            let imgs = out_chunk.len() / out_sz;
            let t_eff = imgs * tiles_img;
            v_buf.resize(16 * c_in * t_eff, F::zero());
            m_buf.resize(16 * k_out * t_eff, F::zero());

            // gather + input transform: V[p][c][tile]
            for (im, v_cols) in (0..imgs).map(|im| (im, im * tiles_img)) {
                let x_img = &x[(ci * chunk + im) * in_sz..(ci * chunk + im + 1) * in_sz];
                for c in 0..c_in {
                    let plane = &x_img[c * h * w..(c + 1) * h * w];
                    for ty in 0..th {
                        for tx in 0..tw {
                            // 4x4 input tile at (2ty-1, 2tx-1)
                            let mut d = [F::zero(); 16];
                            for r in 0..4usize {
                                let iy = (2 * ty + r) as isize - 1;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let row = &plane[iy as usize * w..(iy as usize + 1) * w];
                                for s in 0..4usize {
                                    let ix = (2 * tx + s) as isize - 1;
                                    if ix >= 0 && ix < w as isize {
                                        d[r * 4 + s] = row[ix as usize];
                                    }
                                }
                            }
                            // e = B' d
                            let mut e = [F::zero(); 16];
                            for j in 0..4 {
                                e[j] = d[j] - d[8 + j];
                                e[4 + j] = d[4 + j] + d[8 + j];
                                e[8 + j] = d[8 + j] - d[4 + j];
                                e[12 + j] = d[4 + j] - d[12 + j];
                            }
                            // v = e B
                            let t_idx = v_cols + ty * tw + tx;
                            for i in 0..4 {
                                let (e0, e1, e2, e3) =
                                    (e[i * 4], e[i * 4 + 1], e[i * 4 + 2], e[i * 4 + 3]);
                                let vals = [e0 - e2, e1 + e2, e2 - e1, e1 - e3];
                                for (j, val) in vals.into_iter().enumerate() {
                                    v_buf[(i * 4 + j) * c_in * t_eff + c * t_eff + t_idx] = val;
                                }
                            }
                        }
                    }
                }
            }

            // 16 GEMMs: M[p] = U[p] (K x C) * V[p] (C x T)
            for p in 0..16 {
                matmul(
                    &u[p * k_out * c_in..(p + 1) * k_out * c_in],
                    &v_buf[p * c_in * t_eff..(p + 1) * c_in * t_eff],
                    &mut m_buf[p * k_out * t_eff..(p + 1) * k_out * t_eff],
                    k_out,
                    c_in,
                    t_eff,
                );
            }

            // output transform + scatter
            for im in 0..imgs {
                let out_img = &mut out_chunk[im * out_sz..(im + 1) * out_sz];
                for k in 0..k_out {
                    let bc = bias.map(|b| b[k]).unwrap_or_else(F::zero);
                    let o_plane = &mut out_img[k * oh * ow..(k + 1) * oh * ow];
                    for ty in 0..th {
                        for tx in 0..tw {
                            let t_idx = im * tiles_img + ty * tw + tx;
                            let mut m = [F::zero(); 16];
                            for (p, mv) in m.iter_mut().enumerate() {
                                *mv = m_buf[p * k_out * t_eff + k * t_eff + t_idx];
                            }
                            // z = A' m (2x4)
                            let mut z = [F::zero(); 8];
                            for j in 0..4 {
                                z[j] = m[j] + m[4 + j] + m[8 + j];
                                z[4 + j] = m[4 + j] - m[8 + j] - m[12 + j];
                            }
                            // y = z A (2x2)
                            for i in 0..2 {
                                let (z0, z1, z2, z3) =
                                    (z[i * 4], z[i * 4 + 1], z[i * 4 + 2], z[i * 4 + 3]);
                                let y0 = z0 + z1 + z2 + bc;
                                let y1 = z1 - z2 - z3 + bc;
                                let o_row = (2 * ty + i) * ow + 2 * tx;
                                o_plane[o_row] = y0;
                                o_plane[o_row + 1] = y1;
                            }
                        }
                    }
                }
            }
        },
    );
}

fn depthwise_forward<F: Element>(
    x: &[F],
    weight: &[F],
    bias: Option<&[F]>,
    g: &ConvGeom,
    batch: usize,
    out: &mut [F],
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let in_sz = g.in_ch * g.in_h * g.in_w;
    let out_sz = g.out_ch * oh * ow;
    debug_assert_eq!(out.len(), batch * out_sz);
    out.par_chunks_mut(out_sz).enumerate().for_each(|(img, out_img)| {
        let x_img = &x[img * in_sz..(img + 1) * in_sz];
        for c in 0..g.in_ch {
            let plane = &x_img[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
            let wk = &weight[c * g.kernel * g.kernel..(c + 1) * g.kernel * g.kernel];
            let dst = &mut out_img[c * oh * ow..(c + 1) * oh * ow];
            let b = bias.map(|b| b[c]).unwrap_or_else(F::zero);
            if g.stride == 1 && g.pad == 1 && g.kernel == 3 && oh == g.in_h && ow == g.in_w && oh * ow >= 256 {
                // flat interior runs: rows 1..oh-1 as one long vectorized
                // accumulation per tap, then scalar fixes for the borders
                let run = (oh - 2) * ow;
                let dst_run = &mut dst[ow..ow + run];
                dst_run.iter_mut().for_each(|v| *v = b);
                for (tap, &wv) in wk.iter().enumerate() {
                    let (ky, kx) = (tap / 3, tap % 3);
                    // src offset for run start (oy=1): (ky-1)*w + (kx-1) + w
                    let off = (ky * g.in_w + kx) as isize - (g.in_w + 1) as isize + g.in_w as isize;
                    let s0 = off.max(0) as usize;
                    let lo = (s0 as isize - off) as usize; // first dst index with valid src
                    let hi = run.min((plane.len() as isize - off) as usize);
                    if lo >= hi {
                        continue;
                    }
                    for (d, s) in dst_run[lo..hi].iter_mut().zip(&plane[(lo as isize + off) as usize..(hi as isize + off) as usize]) {
                        *d = wv.mul_add(*s, *d);
                    }
                }
                // fix the lateral borders of interior rows, then top/bottom
                for oy in 1..oh - 1 {
                    for &ox in &[0usize, ow - 1] {
                        let mut acc = b;
                        for ky in 0..3usize {
                            let iy = oy + ky - 1;
                            for kx in 0..3usize {
                                let ix = (ox + kx) as isize - 1;
                                if ix >= 0 && ix < g.in_w as isize {
                                    acc = wk[ky * 3 + kx]
                                        .mul_add(plane[iy * g.in_w + ix as usize], acc);
                                }
                            }
                        }
                        dst[oy * ow + ox] = acc;
                    }
                }
                for &oy in &[0usize, oh - 1] {
                    for ox in 0..ow {
                        let mut acc = b;
                        for ky in 0..3usize {
                            let iy = (oy + ky) as isize - 1;
                            if iy < 0 || iy >= g.in_h as isize {
                                continue;
                            }
                            for kx in 0..3usize {
                                let ix = (ox + kx) as isize - 1;
                                if ix >= 0 && ix < g.in_w as isize {
                                    acc = wk[ky * 3 + kx]
                                        .mul_add(plane[iy as usize * g.in_w + ix as usize], acc);
                                }
                            }
                        }
                        dst[oy * ow + ox] = acc;
                    }
                }
                continue;
            }
            // per output row: accumulate all taps, store once
            for oy in 0..oh {
                let dst_row = &mut dst[oy * ow..(oy + 1) * ow];
                dst_row.iter_mut().for_each(|v| *v = b);
                for ky in 0..g.kernel {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.in_h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.in_w..(iy as usize + 1) * g.in_w];
                    for kx in 0..g.kernel {
                        let wv = wk[ky * g.kernel + kx];
                        let shift = kx as isize - g.pad as isize;
                        if g.stride == 1 {
                            // valid ox range: 0 <= ox + shift < in_w
                            let lo = (-shift).max(0) as usize;
                            let hi = ((g.in_w as isize - shift).max(0) as usize).min(ow);
                            let src_off = (lo as isize + shift) as usize;
                            for (d, s) in dst_row[lo..hi]
                                .iter_mut()
                                .zip(&src_row[src_off..src_off + (hi - lo)])
                            {
                                *d = wv.mul_add(*s, *d);
                            }
                        } else {
                            for (ox, d) in dst_row.iter_mut().enumerate() {
                                let ix = (ox * g.stride) as isize + shift;
                                if ix >= 0 && ix < g.in_w as isize {
                                    *d += wv * src_row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

/// Conv2d backward: fills `dx` and accumulates into `dw`/`db`.
/// The image loop is serial so dW accumulation order is fixed.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<F: Element>(
    x: &[F],
    weight: &[F],
    dy: &[F],
    g: &ConvGeom,
    batch: usize,
    dx: &mut [F],
    dw: &mut [F],
    db: Option<&mut [F]>,
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let in_sz = g.in_ch * g.in_h * g.in_w;
    let out_sz = g.out_ch * oh * ow;
    let col_rows = g.col_rows();
    let opg = g.out_per_group();
    let wpg = opg * col_rows;
    dx.iter_mut().for_each(|v| *v = F::zero());

    let mut col = vec![F::zero(); col_rows * oh * ow];
    let mut dcol = vec![F::zero(); col_rows * oh * ow];
    for img in 0..batch {
        let x_img = &x[img * in_sz..(img + 1) * in_sz];
        let dy_img = &dy[img * out_sz..(img + 1) * out_sz];
        let dx_img = &mut dx[img * in_sz..(img + 1) * in_sz];
        for grp in 0..g.groups {
            im2col(x_img, g, grp, &mut col, oh * ow, 0);
            let dy_g = &dy_img[grp * opg * oh * ow..(grp + 1) * opg * oh * ow];
            // dW_g += dY_g * col^T
            matmul_abt_acc(
                dy_g,
                &col,
                &mut dw[grp * wpg..(grp + 1) * wpg],
                opg,
                oh * ow,
                col_rows,
            );
            // dcol = W_g^T * dY_g
            matmul_atb(
                &weight[grp * wpg..(grp + 1) * wpg],
                dy_g,
                &mut dcol,
                opg,
                col_rows,
                oh * ow,
            );
            col2im_acc(&dcol, g, grp, dx_img);
        }
    }
    if let Some(db) = db {
        for img in 0..batch {
            let dy_img = &dy[img * out_sz..(img + 1) * out_sz];
            for c in 0..g.out_ch {
                let mut acc = F::zero();
                for v in &dy_img[c * oh * ow..(c + 1) * oh * ow] {
                    acc += *v;
                }
                db[c] += acc;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    // Quadruple-loop reference conv, no im2col. Kept deliberately naive:
    // it is the oracle the fast path is checked against.
    fn conv_reference(
        x: &[f64],
        w: &[f64],
        b: Option<&[f64]>,
        g: &ConvGeom,
        batch: usize,
    ) -> Vec<f64> {
        let (oh, ow) = (g.out_h(), g.out_w());
        let cpg = g.in_ch / g.groups;
        let opg = g.out_ch / g.groups;
        let mut out = vec![0.0; batch * g.out_ch * oh * ow];
        for img in 0..batch {
            for oc in 0..g.out_ch {
                let grp = oc / opg;
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = b.map(|b| b[oc]).unwrap_or(0.0);
                        for ic in 0..cpg {
                            for ky in 0..g.kernel {
                                for kx in 0..g.kernel {
                                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                                    let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                                    if iy < 0 || ix < 0 || iy >= g.in_h as isize || ix >= g.in_w as isize {
                                        continue;
                                    }
                                    let xv = x[((img * g.in_ch + grp * cpg + ic) * g.in_h
                                        + iy as usize)
                                        * g.in_w
                                        + ix as usize];
                                    let wv = w[((oc * cpg + ic) * g.kernel + ky) * g.kernel + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((img * g.out_ch + oc) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        out
    }

    fn pseudo_fill(v: &mut [f64], seed: u64) {
        let mut s = seed.wrapping_mul(0x9E3779B97F4A7C15).wrapping_add(1);
        for x in v.iter_mut() {
            s ^= s << 13;
            s ^= s >> 7;
            s ^= s << 17;
            *x = (s % 2000) as f64 / 1000.0 - 1.0;
        }
    }

    #[test]
    fn matmul_matches_naive() {
        let (m, k, n) = (7, 5, 9);
        let mut a = vec![0.0; m * k];
        let mut b = vec![0.0; k * n];
        pseudo_fill(&mut a, 3);
        pseudo_fill(&mut b, 4);
        let mut got = vec![0.0; m * n];
        matmul(&a, &b, &mut got, m, k, n);
        for i in 0..m {
            for j in 0..n {
                let want: f64 = (0..k).map(|l| a[i * k + l] * b[l * n + j]).sum();
                assert!((got[i * n + j] - want).abs() < 1e-12);
            }
        }
        let mut par = vec![0.0; m * n];
        matmul_par(&a, &b, &mut par, m, k, n);
        assert_eq!(got, par);
    }

    #[test]
    fn conv_forward_matches_reference() {
        for &(groups, pad, stride, bias) in
            &[(1, 1, 1, true), (1, 0, 2, false), (2, 1, 1, true), (4, 1, 2, false)]
        {
            let g = ConvGeom {
                in_ch: 4,
                out_ch: 8,
                kernel: 3,
                stride,
                pad,
                groups,
                in_h: 6,
                in_w: 5,
            };
            let batch = 2;
            let mut x = vec![0.0; batch * g.in_ch * g.in_h * g.in_w];
            let mut w = vec![0.0; g.out_ch * (g.in_ch / groups) * 9];
            let mut b = vec![0.0; g.out_ch];
            pseudo_fill(&mut x, 11);
            pseudo_fill(&mut w, 13);
            pseudo_fill(&mut b, 17);
            let bias_opt = bias.then_some(&b[..]);
            let want = conv_reference(&x, &w, bias_opt, &g, batch);
            let mut got = vec![0.0; want.len()];
            conv2d_forward(&x, &w, bias_opt, &g, batch, &mut got);
            for (gv, wv) in got.iter().zip(&want) {
                assert!((gv - wv).abs() < 1e-10, "mismatch {gv} vs {wv}");
            }
        }
    }

    #[test]
    fn winograd_matches_reference() {
        // 3x3 s1 p1 with even extents takes the winograd path
        let g = ConvGeom {
            in_ch: 5,
            out_ch: 7,
            kernel: 3,
            stride: 1,
            pad: 1,
            groups: 1,
            in_h: 8,
            in_w: 6,
        };
        let batch = 3;
        let mut x = vec![0.0; batch * g.in_ch * g.in_h * g.in_w];
        let mut w = vec![0.0; g.out_ch * g.in_ch * 9];
        let mut b = vec![0.0; g.out_ch];
        pseudo_fill(&mut x, 21);
        pseudo_fill(&mut w, 22);
        pseudo_fill(&mut b, 23);
        let want = conv_reference(&x, &w, Some(&b), &g, batch);
        let mut got = vec![0.0; want.len()];
        conv2d_forward(&x, &w, Some(&b[..]), &g, batch, &mut got);
        for (gv, wv) in got.iter().zip(&want) {
            assert!((gv - wv).abs() < 1e-10, "winograd mismatch {gv} vs {wv}");
        }
    }

    #[test]
    fn depthwise_flat_interior_matches_reference() {
        // stride-1 3x3 on a 32x32 plane takes the flat-run path
        let g = ConvGeom {
            in_ch: 3,
            out_ch: 3,
            kernel: 3,
            stride: 1,
            pad: 1,
            groups: 3,
            in_h: 32,
            in_w: 32,
        };
        let batch = 2;
        let mut x = vec![0.0; batch * 3 * 1024];
        let mut w = vec![0.0; 3 * 9];
        let mut b = vec![0.0; 3];
        pseudo_fill(&mut x, 31);
        pseudo_fill(&mut w, 32);
        pseudo_fill(&mut b, 33);
        let want = conv_reference(&x, &w, Some(&b), &g, batch);
        let mut got = vec![0.0; want.len()];
        conv2d_forward(&x, &w, Some(&b[..]), &g, batch, &mut got);
        for (i, (gv, wv)) in got.iter().zip(&want).enumerate() {
            assert!((gv - wv).abs() < 1e-10, "dw flat mismatch at {i}: {gv} vs {wv}");
        }
    }

    #[test]
    fn depthwise_matches_reference() {
        let g = ConvGeom {
            in_ch: 6,
            out_ch: 6,
            kernel: 3,
            stride: 2,
            pad: 1,
            groups: 6,
            in_h: 7,
            in_w: 7,
        };
        let batch = 3;
        let mut x = vec![0.0; batch * g.in_ch * 49];
        let mut w = vec![0.0; 6 * 9];
        pseudo_fill(&mut x, 5);
        pseudo_fill(&mut w, 6);
        let want = conv_reference(&x, &w, None, &g, batch);
        let mut got = vec![0.0; want.len()];
        conv2d_forward(&x, &w, None, &g, batch, &mut got);
        for (gv, wv) in got.iter().zip(&want) {
            assert!((gv - wv).abs() < 1e-10);
        }
    }
}
