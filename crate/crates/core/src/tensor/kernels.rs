use super::{Element, Padding, Result, TensorError};

/// Output length and leading pad for one spatial axis.
///
/// `same` follows the TensorFlow convention: `out = ceil(in / stride)` with
/// the odd pixel of padding placed after the data.
pub fn spatial_out(
    op: &'static str,
    len: usize,
    kernel: usize,
    stride: usize,
    padding: Padding,
) -> Result<(usize, usize)> {
    if stride == 0 {
        return Err(TensorError::NonPositiveStride { op });
    }
    match padding {
        Padding::Same => {
            let out = len.div_ceil(stride);
            let total = ((out - 1) * stride + kernel).saturating_sub(len);
            Ok((out, total / 2))
        }
        Padding::Valid => {
            if len < kernel {
                return Err(TensorError::Shape {
                    op,
                    detail: format!("extent {len} smaller than kernel {kernel} with valid padding"),
                });
            }
            Ok(((len - kernel) / stride + 1, 0))
        }
    }
}

/// Resolved geometry of a strided windowed op over an NCHW input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_c: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_c: usize,
    pub k_h: usize,
    pub k_w: usize,
    pub stride: usize,
    pub out_h: usize,
    pub out_w: usize,
    pub pad_top: usize,
    pub pad_left: usize,
}

impl ConvGeom {
    #[allow(clippy::too_many_arguments)]
    pub fn resolve(
        op: &'static str,
        input: &[usize],
        out_c: usize,
        k_h: usize,
        k_w: usize,
        stride: usize,
        padding: Padding,
    ) -> Result<Self> {
        if input.len() != 4 {
            return Err(TensorError::Shape {
                op,
                detail: format!("expected a 4-D NCHW input, got {input:?}"),
            });
        }
        let (out_h, pad_top) = spatial_out(op, input[2], k_h, stride, padding)?;
        let (out_w, pad_left) = spatial_out(op, input[3], k_w, stride, padding)?;
        Ok(Self {
            batch: input[0],
            in_c: input[1],
            in_h: input[2],
            in_w: input[3],
            out_c,
            k_h,
            k_w,
            stride,
            out_h,
            out_w,
            pad_top,
            pad_left,
        })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_c, self.out_h, self.out_w]
    }

    fn in_plane(&self) -> usize {
        self.in_h * self.in_w
    }

    fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.k_h == 1 && self.k_w == 1 && self.stride == 1 && self.pad_top == 0 && self.pad_left == 0
    }

    /// Input coordinate hit by output `o` and kernel tap `k`, if inside.
    #[inline]
    fn source(o: usize, k: usize, stride: usize, pad: usize, len: usize) -> Option<usize> {
        let pos = (o * stride + k) as isize - pad as isize;
        (pos >= 0 && (pos as usize) < len).then_some(pos as usize)
    }
}

fn im2col<F: Element>(g: &ConvGeom, image: &[F], col: &mut [F]) {
    let p = g.out_plane();
    for c in 0..g.in_c {
        let plane = &image[c * g.in_plane()..(c + 1) * g.in_plane()];
        for i in 0..g.k_h {
            for j in 0..g.k_w {
                let row = (c * g.k_h + i) * g.k_w + j;
                let dst = &mut col[row * p..(row + 1) * p];
                for oh in 0..g.out_h {
                    let src_h = ConvGeom::source(oh, i, g.stride, g.pad_top, g.in_h);
                    for ow in 0..g.out_w {
                        dst[oh * g.out_w + ow] = match (src_h, ConvGeom::source(ow, j, g.stride, g.pad_left, g.in_w)) {
                            (Some(h), Some(w)) => plane[h * g.in_w + w],
                            _ => F::zero(),
                        };
                    }
                }
            }
        }
    }
}

fn col2im<F: Element>(g: &ConvGeom, col: &[F], image: &mut [F]) {
    let p = g.out_plane();
    for c in 0..g.in_c {
        let plane = &mut image[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for i in 0..g.k_h {
            for j in 0..g.k_w {
                let row = (c * g.k_h + i) * g.k_w + j;
                let src = &col[row * p..(row + 1) * p];
                for oh in 0..g.out_h {
                    let Some(h) = ConvGeom::source(oh, i, g.stride, g.pad_top, g.in_h) else {
                        continue;
                    };
                    for ow in 0..g.out_w {
                        if let Some(w) = ConvGeom::source(ow, j, g.stride, g.pad_left, g.in_w) {
                            plane[h * g.in_w + w] = plane[h * g.in_w + w] + src[oh * g.out_w + ow];
                        }
                    }
                }
            }
        }
    }
}

/// Dense convolution, kernel laid out `[out_c, in_c, k_h, k_w]`.
pub(crate) fn conv2d_forward<F: Element>(g: &ConvGeom, input: &[F], kernel: &[F]) -> Vec<F> {
    let ck = g.in_c * g.k_h * g.k_w;
    let p = g.out_plane();
    let mut out = vec![F::zero(); g.batch * g.out_c * p];
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![F::zero(); ck * p] };
    for b in 0..g.batch {
        let image = &input[b * g.in_c * g.in_plane()..(b + 1) * g.in_c * g.in_plane()];
        let dst = &mut out[b * g.out_c * p..(b + 1) * g.out_c * p];
        let cols: &[F] = if g.is_pointwise() {
            image
        } else {
            im2col(g, image, &mut col);
            &col
        };
        F::gemm(g.out_c, ck, p, kernel, false, cols, false, dst, false);
    }
    out
}

/// Returns `(d_input, d_kernel)`.
pub(crate) fn conv2d_backward<F: Element>(
    g: &ConvGeom,
    input: &[F],
    kernel: &[F],
    d_out: &[F],
    need_input: bool,
    need_kernel: bool,
) -> (Option<Vec<F>>, Option<Vec<F>>) {
    let ck = g.in_c * g.k_h * g.k_w;
    let p = g.out_plane();
    let per_in = g.in_c * g.in_plane();
    let mut d_input = need_input.then(|| vec![F::zero(); g.batch * per_in]);
    let mut d_kernel = need_kernel.then(|| vec![F::zero(); g.out_c * ck]);
    let mut col = vec![F::zero(); if g.is_pointwise() { 0 } else { ck * p }];
    let mut d_col = vec![F::zero(); if g.is_pointwise() { 0 } else { ck * p }];
    for b in 0..g.batch {
        let dy = &d_out[b * g.out_c * p..(b + 1) * g.out_c * p];
        if let Some(dk) = d_kernel.as_mut() {
            let image = &input[b * per_in..(b + 1) * per_in];
            let cols: &[F] = if g.is_pointwise() {
                image
            } else {
                im2col(g, image, &mut col);
                &col
            };
            // dK[M, CK] += dY[M, P] · colᵀ[P, CK]
            F::gemm(g.out_c, p, ck, dy, false, cols, true, dk, true);
        }
        if let Some(dx) = d_input.as_mut() {
            let dst = &mut dx[b * per_in..(b + 1) * per_in];
            if g.is_pointwise() {
                F::gemm(ck, g.out_c, p, kernel, true, dy, false, dst, false);
            } else {
                F::gemm(ck, g.out_c, p, kernel, true, dy, false, &mut d_col, false);
                col2im(g, &d_col, dst);
            }
        }
    }
    (d_input, d_kernel)
}

/// Per-channel convolution, kernel laid out `[c, 1, k_h, k_w]`.
pub(crate) fn depthwise_forward<F: Element>(g: &ConvGeom, input: &[F], kernel: &[F]) -> Vec<F> {
    let taps = g.k_h * g.k_w;
    let mut out = vec![F::zero(); g.batch * g.in_c * g.out_plane()];
    for b in 0..g.batch {
        for c in 0..g.in_c {
            let plane = &input[(b * g.in_c + c) * g.in_plane()..][..g.in_plane()];
            let k = &kernel[c * taps..(c + 1) * taps];
            let dst = &mut out[(b * g.in_c + c) * g.out_plane()..][..g.out_plane()];
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let mut acc = F::zero();
                    for i in 0..g.k_h {
                        let Some(h) = ConvGeom::source(oh, i, g.stride, g.pad_top, g.in_h) else {
                            continue;
                        };
                        for j in 0..g.k_w {
                            if let Some(w) = ConvGeom::source(ow, j, g.stride, g.pad_left, g.in_w) {
                                acc = acc + plane[h * g.in_w + w] * k[i * g.k_w + j];
                            }
                        }
                    }
                    dst[oh * g.out_w + ow] = acc;
                }
            }
        }
    }
    out
}

pub(crate) fn depthwise_backward<F: Element>(
    g: &ConvGeom,
    input: &[F],
    kernel: &[F],
    d_out: &[F],
) -> (Vec<F>, Vec<F>) {
    let taps = g.k_h * g.k_w;
    let mut d_input = vec![F::zero(); input.len()];
    let mut d_kernel = vec![F::zero(); kernel.len()];
    for b in 0..g.batch {
        for c in 0..g.in_c {
            let base_in = (b * g.in_c + c) * g.in_plane();
            let plane = &input[base_in..][..g.in_plane()];
            let k = &kernel[c * taps..(c + 1) * taps];
            let dy = &d_out[(b * g.in_c + c) * g.out_plane()..][..g.out_plane()];
            for oh in 0..g.out_h {
                for ow in 0..g.out_w {
                    let grad = dy[oh * g.out_w + ow];
                    for i in 0..g.k_h {
                        let Some(h) = ConvGeom::source(oh, i, g.stride, g.pad_top, g.in_h) else {
                            continue;
                        };
                        for j in 0..g.k_w {
                            if let Some(w) = ConvGeom::source(ow, j, g.stride, g.pad_left, g.in_w) {
                                let at = h * g.in_w + w;
                                d_kernel[c * taps + i * g.k_w + j] =
                                    d_kernel[c * taps + i * g.k_w + j] + grad * plane[at];
                                d_input[base_in + at] = d_input[base_in + at] + grad * k[i * g.k_w + j];
                            }
                        }
                    }
                }
            }
        }
    }
    (d_input, d_kernel)
}

/// Max pooling; returns the output and, per output element, the flat input
/// index that won.
pub(crate) fn maxpool_forward<F: Element>(g: &ConvGeom, input: &[F]) -> (Vec<F>, Vec<usize>) {
    let n = g.batch * g.in_c * g.out_plane();
    let mut out = vec![F::zero(); n];
    let mut arg = vec![0usize; n];
    for bc in 0..g.batch * g.in_c {
        let base = bc * g.in_plane();
        for oh in 0..g.out_h {
            for ow in 0..g.out_w {
                let mut best = F::neg_infinity();
                let mut best_at = usize::MAX;
                for i in 0..g.k_h {
                    let Some(h) = ConvGeom::source(oh, i, g.stride, g.pad_top, g.in_h) else {
                        continue;
                    };
                    for j in 0..g.k_w {
                        if let Some(w) = ConvGeom::source(ow, j, g.stride, g.pad_left, g.in_w) {
                            let v = input[base + h * g.in_w + w];
                            if best_at == usize::MAX || v > best {
                                best = v;
                                best_at = base + h * g.in_w + w;
                            }
                        }
                    }
                }
                let o = bc * g.out_plane() + oh * g.out_w + ow;
                out[o] = best;
                arg[o] = best_at;
            }
        }
    }
    (out, arg)
}
