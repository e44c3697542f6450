//! Raw numeric kernels shared by the tape ops. No gradient bookkeeping here.

use crate::tensor::{Element, TensorError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_ch: usize,
    pub height: usize,
    pub width: usize,
    pub out_ch: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn new(
        input: &[usize],
        weight: &[usize],
        stride: usize,
        padding: usize,
    ) -> Result<Self, TensorError> {
        if input.len() != 4 || weight.len() != 4 {
            return Err(TensorError::Dimension {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: weight.to_vec(),
            });
        }
        if input[1] != weight[1] {
            return Err(TensorError::Dimension {
                op: "conv2d",
                lhs: input.to_vec(),
                rhs: weight.to_vec(),
            });
        }
        if stride == 0 {
            return Err(TensorError::Geometry {
                op: "conv2d",
                detail: "stride must be positive".into(),
            });
        }
        let (kh, kw) = (weight[2], weight[3]);
        let padded_h = input[2] + 2 * padding;
        let padded_w = input[3] + 2 * padding;
        if padded_h < kh || padded_w < kw {
            return Err(TensorError::Geometry {
                op: "conv2d",
                detail: format!(
                    "kernel {kh}x{kw} larger than padded input {padded_h}x{padded_w}"
                ),
            });
        }
        Ok(Self {
            batch: input[0],
            in_ch: input[1],
            height: input[2],
            width: input[3],
            out_ch: weight[0],
            kh,
            kw,
            stride,
            padding,
            out_h: (padded_h - kh) / stride + 1,
            out_w: (padded_w - kw) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn in_image(&self) -> usize {
        self.in_ch * self.height * self.width
    }

    pub fn out_image(&self) -> usize {
        self.out_ch * self.out_plane()
    }

    pub fn output_shape(&self) -> Vec<usize> {
        vec![self.batch, self.out_ch, self.out_h, self.out_w]
    }
}

/// Unfolds one image `[c, h, w]` into `[c*kh*kw, out_h*out_w]`.
fn im2col<T: Element>(g: &ConvGeometry, image: &[T], cols: &mut [T]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for ci in 0..g.in_ch {
        let chan = &image[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(T::zero());
                        continue;
                    }
                    let src = &chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for (ox, d) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        *d = if ix < 0 || ix >= g.width as isize {
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

/// Folds `[c*kh*kw, out_h*out_w]` back onto an image, accumulating overlaps.
fn col2im_add<T: Element>(g: &ConvGeometry, cols: &[T], image: &mut [T]) {
    let plane = g.out_plane();
    let pad = g.padding as isize;
    for ci in 0..g.in_ch {
        let chan = &mut image[ci * g.height * g.width..(ci + 1) * g.height * g.width];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (ci * g.kh + ki) * g.kw + kj;
                let src = &cols[row * plane..(row + 1) * plane];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ki) as isize - pad;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut chan[iy as usize * g.width..(iy as usize + 1) * g.width];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kj) as isize - pad;
                        if ix >= 0 && ix < g.width as isize {
                            dst[ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

pub fn conv2d_forward<T: Element>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    bias: Option<&[T]>,
) -> Vec<T> {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut out = vec![T::zero(); g.batch * g.out_image()];
    let mut cols = vec![T::zero(); patch * plane];
    for n in 0..g.batch {
        im2col(g, &input[n * g.in_image()..(n + 1) * g.in_image()], &mut cols);
        let dst = &mut out[n * g.out_image()..(n + 1) * g.out_image()];
        if let Some(b) = bias {
            for (o, row) in dst.chunks_exact_mut(plane).enumerate() {
                row.fill(b[o]);
            }
        }
        T::gemm(
            g.out_ch,
            patch,
            plane,
            T::one(),
            weight,
            (patch as isize, 1),
            &cols,
            (plane as isize, 1),
            T::one(),
            dst,
            (plane as isize, 1),
        );
    }
    out
}

/// Accumulates input, weight and bias gradients for one conv2d call.
#[allow(clippy::too_many_arguments)]
pub fn conv2d_backward<T: Element>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    grad_input: Option<&mut [T]>,
    grad_weight: Option<&mut [T]>,
    grad_bias: Option<&mut [T]>,
) {
    let plane = g.out_plane();
    let patch = g.patch_len();
    let mut cols = vec![T::zero(); patch * plane];
    let mut grad_input = grad_input;
    let mut grad_weight = grad_weight;
    if let Some(gb) = grad_bias {
        for n in 0..g.batch {
            let go = &grad_out[n * g.out_image()..(n + 1) * g.out_image()];
            for (o, row) in go.chunks_exact(plane).enumerate() {
                gb[o] += row.iter().copied().sum::<T>();
            }
        }
    }
    for n in 0..g.batch {
        let go = &grad_out[n * g.out_image()..(n + 1) * g.out_image()];
        if let Some(gw) = grad_weight.as_deref_mut() {
            im2col(g, &input[n * g.in_image()..(n + 1) * g.in_image()], &mut cols);
            // dW += dY . cols^T
            T::gemm(
                g.out_ch,
                plane,
                patch,
                T::one(),
                go,
                (plane as isize, 1),
                &cols,
                (1, plane as isize),
                T::one(),
                gw,
                (patch as isize, 1),
            );
        }
        if let Some(gi) = grad_input.as_deref_mut() {
            // dcols = W^T . dY
            T::gemm(
                patch,
                g.out_ch,
                plane,
                T::one(),
                weight,
                (1, patch as isize),
                go,
                (plane as isize, 1),
                T::zero(),
                &mut cols,
                (plane as isize, 1),
            );
            col2im_add(g, &cols, &mut gi[n * g.in_image()..(n + 1) * g.in_image()]);
        }
    }
}
