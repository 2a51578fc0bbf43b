//! Convolution (cross-correlation convention) and deterministic resampling
//! on NCHW tensors. Convolution lowers to im2col + matmul; backward passes
//! recompute the column buffers instead of caching them.

use super::ops::{matmul_nn, matmul_nt, matmul_tn};
use super::{Element, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    AvgpoolDown,
    NearestUp,
    BilinearUp,
}

fn conv_out_size(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Element>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [T],
) {
    // col[(cc*kh+ky)*kw+kx, oy*ow+ox]
    let ohw = oh * ow;
    for cc in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((cc * kh + ky) * kw + kx) * ohw;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let dst = &mut col[row + oy * ow..row + (oy + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        for v in dst.iter_mut() {
                            *v = T::zero();
                        }
                        continue;
                    }
                    let src_row = (cc * h + iy as usize) * w;
                    for (ox, v) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *v = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            x[src_row + ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im_add<T: Element>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    x_grad: &mut [T],
) {
    let ohw = oh * ow;
    for cc in 0..c {
        for ky in 0..kh {
            for kx in 0..kw {
                let row = ((cc * kh + ky) * kw + kx) * ohw;
                for oy in 0..oh {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let dst_row = (cc * h + iy as usize) * w;
                    for ox in 0..ow {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x_grad[dst_row + ix as usize] =
                            x_grad[dst_row + ix as usize] + col[row + oy * ow + ox];
                    }
                }
            }
        }
    }
}

impl<T: Element> Tensor<T> {
    /// 2-D convolution (cross-correlation): x[N,C,H,W] * w[F,C,kh,kw].
    pub fn conv2d(&self, weight: &Tensor<T>, stride: usize, padding: usize) -> Result<Tensor<T>> {
        let xs = self.shape();
        let ws = weight.shape();
        if xs.len() != 4 || ws.len() != 4 {
            return Err(Error::Shape(format!(
                "conv2d expects NCHW input and FCKK weight, got {:?} and {:?}",
                xs, ws
            )));
        }
        if stride == 0 {
            return Err(Error::InvalidParam("conv2d stride must be >= 1".to_string()));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (f, wc, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
        if wc != c {
            return Err(Error::Shape(format!(
                "conv2d channel mismatch: input C={} weight C={}",
                c, wc
            )));
        }
        let (Some(oh), Some(ow)) = (
            conv_out_size(h, kh, stride, padding),
            conv_out_size(w, kw, stride, padding),
        ) else {
            return Err(Error::InvalidParam(format!(
                "kernel {}x{} does not fit padded input {}x{} (pad {})",
                kh, kw, h, w, padding
            )));
        };
        let ckk = c * kh * kw;
        let ohw = oh * ow;
        let xd = self.data();
        let wd = weight.data();
        let mut out = vec![T::zero(); n * f * ohw];
        let mut col = vec![T::zero(); ckk * ohw];
        for i in 0..n {
            im2col(
                &xd[i * c * h * w..(i + 1) * c * h * w],
                c,
                h,
                w,
                kh,
                kw,
                stride,
                padding,
                oh,
                ow,
                &mut col,
            );
            matmul_nn(&wd, &col, f, ckk, ohw, &mut out[i * f * ohw..(i + 1) * f * ohw]);
        }
        drop(xd);
        drop(wd);
        let px = self.clone();
        let pw = weight.clone();
        let backward = Box::new(move |g: &[T]| {
            let xd = px.data();
            let wd = pw.data();
            let mut gx = if px.requires_grad() {
                Some(vec![T::zero(); n * c * h * w])
            } else {
                None
            };
            let mut gw = if pw.requires_grad() {
                Some(vec![T::zero(); f * ckk])
            } else {
                None
            };
            let mut col = vec![T::zero(); ckk * ohw];
            let mut dcol = vec![T::zero(); ckk * ohw];
            for i in 0..n {
                let gi = &g[i * f * ohw..(i + 1) * f * ohw];
                if gw.is_some() {
                    im2col(
                        &xd[i * c * h * w..(i + 1) * c * h * w],
                        c,
                        h,
                        w,
                        kh,
                        kw,
                        stride,
                        padding,
                        oh,
                        ow,
                        &mut col,
                    );
                    // dW += G · colᵀ
                    matmul_nt(gi, &col, f, ohw, ckk, gw.as_mut().unwrap());
                }
                if let Some(gx) = gx.as_mut() {
                    // dcol = Wᵀ · G, then scatter back
                    for v in dcol.iter_mut() {
                        *v = T::zero();
                    }
                    matmul_tn(&wd, gi, f, ckk, ohw, &mut dcol);
                    col2im_add(
                        &dcol,
                        c,
                        h,
                        w,
                        kh,
                        kw,
                        stride,
                        padding,
                        oh,
                        ow,
                        &mut gx[i * c * h * w..(i + 1) * c * h * w],
                    );
                }
            }
            vec![gx, gw]
        });
        Ok(Tensor::from_op(
            vec![n, f, oh, ow],
            out,
            vec![self.clone(), weight.clone()],
            backward,
        ))
    }

    /// Deterministic resampling of NCHW tensors by an integer factor.
    pub fn resample(&self, mode: ResampleMode, factor: usize) -> Result<Tensor<T>> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(Error::Shape(format!(
                "resample expects NCHW, got {:?}",
                xs
            )));
        }
        if factor == 0 {
            return Err(Error::InvalidParam("resample factor must be >= 1".to_string()));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        match mode {
            ResampleMode::AvgpoolDown => {
                if h % factor != 0 || w % factor != 0 {
                    return Err(Error::Shape(format!(
                        "spatial extents {}x{} not divisible by factor {}",
                        h, w, factor
                    )));
                }
                let (oh, ow) = (h / factor, w / factor);
                let inv = T::one() / T::from_f64((factor * factor) as f64);
                let xd = self.data();
                let mut out = vec![T::zero(); n * c * oh * ow];
                for nc in 0..n * c {
                    let src = &xd[nc * h * w..(nc + 1) * h * w];
                    let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut acc = T::zero();
                            for dy in 0..factor {
                                for dx in 0..factor {
                                    acc = acc + src[(oy * factor + dy) * w + ox * factor + dx];
                                }
                            }
                            dst[oy * ow + ox] = acc * inv;
                        }
                    }
                }
                drop(xd);
                let backward = Box::new(move |g: &[T]| {
                    let mut gx = vec![T::zero(); n * c * h * w];
                    for nc in 0..n * c {
                        let gsrc = &g[nc * oh * ow..(nc + 1) * oh * ow];
                        let gdst = &mut gx[nc * h * w..(nc + 1) * h * w];
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = gsrc[oy * ow + ox] * inv;
                                for dy in 0..factor {
                                    for dx in 0..factor {
                                        gdst[(oy * factor + dy) * w + ox * factor + dx] = gv;
                                    }
                                }
                            }
                        }
                    }
                    vec![Some(gx)]
                });
                Ok(Tensor::from_op(
                    vec![n, c, oh, ow],
                    out,
                    vec![self.clone()],
                    backward,
                ))
            }
            ResampleMode::NearestUp => {
                let (oh, ow) = (h * factor, w * factor);
                let xd = self.data();
                let mut out = vec![T::zero(); n * c * oh * ow];
                for nc in 0..n * c {
                    let src = &xd[nc * h * w..(nc + 1) * h * w];
                    let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = oy / factor;
                        for ox in 0..ow {
                            dst[oy * ow + ox] = src[iy * w + ox / factor];
                        }
                    }
                }
                drop(xd);
                let backward = Box::new(move |g: &[T]| {
                    let mut gx = vec![T::zero(); n * c * h * w];
                    for nc in 0..n * c {
                        let gsrc = &g[nc * oh * ow..(nc + 1) * oh * ow];
                        let gdst = &mut gx[nc * h * w..(nc + 1) * h * w];
                        for oy in 0..oh {
                            let iy = oy / factor;
                            for ox in 0..ow {
                                gdst[iy * w + ox / factor] =
                                    gdst[iy * w + ox / factor] + gsrc[oy * ow + ox];
                            }
                        }
                    }
                    vec![Some(gx)]
                });
                Ok(Tensor::from_op(
                    vec![n, c, oh, ow],
                    out,
                    vec![self.clone()],
                    backward,
                ))
            }
            ResampleMode::BilinearUp => {
                let (oh, ow) = (h * factor, w * factor);
                // align_corners=false source coordinates, clamped at edges
                let coords = |o: usize, f: usize, size: usize| -> (usize, usize, f64) {
                    let src = (o as f64 + 0.5) / f as f64 - 0.5;
                    let lo = src.floor();
                    let frac = src - lo;
                    let i0 = lo.max(0.0) as usize;
                    let i1 = (lo as isize + 1).clamp(0, size as isize - 1) as usize;
                    let frac = if lo < 0.0 { 0.0 } else { frac };
                    (i0.min(size - 1), i1, frac)
                };
                let ycoords: Vec<(usize, usize, f64)> =
                    (0..oh).map(|oy| coords(oy, factor, h)).collect();
                let xcoords: Vec<(usize, usize, f64)> =
                    (0..ow).map(|ox| coords(ox, factor, w)).collect();
                let xd = self.data();
                let mut out = vec![T::zero(); n * c * oh * ow];
                for nc in 0..n * c {
                    let src = &xd[nc * h * w..(nc + 1) * h * w];
                    let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
                    for oy in 0..oh {
                        let (y0, y1, fy) = ycoords[oy];
                        let fy = T::from_f64(fy);
                        for ox in 0..ow {
                            let (x0, x1, fx) = xcoords[ox];
                            let fx = T::from_f64(fx);
                            let one = T::one();
                            let v = src[y0 * w + x0] * (one - fy) * (one - fx)
                                + src[y0 * w + x1] * (one - fy) * fx
                                + src[y1 * w + x0] * fy * (one - fx)
                                + src[y1 * w + x1] * fy * fx;
                            dst[oy * ow + ox] = v;
                        }
                    }
                }
                drop(xd);
                let yc = ycoords.clone();
                let xc = xcoords.clone();
                let backward = Box::new(move |g: &[T]| {
                    let mut gx = vec![T::zero(); n * c * h * w];
                    for nc in 0..n * c {
                        let gsrc = &g[nc * oh * ow..(nc + 1) * oh * ow];
                        let gdst = &mut gx[nc * h * w..(nc + 1) * h * w];
                        for oy in 0..oh {
                            let (y0, y1, fy) = yc[oy];
                            let fy = T::from_f64(fy);
                            for ox in 0..ow {
                                let (x0, x1, fx) = xc[ox];
                                let fx = T::from_f64(fx);
                                let one = T::one();
                                let gv = gsrc[oy * ow + ox];
                                gdst[y0 * w + x0] = gdst[y0 * w + x0] + gv * (one - fy) * (one - fx);
                                gdst[y0 * w + x1] = gdst[y0 * w + x1] + gv * (one - fy) * fx;
                                gdst[y1 * w + x0] = gdst[y1 * w + x0] + gv * fy * (one - fx);
                                gdst[y1 * w + x1] = gdst[y1 * w + x1] + gv * fy * fx;
                            }
                        }
                    }
                    vec![Some(gx)]
                });
                Ok(Tensor::from_op(
                    vec![n, c, oh, ow],
                    out,
                    vec![self.clone()],
                    backward,
                ))
            }
        }
    }

    /// Nearest-neighbor resize to an arbitrary size. Only for constant
    /// tensors (label maps); refuses differentiable input.
    pub fn nearest_resize(&self, oh: usize, ow: usize) -> Result<Tensor<T>> {
        let xs = self.shape();
        if xs.len() != 4 {
            return Err(Error::Shape(format!("nearest_resize expects NCHW, got {:?}", xs)));
        }
        if self.requires_grad() {
            return Err(Error::InvalidParam(
                "nearest_resize is reserved for constant (label) tensors".to_string(),
            ));
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let xd = self.data();
        let mut out = vec![T::zero(); n * c * oh * ow];
        for nc in 0..n * c {
            let src = &xd[nc * h * w..(nc + 1) * h * w];
            let dst = &mut out[nc * oh * ow..(nc + 1) * oh * ow];
            for oy in 0..oh {
                let iy = oy * h / oh;
                for ox in 0..ow {
                    let ix = ox * w / ow;
                    dst[oy * ow + ox] = src[iy * w + ix];
                }
            }
        }
        drop(xd);
        Tensor::from_vec(&[n, c, oh, ow], out)
    }
}
