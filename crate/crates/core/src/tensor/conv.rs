//! Dense convolution / pooling / resampling kernels.
//!
//! Plain nested loops over slices. Parallel splits always own disjoint output
//! regions and keep a fixed sequential reduction order inside each region, so
//! results do not depend on the thread count.

use rayon::prelude::*;

#[inline]
fn in_range(v: isize, hi: usize) -> Option<usize> {
    if v >= 0 && (v as usize) < hi {
        Some(v as usize)
    } else {
        None
    }
}

pub fn conv2d_out_shape(
    xs: [usize; 4],
    ws: [usize; 4],
    stride: (usize, usize),
    pad: (usize, usize),
) -> [usize; 4] {
    let ho = (xs[2] + 2 * pad.0 - ws[2]) / stride.0 + 1;
    let wo = (xs[3] + 2 * pad.1 - ws[3]) / stride.1 + 1;
    [xs[0], ws[0], ho, wo]
}

pub fn conv2d_forward(
    x: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    stride: (usize, usize),
    pad: (usize, usize),
) -> Vec<f64> {
    let [n, ci, h, wd] = xs;
    let [co, _, kh, kw] = ws;
    let os = conv2d_out_shape(xs, ws, stride, pad);
    let (ho, wo) = (os[2], os[3]);
    let mut out = vec![0.0f64; n * co * ho * wo];
    out.par_chunks_mut(ho * wo).enumerate().for_each(|(nc, plane)| {
        let nn = nc / co;
        let c = nc % co;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = 0.0;
                for ic in 0..ci {
                    let xbase = (nn * ci + ic) * h * wd;
                    let wbase = (c * ci + ic) * kh * kw;
                    for ky in 0..kh {
                        let iy = match in_range((oy * stride.0 + ky) as isize - pad.0 as isize, h) {
                            Some(v) => v,
                            None => continue,
                        };
                        for kx in 0..kw {
                            let ix = match in_range(
                                (ox * stride.1 + kx) as isize - pad.1 as isize,
                                wd,
                            ) {
                                Some(v) => v,
                                None => continue,
                            };
                            acc += x[xbase + iy * wd + ix] * w[wbase + ky * kw + kx];
                        }
                    }
                }
                plane[oy * wo + ox] = acc;
            }
        }
    });
    out
}

pub fn conv2d_backward_x(
    gy: &[f64],
    xs: [usize; 4],
    w: &[f64],
    ws: [usize; 4],
    stride: (usize, usize),
    pad: (usize, usize),
    dx: &mut [f64],
) {
    let [_n, ci, h, wd] = xs;
    let [co, _, kh, kw] = ws;
    let os = conv2d_out_shape(xs, ws, stride, pad);
    let (ho, wo) = (os[2], os[3]);
    dx.par_chunks_mut(h * wd).enumerate().for_each(|(nc, plane)| {
        let nn = nc / ci;
        let ic = nc % ci;
        for c in 0..co {
            let gbase = (nn * co + c) * ho * wo;
            let wbase = (c * ci + ic) * kh * kw;
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = gy[gbase + oy * wo + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for ky in 0..kh {
                        let iy = match in_range((oy * stride.0 + ky) as isize - pad.0 as isize, h) {
                            Some(v) => v,
                            None => continue,
                        };
                        for kx in 0..kw {
                            let ix = match in_range(
                                (ox * stride.1 + kx) as isize - pad.1 as isize,
                                wd,
                            ) {
                                Some(v) => v,
                                None => continue,
                            };
                            plane[iy * wd + ix] += w[wbase + ky * kw + kx] * g;
                        }
                    }
                }
            }
        }
    });
}

pub fn conv2d_backward_w(
    gy: &[f64],
    x: &[f64],
    xs: [usize; 4],
    ws: [usize; 4],
    stride: (usize, usize),
    pad: (usize, usize),
    dw: &mut [f64],
) {
    let [n, ci, h, wd] = xs;
    let [co, _, kh, kw] = ws;
    let os = conv2d_out_shape(xs, ws, stride, pad);
    let (ho, wo) = (os[2], os[3]);
    dw.par_chunks_mut(ci * kh * kw).enumerate().for_each(|(c, wslice)| {
        for nn in 0..n {
            let gbase = (nn * co + c) * ho * wo;
            for oy in 0..ho {
                for ox in 0..wo {
                    let g = gy[gbase + oy * wo + ox];
                    if g == 0.0 {
                        continue;
                    }
                    for ic in 0..ci {
                        let xbase = (nn * ci + ic) * h * wd;
                        for ky in 0..kh {
                            let iy = match in_range(
                                (oy * stride.0 + ky) as isize - pad.0 as isize,
                                h,
                            ) {
                                Some(v) => v,
                                None => continue,
                            };
                            for kx in 0..kw {
                                let ix = match in_range(
                                    (ox * stride.1 + kx) as isize - pad.1 as isize,
                                    wd,
                                ) {
                                    Some(v) => v,
                                    None => continue,
                                };
                                wslice[(ic * kh + ky) * kw + kx] += x[xbase + iy * wd + ix] * g;
                            }
                        }
                    }
                }
            }
        }
    });
}

pub fn conv3d_out_shape(
    xs: [usize; 5],
    ws: [usize; 5],
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
) -> [usize; 5] {
    let d_o = (xs[2] + 2 * pad.0 - ws[2]) / stride.0 + 1;
    let ho = (xs[3] + 2 * pad.1 - ws[3]) / stride.1 + 1;
    let wo = (xs[4] + 2 * pad.2 - ws[4]) / stride.2 + 1;
    [xs[0], ws[0], d_o, ho, wo]
}

pub fn conv3d_forward(
    x: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
) -> Vec<f64> {
    let [n, ci, d, h, wd] = xs;
    let [co, _, kd, kh, kw] = ws;
    let os = conv3d_out_shape(xs, ws, stride, pad);
    let (d_o, ho, wo) = (os[2], os[3], os[4]);
    let mut out = vec![0.0f64; n * co * d_o * ho * wo];
    out.par_chunks_mut(d_o * ho * wo).enumerate().for_each(|(nc, vol)| {
        let nn = nc / co;
        let c = nc % co;
        for od in 0..d_o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ic in 0..ci {
                        let xbase = ((nn * ci + ic) * d) * h * wd;
                        let wbase = ((c * ci + ic) * kd) * kh * kw;
                        for zd in 0..kd {
                            let id = match in_range(
                                (od * stride.0 + zd) as isize - pad.0 as isize,
                                d,
                            ) {
                                Some(v) => v,
                                None => continue,
                            };
                            for ky in 0..kh {
                                let iy = match in_range(
                                    (oy * stride.1 + ky) as isize - pad.1 as isize,
                                    h,
                                ) {
                                    Some(v) => v,
                                    None => continue,
                                };
                                for kx in 0..kw {
                                    let ix = match in_range(
                                        (ox * stride.2 + kx) as isize - pad.2 as isize,
                                        wd,
                                    ) {
                                        Some(v) => v,
                                        None => continue,
                                    };
                                    acc += x[xbase + (id * h + iy) * wd + ix]
                                        * w[wbase + (zd * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                    vol[(od * ho + oy) * wo + ox] = acc;
                }
            }
        }
    });
    out
}

pub fn conv3d_backward_x(
    gy: &[f64],
    xs: [usize; 5],
    w: &[f64],
    ws: [usize; 5],
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
    dx: &mut [f64],
) {
    let [_n, ci, d, h, wd] = xs;
    let [co, _, kd, kh, kw] = ws;
    let os = conv3d_out_shape(xs, ws, stride, pad);
    let (d_o, ho, wo) = (os[2], os[3], os[4]);
    dx.par_chunks_mut(d * h * wd).enumerate().for_each(|(nc, vol)| {
        let nn = nc / ci;
        let ic = nc % ci;
        for c in 0..co {
            let gbase = ((nn * co + c) * d_o) * ho * wo;
            let wbase = ((c * ci + ic) * kd) * kh * kw;
            for od in 0..d_o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = gy[gbase + (od * ho + oy) * wo + ox];
                        if g == 0.0 {
                            continue;
                        }
                        for zd in 0..kd {
                            let id = match in_range(
                                (od * stride.0 + zd) as isize - pad.0 as isize,
                                d,
                            ) {
                                Some(v) => v,
                                None => continue,
                            };
                            for ky in 0..kh {
                                let iy = match in_range(
                                    (oy * stride.1 + ky) as isize - pad.1 as isize,
                                    h,
                                ) {
                                    Some(v) => v,
                                    None => continue,
                                };
                                for kx in 0..kw {
                                    let ix = match in_range(
                                        (ox * stride.2 + kx) as isize - pad.2 as isize,
                                        wd,
                                    ) {
                                        Some(v) => v,
                                        None => continue,
                                    };
                                    vol[(id * h + iy) * wd + ix] +=
                                        w[wbase + (zd * kh + ky) * kw + kx] * g;
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

pub fn conv3d_backward_w(
    gy: &[f64],
    x: &[f64],
    xs: [usize; 5],
    ws: [usize; 5],
    stride: (usize, usize, usize),
    pad: (usize, usize, usize),
    dw: &mut [f64],
) {
    let [n, ci, d, h, wd] = xs;
    let [co, _, kd, kh, kw] = ws;
    let os = conv3d_out_shape(xs, ws, stride, pad);
    let (d_o, ho, wo) = (os[2], os[3], os[4]);
    dw.par_chunks_mut(ci * kd * kh * kw).enumerate().for_each(|(c, wslice)| {
        for nn in 0..n {
            let gbase = ((nn * co + c) * d_o) * ho * wo;
            for od in 0..d_o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let g = gy[gbase + (od * ho + oy) * wo + ox];
                        if g == 0.0 {
                            continue;
                        }
                        for ic in 0..ci {
                            let xbase = ((nn * ci + ic) * d) * h * wd;
                            for zd in 0..kd {
                                let id = match in_range(
                                    (od * stride.0 + zd) as isize - pad.0 as isize,
                                    d,
                                ) {
                                    Some(v) => v,
                                    None => continue,
                                };
                                for ky in 0..kh {
                                    let iy = match in_range(
                                        (oy * stride.1 + ky) as isize - pad.1 as isize,
                                        h,
                                    ) {
                                        Some(v) => v,
                                        None => continue,
                                    };
                                    for kx in 0..kw {
                                        let ix = match in_range(
                                            (ox * stride.2 + kx) as isize - pad.2 as isize,
                                            wd,
                                        ) {
                                            Some(v) => v,
                                            None => continue,
                                        };
                                        wslice[((ic * kd + zd) * kh + ky) * kw + kx] +=
                                            x[xbase + (id * h + iy) * wd + ix] * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    });
}

pub fn maxpool3d_out_shape(
    xs: [usize; 5],
    window: (usize, usize, usize),
    stride: (usize, usize, usize),
) -> [usize; 5] {
    let d_o = (xs[2] - window.0) / stride.0 + 1;
    let ho = (xs[3] - window.1) / stride.1 + 1;
    let wo = (xs[4] - window.2) / stride.2 + 1;
    [xs[0], xs[1], d_o, ho, wo]
}

/// Forward max pooling; returns output values and the flat input index of
/// each selected maximum. Ties resolve to the first element in (d, h, w) scan
/// order.
pub fn maxpool3d_forward(
    x: &[f64],
    xs: [usize; 5],
    window: (usize, usize, usize),
    stride: (usize, usize, usize),
) -> (Vec<f64>, Vec<usize>) {
    let [n, c, d, h, wd] = xs;
    let os = maxpool3d_out_shape(xs, window, stride);
    let (d_o, ho, wo) = (os[2], os[3], os[4]);
    let plane_out = d_o * ho * wo;
    let mut out = vec![0.0f64; n * c * plane_out];
    let mut arg = vec![0usize; n * c * plane_out];
    out.par_chunks_mut(plane_out)
        .zip(arg.par_chunks_mut(plane_out))
        .enumerate()
        .for_each(|(nc, (vals, args))| {
            let xbase = nc * d * h * wd;
            for od in 0..d_o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = f64::NEG_INFINITY;
                        let mut best_idx = 0usize;
                        for zd in 0..window.0 {
                            let id = od * stride.0 + zd;
                            for ky in 0..window.1 {
                                let iy = oy * stride.1 + ky;
                                for kx in 0..window.2 {
                                    let ix = ox * stride.2 + kx;
                                    let idx = xbase + (id * h + iy) * wd + ix;
                                    let v = x[idx];
                                    if v > best {
                                        best = v;
                                        best_idx = idx;
                                    }
                                }
                            }
                        }
                        vals[(od * ho + oy) * wo + ox] = best;
                        args[(od * ho + oy) * wo + ox] = best_idx;
                    }
                }
            }
        });
    (out, arg)
}

pub fn bilinear_resize_forward(
    x: &[f64],
    xs: [usize; 4],
    out_h: usize,
    out_w: usize,
) -> Vec<f64> {
    let [n, c, h, w] = xs;
    let mut out = vec![0.0f64; n * c * out_h * out_w];
    out.par_chunks_mut(out_h * out_w).enumerate().for_each(|(nc, plane)| {
        let xplane = &x[nc * h * w..(nc + 1) * h * w];
        for oy in 0..out_h {
            let sy = ((oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5)
                .clamp(0.0, (h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for ox in 0..out_w {
                let sx = ((ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5)
                    .clamp(0.0, (w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                plane[oy * out_w + ox] = xplane[y0 * w + x0] * (1.0 - fx) * (1.0 - fy)
                    + xplane[y0 * w + x1] * fx * (1.0 - fy)
                    + xplane[y1 * w + x0] * (1.0 - fx) * fy
                    + xplane[y1 * w + x1] * fx * fy;
            }
        }
    });
    out
}

pub fn bilinear_resize_backward(
    gy: &[f64],
    xs: [usize; 4],
    out_h: usize,
    out_w: usize,
    dx: &mut [f64],
) {
    let [_, _, h, w] = xs;
    dx.par_chunks_mut(h * w).enumerate().for_each(|(nc, plane)| {
        let gplane = &gy[nc * out_h * out_w..(nc + 1) * out_h * out_w];
        for oy in 0..out_h {
            let sy = ((oy as f64 + 0.5) * h as f64 / out_h as f64 - 0.5)
                .clamp(0.0, (h - 1) as f64);
            let y0 = sy.floor() as usize;
            let y1 = (y0 + 1).min(h - 1);
            let fy = sy - y0 as f64;
            for ox in 0..out_w {
                let sx = ((ox as f64 + 0.5) * w as f64 / out_w as f64 - 0.5)
                    .clamp(0.0, (w - 1) as f64);
                let x0 = sx.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let fx = sx - x0 as f64;
                let g = gplane[oy * out_w + ox];
                plane[y0 * w + x0] += g * (1.0 - fx) * (1.0 - fy);
                plane[y0 * w + x1] += g * fx * (1.0 - fy);
                plane[y1 * w + x0] += g * (1.0 - fx) * fy;
                plane[y1 * w + x1] += g * fx * fy;
            }
        }
    });
}
