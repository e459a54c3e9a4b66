//! Raw forward/backward kernels for the spatial operators. All arrays are
//! NCHW, row-major.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub o: usize,
    pub kh: usize,
    pub kw: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        self.h + 2 * self.pad + 1 - self.kh
    }

    pub fn out_w(&self) -> usize {
        self.w + 2 * self.pad + 1 - self.kw
    }
}

/// Offset of `out + k - pad` if it lands inside `0..extent`.
#[inline]
fn tap(out: usize, k: usize, pad: usize, extent: usize) -> Option<usize> {
    let i = (out + k).checked_sub(pad)?;
    (i < extent).then_some(i)
}

pub(crate) fn conv2d_forward(g: &ConvGeom, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut out = vec![0.0; g.n * g.o * ho * wo];
    for n in 0..g.n {
        for o in 0..g.o {
            let plane = &mut out[(n * g.o + o) * ho * wo..(n * g.o + o + 1) * ho * wo];
            plane.fill(b[o]);
            for c in 0..g.c {
                let xin = &x[(n * g.c + c) * g.h * g.w..(n * g.c + c + 1) * g.h * g.w];
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let wv = w[((o * g.c + c) * g.kh + ki) * g.kw + kj];
                        for oy in 0..ho {
                            let Some(iy) = tap(oy, ki, g.pad, g.h) else {
                                continue;
                            };
                            for ox in 0..wo {
                                let Some(ix) = tap(ox, kj, g.pad, g.w) else {
                                    continue;
                                };
                                plane[oy * wo + ox] += wv * xin[iy * g.w + ix];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`.
pub(crate) fn conv2d_backward(
    g: &ConvGeom,
    x: &[f64],
    w: &[f64],
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (ho, wo) = (g.out_h(), g.out_w());
    let mut dx = vec![0.0; x.len()];
    let mut dw = vec![0.0; w.len()];
    let mut db = vec![0.0; g.o];
    for n in 0..g.n {
        for o in 0..g.o {
            let gp = &grad[(n * g.o + o) * ho * wo..(n * g.o + o + 1) * ho * wo];
            db[o] += gp.iter().sum::<f64>();
            for c in 0..g.c {
                let base = (n * g.c + c) * g.h * g.w;
                for ki in 0..g.kh {
                    for kj in 0..g.kw {
                        let widx = ((o * g.c + c) * g.kh + ki) * g.kw + kj;
                        let wv = w[widx];
                        let mut acc = 0.0;
                        for oy in 0..ho {
                            let Some(iy) = tap(oy, ki, g.pad, g.h) else {
                                continue;
                            };
                            for ox in 0..wo {
                                let Some(ix) = tap(ox, kj, g.pad, g.w) else {
                                    continue;
                                };
                                let gv = gp[oy * wo + ox];
                                acc += gv * x[base + iy * g.w + ix];
                                dx[base + iy * g.w + ix] += wv * gv;
                            }
                        }
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// 2x2 stride-2 max pool with floor semantics. Returns the pooled values and
/// the flat input index that won each window (first maximum on ties).
pub(crate) fn maxpool2_forward(
    x: &[f64],
    planes: usize,
    h: usize,
    w: usize,
) -> (Vec<f64>, Vec<usize>) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Vec::with_capacity(planes * ho * wo);
    let mut arg = Vec::with_capacity(planes * ho * wo);
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if x[idx] > x[best] {
                        best = idx;
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

/// Per-channel statistics over every axis except the channel axis.
pub(crate) fn channel_stats(x: &[f64], n: usize, c: usize, s: usize) -> (Vec<f64>, Vec<f64>) {
    let count = (n * s) as f64;
    let mut mean = vec![0.0; c];
    let mut var = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for b in 0..n {
            acc += x[(b * c + ch) * s..(b * c + ch + 1) * s]
                .iter()
                .sum::<f64>();
        }
        mean[ch] = acc / count;
        let mut sq = 0.0;
        for b in 0..n {
            for v in &x[(b * c + ch) * s..(b * c + ch + 1) * s] {
                let d = v - mean[ch];
                sq += d * d;
            }
        }
        var[ch] = sq / count;
    }
    (mean, var)
}
