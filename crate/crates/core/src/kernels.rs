//! Slice-level forward/backward kernels used by the graph.
//!
//! Every reduction runs in a fixed index order so that repeated runs are
//! bit-identical.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub ci: usize,
    pub co: usize,
    pub inp: [usize; 3],
    pub k: [usize; 3],
    pub out: [usize; 3],
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl ConvDims {
    fn in_vol(&self) -> usize {
        self.inp[0] * self.inp[1] * self.inp[2]
    }

    fn out_vol(&self) -> usize {
        self.out[0] * self.out[1] * self.out[2]
    }

    fn k_vol(&self) -> usize {
        self.k[0] * self.k[1] * self.k[2]
    }

    /// Output positions `[lo, hi)` along axis `a` whose input index
    /// `o * stride + k - pad` lands inside the input.
    fn valid(&self, a: usize, k: usize) -> (usize, usize) {
        let (s, p, ext, out) = (self.stride[a], self.pad[a], self.inp[a], self.out[a]);
        let lo = if p > k { (p - k).div_ceil(s) } else { 0 };
        let hi = if ext + p <= k {
            0
        } else {
            ((ext - 1 + p - k) / s + 1).min(out)
        };
        (lo, hi.max(lo))
    }
}

/// `floor((ext + 2p - k) / s) + 1`, or `None` when the padded extent is
/// smaller than the kernel.
pub(crate) fn out_extent(ext: usize, k: usize, s: usize, p: usize) -> Option<usize> {
    if s == 0 || ext + 2 * p < k {
        None
    } else {
        Some((ext + 2 * p - k) / s + 1)
    }
}

pub(crate) fn conv3d_forward(d: &ConvDims, x: &[f64], w: &[f64], b: Option<&[f64]>, y: &mut [f64]) {
    let (iv, ov, kv) = (d.in_vol(), d.out_vol(), d.k_vol());
    let [_, ih, iw] = d.inp;
    let [_, oh, ow] = d.out;
    let [st, sh, sw] = d.stride;
    let [pt, ph, pw] = d.pad;
    for n in 0..d.n {
        for co in 0..d.co {
            let plane = &mut y[(n * d.co + co) * ov..][..ov];
            let init = b.map_or(0.0, |b| b[co]);
            plane.iter_mut().for_each(|v| *v = init);
            for ci in 0..d.ci {
                let xin = &x[(n * d.ci + ci) * iv..][..iv];
                let wk = &w[(co * d.ci + ci) * kv..][..kv];
                for kt in 0..d.k[0] {
                    let (tlo, thi) = d.valid(0, kt);
                    for kh in 0..d.k[1] {
                        let (hlo, hhi) = d.valid(1, kh);
                        for kw in 0..d.k[2] {
                            let (wlo, whi) = d.valid(2, kw);
                            if wlo >= whi {
                                continue;
                            }
                            let wv = wk[(kt * d.k[1] + kh) * d.k[2] + kw];
                            for to in tlo..thi {
                                let ti = to * st + kt - pt;
                                for ho in hlo..hhi {
                                    let hi = ho * sh + kh - ph;
                                    let xrow = &xin[(ti * ih + hi) * iw..][..iw];
                                    let yrow = &mut plane[(to * oh + ho) * ow..][..ow];
                                    if sw == 1 {
                                        let off = wlo + kw - pw;
                                        for (yv, xv) in yrow[wlo..whi].iter_mut().zip(&xrow[off..]) {
                                            *yv += wv * xv;
                                        }
                                    } else {
                                        for wo in wlo..whi {
                                            yrow[wo] += wv * xrow[wo * sw + kw - pw];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn conv3d_backward(
    d: &ConvDims,
    x: &[f64],
    w: &[f64],
    gy: &[f64],
    mut gx: Option<&mut [f64]>,
    mut gw: Option<&mut [f64]>,
    gb: Option<&mut [f64]>,
) {
    let (iv, ov, kv) = (d.in_vol(), d.out_vol(), d.k_vol());
    let [_, ih, iw] = d.inp;
    let [_, oh, ow] = d.out;
    let [st, sh, sw] = d.stride;
    let [pt, ph, pw] = d.pad;
    if let Some(gb) = gb {
        for n in 0..d.n {
            for co in 0..d.co {
                gb[co] += gy[(n * d.co + co) * ov..][..ov].iter().sum::<f64>();
            }
        }
    }
    for n in 0..d.n {
        for co in 0..d.co {
            let gplane = &gy[(n * d.co + co) * ov..][..ov];
            for ci in 0..d.ci {
                let xoff = (n * d.ci + ci) * iv;
                let woff = (co * d.ci + ci) * kv;
                for kt in 0..d.k[0] {
                    let (tlo, thi) = d.valid(0, kt);
                    for kh in 0..d.k[1] {
                        let (hlo, hhi) = d.valid(1, kh);
                        for kw in 0..d.k[2] {
                            let (wlo, whi) = d.valid(2, kw);
                            if wlo >= whi {
                                continue;
                            }
                            let widx = woff + (kt * d.k[1] + kh) * d.k[2] + kw;
                            let wv = w[widx];
                            let mut acc = 0.0;
                            for to in tlo..thi {
                                let ti = to * st + kt - pt;
                                for ho in hlo..hhi {
                                    let hi = ho * sh + kh - ph;
                                    let row = xoff + (ti * ih + hi) * iw;
                                    let grow = &gplane[(to * oh + ho) * ow..][..ow];
                                    if gw.is_some() {
                                        let xrow = &x[row..][..iw];
                                        for wo in wlo..whi {
                                            acc += xrow[wo * sw + kw - pw] * grow[wo];
                                        }
                                    }
                                    if let Some(gx) = gx.as_deref_mut() {
                                        let gxrow = &mut gx[row..][..iw];
                                        if sw == 1 {
                                            let off = wlo + kw - pw;
                                            for (g, gyv) in gxrow[off..].iter_mut().zip(&grow[wlo..whi]) {
                                                *g += wv * gyv;
                                            }
                                        } else {
                                            for wo in wlo..whi {
                                                gxrow[wo * sw + kw - pw] += wv * grow[wo];
                                            }
                                        }
                                    }
                                }
                            }
                            if let Some(gw) = gw.as_deref_mut() {
                                gw[widx] += acc;
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Max pooling over (T, H, W) with implicit -inf padding. Returns the flat
/// input index chosen for each output element (first maximum wins).
pub(crate) fn max_pool3d_forward(d: &ConvDims, x: &[f64], y: &mut [f64]) -> alloc::vec::Vec<usize> {
    let (iv, ov) = (d.in_vol(), d.out_vol());
    let [it, ih, iw] = d.inp;
    let [ot, oh, ow] = d.out;
    let mut arg = alloc::vec![0usize; y.len()];
    for nc in 0..d.n * d.ci {
        for to in 0..ot {
            for ho in 0..oh {
                for wo in 0..ow {
                    let oi = nc * ov + (to * oh + ho) * ow + wo;
                    let mut best = f64::NEG_INFINITY;
                    let mut best_i = usize::MAX;
                    for kt in 0..d.k[0] {
                        let ti = (to * d.stride[0] + kt) as isize - d.pad[0] as isize;
                        if ti < 0 || ti >= it as isize {
                            continue;
                        }
                        for kh in 0..d.k[1] {
                            let hi = (ho * d.stride[1] + kh) as isize - d.pad[1] as isize;
                            if hi < 0 || hi >= ih as isize {
                                continue;
                            }
                            for kw in 0..d.k[2] {
                                let wi = (wo * d.stride[2] + kw) as isize - d.pad[2] as isize;
                                if wi < 0 || wi >= iw as isize {
                                    continue;
                                }
                                let ii = nc * iv + ((ti as usize) * ih + hi as usize) * iw + wi as usize;
                                if best_i == usize::MAX || x[ii] > best {
                                    best = x[ii];
                                    best_i = ii;
                                }
                            }
                        }
                    }
                    y[oi] = best;
                    arg[oi] = best_i;
                }
            }
        }
    }
    arg
}

/// (N, C, T, H, W) -> (N, T, C), mean over H*W.
pub(crate) fn spatial_avg_pool(x: &[f64], n: usize, c: usize, t: usize, hw: usize, y: &mut [f64]) {
    let inv = 1.0 / hw as f64;
    for ni in 0..n {
        for ci in 0..c {
            for ti in 0..t {
                let s: f64 = x[((ni * c + ci) * t + ti) * hw..][..hw].iter().sum();
                y[(ni * t + ti) * c + ci] = s * inv;
            }
        }
    }
}

pub(crate) fn spatial_avg_pool_backward(gy: &[f64], n: usize, c: usize, t: usize, hw: usize, gx: &mut [f64]) {
    let inv = 1.0 / hw as f64;
    for ni in 0..n {
        for ci in 0..c {
            for ti in 0..t {
                let g = gy[(ni * t + ti) * c + ci] * inv;
                gx[((ni * c + ci) * t + ti) * hw..][..hw].iter_mut().for_each(|v| *v += g);
            }
        }
    }
}

pub(crate) struct BnStats {
    pub mean: alloc::vec::Vec<f64>,
    pub var: alloc::vec::Vec<f64>,
}

/// Per-channel biased mean and variance over (N, spatial) of an
/// (N, C, spatial) layout.
pub(crate) fn bn_stats(x: &[f64], n: usize, c: usize, inner: usize) -> BnStats {
    let m = (n * inner) as f64;
    let mut mean = alloc::vec![0.0; c];
    let mut var = alloc::vec![0.0; c];
    for ci in 0..c {
        let mut s = 0.0;
        for ni in 0..n {
            s += x[(ni * c + ci) * inner..][..inner].iter().sum::<f64>();
        }
        let mu = s / m;
        let mut v = 0.0;
        for ni in 0..n {
            v += x[(ni * c + ci) * inner..][..inner]
                .iter()
                .map(|a| (a - mu) * (a - mu))
                .sum::<f64>();
        }
        mean[ci] = mu;
        var[ci] = v / m;
    }
    BnStats { mean, var }
}
