use crate::error::{Error, Result};

/// Resolved geometry of one conv2d call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvGeom {
    pub fn resolve(x: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let [n, cin, h, w] = x[..] else {
            return Err(Error::shape(format!("conv2d input must be N x C x H x W, got {x:?}")));
        };
        let [cout, wcin, kh, kw] = weight[..] else {
            return Err(Error::shape(format!(
                "conv2d weight must be Cout x Cin x k x k, got {weight:?}"
            )));
        };
        if kh != kw {
            return Err(Error::shape(format!("conv2d kernel must be square, got {kh}x{kw}")));
        }
        if kh != 1 && kh != 3 {
            return Err(Error::UnsupportedKernel(kh));
        }
        if wcin != cin {
            return Err(Error::shape(format!(
                "conv2d input has {cin} channels but weight {weight:?} expects {wcin}"
            )));
        }
        if stride == 0 {
            return Err(Error::domain("conv2d stride must be positive"));
        }
        let k = kh;
        if h + 2 * pad < k || w + 2 * pad < k {
            return Err(Error::shape(format!(
                "kernel {k}x{k} larger than padded input {}x{} (input {x:?}, pad {pad})",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        Ok(Self {
            n,
            cin,
            h,
            w,
            cout,
            k,
            stride,
            pad,
            ho: (h + 2 * pad - k) / stride + 1,
            wo: (w + 2 * pad - k) / stride + 1,
        })
    }

    pub fn patch_len(&self) -> usize {
        self.cin * self.k * self.k
    }

    pub fn out_plane(&self) -> usize {
        self.ho * self.wo
    }

    pub fn in_sample(&self) -> usize {
        self.cin * self.h * self.w
    }

    /// 1x1, stride 1, no padding: the input plane already is the column matrix.
    pub fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    /// Source offset inside one input sample for column row `row`, output position `(oy, ox)`.
    #[inline]
    fn source(&self, c: usize, ky: usize, kx: usize, oy: usize, ox: usize) -> Option<usize> {
        let iy = (oy * self.stride + ky).checked_sub(self.pad)?;
        let ix = (ox * self.stride + kx).checked_sub(self.pad)?;
        (iy < self.h && ix < self.w).then(|| (c * self.h + iy) * self.w + ix)
    }
}

/// Unfolds one input sample into a `(Cin*k*k) x (Ho*Wo)` column matrix.
pub(crate) fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        dst[oy * g.wo + ox] = match g.source(c, ky, kx, oy, ox) {
                            Some(i) => x[i],
                            None => 0.0,
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters column gradients back onto one input sample.
pub(crate) fn col2im(g: &ConvGeom, col: &[f64], dx: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        for ky in 0..g.k {
            for kx in 0..g.k {
                let row = (c * g.k + ky) * g.k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    for ox in 0..g.wo {
                        if let Some(i) = g.source(c, ky, kx, oy, ox) {
                            dx[i] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}
