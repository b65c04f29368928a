use super::Real;

/// Geometry shared by convolution and its transpose.
///
/// `channels × height × width` is the dense image side; `out_h × out_w` is
/// the strided side. For a transposed convolution the image side is the
/// (larger) output and the strided side is the input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn rows(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    #[inline]
    fn source(&self, o: usize, k: usize, extent: usize) -> Option<usize> {
        let i = (o * self.stride + k) as isize - self.pad as isize;
        (i >= 0 && (i as usize) < extent).then_some(i as usize)
    }

    /// Output positions `lo..hi` whose tap `k` lands inside `0..extent`.
    #[inline]
    fn valid(&self, k: usize, extent: usize, out: usize) -> (usize, usize) {
        let lo = if k >= self.pad { 0 } else { (self.pad - k).div_ceil(self.stride) };
        let hi = if extent + self.pad > k {
            ((extent + self.pad - k - 1) / self.stride + 1).min(out)
        } else {
            0
        };
        (lo.min(hi), hi)
    }
}

pub(crate) fn im2col<T: Real>(g: &ConvGeom, img: &[T], cols: &mut [T]) {
    im2col_ld(g, img, cols, g.cols());
}

/// [`im2col`] writing row `r` at `cols[r·ld..]`, so several images can sit
/// side by side in one `[rows, batch·ncols]` matrix.
pub(crate) fn im2col_ld<T: Real>(g: &ConvGeom, img: &[T], cols: &mut [T], ld: usize) {
    let ncols = g.cols();
    for c in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * ld..row * ld + ncols];
                for oy in 0..g.out_h {
                    let drow = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let Some(iy) = g.source(oy, ky, g.height) else {
                        drow.fill(T::zero());
                        continue;
                    };
                    let src = &img[(c * g.height + iy) * g.width..][..g.width];
                    let (lo, hi) = g.valid(kx, g.width, g.out_w);
                    drow[..lo].fill(T::zero());
                    drow[hi..].fill(T::zero());
                    if lo < hi {
                        let first = lo * g.stride + kx - g.pad;
                        for (j, d) in drow[lo..hi].iter_mut().enumerate() {
                            *d = src[first + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im_add<T: Real>(g: &ConvGeom, cols: &[T], img: &mut [T]) {
    col2im_add_ld(g, cols, img, g.cols());
}

pub(crate) fn col2im_add_ld<T: Real>(g: &ConvGeom, cols: &[T], img: &mut [T], ld: usize) {
    let ncols = g.cols();
    for c in 0..g.channels {
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let srcrow = &cols[row * ld..row * ld + ncols];
                for oy in 0..g.out_h {
                    let Some(iy) = g.source(oy, ky, g.height) else {
                        continue;
                    };
                    let dst = &mut img[(c * g.height + iy) * g.width..][..g.width];
                    let s = &srcrow[oy * g.out_w..(oy + 1) * g.out_w];
                    let (lo, hi) = g.valid(kx, g.width, g.out_w);
                    if lo < hi {
                        let first = lo * g.stride + kx - g.pad;
                        for (j, &v) in s[lo..hi].iter().enumerate() {
                            dst[first + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn valid_range_matches_per_position_check() {
        for stride in 1..4 {
            for pad in 0..4 {
                for k in 0..5 {
                    for extent in 1..9 {
                        for out in 0..8 {
                            let g = ConvGeom {
                                channels: 1,
                                height: extent,
                                width: extent,
                                kh: 5,
                                kw: 5,
                                stride,
                                pad,
                                out_h: out,
                                out_w: out,
                            };
                            let want: Vec<usize> = (0..out).filter(|&o| g.source(o, k, extent).is_some()).collect();
                            let (lo, hi) = g.valid(k, extent, out);
                            assert_eq!((lo..hi).collect::<Vec<_>>(), want, "s{stride} p{pad} k{k} e{extent} o{out}");
                        }
                    }
                }
            }
        }
    }

    // <im2col(x), c> == <x, col2im(c)> for random x, c.
    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom {
            channels: 2,
            height: 6,
            width: 5,
            kh: 4,
            kw: 4,
            stride: 2,
            pad: 1,
            out_h: 3,
            out_w: 2,
        };
        let x: Vec<f64> = (0..g.image_len()).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let c: Vec<f64> = (0..g.rows() * g.cols()).map(|i| ((i * 5) % 13) as f64 - 6.0).collect();
        let mut cols = vec![0.0; c.len()];
        im2col(&g, &x, &mut cols);
        let mut back = vec![0.0; x.len()];
        col2im_add(&g, &c, &mut back);
        let lhs: f64 = cols.iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }
}
