use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayD, ArrayView2, ArrayViewMut2, IxDyn};

use crate::{Element, Var};

/// Stride and zero padding of a 2-d convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, padding: usize) -> Self {
        Self { stride, padding }
    }

    /// Stride 1 with the padding that preserves resolution for kernel `k`.
    pub const fn same(k: usize) -> Self {
        Self {
            stride: 1,
            padding: k / 2,
        }
    }

    pub fn out_size(&self, n: usize, k: usize) -> usize {
        (n + 2 * self.padding - k) / self.stride + 1
    }
}

#[derive(Clone, Copy)]
struct Geom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    pad: usize,
}

impl Geom {
    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }
}

fn im2col<T: Element>(x: &[T], g: &Geom, cols: &mut Array2<T>) {
    let out = cols.as_slice_mut().expect("contiguous im2col buffer");
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        let xc = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut out[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let src = &xc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        *d = if ix < 0 || ix >= g.w as isize {
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

fn col2im<T: Element>(cols: &Array2<T>, g: &Geom, dx: &mut [T]) {
    let src = cols.as_slice().expect("contiguous col buffer");
    let plane = g.ho * g.wo;
    for c in 0..g.c {
        let dxc = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let s = &src[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let drow = &mut dxc[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            drow[ix as usize] = drow[ix as usize] + s[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}

impl<'g, T: Element> Var<'g, T> {
    /// Cross-correlation of `[b, c, h, w]` input with `[o, c, kh, kw]`
    /// weights. No bias; add one with a broadcast `[1, o, 1, 1]` tensor.
    pub fn conv2d(self, weight: Var<'g, T>, spec: Conv2dSpec) -> Var<'g, T> {
        let x = self.value();
        let w = weight.value();
        let (xs, ws) = (x.shape(), w.shape());
        assert!(
            xs.len() == 4 && ws.len() == 4,
            "conv2d expects 4-d input and weight"
        );
        assert_eq!(
            xs[1], ws[1],
            "conv2d channel mismatch: input {xs:?} weight {ws:?}"
        );
        let (b, o) = (xs[0], ws[0]);
        let geom = Geom {
            c: xs[1],
            h: xs[2],
            w: xs[3],
            kh: ws[2],
            kw: ws[3],
            ho: spec.out_size(xs[2], ws[2]),
            wo: spec.out_size(xs[3], ws[3]),
            stride: spec.stride,
            pad: spec.padding,
        };
        let k = geom.c * geom.kh * geom.kw;
        let plane = geom.ho * geom.wo;
        let x = std::sync::Arc::new(x.as_standard_layout().into_owned());
        let w = std::sync::Arc::new(w.as_standard_layout().into_owned());
        let xsl = x.as_slice().unwrap();
        let w2 = ArrayView2::from_shape((o, k), w.as_slice().unwrap()).unwrap();
        let mut out = ArrayD::<T>::zeros(IxDyn(&[b, o, geom.ho, geom.wo]));
        {
            let osl = out.as_slice_mut().unwrap();
            let mut cols = Array2::<T>::zeros((k, plane));
            let in_stride = geom.c * geom.h * geom.w;
            for bi in 0..b {
                let xb = &xsl[bi * in_stride..(bi + 1) * in_stride];
                let mut ob = ArrayViewMut2::from_shape(
                    (o, plane),
                    &mut osl[bi * o * plane..(bi + 1) * o * plane],
                )
                .unwrap();
                if geom.is_pointwise() {
                    let xv = ArrayView2::from_shape((k, plane), xb).unwrap();
                    general_mat_mul(T::one(), &w2, &xv, T::zero(), &mut ob);
                } else {
                    im2col(xb, &geom, &mut cols);
                    general_mat_mul(T::one(), &w2, &cols, T::zero(), &mut ob);
                }
            }
        }
        let needs_x = self.requires_grad();
        let needs_w = weight.requires_grad();
        self.graph.record(&[self, weight], out, move |g| {
            let g = g.as_standard_layout();
            let gsl = g.as_slice().unwrap();
            let xsl = x.as_slice().unwrap();
            let w2 = ArrayView2::from_shape((o, k), w.as_slice().unwrap()).unwrap();
            let in_stride = geom.c * geom.h * geom.w;
            let mut dx = ArrayD::<T>::zeros(x.raw_dim());
            let mut dw = Array2::<T>::zeros((o, k));
            let mut cols = Array2::<T>::zeros((k, plane));
            let mut dcols = Array2::<T>::zeros((k, plane));
            for bi in 0..b {
                let gb =
                    ArrayView2::from_shape((o, plane), &gsl[bi * o * plane..(bi + 1) * o * plane])
                        .unwrap();
                let xb = &xsl[bi * in_stride..(bi + 1) * in_stride];
                if needs_w {
                    if geom.is_pointwise() {
                        let xv = ArrayView2::from_shape((k, plane), xb).unwrap();
                        general_mat_mul(T::one(), &gb, &xv.t(), T::one(), &mut dw);
                    } else {
                        im2col(xb, &geom, &mut cols);
                        general_mat_mul(T::one(), &gb, &cols.t(), T::one(), &mut dw);
                    }
                }
                if needs_x {
                    let dxs = dx.as_slice_mut().unwrap();
                    let dxb = &mut dxs[bi * in_stride..(bi + 1) * in_stride];
                    if geom.is_pointwise() {
                        let mut dv = ArrayViewMut2::from_shape((k, plane), dxb).unwrap();
                        general_mat_mul(T::one(), &w2.t(), &gb, T::zero(), &mut dv);
                    } else {
                        general_mat_mul(T::one(), &w2.t(), &gb, T::zero(), &mut dcols);
                        col2im(&dcols, &geom, dxb);
                    }
                }
            }
            let dw = dw
                .into_shape_with_order(IxDyn(&[o, geom.c, geom.kh, geom.kw]))
                .unwrap();
            vec![needs_x.then_some(dx), needs_w.then_some(dw)]
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;
    use ndarray::Array4;

    fn naive_conv(x: &Array4<f64>, w: &Array4<f64>, spec: Conv2dSpec) -> Array4<f64> {
        let (b, c, h, wd) = x.dim();
        let (o, _, kh, kw) = w.dim();
        let ho = spec.out_size(h, kh);
        let wo = spec.out_size(wd, kw);
        let mut out = Array4::zeros((b, o, ho, wo));
        for bi in 0..b {
            for oi in 0..o {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = 0.0;
                        for ci in 0..c {
                            for ki in 0..kh {
                                for kj in 0..kw {
                                    let iy =
                                        (oy * spec.stride + ki) as isize - spec.padding as isize;
                                    let ix =
                                        (ox * spec.stride + kj) as isize - spec.padding as isize;
                                    if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd
                                    {
                                        acc += x[[bi, ci, iy as usize, ix as usize]]
                                            * w[[oi, ci, ki, kj]];
                                    }
                                }
                            }
                        }
                        out[[bi, oi, oy, ox]] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn matches_naive_convolution() {
        for &(k, spec) in &[
            (3, Conv2dSpec::new(1, 1)),
            (3, Conv2dSpec::new(2, 1)),
            (7, Conv2dSpec::new(2, 3)),
            (1, Conv2dSpec::new(1, 0)),
            (1, Conv2dSpec::new(2, 0)),
        ] {
            let x = Array4::from_shape_fn((2, 3, 9, 8), |(a, b, c, d)| {
                ((a * 7 + b * 5 + c * 3 + d) as f64 * 0.37).sin()
            });
            let w = Array4::from_shape_fn((4, 3, k, k), |(a, b, c, d)| {
                ((a * 11 + b * 3 + c * 2 + d) as f64 * 0.53).cos()
            });
            let g = Graph::<f64>::new();
            let y = g
                .constant(x.clone().into_dyn())
                .conv2d(g.constant(w.clone().into_dyn()), spec);
            let expect = naive_conv(&x, &w, spec).into_dyn();
            assert_eq!(y.shape(), expect.shape());
            for (a, b) in y.value().iter().zip(expect.iter()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }
}
