use ndarray::{ArrayD, IxDyn};

use crate::{Element, Var};

fn dims4(shape: &[usize], op: &str) -> (usize, usize, usize, usize) {
    assert_eq!(shape.len(), 4, "{op} expects [b, c, h, w], got {shape:?}");
    (shape[0], shape[1], shape[2], shape[3])
}

impl<'g, T: Element> Var<'g, T> {
    /// Max pooling with implicit `-inf` padding.
    pub fn max_pool2d(self, kernel: usize, stride: usize, padding: usize) -> Var<'g, T> {
        let x = self.value();
        let x = x.as_standard_layout();
        let (b, c, h, w) = dims4(x.shape(), "max_pool2d");
        let ho = (h + 2 * padding - kernel) / stride + 1;
        let wo = (w + 2 * padding - kernel) / stride + 1;
        let xs = x.as_slice().unwrap();
        let mut out = ArrayD::<T>::zeros(IxDyn(&[b, c, ho, wo]));
        let mut argmax = vec![0usize; b * c * ho * wo];
        {
            let os = out.as_slice_mut().unwrap();
            for plane in 0..b * c {
                let base = plane * h * w;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = T::neg_infinity();
                        let mut at = base;
                        for ky in 0..kernel {
                            let iy = (oy * stride + ky) as isize - padding as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kernel {
                                let ix = (ox * stride + kx) as isize - padding as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let idx = base + iy as usize * w + ix as usize;
                                if xs[idx] > best {
                                    best = xs[idx];
                                    at = idx;
                                }
                            }
                        }
                        let o = (plane * ho + oy) * wo + ox;
                        os[o] = best;
                        argmax[o] = at;
                    }
                }
            }
        }
        let in_shape = x.raw_dim();
        self.graph.record(&[self], out, move |g| {
            let g = g.as_standard_layout();
            let mut dx = ArrayD::<T>::zeros(in_shape.clone());
            let ds = dx.as_slice_mut().unwrap();
            for (o, &gv) in g.as_slice().unwrap().iter().enumerate() {
                ds[argmax[o]] = ds[argmax[o]] + gv;
            }
            vec![Some(dx)]
        })
    }

    /// Mean over non-overlapping `factor x factor` blocks. Trailing rows or
    /// columns that do not fill a block are dropped.
    pub fn avg_pool(self, factor: usize) -> Var<'g, T> {
        let x = self.value();
        let x = x.as_standard_layout();
        let (b, c, h, w) = dims4(x.shape(), "avg_pool");
        let (ho, wo) = (h / factor, w / factor);
        let norm = T::one() / T::of((factor * factor) as f64);
        let xs = x.as_slice().unwrap();
        let mut out = ArrayD::<T>::zeros(IxDyn(&[b, c, ho, wo]));
        {
            let os = out.as_slice_mut().unwrap();
            for plane in 0..b * c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = T::zero();
                        for ky in 0..factor {
                            let row = plane * h * w + (oy * factor + ky) * w + ox * factor;
                            for kx in 0..factor {
                                acc = acc + xs[row + kx];
                            }
                        }
                        os[(plane * ho + oy) * wo + ox] = acc * norm;
                    }
                }
            }
        }
        let in_shape = x.raw_dim();
        self.graph.record(&[self], out, move |g| {
            let g = g.as_standard_layout();
            let gs = g.as_slice().unwrap();
            let mut dx = ArrayD::<T>::zeros(in_shape.clone());
            let ds = dx.as_slice_mut().unwrap();
            for plane in 0..b * c {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let gv = gs[(plane * ho + oy) * wo + ox] * norm;
                        for ky in 0..factor {
                            let row = plane * h * w + (oy * factor + ky) * w + ox * factor;
                            for kx in 0..factor {
                                ds[row + kx] = gv;
                            }
                        }
                    }
                }
            }
            vec![Some(dx)]
        })
    }

    /// Nearest-neighbour upsampling by an integer factor.
    pub fn upsample_nearest(self, factor: usize) -> Var<'g, T> {
        let x = self.value();
        let x = x.as_standard_layout();
        let (b, c, h, w) = dims4(x.shape(), "upsample_nearest");
        let (ho, wo) = (h * factor, w * factor);
        let xs = x.as_slice().unwrap();
        let mut out = ArrayD::<T>::zeros(IxDyn(&[b, c, ho, wo]));
        {
            let os = out.as_slice_mut().unwrap();
            for plane in 0..b * c {
                for oy in 0..ho {
                    let src = &xs[plane * h * w + (oy / factor) * w..][..w];
                    let dst = &mut os[(plane * ho + oy) * wo..][..wo];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        *d = src[ox / factor];
                    }
                }
            }
        }
        let in_shape = x.raw_dim();
        self.graph.record(&[self], out, move |g| {
            let g = g.as_standard_layout();
            let gs = g.as_slice().unwrap();
            let mut dx = ArrayD::<T>::zeros(in_shape.clone());
            let ds = dx.as_slice_mut().unwrap();
            for plane in 0..b * c {
                for oy in 0..ho {
                    let row = &gs[(plane * ho + oy) * wo..][..wo];
                    let drow = &mut ds[plane * h * w + (oy / factor) * w..][..w];
                    for (ox, &gv) in row.iter().enumerate() {
                        drow[ox / factor] = drow[ox / factor] + gv;
                    }
                }
            }
            vec![Some(dx)]
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::Graph;
    use ndarray::{Array4, ArrayD, IxDyn};

    #[test]
    fn max_pool_routes_gradient_to_argmax() {
        let g = Graph::<f64>::new();
        let x = Array4::from_shape_fn((1, 1, 4, 4), |(_, _, i, j)| (i * 4 + j) as f64);
        let xv = g.leaf(x.into_dyn());
        let y = xv.max_pool2d(2, 2, 0);
        assert_eq!(
            y.value().iter().copied().collect::<Vec<_>>(),
            vec![5.0, 7.0, 13.0, 15.0]
        );
        let grads = g.backward(y.sum());
        assert_eq!(grads.wrt(xv).sum(), 4.0);
        assert_eq!(grads.wrt(xv)[[0, 0, 1, 1]], 1.0);
    }

    #[test]
    fn avg_pool_then_upsample_preserves_constant() {
        let g = Graph::<f32>::new();
        let x = g.leaf(ArrayD::from_elem(IxDyn(&[1, 2, 4, 4]), 3.0f32));
        let y = x.avg_pool(2).upsample_nearest(2);
        assert_eq!(y.shape(), vec![1, 2, 4, 4]);
        assert!(y.value().iter().all(|&v| (v - 3.0).abs() < 1e-6));
    }
}
