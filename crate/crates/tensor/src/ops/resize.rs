use ndarray::{ArrayD, IxDyn};

use crate::{Element, Var};

/// Source taps for one output coordinate under half-pixel-centre bilinear
/// resampling (`align_corners = false`), edges clamped.
fn taps(out: usize, in_size: usize, out_size: usize) -> (usize, usize, f64) {
    let scale = in_size as f64 / out_size as f64;
    let src = ((out as f64 + 0.5) * scale - 0.5).max(0.0);
    let i0 = (src.floor() as usize).min(in_size - 1);
    let i1 = (i0 + 1).min(in_size - 1);
    (i0, i1, src - i0 as f64)
}

impl<'g, T: Element> Var<'g, T> {
    /// Bilinear resize of a `[b, c, h, w]` tensor to `out_h x out_w`.
    pub fn resize_bilinear(self, out_h: usize, out_w: usize) -> Var<'g, T> {
        let x = self.value();
        let x = x.as_standard_layout();
        let s = x.shape();
        assert_eq!(s.len(), 4, "resize_bilinear expects [b, c, h, w]");
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if (h, w) == (out_h, out_w) {
            return self;
        }
        let ys: Vec<_> = (0..out_h).map(|o| taps(o, h, out_h)).collect();
        let xs: Vec<_> = (0..out_w).map(|o| taps(o, w, out_w)).collect();
        let src = x.as_slice().unwrap();
        let mut out = ArrayD::<T>::zeros(IxDyn(&[b, c, out_h, out_w]));
        {
            let os = out.as_slice_mut().unwrap();
            for plane in 0..b * c {
                let p = &src[plane * h * w..(plane + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    let fy = T::of(fy);
                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let fx = T::of(fx);
                        let top = p[y0 * w + x0] * (T::one() - fx) + p[y0 * w + x1] * fx;
                        let bot = p[y1 * w + x0] * (T::one() - fx) + p[y1 * w + x1] * fx;
                        os[(plane * out_h + oy) * out_w + ox] = top * (T::one() - fy) + bot * fy;
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
                let dp = &mut ds[plane * h * w..(plane + 1) * h * w];
                for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
                    let fy = T::of(fy);
                    for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                        let fx = T::of(fx);
                        let gv = gs[(plane * out_h + oy) * out_w + ox];
                        let top = gv * (T::one() - fy);
                        let bot = gv * fy;
                        dp[y0 * w + x0] = dp[y0 * w + x0] + top * (T::one() - fx);
                        dp[y0 * w + x1] = dp[y0 * w + x1] + top * fx;
                        dp[y1 * w + x0] = dp[y1 * w + x0] + bot * (T::one() - fx);
                        dp[y1 * w + x1] = dp[y1 * w + x1] + bot * fx;
                    }
                }
            }
            vec![Some(dx)]
        })
    }
}
