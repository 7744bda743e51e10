use ndarray::{ArrayD, IxDyn};

use crate::{Element, Var};

/// Per-channel statistics of a batch-norm layer.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<'g, T: Element> Var<'g, T> {
    /// Batch normalization over `[b, c, h, w]` with per-channel affine
    /// `gamma`/`beta` of shape `[c]`.
    ///
    /// With `running = None` the batch statistics are used and returned
    /// (variance unbiased) so the caller can update its running averages.
    /// With `Some(stats)` the layer is a fixed affine map.
    pub fn batch_norm(
        self,
        gamma: Var<'g, T>,
        beta: Var<'g, T>,
        running: Option<&BatchNormStats<T>>,
        eps: T,
    ) -> (Var<'g, T>, Option<BatchNormStats<T>>) {
        let x = self.value();
        let x = std::sync::Arc::new(x.as_standard_layout().into_owned());
        let s = x.shape().to_vec();
        assert_eq!(s.len(), 4, "batch_norm expects [b, c, h, w]");
        let (b, c, hw) = (s[0], s[1], s[2] * s[3]);
        let n = b * hw;
        let xs = x.as_slice().unwrap();
        let gv = gamma.value();
        let bv = beta.value();
        let gvs: Vec<T> = gv.iter().copied().collect();
        let bvs: Vec<T> = bv.iter().copied().collect();
        assert_eq!(gvs.len(), c, "batch_norm gamma length");

        let (mean, var, batch_stats) = match running {
            Some(st) => (st.mean.clone(), st.var.clone(), None),
            None => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut acc = T::zero();
                    for bi in 0..b {
                        acc = acc + xs[(bi * c + ch) * hw..][..hw].iter().copied().sum::<T>();
                    }
                    let m = acc / T::of(n as f64);
                    let mut sq = T::zero();
                    for bi in 0..b {
                        for &v in &xs[(bi * c + ch) * hw..][..hw] {
                            sq = sq + (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = sq / T::of(n as f64);
                }
                let unbiased = var
                    .iter()
                    .map(|&v| {
                        if n > 1 {
                            v * T::of(n as f64 / (n - 1) as f64)
                        } else {
                            v
                        }
                    })
                    .collect();
                let stats = BatchNormStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| (v + eps).sqrt().recip()).collect();
        let mut xhat = ArrayD::<T>::zeros(IxDyn(&s));
        let mut out = ArrayD::<T>::zeros(IxDyn(&s));
        {
            let hs = xhat.as_slice_mut().unwrap();
            let os = out.as_slice_mut().unwrap();
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * hw;
                    for i in base..base + hw {
                        let h = (xs[i] - mean[ch]) * inv_std[ch];
                        hs[i] = h;
                        os[i] = gvs[ch] * h + bvs[ch];
                    }
                }
            }
        }
        let training = running.is_none();
        let param_shape = gv.raw_dim();
        let y = self.graph.record(&[self, gamma, beta], out, move |g| {
            let g = g.as_standard_layout();
            let gs = g.as_slice().unwrap();
            let hs = xhat.as_slice().unwrap();
            let mut dgamma = vec![T::zero(); c];
            let mut dbeta = vec![T::zero(); c];
            for bi in 0..b {
                for ch in 0..c {
                    let base = (bi * c + ch) * hw;
                    for i in base..base + hw {
                        dgamma[ch] = dgamma[ch] + gs[i] * hs[i];
                        dbeta[ch] = dbeta[ch] + gs[i];
                    }
                }
            }
            let mut dx = ArrayD::<T>::zeros(IxDyn(&s));
            let ds = dx.as_slice_mut().unwrap();
            let nf = T::of(n as f64);
            for ch in 0..c {
                let scale = gvs[ch] * inv_std[ch];
                for bi in 0..b {
                    let base = (bi * c + ch) * hw;
                    for i in base..base + hw {
                        ds[i] = if training {
                            scale * (gs[i] - dbeta[ch] / nf - hs[i] * dgamma[ch] / nf)
                        } else {
                            scale * gs[i]
                        };
                    }
                }
            }
            let to_param = |v: Vec<T>| ArrayD::from_shape_vec(param_shape.clone(), v).unwrap();
            vec![Some(dx), Some(to_param(dgamma)), Some(to_param(dbeta))]
        });
        (y, batch_stats)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;
    use ndarray::Array4;

    #[test]
    fn training_mode_normalizes_each_channel() {
        let g = Graph::<f64>::new();
        let x = Array4::from_shape_fn((2, 3, 2, 2), |(a, b, c, d)| {
            (a * 5 + b * 17 + c * 3 + d) as f64 * 0.7 + b as f64 * 10.0
        });
        let gamma = g.constant(ArrayD::from_elem(IxDyn(&[3]), 1.0));
        let beta = g.constant(ArrayD::zeros(IxDyn(&[3])));
        let (y, stats) = g
            .constant(x.into_dyn())
            .batch_norm(gamma, beta, None, 1e-12);
        assert!(stats.is_some());
        let y = y.value();
        for ch in 0..3 {
            let vals: Vec<f64> = y
                .indexed_iter()
                .filter(|(i, _)| i[1] == ch)
                .map(|(_, &v)| v)
                .collect();
            let m: f64 = vals.iter().sum::<f64>() / vals.len() as f64;
            let v: f64 = vals.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / vals.len() as f64;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-9);
        }
    }
}
