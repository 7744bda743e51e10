use ndarray::{ArrayD, Axis, IxDyn, Slice};

use crate::{Element, Var};

impl<'g, T: Element> Var<'g, T> {
    pub fn reshape(self, shape: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let old = x.shape().to_vec();
        let y = x
            .as_standard_layout()
            .into_owned()
            .into_shape_with_order(IxDyn(shape))
            .unwrap_or_else(|_| panic!("cannot reshape {old:?} into {shape:?}"));
        self.graph.record(&[self], y, move |g| {
            vec![Some(
                g.as_standard_layout()
                    .into_owned()
                    .into_shape_with_order(IxDyn(&old))
                    .unwrap(),
            )]
        })
    }

    /// Elements `start..end` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, end: usize) -> Var<'g, T> {
        let x = self.value();
        let y = x.slice_axis(Axis(axis), Slice::from(start..end)).to_owned();
        let shape = x.raw_dim();
        self.graph.record(&[self], y, move |g| {
            let mut dx = ArrayD::zeros(shape.clone());
            dx.slice_axis_mut(Axis(axis), Slice::from(start..end))
                .assign(g);
            vec![Some(dx)]
        })
    }

    /// Concatenates along `axis`; every other dimension must agree.
    pub fn concat(parts: &[Var<'g, T>], axis: usize) -> Var<'g, T> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        if parts.len() == 1 {
            return parts[0];
        }
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let y = ndarray::concatenate(Axis(axis), &views).unwrap_or_else(|e| {
            let shapes: Vec<_> = values.iter().map(|v| v.shape().to_vec()).collect();
            panic!("concat along {axis} of {shapes:?}: {e}")
        });
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        parts[0].graph.record(parts, y, move |g| {
            let mut start = 0;
            sizes
                .iter()
                .map(|&n| {
                    let part = g
                        .slice_axis(Axis(axis), Slice::from(start..start + n))
                        .to_owned();
                    start += n;
                    Some(part)
                })
                .collect()
        })
    }

    /// Swaps two axes (materialized in standard layout).
    pub fn swap_axes(self, a: usize, b: usize) -> Var<'g, T> {
        let mut y = (*self.value()).clone();
        y.swap_axes(a, b);
        let y = y.as_standard_layout().into_owned();
        self.graph.record(&[self], y, move |g| {
            let mut dx = g.clone();
            dx.swap_axes(a, b);
            vec![Some(dx.as_standard_layout().into_owned())]
        })
    }
}

#[cfg(test)]
mod tests {
    use crate::Graph;
    use ndarray::array;

    #[test]
    fn concat_splits_gradient() {
        let g = Graph::<f64>::new();
        let a = g.leaf(array![[1.0], [2.0]].into_dyn());
        let b = g.leaf(array![[3.0, 4.0], [5.0, 6.0]].into_dyn());
        let c = crate::Var::concat(&[a, b], 1);
        assert_eq!(c.shape(), vec![2, 3]);
        let w = g.constant(array![[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]].into_dyn());
        let grads = g.backward((c * w).sum());
        assert_eq!(grads.wrt(a), array![[1.0], [4.0]].into_dyn());
        assert_eq!(grads.wrt(b), array![[2.0, 3.0], [5.0, 6.0]].into_dyn());
    }

    #[test]
    fn narrow_scatters_gradient() {
        let g = Graph::<f64>::new();
        let a = g.leaf(array![1.0, 2.0, 3.0, 4.0].into_dyn());
        let grads = g.backward(a.narrow(0, 1, 3).sum());
        assert_eq!(grads.wrt(a), array![0.0, 1.0, 1.0, 0.0].into_dyn());
    }
}
