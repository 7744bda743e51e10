use ndarray::{ArrayD, Axis, IxDyn};

use crate::{Element, Var};

impl<'g, T: Element> Var<'g, T> {
    /// Sum of all elements, as a 0-d tensor.
    pub fn sum(self) -> Var<'g, T> {
        let x = self.value();
        let shape = x.raw_dim();
        let s = ArrayD::from_elem(IxDyn(&[]), x.sum());
        self.graph.record(&[self], s, move |g| {
            let gv = *g.iter().next().unwrap();
            vec![Some(ArrayD::from_elem(shape.clone(), gv))]
        })
    }

    pub fn mean(self) -> Var<'g, T> {
        let n = self.value().len().max(1);
        self.sum().mul_scalar(T::one() / T::of(n as f64))
    }

    /// Sums over `axes`, keeping them as size-1 dimensions.
    pub fn sum_axes(self, axes: &[usize]) -> Var<'g, T> {
        let x = self.value();
        let mut out = (*x).clone();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        for &ax in &sorted {
            out = out.sum_axis(Axis(ax)).insert_axis(Axis(ax));
        }
        let shape = x.raw_dim();
        self.graph.record(&[self], out, move |g| {
            vec![Some(g.broadcast(shape.clone()).unwrap().to_owned())]
        })
    }

    pub fn mean_axes(self, axes: &[usize]) -> Var<'g, T> {
        let shape = self.shape();
        let n: usize = axes.iter().map(|&a| shape[a]).product();
        self.sum_axes(axes)
            .mul_scalar(T::one() / T::of(n.max(1) as f64))
    }
}
