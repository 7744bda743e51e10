use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Ix2};

use crate::{Element, Var};

impl<'g, T: Element> Var<'g, T> {
    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, rhs: Var<'g, T>) -> Var<'g, T> {
        let a = self.value();
        let b = rhs.value();
        let a2 = a
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul lhs must be 2-d");
        let b2 = b
            .view()
            .into_dimensionality::<Ix2>()
            .expect("matmul rhs must be 2-d");
        assert_eq!(a2.ncols(), b2.nrows(), "matmul inner dimensions");
        let y = a2.dot(&b2).into_dyn();
        self.graph.record(&[self, rhs], y, move |g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let a2 = a.view().into_dimensionality::<Ix2>().unwrap();
            let b2 = b.view().into_dimensionality::<Ix2>().unwrap();
            let mut ga = Array2::zeros(a2.raw_dim());
            general_mat_mul(T::one(), &g2, &b2.t(), T::zero(), &mut ga);
            let mut gb = Array2::zeros(b2.raw_dim());
            general_mat_mul(T::one(), &a2.t(), &g2, T::zero(), &mut gb);
            vec![Some(ga.into_dyn()), Some(gb.into_dyn())]
        })
    }
}
