use std::ops::{Add, Div, Mul, Neg, Sub};

use ndarray::{ArrayD, Axis, IxDyn, Zip};

use crate::{Element, Var};

/// Reduces a broadcast gradient back to `shape` by summing the expanded axes.
pub fn sum_to_shape<T: Element>(grad: &ArrayD<T>, shape: &[usize]) -> ArrayD<T> {
    if grad.shape() == shape {
        return grad.clone();
    }
    let mut g = grad.clone();
    while g.ndim() > shape.len() {
        g = g.sum_axis(Axis(0));
    }
    for (axis, &dim) in shape.iter().enumerate() {
        if dim == 1 && g.shape()[axis] != 1 {
            g = g.sum_axis(Axis(axis)).insert_axis(Axis(axis));
        }
    }
    g.into_shape_with_order(IxDyn(shape))
        .expect("broadcast gradient reduces to parent shape")
}

fn broadcast_binary<'g, T: Element>(
    a: Var<'g, T>,
    b: Var<'g, T>,
    f: impl Fn(T, T) -> T,
) -> ArrayD<T> {
    let (av, bv) = (a.value(), b.value());
    if av.shape() == bv.shape() {
        let mut out = ArrayD::zeros(av.raw_dim());
        Zip::from(&mut out)
            .and(&*av)
            .and(&*bv)
            .for_each(|o, &x, &y| *o = f(x, y));
        return out;
    }
    let shape = co_broadcast(av.shape(), bv.shape()).unwrap_or_else(|| {
        panic!(
            "cannot broadcast shapes {:?} and {:?}",
            av.shape(),
            bv.shape()
        )
    });
    let ab = av.broadcast(IxDyn(&shape)).unwrap();
    let bb = bv.broadcast(IxDyn(&shape)).unwrap();
    let mut out = ArrayD::zeros(IxDyn(&shape));
    Zip::from(&mut out)
        .and(&ab)
        .and(&bb)
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

fn co_broadcast(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n {
            a[i + a.len() - n]
        } else {
            1
        };
        let db = if i + b.len() >= n {
            b[i + b.len() - n]
        } else {
            1
        };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

impl<'g, T: Element> Var<'g, T> {
    /// Elementwise map with a derivative expressed through input `x` and
    /// output `y`.
    pub fn map<F, D>(self, f: F, df: D) -> Var<'g, T>
    where
        F: Fn(T) -> T,
        D: Fn(T, T) -> T + 'static,
    {
        let x = self.value();
        let y = x.mapv(&f);
        let y_keep = std::sync::Arc::new(y.clone());
        self.graph.record(&[self], y, move |g| {
            let mut dx = ArrayD::zeros(g.raw_dim());
            Zip::from(&mut dx)
                .and(g)
                .and(&*x)
                .and(&*y_keep)
                .for_each(|d, &g, &x, &y| *d = g * df(x, y));
            vec![Some(dx)]
        })
    }

    pub fn exp(self) -> Var<'g, T> {
        self.map(|x| x.exp(), |_, y| y)
    }

    pub fn ln(self) -> Var<'g, T> {
        self.map(|x| x.ln(), |x, _| x.recip())
    }

    pub fn sqrt(self) -> Var<'g, T> {
        self.map(|x| x.sqrt(), |_, y| T::of(0.5) / y)
    }

    pub fn square(self) -> Var<'g, T> {
        self.map(|x| x * x, |x, _| x + x)
    }

    pub fn recip(self) -> Var<'g, T> {
        self.map(|x| x.recip(), |_, y| -(y * y))
    }

    /// Subgradient 0 at the origin.
    pub fn abs(self) -> Var<'g, T> {
        self.map(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sigmoid(self) -> Var<'g, T> {
        self.map(
            |x| T::one() / (T::one() + (-x).exp()),
            |_, y| y * (T::one() - y),
        )
    }

    pub fn tanh(self) -> Var<'g, T> {
        self.map(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn relu(self) -> Var<'g, T> {
        self.map(
            |x| x.max(T::zero()),
            |x, _| if x > T::zero() { T::one() } else { T::zero() },
        )
    }

    pub fn elu(self) -> Var<'g, T> {
        self.map(
            |x| if x > T::zero() { x } else { x.exp_m1() },
            |x, y| {
                if x > T::zero() {
                    T::one()
                } else {
                    y + T::one()
                }
            },
        )
    }

    /// Clamps values; the gradient passes only where the input is inside
    /// `[lo, hi]`.
    pub fn clamp(self, lo: T, hi: T) -> Var<'g, T> {
        self.map(
            move |x| x.max(lo).min(hi),
            move |x, _| {
                if x >= lo && x <= hi {
                    T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn add_scalar(self, s: T) -> Var<'g, T> {
        let y = self.value().mapv(|x| x + s);
        self.graph.record(&[self], y, |g| vec![Some(g.clone())])
    }

    pub fn mul_scalar(self, s: T) -> Var<'g, T> {
        let y = self.value().mapv(|x| x * s);
        self.graph
            .record(&[self], y, move |g| vec![Some(g.mapv(|v| v * s))])
    }

    pub fn neg(self) -> Var<'g, T> {
        self.mul_scalar(-T::one())
    }

    pub fn add(self, other: Var<'g, T>) -> Var<'g, T> {
        let out = broadcast_binary(self, other, |x, y| x + y);
        let (sa, sb) = (self.shape(), other.shape());
        self.graph.record(&[self, other], out, move |g| {
            vec![Some(sum_to_shape(g, &sa)), Some(sum_to_shape(g, &sb))]
        })
    }

    pub fn sub(self, other: Var<'g, T>) -> Var<'g, T> {
        let out = broadcast_binary(self, other, |x, y| x - y);
        let (sa, sb) = (self.shape(), other.shape());
        self.graph.record(&[self, other], out, move |g| {
            vec![
                Some(sum_to_shape(g, &sa)),
                Some(sum_to_shape(&g.mapv(|v| -v), &sb)),
            ]
        })
    }

    pub fn mul(self, other: Var<'g, T>) -> Var<'g, T> {
        let out = broadcast_binary(self, other, |x, y| x * y);
        let (a, b) = (self.value(), other.value());
        self.graph.record(&[self, other], out, move |g| {
            let ga = g * &*b;
            let gb = g * &*a;
            vec![
                Some(sum_to_shape(&ga, a.shape())),
                Some(sum_to_shape(&gb, b.shape())),
            ]
        })
    }

    pub fn div(self, other: Var<'g, T>) -> Var<'g, T> {
        let out = broadcast_binary(self, other, |x, y| x / y);
        let (a, b) = (self.value(), other.value());
        self.graph.record(&[self, other], out, move |g| {
            let ga = g / &*b;
            let gb = -(g * &*a) / (&*b * &*b);
            vec![
                Some(sum_to_shape(&ga, a.shape())),
                Some(sum_to_shape(&gb, b.shape())),
            ]
        })
    }
}

impl<'g, T: Element> Add for Var<'g, T> {
    type Output = Var<'g, T>;
    fn add(self, rhs: Self) -> Self::Output {
        Var::add(self, rhs)
    }
}

impl<'g, T: Element> Sub for Var<'g, T> {
    type Output = Var<'g, T>;
    fn sub(self, rhs: Self) -> Self::Output {
        Var::sub(self, rhs)
    }
}

impl<'g, T: Element> Mul for Var<'g, T> {
    type Output = Var<'g, T>;
    fn mul(self, rhs: Self) -> Self::Output {
        Var::mul(self, rhs)
    }
}

impl<'g, T: Element> Div for Var<'g, T> {
    type Output = Var<'g, T>;
    fn div(self, rhs: Self) -> Self::Output {
        Var::div(self, rhs)
    }
}

impl<'g, T: Element> Neg for Var<'g, T> {
    type Output = Var<'g, T>;
    fn neg(self) -> Self::Output {
        Var::neg(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Graph;
    use ndarray::array;

    #[test]
    fn broadcast_add_reduces_gradient() {
        let g = Graph::<f64>::new();
        let a = g.leaf(array![[1.0, 2.0], [3.0, 4.0]].into_dyn());
        let b = g.leaf(array![10.0, 20.0].into_dyn());
        let y = (a + b).sum();
        let grads = g.backward(y);
        assert_eq!(grads.wrt(b), array![2.0, 2.0].into_dyn());
        assert_eq!(grads.wrt(a), ArrayD::from_elem(IxDyn(&[2, 2]), 1.0));
    }

    #[test]
    fn div_gradient() {
        let g = Graph::<f64>::new();
        let a = g.leaf(array![3.0].into_dyn());
        let b = g.leaf(array![2.0].into_dyn());
        let grads = g.backward((a / b).sum());
        assert!((grads.wrt(a)[[0]] - 0.5).abs() < 1e-15);
        assert!((grads.wrt(b)[[0]] + 0.75).abs() < 1e-15);
    }

    #[test]
    fn constants_get_no_gradient() {
        let g = Graph::<f32>::new();
        let a = g.constant(array![1.0f32].into_dyn());
        let y = a.exp().sum();
        assert!(!y.requires_grad());
        assert!(g.backward(y).get(a).is_none());
    }
}
