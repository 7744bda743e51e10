//! Parameterized building blocks bound to a [`ParamStore`].

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use viewsynth_tensor::init::{fan_in_uniform, kaiming_normal};
use viewsynth_tensor::{
    BatchNormStats, BnUpdate, Conv2dSpec, Element, Mode, ParamId, ParamStore, Session, Var,
};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub spec: Conv2dSpec,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        spec: Conv2dSpec,
        bias: bool,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = store.add(
            &format!("{name}.weight"),
            kaiming_normal(&[cout, cin, k, k], fan_in, rng),
        );
        let bias = bias.then(|| store.add(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[cout]))));
        Self {
            weight,
            bias,
            spec,
            in_channels: cin,
            out_channels: cout,
        }
    }

    pub fn forward<'g, T: Element>(&self, sess: &Session<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let y = x.conv2d(sess.param(self.weight), self.spec);
        match self.bias {
            Some(b) => y + sess.param(b).reshape(&[1, self.out_channels, 1, 1]),
            None => y,
        }
    }
}

/// Batch normalization with running statistics kept as store buffers.
#[derive(Debug, Clone)]
pub struct BatchNorm2d {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm2d {
    pub fn new<T: Element>(store: &mut ParamStore<T>, name: &str, c: usize) -> Self {
        Self {
            gamma: store.add(
                &format!("{name}.weight"),
                ArrayD::from_elem(IxDyn(&[c]), T::one()),
            ),
            beta: store.add(&format!("{name}.bias"), ArrayD::zeros(IxDyn(&[c]))),
            running_mean: store
                .add_buffer(&format!("{name}.running_mean"), ArrayD::zeros(IxDyn(&[c]))),
            running_var: store.add_buffer(
                &format!("{name}.running_var"),
                ArrayD::from_elem(IxDyn(&[c]), T::one()),
            ),
        }
    }

    /// Batch statistics in train mode (queued as a running-average update on
    /// the session), running statistics in eval mode.
    pub fn forward<'g, T: Element>(&self, sess: &Session<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let (g, b) = (sess.param(self.gamma), sess.param(self.beta));
        match sess.mode() {
            Mode::Train => {
                let (y, stats) = x.batch_norm(g, b, None, T::of(BN_EPS));
                if let Some(stats) = stats {
                    sess.push_bn_update(BnUpdate {
                        mean: self.running_mean,
                        var: self.running_var,
                        stats,
                    });
                }
                y
            }
            Mode::Eval => {
                let stats = BatchNormStats {
                    mean: sess.buffer(self.running_mean).iter().copied().collect(),
                    var: sess.buffer(self.running_var).iter().copied().collect(),
                };
                x.batch_norm(g, b, Some(&stats), T::of(BN_EPS)).0
            }
        }
    }
}

/// Fully connected layer on `[b, in]` inputs.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        fin: usize,
        fout: usize,
    ) -> Self {
        Self {
            weight: store.add(
                &format!("{name}.weight"),
                fan_in_uniform(&[fin, fout], fin, rng),
            ),
            bias: store.add(&format!("{name}.bias"), fan_in_uniform(&[fout], fin, rng)),
            in_features: fin,
            out_features: fout,
        }
    }

    pub fn forward<'g, T: Element>(&self, sess: &Session<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        x.matmul(sess.param(self.weight)) + sess.param(self.bias)
    }
}
