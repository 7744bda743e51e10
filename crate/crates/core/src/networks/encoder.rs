//! ResNet-18 feature encoder with a fully connected embedding head.

use rand::Rng;
use viewsynth_tensor::{Conv2dSpec, Element, ParamStore, Session, Var};

use super::layers::{BatchNorm2d, Conv2d, Linear};
use super::ModelConfig;
use crate::{Error, Result};

#[derive(Debug, Clone)]
struct BasicBlock {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    conv2: Conv2d,
    bn2: BatchNorm2d,
    downsample: Option<(Conv2d, BatchNorm2d)>,
}

impl BasicBlock {
    fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        stride: usize,
    ) -> Self {
        let conv1 = Conv2d::new(
            store,
            rng,
            &format!("{name}.conv1"),
            cin,
            cout,
            3,
            Conv2dSpec::new(stride, 1),
            false,
        );
        let bn1 = BatchNorm2d::new(store, &format!("{name}.bn1"), cout);
        let conv2 = Conv2d::new(
            store,
            rng,
            &format!("{name}.conv2"),
            cout,
            cout,
            3,
            Conv2dSpec::same(3),
            false,
        );
        let bn2 = BatchNorm2d::new(store, &format!("{name}.bn2"), cout);
        let downsample = (stride != 1 || cin != cout).then(|| {
            (
                Conv2d::new(
                    store,
                    rng,
                    &format!("{name}.downsample.0"),
                    cin,
                    cout,
                    1,
                    Conv2dSpec::new(stride, 0),
                    false,
                ),
                BatchNorm2d::new(store, &format!("{name}.downsample.1"), cout),
            )
        });
        Self {
            conv1,
            bn1,
            conv2,
            bn2,
            downsample,
        }
    }

    fn forward<'g, T: Element>(&self, sess: &Session<'g, '_, T>, x: Var<'g, T>) -> Var<'g, T> {
        let y = self.bn1.forward(sess, self.conv1.forward(sess, x)).relu();
        let y = self.bn2.forward(sess, self.conv2.forward(sess, y));
        let skip = match &self.downsample {
            Some((c, bn)) => bn.forward(sess, c.forward(sess, x)),
            None => x,
        };
        (y + skip).relu()
    }
}

/// Latent code `[b, n, 3]` and five feature maps at 1/2 .. 1/32 scale.
pub struct EncoderOutput<'g, T: Element> {
    pub z: Var<'g, T>,
    pub features: Vec<Var<'g, T>>,
}

/// Parameter names follow the torchvision ResNet layout under `encoder.`.
#[derive(Debug, Clone)]
pub struct Encoder {
    conv1: Conv2d,
    bn1: BatchNorm2d,
    layers: Vec<[BasicBlock; 2]>,
    fc: Linear,
    height: usize,
    width: usize,
    widths: [usize; 5],
}

impl Encoder {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        cfg: &ModelConfig,
    ) -> Self {
        let w = cfg.encoder_widths;
        let conv1 = Conv2d::new(
            store,
            rng,
            "encoder.conv1",
            3,
            w[0],
            7,
            Conv2dSpec::new(2, 3),
            false,
        );
        let bn1 = BatchNorm2d::new(store, "encoder.bn1", w[0]);
        let mut layers = Vec::new();
        for i in 0..4 {
            let (cin, cout) = (w[i], w[i + 1]);
            let stride = if i == 0 { 1 } else { 2 };
            let name = format!("encoder.layer{}", i + 1);
            layers.push([
                BasicBlock::new(store, rng, &format!("{name}.0"), cin, cout, stride),
                BasicBlock::new(store, rng, &format!("{name}.1"), cout, cout, 1),
            ]);
        }
        let flat = w[4] * (cfg.image_height / 32) * (cfg.image_width / 32);
        let fc = Linear::new(store, rng, "encoder.fc", flat, cfg.embedding_width);
        Self {
            conv1,
            bn1,
            layers,
            fc,
            height: cfg.image_height,
            width: cfg.image_width,
            widths: w,
        }
    }

    /// Channel counts of the five feature levels.
    pub fn feature_channels(&self) -> [usize; 5] {
        self.widths
    }

    pub fn forward<'g, T: Element>(
        &self,
        sess: &Session<'g, '_, T>,
        image: Var<'g, T>,
    ) -> Result<EncoderOutput<'g, T>> {
        let s = image.shape();
        if s.len() != 4 || s[1] != 3 || s[2] % 32 != 0 || s[3] % 32 != 0 {
            return Err(Error::shape(
                "encode",
                format!("expected [b, 3, h, w] with h, w multiples of 32, got {s:?}"),
            ));
        }
        if (s[2], s[3]) != (self.height, self.width) {
            return Err(Error::shape(
                "encode",
                format!(
                    "model built for {}x{}, got {}x{}",
                    self.height, self.width, s[2], s[3]
                ),
            ));
        }
        let b = s[0];
        let mut features = Vec::with_capacity(5);
        let x = self
            .bn1
            .forward(sess, self.conv1.forward(sess, image))
            .relu();
        features.push(x);
        let mut x = x.max_pool2d(3, 2, 1);
        for blocks in &self.layers {
            for blk in blocks {
                x = blk.forward(sess, x);
            }
            features.push(x);
        }
        let flat: usize = x.shape()[1..].iter().product();
        let e = self.fc.forward(sess, x.reshape(&[b, flat]));
        let n = self.fc.out_features / 3;
        Ok(EncoderOutput {
            z: e.reshape(&[b, n, 3]),
            features,
        })
    }
}
