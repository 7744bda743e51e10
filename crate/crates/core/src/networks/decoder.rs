//! U-Net style decoder shared by the depth and view-synthesis branches.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use viewsynth_tensor::init::normal;
use viewsynth_tensor::{Conv2dSpec, Element, ParamStore, Session, Var};

use super::layers::{Conv2d, Linear};
use super::ModelConfig;
use crate::warp::WarpOutput;
use crate::{Error, Result};

/// What the per-level heads produce.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DecoderHead {
    /// One channel mapped to depth in `[d_min, d_max]`.
    Depth { d_min: f64, d_max: f64 },
    /// RGB in `[0, 1]`.
    Image,
}

impl DecoderHead {
    fn channels(&self) -> usize {
        match self {
            DecoderHead::Depth { .. } => 1,
            DecoderHead::Image => 3,
        }
    }

    /// Head bias at initialization. Depth heads start at the geometric mean
    /// of the range rather than near `d_min`, where `sigmoid(0)` would put
    /// them.
    fn initial_logit(&self) -> f64 {
        match *self {
            DecoderHead::Depth { d_min, d_max } => {
                let d0 = (d_min * d_max).sqrt();
                let s = (1.0 / d0 - 1.0 / d_max) / (1.0 / d_min - 1.0 / d_max);
                (s / (1.0 - s)).ln()
            }
            DecoderHead::Image => 0.0,
        }
    }
}

/// `1 / (s (1/d_min - 1/d_max) + 1/d_max)`: `d_max` at `s = 0`, `d_min` at
/// `s = 1`.
pub fn sigmoid_to_depth<'g, T: Element>(s: Var<'g, T>, d_min: f64, d_max: f64) -> Var<'g, T> {
    s.mul_scalar(T::of(1.0 / d_min - 1.0 / d_max))
        .add_scalar(T::of(1.0 / d_max))
        .recip()
}

#[derive(Debug, Clone)]
struct Stage {
    conv1: Conv2d,
    conv2: Conv2d,
    head: Conv2d,
}

#[derive(Debug, Clone)]
pub struct Decoder {
    top: Linear,
    top_channels: usize,
    top_hw: (usize, usize),
    conv_top: Conv2d,
    /// Output scales 1/16, 1/8, 1/4, 1/2, 1 in that order.
    stages: Vec<Stage>,
    head: DecoderHead,
    mask_channel: bool,
    use_skips: bool,
    skip_channels: [usize; 5],
    prefix: String,
}

fn cat<'g, T: Element>(x: Var<'g, T>, skip: &WarpOutput<'g, T>, with_mask: bool) -> Var<'g, T> {
    if with_mask {
        let m = x.graph().constant(skip.mask.clone());
        Var::concat(&[x, skip.warped, m], 1)
    } else {
        Var::concat(&[x, skip.warped], 1)
    }
}

impl Decoder {
    pub fn new<T: Element, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        prefix: &str,
        cfg: &ModelConfig,
        head: DecoderHead,
        use_skips: bool,
    ) -> Self {
        let m = usize::from(cfg.mask_channel);
        let skip_width = |c: usize| if use_skips { c + m } else { 0 };
        let e = cfg.encoder_widths;
        let d = cfg.decoder_widths;
        let (h32, w32) = (cfg.image_height / 32, cfg.image_width / 32);
        let top_channels = d[4];
        let top = Linear::new(
            store,
            rng,
            &format!("{prefix}.fc"),
            cfg.embedding_width,
            top_channels * h32 * w32,
        );
        let same = Conv2dSpec::same(3);
        let conv_top = Conv2d::new(
            store,
            rng,
            &format!("{prefix}.conv_top"),
            top_channels + skip_width(e[4]),
            d[4],
            3,
            same,
            true,
        );
        let mut stages = Vec::new();
        let mut prev = d[4];
        for level in (0..5).rev() {
            let skip = if level > 0 {
                skip_width(e[level - 1])
            } else {
                0
            };
            let name = format!("{prefix}.up{level}");
            let conv1 = Conv2d::new(
                store,
                rng,
                &format!("{name}.conv1"),
                prev + skip,
                d[level],
                3,
                same,
                true,
            );
            let conv2 = Conv2d::new(
                store,
                rng,
                &format!("{name}.conv2"),
                d[level],
                d[level],
                3,
                same,
                true,
            );
            let head_conv = Conv2d {
                weight: store.add(
                    &format!("{name}.head.weight"),
                    normal(&[head.channels(), d[level], 3, 3], 1e-3, rng),
                ),
                bias: Some(store.add(
                    &format!("{name}.head.bias"),
                    ArrayD::from_elem(IxDyn(&[head.channels()]), T::of(head.initial_logit())),
                )),
                spec: same,
                in_channels: d[level],
                out_channels: head.channels(),
            };
            stages.push(Stage {
                conv1,
                conv2,
                head: head_conv,
            });
            prev = d[level];
        }
        Self {
            top,
            top_channels,
            top_hw: (h32, w32),
            conv_top,
            stages,
            head,
            mask_channel: cfg.mask_channel,
            use_skips,
            skip_channels: e,
            prefix: prefix.to_string(),
        }
    }

    /// Prefix of every parameter name of this decoder.
    pub fn prefix(&self) -> &str {
        &self.prefix
    }

    pub fn head(&self) -> DecoderHead {
        self.head
    }

    pub fn uses_skips(&self) -> bool {
        self.use_skips
    }

    /// Decodes `z` (`[b, n, 3]`) with five skip levels at 1/2 .. 1/32 scale.
    /// Returns outputs at scales 1, 1/2, 1/4, 1/8, 1/16. A decoder built
    /// without skips ignores `skips`.
    pub fn forward<'g, T: Element>(
        &self,
        sess: &Session<'g, '_, T>,
        z: Var<'g, T>,
        skips: &[WarpOutput<'g, T>],
    ) -> Result<Vec<Var<'g, T>>> {
        if self.use_skips && skips.len() != 5 {
            return Err(Error::shape(
                "decode",
                format!("expected 5 skip levels, got {}", skips.len()),
            ));
        }
        let zs = z.shape();
        let b = zs[0];
        let (h32, w32) = self.top_hw;
        for (i, s) in skips.iter().enumerate().filter(|_| self.use_skips) {
            let sh = s.warped.shape();
            let f = 1 << (5 - i);
            let want = [b, self.skip_channels[i], h32 * f / 2, w32 * f / 2];
            if sh != want {
                return Err(Error::shape(
                    "decode",
                    format!("skip level {i}: expected {want:?}, got {sh:?}"),
                ));
            }
        }
        let flat = zs[1..].iter().product::<usize>();
        let x = self
            .top
            .forward(sess, z.reshape(&[b, flat]))
            .reshape(&[b, self.top_channels, h32, w32])
            .elu();
        let x = if self.use_skips {
            cat(x, &skips[4], self.mask_channel)
        } else {
            x
        };
        let mut x = self.conv_top.forward(sess, x).elu();
        let mut outputs = Vec::with_capacity(5);
        for (k, stage) in self.stages.iter().enumerate() {
            let level = 4 - k;
            x = x.upsample_nearest(2);
            if level > 0 && self.use_skips {
                x = cat(x, &skips[level - 1], self.mask_channel);
            }
            x = stage.conv1.forward(sess, x).elu();
            x = stage.conv2.forward(sess, x).elu();
            let s = stage.head.forward(sess, x).sigmoid();
            outputs.push(match self.head {
                DecoderHead::Depth { d_min, d_max } => sigmoid_to_depth(s, d_min, d_max),
                DecoderHead::Image => s,
            });
        }
        outputs.reverse();
        Ok(outputs)
    }
}
