//! Frozen VGG-16 feature stacks for the perceptual loss and LPIPS, and a
//! tiny stand-in extractor.

use std::path::Path;

use ndarray::{ArrayD, ArrayView3, Axis, IxDyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use viewsynth_tensor::init::{kaiming_normal, normal};
use viewsynth_tensor::{Conv2dSpec, Element, Graph, Var};

use super::tensorfile::read_tensors;
use crate::losses::PerceptualExtractor;
use crate::metrics::LpipsNetwork;
use crate::{Error, Result};

const VGG16_CFG: [Option<usize>; 18] = [
    Some(64),
    Some(64),
    None,
    Some(128),
    Some(128),
    None,
    Some(256),
    Some(256),
    Some(256),
    None,
    Some(512),
    Some(512),
    Some(512),
    None,
    Some(512),
    Some(512),
    Some(512),
    None,
];

/// Outputs of the first three max-pools.
pub const PERCEPTUAL_TAPS: [usize; 3] = [4, 9, 16];
/// `relu1_2`, `relu2_2`, `relu3_3`, `relu4_3`, `relu5_3`.
pub const LPIPS_TAPS: [usize; 5] = [3, 8, 15, 22, 29];

const IMAGENET_MEAN: [f64; 3] = [0.485, 0.456, 0.406];
const IMAGENET_STD: [f64; 3] = [0.229, 0.224, 0.225];
const LPIPS_SHIFT: [f64; 3] = [-0.030, -0.088, -0.188];
const LPIPS_SCALE: [f64; 3] = [0.458, 0.448, 0.450];

enum Layer<T> {
    Conv { weight: ArrayD<T>, bias: ArrayD<T> },
    Relu,
    MaxPool,
}

/// The convolutional part of VGG-16, indexed like torchvision's `features`
/// module and truncated after the last layer that is needed.
pub struct Vgg16<T> {
    layers: Vec<Layer<T>>,
}

fn plan(upto: usize) -> Vec<(usize, Option<usize>)> {
    // (torchvision index, conv output width or pool)
    let mut out = Vec::new();
    let mut idx = 0;
    for c in VGG16_CFG {
        if idx > upto {
            break;
        }
        out.push((idx, c));
        idx += if c.is_some() { 2 } else { 1 };
    }
    out
}

impl<T: Element> Vgg16<T> {
    /// Loads `features.{i}.weight` / `features.{i}.bias` tensors, keeping
    /// layers up to index `upto`.
    pub fn load(path: &Path, upto: usize) -> Result<Self> {
        let file = read_tensors::<T>(path)?;
        let find = |name: String| {
            file.get(&name)
                .or_else(|| file.get(name.trim_start_matches("features.")))
                .cloned()
                .ok_or_else(|| {
                    Error::Checkpoint(format!("{}: missing tensor `{name}`", path.display()))
                })
        };
        let mut layers = Vec::new();
        let mut cin = 3;
        for (idx, c) in plan(upto) {
            match c {
                Some(cout) => {
                    let weight = find(format!("features.{idx}.weight"))?;
                    let bias = find(format!("features.{idx}.bias"))?;
                    if weight.shape() != [cout, cin, 3, 3] || bias.shape() != [cout] {
                        return Err(Error::Checkpoint(format!(
                            "{}: layer {idx} has shape {:?}, expected [{cout}, {cin}, 3, 3]",
                            path.display(),
                            weight.shape()
                        )));
                    }
                    layers.push(Layer::Conv { weight, bias });
                    layers.push(Layer::Relu);
                    cin = cout;
                }
                None => layers.push(Layer::MaxPool),
            }
        }
        Ok(Self { layers })
    }

    /// Randomly initialized network with every width divided by `shrink`.
    pub fn random(seed: u64, shrink: usize, upto: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut cin = 3;
        for (_, c) in plan(upto) {
            match c {
                Some(w) => {
                    let cout = (w / shrink.max(1)).max(1);
                    layers.push(Layer::Conv {
                        weight: kaiming_normal(&[cout, cin, 3, 3], cin * 9, &mut rng),
                        bias: ArrayD::zeros(IxDyn(&[cout])),
                    });
                    layers.push(Layer::Relu);
                    cin = cout;
                }
                None => layers.push(Layer::MaxPool),
            }
        }
        Self { layers }
    }

    /// Runs the stack and returns the activations after each index in `taps`.
    pub fn run<'g>(&self, graph: &'g Graph<T>, x: Var<'g, T>, taps: &[usize]) -> Vec<Var<'g, T>> {
        let last = taps.iter().copied().max().unwrap_or(0);
        let mut out = Vec::with_capacity(taps.len());
        let mut x = x;
        for (i, layer) in self.layers.iter().enumerate().take(last + 1) {
            x = match layer {
                Layer::Conv { weight, bias } => {
                    let c = bias.len();
                    x.conv2d(graph.constant(weight.clone()), Conv2dSpec::same(3))
                        + graph.constant(
                            bias.clone()
                                .into_shape_with_order(IxDyn(&[1, c, 1, 1]))
                                .unwrap(),
                        )
                }
                Layer::Relu => x.relu(),
                Layer::MaxPool => x.max_pool2d(2, 2, 0),
            };
            if taps.contains(&i) {
                out.push(x);
            }
        }
        out
    }

    /// Channel count of the activation at layer `idx`.
    pub fn channels_at(&self, idx: usize) -> usize {
        self.layers[..=idx]
            .iter()
            .rev()
            .find_map(|l| match l {
                Layer::Conv { bias, .. } => Some(bias.len()),
                _ => None,
            })
            .unwrap_or(3)
    }
}

fn channel_affine<'g, T: Element>(
    g: &'g Graph<T>,
    x: Var<'g, T>,
    shift: [f64; 3],
    scale: [f64; 3],
) -> Var<'g, T> {
    let s = ArrayD::from_shape_fn(IxDyn(&[1, 3, 1, 1]), |i| T::of(1.0 / scale[i[1]]));
    let m = ArrayD::from_shape_fn(IxDyn(&[1, 3, 1, 1]), |i| T::of(shift[i[1]]));
    (x - g.constant(m)) * g.constant(s)
}

/// Features after the first three pooling stages of VGG-16, on
/// ImageNet-normalized input.
pub struct VggPerceptual<T> {
    net: Vgg16<T>,
}

impl<T: Element> VggPerceptual<T> {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self {
            net: Vgg16::load(path, PERCEPTUAL_TAPS[2])?,
        })
    }

    pub fn from_network(net: Vgg16<T>) -> Self {
        Self { net }
    }
}

impl<T: Element> PerceptualExtractor<T> for VggPerceptual<T> {
    fn features<'g>(&self, graph: &'g Graph<T>, image: Var<'g, T>) -> Vec<Var<'g, T>> {
        let x = channel_affine(graph, image, IMAGENET_MEAN, IMAGENET_STD);
        self.net.run(graph, x, &PERCEPTUAL_TAPS)
    }
}

/// Two smooth convolution layers with fixed random weights.
pub struct TinyExtractor<T> {
    w1: ArrayD<T>,
    w2: ArrayD<T>,
}

impl<T: Element> TinyExtractor<T> {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Self {
            w1: normal(&[4, 3, 3, 3], 0.3, &mut rng),
            w2: normal(&[4, 4, 3, 3], 0.3, &mut rng),
        }
    }
}

impl<T: Element> PerceptualExtractor<T> for TinyExtractor<T> {
    fn features<'g>(&self, graph: &'g Graph<T>, image: Var<'g, T>) -> Vec<Var<'g, T>> {
        let a = image
            .conv2d(graph.constant(self.w1.clone()), Conv2dSpec::same(3))
            .tanh();
        let b = a
            .avg_pool(2)
            .conv2d(graph.constant(self.w2.clone()), Conv2dSpec::same(3))
            .tanh();
        vec![a, b]
    }
}

/// LPIPS distance with a VGG-16 backbone: unit-normalized channel features,
/// squared differences weighted per channel, averaged over space and summed
/// over layers.
pub struct Lpips {
    net: Vgg16<f64>,
    lin: Vec<Vec<f64>>,
}

impl Lpips {
    /// `vgg` holds the backbone, `lin` the `lin{k}.model.1.weight` tensors.
    pub fn load(vgg: &Path, lin: &Path) -> Result<Self> {
        let net = Vgg16::load(vgg, LPIPS_TAPS[4])?;
        let file = read_tensors::<f64>(lin)?;
        let lin = (0..5)
            .map(|k| {
                file.get(&format!("lin{k}.model.1.weight"))
                    .map(|a| a.iter().copied().collect())
                    .ok_or_else(|| Error::Checkpoint(format!("{}: missing lin{k}", lin.display())))
            })
            .collect::<Result<Vec<Vec<f64>>>>()?;
        Self::from_parts(net, lin)
    }

    pub fn from_parts(net: Vgg16<f64>, lin: Vec<Vec<f64>>) -> Result<Self> {
        for (k, w) in lin.iter().enumerate() {
            let c = net.channels_at(LPIPS_TAPS[k]);
            if w.len() != c {
                return Err(Error::Checkpoint(format!(
                    "lin{k} has {} weights, layer has {c} channels",
                    w.len()
                )));
            }
        }
        Ok(Self { net, lin })
    }

    fn features(&self, g: &Graph<f64>, img: ArrayView3<f64>) -> Vec<ArrayD<f64>> {
        let x = img.mapv(|v| 2.0 * v - 1.0).insert_axis(Axis(0)).into_dyn();
        let x = channel_affine(g, g.constant(x), LPIPS_SHIFT, LPIPS_SCALE);
        self.net
            .run(g, x, &LPIPS_TAPS)
            .into_iter()
            .map(|v| {
                let a = v.value().as_ref().clone();
                let norm = a
                    .mapv(|x| x * x)
                    .sum_axis(Axis(1))
                    .mapv(f64::sqrt)
                    .insert_axis(Axis(1));
                &a / &(norm + 1e-10)
            })
            .collect()
    }
}

impl LpipsNetwork for Lpips {
    fn distance(&self, pred: ArrayView3<f64>, gt: ArrayView3<f64>) -> f64 {
        let g = Graph::new();
        let fa = self.features(&g, pred);
        let fb = self.features(&g, gt);
        fa.iter()
            .zip(&fb)
            .zip(&self.lin)
            .map(|((a, b), w)| {
                let d = (a - b).mapv(|x| x * x);
                let (c, h, wd) = (d.shape()[1], d.shape()[2], d.shape()[3]);
                let mut acc = 0.0;
                for ch in 0..c {
                    acc += w[ch] * d.index_axis(Axis(1), ch).sum();
                }
                acc / (h * wd) as f64
            })
            .sum()
    }
}
