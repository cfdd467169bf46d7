//! Small shape-preserving enhancement networks.
//!
//! All three architectures map `[N, 1, h, w]` to `[N, 1, h, w]` with padded
//! stride-1 convolutions. Widths are spec fields so the reduced desk-scale
//! defaults and full-size variants share one code path.

use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{add, conv2d, relu, Var};
use crate::error::{Error, Result};
use crate::rng;
use crate::tensor::{Element, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    SrcnnLite,
    RedcnnLite,
    EdsrLite,
}

impl fmt::Display for Arch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Arch::SrcnnLite => "srcnn_lite",
            Arch::RedcnnLite => "redcnn_lite",
            Arch::EdsrLite => "edsr_lite",
        })
    }
}

impl FromStr for Arch {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "srcnn_lite" => Ok(Arch::SrcnnLite),
            "redcnn_lite" => Ok(Arch::RedcnnLite),
            "edsr_lite" => Ok(Arch::EdsrLite),
            other => Err(Error::invalid(format!("unknown architecture {other:?}"))),
        }
    }
}

/// Architecture plus widths.
///
/// * `srcnn_lite`: `channels = [c1, c2]`, `kernels = [k1, k2, k3]`.
/// * `redcnn_lite`: `channels = [c]`, `kernels = [k]`, `depth = 3`
///   (encoder convs; the decoder mirrors them).
/// * `edsr_lite`: `channels = [c]`, `kernels = [k]`, `depth` residual blocks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetworkSpec {
    pub arch: Arch,
    pub channels: Vec<usize>,
    pub kernels: Vec<usize>,
    pub depth: usize,
}

impl NetworkSpec {
    pub fn srcnn_lite() -> Self {
        Self {
            arch: Arch::SrcnnLite,
            channels: vec![16, 8],
            kernels: vec![9, 1, 5],
            depth: 3,
        }
    }

    pub fn redcnn_lite() -> Self {
        Self {
            arch: Arch::RedcnnLite,
            channels: vec![16],
            kernels: vec![3],
            depth: 3,
        }
    }

    pub fn edsr_lite() -> Self {
        Self {
            arch: Arch::EdsrLite,
            channels: vec![16],
            kernels: vec![3],
            depth: 2,
        }
    }

    pub fn default_for(arch: Arch) -> Self {
        match arch {
            Arch::SrcnnLite => Self::srcnn_lite(),
            Arch::RedcnnLite => Self::redcnn_lite(),
            Arch::EdsrLite => Self::edsr_lite(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (nc, nk) = match self.arch {
            Arch::SrcnnLite => (2, 3),
            Arch::RedcnnLite | Arch::EdsrLite => (1, 1),
        };
        if self.channels.len() != nc || self.kernels.len() != nk {
            return Err(Error::invalid(format!(
                "{} needs {nc} channel widths and {nk} kernel sizes",
                self.arch
            )));
        }
        if self.channels.contains(&0) {
            return Err(Error::invalid("channel width 0"));
        }
        if self.kernels.iter().any(|k| k % 2 == 0) {
            return Err(Error::invalid("kernel sizes must be odd to preserve shape"));
        }
        match self.arch {
            Arch::SrcnnLite if self.depth != 3 => Err(Error::invalid("srcnn_lite has depth 3")),
            Arch::RedcnnLite if self.depth != 3 => Err(Error::invalid("redcnn_lite has depth 3")),
            Arch::EdsrLite if self.depth == 0 => Err(Error::invalid("edsr_lite needs depth >= 1")),
            _ => Ok(()),
        }
    }

    /// Conv layers in parameter order.
    pub fn layers(&self) -> Vec<ConvLayer> {
        let layer = |name: String, out: usize, inp: usize, k: usize| ConvLayer {
            name,
            out_channels: out,
            in_channels: inp,
            kernel: k,
        };
        match self.arch {
            Arch::SrcnnLite => {
                let (c1, c2) = (self.channels[0], self.channels[1]);
                let k = &self.kernels;
                vec![
                    layer("conv1".into(), c1, 1, k[0]),
                    layer("conv2".into(), c2, c1, k[1]),
                    layer("conv3".into(), 1, c2, k[2]),
                ]
            }
            Arch::RedcnnLite => {
                let (c, k) = (self.channels[0], self.kernels[0]);
                vec![
                    layer("enc1".into(), c, 1, k),
                    layer("enc2".into(), c, c, k),
                    layer("enc3".into(), c, c, k),
                    layer("dec1".into(), c, c, k),
                    layer("dec2".into(), c, c, k),
                    layer("dec3".into(), 1, c, k),
                ]
            }
            Arch::EdsrLite => {
                let (c, k) = (self.channels[0], self.kernels[0]);
                let mut v = vec![layer("head".into(), c, 1, k)];
                for b in 0..self.depth {
                    v.push(layer(format!("block{b}.conv1"), c, c, k));
                    v.push(layer(format!("block{b}.conv2"), c, c, k));
                }
                v.push(layer("tail".into(), 1, c, k));
                v
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(ConvLayer::param_count).sum()
    }

    pub fn max_kernel(&self) -> usize {
        self.kernels.iter().copied().max().unwrap_or(1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConvLayer {
    pub name: String,
    pub out_channels: usize,
    pub in_channels: usize,
    pub kernel: usize,
}

impl ConvLayer {
    pub fn weight_shape(&self) -> Vec<usize> {
        vec![self.out_channels, self.in_channels, self.kernel, self.kernel]
    }

    pub fn param_count(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel * self.kernel + self.out_channels
    }
}

/// Named network parameters in deterministic order (weight, bias per layer).
#[derive(Clone, Debug, PartialEq)]
pub struct ParamSet<T: Element> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Element> ParamSet<T> {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn element_count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Fresh trainable leaves for one graph.
    pub fn to_vars(&self) -> Vec<Var<T>> {
        self.tensors.iter().cloned().map(Var::param).collect()
    }

    pub fn to_constants(&self) -> Vec<Var<T>> {
        self.tensors.iter().cloned().map(Var::constant).collect()
    }

    pub fn checksum(&self) -> u64 {
        self.tensors
            .iter()
            .fold(0u64, |acc, t| acc.rotate_left(7) ^ t.checksum())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(move |i| &mut self.tensors[i])
    }

    pub fn cast<U: Element>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }
}

/// He-normal weights (`std = sqrt(2 / fan_in)`) and zero biases.
pub fn build<T: Element>(spec: &NetworkSpec, seed: u64) -> Result<ParamSet<T>> {
    spec.validate()?;
    let mut rng = rng::rng(rng::derive(seed, &[rng::tag::NET_INIT]));
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for layer in spec.layers() {
        let fan_in = (layer.in_channels * layer.kernel * layer.kernel) as f64;
        let std = (2.0 / fan_in).sqrt();
        let shape = layer.weight_shape();
        let w = Tensor::from_fn(shape, |_| {
            let z: f64 = StandardNormal.sample(&mut rng);
            T::from_f64_lossy(z * std)
        });
        names.push(format!("{}.weight", layer.name));
        tensors.push(w);
        names.push(format!("{}.bias", layer.name));
        tensors.push(Tensor::zeros(vec![layer.out_channels]));
    }
    Ok(ParamSet { names, tensors })
}

/// All-zero parameters with the layout of `spec`.
pub fn zeros<T: Element>(spec: &NetworkSpec) -> Result<ParamSet<T>> {
    spec.validate()?;
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for layer in spec.layers() {
        names.push(format!("{}.weight", layer.name));
        tensors.push(Tensor::zeros(layer.weight_shape()));
        names.push(format!("{}.bias", layer.name));
        tensors.push(Tensor::zeros(vec![layer.out_channels]));
    }
    Ok(ParamSet { names, tensors })
}

fn same_conv<T: Element>(x: &Var<T>, w: &Var<T>, b: &Var<T>) -> Result<Var<T>> {
    let k = w.shape()[2];
    conv2d(x, w, Some(b), (k / 2, k / 2))
}

/// Runs the network on `x: [N, 1, h, w]`.
pub fn forward<T: Element>(spec: &NetworkSpec, params: &[Var<T>], x: &Var<T>) -> Result<Var<T>> {
    let layers = spec.layers();
    if params.len() != 2 * layers.len() {
        return Err(Error::Shape(format!(
            "{} expects {} parameter tensors, got {}",
            spec.arch,
            2 * layers.len(),
            params.len()
        )));
    }
    for (layer, p) in layers.iter().zip(params.chunks_exact(2)) {
        if p[0].shape() != layer.weight_shape().as_slice() || p[1].shape() != [layer.out_channels] {
            return Err(Error::Shape(format!("parameter shapes do not match layer {}", layer.name)));
        }
    }
    match x.shape() {
        [_, 1, h, w] if *h >= spec.max_kernel() && *w >= spec.max_kernel() => {}
        [_, c, _, _] if *c != 1 => {
            return Err(Error::Shape(format!("networks take 1 input channel, got {c}")))
        }
        s => {
            return Err(Error::Shape(format!(
                "input {s:?} must be [N, 1, h, w] with h, w >= {}",
                spec.max_kernel()
            )))
        }
    }

    let conv = |i: usize, input: &Var<T>| same_conv(input, &params[2 * i], &params[2 * i + 1]);
    match spec.arch {
        Arch::SrcnnLite => {
            let h = relu(&conv(0, x)?);
            let h = relu(&conv(1, &h)?);
            conv(2, &h)
        }
        Arch::RedcnnLite => {
            let e1 = relu(&conv(0, x)?);
            let e2 = relu(&conv(1, &e1)?);
            let e3 = relu(&conv(2, &e2)?);
            let d1 = relu(&add(&conv(3, &e3)?, &e2)?);
            let d2 = relu(&conv(4, &d1)?);
            add(&conv(5, &d2)?, x)
        }
        Arch::EdsrLite => {
            let mut h = conv(0, x)?;
            for b in 0..spec.depth {
                let r = relu(&conv(1 + 2 * b, &h)?);
                let r = conv(2 + 2 * b, &r)?;
                h = add(&h, &r)?;
            }
            add(&conv(1 + 2 * spec.depth, &h)?, x)
        }
    }
}

/// Forward pass on plain tensors without recording a graph.
pub fn infer<T: Element>(spec: &NetworkSpec, params: &ParamSet<T>, x: &Tensor<T>) -> Result<Tensor<T>> {
    crate::autodiff::no_grad(|| {
        let out = forward(spec, &params.to_constants(), &Var::constant(x.clone()))?;
        Ok(out.value().clone())
    })
}
