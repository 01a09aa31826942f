//! Network description, weight quantization, shape propagation and the
//! fixed-point reference inference used to validate the simulator.
//!
//! Network files are line oriented. `#` starts a comment, blank lines are
//! ignored, and the first statement must be the input shape:
//!
//! ```text
//! input = 3x32x32
//! conv out=6 k=5 s=1 p=0
//! pool size=2
//! fc out=10
//! ```
//!
//! `s` and `p` default to 1 and 0. Layers appear in execution order; an FC
//! layer after a Conv/Pool layer flattens the `C x H x W` volume channel-major.

use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

const LENET: &str = include_str!("../data/lenet.net");

/// Channels x height x width of a feature map.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub const fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn volume(&self) -> usize {
        self.channels * self.height * self.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LayerSpec {
    Conv {
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Pool {
        size: usize,
    },
    Fc {
        out_features: usize,
    },
}

impl LayerSpec {
    pub fn conv(out_channels: usize, kernel: usize) -> Self {
        LayerSpec::Conv {
            out_channels,
            kernel,
            stride: 1,
            padding: 0,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Conv { .. } => "conv",
            LayerSpec::Pool { .. } => "pool",
            LayerSpec::Fc { .. } => "fc",
        }
    }

    /// True for layers executed as vector-matrix products on the arrays.
    pub fn is_vmm(&self) -> bool {
        !matches!(self, LayerSpec::Pool { .. })
    }

    fn validate(&self, idx: usize) -> Result<()> {
        let bad = |reason: &str| {
            Err(Error::Shape {
                layer: idx,
                reason: reason.to_string(),
            })
        };
        match *self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                ..
            } => {
                if kernel == 0 {
                    return bad("kernel size must be >= 1");
                }
                if stride == 0 {
                    return bad("stride must be >= 1");
                }
                if out_channels == 0 {
                    return bad("conv output channels must be >= 1");
                }
            }
            LayerSpec::Pool { size } => {
                if size == 0 {
                    return bad("pool size must be >= 1");
                }
            }
            LayerSpec::Fc { out_features } => {
                if out_features == 0 {
                    return bad("fc output features must be >= 1");
                }
            }
        }
        Ok(())
    }
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                write!(
                    f,
                    "conv out={out_channels} k={kernel} s={stride} p={padding}"
                )
            }
            LayerSpec::Pool { size } => write!(f, "pool size={size}"),
            LayerSpec::Fc { out_features } => write!(f, "fc out={out_features}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input: Shape,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input: Shape, layers: Vec<LayerSpec>) -> Self {
        Self { input, layers }
    }

    /// LeNet-5 on CIFAR-10 sized input, shipped as `data/lenet.net`.
    pub fn lenet() -> Self {
        LENET.parse().expect("bundled lenet.net is valid")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        fs::read_to_string(path)?.parse()
    }

    /// Indices into `layers` of the Conv/FC layers, in order.
    pub fn vmm_layers(&self) -> Vec<usize> {
        self.layers
            .iter()
            .enumerate()
            .filter(|(_, l)| l.is_vmm())
            .map(|(i, _)| i)
            .collect()
    }

    /// Shape of the input feature map of every layer.
    pub fn input_shapes(&self) -> Result<Vec<Shape>> {
        let out = propagate_shapes(self)?;
        let mut ins = Vec::with_capacity(out.len());
        ins.push(self.input);
        ins.extend_from_slice(&out[..out.len().saturating_sub(1)]);
        Ok(ins)
    }
}

impl fmt::Display for NetworkSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "input = {}", self.input)?;
        for layer in &self.layers {
            writeln!(f, "{layer}")?;
        }
        Ok(())
    }
}

impl FromStr for NetworkSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut input = None;
        let mut layers = Vec::new();
        for (i, raw) in s.lines().enumerate() {
            let line_no = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |reason: String| Error::Parse {
                line: line_no,
                reason,
            };
            if let Some(rest) = line.strip_prefix("input") {
                let rest = rest.trim_start().trim_start_matches('=').trim();
                input = Some(parse_shape(rest).map_err(perr)?);
                continue;
            }
            if input.is_none() {
                return Err(perr("`input = CxHxW` must precede the layers".into()));
            }
            layers.push(parse_layer(line).map_err(perr)?);
        }
        let input = input.ok_or(Error::Parse {
            line: 0,
            reason: "missing `input` line".into(),
        })?;
        Ok(NetworkSpec { input, layers })
    }
}

pub fn parse_shape(s: &str) -> std::result::Result<Shape, String> {
    let dims: Vec<usize> = s
        .split('x')
        .map(|d| {
            d.trim()
                .parse::<usize>()
                .map_err(|e| format!("bad dimension `{d}`: {e}"))
        })
        .collect::<std::result::Result<_, _>>()?;
    match dims.as_slice() {
        [c, h, w] => Ok(Shape::new(*c, *h, *w)),
        _ => Err(format!("expected CxHxW, got `{s}`")),
    }
}

fn parse_layer(line: &str) -> std::result::Result<LayerSpec, String> {
    let mut parts = line.split_whitespace();
    let kind = parts.next().unwrap_or_default();
    let mut fields = Vec::new();
    for tok in parts {
        let (k, v) = tok
            .split_once('=')
            .ok_or_else(|| format!("expected key=value, got `{tok}`"))?;
        let v: usize = v.parse().map_err(|_| format!("bad value in `{tok}`"))?;
        fields.push((k, v));
    }
    let get = |key: &str| fields.iter().find(|(k, _)| *k == key).map(|(_, v)| *v);
    let require = |key: &str| get(key).ok_or_else(|| format!("`{kind}` requires `{key}=`"));
    for (k, _) in &fields {
        let allowed: &[&str] = match kind {
            "conv" => &["out", "k", "s", "p"],
            "pool" => &["size"],
            "fc" => &["out"],
            _ => &[],
        };
        if !allowed.contains(k) {
            return Err(format!("unknown field `{k}` for `{kind}`"));
        }
    }
    match kind {
        "conv" => Ok(LayerSpec::Conv {
            out_channels: require("out")?,
            kernel: require("k")?,
            stride: get("s").unwrap_or(1),
            padding: get("p").unwrap_or(0),
        }),
        "pool" => Ok(LayerSpec::Pool {
            size: require("size")?,
        }),
        "fc" => Ok(LayerSpec::Fc {
            out_features: require("out")?,
        }),
        other => Err(format!("unknown layer kind `{other}`")),
    }
}

/// Output width of a convolution, `None` unless the geometry divides exactly.
pub fn conv_output_width(
    w_in: usize,
    kernel: usize,
    stride: usize,
    padding: usize,
) -> Option<usize> {
    let span = (w_in + 2 * padding).checked_sub(kernel)?;
    if stride == 0 || span % stride != 0 {
        return None;
    }
    Some(span / stride + 1)
}

/// Feature-map shape after every layer.
pub fn propagate_shapes(net: &NetworkSpec) -> Result<Vec<Shape>> {
    let inp = net.input;
    if inp.channels == 0 || inp.height == 0 || inp.width == 0 {
        return Err(Error::Shape {
            layer: 0,
            reason: format!("input shape {inp} must be positive"),
        });
    }
    if net.layers.is_empty() {
        return Err(Error::Shape {
            layer: 0,
            reason: "network has no layers".into(),
        });
    }
    let mut cur = inp;
    let mut shapes = Vec::with_capacity(net.layers.len());
    for (idx, layer) in net.layers.iter().enumerate() {
        layer.validate(idx)?;
        cur = match *layer {
            LayerSpec::Conv {
                out_channels,
                kernel,
                stride,
                padding,
            } => {
                if cur.height != cur.width {
                    return Err(Error::Shape {
                        layer: idx,
                        reason: "non-square feature maps are unsupported".into(),
                    });
                }
                let w = conv_output_width(cur.width, kernel, stride, padding).ok_or_else(|| {
                    Error::Shape {
                        layer: idx,
                        reason: format!(
                            "({} - {kernel} + 2*{padding}) / {stride} is not a positive integer",
                            cur.width
                        ),
                    }
                })?;
                Shape::new(out_channels, w, w)
            }
            LayerSpec::Pool { size } => {
                if !cur.width.is_multiple_of(size) || !cur.height.is_multiple_of(size) {
                    return Err(Error::Shape {
                        layer: idx,
                        reason: format!(
                            "{}x{} is not divisible by pool size {size}",
                            cur.height, cur.width
                        ),
                    });
                }
                Shape::new(cur.channels, cur.height / size, cur.width / size)
            }
            LayerSpec::Fc { out_features } => Shape::new(out_features, 1, 1),
        };
        shapes.push(cur);
    }
    Ok(shapes)
}

/// One layer's signed 8-bit weights, stored `[out][in]` with the input index
/// flattened `(channel, ky, kx)` for convolutions.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedTensor {
    pub values: Vec<i8>,
    pub scale: f64,
    pub outputs: usize,
    pub inputs: usize,
}

impl QuantizedTensor {
    #[inline]
    pub fn get(&self, out: usize, inp: usize) -> i8 {
        self.values[out * self.inputs + inp]
    }

    pub fn dequantize(&self) -> Vec<f64> {
        self.values.iter().map(|&q| q as f64 * self.scale).collect()
    }
}

/// Quantized weights for every layer; `None` at pooling layers.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizedWeights {
    pub layers: Vec<Option<QuantizedTensor>>,
}

impl QuantizedWeights {
    pub fn layer(&self, idx: usize) -> Option<&QuantizedTensor> {
        self.layers.get(idx).and_then(|l| l.as_ref())
    }
}

/// Symmetric per-tensor quantization, clamped to [-127, 127].
pub fn quantize_weights(weights: &[f64], bits: u32) -> Result<(Vec<i8>, f64)> {
    if bits != 8 {
        return Err(Error::Quantize(format!(
            "only 8-bit quantization is supported, got {bits}"
        )));
    }
    if let Some(bad) = weights.iter().find(|w| !w.is_finite()) {
        return Err(Error::Quantize(format!("non-finite weight {bad}")));
    }
    let max = weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    if max == 0.0 {
        return Ok((vec![0; weights.len()], 1.0));
    }
    let scale = max / 127.0;
    let q = weights
        .iter()
        .map(|w| (w / scale).round().clamp(-127.0, 127.0) as i8)
        .collect();
    Ok((q, scale))
}

/// Float weights per layer (empty at pooling layers), `[out][in]` order.
#[derive(Debug, Clone, PartialEq)]
pub struct FloatWeights {
    pub layers: Vec<Vec<f64>>,
}

/// `(outputs, inputs)` of every layer's weight matrix; `(0, 0)` for pooling.
pub fn weight_dims(net: &NetworkSpec) -> Result<Vec<(usize, usize)>> {
    let ins = net.input_shapes()?;
    Ok(net
        .layers
        .iter()
        .zip(&ins)
        .map(|(l, s)| match *l {
            LayerSpec::Conv {
                out_channels,
                kernel,
                ..
            } => (out_channels, kernel * kernel * s.channels),
            LayerSpec::Fc { out_features } => (out_features, s.volume()),
            LayerSpec::Pool { .. } => (0, 0),
        })
        .collect())
}

impl FloatWeights {
    /// Seeded Gaussian weights with std `1/sqrt(fan_in)`.
    pub fn random(net: &NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = weight_dims(net)?
            .into_iter()
            .map(|(o, i)| {
                if o == 0 {
                    return Vec::new();
                }
                let normal = Normal::new(0.0, 1.0 / (i as f64).sqrt()).expect("positive std");
                (0..o * i).map(|_| normal.sample(&mut rng)).collect()
            })
            .collect();
        Ok(Self { layers })
    }

    pub fn quantize(&self, net: &NetworkSpec) -> Result<QuantizedWeights> {
        let dims = weight_dims(net)?;
        if dims.len() != self.layers.len() {
            return Err(Error::Quantize(format!(
                "weights cover {} layers, network has {}",
                self.layers.len(),
                dims.len()
            )));
        }
        let mut layers = Vec::with_capacity(dims.len());
        for (idx, ((o, i), w)) in dims.into_iter().zip(&self.layers).enumerate() {
            if o == 0 {
                layers.push(None);
                continue;
            }
            if w.len() != o * i {
                return Err(Error::Quantize(format!(
                    "layer {idx}: expected {} weights ({o}x{i}), found {}",
                    o * i,
                    w.len()
                )));
            }
            let (values, scale) = quantize_weights(w, 8)?;
            layers.push(Some(QuantizedTensor {
                values,
                scale,
                outputs: o,
                inputs: i,
            }));
        }
        Ok(QuantizedWeights { layers })
    }

    /// Writes little-endian f32 values plus a `<path>.shape` manifest.
    pub fn save(&self, net: &NetworkSpec, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let dims = weight_dims(net)?;
        let mut bytes = Vec::new();
        let mut manifest = String::from("# layer kind outputs inputs\n");
        for (idx, (w, (o, i))) in self.layers.iter().zip(dims).enumerate() {
            if o == 0 {
                continue;
            }
            manifest.push_str(&format!("{idx} {} {o} {i}\n", net.layers[idx].kind_name()));
            for v in w {
                bytes.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        fs::write(path, bytes)?;
        fs::write(manifest_path(path), manifest)?;
        Ok(())
    }

    pub fn load(net: &NetworkSpec, path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        let manifest = fs::read_to_string(manifest_path(path))?;
        let dims = weight_dims(net)?;
        let mut layers = vec![Vec::new(); dims.len()];
        let mut offset = 0usize;
        for (n, line) in manifest.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |reason: String| Error::Parse {
                line: n + 1,
                reason,
            };
            let f: Vec<&str> = line.split_whitespace().collect();
            if f.len() != 4 {
                return Err(perr(format!(
                    "expected `layer kind outputs inputs`, got `{line}`"
                )));
            }
            let idx: usize = f[0].parse().map_err(|_| perr("bad layer index".into()))?;
            let o: usize = f[2].parse().map_err(|_| perr("bad outputs".into()))?;
            let i: usize = f[3].parse().map_err(|_| perr("bad inputs".into()))?;
            if dims.get(idx) != Some(&(o, i)) {
                return Err(perr(format!(
                    "layer {idx} is {o}x{i} in the manifest but not in the network"
                )));
            }
            let end = offset + o * i * 4;
            if end > bytes.len() {
                return Err(perr("weight file is shorter than the manifest".into()));
            }
            layers[idx] = bytes[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            offset = end;
        }
        for (idx, (o, _)) in dims.iter().enumerate() {
            if *o > 0 && layers[idx].is_empty() {
                return Err(Error::Parse {
                    line: 0,
                    reason: format!("manifest has no entry for layer {idx}"),
                });
            }
        }
        Ok(Self { layers })
    }
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".shape");
    s.into()
}

/// Unsigned 8-bit feature map, `(c, y, x)` row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Activation {
    pub shape: Shape,
    pub data: Vec<u8>,
}

impl Activation {
    pub fn new(shape: Shape, data: Vec<u8>) -> Self {
        assert_eq!(
            shape.volume(),
            data.len(),
            "activation data does not match its shape"
        );
        Self { shape, data }
    }

    pub fn zeros(shape: Shape) -> Self {
        Self {
            shape,
            data: vec![0; shape.volume()],
        }
    }

    pub fn random(shape: Shape, rng: &mut impl rand::Rng) -> Self {
        let data = (0..shape.volume()).map(|_| rng.random::<u8>()).collect();
        Self { shape, data }
    }

    #[inline]
    pub fn at(&self, c: usize, y: usize, x: usize) -> u8 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }
}

/// Seeded uniform random images.
pub fn synthetic_images(shape: Shape, count: usize, seed: u64) -> Vec<Activation> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| Activation::random(shape, &mut rng))
        .collect()
}

/// Reads up to `count` images from a CIFAR-10 binary batch
/// (3073-byte records: label byte + 3x32x32 channel-major pixels).
pub fn load_cifar_batch(path: impl AsRef<Path>, count: usize) -> Result<Vec<Activation>> {
    const RECORD: usize = 3073;
    let bytes = fs::read(path)?;
    if bytes.len() % RECORD != 0 {
        return Err(Error::Parse {
            line: 0,
            reason: format!(
                "CIFAR batch length {} is not a multiple of {RECORD}",
                bytes.len()
            ),
        });
    }
    Ok(bytes
        .chunks_exact(RECORD)
        .take(count)
        .map(|r| Activation::new(Shape::new(3, 32, 32), r[1..].to_vec()))
        .collect())
}

/// Rescales non-negative accumulators into 8 bits with the smallest right
/// shift that brings the tensor maximum to <= 255. Negative values clamp to 0.
pub fn requantize(values: &[i64]) -> Vec<u8> {
    let max = values.iter().copied().max().unwrap_or(0).max(0);
    let mut shift = 0u32;
    while (max >> shift) > 255 {
        shift += 1;
    }
    values.iter().map(|&v| (v.max(0) >> shift) as u8).collect()
}

/// Integer output of one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerOutput {
    pub shape: Shape,
    pub values: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Inference {
    pub layers: Vec<LayerOutput>,
}

impl Inference {
    pub fn logits(&self) -> &[i64] {
        &self.layers.last().expect("non-empty network").values
    }
}

/// Applies ReLU unless `last`, returning the recorded output and the 8-bit
/// activation handed to the next layer.
pub fn finish_vmm_layer(acc: Vec<i64>, shape: Shape, last: bool) -> (LayerOutput, Activation) {
    let values: Vec<i64> = if last {
        acc
    } else {
        acc.into_iter().map(|v| v.max(0)).collect()
    };
    let act = Activation::new(shape, requantize(&values));
    (LayerOutput { shape, values }, act)
}

pub fn max_pool(act: &Activation, size: usize) -> Activation {
    let s = act.shape;
    let out = Shape::new(s.channels, s.height / size, s.width / size);
    let mut data = Vec::with_capacity(out.volume());
    for c in 0..out.channels {
        for oy in 0..out.height {
            for ox in 0..out.width {
                let mut m = 0u8;
                for dy in 0..size {
                    for dx in 0..size {
                        m = m.max(act.at(c, oy * size + dy, ox * size + dx));
                    }
                }
                data.push(m);
            }
        }
    }
    Activation::new(out, data)
}

/// Bit-exact fixed-point inference: integer accumulation, ReLU after every
/// Conv/FC except the final layer, max pooling, and [`requantize`] between
/// layers.
pub fn infer_reference(
    net: &NetworkSpec,
    weights: &QuantizedWeights,
    image: &Activation,
) -> Result<Inference> {
    if image.shape != net.input {
        return Err(Error::Shape {
            layer: 0,
            reason: format!(
                "image shape {} does not match network input {}",
                image.shape, net.input
            ),
        });
    }
    let shapes = propagate_shapes(net)?;
    let last = net.layers.len() - 1;
    let mut act = image.clone();
    let mut outputs = Vec::with_capacity(net.layers.len());
    for (idx, layer) in net.layers.iter().enumerate() {
        let shape = shapes[idx];
        match *layer {
            LayerSpec::Conv {
                kernel,
                stride,
                padding,
                ..
            } => {
                let w = weights.layer(idx).ok_or_else(|| Error::Shape {
                    layer: idx,
                    reason: "missing weights".into(),
                })?;
                let acc = conv_accumulate(&act, w, kernel, stride, padding, shape);
                let (out, next) = finish_vmm_layer(acc, shape, idx == last);
                outputs.push(out);
                act = next;
            }
            LayerSpec::Fc { .. } => {
                let w = weights.layer(idx).ok_or_else(|| Error::Shape {
                    layer: idx,
                    reason: "missing weights".into(),
                })?;
                if w.inputs != act.data.len() {
                    return Err(Error::Shape {
                        layer: idx,
                        reason: format!("fc expects {} inputs, got {}", w.inputs, act.data.len()),
                    });
                }
                let acc: Vec<i64> = (0..w.outputs)
                    .map(|o| {
                        act.data
                            .iter()
                            .enumerate()
                            .map(|(i, &x)| x as i64 * w.get(o, i) as i64)
                            .sum()
                    })
                    .collect();
                let (out, next) = finish_vmm_layer(acc, shape, idx == last);
                outputs.push(out);
                act = next;
            }
            LayerSpec::Pool { size } => {
                act = max_pool(&act, size);
                outputs.push(LayerOutput {
                    shape,
                    values: act.data.iter().map(|&v| v as i64).collect(),
                });
            }
        }
    }
    Ok(Inference { layers: outputs })
}

fn conv_accumulate(
    act: &Activation,
    w: &QuantizedTensor,
    kernel: usize,
    stride: usize,
    padding: usize,
    out: Shape,
) -> Vec<i64> {
    let s = act.shape;
    let mut acc = vec![0i64; out.volume()];
    for o in 0..out.channels {
        for oy in 0..out.height {
            for ox in 0..out.width {
                let mut sum = 0i64;
                for c in 0..s.channels {
                    for ky in 0..kernel {
                        let y = (oy * stride + ky) as isize - padding as isize;
                        if y < 0 || y >= s.height as isize {
                            continue;
                        }
                        for kx in 0..kernel {
                            let x = (ox * stride + kx) as isize - padding as isize;
                            if x < 0 || x >= s.width as isize {
                                continue;
                            }
                            let wi = (c * kernel + ky) * kernel + kx;
                            sum += act.at(c, y as usize, x as usize) as i64 * w.get(o, wi) as i64;
                        }
                    }
                }
                acc[(o * out.height + oy) * out.width + ox] = sum;
            }
        }
    }
    acc
}
