//! The shared per-pixel segmentation model.
//!
//! Each pixel sees a `(2r+1)²·C` clamp-to-edge window, passes through ReLU
//! affine layers (`hidden_dims…`, then `feature_dim`), and a linear
//! classifier. The last ReLU activation is the feature map `f`; the softmax of
//! the classifier output is the prediction map `p`. Source and target
//! branches run through the same [`ModelState`].

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::numcore::{
    affine_backward, affine_forward, relu_affine_backward, relu_affine_forward, softmax, DualTensor,
    Tensor,
};
use crate::synthdomain::Raster;
use crate::util::{atomic_write, checked_extent, Reader};

pub const MODEL_MAGIC: [u8; 4] = *b"PREM";
const MODEL_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ModelConfig {
    pub bands: usize,
    pub window_radius: usize,
    pub hidden_dims: Vec<usize>,
    pub feature_dim: usize,
    pub num_classes: usize,
}

impl ModelConfig {
    pub fn input_dim(&self) -> usize {
        let side = 2 * self.window_radius + 1;
        side * side * self.bands
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim < 2 || self.num_classes < 2 {
            return Err(Error::Config(format!(
                "need feature_dim >= 2 and num_classes >= 2, got {} and {}",
                self.feature_dim, self.num_classes
            )));
        }
        if self.bands == 0 || self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("zero-width layer".into()));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every affine layer, classifier last.
    fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut widths = vec![self.input_dim()];
        widths.extend(&self.hidden_dims);
        widths.push(self.feature_dim);
        widths.push(self.num_classes);
        widths.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weight: DualTensor,
    pub bias: DualTensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelState {
    pub config: ModelConfig,
    pub layers: Vec<Layer>,
    velocity: Vec<(Tensor, Tensor)>,
    pub step: u64,
    /// Bumped on every parameter change; forward caches record it.
    generation: u64,
}

/// Activations kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    input: Tensor,
    /// Output of every ReLU layer; the last one is the feature map.
    activations: Vec<Tensor>,
    generation: u64,
}

#[derive(Clone, Debug)]
pub struct ForwardMaps {
    pub height: usize,
    pub width: usize,
    /// `(H·W)×D` feature map, row-major over pixels.
    pub features: Tensor,
    /// `(H·W)×K` class probabilities.
    pub probs: Tensor,
    pub cache: Option<ForwardCache>,
}

impl ForwardMaps {
    pub fn num_pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn drop_cache(&mut self) {
        self.cache = None;
    }

    /// Per-pixel argmax, ties to the lowest class index.
    pub fn predicted_classes(&self) -> Vec<u16> {
        (0..self.probs.rows()).map(|i| argmax(self.probs.row(i)) as u16).collect()
    }
}

pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

impl ModelState {
    /// He-uniform weights (`±√(6/fan_in)`), zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(fin, fout)| {
                let bound = (6.0 / fin as f64).sqrt();
                let w: Vec<f64> = (0..fin * fout).map(|_| rng.gen_range(-bound..bound)).collect();
                Layer {
                    weight: DualTensor::new(Tensor::from_raw(vec![fin, fout], w).unwrap()),
                    bias: DualTensor::new(Tensor::zeros(&[fout])),
                }
            })
            .collect();
        Ok(Self::from_layers(config, layers, 0))
    }

    fn from_layers(config: ModelConfig, layers: Vec<Layer>, step: u64) -> Self {
        let velocity = layers
            .iter()
            .map(|l| (Tensor::zeros(l.weight.value.shape()), Tensor::zeros(l.bias.value.shape())))
            .collect();
        Self { config, layers, velocity, step, generation: 0 }
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.value.len() + l.bias.value.len()).sum()
    }

    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.value.data());
            out.extend_from_slice(l.bias.value.data());
        }
        out
    }

    pub fn grads_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for l in &self.layers {
            out.extend_from_slice(l.weight.grad.data());
            out.extend_from_slice(l.bias.grad.data());
        }
        out
    }

    pub fn set_params_flat(&mut self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.num_params() {
            return Err(Error::ShapeMismatch(format!(
                "{} parameters given, model has {}",
                theta.len(),
                self.num_params()
            )));
        }
        let mut off = 0;
        for l in &mut self.layers {
            for t in [&mut l.weight.value, &mut l.bias.value] {
                let n = t.len();
                t.data_mut().copy_from_slice(&theta[off..off + n]);
                off += n;
            }
        }
        self.generation += 1;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for l in &mut self.layers {
            l.weight.zero_grad();
            l.bias.zero_grad();
        }
    }

    /// Gather clamp-to-edge windows into an `(H·W)×F` matrix.
    fn extract_windows(&self, raster: &Raster) -> Result<Tensor> {
        if raster.bands != self.config.bands {
            return Err(Error::ShapeMismatch(format!(
                "raster has {} bands, model expects {}",
                raster.bands, self.config.bands
            )));
        }
        let (h, w, c) = (raster.height as i64, raster.width as i64, raster.bands);
        let r = self.config.window_radius as i64;
        let f = self.config.input_dim();
        let mut x = Vec::with_capacity((h * w) as usize * f);
        for row in 0..h {
            for col in 0..w {
                for dr in -r..=r {
                    let rr = (row + dr).clamp(0, h - 1) as usize;
                    for dc in -r..=r {
                        let cc = (col + dc).clamp(0, w - 1) as usize;
                        let base = (rr * raster.width + cc) * c;
                        x.extend(raster.values[base..base + c].iter().map(|&v| v as f64));
                    }
                }
            }
        }
        Tensor::from_raw(vec![(h * w) as usize, f], x)
    }

    /// Run the model over a raster. `keep_cache` retains what backward needs.
    pub fn forward(&self, raster: &Raster, keep_cache: bool) -> Result<ForwardMaps> {
        let input = self.extract_windows(raster)?;
        let n_relu = self.layers.len() - 1;
        let mut activations: Vec<Tensor> = Vec::with_capacity(n_relu);
        for (i, l) in self.layers[..n_relu].iter().enumerate() {
            let x = if i == 0 { &input } else { &activations[i - 1] };
            let y = relu_affine_forward(x, &l.weight.value, &l.bias.value)?;
            activations.push(y);
        }
        let cls = &self.layers[n_relu];
        let logits = affine_forward(&activations[n_relu - 1], &cls.weight.value, &cls.bias.value)?;
        let probs = softmax(&logits);
        let features = if keep_cache {
            activations[n_relu - 1].clone()
        } else {
            activations.pop().unwrap()
        };
        if features.data().iter().any(|v| !v.is_finite()) || probs.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NumericalAbort("non-finite activation in forward pass".into()));
        }
        let cache = keep_cache.then(|| ForwardCache { input, activations, generation: self.generation });
        Ok(ForwardMaps { height: raster.height, width: raster.width, features, probs, cache })
    }

    /// Smallest `|pre-activation|` over every hidden unit and pixel. Finite
    /// differences are only trustworthy when this exceeds the step size.
    pub fn relu_margin(&self, raster: &Raster) -> Result<f64> {
        let mut x = self.extract_windows(raster)?;
        let mut margin = f64::INFINITY;
        for l in &self.layers[..self.layers.len() - 1] {
            let mut y = affine_forward(&x, &l.weight.value, &l.bias.value)?;
            for v in y.data_mut() {
                margin = margin.min(v.abs());
                *v = v.max(0.0);
            }
            x = y;
        }
        Ok(margin)
    }

    /// Accumulate parameter gradients given `dL/dlogits` and optionally
    /// `dL/df` for every pixel of a cached forward pass.
    pub fn backward(&mut self, maps: &ForwardMaps, dlogits: &Tensor, dfeatures: Option<&Tensor>) -> Result<()> {
        let cache = maps
            .cache
            .as_ref()
            .ok_or_else(|| Error::StaleCache("forward was run without a cache".into()))?;
        if cache.generation != self.generation {
            return Err(Error::StaleCache("parameters changed since forward".into()));
        }
        let n = maps.num_pixels();
        let k = self.config.num_classes;
        if dlogits.shape() != [n, k] {
            return Err(Error::ShapeMismatch(format!("dlogits {:?}, expected [{n}, {k}]", dlogits.shape())));
        }
        let n_relu = self.layers.len() - 1;
        let feats = &cache.activations[n_relu - 1];
        let cls = &self.layers[n_relu];
        let g = affine_backward(feats, &cls.weight.value, dlogits, true)?;
        let mut upstream = g.dx.unwrap();
        self.layers[n_relu].weight.grad.add_assign(&g.dw)?;
        self.layers[n_relu].bias.grad.add_assign(&g.db)?;
        if let Some(df) = dfeatures {
            upstream.add_assign(df)?;
        }
        for i in (0..n_relu).rev() {
            let x = if i == 0 { &cache.input } else { &cache.activations[i - 1] };
            let l = &self.layers[i];
            let g = relu_affine_backward(x, &l.weight.value, &cache.activations[i], &upstream, i > 0)?;
            self.layers[i].weight.grad.add_assign(&g.dw)?;
            self.layers[i].bias.grad.add_assign(&g.db)?;
            if let Some(dx) = g.dx {
                upstream = dx;
            }
        }
        Ok(())
    }

    /// Momentum SGD with L2 weight decay folded into the gradient:
    /// `v ← momentum·v + (g + decay·θ)`, `θ ← θ − lr·v`. Clears gradients.
    pub fn sgd_step(&mut self, lr: f64, momentum: f64, weight_decay: f64) {
        for (l, (vw, vb)) in self.layers.iter_mut().zip(self.velocity.iter_mut()) {
            for (p, v) in [(&mut l.weight, vw), (&mut l.bias, vb)] {
                let theta = p.value.data_mut();
                let grad = p.grad.data();
                for ((t, g), vel) in theta.iter_mut().zip(grad).zip(v.data_mut()) {
                    *vel = momentum * *vel + g + weight_decay * *t;
                    *t -= lr * *vel;
                }
                p.grad.fill(0.0);
            }
        }
        self.step += 1;
        self.generation += 1;
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let u = |v: usize| -> Result<[u8; 4]> {
            u32::try_from(v)
                .map(u32::to_le_bytes)
                .map_err(|_| Error::DimensionOverflow(format!("{v}")))
        };
        let c = &self.config;
        let mut out = Vec::new();
        out.extend_from_slice(&MODEL_MAGIC);
        out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
        out.extend_from_slice(&u(c.bands)?);
        out.extend_from_slice(&u(c.window_radius)?);
        out.extend_from_slice(&u(c.hidden_dims.len())?);
        for &d in &c.hidden_dims {
            out.extend_from_slice(&u(d)?);
        }
        out.extend_from_slice(&u(c.feature_dim)?);
        out.extend_from_slice(&u(c.num_classes)?);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&u(self.layers.len() * 2)?);
        for l in &self.layers {
            for t in [&l.weight.value, &l.bias.value] {
                out.extend_from_slice(&u(t.shape().len())?);
                for &d in t.shape() {
                    out.extend_from_slice(&u(d)?);
                }
                for &v in t.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader::new(bytes);
        rd.magic(&MODEL_MAGIC)?;
        let version = rd.u32("version")?;
        if version != MODEL_VERSION {
            return Err(Error::UnsupportedVersion(version));
        }
        let bands = rd.u32("bands")? as usize;
        let window_radius = rd.u32("window radius")? as usize;
        let n_hidden = rd.u32("hidden count")? as usize;
        if n_hidden > 64 {
            return Err(Error::DimensionOverflow(format!("{n_hidden} hidden layers")));
        }
        let hidden_dims = (0..n_hidden)
            .map(|_| rd.u32("hidden width").map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let feature_dim = rd.u32("feature dim")? as usize;
        let num_classes = rd.u32("classes")? as usize;
        let step = rd.u64("step")?;
        let config = ModelConfig { bands, window_radius, hidden_dims, feature_dim, num_classes };
        config.validate()?;
        let dims = config.layer_dims();
        let n_tensors = rd.u32("tensor count")? as usize;
        if n_tensors != dims.len() * 2 {
            return Err(Error::ShapeMismatch(format!(
                "checkpoint has {n_tensors} tensors, config implies {}",
                dims.len() * 2
            )));
        }
        let mut read_tensor = |expect: &[usize]| -> Result<Tensor> {
            let ndim = rd.u32("ndim")? as usize;
            if ndim > 8 {
                return Err(Error::DimensionOverflow(format!("{ndim} dims")));
            }
            let shape32 = (0..ndim).map(|_| rd.u32("dim")).collect::<Result<Vec<_>>>()?;
            let n = checked_extent(&shape32, "tensor")?;
            let shape: Vec<usize> = shape32.iter().map(|&d| d as usize).collect();
            if shape != expect {
                return Err(Error::ShapeMismatch(format!("tensor {shape:?}, expected {expect:?}")));
            }
            let nbytes = n.checked_mul(4).ok_or_else(|| Error::DimensionOverflow("tensor payload".into()))?;
            let data = rd
                .take(nbytes, "tensor payload")?
                .chunks_exact(4)
                .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64)
                .collect();
            Tensor::new(shape, data)
        };
        let mut layers = Vec::with_capacity(dims.len());
        for &(fin, fout) in &dims {
            let w = read_tensor(&[fin, fout])?;
            let b = read_tensor(&[fout])?;
            layers.push(Layer { weight: DualTensor::new(w), bias: DualTensor::new(b) });
        }
        rd.finish("model checkpoint")?;
        Ok(Self::from_layers(config, layers, step))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &self.encode()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path)?)
    }

    /// Round every parameter to checkpoint (f32) precision.
    pub fn quantize_to_checkpoint(&mut self) {
        for l in &mut self.layers {
            for t in [&mut l.weight.value, &mut l.bias.value] {
                for v in t.data_mut() {
                    *v = *v as f32 as f64;
                }
            }
        }
        self.generation += 1;
    }
}

/// `base·(1 − iter/max_iter)^power`.
pub fn poly_lr(base_lr: f64, iter: usize, max_iter: usize, power: f64) -> Result<f64> {
    if max_iter == 0 || iter > max_iter {
        return Err(Error::InvalidArgument(format!("poly schedule iter {iter} of {max_iter}")));
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(power))
}
