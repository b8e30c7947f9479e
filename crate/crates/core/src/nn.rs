//! Named parameters, their binding onto a tape, and the layers both
//! networks are assembled from.

use std::collections::BTreeMap;

use hkd_tensor::{ConvSpec, Element, Gradients, Tape, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{CoreError, Result};

/// Parameters keyed by dotted name, iterated in sorted order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T: Element = f32> {
    params: BTreeMap<String, Tensor<T>>,
}

impl<T: Element> ParamStore<T> {
    pub fn new() -> Self {
        Self {
            params: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor<T>) {
        self.params.insert(name.into(), value);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.params.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.params.get_mut(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    /// Number of named tensors.
    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// Total number of stored scalars.
    pub fn count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Scalars stored under names starting with `prefix`.
    pub fn count_prefix(&self, prefix: &str) -> usize {
        self.iter()
            .filter(|(k, _)| k.starts_with(prefix))
            .map(|(_, v)| v.numel())
            .sum()
    }

    pub fn cast<U: Element>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// The subset whose names start with `prefix`.
    pub fn filter_prefix(&self, prefix: &str) -> Self {
        Self {
            params: self
                .params
                .iter()
                .filter(|(k, _)| k.starts_with(prefix))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }

    pub fn extend(&mut self, other: ParamStore<T>) {
        self.params.extend(other.params);
    }

    /// Replaces every element of `name` with `value`.
    pub fn fill(&mut self, name: &str, value: T) -> Result<()> {
        let t = self
            .params
            .get_mut(name)
            .ok_or_else(|| CoreError::Usage(format!("no parameter named {name}")))?;
        *t = Tensor::full(t.shape().to_vec(), value);
        Ok(())
    }
}

/// A tape plus the parameters it reads. Parameters are bound lazily on first
/// use; in frozen mode they enter as constants and never receive gradients.
pub struct Graph<'p, T: Element = f32> {
    pub tape: Tape<T>,
    params: &'p ParamStore<T>,
    bound: BTreeMap<String, Var>,
    trainable: bool,
}

impl<'p, T: Element> Graph<'p, T> {
    pub fn trainable(params: &'p ParamStore<T>) -> Self {
        Self {
            tape: Tape::new(),
            params,
            bound: BTreeMap::new(),
            trainable: true,
        }
    }

    /// Evaluation graph on a no-grad tape.
    pub fn frozen(params: &'p ParamStore<T>) -> Self {
        Self {
            tape: Tape::no_grad(),
            params,
            bound: BTreeMap::new(),
            trainable: false,
        }
    }

    pub fn is_trainable(&self) -> bool {
        self.trainable
    }

    pub fn param(&mut self, name: &str) -> Result<Var> {
        if let Some(v) = self.bound.get(name) {
            return Ok(*v);
        }
        let value = self
            .params
            .get(name)
            .ok_or_else(|| CoreError::Usage(format!("parameter {name} is not in the store")))?
            .clone();
        let var = if self.trainable {
            self.tape.leaf(value, true)
        } else {
            self.tape.constant(value)
        };
        self.bound.insert(name.to_string(), var);
        Ok(var)
    }

    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.tape.constant(value)
    }

    pub fn bound(&self) -> impl Iterator<Item = (&str, Var)> {
        self.bound.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Gradients of every bound parameter that received one.
    pub fn param_grads(&self, grads: &Gradients<T>) -> BTreeMap<String, Tensor<T>> {
        self.bound
            .iter()
            .filter_map(|(k, v)| grads.get(*v).map(|g| (k.clone(), g.clone())))
            .collect()
    }
}

/// Per-parameter RNG stream derived from the run seed and the parameter
/// name, so initial values do not depend on construction order.
pub fn param_rng(seed: u64, name: &str) -> ChaCha8Rng {
    // FNV-1a over the name, mixed with the seed.
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    ChaCha8Rng::seed_from_u64(h ^ seed.rotate_left(17))
}

fn kaiming(shape: Vec<usize>, fan_in: usize, seed: u64, name: &str) -> Tensor {
    gaussian(shape, (2.0 / fan_in.max(1) as f64).sqrt(), seed, name)
}

fn gaussian(shape: Vec<usize>, std: f64, seed: u64, name: &str) -> Tensor {
    let normal = Normal::new(0.0, std).expect("finite std");
    let mut rng = param_rng(seed, name);
    let numel = shape.iter().product();
    let data = (0..numel).map(|_| normal.sample(&mut rng) as f32).collect();
    Tensor::new(shape, data).expect("shape product matches")
}

/// How a layer's weights start out.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Init {
    /// Normal with variance `2 / fan_in`, zero bias.
    Kaiming,
    /// All zeros, used where a layer must start as a no-op.
    Zeros,
}

/// Static description of one layer for cost analysis.
#[derive(Clone, Debug, PartialEq)]
pub enum LayerOp {
    Conv {
        name: String,
        spec: ConvSpec,
        batch: usize,
        out_hw: (usize, usize),
    },
    ConvTranspose {
        name: String,
        spec: ConvSpec,
        batch: usize,
        in_hw: (usize, usize),
    },
    /// Elementwise work (activations, residual adds, attention scaling,
    /// pooling), counted as one FLOP per element touched.
    Elementwise { name: String, elements: usize },
    /// A layer with no cost model.
    Opaque { name: String },
}

/// Standard convolution with optional bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv {
    pub name: String,
    pub spec: ConvSpec,
    pub bias: bool,
}

impl Conv {
    pub fn new(name: impl Into<String>, spec: ConvSpec) -> Self {
        Self {
            name: name.into(),
            spec,
            bias: true,
        }
    }

    fn weight_name(&self) -> String {
        format!("{}.weight", self.name)
    }

    fn bias_name(&self) -> String {
        format!("{}.bias", self.name)
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64, init: Init) {
        let s = &self.spec;
        let shape = s.weight_shape().to_vec();
        let w = match init {
            Init::Kaiming => kaiming(shape, s.in_channels / s.groups * s.kernel_h * s.kernel_w, seed, &self.weight_name()),
            Init::Zeros => Tensor::zeros(shape),
        };
        store.insert(self.weight_name(), w);
        if self.bias {
            store.insert(self.bias_name(), Tensor::zeros([s.out_channels]));
        }
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(&self.weight_name())?;
        let b = if self.bias { Some(g.param(&self.bias_name())?) } else { None };
        Ok(g.tape.conv2d(x, w, b, self.spec)?)
    }

    pub fn param_count(&self) -> usize {
        self.spec.weight_count() + if self.bias { self.spec.out_channels } else { 0 }
    }

    pub fn layer_op(&self, batch: usize, hw: (usize, usize)) -> Result<(LayerOp, (usize, usize))> {
        let out_hw = self.spec.output_hw(hw.0, hw.1)?;
        Ok((
            LayerOp::Conv {
                name: self.name.clone(),
                spec: self.spec,
                batch,
                out_hw,
            },
            out_hw,
        ))
    }
}

/// Depthwise `k×k` stage followed by a pointwise `1×1` stage. Only the
/// pointwise stage carries a bias: a depthwise bias would pass linearly into
/// the pointwise sum and be redundant.
#[derive(Clone, Debug, PartialEq)]
pub struct SeparableConv {
    pub name: String,
    pub depthwise: ConvSpec,
    pub out_channels: usize,
}

impl SeparableConv {
    /// Separable replacement for a standard `spec`.
    pub fn replacing(name: impl Into<String>, spec: ConvSpec) -> Self {
        let depthwise = ConvSpec::depthwise(spec.in_channels, spec.kernel_h)
            .with_stride(spec.stride)
            .with_padding(spec.padding)
            .with_pad_mode(spec.pad_mode);
        Self {
            name: name.into(),
            depthwise,
            out_channels: spec.out_channels,
        }
    }

    fn pointwise(&self) -> ConvSpec {
        ConvSpec::new(self.depthwise.in_channels, self.out_channels, 1)
    }

    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let dw = format!("{}.dw.weight", self.name);
        let pw = format!("{}.pw.weight", self.name);
        let k = self.depthwise.kernel_h * self.depthwise.kernel_w;
        store.insert(dw.clone(), kaiming(self.depthwise.weight_shape().to_vec(), k, seed, &dw));
        // The pointwise stage sees Cin inputs per output; together with the
        // depthwise fan-in this keeps the composed variance near Kaiming.
        let pws = self.pointwise();
        store.insert(pw.clone(), kaiming(pws.weight_shape().to_vec(), pws.in_channels, seed, &pw));
        store.insert(format!("{}.pw.bias", self.name), Tensor::zeros([self.out_channels]));
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let dw = g.param(&format!("{}.dw.weight", self.name))?;
        let pw = g.param(&format!("{}.pw.weight", self.name))?;
        let pb = g.param(&format!("{}.pw.bias", self.name))?;
        Ok(g.tape.depthwise_separable_conv(x, dw, None, pw, Some(pb), self.depthwise)?)
    }

    pub fn param_count(&self) -> usize {
        self.depthwise.weight_count() + self.pointwise().weight_count() + self.out_channels
    }

    pub fn layer_ops(&self, batch: usize, hw: (usize, usize)) -> Result<(Vec<LayerOp>, (usize, usize))> {
        let out_hw = self.depthwise.output_hw(hw.0, hw.1)?;
        Ok((
            vec![
                LayerOp::Conv {
                    name: format!("{}.dw", self.name),
                    spec: self.depthwise,
                    batch,
                    out_hw,
                },
                LayerOp::Conv {
                    name: format!("{}.pw", self.name),
                    spec: self.pointwise(),
                    batch,
                    out_hw,
                },
            ],
            out_hw,
        ))
    }
}

pub const DECONV_INIT_STD: f64 = 1e-3;

/// Transposed convolution with bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Deconv {
    pub name: String,
    pub spec: ConvSpec,
}

impl Deconv {
    pub fn init(&self, store: &mut ParamStore, seed: u64) {
        let s = &self.spec;
        let name = format!("{}.weight", self.name);
        // The output layer starts near zero, as in the original FSRCNN recipe.
        store.insert(name.clone(), gaussian(s.transposed_weight_shape().to_vec(), DECONV_INIT_STD, seed, &name));
        store.insert(format!("{}.bias", self.name), Tensor::zeros([s.out_channels]));
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let w = g.param(&format!("{}.weight", self.name))?;
        let b = g.param(&format!("{}.bias", self.name))?;
        Ok(g.tape.conv_transpose2d(x, w, Some(b), self.spec)?)
    }

    pub fn param_count(&self) -> usize {
        self.spec.weight_count() + self.spec.out_channels
    }

    pub fn layer_op(&self, batch: usize, hw: (usize, usize)) -> Result<(LayerOp, (usize, usize))> {
        let out_hw = self.spec.transposed_output_hw(hw.0, hw.1)?;
        Ok((
            LayerOp::ConvTranspose {
                name: self.name.clone(),
                spec: self.spec,
                batch,
                in_hw: hw,
            },
            out_hw,
        ))
    }
}

/// Parametric ReLU with a learnable slope per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct PRelu {
    pub name: String,
    pub channels: usize,
}

impl PRelu {
    pub const INITIAL_SLOPE: f32 = 0.25;

    pub fn init(&self, store: &mut ParamStore) {
        store.insert(
            format!("{}.slope", self.name),
            Tensor::full([self.channels], Self::INITIAL_SLOPE),
        );
    }

    pub fn forward<T: Element>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let s = g.param(&format!("{}.slope", self.name))?;
        Ok(g.tape.prelu(x, s)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn param_rng_depends_on_name_and_seed() {
        use rand::Rng;
        let a: u64 = param_rng(1, "a.weight").random();
        assert_eq!(a, param_rng(1, "a.weight").random::<u64>());
        assert_ne!(a, param_rng(2, "a.weight").random::<u64>());
        assert_ne!(a, param_rng(1, "b.weight").random::<u64>());
    }

    #[test]
    fn frozen_graph_binds_constants() {
        let mut store = ParamStore::new();
        Conv::new("c", ConvSpec::new(1, 1, 3)).init(&mut store, 0, Init::Kaiming);
        let mut g = Graph::frozen(&store);
        let w = g.param("c.weight").unwrap();
        assert!(!g.tape.requires_grad(w));
        assert!(g.param("missing").is_err());
        let mut g = Graph::trainable(&store);
        let w = g.param("c.weight").unwrap();
        assert!(g.tape.requires_grad(w));
        assert_eq!(g.param("c.weight").unwrap(), w);
    }

    #[test]
    fn separable_count_formula() {
        let s = SeparableConv::replacing("s", ConvSpec::new(8, 16, 3));
        assert_eq!(s.param_count(), 8 * 9 + 8 * 16 + 16);
        let mut store = ParamStore::new();
        s.init(&mut store, 0);
        assert_eq!(store.count(), s.param_count());
    }
}
