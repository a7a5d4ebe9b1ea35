use rand::Rng;

use super::encoder::{EncoderBlock, EncoderCache, EncoderDims};
use super::linear::Linear;
use crate::error::{Error, Result};
use crate::tensor::{Parameter, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerSpec {
    Linear { input: usize, output: usize },
    Relu,
    EncoderBlock(EncoderDims),
}

impl LayerSpec {
    /// Size of the trailing axis the layer consumes, if it constrains it.
    fn input_width(&self) -> Option<usize> {
        match self {
            LayerSpec::Linear { input, .. } => Some(*input),
            LayerSpec::Relu => None,
            LayerSpec::EncoderBlock(d) => Some(d.width),
        }
    }

    fn output_width(&self) -> Option<usize> {
        match self {
            LayerSpec::Linear { output, .. } => Some(*output),
            LayerSpec::Relu => None,
            LayerSpec::EncoderBlock(d) => Some(d.width),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = match self {
            LayerSpec::Linear { input, output } => *input > 0 && *output > 0,
            LayerSpec::Relu => true,
            LayerSpec::EncoderBlock(d) => {
                d.tokens > 0 && d.width > 0 && d.attn_width > 0 && d.mlp_width > 0
            }
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("layer {self:?} has a zero dimension")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Linear(Linear),
    Relu,
    Encoder(EncoderBlock),
}

/// Activation cache filled by [`Layer::forward`] and consumed by
/// [`Layer::backward`].
#[derive(Debug, Clone, Default, PartialEq)]
pub enum Cache {
    #[default]
    Empty,
    Linear {
        input: Tensor,
    },
    Relu {
        input: Tensor,
    },
    Encoder(Box<EncoderCache>),
}

impl Layer {
    pub fn build<R: Rng + ?Sized>(spec: LayerSpec, rng: &mut R) -> Result<Self> {
        spec.validate()?;
        Ok(match spec {
            LayerSpec::Linear { input, output } => Layer::Linear(Linear::init(input, output, rng)),
            LayerSpec::Relu => Layer::Relu,
            LayerSpec::EncoderBlock(dims) => Layer::Encoder(EncoderBlock::init(dims, rng)),
        })
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Layer::Linear(_) => "linear",
            Layer::Relu => "relu",
            Layer::Encoder(_) => "encoder-block",
        }
    }

    pub fn params(&self) -> Vec<&Parameter> {
        match self {
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            Layer::Relu => Vec::new(),
            Layer::Encoder(e) => e.params().to_vec(),
        }
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        match self {
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            Layer::Relu => Vec::new(),
            Layer::Encoder(e) => e.params_mut().into_iter().collect(),
        }
    }

    pub fn forward(&self, input: &Tensor, cache: &mut Cache) -> Result<Tensor> {
        match self {
            Layer::Linear(l) => {
                let out = l.forward(input)?;
                *cache = Cache::Linear {
                    input: input.clone(),
                };
                Ok(out)
            }
            Layer::Relu => {
                let data = input.data().iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect();
                *cache = Cache::Relu {
                    input: input.clone(),
                };
                Tensor::new(input.shape().to_vec(), data)
            }
            Layer::Encoder(e) => {
                let (out, c) = e.forward(input)?;
                *cache = Cache::Encoder(Box::new(c));
                Ok(out)
            }
        }
    }

    /// Returns the input gradient and adds parameter gradients into each
    /// `Parameter::grad`.
    pub fn backward(&mut self, cache: &Cache, upstream: &Tensor) -> Result<Tensor> {
        match (self, cache) {
            (Layer::Linear(l), Cache::Linear { input }) => l.backward(input, upstream),
            (Layer::Relu, Cache::Relu { input }) => {
                if upstream.shape() != input.shape() {
                    return Err(Error::Shape {
                        layer: "relu (upstream gradient)",
                        expected: format!("{:?}", input.shape()),
                        got: upstream.shape().to_vec(),
                    });
                }
                let data = input
                    .data()
                    .iter()
                    .zip(upstream.data())
                    .map(|(&x, &g)| if x > 0.0 { g } else { 0.0 })
                    .collect();
                Tensor::new(input.shape().to_vec(), data)
            }
            (Layer::Encoder(e), Cache::Encoder(c)) => e.backward(c, upstream),
            (layer, cache) => Err(Error::Protocol(format!(
                "{} backward called with a {} cache",
                layer.kind(),
                match cache {
                    Cache::Empty => "empty",
                    Cache::Linear { .. } => "linear",
                    Cache::Relu { .. } => "relu",
                    Cache::Encoder(_) => "encoder-block",
                }
            ))),
        }
    }
}

/// A chain of layers applied in order.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack {
    pub layers: Vec<Layer>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct StackCache {
    caches: Vec<Cache>,
}

impl Stack {
    pub fn build<R: Rng + ?Sized>(specs: &[LayerSpec], rng: &mut R) -> Result<Self> {
        let mut width: Option<usize> = None;
        for (i, spec) in specs.iter().enumerate() {
            if let (Some(w), Some(expected)) = (width, spec.input_width()) {
                if w != expected {
                    return Err(Error::Config(format!(
                        "layer {i} ({spec:?}) expects width {expected}, previous layer emits {w}"
                    )));
                }
            }
            width = spec.output_width().or(width);
        }
        let layers = specs
            .iter()
            .map(|s| Layer::build(*s, rng))
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn forward(&self, input: &Tensor, cache: &mut StackCache) -> Result<Tensor> {
        cache.caches = vec![Cache::Empty; self.layers.len()];
        let mut x = input.clone();
        for (layer, c) in self.layers.iter().zip(cache.caches.iter_mut()) {
            x = layer.forward(&x, c)?;
        }
        Ok(x)
    }

    pub fn backward(&mut self, cache: &StackCache, upstream: &Tensor) -> Result<Tensor> {
        if cache.caches.len() != self.layers.len() {
            return Err(Error::Protocol(format!(
                "stack of {} layers given a cache for {}",
                self.layers.len(),
                cache.caches.len()
            )));
        }
        let mut g = upstream.clone();
        for (layer, c) in self.layers.iter_mut().zip(&cache.caches).rev() {
            g = layer.backward(c, &g)?;
        }
        Ok(g)
    }

    pub fn zero_grad(&mut self) {
        self.params_mut().into_iter().for_each(Parameter::zero_grad);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{domain, stream};

    #[test]
    fn linear_identity() {
        let layer = Layer::Linear(Linear::from_parts(
            Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap(),
            Tensor::zeros(&[2]),
        ));
        let mut layer = layer;
        let mut cache = Cache::Empty;
        let y = layer.forward(&Tensor::from_vec(vec![1.0, 2.0]), &mut cache).unwrap();
        assert_eq!(y.data(), &[1.0, 2.0]);
        let g = layer.backward(&cache, &Tensor::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(g.data(), &[1.0, 1.0]);
    }

    #[test]
    fn relu_forward_and_subgradient() {
        let mut relu = Layer::Relu;
        let mut cache = Cache::Empty;
        let y = relu.forward(&Tensor::from_vec(vec![-1.0, 0.0, 3.0]), &mut cache).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 3.0]);

        let y = relu.forward(&Tensor::from_vec(vec![-1.0, 3.0]), &mut cache).unwrap();
        assert_eq!(y.data(), &[0.0, 3.0]);
        let g = relu.backward(&cache, &Tensor::from_vec(vec![1.0, 1.0])).unwrap();
        assert_eq!(g.data(), &[0.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let mut rng = stream(0, domain::PROBE, &[]);
        let layer = Layer::build(LayerSpec::Linear { input: 3, output: 2 }, &mut rng).unwrap();
        let err = layer.forward(&Tensor::zeros(&[4]), &mut Cache::Empty).unwrap_err();
        assert!(err.to_string().contains("linear"), "{err}");
    }

    #[test]
    fn backward_with_wrong_cache_is_protocol_error() {
        let mut rng = stream(0, domain::PROBE, &[]);
        let mut layer = Layer::build(LayerSpec::Linear { input: 2, output: 2 }, &mut rng).unwrap();
        let err = layer.backward(&Cache::Empty, &Tensor::zeros(&[2])).unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
        let err = layer
            .backward(&Cache::Relu { input: Tensor::zeros(&[2]) }, &Tensor::zeros(&[2]))
            .unwrap_err();
        assert!(matches!(err, Error::Protocol(_)));
    }

    #[test]
    fn stack_rejects_mismatched_chain() {
        let mut rng = stream(0, domain::PROBE, &[]);
        let specs = [
            LayerSpec::Linear { input: 4, output: 3 },
            LayerSpec::Relu,
            LayerSpec::Linear { input: 2, output: 1 },
        ];
        assert!(matches!(Stack::build(&specs, &mut rng), Err(Error::Config(_))));
    }

    #[test]
    fn zero_dimension_rejected() {
        let mut rng = stream(0, domain::PROBE, &[]);
        assert!(Layer::build(LayerSpec::Linear { input: 0, output: 3 }, &mut rng).is_err());
    }

    #[test]
    fn backward_accumulates() {
        let mut rng = stream(3, domain::PROBE, &[]);
        let dims = EncoderDims {
            tokens: 3,
            width: 4,
            attn_width: 5,
            mlp_width: 6,
        };
        let mut layer = Layer::build(LayerSpec::EncoderBlock(dims), &mut rng).unwrap();
        let x = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let up = Tensor::randn(&[2, 3, 4], 1.0, &mut rng);
        let mut cache = Cache::Empty;
        layer.forward(&x, &mut cache).unwrap();
        layer.backward(&cache, &up).unwrap();
        let once = crate::tensor::flatten_grads(layer.params());
        layer.backward(&cache, &up).unwrap();
        let twice = crate::tensor::flatten_grads(layer.params());
        for (a, b) in once.iter().zip(&twice) {
            assert!((2.0 * a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}
