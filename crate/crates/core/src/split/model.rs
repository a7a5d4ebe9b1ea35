use crate::error::{Error, Result};
use crate::nn::{EncoderDims, LayerSpec, Stack, StackCache};
use crate::rng::{domain, stream};
use crate::tensor::{Parameter, Tensor};

/// Layout of the three-part model.
///
/// An input row of `input_dim` values is read as `tokens` patches of
/// `input_dim / tokens` values. The head embeds each patch to `width`, the
/// encoder mixes tokens, and the tail flattens and classifies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub input_dim: usize,
    pub tokens: usize,
    pub width: usize,
    pub attn_width: usize,
    pub mlp_width: usize,
    pub tail_hidden: usize,
    pub classes: usize,
    pub encoder_blocks: usize,
}

impl ModelDims {
    pub fn desk_scale(classes: usize) -> Self {
        Self {
            input_dim: 64,
            tokens: 4,
            width: 16,
            attn_width: 32,
            mlp_width: 32,
            tail_hidden: 32,
            classes,
            encoder_blocks: 1,
        }
    }

    pub fn patch(&self) -> usize {
        self.input_dim / self.tokens
    }

    pub fn encoder_dims(&self) -> EncoderDims {
        EncoderDims {
            tokens: self.tokens,
            width: self.width,
            attn_width: self.attn_width,
            mlp_width: self.mlp_width,
        }
    }

    pub fn head_specs(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Linear {
                input: self.patch(),
                output: self.width,
            },
            LayerSpec::Relu,
        ]
    }

    pub fn encoder_specs(&self) -> Vec<LayerSpec> {
        vec![LayerSpec::EncoderBlock(self.encoder_dims()); self.encoder_blocks]
    }

    pub fn tail_specs(&self) -> Vec<LayerSpec> {
        vec![
            LayerSpec::Linear {
                input: self.tokens * self.width,
                output: self.tail_hidden,
            },
            LayerSpec::Relu,
            LayerSpec::Linear {
                input: self.tail_hidden,
                output: self.classes,
            },
        ]
    }

    pub fn head_param_count(&self) -> usize {
        self.patch() * self.width + self.width
    }

    pub fn encoder_param_count(&self) -> usize {
        let (d, a, h) = (self.width, self.attn_width, self.mlp_width);
        self.encoder_blocks * (3 * d * a + a * d + d * h + h + h * d + d)
    }

    pub fn tail_param_count(&self) -> usize {
        let flat = self.tokens * self.width;
        flat * self.tail_hidden + self.tail_hidden + self.tail_hidden * self.classes + self.classes
    }

    /// Elements in one intermediate (or smashed) feature row.
    pub fn feature_len(&self) -> usize {
        self.tokens * self.width
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            self.input_dim,
            self.tokens,
            self.width,
            self.attn_width,
            self.mlp_width,
            self.tail_hidden,
            self.encoder_blocks,
        ];
        if fields.contains(&0) {
            return Err(Error::Config(format!("model dimensions must be positive: {self:?}")));
        }
        if self.classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.classes)));
        }
        if !self.input_dim.is_multiple_of(self.tokens) {
            return Err(Error::Config(format!(
                "input dim {} is not divisible into {} tokens",
                self.input_dim, self.tokens
            )));
        }
        let enc = self.encoder_param_count();
        if enc <= self.head_param_count() || enc <= self.tail_param_count() {
            return Err(Error::Config(format!(
                "encoder ({enc} params) must be larger than head ({}) and tail ({})",
                self.head_param_count(),
                self.tail_param_count()
            )));
        }
        Ok(())
    }
}

/// Client-side half of the split model: head and tail.
#[derive(Debug, Clone, PartialEq)]
pub struct ClientModel {
    pub dims: ModelDims,
    pub head: Stack,
    pub tail: Stack,
}

/// Server-side shared encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub dims: ModelDims,
    pub blocks: Stack,
}

impl ClientModel {
    /// Random head and tail for `client_id`, keyed by the run seed.
    pub fn init(dims: ModelDims, seed: u64, client_id: usize) -> Result<Self> {
        Self::init_from(dims, seed, domain::CLIENT_INIT, client_id as u64)
    }

    pub(crate) fn init_from(dims: ModelDims, seed: u64, dom: u64, tag: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = stream(seed, dom, &[tag]);
        let head = Stack::build(&dims.head_specs(), &mut rng)?;
        let tail = Stack::build(&dims.tail_specs(), &mut rng)?;
        Ok(Self { dims, head, tail })
    }

    pub fn head_params(&self) -> Vec<&Parameter> {
        self.head.params()
    }

    pub fn tail_params(&self) -> Vec<&Parameter> {
        self.tail.params()
    }

    /// Head parameters then tail parameters.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut p = self.head.params();
        p.extend(self.tail.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut p = self.head.params_mut();
        p.extend(self.tail.params_mut());
        p
    }

    pub fn zero_grad(&mut self) {
        self.head.zero_grad();
        self.tail.zero_grad();
    }

    /// Head applied to a `[batch, input_dim]` tensor, giving `[batch, tokens, width]`.
    pub(crate) fn head_apply(&self, x: &Tensor, cache: &mut StackCache) -> Result<Tensor> {
        let d = self.dims;
        let [batch, dim] = x.shape() else {
            return Err(Error::Shape {
                layer: "head",
                expected: format!("[batch, {}]", d.input_dim),
                got: x.shape().to_vec(),
            });
        };
        if *dim != d.input_dim {
            return Err(Error::Shape {
                layer: "head",
                expected: format!("[batch, {}]", d.input_dim),
                got: x.shape().to_vec(),
            });
        }
        let patches = x.clone().reshape(&[*batch, d.tokens, d.patch()])?;
        self.head.forward(&patches, cache)
    }

    /// Tail logits for a `[batch, tokens, width]` smashed feature.
    pub(crate) fn tail_apply(&self, b: &Tensor, cache: &mut StackCache) -> Result<Tensor> {
        let d = self.dims;
        let [batch, t, w] = b.shape() else {
            return Err(Error::Shape {
                layer: "tail",
                expected: format!("[batch, {}, {}]", d.tokens, d.width),
                got: b.shape().to_vec(),
            });
        };
        if (*t, *w) != (d.tokens, d.width) {
            return Err(Error::Shape {
                layer: "tail",
                expected: format!("[batch, {}, {}]", d.tokens, d.width),
                got: b.shape().to_vec(),
            });
        }
        let flat = b.clone().reshape(&[*batch, d.tokens * d.width])?;
        self.tail.forward(&flat, cache)
    }
}

impl Encoder {
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        dims.validate()?;
        let mut rng = stream(seed, domain::ENCODER_INIT, &[]);
        Ok(Self {
            dims,
            blocks: Stack::build(&dims.encoder_specs(), &mut rng)?,
        })
    }

    /// Every weight zero: the residual identity map.
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        let mut enc = Self::init(dims, 0)?;
        for p in enc.blocks.params_mut() {
            p.value.fill(0.0);
        }
        Ok(enc)
    }

    pub fn params(&self) -> Vec<&Parameter> {
        self.blocks.params()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        self.blocks.params_mut()
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        self.blocks.zero_grad();
    }

    pub fn flat_values(&self) -> Vec<f64> {
        crate::tensor::flatten_values(self.params())
    }

    pub fn flat_grads(&self) -> Vec<f64> {
        crate::tensor::flatten_grads(self.params())
    }

    pub fn load_flat(&mut self, flat: &[f64]) -> Result<()> {
        crate::tensor::load_values(self.params_mut(), flat)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn desk_scale_param_counts() {
        let d = ModelDims::desk_scale(4);
        d.validate().unwrap();
        assert_eq!(d.head_param_count(), 272);
        assert_eq!(d.tail_param_count(), 2080 + 132);
        assert_eq!(d.encoder_param_count(), 3120);
        let enc = Encoder::init(d, 1).unwrap();
        assert_eq!(enc.param_count(), d.encoder_param_count());
        let c = ClientModel::init(d, 1, 0).unwrap();
        let head: usize = c.head_params().iter().map(|p| p.len()).sum();
        let tail: usize = c.tail_params().iter().map(|p| p.len()).sum();
        assert_eq!((head, tail), (d.head_param_count(), d.tail_param_count()));
    }

    #[test]
    fn encoder_must_dominate() {
        let mut d = ModelDims::desk_scale(4);
        d.tail_hidden = 256;
        assert!(matches!(d.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn clients_get_distinct_initializations() {
        let d = ModelDims::desk_scale(4);
        let a = ClientModel::init(d, 3, 0).unwrap();
        let b = ClientModel::init(d, 3, 1).unwrap();
        assert_eq!(a, ClientModel::init(d, 3, 0).unwrap());
        assert_ne!(a, b);
    }
}
