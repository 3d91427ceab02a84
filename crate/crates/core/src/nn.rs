//! Layer primitives built only from differentiable candle ops.

use candle_core::{DType, Device, Tensor, D};

use crate::error::Result;
use crate::params::{Init, ParamStore};

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Option<Tensor>,
}

impl Linear {
    /// Xavier-uniform weights, zero bias.
    pub fn new(store: &ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        let bound = (6.0 / (d_in + d_out) as f64).sqrt();
        Self::with_init(store, name, d_in, d_out, Init::Uniform(bound), true)
    }

    pub fn zeroed(store: &ParamStore, name: &str, d_in: usize, d_out: usize) -> Result<Self> {
        Self::with_init(store, name, d_in, d_out, Init::Zeros, true)
    }

    pub fn with_init(
        store: &ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        bias: bool,
    ) -> Result<Self> {
        let weight = store.get(&format!("{name}.weight"), &[d_out, d_in], init)?;
        let bias = if bias {
            Some(store.get(&format!("{name}.bias"), &[d_out], Init::Zeros)?)
        } else {
            None
        };
        Ok(Self { weight, bias })
    }

    pub fn from_tensors(weight: Tensor, bias: Option<Tensor>) -> Self {
        Self { weight, bias }
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn d_out(&self) -> usize {
        self.weight.dims()[0]
    }

    /// Applies `x W^T + b` over the last dimension of an arbitrary-rank input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let d_in = *dims.last().expect("rank >= 1");
        let rows = x.elem_count() / d_in;
        let y = x.reshape((rows, d_in))?.matmul(&self.weight.t()?)?;
        let y = match &self.bias {
            Some(b) => y.broadcast_add(b)?,
            None => y,
        };
        let mut out_dims = dims;
        *out_dims.last_mut().unwrap() = self.d_out();
        Ok(y.reshape(out_dims)?)
    }
}

#[derive(Debug, Clone)]
pub struct LayerNorm {
    gain: Tensor,
    bias: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &ParamStore, name: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gain: store.get(&format!("{name}.gain"), &[dim], Init::Ones)?,
            bias: store.get(&format!("{name}.bias"), &[dim], Init::Zeros)?,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gain)?.broadcast_add(&self.bias)?)
    }
}

#[derive(Debug, Clone)]
pub struct Embedding {
    table: Tensor,
}

impl Embedding {
    pub fn new(store: &ParamStore, name: &str, n: usize, dim: usize) -> Result<Self> {
        Ok(Self {
            table: store.get(name, &[n, dim], Init::Normal(0.02))?,
        })
    }

    pub fn table(&self) -> &Tensor {
        &self.table
    }

    pub fn len(&self) -> usize {
        self.table.dims()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Looks up ids of any shape; output shape is `ids.shape + [dim]`.
    pub fn forward(&self, ids: &Tensor) -> Result<Tensor> {
        let mut dims = ids.dims().to_vec();
        let flat = ids.flatten_all()?;
        let rows = self.table.index_select(&flat, 0)?;
        dims.push(self.table.dims()[1]);
        Ok(rows.reshape(dims)?)
    }
}

/// Two-layer perceptron with GELU.
#[derive(Debug, Clone)]
pub struct FeedForward {
    fc1: Linear,
    fc2: Linear,
}

impl FeedForward {
    pub fn new(store: &ParamStore, name: &str, dim: usize, hidden: usize) -> Result<Self> {
        Ok(Self {
            fc1: Linear::new(store, &format!("{name}.fc1"), dim, hidden)?,
            fc2: Linear::new(store, &format!("{name}.fc2"), hidden, dim)?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.fc2.forward(&self.fc1.forward(x)?.relu()?)?)
    }
}

/// Boolean causal mask as nested rows: `mask[j][i]` is true iff position `j`
/// may attend to position `i`.
pub fn causal_mask(len: usize) -> Vec<Vec<bool>> {
    (0..len).map(|j| (0..len).map(|i| i <= j).collect()).collect()
}

/// Additive attention bias for the causal mask: 0 where allowed, -inf elsewhere.
pub fn causal_bias(len: usize, dtype: DType, device: &Device) -> Result<Tensor> {
    let data: Vec<f32> = causal_mask(len)
        .into_iter()
        .flat_map(|row| row.into_iter().map(|ok| if ok { 0.0 } else { f32::NEG_INFINITY }))
        .collect();
    Ok(Tensor::from_vec(data, (len, len), device)?.to_dtype(dtype)?)
}

/// Multi-head scaled dot-product attention with separate query and key/value
/// inputs. Self-attention passes the same tensor twice.
#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    n_heads: usize,
}

impl MultiHeadAttention {
    pub fn new(store: &ParamStore, name: &str, dim: usize, n_heads: usize) -> Result<Self> {
        Self::build(store, name, dim, n_heads, false)
    }

    /// Output projection starts at zero, so the layer contributes nothing to
    /// a residual stream until trained.
    pub fn new_zero_out(store: &ParamStore, name: &str, dim: usize, n_heads: usize) -> Result<Self> {
        Self::build(store, name, dim, n_heads, true)
    }

    fn build(store: &ParamStore, name: &str, dim: usize, n_heads: usize, zero_out: bool) -> Result<Self> {
        let out = if zero_out {
            Linear::zeroed(store, &format!("{name}.out"), dim, dim)?
        } else {
            Linear::new(store, &format!("{name}.out"), dim, dim)?
        };
        Ok(Self {
            q: Linear::new(store, &format!("{name}.q"), dim, dim)?,
            k: Linear::new(store, &format!("{name}.k"), dim, dim)?,
            v: Linear::new(store, &format!("{name}.v"), dim, dim)?,
            out,
            n_heads,
        })
    }

    pub fn from_parts(q: Linear, k: Linear, v: Linear, out: Linear, n_heads: usize) -> Self {
        Self { q, k, v, out, n_heads }
    }

    fn split_heads(&self, x: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        Ok(x
            .reshape((b, l, self.n_heads, d / self.n_heads))?
            .transpose(1, 2)?
            .contiguous()?)
    }

    /// `query`: (B, Lq, d); `context`: (B, Lk, d); `bias`: optional additive
    /// (Lq, Lk) mask. Returns output (B, Lq, d) and weights (B, H, Lq, Lk).
    pub fn forward_with_weights(
        &self,
        query: &Tensor,
        context: &Tensor,
        bias: Option<&Tensor>,
    ) -> Result<(Tensor, Tensor)> {
        let (b, lq, d) = query.dims3()?;
        let head_dim = d / self.n_heads;
        let q = self.split_heads(&self.q.forward(query)?)?;
        let k = self.split_heads(&self.k.forward(context)?)?;
        let v = self.split_heads(&self.v.forward(context)?)?;
        let scale = 1.0 / (head_dim as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?.contiguous()?)? * scale)?;
        if let Some(bias) = bias {
            scores = scores.broadcast_add(bias)?;
        }
        let weights = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let mixed = weights
            .matmul(&v)?
            .transpose(1, 2)?
            .contiguous()?
            .reshape((b, lq, d))?;
        Ok((self.out.forward(&mixed)?, weights))
    }

    pub fn forward(&self, query: &Tensor, context: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        Ok(self.forward_with_weights(query, context, bias)?.0)
    }
}
