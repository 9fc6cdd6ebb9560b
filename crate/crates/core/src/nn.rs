//! Parameter storage and the small set of layers the networks are built from.

use std::cell::RefCell;
use std::collections::BTreeMap;
use std::rc::Rc;

use candle_core::{DType, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::error::{contract, Error, Result};
use crate::tensor_ops::{self, cpu};

/// How a freshly created parameter is filled.
#[derive(Debug, Clone)]
pub enum Init {
    /// Uniform with leaky-ReLU gain over the given fan-in.
    Kaiming { fan_in: usize },
    Uniform(f64),
    Const(f64),
    Values(Vec<f64>),
}

struct Inner {
    vars: BTreeMap<String, Var>,
    rng: ChaCha8Rng,
}

/// Named, seeded collection of trainable variables.
///
/// Cloning is cheap and shares the underlying storage.
#[derive(Clone)]
pub struct ParamStore {
    inner: Rc<RefCell<Inner>>,
    dtype: DType,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            inner: Rc::new(RefCell::new(Inner { vars: BTreeMap::new(), rng: ChaCha8Rng::seed_from_u64(seed) })),
            dtype,
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn root(&self) -> Scope {
        Scope { store: self.clone(), prefix: String::new() }
    }

    fn create(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let mut inner = self.inner.borrow_mut();
        if let Some(v) = inner.vars.get(name) {
            if v.dims() != shape {
                return contract(format!("parameter `{name}` re-declared with shape {shape:?}"));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match init {
            Init::Kaiming { fan_in } => {
                let bound = (2.0f64 / (1.0 + 0.01)).sqrt() * (3.0 / fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| inner.rng.random_range(-bound..bound)).collect()
            }
            Init::Uniform(b) => (0..n).map(|_| inner.rng.random_range(-b..=b)).collect(),
            Init::Const(c) => vec![c; n],
            Init::Values(v) => {
                if v.len() != n {
                    return contract(format!("parameter `{name}`: {} init values for {n} elements", v.len()));
                }
                v
            }
        };
        let t = Tensor::from_vec(data, shape, &cpu())?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        inner.vars.insert(name.to_string(), var);
        Ok(out)
    }

    /// All variables whose name starts with one of `prefixes` (all when empty).
    pub fn vars_with_prefixes(&self, prefixes: &[&str]) -> Vec<(String, Var)> {
        self.inner
            .borrow()
            .vars
            .iter()
            .filter(|(k, _)| prefixes.is_empty() || prefixes.iter().any(|p| k.starts_with(p)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn names(&self) -> Vec<String> {
        self.inner.borrow().vars.keys().cloned().collect()
    }

    pub fn get(&self, name: &str) -> Option<Var> {
        self.inner.borrow().vars.get(name).cloned()
    }

    pub fn num_params(&self) -> usize {
        self.inner.borrow().vars.values().map(|v| v.elem_count()).sum()
    }

    /// SHA-256 over names, shapes and little-endian `f32` values of the
    /// selected variables, truncated to 64 bits.
    pub fn hash(&self, prefixes: &[&str]) -> Result<u64> {
        let mut h = Sha256::new();
        for (name, var) in self.vars_with_prefixes(prefixes) {
            h.update(name.as_bytes());
            for d in var.dims() {
                h.update((*d as u64).to_le_bytes());
            }
            for x in var.as_tensor().flatten_all()?.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                h.update(x.to_le_bytes());
            }
        }
        let digest = h.finalize();
        Ok(u64::from_be_bytes(digest[..8].try_into().expect("8 bytes")))
    }

    /// Overwrite a variable's value.
    pub fn set(&self, name: &str, value: &Tensor) -> Result<()> {
        let var = self
            .get(name)
            .ok_or_else(|| Error::Contract(format!("unknown parameter `{name}`")))?;
        if var.dims() != value.dims() {
            return contract(format!("parameter `{name}`: shape {:?} vs {:?}", var.dims(), value.dims()));
        }
        var.set(&value.to_dtype(var.dtype())?)?;
        Ok(())
    }
}

/// A name prefix inside a [`ParamStore`].
#[derive(Clone)]
pub struct Scope {
    store: ParamStore,
    prefix: String,
}

impl Scope {
    pub fn sub(&self, name: &str) -> Scope {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        Scope { store: self.store.clone(), prefix }
    }

    pub fn param(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{name}", self.prefix) };
        self.store.create(&full, shape, init)
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype
    }
}

/// Square-kernel convolution with replicate padding.
#[derive(Clone)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
    pub stride: usize,
}

impl Conv {
    pub fn new(s: &Scope, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        let weight = s.param("weight", &[c_out, c_in, k, k], Init::Kaiming { fan_in: c_in * k * k })?;
        let bias = s.param("bias", &[c_out], Init::Const(0.0))?;
        Ok(Self { weight, bias, stride })
    }

    /// Weights and bias start at zero, so the layer initially outputs zero.
    pub fn zeroed(s: &Scope, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        let weight = s.param("weight", &[c_out, c_in, k, k], Init::Const(0.0))?;
        let bias = s.param("bias", &[c_out], Init::Const(0.0))?;
        Ok(Self { weight, bias, stride })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        tensor_ops::conv2d(x, &self.weight, Some(&self.bias), self.stride)
    }
}

/// 2x upsampling: 1x1 conv to `4 * c_out` channels then pixel shuffle, i.e.
/// a kernel-2 stride-2 transposed convolution.
#[derive(Clone)]
pub struct SubpixelUp {
    conv: Conv,
}

impl SubpixelUp {
    pub fn new(s: &Scope, c_in: usize, c_out: usize) -> Result<Self> {
        Ok(Self { conv: Conv::new(s, c_in, 4 * c_out, 1, 1)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        tensor_ops::pixel_shuffle(&self.conv.forward(x)?, 2)
    }
}

/// Layer norm over the channel axis at every spatial position.
#[derive(Clone)]
pub struct ChannelNorm {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl ChannelNorm {
    pub fn new(s: &Scope, c: usize) -> Result<Self> {
        Ok(Self {
            weight: s.param("weight", &[c], Init::Const(1.0))?,
            bias: s.param("bias", &[c], Init::Const(0.0))?,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        let mu = x.mean_keepdim(1)?;
        let xc = x.broadcast_sub(&mu)?;
        let var = xc.sqr()?.mean_keepdim(1)?;
        let y = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        Ok(y
            .broadcast_mul(&self.weight.reshape((1, c, 1, 1))?)?
            .broadcast_add(&self.bias.reshape((1, c, 1, 1))?)?)
    }
}

pub fn lrelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.maximum(&(x * 0.1)?)?)
}

/// Two 3x3 convs with a leaky ReLU between and an identity skip.
#[derive(Clone)]
pub struct ResBlock {
    a: Conv,
    b: Conv,
}

impl ResBlock {
    pub fn new(s: &Scope, c: usize) -> Result<Self> {
        Ok(Self { a: Conv::new(&s.sub("a"), c, c, 3, 1)?, b: Conv::new(&s.sub("b"), c, c, 3, 1)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = self.b.forward(&lrelu(&self.a.forward(x)?)?)?;
        Ok((x + y)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_params() {
        let build = |seed| {
            let ps = ParamStore::new(seed, DType::F32);
            Conv::new(&ps.root().sub("c"), 3, 4, 3, 1).unwrap();
            ps.hash(&[]).unwrap()
        };
        assert_eq!(build(3), build(3));
        assert_ne!(build(3), build(4));
    }

    #[test]
    fn scopes_share_storage() {
        let ps = ParamStore::new(0, DType::F32);
        let a = ps.root().sub("x").param("w", &[2], Init::Const(1.0)).unwrap();
        let b = ps.root().sub("x").param("w", &[2], Init::Const(5.0)).unwrap();
        assert_eq!(b.to_vec1::<f32>().unwrap(), vec![1.0, 1.0]);
        ps.set("x.w", &Tensor::new(&[3f32, 4.0], &cpu()).unwrap()).unwrap();
        assert_eq!(a.to_vec1::<f32>().unwrap(), vec![3.0, 4.0]);
        assert!(ps.root().sub("x").param("w", &[3], Init::Const(0.0)).is_err());
    }

    #[test]
    fn channel_norm_normalizes() {
        let ps = ParamStore::new(0, DType::F64);
        let n = ChannelNorm::new(&ps.root(), 4).unwrap();
        let x = crate::gradcheck::randn(&[1, 4, 3, 3], 2.0, 1).unwrap();
        let y = n.forward(&x).unwrap();
        let m = y.mean_keepdim(1).unwrap().abs().unwrap().max_all().unwrap().to_scalar::<f64>().unwrap();
        assert!(m < 1e-9);
    }
}
