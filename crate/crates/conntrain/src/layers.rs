//! Bias-free masked networks: declarative specs, the layer stack, and the
//! hand-written backward pass.
//!
//! Forward applies the effective weights (`w`, `w*m(t)` or `w*f(t)`) of each
//! weighted layer, with ReLU after every hidden layer and nothing after the
//! logits. Backward produces gradients for the trainable tensor of each
//! weighted layer: the weights in dense mode, or the scores in prune/flip
//! mode where the straight-through estimator turns dL/d(effective weight)
//! into `dL/d(effective weight) * w`.
//!
//! Conv layers are fixed 3x3, stride 1, "same" zero padding; pooling is 2x2
//! stride 2. The flatten between a conv stack and the dense head is
//! channel-major (the row-major order of a `[C, H, W]` volume).

use crate::init::{self, InitKind, InitSpec};
use crate::masking::{MaskError, MaskedParam, Mode};
use crate::tensor::{self, Padding, Tensor, TensorError};
use std::io::{self, Read, Write};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum NetError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Init(#[from] init::InitError),
    #[error("unknown network preset '{0}'")]
    UnknownPreset(String),
    #[error("batch shape {got:?} does not match network input {want:?}")]
    BadInput { got: Vec<usize>, want: Vec<usize> },
    #[error("invalid network spec: {0}")]
    BadSpec(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// One entry in a declarative architecture description.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerDesc {
    Dense { units: usize },
    /// 3x3 kernels, stride 1, same padding.
    Conv { filters: usize },
    /// 2x2 max-pool, stride 2.
    MaxPool,
}

/// Architecture description; `input_shape` is `[channels, height, width]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub name: String,
    pub input_shape: [usize; 3],
    pub layers: Vec<LayerDesc>,
}

impl NetworkSpec {
    /// The four fixed presets. LeNet is the 300-100-10 fully connected
    /// network on 28x28 grayscale; the conv presets are the VGG-style stacks
    /// on 32x32 RGB, all ending in a 256-256-10 dense head.
    pub fn preset(name: &str) -> Result<NetworkSpec, NetError> {
        use LayerDesc::*;
        let (input_shape, layers) = match name {
            "lenet" => (
                [1, 28, 28],
                vec![
                    Dense { units: 300 },
                    Dense { units: 100 },
                    Dense { units: 10 },
                ],
            ),
            "conv2" => (
                [3, 32, 32],
                vec![
                    Conv { filters: 64 },
                    Conv { filters: 64 },
                    MaxPool,
                    Dense { units: 256 },
                    Dense { units: 256 },
                    Dense { units: 10 },
                ],
            ),
            "conv4" => (
                [3, 32, 32],
                vec![
                    Conv { filters: 64 },
                    Conv { filters: 64 },
                    MaxPool,
                    Conv { filters: 128 },
                    Conv { filters: 128 },
                    MaxPool,
                    Dense { units: 256 },
                    Dense { units: 256 },
                    Dense { units: 10 },
                ],
            ),
            "conv6" => (
                [3, 32, 32],
                vec![
                    Conv { filters: 64 },
                    Conv { filters: 64 },
                    MaxPool,
                    Conv { filters: 128 },
                    Conv { filters: 128 },
                    MaxPool,
                    Conv { filters: 256 },
                    Conv { filters: 256 },
                    MaxPool,
                    Dense { units: 256 },
                    Dense { units: 256 },
                    Dense { units: 10 },
                ],
            ),
            other => return Err(NetError::UnknownPreset(other.to_string())),
        };
        Ok(NetworkSpec {
            name: name.to_string(),
            input_shape,
            layers,
        })
    }

    /// A fully connected chain `input_dim -> widths[0] -> ... -> widths[n]`,
    /// handy for small ad-hoc networks.
    pub fn dense_chain(name: &str, input_dim: usize, widths: &[usize]) -> NetworkSpec {
        NetworkSpec {
            name: name.to_string(),
            input_shape: [1, 1, input_dim],
            layers: widths
                .iter()
                .map(|&units| LayerDesc::Dense { units })
                .collect(),
        }
    }

    /// Fan-in of each weighted layer in order (conv fan-in is `C * k * k`).
    pub fn weighted_fan_ins(&self) -> Vec<usize> {
        let mut shape = self.input_shape;
        let mut fan_ins = Vec::new();
        for desc in &self.layers {
            match *desc {
                LayerDesc::Conv { filters } => {
                    fan_ins.push(shape[0] * 9);
                    shape[0] = filters;
                }
                LayerDesc::MaxPool => {
                    shape[1] /= 2;
                    shape[2] /= 2;
                }
                LayerDesc::Dense { units } => {
                    fan_ins.push(shape[0] * shape[1] * shape[2]);
                    shape = [1, 1, units];
                }
            }
        }
        fan_ins
    }
}

enum Layer {
    Dense {
        param: MaskedParam,
        relu: bool,
    },
    Conv {
        param: MaskedParam,
    },
    MaxPool,
    /// Channel-major reshape of a `[C, H, W]` volume to a vector.
    Flatten {
        from: [usize; 3],
    },
}

pub struct Network {
    spec: NetworkSpec,
    mode: Mode,
    init: InitSpec,
    layers: Vec<Layer>,
}

/// Activations and bookkeeping captured by a training forward pass, consumed
/// by [`Network::backward`].
pub struct ForwardCache {
    /// `acts[i]` is the input of layer `i`; `acts.last()` is the logits.
    acts: Vec<Tensor>,
    /// Per layer: pool routing indices, if the layer is a pool.
    pools: Vec<Option<Vec<u32>>>,
    /// Per layer: effective weights used in the pass, if weighted.
    effs: Vec<Option<Tensor>>,
}

// Salts for deriving independent per-layer RNG streams from the base seed.
const WEIGHT_SEED_SALT: u64 = 0x1000_0000;
const SCORE_SEED_SALT: u64 = 0x2000_0000;

impl Network {
    /// Builds a network with weights drawn per `init` and, in prune/flip
    /// mode, fresh strictly-positive scores. Layer `i` draws from seeds
    /// `mix_seed(init.seed, SALT + i)` so layers are decorrelated while the
    /// whole network remains a pure function of the spec.
    pub fn new(spec: &NetworkSpec, mode: Mode, init_spec: &InitSpec) -> Result<Network, NetError> {
        init_spec.validate()?;
        let mut layers = Vec::new();
        let mut shape = spec.input_shape;
        let mut widx = 0u64;
        let n_weighted = spec
            .layers
            .iter()
            .filter(|d| !matches!(d, LayerDesc::MaxPool))
            .count();
        if !matches!(spec.layers.last(), Some(LayerDesc::Dense { units: _ })) {
            return Err(NetError::BadSpec("last layer must be dense".into()));
        }
        for desc in &spec.layers {
            match *desc {
                LayerDesc::Conv { filters } => {
                    if shape[1] < 1 || shape[2] < 1 {
                        return Err(NetError::BadSpec("conv on empty spatial extent".into()));
                    }
                    let fan_in = shape[0] * 9;
                    let fan_out = filters * 9;
                    let kshape = [filters, shape[0], 3, 3];
                    let param = make_param(init_spec, mode, fan_in, fan_out, &kshape, widx)?;
                    layers.push(Layer::Conv { param });
                    widx += 1;
                    shape[0] = filters;
                }
                LayerDesc::MaxPool => {
                    layers.push(Layer::MaxPool);
                    shape[1] /= 2;
                    shape[2] /= 2;
                }
                LayerDesc::Dense { units } => {
                    let in_dim = shape[0] * shape[1] * shape[2];
                    if shape[1] != 1 || shape[2] != 1 || shape[0] != in_dim {
                        layers.push(Layer::Flatten { from: shape });
                    }
                    let relu = widx + 1 < n_weighted as u64;
                    let param =
                        make_param(init_spec, mode, in_dim, units, &[in_dim, units], widx)?;
                    layers.push(Layer::Dense { param, relu });
                    widx += 1;
                    shape = [units, 1, 1];
                }
            }
        }
        Ok(Network {
            spec: spec.clone(),
            mode,
            init: *init_spec,
            layers,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn init_spec(&self) -> &InitSpec {
        &self.init
    }

    pub fn params(&self) -> impl Iterator<Item = &MaskedParam> {
        self.layers.iter().filter_map(|l| match l {
            Layer::Dense { param, .. } | Layer::Conv { param } => Some(param),
            _ => None,
        })
    }

    pub fn params_mut(&mut self) -> impl Iterator<Item = &mut MaskedParam> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::Dense { param, .. } | Layer::Conv { param } => Some(param),
            _ => None,
        })
    }

    /// Total number of weights, `M`.
    pub fn count_params(&self) -> usize {
        self.params().map(|p| p.weights().len()).sum()
    }

    /// Changed fraction per weighted layer (prune: masked-out, flip:
    /// sign-flipped).
    pub fn per_layer_changed_fractions(&self) -> Result<Vec<f64>, NetError> {
        self.params()
            .map(|p| p.changed_fraction().map_err(NetError::from))
            .collect()
    }

    /// Changed fraction over all M weights.
    pub fn global_changed_fraction(&self) -> Result<f64, NetError> {
        let mut changed = 0.0;
        for p in self.params() {
            changed += p.changed_fraction()? * p.weights().len() as f64;
        }
        Ok(changed / self.count_params() as f64)
    }

    /// XOR of per-layer weight checksums; invariant across prune/flip runs.
    pub fn weight_checksum(&self) -> u64 {
        self.params().fold(0, |acc, p| acc ^ p.weight_checksum())
    }

    /// Replaces every weight by its sign (+1/-1), keeping scores and mode.
    /// Pairs with scaling the input data by the product of the layer
    /// magnitudes when the original weights have constant magnitude per
    /// layer.
    pub fn to_unit_signs(&self) -> Result<Network, NetError> {
        let mut layers = Vec::with_capacity(self.layers.len());
        for l in &self.layers {
            layers.push(match l {
                Layer::Dense { param, relu } => Layer::Dense {
                    param: unit_sign_param(param)?,
                    relu: *relu,
                },
                Layer::Conv { param } => Layer::Conv {
                    param: unit_sign_param(param)?,
                },
                Layer::MaxPool => Layer::MaxPool,
                Layer::Flatten { from } => Layer::Flatten { from: *from },
            });
        }
        Ok(Network {
            spec: self.spec.clone(),
            mode: self.mode,
            init: self.init,
            layers,
        })
    }

    fn check_input(&self, batch: &Tensor) -> Result<(), NetError> {
        let want = &self.spec.input_shape;
        let got = batch.shape();
        let flat_ok = got.len() == 2 && got[1] == want[0] * want[1] * want[2];
        let vol_ok = got.len() == 4 && got[1..] == want[..];
        if !(flat_ok || vol_ok) {
            return Err(NetError::BadInput {
                got: got.to_vec(),
                want: want.to_vec(),
            });
        }
        Ok(())
    }

    /// Effective weights of every weighted layer, in order.
    pub fn effective_weights_all(&self) -> Vec<Tensor> {
        self.params().map(|p| p.effective_weights()).collect()
    }

    /// Inference forward pass over a batch.
    pub fn forward(&self, batch: &Tensor) -> Result<Tensor, NetError> {
        let effs = self.effective_weights_all();
        self.forward_with(batch, &effs)
    }

    /// Forward pass with precomputed effective weights (one entry per
    /// weighted layer), e.g. to evaluate many batches at a fixed mask.
    pub fn forward_with(&self, batch: &Tensor, effs: &[Tensor]) -> Result<Tensor, NetError> {
        self.check_input(batch)?;
        let mut x = batch.clone();
        let mut wi = 0;
        for layer in &self.layers {
            x = match layer {
                Layer::Dense { relu, .. } => {
                    let z = tensor::matmul(&x, &effs[wi])?;
                    wi += 1;
                    if *relu {
                        z.relu()
                    } else {
                        z
                    }
                }
                Layer::Conv { .. } => {
                    let z = tensor::conv2d(&x, &effs[wi], 1, Padding::Same)?;
                    wi += 1;
                    z.relu()
                }
                Layer::MaxPool => tensor::maxpool2x2(&x)?,
                Layer::Flatten { from } => {
                    let b = x.shape()[0];
                    x.reshape(&[b, from[0] * from[1] * from[2]])?
                }
            };
        }
        Ok(x)
    }

    /// Forward pass that captures everything [`Network::backward`] needs.
    pub fn forward_train(&self, batch: &Tensor) -> Result<(Tensor, ForwardCache), NetError> {
        self.check_input(batch)?;
        let mut cache = ForwardCache {
            acts: vec![batch.clone()],
            pools: Vec::with_capacity(self.layers.len()),
            effs: Vec::with_capacity(self.layers.len()),
        };
        let mut x = batch.clone();
        for layer in &self.layers {
            let mut pool_idx = None;
            let mut eff_used = None;
            x = match layer {
                Layer::Dense { param, relu } => {
                    let eff = param.effective_weights();
                    let z = tensor::matmul(&x, &eff)?;
                    eff_used = Some(eff);
                    if *relu {
                        z.relu()
                    } else {
                        z
                    }
                }
                Layer::Conv { param } => {
                    let eff = param.effective_weights();
                    let z = tensor::conv2d(&x, &eff, 1, Padding::Same)?;
                    eff_used = Some(eff);
                    z.relu()
                }
                Layer::MaxPool => {
                    let (out, idx) = tensor::maxpool2x2_with_indices(&x)?;
                    pool_idx = Some(idx);
                    out
                }
                Layer::Flatten { from } => {
                    let b = x.shape()[0];
                    x.reshape(&[b, from[0] * from[1] * from[2]])?
                }
            };
            cache.pools.push(pool_idx);
            cache.effs.push(eff_used);
            cache.acts.push(x.clone());
        }
        Ok((x, cache))
    }

    /// Backpropagates `logits_grad` through the cached pass. Returns one
    /// gradient tensor per weighted layer, aligned with the layer's
    /// trainable tensor: dL/dw in dense mode, `dL/d(effective) * w` in
    /// prune/flip mode (straight-through estimator through m or f).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        logits_grad: &Tensor,
    ) -> Result<Vec<Tensor>, NetError> {
        if cache.acts.len() != self.layers.len() + 1 {
            return Err(NetError::BadSpec(
                "forward cache does not match this network".into(),
            ));
        }
        let n_weighted = self.params().count();
        let mut grads: Vec<Option<Tensor>> = (0..n_weighted).map(|_| None).collect();
        let mut up = logits_grad.clone();
        let mut wi = n_weighted;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let input = &cache.acts[i];
            let output = &cache.acts[i + 1];
            match layer {
                Layer::Dense { param, relu } => {
                    wi -= 1;
                    if *relu {
                        up = tensor::relu_backward(&up, output)?;
                    }
                    let d_eff = tensor::matmul_tn(input, &up)?;
                    grads[wi] = Some(param_grad(param, d_eff)?);
                    up = tensor::matmul_nt(&up, cache.effs[i].as_ref().unwrap())?;
                }
                Layer::Conv { param } => {
                    wi -= 1;
                    up = tensor::relu_backward(&up, output)?;
                    let eff = cache.effs[i].as_ref().unwrap();
                    let (d_in, d_eff) =
                        tensor::conv2d_backward(input, eff, 1, Padding::Same, &up)?;
                    grads[wi] = Some(param_grad(param, d_eff)?);
                    up = d_in;
                }
                Layer::MaxPool => {
                    let idx = cache.pools[i].as_ref().unwrap();
                    up = tensor::maxpool2x2_backward(&up, idx, input.shape());
                }
                Layer::Flatten { .. } => {
                    up = up.reshape(input.shape())?;
                }
            }
        }
        Ok(grads.into_iter().map(Option::unwrap).collect())
    }

    /// Saves the network container: spec, mode, init provenance, and the
    /// raw `w`/`t` buffers per weighted layer. See [`save`] for the layout.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<(), NetError> {
        save(self, w)
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Network, NetError> {
        load(r)
    }
}

fn make_param(
    init_spec: &InitSpec,
    mode: Mode,
    fan_in: usize,
    fan_out: usize,
    shape: &[usize],
    layer_index: u64,
) -> Result<MaskedParam, NetError> {
    use rand::SeedableRng;
    let w_spec = InitSpec {
        seed: init::mix_seed(init_spec.seed, WEIGHT_SEED_SALT + layer_index),
        ..*init_spec
    };
    let w = init::init_weights(&w_spec, fan_in, fan_out, shape)?;
    Ok(match mode {
        Mode::Dense => MaskedParam::dense(w),
        Mode::Prune | Mode::Flip => {
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(init::mix_seed(
                init_spec.seed,
                SCORE_SEED_SALT + layer_index,
            ));
            let t = crate::masking::init_scores(shape, &mut rng);
            MaskedParam::masked(w, t, mode)?
        }
    })
}

fn param_grad(param: &MaskedParam, d_eff: Tensor) -> Result<Tensor, NetError> {
    Ok(match param.mode() {
        Mode::Dense => d_eff,
        // identity STE through m/f, then the chain rule factor w
        Mode::Prune | Mode::Flip => d_eff.mul(param.weights())?,
    })
}

fn unit_sign_param(param: &MaskedParam) -> Result<MaskedParam, NetError> {
    let signs: Vec<f32> = param
        .weights()
        .data()
        .iter()
        .map(|&w| if w > 0.0 { 1.0 } else { -1.0 })
        .collect();
    let w = Tensor::new(param.weights().shape().to_vec(), signs)?;
    Ok(match param.mode() {
        Mode::Dense => MaskedParam::dense(w),
        mode => MaskedParam::masked(w, param.scores().clone(), mode)?,
    })
}

// --- checkpoint container -------------------------------------------------
//
// Little-endian binary layout, version 1:
//
//   magic  b"CNCK" | u16 version | u8 mode | u8 init kind | f64 sign_prob_p
//   u64 seed | u8 name_len | name bytes
//   u32 input_shape[3]
//   u16 layer_count | per layer: u8 tag (0 dense, 1 conv, 2 pool) + u32 arg
//   u16 param_count | per param: u8 ndim | u32 dims[] | f32 w[] | f32 t[]

const CHECKPOINT_MAGIC: &[u8; 4] = b"CNCK";
const CHECKPOINT_VERSION: u16 = 1;

fn save<W: Write>(net: &Network, w: &mut W) -> Result<(), NetError> {
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    let mode = match net.mode {
        Mode::Dense => 0u8,
        Mode::Prune => 1,
        Mode::Flip => 2,
    };
    let kind = match net.init.kind {
        InitKind::GlorotNormal => 0u8,
        InitKind::HeNormal => 1,
        InitKind::SignedHeConstant => 2,
    };
    w.write_all(&[mode, kind])?;
    w.write_all(&net.init.sign_prob_p.to_le_bytes())?;
    w.write_all(&net.init.seed.to_le_bytes())?;
    let name = net.spec.name.as_bytes();
    if name.len() > u8::MAX as usize {
        return Err(NetError::Checkpoint("spec name too long".into()));
    }
    w.write_all(&[name.len() as u8])?;
    w.write_all(name)?;
    for d in net.spec.input_shape {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&(net.spec.layers.len() as u16).to_le_bytes())?;
    for desc in &net.spec.layers {
        let (tag, arg) = match *desc {
            LayerDesc::Dense { units } => (0u8, units as u32),
            LayerDesc::Conv { filters } => (1, filters as u32),
            LayerDesc::MaxPool => (2, 0),
        };
        w.write_all(&[tag])?;
        w.write_all(&arg.to_le_bytes())?;
    }
    let params: Vec<&MaskedParam> = net.params().collect();
    w.write_all(&(params.len() as u16).to_le_bytes())?;
    for p in params {
        let shape = p.weights().shape();
        w.write_all(&[shape.len() as u8])?;
        for &d in shape {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in p.weights().data() {
            w.write_all(&v.to_le_bytes())?;
        }
        for &v in p.scores().data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn load<R: Read>(r: &mut R) -> Result<Network, NetError> {
    fn read_exact<const N: usize, R: Read>(r: &mut R) -> Result<[u8; N], NetError> {
        let mut buf = [0u8; N];
        r.read_exact(&mut buf)?;
        Ok(buf)
    }
    let magic = read_exact::<4, _>(r)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(NetError::Checkpoint(format!(
            "bad magic {magic:02x?} at offset 0"
        )));
    }
    let version = u16::from_le_bytes(read_exact::<2, _>(r)?);
    if version != CHECKPOINT_VERSION {
        return Err(NetError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let [mode, kind] = read_exact::<2, _>(r)?;
    let mode = match mode {
        0 => Mode::Dense,
        1 => Mode::Prune,
        2 => Mode::Flip,
        other => return Err(NetError::Checkpoint(format!("bad mode tag {other}"))),
    };
    let kind = match kind {
        0 => InitKind::GlorotNormal,
        1 => InitKind::HeNormal,
        2 => InitKind::SignedHeConstant,
        other => return Err(NetError::Checkpoint(format!("bad init tag {other}"))),
    };
    let sign_prob_p = f64::from_le_bytes(read_exact::<8, _>(r)?);
    let seed = u64::from_le_bytes(read_exact::<8, _>(r)?);
    let name_len = read_exact::<1, _>(r)?[0] as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name)
        .map_err(|_| NetError::Checkpoint("spec name is not utf-8".into()))?;
    let mut input_shape = [0usize; 3];
    for d in &mut input_shape {
        *d = u32::from_le_bytes(read_exact::<4, _>(r)?) as usize;
    }
    let layer_count = u16::from_le_bytes(read_exact::<2, _>(r)?) as usize;
    let mut descs = Vec::with_capacity(layer_count);
    for _ in 0..layer_count {
        let tag = read_exact::<1, _>(r)?[0];
        let arg = u32::from_le_bytes(read_exact::<4, _>(r)?) as usize;
        descs.push(match tag {
            0 => LayerDesc::Dense { units: arg },
            1 => LayerDesc::Conv { filters: arg },
            2 => LayerDesc::MaxPool,
            other => return Err(NetError::Checkpoint(format!("bad layer tag {other}"))),
        });
    }
    let spec = NetworkSpec {
        name,
        input_shape,
        layers: descs,
    };
    let init_spec = InitSpec {
        kind,
        sign_prob_p,
        seed,
    };
    let mut net = Network::new(&spec, mode, &init_spec)?;
    let param_count = u16::from_le_bytes(read_exact::<2, _>(r)?) as usize;
    if param_count != net.params().count() {
        return Err(NetError::Checkpoint(format!(
            "expected {} params, file has {param_count}",
            net.params().count()
        )));
    }
    for param in net.params_mut() {
        let ndim = read_exact::<1, _>(r)?[0] as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(u32::from_le_bytes(read_exact::<4, _>(r)?) as usize);
        }
        if dims != param.weights().shape() {
            return Err(NetError::Checkpoint(format!(
                "tensor shape {dims:?} does not match spec shape {:?}",
                param.weights().shape()
            )));
        }
        let n: usize = dims.iter().product();
        let mut w_data = vec![0.0f32; n];
        let mut t_data = vec![0.0f32; n];
        for v in &mut w_data {
            *v = f32::from_le_bytes(read_exact::<4, _>(r)?);
        }
        for v in &mut t_data {
            *v = f32::from_le_bytes(read_exact::<4, _>(r)?);
        }
        let w = Tensor::new(dims.clone(), w_data)?;
        let t = Tensor::new(dims, t_data)?;
        *param = match mode {
            Mode::Dense => MaskedParam::dense(w),
            m => MaskedParam::masked(w, t, m)?,
        };
    }
    Ok(net)
}
