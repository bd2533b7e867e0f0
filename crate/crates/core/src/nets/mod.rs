//! Implicit networks and the ways they are conditioned on a shape.
//!
//! Every network here is a stack of dense layers with relu between them and a
//! linear output. Parameters live in a flat [`ParameterVector`]; forwards take
//! one graph var per segment so the same code serves plain evaluation, training
//! and differentiation through inner-loop updates.
//!
//! Weights are stored `[fan_in, fan_out]` and applied as `x · W + b`.

mod params;

pub use params::{split_flat, Layout, ParameterVector, Segment};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Zero-based index of the layer that receives the latent code a second time.
pub const CONCAT_REINJECT_LAYER: usize = 2;

/// Size of the hypernetwork's output head relative to a Kaiming init.
pub const HYPER_HEAD_SCALE: f64 = 1e-2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MlpConfig {
    pub in_dim: usize,
    pub hidden_dim: usize,
    /// Number of linear layers, including the output layer.
    pub num_layers: usize,
    pub out_dim: usize,
}

impl Default for MlpConfig {
    fn default() -> Self {
        MlpConfig {
            in_dim: 2,
            hidden_dim: 256,
            num_layers: 4,
            out_dim: 1,
        }
    }
}

impl MlpConfig {
    pub fn new(in_dim: usize, hidden_dim: usize, num_layers: usize, out_dim: usize) -> Self {
        MlpConfig {
            in_dim,
            hidden_dim,
            num_layers,
            out_dim,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_layers < 2 {
            return Err(Error::Config(format!(
                "an MLP needs at least 2 layers, got {}",
                self.num_layers
            )));
        }
        if self.in_dim == 0 || self.hidden_dim == 0 || self.out_dim == 0 {
            return Err(Error::Config(format!("MLP dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` of every layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        stack_dims(self.in_dim, self.hidden_dim, self.num_layers, self.out_dim)
    }

    pub fn layout(&self) -> Layout {
        stack_layout(&self.layer_dims())
    }

    pub fn param_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }
}

fn stack_dims(input: usize, hidden: usize, layers: usize, output: usize) -> Vec<(usize, usize)> {
    (0..layers)
        .map(|l| {
            let fan_in = if l == 0 { input } else { hidden };
            let fan_out = if l + 1 == layers { output } else { hidden };
            (fan_in, fan_out)
        })
        .collect()
}

fn stack_layout(dims: &[(usize, usize)]) -> Layout {
    Layout::from_shapes(dims.iter().enumerate().flat_map(|(l, &(i, o))| {
        [(format!("w{l}"), vec![i, o]), (format!("b{l}"), vec![o])]
    }))
}

/// Kaiming-uniform weights, zero biases.
fn init_stack(layout: Layout, rng: &mut ChaCha8Rng) -> ParameterVector {
    let mut p = ParameterVector::zeros(layout);
    let segments = p.layout().segments().to_vec();
    for s in segments.iter().filter(|s| s.shape.len() == 2) {
        let bound = (6.0 / s.shape[0] as f64).sqrt();
        for v in &mut p.data_mut()[s.range()] {
            *v = rng.gen_range(-bound..bound);
        }
    }
    p
}

pub fn init_mlp(config: &MlpConfig, seed: u64) -> Result<ParameterVector> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(init_stack(config.layout(), &mut rng))
}

fn expect_segments(what: &'static str, layout_len: usize, got: usize) -> Result<()> {
    if layout_len != got {
        return Err(Error::Mismatch {
            what,
            expected: layout_len,
            got,
        });
    }
    Ok(())
}

fn expect_cols(g: &Graph, what: &'static str, v: Var, cols: usize) -> Result<usize> {
    match g.shape(v)?.as_slice() {
        [n, c] if *c == cols => Ok(*n),
        [_, c] => Err(Error::Mismatch {
            what,
            expected: cols,
            got: *c,
        }),
        other => Err(Error::Mismatch {
            what,
            expected: 2,
            got: other.len(),
        }),
    }
}

/// Dense layers `(w, b)` with relu between them and a linear last layer.
fn dense_stack(g: &Graph, params: &[Var], x: Var) -> Result<Var> {
    let layers = params.len() / 2;
    let mut h = x;
    for l in 0..layers {
        h = g.add(g.matmul(h, params[2 * l])?, params[2 * l + 1])?;
        if l + 1 < layers {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

/// Φ(x; φ) for a batch of coordinates `[n, in_dim]`, returning `[n, out_dim]`.
pub fn mlp_forward(g: &Graph, config: &MlpConfig, params: &[Var], coords: Var) -> Result<Var> {
    expect_segments("MLP segment count", 2 * config.num_layers, params.len())?;
    expect_cols(g, "coordinate dimension", coords, config.in_dim)?;
    dense_stack(g, params, coords)
}

/// Evaluate Φ on plain values without keeping a graph around.
pub fn mlp_eval(config: &MlpConfig, params: &ParameterVector, coords: &Tensor) -> Result<Tensor> {
    let g = Graph::new();
    let vars = params.to_graph(&g, false);
    let x = g.constant(coords.clone());
    let out = mlp_forward(&g, config, &vars, x)?;
    Ok(g.value(out)?)
}

/// Latent shape embedding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentCode {
    z: Vec<f64>,
}

impl LatentCode {
    pub fn new(z: Vec<f64>) -> Result<Self> {
        if let Some(i) = z.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite {
                what: "latent code entry",
                step: i,
            });
        }
        Ok(LatentCode { z })
    }

    pub fn zeros(dim: usize) -> Self {
        LatentCode { z: vec![0.0; dim] }
    }

    pub fn dim(&self) -> usize {
        self.z.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.z
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::vector(self.z.clone())
    }
}

/// Φ with the latent code appended to its input and again at layer 3.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConcatConfig {
    pub net: MlpConfig,
    pub latent_dim: usize,
}

impl ConcatConfig {
    pub fn validate(&self) -> Result<()> {
        self.net.validate()?;
        if self.latent_dim == 0 {
            return Err(Error::Config("latent dimension must be positive".into()));
        }
        Ok(())
    }

    fn injected(&self, layer: usize) -> bool {
        layer == 0 || layer == CONCAT_REINJECT_LAYER
    }

    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        self.net
            .layer_dims()
            .into_iter()
            .enumerate()
            .map(|(l, (i, o))| if self.injected(l) { (i + self.latent_dim, o) } else { (i, o) })
            .collect()
    }

    pub fn layout(&self) -> Layout {
        stack_layout(&self.layer_dims())
    }

    pub fn param_count(&self) -> usize {
        self.layout().len()
    }
}

pub fn init_concat(config: &ConcatConfig, seed: u64) -> Result<ParameterVector> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(init_stack(config.layout(), &mut rng))
}

/// Φ([x, z]; φ) with `z` re-entering at the third layer.
///
/// A widened layer `[h, z] · W + b` is evaluated as `h · W_h + (z · W_z + b)`,
/// where the bracket is a single row shared by the whole batch. The result is
/// the same function as a literal concatenation.
pub fn concat_forward(
    g: &Graph,
    config: &ConcatConfig,
    params: &[Var],
    z: Var,
    coords: Var,
) -> Result<Var> {
    let layers = config.net.num_layers;
    expect_segments("concat segment count", 2 * layers, params.len())?;
    let zdim = g.shape(z)?.iter().product::<usize>();
    if zdim != config.latent_dim {
        return Err(Error::Mismatch {
            what: "latent dimension",
            expected: config.latent_dim,
            got: zdim,
        });
    }
    expect_cols(g, "coordinate dimension", coords, config.net.in_dim)?;
    let zrow = g.reshape(z, &[1, zdim])?;
    let mut h = coords;
    for l in 0..layers {
        let (w, b) = (params[2 * l], params[2 * l + 1]);
        h = if config.injected(l) {
            let width = g.shape(h)?[1];
            let wh = g.slice_rows(w, 0, width)?;
            let wz = g.slice_rows(w, width, zdim)?;
            let shift = g.add(g.matmul(zrow, wz)?, b)?;
            g.add(g.matmul(h, wh)?, shift)?
        } else {
            g.add(g.matmul(h, w)?, b)?
        };
        if l + 1 < layers {
            h = g.relu(h)?;
        }
    }
    Ok(h)
}

/// Hypernetwork mapping a latent code to every parameter of a target Φ.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HyperConfig {
    pub target: MlpConfig,
    pub latent_dim: usize,
    pub hidden_dim: usize,
    /// Linear layers of the hypernetwork itself; 1 means a single affine map.
    pub num_layers: usize,
}

impl HyperConfig {
    pub fn new(target: MlpConfig, latent_dim: usize, hidden_dim: usize) -> Self {
        HyperConfig {
            target,
            latent_dim,
            hidden_dim,
            num_layers: 3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.target.validate()?;
        if self.latent_dim == 0 || self.num_layers == 0 || self.hidden_dim == 0 {
            return Err(Error::Config(format!("invalid hypernetwork: {self:?}")));
        }
        Ok(())
    }

    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        stack_dims(
            self.latent_dim,
            self.hidden_dim,
            self.num_layers,
            self.target.param_count(),
        )
    }

    pub fn layout(&self) -> Layout {
        stack_layout(&self.layer_dims())
    }
}

/// Hidden layers Kaiming-uniform; the head is scaled by [`HYPER_HEAD_SCALE`]
/// and its bias holds an ordinary Φ initialization, so every code starts out
/// generating a network close to a freshly initialized one.
pub fn init_hypernet(config: &HyperConfig, seed: u64) -> Result<ParameterVector> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = init_stack(config.layout(), &mut rng);
    let last = config.num_layers - 1;
    for v in p.segment_mut(&format!("w{last}")).expect("head weight") {
        *v *= HYPER_HEAD_SCALE;
    }
    let phi0 = init_stack(config.target.layout(), &mut rng);
    p.segment_mut(&format!("b{last}"))
        .expect("head bias")
        .copy_from_slice(phi0.data());
    Ok(p)
}

/// Generate the target Φ's segment vars from `z`.
pub fn hypernet_forward(
    g: &Graph,
    config: &HyperConfig,
    hparams: &[Var],
    z: Var,
) -> Result<Vec<Var>> {
    expect_segments("hypernetwork segment count", 2 * config.num_layers, hparams.len())?;
    let zdim = g.shape(z)?.iter().product::<usize>();
    if zdim != config.latent_dim {
        return Err(Error::Mismatch {
            what: "latent dimension",
            expected: config.latent_dim,
            got: zdim,
        });
    }
    let zrow = g.reshape(z, &[1, zdim])?;
    let flat = dense_stack(g, hparams, zrow)?;
    let flat = g.reshape(flat, &[config.target.param_count()])?;
    split_flat(g, flat, &config.target.layout())
}

/// Rewrite a concat-conditioned Φ as a one-layer hypernetwork over the plain Φ.
///
/// The generated network keeps the coordinate part of every weight and every
/// non-injected layer as a constant bias of the head. Only the bias segments of
/// the injected layers depend on `z`, through the code's columns of the
/// widened weights.
pub fn build_bias_only_hypernet(
    config: &ConcatConfig,
    params: &ParameterVector,
) -> Result<(HyperConfig, ParameterVector)> {
    config.validate()?;
    expect_segments("concat parameter length", config.param_count(), params.len())?;
    let hyper = HyperConfig {
        target: config.net,
        latent_dim: config.latent_dim,
        hidden_dim: 1,
        num_layers: 1,
    };
    let target = config.net.layout();
    let total = target.len();
    let zdim = config.latent_dim;
    let mut weight = vec![0.0; zdim * total];
    let mut bias = vec![0.0; total];
    for (l, &(fan_in, fan_out)) in config.net.layer_dims().iter().enumerate() {
        let w = params.segment(&format!("w{l}")).expect("weight segment");
        let b = params.segment(&format!("b{l}")).expect("bias segment");
        let tw = target.get(&format!("w{l}")).expect("target weight").offset;
        let tb = target.get(&format!("b{l}")).expect("target bias").offset;
        // Coordinate rows come first in the widened weight, so they are a prefix.
        bias[tw..tw + fan_in * fan_out].copy_from_slice(&w[..fan_in * fan_out]);
        bias[tb..tb + fan_out].copy_from_slice(b);
        if config.injected(l) {
            for k in 0..zdim {
                let row = &w[(fan_in + k) * fan_out..(fan_in + k + 1) * fan_out];
                weight[k * total + tb..k * total + tb + fan_out].copy_from_slice(row);
            }
        }
    }
    let mut data = weight;
    data.extend(bias);
    Ok((hyper, ParameterVector::new(hyper.layout(), data)?))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    #[default]
    Mean,
    Max,
}

/// Per-point MLP over `(coord, sdf)` followed by a symmetric pooling.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub coord_dim: usize,
    pub hidden_dim: usize,
    pub num_layers: usize,
    pub latent_dim: usize,
    pub pooling: Pooling,
}

impl EncoderConfig {
    pub fn new(coord_dim: usize, hidden_dim: usize, latent_dim: usize, pooling: Pooling) -> Self {
        EncoderConfig {
            coord_dim,
            hidden_dim,
            num_layers: 4,
            latent_dim,
            pooling,
        }
    }

    pub fn point_net(&self) -> MlpConfig {
        MlpConfig::new(self.coord_dim + 1, self.hidden_dim, self.num_layers, self.latent_dim)
    }

    pub fn layout(&self) -> Layout {
        self.point_net().layout()
    }
}

pub fn init_encoder(config: &EncoderConfig, seed: u64) -> Result<ParameterVector> {
    init_mlp(&config.point_net(), seed)
}

/// Encode a context `[n, coord_dim + 1]` of `(coord, sdf)` rows into `[latent_dim]`.
pub fn set_encode(g: &Graph, config: &EncoderConfig, eparams: &[Var], context: Var) -> Result<Var> {
    let n = expect_cols(g, "context width", context, config.coord_dim + 1)?;
    if n == 0 {
        return Err(Error::Empty("set encoder context"));
    }
    let features = mlp_forward(g, &config.point_net(), eparams, context)?;
    let pooled = match config.pooling {
        Pooling::Mean => g.mean_rows(features)?,
        Pooling::Max => g.max_rows(features)?,
    };
    Ok(g.reshape(pooled, &[config.latent_dim])?)
}

#[cfg(test)]
mod tests;
