//! The wavelet neural operator used as the GP's parametric mean function:
//! a lifting layer, J wavelet integral blocks, and a projection head.
//!
//! Each block computes `gelu(idwt(W_spec · approx(dwt(v))) + W_skip · v)`:
//! the wavelet path channel-mixes the coarsest-level approximation
//! coefficients and drops the detail bands (the pointwise skip path carries
//! the high-frequency content), a pointwise linear skip runs in parallel,
//! and the activation is applied to the sum.

use rand::prelude::*;
use rand_chacha::ChaCha12Rng;

use crate::error::{NogapError, Result};
use crate::tape::{Adjoints, NodeId, Tape};
use crate::tensor::Tensor;
use crate::wavelet::WaveletName;

/// Architecture of the operator network.
#[derive(Clone, Copy, Debug)]
pub struct WnoConfig {
    /// Channel width after lifting (Table-style "FNN1").
    pub lift_width: usize,
    /// Hidden width of the projection head ("FNN2").
    pub proj_width: usize,
    /// Number of wavelet integral blocks J.
    pub n_blocks: usize,
    /// Wavelet decomposition depth inside every block.
    pub levels: usize,
    pub wavelet: WaveletName,
    /// 1 or 2 grid axes.
    pub spatial_dim: usize,
    /// Input field channels plus coordinate channels.
    pub in_channels: usize,
}

impl WnoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lift_width == 0 || self.proj_width == 0 || self.n_blocks == 0 || self.levels == 0 {
            return Err(NogapError::Config(
                "lift_width, proj_width, n_blocks and levels must all be >= 1".into(),
            ));
        }
        if self.spatial_dim != 1 && self.spatial_dim != 2 {
            return Err(NogapError::Config(format!(
                "spatial_dim must be 1 or 2, got {}",
                self.spatial_dim
            )));
        }
        if self.in_channels == 0 {
            return Err(NogapError::Config("in_channels must be >= 1".into()));
        }
        Ok(())
    }

    /// Canonical parameter list: (name, shape), in the order used everywhere
    /// (initialization, flat packing, checkpoints, tape leaves).
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let w = self.lift_width;
        let mut out = vec![
            ("lift.weight".to_string(), vec![self.in_channels, w]),
            ("lift.bias".to_string(), vec![w]),
        ];
        for j in 0..self.n_blocks {
            out.push((format!("block{j}.spectral"), vec![w, w]));
            out.push((format!("block{j}.skip"), vec![w, w]));
        }
        out.push(("proj.weight1".to_string(), vec![w, self.proj_width]));
        out.push(("proj.bias1".to_string(), vec![self.proj_width]));
        out.push(("proj.weight2".to_string(), vec![self.proj_width, 1]));
        out.push(("proj.bias2".to_string(), vec![1]));
        out
    }

    /// Total scalar parameter count.
    pub fn n_params(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }
}

/// All trainable tensors of the operator network, in canonical order.
#[derive(Clone, Debug)]
pub struct WnoParams {
    pub config: WnoConfig,
    tensors: Vec<Tensor>,
}

impl WnoParams {
    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.config
            .param_shapes()
            .into_iter()
            .zip(&self.tensors)
            .map(|((name, _), t)| (name, t))
            .collect()
    }

    fn from_tensors(config: WnoConfig, tensors: Vec<Tensor>) -> Result<Self> {
        let shapes = config.param_shapes();
        if tensors.len() != shapes.len() {
            return Err(NogapError::shape(
                "WnoParams",
                format!("{} parameter tensors", shapes.len()),
                format!("{}", tensors.len()),
            ));
        }
        for ((name, shape), t) in shapes.iter().zip(&tensors) {
            if t.shape() != shape.as_slice() {
                return Err(NogapError::shape(
                    "WnoParams",
                    format!("{name} shape {shape:?}"),
                    format!("{:?}", t.shape()),
                ));
            }
            if !t.all_finite() {
                return Err(NogapError::numeric("WnoParams", format!("non-finite entry in {name}")));
            }
        }
        Ok(WnoParams { config, tensors })
    }

    /// Rebuild from named tensors (checkpoint loading).
    pub fn from_named(config: WnoConfig, mut lookup: impl FnMut(&str) -> Option<Tensor>) -> Result<Self> {
        let mut tensors = Vec::new();
        for (name, _) in config.param_shapes() {
            let t = lookup(&name).ok_or_else(|| {
                NogapError::format("WnoParams::from_named", format!("missing tensor '{name}'"))
            })?;
            tensors.push(t);
        }
        Self::from_tensors(config, tensors)
    }

    /// Flatten all parameters into one vector (canonical order).
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.config.n_params());
        for t in &self.tensors {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Inverse of [`WnoParams::to_flat`].
    pub fn from_flat(config: WnoConfig, flat: &[f64]) -> Result<Self> {
        if flat.len() != config.n_params() {
            return Err(NogapError::shape(
                "WnoParams::from_flat",
                format!("{} parameters", config.n_params()),
                format!("{}", flat.len()),
            ));
        }
        let mut tensors = Vec::new();
        let mut offset = 0;
        for (_, shape) in config.param_shapes() {
            let len: usize = shape.iter().product();
            tensors.push(Tensor::new(shape, flat[offset..offset + len].to_vec())?);
            offset += len;
        }
        Self::from_tensors(config, tensors)
    }

    /// All-zero parameters (useful as a degenerate baseline).
    pub fn zeros(config: WnoConfig) -> Result<Self> {
        config.validate()?;
        let tensors = config
            .param_shapes()
            .into_iter()
            .map(|(_, shape)| Tensor::zeros(shape))
            .collect();
        Ok(WnoParams { config, tensors })
    }
}

/// Deterministic parameter initialization: dense layers (weights and biases)
/// uniform in ±1/√fan_in; spectral channel mixers uniform in
/// [0, 1/(c_in·c_out)).
pub fn wno_init(config: &WnoConfig, seed: u64) -> Result<WnoParams> {
    config.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let w = config.lift_width;
    let spectral_scale = 1.0 / (w * w) as f64;
    let mut tensors = Vec::new();
    for (name, shape) in config.param_shapes() {
        let len: usize = shape.iter().product();
        let data: Vec<f64> = if name.ends_with(".spectral") {
            (0..len).map(|_| rng.random_range(0.0..spectral_scale)).collect()
        } else {
            // fan_in of a dense map [c_in, c_out] is c_in; biases use the
            // same bound as their layer's weights.
            let fan_in = match name.as_str() {
                "lift.weight" | "lift.bias" => config.in_channels,
                "proj.weight1" | "proj.bias1" => w,
                "proj.weight2" | "proj.bias2" => config.proj_width,
                _ => w, // block skip maps are width → width
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..len).map(|_| rng.random_range(-bound..bound)).collect()
        };
        tensors.push(Tensor::new(shape, data)?);
    }
    WnoParams::from_tensors(*config, tensors)
}

/// Record every parameter tensor as a tape leaf, canonical order.
pub fn param_leaves(tape: &mut Tape, params: &WnoParams) -> Result<Vec<NodeId>> {
    params.tensors.iter().map(|t| tape.leaf(t.clone())).collect()
}

/// Carve parameter nodes out of one flat leaf vector (canonical order);
/// used to gradient-check the whole network through a single leaf.
pub fn param_nodes_from_flat_leaf(tape: &mut Tape, leaf: NodeId, config: &WnoConfig) -> Result<Vec<NodeId>> {
    let mut nodes = Vec::new();
    let mut offset = 0;
    for (_, shape) in config.param_shapes() {
        let len: usize = shape.iter().product();
        let flat = tape.slice(leaf, 0, offset, len)?;
        nodes.push(tape.reshape(flat, shape)?);
        offset += len;
    }
    Ok(nodes)
}

/// Collect parameter adjoints into a flat gradient vector (canonical order);
/// parameters no gradient flowed to contribute zeros.
pub fn grads_to_flat(adjoints: &Adjoints, param_nodes: &[NodeId], config: &WnoConfig) -> Vec<f64> {
    let mut out = Vec::with_capacity(config.n_params());
    for (node, (_, shape)) in param_nodes.iter().zip(config.param_shapes()) {
        let g = adjoints.get_or_zeros(*node, &shape);
        out.extend_from_slice(g.data());
    }
    out
}

/// Constant mask that keeps the coarsest-level approximation region of a
/// packed wavelet tensor `[batch, grid…, channels]` and zeroes the details.
fn approx_mask(shape: &[usize], levels: usize, spatial_dim: usize) -> Tensor {
    let total: usize = shape.iter().product();
    let st = crate::tensor::strides(shape);
    let mut data = vec![0.0; total];
    let extents: Vec<usize> = (0..spatial_dim).map(|a| shape[1 + a] >> levels).collect();
    'outer: for (flat, slot) in data.iter_mut().enumerate() {
        for a in 0..spatial_dim {
            let idx = (flat / st[1 + a]) % shape[1 + a];
            if idx >= extents[a] {
                continue 'outer;
            }
        }
        *slot = 1.0;
    }
    Tensor::new(shape.to_vec(), data).expect("mask shape matches count")
}

/// One wavelet integral block on the tape (`v` is `[batch, grid…, width]`).
pub fn wavelet_block_on_tape(
    tape: &mut Tape,
    config: &WnoConfig,
    v: NodeId,
    spectral: NodeId,
    skip: NodeId,
) -> Result<NodeId> {
    let coeffs = tape.dwt_hook(v, config.wavelet, config.levels, config.spatial_dim)?;
    let mask = approx_mask(tape.value(coeffs).shape(), config.levels, config.spatial_dim);
    let mask_id = tape.leaf(mask)?;
    let kept = tape.mul_elementwise(coeffs, mask_id)?;
    let mixed = tape.conv1x1_channels(kept, spectral, None)?;
    let spectral_path = tape.idwt_hook(mixed, config.wavelet, config.levels, config.spatial_dim)?;
    let skip_path = tape.conv1x1_channels(v, skip, None)?;
    let summed = tape.add(spectral_path, skip_path)?;
    Ok(tape.gelu(summed))
}

/// Full forward pass `h(Z; θ_NN)`: lift → J blocks → projection head.
/// `inputs` is `[batch, grid…, in_channels]` (field plus coordinate channels);
/// the output is `[batch, grid…, 1]`.
pub fn wno_forward_on_tape(
    tape: &mut Tape,
    config: &WnoConfig,
    param_nodes: &[NodeId],
    inputs: NodeId,
) -> Result<NodeId> {
    config.validate()?;
    let expected_rank = 2 + config.spatial_dim;
    let in_shape = tape.value(inputs).shape().to_vec();
    if in_shape.len() != expected_rank || in_shape[expected_rank - 1] != config.in_channels {
        return Err(NogapError::shape(
            "wno_forward",
            format!("[batch, grid…, {}] with rank {expected_rank}", config.in_channels),
            format!("{:?}", in_shape),
        ));
    }
    if param_nodes.len() != config.param_shapes().len() {
        return Err(NogapError::shape(
            "wno_forward",
            format!("{} parameter nodes", config.param_shapes().len()),
            format!("{}", param_nodes.len()),
        ));
    }
    let lift_w = param_nodes[0];
    let lift_b = param_nodes[1];
    let mut v = tape.conv1x1_channels(inputs, lift_w, Some(lift_b))?;
    for j in 0..config.n_blocks {
        let spectral = param_nodes[2 + 2 * j];
        let skip = param_nodes[3 + 2 * j];
        v = wavelet_block_on_tape(tape, config, v, spectral, skip)?;
    }
    let base = 2 + 2 * config.n_blocks;
    let p = tape.conv1x1_channels(v, param_nodes[base], Some(param_nodes[base + 1]))?;
    let p = tape.gelu(p);
    tape.conv1x1_channels(p, param_nodes[base + 2], Some(param_nodes[base + 3]))
}

/// Convenience: run the forward pass on a fresh tape and return the values.
pub fn wno_forward(params: &WnoParams, inputs: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new();
    let input_id = tape.leaf(inputs.clone())?;
    let nodes = param_leaves(&mut tape, params)?;
    let out = wno_forward_on_tape(&mut tape, &params.config, &nodes, input_id)?;
    Ok(tape.value(out).clone())
}

/// Append normalized coordinate channels to a batch of scalar fields:
/// `[N, grid…] → [N, grid…, 1 + spatial_dim]`, channel 0 the field, then one
/// channel per axis holding that axis's coordinate in [0, 1].
pub fn attach_coords(fields: &Tensor, coords: &[Vec<f64>]) -> Result<Tensor> {
    let shape = fields.shape();
    if shape.len() != 1 + coords.len() {
        return Err(NogapError::shape(
            "attach_coords",
            format!("[N, grid…] with {} grid axes", coords.len()),
            format!("{:?}", shape),
        ));
    }
    for (a, c) in coords.iter().enumerate() {
        if c.len() != shape[1 + a] {
            return Err(NogapError::shape(
                "attach_coords",
                format!("axis {a} coordinates of length {}", shape[1 + a]),
                format!("{}", c.len()),
            ));
        }
    }
    let n = shape[0];
    let d = coords.len();
    let grid_len: usize = shape[1..].iter().product();
    let channels = 1 + d;
    let mut out = vec![0.0; n * grid_len * channels];
    let fd = fields.data();
    for s in 0..n {
        for g in 0..grid_len {
            let base = (s * grid_len + g) * channels;
            out[base] = fd[s * grid_len + g];
            // Decompose the flat grid index into per-axis indices.
            let mut rem = g;
            for a in (0..d).rev() {
                let idx = rem % shape[1 + a];
                rem /= shape[1 + a];
                out[base + 1 + a] = coords[a][idx];
            }
        }
    }
    let mut out_shape = shape.to_vec();
    out_shape.push(channels);
    Tensor::new(out_shape, out)
}
