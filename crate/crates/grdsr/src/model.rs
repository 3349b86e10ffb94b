//! The guided residual dense network.
//!
//! Topology: a shallow 3x3 conv lifts the interpolated LR input to
//! `base_channels`; an optional shared extractor lifts the guidance image
//! to `guide_channels`. Each GRD block concatenates the guide features at
//! its entry, runs `layers_per_block` densely connected conv+BN+ReLU
//! layers of `growth_channels` each, fuses back to `base_channels` with a
//! plain conv and adds the block input (local residual). A final fusion
//! layer and a single-channel reconstruction conv produce the residual
//! image, which is added to the network input (global shortcut), so a
//! zeroed reconstruction layer makes the whole network the identity.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{GrdError, Result};
use crate::params::ModelParams;
use crate::tape::{BnBatchStats, BnMode, NodeId, Tape};
use crate::tensor::Tensor;

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.9;
const KERNEL: usize = 3;
// keeps the initial residual small without killing the gradient path
const RECON_INIT_SCALE: f32 = 0.1;

/// Network topology. `guide_channels = 0` builds the unguided variant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GrdConfig {
    pub num_blocks: usize,
    pub layers_per_block: usize,
    pub base_channels: usize,
    pub growth_channels: usize,
    pub guide_channels: usize,
}

impl Default for GrdConfig {
    fn default() -> Self {
        GrdConfig {
            num_blocks: 4,
            layers_per_block: 4,
            base_channels: 32,
            growth_channels: 16,
            guide_channels: 16,
        }
    }
}

impl GrdConfig {
    pub fn unguided(mut self) -> Self {
        self.guide_channels = 0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_blocks == 0
            || self.layers_per_block == 0
            || self.base_channels == 0
            || self.growth_channels == 0
        {
            return Err(GrdError::config(format!(
                "all topology fields except guide_channels must be >= 1: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn is_guided(&self) -> bool {
        self.guide_channels > 0
    }
}

/// Parameter-store indices for one conv + batch-norm + ReLU layer.
#[derive(Debug, Clone, Copy)]
pub struct LayerParams {
    pub weight: usize,
    pub bias: usize,
    pub bn_scale: usize,
    pub bn_shift: usize,
    pub bn_mean: usize,
    pub bn_var: usize,
}

/// Indices for a plain conv (fusion and reconstruction layers carry no
/// normalization or activation).
#[derive(Debug, Clone, Copy)]
pub struct ConvParams {
    pub weight: usize,
    pub bias: usize,
}

#[derive(Debug, Clone)]
struct GrdBlock {
    dense: Vec<LayerParams>,
    fusion: ConvParams,
}

#[derive(Debug)]
pub struct GrdNetwork {
    pub config: GrdConfig,
    pub params: ModelParams,
    shallow: LayerParams,
    guide_feature: Option<LayerParams>,
    blocks: Vec<GrdBlock>,
    global_fusion: LayerParams,
    reconstruction: ConvParams,
}

/// Batch statistics produced by one train-mode forward, keyed by the
/// running-buffer entries they update.
#[derive(Debug, Clone)]
pub struct BnUpdate {
    pub mean_entry: usize,
    pub var_entry: usize,
    pub stats: BnBatchStats,
}

/// Handles into a forward graph: the output node, the leaves created for
/// every parameter entry, and pending running-statistic updates.
pub struct ForwardPass {
    pub output: NodeId,
    pub param_nodes: Vec<(usize, NodeId)>,
    pub bn_updates: Vec<BnUpdate>,
}

struct Initializer {
    rng: ChaCha8Rng,
}

impl Initializer {
    fn new(seed: u64) -> Self {
        Initializer {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn conv_weight(&mut self, out_ch: usize, in_ch: usize, scale: f32) -> Vec<f32> {
        // fan-in scaled Gaussian
        let std = (2.0 / (in_ch * KERNEL * KERNEL) as f32).sqrt() * scale;
        let normal = Normal::new(0.0f32, std).expect("valid std");
        (0..out_ch * in_ch * KERNEL * KERNEL)
            .map(|_| normal.sample(&mut self.rng))
            .collect()
    }
}

fn push_conv(
    params: &mut ModelParams,
    init: &mut Initializer,
    name: &str,
    out_ch: usize,
    in_ch: usize,
    scale: f32,
) -> ConvParams {
    let weight = params.push(
        format!("{name}.weight"),
        vec![out_ch, in_ch, KERNEL, KERNEL],
        init.conv_weight(out_ch, in_ch, scale),
        true,
    );
    let bias = params.push(format!("{name}.bias"), vec![out_ch], vec![0.0; out_ch], true);
    ConvParams { weight, bias }
}

fn push_conv_bn(
    params: &mut ModelParams,
    init: &mut Initializer,
    name: &str,
    out_ch: usize,
    in_ch: usize,
) -> LayerParams {
    let conv = push_conv(params, init, name, out_ch, in_ch, 1.0);
    let bn_scale = params.push(
        format!("{name}.bn_scale"),
        vec![out_ch],
        vec![1.0; out_ch],
        true,
    );
    let bn_shift = params.push(
        format!("{name}.bn_shift"),
        vec![out_ch],
        vec![0.0; out_ch],
        true,
    );
    let bn_mean = params.push(
        format!("{name}.bn_running_mean"),
        vec![out_ch],
        vec![0.0; out_ch],
        false,
    );
    let bn_var = params.push(
        format!("{name}.bn_running_var"),
        vec![out_ch],
        vec![1.0; out_ch],
        false,
    );
    LayerParams {
        weight: conv.weight,
        bias: conv.bias,
        bn_scale,
        bn_shift,
        bn_mean,
        bn_var,
    }
}

impl GrdNetwork {
    /// Builds a network with fan-in-scaled Gaussian conv weights, zero
    /// biases and identity batch norms; deterministic per seed.
    pub fn build(config: GrdConfig, seed: u64) -> Result<GrdNetwork> {
        config.validate()?;
        let mut params = ModelParams::default();
        let mut init = Initializer::new(seed);
        let base = config.base_channels;
        let guide = config.guide_channels;
        let growth = config.growth_channels;

        let shallow = push_conv_bn(&mut params, &mut init, "shallow", base, 1);
        let guide_feature = if config.is_guided() {
            Some(push_conv_bn(&mut params, &mut init, "guide", guide, 1))
        } else {
            None
        };

        let mut blocks = Vec::with_capacity(config.num_blocks);
        for b in 0..config.num_blocks {
            let mut dense = Vec::with_capacity(config.layers_per_block);
            for l in 0..config.layers_per_block {
                let in_ch = base + guide + l * growth;
                dense.push(push_conv_bn(
                    &mut params,
                    &mut init,
                    &format!("block{b}.dense{l}"),
                    growth,
                    in_ch,
                ));
            }
            let fused_in = base + guide + config.layers_per_block * growth;
            let fusion = push_conv(
                &mut params,
                &mut init,
                &format!("block{b}.fusion"),
                base,
                fused_in,
                1.0,
            );
            blocks.push(GrdBlock { dense, fusion });
        }

        let global_fusion = push_conv_bn(&mut params, &mut init, "fusion", base, base);
        let reconstruction = push_conv(
            &mut params,
            &mut init,
            "reconstruction",
            1,
            base,
            RECON_INIT_SCALE,
        );

        Ok(GrdNetwork {
            config,
            params,
            shallow,
            guide_feature,
            blocks,
            global_fusion,
            reconstruction,
        })
    }

    /// Reconstitutes a network from a parameter store saved earlier; the
    /// layout is a pure function of the config, so entries are validated
    /// by rebuilding and comparing names and shapes.
    pub fn from_params(config: GrdConfig, params: ModelParams) -> Result<GrdNetwork> {
        let template = GrdNetwork::build(config, 0)?;
        if template.params.entries.len() != params.entries.len() {
            return Err(GrdError::format(format!(
                "parameter store has {} entries, config implies {}",
                params.entries.len(),
                template.params.entries.len()
            )));
        }
        for (have, want) in params.entries.iter().zip(&template.params.entries) {
            if have.name != want.name || have.shape != want.shape {
                return Err(GrdError::format(format!(
                    "parameter entry '{}' {:?} does not match expected '{}' {:?}",
                    have.name, have.shape, want.name, want.shape
                )));
            }
        }
        Ok(GrdNetwork { params, ..template })
    }

    pub fn trainable_parameters(&self) -> usize {
        self.params.trainable_values()
    }

    fn leaf_param(
        &self,
        tape: &mut Tape,
        entry: usize,
        trainable: bool,
        pass: &mut ForwardPass,
        cache: &mut Vec<Option<NodeId>>,
    ) -> NodeId {
        if let Some(node) = cache[entry] {
            return node;
        }
        let e = &self.params.entries[entry];
        let mut t = Tensor {
            shape: e.shape.clone(),
            data: e.data.clone(),
            grad: None,
            requires_grad: trainable && e.trainable,
        };
        t.grad = None;
        let node = tape.leaf(t);
        cache[entry] = Some(node);
        pass.param_nodes.push((entry, node));
        node
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_bn_relu(
        &self,
        tape: &mut Tape,
        x: NodeId,
        layer: &LayerParams,
        mode: BnMode,
        trainable: bool,
        pass: &mut ForwardPass,
        cache: &mut Vec<Option<NodeId>>,
    ) -> Result<NodeId> {
        let w = self.leaf_param(tape, layer.weight, trainable, pass, cache);
        let b = self.leaf_param(tape, layer.bias, trainable, pass, cache);
        let y = tape.conv2d(x, w, b)?;
        let scale = self.leaf_param(tape, layer.bn_scale, trainable, pass, cache);
        let shift = self.leaf_param(tape, layer.bn_shift, trainable, pass, cache);
        let (y, stats) = tape.batch_norm(
            y,
            scale,
            shift,
            &self.params.entries[layer.bn_mean].data,
            &self.params.entries[layer.bn_var].data,
            mode,
            BN_EPS,
        )?;
        if let Some(stats) = stats {
            pass.bn_updates.push(BnUpdate {
                mean_entry: layer.bn_mean,
                var_entry: layer.bn_var,
                stats,
            });
        }
        Ok(tape.relu(y))
    }

    /// Runs the network on existing tape nodes, so callers control whether
    /// the inputs carry gradients. `guide` is required iff the network was
    /// built guided.
    pub fn forward_on(
        &self,
        tape: &mut Tape,
        lr_interp: NodeId,
        guide: Option<NodeId>,
        mode: BnMode,
        trainable: bool,
    ) -> Result<ForwardPass> {
        match (self.config.is_guided(), guide.is_some()) {
            (true, false) => {
                return Err(GrdError::config(
                    "guided network invoked without a guidance input".to_string(),
                ))
            }
            (false, true) => {
                return Err(GrdError::config(
                    "unguided network invoked with a guidance input".to_string(),
                ))
            }
            _ => {}
        }
        if let Some(g) = guide {
            if tape.value(g).shape != tape.value(lr_interp).shape {
                return Err(GrdError::config(format!(
                    "guide shape {:?} does not match input shape {:?}",
                    tape.value(g).shape,
                    tape.value(lr_interp).shape
                )));
            }
        }

        let mut pass = ForwardPass {
            output: lr_interp,
            param_nodes: Vec::new(),
            bn_updates: Vec::new(),
        };
        let mut cache = vec![None; self.params.entries.len()];

        let mut features = self.conv_bn_relu(
            tape,
            lr_interp,
            &self.shallow,
            mode,
            trainable,
            &mut pass,
            &mut cache,
        )?;
        let guide_features = match (&self.guide_feature, guide) {
            (Some(layer), Some(g)) => Some(self.conv_bn_relu(
                tape, g, layer, mode, trainable, &mut pass, &mut cache,
            )?),
            _ => None,
        };

        for block in &self.blocks {
            let block_input = features;
            let mut dense_features = match guide_features {
                Some(g) => tape.concat_channels(block_input, g)?,
                None => block_input,
            };
            for layer in &block.dense {
                let grown = self.conv_bn_relu(
                    tape,
                    dense_features,
                    layer,
                    mode,
                    trainable,
                    &mut pass,
                    &mut cache,
                )?;
                dense_features = tape.concat_channels(dense_features, grown)?;
            }
            let w = self.leaf_param(tape, block.fusion.weight, trainable, &mut pass, &mut cache);
            let b = self.leaf_param(tape, block.fusion.bias, trainable, &mut pass, &mut cache);
            let fused = tape.conv2d(dense_features, w, b)?;
            features = tape.add(block_input, fused)?;
        }

        let fused = self.conv_bn_relu(
            tape,
            features,
            &self.global_fusion,
            mode,
            trainable,
            &mut pass,
            &mut cache,
        )?;
        let w = self.leaf_param(tape, self.reconstruction.weight, trainable, &mut pass, &mut cache);
        let b = self.leaf_param(tape, self.reconstruction.bias, trainable, &mut pass, &mut cache);
        let residual = tape.conv2d(fused, w, b)?;
        pass.output = tape.add(lr_interp, residual)?;
        Ok(pass)
    }

    /// Eval-mode inference with running batch-norm statistics.
    pub fn forward(&self, lr_interp: &Tensor, guide: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(lr_interp.clone());
        let g = tape.leaf(guide.clone());
        let pass = self.forward_on(&mut tape, x, Some(g), BnMode::Eval, false)?;
        let out = tape.value(pass.output).clone();
        out.check_finite("network output")?;
        Ok(out)
    }

    /// Eval-mode inference for the unguided variant.
    pub fn forward_unguided(&self, lr_interp: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(lr_interp.clone());
        let pass = self.forward_on(&mut tape, x, None, BnMode::Eval, false)?;
        let out = tape.value(pass.output).clone();
        out.check_finite("network output")?;
        Ok(out)
    }

    /// Folds train-mode batch statistics into the running buffers.
    pub fn apply_bn_updates(&mut self, updates: &[BnUpdate]) {
        for u in updates {
            let mean = &mut self.params.entries[u.mean_entry].data;
            for (r, &m) in mean.iter_mut().zip(&u.stats.mean) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * m;
            }
            let var = &mut self.params.entries[u.var_entry].data;
            for (r, &v) in var.iter_mut().zip(&u.stats.var) {
                *r = BN_MOMENTUM * *r + (1.0 - BN_MOMENTUM) * v;
            }
        }
    }

    /// Zeroes the reconstruction layer, making the forward pass the
    /// identity on its input. Used by tests and identity baselines.
    pub fn zero_reconstruction(&mut self) {
        for idx in [self.reconstruction.weight, self.reconstruction.bias] {
            for v in &mut self.params.entries[idx].data {
                *v = 0.0;
            }
        }
    }

    /// Entry indices of the dense layer `l` in block `b`; wiring probes in
    /// tests zero these to verify connectivity.
    pub fn dense_layer_entries(&self, block: usize, layer: usize) -> (usize, usize) {
        let l = &self.blocks[block].dense[layer];
        (l.weight, l.bias)
    }

    /// Sets every batch-norm shift to the given value. Gradient checks use
    /// this to keep activations away from the ReLU kink.
    pub fn set_bn_shifts(&mut self, value: f32) {
        let shift_entries: Vec<usize> = self
            .params
            .entries
            .iter()
            .enumerate()
            .filter(|(_, e)| e.name.ends_with(".bn_shift"))
            .map(|(i, _)| i)
            .collect();
        for idx in shift_entries {
            for v in &mut self.params.entries[idx].data {
                *v = value;
            }
        }
    }
}
