//! The vehicle/text matching network.
//!
//! A small VGG-shaped convolutional trunk (3x3 kernels, stride 1, padding 1,
//! 2x2 max pooling after each block) encodes the chip; a single fully
//! connected layer maps the flattened trunk output to the visual feature. A
//! stack of fully connected layers encodes the bag-of-words description. The
//! two features are concatenated, pushed through one fused layer, and a
//! two-way head scores "no" (class 0) against "yes" (class 1).

use std::path::Path;

use thiserror::Error;

use crate::layers::{
    init_params, save_tensors, load_tensors, softmax_cross_entropy, softmax_row, Conv2dLayer,
    ContainerError, DenseLayer, InitScheme, LayerError,
};
use crate::seeding;
use crate::tensor::{NodeId, Tape, Tensor, TensorError};
use crate::text::{encode_bow, ClassDescription, TextError, Vocabulary};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Layer(#[from] LayerError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Container(#[from] ContainerError),
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("chip batch shape {got:?}, expected [batch, 3, {size}, {size}]")]
    ChipShape { got: Vec<usize>, size: usize },
    #[error("bow batch shape {got:?}, expected [{batch}, {vocab}]")]
    BowShape {
        got: Vec<usize>,
        batch: usize,
        vocab: usize,
    },
    #[error("label count {labels} does not match batch size {batch}")]
    LabelCount { labels: usize, batch: usize },
    #[error("checkpoint entry {name:?} has shape {got:?}, expected {expected:?}")]
    CheckpointShape {
        name: String,
        got: Vec<usize>,
        expected: Vec<usize>,
    },
    #[error("checkpoint is missing entry {0:?}")]
    CheckpointMissing(String),
    #[error("checkpoint holds unexpected entry {0:?}")]
    CheckpointUnexpected(String),
}

/// Network architecture. `block_depths` lists the channel width of every
/// conv layer, grouped into pooling blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VtmConfig {
    pub input_size: usize,
    pub block_depths: Vec<Vec<usize>>,
    pub visual_dim: usize,
    pub text_dims: Vec<usize>,
    pub fusion_dim: usize,
    pub seed: u64,
}

impl VtmConfig {
    /// The full 13-layer trunk: 64-64 / 128-128 / 256-256-256 / 512-512-512
    /// / 512-512-512.
    pub fn full(seed: u64) -> Self {
        VtmConfig {
            input_size: 64,
            block_depths: vec![
                vec![64, 64],
                vec![128, 128],
                vec![256, 256, 256],
                vec![512, 512, 512],
                vec![512, 512, 512],
            ],
            visual_dim: 256,
            text_dims: vec![32, 32],
            fusion_dim: 128,
            seed,
        }
    }

    /// Same layer layout with narrow channels; trains in minutes on a CPU.
    pub fn tiny(seed: u64) -> Self {
        VtmConfig {
            block_depths: vec![
                vec![8, 8],
                vec![16, 16],
                vec![32, 32, 32],
                vec![32, 32, 32],
                vec![32, 32, 32],
            ],
            ..VtmConfig::full(seed)
        }
    }

    pub fn conv_layer_count(&self) -> usize {
        self.block_depths.iter().map(Vec::len).sum()
    }

    /// Spatial side length of the trunk output.
    pub fn trunk_output_size(&self) -> usize {
        self.input_size >> self.block_depths.len()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::BadConfig(m));
        if self.block_depths.is_empty() {
            return bad("no conv blocks".into());
        }
        if self.block_depths.iter().any(Vec::is_empty) {
            return bad("empty conv block".into());
        }
        if self.block_depths.iter().flatten().any(|&c| c == 0) {
            return bad("zero-channel conv layer".into());
        }
        let divisor = 1usize << self.block_depths.len();
        if self.input_size == 0 || self.input_size % divisor != 0 {
            return bad(format!(
                "input size {} is not a positive multiple of {divisor} ({} pool stages)",
                self.input_size,
                self.block_depths.len()
            ));
        }
        if self.visual_dim == 0 || self.fusion_dim == 0 {
            return bad("feature dims must be positive".into());
        }
        if self.text_dims.is_empty() || self.text_dims.iter().any(|&d| d == 0) {
            return bad("text stack needs at least one positive layer width".into());
        }
        Ok(())
    }
}

/// The answer to a match query. Class 0 is no, class 1 is yes; exact ties
/// resolve to no.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Decision {
    No,
    Yes,
}

impl std::fmt::Display for Decision {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Decision::No => "no",
            Decision::Yes => "yes",
        })
    }
}

/// Decision rule on a two-class logit row: argmax with ties going to no, plus
/// the softmax probability of the chosen class.
pub fn decide(logits: &[f64; 2]) -> (Decision, f64) {
    let p = softmax_row(logits);
    if logits[1] > logits[0] {
        (Decision::Yes, p[1])
    } else {
        (Decision::No, p[0])
    }
}

pub struct VtmModel {
    config: VtmConfig,
    vocab: Vocabulary,
    conv_layers: Vec<Conv2dLayer>,
    visual_fc: DenseLayer,
    text_fcs: Vec<DenseLayer>,
    fusion_fc: DenseLayer,
    head: DenseLayer,
}

/// Builds a freshly initialized model. Weights draw from seeds derived from
/// `config.seed` (one substream per parameter tensor): conv and hidden dense
/// weights use the He-style wide uniform bound so activations survive the
/// 13-layer trunk, the head uses the narrow fan-in bound so initial logits
/// stay close to symmetric, and biases start at zero.
pub fn build_model(config: VtmConfig) -> Result<VtmModel, ModelError> {
    config.validate()?;
    let vocab = Vocabulary::full();
    let mut stream = 0u64;
    let mut next_seed = || {
        let s = seeding::derive(config.seed, stream);
        stream += 1;
        s
    };

    let mut conv_layers = Vec::with_capacity(config.conv_layer_count());
    let mut in_ch = 3usize;
    for block in &config.block_depths {
        for &oc in block {
            let w = init_params(&[oc, in_ch, 3, 3], next_seed(), InitScheme::UniformHe)?;
            let b = init_params(&[oc], next_seed(), InitScheme::Zeros)?;
            conv_layers.push(Conv2dLayer::new(w, b, 1, 1)?);
            in_ch = oc;
        }
    }

    let s = config.trunk_output_size();
    let flat_dim = in_ch * s * s;
    let visual_fc = DenseLayer::new(
        init_params(&[flat_dim, config.visual_dim], next_seed(), InitScheme::UniformHe)?,
        init_params(&[config.visual_dim], next_seed(), InitScheme::Zeros)?,
    )?;

    let mut text_fcs = Vec::with_capacity(config.text_dims.len());
    let mut in_dim = vocab.len();
    for &out_dim in &config.text_dims {
        text_fcs.push(DenseLayer::new(
            init_params(&[in_dim, out_dim], next_seed(), InitScheme::UniformHe)?,
            init_params(&[out_dim], next_seed(), InitScheme::Zeros)?,
        )?);
        in_dim = out_dim;
    }

    let fused_in = config.visual_dim + in_dim;
    let fusion_fc = DenseLayer::new(
        init_params(&[fused_in, config.fusion_dim], next_seed(), InitScheme::UniformHe)?,
        init_params(&[config.fusion_dim], next_seed(), InitScheme::Zeros)?,
    )?;
    let head = DenseLayer::new(
        init_params(&[config.fusion_dim, 2], next_seed(), InitScheme::UniformFanIn)?,
        init_params(&[2], next_seed(), InitScheme::Zeros)?,
    )?;

    Ok(VtmModel {
        config,
        vocab,
        conv_layers,
        visual_fc,
        text_fcs,
        fusion_fc,
        head,
    })
}

impl VtmModel {
    pub fn config(&self) -> &VtmConfig {
        &self.config
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Parameter tensors in canonical (save) order, paired with their names.
    fn entries_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.conv_layers.iter_mut().enumerate() {
            out.push((format!("conv{i}.weights"), &mut layer.weights));
            out.push((format!("conv{i}.bias"), &mut layer.bias));
        }
        out.push(("visual_fc.weights".into(), &mut self.visual_fc.weights));
        out.push(("visual_fc.bias".into(), &mut self.visual_fc.bias));
        for (i, layer) in self.text_fcs.iter_mut().enumerate() {
            out.push((format!("text_fc{i}.weights"), &mut layer.weights));
            out.push((format!("text_fc{i}.bias"), &mut layer.bias));
        }
        out.push(("fusion_fc.weights".into(), &mut self.fusion_fc.weights));
        out.push(("fusion_fc.bias".into(), &mut self.fusion_fc.bias));
        out.push(("head.weights".into(), &mut self.head.weights));
        out.push(("head.bias".into(), &mut self.head.bias));
        out
    }

    /// All trainable tensors, in a stable order.
    pub fn parameters_mut(&mut self) -> Vec<&mut Tensor> {
        self.entries_mut().into_iter().map(|(_, t)| t).collect()
    }

    pub fn param_count(&mut self) -> usize {
        self.parameters_mut().iter().map(|t| t.len()).sum()
    }

    /// Joint forward pass. `chips` is `[batch, 3, size, size]` with pixel
    /// values scaled to `[0, 1]`; `bows` is `[batch, vocab]`. Returns the
    /// `[batch, 2]` logits node. Registers every parameter on the tape, so
    /// call once per tape.
    pub fn forward(
        &mut self,
        tape: &mut Tape,
        chips: &Tensor,
        bows: &Tensor,
    ) -> Result<NodeId, ModelError> {
        let size = self.config.input_size;
        let cs = chips.shape();
        if chips.rank() != 4 || cs[1] != 3 || cs[2] != size || cs[3] != size {
            return Err(ModelError::ChipShape {
                got: cs.to_vec(),
                size,
            });
        }
        let batch = cs[0];
        if bows.shape() != [batch, self.vocab.len()] {
            return Err(ModelError::BowShape {
                got: bows.shape().to_vec(),
                batch,
                vocab: self.vocab.len(),
            });
        }

        let mut x = tape.constant(chips);
        let mut layer_idx = 0;
        for block in self.config.block_depths.clone() {
            for _ in 0..block.len() {
                x = self.conv_layers[layer_idx].forward(tape, x)?;
                x = tape.relu(x)?;
                layer_idx += 1;
            }
            x = tape.maxpool2(x)?;
        }
        let s = self.config.trunk_output_size();
        let flat_dim = self.conv_layers.last().expect("validated").out_channels() * s * s;
        let flat = tape.reshape(x, &[batch, flat_dim])?;
        let vis_pre = self.visual_fc.forward(tape, flat)?;
        let vis = tape.relu(vis_pre)?;

        let bow_node = tape.constant(bows);
        let txt = self.text_forward(tape, bow_node)?;

        let fused = tape.concat_cols(vis, txt)?;
        let fu_pre = self.fusion_fc.forward(tape, fused)?;
        let fu = tape.relu(fu_pre)?;
        Ok(self.head.forward(tape, fu)?)
    }

    /// Text branch only: dense stack with ReLU between layers and a linear
    /// final layer, so embedding coordinates may be negative.
    fn text_forward(&mut self, tape: &mut Tape, bows: NodeId) -> Result<NodeId, ModelError> {
        let last = self.text_fcs.len() - 1;
        let mut t = bows;
        for (i, fc) in self.text_fcs.iter_mut().enumerate() {
            t = fc.forward(tape, t)?;
            if i != last {
                t = tape.relu(t)?;
            }
        }
        Ok(t)
    }

    /// Mean two-class cross-entropy over a batch of (chip, description)
    /// pairs; `labels[i]` is true for a matching pair.
    pub fn pair_loss(
        &mut self,
        tape: &mut Tape,
        chips: &Tensor,
        bows: &Tensor,
        labels: &[bool],
    ) -> Result<NodeId, ModelError> {
        if labels.len() != chips.shape()[0] {
            return Err(ModelError::LabelCount {
                labels: labels.len(),
                batch: chips.shape()[0],
            });
        }
        let logits = self.forward(tape, chips, bows)?;
        let targets: Vec<usize> = labels.iter().map(|&l| l as usize).collect();
        Ok(softmax_cross_entropy(tape, logits, &targets)?)
    }

    /// Answers one query: does `chip` (shape `[3, size, size]`) show a
    /// `description`? Returns the decision and its softmax probability.
    pub fn predict(
        &mut self,
        chip: &Tensor,
        description: &ClassDescription,
    ) -> Result<(Decision, f64), ModelError> {
        let size = self.config.input_size;
        if chip.shape() != [3, size, size] {
            return Err(ModelError::ChipShape {
                got: chip.shape().to_vec(),
                size,
            });
        }
        let batch = Tensor::from_values(&[1, 3, size, size], chip.data().to_vec())?;
        let bow = encode_bow(description, &self.vocab)?;
        let bows = Tensor::from_values(&[1, self.vocab.len()], bow)?;
        let mut tape = Tape::new();
        let logits = self.forward(&mut tape, &batch, &bows)?;
        let row = tape.value_data(logits)?;
        Ok(decide(&[row[0], row[1]]))
    }

    /// Embedding of a description under the current text stack weights.
    pub fn text_embedding(&mut self, description: &ClassDescription) -> Result<Vec<f64>, ModelError> {
        let bow = encode_bow(description, &self.vocab)?;
        let bows = Tensor::from_values(&[1, self.vocab.len()], bow)?;
        let mut tape = Tape::new();
        let node = tape.constant(&bows);
        let out = self.text_forward(&mut tape, node)?;
        Ok(tape.value_data(out)?.to_vec())
    }

    /// Writes all parameters to a container at `path`.
    pub fn save(&mut self, path: &Path) -> Result<(), ModelError> {
        let entries = self.entries_mut();
        let borrowed: Vec<(&str, &Tensor)> = entries
            .iter()
            .map(|(n, t)| (n.as_str(), &**t))
            .collect();
        save_tensors(path, &borrowed)?;
        Ok(())
    }

    /// Rebuilds a model from `config` and fills every parameter from the
    /// container, requiring an exact match of entry names and shapes.
    pub fn load(path: &Path, config: VtmConfig) -> Result<VtmModel, ModelError> {
        let mut model = build_model(config)?;
        let mut stored = load_tensors(path)?;
        for (name, tensor) in model.entries_mut() {
            let pos = stored
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| ModelError::CheckpointMissing(name.clone()))?;
            let (_, value) = stored.swap_remove(pos);
            if value.shape() != tensor.shape() {
                return Err(ModelError::CheckpointShape {
                    name,
                    got: value.shape().to_vec(),
                    expected: tensor.shape().to_vec(),
                });
            }
            *tensor = value;
        }
        if let Some((name, _)) = stored.into_iter().next() {
            return Err(ModelError::CheckpointUnexpected(name));
        }
        Ok(model)
    }
}
