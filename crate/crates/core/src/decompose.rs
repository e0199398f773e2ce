//! Tiling of layer weight tensors into uniform `m x n` blocks.
//!
//! Every layer is viewed as a list of 2-D "slot" matrices of shape
//! `inputs x outputs`: one slot for a dense layer, one per receptive-field
//! position for a convolution, and eight for an LSTM (four gates, each with
//! an input-to-hidden and a hidden-to-hidden matrix). Each slot is cut into
//! disjoint `m x n` tiles; tile `(i, j)` maps input units `i*m..(i+1)*m` to
//! output units `j*n..(j+1)*n`.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{MuirError, Result};
use crate::tensor::Array;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerKind {
    Dense,
    Conv1d,
    Conv2d,
    Lstm,
}

/// What to do when a slot dimension is not a multiple of the block size.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OverflowPolicy {
    #[default]
    Strict,
    /// Keep only whole tiles; the overflowing edge parameters are left out.
    Truncate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    /// Input size (dense), input channels (conv) or input size (lstm).
    pub inputs: usize,
    /// Output size (dense), output channels (conv) or hidden size (lstm).
    pub outputs: usize,
    /// Receptive-field extent(s) for convolutions.
    #[serde(default)]
    pub kernel: Vec<usize>,
    /// Overrides the derived fan-in used for initialization.
    #[serde(default)]
    pub fan_in: Option<usize>,
}

impl LayerSpec {
    pub fn dense(name: &str, inputs: usize, outputs: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Dense,
            inputs,
            outputs,
            kernel: vec![],
            fan_in: None,
        }
    }

    pub fn conv1d(name: &str, inputs: usize, outputs: usize, kernel: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv1d,
            inputs,
            outputs,
            kernel: vec![kernel],
            fan_in: None,
        }
    }

    pub fn conv2d(name: &str, inputs: usize, outputs: usize, kh: usize, kw: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Conv2d,
            inputs,
            outputs,
            kernel: vec![kh, kw],
            fan_in: None,
        }
    }

    pub fn lstm(name: &str, input_size: usize, hidden_size: usize) -> Self {
        Self {
            name: name.into(),
            kind: LayerKind::Lstm,
            inputs: input_size,
            outputs: hidden_size,
            kernel: vec![],
            fan_in: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |why: &str| Err(MuirError::Config(format!("layer '{}': {}", self.name, why)));
        if self.inputs == 0 || self.outputs == 0 {
            return bad("sizes must be positive");
        }
        if self.fan_in == Some(0) {
            return bad("fan_in must be positive");
        }
        let expected_kernel_dims = match self.kind {
            LayerKind::Dense | LayerKind::Lstm => 0,
            LayerKind::Conv1d => 1,
            LayerKind::Conv2d => 2,
        };
        if self.kernel.len() != expected_kernel_dims {
            return bad(&format!(
                "{:?} layers take {} kernel extent(s), got {:?}",
                self.kind, expected_kernel_dims, self.kernel
            ));
        }
        if self.kernel.contains(&0) {
            return bad("kernel extents must be positive");
        }
        Ok(())
    }

    pub fn receptive_field(&self) -> usize {
        self.kernel.iter().product::<usize>().max(1)
    }

    /// `(rows, cols)` of every slot matrix, in slot order.
    pub fn slot_dims(&self) -> Vec<(usize, usize)> {
        match self.kind {
            LayerKind::Dense => vec![(self.inputs, self.outputs)],
            LayerKind::Conv1d | LayerKind::Conv2d => {
                vec![(self.inputs, self.outputs); self.receptive_field()]
            }
            LayerKind::Lstm => (0..4)
                .flat_map(|_| [(self.inputs, self.outputs), (self.outputs, self.outputs)])
                .collect(),
        }
    }

    /// He fan-in of the weights in `slot`.
    pub fn slot_fan_in(&self, slot: usize) -> usize {
        if let Some(f) = self.fan_in {
            return f;
        }
        match self.kind {
            LayerKind::Dense => self.inputs,
            LayerKind::Conv1d | LayerKind::Conv2d => self.inputs * self.receptive_field(),
            LayerKind::Lstm => self.slot_dims()[slot].0,
        }
    }

    pub fn weight_count(&self) -> usize {
        self.slot_dims().iter().map(|(r, c)| r * c).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockShape {
    pub m: usize,
    pub n: usize,
    #[serde(default)]
    pub policy: OverflowPolicy,
}

impl BlockShape {
    pub fn new(m: usize, n: usize) -> Self {
        Self {
            m,
            n,
            policy: OverflowPolicy::Strict,
        }
    }

    pub fn truncating(mut self) -> Self {
        self.policy = OverflowPolicy::Truncate;
        self
    }
}

/// One `m x n` block slot inside a host layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PseudoTaskLocation {
    /// Global index, contiguous from 0.
    pub index: usize,
    pub layer: usize,
    pub slot: usize,
    /// Block row: input units `row*m..(row+1)*m`.
    pub row: usize,
    /// Block column: output units `col*n..(col+1)*n`.
    pub col: usize,
    pub fan_in: usize,
}

fn tiles(spec: &LayerSpec, dim: usize, block: usize, policy: OverflowPolicy, what: &str) -> Result<usize> {
    if block == 0 {
        return Err(MuirError::Config("block dimensions must be positive".into()));
    }
    if !dim.is_multiple_of(block) && policy == OverflowPolicy::Strict {
        return Err(MuirError::Config(format!(
            "layer '{}': {} {} is not divisible by block size {}",
            spec.name, what, dim, block
        )));
    }
    Ok(dim / block)
}

/// Locations of one layer, indexed from `first_index`, ordered by slot, then
/// row, then column.
pub fn decompose_layer(
    layer: usize,
    spec: &LayerSpec,
    shape: &BlockShape,
    first_index: usize,
) -> Result<Vec<PseudoTaskLocation>> {
    spec.validate()?;
    let mut out = Vec::new();
    for (slot, (rows, cols)) in spec.slot_dims().into_iter().enumerate() {
        let p = tiles(spec, rows, shape.m, shape.policy, "input dimension")?;
        let q = tiles(spec, cols, shape.n, shape.policy, "output dimension")?;
        let fan_in = spec.slot_fan_in(slot);
        for row in 0..p {
            for col in 0..q {
                out.push(PseudoTaskLocation {
                    index: first_index + out.len(),
                    layer,
                    slot,
                    row,
                    col,
                    fan_in,
                });
            }
        }
    }
    Ok(out)
}

fn expect_kind(spec: &LayerSpec, kinds: &[LayerKind]) -> Result<()> {
    if kinds.contains(&spec.kind) {
        Ok(())
    } else {
        Err(MuirError::Config(format!(
            "layer '{}' is {:?}, expected one of {:?}",
            spec.name, spec.kind, kinds
        )))
    }
}

pub fn decompose_dense(spec: &LayerSpec, shape: &BlockShape) -> Result<Vec<PseudoTaskLocation>> {
    expect_kind(spec, &[LayerKind::Dense])?;
    decompose_layer(0, spec, shape, 0)
}

pub fn decompose_conv(spec: &LayerSpec, shape: &BlockShape) -> Result<Vec<PseudoTaskLocation>> {
    expect_kind(spec, &[LayerKind::Conv1d, LayerKind::Conv2d])?;
    decompose_layer(0, spec, shape, 0)
}

pub fn decompose_lstm(spec: &LayerSpec, shape: &BlockShape) -> Result<Vec<PseudoTaskLocation>> {
    expect_kind(spec, &[LayerKind::Lstm])?;
    decompose_layer(0, spec, shape, 0)
}

/// Copies the `m x n` tile at `loc` out of the layer's slot matrices.
pub fn extract_block(slots: &[Array], loc: &PseudoTaskLocation, shape: &BlockShape) -> Result<Array> {
    let slot = slots.get(loc.slot).ok_or_else(|| {
        MuirError::Integrity(format!("location {} refers to missing slot {}", loc.index, loc.slot))
    })?;
    let cols = slot.shape()[1];
    let mut data = Vec::with_capacity(shape.m * shape.n);
    for i in 0..shape.m {
        let r = loc.row * shape.m + i;
        let start = r * cols + loc.col * shape.n;
        data.extend_from_slice(&slot.data()[start..start + shape.n]);
    }
    Array::new(vec![shape.m, shape.n], data)
}

/// Rebuilds the slot matrices of one layer from its blocks.
///
/// Every location of the layer must appear exactly once. Under the truncate
/// policy the uncovered edge entries are zero.
pub fn assemble_layer(
    layer: usize,
    spec: &LayerSpec,
    shape: &BlockShape,
    blocks: &[(PseudoTaskLocation, Array)],
) -> Result<Vec<Array>> {
    let expected = decompose_layer(layer, spec, shape, 0)?;
    let mut seen: HashMap<(usize, usize, usize), usize> = HashMap::new();
    let dims = spec.slot_dims();
    let mut slots: Vec<Array> = dims.iter().map(|&(r, c)| Array::zeros(&[r, c])).collect();
    for (loc, block) in blocks {
        if loc.layer != layer {
            continue;
        }
        if block.shape() != [shape.m, shape.n] {
            return Err(MuirError::Integrity(format!(
                "block for location {} has shape {:?}, expected [{}, {}]",
                loc.index,
                block.shape(),
                shape.m,
                shape.n
            )));
        }
        let key = (loc.slot, loc.row, loc.col);
        let (rows, cols) = *dims.get(loc.slot).ok_or_else(|| {
            MuirError::Integrity(format!("location {} has out-of-range slot {}", loc.index, loc.slot))
        })?;
        if (loc.row + 1) * shape.m > rows || (loc.col + 1) * shape.n > cols {
            return Err(MuirError::Integrity(format!(
                "location {} lies outside layer '{}'",
                loc.index, spec.name
            )));
        }
        if seen.insert(key, loc.index).is_some() {
            return Err(MuirError::Integrity(format!(
                "duplicate block for layer '{}' slot {} tile ({}, {})",
                spec.name, loc.slot, loc.row, loc.col
            )));
        }
        let dst = slots[loc.slot].data_mut();
        for i in 0..shape.m {
            let start = (loc.row * shape.m + i) * cols + loc.col * shape.n;
            dst[start..start + shape.n]
                .copy_from_slice(&block.data()[i * shape.n..(i + 1) * shape.n]);
        }
    }
    if let Some(missing) = expected
        .iter()
        .find(|l| !seen.contains_key(&(l.slot, l.row, l.col)))
    {
        return Err(MuirError::Integrity(format!(
            "missing block for layer '{}' slot {} tile ({}, {})",
            spec.name, missing.slot, missing.row, missing.col
        )));
    }
    Ok(slots)
}

/// A named stack of layers. Unless disabled, the first and last layers are
/// kept as unshared adapters and never decomposed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Architecture {
    pub name: String,
    #[serde(default = "default_true")]
    pub reserve_adapters: bool,
    pub layers: Vec<LayerSpec>,
}

fn default_true() -> bool {
    true
}

impl Architecture {
    pub fn is_adapter(&self, idx: usize) -> bool {
        self.reserve_adapters && (idx == 0 || idx + 1 == self.layers.len())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerEntry {
    pub architecture: String,
    pub spec: LayerSpec,
    pub adapter: bool,
    /// Global index of the first location in this layer.
    pub first_location: usize,
    pub blocks: usize,
}

/// Flat list of locations across a set of architectures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decomposition {
    pub shape: BlockShape,
    pub layers: Vec<LayerEntry>,
    pub locations: Vec<PseudoTaskLocation>,
}

impl Decomposition {
    pub fn len(&self) -> usize {
        self.locations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.locations.is_empty()
    }

    pub fn blocks_for(&self, architecture: &str) -> usize {
        self.layers
            .iter()
            .filter(|l| l.architecture == architecture)
            .map(|l| l.blocks)
            .sum()
    }
}

/// Decomposes architectures in order: architecture, layer, slot, row, col.
pub fn decompose_architectures(archs: &[Architecture], shape: &BlockShape) -> Result<Decomposition> {
    let mut layers = Vec::new();
    let mut locations = Vec::new();
    for arch in archs {
        for (idx, spec) in arch.layers.iter().enumerate() {
            spec.validate()?;
            let adapter = arch.is_adapter(idx);
            let layer_id = layers.len();
            let first = locations.len();
            if !adapter {
                locations.extend(decompose_layer(layer_id, spec, shape, first)?);
            }
            layers.push(LayerEntry {
                architecture: arch.name.clone(),
                spec: spec.clone(),
                adapter,
                first_location: first,
                blocks: locations.len() - first,
            });
        }
    }
    Ok(Decomposition {
        shape: *shape,
        layers,
        locations,
    })
}

/// Reference architectures used for block-count checks.
pub mod presets {
    use super::{Architecture, LayerSpec};

    /// WideResNet-`depth`-`width` for 32x32 RGB input.
    ///
    /// Projection shortcuts are given 3x3 kernels; with 1x1 shortcuts the
    /// 40-1 network has 2188 reparameterizable blocks at 16x16 instead of
    /// 2268.
    pub fn wide_resnet(depth: usize, width: usize) -> Architecture {
        let per_group = (depth - 4) / 6;
        let widths = [16, 16 * width, 32 * width, 64 * width];
        let mut layers = vec![LayerSpec::conv2d("stem", 3, widths[0], 3, 3)];
        let mut inputs = widths[0];
        for (g, &out) in widths[1..].iter().enumerate() {
            for b in 0..per_group {
                let prefix = format!("group{}.block{}", g + 1, b);
                layers.push(LayerSpec::conv2d(&format!("{prefix}.conv1"), inputs, out, 3, 3));
                layers.push(LayerSpec::conv2d(&format!("{prefix}.conv2"), out, out, 3, 3));
                if inputs != out {
                    layers.push(LayerSpec::conv2d(&format!("{prefix}.shortcut"), inputs, out, 3, 3));
                }
                inputs = out;
            }
        }
        layers.push(LayerSpec::dense("classifier", inputs, 10));
        Architecture {
            name: format!("wrn-{depth}-{width}"),
            reserve_adapters: true,
            layers,
        }
    }

    /// Word-level language model: embedding, stacked LSTM, vocabulary decoder.
    pub fn stacked_lstm(layers: usize, hidden: usize, embedding: usize, vocab: usize) -> Architecture {
        let mut out = vec![LayerSpec::dense("embedding", vocab, embedding)];
        let mut inputs = embedding;
        for i in 0..layers {
            out.push(LayerSpec::lstm(&format!("lstm{i}"), inputs, hidden));
            inputs = hidden;
        }
        out.push(LayerSpec::dense("decoder", hidden, vocab));
        Architecture {
            name: format!("stacked-lstm-{layers}x{hidden}"),
            reserve_adapters: true,
            layers: out,
        }
    }

    /// DeepBind-style 1-D convolutional model over one-hot nucleobases.
    pub fn deepbind(channels: usize) -> Architecture {
        Architecture {
            name: format!("deepbind-{channels}"),
            reserve_adapters: true,
            layers: vec![
                LayerSpec::conv1d("embed", 4, channels, 1),
                LayerSpec::conv1d("conv", channels, channels, 24),
                LayerSpec::dense("hidden", channels, channels),
                LayerSpec::dense("output", channels, 1),
            ],
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dense_4x4_into_four_tiles() {
        let locs = decompose_dense(&LayerSpec::dense("d", 4, 4), &BlockShape::new(2, 2)).unwrap();
        assert_eq!(locs.len(), 4);
        let order: Vec<_> = locs.iter().map(|l| (l.row, l.col)).collect();
        assert_eq!(order, vec![(0, 0), (0, 1), (1, 0), (1, 1)]);
    }

    #[test]
    fn dense_256_counts() {
        let locs = decompose_dense(&LayerSpec::dense("d", 256, 256), &BlockShape::new(16, 16)).unwrap();
        assert_eq!(locs.len(), 256);
    }

    #[test]
    fn single_vector_block() {
        let locs = decompose_dense(&LayerSpec::dense("task", 20, 1), &BlockShape::new(20, 1)).unwrap();
        assert_eq!(locs.len(), 1);
        assert_eq!(locs[0].fan_in, 20);
    }

    #[test]
    fn conv_counts() {
        let s = BlockShape::new(16, 16);
        assert_eq!(decompose_conv(&LayerSpec::conv1d("c", 256, 256, 24), &s).unwrap().len(), 6144);
        assert_eq!(decompose_conv(&LayerSpec::conv2d("c", 16, 16, 3, 3), &s).unwrap().len(), 9);
        assert_eq!(decompose_conv(&LayerSpec::conv1d("c", 16, 16, 1), &s).unwrap().len(), 1);
    }

    #[test]
    fn conv_fan_in_includes_receptive_field() {
        let locs = decompose_conv(&LayerSpec::conv2d("c", 16, 32, 3, 3), &BlockShape::new(16, 16)).unwrap();
        assert!(locs.iter().all(|l| l.fan_in == 144));
    }

    #[test]
    fn lstm_counts() {
        let s = BlockShape::new(16, 16);
        assert_eq!(decompose_lstm(&LayerSpec::lstm("l", 16, 16), &s).unwrap().len(), 8);
        assert_eq!(decompose_lstm(&LayerSpec::lstm("l", 16, 32), &s).unwrap().len(), 24);
        let two = decompose_lstm(&LayerSpec::lstm("l", 256, 256), &s).unwrap().len() * 2;
        assert_eq!(two, 4096);
    }

    #[test]
    fn strict_policy_names_layer() {
        let err = decompose_dense(&LayerSpec::dense("odd", 20, 16), &BlockShape::new(16, 16)).unwrap_err();
        assert!(matches!(err, MuirError::Config(ref m) if m.contains("odd")), "{err}");
    }

    #[test]
    fn truncate_policy_drops_edges() {
        let shape = BlockShape::new(16, 16).truncating();
        let locs = decompose_dense(&LayerSpec::dense("odd", 40, 16), &shape).unwrap();
        assert_eq!(locs.len(), 2);
    }

    #[test]
    fn wrong_kind_rejected() {
        assert!(decompose_conv(&LayerSpec::dense("d", 16, 16), &BlockShape::new(16, 16)).is_err());
    }

    #[test]
    fn round_trip_4x4() {
        let spec = LayerSpec::dense("d", 4, 4);
        let shape = BlockShape::new(2, 2);
        let w = Array::new(vec![4, 4], (0..16).map(f64::from).collect()).unwrap();
        let locs = decompose_layer(0, &spec, &shape, 0).unwrap();
        let blocks: Vec<_> = locs
            .iter()
            .map(|l| (*l, extract_block(std::slice::from_ref(&w), l, &shape).unwrap()))
            .collect();
        assert_eq!(blocks[1].1.data(), &[2., 3., 6., 7.]);
        let back = assemble_layer(0, &spec, &shape, &blocks).unwrap();
        assert_eq!(back, vec![w]);
    }

    #[test]
    fn assemble_detects_missing_and_duplicate() {
        let spec = LayerSpec::dense("d", 4, 4);
        let shape = BlockShape::new(2, 2);
        let locs = decompose_layer(0, &spec, &shape, 0).unwrap();
        let mut blocks: Vec<_> = locs.iter().map(|l| (*l, Array::zeros(&[2, 2]))).collect();
        blocks.pop();
        assert!(matches!(
            assemble_layer(0, &spec, &shape, &blocks),
            Err(MuirError::Integrity(_))
        ));
        blocks.push(blocks[0].clone());
        assert!(matches!(
            assemble_layer(0, &spec, &shape, &blocks),
            Err(MuirError::Integrity(_))
        ));
    }

    #[test]
    fn paper_architecture_counts() {
        let s = BlockShape::new(16, 16);
        let d = decompose_architectures(&[presets::wide_resnet(40, 1)], &s).unwrap();
        assert_eq!(d.len(), 2268);
        let d = decompose_architectures(&[presets::stacked_lstm(2, 256, 256, 33278)], &s).unwrap();
        assert_eq!(d.len(), 4096);
        let d = decompose_architectures(&[presets::deepbind(256)], &s).unwrap();
        assert_eq!(d.len(), 6400);
    }

    #[test]
    fn joint_indices_are_contiguous() {
        let archs = [presets::deepbind(256), presets::stacked_lstm(2, 256, 256, 1000)];
        let d = decompose_architectures(&archs, &BlockShape::new(16, 16)).unwrap();
        assert_eq!(d.len(), 10496);
        assert!(d.locations.iter().enumerate().all(|(i, l)| l.index == i));
        assert_eq!(d.blocks_for("deepbind-256"), 6400);
    }
}
