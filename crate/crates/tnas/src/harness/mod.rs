//! Datasets, benchmark enumeration, persistence, and analysis.

pub mod bench;
pub mod cka;
pub mod data;
pub mod idx;
pub mod report;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::spaces::{ConvMacroSupernet, LmPreset, LmSupernet, Supernet, SupernetMode};

pub use cka::linear_cka;

/// Parameter and activation accounting for one space/mode combination.
/// Activation numbers are analytic (sums of output extents along one
/// forward pass at batch size one), not measured.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MemoryReport {
    pub space_id: String,
    pub mode: String,
    pub param_count: usize,
    pub param_bytes_f32: usize,
    pub activation_elems: usize,
    /// Weight-sharing over weight-entangled parameter counts.
    pub ws_over_we_ratio: f64,
}

/// Analytic activation estimate for the macro space at maximal widths.
fn macro_activations(in_channels: usize, image: usize, classes: usize, per_choice: usize) -> usize {
    let mut total = in_channels * image * image;
    let mut side = image;
    for (layer, stride) in [1usize, 2, 2, 2].iter().enumerate() {
        side = (side - 1) / stride + 1;
        total += crate::spaces::MACRO_CHANNELS[layer][2] * side * side * per_choice;
    }
    total + classes
}

pub fn memory_account_macro(
    in_channels: usize,
    image: usize,
    classes: usize,
    mode: SupernetMode,
) -> Result<MemoryReport> {
    let we = ConvMacroSupernet::<f32>::new(in_channels, classes, SupernetMode::WE, 0)?;
    let we_count = we.weights().param_count();
    let ws_count = ConvMacroSupernet::<f32>::ws_param_count(in_channels, classes);
    let (param_count, per_choice) = match mode {
        SupernetMode::WE => (we_count, 1),
        SupernetMode::WS => (ws_count, 9),
    };
    Ok(MemoryReport {
        space_id: we.space().space_id.clone(),
        mode: format!("{mode:?}"),
        param_count,
        param_bytes_f32: param_count * 4,
        activation_elems: macro_activations(in_channels, image, classes, per_choice),
        ws_over_we_ratio: ws_count as f64 / we_count as f64,
    })
}

pub fn memory_account_cell(
    in_channels: usize,
    base_channels: usize,
    image: usize,
    classes: usize,
    mode: SupernetMode,
) -> Result<MemoryReport> {
    use crate::spaces::CellSupernet;
    let we = CellSupernet::<f32>::new(in_channels, base_channels, classes, SupernetMode::WE, 0)?;
    let ws = CellSupernet::<f32>::new(in_channels, base_channels, classes, SupernetMode::WS, 0)?;
    let we_count = we.weights().param_count();
    let ws_count = ws.weights().param_count();
    let param_count = match mode {
        SupernetMode::WE => we_count,
        SupernetMode::WS => ws_count,
    };
    // Trunk activations: stem plus three cells at doubling widths, spatial
    // halved at the two reductions; each edge output counts once per active
    // operation evaluation (2 type branches for WE, 4 operations for WS).
    let per_edge = match mode {
        SupernetMode::WE => 2,
        SupernetMode::WS => 4,
    };
    let mut total = in_channels * image * image + base_channels * image * image;
    let mut side = image;
    let mut width = base_channels;
    for cell in 0..3 {
        if cell != 1 {
            side = side.div_ceil(2);
        }
        total += 3 * per_edge * width * side * side; // edge outputs
        total += 2 * width * side * side; // node concat
        width *= 2;
    }
    Ok(MemoryReport {
        space_id: we.space().space_id.clone(),
        mode: format!("{mode:?}"),
        param_count,
        param_bytes_f32: param_count * 4,
        activation_elems: total + classes,
        ws_over_we_ratio: ws_count as f64 / we_count as f64,
    })
}

pub fn memory_account_lm(
    preset: LmPreset,
    vocab: usize,
    ctx_len: usize,
    mode: SupernetMode,
) -> Result<MemoryReport> {
    let we = LmSupernet::<f32>::new(preset, vocab, ctx_len, SupernetMode::WE, 0)?;
    let we_count = we.weights().param_count();
    let ws_count = LmSupernet::<f32>::ws_param_count(preset, vocab, ctx_len);
    let dims = preset.dims();
    let e = *dims.embed.last().unwrap();
    let r = *dims.ratio.last().unwrap();
    let l = *dims.layers.last().unwrap();
    let t = ctx_len;
    let per_block = 4 * t * e + 2 * t * t + t * r * e; // qkv/out + scores/probs + mlp
    let activation_elems = 2 * t * e + l * per_block + t * vocab;
    let param_count = match mode {
        SupernetMode::WE => we_count,
        SupernetMode::WS => ws_count,
    };
    Ok(MemoryReport {
        space_id: we.space().space_id.clone(),
        mode: format!("{mode:?}"),
        param_count,
        param_bytes_f32: param_count * 4,
        activation_elems,
        ws_over_we_ratio: ws_count as f64 / we_count as f64,
    })
}
