//! Multiresolution hash encoding followed by a small ReLU MLP.
//!
//! The field maps a 3D position to an emitted color and a volume density.
//! View direction is not an input. All parameters live in one flat
//! [`FieldParams`] vector: the hash tables first (level-major, then entry,
//! then feature), followed by each linear layer's weights (row-major,
//! `out x in`) and biases.

use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of raw outputs of the MLP: one density logit and three color logits.
pub const FIELD_OUTPUTS: usize = 4;

const HASH_PRIMES: [u32; 3] = [1, 2_654_435_761, 805_459_861];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FieldConfig {
    pub levels: usize,
    pub features_per_level: usize,
    pub table_size_log2: u32,
    pub base_resolution: usize,
    pub level_scale: f64,
    pub mlp_hidden: usize,
    /// Number of linear layers, including the output layer.
    pub mlp_layers: usize,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
}

impl Default for FieldConfig {
    fn default() -> Self {
        Self {
            levels: 16,
            features_per_level: 2,
            table_size_log2: 19,
            base_resolution: 16,
            level_scale: 1.3819,
            mlp_hidden: 64,
            mlp_layers: 3,
            bounds_min: [-1.0; 3],
            bounds_max: [1.0; 3],
        }
    }
}

impl FieldConfig {
    /// Reduced hash grid for small scenes and tests.
    pub fn desk() -> Self {
        Self {
            levels: 8,
            table_size_log2: 14,
            base_resolution: 4,
            level_scale: 1.5,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("field: {m}")));
        if self.levels == 0 || self.features_per_level == 0 {
            return fail("levels and features_per_level must be >= 1");
        }
        if !(1..=26).contains(&self.table_size_log2) {
            return fail("table_size_log2 must be in 1..=26");
        }
        if self.base_resolution == 0 || !(self.level_scale > 1.0) {
            return fail("base_resolution must be >= 1 and level_scale > 1");
        }
        if self.mlp_layers == 0 || (self.mlp_layers > 1 && self.mlp_hidden == 0) {
            return fail("mlp must have at least one layer and a non-zero hidden width");
        }
        if (0..3).any(|k| !(self.bounds_max[k] > self.bounds_min[k])) {
            return fail("bounds must have positive extent");
        }
        Ok(())
    }

    pub fn table_size(&self) -> usize {
        1usize << self.table_size_log2
    }

    pub fn encoding_dim(&self) -> usize {
        self.levels * self.features_per_level
    }

    pub fn hash_param_count(&self) -> usize {
        self.levels * self.table_size() * self.features_per_level
    }

    /// Grid resolution of each level, `floor(base * scale^level)`.
    pub fn level_resolutions(&self) -> Vec<usize> {
        (0..self.levels)
            .map(|l| ((self.base_resolution as f64) * self.level_scale.powi(l as i32)).floor() as usize)
            .collect()
    }

    /// Input/output widths of each linear layer.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.mlp_layers);
        let mut inputs = self.encoding_dim();
        for j in 0..self.mlp_layers {
            let outputs = if j + 1 == self.mlp_layers {
                FIELD_OUTPUTS
            } else {
                self.mlp_hidden
            };
            dims.push((inputs, outputs));
            inputs = outputs;
        }
        dims
    }
}

#[derive(Debug, Clone)]
struct LayerSlot {
    inputs: usize,
    outputs: usize,
    weights: usize,
    bias: usize,
}

/// Offsets of each parameter block inside the flat parameter vector.
#[derive(Debug, Clone)]
pub struct FieldLayout {
    layers: Vec<LayerSlot>,
    hash_len: usize,
    total: usize,
}

impl FieldLayout {
    pub fn new(config: &FieldConfig) -> Self {
        let hash_len = config.hash_param_count();
        let mut offset = hash_len;
        let layers = config
            .layer_dims()
            .into_iter()
            .map(|(inputs, outputs)| {
                let weights = offset;
                let bias = weights + inputs * outputs;
                offset = bias + outputs;
                LayerSlot {
                    inputs,
                    outputs,
                    weights,
                    bias,
                }
            })
            .collect();
        Self {
            layers,
            hash_len,
            total: offset,
        }
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }

    pub fn hash_range(&self) -> Range<usize> {
        0..self.hash_len
    }

    pub fn mlp_range(&self) -> Range<usize> {
        self.hash_len..self.total
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len()
    }

    pub fn weight_range(&self, layer: usize) -> Range<usize> {
        let s = &self.layers[layer];
        s.weights..s.weights + s.inputs * s.outputs
    }

    pub fn bias_range(&self, layer: usize) -> Range<usize> {
        let s = &self.layers[layer];
        s.bias..s.bias + s.outputs
    }
}

/// Flat parameter (or gradient) vector for one field.
#[derive(Debug, Clone, PartialEq)]
pub struct FieldParams {
    pub values: Vec<f64>,
}

impl FieldParams {
    pub fn zeros(layout: &FieldLayout) -> Self {
        Self {
            values: vec![0.0; layout.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn fill_zero(&mut self) {
        self.values.iter_mut().for_each(|v| *v = 0.0);
    }

    pub fn add_assign(&mut self, other: &FieldParams) {
        for (a, b) in self.values.iter_mut().zip(&other.values) {
            *a += b;
        }
    }

    pub fn all_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FieldOutput {
    pub color: [f64; 3],
    pub density: f64,
}

/// Cotangent of a [`FieldOutput`].
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct FieldCotangent {
    pub color: [f64; 3],
    pub density: f64,
}

/// Intermediate values of one forward evaluation, consumed by the backward pass.
#[derive(Debug, Clone)]
pub struct FieldTape {
    /// Hash-table entry index (of the first feature) of each visited corner, level-major.
    corner_entries: Vec<usize>,
    corner_weights: Vec<f64>,
    /// activations[0] is the encoding; activations[j] is the input of layer j.
    activations: Vec<Vec<f64>>,
    /// Raw MLP outputs.
    logits: [f64; FIELD_OUTPUTS],
    scratch: Vec<f64>,
    scratch_next: Vec<f64>,
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Spatial hash of integer grid coordinates into a table of `mask + 1` entries.
#[inline]
pub fn spatial_hash(coords: [u32; 3], mask: u32) -> u32 {
    (coords[0].wrapping_mul(HASH_PRIMES[0])
        ^ coords[1].wrapping_mul(HASH_PRIMES[1])
        ^ coords[2].wrapping_mul(HASH_PRIMES[2]))
        & mask
}

/// A configured field: owns the derived layout and level resolutions.
#[derive(Debug, Clone)]
pub struct Field {
    config: FieldConfig,
    layout: FieldLayout,
    resolutions: Vec<usize>,
}

impl Field {
    pub fn new(config: FieldConfig) -> Result<Self> {
        config.validate()?;
        let layout = FieldLayout::new(&config);
        let resolutions = config.level_resolutions();
        Ok(Self {
            config,
            layout,
            resolutions,
        })
    }

    pub fn config(&self) -> &FieldConfig {
        &self.config
    }

    pub fn layout(&self) -> &FieldLayout {
        &self.layout
    }

    /// Hash features ~ U(-1e-4, 1e-4); weights ~ U(-b, b) with b = sqrt(6 / fan_in); zero biases.
    pub fn init_params(&self, seed: u64) -> FieldParams {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = FieldParams::zeros(&self.layout);
        for v in &mut params.values[self.layout.hash_range()] {
            *v = rng.gen_range(-1e-4..1e-4);
        }
        for j in 0..self.layout.layer_count() {
            let fan_in = self.layout.layers[j].inputs as f64;
            let bound = (6.0 / fan_in).sqrt();
            for v in &mut params.values[self.layout.weight_range(j)] {
                *v = rng.gen_range(-bound..bound);
            }
        }
        params
    }

    pub fn zero_params(&self) -> FieldParams {
        FieldParams::zeros(&self.layout)
    }

    pub fn check_params(&self, params: &FieldParams) -> Result<()> {
        if params.len() != self.layout.len() {
            return Err(Error::Shape(format!(
                "parameter vector has {} values, layout needs {}",
                params.len(),
                self.layout.len()
            )));
        }
        if let Some(i) = params.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::numerical(None, format!("non-finite field parameter at index {i}")));
        }
        Ok(())
    }

    pub fn new_tape(&self) -> FieldTape {
        let mut activations = vec![vec![0.0; self.config.encoding_dim()]];
        for slot in &self.layout.layers[..self.layout.layer_count() - 1] {
            activations.push(vec![0.0; slot.outputs]);
        }
        let widest = self
            .layout
            .layers
            .iter()
            .map(|s| s.inputs.max(s.outputs))
            .max()
            .unwrap_or(0);
        FieldTape {
            corner_entries: vec![0; self.config.levels * 8],
            corner_weights: vec![0.0; self.config.levels * 8],
            activations,
            logits: [0.0; FIELD_OUTPUTS],
            scratch: vec![0.0; widest],
            scratch_next: vec![0.0; widest],
        }
    }

    /// Position normalized to the unit cube, clamped to the bounds.
    #[inline]
    fn unit_position(&self, p: [f64; 3]) -> [f64; 3] {
        let mut u = [0.0; 3];
        for k in 0..3 {
            let lo = self.config.bounds_min[k];
            let hi = self.config.bounds_max[k];
            u[k] = ((p[k] - lo) / (hi - lo)).clamp(0.0, 1.0);
        }
        u
    }

    fn encode_into(&self, p: [f64; 3], params: &FieldParams, tape: &mut FieldTape) {
        let features = self.config.features_per_level;
        let table = self.config.table_size();
        let mask = (table - 1) as u32;
        let u = self.unit_position(p);
        let encoding = &mut tape.activations[0];
        for (level, &res) in self.resolutions.iter().enumerate() {
            let mut base = [0u32; 3];
            let mut frac = [0.0; 3];
            for k in 0..3 {
                let x = u[k] * res as f64;
                let cell = (x.floor() as usize).min(res.saturating_sub(1));
                base[k] = cell as u32;
                frac[k] = x - cell as f64;
            }
            let level_offset = level * table * features;
            let out = &mut encoding[level * features..(level + 1) * features];
            out.iter_mut().for_each(|v| *v = 0.0);
            for corner in 0..8 {
                let mut coords = base;
                let mut weight = 1.0;
                for k in 0..3 {
                    if corner & (1 << k) != 0 {
                        coords[k] += 1;
                        weight *= frac[k];
                    } else {
                        weight *= 1.0 - frac[k];
                    }
                }
                let entry = level_offset + spatial_hash(coords, mask) as usize * features;
                tape.corner_entries[level * 8 + corner] = entry;
                tape.corner_weights[level * 8 + corner] = weight;
                for f in 0..features {
                    out[f] += weight * params.values[entry + f];
                }
            }
        }
    }

    /// Hash-grid feature vector at `p` (`levels * features_per_level` values).
    pub fn encode_position(&self, p: [f64; 3], params: &FieldParams) -> Vec<f64> {
        let mut tape = self.new_tape();
        self.encode_into(p, params, &mut tape);
        tape.activations.swap_remove(0)
    }

    /// Forward evaluation, recording intermediates in `tape`.
    pub fn forward_with_tape(&self, p: [f64; 3], params: &FieldParams, tape: &mut FieldTape) -> FieldOutput {
        self.encode_into(p, params, tape);
        let values = &params.values;
        let last = self.layout.layer_count() - 1;
        for (j, slot) in self.layout.layers.iter().enumerate() {
            let w = &values[slot.weights..slot.weights + slot.inputs * slot.outputs];
            let b = &values[slot.bias..slot.bias + slot.outputs];
            let (input, rest) = tape.activations.split_at_mut(j + 1);
            let input = &input[j];
            for o in 0..slot.outputs {
                let row = &w[o * slot.inputs..(o + 1) * slot.inputs];
                let z = b[o] + row.iter().zip(input.iter()).map(|(a, x)| a * x).sum::<f64>();
                if j == last {
                    tape.logits[o] = z;
                } else {
                    // Written so that NaN propagates instead of being clamped away.
                    rest[0][o] = if z <= 0.0 { 0.0 } else { z };
                }
            }
        }
        FieldOutput {
            density: softplus(tape.logits[0]),
            color: [sigmoid(tape.logits[1]), sigmoid(tape.logits[2]), sigmoid(tape.logits[3])],
        }
    }

    /// Color and density at `p`.
    pub fn forward(&self, p: [f64; 3], params: &FieldParams) -> Result<FieldOutput> {
        let mut tape = self.new_tape();
        let out = self.forward_with_tape(p, params, &mut tape);
        if !(out.density.is_finite() && out.color.iter().all(|c| c.is_finite())) {
            return Err(Error::numerical(None, format!("non-finite field output at {p:?}")));
        }
        Ok(out)
    }

    /// Accumulates the parameter gradient of `<cotangent, output>` into `grads`,
    /// using the tape of the matching forward call.
    pub fn backward_with_tape(
        &self,
        params: &FieldParams,
        tape: &mut FieldTape,
        cotangent: &FieldCotangent,
        grads: &mut FieldParams,
    ) {
        let logits = tape.logits;
        let mut upstream = [0.0; FIELD_OUTPUTS];
        upstream[0] = cotangent.density * sigmoid(logits[0]);
        for k in 0..3 {
            let s = sigmoid(logits[k + 1]);
            upstream[k + 1] = cotangent.color[k] * s * (1.0 - s);
        }
        if upstream.iter().all(|&g| g == 0.0) {
            return;
        }

        let FieldTape {
            activations,
            scratch,
            scratch_next,
            corner_entries,
            corner_weights,
            ..
        } = tape;
        scratch[..FIELD_OUTPUTS].copy_from_slice(&upstream);
        let last = self.layout.layer_count() - 1;
        for j in (0..=last).rev() {
            let slot = &self.layout.layers[j];
            let input = &activations[j];
            let dz = &scratch[..slot.outputs];
            let w = &params.values[slot.weights..slot.weights + slot.inputs * slot.outputs];
            {
                let gw = &mut grads.values[slot.weights..slot.weights + slot.inputs * slot.outputs];
                for o in 0..slot.outputs {
                    let g = dz[o];
                    if g == 0.0 {
                        continue;
                    }
                    let row = &mut gw[o * slot.inputs..(o + 1) * slot.inputs];
                    for (r, x) in row.iter_mut().zip(input.iter()) {
                        *r += g * x;
                    }
                }
            }
            for (gb, g) in grads.values[slot.bias..slot.bias + slot.outputs].iter_mut().zip(dz) {
                *gb += g;
            }
            let dx = &mut scratch_next[..slot.inputs];
            dx.iter_mut().for_each(|v| *v = 0.0);
            for o in 0..slot.outputs {
                let g = dz[o];
                if g == 0.0 {
                    continue;
                }
                let row = &w[o * slot.inputs..(o + 1) * slot.inputs];
                for (d, a) in dx.iter_mut().zip(row) {
                    *d += g * a;
                }
            }
            if j > 0 {
                // ReLU derivative: the recorded activation is zero where the unit was off.
                for (d, a) in dx.iter_mut().zip(input.iter()) {
                    if *a <= 0.0 {
                        *d = 0.0;
                    }
                }
            }
            std::mem::swap(scratch, scratch_next);
        }

        let features = self.config.features_per_level;
        let dfeat = &scratch[..self.config.encoding_dim()];
        for level in 0..self.config.levels {
            let g = &dfeat[level * features..(level + 1) * features];
            for corner in 0..8 {
                let entry = corner_entries[level * 8 + corner];
                let weight = corner_weights[level * 8 + corner];
                for f in 0..features {
                    grads.values[entry + f] += weight * g[f];
                }
            }
        }
    }

    /// Recomputes the forward pass at `p` and accumulates the parameter gradient.
    pub fn backward(
        &self,
        p: [f64; 3],
        params: &FieldParams,
        cotangent: &FieldCotangent,
        grads: &mut FieldParams,
    ) -> Result<()> {
        let mut tape = self.new_tape();
        let out = self.forward_with_tape(p, params, &mut tape);
        if !(out.density.is_finite() && out.color.iter().all(|c| c.is_finite())) {
            return Err(Error::numerical(None, format!("non-finite field output at {p:?}")));
        }
        self.backward_with_tape(params, &mut tape, cotangent, grads);
        Ok(())
    }

    /// Hash-table entry indices (first feature of each entry) visited at `p`.
    pub fn visited_entries(&self, p: [f64; 3], params: &FieldParams) -> Vec<usize> {
        let mut tape = self.new_tape();
        self.encode_into(p, params, &mut tape);
        tape.corner_entries.clone()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> FieldConfig {
        FieldConfig {
            levels: 3,
            features_per_level: 2,
            table_size_log2: 8,
            base_resolution: 2,
            level_scale: 2.0,
            mlp_hidden: 8,
            mlp_layers: 3,
            bounds_min: [-1.0; 3],
            bounds_max: [1.0; 3],
        }
    }

    #[test]
    fn init_is_deterministic() {
        let field = Field::new(tiny()).unwrap();
        assert_eq!(field.init_params(7), field.init_params(7));
        assert_ne!(field.init_params(7), field.init_params(8));
    }

    #[test]
    fn hash_storage_count() {
        let config = FieldConfig {
            levels: 16,
            features_per_level: 2,
            table_size_log2: 19,
            ..FieldConfig::default()
        };
        assert_eq!(config.hash_param_count(), 16 * (1 << 19) * 2);
        assert_eq!(FieldLayout::new(&config).hash_range().len(), 16 * (1 << 19) * 2);
    }

    #[test]
    fn zero_params_give_activation_of_zero() {
        let field = Field::new(tiny()).unwrap();
        let out = field.forward([0.1, -0.3, 0.7], &field.zero_params()).unwrap();
        assert!((out.density - 2f64.ln()).abs() < 1e-15);
        assert_eq!(out.color, [0.5; 3]);
    }

    #[test]
    fn corner_and_cell_center_encoding() {
        let config = tiny();
        let field = Field::new(config.clone()).unwrap();
        let params = field.init_params(3);
        let table = config.table_size();
        // Level 0 has resolution 2: the origin is grid vertex (1, 1, 1).
        let enc = field.encode_position([0.0, 0.0, 0.0], &params);
        let entry = spatial_hash([1, 1, 1], (table - 1) as u32) as usize * 2;
        assert!((enc[0] - params.values[entry]).abs() < 1e-15);
        assert!((enc[1] - params.values[entry + 1]).abs() < 1e-15);
        // Cell centre of level 0 cell (0,0,0) is at -0.5 on every axis.
        let enc = field.encode_position([-0.5, -0.5, -0.5], &params);
        let mut mean = [0.0; 2];
        for c in 0..8u32 {
            let coords = [c & 1, (c >> 1) & 1, (c >> 2) & 1];
            let e = spatial_hash(coords, (table - 1) as u32) as usize * 2;
            mean[0] += params.values[e] / 8.0;
            mean[1] += params.values[e + 1] / 8.0;
        }
        assert!((enc[0] - mean[0]).abs() < 1e-15);
        assert!((enc[1] - mean[1]).abs() < 1e-15);
    }

    #[test]
    fn non_finite_parameter_is_reported() {
        let field = Field::new(tiny()).unwrap();
        let mut params = field.init_params(1);
        let bias = field.layout().bias_range(2).start;
        params.values[bias] = f64::NAN;
        assert!(matches!(field.forward([0.0; 3], &params), Err(Error::Numerical { .. })));
        assert!(field.check_params(&params).is_err());
    }

    #[test]
    fn zero_cotangent_gives_zero_gradient() {
        let field = Field::new(tiny()).unwrap();
        let params = field.init_params(2);
        let mut grads = field.zero_params();
        field
            .backward([0.2, 0.1, -0.4], &params, &FieldCotangent::default(), &mut grads)
            .unwrap();
        assert!(grads.values.iter().all(|&g| g == 0.0));
    }

    #[test]
    fn positions_outside_bounds_are_clamped() {
        let field = Field::new(tiny()).unwrap();
        let params = field.init_params(5);
        let inside = field.forward([1.0, -1.0, 0.25], &params).unwrap();
        let outside = field.forward([3.0, -7.0, 0.25], &params).unwrap();
        assert_eq!(inside, outside);
    }
}
