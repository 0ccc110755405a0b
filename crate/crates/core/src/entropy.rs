//! Autoregressive estimate of the code distribution.
//!
//! Codes of `m` bits are laid out in raster order on a `g × g` grid
//! (`g = ceil(sqrt(m))`, trailing cells padded with zeros). Four causal
//! convolutions, the first with a mask that excludes the centre and the rest
//! with masks that include it, each followed by batch norm and ReLU, feed a
//! learnable 1×1 convolution with a sigmoid. The output at cell `i` is
//! `Q(z_i = 1 | z_<i)` and depends only on bits at raster positions `< i`.
//!
//! With kernel size `c` every stage extends the reach by `c / 2` rows and
//! columns, so cell `i` sees preceding bits within `4 * (c / 2)` rows above
//! and columns either side. On larger grids, earlier bits beyond that window
//! do not influence `q_i`.
//!
//! Inference runs batch norm on running statistics, so one sample's
//! conditionals never depend on another sample.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::binarizer::BitCode;
use crate::error::{Error, Result};
use crate::nn::{batch_norm_layer, commit_running_stats, glorot_uniform, Graph, Mode, ParameterSet, Var};
use crate::tensor::Tensor;

pub const STAGES: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum MaskKind {
    /// Strictly before the centre.
    A,
    /// Up to and including the centre.
    B,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CausalMask {
    pub kind: MaskKind,
    pub size: usize,
    /// Row-major `size × size` entries in `{0, 1}`.
    pub mask: Vec<f64>,
}

impl CausalMask {
    pub fn at(&self, row: usize, col: usize) -> f64 {
        self.mask[row * self.size + col]
    }

    /// The mask repeated over `[out, in, c, c]`.
    fn broadcast(&self, out_channels: usize, in_channels: usize) -> Tensor {
        let mut data = Vec::with_capacity(out_channels * in_channels * self.mask.len());
        for _ in 0..out_channels * in_channels {
            data.extend_from_slice(&self.mask);
        }
        Tensor::from_parts(vec![out_channels, in_channels, self.size, self.size], data)
    }
}

/// Raster-causal 0-1 filter of odd size `c`.
pub fn make_mask(kind: MaskKind, c: usize) -> Result<CausalMask> {
    if c == 0 || c % 2 == 0 {
        return Err(Error::Parameter(format!("causal mask size must be odd and positive, got {c}")));
    }
    let centre = c * c / 2;
    let mask = (0..c * c)
        .map(|i| match (i.cmp(&centre), kind) {
            (std::cmp::Ordering::Less, _) => 1.0,
            (std::cmp::Ordering::Equal, MaskKind::B) => 1.0,
            _ => 0.0,
        })
        .collect();
    Ok(CausalMask { kind, size: c, mask })
}

/// Side of the square grid holding `m` bits.
pub fn grid_side(m: usize) -> usize {
    let mut g = (m as f64).sqrt() as usize;
    while g * g < m {
        g += 1;
    }
    while g > 1 && (g - 1) * (g - 1) >= m {
        g -= 1;
    }
    g.max(1)
}

/// A code laid out on its grid. Only the first `bits` raster cells are live;
/// the rest stay zero.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct CodeGrid {
    side: usize,
    bits: usize,
    cells: Vec<u8>,
}

impl CodeGrid {
    pub fn from_bits(bits: &[u8]) -> Result<Self> {
        if bits.is_empty() {
            return Err(Error::Parameter("a code needs at least one bit".into()));
        }
        if bits.iter().any(|&b| b > 1) {
            return Err(Error::Parameter("code bits must be 0 or 1".into()));
        }
        let side = grid_side(bits.len());
        let mut cells = vec![0; side * side];
        cells[..bits.len()].copy_from_slice(bits);
        Ok(Self { side, bits: bits.len(), cells })
    }

    pub fn from_code(code: &BitCode) -> Vec<CodeGrid> {
        code.rows_u8().iter().map(|r| CodeGrid::from_bits(r).expect("bit codes hold 0/1")).collect()
    }

    pub fn side(&self) -> usize {
        self.side
    }

    pub fn len(&self) -> usize {
        self.bits
    }

    pub fn is_empty(&self) -> bool {
        self.bits == 0
    }

    pub fn bits(&self) -> &[u8] {
        &self.cells[..self.bits]
    }

    pub fn cells(&self) -> &[u8] {
        &self.cells
    }

    /// Flips the live bit at raster position `i`.
    pub fn flip(&mut self, i: usize) {
        assert!(i < self.bits, "bit {i} out of {}", self.bits);
        self.cells[i] ^= 1;
    }

    pub fn active_mask(&self) -> Vec<bool> {
        active_mask(self.bits, self.side)
    }
}

pub fn active_mask(bits: usize, side: usize) -> Vec<bool> {
    (0..side * side).map(|i| i < bits).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilterMode {
    /// Stage filters are the 0-1 masks themselves; only batch-norm affine
    /// parameters and the output layer learn.
    Fixed,
    /// Stage filters are learnable but multiplied by their mask.
    MaskedLearnable,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EntropyModelConfig {
    pub channels: usize,
    pub kernel: usize,
    pub mode: FilterMode,
}

impl Default for EntropyModelConfig {
    fn default() -> Self {
        Self { channels: 8, kernel: 3, mode: FilterMode::Fixed }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EntropyModel {
    config: EntropyModelConfig,
    bits: usize,
    side: usize,
    prefix: String,
    first: CausalMask,
    rest: CausalMask,
}

impl EntropyModel {
    pub fn new(config: EntropyModelConfig, bits: usize, prefix: impl Into<String>) -> Result<Self> {
        if bits == 0 {
            return Err(Error::Parameter("entropy model needs at least one bit".into()));
        }
        if config.channels == 0 {
            return Err(Error::Parameter("entropy model needs at least one channel".into()));
        }
        Ok(Self {
            first: make_mask(MaskKind::A, config.kernel)?,
            rest: make_mask(MaskKind::B, config.kernel)?,
            config,
            bits,
            side: grid_side(bits),
            prefix: prefix.into(),
        })
    }

    pub fn config(&self) -> &EntropyModelConfig {
        &self.config
    }

    pub fn bits(&self) -> usize {
        self.bits
    }

    pub fn side(&self) -> usize {
        self.side
    }

    fn stage_name(&self, s: usize, what: &str) -> String {
        format!("{}.stage{s}.{what}", self.prefix)
    }

    fn out_name(&self, what: &str) -> String {
        format!("{}.out.{what}", self.prefix)
    }

    fn stage_channels(&self, s: usize) -> (usize, usize) {
        let c = self.config.channels;
        (c, if s == 0 { 1 } else { c })
    }

    fn stage_mask(&self, s: usize) -> &CausalMask {
        if s == 0 {
            &self.first
        } else {
            &self.rest
        }
    }

    /// Adds this model's parameters. The output layer starts at zero, so an
    /// untrained model predicts 0.5 everywhere.
    pub fn init(&self, params: &mut ParameterSet, rng: &mut impl Rng) {
        let c = self.config.channels;
        let k = self.config.kernel;
        for s in 0..STAGES {
            let (out_c, in_c) = self.stage_channels(s);
            if self.config.mode == FilterMode::MaskedLearnable {
                let mut w = glorot_uniform(&[out_c, in_c, k, k], in_c * k * k, out_c * k * k, rng);
                let mask = self.stage_mask(s).broadcast(out_c, in_c);
                w.data_mut().iter_mut().zip(mask.data()).for_each(|(w, m)| *w *= m);
                params.insert(self.stage_name(s, "weight"), w);
            }
            // Fixed filters give every channel the same response; random
            // offsets let the channels diverge after the ReLU.
            let beta: Vec<f64> = (0..c).map(|_| rng.gen_range(-0.5..0.5)).collect();
            params.insert(self.stage_name(s, "bn.gamma"), Tensor::full(&[c], 1.0));
            params.insert(self.stage_name(s, "bn.beta"), Tensor::from_parts(vec![c], beta));
            params.insert_buffer(self.stage_name(s, "bn.running_mean"), Tensor::zeros(&[c]));
            params.insert_buffer(self.stage_name(s, "bn.running_var"), Tensor::full(&[c], 1.0));
        }
        params.insert(self.out_name("weight"), Tensor::zeros(&[1, c, 1, 1]));
        params.insert(self.out_name("bias"), Tensor::zeros(&[1]));
    }

    /// Records `q` for a `[n, 1, g, g]` grid batch.
    pub fn conditionals(&self, g: &mut Graph, params: &ParameterSet, grid: Var, mode: Mode) -> Result<Var> {
        let shape = g.value(grid).shape();
        if shape.len() != 4 || shape[1] != 1 || shape[2] != self.side || shape[3] != self.side {
            return Err(Error::dim(
                "entropy model",
                format!("expected [n, 1, {0}, {0}] grids, got {shape:?}", self.side),
            ));
        }
        let pad = self.config.kernel / 2;
        let mut h = grid;
        for s in 0..STAGES {
            let (out_c, in_c) = self.stage_channels(s);
            let mask = self.stage_mask(s).broadcast(out_c, in_c);
            let w = match self.config.mode {
                FilterMode::Fixed => g.input(mask),
                FilterMode::MaskedLearnable => {
                    let raw = g.param(params, &self.stage_name(s, "weight"))?;
                    g.mul_const(raw, &mask)?
                }
            };
            h = g.conv2d(h, w, None, 1, pad)?;
            h = batch_norm_layer(g, params, &self.stage_name(s, "bn"), h, mode)?;
            h = g.relu(h);
        }
        let w = g.param(params, &self.out_name("weight"))?;
        let b = g.param(params, &self.out_name("bias"))?;
        let logits = g.conv2d(h, w, Some(b), 1, 0)?;
        Ok(g.sigmoid(logits))
    }

    /// Records the cross-entropy rate (nats per code) of `code [n, m]`.
    pub fn rate(&self, g: &mut Graph, params: &ParameterSet, code: Var, mode: Mode) -> Result<Var> {
        let shape = g.value(code).shape();
        if shape.len() != 2 || shape[1] != self.bits {
            return Err(Error::dim("entropy model", format!("expected [n, {}] codes, got {shape:?}", self.bits)));
        }
        let grid = g.embed_grid(code, self.side)?;
        let q = self.conditionals(g, params, grid, mode)?;
        g.bit_cross_entropy(q, grid, &active_mask(self.bits, self.side))
    }

    fn grid_tensor(&self, codes: &[CodeGrid]) -> Result<Tensor> {
        if codes.is_empty() {
            return Err(Error::Parameter("empty code batch".into()));
        }
        let cells = self.side * self.side;
        let mut data = Vec::with_capacity(codes.len() * cells);
        for c in codes {
            if c.side != self.side || c.bits != self.bits {
                return Err(Error::dim(
                    "entropy model",
                    format!(
                        "grid of {} bits on {1}x{1}, model expects {2} bits on {3}x{3}",
                        c.bits, c.side, self.bits, self.side
                    ),
                ));
            }
            data.extend(c.cells.iter().map(|&b| b as f64));
        }
        Ok(Tensor::from_parts(vec![codes.len(), 1, self.side, self.side], data))
    }

    /// `Q(z_i = 1 | z_<i)` for every cell of every grid, using running
    /// batch-norm statistics.
    pub fn predict_conditionals(&self, params: &ParameterSet, codes: &[CodeGrid]) -> Result<Vec<Vec<f64>>> {
        let mut g = Graph::new();
        let x = g.input(self.grid_tensor(codes)?);
        let q = self.conditionals(&mut g, params, x, Mode::Eval)?;
        Ok(g.value(q).data().chunks(self.side * self.side).map(<[f64]>::to_vec).collect())
    }

    /// Mean over the batch of `-Σ_i ln Q(z_i | z_<i)` over live cells (nats).
    pub fn code_cross_entropy(&self, params: &ParameterSet, codes: &[CodeGrid]) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(self.grid_tensor(codes)?);
        let q = self.conditionals(&mut g, params, x, Mode::Eval)?;
        let ce = g.bit_cross_entropy(q, x, &active_mask(self.bits, self.side))?;
        Ok(g.value(ce).item())
    }

    /// One optimizer step on the cross-entropy of `codes` alone. Returns the
    /// (train-mode) cross-entropy before the step.
    pub fn fit_step(&self, params: &mut ParameterSet, codes: &[CodeGrid], lr: f64) -> Result<f64> {
        let mut g = Graph::new();
        let x = g.input(self.grid_tensor(codes)?);
        let q = self.conditionals(&mut g, params, x, Mode::Train)?;
        let ce = g.bit_cross_entropy(q, x, &active_mask(self.bits, self.side))?;
        let value = g.value(ce).item();
        g.backward_into(ce, params)?;
        commit_running_stats(params, &g);
        params.adam_step(lr)?;
        self.project(params)?;
        Ok(value)
    }

    /// Flips each live bit `j` of `grid` in turn and counts positions `i <= j`
    /// whose conditional moved at all. Codes are evaluated one at a time so
    /// that batch layout cannot perturb the comparison.
    pub fn causality_violations(&self, params: &ParameterSet, grid: &CodeGrid) -> Result<usize> {
        let base = self.predict_conditionals(params, std::slice::from_ref(grid))?.remove(0);
        let mut violations = 0;
        for j in 0..grid.len() {
            let mut flipped = grid.clone();
            flipped.flip(j);
            let q = self.predict_conditionals(params, std::slice::from_ref(&flipped))?.remove(0);
            violations += (0..=j).filter(|&i| q[i] != base[i]).count();
        }
        Ok(violations)
    }

    /// Re-zeroes stage weights outside their masks (masked-learnable mode).
    pub fn project(&self, params: &mut ParameterSet) -> Result<()> {
        if self.config.mode != FilterMode::MaskedLearnable {
            return Ok(());
        }
        for s in 0..STAGES {
            let (out_c, in_c) = self.stage_channels(s);
            let mask = self.stage_mask(s).broadcast(out_c, in_c);
            let w = params.value_mut(&self.stage_name(s, "weight"))?;
            w.data_mut().iter_mut().zip(mask.data()).for_each(|(w, m)| *w *= m);
        }
        Ok(())
    }

    /// Stage filter weights as stored (masked-learnable mode only).
    pub fn stage_weight<'a>(&self, params: &'a ParameterSet, stage: usize) -> Option<&'a Tensor> {
        params.get(&self.stage_name(stage, "weight"))
    }

    pub fn stage_mask_tensor(&self, stage: usize) -> Tensor {
        let (out_c, in_c) = self.stage_channels(stage);
        self.stage_mask(stage).broadcast(out_c, in_c)
    }
}
