//! Fully-connected rectifier networks with hand-written backward passes.
//! All math is f64 and sequential, so a fixed parameter state and input
//! always reproduce the same bits.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// Named tensor with flat storage. Shape is [out, in] for weights and
/// [out] for biases.
#[derive(Debug, Clone, PartialEq)]
pub struct ParameterBlock {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl ParameterBlock {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Layer widths [input, hidden..., output]; ReLU after every hidden layer,
/// linear output. Blocks alternate w0, b0, w1, b1, ...
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub input_dim: usize,
    pub hidden: Vec<usize>,
    pub output_dim: usize,
    pub blocks: Vec<ParameterBlock>,
}

/// Gradient accumulator aligned with [`Mlp::blocks`].
#[derive(Debug, Clone)]
pub struct MlpGrads {
    pub blocks: Vec<Vec<f64>>,
}

impl MlpGrads {
    pub fn zeros_like(net: &Mlp) -> Self {
        MlpGrads {
            blocks: net.blocks.iter().map(|b| vec![0.0; b.len()]).collect(),
        }
    }

    pub fn scale(&mut self, c: f64) {
        for b in &mut self.blocks {
            for g in b {
                *g *= c;
            }
        }
    }

    pub fn add(&mut self, other: &MlpGrads) {
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }
}

/// Activations kept for the backward pass: acts[0] is the input, acts[l]
/// the post-activation output of layer l-1, the last entry the raw output.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    pub acts: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.acts.last().expect("cache has layers")
    }
}

impl Mlp {
    /// Fan-in scaled uniform init, U(-1/sqrt(fan_in), 1/sqrt(fan_in)) for
    /// weights and biases. `final_scale` multiplies the last layer's init
    /// (used to start actors near zero output).
    pub fn new(
        name: &str,
        input_dim: usize,
        hidden: &[usize],
        output_dim: usize,
        rng: &mut ChaCha8Rng,
        final_scale: f64,
    ) -> Mlp {
        // Empty `hidden` yields a single linear layer; forward and backward
        // handle it since only interior layers get activations.
        assert!(input_dim > 0 && output_dim > 0);
        let widths: Vec<usize> = std::iter::once(input_dim)
            .chain(hidden.iter().copied())
            .chain(std::iter::once(output_dim))
            .collect();
        let n_layers = widths.len() - 1;
        let mut blocks = Vec::with_capacity(2 * n_layers);
        for l in 0..n_layers {
            let (fan_in, fan_out) = (widths[l], widths[l + 1]);
            let bound = (1.0 / fan_in as f64).sqrt()
                * if l == n_layers - 1 { final_scale } else { 1.0 };
            let mut w = Vec::with_capacity(fan_out * fan_in);
            for _ in 0..fan_out * fan_in {
                w.push(rng.gen_range(-bound..bound));
            }
            let mut b = Vec::with_capacity(fan_out);
            for _ in 0..fan_out {
                b.push(rng.gen_range(-bound..bound));
            }
            blocks.push(ParameterBlock {
                name: format!("{name}.l{l}.w"),
                shape: vec![fan_out, fan_in],
                values: w,
            });
            blocks.push(ParameterBlock {
                name: format!("{name}.l{l}.b"),
                shape: vec![fan_out],
                values: b,
            });
        }
        Mlp {
            input_dim,
            hidden: hidden.to_vec(),
            output_dim,
            blocks,
        }
    }

    pub fn n_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    pub fn widths(&self) -> Vec<usize> {
        std::iter::once(self.input_dim)
            .chain(self.hidden.iter().copied())
            .chain(std::iter::once(self.output_dim))
            .collect()
    }

    pub fn n_params(&self) -> usize {
        self.blocks.iter().map(ParameterBlock::len).sum()
    }

    fn layer(&self, l: usize) -> (&ParameterBlock, &ParameterBlock) {
        (&self.blocks[2 * l], &self.blocks[2 * l + 1])
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        assert_eq!(x.len(), self.input_dim, "input dim");
        let widths = self.widths();
        let mut cur = x.to_vec();
        let mut next = Vec::new();
        for l in 0..self.n_layers() {
            let (w, b) = self.layer(l);
            let (rows, cols) = (widths[l + 1], widths[l]);
            next.clear();
            next.reserve(rows);
            for i in 0..rows {
                let row = &w.values[i * cols..(i + 1) * cols];
                let mut acc = b.values[i];
                for (wj, zj) in row.iter().zip(&cur) {
                    acc += wj * zj;
                }
                next.push(acc);
            }
            if l + 1 < self.n_layers() {
                for v in &mut next {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            }
            std::mem::swap(&mut cur, &mut next);
        }
        cur
    }

    pub fn forward_cached(&self, x: &[f64]) -> ForwardCache {
        assert_eq!(x.len(), self.input_dim, "input dim");
        let widths = self.widths();
        let mut acts = Vec::with_capacity(self.n_layers() + 1);
        acts.push(x.to_vec());
        for l in 0..self.n_layers() {
            let (w, b) = self.layer(l);
            let (rows, cols) = (widths[l + 1], widths[l]);
            let prev = &acts[l];
            let mut out = Vec::with_capacity(rows);
            for i in 0..rows {
                let row = &w.values[i * cols..(i + 1) * cols];
                let mut acc = b.values[i];
                for (wj, zj) in row.iter().zip(prev) {
                    acc += wj * zj;
                }
                if l + 1 < self.n_layers() && acc < 0.0 {
                    acc = 0.0;
                }
                out.push(acc);
            }
            acts.push(out);
        }
        ForwardCache { acts }
    }

    /// Accumulates dL/dparams into `grads` given dL/doutput, returning
    /// dL/dinput when requested. ReLU subgradient at 0 is 0.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: &[f64],
        grads: &mut MlpGrads,
        want_input_grad: bool,
    ) -> Option<Vec<f64>> {
        assert_eq!(grad_out.len(), self.output_dim, "output grad dim");
        let widths = self.widths();
        let mut delta = grad_out.to_vec();
        for l in (0..self.n_layers()).rev() {
            let (rows, cols) = (widths[l + 1], widths[l]);
            let w = &self.blocks[2 * l].values;
            let z = &cache.acts[l];
            {
                let dw = &mut grads.blocks[2 * l];
                for i in 0..rows {
                    let di = delta[i];
                    if di == 0.0 {
                        continue;
                    }
                    let drow = &mut dw[i * cols..(i + 1) * cols];
                    for (dwj, zj) in drow.iter_mut().zip(z) {
                        *dwj += di * zj;
                    }
                }
            }
            {
                let db = &mut grads.blocks[2 * l + 1];
                for i in 0..rows {
                    db[i] += delta[i];
                }
            }
            if l == 0 && !want_input_grad {
                return None;
            }
            let mut prev = vec![0.0; cols];
            for i in 0..rows {
                let di = delta[i];
                if di == 0.0 {
                    continue;
                }
                let row = &w[i * cols..(i + 1) * cols];
                for (pj, wj) in prev.iter_mut().zip(row) {
                    *pj += di * wj;
                }
            }
            if l > 0 {
                // acts[l] holds relu output; positive iff the unit was live.
                for (pj, zj) in prev.iter_mut().zip(&cache.acts[l]) {
                    if *zj <= 0.0 {
                        *pj = 0.0;
                    }
                }
            }
            delta = prev;
        }
        Some(delta)
    }

    /// Flattened view of all parameters, block by block.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for b in &self.blocks {
            out.extend_from_slice(&b.values);
        }
        out
    }

    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Dim(format!(
                "flat params {} vs {}",
                flat.len(),
                self.n_params()
            )));
        }
        let mut off = 0;
        for b in &mut self.blocks {
            let n = b.len();
            b.values.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }
}
