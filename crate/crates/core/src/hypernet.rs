//! Instance-conditioned modulation of encoder parameter blocks.
//!
//! The linear scheme projects `[x; e_l]` to a `d_max` vector and keeps the
//! first `d_l` entries (row-major) for block `l`. The optional column-wise
//! head generates dense weight modulations one input column at a time from
//! `[x; e_l; e_in_j]`, which keeps the head's size independent of `d_in`.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::models::{BlockRecord, EncoderParams, ParamBlock};

pub const DEFAULT_EMBED_DIM: usize = 2;
pub const COLUMNWISE_EMBED_DIM: usize = 16;
pub const COLUMNWISE_INPUT_EMBED_DIM: usize = 8;
pub const DEFAULT_INIT_STD: f64 = 1e-3;

/// Column-wise head for dense weight blocks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnwiseHead {
    /// `d_out_max × (d + l + n)`
    pub weight: Tensor,
    pub bias: Tensor,
    /// One length-`n` embedding per input column.
    pub input_embeddings: Vec<Tensor>,
}

impl ColumnwiseHead {
    pub fn out_max(&self) -> usize {
        self.bias.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypernetParams {
    /// `d_max × (d + l)`
    pub weight: Tensor,
    pub bias: Tensor,
    pub block_embeddings: Vec<Tensor>,
    /// When present, every 2-D block is modulated column-wise and only the
    /// remaining blocks go through the linear head.
    pub columnwise: Option<ColumnwiseHead>,
}

fn unit_gaussian(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::vector((0..n).map(|_| StandardNormal.sample(rng)).collect())
}

fn gaussian_fill(t: &mut Tensor, std: f64, rng: &mut ChaCha8Rng) {
    if std == 0.0 {
        t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let normal = Normal::new(0.0, std).expect("finite std");
    t.data_mut().iter_mut().for_each(|v| *v = normal.sample(rng));
}

fn uses_columnwise(psi: &HypernetParams, block: &ParamBlock) -> bool {
    psi.columnwise.is_some() && block.shape().len() == 2
}

impl HypernetParams {
    /// Linear scheme sized for `base`: `d_max` is the largest block, block
    /// embeddings are drawn N(0, 1), `W ~ N(0, init_std²)` and `b = 0`.
    pub fn linear(base: &EncoderParams, embed_dim: usize, init_std: f64, seed: u64) -> Result<Self> {
        let d_max = base.max_block_size();
        let input_dim = base.architecture.input_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block_embeddings = (0..base.blocks.len())
            .map(|_| unit_gaussian(&mut rng, embed_dim))
            .collect();
        let psi = HypernetParams {
            weight: Tensor::zeros(&[d_max, input_dim + embed_dim]),
            bias: Tensor::zeros(&[d_max]),
            block_embeddings,
            columnwise: None,
        };
        zero_output_init(psi, init_std, seed.wrapping_add(1))
    }

    /// Linear head for 1-D blocks plus a column-wise head for 2-D blocks.
    pub fn columnwise(
        base: &EncoderParams,
        embed_dim: usize,
        input_embed_dim: usize,
        init_std: f64,
        seed: u64,
    ) -> Result<Self> {
        let input_dim = base.architecture.input_dim;
        let (mut lin_max, mut out_max, mut in_max) = (0, 0, 0);
        for b in &base.blocks {
            if let [rows, cols] = b.shape() {
                out_max = out_max.max(*rows);
                in_max = in_max.max(*cols);
            } else {
                lin_max = lin_max.max(b.element_count());
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block_embeddings = (0..base.blocks.len())
            .map(|_| unit_gaussian(&mut rng, embed_dim))
            .collect();
        let input_embeddings = (0..in_max)
            .map(|_| unit_gaussian(&mut rng, input_embed_dim))
            .collect();
        let psi = HypernetParams {
            weight: Tensor::zeros(&[lin_max, input_dim + embed_dim]),
            bias: Tensor::zeros(&[lin_max]),
            block_embeddings,
            columnwise: Some(ColumnwiseHead {
                weight: Tensor::zeros(&[out_max, input_dim + embed_dim + input_embed_dim]),
                bias: Tensor::zeros(&[out_max]),
                input_embeddings,
            }),
        };
        zero_output_init(psi, init_std, seed.wrapping_add(1))
    }

    pub fn d_max(&self) -> usize {
        self.bias.len()
    }

    pub fn embed_dim(&self) -> usize {
        self.block_embeddings.first().map_or(0, Tensor::len)
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape()[1] - self.embed_dim()
    }

    /// Weights and biases of the generating heads (embeddings excluded).
    pub fn hypernet_parameter_count(&self) -> usize {
        self.weight.len()
            + self.bias.len()
            + self
                .columnwise
                .as_ref()
                .map_or(0, |c| c.weight.len() + c.bias.len())
    }

    pub fn embedding_parameter_count(&self) -> usize {
        self.block_embeddings.iter().map(Tensor::len).sum::<usize>()
            + self
                .columnwise
                .as_ref()
                .map_or(0, |c| c.input_embeddings.iter().map(Tensor::len).sum())
    }

    /// Checks that the embedding table and head sizes cover `base`.
    pub fn check_layout(&self, base: &EncoderParams) -> Result<()> {
        if self.block_embeddings.len() != base.blocks.len() {
            return Err(Error::Layout(format!(
                "{} block embeddings for {} encoder blocks",
                self.block_embeddings.len(),
                base.blocks.len()
            )));
        }
        if self.input_dim() != base.architecture.input_dim {
            return Err(Error::Layout(format!(
                "hypernetwork input dimension {} does not match encoder input {}",
                self.input_dim(),
                base.architecture.input_dim
            )));
        }
        for b in &base.blocks {
            if uses_columnwise(self, b) {
                let head = self.columnwise.as_ref().expect("checked");
                let (rows, cols) = (b.shape()[0], b.shape()[1]);
                if rows > head.out_max() || cols > head.input_embeddings.len() {
                    return Err(Error::Layout(format!(
                        "block {} ({rows}x{cols}) exceeds column-wise head ({}x{})",
                        b.name,
                        head.out_max(),
                        head.input_embeddings.len()
                    )));
                }
            } else if b.element_count() > self.d_max() {
                return Err(Error::Layout(format!(
                    "block {} has {} elements but d_max is {}",
                    b.name,
                    b.element_count(),
                    self.d_max()
                )));
            }
        }
        Ok(())
    }

    pub fn to_checkpoint(&self) -> HypernetCheckpoint {
        let rec = |name: &str, t: &Tensor| BlockRecord {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            values: t.data().to_vec(),
        };
        HypernetCheckpoint {
            blocks: vec![rec("weight", &self.weight), rec("bias", &self.bias)],
            embeddings: self
                .block_embeddings
                .iter()
                .enumerate()
                .map(|(i, e)| rec(&format!("e{i}"), e))
                .collect(),
            columnwise: self.columnwise.as_ref().map(|c| ColumnwiseCheckpoint {
                blocks: vec![rec("weight_out", &c.weight), rec("bias_out", &c.bias)],
                input_embeddings: c
                    .input_embeddings
                    .iter()
                    .enumerate()
                    .map(|(j, e)| rec(&format!("e_in{j}"), e))
                    .collect(),
            }),
        }
    }
}

/// JSON block scheme for the hypernetwork plus an embeddings section.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HypernetCheckpoint {
    pub blocks: Vec<BlockRecord>,
    pub embeddings: Vec<BlockRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub columnwise: Option<ColumnwiseCheckpoint>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ColumnwiseCheckpoint {
    pub blocks: Vec<BlockRecord>,
    pub input_embeddings: Vec<BlockRecord>,
}

impl HypernetCheckpoint {
    pub fn into_params(self) -> Result<HypernetParams> {
        let two = |blocks: &[BlockRecord]| -> Result<(Tensor, Tensor)> {
            match blocks {
                [w, b] => Ok((w.to_tensor()?, b.to_tensor()?)),
                _ => Err(Error::Layout(format!("expected 2 head blocks, found {}", blocks.len()))),
            }
        };
        let (weight, bias) = two(&self.blocks)?;
        let block_embeddings = self
            .embeddings
            .iter()
            .map(BlockRecord::to_tensor)
            .collect::<Result<_>>()?;
        let columnwise = match self.columnwise {
            Some(c) => {
                let (weight, bias) = two(&c.blocks)?;
                Some(ColumnwiseHead {
                    weight,
                    bias,
                    input_embeddings: c
                        .input_embeddings
                        .iter()
                        .map(BlockRecord::to_tensor)
                        .collect::<Result<_>>()?,
                })
            }
            None => None,
        };
        Ok(HypernetParams {
            weight,
            bias,
            block_embeddings,
            columnwise,
        })
    }
}

/// Re-draws the output heads: weights `N(0, std²)`, biases exactly zero.
/// Embeddings are left as they are. `std = 0` gives the zero-modulation
/// configuration, for which every modulation is exactly zero.
pub fn zero_output_init(mut psi: HypernetParams, std: f64, seed: u64) -> Result<HypernetParams> {
    if !(std >= 0.0 && std.is_finite()) {
        return Err(Error::invalid(format!("init std must be finite and >= 0, got {std}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    gaussian_fill(&mut psi.weight, std, &mut rng);
    gaussian_fill(&mut psi.bias, 0.0, &mut rng);
    if let Some(head) = psi.columnwise.as_mut() {
        gaussian_fill(&mut head.weight, std, &mut rng);
        gaussian_fill(&mut head.bias, 0.0, &mut rng);
    }
    Ok(psi)
}

fn affine(w: &Tensor, b: &Tensor, input: &[f64]) -> Vec<f64> {
    let cols = w.shape()[1];
    w.data()
        .chunks(cols)
        .zip(b.data())
        .map(|(row, bias)| row.iter().zip(input).map(|(a, b)| a * b).sum::<f64>() + bias)
        .collect()
}

/// Linear-scheme modulation for `block`: `(W [x; e_l] + b)[..d_l]`, reshaped
/// to the block's shape.
pub fn h_linear(x: &[f64], block: &ParamBlock, psi: &HypernetParams) -> Result<Tensor> {
    if x.len() != psi.input_dim() {
        return Err(Error::Dimension {
            what: "observation",
            expected: psi.input_dim(),
            got: x.len(),
        });
    }
    let emb = psi.block_embeddings.get(block.index).ok_or_else(|| {
        Error::Layout(format!("no embedding for block index {}", block.index))
    })?;
    let d = block.element_count();
    if d > psi.d_max() {
        return Err(Error::Layout(format!(
            "block {} has {d} elements but d_max is {}",
            block.name,
            psi.d_max()
        )));
    }
    let mut input = x.to_vec();
    input.extend_from_slice(emb.data());
    let mut full = affine(&psi.weight, &psi.bias, &input);
    full.truncate(d);
    Tensor::new(block.shape().to_vec(), full)
}

/// Column-wise modulation `ΔW[:, j] = (W_out [x; e_l; e_in_j] + b_out)[..d_out]`
/// for a dense `d_out × d_in` block.
pub fn columnwise_fc_modulation(x: &[f64], block: &ParamBlock, psi: &HypernetParams) -> Result<Tensor> {
    let head = psi
        .columnwise
        .as_ref()
        .ok_or_else(|| Error::Layout("hypernetwork has no column-wise head".into()))?;
    let [d_out, d_in] = match block.shape() {
        [r, c] => [*r, *c],
        s => return Err(Error::Layout(format!("column-wise modulation needs a 2-D block, got {s:?}"))),
    };
    if d_in > head.input_embeddings.len() {
        return Err(Error::Layout(format!(
            "missing input embedding: block {} needs {d_in}, table has {}",
            block.name,
            head.input_embeddings.len()
        )));
    }
    if d_out > head.out_max() {
        return Err(Error::Layout(format!("d_out {d_out} exceeds head size {}", head.out_max())));
    }
    let emb = psi
        .block_embeddings
        .get(block.index)
        .ok_or_else(|| Error::Layout(format!("no embedding for block index {}", block.index)))?;
    let mut out = vec![0.0; d_out * d_in];
    for j in 0..d_in {
        let mut input = x.to_vec();
        input.extend_from_slice(emb.data());
        input.extend_from_slice(head.input_embeddings[j].data());
        let expected = head.weight.shape()[1];
        if input.len() != expected {
            return Err(Error::Dimension {
                what: "column-wise input",
                expected,
                got: input.len(),
            });
        }
        let col = affine(&head.weight, &head.bias, &input);
        for i in 0..d_out {
            out[i * d_in + j] = col[i];
        }
    }
    Tensor::new(vec![d_out, d_in], out)
}

/// Modulation for one block under whichever scheme applies to it.
pub fn block_modulation(x: &[f64], block: &ParamBlock, psi: &HypernetParams) -> Result<Tensor> {
    if uses_columnwise(psi, block) {
        columnwise_fc_modulation(x, block, psi)
    } else {
        h_linear(x, block, psi)
    }
}

/// Instance-specific parameters `φ_l(x) = φ_base,l + h(x, e_l)`; `base` is
/// not modified.
pub fn modulate(base: &EncoderParams, x: &[f64], psi: &HypernetParams) -> Result<EncoderParams> {
    psi.check_layout(base)?;
    let mut out = base.clone();
    for block in &mut out.blocks {
        let delta = block_modulation(x, block, psi)?;
        block
            .values
            .data_mut()
            .iter_mut()
            .zip(delta.data())
            .for_each(|(v, d)| *v += d);
    }
    Ok(out)
}

/// Graph leaves of a [`HypernetParams`], in [`crate::optim::ParamSet`] order.
#[derive(Clone, Debug)]
pub struct HypernetVars {
    pub weight: Var,
    pub bias: Var,
    pub block_embeddings: Vec<Var>,
    pub columnwise: Option<(Var, Var, Vec<Var>)>,
}

impl HypernetVars {
    pub fn register(g: &mut Graph, psi: &HypernetParams) -> Self {
        HypernetVars {
            weight: g.param(psi.weight.clone()),
            bias: g.param(psi.bias.clone()),
            block_embeddings: psi.block_embeddings.iter().map(|e| g.param(e.clone())).collect(),
            columnwise: psi.columnwise.as_ref().map(|c| {
                (
                    g.param(c.weight.clone()),
                    g.param(c.bias.clone()),
                    c.input_embeddings.iter().map(|e| g.param(e.clone())).collect(),
                )
            }),
        }
    }

    pub fn leaves(&self) -> Vec<Var> {
        let mut v = vec![self.weight, self.bias];
        v.extend(&self.block_embeddings);
        if let Some((w, b, e)) = &self.columnwise {
            v.push(*w);
            v.push(*b);
            v.extend(e);
        }
        v
    }
}

/// Graph version of [`h_linear`].
pub fn h_linear_graph(g: &mut Graph, x: Var, block: &ParamBlock, hv: &HypernetVars) -> Result<Var> {
    let emb = *hv
        .block_embeddings
        .get(block.index)
        .ok_or_else(|| Error::Layout(format!("no embedding for block index {}", block.index)))?;
    let input = g.concat(&[x, emb])?;
    let full = g.matvec(hv.weight, input)?;
    let full = g.add(full, hv.bias)?;
    let trunc = g.slice(full, 0, block.element_count())?;
    g.reshape(trunc, block.shape())
}

/// Graph version of [`columnwise_fc_modulation`].
pub fn columnwise_graph(g: &mut Graph, x: Var, block: &ParamBlock, hv: &HypernetVars) -> Result<Var> {
    let (w, b, table) = hv
        .columnwise
        .as_ref()
        .ok_or_else(|| Error::Layout("hypernetwork has no column-wise head".into()))?;
    let [d_out, d_in] = match block.shape() {
        [r, c] => [*r, *c],
        s => return Err(Error::Layout(format!("column-wise modulation needs a 2-D block, got {s:?}"))),
    };
    if d_in > table.len() {
        return Err(Error::Layout(format!(
            "missing input embedding: block {} needs {d_in}, table has {}",
            block.name,
            table.len()
        )));
    }
    let emb = *hv
        .block_embeddings
        .get(block.index)
        .ok_or_else(|| Error::Layout(format!("no embedding for block index {}", block.index)))?;
    let mut cols = Vec::with_capacity(d_in);
    for &e_in in table.iter().take(d_in) {
        let input = g.concat(&[x, emb, e_in])?;
        let col = g.matvec(*w, input)?;
        let col = g.add(col, *b)?;
        cols.push(g.slice(col, 0, d_out)?);
    }
    let stacked = g.concat(&cols)?;
    let by_column = g.reshape(stacked, &[d_in, d_out])?;
    g.transpose(by_column)
}

/// Effective encoder block nodes for observation `x`: constant base values
/// plus the generated modulation.
pub fn modulate_graph(
    g: &mut Graph,
    base: &EncoderParams,
    x: Var,
    psi: &HypernetParams,
    hv: &HypernetVars,
) -> Result<Vec<Var>> {
    base.blocks
        .iter()
        .map(|block| {
            let delta = if uses_columnwise(psi, block) {
                columnwise_graph(g, x, block, hv)?
            } else {
                h_linear_graph(g, x, block, hv)?
            };
            let fixed = g.constant(block.values.clone());
            g.add(fixed, delta)
        })
        .collect()
}
