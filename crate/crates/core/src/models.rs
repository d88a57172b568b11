//! Encoder parameter blocks and the fixed oracle decoder.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const OBS_DIM: usize = 3;
pub const LATENT_DIM: usize = 2;

/// Standard deviation of the Gaussian used for encoder weights.
pub const ENCODER_INIT_STD: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub input_dim: usize,
    pub hidden_width: usize,
    pub latent_dim: usize,
    pub activation: Activation,
}

impl Architecture {
    pub fn reference(hidden_width: usize) -> Self {
        Architecture {
            input_dim: OBS_DIM,
            hidden_width,
            latent_dim: LATENT_DIM,
            activation: Activation::Relu,
        }
    }

    pub fn output_dim(&self) -> usize {
        2 * self.latent_dim
    }

    /// `(name, shape)` of every block in order.
    pub fn block_layout(&self) -> Vec<(&'static str, Vec<usize>)> {
        vec![
            ("w1", vec![self.hidden_width, self.input_dim]),
            ("b1", vec![self.hidden_width]),
            ("w2", vec![self.output_dim(), self.hidden_width]),
            ("b2", vec![self.output_dim()]),
        ]
    }
}

/// One tensor of the encoder, modulated as a unit.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub index: usize,
    pub name: String,
    pub values: Tensor,
}

impl ParamBlock {
    pub fn shape(&self) -> &[usize] {
        self.values.shape()
    }

    pub fn element_count(&self) -> usize {
        self.values.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub architecture: Architecture,
    pub blocks: Vec<ParamBlock>,
}

/// Mean and log-variance of a diagonal Gaussian.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PosteriorParams {
    pub mean: Vec<f64>,
    pub log_variance: Vec<f64>,
}

impl PosteriorParams {
    pub fn new(mean: Vec<f64>, log_variance: Vec<f64>) -> Result<Self> {
        if mean.len() != log_variance.len() {
            return Err(Error::Dimension {
                what: "log_variance",
                expected: mean.len(),
                got: log_variance.len(),
            });
        }
        Ok(PosteriorParams { mean, log_variance })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn variance(&self) -> Vec<f64> {
        self.log_variance.iter().map(|v| v.exp()).collect()
    }
}

impl EncoderParams {
    pub fn zeros(architecture: Architecture) -> Self {
        let blocks = architecture
            .block_layout()
            .into_iter()
            .enumerate()
            .map(|(index, (name, shape))| ParamBlock {
                index,
                name: name.to_string(),
                values: Tensor::zeros(&shape),
            })
            .collect();
        EncoderParams {
            architecture,
            blocks,
        }
    }

    pub fn parameter_count(&self) -> usize {
        self.blocks.iter().map(ParamBlock::element_count).sum()
    }

    pub fn max_block_size(&self) -> usize {
        self.blocks.iter().map(ParamBlock::element_count).max().unwrap_or(0)
    }

    /// Verifies block indices, names and shapes against the architecture.
    pub fn validate(&self) -> Result<()> {
        let layout = self.architecture.block_layout();
        if layout.len() != self.blocks.len() {
            return Err(Error::Layout(format!(
                "expected {} blocks, found {}",
                layout.len(),
                self.blocks.len()
            )));
        }
        for (i, ((name, shape), block)) in layout.iter().zip(&self.blocks).enumerate() {
            if block.index != i || block.name != *name || block.shape() != shape.as_slice() {
                return Err(Error::Layout(format!(
                    "block {i}: expected {name}{shape:?}, found #{} {}{:?}",
                    block.index,
                    block.name,
                    block.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn save_json(&self, path: impl AsRef<Path>, seed: u64) -> Result<()> {
        let ckpt = EncoderCheckpoint {
            architecture: self.architecture.clone(),
            blocks: self.blocks.iter().map(BlockRecord::from).collect(),
            seed,
        };
        write_json(path, &ckpt)
    }

    pub fn load_json(path: impl AsRef<Path>) -> Result<(Self, u64)> {
        let ckpt: EncoderCheckpoint = read_json(path)?;
        let seed = ckpt.seed;
        Ok((ckpt.into_params()?, seed))
    }
}

/// Serialized form of one block.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockRecord {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
}

impl From<&ParamBlock> for BlockRecord {
    fn from(b: &ParamBlock) -> Self {
        BlockRecord {
            name: b.name.clone(),
            shape: b.shape().to_vec(),
            values: b.values.data().to_vec(),
        }
    }
}

impl BlockRecord {
    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::new(self.shape.clone(), self.values.clone())
    }
}

/// `{architecture, blocks: [{name, shape, values}], seed}`
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderCheckpoint {
    pub architecture: Architecture,
    pub blocks: Vec<BlockRecord>,
    pub seed: u64,
}

impl EncoderCheckpoint {
    pub fn into_params(self) -> Result<EncoderParams> {
        let blocks = self
            .blocks
            .into_iter()
            .enumerate()
            .map(|(index, r)| {
                Ok(ParamBlock {
                    index,
                    values: r.to_tensor()?,
                    name: r.name,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let params = EncoderParams {
            architecture: self.architecture,
            blocks,
        };
        params.validate()?;
        Ok(params)
    }
}

pub(crate) fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reference encoder `3 → hidden_width (relu) → 4` with Gaussian weights
/// (std [`ENCODER_INIT_STD`]) and zero biases.
pub fn make_encoder(hidden_width: usize, seed: u64) -> Result<EncoderParams> {
    if hidden_width == 0 {
        return Err(Error::invalid("hidden_width must be at least 1"));
    }
    let mut params = EncoderParams::zeros(Architecture::reference(hidden_width));
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, ENCODER_INIT_STD).expect("valid std");
    for block in &mut params.blocks {
        if block.name.starts_with('w') {
            for v in block.values.data_mut() {
                *v = normal.sample(&mut rng);
            }
        }
    }
    Ok(params)
}

fn dense(w: &Tensor, b: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = w.shape()[1];
    w.data()
        .chunks(cols)
        .zip(b.data())
        .map(|(row, bias)| row.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + bias)
        .collect()
}

/// Posterior parameters for `x`: the first `k` outputs are the mean, the
/// last `k` the log-variance.
pub fn encode(x: &[f64], params: &EncoderParams) -> Result<PosteriorParams> {
    let arch = &params.architecture;
    if x.len() != arch.input_dim {
        return Err(Error::Dimension {
            what: "observation",
            expected: arch.input_dim,
            got: x.len(),
        });
    }
    if params.blocks.len() != 4 {
        return Err(Error::Layout(format!("expected 4 blocks, found {}", params.blocks.len())));
    }
    let [w1, b1, w2, b2] = [0, 1, 2, 3].map(|i| &params.blocks[i].values);
    let hidden: Vec<f64> = dense(w1, b1, x)
        .into_iter()
        .map(|v| if v > 0.0 { v } else { 0.0 })
        .collect();
    let mut out = dense(w2, b2, &hidden);
    let log_variance = out.split_off(arch.latent_dim);
    Ok(PosteriorParams {
        mean: out,
        log_variance,
    })
}

/// Graph version of [`encode`]; `blocks` are the four block nodes in order.
/// Returns `(mean, log_variance)`.
pub fn encode_graph(g: &mut Graph, x: Var, blocks: &[Var], arch: &Architecture) -> Result<(Var, Var)> {
    if blocks.len() != 4 {
        return Err(Error::Layout(format!("expected 4 blocks, found {}", blocks.len())));
    }
    let pre = g.matvec(blocks[0], x)?;
    let pre = g.add(pre, blocks[1])?;
    let hidden = g.relu(pre);
    let out = g.matvec(blocks[2], hidden)?;
    let out = g.add(out, blocks[3])?;
    let k = arch.latent_dim;
    Ok((g.slice(out, 0, k)?, g.slice(out, k, k)?))
}

/// Fixed generative mapping `f(z) = A z + g(z)` with
/// `A = [[1,0],[0,1],[1,1]]` and `g(z) = [0, 0, z1 z2]`.
pub fn decoder_mean(z: [f64; 2]) -> [f64; 3] {
    let [z1, z2] = z;
    [z1, z2, z1 + z2 + z1 * z2]
}

pub fn decoder_true(z: &[f64]) -> Result<[f64; 3]> {
    match z {
        [z1, z2] => Ok(decoder_mean([*z1, *z2])),
        _ => Err(Error::Dimension {
            what: "latent",
            expected: LATENT_DIM,
            got: z.len(),
        }),
    }
}

/// Graph version of the oracle decoder for a single latent `z` of length 2.
pub fn decoder_true_graph(g: &mut Graph, z: Var) -> Result<Var> {
    let len = g.value(z).len();
    if len != LATENT_DIM {
        return Err(Error::Dimension {
            what: "latent",
            expected: LATENT_DIM,
            got: len,
        });
    }
    let z1 = g.slice(z, 0, 1)?;
    let z2 = g.slice(z, 1, 1)?;
    let third = decoder_third_graph(g, z1, z2)?;
    g.concat(&[z1, z2, third])
}

/// `z1 + z2 + z1 z2`, elementwise over equally shaped nodes.
pub(crate) fn decoder_third_graph(g: &mut Graph, z1: Var, z2: Var) -> Result<Var> {
    let s = g.add(z1, z2)?;
    let p = g.mul(z1, z2)?;
    g.add(s, p)
}
