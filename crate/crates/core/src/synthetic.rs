//! Oracle data generator: `z ~ N(0, I2)`, `x = f(z) + σ η`, `η ~ N(0, I3)`.
//!
//! Randomness comes from ChaCha8 seeded with the dataset seed. Latents are
//! drawn from stream 0 and observation noise from stream 1, so changing `N`
//! only appends rows and changing `σ` leaves the latents untouched.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{decoder_mean, read_json, write_json};

pub const LATENT_STREAM: u64 = 0;
pub const NOISE_STREAM: u64 = 1;

pub const DEFAULT_N: usize = 5000;
pub const DEFAULT_SIGMA: f64 = 0.1;

/// The fixed linear part of the generative mapping.
pub const MIXING: [[f64; 2]; 3] = [[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub x: Vec<[f64; 3]>,
    pub z_true: Vec<[f64; 2]>,
    pub sigma: f64,
    pub seed: u64,
}

/// `{N, sigma, seed}` sidecar written next to the CSV.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetMeta {
    #[serde(rename = "N")]
    pub n: usize,
    pub sigma: f64,
    pub seed: u64,
}

#[derive(Serialize, Deserialize)]
struct Row {
    x1: f64,
    x2: f64,
    x3: f64,
    z1: f64,
    z2: f64,
}

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn generate(n: usize, sigma: f64, seed: u64) -> Result<SyntheticDataset> {
    if n == 0 {
        return Err(Error::invalid("dataset size must be at least 1"));
    }
    if !(sigma >= 0.0 && sigma.is_finite()) {
        return Err(Error::invalid(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    let mut latents = stream_rng(seed, LATENT_STREAM);
    let mut noise = stream_rng(seed, NOISE_STREAM);
    let mut x = Vec::with_capacity(n);
    let mut z_true = Vec::with_capacity(n);
    for _ in 0..n {
        let z = [StandardNormal.sample(&mut latents), StandardNormal.sample(&mut latents)];
        let mean = decoder_mean(z);
        let mut obs = [0.0; 3];
        for (o, m) in obs.iter_mut().zip(mean) {
            let eta: f64 = StandardNormal.sample(&mut noise);
            *o = m + sigma * eta;
        }
        x.push(obs);
        z_true.push(z);
    }
    Ok(SyntheticDataset { x, z_true, sigma, seed })
}

impl SyntheticDataset {
    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            n: self.len(),
            sigma: self.sigma,
            seed: self.seed,
        }
    }

    /// First `n` rows; the result is still a prefix of what `generate`
    /// produces for the same seed.
    pub fn truncated(&self, n: usize) -> Self {
        SyntheticDataset {
            x: self.x[..n.min(self.len())].to_vec(),
            z_true: self.z_true[..n.min(self.len())].to_vec(),
            sigma: self.sigma,
            seed: self.seed,
        }
    }

    /// Sidecar path for a CSV path (`data.csv` → `data.json`).
    pub fn sidecar_path(csv_path: &Path) -> PathBuf {
        csv_path.with_extension("json")
    }

    /// Writes `x1,x2,x3,z1,z2` rows plus the JSON sidecar.
    pub fn write_csv(&self, csv_path: impl AsRef<Path>) -> Result<()> {
        let csv_path = csv_path.as_ref();
        let mut w = csv::Writer::from_path(csv_path)?;
        for (x, z) in self.x.iter().zip(&self.z_true) {
            w.serialize(Row {
                x1: x[0],
                x2: x[1],
                x3: x[2],
                z1: z[0],
                z2: z[1],
            })?;
        }
        w.flush().map_err(|e| Error::io(csv_path, e))?;
        write_json(Self::sidecar_path(csv_path), &self.meta())
    }

    pub fn read_csv(csv_path: impl AsRef<Path>) -> Result<Self> {
        let csv_path = csv_path.as_ref();
        let meta: DatasetMeta = read_json(Self::sidecar_path(csv_path))?;
        let mut r = csv::Reader::from_path(csv_path)?;
        let mut x = Vec::new();
        let mut z_true = Vec::new();
        for row in r.deserialize() {
            let row: Row = row?;
            x.push([row.x1, row.x2, row.x3]);
            z_true.push([row.z1, row.z2]);
        }
        if x.len() != meta.n {
            return Err(Error::invalid(format!(
                "sidecar says N={} but CSV has {} rows",
                meta.n,
                x.len()
            )));
        }
        Ok(SyntheticDataset {
            x,
            z_true,
            sigma: meta.sigma,
            seed: meta.seed,
        })
    }
}
