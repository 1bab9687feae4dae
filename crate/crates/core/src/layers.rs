//! Neural network building blocks on top of the tape: convolution and dense
//! layers, parameter initialization, the two-class matching loss, and a small
//! binary container for named parameter tensors.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::tensor::{NodeId, Reduction, Tape, Tensor, TensorError};

#[derive(Debug, Error)]
pub enum LayerError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("init_params supports rank 1, 2 or 4 shapes, got {0:?}")]
    InitRank(Vec<usize>),
    #[error("orthogonal init needs a rank 2 or 4 shape, got {0:?}")]
    OrthogonalRank(Vec<usize>),
    #[error("conv weights must be rank 4, got {0:?}")]
    ConvWeightRank(Vec<usize>),
    #[error("conv bias shape {bias:?} does not match {out_channels} output channels")]
    ConvBiasShape { bias: Vec<usize>, out_channels: usize },
    #[error("conv stride must be at least 1")]
    ZeroStride,
    #[error("dense weights must be rank 2, got {0:?}")]
    DenseWeightRank(Vec<usize>),
    #[error("dense bias shape {bias:?} does not match {outputs} outputs")]
    DenseBiasShape { bias: Vec<usize>, outputs: usize },
    #[error("matching loss expects two-class logits, got shape {0:?}")]
    NotTwoClass(Vec<usize>),
    #[error("label {0} is not a valid class index (expected 0 or 1)")]
    BadLabel(usize),
}

/// Weight initialization schemes. Every scheme is a pure, seeded function of
/// the requested shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitScheme {
    /// Uniform on `[-sqrt(1/fan_in), sqrt(1/fan_in)]`.
    UniformFanIn,
    /// Uniform on `[-sqrt(6/fan_in), sqrt(6/fan_in)]`. Keeps activation
    /// variance roughly constant through deep ReLU stacks, where the narrow
    /// fan-in bound decays by about 6x per layer.
    UniformHe,
    /// Orthonormal rows or columns (whichever direction the shape allows)
    /// scaled by `sqrt(2)`. Rank-4 kernels are treated as
    /// `[out, in * kh * kw]` matrices. Where the uniform schemes only match
    /// the *average* gain of a layer, an orthogonal matrix pins every
    /// singular value to the same gain, so no direction through a deep ReLU
    /// stack is attenuated at the start of training. Rejects rank-1 shapes.
    Orthogonal,
    /// All zeros (for biases). Ignores the seed.
    Zeros,
}

/// Fan-in convention: rank 1 uses the length, rank 2 treats rows as inputs
/// (`[in, out]` weights), rank 4 uses `in_channels * kh * kw`
/// (`[out, in, kh, kw]` kernels).
fn fan_in(shape: &[usize]) -> Result<usize, LayerError> {
    match shape.len() {
        1 | 2 => Ok(shape[0]),
        4 => Ok(shape[1] * shape[2] * shape[3]),
        _ => Err(LayerError::InitRank(shape.to_vec())),
    }
}

/// Seeded parameter tensor under the given scheme.
pub fn init_params(shape: &[usize], seed: u64, scheme: InitScheme) -> Result<Tensor, LayerError> {
    let n: usize = shape.iter().product();
    if scheme == InitScheme::Zeros {
        return Ok(Tensor::zeros(shape)?);
    }
    if scheme == InitScheme::Orthogonal {
        return orthogonal_params(shape, seed);
    }
    let fan = fan_in(shape)?;
    let bound = match scheme {
        InitScheme::UniformFanIn => (1.0 / fan as f64).sqrt(),
        InitScheme::UniformHe => (6.0 / fan as f64).sqrt(),
        InitScheme::Orthogonal | InitScheme::Zeros => unreachable!(),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..n)
        .map(|_| (2.0 * rng.gen::<f64>() - 1.0) * bound)
        .collect();
    Ok(Tensor::from_values(shape, data)?)
}

/// Standard normal draw via Box-Muller on two uniform samples.
fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    loop {
        let u: f64 = rng.gen();
        if u > 0.0 {
            let r = (-2.0 * u.ln()).sqrt();
            return r * (std::f64::consts::TAU * rng.gen::<f64>()).cos();
        }
    }
}

/// Orthogonal weight matrix scaled by sqrt(2): Gram-Schmidt over seeded
/// Gaussian vectors. The shape is viewed as a `[rows, cols]` matrix (rank-4
/// kernels flatten their trailing dims); whichever side is shorter gets the
/// orthonormal vectors, so `W Wᵀ = 2I` for wide matrices and `Wᵀ W = 2I` for
/// tall ones.
fn orthogonal_params(shape: &[usize], seed: u64) -> Result<Tensor, LayerError> {
    let (rows, cols) = match shape.len() {
        2 => (shape[0], shape[1]),
        4 => (shape[0], shape[1] * shape[2] * shape[3]),
        _ => return Err(LayerError::OrthogonalRank(shape.to_vec())),
    };
    // Work on the orientation with fewer vectors: `vecs` vectors of `dim`
    // components each, laid out row-major.
    let (vecs, dim, transposed) = if rows <= cols {
        (rows, cols, false)
    } else {
        (cols, rows, true)
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m: Vec<f64> = (0..vecs * dim).map(|_| gaussian(&mut rng)).collect();
    for i in 0..vecs {
        // A degenerate draw (norm ~ 0 after projection) is redrawn; for
        // Gaussian vectors this effectively never triggers.
        loop {
            for j in 0..i {
                let dot: f64 = (0..dim).map(|k| m[i * dim + k] * m[j * dim + k]).sum();
                for k in 0..dim {
                    m[i * dim + k] -= dot * m[j * dim + k];
                }
            }
            let norm: f64 = (0..dim)
                .map(|k| m[i * dim + k] * m[i * dim + k])
                .sum::<f64>()
                .sqrt();
            if norm > 1e-8 {
                for k in 0..dim {
                    m[i * dim + k] /= norm;
                }
                break;
            }
            for k in 0..dim {
                m[i * dim + k] = gaussian(&mut rng);
            }
        }
    }
    for v in &mut m {
        *v *= std::f64::consts::SQRT_2;
    }
    let data: Vec<f64> = if transposed {
        (0..rows * cols)
            .map(|idx| m[(idx % cols) * dim + idx / cols])
            .collect()
    } else {
        m
    };
    Ok(Tensor::from_values(shape, data)?)
}

/// 2-d convolution layer: `[out, in, kh, kw]` kernels plus per-channel bias.
#[derive(Debug, Clone)]
pub struct Conv2dLayer {
    pub weights: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

impl Conv2dLayer {
    pub fn new(
        weights: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<Self, LayerError> {
        if weights.rank() != 4 {
            return Err(LayerError::ConvWeightRank(weights.shape().to_vec()));
        }
        if bias.shape() != [weights.shape()[0]] {
            return Err(LayerError::ConvBiasShape {
                bias: bias.shape().to_vec(),
                out_channels: weights.shape()[0],
            });
        }
        if stride == 0 {
            return Err(LayerError::ZeroStride);
        }
        Ok(Conv2dLayer {
            weights,
            bias,
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weights.shape()[1]
    }

    /// Registers the parameters on the tape and applies the convolution.
    /// Call at most once per tape, or gradient lookups will target the most
    /// recent registration only.
    pub fn forward(&mut self, tape: &mut Tape, x: NodeId) -> Result<NodeId, LayerError> {
        let w = tape.leaf(&mut self.weights);
        let b = tape.leaf(&mut self.bias);
        Ok(tape.conv2d(x, w, b, self.stride, self.padding)?)
    }
}

/// Fully connected layer with `[in, out]` weights, so rows of the input batch
/// multiply straight through without transposes.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weights: Tensor,
    pub bias: Tensor,
}

impl DenseLayer {
    pub fn new(weights: Tensor, bias: Tensor) -> Result<Self, LayerError> {
        if weights.rank() != 2 {
            return Err(LayerError::DenseWeightRank(weights.shape().to_vec()));
        }
        if bias.shape() != [weights.shape()[1]] {
            return Err(LayerError::DenseBiasShape {
                bias: bias.shape().to_vec(),
                outputs: weights.shape()[1],
            });
        }
        Ok(DenseLayer { weights, bias })
    }

    pub fn input_dim(&self) -> usize {
        self.weights.shape()[0]
    }

    pub fn output_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    /// `x` must be `[batch, input_dim]`. Bias is tiled explicitly; there is
    /// no implicit broadcasting anywhere on the tape. Call at most once per
    /// tape.
    pub fn forward(&mut self, tape: &mut Tape, x: NodeId) -> Result<NodeId, LayerError> {
        let rows = tape.shape(x)?[0];
        let w = tape.leaf(&mut self.weights);
        let b = tape.leaf(&mut self.bias);
        let prod = tape.matmul(x, w)?;
        let tiled = tape.tile_rows(b, rows)?;
        Ok(tape.add(prod, tiled)?)
    }
}

/// Mean softmax cross-entropy over `[batch, 2]` logits against 0/1 labels.
/// Class 0 is "no", class 1 is "yes".
pub fn softmax_cross_entropy(
    tape: &mut Tape,
    logits: NodeId,
    labels: &[usize],
) -> Result<NodeId, LayerError> {
    let shape = tape.shape(logits)?.to_vec();
    if shape.len() != 2 || shape[1] != 2 {
        return Err(LayerError::NotTwoClass(shape));
    }
    for &l in labels {
        if l > 1 {
            return Err(LayerError::BadLabel(l));
        }
    }
    Ok(tape.softmax_cross_entropy(logits, labels, Reduction::Mean)?)
}

/// Numerically stable softmax of one logit row.
pub fn softmax_row(row: &[f64]) -> Vec<f64> {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &v| a.max(v));
    let exps: Vec<f64> = row.iter().map(|&v| (v - m).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

const CONTAINER_MAGIC: &[u8; 4] = b"VTM1";
const CONTAINER_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ContainerError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("bad magic: not a VTM1 container")]
    BadMagic,
    #[error("unsupported container version {0}")]
    UnsupportedVersion(u32),
    #[error("corrupt container: {0}")]
    Corrupt(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Writes named tensors to a `VTM1` container.
///
/// Layout, all little-endian: magic `VTM1`, u32 version, u32 entry count,
/// then per entry a u16 name length, UTF-8 name, u8 rank, u32 dims, and the
/// row-major f64 values.
pub fn save_tensors(path: &Path, entries: &[(&str, &Tensor)]) -> Result<(), ContainerError> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(CONTAINER_MAGIC)?;
    w.write_all(&CONTAINER_VERSION.to_le_bytes())?;
    w.write_all(&(entries.len() as u32).to_le_bytes())?;
    for (name, tensor) in entries {
        let bytes = name.as_bytes();
        if bytes.is_empty() || bytes.len() > u16::MAX as usize {
            return Err(ContainerError::Corrupt(format!(
                "entry name length {} out of range",
                bytes.len()
            )));
        }
        w.write_all(&(bytes.len() as u16).to_le_bytes())?;
        w.write_all(bytes)?;
        w.write_all(&[tensor.rank() as u8])?;
        for &d in tensor.shape() {
            w.write_all(&(d as u32).to_le_bytes())?;
        }
        for &v in tensor.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_corrupt(r: &mut impl Read, buf: &mut [u8]) -> Result<(), ContainerError> {
    r.read_exact(buf).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            ContainerError::Corrupt("unexpected end of file".into())
        } else {
            ContainerError::Io(e)
        }
    })
}

fn read_u32(r: &mut impl Read) -> Result<u32, ContainerError> {
    let mut b = [0u8; 4];
    read_exact_or_corrupt(r, &mut b)?;
    Ok(u32::from_le_bytes(b))
}

/// Reads a `VTM1` container back, preserving entry order.
pub fn load_tensors(path: &Path) -> Result<Vec<(String, Tensor)>, ContainerError> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    read_exact_or_corrupt(&mut r, &mut magic)?;
    if &magic != CONTAINER_MAGIC {
        return Err(ContainerError::BadMagic);
    }
    let version = read_u32(&mut r)?;
    if version != CONTAINER_VERSION {
        return Err(ContainerError::UnsupportedVersion(version));
    }
    let count = read_u32(&mut r)? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let mut len2 = [0u8; 2];
        read_exact_or_corrupt(&mut r, &mut len2)?;
        let name_len = u16::from_le_bytes(len2) as usize;
        if name_len == 0 {
            return Err(ContainerError::Corrupt("empty entry name".into()));
        }
        let mut name_bytes = vec![0u8; name_len];
        read_exact_or_corrupt(&mut r, &mut name_bytes)?;
        let name = String::from_utf8(name_bytes)
            .map_err(|_| ContainerError::Corrupt("entry name is not UTF-8".into()))?;
        let mut rank = [0u8; 1];
        read_exact_or_corrupt(&mut r, &mut rank)?;
        let mut shape = Vec::with_capacity(rank[0] as usize);
        for _ in 0..rank[0] {
            shape.push(read_u32(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        let mut b8 = [0u8; 8];
        for _ in 0..n {
            read_exact_or_corrupt(&mut r, &mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        entries.push((name, Tensor::from_values(&shape, data)?));
    }
    // Trailing garbage means the writer and reader disagree about layout.
    let mut extra = [0u8; 1];
    match r.read(&mut extra)? {
        0 => Ok(entries),
        _ => Err(ContainerError::Corrupt("trailing bytes after entries".into())),
    }
}
