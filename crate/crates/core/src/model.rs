//! Multilayer perceptrons and their checkpoint format.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"VRMCKPT1"
//! u64 metadata length in bytes
//! metadata: u32 width count, u32 widths..., u8 activation (0 relu, 1 tanh),
//!           u64 seed, u32 epoch
//! per layer, in order: weight [in, out] then bias [out], as f64
//! ```

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"VRMCKPT1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn code(self) -> u8 {
        match self {
            Activation::Relu => 0,
            Activation::Tanh => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(Activation::Relu),
            1 => Ok(Activation::Tanh),
            c => Err(Error::Format(format!("unknown activation code {c}"))),
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "tanh" => Ok(Activation::Tanh),
            other => Err(Error::Parameter(format!("unknown activation {other:?}"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        }
    }
}

/// Architecture: input width, one or more hidden widths, then the class count.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MlpSpec {
    pub layer_widths: Vec<usize>,
    pub activation: Activation,
    pub seed: u64,
}

impl MlpSpec {
    pub fn new(input: usize, hidden: &[usize], classes: usize, activation: Activation, seed: u64) -> Self {
        let mut layer_widths = vec![input];
        layer_widths.extend_from_slice(hidden);
        layer_widths.push(classes);
        MlpSpec {
            layer_widths,
            activation,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_widths.len() < 3 {
            return Err(Error::Parameter("an MLP needs at least one hidden layer".into()));
        }
        if self.layer_widths.iter().any(|&w| w == 0) {
            return Err(Error::Parameter("layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_widths[0]
    }

    pub fn classes(&self) -> usize {
        *self.layer_widths.last().expect("validated widths")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    /// `[in, out]`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    layers: Vec<Layer>,
    /// Number of completed training epochs.
    pub epoch: u32,
}

/// Tape handles for every layer's weight and bias.
#[derive(Debug, Clone)]
pub struct MlpParams(pub Vec<(Var, Var)>);

impl Mlp {
    /// Gaussian fan-in initialization seeded from `spec.seed`; zero biases.
    pub fn new(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let gain = match spec.activation {
            Activation::Relu => 2.0,
            Activation::Tanh => 1.0,
        };
        let layers = spec
            .layer_widths
            .windows(2)
            .map(|w| {
                let std = (gain / w[0] as f64).sqrt();
                let weight = Tensor::randn(&[w[0], w[1]], &mut rng).map(|v| v * std);
                Layer {
                    weight,
                    bias: Tensor::zeros(&[w[1]]),
                }
            })
            .collect();
        Ok(Mlp {
            spec,
            layers,
            epoch: 0,
        })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    /// Registers every weight and bias on `tape` as a trainable leaf.
    pub fn register(&self, tape: &mut Tape) -> MlpParams {
        MlpParams(
            self.layers
                .iter()
                .map(|l| (tape.param(l.weight.clone()), tape.param(l.bias.clone())))
                .collect(),
        )
    }

    /// Forward pass of a `[B, D_in]` batch through registered parameters.
    pub fn forward(&self, tape: &mut Tape, params: &MlpParams, x: Var) -> Result<Var> {
        let mut h = x;
        let last = params.0.len() - 1;
        for (i, &(w, b)) in params.0.iter().enumerate() {
            let lin = tape.matmul(h, w)?;
            h = tape.add_bias(lin, b)?;
            if i < last {
                h = match self.spec.activation {
                    Activation::Relu => tape.relu(h),
                    Activation::Tanh => tape.tanh(h),
                };
            }
        }
        Ok(h)
    }

    /// Logits for a `[B, D_in]` batch, without recording gradients.
    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let params = MlpParams(
            self.layers
                .iter()
                .map(|l| (tape.constant(l.weight.clone()), tape.constant(l.bias.clone())))
                .collect(),
        );
        let input = tape.constant(x.clone());
        let out = self.forward(&mut tape, &params, input)?;
        Ok(tape.value(out).clone())
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(|l| l.weight.numel() + l.bias.numel()).sum()
    }

    /// FNV-1a over the raw bits of every parameter.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for l in &self.layers {
            for v in l.weight.data().iter().chain(l.bias.data()) {
                for byte in v.to_bits().to_le_bytes() {
                    h ^= u64::from(byte);
                    h = h.wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        h
    }

    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let mut meta = Vec::new();
        meta.extend_from_slice(&(self.spec.layer_widths.len() as u32).to_le_bytes());
        for &width in &self.spec.layer_widths {
            meta.extend_from_slice(&(width as u32).to_le_bytes());
        }
        meta.push(self.spec.activation.code());
        meta.extend_from_slice(&self.spec.seed.to_le_bytes());
        meta.extend_from_slice(&self.epoch.to_le_bytes());

        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(&meta)?;
        for l in &self.layers {
            for v in l.weight.data().iter().chain(l.bias.data()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(mut r: R) -> Result<Self> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::Format("not a VRMCKPT1 checkpoint".into()));
        }
        let meta_len = read_u64(&mut r)? as usize;
        let mut meta = vec![0u8; meta_len];
        r.read_exact(&mut meta)?;
        let mut m = meta.as_slice();
        let count = read_u32(&mut m)? as usize;
        let widths = (0..count)
            .map(|_| read_u32(&mut m).map(|v| v as usize))
            .collect::<Result<Vec<_>>>()?;
        let mut code = [0u8; 1];
        m.read_exact(&mut code)?;
        let activation = Activation::from_code(code[0])?;
        let seed = read_u64(&mut m)?;
        let epoch = read_u32(&mut m)?;
        if !m.is_empty() {
            return Err(Error::Format("trailing bytes in checkpoint metadata".into()));
        }
        let spec = MlpSpec {
            layer_widths: widths,
            activation,
            seed,
        };
        spec.validate().map_err(|e| Error::Format(e.to_string()))?;
        let mut layers = Vec::new();
        for w in spec.layer_widths.windows(2) {
            let weight = Tensor::new(vec![w[0], w[1]], read_f64s(&mut r, w[0] * w[1])?)?;
            let bias = Tensor::new(vec![w[1]], read_f64s(&mut r, w[1])?)?;
            layers.push(Layer { weight, bias });
        }
        let mut rest = [0u8; 1];
        if r.read(&mut rest)? != 0 {
            return Err(Error::Format("trailing bytes after checkpoint weights".into()));
        }
        Ok(Mlp { spec, layers, epoch })
    }
}

pub(crate) fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_f64s<R: Read>(r: &mut R, n: usize) -> Result<Vec<f64>> {
    let mut buf = vec![0u8; n * 8];
    r.read_exact(&mut buf)?;
    Ok(buf
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect())
}
