//! Versioned binary agent checkpoints.
//!
//! Layout: magic `CLAB`, format version, channel tag and parameters,
//! architecture dims, then every parameter matrix (and the codebook with
//! its EMA state) as little-endian `f64`. Floats are written verbatim,
//! so a save/load cycle is bit-exact. Optimizer state is not part of the
//! checkpoint: a loaded agent communicates identically but restarts
//! training from fresh moments.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::agent::{Agent, AgentArch, ChannelKind};
use crate::error::{Error, Result};
use crate::numeric::{Activation, DenseLayer, DenseStack, Matrix};
use crate::quantizer::Codebook;

const MAGIC: &[u8; 4] = b"CLAB";
const VERSION: u32 = 1;

fn activation_tag(a: Activation) -> u8 {
    match a {
        Activation::Identity => 0,
        Activation::Relu => 1,
        Activation::Tanh => 2,
        Activation::Sigmoid => 3,
    }
}

fn activation_from(tag: u8, offset: u64) -> Result<Activation> {
    match tag {
        0 => Ok(Activation::Identity),
        1 => Ok(Activation::Relu),
        2 => Ok(Activation::Tanh),
        3 => Ok(Activation::Sigmoid),
        other => Err(Error::Parse {
            offset,
            message: format!("unknown activation tag {other}"),
        }),
    }
}

fn write_matrix<W: Write>(w: &mut W, m: &Matrix) -> Result<()> {
    w.write_u32::<LittleEndian>(m.rows() as u32)?;
    w.write_u32::<LittleEndian>(m.cols() as u32)?;
    for &v in m.data() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_matrix<R: Read>(r: &mut R) -> Result<Matrix> {
    let rows = r.read_u32::<LittleEndian>()? as usize;
    let cols = r.read_u32::<LittleEndian>()? as usize;
    let mut data = vec![0.0; rows * cols];
    for v in &mut data {
        *v = r.read_f64::<LittleEndian>()?;
    }
    Matrix::from_vec(rows, cols, data)
}

fn write_layer<W: Write>(w: &mut W, layer: &DenseLayer) -> Result<()> {
    w.write_u8(activation_tag(layer.activation()))?;
    write_matrix(w, layer.weights())?;
    w.write_u32::<LittleEndian>(layer.bias().len() as u32)?;
    for &v in layer.bias() {
        w.write_f64::<LittleEndian>(v)?;
    }
    Ok(())
}

fn read_layer<R: Read>(r: &mut R) -> Result<DenseLayer> {
    let activation = activation_from(r.read_u8()?, 0)?;
    let weights = read_matrix(r)?;
    let bias_len = r.read_u32::<LittleEndian>()? as usize;
    let mut bias = vec![0.0; bias_len];
    for v in &mut bias {
        *v = r.read_f64::<LittleEndian>()?;
    }
    DenseLayer::from_parts(weights, bias, activation)
}

fn write_stack<W: Write>(w: &mut W, stack: &DenseStack) -> Result<()> {
    w.write_u32::<LittleEndian>(stack.layers().len() as u32)?;
    for layer in stack.layers() {
        write_layer(w, layer)?;
    }
    Ok(())
}

fn read_stack<R: Read>(r: &mut R) -> Result<DenseStack> {
    let n = r.read_u32::<LittleEndian>()? as usize;
    let mut layers = Vec::with_capacity(n);
    for _ in 0..n {
        layers.push(read_layer(r)?);
    }
    DenseStack::new(layers)
}

fn channel_tag(channel: ChannelKind) -> (u8, u64, f64) {
    match channel {
        ChannelKind::Ae => (0, 0, 0.0),
        ChannelKind::Vq { tokens } => (1, tokens as u64, 0.0),
        ChannelKind::Vae { beta_kl } => (2, 0, beta_kl),
        ChannelKind::HybridSplit { tokens } => (3, tokens as u64, 0.0),
        ChannelKind::MaskContinuous => (4, 0, 0.0),
        ChannelKind::MaskDiscrete { tokens } => (5, tokens as u64, 0.0),
    }
}

fn channel_from(tag: u8, tokens: u64, beta_kl: f64) -> Result<ChannelKind> {
    Ok(match tag {
        0 => ChannelKind::Ae,
        1 => ChannelKind::Vq { tokens: tokens as usize },
        2 => ChannelKind::Vae { beta_kl },
        3 => ChannelKind::HybridSplit { tokens: tokens as usize },
        4 => ChannelKind::MaskContinuous,
        5 => ChannelKind::MaskDiscrete { tokens: tokens as usize },
        other => {
            return Err(Error::Parse {
                offset: 0,
                message: format!("unknown channel tag {other}"),
            })
        }
    })
}

/// Writes an agent checkpoint.
pub fn save_agent(agent: &Agent, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;

    let id = agent.id().as_bytes();
    w.write_u32::<LittleEndian>(id.len() as u32)?;
    w.write_all(id)?;

    let (tag, tokens, beta_kl) = channel_tag(agent.channel());
    w.write_u8(tag)?;
    w.write_u64::<LittleEndian>(tokens)?;
    w.write_f64::<LittleEndian>(beta_kl)?;

    let arch = agent.arch();
    w.write_u32::<LittleEndian>(arch.input_dim as u32)?;
    w.write_u32::<LittleEndian>(arch.hidden_dim as u32)?;
    w.write_u32::<LittleEndian>(arch.latent_dim as u32)?;
    w.write_u32::<LittleEndian>(arch.codebook_size as u32)?;
    w.write_f64::<LittleEndian>(arch.beta)?;
    w.write_f64::<LittleEndian>(arch.ema_decay)?;

    write_stack(&mut w, agent.encoder())?;
    write_stack(&mut w, agent.decoder())?;

    match agent.codebook() {
        Some(cb) => {
            w.write_u8(1)?;
            let (codes, counts, sums) = cb.state();
            write_matrix(&mut w, codes)?;
            w.write_u32::<LittleEndian>(counts.len() as u32)?;
            for &c in counts {
                w.write_f64::<LittleEndian>(c)?;
            }
            write_matrix(&mut w, sums)?;
        }
        None => w.write_u8(0)?,
    }
    match agent.vae_head_layers() {
        Some((mu, logvar)) => {
            w.write_u8(1)?;
            write_layer(&mut w, mu)?;
            write_layer(&mut w, logvar)?;
        }
        None => w.write_u8(0)?,
    }
    w.flush()?;
    Ok(())
}

/// Reads an agent checkpoint written by [`save_agent`].
pub fn load_agent(path: &Path) -> Result<Agent> {
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Parse {
            offset: 0,
            message: "not an agent checkpoint (bad magic)".into(),
        });
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Parse {
            offset: 4,
            message: format!("unsupported checkpoint version {version}"),
        });
    }

    let id_len = r.read_u32::<LittleEndian>()? as usize;
    let mut id_bytes = vec![0u8; id_len];
    r.read_exact(&mut id_bytes)?;
    let id = String::from_utf8(id_bytes).map_err(|_| Error::Parse {
        offset: 12,
        message: "agent id is not valid UTF-8".into(),
    })?;

    let tag = r.read_u8()?;
    let tokens = r.read_u64::<LittleEndian>()?;
    let beta_kl = r.read_f64::<LittleEndian>()?;
    let channel = channel_from(tag, tokens, beta_kl)?;

    let arch = AgentArch {
        input_dim: r.read_u32::<LittleEndian>()? as usize,
        hidden_dim: r.read_u32::<LittleEndian>()? as usize,
        latent_dim: r.read_u32::<LittleEndian>()? as usize,
        codebook_size: r.read_u32::<LittleEndian>()? as usize,
        beta: r.read_f64::<LittleEndian>()?,
        ema_decay: r.read_f64::<LittleEndian>()?,
    };

    let encoder = read_stack(&mut r)?;
    let decoder = read_stack(&mut r)?;

    let codebook = if r.read_u8()? == 1 {
        let codes = read_matrix(&mut r)?;
        let n = r.read_u32::<LittleEndian>()? as usize;
        let mut counts = vec![0.0; n];
        for c in &mut counts {
            *c = r.read_f64::<LittleEndian>()?;
        }
        let sums = read_matrix(&mut r)?;
        let mut cb = Codebook::from_codes(codes.clone());
        cb.set_state(codes, counts, sums);
        Some(cb)
    } else {
        None
    };
    let heads = if r.read_u8()? == 1 {
        Some((read_layer(&mut r)?, read_layer(&mut r)?))
    } else {
        None
    };

    // Rebuild through the constructor to get optimizer state and config
    // checks, then overwrite the freshly initialized parameters.
    let mut throwaway_rng = ChaCha8Rng::seed_from_u64(0);
    let mut agent = Agent::new(id, arch, channel, &mut throwaway_rng)?;
    *agent.encoder_mut() = encoder;
    *agent.decoder_mut() = decoder;
    match codebook {
        Some(cb) => agent.replace_codebook(Some(cb))?,
        None if agent.codebook().is_some() => {
            return Err(Error::Parse {
                offset: 0,
                message: "checkpoint is missing the codebook its channel requires".into(),
            })
        }
        None => {}
    }
    if let (Some((mu, logvar)), Some((dst_mu, dst_lv))) = (heads, agent.vae_head_layers_mut()) {
        *dst_mu = mu;
        *dst_lv = logvar;
    }
    Ok(agent)
}
