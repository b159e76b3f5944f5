//! Versioned little-endian binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!   magic "GCABCKPT", version u32
//!   config TOML (u64 len + utf8), config hash (u64 len + utf8)
//!   precision u8 (0 = f32, 1 = f64), pfr_layers u32
//!   arch: image_h/image_w/channels/patch/embed_dim/heads/blocks as u64,
//!         mlp_ratio f64, classifier_layernorm u8, max_tasks u64
//!   head_class_counts (u64 count + u64 each), finalized_tasks u64
//!   cumulative masks: task_count u64, m_i tensor, m_2 tensor
//!   params map, prev_backbone (u8 flag + map)
//!   optimizer (u8 flag + lr f64 + step u64 + m map + v map)
//!   rng: 32-byte ChaCha8 seed + word position u128
//! Tensors are u64 rows + u64 cols + row-major f64s; maps are u64 count +
//! (u64 name len + utf8 + tensor) entries in sorted order.

use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::masks::CumulativeMasks;
use crate::optim::Adam;
use crate::state::CilState;
use crate::tensor::{Precision, Tensor};
use crate::vit::Arch;

const MAGIC: &[u8; 8] = b"GCABCKPT";
const VERSION: u32 = 1;

#[derive(Debug)]
pub struct Checkpoint {
    pub state: CilState,
    pub config_toml: String,
    pub config_hash: String,
    pub rng: ChaCha8Rng,
    pub optimizer: Option<Adam>,
}

pub(crate) fn write_string(w: &mut impl Write, s: &str) -> Result<()> {
    w.write_u64::<LittleEndian>(s.len() as u64)?;
    w.write_all(s.as_bytes())?;
    Ok(())
}

pub(crate) fn read_string(r: &mut impl Read) -> Result<String> {
    let len = r.read_u64::<LittleEndian>()? as usize;
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    String::from_utf8(buf).map_err(|e| Error::Checkpoint(format!("bad utf8: {e}")))
}

pub(crate) fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<()> {
    w.write_u64::<LittleEndian>(t.rows() as u64)?;
    w.write_u64::<LittleEndian>(t.cols() as u64)?;
    for &x in t.data() {
        w.write_f64::<LittleEndian>(x)?;
    }
    Ok(())
}

pub(crate) fn read_tensor(r: &mut impl Read) -> Result<Tensor> {
    let rows = r.read_u64::<LittleEndian>()? as usize;
    let cols = r.read_u64::<LittleEndian>()? as usize;
    let mut data = vec![0.0; rows * cols];
    for x in &mut data {
        *x = r.read_f64::<LittleEndian>()?;
    }
    Tensor::new(rows, cols, data)
}

pub(crate) fn write_map(w: &mut impl Write, m: &BTreeMap<String, Tensor>) -> Result<()> {
    w.write_u64::<LittleEndian>(m.len() as u64)?;
    for (name, t) in m {
        write_string(w, name)?;
        write_tensor(w, t)?;
    }
    Ok(())
}

pub(crate) fn read_map(r: &mut impl Read) -> Result<BTreeMap<String, Tensor>> {
    let n = r.read_u64::<LittleEndian>()? as usize;
    let mut m = BTreeMap::new();
    for _ in 0..n {
        let name = read_string(r)?;
        m.insert(name, read_tensor(r)?);
    }
    Ok(m)
}

pub fn save_checkpoint(
    path: &Path,
    state: &CilState,
    config_toml: &str,
    config_hash: &str,
    rng: &ChaCha8Rng,
    optimizer: Option<&Adam>,
) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    write_string(&mut w, config_toml)?;
    write_string(&mut w, config_hash)?;
    w.write_u8(match state.precision {
        Precision::F32 => 0,
        Precision::F64 => 1,
    })?;
    w.write_u32::<LittleEndian>(state.pfr_layers as u32)?;
    let a = &state.arch;
    for v in [a.image_h, a.image_w, a.channels, a.patch, a.embed_dim, a.heads, a.blocks] {
        w.write_u64::<LittleEndian>(v as u64)?;
    }
    w.write_f64::<LittleEndian>(a.mlp_ratio)?;
    w.write_u8(a.classifier_layernorm as u8)?;
    w.write_u64::<LittleEndian>(a.max_tasks as u64)?;
    w.write_u64::<LittleEndian>(state.head_class_counts.len() as u64)?;
    for &c in &state.head_class_counts {
        w.write_u64::<LittleEndian>(c as u64)?;
    }
    w.write_u64::<LittleEndian>(state.finalized_tasks as u64)?;
    w.write_u64::<LittleEndian>(state.cum.task_count as u64)?;
    write_tensor(&mut w, &state.cum.m_i)?;
    write_tensor(&mut w, &state.cum.m_2)?;
    write_map(&mut w, &state.params)?;
    match &state.prev_backbone {
        Some(bb) => {
            w.write_u8(1)?;
            write_map(&mut w, bb)?;
        }
        None => w.write_u8(0)?,
    }
    match optimizer {
        Some(opt) => {
            w.write_u8(1)?;
            w.write_f64::<LittleEndian>(opt.lr)?;
            w.write_u64::<LittleEndian>(opt.step_count)?;
            write_map(&mut w, &opt.m)?;
            write_map(&mut w, &opt.v)?;
        }
        None => w.write_u8(0)?,
    }
    w.write_all(rng.get_seed().as_ref())?;
    w.write_u128::<LittleEndian>(rng.get_word_pos())?;
    w.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Checkpoint(format!(
            "bad magic in {}: not a checkpoint file",
            path.display()
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (expected {VERSION})"
        )));
    }
    let config_toml = read_string(&mut r)?;
    let config_hash = read_string(&mut r)?;
    let precision = match r.read_u8()? {
        0 => Precision::F32,
        1 => Precision::F64,
        other => return Err(Error::Checkpoint(format!("bad precision tag {other}"))),
    };
    let pfr_layers = r.read_u32::<LittleEndian>()? as usize;
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = r.read_u64::<LittleEndian>()? as usize;
    }
    let mlp_ratio = r.read_f64::<LittleEndian>()?;
    let classifier_layernorm = r.read_u8()? != 0;
    let max_tasks = r.read_u64::<LittleEndian>()? as usize;
    let arch = Arch {
        image_h: dims[0],
        image_w: dims[1],
        channels: dims[2],
        patch: dims[3],
        embed_dim: dims[4],
        heads: dims[5],
        blocks: dims[6],
        mlp_ratio,
        classifier_layernorm,
        max_tasks,
    };
    let nheads = r.read_u64::<LittleEndian>()? as usize;
    let mut head_class_counts = Vec::with_capacity(nheads);
    for _ in 0..nheads {
        head_class_counts.push(r.read_u64::<LittleEndian>()? as usize);
    }
    let finalized_tasks = r.read_u64::<LittleEndian>()? as usize;
    let task_count = r.read_u64::<LittleEndian>()? as usize;
    let m_i = read_tensor(&mut r)?;
    let m_2 = read_tensor(&mut r)?;
    let params = read_map(&mut r)?;
    let prev_backbone = match r.read_u8()? {
        0 => None,
        _ => Some(read_map(&mut r)?),
    };
    let optimizer = match r.read_u8()? {
        0 => None,
        _ => {
            let lr = r.read_f64::<LittleEndian>()?;
            let step_count = r.read_u64::<LittleEndian>()?;
            let m = read_map(&mut r)?;
            let v = read_map(&mut r)?;
            let mut opt = Adam::new(lr);
            opt.step_count = step_count;
            opt.m = m;
            opt.v = v;
            Some(opt)
        }
    };
    let mut seed = [0u8; 32];
    r.read_exact(&mut seed)?;
    let word_pos = r.read_u128::<LittleEndian>()?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_word_pos(word_pos);
    let state = CilState {
        arch,
        precision,
        params,
        cum: CumulativeMasks {
            m_i,
            m_2,
            task_count,
        },
        head_class_counts,
        finalized_tasks,
        prev_backbone,
        pfr_layers,
    };
    Ok(Checkpoint {
        state,
        config_toml,
        config_hash,
        rng,
        optimizer,
    })
}
