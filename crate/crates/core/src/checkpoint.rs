//! `MCK1` checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "MCK1" u32 version
//! u32 len, canonical config text
//! u32 epoch
//! u32 count, then count x (u32 len, name, MGT1 tensor)    parameters
//! u64 adam step, u32 count, count x (name, MGT1 tensor)   moments
//! [u8; 32] chacha seed, u64 stream, u64 word_pos lo, u64 word_pos hi
//! ```
//!
//! Parameter names are `student.<block>` and `teacher.<block>`, moment names
//! `adam.m.<block>` and `adam.v.<block>`. Encoding is a pure function of the
//! state, so identical training runs give identical files.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::model::{ModelDims, Params, BLOCK_NAMES, NUM_BLOCKS};
use crate::tensor_io::{decode_mgt1_from, encode_mgt1, put_string, put_u32, put_u64, write_atomic, ByteReader, Tensor};
use crate::train::{AdamState, ModelState};

pub const MCK1_MAGIC: &[u8; 4] = b"MCK1";
pub const MCK1_VERSION: u32 = 1;

fn put_named(out: &mut Vec<u8>, name: &str, dims: Vec<usize>, data: &[f32]) {
    put_string(out, name);
    encode_mgt1(
        &Tensor {
            dims,
            data: data.to_vec(),
        },
        out,
    );
}

pub fn encode_checkpoint(state: &ModelState) -> Vec<u8> {
    let dims = state.student.dims;
    let mut out = Vec::new();
    out.extend_from_slice(MCK1_MAGIC);
    put_u32(&mut out, MCK1_VERSION);
    put_string(&mut out, &state.config.to_cfg());
    put_u32(&mut out, state.epoch);

    put_u32(&mut out, 2 * NUM_BLOCKS as u32);
    for (role, params) in [("student", &state.student), ("teacher", &state.teacher)] {
        for (b, name) in BLOCK_NAMES.iter().enumerate() {
            put_named(
                &mut out,
                &format!("{role}.{name}"),
                dims.block_shape(b),
                &params.blocks[b],
            );
        }
    }

    put_u64(&mut out, state.opt.step);
    put_u32(&mut out, 2 * NUM_BLOCKS as u32);
    for (kind, moments) in [("m", &state.opt.m), ("v", &state.opt.v)] {
        for (b, name) in BLOCK_NAMES.iter().enumerate() {
            put_named(
                &mut out,
                &format!("adam.{kind}.{name}"),
                dims.block_shape(b),
                &moments[b],
            );
        }
    }

    out.extend_from_slice(&state.rng.get_seed());
    put_u64(&mut out, state.rng.get_stream());
    let pos = state.rng.get_word_pos();
    put_u64(&mut out, pos as u64);
    put_u64(&mut out, (pos >> 64) as u64);
    out
}

fn read_blocks(r: &mut ByteReader<'_>, prefix: &[&str], dims: &ModelDims) -> Result<Vec<Vec<Vec<f32>>>> {
    let count = r.u32("tensor count")? as usize;
    if count != prefix.len() * NUM_BLOCKS {
        return Err(Error::format(
            r.offset() - 4,
            format!("expected {} tensors, found {count}", prefix.len() * NUM_BLOCKS),
        ));
    }
    let mut out = Vec::with_capacity(prefix.len());
    for p in prefix {
        let mut blocks = Vec::with_capacity(NUM_BLOCKS);
        for (b, name) in BLOCK_NAMES.iter().enumerate() {
            let at = r.offset();
            let got = r.string("tensor name")?;
            let want = format!("{p}.{name}");
            if got != want {
                return Err(Error::format(at, format!("expected tensor `{want}`, found `{got}`")));
            }
            let at = r.offset();
            let t = decode_mgt1_from(r)?;
            if t.dims != dims.block_shape(b) {
                return Err(Error::format(
                    at,
                    format!(
                        "tensor `{want}` has shape {:?}, config implies {:?}",
                        t.dims,
                        dims.block_shape(b)
                    ),
                ));
            }
            blocks.push(t.data);
        }
        out.push(blocks);
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelState> {
    let mut r = ByteReader::new(bytes);
    r.magic(MCK1_MAGIC)?;
    let at = r.offset();
    let version = r.u32("version")?;
    if version != MCK1_VERSION {
        return Err(Error::format(at, format!("unsupported checkpoint version {version}")));
    }
    let config = TrainConfig::parse(&r.string("config")?)?;
    let dims = config.dims();
    let epoch = r.u32("epoch")?;

    let mut params = read_blocks(&mut r, &["student", "teacher"], &dims)?;
    let teacher = Params {
        dims,
        blocks: params.pop().expect("two roles"),
    };
    let student = Params {
        dims,
        blocks: params.pop().expect("two roles"),
    };

    let step = r.u64("adam step")?;
    let mut moments = read_blocks(&mut r, &["adam.m", "adam.v"], &dims)?;
    let v = moments.pop().expect("two moments");
    let m = moments.pop().expect("two moments");

    let mut seed = [0u8; 32];
    seed.copy_from_slice(r.take(32, "rng seed")?);
    let stream = r.u64("rng stream")?;
    let lo = r.u64("rng position")? as u128;
    let hi = r.u64("rng position")? as u128;
    r.finish("rng state")?;
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(stream);
    rng.set_word_pos(lo | (hi << 64));

    Ok(ModelState {
        config,
        student,
        teacher,
        opt: AdamState { step, m, v },
        rng,
        epoch,
    })
}

pub fn save_checkpoint(path: &Path, state: &ModelState) -> Result<()> {
    write_atomic(path, &encode_checkpoint(state))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    decode_checkpoint(&fs::read(path)?)
}
