//! TVLM checkpoint format.
//!
//! Layout: magic `TVLM`, u32 format version, length-prefixed JSON config
//! block, then a tensor table of (name, shape, raw little-endian f32 data)
//! entries. Round-trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::weights::{LayerWeights, Mat, ModelWeights};
use super::{Model, ModelConfig, Result, VlmError};

const MAGIC: &[u8; 4] = b"TVLM";
const VERSION: u32 = 1;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> VlmError + '_ {
    move |source| VlmError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn save(path: &Path, model: &Model) -> Result<()> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut w = BufWriter::new(file);
    let mut write = |bytes: &[u8]| w.write_all(bytes).map_err(io_err(path));

    write(MAGIC)?;
    write(&VERSION.to_le_bytes())?;
    let config_json = serde_json::to_vec(&model.config).expect("config serializes");
    write(&(config_json.len() as u32).to_le_bytes())?;
    write(&config_json)?;

    let params = model.weights.named_params();
    write(&(params.len() as u32).to_le_bytes())?;
    for (name, mat) in params {
        let name_bytes = name.as_bytes();
        write(&(name_bytes.len() as u16).to_le_bytes())?;
        write(name_bytes)?;
        write(&[mat.shape.len() as u8])?;
        for &d in &mat.shape {
            write(&(d as u32).to_le_bytes())?;
        }
        for &v in &mat.data {
            write(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load(path: &Path) -> Result<Model> {
    let file = File::open(path).map_err(io_err(path))?;
    let mut r = BufReader::new(file);

    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(io_err(path))?;
    if &magic != MAGIC {
        return Err(VlmError::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            magic, MAGIC
        )));
    }
    let version = read_u32(&mut r, path)?;
    if version != VERSION {
        return Err(VlmError::Checkpoint(format!(
            "unsupported version {version}"
        )));
    }
    let config_len = read_u32(&mut r, path)? as usize;
    let mut config_json = vec![0u8; config_len];
    r.read_exact(&mut config_json).map_err(io_err(path))?;
    let config: ModelConfig = serde_json::from_slice(&config_json)
        .map_err(|e| VlmError::Checkpoint(format!("config block: {e}")))?;
    config.validate()?;

    let n_tensors = read_u32(&mut r, path)? as usize;
    let mut mats: Vec<(String, Mat)> = Vec::with_capacity(n_tensors);
    for _ in 0..n_tensors {
        let mut len2 = [0u8; 2];
        r.read_exact(&mut len2).map_err(io_err(path))?;
        let name_len = u16::from_le_bytes(len2) as usize;
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name).map_err(io_err(path))?;
        let name = String::from_utf8(name)
            .map_err(|e| VlmError::Checkpoint(format!("tensor name: {e}")))?;
        let mut ndim = [0u8; 1];
        r.read_exact(&mut ndim).map_err(io_err(path))?;
        let mut shape = Vec::with_capacity(ndim[0] as usize);
        for _ in 0..ndim[0] {
            shape.push(read_u32(&mut r, path)? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut raw = vec![0u8; numel * 4];
        r.read_exact(&mut raw).map_err(io_err(path))?;
        let data: Vec<f32> = raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        mats.push((name, Mat { data, shape }));
    }

    let weights = assemble(&config, mats)?;
    Model::new(config, weights)
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(io_err(path))?;
    Ok(u32::from_le_bytes(b))
}

fn assemble(config: &ModelConfig, mats: Vec<(String, Mat)>) -> Result<ModelWeights> {
    let take = |name: &str| -> Result<Mat> {
        mats.iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m.clone())
            .ok_or_else(|| VlmError::Checkpoint(format!("missing tensor {name}")))
    };
    let mut layers = Vec::with_capacity(config.n_layers);
    for i in 0..config.n_layers {
        layers.push(LayerWeights {
            ln1_g: take(&format!("layer{i}.ln1_g"))?,
            ln1_b: take(&format!("layer{i}.ln1_b"))?,
            w_qkv: take(&format!("layer{i}.w_qkv"))?,
            w_o: take(&format!("layer{i}.w_o"))?,
            ln2_g: take(&format!("layer{i}.ln2_g"))?,
            ln2_b: take(&format!("layer{i}.ln2_b"))?,
            w_ff1: take(&format!("layer{i}.w_ff1"))?,
            w_ff2: take(&format!("layer{i}.w_ff2"))?,
        });
    }
    let weights = ModelWeights {
        tok_embed: take("tok_embed")?,
        pos_embed: take("pos_embed")?,
        patch_proj: take("patch_proj")?,
        layers,
        lnf_g: take("lnf_g")?,
        lnf_b: take("lnf_b")?,
        w_out: take("w_out")?,
    };
    for (name, mat) in weights.named_params() {
        let numel: usize = mat.shape.iter().product();
        if numel != mat.data.len() {
            return Err(VlmError::Checkpoint(format!(
                "tensor {name}: shape {:?} does not match data length {}",
                mat.shape,
                mat.data.len()
            )));
        }
    }
    Ok(weights)
}
