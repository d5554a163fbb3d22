//! Self-describing checkpoint container: versioned magic header, a JSON
//! metadata block (model configuration), then named parameter tensors with
//! raw little-endian f64 payloads. Round trips are bit-exact.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{ParamGroup, ParamSet, Tensor};
use crate::error::{CoreError, Result};

const MAGIC: &[u8; 8] = b"RSCKPT01";
const VERSION: u32 = 1;

pub fn save_checkpoint(path: &Path, params: &ParamSet, meta: &serde_json::Value) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let meta_bytes = serde_json::to_vec(meta).map_err(|e| CoreError::Format(e.to_string()))?;
    out.extend_from_slice(&(meta_bytes.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_bytes);
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        let name = p.name.as_bytes();
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(match p.group {
            ParamGroup::Backbone => 0,
            ParamGroup::Head => 1,
            ParamGroup::Adapter => 2,
        });
        out.push(u8::from(p.decay));
        out.push(u8::from(p.tensor.requires_grad));
        out.push(p.tensor.shape.len() as u8);
        for dim in &p.tensor.shape {
            out.extend_from_slice(&(*dim as u32).to_le_bytes());
        }
        for v in &p.tensor.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(ParamSet, serde_json::Value)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut cur = Cursor { bytes: &bytes, pos: 0 };

    if cur.take(8)? != MAGIC {
        return Err(CoreError::Format("bad checkpoint magic".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(CoreError::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta_len = cur.u32()? as usize;
    let meta: serde_json::Value = serde_json::from_slice(cur.take(meta_len)?)
        .map_err(|e| CoreError::Format(format!("bad checkpoint metadata: {e}")))?;
    let n_tensors = cur.u32()? as usize;

    let mut params = ParamSet::new();
    for _ in 0..n_tensors {
        let name_len = cur.u16()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|e| CoreError::Format(e.to_string()))?;
        let group = match cur.u8()? {
            0 => ParamGroup::Backbone,
            1 => ParamGroup::Head,
            2 => ParamGroup::Adapter,
            g => return Err(CoreError::Format(format!("unknown parameter group {g}"))),
        };
        let decay = cur.u8()? != 0;
        let requires_grad = cur.u8()? != 0;
        let ndim = cur.u8()? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(numel * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        let mut tensor = Tensor::new(shape, data)?;
        tensor.requires_grad = requires_grad;
        params.register(name, tensor, group, decay);
    }
    Ok((params, meta))
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CoreError::Format("checkpoint truncated".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{PatchConfig, SpaceTimeModel};

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let cfg = PatchConfig { p: 8, d: 8, h: 16, w: 16, t: 2, n_heads: 2, l: 1, ff_expansion: 2 };
        let model = SpaceTimeModel::new(cfg, [0.1, 0.2, 0.3, 0.4], 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model.params, &serde_json::to_value(cfg).unwrap()).unwrap();

        let (params, meta) = load_checkpoint(&path).unwrap();
        let cfg_back: PatchConfig = serde_json::from_value(meta).unwrap();
        assert_eq!(cfg_back, cfg);
        assert!(params.bits_equal(&model.params));

        let reloaded = SpaceTimeModel::from_params(cfg_back, params).unwrap();
        let frames = crate::autodiff::Tensor::new(
            vec![2, 16, 16, 3],
            (0..2 * 16 * 16 * 3).map(|i| (i % 7) as f64 / 7.0).collect(),
        )
        .unwrap();
        let a = model.predict(&frames).unwrap();
        let b = reloaded.predict(&frames).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn corrupted_header_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"NOTACKPT").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
