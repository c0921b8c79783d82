//! Named-tensor archive.
//!
//! ```text
//! SCICORE-CKPT 1
//! @<key>\t<value>            (optional metadata lines)
//! <name>\t<d0>x<d1>...\tf64  (one manifest line per tensor)
//! END
//! <little-endian f64 payloads, in manifest order>
//! ```

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::TensorError;
use crate::params::ParamStore;
use crate::tensor::Tensor;

const MAGIC: &str = "SCICORE-CKPT 1";

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub metadata: BTreeMap<String, String>,
}

fn ck(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn write_checkpoint<W: Write>(out: &mut W, ckpt: &Checkpoint) -> Result<(), TensorError> {
    let io = |e: std::io::Error| ck(e.to_string());
    let mut header = String::new();
    header.push_str(MAGIC);
    header.push('\n');
    for (k, v) in &ckpt.metadata {
        if k.contains(['\t', '\n']) || v.contains('\n') {
            return Err(ck(format!("metadata entry `{k}` contains a separator")));
        }
        header.push_str(&format!("@{k}\t{v}\n"));
    }
    for (name, t) in ckpt.params.iter() {
        if name.contains(['\t', '\n']) || name.starts_with('@') || name == "END" {
            return Err(ck(format!("invalid tensor name `{name}`")));
        }
        let dims: Vec<String> = t.shape().iter().map(usize::to_string).collect();
        header.push_str(&format!("{name}\t{}\tf64\n", dims.join("x")));
    }
    header.push_str("END\n");
    out.write_all(header.as_bytes()).map_err(io)?;
    for (_, t) in ckpt.params.iter() {
        let mut buf = Vec::with_capacity(t.len() * 8);
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        out.write_all(&buf).map_err(io)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: BufRead>(input: &mut R) -> Result<Checkpoint, TensorError> {
    let io = |e: std::io::Error| ck(e.to_string());
    let mut line = String::new();
    input.read_line(&mut line).map_err(io)?;
    if line.trim_end() != MAGIC {
        return Err(ck("missing header"));
    }
    let mut manifest: Vec<(String, Vec<usize>)> = Vec::new();
    let mut metadata = BTreeMap::new();
    loop {
        line.clear();
        if input.read_line(&mut line).map_err(io)? == 0 {
            return Err(ck("manifest not terminated by END"));
        }
        let l = line.trim_end_matches('\n');
        if l == "END" {
            break;
        }
        if let Some(meta) = l.strip_prefix('@') {
            let (k, v) = meta.split_once('\t').ok_or_else(|| ck(format!("bad metadata line `{l}`")))?;
            metadata.insert(k.to_string(), v.to_string());
            continue;
        }
        let fields: Vec<&str> = l.split('\t').collect();
        let [name, dims, dtype] = fields.as_slice() else {
            return Err(ck(format!("bad manifest line `{l}`")));
        };
        if *dtype != "f64" {
            return Err(ck(format!("unsupported dtype `{dtype}`")));
        }
        let shape = dims
            .split('x')
            .map(|d| d.parse::<usize>().map_err(|_| ck(format!("bad shape `{dims}`"))))
            .collect::<Result<Vec<_>, _>>()?;
        manifest.push((name.to_string(), shape));
    }
    let mut params = ParamStore::new();
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        let mut bytes = vec![0u8; n * 8];
        input
            .read_exact(&mut bytes)
            .map_err(|_| ck(format!("truncated payload for `{name}`")))?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap_or([0; 8])))
            .collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    let mut rest = Vec::new();
    input.read_to_end(&mut rest).map_err(io)?;
    if !rest.is_empty() {
        return Err(ck("trailing bytes after payload"));
    }
    Ok(Checkpoint { params, metadata })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), TensorError> {
    let file = std::fs::File::create(path).map_err(|e| ck(format!("{}: {e}", path.display())))?;
    let mut w = std::io::BufWriter::new(file);
    write_checkpoint(&mut w, ckpt)?;
    w.flush().map_err(|e| ck(e.to_string()))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TensorError> {
    let file = std::fs::File::open(path).map_err(|e| ck(format!("{}: {e}", path.display())))?;
    read_checkpoint(&mut std::io::BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let mut params = ParamStore::new();
        params.insert("gvp.w", Tensor::matrix(2, 3, vec![1.0, -0.0, f64::MIN_POSITIVE, 3.5, 1e300, -2.25]).unwrap());
        params.insert("ae.b", Tensor::new(vec![4], vec![0.1, 0.2, 0.3, 0.4]).unwrap());
        let ckpt = Checkpoint {
            params,
            metadata: BTreeMap::from([("stage".to_string(), "2-joint".to_string())]),
        };
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &ckpt).unwrap();
        let text_end = buf.windows(4).position(|w| w == b"END\n").unwrap();
        let header = std::str::from_utf8(&buf[..text_end]).unwrap();
        assert!(header.contains("ae.b\t4\tf64"));
        assert!(header.contains("gvp.w\t2x3\tf64"));
        let back = read_checkpoint(&mut buf.as_slice()).unwrap();
        assert_eq!(back, ckpt);
    }

    #[test]
    fn truncated_payload_rejected() {
        let mut params = ParamStore::new();
        params.insert("x", Tensor::row(vec![1.0, 2.0]));
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, &Checkpoint { params, metadata: BTreeMap::new() }).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(read_checkpoint(&mut buf.as_slice()).is_err());
    }
}
