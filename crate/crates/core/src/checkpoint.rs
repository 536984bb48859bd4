//! Parameter checkpoint file.
//!
//! Layout (little-endian except the magic bytes):
//!   magic  b"DPN1"
//!   u32    format version (currently 1)
//!   u32    parameter count
//! then per parameter, in declaration order:
//!   u32    name length in bytes
//!   [u8]   UTF-8 name
//!   u32    rank
//!   [u32]  dims
//!   [f64]  row-major payload

use std::path::Path;

use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"DPN1";
const VERSION: u32 = 1;

pub fn save_params(path: &Path, params: &[(String, Tensor)]) -> Result<()> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, tensor) in params {
        let name_bytes = name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&(tensor.shape().len() as u32).to_le_bytes());
        for &d in tensor.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, out)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let slice = self
            .bytes
            .get(self.pos..self.pos + n)
            .ok_or_else(|| Error::Format("checkpoint truncated".into()))?;
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }
}

pub fn load_params(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = std::fs::read(path)?;
    let mut cur = Cursor {
        bytes: &bytes,
        pos: 0,
    };
    if cur.take(4)? != MAGIC {
        return Err(Error::Format("bad checkpoint magic (expected DPN1)".into()));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let count = cur.u32()? as usize;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = std::str::from_utf8(cur.take(name_len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u32()? as usize);
        }
        let numel: usize = shape.iter().product();
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(cur.f64()?);
        }
        params.push((name, Tensor::new(shape, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last parameter",
            bytes.len() - cur.pos
        )));
    }
    Ok(params)
}

/// Load a checkpoint into an existing graph; every stored parameter must
/// exist with a matching shape.
pub fn load_into_graph(graph: &mut Graph, path: &Path) -> Result<()> {
    for (name, tensor) in load_params(path)? {
        graph.set_param(&name, tensor)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tmp(tag: &str) -> std::path::PathBuf {
        let d = std::env::temp_dir().join(format!("dpn-ckpt-{tag}-{}", std::process::id()));
        std::fs::create_dir_all(&d).unwrap();
        d.join("params.bin")
    }

    #[test]
    fn round_trip_bit_exact() {
        let path = tmp("rt");
        let params = vec![
            (
                "w0".to_string(),
                Tensor::matrix(2, 3, vec![0.1, -2.5, 3e-17, 1e300, -0.0, 7.0]).unwrap(),
            ),
            ("b0".to_string(), Tensor::from_vec(vec![5.0])),
        ];
        save_params(&path, &params).unwrap();
        let back = load_params(&path).unwrap();
        assert_eq!(back.len(), 2);
        for ((n1, t1), (n2, t2)) in params.iter().zip(&back) {
            assert_eq!(n1, n2);
            assert_eq!(t1.shape(), t2.shape());
            let a: Vec<u64> = t1.data().iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = t2.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn header_layout_is_exact() {
        let path = tmp("hdr");
        let params = vec![("ab".to_string(), Tensor::from_vec(vec![1.0]))];
        save_params(&path, &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[0..4], b"DPN1");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[12..16].try_into().unwrap()), 2);
        assert_eq!(&bytes[16..18], b"ab");
        assert_eq!(u32::from_le_bytes(bytes[18..22].try_into().unwrap()), 1); // rank
        assert_eq!(u32::from_le_bytes(bytes[22..26].try_into().unwrap()), 1); // dim
        assert_eq!(f64::from_le_bytes(bytes[26..34].try_into().unwrap()), 1.0);
        assert_eq!(bytes.len(), 34);
    }

    #[test]
    fn corrupt_files_rejected() {
        let path = tmp("bad");
        std::fs::write(&path, b"NOPE").unwrap();
        assert!(load_params(&path).is_err());

        // valid header, truncated payload
        let params = vec![("w".to_string(), Tensor::from_vec(vec![1.0, 2.0]))];
        save_params(&path, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_params(&path).is_err());

        // trailing garbage
        save_params(&path, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.push(0);
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_params(&path).is_err());
    }

    #[test]
    fn load_into_graph_checks_names_and_shapes() {
        let path = tmp("graph");
        let mut g = Graph::new();
        g.param("w", Tensor::from_vec(vec![0.0, 0.0])).unwrap();
        save_params(&path, &[("w".to_string(), Tensor::from_vec(vec![4.0, 5.0]))]).unwrap();
        load_into_graph(&mut g, &path).unwrap();
        assert_eq!(g.param_value("w").unwrap().data(), &[4.0, 5.0]);

        save_params(&path, &[("v".to_string(), Tensor::from_vec(vec![1.0]))]).unwrap();
        assert!(load_into_graph(&mut g, &path).is_err());

        save_params(&path, &[("w".to_string(), Tensor::from_vec(vec![1.0]))]).unwrap();
        assert!(load_into_graph(&mut g, &path).is_err());
    }
}
