//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"DGPN" | u32 version | u64 header length | header (UTF-8) | payload
//! ```
//!
//! The header is one `key value...` entry per line:
//!
//! ```text
//! config.channels 16
//! fused 0
//! meta.seed 0
//! param head.kernel.vconv 16x3x3x3 0 432
//! centers head 391572...
//! adam.step 12
//! ```
//!
//! `param` gives name, shape, element offset and length into the payload,
//! which is a flat array of `f32`. Optimizer moments are stored as params
//! named `adam.m.<name>` and `adam.v.<name>`.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use crate::dgconv::IdgCenters;
use crate::error::{Error, Result};
use crate::fsio::{read_file, write_atomic};
use crate::network::{DgpNetConfig, DgpNetParams, FusedDgpNet};
use crate::params::Parameterized;

use super::AdamState;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"DGPN";

#[derive(Clone, Debug, PartialEq)]
pub enum StoredNet {
    Branched(DgpNetParams<f32>),
    Fused(FusedDgpNet<f32>),
}

impl StoredNet {
    pub fn config(&self) -> DgpNetConfig {
        match self {
            StoredNet::Branched(n) => n.config,
            StoredNet::Fused(n) => n.config,
        }
    }

    pub fn is_fused(&self) -> bool {
        matches!(self, StoredNet::Fused(_))
    }

    pub fn param_count(&self) -> usize {
        match self {
            StoredNet::Branched(n) => n.param_count(),
            StoredNet::Fused(n) => n.param_count(),
        }
    }

    pub fn branched(&self) -> Result<&DgpNetParams<f32>> {
        match self {
            StoredNet::Branched(n) => Ok(n),
            StoredNet::Fused(_) => Err(Error::AlreadyFused),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub net: StoredNet,
    pub adam: Option<AdamState<f32>>,
    /// Free-form echo of the settings that produced the checkpoint.
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(net: StoredNet) -> Self {
        Self {
            net,
            adam: None,
            meta: BTreeMap::new(),
        }
    }
}

fn shape_str(shape: &[usize]) -> String {
    shape
        .iter()
        .map(|d| d.to_string())
        .collect::<Vec<_>>()
        .join("x")
}

pub fn encode_checkpoint(ckpt: &Checkpoint) -> Result<Vec<u8>> {
    let cfg = ckpt.net.config();
    let mut header = String::new();
    header += &format!("config.channels {}\n", cfg.channels);
    header += &format!("config.n_block {}\n", cfg.n_block);
    header += &format!("config.scale {}\n", cfg.scale);
    header += &format!("config.in_channels {}\n", cfg.in_channels);
    header += &format!("fused {}\n", ckpt.net.is_fused() as u8);
    for (k, v) in &ckpt.meta {
        if k.contains(char::is_whitespace) || v.contains('\n') {
            return Err(Error::InvalidArgument(format!("checkpoint meta entry {k:?}")));
        }
        header += &format!("meta.{k} {v}\n");
    }

    let mut payload: Vec<f32> = Vec::new();
    let mut add = |header: &mut String, name: &str, shape: &[usize], data: &[f32]| {
        *header += &format!(
            "param {name} {} {} {}\n",
            shape_str(shape),
            payload.len(),
            data.len()
        );
        payload.extend_from_slice(data);
    };
    let params = match &ckpt.net {
        StoredNet::Branched(n) => n.params(),
        StoredNet::Fused(n) => n.params(),
    };
    for p in &params {
        add(&mut header, &p.name, &p.shape, p.data);
    }
    if let Some(st) = &ckpt.adam {
        if st.m.len() != params.len() || st.v.len() != params.len() {
            return Err(Error::InvalidArgument("optimizer state does not match network".into()));
        }
        header += &format!("adam.step {}\n", st.step);
        for (p, m) in params.iter().zip(&st.m) {
            add(&mut header, &format!("adam.m.{}", p.name), &p.shape, m);
        }
        for (p, v) in params.iter().zip(&st.v) {
            add(&mut header, &format!("adam.v.{}", p.name), &p.shape, v);
        }
    }
    if let StoredNet::Branched(n) = &ckpt.net {
        for (name, c) in n.idg_centers() {
            header += &format!("centers {name} {}\n", c.to_digits());
        }
    }

    let mut out = Vec::with_capacity(16 + header.len() + 4 * payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(header.as_bytes());
    for v in payload {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

struct Entry {
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    if bytes.len() < 16 {
        return Err(bad("truncated checkpoint header"));
    }
    if &bytes[..4] != MAGIC {
        return Err(bad("not a checkpoint (wrong magic bytes)"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header = bytes
        .get(16..16usize.saturating_add(hlen))
        .ok_or_else(|| bad("truncated checkpoint header"))?;
    let header = std::str::from_utf8(header).map_err(|_| bad("header is not UTF-8"))?;
    let body = &bytes[16 + hlen..];

    let mut scalars: HashMap<&str, &str> = HashMap::new();
    let mut meta = BTreeMap::new();
    let mut entries: HashMap<String, Entry> = HashMap::new();
    let mut centers: HashMap<String, IdgCenters> = HashMap::new();
    for line in header.lines() {
        let mut it = line.split(' ');
        let key = it.next().unwrap_or_default();
        match key {
            "param" => {
                let f: Vec<&str> = it.collect();
                let [name, shape, offset, len] = f[..] else {
                    return Err(bad(format!("bad param line {line:?}")));
                };
                let num = |s: &str| s.parse::<usize>().map_err(|_| bad(format!("bad number in {line:?}")));
                let shape = shape.split('x').map(num).collect::<Result<Vec<_>>>()?;
                entries.insert(
                    name.to_string(),
                    Entry {
                        shape,
                        offset: num(offset)?,
                        len: num(len)?,
                    },
                );
            }
            "centers" => {
                let f: Vec<&str> = it.collect();
                let [name, digits] = f[..] else {
                    return Err(bad(format!("bad centers line {line:?}")));
                };
                centers.insert(name.to_string(), IdgCenters::from_digits(digits)?);
            }
            _ if key.starts_with("meta.") => {
                let v = line[key.len()..].strip_prefix(' ').unwrap_or_default();
                meta.insert(key["meta.".len()..].to_string(), v.to_string());
            }
            _ => {
                let v = it.next().ok_or_else(|| bad(format!("bad header line {line:?}")))?;
                scalars.insert(key, v);
            }
        }
    }
    let total: usize = entries.values().map(|e| e.offset + e.len).max().unwrap_or(0);
    if body.len() < 4 * total {
        return Err(bad(format!(
            "truncated payload: {} bytes, need {}",
            body.len(),
            4 * total
        )));
    }
    if body.len() != 4 * total {
        return Err(bad("trailing bytes after payload"));
    }
    let get = |k: &str| -> Result<usize> {
        scalars
            .get(k)
            .ok_or_else(|| bad(format!("missing header entry {k}")))?
            .parse()
            .map_err(|_| bad(format!("bad header entry {k}")))
    };
    let config = DgpNetConfig {
        channels: get("config.channels")?,
        n_block: get("config.n_block")?,
        scale: get("config.scale")?,
        in_channels: get("config.in_channels")?,
    };
    config.validate()?;
    let fused = match get("fused")? {
        0 => false,
        1 => true,
        _ => return Err(bad("fused flag must be 0 or 1")),
    };

    let mut used = 0usize;
    let mut fill = |name: &str, shape: &[usize], dst: &mut [f32]| -> Result<()> {
        let e = entries
            .get(name)
            .ok_or_else(|| bad(format!("missing parameter {name}")))?;
        if e.shape != shape || e.len != dst.len() {
            return Err(bad(format!(
                "parameter {name}: stored shape {:?}, expected {shape:?}",
                e.shape
            )));
        }
        for (i, d) in dst.iter_mut().enumerate() {
            let at = 4 * (e.offset + i);
            *d = f32::from_le_bytes(body[at..at + 4].try_into().expect("4 bytes"));
        }
        used += 1;
        Ok(())
    };

    let fill_net = |p: &mut dyn FnMut(&str, &[usize], &mut [f32]) -> Result<()>,
                    params: Vec<crate::params::ParamMut<'_, f32>>|
     -> Result<()> {
        for q in params {
            p(&q.name, &q.shape, q.data)?;
        }
        Ok(())
    };

    let net = if fused {
        let mut n = FusedDgpNet::<f32>::zeros(config)?;
        fill_net(&mut fill, n.params_mut())?;
        StoredNet::Fused(n)
    } else {
        let mut n = DgpNetParams::<f32>::zeros(config)?;
        fill_net(&mut fill, n.params_mut())?;
        n.visit_centers_mut(&mut |name, slot| {
            let c = centers
                .remove(&name)
                .ok_or_else(|| bad(format!("missing IDG centers for {name}")))?;
            c.check_len(slot.len())
                .map_err(|_| bad(format!("IDG centers for {name} have the wrong length")))?;
            *slot = c;
            Ok(())
        })?;
        if let Some(name) = centers.keys().next() {
            return Err(bad(format!("unexpected IDG centers for {name}")));
        }
        StoredNet::Branched(n)
    };

    let adam = match scalars.get("adam.step") {
        None => None,
        Some(s) => {
            let step = s.parse().map_err(|_| bad("bad adam.step"))?;
            let shapes: Vec<(String, Vec<usize>)> = match &net {
                StoredNet::Branched(n) => n.params().into_iter().map(|p| (p.name, p.shape)).collect(),
                StoredNet::Fused(n) => n.params().into_iter().map(|p| (p.name, p.shape)).collect(),
            };
            let mut read = |kind: &str| -> Result<Vec<Vec<f32>>> {
                shapes
                    .iter()
                    .map(|(name, shape)| {
                        let mut v = vec![0.0f32; shape.iter().product()];
                        fill(&format!("adam.{kind}.{name}"), shape, &mut v)?;
                        Ok(v)
                    })
                    .collect()
            };
            let m = read("m")?;
            let v = read("v")?;
            Some(AdamState { step, m, v })
        }
    };
    if used != entries.len() {
        return Err(bad(format!(
            "{} stored arrays do not belong to this network",
            entries.len() - used
        )));
    }
    Ok(Checkpoint { net, adam, meta })
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ckpt)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::fuse_network;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_ckpt(seed: u64) -> Checkpoint {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = DgpNetParams::<f32>::init(DgpNetConfig::micro(), &mut rng).unwrap();
        let mut c = Checkpoint::new(StoredNet::Branched(net));
        c.meta.insert("seed".into(), seed.to_string());
        c.meta.insert("note".into(), "two words".into());
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = random_ckpt(1);
        let bytes = encode_checkpoint(&c).unwrap();
        let back = decode_checkpoint(&bytes).unwrap();
        assert_eq!(back, c);
        assert_eq!(encode_checkpoint(&back).unwrap(), bytes);

        let mut with_adam = c.clone();
        let StoredNet::Branched(n) = &c.net else { unreachable!() };
        let mut st = AdamState::zeros_like(n);
        st.step = 7;
        st.m[3][2] = 0.125;
        st.v[0][0] = f32::MIN_POSITIVE;
        with_adam.adam = Some(st);
        let bytes = encode_checkpoint(&with_adam).unwrap();
        assert_eq!(decode_checkpoint(&bytes).unwrap(), with_adam);

        let fused = Checkpoint::new(StoredNet::Fused(fuse_network(n).unwrap()));
        let back = decode_checkpoint(&encode_checkpoint(&fused).unwrap()).unwrap();
        assert!(back.net.is_fused());
        assert_eq!(back, fused);
    }

    #[test]
    fn rejects_damaged_files() {
        let bytes = encode_checkpoint(&random_ckpt(2)).unwrap();
        for cut in [3, 15, 40, bytes.len() - 1] {
            assert!(matches!(decode_checkpoint(&bytes[..cut]), Err(Error::Format(_))));
        }
        let mut wrong = bytes.clone();
        wrong[0] = b'X';
        assert!(matches!(decode_checkpoint(&wrong), Err(Error::Format(_))));
        let mut v2 = bytes.clone();
        v2[4] = 2;
        let err = decode_checkpoint(&v2).unwrap_err().to_string();
        assert!(err.contains("version 2"), "{err}");
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("net.dgpn");
        let c = random_ckpt(3);
        save_checkpoint(&p, &c).unwrap();
        assert_eq!(load_checkpoint(&p).unwrap(), c);
    }
}
