//! `DRBT` checkpoint files: a `DRGS` Gaussian segment, a `DRNN` network
//! segment, then tagged extension segments. The robot description always
//! travels as the `URDF` extension; training state adds its own tags.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::deform::SplatModel;
use crate::error::{Error, Result};
use crate::gaussians::GaussianSet;
use crate::io_util::{read_magic, read_u32, read_u64};
use crate::robot::parse_urdf;

const MAGIC: &[u8; 4] = b"DRBT";
const VERSION: u32 = 1;
pub const URDF_TAG: [u8; 4] = *b"URDF";

/// A tagged blob appended after the model segments.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Extension {
    pub tag: [u8; 4],
    pub data: Vec<u8>,
}

impl Extension {
    pub fn new(tag: &[u8; 4], data: Vec<u8>) -> Self {
        Self { tag: *tag, data }
    }
}

pub fn encode_checkpoint(model: &SplatModel, extensions: &[Extension]) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    model.gaussians.write_segment(&mut buf).expect("writing to memory");
    model.write_segment(&mut buf).expect("writing to memory");
    let urdf = Extension::new(&URDF_TAG, model.robot.to_urdf().into_bytes());
    let all: Vec<&Extension> = std::iter::once(&urdf)
        .chain(extensions.iter().filter(|e| e.tag != URDF_TAG))
        .collect();
    buf.extend_from_slice(&(all.len() as u32).to_le_bytes());
    for e in all {
        buf.extend_from_slice(&e.tag);
        buf.extend_from_slice(&(e.data.len() as u64).to_le_bytes());
        buf.extend_from_slice(&e.data);
    }
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> std::result::Result<(SplatModel, Vec<Extension>), String> {
    let r = &mut &bytes[..];
    read_magic(r, MAGIC)?;
    let version = read_u32(r)?;
    if version != VERSION {
        return Err(format!("unsupported checkpoint version {version}"));
    }
    let gaussians = GaussianSet::read_segment(r)?;
    // the network segment needs the robot, which comes after it
    let mut nn = Vec::new();
    let nn_start = *r;
    skip_drnn(r)?;
    nn.extend_from_slice(&nn_start[..nn_start.len() - r.len()]);
    let count = read_u32(r)? as usize;
    let mut extensions = Vec::with_capacity(count);
    for _ in 0..count {
        let mut tag = [0u8; 4];
        r.read_exact(&mut tag)
            .map_err(|e| format!("truncated extension: {e}"))?;
        let len = read_u64(r)? as usize;
        if len > r.len() {
            return Err(format!(
                "extension {:?} overruns the file",
                String::from_utf8_lossy(&tag)
            ));
        }
        let (data, rest) = r.split_at(len);
        extensions.push(Extension {
            tag,
            data: data.to_vec(),
        });
        *r = rest;
    }
    if !r.is_empty() {
        return Err(format!("{} trailing bytes", r.len()));
    }
    let urdf = extensions
        .iter()
        .find(|e| e.tag == URDF_TAG)
        .ok_or("checkpoint carries no robot description")?;
    let text = std::str::from_utf8(&urdf.data).map_err(|e| e.to_string())?;
    let robot = parse_urdf(text).map_err(|e| e.to_string())?;
    let model = SplatModel::read_segment(&mut nn.as_slice(), robot, gaussians)?;
    Ok((model, extensions))
}

/// Advances past a `DRNN` segment without interpreting the weights.
fn skip_drnn(r: &mut &[u8]) -> std::result::Result<(), String> {
    read_magic(r, b"DRNN")?;
    let _version = read_u32(r)?;
    let flags = read_u32(r)?;
    let _bands = read_u32(r)?;
    let _input = read_u32(r)?;
    let mut counts = [0usize; 2];
    for c in &mut counts {
        let n = read_u32(r)? as usize;
        if n > 64 {
            return Err(format!("implausible layer count {n}"));
        }
        let sizes: Vec<usize> = (0..n)
            .map(|_| read_u32(r).map(|v| v as usize))
            .collect::<std::result::Result<_, _>>()?;
        *c = sizes.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
    }
    let floats = counts[0] + if flags & 1 != 0 { counts[1] } else { 0 };
    if 4 * floats > r.len() {
        return Err("truncated network weights".into());
    }
    *r = &r[4 * floats..];
    Ok(())
}

pub fn write_checkpoint(path: &Path, model: &SplatModel, extensions: &[Extension]) -> Result<()> {
    let bytes = encode_checkpoint(model, extensions);
    let tmp = path.with_extension("tmp");
    fs::File::create(&tmp)
        .and_then(|mut f| f.write_all(&bytes).and_then(|_| f.sync_all()))
        .and_then(|_| fs::rename(&tmp, path))
        .map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<(SplatModel, Vec<Extension>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| Error::format(path, e))
}

pub fn load_model(path: &Path) -> Result<SplatModel> {
    read_checkpoint(path).map(|(m, _)| m)
}
