//! `VFCK` checkpoint format.
//!
//! ```text
//! offset  size  field
//! 0       4     magic "VFCK"
//! 4       4     version (u32, currently 1)
//! 8       4     resolution
//! 12      4     channels
//! 16      4     levels
//! 20      4     depth
//! 24      4     width
//! 28      1     coupling (0 = affine)
//! 29      1     permutation (0 = invertible 1x1x1 convolution)
//! 30      1     learn_top (0 / 1)
//! 31      1     actnorm initialized (0 / 1)
//! 32      4     parameter tensor count
//! 36      ...   parameters as f32, in `Flow::param_names` order
//! ```
//!
//! All integers and floats are little-endian. Tensor shapes are implied by
//! the configuration. Per level and step the order is actnorm bias, actnorm
//! log-scale, 1x1x1 weight `[c_out, c_in]`, coupling `w1 b1 w2 b2 w3 b3`
//! (kernels `[k, k, k, c_in, c_out]`), then the level's split prior kernel
//! and bias, and finally the learned top prior `[s, s, s, 2c]` (means in the
//! first `c` channels, log-scales in the rest).

use std::path::Path;

use crate::bytes::{put_f32s, put_u32, to_u32, Reader};
use crate::diffcore::{Real, Tensor};
use crate::error::{Error, Result};

use super::{parameter_layout, Coupling, Flow, FlowConfig, Permutation};

const MAGIC: &[u8; 4] = b"VFCK";
const VERSION: u32 = 1;

pub fn to_bytes<T: Real>(flow: &Flow<T>) -> Result<Vec<u8>> {
    let cfg = flow.config();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, VERSION);
    for (v, what) in [
        (cfg.resolution, "resolution"),
        (cfg.channels, "channels"),
        (cfg.levels, "levels"),
        (cfg.depth, "depth"),
        (cfg.width, "width"),
    ] {
        put_u32(&mut out, to_u32(v, what)?);
    }
    out.push(match cfg.coupling {
        Coupling::Affine => 0,
    });
    out.push(match cfg.permutation {
        Permutation::InvConv => 0,
    });
    out.push(cfg.learn_top as u8);
    out.push(flow.actnorm_initialized() as u8);
    put_u32(&mut out, to_u32(flow.params().len(), "parameter count")?);
    for p in flow.params() {
        put_f32s(&mut out, p.data().iter().map(|v| v.as_f64() as f32));
    }
    Ok(out)
}

pub fn from_bytes<T: Real>(bytes: &[u8]) -> Result<Flow<T>> {
    let mut r = Reader::new(bytes);
    r.magic(MAGIC)?;
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Version(version));
    }
    let mut dims = [0usize; 5];
    for d in dims.iter_mut() {
        *d = r.u32()? as usize;
    }
    let coupling = match r.u8()? {
        0 => Coupling::Affine,
        c => return Err(Error::Format(format!("unknown coupling code {c}"))),
    };
    let permutation = match r.u8()? {
        0 => Permutation::InvConv,
        c => return Err(Error::Format(format!("unknown permutation code {c}"))),
    };
    let learn_top = r.u8()? != 0;
    let initialized = r.u8()? != 0;
    let config = FlowConfig {
        resolution: dims[0],
        channels: dims[1],
        levels: dims[2],
        depth: dims[3],
        width: dims[4],
        coupling,
        permutation,
        learn_top,
    };
    config
        .validate()
        .map_err(|e| Error::Format(format!("invalid flow configuration in checkpoint: {e}")))?;
    let shapes: Vec<Vec<usize>> = parameter_layout(&config).into_iter().map(|(_, s)| s).collect();
    let count = r.u32()? as usize;
    if count != shapes.len() {
        return Err(Error::Format(format!(
            "checkpoint lists {count} tensors, configuration implies {}",
            shapes.len()
        )));
    }
    let mut params = Vec::with_capacity(count);
    for shape in &shapes {
        let n: usize = shape.iter().product();
        let vals = r.f32_vec(n)?;
        params.push(Tensor::new(shape.to_vec(), vals.into_iter().map(|v| T::of(v as f64)).collect())?);
    }
    r.finish()?;
    Flow::from_parts(config, params, initialized)
}

pub fn save<T: Real>(flow: &Flow<T>, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(flow)?)?;
    Ok(())
}

pub fn load<T: Real>(path: &Path) -> Result<Flow<T>> {
    from_bytes(&std::fs::read(path)?)
}
