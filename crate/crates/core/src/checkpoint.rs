//! Checkpoint format: magic "BEVT", u32 version, a length-prefixed
//! canonical config echo, then the named parameter tensors in the TNSR
//! serialization, count-prefixed.

use std::io::{Read, Write};
use std::path::Path;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Scalar, Tensor};

const VERSION: u32 = 1;

pub fn save<T: Scalar>(path: &Path, model: &Model<T>, cfg: &RunConfig) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(b"BEVT")?;
    f.write_all(&VERSION.to_le_bytes())?;
    let echo = cfg.canonical();
    f.write_all(&(echo.len() as u32).to_le_bytes())?;
    f.write_all(echo.as_bytes())?;
    f.write_all(&(model.store.len() as u32).to_le_bytes())?;
    for (name, tensor) in model.store.iter() {
        f.write_all(&(name.len() as u32).to_le_bytes())?;
        f.write_all(name.as_bytes())?;
        tensor.write_to(&mut f)?;
    }
    Ok(())
}

/// Rebuild the model recorded in a checkpoint. The embedded config echo
/// reconstructs the architecture; every stored tensor must name an existing
/// parameter of matching shape.
pub fn load<T: Scalar>(path: &Path) -> Result<(Model<T>, RunConfig)> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    let pathstr = path.display().to_string();
    let fmt = |msg: String| Error::Format { path: pathstr.clone(), msg };
    let mut magic = [0u8; 4];
    f.read_exact(&mut magic)?;
    if &magic != b"BEVT" {
        return Err(fmt("bad magic, expected BEVT".into()));
    }
    let version = read_u32(&mut f)?;
    if version != VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let echo_len = read_u32(&mut f)? as usize;
    if echo_len > 1 << 20 {
        return Err(fmt("implausible config length".into()));
    }
    let mut echo = vec![0u8; echo_len];
    f.read_exact(&mut echo)?;
    let echo = String::from_utf8(echo).map_err(|_| fmt("config echo is not UTF-8".into()))?;
    let cfg = RunConfig::parse(&echo)?;
    let mut model = Model::<T>::new(cfg.model.clone(), cfg.train.seed)?;
    let count = read_u32(&mut f)? as usize;
    if count != model.store.len() {
        return Err(fmt(format!(
            "checkpoint has {count} parameters, model expects {}",
            model.store.len()
        )));
    }
    for _ in 0..count {
        let name_len = read_u32(&mut f)? as usize;
        if name_len > 4096 {
            return Err(fmt("implausible name length".into()));
        }
        let mut name = vec![0u8; name_len];
        f.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| fmt("name is not UTF-8".into()))?;
        let tensor = Tensor::<T>::read_from(&mut f, &pathstr)?;
        model.store.load_named(&name, tensor)?;
    }
    Ok((model, cfg))
}

fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}
