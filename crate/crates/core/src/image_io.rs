//! Binary PPM (P6) and PGM (P5) readers/writers used by the dataset layout
//! and the inference outputs. Values map linearly between [0,1] tensors and
//! 8-bit samples, rounding on write.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Scalar, Tensor};

fn to_byte<T: Scalar>(v: T) -> u8 {
    let x = (v.to_f64() * 255.0).round();
    x.clamp(0.0, 255.0) as u8
}

/// Write an RGB image [3, H, W] as binary PPM.
pub fn write_ppm<T: Scalar>(path: &Path, image: &Tensor<T>) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 || s[0] != 3 {
        return Err(Error::contract("write_ppm", format!("expected [3,H,W], got {:?}", s)));
    }
    let (h, w) = (s[1], s[2]);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P6\n{} {}\n255\n", w, h)?;
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                f.write_all(&[to_byte(image.at(&[c, y, x]))])?;
            }
        }
    }
    Ok(())
}

/// Write a single-channel map [H, W] as binary PGM.
pub fn write_pgm<T: Scalar>(path: &Path, map: &Tensor<T>) -> Result<()> {
    let s = map.shape();
    if s.len() != 2 {
        return Err(Error::contract("write_pgm", format!("expected [H,W], got {:?}", s)));
    }
    let (h, w) = (s[0], s[1]);
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write!(f, "P5\n{} {}\n255\n", w, h)?;
    for y in 0..h {
        for x in 0..w {
            f.write_all(&[to_byte(map.at(&[y, x]))])?;
        }
    }
    Ok(())
}

fn read_header(r: &mut impl BufRead, path: &Path, magic: &str) -> Result<(usize, usize)> {
    let fmt = |msg: String| Error::Format { path: path.display().to_string(), msg };
    let mut tokens = Vec::new();
    let mut line = String::new();
    while tokens.len() < 4 {
        line.clear();
        if r.read_line(&mut line)? == 0 {
            return Err(fmt("truncated header".into()));
        }
        let body = line.split('#').next().unwrap_or("");
        tokens.extend(body.split_whitespace().map(str::to_string));
    }
    if tokens[0] != magic {
        return Err(fmt(format!("expected {magic}, got {}", tokens[0])));
    }
    let w: usize = tokens[1].parse().map_err(|_| fmt("bad width".into()))?;
    let h: usize = tokens[2].parse().map_err(|_| fmt("bad height".into()))?;
    let maxv: usize = tokens[3].parse().map_err(|_| fmt("bad maxval".into()))?;
    if maxv != 255 {
        return Err(fmt(format!("unsupported maxval {maxv}")));
    }
    Ok((w, h))
}

/// Read a binary PPM into a [3, H, W] tensor in [0,1].
pub fn read_ppm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let (w, h) = read_header(&mut r, path, "P6")?;
    let mut buf = vec![0u8; 3 * w * h];
    r.read_exact(&mut buf)?;
    let mut out = Tensor::<T>::zeros(vec![3, h, w]);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                out.set(&[c, y, x], T::from_f64(buf[(y * w + x) * 3 + c] as f64 / 255.0));
            }
        }
    }
    Ok(out)
}

/// Read a binary PGM into a [H, W] tensor in [0,1].
pub fn read_pgm<T: Scalar>(path: &Path) -> Result<Tensor<T>> {
    let mut r = std::io::BufReader::new(std::fs::File::open(path)?);
    let (w, h) = read_header(&mut r, path, "P5")?;
    let mut buf = vec![0u8; w * h];
    r.read_exact(&mut buf)?;
    Tensor::new(vec![h, w], buf.iter().map(|&b| T::from_f64(b as f64 / 255.0)).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("img.ppm");
        let img = Tensor::<f64>::from_f64(
            vec![3, 2, 2],
            &[0.0, 1.0, 0.5, 0.25, 0.1, 0.9, 0.3, 0.7, 1.0, 0.0, 0.6, 0.4],
        )
        .unwrap();
        write_ppm(&path, &img).unwrap();
        let back = read_ppm::<f64>(&path).unwrap();
        for (a, b) in img.data().iter().zip(back.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-9);
        }
    }

    #[test]
    fn pgm_roundtrip_binary_mask() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.pgm");
        let mask = Tensor::<f32>::from_f64(vec![2, 3], &[1.0, 0.0, 1.0, 0.0, 1.0, 0.0]).unwrap();
        write_pgm(&path, &mask).unwrap();
        let back = read_pgm::<f32>(&path).unwrap();
        for (a, b) in mask.data().iter().zip(back.data()) {
            assert_eq!(*a, *b);
        }
    }
}
