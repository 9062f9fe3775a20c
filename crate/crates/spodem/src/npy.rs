//! Minimal reader/writer for the .npy array format, version 1.0.
//!
//! Supported on read: little-endian `<f8`, `<f4` (up-converted to f64), and
//! `<c16`, C order only. Written files are always `<f8` or `<c16`, C order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::linalg::C64;

const MAGIC: &[u8; 6] = b"\x93NUMPY";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Dtype {
    F8,
    F4,
    C16,
}

impl Dtype {
    fn descr(self) -> &'static str {
        match self {
            Dtype::F8 => "<f8",
            Dtype::F4 => "<f4",
            Dtype::C16 => "<c16",
        }
    }

    fn from_descr(s: &str) -> Option<Self> {
        match s {
            "<f8" => Some(Dtype::F8),
            "<f4" => Some(Dtype::F4),
            "<c16" => Some(Dtype::C16),
            _ => None,
        }
    }

    fn item_bytes(self) -> usize {
        match self {
            Dtype::F8 => 8,
            Dtype::F4 => 4,
            Dtype::C16 => 16,
        }
    }
}

struct Header {
    dtype: Dtype,
    shape: Vec<usize>,
}

fn read_header<R: Read>(r: &mut R, path: &Path) -> Result<Header> {
    let ctx = || format!("reading npy header from {}", path.display());
    let mut magic = [0u8; 6];
    r.read_exact(&mut magic).map_err(|e| Error::io(ctx(), e))?;
    if &magic != MAGIC {
        return Err(Error::ShapeMismatch(format!(
            "{}: not an npy file (bad magic)",
            path.display()
        )));
    }
    let mut ver = [0u8; 2];
    r.read_exact(&mut ver).map_err(|e| Error::io(ctx(), e))?;
    if ver[0] != 1 {
        return Err(Error::ShapeMismatch(format!(
            "{}: unsupported npy version {}.{}",
            path.display(),
            ver[0],
            ver[1]
        )));
    }
    let mut len = [0u8; 2];
    r.read_exact(&mut len).map_err(|e| Error::io(ctx(), e))?;
    let hlen = u16::from_le_bytes(len) as usize;
    let mut dict = vec![0u8; hlen];
    r.read_exact(&mut dict).map_err(|e| Error::io(ctx(), e))?;
    let dict = String::from_utf8_lossy(&dict);

    let descr = extract_str_field(&dict, "descr").ok_or_else(|| {
        Error::ShapeMismatch(format!("{}: npy header missing descr", path.display()))
    })?;
    let dtype = Dtype::from_descr(&descr).ok_or_else(|| {
        Error::ShapeMismatch(format!(
            "{}: unsupported npy dtype {descr:?} (expected <f8, <f4 or <c16)",
            path.display()
        ))
    })?;
    if dict.contains("'fortran_order': True") {
        return Err(Error::ShapeMismatch(format!(
            "{}: Fortran-order npy is not supported",
            path.display()
        )));
    }
    let shape = extract_shape(&dict).ok_or_else(|| {
        Error::ShapeMismatch(format!("{}: npy header missing shape", path.display()))
    })?;
    Ok(Header { dtype, shape })
}

fn extract_str_field(dict: &str, key: &str) -> Option<String> {
    let pat = format!("'{key}'");
    let at = dict.find(&pat)? + pat.len();
    let rest = &dict[at..];
    let open = rest.find('\'')?;
    let rest = &rest[open + 1..];
    let close = rest.find('\'')?;
    Some(rest[..close].to_string())
}

fn extract_shape(dict: &str) -> Option<Vec<usize>> {
    let at = dict.find("'shape'")? + "'shape'".len();
    let rest = &dict[at..];
    let open = rest.find('(')?;
    let close = rest[open..].find(')')? + open;
    let inner = &rest[open + 1..close];
    let mut out = Vec::new();
    for part in inner.split(',') {
        let t = part.trim();
        if t.is_empty() {
            continue;
        }
        out.push(t.parse::<usize>().ok()?);
    }
    Some(out)
}

/// Read an f64 array (f4 payloads are up-converted). Returns (data, shape).
pub fn read_f64(path: &Path) -> Result<(Vec<f64>, Vec<usize>)> {
    if !path.exists() {
        return Err(Error::FileMissing(path.to_path_buf()));
    }
    let f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut r = BufReader::new(f);
    let h = read_header(&mut r, path)?;
    let count: usize = h.shape.iter().product();
    let mut raw = vec![0u8; count * h.dtype.item_bytes()];
    r.read_exact(&mut raw)
        .map_err(|e| Error::io(format!("reading {} items from {}", count, path.display()), e))?;
    let data = match h.dtype {
        Dtype::F8 => raw
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect(),
        Dtype::F4 => raw
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect(),
        Dtype::C16 => {
            return Err(Error::ShapeMismatch(format!(
                "{}: expected a real array, found complex",
                path.display()
            )))
        }
    };
    Ok((data, h.shape))
}

/// Read a complex128 array. Returns (data, shape).
pub fn read_c128(path: &Path) -> Result<(Vec<C64>, Vec<usize>)> {
    if !path.exists() {
        return Err(Error::FileMissing(path.to_path_buf()));
    }
    let f = File::open(path).map_err(|e| Error::io(format!("opening {}", path.display()), e))?;
    let mut r = BufReader::new(f);
    let h = read_header(&mut r, path)?;
    if h.dtype != Dtype::C16 {
        return Err(Error::ShapeMismatch(format!(
            "{}: expected a complex array, found {}",
            path.display(),
            h.dtype.descr()
        )));
    }
    let count: usize = h.shape.iter().product();
    let mut raw = vec![0u8; count * 16];
    r.read_exact(&mut raw)
        .map_err(|e| Error::io(format!("reading {} items from {}", count, path.display()), e))?;
    let data = raw
        .chunks_exact(16)
        .map(|b| {
            let re = f64::from_le_bytes(b[0..8].try_into().unwrap());
            let im = f64::from_le_bytes(b[8..16].try_into().unwrap());
            C64::new(re, im)
        })
        .collect();
    Ok((data, h.shape))
}

fn write_header<W: Write>(w: &mut W, dtype: Dtype, shape: &[usize], path: &Path) -> Result<()> {
    let shape_str = match shape.len() {
        0 => "()".to_string(),
        1 => format!("({},)", shape[0]),
        _ => format!(
            "({})",
            shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join(", ")
        ),
    };
    let mut dict = format!(
        "{{'descr': '{}', 'fortran_order': False, 'shape': {}, }}",
        dtype.descr(),
        shape_str
    );
    // Pad so magic + version + len + dict is a multiple of 64, newline last.
    let unpadded = 6 + 2 + 2 + dict.len() + 1;
    let pad = (64 - unpadded % 64) % 64;
    dict.push_str(&" ".repeat(pad));
    dict.push('\n');

    let ctx = || format!("writing npy header to {}", path.display());
    w.write_all(MAGIC).map_err(|e| Error::io(ctx(), e))?;
    w.write_all(&[1u8, 0u8]).map_err(|e| Error::io(ctx(), e))?;
    w.write_all(&(dict.len() as u16).to_le_bytes())
        .map_err(|e| Error::io(ctx(), e))?;
    w.write_all(dict.as_bytes())
        .map_err(|e| Error::io(ctx(), e))?;
    Ok(())
}

/// Write an f64 array in C order.
pub fn write_f64(path: &Path, data: &[f64], shape: &[usize]) -> Result<()> {
    let count: usize = shape.iter().product();
    if count != data.len() {
        return Err(Error::ShapeMismatch(format!(
            "npy write: {} values do not fill shape {:?}",
            data.len(),
            shape
        )));
    }
    let f = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(f);
    write_header(&mut w, Dtype::F8, shape, path)?;
    for v in data {
        w.write_all(&v.to_le_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("flushing {}", path.display()), e))?;
    Ok(())
}

/// Write a complex128 array in C order.
pub fn write_c128(path: &Path, data: &[C64], shape: &[usize]) -> Result<()> {
    let count: usize = shape.iter().product();
    if count != data.len() {
        return Err(Error::ShapeMismatch(format!(
            "npy write: {} values do not fill shape {:?}",
            data.len(),
            shape
        )));
    }
    let f = File::create(path).map_err(|e| Error::io(format!("creating {}", path.display()), e))?;
    let mut w = BufWriter::new(f);
    write_header(&mut w, Dtype::C16, shape, path)?;
    for v in data {
        w.write_all(&v.re.to_le_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
        w.write_all(&v.im.to_le_bytes())
            .map_err(|e| Error::io(format!("writing {}", path.display()), e))?;
    }
    w.flush()
        .map_err(|e| Error::io(format!("flushing {}", path.display()), e))?;
    Ok(())
}
