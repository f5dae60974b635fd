//! Tensor serialization: an ASCII header line `ndim e0 e1 ...` followed by
//! the raw data as little-endian 64-bit floats. Gradients are not stored.

use super::Tensor;
use std::fmt;
use std::io::{self, BufRead, Read, Write};
use std::path::Path;

#[derive(Debug)]
pub enum TensorIoError {
    Io(io::Error),
    BadHeader(String),
    SizeMismatch { expected: usize, got: usize },
}

impl fmt::Display for TensorIoError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TensorIoError::Io(e) => write!(f, "i/o error: {e}"),
            TensorIoError::BadHeader(s) => write!(f, "bad tensor header: {s}"),
            TensorIoError::SizeMismatch { expected, got } => {
                write!(f, "payload holds {got} values, header promises {expected}")
            }
        }
    }
}

impl std::error::Error for TensorIoError {}

impl From<io::Error> for TensorIoError {
    fn from(e: io::Error) -> Self {
        TensorIoError::Io(e)
    }
}

/// Write the header line and raw little-endian payload.
pub fn write_tensor(w: &mut impl Write, t: &Tensor) -> Result<(), TensorIoError> {
    let mut header = String::new();
    header.push_str(&t.shape().len().to_string());
    for e in t.shape() {
        header.push(' ');
        header.push_str(&e.to_string());
    }
    header.push('\n');
    w.write_all(header.as_bytes())?;
    let mut buf = Vec::with_capacity(t.len() * 8);
    for v in t.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

/// Read one tensor from the stream, leaving the cursor after its payload.
pub fn read_tensor(r: &mut impl BufRead) -> Result<Tensor, TensorIoError> {
    let mut header = String::new();
    r.read_line(&mut header)?;
    let mut fields = header.split_whitespace();
    let ndim: usize = fields
        .next()
        .ok_or_else(|| TensorIoError::BadHeader("empty header line".into()))?
        .parse()
        .map_err(|_| TensorIoError::BadHeader(header.trim().into()))?;
    let mut shape = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let e: usize = fields
            .next()
            .ok_or_else(|| TensorIoError::BadHeader(format!("expected {ndim} extents: {header}")))?
            .parse()
            .map_err(|_| TensorIoError::BadHeader(header.trim().into()))?;
        shape.push(e);
    }
    if fields.next().is_some() {
        return Err(TensorIoError::BadHeader(format!(
            "trailing tokens after {ndim} extents: {}",
            header.trim()
        )));
    }
    let n: usize = shape.iter().product();
    let mut bytes = vec![0u8; n * 8];
    r.read_exact(&mut bytes).map_err(|e| {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            TensorIoError::SizeMismatch { expected: n, got: 0 }
        } else {
            TensorIoError::Io(e)
        }
    })?;
    let data = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(Tensor::from_vec(&shape, data).expect("shape/data consistency"))
}

pub fn save_tensor(path: &Path, t: &Tensor) -> Result<(), TensorIoError> {
    let mut buf = Vec::new();
    write_tensor(&mut buf, t)?;
    crate::write_atomic(path, &buf)?;
    Ok(())
}

pub fn load_tensor(path: &Path) -> Result<Tensor, TensorIoError> {
    let file = std::fs::File::open(path)?;
    let mut reader = io::BufReader::new(file);
    let t = read_tensor(&mut reader)?;
    // Anything after the payload means the file does not hold exactly one tensor.
    let mut rest = [0u8; 1];
    match reader.read(&mut rest)? {
        0 => Ok(t),
        _ => Err(TensorIoError::BadHeader(
            "trailing bytes after tensor payload".into(),
        )),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_bits() {
        let t = Tensor::from_vec(&[2, 3], vec![0.1, -2.5, f64::MIN_POSITIVE, 1e300, -0.0, 7.0])
            .unwrap();
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        let back = read_tensor(&mut io::BufReader::new(&buf[..])).unwrap();
        assert_eq!(back.shape(), t.shape());
        for (a, b) in back.data().iter().zip(t.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn truncated_payload_is_detected() {
        let t = Tensor::filled(&[4], 1.0);
        let mut buf = Vec::new();
        write_tensor(&mut buf, &t).unwrap();
        buf.truncate(buf.len() - 8);
        let err = read_tensor(&mut io::BufReader::new(&buf[..])).unwrap_err();
        assert!(matches!(err, TensorIoError::SizeMismatch { expected: 4, .. }));
    }

    #[test]
    fn garbage_header_is_rejected() {
        let buf = b"not a header\n".to_vec();
        assert!(matches!(
            read_tensor(&mut io::BufReader::new(&buf[..])),
            Err(TensorIoError::BadHeader(_))
        ));
    }
}
