use std::io::{self, Read, Write};
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use super::SdeError;

/// Magic bytes opening a binary ensemble file.
pub const ENSEMBLE_MAGIC: &[u8; 8] = b"PSENSEMB";
pub const ENSEMBLE_VERSION: u32 = 1;

/// Simulated trajectories on a shared time grid.
///
/// `paths` is row-major with shape `path_count × times.len() × dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct PathEnsemble {
    pub times: Vec<f64>,
    pub dim: usize,
    pub path_count: usize,
    pub paths: Vec<f64>,
    pub seed: u64,
    pub drift_descriptor: String,
    pub g_descriptor: String,
}

impl PathEnsemble {
    #[inline]
    pub fn value(&self, path: usize, time_index: usize, coord: usize) -> f64 {
        self.paths[(path * self.times.len() + time_index) * self.dim + coord]
    }

    /// Index of the recorded time closest to `t`.
    pub fn time_index(&self, t: f64) -> usize {
        let mut best = 0;
        for (i, ti) in self.times.iter().enumerate() {
            if (ti - t).abs() < (self.times[best] - t).abs() {
                best = i;
            }
        }
        best
    }

    /// `path_count × dim` matrix of states at recorded time `k`.
    pub fn slice(&self, k: usize) -> DMatrix<f64> {
        DMatrix::from_fn(self.path_count, self.dim, |p, j| self.value(p, k, j))
    }

    pub fn terminal(&self) -> DMatrix<f64> {
        self.slice(self.times.len() - 1)
    }

    pub fn mean_at(&self, k: usize) -> DVector<f64> {
        let mut m = DVector::zeros(self.dim);
        for p in 0..self.path_count {
            for j in 0..self.dim {
                m[j] += self.value(p, k, j);
            }
        }
        m / self.path_count as f64
    }

    /// Unbiased sample covariance at recorded time `k`.
    pub fn covariance_at(&self, k: usize) -> DMatrix<f64> {
        let m = self.mean_at(k);
        let mut c = DMatrix::zeros(self.dim, self.dim);
        for p in 0..self.path_count {
            for i in 0..self.dim {
                let di = self.value(p, k, i) - m[i];
                for j in 0..self.dim {
                    c[(i, j)] += di * (self.value(p, k, j) - m[j]);
                }
            }
        }
        c / (self.path_count as f64 - 1.0)
    }

    pub fn write_binary<W: Write>(&self, mut w: W) -> io::Result<()> {
        w.write_all(ENSEMBLE_MAGIC)?;
        w.write_all(&ENSEMBLE_VERSION.to_le_bytes())?;
        w.write_all(&(self.dim as u32).to_le_bytes())?;
        w.write_all(&(self.path_count as u64).to_le_bytes())?;
        w.write_all(&(self.times.len() as u64).to_le_bytes())?;
        w.write_all(&self.seed.to_le_bytes())?;
        for s in [&self.drift_descriptor, &self.g_descriptor] {
            w.write_all(&(s.len() as u32).to_le_bytes())?;
            w.write_all(s.as_bytes())?;
        }
        let mut buf = Vec::with_capacity(8 * (self.times.len() + self.paths.len()));
        for v in self.times.iter().chain(&self.paths) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&buf)
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, SdeError> {
        let fmt = |m: &str| SdeError::Format(m.to_string());
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != ENSEMBLE_MAGIC {
            return Err(fmt("not an ensemble file (bad magic)"));
        }
        let version = read_u32(&mut r)?;
        if version != ENSEMBLE_VERSION {
            return Err(SdeError::Format(format!("unsupported ensemble version {version}")));
        }
        let dim = read_u32(&mut r)? as usize;
        let path_count = read_u64(&mut r)? as usize;
        let time_count = read_u64(&mut r)? as usize;
        let seed = read_u64(&mut r)?;
        let mut strings = Vec::with_capacity(2);
        for _ in 0..2 {
            let len = read_u32(&mut r)? as usize;
            let mut bytes = vec![0u8; len];
            r.read_exact(&mut bytes)?;
            strings.push(String::from_utf8(bytes).map_err(|_| fmt("descriptor is not UTF-8"))?);
        }
        let total = time_count
            .checked_add(
                path_count
                    .checked_mul(time_count)
                    .and_then(|v| v.checked_mul(dim))
                    .ok_or_else(|| fmt("header sizes overflow"))?,
            )
            .ok_or_else(|| fmt("header sizes overflow"))?;
        let mut bytes = vec![0u8; total * 8];
        r.read_exact(&mut bytes)?;
        let values: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let g_descriptor = strings.pop().unwrap_or_default();
        let drift_descriptor = strings.pop().unwrap_or_default();
        Ok(Self {
            times: values[..time_count].to_vec(),
            dim,
            path_count,
            paths: values[time_count..].to_vec(),
            seed,
            drift_descriptor,
            g_descriptor,
        })
    }

    pub fn save_binary(&self, path: &Path) -> Result<(), SdeError> {
        let f = std::fs::File::create(path)?;
        self.write_binary(io::BufWriter::new(f))?;
        Ok(())
    }

    pub fn load_binary(path: &Path) -> Result<Self, SdeError> {
        let f = std::fs::File::open(path)?;
        Self::read_binary(io::BufReader::new(f))
    }

    /// Long-format CSV: `path,t,x0,x1,...`. Intended for small runs.
    pub fn write_csv<W: Write>(&self, mut w: W) -> io::Result<()> {
        write!(w, "path,t")?;
        for j in 0..self.dim {
            write!(w, ",x{j}")?;
        }
        writeln!(w)?;
        for p in 0..self.path_count {
            for (k, t) in self.times.iter().enumerate() {
                write!(w, "{p},{t}")?;
                for j in 0..self.dim {
                    write!(w, ",{}", self.value(p, k, j))?;
                }
                writeln!(w)?;
            }
        }
        Ok(())
    }
}

fn read_u32<R: Read>(r: &mut R) -> io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> PathEnsemble {
        PathEnsemble {
            times: vec![0.0, 0.5, 1.0],
            dim: 2,
            path_count: 2,
            paths: (0..12).map(|i| i as f64 * 0.25 - 1.0).collect(),
            seed: 99,
            drift_descriptor: "zero".into(),
            g_descriptor: "constant(1)".into(),
        }
    }

    #[test]
    fn binary_round_trip() {
        let e = tiny();
        let mut buf = Vec::new();
        e.write_binary(&mut buf).unwrap();
        assert_eq!(&buf[..8], ENSEMBLE_MAGIC);
        let back = PathEnsemble::read_binary(&buf[..]).unwrap();
        assert_eq!(e, back);
    }

    #[test]
    fn truncated_file_is_an_error() {
        let mut buf = Vec::new();
        tiny().write_binary(&mut buf).unwrap();
        buf.truncate(buf.len() - 3);
        assert!(PathEnsemble::read_binary(&buf[..]).is_err());
        assert!(PathEnsemble::read_binary(&b"NOTMAGIC"[..]).is_err());
    }

    #[test]
    fn layout_and_csv() {
        let e = tiny();
        assert_eq!(e.value(1, 2, 1), 11.0 * 0.25 - 1.0);
        let mut out = Vec::new();
        e.write_csv(&mut out).unwrap();
        let text = String::from_utf8(out).unwrap();
        assert!(text.starts_with("path,t,x0,x1\n0,0,-1,-0.75\n"));
        assert_eq!(text.lines().count(), 7);
    }
}
