//! Binary trajectory files: three little-endian `u64` (`n`, `d`, `seed`), then
//! the `(n+1) × d` iterates as row-major little-endian `f64`.

use std::io::{Read, Write};

use super::{AsgdError, SgdTrajectory};
use crate::linalg::Matrix;

#[derive(Clone, Debug, PartialEq)]
pub struct TrajectoryFile {
    pub n: usize,
    pub d: usize,
    pub seed: u64,
    pub thetas: Matrix,
}

pub fn write_trajectory<W: Write>(mut out: W, traj: &SgdTrajectory, seed: u64) -> Result<(), AsgdError> {
    let n = traj.n() as u64;
    let d = traj.thetas.cols() as u64;
    for v in [n, d, seed] {
        out.write_all(&v.to_le_bytes())?;
    }
    for v in traj.thetas.as_slice() {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_trajectory<R: Read>(mut input: R) -> Result<TrajectoryFile, AsgdError> {
    let mut word = [0u8; 8];
    let mut header = [0u64; 3];
    for h in header.iter_mut() {
        input.read_exact(&mut word)?;
        *h = u64::from_le_bytes(word);
    }
    let [n, d, seed] = header;
    let (n, d) = (n as usize, d as usize);
    let len = (n + 1)
        .checked_mul(d)
        .ok_or_else(|| AsgdError::InvalidProblem(format!("header n = {n}, d = {d} overflows")))?;
    let mut data = Vec::with_capacity(len);
    for _ in 0..len {
        input.read_exact(&mut word)?;
        data.push(f64::from_le_bytes(word));
    }
    Ok(TrajectoryFile { n, d, seed, thetas: Matrix::from_vec(n + 1, d, data) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::asgd::{run, Schedule, SgdProblem};
    use crate::linalg::SymMatrix;
    use crate::stats_core::{NoiseSpec, RandomSource};

    #[test]
    fn round_trip() {
        let p = SgdProblem::quadratic(SymMatrix::identity(3), vec![0.0; 3], NoiseSpec::standard_gaussian(3)).unwrap();
        let s = Schedule::new(1.0, 0.75, 33).unwrap();
        let t = run(&p, &s, &mut RandomSource::new(77, 0)).unwrap();
        let mut buf = Vec::new();
        write_trajectory(&mut buf, &t, 77).unwrap();
        assert_eq!(buf.len(), 24 + 34 * 3 * 8);
        assert_eq!(&buf[..8], &33u64.to_le_bytes());
        let back = read_trajectory(buf.as_slice()).unwrap();
        assert_eq!((back.n, back.d, back.seed), (33, 3, 77));
        assert_eq!(back.thetas, t.thetas);
        assert!(read_trajectory(&buf[..100]).is_err());
    }
}
