//! Trajectory files.
//!
//! Binary layout, all little-endian: the 6-byte magic, `N: u64`, `d: u8`,
//! `M: u64`, `dt: f64`, `has_pairings: u8`, `seed: u64`, then `M` frames of
//! `d N` `f64` values, then (if present) `M` frames of `N` 0-based `u32`
//! partner indices.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{PairingPlan, TrajectoryDataset, MAX_DIM};
use crate::error::{Error, Result};

pub const TRAJECTORY_MAGIC: &[u8; 6] = b"KDTRJ1";

pub fn write_trajectory(path: &Path, data: &TrajectoryDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    w.write_all(TRAJECTORY_MAGIC)?;
    w.write_all(&(data.n_agents as u64).to_le_bytes())?;
    w.write_all(&[data.dim as u8])?;
    w.write_all(&(data.snapshots() as u64).to_le_bytes())?;
    w.write_all(&data.dt.to_le_bytes())?;
    w.write_all(&[data.pairings.is_some() as u8])?;
    w.write_all(&data.seed.to_le_bytes())?;
    for v in data.frames_flat() {
        w.write_all(&v.to_le_bytes())?;
    }
    if let Some(plans) = &data.pairings {
        for plan in plans {
            for &j in plan.as_slice() {
                w.write_all(&(j as u32).to_le_bytes())?;
            }
        }
    }
    w.flush()?;
    Ok(())
}

fn read_array<const K: usize>(r: &mut impl Read) -> Result<[u8; K]> {
    let mut buf = [0u8; K];
    r.read_exact(&mut buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Format("truncated file".into()),
        _ => Error::Io(e),
    })?;
    Ok(buf)
}

pub fn read_trajectory(path: &Path) -> Result<TrajectoryDataset> {
    let mut r = BufReader::new(File::open(path)?);
    if &read_array::<6>(&mut r)? != TRAJECTORY_MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let n = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let d = read_array::<1>(&mut r)?[0] as usize;
    let m = u64::from_le_bytes(read_array(&mut r)?) as usize;
    let dt = f64::from_le_bytes(read_array(&mut r)?);
    let has_pairings = match read_array::<1>(&mut r)?[0] {
        0 => false,
        1 => true,
        b => return Err(Error::Format(format!("bad pairing flag {b}"))),
    };
    let seed = u64::from_le_bytes(read_array(&mut r)?);
    if n == 0 || d == 0 || d > MAX_DIM || m == 0 {
        return Err(Error::Format(format!("bad header (N = {n}, d = {d}, M = {m})")));
    }
    let total = n
        .checked_mul(d)
        .and_then(|w| w.checked_mul(m))
        .ok_or_else(|| Error::Format("header sizes overflow".into()))?;
    let mut frames = Vec::with_capacity(total);
    for _ in 0..total {
        frames.push(f64::from_le_bytes(read_array(&mut r)?));
    }
    let pairings = if has_pairings {
        let mut plans = Vec::with_capacity(m);
        for _ in 0..m {
            let mut perm = Vec::with_capacity(n);
            for _ in 0..n {
                perm.push(u32::from_le_bytes(read_array(&mut r)?) as usize);
            }
            plans.push(PairingPlan::new(perm)?);
        }
        Some(plans)
    } else {
        None
    };
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(Error::Format("trailing bytes".into()));
    }
    TrajectoryDataset::new(n, d, dt, seed, frames, pairings)
}

/// CSV with columns `n,t,i,x_1..x_d`; values use the shortest round-trip form.
pub fn write_csv(path: &Path, data: &TrajectoryDataset) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write!(w, "n,t,i")?;
    for c in 1..=data.dim {
        write!(w, ",x_{c}")?;
    }
    writeln!(w)?;
    for n in 0..data.snapshots() {
        let t = data.time(n);
        for (i, block) in data.frame(n).chunks(data.dim).enumerate() {
            write!(w, "{n},{t},{i}")?;
            for v in block {
                write!(w, ",{v}")?;
            }
            writeln!(w)?;
        }
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{simulate, InitialLaw, Scheme, SimConfig};
    use crate::kernels::{DiffusionMode, KernelFn, KernelSpec};

    fn dataset(scheme: Scheme) -> TrajectoryDataset {
        let cfg = SimConfig {
            n_agents: 6,
            dim: 2,
            dt: 0.05,
            snapshots: 4,
            batch_size: Some(2),
            seed: 3,
            initial: InitialLaw::Uniform { low: -1.0, high: 1.0 },
            domain_half_width: None,
        };
        let k = KernelSpec::from_fns(&KernelFn::CuckerSmale {}, DiffusionMode::PairwiseRadial, &[KernelFn::Constant { value: 0.1 }]).unwrap();
        simulate(&cfg, &k, scheme).unwrap()
    }

    #[test]
    fn binary_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for scheme in [Scheme::Binary, Scheme::Batch] {
            let data = dataset(scheme);
            let path = dir.path().join("t.bin");
            write_trajectory(&path, &data).unwrap();
            assert_eq!(read_trajectory(&path).unwrap(), data);
        }
    }

    #[test]
    fn truncated_and_corrupt_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.bin");
        write_trajectory(&path, &dataset(Scheme::Binary)).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(matches!(read_trajectory(&path), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        std::fs::write(&path, &bad).unwrap();
        assert!(matches!(read_trajectory(&path), Err(Error::Format(_))));
    }

    #[test]
    fn csv_values_parse_back_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let data = dataset(Scheme::Binary);
        let path = dir.path().join("t.csv");
        write_csv(&path, &data).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines = text.lines();
        assert_eq!(lines.next().unwrap(), "n,t,i,x_1,x_2");
        let mut parsed = Vec::new();
        for line in lines {
            let f: Vec<&str> = line.split(',').collect();
            parsed.push(f[3].parse::<f64>().unwrap());
            parsed.push(f[4].parse::<f64>().unwrap());
        }
        assert_eq!(parsed, data.frames_flat());
    }
}
