//! Append-only evolution-cube store.
//!
//! ```text
//! header : "EVOC" | version u32 | run_id u64
//! record : body_len u64 | body | sha256(body)
//! body   : sample_id u64 | depth u32 | phase_boundary u32 | value_bytes u8
//!          | rank u32 | dims u64 × rank | checkpoint_hash [32]
//!          | support solver 5 × f64 | selfish solver 5 × f64
//!          | payload (depth × prod(dims) values, f64 or f32)
//! footer : "EVIX" | count u64 | (sample_id u64, offset u64) × count
//!          | footer_start u64 | "EVIX"
//! ```
//!
//! All integers are little-endian. Reopening a store for appending drops
//! the footer; a store without a valid footer (interrupted writer) is
//! recovered by scanning records and cutting at the first torn one.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use crate::data::cube::EvolutionCube;
use crate::error::{Error, Result};
use crate::optim::SolverConfig;
use crate::tensor::Tensor;

const MAGIC: &[u8; 4] = b"EVOC";
const FOOTER_MAGIC: &[u8; 4] = b"EVIX";
const VERSION: u32 = 1;
const HEADER_LEN: u64 = 16;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Precision {
    F64,
    F32,
}

impl Precision {
    fn bytes(self) -> u8 {
        match self {
            Precision::F64 => 8,
            Precision::F32 => 4,
        }
    }
}

fn solver_bytes(out: &mut Vec<u8>, s: &SolverConfig) {
    for v in [s.learning_rate, s.weight_decay, s.beta1, s.beta2, s.epsilon] {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn encode_body(cube: &EvolutionCube, precision: Precision) -> Result<Vec<u8>> {
    cube.validate()?;
    let shape = cube.slice_shape().to_vec();
    let mut b = Vec::new();
    b.extend_from_slice(&cube.sample_id.to_le_bytes());
    b.extend_from_slice(&(cube.depth() as u32).to_le_bytes());
    b.extend_from_slice(&(cube.phase_boundary as u32).to_le_bytes());
    b.push(precision.bytes());
    b.extend_from_slice(&(shape.len() as u32).to_le_bytes());
    for d in &shape {
        b.extend_from_slice(&(*d as u64).to_le_bytes());
    }
    b.extend_from_slice(&cube.checkpoint_hash);
    solver_bytes(&mut b, &cube.support_solver);
    solver_bytes(&mut b, &cube.selfish_solver);
    for s in &cube.slices {
        match precision {
            Precision::F64 => b.extend_from_slice(&s.to_le_bytes()),
            Precision::F32 => {
                for v in s.data() {
                    b.extend_from_slice(&(*v as f32).to_le_bytes());
                }
            }
        }
    }
    Ok(b)
}

struct Cursor<'a> {
    b: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos + n;
        let s = self
            .b
            .get(self.pos..end)
            .ok_or_else(|| Error::Corruption(format!("record body truncated at {}", self.pos)))?;
        self.pos = end;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn solver(&mut self) -> Result<SolverConfig> {
        Ok(SolverConfig {
            learning_rate: self.f64()?,
            weight_decay: self.f64()?,
            beta1: self.f64()?,
            beta2: self.f64()?,
            epsilon: self.f64()?,
        })
    }
}

fn decode_body(body: &[u8]) -> Result<EvolutionCube> {
    let mut c = Cursor { b: body, pos: 0 };
    let sample_id = c.u64()?;
    let depth = c.u32()? as usize;
    let phase_boundary = c.u32()? as usize;
    let width = c.u8()?;
    let rank = c.u32()? as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        shape.push(c.u64()? as usize);
    }
    let checkpoint_hash: [u8; 32] = c.take(32)?.try_into().unwrap();
    let support_solver = c.solver()?;
    let selfish_solver = c.solver()?;
    let per_slice: usize = shape.iter().product();
    let mut slices = Vec::with_capacity(depth);
    for _ in 0..depth {
        let data: Vec<f64> = match width {
            8 => c
                .take(per_slice * 8)?
                .chunks_exact(8)
                .map(|x| f64::from_le_bytes(x.try_into().unwrap()))
                .collect(),
            4 => c
                .take(per_slice * 4)?
                .chunks_exact(4)
                .map(|x| f32::from_le_bytes(x.try_into().unwrap()) as f64)
                .collect(),
            w => return Err(Error::Corruption(format!("unknown value width {w}"))),
        };
        slices.push(Tensor::new(shape.clone(), data)?);
    }
    if c.pos != body.len() {
        return Err(Error::Corruption("record body has trailing bytes".into()));
    }
    let cube = EvolutionCube {
        sample_id,
        slices,
        phase_boundary,
        checkpoint_hash,
        support_solver,
        selfish_solver,
    };
    cube.validate()
        .map_err(|e| Error::Corruption(format!("invalid cube record: {e}")))?;
    Ok(cube)
}

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> Error + '_ {
    move |e| Error::io(path, e)
}

fn read_header(file: &mut File, path: &Path) -> Result<u64> {
    let mut h = [0u8; HEADER_LEN as usize];
    file.seek(SeekFrom::Start(0)).map_err(io_err(path))?;
    file.read_exact(&mut h)
        .map_err(|_| Error::Corruption(format!("{}: missing store header", path.display())))?;
    if &h[..4] != MAGIC {
        return Err(Error::Corruption(format!(
            "{}: not an EVOC cube store",
            path.display()
        )));
    }
    let version = u32::from_le_bytes(h[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(Error::Corruption(format!(
            "{}: unsupported store version {version}",
            path.display()
        )));
    }
    Ok(u64::from_le_bytes(h[8..16].try_into().unwrap()))
}

/// Parses the footer, if the file ends with a consistent one.
fn read_footer(file: &mut File, len: u64) -> Option<(u64, BTreeMap<u64, u64>)> {
    if len < HEADER_LEN + 24 {
        return None;
    }
    let mut tail = [0u8; 12];
    file.seek(SeekFrom::Start(len - 12)).ok()?;
    file.read_exact(&mut tail).ok()?;
    if &tail[8..] != FOOTER_MAGIC {
        return None;
    }
    let start = u64::from_le_bytes(tail[..8].try_into().unwrap());
    if start < HEADER_LEN || start + 24 > len {
        return None;
    }
    let mut buf = vec![0u8; (len - start) as usize];
    file.seek(SeekFrom::Start(start)).ok()?;
    file.read_exact(&mut buf).ok()?;
    if &buf[..4] != FOOTER_MAGIC {
        return None;
    }
    let count = u64::from_le_bytes(buf[4..12].try_into().unwrap());
    if 12 + count.checked_mul(16)? + 12 != buf.len() as u64 {
        return None;
    }
    let mut index = BTreeMap::new();
    for e in buf[12..12 + 16 * count as usize].chunks_exact(16) {
        let id = u64::from_le_bytes(e[..8].try_into().unwrap());
        let off = u64::from_le_bytes(e[8..].try_into().unwrap());
        if off < HEADER_LEN || off >= start {
            return None;
        }
        index.insert(id, off);
    }
    Some((start, index))
}

/// Walks records from the header, returning the index of intact records and
/// the offset just past the last one.
fn scan_records(file: &mut File, len: u64, path: &Path) -> Result<(u64, BTreeMap<u64, u64>)> {
    let mut index = BTreeMap::new();
    let mut pos = HEADER_LEN;
    file.seek(SeekFrom::Start(pos)).map_err(io_err(path))?;
    loop {
        if pos + 8 > len {
            break;
        }
        let mut lb = [0u8; 8];
        file.seek(SeekFrom::Start(pos)).map_err(io_err(path))?;
        file.read_exact(&mut lb).map_err(io_err(path))?;
        let body_len = u64::from_le_bytes(lb);
        let end = match pos.checked_add(8 + 32).and_then(|v| v.checked_add(body_len)) {
            Some(e) if e <= len => e,
            _ => break,
        };
        let mut body = vec![0u8; body_len as usize + 32];
        file.read_exact(&mut body).map_err(io_err(path))?;
        let (b, h) = body.split_at(body_len as usize);
        if Sha256::digest(b).as_slice() != h || b.len() < 8 {
            break;
        }
        let id = u64::from_le_bytes(b[..8].try_into().unwrap());
        index.insert(id, pos);
        pos = end;
    }
    Ok((pos, index))
}

pub struct CubeStoreWriter {
    file: File,
    path: PathBuf,
    run_id: u64,
    precision: Precision,
    index: BTreeMap<u64, u64>,
    end: u64,
}

impl CubeStoreWriter {
    /// Creates (or truncates) a store.
    pub fn create(path: &Path, run_id: u64, precision: Precision) -> Result<Self> {
        let mut file = File::create(path).map_err(io_err(path))?;
        let mut h = Vec::with_capacity(HEADER_LEN as usize);
        h.extend_from_slice(MAGIC);
        h.extend_from_slice(&VERSION.to_le_bytes());
        h.extend_from_slice(&run_id.to_le_bytes());
        file.write_all(&h).map_err(io_err(path))?;
        Ok(CubeStoreWriter {
            file,
            path: path.to_path_buf(),
            run_id,
            precision,
            index: BTreeMap::new(),
            end: HEADER_LEN,
        })
    }

    /// Reopens an existing store for appending. The footer is removed, and a
    /// torn trailing record left by an interrupted writer is cut off.
    pub fn open_append(path: &Path, run_id: u64, precision: Precision) -> Result<Self> {
        let mut file = OpenOptions::new()
            .read(true)
            .write(true)
            .open(path)
            .map_err(io_err(path))?;
        let stored_run = read_header(&mut file, path)?;
        if stored_run != run_id {
            return Err(Error::Argument(format!(
                "{} belongs to run {stored_run:#x}, not {run_id:#x}",
                path.display()
            )));
        }
        let len = file.metadata().map_err(io_err(path))?.len();
        let (end, index) = match read_footer(&mut file, len) {
            Some(found) => found,
            None => scan_records(&mut file, len, path)?,
        };
        if end < len {
            log::warn!(
                "{}: dropping {} trailing bytes",
                path.display(),
                len - end
            );
        }
        file.set_len(end).map_err(io_err(path))?;
        file.seek(SeekFrom::Start(end)).map_err(io_err(path))?;
        Ok(CubeStoreWriter {
            file,
            path: path.to_path_buf(),
            run_id,
            precision,
            index,
            end,
        })
    }

    pub fn run_id(&self) -> u64 {
        self.run_id
    }

    pub fn write(&mut self, cube: &EvolutionCube) -> Result<()> {
        let body = encode_body(cube, self.precision)?;
        let hash = Sha256::digest(&body);
        let mut rec = Vec::with_capacity(body.len() + 40);
        rec.extend_from_slice(&(body.len() as u64).to_le_bytes());
        rec.extend_from_slice(&body);
        rec.extend_from_slice(&hash);
        self.file.write_all(&rec).map_err(io_err(&self.path))?;
        self.index.insert(cube.sample_id, self.end);
        self.end += rec.len() as u64;
        Ok(())
    }

    /// Writes the index footer and syncs the file.
    pub fn finish(mut self) -> Result<()> {
        let mut f = Vec::with_capacity(24 + 16 * self.index.len());
        f.extend_from_slice(FOOTER_MAGIC);
        f.extend_from_slice(&(self.index.len() as u64).to_le_bytes());
        for (id, off) in &self.index {
            f.extend_from_slice(&id.to_le_bytes());
            f.extend_from_slice(&off.to_le_bytes());
        }
        f.extend_from_slice(&self.end.to_le_bytes());
        f.extend_from_slice(FOOTER_MAGIC);
        self.file.write_all(&f).map_err(io_err(&self.path))?;
        self.file.sync_all().map_err(io_err(&self.path))
    }
}

pub struct CubeStoreReader {
    file: File,
    path: PathBuf,
    run_id: u64,
    len: u64,
    index: BTreeMap<u64, u64>,
}

impl CubeStoreReader {
    pub fn open(path: &Path) -> Result<Self> {
        let mut file = File::open(path).map_err(io_err(path))?;
        let run_id = read_header(&mut file, path)?;
        let len = file.metadata().map_err(io_err(path))?.len();
        let index = match read_footer(&mut file, len) {
            Some((_, index)) => index,
            None => scan_records(&mut file, len, path)?.1,
        };
        Ok(CubeStoreReader {
            file,
            path: path.to_path_buf(),
            run_id,
            len,
            index,
        })
    }

    /// Opens a store and checks that it was written for `run_id`.
    pub fn open_run(path: &Path, run_id: u64) -> Result<Self> {
        let reader = Self::open(path)?;
        if reader.run_id != run_id {
            return Err(Error::Argument(format!(
                "{} belongs to run {:#x}, not {run_id:#x}",
                path.display(),
                reader.run_id
            )));
        }
        Ok(reader)
    }

    pub fn run_id(&self) -> u64 {
        self.run_id
    }

    pub fn sample_ids(&self) -> Vec<u64> {
        self.index.keys().copied().collect()
    }

    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }

    /// Reads one cube, verifying the record hash and, when given, the
    /// checkpoint the cube must have been evolved from.
    pub fn read(
        &mut self,
        sample_id: u64,
        expected_checkpoint: Option<&[u8; 32]>,
    ) -> Result<EvolutionCube> {
        let off = *self.index.get(&sample_id).ok_or(Error::Lookup(sample_id))?;
        let path = self.path.clone();
        self.file.seek(SeekFrom::Start(off)).map_err(io_err(&path))?;
        let mut lb = [0u8; 8];
        self.file
            .read_exact(&mut lb)
            .map_err(|_| Error::Corruption(format!("record {sample_id} truncated")))?;
        let body_len = u64::from_le_bytes(lb);
        if off.checked_add(8 + 32).and_then(|v| v.checked_add(body_len)).is_none_or(|e| e > self.len) {
            return Err(Error::Corruption(format!("record {sample_id} length runs past the file")));
        }
        let body_len = body_len as usize;
        let mut buf = vec![0u8; body_len + 32];
        self.file
            .read_exact(&mut buf)
            .map_err(|_| Error::Corruption(format!("record {sample_id} truncated")))?;
        let (body, hash) = buf.split_at(body_len);
        if Sha256::digest(body).as_slice() != hash {
            return Err(Error::Corruption(format!(
                "record hash mismatch for sample {sample_id}"
            )));
        }
        let cube = decode_body(body)?;
        if cube.sample_id != sample_id {
            return Err(Error::Corruption(format!(
                "index points sample {sample_id} at a record for {}",
                cube.sample_id
            )));
        }
        if let Some(expected) = expected_checkpoint {
            if &cube.checkpoint_hash != expected {
                return Err(Error::Corruption(format!(
                    "cube {sample_id} was evolved from a different checkpoint"
                )));
            }
        }
        Ok(cube)
    }

    /// Every cube in sample-id order.
    pub fn read_all(&mut self) -> Result<Vec<EvolutionCube>> {
        self.sample_ids()
            .into_iter()
            .map(|id| self.read(id, None))
            .collect()
    }
}

/// Writes `cubes` as a fresh store.
pub fn write_store(
    path: &Path,
    run_id: u64,
    precision: Precision,
    cubes: &[EvolutionCube],
) -> Result<()> {
    let mut w = CubeStoreWriter::create(path, run_id, precision)?;
    for c in cubes {
        w.write(c)?;
    }
    w.finish()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cube(id: u64, t: usize) -> EvolutionCube {
        EvolutionCube {
            sample_id: id,
            slices: (0..t)
                .map(|i| Tensor::from_fn(&[3], |j| (id as f64 + 0.1) * (i * 3 + j) as f64 / 7.0))
                .collect(),
            phase_boundary: t / 2,
            checkpoint_hash: [id as u8; 32],
            support_solver: SolverConfig::SUPPORT,
            selfish_solver: SolverConfig::SELFISH,
        }
    }

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.evoc");
        let cubes: Vec<_> = (0..5).map(|i| cube(i, 4)).collect();
        write_store(&path, 9, Precision::F64, &cubes).unwrap();
        let mut r = CubeStoreReader::open_run(&path, 9).unwrap();
        assert_eq!(r.read_all().unwrap(), cubes);
        assert!(matches!(r.read(77, None), Err(Error::Lookup(77))));
        assert!(CubeStoreReader::open_run(&path, 8).is_err());
    }

    #[test]
    fn wrong_checkpoint_is_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.evoc");
        write_store(&path, 1, Precision::F64, &[cube(2, 3)]).unwrap();
        let mut r = CubeStoreReader::open(&path).unwrap();
        assert!(r.read(2, Some(&[2; 32])).is_ok());
        assert!(matches!(r.read(2, Some(&[0; 32])), Err(Error::Corruption(_))));
    }

    #[test]
    fn append_after_reopen() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.evoc");
        write_store(&path, 1, Precision::F64, &[cube(0, 3), cube(1, 3)]).unwrap();
        let mut w = CubeStoreWriter::open_append(&path, 1, Precision::F64).unwrap();
        w.write(&cube(2, 3)).unwrap();
        w.finish().unwrap();
        let mut r = CubeStoreReader::open(&path).unwrap();
        assert_eq!(r.sample_ids(), vec![0, 1, 2]);
        assert_eq!(r.read(2, None).unwrap(), cube(2, 3));
    }

    #[test]
    fn torn_tail_is_truncated() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.evoc");
        {
            let mut w = CubeStoreWriter::create(&path, 1, Precision::F64).unwrap();
            w.write(&cube(0, 3)).unwrap();
            w.write(&cube(1, 3)).unwrap();
            // no finish: simulate a crash mid-record
        }
        let len = std::fs::metadata(&path).unwrap().len();
        let f = OpenOptions::new().write(true).open(&path).unwrap();
        f.set_len(len - 10).unwrap();

        let mut r = CubeStoreReader::open(&path).unwrap();
        assert_eq!(r.sample_ids(), vec![0]);
        assert_eq!(r.read(0, None).unwrap(), cube(0, 3));

        let mut w = CubeStoreWriter::open_append(&path, 1, Precision::F64).unwrap();
        w.write(&cube(1, 3)).unwrap();
        w.finish().unwrap();
        let mut r = CubeStoreReader::open(&path).unwrap();
        assert_eq!(r.read_all().unwrap(), vec![cube(0, 3), cube(1, 3)]);
    }

    #[test]
    fn single_precision_payload() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.evoc");
        let c = cube(4, 2);
        write_store(&path, 1, Precision::F32, std::slice::from_ref(&c)).unwrap();
        let back = CubeStoreReader::open(&path).unwrap().read(4, None).unwrap();
        for (a, b) in back.slices.iter().zip(&c.slices) {
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x, *y as f32 as f64);
            }
        }
    }
}
