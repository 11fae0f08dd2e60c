//! Dense voxel grids, coordinate channels and the VOL1 on-disk format.
//!
//! Every volumetric quantity in the crate (lesion masks, substrates,
//! statistic maps, inferred maps) travels as a [`VolumeGrid`]. Data are
//! stored row-major with the last axis fastest.

use std::io::{self, Read, Write};

use thiserror::Error;

pub const VOL1_MAGIC: [u8; 4] = *b"VOL1";

#[derive(Debug, Error)]
pub enum GridError {
    #[error("grid must have 2 or 3 axes, got {0}")]
    Rank(usize),
    #[error("axis {axis} has extent {extent}; coordinate fields need at least 2")]
    DegenerateAxis { axis: usize, extent: usize },
    #[error("axis extents must be positive: {0:?}")]
    ZeroExtent(Vec<usize>),
    #[error("payload has {got} values but dims {dims:?} require {expected}")]
    PayloadLength {
        dims: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("binary grid value {value} at index {index} is not 0 or 1")]
    NotBinary { index: usize, value: u8 },
    #[error("real grid value at index {0} is not finite")]
    NonFinite(usize),
    #[error("grid dims differ: {0:?} vs {1:?}")]
    DimsMismatch(Vec<usize>, Vec<usize>),
    #[error("bad magic bytes {0:?}, expected VOL1")]
    BadMagic([u8; 4]),
    #[error("unknown dtype byte {0}")]
    BadDtype(u8),
    #[error("truncated VOL1 stream")]
    Truncated,
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    Binary,
    Real,
}

impl Dtype {
    fn code(self) -> u8 {
        match self {
            Dtype::Binary => 0,
            Dtype::Real => 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Payload {
    Binary(Vec<u8>),
    Real(Vec<f32>),
}

/// A dense scalar field over a 2D or 3D voxel grid.
///
/// Binary grids hold only 0/1; real grids hold finite `f32` values, which
/// is also the on-disk precision, so a write/read cycle is lossless.
#[derive(Debug, Clone, PartialEq)]
pub struct VolumeGrid {
    dims: Vec<usize>,
    payload: Payload,
}

fn check_dims(dims: &[usize]) -> Result<usize, GridError> {
    if !(2..=3).contains(&dims.len()) {
        return Err(GridError::Rank(dims.len()));
    }
    if dims.iter().any(|&d| d == 0) {
        return Err(GridError::ZeroExtent(dims.to_vec()));
    }
    Ok(dims.iter().product())
}

impl VolumeGrid {
    pub fn binary(dims: &[usize], data: Vec<u8>) -> Result<Self, GridError> {
        let expected = check_dims(dims)?;
        if data.len() != expected {
            return Err(GridError::PayloadLength {
                dims: dims.to_vec(),
                expected,
                got: data.len(),
            });
        }
        if let Some((index, &value)) = data.iter().enumerate().find(|(_, &v)| v > 1) {
            return Err(GridError::NotBinary { index, value });
        }
        Ok(Self {
            dims: dims.to_vec(),
            payload: Payload::Binary(data),
        })
    }

    pub fn real(dims: &[usize], data: Vec<f32>) -> Result<Self, GridError> {
        let expected = check_dims(dims)?;
        if data.len() != expected {
            return Err(GridError::PayloadLength {
                dims: dims.to_vec(),
                expected,
                got: data.len(),
            });
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(GridError::NonFinite(i));
        }
        Ok(Self {
            dims: dims.to_vec(),
            payload: Payload::Real(data),
        })
    }

    /// Real grid from `f64` values (rounded to `f32`).
    pub fn real_from_f64(dims: &[usize], data: &[f64]) -> Result<Self, GridError> {
        Self::real(dims, data.iter().map(|&v| v as f32).collect())
    }

    /// Binary grid from a boolean mask.
    pub fn from_mask(dims: &[usize], mask: &[bool]) -> Result<Self, GridError> {
        Self::binary(dims, mask.iter().map(|&b| u8::from(b)).collect())
    }

    pub fn zeros_binary(dims: &[usize]) -> Result<Self, GridError> {
        let n = check_dims(dims)?;
        Self::binary(dims, vec![0; n])
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn ndim(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        match &self.payload {
            Payload::Binary(d) => d.len(),
            Payload::Real(d) => d.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> Dtype {
        match self.payload {
            Payload::Binary(_) => Dtype::Binary,
            Payload::Real(_) => Dtype::Real,
        }
    }

    pub fn as_binary(&self) -> Option<&[u8]> {
        match &self.payload {
            Payload::Binary(d) => Some(d),
            Payload::Real(_) => None,
        }
    }

    pub fn as_real(&self) -> Option<&[f32]> {
        match &self.payload {
            Payload::Real(d) => Some(d),
            Payload::Binary(_) => None,
        }
    }

    /// Value at flat index as `f64`, whatever the dtype.
    pub fn get(&self, index: usize) -> f64 {
        match &self.payload {
            Payload::Binary(d) => f64::from(d[index]),
            Payload::Real(d) => f64::from(d[index]),
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        (0..self.len()).map(|i| self.get(i)).collect()
    }

    /// Nonzero voxels as a boolean mask.
    pub fn mask(&self) -> Vec<bool> {
        (0..self.len()).map(|i| self.get(i) != 0.0).collect()
    }

    /// Flat indices of nonzero voxels.
    pub fn nonzero(&self) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.get(i) != 0.0).collect()
    }

    pub fn count_nonzero(&self) -> usize {
        (0..self.len()).filter(|&i| self.get(i) != 0.0).count()
    }

    pub fn index_of(&self, coord: &[usize]) -> usize {
        flat_index(&self.dims, coord)
    }

    pub fn coord_of(&self, index: usize) -> Vec<usize> {
        unflatten(&self.dims, index)
    }
}

/// Row-major flat index, last axis fastest.
pub fn flat_index(dims: &[usize], coord: &[usize]) -> usize {
    coord
        .iter()
        .zip(dims)
        .fold(0, |acc, (&c, &d)| acc * d + c)
}

pub fn unflatten(dims: &[usize], mut index: usize) -> Vec<usize> {
    let mut coord = vec![0; dims.len()];
    for axis in (0..dims.len()).rev() {
        coord[axis] = index % dims[axis];
        index /= dims[axis];
    }
    coord
}

/// One affine channel per axis, spanning exactly [-1, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateField {
    dims: Vec<usize>,
    channels: Vec<Vec<f64>>,
}

impl CoordinateField {
    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn channels(&self) -> &[Vec<f64>] {
        &self.channels
    }

    pub fn channel(&self, axis: usize) -> &[f64] {
        &self.channels[axis]
    }
}

pub fn make_coordinate_field(dims: &[usize]) -> Result<CoordinateField, GridError> {
    if let Some((axis, &extent)) = dims.iter().enumerate().find(|(_, &d)| d < 2) {
        return Err(GridError::DegenerateAxis { axis, extent });
    }
    let n: usize = dims.iter().product();
    let channels = (0..dims.len())
        .map(|axis| {
            let span = (dims[axis] - 1) as f64;
            (0..n)
                .map(|i| {
                    let c = unflatten(dims, i)[axis];
                    2.0 * c as f64 / span - 1.0
                })
                .collect()
        })
        .collect();
    Ok(CoordinateField {
        dims: dims.to_vec(),
        channels,
    })
}

/// Serializes `grid` as VOL1 and returns the number of bytes written.
pub fn write_volume<W: Write>(grid: &VolumeGrid, mut sink: W) -> Result<usize, GridError> {
    let mut buf = Vec::with_capacity(6 + 4 * grid.ndim() + 4 * grid.len());
    buf.extend_from_slice(&VOL1_MAGIC);
    buf.push(grid.ndim() as u8);
    for &d in &grid.dims {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.push(grid.dtype().code());
    match &grid.payload {
        Payload::Binary(d) => buf.extend_from_slice(d),
        Payload::Real(d) => {
            for v in d {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    sink.write_all(&buf)?;
    Ok(buf.len())
}

fn read_exact_or_truncated<R: Read>(source: &mut R, buf: &mut [u8]) -> Result<(), GridError> {
    source.read_exact(buf).map_err(|e| match e.kind() {
        io::ErrorKind::UnexpectedEof => GridError::Truncated,
        _ => GridError::Io(e),
    })
}

pub fn read_volume<R: Read>(mut source: R) -> Result<VolumeGrid, GridError> {
    let mut magic = [0u8; 4];
    read_exact_or_truncated(&mut source, &mut magic)?;
    if magic != VOL1_MAGIC {
        return Err(GridError::BadMagic(magic));
    }
    let mut byte = [0u8; 1];
    read_exact_or_truncated(&mut source, &mut byte)?;
    let ndim = byte[0] as usize;
    if !(2..=3).contains(&ndim) {
        return Err(GridError::Rank(ndim));
    }
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut word = [0u8; 4];
        read_exact_or_truncated(&mut source, &mut word)?;
        dims.push(u32::from_le_bytes(word) as usize);
    }
    let n = check_dims(&dims)?;
    read_exact_or_truncated(&mut source, &mut byte)?;
    match byte[0] {
        0 => {
            let mut data = vec![0u8; n];
            read_exact_or_truncated(&mut source, &mut data)?;
            VolumeGrid::binary(&dims, data)
        }
        1 => {
            let mut raw = vec![0u8; 4 * n];
            read_exact_or_truncated(&mut source, &mut raw)?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            VolumeGrid::real(&dims, data)
        }
        other => Err(GridError::BadDtype(other)),
    }
}

pub fn save_volume(grid: &VolumeGrid, path: &std::path::Path) -> Result<usize, GridError> {
    let file = std::fs::File::create(path)?;
    let mut w = io::BufWriter::new(file);
    let n = write_volume(grid, &mut w)?;
    w.flush()?;
    Ok(n)
}

pub fn load_volume(path: &std::path::Path) -> Result<VolumeGrid, GridError> {
    let file = std::fs::File::open(path)?;
    read_volume(io::BufReader::new(file))
}
