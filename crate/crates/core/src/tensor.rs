//! Dense tensors and their on-disk container.
//!
//! `.mct` layout (all little-endian, independent of host byte order):
//! magic `MCT1`, one dtype tag byte, one rank byte, `rank` dimensions as
//! u64, then the raw payload element by element. Round-trips are bit-exact,
//! including NaN payloads.
//!
//! Segment tables travel alongside tensors as `.segments.jsonl`: one JSON
//! object per segment, human-inspectable.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"MCT1";
pub const MAX_RANK: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    U32,
    U8,
}

impl Dtype {
    pub fn tag(self) -> u8 {
        match self {
            Dtype::F32 => 1,
            Dtype::U32 => 2,
            Dtype::U8 => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            1 => Some(Dtype::F32),
            2 => Some(Dtype::U32),
            3 => Some(Dtype::U8),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dtype::F32 => "f32",
            Dtype::U32 => "u32",
            Dtype::U8 => "u8",
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 | Dtype::U32 => 4,
            Dtype::U8 => 1,
        }
    }
}

/// Scalar types storable in a [`Tensor`] and serializable to `.mct`.
pub trait Element: Copy + PartialEq + Default + 'static {
    const DTYPE: Dtype;
    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl Element for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Element for u32 {
    const DTYPE: Dtype = Dtype::U32;
    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        u32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]])
    }
}

impl Element for u8 {
    const DTYPE: Dtype = Dtype::U8;
    fn write_le(self, out: &mut Vec<u8>) {
        out.push(self);
    }
    fn read_le(bytes: &[u8]) -> Self {
        bytes[0]
    }
}

/// Dense row-major tensor of rank 1..=4.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Element> Tensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.is_empty() || shape.len() > MAX_RANK {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("rank must be in [1, {MAX_RANK}]"),
            });
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::InvalidShape {
                shape: shape.clone(),
                reason: "element count overflows usize".into(),
            })?;
        if numel != data.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("product of dims is {numel} but data holds {}", data.len()),
            });
        }
        Ok(Tensor { shape, data })
    }

    pub fn filled(shape: Vec<usize>, value: T) -> Result<Self> {
        let numel = shape.iter().product();
        Tensor::new(shape, vec![value; numel])
    }

    pub fn zeros(shape: Vec<usize>) -> Result<Self> {
        Tensor::filled(shape, T::default())
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Shape as (rows, cols); errors unless rank 2.
    pub fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape[..] {
            [a, b] => Ok((a, b)),
            _ => Err(Error::validation(format!(
                "expected rank-2 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    /// Shape as (n, rows, cols); errors unless rank 3.
    pub fn dims3(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [a, b, c] => Ok((a, b, c)),
            _ => Err(Error::validation(format!(
                "expected rank-3 tensor, got shape {:?}",
                self.shape
            ))),
        }
    }

    #[inline]
    pub fn at2(&self, i: usize, j: usize) -> T {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j]
    }

    #[inline]
    pub fn at3(&self, i: usize, j: usize, k: usize) -> T {
        debug_assert_eq!(self.rank(), 3);
        self.data[(i * self.shape[1] + j) * self.shape[2] + k]
    }

    #[inline]
    pub fn set2(&mut self, i: usize, j: usize, value: T) {
        debug_assert_eq!(self.rank(), 2);
        self.data[i * self.shape[1] + j] = value;
    }

    /// Contiguous row-major slice of the `i`-th outermost subtensor.
    pub fn slab(&self, i: usize) -> &[T] {
        let stride: usize = self.shape[1..].iter().product();
        &self.data[i * stride..(i + 1) * stride]
    }
}

/// Writes a tensor to `path` in the `.mct` container.
pub fn write_tensor<T: Element>(path: impl AsRef<Path>, tensor: &Tensor<T>) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(6 + tensor.rank() * 8 + tensor.len() * T::DTYPE.size());
    buf.extend_from_slice(MAGIC);
    buf.push(T::DTYPE.tag());
    buf.push(tensor.rank() as u8);
    for &d in tensor.shape() {
        buf.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in tensor.data() {
        v.write_le(&mut buf);
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut writer = BufWriter::new(file);
    writer.write_all(&buf).map_err(|e| Error::io(path, e))?;
    writer.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Reads a `.mct` tensor of element type `T`; inverse of [`write_tensor`].
pub fn read_tensor<T: Element>(path: impl AsRef<Path>) -> Result<Tensor<T>> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = BufReader::new(file);

    let mut header = [0u8; 6];
    reader
        .read_exact(&mut header)
        .map_err(|e| Error::io(path, e))?;
    if &header[0..4] != MAGIC {
        return Err(Error::BadMagic { path: path.into() });
    }
    let dtype = Dtype::from_tag(header[4]).ok_or(Error::UnsupportedDtype {
        path: path.into(),
        tag: header[4],
    })?;
    if dtype != T::DTYPE {
        return Err(Error::DtypeMismatch {
            path: path.into(),
            found: dtype.name(),
            requested: T::DTYPE.name(),
        });
    }
    let rank = header[5] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::InvalidShape {
            shape: vec![],
            reason: format!("file rank {rank} outside [1, {MAX_RANK}]"),
        });
    }

    let mut shape = Vec::with_capacity(rank);
    let mut dim_buf = [0u8; 8];
    for _ in 0..rank {
        reader
            .read_exact(&mut dim_buf)
            .map_err(|e| Error::io(path, e))?;
        let d = u64::from_le_bytes(dim_buf);
        if d > usize::MAX as u64 {
            return Err(Error::DimOverflow { path: path.into() });
        }
        shape.push(d as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1u64, |acc, &d| acc.checked_mul(d as u64))
        .ok_or(Error::DimOverflow { path: path.into() })?;
    let payload_bytes = numel
        .checked_mul(T::DTYPE.size() as u64)
        .ok_or(Error::DimOverflow { path: path.into() })?;

    let mut payload = Vec::new();
    reader
        .read_to_end(&mut payload)
        .map_err(|e| Error::io(path, e))?;
    if (payload.len() as u64) < payload_bytes {
        return Err(Error::Truncated {
            path: path.into(),
            expected: payload_bytes,
            actual: payload.len() as u64,
        });
    }

    let size = T::DTYPE.size();
    let data: Vec<T> = (0..numel as usize)
        .map(|i| T::read_le(&payload[i * size..i * size + size]))
        .collect();
    Tensor::new(shape, data)
}

/// One fused panoptic segment.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentEntry {
    /// Nonzero id used in the segment-id map (0 is reserved for void).
    pub segment_id: u32,
    /// Semantic class in [1, C].
    pub class_id: u32,
    /// Index of the mask query this segment was fused from.
    pub mask_index: usize,
    /// Pixel count of the segment in the id map.
    pub area: u64,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentTable {
    pub entries: Vec<SegmentEntry>,
}

impl SegmentTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if e.segment_id == 0 {
                return Err(Error::validation("segment_id 0 is reserved for void"));
            }
            if !seen.insert(e.segment_id) {
                return Err(Error::validation(format!(
                    "duplicate segment_id {}",
                    e.segment_id
                )));
            }
            if e.area == 0 {
                return Err(Error::validation(format!(
                    "segment {} has zero area",
                    e.segment_id
                )));
            }
        }
        Ok(())
    }

    pub fn write_jsonl(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut writer = BufWriter::new(file);
        for entry in &self.entries {
            let line = serde_json::to_string(entry).map_err(|e| Error::BadSegmentTable {
                path: path.into(),
                detail: e.to_string(),
            })?;
            writeln!(writer, "{line}").map_err(|e| Error::io(path, e))?;
        }
        writer.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }

    pub fn read_jsonl(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut entries = Vec::new();
        for (lineno, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(|e| Error::io(path, e))?;
            if line.trim().is_empty() {
                continue;
            }
            let entry: SegmentEntry =
                serde_json::from_str(&line).map_err(|e| Error::BadSegmentTable {
                    path: path.into(),
                    detail: format!("line {}: {e}", lineno + 1),
                })?;
            entries.push(entry);
        }
        let table = SegmentTable { entries };
        table.validate()?;
        Ok(table)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_bad_shapes() {
        assert!(Tensor::<f32>::new(vec![], vec![]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 3]).is_err());
        assert!(Tensor::<f32>::new(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(Tensor::<f32>::new(vec![2, 2], vec![0.0; 4]).is_ok());
    }

    #[test]
    fn header_layout_matches_contract() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mct");
        let t = Tensor::new(vec![2, 2], vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        write_tensor(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // magic + dtype + rank + 2 dims + 4 f32
        assert_eq!(bytes.len(), 4 + 1 + 1 + 16 + 16);
        assert_eq!(&bytes[0..4], b"MCT1");
        assert_eq!(bytes[4], Dtype::F32.tag());
        assert_eq!(bytes[5], 2);
        assert_eq!(u64::from_le_bytes(bytes[6..14].try_into().unwrap()), 2);
        let back: Tensor<f32> = read_tensor(&path).unwrap();
        assert_eq!(back, t);
    }

    #[test]
    fn u32_zeros_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("z.mct");
        let t = Tensor::new(vec![3], vec![0u32, 0, 0]).unwrap();
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor::<u32>(&path).unwrap(), t);
    }

    #[test]
    fn nan_payload_preserved_bitwise() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("nan.mct");
        let t = Tensor::new(vec![1], vec![f32::NAN]).unwrap();
        write_tensor(&path, &t).unwrap();
        let back: Tensor<f32> = read_tensor(&path).unwrap();
        assert!(back.data()[0].is_nan());
        assert_eq!(back.data()[0].to_bits(), f32::NAN.to_bits());
    }

    #[test]
    fn bad_magic_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.mct");
        std::fs::write(&path, b"XXXX\x01\x01\x01\x00\x00\x00\x00\x00\x00\x00").unwrap();
        match read_tensor::<f32>(&path) {
            Err(Error::BadMagic { .. }) => {}
            other => panic!("expected BadMagic, got {other:?}"),
        }
    }

    #[test]
    fn truncated_payload_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("trunc.mct");
        let t = Tensor::new(vec![10], vec![1.0f32; 10]).unwrap();
        write_tensor(&path, &t).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        // keep the header plus 8 of the 10 values
        std::fs::write(&path, &bytes[..bytes.len() - 8]).unwrap();
        match read_tensor::<f32>(&path) {
            Err(Error::Truncated {
                expected, actual, ..
            }) => {
                assert_eq!(expected, 40);
                assert_eq!(actual, 32);
            }
            other => panic!("expected Truncated, got {other:?}"),
        }
    }

    #[test]
    fn dtype_mismatch_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("mix.mct");
        let t = Tensor::new(vec![2], vec![7u32, 8]).unwrap();
        write_tensor(&path, &t).unwrap();
        assert!(matches!(
            read_tensor::<f32>(&path),
            Err(Error::DtypeMismatch { .. })
        ));
    }

    #[test]
    fn dim_overflow_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("huge.mct");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(b"MCT1");
        bytes.push(Dtype::F32.tag());
        bytes.push(2);
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        bytes.extend_from_slice(&u64::MAX.to_le_bytes());
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            read_tensor::<f32>(&path),
            Err(Error::DimOverflow { .. })
        ));
    }

    #[test]
    fn segment_table_round_trip_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.segments.jsonl");
        let table = SegmentTable {
            entries: vec![
                SegmentEntry {
                    segment_id: 1,
                    class_id: 2,
                    mask_index: 0,
                    area: 40,
                },
                SegmentEntry {
                    segment_id: 2,
                    class_id: 1,
                    mask_index: 3,
                    area: 9,
                },
            ],
        };
        table.write_jsonl(&path).unwrap();
        assert_eq!(SegmentTable::read_jsonl(&path).unwrap(), table);

        let dup = SegmentTable {
            entries: vec![
                SegmentEntry {
                    segment_id: 1,
                    class_id: 1,
                    mask_index: 0,
                    area: 1,
                },
                SegmentEntry {
                    segment_id: 1,
                    class_id: 2,
                    mask_index: 1,
                    area: 1,
                },
            ],
        };
        assert!(dup.validate().is_err());
    }

    fn arb_shape() -> impl Strategy<Value = Vec<usize>> {
        prop::collection::vec(1usize..5, 1..=4)
    }

    proptest! {
        #[test]
        fn f32_round_trip_is_bit_exact(shape in arb_shape(), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let numel: usize = shape.iter().product();
            let data: Vec<f32> = (0..numel)
                .map(|_| f32::from_bits(rng.random::<u32>()))
                .collect();
            let t = Tensor::new(shape, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.mct");
            write_tensor(&path, &t).unwrap();
            let back: Tensor<f32> = read_tensor(&path).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            for (a, b) in back.data().iter().zip(t.data()) {
                prop_assert_eq!(a.to_bits(), b.to_bits());
            }
        }

        #[test]
        fn u32_round_trip(shape in arb_shape(), seed in any::<u64>()) {
            use rand::{Rng, SeedableRng};
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let numel: usize = shape.iter().product();
            let data: Vec<u32> = (0..numel).map(|_| rng.random()).collect();
            let t = Tensor::new(shape, data).unwrap();
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("rt.mct");
            write_tensor(&path, &t).unwrap();
            prop_assert_eq!(read_tensor::<u32>(&path).unwrap(), t);
        }
    }
}
