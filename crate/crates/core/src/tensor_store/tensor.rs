//! The MTNS tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size        field
//! 0       4           magic "MTNS"
//! 4       1           version (1)
//! 5       1           dtype (0 = f32, 1 = u32)
//! 6       1           rank (1..=4)
//! 7       1           padding (0)
//! 8       8 * rank    dims, u64 each, all >= 1
//! ...     4 * numel   row-major payload
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{Matrix, Vector};

pub const MAGIC: [u8; 4] = *b"MTNS";
pub const VERSION: u8 = 1;
pub const MAX_RANK: usize = 4;
const HEADER_LEN: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32,
    U32,
}

impl DType {
    fn code(self) -> u8 {
        match self {
            DType::F32 => 0,
            DType::U32 => 1,
        }
    }

    fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::U32),
            other => Err(Error::Format(format!("unknown dtype byte {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U32(Vec<u32>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U32(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn dtype(&self) -> DType {
        match self {
            Payload::F32(_) => DType::F32,
            Payload::U32(_) => DType::U32,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TensorFile {
    dims: Vec<usize>,
    payload: Payload,
}

impl TensorFile {
    pub fn new(dims: Vec<usize>, payload: Payload) -> Result<Self> {
        if dims.is_empty() || dims.len() > MAX_RANK {
            return Err(Error::Format(format!(
                "rank {} outside 1..={MAX_RANK}",
                dims.len()
            )));
        }
        if dims.contains(&0) {
            return Err(Error::Format(format!("zero-length dimension in {dims:?}")));
        }
        let numel = checked_numel(&dims).ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
        if numel != payload.len() {
            return Err(Error::shape(format!(
                "dims {dims:?} need {numel} values, payload has {}",
                payload.len()
            )));
        }
        Ok(Self { dims, payload })
    }

    pub fn f32(dims: Vec<usize>, values: Vec<f32>) -> Result<Self> {
        Self::new(dims, Payload::F32(values))
    }

    pub fn u32(dims: Vec<usize>, values: Vec<u32>) -> Result<Self> {
        Self::new(dims, Payload::U32(values))
    }

    pub fn from_matrix(m: &Matrix) -> Result<Self> {
        Self::f32(
            vec![m.rows(), m.cols()],
            m.data().iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn from_vector(v: &Vector) -> Result<Self> {
        Self::f32(vec![v.dim()], v.as_slice().iter().map(|&x| x as f32).collect())
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn dtype(&self) -> DType {
        self.payload.dtype()
    }

    pub fn payload(&self) -> &Payload {
        &self.payload
    }

    pub fn as_f32(&self) -> Result<&[f32]> {
        match &self.payload {
            Payload::F32(v) => Ok(v),
            Payload::U32(_) => Err(Error::Format("expected f32 tensor, found u32".into())),
        }
    }

    pub fn as_u32(&self) -> Result<&[u32]> {
        match &self.payload {
            Payload::U32(v) => Ok(v),
            Payload::F32(_) => Err(Error::Format("expected u32 tensor, found f32".into())),
        }
    }

    /// Interpret a rank-2 f32 tensor as a matrix.
    pub fn to_matrix(&self) -> Result<Matrix> {
        if self.rank() != 2 {
            return Err(Error::shape(format!(
                "expected a rank-2 tensor, found dims {:?}",
                self.dims
            )));
        }
        let data = self.as_f32()?.iter().map(|&v| v as f64).collect();
        Matrix::new(self.dims[0], self.dims[1], data)
    }

    /// Interpret a rank-1 f32 tensor as a vector.
    pub fn to_vector(&self) -> Result<Vector> {
        if self.rank() != 1 {
            return Err(Error::shape(format!(
                "expected a rank-1 tensor, found dims {:?}",
                self.dims
            )));
        }
        Vector::new(self.as_f32()?.iter().map(|&v| v as f64).collect())
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_LEN + 8 * self.rank() + 4 * self.payload.len());
        out.extend_from_slice(&MAGIC);
        out.push(VERSION);
        out.push(self.dtype().code());
        out.push(self.rank() as u8);
        out.push(0);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        match &self.payload {
            Payload::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            Payload::U32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Format(format!(
                "{} bytes is shorter than the header",
                bytes.len()
            )));
        }
        if bytes[..4] != MAGIC {
            return Err(Error::Format(format!("bad magic {:?}", &bytes[..4])));
        }
        if bytes[4] != VERSION {
            return Err(Error::Format(format!("unsupported version {}", bytes[4])));
        }
        let dtype = DType::from_code(bytes[5])?;
        let rank = bytes[6] as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Format(format!("rank {rank} outside 1..={MAX_RANK}")));
        }
        if bytes[7] != 0 {
            return Err(Error::Format(format!("nonzero padding byte {}", bytes[7])));
        }
        let dims_end = HEADER_LEN + 8 * rank;
        if bytes.len() < dims_end {
            return Err(Error::Corruption("truncated dimension table".into()));
        }
        let mut dims = Vec::with_capacity(rank);
        for chunk in bytes[HEADER_LEN..dims_end].chunks_exact(8) {
            let d = u64::from_le_bytes(chunk.try_into().expect("8-byte chunk"));
            let d = usize::try_from(d)
                .map_err(|_| Error::Format(format!("dimension {d} does not fit in memory")))?;
            if d == 0 {
                return Err(Error::Format("zero-length dimension".into()));
            }
            dims.push(d);
        }
        let numel = checked_numel(&dims)
            .filter(|n| n.checked_mul(4).is_some())
            .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
        let body = &bytes[dims_end..];
        if body.len() != numel * 4 {
            return Err(Error::Corruption(format!(
                "payload holds {} bytes, dims {:?} need {}",
                body.len(),
                dims,
                numel * 4
            )));
        }
        let words = body.chunks_exact(4).map(|c| c.try_into().expect("4-byte chunk"));
        let payload = match dtype {
            DType::F32 => Payload::F32(words.map(f32::from_le_bytes).collect()),
            DType::U32 => Payload::U32(words.map(u32::from_le_bytes).collect()),
        };
        Ok(Self { dims, payload })
    }
}

fn checked_numel(dims: &[usize]) -> Option<usize> {
    dims.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &TensorFile) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, t.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<TensorFile> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    TensorFile::decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn f32_round_trip_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.mtns");
        let t = TensorFile::f32(vec![2, 3], vec![1.0, -2.5, 3.25, 0.0, f32::MIN_POSITIVE, 7e9]).unwrap();
        write_tensor(&path, &t).unwrap();
        assert_eq!(read_tensor(&path).unwrap(), t);
    }

    #[test]
    fn u32_label_grid_round_trip() {
        let labels: Vec<u32> = (0..16).map(|i| (i % 4) as u32 * 3).collect();
        let t = TensorFile::u32(vec![4, 4], labels).unwrap();
        assert_eq!(TensorFile::decode(&t.encode()).unwrap(), t);
    }

    #[test]
    fn header_bytes_are_exact() {
        let t = TensorFile::u32(vec![2], vec![1, 0x0102_0304]).unwrap();
        let bytes = t.encode();
        assert_eq!(
            bytes,
            [
                b'M', b'T', b'N', b'S', 1, 1, 1, 0, //
                2, 0, 0, 0, 0, 0, 0, 0, //
                1, 0, 0, 0, 4, 3, 2, 1,
            ]
        );
    }

    #[test]
    fn wrong_magic_is_a_format_error() {
        let mut bytes = TensorFile::f32(vec![1], vec![1.0]).unwrap().encode();
        bytes[0] = b'X';
        assert!(matches!(TensorFile::decode(&bytes), Err(Error::Format(_))));
    }

    #[test]
    fn bad_version_dtype_rank() {
        let good = TensorFile::f32(vec![1], vec![1.0]).unwrap().encode();
        for (offset, value) in [(4, 2u8), (5, 9), (6, 0), (6, 5), (7, 1)] {
            let mut b = good.clone();
            b[offset] = value;
            assert!(
                matches!(TensorFile::decode(&b), Err(Error::Format(_))),
                "byte {offset} = {value}"
            );
        }
    }

    #[test]
    fn truncation_is_corruption() {
        let bytes = TensorFile::f32(vec![2, 2], vec![1.0; 4]).unwrap().encode();
        let cut = &bytes[..bytes.len() - 1];
        assert!(matches!(TensorFile::decode(cut), Err(Error::Corruption(_))));
        assert!(matches!(
            TensorFile::decode(&bytes[..12]),
            Err(Error::Corruption(_))
        ));
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(TensorFile::decode(&long), Err(Error::Corruption(_))));
    }

    #[test]
    fn huge_dims_do_not_allocate() {
        let mut b = vec![b'M', b'T', b'N', b'S', 1, 0, 2, 0];
        b.extend_from_slice(&u64::MAX.to_le_bytes());
        b.extend_from_slice(&u64::MAX.to_le_bytes());
        assert!(TensorFile::decode(&b).is_err());
    }

    #[test]
    fn construction_validates() {
        assert!(TensorFile::f32(vec![], vec![]).is_err());
        assert!(TensorFile::f32(vec![1, 1, 1, 1, 1], vec![0.0]).is_err());
        assert!(TensorFile::f32(vec![2, 0], vec![]).is_err());
        assert!(TensorFile::f32(vec![2, 2], vec![0.0; 3]).is_err());
    }

    fn arb_tensor() -> impl Strategy<Value = TensorFile> {
        let dims = proptest::collection::vec(1usize..5, 1..=4);
        (dims, any::<bool>()).prop_flat_map(|(dims, is_f32)| {
            let n: usize = dims.iter().product();
            if is_f32 {
                proptest::collection::vec(any::<u32>(), n)
                    .prop_map(move |bits| {
                        // arbitrary bit patterns, NaN payloads included
                        TensorFile::f32(dims.clone(), bits.into_iter().map(f32::from_bits).collect()).unwrap()
                    })
                    .boxed()
            } else {
                proptest::collection::vec(any::<u32>(), n)
                    .prop_map(move |v| TensorFile::u32(dims.clone(), v).unwrap())
                    .boxed()
            }
        })
    }

    fn bit_pattern(t: &TensorFile) -> (Vec<usize>, Vec<u32>) {
        let bits = match t.payload() {
            Payload::F32(v) => v.iter().map(|x| x.to_bits()).collect(),
            Payload::U32(v) => v.clone(),
        };
        (t.dims().to_vec(), bits)
    }

    proptest! {
        #[test]
        fn decode_inverts_encode_bit_exactly(t in arb_tensor()) {
            let back = TensorFile::decode(&t.encode()).unwrap();
            prop_assert_eq!(back.dtype(), t.dtype());
            prop_assert_eq!(bit_pattern(&back), bit_pattern(&t));
        }

        #[test]
        fn decode_never_panics(bytes in proptest::collection::vec(any::<u8>(), 0..64)) {
            let _ = TensorFile::decode(&bytes);
        }
    }
}
