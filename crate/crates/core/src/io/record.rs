use crate::numerics::{DType, Element, Tensor};
use crate::{Error, Result};

/// Dtype-tagged raw tensor payload: `tag u8, rank u32, dims u64…, data`.
#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub dtype: DType,
    pub shape: Vec<usize>,
    pub bytes: Vec<u8>,
}

impl Record {
    pub fn from_tensor<T: Element>(t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        Record {
            dtype: T::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    pub fn from_bytes(bytes: Vec<u8>) -> Self {
        Record {
            dtype: DType::U8,
            shape: vec![bytes.len()],
            bytes,
        }
    }

    /// Decode as `T`, converting between float widths when needed.
    pub fn to_tensor<T: Element>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match self.dtype {
            DType::F32 => self
                .bytes
                .chunks_exact(4)
                .map(|c| T::of(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => self
                .bytes
                .chunks_exact(8)
                .map(|c| T::of(f64::read_le(c)))
                .collect(),
            DType::U8 => {
                return Err(Error::Format(
                    "byte record where a tensor was expected".into(),
                ))
            }
        };
        Tensor::new(self.shape.clone(), data)
    }

    pub fn write(&self, out: &mut Vec<u8>) {
        out.push(self.dtype as u8);
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.extend_from_slice(&self.bytes);
    }

    pub fn read(r: &mut ByteReader<'_>) -> Result<Self> {
        let tag = r.u8()?;
        let dtype = DType::from_tag(tag)
            .ok_or_else(|| Error::Format(format!("unknown dtype tag {tag}")))?;
        let rank = r.u32()? as usize;
        if rank > 16 {
            return Err(Error::Format(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut n: usize = 1;
        for _ in 0..rank {
            let d = usize::try_from(r.u64()?)
                .map_err(|_| Error::Format("dimension overflow".into()))?;
            n = n
                .checked_mul(d)
                .ok_or_else(|| Error::Format("dimension overflow".into()))?;
            shape.push(d);
        }
        let len = n
            .checked_mul(dtype.size())
            .ok_or_else(|| Error::Format("payload overflow".into()))?;
        Ok(Record {
            dtype,
            shape,
            bytes: r.take(len)?.to_vec(),
        })
    }
}

/// Bounds-checked little-endian cursor.
pub struct ByteReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> ByteReader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        ByteReader { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("truncated input at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    pub fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }

    pub fn is_empty(&self) -> bool {
        self.pos == self.buf.len()
    }
}

pub const TENSOR_MAGIC: &[u8; 6] = b"XSTEN1";

pub fn encode_tensor<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = TENSOR_MAGIC.to_vec();
    Record::from_tensor(t).write(&mut out);
    out
}

pub fn decode_tensor<T: Element>(bytes: &[u8]) -> Result<Tensor<T>> {
    let mut r = ByteReader::new(bytes);
    if r.take(6).ok() != Some(TENSOR_MAGIC.as_slice()) {
        return Err(Error::Format("not a tensor file (bad magic)".into()));
    }
    let rec = Record::read(&mut r)?;
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after tensor".into()));
    }
    rec.to_tensor()
}

pub fn save_tensor<T: Element>(path: &std::path::Path, t: &Tensor<T>) -> Result<()> {
    Ok(std::fs::write(path, encode_tensor(t))?)
}

pub fn load_tensor<T: Element>(path: &std::path::Path) -> Result<Tensor<T>> {
    decode_tensor(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bad_magic_and_truncation() {
        let t = Tensor::<f32>::from_f64(vec![2, 2], &[1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut b = encode_tensor(&t);
        assert_eq!(&b[..6], b"XSTEN1");
        assert!(decode_tensor::<f32>(&b[..b.len() - 1]).is_err());
        b[0] = b'Y';
        assert!(matches!(decode_tensor::<f32>(&b), Err(Error::Format(_))));
    }

    #[test]
    fn widths_convert() {
        let t = Tensor::<f32>::from_f64(vec![3], &[0.5, -1.25, 3.0]).unwrap();
        let back: Tensor<f64> = decode_tensor(&encode_tensor(&t)).unwrap();
        assert_eq!(back.to_f64_vec(), vec![0.5, -1.25, 3.0]);
    }

    proptest! {
        #[test]
        fn round_trip_is_bit_exact(data in proptest::collection::vec(any::<f32>(), 1..64)) {
            let t = Tensor::new(vec![data.len()], data).unwrap();
            let bytes = encode_tensor(&t);
            let back: Tensor<f32> = decode_tensor(&bytes).unwrap();
            prop_assert_eq!(encode_tensor(&back), bytes);
        }
    }
}
