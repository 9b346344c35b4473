//! Binary and JSON encodings of [`Tensor`].
//!
//! Binary layout (all little-endian): `rank: u32`, then `rank` dimensions as
//! `u64`, then `product(shape)` values as `f64`.

use std::io::{Read, Write};

use serde_json::Value;

use super::Tensor;
use crate::error::{Error, Result};

const MAX_RANK: u32 = 16;

impl Tensor {
    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<()> {
        w.write_all(&(self.shape.len() as u32).to_le_bytes())?;
        for &d in &self.shape {
            w.write_all(&(d as u64).to_le_bytes())?;
        }
        for v in &self.data {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary<R: Read>(r: &mut R) -> Result<Self> {
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        let rank = u32::from_le_bytes(b4);
        if rank == 0 || rank > MAX_RANK {
            return Err(Error::Format(format!("unsupported tensor rank {rank}")));
        }
        let mut b8 = [0u8; 8];
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            r.read_exact(&mut b8)?;
            shape.push(
                usize::try_from(u64::from_le_bytes(b8))
                    .map_err(|_| Error::Format("dimension overflows usize".into()))?,
            );
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format("tensor size overflow".into()))?;
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            r.read_exact(&mut b8)?;
            data.push(f64::from_le_bytes(b8));
        }
        Tensor::new(shape, data).map_err(|e| Error::Format(e.to_string()))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(4 + 8 * (self.rank() + self.numel()));
        self.write_binary(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = bytes;
        let t = Self::read_binary(&mut cursor)?;
        if !cursor.is_empty() {
            return Err(Error::Format(format!("{} trailing bytes after tensor", cursor.len())));
        }
        Ok(t)
    }

    /// `{"shape": [...], "data": <nested arrays>}`.
    pub fn to_json(&self) -> Value {
        fn nest(shape: &[usize], data: &[f64]) -> Value {
            match shape {
                [_] => Value::from(data.to_vec()),
                [n, rest @ ..] => {
                    let stride = data.len() / n;
                    Value::Array((0..*n).map(|i| nest(rest, &data[i * stride..(i + 1) * stride])).collect())
                }
                [] => unreachable!("tensor rank is at least one"),
            }
        }
        serde_json::json!({ "shape": self.shape, "data": nest(&self.shape, &self.data) })
    }

    pub fn from_json(value: &Value) -> Result<Self> {
        let shape: Vec<usize> = serde_json::from_value(
            value.get("shape").cloned().ok_or_else(|| Error::Format("missing `shape`".into()))?,
        )?;
        let nested = value.get("data").ok_or_else(|| Error::Format("missing `data`".into()))?;
        let mut data = Vec::new();
        fn flatten(v: &Value, depth: usize, shape: &[usize], out: &mut Vec<f64>) -> Result<()> {
            let arr = v
                .as_array()
                .ok_or_else(|| Error::Format(format!("expected array at depth {depth}")))?;
            if arr.len() != shape[depth] {
                return Err(Error::Format(format!(
                    "axis {depth} has {} entries, shape says {}",
                    arr.len(),
                    shape[depth]
                )));
            }
            for item in arr {
                if depth + 1 == shape.len() {
                    out.push(item.as_f64().ok_or_else(|| Error::Format("non-numeric entry".into()))?);
                } else {
                    flatten(item, depth + 1, shape, out)?;
                }
            }
            Ok(())
        }
        if shape.is_empty() {
            return Err(Error::Format("empty shape".into()));
        }
        flatten(nested, 0, &shape, &mut data)?;
        Tensor::new(shape, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn binary_layout_is_header_then_values() {
        let t = Tensor::matrix(1, 2, vec![1.0, -2.5]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[0..4], &2u32.to_le_bytes());
        assert_eq!(&b[4..12], &1u64.to_le_bytes());
        assert_eq!(&b[12..20], &2u64.to_le_bytes());
        assert_eq!(&b[20..28], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 36);
    }

    #[test]
    fn truncated_binary_is_rejected() {
        let b = Tensor::ones(&[3]).to_bytes();
        assert!(Tensor::from_bytes(&b[..b.len() - 1]).is_err());
        let mut extra = b.clone();
        extra.push(0);
        assert!(matches!(Tensor::from_bytes(&extra), Err(Error::Format(_))));
    }

    #[test]
    fn json_form_nests_rows() {
        let t = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let j = t.to_json();
        assert_eq!(j["data"], serde_json::json!([[1.0, 2.0], [3.0, 4.0]]));
        assert!(Tensor::from_json(&serde_json::json!({"shape": [2, 2], "data": [[1.0], [2.0, 3.0]]})).is_err());
    }

    fn arb_tensor() -> impl Strategy<Value = Tensor> {
        prop::collection::vec(1usize..4, 1..4).prop_flat_map(|shape| {
            let n: usize = shape.iter().product();
            prop::collection::vec(-1e6f64..1e6, n)
                .prop_map(move |data| Tensor::new(shape.clone(), data).unwrap())
        })
    }

    proptest! {
        #[test]
        fn binary_and_json_round_trip(t in arb_tensor()) {
            prop_assert_eq!(Tensor::from_bytes(&t.to_bytes()).unwrap(), t.clone());
            prop_assert_eq!(Tensor::from_json(&t.to_json()).unwrap(), t);
        }
    }
}
