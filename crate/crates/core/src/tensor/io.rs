//! Binary tensor format used by checkpoints: rank as a little-endian `u64`,
//! then each extent as a little-endian `u64`, then the elements as
//! little-endian `f32` in row-major order.

use std::io::{Read, Write};

use super::{Element, Tensor, TensorError};

/// Upper bound on rank accepted when reading, to reject garbage headers early.
const MAX_RANK: u64 = 16;

fn io_err(e: std::io::Error) -> TensorError {
    TensorError::Io(e.to_string())
}

pub fn write_tensor<T: Element, W: Write>(w: &mut W, t: &Tensor<T>) -> Result<(), TensorError> {
    w.write_all(&(t.rank() as u64).to_le_bytes()).map_err(io_err)?;
    for &d in t.shape() {
        w.write_all(&(d as u64).to_le_bytes()).map_err(io_err)?;
    }
    let mut buf = Vec::with_capacity(t.len() * 4);
    for v in t.data() {
        buf.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
    }
    w.write_all(&buf).map_err(io_err)
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64, TensorError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(io_err)?;
    Ok(u64::from_le_bytes(b))
}

pub fn read_tensor<T: Element, R: Read>(r: &mut R) -> Result<Tensor<T>, TensorError> {
    let rank = read_u64(r)?;
    if rank > MAX_RANK {
        return Err(TensorError::Io(format!("implausible rank {rank}")));
    }
    let shape = (0..rank)
        .map(|_| read_u64(r).map(|d| d as usize))
        .collect::<Result<Vec<_>, _>>()?;
    let len: usize = shape.iter().product();
    let mut bytes = vec![0u8; len * 4];
    r.read_exact(&mut bytes).map_err(io_err)?;
    let data = bytes
        .chunks_exact(4)
        .map(|c| T::of(f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64))
        .collect();
    Tensor::new(shape, data)
}

pub fn to_bytes<T: Element>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::new();
    write_tensor(&mut out, t).expect("writing to a Vec cannot fail");
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::<f32>::new([2, 1], vec![1.0, -2.0]).unwrap();
        let bytes = to_bytes(&t);
        assert_eq!(bytes.len(), 8 + 2 * 8 + 2 * 4);
        assert_eq!(&bytes[..8], &2u64.to_le_bytes());
        assert_eq!(&bytes[8..16], &2u64.to_le_bytes());
        assert_eq!(&bytes[16..24], &1u64.to_le_bytes());
        assert_eq!(&bytes[24..28], &1.0f32.to_le_bytes());
    }

    #[test]
    fn truncated_input_is_rejected() {
        let t = Tensor::<f32>::ones([3]);
        let bytes = to_bytes(&t);
        let err = read_tensor::<f32, _>(&mut &bytes[..bytes.len() - 1]).unwrap_err();
        assert!(matches!(err, TensorError::Io(_)));
    }

    proptest! {
        #[test]
        fn roundtrip_is_bit_exact(shape in prop::collection::vec(1usize..4, 0..4), seed in any::<u32>()) {
            let len: usize = shape.iter().product();
            let data: Vec<f32> = (0..len).map(|i| f32::from_bits(seed.wrapping_mul(2654435761).wrapping_add(i as u32) & 0x3fff_ffff)).collect();
            let t = Tensor::new(shape, data).unwrap();
            let back: Tensor<f32> = read_tensor(&mut to_bytes(&t).as_slice()).unwrap();
            prop_assert_eq!(back.shape(), t.shape());
            let same = back.data().iter().zip(t.data()).all(|(a, b)| a.to_bits() == b.to_bits());
            prop_assert!(same);
        }
    }
}
