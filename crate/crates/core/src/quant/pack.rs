//! LSB-first bit packing of N-bit codes.

use crate::error::{arg_err, data_err, Result};

fn check_bits(bits: u8) -> Result<()> {
    if !(1..=8).contains(&bits) {
        return Err(arg_err!("bit width {bits} outside 1..=8"));
    }
    Ok(())
}

/// Bytes needed for `count` codes of `bits` bits.
pub fn packed_len(count: usize, bits: u8) -> usize {
    (count * bits as usize).div_ceil(8)
}

/// Packs codes little-endian, `bits` bits per code, lowest bits first.
/// The final byte is zero-padded.
pub fn pack_codes(codes: &[u8], bits: u8) -> Result<Vec<u8>> {
    check_bits(bits)?;
    let max = ((1u16 << bits) - 1) as u8;
    let mut out = vec![0u8; packed_len(codes.len(), bits)];
    let mut bitpos = 0usize;
    for (i, &c) in codes.iter().enumerate() {
        if c > max {
            return Err(data_err!("code {c} at position {i} does not fit in {bits} bits"));
        }
        let byte = bitpos / 8;
        let shift = bitpos % 8;
        let wide = (c as u16) << shift;
        out[byte] |= wide as u8;
        if shift + bits as usize > 8 {
            out[byte + 1] |= (wide >> 8) as u8;
        }
        bitpos += bits as usize;
    }
    Ok(out)
}

/// Inverse of [`pack_codes`].
pub fn unpack_codes(bytes: &[u8], bits: u8, count: usize) -> Result<Vec<u8>> {
    check_bits(bits)?;
    if bytes.len() < packed_len(count, bits) {
        return Err(data_err!(
            "{} bytes cannot hold {count} codes of {bits} bits",
            bytes.len()
        ));
    }
    let mask = (1u16 << bits) - 1;
    let mut out = Vec::with_capacity(count);
    let mut bitpos = 0usize;
    for _ in 0..count {
        let byte = bitpos / 8;
        let shift = bitpos % 8;
        let mut wide = bytes[byte] as u16;
        if shift + bits as usize > 8 {
            wide |= (bytes[byte + 1] as u16) << 8;
        }
        out.push(((wide >> shift) & mask) as u8);
        bitpos += bits as usize;
    }
    Ok(out)
}

/// Packs a row-major code matrix, padding every row to a byte boundary.
pub fn pack_rows(codes: &[u8], bits: u8, row_len: usize) -> Result<Vec<u8>> {
    if row_len == 0 || !codes.len().is_multiple_of(row_len) {
        return Err(arg_err!("{} codes do not tile rows of {row_len}", codes.len()));
    }
    let mut out = Vec::with_capacity(codes.len() / row_len * packed_len(row_len, bits));
    for row in codes.chunks(row_len) {
        out.extend(pack_codes(row, bits)?);
    }
    Ok(out)
}

pub fn unpack_rows(bytes: &[u8], bits: u8, rows: usize, row_len: usize) -> Result<Vec<u8>> {
    let stride = packed_len(row_len, bits);
    if bytes.len() != rows * stride {
        return Err(data_err!(
            "expected {} packed bytes for {rows}×{row_len} at {bits} bits, got {}",
            rows * stride,
            bytes.len()
        ));
    }
    let mut out = Vec::with_capacity(rows * row_len);
    for chunk in bytes.chunks(stride.max(1)).take(rows) {
        out.extend(unpack_codes(chunk, bits, row_len)?);
    }
    Ok(out)
}
