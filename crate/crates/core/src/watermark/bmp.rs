//! Uncompressed 24-bit Windows bitmaps (BITMAPFILEHEADER + BITMAPINFOHEADER,
//! bottom-up rows, 4-byte row alignment).

use super::{Image24, WatermarkError};

const FILE_HEADER_LEN: usize = 14;
const INFO_HEADER_LEN: usize = 40;
const PIXEL_OFFSET: usize = FILE_HEADER_LEN + INFO_HEADER_LEN;

fn row_stride(width: usize) -> usize {
    (width * 3).div_ceil(4) * 4
}

fn le_u16(b: &[u8], at: usize) -> u16 {
    u16::from_le_bytes([b[at], b[at + 1]])
}

fn le_u32(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes(b[at..at + 4].try_into().unwrap())
}

fn unsupported(msg: impl Into<String>) -> WatermarkError {
    WatermarkError::UnsupportedFormat(msg.into())
}

pub fn load_bmp(bytes: &[u8]) -> Result<Image24, WatermarkError> {
    if bytes.len() < PIXEL_OFFSET || &bytes[..2] != b"BM" {
        return Err(unsupported("not a BMP file"));
    }
    let data_offset = le_u32(bytes, 10) as usize;
    let info_len = le_u32(bytes, 14) as usize;
    if info_len < INFO_HEADER_LEN {
        return Err(unsupported(format!("info header of {info_len} bytes")));
    }
    let width = le_u32(bytes, 18) as i32;
    let height = le_u32(bytes, 22) as i32;
    let planes = le_u16(bytes, 26);
    let bpp = le_u16(bytes, 28);
    let compression = le_u32(bytes, 30);
    if bpp != 24 {
        return Err(unsupported(format!("{bpp} bits per pixel")));
    }
    if compression != 0 {
        return Err(unsupported(format!("compression method {compression}")));
    }
    if planes != 1 {
        return Err(unsupported(format!("{planes} planes")));
    }
    if height < 0 {
        return Err(unsupported("top-down row order"));
    }
    if width <= 0 || height == 0 {
        return Err(unsupported("empty image"));
    }
    let (width, height) = (width as usize, height as usize);
    let stride = row_stride(width);
    let end = data_offset
        .checked_add(
            stride
                .checked_mul(height)
                .ok_or_else(|| unsupported("size overflow"))?,
        )
        .ok_or_else(|| unsupported("size overflow"))?;
    if data_offset < FILE_HEADER_LEN + info_len || bytes.len() < end {
        return Err(unsupported("truncated pixel array"));
    }
    let mut pixels = Vec::with_capacity(width * height);
    for y in 0..height {
        // Row 0 of the file is the bottom row of the picture.
        let row = data_offset + (height - 1 - y) * stride;
        for x in 0..width {
            let p = row + 3 * x;
            pixels.push([bytes[p + 2], bytes[p + 1], bytes[p]]);
        }
    }
    Ok(Image24 {
        width,
        height,
        pixels,
    })
}

pub fn save_bmp(img: &Image24) -> Vec<u8> {
    let stride = row_stride(img.width);
    let image_size = stride * img.height;
    let file_size = PIXEL_OFFSET + image_size;
    let mut out = Vec::with_capacity(file_size);
    out.extend_from_slice(b"BM");
    out.extend_from_slice(&(file_size as u32).to_le_bytes());
    out.extend_from_slice(&[0; 4]);
    out.extend_from_slice(&(PIXEL_OFFSET as u32).to_le_bytes());
    out.extend_from_slice(&(INFO_HEADER_LEN as u32).to_le_bytes());
    out.extend_from_slice(&(img.width as i32).to_le_bytes());
    out.extend_from_slice(&(img.height as i32).to_le_bytes());
    out.extend_from_slice(&1u16.to_le_bytes());
    out.extend_from_slice(&24u16.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&(image_size as u32).to_le_bytes());
    // 2835 px/m = 72 dpi
    out.extend_from_slice(&2835i32.to_le_bytes());
    out.extend_from_slice(&2835i32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    out.extend_from_slice(&0u32.to_le_bytes());
    let pad = stride - 3 * img.width;
    for y in (0..img.height).rev() {
        for &[r, g, b] in &img.pixels[y * img.width..(y + 1) * img.width] {
            out.extend_from_slice(&[b, g, r]);
        }
        out.extend(std::iter::repeat_n(0u8, pad));
    }
    out
}
