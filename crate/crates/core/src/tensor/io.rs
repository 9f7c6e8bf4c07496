//! Native `ZFNT` tensor files and PNG import/export.
//!
//! Layout: magic `ZFNT`, `u16` version (1), `u8` dtype (0 = f32), `u8` ndim,
//! `ndim × u32` dims, then the row-major little-endian payload.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use image::{DynamicImage, ImageBuffer, Luma, Rgb};

use super::ImageTensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"ZFNT";
const VERSION: u16 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct NativeTensor {
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl NativeTensor {
    pub fn new(dims: Vec<u32>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().map(|&d| d as usize).product();
        if expected != data.len() {
            return Err(Error::dims(dims, format!("{} values", data.len())));
        }
        Ok(Self { dims, data })
    }
}

impl From<&ImageTensor> for NativeTensor {
    fn from(img: &ImageTensor) -> Self {
        NativeTensor {
            dims: vec![img.height() as u32, img.width() as u32, img.channels() as u32],
            data: img.data().to_vec(),
        }
    }
}

pub fn write_native<W: Write>(mut w: W, t: &NativeTensor) -> std::io::Result<()> {
    let ndim = u8::try_from(t.dims.len())
        .map_err(|_| std::io::Error::new(std::io::ErrorKind::InvalidInput, "too many dims"))?;
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&[DTYPE_F32, ndim])?;
    for d in &t.dims {
        w.write_all(&d.to_le_bytes())?;
    }
    let mut payload = Vec::with_capacity(t.data.len() * 4);
    for v in &t.data {
        payload.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&payload)
}

pub fn read_native<R: Read>(mut r: R) -> Result<NativeTensor> {
    let fmt = |m: &str| Error::Format(m.to_string());
    let mut head = [0u8; 8];
    r.read_exact(&mut head).map_err(|_| fmt("truncated header"))?;
    if &head[..4] != MAGIC {
        return Err(fmt("bad magic"));
    }
    let version = u16::from_le_bytes([head[4], head[5]]);
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    if head[6] != DTYPE_F32 {
        return Err(Error::Format(format!("unsupported dtype code {}", head[6])));
    }
    let ndim = head[7] as usize;
    let mut dims = Vec::with_capacity(ndim);
    for _ in 0..ndim {
        let mut b = [0u8; 4];
        r.read_exact(&mut b).map_err(|_| fmt("truncated dims"))?;
        dims.push(u32::from_le_bytes(b));
    }
    let count: usize = dims.iter().map(|&d| d as usize).product();
    let mut payload = Vec::new();
    r.read_to_end(&mut payload).map_err(|_| fmt("unreadable payload"))?;
    if payload.len() != count * 4 {
        return Err(Error::Format(format!(
            "payload has {} bytes, dims require {}",
            payload.len(),
            count * 4
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
        .collect();
    Ok(NativeTensor { dims, data })
}

pub fn save_native(path: impl AsRef<Path>, t: &NativeTensor) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::new();
    write_native(&mut buf, t).map_err(|e| Error::io(path, e))?;
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_native(path: impl AsRef<Path>) -> Result<NativeTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    read_native(bytes.as_slice())
}

fn native_to_image(t: NativeTensor) -> Result<ImageTensor> {
    let (h, w, c) = match t.dims.as_slice() {
        [h, w] => (*h as usize, *w as usize, 1),
        [h, w, c] => (*h as usize, *w as usize, *c as usize),
        other => return Err(Error::Format(format!("image tensor needs 2 or 3 dims, got {other:?}"))),
    };
    ImageTensor::new(h, w, c, t.data)
}

/// Loads a PNG (8/16-bit gray or RGB) or a native tensor file.
pub fn load_image(path: impl AsRef<Path>) -> Result<ImageTensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = if bytes.starts_with(MAGIC) {
        native_to_image(read_native(bytes.as_slice())?)?
    } else {
        decode_png(&bytes)?
    };
    Ok(img.with_source(path))
}

fn decode_png(bytes: &[u8]) -> Result<ImageTensor> {
    let dynimg = image::load_from_memory_with_format(bytes, image::ImageFormat::Png)?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    match dynimg {
        DynamicImage::ImageLuma8(b) => {
            ImageTensor::new(h, w, 1, b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
        }
        DynamicImage::ImageRgb8(b) => {
            ImageTensor::new(h, w, 3, b.into_raw().into_iter().map(|v| v as f32 / 255.0).collect())
        }
        DynamicImage::ImageLuma16(b) => {
            ImageTensor::new(h, w, 1, b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect())
        }
        DynamicImage::ImageRgb16(b) => {
            ImageTensor::new(h, w, 3, b.into_raw().into_iter().map(|v| v as f32 / 65535.0).collect())
        }
        other => Err(Error::Channels(other.color().channel_count() as usize)),
    }
}

/// Writes a 16-bit PNG.
pub fn save_png(path: impl AsRef<Path>, img: &ImageTensor) -> Result<()> {
    let path = path.as_ref();
    let quantize = |v: &f32| (v * 65535.0).round() as u16;
    let (w, h) = (img.width() as u32, img.height() as u32);
    let raw: Vec<u16> = img.data().iter().map(quantize).collect();
    let dynimg = if img.channels() == 1 {
        DynamicImage::ImageLuma16(
            ImageBuffer::<Luma<u16>, _>::from_raw(w, h, raw).expect("buffer sized from tensor"),
        )
    } else {
        DynamicImage::ImageRgb16(
            ImageBuffer::<Rgb<u16>, _>::from_raw(w, h, raw).expect("buffer sized from tensor"),
        )
    };
    dynimg.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png8(path: &Path, value: u8) {
        let buf = ImageBuffer::<Luma<u8>, _>::from_raw(1, 1, vec![value]).unwrap();
        buf.save(path).unwrap();
    }

    #[test]
    fn png_8bit_scaling_endpoints() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("white.png");
        write_png8(&p, 255);
        assert_eq!(load_image(&p).unwrap().data(), &[1.0]);
        write_png8(&p, 0);
        assert_eq!(load_image(&p).unwrap().data(), &[0.0]);
    }

    #[test]
    fn png_16bit_and_rgba_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g16.png");
        ImageBuffer::<Luma<u16>, _>::from_raw(2, 1, vec![65535u16, 0])
            .unwrap()
            .save(&p)
            .unwrap();
        assert_eq!(load_image(&p).unwrap().data(), &[1.0, 0.0]);
        let q = dir.path().join("rgba.png");
        ImageBuffer::<image::Rgba<u8>, _>::from_raw(1, 1, vec![1, 2, 3, 4])
            .unwrap()
            .save(&q)
            .unwrap();
        assert!(matches!(load_image(&q), Err(Error::Channels(4))));
    }

    #[test]
    fn native_round_trip_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.zfnt");
        let img = ImageTensor::new(2, 3, 3, (0..18).map(|i| (i as f32 / 17.0).sqrt()).collect()).unwrap();
        save_native(&p, &NativeTensor::from(&img)).unwrap();
        let back = load_image(&p).unwrap();
        assert_eq!(back.dims(), img.dims());
        let bits = |d: &[f32]| d.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(back.data()), bits(img.data()));
    }

    #[test]
    fn native_header_layout() {
        let mut buf = Vec::new();
        write_native(&mut buf, &NativeTensor::new(vec![1, 2], vec![0.5, 1.0]).unwrap()).unwrap();
        assert_eq!(&buf[..4], b"ZFNT");
        assert_eq!(&buf[4..8], &[1, 0, 0, 2]);
        assert_eq!(&buf[8..16], &[1, 0, 0, 0, 2, 0, 0, 0]);
        assert_eq!(buf.len(), 16 + 8);
    }

    #[test]
    fn native_rejects_nan_and_range() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.zfnt");
        save_native(&p, &NativeTensor::new(vec![1, 1], vec![f32::NAN]).unwrap()).unwrap();
        assert!(matches!(load_image(&p), Err(Error::NonFinite(_))));
        save_native(&p, &NativeTensor::new(vec![1, 1], vec![1.5]).unwrap()).unwrap();
        assert!(matches!(load_image(&p), Err(Error::NonFinite(_))));
    }

    #[test]
    fn missing_file_is_io_error() {
        assert!(matches!(load_image("/nonexistent/x.png"), Err(Error::Io { .. })));
    }
}
