use super::IoError;
use crate::canvas::Image;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

fn io_err(path: &Path) -> impl Fn(std::io::Error) -> IoError + '_ {
    move |source| IoError::File {
        path: path.display().to_string(),
        source,
    }
}

/// Decodes any supported raster file, converts to RGB in [0, 1] and resizes
/// bilinearly to `height × width` when the size differs.
pub fn load_image(path: &Path, height: usize, width: usize) -> Result<Image, IoError> {
    let decoded = image::open(path).map_err(|e| IoError::Decode {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let rgb = decoded.to_rgb16();
    let (w, h) = rgb.dimensions();
    let data = rgb.as_raw().iter().map(|&v| v as f64 / 65535.0).collect();
    let img = Image::from_vec(h as usize, w as usize, data);
    Ok(if img.dims() == (height, width) {
        img
    } else {
        img.resize_bilinear(height, width)
    })
}

/// Loads at the file's native size.
pub fn load_image_native(path: &Path) -> Result<Image, IoError> {
    let (w, h) = image::image_dimensions(path).map_err(|e| IoError::Decode {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    load_image(path, h as usize, w as usize)
}

fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn png_writer<'a>(
    path: &'a Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
) -> Result<png::Writer<BufWriter<File>>, IoError> {
    let file = File::create(path).map_err(io_err(path))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width as u32, height as u32);
    enc.set_color(color);
    enc.set_depth(depth);
    enc.write_header().map_err(|e| IoError::Encode {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

fn write_png(
    path: &Path,
    width: usize,
    height: usize,
    color: png::ColorType,
    depth: png::BitDepth,
    bytes: &[u8],
) -> Result<(), IoError> {
    let mut w = png_writer(path, width, height, color, depth)?;
    w.write_image_data(bytes).map_err(|e| IoError::Encode {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    w.finish().map_err(|e| IoError::Encode {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

/// 8-bit RGB PNG; values are clipped to [0, 1] and rounded.
pub fn save_png(path: &Path, img: &Image) -> Result<(), IoError> {
    let bytes: Vec<u8> = img.data().iter().map(|&v| to_u8(v)).collect();
    write_png(path, img.width(), img.height(), png::ColorType::Rgb, png::BitDepth::Eight, &bytes)
}

/// 16-bit grayscale PNG.
pub fn save_gray16(path: &Path, height: usize, width: usize, values: &[u16]) -> Result<(), IoError> {
    assert_eq!(values.len(), height * width);
    let bytes: Vec<u8> = values.iter().flat_map(|v| v.to_be_bytes()).collect();
    write_png(path, width, height, png::ColorType::Grayscale, png::BitDepth::Sixteen, &bytes)
}

/// 8-bit grayscale PNG with 255 where `mask` is set.
pub fn save_mask8(path: &Path, height: usize, width: usize, mask: &[bool]) -> Result<(), IoError> {
    assert_eq!(mask.len(), height * width);
    let bytes: Vec<u8> = mask.iter().map(|&b| if b { 255 } else { 0 }).collect();
    write_png(path, width, height, png::ColorType::Grayscale, png::BitDepth::Eight, &bytes)
}

/// 1-bit grayscale PNG, white where `bits` is set.
pub fn save_bitmap1(path: &Path, height: usize, width: usize, bits: &[bool]) -> Result<(), IoError> {
    assert_eq!(bits.len(), height * width);
    let stride = width.div_ceil(8);
    let mut bytes = vec![0u8; stride * height];
    for y in 0..height {
        for x in 0..width {
            if bits[y * width + x] {
                bytes[y * stride + x / 8] |= 0x80 >> (x % 8);
            }
        }
    }
    write_png(path, width, height, png::ColorType::Grayscale, png::BitDepth::One, &bytes)
}

/// Layer map as 16-bit gray: `layer + 1`, so unassigned pixels are 0.
pub fn save_layer_map(path: &Path, height: usize, width: usize, index: &[i32]) -> Result<(), IoError> {
    let values: Vec<u16> = index.iter().map(|&i| (i + 1).clamp(0, u16::MAX as i32) as u16).collect();
    save_gray16(path, height, width, &values)
}

/// Decodes a grayscale PNG into a boolean mask, `true` where nonzero.
pub fn load_mask(path: &Path) -> Result<(usize, usize, Vec<bool>), IoError> {
    let decoded = image::open(path).map_err(|e| IoError::Decode {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    let gray = decoded.to_luma16();
    let (w, h) = gray.dimensions();
    Ok((h as usize, w as usize, gray.as_raw().iter().map(|&v| v > 0).collect()))
}
