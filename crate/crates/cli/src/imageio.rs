//! 8-bit RGB PNG and binary PPM reading and writing.

use std::path::Path;

use elpips_core::Tensor;
use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{DynamicImage, ImageEncoder, RgbImage};

use crate::error::{CliError, CliResult};

pub fn load_image(path: &Path) -> CliResult<Tensor> {
    let reader = image::ImageReader::open(path)
        .and_then(|r| r.with_guessed_format())
        .map_err(|e| CliError::io(path, e))?;
    let decoded = reader.decode().map_err(|e| CliError::io(path, e))?;
    let rgb = match decoded {
        DynamicImage::ImageRgb8(rgb) => rgb,
        other if other.color().has_alpha() => {
            return Err(CliError::io(path, "images with an alpha channel are not supported"));
        }
        other => {
            return Err(CliError::io(
                path,
                format!("unsupported pixel format {:?}, expected 8-bit RGB", other.color()),
            ));
        }
    };
    Ok(image_to_tensor(&rgb))
}

pub fn image_to_tensor(rgb: &RgbImage) -> Tensor {
    let (w, h) = rgb.dimensions();
    Tensor::from_hwc_fn(h as usize, w as usize, 3, |y, x, c| {
        rgb.get_pixel(x as u32, y as u32)[c] as f32 / 255.0
    })
}

/// Round-to-nearest 8-bit quantization of a value clamped to [0, 1].
pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn tensor_to_image(t: &Tensor) -> CliResult<RgbImage> {
    let (h, w, c) = t.hwc()?;
    if c != 3 {
        return Err(CliError::Input(format!("cannot save a {c}-channel tensor as RGB")));
    }
    Ok(RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let (x, y) = (x as usize, y as usize);
        image::Rgb([0, 1, 2].map(|ch| quantize(t.at(y, x, ch))))
    }))
}

/// Saves as binary PPM when the extension is `.ppm`, otherwise as PNG.
pub fn save_image(path: &Path, t: &Tensor) -> CliResult<()> {
    let img = tensor_to_image(t)?;
    let is_ppm = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("ppm"));
    if !is_ppm {
        return img.save_with_format(path, image::ImageFormat::Png).map_err(|e| CliError::io(path, e));
    }
    let file = std::fs::File::create(path).map_err(|e| CliError::io(path, e))?;
    let mut out = std::io::BufWriter::new(file);
    PnmEncoder::new(&mut out)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(img.as_raw(), img.width(), img.height(), image::ExtendedColorType::Rgb8)
        .map_err(|e| CliError::io(path, e))?;
    std::io::Write::flush(&mut out).map_err(|e| CliError::io(path, e))
}
