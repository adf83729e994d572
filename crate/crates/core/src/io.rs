//! Grayscale image files (PNG, PGM) and binary vector-field files.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use image::{DynamicImage, ImageBuffer, ImageFormat, Luma};

use crate::container::Container;
use crate::dynamics::TrajectoryRecord;
use crate::error::{Error, Result};
use crate::image_ops::{ScalarField, VectorField};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn format_for(path: &Path) -> Result<ImageFormat> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase);
    match ext.as_deref() {
        Some("png") => Ok(ImageFormat::Png),
        Some("pgm") | Some("pnm") => Ok(ImageFormat::Pnm),
        _ => Err(Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: "expected a .png or .pgm file".into(),
        }),
    }
}

fn map_image_error(path: &Path, err: image::ImageError) -> Error {
    match err {
        image::ImageError::IoError(e) => Error::io(path, e),
        image::ImageError::Unsupported(e) => Error::UnsupportedFormat {
            path: path.to_path_buf(),
            reason: e.to_string(),
        },
        other => Error::malformed(path, other.to_string()),
    }
}

/// Loads an 8- or 16-bit grayscale PNG/PGM normalized to `[0, 1]`.
pub fn load_gray<S: Scalar>(path: &Path) -> Result<ScalarField<S>> {
    let format = format_for(path)?;
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let img = image::load(std::io::BufReader::new(file), format).map_err(|e| map_image_error(path, e))?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<S> = match img {
        DynamicImage::ImageLuma8(buf) => buf.into_raw().into_iter().map(|v| S::lit(v as f64 / 255.0)).collect(),
        DynamicImage::ImageLuma16(buf) => buf
            .into_raw()
            .into_iter()
            .map(|v| S::lit(v as f64 / 65535.0))
            .collect(),
        other => {
            return Err(Error::Channels {
                path: path.to_path_buf(),
                found: format!("{:?}", other.color()),
            })
        }
    };
    ScalarField::new(Tensor::new([h, w], data)?)
}

/// Loads a mask, thresholding at 0.5 to exact `{0, 1}`.
pub fn load_mask<S: Scalar>(path: &Path) -> Result<ScalarField<S>> {
    let gray: ScalarField<S> = load_gray(path)?;
    Ok(gray.map(|v| if v >= S::lit(0.5) { S::one() } else { S::zero() }))
}

/// Quantizes to 16 bits (values clamped to `[0, 1]`).
fn to_u16<S: Scalar>(field: &ScalarField<S>) -> Vec<u16> {
    field
        .data()
        .iter()
        .map(|v| (v.as_f64().clamp(0.0, 1.0) * 65535.0).round() as u16)
        .collect()
}

/// Saves as 16-bit grayscale; the format follows the extension.
pub fn save_gray<S: Scalar>(field: &ScalarField<S>, path: &Path) -> Result<()> {
    let format = format_for(path)?;
    let buf: ImageBuffer<Luma<u16>, Vec<u16>> =
        ImageBuffer::from_raw(field.width() as u32, field.height() as u32, to_u16(field))
            .expect("buffer matches dimensions");
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    match format {
        ImageFormat::Png => buf
            .write_to(&mut out, ImageFormat::Png)
            .map_err(|e| map_image_error(path, e)),
        // The pnm encoder only writes 8-bit graymaps, so the 16-bit binary
        // header and big-endian samples are emitted directly.
        _ => write_pgm16(&mut out, &buf).map_err(|e| Error::io(path, e)),
    }
}

fn write_pgm16(out: &mut impl Write, buf: &ImageBuffer<Luma<u16>, Vec<u16>>) -> std::io::Result<()> {
    write!(out, "P5\n{} {}\n65535\n", buf.width(), buf.height())?;
    for v in buf.as_raw() {
        out.write_all(&v.to_be_bytes())?;
    }
    out.flush()
}

/// Saves a vector field in the binary container format (`f64`, exact).
pub fn save_field<S: Scalar>(field: &VectorField<S>, path: &Path) -> Result<()> {
    let mut c = Container::new("vector-field");
    c.push_tensor("field", field.tensor());
    c.write(path)
}

pub fn load_field<S: Scalar>(path: &Path) -> Result<VectorField<S>> {
    let c = Container::read(path)?;
    c.expect_kind("vector-field", path)?;
    let t = c
        .tensor("field")
        .ok_or_else(|| Error::malformed(path, "missing `field` tensor"))?;
    VectorField::new(t.cast())
}

/// Saves every recorded step (`image.t`, `momentum.t`, `velocity.t`,
/// `mask.t`) in one container.
pub fn save_trajectory<S: Scalar>(record: &TrajectoryRecord<S>, path: &Path) -> Result<()> {
    let mut c = Container::new("trajectory");
    c.meta.push("steps", record.len());
    let groups = [
        ("image", &record.images),
        ("momentum", &record.momenta),
        ("velocity", &record.velocities),
        ("mask", &record.masks),
    ];
    for (name, tensors) in groups {
        for (t, tensor) in tensors.iter().enumerate() {
            c.push_tensor(format!("{name}.{t}"), tensor);
        }
    }
    c.write(path)
}

pub fn load_trajectory<S: Scalar>(path: &Path) -> Result<TrajectoryRecord<S>> {
    let c = Container::read(path)?;
    c.expect_kind("trajectory", path)?;
    let group = |name: &str| -> Vec<Tensor<S>> {
        (0..)
            .map_while(|t| c.tensor(&format!("{name}.{t}")).map(Tensor::cast))
            .collect()
    };
    Ok(TrajectoryRecord {
        images: group("image"),
        momenta: group("momentum"),
        velocities: group("velocity"),
        masks: group("mask"),
    })
}
