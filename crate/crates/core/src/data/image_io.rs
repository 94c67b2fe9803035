use std::fs;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ColorType, DynamicImage, ImageEncoder, ImageFormat};

use super::{Item, LabeledDataset};
use crate::error::{io_err, Error, Result};
use crate::tensor::Tensor;

/// Extensions picked up by [`load_image_dir`].
#[cfg(feature = "png")]
pub const IMAGE_EXTENSIONS: &[&str] = &["ppm", "pgm", "png"];
#[cfg(not(feature = "png"))]
pub const IMAGE_EXTENSIONS: &[&str] = &["ppm", "pgm"];

fn decode_err(path: &Path, reason: impl ToString) -> Error {
    Error::Decode {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    }
}

fn decode(path: &Path) -> Result<DynamicImage> {
    let ext = path
        .extension()
        .and_then(|e| e.to_str())
        .map(str::to_ascii_lowercase)
        .unwrap_or_default();
    let format = match ext.as_str() {
        "ppm" | "pgm" | "pnm" => ImageFormat::Pnm,
        "png" if cfg!(feature = "png") => ImageFormat::Png,
        "png" => return Err(decode_err(path, "PNG support is not compiled in")),
        other => return Err(decode_err(path, format!("unsupported extension '{other}'"))),
    };
    let bytes = fs::read(path).map_err(io_err(path))?;
    image::load_from_memory_with_format(&bytes, format).map_err(|e| decode_err(path, e))
}

/// Reads one image as [3, size, size] floats in [0, 1]. Grayscale is
/// replicated across channels; other sizes are resized bilinearly.
pub fn load_image(path: &Path, size: usize) -> Result<Tensor> {
    let img = decode(path)?;
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == 0 || h == 0 {
        return Err(decode_err(path, "empty image"));
    }
    let data: Vec<f64> = match img.color() {
        ColorType::L16 | ColorType::La16 | ColorType::Rgb16 | ColorType::Rgba16 => {
            planar(&img.to_rgb16().into_raw(), w * h, |v| v as f64 / 65535.0)
        }
        _ => planar(&img.to_rgb8().into_raw(), w * h, |v| v as f64 / 255.0),
    };
    let t = Tensor::from_parts(vec![3, h, w], data);
    Ok(if h == size && w == size { t } else { resize_bilinear(&t, size, size) })
}

/// Interleaved RGB to planar [3, H, W].
fn planar<T: Copy>(raw: &[T], pixels: usize, f: impl Fn(T) -> f64) -> Vec<f64> {
    let mut out = vec![0.0; 3 * pixels];
    for (p, rgb) in raw.chunks_exact(3).enumerate() {
        for c in 0..3 {
            out[c * pixels + p] = f(rgb[c]);
        }
    }
    out
}

/// Bilinear resize of [C, H, W] with pixel centres at half-integer
/// coordinates and edge clamping.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let axis = |n_out: usize, n_in: usize| -> Vec<(usize, usize, f64)> {
        (0..n_out)
            .map(|o| {
                let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
                let i0 = s.floor() as usize;
                let i1 = (i0 + 1).min(n_in - 1);
                (i0, i1, s - i0 as f64)
            })
            .collect()
    };
    let ys = axis(out_h, h);
    let xs = axis(out_w, w);
    let src = x.data();
    let mut out = Vec::with_capacity(c * out_h * out_w);
    for ch in 0..c {
        let plane = &src[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::from_parts(vec![c, out_h, out_w], out)
}

/// Loads `root/<class>/*.{ppm,pgm,png}`; classes are sorted by name and
/// files within a class by path.
pub fn load_image_dir(root: &Path, size: usize) -> Result<LabeledDataset> {
    let mut classes: Vec<PathBuf> = fs::read_dir(root)
        .map_err(io_err(root))?
        .map(|e| e.map(|e| e.path()).map_err(io_err(root)))
        .collect::<Result<Vec<_>>>()?
        .into_iter()
        .filter(|p| p.is_dir())
        .collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::Dataset(format!("{} has no class subdirectories", root.display())));
    }
    let mut names = Vec::new();
    let mut items = Vec::new();
    for (label, dir) in classes.iter().enumerate() {
        let name = dir.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let mut files: Vec<PathBuf> = fs::read_dir(dir)
            .map_err(io_err(dir))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.is_file()
                    && p.extension()
                        .and_then(|e| e.to_str())
                        .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
            })
            .collect();
        files.sort();
        if files.is_empty() {
            return Err(Error::Dataset(format!("class directory {} contains no images", dir.display())));
        }
        for file in files {
            items.push(Item {
                image: load_image(&file, size)?,
                label,
                source_id: format!("{name}/{}", file.file_name().unwrap_or_default().to_string_lossy()),
            });
        }
        names.push(name);
    }
    LabeledDataset::new(names, items)
}

/// Writes [3, H, W] as binary PPM, rounding to 8 bits.
pub fn save_ppm(image: &Tensor, path: &Path) -> Result<()> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let plane = h * w;
    let d = image.data();
    let raw: Vec<u8> = (0..plane)
        .flat_map(|p| (0..3).map(move |c| (d[c * plane + p].clamp(0.0, 1.0) * 255.0).round() as u8))
        .collect();
    let mut bytes = Vec::with_capacity(raw.len() + 20);
    PnmEncoder::new(&mut bytes)
        .with_subtype(PnmSubtype::Pixmap(SampleEncoding::Binary))
        .write_image(&raw, w as u32, h as u32, ColorType::Rgb8)
        .map_err(|e| decode_err(path, e))?;
    fs::write(path, bytes).map_err(io_err(path))
}

/// Writes a dataset in the `root/<class>/<id>.ppm` layout.
pub fn write_dataset_dir(ds: &LabeledDataset, root: &Path) -> Result<usize> {
    for name in &ds.class_names {
        let dir = root.join(name);
        fs::create_dir_all(&dir).map_err(io_err(&dir))?;
    }
    for item in &ds.items {
        let stem = Path::new(&item.source_id).file_stem().unwrap_or_default().to_string_lossy();
        let path = root.join(&ds.class_names[item.label]).join(format!("{stem}.ppm"));
        save_ppm(&item.image, &path)?;
    }
    Ok(ds.items.len())
}
