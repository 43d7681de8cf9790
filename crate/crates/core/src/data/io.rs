//! Dataset directories: `images/*.png` (RGB), `labels/*.png` (paletted,
//! palette index = class id) and `manifest.csv`.
//!
//! Manifest columns, in order: `id,domain,split,image,label`. `label` is
//! empty for unlabeled samples; paths are relative to the directory.

use std::fs;
use std::io::Cursor;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scene::{Dataset, Domain, Image, LabelMap, Sample, Split, NUM_CLASSES};
use crate::error::{Error, Result};

/// Display color of each class id; also the label PNG palette.
pub const PALETTE: [[u8; 3]; NUM_CLASSES] = [
    [128, 128, 128],
    [128, 64, 128],
    [0, 0, 142],
    [220, 20, 60],
    [250, 170, 30],
];

pub const MANIFEST: &str = "manifest.csv";

#[derive(Debug, Serialize, Deserialize)]
struct ManifestRow {
    id: usize,
    domain: Domain,
    split: Split,
    image: String,
    label: String,
}

fn encode(
    path: &Path,
    w: usize,
    h: usize,
    color: png::ColorType,
    palette: Option<Vec<u8>>,
    data: &[u8],
) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut enc = png::Encoder::new(std::io::BufWriter::new(file), w as u32, h as u32);
    enc.set_color(color);
    enc.set_depth(png::BitDepth::Eight);
    if let Some(p) = palette {
        enc.set_palette(p);
    }
    let fmt = |e: png::EncodingError| Error::format(path, e.to_string());
    let mut writer = enc.write_header().map_err(fmt)?;
    writer.write_image_data(data).map_err(fmt)?;
    writer.finish().map_err(fmt)
}

struct Decoded {
    width: usize,
    height: usize,
    color: png::ColorType,
    palette: Option<Vec<u8>>,
    data: Vec<u8>,
}

fn decode(path: &Path) -> Result<Decoded> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |e: png::DecodingError| Error::format(path, e.to_string());
    let mut reader = png::Decoder::new(Cursor::new(bytes))
        .read_info()
        .map_err(fmt)?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut data = vec![0; size];
    let info = reader.next_frame(&mut data).map_err(fmt)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(path, "expected 8-bit samples"));
    }
    data.truncate(info.buffer_size());
    Ok(Decoded {
        width: info.width as usize,
        height: info.height as usize,
        color: info.color_type,
        palette: reader.info().palette.as_ref().map(|p| p.to_vec()),
        data,
    })
}

pub fn write_rgb_png(path: &Path, img: &Image) -> Result<()> {
    encode(
        path,
        img.width,
        img.height,
        png::ColorType::Rgb,
        None,
        &img.rgb,
    )
}

pub fn read_rgb_png(path: &Path) -> Result<Image> {
    let d = decode(path)?;
    if d.color != png::ColorType::Rgb {
        return Err(Error::format(
            path,
            format!("expected RGB image, found {:?}", d.color),
        ));
    }
    Ok(Image {
        height: d.height,
        width: d.width,
        rgb: d.data,
    })
}

fn palette_bytes() -> Vec<u8> {
    PALETTE.iter().flatten().copied().collect()
}

/// Writes a class map as a paletted PNG.
pub fn write_label_png(path: &Path, label: &LabelMap) -> Result<()> {
    if let Some(&c) = label.classes.iter().find(|&&c| c as usize >= NUM_CLASSES) {
        return Err(Error::invalid(
            "write_label_png",
            format!("class id {c} out of range"),
        ));
    }
    encode(
        path,
        label.width,
        label.height,
        png::ColorType::Indexed,
        Some(palette_bytes()),
        &label.classes,
    )
}

/// Reads a paletted label PNG, checking the palette against [`PALETTE`].
pub fn read_label_png(path: &Path) -> Result<LabelMap> {
    let d = decode(path)?;
    if d.color != png::ColorType::Indexed {
        return Err(Error::format(path, "label image is not paletted"));
    }
    let pal = d.palette.unwrap_or_default();
    let expected = palette_bytes();
    if pal.len() < expected.len() || pal[..expected.len()] != expected[..] {
        return Err(Error::format(
            path,
            "palette does not match the class table",
        ));
    }
    if let Some(&c) = d.data.iter().find(|&&c| c as usize >= NUM_CLASSES) {
        return Err(Error::format(
            path,
            format!("palette index {c} is not a class id"),
        ));
    }
    Ok(LabelMap {
        height: d.height,
        width: d.width,
        classes: d.data,
    })
}

/// Writes values in `[0, 1]` as an 8-bit grayscale PNG.
pub fn write_gray_png(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    if values.len() != width * height {
        return Err(Error::shape(
            "write_gray_png",
            "pixels",
            width * height,
            values.len(),
        ));
    }
    let data: Vec<u8> = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    encode(path, width, height, png::ColorType::Grayscale, None, &data)
}

pub fn save_dataset(dir: &Path, d: &Dataset) -> Result<()> {
    for sub in ["images", "labels"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(&p, e))?;
    }
    let mpath = dir.join(MANIFEST);
    let mut w = csv::Writer::from_path(&mpath).map_err(|e| Error::format(&mpath, e.to_string()))?;
    for (id, s) in d.samples.iter().enumerate() {
        let image = format!("images/{id:05}.png");
        write_rgb_png(&dir.join(&image), &s.image)?;
        let label = match &s.label {
            Some(l) => {
                let name = format!("labels/{id:05}.png");
                write_label_png(&dir.join(&name), l)?;
                name
            }
            None => String::new(),
        };
        w.serialize(ManifestRow {
            id,
            domain: s.domain,
            split: s.split,
            image,
            label,
        })
        .map_err(|e| Error::format(&mpath, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(&mpath, e))
}

fn resolve(dir: &Path, rel: &str, mpath: &Path) -> Result<PathBuf> {
    let p = dir.join(rel);
    if !p.is_file() {
        return Err(Error::format(
            mpath,
            format!("missing file {}", p.display()),
        ));
    }
    Ok(p)
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let mpath = dir.join(MANIFEST);
    if !mpath.is_file() {
        return Err(Error::io(
            &mpath,
            std::io::Error::new(std::io::ErrorKind::NotFound, "manifest not found"),
        ));
    }
    let mut r = csv::Reader::from_path(&mpath).map_err(|e| Error::format(&mpath, e.to_string()))?;
    let mut samples = Vec::new();
    for (line, row) in r.deserialize::<ManifestRow>().enumerate() {
        let row = row.map_err(|e| Error::format(&mpath, format!("row {}: {e}", line + 1)))?;
        let image = read_rgb_png(&resolve(dir, &row.image, &mpath)?)?;
        let label = if row.label.is_empty() {
            None
        } else {
            let lp = resolve(dir, &row.label, &mpath)?;
            let l = read_label_png(&lp)?;
            if (l.height, l.width) != (image.height, image.width) {
                return Err(Error::format(&lp, "label size differs from image size"));
            }
            Some(l)
        };
        samples.push(Sample {
            image,
            label,
            domain: row.domain,
            split: row.split,
        });
    }
    Ok(Dataset { samples })
}
