use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use super::{to_u8, CorpusEntry, Image};
use crate::error::{Error, Result};

/// Writes an 8-bit PNG (`round(v·255)` per sample).
pub fn save_png(img: &Image, path: &Path) -> Result<()> {
    let (ch, h, w) = img.shape();
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, w as u32, h as u32);
    enc.set_color(if ch == 3 {
        png::ColorType::Rgb
    } else {
        png::ColorType::Grayscale
    });
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header()?;
    let p = h * w;
    let mut buf = vec![0u8; ch * p];
    for i in 0..p {
        for c in 0..ch {
            buf[i * ch + c] = to_u8(img.data()[c * p + i]);
        }
    }
    writer.write_image_data(&buf)?;
    Ok(())
}

/// Reads an 8-bit grayscale or RGB(A) PNG, dividing by 255.
pub fn load_png(path: &Path) -> Result<Image> {
    let decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    let mut reader = decoder.read_info()?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader.next_frame(&mut buf)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::param("png", "only 8-bit images are supported"));
    }
    let (src_ch, ch) = match info.color_type {
        png::ColorType::Grayscale => (1, 1),
        png::ColorType::GrayscaleAlpha => (2, 1),
        png::ColorType::Rgb => (3, 3),
        png::ColorType::Rgba => (4, 3),
        other => return Err(Error::param("png", format!("unsupported colour type {other:?}"))),
    };
    let (h, w) = (info.height as usize, info.width as usize);
    let p = h * w;
    let mut data = vec![0.0; ch * p];
    for i in 0..p {
        for c in 0..ch {
            data[c * p + i] = buf[i * src_ch + c] as f64 / 255.0;
        }
    }
    Image::new(ch, h, w, data)
}

/// Saves every image as `img_XXXX.png` under `dir` and writes `manifest.json`.
pub fn write_corpus(images: &[Image], dir: &Path, seed: u64) -> Result<Vec<CorpusEntry>> {
    std::fs::create_dir_all(dir)?;
    let mut rows = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let name = format!("img_{i:04}.png");
        save_png(img, &dir.join(&name))?;
        rows.push(CorpusEntry {
            id: format!("img_{i:04}"),
            path: name,
            seed: super::corpus::item_seed(seed, i),
        });
    }
    std::fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&rows)?)?;
    Ok(rows)
}
