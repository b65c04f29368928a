use anyhow::{Context, Result};
use lsrl_core::Frame;
use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

pub fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        }
    }
    Ok(())
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    ensure_parent(path)?;
    let mut w = csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<T>, _>>()?;
    Ok(rows)
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    ensure_parent(path)?;
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

const GUTTER: usize = 2;

/// Tile equally sized frames row by row with a white gutter.
pub fn write_grid(path: &Path, rows: &[Vec<Frame>]) -> Result<()> {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let (fw, fh) = rows
        .iter()
        .flatten()
        .next()
        .map_or((1, 1), |f| (f.width(), f.height()));
    let width = (cols * (fw + GUTTER) + GUTTER) as u32;
    let height = (rows.len() * (fh + GUTTER) + GUTTER) as u32;
    let mut img = vec![255u8; width as usize * height as usize * 3];
    for (r, row) in rows.iter().enumerate() {
        for (c, f) in row.iter().enumerate() {
            anyhow::ensure!((f.width(), f.height()) == (fw, fh), "grid frames differ in size");
            let x0 = GUTTER + c * (fw + GUTTER);
            let y0 = GUTTER + r * (fh + GUTTER);
            for y in 0..fh {
                let dst = ((y0 + y) * width as usize + x0) * 3;
                img[dst..dst + fw * 3].copy_from_slice(&f.data()[y * fw * 3..(y + 1) * fw * 3]);
            }
        }
    }
    ensure_parent(path)?;
    let file = File::create(path).with_context(|| format!("writing {}", path.display()))?;
    let mut enc = png::Encoder::new(BufWriter::new(file), width, height);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    enc.write_header()?.write_image_data(&img)?;
    Ok(())
}

/// Decode an RGB8 PNG back into a single frame.
pub fn read_png(path: &Path) -> Result<Frame> {
    let dec = png::Decoder::new(std::io::BufReader::new(File::open(path)?));
    let mut reader = dec.read_info()?;
    let mut buf = vec![0; reader.output_buffer_size().context("png too large")?];
    let info = reader.next_frame(&mut buf)?;
    anyhow::ensure!(info.color_type == png::ColorType::Rgb, "expected an RGB png");
    buf.truncate(info.buffer_size());
    Ok(Frame::new(info.width as usize, info.height as usize, buf)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_places_frames() {
        let dir = tempfile::tempdir().unwrap();
        let a = Frame::filled(3, 2, [10, 20, 30]);
        let b = Frame::filled(3, 2, [200, 0, 0]);
        let p = dir.path().join("g.png");
        write_grid(&p, &[vec![a.clone(), b.clone()], vec![b]]).unwrap();
        let img = read_png(&p).unwrap();
        assert_eq!((img.width(), img.height()), (2 * 5 + 2, 2 * 4 + 2));
        let px = |x: usize, y: usize| &img.data()[(y * img.width() + x) * 3..][..3];
        assert_eq!(px(0, 0), [255, 255, 255]);
        assert_eq!(px(2, 2), [10, 20, 30]);
        assert_eq!(px(7, 3), [200, 0, 0]);
        assert_eq!(px(2, 6), [200, 0, 0]);
        assert_eq!(px(7, 6), [255, 255, 255]);
    }
}
