//! On-disk sequence layout and box-file formats.
//!
//! A dataset directory holds one subdirectory per sequence:
//!   <root>/<name>/groundtruth.txt   one `x,y,w,h` line per frame
//!   <root>/<name>/img/00000001.png  frames in sorted order
//!
//! Tracker results mirror the ground-truth format, one file per sequence.

use crate::error::{Error, Result};
use crate::geometry::{Box2, ImageBox};
use crate::synth::SyntheticSequence;
use ndarray::Array3;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

pub fn format_box(b: &ImageBox) -> String {
    format!("{:.4},{:.4},{:.4},{:.4}", b.x, b.y, b.w, b.h)
}

pub fn parse_box_line(line: &str) -> Result<ImageBox> {
    let parts: Vec<&str> = line.trim().split(',').collect();
    if parts.len() != 4 {
        return Err(Error::dataset(format!(
            "expected `x,y,w,h`, got `{}`",
            line.trim()
        )));
    }
    let mut vals = [0.0f64; 4];
    for (v, p) in vals.iter_mut().zip(&parts) {
        *v = p
            .trim()
            .parse()
            .map_err(|_| Error::dataset(format!("bad number `{p}` in `{}`", line.trim())))?;
    }
    let b = Box2::new(vals[0], vals[1], vals[2], vals[3]);
    if !b.is_valid() {
        return Err(Error::dataset(format!("degenerate box `{}`", line.trim())));
    }
    Ok(b)
}

pub fn write_boxes(path: impl AsRef<Path>, boxes: &[ImageBox]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for b in boxes {
        writeln!(f, "{}", format_box(b))?;
    }
    f.flush()?;
    Ok(())
}

pub fn read_boxes(path: impl AsRef<Path>) -> Result<Vec<ImageBox>> {
    let f = BufReader::new(std::fs::File::open(path.as_ref())?);
    let mut out = Vec::new();
    for (i, line) in f.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(parse_box_line(&line).map_err(|e| {
            Error::dataset(format!(
                "{}:{}: {e}",
                path.as_ref().display(),
                i + 1
            ))
        })?);
    }
    Ok(out)
}

/// (3,H,W) floats in [0,1] -> 8-bit PNG.
pub fn save_frame(path: impl AsRef<Path>, img: &Array3<f64>) -> Result<()> {
    let (ch, h, w) = img.dim();
    if ch != 3 {
        return Err(Error::dataset(format!("expected 3 channels, got {ch}")));
    }
    let out = image::RgbImage::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| {
            (img[(c, y as usize, x as usize)].clamp(0.0, 1.0) * 255.0).round() as u8
        };
        image::Rgb([px(0), px(1), px(2)])
    });
    out.save(path.as_ref())
        .map_err(|e| Error::dataset(format!("{}: {e}", path.as_ref().display())))
}

pub fn load_frame(path: impl AsRef<Path>) -> Result<Array3<f64>> {
    let img = image::open(path.as_ref())
        .map_err(|e| Error::dataset(format!("{}: {e}", path.as_ref().display())))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut out = Array3::<f64>::zeros((3, h as usize, w as usize));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[(c, y as usize, x as usize)] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Renders a generated sequence into `<root>/<name>/`.
pub fn write_sequence_dir(
    root: impl AsRef<Path>,
    name: &str,
    seq: &SyntheticSequence,
) -> Result<()> {
    let dir = root.as_ref().join(name);
    let img_dir = dir.join("img");
    std::fs::create_dir_all(&img_dir)?;
    write_boxes(dir.join("groundtruth.txt"), seq.ground_truth())?;
    for t in 0..seq.len() {
        save_frame(img_dir.join(format!("{:08}.png", t + 1)), &seq.render(t))?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct DatasetSequence {
    pub name: String,
    pub frames: Vec<PathBuf>,
    pub gt: Vec<ImageBox>,
}

impl DatasetSequence {
    pub fn open(dir: &Path) -> Result<DatasetSequence> {
        let name = dir
            .file_name()
            .and_then(|n| n.to_str())
            .ok_or_else(|| Error::dataset(format!("bad sequence directory {}", dir.display())))?
            .to_string();
        let gt = read_boxes(dir.join("groundtruth.txt"))
            .map_err(|e| Error::dataset(format!("sequence `{name}`: {e}")))?;
        let img_dir = dir.join("img");
        let mut frames: Vec<PathBuf> = std::fs::read_dir(&img_dir)
            .map_err(|e| Error::dataset(format!("sequence `{name}`: {}: {e}", img_dir.display())))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "png"))
            .collect();
        frames.sort();
        if frames.len() != gt.len() {
            return Err(Error::dataset(format!(
                "sequence `{name}`: {} frames but {} ground-truth lines",
                frames.len(),
                gt.len()
            )));
        }
        if frames.is_empty() {
            return Err(Error::dataset(format!("sequence `{name}` is empty")));
        }
        Ok(DatasetSequence { name, frames, gt })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame(&self, t: usize) -> Result<Array3<f64>> {
        load_frame(&self.frames[t])
    }
}

#[derive(Debug, Clone)]
pub struct SequenceDataset {
    pub sequences: Vec<DatasetSequence>,
}

impl SequenceDataset {
    /// Opens every sequence subdirectory, sorted by name.
    pub fn open(root: impl AsRef<Path>) -> Result<SequenceDataset> {
        let mut dirs: Vec<PathBuf> = std::fs::read_dir(root.as_ref())?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.is_dir())
            .collect();
        dirs.sort();
        if dirs.is_empty() {
            return Err(Error::dataset(format!(
                "no sequences under {}",
                root.as_ref().display()
            )));
        }
        let sequences = dirs
            .iter()
            .map(|d| DatasetSequence::open(d))
            .collect::<Result<Vec<_>>>()?;
        Ok(SequenceDataset { sequences })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::SequenceSpec;

    #[test]
    fn box_lines_round_trip_and_reject_garbage() {
        let b = Box2::new(12.25, 3.5, 40.0, 31.75);
        let parsed = parse_box_line(&format_box(&b)).unwrap();
        assert_eq!(parsed, b);
        assert!(parse_box_line("1,2,3").is_err());
        assert!(parse_box_line("1,2,x,4").is_err());
        assert!(parse_box_line("1,2,0,4").is_err());
        // whitespace tolerated
        assert!(parse_box_line(" 1.0, 2.0, 3.0, 4.0 ").is_ok());
    }

    #[test]
    fn png_round_trip_quantizes_to_8_bits() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("f.png");
        let img = Array3::from_shape_fn((3, 9, 7), |(c, y, x)| {
            ((c * 31 + y * 7 + x * 3) % 256) as f64 / 255.0
        });
        save_frame(&path, &img).unwrap();
        let back = load_frame(&path).unwrap();
        assert_eq!(back.dim(), (3, 9, 7));
        let max_err = img
            .iter()
            .zip(back.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err < 0.5 / 255.0 + 1e-12, "max err {max_err}");
    }

    #[test]
    fn sequence_dir_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SequenceSpec {
            seed: 5,
            length: 4,
            ..SequenceSpec::default()
        };
        let seq = SyntheticSequence::generate(&spec).unwrap();
        write_sequence_dir(dir.path(), "seq-0005", &seq).unwrap();

        let ds = SequenceDataset::open(dir.path()).unwrap();
        assert_eq!(ds.sequences.len(), 1);
        let s = &ds.sequences[0];
        assert_eq!(s.name, "seq-0005");
        assert_eq!(s.len(), 4);
        for t in 0..4 {
            // text format rounds at 1e-4
            let (a, b) = (&s.gt[t], seq.gt(t));
            for (u, v) in [(a.x, b.x), (a.y, b.y), (a.w, b.w), (a.h, b.h)] {
                assert!((u - v).abs() <= 5e-5, "{u} vs {v}");
            }
        }
        let f0 = s.frame(0).unwrap();
        let rendered = seq.render(0);
        let max_err = f0
            .iter()
            .zip(rendered.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(max_err <= 0.5 / 255.0 + 1e-12);
    }

    #[test]
    fn mismatched_counts_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SequenceSpec {
            seed: 6,
            length: 3,
            ..SequenceSpec::default()
        };
        let seq = SyntheticSequence::generate(&spec).unwrap();
        write_sequence_dir(dir.path(), "s", &seq).unwrap();
        // drop one ground-truth line
        let gt_path = dir.path().join("s/groundtruth.txt");
        let text = std::fs::read_to_string(&gt_path).unwrap();
        let shorter: Vec<&str> = text.lines().take(2).collect();
        std::fs::write(&gt_path, shorter.join("\n")).unwrap();
        assert!(SequenceDataset::open(dir.path()).is_err());
    }
}
