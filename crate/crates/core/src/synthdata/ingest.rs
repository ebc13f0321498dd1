//! Loading real images laid out one directory per domain, with files named
//! `<pid>_c<camid>_<idx>.<ext>` (Market-1501 style; extra `s<seq>` suffixes on
//! the camera field are tolerated).

use std::fs;
use std::path::Path;

use image::imageops::FilterType;
use ndarray::Array3;

use super::{DataError, Geometry, ImageSample, Result};

/// Parses `(pid, camera_id)` from a file name. Returns `None` for names that
/// do not follow the convention or carry a negative (junk) pid.
pub fn parse_market_name(name: &str) -> Option<(usize, usize)> {
    let stem = name.rsplit_once('.').map_or(name, |(s, _)| s);
    let mut parts = stem.split('_');
    let pid: i64 = parts.next()?.parse().ok()?;
    let cam = parts.next()?.strip_prefix('c')?;
    let digits: String = cam.chars().take_while(char::is_ascii_digit).collect();
    let camera: usize = digits.parse().ok()?;
    parts.next()?;
    (pid >= 0).then_some((pid as usize, camera))
}

/// Reads every conforming image in `dir`, resized to `geometry`, as samples of
/// `domain_id`. Files are visited in name order.
pub fn load_image_directory(dir: &Path, domain_id: usize, geometry: Geometry) -> Result<Vec<ImageSample>> {
    if geometry.channels != 3 {
        return Err(DataError::Config("image ingestion produces RGB samples".into()));
    }
    let entries = fs::read_dir(dir).map_err(|source| DataError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let mut names: Vec<_> = entries
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.is_file())
        .collect();
    names.sort();
    let mut out = Vec::new();
    for path in names {
        let Some((pid, camera_id)) = path
            .file_name()
            .and_then(|n| n.to_str())
            .and_then(parse_market_name)
        else {
            continue;
        };
        let img = image::open(&path)
            .map_err(|e| DataError::Format(format!("{}: {e}", path.display())))?
            .to_rgb8();
        let img = image::imageops::resize(
            &img,
            geometry.width as u32,
            geometry.height as u32,
            FilterType::Triangle,
        );
        let pixels = Array3::from_shape_fn((geometry.height, geometry.width, 3), |(i, j, c)| {
            f64::from(img.get_pixel(j as u32, i as u32)[c]) / 255.0
        });
        out.push(ImageSample {
            pixels,
            pid,
            domain_id,
            camera_id,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_market_names() {
        assert_eq!(parse_market_name("0002_c1s1_000451_03.jpg"), Some((2, 1)));
        assert_eq!(parse_market_name("17_c0_3.png"), Some((17, 0)));
        assert_eq!(parse_market_name("-1_c1_3.png"), None);
        assert_eq!(parse_market_name("readme.txt"), None);
    }

    #[test]
    fn loads_and_resizes_images() {
        let dir = tempfile::tempdir().unwrap();
        let img = image::RgbImage::from_fn(8, 20, |x, _| image::Rgb([255, (x * 30) as u8, 0]));
        img.save(dir.path().join("0005_c2_001.png")).unwrap();
        img.save(dir.path().join("0005_c1_002.png")).unwrap();
        fs::write(dir.path().join("notes.txt"), "skip").unwrap();
        let samples = load_image_directory(dir.path(), 4, Geometry::default()).unwrap();
        assert_eq!(samples.len(), 2);
        assert_eq!(samples[0].camera_id, 1);
        assert_eq!(samples[1].camera_id, 2);
        assert!(samples.iter().all(|s| s.pid == 5 && s.domain_id == 4));
        assert_eq!(samples[0].pixels.dim(), (32, 16, 3));
        assert!((samples[0].pixels[[0, 0, 0]] - 1.0).abs() < 1e-12);
    }
}
