//! Dataset directory layout: `manifest.tsv`, `captions.tsv` and binary PPM
//! images under `images/`.

use std::fs;
use std::path::Path;

use super::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::model::BoundingBox;
use crate::numcore::Tensor;

pub const MANIFEST_FILE: &str = "manifest.tsv";
pub const CAPTIONS_FILE: &str = "captions.tsv";
const IMAGE_DIR: &str = "images";

fn image_file(id: u64) -> String {
    format!("{IMAGE_DIR}/{id:06}.ppm")
}

pub(super) fn manifest_line(s: &Sample) -> String {
    let b = &s.gt_box;
    format!(
        "{}\t{}\t{}\t{:.6}\t{:.6}\t{:.6}\t{:.6}\t{}\n",
        s.id,
        image_file(s.id),
        s.expression,
        b.x,
        b.y,
        b.w,
        b.h,
        s.split
    )
}

/// Encodes `[3, h, w]` values in `[0, 1]` as P6 with maxval 255.
pub fn write_ppm(path: &Path, image: &Tensor<f64>) -> Result<()> {
    let (h, w) = match *image.shape() {
        [3, h, w] => (h, w),
        ref s => return Err(Error::Dimension(format!("PPM needs [3, h, w], got {s:?}"))),
    };
    let mut bytes = format!("P6\n{w} {h}\n255\n").into_bytes();
    let d = image.data();
    bytes.reserve(3 * h * w);
    for i in 0..h * w {
        for ch in 0..3 {
            bytes.push((d[ch * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<Tensor<f64>> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Data(format!("missing image file {}", path.display()))
        } else {
            Error::io(path, e)
        }
    })?;
    let bad = |what: &str| Error::Format(format!("{}: {what}", path.display()));
    if !bytes.starts_with(b"P6") {
        return Err(bad("not a binary PPM (magic is not P6)"));
    }
    // Header: magic, width, height, maxval, separated by whitespace and
    // optional comments, followed by exactly one whitespace byte.
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in fields.iter_mut() {
        loop {
            match bytes.get(pos) {
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&c| c != b'\n') {
                        pos += 1;
                    }
                }
                Some(c) if c.is_ascii_whitespace() => pos += 1,
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(|c| c.is_ascii_digit()) {
            pos += 1;
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("malformed header"))?;
    }
    let [w, h, maxval] = fields;
    if maxval != 255 {
        return Err(bad("only maxval 255 is supported"));
    }
    if !bytes.get(pos).is_some_and(|c| c.is_ascii_whitespace()) {
        return Err(bad("malformed header"));
    }
    let pixels = &bytes[pos + 1..];
    if pixels.len() != 3 * w * h {
        return Err(bad(&format!("expected {} pixel bytes, found {}", 3 * w * h, pixels.len())));
    }
    let mut data = vec![0.0; 3 * w * h];
    for (i, px) in pixels.chunks_exact(3).enumerate() {
        for ch in 0..3 {
            data[ch * h * w + i] = px[ch] as f64 / 255.0;
        }
    }
    Tensor::new(vec![3, h, w], data)
}

pub fn save_dataset(dir: &Path, ds: &Dataset) -> Result<()> {
    let images = dir.join(IMAGE_DIR);
    fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    for s in &ds.samples {
        if s.expression.contains(['\t', '\n']) || s.caption.contains(['\t', '\n']) {
            return Err(Error::Data(format!("sample {} has a tab or newline in its text", s.id)));
        }
        write_ppm(&dir.join(image_file(s.id)), &s.image)?;
    }
    let manifest = dir.join(MANIFEST_FILE);
    fs::write(&manifest, ds.manifest()).map_err(|e| Error::io(&manifest, e))?;
    let captions: String = ds
        .samples
        .iter()
        .map(|s| format!("{}\t{}\n", s.id, s.caption))
        .collect();
    let cap = dir.join(CAPTIONS_FILE);
    fs::write(&cap, captions).map_err(|e| Error::io(&cap, e))
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest).map_err(|e| Error::io(&manifest, e))?;
    let captions = read_captions(dir)?;
    let mut samples = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let err = |message: String| Error::Parse {
            path: manifest.clone(),
            line: i + 1,
            message,
        };
        if line.trim().is_empty() {
            continue;
        }
        let f: Vec<&str> = line.split('\t').collect();
        if f.len() != 8 {
            return Err(err(format!("expected 8 tab-separated fields, found {}", f.len())));
        }
        let id: u64 = f[0].parse().map_err(|_| err(format!("bad sample id {:?}", f[0])))?;
        let mut coords = [0.0; 4];
        for (c, s) in coords.iter_mut().zip(&f[3..7]) {
            *c = s.parse().map_err(|_| err(format!("bad box coordinate {s:?}")))?;
        }
        if f[2].is_empty() {
            return Err(err("empty expression".into()));
        }
        let split = f[7].parse().map_err(|e: Error| err(e.to_string()))?;
        let image = read_ppm(&dir.join(f[1]))?;
        samples.push(Sample {
            id,
            image,
            expression: f[2].to_string(),
            gt_box: BoundingBox::new(coords[0], coords[1], coords[2], coords[3]),
            split,
            caption: captions.get(&id).cloned().unwrap_or_default(),
            scene: None,
        });
    }
    Ok(Dataset { samples })
}

fn read_captions(dir: &Path) -> Result<std::collections::HashMap<u64, String>> {
    let path = dir.join(CAPTIONS_FILE);
    let mut out = std::collections::HashMap::new();
    let text = match fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(out),
        Err(e) => return Err(Error::io(&path, e)),
    };
    for (i, line) in text.lines().enumerate() {
        let parsed = line.split_once('\t').and_then(|(id, c)| Some((id.parse().ok()?, c)));
        let Some((id, caption)) = parsed else {
            return Err(Error::Parse {
                path: path.clone(),
                line: i + 1,
                message: "expected `id<TAB>caption`".into(),
            });
        };
        out.insert(id, caption.to_string());
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_round_trip_and_bad_magic() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.ppm");
        let data: Vec<f64> = (0..3 * 2 * 3).map(|i| (i * 14) as f64 / 255.0).collect();
        let img = Tensor::new(vec![3, 2, 3], data).unwrap();
        write_ppm(&p, &img).unwrap();
        assert!(read_ppm(&p).unwrap().bit_eq(&img));

        let q = dir.path().join("corrupt.ppm");
        let mut bytes = fs::read(&p).unwrap();
        bytes[1] = b'3';
        fs::write(&q, bytes).unwrap();
        let msg = read_ppm(&q).unwrap_err().to_string();
        assert!(msg.contains("corrupt.ppm"), "{msg}");

        assert!(matches!(read_ppm(&dir.path().join("nope.ppm")), Err(Error::Data(_))));
    }

    #[test]
    fn malformed_manifest_reports_line() {
        let dir = tempfile::tempdir().unwrap();
        fs::write(dir.path().join(MANIFEST_FILE), "0\tx.ppm\tthe circle\t0.5\n").unwrap();
        match load_dataset(dir.path()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 1),
            other => panic!("{other:?}"),
        }
    }
}
