//! Frame sequence ingestion, image and raw-tensor I/O, and the bicubic
//! degradation that produces training inputs.
//!
//! Two on-disk forms are accepted: a directory of lexicographically ordered
//! 8-bit RGB PNG files, or a single raw little-endian float32 tensor in
//! C-order with a JSON sidecar `{n,c,h,w}` at `<file>.json`.

use crate::error::{Error, Result};
use crate::upsample::ScaleSpec;
use ndarray::Array3;
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

/// Ordered RGB frames with uniform timestamps in `[0,1]`.
#[derive(Clone, Debug)]
pub struct FrameSequence {
    pub frames: Vec<Array3<f64>>,
    pub timestamps: Vec<f64>,
    pub source_path: String,
}

impl FrameSequence {
    pub fn new(frames: Vec<Array3<f64>>, source_path: impl Into<String>) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::EmptyInput("frame sequence"));
        }
        let dim = frames[0].dim();
        for (i, f) in frames.iter().enumerate() {
            if f.dim() != dim {
                return Err(Error::Data(format!(
                    "mixed resolutions: frame 0 is {:?}, frame {i} is {:?}",
                    dim,
                    f.dim()
                )));
            }
        }
        let n = frames.len();
        let timestamps = if n == 1 {
            vec![0.0]
        } else {
            (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
        };
        Ok(FrameSequence {
            frames,
            timestamps,
            source_path: source_path.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// `(height, width)` of the frames.
    pub fn frame_size(&self) -> (usize, usize) {
        let (_, h, w) = self.frames[0].dim();
        (h, w)
    }
}

/// Loads one 8-bit PNG as `[3,H,W]` in `[0,1]`.
pub fn load_frame_png(path: &Path) -> Result<Array3<f64>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.display().to_string(),
            message: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = Array3::zeros((3, h, w));
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            out[[c, y as usize, x as usize]] = px.0[c] as f64 / 255.0;
        }
    }
    Ok(out)
}

/// Writes `[3,H,W]` in `[0,1]` as an 8-bit PNG.
pub fn save_frame_png(path: &Path, frame: &Array3<f64>) -> Result<()> {
    let (c, h, w) = frame.dim();
    if c != 3 {
        return Err(Error::invalid("save_frame_png expects RGB"));
    }
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [
                (frame[[0, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (frame[[1, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
                (frame[[2, y, x]].clamp(0.0, 1.0) * 255.0).round() as u8,
            ];
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        message: e.to_string(),
    })
}

#[derive(serde::Serialize, serde::Deserialize)]
struct RawSidecar {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
}

fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_os_string();
    s.push(".json");
    PathBuf::from(s)
}

/// Reads a raw little-endian float32 tensor with its `{n,c,h,w}` sidecar.
pub fn read_raw_tensor(path: &Path) -> Result<Vec<Array3<f64>>> {
    let sidecar = sidecar_path(path);
    let meta: RawSidecar = serde_json::from_str(
        &fs::read_to_string(&sidecar)
            .map_err(|e| Error::io(sidecar.display().to_string(), e))?,
    )?;
    if meta.c != 3 {
        return Err(Error::Data(format!(
            "raw tensor must have 3 channels, sidecar says {}",
            meta.c
        )));
    }
    let mut file =
        fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let expected = meta.n * meta.c * meta.h * meta.w * 4;
    if bytes.len() != expected {
        return Err(Error::Data(format!(
            "raw tensor size mismatch: expected {expected} bytes, found {}",
            bytes.len()
        )));
    }
    let mut frames = Vec::with_capacity(meta.n);
    let mut offset = 0;
    for _ in 0..meta.n {
        let mut frame = Array3::zeros((meta.c, meta.h, meta.w));
        for v in frame.iter_mut() {
            let raw = f32::from_le_bytes(bytes[offset..offset + 4].try_into().unwrap());
            *v = raw as f64;
            offset += 4;
        }
        frames.push(frame);
    }
    Ok(frames)
}

/// Writes frames as a raw little-endian float32 tensor plus sidecar.
pub fn write_raw_tensor(path: &Path, frames: &[Array3<f64>]) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("write_raw_tensor"));
    }
    let (c, h, w) = frames[0].dim();
    let sidecar = RawSidecar {
        n: frames.len(),
        c,
        h,
        w,
    };
    fs::write(
        sidecar_path(path),
        serde_json::to_string(&sidecar)?,
    )
    .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut file =
        fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::with_capacity(frames.len() * c * h * w * 4);
    for frame in frames {
        for v in frame.iter() {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    file.write_all(&bytes)
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// Loads a sequence from a PNG directory or a raw tensor file.
pub fn ingest(path: &Path) -> Result<FrameSequence> {
    if path.is_dir() {
        let mut entries: Vec<PathBuf> = fs::read_dir(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| {
                p.extension()
                    .map(|e| e.eq_ignore_ascii_case("png"))
                    .unwrap_or(false)
            })
            .collect();
        entries.sort();
        if entries.is_empty() {
            return Err(Error::EmptyInput("no PNG frames in directory"));
        }
        let mut frames = Vec::with_capacity(entries.len());
        for entry in &entries {
            frames.push(load_frame_png(entry)?);
        }
        FrameSequence::new(frames, path.display().to_string())
    } else {
        let frames = read_raw_tensor(path)?;
        FrameSequence::new(frames, path.display().to_string())
    }
}

/// Catmull-Rom cubic kernel (a = -0.5).
fn cubic(t: f64) -> f64 {
    let a = -0.5;
    let t = t.abs();
    if t <= 1.0 {
        (a + 2.0) * t * t * t - (a + 3.0) * t * t + 1.0
    } else if t < 2.0 {
        a * t * t * t - 5.0 * a * t * t + 8.0 * a * t - 4.0 * a
    } else {
        0.0
    }
}

fn bicubic_taps(n_in: usize, n_out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n_in as f64 / n_out as f64;
    // widen the kernel when downscaling so it antialiases
    let filter_scale = scale.max(1.0);
    let support = 2.0 * filter_scale;
    let mut taps = Vec::with_capacity(n_out);
    for o in 0..n_out {
        let center = (o as f64 + 0.5) * scale - 0.5;
        let lo = (center - support).ceil() as isize;
        let hi = (center + support).floor() as isize;
        let mut row = Vec::new();
        let mut total = 0.0;
        for i in lo..=hi {
            let w = cubic((i as f64 - center) / filter_scale);
            if w == 0.0 {
                continue;
            }
            let idx = i.clamp(0, n_in as isize - 1) as usize;
            row.push((idx, w));
            total += w;
        }
        for (_, w) in row.iter_mut() {
            *w /= total;
        }
        taps.push(row);
    }
    taps
}

/// Separable bicubic resample to an exact size, antialiased when
/// downscaling. Identity at unchanged size.
pub fn bicubic_resize(img: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = img.dim();
    if out_h == h && out_w == w {
        return img.clone();
    }
    let tx = bicubic_taps(w, out_w);
    let ty = bicubic_taps(h, out_h);
    let mut horiz = Array3::zeros((c, h, out_w));
    for ch in 0..c {
        for y in 0..h {
            for (ox, row) in tx.iter().enumerate() {
                let mut acc = 0.0;
                for &(ix, wt) in row {
                    acc += wt * img[[ch, y, ix]];
                }
                horiz[[ch, y, ox]] = acc;
            }
        }
    }
    let mut out = Array3::zeros((c, out_h, out_w));
    for ch in 0..c {
        for (oy, row) in ty.iter().enumerate() {
            for ox in 0..out_w {
                let mut acc = 0.0;
                for &(iy, wt) in row {
                    acc += wt * horiz[[ch, iy, ox]];
                }
                out[[ch, oy, ox]] = acc;
            }
        }
    }
    out
}

/// Training/evaluation degradation of an HR clip.
#[derive(Debug)]
pub struct DegradedClip {
    /// Bicubic-downsampled odd-index frames (1st, 3rd, ... one-based).
    pub lr: FrameSequence,
    /// HR ground truth at the kept (existing) timestamps, cropped to the
    /// exact region the LR frames cover.
    pub gt_existing: Vec<Array3<f64>>,
    /// HR ground truth for the dropped (interpolated) timestamps.
    pub gt_interpolated: Vec<Array3<f64>>,
}

/// Keeps the odd-index HR frames (one-based: 1st, 3rd, ...) and bicubic
/// downsamples them by `(s_h, s_w)`; the even-index frames become
/// interpolation ground truth. The HR frames are cropped to
/// `(ceil(lr_h*s_h), ceil(lr_w*s_w))` so that inference on the LR output
/// reproduces the ground-truth size exactly.
pub fn degrade(hr: &FrameSequence, scale: &ScaleSpec) -> Result<DegradedClip> {
    if scale.s_h < 1.0 || scale.s_w < 1.0 {
        return Err(Error::invalid("degrade requires spatial scale >= 1"));
    }
    let (h, w) = hr.frame_size();
    let lr_h = ((h as f64 / scale.s_h).floor() as usize).max(1);
    let lr_w = ((w as f64 / scale.s_w).floor() as usize).max(1);
    let (crop_h, crop_w) = scale.output_size(lr_h, lr_w);
    debug_assert!(crop_h <= h && crop_w <= w);

    let crop = |frame: &Array3<f64>| -> Array3<f64> {
        frame
            .slice(ndarray::s![.., 0..crop_h, 0..crop_w])
            .to_owned()
    };

    let mut lr_frames = Vec::new();
    let mut gt_existing = Vec::new();
    let mut gt_interpolated = Vec::new();
    for (i, frame) in hr.frames.iter().enumerate() {
        let cropped = crop(frame);
        if i % 2 == 0 {
            lr_frames.push(bicubic_resize(&cropped, lr_h, lr_w));
            gt_existing.push(cropped);
        } else {
            gt_interpolated.push(cropped);
        }
    }
    // a trailing even-index frame has no bracketing pair; drop it from the
    // interpolation targets
    if hr.len().is_multiple_of(2) {
        gt_interpolated.pop();
    }
    Ok(DegradedClip {
        lr: FrameSequence::new(lr_frames, hr.source_path.clone())?,
        gt_existing,
        gt_interpolated,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_rgb(h: usize, w: usize, rng: &mut ChaCha8Rng) -> Array3<f64> {
        let mut img = Array3::zeros((3, h, w));
        img.mapv_inplace(|_| rng.gen_range(0.0..1.0));
        img
    }

    #[test]
    fn png_roundtrip_is_lossless_at_8bit() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(201);
        // values on the 8-bit grid survive exactly
        let mut img = Array3::zeros((3, 6, 5));
        img.mapv_inplace(|_| rng.gen_range(0..=255u8) as f64 / 255.0);
        let path = dir.path().join("frame.png");
        save_frame_png(&path, &img).unwrap();
        let back = load_frame_png(&path).unwrap();
        for (a, b) in img.iter().zip(back.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn ingest_png_directory_vimeo_style() {
        // seven consecutive frames at 448x256
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(202);
        for i in 0..7 {
            let img = rand_rgb(256, 448, &mut rng);
            save_frame_png(&dir.path().join(format!("frame_{i:03}.png")), &img).unwrap();
        }
        let seq = ingest(dir.path()).unwrap();
        assert_eq!(seq.len(), 7);
        assert_eq!(seq.frame_size(), (256, 448));
        assert_eq!(seq.timestamps[0], 0.0);
        assert_eq!(seq.timestamps[6], 1.0);
        assert!((seq.timestamps[3] - 0.5).abs() < 1e-12);
        assert!(seq.frames[0].iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn ingest_empty_directory_fails() {
        let dir = tempfile::tempdir().unwrap();
        assert!(ingest(dir.path()).is_err());
    }

    #[test]
    fn ingest_mixed_resolutions_fails() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(203);
        save_frame_png(&dir.path().join("a.png"), &rand_rgb(8, 8, &mut rng)).unwrap();
        save_frame_png(&dir.path().join("b.png"), &rand_rgb(8, 9, &mut rng)).unwrap();
        let err = ingest(dir.path()).unwrap_err();
        assert!(err.to_string().contains("mixed resolutions"));
    }

    #[test]
    fn raw_tensor_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(204);
        // f32-representable values round-trip bit exactly
        let frames: Vec<Array3<f64>> = (0..2)
            .map(|_| {
                let mut f = rand_rgb(8, 8, &mut rng);
                f.mapv_inplace(|v| v as f32 as f64);
                f
            })
            .collect();
        let path = dir.path().join("clip.raw");
        write_raw_tensor(&path, &frames).unwrap();
        let seq = ingest(&path).unwrap();
        assert_eq!(seq.len(), 2);
        for (a, b) in frames.iter().zip(seq.frames.iter()) {
            assert_eq!(a, b);
        }
    }

    #[test]
    fn bicubic_preserves_constants_and_identity() {
        let img = Array3::from_elem((3, 12, 12), 0.6);
        let down = bicubic_resize(&img, 5, 7);
        for v in down.iter() {
            assert!((v - 0.6).abs() < 1e-12, "bicubic must preserve DC");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(205);
        let img2 = rand_rgb(9, 9, &mut rng);
        assert_eq!(bicubic_resize(&img2, 9, 9), img2);
    }

    #[test]
    fn degrade_counts_for_seven_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(206);
        let frames: Vec<Array3<f64>> = (0..7).map(|_| rand_rgb(32, 32, &mut rng)).collect();
        let hr = FrameSequence::new(frames, "test").unwrap();
        let out = degrade(&hr, &ScaleSpec::isotropic(2, 2.0).unwrap()).unwrap();
        assert_eq!(out.lr.len(), 4);
        assert_eq!(out.gt_existing.len(), 4);
        assert_eq!(out.gt_interpolated.len(), 3);
        assert_eq!(out.lr.frame_size(), (16, 16));
    }

    #[test]
    fn degrade_spatial_identity_keeps_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(207);
        let frames: Vec<Array3<f64>> = (0..5).map(|_| rand_rgb(16, 16, &mut rng)).collect();
        let hr = FrameSequence::new(frames.clone(), "test").unwrap();
        let out = degrade(&hr, &ScaleSpec::isotropic(2, 1.0).unwrap()).unwrap();
        assert_eq!(out.lr.len(), 3);
        assert_eq!(out.lr.frames[0], frames[0]);
        assert_eq!(out.lr.frames[1], frames[2]);
        assert_eq!(out.lr.frames[2], frames[4]);
    }

    #[test]
    fn degrade_rejects_subunit_scale() {
        let mut rng = ChaCha8Rng::seed_from_u64(208);
        let hr = FrameSequence::new(vec![rand_rgb(8, 8, &mut rng)], "t").unwrap();
        let bad = ScaleSpec {
            r: 2,
            s_h: 0.5,
            s_w: 1.0,
        };
        assert!(degrade(&hr, &bad).is_err());
    }

    #[test]
    fn degrade_fractional_scale_sizes_are_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(209);
        let frames: Vec<Array3<f64>> = (0..3).map(|_| rand_rgb(64, 64, &mut rng)).collect();
        let hr = FrameSequence::new(frames, "test").unwrap();
        let scale = ScaleSpec::isotropic(2, 2.8).unwrap();
        let out = degrade(&hr, &scale).unwrap();
        let (lh, lw) = out.lr.frame_size();
        let (oh, ow) = scale.output_size(lh, lw);
        let gt_dim = out.gt_existing[0].dim();
        assert_eq!((gt_dim.1, gt_dim.2), (oh, ow));
    }
}
