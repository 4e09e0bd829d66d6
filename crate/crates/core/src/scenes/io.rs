//! Frame folders on disk.
//!
//! A dataset root holds `manifest.json` and one `sample_####` directory per
//! sample. Each frame directory holds `frame_####.{pgm,png,jpg}` with
//! consecutive indices, plus optional `mask<k>_####` images per object.

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use image::codecs::pnm::{PnmEncoder, PnmSubtype, SampleEncoding};
use image::{ExtendedColorType, ImageEncoder};

use super::{Dataset, FrameSequence, Manifest, DATASET_FORMAT};
use crate::error::{Error, Result};

pub const MANIFEST_FILE: &str = "manifest.json";
const EXTENSIONS: [&str; 4] = ["pgm", "png", "jpg", "jpeg"];

#[derive(Debug, Clone, PartialEq)]
pub struct LoadOptions {
    /// Area-average every frame to `(width, height)`.
    pub resize: Option<(usize, usize)>,
    pub min_frames: usize,
    /// Overrides the sampling period found in a manifest.
    pub dt: Option<f64>,
}

impl Default for LoadOptions {
    fn default() -> Self {
        LoadOptions {
            resize: None,
            min_frames: 3,
            dt: None,
        }
    }
}

fn sample_dir(root: &Path, i: usize) -> PathBuf {
    root.join(format!("sample_{i:04}"))
}

fn write_pgm(path: &Path, values: &[f32], width: usize, height: usize) -> Result<()> {
    let bytes: Vec<u8> = values
        .iter()
        .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    let file = BufWriter::new(fs::File::create(path)?);
    PnmEncoder::new(file)
        .with_subtype(PnmSubtype::Graymap(SampleEncoding::Binary))
        .write_image(&bytes, width as u32, height as u32, ExtendedColorType::L8)?;
    Ok(())
}

/// Writes frames, masks and the manifest under `root`.
pub fn write_dataset(ds: &Dataset, root: &Path) -> Result<()> {
    fs::create_dir_all(root)?;
    for (i, s) in ds.samples.iter().enumerate() {
        let dir = sample_dir(root, i);
        fs::create_dir_all(&dir)?;
        for t in 0..s.n_frames {
            write_pgm(&dir.join(format!("frame_{t:04}.pgm")), s.frame(t), s.width, s.height)?;
            for k in 0..s.masks.len() {
                write_pgm(&dir.join(format!("mask{k}_{t:04}.pgm")), s.mask(k, t), s.width, s.height)?;
            }
        }
    }
    let file = BufWriter::new(fs::File::create(root.join(MANIFEST_FILE))?);
    serde_json::to_writer_pretty(file, &ds.manifest)?;
    Ok(())
}

fn read_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::dataset(path, e.to_string()))?;
    let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::dataset(path, e.to_string()))?;
    if m.format != DATASET_FORMAT {
        return Err(Error::dataset(path, format!("unsupported format {:?}", m.format)));
    }
    if !(m.dt > 0.0 && m.dt.is_finite()) {
        return Err(Error::dataset(path, format!("dt must be positive, got {}", m.dt)));
    }
    Ok(m)
}

/// Loads a dataset written by [`write_dataset`].
pub fn load_dataset(root: &Path) -> Result<Dataset> {
    let manifest = read_manifest(&root.join(MANIFEST_FILE))?;
    let opts = LoadOptions {
        resize: None,
        min_frames: 2,
        dt: Some(manifest.dt),
    };
    let mut samples = Vec::with_capacity(manifest.n_samples);
    for i in 0..manifest.n_samples {
        let dir = sample_dir(root, i);
        let mut seq = load_frames(&dir, &opts)?;
        if seq.n_frames != manifest.frames_per_sample || seq.width != manifest.width || seq.height != manifest.height {
            return Err(Error::dataset(
                &dir,
                format!(
                    "found {} frames of {}x{}, manifest says {} of {}x{}",
                    seq.n_frames, seq.width, seq.height, manifest.frames_per_sample, manifest.width, manifest.height
                ),
            ));
        }
        seq.gt_trajectory = manifest.samples.get(i).and_then(|m| m.gt_trajectory.clone());
        samples.push(seq);
    }
    Ok(Dataset { manifest, samples })
}

/// Matches `<prefix>_<index>.<ext>`.
fn parse_name(name: &str) -> Option<(&str, usize)> {
    let (stem, ext) = name.rsplit_once('.')?;
    if !EXTENSIONS.contains(&ext.to_ascii_lowercase().as_str()) {
        return None;
    }
    let (prefix, idx) = stem.rsplit_once('_')?;
    if idx.is_empty() || !idx.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((prefix, idx.parse().ok()?))
}

fn consecutive(dir: &Path, what: &str, mut files: Vec<(usize, PathBuf)>) -> Result<Vec<PathBuf>> {
    files.sort();
    for w in files.windows(2) {
        if w[1].0 == w[0].0 {
            return Err(Error::dataset(dir, format!("duplicate {what} index {}", w[0].0)));
        }
        if w[1].0 != w[0].0 + 1 {
            return Err(Error::dataset(
                dir,
                format!("{what} indices jump from {} to {}", w[0].0, w[1].0),
            ));
        }
    }
    Ok(files.into_iter().map(|(_, p)| p).collect())
}

fn read_gray(path: &Path) -> Result<(Vec<f32>, usize, usize)> {
    let img = image::open(path).map_err(|e| Error::dataset(path, e.to_string()))?.to_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((img.into_raw().into_iter().map(|b| b as f32 / 255.0).collect(), w, h))
}

/// Box filter with fractional pixel overlaps.
pub(crate) fn area_resize(src: &[f32], w: usize, h: usize, out_w: usize, out_h: usize) -> Vec<f32> {
    if (w, h) == (out_w, out_h) {
        return src.to_vec();
    }
    let spans = |n_in: usize, n_out: usize| -> Vec<Vec<(usize, f64)>> {
        let ratio = n_in as f64 / n_out as f64;
        (0..n_out)
            .map(|o| {
                let (lo, hi) = (o as f64 * ratio, (o + 1) as f64 * ratio);
                let first = lo.floor() as usize;
                let last = (hi.ceil() as usize).min(n_in);
                (first..last)
                    .map(|i| (i, ((i + 1) as f64).min(hi) - (i as f64).max(lo)))
                    .filter(|&(_, wgt)| wgt > 0.0)
                    .collect()
            })
            .collect()
    };
    let cols = spans(w, out_w);
    let rows = spans(h, out_h);
    let mut out = Vec::with_capacity(out_w * out_h);
    for r in &rows {
        for c in &cols {
            let (mut acc, mut total) = (0.0, 0.0);
            for &(y, wy) in r {
                for &(x, wx) in c {
                    acc += wy * wx * src[y * w + x] as f64;
                    total += wy * wx;
                }
            }
            out.push((acc / total) as f32);
        }
    }
    out
}

fn find_dt(dir: &Path) -> Option<f64> {
    let candidates = [Some(dir.to_path_buf()), dir.parent().map(Path::to_path_buf)];
    candidates
        .into_iter()
        .flatten()
        .map(|d| d.join(MANIFEST_FILE))
        .find(|p| p.is_file())
        .and_then(|p| read_manifest(&p).ok())
        .map(|m| m.dt)
}

/// Loads a folder of numbered frames as one grey-scale sequence.
///
/// The sampling period comes from `opts.dt`, else from a manifest in the
/// folder or its parent.
pub fn load_frames(dir: &Path, opts: &LoadOptions) -> Result<FrameSequence> {
    let entries = fs::read_dir(dir).map_err(|e| Error::dataset(dir, e.to_string()))?;
    let mut frames = Vec::new();
    let mut masks: BTreeMap<usize, Vec<(usize, PathBuf)>> = BTreeMap::new();
    for entry in entries {
        let path = entry?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        let Some((prefix, idx)) = parse_name(name) else { continue };
        if prefix == "frame" {
            frames.push((idx, path.clone()));
        } else if let Some(k) = prefix.strip_prefix("mask").and_then(|k| k.parse::<usize>().ok()) {
            masks.entry(k).or_default().push((idx, path.clone()));
        }
    }
    if frames.is_empty() {
        return Err(Error::dataset(dir, "no frame_#### images found"));
    }
    let frame_paths = consecutive(dir, "frame", frames)?;
    if frame_paths.len() < opts.min_frames {
        return Err(Error::dataset(
            dir,
            format!("need at least {} frames, found {}", opts.min_frames, frame_paths.len()),
        ));
    }
    let dt = opts
        .dt
        .or_else(|| find_dt(dir))
        .ok_or_else(|| Error::dataset(dir, "no sampling period: pass dt or add a manifest"))?;
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(Error::InvalidArgument(format!("dt must be positive, got {dt}")));
    }

    let mut size = None;
    let mut read_stack = |paths: &[PathBuf]| -> Result<Vec<f32>> {
        let mut stack = Vec::new();
        for p in paths {
            let (px, w, h) = read_gray(p)?;
            match size {
                None => size = Some((w, h)),
                Some(s) if s != (w, h) => {
                    return Err(Error::dataset(p, format!("size {w}x{h} differs from {}x{}", s.0, s.1)))
                }
                _ => {}
            }
            let (ow, oh) = opts.resize.unwrap_or((w, h));
            stack.extend(area_resize(&px, w, h, ow, oh));
        }
        Ok(stack)
    };
    let frame_stack = read_stack(&frame_paths)?;
    let mut mask_stacks = Vec::new();
    for (expected, (k, files)) in masks.into_iter().enumerate() {
        if k != expected {
            return Err(Error::dataset(dir, format!("mask{expected} missing while mask{k} exists")));
        }
        let paths = consecutive(dir, "mask", files)?;
        if paths.len() != frame_paths.len() {
            return Err(Error::dataset(
                dir,
                format!("mask{k} has {} images for {} frames", paths.len(), frame_paths.len()),
            ));
        }
        mask_stacks.push(read_stack(&paths)?);
    }
    let (w, h) = size.expect("at least one frame was read");
    let (width, height) = opts.resize.unwrap_or((w, h));
    Ok(FrameSequence {
        frames: frame_stack,
        n_frames: frame_paths.len(),
        width,
        height,
        dt,
        masks: mask_stacks,
        gt_trajectory: None,
    })
}
