//! PNG images, GGT1 tensor files and checkpoints.
//!
//! A checkpoint is a directory holding `tensors.ggt` (named GGT1 tensors
//! concatenated in parameter order) and `index.json` (kind, model settings and
//! `{name -> byte offset}`).

use std::collections::BTreeMap;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use ggvit_core::ggt::{self, AnyTensor};
use ggvit_core::{ParamSet, Real, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

/// Decodes an 8-bit PNG to a `[3, H, W]` tensor in `[0, 1]`. Gray images are
/// replicated across channels and alpha is dropped.
pub fn read_png(path: &Path) -> Result<Tensor<f64>> {
    let file = fs::File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().with_context(|| format!("decoding {}", path.display()))?;
    let mut buf = vec![0; reader.output_buffer_size()];
    let info = reader.next_frame(&mut buf).with_context(|| format!("decoding {}", path.display()))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        other => bail!("{}: unsupported color type {other:?}", path.display()),
    };
    let mut data = vec![0.0; 3 * h * w];
    for i in 0..h * w {
        let px = &buf[i * channels..(i + 1) * channels];
        for c in 0..3 {
            let v = if channels < 3 { px[0] } else { px[c] };
            data[c * h * w + i] = f64::from(v) / 255.0;
        }
    }
    Ok(Tensor::new([3, h, w], data)?)
}

/// Quantizes a `[3, H, W]` tensor in `[0, 1]` to 8-bit RGB, row-interleaved.
pub fn to_rgb8(image: &Tensor<f64>) -> Result<(usize, usize, Vec<u8>)> {
    let s = image.shape();
    ensure!(s.len() == 3 && s[0] == 3, "expected a [3, H, W] image, got {s:?}");
    let (h, w) = (s[1], s[2]);
    let d = image.data();
    let mut out = Vec::with_capacity(3 * h * w);
    for i in 0..h * w {
        for c in 0..3 {
            out.push((d[c * h * w + i].clamp(0.0, 1.0) * 255.0).round() as u8);
        }
    }
    Ok((w, h, out))
}

/// Encodes 8-bit RGB pixels as PNG bytes.
pub fn encode_png(w: usize, h: usize, rgb: &[u8]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    {
        let mut enc = png::Encoder::new(&mut out, w as u32, h as u32);
        enc.set_color(png::ColorType::Rgb);
        enc.set_depth(png::BitDepth::Eight);
        let mut writer = enc.write_header()?;
        writer.write_image_data(rgb)?;
    }
    Ok(out)
}

pub fn write_png(path: &Path, image: &Tensor<f64>) -> Result<()> {
    let (w, h, rgb) = to_rgb8(image)?;
    fs::write(path, encode_png(w, h, &rgb)?).with_context(|| format!("writing {}", path.display()))
}

pub fn write_ggt<T: Real>(path: &Path, t: &Tensor<T>) -> Result<()> {
    fs::write(path, ggt::encode(t)?).with_context(|| format!("writing {}", path.display()))
}

pub fn read_ggt(path: &Path) -> Result<AnyTensor> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(ggt::decode(&bytes).with_context(|| format!("decoding {}", path.display()))?)
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_file(path: &Path) -> Result<String> {
    Ok(sha256_hex(&fs::read(path).with_context(|| format!("reading {}", path.display()))?))
}

/// Writes JSON with a trailing newline.
pub fn write_json<S: Serialize>(path: &Path, value: &S) -> Result<()> {
    let file = fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(file);
    serde_json::to_writer_pretty(&mut w, value)?;
    std::io::Write::write_all(&mut w, b"\n")?;
    Ok(())
}

pub fn read_json<D: for<'de> Deserialize<'de>>(path: &Path) -> Result<D> {
    let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CheckpointIndex {
    pub kind: String,
    pub dtype: String,
    pub settings: serde_json::Value,
    pub order: Vec<String>,
    pub offsets: BTreeMap<String, u64>,
}

const TENSORS: &str = "tensors.ggt";
const INDEX: &str = "index.json";

fn dtype_name<T: Real>() -> &'static str {
    if T::DTYPE == 0 {
        "f32"
    } else {
        "f64"
    }
}

pub fn save_checkpoint<T: Real, S: Serialize>(dir: &Path, kind: &str, settings: &S, params: &ParamSet<T>) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let mut blob = Vec::new();
    let mut offsets = BTreeMap::new();
    for (name, t) in params.iter() {
        offsets.insert(name.to_string(), blob.len() as u64);
        ggt::encode_into(t, &mut blob)?;
    }
    fs::write(dir.join(TENSORS), &blob)?;
    let index = CheckpointIndex {
        kind: kind.to_string(),
        dtype: dtype_name::<T>().to_string(),
        settings: serde_json::to_value(settings)?,
        order: params.names().to_vec(),
        offsets,
    };
    write_json(&dir.join(INDEX), &index)
}

/// Accepts either a checkpoint directory or a run directory holding one under
/// `checkpoint/`.
pub fn resolve_checkpoint(dir: &Path) -> PathBuf {
    let nested = dir.join("checkpoint");
    if !dir.join(INDEX).is_file() && nested.join(INDEX).is_file() {
        nested
    } else {
        dir.to_path_buf()
    }
}

pub fn read_checkpoint_index(dir: &Path) -> Result<CheckpointIndex> {
    read_json(&resolve_checkpoint(dir).join(INDEX))
}

/// Loads a checkpoint of the expected kind, converting tensors to `T`.
pub fn load_checkpoint<T: Real>(dir: &Path, kind: &str) -> Result<(CheckpointIndex, ParamSet<T>)> {
    let dir = &resolve_checkpoint(dir);
    let index = read_checkpoint_index(dir)?;
    ensure!(index.kind == kind, "{} holds a {} checkpoint, expected {kind}", dir.display(), index.kind);
    let blob = fs::read(dir.join(TENSORS)).with_context(|| format!("reading {}", dir.join(TENSORS).display()))?;
    let mut params = ParamSet::new();
    for name in &index.order {
        let off = *index.offsets.get(name).with_context(|| format!("no offset for {name}"))? as usize;
        ensure!(off < blob.len(), "offset of {name} is past the end of the tensor file");
        let (t, _) = ggt::decode_prefix(&blob[off..]).with_context(|| format!("decoding {name}"))?;
        params.add(name.clone(), t.into_real::<T>())?;
    }
    Ok((index, params))
}

/// Every regular file under `dir`, sorted, relative to `dir`.
pub fn list_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).with_context(|| format!("listing {}", d.display()))? {
            let p = entry?.path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(dir)?.to_path_buf());
            }
        }
    }
    out.sort();
    Ok(out)
}

/// SHA-256 over the sorted relative paths and contents of every file.
pub fn hash_dir(dir: &Path) -> Result<String> {
    let mut h = Sha256::new();
    for rel in list_files(dir)? {
        h.update(rel.to_string_lossy().as_bytes());
        h.update([0]);
        h.update(sha256_file(&dir.join(&rel))?.as_bytes());
    }
    Ok(h.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn png_round_trip_is_exact_on_8bit_values() {
        let dir = tempfile::tempdir().unwrap();
        let data: Vec<f64> = (0..3 * 4 * 5).map(|v| ((v * 37) % 256) as f64 / 255.0).collect();
        let img = Tensor::new([3, 4, 5], data).unwrap();
        let p = dir.path().join("a.png");
        write_png(&p, &img).unwrap();
        assert_eq!(read_png(&p).unwrap(), img);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut ps = ParamSet::<f32>::new();
        ps.add("b.w", Tensor::new([2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap()).unwrap();
        ps.add("a.bias", Tensor::new([3], vec![0.1, 0.2, 0.3]).unwrap()).unwrap();
        save_checkpoint(dir.path(), "detector", &serde_json::json!({"x": 1}), &ps).unwrap();
        let (idx, back) = load_checkpoint::<f32>(dir.path(), "detector").unwrap();
        assert_eq!(back.names(), ps.names());
        assert_eq!(back.tensors(), ps.tensors());
        assert_eq!(idx.dtype, "f32");
        assert!(load_checkpoint::<f32>(dir.path(), "quality").is_err());
    }
}
