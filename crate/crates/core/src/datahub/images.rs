use std::path::{Path, PathBuf};

use super::manifest::DatasetManifest;
use super::synth::{SyntheticSource, SYNTH_PREFIX};
use crate::error::{Error, Result};
use crate::numcore::exec::{map_indexed, Exec};
use crate::numcore::Tensor;

/// Mirror a planar `C×S×S` image left to right in place.
pub fn hflip(img: &mut [f64], channels: usize, size: usize) {
    for c in 0..channels {
        for y in 0..size {
            let row = (c * size + y) * size;
            img[row..row + size].reverse();
        }
    }
}

fn pnm_err(msg: impl Into<String>) -> Error {
    Error::Parse { row: 1, msg: msg.into() }
}

/// Decode a PGM (P2/P5) or PPM (P3/P6) into planar `[C, H, W]` values in [0, 1].
pub fn decode_pnm(bytes: &[u8]) -> Result<Tensor> {
    let mut pos = 0;
    let mut token = || -> Result<String> {
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(pnm_err("truncated header"));
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    let magic = token()?;
    let num = |t: String| t.parse::<usize>().map_err(|_| pnm_err(format!("bad header field {t:?}")));
    let (w, h, maxval) = (num(token()?)?, num(token()?)?, num(token()?)?);
    if maxval == 0 || maxval > 65535 {
        return Err(pnm_err("maxval must be in 1..=65535"));
    }
    let (channels, binary) = match magic.as_str() {
        "P2" => (1, false),
        "P3" => (3, false),
        "P5" => (1, true),
        "P6" => (3, true),
        other => return Err(pnm_err(format!("unsupported format {other:?}"))),
    };
    let n = w * h * channels;
    let mut interleaved = Vec::with_capacity(n);
    if binary {
        let start = pos + 1;
        let width = if maxval > 255 { 2 } else { 1 };
        let body = bytes.get(start..start + n * width).ok_or_else(|| pnm_err("truncated pixel data"))?;
        for px in body.chunks(width) {
            let v = if width == 2 { u16::from_be_bytes([px[0], px[1]]) as usize } else { px[0] as usize };
            interleaved.push(v);
        }
    } else {
        for _ in 0..n {
            interleaved.push(num(token()?)?);
        }
    }
    let mut planar = vec![0.0; n];
    for (i, v) in interleaved.into_iter().enumerate() {
        if v > maxval {
            return Err(pnm_err(format!("sample {v} exceeds maxval {maxval}")));
        }
        let (px, c) = (i / channels, i % channels);
        planar[c * w * h + px] = v as f64 / maxval as f64;
    }
    Tensor::new(vec![channels, h, w], planar)
}

/// Headerless little-endian f32 payload of exactly `shape` entries.
pub fn decode_raw(bytes: &[u8], shape: &[usize]) -> Result<Tensor> {
    let n: usize = shape.iter().product();
    if bytes.len() != 4 * n {
        return Err(pnm_err(format!("raw tensor has {} bytes, expected {}", bytes.len(), 4 * n)));
    }
    let data = bytes.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64).collect();
    Tensor::new(shape.to_vec(), data)
}

/// A manifest with every image decoded to a flat `C·S·S` vector.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub channels: usize,
    pub image_size: usize,
    pub images: Vec<Vec<f64>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn from_synthetic(manifest: DatasetManifest, source: &SyntheticSource, exec: Exec) -> Result<Self> {
        let spec = source.spec();
        Self::materialize(manifest, spec.in_channels, spec.image_size, Path::new("."), Some(source), exec)
    }

    /// Decode every entry. File refs are resolved against `base`; `synth:<i>`
    /// refs need `synth`.
    pub fn materialize(
        manifest: DatasetManifest,
        channels: usize,
        image_size: usize,
        base: &Path,
        synth: Option<&SyntheticSource>,
        exec: Exec,
    ) -> Result<Self> {
        let shape = [channels, image_size, image_size];
        let loaded: Vec<Result<Vec<f64>>> = map_indexed(exec, manifest.entries.len(), |i| {
            let r = &manifest.entries[i].sample_ref;
            let row = i + 2;
            let wrap = |e: Error| Error::Parse { row, msg: format!("{r}: {e}") };
            if let Some(idx) = r.strip_prefix(SYNTH_PREFIX) {
                let src = synth.ok_or_else(|| wrap(Error::config("synthetic ref without a synthetic spec")))?;
                let idx: usize = idx.parse().map_err(|_| wrap(Error::config("bad synthetic index")))?;
                if src.spec().in_channels != channels || src.spec().image_size != image_size {
                    return Err(wrap(Error::config("synthetic spec does not match the backbone input shape")));
                }
                return Ok(src.image(idx));
            }
            let path: PathBuf = base.join(r);
            let bytes = std::fs::read(&path).map_err(|e| wrap(Error::Io(e)))?;
            let t = match path.extension().and_then(|e| e.to_str()) {
                Some("pgm") | Some("ppm") | Some("pnm") => decode_pnm(&bytes),
                _ => decode_raw(&bytes, &shape),
            }
            .map_err(wrap)?;
            if t.shape() != shape {
                return Err(wrap(Error::shape("load_image", format!("{:?}, expected {shape:?}", t.shape()))));
            }
            Ok(t.into_data())
        });
        let images = loaded.into_iter().collect::<Result<Vec<_>>>()?;
        Ok(Self { manifest, channels, image_size, images })
    }

    /// `[B, C, S, S]` batch and labels for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor, Vec<usize>)> {
        let len = self.channels * self.image_size * self.image_size;
        let mut data = Vec::with_capacity(indices.len() * len);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            let img = self.images.get(i).ok_or_else(|| Error::config(format!("sample index {i} out of range")))?;
            data.extend_from_slice(img);
            labels.push(self.manifest.entries[i].label);
        }
        let t = Tensor::new(vec![indices.len(), self.channels, self.image_size, self.image_size], data)?;
        Ok((t, labels))
    }
}
