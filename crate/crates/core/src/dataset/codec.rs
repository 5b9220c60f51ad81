//! Codec layer: the 8-bit clip container used by the clip store, plus GIF
//! sources through the `image` crate.
//!
//! Clip container layout (little endian):
//!
//! ```text
//! magic  "TBCLIP01"          8 bytes
//! T, H, W, C                 4 × u32
//! fps                        f64
//! pixels                     T·H·W·C × u8, row-major (t, y, x, c)
//! ```

use std::io::Cursor;

use image::codecs::gif::GifDecoder;
use image::AnimationDecoder;
use ndarray::{Array3, Array4};

use super::ClipTensor;
use crate::error::{Error, Result};

pub(crate) const CLIP_MAGIC: &[u8; 8] = b"TBCLIP01";
const HEADER_LEN: usize = 8 + 16 + 8;

/// Frames decoded from a source, before temporal and spatial normalization.
#[derive(Clone, Debug)]
pub struct DecodedVideo {
    /// `H×W×C` frames with values in `[0, 1]`.
    pub frames: Vec<Array3<f32>>,
    pub fps: f64,
}

/// Serializes a clip with 8-bit quantization (`round(v·255)`).
pub fn encode_clip_bytes(clip: &ClipTensor) -> Vec<u8> {
    let (t, h, w, c) = clip.dims();
    let mut out = Vec::with_capacity(HEADER_LEN + clip.frames.len());
    out.extend_from_slice(CLIP_MAGIC);
    for d in [t, h, w, c] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    out.extend_from_slice(&clip.fps.to_le_bytes());
    out.extend(
        clip.frames
            .iter()
            .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
    );
    out
}

pub(crate) fn decode_clip_bytes(bytes: &[u8], name: &str) -> Result<ClipTensor> {
    let bad = |reason: &str| Error::UndecodableSource {
        path: name.to_string(),
        reason: reason.to_string(),
    };
    if bytes.len() < HEADER_LEN || &bytes[..8] != CLIP_MAGIC {
        return Err(bad("not a clip container"));
    }
    let dim =
        |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (t, h, w, c) = (dim(0), dim(1), dim(2), dim(3));
    let fps = f64::from_le_bytes(bytes[24..32].try_into().unwrap());
    let n = t
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .and_then(|v| v.checked_mul(c))
        .ok_or_else(|| bad("dimension overflow"))?;
    let pixels = &bytes[HEADER_LEN..];
    if pixels.len() != n {
        return Err(bad("pixel payload length does not match header"));
    }
    if t == 0 {
        return Err(Error::ZeroFrameSource(name.to_string()));
    }
    let data: Vec<f32> = pixels.iter().map(|&b| b as f32 / 255.0).collect();
    let frames = Array4::from_shape_vec((t, h, w, c), data).map_err(|e| bad(&e.to_string()))?;
    Ok(ClipTensor { frames, fps })
}

fn decode_gif(bytes: &[u8], name: &str) -> Result<DecodedVideo> {
    let bad = |e: image::ImageError| Error::UndecodableSource {
        path: name.to_string(),
        reason: e.to_string(),
    };
    let decoder = GifDecoder::new(Cursor::new(bytes)).map_err(bad)?;
    let frames = decoder.into_frames().collect_frames().map_err(bad)?;
    if frames.is_empty() {
        return Err(Error::ZeroFrameSource(name.to_string()));
    }
    let mut total_ms = 0.0;
    let mut out = Vec::with_capacity(frames.len());
    for frame in &frames {
        let (num, den) = frame.delay().numer_denom_ms();
        total_ms += num as f64 / den.max(1) as f64;
        let buf = frame.buffer();
        let (w, h) = buf.dimensions();
        let arr = Array3::from_shape_fn((h as usize, w as usize, 3), |(y, x, ch)| {
            buf.get_pixel(x as u32, y as u32).0[ch] as f32 / 255.0
        });
        out.push(arr);
    }
    let fps = if total_ms > 0.0 {
        1000.0 * out.len() as f64 / total_ms
    } else {
        super::CLIP_FPS
    };
    Ok(DecodedVideo { frames: out, fps })
}

/// Decodes a source by sniffing its leading bytes.
pub fn decode_source(bytes: &[u8], name: &str) -> Result<DecodedVideo> {
    if bytes.starts_with(CLIP_MAGIC) {
        let clip = decode_clip_bytes(bytes, name)?;
        let frames = clip.frames.outer_iter().map(|f| f.to_owned()).collect();
        Ok(DecodedVideo {
            frames,
            fps: clip.fps,
        })
    } else if bytes.starts_with(b"GIF87a") || bytes.starts_with(b"GIF89a") {
        decode_gif(bytes, name)
    } else {
        Err(Error::UndecodableSource {
            path: name.to_string(),
            reason: "unrecognized container".into(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_container_round_trip_is_within_quantization() {
        let clip = ClipTensor::new(
            Array4::from_shape_fn((3, 4, 5, 3), |(t, y, x, c)| {
                ((t * 60 + y * 20 + x * 4 + c) % 97) as f32 / 96.0
            }),
            10.0,
        );
        let bytes = encode_clip_bytes(&clip);
        let back = decode_clip_bytes(&bytes, "mem").unwrap();
        assert_eq!(back.dims(), clip.dims());
        let max_err = clip
            .frames
            .iter()
            .zip(back.frames.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 0.5 / 255.0 + 1e-6);
    }

    #[test]
    fn unknown_bytes_are_undecodable() {
        assert!(matches!(
            decode_source(b"hello world", "x"),
            Err(Error::UndecodableSource { .. })
        ));
    }

    #[test]
    fn zero_frame_container_is_rejected() {
        let clip = ClipTensor::zeros(0, 2, 2, 3);
        let bytes = encode_clip_bytes(&clip);
        assert!(matches!(
            decode_source(&bytes, "z"),
            Err(Error::ZeroFrameSource(_))
        ));
    }
}
