use image::imageops::{self, FilterType};
use image::{ImageBuffer, Rgb};
use ndarray::{Array3, Array4, Axis};

use super::codec::{decode_source, DecodedVideo};
use super::{ClipTensor, CLIP_FPS, CLIP_FRAMES, CLIP_SIZE};
use crate::error::{Error, Result};

/// Target format of [`transcode_clip`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DecodeSpec {
    pub fps: f64,
    pub frames: usize,
    pub size: usize,
}

impl Default for DecodeSpec {
    fn default() -> Self {
        Self {
            fps: CLIP_FPS,
            frames: CLIP_FRAMES,
            size: CLIP_SIZE,
        }
    }
}

/// Decodes `source` and normalizes it to `spec`.
pub fn transcode_clip(source: &[u8], name: &str, spec: DecodeSpec) -> Result<ClipTensor> {
    let video = decode_source(source, name)?;
    transcode_decoded(&video, name, spec)
}

/// Source frame index feeding each output frame.
///
/// Frames are resampled at stride `src_fps / spec.fps`; the resampled run is
/// truncated to `spec.frames` or loop-padded from its first frame.
pub(crate) fn temporal_indices(n_src: usize, src_fps: f64, spec: DecodeSpec) -> Vec<usize> {
    let step = src_fps / spec.fps;
    let resampled = (((n_src - 1) as f64 / step) + 1e-9).floor() as usize + 1;
    (0..spec.frames)
        .map(|k| {
            let j = k % resampled;
            ((j as f64 * step + 1e-9).floor() as usize).min(n_src - 1)
        })
        .collect()
}

fn to_rgb(frame: &Array3<f32>, name: &str) -> Result<Array3<f32>> {
    let (h, w, c) = frame.dim();
    match c {
        3 => Ok(frame.clone()),
        1 => Ok(Array3::from_shape_fn((h, w, 3), |(y, x, _)| {
            frame[[y, x, 0]]
        })),
        4 => Ok(frame.slice(ndarray::s![.., .., 0..3]).to_owned()),
        _ => Err(Error::UndecodableSource {
            path: name.to_string(),
            reason: format!("{c} channels"),
        }),
    }
}

/// Bilinear-family resize of one RGB frame; identity when already at size.
fn resize(frame: Array3<f32>, size: usize) -> Array3<f32> {
    let (h, w, _) = frame.dim();
    if h == size && w == size {
        return frame;
    }
    let data: Vec<f32> = frame.iter().copied().collect();
    let img: ImageBuffer<Rgb<f32>, Vec<f32>> =
        ImageBuffer::from_raw(w as u32, h as u32, data).expect("frame buffer size");
    let out = imageops::resize(&img, size as u32, size as u32, FilterType::Triangle);
    Array3::from_shape_vec((size, size, 3), out.into_raw()).expect("resized buffer size")
}

pub fn transcode_decoded(video: &DecodedVideo, name: &str, spec: DecodeSpec) -> Result<ClipTensor> {
    if video.frames.is_empty() {
        return Err(Error::ZeroFrameSource(name.to_string()));
    }
    if !(video.fps.is_finite() && video.fps > 0.0) {
        return Err(Error::UndecodableSource {
            path: name.to_string(),
            reason: format!("frame rate {}", video.fps),
        });
    }
    let indices = temporal_indices(video.frames.len(), video.fps, spec);
    let mut out = Array4::<f32>::zeros((spec.frames, spec.size, spec.size, 3));
    let mut cache: Vec<Option<Array3<f32>>> = vec![None; video.frames.len()];
    for (k, &src) in indices.iter().enumerate() {
        if cache[src].is_none() {
            let rgb = to_rgb(&video.frames[src], name)?;
            let mut resized = resize(rgb, spec.size);
            resized.mapv_inplace(|v| v.clamp(0.0, 1.0));
            cache[src] = Some(resized);
        }
        out.index_axis_mut(Axis(0), k)
            .assign(cache[src].as_ref().unwrap());
    }
    Ok(ClipTensor {
        frames: out,
        fps: spec.fps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::encode_clip_bytes;

    fn source(frames: usize, fps: f64, size: usize) -> ClipTensor {
        ClipTensor::new(
            Array4::from_shape_fn((frames, size, size, 3), |(t, y, x, c)| {
                ((t * 7 + y * 3 + x + c) % 251) as f32 / 250.0
            }),
            fps,
        )
    }

    #[test]
    fn long_source_is_strided_and_truncated() {
        // 20 s at 30 FPS
        let idx = temporal_indices(600, 30.0, DecodeSpec::default());
        assert_eq!(idx.len(), 100);
        assert_eq!(idx, (0..100).map(|k| 3 * k).collect::<Vec<_>>());
        let clip = transcode_clip(
            &encode_clip_bytes(&source(600, 30.0, 32)),
            "s",
            DecodeSpec::default(),
        )
        .unwrap();
        assert_eq!(clip.dims(), (100, 64, 64, 3));
    }

    #[test]
    fn native_format_passes_through() {
        let src = source(100, 10.0, 64);
        let bytes = encode_clip_bytes(&src);
        let clip = transcode_clip(&bytes, "s", DecodeSpec::default()).unwrap();
        assert_eq!(clip.dims(), (100, 64, 64, 3));
        let max_err = src
            .frames
            .iter()
            .zip(clip.frames.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f32, f32::max);
        assert!(max_err <= 0.5 / 255.0 + 1e-6);
        assert!(clip.in_unit_range());
    }

    #[test]
    fn short_source_loop_pads_from_start() {
        // 4 s at 10 FPS
        let src = source(40, 10.0, 64);
        let clip = transcode_clip(&encode_clip_bytes(&src), "s", DecodeSpec::default()).unwrap();
        let decoded = decode_source(&encode_clip_bytes(&src), "s").unwrap();
        for k in 0..100 {
            let expected = &decoded.frames[k % 40];
            assert_eq!(&clip.frames.index_axis(Axis(0), k), expected, "frame {k}");
        }
        assert_eq!(
            clip.frames.index_axis(Axis(0), 40),
            clip.frames.index_axis(Axis(0), 0)
        );
    }

    #[test]
    fn transcoding_is_deterministic() {
        let bytes = encode_clip_bytes(&source(57, 24.0, 48));
        let a = transcode_clip(&bytes, "s", DecodeSpec::default()).unwrap();
        let b = transcode_clip(&bytes, "s", DecodeSpec::default()).unwrap();
        assert_eq!(a, b);
        assert!(a.in_unit_range());
    }

    #[test]
    fn zero_frames_rejected() {
        let video = DecodedVideo {
            frames: vec![],
            fps: 10.0,
        };
        assert!(matches!(
            transcode_decoded(&video, "z", DecodeSpec::default()),
            Err(Error::ZeroFrameSource(_))
        ));
    }
}
