//! Image and state preprocessing for both offline training and the
//! streaming benchmark path. All stages are pure and deterministic; the
//! streaming mean is the only stateful piece and is owned by its caller.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use std::path::Path;

/// 8-bit RGB image, row-major interleaved.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Image {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(w: usize, h: usize) -> Self {
        Image {
            w,
            h,
            data: vec![0; w * h * 3],
        }
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        image::save_buffer(
            path,
            &self.data,
            self.w as u32,
            self.h as u32,
            image::ColorType::Rgb8,
        )
        .map_err(|e| Error::Other(format!("{}: {e}", path.display())))
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)
            .map_err(|e| Error::Other(format!("{}: {e}", path.display())))?
            .to_rgb8();
        Ok(Image {
            w: img.width() as usize,
            h: img.height() as usize,
            data: img.into_raw(),
        })
    }
}

/// Planar CHW float image, channel values in [0, 1] until normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct RgbF {
    pub w: usize,
    pub h: usize,
    pub data: Vec<f64>, // 3 * h * w
}

/// Single-channel float image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayF {
    pub w: usize,
    pub h: usize,
    pub data: Vec<f64>,
}

impl GrayF {
    pub fn zeros(w: usize, h: usize) -> Self {
        GrayF {
            w,
            h,
            data: vec![0.0; w * h],
        }
    }
}

/// Per-channel normalization constants (RGB order).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ImageNormSpec {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ImageNormSpec {
    /// The pretraining-corpus convention constants.
    pub fn imagenet() -> Self {
        ImageNormSpec {
            mean: [0.485, 0.456, 0.406],
            std: [0.229, 0.224, 0.225],
        }
    }
}

/// Crop/downscale geometry; paper scale is the default everywhere formats
/// are asserted, the desk preset shrinks proportionally.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PipeSpec {
    pub crop: usize,
    pub out_size: usize,
}

impl PipeSpec {
    pub fn paper() -> Self {
        PipeSpec {
            crop: 300,
            out_size: 224,
        }
    }

    pub fn desk() -> Self {
        PipeSpec {
            crop: 100,
            out_size: 64,
        }
    }

    pub fn crop_offset(&self, w: usize, h: usize) -> (usize, usize) {
        ((w - self.crop) / 2, (h - self.crop) / 2)
    }
}

/// Centered square crop followed by bilinear downscale to `out_size`.
pub fn center_crop_resize(img: &Image, spec: &PipeSpec) -> Result<RgbF> {
    if img.w < spec.crop || img.h < spec.crop {
        return Err(Error::Shape(format!(
            "input {}x{} smaller than crop {}",
            img.w, img.h, spec.crop
        )));
    }
    let (ox, oy) = spec.crop_offset(img.w, img.h);
    let c = spec.crop;
    let out = spec.out_size;
    let scale = c as f64 / out as f64;
    let mut data = vec![0.0; 3 * out * out];
    for oyy in 0..out {
        let sy = ((oyy as f64 + 0.5) * scale - 0.5).clamp(0.0, (c - 1) as f64);
        let y0 = sy.floor() as usize;
        let y1 = (y0 + 1).min(c - 1);
        let fy = sy - y0 as f64;
        for oxx in 0..out {
            let sx = ((oxx as f64 + 0.5) * scale - 0.5).clamp(0.0, (c - 1) as f64);
            let x0 = sx.floor() as usize;
            let x1 = (x0 + 1).min(c - 1);
            let fx = sx - x0 as f64;
            for ch in 0..3 {
                let px = |yy: usize, xx: usize| -> f64 {
                    img.data[((oy + yy) * img.w + ox + xx) * 3 + ch] as f64 / 255.0
                };
                let top = px(y0, x0) * (1.0 - fx) + px(y0, x1) * fx;
                let bot = px(y1, x0) * (1.0 - fx) + px(y1, x1) * fx;
                data[(ch * out + oyy) * out + oxx] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    Ok(RgbF {
        w: out,
        h: out,
        data,
    })
}

/// Per-channel (x − mean) / std into a [3, h, w] tensor.
pub fn normalize_image(img: &RgbF, spec: &ImageNormSpec) -> Tensor {
    let hw = img.h * img.w;
    let mut data = vec![0.0; 3 * hw];
    for ch in 0..3 {
        for p in 0..hw {
            data[ch * hw + p] = (img.data[ch * hw + p] - spec.mean[ch]) / spec.std[ch];
        }
    }
    Tensor::new(vec![3, img.h, img.w], data).expect("shape consistent")
}

pub fn denormalize_image(t: &Tensor, spec: &ImageNormSpec) -> RgbF {
    let (h, w) = (t.shape[1], t.shape[2]);
    let hw = h * w;
    let mut data = vec![0.0; 3 * hw];
    for ch in 0..3 {
        for p in 0..hw {
            data[ch * hw + p] = t.data[ch * hw + p] * spec.std[ch] + spec.mean[ch];
        }
    }
    RgbF { w, h, data }
}

/// Fixed luminance weights (0.299, 0.587, 0.114).
pub fn grayscale(img: &RgbF) -> GrayF {
    let hw = img.h * img.w;
    let mut data = vec![0.0; hw];
    for p in 0..hw {
        data[p] = 0.299 * img.data[p] + 0.587 * img.data[hw + p] + 0.114 * img.data[2 * hw + p];
    }
    GrayF {
        w: img.w,
        h: img.h,
        data,
    }
}

/// Space-time stack geometry and mean-image source.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SpaceTimeSpec {
    pub spacing: usize,
    pub depth: usize,
}

impl SpaceTimeSpec {
    pub fn new(spacing: usize, depth: usize) -> Result<Self> {
        if spacing < 1 || depth < 2 {
            return Err(Error::Config(format!(
                "space-time spec requires spacing >= 1 and depth >= 2, got {spacing}/{depth}"
            )));
        }
        Ok(SpaceTimeSpec { spacing, depth })
    }

    /// History length required before tick 0 of the stack.
    pub fn required_history(&self) -> usize {
        self.spacing * (self.depth - 1)
    }
}

impl Default for SpaceTimeSpec {
    fn default() -> Self {
        SpaceTimeSpec {
            spacing: 10,
            depth: 3,
        }
    }
}

/// Mean-subtracted grayscale frames at ticks {t, t−spacing, …}, newest
/// first, stacked as channels into a [depth, h, w] tensor.
pub fn spacetime_stack(
    frames: &[GrayF],
    t: usize,
    spec: &SpaceTimeSpec,
    mean: &GrayF,
) -> Result<Tensor> {
    if t >= frames.len() {
        return Err(Error::Usage(format!(
            "tick {t} outside clip of length {}",
            frames.len()
        )));
    }
    if t < spec.required_history() {
        return Err(Error::Usage(format!(
            "tick {t} has insufficient history; need {}",
            spec.required_history()
        )));
    }
    let (h, w) = (frames[t].h, frames[t].w);
    let hw = h * w;
    let mut data = vec![0.0; spec.depth * hw];
    for d in 0..spec.depth {
        let src = &frames[t - d * spec.spacing];
        for p in 0..hw {
            data[d * hw + p] = src.data[p] - mean.data[p];
        }
    }
    Ok(Tensor::new(vec![spec.depth, h, w], data).expect("shape consistent"))
}

/// Mean image of a whole clip (offline source).
pub fn clip_mean(frames: &[GrayF]) -> Result<GrayF> {
    let first = frames
        .first()
        .ok_or_else(|| Error::Usage("empty clip".into()))?;
    let mut mean = GrayF::zeros(first.w, first.h);
    for f in frames {
        for (m, v) in mean.data.iter_mut().zip(&f.data) {
            *m += v;
        }
    }
    let n = frames.len() as f64;
    mean.data.iter_mut().for_each(|v| *v /= n);
    Ok(mean)
}

/// Online exponential-smoothing mean image.
#[derive(Debug, Clone)]
pub struct StreamingMean {
    pub alpha: f64,
    pub mean: GrayF,
}

impl StreamingMean {
    pub fn new(alpha: f64, w: usize, h: usize) -> Result<Self> {
        if alpha <= 0.0 || alpha > 1.0 {
            return Err(Error::Config(format!(
                "smoothing factor must be in (0, 1], got {alpha}"
            )));
        }
        Ok(StreamingMean {
            alpha,
            mean: GrayF::zeros(w, h),
        })
    }

    pub fn update(&mut self, frame: &GrayF) {
        for (m, v) in self.mean.data.iter_mut().zip(&frame.data) {
            *m = (1.0 - self.alpha) * *m + self.alpha * v;
        }
    }
}
