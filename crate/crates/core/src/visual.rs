//! Visual front-end: lip-region cropping, resizing to 36x36 and the residual
//! CNN that embeds every frame independently.

use crate::autograd::{Graph, Padding, Var};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, LayerNorm, Linear};
use crate::params::ParamStore;
use crate::rng::Rng;
use crate::tensor::{Real, Tensor};

/// Side length of the CNN input images.
pub const LIP_SIZE: usize = 36;

/// RGB frames `[M, H, W, 3]` with pixel values in `[0, 255]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoFrameSequence {
    frames: Tensor<f32>,
    fps: f64,
}

impl VideoFrameSequence {
    pub fn new(frames: Tensor<f32>, fps: f64) -> Result<Self> {
        let s = frames.shape();
        if s.len() != 4 || s[3] != 3 {
            return Err(Error::shape("video frames", s, &[0, 0, 0, 3]));
        }
        if !(fps > 0.0) {
            return Err(Error::Input(format!("frame rate {fps} must be positive")));
        }
        if frames.data().iter().any(|v| !(0.0..=255.0).contains(v)) {
            return Err(Error::Input("pixel values must lie in [0, 255]".into()));
        }
        Ok(VideoFrameSequence { frames, fps })
    }

    pub fn frames(&self) -> &Tensor<f32> {
        &self.frames
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frame `i` as an `[H, W, 3]` image.
    pub fn frame(&self, i: usize) -> Tensor<f32> {
        let s = self.frames.shape();
        let n = s[1] * s[2] * 3;
        Tensor::new(vec![s[1], s[2], 3], self.frames.data()[i * n..(i + 1) * n].to_vec())
            .expect("frame slice")
    }

    /// Crops every frame to its lip region and resizes to 36x36.
    pub fn lip_frames(&self) -> Result<Tensor<f32>> {
        let mut data = Vec::with_capacity(self.len() * LIP_SIZE * LIP_SIZE * 3);
        for i in 0..self.len() {
            let lips = downsample_to_36(&crop_lip_region(&self.frame(i))?)?;
            data.extend_from_slice(lips.data());
        }
        Tensor::new(vec![self.len(), LIP_SIZE, LIP_SIZE, 3], data)
    }
}

fn image_dims<T: Real>(image: &Tensor<T>) -> Result<(usize, usize)> {
    let s = image.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::shape("image", s, &[0, 0, 3]));
    }
    Ok((s[0], s[1]))
}

/// Bottom 40% of the rows and middle 80% of the columns of a face-aligned
/// frame: rows `[ceil(0.6 H), H)`, columns `[round(0.1 W), round(0.9 W))`.
pub fn crop_lip_region<T: Real>(frame: &Tensor<T>) -> Result<Tensor<T>> {
    let (h, w) = image_dims(frame)?;
    if h < 5 || w < 5 {
        return Err(Error::Input(format!(
            "{h}x{w} frame is too small to crop; need at least 5x5"
        )));
    }
    let top = (6 * h).div_ceil(10);
    let (left, right) = ((w + 5) / 10, (9 * w + 5) / 10);
    let (ch, cw) = (h - top, right - left);
    let mut out = Vec::with_capacity(ch * cw * 3);
    for y in top..h {
        let row = (y * w + left) * 3;
        out.extend_from_slice(&frame.data()[row..row + cw * 3]);
    }
    Tensor::new(vec![ch, cw, 3], out)
}

/// Bilinear resize (half-pixel centres, edge clamped) to 36x36.
pub fn downsample_to_36<T: Real>(image: &Tensor<T>) -> Result<Tensor<T>> {
    resize_bilinear(image, LIP_SIZE, LIP_SIZE)
}

pub fn resize_bilinear<T: Real>(image: &Tensor<T>, out_h: usize, out_w: usize) -> Result<Tensor<T>> {
    let (h, w) = image_dims(image)?;
    if h == 0 || w == 0 {
        return Err(Error::Input("cannot resize an empty image".into()));
    }
    let src = |n: usize, out: usize, i: usize| -> (usize, usize, f64) {
        let pos = ((i as f64 + 0.5) * n as f64 / out as f64 - 0.5).clamp(0.0, (n - 1) as f64);
        let lo = pos.floor() as usize;
        (lo, (lo + 1).min(n - 1), pos - lo as f64)
    };
    let px = |y: usize, x: usize, c: usize| image.data()[(y * w + x) * 3 + c].to_f64().unwrap_or(0.0);
    let mut out = Vec::with_capacity(out_h * out_w * 3);
    for oy in 0..out_h {
        let (y0, y1, fy) = src(h, out_h, oy);
        for ox in 0..out_w {
            let (x0, x1, fx) = src(w, out_w, ox);
            for c in 0..3 {
                let top = px(y0, x0, c) * (1.0 - fx) + px(y0, x1, c) * fx;
                let bottom = px(y1, x0, c) * (1.0 - fx) + px(y1, x1, c) * fx;
                out.push(T::lit(top * (1.0 - fy) + bottom * fy));
            }
        }
    }
    Tensor::new(vec![out_h, out_w, 3], out)
}

/// Full pre-activation residual unit: `norm → relu → conv` twice, plus a
/// shortcut that is the identity or a strided 1x1 convolution of the
/// pre-activated input when the shape changes.
#[derive(Clone, Debug)]
pub struct ResBlock {
    norm1: LayerNorm,
    conv1: Conv2d,
    norm2: LayerNorm,
    conv2: Conv2d,
    shortcut: Option<Conv2d>,
}

impl ResBlock {
    fn new<T: Real>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        eps: f64,
        rng: &mut Rng,
    ) -> Self {
        let needs_projection = c_in != c_out || stride != 1;
        ResBlock {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), c_in, eps),
            conv1: Conv2d::new(store, &format!("{name}.conv1"), c_in, c_out, 3, stride, Padding::Same, true, rng),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), c_out, eps),
            conv2: Conv2d::new(store, &format!("{name}.conv2"), c_out, c_out, 3, 1, Padding::Same, true, rng),
            shortcut: needs_projection.then(|| {
                Conv2d::new(store, &format!("{name}.shortcut"), c_in, c_out, 1, stride, Padding::Same, false, rng)
            }),
        }
    }

    fn forward<T: Real>(&self, g: &mut Graph<'_, T>, x: Var) -> Result<Var> {
        let pre = self.norm1.forward(g, x)?;
        let pre = g.relu(pre);
        let h = self.conv1.forward(g, pre)?;
        let h = self.norm2.forward(g, h)?;
        let h = g.relu(h);
        let h = self.conv2.forward(g, h)?;
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(g, pre)?,
            None => x,
        };
        g.add(h, skip)
    }
}

/// Residual CNN mapping `[M, 36, 36, 3]` pixel frames to `[M, d_model]`.
///
/// Stages: rescale to `[-1, 1]`, 3x3 stem conv, residual blocks at 36, 18,
/// 9 and 5 pixels, a 5x5 valid conv to `1x1x cnn_out`, then a linear
/// projection to `d_model`.
#[derive(Clone, Debug)]
pub struct VisualCnn {
    stem: Conv2d,
    blocks: Vec<ResBlock>,
    head_norm: LayerNorm,
    head: Conv2d,
    proj: Linear,
}

impl VisualCnn {
    pub fn new<T: Real>(store: &mut ParamStore<T>, name: &str, config: &ModelConfig, rng: &mut Rng) -> Self {
        let [w0, w1, w2, w3] = config.cnn_widths;
        let eps = config.layer_norm_eps;
        let stem = Conv2d::new(store, &format!("{name}.stem"), 3, w0, 3, 1, Padding::Same, true, rng);
        let plan = [(w0, w0, 1), (w0, w1, 2), (w1, w2, 2), (w2, w3, 2)];
        let blocks = plan
            .iter()
            .enumerate()
            .map(|(i, &(c_in, c_out, s))| ResBlock::new(store, &format!("{name}.block{i}"), c_in, c_out, s, eps, rng))
            .collect();
        VisualCnn {
            stem,
            blocks,
            head_norm: LayerNorm::new(store, &format!("{name}.head_norm"), w3, eps),
            head: Conv2d::new(store, &format!("{name}.head"), w3, config.cnn_out, 5, 1, Padding::Valid, true, rng),
            proj: Linear::new(store, &format!("{name}.proj"), config.cnn_out, config.d_model, rng),
        }
    }

    /// Embeds each frame; also returns the shape after every stage.
    pub fn forward_traced<T: Real>(&self, g: &mut Graph<'_, T>, pixels: Var) -> Result<(Var, Vec<Vec<usize>>)> {
        let s = g.shape(pixels).to_vec();
        if s.len() != 4 || s[1] != LIP_SIZE || s[2] != LIP_SIZE || s[3] != 3 {
            return Err(Error::shape("cnn_embed", &s, &[s.first().copied().unwrap_or(0), LIP_SIZE, LIP_SIZE, 3]));
        }
        let frames = s[0];
        let mut trace = Vec::new();
        let x = g.scale(pixels, T::lit(1.0 / 127.5));
        let minus_one = g.input(Tensor::full(vec![3], T::lit(-1.0)));
        let x = g.add_row(x, minus_one)?;
        let mut h = self.stem.forward(g, x)?;
        for block in &self.blocks {
            h = block.forward(g, h)?;
            trace.push(g.shape(h)[1..].to_vec());
        }
        let h = self.head_norm.forward(g, h)?;
        let h = g.relu(h);
        let h = self.head.forward(g, h)?;
        trace.push(g.shape(h)[1..].to_vec());
        let width = g.shape(h)[3];
        let h = g.reshape(h, &[frames, width])?;
        let out = self.proj.forward(g, h)?;
        trace.push(g.shape(out)[1..].to_vec());
        Ok((out, trace))
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<'_, T>, pixels: Var) -> Result<Var> {
        self.forward_traced(g, pixels).map(|(v, _)| v)
    }
}

/// Per-frame CNN embeddings `v_j`, one row of width `d_model` per frame.
pub fn cnn_embed<T: Real>(cnn: &VisualCnn, store: &ParamStore<T>, pixels: &Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::eval(store);
    let x = g.input(pixels.clone());
    let y = cnn.forward(&mut g, x)?;
    Ok(g.value(y).clone())
}
