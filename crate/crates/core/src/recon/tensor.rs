//! Minimal CHW feature maps and zero-padded 2-D convolutions.
//!
//! Every output cell accumulates `bias + sum(w * x)` over (input channel,
//! kernel row, kernel column) in the same fixed order, skipping taps that
//! fall outside the map. A cell therefore gets bit-identical values whether
//! it is computed inside a crop or inside a larger map, provided all of its
//! taps are in bounds in both.

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    channels: usize,
    height: usize,
    width: usize,
    data: Vec<f32>,
}

impl FeatureMap {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
            data: vec![0.0; channels * height * width],
        }
    }

    pub fn from_vec(channels: usize, height: usize, width: usize, data: Vec<f32>) -> Self {
        assert_eq!(data.len(), channels * height * width, "feature map size");
        Self {
            channels,
            height,
            width,
            data,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.height + y) * self.width + x]
    }

    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.height + y) * self.width + x] = v;
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.height * self.width;
        &self.data[c * n..(c + 1) * n]
    }

    pub fn plane_mut(&mut self, c: usize) -> &mut [f32] {
        let n = self.height * self.width;
        &mut self.data[c * n..(c + 1) * n]
    }

    /// Channel-wise concatenation of maps with equal spatial size.
    pub fn concat(parts: &[&FeatureMap]) -> FeatureMap {
        let (h, w) = (parts[0].height, parts[0].width);
        let mut data = Vec::with_capacity(parts.iter().map(|p| p.data.len()).sum());
        for p in parts {
            assert_eq!((p.height, p.width), (h, w), "concat spatial mismatch");
            data.extend_from_slice(&p.data);
        }
        let channels = parts.iter().map(|p| p.channels).sum();
        FeatureMap::from_vec(channels, h, w, data)
    }

    /// Channels `[from, to)`.
    pub fn split_channels(&self, from: usize, to: usize) -> FeatureMap {
        let n = self.height * self.width;
        FeatureMap::from_vec(to - from, self.height, self.width, self.data[from * n..to * n].to_vec())
    }

    /// Spatial window `[x0, x0+w) x [y0, y0+h)` over all channels.
    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> FeatureMap {
        let mut out = FeatureMap::zeros(self.channels, h, w);
        for c in 0..self.channels {
            for y in 0..h {
                let src = (c * self.height + y0 + y) * self.width + x0;
                let dst = (c * h + y) * w;
                out.data[dst..dst + w].copy_from_slice(&self.data[src..src + w]);
            }
        }
        out
    }

    /// Writes `patch` into this map with its origin at `(x0, y0)`.
    pub fn paste(&mut self, patch: &FeatureMap, x0: usize, y0: usize) {
        assert_eq!(patch.channels, self.channels, "paste channel mismatch");
        for c in 0..self.channels {
            for y in 0..patch.height {
                let dst = (c * self.height + y0 + y) * self.width + x0;
                let src = (c * patch.height + y) * patch.width;
                self.data[dst..dst + patch.width].copy_from_slice(&patch.data[src..src + patch.width]);
            }
        }
    }

    /// Nearest-neighbour x2 upsampling.
    pub fn upsample2(&self) -> FeatureMap {
        let (h2, w2) = (self.height * 2, self.width * 2);
        let mut out = FeatureMap::zeros(self.channels, h2, w2);
        for c in 0..self.channels {
            for y in 0..h2 {
                for x in 0..w2 {
                    out.data[(c * h2 + y) * w2 + x] = self.get(c, y / 2, x / 2);
                }
            }
        }
        out
    }

    pub fn map_inplace(&mut self, f: impl Fn(f32) -> f32) {
        self.data.iter_mut().for_each(|v| *v = f(*v));
    }

    pub fn add_assign(&mut self, other: &FeatureMap) {
        assert_eq!(self.data.len(), other.data.len(), "add shape mismatch");
        self.data.iter_mut().zip(&other.data).for_each(|(a, b)| *a += b);
    }
}

pub fn sigmoid(v: f32) -> f32 {
    1.0 / (1.0 + (-v).exp())
}

pub fn relu(v: f32) -> f32 {
    v.max(0.0)
}

/// Square-kernel convolution with `(kernel - 1) / 2` zero padding.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    /// `[out][in][ky][kx]`
    pub weight: Vec<f32>,
    pub bias: Vec<f32>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel,
            stride,
            weight: vec![0.0; out_channels * in_channels * kernel * kernel],
            bias: vec![0.0; out_channels],
        }
    }

    pub fn weight_at(&self, o: usize, i: usize, ky: usize, kx: usize) -> f32 {
        self.weight[((o * self.in_channels + i) * self.kernel + ky) * self.kernel + kx]
    }

    pub fn output_size(&self, h: usize, w: usize) -> (usize, usize) {
        let pad = self.kernel / 2;
        (
            (h + 2 * pad - self.kernel) / self.stride + 1,
            (w + 2 * pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, input: &FeatureMap) -> FeatureMap {
        assert_eq!(input.channels, self.in_channels, "conv input channels");
        let (h, w) = (input.height as isize, input.width as isize);
        let (oh, ow) = self.output_size(input.height, input.width);
        let pad = (self.kernel / 2) as isize;
        let s = self.stride as isize;
        let mut out = FeatureMap::zeros(self.out_channels, oh, ow);
        for o in 0..self.out_channels {
            let plane = out.plane_mut(o);
            plane.fill(self.bias[o]);
            for i in 0..self.in_channels {
                let src = input.plane(i);
                for ky in 0..self.kernel {
                    for kx in 0..self.kernel {
                        let wv = self.weight_at(o, i, ky, kx);
                        for oy in 0..oh as isize {
                            let iy = oy * s + ky as isize - pad;
                            if iy < 0 || iy >= h {
                                continue;
                            }
                            let row = &src[(iy * w) as usize..((iy + 1) * w) as usize];
                            let dst = &mut plane[(oy as usize) * ow..(oy as usize + 1) * ow];
                            for (ox, d) in dst.iter_mut().enumerate() {
                                let ix = ox as isize * s + kx as isize - pad;
                                if ix >= 0 && ix < w {
                                    *d += wv * row[ix as usize];
                                }
                            }
                        }
                    }
                }
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(conv: &Conv2d, x: &FeatureMap) -> FeatureMap {
        let (oh, ow) = conv.output_size(x.height(), x.width());
        let pad = (conv.kernel / 2) as isize;
        let mut out = FeatureMap::zeros(conv.out_channels, oh, ow);
        for o in 0..conv.out_channels {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = conv.bias[o] as f64;
                    for i in 0..conv.in_channels {
                        for ky in 0..conv.kernel {
                            for kx in 0..conv.kernel {
                                let iy = (oy * conv.stride) as isize + ky as isize - pad;
                                let ix = (ox * conv.stride) as isize + kx as isize - pad;
                                if iy >= 0 && ix >= 0 && (iy as usize) < x.height() && (ix as usize) < x.width() {
                                    acc += conv.weight_at(o, i, ky, kx) as f64
                                        * x.get(i, iy as usize, ix as usize) as f64;
                                }
                            }
                        }
                    }
                    out.set(o, oy, ox, acc as f32);
                }
            }
        }
        out
    }

    fn ramp(n: usize, scale: f32) -> Vec<f32> {
        (0..n).map(|i| ((i * 37 % 101) as f32 / 101.0 - 0.5) * scale).collect()
    }

    #[test]
    fn conv_matches_naive_loop() {
        for stride in [1, 2] {
            let mut conv = Conv2d::zeros(3, 4, 3, stride);
            conv.weight = ramp(conv.weight.len(), 1.0);
            conv.bias = ramp(4, 0.3);
            let x = FeatureMap::from_vec(3, 6, 8, ramp(3 * 48, 2.0));
            let fast = conv.forward(&x);
            let slow = naive(&conv, &x);
            assert_eq!((fast.height(), fast.width()), (6 / stride, 8 / stride));
            for (a, b) in fast.data().iter().zip(slow.data()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn crop_paste_round_trip() {
        let m = FeatureMap::from_vec(2, 4, 4, ramp(32, 1.0));
        let c = m.crop(1, 2, 3, 2);
        assert_eq!(c.get(1, 0, 0), m.get(1, 2, 1));
        let mut z = FeatureMap::zeros(2, 4, 4);
        z.paste(&c, 1, 2);
        assert_eq!(z.get(0, 3, 3), m.get(0, 3, 3));
        assert_eq!(z.get(0, 0, 0), 0.0);
    }

    #[test]
    fn upsample_repeats_cells() {
        let m = FeatureMap::from_vec(1, 1, 2, vec![1.0, 2.0]);
        assert_eq!(m.upsample2().data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }
}
