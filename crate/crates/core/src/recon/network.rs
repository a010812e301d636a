//! Toy recurrent U-Net.
//!
//! Encoder: per level a 3x3 stride-2 conv (ReLU) followed by a 3x3 ConvLSTM,
//! with `C0 * 2^(level-1)` channels. Bottleneck: global feature fusion
//! (1x1 conv over the bottleneck concatenated with the broadcast global
//! vector). Decoder: per level a nearest x2 upsample and 3x3 conv (ReLU),
//! with additive skips from the encoder. Head: 1x1 conv and a sigmoid.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tensor::{relu, sigmoid, Conv2d, FeatureMap};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Architecture {
    pub levels: usize,
    pub base_channels: usize,
    pub global_dim: usize,
    pub bins: usize,
}

impl Architecture {
    /// Channels of encoder level `level` (1-based).
    pub fn channels(&self, level: usize) -> usize {
        self.base_channels << (level - 1)
    }

    pub fn input_channels(&self) -> usize {
        self.bins + 1
    }

    pub fn bottleneck_channels(&self) -> usize {
        self.channels(self.levels)
    }

    fn decoder_out(&self, level: usize) -> usize {
        if level == 1 {
            self.base_channels
        } else {
            self.channels(level - 1)
        }
    }

    /// `(name, shape)` of every tensor, in weight-file order.
    pub fn tensor_manifest(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        let mut conv = |name: String, o: usize, i: usize, k: usize| {
            out.push((format!("{name}.weight"), vec![o, i, k, k]));
            out.push((format!("{name}.bias"), vec![o]));
        };
        let mut prev = self.input_channels();
        for l in 1..=self.levels {
            let c = self.channels(l);
            conv(format!("enc{l}.conv"), c, prev, 3);
            conv(format!("enc{l}.lstm"), 4 * c, 2 * c, 3);
            prev = c;
        }
        let f = self.bottleneck_channels() + self.global_dim;
        conv("fusion".into(), f, f, 1);
        for l in (1..=self.levels).rev() {
            conv(format!("dec{l}.conv"), self.decoder_out(l), self.channels(l), 3);
        }
        conv("head".into(), 1, self.base_channels, 1);
        out
    }
}

/// Hidden and cell state of one ConvLSTM level.
#[derive(Debug, Clone, PartialEq)]
pub struct LstmState {
    pub h: FeatureMap,
    pub c: FeatureMap,
}

impl LstmState {
    pub fn zeros(channels: usize, height: usize, width: usize) -> Self {
        Self {
            h: FeatureMap::zeros(channels, height, width),
            c: FeatureMap::zeros(channels, height, width),
        }
    }

    pub fn crop(&self, x0: usize, y0: usize, w: usize, h: usize) -> Self {
        Self {
            h: self.h.crop(x0, y0, w, h),
            c: self.c.crop(x0, y0, w, h),
        }
    }

    pub fn paste(&mut self, local: &LstmState, x0: usize, y0: usize) {
        self.h.paste(&local.h, x0, y0);
        self.c.paste(&local.c, x0, y0);
    }
}

/// What the bottleneck fusion saw and produced in one step.
#[derive(Debug, Clone, PartialEq)]
pub struct FuseTrace {
    pub bottleneck: FeatureMap,
    pub f_g_prev: Vec<f64>,
    pub delta: Vec<f64>,
}

/// Broadcasts `f_g_prev` over the bottleneck, applies the 1x1 fusion conv and
/// returns the first `C` channels plus the spatial mean of the last `K`.
/// The mean is evaluated in f64 directly from the global vector, since the
/// 1x1 conv commutes with spatial averaging.
pub fn global_fuse(bottleneck: &FeatureMap, f_g_prev: &[f64], fusion: &Conv2d) -> (FeatureMap, Vec<f64>) {
    let (c, h, w) = (bottleneck.channels(), bottleneck.height(), bottleneck.width());
    let k = f_g_prev.len();
    let mut broadcast = FeatureMap::zeros(k, h, w);
    for (i, &v) in f_g_prev.iter().enumerate() {
        broadcast.plane_mut(i).fill(v as f32);
    }
    let fused = fusion.forward(&FeatureMap::concat(&[bottleneck, &broadcast]));
    let n = (h * w) as f64;
    let means: Vec<f64> = (0..c)
        .map(|i| bottleneck.plane(i).iter().map(|&v| v as f64).sum::<f64>() / n)
        .collect();
    let delta = (c..c + k)
        .map(|o| {
            let mut d = fusion.bias[o] as f64;
            for (i, m) in means.iter().enumerate() {
                d += fusion.weight_at(o, i, 0, 0) as f64 * m;
            }
            for (j, g) in f_g_prev.iter().enumerate() {
                d += fusion.weight_at(o, c + j, 0, 0) as f64 * g;
            }
            d
        })
        .collect();
    (fused.split_channels(0, c), delta)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLstmNet {
    pub arch: Architecture,
    pub encoders: Vec<Conv2d>,
    pub lstms: Vec<Conv2d>,
    pub fusion: Conv2d,
    /// Indexed by level - 1.
    pub decoders: Vec<Conv2d>,
    pub head: Conv2d,
}

impl ConvLstmNet {
    pub fn zeros(arch: Architecture) -> Self {
        let mut encoders = Vec::new();
        let mut lstms = Vec::new();
        let mut prev = arch.input_channels();
        for l in 1..=arch.levels {
            let c = arch.channels(l);
            encoders.push(Conv2d::zeros(prev, c, 3, 2));
            lstms.push(Conv2d::zeros(2 * c, 4 * c, 3, 1));
            prev = c;
        }
        let f = arch.bottleneck_channels() + arch.global_dim;
        let decoders = (1..=arch.levels)
            .map(|l| Conv2d::zeros(arch.channels(l), arch.decoder_out(l), 3, 1))
            .collect();
        Self {
            arch,
            encoders,
            lstms,
            fusion: Conv2d::zeros(f, f, 1, 1),
            decoders,
            head: Conv2d::zeros(arch.base_channels, 1, 1, 1),
        }
    }

    /// Uniform `[-1/sqrt(fan_in), 1/sqrt(fan_in)]` weights and biases from a ChaCha8 stream.
    pub fn seeded(arch: Architecture, seed: u64) -> Self {
        let mut net = Self::zeros(arch);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for conv in net.convs_mut() {
            let fan_in = (conv.in_channels * conv.kernel * conv.kernel) as f32;
            let bound = 1.0 / fan_in.sqrt();
            for v in conv.weight.iter_mut().chain(conv.bias.iter_mut()) {
                *v = rng.gen_range(-bound..=bound);
            }
        }
        // The global-to-global block is seeded as a leak, so repeated
        // f_g += delta contracts instead of compounding.
        let (c, k) = (arch.bottleneck_channels(), arch.global_dim);
        let inputs = c + k;
        let spread = 0.25 / k as f32;
        for o in c..inputs {
            for j in c..inputs {
                let leak = if o == j { -0.5 } else { 0.0 };
                net.fusion.weight[o * inputs + j] = leak + rng.gen_range(-spread..=spread);
            }
        }
        net
    }

    /// Convolutions in weight-file order.
    pub fn convs(&self) -> Vec<&Conv2d> {
        let mut out = Vec::new();
        for (e, l) in self.encoders.iter().zip(&self.lstms) {
            out.push(e);
            out.push(l);
        }
        out.push(&self.fusion);
        out.extend(self.decoders.iter().rev());
        out.push(&self.head);
        out
    }

    pub fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut out = Vec::new();
        for (e, l) in self.encoders.iter_mut().zip(self.lstms.iter_mut()) {
            out.push(e);
            out.push(l);
        }
        out.push(&mut self.fusion);
        out.extend(self.decoders.iter_mut().rev());
        out.push(&mut self.head);
        out
    }

    fn lstm_step(gates_conv: &Conv2d, x: &FeatureMap, state: &mut LstmState) {
        let gates = gates_conv.forward(&FeatureMap::concat(&[x, &state.h]));
        let c = state.h.channels();
        let n = state.h.height() * state.h.width();
        let g = gates.data();
        let (cell, hidden) = (state.c.data_mut(), state.h.data_mut());
        for ch in 0..c {
            for p in 0..n {
                let i = sigmoid(g[ch * n + p]);
                let f = sigmoid(g[(c + ch) * n + p]);
                let u = g[(2 * c + ch) * n + p].tanh();
                let o = sigmoid(g[(3 * c + ch) * n + p]);
                let idx = ch * n + p;
                cell[idx] = f * cell[idx] + i * u;
                hidden[idx] = o * cell[idx].tanh();
            }
        }
    }

    /// One recurrent step on a local tensor. `states[l]` is the level-`l+1`
    /// state slice matching the input at `1 / 2^(l+1)` resolution; it is
    /// updated in place. Returns the single-channel output in `[0, 1]`.
    pub fn forward(&self, input: &FeatureMap, states: &mut [LstmState], f_g: &[f64]) -> (FeatureMap, FuseTrace) {
        assert_eq!(states.len(), self.arch.levels, "one state per level");
        let mut x = input.clone();
        let mut skips = Vec::with_capacity(self.arch.levels);
        for ((encoder, lstm), state) in self.encoders.iter().zip(&self.lstms).zip(states.iter_mut()) {
            let mut down = encoder.forward(&x);
            down.map_inplace(relu);
            Self::lstm_step(lstm, &down, state);
            x = state.h.clone();
            skips.push(x.clone());
        }
        let (mut x, delta) = global_fuse(&x, f_g, &self.fusion);
        let trace = FuseTrace {
            bottleneck: skips[self.arch.levels - 1].clone(),
            f_g_prev: f_g.to_vec(),
            delta,
        };
        for l in (1..=self.arch.levels).rev() {
            x = self.decoders[l - 1].forward(&x.upsample2());
            x.map_inplace(relu);
            if l >= 2 {
                x.add_assign(&skips[l - 2]);
            }
        }
        let mut out = self.head.forward(&x);
        out.map_inplace(sigmoid);
        (out, trace)
    }
}
