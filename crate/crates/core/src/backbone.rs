//! Residual feature pyramid mapping a rasterization to the shared context
//! feature at a quarter of the input resolution.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DrfError, Result};
use crate::layers::{Conv2d, ConvNormRelu, GroupNorm};
use crate::tensor::{ParamStore, Scalar, Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub stem_channels: usize,
    pub stage_channels: [usize; 4],
    /// Downsampling of each stage output relative to the input.
    pub stage_scales: [usize; 4],
    pub blocks_per_stage: usize,
    /// Channels of the merged pyramid output.
    pub out_channels: usize,
    pub norm_groups: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig {
            stem_channels: 16,
            stage_channels: [16, 32, 64, 64],
            stage_scales: [4, 8, 16, 16],
            blocks_per_stage: 1,
            out_channels: 64,
            norm_groups: 8,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |detail: String| Err(DrfError::invalid("backbone", detail));
        if self.stage_scales[0] != 4 {
            return bad(format!("first stage must sit at 1/4 resolution, got 1/{}", self.stage_scales[0]));
        }
        for k in 1..4 {
            let (a, b) = (self.stage_scales[k - 1], self.stage_scales[k]);
            if b < a || b % a != 0 {
                return bad(format!("stage scales {:?} must be non-decreasing multiples", self.stage_scales));
            }
        }
        let widths = std::iter::once(self.stem_channels)
            .chain(self.stage_channels)
            .chain([self.out_channels]);
        for w in widths {
            if w == 0 || self.norm_groups == 0 || w % self.norm_groups != 0 {
                return bad(format!("width {w} is not a positive multiple of {} norm groups", self.norm_groups));
            }
        }
        if self.blocks_per_stage == 0 {
            return bad("blocks_per_stage must be at least 1".into());
        }
        Ok(())
    }

    /// Spatial dimensions must divide by the coarsest stage scale.
    pub fn check_input(&self, rows: usize, cols: usize) -> Result<()> {
        let m = self.stage_scales[3];
        if !rows.is_multiple_of(m) || !cols.is_multiple_of(m) {
            let pad = |v: usize| v.div_ceil(m) * m;
            return Err(DrfError::invalid(
                "raster dimensions",
                format!(
                    "{rows}x{cols} is not divisible by {m}; pad the raster to {}x{}",
                    pad(rows),
                    pad(cols)
                ),
            ));
        }
        Ok(())
    }
}

/// Two 3x3 conv + norm layers with an identity or projected shortcut.
#[derive(Clone, Debug)]
struct ResidualBlock {
    first: ConvNormRelu,
    second: Conv2d,
    second_norm: GroupNorm,
    shortcut: Option<Conv2d>,
}

impl ResidualBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        name: &str,
        c_in: usize,
        c_out: usize,
        stride: usize,
        groups: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let shortcut = (c_in != c_out || stride != 1)
            .then(|| Conv2d::new(store, &format!("{name}.shortcut"), c_in, c_out, 1, stride, rng));
        ResidualBlock {
            first: ConvNormRelu::new(store, &format!("{name}.a"), c_in, c_out, 3, stride, groups, rng),
            second: Conv2d::new(store, &format!("{name}.b.conv"), c_out, c_out, 3, 1, rng),
            second_norm: GroupNorm::new(store, &format!("{name}.b.norm"), c_out, groups),
            shortcut,
        }
    }

    fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.first.forward(tape, store, x)?;
        let y = self.second.forward(tape, store, y)?;
        let y = self.second_norm.forward(tape, store, y)?;
        let skip = match &self.shortcut {
            Some(conv) => conv.forward(tape, store, x)?,
            None => x,
        };
        let sum = tape.add(y, skip)?;
        Ok(tape.relu(sum))
    }
}

#[derive(Clone, Debug)]
pub struct Backbone {
    pub config: BackboneConfig,
    stem: ConvNormRelu,
    stages: Vec<Vec<ResidualBlock>>,
    laterals: Vec<Conv2d>,
    smooth: Conv2d,
}

impl Backbone {
    /// Registers parameters under `backbone.*`.
    pub fn new<T: Scalar>(
        config: &BackboneConfig,
        in_channels: usize,
        store: &mut ParamStore<T>,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        config.validate()?;
        let g = config.norm_groups;
        let stem = ConvNormRelu::new(store, "backbone.stem", in_channels, config.stem_channels, 3, 2, g, rng);
        let mut stages = Vec::new();
        let mut c_in = config.stem_channels;
        let mut scale = 4;
        for (k, (&width, &s)) in config.stage_channels.iter().zip(&config.stage_scales).enumerate() {
            let blocks = (0..config.blocks_per_stage)
                .map(|b| {
                    let stride = if b == 0 { s / scale } else { 1 };
                    let cin = if b == 0 { c_in } else { width };
                    ResidualBlock::new(store, &format!("backbone.stage{}.block{b}", k + 1), cin, width, stride, g, rng)
                })
                .collect();
            stages.push(blocks);
            c_in = width;
            scale = s;
        }
        let laterals = config
            .stage_channels
            .iter()
            .enumerate()
            .map(|(k, &w)| Conv2d::new(store, &format!("backbone.lateral{}", k + 1), w, config.out_channels, 1, 1, rng))
            .collect();
        let smooth = Conv2d::new(store, "backbone.smooth", config.out_channels, config.out_channels, 3, 1, rng);
        Ok(Backbone {
            config: config.clone(),
            stem,
            stages,
            laterals,
            smooth,
        })
    }

    /// `[N, C, H, W] -> [N, out_channels, H/4, W/4]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let [_, _, h, w] = tape.value(x).dims4()?;
        self.config.check_input(h, w)?;
        let y = self.stem.forward(tape, store, x)?;
        let mut y = tape.max_pool2d(y, 2, 2)?;
        let mut features = Vec::with_capacity(4);
        for blocks in &self.stages {
            for block in blocks {
                y = block.forward(tape, store, y)?;
            }
            features.push(y);
        }
        let mut merged = self.laterals[3].forward(tape, store, features[3])?;
        for k in (0..3).rev() {
            let lateral = self.laterals[k].forward(tape, store, features[k])?;
            let factor = self.config.stage_scales[k + 1] / self.config.stage_scales[k];
            let up = if factor == 1 {
                merged
            } else {
                tape.upsample_bilinear(merged, factor)?
            };
            merged = tape.add(lateral, up)?;
        }
        self.smooth.forward(tape, store, merged)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(in_ch: usize) -> (Backbone, ParamStore<f32>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = Backbone::new(&BackboneConfig::default(), in_ch, &mut store, &mut rng).unwrap();
        (b, store)
    }

    #[test]
    fn desk_shape_is_quarter_resolution() {
        let (b, store) = build(40);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 40, 128, 96]));
        let f = b.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(f), &[1, 64, 32, 24]);
        assert!(tape.value(f).is_finite());
    }

    #[test]
    fn full_size_input_is_quarter_resolution() {
        let (b, store) = build(2);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 2, 576, 416]));
        let f = b.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(f), &[1, 64, 144, 104]);
    }

    #[test]
    fn indivisible_input_suggests_padding() {
        let (b, store) = build(3);
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[1, 3, 130, 96]));
        let err = b.forward(&mut tape, &store, x).unwrap_err().to_string();
        assert!(err.contains("144x96"), "{err}");
    }

    #[test]
    fn every_parameter_receives_gradient() {
        use rand::Rng;
        let (b, store) = build(5);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let data: Vec<f64> = (0..2 * 5 * 32 * 32).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::from_f64(&[2, 5, 32, 32], &data).unwrap());
        let f = b.forward(&mut tape, &store, x).unwrap();
        let wdata: Vec<f64> = (0..tape.value(f).numel()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w = tape.constant(Tensor::from_f64(tape.shape(f), &wdata).unwrap());
        let p = tape.mul(f, w).unwrap();
        let loss = tape.sum(p);
        tape.backward(loss).unwrap();
        let grads = store.gradients(&tape);
        for ((_, name, _), g) in store.iter().zip(&grads) {
            assert!(g.iter().any(|v| *v != 0.0), "{name} has no gradient");
        }
    }

    #[test]
    fn outputs_stay_finite_on_random_inputs() {
        use rand::Rng;
        let (b, store) = build(4);
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for scale in [1e-3, 1.0, 1e3] {
            let data: Vec<f64> = (0..4 * 32 * 16).map(|_| rng.random_range(-scale..scale)).collect();
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::from_f64(&[1, 4, 32, 16], &data).unwrap());
            let f = b.forward(&mut tape, &store, x).unwrap();
            assert!(tape.value(f).is_finite());
        }
    }
}
