//! Prediction heads turning the context feature into per-timestep spatial
//! distributions, plus the model wrapper that pairs them with the backbone.
//!
//! Grid heads emit normalized log-marginals `[N, T, H, W]`. The mixture head
//! emits raw Gaussian-mixture parameters that are discretized onto the grid
//! for evaluation.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Backbone, BackboneConfig};
use crate::error::{DrfError, Result};
use crate::grid::{init_delta, BinIndex, GridSpec, LogGrid};
use crate::layers::{Conv2d, ConvNormRelu, Linear};
use crate::raster::Sample;
use crate::tensor::{MdnBatch, MdnLossStats, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadKind {
    FullyConv,
    Drr,
    Drf,
    ConvLstm,
    Mdn1,
    Mdn4,
    Mdn8,
}

impl HeadKind {
    pub const ALL: [HeadKind; 7] = [
        HeadKind::FullyConv,
        HeadKind::Drr,
        HeadKind::Drf,
        HeadKind::ConvLstm,
        HeadKind::Mdn1,
        HeadKind::Mdn4,
        HeadKind::Mdn8,
    ];

    pub fn name(self) -> &'static str {
        match self {
            HeadKind::FullyConv => "fullyconv",
            HeadKind::Drr => "drr",
            HeadKind::Drf => "drf",
            HeadKind::ConvLstm => "convlstm",
            HeadKind::Mdn1 => "mdn1",
            HeadKind::Mdn4 => "mdn4",
            HeadKind::Mdn8 => "mdn8",
        }
    }

    /// Mixture components for the mixture heads.
    pub fn components(self) -> Option<usize> {
        match self {
            HeadKind::Mdn1 => Some(1),
            HeadKind::Mdn4 => Some(4),
            HeadKind::Mdn8 => Some(8),
            _ => None,
        }
    }
}

impl fmt::Display for HeadKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for HeadKind {
    type Err = DrfError;
    fn from_str(s: &str) -> Result<Self> {
        HeadKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                DrfError::invalid(
                    "head",
                    format!("unknown head {s:?}; expected one of fullyconv, drr, drf, convlstm, mdn1, mdn4, mdn8"),
                )
            })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HeadConfig {
    pub kind: HeadKind,
    /// Future timesteps predicted.
    pub horizon: usize,
    /// Width of the projected context feature.
    pub proj_channels: usize,
    /// Width of the residual predictor and recurrent state.
    pub hidden_channels: usize,
    pub norm_groups: usize,
    /// Probability mass spread off the PoI bin in the initial distribution.
    pub leak: f64,
    pub mdn_hidden: usize,
    /// Lower bound on mixture standard deviations (meters).
    pub sigma_eps: f64,
    /// Mixture losses above this many nats per timestep are discarded.
    pub mdn_clip: f64,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            kind: HeadKind::Drf,
            horizon: 10,
            proj_channels: 32,
            hidden_channels: 32,
            norm_groups: 8,
            leak: 1e-3,
            mdn_hidden: 64,
            sigma_eps: 1e-2,
            mdn_clip: 50.0,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 {
            return Err(DrfError::invalid("head", "horizon must be at least 1"));
        }
        if !(0.0..1.0).contains(&self.leak) {
            return Err(DrfError::invalid("head", "leak must lie in [0, 1)"));
        }
        if !self.hidden_channels.is_multiple_of(self.norm_groups.max(1)) || self.norm_groups == 0 {
            return Err(DrfError::invalid("head", "hidden_channels must be a multiple of norm_groups"));
        }
        if !(self.sigma_eps > 0.0) || !(self.mdn_clip > 0.0) {
            return Err(DrfError::invalid("head", "sigma_eps and mdn_clip must be positive"));
        }
        Ok(())
    }
}

/// Per-timestep network emitting one log-residual plane from the projected
/// feature and the current log potential.
#[derive(Clone, Debug)]
pub struct ResidualPredictor {
    a: ConvNormRelu,
    b: ConvNormRelu,
    out: Conv2d,
}

impl ResidualPredictor {
    fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, cfg: &HeadConfig, rng: &mut impl Rng) -> Self {
        let (p, h, g) = (cfg.proj_channels, cfg.hidden_channels, cfg.norm_groups);
        ResidualPredictor {
            a: ConvNormRelu::new(store, &format!("{name}.a"), p + 1, h, 3, 1, g, rng),
            b: ConvNormRelu::new(store, &format!("{name}.b"), h, h, 3, 1, g, rng),
            out: Conv2d::zeroed(store, &format!("{name}.out"), h, 1, 1),
        }
    }

    /// `features`: `[N, P, H, W]`; `log_state`: `[N, 1, H, W]`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, features: Var, log_state: Var) -> Result<Var> {
        // Log masses span roughly [-ln K, 0]; bring them to the feature scale.
        let [_, _, h, w] = tape.value(log_state).dims4()?;
        let state = tape.scale(log_state, T::from_f64(1.0 / ((h * w) as f64).ln().max(1.0)));
        let x = tape.concat(&[features, state])?;
        let y = self.a.forward(tape, store, x)?;
        let y = self.b.forward(tape, store, y)?;
        self.out.forward(tape, store, y)
    }
}

#[derive(Clone, Debug)]
enum HeadNet {
    FullyConv {
        readout: Conv2d,
    },
    Drr {
        readout: Conv2d,
        residuals: Vec<ResidualPredictor>,
    },
    Drf {
        residuals: Vec<ResidualPredictor>,
    },
    ConvLstm {
        c0: ParamId,
        gates: Conv2d,
        readout: Conv2d,
    },
    Mdn {
        fc1: Linear,
        fc2: Linear,
    },
}

/// Forward result of a head.
#[derive(Clone, Copy, Debug)]
pub enum HeadOutput {
    /// Normalized log-marginals `[N, T, H, W]`.
    Marginals(Var),
    /// Raw mixture parameters `[N, T * components * 6]`.
    Mixture(Var),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
#[derive(Default)]
pub struct ModelConfig {
    pub backbone: BackboneConfig,
    pub head: HeadConfig,
}


/// Backbone, projection and head with their parameters.
#[derive(Clone, Debug)]
pub struct Model<T: Scalar = f32> {
    pub config: ModelConfig,
    pub in_channels: usize,
    pub store: ParamStore<T>,
    backbone: Backbone,
    /// Absent for mixture heads, which read the pooled feature directly.
    proj: Option<Conv2d>,
    net: HeadNet,
}

/// Network inputs and targets for a batch of samples.
#[derive(Clone, Debug)]
pub struct Batch<T: Scalar = f32> {
    pub raster: Tensor<T>,
    /// Initial log potential `[N, 1, H, W]` over the output grid.
    pub init: Tensor<T>,
    /// Flat ground-truth bin per `(sample, timestep)`; `None` when off-grid.
    pub targets: Vec<Option<usize>>,
    /// Ground truth relative to the PoI anchor in output-grid meters.
    pub offsets: Vec<[f64; 2]>,
    /// Output grid of each sample; all share one shape.
    pub outputs: Vec<GridSpec>,
    pub anchors: Vec<[f64; 2]>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_samples(samples: &[&Sample], horizon: usize, leak: f64) -> Result<Self> {
        let first = samples
            .first()
            .ok_or_else(|| DrfError::invalid("batch", "no samples"))?;
        let (c, ispec) = (first.raster.channels(), first.raster.spec);
        let out = first.output;
        let mut raster = Vec::with_capacity(samples.len() * c * ispec.len());
        let mut init = Vec::with_capacity(samples.len() * out.len());
        let mut targets = Vec::new();
        let mut offsets = Vec::new();
        let mut anchors = Vec::new();
        let mut outputs = Vec::new();
        for s in samples {
            if s.raster.channels() != c
                || s.output.rows != out.rows
                || s.output.cols != out.cols
                || s.output.bin_size != out.bin_size
            {
                return Err(DrfError::invalid("batch", "samples disagree on raster layout"));
            }
            if s.horizon() < horizon {
                return Err(DrfError::invalid(
                    "batch",
                    format!("sample {} has {} future frames, head needs {horizon}", s.seed, s.horizon()),
                ));
            }
            raster.extend(s.raster.data.iter().map(|v| T::from_f64(*v as f64)));
            let delta = init_delta(s.output, s.poi_bin, leak)?;
            init.extend(delta.values().iter().map(|v| T::from_f64(*v)));
            let anchor = s.output.local_center(s.poi_bin);
            let gt_local = s.gt_local();
            for t in 0..horizon {
                targets.push(s.target(t).map(|b| s.output.flat(b)));
                offsets.push([gt_local[t][0] - anchor[0], gt_local[t][1] - anchor[1]]);
            }
            anchors.push(anchor);
            outputs.push(s.output);
        }
        let n = samples.len();
        Ok(Batch {
            raster: Tensor::new(&[n, c, ispec.rows, ispec.cols], raster)?,
            init: Tensor::new(&[n, 1, out.rows, out.cols], init)?,
            targets,
            offsets,
            outputs,
            anchors,
        })
    }

    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }
}

/// Loss value and bookkeeping for one batch.
#[derive(Clone, Copy, Debug, Default)]
pub struct LossStats {
    /// (sample, timestep) pairs contributing to the loss.
    pub used: usize,
    /// Off-grid ground truth excluded from grid losses.
    pub off_grid: usize,
    /// Mixture losses discarded by the clip threshold.
    pub clipped: usize,
}

impl<T: Scalar> Model<T> {
    pub fn new(config: &ModelConfig, in_channels: usize, seed: u64) -> Result<Self> {
        use rand::SeedableRng;
        config.head.validate()?;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let backbone = Backbone::new(&config.backbone, in_channels, &mut store, &mut rng)?;
        let hc = &config.head;
        let f = config.backbone.out_channels;
        let proj = hc
            .kind
            .components()
            .is_none()
            .then(|| Conv2d::new(&mut store, "head.proj", f, hc.proj_channels, 1, 1, &mut rng));
        let residuals = |store: &mut ParamStore<T>, rng: &mut rand_chacha::ChaCha8Rng| -> Vec<ResidualPredictor> {
            (1..=hc.horizon)
                .map(|t| ResidualPredictor::new(store, &format!("head.residual{t}"), hc, rng))
                .collect()
        };
        let net = match hc.kind {
            HeadKind::FullyConv => HeadNet::FullyConv {
                readout: Conv2d::zeroed(&mut store, "head.readout", hc.proj_channels, hc.horizon, 1),
            },
            HeadKind::Drr => HeadNet::Drr {
                readout: Conv2d::zeroed(&mut store, "head.readout", hc.proj_channels, hc.horizon, 1),
                residuals: residuals(&mut store, &mut rng),
            },
            HeadKind::Drf => HeadNet::Drf {
                residuals: residuals(&mut store, &mut rng),
            },
            HeadKind::ConvLstm => {
                let h = hc.proj_channels;
                HeadNet::ConvLstm {
                    c0: store.zeros("head.lstm.c0", &[h]),
                    gates: Conv2d::new(&mut store, "head.lstm.gates", h + 1, 4 * h, 3, 1, &mut rng),
                    readout: Conv2d::zeroed(&mut store, "head.lstm.readout", h, 1, 1),
                }
            }
            HeadKind::Mdn1 | HeadKind::Mdn4 | HeadKind::Mdn8 => {
                let n = hc.kind.components().expect("mixture head");
                let fc2 = Linear::new(&mut store, "head.mdn.fc2", hc.mdn_hidden, 6 * n * hc.horizon, &mut rng);
                // Small outputs start every component near unit spread at the anchor.
                for v in store.value_mut(fc2.weight).data_mut() {
                    *v = *v * T::from_f64(0.01);
                }
                HeadNet::Mdn {
                    fc1: Linear::new(&mut store, "head.mdn.fc1", f, hc.mdn_hidden, &mut rng),
                    fc2,
                }
            }
        };
        Ok(Model {
            config: config.clone(),
            in_channels,
            store,
            backbone,
            proj,
            net,
        })
    }

    pub fn kind(&self) -> HeadKind {
        self.config.head.kind
    }

    pub fn horizon(&self) -> usize {
        self.config.head.horizon
    }

    /// Context feature and its projection (the feature itself without one).
    fn features(&self, tape: &mut Tape<T>, raster: Var) -> Result<(Var, Var)> {
        let f = self.backbone.forward(tape, &self.store, raster)?;
        let Some(proj) = &self.proj else {
            return Ok((f, f));
        };
        let p = proj.forward(tape, &self.store, f)?;
        Ok((f, tape.relu(p)))
    }

    pub fn forward(&self, tape: &mut Tape<T>, batch: &Batch<T>) -> Result<HeadOutput> {
        let raster = tape.constant(batch.raster.clone());
        let init = tape.constant(batch.init.clone());
        let (f, p) = self.features(tape, raster)?;
        self.head_forward(tape, f, p, init)
    }

    fn head_forward(&self, tape: &mut Tape<T>, f: Var, p: Var, init: Var) -> Result<HeadOutput> {
        let s = &self.store;
        let horizon = self.horizon();
        let out = match &self.net {
            HeadNet::FullyConv { readout } => {
                let logits = readout.forward(tape, s, p)?;
                tape.log_softmax_spatial(logits)?
            }
            HeadNet::Drr { readout, residuals } => {
                let logits = readout.forward(tape, s, p)?;
                let independent = tape.log_softmax_spatial(logits)?;
                let mut prev = tape.log_softmax_spatial(init)?;
                let mut steps = Vec::with_capacity(horizon);
                for (t, res) in residuals.iter().enumerate() {
                    let base = tape.slice(independent, t, 1)?;
                    let r = res.forward(tape, s, p, prev)?;
                    check_residual(tape, r, t + 1)?;
                    let refined = tape.add(base, r)?;
                    prev = tape.log_softmax_spatial(refined)?;
                    steps.push(prev);
                }
                tape.concat(&steps)?
            }
            HeadNet::Drf { residuals } => {
                let mut potential = init;
                let mut steps = Vec::with_capacity(horizon);
                for (t, res) in residuals.iter().enumerate() {
                    let state = tape.log_softmax_spatial(potential)?;
                    let r = res.forward(tape, s, p, state)?;
                    check_residual(tape, r, t + 1)?;
                    potential = tape.add(potential, r)?;
                    steps.push(tape.log_softmax_spatial(potential)?);
                }
                tape.concat(&steps)?
            }
            HeadNet::ConvLstm { c0, gates, readout } => {
                let [n, ch, h, w] = tape.value(p).dims4()?;
                let c0 = tape.param(s, *c0);
                let mut c = tape.broadcast_planes(c0, n, h, w)?;
                let mut hidden = p;
                let mut x = tape.log_softmax_spatial(init)?;
                let mut steps = Vec::with_capacity(horizon);
                for _ in 0..horizon {
                    let (hn, cn) = lstm_cell(tape, s, gates, x, hidden, c, ch)?;
                    hidden = hn;
                    c = cn;
                    let logits = readout.forward(tape, s, hidden)?;
                    x = tape.log_softmax_spatial(logits)?;
                    steps.push(x);
                }
                tape.concat(&steps)?
            }
            HeadNet::Mdn { fc1, fc2 } => {
                let pooled = tape.global_avg_pool(f)?;
                let hdn = fc1.forward(tape, s, pooled)?;
                let hdn = tape.relu(hdn);
                return Ok(HeadOutput::Mixture(fc2.forward(tape, s, hdn)?));
            }
        };
        Ok(HeadOutput::Marginals(out))
    }

    /// Mean negative log-likelihood over the batch's usable targets.
    pub fn loss(&self, tape: &mut Tape<T>, output: HeadOutput, batch: &Batch<T>) -> Result<(Var, LossStats)> {
        let horizon = self.horizon();
        match output {
            HeadOutput::Marginals(lp) => {
                let k = batch.outputs[0].len();
                let mut idx = Vec::new();
                let mut stats = LossStats::default();
                for (i, target) in batch.targets.iter().enumerate() {
                    match target {
                        Some(bin) => idx.push(i * k + bin),
                        None => stats.off_grid += 1,
                    }
                }
                stats.used = idx.len();
                if idx.is_empty() {
                    let zero = tape.constant(Tensor::scalar(T::zero()));
                    return Ok((zero, stats));
                }
                let picked = tape.pick(lp, &idx)?;
                let mean = tape.mean(picked);
                Ok((tape.scale(mean, -T::one()), stats))
            }
            HeadOutput::Mixture(raw) => {
                let hc = &self.config.head;
                let mdn = MdnBatch {
                    components: hc.kind.components().expect("mixture head"),
                    horizon,
                    sigma_eps: hc.sigma_eps,
                    clip: hc.mdn_clip,
                    targets: batch.offsets.clone(),
                    mask: batch.targets.iter().map(|t| t.is_some()).collect(),
                };
                let (loss, MdnLossStats { used, clipped }) = tape.mdn_nll(raw, &mdn)?;
                let off_grid = batch.targets.iter().filter(|t| t.is_none()).count();
                Ok((loss, LossStats { used, off_grid, clipped }))
            }
        }
    }

    /// Per-sample predicted marginals (normalized log space), plus the
    /// mixture they were discretized from for mixture heads.
    pub fn predict(&self, batch: &Batch<T>) -> Result<Vec<Prediction>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, batch)?;
        let horizon = self.horizon();
        let k = batch.outputs[0].len();
        match out {
            HeadOutput::Marginals(lp) => {
                let data = tape.value(lp).data();
                (0..batch.len())
                    .map(|n| {
                        let marginals = (0..horizon)
                            .map(|t| {
                                let plane = &data[(n * horizon + t) * k..(n * horizon + t + 1) * k];
                                normalized_grid(batch.outputs[n], plane.iter().map(|v| v.as_f64()).collect())
                            })
                            .collect::<Result<Vec<_>>>()?;
                        Ok(Prediction { marginals, mixture: None })
                    })
                    .collect()
            }
            HeadOutput::Mixture(raw) => {
                let hc = &self.config.head;
                let n_comp = hc.kind.components().expect("mixture head");
                let per = horizon * n_comp * 6;
                let data = tape.value(raw).to_f64_vec();
                (0..batch.len())
                    .map(|n| {
                        let mixture = MixtureParams::from_raw(
                            &data[n * per..(n + 1) * per],
                            n_comp,
                            horizon,
                            hc.sigma_eps,
                            batch.anchors[n],
                        )?;
                        let marginals = discretize_mdn(&mixture, &batch.outputs[n])?;
                        Ok(Prediction {
                            marginals,
                            mixture: Some(mixture),
                        })
                    })
                    .collect()
            }
        }
    }

    /// Residual network of a flow head for one sample, usable with [`flow_drf`].
    pub fn residual_adapter(&self, batch: &Batch<T>, sample: usize) -> Result<NetResidual<'_, T>> {
        let HeadNet::Drf { residuals } = &self.net else {
            return Err(DrfError::invalid("head", "residual adapter needs a drf head"));
        };
        let mut tape = Tape::new();
        let raster = tape.constant(batch.raster.clone());
        let (_, p) = self.features(&mut tape, raster)?;
        let [_, c, h, w] = tape.value(p).dims4()?;
        let plane = c * h * w;
        let data = tape.value(p).data()[sample * plane..(sample + 1) * plane].to_vec();
        Ok(NetResidual {
            model: self,
            residuals,
            features: Tensor::new(&[1, c, h, w], data)?,
        })
    }

    /// Metadata identifying the architecture in checkpoints.
    pub fn signature(&self) -> std::collections::BTreeMap<String, String> {
        let mut m = std::collections::BTreeMap::new();
        let hc = &self.config.head;
        let bc = &self.config.backbone;
        m.insert("head".into(), hc.kind.name().into());
        m.insert("horizon".into(), hc.horizon.to_string());
        m.insert("in_channels".into(), self.in_channels.to_string());
        m.insert(
            "head_widths".into(),
            format!("{}/{}/{}/{}", hc.proj_channels, hc.hidden_channels, hc.norm_groups, hc.mdn_hidden),
        );
        m.insert(
            "backbone".into(),
            format!(
                "stem{} stages{:?} scales{:?} blocks{} out{} groups{}",
                bc.stem_channels, bc.stage_channels, bc.stage_scales, bc.blocks_per_stage, bc.out_channels, bc.norm_groups
            ),
        );
        m
    }
}

fn check_residual<T: Scalar>(tape: &Tape<T>, r: Var, t: usize) -> Result<()> {
    if tape.value(r).is_finite() {
        Ok(())
    } else {
        Err(DrfError::NonFiniteResidual { t })
    }
}

/// One convolutional LSTM step; returns `(h, c)`.
#[allow(clippy::too_many_arguments)]
fn lstm_cell<T: Scalar>(
    tape: &mut Tape<T>,
    store: &ParamStore<T>,
    gates: &Conv2d,
    x: Var,
    h: Var,
    c: Var,
    ch: usize,
) -> Result<(Var, Var)> {
    let input = tape.concat(&[x, h])?;
    let z = gates.forward(tape, store, input)?;
    let zi = tape.slice(z, 0, ch)?;
    let zf = tape.slice(z, ch, ch)?;
    let zo = tape.slice(z, 2 * ch, ch)?;
    let zg = tape.slice(z, 3 * ch, ch)?;
    let (i, f, o) = (tape.sigmoid(zi), tape.sigmoid(zf), tape.sigmoid(zo));
    let g = tape.tanh(zg);
    let keep = tape.mul(f, c)?;
    let write = tape.mul(i, g)?;
    let c_new = tape.add(keep, write)?;
    let squashed = tape.tanh(c_new);
    let h_new = tape.mul(o, squashed)?;
    Ok((h_new, c_new))
}

fn normalized_grid(spec: GridSpec, values: Vec<f64>) -> Result<LogGrid> {
    let lg = LogGrid::new(spec, values)?;
    LogGrid::new(spec, lg.log_normalized()?)
}

/// Predicted marginals for one sample.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// Normalized log-marginals for `t = 1 ..= T`.
    pub marginals: Vec<LogGrid>,
    pub mixture: Option<MixtureParams>,
}

/// Source of log-residual planes for [`flow_drf`].
pub trait Residual {
    /// Log residual for step `t` (1-based) given the potential after `t - 1`.
    fn log_residual(&mut self, t: usize, potential: &LogGrid) -> Result<Vec<f64>>;
}

/// Accumulates `log p~_t = log p~_{t-1} + log psi_t` for `t = 1 ..= horizon`
/// and returns the unnormalized potentials. NaN or `+inf` residual entries
/// abort with the offending timestep.
pub fn flow_drf(init: &LogGrid, horizon: usize, residual: &mut impl Residual) -> Result<Vec<LogGrid>> {
    let mut potentials = Vec::with_capacity(horizon);
    let mut current = init.clone();
    for t in 1..=horizon {
        let r = residual.log_residual(t, &current)?;
        if r.len() != current.values().len() || r.iter().any(|v| v.is_nan() || *v == f64::INFINITY) {
            return Err(DrfError::NonFiniteResidual { t });
        }
        let values: Vec<f64> = current.values().iter().zip(&r).map(|(a, b)| a + b).collect();
        if values.iter().any(|v| v.is_nan()) {
            return Err(DrfError::NonFiniteResidual { t });
        }
        current = LogGrid::new(*init.spec(), values)?;
        potentials.push(current.clone());
    }
    Ok(potentials)
}

/// Residual predictors of a trained flow head, evaluated one plane at a time.
pub struct NetResidual<'a, T: Scalar> {
    model: &'a Model<T>,
    residuals: &'a [ResidualPredictor],
    features: Tensor<T>,
}

impl<T: Scalar> Residual for NetResidual<'_, T> {
    fn log_residual(&mut self, t: usize, potential: &LogGrid) -> Result<Vec<f64>> {
        let spec = potential.spec();
        let mut tape = Tape::new();
        let p = tape.constant(self.features.clone());
        let state: Vec<T> = potential.log_normalized()?.into_iter().map(T::from_f64).collect();
        let state = tape.constant(Tensor::new(&[1, 1, spec.rows, spec.cols], state)?);
        let r = self.residuals[t - 1].forward(&mut tape, &self.model.store, p, state)?;
        Ok(tape.value(r).to_f64_vec())
    }
}

/// One bivariate Gaussian mixture component in grid-local meters.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Gaussian2 {
    pub mean: [f64; 2],
    pub sigma: [f64; 2],
    pub rho: f64,
    pub weight: f64,
}

impl Gaussian2 {
    pub fn is_valid(&self) -> bool {
        self.sigma.iter().all(|s| s.is_finite() && *s > 0.0)
            && self.rho.abs() < 1.0
            && self.mean.iter().all(|m| m.is_finite())
            && self.weight.is_finite()
            && self.weight >= 0.0
    }

    pub fn log_density(&self, p: [f64; 2]) -> f64 {
        let q = 1.0 - self.rho * self.rho;
        let a = (p[0] - self.mean[0]) / self.sigma[0];
        let b = (p[1] - self.mean[1]) / self.sigma[1];
        let z = a * a + b * b - 2.0 * self.rho * a * b;
        -(2.0 * std::f64::consts::PI).ln() - self.sigma[0].ln() - self.sigma[1].ln() - 0.5 * q.ln() - z / (2.0 * q)
    }
}

/// Saturated correlations are pulled back to keep covariances invertible.
const RHO_MAX: f64 = 1.0 - 1e-9;

/// Per-timestep mixtures in the output grid's local frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixtureParams {
    pub steps: Vec<Vec<Gaussian2>>,
}

impl MixtureParams {
    /// Applies `sigma = exp(s) + eps`, `rho = tanh(r)`, `pi = softmax(logits)`
    /// to raw outputs laid out as in [`Tape::mdn_nll`]; means are offsets from `anchor`.
    pub fn from_raw(raw: &[f64], components: usize, horizon: usize, sigma_eps: f64, anchor: [f64; 2]) -> Result<Self> {
        if raw.len() != components * horizon * 6 {
            return Err(DrfError::Shape {
                op: "mixture params",
                lhs: vec![raw.len()],
                rhs: vec![horizon, components, 6],
            });
        }
        let steps = raw
            .chunks(components * 6)
            .map(|step| {
                let logits: Vec<f64> = step.chunks(6).map(|c| c[5]).collect();
                let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let total: f64 = logits.iter().map(|l| (l - max).exp()).sum();
                step.chunks(6)
                    .map(|c| Gaussian2 {
                        mean: [anchor[0] + c[0], anchor[1] + c[1]],
                        sigma: [c[2].exp() + sigma_eps, c[3].exp() + sigma_eps],
                        rho: c[4].tanh().clamp(-RHO_MAX, RHO_MAX),
                        weight: (c[5] - max).exp() / total,
                    })
                    .collect()
            })
            .collect();
        Ok(MixtureParams { steps })
    }

    pub fn validate(&self) -> Result<()> {
        for (t, step) in self.steps.iter().enumerate() {
            for (i, g) in step.iter().enumerate() {
                if !g.is_valid() {
                    return Err(DrfError::NotPositiveDefinite { t: t + 1, component: i });
                }
            }
        }
        Ok(())
    }
}

/// Sub-cell offsets of the 3x3 centered stencil, in bin units.
const STENCIL: [f64; 3] = [-1.0 / 3.0, 0.0, 1.0 / 3.0];

/// Log of the per-cell mass of one mixture before renormalization: cell area
/// times the mean density over a 3x3 grid of sub-cell centers.
pub fn discretized_log_mass(step: &[Gaussian2], spec: &GridSpec) -> Vec<f64> {
    let log_weights: Vec<f64> = step.iter().map(|g| g.weight.ln()).collect();
    let log_scale = spec.bin_area().ln() - 9f64.ln();
    let mut terms = Vec::with_capacity(9 * step.len());
    (0..spec.len())
        .map(|i| {
            let c = spec.local_center(spec.unflat(i));
            terms.clear();
            for dy in STENCIL {
                for dx in STENCIL {
                    let p = [c[0] + dx * spec.bin_size, c[1] + dy * spec.bin_size];
                    for (g, lw) in step.iter().zip(&log_weights) {
                        terms.push(lw + g.log_density(p));
                    }
                }
            }
            log_scale + crate::grid::logsumexp(&terms)
        })
        .collect()
}

/// Discretizes each timestep's mixture onto `spec` and renormalizes.
pub fn discretize_mdn(m: &MixtureParams, spec: &GridSpec) -> Result<Vec<LogGrid>> {
    m.validate()?;
    m.steps
        .iter()
        .map(|step| normalized_grid(*spec, discretized_log_mass(step, spec)))
        .collect()
}

/// Mean NLL of ground-truth bins under predicted marginals.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct NllSummary {
    pub mean: f64,
    pub used: usize,
    pub excluded: usize,
}

/// `-log p_t(gt_t)` averaged over on-grid timesteps; `None` targets are
/// excluded and counted.
pub fn nll_loss(preds: &[LogGrid], gt: &[Option<BinIndex>]) -> Result<NllSummary> {
    if preds.len() != gt.len() {
        return Err(DrfError::invalid(
            "nll",
            format!("{} predictions for {} targets", preds.len(), gt.len()),
        ));
    }
    let mut total = 0.0;
    let mut used = 0;
    for (lg, g) in preds.iter().zip(gt) {
        if let Some(bin) = g {
            lg.spec().check_bin(*bin)?;
            let lse = lg.logsumexp();
            if lse == f64::NEG_INFINITY {
                return Err(DrfError::DegeneratePotential);
            }
            total += lse - lg.get(*bin);
            used += 1;
        }
    }
    Ok(NllSummary {
        mean: if used == 0 { f64::NAN } else { total / used as f64 },
        used,
        excluded: gt.len() - used,
    })
}
