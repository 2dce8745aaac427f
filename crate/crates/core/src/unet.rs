//! Three-level UNet: three contracting blocks (two conv/BN/ReLU stages then
//! 2x2 max-pool), three expanding blocks (two conv/BN/ReLU stages then a
//! kernel-2 stride-2 transposed convolution), channel-concatenated skips and
//! a 1x1 two-class head followed by softmax.
//!
//! With base width `w` the contracting blocks produce `(w, 2w, 4w)` channels
//! and the expanding blocks mirror back `(4w, 2w, w)`.

use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BnMode, BnParams, Checkpoint, RunningStats, Scalar, Tape, Tensor, Var};

pub const DEPTH: usize = 3;
pub const KERNEL: usize = 3;
pub const CLASSES: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UNetConfig {
    /// 1 for the student (raw patch), 3 for the teacher (enhanced patch).
    pub in_channels: usize,
    pub base_width: usize,
}

impl UNetConfig {
    pub fn student(base_width: usize) -> Self {
        Self {
            in_channels: 1,
            base_width,
        }
    }

    pub fn teacher(base_width: usize) -> Self {
        Self {
            in_channels: 3,
            base_width,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels != 1 && self.in_channels != 3 {
            return Err(Error::arg(format!(
                "in_channels must be 1 or 3, got {}",
                self.in_channels
            )));
        }
        if self.base_width == 0 {
            return Err(Error::arg("base_width must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug)]
enum Init {
    /// He-normal with the given fan-in.
    He(usize),
    Zero,
    One,
}

struct ParamSpec {
    name: String,
    shape: Vec<usize>,
    init: Init,
}

struct Block {
    name: &'static str,
    in_ch: usize,
    out_ch: usize,
    /// Output channels of the trailing transposed convolution, if any.
    up: Option<usize>,
}

fn blocks(cfg: &UNetConfig) -> Vec<Block> {
    let w = cfg.base_width;
    vec![
        Block { name: "enc1", in_ch: cfg.in_channels, out_ch: w, up: None },
        Block { name: "enc2", in_ch: w, out_ch: 2 * w, up: None },
        Block { name: "enc3", in_ch: 2 * w, out_ch: 4 * w, up: None },
        Block { name: "dec1", in_ch: 4 * w, out_ch: 4 * w, up: Some(4 * w) },
        Block { name: "dec2", in_ch: 8 * w, out_ch: 2 * w, up: Some(2 * w) },
        Block { name: "dec3", in_ch: 4 * w, out_ch: w, up: Some(w) },
    ]
}

/// Every trainable parameter, in the order the forward pass consumes them.
fn param_specs(cfg: &UNetConfig) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    let mut push = |name: String, shape: Vec<usize>, init| specs.push(ParamSpec { name, shape, init });
    for b in blocks(cfg) {
        for (i, cin) in [(1, b.in_ch), (2, b.out_ch)] {
            push(
                format!("{}.conv{i}.weight", b.name),
                vec![b.out_ch, cin, KERNEL, KERNEL],
                Init::He(cin * KERNEL * KERNEL),
            );
            push(format!("{}.bn{i}.gamma", b.name), vec![b.out_ch], Init::One);
            push(format!("{}.bn{i}.beta", b.name), vec![b.out_ch], Init::Zero);
        }
        if let Some(up) = b.up {
            push(format!("{}.up.weight", b.name), vec![b.out_ch, up, 2, 2], Init::He(b.out_ch));
            push(format!("{}.up.bias", b.name), vec![up], Init::Zero);
        }
    }
    let w = cfg.base_width;
    push("head.weight".into(), vec![CLASSES, 2 * w, 1, 1], Init::He(2 * w));
    push("head.bias".into(), vec![CLASSES], Init::Zero);
    specs
}

fn bn_specs(cfg: &UNetConfig) -> Vec<(String, usize)> {
    blocks(cfg)
        .iter()
        .flat_map(|b| (1..=2).map(move |i| (format!("{}.bn{i}", b.name), b.out_ch)))
        .collect()
}

/// Parameter shapes implied by `cfg`, in canonical order.
pub fn expected_shapes(cfg: &UNetConfig) -> Vec<(String, Vec<usize>)> {
    param_specs(cfg).into_iter().map(|s| (s.name, s.shape)).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct UNetModel<T> {
    config: UNetConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    bn_names: Vec<String>,
    running: Vec<RunningStats<T>>,
    bn_params: BnParams,
}

/// Result of recording one forward pass.
pub struct Forward<T> {
    /// `[N, 2, H, W]` class probabilities, class order `[healthy, tumor]`.
    pub probs: Var,
    /// Parameter leaves, parallel to [`UNetModel::params`].
    pub params: Vec<Var>,
    /// Running statistics after this pass (updated in train mode).
    pub running: Vec<RunningStats<T>>,
}

impl<T: Scalar> UNetModel<T> {
    /// He-normal conv weights, zero biases, BN gamma 1 / beta 0. Values are
    /// drawn in 64-bit and cast, so both precisions share one stream.
    pub fn init(config: UNetConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut names = Vec::new();
        let mut params = Vec::new();
        for spec in param_specs(&config) {
            let n: usize = spec.shape.iter().product();
            let data: Vec<f64> = match spec.init {
                Init::He(fan_in) => {
                    let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("valid std");
                    (0..n).map(|_| normal.sample(&mut rng)).collect()
                }
                Init::Zero => vec![0.0; n],
                Init::One => vec![1.0; n],
            };
            names.push(spec.name);
            params.push(Tensor::from_f64(spec.shape, &data)?);
        }
        let (bn_names, running) = bn_specs(&config)
            .into_iter()
            .map(|(name, c)| (name, RunningStats::new(c)))
            .unzip();
        Ok(Self {
            config,
            names,
            params,
            bn_names,
            running,
            bn_params: BnParams::default(),
        })
    }

    pub fn config(&self) -> &UNetConfig {
        &self.config
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<T>> {
        self.names.iter().position(|n| n == name).map(|i| &self.params[i])
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn set_running_stats(&mut self, running: Vec<RunningStats<T>>) {
        assert_eq!(running.len(), self.running.len());
        self.running = running;
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let [_, c, h, w] = match shape {
            &[n, c, h, w] => [n, c, h, w],
            _ => return Err(Error::shape(format!("UNet input must be NCHW, got {shape:?}"))),
        };
        if c != self.config.in_channels {
            return Err(Error::arg(format!(
                "model expects {} input channel(s), got {c}",
                self.config.in_channels
            )));
        }
        let m = 1 << DEPTH;
        if h == 0 || w == 0 || h % m != 0 || w % m != 0 {
            return Err(Error::arg(format!(
                "spatial dims {h}x{w} must be positive multiples of {m}"
            )));
        }
        Ok(())
    }

    /// Records the forward pass on `tape`. `self` is not modified; in train
    /// mode the updated running statistics are returned in [`Forward`].
    pub fn forward_on_tape(&self, tape: &mut Tape<T>, input: Var, mode: BnMode) -> Result<Forward<T>> {
        let params: Vec<Var> = self.params.iter().map(|p| tape.param(p.clone())).collect();
        self.forward_with(tape, input, params, mode)
    }

    /// Like [`Self::forward_on_tape`] but with caller-supplied parameter
    /// nodes, which must match [`Self::params`] in order and shape.
    pub fn forward_with(&self, tape: &mut Tape<T>, input: Var, params: Vec<Var>, mode: BnMode) -> Result<Forward<T>> {
        self.check_input(tape.value(input).shape())?;
        if params.len() != self.params.len()
            || params
                .iter()
                .zip(&self.params)
                .any(|(&v, p)| tape.value(v).shape() != p.shape())
        {
            return Err(Error::shape("parameter nodes do not match the model layout"));
        }
        let mut running = self.running.clone();
        let mut next_param = params.iter().copied();
        let mut next_bn = running.iter_mut();
        let bn = self.bn_params;

        let mut stage = |tape: &mut Tape<T>, x: Var, next_param: &mut dyn Iterator<Item = Var>| -> Result<Var> {
            let mut h = x;
            for _ in 0..2 {
                let w = next_param.next().expect("conv weight");
                let g = next_param.next().expect("bn gamma");
                let b = next_param.next().expect("bn beta");
                h = tape.conv2d(h, w, None, KERNEL / 2, 1)?;
                h = tape.batch_norm(h, g, b, mode, next_bn.next().expect("bn stats"), bn)?;
                h = tape.relu(h);
            }
            Ok(h)
        };

        let mut skips = Vec::with_capacity(DEPTH);
        let mut h = input;
        for _ in 0..DEPTH {
            let s = stage(tape, h, &mut next_param)?;
            skips.push(s);
            h = tape.max_pool2d(s)?;
        }
        for level in 0..DEPTH {
            h = stage(tape, h, &mut next_param)?;
            let w = next_param.next().expect("up weight");
            let b = next_param.next().expect("up bias");
            h = tape.transposed_conv2d(h, w, b)?;
            let skip = skips[DEPTH - 1 - level];
            h = tape.concat_channels(skip, h)?;
        }
        let hw = next_param.next().expect("head weight");
        let hb = next_param.next().expect("head bias");
        let logits = tape.conv2d(h, hw, Some(hb), 0, 1)?;
        debug_assert!(next_param.next().is_none());
        let probs = tape.softmax(logits)?;
        Ok(Forward {
            probs,
            params,
            running,
        })
    }

    /// Eval-mode class probabilities; pure in `self`.
    pub fn predict(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(input.clone());
        let fwd = self.forward_on_tape(&mut tape, x, BnMode::Eval)?;
        Ok(tape.value(fwd.probs).clone())
    }

    fn header(&self) -> String {
        serde_json::json!({
            "kind": "unet",
            "in_channels": self.config.in_channels,
            "base_width": self.config.base_width,
        })
        .to_string()
    }

    pub fn to_checkpoint(&self) -> Checkpoint<T> {
        let mut arrays: Vec<(String, Tensor<T>)> = self
            .names
            .iter()
            .cloned()
            .zip(self.params.iter().cloned())
            .collect();
        for (name, stats) in self.bn_names.iter().zip(&self.running) {
            let c = stats.mean.len();
            arrays.push((
                format!("{name}.running_mean"),
                Tensor::new(vec![c], stats.mean.clone()).expect("shape"),
            ));
            arrays.push((
                format!("{name}.running_var"),
                Tensor::new(vec![c], stats.var.clone()).expect("shape"),
            ));
        }
        Checkpoint {
            header: self.header(),
            arrays,
        }
    }

    /// Rebuilds a model, auditing every array against the shapes the
    /// header's config implies.
    pub fn from_checkpoint(ckpt: &Checkpoint<T>) -> Result<Self> {
        #[derive(Deserialize)]
        struct Header {
            kind: String,
            in_channels: usize,
            base_width: usize,
        }
        let header: Header = serde_json::from_str(&ckpt.header)
            .map_err(|e| Error::arg(format!("checkpoint header: {e}")))?;
        if header.kind != "unet" {
            return Err(Error::arg(format!("checkpoint kind {:?} is not unet", header.kind)));
        }
        let config = UNetConfig {
            in_channels: header.in_channels,
            base_width: header.base_width,
        };
        let mut model = Self::init(config, 0)?;
        let expected = model.names.len() + 2 * model.bn_names.len();
        if ckpt.arrays.len() != expected {
            return Err(Error::arg(format!(
                "checkpoint has {} arrays, config implies {expected}",
                ckpt.arrays.len()
            )));
        }
        for (i, name) in model.names.clone().iter().enumerate() {
            let t = ckpt
                .get(name)
                .ok_or_else(|| Error::arg(format!("checkpoint lacks {name}")))?;
            if t.shape() != model.params[i].shape() {
                return Err(Error::shape(format!(
                    "{name}: checkpoint {:?} vs config {:?}",
                    t.shape(),
                    model.params[i].shape()
                )));
            }
            model.params[i] = t.clone();
        }
        for (i, name) in model.bn_names.clone().iter().enumerate() {
            let c = model.running[i].mean.len();
            for (suffix, slot) in [("running_mean", 0), ("running_var", 1)] {
                let key = format!("{name}.{suffix}");
                let t = ckpt
                    .get(&key)
                    .ok_or_else(|| Error::arg(format!("checkpoint lacks {key}")))?;
                if t.shape() != [c] {
                    return Err(Error::shape(format!("{key}: expected [{c}]")));
                }
                if slot == 0 {
                    model.running[i].mean = t.data().to_vec();
                } else {
                    model.running[i].var = t.data().to_vec();
                }
            }
        }
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().write(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::read(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shape_audit_from_config() {
        let w = 4;
        let m = UNetModel::<f64>::init(UNetConfig::student(w), 1).unwrap();
        let shapes = expected_shapes(m.config());
        for ((name, shape), (n2, t)) in shapes.iter().zip(m.param_names().iter().zip(m.params())) {
            assert_eq!(name, n2);
            assert_eq!(shape.as_slice(), t.shape());
        }
        let conv_out: Vec<usize> = m
            .param_names()
            .iter()
            .zip(m.params())
            .filter(|(n, _)| n.ends_with("conv2.weight"))
            .map(|(_, t)| t.shape()[0])
            .collect();
        assert_eq!(conv_out, vec![w, 2 * w, 4 * w, 4 * w, 2 * w, w]);
        assert_eq!(m.param("head.weight").unwrap().shape(), &[2, 2 * w, 1, 1]);
        assert_eq!(m.param("dec2.conv1.weight").unwrap().shape(), &[2 * w, 8 * w, 3, 3]);
    }

    #[test]
    fn init_contracts() {
        let a = UNetModel::<f32>::init(UNetConfig::student(16), 5).unwrap();
        let b = UNetModel::<f32>::init(UNetConfig::student(16), 5).unwrap();
        assert_eq!(a.to_checkpoint().to_bytes(), b.to_checkpoint().to_bytes());

        let t = UNetModel::<f32>::init(UNetConfig::teacher(16), 5).unwrap();
        let diffs: Vec<&String> = a
            .param_names()
            .iter()
            .zip(a.params().iter().zip(t.params()))
            .filter(|(_, (x, y))| x.shape() != y.shape())
            .map(|(n, _)| n)
            .collect();
        assert_eq!(diffs, vec!["enc1.conv1.weight"]);

        for (n, p) in a.param_names().iter().zip(a.params()) {
            if n.ends_with("gamma") {
                assert!(p.data().iter().all(|&g| g == 1.0));
            }
        }
        assert!(UNetModel::<f32>::init(UNetConfig { in_channels: 2, base_width: 4 }, 0).is_err());
    }

    #[test]
    fn forward_shapes_and_channel_guard() {
        let s = UNetModel::<f64>::init(UNetConfig::student(4), 2).unwrap();
        let probs = s.predict(&Tensor::filled(vec![1, 1, 64, 64], 0.3)).unwrap();
        assert_eq!(probs.shape(), &[1, 2, 64, 64]);
        let d = probs.data();
        for p in 0..64 * 64 {
            assert!((d[p] + d[4096 + p] - 1.0).abs() < 1e-9);
        }
        assert!(matches!(
            s.predict(&Tensor::zeros(vec![1, 3, 64, 64])),
            Err(Error::Argument(_))
        ));
        assert!(s.predict(&Tensor::zeros(vec![1, 1, 60, 64])).is_err());

        let t = UNetModel::<f64>::init(UNetConfig::teacher(4), 2).unwrap();
        assert_eq!(
            t.predict(&Tensor::zeros(vec![2, 3, 64, 64])).unwrap().shape(),
            &[2, 2, 64, 64]
        );
        assert!(t.predict(&Tensor::zeros(vec![2, 1, 64, 64])).is_err());
    }

    #[test]
    fn eval_forward_is_pure_and_checkpoint_roundtrips() {
        let m = UNetModel::<f32>::init(UNetConfig::student(4), 3).unwrap();
        let x = Tensor::from_f64(
            vec![1, 1, 16, 16],
            &(0..256).map(|i| (i % 17) as f64 / 17.0).collect::<Vec<_>>(),
        )
        .unwrap();
        let a = m.predict(&x).unwrap();
        let b = m.predict(&x).unwrap();
        assert_eq!(
            a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
        let bytes = m.to_checkpoint().to_bytes();
        let back =
            UNetModel::<f32>::from_checkpoint(&Checkpoint::from_bytes(&bytes, "m".as_ref()).unwrap())
                .unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_checkpoint().to_bytes(), bytes);
    }
}
