//! The desk-scale classifier: a stack of conv-bn-relu-pool stages, an
//! optional Top-K layer after one stage, and a linear head.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{self, BatchNormStats, ConvParams, Mode};
use crate::sparsity::{self, TopKConfig, TopKMask, Variant};
use crate::tensor::{Scalar, Tensor};

/// Position and configuration of the Top-K layer. `stage` is 1-based: the
/// layer sits on the pooled output of that stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TopKPlacement {
    pub stage: usize,
    pub config: TopKConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Arch {
    pub widths: Vec<usize>,
    pub image_size: usize,
    pub classes: usize,
    pub topk: Option<TopKPlacement>,
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            widths: vec![16, 32, 64, 64],
            image_size: crate::data::IMAGE_SIZE,
            classes: crate::data::NUM_CLASSES,
            topk: None,
        }
    }
}

impl Arch {
    pub fn validate(&self) -> Result<()> {
        if self.widths.is_empty() || self.widths.contains(&0) {
            return Err(Error::invalid("model needs at least one stage of nonzero width"));
        }
        if self.classes == 0 {
            return Err(Error::invalid("model needs at least one class"));
        }
        if self.image_size >> self.widths.len() == 0 || self.image_size % (1 << self.widths.len()) != 0 {
            return Err(Error::invalid(format!(
                "image size {} is not divisible by 2^{} pooling",
                self.image_size,
                self.widths.len()
            )));
        }
        if let Some(p) = &self.topk {
            if p.stage == 0 || p.stage > self.widths.len() {
                return Err(Error::invalid(format!(
                    "Top-K stage {} outside 1..={}",
                    p.stage,
                    self.widths.len()
                )));
            }
        }
        Ok(())
    }

    /// Spatial extent of stage `s`'s pooled output (1-based).
    pub fn stage_extent(&self, stage: usize) -> usize {
        self.image_size >> stage
    }

    fn head_inputs(&self) -> usize {
        let e = self.stage_extent(self.widths.len());
        self.widths[self.widths.len() - 1] * e * e
    }

    /// Numeric encoding stored in checkpoints as `meta.arch`:
    /// `[image_size, classes, topk_stage, rho·1e6, variant, widths...]`.
    fn encode<S: Scalar>(&self) -> Tensor<S> {
        let (stage, rho, variant) = match &self.topk {
            Some(p) => (
                p.stage as f64,
                (p.config.fraction() * 1e6).round(),
                match p.config.variant() {
                    Variant::Hard => 0.0,
                    Variant::MeanReplacement => 1.0,
                },
            ),
            None => (0.0, 0.0, 0.0),
        };
        let mut v = vec![self.image_size as f64, self.classes as f64, stage, rho, variant];
        v.extend(self.widths.iter().map(|&w| w as f64));
        Tensor::from_parts(vec![v.len()], v.into_iter().map(S::lit).collect())
    }

    fn decode<S: Scalar>(t: &Tensor<S>) -> Result<Self> {
        let v = t.to_f64_vec();
        let bad = || Error::format("checkpoint", "malformed meta.arch entry");
        if v.len() < 6 || v.iter().any(|x| x.fract() != 0.0 || *x < 0.0) {
            return Err(bad());
        }
        let topk = if v[2] > 0.0 {
            let variant = match v[4] as u32 {
                0 => Variant::Hard,
                1 => Variant::MeanReplacement,
                _ => return Err(bad()),
            };
            Some(TopKPlacement {
                stage: v[2] as usize,
                config: TopKConfig::new(v[3] / 1e6, variant)?,
            })
        } else {
            None
        };
        let arch = Arch {
            widths: v[5..].iter().map(|&w| w as usize).collect(),
            image_size: v[0] as usize,
            classes: v[1] as usize,
            topk,
        };
        arch.validate()?;
        Ok(arch)
    }
}

/// Parameters and batch-norm statistics of a [`Arch`] network.
#[derive(Debug, Clone, PartialEq)]
pub struct DeskNet<S: Scalar = f32> {
    arch: Arch,
    params: Vec<Tensor<S>>,
    bn: Vec<BatchNormStats<S>>,
}

/// Tape handles produced by one forward pass.
pub struct Forward<S: Scalar> {
    pub logits: Var,
    /// Parameter handles in [`DeskNet::param_names`] order.
    pub params: Vec<Var>,
    /// Pooled output of every stage, before any Top-K layer.
    pub stages: Vec<Var>,
    /// Output of the Top-K layer and its selection, when configured.
    pub topk: Option<(Var, TopKMask)>,
    /// Batch-norm statistics after this pass (updated in train mode).
    pub bn: Vec<BatchNormStats<S>>,
}

const PARAMS_PER_STAGE: usize = 4;

impl<S: Scalar> DeskNet<S> {
    /// Kaiming-uniform convolutions, `±1/sqrt(fan_in)` head weights, unit BN
    /// scale, zero biases.
    pub fn new(arch: Arch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Vec::new();
        let mut bn = Vec::new();
        let mut in_c = 3;
        for &w in &arch.widths {
            let conv = ConvParams::<S>::kaiming(in_c, w, 3, 1, 1, &mut rng);
            params.extend([conv.weight, conv.bias, Tensor::ones(&[w]), Tensor::zeros(&[w])]);
            bn.push(BatchNormStats::new(w));
            in_c = w;
        }
        let fan_in = arch.head_inputs();
        let bound = 1.0 / (fan_in as f64).sqrt();
        params.push(Tensor::from_fn(&[arch.classes, fan_in], |_| {
            S::lit(rng.random_range(-bound..bound))
        }));
        params.push(Tensor::zeros(&[arch.classes]));
        Ok(DeskNet { arch, params, bn })
    }

    pub fn arch(&self) -> &Arch {
        &self.arch
    }

    pub fn params(&self) -> &[Tensor<S>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<S>] {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &[BatchNormStats<S>] {
        &self.bn
    }

    pub fn set_bn_stats(&mut self, bn: Vec<BatchNormStats<S>>) -> Result<()> {
        if bn.len() != self.bn.len() || bn.iter().zip(&self.bn).any(|(a, b)| a.running_mean.shape() != b.running_mean.shape()) {
            return Err(Error::invalid("batch-norm statistics do not match the model"));
        }
        self.bn = bn;
        Ok(())
    }

    /// Replaces the Top-K layer configuration (weights are unchanged).
    pub fn with_topk(mut self, topk: Option<TopKPlacement>) -> Result<Self> {
        let mut arch = self.arch.clone();
        arch.topk = topk;
        arch.validate()?;
        self.arch = arch;
        Ok(self)
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.params.len());
        for s in 1..=self.arch.widths.len() {
            for p in ["conv.weight", "conv.bias", "bn.weight", "bn.bias"] {
                names.push(format!("stage{s}.{p}"));
            }
        }
        names.push("head.weight".into());
        names.push("head.bias".into());
        names
    }

    pub fn cast<T: Scalar>(&self) -> DeskNet<T> {
        DeskNet {
            arch: self.arch.clone(),
            params: self.params.iter().map(|p| p.cast()).collect(),
            bn: self
                .bn
                .iter()
                .map(|b| BatchNormStats {
                    running_mean: b.running_mean.cast(),
                    running_var: b.running_var.cast(),
                })
                .collect(),
        }
    }

    /// Runs the network on `input` (`[n, 3, S, S]`). Parameters enter the
    /// tape as leaves when `trainable`, otherwise as constants.
    pub fn forward(&self, tape: &mut Tape<S>, input: Var, mode: Mode, trainable: bool) -> Result<Forward<S>> {
        let shape = tape.shape(input).to_vec();
        let s = self.arch.image_size;
        let n = match shape[..] {
            [n, 3, h, w] if h == s && w == s => n,
            _ => {
                return Err(Error::invalid(format!(
                    "model expects [n, 3, {s}, {s}] input, got {shape:?}"
                )))
            }
        };
        let params: Vec<Var> = self
            .params
            .iter()
            .map(|p| {
                if trainable {
                    tape.leaf(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect();
        let mut bn = self.bn.clone();
        let mut stages = Vec::with_capacity(self.arch.widths.len());
        let mut topk_out = None;
        let mut x = input;
        for (i, stats) in bn.iter_mut().enumerate() {
            let p = &params[i * PARAMS_PER_STAGE..(i + 1) * PARAMS_PER_STAGE];
            x = nn::conv2d(tape, x, p[0], p[1], 1, 1)?;
            x = nn::batchnorm2d(tape, x, p[2], p[3], stats, mode)?;
            x = tape.relu(x)?;
            x = nn::maxpool2d(tape, x, 2, 2)?;
            stages.push(x);
            if let Some(place) = self.arch.topk.as_ref().filter(|p| p.stage == i + 1) {
                let (y, mask) = sparsity::topk(tape, x, &place.config)?;
                topk_out = Some((y, mask));
                x = y;
            }
        }
        let flat = tape.reshape(x, &[n, self.arch.head_inputs()])?;
        let h = self.params.len() - 2;
        let logits = nn::linear(tape, flat, params[h], params[h + 1])?;
        Ok(Forward {
            logits,
            params,
            stages,
            topk: topk_out,
            bn,
        })
    }

    /// Logits for a batch of `[3, S, S]` images in eval mode.
    pub fn logits(&self, images: &[Tensor<S>]) -> Result<Tensor<S>> {
        let batch = stack(images)?;
        let mut tape = Tape::new();
        let x = tape.constant(batch);
        let out = self.forward(&mut tape, x, Mode::Eval, false)?;
        Ok(tape.value(out.logits).clone())
    }

    pub fn to_entries(&self) -> Vec<(String, Tensor<S>)> {
        let mut entries = vec![("meta.arch".to_string(), self.arch.encode())];
        entries.extend(self.param_names().into_iter().zip(self.params.iter().cloned()));
        for (i, b) in self.bn.iter().enumerate() {
            entries.push((format!("stage{}.bn.running_mean", i + 1), b.running_mean.clone()));
            entries.push((format!("stage{}.bn.running_var", i + 1), b.running_var.clone()));
        }
        entries
    }

    pub fn from_entries(entries: Vec<(String, Tensor<S>)>) -> Result<Self> {
        let mut map: std::collections::HashMap<String, Tensor<S>> = entries.into_iter().collect();
        let missing = |name: &str| Error::format("checkpoint", format!("missing entry {name}"));
        let arch = Arch::decode(&map.remove("meta.arch").ok_or_else(|| missing("meta.arch"))?)?;
        let template = DeskNet::<S>::new(arch.clone(), 0)?;
        let mut params = Vec::with_capacity(template.params.len());
        for (name, t) in template.param_names().iter().zip(&template.params) {
            let v = map.remove(name).ok_or_else(|| missing(name))?;
            if v.shape() != t.shape() {
                return Err(Error::format(
                    "checkpoint",
                    format!("{name} has shape {:?}, expected {:?}", v.shape(), t.shape()),
                ));
            }
            params.push(v);
        }
        let mut bn = Vec::with_capacity(arch.widths.len());
        for (i, &w) in arch.widths.iter().enumerate() {
            let mut get = |what: &str| {
                let name = format!("stage{}.bn.{what}", i + 1);
                let v = map.remove(&name).ok_or_else(|| missing(&name))?;
                if v.shape() != [w] {
                    return Err(Error::format("checkpoint", format!("{name} has wrong shape")));
                }
                Ok(v)
            };
            bn.push(BatchNormStats {
                running_mean: get("running_mean")?,
                running_var: get("running_var")?,
            });
        }
        if let Some(extra) = map.keys().min() {
            return Err(Error::format("checkpoint", format!("unexpected entry {extra}")));
        }
        if params.iter().any(|p| !p.all_finite()) {
            return Err(Error::NonFinite { op: "checkpoint" });
        }
        Ok(DeskNet { arch, params, bn })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        nn::save_checkpoint(path, &self.to_entries())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_entries(nn::load_checkpoint(path)?)
    }
}

/// Stacks equally shaped tensors along a new leading axis.
pub fn stack<S: Scalar>(items: &[Tensor<S>]) -> Result<Tensor<S>> {
    let first = items.first().ok_or_else(|| Error::invalid("cannot stack an empty batch"))?;
    let mut data = Vec::with_capacity(first.numel() * items.len());
    for t in items {
        if t.shape() != first.shape() {
            return Err(Error::shape("stack", first.shape(), t.shape()));
        }
        data.extend_from_slice(t.data());
    }
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first.shape());
    Tensor::new(shape, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_arch(topk: Option<TopKPlacement>) -> Arch {
        Arch {
            widths: vec![4, 6],
            image_size: 8,
            classes: 3,
            topk,
        }
    }

    fn images(n: usize, s: usize) -> Vec<Tensor<f64>> {
        (0..n)
            .map(|k| Tensor::from_fn(&[3, s, s], |i| ((i * 7 + k * 13) % 17) as f64 / 17.0))
            .collect()
    }

    #[test]
    fn default_topk_keeps_52_of_256() {
        let arch = Arch {
            topk: Some(TopKPlacement {
                stage: 2,
                config: TopKConfig::hard(0.2).unwrap(),
            }),
            ..Arch::default()
        };
        let e = arch.stage_extent(2);
        assert_eq!(e, 16);
        assert_eq!(arch.topk.unwrap().config.k_for(e, e), 52);
    }

    #[test]
    fn forward_shapes_and_mask() {
        let place = TopKPlacement {
            stage: 1,
            config: TopKConfig::hard(0.25).unwrap(),
        };
        let net = DeskNet::<f64>::new(small_arch(Some(place)), 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(stack(&images(2, 8)).unwrap());
        let out = net.forward(&mut tape, x, Mode::Train, true).unwrap();
        assert_eq!(tape.shape(out.logits), [2, 3]);
        assert_eq!(tape.shape(out.stages[0]), [2, 4, 4, 4]);
        assert_eq!(tape.shape(out.stages[1]), [2, 6, 2, 2]);
        let (_, mask) = out.topk.unwrap();
        assert_eq!(mask.k_per_channel(), 4);
        assert!(mask.planes().all(|p| p.iter().filter(|&&b| b).count() == 4));
        assert_ne!(out.bn, net.bn_stats());
    }

    #[test]
    fn eval_forward_leaves_stats() {
        let net = DeskNet::<f64>::new(small_arch(None), 3).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(stack(&images(2, 8)).unwrap());
        let out = net.forward(&mut tape, x, Mode::Eval, false).unwrap();
        assert_eq!(out.bn, net.bn_stats());
    }

    #[test]
    fn checkpoint_round_trip() {
        let place = TopKPlacement {
            stage: 2,
            config: TopKConfig::new(0.2, Variant::MeanReplacement).unwrap(),
        };
        let net = DeskNet::<f32>::new(small_arch(Some(place)), 11).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.sslm");
        net.save(&path).unwrap();
        let back = DeskNet::<f32>::load(&path).unwrap();
        assert_eq!(back, net);
        let imgs: Vec<Tensor<f32>> = images(2, 8).iter().map(|t| t.cast()).collect();
        assert_eq!(back.logits(&imgs).unwrap(), net.logits(&imgs).unwrap());
    }

    #[test]
    fn checkpoint_rejects_missing_entries() {
        let net = DeskNet::<f32>::new(small_arch(None), 1).unwrap();
        let mut entries = net.to_entries();
        entries.retain(|(n, _)| n != "head.bias");
        assert!(DeskNet::<f32>::from_entries(entries).is_err());
    }

    #[test]
    fn seeds_determine_weights() {
        let a = DeskNet::<f32>::new(small_arch(None), 5).unwrap();
        assert_eq!(a, DeskNet::<f32>::new(small_arch(None), 5).unwrap());
        assert_ne!(a, DeskNet::<f32>::new(small_arch(None), 6).unwrap());
    }

    #[test]
    fn rejects_bad_arch() {
        assert!(DeskNet::<f32>::new(Arch { image_size: 10, ..small_arch(None) }, 0).is_err());
        let place = TopKPlacement {
            stage: 3,
            config: TopKConfig::hard(0.2).unwrap(),
        };
        assert!(DeskNet::<f32>::new(small_arch(Some(place)), 0).is_err());
    }
}
