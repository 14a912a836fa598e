//! Image-space analysis tools: Gram-matrix texture synthesis with Top-K
//! ablation, masked-activation reconstruction, and Top-K mask dumps with
//! their connectivity statistic.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Function, Tape, Var, VjpContext};
use crate::error::{Error, Result};
use crate::imageio;
use crate::model::DeskNet;
use crate::nn::{LayerActivation, Mode};
use crate::optim::{lbfgs_minimize, LbfgsState};
use crate::sparsity::{topk_forward, TopKConfig, TopKMask};
use crate::tensor::{gemm_acc, transpose, Scalar, Tensor};

/// `(1/M)·X·Xᵀ` for `X` viewed as `[c, M]`, `M = h·w`.
pub fn gram<S: Scalar>(x: &Tensor<S>) -> Result<Tensor<S>> {
    let (c, m) = gram_dims(x.shape())?;
    Ok(Tensor::from_parts(vec![c, c], gram_raw(x.data(), c, m)))
}

fn gram_dims(shape: &[usize]) -> Result<(usize, usize)> {
    match *shape {
        [c, h, w] | [1, c, h, w] => Ok((c, h * w)),
        _ => Err(Error::invalid(format!("gram expects [c,h,w], got {shape:?}"))),
    }
}

fn gram_raw<S: Scalar>(x: &[S], c: usize, m: usize) -> Vec<S> {
    let xt = transpose(c, m, x);
    let mut g = vec![S::zero(); c * c];
    gemm_acc(c, m, c, x, &xt, &mut g);
    let inv = S::one() / S::lit(m as f64);
    g.iter_mut().for_each(|v| *v = *v * inv);
    g
}

struct GramOp {
    c: usize,
    m: usize,
}

impl<S: Scalar> Function<S> for GramOp {
    fn name(&self) -> &'static str {
        "gram"
    }

    fn vjp(&self, ctx: &VjpContext<'_, S>, up: &Tensor<S>) -> Result<Vec<Option<Tensor<S>>>> {
        let (c, m) = (self.c, self.m);
        let u = up.data();
        let inv = S::one() / S::lit(m as f64);
        let sym: Vec<S> = (0..c * c)
            .map(|i| (u[i] + u[(i % c) * c + i / c]) * inv)
            .collect();
        let mut gx = vec![S::zero(); c * m];
        gemm_acc(c, c, m, &sym, ctx.input(0).data(), &mut gx);
        Ok(vec![Some(Tensor::from_parts(ctx.input(0).shape().to_vec(), gx))])
    }
}

/// Records [`gram`] on the tape.
pub fn gram_var<S: Scalar>(tape: &mut Tape<S>, x: Var) -> Result<Var> {
    let (c, m) = gram_dims(tape.shape(x))?;
    let value = Tensor::from_parts(vec![c, c], gram_raw(tape.value(x).data(), c, m));
    tape.record(&[x], value, GramOp { c, m })
}

/// Pooled stage outputs (before any Top-K layer) of one `[3, S, S]` image,
/// numbered from 1.
pub fn layer_activations<S: Scalar>(model: &DeskNet<S>, image: &Tensor<S>) -> Result<Vec<LayerActivation<S>>> {
    let mut tape = Tape::new();
    let x = tape.constant(batch_of_one(image)?);
    let out = model.forward(&mut tape, x, Mode::Eval, false)?;
    Ok(out
        .stages
        .iter()
        .enumerate()
        .map(|(i, &v)| LayerActivation {
            layer: i + 1,
            value: tape.value(v).clone(),
        })
        .collect())
}

fn batch_of_one<S: Scalar>(image: &Tensor<S>) -> Result<Tensor<S>> {
    let mut shape = vec![1];
    shape.extend_from_slice(image.shape());
    image.reshape(&shape)
}

fn check_layers<S: Scalar>(model: &DeskNet<S>, layers: &[usize]) -> Result<()> {
    let n = model.arch().widths.len();
    if layers.is_empty() {
        return Err(Error::invalid("at least one layer is required"));
    }
    if let Some(&bad) = layers.iter().find(|&&l| l == 0 || l > n) {
        return Err(Error::invalid(format!("layer {bad} outside 1..={n}")));
    }
    Ok(())
}

fn check_image<S: Scalar>(model: &DeskNet<S>, image: &Tensor<S>) -> Result<()> {
    let s = model.arch().image_size;
    if image.shape() != [3, s, s] {
        return Err(Error::invalid(format!(
            "image must be [3, {s}, {s}], got {:?}",
            image.shape()
        )));
    }
    Ok(())
}

/// Which responses enter a Gram matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthesisMode {
    WithTopK,
    WithoutTopK,
}

impl SynthesisMode {
    pub fn as_str(self) -> &'static str {
        match self {
            SynthesisMode::WithTopK => "with_topk",
            SynthesisMode::WithoutTopK => "without_topk",
        }
    }
}

impl fmt::Display for SynthesisMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SynthesisMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "with_topk" => Ok(SynthesisMode::WithTopK),
            "without_topk" => Ok(SynthesisMode::WithoutTopK),
            other => Err(Error::invalid(format!("unknown synthesis mode {other:?}"))),
        }
    }
}

/// Which part of an activation a Gram matrix sees.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GramView {
    All,
    NonTopK,
    TopKOnly,
}

impl From<SynthesisMode> for GramView {
    fn from(m: SynthesisMode) -> Self {
        match m {
            SynthesisMode::WithTopK => GramView::All,
            SynthesisMode::WithoutTopK => GramView::NonTopK,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthesisJob {
    pub target: Tensor<f64>,
    /// Stage numbers (1-based).
    pub layers: Vec<usize>,
    pub mode: SynthesisMode,
    pub steps: usize,
    pub lr: f64,
    /// Fraction whose responses are zeroed in [`SynthesisMode::WithoutTopK`].
    pub rho: f64,
    /// Seeds the uniform-noise starting image.
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct OptimizedImage {
    pub image: Tensor<f64>,
    /// Objective at the start followed by each accepted step.
    pub trace: Vec<f64>,
}

impl OptimizedImage {
    pub fn initial_loss(&self) -> f64 {
        self.trace[0]
    }

    pub fn final_loss(&self) -> f64 {
        *self.trace.last().expect("trace is never empty")
    }
}

/// Uniform noise in `[0, 1]`.
pub fn noise_image(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| rng.random::<f64>())
}

fn view_activation(tape: &mut Tape<f64>, act: Var, view: GramView, cfg: &TopKConfig) -> Result<Var> {
    let keep = match view {
        GramView::All => return Ok(act),
        GramView::NonTopK => topk_forward(tape.value(act), cfg)?.1.complement_tensor(),
        GramView::TopKOnly => topk_forward(tape.value(act), cfg)?.1.to_tensor(),
    };
    tape.mul_const(act, &keep)
}

/// Target Gram matrices for `layers` under `view`.
fn target_grams(model: &DeskNet<f64>, target: &Tensor<f64>, layers: &[usize], view: GramView, cfg: &TopKConfig) -> Result<Vec<Tensor<f64>>> {
    let mut tape = Tape::new();
    let x = tape.constant(batch_of_one(target)?);
    let out = model.forward(&mut tape, x, Mode::Eval, false)?;
    layers
        .iter()
        .map(|&l| {
            let a = view_activation(&mut tape, out.stages[l - 1], view, cfg)?;
            gram(tape.value(a))
        })
        .collect()
}

/// `Σ_l ‖Gr(X̃_l(image)) − G_l‖²_F` and its gradient wrt the image.
fn gram_objective(
    model: &DeskNet<f64>,
    image: &Tensor<f64>,
    layers: &[usize],
    targets: &[Tensor<f64>],
    view: GramView,
    cfg: &TopKConfig,
) -> Result<(f64, Tensor<f64>)> {
    let mut tape = Tape::new();
    let img = tape.leaf(image.clone());
    let x = tape.reshape(img, &batch_of_one(image)?.shape().to_vec())?;
    let out = model.forward(&mut tape, x, Mode::Eval, false)?;
    let mut total: Option<Var> = None;
    for (&l, t) in layers.iter().zip(targets) {
        let a = view_activation(&mut tape, out.stages[l - 1], view, cfg)?;
        let g = gram_var(&mut tape, a)?;
        let tv = tape.constant(t.clone());
        let d = tape.sub(g, tv)?;
        let e = tape.sum_squares(d)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, e)?,
            None => e,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("no layers"))?;
    let value = tape.value(total).item()?;
    let grads = tape.backward(total)?;
    let g = grads.wrt(img).unwrap_or_else(|| Tensor::zeros(image.shape()));
    Ok((value, g))
}

/// Gram distance between `image` and `target` under `view`, without
/// optimizing anything.
pub fn gram_loss(
    model: &DeskNet<f64>,
    image: &Tensor<f64>,
    target: &Tensor<f64>,
    layers: &[usize],
    view: GramView,
    rho: f64,
) -> Result<f64> {
    check_layers(model, layers)?;
    check_image(model, image)?;
    check_image(model, target)?;
    let cfg = TopKConfig::hard(rho)?;
    let targets = target_grams(model, target, layers, view, &cfg)?;
    Ok(gram_objective(model, image, layers, &targets, view, &cfg)?.0)
}

/// Optimizes a uniform-noise image so its Gram statistics match the
/// target's, clamping pixels to `[0, 1]` throughout.
pub fn texture_synthesize(model: &DeskNet<f64>, job: &SynthesisJob) -> Result<OptimizedImage> {
    check_layers(model, &job.layers)?;
    check_image(model, &job.target)?;
    let cfg = TopKConfig::hard(job.rho)?;
    let view = GramView::from(job.mode);
    let targets = target_grams(model, &job.target, &job.layers, view, &cfg)?;
    let init = noise_image(job.target.shape(), job.seed);
    let mut state = LbfgsState::new(job.lr, job.steps).with_bounds(0.0, 1.0);
    let r = lbfgs_minimize(
        |img| gram_objective(model, img, &job.layers, &targets, view, &cfg),
        &init,
        &mut state,
    )?;
    Ok(OptimizedImage {
        image: r.x,
        trace: r.trace,
    })
}

/// Per-layer mask used by [`reconstruct`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskMode {
    TopK,
    NonTopK,
    Identity,
}

impl MaskMode {
    pub fn as_str(self) -> &'static str {
        match self {
            MaskMode::TopK => "topk_mask",
            MaskMode::NonTopK => "non_topk_mask",
            MaskMode::Identity => "identity_mask",
        }
    }
}

impl fmt::Display for MaskMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "topk_mask" | "topk" => Ok(MaskMode::TopK),
            "non_topk_mask" | "non_topk" => Ok(MaskMode::NonTopK),
            "identity_mask" | "identity" => Ok(MaskMode::Identity),
            other => Err(Error::invalid(format!("unknown mask mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ReconstructionJob {
    pub target: Tensor<f64>,
    /// `(stage number, mask)` pairs, one per layer.
    pub layers: Vec<(usize, MaskMode)>,
    pub steps: usize,
    pub lr: f64,
    pub rho: f64,
    /// Mask only the target term, leaving the image's activations whole.
    pub asymmetric: bool,
    pub seed: u64,
}

/// Matches masked activations of a noise image to those of the target:
/// `Σ_l ‖M_l⊙X_l(I) − M_l⊙X_l(T)‖²`, with `M_l` selected on the target's
/// activations and held fixed.
pub fn reconstruct(model: &DeskNet<f64>, job: &ReconstructionJob) -> Result<OptimizedImage> {
    let layers: Vec<usize> = job.layers.iter().map(|p| p.0).collect();
    check_layers(model, &layers)?;
    check_image(model, &job.target)?;
    let mut seen = layers.clone();
    seen.sort_unstable();
    seen.dedup();
    if seen.len() != layers.len() {
        return Err(Error::invalid("each layer takes exactly one mask mode"));
    }
    let cfg = TopKConfig::hard(job.rho)?;
    let acts = layer_activations(model, &job.target)?;
    let mut masks = Vec::new();
    let mut targets = Vec::new();
    for &(l, mode) in &job.layers {
        let a = &acts[l - 1].value;
        let m = match mode {
            MaskMode::Identity => Tensor::ones(a.shape()),
            MaskMode::TopK => topk_forward(a, &cfg)?.1.to_tensor(),
            MaskMode::NonTopK => topk_forward(a, &cfg)?.1.complement_tensor(),
        };
        targets.push(a.zip_map(&m, "mask", |x, k| x * k)?);
        masks.push(m);
    }
    let objective = |img: &Tensor<f64>| -> Result<(f64, Tensor<f64>)> {
        let mut tape = Tape::new();
        let leaf = tape.leaf(img.clone());
        let x = tape.reshape(leaf, &batch_of_one(img)?.shape().to_vec())?;
        let out = model.forward(&mut tape, x, Mode::Eval, false)?;
        let mut total: Option<Var> = None;
        for ((&l, m), t) in layers.iter().zip(&masks).zip(&targets) {
            let mut a = out.stages[l - 1];
            if !job.asymmetric {
                a = tape.mul_const(a, m)?;
            }
            let tv = tape.constant(t.clone());
            let d = tape.sub(a, tv)?;
            let e = tape.sum_squares(d)?;
            total = Some(match total {
                Some(acc) => tape.add(acc, e)?,
                None => e,
            });
        }
        let total = total.ok_or_else(|| Error::invalid("no layers"))?;
        let value = tape.value(total).item()?;
        let g = tape.backward(total)?.wrt(leaf).unwrap_or_else(|| Tensor::zeros(img.shape()));
        Ok((value, g))
    };
    let init = noise_image(job.target.shape(), job.seed);
    let mut state = LbfgsState::new(job.lr, job.steps).with_bounds(0.0, 1.0);
    let r = lbfgs_minimize(objective, &init, &mut state)?;
    Ok(OptimizedImage {
        image: r.x,
        trace: r.trace,
    })
}

/// Sum of Sobel gradient magnitudes over all channels and interior pixels.
pub fn sobel_energy<S: Scalar>(image: &Tensor<S>) -> Result<f64> {
    let [c, h, w] = image.shape()[..] else {
        return Err(Error::invalid("sobel_energy expects [c, h, w]"));
    };
    let d = image.to_f64_vec();
    let mut total = 0.0;
    for ch in 0..c {
        let p = |y: usize, x: usize| d[ch * h * w + y * w + x];
        for y in 1..h.saturating_sub(1) {
            for x in 1..w.saturating_sub(1) {
                let gx = p(y - 1, x + 1) + 2.0 * p(y, x + 1) + p(y + 1, x + 1)
                    - p(y - 1, x - 1)
                    - 2.0 * p(y, x - 1)
                    - p(y + 1, x - 1);
                let gy = p(y + 1, x - 1) + 2.0 * p(y + 1, x) + p(y + 1, x + 1)
                    - p(y - 1, x - 1)
                    - 2.0 * p(y - 1, x)
                    - p(y - 1, x + 1);
                total += (gx * gx + gy * gy).sqrt();
            }
        }
    }
    Ok(total)
}

/// Sizes of the 4-connected components of the set bits, largest first.
pub fn component_sizes(plane: &[bool], h: usize, w: usize) -> Result<Vec<usize>> {
    if plane.len() != h * w {
        return Err(Error::invalid(format!(
            "plane has {} cells, expected {h}x{w}",
            plane.len()
        )));
    }
    let mut seen = vec![false; plane.len()];
    let mut sizes = Vec::new();
    let mut stack = Vec::new();
    for start in 0..plane.len() {
        if !plane[start] || seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut size = 0;
        while let Some(i) = stack.pop() {
            size += 1;
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if plane[j] && !seen[j] {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        sizes.push(size);
    }
    sizes.sort_unstable_by(|a, b| b.cmp(a));
    Ok(sizes)
}

/// Largest 4-connected component divided by the number of set bits.
pub fn connectivity(plane: &[bool], h: usize, w: usize) -> Result<f64> {
    let sizes = component_sizes(plane, h, w)?;
    let k: usize = sizes.iter().sum();
    if k == 0 {
        return Err(Error::invalid("connectivity of an empty mask"));
    }
    Ok(sizes[0] as f64 / k as f64)
}

/// Per-channel connectivity of a `[c, h, w]` or `[1, c, h, w]` mask.
pub fn mask_connectivity(mask: &TopKMask) -> Result<Vec<f64>> {
    let r = mask.shape().len();
    let (h, w) = (mask.shape()[r - 2], mask.shape()[r - 1]);
    mask.planes().map(|p| connectivity(p, h, w)).collect()
}

#[derive(Debug, Clone)]
pub struct MaskDump {
    pub paths: Vec<PathBuf>,
    pub k: usize,
    pub connectivity: Vec<f64>,
}

/// Top-K mask of `layer` for one image, from the model's own Top-K layer.
pub fn topk_mask<S: Scalar>(model: &DeskNet<S>, image: &Tensor<S>, layer: usize) -> Result<TopKMask> {
    check_image(model, image)?;
    match model.arch().topk {
        Some(p) if p.stage == layer => {}
        _ => return Err(Error::invalid(format!("layer {layer} has no Top-K layer"))),
    }
    let mut tape = Tape::new();
    let x = tape.constant(batch_of_one(image)?);
    let out = model.forward(&mut tape, x, Mode::Eval, false)?;
    Ok(out.topk.expect("configured Top-K layer ran").1)
}

/// File name of channel `c`'s mask.
pub fn mask_file_name(tag: &str, layer: usize, channel: usize) -> String {
    format!("{tag}_layer{layer}_ch{channel:03}.png")
}

/// Writes one 8-bit PNG per channel (255 = kept, 0 = dropped) into `dir`.
pub fn dump_topk_masks<S: Scalar>(
    model: &DeskNet<S>,
    image: &Tensor<S>,
    layer: usize,
    tag: &str,
    dir: &Path,
) -> Result<MaskDump> {
    let mask = topk_mask(model, image, layer)?;
    let r = mask.shape().len();
    let (h, w) = (mask.shape()[r - 2], mask.shape()[r - 1]);
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut paths = Vec::new();
    for (c, plane) in mask.planes().enumerate() {
        let path = dir.join(mask_file_name(tag, layer, c));
        let px: Vec<u8> = plane.iter().map(|&b| if b { 255 } else { 0 }).collect();
        imageio::save_gray(&path, w, h, &px)?;
        paths.push(path);
    }
    Ok(MaskDump {
        paths,
        k: mask.k_per_channel(),
        connectivity: mask_connectivity(&mask)?,
    })
}

/// Writes a `step,loss` CSV.
pub fn write_trace(path: impl AsRef<Path>, trace: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut s = String::from("step,loss\n");
    for (i, v) in trace.iter().enumerate() {
        s.push_str(&format!("{i},{v:e}\n"));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}
