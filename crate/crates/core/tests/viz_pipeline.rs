//! Synthesis and reconstruction runs on a small untrained network.

use sslab::data::{generate_sample, Split};
use sslab::model::{Arch, DeskNet};
use sslab::viz::{
    gram_loss, reconstruct, sobel_energy, texture_synthesize, GramView, MaskMode, ReconstructionJob, SynthesisJob,
    SynthesisMode,
};
use sslab::Tensor;

const SIZE: usize = 32;

fn model() -> DeskNet<f64> {
    let arch = Arch {
        widths: vec![6, 8, 8, 8],
        image_size: SIZE,
        ..Arch::default()
    };
    DeskNet::new(arch, 3).unwrap()
}

fn target(i: usize) -> Tensor<f64> {
    generate_sample(Split::Clean, i, 7, SIZE).unwrap().1.cast()
}

fn synth(model: &DeskNet<f64>, target: &Tensor<f64>, mode: SynthesisMode, steps: usize) -> sslab::viz::OptimizedImage {
    let job = SynthesisJob {
        target: target.clone(),
        layers: vec![1, 2],
        mode,
        steps,
        lr: 1.0,
        rho: 0.2,
        seed: 11,
    };
    texture_synthesize(model, &job).unwrap()
}

#[test]
fn flat_target_is_matched() {
    let m = model();
    let r = synth(&m, &Tensor::full(&[3, SIZE, SIZE], 0.5), SynthesisMode::WithTopK, 100);
    assert!(r.final_loss() < 1e-4 * r.initial_loss(), "{} vs {}", r.final_loss(), r.initial_loss());
}

#[test]
fn without_topk_leaves_topk_statistics_unconstrained() {
    let m = model();
    let t = target(2);
    let with = synth(&m, &t, SynthesisMode::WithTopK, 60);
    let without = synth(&m, &t, SynthesisMode::WithoutTopK, 60);
    let topk_only = |img: &Tensor<f64>| gram_loss(&m, img, &t, &[1, 2], GramView::TopKOnly, 0.2).unwrap();
    assert!(topk_only(&without.image) > topk_only(&with.image));
}

fn rec(model: &DeskNet<f64>, target: &Tensor<f64>, mask: MaskMode, rho: f64) -> sslab::viz::OptimizedImage {
    let job = ReconstructionJob {
        target: target.clone(),
        layers: vec![(1, mask), (2, mask)],
        steps: 100,
        lr: 1.0,
        rho,
        asymmetric: false,
        seed: 5,
    };
    reconstruct(model, &job).unwrap()
}

#[test]
fn identity_reconstruction_converges() {
    let m = model();
    let r = rec(&m, &target(0), MaskMode::Identity, 0.2);
    assert!(r.final_loss() < 0.05 * r.initial_loss());
    assert!(r.trace.windows(2).all(|w| w[1] <= w[0]));
}

#[test]
fn full_topk_mask_matches_identity_objective() {
    let m = model();
    let t = target(1);
    let a = rec(&m, &t, MaskMode::TopK, 1.0);
    let b = rec(&m, &t, MaskMode::Identity, 1.0);
    assert_eq!(a.trace, b.trace);
    assert_eq!(a.image, b.image);
}

#[test]
fn edge_energy_of_masked_reconstructions() {
    let m = model();
    for i in 0..3 {
        let t = target(i);
        let top = sobel_energy(&rec(&m, &t, MaskMode::TopK, 0.2).image).unwrap();
        let rest = sobel_energy(&rec(&m, &t, MaskMode::NonTopK, 0.2).image).unwrap();
        println!("target {i}: edge energy topk_mask {top:.2} non_topk_mask {rest:.2} target {:.2}", sobel_energy(&t).unwrap());
        assert!(top.is_finite() && rest.is_finite());
    }
}
