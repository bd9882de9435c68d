#![allow(dead_code)]

use ctxpress_core::autograd::{ParamId, TapPerturbation};
use ctxpress_core::model::{Model, ModelConfig};
use ctxpress_core::tokenizer::BOS;
use ctxpress_core::train::{batch_gradient, batch_loss, TokenItem, TrainConfig};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FD_STEP: f64 = 1e-5;
/// Gradients below this magnitude are compared on an absolute scale.
pub const REL_FLOOR: f64 = 1e-5;

pub fn tiny_config(seed: u64) -> ModelConfig {
    ModelConfig { enc_layers: 1, dec_layers: 1, d_model: 8, ffn_dim: 16, heads: 2, vocab: 16, max_seq: 6, seed }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(REL_FLOOR)
}

fn ids(rng: &mut ChaCha8Rng, lo: usize, hi: usize) -> Vec<usize> {
    let n = rng.gen_range(lo..=hi);
    (0..n).map(|_| rng.gen_range(3..16)).collect()
}

#[derive(Debug, Default, Clone, Copy)]
pub struct GradErrors {
    pub loss: f64,
    pub target_params: f64,
    pub target_maps: f64,
}

/// Central-difference check of the joint loss and the Grad-CAM target logit
/// for one random tiny model and batch.
pub fn gradient_errors(seed: u64) -> GradErrors {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9);
    let model = Model::new(tiny_config(seed)).unwrap();
    let docs: Vec<Vec<usize>> = (0..3).map(|_| ids(&mut rng, 2, 6)).collect();
    let instruction = ids(&mut rng, 1, 3);
    let batch = vec![
        TokenItem {
            instruction: instruction.clone(),
            candidates: docs.clone(),
            lm: Some((docs[0].clone(), ids(&mut rng, 1, 2))),
        },
        TokenItem { instruction: ids(&mut rng, 1, 2), candidates: Vec::new(), lm: Some((docs[1].clone(), ids(&mut rng, 1, 2))) },
    ];
    let cfg = TrainConfig::default();
    let analytic = batch_gradient(&model, &batch, &cfg).unwrap();

    let mut prefix = vec![BOS];
    prefix.extend(ids(&mut rng, 1, 4));
    let token = rng.gen_range(0..16);
    let target = model.document_target_gradients(&docs[2], &prefix, token).unwrap();

    let mut errs = GradErrors::default();
    let mut probe = model.clone();
    for pid in model.params().ids() {
        for e in 0..model.params().get(pid).numel() {
            let orig = model.params().get(pid).data()[e];
            let eval = |probe: &mut Model, x: f64| {
                probe.params_mut().get_mut(pid).data_mut()[e] = x;
                (batch_loss(probe, &batch, &cfg).unwrap(), probe.document_target_logit(&docs[2], &prefix, token, None).unwrap())
            };
            let (lp, tp) = eval(&mut probe, orig + FD_STEP);
            let (lm, tm) = eval(&mut probe, orig - FD_STEP);
            probe.params_mut().get_mut(pid).data_mut()[e] = orig;
            let fd_loss = (lp - lm) / (2.0 * FD_STEP);
            let fd_target = (tp - tm) / (2.0 * FD_STEP);
            errs.loss = errs.loss.max(rel_err(analytic[pid.0].data()[e], fd_loss));
            errs.target_params = errs.target_params.max(rel_err(target.params[pid.0].data()[e], fd_target));
        }
    }
    for (tap, grad) in target.maps.iter().enumerate() {
        for element in 0..grad.numel() {
            let at = |delta| {
                model.document_target_logit(&docs[2], &prefix, token, Some(TapPerturbation { tap, element, delta })).unwrap()
            };
            let fd = (at(FD_STEP) - at(-FD_STEP)) / (2.0 * FD_STEP);
            errs.target_maps = errs.target_maps.max(rel_err(grad.data()[element], fd));
        }
    }
    errs
}

pub fn param_count(model: &Model) -> usize {
    model.params().ids().map(|p: ParamId| model.params().get(p).numel()).sum()
}
