//! Finite-difference gradient cases for the losses and both networks.

use std::rc::Rc;

use otfm::degradation::{bicubic_resize, MtfSpec};
use otfm::imagery::{stack_nhwc, synth_scene};
use otfm::networks::{adaln_combine, BnMode, MappingNet, MappingNetConfig, PotentialNet, PotentialNetConfig};
use otfm::tensor::{Tensor, Var};
use otfm::uot::{mapping_loss, potential_loss, regularized_cost_batch, sample_prior, CostConfig, CostContext, SpectralVariant};

use super::{input_grad_error, param_grad_error, perturb, probe, random_tensor};

const BANDS: usize = 4;
const HR: usize = 16;

fn cost_context(variant: SpectralVariant) -> (CostContext<f64>, Tensor<f64>) {
    let mtf = MtfSpec::new(vec![0.3, 0.28, 0.26, 0.24], 0.15, 9, 4).unwrap();
    let scenes: Vec<_> = (0..2).map(|s| synth_scene(40 + s, BANDS, HR, 4).unwrap()).collect();
    let ups: Vec<_> = scenes.iter().map(|s| bicubic_resize(&s.lrms, 4, 1).unwrap()).collect();
    let priors: Vec<_> = scenes
        .iter()
        .zip(&ups)
        .map(|(s, up)| sample_prior(&s.pan, up, &mtf, variant).unwrap())
        .collect();
    let refs: Vec<_> = priors.iter().collect();
    let ctx = CostContext::new(
        Rc::new(stack_nhwc(&ups.iter().collect::<Vec<_>>()).unwrap()),
        Rc::new(stack_nhwc(&scenes.iter().map(|s| &s.pan).collect::<Vec<_>>()).unwrap()),
        Rc::new(stack_nhwc(&scenes.iter().map(|s| &s.lrms).collect::<Vec<_>>()).unwrap()),
        &refs,
        &mtf,
    )
    .unwrap();
    let hrms: Vec<_> = scenes.iter().map(|s| s.hrms_ref.as_ref().unwrap()).collect();
    let mut y_hat: Tensor<f64> = stack_nhwc(&hrms).unwrap();
    for (v, r) in y_hat.data_mut().iter_mut().zip(random_tensor(&[2 * HR * HR * BANDS], 3, -0.05, 0.05).data()) {
        *v += r;
    }
    (ctx, y_hat)
}

fn regularized_cost(variant: SpectralVariant) -> f64 {
    let (ctx, y_hat) = cost_context(variant);
    let cfg = CostConfig {
        lambda_base: 1.0,
        lambda_spatial: 0.7,
        lambda_spectral: 1.3,
        spectral_variant: variant,
        ..CostConfig::default()
    };
    input_grad_error(&y_hat, 400, |y| probe(&regularized_cost_batch(&ctx, &y, &cfg).unwrap().total, 5))
}

fn mapping_loss_case() -> f64 {
    let x = random_tensor(&[2, 6], 7, -1.0, 1.0);
    input_grad_error(&x, 12, |x| {
        let cost = x.slice_last(0, 3).square().mean_per_sample();
        let pot = x.slice_last(3, 3).mean_per_sample();
        mapping_loss(&cost, &pot)
    })
}

fn potential_loss_case() -> f64 {
    let cfg = CostConfig::default();
    let x = random_tensor(&[3, 3], 8, -2.0, 2.0);
    input_grad_error(&x, 9, |x| {
        let col = |k| x.slice_last(k, 1).reshape(&[3]);
        potential_loss(&col(0).square(), &col(1), &col(2), &cfg)
    })
}

fn adaln_case() -> f64 {
    let x = random_tensor(&[5, 1, 2, 2, 3], 9, -1.0, 1.0).reshaped(&[1, 2, 2, 15]);
    input_grad_error(&x, 60, |v| {
        let part = |k: usize| v.slice_last(3 * k, 3);
        probe(&adaln_combine(&part(0), &part(1), &part(2), &part(3), &part(4)), 10)
    })
}

fn small_mapping() -> (MappingNet, otfm::networks::ParamSet<f64>) {
    let mut cfg = MappingNetConfig::new(BANDS, 8, 2);
    cfg.heads = 2;
    cfg.attention_window = 3;
    let (net, mut ps) = MappingNet::new::<f64>(cfg, 3).unwrap();
    perturb(&mut ps, 0.1, 4);
    (net, ps)
}

fn mapping_inputs() -> (Tensor<f64>, Tensor<f64>) {
    (
        random_tensor(&[1, HR, HR, BANDS], 11, 0.0, 1.0),
        random_tensor(&[1, HR, HR, BANDS + 1], 12, 0.0, 1.0),
    )
}

fn mapping_forward_params() -> f64 {
    let (net, ps) = small_mapping();
    let (y, c) = mapping_inputs();
    param_grad_error(&ps, 3, |p| {
        let tape = p[0].tape();
        probe(&net.forward(p, &tape.constant(y.clone()), &[0.4], &tape.constant(c.clone())).unwrap(), 13)
    })
}

fn mapping_forward_input() -> f64 {
    let (net, ps) = small_mapping();
    let (y, c) = mapping_inputs();
    input_grad_error(&y, 64, |yv: Var<'_, f64>| {
        let p = ps.bind(yv.tape(), false);
        probe(&net.forward(&p, &yv, &[0.7], &yv.tape().constant(c.clone())).unwrap(), 14)
    })
}

fn small_potential() -> (PotentialNet, otfm::networks::ParamSet<f64>, otfm::networks::ParamSet<f64>) {
    let (net, mut ps, bn) = PotentialNet::new::<f64>(PotentialNetConfig::new(BANDS, 4), 5).unwrap();
    perturb(&mut ps, 0.05, 6);
    (net, ps, bn)
}

fn potential_forward_params() -> f64 {
    let (net, ps, bn) = small_potential();
    let y = random_tensor(&[2, HR, HR, BANDS], 15, 0.0, 1.0);
    param_grad_error(&ps, 4, |p| {
        let yv = p[0].tape().constant(y.clone());
        probe(&net.forward(p, &bn, &yv, &[0.2, 0.9], None, BnMode::Train).unwrap().0, 16)
    })
}

fn potential_forward_input() -> f64 {
    let (net, ps, bn) = small_potential();
    let y = random_tensor(&[2, HR, HR, BANDS], 17, 0.0, 1.0);
    input_grad_error(&y, 64, |yv: Var<'_, f64>| {
        let p = ps.bind(yv.tape(), false);
        probe(&net.forward(&p, &bn, &yv, &[0.2, 0.9], None, BnMode::Train).unwrap().0, 18)
    })
}

/// `(name, relative error)` for every case.
pub fn all_cases() -> Vec<(&'static str, f64)> {
    vec![
        ("regularized_cost_observation", regularized_cost(SpectralVariant::Observation)),
        ("regularized_cost_detail_ratio", regularized_cost(SpectralVariant::DetailRatio)),
        ("mapping_loss", mapping_loss_case()),
        ("potential_loss", potential_loss_case()),
        ("adaln_block", adaln_case()),
        ("mapping_forward_params", mapping_forward_params()),
        ("mapping_forward_input", mapping_forward_input()),
        ("potential_forward_params", potential_forward_params()),
        ("potential_forward_input", potential_forward_input()),
    ]
}
