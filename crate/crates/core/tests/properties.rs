use std::collections::BTreeMap;

use otfm::degradation::{blur, degrade_spatial, spectral_match, MtfSpec};
use otfm::flow::{euler_sample, interpolate, reconstruct_endpoint, velocity_target};
use otfm::imagery::{extract_patches, load_raster, save_raster_as, stack_nhwc, synth_scene, BitDepth, RasterImage};
use otfm::metrics::{self, MetricReport, Protocol};
use otfm::networks::{ema_update, ParamSet};
use otfm::tensor::{Tape, Tensor};
use otfm::uot::{regularized_cost, CostConfig, SpectralVariant};
use proptest::prelude::*;

fn image(bands: usize, h: usize, w: usize) -> impl Strategy<Value = RasterImage> {
    prop::collection::vec(0.0f32..1.0, bands * h * w).prop_map(move |d| RasterImage::new(bands, h, w, d).unwrap())
}

fn combine(a: &RasterImage, b: &RasterImage, x: f32, y: f32) -> RasterImage {
    let (bands, h, w) = a.shape();
    RasterImage::new(bands, h, w, a.data().iter().zip(b.data()).map(|(p, q)| x * p + y * q).collect()).unwrap()
}

fn mean(data: &[f32]) -> f64 {
    data.iter().map(|&v| v as f64).sum::<f64>() / data.len() as f64
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn float_rasters_round_trip(img in image(3, 5, 7)) {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("x.otfm");
        save_raster_as(&img, &path, BitDepth::F32).unwrap();
        prop_assert_eq!(load_raster(&path).unwrap(), img);
    }

    #[test]
    fn integer_rasters_round_trip_at_stored_precision(img in image(2, 4, 6)) {
        let dir = tempfile::tempdir().unwrap();
        for (depth, levels) in [(BitDepth::U8, 255.0f32), (BitDepth::U16, 65535.0)] {
            let path = dir.path().join("x.otfm");
            let q = RasterImage::new(2, 4, 6, img.data().iter().map(|v| (v * levels).round() / levels).collect()).unwrap();
            save_raster_as(&q, &path, depth).unwrap();
            let back = load_raster(&path).unwrap();
            prop_assert!(back.max_abs_diff(&q) <= 1e-6);
            save_raster_as(&back, &path, depth).unwrap();
            prop_assert_eq!(load_raster(&path).unwrap(), back);
        }
    }

    #[test]
    fn patch_count_matches_closed_form(size_lr in 4usize..12, patch_lr in 1usize..4, stride_lr in 1usize..4) {
        let t = synth_scene(3, 2, 4 * size_lr, 4).unwrap();
        let patches = extract_patches(&t, 4 * patch_lr, 4 * stride_lr).unwrap();
        let per_axis = (size_lr - patch_lr) / stride_lr + 1;
        prop_assert_eq!(patches.len(), per_axis * per_axis);
        for p in &patches {
            prop_assert_eq!(p.pan.shape(), (1, 4 * patch_lr, 4 * patch_lr));
            prop_assert_eq!(p.lrms.shape(), (2, patch_lr, patch_lr));
        }
    }

    #[test]
    fn synth_scene_is_pure(seed in any::<u64>()) {
        let a = synth_scene(seed, 3, 16, 4).unwrap();
        prop_assert_eq!(a.pan.shape(), (1, 16, 16));
        prop_assert_eq!(a.lrms.shape(), (3, 4, 4));
        prop_assert_eq!(a, synth_scene(seed, 3, 16, 4).unwrap());
    }

    #[test]
    fn blur_and_degradation_are_linear(a in image(4, 16, 16), b in image(4, 16, 16), x in -2.0f32..2.0, y in -2.0f32..2.0) {
        let mtf = MtfSpec::new(vec![0.3, 0.25, 0.2, 0.35], 0.15, 9, 4).unwrap();
        let mix = combine(&a, &b, x, y);
        let lhs = blur(&mix, &mtf).unwrap();
        let rhs = combine(&blur(&a, &mtf).unwrap(), &blur(&b, &mtf).unwrap(), x, y);
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-6);
        let lhs = degrade_spatial(&mix, &mtf).unwrap();
        let rhs = combine(&degrade_spatial(&a, &mtf).unwrap(), &degrade_spatial(&b, &mtf).unwrap(), x, y);
        prop_assert!(lhs.max_abs_diff(&rhs) <= 1e-6);
    }

    #[test]
    fn blur_preserves_band_means(img in image(4, 24, 20)) {
        let out = blur(&img, &MtfSpec::uniform(4, 4)).unwrap();
        for b in 0..4 {
            prop_assert!((mean(out.plane(b)) - mean(img.plane(b))).abs() <= 1e-6);
        }
    }

    #[test]
    fn duplicating_a_band_never_worsens_the_spectral_match(ms in image(3, 8, 8), pan in image(1, 8, 8), dup in 0usize..3) {
        let residual = |pan: &RasterImage, ms: &RasterImage| {
            let (w, _) = spectral_match(pan, ms).unwrap();
            w.combine(ms).iter().zip(pan.data()).map(|(f, &p)| (f - p as f64).powi(2)).sum::<f64>()
        };
        let mut data = ms.data().to_vec();
        data.extend_from_slice(ms.plane(dup));
        let wider = RasterImage::new(4, 8, 8, data).unwrap();
        prop_assert!(residual(&pan, &wider) <= residual(&pan, &ms) + 1e-9);
    }

    #[test]
    fn endpoint_reconstruction_is_t_invariant(
        y0 in prop::collection::vec(-1.0f64..1.0, 1..32),
        shift in prop::collection::vec(-1.0f64..1.0, 32),
    ) {
        let n = y0.len();
        let a = Tensor::new(&[n], y0);
        let b = Tensor::new(&[n], shift[..n].to_vec());
        let v = velocity_target(&a, &b).unwrap().v;
        prop_assert_eq!(&interpolate(&a, &b, 0.0).unwrap().y_t, &b);
        prop_assert_eq!(&interpolate(&a, &b, 1.0).unwrap().y_t, &a);
        for k in 0..=10 {
            let s = interpolate(&a, &b, k as f64 / 10.0).unwrap();
            prop_assert!(reconstruct_endpoint(&s, &v).unwrap().max_abs_diff(&b) <= 1e-6);
        }
    }

    #[test]
    fn regularized_cost_is_the_sum_of_non_negative_terms(
        seed in 0u64..1000,
        noise in image(4, 16, 16),
        lb in 0.0f64..2.0, ls in 0.0f64..2.0, lp in 0.0f64..2.0,
        detail in any::<bool>(),
    ) {
        let t = synth_scene(seed, 4, 16, 4).unwrap();
        let up = otfm::degradation::bicubic_resize(&t.lrms, 4, 1).unwrap();
        let y_hat = combine(&up, &noise, 1.0, 0.1);
        let cfg = CostConfig {
            lambda_base: lb,
            lambda_spatial: ls,
            lambda_spectral: lp,
            spectral_variant: if detail { SpectralVariant::DetailRatio } else { SpectralVariant::Observation },
            ..CostConfig::default()
        };
        let mtf = MtfSpec::new(vec![0.3; 4], 0.15, 9, 4).unwrap();
        let (total, terms) = regularized_cost(&up, &y_hat, &t.pan, &t.lrms, &cfg, &mtf).unwrap();
        prop_assert!(terms.base >= 0.0 && terms.spatial >= 0.0 && terms.spectral >= 0.0);
        prop_assert!((total - (terms.base + terms.spatial + terms.spectral)).abs() <= 1e-12 * total.max(1.0));
        let zero = CostConfig { lambda_spatial: 0.0, lambda_spectral: 0.0, ..cfg.clone() };
        prop_assert_eq!(regularized_cost(&up, &up, &t.pan, &t.lrms, &zero, &mtf).unwrap().0, 0.0);
    }

    #[test]
    fn clamped_exponential_is_convex_and_monotone(a in -40.0f64..40.0, b in -40.0f64..40.0) {
        let f = |z: f64| {
            let tape = Tape::<f64>::new();
            tape.constant(Tensor::from_f64(&[1], &[z])).exp_clamped(30.0).value().item()
        };
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(f(lo) <= f(hi));
        prop_assert!(f(0.5 * (lo + hi)) <= 0.5 * (f(lo) + f(hi)) * (1.0 + 1e-12));
    }

    #[test]
    fn ema_matches_scalar_recursion(live in prop::collection::vec(prop::collection::vec(-3.0f64..3.0, 5), 1..12), decay in 0.0f64..0.999) {
        let mut shadow = ParamSet::new();
        shadow.push("w", Tensor::new(&[5], vec![0.5; 5]));
        let mut oracle = [0.5f64; 5];
        for values in &live {
            let mut l = ParamSet::new();
            l.push("w", Tensor::new(&[5], values.clone()));
            ema_update(&mut shadow, &l, decay).unwrap();
            for (o, v) in oracle.iter_mut().zip(values) {
                *o = decay * *o + (1.0 - decay) * v;
            }
        }
        for (s, o) in shadow.get(0).data().iter().zip(&oracle) {
            prop_assert!((s - o).abs() <= 1e-9);
        }
    }

    #[test]
    fn aggregates_ignore_image_order(values in prop::collection::vec((0.0f64..10.0, 0.0f64..10.0), 1..10), rot in 0usize..10) {
        let rows: Vec<BTreeMap<String, f64>> = values
            .iter()
            .map(|&(s, e)| BTreeMap::from([("sam".to_string(), s), ("ergas".to_string(), e)]))
            .collect();
        let names: Vec<String> = (0..rows.len()).map(|i| format!("img{i}")).collect();
        let a = MetricReport::from_images(Protocol::Reduced, names.clone(), rows.clone());
        let k = rot % rows.len();
        let (mut r2, mut n2) = (rows.clone(), names.clone());
        r2.rotate_left(k);
        n2.rotate_left(k);
        r2.reverse();
        n2.reverse();
        let b = MetricReport::from_images(Protocol::Reduced, n2, r2);
        for (name, (m, s)) in &a.aggregate {
            let (m2, s2) = b.aggregate[name];
            prop_assert!((m - m2).abs() <= 1e-12 && (s - s2).abs() <= 1e-12);
        }
    }

    #[test]
    fn q2n_ignores_an_appended_zero_band(x in image(3, 16, 16), y in image(3, 16, 16)) {
        let pad = |img: &RasterImage| {
            let mut d = img.data().to_vec();
            d.extend(std::iter::repeat(0.0).take(256));
            RasterImage::new(4, 16, 16, d).unwrap()
        };
        let a = metrics::q2n(&x, &y, 8).unwrap();
        prop_assert!((a - metrics::q2n(&pad(&x), &pad(&y), 8).unwrap()).abs() <= 1e-12);
    }

    #[test]
    fn hqnr_decreases_in_each_argument(a in 0.0f64..1.0, b in 0.0f64..1.0, c in 0.0f64..1.0) {
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(metrics::hqnr(hi, c).unwrap() <= metrics::hqnr(lo, c).unwrap());
        prop_assert!(metrics::hqnr(c, hi).unwrap() <= metrics::hqnr(c, lo).unwrap());
    }
}

mod fusion {
    use super::*;
    use otfm::config::RunConfig;
    use otfm::degradation::bicubic_resize;
    use otfm::networks::{MappingNet, MappingNetConfig, PotentialNetConfig};
    use otfm::sampler::FusionModel;
    use otfm::trainer::{condition, Trainer};

    fn perturbed(scale: f32) -> (RunConfig, otfm::checkpoint::Checkpoint) {
        let mut cfg = RunConfig::desk();
        cfg.model = MappingNetConfig::new(4, 8, 2);
        cfg.potential = PotentialNetConfig::new(4, 4);
        let mut ck = Trainer::new(cfg.clone()).unwrap().checkpoint();
        for i in 0..ck.state.theta_ema.len() {
            for (k, v) in ck.state.theta_ema.get_mut(i).data_mut().iter_mut().enumerate() {
                *v += scale * (((k * 37 + i * 11) % 13) as f32 / 6.0 - 1.0);
            }
        }
        (cfg, ck)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(6))]

        #[test]
        fn one_step_fusion_is_one_euler_step_and_in_range(seed in 0u64..10_000, scale in 0.0f32..0.3) {
            let (cfg, ck) = perturbed(scale);
            let t = synth_scene(seed, 4, 16, 4).unwrap();
            let model = FusionModel::new(&ck, true).unwrap();
            let fused = model.fuse(&t.pan, &t.lrms, 1).unwrap();
            prop_assert_eq!(fused.shape(), (4, 16, 16));
            prop_assert!(fused.data().iter().all(|v| (0.0..=1.0).contains(v)));

            let (net, _) = MappingNet::new::<f32>(cfg.model.clone(), cfg.train.seed).unwrap();
            let y0 = bicubic_resize(&t.lrms, 4, 1).unwrap();
            let cond = stack_nhwc::<f32>(&[&condition(&y0, &t.pan).unwrap()]).unwrap();
            let start = stack_nhwc::<f32>(&[&y0]).unwrap();
            let direct = euler_sample(&start, 1, |y, time| {
                let tape = Tape::new();
                let p = ck.state.theta_ema.bind(&tape, false);
                let v = net.forward(&p, &tape.constant(y.clone()), &[time], &tape.constant(cond.clone())).unwrap();
                Ok(v.value().as_ref().clone())
            })
            .unwrap();
            let direct = otfm::imagery::unstack_nhwc(&direct).unwrap().remove(0).clipped();
            prop_assert_eq!(fused.data(), direct.data());
        }
    }
}
