use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use ram3d::checkpoint::Checkpoint;
use ram3d::field::{Field, FieldConfig, FieldOutput};
use ram3d::guidance::{cfg_combine, schedule_t, Latent, NoiseSchedule};
use ram3d::metrics::cosine;
use ram3d::objectives::{depth_loss, recon_loss};
use ram3d::render::{composite, importance_samples, stratified_samples, Ray};
use ram3d::scene::{compute_crop, compute_halo, dilate_mask, CropMode, ImageFrame, MaskFrame};

fn tiny_field() -> Field {
    Field::new(FieldConfig {
        levels: 3,
        table_size_log2: 8,
        base_resolution: 2,
        level_scale: 2.0,
        mlp_hidden: 8,
        ..FieldConfig::default()
    })
    .unwrap()
}

fn ray(near: f64, far: f64) -> Ray {
    Ray {
        origin: [0.0, 0.0, 3.0],
        direction: [0.0, 0.0, -1.0],
        t_near: near,
        t_far: far,
    }
}

fn mask_strategy(w: usize, h: usize) -> impl Strategy<Value = MaskFrame> {
    prop::collection::vec(any::<bool>(), w * h).prop_map(move |bits| MaskFrame::from_fn(w, h, |r, c| bits[r * w + c]))
}

fn sample_outputs(n: usize) -> impl Strategy<Value = (Vec<f64>, Vec<FieldOutput>)> {
    (
        prop::collection::vec(0.0f64..1.0, n),
        prop::collection::vec((0.0f64..20.0, 0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0), n),
    )
        .prop_map(|(mut t, s)| {
            t.sort_by(|a, b| a.partial_cmp(b).unwrap());
            let t = t.iter().map(|x| 2.0 + 2.0 * x).collect();
            let s = s
                .into_iter()
                .map(|(d, r, g, b)| FieldOutput { color: [r, g, b], density: d })
                .collect();
            (t, s)
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn field_outputs_stay_in_range(seed in any::<u64>(), p in prop::array::uniform3(-2.0f64..2.0), scale in 0.0f64..50.0) {
        let field = tiny_field();
        let mut params = field.init_params(seed);
        for v in &mut params.values {
            *v *= scale;
        }
        let out = field.forward(p, &params).unwrap();
        prop_assert!(out.density >= 0.0);
        prop_assert!(out.color.iter().all(|c| (0.0..=1.0).contains(c)));
    }

    #[test]
    fn weights_sum_to_alpha((t, s) in sample_outputs(16)) {
        let r = composite(&t, 4.5, &s);
        let sum: f64 = r.weights.iter().sum();
        prop_assert!((sum - r.alpha).abs() < 1e-12);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&r.alpha));
        prop_assert!(r.weights.iter().all(|w| *w >= 0.0));
        if r.alpha > 1e-6 {
            prop_assert!(r.depth >= t[0] - 1e-9 && r.depth <= 4.5 + 1e-9);
        }
    }

    #[test]
    fn zero_density_sample_changes_nothing((t, s) in sample_outputs(12), at in 0usize..12, frac in 0.01f64..0.99) {
        // split interval `at` with an empty sample
        let next = if at + 1 < t.len() { t[at + 1] } else { 4.5 };
        let mut t2 = t.clone();
        let mut s2 = s.clone();
        t2.insert(at + 1, t[at] + frac * (next - t[at]));
        s2.insert(at + 1, FieldOutput { color: [0.3, 0.6, 0.9], density: 0.0 });
        // each sample owns the interval up to the next one, so the split only
        // preserves optical depth when the sample before it is empty too
        s2[at].density = 0.0;
        let mut s3 = s.clone();
        s3[at].density = 0.0;
        let reference = composite(&t, 4.5, &s3);
        let split = composite(&t2, 4.5, &s2);
        prop_assert!((split.alpha - reference.alpha).abs() < 1e-6);
        for k in 0..3 {
            prop_assert!((split.rgb[k] - reference.rgb[k]).abs() < 1e-6);
        }
    }

    #[test]
    fn stratified_samples_are_sorted_and_bounded(n in 1usize..64, seed in any::<u64>(), near in 0.1f64..2.0, len in 0.1f64..5.0) {
        let r = ray(near, near + len);
        let s = stratified_samples(&r, n, seed, true);
        prop_assert_eq!(s.t_values.len(), n);
        prop_assert!(s.t_values.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(s.t_values.iter().all(|t| *t >= near && *t <= near + len));
    }

    #[test]
    fn importance_samples_are_sorted_and_bounded(n in 1usize..32, seed in any::<u64>(), w in prop::collection::vec(0.0f64..1.0, 16)) {
        let r = ray(2.0, 6.0);
        let coarse = stratified_samples(&r, 16, seed, true);
        let s = importance_samples(&r, &coarse, &w, n, seed ^ 1);
        prop_assert_eq!(s.t_values.len(), 16 + n);
        prop_assert!(s.t_values.windows(2).all(|w| w[0] <= w[1]));
        prop_assert!(s.t_values.iter().all(|t| *t >= 2.0 && *t <= 6.0));
    }

    #[test]
    fn halo_partitions_the_frame(mask in mask_strategy(12, 10), radius in 0usize..3, width in 0usize..4) {
        let dilated = dilate_mask(&mask, radius);
        prop_assert!(mask.is_subset_of(&dilated));
        let regions = compute_halo(&dilated, width);
        prop_assert!(regions.check_partition().is_ok());
        prop_assert_eq!(regions.mask.intersection(&regions.halo).count(), 0);
        prop_assert_eq!(regions.bubble().count() + regions.exterior().count(), 120);
    }

    #[test]
    fn crop_adjoint_is_exact(mask in mask_strategy(20, 14), res in 4usize..24, mode in 0usize..3, seed in any::<u64>()) {
        let regions = compute_halo(&mask, 1);
        prop_assume!(!regions.mask.is_empty());
        let mode = [CropMode::CenterHeight, CropMode::LeftMost, CropMode::MaskAdaptive][mode];
        let crop = compute_crop(&regions, 20, 14, mode, res).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = ImageFrame::from_data(20, 14, (0..20 * 14 * 3).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect()).unwrap();
        let y: Vec<f64> = (0..res * res * 3).map(|_| rand::Rng::gen_range(&mut rng, -1.0..1.0)).collect();
        let lhs: f64 = crop.extract(&x).data.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.data.iter().zip(crop.extract_adjoint(&y, 20, 14)).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-9 * (1.0 + lhs.abs()));
    }

    #[test]
    fn schedule_is_monotone(total in 1usize..5000, a in 0usize..5000, b in 0usize..5000) {
        let s = NoiseSchedule::default();
        let (lo, hi) = (a.min(b).min(total - 1), a.max(b).min(total - 1));
        prop_assert!(schedule_t(lo, total, &s) >= schedule_t(hi, total, &s));
    }

    #[test]
    fn cfg_is_affine_in_scale(c in prop::collection::vec(-3.0f64..3.0, 8), u in prop::collection::vec(-3.0f64..3.0, 8), s1 in -10.0f64..40.0, s2 in -10.0f64..40.0, lam in 0.0f64..1.0) {
        let cond = Latent { channels: 2, height: 2, width: 2, data: c };
        let unc = Latent { channels: 2, height: 2, width: 2, data: u };
        let mix = cfg_combine(&cond, &unc, lam * s1 + (1.0 - lam) * s2).unwrap();
        let a = cfg_combine(&cond, &unc, s1).unwrap();
        let b = cfg_combine(&cond, &unc, s2).unwrap();
        for i in 0..8 {
            prop_assert!((mix.data[i] - (lam * a.data[i] + (1.0 - lam) * b.data[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn depth_loss_is_affine_invariant(r in prop::collection::vec(0.0f64..10.0, 16), e in prop::collection::vec(0.0f64..10.0, 16), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let region = MaskFrame::full(4, 4);
        let base = depth_loss(&r, &e, &region).unwrap();
        let scaled: Vec<f64> = e.iter().map(|x| a * x + b).collect();
        let moved = depth_loss(&r, &scaled, &region).unwrap();
        prop_assert!((base.value - moved.value).abs() < 1e-6);
        prop_assert!((-1.0 - 1e-9..=1.0 + 1e-9).contains(&base.value));
    }

    #[test]
    fn recon_ignores_exterior(halo in mask_strategy(6, 6), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut img = || ImageFrame::from_data(6, 6, (0..108).map(|_| rand::Rng::gen_range(&mut rng, 0.0..1.0)).collect()).unwrap();
        let (x, input, mut other) = (img(), img(), img());
        for (r, c) in halo.pixels() {
            other.set_pixel(r, c, x.pixel(r, c));
        }
        let a = recon_loss(&x, &input, &halo).unwrap();
        let b = recon_loss(&other, &input, &halo).unwrap();
        prop_assert_eq!(a.value, b.value);
        prop_assert!(a.gradient.iter().enumerate().all(|(i, g)| halo.bits[i / 3] || *g == 0.0));
    }

    #[test]
    fn cosine_is_bounded(a in prop::collection::vec(-5.0f64..5.0, 6), b in prop::collection::vec(-5.0f64..5.0, 6)) {
        let c = cosine(&a, &b);
        prop_assert!((-1.0..=1.0).contains(&c));
    }

    #[test]
    fn checkpoint_bytes_roundtrip(seed in any::<u64>()) {
        let field = tiny_field();
        let ckpt = Checkpoint { field: field.config().clone(), params: field.init_params(seed), train: None };
        let back = Checkpoint::from_bytes(&ckpt.to_bytes().unwrap()).unwrap();
        prop_assert_eq!(back.params, ckpt.params);
    }
}
