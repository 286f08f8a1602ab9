use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use wdst_core::features::{random_network, FeatureMaps, Tensor3};
use wdst_core::metrics::{histogram_distance, psnr, ssim, subband_histogram};
use wdst_core::pipeline::pd_interpolate;
use wdst_core::wavelet::{iswt2, make_filter_pair, swt2};
use wdst_core::wdst::{gram, normalize_subband, StyleTransferConfig, SubbandObjective};
use wdst_core::{ColorImage, ColorSpace, FilterFamily, ImagePlane};

fn plane(w: usize, h: usize, seed: u64) -> ImagePlane {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    ImagePlane::from_fn(w, h, |_, _| rng.gen_range(-1.0..1.0))
}

fn family() -> impl Strategy<Value = FilterFamily> {
    (0..FilterFamily::ALL.len()).prop_map(|i| FilterFamily::ALL[i])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn swt_round_trip(f in family(), levels in 1usize..4, w in 2usize..40, h in 2usize..40, seed: u64) {
        let x = plane(w, h, seed);
        let back = iswt2(&swt2(&x, &make_filter_pair(f), levels).unwrap()).unwrap();
        prop_assert!(back.max_abs_diff(&x) < 1e-10);
    }

    #[test]
    fn swt_commutes_with_circular_shift(f in family(), dx in -30isize..30, dy in -30isize..30, seed: u64) {
        let x = plane(21, 18, seed);
        let filter = make_filter_pair(f);
        let a = swt2(&x.circular_shift(dx, dy), &filter, 2).unwrap();
        let b = swt2(&x, &filter, 2).unwrap();
        for ((_, pa), (_, pb)) in a.named_bands().into_iter().zip(b.named_bands()) {
            let shifted = pb.circular_shift(dx, dy);
            prop_assert_eq!(pa.data(), shifted.data());
        }
    }

    #[test]
    fn swt_is_linear(f in family(), a in -3.0f64..3.0, b in -3.0f64..3.0, seed: u64) {
        let filter = make_filter_pair(f);
        let (x, y) = (plane(16, 12, seed), plane(16, 12, seed ^ 0xabc));
        let lhs = swt2(&x.lin_comb(a, &y, b).unwrap(), &filter, 2).unwrap();
        let rhs = swt2(&x, &filter, 2).unwrap().lin_comb(a, &swt2(&y, &filter, 2).unwrap(), b).unwrap();
        for ((_, p), (_, q)) in lhs.named_bands().into_iter().zip(rhs.named_bands()) {
            prop_assert!(p.max_abs_diff(q) < 1e-12);
        }
    }

    #[test]
    fn normalization_round_trips(w in 1usize..20, h in 1usize..20, scale in 1e-3f64..1e3, seed: u64) {
        let x = plane(w, h, seed).map(|v| v * scale);
        let n = normalize_subband(&x);
        let (lo, hi) = n.plane.min_max();
        prop_assert!(lo >= 0.0 && hi <= 1.0);
        prop_assert!(n.denormalize().max_abs_diff(&x) <= 1e-12 * scale.max(1.0));
    }

    #[test]
    fn gram_is_symmetric_psd(c in 1usize..6, hw in 1usize..6, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let t = Tensor3::new(c, hw, hw, (0..c * hw * hw).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap();
        let mut maps = FeatureMaps::new();
        maps.insert("t", t);
        let g = gram(&maps, "t").unwrap();
        for i in 0..c {
            prop_assert!(g.get(i, i) >= 0.0);
            for j in 0..c {
                prop_assert_eq!(g.get(i, j), g.get(j, i));
                // Cauchy-Schwarz on rows of F
                prop_assert!(g.get(i, j).powi(2) <= g.get(i, i) * g.get(j, j) * (1.0 + 1e-12) + 1e-15);
            }
        }
    }

    #[test]
    fn histogram_counts_every_sample(bins in 1usize..40, seed: u64) {
        let x = plane(13, 9, seed).map(|v| 3.0 * v);
        let hist = subband_histogram(&x, bins, (-1.0, 1.0)).unwrap();
        prop_assert_eq!(hist.counts.iter().sum::<u64>(), 117);
        let d = histogram_distance(&hist, &hist).unwrap();
        prop_assert_eq!(d, 0.0);
    }

    #[test]
    fn histogram_distance_is_symmetric(seed: u64) {
        let a = subband_histogram(&plane(10, 10, seed), 16, (-1.0, 1.0)).unwrap();
        let b = subband_histogram(&plane(10, 10, seed + 1).map(|v| v * 0.3), 16, (-1.0, 1.0)).unwrap();
        let (ab, ba) = (histogram_distance(&a, &b).unwrap(), histogram_distance(&b, &a).unwrap());
        prop_assert!((ab - ba).abs() < 1e-15 && ab >= 0.0);
    }

    #[test]
    fn psnr_and_ssim_are_symmetric(seed: u64) {
        let a = plane(16, 16, seed).map(|v| 0.5 + 0.4 * v);
        let b = plane(16, 16, seed + 7).map(|v| 0.5 + 0.4 * v);
        prop_assert_eq!(psnr(&a, &b, 1.0).unwrap(), psnr(&b, &a, 1.0).unwrap());
        prop_assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-12);
        prop_assert!(ssim(&a, &b).unwrap() <= 1.0 + 1e-12);
    }

    #[test]
    fn interpolation_stays_between_endpoints(mu in 0.0f64..=1.0, seed: u64) {
        let mk = |s| {
            let p = plane(6, 5, s).map(|v| 0.5 + 0.5 * v);
            ColorImage::new([p.clone(), p.clone(), p], ColorSpace::Rgb).unwrap()
        };
        let (o, p) = (mk(seed), mk(seed + 1));
        let m = pd_interpolate(&o, &p, mu).unwrap();
        for c in 0..3 {
            for ((v, a), b) in m.plane(c).data().iter().zip(o.plane(c).data()).zip(p.plane(c).data()) {
                prop_assert!(*v >= a.min(*b) - 1e-15 && *v <= a.max(*b) + 1e-15);
            }
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(6))]

    /// Central differences on a handful of coordinates for random weightings.
    #[test]
    fn objective_gradient_matches_finite_differences(
        alpha in 0.0f64..2.0,
        beta in 0.0f64..2e3,
        gamma in 0.0f64..1e-4,
        seed: u64,
    ) {
        let net = random_network(seed % 4, 0.2);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut rand_plane = |lo: f64| ImagePlane::from_fn(8, 8, |_, _| lo + (1.0 - 2.0 * lo) * rng.gen::<f64>());
        let (content, style, x) = (rand_plane(0.0), rand_plane(0.0), rand_plane(0.05));
        let cfg = StyleTransferConfig { alpha, beta, gamma, ..Default::default() };
        let obj = SubbandObjective::new(&net, &cfg, &content, &style).unwrap();
        let (_, grad) = obj.loss_and_gradient(&x).unwrap();
        let gmax = grad.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let h = 1e-6;
        for i in (0..64).step_by(7) {
            let probe = |d: f64| {
                let mut v = x.data().to_vec();
                v[i] += d;
                obj.loss(&ImagePlane::new(8, 8, v).unwrap()).unwrap().total
            };
            let fd = (probe(h) - probe(-h)) / (2.0 * h);
            let an = grad.data()[i];
            let denom = an.abs().max(fd.abs()).max(1e-3 * gmax).max(1e-300);
            prop_assert!((an - fd).abs() / denom < 1e-4, "coord {i}: analytic {an}, fd {fd}");
        }
    }
}
