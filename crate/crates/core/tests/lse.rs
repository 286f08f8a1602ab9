use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wdst_core::features::LayerKind;
use wdst_core::lse::{lse_forward, lse_train, synthetic_deblur_dataset, LseNetwork, TrainConfig};
use wdst_core::ImagePlane;

/// Direct zero-padded 3x3 convolution over channel-major buffers.
fn conv_direct(x: &[f64], c: usize, h: usize, w: usize, weights: &[f64], bias: &[f64]) -> Vec<f64> {
    let o = bias.len();
    let mut out = vec![0.0; o * h * w];
    for oc in 0..o {
        for y in 0..h {
            for xx in 0..w {
                let mut acc = bias[oc];
                for ic in 0..c {
                    for ky in 0..3 {
                        for kx in 0..3 {
                            let (sy, sx) =
                                (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                            if sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w {
                                acc += weights[((oc * c + ic) * 3 + ky) * 3 + kx]
                                    * x[(ic * h + sy as usize) * w + sx as usize];
                            }
                        }
                    }
                }
                out[(oc * h + y) * w + xx] = acc;
            }
        }
    }
    out
}

#[test]
fn forward_matches_direct_convolution() {
    let net = LseNetwork::he_uniform(21);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (w, h) = (7, 6);
    let input =
        ImagePlane::new(w, h, (0..w * h).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();

    let mut act = input.data().to_vec();
    let mut channels = 1;
    for layer in net.network().layers() {
        match &layer.kind {
            LayerKind::Conv(c) => {
                act = conv_direct(&act, channels, h, w, &c.weights, &c.bias);
                channels = c.out_channels;
            }
            LayerKind::Relu => act.iter_mut().for_each(|v| *v = v.max(0.0)),
            LayerKind::Pool { .. } => unreachable!(),
        }
    }
    let out = lse_forward(&net, &input).unwrap();
    for ((o, x), r) in out.data().iter().zip(input.data()).zip(&act) {
        assert!((o - (x + r)).abs() < 1e-10);
    }
}

#[test]
fn training_is_reproducible_and_descends() {
    let data = synthetic_deblur_dataset(24, 16, 1.5, 5);
    let cfg = TrainConfig {
        epochs: 3,
        batch_size: 8,
        seed: 9,
        ..Default::default()
    };
    let a = lse_train(LseNetwork::he_uniform(2), &data, &cfg).unwrap();
    let b = lse_train(LseNetwork::he_uniform(2), &data, &cfg).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.net.network(), b.net.network());
    assert_eq!(a.history.len(), 4);
    assert!(a.history[3] < a.history[0]);
}
