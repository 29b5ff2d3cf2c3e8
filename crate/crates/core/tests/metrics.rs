use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcnl_core::data::{generate_dataset, remove_concept, ConceptSample, DatasetConfig, Image};
use tcnl_core::metrics::{
    accuracy, accuracy_of, concept_weights, crnp_from_activations, crnp_table, evaluate, mse_255, neuron_activation,
    positional_montage, predictions, ssim, SSIM_K1,
};
use tcnl_core::net::{image_batch, NetworkSpec, TcnlNetwork};

fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
    Image {
        width: w,
        height: h,
        data: (0..w * h * 3).map(|_| rng.gen_range(0.0f32..1.0)).collect(),
    }
}

/// Direct windowed SSIM: two-pass weighted moments for every 11×11 window.
fn naive_ssim(a: &Image, b: &Image) -> f64 {
    let raw: Vec<f64> = (0..11).map(|i| (-((i as f64 - 5.0).powi(2)) / (2.0 * 1.5 * 1.5)).exp()).collect();
    let norm: f64 = raw.iter().sum();
    let g: Vec<f64> = raw.iter().map(|v| v / norm).collect();
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let px = |img: &Image, x: usize, y: usize, c: usize| f64::from(img.data[(y * img.width + x) * 3 + c]);
    let mut total = 0.0;
    for c in 0..3 {
        let mut sum = 0.0;
        let mut n = 0;
        for y0 in 0..=a.height - 11 {
            for x0 in 0..=a.width - 11 {
                let win = |f: &dyn Fn(usize, usize) -> f64| {
                    let mut s = 0.0;
                    for j in 0..11 {
                        for i in 0..11 {
                            s += g[j] * g[i] * f(x0 + i, y0 + j);
                        }
                    }
                    s
                };
                let ma = win(&|x, y| px(a, x, y, c));
                let mb = win(&|x, y| px(b, x, y, c));
                let va = win(&|x, y| (px(a, x, y, c) - ma).powi(2));
                let vb = win(&|x, y| (px(b, x, y, c) - mb).powi(2));
                let cov = win(&|x, y| (px(a, x, y, c) - ma) * (px(b, x, y, c) - mb));
                sum += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                n += 1;
            }
        }
        total += sum / n as f64;
    }
    total / 3.0
}

#[test]
fn ssim_matches_direct_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    for _ in 0..50 {
        let (w, h) = (rng.gen_range(11..18), rng.gen_range(11..18));
        let a = random_image(&mut rng, w, h);
        // correlated partner so values spread across the SSIM range
        let mut b = random_image(&mut rng, w, h);
        let t = rng.gen_range(0.0f32..1.0);
        b.data.iter_mut().zip(&a.data).for_each(|(q, &p)| *q = t * p + (1.0 - t) * *q);
        let (fast, slow) = (ssim(&a, &b).unwrap(), naive_ssim(&a, &b));
        assert!((fast - slow).abs() <= 1e-6, "{fast} vs {slow}");
    }
}

#[test]
fn ssim_of_constant_images_has_closed_form() {
    for (p, q) in [(0.0f32, 0.5f32), (0.25, 0.75), (1.0, 0.0), (0.5, 0.5)] {
        let a = Image { width: 16, height: 16, data: vec![p; 16 * 16 * 3] };
        let b = Image { width: 16, height: 16, data: vec![q; 16 * 16 * 3] };
        let (p, q) = (f64::from(p), f64::from(q));
        let c1 = SSIM_K1 * SSIM_K1;
        let want = (2.0 * p * q + c1) / (p * p + q * q + c1);
        assert!((ssim(&a, &b).unwrap() - want).abs() <= 1e-9);
    }
}

#[test]
fn ssim_is_symmetric_and_one_on_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..10 {
        let (a, b) = (random_image(&mut rng, 20, 14), random_image(&mut rng, 20, 14));
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() <= 1e-12);
        assert_eq!(ssim(&a, &a).unwrap(), 1.0);
    }
    let small = Image::new(8, 8);
    assert!(ssim(&small, &small).is_err());
    assert!(ssim(&Image::new(12, 12), &Image::new(13, 12)).is_err());
}

#[test]
fn mse_is_exact_on_the_byte_scale() {
    let a = Image::from_bytes(2, 1, &[0, 0, 0, 10, 20, 30]);
    let b = Image::from_bytes(2, 1, &[1, 0, 0, 10, 20, 33]);
    // squared byte differences 1 and 9 over 6 values; pixels are stored as f32
    assert!((mse_255(&a, &b).unwrap() - 10.0 / 6.0).abs() <= 1e-4);
    assert_eq!(mse_255(&a, &a).unwrap(), 0.0);
}

#[test]
fn crnp_oracle_cases() {
    // drops 0,0,0,4: mean 1, one neuron above
    assert_eq!(crnp_from_activations(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 3.0, 0.0]), 0.25);
    // equal drops: nothing is strictly above the mean
    assert_eq!(crnp_from_activations(&[2.0; 5], &[1.0; 5]), 0.0);
    // drops 0,0,1,1: mean 0.5, two above
    assert_eq!(crnp_from_activations(&[0.0, 0.0, 1.0, 1.0], &[0.0; 4]), 0.5);
    // negative drops count against the mean too
    assert_eq!(crnp_from_activations(&[0.0, 0.0, 0.0], &[1.0, -2.0, 1.0]), 1.0 / 3.0);
}

proptest! {
    #[test]
    fn crnp_is_a_fraction_below_one(drops in prop::collection::vec(-5.0f64..5.0, 1..40), shift in -3.0f64..3.0, scale in 0.1f64..10.0) {
        let full: Vec<f64> = drops.iter().map(|d| d + 1.0).collect();
        let removed = vec![1.0; drops.len()];
        let c = crnp_from_activations(&full, &removed);
        prop_assert!((0.0..1.0).contains(&c));
        let moved: Vec<f64> = drops.iter().map(|d| d * scale + shift).collect();
        let c2 = crnp_from_activations(&moved, &vec![0.0; drops.len()]);
        // affine maps of the drops with positive slope leave the count unchanged, up to rounding at the mean
        let mean = drops.iter().sum::<f64>() / drops.len() as f64;
        let near = drops.iter().filter(|&&d| (d - mean).abs() < 1e-9).count() as f64 / drops.len() as f64;
        prop_assert!((c - c2).abs() <= near + 1e-12);
    }
}

fn small_setup(seed: u64) -> (TcnlNetwork<f64>, Vec<ConceptSample>) {
    let config = DatasetConfig {
        image_size: 32,
        n_train: 4,
        n_test: 12,
        ..DatasetConfig::default()
    };
    let ds = generate_dataset(seed, &config).unwrap();
    let spec = NetworkSpec {
        input_size: 32,
        instance_size: 32,
        ..NetworkSpec::default()
    };
    (TcnlNetwork::build_with(&spec, seed).unwrap(), ds.test)
}

#[test]
fn crnp_table_matches_per_image_recomputation() {
    let (net, samples) = small_setup(1);
    let table = crnp_table(&net, &samples).unwrap();
    let k = net.concept_count();
    for j in 0..k {
        let present: Vec<&ConceptSample> = samples.iter().filter(|s| s.present(j)).collect();
        for i in 0..k {
            let scores: Vec<f64> = present
                .iter()
                .map(|s| {
                    let removed = remove_concept(&s.image, &s.masks[j]).unwrap();
                    let f = net.concept_features(&image_batch(&[&s.image]).unwrap(), i).unwrap();
                    let r = net.concept_features(&image_batch(&[&removed]).unwrap(), i).unwrap();
                    crnp_from_activations(&neuron_activation(&f), &neuron_activation(&r))
                })
                .collect();
            assert_eq!(table.per_image[i][j], scores);
            let mean = scores.iter().sum::<f64>() / scores.len() as f64;
            assert!((table.values[i][j] - mean).abs() <= 1e-12);
        }
    }
}

#[test]
fn concept_weights_normalise_and_respect_zeroed_inputs() {
    let (mut net, samples) = small_setup(2);
    let w = concept_weights(&net, &samples).unwrap();
    assert!((w.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    assert!(w.weights.iter().all(|&x| x > 0.0));

    // positive rescaling of the last layer keeps every prediction and every ratio
    let mut scaled = net.clone();
    let last = scaled.params.entries.iter().rposition(|e| e.name.starts_with("classifier") && e.name.ends_with("weight")).unwrap();
    for j in [last, last + 1] {
        scaled.params.entries[j].value = scaled.params.entries[j].value.map(|v| v * 3.0);
    }
    let ws = concept_weights(&scaled, &samples).unwrap();
    for (a, b) in w.weights.iter().zip(&ws.weights) {
        assert!((a - b).abs() <= 1e-9);
    }
    assert_eq!(predictions(&net, &samples).unwrap(), predictions(&scaled, &samples).unwrap());

    // a concept whose classifier input rows are zero gets exactly zero weight
    let block = net.spec.extractor_channels.last().copied().unwrap();
    let e = net.params.entries.iter_mut().find(|e| e.name == "classifier.1.linear.weight").unwrap();
    let hidden = e.value.shape()[1];
    e.value.data_mut()[block * hidden..2 * block * hidden].fill(0.0);
    let w = concept_weights(&net, &samples).unwrap();
    assert_eq!(w.weights[1], 0.0);
    assert!((w.weights.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
}

#[test]
fn accuracy_is_invariant_under_monotone_logit_maps() {
    let (net, samples) = small_setup(3);
    let base = accuracy(&net, &samples).unwrap();
    let mut shifted = net.clone();
    let bias = shifted.params.entries.iter().rposition(|e| e.name.starts_with("classifier") && e.name.ends_with("bias")).unwrap();
    shifted.params.entries[bias].value = shifted.params.entries[bias].value.map(|v| v + 7.5);
    assert_eq!(accuracy(&shifted, &samples).unwrap(), base);
    let labels: Vec<usize> = samples.iter().map(|s| s.label).collect();
    assert_eq!(accuracy_of(&labels, &labels).unwrap(), 1.0);
    assert!(accuracy_of(&[], &[]).is_err());
}

#[test]
fn montage_takes_the_pixelwise_maximum() {
    let a = Image::from_bytes(2, 1, &[10, 0, 0, 0, 0, 0]);
    let b = Image::from_bytes(2, 1, &[0, 0, 0, 0, 20, 0]);
    let (composite, strip) = positional_montage(&[a, b]).unwrap();
    assert_eq!(composite, Image::from_bytes(2, 1, &[10, 0, 0, 0, 20, 0]));
    assert_eq!((strip.width, strip.height), (4, 1));
    assert!(positional_montage(&[]).is_err());
}

#[test]
fn evaluation_report_is_complete() {
    let (net, samples) = small_setup(4);
    let r = evaluate(&net, &samples).unwrap();
    assert_eq!(r.concepts.len(), 4);
    for v in [&r.crnp, &r.mse_255, &r.ssim, &r.concept_weights] {
        assert_eq!(v.len(), 4);
        assert!(v.iter().all(|x| x.is_finite()));
    }
    assert_eq!(r.n_images, samples.len());
    let table = r.to_table();
    assert!(table.contains("shape") && table.contains("accuracy"));
}
