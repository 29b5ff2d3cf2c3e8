use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tcnl_core::tensor::{conv_out_extent, conv_transpose_out_extent, Graph, Tensor};

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

#[test]
fn linear_matches_naive_triple_loop() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let (b, f, o) = (rng.gen_range(1..9), rng.gen_range(1..17), rng.gen_range(1..9));
        let (x, w, bias) = (random(&mut rng, &[b, f]), random(&mut rng, &[f, o]), random(&mut rng, &[o]));
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(bias.clone()));
        let y = g.linear(xv, wv, bv).unwrap();
        let y = g.value(y);
        for r in 0..b {
            for c in 0..o {
                let mut acc = bias.data()[c];
                for k in 0..f {
                    acc += x.data()[r * f + k] * w.data()[k * o + c];
                }
                assert!((y.data()[r * o + c] - acc).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn conv2d_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..20 {
        let (c, k, h, kern, stride, pad) = (2, 3, rng.gen_range(3..7), rng.gen_range(1..4), rng.gen_range(1..3), rng.gen_range(0..2));
        let Some(oh) = conv_out_extent(h, kern, stride, pad) else { continue };
        let (x, w, b) = (random(&mut rng, &[1, c, h, h]), random(&mut rng, &[k, c, kern, kern]), random(&mut rng, &[k]));
        let mut g = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w.clone()), g.constant(b.clone()));
        let y = g.conv2d(xv, wv, bv, stride, pad).unwrap();
        assert_eq!(g.shape(y), &[1, k, oh, oh]);
        let y = g.value(y).data().to_vec();
        for o in 0..k {
            for i in 0..oh {
                for j in 0..oh {
                    let mut acc = b.data()[o];
                    for ci in 0..c {
                        for di in 0..kern {
                            for dj in 0..kern {
                                let (r, s) = ((i * stride + di) as isize - pad as isize, (j * stride + dj) as isize - pad as isize);
                                if r >= 0 && s >= 0 && (r as usize) < h && (s as usize) < h {
                                    acc += x.data()[(ci * h + r as usize) * h + s as usize]
                                        * w.data()[((o * c + ci) * kern + di) * kern + dj];
                                }
                            }
                        }
                    }
                    assert!((y[(o * oh + i) * oh + j] - acc).abs() <= 1e-12);
                }
            }
        }
    }
}

#[test]
fn mismatched_shapes_are_rejected() {
    let mut g = Graph::<f64>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[3, 2]));
    assert!(g.add(a, b).is_err());
    assert!(g.reshape(a, &[4]).is_err());
    let x = g.constant(Tensor::zeros(&[1, 2, 4, 4]));
    let w = g.constant(Tensor::zeros(&[3, 5, 3, 3]));
    let bias = g.constant(Tensor::zeros(&[3]));
    assert!(g.conv2d(x, w, bias, 1, 1).is_err());
}

#[test]
fn backward_requires_scalar_loss() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::zeros(&[2]));
    assert!(g.backward(a).is_err());
}

#[test]
fn stop_gradient_blocks_flow() {
    let mut g = Graph::<f64>::new();
    let a = g.param(Tensor::full(&[3], 2.0));
    let d = g.stop_gradient(a);
    let p = g.mul(a, d).unwrap();
    let s = g.sum(p);
    g.backward(s).unwrap();
    assert_eq!(g.grad(a).unwrap(), &[2.0, 2.0, 2.0]);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn conv_shape_algebra(h in 1usize..20, kern in 1usize..6, stride in 1usize..4, pad in 0usize..3) {
        match conv_out_extent(h, kern, stride, pad) {
            Some(o) => {
                prop_assert!(o >= 1);
                prop_assert!((o - 1) * stride + kern <= h + 2 * pad);
                prop_assert!(o * stride + kern > h + 2 * pad);
                // a transposed conv maps back onto the input extent up to the stride remainder
                if let Some(t) = conv_transpose_out_extent(o, kern, stride, pad) {
                    prop_assert!(t <= h && h - t < stride);
                }
            }
            None => prop_assert!(kern > h + 2 * pad),
        }
    }

    #[test]
    fn concat_then_split_round_trips(widths in prop::collection::vec(1usize..4, 1..4), batch in 1usize..3, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts: Vec<Tensor<f64>> = widths.iter().map(|&w| random(&mut rng, &[batch, w, 2, 3])).collect();
        let mut g = Graph::new();
        let vars: Vec<_> = parts.iter().map(|p| g.constant(p.clone())).collect();
        let cat = g.concat_channels(&vars).unwrap();
        prop_assert_eq!(g.shape(cat), &[batch, widths.iter().sum(), 2, 3][..]);
        let back = g.value(cat).split_channels(&widths).unwrap();
        prop_assert_eq!(back, parts);
    }

    #[test]
    fn concat_batch_then_slice_round_trips(rows in prop::collection::vec(1usize..4, 1..4), seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let parts: Vec<Tensor<f64>> = rows.iter().map(|&r| random(&mut rng, &[r, 2, 2])).collect();
        let mut g = Graph::new();
        let vars: Vec<_> = parts.iter().map(|p| g.constant(p.clone())).collect();
        let cat = g.concat_batch(&vars).unwrap();
        let mut start = 0;
        for (p, &r) in parts.iter().zip(&rows) {
            prop_assert_eq!(&g.value(cat).slice_batch(start, r).unwrap(), p);
            start += r;
        }
    }

    #[test]
    fn reshape_preserves_data(a in 1usize..6, b in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[a, b]);
        let mut g = Graph::new();
        let v = g.constant(x.clone());
        let r = g.reshape(v, &[b, a]).unwrap();
        prop_assert_eq!(g.value(r).data(), x.data());
    }

    #[test]
    fn relu_and_sigmoid_ranges(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = random(&mut rng, &[16]).map(|v| v * 30.0);
        let mut g = Graph::new();
        let v = g.constant(x);
        let r = g.relu(v);
        let s = g.sigmoid(v);
        prop_assert!(g.value(r).data().iter().all(|&y| y >= 0.0));
        prop_assert!(g.value(s).data().iter().all(|&y| (0.0..=1.0).contains(&y)));
    }
}
