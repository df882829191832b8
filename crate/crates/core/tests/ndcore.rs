use proptest::prelude::*;
use pyoco_core::ndcore::{
    conv3d, conv3d_backward, gaussian, pairwise_sum, ptns, BinaryOp, Padding, ReduceOp, RngStream,
    Shape, Tensor,
};
use pyoco_core::Error;
use statrs::distribution::{ChiSquared, ContinuousCDF, Normal};

fn t(dims: &[usize], data: Vec<f64>) -> Tensor<f64> {
    Tensor::from_dims(dims, data).unwrap()
}

#[test]
fn same_seed_same_draws() {
    let a: Tensor<f64> = gaussian(&mut RngStream::new(0, 0), &[2]).unwrap();
    let b: Tensor<f64> = gaussian(&mut RngStream::new(0, 0), &[2]).unwrap();
    assert_eq!(a.data(), b.data());
}

#[test]
fn gaussian_moments_at_one_million() {
    let x: Tensor<f64> = gaussian(&mut RngStream::new(7, 3), &[1_000_000]).unwrap();
    let n = x.len() as f64;
    let mean = x.data().iter().sum::<f64>() / n;
    let var = x.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    assert!(mean.abs() <= 0.004, "mean {mean}");
    assert!((0.995..=1.005).contains(&var), "var {var}");
}

#[test]
fn sibling_streams_are_uncorrelated() {
    let n = 100_000;
    let a: Tensor<f64> = gaussian(&mut RngStream::new(5, 0), &[n]).unwrap();
    let b: Tensor<f64> = gaussian(&mut RngStream::new(5, 1), &[n]).unwrap();
    let r = pearson(a.data(), b.data());
    assert!(r.abs() < 0.01, "r = {r}");

    let root = RngStream::new(5, 9);
    let c: Tensor<f64> = gaussian(&mut root.split(0), &[n]).unwrap();
    let d: Tensor<f64> = gaussian(&mut root.split(1), &[n]).unwrap();
    assert!(pearson(c.data(), d.data()).abs() < 0.01);
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

#[test]
fn gaussian_passes_chi_squared_with_sixteen_bins() {
    let n = 100_000;
    let x: Tensor<f64> = gaussian(&mut RngStream::new(11, 0), &[n]).unwrap();
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut counts = [0usize; 16];
    for &v in x.data() {
        let bin = ((normal.cdf(v) * 16.0) as usize).min(15);
        counts[bin] += 1;
    }
    let expected = n as f64 / 16.0;
    let stat: f64 = counts
        .iter()
        .map(|&c| (c as f64 - expected).powi(2) / expected)
        .sum();
    let p = 1.0 - ChiSquared::new(15.0).unwrap().cdf(stat);
    assert!(p > 0.001, "chi2 = {stat}, p = {p}");
}

#[test]
fn counter_positions_replay() {
    let mut a = RngStream::new(3, 4);
    let _ = a.next_u64();
    let pos = a.counter();
    let next = a.next_u64();
    assert_eq!(RngStream::at(3, 4, pos).next_u64(), next);
    assert_eq!(pos, 2);
}

#[test]
fn below_is_in_range_and_roughly_uniform() {
    let mut rng = RngStream::new(1, 1);
    let mut counts = [0usize; 7];
    for _ in 0..70_000 {
        counts[rng.below(7) as usize] += 1;
    }
    for c in counts {
        assert!((c as f64 - 10_000.0).abs() < 500.0, "{counts:?}");
    }
}

#[test]
fn shape_errors() {
    assert!(matches!(
        Shape::new(vec![usize::MAX, 2]),
        Err(Error::Size(_))
    ));
    assert!(matches!(Shape::new(vec![2, 0]), Err(Error::Shape(_))));
    assert!(matches!(
        Shape::new(Vec::<usize>::new()),
        Err(Error::Shape(_))
    ));
    assert!(matches!(
        Tensor::<f64>::from_dims(&[2, 2], vec![1.0; 3]),
        Err(Error::Shape(_))
    ));
    let mut rng = RngStream::new(0, 0);
    assert!(matches!(
        gaussian::<f64>(&mut rng, &[1 << 40, 1 << 40]),
        Err(Error::Size(_))
    ));
}

#[test]
fn add_with_negation_is_zero() {
    let a: Tensor<f64> = gaussian(&mut RngStream::new(2, 2), &[3, 4]).unwrap();
    let z = a.add(&a.scale(-1.0)).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn elementwise_ops_and_mismatch() {
    let a = t(&[3], vec![1.0, 2.0, 3.0]);
    let b = t(&[3], vec![4.0, 5.0, 6.0]);
    assert_eq!(
        a.elementwise(&b, BinaryOp::Add).unwrap().data(),
        &[5.0, 7.0, 9.0]
    );
    assert_eq!(
        a.elementwise(&b, BinaryOp::Sub).unwrap().data(),
        &[-3.0, -3.0, -3.0]
    );
    assert_eq!(
        a.elementwise(&b, BinaryOp::Mul).unwrap().data(),
        &[4.0, 10.0, 18.0]
    );
    let c = t(&[1, 3], vec![0.0; 3]);
    assert!(matches!(a.add(&c), Err(Error::Shape(_))));
}

#[test]
fn matmul_of_ones() {
    let a = t(&[2, 3], vec![1.0; 6]);
    let b = t(&[3, 2], vec![1.0; 6]);
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.dims(), &[2, 2]);
    assert_eq!(c.data(), &[3.0; 4]);
    assert!(matches!(a.matmul(&a), Err(Error::Shape(_))));
}

#[test]
fn reductions() {
    let a = t(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    assert_eq!(
        a.reduce(ReduceOp::Sum, &[0]).unwrap().data(),
        &[5.0, 7.0, 9.0]
    );
    assert_eq!(a.reduce(ReduceOp::Mean, &[1]).unwrap().data(), &[2.0, 5.0]);
    assert_eq!(a.reduce(ReduceOp::Max, &[0, 1]).unwrap().data(), &[6.0]);
    assert!(a.reduce(ReduceOp::Sum, &[2]).is_err());
}

/// Direct loop over every output and tap.
fn conv_reference(
    x: &Tensor<f64>,
    k: &Tensor<f64>,
    bias: Option<&[f64]>,
    pad: Padding,
) -> Tensor<f64> {
    let (b, t_in, ci, h, w) = x.shape().as_video().unwrap();
    let [co, _, kt, kh, kw] = k.dims().try_into().unwrap();
    let (to_n, ho_n, wo_n) = (
        t_in + 2 * pad.t + 1 - kt,
        h + 2 * pad.h + 1 - kh,
        w + 2 * pad.w + 1 - kw,
    );
    let mut out = vec![0.0; b * to_n * co * ho_n * wo_n];
    let xi = |bi: usize, ti: usize, c: usize, y: usize, xx: usize| {
        x.data()[(((bi * t_in + ti) * ci + c) * h + y) * w + xx]
    };
    for bi in 0..b {
        for to in 0..to_n {
            for o in 0..co {
                for yo in 0..ho_n {
                    for xo in 0..wo_n {
                        let mut s = bias.map_or(0.0, |bb| bb[o]);
                        for c in 0..ci {
                            for dt in 0..kt {
                                for dy in 0..kh {
                                    for dx in 0..kw {
                                        let (ti, yi, xin) = (
                                            (to + dt) as isize - pad.t as isize,
                                            (yo + dy) as isize - pad.h as isize,
                                            (xo + dx) as isize - pad.w as isize,
                                        );
                                        if ti < 0
                                            || yi < 0
                                            || xin < 0
                                            || ti >= t_in as isize
                                            || yi >= h as isize
                                            || xin >= w as isize
                                        {
                                            continue;
                                        }
                                        let kv = k.data()
                                            [(((o * ci + c) * kt + dt) * kh + dy) * kw + dx];
                                        s += kv * xi(bi, ti as usize, c, yi as usize, xin as usize);
                                    }
                                }
                            }
                        }
                        out[(((bi * to_n + to) * co + o) * ho_n + yo) * wo_n + xo] = s;
                    }
                }
            }
        }
    }
    t(&[b, to_n, co, ho_n, wo_n], out)
}

fn max_rel(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(1e-300))
        .fold(0.0, f64::max)
}

#[test]
fn conv3d_matches_nested_loops() {
    let mut rng = RngStream::new(21, 0);
    let x: Tensor<f64> = gaussian(&mut rng, &[2, 4, 3, 4, 4]).unwrap();
    for (kdims, pad) in [
        ([2, 3, 1, 3, 3], Padding::new(0, 1, 1)),
        ([2, 3, 3, 1, 1], Padding::new(1, 0, 0)),
        ([4, 3, 3, 3, 3], Padding::new(1, 1, 1)),
        ([1, 3, 2, 2, 3], Padding::new(0, 0, 1)),
        ([2, 3, 3, 3, 3], Padding::new(0, 0, 0)),
    ] {
        let k: Tensor<f64> = gaussian(&mut rng, &kdims).unwrap();
        let bias: Vec<f64> = (0..kdims[0]).map(|i| 0.1 * i as f64 - 0.05).collect();
        let fast = conv3d(&x, &k, Some(&bias), pad).unwrap();
        let slow = conv_reference(&x, &k, Some(&bias), pad);
        assert_eq!(fast.dims(), slow.dims());
        assert!(max_rel(fast.data(), slow.data()) < 1e-10, "{kdims:?}");
    }
}

#[test]
fn conv3d_delta_kernel_is_identity() {
    let x: Tensor<f64> = gaussian(&mut RngStream::new(4, 4), &[1, 3, 2, 5, 4]).unwrap();
    let mut k = vec![0.0; 2 * 2 * 27];
    for c in 0..2 {
        k[(c * 2 + c) * 27 + 13] = 1.0;
    }
    let k = t(&[2, 2, 3, 3, 3], k);
    let y = conv3d(&x, &k, None, Padding::new(1, 1, 1)).unwrap();
    assert_eq!(y.data(), x.data());
}

#[test]
fn conv3d_rejects_bad_shapes() {
    let x = Tensor::<f64>::zeros(Shape::video(1, 2, 3, 4, 4).unwrap());
    let k = Tensor::<f64>::zeros(Shape::new(vec![1, 2, 1, 3, 3]).unwrap());
    assert!(matches!(
        conv3d(&x, &k, None, Padding::new(0, 1, 1)),
        Err(Error::Shape(_))
    ));
}

#[test]
fn conv3d_backward_is_the_adjoint() {
    let mut rng = RngStream::new(8, 1);
    let x: Tensor<f64> = gaussian(&mut rng, &[2, 3, 2, 4, 5]).unwrap();
    let k: Tensor<f64> = gaussian(&mut rng, &[3, 2, 3, 3, 3]).unwrap();
    let pad = Padding::new(1, 1, 1);
    let y = conv3d(&x, &k, None, pad).unwrap();
    let g: Tensor<f64> = gaussian(&mut rng, y.dims()).unwrap();
    let grads = conv3d_backward(&x, &k, &g, pad).unwrap();
    let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>();
    // conv is bilinear, so <g, conv(x, k)> = <∂x, x> = <∂k, k>.
    let lhs = dot(g.data(), y.data());
    assert!((lhs - dot(grads.input.data(), x.data())).abs() < 1e-9 * lhs.abs().max(1.0));
    assert!((lhs - dot(grads.kernel.data(), k.data())).abs() < 1e-9 * lhs.abs().max(1.0));
    let gsum: f64 = g
        .data()
        .chunks(4 * 5)
        .enumerate()
        .filter(|(i, _)| i % 3 == 1)
        .flat_map(|(_, c)| c)
        .sum();
    assert!((grads.bias[1] - gsum).abs() < 1e-9);
}

#[test]
fn ptns_header_layout() {
    let x = t(&[2, 1], vec![1.5, -2.0]);
    let bytes = ptns::encode(&x);
    let mut want = b"PTNS".to_vec();
    want.extend(1u32.to_le_bytes());
    want.extend(1u32.to_le_bytes());
    want.extend(2u32.to_le_bytes());
    want.extend(2u64.to_le_bytes());
    want.extend(1u64.to_le_bytes());
    want.extend(1.5f64.to_le_bytes());
    want.extend((-2.0f64).to_le_bytes());
    assert_eq!(bytes, want);

    let y = Tensor::<f32>::from_dims(&[1], vec![0.25]).unwrap();
    assert_eq!(&ptns::encode(&y)[8..12], &0u32.to_le_bytes());
}

#[test]
fn ptns_rejects_corruption() {
    let bytes = ptns::encode(&t(&[3], vec![1.0, 2.0, 3.0]));
    assert!(matches!(
        ptns::decode::<f64>(&bytes[..bytes.len() - 1]),
        Err(Error::Format(_))
    ));
    let mut bad = bytes.clone();
    bad[0] = b'X';
    assert!(matches!(ptns::decode::<f64>(&bad), Err(Error::Format(_))));
    let mut bad = bytes;
    bad[4] = 2;
    assert!(matches!(ptns::decode::<f64>(&bad), Err(Error::Format(_))));
}

#[test]
fn pairwise_sum_matches_exact_integers() {
    let xs: Vec<f64> = (1..=1000).map(|i| i as f64).collect();
    assert_eq!(pairwise_sum(&xs), 500_500.0);
}

proptest! {
    #[test]
    fn ptns_round_trip(dims in proptest::collection::vec(1usize..5, 1..5), seed in any::<u64>()) {
        let x: Tensor<f64> = gaussian(&mut RngStream::new(seed, 0), &dims).unwrap();
        let back: Tensor<f64> = ptns::decode(&ptns::encode(&x)).unwrap();
        prop_assert_eq!(back, x.clone());
        let narrow: Tensor<f32> = x.cast();
        let back32: Tensor<f32> = ptns::decode(&ptns::encode(&narrow)).unwrap();
        prop_assert_eq!(back32, narrow);
    }

    #[test]
    fn split_streams_are_reproducible(seed in any::<u64>(), id in any::<u64>(), child in any::<u64>()) {
        let a = RngStream::new(seed, id).split(child).next_u64();
        let b = RngStream::new(seed, id).split(child).next_u64();
        prop_assert_eq!(a, b);
        let c = RngStream::new(seed, id).split(child.wrapping_add(1)).next_u64();
        prop_assert_ne!(a, c);
    }

    #[test]
    fn uniform_ranges(seed in any::<u64>()) {
        let mut r = RngStream::new(seed, 0);
        for _ in 0..64 {
            let u = r.uniform();
            prop_assert!((0.0..1.0).contains(&u));
            let v = r.uniform_open0();
            prop_assert!(v > 0.0 && v <= 1.0);
        }
    }

    #[test]
    fn conv3d_is_linear_in_input(seed in any::<u64>(), a in -2.0f64..2.0) {
        let mut rng = RngStream::new(seed, 1);
        let x: Tensor<f64> = gaussian(&mut rng, &[1, 2, 2, 3, 3]).unwrap();
        let z: Tensor<f64> = gaussian(&mut rng, &[1, 2, 2, 3, 3]).unwrap();
        let k: Tensor<f64> = gaussian(&mut rng, &[2, 2, 1, 3, 3]).unwrap();
        let pad = Padding::new(0, 1, 1);
        let mut combo = x.clone();
        combo.axpy(a, &z).unwrap();
        let lhs = conv3d(&combo, &k, None, pad).unwrap();
        let mut rhs = conv3d(&x, &k, None, pad).unwrap();
        rhs.axpy(a, &conv3d(&z, &k, None, pad).unwrap()).unwrap();
        for (p, q) in lhs.data().iter().zip(rhs.data()) {
            prop_assert!((p - q).abs() < 1e-10);
        }
    }
}
