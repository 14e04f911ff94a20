//! Finite-difference verification of the hand-written backward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{Conv, ConvTranspose, MaxPool};
use super::network::{Layer, Mode, Sequential};
use super::{NnError, Tensor};

/// Central-difference step. Every layer is piecewise linear, so a small step
/// is exact away from kinks and only roundoff remains.
const STEP: f64 = 1e-6;
/// How many parameters / inputs per tensor get probed.
const PROBES: usize = 24;

/// `|a - n| / max(|a|, |n|, 1e-2)`: relative error, absolute near zero.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-2)
}

fn random_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect())
        .expect("valid shape")
}

/// Worst relative error over sampled parameters and inputs of `net` for the
/// scalar objective `sum(w * net(x))` with random `w`.
pub fn check_network(net: &Sequential, x: &Tensor, rng: &mut ChaCha8Rng) -> Result<f64, NnError> {
    let mode = Mode::Train;
    let trace = net.forward_trace(0, x, mode)?;
    let w = random_tensor(trace.output.shape(), rng);
    let objective = |net: &Sequential, x: &Tensor| -> Result<f64, NnError> {
        let y = net.forward_range(0, net.layers.len(), x, mode)?;
        Ok(y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum())
    };
    let mut grads = net.zero_grads();
    let dx = net.backward(&trace, w.clone(), &mut grads, mode, true)?.expect("input grad requested");

    let mut worst: f64 = 0.0;
    let mut probe = net.clone();
    for li in 0..net.layers.len() {
        let Some((wlen, blen)) = net.layers[li].params().map(|(w, b)| (w.len(), b.len())) else {
            continue;
        };
        for _ in 0..PROBES {
            let is_bias = rng.gen_bool(0.25);
            let (len, analytic) = if is_bias { (blen, &grads[li].bias) } else { (wlen, &grads[li].weight) };
            let j = rng.gen_range(0..len);
            let mut eval = |delta: f64| -> Result<f64, NnError> {
                {
                    let (pw, pb) = probe.layers[li].params_mut().expect("parameterised");
                    let target = if is_bias { pb } else { pw };
                    target[j] += delta;
                }
                let v = objective(&probe, x);
                let (pw, pb) = probe.layers[li].params_mut().expect("parameterised");
                let target = if is_bias { pb } else { pw };
                target[j] -= delta;
                v
            };
            let numeric = (eval(STEP)? - eval(-STEP)?) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[j], numeric));
        }
    }
    let mut xp = x.clone();
    for _ in 0..PROBES {
        let j = rng.gen_range(0..x.len());
        xp.data_mut()[j] += STEP;
        let plus = objective(net, &xp)?;
        xp.data_mut()[j] -= 2.0 * STEP;
        let minus = objective(net, &xp)?;
        xp.data_mut()[j] += STEP;
        worst = worst.max(relative_error(dx.data()[j], (plus - minus) / (2.0 * STEP)));
    }
    Ok(worst)
}

fn single(in_ch: usize, in_dims: [usize; 3], rank: usize, layer: Layer) -> Sequential {
    let mut net = Sequential::new(in_ch, in_dims, rank);
    net.push(layer);
    net
}

/// Named gradient-check cases covering every layer kind, in 2D and 3D.
pub fn cases() -> Vec<(&'static str, Sequential)> {
    vec![
        ("conv2d 3x3 same", single(2, [1, 7, 9], 2, Layer::Conv(Conv::same(2, 3, [1, 3, 3])))),
        (
            "conv2d stride 2",
            single(2, [1, 8, 7], 2, Layer::Conv(Conv::new(2, 2, [1, 3, 3], [1, 2, 2], [0, 1, 1]))),
        ),
        ("conv3d 3x3x3 same", single(2, [4, 5, 6], 3, Layer::Conv(Conv::same(2, 2, [3, 3, 3])))),
        (
            "conv_transpose2d k2 s2",
            single(3, [1, 4, 5], 2, Layer::ConvTranspose(ConvTranspose::new(3, 2, [1, 2, 2], [1, 2, 2], [0; 3]))),
        ),
        (
            "conv_transpose2d k3 s2 p1",
            single(2, [1, 4, 3], 2, Layer::ConvTranspose(ConvTranspose::new(2, 2, [1, 3, 3], [1, 2, 2], [0, 1, 1]))),
        ),
        (
            "conv_transpose3d k2 s2",
            single(2, [2, 3, 3], 3, Layer::ConvTranspose(ConvTranspose::new(2, 2, [2, 2, 2], [2, 2, 2], [0; 3]))),
        ),
        ("maxpool2d", single(2, [1, 6, 8], 2, Layer::MaxPool(MaxPool { kernel: [1, 2, 2] }))),
        ("maxpool3d", single(1, [4, 4, 6], 3, Layer::MaxPool(MaxPool { kernel: [2, 2, 2] }))),
        ("relu", single(3, [1, 5, 5], 2, Layer::Relu)),
        ("pad", single(2, [1, 5, 6], 2, Layer::Pad([1, 8, 8]))),
        ("crop", single(2, [1, 5, 6], 2, Layer::Crop([1, 3, 4]))),
        ("rescale down", single(2, [1, 8, 12], 2, Layer::Rescale([1, 4, 5]))),
        ("rescale up", single(1, [2, 3, 4], 3, Layer::Rescale([3, 7, 9]))),
        ("encoder-decoder", {
            let mut net = Sequential::new(2, [1, 8, 12], 2);
            net.push(Layer::Conv(Conv::same(2, 4, [1, 3, 3])));
            net.push(Layer::Relu);
            net.push(Layer::MaxPool(MaxPool { kernel: [1, 2, 2] }));
            net.push(Layer::Conv(Conv::same(4, 4, [1, 3, 3])));
            net.push(Layer::Relu);
            net.push(Layer::ConvTranspose(ConvTranspose::new(4, 3, [1, 2, 2], [1, 2, 2], [0; 3])));
            net.push(Layer::Relu);
            net.push(Layer::Conv(Conv::same(3, 1, [1, 3, 3])));
            net.push(Layer::Clamp);
            net.push(Layer::Crop([1, 7, 11]));
            net
        }),
    ]
}

/// Runs every case for one seed; returns `(name, worst relative error)`.
pub fn run_all(seed: u64) -> Result<Vec<(&'static str, f64)>, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::new();
    for (name, mut net) in cases() {
        net.init(&mut rng);
        // Non-zero biases so the bias paths are exercised.
        for layer in &mut net.layers {
            if let Some((_, b)) = layer.params_mut() {
                b.iter_mut().for_each(|v| *v = rng.gen_range(-0.1..0.1));
            }
        }
        let x = random_tensor(&net.input_shape(2), &mut rng);
        out.push((name, check_network(&net, &x, &mut rng)?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_layers_pass_for_five_seeds() {
        for seed in 0..5 {
            for (name, err) in run_all(seed).unwrap() {
                assert!(err <= 1e-6, "{name} seed {seed}: {err:e}");
            }
        }
    }

    fn t(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn unit_kernel_is_identity() {
        let mut c = Conv::same(1, 1, [1, 1, 1]);
        c.weight[0] = 1.0;
        let x = t(&[1, 1, 3, 4], (0..12).map(|v| v as f64).collect());
        assert_eq!(c.forward(&x).unwrap(), x);
    }

    #[test]
    fn ones_kernel_counts_neighbours() {
        let mut c = Conv::same(1, 1, [1, 3, 3]);
        c.weight.iter_mut().for_each(|w| *w = 1.0);
        let y = c.forward(&Tensor::filled(&[1, 1, 4, 4], 1.0)).unwrap();
        assert_eq!(y.data()[0], 4.0);
        assert_eq!(y.data()[1], 6.0);
        assert_eq!(y.data()[5], 9.0);
    }

    #[test]
    fn transposed_unit_kernel_upsamples() {
        let mut c = ConvTranspose::new(1, 1, [1, 2, 2], [1, 2, 2], [0; 3]);
        c.weight.iter_mut().for_each(|w| *w = 1.0);
        let y = c.forward(&t(&[1, 1, 1, 2], vec![3.0, 5.0])).unwrap();
        assert_eq!(y.shape(), &[1, 1, 2, 4]);
        assert_eq!(y.data(), &[3.0, 3.0, 5.0, 5.0, 3.0, 3.0, 5.0, 5.0]);
    }

    #[test]
    fn transposed_conv_is_adjoint_of_conv() {
        // <conv(x), y> == <convT(y), x> for shared weights.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut conv = Conv::new(2, 3, [1, 3, 3], [1, 2, 2], [0, 1, 1]);
        conv.init_he(&mut rng);
        let mut ct = ConvTranspose::new(3, 2, [1, 3, 3], [1, 2, 2], [0, 1, 1]);
        // conv weight [out=3, in=2, k] equals convT weight [in=3, out=2, k].
        ct.weight = conv.weight.clone();
        let x = random_tensor(&[1, 2, 9, 7], &mut rng);
        let cx = conv.forward(&x).unwrap();
        let y = random_tensor(cx.shape(), &mut rng);
        let ty = ct.forward(&y).unwrap();
        assert_eq!(ty.shape(), x.shape());
        let lhs: f64 = cx.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        let rhs: f64 = ty.data().iter().zip(x.data()).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
    }

    #[test]
    fn maxpool_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&[2, 3, 4, 6, 7], &mut rng);
        let pool = MaxPool { kernel: [2, 2, 3] };
        let (y, _) = pool.forward(&x).unwrap();
        assert_eq!(y.shape(), &[2, 3, 2, 3, 2]);
        let at = |n: usize, c: usize, z: usize, yy: usize, xx: usize| {
            x.data()[(((n * 3 + c) * 4 + z) * 6 + yy) * 7 + xx]
        };
        let mut i = 0;
        for n in 0..2 {
            for c in 0..3 {
                for oz in 0..2 {
                    for oy in 0..3 {
                        for ox in 0..2 {
                            let mut m = f64::NEG_INFINITY;
                            for a in 0..2 {
                                for b in 0..2 {
                                    for e in 0..3 {
                                        m = m.max(at(n, c, oz * 2 + a, oy * 2 + b, ox * 3 + e));
                                    }
                                }
                            }
                            assert_eq!(y.data()[i], m);
                            i += 1;
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn maxpool_ties_pick_first() {
        let pool = MaxPool { kernel: [1, 2, 2] };
        let (_, arg) = pool.forward(&Tensor::filled(&[1, 1, 2, 2], 1.0)).unwrap();
        assert_eq!(arg, vec![0]);
    }

    #[test]
    fn clamp_backward_blocks_saturated() {
        let x = t(&[1, 1, 1, 3], vec![-0.5, 0.5, 1.5]);
        let g = clamp_grad(&x);
        assert_eq!(g, vec![0.0, 1.0, 0.0]);
    }

    fn clamp_grad(x: &Tensor) -> Vec<f64> {
        super::super::clamp01_backward(x, &Tensor::filled(x.shape(), 1.0)).into_data()
    }
}
