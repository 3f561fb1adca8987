use super::*;
use crate::stats::{LayerFracLens, PartBits, PartSet, SchemeMode};
use proptest::prelude::*;

fn t(shape: &[usize], data: &[f32]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn set_layer(model: &mut Model, idx: usize, weight: &[f32], bias: &[f32]) {
    let mut p = model.params().clone();
    let l = p.layer_mut(idx).unwrap();
    l.weight.data_mut().copy_from_slice(weight);
    l.bias.data_mut().copy_from_slice(bias);
    model.set_params(p).unwrap();
}

fn scheme(model: &Model, bits: PartBits, parts: PartSet, input_fl: i32, fls: &[(i32, i32)]) -> QuantScheme {
    QuantScheme {
        mode: SchemeMode::Dynamic,
        bits,
        parts,
        input_frac_len: input_fl,
        layers: model
            .quantizable_layers()
            .zip(fls)
            .map(|((_, l), &(weight, output))| LayerFracLens {
                name: l.name.clone(),
                weight,
                output,
            })
            .collect(),
    }
}

#[test]
fn identity_inner_product_passes_input() {
    let mut m = Model::new([3, 1, 1], vec![LayerSpec::new("ip", LayerKind::InnerProduct { num_output: 3 })]).unwrap();
    set_layer(&mut m, 0, Tensor::identity(3).data(), &[0.0; 3]);
    let x = t(&[2, 3, 1, 1], &[1.0, -2.0, 3.5, 0.0, 7.0, -0.25]);
    let y = forward_float_logits(&m, &x).unwrap();
    assert_eq!(y.data(), x.data());
    assert_eq!(y.shape(), &[2, 3]);
}

#[test]
fn unit_pointwise_conv_passes_input() {
    let mut m = Model::new(
        [1, 3, 2],
        vec![LayerSpec::new("c", LayerKind::Convolution { num_output: 1, kernel: 1, stride: 1, pad: 0 })],
    )
    .unwrap();
    set_layer(&mut m, 0, &[1.0], &[0.0]);
    let x = t(&[1, 1, 3, 2], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
    let (_, rec) = forward_float(&m, &x).unwrap();
    assert_eq!(rec.output(0).data(), x.data());
}

#[test]
fn max_pool_picks_maximum() {
    let m = Model::new([1, 2, 2], vec![LayerSpec::new("p", LayerKind::MaxPool { kernel: 2, stride: 2 })]).unwrap();
    let y = forward_float_logits(&m, &t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    assert_eq!(y.data(), &[4.0]);
    let a = Model::new([1, 2, 2], vec![LayerSpec::new("p", LayerKind::AvgPool { kernel: 2, stride: 2 })]).unwrap();
    let y = forward_float_logits(&a, &t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0])).unwrap();
    assert_eq!(y.data(), &[2.5]);
}

#[test]
fn model_validation() {
    let ip = |n: &str| LayerSpec::new(n, LayerKind::InnerProduct { num_output: 2 });
    assert!(Model::new([1, 1, 1], vec![]).is_err());
    assert!(Model::new([0, 1, 1], vec![ip("a")]).is_err());
    assert!(Model::new([1, 1, 1], vec![ip("a"), ip("a")]).is_err());
    assert!(Model::new([1, 1, 1], vec![ip("a b")]).is_err());
    assert!(Model::new([1, 1, 1], vec![LayerSpec::new("l", LayerKind::SoftmaxLoss), ip("a")]).is_err());
    assert!(Model::new(
        [1, 4, 4],
        vec![LayerSpec::new("c", LayerKind::Convolution { num_output: 1, kernel: 5, stride: 1, pad: 0 })]
    )
    .is_err());
    let m = lenet();
    assert_eq!(m.layer_output_shape(0), [20, 24, 24]);
    assert_eq!(m.layer_output_shape(3), [50, 4, 4]);
    assert_eq!(m.class_count(), 10);
    assert_eq!(m.params().element_count(), 500 + 20 + 25_000 + 50 + 400_000 + 500 + 5000 + 10);
    assert!(forward_float_logits(&m, &Tensor::zeros(&[1, 1, 28, 27])).is_err());
}

fn fc_example() -> Model {
    let mut m = Model::new([2, 1, 1], vec![LayerSpec::new("ip", LayerKind::InnerProduct { num_output: 1 })]).unwrap();
    set_layer(&mut m, 0, &[0.3, -3.0], &[0.0]);
    m
}

#[test]
fn quantized_inner_product_example() {
    let m = fc_example();
    let bits = PartBits { conv_weights: 8, fc_weights: 8, layer_outputs: 16 };
    let s = scheme(&m, bits, PartSet::ALL, 8, &[(6, 8)]);
    let net = QuantizedNet::new(&m, &s).unwrap();
    assert_eq!(net.params().layer(0).unwrap().weight.data(), &[0.296875, -2.0]);
    let y = net.forward(&t(&[1, 2, 1, 1], &[1.0, 1.0])).unwrap();
    assert_eq!(y.data(), &[-1.703125]);
    // a coarser output grid rounds the accumulation: -1.703125 * 4 = -6.8125 -> -7
    let s = scheme(&m, bits, PartSet::ALL, 8, &[(6, 2)]);
    let y = forward_quantized(&m, &s, &t(&[1, 2, 1, 1], &[1.0, 1.0])).unwrap();
    assert_eq!(y.data(), &[-1.75]);
}

#[test]
fn disabled_parts_stay_float() {
    let m = fc_example();
    let bits = PartBits::uniform(4);
    let s = scheme(&m, bits, PartSet::only(Part::LayerOutputs), 2, &[(0, 2)]);
    let net = QuantizedNet::new(&m, &s).unwrap();
    assert_eq!(net.params().layer(0).unwrap().weight.data(), &[0.3, -3.0]);
    let s = scheme(&m, bits, PartSet::NONE, 2, &[(0, 2)]);
    let x = t(&[1, 2, 1, 1], &[0.7, 0.1]);
    assert_eq!(
        forward_quantized(&m, &s, &x).unwrap(),
        forward_float_logits(&m, &x).unwrap()
    );
}

#[test]
fn zero_model_gives_zero_logits() {
    let m = lenet();
    let bits = PartBits::uniform(2);
    let s = scheme(&m, bits, PartSet::ALL, 0, &[(1, 1); 4]);
    let x = Tensor::from_fn(&[2, 1, 28, 28], |i| (i % 7) as f32 - 3.0);
    let y = forward_quantized(&m, &s, &x).unwrap();
    assert!(y.data().iter().all(|v| *v == 0.0));
}

fn small_net(seed: u64) -> Model {
    let mut m = Model::new(
        [2, 6, 6],
        vec![
            LayerSpec::new("conv1", LayerKind::Convolution { num_output: 3, kernel: 3, stride: 1, pad: 1 }),
            LayerSpec::new("pool1", LayerKind::MaxPool { kernel: 2, stride: 2 }),
            LayerSpec::new("conv2", LayerKind::Convolution { num_output: 4, kernel: 2, stride: 1, pad: 0 }),
            LayerSpec::new("relu", LayerKind::ReLU),
            LayerSpec::new("pool2", LayerKind::AvgPool { kernel: 2, stride: 1 }),
            LayerSpec::new("ip1", LayerKind::InnerProduct { num_output: 5 }),
            LayerSpec::new("ip2", LayerKind::InnerProduct { num_output: 3 }),
            LayerSpec::new("loss", LayerKind::SoftmaxLoss),
        ],
    )
    .unwrap();
    m.init_params(seed);
    let mut p = m.params().clone();
    let mut k = 0.0f32;
    for l in p.layers_mut().iter_mut().flatten() {
        for b in l.bias.data_mut() {
            k += 1.0;
            *b = 0.05 * libm::sinf(k);
        }
    }
    m.set_params(p).unwrap();
    m
}

fn batch(seed: u32) -> Tensor {
    Tensor::from_fn(&[3, 2, 6, 6], |i| libm::sinf(i as f32 * 0.37 + seed as f32))
}

#[test]
fn exact_scheme_matches_float() {
    let mut m = small_net(3);
    // put every weight on a fine grid first so 32-bit quantization is exact
    let fine = crate::fxp::FixedPointFormat::new(32, 20).unwrap();
    let mut p = m.params().clone();
    for l in p.layers_mut().iter_mut().flatten() {
        fine.quantizer().nearest_slice(l.weight.data_mut());
    }
    m.set_params(p).unwrap();
    let x = batch(1);
    let s = scheme(&m, PartBits::uniform(32), PartSet::ALL, 20, &[(20, 20); 4]);
    let q = forward_quantized(&m, &s, &x).unwrap();
    let f = forward_float_logits(&m, &x).unwrap();
    for (a, b) in q.data().iter().zip(f.data()) {
        assert!((a - b).abs() < 1e-5, "{a} vs {b}");
    }
}

#[test]
fn quantized_outputs_lie_on_grid() {
    let m = small_net(5);
    let fls = [(3, 4), (2, 3), (1, 2), (2, 1)];
    let s = scheme(&m, PartBits { conv_weights: 6, fc_weights: 5, layer_outputs: 7 }, PartSet::ALL, 5, &fls);
    let net = QuantizedNet::new(&m, &s).unwrap();
    let rec = net.forward_record(&batch(2)).unwrap();
    let fmt_in = s.input_format().unwrap().unwrap();
    assert!(rec.input(0).data().iter().all(|v| fmt_in.contains(*v as f64)));
    for (idx, layer) in m.quantizable_layers() {
        let fmt = s.output_format(&layer.name).unwrap().unwrap();
        assert!(rec.output(idx).data().iter().all(|v| fmt.contains(*v as f64)), "{}", layer.name);
        let wf = s.weight_format(layer).unwrap().unwrap();
        assert!(net.params().layer(idx).unwrap().weight.data().iter().all(|v| wf.contains(*v as f64)));
    }
    // average pooling after conv2/relu re-quantizes in conv2's output format
    let conv2 = s.output_format("conv2").unwrap().unwrap();
    assert!(rec.output(4).data().iter().all(|v| conv2.contains(*v as f64)));
}

#[test]
fn logistic_regression_gradient_closed_form() {
    let mut m = Model::new(
        [3, 1, 1],
        vec![
            LayerSpec::new("ip", LayerKind::InnerProduct { num_output: 2 }),
            LayerSpec::new("loss", LayerKind::SoftmaxLoss),
        ],
    )
    .unwrap();
    set_layer(&mut m, 0, &[0.2, -0.1, 0.4, 0.3, 0.5, -0.6], &[0.1, -0.2]);
    let x = [1.0f32, 2.0, -1.0];
    let (_, rec) = forward_float(&m, &t(&[1, 3, 1, 1], &x)).unwrap();
    let g = backward(&m, &rec, &[1]).unwrap();
    let z = [0.2 - 0.2 - 0.4 + 0.1, 0.3 + 1.0 + 0.6 - 0.2f64];
    let e = [libm::exp(z[0]), libm::exp(z[1])];
    let p = [e[0] / (e[0] + e[1]), e[1] / (e[0] + e[1])];
    let delta = [p[0], p[1] - 1.0];
    let gl = g.params.layer(0).unwrap();
    for o in 0..2 {
        assert!((gl.bias.data()[o] as f64 - delta[o]).abs() < 1e-6);
        for i in 0..3 {
            let want = delta[o] * x[i] as f64;
            assert!((gl.weight.data()[o * 3 + i] as f64 - want).abs() < 1e-6);
        }
    }
    assert!((g.loss as f64 + libm::log(p[1])).abs() < 1e-6);
}

#[test]
fn confident_correct_prediction_has_tiny_gradient() {
    let mut m = Model::new([2, 1, 1], vec![LayerSpec::new("ip", LayerKind::InnerProduct { num_output: 2 })]).unwrap();
    set_layer(&mut m, 0, &[40.0, 0.0, -40.0, 0.0], &[0.0, 0.0]);
    let (_, rec) = forward_float(&m, &t(&[1, 2, 1, 1], &[1.0, 0.0])).unwrap();
    let g = backward(&m, &rec, &[0]).unwrap();
    assert!(g.params.tensors().flat_map(|t| t.data()).all(|v| v.abs() < 1e-6));
}

fn loss_of(m: &Model, x: &Tensor, labels: &[usize]) -> f64 {
    let logits = forward_float_logits(m, x).unwrap();
    // f64 softmax cross-entropy so the difference quotient is not limited by f32 loss rounding
    let classes = logits.shape()[1];
    let mut loss = 0.0;
    for (row, &l) in logits.data().chunks(classes).zip(labels) {
        let mx = row.iter().fold(f64::NEG_INFINITY, |a, b| a.max(*b as f64));
        let s: f64 = row.iter().map(|v| libm::exp(*v as f64 - mx)).sum();
        loss -= row[l] as f64 - mx - libm::log(s);
    }
    loss / labels.len() as f64
}

#[test]
fn finite_difference_gradients() {
    let m = small_net(11);
    let x = batch(4);
    let labels = [0, 2, 1];
    let (_, rec) = forward_float(&m, &x).unwrap();
    let g = backward(&m, &rec, &labels).unwrap();
    assert!((g.loss as f64 - loss_of(&m, &x, &labels)).abs() < 1e-5);
    let h = 1e-3f32;
    let mut checked = 0;
    for (idx, layer) in m.quantizable_layers() {
        let ana = g.params.layer(idx).unwrap();
        for which in 0..2 {
            let len = if which == 0 { ana.weight.len() } else { ana.bias.len() };
            for j in (0..len).step_by(len.div_ceil(7).max(1)) {
                let eval = |delta: f32| {
                    let mut p = m.params().clone();
                    let l = p.layer_mut(idx).unwrap();
                    let tgt = if which == 0 { &mut l.weight } else { &mut l.bias };
                    tgt.data_mut()[j] += delta;
                    loss_of(&m.clone().with_params(p).unwrap(), &x, &labels)
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h as f64);
                let a = if which == 0 { ana.weight.data()[j] } else { ana.bias.data()[j] } as f64;
                let scale = num.abs().max(a.abs());
                if scale < 1e-4 {
                    assert!((num - a).abs() < 1e-5, "{} {which} {j}: {num} vs {a}", layer.name);
                } else {
                    assert!((num - a).abs() / scale < 1e-2, "{} {which} {j}: {num} vs {a}", layer.name);
                }
                checked += 1;
            }
        }
    }
    assert!(checked >= 40);
}

#[test]
fn finite_difference_input_gradient_through_every_layer_kind() {
    // gradient w.r.t. the first layer's bias depends on backprop through
    // max pool, conv, relu, avg pool and both inner products
    let m = small_net(17);
    let x = batch(9);
    let labels = [2, 2, 0];
    let (_, rec) = forward_float(&m, &x).unwrap();
    let g = backward(&m, &rec, &labels).unwrap();
    for c in 0..3 {
        let eval = |d: f32| {
            let mut p = m.params().clone();
            p.layer_mut(0).unwrap().bias.data_mut()[c] += d;
            loss_of(&m.clone().with_params(p).unwrap(), &x, &labels)
        };
        let num = (eval(1e-3) - eval(-1e-3)) / 2e-3;
        let a = g.params.layer(0).unwrap().bias.data()[c] as f64;
        assert!((num - a).abs() <= 1e-2 * num.abs().max(a.abs()) + 1e-5, "{num} vs {a}");
    }
}

#[test]
fn backward_rejects_foreign_record() {
    let m = small_net(1);
    let other = fc_example();
    let (_, rec) = forward_float(&other, &t(&[1, 2, 1, 1], &[1.0, 1.0])).unwrap();
    assert!(backward(&m, &rec, &[0]).is_err());
    let (_, rec) = forward_float(&m, &batch(0)).unwrap();
    assert!(backward(&m, &rec, &[0, 1]).is_err());
    assert!(matches!(backward(&m, &rec, &[0, 1, 3]), Err(Error::LabelOutOfRange { .. })));
}

#[test]
fn datapath_examples() {
    let m = lenet();
    let conv2 = &m.layers()[2];
    let row = datapath_widths(conv2, m.layer_input_shape(2), 8, 8).unwrap();
    assert_eq!(row.x, 500);
    assert_eq!(row.product_width, 16);
    assert_eq!(row.accumulator_width, 25);
    assert_eq!(row.bias_stage_width, 26);
    let mut levels: Vec<u32> = (18..=25).collect();
    levels.push(25);
    assert_eq!(row.adder_level_widths, levels);

    let pw = LayerSpec::new("pw", LayerKind::Convolution { num_output: 1, kernel: 1, stride: 1, pad: 0 });
    let row = datapath_widths(&pw, [1, 4, 4], 8, 8).unwrap();
    assert_eq!((row.accumulator_width, row.adder_level_widths.len()), (16, 0));
    let ip = LayerSpec::new("ip", LayerKind::InnerProduct { num_output: 3 });
    let row = datapath_widths(&ip, [1024, 1, 1], 4, 2).unwrap();
    assert_eq!(row.accumulator_width, 16);
    assert!(datapath_widths(&LayerSpec::new("r", LayerKind::ReLU), [1, 1, 1], 8, 8).is_err());
}

#[test]
fn lenet_datapath_table() {
    let m = lenet();
    let s = scheme(&m, PartBits::uniform(8), PartSet::ALL, 0, &[(0, 0); 4]);
    let report = datapath_report(&m, &s).unwrap();
    let got: Vec<_> = report.rows.iter().map(|r| (r.layer.as_str(), r.x, r.accumulator_width)).collect();
    // x: 1*5*5, 20*5*5, 50*4*4, 500; widths 16 + ceil(lg2 x)
    assert_eq!(got, [("conv1", 25, 21), ("conv2", 500, 25), ("ip1", 800, 26), ("ip2", 500, 25)]);
}

#[test]
fn ceil_log2_values() {
    let cases = [(0, 0), (1, 0), (2, 1), (3, 2), (4, 2), (5, 3), (500, 9), (512, 9), (513, 10), (1024, 10)];
    for (x, want) in cases {
        assert_eq!(ceil_log2(x), want, "{x}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]
    #[test]
    fn datapath_levels_are_capped(x in 1usize..100_000, m in 2u32..17, n in 2u32..17) {
        let ip = LayerSpec::new("ip", LayerKind::InnerProduct { num_output: 1 });
        let row = datapath_widths(&ip, [x, 1, 1], m, n).unwrap();
        prop_assert_eq!(row.adder_level_widths.len() as u32, ceil_log2(x));
        prop_assert!(1u64 << row.adder_level_widths.len() >= x as u64);
        let acc = row.product_width + ceil_log2(x);
        for (k, w) in row.adder_level_widths.iter().enumerate() {
            prop_assert_eq!(*w, (row.product_width + k as u32 + 2).min(acc));
        }
        prop_assert_eq!(row.accumulator_width, acc);
        prop_assert_eq!(row.bias_stage_width, acc + 1);
        // x products of m+n bits never overflow the accumulator
        let max_sum = (x as f64) * libm::pow(2.0, (m + n - 2) as f64);
        prop_assert!(max_sum <= libm::pow(2.0, (row.accumulator_width - 1) as f64));
    }
}
