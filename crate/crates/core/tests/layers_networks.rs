use std::collections::BTreeMap;

use largo_core::conv::ConvGeometry;
use largo_core::kernels::{cp_param_count, LayerDims};
use largo_core::layers::{lrconv_forward, LrConvLayer, LayerWeight, ModalityInputs, NormLayer, StemBank, WeightKind, NORM_EPS};
use largo_core::networks::{
    build_dedicated_family, build_fusion_classifier, build_unet_hyper, count_parameters, param_group, Body, Model,
    ModelKind, NetworkSpec, ParamCounts,
};
use largo_core::params::{Graph, ParamStore};
use largo_core::subset::ModalityMask;
use largo_core::{DenseTensor, Error, RngState};
use proptest::prelude::*;

fn random(rng: &mut RngState, shape: &[usize]) -> DenseTensor {
    DenseTensor::from_fn(shape, |_| rng.normal()).unwrap()
}

fn randomize(store: &mut ParamStore, seed: u64) {
    let mut rng = RngState::new(seed);
    for (_, t) in store.iter_mut() {
        for v in t.data_mut() {
            *v = rng.normal();
        }
    }
}

/// Direct 2D convolution with zero padding: `y[o, p, q] = b[o] + sum w[i, o, ky*kw + kx] x[i, p*s + ky - pad, q*s + kx - pad]`.
fn naive_conv2d(x: &DenseTensor, w: &DenseTensor, bias: &[f64], kh: usize, kw: usize, stride: usize, pad: usize) -> DenseTensor {
    let (c_in, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let c_out = w.shape()[1];
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut y = DenseTensor::zeros(&[c_out, oh, ow]).unwrap();
    for o in 0..c_out {
        for p in 0..oh {
            for q in 0..ow {
                let mut s = bias[o];
                for i in 0..c_in {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let (r, c) = ((p * stride + ky) as isize - pad as isize, (q * stride + kx) as isize - pad as isize);
                            if r < 0 || c < 0 || r >= h as isize || c >= wd as isize {
                                continue;
                            }
                            s += w.get(&[i, o, ky * kw + kx]) * x.get(&[i, r as usize, c as usize]);
                        }
                    }
                }
                y.set(&[o, p, q], s);
            }
        }
    }
    y
}

fn cp_layer(m_count: usize, c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, rank: usize, transposed: bool) -> LrConvLayer {
    let dims = LayerDims::new(m_count, c_in, c_out, k * k).unwrap();
    let w = LayerWeight::new("l", dims, WeightKind::Cp { rank }).unwrap();
    LrConvLayer::new(w, ConvGeometry::cube(2, k, stride, pad).unwrap(), transposed).unwrap()
}

fn store_for(layer: &LrConvLayer, seed: u64) -> ParamStore {
    let mut s = ParamStore::from_infos(&layer.weight.param_infos(), &mut RngState::new(0)).unwrap();
    randomize(&mut s, seed);
    s
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(60))]

    #[test]
    fn lrconv_matches_naive_convolution(
        c_in in 1usize..=4, c_out in 1usize..=4, h in 3usize..=7, w in 3usize..=7,
        k in prop_oneof![Just(1usize), Just(3), Just(5)], stride in 1usize..=2, rank in 1usize..=4,
        m in 1usize..=3, seed in any::<u64>(),
    ) {
        let pad = k / 2;
        let layer = cp_layer(3, c_in, c_out, k, stride, pad, rank, false);
        let store = store_for(&layer, seed);
        let x = random(&mut RngState::new(seed ^ 1), &[c_in, h, w]);
        let y = lrconv_forward(&layer, &store, &x, m).unwrap();
        let kernel = layer.weight.cp_kernel(&store).unwrap();
        let slice = kernel.reconstruct_slice(m).unwrap();
        let bias = kernel.bias.row(m - 1).unwrap();
        let oracle = naive_conv2d(&x, &slice, bias.data(), k, k, stride, pad);
        prop_assert!(y.rel_diff(&oracle) <= 1e-10, "rel {}", y.rel_diff(&oracle));
    }
}

#[test]
fn lrconv_on_spec_instance() {
    // 4x5 input, 3x3 kernel, padding 1.
    let layer = cp_layer(3, 2, 3, 3, 1, 1, 5, false);
    let store = store_for(&layer, 11);
    let x = random(&mut RngState::new(12), &[2, 4, 5]);
    for m in 1..=3 {
        let y = lrconv_forward(&layer, &store, &x, m).unwrap();
        let k = layer.weight.cp_kernel(&store).unwrap();
        let oracle = naive_conv2d(&x, &k.reconstruct_slice(m).unwrap(), k.bias.row(m - 1).unwrap().data(), 3, 3, 1, 1);
        assert_eq!(y.shape(), &[3, 4, 5]);
        assert!(y.rel_diff(&oracle) <= 1e-10);
    }
    assert!(matches!(lrconv_forward(&layer, &store, &x, 0), Err(Error::Index { .. })));
    assert!(matches!(lrconv_forward(&layer, &store, &x, 4), Err(Error::Index { .. })));
    let wrong = random(&mut RngState::new(0), &[3, 4, 5]);
    assert!(lrconv_forward(&layer, &store, &wrong, 1).is_err());
}

#[test]
fn zero_a_row_gives_bias() {
    let layer = cp_layer(3, 2, 3, 3, 1, 1, 2, false);
    let mut store = store_for(&layer, 13);
    let mut a = store.get("l/A").unwrap().clone();
    for r in 0..2 {
        a.set(&[1, r], 0.0);
    }
    store.set("l/A", a).unwrap();
    let x = random(&mut RngState::new(1), &[2, 4, 4]);
    let y = lrconv_forward(&layer, &store, &x, 2).unwrap();
    let bias = store.get("l/bias").unwrap().row(1).unwrap();
    for o in 0..3 {
        for p in 0..4 {
            for q in 0..4 {
                assert_eq!(y.get(&[o, p, q]), bias.data()[o]);
            }
        }
    }
}

#[test]
fn lrconv_is_linear_in_x() {
    let layer = cp_layer(3, 3, 2, 3, 1, 1, 3, false);
    let mut store = store_for(&layer, 14);
    store.set("l/bias", DenseTensor::zeros(&[3, 2]).unwrap()).unwrap();
    let mut rng = RngState::new(2);
    let x = random(&mut rng, &[3, 5, 5]);
    let z = random(&mut rng, &[3, 5, 5]);
    let combo = x.scale(1.5).add(&z.scale(-0.7)).unwrap();
    let f = |t: &DenseTensor| lrconv_forward(&layer, &store, t, 2).unwrap();
    let expect = f(&x).scale(1.5).add(&f(&z).scale(-0.7)).unwrap();
    assert!(f(&combo).rel_diff(&expect) <= 1e-10);
}

fn transposed_forward(layer: &LrConvLayer, store: &ParamStore, x: &DenseTensor, m: usize) -> DenseTensor {
    lrconv_forward(layer, store, x, m).unwrap()
}

#[test]
fn transposed_conv_is_the_adjoint() {
    let mut rng = RngState::new(3);
    for (k, stride, pad, h) in [(2, 2, 0, 6), (3, 2, 1, 5), (3, 1, 1, 4)] {
        let (c_in, c_out) = (3, 2);
        let fwd = cp_layer(1, c_in, c_out, k, stride, pad, 2, false);
        let store = store_for(&fwd, 15);
        let mut zero_bias = store.clone();
        zero_bias.set("l/bias", DenseTensor::zeros(&[1, c_out]).unwrap()).unwrap();
        // The transposed layer reads C_out channels; its kernel is the forward one with the channel modes swapped.
        let w = fwd.weight.cp_kernel(&zero_bias).unwrap().reconstruct_slice(1).unwrap();
        let wt = w.permute(&[1, 0, 2]).unwrap();
        let dims = LayerDims::new(1, c_out, c_in, k * k).unwrap();
        let tw = LayerWeight::new("t", dims, WeightKind::Dense).unwrap();
        let tl = LrConvLayer::new(tw, ConvGeometry::cube(2, k, stride, pad).unwrap(), true).unwrap();
        let mut ts = ParamStore::new();
        ts.insert("t/weight", wt).unwrap();
        ts.insert("t/bias", DenseTensor::zeros(&[c_in]).unwrap()).unwrap();

        let x = random(&mut rng, &[c_in, h, h]);
        let y_fwd = lrconv_forward(&fwd, &zero_bias, &x, 1).unwrap();
        let y = random(&mut rng, y_fwd.shape());
        let back = transposed_forward(&tl, &ts, &y, 1);
        assert_eq!(back.shape(), x.shape());
        let lhs = y_fwd.dot(&y).unwrap();
        let rhs = x.dot(&back).unwrap();
        assert!((lhs - rhs).abs() <= 1e-10 * lhs.abs().max(1.0), "{lhs} vs {rhs}");
    }
}

#[test]
fn transposed_impulse_and_shape() {
    let dims = LayerDims::new(1, 1, 1, 4).unwrap();
    let w = LayerWeight::new("t", dims, WeightKind::Dense).unwrap();
    let layer = LrConvLayer::new(w, ConvGeometry::cube(2, 2, 2, 0).unwrap(), true).unwrap();
    let mut store = ParamStore::new();
    // One-hot kernel at (ky, kx) = (1, 0).
    store.insert("t/weight", DenseTensor::new(vec![1, 1, 4], vec![0., 0., 1., 0.]).unwrap()).unwrap();
    store.insert("t/bias", DenseTensor::zeros(&[1]).unwrap()).unwrap();
    let mut x = DenseTensor::zeros(&[1, 3, 4]).unwrap();
    x.set(&[0, 1, 2], 1.0);
    let y = lrconv_forward(&layer, &store, &x, 1).unwrap();
    assert_eq!(y.shape(), &[1, 6, 8]);
    assert_eq!(y.sum(), 1.0);
    assert_eq!(y.get(&[0, 3, 4]), 1.0);
}

#[test]
fn identity_conv_and_linear_count() {
    let layer = cp_layer(1, 1, 1, 1, 1, 0, 1, false);
    let mut store = ParamStore::new();
    for p in ["l/A", "l/B", "l/C"] {
        store.insert(p, DenseTensor::ones(&[1, 1]).unwrap()).unwrap();
    }
    store.insert("l/bias", DenseTensor::zeros(&[1, 1]).unwrap()).unwrap();
    let x = random(&mut RngState::new(4), &[1, 3, 3]);
    assert_eq!(lrconv_forward(&layer, &store, &x, 1).unwrap(), x);

    let dims = LayerDims::new(3, 64, 128, 1).unwrap();
    let w = LayerWeight::new("fc", dims, WeightKind::Cp { rank: 42 }).unwrap();
    assert_eq!(w.param_count(), (3 + 64 + 128) * 42 + 3 * 128);
    assert_eq!(w.param_count(), cp_param_count(&dims, 42));
}

fn stem_inputs(g: &mut Graph, order: &[usize], rng: &mut RngState) -> ModalityInputs {
    let mut inputs = BTreeMap::new();
    for &n in order {
        inputs.insert(n, g.input(random(rng, &[1, 1, 4, 4])));
    }
    inputs
}

#[test]
fn stem_bank_routing() {
    let geom = ConvGeometry::cube(2, 3, 1, 1).unwrap();
    let bank = StemBank::new("stem", 3, &(1..=7).collect::<Vec<_>>(), 4, &geom).unwrap();
    assert_eq!(bank.convs.len(), 7);
    for (&m, conv) in &bank.convs {
        assert_eq!(conv.weight.dims.c_in, (m as u32).count_ones() as usize);
    }
    assert_eq!(ModalityMask::from_modalities(&[0], 3).unwrap().index(), 1);
    assert_eq!(ModalityMask::from_modalities(&[0, 1, 2], 3).unwrap().index(), 7);

    let store = ParamStore::from_infos(&bank.param_infos(), &mut RngState::new(5)).unwrap();
    let mask = ModalityMask::new(0b101, 3).unwrap();
    let run = |order: &[usize]| {
        let mut g = Graph::new(&store, false);
        // Same draws per modality regardless of insertion order.
        let mut inputs = BTreeMap::new();
        for &n in order {
            inputs.insert(n, g.input(random(&mut RngState::new(n as u64), &[1, 1, 4, 4])));
        }
        let y = bank.forward(&mut g, &inputs, mask).unwrap();
        g.value(y).clone()
    };
    assert_eq!(run(&[0, 2]), run(&[2, 0]));

    let mut g = Graph::new(&store, false);
    let mut rng = RngState::new(6);
    let extra = stem_inputs(&mut g, &[0, 1, 2], &mut rng);
    assert!(matches!(bank.forward(&mut g, &extra, mask), Err(Error::ModalityMismatch(_))));
    let missing = stem_inputs(&mut g, &[0], &mut rng);
    assert!(matches!(bank.forward(&mut g, &missing, mask), Err(Error::ModalityMismatch(_))));
}

#[test]
fn instance_norm_recomputes_statistics() {
    let norm = NormLayer::new("n", 3, None);
    let mut store = ParamStore::new();
    let gamma = DenseTensor::vector(&[1.5, -0.5, 2.0]).unwrap();
    let beta = DenseTensor::vector(&[0.1, 0.2, -0.3]).unwrap();
    store.insert("n/gamma", gamma.clone()).unwrap();
    store.insert("n/beta", beta.clone()).unwrap();
    let mut rng = RngState::new(7);
    let raw = random(&mut rng, &[2, 3, 4, 5]);
    // Standardize each (b, c) run exactly.
    let mut x = raw.clone();
    for run in x.data_mut().chunks_mut(20) {
        let mean = run.iter().sum::<f64>() / 20.0;
        let var = run.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0;
        run.iter_mut().for_each(|v| *v = (*v - mean) / var.sqrt());
    }
    let mut g = Graph::new(&store, false);
    let xv = g.input(x.clone());
    let y = norm.instance(&mut g, xv, 0).unwrap();
    let y = g.value(y).clone();
    let mut oracle = x.clone();
    let mut affine = x.clone();
    for (i, (o, a)) in oracle.data_mut().iter_mut().zip(affine.data_mut()).enumerate() {
        let c = (i / 20) % 3;
        let v = x.data()[i];
        // Mean 0 and variance 1 already; only eps remains.
        *o = gamma.data()[c] * v / (1.0 + NORM_EPS).sqrt() + beta.data()[c];
        *a = gamma.data()[c] * v + beta.data()[c];
    }
    assert!(y.rel_diff(&oracle) <= 1e-6);
    assert!(y.rel_diff(&affine) <= 1e-5);

    // A constant channel maps to beta.
    let mut g = Graph::new(&store, false);
    let xv = g.input(DenseTensor::full(&[1, 3, 2, 2], 4.0).unwrap());
    let y = norm.instance(&mut g, xv, 0).unwrap();
    for (i, v) in g.value(y).data().iter().enumerate() {
        assert!((v - beta.data()[i / 4]).abs() < 1e-12);
    }
    let mut g = Graph::new(&store, false);
    let xv = g.input(DenseTensor::zeros(&[1, 3, 1, 1]).unwrap());
    assert!(norm.instance(&mut g, xv, 0).is_err());
}

fn toy_spec() -> NetworkSpec {
    largo_core::config::Config::load(std::path::Path::new(concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/toy_seg.toml")))
        .unwrap()
        .network
}

#[test]
fn toy_unet_output_shape() {
    let spec = toy_spec();
    let (model, store) = build_unet_hyper(&spec, &mut RngState::new(1)).unwrap();
    let mut g = Graph::new(&store, false);
    let mut inputs = BTreeMap::new();
    let mut rng = RngState::new(2);
    for n in 0..2 {
        inputs.insert(n, g.input(random(&mut rng, &[2, 1, 32, 32])));
    }
    let y = model.forward(&mut g, &inputs, ModalityMask::full(2).unwrap()).unwrap();
    assert_eq!(g.value(y).shape(), &[2, 3, 32, 32]);
    assert!(g.value(y).is_finite());
    // Forward is deterministic.
    let y2 = model.forward(&mut g, &inputs, ModalityMask::full(2).unwrap()).unwrap();
    assert_eq!(g.value(y), g.value(y2));
    // Indivisible input size is rejected.
    let mut odd = BTreeMap::new();
    odd.insert(0, g.input(random(&mut rng, &[1, 1, 30, 30])));
    odd.insert(1, g.input(random(&mut rng, &[1, 1, 30, 30])));
    assert!(model.forward(&mut g, &odd, ModalityMask::full(2).unwrap()).is_err());
}

/// Per path: indices of the rows with a nonzero gradient, or `None` for "all".
fn touched(model: &Model, store: &ParamStore, m: usize) -> BTreeMap<String, Vec<usize>> {
    let mut g = Graph::new(store, true);
    let mask = ModalityMask::new(m, 2).unwrap();
    let mut inputs = BTreeMap::new();
    let mut rng = RngState::new(3);
    for n in mask.modalities() {
        inputs.insert(n, g.input(random(&mut rng, &[1, 1, 16, 16])));
    }
    let y = model.forward(&mut g, &inputs, mask).unwrap();
    let p = g.input(random(&mut rng, g.value(y).shape()));
    let prod = g.tape.mul(y, p).unwrap();
    let loss = g.tape.sum(prod);
    let grads = g.gradients(loss).unwrap();
    grads
        .into_iter()
        .filter(|(_, t)| t.max_abs() > 0.0)
        .map(|(path, t)| {
            let rows = if t.rank() >= 2 && store.get(&path).unwrap().shape()[0] == 3 && !path.ends_with("/B") && !path.ends_with("/C") && !path.ends_with("/D") {
                (0..3).filter(|&r| t.row(r).unwrap().max_abs() > 0.0).collect()
            } else {
                vec![usize::MAX]
            };
            (path, rows)
        })
        .collect()
}

#[test]
fn subset_changes_only_per_model_parameters() {
    let mut spec = toy_spec();
    spec.channels = vec![4, 8];
    let (model, mut store) = build_unet_hyper(&spec, &mut RngState::new(4)).unwrap();
    randomize(&mut store, 5);
    let t1 = touched(&model, &store, 1);
    let t2 = touched(&model, &store, 2);
    assert!(t1.contains_key("stem/m1/weight") && !t1.contains_key("stem/m2/weight"));
    assert!(t2.contains_key("stem/m2/weight") && !t2.contains_key("stem/m1/weight"));
    assert!(t1.contains_key("head/m1/weight") && !t1.contains_key("head/m2/weight"));
    for (path, rows) in &t1 {
        match param_group(path) {
            "stem" | "head" => {}
            _ if path.ends_with("/B") || path.ends_with("/C") || path.ends_with("/D") => {
                assert!(t2.contains_key(path), "{path} shared factor untouched by m=2");
            }
            _ => {
                assert_eq!(rows, &vec![0], "{path}");
                assert_eq!(t2[path], vec![1], "{path}");
            }
        }
    }
}

#[test]
fn fusion_classifier_structure() {
    let spec = NetworkSpec {
        task: largo_core::networks::Task::Classification,
        n_modalities: 2,
        classes: 10,
        feature_widths: vec![160, 320],
        ..toy_spec()
    };
    let (model, mut store) = build_fusion_classifier(&spec, &mut RngState::new(1)).unwrap();
    let Body::Fusion(f) = &model.members[0].body else { panic!("not a fusion body") };
    assert_eq!(f.projections.len(), 3);
    assert_eq!(f.heads.len(), 3);
    assert_eq!(f.blocks.len(), 3);
    for p in f.projections.values() {
        assert_eq!(p.weight.dims.c_out, 64);
    }
    assert_eq!(f.projections[&1].weight.dims.c_in, 160);
    assert_eq!(f.projections[&2].weight.dims.c_in, 320);
    assert_eq!(f.projections[&3].weight.dims.c_in, 480);
    for b in &f.blocks {
        assert_eq!((b.fc0.weight.dims.c_in, b.fc0.weight.dims.c_out), (64, 128));
        assert_eq!((b.fc1.weight.dims.c_in, b.fc1.weight.dims.c_out), (128, 64));
        assert_eq!(b.fc0.weight.rank(), Some(42));
    }

    // Zeroing both linear layers of every block turns them into identities.
    let mut rng = RngState::new(2);
    let feats: Vec<DenseTensor> = vec![random(&mut rng, &[4, 160]), random(&mut rng, &[4, 320])];
    let run = |store: &ParamStore| {
        let mut g = Graph::new(store, false);
        let inputs: ModalityInputs = feats.iter().enumerate().map(|(n, t)| (n, g.input(t.clone()))).collect();
        let y = model.forward(&mut g, &inputs, ModalityMask::full(2).unwrap()).unwrap();
        g.value(y).clone()
    };
    let mut zeroed = store.clone();
    for (path, t) in zeroed.iter_mut() {
        if path.starts_with("fuse") && !path.contains("/norm/") {
            t.data_mut().iter_mut().for_each(|v| *v = 0.0);
        }
    }
    let mut no_blocks_spec = spec.clone();
    no_blocks_spec.fusion_blocks = 0;
    let plain = Model::new(&no_blocks_spec, ModelKind::Hyper).unwrap();
    let mut plain_store = ParamStore::new();
    for info in plain.param_infos() {
        plain_store.insert(&info.path, zeroed.get(&info.path).unwrap().clone()).unwrap();
    }
    let mut g = Graph::new(&plain_store, false);
    let inputs: ModalityInputs = feats.iter().enumerate().map(|(n, t)| (n, g.input(t.clone()))).collect();
    let y = plain.forward(&mut g, &inputs, ModalityMask::full(2).unwrap()).unwrap();
    assert!(run(&zeroed).rel_diff(g.value(y)) < 1e-14);
    randomize(&mut store, 3);
    assert_eq!(run(&store).shape(), &[4, 10]);

    let mut bad = spec.clone();
    bad.feature_widths = vec![160];
    assert!(Model::new(&bad, ModelKind::Hyper).is_err());
}

#[test]
fn dedicated_family_is_disjoint() {
    let spec = toy_spec();
    let (family, store) = build_dedicated_family(&spec, &mut RngState::new(1)).unwrap();
    assert_eq!(family.members.len(), 3);
    for (i, member) in family.members.iter().enumerate() {
        assert_eq!(member.subsets, vec![i + 1]);
        for info in member.param_infos() {
            assert!(info.path.starts_with(&format!("family/m{}/", i + 1)));
        }
    }
    assert_eq!(store.len(), family.param_infos().len());
    let single = count_parameters(&Model::new(&spec, ModelKind::Single).unwrap());
    let fam = count_parameters(&family);
    // M copies of the single model up to stem widths.
    let stem_one = |c_in: usize| c_in * 8 * 9 + 8;
    let expected = 3 * single.total - 3 * stem_one(2) + stem_one(1) * 2 + stem_one(2);
    assert_eq!(fam.total, expected);

    // Routing: member m only.
    let mut g = Graph::new(&store, true);
    let mut inputs = BTreeMap::new();
    inputs.insert(1, g.input(random(&mut RngState::new(0), &[1, 1, 8, 8])));
    let y = family.forward(&mut g, &inputs, ModalityMask::new(2, 2).unwrap()).unwrap();
    let loss = g.tape.sum(y);
    for path in g.gradients(loss).unwrap().keys() {
        assert!(path.starts_with("family/m2/"), "{path}");
    }
}

#[test]
fn counts_are_additive_and_match_store() {
    let spec = toy_spec();
    let (model, store) = build_unet_hyper(&spec, &mut RngState::new(1)).unwrap();
    let a = count_parameters(&model);
    let b = ParamCounts::from_store(&store);
    assert_eq!(a, b);
    assert_eq!(a.total, a.stem + a.head + a.norm + a.inner);
    assert_eq!(a.total, a.per_path.values().sum::<usize>());
    for w in model.inner_weights() {
        let by_path: usize = a
            .per_path
            .iter()
            .filter(|(p, _)| p.rsplit_once('/').map(|x| x.0) == Some(w.name.as_str()))
            .map(|(_, n)| n)
            .sum();
        assert_eq!(by_path, w.param_count(), "{}", w.name);
        if let WeightKind::Cp { rank } = w.kind {
            assert_eq!(w.param_count(), cp_param_count(&w.dims, rank));
        }
    }
}

#[test]
fn brats_parameter_accounting() {
    let spec = largo_core::config::Config::load_network(std::path::Path::new(concat!(
        env!("CARGO_MANIFEST_DIR"),
        "/../../configs/brats.toml"
    )))
    .unwrap();
    let hyper = count_parameters(&Model::new(&spec, ModelKind::Hyper).unwrap());
    assert_eq!(hyper.stem, 28_128);
    assert_eq!(hyper.head, 1_485);
    assert_eq!(hyper.stem + hyper.head, 29_613);
    let frac = 100.0 * hyper.stem_head_fraction();
    assert!((0.10..=0.17).contains(&frac), "{frac}");
    let rel = |v: usize, paper: f64| (v as f64 - paper).abs() / paper;
    assert!(rel(hyper.total, 22_596_253.0) <= 0.02);
    let single = count_parameters(&Model::new(&spec, ModelKind::Single).unwrap());
    assert!(rel(single.total, 22_574_563.0) <= 0.02);
    assert!(hyper.total as f64 <= single.total as f64 * 1.02);
}
