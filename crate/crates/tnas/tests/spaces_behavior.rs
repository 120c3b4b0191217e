//! Space-level contracts: one-hot mixtures reproduce discrete paths
//! exactly, inheritance copies the right slices, parameter accounting
//! matches the entanglement story, and path gradients stay inside the
//! active slice set.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tnas_autodiff::{cross_entropy, ParamStore, Scalar, Tape, Tensor, Var};
use tnas::arch::Architecture;
use tnas::spaces::{
    bind_all, bind_frozen, Batch, CellSupernet, ConvMacroSupernet, LmPreset, LmSupernet,
    SubnetModel, Supernet, SupernetMode,
};

fn one_hot_mixes<T: Scalar, S: Supernet<T>>(
    tape: &Tape<T>,
    net: &S,
    arch: &Architecture,
) -> BTreeMap<String, Var<T>> {
    let mut mixes = BTreeMap::new();
    for dim in &net.space().dims {
        let mut v = vec![T::zero(); dim.labels.len()];
        v[arch.index(&dim.name)] = T::one();
        mixes.insert(
            dim.name.clone(),
            tape.constant(&Tensor::from_vec(vec![dim.labels.len()], v).unwrap()),
        );
    }
    mixes
}

fn image_batch(n: usize, c: usize, hw: usize, classes: usize, seed: u64) -> Batch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Batch::Images {
        x: Tensor::randn(vec![n, c, hw, hw], 1.0, &mut rng),
        labels: (0..n).map(|i| i % classes).collect(),
    }
}

fn token_batch(vocab: usize, b: usize, t: usize, seed: u64) -> Batch<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<usize> = (0..b * t).map(|_| rng.gen_range(0..vocab)).collect();
    let targets: Vec<usize> = (0..b * t).map(|_| rng.gen_range(0..vocab)).collect();
    Batch::Tokens {
        ids,
        targets,
        batch: b,
        seq: t,
    }
}

/// Exact float equality; zero signs are allowed to differ.
fn assert_values_equal(a: &[f64], b: &[f64], what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!(x == y, "{what}[{i}]: {x} != {y}");
    }
}

fn random_archs<T: Scalar, S: Supernet<T>>(net: &S, n: usize, seed: u64) -> Vec<Architecture> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| net.space().random_arch(&mut rng)).collect()
}

#[test]
fn macro_one_hot_mixture_equals_path() {
    let net = ConvMacroSupernet::<f64>::new(1, 4, SupernetMode::WE, 7).unwrap();
    let batch = image_batch(2, 1, 10, 4, 1);
    for arch in random_archs(&net, 4, 11) {
        let tape = Tape::new();
        let bound = bind_all(&tape, net.weights());
        let mixes = one_hot_mixes(&tape, &net, &arch);
        let mixture = net.forward_mixture(&tape, &bound, &mixes, &batch).unwrap();
        let path = net.forward_path(&tape, &bound, &arch, &batch).unwrap();
        assert_values_equal(&mixture.value(), &path.value(), "macro one-hot");
    }
}

#[test]
fn macro_ws_one_hot_mixture_equals_path() {
    let net = ConvMacroSupernet::<f64>::new(1, 4, SupernetMode::WS, 7).unwrap();
    let batch = image_batch(2, 1, 10, 4, 2);
    for arch in random_archs(&net, 2, 13) {
        let tape = Tape::new();
        let bound = bind_all(&tape, net.weights());
        let mixes = one_hot_mixes(&tape, &net, &arch);
        let mixture = net.forward_mixture(&tape, &bound, &mixes, &batch).unwrap();
        let path = net.forward_path(&tape, &bound, &arch, &batch).unwrap();
        // WS path inputs are narrow while the mixture keeps padded width;
        // the padded channels are exactly zero, so outputs agree exactly.
        assert_values_equal(&mixture.value(), &path.value(), "macro ws one-hot");
    }
}

#[test]
fn cell_one_hot_mixture_equals_path() {
    let net = CellSupernet::<f64>::new(1, 4, 4, SupernetMode::WE, 3).unwrap();
    let batch = image_batch(2, 1, 8, 4, 3);
    for arch in random_archs(&net, 4, 17) {
        let tape = Tape::new();
        let bound = bind_all(&tape, net.weights());
        let mixes = one_hot_mixes(&tape, &net, &arch);
        let mixture = net.forward_mixture(&tape, &bound, &mixes, &batch).unwrap();
        let path = net.forward_path(&tape, &bound, &arch, &batch).unwrap();
        assert_values_equal(&mixture.value(), &path.value(), "cell one-hot");
    }
}

#[test]
fn lm_one_hot_mixture_equals_path() {
    let net = LmSupernet::<f64>::new(LmPreset::Desk, 29, 16, SupernetMode::WE, 5).unwrap();
    let batch = token_batch(29, 2, 12, 4);
    for arch in random_archs(&net, 4, 19) {
        let tape = Tape::new();
        let bound = bind_all(&tape, net.weights());
        let mixes = one_hot_mixes(&tape, &net, &arch);
        let mixture = net.forward_mixture(&tape, &bound, &mixes, &batch).unwrap();
        let path = net.forward_path(&tape, &bound, &arch, &batch).unwrap();
        // The path computes narrow activations; compare the logits, which
        // have the vocabulary shape in both modes.
        assert_values_equal(&mixture.value(), &path.value(), "lm one-hot");
    }
}

#[test]
fn lm_depth_mixing_is_prefix_output_mixture() {
    let net = LmSupernet::<f64>::new(LmPreset::Desk, 17, 8, SupernetMode::WE, 9).unwrap();
    let batch = token_batch(17, 1, 6, 8);
    // One-hot everything but depth; uniform over the three depth choices.
    let mut arch = net.space().largest_arch();
    arch.set("layers", 0);

    let tape = Tape::new();
    let bound = bind_all(&tape, net.weights());
    let mut mixes = one_hot_mixes(&tape, &net, &arch);
    let depth_count = net.space().dim("layers").unwrap().labels.len();
    mixes.insert(
        "layers".to_string(),
        tape.constant(
            &Tensor::from_vec(vec![depth_count], vec![1.0 / depth_count as f64; depth_count])
                .unwrap(),
        ),
    );
    let mixture = net.forward_mixture(&tape, &bound, &mixes, &batch).unwrap();

    // Oracle: mean of the per-depth path logits.
    let mut expect = vec![0.0; mixture.numel()];
    for d in 0..depth_count {
        let mut a = arch.clone();
        a.set("layers", d);
        let path = net.forward_path(&tape, &bound, &a, &batch).unwrap();
        for (e, v) in expect.iter_mut().zip(path.value()) {
            *e += v / depth_count as f64;
        }
    }
    for (m, e) in mixture.value().iter().zip(&expect) {
        assert!((m - e).abs() < 1e-12, "{m} vs {e}");
    }
}

fn param_count<T: Scalar>(store: &ParamStore<T>) -> usize {
    store.param_count()
}

#[test]
fn macro_we_param_count_equals_largest_arch() {
    let net = ConvMacroSupernet::<f64>::new(1, 4, SupernetMode::WE, 7).unwrap();
    let largest = net.space().largest_arch();
    let inherited = net.inherit(&largest).unwrap();
    assert_eq!(param_count(net.weights()), param_count(inherited.params()));

    // Weight sharing strictly exceeds entanglement.
    let ws = ConvMacroSupernet::<f64>::new(1, 4, SupernetMode::WS, 7).unwrap();
    assert_eq!(
        param_count(ws.weights()),
        ConvMacroSupernet::<f64>::ws_param_count(1, 4)
    );
    assert!(param_count(ws.weights()) > param_count(net.weights()));
}

#[test]
fn cell_param_counts_we_vs_ws() {
    let we = CellSupernet::<f64>::new(1, 4, 4, SupernetMode::WE, 3).unwrap();
    let ws = CellSupernet::<f64>::new(1, 4, 4, SupernetMode::WS, 3).unwrap();
    assert!(param_count(ws.weights()) > param_count(we.weights()));

    // The entangled supernet stores exactly the all-5x5 form of every
    // operation group: inheriting the all-largest-kernel genotype per type
    // accounts for each group's storage.
    let mut arch = Architecture::empty();
    for dim in &we.space().dims {
        arch.set(&dim.name, 1); // sep_conv_5x5
    }
    let sep5 = we.inherit(&arch).unwrap();
    for dim in &we.space().dims {
        arch.set(&dim.name, 3); // dil_conv_5x5
    }
    let dil5 = we.inherit(&arch).unwrap();
    // Shared stem/head/norms are counted twice when summing both subnets.
    let shared: usize = ["stem/weight", "stem/gamma", "stem/beta", "head/weight", "head/bias"]
        .iter()
        .map(|n| sep5.params().get(sep5.params().lookup(n).unwrap()).numel())
        .sum();
    let sep_norms: usize = 9 * 2 * 3 * 4; // gamma+beta per edge per cell (4,8,16 widths)
    let _ = sep_norms;
    let both = param_count(sep5.params()) + param_count(dil5.params()) - shared;
    assert_eq!(param_count(we.weights()), both);
}

#[test]
fn lm_param_count_and_ws_accounting() {
    let net = LmSupernet::<f64>::new(LmPreset::Desk, 29, 16, SupernetMode::WE, 5).unwrap();
    let largest = net.space().largest_arch();
    let inherited = net.inherit(&largest).unwrap();
    assert_eq!(param_count(net.weights()), param_count(inherited.params()));

    let ws = LmSupernet::<f64>::ws_param_count(LmPreset::Desk, 29, 16);
    assert!(ws > param_count(net.weights()));

    // WS construction is refused for the LM space.
    assert!(LmSupernet::<f64>::new(LmPreset::Desk, 29, 16, SupernetMode::WS, 5).is_err());
}

#[test]
fn inherit_matches_path_and_is_a_copy() {
    let mut net = ConvMacroSupernet::<f64>::new(1, 4, SupernetMode::WE, 21).unwrap();
    let arch = {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        net.space().random_arch(&mut rng)
    };
    let subnet = net.inherit(&arch).unwrap();
    for trial in 0..10 {
        let batch = image_batch(2, 1, 10, 4, 100 + trial);
        let tape = Tape::new();
        let bound_super = bind_all(&tape, net.weights());
        let path = net.forward_path(&tape, &bound_super, &arch, &batch).unwrap();
        let bound_sub = bind_all(&tape, subnet.params());
        let inherited = subnet.forward(&tape, &bound_sub, &batch).unwrap();
        assert_values_equal(&inherited.value(), &path.value(), "inherit forward");
    }

    // Mutating the inherited weights leaves the supernet unchanged.
    let before = net.weights().checksum();
    let mut subnet = subnet;
    let first = subnet.params().ids().next().unwrap();
    subnet.params_mut().get_mut(first).values_mut()[0] += 1000.0;
    assert_eq!(net.weights().checksum(), before);

    // And the other way: training the supernet leaves the copy intact.
    let sub_before = subnet.params().checksum();
    let wid = net.weights().ids().next().unwrap();
    net.weights_mut().get_mut(wid).values_mut()[0] += 3.0;
    assert_eq!(subnet.params().checksum(), sub_before);
}

#[test]
fn path_gradient_support_is_active_slice_set() {
    let net = ConvMacroSupernet::<f64>::new(1, 4, SupernetMode::WE, 51).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let arch = net.space().random_arch(&mut rng);
    let batch = image_batch(3, 1, 10, 4, 9);

    let tape = Tape::new();
    let bound = bind_all(&tape, net.weights());
    let logits = net.forward_path(&tape, &bound, &arch, &batch).unwrap();
    let loss = cross_entropy(&logits, batch.targets()).unwrap();
    let mut grads = tape.backward(&loss).unwrap();

    // Rebuild the mask and check zeros outside each window.
    for (id, name, tensor) in net.weights().iter() {
        let var = bound.var(id);
        let g = match grads.take(var) {
            Some(g) => g,
            None => continue,
        };
        // Collect the allowed flat indices for this parameter.
        let mask = net.active_slices(&arch).unwrap();
        let inside = mask_indices(&mask, id, tensor.shape());
        for (i, &gv) in g.iter().enumerate() {
            if !inside.contains(&i) {
                assert_eq!(gv, 0.0, "gradient leak outside slice of {name} at {i}");
            }
        }
    }
}

fn mask_indices(
    mask: &tnas_autodiff::SliceMask,
    id: tnas_autodiff::ParamId,
    shape: &[usize],
) -> std::collections::BTreeSet<usize> {
    mask.flat_indices(id, shape).into_iter().flatten().collect()
}

#[test]
fn two_paths_differ_for_random_weights() {
    let net = ConvMacroSupernet::<f64>::new(1, 4, SupernetMode::WE, 77).unwrap();
    let batch = image_batch(2, 1, 10, 4, 5);
    let mut a = net.space().largest_arch();
    let mut b = net.space().largest_arch();
    a.set("k1", 0);
    b.set("c3", 0);
    let tape = Tape::new();
    let bound = bind_all(&tape, net.weights());
    let ya = net.forward_path(&tape, &bound, &a, &batch).unwrap().value();
    let yb = net.forward_path(&tape, &bound, &b, &batch).unwrap().value();
    assert!(ya.iter().zip(&yb).any(|(x, y)| x != y));
}

#[test]
fn frozen_bind_blocks_weight_gradients() {
    let net = ConvMacroSupernet::<f64>::new(1, 4, SupernetMode::WE, 2).unwrap();
    let batch = image_batch(2, 1, 10, 4, 6);
    let arch = net.space().largest_arch();
    let tape = Tape::new();
    let bound = bind_frozen(&tape, net.weights());
    let logits = net.forward_path(&tape, &bound, &arch, &batch).unwrap();
    let loss = cross_entropy(&logits, batch.targets()).unwrap();
    let mut grads = tape.backward(&loss).unwrap();
    for id in net.weights().ids() {
        assert!(grads.take(bound.var(id)).is_none());
    }
}

#[test]
fn genotype_pretty_printer_matches_convention() {
    let net = CellSupernet::<f64>::new(1, 4, 4, SupernetMode::WE, 3).unwrap();
    let mut arch = Architecture::empty();
    for dim in &net.space().dims {
        arch.set(&dim.name, 2); // dil_conv_3x3 everywhere
    }
    arch.set("normal/e12", 0); // sep_conv_3x3
    let text = tnas::spaces::genotype_text(&arch);
    assert!(text.starts_with("Genotype(normal=[('dil_conv_3x3', 0), ('dil_conv_3x3', 0), ('sep_conv_3x3', 1)]"));
    assert!(text.contains("normal_concat=range(1, 3)"));
    assert!(text.contains("reduce=[('dil_conv_3x3', 0), ('dil_conv_3x3', 0), ('dil_conv_3x3', 1)]"));
    assert!(text.ends_with("reduce_concat=range(1, 3))"));
}

#[test]
fn space_cardinalities() {
    let cell = CellSupernet::<f64>::new(1, 4, 4, SupernetMode::WE, 3).unwrap();
    assert_eq!(cell.space().cardinality(), 4096);
    let conv = ConvMacroSupernet::<f64>::new(1, 4, SupernetMode::WE, 3).unwrap();
    assert_eq!(conv.space().cardinality(), 6561);
    let lm_paper_dims = LmPreset::Paper.dims();
    let paper_card: u128 = [
        lm_paper_dims.embed.len(),
        lm_paper_dims.heads.len(),
        lm_paper_dims.ratio.len(),
        lm_paper_dims.layers.len(),
    ]
    .iter()
    .map(|&x| x as u128)
    .product();
    assert_eq!(paper_card, 81);
    let lm = LmSupernet::<f64>::new(LmPreset::Desk, 29, 16, SupernetMode::WE, 5).unwrap();
    assert_eq!(lm.space().cardinality(), 36);
}

#[test]
fn macro_channel_table_and_mlp_storage_shape() {
    // Channel choices of layer 3 and the maximal MLP storage rows.
    assert_eq!(tnas::spaces::MACRO_CHANNELS[2], [32, 64, 128]);
    let lm = LmSupernet::<f64>::new(LmPreset::Paper, 50, 8, SupernetMode::WE, 5).unwrap();
    let id = lm.weights().lookup("block0/mlp/in/storage").unwrap();
    assert_eq!(lm.weights().get(id).shape(), &[3072, 768]);
}

#[test]
fn reinitialize_is_slice_consistent() {
    // Two architectures agree bit-for-bit on every weight they share.
    let space_net = ConvMacroSupernet::<f64>::new(1, 4, SupernetMode::WE, 0).unwrap();
    let small = {
        let mut a = space_net.space().largest_arch();
        a.set("k4", 0);
        a
    };
    let large = space_net.space().largest_arch();
    let mut m_small = space_net.inherit(&small).unwrap();
    let mut m_large = space_net.inherit(&large).unwrap();
    m_small.reinitialize(123);
    m_large.reinitialize(123);
    let w_small = m_small.params().get(m_small.params().lookup("layer4/weight").unwrap()).clone();
    let w_large = m_large.params().get(m_large.params().lookup("layer4/weight").unwrap()).clone();
    // layer4 kernel 3 is the centered 3x3 of the 7x7 draw.
    let sliced = w_large.slice_copy(&[0, 0, 2, 2], &[256, 128, 3, 3]).unwrap();
    assert_eq!(sliced.values(), w_small.values());
}
