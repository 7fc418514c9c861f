use mmnet_core::ca::AttentionHook;
use mmnet_core::gradcheck::{model_check, FD_TOLERANCE};
use mmnet_core::model::loss;
use mmnet_core::{Error, Graph, MmNet, ModelConfig, Rng, Tensor, Var};

fn frame(seed: u64) -> Tensor {
    Tensor::rand_uniform(vec![3, 224, 224], 0.0, 1.0, &mut Rng::new(seed)).unwrap()
}

fn net(config: ModelConfig, seed: u64) -> MmNet {
    MmNet::new(config, &mut Rng::new(seed)).unwrap()
}

fn baseline_config() -> ModelConfig {
    ModelConfig { use_ca: false, use_pc: false, ..ModelConfig::default() }
}

#[test]
fn full_forward_shapes() {
    let m = net(ModelConfig::default(), 1);
    let mut g = Graph::new();
    let p = m.params().bind_frozen(&mut g);
    let pass = m.forward(&mut g, &p, &frame(2), &frame(3), AttentionHook::None).unwrap();
    assert_eq!(g.shape(pass.logits), [5]);
    assert_eq!(g.shape(pass.main.f_m), [512, 14, 14]);
    assert_eq!(g.shape(pass.pc.unwrap().e_pos), [512, 14, 14]);
    let (pred, maps) = m.predict(&frame(2), &frame(3)).unwrap();
    assert_eq!(pred.logits.shape(), [5]);
    assert!((pred.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    let sizes: Vec<usize> = maps.iter().map(|t| t.shape()[1]).collect();
    assert_eq!(sizes, [112, 56, 28, 14]);
}

#[test]
fn mismatched_frames_are_dimension_errors() {
    let m = net(ModelConfig::default(), 4);
    let small = Tensor::zeros(vec![3, 112, 112]).unwrap();
    assert!(matches!(m.predict(&frame(5), &small), Err(Error::Dimension(_))));
}

#[test]
fn equal_frames_leave_only_the_position_pathway() {
    let m = net(ModelConfig::default(), 6);
    let f = frame(7);
    let mut g = Graph::new();
    let p = m.params().bind_frozen(&mut g);
    let pass = m.forward(&mut g, &p, &f, &f, AttentionHook::None).unwrap();
    assert!(g.value(pass.main.f_m).data().iter().all(|&v| v == 0.0));
    assert!(g.value(pass.fused).bit_eq(g.value(pass.pc.unwrap().e_pos)));
}

/// The baseline assembled directly from graph primitives.
fn baseline_oracle(m: &MmNet, onset: &Tensor, apex: &Tensor) -> Tensor {
    let store = m.params();
    let mut g = Graph::new();
    let t = |g: &mut Graph, name: &str| g.constant(store.tensor(store.find(name).unwrap()).clone());
    let on = g.constant(onset.clone());
    let ap = g.constant(apex.clone());
    let mut x: Var = g.sub(ap, on).unwrap();
    for b in 1..=4 {
        let pre = format!("main.block{b}");
        let (w3, b3) = (t(&mut g, &format!("{pre}.conv3.weight")), t(&mut g, &format!("{pre}.conv3.bias")));
        let (w1, b1) = (t(&mut g, &format!("{pre}.conv1_main.weight")), t(&mut g, &format!("{pre}.conv1_main.bias")));
        let (ws, bs) = (t(&mut g, &format!("{pre}.conv1_skip.weight")), t(&mut g, &format!("{pre}.conv1_skip.bias")));
        let (gm, bt) = (t(&mut g, &format!("{pre}.norm.gamma")), t(&mut g, &format!("{pre}.norm.beta")));
        let h = g.conv2d(x, w3, b3, 2, 1).unwrap();
        let h = g.conv2d(h, w1, b1, 1, 0).unwrap();
        let s = g.conv2d(x, ws, bs, 2, 0).unwrap();
        let sum = g.add(h, s).unwrap();
        let shape = g.shape(sum).to_vec();
        let flat = g.reshape(sum, &[shape[0], shape[1] * shape[2]]).unwrap();
        let pix = g.transpose(flat).unwrap();
        let n = g.layer_norm(pix, gm, bt).unwrap();
        let back = g.transpose(n).unwrap();
        let back = g.reshape(back, &shape).unwrap();
        x = g.relu(back).unwrap();
    }
    let pooled = g.global_avg_pool(x).unwrap();
    let (hw, hb) = (t(&mut g, "head.weight"), t(&mut g, "head.bias"));
    let logits = g.linear(pooled, hw, Some(hb)).unwrap();
    g.value(logits).clone()
}

#[test]
fn baseline_matches_primitive_composition() {
    let m = net(baseline_config(), 8);
    let (onset, apex) = (frame(9), frame(10));
    let (pred, maps) = m.predict(&onset, &apex).unwrap();
    assert!(maps.is_empty());
    let expect = baseline_oracle(&m, &onset, &apex);
    assert!(pred.logits.max_abs_diff(&expect) < 1e-12);
}

#[test]
fn manifest_is_stable_and_consistent() {
    let a = net(ModelConfig::default(), 11).parameter_manifest();
    let b = net(ModelConfig::default(), 11).parameter_manifest();
    assert_eq!(a, b);
    let total: usize = a.iter().map(|e| e.count).sum();
    assert_eq!(total, net(ModelConfig::default(), 11).params().total_count());
    for e in &a {
        assert_eq!(e.count, e.shape.iter().product::<usize>());
    }
    assert!(a.iter().any(|e| e.name.starts_with("pc.")));
    let no_pc = net(ModelConfig { use_pc: false, ..ModelConfig::default() }, 11).parameter_manifest();
    assert!(!no_pc.iter().any(|e| e.name.starts_with("pc.")));
    let baseline = net(baseline_config(), 11).parameter_manifest();
    assert!(!baseline.iter().any(|e| e.name.contains(".ca.")));
}

#[test]
fn cross_entropy_edge_cases() {
    for k in [2usize, 3, 5] {
        let mut g = Graph::new();
        let z = g.constant(Tensor::full(vec![k], 0.7).unwrap());
        let l = loss(&mut g, z, 0).unwrap();
        assert!((g.value(l).item() - (k as f64).ln()).abs() < 1e-12);
    }
    let mut g = Graph::new();
    let z = g.constant(Tensor::new(vec![3], vec![0.0, 30.0, 0.0]).unwrap());
    let l = loss(&mut g, z, 1).unwrap();
    assert!(g.value(l).item() < 1e-9);
    assert!(matches!(loss(&mut g, z, 3), Err(Error::Label { label: 3, num_classes: 3 })));
}

#[test]
fn end_to_end_gradient_probes() {
    let m = net(ModelConfig { num_classes: 3, ..ModelConfig::default() }, 12);
    let probes = model_check(&m, &frame(13), &frame(14), 2, 4, &mut Rng::new(15), None).unwrap();
    for p in &probes {
        assert!(p.error() < FD_TOLERANCE, "{} [{}]: {} vs {}", p.name, p.element, p.analytic, p.numeric);
    }
}

#[test]
fn invalid_configs_are_rejected() {
    let one_class = ModelConfig { num_classes: 1, ..ModelConfig::default() };
    assert!(matches!(MmNet::new(one_class, &mut Rng::new(0)), Err(Error::Config(_))));
}
