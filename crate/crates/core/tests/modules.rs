mod common;

use cellnas::cell::{Cell, EncoderConfig, ImageEncoder};
use cellnas::metadata::{embed_dim_for, FieldSpec, MetadataEncoder, MetadataSchema, META_HIDDEN, UNKNOWN};
use cellnas::model::{Architecture, FusionHead, ModelConfig, Network};
use cellnas::nn::{Ctx, GradSet, Mode, ParamKind, ParamStore};
use cellnas::primitives::{MixedEdge, OpConfig, OpKind, PrimitiveOp, NUM_OPS, PRUNE_THRESHOLD};
use cellnas::rng::RngState;
use cellnas::tensor::Tensor;
use common::{fd_module, max_abs_diff, randn};

fn strings(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

fn schema() -> MetadataSchema {
    MetadataSchema {
        fields: vec![
            FieldSpec::new("dna_bin", strings(&["BIN000", "BIN001", "BIN002"])),
            FieldSpec::new("site", strings(&["site0", "site1"])),
        ],
    }
}

fn run_op<T: cellnas::tensor::Float>(store: &mut ParamStore<T>, op: &PrimitiveOp, x: &Tensor<T>) -> Tensor<T> {
    let mut rng = RngState::new(0);
    let mut ctx = Ctx::new(store, &mut rng, Mode::Train, GradSet::NONE);
    let xv = ctx.tape.constant(x.clone());
    let y = op.forward(&mut ctx, xv).unwrap();
    ctx.tape.value(y).clone()
}

#[test]
fn every_op_preserves_or_halves_spatial_size() {
    for stride in [1, 2] {
        for h in [7, 8] {
            for kind in OpKind::ALL {
                let mut store = ParamStore::<f32>::new();
                let op = PrimitiveOp::new(&mut store, "e", kind, 8, 8, stride, OpConfig::default()).unwrap();
                store.initialize(&mut RngState::new(1));
                let x = randn::<f32>(&[2, 8, h, h], &mut RngState::new(2));
                let y = run_op(&mut store, &op, &x);
                let s = h.div_ceil(stride);
                assert_eq!(y.shape(), &[2, 8, s, s], "{kind} stride {stride} size {h}");
            }
        }
    }
}

#[test]
fn zero_skip_and_pool_semantics() {
    let mut store = ParamStore::<f32>::new();
    let cfg = OpConfig::default();
    let z = PrimitiveOp::new(&mut store, "e", OpKind::Z, 4, 4, 1, cfg).unwrap();
    let sk = PrimitiveOp::new(&mut store, "e", OpKind::SK, 4, 4, 1, cfg).unwrap();
    let pm = PrimitiveOp::new(&mut store, "e", OpKind::Pm, 4, 4, 1, cfg).unwrap();
    let x = randn::<f32>(&[1, 4, 5, 5], &mut RngState::new(3));
    assert!(run_op(&mut store, &z, &x).data().iter().all(|&v| v == 0.0));
    assert_eq!(run_op(&mut store, &sk, &x), x);
    let y = run_op(&mut store, &pm, &x);
    assert!(y.data().iter().zip(x.data()).all(|(a, b)| a >= b));
}

#[test]
fn hand_counted_parameters_and_mult_adds() {
    let c = 8;
    let count = |kind, stride| {
        let mut store = ParamStore::<f32>::new();
        let op = PrimitiveOp::new(&mut store, "e", kind, c, c, stride, OpConfig::default()).unwrap();
        assert_eq!(op.param_count(), store.numel(ParamKind::Weight));
        (op.param_count(), op.mult_adds(16, 16))
    };
    // depthwise k*k*C, pointwise C*C, batch norm 2C
    assert_eq!(count(OpKind::D3, 1).0, 9 * 8 + 64 + 16);
    assert_eq!(count(OpKind::D5, 1).0, 25 * 8 + 64 + 16);
    assert_eq!(count(OpKind::L3, 1).0, 9 * 64 + 16);
    assert_eq!(count(OpKind::L5, 1).0, 25 * 64 + 16);
    assert_eq!(count(OpKind::S, 1), (64 + 16, 16 * 16 * 64));
    assert_eq!(count(OpKind::S, 2), (64 + 16, 8 * 8 * 64));
    // squeeze and excite: C -> C/4 -> C, no biases
    assert_eq!(count(OpKind::SE, 1), (2 * 8 * 2, 2 * 8 * 2));
    assert_eq!(count(OpKind::SE, 2).0, 2 * 8 * 2 + 64 + 16);
    assert_eq!(count(OpKind::SK, 2), (2 * 8 * 4 + 16, 2 * 8 * 8 * 8 * 4));
    assert_eq!(count(OpKind::D3, 2).1, 8 * 8 * 9 * 8 + 8 * 8 * 64);
    for kind in [OpKind::Pa, OpKind::Pm, OpKind::SK, OpKind::Z] {
        assert_eq!(count(kind, 1), (0, 0));
    }
}

fn edge_store(c: usize, stride: usize, theta: Option<Vec<f64>>) -> (ParamStore<f64>, MixedEdge) {
    let mut store = ParamStore::<f64>::new();
    let edge = MixedEdge::new(&mut store, "e", c, c, stride, OpConfig::default(), 1.0, PRUNE_THRESHOLD).unwrap();
    store.initialize(&mut RngState::new(9));
    if let Some(t) = theta {
        store.value_mut(edge.theta).data_mut().copy_from_slice(&t);
    }
    (store, edge)
}

fn edge_out(store: &mut ParamStore<f64>, edge: &MixedEdge, x: &Tensor<f64>, thr: f64) -> (Tensor<f64>, usize) {
    let mut rng = RngState::new(0);
    let mut ctx = Ctx::new(store, &mut rng, Mode::Train, GradSet::NONE);
    let xv = ctx.tape.constant(x.clone());
    let y = edge.forward_with_threshold(&mut ctx, xv, thr).unwrap();
    (ctx.tape.value(y).clone(), ctx.tape.len())
}

#[test]
fn mixed_edge_is_the_alpha_weighted_sum() {
    let (mut store, edge) = edge_store(4, 1, None);
    let x = randn::<f64>(&[2, 4, 6, 6], &mut RngState::new(4));
    let (y, _) = edge_out(&mut store, &edge, &x, 0.0);
    let alpha = edge.alpha(&store);
    assert!((alpha.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    let mut expect = vec![0.0; y.numel()];
    for (op, a) in edge.ops.iter().zip(&alpha) {
        let o = run_op(&mut store, op, &x);
        for (e, v) in expect.iter_mut().zip(o.data()) {
            *e += a * v;
        }
    }
    assert!(max_abs_diff(y.data(), &expect) < 1e-12);
}

#[test]
fn mixed_edge_skips_negligible_operations() {
    let mut theta = vec![0.0; NUM_OPS];
    theta[OpKind::L5.index()] = -40.0;
    theta[OpKind::SE.index()] = -40.0;
    let (mut store, edge) = edge_store(4, 2, Some(theta));
    let x = randn::<f64>(&[2, 4, 6, 6], &mut RngState::new(5));
    let (pruned, pruned_nodes) = edge_out(&mut store, &edge, &x, PRUNE_THRESHOLD);
    let (full, full_nodes) = edge_out(&mut store, &edge, &x, 0.0);
    assert!(pruned_nodes < full_nodes);
    assert!(max_abs_diff(pruned.data(), full.data()) < 1e-6);
}

#[test]
fn mixed_edge_output_ignores_a_common_theta_shift() {
    let (mut store, edge) = edge_store(4, 1, None);
    let x = randn::<f64>(&[1, 4, 5, 5], &mut RngState::new(6));
    let (a, _) = edge_out(&mut store, &edge, &x, 0.0);
    for v in store.value_mut(edge.theta).data_mut() {
        *v += 3.75;
    }
    let (b, _) = edge_out(&mut store, &edge, &x, 0.0);
    assert!(max_abs_diff(a.data(), b.data()) < 1e-6);
}

#[test]
fn cell_shapes_and_names() {
    let cfg = EncoderConfig {
        channels: 8,
        ..Default::default()
    };
    let mut store = ParamStore::<f32>::new();
    let cell = Cell::searchable(&mut store, "cell0", 8, 2, &cfg, 0.03).unwrap();
    store.initialize(&mut RngState::new(0));
    for name in [
        "cell0.n1.theta",
        "cell0.n2a.theta",
        "cell0.n2b.theta",
        "cell0.project.weight",
        "cell0.project_bn.gamma",
    ] {
        assert!(store.find(name).is_some(), "{name}");
    }
    assert_eq!(store.numel(ParamKind::Arch), 3 * NUM_OPS);
    let mut rng = RngState::new(1);
    let mut ctx = Ctx::new(&mut store, &mut rng, Mode::Train, GradSet::NONE);
    let x = ctx.tape.constant(randn::<f32>(&[2, 8, 9, 9], &mut RngState::new(2)));
    let y = cell.forward(&mut ctx, x).unwrap();
    assert_eq!(ctx.tape.shape(y), &[2, 8, 5, 5]);
    let bad = ctx.tape.constant(Tensor::zeros(&[2, 4, 9, 9]));
    assert!(cell.forward(&mut ctx, bad).is_err());
}

#[test]
fn default_encoder_produces_256_features() {
    let cfg = EncoderConfig::default();
    assert_eq!(
        (cfg.cells, cfg.channels, cfg.image_size, cfg.embed_dim),
        (3, 16, 32, 256)
    );
    let mut store = ParamStore::<f32>::new();
    let enc = ImageEncoder::searchable(&mut store, &cfg, 0.03).unwrap();
    store.initialize(&mut RngState::new(0));
    assert_eq!(enc.cell_input_sizes(), vec![32, 32, 32]);
    let mut rng = RngState::new(1);
    let mut ctx = Ctx::new(&mut store, &mut rng, Mode::Eval, GradSet::NONE);
    let x = ctx.tape.constant(randn::<f32>(&[2, 1, 32, 32], &mut RngState::new(3)));
    let y = enc.forward(&mut ctx, x).unwrap();
    assert_eq!(ctx.tape.shape(y), &[2, 256]);
    let wrong = ctx.tape.constant(Tensor::zeros(&[2, 1, 16, 16]));
    assert!(enc.forward(&mut ctx, wrong).is_err());
}

#[test]
fn downsampling_cells_halve_resolution() {
    let cfg = EncoderConfig {
        channels: 8,
        cells: 3,
        downsample_cells: vec![0, 2],
        ..Default::default()
    };
    let mut store = ParamStore::<f32>::new();
    let enc = ImageEncoder::fixed(&mut store, &cfg, &[[OpKind::S, OpKind::SK, OpKind::Pa]; 3]).unwrap();
    assert_eq!(enc.cell_input_sizes(), vec![32, 16, 16]);
    assert!(ImageEncoder::fixed(&mut ParamStore::<f32>::new(), &cfg, &[[OpKind::S; 3]; 2]).is_err());
}

#[test]
fn metadata_vocabulary_rules() {
    assert_eq!(embed_dim_for(2), 1);
    assert_eq!(embed_dim_for(7), 4);
    assert_eq!(embed_dim_for(1000), 16);
    let s = schema();
    assert_eq!(s.encode_row(&["BIN002", "site0"]), vec![3, 1]);
    assert_eq!(s.encode_row(&["BIN999", "elsewhere"]), vec![UNKNOWN, UNKNOWN]);
    assert_eq!(s.total_embed_dim(), 2 + 2);
}

#[test]
fn metadata_encoder_shapes_and_unknown_rows() {
    let s = schema();
    let mut store = ParamStore::<f32>::new();
    let enc = MetadataEncoder::new(&mut store, &s, 256).unwrap();
    store.initialize(&mut RngState::new(0));
    // tables, then d -> 256 -> 256 with biases
    let expect = 4 * 2 + 3 * 2 + (4 * META_HIDDEN + META_HIDDEN) + (META_HIDDEN * 256 + 256);
    assert_eq!(enc.param_count(), expect);
    assert_eq!(store.numel(ParamKind::Weight), expect);
    let mut rng = RngState::new(1);
    let mut ctx = Ctx::new(&mut store, &mut rng, Mode::Train, GradSet::NONE);
    let y = enc.forward(&mut ctx, &[0, 0, 3, 2]).unwrap();
    assert_eq!(ctx.tape.shape(y), &[2, 256]);
    assert!(enc.forward(&mut ctx, &[0, 5]).is_err());
    assert!(enc.forward(&mut ctx, &[0, 0, 1]).is_err());
}

fn small_model(use_metadata: bool) -> ModelConfig {
    ModelConfig {
        encoder: EncoderConfig {
            channels: 4,
            cells: 1,
            image_size: 6,
            embed_dim: 8,
            ..Default::default()
        },
        use_metadata,
        dropout: 0.2,
    }
}

#[test]
fn fusion_head_width_follows_the_metadata_switch() {
    for (meta, width) in [(true, 512), (false, 256)] {
        let cfg = ModelConfig {
            use_metadata: meta,
            ..Default::default()
        };
        let mut store = ParamStore::<f32>::new();
        let net = Network::new(
            &mut store,
            &cfg,
            &schema(),
            5,
            &Architecture::Search { theta_std: 0.03 },
        )
        .unwrap();
        assert_eq!(net.head.classifier.d_in, width);
        assert_eq!(net.metadata.is_some(), meta);
    }
    let mut store = ParamStore::<f32>::new();
    let head = FusionHead::new(&mut store, 16, 3, 0.2).unwrap();
    let mut rng = RngState::new(0);
    let mut ctx = Ctx::new(&mut store, &mut rng, Mode::Eval, GradSet::NONE);
    let a = ctx.tape.constant(Tensor::zeros(&[2, 8]));
    assert!(head.forward(&mut ctx, a, Some(a)).is_ok());
    assert!(head.forward(&mut ctx, a, None).is_err());
}

#[test]
fn metadata_changes_logits_only_when_enabled() {
    for meta in [true, false] {
        let mut store = ParamStore::<f32>::new();
        let net = Network::new(
            &mut store,
            &small_model(meta),
            &schema(),
            3,
            &Architecture::Search { theta_std: 0.03 },
        )
        .unwrap();
        store.initialize(&mut RngState::new(0));
        let x = randn::<f32>(&[2, 1, 6, 6], &mut RngState::new(1));
        let mut logits = Vec::new();
        for rows in [[1usize, 1, 2, 2], [3, 0, 3, 0]] {
            let mut rng = RngState::new(2);
            let mut ctx = Ctx::new(&mut store, &mut rng, Mode::Eval, GradSet::NONE);
            let y = net.forward(&mut ctx, &x, &rows).unwrap();
            logits.push(ctx.tape.data(y).to_vec());
        }
        assert_eq!(logits[0] != logits[1], meta);
    }
}

#[test]
fn eval_mode_is_deterministic_and_train_mode_drops_out() {
    let mut store = ParamStore::<f32>::new();
    let net = Network::new(
        &mut store,
        &small_model(true),
        &schema(),
        3,
        &Architecture::Fixed(vec![[OpKind::S; 3]]),
    )
    .unwrap();
    store.initialize(&mut RngState::new(0));
    let x = randn::<f32>(&[4, 1, 6, 6], &mut RngState::new(1));
    let rows = [1, 1, 2, 2, 3, 0, 0, 1];
    let run = |store: &mut ParamStore<f32>, mode, seed| {
        let mut rng = RngState::new(seed);
        let mut ctx = Ctx::new(store, &mut rng, mode, GradSet::NONE);
        let y = net.forward(&mut ctx, &x, &rows).unwrap();
        ctx.tape.data(y).to_vec()
    };
    assert_eq!(run(&mut store, Mode::Eval, 1), run(&mut store, Mode::Eval, 2));
    assert_ne!(run(&mut store, Mode::Train, 1), run(&mut store, Mode::Train, 2));
}

#[test]
fn module_gradients_match_finite_differences() {
    for seed in 0..3 {
        let cfg = small_model(true).encoder;
        let mut store = ParamStore::<f64>::new();
        let cell = Cell::searchable(&mut store, "cell0", 4, 1 + (seed as usize % 2), &cfg, 1.0).unwrap();
        store.initialize(&mut RngState::new(seed));
        let x = randn::<f64>(&[2, 4, 5, 5], &mut RngState::new(seed + 100));
        fd_module(&store, Some(&x), seed, 12, |ctx, x| {
            cell.forward(ctx, x.unwrap()).unwrap()
        })
        .assert_ok("cell");

        let mut store = ParamStore::<f64>::new();
        let enc = MetadataEncoder::new(&mut store, &schema(), 6).unwrap();
        store.initialize(&mut RngState::new(seed));
        fd_module(&store, None, seed, 12, |ctx, _| {
            enc.forward(ctx, &[1, 2, 0, 0, 3, 1]).unwrap()
        })
        .assert_ok("metadata encoder");
    }
}
