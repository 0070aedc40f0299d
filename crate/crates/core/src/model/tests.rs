use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::patching::Patch;
use crate::volume_io::Candidate;

fn random_triple(seed: u64) -> PatchTriple {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p = || Patch::new(PATCH_SIZE, (0..PATCH_SIZE.iter().product()).map(|_| rng.gen::<f32>()).collect()).unwrap();
    PatchTriple {
        s1: p(),
        s2: p(),
        s3: p(),
        candidate: Candidate::new("s0", [0.0; 3], None),
    }
}

fn tiny(variant: Variant) -> ModelConfig {
    ModelConfig {
        stage_channels: vec![2, 3, 4],
        head_channels: vec![4],
        fc_widths: vec![8],
        ..ModelConfig::small(variant)
    }
}

#[test]
fn output_rows_are_distributions() {
    for v in Variant::ALL {
        let m: Model = Model::build_initialized(tiny(v), 3).unwrap();
        let out = m.forward(&[random_triple(1), random_triple(2)]).unwrap();
        assert_eq!(out.len(), 2);
        for row in out {
            assert!((row[0] + row[1] - 1.0).abs() < 1e-6, "{v}: {row:?}");
            assert!(row.iter().all(|&p| (0.0..=1.0).contains(&p)));
        }
    }
}

#[test]
fn empty_batch_is_rejected() {
    let m: Model = Model::build(tiny(Variant::Mgi)).unwrap();
    assert!(matches!(m.forward(&[]), Err(Error::InvalidArgument(_))));
}

#[test]
fn zeroed_network_is_indifferent() {
    let m: Model = Model::build(tiny(Variant::Mgi)).unwrap();
    let out = m.forward(&[random_triple(7)]).unwrap();
    assert_eq!(out[0], [0.5, 0.5]);
}

#[test]
fn zoom_in_and_zoom_out_counts_match() {
    for cfg in [tiny(Variant::Zi), ModelConfig::small(Variant::Zi), ModelConfig::default_for(Variant::Zi)] {
        let zo = ModelConfig {
            variant: Variant::Zo,
            ..cfg.clone()
        };
        let a: Model = Model::build(cfg).unwrap();
        let b: Model = Model::build(zo).unwrap();
        assert_eq!(a.count_parameters(), b.count_parameters());
    }
}

/// Closed-form count for the default stacks, written out layer by layer.
fn expected_count(variant: Variant, fusion: Fusion) -> usize {
    let conv = |cin: usize, cout: usize, k: usize| cin * cout * k * k * k + cout;
    let dense = |i: usize, o: usize| i * o + o;
    let (c1, c2, c3, h) = (32, 48, 64, 128);
    let stream = conv(1, c1, 3) + conv(c1, c1, 3) + conv(c1 + 1, c2, 3) + conv(c2, c2, 3) + conv(c2 + 1, c3, 3) + conv(c3, c3, 3) + conv(c3, c3, 3);
    let trunk = match variant {
        Variant::Zi | Variant::Zo => stream,
        Variant::Mgi => {
            2 * stream
                + match fusion {
                    Fusion::Sum => 0,
                    Fusion::Concat => 0,
                    Fusion::Conv1x1 => conv(2 * c3, c3, 1),
                }
        }
        Variant::Ri => conv(3, c1, 3) + conv(c1, c1, 3) + conv(c1, c2, 3) + conv(c2, c2, 3) + conv(c2, c3, 3) + conv(c3, c3, 3) + conv(c3, c3, 3),
        Variant::Lr => 3 * (conv(1, c1, 3) + conv(c1, c1, 3)) + conv(c1, c2, 3) + conv(c2, c2, 3) + conv(c2, c3, 3) + conv(c3, c3, 3) + conv(c3, c3, 3),
    };
    let head_in = if variant == Variant::Mgi && fusion == Fusion::Concat { 2 * c3 } else { c3 };
    let fc1 = ModelConfig::default_for(variant).fc_widths[0];
    // 20x20x6 -> pool 10x10x3 -> pool 5x5x2
    trunk + conv(head_in, h, 3) + dense(h * 5 * 5 * 2, fc1) + dense(fc1, 512) + dense(512, 2)
}

#[test]
fn default_counts_match_layer_arithmetic() {
    for v in Variant::ALL {
        let m: Model = Model::build(ModelConfig::default_for(v)).unwrap();
        assert_eq!(m.count_parameters(), expected_count(v, Fusion::Sum), "{v}");
    }
    for f in [Fusion::Concat, Fusion::Conv1x1] {
        let m: Model = Model::build(ModelConfig::default_for(Variant::Mgi).with_fusion(f)).unwrap();
        assert_eq!(m.count_parameters(), expected_count(Variant::Mgi, f));
    }
}

#[test]
fn default_counts_sit_near_reference_capacities() {
    let reference = [
        (Variant::Mgi, 9_472_000.0),
        (Variant::Ri, 9_463_320.0),
        (Variant::Lr, 9_466_880.0),
        (Variant::Zi, 9_464_320.0),
        (Variant::Zo, 9_464_320.0),
    ];
    let counts: Vec<f64> = reference
        .iter()
        .map(|&(v, r)| {
            let n = Model::<f32>::build(ModelConfig::default_for(v)).unwrap().count_parameters() as f64;
            assert!((n - r).abs() / r < 0.05, "{v}: {n} vs {r}");
            n
        })
        .collect();
    let max = counts.iter().cloned().fold(f64::MIN, f64::max);
    let min = counts.iter().cloned().fold(f64::MAX, f64::min);
    assert!((max - min) / max <= 0.005);
}

#[test]
fn small_config_is_desk_sized() {
    for v in Variant::ALL {
        let m: Model = Model::build(ModelConfig::small(v)).unwrap();
        assert!(m.count_parameters() <= 200_000, "{v}: {}", m.count_parameters());
    }
    let counts: Vec<usize> = Variant::ALL.iter().map(|&v| Model::<f32>::build(ModelConfig::small(v)).unwrap().count_parameters()).collect();
    let (lo, hi) = (*counts.iter().min().unwrap(), *counts.iter().max().unwrap());
    // one FC unit moves the count by ~1.6%, so parity is looser than at full size
    assert!((hi - lo) as f64 / hi as f64 <= 0.015, "{counts:?}");
}

#[test]
fn inference_is_bit_identical() {
    let m: Model = Model::build_initialized(tiny(Variant::Mgi), 11).unwrap();
    let x = [random_triple(5)];
    assert_eq!(m.forward(&x).unwrap(), m.forward(&x).unwrap());
}

#[test]
fn initialisation_is_seeded() {
    let a: Model = Model::build_initialized(tiny(Variant::Lr), 1).unwrap();
    let b: Model = Model::build_initialized(tiny(Variant::Lr), 1).unwrap();
    let c: Model = Model::build_initialized(tiny(Variant::Lr), 2).unwrap();
    assert_eq!(a.max_param_diff(&b), Some(0.0));
    assert!(a.max_param_diff(&c).unwrap() > 0.0);
}

#[test]
fn feature_dumps() {
    let cfg = tiny(Variant::Mgi);
    let m: Model = Model::build_initialized(cfg.clone(), 4).unwrap();
    let x = random_triple(9);
    let maps = m.dump_feature_maps(&x, &["zi.F1", "zo.F123", "fused"]).unwrap();
    assert_eq!(maps.len(), 3);
    assert_eq!(maps["zi.F1"].values.shape, [cfg.stage_channels[0], 6, 20, 20]);
    assert_eq!(maps["zo.F123"].values.shape, [cfg.stage_channels[2], 6, 20, 20]);
    assert_eq!(maps["fused"].values.shape, [cfg.stage_channels[2], 3, 10, 10]);
    assert!(m.dump_feature_maps(&x, &[]).unwrap().is_empty());
    assert!(matches!(m.dump_feature_maps(&x, &["nope"]), Err(Error::UnknownTag(_))));

    let lr: Model = Model::build_initialized(tiny(Variant::Lr), 4).unwrap();
    let maps = lr.dump_feature_maps(&x, &["lr.S2.F1", "lr.F1"]).unwrap();
    assert_eq!(maps["lr.F1"].values.shape, maps["lr.S2.F1"].values.shape);
}

#[test]
fn fusion_matches_graph() {
    let x = random_triple(21);
    for f in [Fusion::Sum, Fusion::Concat, Fusion::Conv1x1] {
        let m: Model = Model::build_initialized(tiny(Variant::Mgi).with_fusion(f), 8).unwrap();
        let mut maps = m.dump_feature_maps(&x, &["fused"]).unwrap();
        let fused = maps.remove("fused").unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let acts = m.forward_sample(&x, Mode::Inference, &mut rng).unwrap();
        let node = |name: &str| m.graph().nodes().iter().position(|n| n.name == name).unwrap();
        let a = FeatureMap {
            values: acts.values[node("zi.pool")].clone(),
            stage_tag: "zi".into(),
        };
        let b = FeatureMap {
            values: acts.values[node("zo.pool")].clone(),
            stage_tag: "zo".into(),
        };
        let ours = fuse_streams(&a, &b, m.fusion_op().unwrap()).unwrap();
        assert_eq!(ours.values, fused.values, "{f}");
    }
}

#[test]
fn fusion_identities() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut fm = |c: usize| FeatureMap {
        values: Tensor::from_vec([c, 2, 3, 3], (0..c * 18).map(|_| rng.gen::<f64>()).collect()),
        stage_tag: String::new(),
    };
    let a = fm(4);
    let zero = FeatureMap {
        values: Tensor::zeros([4, 2, 3, 3]),
        stage_tag: String::new(),
    };
    assert_eq!(fuse_streams(&a, &zero, FusionOp::Sum).unwrap().values, a.values);
    let b = fm(2);
    let cat = fuse_streams(&a, &b, FusionOp::Concat).unwrap();
    assert_eq!(cat.values.shape, [6, 2, 3, 3]);
    assert_eq!(&cat.values.data[..72], &a.values.data[..]);
    assert!(fuse_streams(&a, &b, FusionOp::Sum).is_err());
    // identity projection of the first stream
    let (w, bias): (Vec<f64>, Vec<f64>) = ((0..4 * 6).map(|i| if i % 6 == i / 6 { 1.0 } else { 0.0 }).collect(), vec![0.0; 4]);
    let proj = fuse_streams(&a, &b, FusionOp::Conv1x1 { weight: &w, bias: &bias }).unwrap();
    assert_eq!(proj.values, a.values);
    let c = FeatureMap {
        values: Tensor::zeros([4, 2, 3, 2]),
        stage_tag: String::new(),
    };
    assert!(matches!(fuse_streams(&a, &c, FusionOp::Concat), Err(Error::ShapeMismatch { .. })));
}

#[test]
fn checkpoint_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let m: Model = Model::build_initialized(tiny(Variant::Ri), 13).unwrap();
    let path = dir.path().join("m.ckpt");
    m.save(&path).unwrap();
    let back = Model::load(&path).unwrap();
    assert_eq!(back.config(), m.config());
    assert_eq!(back.max_param_diff(&m), Some(0.0));
    let bytes = std::fs::read(&path).unwrap();
    m.save(&path).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), bytes);
    std::fs::write(&path, &bytes[..bytes.len() / 2]).unwrap();
    assert!(Model::load(&path).is_err());
}

#[test]
fn feature_map_container() {
    let dir = tempfile::tempdir().unwrap();
    let m: Model = Model::build_initialized(tiny(Variant::Zo), 13).unwrap();
    let path = dir.path().join("fm.bin");
    m.save_feature_maps(&random_triple(3), &["zo.F12"], &path).unwrap();
    let c = read_container(&path).unwrap();
    assert_eq!(c.tensors.len(), 1);
    assert_eq!(c.tensors[0].1, vec![3, 6, 20, 20]);
    assert_eq!(c.meta["kind"], "feature_maps");
}
