use vistop::compiler::{
    geometry, layout_parameter_stream, lower, manifest_for_config, CompileError, CompileOptions, ModelConfig,
};
use vistop::isa::{self, BundleRole, Instruction, Visibility};
use vistop::tensor::Manifest;

fn compile(config: &ModelConfig) -> (isa::BundleProgram, vistop::compiler::LoweringReport) {
    let manifest = manifest_for_config(config).unwrap();
    lower(config, &manifest, &CompileOptions::default()).unwrap()
}

#[test]
fn swin_t_geometry() {
    let c = ModelConfig::swin_t();
    let g: Vec<_> = (0..4).map(|s| geometry(&c, s).unwrap()).collect();
    assert_eq!((g[0].h, g[0].w, g[0].c, g[0].windows), (56, 56, 96, 64));
    assert_eq!((g[3].h, g[3].w, g[3].c, g[3].windows), (7, 7, 768, 1));
    assert_eq!(g.iter().map(|g| g.windows).collect::<Vec<_>>(), [64, 16, 4, 1]);
    assert!(geometry(&c, 4).is_err());
}

#[test]
fn toy_geometry_is_single_window() {
    let mut c = ModelConfig::toy();
    c.dims = vec![24];
    c.heads = vec![3];
    let g = geometry(&c, 0).unwrap();
    assert_eq!((g.h, g.w, g.c, g.windows), (7, 7, 24, 1));
}

#[test]
fn swin_t_structure() {
    let (program, report) = compile(&ModelConfig::swin_t());
    assert!(isa::validate(&program).is_empty());
    let roles = program.exec_roles();
    let attn: Vec<_> = roles.iter().filter(|r| r.is_attention()).collect();
    assert_eq!(attn.len(), 12);
    assert_eq!(
        attn.iter()
            .filter(|r| ***r == BundleRole::ShiftedWindowAttention)
            .count(),
        6
    );
    assert_eq!(roles.iter().filter(|r| **r == BundleRole::PatchMerge).count(), 3);
    assert_eq!(report.module_execs, roles.len());
    assert_eq!(report.parameter_count, program.stream_len());
    println!("{report}");
}

#[test]
fn alternation_restarts_each_stage() {
    let (program, _) = compile(&ModelConfig::swin_t());
    let mut expect_shift = false;
    for r in program.exec_roles() {
        match r {
            BundleRole::WindowAttention => {
                assert!(!expect_shift);
                expect_shift = true;
            }
            BundleRole::ShiftedWindowAttention => {
                assert!(expect_shift);
                expect_shift = false;
            }
            BundleRole::PatchMerge => assert!(!expect_shift),
            _ => {}
        }
    }
}

#[test]
fn swin_t_parameter_total() {
    let m = manifest_for_config(&ModelConfig::swin_t()).unwrap();
    let total = m.total_elements();
    assert!((total as f64 - 28.3e6).abs() / 28.3e6 < 0.01, "{total}");
    // independent tally of the official tiny model
    assert_eq!(total, 28_288_354);
}

#[test]
fn stage_four_uses_private_single_window_bundles() {
    let (program, _) = compile(&ModelConfig::swin_t());
    let private: Vec<_> = program
        .bundles
        .iter()
        .filter(|b| b.visibility == Visibility::Private)
        .collect();
    assert_eq!(private.len(), 2);
    for b in private {
        assert!(!b.components.iter().any(|c| matches!(
            c.op,
            isa::ComponentOp::WindowPartition | isa::ComponentOp::WindowReverse
        )));
    }
    let shifted_single = program.bundles.iter().find(|b| b.name == "swmsa_single").unwrap();
    assert!(shifted_single
        .components
        .iter()
        .any(|c| c.op == isa::ComponentOp::CyclicShift));
}

#[test]
fn lowering_is_deterministic() {
    let c = ModelConfig::swin_t();
    let (a, _) = compile(&c);
    let (b, _) = compile(&c);
    assert_eq!(isa::encode(&a), isa::encode(&b));
}

#[test]
fn param_sets_only_on_change() {
    let (program, _) = compile(&ModelConfig::swin_t());
    let mut shadow = [None; isa::NUM_REGISTERS];
    for i in &program.instructions {
        if let Instruction::ParamSet { reg, value } = *i {
            assert_ne!(shadow[reg as usize], Some(value));
            shadow[reg as usize] = Some(value);
        }
    }
}

#[test]
fn stream_order_two_layers() {
    let names: Vec<String> = ["l1.w", "l1.b", "l2.w", "l2.b"].iter().map(|s| s.to_string()).collect();
    let mut toy = manifest_for_config(&ModelConfig::toy()).unwrap();
    toy.tensors.truncate(4);
    for (e, n) in toy.tensors.iter_mut().zip(&names) {
        e.name = n.clone();
    }
    let s = layout_parameter_stream(&names, &toy).unwrap();
    assert_eq!(
        s.iter().map(|t| t.name.as_str()).collect::<Vec<_>>(),
        ["l1.w", "l1.b", "l2.w", "l2.b"]
    );
    let dup = vec![names[0].clone(), names[0].clone()];
    assert!(matches!(
        layout_parameter_stream(&dup, &toy),
        Err(CompileError::DuplicateStreamTensor(_))
    ));
}

#[test]
fn manifest_shape_mismatch_names_tensor() {
    let c = ModelConfig::toy();
    let mut m = manifest_for_config(&c).unwrap();
    m.tensors[5].w += 1;
    let name = m.tensors[5].name.clone();
    match lower(&c, &m, &CompileOptions::default()) {
        Err(CompileError::Manifest { tensor, .. }) => assert_eq!(tensor, name),
        other => panic!("{other:?}"),
    }
    let mut missing = manifest_for_config(&c).unwrap();
    missing.tensors.remove(2);
    assert!(lower(&c, &missing, &CompileOptions::default()).is_err());
    let mut extra: Manifest = manifest_for_config(&c).unwrap();
    let mut e = extra.tensors[0].clone();
    e.name = "unused".into();
    extra.tensors.push(e);
    assert!(lower(&c, &extra, &CompileOptions::default()).is_err());
}

#[test]
fn rejects_bad_configs() {
    let mut c = ModelConfig::toy();
    c.image_size = 30;
    assert!(c.validate().is_err());
    let mut c = ModelConfig::toy();
    c.window_size = 4;
    c.shift_size = 2;
    assert!(matches!(c.validate(), Err(CompileError::Geometry { .. })));
    let mut c = ModelConfig::toy();
    c.heads = vec![2, 2];
    assert!(c.validate().is_err());
    let json = r#"{"image_size":28,"in_channels":3,"patch_size":4,"window_size":7,"shift_size":3,
        "depths":[2],"dims":[16],"heads":[2],"mlp_ratio":4,"num_classes":10,
        "relative_position_bias":true,"final_norm":true,"dropout":0.1}"#;
    assert!(serde_json::from_str::<ModelConfig>(json).is_err());
}

#[test]
fn toy_variants_compile() {
    for rpb in [false, true] {
        for final_norm in [false, true] {
            let mut c = ModelConfig::toy();
            c.relative_position_bias = rpb;
            c.final_norm = final_norm;
            let (p, r) = compile(&c);
            assert!(isa::validate(&p).is_empty());
            assert_eq!(r.parameter_count, manifest_for_config(&c).unwrap().total_elements());
        }
    }
    let mut c = ModelConfig::toy();
    c.image_size = 56;
    c.depths = vec![2, 2];
    c.dims = vec![16, 32];
    c.heads = vec![2, 4];
    let (p, _) = compile(&c);
    assert!(isa::validate(&p).is_empty());
}
