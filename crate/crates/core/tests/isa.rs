use proptest::prelude::*;
use vistop::compiler::{lower, manifest_for_config, CompileOptions, ModelConfig};
use vistop::isa::{
    self, decode, disassemble, encode, expand, validate, BundleProgram, BundleRole, BundleTableEntry,
    ComponentInvocation, ComponentKind, ComponentOp, DecodeErrorKind, Diagnostic, ExecError, Instruction, Job,
    MemoryRegion, ProgramError, ProgramIo, RegisterFile, StreamTensor, Visibility,
};
use vistop::tensor::Dims3;

fn swin_t() -> BundleProgram {
    let c = ModelConfig::swin_t();
    lower(&c, &manifest_for_config(&c).unwrap(), &CompileOptions::default())
        .unwrap()
        .0
}

fn region(name: &str, base: usize, len: usize) -> MemoryRegion {
    MemoryRegion {
        name: name.into(),
        base,
        len,
        frac_bits: 4,
    }
}

/// `gelu` over 16 elements of region `a`, in place.
fn gelu_program() -> BundleProgram {
    BundleProgram {
        io: None,
        memory: vec![region("a", 0, 16)],
        bundles: vec![BundleTableEntry {
            id: 3,
            name: "act".into(),
            role: BundleRole::Other,
            visibility: Visibility::Public,
            components: vec![ComponentInvocation::new(ComponentOp::Gelu, vec![0, 1, 1])],
        }],
        instructions: vec![
            Instruction::ParamSet { reg: 0, value: 16 },
            Instruction::ParamSet { reg: 1, value: 0 },
            Instruction::ModuleExec { bundle: 3 },
        ],
        stream: vec![],
    }
}

#[test]
fn empty_program_round_trips() {
    let p = BundleProgram::default();
    let bytes = encode(&p);
    assert_eq!(&bytes[..4], b"VTOP");
    assert_eq!(decode(&bytes).unwrap(), p);
    assert!(validate(&p).is_empty());
}

#[test]
fn swin_t_round_trips_bit_exactly() {
    let p = swin_t();
    let bytes = encode(&p);
    let back = decode(&bytes).unwrap();
    assert_eq!(back, p);
    assert_eq!(encode(&back), bytes);
}

#[test]
fn swin_t_validates_clean() {
    assert_eq!(validate(&swin_t()), vec![]);
}

#[test]
fn gelu_bundle_is_one_job() {
    let p = gelu_program();
    let mut regs = RegisterFile::default();
    regs.set(0, 16).unwrap();
    regs.set(1, 0).unwrap();
    let jobs = expand(&p.bundles[0], &regs, &p.memory).unwrap();
    assert_eq!(jobs.len(), 1);
    assert_eq!(jobs[0].kind(), ComponentKind::Gelu);
    assert_eq!(jobs[0].op_count(), 16);
    assert_eq!(expand(&p.bundles[0], &regs, &p.memory).unwrap(), jobs);
}

#[test]
fn uninitialized_register_is_named() {
    let p = gelu_program();
    let mut regs = RegisterFile::default();
    regs.set(0, 16).unwrap();
    assert_eq!(
        expand(&p.bundles[0], &regs, &p.memory),
        Err(ProgramError::Uninitialized(1))
    );
}

#[test]
fn address_outside_memory_map() {
    let p = gelu_program();
    let mut regs = RegisterFile::default();
    regs.set(0, 17).unwrap();
    regs.set(1, 0).unwrap();
    assert!(matches!(
        expand(&p.bundles[0], &regs, &p.memory),
        Err(ProgramError::Address(_))
    ));
}

#[test]
fn unknown_bundle_is_an_error() {
    let mut p = gelu_program();
    p.instructions.push(Instruction::ModuleExec { bundle: 9 });
    let r = isa::walk::<ExecError>(&p, |_, _| Ok(()));
    let e = r.unwrap_err();
    assert_eq!(e.instruction, 3);
    assert_eq!(e.source, ProgramError::UnknownBundle(9));
    assert!(validate(&p).contains(&Diagnostic::UnknownBundle {
        instruction: 3,
        bundle: 9
    }));
}

#[test]
fn exec_before_param_set_is_diagnosed() {
    let mut p = gelu_program();
    p.instructions.rotate_right(1);
    let d = validate(&p);
    assert!(d
        .iter()
        .any(|d| matches!(d, Diagnostic::UninitializedRegister { instruction: 0, .. })));
}

#[test]
fn stream_accounting_is_diagnosed() {
    let mut p = gelu_program();
    p.stream.push(StreamTensor {
        name: "orphan".into(),
        len: 8,
    });
    assert_eq!(
        validate(&p),
        vec![Diagnostic::StreamAccounting {
            declared: 8,
            consumed: 0
        }]
    );
}

#[test]
fn overlapping_regions_are_diagnosed() {
    let mut p = gelu_program();
    p.memory.push(region("b", 8, 16));
    assert!(validate(&p).contains(&Diagnostic::RegionOverlap("a".into(), "b".into())));
}

#[test]
fn io_region_size_is_checked() {
    let mut p = gelu_program();
    p.io = Some(ProgramIo {
        input_region: "a".into(),
        input_dims: Dims3::new(1, 4, 5).unwrap(),
        output_region: "a".into(),
        output_len: 16,
    });
    assert_eq!(
        validate(&p),
        vec![Diagnostic::IoSize {
            region: "a".into(),
            expected: 20,
            actual: 16
        }]
    );
}

#[test]
fn stage_one_wmsa_expansion_counts() {
    let p = swin_t();
    let mut first = None;
    isa::walk::<ExecError>(&p, |step, regs| {
        let entry = p.bundle(step.bundle).unwrap();
        if first.is_none() && entry.role == BundleRole::WindowAttention {
            first = Some((step.jobs, regs.clone()));
        }
        Ok(())
    })
    .unwrap();
    let (jobs, _) = first.unwrap();
    // count oracle: (56 / 7)^2 windows, 3 heads
    let (windows, heads) = ((56 / 7) * (56 / 7), 3);
    let partition: Vec<_> = jobs
        .iter()
        .filter_map(|j| match j {
            Job::DataMove(plan) if plan.len() == windows => Some(plan),
            _ => None,
        })
        .collect();
    assert_eq!(partition.len(), 1, "one window-partition plan");
    assert_eq!(partition[0].len(), 64);
    let softmax = jobs.iter().filter(|j| j.kind() == ComponentKind::SoftMax).count();
    assert_eq!(softmax, windows * heads);
    let matmuls: Vec<_> = jobs
        .iter()
        .filter_map(|j| match j {
            Job::MatMul(m) => Some(m),
            _ => None,
        })
        .collect();
    // qkv + per-window scores + per-window context + projection
    assert_eq!(matmuls.len(), 2 + 2 * windows * heads);
    assert_eq!(matmuls[0].n, 3 * 96);
    assert_eq!(matmuls.last().unwrap().n, 96);
    assert!(matmuls.last().unwrap().accumulate);
    let per_window_macs: u64 = matmuls[1..matmuls.len() - 1].iter().map(|m| m.macs()).sum();
    assert_eq!(per_window_macs, 2 * 64 * 3 * 49 * 49 * 32);
}

#[test]
fn decode_rejects_bad_header() {
    let mut bytes = encode(&gelu_program());
    bytes[0] = b'X';
    assert_eq!(decode(&bytes).unwrap_err().kind, DecodeErrorKind::BadMagic);
    let mut bytes = encode(&gelu_program());
    bytes[4] = 9;
    let e = decode(&bytes).unwrap_err();
    assert_eq!((e.offset, e.kind), (4, DecodeErrorKind::BadVersion(9)));
    assert_eq!(decode(b"VT").unwrap_err().kind, DecodeErrorKind::BadMagic);
}

#[test]
fn corrupted_length_field_is_an_error() {
    let mut bytes = encode(&gelu_program());
    // header (8) + io tag (1), then the u32 region count
    bytes[9..13].copy_from_slice(&u32::MAX.to_le_bytes());
    let e = decode(&bytes).unwrap_err();
    assert_eq!(e.offset, 13);
    assert_eq!(e.kind, DecodeErrorKind::BadCount(u32::MAX as u64));
}

#[test]
fn every_truncation_fails_cleanly() {
    let bytes = encode(&swin_t());
    for n in (0..bytes.len()).step_by(7).chain([bytes.len() - 1]) {
        assert!(decode(&bytes[..n]).is_err(), "prefix {n}");
    }
    let mut long = bytes.clone();
    long.push(0);
    assert_eq!(decode(&long).unwrap_err().kind, DecodeErrorKind::Trailing(1));
}

#[test]
fn disasm_is_stable_and_line_oriented() {
    let p = gelu_program();
    let text = disassemble(&p);
    assert_eq!(
        text,
        ".region\ta\t0x0\t16\tF=4\n\
         .bundle\t3\tact\tother\tpublic\n\
         \t.component\tgelu\tcount=r0\tsrc=r1\tdst=r1\n\
         000000\tParamSet\tr0\t16\n\
         000001\tParamSet\tr1\t0\n\
         000002\tModuleExec\t3\tact\n"
    );
    let swin = disassemble(&swin_t());
    assert_eq!(swin, disassemble(&decode(&encode(&swin_t())).unwrap()));
    assert_eq!(
        swin.lines().filter(|l| l.contains("\tModuleExec\t")).count(),
        swin_t().exec_roles().len()
    );
}

fn arb_name() -> impl Strategy<Value = String> {
    "[a-z_]{0,12}"
}

fn arb_bundle() -> impl Strategy<Value = BundleTableEntry> {
    let comp = (0..ComponentOp::ALL.len(), prop::collection::vec(0u8..64, 0..9))
        .prop_map(|(op, regs)| ComponentInvocation::new(ComponentOp::ALL[op], regs));
    (
        any::<u8>(),
        arb_name(),
        0..BundleRole::ALL.len(),
        any::<bool>(),
        prop::collection::vec(comp, 0..5),
    )
        .prop_map(|(id, name, role, private, components)| BundleTableEntry {
            id,
            name,
            role: BundleRole::ALL[role],
            visibility: if private {
                Visibility::Private
            } else {
                Visibility::Public
            },
            components,
        })
}

fn arb_program() -> impl Strategy<Value = BundleProgram> {
    let inst = prop_oneof![
        (0u8..64, any::<u64>()).prop_map(|(reg, value)| Instruction::ParamSet { reg, value }),
        any::<u8>().prop_map(|bundle| Instruction::ModuleExec { bundle }),
    ];
    let io = prop::option::of(
        (arb_name(), 1usize..9, 1usize..9, 1usize..9, arb_name(), 0usize..1000).prop_map(|(i, c, h, w, o, n)| {
            ProgramIo {
                input_region: i,
                input_dims: Dims3::new(c, h, w).unwrap(),
                output_region: o,
                output_len: n,
            }
        }),
    );
    let mem =
        (arb_name(), 0usize..1 << 40, 0usize..1 << 20, 0u8..8).prop_map(|(name, base, len, frac_bits)| MemoryRegion {
            name,
            base,
            len,
            frac_bits,
        });
    let stream = (arb_name(), 0usize..1 << 30).prop_map(|(name, len)| StreamTensor { name, len });
    (
        io,
        prop::collection::vec(mem, 0..6),
        prop::collection::vec(arb_bundle(), 0..6),
        prop::collection::vec(inst, 0..40),
        prop::collection::vec(stream, 0..6),
    )
        .prop_map(|(io, memory, bundles, instructions, stream)| BundleProgram {
            io,
            memory,
            bundles,
            instructions,
            stream,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(500))]

    #[test]
    fn encode_decode_round_trip(p in arb_program()) {
        let bytes = encode(&p);
        prop_assert_eq!(decode(&bytes).unwrap(), p);
    }

    #[test]
    fn corrupted_bytes_never_panic(p in arb_program(), flips in prop::collection::vec((any::<prop::sample::Index>(), any::<u8>()), 1..8)) {
        let mut bytes = encode(&p);
        for (i, v) in flips {
            let i = i.index(bytes.len());
            bytes[i] = v;
        }
        let _ = decode(&bytes);
    }

    #[test]
    fn arbitrary_bytes_never_panic(bytes in prop::collection::vec(any::<u8>(), 0..256)) {
        let mut with_magic = b"VTOP\x01\x00\x00\x00".to_vec();
        with_magic.extend_from_slice(&bytes);
        let _ = decode(&bytes);
        let _ = decode(&with_magic);
    }
}
