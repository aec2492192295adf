use attnlab_core::attention::{
    apply_group_scaling, attention_forward, build_partition, resolve_targets, ArchMode, GroupFlags, ScalingPosition,
    ScalingTargets,
};
use attnlab_core::calibration::{FixtureModel, SyntheticCalibration, DEFAULT_HIGH_QUANTILE, DEFAULT_TAU};
use attnlab_core::io::{TensorData, TensorFile};
use attnlab_core::numkernel::{sample_gaussian, Matrix};
use attnlab_core::schedule::{
    active_steps, scheduled_attention, BlockGateTable, ScalingMode, ScheduleConfig, StepWindow, WindowPreset,
};
use attnlab_core::sim::{
    conflict_experiment, deviation_bound_check, flops_audit, make_toy_denoiser, run_trajectory, ConflictConfig, Probe,
    StepCoefficients, ToyDims,
};
use attnlab_core::Seed;
use proptest::prelude::*;

#[test]
fn presets_at_25_steps() {
    let steps = |p: WindowPreset| active_steps(25, p.window());
    assert_eq!(steps(WindowPreset::Early), (1..=8).collect::<Vec<_>>());
    assert_eq!(steps(WindowPreset::Middle), (10..=16).collect::<Vec<_>>());
    assert_eq!(steps(WindowPreset::Late), (18..=25).collect::<Vec<_>>());
    assert_eq!(steps(WindowPreset::All), (1..=25).collect::<Vec<_>>());
}

#[test]
fn default_joint_position_scales_conditioning_keys() {
    let t = resolve_targets(ArchMode::JointSelfAttention, ScalingPosition::KeyImageKeyText).unwrap();
    assert_eq!(t, ScalingTargets::keys(GroupFlags::CONDITIONING));
    let partition = build_partition(2, 3, 4).unwrap();
    let q = sample_gaussian::<f64>(4, 5, Seed(1), 0.0, 1.0).unwrap();
    let k = sample_gaussian::<f64>(9, 5, Seed(2), 0.0, 1.0).unwrap();
    let v = Matrix::identity(9);
    let base = attention_forward(&q, &k, &v, 5).unwrap();
    let s = apply_group_scaling(&q, &k, &partition, &t, 1.35, ArchMode::JointSelfAttention).unwrap();
    let scaled = attention_forward(s.queries.for_group(attnlab_core::attention::TokenGroup::Video), &s.keys, &v, 5).unwrap();
    for i in 0..4 {
        for j in 0..9 {
            let want = if j < 5 { 1.35 * base.logits.get(i, j) } else { base.logits.get(i, j) };
            assert!((scaled.logits.get(i, j) - want).abs() <= 1e-12 * want.abs().max(1.0));
            if j >= 5 {
                assert_eq!(scaled.logits.get(i, j), base.logits.get(i, j));
            }
        }
    }
}

fn identity_cases() -> Vec<ScheduleConfig<f64>> {
    let targets = ScalingTargets::keys(GroupFlags::CONDITIONING);
    let arch = ArchMode::JointSelfAttention;
    vec![
        ScheduleConfig::new(WindowPreset::All.window(), BlockGateTable::all(3), 1.0, targets, 10, arch, ScalingMode::Scalar).unwrap(),
        ScheduleConfig::new(WindowPreset::All.window(), BlockGateTable::none(3), 1.35, targets, 10, arch, ScalingMode::Scalar).unwrap(),
        ScheduleConfig::new(StepWindow::new(0.95, 0.96).unwrap(), BlockGateTable::all(3), 1.35, targets, 10, arch, ScalingMode::Scalar).unwrap(),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn identity_schedules_are_bit_exact(seed in 0u64..10_000, t in 1usize..=10, l in 0usize..3) {
        let partition = build_partition(2, 3, 4).unwrap();
        let q = sample_gaussian::<f64>(4, 6, Seed(seed), 0.0, 1.0).unwrap();
        let k = sample_gaussian::<f64>(9, 6, Seed(seed + 1), 0.0, 1.0).unwrap();
        let v = sample_gaussian::<f64>(9, 3, Seed(seed + 2), 0.0, 1.0).unwrap();
        let plain = attention_forward(&q, &k, &v, 6).unwrap();
        for cfg in identity_cases() {
            let r = scheduled_attention(l, t, &q, &k, &v, &partition, &cfg).unwrap();
            match r.attention {
                attnlab_core::attention::BlockAttention::Joint(a) => {
                    prop_assert_eq!(&a.output, &plain.output);
                    prop_assert_eq!(&a.probabilities, &plain.probabilities);
                }
                _ => prop_assert!(false, "joint schedule returned factorized attention"),
            }
            prop_assert_eq!(r.scale_multiplications, 0);
        }
    }

    #[test]
    fn conflict_entropy_and_sharpening(seed in 0u64..10_000) {
        let r = conflict_experiment::<f64>(Seed(seed), &ConflictConfig::default()).unwrap();
        for q in r.queries.iter().filter(|q| !q.degenerate) {
            prop_assert!(q.entropy_ratio() < 1.0);
            prop_assert!(q.sharpening_monotone, "{:?}", q.sharpening);
        }
    }

    #[test]
    fn deviation_bound_on_probes(seed in 0u64..10_000, alpha in 0.5f64..3.0, block in 0usize..3, query in 0usize..6) {
        let d = make_toy_denoiser::<f64>(Seed(seed), 3, ToyDims::default()).unwrap();
        let coeffs = StepCoefficients::linear(8).unwrap();
        let x = d.initial_state(Seed(seed ^ 0xABCD)).unwrap();
        let r = deviation_bound_check(&d, &coeffs, 1 + (seed as usize % 8), &x, alpha, Probe { block, query }).unwrap();
        prop_assert!(r.holds, "{r:?}");
    }

    #[test]
    fn tensor_round_trip(dims in prop::collection::vec(1usize..5, 0..4), seed in any::<u64>(), as_bool in any::<bool>()) {
        let n: usize = dims.iter().product();
        let data = if as_bool {
            TensorData::Bool((0..n).map(|i| (seed >> (i % 64)) & 1 == 1).collect())
        } else {
            TensorData::Real(sample_gaussian::<f64>(1, n, Seed(seed), 0.0, 1.0).unwrap().into_data())
        };
        let t = TensorFile::new(dims, data).unwrap();
        let bytes = t.encode();
        let back = TensorFile::decode(&bytes).unwrap();
        prop_assert_eq!(&back, &t);
        prop_assert_eq!(back.encode(), bytes);
    }
}

#[test]
fn trajectories_are_reproducible_and_audited() {
    let build = || {
        let d = make_toy_denoiser::<f64>(Seed(11), 8, ToyDims::default()).unwrap();
        let coeffs = StepCoefficients::linear(25).unwrap();
        let s = ScheduleConfig::new(
            WindowPreset::Early.window(),
            BlockGateTable::first_half(8),
            1.35,
            ScalingTargets::keys(GroupFlags::CONDITIONING),
            25,
            ArchMode::JointSelfAttention,
            ScalingMode::Scalar,
        )
        .unwrap();
        let x = d.initial_state(Seed(12)).unwrap();
        (run_trajectory(&d, &coeffs, &s, x).unwrap(), s)
    };
    let (a, s) = build();
    let (b, _) = build();
    assert_eq!(a, b);
    let audit = flops_audit(&a, &s).unwrap();
    assert_eq!((audit.predicted_cells, audit.measured_cells), (32, 32));
    assert!(audit.cells_match && audit.exact);
    assert!((audit.model_fraction - 0.16).abs() < 1e-15);
}

#[test]
fn energy_mode_stays_in_range() {
    let d = make_toy_denoiser::<f64>(Seed(3), 2, ToyDims::default()).unwrap();
    let coeffs = StepCoefficients::linear(4).unwrap();
    let s = ScheduleConfig::new(
        WindowPreset::All.window(),
        BlockGateTable::all(2),
        1.0,
        ScalingTargets::keys(GroupFlags::CONDITIONING),
        4,
        ArchMode::JointSelfAttention,
        ScalingMode::Energy { gamma_max: 1.5, kappa: 1.0 },
    )
    .unwrap();
    let traj = run_trajectory(&d, &coeffs, &s, d.initial_state(Seed(4)).unwrap()).unwrap();
    for rec in &traj.steps {
        assert!(rec.entropy_ratio_max.is_some_and(|r| r < 1.0));
    }
}

#[test]
fn calibration_is_deterministic_and_fixtures_fit() {
    let cal = SyntheticCalibration { samples: 8, ..Default::default() };
    let a = cal.run(Seed(7), DEFAULT_TAU, DEFAULT_HIGH_QUANTILE).unwrap();
    let b = cal.run(Seed(7), DEFAULT_TAU, DEFAULT_HIGH_QUANTILE).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    let every = cal.run(Seed(7), 0.0, DEFAULT_HIGH_QUANTILE).unwrap();
    if every.table.ratios().iter().all(|&r| r > 0.0) {
        assert_eq!(every.selected, (0..cal.blocks).collect::<Vec<_>>());
    }
    for m in FixtureModel::ALL {
        let f = m.load().unwrap();
        f.validate(f.min_blocks()).unwrap();
        let gates = BlockGateTable::from_indices(&f.blocks, f.min_blocks()).unwrap();
        assert_eq!(gates.open_count(), f.blocks.len());
    }
    let f1 = FixtureModel::FramePackF1.load().unwrap();
    assert!(f1.blocks.iter().all(|&b| b < 40));
}
