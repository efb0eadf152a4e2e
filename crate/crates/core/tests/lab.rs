use crhlab_core::crhkit::{classify_phase, fdt_residual, six_alignments, PhaseId, Relation, Side};
use crhlab_core::netcore::{init_mlp, train_step, Activation, Loss, Optimizer, OptimizerState, Targets, TrainConfig};
use crhlab_core::probes::{conjugate_set, MomentMode};
use crhlab_core::tasks::{teacher_range, TeacherSpec};
use crhlab_core::theoremlab::{check_master, collapse_instance, nc_check, synth_phase_instance};
use crhlab_core::{MlpModel64, TeacherSpec64};

#[test]
fn master_theorem_holds_on_every_phase_at_desk_dims() {
    for phase in PhaseId::table() {
        for seed in 0..3 {
            let inst = synth_phase_instance::<f64>(phase, 12, 12, seed).unwrap();
            let check = check_master(&inst, 1e-10).unwrap();
            let bad: Vec<_> = check.failures().map(|c| format!("{} {}", c.relation, c.measured)).collect();
            assert!(bad.is_empty(), "{phase} seed {seed}: {bad:?}");
        }
    }
}

#[test]
fn collapsed_classifier_meets_every_collapse_metric() {
    let (model, x, labels) = collapse_instance::<f64>(3, 9, 1.5, 4, 2).unwrap();
    let r = nc_check(&model, x.view(), &labels, Loss::Mse, true, MomentMode::Raw).unwrap();
    assert!(r.nc1.abs() < 1e-20 && r.nc2 <= 1e-10);
    assert!((r.nc3.unwrap() - 1.0).abs() < 1e-12);
    for rel in Relation::ALL.iter().filter(|r| r.side == Side::A) {
        assert!((r.alignments.score(*rel).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn short_teacher_run_produces_finite_reports() {
    let teacher: TeacherSpec64 = TeacherSpec::new(12, 16, 1, 3).unwrap();
    let mut model: MlpModel64 = init_mlp(&[12, 16, 16, 1], Activation::Relu, true, 1).unwrap();
    let cfg = TrainConfig {
        learning_rate: 0.05,
        weight_decay: 1e-3,
        batch_size: 32,
        steps: 300,
        optimizer: Optimizer::Sgd,
        seed: 1,
        loss: Loss::Mse,
    };
    let mut state = OptimizerState::new(&model);
    let mut first = None;
    let mut last = 0.0;
    for step in 0..cfg.steps {
        let (x, y) = teacher_range(&teacher, step * 32, 32, 1);
        last = train_step(&mut model, x.view(), &Targets::Regression(y), &cfg, &mut state).unwrap();
        first.get_or_insert(last);
    }
    assert!(last < first.unwrap());

    let (x, y) = teacher_range(&teacher, 0, 500, 7);
    let rec = model.forward_capture(x.view()).unwrap();
    let back = model.backward_capture(&rec, &Targets::Regression(y), Loss::Mse).unwrap();
    for layer in 0..model.depth() {
        let raw = conjugate_set(&model, &back.tapes, layer, MomentMode::Raw).unwrap();
        let cn = conjugate_set(&model, &back.tapes, layer, MomentMode::CenteredNormalized).unwrap();
        let report = six_alignments(&cn);
        classify_phase(&report, 0.9).unwrap();
        for side in Side::BOTH {
            let f = fdt_residual(&raw, 0.05 / 32.0, 1e-3, side).unwrap();
            assert!(f.relative_residual.is_finite() && f.relative_residual >= 0.0);
        }
        assert!(fdt_residual(&cn, 0.05, 1e-3, Side::B).is_err());
    }
}
