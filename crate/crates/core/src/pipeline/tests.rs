use super::*;
use crate::synthdata::{build_dataset, DataConfig};

fn tiny_data() -> DatasetSplit {
    build_dataset(&DataConfig {
        pids_per_domain: 4,
        images_per_pid: 4,
        test_pids: 2,
        test_images_per_pid: 4,
        ..Default::default()
    })
    .unwrap()
}

fn micro(plan: StagePlan) -> TrainConfig {
    TrainConfig {
        plan,
        p: 4,
        k: 2,
        ..Default::default()
    }
}

const ONE_EACH: StagePlan = StagePlan {
    initial_epochs: 2,
    id_token_epochs: 2,
    domain_token_epochs: 2,
    finetune_epochs: 2,
};

fn groups_of(model: &Model, names: &[String]) -> Vec<ParamGroup> {
    let mut g: Vec<ParamGroup> = model
        .named_params()
        .into_iter()
        .filter(|(n, _, _)| names.contains(n))
        .map(|(_, g, _)| g)
        .collect();
    g.sort();
    g.dedup();
    g
}

#[test]
fn each_stage_changes_exactly_its_update_set() {
    let data = tiny_data();
    let cfg = micro(ONE_EACH);
    let mut model = TrainedModel::init(&cfg, &data).unwrap();
    let mut log = MetricLog::default();
    let mut opts = RunOptions::default();
    for tag in StageTag::ALL {
        let before = model.model.clone();
        match tag {
            StageTag::Initial => run_stage_initial(&cfg, &mut model, &data, &mut log, &mut opts),
            StageTag::Finetune => run_stage_finetune(&cfg, &mut model, &data, &mut log, &mut opts),
            _ => run_stage_prompt(&cfg, &mut model, &data, tag, &mut log, &mut opts),
        }
        .unwrap();
        let changed = changed_params(&before, &model.model);
        let mut expected = tag.update_groups().to_vec();
        expected.sort();
        assert_eq!(groups_of(&model.model, &changed), expected, "{tag:?}");
        assert!(!changed.contains(&"image.log_scale".to_string()));
    }
    assert_eq!(model.provenance.len(), 4);
    assert_eq!(model.stage_label(), "initial+prompt_ids+prompt_domains+finetune");
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let data = tiny_data();
    let cfg = micro(StagePlan {
        initial_epochs: 0,
        id_token_epochs: 0,
        domain_token_epochs: 0,
        finetune_epochs: 0,
    });
    let fresh = TrainedModel::init(&cfg, &data).unwrap();
    let (trained, log) = train(&cfg, &data, RunOptions::default()).unwrap();
    assert_eq!(trained.model, fresh.model);
    assert!(log.records.is_empty());
    assert_eq!(trained.stage_label(), "untrained");
}

#[test]
fn zero_alpha_leaves_the_domain_classifier_untouched() {
    let data = tiny_data();
    let mut cfg = micro(StagePlan {
        initial_epochs: 0,
        id_token_epochs: 2,
        domain_token_epochs: 0,
        finetune_epochs: 0,
    });
    cfg.weights.alpha = 0.0;
    let fresh = TrainedModel::init(&cfg, &data).unwrap();
    let (trained, _) = train(&cfg, &data, RunOptions::default()).unwrap();
    assert_eq!(trained.model.domain_head, fresh.model.domain_head);
    assert_ne!(trained.model.bank.id_tokens, fresh.model.bank.id_tokens);
}

#[test]
fn identical_seeds_give_identical_logs_and_weights() {
    let data = tiny_data();
    let cfg = micro(ONE_EACH);
    let (a, la) = train(&cfg, &data, RunOptions::default()).unwrap();
    let (b, lb) = train(&cfg, &data, RunOptions::default()).unwrap();
    assert_eq!(la.to_jsonl(), lb.to_jsonl());
    assert!(changed_params(&a.model, &b.model).is_empty());
    let other = TrainConfig { seed: 1, ..cfg };
    let (_, lc) = train(&other, &data, RunOptions::default()).unwrap();
    assert_ne!(la.to_jsonl(), lc.to_jsonl());
}

#[test]
fn metric_log_records_every_epoch() {
    let data = tiny_data();
    let cfg = micro(ONE_EACH);
    let mut seen = 0;
    let mut stages = Vec::new();
    let mut cb = |_: &MetricRecord| seen += 1;
    let mut on_stage = |tag: StageTag, m: &TrainedModel| {
        assert_eq!(m.last_stage(), Some(tag));
        stages.push(tag);
        Ok(())
    };
    let (_, log) = train(
        &cfg,
        &data,
        RunOptions {
            record_wall_time: false,
            on_epoch: Some(&mut cb),
            on_stage: Some(&mut on_stage),
        },
    )
    .unwrap();
    assert_eq!(log.records.len(), 8);
    assert_eq!(seen, 8);
    assert_eq!(stages, StageTag::ALL.to_vec());
    let phases: Vec<(&str, &str)> = log
        .records
        .iter()
        .map(|r| (r.stage.as_str(), r.phase.as_str()))
        .collect();
    assert_eq!(phases[2], ("prompt", "A"));
    assert_eq!(phases[5], ("prompt", "B"));
    let ft = log.final_record("finetune").unwrap();
    for key in ["id", "triplet", "i2tce", "apn"] {
        assert!(ft.loss_components.contains_key(key));
    }
    assert!(log.records.iter().all(|r| r.wall_ms == 0));
    assert_eq!(MetricLog::from_jsonl(&log.to_jsonl()).unwrap(), log);
}

#[test]
fn non_finite_parameters_abort_with_context() {
    let data = tiny_data();
    let cfg = micro(ONE_EACH);
    let mut model = TrainedModel::init(&cfg, &data).unwrap();
    model.model.id_head.w[[0, 0]] = f64::NAN;
    let err = resume(&cfg, &data, model, RunOptions::default()).unwrap_err();
    match err {
        PipelineError::NonFinite {
            stage,
            epoch,
            component,
            ..
        } => {
            assert_eq!(stage, "initial");
            assert_eq!(epoch, 0);
            assert!(component.contains("id"), "{component}");
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn checkpoint_round_trip_and_resume() {
    let data = tiny_data();
    let mut cfg = micro(ONE_EACH);
    cfg.plan.finetune_epochs = 0;
    let (stage2, _) = train(&cfg, &data, RunOptions::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("stage2.ckpt");
    save_checkpoint(&stage2, &path).unwrap();
    let back = load_checkpoint(&path).unwrap();
    assert_eq!(back, stage2);
    let again = dir.path().join("again.ckpt");
    save_checkpoint(&back, &again).unwrap();
    assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&again).unwrap());

    let full = micro(ONE_EACH);
    let (resumed, log) = resume(&full, &data, back, RunOptions::default()).unwrap();
    assert!(log.records.iter().all(|r| r.stage == "finetune"));
    assert_eq!(resumed.last_stage(), Some(StageTag::Finetune));
    let (direct, _) = train(&full, &data, RunOptions::default()).unwrap();
    assert!(changed_params(&resumed.model, &direct.model).is_empty());
}

#[test]
fn checkpoint_rejects_mismatches() {
    let data = tiny_data();
    let cfg = micro(ONE_EACH);
    let model = TrainedModel::init(&cfg, &data).unwrap();
    let bytes = checkpoint::to_bytes(&model);
    assert!(checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    assert!(checkpoint::from_bytes(b"garbage").is_err());

    let bigger = build_dataset(&DataConfig {
        pids_per_domain: 5,
        images_per_pid: 4,
        test_pids: 2,
        test_images_per_pid: 4,
        ..Default::default()
    })
    .unwrap();
    assert!(matches!(
        resume(&cfg, &bigger, model, RunOptions::default()),
        Err(PipelineError::Checkpoint(_))
    ));
}

#[test]
fn config_hash_tracks_content() {
    let a = TrainConfig::default();
    let mut b = a.clone();
    assert_eq!(a.hash(), b.hash());
    b.weights.beta = 0.5;
    assert_ne!(a.hash(), b.hash());
    assert_eq!(a.hash().len(), 64);
}

#[test]
fn invalid_configs_are_rejected() {
    let data = tiny_data();
    let mut cfg = micro(ONE_EACH);
    cfg.k = 1;
    assert!(matches!(
        train(&cfg, &data, RunOptions::default()),
        Err(PipelineError::Config(_))
    ));
    let mut cfg = micro(ONE_EACH);
    cfg.weights.beta = 1.5;
    assert!(matches!(
        train(&cfg, &data, RunOptions::default()),
        Err(PipelineError::Loss(_))
    ));
}

#[test]
fn plans_have_the_expected_budgets() {
    assert_eq!(StagePlan::default(), StagePlan::PAPER);
    assert_eq!(StagePlan::PAPER.total(), 213);
    assert_eq!(StagePlan::BALANCED.total(), 180);
    assert_eq!(StagePlan::DESK.total(), 73);
}
