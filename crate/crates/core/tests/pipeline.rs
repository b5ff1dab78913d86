use std::fs;

use mmprompt::backbone::argmax;
use mmprompt::config::{EvalMode, RunConfig};
use mmprompt::harness::checkpoint::sha256_hex;
use mmprompt::harness::{compute_metrics, evaluate_matrix, prepare, run_full, write_outputs};
use mmprompt::taskgen::{degrade_modality, warmup_samples, DegradeMode, QuestionType};

fn small() -> RunConfig {
    RunConfig {
        n_tasks: 3,
        n_classes: 6,
        n_question_types: 4,
        n_subtasks: 2,
        train_per_task: 60,
        test_per_task: 30,
        dim: 8,
        layers: 3,
        heads: 2,
        general_layers: vec![1],
        expert_layers: vec![2],
        warmup_steps: 40,
        warmup_batch: 8,
        warmup_samples: 200,
        pool_sizes: [6, 6, 8, 8],
        top_k: 3,
        query_heads: 2,
        token_view: 2,
        steps_per_task: 8,
        batch: 4,
        ..RunConfig::default()
    }
}

#[test]
fn replay_off_never_touches_earlier_tasks() {
    let out = run_full(&small()).unwrap();
    assert!(out.access_log.isolated());
    assert_eq!(out.access_log.max_buffer_len, 0);
    assert_eq!(out.access_log.entries.len(), 3 * 8);
}

#[test]
fn replay_on_mixes_earlier_tasks_within_capacity() {
    let cfg = RunConfig {
        replay_size: 50,
        ..small()
    };
    let out = run_full(&cfg).unwrap();
    assert!(!out.access_log.isolated());
    assert!(out.access_log.max_buffer_len <= 50);
    // nothing is replayed during the first task
    assert!(out
        .access_log
        .entries
        .iter()
        .filter(|e| e.task_position == 0)
        .all(|e| e.replayed == 0 && e.from_earlier_tasks == 0));
}

#[test]
fn scaling_logits_keeps_every_accuracy() {
    let cfg = small();
    let prep = prepare(&cfg).unwrap();
    let out = run_full(&cfg).unwrap();
    let modes = [EvalMode::Joint, EvalMode::VOnly, EvalMode::QOnly];
    let base = evaluate_matrix(&prep.model, &out.backbone, &out.checkpoints.tasks, &prep.stream, &modes).unwrap();
    for c in [0.01, 3.0, 250.0] {
        let mut bb = out.backbone.clone();
        for name in ["backbone.head_w", "backbone.head_b"] {
            let t = bb.get(name).unwrap().map(|x| x * c);
            bb.set(name, t).unwrap();
        }
        let scaled = evaluate_matrix(&prep.model, &bb, &out.checkpoints.tasks, &prep.stream, &modes).unwrap();
        assert_eq!(base, scaled, "scale {c}");
    }
}

#[test]
fn report_metrics_are_recomputable_and_files_match_manifest() {
    let cfg = small();
    let out = run_full(&cfg).unwrap();
    let r = &out.report;
    let m = compute_metrics(
        &r.matrices["joint"],
        r.matrices.get("v_only"),
        r.matrices.get("q_only"),
        Some(&r.subtask_matrices),
    )
    .unwrap();
    assert_eq!(m, r.metrics);
    assert!(r.frozen_intact);
    assert_eq!(r.backbone_digest, r.backbone_digest_after);

    let dir = tempfile::tempdir().unwrap();
    let manifest = write_outputs(r, &cfg.to_text(), dir.path()).unwrap();
    for e in &manifest.files {
        let bytes = fs::read(dir.path().join(&e.file)).unwrap();
        assert_eq!(sha256_hex(&bytes), e.sha256, "{}", e.file);
    }
    assert!(manifest.digest_of("acc_joint.csv").is_some());
    assert!(manifest.digest_of("acc_subtasks_task3.csv").is_some());
    let saved = fs::read_to_string(dir.path().join("config.txt")).unwrap();
    assert_eq!(RunConfig::from_text(&saved).unwrap(), cfg);
}

#[test]
fn question_only_color_answers_fall_to_chance() {
    // attributes drawn uniformly, so color lives only in the descriptor
    let cfg = RunConfig {
        typicality: 0.0,
        warmup_steps: 1200,
        ..RunConfig::default()
    };
    let prep = prepare(&cfg).unwrap();
    let probe: Vec<_> = warmup_samples(&prep.stream, 8000, 99)
        .unwrap()
        .into_iter()
        .filter(|s| s.qtype == QuestionType::WhatColor)
        .take(1000)
        .collect();
    assert_eq!(probe.len(), 1000);
    let acc = |mode: Option<DegradeMode>| {
        let hits = probe
            .iter()
            .filter(|s| {
                let x = match mode {
                    Some(m) => degrade_modality(s, m, &prep.stream.descriptor_mean),
                    None => (*s).clone(),
                };
                argmax(prep.model.backbone.logits_values(&prep.store, &x).unwrap().data()) == s.label
            })
            .count();
        hits as f64 / probe.len() as f64
    };
    let (joint, q_only) = (acc(None), acc(Some(DegradeMode::QOnly)));
    // four colors: chance is 0.25, three standard errors is about 0.04
    assert!((q_only - 0.25).abs() < 0.045, "q_only {q_only}");
    assert!(joint > q_only + 0.2, "joint {joint} vs q_only {q_only}");
}
