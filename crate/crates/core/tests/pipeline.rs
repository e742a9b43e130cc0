use std::collections::HashSet;
use std::fs::{self, OpenOptions};
use std::io::{self, Write};
use std::sync::Arc;

use demian_core::annotation::{
    annotate_segment, read_records, run_batch, validate_caption, BatchControl, BatchError, BatchPaths, BatchStore,
    PipelineConfig, StubFrameSource,
};
use demian_core::clock::VirtualClock;
use demian_core::ingestion::{split_episode, Dataset, EpisodeMeta, PrimitiveSpan, Segment};
use demian_core::vlm::{ClientConfig, MockErrorKind, MockOutcome, MockScript, MockTransport, VlmClient};
use demian_core::AspectKind;

fn segments(n_episodes: usize) -> Vec<Segment> {
    (0..n_episodes)
        .flat_map(|i| {
            split_episode(&EpisodeMeta {
                episode_id: format!("PnPCounterToCabinet_{i:04}"),
                dataset: Dataset::Robocasa365,
                frame_count: 120,
                task_label: "pick the mug from the counter and place it in the cabinet".into(),
                scene_descriptor: "galley kitchen".into(),
                object_list: vec!["mug".into(), "cabinet".into()],
                primitive_spans: vec![
                    PrimitiveSpan {
                        label: "pick-mug".into(),
                        start_frame: 0,
                        end_frame: 60,
                    },
                    PrimitiveSpan {
                        label: "place-mug-in-cabinet".into(),
                        start_frame: 60,
                        end_frame: 120,
                    },
                ],
            })
        })
        .collect()
}

fn client(script: MockScript) -> (VlmClient, Arc<MockTransport>) {
    let clock = Arc::new(VirtualClock::new());
    let transport = Arc::new(MockTransport::new(script, 7).with_clock(clock.clone()));
    let cfg = ClientConfig {
        rate_limit: 1000.0,
        ..ClientConfig::default()
    };
    (VlmClient::new(cfg, transport.clone(), clock).unwrap(), transport)
}

#[test]
fn interrupted_batch_resumes_to_exactly_one_record_per_pair() {
    let segs = segments(100);
    assert_eq!(segs.len(), 200);
    let dir = tempfile::tempdir().unwrap();
    let paths = BatchPaths::beside(&dir.path().join("annotations.jsonl"));
    let cfg = PipelineConfig::default();
    let (vlm, _) = client(MockScript::new());

    let mut store = BatchStore::open(&paths).unwrap();
    let first = run_batch(
        &segs,
        &AspectKind::ALL,
        &vlm,
        &StubFrameSource,
        &cfg,
        &mut store,
        &BatchControl { stop_after: Some(311) },
    )
    .unwrap();
    assert_eq!(first.completed, 311);
    drop(store);

    // A write torn by the crash.
    let mut sink = OpenOptions::new().append(true).open(&paths.sink).unwrap();
    sink.write_all(br#"{"segment_id":"PnPCounterToCabinet_0099#001","aspect":"reas"#)
        .unwrap();
    drop(sink);

    let mut store = BatchStore::open(&paths).unwrap();
    assert_eq!(store.done_count(), 311);
    let second = run_batch(
        &segs,
        &AspectKind::ALL,
        &vlm,
        &StubFrameSource,
        &cfg,
        &mut store,
        &BatchControl::default(),
    )
    .unwrap();
    assert_eq!(second.completed, 800 - 311);
    assert_eq!(second.skipped, 311);
    drop(store);

    let records = read_records(&paths.sink).unwrap();
    assert_eq!(records.len(), 800);
    let unique: HashSet<(String, AspectKind)> = records.iter().map(|r| (r.segment_id.clone(), r.aspect)).collect();
    assert_eq!(unique.len(), 800);
    assert!(records.iter().all(|r| validate_caption(&r.caption, 2)));
    let checkpoint = fs::read_to_string(&paths.checkpoint).unwrap();
    assert_eq!(checkpoint.lines().count(), 800);

    let mut store = BatchStore::open(&paths).unwrap();
    let third = run_batch(
        &segs,
        &AspectKind::ALL,
        &vlm,
        &StubFrameSource,
        &cfg,
        &mut store,
        &BatchControl::default(),
    )
    .unwrap();
    assert_eq!(third.completed, 0);
    assert_eq!(third.skipped, 800);
}

#[test]
fn records_only_in_sink_count_as_done() {
    // Crash after the sink write but before the checkpoint line.
    let segs = segments(2);
    let dir = tempfile::tempdir().unwrap();
    let paths = BatchPaths::beside(&dir.path().join("a.jsonl"));
    let (vlm, transport) = client(MockScript::new());
    let mut store = BatchStore::open(&paths).unwrap();
    run_batch(
        &segs,
        &AspectKind::ALL,
        &vlm,
        &StubFrameSource,
        &PipelineConfig::default(),
        &mut store,
        &BatchControl::default(),
    )
    .unwrap();
    drop(store);
    fs::write(&paths.checkpoint, "").unwrap();
    let calls_before = transport.total_calls();

    let mut store = BatchStore::open(&paths).unwrap();
    let report = run_batch(
        &segs,
        &AspectKind::ALL,
        &vlm,
        &StubFrameSource,
        &PipelineConfig::default(),
        &mut store,
        &BatchControl::default(),
    )
    .unwrap();
    assert_eq!(report.completed, 0);
    assert_eq!(transport.total_calls(), calls_before);
}

#[test]
fn rejected_replies_are_retried_with_a_suffix() {
    let seg = &segments(1)[0];
    let script = MockScript::new().with(
        &seg.segment_id,
        AspectKind::ArmPose,
        MockOutcome::Sequence {
            outcomes: vec![
                MockOutcome::Raw {
                    text: r#"{"aspect":"arm_pose","caption":"It reaches. It grasps. It lifts."}"#.into(),
                },
                MockOutcome::Raw {
                    text: "Here is the caption you asked for.".into(),
                },
                MockOutcome::Caption {
                    caption: "The arm is extended over the counter with the gripper open.".into(),
                },
            ],
        },
    );
    let (vlm, transport) = client(script);
    let out = annotate_segment(
        seg,
        &[AspectKind::ArmPose],
        &vlm,
        &StubFrameSource,
        &PipelineConfig::default(),
    )
    .unwrap();
    assert_eq!(out.records.len(), 1);
    assert!(out.failures.is_empty());
    assert_eq!(transport.calls(&seg.segment_id, AspectKind::ArmPose), 3);
    assert_eq!(out.records[0].input_tokens, 8200);
    assert_eq!(out.records[0].model_id, "Qwen/Qwen3-VL-30B-A3B-Instruct");
}

#[test]
fn persistent_bad_replies_go_to_the_ledger_without_touching_siblings() {
    let seg = &segments(1)[0];
    let script = MockScript::new()
        .with(
            &seg.segment_id,
            AspectKind::Reasoning,
            MockOutcome::Raw {
                text: r#"{"aspect":"reasoning","caption":"One. Two. Three."}"#.into(),
            },
        )
        .with(
            &seg.segment_id,
            AspectKind::SceneComposition,
            MockOutcome::Fail {
                error: MockErrorKind::BadRequest,
                times: None,
            },
        );
    let (vlm, transport) = client(script);
    let out = annotate_segment(
        seg,
        &AspectKind::ALL,
        &vlm,
        &StubFrameSource,
        &PipelineConfig::default(),
    )
    .unwrap();
    assert_eq!(out.records.len(), 2);
    assert_eq!(out.failures.len(), 2);
    // one attempt plus three corrective retries
    assert_eq!(transport.calls(&seg.segment_id, AspectKind::Reasoning), 4);
    // permanent client errors are not retried
    assert_eq!(transport.calls(&seg.segment_id, AspectKind::SceneComposition), 1);
    let kinds: Vec<&str> = out.failures.iter().map(|f| f.error_kind.as_str()).collect();
    assert!(kinds.contains(&"length_violation"));
    assert!(kinds.contains(&"rejected"), "{kinds:?}");
}

#[test]
fn transient_transport_errors_recover() {
    let seg = &segments(1)[0];
    let script = MockScript::new().with(
        &seg.segment_id,
        AspectKind::PhysicalMotion,
        MockOutcome::Fail {
            error: MockErrorKind::ServerError,
            times: Some(2),
        },
    );
    let (vlm, transport) = client(script);
    let out = annotate_segment(
        seg,
        &[AspectKind::PhysicalMotion],
        &vlm,
        &StubFrameSource,
        &PipelineConfig::default(),
    )
    .unwrap();
    assert_eq!(out.records.len(), 1);
    assert_eq!(transport.calls(&seg.segment_id, AspectKind::PhysicalMotion), 3);
}

#[test]
fn failed_pairs_are_retried_on_rerun() {
    let segs = segments(1);
    let dir = tempfile::tempdir().unwrap();
    let paths = BatchPaths::beside(&dir.path().join("a.jsonl"));
    let bad = MockScript::new().with(
        &segs[0].segment_id,
        AspectKind::ArmPose,
        MockOutcome::Fail {
            error: MockErrorKind::RateLimited,
            times: None,
        },
    );
    let (vlm, _) = client(bad);
    let mut store = BatchStore::open(&paths).unwrap();
    let report = run_batch(
        &segs,
        &AspectKind::ALL,
        &vlm,
        &StubFrameSource,
        &PipelineConfig::default(),
        &mut store,
        &BatchControl::default(),
    )
    .unwrap();
    assert_eq!((report.completed, report.failed), (7, 1));
    drop(store);
    let ledger = fs::read_to_string(&paths.failures).unwrap();
    assert!(
        ledger.contains(r#""error_kind":"rate_limited""#) && ledger.contains("4 attempts"),
        "{ledger}"
    );

    let (vlm, _) = client(MockScript::new());
    let mut store = BatchStore::open(&paths).unwrap();
    let report = run_batch(
        &segs,
        &AspectKind::ALL,
        &vlm,
        &StubFrameSource,
        &PipelineConfig::default(),
        &mut store,
        &BatchControl::default(),
    )
    .unwrap();
    assert_eq!((report.completed, report.failed, report.skipped), (1, 0, 7));
}

struct FailAfter {
    writes_left: usize,
}

impl Write for FailAfter {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if self.writes_left == 0 {
            return Err(io::Error::other("disk full"));
        }
        self.writes_left -= 1;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

#[test]
fn sink_failure_aborts_the_batch() {
    let segs = segments(10);
    let (vlm, _) = client(MockScript::new());
    let mut store = BatchStore::from_parts(
        HashSet::new(),
        Box::new(FailAfter { writes_left: 5 }),
        Box::new(io::sink()),
        Box::new(io::sink()),
    );
    let err = run_batch(
        &segs,
        &AspectKind::ALL,
        &vlm,
        &StubFrameSource,
        &PipelineConfig::default(),
        &mut store,
        &BatchControl::default(),
    )
    .unwrap_err();
    assert!(matches!(err, BatchError::SinkWrite(_)));
    assert_eq!(store.done_count(), 5);
}

#[test]
fn empty_aspect_set_is_rejected() {
    let segs = segments(1);
    let (vlm, _) = client(MockScript::new());
    assert!(annotate_segment(&segs[0], &[], &vlm, &StubFrameSource, &PipelineConfig::default()).is_err());
}

#[test]
fn sink_content_does_not_depend_on_worker_count() {
    let segs = segments(12);
    let dir = tempfile::tempdir().unwrap();
    let mut sinks = Vec::new();
    for workers in [1, 4, 4] {
        let paths = BatchPaths::beside(&dir.path().join(format!("w{workers}-{}.jsonl", sinks.len())));
        let (vlm, _) = client(MockScript::new());
        let cfg = PipelineConfig {
            workers,
            fixed_created_at: Some(vlm.clock().utc_now()),
            ..PipelineConfig::default()
        };
        let mut store = BatchStore::open(&paths).unwrap();
        run_batch(
            &segs,
            &AspectKind::ALL,
            &vlm,
            &StubFrameSource,
            &cfg,
            &mut store,
            &BatchControl::default(),
        )
        .unwrap();
        drop(store);
        let mut lines: Vec<String> = fs::read_to_string(&paths.sink)
            .unwrap()
            .lines()
            .map(str::to_string)
            .collect();
        lines.sort();
        sinks.push(lines);
    }
    assert_eq!(sinks[0].len(), 96);
    assert_eq!(sinks[0], sinks[1]);
    assert_eq!(sinks[1], sinks[2]);
}
