//! Subcommand implementations.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use demian_core::accounting::{summarize, CostModel};
use demian_core::aggregation::{macro_avg, oracle_row, summarize_families, FamilySpec, ResultsMatrix};
use demian_core::annotation::{
    read_records, run_batch, BatchControl, BatchPaths, BatchStore, PipelineConfig, StubFrameSource,
};
use demian_core::clock::{Clock, SystemClock, VirtualClock};
use demian_core::composite::{
    aggregate_composite, constructed_suite, run_suite, CompositeConfig, CompositeSuite, RateTargets,
};
use demian_core::ingestion::{load_corpus, OnRecordError};
use demian_core::instructor::{
    build_reward_table, read_episodes, sample_sft_dataset, CaptionIndex, RewardTable, SamplingParams,
};
use demian_core::rollout::{
    run_episodes, summarize_traces, FixedInstructor, InstructorStub, RolloutConfig, ScriptedPolicy,
};
use demian_core::vlm::{fallback_caption, HttpTransport, MockScript, MockTransport, Transport, VlmClient};
use demian_core::AspectKind;

use crate::config::GlobalConfig;
use crate::{AggregateArgs, AnnotateArgs, CliError, CompositeArgs, CostArgs, SftGenArgs, SimulateArgs};

fn required(flag: Option<PathBuf>, fallback: &Option<PathBuf>, name: &str) -> Result<PathBuf, CliError> {
    flag.or_else(|| fallback.clone()).ok_or_else(|| {
        CliError::Validation(format!(
            "--{name} is required (or set paths.{} in the config)",
            name.replace('-', "_")
        ))
    })
}

fn output(path: Option<&Path>) -> Result<Box<dyn Write>, CliError> {
    Ok(match path {
        Some(p) => {
            Box::new(BufWriter::new(File::create(p).map_err(|e| {
                CliError::Runtime(format!("cannot create {}: {e}", p.display()))
            })?))
        }
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn open(path: &Path) -> Result<BufReader<File>, CliError> {
    File::open(path)
        .map(BufReader::new)
        .map_err(|e| CliError::Validation(format!("cannot open {}: {e}", path.display())))
}

/// Instructor used when no model is attached: a deterministic caption keyed
/// on the prompt.
struct MockInstructor {
    seed: u64,
}

impl InstructorStub for MockInstructor {
    fn instruct(&mut self, task_prompt: &str) -> String {
        fallback_caption(self.seed, task_prompt, AspectKind::PhysicalMotion)
    }
}

pub fn annotate(cfg: &GlobalConfig, a: AnnotateArgs) -> Result<(), CliError> {
    let corpus_path = required(a.corpus, &cfg.paths.corpus, "corpus")?;
    let out = required(a.out, &cfg.paths.annotations, "out")?;
    let aspects = AspectKind::parse_list(&a.aspects).map_err(CliError::invalid)?;
    if aspects.is_empty() {
        return Err(CliError::invalid("--aspects selects no aspect"));
    }
    let on_error = if a.strict {
        OnRecordError::Abort
    } else {
        OnRecordError::Skip
    };
    let corpus = load_corpus(&corpus_path, a.dataset, on_error).map_err(CliError::invalid)?;
    for rejected in &corpus.rejected {
        log::warn!("skipped metadata record: {rejected}");
    }
    let segments = corpus.segments();
    log::info!(
        "{} episodes, {} segments, {} aspects, {} workers",
        corpus.episodes.len(),
        segments.len(),
        aspects.len(),
        cfg.workers
    );

    let mut client_cfg = cfg.client.clone();
    let mut fixed_created_at = None;
    let (transport, clock): (Arc<dyn Transport>, Arc<dyn Clock>) = if a.mock {
        let script = match &a.mock_script {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| CliError::Validation(format!("cannot read {}: {e}", p.display())))?;
                MockScript::from_json(&text).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?
            }
            None => MockScript::new(),
        };
        let clock = Arc::new(VirtualClock::new());
        fixed_created_at = Some(clock.utc_now());
        let transport = MockTransport::new(script, cfg.seed).with_clock(clock.clone());
        (Arc::new(transport), clock)
    } else if let Some(endpoint) = a.endpoint {
        client_cfg.endpoint_url = endpoint;
        let transport = HttpTransport::from_env(&client_cfg.endpoint_url).map_err(CliError::invalid)?;
        (Arc::new(transport), Arc::new(SystemClock::new()))
    } else {
        return Err(CliError::invalid("one of --mock or --endpoint is required"));
    };
    let client = VlmClient::new(client_cfg, transport, clock).map_err(CliError::invalid)?;

    let pipeline = PipelineConfig {
        workers: cfg.workers,
        fixed_created_at,
        ..PipelineConfig::default()
    };
    let paths = BatchPaths::beside(&out);
    let mut store = BatchStore::open(&paths).map_err(CliError::runtime)?;
    if store.done_count() > 0 {
        log::info!("resuming: {} pairs already done", store.done_count());
    }
    let report = run_batch(
        &segments,
        &aspects,
        &client,
        &StubFrameSource,
        &pipeline,
        &mut store,
        &BatchControl::default(),
    )
    .map_err(CliError::runtime)?;
    log::info!(
        "completed {}, failed {}, skipped {}; failures in {}",
        report.completed,
        report.failed,
        report.skipped,
        paths.failures.display()
    );
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    Ok(())
}

fn load_reward_table(path: &Path) -> Result<RewardTable, CliError> {
    let err = |e: String| CliError::Validation(format!("{}: {e}", path.display()));
    if path.extension().is_some_and(|x| x.eq_ignore_ascii_case("csv")) {
        let m = ResultsMatrix::read_csv(path).map_err(|e| err(e.to_string()))?;
        build_reward_table(&m).map_err(|e| err(e.to_string()))
    } else {
        RewardTable::load(path).map_err(|e| err(e.to_string()))
    }
}

pub fn sft_gen(cfg: &GlobalConfig, a: SftGenArgs) -> Result<(), CliError> {
    let rt = load_reward_table(&required(a.reward_table, &cfg.paths.reward_table, "reward-table")?)?;
    let annotations_path = required(a.annotations, &cfg.paths.annotations, "annotations")?;
    let records = read_records(&annotations_path).map_err(CliError::invalid)?;
    let episodes_path = required(a.episodes, &cfg.paths.episodes, "episodes")?;
    let episodes = read_episodes(open(&episodes_path)?)
        .map_err(|e| CliError::Validation(format!("{}: {e}", episodes_path.display())))?;
    let params = SamplingParams {
        seed: cfg.seed,
        n_examples: a.n.unwrap_or(cfg.sampling.n_examples),
        strategy: a.strategy,
        temperature: a.temperature.unwrap_or(cfg.sampling.temperature),
        top_k: a.top_k.unwrap_or(cfg.sampling.top_k),
    };
    log::info!(
        "{} tasks, {} records, {} episodes, drawing {} examples",
        rt.tasks().len(),
        records.len(),
        episodes.len(),
        params.n_examples
    );
    let dataset =
        sample_sft_dataset(&rt, &CaptionIndex::new(&records), &episodes, &params).map_err(CliError::invalid)?;
    let abstained = dataset.examples.iter().filter(|e| e.target_aspect.is_none()).count();
    log::info!(
        "{} examples ({abstained} abstentions), {} skipped for missing captions",
        dataset.examples.len(),
        dataset.skipped.len()
    );
    for s in dataset.skipped.iter().take(5) {
        log::warn!(
            "no {} caption for episode {} (example {})",
            s.aspect,
            s.episode_id,
            s.index
        );
    }
    let out = a.out.or_else(|| cfg.paths.out.clone());
    let mut w = output(out.as_deref())?;
    dataset.write_jsonl(&mut w).map_err(CliError::runtime)?;
    w.flush().map_err(CliError::runtime)
}

pub fn simulate(cfg: &GlobalConfig, a: SimulateArgs) -> Result<(), CliError> {
    let rc = RolloutConfig {
        chunk_horizon: a.chunk.unwrap_or(cfg.rollout.chunk_horizon),
        step_duration: a.dt.unwrap_or(cfg.rollout.step_duration),
        max_steps: a.steps.unwrap_or(cfg.rollout.max_steps),
        mode: a.mode,
        latency: a.latency,
        rng_seed: cfg.seed,
    };
    rc.validate().map_err(CliError::invalid)?;
    let episodes = a.episodes.unwrap_or(cfg.rollout.episodes);
    if episodes == 0 {
        return Err(CliError::invalid("--episodes must be at least 1"));
    }
    let annotation = fallback_caption(cfg.seed, &a.task, AspectKind::PhysicalMotion);
    let traces = run_episodes(
        &rc,
        episodes,
        &a.task,
        |_| ScriptedPolicy {
            success_at: a.success_at,
        },
        |_| FixedInstructor(annotation.clone()),
    )
    .map_err(CliError::runtime)?;
    let summary = summarize_traces(&traces).map_err(CliError::runtime)?;
    log::info!(
        "{} episodes in {} mode, {} never injected",
        summary.traces,
        rc.mode,
        summary.never_injected
    );
    if let Some(path) = &a.trace {
        let mut w = output(Some(path))?;
        for (episode, t) in traces.iter().enumerate() {
            for event in &t.events {
                let mut v = serde_json::to_value(event).expect("event serializes");
                v["episode"] = episode.into();
                writeln!(w, "{v}").map_err(CliError::runtime)?;
            }
        }
        w.flush().map_err(CliError::runtime)?;
    }
    let line = serde_json::json!({
        "mode": rc.mode.to_string(),
        "latency": rc.latency.to_string(),
        "chunk_horizon": rc.chunk_horizon,
        "step_duration": rc.step_duration,
        "max_steps": rc.max_steps,
        "seed": rc.rng_seed,
        "summary": summary,
    });
    println!("{line}");
    Ok(())
}

pub fn composite(cfg: &GlobalConfig, a: CompositeArgs) -> Result<(), CliError> {
    let suite = match a.suite.or_else(|| cfg.paths.suite.clone()) {
        Some(p) => CompositeSuite::load(&p).map_err(|e| CliError::Validation(format!("{}: {e}", p.display())))?,
        None => {
            log::info!("no --suite given, using the bundled constructed suite");
            constructed_suite(
                5,
                20,
                RateTargets {
                    phase1: 65,
                    phase2: 31,
                    full: 22,
                },
                RateTargets {
                    phase1: 50,
                    phase2: 28,
                    full: 13,
                },
            )
        }
    };
    let cc = CompositeConfig {
        done_threshold: a.threshold.unwrap_or(cfg.composite.done_threshold),
        max_steps: a.max_steps.unwrap_or(cfg.composite.max_steps),
        chunk_horizon: cfg.rollout.chunk_horizon,
    };
    cc.validate().map_err(CliError::invalid)?;
    let episodes = a.episodes.unwrap_or(cfg.composite.episodes);
    if episodes == 0 || a.mode.is_empty() {
        return Err(CliError::invalid("need at least one episode and one mode"));
    }
    let seed = cfg.seed;
    let results = run_suite(&suite, &a.mode, &cc, episodes, seed, &mut || {
        Box::new(MockInstructor { seed })
    })
    .map_err(CliError::runtime)?;
    let rows = aggregate_composite(&results).map_err(CliError::runtime)?;
    if let Some(path) = &a.results {
        let mut w = output(Some(path))?;
        for r in &results {
            serde_json::to_writer(&mut w, r).map_err(CliError::runtime)?;
            w.write_all(b"\n").map_err(CliError::runtime)?;
        }
        w.flush().map_err(CliError::runtime)?;
    }
    let mut w = output(None)?;
    writeln!(w, "mode,tasks,phase1_sr,phase2_sr,full_sr").map_err(CliError::runtime)?;
    for r in &rows {
        log::info!(
            "{}: phase 1 {:.0}%, phase 2 {:.0}%, full {:.0}%",
            r.mode,
            r.phase1_sr * 100.0,
            r.phase2_sr * 100.0,
            r.full_sr * 100.0
        );
        writeln!(
            w,
            "{},{},{:.4},{:.4},{:.4}",
            r.mode, r.tasks, r.phase1_sr, r.phase2_sr, r.full_sr
        )
        .map_err(CliError::runtime)?;
    }
    w.flush().map_err(CliError::runtime)
}

pub fn cost(a: CostArgs) -> Result<(), CliError> {
    let d = CostModel::default();
    let cm = CostModel {
        active_params: a.params.unwrap_or(d.active_params),
        input_tokens: a.input_tokens.unwrap_or(d.input_tokens),
        output_tokens: a.output_tokens.unwrap_or(d.output_tokens),
        price_in: a.price_in.unwrap_or(d.price_in),
        price_out: a.price_out.unwrap_or(d.price_out),
    };
    cm.validate().map_err(CliError::invalid)?;
    let s = summarize(&cm, a.clips, a.aspects);
    if a.json {
        println!("{}", serde_json::to_string(&s).expect("summary serializes"));
    } else {
        println!("clips             {}", a.clips);
        println!("aspects           {}", a.aspects);
        println!("flops_per_call    {:.2e}", s.flops_per_call);
        println!("corpus_flops      {:.1e}", s.corpus_flops);
        println!("dollars_per_call  ${:.6}", s.dollars_per_call);
        println!("corpus_dollars    ${:.2}", s.corpus_dollars);
    }
    Ok(())
}

pub fn aggregate(a: AggregateArgs) -> Result<(), CliError> {
    let mut m =
        ResultsMatrix::read_csv(&a.matrix).map_err(|e| CliError::Validation(format!("{}: {e}", a.matrix.display())))?;
    if !a.columns.is_empty() {
        let cols: Vec<&str> = a.columns.iter().map(String::as_str).collect();
        m = m.select_columns(&cols).map_err(CliError::invalid)?;
    }
    if !a.oracle_over.is_empty() {
        let over: Vec<&str> = a.oracle_over.iter().map(String::as_str).collect();
        let oracle = oracle_row(&m, &over).map_err(CliError::invalid)?;
        let keep: Vec<String> = m.rows().iter().filter(|r| *r != "oracle").cloned().collect();
        let keep: Vec<&str> = keep.iter().map(String::as_str).collect();
        m = m.select_rows(&keep).map_err(CliError::invalid)?;
        m.push_dense_row("oracle", &oracle).map_err(CliError::invalid)?;
    }
    if let Some(path) = &a.families {
        let spec = FamilySpec::load(path).map_err(|e| CliError::Validation(format!("{}: {e}", path.display())))?;
        m = summarize_families(&m, &spec).map_err(CliError::invalid)?;
    }
    if let Some(name) = &a.avg {
        let mut columns = m.columns().to_vec();
        columns.push(name.clone());
        let mut with_avg = ResultsMatrix::new(columns).map_err(CliError::invalid)?;
        with_avg.meta = m.meta.clone();
        for row in m.rows() {
            let mut values = m.dense_row(row).map_err(CliError::invalid)?;
            values.push(macro_avg(&values).map_err(CliError::invalid)?);
            with_avg
                .push_dense_row(row.clone(), &values)
                .map_err(CliError::invalid)?;
        }
        m = with_avg;
    }
    let mut w = output(a.out.as_deref())?;
    m.write_csv(&mut w, a.display).map_err(CliError::runtime)?;
    w.flush().map_err(CliError::runtime)
}
