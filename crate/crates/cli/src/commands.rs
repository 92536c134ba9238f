use crate::output::{self, PlotData, RunOutput};
use crate::Command;
use aan_core::baselines::{baseline_direct_force_run, baseline_vic_run, BaselineMethod, BaselineRun};
use aan_core::policy::{
    aggregate, run_iteration, run_iteration_with_vias, summarize_episode, CorrectionSource, IterationMetrics,
    IterationRecord, SkillRecord, TherapySession,
};
use aan_core::scenario::Scenario;
use aan_core::simdyn::{EpisodeLog, PatientModel};
use aan_core::skill::{reproduce_skill, train_skill, SkillDataset, SkillModel};
use aan_core::task::Task;
use aan_core::trajectory::ForceEvent;
use anyhow::{bail, Context, Result};
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

pub fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Run { scenario, seed, out, episodes } => {
            let sc = load(&scenario, seed)?;
            let run = policy_run(&sc)?;
            run.output(&sc, episodes).write(&out)?;
            print!("{}", output::metrics_csv(run.session.log.iter().map(|r| (r.iteration, &r.metrics))));
        }
        Command::Baseline { method, scenario, seed, out, episodes } => {
            let sc = load(&scenario, seed)?;
            let (task, patient) = build(&sc)?;
            let run = baseline(&sc, method, &task, &patient)?;
            let mut plot = PlotData::new(&sc, method_name(method), &task);
            let last = run.log.last().expect("at least one iteration");
            plot.push(last, None, &run.episodes, &[])?;
            let groups = [(last.iteration, run.episodes.clone())];
            RunOutput {
                scenario: &sc,
                log_jsonl: run.log_jsonl(),
                log: &run.log,
                plot: &plot,
                skill_records: None,
                episodes: episodes.then_some(&groups[..]),
            }
            .write(&out)?;
            print!("{}", output::metrics_csv(run.log.iter().map(|r| (r.iteration, &r.metrics))));
        }
        Command::Compare { scenario, seed, iterations, out } => {
            let sc = load(&scenario, seed)?;
            let table = compare(&sc, iterations)?;
            if let Some(path) = out {
                fs::write(&path, &table).with_context(|| format!("writing {}", path.display()))?;
            }
            print!("{table}");
        }
        Command::SkillTrain { runs, out, latent } => {
            let model = skill_train(&runs, latent)?;
            fs::write(&out, model.to_json()? + "\n").with_context(|| format!("writing {}", out.display()))?;
            log::info!("trained on {} runs, {} latent components", runs.len(), model.regression.latent_count);
        }
        Command::SkillApply { model, scenario, seed, out, episodes } => {
            let text = fs::read_to_string(&model).with_context(|| format!("reading {}", model.display()))?;
            let model: SkillModel = serde_json::from_str(&text).with_context(|| format!("parsing {}", model.display()))?;
            let sc = load(&scenario, seed)?;
            let run = skill_run(&sc, &model)?;
            run.output(&sc, episodes).write(&out)?;
            print!("{}", output::metrics_csv(run.session.log.iter().map(|r| (r.iteration, &r.metrics))));
        }
        Command::Metrics { run } => print!("{}", recompute_metrics(&run)?),
        Command::Serve { scenario, port, seed } => {
            let sc = load(&scenario, seed)?;
            let addr = std::net::SocketAddr::from(([127, 0, 0, 1], port));
            eprintln!("serving {} on http://{addr}", sc.name);
            tokio::runtime::Runtime::new()?.block_on(aan_service::serve(sc, addr))?;
        }
        Command::Validate { scenario } => {
            let sc = load(&scenario, None)?;
            println!("{}", serde_json::json!({ "valid": true, "name": sc.name, "schema_version": sc.schema_version }));
        }
    }
    Ok(())
}

fn load(path: &Path, seed: Option<u64>) -> Result<Scenario> {
    let sc = Scenario::load(path)?;
    Ok(match seed {
        Some(s) => sc.with_seed(s),
        None => sc,
    })
}

fn build(sc: &Scenario) -> Result<(Task, PatientModel)> {
    let task = sc.build_task()?;
    let patient = sc.build_patient(&task);
    Ok((task, patient))
}

fn method_name(m: BaselineMethod) -> &'static str {
    match m {
        BaselineMethod::Vic => "vic",
        BaselineMethod::Direct => "direct",
    }
}

/// A finished policy session plus everything only seen while it ran.
struct PolicyRun {
    method: &'static str,
    task: Task,
    session: TherapySession,
    episodes: Vec<(usize, Vec<EpisodeLog>)>,
    events: Vec<Vec<ForceEvent>>,
}

impl PolicyRun {
    fn start(sc: &Scenario, method: &'static str) -> Result<(Self, PatientModel)> {
        let (task, patient) = build(sc)?;
        let session = TherapySession::bootstrap(&sc.session_config(), &task, &patient)?;
        let episodes = vec![(0, session.episodes.clone())];
        Ok((Self { method, task, session, episodes, events: vec![vec![]] }, patient))
    }

    fn record(&mut self, next: TherapySession, events: Vec<ForceEvent>) {
        log::info!(
            "iteration {}: {} events, rms {:.4} m",
            next.iteration,
            events.len(),
            next.log.last().map_or(f64::NAN, |r| r.metrics.track_rms)
        );
        self.episodes.push((next.iteration, next.episodes.clone()));
        self.events.push(events);
        self.session = next;
    }

    fn output<'a>(&'a self, sc: &'a Scenario, with_episodes: bool) -> RunOutputOwned<'a> {
        RunOutputOwned { run: self, sc, with_episodes }
    }

    fn plot(&self, sc: &Scenario) -> Result<PlotData> {
        let mut plot = PlotData::new(sc, self.method, &self.task);
        for ((record, (_, episodes)), events) in self.session.log.iter().zip(&self.episodes).zip(&self.events) {
            plot.push(record, record.preference.as_ref(), episodes, events)?;
        }
        Ok(plot)
    }
}

struct RunOutputOwned<'a> {
    run: &'a PolicyRun,
    sc: &'a Scenario,
    with_episodes: bool,
}

impl RunOutputOwned<'_> {
    fn write(&self, dir: &Path) -> Result<()> {
        let plot = self.run.plot(self.sc)?;
        RunOutput {
            scenario: self.sc,
            log_jsonl: self.run.session.log_jsonl(),
            log: &self.run.session.log,
            plot: &plot,
            skill_records: Some(&self.run.session.skill_records),
            episodes: self.with_episodes.then_some(&self.run.episodes[..]),
        }
        .write(dir)
    }
}

fn policy_run(sc: &Scenario) -> Result<PolicyRun> {
    let (mut run, patient) = PolicyRun::start(sc, "proposed")?;
    let mut therapist = sc.therapist.clone();
    while !run.session.done() {
        let events = therapist.events(&run.session)?;
        let next = run_iteration(&run.session, &events, &patient)?;
        run.record(next, events);
    }
    Ok(run)
}

fn skill_run(sc: &Scenario, model: &SkillModel) -> Result<PolicyRun> {
    let (mut run, patient) = PolicyRun::start(sc, "skill")?;
    while !run.session.done() {
        let vias = reproduce_skill(model, &run.session)?;
        let next = run_iteration_with_vias(&run.session, vias, &patient)?;
        run.record(next, vec![]);
    }
    Ok(run)
}

fn baseline(sc: &Scenario, method: BaselineMethod, task: &Task, patient: &PatientModel) -> Result<BaselineRun> {
    let cfg = sc.session_config();
    Ok(match method {
        BaselineMethod::Vic => baseline_vic_run(&cfg, &sc.baseline, task, patient, cfg.iterations)?,
        BaselineMethod::Direct => baseline_direct_force_run(&cfg, task, patient, &sc.therapist, cfg.iterations)?,
    })
}

/// `method,iteration,M1,M2,track_rms` for iterations 1..=N of all three
/// methods, run concurrently on the same scenario and seed.
fn compare(sc: &Scenario, iterations: Option<usize>) -> Result<String> {
    let mut sc = sc.clone();
    if let Some(n) = iterations {
        if n == 0 {
            bail!("--iterations must be at least 1");
        }
        sc.session.iterations = n;
    }
    let (task, patient) = build(&sc)?;
    let (proposed, vic, direct) = std::thread::scope(|s| {
        let p = s.spawn(|| policy_run(&sc));
        let v = s.spawn(|| baseline(&sc, BaselineMethod::Vic, &task, &patient));
        let d = s.spawn(|| baseline(&sc, BaselineMethod::Direct, &task, &patient));
        (p.join().expect("proposed run"), v.join().expect("vic run"), d.join().expect("direct run"))
    });
    let rows = |log: &[IterationRecord]| -> Vec<(usize, IterationMetrics)> {
        log.iter().filter(|r| r.iteration >= 1).map(|r| (r.iteration, r.metrics)).collect()
    };
    let mut out = String::from("method,iteration,M1,M2,track_rms\n");
    for (name, table) in [("proposed", rows(&proposed?.session.log)), ("vic", rows(&vic?.log)), ("direct", rows(&direct?.log))] {
        for (i, m) in table {
            let _ = writeln!(out, "{name},{i},{},{},{}", m.m1, m.m2, m.track_rms);
        }
    }
    Ok(out)
}

fn skill_train(runs: &[PathBuf], latent: Option<usize>) -> Result<SkillModel> {
    let first = Scenario::load(&runs[0].join(output::SCENARIO_FILE))?;
    let mut data: Option<SkillDataset> = None;
    for dir in runs {
        let path = dir.join(output::SKILL_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        let records: Vec<SkillRecord> = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        for r in &records {
            let data = data.get_or_insert_with(|| {
                let dim = r.slot_reference.first().map_or(0, |p| p.len());
                SkillDataset::new(first.skill.encoding, r.slot_times.clone(), dim)
            });
            data.push(r).with_context(|| format!("adding {}", path.display()))?;
        }
    }
    let Some(data) = data else { bail!("no skill records in the given runs") };
    Ok(train_skill(&data, latent.unwrap_or(first.skill.latent_count))?)
}

/// Metrics from raw episode CSVs when the run kept them, otherwise re-aggregated
/// from the per-episode summaries in the session log.
fn recompute_metrics(dir: &Path) -> Result<String> {
    let episode_dir = dir.join(output::EPISODE_DIR);
    let mut per_iteration: BTreeMap<usize, IterationMetrics> = BTreeMap::new();
    if episode_dir.is_dir() {
        let sc = Scenario::load(&dir.join(output::SCENARIO_FILE))?;
        let task = sc.build_task()?;
        let mut groups: BTreeMap<usize, Vec<PathBuf>> = BTreeMap::new();
        for entry in fs::read_dir(&episode_dir)? {
            let path = entry?.path();
            let name = path.file_name().and_then(|n| n.to_str()).unwrap_or_default();
            let Some(iteration) = name.strip_prefix("iter").and_then(|r| r.split('_').next()).and_then(|n| n.parse().ok())
            else {
                continue;
            };
            groups.entry(iteration).or_default().push(path);
        }
        for (iteration, mut paths) in groups {
            paths.sort();
            let summaries = paths
                .iter()
                .map(|p| {
                    let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                    Ok(summarize_episode(&EpisodeLog::from_csv(&text)?, &task)?)
                })
                .collect::<Result<Vec<_>>>()?;
            per_iteration.insert(iteration, aggregate(&summaries));
        }
    } else {
        let path = dir.join(output::SESSION_FILE);
        let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
        for (n, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let record: IterationRecord =
                serde_json::from_str(line).with_context(|| format!("{}:{}", path.display(), n + 1))?;
            per_iteration.insert(record.iteration, aggregate(&record.episodes));
        }
    }
    Ok(output::metrics_csv(per_iteration.iter().map(|(i, m)| (*i, m))))
}
