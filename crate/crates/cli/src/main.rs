use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use topic_learn::metrics::{f1_per_class, macro_f1};
use topic_learn::Family;
use topic_turn::dataset::{corpus_specs, generate_synthetic_session, load_session, robot_pose, write_session, SESSION_FILE};
use topic_turn::featurize::{
    extract_session, manifest_hash, read_sequences, read_table, write_sequences, write_table, Dataset, ExtractorConfig,
};
use topic_turn::harness::{make_split, render_table, run_experiment, ExperimentConfig, FeatureSet, Pipeline, TaskKind};
use topic_turn::stream::{run_simulated, serve, Classifier, ReplayConfig, StreamConfig, StreamEngine};
use topic_turn::{Error, Result};

#[derive(Parser)]
#[command(name = "topic-turn", version, about = "Topic-change decisions from acoustic and body cues")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML file with [experiment], [extractor], [stream] and [replay] tables.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    feature_set: Option<FeatureSet>,
    #[arg(long, global = true)]
    task: Option<TaskKind>,
    /// dt, rf, svm, mlp, lstm, gru, heuristic or spb.
    #[arg(long, global = true)]
    model: Option<ModelChoice>,
    #[arg(long, global = true)]
    vad_frame_ms: Option<f64>,
    #[arg(long, global = true)]
    vad_hop_ms: Option<f64>,
    #[arg(long, global = true)]
    vad_threshold_db: Option<f64>,
    #[arg(long, global = true)]
    vad_hangover_ms: Option<f64>,
    #[arg(long, global = true)]
    utterance_gap_ms: Option<f64>,
    /// Leave out the energy measured after the utterance end.
    #[arg(long, global = true)]
    no_post_energy: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic sessions.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        utterances: usize,
        #[arg(long, default_value_t = 4)]
        sessions: usize,
        /// Render every utterance with the same signature so labels carry no signal.
        #[arg(long)]
        non_separable: bool,
    },
    /// Extract the feature table from session directories.
    Extract {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        no_sequences: bool,
    },
    /// Print the session split.
    Split {
        #[arg(long)]
        features: PathBuf,
    },
    /// Print the greedy selection trace of every stage.
    SelectFeatures {
        #[arg(long)]
        features: PathBuf,
    },
    /// Tune, evaluate and package a model.
    Train {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Score a packaged model on a feature table.
    Eval {
        #[arg(long)]
        features: PathBuf,
        #[arg(long)]
        pipeline: PathBuf,
    },
    /// Score the threshold heuristics or the speech-and-pause rule.
    Baseline {
        #[arg(long)]
        features: PathBuf,
    },
    /// Replay a session through the live engine.
    Simulate {
        #[arg(long)]
        session: PathBuf,
        #[arg(long)]
        pipeline: Option<PathBuf>,
        /// Write the decision log as JSON lines.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Read framed messages on stdin and write decisions on stdout.
    Stream {
        /// Participant ids in channel order, comma separated.
        #[arg(long, value_delimiter = ',', required = true)]
        participants: Vec<String>,
        #[arg(long, default_value = "live")]
        session_id: String,
        #[arg(long)]
        pipeline: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum ModelChoice {
    Family(Family),
    Heuristic,
    Spb,
}

impl FromStr for ModelChoice {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "heuristic" => Ok(Self::Heuristic),
            "spb" => Ok(Self::Spb),
            other => other.parse().map(Self::Family),
        }
    }
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default)]
struct FileConfig {
    experiment: ExperimentConfig,
    extractor: ExtractorConfig,
    stream: StreamConfig,
    replay: ReplayConfig,
}

impl Common {
    fn load(&self) -> Result<FileConfig> {
        let mut cfg = match &self.config {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
                toml::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", p.display())))?
            }
            None => FileConfig::default(),
        };
        let x = &mut cfg.experiment;
        if let Some(s) = self.seed {
            x.seed = s;
        }
        if let Some(f) = self.feature_set {
            x.feature_set = f;
        }
        if let Some(t) = self.task {
            x.task = t;
        }
        if self.no_post_energy {
            x.post_energy = false;
        }
        match self.model {
            Some(ModelChoice::Family(f)) => {
                x.families = vec![f];
                x.deploy = Some(f);
            }
            Some(_) => {
                x.families.clear();
                x.baselines = true;
            }
            None => {}
        }
        let v = &mut cfg.extractor.vad;
        let set = |slot: &mut f64, val: Option<f64>| {
            if let Some(val) = val {
                *slot = val;
            }
        };
        set(&mut v.frame_ms, self.vad_frame_ms);
        set(&mut v.hop_ms, self.vad_hop_ms);
        set(&mut v.threshold_db, self.vad_threshold_db);
        set(&mut v.hangover_ms, self.vad_hangover_ms);
        set(&mut v.utterance_gap_ms, self.utterance_gap_ms);
        cfg.extractor.validate()?;
        cfg.stream.extractor = cfg.extractor;
        Ok(cfg)
    }
}

fn sequences_path(table: &Path) -> PathBuf {
    let mut s = table.as_os_str().to_owned();
    s.push(".sequences.jsonl");
    PathBuf::from(s)
}

fn load_features(path: &Path) -> Result<Dataset> {
    let mut ds = read_table(path)?;
    let seq = sequences_path(path);
    if seq.exists() {
        let n = read_sequences(&seq, &mut ds)?;
        log::info!("attached {n} sequences from {}", seq.display());
    }
    Ok(ds)
}

fn session_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(SESSION_FILE).exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = std::fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(SESSION_FILE).exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::MissingFile(root.join(SESSION_FILE)));
    }
    Ok(dirs)
}

/// Writes to stdout; a closed pipe downstream is not an error.
fn emit(text: &str) -> Result<()> {
    let mut out = std::io::stdout().lock();
    match out.write_all(text.as_bytes()).and_then(|_| out.flush()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Error::io("<stdout>", e)),
        _ => Ok(()),
    }
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Protocol(e.to_string()))?;
    emit(&format!("{text}\n"))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Protocol(e.to_string()))?;
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn classifier(pipeline: Option<&Path>, cfg: &FileConfig) -> Result<Classifier> {
    match pipeline {
        Some(p) => Ok(Classifier::Model(Box::new(Pipeline::load(p)?))),
        None => Ok(Classifier::Spb(cfg.experiment.spb)),
    }
}

#[derive(Serialize)]
struct PipelineScore {
    family: String,
    n: usize,
    adapted_participants: usize,
    per_class_f1: Vec<f64>,
    macro_f1: f64,
}

fn run(cli: Cli) -> Result<()> {
    let cfg = cli.common.load()?;
    match cli.command {
        Command::Synth {
            out,
            utterances,
            sessions,
            non_separable,
        } => {
            for (i, spec) in corpus_specs(utterances, sessions, !non_separable).iter().enumerate() {
                let (s, r) = generate_synthetic_session(spec, cfg.experiment.seed + i as u64)?;
                write_session(&out.join(&spec.session_id), &s, &r)?;
                log::info!("{}: {} records, {:.0} s", spec.session_id, r.len(), s.duration());
            }
        }
        Command::Extract { data, out, no_sequences } => {
            let mut examples = Vec::new();
            for dir in session_dirs(&data)? {
                let (s, r) = load_session(&dir)?;
                let ex = extract_session(&s, &r, &cfg.extractor, !no_sequences)?;
                log::info!("{}: {} examples", s.session_id, ex.len());
                examples.extend(ex);
            }
            let ds = Dataset {
                manifest_hash: manifest_hash(&cfg.extractor),
                examples,
            };
            write_table(&out, &ds)?;
            if !no_sequences {
                write_sequences(&sequences_path(&out), &ds)?;
            }
            emit(&format!("{} examples -> {}\n", ds.examples.len(), out.display()))?;
        }
        Command::Split { features } => {
            let ds = load_features(&features)?;
            let meta: Vec<_> = ds
                .examples
                .iter()
                .filter(|e| cfg.experiment.sessions.admits(e.meta.group_size))
                .map(|e| e.meta.clone())
                .collect();
            print_json(&make_split(&meta, cfg.experiment.seed)?)?;
        }
        Command::SelectFeatures { features } => {
            let ds = load_features(&features)?;
            let x = ExperimentConfig {
                families: Vec::new(),
                baselines: true,
                ..cfg.experiment
            };
            let res = run_experiment(&ds, &x)?;
            let traces: Vec<_> = res
                .stages
                .iter()
                .map(|s| {
                    serde_json::json!({
                        "task": s.task,
                        "chosen": s.selection.chosen,
                        "names": s.selected_names,
                        "scores": s.selection.scores,
                    })
                })
                .collect();
            print_json(&traces)?;
        }
        Command::Train { features, out } => {
            let ds = load_features(&features)?;
            let res = run_experiment(&ds, &cfg.experiment)?;
            std::fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
            if let Some(p) = &res.pipeline {
                p.save(&out.join("pipeline"))?;
            }
            write_json(&out.join("result.json"), &res)?;
            emit(&render_table(&res.reports))?;
        }
        Command::Eval { features, pipeline } => {
            let ds = load_features(&features)?;
            let mut pipe = Pipeline::load(&pipeline)?;
            if pipe.manifest_hash != ds.manifest_hash {
                return Err(Error::Learn(topic_learn::LearnError::ManifestMismatch {
                    model: pipe.manifest_hash.clone(),
                    input: ds.manifest_hash.clone(),
                }));
            }
            let adapted = pipe.adapt_unseen(&ds.examples)?;
            let mut truth = Vec::new();
            let mut pred = Vec::new();
            for e in &ds.examples {
                let (label, _) = pipe.predict(&e.meta.participant_key(), &e.vector, e.sequence.as_ref())?;
                truth.push(e.meta.label.index());
                pred.push(label.index());
            }
            if truth.is_empty() {
                return Err(Error::Empty("examples to evaluate"));
            }
            print_json(&PipelineScore {
                family: pipe.family.name().to_string(),
                n: truth.len(),
                adapted_participants: adapted,
                per_class_f1: f1_per_class(&truth, &pred, 3),
                macro_f1: macro_f1(&truth, &pred, 3),
            })?;
        }
        Command::Baseline { features } => {
            let ds = load_features(&features)?;
            let x = ExperimentConfig {
                families: Vec::new(),
                baselines: true,
                ..cfg.experiment
            };
            let res = run_experiment(&ds, &x)?;
            let wanted = match cli.common.model {
                Some(ModelChoice::Spb) => vec!["spb"],
                Some(ModelChoice::Heuristic) => vec!["heuristic"],
                _ => vec!["heuristic", "spb"],
            };
            let reports: Vec<_> = res.reports.into_iter().filter(|r| wanted.contains(&r.method.as_str())).collect();
            if wanted.contains(&"heuristic") {
                let heuristics: Vec<_> = res.stages.iter().map(|s| (s.task, &s.heuristics)).collect();
                print_json(&heuristics)?;
            }
            emit(&render_table(&reports))?;
        }
        Command::Simulate { session, pipeline, log } => {
            let (s, records) = load_session(&session)?;
            let r = run_simulated(&s, &records, classifier(pipeline.as_deref(), &cfg)?, cfg.stream, &cfg.replay)?;
            if let Some(path) = log {
                let f = std::fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
                let mut w = BufWriter::new(f);
                for d in &r.decisions {
                    let line = serde_json::to_string(d).map_err(|e| Error::Protocol(e.to_string()))?;
                    writeln!(w, "{line}").map_err(|e| Error::io(&path, e))?;
                }
                w.flush().map_err(|e| Error::io(&path, e))?;
            }
            print_json(&serde_json::json!({
                "decisions": r.decisions.len(),
                "counters": r.counters,
                "agreement": r.agreement,
                "safety_violations": r.safety_violations,
                "max_delay": r.max_delay,
                "max_buffered": r.max_buffered,
            }))?;
        }
        Command::Stream {
            participants,
            session_id,
            pipeline,
        } => {
            let mut engine = StreamEngine::new(&session_id, &participants, robot_pose(), classifier(pipeline.as_deref(), &cfg)?, cfg.stream)?;
            let stdin = std::io::stdin();
            let stdout = std::io::stdout();
            let counters = serve(&mut engine, &mut stdin.lock(), &mut stdout.lock())?;
            log::info!("stream closed: {counters:?}");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn model_choice_parses_families_and_baselines() {
        assert_eq!("rf".parse::<ModelChoice>().unwrap(), ModelChoice::Family(Family::Rf));
        assert_eq!("SPB".parse::<ModelChoice>().unwrap(), ModelChoice::Spb);
        assert_eq!("heuristic".parse::<ModelChoice>().unwrap(), ModelChoice::Heuristic);
        assert!("knn".parse::<ModelChoice>().is_err());
    }

    #[test]
    fn flags_override_the_file() {
        let cli = Cli::parse_from(["topic-turn", "--seed", "7", "--model", "gru", "--utterance-gap-ms", "600", "split", "--features", "x.csv"]);
        let cfg = cli.common.load().unwrap();
        assert_eq!(cfg.experiment.seed, 7);
        assert_eq!(cfg.experiment.families, vec![Family::Gru]);
        assert_eq!(cfg.stream.extractor.vad.utterance_gap_ms, 600.0);
    }
}
