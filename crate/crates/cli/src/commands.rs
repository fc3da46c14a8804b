use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anomize::dataio::synth::{generate_synthetic_benchmark, SynthSpec};
use anomize::dataio::{load_checkpoint, load_manifest, read_feature_file, save_checkpoint, write_atomic, Cursor, Dataset};
use anomize::metrics::{evaluate, records_to_csv, EvalReport};
use anomize::model::{AnomizeModel, Phase, TextInputs};
use anomize::tensor::Tensor;
use anomize::textbank::{
    build_concept_library, build_text_assets, default_concept_count, encode_descriptions, text_id,
    write_embedding_file, ConceptLibrary, DescriptionSet, EmbeddingProvider, FixtureStore, HttpTransport, LabelSpace,
    Layered, LlmTransport,
};
use anomize::training::{
    categorization_accuracy, run_joint, run_stage1, run_stage2, EpochLog, RunDirSink, Stage,
};

use crate::config::{Encoder, LlmMode, Resolved, RunConfig, DEFAULT_CONFIG};
use crate::error::{CliError, Result};

pub const DESCRIPTIONS: &str = "descriptions.json";
pub const CONCEPTS: &str = "concepts.json";
pub const DESC_EMBEDDINGS: &str = "descriptions.emb";
pub const CONCEPT_EMBEDDINGS: &str = "concepts.emb";

fn write(path: &Path, body: &str) -> Result<()> {
    write_atomic(path, body.as_bytes()).map_err(|e| CliError::io(path, e))
}

fn require(path: &Path, hint: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(CliError::config(format!("{} not found; {hint}", path.display())))
    }
}

// ---------------------------------------------------------------------------
// prepare-text

fn transport(cfg: &RunConfig) -> Result<Box<dyn LlmTransport>> {
    let fixture = match &cfg.paths.fixture {
        Some(p) if p.is_file() => Some(FixtureStore::load(p)?),
        _ => None,
    };
    match cfg.text.llm {
        LlmMode::Fixture => {
            let path = cfg
                .paths
                .fixture
                .as_ref()
                .ok_or_else(|| CliError::config("fixture mode needs paths.fixture"))?;
            fixture
                .map(|f| Box::new(f) as Box<dyn LlmTransport>)
                .ok_or_else(|| CliError::config(format!("fixture file {} not found", path.display())))
        }
        LlmMode::Client => {
            let mut http = HttpTransport::from_env()?;
            if let Some(m) = &cfg.text.llm_model {
                http = http.with_model(m.clone());
            }
            if let Some(dir) = &cfg.paths.capture {
                http = http.with_capture_dir(dir.clone());
            }
            Ok(Box::new(Layered {
                fixture: fixture.unwrap_or_default(),
                fallback: Some(http),
            }))
        }
    }
}

fn provider(cfg: &RunConfig) -> Result<EmbeddingProvider> {
    let p = match cfg.text.encoder {
        Encoder::Pseudo => EmbeddingProvider::pseudo(cfg.model.dim, cfg.text.embed_seed),
        Encoder::Files => EmbeddingProvider::from_files(&cfg.text.embedding_files)?,
    };
    if p.dim() != cfg.model.dim {
        return Err(CliError::config(format!(
            "text encoder dim {} differs from model dim {}",
            p.dim(),
            cfg.model.dim
        )));
    }
    Ok(p)
}

/// Builds descriptions and the concept library, embeds both and writes the
/// four asset files. Identical inputs give identical bytes.
pub fn prepare_text(r: &Resolved) -> Result<Vec<PathBuf>> {
    let cfg = &r.config;
    require(&cfg.paths.labels, "a label space file is required")?;
    let labels = LabelSpace::load(&cfg.paths.labels)?;
    let mut llm = transport(cfg)?;
    let enc = provider(cfg)?;
    let desc = build_text_assets(&labels, llm.as_mut())?;
    let count = cfg.text.concept_count.unwrap_or_else(|| default_concept_count(&labels));
    let lib = build_concept_library(&labels, llm.as_mut(), &enc, count)?;
    let table = encode_descriptions(&labels, &desc, &enc)?;

    let dir = &cfg.paths.assets;
    std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    let out: Vec<PathBuf> = [DESCRIPTIONS, CONCEPTS, DESC_EMBEDDINGS, CONCEPT_EMBEDDINGS]
        .iter()
        .map(|f| dir.join(f))
        .collect();
    desc.save(&out[0])?;
    lib.save_nouns(&out[1])?;
    let ids: Vec<String> = desc.ordered(&labels)?.iter().map(|t| text_id(t)).collect();
    write_embedding_file(&out[2], &ids, &table.t_desc)?;
    write_embedding_file(&out[3], &lib.ids(), &lib.embeddings)?;
    log::info!("{} descriptions and {} concepts written to {}", labels.len(), lib.len(), dir.display());
    Ok(out)
}

// ---------------------------------------------------------------------------
// Shared loading

struct Inputs {
    labels: LabelSpace,
    text: TextInputs<f32>,
}

fn load_text(cfg: &RunConfig) -> Result<Inputs> {
    let dir = &cfg.paths.assets;
    let hint = "run prepare-text first";
    require(&cfg.paths.labels, "a label space file is required")?;
    for f in [DESCRIPTIONS, CONCEPTS, DESC_EMBEDDINGS, CONCEPT_EMBEDDINGS] {
        require(&dir.join(f), hint)?;
    }
    let labels = LabelSpace::load(&cfg.paths.labels)?;
    let desc = DescriptionSet::load(&dir.join(DESCRIPTIONS))?;
    let enc = EmbeddingProvider::from_files(&[dir.join(DESC_EMBEDDINGS), dir.join(CONCEPT_EMBEDDINGS)])?;
    if enc.dim() != cfg.model.dim {
        return Err(CliError::config(format!(
            "assets have dim {} but the model expects {}; rerun prepare-text",
            enc.dim(),
            cfg.model.dim
        )));
    }
    let table = encode_descriptions(&labels, &desc, &enc)?;
    let lib = ConceptLibrary::from_nouns(ConceptLibrary::load_nouns(&dir.join(CONCEPTS))?, &enc)?;
    Ok(Inputs {
        labels,
        text: TextInputs {
            t_desc: table.t_desc,
            concepts: lib.embeddings,
        },
    })
}

fn load_data(r: &Resolved, labels: &LabelSpace) -> Result<Dataset> {
    let cfg = &r.config;
    require(&cfg.paths.manifest, "a manifest is required")?;
    let ds = load_manifest(&cfg.paths.manifest, labels, &r.workspace)?;
    if ds.dim != cfg.model.dim {
        return Err(CliError::config(format!(
            "features have dim {} but the model expects {}",
            ds.dim, cfg.model.dim
        )));
    }
    Ok(ds)
}

/// Loads a checkpoint, checks it against the configured model, and applies
/// the configured inference-time settings.
fn load_model(r: &Resolved, explicit: Option<&Path>) -> Result<(AnomizeModel<f32>, PathBuf)> {
    let path = match explicit {
        Some(p) => anomize::dataio::resolve(&r.workspace, p),
        None => {
            let dir = r.run_dir();
            [Stage::Stage2, Stage::Joint]
                .iter()
                .map(|&s| RunDirSink::final_path(&dir, s))
                .find(|p| p.is_file())
                .ok_or_else(|| {
                    CliError::config(format!("no final checkpoint in {}; train first or pass --checkpoint", dir.display()))
                })?
        }
    };
    let mut model = load_checkpoint(&path)?.to_model(Some(&r.config.model))?;
    model.config.alpha_test = r.config.model.alpha_test;
    model.config.beta = r.config.model.beta;
    model.config.validate()?;
    Ok((model, path))
}

// ---------------------------------------------------------------------------
// train

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StagePlan {
    One,
    Two,
    All,
    Joint,
}

fn summarize_logs(out: &mut String, logs: &[EpochLog]) {
    if let Some(last) = logs.last() {
        let _ = write!(out, "{} finished after {} epochs:", last.stage.name(), last.epoch);
        if let Some(c) = &last.cat {
            let _ = write!(out, " L_cat {:.4} (L_ce {:.4}, L_sep {:.4})", c.cat, c.ce, c.sep);
        }
        if let Some(d) = &last.det {
            let _ = write!(out, " L_det {:.4}", d.det);
        }
        out.push('\n');
    }
}

/// Runs the requested stages; returns a human-readable summary.
pub fn train(r: &Resolved, plan: StagePlan, from_scratch: bool) -> Result<String> {
    let cfg = &r.config;
    let inputs = load_text(cfg)?;
    let data = load_data(r, &inputs.labels)?;
    if data.train.is_empty() {
        return Err(CliError::config("manifest has no training videos"));
    }
    let dir = r.run_dir();
    let stage1_path = RunDirSink::final_path(&dir, Stage::Stage1);
    let mut model = match plan {
        StagePlan::Two if !from_scratch => {
            require(&stage1_path, "stage 2 needs a stage-1 checkpoint (train --stage 1, or pass --from-scratch)")?;
            load_checkpoint(&stage1_path)?.to_model(Some(&cfg.model))?
        }
        _ => AnomizeModel::new(cfg.model.clone())?,
    };
    r.echo(&dir)?;
    let mut sink = RunDirSink { dir: dir.clone() };
    let abort = |e: anomize::training::TrainError| {
        CliError::from(e).context(format!("training aborted (log and checkpoints in {})", dir.display()))
    };
    let text = &inputs.text;
    let mut out = String::new();
    let mut finish = |stage: Stage, epochs: usize, model: &AnomizeModel<f32>| -> Result<()> {
        let path = RunDirSink::final_path(&dir, stage);
        save_checkpoint(
            &path,
            model,
            Cursor {
                stage: stage.name().into(),
                epoch: epochs,
            },
        )?;
        let _ = writeln!(out, "wrote {}", path.display());
        Ok(())
    };
    let mut summary = String::new();
    if matches!(plan, StagePlan::One | StagePlan::All) {
        let logs = run_stage1(&mut model, &data.train, text, &cfg.train, &mut sink).map_err(abort)?;
        summarize_logs(&mut summary, &logs);
        let acc = categorization_accuracy(&model, &data.train, &text.t_desc, Phase::Eval)?;
        let _ = writeln!(summary, "train top-1 after stage1: {acc:.4}");
        finish(Stage::Stage1, cfg.train.epochs_stage1, &model)?;
    }
    if matches!(plan, StagePlan::Two | StagePlan::All) {
        let logs = run_stage2(&mut model, &data.train, text, &cfg.train, &mut sink).map_err(abort)?;
        summarize_logs(&mut summary, &logs);
        finish(Stage::Stage2, cfg.train.epochs_stage2, &model)?;
    }
    if plan == StagePlan::Joint {
        let logs = run_joint(&mut model, &data.train, text, &cfg.train, &mut sink).map_err(abort)?;
        summarize_logs(&mut summary, &logs);
        finish(Stage::Joint, cfg.train.epochs_stage1 + cfg.train.epochs_stage2, &model)?;
    }
    Ok(summary + &out)
}

// ---------------------------------------------------------------------------
// eval

pub fn eval(r: &Resolved, checkpoint: Option<&Path>, beta: Option<f64>, out: Option<&Path>) -> Result<EvalReport> {
    let cfg = &r.config;
    let inputs = load_text(cfg)?;
    let data = load_data(r, &inputs.labels)?;
    let (model, path) = load_model(r, checkpoint)?;
    let beta = beta.unwrap_or(model.config.beta);
    if !(0.0..=1.0).contains(&beta) {
        return Err(CliError::config("beta must lie in [0, 1]"));
    }
    if data.test.is_empty() {
        return Err(CliError::config("manifest has no test videos"));
    }
    let (report, records) = evaluate(&model, &data.test, &inputs.text, beta, &cfg.eval)?;
    let dir = out.map_or_else(|| r.run_dir().join("eval"), Path::to_path_buf);
    r.echo(&dir)?;
    write(&dir.join("report.json"), &report.to_json())?;
    let table = format!("checkpoint: {}\n{}", path.display(), report.to_table());
    write(&dir.join("report.txt"), &table)?;
    write(&dir.join("per_video.csv"), &records_to_csv(&records, model.config.topm_divisor))?;
    Ok(report)
}

// ---------------------------------------------------------------------------
// score

#[derive(Debug, serde::Serialize)]
pub struct Prediction {
    pub label: String,
    pub label_index: usize,
    pub p_avg: Vec<f32>,
    pub frames: usize,
    pub csv: PathBuf,
}

pub fn score(
    r: &Resolved,
    checkpoint: Option<&Path>,
    features: &Path,
    beta: Option<f64>,
    out: Option<&Path>,
) -> Result<Prediction> {
    let cfg = &r.config;
    let inputs = load_text(cfg)?;
    let (model, _) = load_model(r, checkpoint)?;
    let features = anomize::dataio::resolve(&r.workspace, features);
    let x: Tensor<f32> = read_feature_file(&features)?;
    let (n, d) = x
        .dims2("features")
        .map_err(|e| CliError::config(format!("{}: {e}", features.display())))?;
    if d != model.config.dim {
        return Err(CliError::config(format!(
            "{}: feature dim {d} differs from model dim {}",
            features.display(),
            model.config.dim
        )));
    }
    let beta = beta.unwrap_or(model.config.beta);
    let s = model.infer(&x, &inputs.text, Phase::Eval, beta)?;
    let mut csv = String::from("frame_index,s_dyn,s_sta,s\n");
    for i in 0..n {
        let _ = writeln!(csv, "{i},{},{},{}", s.s_dyn[i], s.s_sta[i], s.s[i]);
    }
    let stem = features.file_stem().map_or_else(|| "video".into(), |s| s.to_string_lossy().into_owned());
    let dir = out.map_or_else(|| r.run_dir().join("score").join(&stem), Path::to_path_buf);
    r.echo(&dir)?;
    let csv_path = dir.join("scores.csv");
    write(&csv_path, &csv)?;
    let label = inputs.labels.labels()[s.p_video].name.clone();
    let pred = Prediction {
        label,
        label_index: s.p_video,
        p_avg: s.p_avg.clone(),
        frames: n,
        csv: csv_path,
    };
    write(&dir.join("prediction.json"), &serde_json::to_string_pretty(&pred).expect("prediction serializes"))?;
    Ok(pred)
}

// ---------------------------------------------------------------------------
// synth

/// Run config matching a synthetic corpus.
pub fn synthetic_config(spec: &SynthSpec) -> RunConfig {
    let mut c = RunConfig::default();
    c.model.dim = spec.dim;
    c.model.heads = if spec.dim % 4 == 0 { 4 } else { 1 };
    c.model.init_seed = spec.seed;
    c.train.lr = 1e-3;
    c.train.batch_size = 16;
    c.train.epochs_stage1 = 30;
    c.train.epochs_stage2 = 30;
    c.train.seed = spec.seed;
    c.text.embed_seed = spec.embed_seed;
    c
}

pub fn load_spec(path: &Path) -> Result<SynthSpec> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    let parsed = if path.extension().is_some_and(|e| e == "toml") {
        toml::from_str(&text).map_err(|e| e.to_string())
    } else {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| CliError::config(format!("{}: {e}", path.display())))
}

/// Writes the corpus under `dir`, plus a matching `anomize.toml` unless one
/// already exists there.
pub fn synth(spec: &SynthSpec, dir: &Path) -> Result<String> {
    let corpus = generate_synthetic_benchmark(spec)?;
    corpus.write(dir)?;
    let cfg_path = dir.join(DEFAULT_CONFIG);
    if !cfg_path.exists() {
        write(&cfg_path, &synthetic_config(spec).to_toml())?;
    }
    let (train, test) = (
        corpus.rows.iter().filter(|r| r.split == anomize::dataio::RowSplit::Train).count(),
        corpus.rows.iter().filter(|r| r.split == anomize::dataio::RowSplit::Test).count(),
    );
    Ok(format!(
        "synthetic corpus (seed {}): {} labels, {train} train and {test} test videos in {}\n",
        spec.seed,
        corpus.labels.len(),
        dir.display()
    ))
}
