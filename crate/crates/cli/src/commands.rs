//! Subcommand implementations. Every command is a deterministic function
//! of its effective configuration; timestamps never reach data files.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use agedapt::data::{generate_synthetic, load_embeddings, save_embeddings, Domain, Example};
use agedapt::mds::{
    align_with_anchors, build_dissimilarity, smacof_1d, AnchorPair, MdsSettings,
};
use agedapt::model::{parse_checkpoint, Mode};
use agedapt::trainer::{run_experiment_grid, train, Dataset, MetricsReport};
use agedapt::Error as CoreError;

use crate::config::{DataSection, ExperimentConfig};

/// Command failures split by exit code: 1 I/O, 2 configuration,
/// 3 data, 4 training/numerics.
#[derive(Debug)]
pub enum CliError {
    Io(String),
    Config(String),
    Data(String),
    Train(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Train(_) => 4,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Io(m) => write!(f, "io error: {m}"),
            CliError::Config(m) => write!(f, "config error: {m}"),
            CliError::Data(m) => write!(f, "data error: {m}"),
            CliError::Train(m) => write!(f, "training error: {m}"),
        }
    }
}

impl std::error::Error for CliError {}

/// Flag overrides; the config file supplies everything left `None`.
#[derive(Debug, Default, Clone)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub anchors: Option<String>,
    pub dump_matrix: bool,
}

pub fn apply_overrides(config: &mut ExperimentConfig, overrides: &Overrides) {
    if let Some(seed) = overrides.seed {
        config.seed = seed;
    }
    if let Some(out) = &overrides.out {
        config.out_dir = out.clone();
    }
}

fn ensure_out_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::Io(format!("{}: {e}", dir.display())))
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    fs::write(path, contents).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

/// Generates synthetic source and target embedding files.
pub fn cmd_generate(config: &ExperimentConfig) -> Result<(), CliError> {
    let synth = config
        .synthetic_config()?
        .ok_or_else(|| CliError::Config("generate requires a synthetic data section".into()))?;
    let (source, target) =
        generate_synthetic(&synth).map_err(|e| CliError::Data(e.to_string()))?;
    ensure_out_dir(&config.out_dir)?;
    let source_path = config.out_dir.join("source.csv");
    let target_path = config.out_dir.join("target.csv");
    save_embeddings(&source_path, &source).map_err(|e| CliError::Io(e.to_string()))?;
    save_embeddings(&target_path, &target).map_err(|e| CliError::Io(e.to_string()))?;
    println!(
        "wrote {} source rows to {} and {} target rows to {} (seed {})",
        source.len(),
        source_path.display(),
        target.len(),
        target_path.display(),
        synth.seed
    );
    Ok(())
}

fn load_domain_file(path: &Path, expected: Domain) -> Result<Vec<Example>, CliError> {
    let examples = load_embeddings(path).map_err(|e| CliError::Data(e.to_string()))?;
    for e in &examples {
        if e.domain != expected {
            return Err(CliError::Data(format!(
                "{}: row {} has domain {} but the file is loaded as {}",
                path.display(),
                e.id,
                e.domain.as_str(),
                expected.as_str()
            )));
        }
    }
    Ok(examples)
}

fn load_dataset(config: &ExperimentConfig) -> Result<Dataset, CliError> {
    let (source, target) = match &config.data {
        DataSection::Synthetic { .. } => {
            let synth = config.synthetic_config()?.expect("synthetic section");
            generate_synthetic(&synth).map_err(|e| CliError::Data(e.to_string()))?
        }
        DataSection::Files {
            source_path,
            target_path,
        } => {
            let source = load_domain_file(source_path, Domain::Source)?;
            let target = load_domain_file(target_path, Domain::Target)?;
            (source, target)
        }
    };
    Dataset::from_domains(source, target, config.seed).map_err(|e| CliError::Data(e.to_string()))
}

fn map_train_error(e: CoreError) -> CliError {
    match e {
        CoreError::InvalidConfig(m) => CliError::Config(m),
        other => CliError::Train(other.to_string()),
    }
}

/// One-line summary in the layout of the result tables: variant and gamma
/// next to the best-epoch source-validation and target losses.
fn summary_table(config: &ExperimentConfig, report: &MetricsReport) -> String {
    let mut out = format!(
        "{:<22} {:>7} {:>12} {:>12}\n",
        "variant", "gamma", "s_val_loss", "target_loss"
    );
    if let Some(best) = report.best() {
        out.push_str(&format!(
            "{:<22} {:>7} {:>12.3} {:>12.3}\n",
            config.train.variant, config.loss.gamma, best.source_val_mae, best.target_mae
        ));
    }
    out
}

/// Trains one model: writes metrics (csv and aligned table) plus a
/// checkpoint, and prints the summary row.
pub fn cmd_train(config: &ExperimentConfig) -> Result<(), CliError> {
    let train_config = config.train_config()?;
    let data = load_dataset(config)?;
    let (model, report) = train(&train_config, &data).map_err(map_train_error)?;
    ensure_out_dir(&config.out_dir)?;
    write_file(&config.out_dir.join("metrics.csv"), &report.to_csv())?;
    write_file(&config.out_dir.join("metrics.txt"), &report.to_table())?;
    let checkpoint_path = config.out_dir.join("checkpoint.txt");
    model
        .save_checkpoint(&checkpoint_path)
        .map_err(|e| CliError::Io(e.to_string()))?;
    print!("{}", summary_table(config, &report));
    println!("metrics and checkpoint written to {}", config.out_dir.display());
    Ok(())
}

/// Runs the experiment grid and writes the comparison table.
pub fn cmd_grid(config: &ExperimentConfig, jobs: usize) -> Result<(), CliError> {
    let base = config.train_config()?;
    let grid = config.grid_spec()?;
    let data = load_dataset(config)?;
    let report =
        run_experiment_grid(&base, &data, &grid, jobs).map_err(map_train_error)?;
    ensure_out_dir(&config.out_dir)?;
    write_file(&config.out_dir.join("grid.csv"), &report.to_csv())?;
    write_file(&config.out_dir.join("grid.txt"), &report.to_table())?;
    print!("{}", report.to_table());
    println!("grid table written to {}", config.out_dir.display());
    Ok(())
}

fn parse_anchor_flag(raw: &str) -> Result<Vec<(String, f64)>, CliError> {
    let mut anchors = Vec::new();
    for part in raw.split(',') {
        let (id, age) = part.split_once('=').ok_or_else(|| {
            CliError::Config(format!("anchor {part:?} must be id=age"))
        })?;
        let age: f64 = age
            .trim()
            .parse()
            .map_err(|_| CliError::Config(format!("unparseable anchor age in {part:?}")))?;
        anchors.push((id.trim().to_string(), age));
    }
    Ok(anchors)
}

/// Recovers absolute ages from a pairwise checkpoint via metric MDS and
/// two labeled anchors; writes per-id recovered ages and prints the
/// target MAE excluding the anchors.
pub fn cmd_mds(config: &ExperimentConfig, overrides: &Overrides) -> Result<(), CliError> {
    let section = config.mds.as_ref();
    let checkpoint_path = overrides
        .checkpoint
        .clone()
        .or_else(|| section.and_then(|s| s.checkpoint.clone()))
        .ok_or_else(|| CliError::Config("mds needs a checkpoint path".into()))?;
    let data_path = overrides
        .data
        .clone()
        .or_else(|| section.and_then(|s| s.data_path.clone()))
        .ok_or_else(|| CliError::Config("mds needs a data file path".into()))?;
    let anchors: Vec<(String, f64)> = match &overrides.anchors {
        Some(raw) => parse_anchor_flag(raw)?,
        None => section
            .map(|s| s.anchors.iter().map(|a| (a.id.clone(), a.age)).collect())
            .unwrap_or_default(),
    };
    if anchors.len() != 2 {
        return Err(CliError::Config(format!(
            "mds needs exactly two anchors, got {}",
            anchors.len()
        )));
    }

    let checkpoint_text = fs::read_to_string(&checkpoint_path)
        .map_err(|e| CliError::Io(format!("{}: {e}", checkpoint_path.display())))?;
    let model = parse_checkpoint(&checkpoint_text).map_err(|e| CliError::Data(e.to_string()))?;
    if model.mode != Mode::Pairwise {
        return Err(CliError::Data(
            "mds requires a pairwise checkpoint; this one is single-mode".into(),
        ));
    }
    let examples = load_embeddings(&data_path).map_err(|e| CliError::Data(e.to_string()))?;
    if examples.len() < 3 {
        return Err(CliError::Data("mds needs at least 3 items".into()));
    }

    let anchor_idx: Vec<usize> = anchors
        .iter()
        .map(|(id, _)| {
            examples
                .iter()
                .position(|e| &e.id == id)
                .ok_or_else(|| CliError::Data(format!("anchor id {id:?} not in data file")))
        })
        .collect::<Result<_, _>>()?;
    let anchor_pair = AnchorPair::new(anchor_idx[0], anchor_idx[1])
        .map_err(|e| CliError::Config(e.to_string()))?;

    let items: Vec<Vec<f64>> = examples.iter().map(|e| e.features.clone()).collect();
    let matrix = build_dissimilarity(&model, &items).map_err(|e| CliError::Train(e.to_string()))?;
    let settings = MdsSettings {
        max_iter: section.map(|s| s.max_iter).unwrap_or(500),
        tol: section.map(|s| s.tol).unwrap_or(1e-9),
        seed: config.seed,
    };
    let embedding = smacof_1d(&matrix, settings.max_iter, settings.tol, settings.seed)
        .map_err(|e| CliError::Train(e.to_string()))?;
    let recovered = align_with_anchors(
        &embedding,
        &anchor_pair,
        (anchors[0].1, anchors[1].1),
    )
    .map_err(|e| CliError::Train(e.to_string()))?;

    ensure_out_dir(&config.out_dir)?;
    let mut out = String::from("id,recovered_age\n");
    for (e, age) in examples.iter().zip(&recovered) {
        out.push_str(&format!("{},{age}\n", e.id));
    }
    write_file(&config.out_dir.join("recovered_ages.csv"), &out)?;

    let dump = overrides.dump_matrix || section.map(|s| s.dump_matrix).unwrap_or(false);
    if dump {
        write_file(&config.out_dir.join("dissimilarity.txt"), &matrix.to_text())?;
        let mut emb = String::new();
        for (e, c) in examples.iter().zip(&embedding.coords) {
            emb.push_str(&format!("{} {c}\n", e.id));
        }
        write_file(&config.out_dir.join("embedding.txt"), &emb)?;
    }

    let mut total = 0.0;
    let mut count = 0usize;
    for (i, e) in examples.iter().enumerate() {
        if i == anchor_pair.first || i == anchor_pair.second {
            continue;
        }
        if let Some(age) = e.age {
            total += (recovered[i] - age).abs();
            count += 1;
        }
    }
    if count == 0 {
        return Err(CliError::Data(
            "no labeled non-anchor items; target MAE unavailable".into(),
        ));
    }
    let mae = total / count as f64;
    println!(
        "mds: embedded {} items in {} iterations, final stress {:.6}",
        examples.len(),
        embedding.iterations,
        embedding.final_stress
    );
    println!("target MAE excluding anchors: {mae:.3} years");
    println!("recovered ages written to {}", config.out_dir.display());
    Ok(())
}
