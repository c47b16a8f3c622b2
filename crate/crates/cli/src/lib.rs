//! Command-line front end. `dispatch` parses an argument vector, runs the
//! requested subcommand and maps the outcome to an exit code.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use degan_core::checkpoint::Checkpoint;
use degan_core::config::{default_output_root, derive_seed, RunConfig, RunManifest};
use degan_core::data::io::{load_directory, load_png, save_grid, save_png, write_dataset_dir, LoadOptions};
use degan_core::data::{generate_synthetic, make_folds, Dataset, LabeledImage};
use degan_core::eval::{
    emit_report, pixel_probe, probe_disentanglement, transfer_expression, within_subject_split, KfoldConfig, ProbeConfig,
    ProbeReport,
};
use degan_core::models::ModelConfig;
use degan_core::stage1::{load_stage1, train_stage1, Stage1Config, Stage1Init};
use degan_core::stage2::{train_stage2, FrozenEncoder};

#[derive(Debug, Parser)]
#[command(name = "degan", version, about = "Disentangled expression GAN training and evaluation")]
#[command(arg_required_else_help = true)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat `key = value` config file; defaults apply to missing keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Run directory (default: `$DEGAN_OUT/<subcommand>`, or `runs/<subcommand>`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Adversarial training of the expression encoder and generator.
    TrainStage1 {
        /// Dataset directory or `synthetic`.
        #[arg(long)]
        data: String,
        #[arg(long)]
        resume: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train the fused expression classifier on a frozen encoder.
    TrainStage2 {
        /// Stage-1 checkpoint holding the encoder.
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        data: String,
        #[command(flatten)]
        common: Common,
    },
    /// Subject-disjoint k-fold evaluation against the CNN baseline.
    Evaluate {
        #[arg(long)]
        data: String,
        /// Number of folds (overrides `k` from the config).
        #[arg(long)]
        k: Option<usize>,
        #[command(flatten)]
        common: Common,
    },
    /// Linear identity and expression probes on the expression code.
    Probe {
        #[arg(long)]
        encoder: PathBuf,
        #[arg(long)]
        data: String,
        #[command(flatten)]
        common: Common,
    },
    /// Re-render an image's expression on another identity.
    Transfer {
        /// Stage-1 checkpoint.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        identity: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[command(flatten)]
        common: Common,
    },
    /// Write a procedurally rendered labeled face set.
    GenSynthetic {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        identities: usize,
        #[arg(long, default_value_t = 7)]
        expressions: usize,
        #[arg(long, default_value_t = 10)]
        per_pair: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 48)]
        size: usize,
    },
    /// Re-execute the run recorded in a manifest.
    Rerun {
        /// `manifest.json` or the run directory containing it.
        manifest: PathBuf,
        /// New run directory.
        #[arg(long)]
        out: PathBuf,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::TrainStage1 { .. } => "train-stage1",
            Command::TrainStage2 { .. } => "train-stage2",
            Command::Evaluate { .. } => "evaluate",
            Command::Probe { .. } => "probe",
            Command::Transfer { .. } => "transfer",
            Command::GenSynthetic { .. } => "gen-synthetic",
            Command::Rerun { .. } => "rerun",
        }
    }
}

/// Runs one invocation. `argv[0]` is the program name. Returns 0 on
/// success, 2 on usage errors and 1 on run failures.
pub fn dispatch<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<String>,
{
    let argv: Vec<String> = argv.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match run(cli.command, argv.get(1..).unwrap_or_default().to_vec()) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {}", format!("{e:#}").replace('\n', " "));
            1
        }
    }
}

fn run_dir(common: &Common, name: &str) -> PathBuf {
    common.out.clone().unwrap_or_else(|| default_output_root().join(name))
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    match &common.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("config {}", p.display())),
        None => Ok(RunConfig::default()),
    }
}

/// Dataset from a directory or the synthetic generator. The model's label
/// counts and resolution follow the data.
pub fn load_data(spec: &str, cfg: &mut RunConfig) -> anyhow::Result<Dataset> {
    let data = if spec == "synthetic" {
        let m = &cfg.model;
        generate_synthetic(cfg.synthetic_identities, m.n_expressions, cfg.synthetic_per_pair, m.image_size, derive_seed(cfg.seed, "data"))?
            .dataset
    } else {
        let opts = LoadOptions { resize: Some(cfg.model.image_size), ..Default::default() };
        load_directory(Path::new(spec), &opts).with_context(|| format!("dataset {spec}"))?
    };
    cfg.model.n_expressions = data.n_expressions;
    cfg.model.n_identities = data.n_identities;
    cfg.model.channels = data.image_dims().2;
    Ok(data)
}

fn start(dir: &Path, command: Vec<String>, cfg: &RunConfig) -> anyhow::Result<(RunManifest, Vec<PathBuf>)> {
    fs::create_dir_all(dir)?;
    let manifest = RunManifest::new(command, cfg);
    manifest.write(dir)?;
    let snapshot = dir.join("config.txt");
    fs::write(&snapshot, cfg.to_text())?;
    Ok((manifest, vec![snapshot]))
}

fn probe_csv(rows: &[(&str, ProbeReport)]) -> String {
    let mut s = String::from("features,expr_probe_accuracy,id_probe_accuracy,chance_expr,chance_id\n");
    for (name, r) in rows {
        s.push_str(&format!(
            "{name},{:.6},{:.6},{:.6},{:.6}\n",
            r.expr_probe_accuracy, r.id_probe_accuracy, r.chance_expr, r.chance_id
        ));
    }
    s
}

fn run(command: Command, args: Vec<String>) -> anyhow::Result<()> {
    let name = command.name();
    match command {
        Command::TrainStage1 { data, resume, common } => {
            let mut cfg = load_config(&common)?;
            let dataset = load_data(&data, &mut cfg)?;
            let dir = run_dir(&common, name);
            let (mut manifest, mut artifacts) = start(&dir, args, &cfg)?;
            let init = match resume {
                Some(p) => Stage1Init::Resume(Checkpoint::load(&p).with_context(|| format!("checkpoint {}", p.display()))?),
                None => Stage1Init::Fresh,
            };
            let out = train_stage1(&dataset, &cfg.model, &cfg.stage1_config(), init, Some(&dir))?;
            artifacts.extend(out.artifacts);
            manifest.finalize(&dir, &artifacts)?;
            println!("{}", artifacts.last().map(|p| p.display().to_string()).unwrap_or_default());
        }
        Command::TrainStage2 { encoder, data, common } => {
            let mut cfg = load_config(&common)?;
            let ck = Checkpoint::load(&encoder).with_context(|| format!("checkpoint {}", encoder.display()))?;
            let frozen = FrozenEncoder::from_checkpoint(&ck)?;
            cfg.model = frozen.config().clone();
            let dataset = load_data(&data, &mut cfg)?;
            if cfg.model.n_expressions != frozen.config().n_expressions {
                bail!("dataset has {} expressions, encoder expects {}", cfg.model.n_expressions, frozen.config().n_expressions);
            }
            let dir = run_dir(&common, name);
            let (mut manifest, mut artifacts) = start(&dir, args, &cfg)?;
            let out = train_stage2(&frozen, &dataset, &cfg.stage2_config(), Some(&dir))?;
            artifacts.extend(out.artifacts);
            manifest.finalize(&dir, &artifacts)?;
            println!("{}", dir.join("fer_model.ckpt").display());
        }
        Command::Evaluate { data, k, common } => {
            let mut cfg = load_config(&common)?;
            if let Some(k) = k {
                cfg.k = k;
            }
            let dataset = load_data(&data, &mut cfg)?;
            let dir = run_dir(&common, name);
            let (mut manifest, mut artifacts) = start(&dir, args, &cfg)?;
            let folds = make_folds(&dataset.images, cfg.k, derive_seed(cfg.seed, "folds"))?;
            let table = dir.join("folds.tsv");
            fs::write(&table, folds.to_table())?;
            artifacts.push(table);
            let kcfg = KfoldConfig {
                model: cfg.model.clone(),
                stage1: cfg.stage1_config(),
                stage2: cfg.stage2_config(),
                baseline: cfg.baseline_config(),
                augment_crop: (cfg.augment_crop > 0).then_some(cfg.augment_crop),
                with_baseline: cfg.with_baseline,
            };
            let report = degan_core::eval::run_kfold(&dataset, &folds, &kcfg)?;
            let results: Vec<_> = std::iter::once(report.degan).chain(report.baseline).collect();
            artifacts.extend(emit_report(&dir, &results, None, &[])?);
            print!("{}", fs::read_to_string(dir.join("summary.txt"))?);
            manifest.finalize(&dir, &artifacts)?;
        }
        Command::Probe { encoder, data, common } => {
            let mut cfg = load_config(&common)?;
            let ck = Checkpoint::load(&encoder).with_context(|| format!("checkpoint {}", encoder.display()))?;
            let frozen = FrozenEncoder::from_checkpoint(&ck)?;
            cfg.model = frozen.config().clone();
            let dataset = load_data(&data, &mut cfg)?;
            let (train, test) = if data == "synthetic" {
                // fresh renders of the same identities for the test side
                let m = &cfg.model;
                let per = cfg.synthetic_per_pair.div_ceil(4).max(1);
                let held = generate_synthetic(cfg.synthetic_identities, m.n_expressions, per, m.image_size, derive_seed(cfg.seed, "probe"))?;
                (dataset.images, held.dataset.images)
            } else {
                within_subject_split(&dataset.images, 4)
            };
            let dir = run_dir(&common, name);
            let (mut manifest, mut artifacts) = start(&dir, args, &cfg)?;
            let pcfg = ProbeConfig { iterations: cfg.probe_iterations, seed: derive_seed(cfg.seed, "probe"), ..Default::default() };
            let code = probe_disentanglement(&frozen, &train, &test, &pcfg)?;
            let pixels = pixel_probe(&train, &test, &pcfg)?;
            let text = probe_csv(&[("code", code), ("pixels", pixels)]);
            let path = dir.join("probe.csv");
            fs::write(&path, &text)?;
            artifacts.push(path);
            print!("{text}");
            manifest.finalize(&dir, &artifacts)?;
        }
        Command::Transfer { checkpoint, input, identity, seed, common } => {
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("checkpoint {}", checkpoint.display()))?;
            let (models, _, _) = load_stage1(&ck, &Stage1Config::default(), false)?;
            let model: &ModelConfig = &models.gen.config;
            let mut cfg = load_config(&common)?;
            cfg.model = model.clone();
            cfg.seed = seed;
            let x = load_png(&input, Some(model.image_size)).with_context(|| format!("image {}", input.display()))?;
            let y = transfer_expression(&models.gen, &x, identity, seed)?;
            let dir = run_dir(&common, name);
            let (mut manifest, mut artifacts) = start(&dir, args, &cfg)?;
            let out = dir.join(format!("transfer_id{identity}_seed{seed}.png"));
            save_png(&out, &y)?;
            let grid = dir.join(format!("transfer_id{identity}_seed{seed}_grid.png"));
            save_grid(&grid, &[vec![x, y]])?;
            artifacts.extend([out.clone(), grid]);
            manifest.finalize(&dir, &artifacts)?;
            println!("{}", out.display());
        }
        Command::GenSynthetic { out, identities, expressions, per_pair, seed, size } => {
            let set = generate_synthetic(identities, expressions, per_pair, size, seed)?;
            let images: &[LabeledImage] = &set.dataset.images;
            let cfg = RunConfig { seed, ..Default::default() };
            let (mut manifest, _) = start(&out, args, &cfg)?;
            let written = write_dataset_dir(&out, images)?;
            manifest.finalize(&out, &written)?;
            println!("{} images in {}", written.len(), out.display());
        }
        Command::Rerun { manifest, out } => {
            let m = RunManifest::load(&manifest).with_context(|| format!("manifest {}", manifest.display()))?;
            let cfg = m.run_config()?;
            fs::create_dir_all(&out)?;
            let config = out.join("replay_config.txt");
            fs::write(&config, cfg.to_text())?;
            let mut argv = vec!["degan".to_string()];
            argv.extend(replace_flag(&replace_flag(&m.command, "--config", &config), "--out", &out));
            let code = dispatch(argv);
            if code != 0 {
                bail!("replayed command exited with {code}");
            }
        }
    }
    Ok(())
}

/// `args` with `flag`'s value replaced by `value`, or the pair appended.
fn replace_flag(args: &[String], flag: &str, value: &Path) -> Vec<String> {
    let value = value.to_string_lossy().into_owned();
    let mut out = Vec::with_capacity(args.len() + 2);
    let mut found = false;
    let mut it = args.iter();
    while let Some(a) = it.next() {
        if a == flag {
            it.next();
            out.extend([flag.to_string(), value.clone()]);
            found = true;
        } else if let Some(_v) = a.strip_prefix(&format!("{flag}=")) {
            out.extend([flag.to_string(), value.clone()]);
            found = true;
        } else {
            out.push(a.clone());
        }
    }
    if !found {
        out.extend([flag.to_string(), value]);
    }
    out
}
