// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};
use csae_core::data::{Dataset, TEXTURED_BACKGROUND};
use csae_core::intervention::{finetune_layer, intervene, owning_layer, FinetuneConfig, FinetuneEval, InterventionRequest};
use csae_core::model::{generate_adversarial, train_target, TargetModel, TargetTrainConfig};
use csae_core::pipeline::{run_pipeline, PipelineConfig, SaeCheckpoint, Stage};
use csae_core::Parameters;
use csae_workbench::atomic::write_bytes_atomic;
use csae_workbench::checkpoint::{
    ensure_compatible, load_adversarial, load_model, load_sae, save_adversarial, save_model, save_sae,
};
use csae_workbench::dataset::{
    export_annotations, export_images, gen_data, load_dataset, read_annotations, read_images_for, save_dataset,
};
use csae_workbench::lock::FinetuneLock;
use csae_workbench::provenance::Provenance;
use csae_workbench::reports::{
    audit_report, entropy_report, eval_ids, free_top_report, js_report, locr_report, ENTROPY_GROUPS,
};
use csae_workbench::service::{serve, Workbench};
use csae_workbench::{Result, WorkbenchError};
use serde::Serialize;

#[derive(Debug, Parser)]
#[command(name = "csae", version, about = "Concept SAE workbench")]
struct Cli {
    /// Artifact root.
    #[arg(long, global = true, env = "CSAE_DATA_DIR", default_value = "csae-data")]
    data_dir: PathBuf,

    /// Dataset directory; defaults to `<data-dir>/dataset`.
    #[arg(long, global = true)]
    dataset: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// JSON pipeline configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum StageArg {
    #[value(name = "1")]
    One,
    #[value(name = "2")]
    Two,
    #[value(name = "3")]
    Three,
    All,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Diagnostic {
    Locr,
    Entropy,
    Js,
    Audit,
    FreeTop,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset directory.
    GenData {
        #[arg(long, default_value_t = 2000)]
        size: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train the target classifier.
    TrainTarget {
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Train SAE stages on the target model's tap layers.
    TrainSae {
        #[arg(long, value_enum, default_value = "all")]
        stage: StageArg,
        /// Print the provenance block and configuration without training.
        #[arg(long)]
        dry_run: bool,
    },
    /// Compute a diagnostic report and save it under `reports/`
    Diagnose {
        #[arg(value_enum)]
        kind: Diagnostic,
        /// Entropy groups, comma separated.
        #[arg(long, default_value = "correct,incorrect,adversarial")]
        groups: String,
        #[arg(long, default_value_t = 0.05)]
        eps: f32,
        /// Use at most this many held-out images.
        #[arg(long)]
        limit: Option<usize>,
        /// Concept indices for `audit`, comma separated.
        #[arg(long)]
        concepts: Option<String>,
        #[arg(long)]
        layer: Option<usize>,
        #[arg(long, default_value_t = 0)]
        token: usize,
        #[arg(long, default_value_t = 10)]
        k: usize,
    },
    /// FGSM against the held-out images; ranks layers by JS distance.
    Attack {
        #[arg(long, default_value_t = 0.05)]
        eps: f32,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Edit concept scores of one image and report the counterfactual.
    Intervene {
        #[arg(long)]
        image: usize,
        #[arg(long)]
        layer: usize,
        /// `concept=value`, repeatable.
        #[arg(long = "edit")]
        edits: Vec<String>,
    },
    /// Adversarially finetune the layer that produces a tap.
    Finetune {
        #[arg(long)]
        layer: usize,
        #[arg(long, default_value_t = 2)]
        epochs: usize,
        #[arg(long, default_value_t = 1e-3)]
        lr: f64,
        /// Training pairs drawn from the train split.
        #[arg(long, default_value_t = 1000)]
        pairs: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the HTTP API for the workbench UI
    Serve {
        #[arg(long, default_value_t = 8080)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
        #[arg(long)]
        limit: Option<usize>,
    },
    /// Write the dataset as an annotation file plus an image dump.
    Export {
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        images: Option<PathBuf>,
    },
    /// Build a dataset directory from an annotation file and image dump.
    Import {
        #[arg(long)]
        annotations: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

struct Paths {
    root: PathBuf,
    dataset: PathBuf,
}

impl Paths {
    fn target(&self) -> PathBuf {
        self.root.join("target.ckpt")
    }
    fn sae(&self) -> PathBuf {
        self.root.join("sae.ckpt")
    }
    fn adversarial(&self) -> PathBuf {
        self.root.join("adversarial.ckpt")
    }
    fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(format!("{name}.json"))
    }
}

#[derive(Serialize)]
struct Report<'a, T: Serialize> {
    provenance: &'a Provenance,
    report: &'a T,
}

fn save_report<T: Serialize>(path: &Path, provenance: &Provenance, report: &T) -> Result<()> {
    let bytes = serde_json::to_vec_pretty(&Report { provenance, report }).map_err(|e| WorkbenchError::Malformed {
        what: "report",
        detail: e.to_string(),
    })?;
    write_bytes_atomic(path, &bytes)
}

fn pipeline_config(cli: &Cli) -> Result<PipelineConfig> {
    let mut config = match &cli.config {
        Some(p) => {
            let text = std::fs::read(p).map_err(WorkbenchError::io(p))?;
            serde_json::from_slice(&text).map_err(|e| WorkbenchError::Malformed {
                what: "pipeline config",
                detail: e.to_string(),
            })?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = cli.seed {
        config.seed = s;
    }
    config.validate()?;
    Ok(config)
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .filter(|t| !t.trim().is_empty())
        .map(|t| {
            t.trim().parse().map_err(|_| WorkbenchError::Malformed {
                what: "index list",
                detail: format!("`{t}` is not an index"),
            })
        })
        .collect()
}

fn parse_edits(edits: &[String]) -> Result<BTreeMap<usize, f32>> {
    edits
        .iter()
        .map(|e| {
            let bad = || WorkbenchError::Malformed {
                what: "edit",
                detail: format!("`{e}` is not concept=value"),
            };
            let (c, v) = e.split_once('=').ok_or_else(bad)?;
            Ok((c.trim().parse().map_err(|_| bad())?, v.trim().parse().map_err(|_| bad())?))
        })
        .collect()
}

struct Loaded {
    data: Dataset,
    model: TargetModel,
    ckpt: SaeCheckpoint,
}

fn load_all(paths: &Paths) -> Result<Loaded> {
    let data = load_dataset(&paths.dataset)?;
    let (model, _) = load_model(&paths.target())?;
    let (ckpt, _) = load_sae(&paths.sae())?;
    if ckpt.model_fingerprint != model.fingerprint() {
        return Err(WorkbenchError::Malformed {
            what: "SAE checkpoint",
            detail: "trained against a different target model".into(),
        });
    }
    Ok(Loaded { data, model, ckpt })
}

fn print_json<T: Serialize>(value: &T) {
    use std::io::Write;
    // a closed pipe is not an error worth reporting
    let _ = writeln!(std::io::stdout(), "{}", serde_json::to_string_pretty(value).unwrap_or_default());
}

fn run(cli: Cli) -> Result<()> {
    let paths = Paths {
        dataset: cli.dataset.clone().unwrap_or_else(|| cli.data_dir.join("dataset")),
        root: cli.data_dir.clone(),
    };
    match &cli.command {
        Command::GenData { size, out } => {
            let out = out.clone().unwrap_or(paths.dataset.clone());
            let seed = cli.seed.unwrap_or(0);
            let data = gen_data(&out, seed, *size)?;
            println!("wrote {} images to {}", data.len(), out.display());
        }
        Command::TrainTarget { epochs } => {
            let data = load_dataset(&paths.dataset)?;
            let mut config = TargetTrainConfig::default();
            if let Some(e) = epochs {
                config.epochs = *e;
            }
            config.seed = cli.seed.unwrap_or(config.seed);
            let (model, log) = train_target(&data, &config)?;
            let provenance = Provenance::new("train-target", config.seed, &config);
            save_model(&paths.target(), &model, Some(&provenance))?;
            for (i, l) in log.epoch_losses.iter().enumerate() {
                println!("epoch {} loss {l:.6}", i + 1);
            }
            println!(
                "train accuracy {:.4} validation accuracy {:.4}",
                model.train_accuracy.unwrap_or(f64::NAN),
                model.val_accuracy.unwrap_or(f64::NAN)
            );
        }
        Command::TrainSae { stage, dry_run } => {
            let config = pipeline_config(&cli)?;
            let provenance = Provenance::new("train-sae", config.seed, &config);
            #[derive(Serialize)]
            struct Block<'a> {
                provenance: &'a Provenance,
                config: &'a PipelineConfig,
            }
            let block = Block {
                provenance: &provenance,
                config: &config,
            };
            if *dry_run {
                print_json(&block);
                return Ok(());
            }
            let data = load_dataset(&paths.dataset)?;
            let (model, _) = load_model(&paths.target())?;
            let ckpt = match stage {
                StageArg::All => run_pipeline(&data, &model, &config).map_err(|f| f.error)?,
                StageArg::One => {
                    let mut ckpt = SaeCheckpoint::new(config.clone(), data.vocabulary.len(), &model)?;
                    ckpt.train_stage(Stage::Tokenizer, &data, &model)?;
                    ckpt
                }
                StageArg::Two | StageArg::Three => {
                    let (mut ckpt, _) = load_sae(&paths.sae())?;
                    ensure_compatible(&ckpt, &config, data.vocabulary.len())?;
                    ckpt.config = config.clone();
                    let s = if matches!(stage, StageArg::Two) { Stage::Aggregator } else { Stage::Free };
                    ckpt.train_stage(s, &data, &model)?;
                    ckpt
                }
            };
            save_sae(&paths.sae(), &ckpt, Some(&provenance))?;
            for r in &ckpt.metrics {
                println!(
                    "layer {} {} final loss {:.6} held-out {:.6}",
                    r.layer,
                    r.stage.name(),
                    r.epoch_losses.last().copied().unwrap_or(f64::NAN),
                    r.held_out
                );
            }
            print_json(&block);
        }
        Command::Diagnose {
            kind,
            groups,
            eps,
            limit,
            concepts,
            layer,
            token,
            k,
        } => {
            let l = load_all(&paths)?;
            let ids = eval_ids(&l.data, &l.ckpt, *limit);
            let seed = cli.seed.unwrap_or(l.ckpt.config.seed);
            match kind {
                Diagnostic::Locr => {
                    let r = locr_report(&l.model, &l.ckpt, &l.data, &ids)?;
                    save_report(&paths.report("locr"), &Provenance::new("diagnose locr", seed, &ids), &r)?;
                    print!("{}", r.to_table());
                }
                Diagnostic::Entropy => {
                    let groups: Vec<&str> = groups.split(',').map(str::trim).filter(|g| !g.is_empty()).collect();
                    if let Some(g) = groups.iter().find(|g| !ENTROPY_GROUPS.contains(g)) {
                        return Err(WorkbenchError::Malformed {
                            what: "entropy groups",
                            detail: format!("unknown group `{g}`"),
                        });
                    }
                    let adv = groups.contains(&"adversarial").then_some(*eps);
                    let r = entropy_report(&l.model, &l.ckpt, &l.data, &ids, adv)?;
                    save_report(&paths.report("entropy"), &Provenance::new("diagnose entropy", seed, &(&ids, eps)), &r)?;
                    print!("{}", r.to_table(&groups));
                    for n in &r.notices {
                        println!("note: {n}");
                    }
                }
                Diagnostic::Js => {
                    let (r, _) = js_report(&l.model, &l.ckpt, &l.data, &ids, *eps)?;
                    save_report(&paths.report("js"), &Provenance::new("diagnose js", seed, &(&ids, eps)), &r)?;
                    print!("{}", r.to_table());
                }
                Diagnostic::Audit => {
                    let subset = match concepts {
                        Some(c) => parse_list(c)?,
                        None => vec![TEXTURED_BACKGROUND],
                    };
                    let r = audit_report(&l.model, &l.ckpt, &l.data, &ids, &subset)?;
                    save_report(&paths.report("audit"), &Provenance::new("diagnose audit", seed, &subset), &r)?;
                    print!("{}", r.to_table());
                }
                Diagnostic::FreeTop => {
                    let layer = layer.or_else(|| l.ckpt.tap_layers().last().copied()).unwrap_or_default();
                    let r = free_top_report(&l.model, &l.ckpt, &l.data, &ids, layer, *token, *k)?;
                    save_report(&paths.report("free-top"), &Provenance::new("diagnose free-top", seed, &(layer, token, k)), &r)?;
                    print!("{}", r.to_table());
                }
            }
        }
        Command::Attack { eps, limit } => {
            let l = load_all(&paths)?;
            let ids = eval_ids(&l.data, &l.ckpt, *limit);
            let (r, adv) = js_report(&l.model, &l.ckpt, &l.data, &ids, *eps)?;
            let provenance = Provenance::new("attack", cli.seed.unwrap_or(0), &(&ids, eps));
            save_adversarial(&paths.adversarial(), &adv, Some(&provenance))?;
            save_report(&paths.report("js"), &provenance, &r)?;
            let clean = l.model.accuracy(&l.data, &ids)?;
            let refs: Vec<_> = adv.images.iter().collect();
            let attacked = csae_core::model::accuracy_of(
                &l.model.predict_batch_chunked(&csae_core::Tensor::stack(&refs)?)?,
                &adv.labels,
            )?;
            println!("clean accuracy {clean:.4} adversarial accuracy {attacked:.4}");
            print!("{}", r.to_table());
        }
        Command::Intervene { image, layer, edits } => {
            let l = load_all(&paths)?;
            let req = InterventionRequest {
                image: *image,
                layer: *layer,
                edits: parse_edits(edits)?,
            };
            print_json(&intervene(&req, &l.model, &l.ckpt, &l.data)?);
        }
        Command::Finetune {
            layer,
            epochs,
            lr,
            pairs,
            out,
        } => {
            let _lock = FinetuneLock::acquire(&paths.root)?;
            let l = load_all(&paths)?;
            let (eval_set, _) = load_adversarial(&paths.adversarial())?;
            let target = owning_layer(&l.model, *layer)?;
            let (train, _) = l.data.split(l.ckpt.config.train_fraction);
            let train: Vec<usize> = train.into_iter().take(*pairs).collect();
            let train_adv = generate_adversarial(&l.model, &l.data, &train, eval_set.epsilon)?;
            let eval_clean = l.data.batch(&eval_set.ids);
            let config = FinetuneConfig {
                epochs: *epochs,
                lr: *lr,
                seed: cli.seed.unwrap_or(0),
                ..FinetuneConfig::default()
            };
            let (tuned, report) = finetune_layer(
                &l.model,
                target,
                &l.data.batch(&train),
                &train_adv,
                &FinetuneEval {
                    clean: &eval_clean,
                    adversarial: &eval_set,
                    labels: &eval_set.labels,
                    ckpt: Some(&l.ckpt),
                },
                &config,
            )?;
            let provenance = Provenance::new("finetune", config.seed, &(&config, target));
            let out = out.clone().unwrap_or_else(|| paths.root.join(format!("target-finetuned-{target}.ckpt")));
            save_model(&out, &tuned, Some(&provenance))?;
            save_report(&paths.report(&format!("finetune-{target}")), &provenance, &report)?;
            print_json(&report);
        }
        Command::Serve { port, host, limit } => {
            let l = load_all(&paths)?;
            let mut wb = Workbench::new(l.model, l.ckpt, l.data, paths.root.clone());
            wb.report_limit = *limit;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(async {
                let listener = tokio::net::TcpListener::bind((host.as_str(), *port)).await?;
                println!("listening on http://{}", listener.local_addr()?);
                serve(listener, Arc::new(wb), async {
                    let _ = tokio::signal::ctrl_c().await;
                })
                .await
            })?;
        }
        Command::Export { out, images } => {
            let data = load_dataset(&paths.dataset)?;
            export_annotations(&data, out)?;
            let images = images.clone().unwrap_or_else(|| out.with_extension("dump"));
            export_images(&data, &images)?;
            println!("wrote {} records to {} and {}", data.len(), out.display(), images.display());
        }
        Command::Import { annotations, images, out } => {
            let file = read_annotations(annotations)?;
            file.validate()?;
            let tensors = read_images_for(&file, images)?;
            let data = file.into_dataset(tensors)?;
            let out = out.clone().unwrap_or(paths.dataset.clone());
            let hash = csae_workbench::provenance::sha256_hex(&std::fs::read(annotations).map_err(WorkbenchError::io(annotations))?);
            save_dataset(&out, &data, &Provenance::new("import", cli.seed.unwrap_or(0), &hash))?;
            println!("imported {} records into {}", data.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::FAILURE
        }
    }
}
