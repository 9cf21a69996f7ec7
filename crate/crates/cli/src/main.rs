use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use scendbg_core::detector::{Detector, ExternalDetections, FaultModelConfig, SyntheticDetector};
use scendbg_core::dsl::{emit, feature_schema, parse, DslError, ScenarioProgram};
use scendbg_core::evaluator::{label_vector, EvaluationConfig, Label};
use scendbg_core::pipeline::{
    augment, extract, labels_jsonl, read_labels_jsonl, read_rule, run, summary_markdown, to_pretty_json,
    Context, PipelineConfig, PipelineError, PipelineReport,
};
use scendbg_core::refine::{feature_space_coverage, splice, validate, ValidationConfig};
use scendbg_core::rules::{rule_order, Provenance, Target};
use scendbg_core::sampler::{from_json, to_json, Sampler, SamplerConfig};
use scendbg_core::world::realize;

#[derive(Parser)]
#[command(
    name = "scendbg",
    version,
    about = "Debug object detectors with scenario programs"
)]
struct Cli {
    /// Worker threads (defaults to the number of cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SeedArg {
    /// Random seed; falls back to $SCENDBG_SEED, then to 0.
    #[arg(long)]
    seed: Option<u64>,
}

impl SeedArg {
    fn resolve(&self) -> Result<Option<u64>, PipelineError> {
        if let Some(s) = self.seed {
            return Ok(Some(s));
        }
        match std::env::var("SCENDBG_SEED") {
            Ok(v) => v
                .trim()
                .parse()
                .map(Some)
                .map_err(|_| PipelineError::Config(format!("SCENDBG_SEED is not an integer: `{v}`"))),
            Err(_) => Ok(None),
        }
    }

    fn value(&self) -> Result<u64, PipelineError> {
        Ok(self.resolve()?.unwrap_or(0))
    }
}

#[derive(Args)]
struct DetectorArgs {
    /// Synthetic detector fault model (TOML or JSON).
    #[arg(long, conflicts_with = "external")]
    detector: Option<PathBuf>,
    /// Recorded detections, one JSON object per line keyed by seed index.
    #[arg(long)]
    external: Option<PathBuf>,
    #[arg(long, default_value_t = 0.5)]
    iou_threshold: f64,
    #[arg(long, default_value_t = 0.8)]
    f1_threshold: f64,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario program and print its canonical form or feature schema.
    Parse {
        scenario: PathBuf,
        /// Print the feature schema as JSON instead of the program.
        #[arg(long)]
        schema: bool,
    },
    /// Draw feature vectors as JSON Lines.
    Sample {
        scenario: PathBuf,
        #[arg(short = 'n', long, default_value_t = 10)]
        count: usize,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long, default_value_t = 0)]
        first_index: u64,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Label feature vectors by running the detector on their scenes.
    Evaluate {
        scenario: PathBuf,
        /// Vectors written by `sample`.
        samples: PathBuf,
        #[command(flatten)]
        detector: DetectorArgs,
        #[arg(short, long)]
        output: Option<PathBuf>,
        /// Also write each scene, its ground truth and detections here.
        #[arg(long)]
        dump_scenes: Option<PathBuf>,
    },
    /// Extract rules of one method from labelled data.
    Extract {
        scenario: PathBuf,
        /// Training labels written by `evaluate` or `run`.
        labels: PathBuf,
        /// dt-bb, dt-wb, anchor-bb or anchor-wb.
        #[arg(long)]
        method: String,
        /// correct or incorrect.
        #[arg(long, default_value = "incorrect")]
        target: String,
        /// Held-out labels used to measure and rank the rules.
        #[arg(long)]
        test: Option<PathBuf>,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Splice a rule into a program as requires.
    Refine {
        scenario: PathBuf,
        rule: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Sample a refined program and report its label ratios.
    Validate {
        scenario: PathBuf,
        rule: PathBuf,
        #[command(flatten)]
        detector: DetectorArgs,
        #[arg(short = 'n', long, default_value_t = 500)]
        count: usize,
        #[command(flatten)]
        seed: SeedArg,
        /// Write the cumulative incorrect ratio series here.
        #[arg(long)]
        csv: Option<PathBuf>,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Estimate the share of the program's feature space a rule covers.
    Coverage {
        scenario: PathBuf,
        rule: PathBuf,
        #[arg(short = 'n', long, default_value_t = 10_000)]
        count: usize,
        #[command(flatten)]
        seed: SeedArg,
    },
    /// Render a summary.json as Markdown tables.
    Report { summary: PathBuf },
    /// Run the full pipeline from a TOML config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        seed: SeedArg,
        #[arg(long)]
        output_dir: Option<PathBuf>,
    },
}

fn read(path: &Path) -> Result<String, PipelineError> {
    fs::read_to_string(path).map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))
}

fn program(path: &Path) -> Result<ScenarioProgram, PipelineError> {
    let text = read(path)?;
    parse(&text).map_err(|e| {
        let detail = match &e {
            DslError::Syntax { line, column, .. } => format!("{}:{line}:{column}: {e}", path.display()),
            DslError::Validation { .. } => format!("{}: {e}", path.display()),
        };
        PipelineError::Config(detail)
    })
}

fn emit_output(output: Option<&Path>, text: &str) -> Result<(), PipelineError> {
    match output {
        Some(p) => fs::write(p, text).map_err(|e| PipelineError::Io(format!("{}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn detector(args: &DetectorArgs, p: &ScenarioProgram) -> Result<Box<dyn Detector>, PipelineError> {
    Ok(match (&args.detector, &args.external) {
        (Some(path), _) => Box::new(SyntheticDetector::new(
            FaultModelConfig::load(path)?,
            &feature_schema(p),
        )?),
        (None, Some(path)) => Box::new(ExternalDetections::load(path)?),
        (None, None) => {
            return Err(PipelineError::Config("pass --detector or --external".into()));
        }
    })
}

fn evaluation(args: &DetectorArgs) -> EvaluationConfig {
    EvaluationConfig {
        iou_threshold: args.iou_threshold,
        f1_threshold: args.f1_threshold,
    }
}

fn parse_target(s: &str) -> Result<Label, PipelineError> {
    match s {
        "correct" => Ok(Label::Correct),
        "incorrect" => Ok(Label::Incorrect),
        _ => Err(PipelineError::Config(format!("unknown target `{s}`"))),
    }
}

fn execute(cli: Cli) -> Result<(), PipelineError> {
    match cli.command {
        Command::Parse { scenario, schema } => {
            let p = program(&scenario)?;
            if schema {
                print!("{}", to_pretty_json(&feature_schema(&p).features));
            } else {
                print!("{}", emit(&p));
            }
        }
        Command::Sample {
            scenario,
            count,
            seed,
            first_index,
            output,
        } => {
            let p = program(&scenario)?;
            let sampler = Sampler::new(&p);
            let cfg = SamplerConfig {
                seed: seed.value()?,
                first_index,
                ..SamplerConfig::default()
            };
            let mut text = String::new();
            for f in sampler.sample(count, &cfg)? {
                text.push_str(&serde_json::Value::Object(to_json(sampler.schema(), &f)).to_string());
                text.push('\n');
            }
            emit_output(output.as_deref(), &text)?;
        }
        Command::Evaluate {
            scenario,
            samples,
            detector: dargs,
            output,
            dump_scenes,
        } => {
            let p = program(&scenario)?;
            let det = detector(&dargs, &p)?;
            let ctx = Context::new(p, det, evaluation(&dargs));
            let schema = ctx.schema().clone();
            let mut vectors = Vec::new();
            for (i, line) in read(&samples)?
                .lines()
                .enumerate()
                .filter(|(_, l)| !l.trim().is_empty())
            {
                let bad =
                    |m: String| PipelineError::Config(format!("{} line {}: {m}", samples.display(), i + 1));
                let v: serde_json::Value = serde_json::from_str(line).map_err(|e| bad(e.to_string()))?;
                let m = v.as_object().ok_or_else(|| bad("expected an object".into()))?;
                vectors.push(ctx.sampler.derive_features(&from_json(&schema, m).map_err(bad)?));
            }
            if let Some(dir) = &dump_scenes {
                fs::create_dir_all(dir).map_err(|e| PipelineError::Io(format!("{}: {e}", dir.display())))?;
                for f in &vectors {
                    let scene = realize(&schema, f, &ctx.cone);
                    let out = ctx.detector.detect(&scene, f)?;
                    let dump = json!({
                        "seedIndex": f.seed_index,
                        "scene": scene,
                        "groundTruth": scene.ground_truth_boxes(),
                        "detections": out.detections,
                    });
                    let path = dir.join(format!("scene_{:06}.json", f.seed_index));
                    fs::write(&path, to_pretty_json(&dump))
                        .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
                }
            }
            let labelled = vectors
                .into_iter()
                .map(|f| label_vector(&schema, &ctx.cone, ctx.detector.as_ref(), f, &ctx.evaluation))
                .collect::<Result<Vec<_>, _>>()?;
            emit_output(output.as_deref(), &labels_jsonl(&schema, &labelled))?;
        }
        Command::Extract {
            scenario,
            labels,
            method,
            target,
            test,
            seed,
            output,
        } => {
            let p = program(&scenario)?;
            let provenance = Provenance::parse(&method)
                .ok_or_else(|| PipelineError::Config(format!("unknown method `{method}`")))?;
            let label = parse_target(&target)?;
            let mut cfg = PipelineConfig::default();
            if let Some(s) = seed.resolve()? {
                cfg.seed = s;
            }
            let schema = feature_schema(&p);
            let mut train = read_labels_jsonl(&schema, &read(&labels)?)?;
            let mut held_out = match &test {
                Some(t) => read_labels_jsonl(&schema, &read(t)?)?,
                None => train.clone(),
            };
            let patterns = if provenance.view == scendbg_core::rules::View::WhiteBox {
                Some(augment(&mut train, &mut held_out, &cfg)?)
            } else {
                None
            };
            // Extraction only needs the sampler; labels are already known.
            let ctx = Context::new(p, Box::new(NoDetector), EvaluationConfig::default());
            let ex = extract(&ctx, &train, provenance, label, &cfg)?;
            let mut rules = ex
                .rules
                .iter()
                .map(|r| r.measure(&schema, &held_out))
                .collect::<Result<Vec<_>, _>>()
                .map_err(|e| PipelineError::Method(e.to_string()))?;
            rules.sort_by(rule_order);
            let mut envelope = json!({
                "kind": "rules",
                "method": provenance.method_name(),
                "target": Target::from(label),
                "rules": rules,
                "best": rules.first(),
            });
            if let Some(p) = patterns {
                envelope["patterns"] = p.to_json();
            }
            emit_output(output.as_deref(), &to_pretty_json(&envelope))?;
        }
        Command::Refine {
            scenario,
            rule,
            output,
        } => {
            let p = program(&scenario)?;
            let r = read_rule(&read(&rule)?)?;
            let rp = splice(&p, &r).map_err(|e| PipelineError::Method(e.to_string()))?;
            emit_output(output.as_deref(), &rp.text())?;
        }
        Command::Validate {
            scenario,
            rule,
            detector: dargs,
            count,
            seed,
            csv,
            output,
        } => {
            let p = program(&scenario)?;
            let r = read_rule(&read(&rule)?)?;
            let det = detector(&dargs, &p)?;
            let rp = splice(&p, &r).map_err(|e| PipelineError::Method(e.to_string()))?;
            let cfg = ValidationConfig {
                n_samples: count,
                seed: seed.value()?,
                evaluation: evaluation(&dargs),
                ..ValidationConfig::default()
            };
            let report = validate(&rp, det.as_ref(), &Default::default(), &cfg).map_err(|e| match e {
                scendbg_core::refine::RefineError::Unsatisfiable(e) => {
                    PipelineError::Unsatisfiable(e.to_string())
                }
                other => PipelineError::Method(other.to_string()),
            })?;
            if let Some(path) = csv {
                fs::write(&path, report.to_csv())
                    .map_err(|e| PipelineError::Io(format!("{}: {e}", path.display())))?;
            }
            emit_output(output.as_deref(), &to_pretty_json(&report))?;
        }
        Command::Coverage {
            scenario,
            rule,
            count,
            seed,
        } => {
            let p = program(&scenario)?;
            let r = read_rule(&read(&rule)?)?;
            let c = feature_space_coverage(&p, &r, count, seed.value()?).map_err(|e| match e {
                scendbg_core::refine::RefineError::Unsatisfiable(e) => {
                    PipelineError::Unsatisfiable(e.to_string())
                }
                other => PipelineError::Config(other.to_string()),
            })?;
            println!("{:.4} ± {:.4}", c.estimate, c.std_error);
        }
        Command::Report { summary } => {
            let r: PipelineReport = serde_json::from_str(&read(&summary)?)
                .map_err(|e| PipelineError::Config(format!("{}: {e}", summary.display())))?;
            print!("{}", summary_markdown(&r));
        }
        Command::Run {
            config,
            seed,
            output_dir,
        } => {
            let mut cfg = PipelineConfig::load(&config)?;
            if let Some(s) = seed.resolve()? {
                cfg.seed = s;
            }
            if let Some(dir) = output_dir {
                cfg.output_dir = dir;
            }
            let report = run(&cfg)?;
            print!("{}", summary_markdown(&report));
        }
    }
    Ok(())
}

/// Stand-in detector for commands that never render scenes.
struct NoDetector;

impl Detector for NoDetector {
    fn detect(
        &self,
        _: &scendbg_core::world::Scene,
        f: &scendbg_core::sampler::FeatureVector,
    ) -> Result<scendbg_core::detector::DetectorOutput, scendbg_core::detector::DetectorError> {
        Err(scendbg_core::detector::DetectorError::MissingSample(f.seed_index))
    }

    fn activation_dim(&self) -> Option<usize> {
        None
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.jobs {
        if let Err(e) = rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
        {
            eprintln!("scendbg: cannot set up {n} workers: {e}");
            return ExitCode::from(2);
        }
    }
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("scendbg: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
