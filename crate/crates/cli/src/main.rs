use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use frozenseg::eval::evaluate_split;
use frozenseg::model::{count_params, load_checkpoint_with_meta, save_checkpoint_with_meta, ConfigMap, MaskHead, MaskHeadConfig};
use frozenseg::synth::{read_dataset, read_scene, write_dataset, DetectorConfig, FrozenDetector, SceneSpec};
use frozenseg::tensor::gradcheck::op_suite;
use frozenseg::tensor::io::{self, DType};
use frozenseg::tensor::Tensor;
use frozenseg::train::{curve_csv, grad_check_fixture, loss_grad_check, prepare_samples, train, TrainConfig};

#[derive(Parser)]
#[command(name = "frozenseg", version, about = "Instance-mask head on top of a frozen detector")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset
    GenData {
        /// First scene seed [default: $MFD_SEED or 0]
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// Image size as HxW
        #[arg(long, default_value = "128x128", value_parser = parse_size)]
        size: (usize, usize),
        #[arg(long, default_value_t = 3)]
        max_instances: usize,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a mask head and save a checkpoint
    Train {
        #[command(flatten)]
        model: ModelArgs,
        /// Dataset directory written by gen-data
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint path
        #[arg(long)]
        out: PathBuf,
        /// Loss curve CSV (step,loss,lr)
        #[arg(long)]
        curve: Option<PathBuf>,
        #[arg(long)]
        steps: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        /// Training seed [default: $MFD_SEED or 0]
        #[arg(long)]
        seed: Option<u64>,
        /// Print the loss every N steps (0 = never)
        #[arg(long, default_value_t = 50)]
        log_every: usize,
    },
    /// Mask AP and mean matched IoU of a checkpoint on a dataset
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Also write the report as CSV
        #[arg(long)]
        csv: Option<PathBuf>,
        /// Box IoU needed to pair a query with ground truth for mean IoU
        #[arg(long, default_value_t = 0.5)]
        iou_threshold: f64,
    },
    /// Segment one scene and write per-instance probability masks
    Infer {
        #[arg(long)]
        checkpoint: PathBuf,
        /// Scene directory
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print parameter counts per module
    CountParams {
        #[command(flatten)]
        model: ModelArgs,
    },
    /// Finite-difference checks of every tape operation and of the training loss
    GradCheck {
        #[arg(long, default_value_t = 10)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-5)]
        eps: f64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Write each instance probability map of one scene as a PGM image
    DumpMaps {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        scene: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the default configuration file with key descriptions
    PrintConfig {
        #[command(flatten)]
        model: ModelArgs,
    },
}

/// Model, training and detector settings: file first, then flags.
#[derive(Args, Clone, Default)]
struct ModelArgs {
    /// `key = value` configuration file
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key (repeatable)
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    d: Option<usize>,
    #[arg(long)]
    img_enc: Option<String>,
    #[arg(long)]
    img_depth: Option<usize>,
    #[arg(long)]
    box_enc: Option<String>,
    #[arg(long)]
    box_depth: Option<usize>,
    #[arg(long)]
    d_mapper: Option<usize>,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or("expected HxW")?;
    let h = h.trim().parse().map_err(|_| format!("bad height `{h}`"))?;
    let w = w.trim().parse().map_err(|_| format!("bad width `{w}`"))?;
    Ok((h, w))
}

enum Failure {
    Usage(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

impl From<frozenseg::Error> for Failure {
    fn from(e: frozenseg::Error) -> Self {
        match e {
            frozenseg::Error::Config(_) | frozenseg::Error::InvalidSpec(_) => Failure::Usage(e.to_string()),
            e => Failure::Runtime(e.into()),
        }
    }
}

fn default_seed() -> Result<u64, Failure> {
    match std::env::var("MFD_SEED") {
        Ok(v) => v
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("MFD_SEED must be an unsigned integer, got `{v}`"))),
        Err(_) => Ok(0),
    }
}

const DETECTOR_SEED: &str = "detector_seed";
const DETECTOR_QUERIES: &str = "detector_queries";
const BOX_NOISE: &str = "box_noise";
const NUM_CLASSES: &str = "num_classes";

struct Setup {
    head: MaskHeadConfig,
    train: TrainConfig,
    detector_seed: u64,
    detector: DetectorConfig,
}

impl Setup {
    fn from_args(args: &ModelArgs, seed: u64) -> Result<Setup, Failure> {
        let mut map = match &args.config {
            Some(p) => {
                let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
                ConfigMap::parse(&text)?
            }
            None => ConfigMap::default(),
        };
        let flags = [
            ("d", args.d.map(|v| v.to_string())),
            ("img_enc", args.img_enc.clone()),
            ("img_depth", args.img_depth.map(|v| v.to_string())),
            ("box_enc", args.box_enc.clone()),
            ("box_depth", args.box_depth.map(|v| v.to_string())),
            ("d_mapper", args.d_mapper.map(|v| v.to_string())),
        ];
        for (k, v) in flags {
            if let Some(v) = v {
                map.set(k, v);
            }
        }
        for kv in &args.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            map.set(k.trim(), v.trim());
        }
        let mut d = 128;
        map.take_into("d", &mut d)?;
        let mut head = MaskHeadConfig::for_width(d);
        head.apply(&mut map)?;
        let mut train = TrainConfig { seed, ..Default::default() };
        train.apply(&mut map)?;
        let mut detector_seed = 0;
        let mut detector = DetectorConfig::default();
        map.take_into(DETECTOR_SEED, &mut detector_seed)?;
        map.take_into(DETECTOR_QUERIES, &mut detector.n_queries)?;
        map.take_into(BOX_NOISE, &mut detector.box_noise)?;
        map.take_into(NUM_CLASSES, &mut detector.num_classes)?;
        map.finish()?;
        head.validate()?;
        train.validate()?;
        detector.d = head.d;
        detector.enc_layer_index = head.enc_layer_index;
        Ok(Setup {
            head,
            train,
            detector_seed,
            detector,
        })
    }

    fn meta(&self) -> Vec<(String, String)> {
        vec![
            (DETECTOR_SEED.into(), self.detector_seed.to_string()),
            (DETECTOR_QUERIES.into(), self.detector.n_queries.to_string()),
            (BOX_NOISE.into(), self.detector.box_noise.to_string()),
            (NUM_CLASSES.into(), self.detector.num_classes.to_string()),
        ]
    }
}

/// Head plus the detector it was trained against.
fn load(path: &Path) -> Result<(MaskHead, FrozenDetector), Failure> {
    let (head, mut meta) = load_checkpoint_with_meta(path).map_err(|e| Failure::Runtime(anyhow::Error::new(e).context(format!("loading {}", path.display()))))?;
    let mut seed = 0;
    let mut cfg = DetectorConfig {
        d: head.cfg.d,
        enc_layer_index: head.cfg.enc_layer_index,
        ..Default::default()
    };
    let runtime = |e: frozenseg::Error| Failure::Runtime(e.into());
    meta.take_into(DETECTOR_SEED, &mut seed).map_err(runtime)?;
    meta.take_into(DETECTOR_QUERIES, &mut cfg.n_queries).map_err(runtime)?;
    meta.take_into(BOX_NOISE, &mut cfg.box_noise).map_err(runtime)?;
    meta.take_into(NUM_CLASSES, &mut cfg.num_classes).map_err(runtime)?;
    let det = FrozenDetector::new(seed, cfg).map_err(runtime)?;
    Ok((head, det))
}

fn format_count(n: usize) -> String {
    format!("{n:>10}  ({:.2} M)", n as f64 / 1e6)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::GenData {
            seed,
            count,
            size,
            max_instances,
            classes,
            out,
        } => {
            let seed = match seed {
                Some(s) => s,
                None => default_seed()?,
            };
            let spec = SceneSpec {
                h: size.0,
                w: size.1,
                num_classes: classes,
                max_instances,
            };
            spec.validate()?;
            let dirs = write_dataset(&out, seed, count, &spec).map_err(|e| Failure::Runtime(e.into()))?;
            println!("wrote {} scenes to {}", dirs.len(), out.display());
        }
        Command::Train {
            model,
            data,
            out,
            curve,
            steps,
            batch_size,
            seed,
            log_every,
        } => {
            let mut setup = Setup::from_args(&model, default_seed()?)?;
            if let Some(s) = seed {
                setup.train.seed = s;
            }
            if let Some(s) = steps {
                setup.train.steps = s;
            }
            if let Some(b) = batch_size {
                setup.train.batch_size = b;
            }
            setup.train.validate()?;
            let scenes = read_dataset(&data).with_context(|| format!("reading dataset {}", data.display()))?;
            let detector = FrozenDetector::new(setup.detector_seed, setup.detector).map_err(|e| Failure::Runtime(e.into()))?;
            let before = detector.checksum();
            let samples = prepare_samples(scenes, &detector, setup.head.n_queries).map_err(|e| Failure::Runtime(e.into()))?;
            let mut head = MaskHead::new(setup.head.clone(), setup.train.seed).map_err(|e| Failure::Runtime(e.into()))?;
            println!(
                "training {} parameters on {} scenes for {} steps",
                head.num_params(),
                samples.len(),
                setup.train.steps
            );
            let t0 = Instant::now();
            let records = train(&mut head, &samples, &setup.train, |r| {
                if log_every > 0 && (r.step + 1) % log_every == 0 {
                    println!("step {:>6}  loss {:.5}  lr {:.2e}  {:.0?}", r.step + 1, r.loss, r.lr, t0.elapsed());
                }
            })
            .map_err(|e| Failure::Runtime(e.into()))?;
            if detector.checksum() != before {
                return Err(Failure::Runtime(anyhow::anyhow!("detector weights changed during training")));
            }
            save_checkpoint_with_meta(&out, &head, &setup.meta()).with_context(|| format!("writing {}", out.display()))?;
            if let Some(p) = curve {
                fs::write(&p, curve_csv(&records)).with_context(|| format!("writing {}", p.display()))?;
            }
            println!("detector checksum unchanged: {before}");
            println!("saved {}", out.display());
        }
        Command::Eval {
            checkpoint,
            data,
            csv,
            iou_threshold,
        } => {
            let (head, detector) = load(&checkpoint)?;
            let scenes = read_dataset(&data).with_context(|| format!("reading dataset {}", data.display()))?;
            let s = evaluate_split(&head, &detector, &scenes, detector.cfg.num_classes, iou_threshold).map_err(|e| Failure::Runtime(e.into()))?;
            print!("{}", s.report);
            println!("mean matched mask IoU  {:.4}  ({} of {} instances matched)", s.mean_iou, s.matched, s.gt_instances);
            if let Some(p) = csv {
                let mut text = s.report.to_csv();
                text.push_str(&format!("mean_iou,{:.4}\n", s.mean_iou));
                fs::write(&p, text).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        Command::Infer { checkpoint, scene, out } => {
            let (head, detector) = load(&checkpoint)?;
            let preds = segment_scene(&head, &detector, &scene)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            let mut table = String::from("instance,query,label,class_score,iou_pred,score,x0,y0,x1,y1\n");
            for (k, p) in preds.iter().enumerate() {
                io::save(out.join(format!("instance_{k:03}.mfdt")), &p.mask, DType::F32).map_err(|e| Failure::Runtime(e.into()))?;
                let iou = p.iou_pred.map_or("n/a".to_string(), |v| format!("{v:.6}"));
                table.push_str(&format!(
                    "{k},{},{},{:.6},{iou},{:.6},{:.2},{:.2},{:.2},{:.2}\n",
                    p.query, p.label, p.class_score, p.score, p.bbox.x0, p.bbox.y0, p.bbox.x1, p.bbox.y1
                ));
            }
            fs::write(out.join("instances.csv"), table).context("writing instances.csv")?;
            println!("wrote {} instance masks to {}", preds.len(), out.display());
        }
        Command::DumpMaps { checkpoint, scene, out } => {
            let (head, detector) = load(&checkpoint)?;
            let preds = segment_scene(&head, &detector, &scene)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            for (k, p) in preds.iter().enumerate() {
                let path = out.join(format!("instance_{k:03}.pgm"));
                fs::write(&path, pgm(&p.mask)).with_context(|| format!("writing {}", path.display()))?;
            }
            println!("wrote {} maps to {}", preds.len(), out.display());
        }
        Command::CountParams { model } => {
            let setup = Setup::from_args(&model, 0)?;
            let c = count_params(&setup.head);
            println!("module           params");
            for (name, n) in c.rows() {
                println!("{name:<12}{}", format_count(n));
                if name == "img_enc" && setup.head.img_blocks() > 0 {
                    println!("  per block {}", format_count(c.img_enc_block));
                }
                if name == "box_enc" && setup.head.box_blocks() > 0 {
                    println!("  per block {}", format_count(c.box_enc_block));
                }
            }
        }
        Command::GradCheck { seeds, eps, tol } => {
            let mut failed = 0;
            let mut checks = 0;
            let mut worst: f64 = 0.0;
            for seed in 0..seeds {
                for (name, r) in op_suite(seed, eps, tol).map_err(|e| Failure::Runtime(e.into()))? {
                    checks += 1;
                    worst = worst.max(r.max_rel_err);
                    if !r.pass {
                        failed += 1;
                        println!("FAIL {name} seed {seed}: max rel err {:.3e}", r.max_rel_err);
                    }
                }
                let (mut head, sample) = grad_check_fixture(seed).map_err(|e| Failure::Runtime(e.into()))?;
                let cfg = TrainConfig::default();
                for sampling in [false, true] {
                    let r = loss_grad_check(&mut head, &sample, &cfg, sampling, 2, eps, tol, seed).map_err(|e| Failure::Runtime(e.into()))?;
                    checks += 1;
                    worst = worst.max(r.max_rel_err);
                    if !r.pass {
                        failed += 1;
                        println!("FAIL training loss (sampling {sampling}) seed {seed}: max rel err {:.3e}", r.max_rel_err);
                    }
                }
            }
            println!("{checks} checks over {seeds} seeds, {failed} failed, worst relative error {worst:.3e}");
            if failed > 0 {
                return Err(Failure::Runtime(anyhow::anyhow!("{failed} gradient checks failed")));
            }
        }
        Command::PrintConfig { model } => {
            let setup = Setup::from_args(&model, default_seed()?)?;
            let mut text = setup.head.documented_text();
            let t = &setup.train;
            let extra = [
                ("training steps", "steps", t.steps.to_string()),
                ("scenes per step", "batch_size", t.batch_size.to_string()),
                ("base learning rate", "lr", t.lr.to_string()),
                ("decoupled weight decay", "weight_decay", t.weight_decay.to_string()),
                ("points per mask", "n_points", t.points.n_points.to_string()),
                ("candidate oversampling factor", "oversample", t.points.oversample.to_string()),
                ("fraction of points chosen by uncertainty", "importance_ratio", t.points.importance_ratio.to_string()),
                ("point-sampled instead of dense mask loss", "use_sampling", t.use_sampling.to_string()),
                ("weight of the IoU prediction loss", "score_weight", t.score_weight.to_string()),
                ("box IoU for pairing queries with ground truth", "iou_threshold", t.iou_threshold.to_string()),
                ("training seed", "seed", t.seed.to_string()),
                ("frozen detector weight seed", DETECTOR_SEED, setup.detector_seed.to_string()),
                ("detector queries per image", DETECTOR_QUERIES, setup.detector.n_queries.to_string()),
                ("detector box noise", BOX_NOISE, setup.detector.box_noise.to_string()),
                ("object classes", NUM_CLASSES, setup.detector.num_classes.to_string()),
            ];
            for (doc, k, v) in extra {
                text.push_str(&format!("# {doc}\n{k} = {v}\n"));
            }
            // a closed pipe (`| head`) is not an error
            let _ = std::io::stdout().write_all(text.as_bytes());
        }
    }
    Ok(())
}

fn segment_scene(head: &MaskHead, detector: &FrozenDetector, dir: &Path) -> Result<Vec<frozenseg::model::InstancePrediction>, Failure> {
    let scene = read_scene(dir).with_context(|| format!("reading scene {}", dir.display()))?;
    let det = detector.run(&scene).map_err(|e| Failure::Runtime(e.into()))?;
    head.segment(&det).map_err(|e| Failure::Runtime(e.into()))
}

/// 8-bit binary PGM of an `[H, W]` probability map.
fn pgm(mask: &Tensor) -> Vec<u8> {
    let (h, w) = (mask.shape()[0], mask.shape()[1]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(mask.data().iter().map(|p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(2) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
