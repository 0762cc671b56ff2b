use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ttpose_cli::commands::{self, parse_variant, TtpRequest, VisRequest};
use ttpose_cli::config::RunConfig;
use ttpose_cli::exit_code;
use ttpose_core::ttp::{Reinit, Scenario};
use ttpose_core::Result;

/// Keypoint estimation with test-time personalization on a synthetic
/// articulated-figure benchmark.
#[derive(Parser)]
#[command(name = "ttpose", version)]
struct Cli {
    /// Run configuration (TOML, or JSON when the name ends in .json).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Global seed; falls back to the config file, then TTPK_SEED.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    data_dir: Option<PathBuf>,
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Print the fully resolved configuration and exit.
    #[arg(long, global = true)]
    print_config: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Render the synthetic dataset to disk.
    Gen(GenArgs),
    /// Train one variant jointly on the training subjects.
    Train(TrainArgs),
    /// Personalize a trained model on each test subject.
    Ttp(TtpArgs),
    /// Score every saved prediction file and write the report.
    Eval(EvalArgs),
    /// Draw keypoints, correspondences and the reconstruction of one frame.
    Vis(VisArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum OnOff {
    On,
    Off,
}

impl OnOff {
    fn get(self) -> bool {
        matches!(self, OnOff::On)
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum ScenarioArg {
    None,
    Online,
    Offline,
}

#[derive(Clone, Copy, ValueEnum)]
#[value(rename_all = "snake_case")]
enum ReinitArg {
    Never,
    PerSubject,
}

#[derive(Args)]
struct GenArgs {
    /// Replace a non-empty data directory.
    #[arg(long)]
    force: bool,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    train_frames: Option<usize>,
    #[arg(long)]
    test_frames: Option<usize>,
    /// Image side in pixels (also sets the model input size).
    #[arg(long)]
    image_size: Option<usize>,
    /// Labelled joints (also sets the model's supervised keypoints).
    #[arg(long)]
    k_sup: Option<usize>,
    #[arg(long)]
    k_self: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    /// baseline, feat_shared or transformer.
    #[arg(long)]
    variant: Option<String>,
    /// Continue from the variant's saved checkpoint.
    #[arg(long)]
    resume: bool,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Feature-pyramid term of the reconstruction loss.
    #[arg(long)]
    perceptual: Option<OnOff>,
    #[arg(long)]
    log_every: Option<usize>,
}

#[derive(Args)]
struct TtpArgs {
    #[arg(long, default_value = "transformer")]
    variant: String,
    /// `none` writes plain-inference predictions only.
    #[arg(long)]
    scenario: Option<ScenarioArg>,
    #[arg(long)]
    lr: Option<f64>,
    /// Update iterations per incoming frame.
    #[arg(long)]
    iters: Option<usize>,
    #[arg(long)]
    reinit: Option<ReinitArg>,
    #[arg(long)]
    perceptual: Option<OnOff>,
    /// Also sweep 1 to 4 update iterations per frame.
    #[arg(long)]
    ablate_iters: bool,
    /// Comma-separated video lengths for the offline pool-size sweep.
    #[arg(long, value_delimiter = ',')]
    video_length: Vec<usize>,
}

#[derive(Args)]
struct EvalArgs {
    /// Add a Savitzky-Golay smoothed column.
    #[arg(long)]
    smooth: bool,
    #[arg(long)]
    savgol_window: Option<usize>,
    #[arg(long)]
    savgol_poly: Option<usize>,
    #[arg(long)]
    curve_window: Option<usize>,
}

#[derive(Args)]
struct VisArgs {
    #[arg(long, default_value = "transformer")]
    variant: String,
    /// Test subject id (default: the first).
    #[arg(long)]
    subject: Option<usize>,
    #[arg(long, default_value_t = 0)]
    frame: usize,
    /// Draw correspondences whose affinity exceeds this.
    #[arg(long)]
    threshold: Option<f64>,
    /// Pixel magnification of the output image.
    #[arg(long, default_value_t = 4)]
    scale: usize,
}

fn set<T>(slot: &mut T, v: Option<T>) {
    if let Some(v) = v {
        *slot = v;
    }
}

fn resolve(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    set(&mut cfg.data_dir, cli.data_dir.clone());
    set(&mut cfg.out_dir, cli.out_dir.clone());
    match &cli.cmd {
        Cmd::Gen(a) => {
            set(&mut cfg.data.n_train, a.n_train);
            set(&mut cfg.data.n_test, a.n_test);
            set(&mut cfg.data.train_frames, a.train_frames);
            set(&mut cfg.data.test_frames, a.test_frames);
            set(&mut cfg.data.image_size, a.image_size);
            set(&mut cfg.model.image_size, a.image_size);
            set(&mut cfg.data.k_sup, a.k_sup);
            set(&mut cfg.model.k_sup, a.k_sup);
            set(&mut cfg.model.k_self, a.k_self);
        }
        Cmd::Train(a) => {
            if let Some(v) = &a.variant {
                cfg.train.variant = parse_variant(v)?;
            }
            set(&mut cfg.train.steps, a.steps);
            set(&mut cfg.train.lr, a.lr);
            set(&mut cfg.train.lambda, a.lambda);
            set(&mut cfg.train.batch_size, a.batch_size);
            set(&mut cfg.train.perceptual, a.perceptual.map(OnOff::get));
            set(&mut cfg.train.log_every, a.log_every);
        }
        Cmd::Ttp(a) => {
            parse_variant(&a.variant)?;
            match a.scenario {
                Some(ScenarioArg::Online) => cfg.ttp.scenario = Scenario::Online,
                Some(ScenarioArg::Offline) => cfg.ttp.scenario = Scenario::Offline,
                _ => {}
            }
            set(&mut cfg.ttp.lr, a.lr);
            set(&mut cfg.ttp.update_iters_per_frame, a.iters);
            set(
                &mut cfg.ttp.reinit,
                a.reinit.map(|r| match r {
                    ReinitArg::Never => Reinit::Never,
                    ReinitArg::PerSubject => Reinit::PerSubject,
                }),
            );
            set(&mut cfg.ttp.perceptual, a.perceptual.map(OnOff::get));
        }
        Cmd::Eval(a) => {
            cfg.eval.smooth |= a.smooth;
            set(&mut cfg.eval.savgol_window, a.savgol_window);
            set(&mut cfg.eval.savgol_poly, a.savgol_poly);
            set(&mut cfg.eval.curve_window, a.curve_window);
        }
        Cmd::Vis(a) => {
            parse_variant(&a.variant)?;
            set(&mut cfg.eval.vis_threshold, a.threshold);
        }
    }
    cfg.resolve_seed(cli.seed)?;
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = resolve(cli)?;
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return Ok(());
    }
    match &cli.cmd {
        Cmd::Gen(a) => commands::gen(&cfg, a.force).map(drop),
        Cmd::Train(a) => commands::train_cmd(&cfg, a.resume).map(drop),
        Cmd::Ttp(a) => {
            let req = TtpRequest {
                no_ttp: matches!(a.scenario, Some(ScenarioArg::None)),
                ablate_iters: a.ablate_iters,
                video_lengths: a.video_length.clone(),
            };
            commands::ttp_cmd(&cfg, parse_variant(&a.variant)?, &req).map(drop)
        }
        Cmd::Eval(_) => commands::eval_cmd(&cfg).map(drop),
        Cmd::Vis(a) => {
            let req = VisRequest {
                variant: parse_variant(&a.variant)?,
                subject: a.subject,
                frame: a.frame,
                scale: a.scale,
            };
            commands::vis_cmd(&cfg, &req).map(drop)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e) as u8)
        }
    }
}
