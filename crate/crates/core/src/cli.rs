//! Command-line front end: `synth`, `train`, `eval` and `bench`.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::detector::write_results_csv;
use crate::error::{Error, Result};
use crate::eval::{
    evaluate_manifest, run_continual, train_continual, write_outcome, write_report, write_traces,
    BenchConfig, FmNormalization,
};
use crate::memory_bank::RouteMode;
use crate::synth::{generate, manifest_path, SynthSpec};
use crate::tensor_store::{load_bank, load_manifest, save_bank};

pub const EXIT_OK: i32 = 0;
pub const EXIT_VALIDATION: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "continual-anomaly",
    version,
    about = "Continual task-incremental anomaly detection"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic benchmark and its manifest.
    Synth(SynthArgs),
    /// Train every task in order and save the memory bank.
    Train(TrainArgs),
    /// Score a manifest's test items against a saved bank.
    Eval(EvalArgs),
    /// Train and evaluate after every task; write report and matrices.
    Bench(TrainArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 5)]
    pub tasks: usize,
    #[arg(long, default_value_t = 50)]
    pub train_images: usize,
    #[arg(long, default_value_t = 20)]
    pub test_normal: usize,
    #[arg(long, default_value_t = 20)]
    pub test_anomalous: usize,
    #[arg(long, default_value_t = 64)]
    pub image_size: usize,
    #[arg(long, default_value_t = 8)]
    pub grid: usize,
    #[arg(long, default_value_t = 2)]
    pub regions: usize,
    #[arg(long, default_value_t = 32)]
    pub dim: usize,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub anomaly_magnitude: Option<f64>,
    #[arg(long)]
    pub anomaly_block: Option<usize>,
}

impl SynthArgs {
    pub fn spec(&self) -> SynthSpec {
        let d = SynthSpec::default();
        SynthSpec {
            tasks: self.tasks,
            train_images: self.train_images,
            test_normal: self.test_normal,
            test_anomalous: self.test_anomalous,
            image_h: self.image_size,
            image_w: self.image_size,
            grid_h: self.grid,
            grid_w: self.grid,
            regions: self.regions,
            dim: self.dim,
            noise: self.noise.unwrap_or(d.noise),
            anomaly_magnitude: self.anomaly_magnitude.unwrap_or(d.anomaly_magnitude),
            anomaly_block: self.anomaly_block.unwrap_or(d.anomaly_block),
            seed: self.seed,
            ..d
        }
    }
}

/// Flags shared by every subcommand that trains or scores.
#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub route_mode: Option<RouteMode>,
    #[arg(long)]
    pub route_with_learnable_key: bool,
    #[arg(long)]
    pub fm_normalization: Option<FmNormalization>,
    #[arg(long)]
    pub sigma: Option<f64>,
    #[arg(long)]
    pub fpr_cap: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub prompt_len: Option<usize>,
    #[arg(long)]
    pub key_ratio: Option<f64>,
    #[arg(long)]
    pub coreset_ratio: Option<f64>,
    #[arg(long)]
    pub max_grad_norm: Option<f64>,
    #[arg(long)]
    pub batch_wide_contrast: bool,
    #[arg(long)]
    pub exclude_self_pairs: bool,
    #[arg(long)]
    pub freeze_fusion: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub run: RunArgs,
    /// Bank directory; defaults to `<out>/bank`.
    #[arg(long)]
    pub bank: Option<PathBuf>,
}

impl RunArgs {
    fn apply(&self, cfg: &mut BenchConfig) {
        cfg.train.seed = self.seed;
        if let Some(m) = self.route_mode {
            cfg.route_mode = m;
        }
        cfg.route_with_learnable_key |= self.route_with_learnable_key;
        if let Some(n) = self.fm_normalization {
            cfg.fm_normalization = n;
        }
        if let Some(s) = self.sigma {
            cfg.sigma = s;
        }
        if let Some(c) = self.fpr_cap {
            cfg.fpr_cap = c;
        }
    }
}

impl TrainArgs {
    pub fn config(&self) -> BenchConfig {
        let mut cfg = BenchConfig::default();
        self.run.apply(&mut cfg);
        let t = &mut cfg.train;
        macro_rules! set {
            ($($flag:ident => $field:ident),*) => {
                $(if let Some(v) = self.$flag { t.$field = v; })*
            };
        }
        set!(epochs => epochs, lr => learning_rate, tau => tau, lambda => lambda,
            prompt_len => prompt_length, key_ratio => key_ratio,
            coreset_ratio => coreset_ratio, max_grad_norm => max_grad_norm);
        t.batch_wide_contrast |= self.batch_wide_contrast;
        t.exclude_self_pairs |= self.exclude_self_pairs;
        t.freeze_fusion |= self.freeze_fusion;
        cfg
    }
}

fn run(cli: Cli) -> Result<PathBuf> {
    match cli.command {
        Command::Synth(a) => {
            generate(&a.spec(), &a.out)?;
            Ok(manifest_path(&a.out))
        }
        Command::Train(a) => {
            let cfg = a.config();
            let manifest = load_manifest(&a.run.manifest)?;
            let (bank, traces) = train_continual(&manifest, &cfg)?;
            let bank_dir = a.run.out.join("bank");
            save_bank(&bank, &bank_dir)?;
            write_traces(&a.run.out, &traces)?;
            Ok(bank_dir)
        }
        Command::Eval(a) => {
            let mut cfg = BenchConfig::default();
            a.run.apply(&mut cfg);
            let manifest = load_manifest(&a.run.manifest)?;
            let bank_dir = a.bank.clone().unwrap_or_else(|| a.run.out.join("bank"));
            let mut bank = load_bank(&bank_dir)?;
            // CLI routing flags override what the bank was saved with
            let bc = bank.config_mut();
            if a.run.route_mode.is_some() {
                bc.route_mode = cfg.route_mode;
            }
            bc.route_with_learnable_key |= cfg.route_with_learnable_key;
            let (report, rows) = evaluate_manifest(&bank, &manifest, &cfg)?;
            write_report(&a.run.out, &report)?;
            write_results_csv(a.run.out.join("results.csv"), &rows)?;
            Ok(a.run.out.join("report.json"))
        }
        Command::Bench(a) => {
            let cfg = a.config();
            let manifest = load_manifest(&a.run.manifest)?;
            let outcome = run_continual(&manifest, &cfg)?;
            write_outcome(&a.run.out, &outcome)?;
            Ok(a.run.out.join("report.json"))
        }
    }
}

fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        EXIT_VALIDATION
    } else {
        EXIT_RUNTIME
    }
}

/// Parse `argv`, run the command and return the process exit code.
pub fn dispatch<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_VALIDATION } else { EXIT_OK };
        }
    };
    match run(cli) {
        Ok(path) => {
            print_path(&path);
            EXIT_OK
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn print_path(path: &Path) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{}", path.display());
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_flag_is_validation_exit() {
        assert_eq!(dispatch(["ca", "bench", "--bogus"]), EXIT_VALIDATION);
        assert_eq!(dispatch(["ca"]), EXIT_VALIDATION);
        assert_eq!(dispatch(["ca", "--help"]), EXIT_OK);
    }

    #[test]
    fn missing_manifest_is_validation_exit() {
        let dir = tempfile::tempdir().unwrap();
        let m = dir.path().join("nope.json");
        let out = dir.path().join("o");
        let code = dispatch([
            "ca",
            "train",
            "--manifest",
            m.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
        ]);
        assert_eq!(code, EXIT_VALIDATION);
    }

    #[test]
    fn flags_override_defaults() {
        let cli = Cli::try_parse_from([
            "ca",
            "bench",
            "--manifest",
            "m",
            "--out",
            "o",
            "--seed",
            "7",
            "--epochs",
            "3",
            "--lr",
            "0.1",
            "--tau",
            "0.5",
            "--lambda",
            "2",
            "--prompt-len",
            "0",
            "--key-ratio",
            "0.2",
            "--coreset-ratio",
            "0.3",
            "--route-mode",
            "sum_min_l2",
            "--fm-normalization",
            "task-scaled",
            "--sigma",
            "0",
        ])
        .unwrap();
        let Command::Bench(a) = cli.command else { panic!() };
        let c = a.config();
        assert_eq!((c.train.seed, c.train.epochs, c.train.prompt_length), (7, 3, 0));
        assert_eq!(
            (c.train.learning_rate, c.train.tau, c.train.lambda),
            (0.1, 0.5, 2.0)
        );
        assert_eq!(
            (c.train.key_ratio, c.train.coreset_ratio, c.sigma),
            (0.2, 0.3, 0.0)
        );
        assert_eq!(c.route_mode, RouteMode::SumMinL2);
        assert_eq!(c.fm_normalization, FmNormalization::TaskScaled);
    }

    #[test]
    fn bad_value_rejected() {
        assert!(Cli::try_parse_from([
            "ca",
            "bench",
            "--manifest",
            "m",
            "--out",
            "o",
            "--route-mode",
            "x"
        ])
        .is_err());
    }
}
