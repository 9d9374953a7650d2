use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use hair::checks::{run_suite, Suite};
use hair::config::RunConfig;
use hair::data::{derive_seed, load_image, read_manifest, save_image, Dataset};
use hair::degrade::{compose, gen_clean, parse_specs, DegradationSpec, Sample};
use hair::metrics::{composite_midpoints, format_db};
use hair::train::{
    evaluate, evaluate_degraded, extract_givs, load_checkpoint, restore_image, save_checkpoint, LogRow, Trainer,
};
use hair::{Error, HairModel};

/// Why a command stopped; each kind maps to one exit status.
#[derive(Debug)]
pub enum Failure {
    Lib(Error),
    /// A property check or training run that completed but did not succeed.
    Failed(String),
}

impl Failure {
    pub fn exit_code(&self) -> u8 {
        match self {
            Failure::Lib(Error::Config { .. }) => 2,
            Failure::Lib(
                Error::Io { .. }
                | Error::Image { .. }
                | Error::Csv { .. }
                | Error::CorruptCheckpoint(_)
                | Error::CheckpointVersion { .. }
                | Error::CheckpointShape { .. }
                | Error::MissingTensor(_),
            ) => 3,
            Failure::Lib(_) | Failure::Failed(_) => 1,
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Lib(e) => write!(f, "{e}"),
            Failure::Failed(msg) => f.write_str(msg),
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type Outcome = Result<(), Failure>;

/// Where evaluation samples come from.
#[derive(Args, Debug)]
#[group(skip)]
pub struct SampleSource {
    /// Manifest CSV (`id,source,spec,seed`), or a directory holding `manifest.csv`.
    #[arg(long, conflicts_with = "synthetic", required_unless_present = "synthetic")]
    data: Option<PathBuf>,
    /// Degradation spec such as `noise:sigma=25` or `haze:a=0.9,t=0.5+noise:sigma=15`,
    /// applied to procedural images. Repeat for several degradations.
    #[arg(long)]
    synthetic: Vec<String>,
    /// Procedural images per synthetic spec.
    #[arg(long, default_value_t = 20)]
    images: usize,
    /// Side length of procedural images.
    #[arg(long, default_value_t = 64)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl SampleSource {
    fn samples(&self) -> Result<Vec<Sample>, Error> {
        if let Some(path) = &self.data {
            let manifest = if path.is_dir() { path.join("manifest.csv") } else { path.clone() };
            let base = manifest.parent().unwrap_or(Path::new("."));
            return read_manifest(&manifest)?.iter().map(|e| e.load(base, self.size)).collect();
        }
        let mut out = Vec::new();
        for (j, text) in self.synthetic.iter().enumerate() {
            let kinds = parse_specs(text).map_err(|e| Error::Config {
                line: 0,
                key: "--synthetic".into(),
                reason: e.to_string(),
            })?;
            for i in 0..self.images {
                let clean = gen_clean(derive_seed(self.seed, &[0, i as u64]), self.size, self.size)?;
                let specs: Vec<DegradationSpec> = kinds
                    .iter()
                    .enumerate()
                    .map(|(k, d)| DegradationSpec::new(*d, derive_seed(self.seed, &[1, j as u64, i as u64, k as u64])))
                    .collect();
                out.push(compose(format!("syn{i}"), &clean, &specs)?);
            }
        }
        Ok(out)
    }
}

fn write_output(text: &str, out: Option<&Path>) -> Result<(), Error> {
    match out {
        Some(path) => write_file(path, text.as_bytes()),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), Error> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn load_model(ckpt: &Path) -> Result<HairModel<f32>, Error> {
    load_checkpoint(ckpt)?.to_model()
}

fn progress(row: &LogRow) -> String {
    let mut line = format!("step {:>7}  lr {:.3e}", row.step, row.lr);
    if let Some(loss) = row.train_loss {
        let _ = write!(line, "  loss {loss:.5}");
    }
    for m in row.val.rows() {
        let _ = write!(line, "  {} {} dB / {:.4}", m.label, format_db(m.psnr), m.ssim);
    }
    line
}

pub fn train(config: &Path) -> Outcome {
    let cfg = RunConfig::load(config)?;
    let data = Dataset::build(&cfg.task()?)?;
    let (ckpt_path, log_path) = (cfg.checkpoint_path(), cfg.log_path());
    let mut trainer = Trainer::new(&cfg.model, cfg.train.clone(), &data)?;
    eprintln!(
        "training {} parameters for {} steps; checkpoint {}",
        trainer.model().store().numel(),
        trainer.total_steps(),
        ckpt_path.display()
    );
    let result = trainer.run_with(|t, row| {
        eprintln!("{}", progress(row));
        write_file(&log_path, t.log().to_csv().as_bytes())?;
        save_checkpoint(&t.checkpoint(), &ckpt_path)
    });
    match result {
        Ok(()) => Ok(()),
        Err(Error::NonFiniteLoss { step }) => {
            // The model still holds the last finite update.
            save_checkpoint(&trainer.checkpoint(), &ckpt_path)?;
            write_file(&log_path, trainer.log().to_csv().as_bytes())?;
            Err(Failure::Failed(format!(
                "training diverged at step {step}; last good checkpoint saved to {}",
                ckpt_path.display()
            )))
        }
        Err(e) => Err(e.into()),
    }
}

pub fn restore(ckpt: &Path, input: &Path, output: &Path) -> Outcome {
    let model = load_model(ckpt)?;
    let img = load_image(input)?;
    let (restored, _) = restore_image(&model, &img)?;
    save_image(&restored, output)?;
    Ok(())
}

pub fn eval(ckpt: &Path, source: &SampleSource, baseline: bool, out: Option<&Path>) -> Outcome {
    let model = load_model(ckpt)?;
    let samples = source.samples()?;
    if samples.is_empty() {
        return Err(Failure::Failed("no samples to evaluate".into()));
    }
    let mut report = evaluate(&model, &samples)?;
    if model.desc().dac_at.is_some() {
        for (label, ratio) in composite_midpoints(&extract_givs(&model, &samples)?)? {
            report.notes.push(format!("giv midpoint ratio {label}: {ratio:.4}"));
        }
    }
    let mut text = report.to_csv();
    if baseline {
        for line in evaluate_degraded(&samples)?.to_csv().lines().skip(1) {
            let _ = writeln!(text, "degraded:{line}");
        }
    }
    write_output(&text, out)?;
    Ok(())
}

pub fn giv(ckpt: &Path, source: &SampleSource, out: Option<&Path>) -> Outcome {
    let model = load_model(ckpt)?;
    let samples = source.samples()?;
    let givs = extract_givs(&model, &samples)?;
    let width = model.config().giv_len();
    let mut text = String::from("id,label");
    for k in 0..width {
        let _ = write!(text, ",giv_{k}");
    }
    text.push('\n');
    for (sample, (v, label)) in samples.iter().zip(&givs) {
        let _ = write!(text, "{},{label}", sample.id);
        for x in v {
            let _ = write!(text, ",{x:e}");
        }
        text.push('\n');
    }
    write_output(&text, out)?;
    Ok(())
}

pub fn check(suites: &[Suite], seed: u64) -> Outcome {
    let mut failing = Vec::new();
    for &suite in suites {
        let report = run_suite(suite, seed)?;
        for c in &report.checks {
            println!("{} {}/{}: {}", if c.passed { "PASS" } else { "FAIL" }, suite.name(), c.name, c.detail);
            if !c.passed {
                failing.push(format!("{}/{}", suite.name(), c.name));
            }
        }
    }
    if failing.is_empty() {
        Ok(())
    } else {
        Err(Failure::Failed(format!("failing invariant: {}", failing.join(", "))))
    }
}
