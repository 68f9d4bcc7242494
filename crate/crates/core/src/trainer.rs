//! Training loop, checkpoints and loss logging.

use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::mpsc::sync_channel;
use std::sync::Arc;
use std::thread;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::codec::{load_encoder, Encoder};
use crate::config::TrainConfig;
use crate::data::Corpus;
use crate::error::{Error, Result};
use crate::losses::{gaussian_noise, total_loss, LossBundle, LossWeights};
use crate::model::{Stylizer, TrainBatch};
use crate::optim::Adam;
use crate::weights::WeightFile;

const DATA_STREAM: u64 = 0x6461_7461_5f72_6e67;
const METRICS_FILE: &str = "metrics.jsonl";
const LATEST: &str = "latest.mccw";

/// One line of `metrics.jsonl`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub step: u64,
    #[serde(flatten)]
    pub loss: LossBundle,
}

/// The frozen encoder named by `config`: loaded from disk, or the seeded
/// random stand-in when no path is given.
pub fn build_encoder(config: &TrainConfig) -> Result<Encoder<f32>> {
    match &config.encoder {
        Some(path) => load_encoder(path, config.layout()),
        None => Ok(Encoder::random(config.layout(), config.encoder_seed)),
    }
}

/// Generator for everything random about training step `step`. Resuming
/// needs only the step count to continue the same sequence.
pub fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ DATA_STREAM);
    rng.set_stream(step);
    rng
}

/// Content crops, style crops and illumination noise for one step.
pub fn sample_batch(
    content: &Corpus,
    style: &Corpus,
    config: &TrainConfig,
    step: u64,
) -> Result<TrainBatch<f32>> {
    let mut rng = step_rng(config.seed, step);
    let c = content.batch(config.batch, config.crop, config.max_short_side, &mut rng)?;
    let s = style.batch(config.batch, config.crop, config.max_short_side, &mut rng)?;
    let noise = gaussian_noise(c.shape(), config.noise_sigma, &mut rng);
    Ok(TrainBatch {
        content: c,
        style: s,
        noise,
    })
}

/// One optimizer update. Parameters are left untouched when the loss or its
/// gradient is not finite.
pub fn train_step(
    model: &mut Stylizer<f32>,
    adam: &mut Adam,
    batch: &TrainBatch<f32>,
    weights: &LossWeights,
    step: u64,
) -> Result<LossBundle> {
    let (terms, grads) = model.loss_and_grads(batch, weights)?;
    let bundle = total_loss(terms, weights).map_err(|e| match e {
        Error::NonFiniteLoss { term, .. } => Error::NonFiniteLoss {
            term,
            step: Some(step),
        },
        other => other,
    })?;
    let slices = grads.slices();
    if slices.iter().any(|g| g.iter().any(|v| !v.is_finite())) {
        return Err(Error::NonFiniteLoss {
            term: "gradient",
            step: Some(step),
        });
    }
    adam.step(model.parameters_mut(), slices);
    Ok(bundle)
}

/// Everything needed to stylize with, or resume, a training run.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub step: u64,
    pub config: TrainConfig,
    pub model: Stylizer<f32>,
    pub optimizer: Adam,
    /// SHA-256 of the encoder weights the model was trained against.
    pub encoder_checksum: String,
}

impl Checkpoint {
    pub fn to_weights(&self) -> WeightFile {
        let mut f = WeightFile::new();
        self.model.write_records(&mut f);
        f.push_u64("train.step", vec![self.step]);
        f.push_bytes("train.config", self.config.to_text().into_bytes());
        f.push_bytes(
            "train.encoder_sha256",
            self.encoder_checksum.clone().into_bytes(),
        );
        f.push_u64(
            "train.rng",
            vec![self.config.seed, DATA_STREAM, self.step + 1],
        );
        let o = &self.optimizer;
        f.push_u64("optim.t", vec![o.t]);
        f.push_u64(
            "optim.hyper",
            [o.learning_rate, o.beta1, o.beta2, o.eps]
                .iter()
                .map(|v| v.to_bits())
                .collect(),
        );
        for (i, (m, v)) in o.m.iter().zip(&o.v).enumerate() {
            f.push_f32(format!("optim.m.{i:04}"), &[m.len()], m.clone());
            f.push_f32(format!("optim.v.{i:04}"), &[v.len()], v.clone());
        }
        f
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_weights().write(path)
    }

    /// Rebuild the encoder from the stored configuration and verify it is
    /// the one the model was trained against.
    pub fn from_weights(file: &WeightFile) -> Result<Self> {
        let text = std::str::from_utf8(file.bytes("train.config")?)
            .map_err(|_| Error::WeightFormat("train.config is not UTF-8".into()))?;
        let mut config = TrainConfig::parse(text)?;
        config.resume = None;
        let step = scalar_u64(file, "train.step")?;
        let stored = std::str::from_utf8(file.bytes("train.encoder_sha256")?)
            .map_err(|_| Error::WeightFormat("train.encoder_sha256 is not UTF-8".into()))?
            .to_string();
        let encoder = build_encoder(&config)?;
        let found = encoder.checksum();
        if found != stored {
            return Err(Error::Invalid(format!(
                "encoder checksum {found} does not match the checkpoint's {stored}"
            )));
        }
        let model = Stylizer::from_weights(Arc::new(encoder), file, config.depth, config.mode)?;

        let hyper = file.u64s("optim.hyper")?;
        if hyper.len() != 4 {
            return Err(Error::WeightFormat("optim.hyper must hold 4 values".into()));
        }
        let mut optimizer = Adam::new(f64::from_bits(hyper[0]));
        optimizer.beta1 = f64::from_bits(hyper[1]);
        optimizer.beta2 = f64::from_bits(hyper[2]);
        optimizer.eps = f64::from_bits(hyper[3]);
        optimizer.t = scalar_u64(file, "optim.t")?;
        if optimizer.t > 0 {
            for i in 0.. {
                let (Some(m), Some(v)) = (
                    file.get(&format!("optim.m.{i:04}")),
                    file.get(&format!("optim.v.{i:04}")),
                ) else {
                    break;
                };
                optimizer.m.push(file.f32(&m.tag, &m.shape)?.to_vec());
                optimizer.v.push(file.f32(&v.tag, &v.shape)?.to_vec());
            }
            let sizes: Vec<usize> = optimizer.m.iter().map(Vec::len).collect();
            let mut model_scratch = model.clone();
            let expected: Vec<usize> = model_scratch
                .parameters_mut()
                .iter()
                .map(|p| p.len())
                .collect();
            if sizes != expected {
                return Err(Error::WeightFormat(
                    "optimizer state does not match the model".into(),
                ));
            }
        }
        Ok(Checkpoint {
            step,
            config,
            model,
            optimizer,
            encoder_checksum: stored,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_weights(&WeightFile::read(path)?)
    }
}

fn scalar_u64(file: &WeightFile, tag: &str) -> Result<u64> {
    match file.u64s(tag)? {
        [v] => Ok(*v),
        _ => Err(Error::WeightFormat(format!("{tag} must hold one value"))),
    }
}

/// A training run in progress.
pub struct Trainer {
    config: TrainConfig,
    model: Stylizer<f32>,
    optimizer: Adam,
    step: u64,
    content: Corpus,
    style: Corpus,
    encoder_checksum: String,
}

impl Trainer {
    /// Fresh run, or a resumed one when `config.resume` is set.
    pub fn new(config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let content = Corpus::open(&config.content_dir)?;
        let style = Corpus::open(&config.style_dir)?;
        if let Some(path) = &config.resume {
            let ckpt = Checkpoint::load(path)?;
            let old = &ckpt.config;
            if (
                old.base_width,
                old.depth,
                old.mode,
                old.encoder_seed,
                &old.encoder,
            ) != (
                config.base_width,
                config.depth,
                config.mode,
                config.encoder_seed,
                &config.encoder,
            ) {
                return Err(Error::Config(format!(
                    "{} was trained with a different architecture",
                    path.display()
                )));
            }
            let mut optimizer = ckpt.optimizer;
            optimizer.learning_rate = config.learning_rate;
            return Ok(Trainer {
                config,
                model: ckpt.model,
                optimizer,
                step: ckpt.step,
                content,
                style,
                encoder_checksum: ckpt.encoder_checksum,
            });
        }
        let encoder = build_encoder(&config)?;
        let encoder_checksum = encoder.checksum();
        let model = Stylizer::new(Arc::new(encoder), config.depth, config.mode, config.seed);
        Ok(Trainer {
            optimizer: Adam::new(config.learning_rate),
            model,
            step: 0,
            content,
            style,
            encoder_checksum,
            config,
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &Stylizer<f32> {
        &self.model
    }

    pub fn into_model(self) -> Stylizer<f32> {
        self.model
    }

    pub fn optimizer(&self) -> &Adam {
        &self.optimizer
    }

    /// Steps completed so far.
    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn encoder_checksum(&self) -> &str {
        &self.encoder_checksum
    }

    pub fn batch_for(&self, step: u64) -> Result<TrainBatch<f32>> {
        sample_batch(&self.content, &self.style, &self.config, step)
    }

    /// Run the next step on `batch`.
    pub fn advance(&mut self, batch: &TrainBatch<f32>) -> Result<LossRecord> {
        let step = self.step + 1;
        let loss = train_step(
            &mut self.model,
            &mut self.optimizer,
            batch,
            &self.config.loss,
            step,
        )?;
        self.step = step;
        Ok(LossRecord { step, loss })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            step: self.step,
            config: self.config.clone(),
            model: self.model.clone(),
            optimizer: self.optimizer.clone(),
            encoder_checksum: self.encoder_checksum.clone(),
        }
    }

    /// Train until `config.steps`, calling `observe` after every step.
    /// Batches are prepared on a separate thread one step ahead.
    pub fn run(&mut self, observe: impl FnMut(&LossRecord)) -> Result<Vec<LossRecord>> {
        self.run_until(self.config.steps, observe)
    }

    /// Train until step `end` (at most `config.steps`). Running in pieces
    /// follows the same trajectory as one uninterrupted run.
    pub fn run_until(
        &mut self,
        end: u64,
        mut observe: impl FnMut(&LossRecord),
    ) -> Result<Vec<LossRecord>> {
        let start = self.step;
        let end = end.min(self.config.steps);
        let mut log = match &self.config.out_dir {
            Some(dir) => Some(self.open_outputs(dir)?),
            None => None,
        };
        let mut history = Vec::new();
        if start >= end {
            return Ok(history);
        }
        let (content, style, config) = (
            self.content.clone(),
            self.style.clone(),
            self.config.clone(),
        );
        thread::scope(|scope| {
            let (tx, rx) = sync_channel(2);
            scope.spawn(move || {
                for step in start + 1..=end {
                    if tx
                        .send(sample_batch(&content, &style, &config, step))
                        .is_err()
                    {
                        break;
                    }
                }
            });
            for batch in rx {
                let record = self.advance(&batch?)?;
                if let Some(out) = log.as_mut() {
                    serde_json::to_writer(&mut *out, &record)
                        .map_err(std::io::Error::from)
                        .map_err(|e| self.io_err(e))?;
                    out.write_all(b"\n").map_err(|e| self.io_err(e))?;
                }
                if record.step % 50 == 0 || record.step == end {
                    log::info!(
                        "step {} total {:.4} content {:.4} style {:.4} identity {:.5} illumination {:.3e}",
                        record.step,
                        record.loss.total,
                        record.loss.content,
                        record.loss.style,
                        record.loss.identity,
                        record.loss.illumination
                    );
                }
                observe(&record);
                history.push(record);
                if record.step % self.config.checkpoint_every == 0
                    || record.step == self.config.steps
                {
                    if let Some(out) = log.as_mut() {
                        out.flush().map_err(|e| self.io_err(e))?;
                    }
                    self.save_checkpoint()?;
                }
            }
            Ok(history)
        })
    }

    fn io_err(&self, e: std::io::Error) -> Error {
        let dir = self.config.out_dir.clone().unwrap_or_default();
        Error::io(dir.join(METRICS_FILE), e)
    }

    /// Create the output directory, write the config snapshot, and open the
    /// metrics log with entries past the current step dropped.
    fn open_outputs(&self, dir: &Path) -> Result<BufWriter<File>> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let snapshot = dir.join("config.txt");
        fs::write(&snapshot, self.config.to_text()).map_err(|e| Error::io(&snapshot, e))?;
        let path = dir.join(METRICS_FILE);
        let kept = if self.step > 0 && path.exists() {
            let f = File::open(&path).map_err(|e| Error::io(&path, e))?;
            let mut kept = Vec::new();
            for line in BufReader::new(f).lines() {
                let line = line.map_err(|e| Error::io(&path, e))?;
                match serde_json::from_str::<LossRecord>(&line) {
                    Ok(r) if r.step <= self.step => kept.push(line),
                    _ => {}
                }
            }
            kept
        } else {
            Vec::new()
        };
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .truncate(true)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        let mut out = BufWriter::new(f);
        for line in kept {
            writeln!(out, "{line}").map_err(|e| Error::io(&path, e))?;
        }
        Ok(out)
    }

    /// Write `step_NNNNNNN.mccw` and `latest.mccw` when an output directory
    /// is configured.
    pub fn save_checkpoint(&self) -> Result<Option<PathBuf>> {
        let Some(dir) = &self.config.out_dir else {
            return Ok(None);
        };
        let weights = self.checkpoint().to_weights();
        let path = dir.join(format!("step_{:07}.mccw", self.step));
        weights.write(&path)?;
        weights.write(dir.join(LATEST))?;
        Ok(Some(path))
    }
}

/// Train from `config` to completion and return the final state. With
/// `steps = 0` this is the freshly initialized checkpoint.
pub fn fit(config: TrainConfig) -> Result<Checkpoint> {
    let mut trainer = Trainer::new(config)?;
    trainer.run(|_| {})?;
    Ok(trainer.checkpoint())
}

/// Read every record of a `metrics.jsonl`.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<LossRecord>> {
    let path = path.as_ref();
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|line| {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line)
                .map_err(|e| Error::Invalid(format!("{}: {e}", path.display())))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{self, Kind};

    fn tiny_config(root: &Path) -> TrainConfig {
        synth::write_corpus(root.join("c"), Kind::Photo, 3, 40, 40, 1).unwrap();
        synth::write_corpus(root.join("s"), Kind::Painting, 2, 40, 40, 2).unwrap();
        let mut c = TrainConfig::desk(root.join("c"), root.join("s"));
        c.base_width = 4;
        c.crop = 16;
        c.batch = 2;
        c.steps = 4;
        c.checkpoint_every = 2;
        c.max_short_side = 40;
        c.out_dir = Some(root.join("run"));
        c
    }

    #[test]
    fn step_batches_are_reproducible() {
        let dir = tempfile::tempdir().unwrap();
        let t = Trainer::new(tiny_config(dir.path())).unwrap();
        let a = t.batch_for(3).unwrap();
        assert_eq!(a.content, t.batch_for(3).unwrap().content);
        assert_eq!(a.noise, t.batch_for(3).unwrap().noise);
        assert_ne!(a.content, t.batch_for(4).unwrap().content);
        assert_eq!(a.content.shape(), [2, 3, 16, 16]);
    }

    #[test]
    fn run_logs_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(tiny_config(dir.path())).unwrap();
        let before = t.model().encoder().checksum();
        let history = t.run(|_| {}).unwrap();
        assert_eq!(history.len(), 4);
        let run = dir.path().join("run");
        let logged = read_metrics(run.join(METRICS_FILE)).unwrap();
        assert_eq!(logged, history);
        for name in [
            "step_0000002.mccw",
            "step_0000004.mccw",
            LATEST,
            "config.txt",
        ] {
            assert!(run.join(name).exists(), "{name}");
        }
        assert_eq!(t.model().encoder().checksum(), before);
        let ckpt = Checkpoint::load(run.join(LATEST)).unwrap();
        assert_eq!(ckpt.step, 4);
        assert_eq!(ckpt.optimizer, *t.optimizer());
        assert_eq!(ckpt.encoder_checksum, before);
    }

    #[test]
    fn resume_matches_an_uninterrupted_run() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = tiny_config(dir.path());
        let full = fit(cfg.clone()).unwrap();

        let mut half = cfg.clone();
        half.out_dir = Some(dir.path().join("half"));
        half.steps = 2;
        fit(half.clone()).unwrap();
        let mut rest = half.clone();
        rest.steps = 4;
        rest.resume = Some(dir.path().join("half").join("step_0000002.mccw"));
        let resumed = fit(rest).unwrap();

        let mut a = full;
        let mut b = resumed;
        a.config.out_dir = None;
        b.config.out_dir = None;
        b.config.resume = None;
        assert_eq!(a.to_weights().to_bytes(), b.to_weights().to_bytes());
        let logged = read_metrics(dir.path().join("half").join(METRICS_FILE)).unwrap();
        let steps: Vec<u64> = logged.iter().map(|r| r.step).collect();
        assert_eq!(steps, vec![1, 2, 3, 4]);
    }

    #[test]
    fn zero_steps_returns_the_initial_state() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.steps = 0;
        let fresh = Trainer::new(cfg.clone()).unwrap().checkpoint();
        let ckpt = fit(cfg).unwrap();
        assert_eq!(ckpt.step, 0);
        assert_eq!(ckpt.optimizer.t, 0);
        assert_eq!(ckpt.to_weights().to_bytes(), fresh.to_weights().to_bytes());
    }

    #[test]
    fn identical_steps_give_identical_losses() {
        let dir = tempfile::tempdir().unwrap();
        let t = Trainer::new(tiny_config(dir.path())).unwrap();
        let batch = t.batch_for(1).unwrap();
        let mut a = Trainer::new(t.config().clone()).unwrap();
        let mut b = Trainer::new(t.config().clone()).unwrap();
        assert_eq!(a.advance(&batch).unwrap(), b.advance(&batch).unwrap());
    }

    #[test]
    fn disabled_illumination_is_reported_but_not_counted() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.loss.illumination = 0.0;
        cfg.noise_sigma = 0.2;
        let mut t = Trainer::new(cfg).unwrap();
        let batch = t.batch_for(1).unwrap();
        let r = t.advance(&batch).unwrap().loss;
        assert!(r.illumination > 0.0);
        let w = LossWeights::default();
        let expected = w.content * r.content + w.style * r.style + w.identity * r.identity;
        assert!((r.total - expected).abs() <= 1e-12 * expected);
    }

    #[test]
    fn checkpoint_round_trip_preserves_outputs() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.steps = 2;
        let ckpt = fit(cfg).unwrap();
        let path = dir.path().join("x.mccw");
        ckpt.save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        let c = crate::synth::panning_clip(
            &synth::photo(40, 24, &mut <ChaCha8Rng as SeedableRng>::seed_from_u64(3)),
            1,
            24,
            24,
            1,
        );
        let s = &c[0];
        assert_eq!(
            ckpt.model.stylize(&c[0], s).unwrap(),
            back.model.stylize(&c[0], s).unwrap()
        );
    }

    #[test]
    fn running_in_pieces_matches_one_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny_config(dir.path());
        cfg.out_dir = None;
        let mut whole = Trainer::new(cfg.clone()).unwrap();
        let all = whole.run(|_| {}).unwrap();
        let mut pieces = Trainer::new(cfg).unwrap();
        let mut parts = pieces.run_until(1, |_| {}).unwrap();
        parts.extend(pieces.run_until(99, |_| {}).unwrap());
        assert_eq!(all, parts);
        assert_eq!(pieces.step(), 4);
    }

    #[test]
    fn checkpoint_rejects_a_different_encoder() {
        let dir = tempfile::tempdir().unwrap();
        let t = Trainer::new(tiny_config(dir.path())).unwrap();
        let mut ckpt = t.checkpoint();
        ckpt.config.encoder_seed = 99;
        assert!(matches!(
            Checkpoint::from_weights(&ckpt.to_weights()),
            Err(Error::Invalid(_))
        ));
    }

    #[test]
    fn non_finite_loss_names_the_step() {
        let dir = tempfile::tempdir().unwrap();
        let mut t = Trainer::new(tiny_config(dir.path())).unwrap();
        let mut batch = t.batch_for(1).unwrap();
        batch.content.as_mut_slice()[0] = f32::NAN;
        let before = t.checkpoint().to_weights().to_bytes();
        match t.advance(&batch) {
            Err(Error::NonFiniteLoss { step: Some(1), .. }) => {}
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(t.checkpoint().to_weights().to_bytes(), before);
    }
}
