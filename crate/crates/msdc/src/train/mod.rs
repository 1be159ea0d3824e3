//! Training loop, evaluation, and checkpoint persistence.

mod adam;
mod checkpoint;

pub use adam::{adam_step, AdamState};
pub use checkpoint::{Checkpoint, RngState};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::path::PathBuf;
use std::time::Instant;

use crate::data::{stack_batch, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{disparity_metrics, MetricReport};
use crate::model::{ModelConfig, MsdcNet, ParamSet, Phase};
use crate::tensor::Tape;

/// Run parameters for one training job.
#[derive(Clone, Debug)]
pub struct TrainRunConfig {
    pub model: ModelConfig,
    pub batch_size: usize,
    pub max_steps: u64,
    /// Seeds parameter initialization and the per-epoch shuffle.
    pub seed: u64,
    /// Write `checkpoint_dir/step_NNNNNN.ckpt` every this many steps (0 = never).
    pub checkpoint_every: u64,
    pub checkpoint_dir: Option<PathBuf>,
    /// Progress callback cadence in steps (0 = every step).
    pub log_every: u64,
    /// Evaluate the full training set every this many steps and stop early
    /// once the mean end-point error drops below `target_epe`.
    pub target_epe: Option<f64>,
    pub eval_every: u64,
}

impl TrainRunConfig {
    pub fn new(model: ModelConfig, batch_size: usize, max_steps: u64, seed: u64) -> Self {
        TrainRunConfig {
            model,
            batch_size,
            max_steps,
            seed,
            checkpoint_every: 0,
            checkpoint_dir: None,
            log_every: 0,
            target_epe: None,
            eval_every: 100,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch size must be at least 1"));
        }
        self.model.validate()
    }
}

/// One per-step log record.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub loss: f64,
    /// Mean absolute disparity error on the training batch.
    pub epe: f64,
    /// Wall-clock seconds since the run started.
    pub seconds: f64,
}

/// Result of a training run.
#[derive(Debug)]
pub struct TrainOutcome {
    pub log: Vec<StepRecord>,
    pub checkpoint: Checkpoint,
    /// Most recent full training-set evaluation, if early stopping was on.
    pub last_eval: Option<(u64, MetricReport)>,
}

/// Render a training log as the `step,loss,epe,seconds` CSV.
///
/// With `deterministic` set the seconds column is written as zero so equal
/// runs produce byte-identical files regardless of wall time.
pub fn log_to_csv(log: &[StepRecord], deterministic: bool) -> String {
    let mut out = String::from("step,loss,epe,seconds\n");
    for r in log {
        let secs = if deterministic { 0.0 } else { r.seconds };
        out.push_str(&format!("{},{:.9},{:.6},{:.3}\n", r.step, r.loss, r.epe, secs));
    }
    out
}

/// Sample index for a global position, through the per-epoch shuffled order.
fn sample_at(data: &Dataset, shuffle_seed: u64, global: u64, cache: &mut (u64, Vec<usize>)) -> usize {
    let n = data.len() as u64;
    let epoch = global / n;
    let pos = (global % n) as usize;
    if cache.1.is_empty() || cache.0 != epoch {
        *cache = (epoch, data.epoch_order(shuffle_seed, epoch));
    }
    cache.1[pos]
}

/// Train from scratch or resume from a checkpoint.
///
/// The loop is: assemble batch, forward in training mode, masked smooth-L1
/// loss, backward, Adam step. Everything is a deterministic function of the
/// configuration and seeds in single-threaded mode.
pub fn run_training(
    cfg: &TrainRunConfig,
    data: &Dataset,
    resume: Option<Checkpoint>,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let net = MsdcNet::new(&cfg.model)?;
    // Shape compatibility is checked before any work happens.
    let probe = &data.samples[0];
    cfg.model
        .validate_input_shape(&[cfg.batch_size, 3, probe.height(), probe.width()])?;

    let (mut params, mut adam, rng, start_step) = match resume {
        Some(ck) => {
            if ck.config != cfg.model {
                return Err(Error::invalid(
                    "checkpoint configuration does not match the run configuration",
                ));
            }
            if !ck.adam.matches(&ck.params) {
                return Err(Error::CheckpointCorrupt(
                    "optimizer state does not match parameters".into(),
                ));
            }
            (ck.params, ck.adam, ck.rng.restore(), ck.step)
        }
        None => {
            let params: ParamSet<f32> = net.init_params(cfg.seed)?;
            let adam = AdamState::new(&params);
            // Reserved for augmentation draws; captured into checkpoints so
            // resuming reproduces the stream position.
            let rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            (params, adam, rng, 0)
        }
    };

    let started = Instant::now();
    let mut log = Vec::new();
    let mut last_eval = None;
    let mut order_cache = (0u64, Vec::new());

    let make_checkpoint = |step: u64, params: &ParamSet<f32>, adam: &AdamState, rng: &ChaCha8Rng| Checkpoint {
        config: cfg.model.clone(),
        step,
        params: params.clone(),
        adam: adam.clone(),
        rng: RngState::capture(rng),
    };

    let mut step = start_step;
    while step < cfg.max_steps {
        let global = step * cfg.batch_size as u64;
        let batch: Vec<&_> = (0..cfg.batch_size as u64)
            .map(|k| &data.samples[sample_at(data, cfg.seed, global + k, &mut order_cache)])
            .collect();
        let (left, right, gt, valid) = stack_batch(&batch)?;

        let mut tape = Tape::new();
        let bound = params.bind(&mut tape);
        let l = tape.leaf(left);
        let r = tape.leaf(right);
        let out = net.forward(&mut tape, &mut params, &bound, l, r, Phase::TRAIN)?;
        let loss = tape.smooth_l1(out.disparity, &gt)?;
        let loss_value = tape.value(loss).data()[0] as f64;
        if !loss_value.is_finite() {
            return Err(Error::NonFinite {
                location: format!("training loss at step {step}"),
            });
        }
        let epe = disparity_metrics(tape.value(out.disparity), &gt, Some(&valid))?.mae;
        let grads = tape.backward(loss)?;
        params.absorb_gradients(&grads, &bound)?;
        drop(tape);
        adam_step(&mut params, &mut adam)?;

        step += 1;
        let record = StepRecord {
            step,
            loss: loss_value,
            epe,
            seconds: started.elapsed().as_secs_f64(),
        };
        if cfg.log_every == 0 || step % cfg.log_every == 0 || step == cfg.max_steps {
            on_step(&record);
        }
        log.push(record);

        if cfg.checkpoint_every > 0 && step % cfg.checkpoint_every == 0 {
            if let Some(dir) = &cfg.checkpoint_dir {
                make_checkpoint(step, &params, &adam, &rng)
                    .save(&dir.join(format!("step_{step:06}.ckpt")))?;
            }
        }

        if let Some(target) = cfg.target_epe {
            if cfg.eval_every > 0 && step % cfg.eval_every == 0 {
                let (_, aggregate) = evaluate_model(&net, &params, data)?;
                let reached = aggregate.mae < target;
                last_eval = Some((step, aggregate));
                if reached {
                    break;
                }
            }
        }
    }

    Ok(TrainOutcome {
        log,
        checkpoint: make_checkpoint(step, &params, &adam, &rng),
        last_eval,
    })
}

/// Inference-mode evaluation of every sample: per-sample reports plus their
/// unweighted mean. Parameters are cloned internally, so the set is
/// untouched by construction.
pub fn evaluate_model(
    net: &MsdcNet,
    params: &ParamSet<f32>,
    data: &Dataset,
) -> Result<(Vec<MetricReport>, MetricReport)> {
    let mut working = params.clone();
    let mut reports = Vec::with_capacity(data.len());
    for sample in &data.samples {
        let (left, right, gt, valid) = stack_batch(&[sample])?;
        let mut tape = Tape::new();
        let bound = working.bind(&mut tape);
        let l = tape.leaf(left);
        let r = tape.leaf(right);
        let out = net.forward(&mut tape, &mut working, &bound, l, r, Phase::Infer)?;
        reports.push(disparity_metrics(tape.value(out.disparity), &gt, Some(&valid))?);
    }
    let aggregate = MetricReport::mean_of(&reports)?;
    Ok((reports, aggregate))
}

/// Run inference on one sample and return the predicted disparity map (h, w).
pub fn predict_disparity(
    net: &MsdcNet,
    params: &ParamSet<f32>,
    sample: &crate::data::StereoSample,
) -> Result<crate::tensor::Tensor<f32>> {
    let mut working = params.clone();
    let (left, right, _, _) = stack_batch(&[sample])?;
    let mut tape = Tape::new();
    let bound = working.bind(&mut tape);
    let l = tape.leaf(left);
    let r = tape.leaf(right);
    let out = net.forward(&mut tape, &mut working, &bound, l, r, Phase::Infer)?;
    let pred = tape.value(out.disparity).clone();
    let (h, w) = (sample.height(), sample.width());
    pred.reshape(&[h, w])
}
