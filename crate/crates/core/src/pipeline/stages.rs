use ndarray::Axis;
use rand::seq::SliceRandom;

use super::{EpochMeter, MetricLog, PipelineError, Result, RunOptions, StageRecord, StageTag, TrainConfig, TrainedModel};
use crate::autodiff::{Mat, Tape, Var};
use crate::encoders::{self, heads, image, text, ParamGroup};
use crate::losses::{self, BatchLabels, FinetuneInputs};
use crate::optim::{cosine_lr, Adam};
use crate::rng;
use crate::synthdata::{pk_epoch, DatasetSplit, ImageSample};

/// Gradients gathered from one backward pass, keyed by parameter name.
type NamedGrads = Vec<(String, Mat)>;

fn collect(grads: &crate::autodiff::Gradients, vars: &[(String, Var)]) -> NamedGrads {
    vars.iter()
        .filter_map(|(n, v)| grads.get(*v).map(|g| (n.clone(), g.clone())))
        .collect()
}

/// Steps every parameter of an allowed group that received a gradient; the
/// step size is picked per group by `lr`.
fn apply(
    model: &mut TrainedModel,
    adam: &mut Adam,
    grads: &NamedGrads,
    tag: StageTag,
    epoch: usize,
    lr: impl Fn(ParamGroup) -> f64,
) -> Result<()> {
    let allowed = tag.update_groups();
    for (name, group, param) in model.model.named_params_mut() {
        if !allowed.contains(&group) {
            continue;
        }
        if let Some((_, g)) = grads.iter().find(|(n, _)| *n == name) {
            adam.step(&name, param, g, lr(group));
            if param.iter().any(|v| !v.is_finite()) {
                return Err(PipelineError::NonFinite {
                    stage: tag.stage_name(),
                    phase: tag.phase_name(),
                    epoch,
                    component: format!("parameter {name}"),
                });
            }
        }
    }
    Ok(())
}

fn record(tag: StageTag, cfg: &TrainConfig, model: &mut TrainedModel) {
    model.provenance.push(StageRecord {
        stage: tag,
        epochs: tag.epochs(&cfg.plan),
        config_hash: cfg.hash(),
    });
}

fn emit(log: &mut MetricLog, opts: &mut RunOptions<'_>, rec: super::MetricRecord) {
    if let Some(cb) = opts.on_epoch.as_mut() {
        cb(&rec);
    }
    log.records.push(rec);
}

/// Patch rows of every training image, stacked in training order.
struct PatchTable {
    rows: Mat,
    per_image: usize,
}

impl PatchTable {
    fn new(model: &TrainedModel, data: &DatasetSplit) -> Result<Self> {
        let refs: Vec<&ImageSample> = data.train.iter().collect();
        let rows = image::patchify(&model.model.config, &refs)?;
        Ok(Self {
            rows,
            per_image: model.model.config.num_patches(),
        })
    }

    fn batch(&self, indices: &[usize]) -> Mat {
        let rows: Vec<usize> = indices
            .iter()
            .flat_map(|&i| i * self.per_image..(i + 1) * self.per_image)
            .collect();
        self.rows.select(Axis(0), &rows)
    }
}

fn class_targets(model: &TrainedModel, data: &DatasetSplit, indices: &[usize]) -> Vec<usize> {
    indices
        .iter()
        .map(|&i| model.labels.class_of[&data.train[i].pid])
        .collect()
}

struct EncoderStep {
    tape: Tape,
    features: Var,
    logits: Var,
    log_scale: Var,
    vars: Vec<(String, Var)>,
}

/// Records the image tower and identity head for a batch of training images.
fn encoder_forward(model: &TrainedModel, patches: Mat, batch: usize, train_scale: bool) -> EncoderStep {
    let cfg = model.model.config;
    let mut tape = Tape::new();
    let iv = model.model.image.bind(&mut tape, true);
    let hv = model.model.id_head.bind(&mut tape, true);
    let x = tape.constant(patches);
    let (embedding, features) = image::forward_parts(&mut tape, &iv, &cfg, x, batch);
    let logits = heads::id_classify(&mut tape, &hv, embedding);
    let mut vars: Vec<(String, Var)> = iv
        .named()
        .into_iter()
        .filter(|(n, _)| train_scale || *n != "image.log_scale")
        .map(|(n, v)| (n.to_string(), v))
        .collect();
    vars.push(("id_head.w".into(), hv.w));
    vars.push(("id_head.b".into(), hv.b));
    EncoderStep {
        tape,
        features,
        logits,
        log_scale: iv.log_scale,
        vars,
    }
}

fn steps_per_epoch(cfg: &TrainConfig, data: &DatasetSplit, tag: StageTag) -> Result<usize> {
    let mut r = rng::stream(cfg.seed, &[rng::tag("probe"), tag as u64]);
    Ok(pk_epoch(data, cfg.p, cfg.k, &mut r)?.len().max(1))
}

/// Warm-up of the image encoder with identity and triplet losses.
pub fn run_stage_initial(
    cfg: &TrainConfig,
    model: &mut TrainedModel,
    data: &DatasetSplit,
    log: &mut MetricLog,
    opts: &mut RunOptions<'_>,
) -> Result<()> {
    let tag = StageTag::Initial;
    let epochs = cfg.plan.initial_epochs;
    if epochs == 0 {
        return Ok(());
    }
    let patches = PatchTable::new(model, data)?;
    let total_steps = epochs * steps_per_epoch(cfg, data, tag)?;
    let mut adam = Adam::new(cfg.adam);
    let mut step = 0;
    for epoch in 0..epochs {
        let mut meter = EpochMeter::new(opts.record_wall_time);
        let mut r = rng::stream(cfg.seed, &[rng::tag("initial"), epoch as u64]);
        let lr0 = cosine_lr(cfg.lr_encoder, step, total_steps, cfg.lr_floor);
        for batch in pk_epoch(data, cfg.p, cfg.k, &mut r)? {
            let targets = class_targets(model, data, &batch);
            let mut s = encoder_forward(model, patches.batch(&batch), batch.len(), cfg.train_scale);
            let l = losses::initial_stage(
                s.tape.value(s.logits).view(),
                s.tape.value(s.features).view(),
                &targets,
                &cfg.weights,
            )?;
            meter.add(tag, epoch, l.value, &[("id", l.id), ("triplet", l.triplet)])?;
            let obj = s.tape.loss(
                l.value,
                vec![(s.logits, l.d_class_logits), (s.features, l.d_image)],
            );
            let grads = collect(&s.tape.backward(obj), &s.vars);
            let lr = cosine_lr(cfg.lr_encoder, step, total_steps, cfg.lr_floor);
            let lr_head = cosine_lr(cfg.lr_id_head, step, total_steps, cfg.lr_floor);
            apply(model, &mut adam, &grads, tag, epoch, |g| {
                if g == ParamGroup::IdHead {
                    lr_head
                } else {
                    lr
                }
            })?;
            step += 1;
        }
        emit(log, opts, meter.finish(tag, epoch, lr0, cfg.seed));
    }
    record(tag, cfg, model);
    Ok(())
}

/// Prompt learning with frozen encoders. `PromptIds` learns identity tokens on
/// domain-free prompts with the domain classifier adversarial through gradient
/// reversal; `PromptDomains` learns domain tokens on full prompts with a plain
/// domain classifier.
pub fn run_stage_prompt(
    cfg: &TrainConfig,
    model: &mut TrainedModel,
    data: &DatasetSplit,
    tag: StageTag,
    log: &mut MetricLog,
    opts: &mut RunOptions<'_>,
) -> Result<()> {
    let phase_b = match tag {
        StageTag::PromptIds => false,
        StageTag::PromptDomains => true,
        _ => {
            return Err(PipelineError::Config(format!(
                "{tag:?} is not a prompt-learning phase"
            )))
        }
    };
    let epochs = tag.epochs(&cfg.plan);
    if epochs == 0 {
        return Ok(());
    }
    let ecfg = model.model.config;
    let refs: Vec<&ImageSample> = data.train.iter().collect();
    let features = image::encode_images(&model.model.image, &ecfg, &refs)?;
    let scale = model.model.image.scale();
    let classes: Vec<usize> = class_targets(model, data, &(0..data.train.len()).collect::<Vec<_>>());
    let domains: Vec<usize> = data
        .train
        .iter()
        .map(|s| model.labels.domain_class[&s.domain_id])
        .collect();
    let batch_size = cfg.batch_size();
    let per_epoch = data.train.len().div_ceil(batch_size);
    let total_steps = epochs * per_epoch;
    let alpha = if phase_b && !cfg.domain_loss_on_domain_tokens {
        0.0
    } else {
        cfg.weights.alpha
    };
    let mut adam = Adam::new(cfg.adam);
    let mut step = 0;
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    for epoch in 0..epochs {
        let mut meter = EpochMeter::new(opts.record_wall_time);
        let mut r = rng::stream(cfg.seed, &[rng::tag("prompt"), tag as u64, epoch as u64]);
        order.shuffle(&mut r);
        let lr0 = cosine_lr(cfg.lr_prompt, step, total_steps, cfg.lr_floor);
        for batch in order.chunks(batch_size) {
            let labels = BatchLabels::new(
                batch.iter().map(|&i| classes[i]).collect(),
                batch.iter().map(|&i| domains[i]).collect(),
            )?;
            let image_batch = features.select(Axis(0), batch);
            let uniq = labels.unique_pids().to_vec();
            let homes: Vec<usize> = uniq.iter().map(|&c| model.labels.home_domain_class[c]).collect();
            let prompts = uniq
                .iter()
                .zip(&homes)
                .map(|(&c, &d)| model.model.bank.build_prompt(c, phase_b.then_some(d)))
                .collect::<std::result::Result<Vec<_>, _>>()?;

            let mut tape = Tape::new();
            let tv = model.model.text.bind(&mut tape);
            let bv = model.model.bank.bind(&mut tape, !phase_b, phase_b);
            let dv = model.model.domain_head.bind(&mut tape, true);
            let text_ids = text::forward(&mut tape, &tv, &bv, &ecfg, &prompts)?;
            let routed = if !phase_b && cfg.grl {
                heads::grl(&mut tape, text_ids, cfg.grl_lambda)
            } else {
                text_ids
            };
            let logits = heads::domain_classify(&mut tape, &dv, routed);
            let l = losses::prompt_stage(
                image_batch.view(),
                tape.value(text_ids).view(),
                &labels,
                tape.value(logits).view(),
                &homes,
                alpha,
                scale,
            )?;
            meter.add(
                tag,
                epoch,
                l.value,
                &[("i2t", l.i2t), ("t2i", l.t2i), ("domain", l.domain)],
            )?;
            let obj = tape.loss(
                l.value,
                vec![(text_ids, l.d_text_ids), (logits, l.d_domain_logits)],
            );
            let mut vars: Vec<(String, Var)> = tv.named().to_vec();
            vars.push(("prompt.id_tokens".into(), bv.id_tokens));
            vars.push(("prompt.domain_tokens".into(), bv.domain_tokens));
            vars.push(("domain_head.w".into(), dv.w));
            vars.push(("domain_head.b".into(), dv.b));
            let grads = collect(&tape.backward(obj), &vars);
            let lr_p = cosine_lr(cfg.lr_prompt, step, total_steps, cfg.lr_floor);
            let lr_d = cosine_lr(cfg.lr_domain_head, step, total_steps, cfg.lr_floor);
            apply(model, &mut adam, &grads, tag, epoch, |g| {
                if g == ParamGroup::DomainClassifier {
                    lr_d
                } else {
                    lr_p
                }
            })?;
            step += 1;
        }
        emit(log, opts, meter.finish(tag, epoch, lr0, cfg.seed));
    }
    record(tag, cfg, model);
    Ok(())
}

/// Domain-free (`pos`) and home-domain (`neg`) prompt features of every class.
pub fn prompt_tables(model: &TrainedModel) -> Result<(Mat, Mat)> {
    let bank = &model.model.bank;
    let n = model.labels.num_pids();
    let pos = (0..n)
        .map(|c| bank.build_prompt(c, None))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let neg = (0..n)
        .map(|c| bank.build_prompt(c, Some(model.labels.home_domain_class[c])))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let cfg = &model.model.config;
    Ok((
        encoders::encode_prompts(&model.model.text, bank, cfg, &pos)?,
        encoders::encode_prompts(&model.model.text, bank, cfg, &neg)?,
    ))
}

/// Image-encoder fine-tuning against the frozen prompt features.
pub fn run_stage_finetune(
    cfg: &TrainConfig,
    model: &mut TrainedModel,
    data: &DatasetSplit,
    log: &mut MetricLog,
    opts: &mut RunOptions<'_>,
) -> Result<()> {
    let tag = StageTag::Finetune;
    let epochs = cfg.plan.finetune_epochs;
    if epochs == 0 {
        return Ok(());
    }
    let patches = PatchTable::new(model, data)?;
    let (text_pos, text_neg) = prompt_tables(model)?;
    let total_steps = epochs * steps_per_epoch(cfg, data, tag)?;
    let mut adam = Adam::new(cfg.adam);
    let mut step = 0;
    for epoch in 0..epochs {
        let mut meter = EpochMeter::new(opts.record_wall_time);
        let mut r = rng::stream(cfg.seed, &[rng::tag("finetune"), epoch as u64]);
        let lr0 = cosine_lr(cfg.lr_encoder, step, total_steps, cfg.lr_floor);
        for batch in pk_epoch(data, cfg.p, cfg.k, &mut r)? {
            let targets = class_targets(model, data, &batch);
            let mut s = encoder_forward(model, patches.batch(&batch), batch.len(), cfg.train_scale);
            let scale = s.tape.value(s.log_scale)[[0, 0]].exp();
            let l = losses::finetune_stage(
                FinetuneInputs {
                    class_logits: s.tape.value(s.logits).view(),
                    image: s.tape.value(s.features).view(),
                    text_pos: text_pos.view(),
                    text_neg: text_neg.view(),
                    pids: &targets,
                    scale,
                },
                &cfg.weights,
            )?;
            meter.add(
                tag,
                epoch,
                l.value,
                &[
                    ("id", l.id),
                    ("triplet", l.triplet),
                    ("i2tce", l.i2tce),
                    ("apn", l.apn),
                ],
            )?;
            let mut local = vec![(s.logits, l.d_class_logits), (s.features, l.d_image)];
            if cfg.train_scale {
                local.push((s.log_scale, Mat::from_elem((1, 1), l.d_scale * scale)));
            }
            let obj = s.tape.loss(l.value, local);
            let grads = collect(&s.tape.backward(obj), &s.vars);
            let lr = cosine_lr(cfg.lr_encoder, step, total_steps, cfg.lr_floor);
            let lr_head = cosine_lr(cfg.lr_id_head, step, total_steps, cfg.lr_floor);
            apply(model, &mut adam, &grads, tag, epoch, |g| {
                if g == ParamGroup::IdHead {
                    lr_head
                } else {
                    lr
                }
            })?;
            step += 1;
        }
        emit(log, opts, meter.finish(tag, epoch, lr0, cfg.seed));
    }
    record(tag, cfg, model);
    Ok(())
}
