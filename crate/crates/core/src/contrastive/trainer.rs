//! The training loop: forward both query towers, apply the cross-projection
//! loss (plus the optional masked-prediction term), step the optimizer,
//! nudge the momentum towers, and refresh the negative queues.

use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::data::{batch_iter, DataDims, PairedDataset, PairedRecord};
use crate::encoders::{
    ImageEncoder, ImageEncoderConfig, LanguageEncoder, LanguageEncoderConfig, Mlp, Modality,
};
use crate::rng::{stream_rng, Stream};
use crate::tensor::{Adam, AdamConfig, Tape, Tensor, Var};

use super::loss::{cx_loss_on_tape, CxLossConfig, CxTapeInputs};
use super::momentum::MomentumPair;
use super::queue::NegativeQueue;
use super::{ContrastiveError, LossMode, Result};

#[derive(Debug, Clone, Copy)]
pub struct StepReport {
    pub loss: f32,
    pub grad_norm: f32,
    /// (image queue, language queue) fill after the step.
    pub queue_fill: (usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochStats {
    pub epoch: u32,
    pub mean_loss: f64,
    pub steps: usize,
}

/// Library-level knobs that are not part of the run configuration.
#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Attach trainable 2-layer MLP heads to the two cross-projection terms
    /// (identity when false).
    pub proj_heads: bool,
}

pub struct TrainState {
    pub cfg: RunConfig,
    pub dims: DataDims,
    pub image: MomentumPair<ImageEncoder>,
    pub lang: MomentumPair<LanguageEncoder>,
    pub loss: CxLossConfig,
    /// (image queue, language queue); only queue mode pushes into them.
    pub queues: (NegativeQueue, NegativeQueue),
    pub optimizer: Adam,
    /// Next epoch index to run; advanced by `run_epoch`.
    pub next_epoch: u32,
}

impl TrainState {
    pub fn init(cfg: RunConfig, dims: DataDims) -> Result<Self> {
        TrainState::init_with_options(cfg, dims, TrainOptions::default())
    }

    pub fn init_with_options(cfg: RunConfig, dims: DataDims, opts: TrainOptions) -> Result<Self> {
        let image_cfg = ImageEncoderConfig {
            feat_dim: dims.image.2,
            grid_size: cfg.grid_size,
            sa_layers: cfg.sa_layers,
            heads: 4,
            ffn_mult: 4,
            proj_hidden: 2 * cfg.embed_dim,
            embed_dim: cfg.embed_dim,
        };
        let lang_cfg = LanguageEncoderConfig {
            feat_dim: dims.lang_feat,
            model_dim: cfg.embed_dim.max(8),
            speech_layers: 2,
            shared_layers: 2,
            heads: 4,
            ffn_mult: 4,
            max_seq_len: dims.seq_len,
            n_units: dims.n_units,
            mask_prob: cfg.mask_prob,
            mask_len: cfg.mask_len,
            swap_prob: cfg.swap_prob,
            tau_pred: cfg.tau_pred,
            proj_hidden: 2 * cfg.embed_dim,
            embed_dim: cfg.embed_dim,
        };
        let mut init_rng = stream_rng(cfg.seed, Stream::Init, 0);
        let image_q = ImageEncoder::new(&image_cfg, &mut init_rng)?;
        let mut init_rng = stream_rng(cfg.seed, Stream::Init, 1);
        let lang_q = LanguageEncoder::new(&lang_cfg, &mut init_rng)?;
        let mut loss = CxLossConfig {
            tau: cfg.tau,
            mode: cfg.mode,
            f_proj: None,
            g_proj: None,
            pred_loss_weight: cfg.pred_loss_weight,
        };
        if opts.proj_heads {
            let mut head_rng = stream_rng(cfg.seed, Stream::Init, 2);
            loss.f_proj = Some(Mlp::init(cfg.embed_dim, 2 * cfg.embed_dim, cfg.embed_dim, &mut head_rng));
            loss.g_proj = Some(Mlp::init(cfg.embed_dim, 2 * cfg.embed_dim, cfg.embed_dim, &mut head_rng));
        }
        let queues = (
            NegativeQueue::new(cfg.queue_size, cfg.embed_dim)?,
            NegativeQueue::new(cfg.queue_size, cfg.embed_dim)?,
        );
        let optimizer = Adam::new(AdamConfig::with_lr(cfg.lr));
        Ok(TrainState {
            image: MomentumPair::new(image_q, cfg.momentum),
            lang: MomentumPair::new(lang_q, cfg.momentum),
            loss,
            queues,
            optimizer,
            next_epoch: 0,
            cfg,
            dims,
        })
    }

    /// Everything the optimizer updates, under stable names.
    pub fn trainable_params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        collect_trainable(&mut self.image, &mut self.lang, &mut self.loss)
    }

    pub fn trainable_params(&self) -> Vec<(String, &Tensor)> {
        let mut v: Vec<(String, &Tensor)> = Vec::new();
        for (n, p) in self.image.query.params() {
            v.push((format!("img_q.{n}"), p));
        }
        for (n, p) in self.lang.query.params() {
            v.push((format!("lang_q.{n}"), p));
        }
        if let Some(f) = self.loss.f_proj.as_ref() {
            v.extend(f.params("f"));
        }
        if let Some(g) = self.loss.g_proj.as_ref() {
            v.extend(g.params("g"));
        }
        v
    }

    /// One optimization step over a batch of paired records. Nothing is
    /// mutated unless the whole forward/backward pass was finite.
    pub fn train_step(
        &mut self,
        batch: &[&PairedRecord],
        mask_rng: &mut ChaCha8Rng,
        swap_rng: &mut ChaCha8Rng,
    ) -> Result<StepReport> {
        let b = batch.len();
        if b < 2 {
            return Err(ContrastiveError::BatchTooSmall { batch: b });
        }
        let mut tape = Tape::new();

        let mut img_vars = Vec::with_capacity(b);
        let mut lang_vars = Vec::with_capacity(b);
        let mut pred_terms: Vec<Var> = Vec::new();
        for rec in batch {
            let img = tape.leaf(&rec.image);
            img_vars.push(self.image.query.encode_on_tape(&mut tape, img)?);
            let corruption = self
                .lang
                .query
                .draw_corruption(&rec.language, mask_rng, swap_rng);
            let out = self
                .lang
                .query
                .encode_on_tape(&mut tape, &rec.language, Some(&corruption))?;
            lang_vars.push(out.embedding);
            if self.loss.pred_loss_weight > 0.0 {
                let ids = rec
                    .language
                    .unit_ids
                    .as_ref()
                    .ok_or(crate::encoders::EncoderError::MissingUnitIds)?;
                let targets: Vec<usize> = ids.iter().map(|i| *i as usize).collect();
                // masked positions carry the prediction loss; a draw with no
                // masked positions (or the text path) scores every position
                let active = if corruption.mask.any() {
                    corruption.mask.indicator.clone()
                } else {
                    vec![true; targets.len()]
                };
                pred_terms.push(tape.cross_entropy_rows(out.pred_logits, &targets, &active)?);
            }
        }
        let image_q = tape.stack_rows(&img_vars)?;
        let lang_q = tape.stack_rows(&lang_vars)?;

        let (image_k, lang_k) = if self.cfg.mode == LossMode::Queue {
            let mut ik = Vec::with_capacity(b);
            let mut lk = Vec::with_capacity(b);
            for rec in batch {
                let img = tape.leaf(&rec.image);
                ik.push(self.image.key.encode_on_tape(&mut tape, img)?);
                lk.push(
                    self.lang
                        .key
                        .encode_on_tape(&mut tape, &rec.language, None)?
                        .embedding,
                );
            }
            (Some(tape.stack_rows(&ik)?), Some(tape.stack_rows(&lk)?))
        } else {
            (None, None)
        };

        let queue_var = |tape: &mut Tape, q: &NegativeQueue| -> Result<Option<Var>> {
            if q.is_empty() {
                Ok(None)
            } else {
                let snap = q.snapshot();
                Ok(Some(tape.constant(
                    snap.data().to_vec(),
                    snap.shape().to_vec(),
                )?))
            }
        };
        let (image_queue, lang_queue) = if self.cfg.mode == LossMode::Queue {
            (
                queue_var(&mut tape, &self.queues.0)?,
                queue_var(&mut tape, &self.queues.1)?,
            )
        } else {
            (None, None)
        };

        let mut total = cx_loss_on_tape(
            &mut tape,
            self.cfg.mode,
            self.cfg.tau,
            CxTapeInputs {
                image_q,
                lang_q,
                image_k,
                lang_k,
                image_queue,
                lang_queue,
                f_proj: self.loss.f_proj.as_ref(),
                g_proj: self.loss.g_proj.as_ref(),
            },
        )?;
        if !pred_terms.is_empty() {
            let mut pred_sum = pred_terms[0];
            for term in &pred_terms[1..] {
                pred_sum = tape.add(pred_sum, *term)?;
            }
            let pred_mean = tape.scale(pred_sum, 1.0 / pred_terms.len() as f32)?;
            let weighted = tape.scale(pred_mean, self.loss.pred_loss_weight)?;
            total = tape.add(total, weighted)?;
        }

        let loss_value = tape.scalar_value(total) as f32;
        let key_batches = match (&image_k, &lang_k) {
            (Some(ik), Some(lk)) => Some((tape.extract(*ik), tape.extract(*lk))),
            _ => None,
        };
        let grads = tape.backward(total)?;

        // From here on the state mutates; every fallible check is done.
        let TrainState {
            image, lang, loss, optimizer, ..
        } = self;
        let mut params = collect_trainable(image, lang, loss);
        let mut grad_norm_sq = 0.0f64;
        for (_, p) in params.iter_mut() {
            match grads.of(p) {
                Some(g) => p.add_grad(g),
                None => p.ensure_grad(),
            }
            grad_norm_sq += p.grad_norm_sq();
        }
        optimizer.step(params)?;
        self.image.update()?;
        self.lang.update()?;
        if let Some((ik, lk)) = key_batches {
            self.queues.0.push(&ik)?;
            self.queues.1.push(&lk)?;
        }

        Ok(StepReport {
            loss: loss_value,
            grad_norm: grad_norm_sq.sqrt() as f32,
            queue_fill: (self.queues.0.fill(), self.queues.1.fill()),
        })
    }

    /// One pass over the dataset with the epoch's derived shuffle, mask, and
    /// swap streams.
    pub fn run_epoch(&mut self, dataset: &PairedDataset) -> Result<EpochStats> {
        let epoch = self.next_epoch;
        let batches = batch_iter(
            dataset.len(),
            self.cfg.batch_size,
            self.cfg.seed,
            epoch as u64,
        );
        let mut mask_rng = stream_rng(self.cfg.seed, Stream::Mask, epoch as u64);
        let mut swap_rng = stream_rng(self.cfg.seed, Stream::Swap, epoch as u64);
        let mut total = 0.0f64;
        let mut steps = 0usize;
        for batch_ix in &batches {
            let batch: Vec<&PairedRecord> = batch_ix.iter().map(|i| &dataset.records[*i]).collect();
            let report = self.train_step(&batch, &mut mask_rng, &mut swap_rng)?;
            total += report.loss as f64;
            steps += 1;
        }
        self.next_epoch += 1;
        Ok(EpochStats {
            epoch,
            mean_loss: if steps > 0 { total / steps as f64 } else { 0.0 },
            steps,
        })
    }

    /// Run `epochs` epochs, returning one stats entry per epoch.
    pub fn train(&mut self, dataset: &PairedDataset, epochs: u32) -> Result<Vec<EpochStats>> {
        if dataset.is_empty() {
            return Err(ContrastiveError::Config("dataset is empty".into()));
        }
        let mut history = Vec::with_capacity(epochs as usize);
        for _ in 0..epochs {
            history.push(self.run_epoch(dataset)?);
        }
        Ok(history)
    }
}

fn collect_trainable<'a>(
    image: &'a mut MomentumPair<ImageEncoder>,
    lang: &'a mut MomentumPair<LanguageEncoder>,
    loss: &'a mut CxLossConfig,
) -> Vec<(String, &'a mut Tensor)> {
    let mut v: Vec<(String, &mut Tensor)> = Vec::new();
    for (n, p) in image.query.params_mut() {
        v.push((format!("img_q.{n}"), p));
    }
    for (n, p) in lang.query.params_mut() {
        v.push((format!("lang_q.{n}"), p));
    }
    if let Some(f) = loss.f_proj.as_mut() {
        for (n, p) in f.params_mut("f") {
            v.push((n, p));
        }
    }
    if let Some(g) = loss.g_proj.as_mut() {
        for (n, p) in g.params_mut("g") {
            v.push((n, p));
        }
    }
    v
}

/// Embed every record's image through an encoder: [N, d] unit rows.
pub fn image_embeddings(encoder: &ImageEncoder, dataset: &PairedDataset) -> Result<Tensor> {
    let mut data = Vec::with_capacity(dataset.len() * encoder.embed_dim);
    for r in &dataset.records {
        data.extend_from_slice(encoder.encode(&r.image)?.data());
    }
    Ok(Tensor::new(data, vec![dataset.len(), encoder.embed_dim])?)
}

/// Embed every record's language side (inference mode): [N, d] unit rows.
pub fn language_embeddings(encoder: &LanguageEncoder, dataset: &PairedDataset) -> Result<Tensor> {
    let mut data = Vec::with_capacity(dataset.len() * encoder.cfg.embed_dim);
    for r in &dataset.records {
        data.extend_from_slice(encoder.encode(&r.language)?.data());
    }
    Ok(Tensor::new(
        data,
        vec![dataset.len(), encoder.cfg.embed_dim],
    )?)
}

/// Embed one pure-text prototype sequence per class: class c is the
/// sequence of its own unit id repeated `seq_len` times.
pub fn class_prototype_embeddings(
    encoder: &LanguageEncoder,
    n_classes: usize,
    seq_len: usize,
) -> Result<Tensor> {
    let mut data = Vec::with_capacity(n_classes * encoder.cfg.embed_dim);
    for c in 0..n_classes {
        let seq = crate::encoders::FeatureSequence::text(
            vec![c as u32; seq_len],
            encoder.cfg.feat_dim,
        )?;
        data.extend_from_slice(encoder.encode(&seq)?.data());
    }
    Ok(Tensor::new(
        data,
        vec![n_classes, encoder.cfg.embed_dim],
    )?)
}

/// True when the record can feed the language tower's text path.
pub fn has_text_path(record: &PairedRecord) -> bool {
    record.language.unit_ids.is_some() || record.language.modality == Modality::Text
}
