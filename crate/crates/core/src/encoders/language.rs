//! Language tower for audio and text feature streams.
//!
//! Audio frames are span-masked (training), projected, position-tagged, and
//! run through the speech stack. At the speech/shared boundary, training
//! swaps randomly chosen unmasked positions for their unit embeddings; pure
//! text skips the speech stack entirely and enters the shared stack as unit
//! embeddings, so both modalities are treated equally from there on. The
//! embedding is a learned softmax-weighted average over the shared stack
//! (including its boundary input), time-averaged and projected to the shared
//! space. A cosine-similarity prediction head over unit classes provides the
//! masked-prediction distribution.

use rand_chacha::ChaCha8Rng;

use crate::tensor::{Tape, Tensor, Var};

use super::layers::{normal_param, EncoderLayer, Linear, Mlp};
use super::masking::{draw_span_mask, draw_swap_positions, SpanMask};
use super::sequence::{FeatureSequence, Modality};
use super::{EncoderError, Result};

#[derive(Debug, Clone)]
pub struct LanguageEncoderConfig {
    /// Input frame dimension.
    pub feat_dim: usize,
    /// Transformer model dimension.
    pub model_dim: usize,
    pub speech_layers: usize,
    pub shared_layers: usize,
    pub heads: usize,
    pub ffn_mult: usize,
    pub max_seq_len: usize,
    /// Unit vocabulary size (also the prediction-head class count).
    pub n_units: usize,
    pub mask_prob: f32,
    pub mask_len: usize,
    pub swap_prob: f32,
    pub tau_pred: f32,
    pub proj_hidden: usize,
    pub embed_dim: usize,
}

impl LanguageEncoderConfig {
    pub fn toy(feat_dim: usize, n_units: usize, max_seq_len: usize, embed_dim: usize) -> Self {
        LanguageEncoderConfig {
            feat_dim,
            model_dim: embed_dim.max(8),
            speech_layers: 2,
            shared_layers: 2,
            heads: 4,
            ffn_mult: 4,
            max_seq_len,
            n_units,
            mask_prob: 0.08,
            mask_len: 10,
            swap_prob: 0.15,
            tau_pred: 0.1,
            proj_hidden: 2 * embed_dim,
            embed_dim,
        }
    }
}

#[derive(Debug, Clone)]
pub struct LanguageEncoder {
    pub cfg: LanguageEncoderConfig,
    in_proj: Linear,
    /// Learned absolute position table, [max_seq_len, model_dim].
    pos: Tensor,
    /// Replaces masked frames, [feat_dim].
    mask_embedding: Tensor,
    speech: Vec<EncoderLayer>,
    shared: Vec<EncoderLayer>,
    /// Unit table, [n_units, model_dim].
    pub unit_embeddings: Tensor,
    /// One logit per pooled layer (shared stack + its boundary input).
    layer_weights: Tensor,
    /// Prediction-head projection, [model_dim, model_dim].
    pred_proj: Tensor,
    /// Class embeddings for the prediction head, [n_units, model_dim].
    pub class_embeddings: Tensor,
    proj: Mlp,
}

/// Training-time mask/swap decisions for one sequence.
#[derive(Debug, Clone)]
pub struct Corruption {
    pub mask: SpanMask,
    pub swaps: Vec<bool>,
}

impl Corruption {
    pub fn none(len: usize) -> Self {
        Corruption {
            mask: SpanMask::none(len),
            swaps: vec![false; len],
        }
    }
}

/// Tape-side result of a training forward pass.
pub struct LanguageForward {
    /// Unit-norm [embed_dim] embedding.
    pub embedding: Var,
    /// Prediction-head logits (cosine similarities / tau_pred), [T, n_units].
    pub pred_logits: Var,
}

impl LanguageEncoder {
    pub fn new(cfg: &LanguageEncoderConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        if cfg.heads == 0 || cfg.model_dim % cfg.heads != 0 {
            return Err(EncoderError::HeadCount {
                dim: cfg.model_dim,
                heads: cfg.heads,
            });
        }
        if cfg.speech_layers == 0 || cfg.shared_layers == 0 || cfg.n_units == 0 {
            return Err(EncoderError::Config(
                "speech_layers, shared_layers and n_units must be positive".into(),
            ));
        }
        if !(0.0..=1.0).contains(&cfg.mask_prob) || !(0.0..=1.0).contains(&cfg.swap_prob) {
            return Err(EncoderError::Config(
                "mask_prob and swap_prob must lie in [0, 1]".into(),
            ));
        }
        if cfg.mask_len == 0 || cfg.tau_pred <= 0.0 {
            return Err(EncoderError::Config(
                "mask_len must be >= 1 and tau_pred positive".into(),
            ));
        }
        let in_proj = Linear::init(cfg.feat_dim, cfg.model_dim, rng);
        let pos = normal_param(vec![cfg.max_seq_len, cfg.model_dim], 0.02, rng);
        let mask_embedding = normal_param(vec![cfg.feat_dim], 0.1, rng);
        let speech = (0..cfg.speech_layers)
            .map(|_| EncoderLayer::init(cfg.model_dim, cfg.heads, cfg.ffn_mult, rng))
            .collect();
        let shared = (0..cfg.shared_layers)
            .map(|_| EncoderLayer::init(cfg.model_dim, cfg.heads, cfg.ffn_mult, rng))
            .collect();
        let unit_embeddings = normal_param(vec![cfg.n_units, cfg.model_dim], 1.0, rng);
        let layer_weights =
            Tensor::param(vec![0.0; cfg.shared_layers + 1], vec![cfg.shared_layers + 1])
                .expect("finite init");
        let pred_proj = {
            let w = Linear::init(cfg.model_dim, cfg.model_dim, rng);
            w.weight
        };
        let class_embeddings = normal_param(vec![cfg.n_units, cfg.model_dim], 1.0, rng);
        let proj = Mlp::init(cfg.model_dim, cfg.proj_hidden, cfg.embed_dim, rng);
        Ok(LanguageEncoder {
            cfg: cfg.clone(),
            in_proj,
            pos,
            mask_embedding,
            speech,
            shared,
            unit_embeddings,
            layer_weights,
            pred_proj,
            class_embeddings,
            proj,
        })
    }

    /// Draw this sequence's mask and swap positions from the given streams.
    pub fn draw_corruption(
        &self,
        seq: &FeatureSequence,
        mask_rng: &mut ChaCha8Rng,
        swap_rng: &mut ChaCha8Rng,
    ) -> Corruption {
        if seq.modality == Modality::Text {
            return Corruption::none(seq.len());
        }
        let mask = draw_span_mask(seq.len(), self.cfg.mask_prob, self.cfg.mask_len, mask_rng);
        let swaps = draw_swap_positions(&mask.indicator, self.cfg.swap_prob, swap_rng);
        Corruption { mask, swaps }
    }

    fn validate_seq(&self, seq: &FeatureSequence) -> Result<()> {
        if seq.len() == 0 {
            return Err(EncoderError::EmptySequence);
        }
        if let Some(ids) = &seq.unit_ids {
            if let Some(&bad) = ids.iter().find(|id| **id as usize >= self.cfg.n_units) {
                return Err(EncoderError::UnitIdOutOfRange {
                    id: bad,
                    n_units: self.cfg.n_units,
                });
            }
        }
        match seq.modality {
            Modality::Text => {
                if seq.unit_ids.is_none() {
                    return Err(EncoderError::MissingUnitIds);
                }
            }
            Modality::Audio | Modality::Fused => {
                if seq.feat_dim() != self.cfg.feat_dim {
                    return Err(EncoderError::Config(format!(
                        "frame dim {} does not match encoder feat_dim {}",
                        seq.feat_dim(),
                        self.cfg.feat_dim
                    )));
                }
                if seq.len() > self.cfg.max_seq_len {
                    return Err(EncoderError::SequenceTooLong {
                        len: seq.len(),
                        max: self.cfg.max_seq_len,
                    });
                }
            }
        }
        Ok(())
    }

    /// Run the tower on a tape. `corruption` carries training-time mask and
    /// swap decisions; pass `None` for inference (no masking, no swapping).
    pub fn encode_on_tape(
        &self,
        tape: &mut Tape,
        seq: &FeatureSequence,
        corruption: Option<&Corruption>,
    ) -> Result<LanguageForward> {
        self.validate_seq(seq)?;
        let t = seq.len();

        let boundary = match seq.modality {
            Modality::Text => {
                // unit embeddings enter the shared stack directly
                let ids = self.unit_ids_of(seq)?;
                let table = tape.leaf(&self.unit_embeddings);
                tape.gather_rows(table, &ids)?
            }
            Modality::Audio | Modality::Fused => {
                let frames = tape.leaf(&seq.frames);
                let masked = match corruption {
                    Some(c) if c.mask.any() => {
                        let mv = tape.leaf(&self.mask_embedding);
                        let mmat = tape.broadcast_row(mv, t)?;
                        tape.select_rows(frames, mmat, &c.mask.indicator)?
                    }
                    _ => frames,
                };
                let mut x = self.in_proj.apply(tape, masked)?;
                let pos = tape.leaf(&self.pos);
                let pos_t = tape.slice_rows(pos, 0, t)?;
                x = tape.add(x, pos_t)?;
                for layer in &self.speech {
                    x = layer.apply(tape, x)?;
                }
                match corruption {
                    Some(c) if c.swaps.iter().any(|s| *s) => {
                        let ids = self.unit_ids_of(seq)?;
                        let table = tape.leaf(&self.unit_embeddings);
                        let units = tape.gather_rows(table, &ids)?;
                        tape.select_rows(x, units, &c.swaps)?
                    }
                    _ => x,
                }
            }
        };

        let mut layer_outs = vec![boundary];
        let mut x = boundary;
        for layer in &self.shared {
            x = layer.apply(tape, x)?;
            layer_outs.push(x);
        }

        let pred_logits = self.pred_logits_on_tape(tape, x)?;

        let lw = tape.leaf(&self.layer_weights);
        let n_layers = self.cfg.shared_layers + 1;
        let lw_row = tape.reshape(lw, vec![1, n_layers])?;
        let w_row = tape.softmax_rows(lw_row, 1.0)?;
        let w = tape.reshape(w_row, vec![n_layers])?;
        let pooled = tape.lin_comb(&layer_outs, w)?;
        let tm = tape.mean_rows(pooled)?;
        let c = tape.numel(tm);
        let row = tape.reshape(tm, vec![1, c])?;
        let z = self.proj.apply(tape, row)?;
        let zn = tape.l2_normalize_rows(z)?;
        let embedding = tape.reshape(zn, vec![self.cfg.embed_dim])?;

        Ok(LanguageForward {
            embedding,
            pred_logits,
        })
    }

    fn pred_logits_on_tape(&self, tape: &mut Tape, hidden: Var) -> Result<Var> {
        let kp = tape.leaf(&self.pred_proj);
        let proj = tape.matmul(hidden, kp)?;
        let pn = tape.l2_normalize_rows(proj)?;
        let ec = tape.leaf(&self.class_embeddings);
        let en = tape.l2_normalize_rows(ec)?;
        let sims = tape.matmul_tb(pn, en)?;
        Ok(tape.scale(sims, 1.0 / self.cfg.tau_pred)?)
    }

    fn unit_ids_of(&self, seq: &FeatureSequence) -> Result<Vec<usize>> {
        let ids = seq.unit_ids.as_ref().ok_or(EncoderError::MissingUnitIds)?;
        Ok(ids.iter().map(|id| *id as usize).collect())
    }

    /// Inference entry point: embed one sequence, deterministic, no
    /// masking or swapping.
    pub fn encode(&self, seq: &FeatureSequence) -> Result<Tensor> {
        let mut tape = Tape::new();
        let out = self.encode_on_tape(&mut tape, seq, None)?;
        Ok(tape.extract(out.embedding))
    }

    /// Span-mask a sequence: masked frames are replaced by the learned mask
    /// vector. Returns the masked sequence and the mask indicator.
    pub fn apply_span_mask(
        &self,
        seq: &FeatureSequence,
        rng: &mut ChaCha8Rng,
    ) -> Result<(FeatureSequence, Vec<bool>)> {
        self.validate_seq(seq)?;
        let mask = draw_span_mask(seq.len(), self.cfg.mask_prob, self.cfg.mask_len, rng);
        let mut frames = seq.frames.data().to_vec();
        let f = seq.feat_dim();
        for (i, m) in mask.indicator.iter().enumerate() {
            if *m {
                frames[i * f..(i + 1) * f].copy_from_slice(self.mask_embedding.data());
            }
        }
        let out = FeatureSequence::new(
            seq.modality,
            Tensor::new(frames, seq.frames.shape().to_vec())?,
            seq.unit_ids.clone(),
        )?;
        Ok((out, mask.indicator))
    }

    /// Replace hidden rows at randomly chosen unmasked positions with the
    /// corresponding unit embeddings.
    pub fn random_swap(
        &self,
        hidden: &Tensor,
        unit_ids: &[u32],
        mask: &[bool],
        swap_prob: f32,
        rng: &mut ChaCha8Rng,
    ) -> Result<Tensor> {
        if hidden.shape().len() != 2 || hidden.shape()[0] != unit_ids.len() {
            return Err(EncoderError::UnitIdLength {
                ids: unit_ids.len(),
                frames: hidden.shape()[0],
            });
        }
        if swap_prob > 0.0 && unit_ids.is_empty() {
            return Err(EncoderError::MissingUnitIds);
        }
        let swaps = draw_swap_positions(mask, swap_prob, rng);
        let c = hidden.shape()[1];
        let mut out = hidden.data().to_vec();
        for (i, s) in swaps.iter().enumerate() {
            if *s {
                let id = unit_ids[i] as usize;
                if id >= self.cfg.n_units {
                    return Err(EncoderError::UnitIdOutOfRange {
                        id: unit_ids[i],
                        n_units: self.cfg.n_units,
                    });
                }
                out[i * c..(i + 1) * c]
                    .copy_from_slice(&self.unit_embeddings.data()[id * c..(id + 1) * c]);
            }
        }
        Ok(Tensor::new(out, hidden.shape().to_vec())?)
    }

    /// Per-position distribution over unit classes: temperature softmax of
    /// cosine similarities between projected hidden states and class
    /// embeddings.
    pub fn masked_prediction_probs(&self, hidden: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let h = tape.leaf(hidden);
        let logits = self.pred_logits_on_tape(&mut tape, h)?;
        let probs = tape.softmax_rows(logits, 1.0)?;
        Ok(tape.extract(probs))
    }

    pub fn params(&self) -> Vec<(String, &Tensor)> {
        let mut v = self.in_proj.params("in_proj");
        v.push(("pos".into(), &self.pos));
        v.push(("mask_embed".into(), &self.mask_embedding));
        for (i, layer) in self.speech.iter().enumerate() {
            v.extend(layer.params(&format!("speech{i}")));
        }
        for (i, layer) in self.shared.iter().enumerate() {
            v.extend(layer.params(&format!("shared{i}")));
        }
        v.push(("unit_embed".into(), &self.unit_embeddings));
        v.push(("layer_weights".into(), &self.layer_weights));
        v.push(("pred_proj".into(), &self.pred_proj));
        v.push(("class_embed".into(), &self.class_embeddings));
        v.extend(self.proj.params("proj"));
        v
    }

    pub fn params_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let mut v = self.in_proj.params_mut("in_proj");
        v.push(("pos".into(), &mut self.pos));
        v.push(("mask_embed".into(), &mut self.mask_embedding));
        for (i, layer) in self.speech.iter_mut().enumerate() {
            v.extend(layer.params_mut(&format!("speech{i}")));
        }
        for (i, layer) in self.shared.iter_mut().enumerate() {
            v.extend(layer.params_mut(&format!("shared{i}")));
        }
        v.push(("unit_embed".into(), &mut self.unit_embeddings));
        v.push(("layer_weights".into(), &mut self.layer_weights));
        v.push(("pred_proj".into(), &mut self.pred_proj));
        v.push(("class_embed".into(), &mut self.class_embeddings));
        v.extend(self.proj.params_mut("proj"));
        v
    }

    pub fn layer_weights(&self) -> &Tensor {
        &self.layer_weights
    }
}

/// Softmax-normalize the layer weights, combine the layer outputs, and mean
/// over time: the pooled [c] representation fed to the projector.
pub fn layer_weighted_pool(layer_outputs: &[Tensor], layer_weights: &Tensor) -> Result<Tensor> {
    if layer_outputs.is_empty() {
        return Err(EncoderError::Config("no layer outputs to pool".into()));
    }
    let mut tape = Tape::new();
    let vars: Vec<Var> = layer_outputs.iter().map(|t| tape.leaf(t)).collect();
    let lw = tape.leaf(layer_weights);
    let n = layer_outputs.len();
    let row = tape.reshape(lw, vec![1, n])?;
    let sm = tape.softmax_rows(row, 1.0)?;
    let w = tape.reshape(sm, vec![n])?;
    let pooled = tape.lin_comb(&vars, w)?;
    let tm = tape.mean_rows(pooled)?;
    Ok(tape.extract(tm))
}
