//! The full recognizer: per-modality encoders and attenders, a decoder with a
//! selectable fusion strategy, teacher-forced training forward, and beam
//! search decoding.

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{Attender, AttenderParams, AttenderVars};
use crate::autodiff::{Binder, Graph, Var};
use crate::checkpoint;
use crate::corpus::Utterance;
use crate::error::{Error, Result};
use crate::fusion::{ModalityScorer, ScorerParams};
use crate::rnn::{
    encode, lstm_step, EncoderConfig, EncoderParams, EncoderVars, LstmParams, LstmState, LstmVars,
};
use crate::tensor::Tensor;

pub const SOS: usize = 0;
pub const EOS: usize = 1;
pub const UNK: usize = 2;
/// Data symbols start after the special tokens.
pub const SYMBOL_BASE: usize = 3;

pub const AUDIO: usize = 0;
pub const VIDEO: usize = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum FusionStrategy {
    AudioOnly,
    VideoOnly,
    ConcatFusion,
    ModalityAttention,
}

impl FusionStrategy {
    pub fn uses_audio(&self) -> bool {
        !matches!(self, FusionStrategy::VideoOnly)
    }

    pub fn uses_video(&self) -> bool {
        !matches!(self, FusionStrategy::AudioOnly)
    }

    pub fn name(&self) -> &'static str {
        match self {
            FusionStrategy::AudioOnly => "audio_only",
            FusionStrategy::VideoOnly => "video_only",
            FusionStrategy::ConcatFusion => "concat",
            FusionStrategy::ModalityAttention => "modality_attention",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.trim() {
            "audio_only" => Ok(FusionStrategy::AudioOnly),
            "video_only" => Ok(FusionStrategy::VideoOnly),
            "concat" => Ok(FusionStrategy::ConcatFusion),
            "modality_attention" => Ok(FusionStrategy::ModalityAttention),
            other => Err(Error::Config(format!("unknown fusion strategy {other:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Data symbols; the vocabulary adds SOS/EOS/UNK on top.
    pub data_symbols: usize,
    pub embed_dim: usize,
    pub audio_dim: usize,
    pub video_dim: usize,
    pub audio_encoder: Option<EncoderConfig>,
    pub video_encoder: Option<EncoderConfig>,
    pub decoder_hidden: usize,
    pub attention_hidden: usize,
    pub scorer_hidden: usize,
    pub strategy: FusionStrategy,
}

impl ModelConfig {
    /// Desk-scale defaults: 4x-subsampling audio encoder, rate-preserving
    /// video encoder, both 32 hidden units per direction.
    pub fn desk_default(strategy: FusionStrategy) -> Self {
        ModelConfig {
            data_symbols: 20,
            embed_dim: 16,
            audio_dim: 16,
            video_dim: 16,
            audio_encoder: strategy.uses_audio().then(|| EncoderConfig {
                hidden: 32,
                subsample: vec![true, true],
            }),
            video_encoder: strategy.uses_video().then(|| EncoderConfig {
                hidden: 32,
                subsample: vec![false, false],
            }),
            decoder_hidden: 64,
            attention_hidden: 64,
            scorer_hidden: 16,
            strategy,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.data_symbols + SYMBOL_BASE
    }

    /// Dimension of the context vector the decoder output layer consumes.
    pub fn context_dim(&self) -> usize {
        let ea = self.audio_encoder.as_ref().map_or(0, |e| e.output_dim());
        let ev = self.video_encoder.as_ref().map_or(0, |e| e.output_dim());
        match self.strategy {
            FusionStrategy::AudioOnly => ea,
            FusionStrategy::VideoOnly => ev,
            FusionStrategy::ConcatFusion => ea + ev,
            FusionStrategy::ModalityAttention => ea,
        }
    }

    /// The encoder whose final state seeds the decoder: audio when present,
    /// video otherwise.
    fn init_encoder(&self) -> Option<&EncoderConfig> {
        self.audio_encoder.as_ref().or(self.video_encoder.as_ref())
    }

    pub fn validate(&self) -> Result<()> {
        if self.data_symbols == 0 {
            return Err(Error::Config("data_symbols must be positive".into()));
        }
        if self.strategy.uses_audio() && self.audio_encoder.is_none() {
            return Err(Error::Config(format!(
                "strategy {} requires an audio encoder",
                self.strategy.name()
            )));
        }
        if self.strategy.uses_video() && self.video_encoder.is_none() {
            return Err(Error::Config(format!(
                "strategy {} requires a video encoder",
                self.strategy.name()
            )));
        }
        if self.strategy == FusionStrategy::ModalityAttention {
            let ea = self.audio_encoder.as_ref().unwrap().output_dim();
            let ev = self.video_encoder.as_ref().unwrap().output_dim();
            if ea != ev {
                return Err(Error::Config(format!(
                    "modality attention needs equal context dimensions, got audio {ea} vs video {ev}"
                )));
            }
        }
        let init = self
            .init_encoder()
            .ok_or_else(|| Error::Config("at least one encoder required".into()))?;
        if self.decoder_hidden != init.output_dim() {
            return Err(Error::Config(format!(
                "decoder_hidden ({}) must equal the initializing encoder's output dimension ({})",
                self.decoder_hidden,
                init.output_dim()
            )));
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Reference symbols to target tokens (EOS appended by the caller when
/// needed).
pub fn tokens_from_symbols(symbols: &[u32]) -> Vec<usize> {
    symbols.iter().map(|&s| s as usize + SYMBOL_BASE).collect()
}

#[derive(Clone, Debug)]
pub struct ModelParams {
    /// `[V, embed_dim]`
    pub embedding: Tensor,
    pub audio_enc: Option<EncoderParams>,
    pub video_enc: Option<EncoderParams>,
    pub audio_att: Option<AttenderParams>,
    pub video_att: Option<AttenderParams>,
    pub scorer: Option<ScorerParams>,
    pub decoder: LstmParams,
    /// `[V, decoder_hidden + context_dim]`
    pub out_w: Tensor,
    /// `[V]`
    pub out_b: Tensor,
}

impl ModelParams {
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let v = cfg.vocab_size();
        let es = 1.0 / (cfg.embed_dim as f64).sqrt();
        let embedding = Tensor::new(
            vec![v, cfg.embed_dim],
            (0..v * cfg.embed_dim).map(|_| rng.random_range(-es..es)).collect(),
        )?;
        let audio_enc = cfg
            .audio_encoder
            .as_ref()
            .map(|e| EncoderParams::init(e, cfg.audio_dim, &mut rng));
        let video_enc = cfg
            .video_encoder
            .as_ref()
            .map(|e| EncoderParams::init(e, cfg.video_dim, &mut rng));
        let audio_att = cfg.audio_encoder.as_ref().map(|e| {
            AttenderParams::init(cfg.attention_hidden, e.output_dim(), cfg.decoder_hidden, &mut rng)
        });
        let video_att = cfg.video_encoder.as_ref().map(|e| {
            AttenderParams::init(cfg.attention_hidden, e.output_dim(), cfg.decoder_hidden, &mut rng)
        });
        let scorer = (cfg.strategy == FusionStrategy::ModalityAttention)
            .then(|| ScorerParams::init(2, cfg.context_dim(), cfg.scorer_hidden, &mut rng));
        let decoder = LstmParams::init(
            cfg.embed_dim + cfg.context_dim(),
            cfg.decoder_hidden,
            &mut rng,
        );
        let od = cfg.decoder_hidden + cfg.context_dim();
        let os = 1.0 / (od as f64).sqrt();
        let out_w = Tensor::new(
            vec![v, od],
            (0..v * od).map(|_| rng.random_range(-os..os)).collect(),
        )?;
        let out_b = Tensor::zeros(vec![v]);
        Ok(ModelParams {
            embedding,
            audio_enc,
            video_enc,
            audio_att,
            video_att,
            scorer,
            decoder,
            out_w,
            out_b,
        })
    }

    pub fn to_map(&self) -> BTreeMap<String, Tensor> {
        let mut map = BTreeMap::new();
        map.insert("embedding".to_string(), self.embedding.clone());
        if let Some(e) = &self.audio_enc {
            e.insert_into("audio_enc", &mut map);
        }
        if let Some(e) = &self.video_enc {
            e.insert_into("video_enc", &mut map);
        }
        if let Some(a) = &self.audio_att {
            a.insert_into("audio_att", &mut map);
        }
        if let Some(a) = &self.video_att {
            a.insert_into("video_att", &mut map);
        }
        if let Some(s) = &self.scorer {
            s.insert_into("scorer", &mut map);
        }
        self.decoder.insert_into("decoder", &mut map);
        map.insert("output.w".to_string(), self.out_w.clone());
        map.insert("output.b".to_string(), self.out_b.clone());
        map
    }

    pub fn from_map(cfg: &ModelConfig, map: &BTreeMap<String, Tensor>) -> Result<Self> {
        cfg.validate()?;
        let get = |name: &str| {
            map.get(name)
                .cloned()
                .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))
        };
        let audio_enc = match &cfg.audio_encoder {
            Some(e) => Some(EncoderParams::take_from("audio_enc", e.layers(), map)?),
            None => None,
        };
        let video_enc = match &cfg.video_encoder {
            Some(e) => Some(EncoderParams::take_from("video_enc", e.layers(), map)?),
            None => None,
        };
        let audio_att = cfg
            .audio_encoder
            .as_ref()
            .map(|_| AttenderParams::take_from("audio_att", map))
            .transpose()?;
        let video_att = cfg
            .video_encoder
            .as_ref()
            .map(|_| AttenderParams::take_from("video_att", map))
            .transpose()?;
        let scorer = (cfg.strategy == FusionStrategy::ModalityAttention)
            .then(|| ScorerParams::take_from("scorer", 2, map))
            .transpose()?;
        Ok(ModelParams {
            embedding: get("embedding")?,
            audio_enc,
            video_enc,
            audio_att,
            video_att,
            scorer,
            decoder: LstmParams::take_from("decoder", map)?,
            out_w: get("output.w")?,
            out_b: get("output.b")?,
        })
    }

    /// Replaces every tensor from a name-keyed map (shape-checked).
    pub fn assign_from_map(&mut self, map: &BTreeMap<String, Tensor>) -> Result<()> {
        let mut current = self.to_map();
        for (name, t) in map {
            match current.get(name) {
                Some(old) if old.shape() == t.shape() => {
                    current.insert(name.clone(), t.clone());
                }
                Some(old) => {
                    return Err(Error::Checkpoint(format!(
                        "parameter {name}: shape {:?} incompatible with {:?}",
                        t.shape(),
                        old.shape()
                    )))
                }
                None => {
                    return Err(Error::Checkpoint(format!("unknown parameter {name}")));
                }
            }
        }
        *self = ModelParams::from_map_untyped(self, &current)?;
        Ok(())
    }

    fn from_map_untyped(template: &ModelParams, map: &BTreeMap<String, Tensor>) -> Result<Self> {
        let mut out = template.clone();
        out.embedding = map["embedding"].clone();
        if let Some(e) = &template.audio_enc {
            out.audio_enc = Some(EncoderParams::take_from("audio_enc", e.layers.len(), map)?);
        }
        if let Some(e) = &template.video_enc {
            out.video_enc = Some(EncoderParams::take_from("video_enc", e.layers.len(), map)?);
        }
        if template.audio_att.is_some() {
            out.audio_att = Some(AttenderParams::take_from("audio_att", map)?);
        }
        if template.video_att.is_some() {
            out.video_att = Some(AttenderParams::take_from("video_att", map)?);
        }
        if let Some(s) = &template.scorer {
            out.scorer = Some(ScorerParams::take_from("scorer", s.modalities(), map)?);
        }
        out.decoder = LstmParams::take_from("decoder", map)?;
        out.out_w = map["output.w"].clone();
        out.out_b = map["output.b"].clone();
        Ok(out)
    }
}

impl ModelParams {
    /// Visits every parameter tensor mutably under its canonical name.
    pub fn visit_mut(&mut self, f: &mut dyn FnMut(String, &mut Tensor)) {
        f("embedding".to_string(), &mut self.embedding);
        if let Some(e) = &mut self.audio_enc {
            e.visit_mut("audio_enc", f);
        }
        if let Some(e) = &mut self.video_enc {
            e.visit_mut("video_enc", f);
        }
        if let Some(a) = &mut self.audio_att {
            a.visit_mut("audio_att", f);
        }
        if let Some(a) = &mut self.video_att {
            a.visit_mut("video_att", f);
        }
        if let Some(s) = &mut self.scorer {
            s.visit_mut("scorer", f);
        }
        self.decoder.visit_mut("decoder", f);
        f("output.w".to_string(), &mut self.out_w);
        f("output.b".to_string(), &mut self.out_b);
    }
}

pub fn save_checkpoint(path: &Path, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    checkpoint::save(path, &cfg.to_json()?, &params.to_map())
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let loaded = checkpoint::load(path)?;
    let cfg: ModelConfig = serde_json::from_str(&loaded.config_json)?;
    let params = ModelParams::from_map(&cfg, &loaded.params)?;
    Ok((cfg, params))
}

/// Model parameters bound into one graph, ready to run utterances.
pub struct BoundModel<'c> {
    pub cfg: &'c ModelConfig,
    embedding: Var,
    audio_enc: Option<EncoderVars>,
    video_enc: Option<EncoderVars>,
    audio_att: Option<AttenderVars>,
    video_att: Option<AttenderVars>,
    pub scorer: Option<ModalityScorer>,
    decoder: LstmVars,
    out_w: Var,
    out_b: Var,
    /// Name -> leaf handle for every trainable parameter.
    bindings: Vec<(String, Var)>,
}

impl<'c> BoundModel<'c> {
    pub fn new(
        g: &mut Graph,
        cfg: &'c ModelConfig,
        params: &ModelParams,
        trainable: bool,
    ) -> Result<Self> {
        let mut binder = Binder::new(g, trainable);
        Self::bind(&mut binder, cfg, params)
    }

    /// Binds with only the parameters matching `prefixes` marked trainable.
    pub fn new_filtered(
        g: &mut Graph,
        cfg: &'c ModelConfig,
        params: &ModelParams,
        prefixes: Vec<String>,
    ) -> Result<Self> {
        let mut binder = Binder::with_filter(g, prefixes);
        Self::bind(&mut binder, cfg, params)
    }

    fn bind(b: &mut Binder, cfg: &'c ModelConfig, params: &ModelParams) -> Result<Self> {
        cfg.validate()?;
        let embedding = b.leaf("embedding".to_string(), &params.embedding);
        let audio_enc = params.audio_enc.as_ref().map(|p| p.bind_in(b, "audio_enc"));
        let video_enc = params.video_enc.as_ref().map(|p| p.bind_in(b, "video_enc"));
        let audio_att = params.audio_att.as_ref().map(|p| p.bind_in(b, "audio_att"));
        let video_att = params.video_att.as_ref().map(|p| p.bind_in(b, "video_att"));
        let scorer = params
            .scorer
            .as_ref()
            .map(|p| ModalityScorer::bind_in(b, p, "scorer"));
        let decoder = params.decoder.bind_in(b, "decoder");
        let out_w = b.leaf("output.w".to_string(), &params.out_w);
        let out_b = b.leaf("output.b".to_string(), &params.out_b);
        let bindings = b.take_bindings();
        Ok(BoundModel {
            cfg,
            embedding,
            audio_enc,
            video_enc,
            audio_att,
            video_att,
            scorer,
            decoder,
            out_w,
            out_b,
            bindings,
        })
    }

    /// Gradients accumulated by the last backward sweep, keyed by parameter
    /// name; parameters the loss never touched get zeros.
    pub fn gradients(&self, g: &Graph) -> BTreeMap<String, Tensor> {
        let mut out = BTreeMap::new();
        for (name, var) in &self.bindings {
            let shape = g.value(*var).shape().to_vec();
            let data = g
                .grad(*var)
                .map(|d| d.to_vec())
                .unwrap_or_else(|| vec![0.0; g.value(*var).numel()]);
            out.insert(
                name.clone(),
                Tensor::new(shape, data).expect("grad matches value shape"),
            );
        }
        out
    }

    /// One decoder recurrence: previous token is embedded, concatenated with
    /// the previous context, and pushed through the decoder LSTM.
    pub fn decoder_step(
        &self,
        g: &mut Graph,
        s_prev: LstmState,
        y_prev: usize,
        c_prev: Var,
    ) -> Result<LstmState> {
        if y_prev >= self.cfg.vocab_size() {
            return Err(Error::Vocabulary {
                id: y_prev,
                vocab: self.cfg.vocab_size(),
            });
        }
        let emb = g.row(self.embedding, y_prev)?;
        let x = g.concat(&[emb, c_prev], 0)?;
        lstm_step(g, &self.decoder, x, s_prev)
    }

    /// Hidden half of a packed decoder state.
    pub fn decoder_hidden_of(&self, g: &mut Graph, state: LstmState) -> Result<Var> {
        self.decoder.hidden_of(g, state)
    }

    /// Logits over the vocabulary from the context-aware state `[s; c]`.
    pub fn output_logits(&self, g: &mut Graph, s: Var, c: Var) -> Result<Var> {
        let sc = g.concat(&[s, c], 0)?;
        let proj = g.matvec(self.out_w, sc)?;
        g.add(proj, self.out_b)
    }
}

/// Per-utterance encoded state: memories, attenders with cached projections,
/// and the decoder's initial state.
pub struct EncodedUtterance {
    pub audio: Option<Attender>,
    pub video: Option<Attender>,
    pub init_state: LstmState,
    pub context_dim: usize,
}

/// Encodes the streams an utterance needs under the configured strategy.
/// `audio_valid` / `video_valid`, when set, restrict encoding to the leading
/// frames (anything after is treated as padding and never touched).
pub fn encode_utterance(
    g: &mut Graph,
    model: &BoundModel,
    utt: &Utterance,
    audio_valid: Option<usize>,
    video_valid: Option<usize>,
) -> Result<EncodedUtterance> {
    let cfg = model.cfg;
    let take_stream = |g: &mut Graph,
                       stream: Option<&crate::corpus::StreamData>,
                       valid: Option<usize>,
                       name: &str|
     -> Result<Var> {
        let s = stream.ok_or_else(|| {
            Error::Config(format!(
                "strategy {} requires the {name} stream",
                cfg.strategy.name()
            ))
        })?;
        let full = g.constant(s.features.clone());
        match valid {
            None => Ok(full),
            Some(n) => {
                let t = g.value(full).shape()[0];
                if n == 0 || n > t {
                    return Err(Error::Contract(format!(
                        "{name} valid length {n} out of range for {t} frames"
                    )));
                }
                g.slice(full, 0, 0, n)
            }
        }
    };

    let mut audio = None;
    let mut video = None;
    let mut init = None;
    if cfg.strategy.uses_audio() {
        let xs = take_stream(g, utt.audio.as_ref(), audio_valid, "audio")?;
        let enc = encode(
            g,
            cfg.audio_encoder.as_ref().unwrap(),
            model.audio_enc.as_ref().unwrap(),
            xs,
        )?;
        init = Some(g.concat(&[enc.final_h, enc.final_c], 0)?);
        audio = Some(Attender::new(
            g,
            model.audio_att.unwrap(),
            enc.memory,
            None,
        )?);
    }
    if cfg.strategy.uses_video() {
        let xs = take_stream(g, utt.video.as_ref(), video_valid, "video")?;
        let enc = encode(
            g,
            cfg.video_encoder.as_ref().unwrap(),
            model.video_enc.as_ref().unwrap(),
            xs,
        )?;
        if init.is_none() {
            init = Some(g.concat(&[enc.final_h, enc.final_c], 0)?);
        }
        video = Some(Attender::new(
            g,
            model.video_att.unwrap(),
            enc.memory,
            None,
        )?);
    }
    Ok(EncodedUtterance {
        audio,
        video,
        init_state: init.expect("validated: at least one encoder"),
        context_dim: cfg.context_dim(),
    })
}

/// Attention and fusion telemetry for one decoding step.
#[derive(Clone, Debug, Default)]
pub struct StepTelemetry {
    pub audio_attention: Option<Vec<f64>>,
    pub video_attention: Option<Vec<f64>>,
    /// `(alpha_audio, alpha_video)`; present only under modality attention.
    pub modality_weights: Option<[f64; 2]>,
}

#[derive(Clone, Debug, Default)]
pub struct ForwardTelemetry {
    pub steps: Vec<StepTelemetry>,
    pub loss: f64,
}

/// One attend-fuse-project step shared by training and decoding.
/// Returns `(context, logits, telemetry)`.
fn step_outputs(
    g: &mut Graph,
    model: &mut BoundModel,
    enc: &EncodedUtterance,
    s: Var,
) -> Result<(Var, Var, StepTelemetry)> {
    let mut tele = StepTelemetry::default();
    let mut audio_ctx = None;
    let mut video_ctx = None;
    if let Some(att) = &enc.audio {
        let (c, w) = att.attend(g, s)?;
        tele.audio_attention = Some(g.value(w).data().to_vec());
        audio_ctx = Some(c);
    }
    if let Some(att) = &enc.video {
        let (c, w) = att.attend(g, s)?;
        tele.video_attention = Some(g.value(w).data().to_vec());
        video_ctx = Some(c);
    }
    let context = match model.cfg.strategy {
        FusionStrategy::AudioOnly => audio_ctx.expect("validated"),
        FusionStrategy::VideoOnly => video_ctx.expect("validated"),
        FusionStrategy::ConcatFusion => {
            g.concat(&[audio_ctx.expect("validated"), video_ctx.expect("validated")], 0)?
        }
        FusionStrategy::ModalityAttention => {
            let scorer = model.scorer.as_mut().expect("validated");
            let step = scorer.fuse(
                g,
                &[
                    (AUDIO, audio_ctx.expect("validated")),
                    (VIDEO, video_ctx.expect("validated")),
                ],
            )?;
            tele.modality_weights = Some([step.alphas[0], step.alphas[1]]);
            step.fused
        }
    };
    let logits = {
        let m: &BoundModel = model;
        m.output_logits(g, s, context)?
    };
    Ok((context, logits, tele))
}

fn softmax_values(logits: &[f64]) -> Vec<f64> {
    let maxv = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&x| (x - maxv).exp()).collect();
    let denom: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / denom).collect()
}

fn sample_from(probs: &[f64], rng: &mut ChaCha12Rng) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

#[derive(Clone, Debug)]
pub struct ForwardOptions {
    /// Probability of feeding the model's own sampled previous output instead
    /// of the ground-truth token.
    pub ss_rate: f64,
    pub label_smoothing: f64,
    /// Leading-frame counts when the stored streams carry trailing padding.
    pub audio_valid: Option<usize>,
    pub video_valid: Option<usize>,
}

impl Default for ForwardOptions {
    fn default() -> Self {
        ForwardOptions {
            ss_rate: 0.0,
            label_smoothing: 0.1,
            audio_valid: None,
            video_valid: None,
        }
    }
}

/// Teacher-forced (optionally schedule-sampled) forward pass; returns the
/// mean label-smoothed cross entropy over the `L + 1` decoding steps.
pub fn forward_teacher_forced(
    g: &mut Graph,
    model: &mut BoundModel,
    utt: &Utterance,
    opts: &ForwardOptions,
    rng: &mut ChaCha12Rng,
) -> Result<(Var, ForwardTelemetry)> {
    if !(0.0..=1.0).contains(&opts.ss_rate) {
        return Err(Error::Contract(format!(
            "schedule sampling rate {} outside [0, 1]",
            opts.ss_rate
        )));
    }
    if utt.symbols.is_empty() {
        return Err(Error::EmptySequence("utterance has no symbols"));
    }
    if let Some(sc) = model.scorer.as_mut() {
        sc.reset(g);
    }
    let enc = encode_utterance(g, model, utt, opts.audio_valid, opts.video_valid)?;

    let mut targets = tokens_from_symbols(&utt.symbols);
    targets.push(EOS);
    let steps = targets.len();

    let mut telemetry = ForwardTelemetry::default();
    let mut s = enc.init_state;
    let mut c_prev = g.constant(Tensor::zeros(vec![enc.context_dim]));
    let mut y_prev = SOS;
    let mut logit_rows = Vec::with_capacity(steps);
    for (i, &target) in targets.iter().enumerate() {
        s = model.decoder_step(g, s, y_prev, c_prev)?;
        let hidden = model.decoder_hidden_of(g, s)?;
        let (context, logits, tele) = step_outputs(g, model, &enc, hidden)?;
        telemetry.steps.push(tele);
        let row = g.reshape(logits, vec![1, model.cfg.vocab_size()])?;
        logit_rows.push(row);
        c_prev = context;
        if i + 1 < steps {
            y_prev = if opts.ss_rate > 0.0 && rng.random::<f64>() < opts.ss_rate {
                sample_from(&softmax_values(g.value(logits).data()), rng)
            } else {
                target
            };
        }
    }
    let logits_all = g.concat(&logit_rows, 0)?;
    let loss = g.cross_entropy_ls(logits_all, &targets, opts.label_smoothing, None)?;
    telemetry.loss = g.value(loss).data()[0];
    Ok((loss, telemetry))
}

#[derive(Clone, Debug)]
pub struct DecodeOptions {
    pub beam_width: usize,
    pub temperature: f64,
    pub max_len: usize,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            beam_width: 5,
            temperature: 1.0,
            max_len: 16,
        }
    }
}

/// Final hypothesis of a decode, with per-step telemetry along its path.
#[derive(Clone, Debug, PartialEq)]
pub struct DecodeResult {
    /// EOS-terminated token sequence (SOS not included).
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Per-step content attention over the audio memory (empty without an
    /// audio branch).
    pub audio_attention: Vec<Vec<f64>>,
    pub video_attention: Vec<Vec<f64>>,
    /// Per-step `(alpha_audio, alpha_video)`; empty unless the strategy is
    /// modality attention.
    pub modality_weights: Vec<[f64; 2]>,
    /// Set when the hypothesis hit `max_len` and was closed with EOS.
    pub forced_eos: bool,
}

impl DecodeResult {
    /// Hypothesis tokens without the terminating EOS.
    pub fn hypothesis_tokens(&self) -> &[usize] {
        match self.tokens.split_last() {
            Some((&last, head)) if last == EOS => head,
            _ => &self.tokens,
        }
    }

    /// Hypothesis mapped back to data-symbol ids; non-symbol tokens map to
    /// `u32::MAX` so they never match a reference symbol.
    pub fn hypothesis_symbols(&self) -> Vec<u32> {
        self.hypothesis_tokens()
            .iter()
            .map(|&t| {
                if t >= SYMBOL_BASE {
                    (t - SYMBOL_BASE) as u32
                } else {
                    u32::MAX
                }
            })
            .collect()
    }
}

#[derive(Clone)]
struct Hypothesis {
    tokens: Vec<usize>,
    log_prob: f64,
    state: LstmState,
    c_prev: Var,
    scorer_states: Option<Vec<LstmState>>,
    audio_attention: Vec<Vec<f64>>,
    video_attention: Vec<Vec<f64>>,
    modality_weights: Vec<[f64; 2]>,
    finished: bool,
    forced: bool,
}

fn log_softmax_scaled(logits: &[f64], temperature: f64) -> Vec<f64> {
    let scaled: Vec<f64> = logits.iter().map(|&x| x / temperature).collect();
    let maxv = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = maxv
        + scaled
            .iter()
            .map(|&x| (x - maxv).exp())
            .sum::<f64>()
            .ln();
    scaled.into_iter().map(|x| x - lse).collect()
}

/// Beam search over EOS-terminated hypotheses scored by summed
/// temperature-scaled log probabilities. Finished hypotheses stay in the beam
/// and compete by total log probability, without length normalization. Ties
/// keep the earlier-generated hypothesis (expansion order: beam order, then
/// token id). Hypotheses still open at `max_len` are closed with EOS and
/// flagged.
pub fn beam_search(
    g: &mut Graph,
    model: &mut BoundModel,
    utt: &Utterance,
    opts: &DecodeOptions,
) -> Result<DecodeResult> {
    if opts.beam_width == 0 {
        return Err(Error::Contract("beam_width must be at least 1".into()));
    }
    if !(opts.temperature > 0.0) {
        return Err(Error::Contract(format!(
            "temperature must be positive, got {}",
            opts.temperature
        )));
    }
    if let Some(sc) = model.scorer.as_mut() {
        sc.reset(g);
    }
    let enc = encode_utterance(g, model, utt, None, None)?;
    let c0 = g.constant(Tensor::zeros(vec![enc.context_dim]));
    let fresh_scorer_states = model.scorer.as_ref().map(|s| s.states());
    let mut beam = vec![Hypothesis {
        tokens: Vec::new(),
        log_prob: 0.0,
        state: enc.init_state,
        c_prev: c0,
        scorer_states: fresh_scorer_states,
        audio_attention: Vec::new(),
        video_attention: Vec::new(),
        modality_weights: Vec::new(),
        finished: false,
        forced: false,
    }];

    for _ in 0..opts.max_len {
        if beam.iter().all(|h| h.finished) {
            break;
        }
        let mut candidates: Vec<Hypothesis> = Vec::new();
        for hyp in &beam {
            if hyp.finished {
                candidates.push(hyp.clone());
                continue;
            }
            if let Some(states) = &hyp.scorer_states {
                model
                    .scorer
                    .as_mut()
                    .expect("scorer present")
                    .set_states(states.clone());
            }
            let y_prev = *hyp.tokens.last().unwrap_or(&SOS);
            let s = model.decoder_step(g, hyp.state, y_prev, hyp.c_prev)?;
            let hidden = model.decoder_hidden_of(g, s)?;
            let (context, logits, tele) = step_outputs(g, model, &enc, hidden)?;
            let next_scorer_states = model.scorer.as_ref().map(|sc| sc.states());
            let logps = log_softmax_scaled(g.value(logits).data(), opts.temperature);
            for (tok, &lp) in logps.iter().enumerate() {
                let mut next = hyp.clone();
                next.tokens.push(tok);
                next.log_prob += lp;
                next.state = s;
                next.c_prev = context;
                next.scorer_states = next_scorer_states.clone();
                if let Some(w) = &tele.audio_attention {
                    next.audio_attention.push(w.clone());
                }
                if let Some(w) = &tele.video_attention {
                    next.video_attention.push(w.clone());
                }
                if let Some(mw) = tele.modality_weights {
                    next.modality_weights.push(mw);
                }
                next.finished = tok == EOS;
                candidates.push(next);
            }
        }
        // Stable sort: equal scores keep generation order.
        candidates.sort_by(|a, b| b.log_prob.partial_cmp(&a.log_prob).expect("finite scores"));
        candidates.truncate(opts.beam_width);
        beam = candidates;
    }

    for hyp in &mut beam {
        if !hyp.finished {
            hyp.tokens.push(EOS);
            hyp.finished = true;
            hyp.forced = true;
        }
    }
    // First strictly-best hypothesis: ties keep the earlier-generated one.
    let mut best_idx = 0;
    for (i, h) in beam.iter().enumerate().skip(1) {
        if h.log_prob > beam[best_idx].log_prob {
            best_idx = i;
        }
    }
    let best = beam.swap_remove(best_idx);
    Ok(DecodeResult {
        tokens: best.tokens,
        log_prob: best.log_prob,
        audio_attention: best.audio_attention,
        video_attention: best.video_attention,
        modality_weights: best.modality_weights,
        forced_eos: best.forced,
    })
}

/// Greedy decoding: beam width 1, temperature 1.
pub fn greedy_decode(
    g: &mut Graph,
    model: &mut BoundModel,
    utt: &Utterance,
    max_len: usize,
) -> Result<DecodeResult> {
    beam_search(
        g,
        model,
        utt,
        &DecodeOptions {
            beam_width: 1,
            temperature: 1.0,
            max_len,
        },
    )
}

/// Convenience wrapper: fresh graph, non-trainable bind, one decode.
pub fn decode_utterance(
    cfg: &ModelConfig,
    params: &ModelParams,
    utt: &Utterance,
    opts: &DecodeOptions,
) -> Result<DecodeResult> {
    let mut g = Graph::new();
    let mut model = BoundModel::new(&mut g, cfg, params, false)?;
    beam_search(&mut g, &mut model, utt, opts)
}
