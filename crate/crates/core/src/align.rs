//! Supervised autoregressive alignment at toy scale: an MLP projector maps
//! encoder tokens into a small causal text decoder, trained with
//! teacher-forced next-token cross-entropy. Also the toy vocabulary, box
//! normalization, grounding-task formatting, and JSON-lines sample files.

use std::fmt::Write as _;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mae::epoch_batches;
use crate::numkernel::{
    AdamW, Bound, Graph, LrSchedule, ParamStore, Rng, ScheduleKind, Tensor, Var, RNG_ALGORITHM,
};
use crate::patchstat::load_image;
use crate::synth;
use crate::trace::LossRecord;
use crate::transformer::{self, init_block, init_linear, init_norm, init_normal};
use crate::vit::{Encoder, TokenGrid};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const SEP: usize = 3;
pub const COORD_BASE: usize = 4;
pub const COORD_TOKENS: usize = 1000;
pub const WORD_BASE: usize = COORD_BASE + COORD_TOKENS;
pub const WORD_TOKENS: usize = 32;
pub const VOCAB_SIZE: usize = WORD_BASE + WORD_TOKENS;

/// The last four word slots are task markers; text words hash into the rest.
const TEXT_WORDS: usize = WORD_TOKENS - 4;
pub const TASK_OCR: usize = WORD_BASE + TEXT_WORDS;
pub const TASK_BOX_TO_TEXT: usize = TASK_OCR + 1;
pub const TASK_TEXT_TO_BOX: usize = TASK_OCR + 2;
pub const TASK_BOX_TO_CATEGORY: usize = TASK_OCR + 3;

pub const TEMPLATE_VERSION: &str = "grounding-v1";

pub fn coord_token(v: u16) -> usize {
    COORD_BASE + v as usize
}

/// Stable word-to-token mapping (FNV-1a over the lowercased word).
pub fn word_token(word: &str) -> usize {
    let mut h: u32 = 0x811c_9dc5;
    for b in word.to_lowercase().bytes() {
        h ^= b as u32;
        h = h.wrapping_mul(0x0100_0193);
    }
    WORD_BASE + (h as usize % TEXT_WORDS)
}

/// Token for glyph `index` in the OCR task.
pub fn glyph_token(index: usize) -> usize {
    WORD_BASE + index % TEXT_WORDS
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct ToyDecoderConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub max_sequence: usize,
}

impl Default for ToyDecoderConfig {
    fn default() -> Self {
        Self {
            vocab_size: VOCAB_SIZE,
            dim: 32,
            depth: 1,
            heads: 2,
            max_sequence: 64,
        }
    }
}

impl ToyDecoderConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 4 {
            return Err(Error::Usage(format!(
                "vocabulary of {} is too small",
                self.vocab_size
            )));
        }
        if self.dim == 0
            || self.heads == 0
            || !self.dim.is_multiple_of(self.heads)
            || self.max_sequence < 2
        {
            return Err(Error::Geometry(format!("invalid decoder config {self:?}")));
        }
        Ok(())
    }
}

/// Box coordinates on the integer `[0, 999]` grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormalizedBBox {
    pub x0: u16,
    pub y0: u16,
    pub x1: u16,
    pub y1: u16,
}

impl NormalizedBBox {
    pub fn tokens(&self) -> [usize; 4] {
        [self.x0, self.y0, self.x1, self.y1].map(coord_token)
    }
}

/// `floor(c / dim · 1000)` clamped to 999, for a pixel box `(x0, y0, x1, y1)`.
pub fn normalize_bbox(bbox: [f64; 4], width: f64, height: f64) -> Result<NormalizedBBox> {
    if !(width > 0.0 && height > 0.0) {
        return Err(Error::Range(format!(
            "image size {width}x{height} must be positive"
        )));
    }
    let [x0, y0, x1, y1] = bbox;
    let inside = |v: f64, dim: f64| (0.0..=dim).contains(&v);
    if !(inside(x0, width) && inside(x1, width) && inside(y0, height) && inside(y1, height))
        || x0 > x1
        || y0 > y1
    {
        return Err(Error::Range(format!(
            "box {bbox:?} outside a {width}x{height} image"
        )));
    }
    let q = |v: f64, dim: f64| ((v * 1000.0 / dim).floor() as u16).min(999);
    Ok(NormalizedBBox {
        x0: q(x0, width),
        y0: q(y0, height),
        x1: q(x1, width),
        y1: q(y1, height),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub enum SampleImage {
    Inline(Tensor),
    Path(PathBuf),
}

impl SampleImage {
    pub fn load(&self) -> Result<Tensor> {
        match self {
            SampleImage::Inline(t) => Ok(t.clone()),
            SampleImage::Path(p) => load_image(p),
        }
    }
}

/// One multimodal training sequence. `loss_mask` covers `prompt ++ target`.
#[derive(Clone, Debug, PartialEq)]
pub struct SFTSample {
    pub image: SampleImage,
    pub prompt: Vec<usize>,
    pub target: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

impl SFTSample {
    /// Loss on every target token.
    pub fn new(image: SampleImage, prompt: Vec<usize>, target: Vec<usize>) -> Self {
        let loss_mask = prompt
            .iter()
            .map(|_| false)
            .chain(target.iter().map(|_| true))
            .collect();
        Self {
            image,
            prompt,
            target,
            loss_mask,
        }
    }

    pub fn tokens(&self) -> Vec<usize> {
        self.prompt.iter().chain(&self.target).copied().collect()
    }
}

#[derive(Serialize, Deserialize)]
struct SampleRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_b64: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    image_path: Option<PathBuf>,
    prompt: Vec<usize>,
    target: Vec<usize>,
    loss_mask: Vec<bool>,
}

impl SampleRecord {
    fn from_sample(s: &SFTSample) -> Self {
        let (image_b64, image_shape, image_path) = match &s.image {
            SampleImage::Inline(t) => {
                let bytes: Vec<u8> = t.data().iter().flat_map(|v| v.to_le_bytes()).collect();
                (Some(B64.encode(bytes)), Some(t.shape().to_vec()), None)
            }
            SampleImage::Path(p) => (None, None, Some(p.clone())),
        };
        Self {
            image_b64,
            image_shape,
            image_path,
            prompt: s.prompt.clone(),
            target: s.target.clone(),
            loss_mask: s.loss_mask.clone(),
        }
    }

    fn into_sample(self) -> Result<SFTSample> {
        let image = match (self.image_b64, self.image_shape, self.image_path) {
            (Some(b64), Some(shape), None) => {
                let bytes = B64
                    .decode(b64)
                    .map_err(|e| Error::Usage(format!("bad base64 image payload: {e}")))?;
                if bytes.len() % 4 != 0 {
                    return Err(Error::Usage(
                        "image payload is not a whole number of f32 values".into(),
                    ));
                }
                let data = bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                SampleImage::Inline(Tensor::new(shape, data)?)
            }
            (None, None, Some(p)) => SampleImage::Path(p),
            _ => {
                return Err(Error::Usage(
                    "sample needs either an inline image with shape or an image path".into(),
                ))
            }
        };
        if self.loss_mask.len() != self.prompt.len() + self.target.len() {
            return Err(Error::Usage(
                "loss mask length differs from prompt + target".into(),
            ));
        }
        Ok(SFTSample {
            image,
            prompt: self.prompt,
            target: self.target,
            loss_mask: self.loss_mask,
        })
    }
}

pub fn write_jsonl(path: &Path, samples: &[SFTSample]) -> Result<()> {
    let mut file =
        std::io::BufWriter::new(std::fs::File::create(path).map_err(|e| Error::io(path, e))?);
    for s in samples {
        serde_json::to_writer(&mut file, &SampleRecord::from_sample(s))?;
        file.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    file.flush().map_err(|e| Error::io(path, e))
}

pub fn read_jsonl(path: &Path) -> Result<Vec<SFTSample>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str::<SampleRecord>(&line)?.into_sample()?);
    }
    Ok(out)
}

/// An annotated region of one image, in pixel coordinates.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundingTuple {
    pub category: String,
    pub bbox: [f64; 4],
    pub text: String,
    #[serde(default)]
    pub confidence: Option<f32>,
}

pub const MIN_WORDS: usize = 2;
pub const MAX_WORDS: usize = 64;
pub const MIN_CONFIDENCE: f32 = 0.5;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterReport {
    pub kept: usize,
    pub too_short: usize,
    pub too_long: usize,
    pub low_confidence: usize,
    pub invalid_box: usize,
}

/// Box-to-text, text-to-box and box-to-category samples for each tuple that
/// passes the word-count and confidence filters. Output order is shuffled
/// with `rng`.
///
/// Templates:
/// `[BOS, B2T, x0, y0, x1, y1] → [words…, EOS]`,
/// `[BOS, T2B, words…] → [x0, y0, x1, y1, EOS]`,
/// `[BOS, B2C, x0, y0, x1, y1] → [category, EOS]`.
pub fn format_grounding_tasks(
    image: &SampleImage,
    tuples: &[GroundingTuple],
    width: f64,
    height: f64,
    rng: &mut Rng,
) -> (Vec<SFTSample>, FilterReport) {
    let mut report = FilterReport::default();
    let mut out = Vec::new();
    for t in tuples {
        let words: Vec<usize> = t.text.split_whitespace().map(word_token).collect();
        if words.len() < MIN_WORDS {
            report.too_short += 1;
            continue;
        }
        if words.len() > MAX_WORDS {
            report.too_long += 1;
            continue;
        }
        if t.confidence.is_some_and(|c| c < MIN_CONFIDENCE) {
            report.low_confidence += 1;
            continue;
        }
        let Ok(nb) = normalize_bbox(t.bbox, width, height) else {
            report.invalid_box += 1;
            continue;
        };
        report.kept += 1;
        let coords = nb.tokens();
        let with_eos = |v: &[usize]| v.iter().copied().chain([EOS]).collect::<Vec<_>>();
        out.push(SFTSample::new(
            image.clone(),
            [BOS, TASK_BOX_TO_TEXT].into_iter().chain(coords).collect(),
            with_eos(&words),
        ));
        out.push(SFTSample::new(
            image.clone(),
            [BOS, TASK_TEXT_TO_BOX]
                .into_iter()
                .chain(words.iter().copied())
                .collect(),
            with_eos(&coords),
        ));
        out.push(SFTSample::new(
            image.clone(),
            [BOS, TASK_BOX_TO_CATEGORY]
                .into_iter()
                .chain(coords)
                .collect(),
            with_eos(&[word_token(&t.category)]),
        ));
    }
    rng.shuffle(&mut out);
    (out, report)
}

/// Glyph reading samples: `[BOS, OCR] → [glyph token, EOS]`.
pub fn glyph_ocr_samples(n: usize, size: usize, rng: &mut Rng) -> Vec<SFTSample> {
    (0..n)
        .map(|i| {
            let glyph = i % synth::GLYPHS.len();
            let image = synth::glyph_image(glyph, size, rng);
            SFTSample::new(
                SampleImage::Inline(image),
                vec![BOS, TASK_OCR],
                vec![glyph_token(glyph), EOS],
            )
        })
        .collect()
}

/// Two-layer GELU projector under `projector.`.
pub fn init_projector(in_dim: usize, out_dim: usize, rng: &mut Rng) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    init_linear(&mut store, "projector.fc1", in_dim, out_dim, rng)?;
    init_linear(&mut store, "projector.fc2", out_dim, out_dim, rng)?;
    store.set_meta("role", "projector");
    Ok(store)
}

pub fn projector_forward(g: &mut Graph, p: &Bound, tokens: Var) -> Result<Var> {
    transformer::mlp(g, p, "projector", tokens)
}

/// One text-space embedding per visual token.
pub fn project_tokens(grid: &TokenGrid, projector: &ParamStore) -> Result<Tensor> {
    let w = projector.get("projector.fc1.weight")?;
    if w.shape()[0] != grid.dim() {
        return Err(Error::Incompatible(format!(
            "projector expects width {}, grid has {}",
            w.shape()[0],
            grid.dim()
        )));
    }
    let mut g = Graph::new();
    let p = projector.bind(&mut g, false);
    let x = g.constant(grid.data.clone());
    let y = projector_forward(&mut g, &p, x)?;
    Ok(g.value(y).clone())
}

/// Token and position embeddings, causal blocks, final norm, output head.
pub fn init_decoder(config: &ToyDecoderConfig, rng: &mut Rng) -> Result<ParamStore> {
    config.validate()?;
    let d = config.dim;
    let mut store = ParamStore::new();
    init_normal(&mut store, "tok_embed", &[config.vocab_size, d], 0.02, rng)?;
    init_normal(
        &mut store,
        "pos_embed",
        &[config.max_sequence, d],
        0.02,
        rng,
    )?;
    for i in 0..config.depth {
        init_block(&mut store, &format!("blocks.{i}"), d, 4 * d, rng)?;
    }
    init_norm(&mut store, "norm", d)?;
    init_linear(&mut store, "lm_head", d, config.vocab_size, rng)?;
    store.set_meta("role", "decoder");
    store.set_meta("decoder_config", serde_json::to_string(config)?);
    store.set_meta("seed", rng.seed().to_string());
    store.set_meta("rng", RNG_ALGORITHM);
    Ok(store)
}

/// Mean next-token cross-entropy over masked positions of `tokens`, with
/// `visual` `[N, D]` embeddings placed before the text. Position `j` of the
/// text is predicted from everything before it; it counts when
/// `loss_mask[j]` is set (position 0 has no predecessor and never counts).
pub fn ar_loss(
    g: &mut Graph,
    p: &Bound,
    config: &ToyDecoderConfig,
    visual: Var,
    tokens: &[usize],
    loss_mask: &[bool],
) -> Result<Var> {
    let vs = g.shape(visual).to_vec();
    if vs.len() != 2 || vs[1] != config.dim {
        return Err(Error::Incompatible(format!(
            "decoder width {} cannot take visual embeddings of shape {vs:?}",
            config.dim
        )));
    }
    if tokens.len() != loss_mask.len() {
        return Err(Error::Usage(format!(
            "{} tokens but {} mask entries",
            tokens.len(),
            loss_mask.len()
        )));
    }
    if let Some(&t) = tokens.iter().find(|&&t| t >= config.vocab_size) {
        return Err(Error::ClassRange {
            index: t,
            classes: config.vocab_size,
        });
    }
    let picked: Vec<usize> = (1..tokens.len()).filter(|&j| loss_mask[j]).collect();
    if picked.is_empty() {
        return Err(Error::DegenerateSample(
            "loss mask selects no predicted position".into(),
        ));
    }
    let n = vs[0];
    let len = n + tokens.len() - 1;
    if len > config.max_sequence {
        return Err(Error::Range(format!(
            "sequence of {len} positions exceeds the decoder limit {}",
            config.max_sequence
        )));
    }
    let table = p.get("tok_embed")?;
    let text = g.gather_rows(table, &tokens[..tokens.len() - 1])?;
    let x = g.concat_rows(visual, text)?;
    let pos_table = p.get("pos_embed")?;
    let pos = g.gather_rows(pos_table, &(0..len).collect::<Vec<_>>())?;
    let mut x = g.add(x, pos)?;
    for i in 0..config.depth {
        x = transformer::block(g, p, &format!("blocks.{i}"), x, config.heads, true)?;
    }
    let x = transformer::norm(g, p, "norm", x)?;
    // hidden state at sequence position n + j - 1 predicts text token j
    let rows: Vec<usize> = picked.iter().map(|&j| n + j - 1).collect();
    let h = g.gather_rows(x, &rows)?;
    let logits = transformer::linear(g, p, "lm_head", h)?;
    let targets: Vec<usize> = picked.iter().map(|&j| tokens[j]).collect();
    g.cross_entropy(logits, &targets)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AlignConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub weight_decay: f32,
    pub warmup_steps: usize,
    pub template_version: String,
}

impl Default for AlignConfig {
    fn default() -> Self {
        Self {
            epochs: 1,
            batch_size: 8,
            lr: 1e-3,
            weight_decay: 0.05,
            warmup_steps: 10,
            template_version: TEMPLATE_VERSION.into(),
        }
    }
}

impl AlignConfig {
    pub fn validate(&self) -> Result<()> {
        if self.template_version != TEMPLATE_VERSION {
            return Err(Error::Usage(format!(
                "unknown template version `{}`, expected `{TEMPLATE_VERSION}`",
                self.template_version
            )));
        }
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Usage(format!("invalid alignment schedule {self:?}")));
        }
        Ok(())
    }
}

/// Trained state after alignment. Only `encoder` is meant to be kept; the
/// decoder and projector are returned for evaluation.
pub struct AlignOutcome {
    pub encoder: ParamStore,
    pub decoder: ParamStore,
    pub projector: ParamStore,
    pub trace: Vec<LossRecord>,
}

/// Decoder identity string recorded in aligned encoder metadata.
pub fn decoder_identity(decoder: &ParamStore) -> String {
    let mut s = String::new();
    if let Some(seed) = decoder.meta("seed") {
        let _ = write!(s, "seed={seed};");
    }
    let _ = write!(s, "sha256={}", &decoder.sha256()[..16]);
    s
}

fn sample_loss(
    g: &mut Graph,
    backbone: &dyn Encoder,
    enc: &Bound,
    proj: &Bound,
    dec: &Bound,
    config: &ToyDecoderConfig,
    image: &Tensor,
    sample: &SFTSample,
) -> Result<Var> {
    let grid = backbone.forward(g, enc, image)?;
    let visual = projector_forward(g, proj, grid.var)?;
    ar_loss(g, dec, config, visual, &sample.tokens(), &sample.loss_mask)
}

/// Full-parameter alignment of encoder, projector and decoder on `data`.
#[allow(clippy::too_many_arguments)]
pub fn train_align(
    mut encoder: ParamStore,
    backbone: &dyn Encoder,
    mut decoder: ParamStore,
    decoder_config: &ToyDecoderConfig,
    mut projector: ParamStore,
    data: &[SFTSample],
    config: &AlignConfig,
    rng: &mut Rng,
) -> Result<AlignOutcome> {
    config.validate()?;
    decoder_config.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("alignment data".into()));
    }
    let images = data
        .iter()
        .map(|s| s.image.load())
        .collect::<Result<Vec<_>>>()?;
    let identity = decoder_identity(&decoder);
    let steps_per_epoch = data.len().div_ceil(config.batch_size);
    let schedule = LrSchedule {
        base_lr: config.lr,
        warmup_steps: config.warmup_steps,
        total_steps: config.epochs * steps_per_epoch,
        kind: ScheduleKind::Cosine,
    };
    let mut opts = [
        AdamW::new(config.weight_decay),
        AdamW::new(config.weight_decay),
        AdamW::new(config.weight_decay),
    ];
    let mut trace = Vec::new();
    let mut step = 0;
    for _ in 0..config.epochs {
        for batch in epoch_batches(data.len(), config.batch_size, rng) {
            let mut g = Graph::new();
            let eb = encoder.bind(&mut g, true);
            let pb = projector.bind(&mut g, true);
            let db = decoder.bind(&mut g, true);
            let mut total: Option<Var> = None;
            for &i in &batch {
                let l = sample_loss(
                    &mut g,
                    backbone,
                    &eb,
                    &pb,
                    &db,
                    decoder_config,
                    &images[i],
                    &data[i],
                )?;
                total = Some(match total {
                    Some(t) => g.add(t, l)?,
                    None => l,
                });
            }
            let loss = g.scale(total.expect("non-empty batch"), 1.0 / batch.len() as f32);
            let value = g.value(loss).item();
            if !value.is_finite() {
                return Err(Error::Divergence {
                    stage: "align".into(),
                    step,
                    loss: value,
                });
            }
            let grads = g.backward(loss)?;
            let lr = schedule.at(step);
            opts[0].step(&mut encoder, &eb.collect_grads(&g, &grads), lr)?;
            opts[1].step(&mut projector, &pb.collect_grads(&g, &grads), lr)?;
            opts[2].step(&mut decoder, &db.collect_grads(&g, &grads), lr)?;
            trace.push(LossRecord {
                step,
                loss: value,
                lr,
            });
            step += 1;
        }
    }
    encoder.set_meta("aligned_decoder", identity);
    encoder.set_meta("stage", "align");
    Ok(AlignOutcome {
        encoder,
        decoder,
        projector,
        trace,
    })
}

/// Mean [`ar_loss`] over `data`, without gradients.
pub fn mean_ar_loss(
    backbone: &dyn Encoder,
    encoder: &ParamStore,
    projector: &ParamStore,
    decoder: &ParamStore,
    decoder_config: &ToyDecoderConfig,
    data: &[SFTSample],
) -> Result<f32> {
    if data.is_empty() {
        return Err(Error::EmptyInput("evaluation data".into()));
    }
    let mut sum = 0.0f64;
    for s in data {
        let mut g = Graph::new();
        let eb = encoder.bind(&mut g, false);
        let pb = projector.bind(&mut g, false);
        let db = decoder.bind(&mut g, false);
        let l = sample_loss(
            &mut g,
            backbone,
            &eb,
            &pb,
            &db,
            decoder_config,
            &s.image.load()?,
            s,
        )?;
        sum += g.value(l).item() as f64;
    }
    Ok((sum / data.len() as f64) as f32)
}
