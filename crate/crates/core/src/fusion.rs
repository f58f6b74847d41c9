//! Miniature hybrid-fusion network for image + speech-spectrogram inputs.
//!
//! Four sub-networks produce equally wide embeddings: a plain conv stack and
//! a backbone per modality. Their outputs are crossed between modalities
//! (`F_i = plain(image) + backbone(speech)`, `F_s = plain(speech) +
//! backbone(image)`), gated by an element-wise product, sent through three
//! dense heads, and finally mixed by softmax-normalized learned weights.

use std::fmt;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attrib::Predictor;
use crate::error::{Error, Result};
use crate::nn::checkpoint::{read_layers, read_tensor, read_u32, write_layers, write_tensor, write_u32};
use crate::nn::{
    softmax, softmax_backward, softmax_last_axis, BatchNorm, Conv2d, Dense, Layer, MaxPool2d, Padding, Param,
    Sequential,
};
use crate::tensor::Tensor;

/// Where the modalities are crossed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Topology {
    /// Cross after the backbones, VGG-style backbone.
    Proposed,
    /// Cross both on feature maps and on embeddings.
    Baseline1TwoCrisscross,
    /// Cross on the conv feature maps, before the embedding layers.
    Baseline2CrisscrossBefore,
    /// Cross after the backbones, compact backbone.
    Baseline3CrisscrossAfter,
}

impl Topology {
    pub const ALL: [Topology; 4] = [
        Topology::Proposed,
        Topology::Baseline1TwoCrisscross,
        Topology::Baseline2CrisscrossBefore,
        Topology::Baseline3CrisscrossAfter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Topology::Proposed => "proposed",
            Topology::Baseline1TwoCrisscross => "baseline1_two_crisscross",
            Topology::Baseline2CrisscrossBefore => "baseline2_crisscross_before",
            Topology::Baseline3CrisscrossAfter => "baseline3_crisscross_after",
        }
    }

    fn crosses_maps(self) -> bool {
        matches!(
            self,
            Topology::Baseline1TwoCrisscross | Topology::Baseline2CrisscrossBefore
        )
    }

    fn crosses_embeddings(self) -> bool {
        !matches!(self, Topology::Baseline2CrisscrossBefore)
    }

    pub fn default_backbone(self) -> BackboneKind {
        match self {
            Topology::Proposed => BackboneKind::Vgg,
            _ => BackboneKind::Compact,
        }
    }
}

impl FromStr for Topology {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "proposed" => Topology::Proposed,
            "baseline1" | "baseline1_two_crisscross" => Topology::Baseline1TwoCrisscross,
            "baseline2" | "baseline2_crisscross_before" => Topology::Baseline2CrisscrossBefore,
            "baseline3" | "baseline3_crisscross_after" => Topology::Baseline3CrisscrossAfter,
            other => return Err(Error::invalid("topology", format!("unknown topology '{other}'"))),
        })
    }
}

impl fmt::Display for Topology {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Conv stand-in for the pretrained backbone.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BackboneKind {
    /// Two 3x3 convolutions per block.
    Vgg,
    /// One 3x3 convolution per block.
    Compact,
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vgg" => Ok(BackboneKind::Vgg),
            "compact" => Ok(BackboneKind::Compact),
            other => Err(Error::invalid("backbone", format!("unknown backbone '{other}'"))),
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BackboneKind::Vgg => "vgg",
            BackboneKind::Compact => "compact",
        })
    }
}

/// Which inputs reach the network. The unimodal modes zero the other input
/// and serve as ablations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum InputMode {
    Both,
    ImageOnly,
    SpeechOnly,
}

impl FromStr for InputMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "both" => Ok(InputMode::Both),
            "image" | "image_only" => Ok(InputMode::ImageOnly),
            "speech" | "speech_only" => Ok(InputMode::SpeechOnly),
            other => Err(Error::invalid("input mode", format!("unknown input mode '{other}'"))),
        }
    }
}

impl fmt::Display for InputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            InputMode::Both => "both",
            InputMode::ImageOnly => "image_only",
            InputMode::SpeechOnly => "speech_only",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FusionConfig {
    pub topology: Topology,
    pub backbone: BackboneKind,
    pub input_mode: InputMode,
    pub rows: usize,
    pub cols: usize,
    /// Filters per block of the plain conv stack; each block ends in a 2x2 pool.
    pub plain_widths: Vec<usize>,
    /// Filters per block of the backbone.
    pub backbone_widths: Vec<usize>,
    pub embedding: usize,
    pub head_width: usize,
    pub classes: usize,
    pub seed: u64,
}

impl Default for FusionConfig {
    /// Full-width network on 128x128 inputs.
    fn default() -> Self {
        FusionConfig {
            topology: Topology::Proposed,
            backbone: BackboneKind::Vgg,
            input_mode: InputMode::Both,
            rows: 128,
            cols: 128,
            plain_widths: vec![64, 128, 256],
            backbone_widths: vec![64, 128, 256],
            embedding: 512,
            head_width: 1024,
            classes: 4,
            seed: 0,
        }
    }
}

impl FusionConfig {
    /// A narrow variant that trains in seconds on a single core.
    pub fn mini(rows: usize, cols: usize) -> Self {
        FusionConfig {
            rows,
            cols,
            plain_widths: vec![4, 8, 8],
            backbone_widths: vec![4, 8, 8],
            embedding: 32,
            head_width: 32,
            ..FusionConfig::default()
        }
    }

    pub fn with_topology(mut self, topology: Topology) -> Self {
        self.topology = topology;
        self.backbone = topology.default_backbone();
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("rows", self.rows),
            ("cols", self.cols),
            ("embedding", self.embedding),
            ("head_width", self.head_width),
            ("classes", self.classes),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::invalid("fusion config", format!("{name} must be positive")));
        }
        if self.plain_widths.is_empty() || self.backbone_widths.is_empty() {
            return Err(Error::invalid("fusion config", "conv stacks need at least one block"));
        }
        if self.plain_widths.iter().chain(&self.backbone_widths).any(|&w| w == 0) {
            return Err(Error::invalid("fusion config", "conv widths must be positive"));
        }
        let blocks = self.plain_widths.len().max(self.backbone_widths.len());
        if self.rows >> blocks == 0 || self.cols >> blocks == 0 {
            return Err(Error::invalid(
                "fusion config",
                format!(
                    "{}x{} input is too small for {blocks} pooling blocks",
                    self.rows, self.cols
                ),
            ));
        }
        if self.topology.crosses_maps() && self.plain_map() != self.backbone_map() {
            return Err(Error::invalid(
                "fusion config",
                format!(
                    "{} adds feature maps, but the plain stack yields {:?} and the backbone {:?}",
                    self.topology,
                    self.plain_map(),
                    self.backbone_map()
                ),
            ));
        }
        Ok(())
    }

    fn map_shape(&self, widths: &[usize]) -> (usize, usize, usize) {
        let b = widths.len();
        (self.rows >> b, self.cols >> b, *widths.last().unwrap())
    }

    fn plain_map(&self) -> (usize, usize, usize) {
        self.map_shape(&self.plain_widths)
    }

    fn backbone_map(&self) -> (usize, usize, usize) {
        self.map_shape(&self.backbone_widths)
    }

    /// Serializes to the `key = value` text format.
    pub fn to_kv(&self) -> String {
        let list = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        format!(
            "topology = {}\nbackbone = {}\ninput_mode = {}\nrows = {}\ncols = {}\nplain_widths = {}\nbackbone_widths = {}\nembedding = {}\nhead_width = {}\nclasses = {}\nseed = {}\n",
            self.topology,
            self.backbone,
            self.input_mode,
            self.rows,
            self.cols,
            list(&self.plain_widths),
            list(&self.backbone_widths),
            self.embedding,
            self.head_width,
            self.classes,
            self.seed
        )
    }

    /// Applies `key = value` lines on top of `self`. Blank lines and `#`
    /// comments are ignored; unknown keys are rejected. Setting `topology`
    /// also resets `backbone` to that topology's default unless `backbone`
    /// is given explicitly.
    pub fn apply_kv(mut self, text: &str) -> Result<Self> {
        let mut explicit_backbone = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| Error::format("config", format!("line {}: expected key = value", lineno + 1)))?;
            let num = |v: &str| {
                v.parse::<usize>()
                    .map_err(|_| Error::format("config", format!("line {}: '{v}' is not an integer", lineno + 1)))
            };
            match key {
                "topology" => self = self.with_topology(value.parse()?),
                "backbone" => explicit_backbone = Some(value.parse()?),
                "input_mode" => self.input_mode = value.parse()?,
                "rows" => self.rows = num(value)?,
                "cols" => self.cols = num(value)?,
                "size" => {
                    self.rows = num(value)?;
                    self.cols = self.rows;
                }
                "plain_widths" => self.plain_widths = value.split(',').map(|v| num(v.trim())).collect::<Result<_>>()?,
                "backbone_widths" => {
                    self.backbone_widths = value.split(',').map(|v| num(v.trim())).collect::<Result<_>>()?
                }
                "embedding" => self.embedding = num(value)?,
                "head_width" => self.head_width = num(value)?,
                "classes" => self.classes = num(value)?,
                "seed" => {
                    self.seed = value
                        .parse()
                        .map_err(|_| Error::format("config", format!("line {}: bad seed '{value}'", lineno + 1)))?
                }
                other => {
                    return Err(Error::format(
                        "config",
                        format!("line {}: unknown key '{other}'", lineno + 1),
                    ))
                }
            }
        }
        if let Some(b) = explicit_backbone {
            self.backbone = b;
        }
        Ok(self)
    }
}

// ---------------------------------------------------------------------------
// fusion arithmetic

/// Criss-cross intermediate fusion of the four sub-network embeddings.
/// Returns `(F_i, F_s, F_mul)`.
pub fn intermediate_fusion(
    plain_image: &[f64],
    plain_speech: &[f64],
    backbone_image: &[f64],
    backbone_speech: &[f64],
) -> Result<(Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = plain_image.len();
    for (name, v) in [
        ("plain speech", plain_speech),
        ("backbone image", backbone_image),
        ("backbone speech", backbone_speech),
    ] {
        if v.len() != n {
            return Err(Error::shape(
                "intermediate fusion",
                format!("{name} embedding"),
                n,
                v.len(),
            ));
        }
    }
    let f_i: Vec<f64> = plain_image.iter().zip(backbone_speech).map(|(a, b)| a + b).collect();
    let f_s: Vec<f64> = plain_speech.iter().zip(backbone_image).map(|(a, b)| a + b).collect();
    let f_mul = f_i.iter().zip(&f_s).map(|(a, b)| a * b).collect();
    Ok((f_i, f_s, f_mul))
}

#[derive(Debug, Clone, PartialEq)]
pub struct LateFusion {
    /// Softmax-normalized branch weights.
    pub weights: [f64; 3],
    /// Weighted logit sum.
    pub logits: Vec<f64>,
    pub probabilities: Vec<f64>,
}

/// Weighted late fusion of the speech, image, and product-branch logits.
pub fn late_fusion(speech: &[f64], image: &[f64], product: &[f64], raw_weights: [f64; 3]) -> Result<LateFusion> {
    if image.len() != speech.len() || product.len() != speech.len() {
        return Err(Error::shape(
            "late fusion",
            "logit length",
            speech.len(),
            format!("{} / {}", image.len(), product.len()),
        ));
    }
    let w = softmax(&raw_weights);
    let logits: Vec<f64> = (0..speech.len())
        .map(|k| w[0] * speech[k] + w[1] * image[k] + w[2] * product[k])
        .collect();
    Ok(LateFusion {
        weights: [w[0], w[1], w[2]],
        probabilities: softmax(&logits),
        logits,
    })
}

// ---------------------------------------------------------------------------
// the network

#[derive(Debug, Clone)]
pub struct ParallelNetMini {
    config: FusionConfig,
    stem: Sequential,
    plain_image: Sequential,
    plain_speech: Sequential,
    backbone_image: Sequential,
    backbone_speech: Sequential,
    neck_plain_image: Sequential,
    neck_plain_speech: Sequential,
    neck_backbone_image: Option<Sequential>,
    neck_backbone_speech: Option<Sequential>,
    head_speech: Sequential,
    head_image: Sequential,
    head_product: Sequential,
    fusion_weights: Param,
    cache: Option<FusionCache>,
}

#[derive(Debug, Clone)]
struct FusionCache {
    f_image: Tensor,
    f_speech: Tensor,
    branch_logits: [Tensor; 3],
    weights: Vec<f64>,
    probabilities: Tensor,
}

fn conv_stack(in_channels: usize, widths: &[usize], convs_per_block: usize, rng: &mut ChaCha8Rng) -> Sequential {
    let mut layers = Vec::new();
    let mut c = in_channels;
    for &w in widths {
        for _ in 0..convs_per_block {
            layers.push(Layer::Conv2d(Conv2d::new(c, w, (3, 3), 1, Padding::Same, rng)));
            layers.push(Layer::relu());
            c = w;
        }
        layers.push(Layer::MaxPool2d(MaxPool2d::new(2, 2)));
    }
    Sequential::new(layers)
}

fn neck(map: (usize, usize, usize), embedding: usize, rng: &mut ChaCha8Rng) -> Sequential {
    let (r, c, ch) = map;
    Sequential::new(vec![
        Layer::BatchNorm(BatchNorm::new(ch)),
        Layer::Dense(Dense::new(r * c * ch, embedding, rng)),
    ])
}

fn head(embedding: usize, width: usize, classes: usize, rng: &mut ChaCha8Rng) -> Sequential {
    Sequential::new(vec![
        Layer::Dense(Dense::new(embedding, width, rng)),
        Layer::relu(),
        Layer::Dense(Dense::new(width, width, rng)),
        Layer::relu(),
        Layer::Dense(Dense::new(width, classes, rng)),
    ])
}

impl ParallelNetMini {
    /// Builds a freshly initialized network; all randomness comes from
    /// `config.seed`.
    pub fn new(config: FusionConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let per_block = match config.backbone {
            BackboneKind::Vgg => 2,
            BackboneKind::Compact => 1,
        };
        let stem = Sequential::new(vec![Layer::Conv2d(Conv2d::new(
            1,
            3,
            (1, 1),
            1,
            Padding::Valid,
            &mut rng,
        ))]);
        let plain_image = conv_stack(3, &config.plain_widths, 2, &mut rng);
        let plain_speech = conv_stack(1, &config.plain_widths, 2, &mut rng);
        let backbone_image = conv_stack(3, &config.backbone_widths, per_block, &mut rng);
        let backbone_speech = conv_stack(3, &config.backbone_widths, per_block, &mut rng);
        let neck_plain_image = neck(config.plain_map(), config.embedding, &mut rng);
        let neck_plain_speech = neck(config.plain_map(), config.embedding, &mut rng);
        let (neck_backbone_image, neck_backbone_speech) = if config.topology.crosses_embeddings() {
            (
                Some(neck(config.backbone_map(), config.embedding, &mut rng)),
                Some(neck(config.backbone_map(), config.embedding, &mut rng)),
            )
        } else {
            (None, None)
        };
        let head_speech = head(config.embedding, config.head_width, config.classes, &mut rng);
        let head_image = head(config.embedding, config.head_width, config.classes, &mut rng);
        let head_product = head(config.embedding, config.head_width, config.classes, &mut rng);
        let fusion_weights = Param::new(Tensor::from_fn(&[3], |_| rng.gen_range(-0.1f32..0.1) as f64));
        Ok(ParallelNetMini {
            config,
            stem,
            plain_image,
            plain_speech,
            backbone_image,
            backbone_speech,
            neck_plain_image,
            neck_plain_speech,
            neck_backbone_image,
            neck_backbone_speech,
            head_speech,
            head_image,
            head_product,
            fusion_weights,
            cache: None,
        })
    }

    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    /// Raw (pre-softmax) late-fusion weights for the speech, image, and
    /// product branches.
    pub fn fusion_weights(&self) -> [f64; 3] {
        let w = self.fusion_weights.value.data();
        [w[0], w[1], w[2]]
    }

    pub fn set_fusion_weights(&mut self, w: [f64; 3]) {
        self.fusion_weights.value.data_mut().copy_from_slice(&w);
    }

    fn sections(&self) -> Vec<&Sequential> {
        let mut s = vec![
            &self.stem,
            &self.plain_image,
            &self.plain_speech,
            &self.backbone_image,
            &self.backbone_speech,
            &self.neck_plain_image,
            &self.neck_plain_speech,
        ];
        s.extend(self.neck_backbone_image.as_ref());
        s.extend(self.neck_backbone_speech.as_ref());
        s.extend([&self.head_speech, &self.head_image, &self.head_product]);
        s
    }

    fn sections_mut(&mut self) -> Vec<&mut Sequential> {
        let mut s = vec![
            &mut self.stem,
            &mut self.plain_image,
            &mut self.plain_speech,
            &mut self.backbone_image,
            &mut self.backbone_speech,
            &mut self.neck_plain_image,
            &mut self.neck_plain_speech,
        ];
        s.extend(self.neck_backbone_image.as_mut());
        s.extend(self.neck_backbone_speech.as_mut());
        s.extend([&mut self.head_speech, &mut self.head_image, &mut self.head_product]);
        s
    }

    /// All layers in checkpoint order.
    pub fn layers(&self) -> impl Iterator<Item = &Layer> {
        self.sections().into_iter().flat_map(|s| s.layers.iter())
    }

    /// Every trainable parameter in a fixed order, fusion weights last.
    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        let ParallelNetMini {
            stem,
            plain_image,
            plain_speech,
            backbone_image,
            backbone_speech,
            neck_plain_image,
            neck_plain_speech,
            neck_backbone_image,
            neck_backbone_speech,
            head_speech,
            head_image,
            head_product,
            fusion_weights,
            ..
        } = self;
        let mut sections = vec![
            stem,
            plain_image,
            plain_speech,
            backbone_image,
            backbone_speech,
            neck_plain_image,
            neck_plain_speech,
        ];
        sections.extend(neck_backbone_image.as_mut());
        sections.extend(neck_backbone_speech.as_mut());
        sections.extend([head_speech, head_image, head_product]);
        for s in sections {
            out.extend(s.params_mut());
        }
        out.push(fusion_weights);
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.layers()
            .flat_map(Layer::params)
            .map(|p| p.value.len())
            .sum::<usize>()
            + 3
    }

    fn check_inputs(&self, image: &Tensor, speech: &Tensor) -> Result<usize> {
        let (r, c) = (self.config.rows, self.config.cols);
        let batch = image.shape().first().copied().unwrap_or(0);
        let want_image = [batch, r, c, 3];
        if image.shape() != want_image {
            return Err(Error::shape(
                "fusion network",
                "image input",
                format!("{want_image:?}"),
                format!("{:?}", image.shape()),
            ));
        }
        let want_speech = [batch, r, c, 1];
        if speech.shape() != want_speech {
            return Err(Error::shape(
                "fusion network",
                "speech input",
                format!("{want_speech:?}"),
                format!("{:?}", speech.shape()),
            ));
        }
        Ok(batch)
    }

    fn masked_inputs(&self, image: &Tensor, speech: &Tensor) -> (Tensor, Tensor) {
        match self.config.input_mode {
            InputMode::Both => (image.clone(), speech.clone()),
            InputMode::ImageOnly => (image.clone(), Tensor::zeros(speech.shape())),
            InputMode::SpeechOnly => (Tensor::zeros(image.shape()), speech.clone()),
        }
    }

    /// Class probabilities for a batch: image `(n, rows, cols, 3)`, speech
    /// `(n, rows, cols, 1)`, result `(n, classes)`.
    pub fn forward(&self, image: &Tensor, speech: &Tensor) -> Result<Tensor> {
        self.check_inputs(image, speech)?;
        let (image, speech) = self.masked_inputs(image, speech);
        let topo = self.config.topology;
        let stemmed = self.stem.forward(&speech)?;
        let t_pi = self.plain_image.forward(&image)?;
        let t_ps = self.plain_speech.forward(&speech)?;
        let t_bi = self.backbone_image.forward(&image)?;
        let t_bs = self.backbone_speech.forward(&stemmed)?;
        let (in_i, in_s) = if topo.crosses_maps() {
            (t_pi.add(&t_bs)?, t_ps.add(&t_bi)?)
        } else {
            (t_pi, t_ps)
        };
        let mut f_image = self.neck_plain_image.forward(&in_i)?;
        let mut f_speech = self.neck_plain_speech.forward(&in_s)?;
        if let (Some(nbi), Some(nbs)) = (&self.neck_backbone_image, &self.neck_backbone_speech) {
            f_image.add_assign(&nbs.forward(&t_bs)?)?;
            f_speech.add_assign(&nbi.forward(&t_bi)?)?;
        }
        let f_product = f_image.mul(&f_speech)?;
        let branch_logits = [
            self.head_speech.forward(&f_speech)?,
            self.head_image.forward(&f_image)?,
            self.head_product.forward(&f_product)?,
        ];
        mix(&branch_logits, &softmax(self.fusion_weights.value.data()))
    }

    /// Probabilities for a single unbatched pair.
    pub fn predict_one(&self, image: &Tensor, speech: &Tensor) -> Result<Vec<f64>> {
        Ok(self.forward(&image.batched(), &speech.batched())?.into_data())
    }

    /// Training-mode forward pass (batch statistics, cached activations).
    pub fn forward_train(&mut self, image: &Tensor, speech: &Tensor) -> Result<Tensor> {
        self.check_inputs(image, speech)?;
        let (image, speech) = self.masked_inputs(image, speech);
        let topo = self.config.topology;
        let stemmed = self.stem.forward_train(&speech)?;
        let t_pi = self.plain_image.forward_train(&image)?;
        let t_ps = self.plain_speech.forward_train(&speech)?;
        let t_bi = self.backbone_image.forward_train(&image)?;
        let t_bs = self.backbone_speech.forward_train(&stemmed)?;
        let (in_i, in_s) = if topo.crosses_maps() {
            (t_pi.add(&t_bs)?, t_ps.add(&t_bi)?)
        } else {
            (t_pi, t_ps)
        };
        let mut f_image = self.neck_plain_image.forward_train(&in_i)?;
        let mut f_speech = self.neck_plain_speech.forward_train(&in_s)?;
        if let (Some(nbi), Some(nbs)) = (&mut self.neck_backbone_image, &mut self.neck_backbone_speech) {
            f_image.add_assign(&nbs.forward_train(&t_bs)?)?;
            f_speech.add_assign(&nbi.forward_train(&t_bi)?)?;
        }
        let f_product = f_image.mul(&f_speech)?;
        let branch_logits = [
            self.head_speech.forward_train(&f_speech)?,
            self.head_image.forward_train(&f_image)?,
            self.head_product.forward_train(&f_product)?,
        ];
        let weights = softmax(self.fusion_weights.value.data());
        let probabilities = mix(&branch_logits, &weights)?;
        self.cache = Some(FusionCache {
            f_image,
            f_speech,
            branch_logits,
            weights,
            probabilities: probabilities.clone(),
        });
        Ok(probabilities)
    }

    /// Back-propagates a gradient with respect to the output probabilities
    /// of the last `forward_train`, accumulating parameter gradients.
    pub fn backward(&mut self, grad_probabilities: &Tensor) -> Result<()> {
        let cache = self
            .cache
            .take()
            .ok_or_else(|| Error::invalid("backward call", "fusion network: no cached forward pass"))?;
        if grad_probabilities.shape() != cache.probabilities.shape() {
            return Err(Error::shape(
                "fusion network",
                "gradient shape",
                format!("{:?}", cache.probabilities.shape()),
                format!("{:?}", grad_probabilities.shape()),
            ));
        }
        let k = self.config.classes;
        let d_logits_data: Vec<f64> = cache
            .probabilities
            .data()
            .chunks_exact(k)
            .zip(grad_probabilities.data().chunks_exact(k))
            .flat_map(|(y, g)| softmax_backward(y, g))
            .collect();
        let d_logits = Tensor::new(cache.probabilities.shape().to_vec(), d_logits_data)?;

        let d_weights: Vec<f64> = cache
            .branch_logits
            .iter()
            .map(|o| o.data().iter().zip(d_logits.data()).map(|(a, b)| a * b).sum())
            .collect();
        let d_raw = softmax_backward(&cache.weights, &d_weights);
        for (g, d) in self.fusion_weights.grad.data_mut().iter_mut().zip(d_raw) {
            *g += d;
        }

        let mut d_f_speech = self.head_speech.backward(&d_logits.scale(cache.weights[0]))?;
        let mut d_f_image = self.head_image.backward(&d_logits.scale(cache.weights[1]))?;
        let d_f_product = self.head_product.backward(&d_logits.scale(cache.weights[2]))?;
        d_f_image.add_assign(&d_f_product.mul(&cache.f_speech)?)?;
        d_f_speech.add_assign(&d_f_product.mul(&cache.f_image)?)?;

        let d_in_i = self.neck_plain_image.backward(&d_f_image)?;
        let d_in_s = self.neck_plain_speech.backward(&d_f_speech)?;
        let mut d_t_bs: Option<Tensor> = None;
        let mut d_t_bi: Option<Tensor> = None;
        if let (Some(nbi), Some(nbs)) = (&mut self.neck_backbone_image, &mut self.neck_backbone_speech) {
            d_t_bs = Some(nbs.backward(&d_f_image)?);
            d_t_bi = Some(nbi.backward(&d_f_speech)?);
        }
        if self.config.topology.crosses_maps() {
            d_t_bs = Some(accumulate(d_t_bs, &d_in_i)?);
            d_t_bi = Some(accumulate(d_t_bi, &d_in_s)?);
        }
        self.plain_image.backward(&d_in_i)?;
        self.plain_speech.backward(&d_in_s)?;
        let d_t_bi = d_t_bi.expect("every topology routes the image backbone somewhere");
        let d_t_bs = d_t_bs.expect("every topology routes the speech backbone somewhere");
        self.backbone_image.backward(&d_t_bi)?;
        let d_stem = self.backbone_speech.backward(&d_t_bs)?;
        self.stem.backward(&d_stem)?;
        Ok(())
    }

    // -- checkpoints --------------------------------------------------------

    /// Writes the layer container followed by the model block: the
    /// `key = value` configuration (u32 length + UTF-8) and the raw fusion
    /// weights as one tensor record.
    pub fn save<W: Write>(&self, w: &mut W) -> Result<()> {
        write_layers(w, self.layers())?;
        let kv = self.config.to_kv();
        write_u32(w, kv.len() as u32)?;
        w.write_all(kv.as_bytes())?;
        write_tensor(w, &self.fusion_weights.value)?;
        Ok(())
    }

    pub fn load<R: Read>(r: &mut R) -> Result<Self> {
        let layers = read_layers(r)?;
        let len = read_u32(r)? as usize;
        if len > 1 << 16 {
            return Err(Error::Checkpoint(format!("configuration block of {len} bytes")));
        }
        let mut buf = vec![0u8; len];
        r.read_exact(&mut buf)
            .map_err(|_| Error::Checkpoint("unexpected end of file in configuration block".into()))?;
        let text = String::from_utf8(buf).map_err(|_| Error::Checkpoint("configuration is not UTF-8".into()))?;
        let config = FusionConfig::default()
            .apply_kv(&text)
            .map_err(|e| Error::Checkpoint(format!("configuration: {e}")))?;
        let fusion = read_tensor(r)?;
        if fusion.shape() != [3] {
            return Err(Error::Checkpoint(format!(
                "fusion weights have shape {:?}",
                fusion.shape()
            )));
        }
        let mut model = ParallelNetMini::new(config)?;
        let expected = model.layers().count();
        if layers.len() != expected {
            return Err(Error::Checkpoint(format!(
                "configuration implies {expected} layers, file has {}",
                layers.len()
            )));
        }
        let mut stored = layers.into_iter();
        for (index, slot) in model
            .sections_mut()
            .into_iter()
            .flat_map(|s| s.layers.iter_mut())
            .enumerate()
        {
            let layer = stored.next().unwrap();
            let same_shapes = layer
                .tensors()
                .iter()
                .map(|t| t.shape())
                .eq(slot.tensors().iter().map(|t| t.shape()));
            if layer.kind() != slot.kind() || layer.hyperparameters() != slot.hyperparameters() || !same_shapes {
                return Err(Error::Checkpoint(format!(
                    "layer {index}: file has {layer}, configuration expects {slot}"
                )));
            }
            *slot = layer;
        }
        model.fusion_weights = Param::new(fusion);
        Ok(model)
    }

    pub fn save_to_path(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.save(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load_from_path(path: impl AsRef<Path>) -> Result<Self> {
        Self::load(&mut BufReader::new(File::open(path)?))
    }
}

fn accumulate(acc: Option<Tensor>, t: &Tensor) -> Result<Tensor> {
    match acc {
        Some(mut a) => {
            a.add_assign(t)?;
            Ok(a)
        }
        None => Ok(t.clone()),
    }
}

/// Weighted sum of the branch logits followed by a row softmax.
fn mix(branch_logits: &[Tensor; 3], weights: &[f64]) -> Result<Tensor> {
    let mut mixed = branch_logits[0].scale(weights[0]);
    mixed.add_assign(&branch_logits[1].scale(weights[1]))?;
    mixed.add_assign(&branch_logits[2].scale(weights[2]))?;
    let out = softmax_last_axis(&mixed);
    if !out.all_finite() {
        return Err(Error::NonFinite {
            context: "late fusion".into(),
        });
    }
    Ok(out)
}

impl Predictor for ParallelNetMini {
    fn predict(&self, image: &Tensor, speech: &Tensor) -> Result<Vec<f64>> {
        self.predict_one(image, speech)
    }

    fn input_extent(&self) -> Option<(usize, usize)> {
        Some((self.config.rows, self.config.cols))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(topology: Topology) -> FusionConfig {
        FusionConfig {
            rows: 8,
            cols: 8,
            plain_widths: vec![2, 3],
            backbone_widths: vec![2, 3],
            embedding: 5,
            head_width: 6,
            ..FusionConfig::default()
        }
        .with_topology(topology)
        .with_seed(5)
    }

    fn inputs(seed: u64, batch: usize) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            Tensor::from_fn(&[batch, 8, 8, 3], |_| rng.gen::<f64>()),
            Tensor::from_fn(&[batch, 8, 8, 1], |_| rng.gen::<f64>()),
        )
    }

    #[test]
    fn intermediate_fusion_hand_example() {
        let (fi, fs, fm) = intermediate_fusion(&[1.0, 2.0], &[0.0, 1.0], &[1.0, 0.0], &[3.0, 4.0]).unwrap();
        assert_eq!(fi, vec![4.0, 6.0]);
        assert_eq!(fs, vec![1.0, 1.0]);
        assert_eq!(fm, vec![4.0, 6.0]);
    }

    #[test]
    fn intermediate_fusion_zero_and_gating() {
        let z = [0.0; 3];
        let (fi, fs, fm) = intermediate_fusion(&z, &z, &z, &z).unwrap();
        assert!(fi.iter().chain(&fs).chain(&fm).all(|&v| v == 0.0));
        // F_s = 0 silences the product no matter how strong F_i is.
        let (_, _, fm) = intermediate_fusion(&[9.0, -7.0], &[1.0, -2.0], &[-1.0, 2.0], &[3.0, 3.0]).unwrap();
        assert_eq!(fm, vec![0.0, 0.0]);
        assert!(intermediate_fusion(&[1.0], &[1.0, 2.0], &[1.0], &[1.0]).is_err());
    }

    #[test]
    fn late_fusion_examples() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [0.0, -1.0, 5.0, 2.0];
        let c = [2.0, 2.0, 2.0, 0.0];
        let equal = late_fusion(&a, &b, &c, [0.3, 0.3, 0.3]).unwrap();
        for k in 0..4 {
            assert!((equal.logits[k] - (a[k] + b[k] + c[k]) / 3.0).abs() < 1e-12);
        }
        let same = late_fusion(&a, &a, &a, [2.0, -1.0, 0.5]).unwrap();
        for k in 0..4 {
            assert!((same.logits[k] - a[k]).abs() < 1e-12);
        }
        let z = [0.0; 4];
        let ln2 = late_fusion(&[1.0, 0.0, 0.0, 0.0], &z, &z, [2f64.ln(), 0.0, 0.0]).unwrap();
        assert!((ln2.weights[0] - 0.5).abs() < 1e-12);
        assert!((ln2.weights[1] - 0.25).abs() < 1e-12);
        assert!((ln2.logits[0] - 0.5).abs() < 1e-12);
        assert!(ln2.logits[1..].iter().all(|&v| v == 0.0));
        assert!((ln2.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn every_topology_produces_probabilities() {
        for topo in Topology::ALL {
            let model = ParallelNetMini::new(tiny(topo)).unwrap();
            let (img, sp) = inputs(1, 3);
            let out = model.forward(&img, &sp).unwrap();
            assert_eq!(out.shape(), &[3, 4]);
            for row in out.data().chunks(4) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9, "{topo}");
            }
        }
    }

    #[test]
    fn argmax_invariant_to_fusion_weight_shift() {
        let mut model = ParallelNetMini::new(tiny(Topology::Proposed)).unwrap();
        let (img, sp) = inputs(2, 4);
        let before = model.forward(&img, &sp).unwrap();
        let w = model.fusion_weights();
        model.set_fusion_weights([w[0] + 3.0, w[1] + 3.0, w[2] + 3.0]);
        let after = model.forward(&img, &sp).unwrap();
        for (a, b) in before.data().chunks(4).zip(after.data().chunks(4)) {
            assert_eq!(crate::tensor::argmax(a), crate::tensor::argmax(b));
        }
    }

    #[test]
    fn wrong_input_shape_is_reported() {
        let model = ParallelNetMini::new(tiny(Topology::Proposed)).unwrap();
        let err = model
            .predict_one(&Tensor::zeros(&[8, 8, 1]), &Tensor::zeros(&[8, 8, 1]))
            .unwrap_err();
        assert!(matches!(err, Error::Shape { ref dimension, .. } if dimension == "image input"));
    }

    #[test]
    fn map_crossing_requires_matching_maps() {
        let mut cfg = tiny(Topology::Baseline2CrisscrossBefore);
        cfg.backbone_widths = vec![2, 4];
        assert!(ParallelNetMini::new(cfg.clone()).is_err());
        cfg.topology = Topology::Proposed;
        assert!(ParallelNetMini::new(cfg).is_ok());
    }

    #[test]
    fn kv_round_trip() {
        let cfg = tiny(Topology::Baseline1TwoCrisscross);
        let parsed = FusionConfig::default().apply_kv(&cfg.to_kv()).unwrap();
        assert_eq!(parsed, cfg);
        assert!(FusionConfig::default().apply_kv("colour = blue").is_err());
        let with_comment = FusionConfig::default()
            .apply_kv("# comment\ntopology = baseline3\n\nbackbone = vgg  # override\n")
            .unwrap();
        assert_eq!(with_comment.topology, Topology::Baseline3CrisscrossAfter);
        assert_eq!(with_comment.backbone, BackboneKind::Vgg);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        for topo in Topology::ALL {
            let model = ParallelNetMini::new(tiny(topo)).unwrap();
            let mut bytes = Vec::new();
            model.save(&mut bytes).unwrap();
            let loaded = ParallelNetMini::load(&mut bytes.as_slice()).unwrap();
            let mut again = Vec::new();
            loaded.save(&mut again).unwrap();
            assert_eq!(bytes, again, "{topo}");
            let (img, sp) = inputs(9, 2);
            assert_eq!(model.forward(&img, &sp).unwrap(), loaded.forward(&img, &sp).unwrap());
        }
    }

    #[test]
    fn checkpoint_rejects_mismatched_configuration() {
        let model = ParallelNetMini::new(tiny(Topology::Proposed)).unwrap();
        let mut bytes = Vec::new();
        model.save(&mut bytes).unwrap();
        let needle = b"embedding = 5";
        let pos = bytes.windows(needle.len()).position(|w| w == needle).unwrap();
        bytes[pos + "embedding = ".len()] = b'7';
        assert!(matches!(
            ParallelNetMini::load(&mut bytes.as_slice()),
            Err(Error::Checkpoint(_))
        ));
    }
}
