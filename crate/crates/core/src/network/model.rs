use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::block::AnchorKanBlock;
use super::layers::{Conv, ConvNormAct};
use crate::anchor::PamConfig;
use crate::error::{Error, Result};
use crate::kan::KanConfig;
use crate::params::{Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Number of 2× down-sampling steps; inputs must be divisible by `2^DEPTH`.
pub const DEPTH: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub base_channels: usize,
    #[serde(default = "one")]
    pub in_channels: usize,
    #[serde(default = "two")]
    pub n_classes: usize,
    #[serde(default)]
    pub kan: KanConfig,
    /// `None` drops the pixel anchor module from every block.
    #[serde(default)]
    pub pam: Option<PamConfig>,
}

fn one() -> usize {
    1
}

fn two() -> usize {
    2
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            base_channels: 8,
            in_channels: 1,
            n_classes: 2,
            kan: KanConfig::default(),
            pam: Some(PamConfig::full()),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.in_channels == 0 || self.n_classes < 2 {
            return Err(Error::Config(format!(
                "need base_channels ≥ 1, in_channels ≥ 1, n_classes ≥ 2 (got {}, {}, {})",
                self.base_channels, self.in_channels, self.n_classes
            )));
        }
        self.kan.grid.validate()?;
        if let Some(pam) = &self.pam {
            pam.validate(8 * self.base_channels)?;
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical TOML rendering.
    pub fn hash(&self) -> String {
        let text = toml::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

/// Hooks for probing the wiring.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Replace every encoder skip tensor by zeros before fusion.
    pub zero_skips: bool,
}

/// One decoder stage: upsample → 3×3 conv → concat skip → 1×1 fuse.
#[derive(Clone, Debug, PartialEq)]
struct UpStage {
    conv: ConvNormAct,
    fuse: Conv,
}

/// U-shaped segmentation network.
///
/// ```text
/// enc0  C   H      ─────────────────────────────────────── dec0 → head
/// enc1  2C  H/2    ─────────────────────────────── dec1
/// enc2  4C  H/4    ─────────────────────── dec2
/// enc3  8C  H/8 → A1 → A2 → A3 → A4 → fuse(enc3)
/// ```
///
/// Encoder stages are two [`ConvNormAct`]s with 2× max pooling before every
/// stage except the first. Each encoder stage has one skip connection to
/// its mirrored decoder stage.
#[derive(Clone, Debug, PartialEq)]
pub struct MyGoModel {
    pub config: ModelConfig,
    encoder: Vec<[ConvNormAct; 2]>,
    blocks: Vec<AnchorKanBlock>,
    bottleneck_fuse: Conv,
    decoder: Vec<UpStage>,
    head: Conv,
}

impl MyGoModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let c = config.base_channels;
        let widths = [c, 2 * c, 4 * c, 8 * c];
        let mut encoder = Vec::new();
        let mut cin = config.in_channels;
        for (i, &w) in widths.iter().enumerate() {
            encoder.push([
                ConvNormAct::new(&format!("enc{i}.0"), cin, w),
                ConvNormAct::new(&format!("enc{i}.1"), w, w),
            ]);
            cin = w;
        }
        let blocks = (1..=4)
            .map(|i| AnchorKanBlock::new(&format!("akb{i}"), 8 * c, config.kan, config.pam))
            .collect::<Result<_>>()?;
        let bottleneck_fuse = Conv::new("fuse3", 16 * c, 8 * c, 1, true);
        let decoder = (0..3)
            .rev()
            .map(|i| UpStage {
                conv: ConvNormAct::new(&format!("dec{i}.up"), widths[i + 1], widths[i]),
                fuse: Conv::new(format!("dec{i}.fuse"), 2 * widths[i], widths[i], 1, true),
            })
            .collect();
        let head = Conv::new("head", c, config.n_classes, 1, true);
        Ok(MyGoModel {
            config,
            encoder,
            blocks,
            bottleneck_fuse,
            decoder,
            head,
        })
    }

    pub fn blocks(&self) -> &[AnchorKanBlock] {
        &self.blocks
    }

    /// Fresh parameters in canonical order.
    pub fn init(&self, rng: &mut impl Rng) -> Result<ParamStore> {
        let mut store = ParamStore::new();
        for stage in &self.encoder {
            for layer in stage {
                layer.init(&mut store, rng)?;
            }
        }
        for b in &self.blocks {
            b.init(&mut store, rng)?;
        }
        self.bottleneck_fuse.init(&mut store, rng)?;
        for d in &self.decoder {
            d.conv.init(&mut store, rng)?;
            d.fuse.init(&mut store, rng)?;
        }
        self.head.init(&mut store, rng)?;
        Ok(store)
    }

    /// Parameter names and shapes, in canonical order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(0);
        let store = self.init(&mut rng).expect("valid model initializes");
        store
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect()
    }

    pub fn param_count(&self) -> usize {
        let enc: usize = self
            .encoder
            .iter()
            .flatten()
            .map(ConvNormAct::param_count)
            .sum();
        let blocks: usize = self.blocks.iter().map(AnchorKanBlock::param_count).sum();
        let dec: usize = self
            .decoder
            .iter()
            .map(|d| d.conv.param_count() + d.fuse.param_count())
            .sum();
        enc + blocks + self.bottleneck_fuse.param_count() + dec + self.head.param_count()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let f = 1 << DEPTH;
        if shape.len() != 3 || shape[0] != self.config.in_channels {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("expected a {}×H×W image", self.config.in_channels),
            });
        }
        if shape[1] % f != 0 || shape[2] % f != 0 || shape[1] < 2 * f || shape[2] < 2 * f {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("H and W must be multiples of {f} and at least {}", 2 * f),
            });
        }
        Ok(())
    }

    /// Logits `n_classes×H×W` for an `in_channels×H×W` image.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, image: Var) -> Result<Var> {
        self.forward_with(tape, p, image, ForwardOptions::default())
    }

    pub fn forward_with(
        &self,
        tape: &mut Tape,
        p: &Bound,
        image: Var,
        opts: ForwardOptions,
    ) -> Result<Var> {
        self.check_input(tape.shape(image))?;
        let mut skips = Vec::with_capacity(self.encoder.len());
        let mut h = image;
        for (i, [a, b]) in self.encoder.iter().enumerate() {
            if i > 0 {
                h = tape.max_pool2(h)?;
            }
            h = a.forward(tape, p, h)?;
            h = b.forward(tape, p, h)?;
            skips.push(h);
        }
        if opts.zero_skips {
            for s in &mut skips {
                *s = tape.constant(Tensor::zeros(tape.shape(*s)));
            }
        }
        for blk in &self.blocks {
            h = blk.forward(tape, p, h)?;
        }
        let deepest = skips.pop().expect("four encoder stages");
        h = fuse(tape, p, &self.bottleneck_fuse, h, deepest)?;
        for d in &self.decoder {
            let skip = skips.pop().expect("one skip per decoder stage");
            h = tape.upsample2(h)?;
            h = d.conv.forward(tape, p, h)?;
            h = fuse(tape, p, &d.fuse, h, skip)?;
        }
        self.head.forward(tape, p, h)
    }

    /// Convenience forward on a constant tape.
    pub fn logits(&self, store: &ParamStore, image: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let p = store.bind_constant(&mut tape);
        let x = tape.constant(image.clone());
        let y = self.forward(&mut tape, &p, x)?;
        Ok(tape.value(y).clone())
    }
}

fn fuse(tape: &mut Tape, p: &Bound, conv: &Conv, x: Var, skip: Var) -> Result<Var> {
    let cat = tape.concat(&[x, skip], 0)?;
    let y = conv.forward(tape, p, cat)?;
    tape.silu(y)
}

/// Per-pixel argmax over the class axis of `n_classes×H×W` logits, as a
/// `H×W` tensor of class indices. Ties go to the lower class.
pub fn predict_mask(logits: &Tensor) -> Result<Tensor> {
    let s = logits.shape();
    if s.len() != 3 || s[0] < 2 {
        return Err(Error::InvalidShape {
            shape: s.to_vec(),
            reason: "expected n_classes×H×W logits".into(),
        });
    }
    let (k, hw) = (s[0], s[1] * s[2]);
    let d = logits.data();
    let mask = (0..hw)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if d[c * hw + i] > d[best * hw + i] {
                    best = c;
                }
            }
            best as f64
        })
        .collect();
    Tensor::new(vec![s[1], s[2]], mask)
}
