use rand::Rng;
use serde::{Deserialize, Serialize};

use super::attention::{saliency_scores, self_attention, Attention};
use crate::error::{Error, Result};
use crate::params::{init, Bound, ParamStore};
use crate::tensor::{topk_indices, Tape, Tensor, Var};

/// Which stages of the pixel anchor module are active.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PamConfig {
    /// Self-attention over all tokens before anchor selection.
    pub use_sa1: bool,
    pub use_topk: bool,
    /// Self-attention among the selected anchors.
    pub use_sa2: bool,
    pub heads: usize,
}

impl Default for PamConfig {
    fn default() -> Self {
        PamConfig::full()
    }
}

impl PamConfig {
    pub fn full() -> Self {
        PamConfig {
            use_sa1: true,
            use_topk: true,
            use_sa2: true,
            heads: 1,
        }
    }

    pub fn validate(&self, dim: usize) -> Result<()> {
        if self.use_sa2 && !self.use_topk {
            return Err(Error::Config(
                "anchor self-attention requires top-k selection".into(),
            ));
        }
        if self.heads == 0 || dim % self.heads != 0 {
            return Err(Error::InvalidArgument(format!(
                "channel count {dim} not divisible by {} heads",
                self.heads
            )));
        }
        Ok(())
    }
}

/// Number of anchors kept out of `n` tokens.
pub fn anchor_count(n: usize) -> usize {
    (n / 4).max(1)
}

/// A `C×H×W` feature map viewed as `N×C` tokens, `N = H·W`.
#[derive(Clone, Copy, Debug)]
pub struct TokenGrid {
    pub tokens: Var,
    pub h: usize,
    pub w: usize,
}

impl TokenGrid {
    pub fn flatten(tape: &mut Tape, fm: Var) -> Result<Self> {
        let s = tape.shape(fm).to_vec();
        if s.len() != 3 {
            return Err(Error::InvalidShape {
                shape: s,
                reason: "expected a C×H×W feature map".into(),
            });
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let m = tape.reshape(fm, vec![c, h * w])?;
        let tokens = tape.transpose(m)?;
        Ok(TokenGrid { tokens, h, w })
    }

    pub fn n(&self) -> usize {
        self.h * self.w
    }

    /// Back to `C×H×W`; `tokens` may be any `N×C` matrix on the same grid.
    pub fn unflatten(&self, tape: &mut Tape, tokens: Var) -> Result<Var> {
        let s = tape.shape(tokens).to_vec();
        if s.len() != 2 || s[0] != self.n() {
            return Err(Error::ShapeMismatch {
                op: "unflatten",
                lhs: s,
                rhs: vec![self.n(), 0],
            });
        }
        let c = s[1];
        let m = tape.transpose(tokens)?;
        tape.reshape(m, vec![c, self.h, self.w])
    }
}

/// Anchors chosen during one forward pass.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorSet {
    /// Sorted by descending saliency, ties by ascending index.
    pub indices: Vec<usize>,
    /// Selection score of every token.
    pub saliency: Vec<f64>,
    /// Anchor features after refinement, `k×C`.
    pub refined: Tensor,
}

/// Tokens after the selection stage together with their scores.
#[derive(Clone, Debug)]
pub struct Selection {
    /// `N×C`: the input tokens, plus their self-attention output with SA1 on.
    pub tokens: Var,
    /// `N` scores summing to one; `None` when top-k is off.
    pub saliency: Option<Var>,
    pub indices: Option<Vec<usize>>,
}

#[derive(Debug)]
pub struct PamOutput {
    pub output: Var,
    pub anchors: Option<AnchorSet>,
}

/// Pixel anchor module over `dim` channels; parameter names start with `prefix`.
#[derive(Clone, Debug, PartialEq)]
pub struct PixelAnchor {
    pub prefix: String,
    pub dim: usize,
    pub config: PamConfig,
    sa1: Option<Attention>,
    sa2: Option<Attention>,
    prop: Attention,
}

impl PixelAnchor {
    pub fn new(prefix: impl Into<String>, dim: usize, config: PamConfig) -> Result<Self> {
        config.validate(dim)?;
        let prefix = prefix.into();
        let att = |n: &str| Attention::new(format!("{prefix}.{n}"), dim, config.heads);
        Ok(PixelAnchor {
            sa1: if config.use_sa1 {
                Some(att("sa1")?)
            } else {
                None
            },
            sa2: if config.use_sa2 {
                Some(att("sa2")?)
            } else {
                None
            },
            prop: att("prop")?,
            prefix,
            dim,
            config,
        })
    }

    fn score_name(&self) -> String {
        format!("{}.score", self.prefix)
    }

    /// Score projection is only needed to rank tokens without SA1.
    fn has_score_projection(&self) -> bool {
        self.config.use_topk && !self.config.use_sa1
    }

    pub fn attentions(&self) -> impl Iterator<Item = &Attention> {
        self.sa1
            .iter()
            .chain(self.sa2.iter())
            .chain(Some(&self.prop))
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        for a in self.attentions() {
            a.init(store, rng)?;
        }
        if self.has_score_projection() {
            let std = 1.0 / (self.dim as f64).sqrt();
            store.insert(self.score_name(), init::normal(&[self.dim, 1], std, rng))?;
        }
        Ok(())
    }

    /// Zeroes every value and output projection, making the module an identity map.
    pub fn zero_value_paths(&self, store: &mut ParamStore) -> Result<()> {
        for a in self.attentions() {
            a.zero_value_path(store)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let att = self.attentions().count() * 4 * self.dim * self.dim;
        att + if self.has_score_projection() {
            self.dim
        } else {
            0
        }
    }

    /// Scores `tokens: N×C` and picks the top `anchor_count(N)` of them.
    pub fn select(&self, tape: &mut Tape, p: &Bound, tokens: Var) -> Result<Selection> {
        let n = tape.shape(tokens)[0];
        let (tokens, attn) = match &self.sa1 {
            Some(sa1) => {
                let (t, a) = self_attention(tape, p, sa1, tokens)?;
                (tape.add(tokens, t)?, Some(a))
            }
            None => (tokens, None),
        };
        if !self.config.use_topk {
            return Ok(Selection {
                tokens,
                saliency: None,
                indices: None,
            });
        }
        let saliency = match attn {
            Some(a) => saliency_scores(tape, a)?,
            None => {
                let logits = tape.matmul(tokens, p.get(&self.score_name()))?;
                let logits = tape.reshape(logits, vec![n])?;
                tape.softmax(logits, 0)?
            }
        };
        let indices = topk_indices(tape.value(saliency).data(), anchor_count(n))?;
        Ok(Selection {
            tokens,
            saliency: Some(saliency),
            indices: Some(indices),
        })
    }

    /// `fm1: C×H×W → C×H×W`.
    ///
    /// Both self-attention stages are residual. Gathered anchors are
    /// multiplied by `N·saliency`, which keeps the scores on the gradient path
    /// without changing the average scale.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, fm1: Var) -> Result<PamOutput> {
        let grid = TokenGrid::flatten(tape, fm1)?;
        let n = grid.n();
        if n < 4 {
            return Err(Error::InvalidShape {
                shape: tape.shape(fm1).to_vec(),
                reason: "pixel anchor module needs at least 4 tokens".into(),
            });
        }
        let c = tape.shape(grid.tokens)[1];
        if c != self.dim {
            return Err(Error::ShapeMismatch {
                op: "pam_forward",
                lhs: tape.shape(fm1).to_vec(),
                rhs: vec![self.dim],
            });
        }
        let sel = self.select(tape, p, grid.tokens)?;
        let (anchors, info) = match (&sel.saliency, &sel.indices) {
            (Some(sal), Some(idx)) => {
                let gathered = tape.gather_rows(sel.tokens, idx)?;
                let col = tape.reshape(*sal, vec![n, 1])?;
                let w = tape.gather_rows(col, idx)?;
                let w = tape.scalar_mul(w, n as f64)?;
                let mut anchors = tape.scale_rows(gathered, w)?;
                if let Some(sa2) = &self.sa2 {
                    let refined = self_attention(tape, p, sa2, anchors)?.0;
                    anchors = tape.add(anchors, refined)?;
                }
                let info = AnchorSet {
                    indices: idx.clone(),
                    saliency: tape.value(*sal).data().to_vec(),
                    refined: tape.value(anchors).clone(),
                };
                (anchors, Some(info))
            }
            _ => (sel.tokens, None),
        };
        let (prop, _) = self.prop.forward(tape, p, sel.tokens, anchors)?;
        let prop = grid.unflatten(tape, prop)?;
        let output = tape.add(fm1, prop)?;
        Ok(PamOutput {
            output,
            anchors: info,
        })
    }
}

/// Multiply-accumulate counts of one [`PixelAnchor`] forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PamFlops {
    pub n: u64,
    pub k: u64,
    pub c: u64,
    /// Linear projections of every attention stage plus the score projection.
    pub projections: u64,
    /// Score and mixing products of SA1 (`2·N²·C`).
    pub selection: u64,
    /// Score and mixing products of SA2 (`2·k²·C`).
    pub anchor_attention: u64,
    /// Score and mixing products of the propagation stage (`2·N·k·C`).
    pub propagation: u64,
}

impl PamFlops {
    /// One of the two `N·k·C` products of the propagation stage.
    pub fn propagation_stage(&self) -> u64 {
        self.n * self.k * self.c
    }

    pub fn total(&self) -> u64 {
        self.projections + self.selection + self.anchor_attention + self.propagation
    }
}

/// Closed-form MAC count with the anchor count implied by `cfg`.
pub fn pam_flops_estimate(cfg: &PamConfig, c: usize, h: usize, w: usize) -> PamFlops {
    let n = h * w;
    let k = if cfg.use_topk { anchor_count(n) } else { n };
    pam_flops_with_k(cfg, c, n, k)
}

/// MAC count for an explicit anchor count `k` (`k = n` is full attention).
pub fn pam_flops_with_k(cfg: &PamConfig, c: usize, n: usize, k: usize) -> PamFlops {
    let (n, k, c) = (n as u64, k as u64, c as u64);
    let mut projections = 0;
    let mut selection = 0;
    let mut anchor_attention = 0;
    if cfg.use_sa1 {
        projections += 4 * n * c * c;
        selection += 2 * n * n * c;
    } else if cfg.use_topk {
        projections += n * c;
    }
    if cfg.use_sa2 {
        projections += 4 * k * c * c;
        anchor_attention += 2 * k * k * c;
    }
    // query and output projections run on all tokens, key and value on anchors
    projections += 2 * n * c * c + 2 * k * c * c;
    PamFlops {
        n,
        k,
        c,
        projections,
        selection,
        anchor_attention,
        propagation: 2 * n * k * c,
    }
}
