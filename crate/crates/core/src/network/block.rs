use rand::Rng;

use super::layers::{Affine, Conv};
use crate::anchor::{PamConfig, PixelAnchor, TokenGrid};
use crate::error::{Error, Result};
use crate::kan::{KanConfig, KanLayer};
use crate::params::{init, Bound, ParamStore};
use crate::tensor::{Tape, Tensor, Var};

/// Token-mixing block on a `C×H×W` map:
///
/// ```text
/// x → 1×1 conv → tokens → LN → KAN(C→C) → 3×3 depthwise conv → LN → PAM → + x
/// ```
///
/// Without a PAM the normalized map is added to `x` directly.
#[derive(Clone, Debug, PartialEq)]
pub struct AnchorKanBlock {
    pub prefix: String,
    pub channels: usize,
    pub tokenizer: Conv,
    pub norm1: Affine,
    pub kan: KanLayer,
    pub dwconv: String,
    pub norm2: Affine,
    pub pam: Option<PixelAnchor>,
}

impl AnchorKanBlock {
    pub fn new(
        prefix: &str,
        channels: usize,
        kan: KanConfig,
        pam: Option<PamConfig>,
    ) -> Result<Self> {
        Ok(AnchorKanBlock {
            prefix: prefix.to_string(),
            channels,
            tokenizer: Conv::new(format!("{prefix}.tok"), channels, channels, 1, true),
            norm1: Affine::new(format!("{prefix}.ln1"), channels),
            kan: KanLayer::new(format!("{prefix}.kan"), channels, channels, kan),
            dwconv: format!("{prefix}.dw"),
            norm2: Affine::new(format!("{prefix}.ln2"), channels),
            pam: pam
                .map(|cfg| PixelAnchor::new(format!("{prefix}.pam"), channels, cfg))
                .transpose()?,
        })
    }

    pub fn init(&self, store: &mut ParamStore, rng: &mut impl Rng) -> Result<()> {
        let c = self.channels;
        self.tokenizer.init(store, rng)?;
        self.norm1.init(store)?;
        self.kan.init(store, rng)?;
        store.insert(format!("{}.w", self.dwconv), init::he(&[c, 3, 3], 9, rng))?;
        store.insert(format!("{}.b", self.dwconv), Tensor::zeros(&[c]))?;
        self.norm2.init(store)?;
        if let Some(pam) = &self.pam {
            pam.init(store, rng)?;
        }
        Ok(())
    }

    /// Zeroes the KAN, the depthwise kernel and every PAM value path, which
    /// turns the block into the identity.
    pub fn zero_residual_branch(&self, store: &mut ParamStore) -> Result<()> {
        store.get_mut(&self.kan.coeffs_name())?.data_mut().fill(0.0);
        if self.kan.config.use_base {
            store.get_mut(&self.kan.base_name())?.data_mut().fill(0.0);
        }
        for s in ["w", "b"] {
            store
                .get_mut(&format!("{}.{s}", self.dwconv))?
                .data_mut()
                .fill(0.0);
        }
        if let Some(pam) = &self.pam {
            pam.zero_value_paths(store)?;
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        let c = self.channels;
        let m = self.kan.config.grid.n_basis();
        let kan = c * m * c + if self.kan.config.use_base { c * c } else { 0 };
        self.tokenizer.param_count()
            + self.norm1.param_count()
            + kan
            + c * 9
            + c
            + self.norm2.param_count()
            + self.pam.as_ref().map_or(0, PixelAnchor::param_count)
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 3 || s[0] != self.channels {
            return Err(Error::ShapeMismatch {
                op: "anchor_kan_block",
                lhs: s,
                rhs: vec![self.channels],
            });
        }
        let t = self.tokenizer.forward(tape, p, x)?;
        let grid = TokenGrid::flatten(tape, t)?;
        let t = self.norm1.layer_norm(tape, p, grid.tokens)?;
        let t = self.kan.forward(tape, p, t)?;
        let fm = grid.unflatten(tape, t)?;
        let fm = tape.dwconv2d(
            fm,
            p.get(&format!("{}.w", self.dwconv)),
            Some(p.get(&format!("{}.b", self.dwconv))),
            1,
        )?;
        let tokens = TokenGrid::flatten(tape, fm)?.tokens;
        let tokens = self.norm2.layer_norm(tape, p, tokens)?;
        let fm1 = grid.unflatten(tape, tokens)?;
        let y = match &self.pam {
            Some(pam) => pam.forward(tape, p, fm1)?.output,
            None => fm1,
        };
        tape.add(x, y)
    }
}
