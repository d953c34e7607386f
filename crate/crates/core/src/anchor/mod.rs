//! Pixel anchor module: score every token, keep the top quarter as anchors,
//! refine them, and propagate them back to the full grid by cross-attention.

mod attention;
mod pam;

pub use attention::{saliency_scores, self_attention, Attention};
pub use pam::{
    anchor_count, pam_flops_estimate, pam_flops_with_k, AnchorSet, PamConfig, PamFlops, PamOutput,
    PixelAnchor, Selection, TokenGrid,
};

#[cfg(test)]
mod tests;
