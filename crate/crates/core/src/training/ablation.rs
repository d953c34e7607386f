use std::path::Path;

use super::trainer::{evaluate, train, TrainConfig};
use crate::anchor::PamConfig;
use crate::data::Sample;
use crate::error::Result;
use crate::network::{manifest_hash, save_checkpoint};

/// One ablation configuration: loss and pixel anchor flags.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AblationRow {
    pub name: &'static str,
    pub use_focal: bool,
    pub use_sa1: bool,
    pub use_topk: bool,
    pub use_sa2: bool,
}

const fn row(
    name: &'static str,
    use_focal: bool,
    use_sa1: bool,
    use_topk: bool,
    use_sa2: bool,
) -> AblationRow {
    AblationRow {
        name,
        use_focal,
        use_sa1,
        use_topk,
        use_sa2,
    }
}

/// The six standard rows, in table order.
pub const ABLATION_ROWS: [AblationRow; 6] = [
    row("Baseline", false, false, false, false),
    row("FL", true, false, false, false),
    row("PAM(SA_1&Top_k&SA_2)", false, true, true, true),
    row("FL&PAM(SA_1&Top_k)", true, true, true, false),
    row("FL&PAM(Top_k&SA_2)", true, false, true, true),
    row("Ours(all)", true, true, true, true),
];

impl AblationRow {
    /// Directory-safe form of the name.
    pub fn slug(&self) -> String {
        self.name
            .chars()
            .map(|c| {
                if c.is_ascii_alphanumeric() {
                    c.to_ascii_lowercase()
                } else {
                    '_'
                }
            })
            .collect::<String>()
            .trim_matches('_')
            .to_string()
    }

    /// `base` with this row's flags applied. A row with every anchor flag
    /// off has no pixel anchor module at all.
    pub fn apply(&self, base: &TrainConfig) -> TrainConfig {
        let mut cfg = base.clone();
        cfg.loss.use_focal = self.use_focal;
        cfg.model.pam = (self.use_sa1 || self.use_topk || self.use_sa2).then(|| PamConfig {
            use_sa1: self.use_sa1,
            use_topk: self.use_topk,
            use_sa2: self.use_sa2,
            ..base.model.pam.unwrap_or_else(PamConfig::full)
        });
        cfg
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AblationResult {
    pub name: String,
    pub iou: f64,
    pub dice: f64,
    pub specificity: f64,
    /// Mean training loss of the first and last epoch.
    pub first_loss: f64,
    pub final_loss: f64,
    /// Hash of the saved checkpoint manifest, when checkpoints were written.
    pub manifest_hash: Option<String>,
}

/// Trains every row with the shared seed and evaluates the final parameters
/// on `test`. With `out`, each row's checkpoint goes to `out/<slug>/`.
pub fn run_ablation(
    train_set: &[Sample],
    test_set: &[Sample],
    rows: &[AblationRow],
    base: &TrainConfig,
    out: Option<&Path>,
) -> Result<Vec<AblationResult>> {
    let mut results = Vec::with_capacity(rows.len());
    for r in rows {
        let cfg = r.apply(base);
        let outcome = train(train_set, test_set, &cfg)?;
        let m = evaluate(&outcome.model, &outcome.final_params, test_set)?
            .mean()
            .expect("nonempty test set");
        let manifest_hash = match out {
            Some(dir) => {
                let dir = dir.join(r.slug());
                let run = format!("{} {}", r.name, cfg.run_description());
                save_checkpoint(&dir, &outcome.model, &outcome.final_params, &run)?;
                Some(manifest_hash(&dir)?)
            }
            None => None,
        };
        results.push(AblationResult {
            name: r.name.to_string(),
            iou: m.iou,
            dice: m.dice,
            specificity: m.specificity,
            first_loss: outcome.log[0].train_loss,
            final_loss: outcome.log.last().expect("epochs ≥ 1").train_loss,
            manifest_hash,
        });
    }
    Ok(results)
}

pub fn ablation_csv(results: &[AblationResult]) -> String {
    let mut s = String::from("method,iou,dice,specificity\n");
    for r in results {
        s.push_str(&format!(
            "{},{:.2},{:.2},{:.2}\n",
            r.name, r.iou, r.dice, r.specificity
        ));
    }
    s
}
