//! Named sweeps over the ablation axes.

use super::config::TrainConfig;
use crate::error::{Error, Result};
use crate::inference::AttentionMode;

pub const SWEEPS: [&str; 7] = [
    "resolution",
    "attention",
    "pseudolabel",
    "detail_loss",
    "lambda_d",
    "context_scale",
    "source_only",
];

/// Detail-loss weights of the `lambda_d` sweep.
pub const LAMBDA_D_VALUES: [f64; 6] = [0.0, 0.1, 0.2, 0.3, 0.5, 1.0];

/// Variants of `base` along one axis, each with a file-name-safe label.
pub fn sweep(name: &str, base: &TrainConfig) -> Result<Vec<(String, TrainConfig)>> {
    let with = |f: &dyn Fn(&mut TrainConfig)| {
        let mut c = base.clone();
        f(&mut c);
        c
    };
    let v: Vec<(String, TrainConfig)> = match name {
        "resolution" => vec![
            ("lr_only".into(), with(&|c| c.use_detail_crop = false)),
            ("hr_only".into(), with(&|c| c.use_context_crop = false)),
            ("hrda".into(), base.clone()),
        ],
        "attention" => [
            AttentionMode::Learned,
            AttentionMode::Average,
            AttentionMode::None,
        ]
        .into_iter()
        .map(|a| {
            (
                format!("attention_{a:?}").to_lowercase(),
                with(&|c| c.attention = a),
            )
        })
        .collect(),
        "pseudolabel" => vec![
            (
                "overlapping".into(),
                with(&|c| c.overlapping_pseudolabel = true),
            ),
            (
                "disjoint".into(),
                with(&|c| c.overlapping_pseudolabel = false),
            ),
        ],
        "detail_loss" => vec![
            ("detail_loss_on".into(), with(&|c| c.detail_loss = true)),
            ("detail_loss_off".into(), with(&|c| c.detail_loss = false)),
        ],
        "lambda_d" => LAMBDA_D_VALUES
            .iter()
            .map(|&l| (format!("lambda_d_{l}"), with(&|c| c.lambda_d = l)))
            .collect(),
        "context_scale" => [1usize, 2, 4]
            .iter()
            .map(|&s| (format!("scale_{s}"), with(&|c| c.crop.scale = s)))
            .collect(),
        "source_only" => vec![
            ("source_only".into(), with(&|c| c.lambda_t = 0.0)),
            ("hrda".into(), base.clone()),
        ],
        other => {
            return Err(Error::Config(format!(
                "unknown sweep '{other}' (known: {})",
                SWEEPS.join(", ")
            )))
        }
    };
    for (label, c) in &v {
        c.validate()
            .map_err(|e| Error::Config(format!("sweep {name}/{label}: {e}")))?;
    }
    Ok(v)
}
