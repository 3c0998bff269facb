//! Ablation presets: named sweeps over one axis of the training config.

use ssdet::error::{Error, Result};
use ssdet::pseudo_label::EnsembleMode;
use ssdet::trainer::{LabelMode, UpdateRule};

use crate::config::ExperimentConfig;

pub struct Variant {
    pub name: String,
    pub config: ExperimentConfig,
}

pub const PRESET_NAMES: [&str; 7] = [
    "proposal-count",
    "update-rules",
    "soft-hard",
    "ensembles",
    "beta-sweep",
    "localization",
    "theta-sweep",
];

fn variant(base: &ExperimentConfig, name: &str, f: impl FnOnce(&mut ExperimentConfig)) -> Variant {
    let mut config = base.clone();
    f(&mut config);
    config.run_name = name.to_string();
    Variant {
        name: name.to_string(),
        config,
    }
}

/// Expand a preset into concrete per-variant configurations derived from the
/// base. Every variant shares the base corpus, split, and seed.
pub fn expand(preset: &str, base: &ExperimentConfig) -> Result<Vec<Variant>> {
    let v = match preset {
        "proposal-count" => [8usize, 32, 128, 640, 2000]
            .iter()
            .map(|&n| variant(base, &format!("n{n}"), |c| c.train.n_proposals = n))
            .collect(),
        "update-rules" => vec![
            variant(base, "ema_per_iter", |c| {
                c.train.update_rule = UpdateRule::EmaPerIter;
            }),
            // copy period scaled to toy-length runs so copies actually happen
            variant(base, "copy_every_k", |c| {
                c.train.update_rule = UpdateRule::CopyEveryK;
                c.train.copy_k = (c.train.total_iters / 8).max(1);
            }),
            variant(base, "fixed", |c| {
                c.train.update_rule = UpdateRule::Fixed;
            }),
        ],
        // ensemble disabled on both sides for a like-for-like comparison
        "soft-hard" => vec![
            variant(base, "soft", |c| {
                c.train.label_mode = LabelMode::Soft;
                c.train.beta = 0.5;
                c.train.ensemble_mode = EnsembleMode::None;
            }),
            variant(base, "hard", |c| {
                c.train.label_mode = LabelMode::Hard;
                c.train.beta = 0.1;
                c.train.theta = 0.7;
                c.train.ensemble_mode = EnsembleMode::None;
            }),
        ],
        "ensembles" => [
            ("none", EnsembleMode::None),
            ("random_aug", EnsembleMode::RandomAug),
            ("flip", EnsembleMode::Flip),
        ]
        .iter()
        .map(|&(name, mode)| variant(base, name, |c| c.train.ensemble_mode = mode))
        .collect(),
        "beta-sweep" => (1..=8)
            .map(|i| {
                let beta = i as f64 / 10.0;
                variant(base, &format!("beta{beta:.1}"), |c| c.train.beta = beta)
            })
            .collect(),
        "localization" => vec![
            variant(base, "with_localization", |c| {
                c.train.unsup_localization = true;
            }),
            variant(base, "without_localization", |c| {
                c.train.unsup_localization = false;
            }),
        ],
        "theta-sweep" => [0.5, 0.6, 0.7, 0.8, 0.9]
            .iter()
            .map(|&theta| {
                variant(base, &format!("theta{theta:.1}"), |c| {
                    c.train.label_mode = LabelMode::Hard;
                    c.train.beta = 0.1;
                    c.train.ensemble_mode = EnsembleMode::None;
                    c.train.theta = theta;
                })
            })
            .collect(),
        other => {
            return Err(Error::Config(format!(
                "unknown preset {other:?}; available: {}",
                PRESET_NAMES.join(", ")
            )))
        }
    };
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_enumerate_expected_axes() {
        let base = ExperimentConfig::defaults();
        let rules = expand("update-rules", &base).unwrap();
        assert_eq!(
            rules.iter().map(|v| v.name.as_str()).collect::<Vec<_>>(),
            vec!["ema_per_iter", "copy_every_k", "fixed"]
        );
        let betas = expand("beta-sweep", &base).unwrap();
        assert_eq!(betas.len(), 8);
        assert!((betas[0].config.train.beta - 0.1).abs() < 1e-12);
        assert!((betas[7].config.train.beta - 0.8).abs() < 1e-12);
        let props = expand("proposal-count", &base).unwrap();
        assert_eq!(
            props
                .iter()
                .map(|v| v.config.train.n_proposals)
                .collect::<Vec<_>>(),
            vec![8, 32, 128, 640, 2000]
        );
        let sh = expand("soft-hard", &base).unwrap();
        assert_eq!(sh.len(), 2);
        assert!((sh[1].config.train.beta - 0.1).abs() < 1e-12);
        assert_eq!(sh[0].config.train.ensemble_mode, EnsembleMode::None);
        let thetas = expand("theta-sweep", &base).unwrap();
        assert_eq!(thetas.len(), 5);
        assert!(thetas
            .iter()
            .all(|v| v.config.train.label_mode == LabelMode::Hard));
        assert!(expand("nope", &base).is_err());
        for name in PRESET_NAMES {
            assert!(!expand(name, &base).unwrap().is_empty());
        }
    }
}
