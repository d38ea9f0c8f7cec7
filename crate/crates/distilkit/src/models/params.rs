//! Closed-form trainable-parameter counting.
//!
//! The formulas here are independent of model instantiation; a test
//! cross-checks them against the element counts of an actually built
//! model, exactly.

use super::{Arch, HeadKind, ModelConfig};
use crate::error::Result;

#[derive(Debug, Clone)]
pub struct ParamItem {
    pub name: String,
    pub count: u64,
}

/// Per-component parameter counts, in model order.
pub fn parameter_itemization(cfg: &ModelConfig) -> Result<Vec<ParamItem>> {
    cfg.validate()?;
    let mut items = Vec::new();
    let enc = cfg.encoder_channels as u64;

    let mut c_in = 1u64;
    for (i, (&k, _)) in cfg.encoder_kernels.iter().zip(&cfg.encoder_strides).enumerate() {
        items.push(ParamItem {
            name: format!("encoder.conv{i}"),
            count: k as u64 * c_in * enc + enc,
        });
        c_in = enc;
    }

    match cfg.arch {
        Arch::Transformer => {
            let d = cfg.hidden as u64;
            let ffn = cfg.ffn as u64;
            items.push(ParamItem { name: "frame_proj".into(), count: enc * d + d });
            items.push(ParamItem { name: "mask_embedding".into(), count: d });
            let kp = cfg.pos_conv_kernel as u64;
            let g = cfg.pos_conv_groups as u64;
            items.push(ParamItem { name: "pos_conv".into(), count: kp * (d / g) * d + d });
            for i in 0..cfg.num_layers {
                // two layer norms, q/k/v/o projections, two ffn affines
                let ln = 2 * (2 * d);
                let attn = 4 * (d * d + d);
                let ff = d * ffn + ffn + ffn * d + d;
                items.push(ParamItem { name: format!("layer{i}"), count: ln + attn + ff });
            }
            items.push(ParamItem { name: "final_norm".into(), count: 2 * d });
        }
        Arch::Bilstm => {
            items.push(ParamItem { name: "mask_embedding".into(), count: enc });
            let h = cfg.hidden as u64;
            let mut din = enc;
            for i in 0..cfg.num_layers {
                // per direction: 4 gates of (din·h + h² + h), single bias set
                items.push(ParamItem {
                    name: format!("bilstm{i}"),
                    count: 2 * 4 * (din * h + h * h + h),
                });
                din = 2 * h;
            }
        }
    }

    let out_dim = cfg.output_dim() as u64;
    let c = cfg.num_clusters as u64;
    let head = match cfg.head {
        HeadKind::Linear => ParamItem { name: "head.linear".into(), count: out_dim * c + c },
        HeadKind::Cosine => ParamItem {
            name: "head.cosine".into(),
            count: cfg.head_dim as u64 * out_dim + c * cfg.head_dim as u64,
        },
    };
    items.push(head);
    Ok(items)
}

/// Exact trainable-parameter total for a configuration.
pub fn count_parameters(cfg: &ModelConfig) -> Result<u64> {
    Ok(parameter_itemization(cfg)?.iter().map(|i| i.count).sum())
}
