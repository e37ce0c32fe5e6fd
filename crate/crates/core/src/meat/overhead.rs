use super::masks::HEADER_BYTES;
use crate::vit::ViTConfig;

/// Predicted storage for a backbone plus a number of mask files.
#[derive(Clone, Debug, PartialEq)]
pub struct OverheadReport {
    pub num_tasks: usize,
    /// `L·(n + d·d' + d'·d)`
    pub mask_bits_per_task: usize,
    /// Bit-packed mask bytes per task (each bitset rounded up to whole bytes).
    pub mask_payload_bytes_per_task: usize,
    /// Exact size of each task's mask file, header and head included.
    pub file_bytes: Vec<usize>,
    pub backbone_bytes: usize,
    pub total_bytes: usize,
    /// `total_bytes / backbone_bytes`
    pub multiplier: f64,
    /// `(total_bytes − backbone_bytes) / backbone_bytes`
    pub overhead_ratio: f64,
}

/// Bytes of the bit-packed masks for one task.
pub fn mask_payload_bytes(config: &ViTConfig) -> usize {
    let dd = config.embed_dim * config.ffn_hidden;
    config.layers * (config.num_image_tokens().div_ceil(8) + 2 * dd.div_ceil(8))
}

/// Exact `MEATMSK1` file size for a task whose head has `classes` outputs.
pub fn mask_file_bytes(config: &ViTConfig, classes: usize) -> usize {
    HEADER_BYTES + mask_payload_bytes(config) + 4 + 8 * (config.embed_dim * classes + classes)
}

/// Storage of one float64 backbone.
pub fn backbone_bytes(config: &ViTConfig) -> usize {
    let (d, dff, t) = (config.embed_dim, config.ffn_hidden, config.seq_len());
    let per_layer = 4 * d + 4 * (d * d + d) + (d * dff + dff) + (dff * d + d);
    8 * (config.patch_dim() * d + d + d + t * d + config.layers * per_layer + 2 * d)
}

/// Overhead of storing one mask file per task; `head_classes[i]` is the
/// number of classes of task `i`.
pub fn overhead_report(config: &ViTConfig, head_classes: &[usize]) -> OverheadReport {
    let dd = config.embed_dim * config.ffn_hidden;
    let file_bytes: Vec<usize> = head_classes.iter().map(|&c| mask_file_bytes(config, c)).collect();
    let backbone = backbone_bytes(config);
    let extra: usize = file_bytes.iter().sum();
    let total = backbone + extra;
    OverheadReport {
        num_tasks: head_classes.len(),
        mask_bits_per_task: config.layers * (config.num_image_tokens() + 2 * dd),
        mask_payload_bytes_per_task: mask_payload_bytes(config),
        file_bytes,
        backbone_bytes: backbone,
        total_bytes: total,
        multiplier: total as f64 / backbone as f64,
        overhead_ratio: extra as f64 / backbone as f64,
    }
}

/// Storage when every new task gets its own backbone and head, on top of
/// the shared base backbone.
pub fn individual_storage_bytes(config: &ViTConfig, head_classes: &[usize]) -> usize {
    let head = |c: usize| 8 * (config.embed_dim * c + c);
    let backbone = backbone_bytes(config);
    backbone + head_classes.iter().map(|&c| backbone + head(c)).sum::<usize>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::ViTModel;

    #[test]
    fn desk_config_mask_arithmetic() {
        let r = overhead_report(&ViTConfig::desk(), &[10]);
        assert_eq!(r.mask_bits_per_task, 65_600);
        assert_eq!(r.mask_payload_bytes_per_task, 8_200);
    }

    #[test]
    fn zero_tasks_zero_overhead() {
        let r = overhead_report(&ViTConfig::desk(), &[]);
        assert_eq!(r.total_bytes, r.backbone_bytes);
        assert_eq!(r.overhead_ratio, 0.0);
        assert_eq!(r.multiplier, 1.0);
    }

    #[test]
    fn backbone_bytes_match_model() {
        let cfg = ViTConfig::desk();
        let m = ViTModel::new(cfg, 0).unwrap();
        assert_eq!(backbone_bytes(&cfg), m.backbone().param_bytes());
    }

    #[test]
    fn individual_storage_scales_with_tasks() {
        let cfg = ViTConfig::desk();
        let b = backbone_bytes(&cfg);
        let total = individual_storage_bytes(&cfg, &[4, 4, 4]);
        let heads = 3 * 8 * (64 * 4 + 4);
        assert_eq!(total, 4 * b + heads);
    }
}
