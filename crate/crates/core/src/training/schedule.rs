//! Warmup-then-cosine learning rate and layer-wise decay.

use std::f64::consts::PI;

/// Step-indexed schedule over `total` optimizer steps.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LrSchedule {
    pub base_lr: f64,
    pub warmup_steps: usize,
    pub total_steps: usize,
}

impl LrSchedule {
    pub fn new(base_lr: f64, warmup_epochs: usize, epochs: usize, steps_per_epoch: usize) -> Self {
        Self {
            base_lr,
            warmup_steps: warmup_epochs * steps_per_epoch,
            total_steps: epochs * steps_per_epoch,
        }
    }

    /// Rises linearly from 0 at step 0 to `base_lr` at `warmup_steps`, then
    /// follows a half cosine down to 0 at `total_steps`.
    pub fn lr_at(&self, step: usize) -> f64 {
        let step = step.min(self.total_steps);
        if step < self.warmup_steps {
            return self.base_lr * step as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        if span == 0 {
            return self.base_lr;
        }
        let progress = (step - self.warmup_steps) as f64 / span as f64;
        0.5 * self.base_lr * (1.0 + (PI * progress).cos())
    }

    /// Rate of the `k`-th update (0-based): the schedule at `k + 1`, so the
    /// first update is already nonzero and the last lands on the endpoint.
    pub fn lr_for_update(&self, k: usize) -> f64 {
        self.lr_at(k + 1)
    }
}

/// Multipliers of the `depth` encoder blocks, bottom to top: block `i`
/// (0-based) receives `decay^(depth − 1 − i)`, so the top block gets 1.
pub fn layer_decay_multipliers(depth: usize, decay: f64) -> Vec<f64> {
    (0..depth)
        .map(|i| decay.powi((depth - 1 - i) as i32))
        .collect()
}

/// Layer id of a parameter: 0 for embeddings and tokens, `i + 1` for encoder
/// block `i`, `depth` for everything above the encoder.
pub fn layer_id(name: &str, depth: usize) -> usize {
    if let Some(rest) = name.strip_prefix("encoder.blocks.") {
        let i: usize = rest
            .split('.')
            .next()
            .and_then(|s| s.parse().ok())
            .unwrap_or(depth);
        return (i + 1).min(depth);
    }
    if name.starts_with("encoder.patch_embed")
        || name.starts_with("encoder.pos")
        || name.starts_with("encoder.cls_token")
    {
        return 0;
    }
    depth
}

/// Learning-rate multiplier `decay^(depth − layer_id)`.
pub fn layer_scale(name: &str, depth: usize, decay: f64) -> f64 {
    decay.powi((depth - layer_id(name, depth)) as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints() {
        let s = LrSchedule::new(0.0024, 5, 50, 10);
        assert_eq!(s.lr_at(0), 0.0);
        assert_eq!(s.lr_at(50), 0.0024);
        assert!(s.lr_at(500).abs() < 1e-18);
        assert_eq!(s.lr_for_update(499), s.lr_at(500));
    }

    #[test]
    fn four_block_multipliers() {
        let m = layer_decay_multipliers(4, 0.75);
        let expected = [0.421875, 0.5625, 0.75, 1.0];
        for (a, b) in m.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
        assert!((m[0] - 0.4219).abs() < 1e-4);
    }

    #[test]
    fn names_map_to_layers() {
        assert_eq!(layer_id("encoder.pos.temporal", 4), 0);
        assert_eq!(layer_id("encoder.blocks.0.attn.qkv.weight", 4), 1);
        assert_eq!(layer_id("encoder.blocks.3.norm1.gamma", 4), 4);
        assert_eq!(layer_id("head.fc.weight", 4), 4);
        assert_eq!(layer_scale("head.fc.bias", 4, 0.75), 1.0);
        assert_eq!(layer_scale("encoder.blocks.3.mlp.fc1.weight", 4, 0.75), 1.0);
        assert!(
            (layer_scale("encoder.patch_embed.proj.weight", 4, 0.75) - 0.75f64.powi(4)).abs()
                < 1e-15
        );
    }

    #[test]
    fn steps_never_jump_more_than_one_slice() {
        let per_epoch = 7;
        let s = LrSchedule::new(0.001, 10, 50, per_epoch);
        let bound = s.base_lr / per_epoch as f64;
        for k in 0..s.total_steps {
            assert!(
                (s.lr_at(k + 1) - s.lr_at(k)).abs() <= bound + 1e-15,
                "step {k}"
            );
        }
    }
}
