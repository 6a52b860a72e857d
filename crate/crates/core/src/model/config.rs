use serde::{Deserialize, Serialize};

use super::ModelError;
use crate::oracle::Task;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    QualityOnly,
    IntelligibilityOnly,
    MultiTask,
}

impl TaskMode {
    pub fn tasks(self) -> &'static [Task] {
        match self {
            TaskMode::QualityOnly => &[Task::Quality],
            TaskMode::IntelligibilityOnly => &[Task::Intelligibility],
            TaskMode::MultiTask => &[Task::Quality, Task::Intelligibility],
        }
    }

    pub fn has(self, t: Task) -> bool {
        self.tasks().contains(&t)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    AudioOnly,
    Multimodal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub n_freq: usize,
    /// Visual embedding width before scaling; equals the last ResNet stage width.
    pub visual_width: usize,
    /// Channels of the 3D convolution front-end before scaling.
    pub visual_stem_channels: usize,
    pub conv_channels: Vec<usize>,
    pub conv_layers_per_block: usize,
    pub blstm_width: usize,
    pub dense_width: usize,
    pub dropout: f64,
    pub attention_heads: usize,
    pub tasks: TaskMode,
    pub modality: Modality,
    pub alpha_q: f64,
    pub alpha_i: f64,
    pub beta: f64,
    pub gamma: f64,
    pub width_multiplier: f64,
    pub frame_size: usize,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_freq: 257,
            visual_width: 512,
            visual_stem_channels: 64,
            conv_channels: vec![16, 32, 64, 128],
            conv_layers_per_block: 3,
            blstm_width: 128,
            dense_width: 128,
            dropout: 0.3,
            attention_heads: 1,
            tasks: TaskMode::MultiTask,
            modality: Modality::Multimodal,
            alpha_q: 1.0,
            alpha_i: 1.0,
            beta: 1.0,
            gamma: 1.0,
            width_multiplier: 1.0,
            frame_size: 88,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl ModelConfig {
    pub fn scaled(&self, base: usize) -> usize {
        ((base as f64 * self.width_multiplier).round() as usize).max(1)
    }

    /// Visual embedding width d_v.
    pub fn d_v(&self) -> usize {
        // ResNet stages double three times from the stem width
        self.scaled(self.visual_stem_channels) * 8
    }

    /// Attention / head width d_h.
    pub fn d_h(&self) -> usize {
        self.scaled(self.dense_width)
    }

    /// Frame-loss weight of `task`.
    pub fn alpha(&self, task: Task) -> f64 {
        match task {
            Task::Quality => self.alpha_q,
            Task::Intelligibility => self.alpha_i,
        }
    }

    /// Effective task weight; zero for tasks the mode leaves out.
    pub fn task_weight(&self, task: Task) -> f64 {
        if !self.tasks.has(task) {
            return 0.0;
        }
        match task {
            Task::Quality => self.beta,
            Task::Intelligibility => self.gamma,
        }
    }

    /// Trunk feature width after the convolutional blocks.
    pub fn conv_out_width(&self) -> usize {
        let mut w = self.n_freq + self.d_v();
        for _ in &self.conv_channels {
            w = (w - 1) / 2 + 1;
        }
        w
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::Config(m));
        if !(self.width_multiplier > 0.0 && self.width_multiplier <= 1.0) {
            return bad(format!("width_multiplier must be in (0, 1], got {}", self.width_multiplier));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout must be in [0, 1), got {}", self.dropout));
        }
        if self.attention_heads != 1 {
            return bad("only single-head attention is supported".into());
        }
        if self.conv_channels.is_empty() || self.conv_layers_per_block == 0 {
            return bad("need at least one convolutional block and layer".into());
        }
        for (name, v) in [("alpha_q", self.alpha_q), ("alpha_i", self.alpha_i), ("beta", self.beta), ("gamma", self.gamma)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number, got {v}"));
            }
        }
        if self.tasks.tasks().iter().all(|&t| self.task_weight(t) == 0.0) {
            return bad("task weights beta and gamma are both zero for the active tasks".into());
        }
        if self.n_freq == 0 || self.frame_size < 8 {
            return bad("n_freq must be positive and frame_size at least 8".into());
        }
        Ok(())
    }
}
