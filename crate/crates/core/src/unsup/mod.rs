//! Label-free tuning on images: the dual-branch trainer, inference and the
//! supervised alignment objective.

mod augment;
pub mod prompt;
mod train;

use std::collections::HashSet;

use crate::encoders::Image;
use crate::error::{Error, Result};

pub use augment::{AugOp, AugmentConfig, AugmentKind, AugmentationPolicy};
pub use prompt::{PromptInit, PromptVector};
pub use train::{
    infer, predict_logits, strong_branch, supervised_alignment_loss, train_stage2, weak_branch,
    BatchStats, BranchViews, Distance, DualBranch, SelectionMode, Stage2Config, Stage2Epoch,
    Stage2Outcome, TrainLog, UpdateSchedule,
};

#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledItem {
    pub item_id: String,
    pub image: Image,
}

/// Training images. No labels: the optimizer cannot see them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct UnlabeledDataset {
    items: Vec<UnlabeledItem>,
}

impl UnlabeledDataset {
    pub fn new(items: Vec<UnlabeledItem>) -> Result<Self> {
        let mut seen = HashSet::new();
        for it in &items {
            if !seen.insert(it.item_id.as_str()) {
                return Err(Error::data(format!("duplicate item id {:?}", it.item_id)));
            }
        }
        Ok(Self { items })
    }

    pub fn items(&self) -> &[UnlabeledItem] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// An image with its class index, for evaluation and the supervised
/// alignment objective.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledSample {
    pub item_id: String,
    pub image: Image,
    pub label: usize,
}

impl LabeledSample {
    /// Drops the label.
    pub fn unlabeled(&self) -> UnlabeledItem {
        UnlabeledItem {
            item_id: self.item_id.clone(),
            image: self.image.clone(),
        }
    }
}
