//! Weight maps, losses and evaluation metrics.

pub mod components;
pub mod confusion;
pub mod loss;
pub mod weights;

pub use components::{connected_components, Components};
pub use confusion::{best_threshold, confusion_metrics, evaluate, roc_auc, threshold_grid, Confusion, MetricsReport};
pub use loss::{dice_loss, dice_value, per_sample_total_loss, total_loss, weighted_bce, weighted_bce_value};
pub use weights::{border_distances, class_balance_map, unet_weight_map, WeightMap, WeightMapConfig};
