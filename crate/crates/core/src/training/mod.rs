//! Soft Dice loss, Adam, rotation augmentation, the training loop and checkpoints.

mod adam;
mod augment;
mod checkpoint;
mod loss;
mod trainer;

pub use adam::{adam_step, AdamConfig, AdamState, ADAM_EPS};
pub use augment::{augment_rotate, rotate_sample, MAX_ANGLE_DEG};
pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
pub use loss::{foreground_soft_dice, soft_dice_loss, soft_dice_per_class, SoftDiceLoss, DICE_EPS};
pub use trainer::{
    format_log, loss_and_gradients, resume, train, train_with, validation_score, StepRecord, TrainConfig, TrainOutcome,
};
